use anyhow::{bail, Context, Result};
use mossti_core::csnpc::{ModelConfig, ModelParams};
use mossti_core::dataio::NormStats;
use mossti_core::diffcore::Tensor;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Manifest schema version.
const FORMAT: &str = "csnpc-checkpoint/1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    offset: usize,
    len: usize,
}

/// Checkpoint manifest: model configuration, normalization statistics,
/// calibrated threshold, and the tensor directory for the f32 blob file that
/// sits next to it.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    created_by: String,
    seed: u64,
    schema_sha256: String,
    model: ModelConfig,
    #[serde(with = "crate::report::json_f64")]
    threshold: f64,
    norm_stats: NormStats,
    blob: String,
    blob_len: usize,
    tensors: Vec<TensorEntry>,
}

/// A reloaded checkpoint. Parameters come back as f64 tensors rounded through
/// the f32 blob.
#[derive(Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub model: ModelConfig,
    pub threshold: f64,
    pub norm_stats: NormStats,
    pub seed: u64,
    pub schema_sha256: String,
}

/// Writes `checkpoint.json` and `checkpoint.bin` (little-endian f32) into
/// `dir`, returning both paths.
pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams,
    model: &ModelConfig,
    norm_stats: &NormStats,
    threshold: f64,
    seed: u64,
    schema_sha256: &str,
) -> Result<(PathBuf, PathBuf)> {
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in params.named() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset,
            len: tensor.len(),
        });
        for v in tensor.data() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        offset += tensor.len();
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        created_by: format!("mossti {}", env!("CARGO_PKG_VERSION")),
        seed,
        schema_sha256: schema_sha256.to_string(),
        model: model.clone(),
        threshold,
        norm_stats: norm_stats.clone(),
        blob: "checkpoint.bin".to_string(),
        blob_len: offset,
        tensors,
    };
    let manifest_path = dir.join("checkpoint.json");
    let blob_path = dir.join("checkpoint.bin");
    std::fs::write(&blob_path, &blob)
        .with_context(|| format!("writing {}", blob_path.display()))?;
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .with_context(|| format!("writing {}", manifest_path.display()))?;
    Ok((manifest_path, blob_path))
}

/// Loads and integrity-checks a checkpoint from its manifest path.
pub fn load_checkpoint(manifest_path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(manifest_path)
        .with_context(|| format!("reading checkpoint manifest {}", manifest_path.display()))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .with_context(|| format!("parsing checkpoint manifest {}", manifest_path.display()))?;
    if manifest.format != FORMAT {
        bail!(
            "unsupported checkpoint format '{}' (expected '{FORMAT}')",
            manifest.format
        );
    }
    let declared: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if declared != manifest.blob_len {
        bail!(
            "checkpoint integrity error: tensor directory covers {declared} values but blob_len is {}",
            manifest.blob_len
        );
    }
    let blob_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let blob = std::fs::read(&blob_path)
        .with_context(|| format!("reading checkpoint blob {}", blob_path.display()))?;
    if blob.len() != manifest.blob_len * 4 {
        bail!(
            "checkpoint integrity error: blob {} holds {} bytes but the manifest declares {}",
            blob_path.display(),
            blob.len(),
            manifest.blob_len * 4
        );
    }
    let tensor_of = |name: &str| -> Result<Tensor> {
        let entry = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .with_context(|| format!("checkpoint tensor '{name}' missing from directory"))?;
        let mut data = Vec::with_capacity(entry.len);
        for i in 0..entry.len {
            let at = (entry.offset + i) * 4;
            let raw: [u8; 4] = blob[at..at + 4].try_into().expect("bounds checked");
            data.push(f32::from_le_bytes(raw) as f64);
        }
        Ok(Tensor::new(entry.shape.clone(), data)?)
    };
    let params = ModelParams {
        conv1_w: tensor_of("conv1_w")?,
        conv1_b: tensor_of("conv1_b")?,
        conv2_w: tensor_of("conv2_w")?,
        conv2_b: tensor_of("conv2_b")?,
        conv3_w: tensor_of("conv3_w")?,
        conv3_b: tensor_of("conv3_b")?,
        fc_w: tensor_of("fc_w")?,
        fc_b: tensor_of("fc_b")?,
    };
    Ok(Checkpoint {
        params,
        model: manifest.model,
        threshold: manifest.threshold,
        norm_stats: manifest.norm_stats,
        seed: manifest.seed,
        schema_sha256: manifest.schema_sha256,
    })
}

/// SHA-256 of a file's bytes, hex encoded; ties checkpoints to the schema
/// they were trained under.
pub fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use mossti_core::csnpc::build;

    fn test_model() -> (ModelParams, ModelConfig) {
        let model = ModelConfig::new(4, 3, 16, [0.9; 4], [0.5; 4], 15.0).unwrap();
        let params = build(&model, 11).unwrap();
        (params, model)
    }

    #[test]
    fn round_trip_stays_within_f32_precision() {
        let (params, model) = test_model();
        let stats = NormStats {
            mean: vec![0.5; 16],
            std: vec![2.0; 16],
        };
        let dir = tempfile::tempdir().unwrap();
        let (manifest, _) =
            save_checkpoint(dir.path(), &params, &model, &stats, 0.625, 9, "abc").unwrap();
        let loaded = load_checkpoint(&manifest).unwrap();
        assert_eq!(loaded.model, model);
        assert_eq!(loaded.threshold, 0.625);
        assert_eq!(loaded.norm_stats, stats);
        assert_eq!(loaded.seed, 9);
        for ((_, a), (_, b)) in params.named().iter().zip(loaded.params.named().iter()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= (x.abs() * 1e-6).max(1e-9), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn corrupted_blob_is_an_integrity_error() {
        let (params, model) = test_model();
        let stats = NormStats {
            mean: vec![0.0; 16],
            std: vec![1.0; 16],
        };
        let dir = tempfile::tempdir().unwrap();
        let (manifest, blob) =
            save_checkpoint(dir.path(), &params, &model, &stats, 0.5, 1, "x").unwrap();
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&blob, bytes).unwrap();
        let err = load_checkpoint(&manifest).unwrap_err();
        assert!(err.to_string().contains("integrity"), "{err}");
    }
}
