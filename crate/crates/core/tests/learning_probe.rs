use mossti_core::csnpc::{build, ModelConfig};
use mossti_core::dataio::{synth_generate, temporal_split};
use mossti_core::mossti::{confusion, scores, train, TrainConfig};
use std::time::Instant;

#[test]
#[ignore]
fn learning_probe() {
    let cfg = ModelConfig::new(20, 20, 30, [0.9; 4], [0.4; 4], 15.0).unwrap();
    let params = build(&cfg, 7).unwrap();
    let ds = synth_generate(20_000, 0.011, 30, &[0, 3, 7, 12, 21], None, 7).unwrap();
    let (train_all, test) = temporal_split(&ds, 6).unwrap();
    let (train_core, val) = temporal_split(&train_all, 5).unwrap();
    use mossti_core::dataio::normalize;
    let (train_n, val_n, stats) = normalize(&train_core, &val).unwrap();
    let test_n = mossti_core::dataio::apply_stats(&test, &stats);

    let tc = TrainConfig {
        epochs: 8,
        batch_size: 128,
        rng_seed: 1,
        early_stop_patience: 0,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let (trained, history) = train(params, &cfg, &train_n, &val_n, &tc).unwrap();
    for h in &history {
        eprintln!(
            "epoch {}: loss {:.4} thr {:.4} val recall {:.3} fpr {:.3} (tp={} fp={} tn={} fn={})",
            h.epoch, h.train_loss, h.threshold, h.val.tpr, h.val.fpr, h.val.tp, h.val.fp, h.val.tn, h.val.fn_
        );
    }
    eprintln!("total train time: {:?}", t0.elapsed());

    // Score distribution diagnostics on validation.
    let s = scores(&trained, &cfg, &val_n).unwrap();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (i, &l) in val_n.labels.iter().enumerate() {
        if l == 1 { pos.push(s[i]) } else { neg.push(s[i]) }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    eprintln!("val: {} pos mean {:.4}, {} neg mean {:.4}", pos.len(), mean(&pos), neg.len(), mean(&neg));

    // Held-out metrics at the last calibrated threshold.
    let thr = history.last().unwrap().threshold;
    let st = scores(&trained, &cfg, &test_n).unwrap();
    let m = confusion(&st, &test_n.labels, thr).unwrap();
    eprintln!("test: recall {:.3} fpr {:.3} acc {:.4}", m.tpr, m.fpr, m.accuracy);
}
