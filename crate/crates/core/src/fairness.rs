//! Sensitive-group partitioning, predictive equality, and the
//! performance-fairness trade-off.
//!
//! Predictive equality is the min/max ratio of the two groups' false-positive
//! rates: 1 means parity. The trade-off blends recall at the operating
//! threshold with predictive equality through a weight `alpha`.

use crate::dataio::SensitiveAttr;
use crate::mossti::{confusion, EvalMetrics, TrainError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FairnessError {
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Metrics(#[from] TrainError),
}

/// How one sensitive attribute splits into two groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub attribute: SensitiveAttr,
    /// Values at or above the cut belong to the high group.
    pub cut: f64,
    pub high_label: String,
    pub low_label: String,
}

impl GroupSpec {
    /// The default boundaries: age 50 (older/younger), income 0.5
    /// (rich/poor), employment status 3 (unstable/stable).
    pub fn default_for(attribute: SensitiveAttr) -> GroupSpec {
        let (high, low) = match attribute {
            SensitiveAttr::Age => ("older", "younger"),
            SensitiveAttr::Income => ("rich", "poor"),
            SensitiveAttr::Employment => ("unstable", "stable"),
        };
        GroupSpec {
            attribute,
            cut: attribute.default_cut(),
            high_label: high.to_string(),
            low_label: low.to_string(),
        }
    }
}

/// Complementary membership masks for the two groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMasks {
    pub high: Vec<bool>,
    pub low: Vec<bool>,
}

impl GroupMasks {
    /// True when one side is empty.
    pub fn degenerate(&self) -> bool {
        self.high.iter().all(|&m| !m) || self.low.iter().all(|&m| !m)
    }
}

/// Splits instances at the spec's cut: `high = value >= cut`.
pub fn partition(attr_values: &[f64], spec: &GroupSpec) -> GroupMasks {
    let high: Vec<bool> = attr_values.iter().map(|&v| v >= spec.cut).collect();
    let low = high.iter().map(|&m| !m).collect();
    GroupMasks { high, low }
}

/// Min/max ratio of two false-positive rates. Both zero counts as perfect
/// parity (1); exactly one zero counts as maximal disparity (0).
pub fn predictive_equality(fpr_a: f64, fpr_b: f64) -> f64 {
    let (lo, hi) = if fpr_a <= fpr_b {
        (fpr_a, fpr_b)
    } else {
        (fpr_b, fpr_a)
    };
    if hi == 0.0 {
        1.0
    } else {
        lo / hi
    }
}

/// `alpha * recall + (1 - alpha) * predictive equality`.
pub fn tradeoff(tpr_at_target_fpr: f64, pe: f64, alpha: f64) -> Result<f64, FairnessError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(FairnessError::Input(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    Ok(alpha * tpr_at_target_fpr + (1.0 - alpha) * pe)
}

/// Fairness outcome for one sensitive attribute.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeFairness {
    pub attribute: SensitiveAttr,
    pub high_label: String,
    pub low_label: String,
    pub high: EvalMetrics,
    pub low: EvalMetrics,
    pub predictive_equality: f64,
    /// One side had no members or no negatives; the PE value is then a
    /// boundary convention rather than a measured ratio.
    pub degenerate: bool,
    /// `(alpha, tradeoff)` pairs over the requested grid.
    pub tradeoffs: Vec<(f64, f64)>,
}

/// Per-attribute group confusion, predictive equality, and trade-off curves,
/// plus the overall metrics at the same threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FairnessReport {
    pub overall: EvalMetrics,
    pub threshold: f64,
    pub attributes: Vec<AttributeFairness>,
}

impl FairnessReport {
    pub fn attribute(&self, attr: SensitiveAttr) -> Option<&AttributeFairness> {
        self.attributes.iter().find(|a| a.attribute == attr)
    }
}

/// Default trade-off grid used when the caller does not pass one.
pub const DEFAULT_ALPHA_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn masked_confusion(
    scores: &[f64],
    labels: &[u8],
    mask: &[bool],
    threshold: f64,
) -> Result<EvalMetrics, FairnessError> {
    let s: Vec<f64> = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    let l: Vec<u8> = labels
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    Ok(confusion(&s, &l, threshold)?)
}

/// Builds the fairness report for every attribute present in `attrs`:
/// partition on the (default) group spec, per-group confusion, predictive
/// equality, and trade-offs over the alpha grid. Degenerate groups are
/// flagged, never dropped.
pub fn fairness_report(
    scores: &[f64],
    labels: &[u8],
    attrs: &[(SensitiveAttr, Vec<f64>)],
    threshold: f64,
    alphas: &[f64],
) -> Result<FairnessReport, FairnessError> {
    if scores.len() != labels.len() {
        return Err(FairnessError::Input(format!(
            "scores ({}) and labels ({}) lengths differ",
            scores.len(),
            labels.len()
        )));
    }
    let overall = confusion(scores, labels, threshold)?;
    let mut attributes = Vec::with_capacity(attrs.len());
    for (attr, values) in attrs {
        if values.len() != scores.len() {
            return Err(FairnessError::Input(format!(
                "attribute '{}' has {} values but {} instances were scored",
                attr.name(),
                values.len(),
                scores.len()
            )));
        }
        let spec = GroupSpec::default_for(*attr);
        let masks = partition(values, &spec);
        let high = masked_confusion(scores, labels, &masks.high, threshold)?;
        let low = masked_confusion(scores, labels, &masks.low, threshold)?;
        let pe = predictive_equality(high.fpr, low.fpr);
        let degenerate = masks.degenerate() || high.fp + high.tn == 0 || low.fp + low.tn == 0;
        let mut tradeoffs = Vec::with_capacity(alphas.len());
        for &alpha in alphas {
            tradeoffs.push((alpha, tradeoff(overall.tpr, pe, alpha)?));
        }
        attributes.push(AttributeFairness {
            attribute: *attr,
            high_label: spec.high_label,
            low_label: spec.low_label,
            high,
            low,
            predictive_equality: pe,
            degenerate,
            tradeoffs,
        });
    }
    Ok(FairnessReport {
        overall,
        threshold,
        attributes,
    })
}
