use anyhow::{Context, Result};
use mossti_core::dataio::SensitiveAttr;
use mossti_core::fairness::FairnessReport;
use mossti_core::mossti::{EpochStats, EvalMetrics};
use mossti_core::rhoss::{QTable, TrialResult};
use mossti_core::xai::Explanation;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;

/// JSON (de)serialization for thresholds that may legitimately be infinite
/// (a calibration target of 0 excludes every negative). Finite values stay
/// numbers; infinities become the strings "inf" / "-inf".
pub(crate) mod json_f64 {
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(v),
            Raw::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(D::Error::custom(format!("invalid threshold '{other}'"))),
            },
        }
    }
}

/// Confusion counts carried alongside the rates in the metrics report.
#[derive(Debug, Serialize)]
pub struct CountsOut {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Serialize)]
pub struct TradeoffPoint {
    pub alpha: f64,
    pub value: f64,
}

#[derive(Debug, Serialize)]
pub struct GroupOut {
    pub label: String,
    pub fpr: f64,
    pub recall: f64,
    pub counts: CountsOut,
}

#[derive(Debug, Serialize)]
pub struct AttributeOut {
    pub predictive_equality: f64,
    pub degenerate: bool,
    pub high: GroupOut,
    pub low: GroupOut,
}

/// The single JSON metrics report emitted by `train` and `evaluate`.
///
/// Field names follow the benchmark-table conventions: `fpr`, `recall`,
/// `tnr`, `fnr`, `accuracy`, plus `pe_age`, `pe_income`, `pe_employment`,
/// and per-attribute `tradeoffs`.
#[derive(Debug, Serialize)]
pub struct MetricsReport {
    pub fpr: f64,
    pub recall: f64,
    pub tnr: f64,
    pub fnr: f64,
    pub accuracy: f64,
    #[serde(with = "json_f64")]
    pub threshold: f64,
    pub counts: CountsOut,
    pub degenerate: bool,
    pub pe_age: Option<f64>,
    pub pe_income: Option<f64>,
    pub pe_employment: Option<f64>,
    /// Per attribute (`age`/`income`/`employment`), the trade-off curve over
    /// the alpha grid.
    pub tradeoffs: BTreeMap<String, Vec<TradeoffPoint>>,
    /// Per-group detail backing the predictive-equality values.
    pub groups: BTreeMap<String, AttributeOut>,
}

fn counts_of(m: &EvalMetrics) -> CountsOut {
    CountsOut {
        tp: m.tp,
        fp: m.fp,
        tn: m.tn,
        fn_: m.fn_,
    }
}

impl MetricsReport {
    pub fn new(overall: &EvalMetrics, threshold: f64, fairness: &FairnessReport) -> MetricsReport {
        let mut pe = BTreeMap::new();
        let mut tradeoffs = BTreeMap::new();
        let mut groups = BTreeMap::new();
        for attr in &fairness.attributes {
            let name = attr.attribute.name().to_string();
            pe.insert(attr.attribute, attr.predictive_equality);
            tradeoffs.insert(
                name.clone(),
                attr.tradeoffs
                    .iter()
                    .map(|(alpha, value)| TradeoffPoint {
                        alpha: *alpha,
                        value: *value,
                    })
                    .collect(),
            );
            groups.insert(
                name,
                AttributeOut {
                    predictive_equality: attr.predictive_equality,
                    degenerate: attr.degenerate,
                    high: GroupOut {
                        label: attr.high_label.clone(),
                        fpr: attr.high.fpr,
                        recall: attr.high.tpr,
                        counts: counts_of(&attr.high),
                    },
                    low: GroupOut {
                        label: attr.low_label.clone(),
                        fpr: attr.low.fpr,
                        recall: attr.low.tpr,
                        counts: counts_of(&attr.low),
                    },
                },
            );
        }
        MetricsReport {
            fpr: overall.fpr,
            recall: overall.tpr,
            tnr: overall.tnr,
            fnr: overall.fnr,
            accuracy: overall.accuracy,
            threshold,
            counts: counts_of(overall),
            degenerate: overall.degenerate,
            pe_age: pe.get(&SensitiveAttr::Age).copied(),
            pe_income: pe.get(&SensitiveAttr::Income).copied(),
            pe_employment: pe.get(&SensitiveAttr::Employment).copied(),
            tradeoffs,
            groups,
        }
    }
}

/// Pretty JSON with a trailing newline; field order is fixed by the structs,
/// so identical runs produce identical bytes.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("serializing report")?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Training history CSV: one row per epoch with loss, threshold, and
/// validation metrics.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    w.write_record([
        "epoch",
        "train_loss",
        "threshold",
        "tp",
        "fp",
        "tn",
        "fn",
        "fpr",
        "recall",
        "tnr",
        "fnr",
        "accuracy",
    ])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            format!("{}", h.train_loss),
            format!("{}", h.threshold),
            h.val.tp.to_string(),
            h.val.fp.to_string(),
            h.val.tn.to_string(),
            h.val.fn_.to_string(),
            format!("{}", h.val.fpr),
            format!("{}", h.val.tpr),
            format!("{}", h.val.tnr),
            format!("{}", h.val.fnr),
            format!("{}", h.val.accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Hyper-heuristic trial log CSV: trial, state, action, epsilon, reward, the
/// validation metrics columns, and the failure reason for failed trials.
pub fn write_trials_csv(path: &Path, trials: &[TrialResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    w.write_record([
        "trial", "state", "action", "epsilon", "reward", "fpr", "recall", "tnr", "fnr",
        "accuracy", "tp", "fp", "tn", "fn", "error",
    ])?;
    for t in trials {
        let m = t.metrics.as_ref();
        let rate = |f: fn(&EvalMetrics) -> f64| m.map(|m| format!("{}", f(m))).unwrap_or_default();
        let count = |f: fn(&EvalMetrics) -> u64| m.map(|m| f(m).to_string()).unwrap_or_default();
        w.write_record([
            t.trial_index.to_string(),
            t.state.to_string(),
            t.action.to_string(),
            format!("{}", t.epsilon),
            format!("{}", t.reward),
            rate(|m| m.fpr),
            rate(|m| m.tpr),
            rate(|m| m.tnr),
            rate(|m| m.fnr),
            rate(|m| m.accuracy),
            count(|m| m.tp),
            count(|m| m.fp),
            count(|m| m.tn),
            count(|m| m.fn_),
            t.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Final Q-table as a JSON 5x10 matrix.
pub fn write_qtable_json(path: &Path, q: &QTable) -> Result<()> {
    write_json(path, &q.q)
}

/// One explained sample in `explanations.json`.
#[derive(Debug, Serialize)]
pub struct ExplanationRecord {
    pub index: usize,
    pub label: u8,
    pub predicted: usize,
    pub saliency: Vec<f64>,
    pub spike_activity_per_neuron: Vec<f64>,
    pub spike_activity_per_class: [f64; 2],
}

impl ExplanationRecord {
    pub fn new(index: usize, label: u8, e: &Explanation) -> ExplanationRecord {
        ExplanationRecord {
            index,
            label,
            predicted: e.predicted,
            saliency: e.saliency.clone(),
            spike_activity_per_neuron: e.spike_activity.per_neuron.clone(),
            spike_activity_per_class: e.spike_activity.per_class,
        }
    }
}

/// Aggregate per-feature importance CSV: one row per feature.
pub fn write_importance_csv(
    path: &Path,
    feature_names: &[String],
    importance: &[f64],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["feature", "importance"])?;
    for (name, v) in feature_names.iter().zip(importance) {
        w.write_record([name.clone(), format!("{v}")])?;
    }
    w.flush()?;
    Ok(())
}
