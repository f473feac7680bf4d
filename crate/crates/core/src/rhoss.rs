//! Reinforcement-guided hyper-heuristic hyperparameter search.
//!
//! A tabular Q-learning agent over 5 search phases and 10 low-level
//! heuristics proposes configurations, scores them through a pluggable
//! evaluator, and keeps the best seen. Action 0 resamples a fresh
//! configuration from the prior; actions 1..=9 perturb the current best:
//! targeted jitters of one hyperparameter group, a small global jitter, a
//! single-field resample, and a single-field large jitter.

use crate::mossti::EvalMetrics;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_STATES: usize = 5;
pub const NUM_ACTIONS: usize = 10;

#[derive(Debug, Error)]
pub enum RhossError {
    #[error("input error: {0}")]
    Input(String),
}

/// One point in the 13-dimensional hyperparameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    /// Membrane decay per LIF layer.
    pub decays: [f64; 4],
    /// Surrogate spike slope.
    pub sigma: f64,
    /// Firing threshold per LIF layer.
    pub thresholds: [f64; 4],
    /// Multiplicative weight retention applied before each Adam delta.
    pub omega: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Learning rate.
    pub lr: f64,
}

/// Range and sampling scale of one searchable field.
#[derive(Debug, Clone, Copy)]
pub struct FieldDef {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
    /// Log-uniform prior and log-scale jitter when true; linear otherwise.
    pub log: bool,
}

impl HyperConfig {
    /// Field order used by index-based access: decays, sigma, thresholds,
    /// omega, Adam betas, learning rate.
    pub const FIELDS: [FieldDef; 13] = [
        FieldDef { name: "beta1", lo: 0.1, hi: 0.95, log: true },
        FieldDef { name: "beta2", lo: 0.1, hi: 0.95, log: true },
        FieldDef { name: "beta3", lo: 0.1, hi: 0.95, log: true },
        FieldDef { name: "beta4", lo: 0.1, hi: 0.95, log: true },
        FieldDef { name: "sigma", lo: 10.0, hi: 50.0, log: true },
        FieldDef { name: "theta1", lo: 0.1, hi: 1.0, log: true },
        FieldDef { name: "theta2", lo: 0.1, hi: 1.0, log: true },
        FieldDef { name: "theta3", lo: 0.1, hi: 1.0, log: true },
        FieldDef { name: "theta4", lo: 0.1, hi: 1.0, log: true },
        FieldDef { name: "omega", lo: 0.95, hi: 1.0, log: true },
        FieldDef { name: "adam_beta1", lo: 0.97, hi: 0.99, log: false },
        FieldDef { name: "adam_beta2", lo: 0.97, hi: 0.99, log: false },
        FieldDef { name: "lr", lo: 1e-6, hi: 1e-3, log: true },
    ];

    pub fn get(&self, idx: usize) -> f64 {
        match idx {
            0..=3 => self.decays[idx],
            4 => self.sigma,
            5..=8 => self.thresholds[idx - 5],
            9 => self.omega,
            10 => self.adam_beta1,
            11 => self.adam_beta2,
            12 => self.lr,
            _ => panic!("field index {idx} out of range"),
        }
    }

    fn set(&mut self, idx: usize, value: f64) {
        match idx {
            0..=3 => self.decays[idx] = value,
            4 => self.sigma = value,
            5..=8 => self.thresholds[idx - 5] = value,
            9 => self.omega = value,
            10 => self.adam_beta1 = value,
            11 => self.adam_beta2 = value,
            12 => self.lr = value,
            _ => panic!("field index {idx} out of range"),
        }
    }

    /// Range containment over all 13 fields.
    pub fn validate(&self) -> Result<(), RhossError> {
        for (idx, def) in Self::FIELDS.iter().enumerate() {
            let v = self.get(idx);
            if !(v >= def.lo && v <= def.hi) {
                return Err(RhossError::Input(format!(
                    "{} = {v} outside [{}, {}]",
                    def.name, def.lo, def.hi
                )));
            }
        }
        Ok(())
    }
}

impl Default for HyperConfig {
    /// Desk-scale training defaults; every field sits inside its search range.
    /// Hidden thresholds at 0.5 with the output threshold at 1.0 keep the
    /// output population out of rate saturation, which dominates how fast the
    /// spike-count loss separates classes.
    fn default() -> Self {
        HyperConfig {
            decays: [0.9; 4],
            sigma: 20.0,
            thresholds: [0.5, 0.5, 0.5, 1.0],
            omega: 1.0,
            adam_beta1: 0.98,
            adam_beta2: 0.99,
            lr: 3e-4,
        }
    }
}

fn sample_field(def: &FieldDef, rng: &mut ChaCha8Rng) -> f64 {
    if def.log {
        (rng.gen_range(def.lo.ln()..def.hi.ln())).exp().clamp(def.lo, def.hi)
    } else {
        rng.gen_range(def.lo..def.hi)
    }
}

/// LLH0: stochastic initialization. Log-uniform fields are sampled as
/// `exp(U(ln lo, ln hi))`, uniform fields as `U(lo, hi)`.
pub fn sample_initial(rng: &mut ChaCha8Rng) -> HyperConfig {
    let mut config = HyperConfig::default();
    for (idx, def) in HyperConfig::FIELDS.iter().enumerate() {
        config.set(idx, sample_field(def, rng));
    }
    config
}

/// Multiplies by `exp(N(0, s))` in log scale for log-uniform fields; shifts
/// by `N(0, s * (hi - lo))` for linear fields. Always clamps to the range.
fn jitter_field(value: f64, def: &FieldDef, s: f64, rng: &mut ChaCha8Rng) -> f64 {
    if s == 0.0 {
        return value;
    }
    let jittered = if def.log {
        let noise: f64 = Normal::new(0.0, s).expect("finite std").sample(rng);
        value * noise.exp()
    } else {
        let noise: f64 = Normal::new(0.0, s * (def.hi - def.lo))
            .expect("finite std")
            .sample(rng);
        value + noise
    };
    jittered.clamp(def.lo, def.hi)
}

const SMALL_JITTER: f64 = 0.1;
const LARGE_JITTER: f64 = 0.5;

/// LLH1..=LLH9: targeted perturbations of the base configuration.
///
/// 1 decays, 2 thresholds, 3 sigma, 4 learning rate, 5 Adam betas, 6 omega
/// (each a small jitter of the group); 7 small global jitter; 8 resample one
/// uniformly-chosen field from its prior; 9 large jitter of one
/// uniformly-chosen field. Results stay inside the search ranges.
pub fn perturb(
    base: &HyperConfig,
    llh: usize,
    rng: &mut ChaCha8Rng,
) -> Result<HyperConfig, RhossError> {
    let groups: &[usize] = match llh {
        1 => &[0, 1, 2, 3],
        2 => &[5, 6, 7, 8],
        3 => &[4],
        4 => &[12],
        5 => &[10, 11],
        6 => &[9],
        7 => &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12],
        8 | 9 => &[],
        _ => {
            return Err(RhossError::Input(format!(
                "low-level heuristic index must lie in 1..=9, got {llh}"
            )))
        }
    };
    let mut out = base.clone();
    match llh {
        8 => {
            let idx = rng.gen_range(0..HyperConfig::FIELDS.len());
            out.set(idx, sample_field(&HyperConfig::FIELDS[idx], rng));
        }
        9 => {
            let idx = rng.gen_range(0..HyperConfig::FIELDS.len());
            let def = &HyperConfig::FIELDS[idx];
            out.set(idx, jitter_field(base.get(idx), def, LARGE_JITTER, rng));
        }
        _ => {
            for &idx in groups {
                let def = &HyperConfig::FIELDS[idx];
                out.set(idx, jitter_field(base.get(idx), def, SMALL_JITTER, rng));
            }
        }
    }
    Ok(out)
}

/// Search phase for trial `t` of `budget`: `floor(t / budget * 5)`, clamped
/// to the last phase at `t == budget`.
pub fn state_of(t: usize, budget: usize) -> Result<usize, RhossError> {
    if budget == 0 {
        return Err(RhossError::Input("budget must be positive".into()));
    }
    if t > budget {
        return Err(RhossError::Input(format!(
            "trial index {t} exceeds budget {budget}"
        )));
    }
    Ok(((t * NUM_STATES) / budget).min(NUM_STATES - 1))
}

/// Epsilon-greedy action selection with lowest-index tie-breaking.
pub fn select_action(q_row: &[f64; NUM_ACTIONS], epsilon: f64, rng: &mut ChaCha8Rng) -> usize {
    assert!((0.0..=1.0).contains(&epsilon), "epsilon must lie in [0, 1]");
    if rng.gen_bool(epsilon) {
        rng.gen_range(0..NUM_ACTIONS)
    } else {
        let mut best = 0;
        for (a, &v) in q_row.iter().enumerate() {
            if v > q_row[best] {
                best = a;
            }
        }
        best
    }
}

/// Scalar reward: recall minus FPR, plus 1 when accuracy exceeds 0.95, minus
/// 0.5 when positives exist but none were caught.
pub fn reward(m: &EvalMetrics) -> f64 {
    let bonus = if m.accuracy > 0.95 { 1.0 } else { 0.0 };
    let penalty = if m.tp == 0 && m.tp + m.fn_ > 0 { 0.5 } else { 0.0 };
    m.tpr - m.fpr + bonus - penalty
}

/// 5x10 action-value table, zero-initialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub q: [[f64; NUM_ACTIONS]; NUM_STATES],
}

impl Default for QTable {
    fn default() -> Self {
        Self::new()
    }
}

impl QTable {
    pub fn new() -> Self {
        QTable {
            q: [[0.0; NUM_ACTIONS]; NUM_STATES],
        }
    }

    pub fn row(&self, state: usize) -> &[f64; NUM_ACTIONS] {
        &self.q[state]
    }
}

/// Temporal-difference update:
/// `q[s,a] += alpha * (r + gamma * max_a' q[s',a'] - q[s,a])`.
pub fn q_update(
    q: &mut QTable,
    s: usize,
    a: usize,
    r: f64,
    s_next: usize,
    alpha: f64,
    gamma: f64,
) -> Result<(), RhossError> {
    if s >= NUM_STATES || s_next >= NUM_STATES {
        return Err(RhossError::Input(format!(
            "state index out of range: s={s}, s_next={s_next}"
        )));
    }
    if a >= NUM_ACTIONS {
        return Err(RhossError::Input(format!("action index out of range: {a}")));
    }
    let max_next = q.q[s_next]
        .iter()
        .fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
    q.q[s][a] += alpha * (r + gamma * max_next - q.q[s][a]);
    Ok(())
}

/// Multiplicative epsilon schedule with a floor: `max(0.05, eps * 0.99)`.
pub fn decay_epsilon(epsilon: f64) -> f64 {
    decay_epsilon_with(epsilon, 0.99, 0.05)
}

pub fn decay_epsilon_with(epsilon: f64, decay: f64, floor: f64) -> f64 {
    (epsilon * decay).max(floor)
}

/// One evaluated candidate in the search log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    /// 0 for the seeding evaluation, then 1..=budget.
    pub trial_index: usize,
    pub state: usize,
    pub action: usize,
    /// Exploration rate in force when the action was chosen.
    pub epsilon: f64,
    pub config: HyperConfig,
    pub reward: f64,
    /// `None` when the evaluator failed; such trials carry reward -1 and are
    /// never promoted to best.
    pub metrics: Option<EvalMetrics>,
    pub error: Option<String>,
}

/// Q-learning constants and schedule overrides.
#[derive(Debug, Clone, Copy)]
pub struct OptimizeOptions {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_decay: f64,
    pub epsilon_floor: f64,
    /// Replaces the standard reward rule when set; an extension hook, off by
    /// default.
    pub reward_fn: Option<fn(&EvalMetrics) -> f64>,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            alpha: 0.1,
            gamma: 0.9,
            epsilon_start: 1.0,
            epsilon_decay: 0.99,
            epsilon_floor: 0.05,
            reward_fn: None,
        }
    }
}

/// Final search artifacts: the best trial, the full log, and the Q-table.
#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub best: TrialResult,
    pub trials: Vec<TrialResult>,
    pub qtable: QTable,
}

const FAILED_TRIAL_REWARD: f64 = -1.0;

fn run_trial<E>(
    evaluator: &mut E,
    config: HyperConfig,
    trial_index: usize,
    state: usize,
    action: usize,
    epsilon: f64,
    reward_fn: Option<fn(&EvalMetrics) -> f64>,
) -> TrialResult
where
    E: FnMut(&HyperConfig) -> Result<EvalMetrics, String>,
{
    match evaluator(&config) {
        Ok(metrics) => TrialResult {
            trial_index,
            state,
            action,
            epsilon,
            reward: reward_fn.map_or_else(|| reward(&metrics), |f| f(&metrics)),
            config,
            metrics: Some(metrics),
            error: None,
        },
        Err(message) => TrialResult {
            trial_index,
            state,
            action,
            epsilon,
            reward: FAILED_TRIAL_REWARD,
            config,
            metrics: None,
            error: Some(message),
        },
    }
}

/// Runs the hyper-heuristic loop: an initial stochastic configuration seeds
/// the best, then each trial picks a heuristic epsilon-greedily, applies it
/// to the best configuration, evaluates, updates the best on strict reward
/// improvement, and performs the temporal-difference update. Deterministic
/// for a fixed seed and deterministic evaluator.
pub fn optimize<E>(
    budget: usize,
    mut evaluator: E,
    rng_seed: u64,
    opts: &OptimizeOptions,
) -> Result<OptimizeOutcome, RhossError>
where
    E: FnMut(&HyperConfig) -> Result<EvalMetrics, String>,
{
    if budget == 0 {
        return Err(RhossError::Input("budget must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut qtable = QTable::new();
    let mut epsilon = opts.epsilon_start;

    let initial = run_trial(
        &mut evaluator,
        sample_initial(&mut rng),
        0,
        0,
        0,
        epsilon,
        opts.reward_fn,
    );
    let mut best = initial.clone();
    let mut trials = vec![initial];

    for t in 1..=budget {
        let state = state_of(t, budget)?;
        let action = select_action(qtable.row(state), epsilon, &mut rng);
        let candidate = if action == 0 {
            sample_initial(&mut rng)
        } else {
            perturb(&best.config, action, &mut rng)?
        };
        let trial = run_trial(
            &mut evaluator,
            candidate,
            t,
            state,
            action,
            epsilon,
            opts.reward_fn,
        );
        if trial.metrics.is_some() && trial.reward > best.reward {
            best = trial.clone();
        }
        let state_next = state_of((t + 1).min(budget), budget)?;
        q_update(
            &mut qtable,
            state,
            action,
            trial.reward,
            state_next,
            opts.alpha,
            opts.gamma,
        )?;
        epsilon = decay_epsilon_with(epsilon, opts.epsilon_decay, opts.epsilon_floor);
        trials.push(trial);
    }
    Ok(OptimizeOutcome {
        best,
        trials,
        qtable,
    })
}

/// Budget-matched baseline: `budget + 1` independent draws from the prior,
/// keeping the best. Same evaluation count as [`optimize`].
pub fn random_search<E>(
    budget: usize,
    mut evaluator: E,
    rng_seed: u64,
) -> Result<OptimizeOutcome, RhossError>
where
    E: FnMut(&HyperConfig) -> Result<EvalMetrics, String>,
{
    if budget == 0 {
        return Err(RhossError::Input("budget must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut trials = Vec::with_capacity(budget + 1);
    for t in 0..=budget {
        let trial = run_trial(
            &mut evaluator,
            sample_initial(&mut rng),
            t,
            0,
            0,
            1.0,
            None,
        );
        trials.push(trial);
    }
    let best = trials
        .iter()
        .filter(|t| t.metrics.is_some())
        .max_by(|a, b| a.reward.partial_cmp(&b.reward).expect("finite rewards"))
        .cloned()
        .unwrap_or_else(|| trials[0].clone());
    Ok(OptimizeOutcome {
        best,
        trials,
        qtable: QTable::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(tp: u64, fp: u64, tn: u64, fn_: u64) -> EvalMetrics {
        EvalMetrics::from_counts(tp, fp, tn, fn_)
    }

    fn fixed_metrics() -> EvalMetrics {
        metrics(40, 5, 95, 10)
    }

    #[test]
    fn sampler_is_log_uniform_in_learning_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut decade_counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let c = sample_initial(&mut rng);
            c.validate().unwrap();
            let lr = c.lr;
            if lr < 1e-5 {
                decade_counts[0] += 1;
            } else if lr < 1e-4 {
                decade_counts[1] += 1;
            } else {
                decade_counts[2] += 1;
            }
        }
        for count in decade_counts {
            let fraction = count as f64 / n as f64;
            assert!(
                (fraction - 1.0 / 3.0).abs() <= 0.03,
                "decade fraction {fraction}"
            );
        }
    }

    #[test]
    fn sampler_is_deterministic_per_seed() {
        let a = sample_initial(&mut ChaCha8Rng::seed_from_u64(7));
        let b = sample_initial(&mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn perturb_targets_only_the_named_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = sample_initial(&mut rng);
        let out = perturb(&base, 1, &mut rng).unwrap();
        assert_ne!(out.decays, base.decays);
        assert_eq!(out.sigma, base.sigma);
        assert_eq!(out.thresholds, base.thresholds);
        assert_eq!(out.omega, base.omega);
        assert_eq!(out.adam_beta1, base.adam_beta1);
        assert_eq!(out.adam_beta2, base.adam_beta2);
        assert_eq!(out.lr, base.lr);
    }

    #[test]
    fn perturb_always_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut base = sample_initial(&mut rng);
        for round in 0..500 {
            let llh = (round % 9) + 1;
            base = perturb(&base, llh, &mut rng).unwrap();
            base.validate().unwrap();
        }
    }

    #[test]
    fn perturb_rejects_out_of_range_llh() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = sample_initial(&mut rng);
        assert!(perturb(&base, 0, &mut rng).is_err());
        assert!(perturb(&base, 10, &mut rng).is_err());
    }

    #[test]
    fn zero_sigma_jitter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for def in &HyperConfig::FIELDS {
            let v = sample_field(def, &mut rng);
            assert_eq!(jitter_field(v, def, 0.0, &mut rng), v);
        }
    }

    #[test]
    fn state_of_examples() {
        assert_eq!(state_of(50, 100).unwrap(), 2);
        assert_eq!(state_of(0, 100).unwrap(), 0);
        assert_eq!(state_of(100, 100).unwrap(), 4);
        assert!(state_of(1, 0).is_err());
        assert!(state_of(11, 10).is_err());
    }

    #[test]
    fn greedy_selection_and_tie_break() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut row = [0.0; NUM_ACTIONS];
        row[9] = 1.0;
        assert_eq!(select_action(&row, 0.0, &mut rng), 9);
        let flat = [0.25; NUM_ACTIONS];
        assert_eq!(select_action(&flat, 0.0, &mut rng), 0);
    }

    #[test]
    fn greedy_action_invariant_to_row_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let row = [0.3, -0.2, 0.9, 0.1, 0.0, 0.89, -1.0, 0.5, 0.2, 0.4];
        let base = select_action(&row, 0.0, &mut rng);
        let mut shifted = row;
        shifted.iter_mut().for_each(|v| *v += 123.456);
        assert_eq!(select_action(&shifted, 0.0, &mut rng), base);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let row = [0.0; NUM_ACTIONS];
        let n = 10_000;
        let mut counts = [0usize; NUM_ACTIONS];
        for _ in 0..n {
            counts[select_action(&row, 1.0, &mut rng)] += 1;
        }
        for count in counts {
            let fraction = count as f64 / n as f64;
            assert!((fraction - 0.1).abs() <= 0.01, "action fraction {fraction}");
        }
    }

    #[test]
    fn reward_matches_benchmark_arithmetic() {
        // tpr 0.908, fpr 0.047, accuracy 0.986 with positives caught.
        let m = EvalMetrics {
            tp: 908,
            fp: 47,
            tn: 953,
            fn_: 92,
            fpr: 0.047,
            tpr: 0.908,
            tnr: 0.953,
            fnr: 0.092,
            accuracy: 0.986,
            degenerate: false,
        };
        assert!((reward(&m) - 1.861).abs() < 1e-12);
    }

    #[test]
    fn reward_penalty_and_maximum() {
        let missed_all = EvalMetrics {
            accuracy: 0.5,
            ..metrics(0, 0, 5, 5)
        };
        assert!((reward(&missed_all) - (-0.5)).abs() < 1e-15);
        let perfect = metrics(10, 0, 90, 0);
        assert!((reward(&perfect) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn q_update_zero_table_and_fixed_point() {
        let mut q = QTable::new();
        q_update(&mut q, 2, 3, 1.0, 3, 0.1, 0.9).unwrap();
        assert!((q.q[2][3] - 0.1).abs() < 1e-15);

        // r = 0 and max-next = q[s,a] / gamma leaves the entry unchanged.
        let mut q = QTable::new();
        q.q[1][4] = 0.9;
        q.q[2][0] = 1.0;
        q_update(&mut q, 1, 4, 0.0, 2, 0.1, 0.9).unwrap();
        assert!((q.q[1][4] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn q_update_touches_exactly_one_cell() {
        let mut q = QTable::new();
        q_update(&mut q, 4, 7, 2.5, 0, 0.1, 0.9).unwrap();
        for s in 0..NUM_STATES {
            for a in 0..NUM_ACTIONS {
                if (s, a) != (4, 7) {
                    assert_eq!(q.q[s][a], 0.0);
                }
            }
        }
    }

    #[test]
    fn q_update_rejects_bad_indices() {
        let mut q = QTable::new();
        assert!(q_update(&mut q, 5, 0, 0.0, 0, 0.1, 0.9).is_err());
        assert!(q_update(&mut q, 0, 10, 0.0, 0, 0.1, 0.9).is_err());
        assert!(q_update(&mut q, 0, 0, 0.0, 5, 0.1, 0.9).is_err());
    }

    #[test]
    fn q_update_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut q = QTable::new();
        let mut oracle = [[0.0f64; NUM_ACTIONS]; NUM_STATES];
        for _ in 0..1000 {
            let s = rng.gen_range(0..NUM_STATES);
            let a = rng.gen_range(0..NUM_ACTIONS);
            let s_next = rng.gen_range(0..NUM_STATES);
            let r = rng.gen_range(-2.0..2.0);
            q_update(&mut q, s, a, r, s_next, 0.1, 0.9).unwrap();
            // Independent re-implementation of the scalar rule.
            let mut max_next = f64::NEG_INFINITY;
            for v in oracle[s_next] {
                if v > max_next {
                    max_next = v;
                }
            }
            oracle[s][a] = oracle[s][a] + 0.1 * (r + 0.9 * max_next - oracle[s][a]);
            for s2 in 0..NUM_STATES {
                for a2 in 0..NUM_ACTIONS {
                    assert!((q.q[s2][a2] - oracle[s2][a2]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn epsilon_schedule_examples() {
        assert!((decay_epsilon(1.0) - 0.99).abs() < 1e-15);
        assert_eq!(decay_epsilon(0.05), 0.05);
        let mut eps = 1.0;
        for _ in 0..300 {
            eps = decay_epsilon(eps);
        }
        assert_eq!(eps, 0.05);
    }

    #[test]
    fn optimize_budget_one_runs_two_evaluations() {
        let mut evals = 0usize;
        let outcome = optimize(
            1,
            |_c| {
                evals += 1;
                Ok(fixed_metrics())
            },
            0,
            &OptimizeOptions::default(),
        )
        .unwrap();
        assert_eq!(evals, 2);
        assert_eq!(outcome.trials.len(), 2);
        assert!((outcome.best.reward - reward(&fixed_metrics())).abs() < 1e-15);
    }

    #[test]
    fn optimize_is_deterministic() {
        let evaluator = |c: &HyperConfig| {
            let score = (c.lr.ln().abs() / 20.0).min(1.0);
            let tp = (score * 100.0) as u64;
            Ok(metrics(tp, 10, 90, 100 - tp))
        };
        let a = optimize(25, evaluator, 42, &OptimizeOptions::default()).unwrap();
        let b = optimize(25, evaluator, 42, &OptimizeOptions::default()).unwrap();
        assert_eq!(a.trials, b.trials);
        assert_eq!(a.qtable, b.qtable);
        assert_eq!(a.best, b.best);
    }

    #[test]
    fn failed_trials_are_logged_but_never_best() {
        let mut calls = 0usize;
        let outcome = optimize(
            10,
            move |_c| {
                calls += 1;
                if calls % 2 == 0 {
                    Err("synthetic failure".to_string())
                } else {
                    Ok(fixed_metrics())
                }
            },
            3,
            &OptimizeOptions::default(),
        )
        .unwrap();
        let failed: Vec<_> = outcome.trials.iter().filter(|t| t.metrics.is_none()).collect();
        assert!(!failed.is_empty());
        for f in &failed {
            assert_eq!(f.reward, FAILED_TRIAL_REWARD);
            assert!(f.error.is_some());
        }
        assert!(outcome.best.metrics.is_some());
    }

    #[test]
    fn running_best_is_monotone_and_epsilon_floored() {
        let evaluator = |c: &HyperConfig| {
            let tp = ((c.sigma - 10.0) * 2.0) as u64;
            Ok(metrics(tp, 3, 97, 100 - tp.min(100)))
        };
        let outcome = optimize(400, evaluator, 5, &OptimizeOptions::default()).unwrap();
        let mut best_so_far = f64::NEG_INFINITY;
        for trial in &outcome.trials {
            if trial.metrics.is_some() && trial.reward > best_so_far {
                best_so_far = trial.reward;
            }
            assert!(trial.epsilon >= 0.05 - 1e-15);
        }
        assert_eq!(best_so_far, outcome.best.reward);
        // Every evaluated configuration stayed in range.
        for trial in &outcome.trials {
            trial.config.validate().unwrap();
        }
    }

    #[test]
    fn random_search_matches_evaluation_budget() {
        let mut evals = 0usize;
        let outcome = random_search(
            5,
            |_c| {
                evals += 1;
                Ok(fixed_metrics())
            },
            9,
        )
        .unwrap();
        assert_eq!(evals, 6);
        assert_eq!(outcome.trials.len(), 6);
    }
}
