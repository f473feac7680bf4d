use crate::args::{Cli, Command, CommonArgs};
use crate::checkpoint::{load_checkpoint, save_checkpoint, sha256_file, Checkpoint};
use crate::report::{
    write_history_csv, write_importance_csv, write_json, write_qtable_json, write_trials_csv,
    ExplanationRecord, MetricsReport,
};
use crate::run_config::RunConfig;
use anyhow::{anyhow, bail, Context, Result};
use mossti_core::csnpc::{build, ModelConfig, ModelParams};
use mossti_core::dataio::{
    apply_stats, fit_stats, load_csv, save_csv, synth_generate, synth_schema, temporal_split,
    Dataset, GroupBias, NormStats, Schema, SensitiveAttr,
};
use mossti_core::fairness::fairness_report;
use mossti_core::mossti::{calibrate_threshold, confusion, scores, train, EpochStats, TrainConfig};
use mossti_core::rhoss::{self, HyperConfig, OptimizeOptions};
use mossti_core::xai;
use std::path::{Path, PathBuf};

/// Removes this command's partial outputs unless the run committed, so a
/// nonzero exit never leaves a half-written artifact set behind.
struct OutputGuard {
    written: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    fn new() -> OutputGuard {
        OutputGuard {
            written: Vec::new(),
            committed: false,
        }
    }

    fn track(&mut self, path: PathBuf) -> PathBuf {
        self.written.push(path.clone());
        path
    }

    fn commit(&mut self) {
        self.committed = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.committed {
            for path in &self.written {
                let _ = std::fs::remove_file(path);
            }
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            rows,
            prevalence,
            features,
            planted,
            bias_attribute,
            bias_high,
            bias_low,
        } => {
            let bias = match bias_attribute {
                None => None,
                Some(name) => {
                    let attribute = SensitiveAttr::ALL
                        .into_iter()
                        .find(|a| a.name() == name)
                        .with_context(|| format!("unknown sensitive attribute '{name}'"))?;
                    Some(GroupBias {
                        attribute,
                        high_prevalence: bias_high
                            .context("--bias-high required with --bias-attribute")?,
                        low_prevalence: bias_low
                            .context("--bias-low required with --bias-attribute")?,
                    })
                }
            };
            cmd_synth(&common, rows, prevalence, features, &planted, bias)
        }
        Command::Train { common } => cmd_train(&common),
        Command::Optimize { common } => cmd_optimize(&common),
        Command::Evaluate { common, checkpoint } => cmd_evaluate(&common, &checkpoint),
        Command::Explain {
            common,
            checkpoint,
            samples,
        } => cmd_explain(&common, &checkpoint, samples),
    }
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out)
        .with_context(|| format!("creating output directory {}", cfg.out.display()))
}

fn load_schema(path: &Path) -> Result<Schema> {
    Schema::load(path).with_context(|| format!("loading schema {}", path.display()))
}

/// Train/validation/test splits, z-scored with statistics fitted on the
/// training months only (the last training month is the validation split).
struct Splits {
    train: Dataset,
    val: Dataset,
    test: Dataset,
    stats: NormStats,
}

fn split_and_normalize(ds: &Dataset, train_months: u8) -> Result<Splits> {
    let (train_all, test) = temporal_split(ds, train_months)?;
    let (train, val) = temporal_split(&train_all, train_months.saturating_sub(1))
        .context("holding out the last training month for validation")?;
    let stats = fit_stats(&train)?;
    Ok(Splits {
        train: apply_stats(&train, &stats),
        val: apply_stats(&val, &stats),
        test: apply_stats(&test, &stats),
        stats,
    })
}

fn model_config_for(cfg: &RunConfig, num_features: usize, hyper: &HyperConfig) -> Result<ModelConfig> {
    Ok(ModelConfig::new(
        cfg.population,
        cfg.timesteps,
        num_features,
        hyper.decays,
        hyper.thresholds,
        hyper.sigma,
    )?)
}

fn train_config_for(cfg: &RunConfig, hyper: &HyperConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch,
        lr: hyper.lr,
        adam_beta1: hyper.adam_beta1,
        adam_beta2: hyper.adam_beta2,
        weight: hyper.omega,
        early_stop_patience: cfg.early_stop_patience,
        rng_seed: cfg.seed,
        target_fpr: cfg.target_fpr,
        class_weights: None,
    }
}

fn evaluate_with_fairness(
    params: &ModelParams,
    model: &ModelConfig,
    dataset: &Dataset,
    threshold: f64,
    alphas: &[f64],
) -> Result<MetricsReport> {
    let s = scores(params, model, dataset)?;
    let overall = confusion(&s, &dataset.labels, threshold)?;
    let fairness = fairness_report(&s, &dataset.labels, &dataset.sensitive, threshold, alphas)?;
    Ok(MetricsReport::new(&overall, threshold, &fairness))
}

fn cmd_synth(
    common: &CommonArgs,
    rows: usize,
    prevalence: f64,
    features: usize,
    planted: &[usize],
    bias: Option<GroupBias>,
) -> Result<()> {
    let cfg = RunConfig::resolve(common)?;
    ensure_out_dir(&cfg)?;
    let mut guard = OutputGuard::new();
    let ds = synth_generate(rows, prevalence, features, planted, bias, cfg.seed)?;
    let schema = synth_schema(features);
    let data_path = guard.track(cfg.out.join("data.csv"));
    let schema_path = guard.track(cfg.out.join("schema.json"));
    save_csv(&ds, &data_path, &schema)?;
    schema.save(&schema_path)?;
    println!(
        "wrote {} ({} rows, {} positives) and {}",
        data_path.display(),
        ds.len(),
        ds.labels.iter().filter(|&&l| l == 1).count(),
        schema_path.display()
    );
    guard.commit();
    Ok(())
}

/// Shared tail of train/optimize: calibrate on validation, checkpoint, then
/// report test metrics through the reloaded (f32-rounded) parameters so that
/// a later `evaluate` on the same data reproduces the report bit for bit.
#[allow(clippy::too_many_arguments)]
fn finish_training_run(
    cfg: &RunConfig,
    guard: &mut OutputGuard,
    params: ModelParams,
    model: &ModelConfig,
    splits: &Splits,
    history: &[EpochStats],
    schema_hash: &str,
) -> Result<()> {
    let val_scores = scores(&params, model, &splits.val)?;
    let threshold = calibrate_threshold(&val_scores, &splits.val.labels, cfg.target_fpr)?;

    let manifest = guard.track(cfg.out.join("checkpoint.json"));
    guard.track(cfg.out.join("checkpoint.bin"));
    save_checkpoint(
        &cfg.out,
        &params,
        model,
        &splits.stats,
        threshold,
        cfg.seed,
        schema_hash,
    )?;
    let reloaded = load_checkpoint(&manifest)?;

    let report = evaluate_with_fairness(
        &reloaded.params,
        model,
        &splits.test,
        threshold,
        &cfg.alpha_grid,
    )?;
    write_json(&guard.track(cfg.out.join("report.json")), &report)?;
    write_history_csv(&guard.track(cfg.out.join("history.csv")), history)?;
    println!(
        "test recall {:.4} at fpr {:.4} (threshold {threshold}); artifacts in {}",
        report.recall,
        report.fpr,
        cfg.out.display()
    );
    Ok(())
}

fn cmd_train(common: &CommonArgs) -> Result<()> {
    let cfg = RunConfig::resolve(common)?;
    let schema_path = cfg.schema_path()?;
    let schema = load_schema(schema_path)?;
    let schema_hash = sha256_file(schema_path)?;
    let ds = load_csv(cfg.data_path()?, &schema)?;
    let splits = split_and_normalize(&ds, cfg.train_months)?;

    let hyper = HyperConfig::default();
    let model = model_config_for(&cfg, ds.num_features, &hyper)?;
    let params = build(&model, cfg.seed)?;
    let tc = train_config_for(&cfg, &hyper);

    ensure_out_dir(&cfg)?;
    let mut guard = OutputGuard::new();
    let (params, history) = train(params, &model, &splits.train, &splits.val, &tc)?;
    finish_training_run(&cfg, &mut guard, params, &model, &splits, &history, &schema_hash)?;
    guard.commit();
    Ok(())
}

fn cmd_optimize(common: &CommonArgs) -> Result<()> {
    let cfg = RunConfig::resolve(common)?;
    let schema_path = cfg.schema_path()?;
    let schema = load_schema(schema_path)?;
    let schema_hash = sha256_file(schema_path)?;
    let ds = load_csv(cfg.data_path()?, &schema)?;
    let splits = split_and_normalize(&ds, cfg.train_months)?;
    let num_features = ds.num_features;

    // Each trial trains a fresh model under the candidate configuration and
    // is rewarded on the validation month at its calibrated threshold; the
    // test months stay untouched until the final report.
    let evaluator = |hyper: &HyperConfig| -> Result<mossti_core::mossti::EvalMetrics, String> {
        let run = || -> Result<mossti_core::mossti::EvalMetrics> {
            let model = model_config_for(&cfg, num_features, hyper)?;
            let params = build(&model, cfg.seed)?;
            let tc = train_config_for(&cfg, hyper);
            let (params, _) = train(params, &model, &splits.train, &splits.val, &tc)?;
            let val_scores = scores(&params, &model, &splits.val)?;
            let threshold = calibrate_threshold(&val_scores, &splits.val.labels, cfg.target_fpr)?;
            Ok(confusion(&val_scores, &splits.val.labels, threshold)?)
        };
        run().map_err(|e| format!("{e:#}"))
    };
    let opts = OptimizeOptions {
        alpha: cfg.rhoss_alpha,
        gamma: cfg.rhoss_gamma,
        epsilon_start: cfg.rhoss_epsilon_start,
        epsilon_decay: cfg.rhoss_epsilon_decay,
        epsilon_floor: cfg.rhoss_epsilon_floor,
        reward_fn: None,
    };
    let outcome = rhoss::optimize(cfg.budget, evaluator, cfg.seed, &opts)?;

    ensure_out_dir(&cfg)?;
    let mut guard = OutputGuard::new();
    write_json(&guard.track(cfg.out.join("best_config.json")), &outcome.best.config)?;
    write_trials_csv(&guard.track(cfg.out.join("trials.csv")), &outcome.trials)?;
    write_qtable_json(&guard.track(cfg.out.join("qtable.json")), &outcome.qtable)?;

    // Retrain the best configuration (deterministic, so this reproduces the
    // winning trial's parameters) and checkpoint it with its report.
    let best_hyper = &outcome.best.config;
    let model = model_config_for(&cfg, num_features, best_hyper)?;
    let params = build(&model, cfg.seed)?;
    let tc = train_config_for(&cfg, best_hyper);
    let (params, history) = train(params, &model, &splits.train, &splits.val, &tc)?;
    finish_training_run(&cfg, &mut guard, params, &model, &splits, &history, &schema_hash)?;
    println!(
        "best trial {} (action {}) reward {}",
        outcome.best.trial_index, outcome.best.action, outcome.best.reward
    );
    guard.commit();
    Ok(())
}

fn load_checkpoint_for_data(
    cfg: &RunConfig,
    checkpoint_path: &Path,
) -> Result<(Checkpoint, Schema)> {
    let schema_path = cfg.schema_path()?;
    let schema = load_schema(schema_path)?;
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let hash = sha256_file(schema_path)?;
    if hash != checkpoint.schema_sha256 {
        bail!(
            "schema {} does not match the schema this checkpoint was trained under",
            schema_path.display()
        );
    }
    Ok((checkpoint, schema))
}

fn cmd_evaluate(common: &CommonArgs, checkpoint_path: &Path) -> Result<()> {
    let cfg = RunConfig::resolve(common)?;
    let (checkpoint, schema) = load_checkpoint_for_data(&cfg, checkpoint_path)?;
    let ds = load_csv(cfg.data_path()?, &schema)?;
    let (_, test) = temporal_split(&ds, cfg.train_months)?;
    let test = apply_stats(&test, &checkpoint.norm_stats);

    ensure_out_dir(&cfg)?;
    let mut guard = OutputGuard::new();
    let report = evaluate_with_fairness(
        &checkpoint.params,
        &checkpoint.model,
        &test,
        checkpoint.threshold,
        &cfg.alpha_grid,
    )?;
    write_json(&guard.track(cfg.out.join("report.json")), &report)?;
    println!(
        "test recall {:.4} at fpr {:.4}; report in {}",
        report.recall,
        report.fpr,
        cfg.out.display()
    );
    guard.commit();
    Ok(())
}

fn cmd_explain(
    common: &CommonArgs,
    checkpoint_path: &Path,
    samples: Option<Vec<usize>>,
) -> Result<()> {
    let cfg = RunConfig::resolve(common)?;
    let (checkpoint, schema) = load_checkpoint_for_data(&cfg, checkpoint_path)?;
    let ds = load_csv(cfg.data_path()?, &schema)?;
    let ds = apply_stats(&ds, &checkpoint.norm_stats);
    let indices = samples.unwrap_or_else(|| cfg.samples.clone());
    if indices.is_empty() {
        bail!("no sample indices given");
    }
    for &i in &indices {
        if i >= ds.len() {
            return Err(anyhow!(
                "sample index {i} out of range for {} data rows",
                ds.len()
            ));
        }
    }

    ensure_out_dir(&cfg)?;
    let mut guard = OutputGuard::new();
    let mut records = Vec::with_capacity(indices.len());
    let mut inputs = Vec::with_capacity(indices.len());
    for &i in &indices {
        let x = ds.row_tensor(i);
        let explanation = xai::explain(
            &checkpoint.params,
            &checkpoint.model,
            &x,
            ds.labels[i] as usize,
        )?;
        records.push(ExplanationRecord::new(i, ds.labels[i], &explanation));
        inputs.push(x);
    }
    let importance = xai::aggregate_importance(&checkpoint.params, &checkpoint.model, &inputs)?;
    write_json(&guard.track(cfg.out.join("explanations.json")), &records)?;
    write_importance_csv(
        &guard.track(cfg.out.join("feature_importance.csv")),
        &ds.feature_names,
        &importance,
    )?;
    println!(
        "explained {} samples; artifacts in {}",
        records.len(),
        cfg.out.display()
    );
    guard.commit();
    Ok(())
}

