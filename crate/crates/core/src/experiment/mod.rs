//! End-to-end runs: generate data, train on the sources, adapt to the
//! target, evaluate, and tabulate.

mod config;
mod report;

use serde::{Deserialize, Serialize};

pub use config::{AdapterPretrainConfig, ExperimentConfig};
pub use report::{render_report, sweep_table, ReportRow, SweepRow};

use crate::adaptation::{adapt_stream, AdaptOutcome};
use crate::crossmodal::train_adapters_step;
use crate::error::{Error, Result};
use crate::metrics::{youden_threshold, EvalReport, ScoredSample, ThresholdMode};
use crate::model::{train_source, FasModel};
use crate::numerics::RngStream;
use crate::parallel::Exec;
use crate::pseudolabel::{label_batch, LabelMode, PseudoConfig};
use crate::synthdata::{apply_missing, generate_dataset, Dataset, MissingPattern, MultiModalSample};

/// Root stream of a run; every stage derives its own stream from it.
pub fn run_rng(seed: u64) -> RngStream {
    RngStream::new(seed).derive_tag("run")
}

/// Source training followed by source-only adapter training.
pub fn prepare_source(cfg: &ExperimentConfig, source_train: &[MultiModalSample]) -> Result<(FasModel, Vec<f64>)> {
    let rng = run_rng(cfg.seed);
    let mut model = FasModel::new(cfg.model.clone(), &rng.derive_tag("init"));
    let curve = train_source(&mut model, source_train, &cfg.source, &rng.derive_tag("source"))?;
    pretrain_adapters(&mut model, source_train, &cfg.adapter_pretrain, &rng.derive_tag("adapters"))?;
    Ok((model, curve))
}

pub fn pretrain_adapters(
    model: &mut FasModel,
    source: &[MultiModalSample],
    cfg: &AdapterPretrainConfig,
    rng: &RngStream,
) -> Result<()> {
    if cfg.steps == 0 {
        return Ok(());
    }
    if source.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Contract("adapter pretraining needs source samples and a positive batch size".into()));
    }
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut epoch = 0u64;
    let mut pos = source.len();
    for _ in 0..cfg.steps {
        if pos + cfg.batch_size > source.len() {
            rng.derive(epoch).shuffle(&mut order);
            epoch += 1;
            pos = 0;
        }
        let end = (pos + cfg.batch_size).min(source.len());
        let batch: Vec<&MultiModalSample> = order[pos..end].iter().map(|&i| &source[i]).collect();
        pos = end;
        train_adapters_step::<&MultiModalSample>(model, &batch, &[], cfg.lr)?;
    }
    Ok(())
}

/// Refined scores of `samples` under `model`, with labels kept for scoring.
pub fn score_samples(
    model: &FasModel,
    samples: &[MultiModalSample],
    pseudo: &PseudoConfig,
    rng: &RngStream,
    exec: Exec,
) -> Result<Vec<ScoredSample>> {
    let records = label_batch(model, samples, pseudo, rng, exec)?;
    samples
        .iter()
        .zip(records)
        .map(|(s, r)| {
            let label = s
                .label
                .ok_or_else(|| Error::UndefinedMetric(format!("sample {} has no label to evaluate against", s.id)))?;
            Ok(ScoredSample { score: r.p_hat, label })
        })
        .collect()
}

/// Scores the target and picks the threshold per `mode`. Source-side
/// thresholds are chosen on validation data with the target's missing
/// pattern applied, so both sides see the same inputs.
pub fn evaluate(
    model: &FasModel,
    target: &[MultiModalSample],
    source_val: &[MultiModalSample],
    mode: ThresholdMode,
    pseudo: &PseudoConfig,
    rng: &RngStream,
    exec: Exec,
) -> Result<(EvalReport, Vec<ScoredSample>)> {
    let scores = score_samples(model, target, pseudo, &rng.derive_tag("target"), exec)?;
    let threshold = match mode {
        ThresholdMode::Fixed(t) => t,
        ThresholdMode::OracleTarget => youden_threshold(&scores)?,
        ThresholdMode::YoudenSource => {
            let pattern = missing_of(target);
            let val = apply_missing(source_val, pattern);
            youden_threshold(&score_samples(model, &val, pseudo, &rng.derive_tag("source_val"), exec)?)?
        }
    };
    Ok((EvalReport::new(&scores, threshold, mode)?, scores))
}

/// Pattern shared by a split, read off its first sample.
fn missing_of(samples: &[MultiModalSample]) -> MissingPattern {
    match samples.first().map(|s| (s.ir.is_some(), s.d.is_some())) {
        Some((true, false)) => MissingPattern::MissingD,
        Some((false, true)) => MissingPattern::MissingI,
        Some((false, false)) => MissingPattern::MissingDI,
        _ => MissingPattern::None,
    }
}

/// Everything a single adapted run produces.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub missing: MissingPattern,
    pub source_only: EvalReport,
    pub adapted: EvalReport,
    /// Accuracy of the pseudo-labels each update used, before corruption.
    pub pseudo_accuracy: f64,
}

pub struct AdaptedRun {
    pub model: FasModel,
    pub outcome: AdaptOutcome,
    pub summary: RunSummary,
}

/// Adapts a copy of the source model to `data.target` and evaluates before
/// and after.
pub fn adapt_and_evaluate(cfg: &ExperimentConfig, data: &Dataset, source_model: &FasModel, exec: Exec) -> Result<AdaptedRun> {
    let rng = run_rng(cfg.seed);
    let eval_rng = rng.derive_tag("eval");
    let (source_only, _) = evaluate(
        source_model,
        &data.target,
        &data.source_val,
        cfg.threshold_mode,
        &cfg.adapt.pseudo,
        &eval_rng,
        exec,
    )?;
    let mut model = source_model.clone();
    let unlabeled: Vec<MultiModalSample> = data.target.iter().map(|s| s.unlabeled()).collect();
    let outcome = adapt_stream(
        &mut model,
        &unlabeled,
        &data.source_train,
        &cfg.adapt,
        &rng.derive_tag("adapt"),
        exec,
    )?;
    let (adapted, _) = evaluate(
        &model,
        &data.target,
        &data.source_val,
        cfg.threshold_mode,
        &cfg.adapt.pseudo,
        &eval_rng,
        exec,
    )?;
    let truth: std::collections::HashMap<u64, u8> = data.target.iter().filter_map(|s| Some((s.id, s.label?))).collect();
    let (mut right, mut total) = (0usize, 0usize);
    for r in outcome.records.iter().flatten() {
        if let Some(&y) = truth.get(&r.id) {
            total += 1;
            right += usize::from(r.label_for(cfg.adapt.labels) == y);
        }
    }
    let summary = RunSummary {
        seed: cfg.seed,
        missing: cfg.data.missing,
        source_only,
        adapted,
        pseudo_accuracy: if total == 0 { f64::NAN } else { right as f64 / total as f64 },
    };
    Ok(AdaptedRun { model, outcome, summary })
}

/// Generate, train, adapt and evaluate for one config.
pub fn run_pipeline(cfg: &ExperimentConfig, exec: Exec) -> Result<AdaptedRun> {
    cfg.validate()?;
    let data = generate_dataset(&cfg.data, cfg.seed, exec)?;
    let (model, _) = prepare_source(cfg, &data.source_train)?;
    adapt_and_evaluate(cfg, &data, &model, exec)
}

/// A variant of one seed's run: which knobs differ from the base config.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variant {
    pub missing: MissingPattern,
    pub labels: LabelMode,
    pub strategy: crate::adaptation::Strategy,
    pub k: usize,
}

/// Runs every variant for every seed, training the source model once per
/// seed. Seeds run concurrently under `exec`; results are ordered
/// `[seed][variant]`.
pub fn run_variants(base: &ExperimentConfig, seeds: &[u64], variants: &[Variant], exec: Exec) -> Result<Vec<Vec<RunSummary>>> {
    base.validate()?;
    let per_seed = exec.map(seeds, |&seed| -> Result<Vec<RunSummary>> {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.data.missing = MissingPattern::None;
        let full = generate_dataset(&cfg.data, seed, Exec::Sequential)?;
        let (model, _) = prepare_source(&cfg, &full.source_train)?;
        variants
            .iter()
            .map(|v| {
                let mut vc = cfg.clone();
                vc.data.missing = v.missing;
                vc.adapt.labels = v.labels;
                vc.adapt.strategy = v.strategy;
                vc.adapt.pseudo.k = v.k;
                let data = Dataset {
                    target: apply_missing(&full.target, v.missing),
                    ..full.clone()
                };
                Ok(adapt_and_evaluate(&vc, &data, &model, Exec::Sequential)?.summary)
            })
            .collect()
    });
    per_seed.into_iter().collect()
}
