//! Stability-weighted test-time adaptation on pseudo-labeled target batches.
//!
//! For each batch the model takes a throwaway step on the batch's
//! pseudo-labels and checks whether that step lowers the loss on the next
//! batch. The improvement, passed through a sharp softplus, scales the real
//! update, so steps that do not generalize to fresh data are damped.

mod trace;

use std::borrow::Borrow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use trace::{write_pseudo_dump, write_trace_csv, TraceRow, TRACE_HEADER};

use crate::crossmodal::{fused_tape, train_adapters_step};
use crate::error::{Error, Result};
use crate::model::{FasModel, ModalBatch, Trainable};
use crate::numerics::{softplus, squared_distance, AdamState, RngStream, Tape, Var};
use crate::parallel::Exec;
use crate::pseudolabel::{label_batch, LabelMode, PseudoConfig, PseudoLabelRecord};
use crate::synthdata::{Modality, MultiModalSample, LIVE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Unweighted pseudo-label loss.
    #[serde(alias = "naive")]
    Plain,
    /// Loss scaled by the stability weight.
    #[default]
    Alpha,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Plain => "plain",
            Strategy::Alpha => "alpha",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" | "naive" => Ok(Strategy::Plain),
            "alpha" => Ok(Strategy::Alpha),
            other => Err(Error::Config {
                field: "strategy".into(),
                msg: format!("`{other}` is not one of plain, alpha"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Softplus sharpness of the stability weight.
    pub beta: f64,
    pub passes: usize,
    /// Leading extractor layers kept fixed.
    pub frozen_prefix: usize,
    /// Source samples mixed into each adapter refresh step.
    pub replay: usize,
    /// Adapter learning rate for the per-batch refresh; 0 disables it.
    pub adapter_lr: f64,
    pub strategy: Strategy,
    pub labels: LabelMode,
    pub pseudo: PseudoConfig,
    /// Fraction of pseudo-labels flipped on purpose, for robustness studies.
    pub corrupt: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            lr: 1e-3,
            batch_size: 32,
            beta: 500.0,
            passes: 1,
            frozen_prefix: 2,
            replay: 32,
            adapter_lr: 1e-3,
            strategy: Strategy::Alpha,
            labels: LabelMode::Reliability,
            pseudo: PseudoConfig::default(),
            corrupt: 0.0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| {
            Err(Error::Config {
                field: format!("adapt.{field}"),
                msg,
            })
        };
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("{} must be finite and >= 0", self.lr));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta", format!("{} must be finite and > 0", self.beta));
        }
        if self.batch_size < 2 {
            return bad("batch_size", format!("{} is below 2", self.batch_size));
        }
        if self.passes == 0 {
            return bad("passes", "must be at least 1".into());
        }
        if !(self.adapter_lr >= 0.0 && self.adapter_lr.is_finite()) {
            return bad("adapter_lr", format!("{} must be finite and >= 0", self.adapter_lr));
        }
        if !(0.0..=1.0).contains(&self.corrupt) {
            return bad("corrupt", format!("{} outside [0, 1]", self.corrupt));
        }
        self.pseudo.validate()
    }
}

/// Per-modality BCE of the classifiers on fused features against fixed
/// labels, summed over modalities and averaged over the batch.
pub fn adaptation_loss(tape: &mut Tape, bound: &crate::model::Bound, batch: &ModalBatch, labels: &[f64]) -> Result<Var> {
    if labels.len() != batch.size {
        return Err(Error::Contract(format!("{} labels for a batch of {}", labels.len(), batch.size)));
    }
    let fused = fused_tape(tape, bound, batch)?;
    let mut total: Option<Var> = None;
    for m in Modality::ALL {
        let p = FasModel::classify_tape(tape, bound.classifiers[m.index()], fused[m.index()])?;
        let l = tape.bce_mean(p, labels.to_vec())?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok(total.expect("three modalities"))
}

pub fn adaptation_loss_value<S: Borrow<MultiModalSample>>(model: &FasModel, samples: &[S], labels: &[f64]) -> Result<f64> {
    let batch = ModalBatch::new(model, samples)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::Nothing);
    let loss = adaptation_loss(&mut tape, &bound, &batch, labels)?;
    Ok(tape.value(loss).item())
}

/// `softplus_beta(l_t - l_tp)`.
pub fn stability_weight(l_t_next: f64, l_tp_next: f64, beta: f64) -> Result<f64> {
    if !(l_t_next.is_finite() && l_tp_next.is_finite()) {
        return Err(Error::NonFinite(format!(
            "next-batch losses: current model {l_t_next}, tentative model {l_tp_next}"
        )));
    }
    Ok(softplus(l_t_next - l_tp_next, beta))
}

/// One Adam step of the adaptable parameters on `scale * loss`. Returns the
/// L2 norm of the parameter change.
pub fn weighted_update<S: Borrow<MultiModalSample>>(
    model: &mut FasModel,
    samples: &[S],
    labels: &[f64],
    scale: f64,
    lr: f64,
) -> Result<f64> {
    let batch = ModalBatch::new(model, samples)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::Adaptation);
    let loss = adaptation_loss(&mut tape, &bound, &batch, labels)?;
    let loss = tape.scale(loss, scale);
    let grads = tape.backward(loss)?;
    let before: Vec<_> = model.params().into_iter().cloned().collect();
    model.optim.main.lr = lr;
    model.step_main(&bound, &grads)?;
    let sq: f64 = before.iter().zip(model.params()).map(|(a, b)| squared_distance(a, b)).sum();
    Ok(sq.sqrt())
}

/// Copy of `model` advanced by one unscaled step, with its own copy of the
/// optimizer state. `model` is not touched.
pub fn tentative_update<S: Borrow<MultiModalSample>>(model: &FasModel, samples: &[S], labels: &[f64], lr: f64) -> Result<FasModel> {
    let mut t_p = model.clone();
    weighted_update(&mut t_p, samples, labels, 1.0, lr)?;
    Ok(t_p)
}

/// Deterministic per-sample flip decision for label corruption.
fn flipped(corrupt_rng: &RngStream, id: u64, fraction: f64) -> bool {
    fraction > 0.0 && corrupt_rng.derive(id).uniform() < fraction
}

/// Streams that fix every random choice of a run.
#[derive(Clone, Debug)]
pub struct AdaptRngs {
    pub pseudo: RngStream,
    pub corrupt: RngStream,
    pub order: RngStream,
    pub replay: RngStream,
}

impl AdaptRngs {
    pub fn new(rng: &RngStream) -> AdaptRngs {
        AdaptRngs {
            pseudo: rng.derive_tag("pseudo"),
            corrupt: rng.derive_tag("corrupt"),
            order: rng.derive_tag("order"),
            replay: rng.derive_tag("replay"),
        }
    }
}

/// Pseudo-labels of `samples` under the current model, with the configured
/// mode and corruption applied.
pub fn pseudo_labels(
    model: &FasModel,
    samples: &[MultiModalSample],
    cfg: &AdaptationConfig,
    rngs: &AdaptRngs,
    exec: Exec,
) -> Result<(Vec<PseudoLabelRecord>, Vec<f64>)> {
    let records = label_batch(model, samples, &cfg.pseudo, &rngs.pseudo, exec)?;
    let labels = records
        .iter()
        .map(|r| {
            let y = r.label_for(cfg.labels);
            let y = if flipped(&rngs.corrupt, r.id, cfg.corrupt) { 1 - y } else { y };
            f64::from(y)
        })
        .collect();
    Ok((records, labels))
}

pub struct BatchOutcome {
    pub row: TraceRow,
    /// Records of the batch the update was computed on.
    pub records: Vec<PseudoLabelRecord>,
}

/// Adapts on `batch` using `next` (when given) to weigh the step. Without a
/// successor the weight `prev_alpha` is reused.
#[allow(clippy::too_many_arguments)]
pub fn adapt_batch(
    model: &mut FasModel,
    batch_index: usize,
    batch: &[MultiModalSample],
    next: Option<&[MultiModalSample]>,
    prev_alpha: Option<f64>,
    cfg: &AdaptationConfig,
    rngs: &AdaptRngs,
    exec: Exec,
) -> Result<BatchOutcome> {
    let (records, labels) = pseudo_labels(model, batch, cfg, rngs, exec)?;
    let mut row = TraceRow {
        batch_index,
        n_live_pseudo: labels.iter().filter(|&&y| y == f64::from(LIVE)).count(),
        n_spoof_pseudo: labels.iter().filter(|&&y| y != f64::from(LIVE)).count(),
        ..TraceRow::default()
    };
    let alpha = match (cfg.strategy, next) {
        (Strategy::Plain, _) => 1.0,
        (Strategy::Alpha, Some(next)) => {
            // Corruption perturbs the update targets only; the stability check
            // scores against the model's own labels of the next batch.
            let judge = AdaptationConfig { corrupt: 0.0, ..cfg.clone() };
            let (_, next_labels) = pseudo_labels(model, next, &judge, rngs, exec)?;
            let t_p = tentative_update(model, batch, &labels, cfg.lr)?;
            let l_t = adaptation_loss_value(model, next, &next_labels)?;
            let l_tp = adaptation_loss_value(&t_p, next, &next_labels)?;
            row.loss_t_next = Some(l_t);
            row.loss_tp_next = Some(l_tp);
            row.delta = Some(l_t - l_tp);
            stability_weight(l_t, l_tp, cfg.beta)?
        }
        (Strategy::Alpha, None) => prev_alpha
            .ok_or_else(|| Error::Contract("last batch has no successor and no previous weight".into()))?,
    };
    row.alpha = alpha;
    row.update_norm = weighted_update(model, batch, &labels, alpha, cfg.lr)?;
    Ok(BatchOutcome { row, records })
}

pub struct AdaptOutcome {
    pub trace: Vec<TraceRow>,
    /// Per batch, the pseudo-label records the update used.
    pub records: Vec<Vec<PseudoLabelRecord>>,
}

/// `count` replay samples drawn without replacement.
fn replay_batch(source: &[MultiModalSample], count: usize, rng: &RngStream) -> Vec<MultiModalSample> {
    let mut idx: Vec<usize> = (0..source.len()).collect();
    rng.clone().shuffle(&mut idx);
    idx.truncate(count.min(source.len()));
    idx.into_iter().map(|i| source[i].clone()).collect()
}

/// One or more passes over the unlabeled target in batches. Each batch first
/// refreshes the adapters on the batch plus a source replay sample, then
/// adapts the model. The main optimizer state is reset at the start.
pub fn adapt_stream(
    model: &mut FasModel,
    target: &[MultiModalSample],
    source_replay: &[MultiModalSample],
    cfg: &AdaptationConfig,
    rng: &RngStream,
    exec: Exec,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if target.iter().any(|s| s.label.is_some()) {
        return Err(Error::Contract("target samples passed to adaptation must be unlabeled".into()));
    }
    let n_batches = target.len().div_ceil(cfg.batch_size);
    if n_batches < 2 {
        return Err(Error::Contract(format!(
            "adaptation needs at least 2 batches, {} samples make {n_batches} of size {}",
            target.len(),
            cfg.batch_size
        )));
    }
    if cfg.adapter_lr > 0.0 && source_replay.is_empty() {
        return Err(Error::Contract("adapter refresh needs source replay samples".into()));
    }
    if cfg.frozen_prefix > model.extractors[0].layers.len() {
        return Err(Error::Config {
            field: "adapt.frozen_prefix".into(),
            msg: format!("exceeds extractor depth {}", model.extractors[0].layers.len()),
        });
    }
    model.frozen_prefix = cfg.frozen_prefix;
    model.optim.main = AdamState::new(cfg.lr);
    model.optim.adapters.lr = cfg.adapter_lr;
    let rngs = AdaptRngs::new(rng);
    let mut out = AdaptOutcome {
        trace: Vec::new(),
        records: Vec::new(),
    };
    let mut prev_alpha = None;
    for pass in 0..cfg.passes {
        let mut order: Vec<usize> = (0..target.len()).collect();
        rngs.order.derive(pass as u64).shuffle(&mut order);
        let stream: Vec<MultiModalSample> = order.iter().map(|&i| target[i].clone()).collect();
        let batches: Vec<&[MultiModalSample]> = stream.chunks(cfg.batch_size).collect();
        for (b, batch) in batches.iter().enumerate() {
            let index = out.trace.len();
            if cfg.adapter_lr > 0.0 {
                let replay = replay_batch(source_replay, cfg.replay, &rngs.replay.derive(index as u64));
                train_adapters_step(model, &replay, batch, cfg.adapter_lr)?;
            }
            let next = batches.get(b + 1).copied();
            let o = adapt_batch(model, index, batch, next, prev_alpha, cfg, &rngs, exec)?;
            if next.is_some() {
                prev_alpha = Some(o.row.alpha);
            }
            log::debug!("batch {index}: alpha {:.6e}, update norm {:.3e}", o.row.alpha, o.row.update_norm);
            out.trace.push(o.row);
            out.records.push(o.records);
        }
    }
    Ok(out)
}
