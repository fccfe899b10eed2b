use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use super::{extract_tape, Bound, FasModel, ModalBatch, Trainable};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tape, Var};
use crate::synthdata::{Modality, MultiModalSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        SourceTrainConfig {
            epochs: 10,
            lr: 1e-4,
            batch_size: 32,
        }
    }
}

pub(crate) fn labels_of<S: Borrow<MultiModalSample>>(samples: &[S]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let s = s.borrow();
            s.label
                .map(f64::from)
                .ok_or_else(|| Error::Contract(format!("source sample {} has no label", s.id)))
        })
        .collect()
}

/// Per-modality BCE of the classifier on its own modality's features,
/// summed over modalities and averaged over the batch.
pub fn source_loss(tape: &mut Tape, bound: &Bound, batch: &ModalBatch, labels: &[f64]) -> Result<Var> {
    if labels.len() != batch.size {
        return Err(Error::Contract(format!("{} labels for a batch of {}", labels.len(), batch.size)));
    }
    for m in Modality::ALL {
        if !batch.all_present(m) {
            return Err(Error::Contract(format!("source batch is missing {m} inputs")));
        }
    }
    let feats = extract_tape(tape, bound, batch)?;
    let mut total: Option<Var> = None;
    for m in Modality::ALL {
        let f = feats.get(m).expect("checked present");
        let p = FasModel::classify_tape(tape, bound.classifiers[m.index()], f)?;
        let l = tape.bce_mean(p, labels.to_vec())?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok(total.expect("three modalities"))
}

pub fn source_loss_value<S: Borrow<MultiModalSample>>(model: &FasModel, samples: &[S]) -> Result<f64> {
    let labels = labels_of(samples)?;
    let batch = ModalBatch::new(model, samples)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::Nothing);
    let loss = source_loss(&mut tape, &bound, &batch, &labels)?;
    Ok(tape.value(loss).item())
}

/// Supervised training on labeled, fully modal source data. Returns the
/// full-data loss before training and after every epoch.
pub fn train_source(
    model: &mut FasModel,
    samples: &[MultiModalSample],
    cfg: &SourceTrainConfig,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Contract("source training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config {
            field: "source.batch_size".into(),
            msg: "must be positive".into(),
        });
    }
    let labels = labels_of(samples)?;
    model.optim.main.lr = cfg.lr;
    let mut curve = vec![source_loss_value(model, samples)?];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.derive(epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch_samples: Vec<&MultiModalSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let batch_labels: Vec<f64> = chunk.iter().map(|&i| labels[i]).collect();
            let batch = ModalBatch::new(model, &batch_samples)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, Trainable::Main);
            let loss = source_loss(&mut tape, &bound, &batch, &batch_labels)?;
            let grads = tape.backward(loss)?;
            model.step_main(&bound, &grads)?;
        }
        let loss = source_loss_value(model, samples)?;
        log::debug!("source epoch {}: loss {loss:.6}", epoch + 1);
        curve.push(loss);
    }
    Ok(curve)
}
