use std::borrow::Borrow;

use super::{Bound, FasModel, Mlp};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::synthdata::{Modality, MultiModalSample};

/// Per-modality features of one sample; a feature is present iff the raw
/// input was.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub feats: [Option<Vec<f64>>; 3],
}

impl FeatureSet {
    pub fn get(&self, m: Modality) -> Option<&[f64]> {
        self.feats[m.index()].as_deref()
    }

    pub fn has(&self, m: Modality) -> bool {
        self.feats[m.index()].is_some()
    }
}

fn check_dim(model: &FasModel, m: Modality, x: &[f64], id: u64) -> Result<()> {
    let want = model.dims.raw[m.index()];
    if x.len() != want {
        return Err(Error::Dimension(format!(
            "sample {id}: {m} input has {} values, model expects {want}",
            x.len()
        )));
    }
    Ok(())
}

pub fn extract_features(model: &FasModel, sample: &MultiModalSample) -> Result<FeatureSet> {
    let mut feats: [Option<Vec<f64>>; 3] = Default::default();
    for m in Modality::ALL {
        if let Some(x) = sample.modality(m) {
            check_dim(model, m, x, sample.id)?;
            feats[m.index()] = Some(model.extractor(m).forward_row(x));
        }
    }
    Ok(FeatureSet { feats })
}

/// Row-stacked raw inputs of a batch. A modality absent from some samples
/// gets zero rows there; `present` holds the 0/1 indicators.
#[derive(Clone, Debug)]
pub struct ModalBatch {
    pub size: usize,
    /// `None` when no sample in the batch has the modality.
    pub inputs: [Option<Tensor>; 3],
    pub present: [Vec<f64>; 3],
}

impl ModalBatch {
    pub fn new<S: Borrow<MultiModalSample>>(model: &FasModel, samples: &[S]) -> Result<ModalBatch> {
        if samples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let size = samples.len();
        let mut inputs: [Option<Tensor>; 3] = Default::default();
        let mut present: [Vec<f64>; 3] = Default::default();
        for m in Modality::ALL {
            let dim = model.dims.raw[m.index()];
            let mut data = Vec::with_capacity(size * dim);
            let mut ind = Vec::with_capacity(size);
            for s in samples {
                let s = s.borrow();
                match s.modality(m) {
                    Some(x) => {
                        check_dim(model, m, x, s.id)?;
                        data.extend_from_slice(x);
                        ind.push(1.0);
                    }
                    None => {
                        data.extend(std::iter::repeat_n(0.0, dim));
                        ind.push(0.0);
                    }
                }
            }
            if m == Modality::Rgb && ind.contains(&0.0) {
                return Err(Error::Contract("every sample needs an rgb input".into()));
            }
            if ind.contains(&1.0) {
                inputs[m.index()] = Some(Tensor::new(vec![size, dim], data)?);
            }
            present[m.index()] = ind;
        }
        Ok(ModalBatch { size, inputs, present })
    }

    pub fn all_present(&self, m: Modality) -> bool {
        self.present[m.index()].iter().all(|&v| v == 1.0)
    }

    pub fn any_present(&self, m: Modality) -> bool {
        self.inputs[m.index()].is_some()
    }
}

/// Taped features of a batch, `[B, feat]` per modality, with rows of absent
/// inputs zeroed by their indicator.
#[derive(Clone, Debug)]
pub struct FeatureVars {
    pub feats: [Option<Var>; 3],
    pub present: [Vec<f64>; 3],
}

impl FeatureVars {
    pub fn get(&self, m: Modality) -> Option<Var> {
        self.feats[m.index()]
    }

    pub fn indicator(&self, m: Modality) -> &[f64] {
        &self.present[m.index()]
    }
}

pub fn extract_tape(tape: &mut Tape, bound: &Bound, batch: &ModalBatch) -> Result<FeatureVars> {
    let mut feats = [None; 3];
    for m in Modality::ALL {
        let Some(input) = &batch.inputs[m.index()] else { continue };
        let x = tape.constant(input.clone());
        let mut h = Mlp::forward_tape(tape, &bound.extractors[m.index()], x)?;
        if !batch.all_present(m) {
            h = tape.row_scale(h, batch.present[m.index()].clone())?;
        }
        feats[m.index()] = Some(h);
    }
    Ok(FeatureVars {
        feats,
        present: batch.present.clone(),
    })
}
