//! Reliability-aware pseudo-labels for unlabeled target samples.
//!
//! Each modality's classifier scores its fused features once without
//! dropout (`p`) and `K` times under independent dropout masks. The spread of
//! the masked scores ranks the modalities by certainty; the softmax of the
//! min-max normalized certainties weights the deterministic scores into the
//! refined score `p_hat`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::crossmodal::{fused_features, FusedFeatureSet};
use crate::error::{Error, Result};
use crate::model::FasModel;
use crate::numerics::{dropout_mask, softmax, RngStream};
use crate::parallel::Exec;
use crate::synthdata::{Modality, MultiModalSample, LIVE, SPOOF};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Threshold the plain mean of the three scores.
    Naive,
    /// Threshold the certainty-weighted refined score.
    #[default]
    Reliability,
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelMode::Naive => "naive",
            LabelMode::Reliability => "reliability",
        })
    }
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(LabelMode::Naive),
            "reliability" => Ok(LabelMode::Reliability),
            other => Err(Error::Config {
                field: "pseudo".into(),
                msg: format!("`{other}` is not one of naive, reliability"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoConfig {
    /// Dropout passes per modality.
    pub k: usize,
    pub dropout: f64,
    pub threshold: f64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            k: 10,
            dropout: 0.3,
            threshold: 0.5,
        }
    }
}

impl PseudoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config {
                field: "pseudo.k".into(),
                msg: "K must be at least 1; use the naive label mode to skip dropout passes".into(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config {
                field: "pseudo.dropout".into(),
                msg: format!("{} outside [0, 1)", self.dropout),
            });
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config {
                field: "pseudo.threshold".into(),
                msg: format!("{} outside [0, 1]", self.threshold),
            });
        }
        Ok(())
    }
}

/// Everything computed while labeling one sample. Arrays are indexed by
/// modality (rgb, ir, depth).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub id: u64,
    /// Scores on the fused features without dropout.
    pub p: [f64; 3],
    /// Mean of the dropout scores.
    pub mu: [f64; 3],
    /// Population variance of the dropout scores.
    pub v: [f64; 3],
    /// Certainty weights.
    pub w: [f64; 3],
    /// Softmax of the certainty weights.
    pub psi: [f64; 3],
    pub p_hat: f64,
    pub label: u8,
    pub naive_label: u8,
}

impl PseudoLabelRecord {
    pub fn label_for(&self, mode: LabelMode) -> u8 {
        match mode {
            LabelMode::Naive => self.naive_label,
            LabelMode::Reliability => self.label,
        }
    }
}

pub fn deterministic_scores(model: &FasModel, fused: &FusedFeatureSet) -> [f64; 3] {
    Modality::ALL.map(|m| model.classify(m, fused.get(m)))
}

/// Mean and population variance (divisor `n`). Computed around the first
/// value so identical inputs give exactly that value and exactly zero.
pub fn population_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let x0 = xs[0];
    let shift = xs.iter().map(|x| x - x0).sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - x0 - shift) * (x - x0 - shift)).sum::<f64>() / n;
    (x0 + shift, var)
}

/// Scores of `k` dropout-masked copies of each fused feature. Modality `m`
/// draws its masks, in pass order, from `rng.derive(m.index())`.
pub fn dropout_scores(model: &FasModel, fused: &FusedFeatureSet, k: usize, rate: f64, rng: &RngStream) -> Result<[Vec<f64>; 3]> {
    if k == 0 {
        return Err(Error::Contract("K must be at least 1 for dropout scoring".into()));
    }
    let mut out: [Vec<f64>; 3] = Default::default();
    for m in Modality::ALL {
        let f = fused.get(m);
        let mut r = rng.derive(m.index() as u64);
        for _ in 0..k {
            let mask = dropout_mask(&[f.len()], rate, &mut r)?;
            let masked: Vec<f64> = f.iter().zip(mask.data()).map(|(a, b)| a * b).collect();
            out[m.index()].push(model.classify(m, &masked));
        }
    }
    Ok(out)
}

/// Returns `(mu, v)` per modality.
pub fn mc_variance(
    model: &FasModel,
    fused: &FusedFeatureSet,
    k: usize,
    rate: f64,
    rng: &RngStream,
) -> Result<([f64; 3], [f64; 3])> {
    let scores = dropout_scores(model, fused, k, rate, rng)?;
    let stats = scores.map(|s| population_stats(&s));
    Ok((stats.map(|s| s.0), stats.map(|s| s.1)))
}

/// `w = 1 - (v - min) / (max - min)`; all ones when every variance is equal.
pub fn certainty_weights(v: [f64; 3]) -> [f64; 3] {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return [1.0; 3];
    }
    v.map(|x| 1.0 - (x - min) / (max - min))
}

/// Returns `(p_hat, psi)` with `psi = softmax(w)`.
pub fn refined_score(p: [f64; 3], w: [f64; 3]) -> (f64, [f64; 3]) {
    let psi = softmax(&w);
    let psi = [psi[0], psi[1], psi[2]];
    if w[0] == w[1] && w[1] == w[2] {
        // Uniform weights: use the same rounding as the naive mean.
        return (mean3(p), psi);
    }
    let p_hat = psi.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
    // Keep the convex combination inside the hull despite rounding.
    let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (p_hat.clamp(lo, hi), psi)
}

pub fn assign_label(score: f64, h: f64) -> u8 {
    if score >= h {
        LIVE
    } else {
        SPOOF
    }
}

fn mean3(p: [f64; 3]) -> f64 {
    (p[0] + p[1] + p[2]) / 3.0
}

pub fn naive_label(p: [f64; 3], h: f64) -> u8 {
    assign_label(mean3(p), h)
}

/// Labels one sample, drawing its dropout masks from `rng.derive(sample.id)`.
pub fn label_sample(model: &FasModel, sample: &MultiModalSample, cfg: &PseudoConfig, rng: &RngStream) -> Result<PseudoLabelRecord> {
    let fused = fused_features(model, sample)?;
    let p = deterministic_scores(model, &fused);
    let (mu, v) = mc_variance(model, &fused, cfg.k, cfg.dropout, &rng.derive(sample.id))?;
    let w = certainty_weights(v);
    let (p_hat, psi) = refined_score(p, w);
    Ok(PseudoLabelRecord {
        id: sample.id,
        p,
        mu,
        v,
        w,
        psi,
        p_hat,
        label: assign_label(p_hat, cfg.threshold),
        naive_label: naive_label(p, cfg.threshold),
    })
}

pub fn label_batch(
    model: &FasModel,
    samples: &[MultiModalSample],
    cfg: &PseudoConfig,
    rng: &RngStream,
    exec: Exec,
) -> Result<Vec<PseudoLabelRecord>> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot label an empty batch".into()));
    }
    cfg.validate()?;
    exec.map(samples, |s| label_sample(model, s, cfg, rng)).into_iter().collect()
}
