//! AUC, HTER and Youden-index thresholds for live/spoof scores. Live is the
//! positive class; a sample is accepted as live iff its score is at least the
//! threshold.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::synthdata::LIVE;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: u8,
}

/// Live and spoof scores, sorted ascending.
fn split_classes(samples: &[ScoredSample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut live = Vec::new();
    let mut spoof = Vec::new();
    for s in samples {
        if !s.score.is_finite() {
            return Err(Error::NonFinite(format!("score {}", s.score)));
        }
        if s.label == LIVE {
            live.push(s.score);
        } else {
            spoof.push(s.score);
        }
    }
    if live.is_empty() || spoof.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {} live and {} spoof samples",
            live.len(),
            spoof.len()
        )));
    }
    live.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    Ok((live, spoof))
}

/// Mann-Whitney estimate of P(live score > spoof score), ties counting half.
pub fn auc(samples: &[ScoredSample]) -> Result<f64> {
    let (live, spoof) = split_classes(samples)?;
    // For each live score: spoofs strictly below plus half the spoofs tied with it.
    let mut wins = 0.0;
    for &x in &live {
        let below = spoof.partition_point(|&s| s < x);
        let not_above = spoof.partition_point(|&s| s <= x);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (live.len() as f64 * spoof.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hter {
    pub hter: f64,
    /// Spoof samples accepted as live.
    pub far: f64,
    /// Live samples rejected.
    pub frr: f64,
}

fn rates(live: &[f64], spoof: &[f64], t: f64) -> (usize, usize) {
    let accepted_live = live.len() - live.partition_point(|&s| s < t);
    let accepted_spoof = spoof.len() - spoof.partition_point(|&s| s < t);
    (accepted_live, accepted_spoof)
}

pub fn hter(samples: &[ScoredSample], threshold: f64) -> Result<Hter> {
    let (live, spoof) = split_classes(samples)?;
    let (tp, fp) = rates(&live, &spoof, threshold);
    let far = fp as f64 / spoof.len() as f64;
    let frr = (live.len() - tp) as f64 / live.len() as f64;
    Ok(Hter {
        hter: (far + frr) / 2.0,
        far,
        frr,
    })
}

/// Candidate thresholds: 0, 1 and the midpoints between adjacent distinct
/// scores, ascending.
pub fn threshold_candidates(samples: &[ScoredSample]) -> Vec<f64> {
    let mut scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut c = vec![0.0, 1.0];
    c.extend(scores.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

/// Threshold maximizing `TPR - FPR`; ties go to the smallest threshold.
pub fn youden_threshold(samples: &[ScoredSample]) -> Result<f64> {
    let (live, spoof) = split_classes(samples)?;
    let (nl, ns) = (live.len() as f64, spoof.len() as f64);
    let mut best = (f64::NEG_INFINITY, 0.0);
    for t in threshold_candidates(samples) {
        let (tp, fp) = rates(&live, &spoof, t);
        let j = tp as f64 / nl - fp as f64 / ns;
        if j > best.0 {
            best = (j, t);
        }
    }
    Ok(best.1)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum ThresholdMode {
    /// Youden threshold on labeled source validation data.
    #[default]
    YoudenSource,
    Fixed(f64),
    /// Youden threshold on the labeled target itself. Ablation only.
    OracleTarget,
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdMode::YoudenSource => f.write_str("youden-source"),
            ThresholdMode::Fixed(t) => write!(f, "fixed:{t}"),
            ThresholdMode::OracleTarget => f.write_str("oracle-target"),
        }
    }
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::Config {
            field: "threshold_mode".into(),
            msg,
        };
        match s {
            "youden-source" => Ok(ThresholdMode::YoudenSource),
            "oracle-target" => Ok(ThresholdMode::OracleTarget),
            _ => {
                let t: f64 = s
                    .strip_prefix("fixed:")
                    .ok_or_else(|| bad(format!("`{s}` is not youden-source, fixed:X or oracle-target")))?
                    .parse()
                    .map_err(|e| bad(format!("`{s}`: {e}")))?;
                if !(0.0..=1.0).contains(&t) {
                    return Err(bad(format!("fixed threshold {t} outside [0, 1]")));
                }
                Ok(ThresholdMode::Fixed(t))
            }
        }
    }
}

impl Serialize for ThresholdMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ThresholdMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub auc: f64,
    pub hter: f64,
    pub far: f64,
    pub frr: f64,
    pub threshold: f64,
    pub threshold_mode: ThresholdMode,
    pub n_live: usize,
    pub n_spoof: usize,
}

impl EvalReport {
    pub fn new(samples: &[ScoredSample], threshold: f64, mode: ThresholdMode) -> Result<EvalReport> {
        let h = hter(samples, threshold)?;
        let n_live = samples.iter().filter(|s| s.label == LIVE).count();
        Ok(EvalReport {
            auc: auc(samples)?,
            hter: h.hter,
            far: h.far,
            frr: h.frr,
            threshold,
            threshold_mode: mode,
            n_live,
            n_spoof: samples.len() - n_live,
        })
    }

    /// Aligned text table with rates in percent.
    pub fn to_table(&self) -> String {
        let rows = [
            ("HTER (%)", format!("{:.2}", 100.0 * self.hter)),
            ("AUC (%)", format!("{:.2}", 100.0 * self.auc)),
            ("FAR (%)", format!("{:.2}", 100.0 * self.far)),
            ("FRR (%)", format!("{:.2}", 100.0 * self.frr)),
            ("threshold", format!("{:.4} ({})", self.threshold, self.threshold_mode)),
            ("live/spoof", format!("{}/{}", self.n_live, self.n_spoof)),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<12}{v:>20}\n"));
        }
        out
    }
}
