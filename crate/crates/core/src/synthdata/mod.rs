//! Synthetic multi-domain, multi-modal live/spoof data.
//!
//! Each sample belongs to a *subject* whose latent vector is shared by its RGB,
//! IR and depth captures, so the modalities carry complementary views of the
//! same content. Spoof captures of a subject are shifted along the domain's
//! attack direction in latent space before being mixed into each modality.

mod generate;
mod io;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use generate::{build_protocol, generate_dataset, generate_domain, DomainSpec, ModalitySpec, Protocol, SynthConfig};
pub use io::{read_dataset, read_samples, write_dataset, write_samples, Manifest, SplitInfo, SCHEMA_VERSION};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Ir,
    Depth,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Ir, Modality::Depth];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Ir => "ir",
            Modality::Depth => "depth",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Live is the positive class.
pub const LIVE: u8 = 1;
pub const SPOOF: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiModalSample {
    pub id: u64,
    pub domain: String,
    pub label: Option<u8>,
    pub rgb: Vec<f64>,
    pub ir: Option<Vec<f64>>,
    pub d: Option<Vec<f64>>,
}

impl MultiModalSample {
    pub fn modality(&self, m: Modality) -> Option<&[f64]> {
        match m {
            Modality::Rgb => Some(&self.rgb),
            Modality::Ir => self.ir.as_deref(),
            Modality::Depth => self.d.as_deref(),
        }
    }

    pub fn has(&self, m: Modality) -> bool {
        self.modality(m).is_some()
    }

    /// Copy with the label removed, as fed to unsupervised adaptation.
    pub fn unlabeled(&self) -> MultiModalSample {
        MultiModalSample {
            label: None,
            ..self.clone()
        }
    }
}

/// Which auxiliary modalities are stripped from a split. RGB is never removed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MissingPattern {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "d")]
    MissingD,
    #[serde(rename = "i")]
    MissingI,
    #[serde(rename = "di")]
    MissingDI,
}

impl MissingPattern {
    pub const ALL: [MissingPattern; 4] = [
        MissingPattern::None,
        MissingPattern::MissingD,
        MissingPattern::MissingI,
        MissingPattern::MissingDI,
    ];

    pub fn drops(self, m: Modality) -> bool {
        matches!(
            (self, m),
            (MissingPattern::MissingD | MissingPattern::MissingDI, Modality::Depth)
                | (MissingPattern::MissingI | MissingPattern::MissingDI, Modality::Ir)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MissingPattern::None => "none",
            MissingPattern::MissingD => "d",
            MissingPattern::MissingI => "i",
            MissingPattern::MissingDI => "di",
        }
    }

    /// Human label used in report tables.
    pub fn scenario(self) -> &'static str {
        match self {
            MissingPattern::None => "Fixed modalities",
            MissingPattern::MissingD => "Missing D",
            MissingPattern::MissingI => "Missing I",
            MissingPattern::MissingDI => "Missing D&I",
        }
    }
}

impl fmt::Display for MissingPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MissingPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MissingPattern::None),
            "d" => Ok(MissingPattern::MissingD),
            "i" => Ok(MissingPattern::MissingI),
            "di" => Ok(MissingPattern::MissingDI),
            other => Err(Error::Config {
                field: "missing".into(),
                msg: format!("`{other}` is not one of none, d, i, di"),
            }),
        }
    }
}

pub fn apply_missing(samples: &[MultiModalSample], pattern: MissingPattern) -> Vec<MultiModalSample> {
    samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if pattern.drops(Modality::Ir) {
                s.ir = None;
            }
            if pattern.drops(Modality::Depth) {
                s.d = None;
            }
            s
        })
        .collect()
}

/// The three splits of a generated experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    /// Labeled, fully modal source training data from every source domain.
    pub source_train: Vec<MultiModalSample>,
    /// Held-out labeled source data, used for threshold selection.
    pub source_val: Vec<MultiModalSample>,
    /// Target domain. Labels are kept on disk for evaluation only.
    pub target: Vec<MultiModalSample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&[MultiModalSample]> {
        match name {
            "source_train" => Some(&self.source_train),
            "source_val" => Some(&self.source_val),
            "target" => Some(&self.target),
            _ => None,
        }
    }
}

pub const SPLITS: [&str; 3] = ["source_train", "source_val", "target"];

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MultiModalSample {
        MultiModalSample {
            id: 0,
            domain: "T".into(),
            label: Some(LIVE),
            rgb: vec![1.0],
            ir: Some(vec![2.0]),
            d: Some(vec![3.0]),
        }
    }

    #[test]
    fn missing_patterns() {
        let s = vec![sample()];
        assert_eq!(apply_missing(&s, MissingPattern::None), s);
        let di = apply_missing(&s, MissingPattern::MissingDI);
        assert!(di[0].ir.is_none() && di[0].d.is_none());
        assert_eq!(di[0].rgb, vec![1.0]);
        let d = apply_missing(&s, MissingPattern::MissingD);
        assert!(d[0].d.is_none());
        assert_eq!(d[0].ir, Some(vec![2.0]));
        let i = apply_missing(&s, MissingPattern::MissingI);
        assert!(i[0].ir.is_none() && i[0].d.is_some());
    }

    #[test]
    fn pattern_parsing() {
        for p in MissingPattern::ALL {
            assert_eq!(p.as_str().parse::<MissingPattern>().unwrap(), p);
        }
        assert!("x".parse::<MissingPattern>().is_err());
    }
}
