//! Dataset directory format.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<split>/samples.jsonl
//! ```
//!
//! Each JSONL line is
//! `{"id":u64,"domain":str,"label":0|1|null,"rgb":[..],"ir":[..]|null,"d":[..]|null}`
//! with every float written with 17 significant digits, so reading a written
//! dataset reproduces it bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::SynthConfig;
use super::{Dataset, MissingPattern, Modality, MultiModalSample, LIVE, SPLITS};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitInfo {
    pub live: usize,
    pub spoof: usize,
    pub unlabeled: usize,
}

impl SplitInfo {
    pub fn count(samples: &[MultiModalSample]) -> SplitInfo {
        let mut info = SplitInfo::default();
        for s in samples {
            match s.label {
                Some(LIVE) => info.live += 1,
                Some(_) => info.spoof += 1,
                None => info.unlabeled += 1,
            }
        }
        info
    }

    pub fn total(&self) -> usize {
        self.live + self.spoof + self.unlabeled
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    /// Raw input width per modality (rgb, ir, depth).
    pub raw_dim: [usize; 3],
    /// `(domain id, role)` pairs; role is `source` or `target`.
    pub domains: Vec<(String, String)>,
    pub missing: MissingPattern,
    pub splits: BTreeMap<String, SplitInfo>,
    pub config: SynthConfig,
}

fn push_floats(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{x:.16e}").expect("write to string");
    }
    out.push(']');
}

fn push_json_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("string serializes"));
}

fn sample_line(s: &MultiModalSample) -> String {
    let mut out = String::with_capacity(64 + 24 * 3 * s.rgb.len());
    write!(out, "{{\"id\":{},\"domain\":", s.id).expect("write to string");
    push_json_str(&mut out, &s.domain);
    match s.label {
        Some(l) => write!(out, ",\"label\":{l}").expect("write to string"),
        None => out.push_str(",\"label\":null"),
    }
    out.push_str(",\"rgb\":");
    push_floats(&mut out, &s.rgb);
    for (key, v) in [("ir", &s.ir), ("d", &s.d)] {
        write!(out, ",\"{key}\":").expect("write to string");
        match v {
            Some(xs) => push_floats(&mut out, xs),
            None => out.push_str("null"),
        }
    }
    out.push('}');
    out
}

pub fn write_samples(path: &Path, samples: &[MultiModalSample]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        for (m, v) in Modality::ALL.iter().zip([Some(&s.rgb), s.ir.as_ref(), s.d.as_ref()]) {
            if v.is_some_and(|v| v.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite(format!("sample {} modality {m}", s.id)));
            }
        }
        writeln!(w, "{}", sample_line(s)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: u64,
    domain: String,
    label: Option<i64>,
    rgb: Vec<f64>,
    ir: Option<Vec<f64>>,
    d: Option<Vec<f64>>,
}

/// Reads one split, checking every line against the manifest's raw dims.
pub fn read_samples(path: &Path, raw_dim: [usize; 3]) -> Result<Vec<MultiModalSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: Line = serde_json::from_str(&line).map_err(|e| Error::load(path, lineno, e.to_string()))?;
        let label = match raw.label {
            None => None,
            Some(l @ (0 | 1)) => Some(l as u8),
            Some(l) => return Err(Error::load(path, lineno, format!("label {l} is not 0 or 1"))),
        };
        for (m, v) in Modality::ALL.iter().zip([Some(&raw.rgb), raw.ir.as_ref(), raw.d.as_ref()]) {
            let Some(v) = v else { continue };
            let want = raw_dim[m.index()];
            if v.len() != want {
                return Err(Error::load(
                    path,
                    lineno,
                    format!("{m} has {} values, manifest raw_dim is {want}", v.len()),
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::load(path, lineno, format!("{m} contains a non-finite value")));
            }
        }
        out.push(MultiModalSample {
            id: raw.id,
            domain: raw.domain,
            label,
            rgb: raw.rgb,
            ir: raw.ir,
            d: raw.d,
        });
    }
    Ok(out)
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&data.manifest)?;
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    for split in SPLITS {
        let samples = data.split(split).expect("known split");
        write_samples(&dir.join(split).join("samples.jsonl"), samples)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::load(&manifest_path, e.line(), e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::load(
            &manifest_path,
            0,
            format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                manifest.schema_version
            ),
        ));
    }
    let mut splits = Vec::new();
    for split in SPLITS {
        let path = dir.join(split).join("samples.jsonl");
        let samples = read_samples(&path, manifest.raw_dim)?;
        if let Some(info) = manifest.splits.get(split) {
            if info.total() != samples.len() {
                return Err(Error::load(
                    &path,
                    0,
                    format!("manifest lists {} samples, file has {}", info.total(), samples.len()),
                ));
            }
        }
        splits.push(samples);
    }
    let target = splits.pop().expect("three splits");
    let source_val = splits.pop().expect("three splits");
    let source_train = splits.pop().expect("three splits");
    Ok(Dataset {
        manifest,
        source_train,
        source_val,
        target,
    })
}
