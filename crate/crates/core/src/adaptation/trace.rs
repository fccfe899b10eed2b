use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudolabel::PseudoLabelRecord;

/// One adaptation batch. The next-batch losses are absent when the weight
/// was not measured (last batch, or the plain strategy).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub batch_index: usize,
    pub loss_t_next: Option<f64>,
    pub loss_tp_next: Option<f64>,
    pub delta: Option<f64>,
    pub alpha: f64,
    pub update_norm: f64,
    pub n_live_pseudo: usize,
    pub n_spoof_pseudo: usize,
}

pub const TRACE_HEADER: &str =
    "batch_index,loss_T_next,loss_Tp_next,delta,alpha,update_norm,n_live_pseudo,n_spoof_pseudo";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:e},{:e},{},{}",
            r.batch_index,
            opt(r.loss_t_next),
            opt(r.loss_tp_next),
            opt(r.delta),
            r.alpha,
            r.update_norm,
            r.n_live_pseudo,
            r.n_spoof_pseudo
        )
        .expect("write to string");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// JSONL: one object per record, tagged with its batch index.
pub fn write_pseudo_dump(path: &Path, batches: &[Vec<PseudoLabelRecord>]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        batch: usize,
        #[serde(flatten)]
        record: &'a PseudoLabelRecord,
    }
    let mut out = String::new();
    for (batch, records) in batches.iter().enumerate() {
        for record in records {
            out.push_str(&serde_json::to_string(&Line { batch, record })?);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
