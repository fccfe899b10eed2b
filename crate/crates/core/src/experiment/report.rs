use std::fmt::Write as _;

/// One protocol row of a results grid. `None` marks a run that is missing.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub hter: Option<f64>,
    pub auc: Option<f64>,
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "—".into())
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = xs.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Markdown and CSV renderings of the same rows plus an average row over
/// the present runs. Both print the same two-decimal percentages.
pub fn render_report(rows: &[ReportRow]) -> (String, String) {
    let mut all = rows.to_vec();
    all.push(ReportRow {
        name: "Average".into(),
        hter: mean(rows.iter().map(|r| r.hter)),
        auc: mean(rows.iter().map(|r| r.auc)),
    });
    let width = all.iter().map(|r| r.name.chars().count()).max().unwrap_or(0).max(8);
    let mut md = format!("| {:<width$} | {:>8} | {:>8} |\n", "Protocol", "HTER (%)", "AUC (%)");
    writeln!(md, "|{}|{}|{}|", "-".repeat(width + 2), "-".repeat(10), "-".repeat(10)).expect("write to string");
    let mut csv = String::from("protocol,hter_pct,auc_pct\n");
    for r in &all {
        let (h, a) = (pct(r.hter), pct(r.auc));
        writeln!(md, "| {:<width$} | {h:>8} | {a:>8} |", r.name).expect("write to string");
        writeln!(csv, "{},{h},{a}", r.name).expect("write to string");
    }
    (md, csv)
}

/// Mean target metrics at one value of K.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub hter: f64,
    pub auc: f64,
}

pub fn sweep_table(rows: &[SweepRow]) -> (String, String) {
    let mut md = String::from("|  K | HTER (%) | AUC (%) |\n|----|----------|---------|\n");
    let mut csv = String::from("k,hter_pct,auc_pct\n");
    for r in rows {
        writeln!(md, "| {:>2} | {:>8.2} | {:>7.2} |", r.k, 100.0 * r.hter, 100.0 * r.auc).expect("write to string");
        writeln!(csv, "{},{:.2},{:.2}", r.k, 100.0 * r.hter, 100.0 * r.auc).expect("write to string");
    }
    (md, csv)
}
