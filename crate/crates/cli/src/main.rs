//! `fasda`: generate synthetic data, train on the sources, adapt to the
//! target, evaluate and tabulate.
//!
//! Exit codes: 0 success, 1 any other failure, 2 bad config or usage,
//! 3 a metric is undefined for the evaluation data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fasda::adaptation::{adapt_stream, write_pseudo_dump, write_trace_csv, Strategy};
use fasda::experiment::{
    evaluate, prepare_source, render_report, run_rng, run_variants, sweep_table, ExperimentConfig, ReportRow, RunSummary,
    SweepRow, Variant,
};
use fasda::metrics::{EvalReport, ThresholdMode};
use fasda::model::{load_model, save_model};
use fasda::parallel::Exec;
use fasda::synthdata::{apply_missing, generate_dataset, read_dataset, write_dataset, Dataset, MissingPattern};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "fasda", version, about = "Multi-modal anti-spoofing adaptation experiments on synthetic data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Knobs shared by every subcommand. Flags win over `--set`, which wins
/// over the config file.
#[derive(Args, Debug)]
struct Common {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "MFAS_SEED")]
    seed: Option<u64>,
    /// Config override `key.path=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true, value_name = "none|d|i|di")]
    missing: Option<String>,
    #[arg(long, global = true, value_name = "naive|reliability")]
    pseudo: Option<String>,
    #[arg(long, global = true, value_name = "plain|alpha")]
    strategy: Option<String>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true, value_name = "youden-source|fixed:X|oracle-target")]
    threshold_mode: Option<String>,
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate source and target splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train extractors, classifiers and adapters on the source splits.
    TrainSource {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a source model to the unlabeled target.
    Adapt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write every pseudo-label record as JSONL.
        #[arg(long)]
        dump_pseudo: bool,
    },
    /// Score the target and report HTER and AUC.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate evaluated run directories, one row each.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full runs over several seeds at each dropout count K.
    SweepK {
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20")]
        ks: Vec<usize>,
        /// Number of consecutive seeds, starting at the configured seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// What `evaluate` writes: the report plus what it was computed on.
#[derive(Serialize, Deserialize)]
struct RunReport {
    seed: u64,
    missing: MissingPattern,
    #[serde(flatten)]
    report: EvalReport,
}

fn resolve_config(c: &Common) -> fasda::Result<ExperimentConfig> {
    let base = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&c.set)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(m) = &c.missing {
        cfg.data.missing = m.parse()?;
    }
    if let Some(p) = &c.pseudo {
        cfg.adapt.labels = p.parse()?;
    }
    if let Some(s) = &c.strategy {
        cfg.adapt.strategy = s.parse::<Strategy>()?;
    }
    if let Some(k) = c.k {
        cfg.adapt.pseudo.k = k;
    }
    if let Some(t) = &c.threshold_mode {
        cfg.threshold_mode = t.parse::<ThresholdMode>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(out: &Path, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("config.json"), &(serde_json::to_string_pretty(cfg)? + "\n"))
}

/// The stored dataset with the configured missing pattern applied to the
/// target. Source splits stay fully modal.
fn load_data(dir: &Path, cfg: &ExperimentConfig) -> anyhow::Result<Dataset> {
    let mut data = read_dataset(dir)?;
    if data.manifest.raw_dim != cfg.model.raw {
        bail!(fasda::Error::Config {
            field: "model.raw".into(),
            msg: format!("dataset has raw widths {:?}, config expects {:?}", data.manifest.raw_dim, cfg.model.raw),
        });
    }
    data.target = apply_missing(&data.target, cfg.data.missing);
    Ok(data)
}

fn gen_data(cfg: &ExperimentConfig, out: &Path, exec: Exec) -> anyhow::Result<()> {
    let data = generate_dataset(&cfg.data, cfg.seed, exec)?;
    write_dataset(out, &data)?;
    prepare_out(out, cfg)?;
    println!(
        "wrote {} source-train, {} source-val and {} target samples to {}",
        data.source_train.len(),
        data.source_val.len(),
        data.target.len(),
        out.display()
    );
    Ok(())
}

fn train(cfg: &ExperimentConfig, data: &Path, out: &Path) -> anyhow::Result<()> {
    let data = load_data(data, cfg)?;
    prepare_out(out, cfg)?;
    let (model, curve) = prepare_source(cfg, &data.source_train)?;
    save_model(&out.join("model.json"), &model)?;
    let mut csv = String::from("epoch,loss\n");
    for (epoch, loss) in curve.iter().enumerate() {
        writeln!(csv, "{epoch},{loss:e}")?;
    }
    write(&out.join("loss_curve.csv"), &csv)?;
    println!(
        "source loss {:.4} -> {:.4} over {} epochs",
        curve[0],
        curve[curve.len() - 1],
        curve.len() - 1
    );
    Ok(())
}

fn adapt(cfg: &ExperimentConfig, data: &Path, model: &Path, out: &Path, dump: bool, exec: Exec) -> anyhow::Result<()> {
    let data = load_data(data, cfg)?;
    let mut model = load_model(model)?;
    prepare_out(out, cfg)?;
    let unlabeled: Vec<_> = data.target.iter().map(|s| s.unlabeled()).collect();
    let outcome = adapt_stream(
        &mut model,
        &unlabeled,
        &data.source_train,
        &cfg.adapt,
        &run_rng(cfg.seed).derive_tag("adapt"),
        exec,
    )?;
    save_model(&out.join("model.json"), &model)?;
    write_trace_csv(&out.join("trace.csv"), &outcome.trace)?;
    if dump {
        write_pseudo_dump(&out.join("pseudo_labels.jsonl"), &outcome.records)?;
    }
    println!(
        "adapted on {} target batches ({}, {} labels, missing {})",
        outcome.trace.len(),
        cfg.adapt.strategy,
        cfg.adapt.labels,
        cfg.data.missing
    );
    Ok(())
}

fn eval(cfg: &ExperimentConfig, data: &Path, model: &Path, out: &Path, exec: Exec) -> anyhow::Result<()> {
    let data = load_data(data, cfg)?;
    let model = load_model(model)?;
    prepare_out(out, cfg)?;
    let (report, scores) = evaluate(
        &model,
        &data.target,
        &data.source_val,
        cfg.threshold_mode,
        &cfg.adapt.pseudo,
        &run_rng(cfg.seed).derive_tag("eval"),
        exec,
    )?;
    let mut csv = String::from("id,score,label\n");
    for (s, sc) in data.target.iter().zip(&scores) {
        writeln!(csv, "{},{:e},{}", s.id, sc.score, sc.label)?;
    }
    write(&out.join("scores.csv"), &csv)?;
    let run = RunReport {
        seed: cfg.seed,
        missing: cfg.data.missing,
        report,
    };
    write(&out.join("report.json"), &(serde_json::to_string_pretty(&run)? + "\n"))?;
    print!("{}", run.report.to_table());
    Ok(())
}

fn report(runs: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for dir in runs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let path = dir.join("report.json");
        let row = if path.exists() {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let run: RunReport =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            ReportRow {
                name,
                hter: Some(run.report.hter),
                auc: Some(run.report.auc),
            }
        } else {
            log::warn!("{} has no report.json; listed as missing", dir.display());
            ReportRow {
                name,
                hter: None,
                auc: None,
            }
        };
        rows.push(row);
    }
    let (md, csv) = render_report(&rows);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("report.md"), &md)?;
    write(&out.join("report.csv"), &csv)?;
    print!("{md}");
    Ok(())
}

fn sweep_k(cfg: &ExperimentConfig, ks: &[usize], n_seeds: u64, out: &Path, exec: Exec) -> anyhow::Result<()> {
    if ks.is_empty() || n_seeds == 0 {
        bail!(fasda::Error::Config {
            field: "sweep-k".into(),
            msg: "needs at least one K and one seed".into(),
        });
    }
    prepare_out(out, cfg)?;
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + n_seeds).collect();
    let variants: Vec<Variant> = ks
        .iter()
        .map(|&k| Variant {
            missing: cfg.data.missing,
            labels: cfg.adapt.labels,
            strategy: cfg.adapt.strategy,
            k,
        })
        .collect();
    let results = run_variants(cfg, &seeds, &variants, exec)?;
    let n = seeds.len() as f64;
    let rows: Vec<SweepRow> = ks
        .iter()
        .enumerate()
        .map(|(vi, &k)| SweepRow {
            k,
            hter: results.iter().map(|r| r[vi].adapted.hter).sum::<f64>() / n,
            auc: results.iter().map(|r| r[vi].adapted.auc).sum::<f64>() / n,
        })
        .collect();
    let per_run: Vec<&RunSummary> = results.iter().flatten().collect();
    write(&out.join("runs.json"), &(serde_json::to_string_pretty(&per_run)? + "\n"))?;
    let (md, csv) = sweep_table(&rows);
    write(&out.join("sweep.md"), &md)?;
    write(&out.join("sweep.csv"), &csv)?;
    print!("{md}");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli.common)?;
    let exec = if cli.common.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    match &cli.command {
        Command::GenData { out } => gen_data(&cfg, out, exec),
        Command::TrainSource { data, out } => train(&cfg, data, out),
        Command::Adapt {
            data,
            model,
            out,
            dump_pseudo,
        } => adapt(&cfg, data, model, out, *dump_pseudo, exec),
        Command::Evaluate { data, model, out } => eval(&cfg, data, model, out, exec),
        Command::Report { runs, out } => report(runs, out),
        Command::SweepK { ks, seeds, out } => sweep_k(&cfg, ks, *seeds, out, exec),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<fasda::Error>() {
        Some(fasda::Error::Config { .. }) => 2,
        Some(fasda::Error::UndefinedMetric(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
