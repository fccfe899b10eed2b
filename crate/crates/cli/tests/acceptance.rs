//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any failed. Plain `main`, so the lines show up in
//! `cargo test` output without `--nocapture`.

use std::fs;
use std::panic;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{anyhow, ensure, Context, Result};
use fasda::adaptation::{stability_weight, Strategy};
use fasda::crossmodal::{adapter_loss_tape, adapter_regularization_loss, fused_features, transform};
use fasda::experiment::{prepare_source, run_variants, ExperimentConfig, RunSummary, Variant};
use fasda::metrics::{auc, hter, youden_threshold, ScoredSample};
use fasda::model::{extract_features, source_loss, source_loss_value, FasModel, ModalBatch, ModelDims, Trainable};
use fasda::numerics::{dropout_mask, Gradients, RngStream, Tape, Tensor};
use fasda::parallel::Exec;
use fasda::pseudolabel::{label_batch, label_sample, LabelMode, PseudoConfig};
use fasda::synthdata::{
    apply_missing, generate_dataset, MissingPattern, Modality, MultiModalSample, SynthConfig, LIVE, SPOOF,
};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed < limit
}

// ---------------------------------------------------------------- 1

#[derive(Clone, Copy, Debug)]
enum Part {
    Extractor(usize, usize),
    Classifier(usize),
    Adapter(usize, usize),
}

/// One scalar parameter: a layer, weight or bias, flat index.
#[derive(Clone, Copy, Debug)]
struct Coord {
    part: Part,
    bias: bool,
    index: usize,
}

fn layer(model: &mut FasModel, part: Part) -> &mut fasda::model::Linear {
    match part {
        Part::Extractor(m, k) => &mut model.extractors[m].layers[k],
        Part::Classifier(m) => &mut model.classifiers[m],
        Part::Adapter(m, k) => match m {
            0 => &mut model.adapters.rgb.layers[k],
            1 => &mut model.adapters.ir.layers[k],
            _ => &mut model.adapters.depth.layers[k],
        },
    }
}

fn tensor(model: &mut FasModel, c: Coord) -> &mut Tensor {
    let l = layer(model, c.part);
    if c.bias {
        &mut l.bias
    } else {
        &mut l.weight
    }
}

fn random_coord(model: &mut FasModel, kind: u8, rng: &mut RngStream) -> Coord {
    let pick = |n: usize, rng: &mut RngStream| ((rng.uniform() * n as f64) as usize).min(n - 1);
    let m = pick(3, rng);
    let part = match kind {
        0 => Part::Extractor(m, pick(model.extractors[m].layers.len(), rng)),
        1 => Part::Classifier(m),
        _ => Part::Adapter(m, pick(2, rng)),
    };
    let bias = rng.uniform() < 0.25;
    let mut c = Coord { part, bias, index: 0 };
    c.index = pick(tensor(model, c).len(), rng);
    c
}

fn analytic(grads: &Gradients, bound: &fasda::model::Bound, c: Coord) -> f64 {
    let (w, b) = match c.part {
        Part::Extractor(m, k) => bound.extractors[m][k],
        Part::Classifier(m) => bound.classifiers[m],
        Part::Adapter(m, k) => bound.adapters[m][k],
    };
    grads
        .get(if c.bias { b } else { w })
        .map_or(0.0, |g| g.data()[c.index])
}

/// Relative error with a small floor on the denominator so near-zero
/// gradients compare on absolute terms.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn central_difference(model: &FasModel, c: Coord, f: impl Fn(&FasModel) -> Result<f64>) -> Result<f64> {
    const H: f64 = 1e-5;
    let mut plus = model.clone();
    tensor(&mut plus, c).data_mut()[c.index] += H;
    let mut minus = model.clone();
    tensor(&mut minus, c).data_mut()[c.index] -= H;
    Ok((f(&plus)? - f(&minus)?) / (2.0 * H))
}

fn criterion_1() -> Result<Verdict> {
    let start = Instant::now();
    let cfg = SynthConfig {
        source_per_class: 20,
        val_per_class: 4,
        target_per_class: 20,
        ..SynthConfig::default()
    };
    let data = generate_dataset(&cfg, 0, Exec::Parallel)?;
    let dims = ModelDims::default();
    let mut rng = RngStream::new(17);
    let mut worst = [0.0f64; 3];
    const COORDS_PER_POINT: usize = 6;
    for point in 0..20u64 {
        let mut model = FasModel::new(dims.clone(), &RngStream::new(1000 + point));
        let mut idx: Vec<usize> = (0..data.source_train.len()).collect();
        rng.shuffle(&mut idx);
        let batch: Vec<MultiModalSample> = idx[..8].iter().map(|&i| data.source_train[i].clone()).collect();
        let labels: Vec<f64> = batch.iter().map(|s| f64::from(s.label.unwrap())).collect();

        // Extractors and classifiers through the source loss.
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, Trainable::Main);
        let mb = ModalBatch::new(&model, &batch)?;
        let loss = source_loss(&mut tape, &bound, &mb, &labels)?;
        let grads = tape.backward(loss)?;
        for kind in 0..2u8 {
            for _ in 0..COORDS_PER_POINT {
                let c = random_coord(&mut model, kind, &mut rng);
                let n = central_difference(&model, c, |m| Ok(source_loss_value(m, &batch)?))?;
                worst[kind as usize] = worst[kind as usize].max(rel_err(analytic(&grads, &bound, c), n));
            }
        }

        // Adapters through their regularization losses, with the target
        // side under a rotating missing pattern.
        let pattern = MissingPattern::ALL[point as usize % 4];
        let source: Vec<MultiModalSample> = batch[..4].to_vec();
        let at = (point as usize * 4) % (data.target.len() - 4);
        let target = apply_missing(&data.target[at..at + 4], pattern);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, Trainable::Adapters);
        let (sb, tb) = (ModalBatch::new(&model, &source)?, ModalBatch::new(&model, &target)?);
        let (root, _) = adapter_loss_tape(&mut tape, &bound, Some(&sb), Some(&tb))?;
        let grads = tape.backward(root.context("adapter loss has terms")?)?;
        for _ in 0..COORDS_PER_POINT {
            let c = random_coord(&mut model, 2, &mut rng);
            let n = central_difference(&model, c, |m| Ok(adapter_regularization_loss(m, &source, &target)?.total()))?;
            worst[2] = worst[2].max(rel_err(analytic(&grads, &bound, c), n));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst.iter().all(|&e| e <= 1e-4) && within(Duration::from_secs(30), elapsed),
        format!(
            "max rel err extractors {:.1e}, classifiers {:.1e}, adapters {:.1e} over 20 points",
            worst[0], worst[1], worst[2]
        ),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Result<Verdict> {
    let data = generate_dataset(
        &SynthConfig {
            source_per_class: 10,
            val_per_class: 2,
            target_per_class: 10,
            ..SynthConfig::default()
        },
        3,
        Exec::Parallel,
    )?;
    let model = FasModel::new(ModelDims::default(), &RngStream::new(5));
    let mut worst = 0.0f64;
    let mut checked = 0;
    for pattern in MissingPattern::ALL {
        for s in apply_missing(&data.target, pattern) {
            let f = extract_features(&model, &s)?;
            let t = transform(&f, &model.adapters)?;
            let fused = fused_features(&model, &s)?;
            let rgb = f.get(Modality::Rgb).unwrap();
            let n = rgb.len();
            // Each presence pattern written out by hand.
            let expected: [Vec<f64>; 3] = match pattern {
                MissingPattern::None => {
                    let (ir, d) = (f.get(Modality::Ir).unwrap(), f.get(Modality::Depth).unwrap());
                    let (a_rgb, a_di) = (t.rgb.as_ref().unwrap(), t.di.as_ref().unwrap());
                    [
                        (0..n).map(|j| (rgb[j] + a_rgb[j]) / 2.0).collect(),
                        (0..n).map(|j| (ir[j] + t.ir[j]) / 2.0).collect(),
                        (0..n).map(|j| (d[j] + t.dr[j] + a_di[j]) / 3.0).collect(),
                    ]
                }
                MissingPattern::MissingD => {
                    let ir = f.get(Modality::Ir).unwrap();
                    let (a_rgb, a_di) = (t.rgb.as_ref().unwrap(), t.di.as_ref().unwrap());
                    [
                        (0..n).map(|j| (rgb[j] + a_rgb[j]) / 2.0).collect(),
                        (0..n).map(|j| (ir[j] + t.ir[j]) / 2.0).collect(),
                        (0..n).map(|j| (t.dr[j] + a_di[j]) / 2.0).collect(),
                    ]
                }
                MissingPattern::MissingI => {
                    let d = f.get(Modality::Depth).unwrap();
                    [rgb.to_vec(), t.ir.clone(), (0..n).map(|j| (d[j] + t.dr[j]) / 2.0).collect()]
                }
                MissingPattern::MissingDI => [rgb.to_vec(), t.ir.clone(), t.dr.clone()],
            };
            for m in Modality::ALL {
                for (a, b) in fused.get(m).iter().zip(&expected[m.index()]) {
                    worst = worst.max((a - b).abs());
                }
            }
            if pattern == MissingPattern::MissingDI {
                ensure!(fused.get(Modality::Rgb) == rgb, "rgb must pass through unchanged without IR and D");
                ensure!(fused.get(Modality::Depth) == t.dr.as_slice(), "depth must reduce to A_D(f_rgb)");
            }
            checked += 1;
        }
    }
    verdict(
        worst <= 1e-12,
        format!("{checked} samples over 4 presence patterns, max abs diff {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- 3

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn criterion_3() -> Result<Verdict> {
    // Stub: tiny random extractors and adapters, hand-set classifiers.
    let dims = ModelDims {
        raw: [3; 3],
        hidden: vec![4],
        feat: 2,
        adapter_hidden: 2,
    };
    let mut model = FasModel::new(dims, &RngStream::new(9));
    let heads = [([1.5, -0.8], 0.1), ([0.6, 1.1], -0.4), ([-0.9, 0.7], 0.25)];
    for (m, (w, b)) in heads.iter().enumerate() {
        model.classifiers[m].weight = Tensor::new(vec![2, 1], w.to_vec())?;
        model.classifiers[m].bias = Tensor::vector(vec![*b]);
    }
    let samples = [
        MultiModalSample {
            id: 41,
            domain: "stub".into(),
            label: None,
            rgb: vec![0.9, -0.2, 0.4],
            ir: Some(vec![0.3, 0.8, -0.5]),
            d: Some(vec![-0.7, 0.1, 0.6]),
        },
        MultiModalSample {
            id: 42,
            domain: "stub".into(),
            label: None,
            rgb: vec![-0.6, 0.5, 1.2],
            ir: None,
            d: Some(vec![0.2, -0.9, 0.3]),
        },
    ];
    let cfg = PseudoConfig {
        k: 6,
        dropout: 0.5,
        threshold: 0.5,
    };
    let rng = RngStream::new(77);
    let mut worst = 0.0f64;
    let mut labels_match = true;
    for s in &samples {
        let rec = label_sample(&model, s, &cfg, &rng)?;
        let fused = fused_features(&model, s)?;
        let score = |m: usize, f: &[f64]| sigmoid(heads[m].0[0] * f[0] + heads[m].0[1] * f[1] + heads[m].1);
        let p: Vec<f64> = (0..3).map(|m| score(m, fused.get(Modality::ALL[m]))).collect();
        let mut v = [0.0; 3];
        let mut mu = [0.0; 3];
        for m in 0..3 {
            let f = fused.get(Modality::ALL[m]);
            let mut r = rng.derive(s.id).derive(m as u64);
            let mut xs = Vec::new();
            for _ in 0..cfg.k {
                let mask = dropout_mask(&[2], cfg.dropout, &mut r)?;
                let masked = [f[0] * mask.data()[0], f[1] * mask.data()[1]];
                xs.push(score(m, &masked));
            }
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            mu[m] = mean;
            v[m] = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        }
        let (lo, hi) = (v.iter().cloned().fold(f64::MAX, f64::min), v.iter().cloned().fold(f64::MIN, f64::max));
        let w: Vec<f64> = v.iter().map(|x| if hi > lo { 1.0 - (x - lo) / (hi - lo) } else { 1.0 }).collect();
        let z: f64 = w.iter().map(|x| x.exp()).sum();
        let psi: Vec<f64> = w.iter().map(|x| x.exp() / z).collect();
        let p_hat: f64 = (0..3).map(|m| psi[m] * p[m]).sum();
        let naive = (p[0] + p[1] + p[2]) / 3.0;
        let label = if p_hat >= 0.5 { LIVE } else { SPOOF };
        let naive_label = if naive >= 0.5 { LIVE } else { SPOOF };
        for m in 0..3 {
            for (a, b) in [(rec.p[m], p[m]), (rec.mu[m], mu[m]), (rec.v[m], v[m]), (rec.w[m], w[m]), (rec.psi[m], psi[m])] {
                worst = worst.max((a - b).abs());
            }
        }
        worst = worst.max((rec.p_hat - p_hat).abs());
        labels_match &= rec.id == s.id && rec.label == label && rec.naive_label == naive_label;
    }

    // Rate 0 on a source-trained model over the whole default target.
    let exp = ExperimentConfig::default();
    let data = generate_dataset(&exp.data, 0, Exec::Parallel)?;
    let (trained, _) = prepare_source(&exp, &data.source_train)?;
    let zero = PseudoConfig {
        dropout: 0.0,
        ..PseudoConfig::default()
    };
    let records = label_batch(&trained, &data.target, &zero, &RngStream::new(1), Exec::Parallel)?;
    let same = records.iter().filter(|r| r.label == r.naive_label).count();
    verdict(
        worst <= 1e-10 && labels_match && same == records.len(),
        format!(
            "stub records max abs diff {worst:.1e}, labels match {labels_match}; rate 0: {same}/{} reliability == naive",
            records.len()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Result<Verdict> {
    let beta = 500.0;
    let alpha = |delta: f64| stability_weight(delta, 0.0, beta);
    let at_zero = (alpha(0.0)? - 2f64.ln() / beta).abs();
    let grid: Vec<f64> = (0..=1000).map(|i| -0.05 + 0.1 * i as f64 / 1000.0).collect();
    let values: Vec<f64> = grid.iter().map(|&d| alpha(d)).collect::<fasda::Result<_>>()?;
    let monotone = values.windows(2).all(|w| w[1] > w[0]);
    // Branch agreement over a range where ln(1 + e^{beta x}) / beta is
    // finite and nonzero in f64.
    let mut worst = 0.0f64;
    for i in 0..=4000 {
        let delta = -1.4 + 2.8 * i as f64 / 4000.0;
        let direct = (beta * delta).exp().ln_1p() / beta;
        if direct.is_finite() && direct > 0.0 {
            worst = worst.max((alpha(delta)? - direct).abs() / direct);
        }
    }
    verdict(
        at_zero <= 1e-12 && monotone && worst <= 1e-12,
        format!("|alpha(0) - ln2/500| = {at_zero:.1e}, strictly increasing on 1001 points: {monotone}, branch rel diff {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- 5-8

fn mean(runs: &[Vec<RunSummary>], vi: usize, f: impl Fn(&RunSummary) -> f64) -> f64 {
    runs.iter().map(|r| f(&r[vi])).sum::<f64>() / runs.len() as f64
}

fn variant(missing: MissingPattern, labels: LabelMode, strategy: Strategy) -> Variant {
    Variant {
        missing,
        labels,
        strategy,
        k: 10,
    }
}

fn criterion_5() -> Result<Verdict> {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.adapt.corrupt = 0.3;
    let variants = [
        variant(MissingPattern::None, LabelMode::Reliability, Strategy::Alpha),
        variant(MissingPattern::None, LabelMode::Reliability, Strategy::Plain),
    ];
    let runs = run_variants(&cfg, &SEEDS, &variants, Exec::Parallel)?;
    let (alpha, plain) = (mean(&runs, 0, |r| r.adapted.hter), mean(&runs, 1, |r| r.adapted.hter));
    let elapsed = start.elapsed();
    verdict(
        alpha <= plain - 0.01 && within(Duration::from_secs(300), elapsed),
        format!("30% corrupted labels: HTER alpha {:.2}% vs plain {:.2}%", 100.0 * alpha, 100.0 * plain),
    )
}

fn criterion_6() -> Result<Verdict> {
    let cfg = ExperimentConfig::default();
    let variants = [
        variant(MissingPattern::None, LabelMode::Reliability, Strategy::Alpha),
        variant(MissingPattern::None, LabelMode::Naive, Strategy::Alpha),
    ];
    let runs = run_variants(&cfg, &SEEDS, &variants, Exec::Parallel)?;
    let acc = (mean(&runs, 0, |r| r.pseudo_accuracy), mean(&runs, 1, |r| r.pseudo_accuracy));
    let err = (mean(&runs, 0, |r| r.adapted.hter), mean(&runs, 1, |r| r.adapted.hter));
    verdict(
        acc.0 >= acc.1 && err.0 <= err.1,
        format!(
            "pseudo-label accuracy reliability {:.4} vs naive {:.4}; HTER {:.2}% vs {:.2}%",
            acc.0,
            acc.1,
            100.0 * err.0,
            100.0 * err.1
        ),
    )
}

fn fasda_bin(dir: &Path, args: &[&str]) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fasda"))
        .current_dir(dir)
        .env_remove("MFAS_SEED")
        .args(args)
        .output()?;
    ensure!(
        out.status.success(),
        "fasda {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8(out.stdout)?)
}

fn criterion_7() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    fasda_bin(dir.path(), &["sweep-k", "--ks", "1,2,5,10,20", "--seeds", "5", "--out", "sweep"])?;
    let csv = fs::read_to_string(dir.path().join("sweep/sweep.csv"))?;
    let mut by_k = Vec::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        by_k.push((f[0].parse::<usize>()?, f[1].parse::<f64>()?));
    }
    let at = |k: usize| by_k.iter().find(|r| r.0 == k).map(|r| r.1).ok_or_else(|| anyhow!("no row for K={k}"));
    let (k1, k10) = (at(1)?, at(10)?);
    let table: Vec<String> = by_k.iter().map(|(k, h)| format!("K={k}: {h:.2}%")).collect();
    verdict(k10 <= k1, format!("mean HTER {}", table.join(", ")))
}

fn criterion_8() -> Result<Verdict> {
    let cfg = ExperimentConfig::default();
    let mut pass = true;
    let mut parts = Vec::new();
    for missing in MissingPattern::ALL {
        let start = Instant::now();
        let runs = run_variants(
            &cfg,
            &SEEDS,
            &[variant(missing, LabelMode::Reliability, Strategy::Alpha)],
            Exec::Parallel,
        )?;
        let elapsed = start.elapsed();
        let (before, after) = (mean(&runs, 0, |r| r.source_only.hter), mean(&runs, 0, |r| r.adapted.hter));
        pass &= after <= before && within(Duration::from_secs(60), elapsed);
        parts.push(format!(
            "{} {:.2}% -> {:.2}% ({:.1}s)",
            missing.scenario(),
            100.0 * before,
            100.0 * after,
            elapsed.as_secs_f64()
        ));
    }
    verdict(pass, parts.join("; "))
}

// ---------------------------------------------------------------- 9

fn cli_pipeline(dir: &Path) -> Result<()> {
    fasda_bin(dir, &["--seed", "3", "gen-data", "--out", "data"])?;
    fasda_bin(dir, &["--seed", "3", "train-source", "--data", "data", "--out", "src"])?;
    fasda_bin(
        dir,
        &["--seed", "3", "adapt", "--data", "data", "--model", "src/model.json", "--out", "ad", "--dump-pseudo"],
    )?;
    fasda_bin(dir, &["--seed", "3", "evaluate", "--data", "data", "--model", "src/model.json", "--out", "ev0"])?;
    fasda_bin(dir, &["--seed", "3", "evaluate", "--data", "data", "--model", "ad/model.json", "--out", "ev"])?;
    fasda_bin(dir, &["report", "ev0", "ev", "--out", "rep"])?;
    Ok(())
}

fn criterion_9() -> Result<Verdict> {
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    cli_pipeline(a.path())?;
    cli_pipeline(b.path())?;
    let files = [
        "data/target/samples.jsonl",
        "src/model.json",
        "ad/model.json",
        "ad/trace.csv",
        "ad/pseudo_labels.jsonl",
        "ev/report.json",
        "ev0/report.json",
        "rep/report.md",
        "rep/report.csv",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(a.path().join(f)).ok() != fs::read(b.path().join(f)).ok())
        .collect();
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across two full runs", files.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Result<Verdict> {
    let mut rng = RngStream::new(2024);
    // Two-decimal scores so ties occur.
    let samples: Vec<ScoredSample> = (0..1000)
        .map(|_| {
            let label = if rng.uniform() < 0.45 { LIVE } else { SPOOF };
            let shift = if label == LIVE { 0.15 } else { 0.0 };
            let score = ((rng.uniform() * 0.85 + shift) * 100.0).round() / 100.0;
            ScoredSample { score, label }
        })
        .collect();
    let live: Vec<f64> = samples.iter().filter(|s| s.label == LIVE).map(|s| s.score).collect();
    let spoof: Vec<f64> = samples.iter().filter(|s| s.label != LIVE).map(|s| s.score).collect();

    let mut wins = 0.0;
    for &l in &live {
        for &s in &spoof {
            wins += if l > s {
                1.0
            } else if l == s {
                0.5
            } else {
                0.0
            };
        }
    }
    let auc_diff = (auc(&samples)? - wins / (live.len() * spoof.len()) as f64).abs();

    let rates = |t: f64| {
        let far = spoof.iter().filter(|&&s| s >= t).count() as f64 / spoof.len() as f64;
        let frr = live.iter().filter(|&&s| s < t).count() as f64 / live.len() as f64;
        (far, frr)
    };
    let mut hter_diff = 0.0f64;
    for i in 0..=200 {
        let t = i as f64 / 200.0;
        let (far, frr) = rates(t);
        let h = hter(&samples, t)?;
        hter_diff = hter_diff
            .max((h.hter - (far + frr) / 2.0).abs())
            .max((h.far - far).abs())
            .max((h.frr - frr).abs());
    }

    let mut distinct: Vec<f64> = samples.iter().map(|s| s.score).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates = vec![0.0, 1.0];
    candidates.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.sort_by(f64::total_cmp);
    let mut best = (f64::NEG_INFINITY, 0.0);
    for &t in &candidates {
        let (far, frr) = rates(t);
        let j = (1.0 - frr) - far;
        if j > best.0 {
            best = (j, t);
        }
    }
    let youden = youden_threshold(&samples)?;
    verdict(
        auc_diff <= 1e-12 && hter_diff <= 1e-12 && youden == best.1,
        format!(
            "1000 samples: AUC diff {auc_diff:.1e}, HTER diff {hter_diff:.1e}, Youden {youden} vs exhaustive {}",
            best.1
        ),
    )
}

type Criterion = fn() -> Result<Verdict>;

fn main() {
    let criteria: [(&str, Criterion); 10] = [
        ("gradient checks", criterion_1),
        ("fusion exactness", criterion_2),
        ("pseudo-label oracle", criterion_3),
        ("stability weight analytics", criterion_4),
        ("alpha vs plain under corrupted labels", criterion_5),
        ("reliability vs naive labels", criterion_6),
        ("K sweep", criterion_7),
        ("adaptation helps in every scenario", criterion_8),
        ("determinism", criterion_9),
        ("metric oracles", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| *f == n.to_string()) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(run)
            .map_err(|p| anyhow!("panicked: {:?}", p.downcast_ref::<String>().cloned().unwrap_or_default()))
            .and_then(|r| r);
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(v) => {
                failed += usize::from(!v.pass);
                println!(
                    "criterion {n:>2} {}: {name}: {} [{secs:.1}s]",
                    if v.pass { "PASS" } else { "FAIL" },
                    v.detail
                );
            }
            Err(e) => {
                failed += 1;
                println!("criterion {n:>2} FAIL: {name}: error: {e:#} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
