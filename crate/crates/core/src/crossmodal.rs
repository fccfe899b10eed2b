//! Cross-modal feature adapters and indicator-gated fusion.
//!
//! Adapters synthesize one modality's features from another's. Fusion mixes
//! each modality's own features (when present) with the synthesized ones, so
//! a missing modality is substituted and a present one is enhanced.

use std::borrow::Borrow;

use crate::error::{Error, Result};
use crate::model::{extract_features, extract_tape, Adapters, Bound, FasModel, FeatureSet, FeatureVars, Mlp, ModalBatch, Trainable};
use crate::numerics::{cosine_similarity, Tape, Var};
use crate::synthdata::{Modality, MultiModalSample};

/// Adapter outputs for one sample: `ir = A_IR(f_RGB)`, `dr = A_D(f_RGB)`,
/// and when IR is present `rgb = A_RGB(f_IR)`, `di = A_D(f_IR)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformed {
    pub rgb: Option<Vec<f64>>,
    pub ir: Vec<f64>,
    pub dr: Vec<f64>,
    pub di: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatureSet {
    pub feats: [Vec<f64>; 3],
}

impl FusedFeatureSet {
    pub fn get(&self, m: Modality) -> &[f64] {
        &self.feats[m.index()]
    }
}

fn indicator(present: bool) -> f64 {
    if present {
        1.0
    } else {
        0.0
    }
}

pub fn transform(features: &FeatureSet, adapters: &Adapters) -> Result<Transformed> {
    let rgb = features
        .get(Modality::Rgb)
        .ok_or_else(|| Error::Contract("transform needs rgb features".into()))?;
    let ir = features.get(Modality::Ir);
    Ok(Transformed {
        rgb: ir.map(|f| adapters.rgb.forward_row(f)),
        ir: adapters.ir.forward_row(rgb),
        dr: adapters.depth.forward_row(rgb),
        di: ir.map(|f| adapters.depth.forward_row(f)),
    })
}

/// Indicator-gated average of own and synthesized features:
///
/// ```text
/// rgb~ = (f_rgb + I_ir a_rgb) / (1 + I_ir)
/// ir~  = (I_ir f_ir + a_ir) / (1 + I_ir)
/// d~   = (I_d f_d + a_dr + I_ir a_di) / (1 + I_d + I_ir)
/// ```
pub fn fuse(features: &FeatureSet, t: &Transformed) -> Result<FusedFeatureSet> {
    let f_rgb = features
        .get(Modality::Rgb)
        .ok_or_else(|| Error::Contract("fuse needs rgb features".into()))?;
    let has_ir = features.has(Modality::Ir);
    if has_ir != t.rgb.is_some() || has_ir != t.di.is_some() {
        return Err(Error::Contract("transformed set does not match the IR indicator".into()));
    }
    let i_ir = indicator(has_ir);
    let i_d = indicator(features.has(Modality::Depth));
    let n = f_rgb.len();
    let zeros = vec![0.0; n];
    let f_ir = features.get(Modality::Ir).unwrap_or(&zeros);
    let f_d = features.get(Modality::Depth).unwrap_or(&zeros);
    let a_rgb = t.rgb.as_deref().unwrap_or(&zeros);
    let a_di = t.di.as_deref().unwrap_or(&zeros);
    let rgb = (0..n).map(|j| (f_rgb[j] + i_ir * a_rgb[j]) / (1.0 + i_ir)).collect();
    let ir = (0..n).map(|j| (i_ir * f_ir[j] + t.ir[j]) / (1.0 + i_ir)).collect();
    let d = (0..n)
        .map(|j| (i_d * f_d[j] + t.dr[j] + i_ir * a_di[j]) / (1.0 + i_d + i_ir))
        .collect();
    Ok(FusedFeatureSet { feats: [rgb, ir, d] })
}

/// Extract, transform and fuse one sample.
pub fn fused_features(model: &FasModel, sample: &MultiModalSample) -> Result<FusedFeatureSet> {
    let f = extract_features(model, sample)?;
    let t = transform(&f, &model.adapters)?;
    fuse(&f, &t)
}

/// Taped adapter outputs for a batch. Outputs fed by IR are zeroed on rows
/// without IR.
#[derive(Clone, Debug)]
pub struct TransformedVars {
    pub rgb: Option<Var>,
    pub ir: Var,
    pub dr: Var,
    pub di: Option<Var>,
}

pub fn transform_tape(tape: &mut Tape, bound: &Bound, feats: &FeatureVars) -> Result<TransformedVars> {
    let rgb = feats
        .get(Modality::Rgb)
        .ok_or_else(|| Error::Contract("transform needs rgb features".into()))?;
    let ir_present = feats.indicator(Modality::Ir).to_vec();
    let from_ir = |tape: &mut Tape, adapter: &[(Var, Var)]| -> Result<Option<Var>> {
        let Some(f_ir) = feats.get(Modality::Ir) else { return Ok(None) };
        let out = Mlp::forward_tape(tape, adapter, f_ir)?;
        Ok(Some(tape.row_scale(out, ir_present.clone())?))
    };
    Ok(TransformedVars {
        rgb: from_ir(tape, &bound.adapters[Modality::Rgb.index()])?,
        ir: Mlp::forward_tape(tape, &bound.adapters[Modality::Ir.index()], rgb)?,
        dr: Mlp::forward_tape(tape, &bound.adapters[Modality::Depth.index()], rgb)?,
        di: from_ir(tape, &bound.adapters[Modality::Depth.index()])?,
    })
}

fn sum_present(tape: &mut Tape, terms: &[Option<Var>]) -> Result<Var> {
    let mut present = terms.iter().flatten().copied();
    let mut acc = present.next().expect("at least one term");
    for v in present {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Batched fusion on the tape, `[B, feat]` per modality.
pub fn fuse_tape(tape: &mut Tape, feats: &FeatureVars, t: &TransformedVars) -> Result<[Var; 3]> {
    let f_rgb = feats
        .get(Modality::Rgb)
        .ok_or_else(|| Error::Contract("fuse needs rgb features".into()))?;
    let i_ir = feats.indicator(Modality::Ir);
    let i_d = feats.indicator(Modality::Depth);
    let inv = |parts: &[&[f64]]| -> Vec<f64> {
        (0..i_ir.len())
            .map(|r| 1.0 / (1.0 + parts.iter().map(|p| p[r]).sum::<f64>()))
            .collect()
    };
    let rgb_sum = sum_present(tape, &[Some(f_rgb), t.rgb])?;
    let rgb = tape.row_scale(rgb_sum, inv(&[i_ir]))?;
    let ir_sum = sum_present(tape, &[feats.get(Modality::Ir), Some(t.ir)])?;
    let ir = tape.row_scale(ir_sum, inv(&[i_ir]))?;
    let d_sum = sum_present(tape, &[feats.get(Modality::Depth), Some(t.dr), t.di])?;
    let d = tape.row_scale(d_sum, inv(&[i_d, i_ir]))?;
    Ok([rgb, ir, d])
}

/// Extract, transform and fuse a batch on the tape.
pub fn fused_tape(tape: &mut Tape, bound: &Bound, batch: &ModalBatch) -> Result<[Var; 3]> {
    let feats = extract_tape(tape, bound, batch)?;
    let t = transform_tape(tape, bound, &feats)?;
    fuse_tape(tape, &feats, &t)
}

/// Mean cosine misalignment per adapter loss (rgb, ir, depth).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterLosses {
    pub values: [f64; 3],
    /// Number of contributing terms.
    pub counts: [usize; 3],
    /// Loss had no contributing term and was defined as 0.
    pub degenerate: [bool; 3],
}

impl AdapterLosses {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

fn misalignment(a: &[f64], b: &[f64]) -> f64 {
    (1.0 - cosine_similarity(a, b)).abs()
}

/// Adapter losses from already computed features and adapter outputs.
/// Source terms are ungated; target terms are gated by the indicators of the
/// modalities each term reads.
pub fn regularization_from_parts(
    source: &[(FeatureSet, Transformed)],
    target: &[(FeatureSet, Transformed)],
) -> Result<AdapterLosses> {
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for (gated, set) in [(false, source), (true, target)] {
        for (f, t) in set {
            let f_rgb = f.get(Modality::Rgb).ok_or_else(|| Error::Contract("rgb features missing".into()))?;
            let (ir, d) = (f.get(Modality::Ir), f.get(Modality::Depth));
            if !gated && (ir.is_none() || d.is_none()) {
                return Err(Error::Contract("source samples must have every modality".into()));
            }
            if let (Some(_), Some(a_rgb)) = (ir, &t.rgb) {
                sums[0] += misalignment(f_rgb, a_rgb);
                counts[0] += 1;
            }
            if let Some(f_ir) = ir {
                sums[1] += misalignment(f_ir, &t.ir);
                counts[1] += 1;
            }
            if let Some(f_d) = d {
                sums[2] += misalignment(f_d, &t.dr);
                counts[2] += 1;
                if let (Some(_), Some(a_di)) = (ir, &t.di) {
                    sums[2] += misalignment(f_d, a_di);
                    counts[2] += 1;
                }
            }
        }
    }
    Ok(AdapterLosses {
        values: std::array::from_fn(|k| if counts[k] == 0 { 0.0 } else { sums[k] / counts[k] as f64 }),
        counts,
        degenerate: counts.map(|c| c == 0),
    })
}

struct TermSums {
    sums: [Option<Var>; 3],
    counts: [f64; 3],
}

fn batch_terms(tape: &mut Tape, bound: &Bound, batch: &ModalBatch) -> Result<TermSums> {
    let feats = extract_tape(tape, bound, batch)?;
    let t = transform_tape(tape, bound, &feats)?;
    let i_ir = feats.indicator(Modality::Ir).to_vec();
    let i_d = feats.indicator(Modality::Depth).to_vec();
    let both: Vec<f64> = i_ir.iter().zip(&i_d).map(|(a, b)| a * b).collect();
    let mut sums = [None; 3];
    let mut counts = [0.0; 3];
    let mut add = |tape: &mut Tape, k: usize, a: Var, b: Var, w: &[f64]| -> Result<()> {
        let c: f64 = w.iter().sum();
        if c == 0.0 {
            return Ok(());
        }
        let term = tape.cosine_distance_sum(a, b, w.to_vec())?;
        sums[k] = Some(match sums[k] {
            None => term,
            Some(s) => tape.add(s, term)?,
        });
        counts[k] += c;
        Ok(())
    };
    let f_rgb = feats.get(Modality::Rgb).expect("rgb always present");
    if let (Some(f_ir), Some(a_rgb)) = (feats.get(Modality::Ir), t.rgb) {
        add(tape, 0, f_rgb, a_rgb, &i_ir)?;
        add(tape, 1, f_ir, t.ir, &i_ir)?;
    }
    if let Some(f_d) = feats.get(Modality::Depth) {
        add(tape, 2, f_d, t.dr, &i_d)?;
        if let Some(a_di) = t.di {
            add(tape, 2, f_d, a_di, &both)?;
        }
    }
    Ok(TermSums { sums, counts })
}

/// Adapter losses on the tape. Returns `None` when no loss has a
/// contributing term.
pub fn adapter_loss_tape(
    tape: &mut Tape,
    bound: &Bound,
    source: Option<&ModalBatch>,
    target: Option<&ModalBatch>,
) -> Result<(Option<Var>, AdapterLosses)> {
    if let Some(s) = source {
        if !(s.all_present(Modality::Ir) && s.all_present(Modality::Depth)) {
            return Err(Error::Contract("source samples must have every modality".into()));
        }
    }
    let parts: Vec<TermSums> = [source, target]
        .into_iter()
        .flatten()
        .map(|b| batch_terms(tape, bound, b))
        .collect::<Result<_>>()?;
    let mut report = AdapterLosses::default();
    let mut total: Option<Var> = None;
    for k in 0..3 {
        let count: f64 = parts.iter().map(|p| p.counts[k]).sum();
        report.counts[k] = count as usize;
        report.degenerate[k] = count == 0.0;
        if count == 0.0 {
            continue;
        }
        let terms: Vec<Option<Var>> = parts.iter().map(|p| p.sums[k]).collect();
        let sum = sum_present(tape, &terms)?;
        let loss = tape.scale(sum, 1.0 / count);
        report.values[k] = tape.value(loss).item();
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    if report.degenerate.iter().any(|&d| d) {
        log::debug!("adapter loss without contributing terms: {:?}", report.degenerate);
    }
    Ok((total, report))
}

fn optional_batch<S: Borrow<MultiModalSample>>(model: &FasModel, samples: &[S]) -> Result<Option<ModalBatch>> {
    if samples.is_empty() {
        Ok(None)
    } else {
        ModalBatch::new(model, samples).map(Some)
    }
}

pub fn adapter_regularization_loss<S: Borrow<MultiModalSample>>(
    model: &FasModel,
    source: &[S],
    target: &[S],
) -> Result<AdapterLosses> {
    let (s, t) = (optional_batch(model, source)?, optional_batch(model, target)?);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::Nothing);
    Ok(adapter_loss_tape(&mut tape, &bound, s.as_ref(), t.as_ref())?.1)
}

/// One Adam step on the summed adapter losses, touching adapter parameters
/// only. Returns the losses before the step.
pub fn train_adapters_step<S: Borrow<MultiModalSample>>(
    model: &mut FasModel,
    source: &[S],
    target: &[S],
    lr: f64,
) -> Result<AdapterLosses> {
    let (s, t) = (optional_batch(model, source)?, optional_batch(model, target)?);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::Adapters);
    let (loss, report) = adapter_loss_tape(&mut tape, &bound, s.as_ref(), t.as_ref())?;
    let Some(loss) = loss else { return Ok(report) };
    let grads = tape.backward(loss)?;
    model.optim.adapters.lr = lr;
    model.step_adapters(&bound, &grads)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Linear, ModelDims};
    use crate::numerics::RngStream;
    use crate::parallel::Exec;
    use crate::synthdata::{apply_missing, generate_dataset, MissingPattern, SynthConfig};

    fn data() -> crate::synthdata::Dataset {
        let cfg = SynthConfig {
            source_domains: 1,
            source_per_class: 16,
            val_per_class: 2,
            target_per_class: 16,
            ..SynthConfig::default()
        };
        generate_dataset(&cfg, 21, Exec::Sequential).unwrap()
    }

    fn model() -> FasModel {
        FasModel::new(ModelDims::default(), &RngStream::new(5))
    }

    fn vecs(rng: &mut RngStream, n: usize) -> Vec<f64> {
        (0..n).map(|_| 2.0 * rng.uniform() - 1.0).collect()
    }

    fn random_set(rng: &mut RngStream, ir: bool, d: bool) -> FeatureSet {
        FeatureSet {
            feats: [Some(vecs(rng, 16)), ir.then(|| vecs(rng, 16)), d.then(|| vecs(rng, 16))],
        }
    }

    #[test]
    fn transform_gating() {
        let m = model();
        let mut rng = RngStream::new(1);
        let t = transform(&random_set(&mut rng, false, true), &m.adapters).unwrap();
        assert!(t.rgb.is_none() && t.di.is_none());
        let t = transform(&random_set(&mut rng, true, false), &m.adapters).unwrap();
        assert!(t.rgb.is_some() && t.di.is_some());
        let no_rgb = FeatureSet { feats: [None, None, None] };
        assert!(matches!(transform(&no_rgb, &m.adapters), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_adapters_give_zero_vectors() {
        let mut m = model();
        for a in [&mut m.adapters.rgb, &mut m.adapters.ir, &mut m.adapters.depth] {
            for l in &mut a.layers {
                *l = Linear::zeros(l.in_dim(), l.out_dim());
            }
        }
        let t = transform(&random_set(&mut RngStream::new(2), true, true), &m.adapters).unwrap();
        for v in [t.rgb.unwrap(), t.ir, t.dr, t.di.unwrap()] {
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn fuse_examples() {
        let mut f_rgb = vec![0.0; 16];
        f_rgb[0] = 1.0;
        let mut a_rgb = vec![0.0; 16];
        a_rgb[1] = 1.0;
        let mut rng = RngStream::new(3);
        let f = FeatureSet {
            feats: [Some(f_rgb.clone()), Some(vecs(&mut rng, 16)), None],
        };
        let t = Transformed {
            rgb: Some(a_rgb),
            ir: vecs(&mut rng, 16),
            dr: vecs(&mut rng, 16),
            di: Some(vecs(&mut rng, 16)),
        };
        let fused = fuse(&f, &t).unwrap();
        assert_eq!(&fused.get(Modality::Rgb)[..3], &[0.5, 0.5, 0.0]);
        for j in 0..16 {
            let want = (t.dr[j] + t.di.as_ref().unwrap()[j]) / 2.0;
            assert!((fused.get(Modality::Depth)[j] - want).abs() < 1e-15);
        }

        let f = FeatureSet {
            feats: [Some(f_rgb.clone()), None, None],
        };
        let t = Transformed {
            rgb: None,
            ir: vecs(&mut rng, 16),
            dr: vecs(&mut rng, 16),
            di: None,
        };
        let fused = fuse(&f, &t).unwrap();
        assert_eq!(fused.get(Modality::Rgb), &f_rgb[..]);
        assert_eq!(fused.get(Modality::Ir), &t.ir[..]);
        assert_eq!(fused.get(Modality::Depth), &t.dr[..]);
    }

    #[test]
    fn taped_fusion_matches_per_sample() {
        let m = model();
        let d = data();
        let mut samples = d.target[..8].to_vec();
        samples[..2].iter_mut().for_each(|s| s.ir = None);
        samples[2..5].iter_mut().for_each(|s| s.d = None);
        samples[5].ir = None;
        samples[5].d = None;
        let batch = ModalBatch::new(&m, &samples).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, Trainable::Nothing);
        let fused = fused_tape(&mut tape, &bound, &batch).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let want = fused_features(&m, s).unwrap();
            for mo in Modality::ALL {
                let got = tape.value(fused[mo.index()]).row(i);
                for (a, b) in got.iter().zip(want.get(mo)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    fn parts(m: &FasModel, samples: &[MultiModalSample]) -> Vec<(FeatureSet, Transformed)> {
        samples
            .iter()
            .map(|s| {
                let f = extract_features(m, s).unwrap();
                let t = transform(&f, &m.adapters).unwrap();
                (f, t)
            })
            .collect()
    }

    #[test]
    fn perfect_and_orthogonal_adapters() {
        let mut rng = RngStream::new(4);
        let set = random_set(&mut rng, true, true);
        let perfect = Transformed {
            rgb: set.feats[0].clone(),
            ir: set.feats[1].clone().unwrap(),
            dr: set.feats[2].clone().unwrap(),
            di: set.feats[2].clone(),
        };
        let l = regularization_from_parts(&[(set.clone(), perfect)], &[]).unwrap();
        assert!(l.values.iter().all(|v| v.abs() < 1e-12));

        let e = |k: usize| (0..16).map(|j| if j == k { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let f = FeatureSet {
            feats: [Some(e(0)), Some(e(1)), Some(e(2))],
        };
        let orth = Transformed {
            rgb: Some(e(5)),
            ir: e(6),
            dr: e(7),
            di: Some(e(8)),
        };
        let l = regularization_from_parts(&[(f.clone(), orth.clone())], &[(f, orth)]).unwrap();
        assert_eq!(l.values, [1.0, 1.0, 1.0]);
        assert_eq!(l.counts, [2, 2, 4]);
    }

    #[test]
    fn missing_di_target_contributes_no_depth_terms() {
        let m = model();
        let d = data();
        let target = apply_missing(&d.target[..6], MissingPattern::MissingDI);
        let src = &d.source_train[..4];
        let l = regularization_from_parts(&parts(&m, src), &parts(&m, &target)).unwrap();
        // Source: one term for rgb and ir, two for depth per sample.
        assert_eq!(l.counts, [4, 4, 8]);
        let only_target = regularization_from_parts(&[], &parts(&m, &target)).unwrap();
        assert_eq!(only_target.counts, [0, 0, 0]);
        assert_eq!(only_target.degenerate, [true; 3]);
        assert_eq!(only_target.values, [0.0; 3]);

        let target_d = apply_missing(&d.target[..6], MissingPattern::MissingD);
        let l = regularization_from_parts(&[], &parts(&m, &target_d)).unwrap();
        assert_eq!(l.counts, [6, 6, 0]);
        let target_i = apply_missing(&d.target[..6], MissingPattern::MissingI);
        let l = regularization_from_parts(&[], &parts(&m, &target_i)).unwrap();
        assert_eq!(l.counts, [0, 0, 6]);
    }

    #[test]
    fn taped_losses_match_parts() {
        let m = model();
        let d = data();
        let src = &d.source_train[..5];
        for p in MissingPattern::ALL {
            let mut target = apply_missing(&d.target[..7], p);
            target[0] = d.target[0].clone();
            let want = regularization_from_parts(&parts(&m, src), &parts(&m, &target)).unwrap();
            let got = adapter_regularization_loss(&m, src, &target).unwrap();
            assert_eq!(got.counts, want.counts, "{p}");
            for k in 0..3 {
                assert!((got.values[k] - want.values[k]).abs() < 1e-12, "{p} {k}");
            }
        }
    }

    #[test]
    fn losses_invariant_to_positive_rescaling() {
        let m = model();
        let d = data();
        let base = parts(&m, &d.source_train[..4]);
        let l0 = regularization_from_parts(&base, &[]).unwrap();
        let mut rng = RngStream::new(9);
        for _ in 0..20 {
            let mut p = base.clone();
            let i = rng.below(p.len() as u64) as usize;
            let c = 0.01 + 100.0 * rng.uniform();
            let v: &mut Vec<f64> = match rng.below(7) {
                0 => p[i].0.feats[0].as_mut().unwrap(),
                1 => p[i].0.feats[1].as_mut().unwrap(),
                2 => p[i].0.feats[2].as_mut().unwrap(),
                3 => p[i].1.rgb.as_mut().unwrap(),
                4 => &mut p[i].1.ir,
                5 => &mut p[i].1.dr,
                _ => p[i].1.di.as_mut().unwrap(),
            };
            v.iter_mut().for_each(|x| *x *= c);
            let l = regularization_from_parts(&p, &[]).unwrap();
            for k in 0..3 {
                assert!((l.values[k] - l0.values[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn adapter_step_touches_adapters_only() {
        let mut m = model();
        let d = data();
        let before = m.clone();
        let target = apply_missing(&d.target[..8], MissingPattern::MissingD);
        train_adapters_step(&mut m, &d.source_train[..8], &target, 1e-3).unwrap();
        assert_eq!(m.extractors, before.extractors);
        assert_eq!(m.classifiers, before.classifiers);
        assert_eq!(m.optim.main, before.optim.main);
        assert_ne!(m.adapters, before.adapters);
    }

    #[test]
    fn zero_lr_leaves_adapters() {
        let mut m = model();
        let d = data();
        let before = m.adapters.clone();
        train_adapters_step(&mut m, &d.source_train[..8], &d.target[..8], 0.0).unwrap();
        assert_eq!(m.adapters, before);
    }

    #[test]
    fn adapters_overfit_fixed_batches() {
        let mut m = model();
        let d = data();
        let (src, tgt) = (&d.source_train[..16], &d.target[..16]);
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            last = train_adapters_step(&mut m, src, tgt, 1e-2).unwrap().total();
        }
        let after = adapter_regularization_loss(&m, src, tgt).unwrap().total();
        assert!(after < 0.05, "loss after 500 steps {after} (last step {last})");
    }
}
