use serde::{Deserialize, Serialize};

use super::io::{Manifest, SplitInfo, SCHEMA_VERSION};
use super::{apply_missing, Dataset, MissingPattern, Modality, MultiModalSample, LIVE, SPOOF};
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::parallel::Exec;

/// How one modality observes the shared latent: `x = M e + b + noise * eta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub raw_dim: usize,
    /// Row-major `raw_dim x latent_dim` mixing matrix.
    pub mixing: Vec<f64>,
    pub offset: Vec<f64>,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: String,
    pub latent_dim: usize,
    /// Indexed by [`Modality::index`].
    pub modalities: [ModalitySpec; 3],
    /// Unit attack direction in latent space.
    pub spoof_direction: Vec<f64>,
    pub spoof_magnitude: f64,
    /// In `[0, 1]`: each spoof is shifted by `magnitude * (1 - skew * u)`,
    /// `u ~ U(0, 1)`, so larger skew pulls some spoofs back towards the live class.
    pub skew: f64,
}

impl DomainSpec {
    fn validate(&self) -> Result<()> {
        let gen = |m: String| Err(Error::Generation(format!("domain {}: {m}", self.id)));
        if self.spoof_direction.len() != self.latent_dim {
            return gen(format!(
                "spoof direction has {} entries, latent dim is {}",
                self.spoof_direction.len(),
                self.latent_dim
            ));
        }
        if !(0.0..=1.0).contains(&self.skew) {
            return gen(format!("skew {} outside [0, 1]", self.skew));
        }
        if !self.spoof_magnitude.is_finite() || self.spoof_magnitude < 0.0 {
            return gen(format!("spoof magnitude {} must be finite and >= 0", self.spoof_magnitude));
        }
        for (m, spec) in Modality::ALL.iter().zip(&self.modalities) {
            if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
                return gen(format!("{m} noise scale {} must be finite and >= 0", spec.noise));
            }
            if spec.mixing.len() != spec.raw_dim * self.latent_dim || spec.offset.len() != spec.raw_dim {
                return gen(format!("{m} mixing/offset sizes do not match raw_dim {}", spec.raw_dim));
            }
            let rank = column_rank(&spec.mixing, spec.raw_dim, self.latent_dim);
            if rank < self.latent_dim {
                return gen(format!(
                    "{m} mixing matrix has column rank {rank} < latent dim {}",
                    self.latent_dim
                ));
            }
        }
        Ok(())
    }
}

/// Column rank by modified Gram-Schmidt with a relative tolerance.
fn column_rank(m: &[f64], rows: usize, cols: usize) -> usize {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in 0..cols {
        let mut v: Vec<f64> = (0..rows).map(|r| m[r * cols + c]).collect();
        let orig = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if orig > 0.0 && n > 1e-9 * orig.max(1.0) {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis.len()
}

/// Nonlinear latent embedding shared by all modalities.
fn embed(z: f64) -> f64 {
    z.tanh()
}

fn draw_sample(spec: &DomainSpec, subject: &[f64], spoof: bool, rng: &mut RngStream) -> [Vec<f64>; 3] {
    let mut e: Vec<f64> = subject.iter().map(|&z| embed(z)).collect();
    if spoof {
        let shift = spec.spoof_magnitude * (1.0 - spec.skew * rng.uniform());
        for (x, u) in e.iter_mut().zip(&spec.spoof_direction) {
            *x += shift * u;
        }
    }
    let observe = |m: &ModalitySpec, rng: &mut RngStream| -> Vec<f64> {
        (0..m.raw_dim)
            .map(|r| {
                let row = &m.mixing[r * spec.latent_dim..(r + 1) * spec.latent_dim];
                let clean: f64 = row.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() + m.offset[r];
                // Draw noise even at scale 0 so the stream layout does not depend on it.
                clean + m.noise * rng.normal()
            })
            .collect()
    };
    [
        observe(&spec.modalities[0], rng),
        observe(&spec.modalities[1], rng),
        observe(&spec.modalities[2], rng),
    ]
}

/// Draws `n_live` live and `n_spoof` spoof samples. Live sample `j` and spoof
/// sample `j` are captures of the same subject. Ids start at `first_id`, live
/// samples first.
pub fn generate_domain(
    spec: &DomainSpec,
    n_live: usize,
    n_spoof: usize,
    first_id: u64,
    rng: &RngStream,
    exec: Exec,
) -> Result<Vec<MultiModalSample>> {
    if n_live == 0 || n_spoof == 0 {
        return Err(Error::Contract(format!(
            "domain {} needs at least one sample per class, got {n_live} live / {n_spoof} spoof",
            spec.id
        )));
    }
    spec.validate()?;
    let subjects = rng.derive_tag("subjects");
    let captures = rng.derive_tag("captures");
    let total = n_live + n_spoof;
    Ok(exec.map_range(total, |i| {
        let spoof = i >= n_live;
        let j = if spoof { i - n_live } else { i };
        let mut srng = subjects.derive(j as u64);
        let subject: Vec<f64> = (0..spec.latent_dim).map(|_| srng.normal()).collect();
        let mut crng = captures.derive(i as u64);
        let [rgb, ir, d] = draw_sample(spec, &subject, spoof, &mut crng);
        MultiModalSample {
            id: first_id + i as u64,
            domain: spec.id.clone(),
            label: Some(if spoof { SPOOF } else { LIVE }),
            rgb,
            ir: Some(ir),
            d: Some(d),
        }
    }))
}

/// Knobs of the synthetic protocol: several labeled source domains and one
/// shifted target domain with a partly novel attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub latent_dim: usize,
    pub raw_dim: usize,
    pub source_domains: usize,
    /// Live and spoof counts per source domain in the training split.
    pub source_per_class: usize,
    /// Live and spoof counts per source domain in the validation split.
    pub val_per_class: usize,
    pub target_per_class: usize,
    /// Observation noise per modality (rgb, ir, depth) in source domains.
    pub noise: [f64; 3],
    /// Observation noise per modality in the target domain.
    pub target_noise: [f64; 3],
    pub spoof_magnitude: f64,
    pub skew: f64,
    /// Relative perturbation of each domain's mixing matrices.
    pub mixing_jitter: f64,
    /// Offset distance of each source domain from the shared base.
    pub source_shift: f64,
    /// Offset distance of the target domain from the shared base.
    pub target_shift: f64,
    /// Spread of per-domain source attack directions around the base attack.
    pub attack_variation: f64,
    /// Angle (degrees) between the target attack and the base source attack.
    pub attack_novelty_deg: f64,
    pub missing: MissingPattern,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            latent_dim: 8,
            raw_dim: 32,
            source_domains: 3,
            source_per_class: 320,
            val_per_class: 40,
            target_per_class: 768,
            noise: [0.1, 0.1, 0.1],
            // The target IR sensor is much noisier than any source one.
            target_noise: [0.1, 1.0, 0.1],
            spoof_magnitude: 3.0,
            skew: 0.3,
            mixing_jitter: 0.2,
            source_shift: 0.3,
            target_shift: 0.8,
            attack_variation: 0.2,
            attack_novelty_deg: 30.0,
            missing: MissingPattern::None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| {
            Err(Error::Config {
                field: format!("data.{field}"),
                msg: msg.into(),
            })
        };
        if self.latent_dim == 0 {
            return bad("latent_dim", "must be positive");
        }
        if self.raw_dim < self.latent_dim {
            return bad("raw_dim", "must be at least latent_dim so mixing can have full column rank");
        }
        if self.source_domains == 0 {
            return bad("source_domains", "need at least one source domain");
        }
        for (name, v) in [
            ("source_per_class", self.source_per_class),
            ("val_per_class", self.val_per_class),
            ("target_per_class", self.target_per_class),
        ] {
            if v == 0 {
                return bad(name, "must be positive");
            }
        }
        if self.noise.iter().chain(&self.target_noise).any(|&s| !(s >= 0.0 && s.is_finite())) {
            return bad("noise", "noise scales must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.skew) {
            return bad("skew", "must lie in [0, 1]");
        }
        if !(self.spoof_magnitude >= 0.0 && self.spoof_magnitude.is_finite()) {
            return bad("spoof_magnitude", "must be finite and >= 0");
        }
        Ok(())
    }
}

/// Concrete domain specs drawn from a [`SynthConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub sources: Vec<DomainSpec>,
    pub target: DomainSpec,
}

fn gaussian(rng: &mut RngStream, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

fn unit(rng: &mut RngStream, n: usize) -> Vec<f64> {
    let v = gaussian(rng, n, 1.0);
    normalize(v)
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn build_protocol(cfg: &SynthConfig, rng: &RngStream) -> Result<Protocol> {
    cfg.validate()?;
    let (l, r) = (cfg.latent_dim, cfg.raw_dim);
    let mut base_rng = rng.derive_tag("base");
    let mix_scale = 1.0 / (l as f64).sqrt();
    let base_mixing: Vec<Vec<f64>> = (0..3).map(|_| gaussian(&mut base_rng, r * l, mix_scale)).collect();
    let base_offset: Vec<Vec<f64>> = (0..3).map(|_| gaussian(&mut base_rng, r, 0.5)).collect();
    let base_attack = unit(&mut base_rng, l);
    let novel = {
        let v = gaussian(&mut base_rng, l, 1.0);
        let dot: f64 = v.iter().zip(&base_attack).map(|(a, b)| a * b).sum();
        normalize(v.iter().zip(&base_attack).map(|(a, b)| a - dot * b).collect())
    };

    let domain = |id: String, drng: &mut RngStream, shift: f64, noise: [f64; 3], attack: Vec<f64>| -> DomainSpec {
        let modalities = std::array::from_fn(|m| {
            let jitter = gaussian(drng, r * l, cfg.mixing_jitter * mix_scale);
            let dir = unit(drng, r);
            ModalitySpec {
                raw_dim: r,
                mixing: base_mixing[m].iter().zip(&jitter).map(|(a, b)| a + b).collect(),
                offset: base_offset[m].iter().zip(&dir).map(|(a, d)| a + shift * d).collect(),
                noise: noise[m],
            }
        });
        DomainSpec {
            id,
            latent_dim: l,
            modalities,
            spoof_direction: attack,
            spoof_magnitude: cfg.spoof_magnitude,
            skew: cfg.skew,
        }
    };

    let sources = (0..cfg.source_domains)
        .map(|k| {
            let mut drng = rng.derive_tag("source").derive(k as u64);
            let wobble = gaussian(&mut drng, l, cfg.attack_variation / (l as f64).sqrt());
            let attack = normalize(base_attack.iter().zip(&wobble).map(|(a, w)| a + w).collect());
            domain(format!("S{k}"), &mut drng, cfg.source_shift, cfg.noise, attack)
        })
        .collect();
    let theta = cfg.attack_novelty_deg.to_radians();
    let target_attack = normalize(
        base_attack
            .iter()
            .zip(&novel)
            .map(|(a, n)| theta.cos() * a + theta.sin() * n)
            .collect(),
    );
    let mut trng = rng.derive_tag("target");
    let target = domain("T".into(), &mut trng, cfg.target_shift, cfg.target_noise, target_attack);
    Ok(Protocol { sources, target })
}

/// Generates every split of the synthetic protocol. A pure function of
/// `(cfg, seed)`; `exec` only changes how the work is scheduled.
pub fn generate_dataset(cfg: &SynthConfig, seed: u64, exec: Exec) -> Result<Dataset> {
    let root = RngStream::new(seed);
    let protocol = build_protocol(cfg, &root.derive_tag("protocol"))?;
    let mut next_id = 0u64;
    let mut source_train = Vec::new();
    let mut source_val = Vec::new();
    for (k, spec) in protocol.sources.iter().enumerate() {
        let n = cfg.source_per_class;
        source_train.extend(generate_domain(
            spec,
            n,
            n,
            next_id,
            &root.derive_tag("train").derive(k as u64),
            exec,
        )?);
        next_id += 2 * n as u64;
    }
    for (k, spec) in protocol.sources.iter().enumerate() {
        let n = cfg.val_per_class;
        source_val.extend(generate_domain(spec, n, n, next_id, &root.derive_tag("val").derive(k as u64), exec)?);
        next_id += 2 * n as u64;
    }
    let n = cfg.target_per_class;
    let target = generate_domain(&protocol.target, n, n, next_id, &root.derive_tag("target"), exec)?;
    let target = apply_missing(&target, cfg.missing);

    let count = |s: &[MultiModalSample]| SplitInfo::count(s);
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        seed,
        raw_dim: [cfg.raw_dim; 3],
        domains: protocol
            .sources
            .iter()
            .map(|d| (d.id.clone(), "source".to_string()))
            .chain(std::iter::once((protocol.target.id.clone(), "target".to_string())))
            .collect(),
        missing: cfg.missing,
        splits: [
            ("source_train".to_string(), count(&source_train)),
            ("source_val".to_string(), count(&source_val)),
            ("target".to_string(), count(&target)),
        ]
        .into_iter()
        .collect(),
        config: cfg.clone(),
    };
    Ok(Dataset {
        manifest,
        source_train,
        source_val,
        target,
    })
}
