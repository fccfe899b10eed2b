//! The multi-modal model: one extractor and one classifier per modality, plus
//! the cross-modal adapters it carries (trained by [`crate::crossmodal`]).

mod batch;
mod io;
mod train;

use serde::{Deserialize, Serialize};

pub use batch::{extract_features, extract_tape, FeatureSet, FeatureVars, ModalBatch};
pub use io::{load_model, save_model, MODEL_SCHEMA_VERSION};
pub use train::{source_loss, source_loss_value, train_source, SourceTrainConfig};

use crate::error::{Error, Result};
use crate::numerics::{ops, AdamState, Gradients, ParamUpdate, RngStream, Tape, Tensor, Var};
use crate::synthdata::Modality;

/// Dense layer computing `x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform init with bound `sqrt(gain / fan_in)`; zero bias.
    pub fn init(fan_in: usize, fan_out: usize, gain: f64, rng: &mut RngStream) -> Linear {
        let bound = (gain / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| bound * (2.0 * rng.uniform() - 1.0)).collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        let (i, o) = (self.in_dim(), self.out_dim());
        debug_assert_eq!(x.len(), i);
        let mut out = vec![0.0; o];
        ops::affine_kernel(x, self.weight.data(), self.bias.data(), &mut out, 1, i, o);
        out
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> (Var, Var) {
        (
            tape.leaf(self.weight.clone(), trainable),
            tape.leaf(self.bias.clone(), trainable),
        )
    }
}

/// Multilayer perceptron with ReLU between layers and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn init(dims: &[usize], rng: &mut RngStream) -> Mlp {
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::init(w[0], w[1], if k + 1 < n { 6.0 } else { 3.0 }, rng))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").out_dim()
    }

    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward_row(&h);
            if k + 1 < self.layers.len() {
                h.iter_mut().for_each(|v| *v = ops::relu(*v));
            }
        }
        h
    }

    /// Binds every layer; layer `k` is trainable iff `trainable(k)`.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(usize) -> bool) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .enumerate()
            .map(|(k, l)| l.bind(tape, trainable(k)))
            .collect()
    }

    pub fn forward_tape(tape: &mut Tape, bound: &[(Var, Var)], x: Var) -> Result<Var> {
        let mut h = x;
        for (k, &(w, b)) in bound.iter().enumerate() {
            h = tape.affine(h, w, b)?;
            if k + 1 < bound.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Cross-modal feature adapters, indexed by the modality they produce:
/// `rgb` maps IR features to RGB, `ir` maps RGB features to IR, and `depth`
/// maps either RGB or IR features to depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapters {
    pub rgb: Mlp,
    pub ir: Mlp,
    pub depth: Mlp,
}

impl Adapters {
    pub fn get(&self, m: Modality) -> &Mlp {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Ir => &self.ir,
            Modality::Depth => &self.depth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// Raw input width per modality.
    pub raw: [usize; 3],
    /// Extractor hidden widths.
    pub hidden: Vec<usize>,
    pub feat: usize,
    pub adapter_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            raw: [32; 3],
            hidden: vec![64, 64, 32],
            feat: 16,
            adapter_hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    /// Extractors and classifiers.
    pub main: AdamState,
    pub adapters: AdamState,
}

/// Which parameters a tape binding marks as trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    /// Inference only.
    Nothing,
    /// All extractor and classifier parameters (source training).
    Main,
    /// Extractor layers past the frozen prefix, plus classifiers.
    Adaptation,
    /// Adapter parameters only.
    Adapters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FasModel {
    pub dims: ModelDims,
    pub extractors: [Mlp; 3],
    pub classifiers: [Linear; 3],
    pub adapters: Adapters,
    /// Number of leading extractor layers kept fixed during adaptation.
    pub frozen_prefix: usize,
    pub optim: Optimizers,
}

/// Tape handles for one binding of a [`FasModel`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub extractors: [Vec<(Var, Var)>; 3],
    pub classifiers: [(Var, Var); 3],
    pub adapters: [Vec<(Var, Var)>; 3],
    scope: Trainable,
}

impl FasModel {
    pub fn new(dims: ModelDims, rng: &RngStream) -> FasModel {
        let mut rng = rng.derive_tag("model-init");
        let extractors = std::array::from_fn(|m| {
            let mut widths = vec![dims.raw[m]];
            widths.extend(&dims.hidden);
            widths.push(dims.feat);
            Mlp::init(&widths, &mut rng)
        });
        let classifiers = std::array::from_fn(|_| Linear::init(dims.feat, 1, 3.0, &mut rng));
        let adapter_dims = [dims.feat, dims.adapter_hidden, dims.feat];
        let adapters = Adapters {
            rgb: Mlp::init(&adapter_dims, &mut rng),
            ir: Mlp::init(&adapter_dims, &mut rng),
            depth: Mlp::init(&adapter_dims, &mut rng),
        };
        FasModel {
            frozen_prefix: 2.min(dims.hidden.len()),
            dims,
            extractors,
            classifiers,
            adapters,
            optim: Optimizers {
                main: AdamState::new(1e-4),
                adapters: AdamState::new(1e-3),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for m in Modality::ALL {
            let e = &self.extractors[m.index()];
            if e.in_dim() != self.dims.raw[m.index()] || e.out_dim() != self.dims.feat {
                return Err(Error::Dimension(format!("{m} extractor does not match model dims")));
            }
            if self.classifiers[m.index()].in_dim() != self.dims.feat || self.classifiers[m.index()].out_dim() != 1 {
                return Err(Error::Dimension(format!("{m} classifier does not match model dims")));
            }
            let a = self.adapters.get(m);
            if a.in_dim() != self.dims.feat || a.out_dim() != self.dims.feat {
                return Err(Error::Dimension(format!("{m} adapter does not map feat_dim to feat_dim")));
            }
        }
        if self.frozen_prefix > self.extractors[0].layers.len() {
            return Err(Error::Contract(format!(
                "frozen prefix {} exceeds extractor depth {}",
                self.frozen_prefix,
                self.extractors[0].layers.len()
            )));
        }
        Ok(())
    }

    pub fn extractor(&self, m: Modality) -> &Mlp {
        &self.extractors[m.index()]
    }

    pub fn classifier(&self, m: Modality) -> &Linear {
        &self.classifiers[m.index()]
    }

    /// `C_m(f) = sigmoid(f w + b)`.
    pub fn classify(&self, m: Modality, feature: &[f64]) -> f64 {
        ops::sigmoid(self.classifier(m).forward_row(feature)[0])
    }

    pub fn bind(&self, tape: &mut Tape, scope: Trainable) -> Bound {
        let frozen = self.frozen_prefix;
        let extractors = std::array::from_fn(|m| {
            self.extractors[m].bind(tape, |k| match scope {
                Trainable::Main => true,
                Trainable::Adaptation => k >= frozen,
                _ => false,
            })
        });
        let train_cls = matches!(scope, Trainable::Main | Trainable::Adaptation);
        let classifiers = std::array::from_fn(|m| self.classifiers[m].bind(tape, train_cls));
        let train_adapters = scope == Trainable::Adapters;
        let adapters = Modality::ALL.map(|m| self.adapters.get(m).bind(tape, |_| train_adapters));
        Bound {
            extractors,
            classifiers,
            adapters,
            scope,
        }
    }

    /// Stable parameter names, in optimizer order, for the main group.
    pub fn main_param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for m in Modality::ALL {
            for k in 0..self.extractors[m.index()].layers.len() {
                names.push(format!("extractor.{m}.{k}.weight"));
                names.push(format!("extractor.{m}.{k}.bias"));
            }
        }
        for m in Modality::ALL {
            names.push(format!("classifier.{m}.weight"));
            names.push(format!("classifier.{m}.bias"));
        }
        names
    }

    pub fn adapter_param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for m in Modality::ALL {
            for k in 0..self.adapters.get(m).layers.len() {
                names.push(format!("adapter.{m}.{k}.weight"));
                names.push(format!("adapter.{m}.{k}.bias"));
            }
        }
        names
    }

    /// All parameters in name order, main group first.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        let layers = self.extractors.iter().flat_map(|e| &e.layers).chain(&self.classifiers);
        let adapters = Modality::ALL.into_iter().flat_map(|m| &self.adapters.get(m).layers);
        for l in layers.chain(adapters) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        let Adapters { rgb, ir, depth } = &mut self.adapters;
        let layers = self.extractors.iter_mut().flat_map(|e| &mut e.layers).chain(&mut self.classifiers);
        let adapters = [rgb, ir, depth].into_iter().flat_map(|a| &mut a.layers);
        for l in layers.chain(adapters) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.main_param_names();
        names.extend(self.adapter_param_names());
        names
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.param_names().into_iter().zip(self.params()).collect()
    }

    /// `C_m` on the tape: sigmoid of the affine score, shape `[B, 1]`.
    pub fn classify_tape(tape: &mut Tape, classifier: (Var, Var), feature: Var) -> Result<Var> {
        let logit = tape.affine(feature, classifier.0, classifier.1)?;
        Ok(tape.sigmoid(logit))
    }

    /// Applies one Adam step of the main group using the gradients of a
    /// binding made with `Trainable::Main` or `Trainable::Adaptation`.
    pub fn step_main(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        if !matches!(bound.scope, Trainable::Main | Trainable::Adaptation) {
            return Err(Error::Contract("step_main needs a Main or Adaptation binding".into()));
        }
        let names = self.main_param_names();
        let frozen = if bound.scope == Trainable::Adaptation { self.frozen_prefix } else { 0 };
        let mut entries: Vec<(Option<Var>, &mut Tensor)> = Vec::new();
        for (m, e) in self.extractors.iter_mut().enumerate() {
            for (k, l) in e.layers.iter_mut().enumerate() {
                let (w, b) = bound.extractors[m][k];
                let live = k >= frozen;
                entries.push((live.then_some(w), &mut l.weight));
                entries.push((live.then_some(b), &mut l.bias));
            }
        }
        for (m, c) in self.classifiers.iter_mut().enumerate() {
            let (w, b) = bound.classifiers[m];
            entries.push((Some(w), &mut c.weight));
            entries.push((Some(b), &mut c.bias));
        }
        apply_adam(&mut self.optim.main, &names, entries, grads)
    }

    /// Applies one Adam step of the adapter group.
    pub fn step_adapters(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        if bound.scope != Trainable::Adapters {
            return Err(Error::Contract("step_adapters needs an Adapters binding".into()));
        }
        let names = self.adapter_param_names();
        let mut entries: Vec<(Option<Var>, &mut Tensor)> = Vec::new();
        let Adapters { rgb, ir, depth } = &mut self.adapters;
        for (m, mlp) in [rgb, ir, depth].into_iter().enumerate() {
            for (k, l) in mlp.layers.iter_mut().enumerate() {
                let (w, b) = bound.adapters[m][k];
                entries.push((Some(w), &mut l.weight));
                entries.push((Some(b), &mut l.bias));
            }
        }
        apply_adam(&mut self.optim.adapters, &names, entries, grads)
    }
}

fn apply_adam(state: &mut AdamState, names: &[String], entries: Vec<(Option<Var>, &mut Tensor)>, grads: &Gradients) -> Result<()> {
    // A trainable parameter that received no gradient gets an explicit zero,
    // so its moments decay like any other trainable parameter's.
    let zeros: Vec<Option<Tensor>> = entries
        .iter()
        .map(|(v, t)| match v {
            Some(v) if grads.get(*v).is_none() => Some(Tensor::zeros(t.shape())),
            _ => None,
        })
        .collect();
    let mut updates: Vec<ParamUpdate<'_>> = entries
        .into_iter()
        .zip(names)
        .zip(&zeros)
        .map(|(((var, value), name), zero)| ParamUpdate {
            name,
            grad: var.and_then(|v| grads.get(v).or(zero.as_ref())),
            value,
        })
        .collect();
    state.step(&mut updates)
}
