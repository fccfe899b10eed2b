//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. Leaves are
//! either trainable (`requires_grad`) or constants; a node requires a gradient
//! when any of its inputs does. [`Tape::backward`] consumes the tape, walks the
//! nodes in reverse and returns the accumulated [`Gradients`].

use super::ops::{self, matrix_dims, NORM_EPS, PROB_CLIP};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    RowScale(Var, Vec<f64>),
    Sum(Var),
    BceMean { p: Var, targets: Vec<f64> },
    CosineDistanceSum { a: Var, b: Var, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = ops::affine_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.grad_flag(&[x, w, b]);
        Ok(self.push(value, Op::Affine { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(ops::relu);
        let rg = self.grad_flag(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(ops::sigmoid);
        let rg = self.grad_flag(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let rg = self.grad_flag(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let va = self.value(a);
        if !va.same_shape(&mask) {
            return Err(Error::Dimension(format!(
                "mul_const: {:?} vs {:?}",
                va.shape(),
                mask.shape()
            )));
        }
        let data = va.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.grad_flag(&[a]);
        Ok(self.push(value, Op::MulConst(a, mask), rg))
    }

    /// Multiplies row `r` of a matrix by the constant `factors[r]`.
    pub fn row_scale(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = matrix_dims(va, "row_scale operand")?;
        if factors.len() != rows {
            return Err(Error::Dimension(format!(
                "row_scale: {rows} rows, {} factors",
                factors.len()
            )));
        }
        let mut data = va.data().to_vec();
        for (r, f) in factors.iter().enumerate() {
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v *= f;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.grad_flag(&[a]);
        Ok(self.push(value, Op::RowScale(a, factors), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.grad_flag(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean over rows of the clamped two-term cross-entropy of `p` (`[B, 1]`)
    /// against `targets` (length `B`).
    pub fn bce_mean(&mut self, p: Var, targets: Vec<f64>) -> Result<Var> {
        let vp = self.value(p);
        if vp.len() != targets.len() || targets.is_empty() {
            return Err(Error::Dimension(format!(
                "bce_mean: {} probabilities, {} targets",
                vp.len(),
                targets.len()
            )));
        }
        let n = targets.len() as f64;
        let loss = vp
            .data()
            .iter()
            .zip(&targets)
            .map(|(&p, &y)| ops::binary_cross_entropy(p, y))
            .sum::<f64>()
            / n;
        let rg = self.grad_flag(&[p]);
        Ok(self.push(Tensor::scalar(loss), Op::BceMean { p, targets }, rg))
    }

    /// `sum_r weights[r] * (1 - cos(a_r, b_r))` over matrix rows. Rows where
    /// either operand has zero norm count as similarity 0 and pass no gradient.
    pub fn cosine_distance_sum(&mut self, a: Var, b: Var, weights: Vec<f64>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (rows, cols) = matrix_dims(va, "cosine operand")?;
        if !va.same_shape(vb) || weights.len() != rows {
            return Err(Error::Dimension(format!(
                "cosine_distance_sum: {:?} vs {:?} with {} weights",
                va.shape(),
                vb.shape(),
                weights.len()
            )));
        }
        let mut total = 0.0;
        for (r, &w) in weights.iter().enumerate().take(rows) {
            if w == 0.0 {
                continue;
            }
            let c = ops::cosine_similarity(&va.data()[r * cols..(r + 1) * cols], &vb.data()[r * cols..(r + 1) * cols]);
            total += w * (1.0 - c);
        }
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(Tensor::scalar(total), Op::CosineDistanceSum { a, b, weights }, rg))
    }

    /// Reverse pass from a scalar root. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        if root.0 >= n {
            return Err(Error::Contract("backward root is not on this tape".into()));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let (rows, inner) = (xv.rows(), xv.cols());
                    let outer = wv.cols();
                    if self.nodes[x.0].requires_grad {
                        let mut dx = vec![0.0; rows * inner];
                        for r in 0..rows {
                            let grow = &g[r * outer..(r + 1) * outer];
                            for k in 0..inner {
                                let wrow = &wv.data()[k * outer..(k + 1) * outer];
                                dx[r * inner + k] = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[w.0].requires_grad {
                        let mut dw = vec![0.0; inner * outer];
                        for r in 0..rows {
                            let grow = &g[r * outer..(r + 1) * outer];
                            for k in 0..inner {
                                let xv = xv.data()[r * inner + k];
                                if xv == 0.0 {
                                    continue;
                                }
                                for (d, gv) in dw[k * outer..(k + 1) * outer].iter_mut().zip(grow) {
                                    *d += xv * gv;
                                }
                            }
                        }
                        accumulate(&mut grads, *w, dw);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut db = vec![0.0; outer];
                        for r in 0..rows {
                            for (d, gv) in db.iter_mut().zip(&g[r * outer..(r + 1) * outer]) {
                                *d += gv;
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Relu(x) => {
                    let dx = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, y)| if *y > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.nodes[b.0].requires_grad {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| v * c).collect());
                }
                Op::MulConst(a, mask) => {
                    accumulate(&mut grads, *a, g.iter().zip(mask.data()).map(|(v, m)| v * m).collect());
                }
                Op::RowScale(a, factors) => {
                    let cols = node.value.cols();
                    let dx = g
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * factors[i / cols])
                        .collect();
                    accumulate(&mut grads, *a, dx);
                }
                Op::Sum(a) => {
                    let len = self.nodes[a.0].value.len();
                    accumulate(&mut grads, *a, vec![g[0]; len]);
                }
                Op::BceMean { p, targets } => {
                    let n = targets.len() as f64;
                    let dp = self.nodes[p.0]
                        .value
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&p, &y)| {
                            if !(PROB_CLIP..=1.0 - PROB_CLIP).contains(&p) {
                                0.0
                            } else {
                                g[0] * (-y / p + (1.0 - y) / (1.0 - p)) / n
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *p, dp);
                }
                Op::CosineDistanceSum { a, b, weights } => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let cols = av.cols();
                    let mut da = vec![0.0; av.len()];
                    let mut db = vec![0.0; bv.len()];
                    for (r, &wt) in weights.iter().enumerate() {
                        if wt == 0.0 {
                            continue;
                        }
                        let ar = &av.data()[r * cols..(r + 1) * cols];
                        let br = &bv.data()[r * cols..(r + 1) * cols];
                        let na = ar.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let nb = br.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if na <= NORM_EPS || nb <= NORM_EPS {
                            continue;
                        }
                        let c = ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
                        let scale = -g[0] * wt;
                        for k in 0..cols {
                            da[r * cols + k] = scale * (br[k] / (na * nb) - c * ar[k] / (na * na));
                            db[r * cols + k] = scale * (ar[k] / (na * nb) - c * br[k] / (nb * nb));
                        }
                    }
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        accumulate(&mut grads, *b, db);
                    }
                }
            }
        }

        Ok(Gradients {
            grads: self
                .nodes
                .into_iter()
                .zip(grads)
                .map(|(node, g)| g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape")))
                .collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Leaf gradients produced by [`Tape::backward`], indexed by the [`Var`]s of
/// the consumed tape. Leaves that received no gradient report `None`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
