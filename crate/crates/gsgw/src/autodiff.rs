//! Minimal reverse-mode automatic differentiation.
//!
//! A `Tape` records an append-only sequence of dense tensor operations; each
//! operation stores its operand ids and its forward value. `backward` walks
//! the record once in reverse, accumulating adjoints, so memory and time are
//! both linear in the number of recorded operations. The op set is small on
//! purpose: matrix products, elementwise arithmetic and activations, row
//! softmax, reductions, transpose, concatenation and slicing cover every
//! model in this crate. There is no broadcasting beyond scalar-times-tensor;
//! outer products with constant one-vectors express the rest explicitly.
//!
//! All values are f64. Any operation whose forward result contains NaN or an
//! infinity fails immediately with a numeric error rather than letting the
//! poison propagate.

use crate::error::{GsgwError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    ScalarMul(usize, f64),
    RowSoftmax(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Gelu(usize),
    Sin(usize),
    Cos(usize),
    Sum(usize),
    Mean(usize),
    Square(usize),
    Sqrt(usize),
    Recip(usize),
    Transpose(usize),
    ConcatCols(usize, usize),
    SliceRows { input: usize, start: usize },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only operation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by `Var`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the given node, if it was
    /// reachable and marked as requiring gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_softmax(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), t.cols());
    for i in 0..t.rows() {
        let row = t.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut sum = 0.0;
        let mut exps = vec![0.0; row.len()];
        for (j, &x) in row.iter().enumerate() {
            let e = (x - max).exp();
            exps[j] = e;
            sum += e;
        }
        for (j, e) in exps.into_iter().enumerate() {
            out.set(i, j, e / sum);
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Record an input tensor. Gradients flow into it only when
    /// `needs_grad` is set.
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push_unchecked(Op::Leaf, value, needs_grad)
    }

    /// Record a constant (a leaf that never receives gradients).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(GsgwError::numeric(
                "operation produced a non-finite value",
            ));
        }
        Ok(self.push_unchecked(op, value, needs_grad))
    }

    fn needs(&self, a: Var) -> bool {
        self.nodes[a.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a.0, b.0), value, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a.0, b.0), value, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a.0, b.0), value, needs)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Hadamard(a.0, b.0), value, needs)
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).scale(c);
        let needs = self.needs(a);
        self.push(Op::ScalarMul(a.0, c), value, needs)
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let value = row_softmax(self.value(a));
        let needs = self.needs(a);
        self.push(Op::RowSoftmax(a.0), value, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a.0), value, needs)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        let needs = self.needs(a);
        self.push(Op::Tanh(a.0), value, needs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        let needs = self.needs(a);
        self.push(Op::Relu(a.0), value, needs)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu);
        let needs = self.needs(a);
        self.push(Op::Gelu(a.0), value, needs)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::sin);
        let needs = self.needs(a);
        self.push(Op::Sin(a.0), value, needs)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::cos);
        let needs = self.needs(a);
        self.push(Op::Cos(a.0), value, needs)
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(a);
        self.push(Op::Sum(a.0), value, needs)
    }

    /// Mean of all entries, as a 1x1 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / v.len() as f64);
        let needs = self.needs(a);
        self.push(Op::Mean(a.0), value, needs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        let needs = self.needs(a);
        self.push(Op::Square(a.0), value, needs)
    }

    /// Elementwise square root; entries must be nonnegative.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(GsgwError::numeric("sqrt of a negative entry"));
        }
        let value = self.value(a).map(f64::sqrt);
        let needs = self.needs(a);
        self.push(Op::Sqrt(a.0), value, needs)
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| 1.0 / x);
        let needs = self.needs(a);
        self.push(Op::Recip(a.0), value, needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        let needs = self.needs(a);
        self.push(Op::Transpose(a.0), value, needs)
    }

    /// Concatenate two tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(GsgwError::shape(format!(
                "concat_cols rows {} vs {}",
                va.rows(),
                vb.rows()
            )));
        }
        let rows = va.rows();
        let cols = va.cols() + vb.cols();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let value = Tensor::from_vec(rows, cols, data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::ConcatCols(a.0, b.0), value, needs)
    }

    /// Contiguous row range [start, start+len).
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if start + len > v.rows() {
            return Err(GsgwError::shape(format!(
                "slice_rows [{start}, {}) out of {} rows",
                start + len,
                v.rows()
            )));
        }
        let cols = v.cols();
        let data = v.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::from_vec(len, cols, data)?;
        let needs = self.needs(a);
        self.push(Op::SliceRows { input: a.0, start }, value, needs)
    }

    /// Same buffer, new shape. Row-major order is preserved.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).reshaped(rows, cols)?;
        let needs = self.needs(a);
        self.push(Op::Reshape(a.0), value, needs)
    }

    /// Reverse pass from a scalar loss node. Returns one adjoint per node
    /// that required gradients and was reachable from the loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.shape() != (1, 1) {
            return Err(GsgwError::invalid(format!(
                "backward needs a 1x1 loss node, got {}x{}",
                loss_value.rows(),
                loss_value.cols()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        // Non-finite adjoints indicate an unstable graph; fail loudly.
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(GsgwError::numeric("backward produced non-finite gradient"));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let add_into = |slot: &mut Option<Tensor>, delta: Tensor| -> Result<()> {
            match slot {
                Some(acc) => {
                    *acc = acc.add(&delta)?;
                }
                None => *slot = Some(delta),
            }
            Ok(())
        };
        // Skips operands that do not require gradients.
        macro_rules! feed {
            ($target:expr, $delta:expr) => {
                if self.nodes[$target].needs_grad {
                    add_into(&mut grads[$target], $delta)?;
                }
            };
        }

        let value = &self.nodes[idx].value;
        match self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.nodes[a].needs_grad {
                    let delta = g.matmul(&self.nodes[b].value.transpose())?;
                    add_into(&mut grads[a], delta)?;
                }
                if self.nodes[b].needs_grad {
                    let delta = self.nodes[a].value.transpose().matmul(g)?;
                    add_into(&mut grads[b], delta)?;
                }
            }
            Op::Add(a, b) => {
                feed!(a, g.clone());
                feed!(b, g.clone());
            }
            Op::Sub(a, b) => {
                feed!(a, g.clone());
                feed!(b, g.scale(-1.0));
            }
            Op::Hadamard(a, b) => {
                if self.nodes[a].needs_grad {
                    add_into(&mut grads[a], g.hadamard(&self.nodes[b].value)?)?;
                }
                if self.nodes[b].needs_grad {
                    add_into(&mut grads[b], g.hadamard(&self.nodes[a].value)?)?;
                }
            }
            Op::ScalarMul(a, c) => {
                feed!(a, g.scale(c));
            }
            Op::RowSoftmax(a) => {
                // dz = p .* (g - rowdot(g, p)), classic softmax Jacobian.
                let p = value;
                let mut delta = Tensor::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    let dot: f64 = p
                        .row(i)
                        .iter()
                        .zip(g.row(i))
                        .map(|(&pj, &gj)| pj * gj)
                        .sum();
                    for j in 0..p.cols() {
                        delta.set(i, j, p.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                feed!(a, delta);
            }
            Op::Sigmoid(a) => {
                let delta = value.zip_map(g, |s, gj| gj * s * (1.0 - s))?;
                feed!(a, delta);
            }
            Op::Tanh(a) => {
                let delta = value.zip_map(g, |t, gj| gj * (1.0 - t * t))?;
                feed!(a, delta);
            }
            Op::Relu(a) => {
                // Subgradient 0 at the kink.
                let delta = self.nodes[a]
                    .value
                    .zip_map(g, |x, gj| if x > 0.0 { gj } else { 0.0 })?;
                feed!(a, delta);
            }
            Op::Gelu(a) => {
                let delta = self.nodes[a].value.zip_map(g, |x, gj| gj * gelu_prime(x))?;
                feed!(a, delta);
            }
            Op::Sin(a) => {
                let delta = self.nodes[a].value.zip_map(g, |x, gj| gj * x.cos())?;
                feed!(a, delta);
            }
            Op::Cos(a) => {
                let delta = self.nodes[a].value.zip_map(g, |x, gj| -gj * x.sin())?;
                feed!(a, delta);
            }
            Op::Sum(a) => {
                let src = &self.nodes[a].value;
                let delta = Tensor::filled(src.rows(), src.cols(), g.get(0, 0));
                feed!(a, delta);
            }
            Op::Mean(a) => {
                let src = &self.nodes[a].value;
                let delta = Tensor::filled(src.rows(), src.cols(), g.get(0, 0) / src.len() as f64);
                feed!(a, delta);
            }
            Op::Square(a) => {
                let delta = self.nodes[a].value.zip_map(g, |x, gj| 2.0 * x * gj)?;
                feed!(a, delta);
            }
            Op::Sqrt(a) => {
                let delta = value.zip_map(g, |s, gj| gj / (2.0 * s))?;
                feed!(a, delta);
            }
            Op::Recip(a) => {
                let delta = value.zip_map(g, |r, gj| -gj * r * r)?;
                feed!(a, delta);
            }
            Op::Transpose(a) => {
                feed!(a, g.transpose());
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.nodes[a].value.cols(), self.nodes[b].value.cols());
                let rows = g.rows();
                let mut da = Tensor::zeros(rows, ca);
                let mut db = Tensor::zeros(rows, cb);
                for i in 0..rows {
                    for j in 0..ca {
                        da.set(i, j, g.get(i, j));
                    }
                    for j in 0..cb {
                        db.set(i, j, g.get(i, ca + j));
                    }
                }
                feed!(a, da);
                feed!(b, db);
            }
            Op::SliceRows { input, start } => {
                let src = &self.nodes[input].value;
                let mut delta = Tensor::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        delta.set(start + i, j, g.get(i, j));
                    }
                }
                feed!(input, delta);
            }
            Op::Reshape(a) => {
                let src = &self.nodes[a].value;
                let delta = g.reshaped(src.rows(), src.cols())?;
                feed!(a, delta);
            }
        }
        Ok(())
    }
}

/// Compare an analytic gradient against central finite differences of `f`.
///
/// Returns the maximum over coordinates of
/// `|analytic - central| / (1e-8 + |central|)`. The step `h` must lie in
/// [1e-7, 1e-3]; outside that window the comparison is dominated by either
/// roundoff or truncation error.
pub fn grad_check<F>(mut f: F, theta: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(GsgwError::invalid(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    if theta.len() != analytic.len() {
        return Err(GsgwError::shape(format!(
            "gradient length {} vs parameter length {}",
            analytic.len(),
            theta.len()
        )));
    }
    let mut work = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        work[i] = theta[i] + h;
        let plus = f(&work)?;
        work[i] = theta[i] - h;
        let minus = f(&work)?;
        work[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GsgwError::numeric(format!(
                "non-finite value during finite differences at coordinate {i}"
            )));
        }
        let central = (plus - minus) / (2.0 * h);
        let rel = (analytic[i] - central).abs() / (1e-8 + central.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.normal()).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Runs grad_check for a scalar graph built from a single parameter
    /// tensor of the given shape.
    fn check_unary<B>(build: B, rows: usize, cols: usize, seed: u64) -> f64
    where
        B: Fn(&mut Tape, Var) -> Result<Var>,
    {
        let mut rng = Rng::new(seed);
        let theta: Vec<f64> = (0..rows * cols).map(|_| 0.5 + rng.uniform()).collect();
        let weight_data: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();

        let eval = |params: &[f64]| -> Result<(f64, Option<Vec<f64>>)> {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec(rows, cols, params.to_vec())?, true);
            let y = build(&mut tape, x)?;
            let (yr, yc) = tape.value(y).shape();
            let scalar = if (yr, yc) == (1, 1) {
                y
            } else {
                let w = tape.constant(Tensor::from_vec(yr, yc, weight_data.clone())?);
                let prod = tape.hadamard(y, w)?;
                tape.sum(prod)?
            };
            let value = tape.value(scalar).scalar_value()?;
            let grads = tape.backward(scalar)?;
            let grad = grads.get(x).map(|t| t.data().to_vec());
            Ok((value, grad))
        };

        let (_, grad) = eval(&theta).unwrap();
        let analytic = grad.expect("leaf gradient missing");
        grad_check(|p| eval(p).map(|(v, _)| v), &theta, &analytic, 1e-5).unwrap()
    }

    #[test]
    fn elementwise_op_gradients_match_finite_differences() {
        let cases: Vec<(&str, fn(&mut Tape, Var) -> Result<Var>)> = vec![
            ("sigmoid", |t, x| t.sigmoid(x)),
            ("tanh", |t, x| t.tanh(x)),
            ("gelu", |t, x| t.gelu(x)),
            ("sin", |t, x| t.sin(x)),
            ("cos", |t, x| t.cos(x)),
            ("square", |t, x| t.square(x)),
            ("sqrt", |t, x| t.sqrt(x)),
            ("recip", |t, x| t.recip(x)),
            ("relu", |t, x| t.relu(x)),
            ("softmax", |t, x| t.row_softmax(x)),
            ("sum", |t, x| t.sum(x)),
            ("mean", |t, x| t.mean(x)),
            ("transpose", |t, x| t.transpose(x)),
        ];
        for (name, build) in cases {
            let err = check_unary(build, 3, 4, 42);
            assert!(err <= 1e-6, "{name} gradient error {err}");
        }
    }

    #[test]
    fn binary_op_gradients_match_finite_differences() {
        // One combined graph exercising matmul, add, sub, hadamard,
        // scalar_mul, concat and slice together.
        let mut rng = Rng::new(7);
        let theta: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let b = random_tensor(&mut rng, 4, 2);
        let w = random_tensor(&mut rng, 3, 2);

        let eval = |params: &[f64]| -> Result<(f64, Option<Vec<f64>>)> {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec(3, 4, params.to_vec())?, true);
            let bc = tape.constant(b.clone());
            let prod = tape.matmul(x, bc)?; // 3x2
            let doubled = tape.scalar_mul(prod, 2.0)?;
            let shifted = tape.add(doubled, prod)?;
            let diff = tape.sub(shifted, prod)?; // 2*prod
            let mixed = tape.hadamard(diff, prod)?;
            let both = tape.concat_cols(mixed, prod)?; // 3x4
            let left = tape.slice_rows(both, 1, 2)?; // 2x4
            let flat = tape.reshape(left, 4, 2)?;
            let picked = tape.slice_rows(flat, 0, 3)?;
            let wc = tape.constant(w.clone());
            let weighted = tape.hadamard(picked, wc)?;
            let loss = tape.sum(weighted)?;
            let value = tape.value(loss).scalar_value()?;
            let grads = tape.backward(loss)?;
            Ok((value, grads.get(x).map(|t| t.data().to_vec())))
        };

        let (_, grad) = eval(&theta).unwrap();
        let analytic = grad.unwrap();
        let err = grad_check(|p| eval(p).map(|(v, _)| v), &theta, &analytic, 1e-5).unwrap();
        assert!(err <= 1e-6, "combined graph gradient error {err}");
    }

    #[test]
    fn matmul_gradient_flows_to_both_operands() {
        let mut rng = Rng::new(3);
        let a0: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let b0: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let theta: Vec<f64> = a0.iter().chain(&b0).copied().collect();

        let eval = |params: &[f64]| -> Result<(f64, Option<Vec<f64>>)> {
            let mut tape = Tape::new();
            let flat = tape.leaf(Tensor::from_vec(14, 1, params.to_vec())?, true);
            let a_flat = tape.slice_rows(flat, 0, 6)?;
            let a = tape.reshape(a_flat, 2, 3)?;
            let b_flat = tape.slice_rows(flat, 6, 8)?;
            let b = tape.reshape(b_flat, 4, 2)?;
            let b = tape.slice_rows(b, 0, 3)?;
            let c = tape.matmul(a, b)?;
            let loss = tape.sum(c)?;
            let value = tape.value(loss).scalar_value()?;
            let grads = tape.backward(loss)?;
            Ok((value, grads.get(flat).map(|t| t.data().to_vec())))
        };
        let (_, grad) = eval(&theta).unwrap();
        let analytic = grad.unwrap();
        let err = grad_check(|p| eval(p).map(|(v, _)| v), &theta, &analytic, 1e-5).unwrap();
        assert!(err <= 1e-6, "matmul gradient error {err}");
    }

    #[test]
    fn relu_uses_zero_subgradient_at_kink() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::column(&[0.0, -1.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::column(&[1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3), true);
        let b = tape.leaf(Tensor::zeros(3, 3), true);
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(b, a).is_err());
    }

    #[test]
    fn non_finite_forward_value_raises() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::column(&[0.0]), true);
        assert!(tape.recip(a).is_err(), "1/0 must be caught");
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || {
            let mut rng = Rng::new(19);
            let mut tape = Tape::new();
            let x = tape.leaf(random_tensor(&mut rng, 4, 4), true);
            let s = tape.sigmoid(x).unwrap();
            let p = tape.row_softmax(s).unwrap();
            let y = tape.matmul(p, x).unwrap();
            let loss = tape.mean(y).unwrap();
            let grads = tape.backward(loss).unwrap();
            grads.get(x).unwrap().data().to_vec()
        };
        let g1 = run();
        let g2 = run();
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn tape_length_counts_operations() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2), true);
        let before = tape.len();
        for _ in 0..10 {
            let _ = tape.sigmoid(x).unwrap();
        }
        assert_eq!(tape.len(), before + 10);
    }

    #[test]
    fn grad_check_validates_step_size() {
        let f = |p: &[f64]| Ok(p[0] * p[0]);
        assert!(grad_check(f, &[1.0], &[2.0], 1e-2).is_err());
        assert!(grad_check(f, &[1.0], &[2.0], 1e-8).is_err());
        let err = grad_check(f, &[1.0], &[2.0], 1e-5).unwrap();
        assert!(err < 1e-8);
    }
}
