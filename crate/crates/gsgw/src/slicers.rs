//! Scalar slicers and liftings.
//!
//! A slicer is a map f: R^q -> R and a lifting a map h: R^p -> R^q with
//! p <= q. Together they push two point clouds onto the line,
//!
//!   s_i = (f o h)(x_i),    t_j = f(y_j),
//!
//! where the shared f couples the two projections: t depends only on f's
//! parameters, s on both. Both maps are small MLPs with an optional frozen
//! random-Fourier-feature front end
//!
//!   phi(x) = sqrt(2/D) * cos(x Omega' + b),   Omega_kl ~ N(0, 1/bandwidth^2),
//!
//! whose frequencies are sampled once at initialization and never updated
//! (Rahimi-Recht features; only the MLP weights train). Parameters live in
//! one flat vector per map so optimizers and checkpoints can treat a model
//! as a single array; the forward pass slices the vector apart on the tape,
//! which keeps every layer inside the same gradient leaf.
//!
//! Rearrangements of the line do not need their own network: a monotone
//! reparameterization composed with f is again a map R^q -> R, so the family
//! already contains it. The plan construction in [`crate::plan`] exists to
//! check that claim, not to implement it.

use crate::autodiff::{Tape, Var};
use crate::error::{GsgwError, Result};
use crate::measures::PointCloud;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

/// Architecture of one map: `depth` linear layers with `activation` between
/// them (none after the last), preceded by an optional random-feature lift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden_width: usize,
    pub depth: usize,
    pub activation: Activation,
    /// Number of random Fourier features; 0 disables the front end.
    pub rff_features: usize,
    pub rff_bandwidth: f64,
}

impl MlpSpec {
    /// Plain affine map, no hidden layers, no random features.
    pub fn affine(in_dim: usize, out_dim: usize) -> Self {
        MlpSpec {
            in_dim,
            out_dim,
            hidden_width: 1,
            depth: 1,
            activation: Activation::Tanh,
            rff_features: 0,
            rff_bandwidth: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(GsgwError::invalid("map dimensions must be positive"));
        }
        if self.depth == 0 {
            return Err(GsgwError::invalid("depth counts linear layers, needs >= 1"));
        }
        if self.hidden_width == 0 {
            return Err(GsgwError::invalid("hidden width must be >= 1"));
        }
        if !(self.rff_bandwidth.is_finite() && self.rff_bandwidth > 0.0) {
            return Err(GsgwError::invalid("rff bandwidth must be finite and > 0"));
        }
        Ok(())
    }

    /// Width of the input actually seen by the first linear layer.
    fn feature_dim(&self) -> usize {
        if self.rff_features > 0 {
            self.rff_features
        } else {
            self.in_dim
        }
    }

    /// Input/output widths of each linear layer.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.depth + 1);
        widths.push(self.feature_dim());
        for _ in 1..self.depth {
            widths.push(self.hidden_width);
        }
        widths.push(self.out_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Total number of trainable parameters.
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .into_iter()
            .map(|(din, dout)| din * dout + dout)
            .sum()
    }
}

/// Frozen random-feature map. `frequencies` is stored pre-transposed
/// (in_dim x features) so the forward pass is a single right-multiplication.
#[derive(Debug, Clone)]
pub struct RffMap {
    frequencies: Tensor,
    phases: Tensor,
}

impl RffMap {
    fn sample(in_dim: usize, features: usize, bandwidth: f64, rng: &mut Rng) -> RffMap {
        let sigma = 1.0 / bandwidth;
        let mut freq = Tensor::zeros(in_dim, features);
        for k in 0..features {
            for l in 0..in_dim {
                freq.set(l, k, sigma * rng.normal());
            }
        }
        let mut phases = Tensor::zeros(1, features);
        for k in 0..features {
            phases.set(0, k, rng.uniform_in(0.0, 2.0 * std::f64::consts::PI));
        }
        RffMap {
            frequencies: freq,
            phases,
        }
    }

    pub fn features(&self) -> usize {
        self.frequencies.cols()
    }
}

/// One map (slicer or lifting): an architecture, frozen features, and a flat
/// parameter vector laid out layer by layer as a row-major (in x out) weight
/// block followed by the biases.
#[derive(Debug, Clone)]
pub struct SlicerModel {
    spec: MlpSpec,
    rff: Option<RffMap>,
    params: Vec<f64>,
}

impl SlicerModel {
    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.spec.param_count() {
            return Err(GsgwError::shape(format!(
                "expected {} parameters, got {}",
                self.spec.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(GsgwError::numeric("parameters contain NaN or Inf"));
        }
        self.params = params;
        Ok(())
    }

    pub fn rff(&self) -> Option<&RffMap> {
        self.rff.as_ref()
    }

    /// Scaled-uniform fan-in initialization, biases included, plus freshly
    /// sampled frozen features when the spec asks for them.
    fn init_fan_in(spec: MlpSpec, rng: &mut Rng) -> Result<SlicerModel> {
        spec.validate()?;
        let rff = (spec.rff_features > 0)
            .then(|| RffMap::sample(spec.in_dim, spec.rff_features, spec.rff_bandwidth, rng));
        let mut params = Vec::with_capacity(spec.param_count());
        for (din, dout) in spec.layer_dims() {
            let bound = 1.0 / (din as f64).sqrt();
            for _ in 0..din * dout + dout {
                params.push(rng.uniform_in(-bound, bound));
            }
        }
        Ok(SlicerModel { spec, rff, params })
    }

    /// Exact zero-padding embedding x -> (x, 0, ..., 0). Only an affine map
    /// without random features can represent it exactly.
    fn init_identity_embed(spec: MlpSpec) -> Result<SlicerModel> {
        spec.validate()?;
        if spec.depth != 1 || spec.rff_features > 0 {
            return Err(GsgwError::invalid(
                "identity embedding needs an affine spec without random features",
            ));
        }
        if spec.in_dim > spec.out_dim {
            return Err(GsgwError::invalid(
                "identity embedding cannot reduce dimension",
            ));
        }
        let mut params = vec![0.0; spec.param_count()];
        for i in 0..spec.in_dim {
            params[i * spec.out_dim + i] = 1.0;
        }
        Ok(SlicerModel {
            spec,
            rff: None,
            params,
        })
    }

    /// Record the forward pass on the tape. `params` must be this model's
    /// flat parameter leaf (a column vector) and `input` an n x in_dim node.
    pub fn forward_graph(&self, tape: &mut Tape, params: Var, input: Var) -> Result<Var> {
        let (n, d) = tape.value(input).shape();
        if d != self.spec.in_dim {
            return Err(GsgwError::shape(format!(
                "input dimension {d} does not match spec in_dim {}",
                self.spec.in_dim
            )));
        }
        let (pr, pc) = tape.value(params).shape();
        if (pr, pc) != (self.spec.param_count(), 1) {
            return Err(GsgwError::shape(format!(
                "parameter leaf is {pr}x{pc}, expected {}x1",
                self.spec.param_count()
            )));
        }
        let ones = tape.constant(Tensor::filled(n, 1, 1.0));

        let mut z = input;
        if let Some(rff) = &self.rff {
            let freq = tape.constant(rff.frequencies.clone());
            let proj = tape.matmul(z, freq)?;
            let phases = tape.constant(rff.phases.clone());
            let phase_grid = tape.matmul(ones, phases)?;
            let shifted = tape.add(proj, phase_grid)?;
            let cosines = tape.cos(shifted)?;
            z = tape.scalar_mul(cosines, (2.0 / rff.features() as f64).sqrt())?;
        }

        let dims = self.spec.layer_dims();
        let last = dims.len() - 1;
        let mut offset = 0;
        for (l, (din, dout)) in dims.into_iter().enumerate() {
            let w_flat = tape.slice_rows(params, offset, din * dout)?;
            let w = tape.reshape(w_flat, din, dout)?;
            offset += din * dout;
            let b_col = tape.slice_rows(params, offset, dout)?;
            offset += dout;
            let b_row = tape.transpose(b_col)?;
            let b_grid = tape.matmul(ones, b_row)?;
            let affine = tape.matmul(z, w)?;
            z = tape.add(affine, b_grid)?;
            if l != last {
                z = match self.spec.activation {
                    Activation::Relu => tape.relu(z)?,
                    Activation::Gelu => tape.gelu(z)?,
                    Activation::Tanh => tape.tanh(z)?,
                };
            }
        }
        Ok(z)
    }

    /// Evaluate without a tape. Mirrors [`forward_graph`] operation for
    /// operation so the two paths agree bitwise.
    pub fn forward_plain(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = tape.leaf(Tensor::column(&self.params), false);
        let x = tape.constant(input.clone());
        let out = self.forward_graph(&mut tape, params, x)?;
        Ok(tape.value(out).clone())
    }
}

/// How the lifting h starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiftInit {
    /// Scaled-uniform fan-in draw, like the slicer.
    FanIn,
    /// Exact zero-padding embedding; requires an affine h without random
    /// features. With p = q this is the identity, so on identical clouds the
    /// initial plan is already the diagonal.
    IdentityEmbed,
}

/// A coupled slicer/lifting pair: f on R^q shared between both clouds, h
/// lifting R^p into R^q.
#[derive(Debug, Clone)]
pub struct SlicerPair {
    f: SlicerModel,
    h: SlicerModel,
}

impl SlicerPair {
    pub fn f(&self) -> &SlicerModel {
        &self.f
    }

    pub fn h(&self) -> &SlicerModel {
        &self.h
    }

    pub fn f_mut(&mut self) -> &mut SlicerModel {
        &mut self.f
    }

    pub fn h_mut(&mut self) -> &mut SlicerModel {
        &mut self.h
    }

    pub fn p(&self) -> usize {
        self.h.spec.in_dim
    }

    pub fn q(&self) -> usize {
        self.f.spec.in_dim
    }
}

fn check_pair_dims(p: usize, q: usize, spec_f: &MlpSpec, spec_h: &MlpSpec) -> Result<()> {
    if p == 0 || q == 0 {
        return Err(GsgwError::invalid("ambient dimensions must be positive"));
    }
    if p > q {
        return Err(GsgwError::invalid(format!(
            "lifting must not reduce dimension: p={p} > q={q}; swap the \
             arguments and transpose the resulting plans"
        )));
    }
    if spec_f.in_dim != q || spec_f.out_dim != 1 {
        return Err(GsgwError::shape(format!(
            "slicer spec must map R^{q} -> R, got {} -> {}",
            spec_f.in_dim, spec_f.out_dim
        )));
    }
    if spec_h.in_dim != p || spec_h.out_dim != q {
        return Err(GsgwError::shape(format!(
            "lifting spec must map R^{p} -> R^{q}, got {} -> {}",
            spec_h.in_dim, spec_h.out_dim
        )));
    }
    Ok(())
}

/// Fan-in initialize a single standalone map.
pub fn init_model(spec: MlpSpec, seed: u64) -> Result<SlicerModel> {
    let mut rng = Rng::new(seed);
    SlicerModel::init_fan_in(spec, &mut rng)
}

/// Initialize a pair with a chosen lifting start. Deterministic in the seed:
/// f is drawn first (features, then layers), then h.
pub fn init_slicer_pair_with(
    p: usize,
    q: usize,
    spec_f: MlpSpec,
    spec_h: MlpSpec,
    seed: u64,
    lift: LiftInit,
) -> Result<SlicerPair> {
    check_pair_dims(p, q, &spec_f, &spec_h)?;
    let mut rng = Rng::new(seed);
    let f = SlicerModel::init_fan_in(spec_f, &mut rng)?;
    let h = match lift {
        LiftInit::FanIn => SlicerModel::init_fan_in(spec_h, &mut rng)?,
        LiftInit::IdentityEmbed => SlicerModel::init_identity_embed(spec_h)?,
    };
    Ok(SlicerPair { f, h })
}

/// Initialize a pair with fan-in draws for both maps.
pub fn init_slicer_pair(
    p: usize,
    q: usize,
    spec_f: MlpSpec,
    spec_h: MlpSpec,
    seed: u64,
) -> Result<SlicerPair> {
    init_slicer_pair_with(p, q, spec_f, spec_h, seed, LiftInit::FanIn)
}

/// Linear pair for the linear-vs-nonlinear ablation: f a unit-norm linear
/// functional (zero bias), h the exact zero-padding embedding.
pub fn linear_slicer_pair(p: usize, q: usize, seed: u64) -> Result<SlicerPair> {
    let spec_f = MlpSpec::affine(q, 1);
    let spec_h = MlpSpec::affine(p, q);
    check_pair_dims(p, q, &spec_f, &spec_h)?;
    let mut rng = Rng::new(seed);
    let mut f = SlicerModel::init_fan_in(spec_f, &mut rng)?;
    let direction = rng.unit_vector(q);
    let mut params = direction;
    params.push(0.0); // bias
    f.set_params(params)?;
    let h = SlicerModel::init_identity_embed(spec_h)?;
    Ok(SlicerPair { f, h })
}

/// Independently drawn unit projection directions on S^{p-1} and S^{q-1},
/// for baselines that slice each space with its own functional.
pub fn sample_direction_pair(p: usize, q: usize, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let psi = rng.unit_vector(p);
    let phi = rng.unit_vector(q);
    (psi, phi)
}

/// Leaves for both parameter vectors plus the projected score columns
/// s = f(h(X)) and t = f(Y), all recorded on the tape.
pub struct PushforwardGraph {
    pub f_params: Var,
    pub h_params: Var,
    pub s: Var,
    pub t: Var,
}

/// Record s_i = f(h(x_i)) and t_j = f(y_j) on the tape. The parameter leaves
/// are created here so callers can read gradients off the returned handles;
/// t is structurally independent of `h_params`.
pub fn pushforward_values(
    pair: &SlicerPair,
    x: &PointCloud,
    y: &PointCloud,
    tape: &mut Tape,
) -> Result<PushforwardGraph> {
    if x.dim() != pair.p() {
        return Err(GsgwError::shape(format!(
            "X lives in R^{}, lifting expects R^{}",
            x.dim(),
            pair.p()
        )));
    }
    if y.dim() != pair.q() {
        return Err(GsgwError::shape(format!(
            "Y lives in R^{}, slicer expects R^{}",
            y.dim(),
            pair.q()
        )));
    }
    let f_params = tape.leaf(Tensor::column(pair.f.params()), true);
    let h_params = tape.leaf(Tensor::column(pair.h.params()), true);
    let x_in = tape.constant(x.to_tensor());
    let y_in = tape.constant(y.to_tensor());
    let lifted = pair.h.forward_graph(tape, h_params, x_in)?;
    let s = pair.f.forward_graph(tape, f_params, lifted)?;
    let t = pair.f.forward_graph(tape, f_params, y_in)?;
    Ok(PushforwardGraph {
        f_params,
        h_params,
        s,
        t,
    })
}
