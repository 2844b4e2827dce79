//! Amortized matching: a set network predicts the push-forward values.
//!
//! Instead of optimizing a slicer per pair, a single network G maps two
//! point clouds straight to score vectors (s, t); the coupling is the usual
//! sorted plan built from those scores. Inputs are intrinsic tokens
//!
//!   D_i = sort({ ||x_i - x_k||^2 : k != i })[..K],
//!
//! the K smallest sorted squared distances from each point, so the network
//! never sees ambient coordinates. Four properties then hold by
//! construction rather than by regularization:
//!
//!   * G(X, X) = (1/n) I    (tied weights make s = t; stable sorts agree),
//!   * G(Y, X) = G(X, Y)'   (swapping the arguments swaps the scores),
//!   * rigid invariance     (tokens are functions of intra-cloud distances),
//!   * permutation equivariance (every block is row-wise or a mean pool).
//!
//! The scorer is deliberately small: a token encoder rho (two layers, GELU)
//! shared by both streams, one self-mixing block with a mean-pooled context
//! residual standing in for self-attention, one cross-mixing block that
//! concatenates the other stream's summary, a symmetric pair context
//! c = (C(X') + C(Y'))/2 broadcast back onto both streams, and a shared
//! scalar readout. Single-head dot-product attention can replace the
//! self-mixing MLP behind a config flag. Training minimizes the fused GW
//! loss of the soft plan over random pairs; labels are never consumed in
//! training and enter only through [`label_transfer_accuracy`] at test time.

use crate::autodiff::{Tape, Var};
use crate::error::{GsgwError, Result};
use crate::geometry::plan_to_correspondence;
use crate::measures::{
    build_cost_matrix, feature_cost_matrix, fgw_loss_graph, CostConvention, CostMatrix, Coupling,
};
use crate::plan::hard_plan;
use crate::rng::Rng;
use crate::softsort::{anneal, soft_plan, soft_plan_graph, AnnealSchedule, AnnealShape};
use crate::solver::{adam_step, warmup_lr, AdamState, OptimizerKind};
use crate::measures::PointCloud;
use crate::synth::LabeledCloud;
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Per-point sorted squared-distance profiles of one cloud.
#[derive(Debug, Clone)]
pub struct IntrinsicTokens {
    tokens: Tensor,
    k: usize,
}

impl IntrinsicTokens {
    /// N x K matrix; row i holds the K smallest squared distances from
    /// point i, ascending.
    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// The K smallest sorted squared distances from each point to the rest of
/// its own cloud. Rigid motions leave every entry fixed up to round-off,
/// and permuting the cloud permutes the rows identically, because row i
/// depends only on point i and the multiset of the others.
pub fn tokenize(cloud: &PointCloud, k: usize) -> Result<IntrinsicTokens> {
    if k == 0 {
        return Err(GsgwError::invalid("token profile needs K >= 1"));
    }
    let n = cloud.len();
    if n <= k {
        return Err(GsgwError::invalid(format!(
            "cloud of {n} points cannot supply {k} neighbor distances per point; need at least {} points",
            k + 1
        )));
    }
    let mut tokens = Tensor::zeros(n, k);
    let mut dists = Vec::with_capacity(n - 1);
    for i in 0..n {
        dists.clear();
        let xi = cloud.point(i);
        for j in 0..n {
            if j == i {
                continue;
            }
            let sq: f64 = xi
                .iter()
                .zip(cloud.point(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(sq);
        }
        dists.sort_by(f64::total_cmp);
        for (c, &d) in dists[..k].iter().enumerate() {
            tokens.set(i, c, d);
        }
    }
    Ok(IntrinsicTokens { tokens, k })
}

/// Architecture dimensions of the scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatcherConfig {
    /// Neighbor distances kept per token.
    pub k: usize,
    /// Output width of the token encoder rho.
    pub token_dim: usize,
    /// Width of the mixing blocks and the pair context.
    pub latent_dim: usize,
    /// Attention heads; only 1 is supported.
    pub heads: usize,
    /// Replace the self-mixing MLP with single-head dot-product attention.
    pub attention: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            k: 32,
            token_dim: 64,
            latent_dim: 256,
            heads: 1,
            attention: false,
        }
    }
}

impl MatcherConfig {
    /// Small dimensions for tests and quick experiments.
    pub fn quick() -> Self {
        MatcherConfig {
            k: 6,
            token_dim: 8,
            latent_dim: 16,
            heads: 1,
            attention: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.token_dim == 0 || self.latent_dim == 0 {
            return Err(GsgwError::invalid("matcher dimensions must be positive"));
        }
        if self.heads != 1 {
            return Err(GsgwError::invalid(format!(
                "only single-head attention is supported, got {} heads",
                self.heads
            )));
        }
        Ok(())
    }

    /// rho: two linear layers K -> t -> t with GELU between.
    fn rho_len(&self) -> usize {
        let t = self.token_dim;
        self.k * t + t + t * t + t
    }

    /// Self-mixing residual (MLP on [phi; mean] or Q/K/V attention) plus
    /// the cross-mixing layer t -> latent.
    fn encoder_len(&self) -> usize {
        let (t, l) = (self.token_dim, self.latent_dim);
        let self_mix = if self.attention {
            3 * t * t
        } else {
            2 * t * t + t
        };
        self_mix + 2 * t * l + l
    }

    /// Re-projection of [phi; context].
    fn context_len(&self) -> usize {
        let l = self.latent_dim;
        2 * l * l + l
    }

    /// Scalar head w plus bias.
    fn readout_len(&self) -> usize {
        self.latent_dim + 1
    }

    pub fn param_count(&self) -> usize {
        self.rho_len() + self.encoder_len() + self.context_len() + self.readout_len()
    }

    /// Named parameter segments in flat-vector order, for checkpoints.
    pub fn segments(&self) -> [(&'static str, std::ops::Range<usize>); 4] {
        let r = self.rho_len();
        let e = r + self.encoder_len();
        let c = e + self.context_len();
        let w = c + self.readout_len();
        [
            ("rho", 0..r),
            ("encoder", r..e),
            ("context", e..c),
            ("readout", c..w),
        ]
    }
}

/// One flat parameter vector plus the dimensions that interpret it. The
/// encoder weights are tied across the two streams and the readout is
/// shared, so a single vector covers the whole matcher.
#[derive(Debug, Clone)]
pub struct MatcherParams {
    config: MatcherConfig,
    flat: Vec<f64>,
}

impl MatcherParams {
    pub fn config(&self) -> &MatcherConfig {
        &self.config
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn from_flat(config: MatcherConfig, flat: Vec<f64>) -> Result<MatcherParams> {
        config.validate()?;
        if flat.len() != config.param_count() {
            return Err(GsgwError::shape(format!(
                "matcher expects {} parameters, got {}",
                config.param_count(),
                flat.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(GsgwError::invalid("matcher parameters contain NaN or Inf"));
        }
        Ok(MatcherParams { config, flat })
    }
}

/// Fan-in uniform initialization, +-1/sqrt(d_in) per layer including biases.
pub fn init_matcher(config: MatcherConfig, seed: u64) -> Result<MatcherParams> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let (k, t, l) = (config.k, config.token_dim, config.latent_dim);
    let mut flat = Vec::with_capacity(config.param_count());
    let layer = |din: usize, count: usize, flat: &mut Vec<f64>, rng: &mut Rng| {
        let bound = 1.0 / (din as f64).sqrt();
        for _ in 0..count {
            flat.push(rng.uniform_in(-bound, bound));
        }
    };
    layer(k, k * t + t, &mut flat, &mut rng);
    layer(t, t * t + t, &mut flat, &mut rng);
    if config.attention {
        layer(t, 3 * t * t, &mut flat, &mut rng);
    } else {
        layer(2 * t, 2 * t * t + t, &mut flat, &mut rng);
    }
    layer(2 * t, 2 * t * l + l, &mut flat, &mut rng);
    layer(2 * l, 2 * l * l + l, &mut flat, &mut rng);
    layer(l, l + 1, &mut flat, &mut rng);
    debug_assert_eq!(flat.len(), config.param_count());
    Ok(MatcherParams { config, flat })
}

/// One linear layer read out of the flat parameter vector: weight block of
/// din*dout entries, then dout bias entries, bias broadcast across rows.
fn linear(
    tape: &mut Tape,
    params: Var,
    offset: &mut usize,
    input: Var,
    din: usize,
    dout: usize,
) -> Result<Var> {
    let n = tape.value(input).rows();
    let w_flat = tape.slice_rows(params, *offset, din * dout)?;
    let w = tape.reshape(w_flat, din, dout)?;
    let b_col = tape.slice_rows(params, *offset + din * dout, dout)?;
    let b_row = tape.transpose(b_col)?;
    let ones = tape.constant(Tensor::from_vec(n, 1, vec![1.0; n])?);
    let b_mat = tape.matmul(ones, b_row)?;
    let xw = tape.matmul(input, w)?;
    *offset += din * dout + dout;
    tape.add(xw, b_mat)
}

/// Mean over rows as a 1 x d summary.
fn mean_rows(tape: &mut Tape, phi: Var) -> Result<Var> {
    let n = tape.value(phi).rows();
    let weights = tape.constant(Tensor::from_vec(1, n, vec![1.0 / n as f64; n])?);
    tape.matmul(weights, phi)
}

/// Copy a 1 x d row onto every one of n rows.
fn broadcast_rows(tape: &mut Tape, row: Var, n: usize) -> Result<Var> {
    let ones = tape.constant(Tensor::from_vec(n, 1, vec![1.0; n])?);
    tape.matmul(ones, row)
}

/// Token encoder rho applied to one stream's raw profiles.
fn encode_tokens(
    tape: &mut Tape,
    params: Var,
    cfg: &MatcherConfig,
    tokens: &Tensor,
) -> Result<Var> {
    let raw = tape.constant(tokens.clone());
    let mut offset = 0;
    let hidden = linear(tape, params, &mut offset, raw, cfg.k, cfg.token_dim)?;
    let hidden = tape.gelu(hidden)?;
    linear(tape, params, &mut offset, hidden, cfg.token_dim, cfg.token_dim)
}

/// Self-mixing residual for one stream. The MLP path pools the stream into
/// a mean summary, concatenates it back onto every token, and adds the
/// transformed result to the input; the attention path is the standard
/// single-head softmax(Q K' / sqrt(d)) V with the same residual.
fn self_mix(tape: &mut Tape, params: Var, cfg: &MatcherConfig, phi: Var) -> Result<Var> {
    let t = cfg.token_dim;
    let mut offset = cfg.rho_len();
    if cfg.attention {
        let read_weight = |tape: &mut Tape, offset: &mut usize| -> Result<Var> {
            let flat = tape.slice_rows(params, *offset, t * t)?;
            *offset += t * t;
            tape.reshape(flat, t, t)
        };
        let wq = read_weight(tape, &mut offset)?;
        let wk = read_weight(tape, &mut offset)?;
        let wv = read_weight(tape, &mut offset)?;
        let q = tape.matmul(phi, wq)?;
        let k = tape.matmul(phi, wk)?;
        let v = tape.matmul(phi, wv)?;
        let k_t = tape.transpose(k)?;
        let logits = tape.matmul(q, k_t)?;
        let scaled = tape.scalar_mul(logits, 1.0 / (t as f64).sqrt())?;
        let attn = tape.row_softmax(scaled)?;
        let mixed = tape.matmul(attn, v)?;
        tape.add(phi, mixed)
    } else {
        let n = tape.value(phi).rows();
        let summary = mean_rows(tape, phi)?;
        let context = broadcast_rows(tape, summary, n)?;
        let cat = tape.concat_cols(phi, context)?;
        let lin = linear(tape, params, &mut offset, cat, 2 * t, t)?;
        let act = tape.gelu(lin)?;
        tape.add(phi, act)
    }
}

/// Cross-mixing: each stream's tokens concatenated with the other stream's
/// mean summary, then projected to the latent width.
fn cross_mix(
    tape: &mut Tape,
    params: Var,
    cfg: &MatcherConfig,
    phi: Var,
    other_summary: Var,
) -> Result<Var> {
    let (t, l) = (cfg.token_dim, cfg.latent_dim);
    let self_mix_len = if cfg.attention {
        3 * t * t
    } else {
        2 * t * t + t
    };
    let mut offset = cfg.rho_len() + self_mix_len;
    let n = tape.value(phi).rows();
    let context = broadcast_rows(tape, other_summary, n)?;
    let cat = tape.concat_cols(phi, context)?;
    let lin = linear(tape, params, &mut offset, cat, 2 * t, l)?;
    tape.gelu(lin)
}

/// Pair-context re-projection and scalar readout for one stream.
fn readout(
    tape: &mut Tape,
    params: Var,
    cfg: &MatcherConfig,
    phi: Var,
    pair_context: Var,
) -> Result<Var> {
    let l = cfg.latent_dim;
    let n = tape.value(phi).rows();
    let context = broadcast_rows(tape, pair_context, n)?;
    let cat = tape.concat_cols(phi, context)?;
    let mut offset = cfg.rho_len() + cfg.encoder_len();
    let lin = linear(tape, params, &mut offset, cat, 2 * l, l)?;
    let act = tape.gelu(lin)?;
    linear(tape, params, &mut offset, act, l, 1)
}

/// Record the scorer on the tape. `params` must be this matcher's flat
/// parameter leaf (a column vector); the returned scores are N x 1 and
/// M x 1 columns. Both streams share every weight, and the pair context is
/// the arithmetic mean of the two stream summaries, so equal inputs produce
/// bitwise-equal scores and swapping the arguments swaps the outputs.
pub fn predict_scores(
    tape: &mut Tape,
    params: Var,
    cfg: &MatcherConfig,
    tok_x: &IntrinsicTokens,
    tok_y: &IntrinsicTokens,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    if tok_x.k() != cfg.k || tok_y.k() != cfg.k {
        return Err(GsgwError::shape(format!(
            "tokens keep {} and {} distances but the matcher expects {}",
            tok_x.k(),
            tok_y.k(),
            cfg.k
        )));
    }
    let expected = (cfg.param_count(), 1);
    if tape.value(params).shape() != expected {
        return Err(GsgwError::shape(format!(
            "parameter leaf is {:?}, expected {:?}",
            tape.value(params).shape(),
            expected
        )));
    }
    let phi_x = encode_tokens(tape, params, cfg, tok_x.tokens())?;
    let phi_y = encode_tokens(tape, params, cfg, tok_y.tokens())?;
    let phi_x = self_mix(tape, params, cfg, phi_x)?;
    let phi_y = self_mix(tape, params, cfg, phi_y)?;
    let sum_x = mean_rows(tape, phi_x)?;
    let sum_y = mean_rows(tape, phi_y)?;
    let phi_x = cross_mix(tape, params, cfg, phi_x, sum_y)?;
    let phi_y = cross_mix(tape, params, cfg, phi_y, sum_x)?;
    let ctx_x = mean_rows(tape, phi_x)?;
    let ctx_y = mean_rows(tape, phi_y)?;
    let ctx_sum = tape.add(ctx_x, ctx_y)?;
    let pair_context = tape.scalar_mul(ctx_sum, 0.5)?;
    let s = readout(tape, params, cfg, phi_x, pair_context)?;
    let t = readout(tape, params, cfg, phi_y, pair_context)?;
    Ok((s, t))
}

/// Scores of a pair without gradients: the same graph evaluated with the
/// parameters as a constant.
pub fn matcher_scores(
    params: &MatcherParams,
    tok_x: &IntrinsicTokens,
    tok_y: &IntrinsicTokens,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let leaf = tape.constant(Tensor::column(params.flat()));
    let (s, t) = predict_scores(&mut tape, leaf, params.config(), tok_x, tok_y)?;
    let s = tape.value(s).data().to_vec();
    let t = tape.value(t).data().to_vec();
    Ok((s, t))
}

/// Coupling predicted for a pair of clouds under uniform weights: the soft
/// sorted plan at temperature `tau`, or the hard plan at `tau = 0` for
/// inference. Matching a cloud to itself at the hard limit yields (1/n) I
/// because tied weights force s = t and the stable sort breaks the ties in
/// the same order on both sides.
pub fn amortized_plan(
    params: &MatcherParams,
    x: &PointCloud,
    y: &PointCloud,
    tau: f64,
) -> Result<Coupling> {
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(GsgwError::invalid(format!(
            "temperature {tau} must be finite and >= 0"
        )));
    }
    let k = params.config().k;
    let tok_x = tokenize(x, k)?;
    let tok_y = tokenize(y, k)?;
    let (s, t) = matcher_scores(params, &tok_x, &tok_y)?;
    if tau == 0.0 {
        hard_plan(&s, &t)
    } else {
        soft_plan(&s, &t, tau)
    }
}

/// Fraction of source points whose most-likely image carries the same
/// label: |{i : labelsY[argmax_j pi_ij] = labelsX[i]}| / n. Labels enter
/// only here, never in training.
pub fn label_transfer_accuracy(
    pi: &Coupling,
    labels_x: &[usize],
    labels_y: &[usize],
) -> Result<f64> {
    let (n, m) = pi.shape();
    if labels_x.len() != n || labels_y.len() != m {
        return Err(GsgwError::shape(format!(
            "{} source and {} target labels for a {n}x{m} plan",
            labels_x.len(),
            labels_y.len()
        )));
    }
    let assignment = plan_to_correspondence(pi)?;
    let hits = assignment
        .iter()
        .zip(labels_x)
        .filter(|(&j, &lx)| labels_y[j] == lx)
        .count();
    Ok(hits as f64 / n as f64)
}

/// Expected accuracy of a uniformly random assignment: sum over labels of
/// p_X(label) * p_Y(label). The analytic floor that a trained matcher has
/// to clear.
pub fn random_transfer_baseline(labels_x: &[usize], labels_y: &[usize]) -> Result<f64> {
    if labels_x.is_empty() || labels_y.is_empty() {
        return Err(GsgwError::invalid("label vectors must be nonempty"));
    }
    let top = labels_x.iter().chain(labels_y).max().copied().unwrap_or(0);
    let mut px = vec![0.0; top + 1];
    let mut py = vec![0.0; top + 1];
    for &l in labels_x {
        px[l] += 1.0 / labels_x.len() as f64;
    }
    for &l in labels_y {
        py[l] += 1.0 / labels_y.len() as f64;
    }
    Ok(px.iter().zip(&py).map(|(a, b)| a * b).sum())
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    /// Random pairs drawn and averaged per optimizer step.
    pub pairs_per_step: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    /// Soft-sort temperature schedule endpoints.
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// Structure/feature mix of the fused loss.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pairs_per_step: 8,
            lr: 1e-3,
            warmup_steps: 10,
            grad_clip: 5.0,
            alpha_start: 0.05,
            alpha_end: 0.005,
            lambda: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs_per_step == 0 {
            return Err(GsgwError::invalid("need at least one pair per step"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(GsgwError::invalid("learning rate must be finite and > 0"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(GsgwError::invalid("gradient clip must be finite and > 0"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(GsgwError::invalid(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Trained parameters plus the per-step mean fused loss.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: MatcherParams,
    pub loss_trace: Vec<f64>,
}

/// Tokens, structure costs, and features of one dataset entry, computed
/// once up front.
struct PreparedCloud {
    tokens: IntrinsicTokens,
    cost: CostMatrix,
}

fn prepare(dataset: &[LabeledCloud], k: usize) -> Result<Vec<PreparedCloud>> {
    dataset
        .iter()
        .map(|item| {
            Ok(PreparedCloud {
                tokens: tokenize(&item.cloud, k)?,
                cost: build_cost_matrix(&item.cloud, CostConvention::Distance)?,
            })
        })
        .collect()
}

/// Fused loss and parameter gradient of one pair at temperature `tau`.
/// The feature term compares the intrinsic token profiles, so the whole
/// objective is rigid-invariant.
fn pair_loss_grad(
    flat: &[f64],
    cfg: &MatcherConfig,
    x: &PreparedCloud,
    y: &PreparedCloud,
    tau: f64,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(Tensor::column(flat), true);
    let (s, t) = predict_scores(&mut tape, leaf, cfg, &x.tokens, &y.tokens)?;
    let pi = soft_plan_graph(&mut tape, s, t, tau)?;
    let features = feature_cost_matrix(x.tokens.tokens(), y.tokens.tokens())?;
    let loss = fgw_loss_graph(&mut tape, &x.cost, &y.cost, pi, &features, lambda)?;
    let value = tape.value(loss).scalar_value()?;
    let grads = tape.backward(loss)?;
    let grad = match grads.get(leaf) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; flat.len()],
    };
    Ok((value, grad))
}

fn run_training(
    prepared: &[PreparedCloud],
    init: &MatcherParams,
    steps: usize,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<TrainReport> {
    let schedule = AnnealSchedule::new(cfg.alpha_start, cfg.alpha_end, steps, AnnealShape::Exponential)?;
    let mut params = init.clone();
    let mut state = AdamState::new(params.flat().len(), OptimizerKind::Adam, 0.0);
    let mut rng = Rng::new(cfg.seed);
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let tau = anneal(&schedule, step)?;
        let pairs: Vec<(usize, usize)> = (0..cfg.pairs_per_step)
            .map(|_| (rng.below(prepared.len()), rng.below(prepared.len())))
            .collect();
        // Pair evaluation parallelizes; the reduction below stays in batch
        // order so the update is deterministic.
        let results: Vec<Result<(f64, Vec<f64>)>> = pairs
            .par_iter()
            .map(|&(i, j)| {
                pair_loss_grad(
                    params.flat(),
                    params.config(),
                    &prepared[i],
                    &prepared[j],
                    tau,
                    cfg.lambda,
                )
            })
            .collect();
        let mut mean_loss = 0.0;
        let mut mean_grad = vec![0.0; params.flat().len()];
        for result in results {
            let (value, grad) = result?;
            mean_loss += value;
            for (acc, g) in mean_grad.iter_mut().zip(&grad) {
                *acc += g;
            }
        }
        let scale = 1.0 / cfg.pairs_per_step as f64;
        mean_loss *= scale;
        for g in &mut mean_grad {
            *g *= scale;
        }
        if !mean_loss.is_finite() {
            return Err(GsgwError::numeric(format!(
                "training loss diverged at step {step}"
            )));
        }
        let lr_t = warmup_lr(lr, step, cfg.warmup_steps);
        adam_step(params.flat_mut(), &mean_grad, &mut state, lr_t, cfg.grad_clip)
            .map_err(|e| GsgwError::numeric(format!("training diverged at step {step}: {e}")))?;
        trace.push(mean_loss);
    }
    Ok(TrainReport { params, loss_trace: trace })
}

/// Minimize the mean fused loss of soft plans over random dataset pairs.
/// Labels are ignored. If a run diverges it is restarted once from the
/// initial parameters at a tenth of the learning rate; a second divergence
/// is an error. `epochs` counts optimizer steps of `pairs_per_step` pairs.
pub fn train_amortized(
    dataset: &[LabeledCloud],
    init: &MatcherParams,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    init.config().validate()?;
    if dataset.is_empty() {
        return Err(GsgwError::invalid("training needs a nonempty dataset"));
    }
    if epochs == 0 {
        return Err(GsgwError::invalid("training needs at least one step"));
    }
    let dim = dataset[0].cloud.dim();
    if dataset.iter().any(|c| c.cloud.dim() != dim) {
        return Err(GsgwError::shape(
            "dataset clouds must share one ambient dimension",
        ));
    }
    let prepared = prepare(dataset, init.config().k)?;
    match run_training(&prepared, init, epochs, cfg, cfg.lr) {
        Ok(report) => Ok(report),
        Err(GsgwError::NumericFailure(first)) => {
            run_training(&prepared, init, epochs, cfg, cfg.lr / 10.0).map_err(|second| {
                GsgwError::OptimizationFailure(format!(
                    "training diverged at lr {} ({first}) and at lr {} ({second})",
                    cfg.lr,
                    cfg.lr / 10.0
                ))
            })
        }
        Err(other) => Err(other),
    }
}
