//! Per-instance minimization of the sliced GW loss.
//!
//! Each restart draws a fresh slicer/lifting pair, runs `steps` gradient
//! steps on the soft objective
//!
//!   L_tau(theta) = gw_loss(Cx, Cy, soft_plan(s(theta), t(theta), tau)),
//!
//! with tau annealed along the configured schedule, then extracts the hard
//! monotone plan from the final scores and evaluates the exact GW loss on
//! it. The loss is always evaluated on the original intra-space costs, never
//! on the projected values: the line only decides the ordering. Restart
//! selection uses the hard-plan loss (the soft loss can misrank near the
//! temperature floor); the hard plan is also extracted at initialization, so
//! a restart's reported loss is the better of its initial and trained plans
//! and training can never make the returned answer worse.
//!
//! A restart whose forward or backward pass produces non-finite values is
//! abandoned and recorded; the solve fails only if every restart diverges.
//! Restarts are independent — each owns a deterministic RNG stream derived
//! from the config seed — and run in parallel, with aggregation ordered by
//! restart index so results are identical either way.

use std::time::Instant;

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::error::{GsgwError, Result};
use crate::measures::{gw_loss, gw_loss_graph, CostMatrix, Coupling, DiscreteMeasure};
use crate::plan::hard_plan;
use crate::rng::Rng;
use crate::slicers::{
    init_model, init_slicer_pair, init_slicer_pair_with, linear_slicer_pair, pushforward_values,
    LiftInit, MlpSpec, SlicerModel, SlicerPair,
};
use crate::softsort::{anneal, soft_plan_graph, AnnealSchedule};
use crate::tensor::Tensor;

/// Magnitude of the tie-breaking jitter added to the projected scores at
/// every training step.
pub const SCORE_JITTER: f64 = 1e-9;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

/// First/second moment accumulators for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    kind: OptimizerKind,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamState {
    pub fn new(len: usize, kind: OptimizerKind, weight_decay: f64) -> AdamState {
        AdamState {
            kind,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Linear warmup to the base learning rate over `warmup_steps`.
pub fn warmup_lr(lr: f64, step: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        lr
    } else {
        lr * ((step + 1) as f64 / warmup_steps as f64).min(1.0)
    }
}

/// One optimizer step: global-norm clipping, Adam moments with bias
/// correction, and decoupled decay for AdamW.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr_t: f64,
    clip: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(GsgwError::shape(format!(
            "update over {} params with {} grads and state of {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(GsgwError::numeric("gradient contains NaN or Inf"));
    }
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    let scale = if norm > clip { clip / norm } else { 1.0 };
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i] * scale;
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let mut update = lr_t * m_hat / (v_hat.sqrt() + ADAM_EPS);
        if state.kind == OptimizerKind::AdamW {
            update += lr_t * state.weight_decay * params[i];
        }
        params[i] -= update;
    }
    Ok(())
}

/// Optimization hyperparameters for one solve.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub restarts: usize,
    pub anneal: AnnealSchedule,
    pub seed: u64,
}

impl SolverConfig {
    /// Small-instance defaults: Adam, warm start of a tenth of the run,
    /// unit-norm clipping, exponential temperature decay to 0.1.
    pub fn quick(steps: usize, restarts: usize, seed: u64) -> Result<SolverConfig> {
        Ok(SolverConfig {
            steps,
            lr: 5e-3,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            warmup_steps: (steps / 10).min(50),
            grad_clip: 1.0,
            restarts,
            anneal: AnnealSchedule::new(1.0, 0.1, steps.max(1), crate::softsort::AnnealShape::Exponential)?,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(GsgwError::invalid("learning rate must be finite and > 0"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(GsgwError::invalid("weight decay must be finite and >= 0"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(GsgwError::invalid("gradient clip must be finite and > 0"));
        }
        if self.warmup_steps > self.steps {
            return Err(GsgwError::invalid(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if self.restarts == 0 {
            return Err(GsgwError::invalid("need at least one restart"));
        }
        Ok(())
    }
}

/// What a restart optimizes: either a coupled pair (shared slicer through a
/// lifting) or two independent slicers, one per space.
#[derive(Debug, Clone)]
pub enum ScoringModel {
    Shared(SlicerPair),
    Independent { fx: SlicerModel, fy: SlicerModel },
}

impl ScoringModel {
    pub fn flat_params(&self) -> Vec<f64> {
        match self {
            ScoringModel::Shared(pair) => {
                let mut flat = pair.f().params().to_vec();
                flat.extend_from_slice(pair.h().params());
                flat
            }
            ScoringModel::Independent { fx, fy } => {
                let mut flat = fx.params().to_vec();
                flat.extend_from_slice(fy.params());
                flat
            }
        }
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        match self {
            ScoringModel::Shared(pair) => {
                let nf = pair.f().params().len();
                if flat.len() != nf + pair.h().params().len() {
                    return Err(GsgwError::shape("flat parameter length mismatch"));
                }
                pair.f_mut().set_params(flat[..nf].to_vec())?;
                pair.h_mut().set_params(flat[nf..].to_vec())
            }
            ScoringModel::Independent { fx, fy } => {
                let nx = fx.params().len();
                if flat.len() != nx + fy.params().len() {
                    return Err(GsgwError::shape("flat parameter length mismatch"));
                }
                fx.set_params(flat[..nx].to_vec())?;
                fy.set_params(flat[nx..].to_vec())
            }
        }
    }

    /// Scores off the tape, for hard-plan extraction.
    pub fn plain_scores(
        &self,
        x: &crate::measures::PointCloud,
        y: &crate::measures::PointCloud,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            ScoringModel::Shared(pair) => {
                let lifted = pair.h().forward_plain(&x.to_tensor())?;
                let s = pair.f().forward_plain(&lifted)?;
                let t = pair.f().forward_plain(&y.to_tensor())?;
                Ok((s.into_data(), t.into_data()))
            }
            ScoringModel::Independent { fx, fy } => {
                let s = fx.forward_plain(&x.to_tensor())?;
                let t = fy.forward_plain(&y.to_tensor())?;
                Ok((s.into_data(), t.into_data()))
            }
        }
    }

    /// Record score columns on the tape; returns the parameter leaves in
    /// flat-vector order plus the two score nodes.
    fn graph_scores(
        &self,
        tape: &mut Tape,
        x: &crate::measures::PointCloud,
        y: &crate::measures::PointCloud,
    ) -> Result<(Vec<crate::autodiff::Var>, crate::autodiff::Var, crate::autodiff::Var)> {
        match self {
            ScoringModel::Shared(pair) => {
                let graph = pushforward_values(pair, x, y, tape)?;
                Ok((vec![graph.f_params, graph.h_params], graph.s, graph.t))
            }
            ScoringModel::Independent { fx, fy } => {
                let fx_params = tape.leaf(Tensor::column(fx.params()), true);
                let fy_params = tape.leaf(Tensor::column(fy.params()), true);
                let x_in = tape.constant(x.to_tensor());
                let y_in = tape.constant(y.to_tensor());
                let s = fx.forward_graph(tape, fx_params, x_in)?;
                let t = fy.forward_graph(tape, fy_params, y_in)?;
                Ok((vec![fx_params, fy_params], s, t))
            }
        }
    }
}

/// Produces the model each restart starts from. Implementations must be
/// deterministic in `(restart, seed)`.
pub trait ScoringFactory: Sync {
    fn create(&self, restart: usize, seed: u64) -> Result<ScoringModel>;
}

/// MLP slicer through an MLP lifting; restart 0 can start the lifting at the
/// exact zero-padding embedding when the architecture allows it, so that
/// matching a cloud against itself begins at the diagonal plan.
#[derive(Debug, Clone)]
pub struct MlpPairFactory {
    pub p: usize,
    pub q: usize,
    pub spec_f: MlpSpec,
    pub spec_h: MlpSpec,
    pub identity_first: bool,
}

impl MlpPairFactory {
    pub fn new(p: usize, q: usize, spec_f: MlpSpec, spec_h: MlpSpec) -> MlpPairFactory {
        MlpPairFactory {
            p,
            q,
            spec_f,
            spec_h,
            identity_first: true,
        }
    }
}

impl ScoringFactory for MlpPairFactory {
    fn create(&self, restart: usize, seed: u64) -> Result<ScoringModel> {
        let embeddable = self.spec_h.depth == 1 && self.spec_h.rff_features == 0;
        let pair = if restart == 0 && self.identity_first && embeddable {
            init_slicer_pair_with(
                self.p,
                self.q,
                self.spec_f,
                self.spec_h,
                seed,
                LiftInit::IdentityEmbed,
            )?
        } else {
            init_slicer_pair(self.p, self.q, self.spec_f, self.spec_h, seed)?
        };
        Ok(ScoringModel::Shared(pair))
    }
}

/// Unit-norm linear slicer through the zero-padding embedding.
#[derive(Debug, Clone)]
pub struct LinearPairFactory {
    pub p: usize,
    pub q: usize,
}

impl ScoringFactory for LinearPairFactory {
    fn create(&self, _restart: usize, seed: u64) -> Result<ScoringModel> {
        Ok(ScoringModel::Shared(linear_slicer_pair(self.p, self.q, seed)?))
    }
}

/// Two independently initialized MLP slicers, no shared map.
#[derive(Debug, Clone)]
pub struct IndependentMlpFactory {
    pub spec_fx: MlpSpec,
    pub spec_fy: MlpSpec,
}

impl ScoringFactory for IndependentMlpFactory {
    fn create(&self, _restart: usize, seed: u64) -> Result<ScoringModel> {
        let mut rng = Rng::new(seed);
        let fx = init_model(self.spec_fx, rng.next_u64())?;
        let fy = init_model(self.spec_fy, rng.next_u64())?;
        Ok(ScoringModel::Independent { fx, fy })
    }
}

/// Two independently drawn unit-direction projections.
#[derive(Debug, Clone)]
pub struct IndependentLinearFactory {
    pub p: usize,
    pub q: usize,
}

impl ScoringFactory for IndependentLinearFactory {
    fn create(&self, _restart: usize, seed: u64) -> Result<ScoringModel> {
        let mut rng = Rng::new(seed);
        let mut fx = init_model(MlpSpec::affine(self.p, 1), rng.next_u64())?;
        let mut dir = rng.unit_vector(self.p);
        dir.push(0.0);
        fx.set_params(dir)?;
        let mut fy = init_model(MlpSpec::affine(self.q, 1), rng.next_u64())?;
        let mut dir = rng.unit_vector(self.q);
        dir.push(0.0);
        fy.set_params(dir)?;
        Ok(ScoringModel::Independent { fx, fy })
    }
}

/// Outcome of one restart.
#[derive(Debug, Clone)]
pub struct RestartReport {
    pub restart: usize,
    /// Hard-plan loss straight after initialization.
    pub hard_loss_init: f64,
    /// Hard-plan loss after training; absent if the restart diverged.
    pub hard_loss_final: Option<f64>,
    /// The loss this restart achieved: min of the evaluated hard plans, or
    /// infinity if it diverged.
    pub achieved: f64,
    pub diverged: bool,
    pub steps_run: usize,
}

/// Best plan over all restarts plus per-restart diagnostics.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub best_plan: Coupling,
    /// Exact GW loss of `best_plan`.
    pub best_loss: f64,
    pub best_restart: usize,
    /// Trained model of the winning restart.
    pub best_model: ScoringModel,
    /// Per-step soft losses of the winning restart.
    pub loss_trace: Vec<f64>,
    /// Achieved hard-plan loss per restart (infinity for diverged ones).
    pub restart_losses: Vec<f64>,
    pub reports: Vec<RestartReport>,
    /// Total optimization time across restarts, excluding plan extraction.
    pub train_ms: f64,
    /// Total hard-plan extraction and evaluation time across restarts.
    pub extract_ms: f64,
}

struct RestartRun {
    report: RestartReport,
    candidate: Option<(f64, Coupling, ScoringModel)>,
    trace: Vec<f64>,
    train_ms: f64,
    extract_ms: f64,
}

fn hard_eval(
    model: &ScoringModel,
    x: &crate::measures::PointCloud,
    y: &crate::measures::PointCloud,
    cx: &CostMatrix,
    cy: &CostMatrix,
) -> Result<(Coupling, f64)> {
    let (s, t) = model.plain_scores(x, y)?;
    let plan = hard_plan(&s, &t)?;
    let loss = gw_loss(cx, cy, &plan)?;
    Ok((plan, loss))
}

fn train_step(
    model: &ScoringModel,
    x: &crate::measures::PointCloud,
    y: &crate::measures::PointCloud,
    cx: &CostMatrix,
    cy: &CostMatrix,
    tau: f64,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let (param_vars, s, t) = model.graph_scores(&mut tape, x, y)?;
    let jit_s = Tensor::column(
        &(0..x.len())
            .map(|_| rng.uniform_in(-SCORE_JITTER, SCORE_JITTER))
            .collect::<Vec<_>>(),
    );
    let jit_t = Tensor::column(
        &(0..y.len())
            .map(|_| rng.uniform_in(-SCORE_JITTER, SCORE_JITTER))
            .collect::<Vec<_>>(),
    );
    let jit_s = tape.constant(jit_s);
    let jit_t = tape.constant(jit_t);
    let s = tape.add(s, jit_s)?;
    let t = tape.add(t, jit_t)?;
    let pi = soft_plan_graph(&mut tape, s, t, tau)?;
    let loss = gw_loss_graph(&mut tape, cx, cy, pi)?;
    let value = tape.value(loss).scalar_value()?;
    let grads = tape.backward(loss)?;
    let mut flat = Vec::new();
    for var in param_vars {
        match grads.get(var) {
            Some(g) => flat.extend_from_slice(g.data()),
            None => flat.extend(std::iter::repeat(0.0).take(tape.value(var).len())),
        }
    }
    Ok((value, flat))
}

fn run_restart(
    restart: usize,
    factory: &dyn ScoringFactory,
    x: &crate::measures::PointCloud,
    y: &crate::measures::PointCloud,
    cx: &CostMatrix,
    cy: &CostMatrix,
    cfg: &SolverConfig,
) -> Result<RestartRun> {
    let mut rng = Rng::with_stream(cfg.seed, restart as u64);
    let init_seed = rng.next_u64();
    let mut model = factory.create(restart, init_seed)?;

    let extract_start = Instant::now();
    let init_eval = match hard_eval(&model, x, y, cx, cy) {
        Ok(pair) => Some(pair),
        Err(GsgwError::NumericFailure(_)) => None,
        Err(e) => return Err(e),
    };
    let mut extract_ms = extract_start.elapsed().as_secs_f64() * 1e3;

    let hard_loss_init = init_eval.as_ref().map_or(f64::INFINITY, |(_, l)| *l);
    let mut best: Option<(f64, Coupling, ScoringModel)> = init_eval
        .map(|(plan, loss)| (loss, plan, model.clone()));

    let mut trace = Vec::with_capacity(cfg.steps);
    let mut state = AdamState::new(
        model.flat_params().len(),
        cfg.optimizer,
        cfg.weight_decay,
    );
    let mut diverged = init_eval_is_none(&best);
    let mut steps_run = 0;

    let train_start = Instant::now();
    if !diverged {
        for step in 0..cfg.steps {
            let tau = anneal(&cfg.anneal, step.min(cfg.anneal.steps - 1))?;
            let outcome = (|| -> Result<()> {
                let (value, grad) = train_step(&model, x, y, cx, cy, tau, &mut rng)?;
                trace.push(value);
                let mut flat = model.flat_params();
                let lr_t = warmup_lr(cfg.lr, step, cfg.warmup_steps);
                adam_step(&mut flat, &grad, &mut state, lr_t, cfg.grad_clip)?;
                model.set_flat_params(&flat)?;
                Ok(())
            })();
            match outcome {
                Ok(()) => steps_run += 1,
                Err(GsgwError::NumericFailure(_)) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    let train_ms = train_start.elapsed().as_secs_f64() * 1e3;

    let mut hard_loss_final = None;
    if !diverged {
        let extract_start = Instant::now();
        match hard_eval(&model, x, y, cx, cy) {
            Ok((plan, loss)) => {
                hard_loss_final = Some(loss);
                if best.as_ref().map_or(true, |(b, _, _)| loss < *b) {
                    best = Some((loss, plan, model.clone()));
                }
            }
            Err(GsgwError::NumericFailure(_)) => diverged = true,
            Err(e) => return Err(e),
        }
        extract_ms += extract_start.elapsed().as_secs_f64() * 1e3;
    }

    let candidate = if diverged { None } else { best };
    let achieved = candidate.as_ref().map_or(f64::INFINITY, |(l, _, _)| *l);
    Ok(RestartRun {
        report: RestartReport {
            restart,
            hard_loss_init,
            hard_loss_final,
            achieved,
            diverged,
            steps_run,
        },
        candidate,
        trace,
        train_ms,
        extract_ms,
    })
}

fn init_eval_is_none(best: &Option<(f64, Coupling, ScoringModel)>) -> bool {
    best.is_none()
}

/// Minimize the sliced GW loss between two uniformly weighted measures.
pub fn solve(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cx: &CostMatrix,
    cy: &CostMatrix,
    cfg: &SolverConfig,
    factory: &dyn ScoringFactory,
) -> Result<SolveResult> {
    cfg.validate()?;
    if !mu.is_uniform(1e-9) || !nu.is_uniform(1e-9) {
        return Err(GsgwError::UnsupportedMarginals(
            "slicer-induced plans require uniform weights".into(),
        ));
    }
    if cx.n() != mu.len() || cy.n() != nu.len() {
        return Err(GsgwError::shape(format!(
            "costs are {}x{} and {}x{} for {} and {} points",
            cx.n(),
            cx.n(),
            cy.n(),
            cy.n(),
            mu.len(),
            nu.len()
        )));
    }
    let x = mu.support();
    let y = nu.support();

    let runs: Result<Vec<RestartRun>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| run_restart(r, factory, x, y, cx, cy, cfg))
        .collect();
    let runs = runs?;

    let restart_losses: Vec<f64> = runs.iter().map(|r| r.report.achieved).collect();
    let mut best_idx = None;
    for (i, run) in runs.iter().enumerate() {
        if run.candidate.is_some()
            && best_idx.map_or(true, |j: usize| {
                runs[i].report.achieved < runs[j].report.achieved
            })
        {
            best_idx = Some(i);
        }
    }
    let Some(best_idx) = best_idx else {
        return Err(GsgwError::OptimizationFailure(format!(
            "all {} restarts diverged",
            cfg.restarts
        )));
    };

    let train_ms = runs.iter().map(|r| r.train_ms).sum();
    let extract_ms = runs.iter().map(|r| r.extract_ms).sum();
    let reports: Vec<RestartReport> = runs.iter().map(|r| r.report.clone()).collect();
    let mut runs = runs;
    let winner = runs.swap_remove(best_idx);
    let (best_loss, best_plan, best_model) = winner.candidate.unwrap();

    Ok(SolveResult {
        best_plan,
        best_loss,
        best_restart: best_idx,
        best_model,
        loss_trace: winner.trace,
        restart_losses,
        reports,
        train_ms,
        extract_ms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlicerFamily {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairRelation {
    /// Shared slicer composed with a lifting.
    Dependent,
    /// Separate slicers per space.
    Independent,
}

/// One cell of the 2x2 slicer-family / pairing ablation.
pub struct AblationCell {
    pub family: SlicerFamily,
    pub relation: PairRelation,
    pub result: SolveResult,
}

/// Run the four-cell ablation: {linear, nonlinear} x {dependent,
/// independent}, all under the same optimizer configuration. The
/// nonlinear+dependent cell is exactly [`solve`] with an [`MlpPairFactory`].
pub fn ablation_grid(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cx: &CostMatrix,
    cy: &CostMatrix,
    cfg: &SolverConfig,
    spec_f: MlpSpec,
    spec_h: MlpSpec,
) -> Result<Vec<AblationCell>> {
    let p = mu.support().dim();
    let q = nu.support().dim();
    let spec_fx = MlpSpec {
        in_dim: p,
        ..spec_f
    };
    let cells: Vec<(SlicerFamily, PairRelation, Box<dyn ScoringFactory>)> = vec![
        (
            SlicerFamily::Nonlinear,
            PairRelation::Dependent,
            Box::new(MlpPairFactory::new(p, q, spec_f, spec_h)),
        ),
        (
            SlicerFamily::Nonlinear,
            PairRelation::Independent,
            Box::new(IndependentMlpFactory {
                spec_fx,
                spec_fy: spec_f,
            }),
        ),
        (
            SlicerFamily::Linear,
            PairRelation::Dependent,
            Box::new(LinearPairFactory { p, q }),
        ),
        (
            SlicerFamily::Linear,
            PairRelation::Independent,
            Box::new(IndependentLinearFactory { p, q }),
        ),
    ];
    let mut results = Vec::with_capacity(4);
    for (family, relation, factory) in cells {
        let result = solve(mu, nu, cx, cy, cfg, factory.as_ref())?;
        results.push(AblationCell {
            family,
            relation,
            result,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::measures::{build_cost_matrix, CostConvention, PointCloud};
    use crate::slicers::Activation;

    fn cloud(rng: &mut Rng, n: usize, d: usize) -> PointCloud {
        PointCloud::new(d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    fn small_f(q: usize) -> MlpSpec {
        MlpSpec {
            in_dim: q,
            out_dim: 1,
            hidden_width: 12,
            depth: 2,
            activation: Activation::Gelu,
            rff_features: 8,
            rff_bandwidth: 1.0,
        }
    }

    fn instance(
        rng: &mut Rng,
        n: usize,
        m: usize,
        p: usize,
        q: usize,
    ) -> (DiscreteMeasure, DiscreteMeasure, CostMatrix, CostMatrix) {
        let x = cloud(rng, n, p);
        let y = cloud(rng, m, q);
        let cx = build_cost_matrix(&x, CostConvention::SquaredDistance).unwrap();
        let cy = build_cost_matrix(&y, CostConvention::SquaredDistance).unwrap();
        (
            DiscreteMeasure::uniform(x),
            DiscreteMeasure::uniform(y),
            cx,
            cy,
        )
    }

    #[test]
    fn adam_zero_gradient_behaviour() {
        let mut params = vec![1.0, -2.0];
        let mut state = AdamState::new(2, OptimizerKind::Adam, 0.0);
        adam_step(&mut params, &[0.0, 0.0], &mut state, 0.1, 1.0).unwrap();
        assert_eq!(params, vec![1.0, -2.0]);

        let mut params = vec![1.0, -2.0];
        let mut state = AdamState::new(2, OptimizerKind::AdamW, 0.1);
        adam_step(&mut params, &[0.0, 0.0], &mut state, 0.1, 1.0).unwrap();
        assert!((params[0] - (1.0 - 0.1 * 0.1)).abs() < 1e-15);
        assert!((params[1] + 2.0 * (1.0 - 0.1 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn gradient_clipping_scales_by_global_norm() {
        // One component of norm 10 under clip 1.0 enters the moments as 1.0.
        let mut params = vec![0.0];
        let mut state = AdamState::new(1, OptimizerKind::Adam, 0.0);
        adam_step(&mut params, &[10.0], &mut state, 1.0, 1.0).unwrap();
        assert!((state.m[0] - 0.1 * 1.0).abs() < 1e-15);
        assert!((state.v[0] - 0.001 * 1.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_ramps_linearly() {
        assert!((warmup_lr(1.0, 0, 50) - 1.0 / 50.0).abs() < 1e-15);
        assert!((warmup_lr(1.0, 24, 50) - 0.5).abs() < 1e-15);
        assert_eq!(warmup_lr(1.0, 49, 50), 1.0);
        assert_eq!(warmup_lr(1.0, 200, 50), 1.0);
        assert_eq!(warmup_lr(0.5, 0, 0), 0.5);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut params = vec![0.0];
        let mut state = AdamState::new(1, OptimizerKind::Adam, 0.0);
        assert!(adam_step(&mut params, &[f64::NAN], &mut state, 0.1, 1.0).is_err());
    }

    #[test]
    fn self_matching_reaches_zero() {
        let mut rng = Rng::new(90);
        let x = cloud(&mut rng, 8, 3);
        let cx = build_cost_matrix(&x, CostConvention::SquaredDistance).unwrap();
        let mu = DiscreteMeasure::uniform(x);
        let cfg = SolverConfig::quick(25, 2, 7).unwrap();
        let factory = MlpPairFactory::new(3, 3, small_f(3), MlpSpec::affine(3, 3));
        let result = solve(&mu, &mu, &cx, &cx, &cfg, &factory).unwrap();
        assert!(result.best_loss <= 1e-6, "loss {}", result.best_loss);
    }

    #[test]
    fn two_point_instance_hits_half() {
        let x = PointCloud::new(1, vec![0.0, 1.0]).unwrap();
        let y = PointCloud::new(1, vec![0.0, 2.0]).unwrap();
        let cx = CostMatrix::new(
            Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
            CostConvention::Distance,
        )
        .unwrap();
        let cy = CostMatrix::new(
            Tensor::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap(),
            CostConvention::Distance,
        )
        .unwrap();
        let cfg = SolverConfig::quick(10, 1, 3).unwrap();
        let factory = MlpPairFactory::new(1, 1, small_f(1), MlpSpec::affine(1, 1));
        let result = solve(
            &DiscreteMeasure::uniform(x),
            &DiscreteMeasure::uniform(y),
            &cx,
            &cy,
            &cfg,
            &factory,
        )
        .unwrap();
        assert!((result.best_loss - 0.5).abs() <= 1e-9, "loss {}", result.best_loss);
    }

    #[test]
    fn identical_configs_reproduce_identical_runs() {
        let mut rng = Rng::new(31);
        let (mu, nu, cx, cy) = instance(&mut rng, 6, 9, 2, 3);
        let cfg = SolverConfig::quick(12, 2, 11).unwrap();
        let factory = MlpPairFactory::new(2, 3, small_f(3), MlpSpec::affine(2, 3));
        let a = solve(&mu, &nu, &cx, &cy, &cfg, &factory).unwrap();
        let b = solve(&mu, &nu, &cx, &cy, &cfg, &factory).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.best_plan.plan().data(), b.best_plan.plan().data());
        assert_eq!(a.best_loss.to_bits(), b.best_loss.to_bits());
        assert_eq!(a.best_restart, b.best_restart);
    }

    #[test]
    fn unequal_sizes_give_feasible_plans() {
        let mut rng = Rng::new(52);
        let (mu, nu, cx, cy) = instance(&mut rng, 5, 8, 2, 3);
        let cfg = SolverConfig::quick(15, 2, 5).unwrap();
        let factory = MlpPairFactory::new(2, 3, small_f(3), MlpSpec::affine(2, 3));
        let result = solve(&mu, &nu, &cx, &cy, &cfg, &factory).unwrap();
        assert_eq!(result.best_plan.shape(), (5, 8));
        assert!(result.best_plan.marginal_deviation() <= 1e-12);
        assert!(result.best_loss.is_finite());
        assert_eq!(result.loss_trace.len(), 15);
    }

    #[test]
    fn non_uniform_weights_are_rejected() {
        let mut rng = Rng::new(4);
        let x = cloud(&mut rng, 3, 2);
        let cx = build_cost_matrix(&x, CostConvention::SquaredDistance).unwrap();
        let mu = DiscreteMeasure::new(x.clone(), vec![0.5, 0.25, 0.25]).unwrap();
        let nu = DiscreteMeasure::uniform(x);
        let cfg = SolverConfig::quick(5, 1, 1).unwrap();
        let factory = MlpPairFactory::new(2, 2, small_f(2), MlpSpec::affine(2, 2));
        let err = solve(&mu, &nu, &cx, &cx, &cfg, &factory).unwrap_err();
        assert!(matches!(err, GsgwError::UnsupportedMarginals(_)));
    }

    #[test]
    fn runaway_learning_rate_counts_as_divergence() {
        let mut rng = Rng::new(77);
        let (mu, nu, cx, cy) = instance(&mut rng, 4, 4, 2, 2);
        let mut cfg = SolverConfig::quick(40, 2, 9).unwrap();
        cfg.lr = 1e305;
        cfg.grad_clip = 1e308;
        let factory = MlpPairFactory::new(2, 2, small_f(2), MlpSpec::affine(2, 2));
        // Identity-first restart keeps its init plan; with huge lr the
        // training itself diverges, so the result must come from an init
        // evaluation, not a trained model.
        match solve(&mu, &nu, &cx, &cy, &cfg, &factory) {
            Ok(result) => {
                assert!(result.reports.iter().any(|r| r.diverged));
                assert!(result.best_loss.is_finite());
            }
            Err(GsgwError::OptimizationFailure(_)) => {}
            Err(e) => panic!("unexpected error {e:?}"),
        }
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let mut rng = Rng::new(63);
        let x = cloud(&mut rng, 8, 2);
        let y = cloud(&mut rng, 8, 3);
        let cx = build_cost_matrix(&x, CostConvention::SquaredDistance).unwrap();
        let cy = build_cost_matrix(&y, CostConvention::SquaredDistance).unwrap();
        let spec_f = MlpSpec {
            hidden_width: 6,
            rff_features: 4,
            activation: Activation::Tanh,
            ..small_f(3)
        };
        let base = match MlpPairFactory::new(2, 3, spec_f, MlpSpec::affine(2, 3))
            .create(1, 77)
            .unwrap()
        {
            ScoringModel::Shared(pair) => pair,
            _ => unreachable!(),
        };
        let tau = 0.5;

        let eval = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut model = ScoringModel::Shared(base.clone());
            model.set_flat_params(theta)?;
            let ScoringModel::Shared(pair) = &model else {
                unreachable!()
            };
            let mut tape = Tape::new();
            let graph = pushforward_values(pair, &x, &y, &mut tape)?;
            let pi = soft_plan_graph(&mut tape, graph.s, graph.t, tau)?;
            let loss = gw_loss_graph(&mut tape, &cx, &cy, pi)?;
            let value = tape.value(loss).scalar_value()?;
            let grads = tape.backward(loss)?;
            let mut flat = grads.get(graph.f_params).unwrap().data().to_vec();
            flat.extend_from_slice(grads.get(graph.h_params).unwrap().data());
            Ok((value, flat))
        };

        let theta = ScoringModel::Shared(base.clone()).flat_params();
        let (_, analytic) = eval(&theta).unwrap();
        let err = grad_check(|p| eval(p).map(|(v, _)| v), &theta, &analytic, 1e-5).unwrap();
        assert!(err <= 1e-4, "gradient error {err}");
    }

    #[test]
    fn rigid_motions_leave_plan_and_loss_unchanged() {
        let mut rng = Rng::new(101);
        let x = cloud(&mut rng, 7, 3);
        let y = cloud(&mut rng, 7, 3);
        let cx = build_cost_matrix(&x, CostConvention::SquaredDistance).unwrap();
        let cy = build_cost_matrix(&y, CostConvention::SquaredDistance).unwrap();
        let cfg = SolverConfig::quick(15, 1, 13).unwrap();
        let factory = MlpPairFactory::new(3, 3, small_f(3), MlpSpec::affine(3, 3));
        let result = solve(
            &DiscreteMeasure::uniform(x.clone()),
            &DiscreteMeasure::uniform(y.clone()),
            &cx,
            &cy,
            &cfg,
            &factory,
        )
        .unwrap();
        let ScoringModel::Shared(pair) = &result.best_model else {
            unreachable!()
        };

        let rot_x = random_rotation(3, &mut rng);
        let shift_x = vec![1.0, -0.5, 0.25];
        let rot_y = random_rotation(3, &mut rng);
        let shift_y = vec![-2.0, 0.75, 0.1];

        // Transformed evaluation: analytically undo the motions before the
        // networks, exactly as the composed pair (f o g_Y^-1, g_Y o h o
        // g_X^-1) would.
        let apply = |cloud: &PointCloud, rot: &Tensor, shift: &[f64]| -> Tensor {
            let rows: Vec<Vec<f64>> = cloud
                .iter()
                .map(|pt| {
                    (0..3)
                        .map(|r| shift[r] + (0..3).map(|c| rot.get(r, c) * pt[c]).sum::<f64>())
                        .collect()
                })
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let unapply = |points: &Tensor, rot: &Tensor, shift: &[f64]| -> Tensor {
            let rows: Vec<Vec<f64>> = (0..points.rows())
                .map(|i| {
                    (0..3)
                        .map(|r| {
                            (0..3)
                                .map(|c| rot.get(c, r) * (points.get(i, c) - shift[c]))
                                .sum::<f64>()
                        })
                        .collect()
                })
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };

        let moved_x = apply(&x, &rot_x, &shift_x);
        let moved_y = apply(&y, &rot_y, &shift_y);
        let x_back = unapply(&moved_x, &rot_x, &shift_x);
        let lifted = pair.h().forward_plain(&x_back).unwrap();
        let round_trip = {
            let as_cloud = PointCloud::new(3, lifted.data().to_vec()).unwrap();
            let fwd = apply(&as_cloud, &rot_y, &shift_y);
            unapply(&fwd, &rot_y, &shift_y)
        };
        let s2 = pair.f().forward_plain(&round_trip).unwrap().into_data();
        let y_back = unapply(&moved_y, &rot_y, &shift_y);
        let t2 = pair.f().forward_plain(&y_back).unwrap().into_data();

        let plan2 = hard_plan(&s2, &t2).unwrap();
        assert_eq!(plan2.plan().data(), result.best_plan.plan().data());
        let loss2 = gw_loss(&cx, &cy, &plan2).unwrap();
        assert!((loss2 - result.best_loss).abs() <= 1e-10);
    }

    #[test]
    fn ablation_grid_produces_four_consistent_cells() {
        let mut rng = Rng::new(5);
        let (mu, nu, cx, cy) = instance(&mut rng, 6, 6, 2, 3);
        let cfg = SolverConfig::quick(10, 1, 21).unwrap();
        let cells =
            ablation_grid(&mu, &nu, &cx, &cy, &cfg, small_f(3), MlpSpec::affine(2, 3)).unwrap();
        assert_eq!(cells.len(), 4);
        for cell in &cells {
            assert!(cell.result.best_loss.is_finite());
            assert!(cell.result.best_plan.marginal_deviation() <= 1e-12);
        }
        let main = solve(
            &mu,
            &nu,
            &cx,
            &cy,
            &cfg,
            &MlpPairFactory::new(2, 3, small_f(3), MlpSpec::affine(2, 3)),
        )
        .unwrap();
        let corner = &cells[0];
        assert_eq!(corner.family, SlicerFamily::Nonlinear);
        assert_eq!(corner.relation, PairRelation::Dependent);
        assert_eq!(corner.result.best_loss.to_bits(), main.best_loss.to_bits());
    }

    fn random_rotation(d: usize, rng: &mut Rng) -> Tensor {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= dot * bi;
                }
            }
            let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for vi in v.iter_mut() {
                    *vi /= norm;
                }
                basis.push(v);
            }
        }
        Tensor::from_rows(&basis).unwrap()
    }
}
