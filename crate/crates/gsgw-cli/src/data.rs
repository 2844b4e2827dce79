//! Shared config-to-instance plumbing used by the commands.
//!
//! Commands describe their inputs with a handful of conventions: a pair of
//! `.npy` files, a named synthetic pair, or a labeled shape family; a
//! solver section holding step counts and learning rates; a scoring family
//! picking which slicer architecture to optimize. This module turns those
//! key groups into library values so the command modules stay thin.

use std::path::Path;

use gsgw::geometry::normalize_cloud;
use gsgw::measures::{CostConvention, PointCloud};
use gsgw::mesh_io::read_npy;
use gsgw::slicers::{Activation, MlpSpec};
use gsgw::softsort::{AnnealSchedule, AnnealShape};
use gsgw::solver::{
    IndependentLinearFactory, IndependentMlpFactory, LinearPairFactory, MlpPairFactory,
    OptimizerKind, ScoringFactory, SolverConfig,
};
use gsgw::synth::{self, ShapeKind, ToyPair};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Instance pair for `{section}.x`/`{section}.y` npy files or a named
/// `{section}.pair`. Omitting `y` matches `x` against itself. Normalization
/// (`{section}.normalize`) defaults to on except for the calibrated
/// `two_point` fixture, whose value lives in raw coordinates.
pub fn instance_pair(cfg: &RunConfig, section: &str) -> Result<(PointCloud, PointCloud)> {
    let x_path = cfg.path(&format!("{section}.x"));
    let y_path = cfg.path(&format!("{section}.y"));
    let pair = cfg.opt_str(&format!("{section}.pair"));
    let n = cfg.parsed(&format!("{section}.n"), 64usize)?;
    let d = cfg.parsed(&format!("{section}.d"), 3usize)?;
    let data_seed = cfg.parsed(&format!("{section}.data_seed"), 9u64)?;

    let (x, y, default_normalize) = match (&x_path, &pair) {
        (Some(_), Some(_)) => {
            return Err(CliError::config(format!(
                "{section}.x and {section}.pair are mutually exclusive"
            )));
        }
        (Some(xp), None) => {
            let x = read_npy(xp)?;
            let y = match &y_path {
                Some(yp) => read_npy(yp)?,
                None => x.clone(),
            };
            (x, y, true)
        }
        (None, Some(name)) => match name.as_str() {
            // Two segments whose squared lengths differ by 1; every plan
            // on two points scores exactly 1/2.
            "two_point" => (
                PointCloud::new(1, vec![0.0, std::f64::consts::SQRT_2])?,
                PointCloud::new(1, vec![0.0, 1.0])?,
                false,
            ),
            "self_gaussian" => {
                let g = synth::gaussian_cloud(n, d, data_seed)?;
                (g.clone(), g, true)
            }
            other => {
                let kind = toy_pair_kind(other)?;
                let (x, y) = synth::toy_pair(kind, n, data_seed)?;
                (x, y, true)
            }
        },
        (None, None) => {
            return Err(CliError::config(format!(
                "need {section}.x (npy) or {section}.pair (two_point, self_gaussian, \
                 circle_to_helix, s_curve_to_spiral, grid_to_saddle, segment_to_arc)"
            )));
        }
    };
    if cfg.bool(&format!("{section}.normalize"), default_normalize)? {
        Ok((normalize_cloud(&x)?, normalize_cloud(&y)?))
    } else {
        Ok((x, y))
    }
}

fn toy_pair_kind(name: &str) -> Result<ToyPair> {
    Ok(match name {
        "circle_to_helix" => ToyPair::CircleToHelix,
        "s_curve_to_spiral" => ToyPair::SCurveToSpiral,
        "grid_to_saddle" => ToyPair::GridToSaddle,
        "segment_to_arc" => ToyPair::SegmentToArc,
        other => {
            return Err(CliError::config(format!(
                "unknown pair {other:?}; expected two_point, self_gaussian, \
                 circle_to_helix, s_curve_to_spiral, grid_to_saddle or segment_to_arc"
            )));
        }
    })
}

pub fn shape_kind(name: &str) -> Result<ShapeKind> {
    Ok(match name {
        "dumbbell" => ShapeKind::Dumbbell,
        "lshape" => ShapeKind::LShape,
        "tripod" => ShapeKind::Tripod,
        other => {
            return Err(CliError::config(format!(
                "unknown shape {other:?}; expected dumbbell, lshape or tripod"
            )));
        }
    })
}

pub fn cost_convention(cfg: &RunConfig, key: &str) -> Result<CostConvention> {
    match cfg.str(key, "squared").as_str() {
        "squared" => Ok(CostConvention::SquaredDistance),
        "distance" => Ok(CostConvention::Distance),
        other => Err(CliError::config(format!(
            "key {key}: expected squared or distance, got {other:?}"
        ))),
    }
}

/// Solver settings under `{section}.steps`, `.lr`, `.restarts`, `.warmup`,
/// `.grad_clip`, `.weight_decay`, `.optimizer`, `.tau_start`, `.tau_end`.
pub fn solver_config(
    cfg: &RunConfig,
    section: &str,
    default_steps: usize,
    default_restarts: usize,
) -> Result<SolverConfig> {
    let steps = cfg.parsed(&format!("{section}.steps"), default_steps)?;
    let lr = cfg.parsed(&format!("{section}.lr"), 5e-3)?;
    let restarts = cfg.parsed(&format!("{section}.restarts"), default_restarts)?;
    let warmup = cfg.parsed(&format!("{section}.warmup"), (steps / 10).min(50))?;
    let grad_clip = cfg.parsed(&format!("{section}.grad_clip"), 1.0)?;
    let weight_decay = cfg.parsed(&format!("{section}.weight_decay"), 0.0)?;
    let optimizer = match cfg.str(&format!("{section}.optimizer"), "adam").as_str() {
        "adam" => OptimizerKind::Adam,
        "adamw" => OptimizerKind::AdamW,
        other => {
            return Err(CliError::config(format!(
                "key {section}.optimizer: expected adam or adamw, got {other:?}"
            )));
        }
    };
    let tau_start = cfg.parsed(&format!("{section}.tau_start"), 1.0)?;
    let tau_end = cfg.parsed(&format!("{section}.tau_end"), 0.1)?;
    let anneal = AnnealSchedule::new(tau_start, tau_end, steps.max(1), AnnealShape::Exponential)?;
    Ok(SolverConfig {
        steps,
        lr,
        optimizer,
        weight_decay,
        warmup_steps: warmup,
        grad_clip,
        restarts,
        anneal,
        seed: 0, // per-seed runs overwrite this
    })
}

/// Scoring model family under `{section}.family` plus MLP dimensions.
pub fn scoring_factory(
    cfg: &RunConfig,
    section: &str,
    p: usize,
    q: usize,
) -> Result<Box<dyn ScoringFactory>> {
    let family = cfg.str(&format!("{section}.family"), "mlp");
    let hidden = cfg.parsed(&format!("{section}.hidden"), 32usize)?;
    let depth = cfg.parsed(&format!("{section}.depth"), 2usize)?;
    let rff = cfg.parsed(&format!("{section}.rff"), 16usize)?;
    let bandwidth = cfg.parsed(&format!("{section}.bandwidth"), 1.0)?;
    let activation = match cfg.str(&format!("{section}.activation"), "tanh").as_str() {
        "tanh" => Activation::Tanh,
        "relu" => Activation::Relu,
        "gelu" => Activation::Gelu,
        other => {
            return Err(CliError::config(format!(
                "key {section}.activation: expected tanh, relu or gelu, got {other:?}"
            )));
        }
    };
    let slicer_spec = |in_dim: usize| MlpSpec {
        in_dim,
        out_dim: 1,
        hidden_width: hidden,
        depth,
        activation,
        rff_features: rff,
        rff_bandwidth: bandwidth,
    };
    Ok(match family.as_str() {
        "mlp" => Box::new(MlpPairFactory::new(p, q, slicer_spec(q), MlpSpec::affine(p, q))),
        "linear" => Box::new(LinearPairFactory { p, q }),
        "independent_mlp" => Box::new(IndependentMlpFactory {
            spec_fx: slicer_spec(p),
            spec_fy: slicer_spec(q),
        }),
        "independent_linear" => Box::new(IndependentLinearFactory { p, q }),
        other => {
            return Err(CliError::config(format!(
                "key {section}.family: expected mlp, linear, independent_mlp or \
                 independent_linear, got {other:?}"
            )));
        }
    })
}

/// Map a missing data file onto a parse error that names the path, so the
/// failure is attributed to the file rather than to a bare IO code.
pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::from(gsgw::GsgwError::Parse {
            path: path.display().to_string(),
            location: "-".into(),
            message: "file does not exist or is not readable".into(),
        }))
    }
}
