//! `gsgw amortized`: train, evaluate, or constraint-check the feed-forward
//! matcher.
//!
//! `amortized.mode` selects what to do:
//!
//! - `train` fits the matcher on a procedural labeled-shape pool (labels
//!   unused) and writes a checkpoint plus the loss trace;
//! - `eval` loads a checkpoint (or initializes fresh parameters when no
//!   checkpoint is given), measures label-transfer accuracy on held-out
//!   same-family pairs against the analytic random baseline, reports the
//!   structural-constraint deviations, and times one forward pass per pair
//!   next to a per-instance solver run on the same pair;
//! - `constraints` reports only the constraint deviations.
//!
//! The constraints are checked at the hard-plan limit: a self pair must
//! produce the scaled identity, swapping the inputs must transpose the
//! plan, rigid motions of either cloud must not change it, and permuting a
//! cloud must permute the matching rows. All four hold by construction, so
//! the deviations are round-off, trained or not.
//!
//! A checkpoint path may contain the placeholder `{seed}`, which is
//! substituted before resolving, so one config can address per-seed
//! checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use gsgw::amortized::{
    amortized_plan, init_matcher, label_transfer_accuracy, random_transfer_baseline,
    train_amortized, MatcherConfig, MatcherParams, TrainConfig,
};
use gsgw::geometry::sample_rigid;
use gsgw::measures::{build_cost_matrix, CostConvention, DiscreteMeasure, PointCloud};
use gsgw::slicers::{Activation, MlpSpec};
use gsgw::solver::{solve, MlpPairFactory, SolverConfig};
use gsgw::synth::{gaussian_cloud, labeled_shape, LabeledCloud, ShapeKind};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data;
use crate::error::{CliError, Result};
use crate::record::{self, ResultRecord};

const DIMS_ARRAY: &str = "matcher.dims";
const FLAT_ARRAY: &str = "matcher.flat";

pub fn save_matcher(path: &Path, params: &MatcherParams) -> Result<()> {
    let cfg = params.config();
    let mut ck = Checkpoint::new();
    ck.push(
        DIMS_ARRAY,
        vec![
            cfg.k as f64,
            cfg.token_dim as f64,
            cfg.latent_dim as f64,
            cfg.heads as f64,
            cfg.attention as u8 as f64,
        ],
    )?;
    ck.push(FLAT_ARRAY, params.flat().to_vec())?;
    ck.write(path)?;
    Ok(())
}

pub fn load_matcher(path: &Path) -> Result<MatcherParams> {
    let ck = Checkpoint::read(path)?;
    let dims = ck.require(DIMS_ARRAY)?;
    if dims.len() != 5 {
        return Err(CliError::from(gsgw::GsgwError::invalid(format!(
            "checkpoint dims array has {} entries, expected 5",
            dims.len()
        ))));
    }
    let config = MatcherConfig {
        k: dims[0] as usize,
        token_dim: dims[1] as usize,
        latent_dim: dims[2] as usize,
        heads: dims[3] as usize,
        attention: dims[4] != 0.0,
    };
    Ok(MatcherParams::from_flat(
        config,
        ck.require(FLAT_ARRAY)?.to_vec(),
    )?)
}

/// Worst deviation of each architectural constraint on seeded probe pairs,
/// measured on hard plans.
pub fn constraint_suite(
    params: &MatcherParams,
    seed: u64,
) -> Result<Vec<(&'static str, f64)>> {
    let k = params.config().k;
    let (n, m) = (k + 9, k + 14);
    let x = gaussian_cloud(n, 3, seed ^ 0x1d51)?;
    let y = gaussian_cloud(m, 3, seed ^ 0x2d52)?;

    let self_plan = amortized_plan(params, &x, &x, 0.0)?;
    let mut identity = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let want = if i == j { 1.0 / n as f64 } else { 0.0 };
            identity = identity.max((self_plan.plan().get(i, j) - want).abs());
        }
    }

    let fwd = amortized_plan(params, &x, &y, 0.0)?;
    let rev = amortized_plan(params, &y, &x, 0.0)?;
    let mut transpose = 0.0f64;
    for i in 0..n {
        for j in 0..m {
            transpose = transpose.max((fwd.plan().get(i, j) - rev.plan().get(j, i)).abs());
        }
    }

    let motion_x = sample_rigid(3, seed ^ 0x3d53, false)?;
    let motion_y = sample_rigid(3, seed ^ 0x4d54, false)?;
    let moved = amortized_plan(params, &motion_x.apply(&x)?, &motion_y.apply(&y)?, 0.0)?;
    let mut rigid = 0.0f64;
    for i in 0..n {
        for j in 0..m {
            rigid = rigid.max((fwd.plan().get(i, j) - moved.plan().get(i, j)).abs());
        }
    }

    let perm: Vec<usize> = (0..n).rev().collect();
    let permuted_points: Vec<Vec<f64>> = perm.iter().map(|&i| x.point(i).to_vec()).collect();
    let px = PointCloud::from_points(&permuted_points)?;
    let plan_px = amortized_plan(params, &px, &y, 0.0)?;
    let mut permutation = 0.0f64;
    for i in 0..n {
        for j in 0..m {
            permutation =
                permutation.max((plan_px.plan().get(i, j) - fwd.plan().get(perm[i], j)).abs());
        }
    }

    Ok(vec![
        ("identity", identity),
        ("transpose", transpose),
        ("rigid", rigid),
        ("permutation", permutation),
    ])
}

struct Settings {
    mode: String,
    matcher: MatcherConfig,
    checkpoint: Option<String>,
    kinds: Vec<ShapeKind>,
    per_kind: usize,
    sizes: Vec<usize>,
    data_seed: u64,
    steps: usize,
    train: TrainConfig,
    eval_pairs: usize,
    eval_seed: u64,
    ref_steps: usize,
}

/// Read the full key schema up front — every mode's keys are valid config,
/// whichever mode runs — so a config shared between a train run and a later
/// eval run passes the unknown-key check in both.
fn settings(cfg: &RunConfig) -> Result<Settings> {
    let mode = cfg.require("amortized.mode")?;
    if !matches!(mode.as_str(), "train" | "eval" | "constraints") {
        return Err(CliError::config(format!(
            "key amortized.mode: expected train, eval or constraints, got {mode:?}"
        )));
    }
    let matcher = MatcherConfig {
        k: cfg.parsed("amortized.k", 32usize)?,
        token_dim: cfg.parsed("amortized.token_dim", 32usize)?,
        latent_dim: cfg.parsed("amortized.latent_dim", 64usize)?,
        heads: cfg.parsed("amortized.heads", 1usize)?,
        attention: cfg.bool("amortized.attention", false)?,
    };
    let kinds = cfg
        .str_list("amortized.kinds", &["dumbbell", "lshape", "tripod"])
        .iter()
        .map(|s| data::shape_kind(s))
        .collect::<Result<Vec<_>>>()?;
    if kinds.is_empty() {
        return Err(CliError::config("amortized.kinds must not be empty"));
    }
    let sizes = cfg.list("amortized.sizes", &[64usize, 128])?;
    if sizes.is_empty() {
        return Err(CliError::config("amortized.sizes must not be empty"));
    }
    let steps = cfg.parsed("amortized.steps", 60usize)?;
    let train = TrainConfig {
        pairs_per_step: cfg.parsed("amortized.pairs_per_step", 4usize)?,
        lr: cfg.parsed("amortized.lr", 2e-3)?,
        warmup_steps: cfg.parsed("amortized.warmup", 10usize)?,
        grad_clip: cfg.parsed("amortized.grad_clip", 5.0)?,
        alpha_start: cfg.parsed("amortized.alpha_start", 0.05)?,
        alpha_end: cfg.parsed("amortized.alpha_end", 0.005)?,
        lambda: cfg.parsed("amortized.lambda", 0.5)?,
        seed: 0,
    };
    Ok(Settings {
        mode,
        matcher,
        checkpoint: cfg.opt_str("amortized.checkpoint"),
        kinds,
        per_kind: cfg.parsed("amortized.per_kind", 12usize)?,
        sizes,
        data_seed: cfg.parsed("amortized.data_seed", 300u64)?,
        steps,
        train,
        eval_pairs: cfg.parsed("amortized.eval_pairs", 50usize)?,
        eval_seed: cfg.parsed("amortized.eval_seed", 9000u64)?,
        ref_steps: cfg.parsed("amortized.ref_steps", 60usize)?,
    })
}

fn pool(s: &Settings) -> Result<Vec<LabeledCloud>> {
    let mut shapes = Vec::with_capacity(s.kinds.len() * s.per_kind);
    for (ki, &kind) in s.kinds.iter().enumerate() {
        for j in 0..s.per_kind {
            let n = s.sizes[j % s.sizes.len()];
            shapes.push(labeled_shape(
                kind,
                n,
                s.data_seed + ki as u64 * 1000 + j as u64,
            )?);
        }
    }
    Ok(shapes)
}

/// Held-out same-family pairs; sizes alternate so unequal-size matching is
/// exercised.
fn held_out_pairs(s: &Settings) -> Result<Vec<(LabeledCloud, LabeledCloud)>> {
    let mut pairs = Vec::with_capacity(s.eval_pairs);
    for e in 0..s.eval_pairs {
        let kind = s.kinds[e % s.kinds.len()];
        let n_a = s.sizes[e % s.sizes.len()];
        let n_b = s.sizes[(e + 1) % s.sizes.len()];
        let a = labeled_shape(kind, n_a, s.eval_seed + 2 * e as u64)?;
        let b = labeled_shape(kind, n_b, s.eval_seed + 2 * e as u64 + 1)?;
        pairs.push((a, b));
    }
    Ok(pairs)
}

fn checkpoint_path(s: &Settings, cfg: &RunConfig, out: &Path, seed: u64) -> PathBuf {
    match &s.checkpoint {
        Some(template) => cfg.resolve(&template.replace("{seed}", &seed.to_string())),
        None => out.join(format!("amortized_seed{seed}.ckpt")),
    }
}

pub fn run(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<ResultRecord>> {
    let s = settings(cfg)?;
    cfg.finish()?;
    let mut records = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let rec = match s.mode.as_str() {
            "train" => train_one(&s, cfg, out, seed)?,
            "eval" => eval_one(&s, cfg, out, seed, true)?,
            _ => eval_one(&s, cfg, out, seed, false)?,
        };
        record::append_log(out, &rec)?;
        records.push(rec);
    }
    Ok(records)
}

fn train_one(s: &Settings, cfg: &RunConfig, out: &Path, seed: u64) -> Result<ResultRecord> {
    let dataset = pool(s)?;
    let init = init_matcher(s.matcher, seed)?;
    let mut train_cfg = s.train.clone();
    train_cfg.seed = seed;
    let start = Instant::now();
    let report = train_amortized(&dataset, &init, s.steps, &train_cfg)?;
    let train_ms = record::ms(start.elapsed());

    let mut rec = ResultRecord::new("amortized", seed, cfg.hash());
    rec.metric("mode_train", 1.0);
    rec.metric("dataset_size", dataset.len() as f64);
    rec.metric("param_count", report.params.flat().len() as f64);
    rec.metric("steps", report.loss_trace.len() as f64);
    if let (Some(first), Some(last)) = (report.loss_trace.first(), report.loss_trace.last()) {
        rec.metric("loss_first", *first);
        rec.metric("loss_last", *last);
    }
    rec.timing("train_ms", train_ms);

    let ckpt = checkpoint_path(s, cfg, out, seed);
    save_matcher(&ckpt, &report.params)?;
    rec.artifact(&ckpt.display().to_string());

    let trace_name = format!("{}_trace.csv", rec.prefix());
    let rows: Vec<Vec<String>> = report
        .loss_trace
        .iter()
        .enumerate()
        .map(|(step, loss)| vec![step.to_string(), record::fmt(*loss)])
        .collect();
    record::write_csv(&out.join(&trace_name), &["step", "fused_loss"], &rows)?;
    rec.artifact(&trace_name);

    let summary_name = format!("{}_summary.json", rec.prefix());
    rec.artifact(&summary_name);
    record::write_json(&out.join(&summary_name), &rec)?;
    Ok(rec)
}

fn eval_one(
    s: &Settings,
    cfg: &RunConfig,
    out: &Path,
    seed: u64,
    with_transfer: bool,
) -> Result<ResultRecord> {
    let params = match &s.checkpoint {
        Some(_) => {
            let path = checkpoint_path(s, cfg, out, seed);
            data::require_file(&path)?;
            load_matcher(&path)?
        }
        None => init_matcher(s.matcher, seed)?,
    };

    let mut rec = ResultRecord::new("amortized", seed, cfg.hash());
    rec.metric("mode_train", 0.0);
    rec.metric("param_count", params.flat().len() as f64);
    for (name, dev) in constraint_suite(&params, s.eval_seed ^ seed)? {
        rec.metric(&format!("constraint_{name}_dev"), dev);
    }

    if with_transfer {
        let pairs = held_out_pairs(s)?;
        let mut rows = Vec::with_capacity(pairs.len());
        let mut acc_sum = 0.0;
        let mut base_sum = 0.0;
        let mut forward_ms = 0.0;
        for (idx, (a, b)) in pairs.iter().enumerate() {
            let start = Instant::now();
            let plan = amortized_plan(&params, &a.cloud, &b.cloud, 0.0)?;
            forward_ms += record::ms(start.elapsed());
            let acc = label_transfer_accuracy(&plan, &a.labels, &b.labels)?;
            let base = random_transfer_baseline(&a.labels, &b.labels)?;
            acc_sum += acc;
            base_sum += base;
            rows.push(vec![
                idx.to_string(),
                a.cloud.len().to_string(),
                b.cloud.len().to_string(),
                record::fmt(acc),
                record::fmt(base),
            ]);
        }
        let count = pairs.len() as f64;
        let accuracy = acc_sum / count;
        let baseline = base_sum / count;
        rec.metric("pairs", count);
        rec.metric("accuracy_mean", accuracy);
        rec.metric("baseline_mean", baseline);
        rec.metric("margin_pp", (accuracy - baseline) * 100.0);
        rec.timing("forward_ms_per_pair", forward_ms / count);

        // Per-instance optimization on the first pair, as the runtime
        // reference the amortized forward pass is traded against.
        let (a, b) = &pairs[0];
        let cx = build_cost_matrix(&a.cloud, CostConvention::SquaredDistance)?;
        let cy = build_cost_matrix(&b.cloud, CostConvention::SquaredDistance)?;
        let mu = DiscreteMeasure::uniform(a.cloud.clone());
        let nu = DiscreteMeasure::uniform(b.cloud.clone());
        let solver_cfg = SolverConfig::quick(s.ref_steps, 1, seed)?;
        let spec_f = MlpSpec {
            in_dim: 3,
            out_dim: 1,
            hidden_width: 32,
            depth: 2,
            activation: Activation::Tanh,
            rff_features: 16,
            rff_bandwidth: 1.0,
        };
        let factory = MlpPairFactory::new(3, 3, spec_f, MlpSpec::affine(3, 3));
        let start = Instant::now();
        let _ = solve(&mu, &nu, &cx, &cy, &solver_cfg, &factory)?;
        let solver_ms = record::ms(start.elapsed());
        rec.timing("solver_ms_reference", solver_ms);
        rec.timing("solver_over_forward", solver_ms / (forward_ms / count));

        let eval_name = format!("{}_eval.csv", rec.prefix());
        record::write_csv(
            &out.join(&eval_name),
            &["pair", "n_a", "n_b", "accuracy", "baseline"],
            &rows,
        )?;
        rec.artifact(&eval_name);
    }

    let summary_name = format!("{}_summary.json", rec.prefix());
    rec.artifact(&summary_name);
    record::write_json(&out.join(&summary_name), &rec)?;
    Ok(rec)
}
