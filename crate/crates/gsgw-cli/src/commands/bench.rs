//! `gsgw bench`: wall-clock timing of the core operations over size grids.
//!
//! Cells are (operation, size); each cell runs `bench.warmup` throwaway
//! repetitions followed by `bench.reps` timed ones and reports their mean
//! and standard deviation in a CSV. Setup — drawing scores, building cost
//! matrices — happens outside the timed region, and nothing in the loop
//! touches a file, so the numbers measure the operation alone. The timed
//! operations: sparse hard-plan extraction from raw scores (the sorting
//! path whose near-linear growth the doubling ratio in the timings block
//! summarizes), one soft-plan evaluation, the decomposed GW loss, and the
//! reference methods on small instances. Deterministic byproducts (losses,
//! plan sizes) land in the metrics block; everything measured lands in
//! timings, where reruns legitimately differ.

use std::hint::black_box;
use std::path::Path;
use std::time::Instant;

use gsgw::baselines::{frank_wolfe_gw, sgw, sinkhorn_gw, SgwConfig, SgwMode};
use gsgw::measures::{build_cost_matrix, gw_loss, CostConvention, DiscreteMeasure};
use gsgw::plan::hard_plan_sparse;
use gsgw::rng::Rng;
use gsgw::softsort::soft_plan;
use gsgw::synth::gaussian_cloud;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::record::{self, ResultRecord};

struct Cell {
    op: &'static str,
    n: usize,
    m: usize,
    reps: usize,
    mean_ms: f64,
    std_ms: f64,
}

impl Cell {
    fn csv(&self) -> Vec<String> {
        vec![
            self.op.to_string(),
            self.n.to_string(),
            self.m.to_string(),
            self.reps.to_string(),
            record::fmt(self.mean_ms),
            record::fmt(self.std_ms),
        ]
    }
}

fn time_cell(reps: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        samples.push(record::ms(start.elapsed()));
    }
    let mean = samples.iter().sum::<f64>() / reps as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / reps as f64;
    Ok((mean, var.sqrt()))
}

fn scores(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = Rng::new(seed);
    let s = (0..n).map(|_| rng.uniform()).collect();
    let t = (0..n).map(|_| rng.uniform()).collect();
    (s, t)
}

/// Growth per size doubling, inferred from one measured ratio: for sizes
/// (n_a, n_b) and times (t_a, t_b) this is (t_b/t_a)^(log 2 / log(n_b/n_a)),
/// so 2 means linear growth and 4 means quadratic.
fn doubling_ratio(n_a: usize, t_a: f64, n_b: usize, t_b: f64) -> f64 {
    (t_b / t_a).powf(std::f64::consts::LN_2 / (n_b as f64 / n_a as f64).ln())
}

pub fn run(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<ResultRecord>> {
    let sizes = cfg.list("bench.sizes", &[10_000usize, 100_000, 1_000_000])?;
    let soft_sizes = cfg.list("bench.soft_sizes", &[64usize, 128, 256])?;
    let loss_sizes = cfg.list("bench.loss_sizes", &[100usize, 200, 400])?;
    let baseline_sizes = cfg.list("bench.baseline_sizes", &[100usize, 200])?;
    let reps = cfg.parsed("bench.reps", 10usize)?;
    let warmup = cfg.parsed("bench.warmup", 2usize)?;
    let ops = cfg.str_list("bench.ops", &["extract", "soft", "gw_loss", "sinkhorn", "fw", "sgw"]);
    let fw_iters = cfg.parsed("bench.fw_iters", 10usize)?;
    let sk_eps = cfg.parsed("bench.sinkhorn_eps", 0.5f64)?;
    let sk_outer = cfg.parsed("bench.sinkhorn_outer", 5usize)?;
    let sk_inner = cfg.parsed("bench.sinkhorn_inner", 50usize)?;
    let sgw_directions = cfg.parsed("bench.sgw_directions", 50usize)?;
    let tau = cfg.parsed("bench.tau", 0.5f64)?;
    cfg.finish()?;
    if reps == 0 {
        return Err(CliError::config("bench.reps must be at least 1"));
    }
    for op in &ops {
        if !matches!(op.as_str(), "extract" | "soft" | "gw_loss" | "sinkhorn" | "fw" | "sgw") {
            return Err(CliError::config(format!(
                "key bench.ops: unknown op {op:?}; expected extract, soft, gw_loss, \
                 sinkhorn, fw or sgw"
            )));
        }
    }

    let mut records = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rec = ResultRecord::new("bench", seed, cfg.hash());
        let mut cells: Vec<Cell> = Vec::new();

        if ops.iter().any(|o| o == "extract") {
            for &n in &sizes {
                let (s, t) = scores(n, seed ^ n as u64);
                let mut nnz = 0usize;
                let (mean, std) = time_cell(reps, warmup, || {
                    let plan = hard_plan_sparse(black_box(&s), black_box(&t))?;
                    nnz = black_box(plan.len());
                    Ok(())
                })?;
                rec.metric(&format!("extract_nnz_n{n}"), nnz as f64);
                rec.timing(&format!("extract_n{n}_ms"), mean);
                cells.push(Cell { op: "extract", n, m: n, reps, mean_ms: mean, std_ms: std });
            }
            let extract: Vec<&Cell> = cells.iter().filter(|c| c.op == "extract").collect();
            let worst = extract
                .windows(2)
                .map(|w| doubling_ratio(w[0].n, w[0].mean_ms, w[1].n, w[1].mean_ms))
                .fold(f64::NEG_INFINITY, f64::max);
            if worst.is_finite() {
                rec.timing("extract_doubling_ratio", worst);
            }
        }

        if ops.iter().any(|o| o == "soft") {
            for &n in &soft_sizes {
                let (s, t) = scores(n, seed ^ (n as u64).rotate_left(17));
                let (mean, std) = time_cell(reps, warmup, || {
                    black_box(soft_plan(black_box(&s), black_box(&t), tau)?);
                    Ok(())
                })?;
                rec.timing(&format!("soft_n{n}_ms"), mean);
                cells.push(Cell { op: "soft", n, m: n, reps, mean_ms: mean, std_ms: std });
            }
        }

        if ops.iter().any(|o| o == "gw_loss") {
            for &n in &loss_sizes {
                let x = gaussian_cloud(n, 3, seed ^ 0xa5a5)?;
                let y = gaussian_cloud(n, 3, seed ^ 0x5a5a)?;
                let cx = build_cost_matrix(&x, CostConvention::SquaredDistance)?;
                let cy = build_cost_matrix(&y, CostConvention::SquaredDistance)?;
                let (s, t) = scores(n, seed ^ 77);
                let pi = gsgw::plan::hard_plan(&s, &t)?;
                let mut loss = 0.0;
                let (mean, std) = time_cell(reps, warmup, || {
                    loss = black_box(gw_loss(black_box(&cx), black_box(&cy), black_box(&pi))?);
                    Ok(())
                })?;
                rec.metric(&format!("gw_loss_n{n}"), loss);
                rec.timing(&format!("gw_loss_n{n}_ms"), mean);
                cells.push(Cell { op: "gw_loss", n, m: n, reps, mean_ms: mean, std_ms: std });
            }
        }

        let needs_instance = ops.iter().any(|o| matches!(o.as_str(), "sinkhorn" | "fw" | "sgw"));
        for &n in baseline_sizes.iter().filter(|_| needs_instance) {
            let x = gaussian_cloud(n, 3, seed ^ 0x1111)?;
            let y = gaussian_cloud(n, 3, seed ^ 0x2222)?;
            let cx = build_cost_matrix(&x, CostConvention::SquaredDistance)?;
            let cy = build_cost_matrix(&y, CostConvention::SquaredDistance)?;
            let mu = DiscreteMeasure::uniform(x);
            let nu = DiscreteMeasure::uniform(y);
            let a = mu.weights().to_vec();
            let b = nu.weights().to_vec();

            if ops.iter().any(|o| o == "sinkhorn") {
                let mut loss = 0.0;
                let (mean, std) = time_cell(reps, warmup, || {
                    let plan = sinkhorn_gw(&cx, &cy, &a, &b, sk_eps, sk_outer, sk_inner)?;
                    loss = black_box(gw_loss(&cx, &cy, &plan)?);
                    Ok(())
                })?;
                rec.metric(&format!("sinkhorn_loss_n{n}"), loss);
                rec.timing(&format!("sinkhorn_n{n}_ms"), mean);
                cells.push(Cell { op: "sinkhorn", n, m: n, reps, mean_ms: mean, std_ms: std });
            }
            if ops.iter().any(|o| o == "fw") {
                let mut loss = 0.0;
                let (mean, std) = time_cell(reps, warmup, || {
                    let plan = frank_wolfe_gw(&cx, &cy, fw_iters)?;
                    loss = black_box(gw_loss(&cx, &cy, &plan)?);
                    Ok(())
                })?;
                rec.metric(&format!("fw_loss_n{n}"), loss);
                rec.timing(&format!("fw_n{n}_ms"), mean);
                cells.push(Cell { op: "fw", n, m: n, reps, mean_ms: mean, std_ms: std });
            }
            if ops.iter().any(|o| o == "sgw") {
                let sgw_cfg = SgwConfig::new(sgw_directions, SgwMode::Shared, seed);
                let mut value = 0.0;
                let (mean, std) = time_cell(reps, warmup, || {
                    value = black_box(sgw(&mu, &nu, &sgw_cfg)?);
                    Ok(())
                })?;
                rec.metric(&format!("sgw_n{n}"), value);
                rec.timing(&format!("sgw_n{n}_ms"), mean);
                cells.push(Cell { op: "sgw", n, m: n, reps, mean_ms: mean, std_ms: std });
            }
        }

        let table_name = format!("{}_table.csv", rec.prefix());
        record::write_csv(
            &out.join(&table_name),
            &["op", "n", "m", "reps", "mean_ms", "std_ms"],
            &cells.iter().map(Cell::csv).collect::<Vec<_>>(),
        )?;
        rec.artifact(&table_name);
        let summary_name = format!("{}_summary.json", rec.prefix());
        rec.artifact(&summary_name);
        record::write_json(&out.join(&summary_name), &rec)?;
        record::append_log(out, &rec)?;
        records.push(rec);
    }
    Ok(records)
}
