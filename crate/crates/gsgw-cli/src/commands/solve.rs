//! `gsgw solve`: minimize the sliced GW loss between two point clouds.
//!
//! The instance is either a pair of `.npy` files (`solve.x`, `solve.y`;
//! omit `solve.y` to match a cloud against itself) or a named synthetic
//! pair (`solve.pair`). Per seed the command writes the hard plan as
//! sparse `i,j,mass` triples, the per-step soft-loss trace, and a JSON
//! summary whose metrics block reruns bitwise.

use std::path::Path;
use std::time::Instant;

use gsgw::measures::{build_cost_matrix, DiscreteMeasure};
use gsgw::solver::solve;

use crate::config::RunConfig;
use crate::data;
use crate::error::Result;
use crate::record::{self, ResultRecord};

pub fn run(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<ResultRecord>> {
    let (x, y) = data::instance_pair(cfg, "solve")?;
    let convention = data::cost_convention(cfg, "solve.cost")?;
    let base = data::solver_config(cfg, "solve", 200, 3)?;
    let factory = data::scoring_factory(cfg, "solve", x.dim(), y.dim())?;
    cfg.finish()?;

    let cx = build_cost_matrix(&x, convention)?;
    let cy = build_cost_matrix(&y, convention)?;
    let mu = DiscreteMeasure::uniform(x);
    let nu = DiscreteMeasure::uniform(y);

    let mut records = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut solver_cfg = base.clone();
        solver_cfg.seed = seed;
        let start = Instant::now();
        let result = solve(&mu, &nu, &cx, &cy, &solver_cfg, factory.as_ref())?;
        let total_ms = record::ms(start.elapsed());

        let mut rec = ResultRecord::new("solve", seed, cfg.hash());
        rec.metric("best_loss", result.best_loss);
        rec.metric("best_restart", result.best_restart as f64);
        rec.metric("n", mu.len() as f64);
        rec.metric("m", nu.len() as f64);
        rec.timing("train_ms", result.train_ms);
        rec.timing("plan_extract_ms", result.extract_ms);
        rec.timing("total_ms", total_ms);

        let prefix = rec.prefix();
        let plan_name = format!("{prefix}_plan.csv");
        let plan = result.best_plan.plan();
        let mut rows = Vec::new();
        for i in 0..plan.rows() {
            for j in 0..plan.cols() {
                let mass = plan.get(i, j);
                if mass > 0.0 {
                    rows.push(vec![i.to_string(), j.to_string(), record::fmt(mass)]);
                }
            }
        }
        rec.metric("plan_nnz", rows.len() as f64);
        record::write_csv(&out.join(&plan_name), &["i", "j", "mass"], &rows)?;
        rec.artifact(&plan_name);

        let trace_name = format!("{prefix}_trace.csv");
        let trace_rows: Vec<Vec<String>> = result
            .loss_trace
            .iter()
            .enumerate()
            .map(|(step, loss)| vec![step.to_string(), record::fmt(*loss)])
            .collect();
        record::write_csv(&out.join(&trace_name), &["step", "soft_loss"], &trace_rows)?;
        rec.artifact(&trace_name);

        let summary_name = format!("{prefix}_summary.json");
        rec.artifact(&summary_name);
        record::write_json(&out.join(&summary_name), &rec)?;
        record::append_log(out, &rec)?;
        records.push(rec);
    }
    Ok(records)
}
