//! `gsgw baseline`: reference solvers on one instance, tabulated.
//!
//! Runs the methods named in `baseline.methods` (default all of brute
//! force, Frank-Wolfe, entropic at the three preset regularizations, and
//! the sliced lower bound) on a shared instance and writes one CSV row per
//! method and seed: `method,seed,loss,feasibility_err,time_ms,status`.
//! A method that refuses the instance — brute force beyond its size guard,
//! Frank-Wolfe on unequal sizes — contributes a row whose status carries
//! the error text and whose numeric cells stay empty, so sweeps over
//! instance sizes keep a complete table.

use std::path::Path;
use std::time::Instant;

use gsgw::baselines::{
    brute_force_gw, frank_wolfe_gw, permutation_coupling, sgw, sinkhorn_gw, SgwConfig, SgwMode,
    SINKHORN_EPS_PRESETS,
};
use gsgw::geometry::normalize_cloud;
use gsgw::measures::{build_cost_matrix, gw_loss, DiscreteMeasure};
use gsgw::synth::gaussian_cloud;

use crate::config::RunConfig;
use crate::data;
use crate::error::{CliError, Result};
use crate::record::{self, ResultRecord};

struct Row {
    method: String,
    seed: u64,
    loss: Option<f64>,
    feasibility: Option<f64>,
    time_ms: f64,
    status: String,
}

impl Row {
    fn ok(method: String, seed: u64, loss: f64, feasibility: Option<f64>, time_ms: f64) -> Row {
        Row {
            method,
            seed,
            loss: Some(loss),
            feasibility,
            time_ms,
            status: "ok".into(),
        }
    }

    fn failed(method: String, seed: u64, time_ms: f64, err: &CliError) -> Row {
        Row {
            method,
            seed,
            loss: None,
            feasibility: None,
            time_ms,
            status: err.to_string().replace(',', ";"),
        }
    }

    fn csv(&self) -> Vec<String> {
        vec![
            self.method.clone(),
            self.seed.to_string(),
            self.loss.map(record::fmt).unwrap_or_default(),
            self.feasibility.map(record::fmt).unwrap_or_default(),
            record::fmt(self.time_ms),
            self.status.clone(),
        ]
    }
}

pub fn run(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<ResultRecord>> {
    let n = cfg.parsed("baseline.n", 6usize)?;
    let m = cfg.parsed("baseline.m", n)?;
    let d = cfg.parsed("baseline.d", 3usize)?;
    let data_seed = cfg.parsed("baseline.data_seed", 11u64)?;
    let x_path = cfg.path("baseline.x");
    let y_path = cfg.path("baseline.y");
    let normalize = cfg.bool("baseline.normalize", true)?;
    let convention = data::cost_convention(cfg, "baseline.cost")?;
    let methods = cfg.str_list("baseline.methods", &["brute", "fw", "sinkhorn", "sgw"]);
    let fw_iters = cfg.parsed("baseline.fw_iters", 100usize)?;
    let sk_outer = cfg.parsed("baseline.sinkhorn_outer", 20usize)?;
    let sk_inner = cfg.parsed("baseline.sinkhorn_inner", 200usize)?;
    let sgw_directions = cfg.parsed("baseline.sgw_directions", 200usize)?;
    let sgw_mode = match cfg.str("baseline.sgw_mode", "shared").as_str() {
        "shared" => SgwMode::Shared,
        "independent" => SgwMode::Independent,
        "maxmin" => SgwMode::MaxMin,
        other => {
            return Err(CliError::config(format!(
                "key baseline.sgw_mode: expected shared, independent or maxmin, got {other:?}"
            )));
        }
    };
    cfg.finish()?;

    let mut x = match &x_path {
        Some(p) => gsgw::mesh_io::read_npy(p)?,
        None => gaussian_cloud(n, d, data_seed)?,
    };
    let mut y = match &y_path {
        Some(p) => gsgw::mesh_io::read_npy(p)?,
        None => gaussian_cloud(m, d, data_seed + 1)?,
    };
    if normalize {
        x = normalize_cloud(&x)?;
        y = normalize_cloud(&y)?;
    }
    let cx = build_cost_matrix(&x, convention)?;
    let cy = build_cost_matrix(&y, convention)?;
    let mu = DiscreteMeasure::uniform(x);
    let nu = DiscreteMeasure::uniform(y);
    let a = mu.weights().to_vec();
    let b = nu.weights().to_vec();

    let mut records = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rows: Vec<Row> = Vec::new();
        for method in &methods {
            match method.as_str() {
                "brute" => {
                    let start = Instant::now();
                    let outcome = brute_force_gw(&cx, &cy)
                        .and_then(|r| Ok((r.best_loss, permutation_coupling(&r.best_perm)?)));
                    let elapsed = record::ms(start.elapsed());
                    rows.push(match outcome {
                        Ok((loss, plan)) => Row::ok(
                            "brute".into(),
                            seed,
                            loss,
                            Some(plan.marginal_deviation()),
                            elapsed,
                        ),
                        Err(e) => Row::failed("brute".into(), seed, elapsed, &e.into()),
                    });
                }
                "fw" => {
                    let start = Instant::now();
                    let outcome = frank_wolfe_gw(&cx, &cy, fw_iters)
                        .and_then(|plan| Ok((gw_loss(&cx, &cy, &plan)?, plan)));
                    let elapsed = record::ms(start.elapsed());
                    rows.push(match outcome {
                        Ok((loss, plan)) => Row::ok(
                            "fw".into(),
                            seed,
                            loss,
                            Some(plan.marginal_deviation()),
                            elapsed,
                        ),
                        Err(e) => Row::failed("fw".into(), seed, elapsed, &e.into()),
                    });
                }
                "sinkhorn" => {
                    for &eps in &SINKHORN_EPS_PRESETS {
                        let name = format!("sinkhorn_eps{}", record::fmt(eps));
                        let start = Instant::now();
                        let outcome = sinkhorn_gw(&cx, &cy, &a, &b, eps, sk_outer, sk_inner)
                            .and_then(|plan| Ok((gw_loss(&cx, &cy, &plan)?, plan)));
                        let elapsed = record::ms(start.elapsed());
                        rows.push(match outcome {
                            Ok((loss, plan)) => {
                                Row::ok(name, seed, loss, Some(plan.marginal_deviation()), elapsed)
                            }
                            Err(e) => Row::failed(name, seed, elapsed, &e.into()),
                        });
                    }
                }
                "sgw" => {
                    let sgw_cfg = SgwConfig::new(sgw_directions, sgw_mode, seed);
                    let start = Instant::now();
                    let outcome = sgw(&mu, &nu, &sgw_cfg);
                    let elapsed = record::ms(start.elapsed());
                    rows.push(match outcome {
                        // a scalar objective: there is no plan to check
                        Ok(loss) => Row::ok("sgw".into(), seed, loss, None, elapsed),
                        Err(e) => Row::failed("sgw".into(), seed, elapsed, &e.into()),
                    });
                }
                other => {
                    return Err(CliError::config(format!(
                        "key baseline.methods: unknown method {other:?}; expected \
                         brute, fw, sinkhorn or sgw"
                    )));
                }
            }
        }

        let mut rec = ResultRecord::new("baseline", seed, cfg.hash());
        rec.metric("n", cx.n() as f64);
        rec.metric("m", cy.n() as f64);
        for row in &rows {
            if let Some(loss) = row.loss {
                rec.metric(&format!("loss_{}", row.method), loss);
            }
            rec.timing(&format!("{}_ms", row.method), row.time_ms);
        }
        let table_name = format!("{}_table.csv", rec.prefix());
        let csv_rows: Vec<Vec<String>> = rows.iter().map(Row::csv).collect();
        record::write_csv(
            &out.join(&table_name),
            &["method", "seed", "loss", "feasibility_err", "time_ms", "status"],
            &csv_rows,
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
