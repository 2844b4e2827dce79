//! `gsgw interpolate`: barycentric interpolation along solved plans.
//!
//! Takes a sequence of clouds — `interp.clouds` as comma-separated npy
//! paths, or a procedural shape sequence — solves the sliced GW problem
//! between each consecutive pair, and writes the barycentric interpolations
//! at the configured `interp.t` values as npy files. The GW value of each
//! plan is logged alongside. Inputs are normalized by default and the
//! normalization is recorded, so the `t = 0` output equals the (normalized)
//! source bitwise.

use std::path::Path;
use std::time::Instant;

use gsgw::geometry::{barycentric_interpolate, normalize_cloud};
use gsgw::measures::{build_cost_matrix, DiscreteMeasure, PointCloud};
use gsgw::mesh_io::{read_npy, write_npy};
use gsgw::solver::solve;
use gsgw::synth::labeled_shape;

use crate::config::RunConfig;
use crate::data;
use crate::error::{CliError, Result};
use crate::record::{self, ResultRecord};

pub fn run(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<ResultRecord>> {
    let cloud_paths = cfg.str_list("interp.clouds", &[]);
    let kind = data::shape_kind(&cfg.str("interp.kind", "dumbbell"))?;
    let count = cfg.parsed("interp.count", 3usize)?;
    let n = cfg.parsed("interp.n", 64usize)?;
    let data_seed = cfg.parsed("interp.data_seed", 21u64)?;
    let t_values = cfg.list("interp.t", &[0.33, 0.67])?;
    let normalize = cfg.bool("interp.normalize", true)?;
    let convention = data::cost_convention(cfg, "interp.cost")?;
    let base = data::solver_config(cfg, "interp", 150, 2)?;

    for &t in &t_values {
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::config(format!(
                "key interp.t: {t} is outside [0, 1]"
            )));
        }
    }

    let mut clouds: Vec<PointCloud> = if cloud_paths.is_empty() {
        if count < 2 {
            return Err(CliError::config("interp.count must be at least 2"));
        }
        (0..count)
            .map(|i| Ok(labeled_shape(kind, n, data_seed + i as u64)?.cloud))
            .collect::<Result<_>>()?
    } else {
        if cloud_paths.len() < 2 {
            return Err(CliError::config("interp.clouds needs at least two paths"));
        }
        cloud_paths
            .iter()
            .map(|p| {
                let path = cfg.resolve(p);
                data::require_file(&path)?;
                Ok(read_npy(&path)?)
            })
            .collect::<Result<_>>()?
    };
    let dim = clouds[0].dim();
    if clouds.iter().any(|c| c.dim() != dim) {
        return Err(CliError::config(
            "interpolation clouds must share one ambient dimension",
        ));
    }
    let factory = data::scoring_factory(cfg, "interp", dim, dim)?;
    cfg.finish()?;

    if normalize {
        for c in &mut clouds {
            *c = normalize_cloud(c)?;
        }
    }
    let costs: Vec<_> = clouds
        .iter()
        .map(|c| build_cost_matrix(c, convention))
        .collect::<gsgw::Result<_>>()?;

    let mut records = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rec = ResultRecord::new("interpolate", seed, cfg.hash());
        rec.metric("normalized", normalize as u8 as f64);
        rec.metric("pairs", (clouds.len() - 1) as f64);
        let prefix = rec.prefix();
        let mut solve_ms_total = 0.0;

        for pair in 0..clouds.len() - 1 {
            let (x, y) = (&clouds[pair], &clouds[pair + 1]);
            let mu = DiscreteMeasure::uniform(x.clone());
            let nu = DiscreteMeasure::uniform(y.clone());
            let mut solver_cfg = base.clone();
            solver_cfg.seed = seed.wrapping_add(pair as u64);
            let start = Instant::now();
            let result = solve(&mu, &nu, &costs[pair], &costs[pair + 1], &solver_cfg,
                factory.as_ref())?;
            solve_ms_total += record::ms(start.elapsed());
            rec.metric(&format!("gw_pair{pair}"), result.best_loss);

            for &t in &t_values {
                let z = barycentric_interpolate(x, y, &result.best_plan, t)?;
                let name = format!("{prefix}_pair{pair}_t{:04}.npy", (t * 1000.0).round() as u32);
                write_npy(&out.join(&name), &z)?;
                rec.artifact(&name);
            }
        }
        rec.timing("solve_ms", solve_ms_total);

        let summary_name = format!("{prefix}_summary.json");
        rec.artifact(&summary_name);
        record::write_json(&out.join(&summary_name), &rec)?;
        record::append_log(out, &rec)?;
        records.push(rec);
    }
    Ok(records)
}
