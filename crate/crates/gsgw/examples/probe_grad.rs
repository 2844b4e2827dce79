//! Scan finite-difference step sizes for the amortized fused-loss gradient.

use gsgw::amortized::{init_matcher, predict_scores, tokenize, MatcherConfig};
use gsgw::autodiff::{grad_check, Tape};
use gsgw::measures::{build_cost_matrix, feature_cost_matrix, fgw_loss_graph, CostConvention};
use gsgw::softsort::soft_plan_graph;
use gsgw::synth::gaussian_cloud;
use gsgw::Tensor;

fn main() {
    for attention in [false, true] {
        probe(attention);
    }
}

fn probe(attention: bool) {
    println!("--- attention = {attention} ---");
    let cfg = MatcherConfig {
        k: 4,
        token_dim: 4,
        latent_dim: 5,
        heads: 1,
        attention,
    };
    let params = init_matcher(cfg, 17).unwrap();
    let x = gsgw::geometry::normalize_cloud(&gaussian_cloud(8, 2, 81).unwrap()).unwrap();
    let y = gsgw::geometry::normalize_cloud(&gaussian_cloud(8, 2, 82).unwrap()).unwrap();
    let tok_x = tokenize(&x, cfg.k).unwrap();
    let tok_y = tokenize(&y, cfg.k).unwrap();
    let cx = build_cost_matrix(&x, CostConvention::Distance).unwrap();
    let cy = build_cost_matrix(&y, CostConvention::Distance).unwrap();
    let features = feature_cost_matrix(tok_x.tokens(), tok_y.tokens()).unwrap();

    let eval = |theta: &[f64]| -> gsgw::Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::column(theta), true);
        let (s, t) = predict_scores(&mut tape, leaf, &cfg, &tok_x, &tok_y)?;
        let pi = soft_plan_graph(&mut tape, s, t, 0.5)?;
        let loss = fgw_loss_graph(&mut tape, &cx, &cy, pi, &features, 0.5)?;
        let value = tape.value(loss).scalar_value()?;
        let grads = tape.backward(loss)?;
        let grad = grads.get(leaf).unwrap().data().to_vec();
        Ok((value, grad))
    };

    let (value, analytic) = eval(params.flat()).unwrap();
    println!("loss = {value}");
    let amax = analytic.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    println!("params = {}, max |analytic| = {amax:.3e}", analytic.len());

    for h in [1e-3, 3e-4] {
        let worst = grad_check(
            |theta| eval(theta).map(|(v, _)| v),
            params.flat(),
            &analytic,
            h,
        )
        .unwrap();
        // Find the worst coordinate by hand for this h.
        let mut work = params.flat().to_vec();
        let mut worst_i = 0;
        let mut worst_rel = 0.0;
        let mut worst_central = 0.0;
        for i in 0..work.len() {
            let orig = work[i];
            work[i] = orig + h;
            let plus = eval(&work).unwrap().0;
            work[i] = orig - h;
            let minus = eval(&work).unwrap().0;
            work[i] = orig;
            let central = (plus - minus) / (2.0 * h);
            let rel = (analytic[i] - central).abs() / (1e-8 + central.abs());
            if rel > worst_rel {
                worst_rel = rel;
                worst_i = i;
                worst_central = central;
            }
        }
        println!(
            "h = {h:8.1e}: worst rel {worst:.3e} at coord {worst_i} (analytic {:.6e}, central {worst_central:.6e})",
            analytic[worst_i]
        );
    }
}
