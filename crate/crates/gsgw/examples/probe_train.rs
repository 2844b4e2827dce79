//! Watch the self-pair training trace under a few optimizer settings.

use gsgw::amortized::{
    amortized_plan, init_matcher, train_amortized, MatcherConfig, TrainConfig,
};
use gsgw::synth::{labeled_shape, ShapeKind};

fn main() {
    let shape = labeled_shape(ShapeKind::LShape, 8, 5).unwrap();
    let dataset = vec![shape.clone()];
    for (lr, steps, alpha_end) in [
        (1e-2, 400, 1e-3),
        (1e-2, 800, 1e-3),
        (3e-2, 800, 1e-3),
        (1e-2, 800, 5e-4),
    ] {
        let init = init_matcher(MatcherConfig::quick(), 6).unwrap();
        let cfg = TrainConfig {
            pairs_per_step: 1,
            lr,
            warmup_steps: 5,
            seed: 2,
            alpha_end,
            ..TrainConfig::default()
        };
        match train_amortized(&dataset, &init, steps, &cfg) {
            Ok(report) => {
                let trace = &report.loss_trace;
                let marks: Vec<String> = (0..=10)
                    .map(|k| {
                        let i = (k * (trace.len() - 1)) / 10;
                        format!("{:.4}", trace[i])
                    })
                    .collect();
                println!("lr {lr:7.0e} steps {steps:5} end {alpha_end:6.0e}: {}", marks.join(" "));
                let pi = amortized_plan(&report.params, &shape.cloud, &shape.cloud, cfg.alpha_end).unwrap();
                let diag: f64 = (0..8).map(|i| pi.plan().get(i, i)).sum();
                println!("    soft diagonal mass: {diag:.4} (1.0 = identity)");
            }
            Err(e) => println!("lr {lr:7.0e} steps {steps:5} end {alpha_end:6.0e}: error {e}"),
        }
    }
}
