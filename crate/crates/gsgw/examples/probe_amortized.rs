//! Desk-scale training rehearsal: does the trained matcher clear the
//! analytic random baseline by a comfortable margin on held-out pairs?

use std::time::Instant;

use gsgw::amortized::{
    amortized_plan, init_matcher, label_transfer_accuracy, random_transfer_baseline,
    train_amortized, MatcherConfig, TrainConfig,
};
use gsgw::synth::{labeled_shape, LabeledCloud, ShapeKind};

fn pool(kinds: &[ShapeKind], per_kind: usize, base_seed: u64) -> Vec<LabeledCloud> {
    let mut out = Vec::new();
    for (ki, &kind) in kinds.iter().enumerate() {
        for i in 0..per_kind {
            let n = if i % 2 == 0 { 64 } else { 128 };
            out.push(labeled_shape(kind, n, base_seed + (ki * per_kind + i) as u64).unwrap());
        }
    }
    out
}

fn eval_pairs(kinds: &[ShapeKind], count: usize, base_seed: u64) -> Vec<(LabeledCloud, LabeledCloud)> {
    let mut out = Vec::new();
    let mut i = 0;
    while out.len() < count {
        let kind = kinds[i % kinds.len()];
        let n_a = if i % 2 == 0 { 64 } else { 128 };
        let n_b = if i % 3 == 0 { 128 } else { 64 };
        let a = labeled_shape(kind, n_a, base_seed + 2 * i as u64).unwrap();
        let b = labeled_shape(kind, n_b, base_seed + 2 * i as u64 + 1).unwrap();
        out.push((a, b));
        i += 1;
    }
    out
}

fn mean_accuracy(
    params: &gsgw::amortized::MatcherParams,
    pairs: &[(LabeledCloud, LabeledCloud)],
) -> (f64, f64) {
    let mut acc = 0.0;
    let mut base = 0.0;
    for (a, b) in pairs {
        let pi = amortized_plan(params, &a.cloud, &b.cloud, 0.0).unwrap();
        acc += label_transfer_accuracy(&pi, &a.labels, &b.labels).unwrap();
        base += random_transfer_baseline(&a.labels, &b.labels).unwrap();
    }
    (acc / pairs.len() as f64, base / pairs.len() as f64)
}

fn main() {
    let kinds = ShapeKind::ALL;
    let train = pool(&kinds, 12, 1000);
    let pairs = eval_pairs(&kinds, 50, 9000);
    println!("train pool {} shapes, eval {} pairs", train.len(), pairs.len());

    for seed in [42u64, 7, 77] {
        let cfg = MatcherConfig {
            token_dim: 32,
            latent_dim: 64,
            ..MatcherConfig::default()
        };
        let init = init_matcher(cfg, seed).unwrap();
        let (acc0, base) = mean_accuracy(&init, &pairs);
        let tcfg = TrainConfig {
            pairs_per_step: 4,
            lr: 2e-3,
            warmup_steps: 10,
            seed,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let report = train_amortized(&train, &init, 60, &tcfg).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let (acc1, _) = mean_accuracy(&report.params, &pairs);
        let first = report.loss_trace.first().unwrap();
        let last = report.loss_trace.last().unwrap();
        println!(
            "seed {seed:2}: baseline {base:.3}  untrained {acc0:.3}  trained {acc1:.3}  \
             margin {:+.1}pp  loss {first:.4}->{last:.4}  train {secs:.1}s",
            (acc1 - base) * 100.0
        );
    }
}
