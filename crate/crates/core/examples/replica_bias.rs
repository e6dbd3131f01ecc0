//! Trains R replicas that differ only in their seed and reports how far the
//! replicas' average prediction sits from the ground truth, per group.
//!
//! Usage: `cargo run --release --example replica_bias -- [replicas] [iters]`

use medoe::inference::{bias_estimate, Combiner};
use medoe::synthgen::{compute_frequency, generate_dataset, make_grouping, GeneratorConfig, GroupingMode};
use medoe::training::{train_replicas, TrainConfig, TrainMode};

fn main() -> medoe::Result<()> {
    let mut args = std::env::args().skip(1);
    let r: usize = args.next().map_or(3, |s| s.parse().expect("replicas"));
    let defaults = TrainConfig::default();
    let iters: usize = args.next().map_or(defaults.iters, |s| s.parse().expect("iters"));

    let gen = GeneratorConfig::default();
    let train = generate_dataset(&gen)?;
    let test = generate_dataset(&GeneratorConfig { n_scenes: 50, scene_offset: gen.n_scenes, ..gen.clone() })?;
    let profile = compute_frequency(&train, gen.classes)?;
    let grouping = make_grouping(&profile, GroupingMode::ExplicitCounts { head: 2, body: 4, tail: 6 })?;

    for (mode, combiner) in [(TrainMode::Baseline, Combiner::Single(0)), (TrainMode::Medoe, Combiner::Moe)] {
        let replicas = train_replicas(&train, &grouping, &TrainConfig { iters, mode, ..defaults.clone() }, r)?;
        let b = bias_estimate(&replicas, &test, combiner)?;
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        println!(
            "{mode:<9} {combiner:<9} bias overall {}  head {}  body {}  tail {}",
            f(b.overall),
            f(b.head),
            f(b.body),
            f(b.tail)
        );
    }
    Ok(())
}
