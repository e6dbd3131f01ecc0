//! Trains MEDOE and the single-expert baseline on the default benchmark and
//! prints per-group accuracy for every combiner.
//!
//! Usage: `cargo run --release --example medoe_vs_baseline -- [seed] [iters]`

use std::time::Instant;

use medoe::inference::{evaluate_report, Combiner};
use medoe::metrics::MetricsReport;
use medoe::synthgen::{compute_frequency, generate_dataset, make_grouping, GeneratorConfig, Group, GroupingMode};
use medoe::training::{train_full, TrainConfig, TrainMode};

fn row(name: &str, r: &MetricsReport) {
    let g = |x: Group| 100.0 * r.group(x).macc.unwrap_or(f64::NAN);
    println!(
        "{name:<14} mAcc {:6.2}  mIoU {:6.2}  head {:6.2}  body {:6.2}  tail {:6.2}",
        100.0 * r.overall.macc,
        100.0 * r.overall.miou,
        g(Group::Head),
        g(Group::Body),
        g(Group::Tail)
    );
}

fn main() -> medoe::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let defaults = TrainConfig::default();
    let iters: usize = args.next().map_or(defaults.iters, |s| s.parse().expect("iters"));

    let gen = GeneratorConfig { seed, ..Default::default() };
    let train = generate_dataset(&gen)?;
    let test = generate_dataset(&GeneratorConfig { n_scenes: 50, scene_offset: gen.n_scenes, ..gen.clone() })?;
    let profile = compute_frequency(&train, gen.classes)?;
    let grouping = make_grouping(&profile, GroupingMode::ExplicitCounts { head: 2, body: 4, tail: 6 })?;

    for mode in [TrainMode::Medoe, TrainMode::Baseline] {
        let cfg = TrainConfig { seed, iters, mode, ..defaults.clone() };
        let t = Instant::now();
        let model = train_full(&train, &grouping, &cfg)?;
        println!("-- {mode} trained in {:.1}s", t.elapsed().as_secs_f64());
        let combiners = if model.experts.len() > 1 {
            vec![Combiner::Moe, Combiner::Oracle, Combiner::UniformAverage, Combiner::Single(0), Combiner::Single(1), Combiner::Single(2)]
        } else {
            vec![Combiner::Single(0)]
        };
        for c in combiners {
            row(&c.to_string(), &evaluate_report(&model, &test, c)?);
        }
    }
    Ok(())
}
