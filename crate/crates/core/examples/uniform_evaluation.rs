//! Scores one model on the long-tailed test split and on a class-balanced
//! resample of it, where every category contributes the same pixel count.
//!
//! Usage: `cargo run --release --example uniform_evaluation -- [seed]`

use medoe::inference::{evaluate_report, Combiner};
use medoe::synthgen::{
    compute_frequency, generate_dataset, make_grouping, uniform_resample, GeneratorConfig, Group, GroupingMode, Quota,
};
use medoe::training::{train_full, TrainConfig};

fn main() -> medoe::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let gen = GeneratorConfig { seed, ..Default::default() };
    let train = generate_dataset(&gen)?;
    let test = generate_dataset(&GeneratorConfig { n_scenes: 50, scene_offset: gen.n_scenes, ..gen.clone() })?;
    let profile = compute_frequency(&train, gen.classes)?;
    let grouping = make_grouping(&profile, GroupingMode::ExplicitCounts { head: 2, body: 4, tail: 6 })?;
    let model = train_full(&train, &grouping, &TrainConfig { seed, ..Default::default() })?;

    let uniform = uniform_resample(&test, gen.classes, Quota::Auto, seed)?;
    for (name, split) in [("long-tail", &test), ("uniform", &uniform)] {
        let r = evaluate_report(&model, split, Combiner::Moe)?;
        let counts: Vec<u64> = r.per_category.iter().map(|c| c.gt_count).collect();
        let g = |x: Group| 100.0 * r.group(x).macc.unwrap_or(f64::NAN);
        println!(
            "{name:<10} mAcc {:6.2}  mIoU {:6.2}  tail mAcc {:6.2}  gt pixels min {} max {}",
            100.0 * r.overall.macc,
            100.0 * r.overall.miou,
            g(Group::Tail),
            counts.iter().min().unwrap(),
            counts.iter().max().unwrap()
        );
    }
    Ok(())
}
