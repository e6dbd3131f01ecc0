//! The re-balancing controls: plain baseline, head under-sampling and focal
//! loss, scored on held-out scenes.
//!
//! Usage: `cargo run --release --example rebalancing_baselines -- [seed]`

use medoe::inference::{evaluate_report, Combiner};
use medoe::synthgen::{compute_frequency, generate_dataset, make_grouping, GeneratorConfig, Group, GroupingMode};
use medoe::training::{train_stage1, undersample_quota, TrainConfig, TrainMode};

fn main() -> medoe::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let gen = GeneratorConfig { seed, ..Default::default() };
    let train = generate_dataset(&gen)?;
    let test = generate_dataset(&GeneratorConfig { n_scenes: 50, scene_offset: gen.n_scenes, ..gen.clone() })?;
    let profile = compute_frequency(&train, gen.classes)?;
    let grouping = make_grouping(&profile, GroupingMode::ExplicitCounts { head: 2, body: 4, tail: 6 })?;
    println!(
        "under-sampling keeps {} of {} head pixels per epoch",
        undersample_quota(&profile, &grouping, None),
        grouping.members(Group::Head).iter().map(|&k| profile.counts[k]).sum::<u64>()
    );

    let modes = [
        TrainMode::Baseline,
        TrainMode::UnderSample { ratio: None },
        TrainMode::Focal { gamma: 2.0 },
        TrainMode::Focal { gamma: 0.0 },
    ];
    let mut traces = Vec::new();
    for mode in modes {
        let model = train_stage1(&train, &grouping, &TrainConfig { seed, mode, ..Default::default() })?;
        let r = evaluate_report(&model, &test, Combiner::Single(0))?;
        let g = |x: Group| 100.0 * r.group(x).macc.unwrap_or(f64::NAN);
        println!(
            "{:<16} mAcc {:6.2}  mIoU {:6.2}  head {:6.2}  body {:6.2}  tail {:6.2}",
            mode.to_string(),
            100.0 * r.overall.macc,
            100.0 * r.overall.miou,
            g(Group::Head),
            g(Group::Body),
            g(Group::Tail)
        );
        traces.push(model.provenance.expert_losses(0));
    }
    let gap = traces[0].iter().zip(&traces[3]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("largest |baseline − focal(γ=0)| loss difference over the trace: {gap:e}");
    Ok(())
}
