//! Stage 2 on its own: trains the experts once, then fits the per-expert,
//! per-category output calibration and compares it with plain averaging.
//!
//! Usage: `cargo run --release --example moe_calibration -- [seed] [moe_iters]`

use medoe::inference::{evaluate_report, Combiner};
use medoe::synthgen::{compute_frequency, generate_dataset, make_grouping, GeneratorConfig, Group, GroupingMode};
use medoe::training::{fit_moe, smoothed, train_stage1, TrainConfig};

fn main() -> medoe::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let defaults = TrainConfig::default();
    let moe_iters: usize = args.next().map_or(defaults.moe_iters, |s| s.parse().expect("moe_iters"));

    let gen = GeneratorConfig { seed, ..Default::default() };
    let train = generate_dataset(&gen)?;
    let test = generate_dataset(&GeneratorConfig { n_scenes: 50, scene_offset: gen.n_scenes, ..gen.clone() })?;
    let profile = compute_frequency(&train, gen.classes)?;
    let grouping = make_grouping(&profile, GroupingMode::ExplicitCounts { head: 2, body: 4, tail: 6 })?;

    let cfg = TrainConfig { seed, moe_iters, ..defaults };
    let mut model = train_stage1(&train, &grouping, &cfg)?;
    let (calib, trace) = fit_moe(&model, &train, &cfg)?;
    let s = smoothed(&trace, 50.min(trace.len()).max(1));
    println!(
        "selection loss: first {:.4}, last {:.4} (smoothed {:.4} -> {:.4})",
        trace[0],
        trace[trace.len() - 1],
        s[0],
        s[s.len() - 1]
    );
    for i in 0..calib.experts {
        let w: Vec<String> = calib.w_row(i).iter().map(|v| format!("{v:5.1}")).collect();
        println!("expert {} w: {}", i + 1, w.join(" "));
    }
    model.calibration = Some(calib);

    for c in [Combiner::UniformAverage, Combiner::Moe] {
        let r = evaluate_report(&model, &test, c)?;
        let g = |x: Group| 100.0 * r.group(x).macc.unwrap_or(f64::NAN);
        println!(
            "{:<12} mAcc {:6.2}  head {:6.2}  body {:6.2}  tail {:6.2}",
            c.to_string(),
            100.0 * r.overall.macc,
            g(Group::Head),
            g(Group::Body),
            g(Group::Tail)
        );
    }
    Ok(())
}
