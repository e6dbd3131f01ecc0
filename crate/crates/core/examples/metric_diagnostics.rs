//! Confusion-matrix metrics on a small hand-built example: per-category
//! accuracy and IoU, the FP/FN bookkeeping identities, and the predicted vs
//! actual false-positive change between two predictors.
//!
//! Usage: `cargo run --example metric_diagnostics`

use medoe::metrics::{delta_fp_diagnostic, identity_checks, report, ConfusionMatrix};
use medoe::synthgen::{make_grouping, FrequencyProfile, GroupingMode};

fn main() -> medoe::Result<()> {
    // Rows are ground truth, columns predictions.
    let before = ConfusionMatrix::from_rows(&[
        vec![900, 30, 15, 5],
        vec![40, 300, 10, 0],
        vec![30, 10, 50, 10],
        vec![20, 0, 5, 25],
    ])?;
    let after = ConfusionMatrix::from_rows(&[
        vec![890, 35, 17, 8],
        vec![30, 310, 10, 0],
        vec![15, 8, 70, 7],
        vec![10, 0, 4, 36],
    ])?;
    let profile = FrequencyProfile::from_counts((0..4).map(|i| before.gt_count(i)).collect())?;
    let grouping = make_grouping(&profile, GroupingMode::ExplicitCounts { head: 1, body: 1, tail: 2 })?;

    for (name, cm) in [("before", &before), ("after", &after)] {
        let r = report(cm, &grouping, &profile)?;
        println!("{name}: mAcc {:.4} mIoU {:.4}", r.overall.macc, r.overall.miou);
        for c in &r.per_category {
            println!(
                "  category {} ({}): acc {:.4} iou {:.4} fp {} fn {}",
                c.category,
                c.group.name(),
                c.acc.unwrap_or(f64::NAN),
                c.iou.unwrap_or(f64::NAN),
                cm.fp(c.category),
                cm.fn_(c.category)
            );
        }
        match r.pearson {
            Some(p) => println!("  frequency/accuracy correlation {p:.3}"),
            None => println!("  frequency/accuracy correlation undefined"),
        }
        match identity_checks(cm, 1e-9) {
            Ok(s) => println!("  sum FP = sum FN = {} (max identity error {:.1e})", s.sum_fp, s.max_error),
            Err(v) => println!("  identity violated: {}", v.detail),
        }
    }

    let diag = delta_fp_diagnostic(&before, &after)?;
    println!("false-positive change (effective when predicted/gt < {}):", diag.effective_threshold);
    for row in &diag.rows {
        match (row.predicted_delta_fp, row.effectiveness_ratio) {
            (Some(p), Some(ratio)) => println!(
                "  category {}: predicted {p:+.1} actual {:+} ratio {ratio:.3} effective {}",
                row.category,
                row.actual_delta_fp,
                row.effective.unwrap_or(false)
            ),
            _ => println!("  category {}: not computable, actual {:+}", row.category, row.actual_delta_fp),
        }
    }
    Ok(())
}
