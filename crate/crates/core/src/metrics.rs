//! Confusion matrices, per-category and per-group accuracy/IoU, the FP/FN
//! identities that relate the two, the ΔFP diagnostic, the
//! frequency–accuracy Pearson correlation, and replica-based bias.
//!
//! For category `i` with `TP_i`, `FN_i`, `FP_i` and `gt_i = TP_i + FN_i`:
//!
//! ```text
//! Acc_i = TP_i / gt_i          IoU_i = TP_i / (gt_i + FP_i)
//! Σ FP_i = Σ FN_i              FP_i  = (Acc_i / IoU_i − 1) · gt_i
//! ```
//!
//! If accuracy rises by a relative `p` while IoU stays put, the extra false
//! positives are `ΔFP_i = p · (gt_i + FP_i)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ensemble::ProbabilityGrid;
use crate::error::{Error, Result};
use crate::synthgen::{CategoryGrouping, FrequencyProfile, Group, IGNORE};

/// `counts[g * classes + p]` = pixels with ground truth `g` predicted `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::invalid("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix { classes, counts: rows.concat() })
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Adds one scene's predictions; IGNORE ground truth is skipped.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::invalid(format!("{} predictions for {} labels", pred.len(), gt.len())));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(Error::invalid(format!("label pair ({g}, {p}) out of range")));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("confusion matrices differ in size"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn tp(&self, i: usize) -> u64 {
        self.get(i, i)
    }

    /// Row sum: pixels whose ground truth is `i`.
    pub fn gt_count(&self, i: usize) -> u64 {
        (0..self.classes).map(|p| self.get(i, p)).sum()
    }

    /// Column sum: pixels predicted as `i`.
    pub fn pred_count(&self, i: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, i)).sum()
    }

    pub fn fn_(&self, i: usize) -> u64 {
        self.gt_count(i) - self.tp(i)
    }

    pub fn fp(&self, i: usize) -> u64 {
        self.pred_count(i) - self.tp(i)
    }

    pub fn acc(&self, i: usize) -> Option<f64> {
        let gt = self.gt_count(i);
        (gt > 0).then(|| self.tp(i) as f64 / gt as f64)
    }

    pub fn iou(&self, i: usize) -> Option<f64> {
        let denom = self.gt_count(i) + self.fp(i);
        (denom > 0).then(|| self.tp(i) as f64 / denom as f64)
    }

    /// CSV with a header row and a leading column of category ids.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gt\\pred");
        for p in 0..self.classes {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
        for g in 0..self.classes {
            out.push_str(&g.to_string());
            for p in 0..self.classes {
                out.push_str(&format!(",{}", self.get(g, p)));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(pred: &[u8], gt: &[u8], classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: usize,
    /// 1-based rank by training-set pixel frequency.
    pub rank: usize,
    pub group: Group,
    pub frequency: f64,
    pub gt_count: u64,
    pub pred_count: u64,
    pub acc: Option<f64>,
    pub iou: Option<f64>,
    /// False when the category has no ground-truth pixels; excluded from means.
    pub included: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub macc: Option<f64>,
    pub miou: Option<f64>,
    pub categories: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupTable {
    pub head: GroupMetrics,
    pub body: GroupMetrics,
    pub tail: GroupMetrics,
}

impl GroupTable {
    pub fn get(&self, g: Group) -> &GroupMetrics {
        match g {
            Group::Head => &self.head,
            Group::Body => &self.body,
            Group::Tail => &self.tail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub miou: f64,
    pub macc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDiagnostics {
    pub excluded_categories: Vec<usize>,
    pub pearson_defined: bool,
    pub sum_fp: u64,
    pub sum_fn: u64,
    pub identities_hold: bool,
    pub evaluated_pixels: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_category: Vec<CategoryMetrics>,
    pub groups: GroupTable,
    pub overall: Overall,
    /// Correlation between training frequency and accuracy over included
    /// categories; `None` when either side is constant.
    pub pearson: Option<f64>,
    pub diagnostics: ReportDiagnostics,
    pub confusion: ConfusionMatrix,
    /// Effective configuration that produced the report.
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn group(&self, g: Group) -> &GroupMetrics {
        self.groups.get(g)
    }

    /// `category,rank,frequency,group,acc,iou` rows, one per category.
    pub fn plot_csv(&self) -> String {
        let mut out = String::from("category,rank,frequency,group,acc,iou\n");
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        for m in &self.per_category {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                m.category,
                m.rank,
                m.frequency,
                m.group.name(),
                fmt(m.acc),
                fmt(m.iou)
            ));
        }
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Pearson correlation; `None` for fewer than two points or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn report(cm: &ConfusionMatrix, grouping: &CategoryGrouping, profile: &FrequencyProfile) -> Result<MetricsReport> {
    let c = cm.classes;
    if grouping.classes() != c || profile.classes() != c {
        return Err(Error::invalid(format!(
            "confusion matrix has {c} categories, grouping {} and profile {}",
            grouping.classes(),
            profile.classes()
        )));
    }
    let ranks = grouping.ranks();
    let per_category: Vec<CategoryMetrics> = (0..c)
        .map(|i| {
            let included = cm.gt_count(i) > 0;
            CategoryMetrics {
                category: i,
                rank: ranks[i] + 1,
                group: grouping.group_of[i],
                frequency: profile.freqs[i],
                gt_count: cm.gt_count(i),
                pred_count: cm.pred_count(i),
                acc: if included { cm.acc(i) } else { None },
                iou: if included { cm.iou(i) } else { None },
                included,
            }
        })
        .collect();
    let included: Vec<&CategoryMetrics> = per_category.iter().filter(|m| m.included).collect();
    let group_metrics = |g: Group| {
        let members: Vec<&&CategoryMetrics> = included.iter().filter(|m| m.group == g).collect();
        GroupMetrics {
            macc: mean(members.iter().filter_map(|m| m.acc)),
            miou: mean(members.iter().filter_map(|m| m.iou)),
            categories: members.len(),
        }
    };
    let groups = GroupTable { head: group_metrics(Group::Head), body: group_metrics(Group::Body), tail: group_metrics(Group::Tail) };
    let overall = Overall {
        macc: mean(included.iter().filter_map(|m| m.acc)).unwrap_or(0.0),
        miou: mean(included.iter().filter_map(|m| m.iou)).unwrap_or(0.0),
    };
    let freqs: Vec<f64> = included.iter().map(|m| m.frequency).collect();
    let accs: Vec<f64> = included.iter().filter_map(|m| m.acc).collect();
    let pearson = pearson(&freqs, &accs);
    let sum_fp: u64 = (0..c).map(|i| cm.fp(i)).sum();
    let sum_fn: u64 = (0..c).map(|i| cm.fn_(i)).sum();
    let diagnostics = ReportDiagnostics {
        excluded_categories: per_category.iter().filter(|m| !m.included).map(|m| m.category).collect(),
        pearson_defined: pearson.is_some(),
        sum_fp,
        sum_fn,
        identities_hold: identity_checks(cm, 1e-9).is_ok(),
        evaluated_pixels: cm.total(),
    };
    Ok(MetricsReport { per_category, groups, overall, pearson, diagnostics, confusion: cm.clone(), config: BTreeMap::new() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySummary {
    pub sum_fp: u64,
    pub sum_fn: u64,
    /// Largest `|FP_i − (Acc_i/IoU_i − 1)·gt_i|` over categories with `TP_i > 0`.
    pub max_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityViolation {
    /// `None` when the violation is the global `Σ FP = Σ FN` identity.
    pub category: Option<usize>,
    pub detail: String,
}

/// Checks `Σ FP = Σ FN` (exactly) and `FP_i = (Acc_i/IoU_i − 1)·gt_i`
/// (to `tol`) for every category with `TP_i > 0`.
pub fn identity_checks(cm: &ConfusionMatrix, tol: f64) -> std::result::Result<IdentitySummary, IdentityViolation> {
    let c = cm.classes;
    let sum_fp: u64 = (0..c).map(|i| cm.fp(i)).sum();
    let sum_fn: u64 = (0..c).map(|i| cm.fn_(i)).sum();
    if sum_fp != sum_fn {
        return Err(IdentityViolation { category: None, detail: format!("ΣFP = {sum_fp} but ΣFN = {sum_fn}") });
    }
    let mut max_error: f64 = 0.0;
    for i in 0..c {
        if cm.tp(i) == 0 {
            continue;
        }
        let (acc, iou) = (cm.acc(i).unwrap(), cm.iou(i).unwrap());
        let implied = (acc / iou - 1.0) * cm.gt_count(i) as f64;
        let err = (implied - cm.fp(i) as f64).abs();
        if !(err <= tol) {
            return Err(IdentityViolation {
                category: Some(i),
                detail: format!("FP = {} but (Acc/IoU − 1)·gt = {implied}", cm.fp(i)),
            });
        }
        max_error = max_error.max(err);
    }
    Ok(IdentitySummary { sum_fp, sum_fn, max_error })
}

/// Ratio below which `ΔFP_i / gt_i` is considered small.
pub const EFFECTIVE_RATIO: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaFpRow {
    pub category: usize,
    pub computable: bool,
    /// Relative accuracy gain `Acc'_i / Acc_i − 1`.
    pub p: Option<f64>,
    pub predicted_delta_fp: Option<f64>,
    pub actual_delta_fp: i64,
    /// `predicted ΔFP_i / gt_i`.
    pub effectiveness_ratio: Option<f64>,
    pub effective: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaFpDiagnostic {
    pub rows: Vec<DeltaFpRow>,
    pub effective_threshold: f64,
}

pub fn delta_fp_diagnostic(baseline: &ConfusionMatrix, improved: &ConfusionMatrix) -> Result<DeltaFpDiagnostic> {
    if baseline.classes != improved.classes {
        return Err(Error::invalid(format!(
            "category sets differ: {} vs {}",
            baseline.classes, improved.classes
        )));
    }
    let rows = (0..baseline.classes)
        .map(|i| {
            let actual = improved.fp(i) as i64 - baseline.fp(i) as i64;
            let gt = baseline.gt_count(i) as f64;
            match (baseline.acc(i).filter(|&a| a > 0.0), improved.acc(i)) {
                (Some(acc), Some(acc_new)) => {
                    let p = acc_new / acc - 1.0;
                    let predicted = p * (gt + baseline.fp(i) as f64);
                    let ratio = predicted / gt;
                    DeltaFpRow {
                        category: i,
                        computable: true,
                        p: Some(p),
                        predicted_delta_fp: Some(predicted),
                        actual_delta_fp: actual,
                        effectiveness_ratio: Some(ratio),
                        effective: Some(ratio < EFFECTIVE_RATIO),
                    }
                }
                _ => DeltaFpRow {
                    category: i,
                    computable: false,
                    p: None,
                    predicted_delta_fp: None,
                    actual_delta_fp: actual,
                    effectiveness_ratio: None,
                    effective: None,
                },
            }
        })
        .collect();
    Ok(DeltaFpDiagnostic { rows, effective_threshold: EFFECTIVE_RATIO })
}

/// Running per-category sums of the squared distance between the
/// replica-mean prediction and the one-hot ground truth.
#[derive(Clone, Debug)]
pub struct BiasAccumulator {
    classes: usize,
    sum: Vec<f64>,
    count: Vec<u64>,
}

impl BiasAccumulator {
    pub fn new(classes: usize) -> Self {
        BiasAccumulator { classes, sum: vec![0.0; classes], count: vec![0; classes] }
    }

    /// `replicas[r]` is replica `r`'s probability grid for this scene.
    pub fn add_scene(&mut self, replicas: &[ProbabilityGrid], labels: &[u8]) -> Result<()> {
        let first = replicas.first().ok_or_else(|| Error::invalid("no replica outputs"))?;
        let c = self.classes;
        if replicas.iter().any(|g| g.channels != c || g.pixels() != labels.len()) {
            return Err(Error::invalid("replica outputs do not match labels"));
        }
        let inv = 1.0 / replicas.len() as f64;
        let mut mean = vec![0.0; c];
        for (p, &y) in labels.iter().enumerate().take(first.pixels()) {
            if y == IGNORE {
                continue;
            }
            let y = y as usize;
            if y >= c {
                return Err(Error::invalid(format!("label {y} out of range")));
            }
            mean.fill(0.0);
            for g in replicas {
                mean.iter_mut().zip(g.at(p)).for_each(|(m, v)| *m += v * inv);
            }
            let dist: f64 = (0..c)
                .map(|k| {
                    let target = if k == y { 1.0 } else { 0.0 };
                    (mean[k] - target).powi(2)
                })
                .sum();
            self.sum[y] += dist;
            self.count[y] += 1;
        }
        Ok(())
    }

    pub fn finish(&self, grouping: &CategoryGrouping) -> BiasReport {
        let per_category: Vec<Option<f64>> =
            (0..self.classes).map(|k| (self.count[k] > 0).then(|| self.sum[k] / self.count[k] as f64)).collect();
        let group = |g: Group| mean((0..self.classes).filter(|&k| grouping.group_of[k] == g).filter_map(|k| per_category[k]));
        BiasReport {
            overall: mean(per_category.iter().flatten().copied()),
            head: group(Group::Head),
            body: group(Group::Body),
            tail: group(Group::Tail),
            per_category,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub per_category: Vec<Option<f64>>,
    pub head: Option<f64>,
    pub body: Option<f64>,
    pub tail: Option<f64>,
    pub overall: Option<f64>,
}

pub use crate::inference::bias_estimate;
