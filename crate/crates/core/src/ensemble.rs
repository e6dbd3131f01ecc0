//! Combining expert outputs at inference time.
//!
//! The learned combiner calibrates each expert's probabilities per category,
//! `p̂_i = softmax(w_i ⊙ p_i + β_i)`, and averages the calibrated vectors
//! over experts. The oracle combiner reads the ground truth to pick, per
//! pixel, the most specialized expert whose set contains the true label; it
//! is an upper bound, not a deployable predictor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureGrid;
use crate::numeric;
use crate::synthgen::{LabelSet, IGNORE};

/// Per-pixel probability vectors over all categories.
pub type ProbabilityGrid = FeatureGrid;

/// Per-expert, per-category weights and biases, row-major `experts × classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub experts: usize,
    pub classes: usize,
    pub w: Vec<f64>,
    pub beta: Vec<f64>,
}

impl CalibrationParams {
    /// `w = 1`, `β = 0`.
    pub fn identity(experts: usize, classes: usize) -> Self {
        CalibrationParams { experts, classes, w: vec![1.0; experts * classes], beta: vec![0.0; experts * classes] }
    }

    pub fn zeros(experts: usize, classes: usize) -> Self {
        CalibrationParams { experts, classes, w: vec![0.0; experts * classes], beta: vec![0.0; experts * classes] }
    }

    pub fn w_row(&self, expert: usize) -> &[f64] {
        &self.w[expert * self.classes..(expert + 1) * self.classes]
    }

    pub fn beta_row(&self, expert: usize) -> &[f64] {
        &self.beta[expert * self.classes..(expert + 1) * self.classes]
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.beta).all(|v| v.is_finite())
    }

    fn check(&self, experts: usize, classes: usize) -> Result<()> {
        if self.experts != experts || self.classes != classes {
            return Err(Error::invalid(format!(
                "calibration is {}x{}, outputs are {experts}x{classes}",
                self.experts, self.classes
            )));
        }
        Ok(())
    }
}

fn check_grids(expert_probs: &[ProbabilityGrid]) -> Result<()> {
    let first = expert_probs.first().ok_or_else(|| Error::invalid("no expert outputs"))?;
    if expert_probs
        .iter()
        .any(|g| g.height != first.height || g.width != first.width || g.channels != first.channels)
    {
        return Err(Error::invalid("expert outputs differ in shape"));
    }
    Ok(())
}

#[inline]
fn calibrate_pixel(p: &[f64], w: &[f64], beta: &[f64], scratch: &mut [f64], out: &mut [f64]) {
    for k in 0..p.len() {
        scratch[k] = w[k] * p[k] + beta[k];
    }
    numeric::softmax_into(scratch, out);
}

/// `softmax(w_i ⊙ p + β_i)` at every pixel.
pub fn calibrate(p: &ProbabilityGrid, calib: &CalibrationParams, expert: usize) -> Result<ProbabilityGrid> {
    if expert >= calib.experts || calib.classes != p.channels {
        return Err(Error::invalid("calibration does not match expert output"));
    }
    let c = p.channels;
    let mut out = p.clone();
    let mut scratch = vec![0.0; c];
    let (w, beta) = (calib.w_row(expert), calib.beta_row(expert));
    for (src, dst) in p.data.chunks_exact(c).zip(out.data.chunks_exact_mut(c)) {
        calibrate_pixel(src, w, beta, &mut scratch, dst);
    }
    Ok(out)
}

/// Average of the calibrated expert outputs.
pub fn moe_combine(expert_probs: &[ProbabilityGrid], calib: &CalibrationParams) -> Result<ProbabilityGrid> {
    check_grids(expert_probs)?;
    let k = expert_probs.len();
    let c = expert_probs[0].channels;
    calib.check(k, c)?;
    let mut out = ProbabilityGrid::zeros(expert_probs[0].height, expert_probs[0].width, c);
    let mut scratch = vec![0.0; c];
    let mut hat = vec![0.0; c];
    for (i, grid) in expert_probs.iter().enumerate() {
        let (w, beta) = (calib.w_row(i), calib.beta_row(i));
        for (src, dst) in grid.data.chunks_exact(c).zip(out.data.chunks_exact_mut(c)) {
            calibrate_pixel(src, w, beta, &mut scratch, &mut hat);
            dst.iter_mut().zip(&hat).for_each(|(d, h)| *d += h);
        }
    }
    let inv = 1.0 / k as f64;
    out.data.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

/// Index of the expert that answers for ground-truth label `y`: the `n` with
/// `y ∈ S_n` and `y ∉ S_{n+1}`.
pub fn oracle_expert(y: u8, expert_sets: &[LabelSet]) -> Option<usize> {
    (0..expert_sets.len()).find(|&n| {
        expert_sets[n].contains(y) && expert_sets.get(n + 1).is_none_or(|next| !next.contains(y))
    })
}

/// Ground-truth-guided selection of one expert per pixel. IGNORE pixels take
/// expert 1's output.
pub fn oracle_combine(expert_probs: &[ProbabilityGrid], labels: &[u8], expert_sets: &[LabelSet]) -> Result<ProbabilityGrid> {
    check_grids(expert_probs)?;
    if expert_sets.len() != expert_probs.len() {
        return Err(Error::invalid(format!(
            "{} expert sets for {} experts",
            expert_sets.len(),
            expert_probs.len()
        )));
    }
    let c = expert_probs[0].channels;
    if labels.len() != expert_probs[0].pixels() {
        return Err(Error::invalid("label grid does not match expert outputs"));
    }
    let mut out = expert_probs[0].clone();
    for (p, &y) in labels.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        let n = oracle_expert(y, expert_sets)
            .ok_or_else(|| Error::invalid(format!("label {y} belongs to no expert set")))?;
        if n != 0 {
            out.data[p * c..(p + 1) * c].copy_from_slice(expert_probs[n].at(p));
        }
    }
    Ok(out)
}

/// User-specified combination rules used as ablation baselines.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Aggregator {
    /// Scan experts from the most specialized to expert 1; the first whose
    /// most probable in-set category exceeds the threshold wins. Falls back
    /// to expert 1's argmax.
    SoftmaxThreshold(f64),
    /// The category of the single most confident expert.
    Argmax,
    /// Category-wise mean over the experts whose set contains the category,
    /// renormalized.
    GroupAverage,
}

/// Default threshold of [`Aggregator::SoftmaxThreshold`].
pub const SOFTMAX_THRESHOLD: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub enum Aggregated {
    Probabilities(ProbabilityGrid),
    Labels(Vec<u8>),
}

impl Aggregated {
    pub fn labels(&self) -> Vec<u8> {
        match self {
            Aggregated::Labels(l) => l.clone(),
            Aggregated::Probabilities(p) => argmax_labels(p),
        }
    }
}

pub fn argmax_labels(p: &ProbabilityGrid) -> Vec<u8> {
    p.data.chunks_exact(p.channels).map(|v| numeric::argmax(v) as u8).collect()
}

pub fn aggregate_baseline(expert_probs: &[ProbabilityGrid], method: Aggregator, expert_sets: &[LabelSet]) -> Result<Aggregated> {
    check_grids(expert_probs)?;
    if expert_sets.len() != expert_probs.len() {
        return Err(Error::invalid("one category set per expert required"));
    }
    let c = expert_probs[0].channels;
    let n = expert_probs[0].pixels();
    match method {
        Aggregator::SoftmaxThreshold(threshold) => {
            let labels = (0..n)
                .map(|p| {
                    for (grid, set) in expert_probs.iter().zip(expert_sets).rev() {
                        let v = grid.at(p);
                        let best = set.iter().max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a)));
                        if let Some(j) = best.filter(|&j| v[j] > threshold) {
                            return j as u8;
                        }
                    }
                    numeric::argmax(expert_probs[0].at(p)) as u8
                })
                .collect();
            Ok(Aggregated::Labels(labels))
        }
        Aggregator::Argmax => {
            let labels = (0..n)
                .map(|p| {
                    let mut best = (f64::NEG_INFINITY, 0usize);
                    for grid in expert_probs {
                        let v = grid.at(p);
                        let j = numeric::argmax(v);
                        if v[j] > best.0 {
                            best = (v[j], j);
                        }
                    }
                    best.1 as u8
                })
                .collect();
            Ok(Aggregated::Labels(labels))
        }
        Aggregator::GroupAverage => {
            let mut out = ProbabilityGrid::zeros(expert_probs[0].height, expert_probs[0].width, c);
            let owners: Vec<f64> = (0..c).map(|j| expert_sets.iter().filter(|s| s.contains_id(j)).count() as f64).collect();
            for p in 0..n {
                let dst = &mut out.data[p * c..(p + 1) * c];
                for (grid, set) in expert_probs.iter().zip(expert_sets) {
                    for j in set.iter() {
                        dst[j] += grid.at(p)[j];
                    }
                }
                for j in 0..c {
                    if owners[j] > 0.0 {
                        dst[j] /= owners[j];
                    }
                }
                let total: f64 = dst.iter().sum();
                if total > 0.0 {
                    dst.iter_mut().for_each(|v| *v /= total);
                } else {
                    dst.fill(1.0 / c as f64);
                }
            }
            Ok(Aggregated::Probabilities(out))
        }
    }
}

/// Expert outputs and ground truth of one scene, the unit of combiner training.
#[derive(Clone, Debug)]
pub struct SceneOutputs {
    pub experts: Vec<ProbabilityGrid>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct SelectLoss {
    /// Mean cross-entropy of the combined prediction over labeled pixels.
    pub value: f64,
    pub labeled: usize,
    /// Gradient with respect to `w` and `β`, same layout as the calibration.
    pub grad: CalibrationParams,
}

/// Cross-entropy between the combined prediction and the one-hot ground
/// truth, averaged over all labeled pixels of `scenes`, with its gradient.
pub fn select_loss(scenes: &[SceneOutputs], calib: &CalibrationParams) -> Result<SelectLoss> {
    let k = calib.experts;
    let c = calib.classes;
    let mut grad = CalibrationParams::zeros(k, c);
    let mut sum = 0.0;
    let mut labeled = 0usize;
    let mut scratch = vec![0.0; c];
    let mut hats = vec![0.0; k * c];
    for scene in scenes {
        check_grids(&scene.experts)?;
        calib.check(scene.experts.len(), scene.experts[0].channels)?;
        for (p, &y) in scene.labels.iter().enumerate() {
            if y == IGNORE {
                continue;
            }
            let y = y as usize;
            if y >= c {
                return Err(Error::invalid(format!("label {y} out of range for {c} categories")));
            }
            labeled += 1;
            let mut p_final = 0.0;
            for i in 0..k {
                let hat = &mut hats[i * c..(i + 1) * c];
                calibrate_pixel(scene.experts[i].at(p), calib.w_row(i), calib.beta_row(i), &mut scratch, hat);
                p_final += hat[y];
            }
            p_final /= k as f64;
            sum -= p_final.ln();
            // dL/du_ij = -(1 / (K p_final)) · p̂_iy (δ_jy − p̂_ij)
            let g_y = -1.0 / (k as f64 * p_final);
            for i in 0..k {
                let hat = &hats[i * c..(i + 1) * c];
                let probs = scene.experts[i].at(p);
                for j in 0..c {
                    let delta = if j == y { 1.0 } else { 0.0 };
                    let du = g_y * hat[y] * (delta - hat[j]);
                    grad.beta[i * c + j] += du;
                    grad.w[i * c + j] += du * probs[j];
                }
            }
        }
    }
    if labeled > 0 {
        let inv = 1.0 / labeled as f64;
        grad.w.iter_mut().chain(grad.beta.iter_mut()).for_each(|g| *g *= inv);
        sum *= inv;
    }
    Ok(SelectLoss { value: sum, labeled, grad })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(c: usize, data: Vec<f64>) -> ProbabilityGrid {
        ProbabilityGrid { height: 1, width: data.len() / c, channels: c, data }
    }

    #[test]
    fn calibrate_worked_example() {
        let p = grid(3, vec![0.7, 0.2, 0.1]);
        let out = calibrate(&p, &CalibrationParams::identity(1, 3), 0).unwrap();
        // exp(0.7), exp(0.2), exp(0.1) normalized.
        let e = [0.7f64.exp(), 0.2f64.exp(), 0.1f64.exp()];
        let s: f64 = e.iter().sum();
        for (o, x) in out.data.iter().zip(e) {
            assert!((o - x / s).abs() < 1e-15);
        }
        for (o, x) in out.data.iter().zip([0.4640, 0.2814, 0.2546]) {
            assert!((o - x).abs() < 1e-3);
        }
    }

    #[test]
    fn large_negative_bias_suppresses() {
        let p = grid(3, vec![0.7, 0.2, 0.1]);
        let mut cal = CalibrationParams::identity(1, 3);
        cal.beta[0] = -50.0;
        let out = calibrate(&p, &cal, 0).unwrap();
        assert!(out.data[0] < 1e-20);
    }

    #[test]
    fn moe_examples() {
        let a = grid(2, vec![1.0, 0.0]);
        let b = grid(2, vec![0.0, 1.0]);
        // Calibration that maps one-hot inputs to (near) one-hot outputs.
        let mut cal = CalibrationParams::identity(2, 2);
        cal.w.iter_mut().for_each(|w| *w = 80.0);
        let out = moe_combine(&[a.clone(), b], &cal).unwrap();
        assert!((out.data[0] - 0.5).abs() < 1e-12 && (out.data[1] - 0.5).abs() < 1e-12);

        let ident = CalibrationParams::identity(3, 2);
        let same = moe_combine(&[a.clone(), a.clone(), a.clone()], &ident).unwrap();
        let single = calibrate(&a, &CalibrationParams::identity(1, 2), 0).unwrap();
        for (x, y) in same.data.iter().zip(&single.data) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(moe_combine(&[a.clone()], &ident).is_err());
    }

    fn sets() -> Vec<LabelSet> {
        vec![LabelSet::all(3), LabelSet::from_ids(3, [1, 2]), LabelSet::from_ids(3, [2])]
    }

    #[test]
    fn oracle_selects_dominating_expert() {
        assert_eq!(oracle_expert(0, &sets()), Some(0));
        assert_eq!(oracle_expert(1, &sets()), Some(1));
        assert_eq!(oracle_expert(2, &sets()), Some(2));
        let e: Vec<ProbabilityGrid> = (0..3).map(|i| grid(3, vec![i as f64, 0.5, 0.25, i as f64 + 1.0, 0.0, 0.0])).collect();
        let out = oracle_combine(&e, &[2, IGNORE], &sets()).unwrap();
        assert_eq!(out.at(0), e[2].at(0));
        assert_eq!(out.at(1), e[0].at(1));
        let bad = vec![LabelSet::from_ids(3, [0]), LabelSet::from_ids(3, [0]), LabelSet::from_ids(3, [0])];
        assert!(oracle_combine(&e, &[1, 0], &bad).is_err());
    }

    #[test]
    fn threshold_prefers_specialists() {
        let e1 = grid(3, vec![0.8, 0.1, 0.1]);
        let e2 = grid(3, vec![0.5, 0.25, 0.25]);
        let e3 = grid(3, vec![0.05, 0.05, 0.9]);
        let out = aggregate_baseline(&[e1.clone(), e2.clone(), e3], Aggregator::SoftmaxThreshold(0.3), &sets()).unwrap();
        assert_eq!(out.labels(), vec![2]);
        let e3_unsure = grid(3, vec![0.5, 0.3, 0.2]);
        let out = aggregate_baseline(&[e1, e2, e3_unsure], Aggregator::SoftmaxThreshold(0.3), &sets()).unwrap();
        assert_eq!(out.labels(), vec![0]);
    }

    #[test]
    fn single_expert_aggregators_are_argmax() {
        let e = grid(3, vec![0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 0.4, 0.35, 0.25]);
        let set = vec![LabelSet::all(3)];
        for m in [Aggregator::SoftmaxThreshold(0.3), Aggregator::Argmax, Aggregator::GroupAverage] {
            assert_eq!(aggregate_baseline(&[e.clone()], m, &set).unwrap().labels(), vec![1, 2, 0]);
        }
    }
}
