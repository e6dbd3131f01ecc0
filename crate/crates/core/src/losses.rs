//! Per-expert training losses and their analytic gradients with respect to
//! the logits.
//!
//! * [`ce_loss`]: cross-entropy over the pixels whose label is in the
//!   expert's set, softmax over all categories.
//! * [`aux_loss`]: squared suppression of the interfering (out-of-set)
//!   logit channels, plus the KL divergence between the expert's mean
//!   predicted marginal over its set and the dataset label marginal.
//! * [`combined_loss`]: `ce + alpha * (l2 + kl)`.
//! * [`focal_loss`]: the re-weighting baseline.
//!
//! Gradients share the logit grid layout (`pixels × classes`).

use crate::error::{Error, Result};
use crate::model::LogitGrid;
use crate::numeric;
use crate::synthgen::{FrequencyProfile, LabelSet, IGNORE};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-8;

/// Default weight of the auxiliary loss.
pub const DEFAULT_ALPHA: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossTerm {
    fn zero(len: usize) -> Self {
        LossTerm { value: 0.0, grad: vec![0.0; len] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxLoss {
    pub l2: LossTerm,
    pub kl: LossTerm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_aux_l2: f64,
    pub l_aux_kl: f64,
    pub alpha: f64,
    pub total: f64,
    pub grad: Vec<f64>,
}

impl LossBreakdown {
    pub fn l_aux(&self) -> f64 {
        self.l_aux_l2 + self.l_aux_kl
    }
}

/// Dataset-level label marginal restricted to an expert's category set.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalTargets {
    /// Indexed by category id; zero outside the set.
    pub q: Vec<f64>,
}

/// Smooth floor keeping a distribution over `m` categories normalized:
/// `(1 - m·ε)·p + ε`.
fn floor_mix(p: f64, m: usize) -> f64 {
    (1.0 - m as f64 * PROB_FLOOR) * p + PROB_FLOOR
}

impl MarginalTargets {
    /// Renormalizes `weights` over `set`, then floors each entry at 1e-8.
    pub fn from_weights(weights: &[f64], set: &LabelSet) -> Result<Self> {
        let m = set.len();
        if m == 0 {
            return Err(Error::invalid("empty category set"));
        }
        let total: f64 = set.iter().map(|k| weights[k]).sum();
        let mut q = vec![0.0; weights.len()];
        for k in set.iter() {
            let raw = if total > 0.0 { weights[k] / total } else { 1.0 / m as f64 };
            q[k] = floor_mix(raw, m);
        }
        Ok(MarginalTargets { q })
    }

    pub fn from_profile(profile: &FrequencyProfile, set: &LabelSet) -> Result<Self> {
        Self::from_weights(&profile.freqs, set)
    }
}

fn check_inputs(logits: &LogitGrid, labels: &[u8]) -> Result<()> {
    if labels.len() != logits.pixels() {
        return Err(Error::invalid(format!(
            "{} labels for a {}x{} logit grid",
            labels.len(),
            logits.height,
            logits.width
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l != IGNORE && l as usize >= logits.channels) {
        return Err(Error::invalid(format!("label {l} out of range for {} categories", logits.channels)));
    }
    Ok(())
}

/// Mean of `-log softmax(z)[y]` over pixels with `y ∈ allowed`.
pub fn ce_loss(logits: &LogitGrid, labels: &[u8], allowed: &LabelSet) -> Result<LossTerm> {
    check_inputs(logits, labels)?;
    let c = logits.channels;
    let n = labels.iter().filter(|&&l| allowed.contains(l)).count();
    let mut out = LossTerm::zero(logits.data.len());
    if n == 0 {
        return Ok(out);
    }
    let nf = n as f64;
    let mut sum = 0.0;
    let mut s = vec![0.0; c];
    for (p, &y) in labels.iter().enumerate() {
        if !allowed.contains(y) {
            continue;
        }
        let z = logits.at(p);
        let y = y as usize;
        sum -= z[y] - numeric::log_sum_exp(z);
        numeric::softmax_into(z, &mut s);
        let g = &mut out.grad[p * c..(p + 1) * c];
        for k in 0..c {
            let onehot = if k == y { 1.0 } else { 0.0 };
            g[k] = (s[k] - onehot) / nf;
        }
    }
    out.value = sum / nf;
    Ok(out)
}

/// Interfering-channel suppression and marginal-matching KL terms.
pub fn aux_loss(logits: &LogitGrid, labels: &[u8], allowed: &LabelSet, targets: &MarginalTargets) -> Result<AuxLoss> {
    check_inputs(logits, labels)?;
    let c = logits.channels;
    if targets.q.len() != c || allowed.classes() != c {
        return Err(Error::invalid("category count mismatch between logits, set and targets"));
    }
    let len = logits.data.len();

    // Mean over all pixels of Σ_{j ∉ S} z_j².
    let mut l2 = LossTerm::zero(len);
    let interfering: Vec<usize> = allowed.complement().iter().collect();
    let npix = logits.pixels();
    if !interfering.is_empty() && npix > 0 {
        let nf = npix as f64;
        let mut sum = 0.0;
        for p in 0..npix {
            for &j in &interfering {
                let z = logits.data[p * c + j];
                sum += z * z;
                l2.grad[p * c + j] = 2.0 * z / nf;
            }
        }
        l2.value = sum / nf;
    }

    // KL(r || q) where r is the contributing-pixel mean softmax restricted to
    // S, renormalized and floored.
    let mut kl = LossTerm::zero(len);
    let contributing: Vec<usize> = (0..npix).filter(|&p| allowed.contains(labels[p])).collect();
    let members: Vec<usize> = allowed.iter().collect();
    let m = members.len();
    if !contributing.is_empty() && m > 0 {
        let nf = contributing.len() as f64;
        let mut soft = vec![0.0; contributing.len() * c];
        let mut mean = vec![0.0; c];
        for (i, &p) in contributing.iter().enumerate() {
            let s = &mut soft[i * c..(i + 1) * c];
            numeric::softmax_into(logits.at(p), s);
            mean.iter_mut().zip(s.iter()).for_each(|(a, b)| *a += b);
        }
        mean.iter_mut().for_each(|a| *a /= nf);
        let total: f64 = members.iter().map(|&k| mean[k]).sum();
        let a = 1.0 - m as f64 * PROB_FLOOR;
        let mut value = 0.0;
        let mut g_r = vec![0.0; c];
        let mut r = vec![0.0; c];
        for &k in &members {
            r[k] = mean[k] / total;
            let rf = floor_mix(r[k], m);
            let ratio = (rf / targets.q[k]).ln();
            value += rf * ratio;
            g_r[k] = a * (ratio + 1.0);
        }
        kl.value = value;
        // Through the renormalization r = mean_S / T.
        let dot: f64 = members.iter().map(|&k| g_r[k] * r[k]).sum();
        let mut g_mean = vec![0.0; c];
        for &k in &members {
            g_mean[k] = (g_r[k] - dot) / total;
        }
        // Through the mean and each pixel's softmax.
        for (i, &p) in contributing.iter().enumerate() {
            let s = &soft[i * c..(i + 1) * c];
            let inner: f64 = (0..c).map(|k| g_mean[k] * s[k]).sum::<f64>() / nf;
            let g = &mut kl.grad[p * c..(p + 1) * c];
            for k in 0..c {
                g[k] = s[k] * (g_mean[k] / nf - inner);
            }
        }
    }
    Ok(AuxLoss { l2, kl })
}

/// `ce + alpha · (l2 + kl)` with the summed gradient.
pub fn combined_loss(
    logits: &LogitGrid,
    labels: &[u8],
    allowed: &LabelSet,
    targets: &MarginalTargets,
    alpha: f64,
) -> Result<LossBreakdown> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha must be non-negative, got {alpha}")));
    }
    let ce = ce_loss(logits, labels, allowed)?;
    if alpha == 0.0 {
        return Ok(LossBreakdown { l_ce: ce.value, l_aux_l2: 0.0, l_aux_kl: 0.0, alpha, total: ce.value, grad: ce.grad });
    }
    let aux = aux_loss(logits, labels, allowed, targets)?;
    let mut grad = ce.grad;
    for ((g, a), b) in grad.iter_mut().zip(&aux.l2.grad).zip(&aux.kl.grad) {
        *g += alpha * (a + b);
    }
    Ok(LossBreakdown {
        l_ce: ce.value,
        l_aux_l2: aux.l2.value,
        l_aux_kl: aux.kl.value,
        alpha,
        total: ce.value + alpha * (aux.l2.value + aux.kl.value),
        grad,
    })
}

/// Mean over labeled pixels of `-(1 - p_t)^gamma · log p_t`.
pub fn focal_loss(logits: &LogitGrid, labels: &[u8], gamma: f64) -> Result<LossTerm> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("focal gamma must be non-negative, got {gamma}")));
    }
    check_inputs(logits, labels)?;
    let c = logits.channels;
    let n = labels.iter().filter(|&&l| l != IGNORE).count();
    let mut out = LossTerm::zero(logits.data.len());
    if n == 0 {
        return Ok(out);
    }
    let nf = n as f64;
    let mut sum = 0.0;
    let mut s = vec![0.0; c];
    for (p, &y) in labels.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        let z = logits.at(p);
        let y = y as usize;
        let log_p = z[y] - numeric::log_sum_exp(z);
        numeric::softmax_into(z, &mut s);
        // 1 - p_t from the other classes, without cancellation.
        let rest: f64 = (0..c).filter(|&k| k != y).map(|k| s[k]).sum();
        let modulation = rest.powf(gamma);
        sum -= modulation * log_p;
        // d/dz_k = [(1-p)^γ − γ (1-p)^(γ-1) p log p] (s_k − δ_ky)
        let correction = if gamma == 0.0 || rest == 0.0 {
            0.0
        } else {
            gamma * rest.powf(gamma - 1.0) * s[y] * log_p
        };
        let factor = modulation - correction;
        let g = &mut out.grad[p * c..(p + 1) * c];
        for k in 0..c {
            let onehot = if k == y { 1.0 } else { 0.0 };
            g[k] = factor * (s[k] - onehot) / nf;
        }
    }
    out.value = sum / nf;
    Ok(out)
}
