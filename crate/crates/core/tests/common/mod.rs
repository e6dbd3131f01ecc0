//! Shared test oracles.
#![allow(dead_code)]

use medoe::ensemble::{select_loss, CalibrationParams, ProbabilityGrid, SceneOutputs};
use medoe::losses::{aux_loss, ce_loss, combined_loss, focal_loss, MarginalTargets};
use medoe::model::LogitGrid;
use medoe::numeric::softmax;
use medoe::rng::{seeded, Rng};
use medoe::synthgen::{LabelSet, IGNORE};
use rand::Rng as _;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 24;

/// `|a − n| / max(|a|, |n|, 1e-6)`, maximized over components.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn central_diff(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + STEP;
            let up = f(&x);
            x[i] = orig - STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

pub struct Instance {
    pub logits: LogitGrid,
    pub labels: Vec<u8>,
    pub set: LabelSet,
    pub targets: MarginalTargets,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng: Rng = seeded(seed);
    let (h, w) = (rng.random_range(2..5), rng.random_range(2..5));
    let c = rng.random_range(3..7);
    let data = (0..h * w * c).map(|_| rng.random_range(-2.0..2.0)).collect();
    let logits = LogitGrid { height: h, width: w, channels: c, data };
    // A proper, nonempty subset with at least one labeled pixel inside it.
    let m = rng.random_range(1..c);
    let set = LabelSet::from_ids(c, (0..c).filter(|k| (k + seed as usize) % c < m));
    let inside: Vec<usize> = set.iter().collect();
    let mut labels: Vec<u8> = (0..h * w)
        .map(|_| match rng.random_range(0..10) {
            0 => IGNORE,
            _ => rng.random_range(0..c) as u8,
        })
        .collect();
    labels[0] = inside[rng.random_range(0..inside.len())] as u8;
    let weights: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
    let targets = MarginalTargets::from_weights(&weights, &set).unwrap();
    Instance { logits, labels, set, targets }
}

pub fn with_data(like: &LogitGrid, data: &[f64]) -> LogitGrid {
    LogitGrid { data: data.to_vec(), ..like.clone() }
}

/// Which analytic gradient to compare.
#[derive(Clone, Copy, Debug)]
pub enum Loss {
    Ce,
    AuxL2,
    AuxKl,
    Combined,
    Focal,
    Select,
}

pub const ALL_LOSSES: [Loss; 6] = [Loss::Ce, Loss::AuxL2, Loss::AuxKl, Loss::Combined, Loss::Focal, Loss::Select];

/// Max relative error between the analytic gradient and central finite
/// differences on random instance `seed`.
pub fn gradient_error(loss: Loss, seed: u64) -> f64 {
    if let Loss::Select = loss {
        let (scenes, calib) = select_instance(seed);
        let a = select_loss(&scenes, &calib).unwrap();
        let nw = central_diff(&calib.w, |x| select_loss(&scenes, &CalibrationParams { w: x.to_vec(), ..calib.clone() }).unwrap().value);
        let nb = central_diff(&calib.beta, |x| {
            select_loss(&scenes, &CalibrationParams { beta: x.to_vec(), ..calib.clone() }).unwrap().value
        });
        return max_rel_error(&a.grad.w, &nw).max(max_rel_error(&a.grad.beta, &nb));
    }
    let t = instance(seed);
    let alpha = 0.2 + 0.1 * (seed % 4) as f64;
    let gamma = if seed % 2 == 0 { 2.0 } else { 0.5 + (seed % 3) as f64 };
    let eval = |x: &[f64]| -> (f64, Vec<f64>) {
        let z = with_data(&t.logits, x);
        match loss {
            Loss::Ce => {
                let r = ce_loss(&z, &t.labels, &t.set).unwrap();
                (r.value, r.grad)
            }
            Loss::AuxL2 => {
                let r = aux_loss(&z, &t.labels, &t.set, &t.targets).unwrap().l2;
                (r.value, r.grad)
            }
            Loss::AuxKl => {
                let r = aux_loss(&z, &t.labels, &t.set, &t.targets).unwrap().kl;
                (r.value, r.grad)
            }
            Loss::Combined => {
                let r = combined_loss(&z, &t.labels, &t.set, &t.targets, alpha).unwrap();
                (r.total, r.grad)
            }
            Loss::Focal => {
                let r = focal_loss(&z, &t.labels, gamma).unwrap();
                (r.value, r.grad)
            }
            Loss::Select => unreachable!(),
        }
    };
    let analytic = eval(&t.logits.data).1;
    let numeric = central_diff(&t.logits.data, |x| eval(x).0);
    max_rel_error(&analytic, &numeric)
}

pub fn select_instance(seed: u64) -> (Vec<SceneOutputs>, CalibrationParams) {
    let mut rng: Rng = seeded(1000 + seed);
    let k = rng.random_range(1..4);
    let c = rng.random_range(2..6);
    let scenes = (0..2)
        .map(|_| {
            let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));
            let experts = (0..k)
                .map(|_| {
                    let data: Vec<f64> = (0..h * w)
                        .flat_map(|_| softmax(&(0..c).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>()))
                        .collect();
                    ProbabilityGrid { height: h, width: w, channels: c, data }
                })
                .collect();
            let labels = (0..h * w).map(|p| if p == 1 { IGNORE } else { rng.random_range(0..c) as u8 }).collect();
            SceneOutputs { experts, labels }
        })
        .collect();
    let mut calib = CalibrationParams::identity(k, c);
    for v in calib.w.iter_mut() {
        *v = rng.random_range(-2.0..4.0);
    }
    for v in calib.beta.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    (scenes, calib)
}

