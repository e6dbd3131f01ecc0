//! Running a trained model over scenes and scoring it under a combiner.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{self, Aggregated, Aggregator, CalibrationParams, ProbabilityGrid, SOFTMAX_THRESHOLD};
use crate::error::{Error, Result};
use crate::metrics::{self, BiasAccumulator, BiasReport, ConfusionMatrix, MetricsReport};
use crate::model::{backbone_forward, expert_forward_from_features, softmax_grid};
use crate::synthgen::SceneSample;
use crate::training::TrainedModel;

/// How the experts' outputs become one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Combiner {
    /// Learned calibration followed by averaging. Needs stage-2 training.
    Moe,
    /// Averaging with identity calibration (`w = 1`, `β = 0`).
    UniformAverage,
    /// Ground-truth driven expert choice; an upper bound, not a predictor.
    Oracle,
    SoftmaxThreshold(f64),
    Argmax,
    GroupAverage,
    /// One expert alone, 0-based.
    Single(usize),
}

impl fmt::Display for Combiner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Combiner::Moe => write!(f, "moe"),
            Combiner::UniformAverage => write!(f, "uniform-avg"),
            Combiner::Oracle => write!(f, "oracle"),
            Combiner::SoftmaxThreshold(t) if *t == SOFTMAX_THRESHOLD => write!(f, "softmax"),
            Combiner::SoftmaxThreshold(t) => write!(f, "softmax:{t}"),
            Combiner::Argmax => write!(f, "argmax"),
            Combiner::GroupAverage => write!(f, "group-avg"),
            Combiner::Single(k) => write!(f, "single:{}", k + 1),
        }
    }
}

impl FromStr for Combiner {
    type Err = Error;

    /// `moe`, `uniform-avg`, `oracle`, `softmax[:t]`, `argmax`, `group-avg`,
    /// `single:<k>` with 1-based `k`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || Error::invalid(format!("unknown combiner '{s}'"));
        match (name, arg) {
            ("moe", None) => Ok(Combiner::Moe),
            ("uniform-avg", None) => Ok(Combiner::UniformAverage),
            ("oracle", None) => Ok(Combiner::Oracle),
            ("softmax", None) => Ok(Combiner::SoftmaxThreshold(SOFTMAX_THRESHOLD)),
            ("softmax", Some(t)) => {
                let t: f64 = t.parse().map_err(|_| bad())?;
                if !(0.0..1.0).contains(&t) {
                    return Err(Error::invalid(format!("softmax threshold must be in [0, 1), got {t}")));
                }
                Ok(Combiner::SoftmaxThreshold(t))
            }
            ("argmax", None) => Ok(Combiner::Argmax),
            ("group-avg", None) => Ok(Combiner::GroupAverage),
            ("single", Some(k)) => match k.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(Combiner::Single(k - 1)),
                _ => Err(Error::invalid(format!("expert index in '{s}' must be a positive integer"))),
            },
            _ => Err(bad()),
        }
    }
}

/// Softmax outputs of every expert for one scene.
pub fn expert_probabilities(model: &TrainedModel, sample: &SceneSample) -> Result<Vec<ProbabilityGrid>> {
    let feat = backbone_forward(&model.backbone, sample)?;
    model
        .experts
        .iter()
        .map(|e| Ok(softmax_grid(&expert_forward_from_features(e, &feat)?.0)))
        .collect()
}

fn require_calibration(model: &TrainedModel) -> Result<&CalibrationParams> {
    model.calibration.as_ref().ok_or_else(|| {
        Error::invalid("the moe combiner needs a trained calibration; run `medoe train-moe` on this checkpoint first")
    })
}

/// Checks that `combiner` can run on `model` before any scene is processed.
pub fn check_combiner(model: &TrainedModel, combiner: Combiner) -> Result<()> {
    match combiner {
        Combiner::Moe => require_calibration(model).map(|_| ()),
        Combiner::Single(k) if k >= model.experts.len() => Err(Error::invalid(format!(
            "single:{} requested but the model has {} expert(s)",
            k + 1,
            model.experts.len()
        ))),
        _ => Ok(()),
    }
}

pub fn combine(model: &TrainedModel, probs: &[ProbabilityGrid], labels: &[u8], combiner: Combiner) -> Result<Aggregated> {
    check_combiner(model, combiner)?;
    let sets = &model.expert_sets;
    Ok(match combiner {
        Combiner::Moe => Aggregated::Probabilities(ensemble::moe_combine(probs, require_calibration(model)?)?),
        Combiner::UniformAverage => {
            let identity = CalibrationParams::identity(probs.len(), model.dims.classes);
            Aggregated::Probabilities(ensemble::moe_combine(probs, &identity)?)
        }
        Combiner::Oracle => Aggregated::Probabilities(ensemble::oracle_combine(probs, labels, sets)?),
        Combiner::SoftmaxThreshold(t) => ensemble::aggregate_baseline(probs, Aggregator::SoftmaxThreshold(t), sets)?,
        Combiner::Argmax => ensemble::aggregate_baseline(probs, Aggregator::Argmax, sets)?,
        Combiner::GroupAverage => ensemble::aggregate_baseline(probs, Aggregator::GroupAverage, sets)?,
        Combiner::Single(k) => Aggregated::Probabilities(probs[k].clone()),
    })
}

/// Combined output as a probability grid; label-valued combiners become
/// one-hot vectors.
pub fn combined_probabilities(
    model: &TrainedModel,
    probs: &[ProbabilityGrid],
    labels: &[u8],
    combiner: Combiner,
) -> Result<ProbabilityGrid> {
    match combine(model, probs, labels, combiner)? {
        Aggregated::Probabilities(p) => Ok(p),
        Aggregated::Labels(pred) => {
            let c = model.dims.classes;
            let mut out = ProbabilityGrid::zeros(probs[0].height, probs[0].width, c);
            for (p, &l) in pred.iter().enumerate() {
                out.data[p * c + l as usize] = 1.0;
            }
            Ok(out)
        }
    }
}

pub fn predict(model: &TrainedModel, sample: &SceneSample, combiner: Combiner) -> Result<Vec<u8>> {
    let probs = expert_probabilities(model, sample)?;
    Ok(combine(model, &probs, &sample.labels, combiner)?.labels())
}

/// Confusion matrix over `dataset`. Scenes are processed in parallel and
/// merged in scene order.
pub fn evaluate(model: &TrainedModel, dataset: &[SceneSample], combiner: Combiner) -> Result<ConfusionMatrix> {
    check_combiner(model, combiner)?;
    let c = model.dims.classes;
    let parts: Vec<ConfusionMatrix> = dataset
        .par_iter()
        .map(|s| metrics::confusion(&predict(model, s, combiner)?, &s.labels, c))
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(c);
    for part in &parts {
        cm.merge(part)?;
    }
    Ok(cm)
}

/// [`evaluate`] followed by [`metrics::report`] against the model's
/// training-set grouping and frequencies.
pub fn evaluate_report(model: &TrainedModel, dataset: &[SceneSample], combiner: Combiner) -> Result<MetricsReport> {
    let cm = evaluate(model, dataset, combiner)?;
    metrics::report(&cm, &model.grouping, &model.profile)
}

/// Squared distance between the replica-mean combined prediction and the
/// one-hot ground truth, per category and per group.
pub fn bias_estimate(replicas: &[TrainedModel], dataset: &[SceneSample], combiner: Combiner) -> Result<BiasReport> {
    if replicas.len() < 2 {
        return Err(Error::invalid(format!("bias needs at least 2 replicas, got {}", replicas.len())));
    }
    let first = &replicas[0];
    if replicas.iter().any(|r| r.dims != first.dims || r.grouping != first.grouping) {
        return Err(Error::invalid("replicas differ in architecture or grouping"));
    }
    let mut acc = BiasAccumulator::new(first.dims.classes);
    for sample in dataset {
        let outs = replicas
            .iter()
            .map(|m| combined_probabilities(m, &expert_probabilities(m, sample)?, &sample.labels, combiner))
            .collect::<Result<Vec<_>>>()?;
        acc.add_scene(&outs, &sample.labels)?;
    }
    Ok(acc.finish(&first.grouping))
}
