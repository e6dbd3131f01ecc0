//! Stage-1 expert training, stage-2 calibration fitting, the re-balancing
//! baselines and replica training.
//!
//! Stage 1 runs every expert on each minibatch. Expert `i` sees labels
//! masked to its set `S_i` and is trained on `ce + α·(l2 + kl)`. Each expert
//! updates its own context module and head; the shared backbone is updated
//! from expert 1's gradient only.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{select_loss, CalibrationParams, SceneOutputs};
use crate::error::{Error, Result};
use crate::inference::expert_probabilities;
use crate::losses::{ce_loss, combined_loss, focal_loss, MarginalTargets, DEFAULT_ALPHA};
use crate::model::{
    backbone_backward, backbone_forward, expert_backward, expert_forward_from_features, init_params, BackboneParams,
    ExpertParams, FeatureGrid, LogitGrid, ModelDims,
};
use crate::rng::{self, streams};
use crate::synthgen::{
    compute_frequency, masked_labels, CategoryGrouping, FrequencyProfile, Group, LabelSet, SceneSample, IGNORE,
    NUM_EXPERTS,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Three experts on nested label masks with the auxiliary loss.
    Medoe,
    /// One expert, all categories, plain cross-entropy.
    Baseline,
    /// Like `Medoe`, but all experts share expert 1's context module.
    Mcn,
    /// One expert trained with focal loss.
    Focal { gamma: f64 },
    /// One expert with plain cross-entropy on labels where head pixels are
    /// randomly dropped before each epoch. `ratio` is the fraction of head
    /// pixels kept; `None` keeps as many head pixels as there are body pixels.
    UnderSample { ratio: Option<f64> },
}

impl TrainMode {
    pub fn experts(&self) -> usize {
        match self {
            TrainMode::Medoe | TrainMode::Mcn => NUM_EXPERTS,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Medoe => "medoe",
            TrainMode::Baseline => "baseline",
            TrainMode::Mcn => "mcn",
            TrainMode::Focal { .. } => "focal",
            TrainMode::UnderSample { .. } => "undersample",
        }
    }

    /// Whether the mode trains a multi-expert model that stage 2 can calibrate.
    pub fn is_multi_expert(&self) -> bool {
        self.experts() > 1
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMode::Focal { gamma } => write!(f, "focal:{gamma}"),
            TrainMode::UnderSample { ratio: Some(r) } => write!(f, "undersample:{r}"),
            m => f.write_str(m.name()),
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    /// `medoe`, `baseline`, `mcn`, `focal[:gamma]` (default 2),
    /// `undersample[:ratio]`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.trim().split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.trim(), None),
        };
        let num = |a: &str| a.parse::<f64>().map_err(|_| Error::invalid(format!("bad number '{a}' in mode '{s}'")));
        match (name, arg) {
            ("medoe", None) => Ok(TrainMode::Medoe),
            ("baseline", None) => Ok(TrainMode::Baseline),
            ("mcn", None) => Ok(TrainMode::Mcn),
            ("focal", None) => Ok(TrainMode::Focal { gamma: 2.0 }),
            ("focal", Some(g)) => Ok(TrainMode::Focal { gamma: num(g)? }),
            ("undersample", None) => Ok(TrainMode::UnderSample { ratio: None }),
            ("undersample", Some(r)) => Ok(TrainMode::UnderSample { ratio: Some(num(r)?) }),
            _ => Err(Error::invalid(format!("unknown training mode '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: usize,
    pub lr: f64,
    /// Scenes per step.
    pub batch: usize,
    pub alpha: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Scale the learning rate by `(1 − step/iters)^0.9`.
    pub poly: bool,
    pub hidden: usize,
    pub context: usize,
    pub window_radius: usize,
    /// Per-expert multipliers on the loss gradient; empty means all ones.
    pub loss_weights: Vec<f64>,
    pub moe_iters: usize,
    pub moe_lr: f64,
    pub moe_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 400,
            lr: 0.1,
            batch: 2,
            alpha: DEFAULT_ALPHA,
            seed: 0,
            mode: TrainMode::Medoe,
            poly: false,
            hidden: 16,
            context: 16,
            window_radius: 2,
            loss_weights: Vec::new(),
            moe_iters: 1000,
            moe_lr: 20.0,
            moe_batch: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::invalid("iters must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be a non-negative number, got {}", self.lr)));
        }
        if self.batch == 0 || self.moe_batch == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.moe_lr >= 0.0 && self.moe_lr.is_finite()) {
            return Err(Error::invalid("moe_lr must be a non-negative number"));
        }
        match self.mode {
            TrainMode::Focal { gamma } if !(gamma >= 0.0 && gamma.is_finite()) => {
                return Err(Error::invalid(format!("focal gamma must be non-negative, got {gamma}")));
            }
            TrainMode::UnderSample { ratio: Some(r) } if !(r > 0.0 && r <= 1.0) => {
                return Err(Error::invalid(format!("under-sampling ratio must be in (0, 1], got {r}")));
            }
            _ => {}
        }
        if !self.loss_weights.is_empty() && self.loss_weights.len() != self.mode.experts() {
            return Err(Error::invalid(format!(
                "{} loss weights for {} experts",
                self.loss_weights.len(),
                self.mode.experts()
            )));
        }
        Ok(())
    }

    fn loss_weight(&self, expert: usize) -> f64 {
        self.loss_weights.get(expert).copied().unwrap_or(1.0)
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.poly {
            self.lr * (1.0 - step as f64 / self.iters as f64).powf(0.9)
        } else {
            self.lr
        }
    }

    /// Flat key/value echo for provenance.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("iters".into(), self.iters.to_string());
        m.insert("lr".into(), self.lr.to_string());
        m.insert("batch".into(), self.batch.to_string());
        m.insert("alpha".into(), self.alpha.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("mode".into(), self.mode.to_string());
        if let TrainMode::Focal { gamma } = self.mode {
            m.insert("gamma".into(), gamma.to_string());
        }
        m.insert("poly".into(), self.poly.to_string());
        m.insert("hidden".into(), self.hidden.to_string());
        m.insert("context".into(), self.context.to_string());
        m.insert("window_radius".into(), self.window_radius.to_string());
        if !self.loss_weights.is_empty() {
            let w: Vec<String> = self.loss_weights.iter().map(f64::to_string).collect();
            m.insert("loss_weights".into(), w.join(","));
        }
        m.insert("moe_iters".into(), self.moe_iters.to_string());
        m.insert("moe_lr".into(), self.moe_lr.to_string());
        m.insert("moe_batch".into(), self.moe_batch.to_string());
        m
    }
}

/// One row of the stage-1 loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub expert: usize,
    pub l_ce: f64,
    pub l_aux: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Provenance {
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub trace: Vec<TraceRow>,
    /// Stage-2 selection loss per step.
    pub moe_trace: Vec<f64>,
}

impl Provenance {
    /// `step,expert,l_ce,l_aux,total` with 1-based expert numbers.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,expert,l_ce,l_aux,total\n");
        for r in &self.trace {
            out.push_str(&format!("{},{},{},{},{}\n", r.step, r.expert + 1, r.l_ce, r.l_aux, r.total));
        }
        out
    }

    /// Per-expert total loss over steps.
    pub fn expert_losses(&self, expert: usize) -> Vec<f64> {
        self.trace.iter().filter(|r| r.expert == expert).map(|r| r.total).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub dims: ModelDims,
    pub mode: TrainMode,
    pub backbone: BackboneParams,
    pub experts: Vec<ExpertParams>,
    /// Category set of each expert; a single-expert model has only `S_1`.
    pub expert_sets: Vec<LabelSet>,
    pub grouping: CategoryGrouping,
    /// Training-set pixel frequencies.
    pub profile: FrequencyProfile,
    pub calibration: Option<CalibrationParams>,
    pub provenance: Provenance,
}

impl TrainedModel {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let k = self.experts.len();
        if k != self.dims.experts || k != self.expert_sets.len() {
            return Err(Error::invalid(format!(
                "{k} experts, {} declared, {} category sets",
                self.dims.experts,
                self.expert_sets.len()
            )));
        }
        if self.grouping.classes() != self.dims.classes || self.profile.classes() != self.dims.classes {
            return Err(Error::invalid("grouping or profile disagrees with the category count"));
        }
        if let Some(c) = &self.calibration {
            if c.experts != k || c.classes != self.dims.classes {
                return Err(Error::invalid("calibration shape does not match the model"));
            }
        }
        Ok(())
    }
}

/// Scene order of one epoch at a time, reshuffled each epoch.
struct Batcher {
    seed: u64,
    n: usize,
    batch: usize,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(seed: u64, n: usize, batch: usize) -> Self {
        Batcher { seed, n, batch: batch.min(n), epoch: 0, order: Vec::new(), pos: n }
    }

    /// Next minibatch in ascending scene order, and whether it starts an epoch.
    fn next_batch(&mut self) -> (Vec<usize>, bool) {
        let fresh = self.pos >= self.n;
        if fresh {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut rng::substream(self.seed, self.epoch));
            self.epoch += 1;
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.n);
        let mut b = self.order[self.pos..end].to_vec();
        self.pos = end;
        b.sort_unstable();
        (b, fresh)
    }

    fn epoch(&self) -> u64 {
        self.epoch
    }
}

/// Number of head pixels kept by under-sampling. `None` keeps as many as
/// there are body pixels.
pub fn undersample_quota(profile: &FrequencyProfile, grouping: &CategoryGrouping, ratio: Option<f64>) -> u64 {
    let sum = |g: Group| grouping.members(g).iter().map(|&k| profile.counts[k]).sum::<u64>();
    let head = sum(Group::Head);
    match ratio {
        None => sum(Group::Body).min(head),
        Some(r) => ((r * head as f64).round() as u64).min(head),
    }
}

/// Labels of one epoch with all but `keep` randomly chosen head pixels set
/// to IGNORE.
fn undersample_labels(dataset: &[SceneSample], grouping: &CategoryGrouping, keep: u64, seed: u64, epoch: u64) -> Vec<Vec<u8>> {
    let mut labels: Vec<Vec<u8>> = dataset.iter().map(|s| s.labels.clone()).collect();
    let mut head_pixels: Vec<(u32, u32)> = Vec::new();
    for (s, sample) in dataset.iter().enumerate() {
        for (p, &l) in sample.labels.iter().enumerate() {
            if l != IGNORE && grouping.group_of[l as usize] == Group::Head {
                head_pixels.push((s as u32, p as u32));
            }
        }
    }
    let keep = (keep as usize).min(head_pixels.len());
    let mut kept = vec![false; head_pixels.len()];
    let mut rng = rng::substream(rng::derive_seed(seed, streams::UNDERSAMPLE), epoch);
    for i in index::sample(&mut rng, head_pixels.len(), keep) {
        kept[i] = true;
    }
    for (&(s, p), k) in head_pixels.iter().zip(kept) {
        if !k {
            labels[s as usize][p as usize] = IGNORE;
        }
    }
    labels
}

fn stack(grids: &[LogitGrid]) -> LogitGrid {
    let first = &grids[0];
    let mut data = Vec::with_capacity(grids.iter().map(|g| g.data.len()).sum());
    for g in grids {
        data.extend_from_slice(&g.data);
    }
    LogitGrid { height: first.height * grids.len(), width: first.width, channels: first.channels, data }
}

fn slice_grid(grad: &[f64], scene: usize, like: &LogitGrid) -> LogitGrid {
    let len = like.data.len();
    LogitGrid { height: like.height, width: like.width, channels: like.channels, data: grad[scene * len..(scene + 1) * len].to_vec() }
}

fn add_into(acc: &mut ExpertParams, g: &ExpertParams) {
    acc.context.add_scaled(&g.context, 1.0);
    acc.head.add_scaled(&g.head, 1.0);
}

struct StepLoss {
    l_ce: f64,
    l_aux: f64,
    total: f64,
    grad: Vec<f64>,
}

fn check_dataset(dataset: &[SceneSample], grouping: &CategoryGrouping) -> Result<()> {
    let first = dataset.first().ok_or_else(|| Error::invalid("empty training set"))?;
    for s in dataset {
        if (s.height, s.width, s.dim) != (first.height, first.width, first.dim) {
            return Err(Error::invalid("scenes differ in size or feature width"));
        }
        s.check_labels(grouping.classes())?;
    }
    Ok(())
}

/// Stage 1: trains the backbone and all experts of `cfg.mode`.
pub fn train_stage1(dataset: &[SceneSample], grouping: &CategoryGrouping, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    check_dataset(dataset, grouping)?;
    let classes = grouping.classes();
    let k = cfg.mode.experts();
    let dims = ModelDims {
        input_dim: dataset[0].dim,
        hidden: cfg.hidden,
        context: cfg.context,
        classes,
        window_radius: cfg.window_radius,
        experts: k,
    };
    let (mut backbone, mut experts) = init_params(cfg.seed, &dims)?;
    let shared_context = cfg.mode == TrainMode::Mcn;
    if shared_context {
        for i in 1..k {
            experts[i].context = experts[0].context.clone();
        }
    }
    let expert_sets: Vec<LabelSet> = if k == 1 { grouping.single_expert_sets() } else { grouping.expert_sets.clone() };
    let profile = compute_frequency(dataset, classes)?;
    let targets: Vec<MarginalTargets> =
        expert_sets.iter().map(|s| MarginalTargets::from_profile(&profile, s)).collect::<Result<_>>()?;
    let mut masked: Vec<Vec<Vec<u8>>> =
        expert_sets.iter().map(|s| dataset.iter().map(|x| masked_labels(&x.labels, s)).collect()).collect();
    let undersample_keep = match cfg.mode {
        TrainMode::UnderSample { ratio } if ratio != Some(1.0) => Some(undersample_quota(&profile, grouping, ratio)),
        _ => None,
    };

    let mut batcher = Batcher::new(rng::derive_seed(cfg.seed, streams::BATCHES), dataset.len(), cfg.batch);
    let mut trace = Vec::with_capacity(cfg.iters * k);
    for step in 0..cfg.iters {
        let (batch, fresh) = batcher.next_batch();
        if let (Some(keep), true) = (undersample_keep, fresh) {
            masked[0] = undersample_labels(dataset, grouping, keep, cfg.seed, batcher.epoch() - 1);
        }
        let feats: Vec<FeatureGrid> =
            batch.par_iter().map(|&s| backbone_forward(&backbone, &dataset[s])).collect::<Result<_>>()?;
        let mut grads: Vec<ExpertParams> = experts.iter().map(ExpertParams::zeroed_like).collect();
        let mut dfeats: Vec<FeatureGrid> = Vec::new();
        for i in 0..k {
            let outs: Vec<_> = feats
                .par_iter()
                .map(|f| expert_forward_from_features(&experts[i], f))
                .collect::<Result<Vec<_>>>()?;
            let logits: Vec<LogitGrid> = outs.iter().map(|(z, _)| z.clone()).collect();
            let stacked = stack(&logits);
            let labels: Vec<u8> = batch.iter().flat_map(|&s| masked[i][s].iter().copied()).collect();
            let loss = match cfg.mode {
                TrainMode::Medoe | TrainMode::Mcn => {
                    let b = combined_loss(&stacked, &labels, &expert_sets[i], &targets[i], cfg.alpha)?;
                    StepLoss { l_ce: b.l_ce, l_aux: b.l_aux(), total: b.total, grad: b.grad }
                }
                TrainMode::Baseline | TrainMode::UnderSample { .. } => {
                    let t = ce_loss(&stacked, &labels, &expert_sets[i])?;
                    StepLoss { l_ce: t.value, l_aux: 0.0, total: t.value, grad: t.grad }
                }
                TrainMode::Focal { gamma } => {
                    let t = focal_loss(&stacked, &labels, gamma)?;
                    StepLoss { l_ce: t.value, l_aux: 0.0, total: t.value, grad: t.grad }
                }
            };
            if !loss.total.is_finite() {
                return Err(Error::Divergence { step, expert: i, loss: loss.total });
            }
            trace.push(TraceRow { step, expert: i, l_ce: loss.l_ce, l_aux: loss.l_aux, total: loss.total });
            let weight = cfg.loss_weight(i);
            let grad: Vec<f64> = loss.grad.iter().map(|g| g * weight).collect();
            let feeds_backbone = i == 0;
            let per_scene: Vec<(ExpertParams, Option<FeatureGrid>)> = (0..batch.len())
                .into_par_iter()
                .map(|b| {
                    let dz = slice_grid(&grad, b, &logits[b]);
                    let mut g = experts[i].zeroed_like();
                    let mut dfeat = feeds_backbone.then(|| FeatureGrid::zeros(feats[b].height, feats[b].width, feats[b].channels));
                    expert_backward(&experts[i], &feats[b], &outs[b].1, &dz, &mut g, dfeat.as_mut());
                    (g, dfeat)
                })
                .collect();
            for (g, dfeat) in per_scene {
                add_into(&mut grads[i], &g);
                if let Some(d) = dfeat {
                    dfeats.push(d);
                }
            }
        }
        let mut bgrad = backbone.zeroed_like();
        let parts: Vec<BackboneParams> = (0..batch.len())
            .into_par_iter()
            .map(|b| {
                let mut g = backbone.zeroed_like();
                backbone_backward(&backbone, &dataset[batch[b]], &feats[b], &dfeats[b], &mut g);
                g
            })
            .collect();
        for g in &parts {
            bgrad.layer.add_scaled(&g.layer, 1.0);
        }

        let lr = cfg.lr_at(step);
        backbone.layer.sgd_step(&bgrad.layer, lr);
        for i in 0..k {
            if !(shared_context && i > 0) {
                experts[i].context.sgd_step(&grads[i].context, lr);
            }
            experts[i].head.sgd_step(&grads[i].head, lr);
        }
        if shared_context {
            for i in 1..k {
                experts[i].context = experts[0].context.clone();
            }
        }
        if !backbone.layer.is_finite() {
            return Err(Error::Divergence { step, expert: 0, loss: f64::NAN });
        }
        if let Some(i) = experts.iter().position(|e| !e.is_finite()) {
            return Err(Error::Divergence { step, expert: i, loss: f64::NAN });
        }
    }

    Ok(TrainedModel {
        dims,
        mode: cfg.mode,
        backbone,
        experts,
        expert_sets,
        grouping: grouping.clone(),
        profile,
        calibration: None,
        provenance: Provenance { seed: cfg.seed, config: cfg.echo(), trace, moe_trace: Vec::new() },
    })
}

/// Stage 2: fits per-expert, per-category calibration on the frozen experts
/// by SGD on the selection cross-entropy. Returns the calibration and the
/// loss of every step.
pub fn fit_moe(model: &TrainedModel, dataset: &[SceneSample], cfg: &TrainConfig) -> Result<(CalibrationParams, Vec<f64>)> {
    cfg.validate()?;
    model.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let k = model.experts.len();
    let mut calib = CalibrationParams::identity(k, model.dims.classes);
    let mut trace = Vec::with_capacity(cfg.moe_iters);
    let mut batcher = Batcher::new(rng::derive_seed(cfg.seed, streams::MOE_BATCHES), dataset.len(), cfg.moe_batch);
    for step in 0..cfg.moe_iters {
        let (batch, _) = batcher.next_batch();
        let scenes: Vec<SceneOutputs> = batch
            .par_iter()
            .map(|&s| {
                Ok(SceneOutputs { experts: expert_probabilities(model, &dataset[s])?, labels: dataset[s].labels.clone() })
            })
            .collect::<Result<_>>()?;
        let loss = select_loss(&scenes, &calib)?;
        if !loss.value.is_finite() {
            return Err(Error::Divergence { step, expert: 0, loss: loss.value });
        }
        trace.push(loss.value);
        for (w, g) in calib.w.iter_mut().zip(&loss.grad.w) {
            *w -= cfg.moe_lr * g;
        }
        for (b, g) in calib.beta.iter_mut().zip(&loss.grad.beta) {
            *b -= cfg.moe_lr * g;
        }
        if !calib.is_finite() {
            return Err(Error::Divergence { step, expert: 0, loss: f64::NAN });
        }
    }
    Ok((calib, trace))
}

pub fn train_stage2_moe(model: &TrainedModel, dataset: &[SceneSample], cfg: &TrainConfig) -> Result<CalibrationParams> {
    Ok(fit_moe(model, dataset, cfg)?.0)
}

/// Stage 1 followed, for multi-expert modes, by stage 2.
pub fn train_full(dataset: &[SceneSample], grouping: &CategoryGrouping, cfg: &TrainConfig) -> Result<TrainedModel> {
    let mut model = train_stage1(dataset, grouping, cfg)?;
    if model.mode.is_multi_expert() {
        let (calib, trace) = fit_moe(&model, dataset, cfg)?;
        model.calibration = Some(calib);
        model.provenance.moe_trace = trace;
    }
    Ok(model)
}

/// Single expert, plain cross-entropy, head pixels under-sampled each epoch.
pub fn train_undersample_baseline(
    dataset: &[SceneSample],
    grouping: &CategoryGrouping,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let ratio = match cfg.mode {
        TrainMode::UnderSample { ratio } => ratio,
        _ => None,
    };
    train_stage1(dataset, grouping, &TrainConfig { mode: TrainMode::UnderSample { ratio }, ..cfg.clone() })
}

/// `r` models trained with seeds `seed, seed + 1, ..., seed + r − 1`.
pub fn train_replicas(
    dataset: &[SceneSample],
    grouping: &CategoryGrouping,
    cfg: &TrainConfig,
    r: usize,
) -> Result<Vec<TrainedModel>> {
    if r < 2 {
        return Err(Error::invalid(format!("need at least 2 replicas, got {r}")));
    }
    (0..r as u64)
        .map(|i| train_full(dataset, grouping, &TrainConfig { seed: cfg.seed.wrapping_add(i), ..cfg.clone() }))
        .collect()
}

/// Moving average of `values` over `window` steps.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut sum: f64 = values[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..values.len() {
        sum += values[i] - values[i - window];
        out.push(sum / window as f64);
    }
    out
}

/// Experts whose 50-step smoothed loss increases anywhere from step 100 on.
/// A flag for learning-rate tuning, not an error.
pub fn non_monotone_experts(model: &TrainedModel) -> Vec<usize> {
    const WINDOW: usize = 50;
    const FROM: usize = 100;
    (0..model.experts.len())
        .filter(|&i| {
            let s = smoothed(&model.provenance.expert_losses(i), WINDOW);
            let start = FROM.saturating_sub(WINDOW - 1);
            s.iter().skip(start).zip(s.iter().skip(start + 1)).any(|(a, b)| b > a)
        })
        .collect()
}
