//! Long-tailed synthetic scenes, frequency analysis, head/body/tail grouping
//! and expert-specific label masking.
//!
//! A scene is a stack of horizontal "head" bands (background), a few
//! non-overlapping "body" rectangles, and thin "tail" bars that always live
//! inside or right next to a rectangle of their fixed host body category.
//! Pixel features are noisy category embeddings mixed with the mean
//! embedding of the 4-neighborhood, so a pixel's own feature is only
//! partially informative and the surrounding context matters.

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Number of experts in the multi-expert decoder.
pub const NUM_EXPERTS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Row-major `height * width * dim`.
    pub features: Vec<f32>,
    /// Row-major `height * width`; `IGNORE` or a category id.
    pub labels: Vec<u8>,
}

impl SceneSample {
    pub fn new(
        height: usize,
        width: usize,
        dim: usize,
        features: Vec<f32>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if features.len() != height * width * dim {
            return Err(Error::invalid(format!(
                "feature grid has {} values, expected {height}x{width}x{dim}",
                features.len()
            )));
        }
        if labels.len() != height * width {
            return Err(Error::invalid(format!(
                "label grid has {} values, expected {height}x{width}",
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(SceneSample { height, width, dim, features, labels })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn feature(&self, pixel: usize) -> &[f32] {
        &self.features[pixel * self.dim..(pixel + 1) * self.dim]
    }

    /// Checks that every non-IGNORE label is a valid category id.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l != IGNORE && l as usize >= classes) {
            Some(l) => Err(Error::invalid(format!("label {l} out of range for {classes} categories"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Body,
    Tail,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Head, Group::Body, Group::Tail];

    pub fn name(self) -> &'static str {
        match self {
            Group::Head => "head",
            Group::Body => "body",
            Group::Tail => "tail",
        }
    }
}

/// A subset of the category ids `0..classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    members: Vec<bool>,
}

impl LabelSet {
    pub fn empty(classes: usize) -> Self {
        LabelSet { members: vec![false; classes] }
    }

    pub fn all(classes: usize) -> Self {
        LabelSet { members: vec![true; classes] }
    }

    pub fn from_ids(classes: usize, ids: impl IntoIterator<Item = usize>) -> Self {
        let mut set = Self::empty(classes);
        for id in ids {
            set.members[id] = true;
        }
        set
    }

    pub fn classes(&self) -> usize {
        self.members.len()
    }

    /// `IGNORE` and out-of-range labels are never members.
    pub fn contains(&self, label: u8) -> bool {
        self.members.get(label as usize).copied().unwrap_or(false)
    }

    pub fn contains_id(&self, id: usize) -> bool {
        self.members.get(id).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full(&self) -> bool {
        self.members.iter().all(|&m| m)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }

    /// Categories not in the set (the interfering categories of an expert).
    pub fn complement(&self) -> LabelSet {
        LabelSet { members: self.members.iter().map(|m| !m).collect() }
    }

    pub fn is_subset_of(&self, other: &LabelSet) -> bool {
        self.members.len() == other.members.len()
            && self.members.iter().zip(&other.members).all(|(&a, &b)| !a || b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyProfile {
    pub counts: Vec<u64>,
    pub freqs: Vec<f64>,
    pub total: u64,
}

impl FrequencyProfile {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::invalid("no labeled pixels"));
        }
        let freqs = counts.iter().map(|&n| n as f64 / total as f64).collect();
        Ok(FrequencyProfile { counts, freqs, total })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GroupingMode {
    ExplicitCounts { head: usize, body: usize, tail: usize },
    /// Head: freq >= `head`; body: `body` <= freq < `head`; tail: freq < `body`.
    Thresholds { head: f64, body: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryGrouping {
    /// Category ids by descending frequency; position 0 is the most frequent.
    pub order: Vec<usize>,
    /// Position in `order` of the first body category.
    pub body_start: usize,
    /// Position in `order` of the first tail category.
    pub tail_start: usize,
    pub group_of: Vec<Group>,
    /// `S_1 ⊇ S_2 ⊇ S_3`: all categories, body ∪ tail, tail.
    pub expert_sets: Vec<LabelSet>,
}

impl CategoryGrouping {
    pub fn classes(&self) -> usize {
        self.order.len()
    }

    pub fn members(&self, group: Group) -> Vec<usize> {
        (0..self.classes()).filter(|&k| self.group_of[k] == group).collect()
    }

    /// Rank (0-based position in frequency order) of each category.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.classes()];
        for (pos, &k) in self.order.iter().enumerate() {
            ranks[k] = pos;
        }
        ranks
    }

    /// Rebuilds a grouping from a frequency order and the two group boundaries.
    pub fn from_order(order: Vec<usize>, body_start: usize, tail_start: usize) -> Result<Self> {
        let classes = order.len();
        if !(0 < body_start && body_start < tail_start && tail_start < classes) {
            return Err(Error::invalid(format!(
                "group boundaries ({body_start}, {tail_start}) leave an empty group for {classes} categories"
            )));
        }
        let mut seen = vec![false; classes];
        for &k in &order {
            if k >= classes || seen[k] {
                return Err(Error::invalid("category order is not a permutation"));
            }
            seen[k] = true;
        }
        let mut group_of = vec![Group::Head; classes];
        for (pos, &k) in order.iter().enumerate() {
            group_of[k] = if pos < body_start {
                Group::Head
            } else if pos < tail_start {
                Group::Body
            } else {
                Group::Tail
            };
        }
        let expert_sets = vec![
            LabelSet::all(classes),
            LabelSet::from_ids(classes, order[body_start..].iter().copied()),
            LabelSet::from_ids(classes, order[tail_start..].iter().copied()),
        ];
        Ok(CategoryGrouping { order, body_start, tail_start, group_of, expert_sets })
    }

    /// Grouping with a single expert over all categories (baseline models).
    pub fn single_expert_sets(&self) -> Vec<LabelSet> {
        vec![self.expert_sets[0].clone()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub n_head: usize,
    pub n_body: usize,
    pub n_tail: usize,
    pub dim: usize,
    /// Weight of the 4-neighborhood mean embedding in each pixel feature.
    pub gamma: f64,
    /// Standard deviation of the additive Gaussian feature noise.
    pub sigma: f64,
    pub n_scenes: usize,
    pub seed: u64,
    /// Target pixel shares of head, body and tail categories.
    pub target_shares: [f64; 3],
    /// Index of the first generated scene. Train and test splits draw disjoint
    /// scene streams from the same master seed, so they share embeddings.
    pub scene_offset: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            height: 64,
            width: 64,
            classes: 12,
            n_head: 2,
            n_body: 4,
            n_tail: 6,
            dim: 8,
            gamma: 0.5,
            sigma: 0.3,
            n_scenes: 200,
            seed: 0,
            target_shares: [0.8, 0.15, 0.05],
            scene_offset: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 3 {
            return Err(Error::invalid(format!("need at least 3 categories, got {}", self.classes)));
        }
        if self.classes >= IGNORE as usize {
            return Err(Error::invalid("at most 254 categories fit the label format"));
        }
        if self.n_head == 0 || self.n_body == 0 || self.n_tail == 0 {
            return Err(Error::invalid(format!(
                "every group needs at least one category, got ({}, {}, {})",
                self.n_head, self.n_body, self.n_tail
            )));
        }
        if self.n_head + self.n_body + self.n_tail != self.classes {
            return Err(Error::invalid("group sizes must sum to the category count"));
        }
        if self.height < 24 || self.width < 24 {
            return Err(Error::invalid("scenes must be at least 24x24 pixels"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if !(self.gamma >= 0.0 && self.sigma >= 0.0) {
            return Err(Error::invalid("gamma and sigma must be non-negative"));
        }
        let sum: f64 = self.target_shares.iter().sum();
        if self.target_shares.iter().any(|&s| !(s >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("target shares must be non-negative and sum to 1"));
        }
        Ok(())
    }

    pub fn group_ranges(&self) -> [std::ops::Range<usize>; 3] {
        let b = self.n_head;
        let t = self.n_head + self.n_body;
        [0..b, b..t, t..self.classes]
    }

    /// Host body category of each tail category, indexed by tail id.
    pub fn host_of(&self, tail: usize) -> usize {
        let [_, body, tails] = self.group_ranges();
        debug_assert!(tails.contains(&tail));
        body.start + (tail - tails.start) % self.n_body
    }

    /// The two tail categories whose embeddings are nearly identical, when
    /// there are at least two tail categories.
    pub fn confusable_pair(&self) -> Option<(usize, usize)> {
        (self.n_tail >= 2).then(|| (self.classes - 2, self.classes - 1))
    }
}

/// Fixed unit-norm category embeddings shared by every scene of a seed.
pub fn category_embeddings(cfg: &GeneratorConfig) -> Vec<Vec<f64>> {
    let mut rng = rng::substream(cfg.seed, streams::EMBEDDINGS);
    let mut emb: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            normalized(v)
        })
        .collect();
    if let Some((a, b)) = cfg.confusable_pair() {
        // b = normalize(e_a + 0.3 u) with u a unit vector orthogonal to e_a,
        // which gives cos(e_a, e_b) = 1 / sqrt(1.09) ≈ 0.958.
        let base = emb[a].clone();
        let mut u: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let proj: f64 = u.iter().zip(&base).map(|(x, y)| x * y).sum();
        u.iter_mut().zip(&base).for_each(|(x, y)| *x -= proj * y);
        let u = normalized(u);
        emb[b] = normalized(base.iter().zip(&u).map(|(x, y)| x + 0.3 * y).collect());
    }
    emb
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else if let Some(x) = v.first_mut() {
        *x = 1.0;
    }
    v
}

/// Generates `cfg.n_scenes` scenes. Scene `i` depends only on `(cfg, i)`.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Vec<SceneSample>> {
    cfg.validate()?;
    let emb = category_embeddings(cfg);
    Ok((0..cfg.n_scenes)
        .into_par_iter()
        .map(|i| generate_scene(cfg, &emb, (cfg.scene_offset + i) as u64))
        .collect())
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    top: usize,
    left: usize,
    h: usize,
    w: usize,
    category: usize,
}

impl Rect {
    fn overlaps_with_margin(&self, o: &Rect, margin: usize) -> bool {
        let a_bottom = self.top + self.h + margin;
        let a_right = self.left + self.w + margin;
        let b_bottom = o.top + o.h + margin;
        let b_right = o.left + o.w + margin;
        self.top < b_bottom && o.top < a_bottom && self.left < b_right && o.left < a_right
    }
}

fn geometric_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.7f64.powi(i as i32)).collect()
}

fn pick_weighted(rng: &mut Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

const RECT_MIN: usize = 8;
const RECT_MAX: usize = 20;
const RECT_GAP: usize = 5;
const INSIDE_PROB: f64 = 0.7;

fn generate_scene(cfg: &GeneratorConfig, emb: &[Vec<f64>], stream: u64) -> SceneSample {
    let mut rng = rng::substream(cfg.seed, stream);
    let (h, w) = (cfg.height, cfg.width);
    let [head, body, tail] = cfg.group_ranges();
    let mut labels = vec![0u8; h * w];

    // Head bands, sized by geometric weights with jittered boundaries.
    let hw = geometric_weights(cfg.n_head);
    let hw_total: f64 = hw.iter().sum();
    let mut row = 0usize;
    for (i, weight) in hw.iter().enumerate().rev() {
        let rows = if i == 0 {
            h - row
        } else {
            let jitter = rng.random_range(-0.08..0.08);
            let frac = (weight / hw_total + jitter).max(0.02);
            ((frac * h as f64).round() as usize).min(h - row)
        };
        for r in row..row + rows {
            labels[r * w..(r + 1) * w].fill((head.start + i) as u8);
        }
        row += rows;
    }

    // Body rectangles until the body target is met.
    let body_target = (cfg.target_shares[1] * (h * w) as f64).round() as usize;
    let bw = geometric_weights(cfg.n_body);
    let mut rects: Vec<Rect> = Vec::new();
    let mut body_pixels = 0usize;
    let mut attempts = 0;
    while body_pixels < body_target && attempts < 200 {
        attempts += 1;
        let rh = rng.random_range(RECT_MIN..=RECT_MAX.min(h - 2));
        let rw = rng.random_range(RECT_MIN..=RECT_MAX.min(w - 2));
        let rect = Rect {
            top: rng.random_range(0..=h - rh),
            left: rng.random_range(0..=w - rw),
            h: rh,
            w: rw,
            category: body.start + pick_weighted(&mut rng, &bw),
        };
        if rects.iter().any(|o| rect.overlaps_with_margin(o, RECT_GAP)) {
            continue;
        }
        for r in rect.top..rect.top + rect.h {
            labels[r * w + rect.left..r * w + rect.left + rect.w].fill(rect.category as u8);
        }
        body_pixels += rect.h * rect.w;
        rects.push(rect);
    }

    // Tail bars hosted by their fixed body category.
    let tail_target = (cfg.target_shares[2] * (h * w) as f64).round() as usize;
    let tw = geometric_weights(cfg.n_tail);
    let mut tail_pixels = 0usize;
    let mut attempts = 0;
    while tail_pixels < tail_target && attempts < 400 && !rects.is_empty() {
        attempts += 1;
        let weights: Vec<f64> = tail
            .clone()
            .zip(&tw)
            .map(|(t, &wt)| {
                if rects.iter().any(|r| r.category == cfg.host_of(t)) {
                    wt
                } else {
                    0.0
                }
            })
            .collect();
        if weights.iter().all(|&x| x == 0.0) {
            break;
        }
        let t = tail.start + pick_weighted(&mut rng, &weights);
        let host = cfg.host_of(t);
        let hosts: Vec<&Rect> = rects.iter().filter(|r| r.category == host).collect();
        let rect = *hosts[rng.random_range(0..hosts.len())];
        let thick = rng.random_range(1..=2usize);
        let vertical = rng.random::<bool>();
        let inside = rng.random::<f64>() < INSIDE_PROB;
        if let Some(bar) = place_bar(&mut rng, &rect, thick, vertical, inside, h, w) {
            // Inside bars (with a 1-pixel halo) must sit on host pixels; outside
            // bars (halo away from the rectangle) on head pixels. This keeps
            // every tail pixel within distance 2 of its host.
            let ok = halo(&bar, h, w).all(|(r, c)| {
                let l = labels[r * w + c] as usize;
                let in_rect = r >= rect.top && r < rect.top + rect.h && c >= rect.left && c < rect.left + rect.w;
                if inside {
                    l == host
                } else {
                    in_rect || head.contains(&l)
                }
            });
            if !ok {
                continue;
            }
            for r in bar.top..bar.top + bar.h {
                for c in bar.left..bar.left + bar.w {
                    labels[r * w + c] = t as u8;
                }
            }
            tail_pixels += bar.h * bar.w;
        }
    }

    let features = scene_features(cfg, emb, &labels, &mut rng);
    SceneSample { height: h, width: w, dim: cfg.dim, features, labels }
}

/// A `thick`-wide bar either strictly inside `rect` (1-pixel inset) or
/// touching one of its edges from outside.
fn place_bar(
    rng: &mut Rng,
    rect: &Rect,
    thick: usize,
    vertical: bool,
    inside: bool,
    h: usize,
    w: usize,
) -> Option<Rect> {
    let (along, across) = if vertical { (rect.h, rect.w) } else { (rect.w, rect.h) };
    if inside {
        // Interior excluding the border ring; bar plus halo must fit.
        if across < thick + 4 || along < 6 {
            return None;
        }
        let len = rng.random_range(along / 2..=along - 4);
        let a0 = rng.random_range(2..=along - 2 - len);
        let c0 = rng.random_range(2..=across - 2 - thick);
        Some(if vertical {
            Rect { top: rect.top + a0, left: rect.left + c0, h: len, w: thick, category: 0 }
        } else {
            Rect { top: rect.top + c0, left: rect.left + a0, h: thick, w: len, category: 0 }
        })
    } else {
        let len = rng.random_range(along / 2..=along);
        let a0 = rng.random_range(0..=along - len);
        let before = rng.random::<bool>();
        if vertical {
            // Bar along the left or right edge.
            let left = if before { rect.left.checked_sub(thick)? } else { rect.left + rect.w };
            if left + thick > w {
                return None;
            }
            Some(Rect { top: rect.top + a0, left, h: len, w: thick, category: 0 })
        } else {
            let top = if before { rect.top.checked_sub(thick)? } else { rect.top + rect.h };
            if top + thick > h {
                return None;
            }
            Some(Rect { top, left: rect.left + a0, h: thick, w: len, category: 0 })
        }
    }
}

fn halo(bar: &Rect, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let r0 = bar.top.saturating_sub(1);
    let r1 = (bar.top + bar.h + 1).min(h);
    let c0 = bar.left.saturating_sub(1);
    let c1 = (bar.left + bar.w + 1).min(w);
    (r0..r1).flat_map(move |r| (c0..c1).map(move |c| (r, c)))
}

fn scene_features(cfg: &GeneratorConfig, emb: &[Vec<f64>], labels: &[u8], rng: &mut Rng) -> Vec<f32> {
    let (h, w, d) = (cfg.height, cfg.width, cfg.dim);
    let mut out = vec![0f32; h * w * d];
    let mut ctx = vec![0f64; d];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            ctx.fill(0.0);
            let mut n = 0usize;
            let neighbors = [
                (r > 0).then(|| p - w),
                (r + 1 < h).then(|| p + w),
                (c > 0).then(|| p - 1),
                (c + 1 < w).then(|| p + 1),
            ];
            for q in neighbors.into_iter().flatten() {
                ctx.iter_mut().zip(&emb[labels[q] as usize]).for_each(|(a, b)| *a += b);
                n += 1;
            }
            let e = &emb[labels[p] as usize];
            for k in 0..d {
                let noise: f64 = if cfg.sigma > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
                let v = e[k] + cfg.gamma * ctx[k] / n as f64 + cfg.sigma * noise;
                out[p * d + k] = v as f32;
            }
        }
    }
    out
}

/// Pixel counts per category, IGNORE excluded.
pub fn compute_frequency(dataset: &[SceneSample], classes: usize) -> Result<FrequencyProfile> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut counts = vec![0u64; classes];
    for sample in dataset {
        for &l in &sample.labels {
            if l == IGNORE {
                continue;
            }
            let slot = counts
                .get_mut(l as usize)
                .ok_or_else(|| Error::invalid(format!("label {l} out of range for {classes} categories")))?;
            *slot += 1;
        }
    }
    FrequencyProfile::from_counts(counts)
}

/// Sorts categories by descending frequency (ties: lower id first) and
/// splits them into head, body and tail.
pub fn make_grouping(profile: &FrequencyProfile, mode: GroupingMode) -> Result<CategoryGrouping> {
    let classes = profile.classes();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| profile.freqs[b].total_cmp(&profile.freqs[a]).then(a.cmp(&b)));
    let (body_start, tail_start) = match mode {
        GroupingMode::ExplicitCounts { head, body, tail } => {
            if head + body + tail != classes {
                return Err(Error::invalid(format!(
                    "group sizes ({head}, {body}, {tail}) do not sum to {classes}"
                )));
            }
            (head, head + body)
        }
        GroupingMode::Thresholds { head, body } => {
            if !(head > body) {
                return Err(Error::invalid("head threshold must exceed body threshold"));
            }
            let n_head = order.iter().take_while(|&&k| profile.freqs[k] >= head).count();
            let n_body_or_head = order.iter().take_while(|&&k| profile.freqs[k] >= body).count();
            (n_head, n_body_or_head)
        }
    };
    CategoryGrouping::from_order(order, body_start, tail_start)
}

/// Labels outside `allowed` become IGNORE.
pub fn masked_labels(labels: &[u8], allowed: &LabelSet) -> Vec<u8> {
    labels.iter().map(|&l| if allowed.contains(l) { l } else { IGNORE }).collect()
}

/// Expert-specific view of a scene: features untouched, labels outside
/// `allowed` relabeled IGNORE.
pub fn mask_labels(sample: &SceneSample, allowed: &LabelSet) -> SceneSample {
    SceneSample {
        labels: masked_labels(&sample.labels, allowed),
        ..sample.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quota {
    /// The smallest per-category count among the categories present.
    Auto,
    Pixels(usize),
}

/// Keeps exactly `min(quota, available)` uniformly chosen labeled pixels of
/// each category and relabels the rest IGNORE.
pub fn uniform_resample(
    dataset: &[SceneSample],
    classes: usize,
    quota: Quota,
    seed: u64,
) -> Result<Vec<SceneSample>> {
    let mut positions: Vec<Vec<(u32, u32)>> = vec![Vec::new(); classes];
    for (s, sample) in dataset.iter().enumerate() {
        sample.check_labels(classes)?;
        for (p, &l) in sample.labels.iter().enumerate() {
            if l != IGNORE {
                positions[l as usize].push((s as u32, p as u32));
            }
        }
    }
    let quota = match quota {
        Quota::Pixels(n) => n,
        Quota::Auto => positions.iter().map(Vec::len).filter(|&n| n > 0).min().unwrap_or(0),
    };
    let mut out: Vec<SceneSample> = dataset
        .iter()
        .map(|s| SceneSample { labels: vec![IGNORE; s.labels.len()], ..s.clone() })
        .collect();
    for (k, pos) in positions.iter().enumerate() {
        let mut rng = rng::substream(rng::derive_seed(seed, streams::RESAMPLE), k as u64);
        let keep = quota.min(pos.len());
        for i in index::sample(&mut rng, pos.len(), keep) {
            let (s, p) = pos[i];
            out[s as usize].labels[p as usize] = k as u8;
        }
    }
    Ok(out)
}
