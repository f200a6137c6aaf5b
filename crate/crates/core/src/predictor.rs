//! Multi-head regression model trained with hand-written backpropagation.
//!
//! Five hashed embedding tables (user, video, author, category, page group)
//! feed a shared two-layer ReLU backbone; each head owns a small tower whose
//! final layer starts at zero. Time-valued labels are expressed in minutes.
//!
//! Author-stream steps update the author tower only: shared embeddings, the
//! backbone, and their optimizer accumulators are left bitwise untouched.
//! Batch gradients are reduced over fixed 64-example chunks in chunk order,
//! so results do not depend on the number of worker threads.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::attribution::{fill_attributed_labels, learned_weight_gradient, AttributionConfig, AttributionMode};
use crate::author_ltv::DualStreamPlan;
use crate::datamodel::{canonical_real, format_real, DataError, Dataset, LabeledExample, LineReader};
use crate::pdq::PageGroupSpec;
use crate::synthgen::{sigmoid, sub_rng};

/// Seconds per label unit of the time-valued heads.
pub const TIME_UNIT_SECONDS: f64 = 60.0;

const CHUNK: usize = 64;
const NUM_TABLES: usize = 5;
const TABLE_NAMES: [&str; NUM_TABLES] = ["user", "video", "author", "category", "page_group"];

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("loss diverged on head `{head}` in epoch {epoch}")]
    Divergence { head: Head, epoch: usize },
    #[error("head `{0}` is not part of this model")]
    UnknownHead(Head),
    #[error("tweedie loss needs mu > 0, got {0}")]
    NonPositiveMean(f64),
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Head {
    Pdq,
    SlideTime,
    Attributed,
    Author,
    WatchTime,
    Completion,
    Interaction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputTransform {
    Sigmoid,
    Identity,
    Exp,
}

impl Head {
    pub const ALL: [Head; 7] = [
        Head::Pdq,
        Head::SlideTime,
        Head::Attributed,
        Head::Author,
        Head::WatchTime,
        Head::Completion,
        Head::Interaction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Head::Pdq => "pdq",
            Head::SlideTime => "slide_time",
            Head::Attributed => "attributed",
            Head::Author => "author",
            Head::WatchTime => "watch_time",
            Head::Completion => "completion",
            Head::Interaction => "interaction",
        }
    }

    pub fn parse(s: &str) -> Option<Head> {
        Head::ALL.into_iter().find(|h| h.name() == s)
    }

    pub fn transform(self) -> OutputTransform {
        match self {
            Head::Pdq | Head::Completion | Head::Interaction => OutputTransform::Sigmoid,
            Head::SlideTime => OutputTransform::Identity,
            Head::Attributed | Head::Author | Head::WatchTime => OutputTransform::Exp,
        }
    }

    /// Seconds per label unit; 1 for the unitless heads.
    pub fn unit_seconds(self) -> f64 {
        match self {
            Head::SlideTime | Head::Attributed | Head::Author | Head::WatchTime => TIME_UNIT_SECONDS,
            Head::Pdq | Head::Completion | Head::Interaction => 1.0,
        }
    }

    /// Training target of this head, in label units. `None` for the author
    /// head outside the delayed stream.
    pub fn label(self, ex: &LabeledExample) -> Option<f64> {
        match self {
            Head::Pdq => Some(ex.pdq_label),
            Head::SlideTime => Some(ex.slide_time / TIME_UNIT_SECONDS),
            Head::Attributed => Some(ex.attributed_slide_time / TIME_UNIT_SECONDS),
            Head::Author => ex.author_ltv.map(|s| s / TIME_UNIT_SECONDS),
            Head::WatchTime => Some(ex.watch_time_label / TIME_UNIT_SECONDS),
            Head::Completion => Some(ex.completion_label),
            Head::Interaction => Some(ex.interaction_label),
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Tweedie,
    Hybrid,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Tweedie => "tweedie",
            LossKind::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Option<LossKind> {
        [LossKind::Mse, LossKind::Tweedie, LossKind::Hybrid].into_iter().find(|l| l.name() == s)
    }
}

// ---------------------------------------------------------------------------
// losses

pub fn mse_loss(preds: &[f64], labels: &[f64]) -> Result<f64, PredictorError> {
    check_lengths(preds, labels)?;
    Ok(preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / preds.len() as f64)
}

/// Mean of `-y mu^(1-rho)/(1-rho) + mu^(2-rho)/(2-rho)`.
pub fn tweedie_loss(mu: &[f64], labels: &[f64], rho: f64) -> Result<f64, PredictorError> {
    check_lengths(mu, labels)?;
    if let Some(&bad) = mu.iter().find(|&&m| m <= 0.0 || m.is_nan()) {
        return Err(PredictorError::NonPositiveMean(bad));
    }
    Ok(mu.iter().zip(labels).map(|(&m, &y)| tweedie_term(m, y, rho)).sum::<f64>() / mu.len() as f64)
}

/// `mse + lambda * tweedie` on the same predictions.
pub fn hybrid_loss(preds: &[f64], labels: &[f64], lambda: f64, rho: f64) -> Result<f64, PredictorError> {
    Ok(mse_loss(preds, labels)? + lambda * tweedie_loss(preds, labels, rho)?)
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<(), PredictorError> {
    if a.len() != b.len() {
        return Err(PredictorError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(PredictorError::EmptyBatch);
    }
    Ok(())
}

fn tweedie_term(mu: f64, y: f64, rho: f64) -> f64 {
    -y * mu.powf(1.0 - rho) / (1.0 - rho) + mu.powf(2.0 - rho) / (2.0 - rho)
}

/// Per-example loss value.
pub fn loss_value(kind: LossKind, p: f64, y: f64, lambda: f64, rho: f64) -> f64 {
    match kind {
        LossKind::Mse => (p - y) * (p - y),
        LossKind::Tweedie => tweedie_term(p, y, rho),
        LossKind::Hybrid => (p - y) * (p - y) + lambda * tweedie_term(p, y, rho),
    }
}

/// Derivative of [`loss_value`] with respect to the prediction.
pub fn loss_grad_pred(kind: LossKind, p: f64, y: f64, lambda: f64, rho: f64) -> f64 {
    let tweedie = || -y * p.powf(-rho) + p.powf(1.0 - rho);
    match kind {
        LossKind::Mse => 2.0 * (p - y),
        LossKind::Tweedie => tweedie(),
        LossKind::Hybrid => 2.0 * (p - y) + lambda * tweedie(),
    }
}

/// Derivative of [`loss_value`] with respect to the label.
pub fn loss_grad_label(kind: LossKind, p: f64, lambda: f64, rho: f64, y: f64) -> f64 {
    let tweedie = -p.powf(1.0 - rho) / (1.0 - rho);
    match kind {
        LossKind::Mse => -2.0 * (p - y),
        LossKind::Tweedie => tweedie,
        LossKind::Hybrid => -2.0 * (p - y) + lambda * tweedie,
    }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden: [usize; 2],
    pub tower_hidden: usize,
    /// Vocabulary per table in `user, video, author, category, page_group` order.
    pub vocab: [usize; NUM_TABLES],
    pub hash_multiplier: u64,
    pub heads: Vec<(Head, LossKind)>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 16,
            hidden: [64, 32],
            tower_hidden: 16,
            vocab: [8192, 32768, 1024, 64, 16],
            hash_multiplier: 2_654_435_761,
            heads: vec![
                (Head::Pdq, LossKind::Mse),
                (Head::SlideTime, LossKind::Mse),
                (Head::Attributed, LossKind::Hybrid),
                (Head::Author, LossKind::Hybrid),
                (Head::WatchTime, LossKind::Hybrid),
                (Head::Completion, LossKind::Mse),
                (Head::Interaction, LossKind::Mse),
            ],
            init_seed: 7,
        }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl ModelConfig {
    pub fn single_head(head: Head, loss: LossKind) -> Self {
        Self { heads: vec![(head, loss)], ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PredictorError> {
        let bad = |m: String| Err(PredictorError::InvalidConfig(m));
        if self.embedding_dim == 0 || self.hidden.contains(&0) || self.tower_hidden == 0 {
            return bad("layer sizes must be positive".into());
        }
        for (name, &v) in TABLE_NAMES.iter().zip(&self.vocab) {
            if v < 3 {
                return bad(format!("vocabulary `{name}` must hold at least 3 buckets"));
            }
            if gcd(self.hash_multiplier, v as u64 - 1) != 1 {
                return bad(format!("hash multiplier shares a factor with vocabulary `{name}` - 1"));
            }
        }
        if self.heads.is_empty() {
            return bad("at least one head is required".into());
        }
        for (k, (h, loss)) in self.heads.iter().enumerate() {
            if self.heads[..k].iter().any(|(g, _)| g == h) {
                return bad(format!("head `{h}` listed twice"));
            }
            if *loss != LossKind::Mse && h.transform() != OutputTransform::Exp {
                return bad(format!("{} loss on head `{h}` needs an exponential output", loss.name()));
            }
        }
        Ok(())
    }

    /// Bucket of `id` in table `table`; bucket 0 is reserved for unknown ids.
    pub fn bucket(&self, table: usize, id: Option<u64>) -> usize {
        let Some(id) = id else { return 0 };
        let p = self.vocab[table] as u64 - 1;
        let h = ((id % p) as u128 * self.hash_multiplier as u128 % p as u128) as usize;
        1 + h
    }

    fn input_dim(&self) -> usize {
        NUM_TABLES * self.embedding_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub rho: f64,
    pub decay: f64,
    pub initial_accumulator: f64,
    /// Scale each head's loss by the inverse variance of its training labels.
    pub balance_heads: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            learning_rate: 0.05,
            epochs: 3,
            lambda: 0.1,
            rho: 1.5,
            decay: 0.9999,
            initial_accumulator: 1e-8,
            balance_heads: true,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PredictorError> {
        let bad = |m: &str| Err(PredictorError::InvalidTrainConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.rho > 1.0 && self.rho < 2.0) {
            return bad("rho must lie in (1, 2)");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must lie in (0, 1]");
        }
        if !(self.initial_accumulator > 0.0) {
            return bad("initial_accumulator must be positive");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// parameters

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, w: vec![0.0; rows * cols], b: vec![0.0; rows] }
    }

    fn uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let w = (0..rows * cols).map(|_| canonical_real(rng.random_range(-limit..limit))).collect();
        Self { rows, cols, w, b: vec![0.0; rows] }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            out.push(self.b[r] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub head: Head,
    pub loss: LossKind,
    pub hidden: Dense,
    pub out: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub config: ModelConfig,
    /// Row-major `vocab x embedding_dim` per table.
    pub embeddings: Vec<Vec<f64>>,
    pub backbone: Vec<Dense>,
    pub towers: Vec<Tower>,
}

impl PredictorParams {
    pub fn new(config: ModelConfig) -> Result<Self, PredictorError> {
        config.validate()?;
        let mut rng = sub_rng(config.init_seed, 0x1417);
        let d = config.embedding_dim;
        let embeddings = config
            .vocab
            .iter()
            .map(|&v| (0..v * d).map(|_| canonical_real(rng.random_range(-0.5..0.5))).collect())
            .collect();
        let backbone = vec![
            Dense::uniform(config.hidden[0], config.input_dim(), &mut rng),
            Dense::uniform(config.hidden[1], config.hidden[0], &mut rng),
        ];
        let towers = config
            .heads
            .iter()
            .map(|&(head, loss)| Tower {
                head,
                loss,
                hidden: Dense::uniform(config.tower_hidden, config.hidden[1], &mut rng),
                out: Dense::zeros(1, config.tower_hidden),
            })
            .collect();
        Ok(Self { config, embeddings, backbone, towers })
    }

    pub fn heads(&self) -> Vec<Head> {
        self.towers.iter().map(|t| t.head).collect()
    }

    pub fn head_slot(&self, head: Head) -> Option<usize> {
        self.towers.iter().position(|t| t.head == head)
    }

    fn layers(&self) -> Vec<&Dense> {
        let mut v: Vec<&Dense> = self.backbone.iter().collect();
        for t in &self.towers {
            v.push(&t.hidden);
            v.push(&t.out);
        }
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense> {
        let mut v: Vec<&mut Dense> = self.backbone.iter_mut().collect();
        for t in &mut self.towers {
            v.push(&mut t.hidden);
            v.push(&mut t.out);
        }
        v
    }

    /// Every parameter block with its name, in serialization order.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (name, e) in TABLE_NAMES.iter().zip(&self.embeddings) {
            out.push((format!("emb.{name}"), e));
        }
        for (k, l) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{k}.w"), &l.w));
            out.push((format!("backbone.{k}.b"), &l.b));
        }
        for t in &self.towers {
            out.push((format!("tower.{}.hidden.w", t.head), &t.hidden.w));
            out.push((format!("tower.{}.hidden.b", t.head), &t.hidden.b));
            out.push((format!("tower.{}.out.w", t.head), &t.out.w));
            out.push((format!("tower.{}.out.b", t.head), &t.out.b));
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = self.embeddings.iter_mut().collect();
        let layers = self.backbone.iter_mut().chain(self.towers.iter_mut().flat_map(|t| [&mut t.hidden, &mut t.out]));
        for l in layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }

    /// Shared embeddings and backbone, flattened.
    pub fn shared_snapshot(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.embeddings.iter().flatten().map(|x| x.to_bits()).collect();
        for l in &self.backbone {
            v.extend(l.w.iter().chain(&l.b).map(|x| x.to_bits()));
        }
        v
    }

    /// Tower parameters of `head`, flattened.
    pub fn tower_snapshot(&self, head: Head) -> Vec<u64> {
        self.towers
            .iter()
            .filter(|t| t.head == head)
            .flat_map(|t| t.hidden.w.iter().chain(&t.hidden.b).chain(&t.out.w).chain(&t.out.b))
            .map(|x| x.to_bits())
            .collect()
    }

    /// Rounds every parameter to its serialized precision.
    pub fn canonicalize(&mut self) {
        for b in self.blocks_mut() {
            for x in b.iter_mut() {
                *x = canonical_real(*x);
            }
        }
    }

    /// Adds uniform noise in `[-scale, scale]` to every parameter.
    pub fn jitter(&mut self, scale: f64, seed: u64) {
        let mut rng = sub_rng(seed, 0x7177);
        for b in self.blocks_mut() {
            for x in b.iter_mut() {
                *x += rng.random_range(-scale..scale);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|x| x.is_finite()))
    }
}

/// Hashed table rows of one example.
pub type Features = [usize; NUM_TABLES];

/// Features of every example, in example order.
pub fn example_features(
    dataset: &Dataset,
    examples: &[LabeledExample],
    spec: &PageGroupSpec,
    config: &ModelConfig,
) -> Vec<Features> {
    examples
        .iter()
        .map(|ex| {
            let r = &dataset.sessions[ex.session].records[ex.record];
            let group = spec.group_of(r.page_index) as u64;
            [
                config.bucket(0, Some(r.user_id)),
                config.bucket(1, Some(r.video_id)),
                config.bucket(2, Some(r.author_id)),
                config.bucket(3, Some(r.category_id)),
                config.bucket(4, Some(group)),
            ]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// forward and backward

struct Trace {
    x: Vec<f64>,
    z1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    h2: Vec<f64>,
    /// Per tower: pre-activation, activation, output logit, prediction.
    towers: Vec<(Vec<f64>, Vec<f64>, f64, f64)>,
}

fn relu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| v.max(0.0)).collect()
}

fn transform(t: OutputTransform, z: f64) -> f64 {
    match t {
        OutputTransform::Sigmoid => sigmoid(z),
        OutputTransform::Identity => z,
        OutputTransform::Exp => z.exp(),
    }
}

fn transform_grad(t: OutputTransform, p: f64) -> f64 {
    match t {
        OutputTransform::Sigmoid => p * (1.0 - p),
        OutputTransform::Identity => 1.0,
        OutputTransform::Exp => p,
    }
}

fn forward_trace(params: &PredictorParams, f: &Features, slots: &[usize]) -> Trace {
    let d = params.config.embedding_dim;
    let mut x = Vec::with_capacity(params.config.input_dim());
    for (t, &row) in f.iter().enumerate() {
        x.extend_from_slice(&params.embeddings[t][row * d..(row + 1) * d]);
    }
    let mut z1 = Vec::new();
    params.backbone[0].apply(&x, &mut z1);
    let h1 = relu(&z1);
    let mut z2 = Vec::new();
    params.backbone[1].apply(&h1, &mut z2);
    let h2 = relu(&z2);
    let towers = slots
        .iter()
        .map(|&s| {
            let t = &params.towers[s];
            let mut zt = Vec::new();
            t.hidden.apply(&h2, &mut zt);
            let ht = relu(&zt);
            let mut o = Vec::new();
            t.out.apply(&ht, &mut o);
            let p = transform(t.head.transform(), o[0]);
            (zt, ht, o[0], p)
        })
        .collect();
    Trace { x, z1, h1, z2, h2, towers }
}

/// Prediction of every head for one example, in tower order.
pub fn forward(params: &PredictorParams, f: &Features) -> Vec<f64> {
    let slots: Vec<usize> = (0..params.towers.len()).collect();
    forward_trace(params, f, &slots).towers.into_iter().map(|t| t.3).collect()
}

/// Predictions of `head` for every feature row.
pub fn predict(params: &PredictorParams, features: &[Features], head: Head) -> Result<Vec<f64>, PredictorError> {
    let slot = params.head_slot(head).ok_or(PredictorError::UnknownHead(head))?;
    Ok(features.par_iter().map(|f| forward_trace(params, f, &[slot]).towers[0].3).collect())
}

/// Accumulated gradient of a mean loss.
struct Grad {
    rows: BTreeMap<(usize, usize), Vec<f64>>,
    layers: Vec<Dense>,
    loss: Vec<f64>,
    count: Vec<usize>,
}

impl Grad {
    fn zeros(params: &PredictorParams) -> Self {
        Self {
            rows: BTreeMap::new(),
            layers: params.layers().iter().map(|l| Dense::zeros(l.rows, l.cols)).collect(),
            loss: vec![0.0; params.towers.len()],
            count: vec![0; params.towers.len()],
        }
    }

    fn add(&mut self, other: Grad) {
        for (k, v) in other.rows {
            match self.rows.get_mut(&k) {
                Some(row) => row.iter_mut().zip(&v).for_each(|(a, b)| *a += b),
                None => {
                    self.rows.insert(k, v);
                }
            }
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.iter_mut().zip(&b.w).for_each(|(x, y)| *x += y);
            a.b.iter_mut().zip(&b.b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.loss.iter_mut().zip(&other.loss) {
            *a += b;
        }
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
    }
}

/// One example of a batch: feature row and the label of each trained tower slot.
#[derive(Debug, Clone)]
struct Item<'a> {
    features: &'a Features,
    labels: Vec<(usize, f64)>,
}

struct LossParams<'a> {
    lambda: f64,
    rho: f64,
    scale: f64,
    /// Per tower slot.
    weights: &'a [f64],
}

/// Backpropagates one example into `g`. With `shared = false` the gradient
/// stops at the tower inputs.
fn backprop(params: &PredictorParams, item: &Item, lp: &LossParams, shared: bool, g: &mut Grad) {
    let slots: Vec<usize> = item.labels.iter().map(|&(s, _)| s).collect();
    let tr = forward_trace(params, item.features, &slots);
    let nb = params.backbone.len();
    let mut dh2 = vec![0.0; tr.h2.len()];
    for ((&(slot, y), (zt, ht, _, p)), _) in item.labels.iter().zip(&tr.towers).zip(0..) {
        let tower = &params.towers[slot];
        g.loss[slot] += loss_value(tower.loss, *p, y, lp.lambda, lp.rho);
        g.count[slot] += 1;
        let go = lp.scale
            * lp.weights[slot]
            * loss_grad_pred(tower.loss, *p, y, lp.lambda, lp.rho) * transform_grad(tower.head.transform(), *p);
        let (hi, oi) = (nb + 2 * slot, nb + 2 * slot + 1);
        {
            let out = &mut g.layers[oi];
            out.b[0] += go;
            for (w, h) in out.w.iter_mut().zip(ht) {
                *w += go * h;
            }
        }
        let dzt: Vec<f64> = zt.iter().zip(&tower.out.w).map(|(&z, &w)| if z > 0.0 { go * w } else { 0.0 }).collect();
        let hid = &mut g.layers[hi];
        let cols = tower.hidden.cols;
        for (r, &dz) in dzt.iter().enumerate() {
            if dz == 0.0 {
                continue;
            }
            hid.b[r] += dz;
            for (c, h) in tr.h2.iter().enumerate() {
                hid.w[r * cols + c] += dz * h;
            }
            if shared {
                for (c, acc) in dh2.iter_mut().enumerate() {
                    *acc += dz * tower.hidden.w[r * cols + c];
                }
            }
        }
    }
    if !shared {
        return;
    }
    let mut dx = vec![0.0; tr.x.len()];
    let mut upstream = dh2;
    let inputs = [&tr.x, &tr.h1];
    let pre = [&tr.z1, &tr.z2];
    for l in (0..nb).rev() {
        let layer = &params.backbone[l];
        let dz: Vec<f64> = upstream.iter().zip(pre[l]).map(|(&d, &z)| if z > 0.0 { d } else { 0.0 }).collect();
        let mut down = vec![0.0; layer.cols];
        let gl = &mut g.layers[l];
        for (r, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            gl.b[r] += d;
            let row = r * layer.cols;
            for (c, x) in inputs[l].iter().enumerate() {
                gl.w[row + c] += d * x;
                down[c] += d * layer.w[row + c];
            }
        }
        if l == 0 {
            dx = down;
        } else {
            upstream = down;
        }
    }
    let dim = params.config.embedding_dim;
    for (t, &row) in item.features.iter().enumerate() {
        let part = &dx[t * dim..(t + 1) * dim];
        match g.rows.get_mut(&(t, row)) {
            Some(acc) => acc.iter_mut().zip(part).for_each(|(a, b)| *a += b),
            None => {
                g.rows.insert((t, row), part.to_vec());
            }
        }
    }
}

fn batch_gradient(params: &PredictorParams, items: &[Item], lp: &LossParams, shared: bool) -> Grad {
    let parts: Vec<Grad> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Grad::zeros(params);
            for it in chunk {
                backprop(params, it, lp, shared, &mut g);
            }
            g
        })
        .collect();
    let mut total = Grad::zeros(params);
    for p in parts {
        total.add(p);
    }
    total
}

// ---------------------------------------------------------------------------
// optimizer

/// Per-parameter accumulators for the decayed adaptive-gradient update
/// `acc = decay * acc + g^2; p -= lr * g / sqrt(acc)`. Each accumulator
/// decays only when its parameter receives an update.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub acc: PredictorParams,
    pub steps: u64,
    /// Loss multiplier per tower slot.
    pub loss_weights: Vec<f64>,
}

impl OptimizerState {
    pub fn new(params: &PredictorParams, config: &TrainConfig) -> Self {
        let mut acc = params.clone();
        for b in acc.blocks_mut() {
            b.iter_mut().for_each(|x| *x = config.initial_accumulator);
        }
        let loss_weights = vec![1.0; params.towers.len()];
        Self { acc, steps: 0, loss_weights }
    }

    /// Accumulators of the shared embeddings and backbone, flattened.
    pub fn shared_snapshot(&self) -> Vec<u64> {
        self.acc.shared_snapshot()
    }
}

fn update(p: &mut [f64], acc: &mut [f64], g: &[f64], lr: f64, decay: f64) {
    for ((p, a), &g) in p.iter_mut().zip(acc.iter_mut()).zip(g) {
        *a = decay * *a + g * g;
        *p -= lr * g / a.sqrt();
    }
}

fn apply_grad(
    params: &mut PredictorParams,
    state: &mut OptimizerState,
    g: &Grad,
    layers: &[usize],
    cfg: &TrainConfig,
) {
    let dim = params.config.embedding_dim;
    for (&(t, row), grad) in &g.rows {
        let range = row * dim..(row + 1) * dim;
        update(
            &mut params.embeddings[t][range.clone()],
            &mut state.acc.embeddings[t][range],
            grad,
            cfg.learning_rate,
            cfg.decay,
        );
    }
    let mut pl = params.layers_mut();
    let mut al = state.acc.layers_mut();
    for &l in layers {
        update(&mut pl[l].w, &mut al[l].w, &g.layers[l].w, cfg.learning_rate, cfg.decay);
        update(&mut pl[l].b, &mut al[l].b, &g.layers[l].b, cfg.learning_rate, cfg.decay);
    }
    state.steps += 1;
}

fn check_finite(g: &Grad, params: &PredictorParams, epoch: usize) -> Result<(), PredictorError> {
    for (slot, l) in g.loss.iter().enumerate() {
        if !l.is_finite() {
            return Err(PredictorError::Divergence { head: params.towers[slot].head, epoch });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// training

/// Inputs of the training loop. `examples` and `features` are aligned.
pub struct TrainingSet<'a> {
    pub features: &'a [Features],
    pub examples: &'a [LabeledExample],
    /// One plan per training day, in day order.
    pub plans: &'a [DualStreamPlan],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    /// Mean per-example training loss of each head over the epoch.
    pub losses: Vec<(Head, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochTrace>,
    pub standard_steps: usize,
    pub author_steps: usize,
}

fn loss_params<'a>(cfg: &TrainConfig, batch: usize, weights: &'a [f64]) -> LossParams<'a> {
    LossParams { lambda: cfg.lambda, rho: cfg.rho, scale: 1.0 / batch as f64, weights }
}

/// Gradient step on all heads except the author head.
pub fn standard_step(
    params: &mut PredictorParams,
    state: &mut OptimizerState,
    data: &TrainingSet,
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<(Head, f64, usize)>, PredictorError> {
    let slots: Vec<usize> = (0..params.towers.len()).filter(|&s| params.towers[s].head != Head::Author).collect();
    if slots.is_empty() || batch.is_empty() {
        return Ok(Vec::new());
    }
    let items: Vec<Item> = batch
        .iter()
        .map(|&k| Item {
            features: &data.features[k],
            labels: slots
                .iter()
                .filter_map(|&s| params.towers[s].head.label(&data.examples[k]).map(|y| (s, y)))
                .collect(),
        })
        .collect();
    let g = batch_gradient(params, &items, &loss_params(cfg, batch.len(), &state.loss_weights), true);
    check_finite(&g, params, 0)?;
    let layers: Vec<usize> = (0..params.backbone.len()).chain(slots.iter().flat_map(|&s| [2 + 2 * s, 3 + 2 * s])).collect();
    apply_grad(params, state, &g, &layers, cfg);
    Ok(slots.iter().map(|&s| (params.towers[s].head, g.loss[s], g.count[s])).collect())
}

/// Gradient step on the author tower alone; `batch` holds `(example, label in seconds)`.
pub fn author_step(
    params: &mut PredictorParams,
    state: &mut OptimizerState,
    features: &[Features],
    batch: &[(usize, f64)],
    cfg: &TrainConfig,
) -> Result<Option<(f64, usize)>, PredictorError> {
    let Some(slot) = params.head_slot(Head::Author) else {
        return Ok(None);
    };
    if batch.is_empty() {
        return Ok(None);
    }
    let items: Vec<Item> = batch
        .iter()
        .map(|&(k, label)| Item { features: &features[k], labels: vec![(slot, label / TIME_UNIT_SECONDS)] })
        .collect();
    let mut g = batch_gradient(params, &items, &loss_params(cfg, batch.len(), &state.loss_weights), false);
    check_finite(&g, params, 0)?;
    g.rows.clear();
    apply_grad(params, state, &g, &[2 + 2 * slot, 3 + 2 * slot], cfg);
    Ok(Some((g.loss[slot], g.count[slot])))
}

/// One pass over every plan. Within a day, standard and author batches alternate.
pub fn train_epoch(
    params: &mut PredictorParams,
    state: &mut OptimizerState,
    data: &TrainingSet,
    cfg: &TrainConfig,
    epoch: usize,
    report: &mut TrainReport,
) -> Result<EpochTrace, PredictorError> {
    let mut sums: BTreeMap<Head, (f64, usize)> = BTreeMap::new();
    for plan in data.plans {
        let mut rng = sub_rng(cfg.seed, ((epoch as u64) << 32) | plan.day as u64);
        let mut standard = plan.standard.clone();
        standard.shuffle(&mut rng);
        let mut delayed = plan.delayed.clone();
        delayed.shuffle(&mut rng);
        let std_batches: Vec<&[usize]> = standard.chunks(cfg.batch_size).collect();
        let del_batches: Vec<&[(usize, f64)]> = delayed.chunks(cfg.batch_size).collect();
        for b in 0..std_batches.len().max(del_batches.len()) {
            if let Some(batch) = std_batches.get(b) {
                let losses = standard_step(params, state, data, batch, cfg).map_err(|e| with_epoch(e, epoch))?;
                for (h, l, n) in losses {
                    let e = sums.entry(h).or_default();
                    e.0 += l;
                    e.1 += n;
                }
                report.standard_steps += 1;
            }
            if let Some(batch) = del_batches.get(b) {
                if let Some((l, n)) = author_step(params, state, data.features, batch, cfg).map_err(|e| with_epoch(e, epoch))? {
                    let e = sums.entry(Head::Author).or_default();
                    e.0 += l;
                    e.1 += n;
                    report.author_steps += 1;
                }
            }
        }
    }
    if !params.is_finite() {
        let head = sums.keys().next().copied().unwrap_or(Head::Pdq);
        return Err(PredictorError::Divergence { head, epoch });
    }
    let losses = params
        .heads()
        .into_iter()
        .filter_map(|h| sums.get(&h).filter(|(_, n)| *n > 0).map(|(l, n)| (h, l / *n as f64)))
        .collect();
    Ok(EpochTrace { epoch, losses })
}

fn with_epoch(e: PredictorError, epoch: usize) -> PredictorError {
    match e {
        PredictorError::Divergence { head, .. } => PredictorError::Divergence { head, epoch },
        other => other,
    }
}

/// Inverse variance of each head's training labels, per tower slot: standard
/// examples for most heads, matured delayed labels for the author head.
/// Heads whose labels have zero or undefined variance keep weight 1.
pub fn balanced_loss_weights(params: &PredictorParams, data: &TrainingSet) -> Vec<f64> {
    params
        .towers
        .iter()
        .map(|t| {
            let labels: Vec<f64> = if t.head == Head::Author {
                data.plans.iter().flat_map(|p| p.delayed.iter().map(|&(_, y)| y / TIME_UNIT_SECONDS)).collect()
            } else {
                data.plans
                    .iter()
                    .flat_map(|p| p.standard.iter().filter_map(|&k| t.head.label(&data.examples[k])))
                    .collect()
            };
            let n = labels.len() as f64;
            let mean = labels.iter().sum::<f64>() / n;
            let var = labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
            if var > 0.0 && var.is_finite() {
                1.0 / var
            } else {
                1.0
            }
        })
        .collect()
}

/// Trains for `cfg.epochs` epochs and rounds the result to serialized precision.
pub fn train(
    params: &mut PredictorParams,
    data: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<(OptimizerState, TrainReport), PredictorError> {
    cfg.validate()?;
    let mut state = OptimizerState::new(params, cfg);
    if cfg.balance_heads {
        state.loss_weights = balanced_loss_weights(params, data);
    }
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let trace = train_epoch(params, &mut state, data, cfg, epoch, &mut report)?;
        log::info!(
            "epoch {epoch}: {}",
            trace.losses.iter().map(|(h, l)| format!("{h}={l:.5}")).collect::<Vec<_>>().join(" ")
        );
        report.epochs.push(trace);
    }
    params.canonicalize();
    Ok((state, report))
}

/// Training with learned attribution weights: each epoch regenerates the
/// attributed labels from the current weights, trains, then takes one
/// gradient step of size `weight_lr` on the weights through the label
/// dependence of the attributed head's loss.
#[allow(clippy::too_many_arguments)]
pub fn train_with_learned_attribution(
    params: &mut PredictorParams,
    dataset: &Dataset,
    examples: &mut [LabeledExample],
    features: &[Features],
    plans: &[DualStreamPlan],
    attribution: &mut AttributionConfig,
    cap: f64,
    weight_lr: f64,
    cfg: &TrainConfig,
) -> Result<(OptimizerState, TrainReport), PredictorError> {
    cfg.validate()?;
    attribution.mode = AttributionMode::Learned;
    let slot = params.head_slot(Head::Attributed).ok_or(PredictorError::UnknownHead(Head::Attributed))?;
    let loss = params.towers[slot].loss;
    let mut state = OptimizerState::new(params, cfg);
    let mut report = TrainReport::default();
    let train_idx: Vec<usize> = plans.iter().flat_map(|p| p.standard.iter().copied()).collect();
    for epoch in 0..cfg.epochs {
        fill_attributed_labels(dataset, examples, attribution, cap)
            .map_err(|e| PredictorError::InvalidConfig(e.to_string()))?;
        let data = TrainingSet { features, examples, plans };
        if cfg.balance_heads {
            state.loss_weights = balanced_loss_weights(params, &data);
        }
        let trace = train_epoch(params, &mut state, &data, cfg, epoch, &mut report)?;
        report.epochs.push(trace);

        let mut upstream = vec![0.0; examples.len()];
        let n = train_idx.len().max(1) as f64;
        for &k in &train_idx {
            let p = forward_trace(params, &features[k], &[slot]).towers[0].3;
            let y = examples[k].attributed_slide_time / TIME_UNIT_SECONDS;
            upstream[k] = loss_grad_label(loss, p, cfg.lambda, cfg.rho, y) / (n * TIME_UNIT_SECONDS);
        }
        let grad = learned_weight_gradient(dataset, examples, &upstream, attribution, cap);
        for (w, g) in attribution.weights.iter_mut().zip(grad) {
            *w -= weight_lr * g;
        }
    }
    fill_attributed_labels(dataset, examples, attribution, cap)
        .map_err(|e| PredictorError::InvalidConfig(e.to_string()))?;
    params.canonicalize();
    Ok((state, report))
}

// ---------------------------------------------------------------------------
// gradient check

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: usize,
    /// Probes redrawn because the perturbation crossed a ReLU kink.
    pub redrawn: usize,
    pub max_rel_error: f64,
}

fn activation_pattern(params: &PredictorParams, features: &[Features], slot: usize) -> Vec<bool> {
    let mut v = Vec::new();
    for f in features {
        let tr = forward_trace(params, f, &[slot]);
        v.extend(tr.z1.iter().chain(&tr.z2).chain(&tr.towers[0].0).map(|&z| z > 0.0));
    }
    v
}

fn mean_loss(params: &PredictorParams, features: &[Features], labels: &[f64], slot: usize, lp: &LossParams) -> f64 {
    let kind = params.towers[slot].loss;
    features
        .iter()
        .zip(labels)
        .map(|(f, &y)| loss_value(kind, forward_trace(params, f, &[slot]).towers[0].3, y, lp.lambda, lp.rho))
        .sum::<f64>()
        / features.len() as f64
}

/// Compares the analytic gradient of the mean loss of `head` (with its
/// configured loss kind) over `features`/`labels` against central finite
/// differences at `probes` random coordinates. Relative error is
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(
    params: &PredictorParams,
    features: &[Features],
    labels: &[f64],
    head: Head,
    cfg: &TrainConfig,
    probes: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport, PredictorError> {
    check_lengths(&vec![0.0; features.len()], labels)?;
    let slot = params.head_slot(head).ok_or(PredictorError::UnknownHead(head))?;
    let unit = vec![1.0; params.towers.len()];
    let lp = loss_params(cfg, features.len(), &unit);
    let items: Vec<Item> = features.iter().zip(labels).map(|(f, &y)| Item { features: f, labels: vec![(slot, y)] }).collect();
    let g = batch_gradient(params, &items, &lp, true);

    // candidate coordinates: touched embedding rows, backbone, this head's tower
    let dim = params.config.embedding_dim;
    let nb = params.backbone.len();
    let mut coords: Vec<(usize, usize, f64)> = Vec::new();
    for (&(t, row), grad) in &g.rows {
        for (k, &v) in grad.iter().enumerate() {
            coords.push((t, row * dim + k, v));
        }
    }
    let layer_ids: Vec<usize> = (0..nb).chain([nb + 2 * slot, nb + 2 * slot + 1]).collect();
    for &l in &layer_ids {
        let gl = &g.layers[l];
        let wb = NUM_TABLES + 2 * l;
        coords.extend(gl.w.iter().enumerate().map(|(k, &v)| (wb, k, v)));
        coords.extend(gl.b.iter().enumerate().map(|(k, &v)| (wb + 1, k, v)));
    }

    let mut rng = sub_rng(seed, 0x9c4e);
    let base_pattern = activation_pattern(params, features, slot);
    let mut probe_params = params.clone();
    let mut report = GradCheckReport { probes: 0, redrawn: 0, max_rel_error: 0.0 };
    let mut attempts = 0;
    while report.probes < probes {
        attempts += 1;
        if attempts > probes * 50 {
            break;
        }
        let (block, idx, analytic) = coords[rng.random_range(0..coords.len())];
        let original = probe_params.blocks_mut()[block][idx];
        probe_params.blocks_mut()[block][idx] = original + eps;
        let up = mean_loss(&probe_params, features, labels, slot, &lp);
        let up_pattern = activation_pattern(&probe_params, features, slot);
        probe_params.blocks_mut()[block][idx] = original - eps;
        let down = mean_loss(&probe_params, features, labels, slot, &lp);
        let down_pattern = activation_pattern(&probe_params, features, slot);
        probe_params.blocks_mut()[block][idx] = original;
        if up_pattern != base_pattern || down_pattern != base_pattern {
            report.redrawn += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.probes += 1;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// serialization

const PARAMS_HEADER: &str = "#ltvrank-params v1";

pub fn write_params<W: Write>(params: &PredictorParams, mut w: W) -> io::Result<()> {
    let c = &params.config;
    writeln!(w, "{PARAMS_HEADER}")?;
    writeln!(
        w,
        "model\tembedding_dim={}\thidden={},{}\ttower_hidden={}\tvocab={}\thash_multiplier={}\tinit_seed={}\theads={}",
        c.embedding_dim,
        c.hidden[0],
        c.hidden[1],
        c.tower_hidden,
        c.vocab.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        c.hash_multiplier,
        c.init_seed,
        c.heads.iter().map(|(h, l)| format!("{h}:{}", l.name())).collect::<Vec<_>>().join(",")
    )?;
    for (name, block) in params.blocks() {
        let cols = if name.starts_with("emb.") {
            c.embedding_dim
        } else if name.ends_with(".w") {
            params.layers().iter().find(|l| std::ptr::eq(l.w.as_slice(), block)).map_or(1, |l| l.cols)
        } else {
            1
        };
        let rows = block.len() / cols;
        writeln!(w, "block\t{name}\t{rows}\t{cols}")?;
        for r in 0..rows {
            let line: Vec<String> = block[r * cols..(r + 1) * cols].iter().map(|&x| format_real(x)).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
    }
    w.flush()
}

fn parse_model_line(text: &str, line: usize, offset: u64) -> Result<ModelConfig, DataError> {
    let bad = |field: &'static str, message: String| DataError::Parse { line, offset, field, message };
    let mut c = ModelConfig::default();
    let mut fields = text.split('\t');
    if fields.next() != Some("model") {
        return Err(bad("model", "expected model line".into()));
    }
    let num = |v: &str, f: &'static str| v.parse::<usize>().map_err(|e| bad(f, e.to_string()));
    for kv in fields {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad("model", format!("malformed `{kv}`")))?;
        match k {
            "embedding_dim" => c.embedding_dim = num(v, "embedding_dim")?,
            "tower_hidden" => c.tower_hidden = num(v, "tower_hidden")?,
            "hidden" => {
                let parts: Vec<&str> = v.split(',').collect();
                if parts.len() != 2 {
                    return Err(bad("hidden", format!("expected two sizes, found `{v}`")));
                }
                c.hidden = [num(parts[0], "hidden")?, num(parts[1], "hidden")?];
            }
            "vocab" => {
                let parts: Vec<&str> = v.split(',').collect();
                if parts.len() != NUM_TABLES {
                    return Err(bad("vocab", format!("expected {NUM_TABLES} sizes, found `{v}`")));
                }
                for (slot, p) in c.vocab.iter_mut().zip(parts) {
                    *slot = num(p, "vocab")?;
                }
            }
            "hash_multiplier" => c.hash_multiplier = v.parse().map_err(|e| bad("hash_multiplier", format!("{e}")))?,
            "init_seed" => c.init_seed = v.parse().map_err(|e| bad("init_seed", format!("{e}")))?,
            "heads" => {
                c.heads = v
                    .split(',')
                    .map(|hl| {
                        let (h, l) = hl.split_once(':').ok_or_else(|| bad("heads", format!("malformed `{hl}`")))?;
                        let head = Head::parse(h).ok_or_else(|| bad("heads", format!("unknown head `{h}`")))?;
                        let loss = LossKind::parse(l).ok_or_else(|| bad("heads", format!("unknown loss `{l}`")))?;
                        Ok((head, loss))
                    })
                    .collect::<Result<_, DataError>>()?;
            }
            _ => return Err(bad("model", format!("unknown key `{k}`"))),
        }
    }
    Ok(c)
}

pub fn read_params<R: BufRead>(reader: R) -> Result<PredictorParams, PredictorError> {
    let mut lines = LineReader::new(reader);
    lines.expect_header(PARAMS_HEADER)?;
    let (line, offset, text) = lines.next_line()?.ok_or(DataError::Parse {
        line: 2,
        offset: 0,
        field: "model",
        message: "missing model line".into(),
    })?;
    let config = parse_model_line(&text, line, offset)?;
    let mut params = PredictorParams::new(config)?;
    let names: Vec<String> = params.blocks().into_iter().map(|(n, _)| n).collect();
    let mut blocks = params.blocks_mut();
    for (name, block) in names.iter().zip(blocks.iter_mut()) {
        let (line, offset, text) = lines.next_line()?.ok_or(DataError::Parse {
            line: 0,
            offset: 0,
            field: "block",
            message: format!("missing block `{name}`"),
        })?;
        let bad = |field: &'static str, message: String| DataError::Parse { line, offset, field, message };
        let parts: Vec<&str> = text.split('\t').collect();
        if parts.len() != 4 || parts[0] != "block" || parts[1] != name {
            return Err(bad("block", format!("expected block `{name}`, found `{text}`")).into());
        }
        let rows: usize = parts[2].parse().map_err(|e| bad("rows", format!("{e}")))?;
        let cols: usize = parts[3].parse().map_err(|e| bad("cols", format!("{e}")))?;
        if rows * cols != block.len() {
            return Err(bad("block", format!("`{name}` has {} values, header says {rows}x{cols}", block.len())).into());
        }
        for r in 0..rows {
            let (line, offset, text) = lines.next_line()?.ok_or(DataError::Parse {
                line: line + r + 1,
                offset: 0,
                field: "values",
                message: format!("block `{name}` ends early"),
            })?;
            let values: Vec<&str> = text.split(' ').collect();
            if values.len() != cols {
                return Err(DataError::Parse {
                    line,
                    offset,
                    field: "values",
                    message: format!("expected {cols} values, found {}", values.len()),
                }
                .into());
            }
            for (c, v) in values.iter().enumerate() {
                block[r * cols + c] = v.parse().map_err(|e| DataError::Parse {
                    line,
                    offset,
                    field: "values",
                    message: format!("`{v}`: {e}"),
                })?;
            }
        }
    }
    Ok(params)
}
