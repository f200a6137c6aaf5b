//! Serving-time score fusion and counterfactual replay against the simulator.
//!
//! `score = (w_watch*watch + w_attr*attributed + w_author*author)
//!          * pdq^e_pdq * completion^e_completion * interaction^e_interaction`
//!
//! Replay turns every held-out logged session into a request. Each page draws
//! fresh candidates from the logging policy, shows the best `PAGE_SIZE` by
//! fused score, and lets the simulator produce engagement and session stops.
//! Randomness is keyed so that baseline and treatment see the same draws:
//! candidates by `(request, page)`, engagement by `(request, video)` and stop
//! decisions by `(request, impression index)`.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::datamodel::{format_real, Dataset, PAGE_SIZE};
use crate::pdq::PageGroupSpec;
use crate::predictor::{forward, Features, Head, PredictorParams};
use crate::synthgen::{sub_rng, HistoryItem, World};

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("invalid fusion weights: {0}")]
    InvalidWeights(String),
    #[error("multiplicative head `{head}` must be positive, got {value}")]
    NonPositiveHead { head: &'static str, value: f64 },
    #[error("non-finite prediction for head `{0}`")]
    NonFinite(&'static str),
    #[error("model lacks head `{0}` required by the fusion weights")]
    MissingHead(Head),
    #[error("held-out split has no sessions")]
    EmptyHeldOut,
    #[error("invalid replay config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    pub w_watch: f64,
    pub w_attr: f64,
    pub w_author: f64,
    pub e_pdq: f64,
    pub e_completion: f64,
    pub e_interaction: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { w_watch: 1.0, w_attr: 1.0, w_author: 1.0, e_pdq: 1.0, e_completion: 1.0, e_interaction: 1.0 }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<(), FusionError> {
        let all = [self.w_watch, self.w_attr, self.w_author, self.e_pdq, self.e_completion, self.e_interaction];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(FusionError::InvalidWeights("weights and exponents must be finite and non-negative".into()));
        }
        if self.w_watch + self.w_attr + self.w_author <= 0.0 {
            return Err(FusionError::InvalidWeights("at least one additive weight must be positive".into()));
        }
        Ok(())
    }

    /// Heads whose prediction the score depends on.
    pub fn required_heads(&self) -> Vec<Head> {
        [
            (self.w_watch, Head::WatchTime),
            (self.w_attr, Head::Attributed),
            (self.w_author, Head::Author),
            (self.e_pdq, Head::Pdq),
            (self.e_completion, Head::Completion),
            (self.e_interaction, Head::Interaction),
        ]
        .into_iter()
        .filter(|(w, _)| *w > 0.0)
        .map(|(_, h)| h)
        .collect()
    }
}

/// Head predictions of one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadScores {
    pub watch: f64,
    pub attributed: f64,
    pub author: f64,
    pub pdq: f64,
    pub completion: f64,
    pub interaction: f64,
}

pub fn fused_score(s: &HeadScores, w: &FusionWeights) -> Result<f64, FusionError> {
    let additive = [("watch", s.watch), ("attributed", s.attributed), ("author", s.author)];
    for (name, v) in additive {
        if !v.is_finite() {
            return Err(FusionError::NonFinite(name));
        }
    }
    let mut score = w.w_watch * s.watch + w.w_attr * s.attributed + w.w_author * s.author;
    for (head, value, e) in [
        ("pdq", s.pdq, w.e_pdq),
        ("completion", s.completion, w.e_completion),
        ("interaction", s.interaction, w.e_interaction),
    ] {
        if !value.is_finite() {
            return Err(FusionError::NonFinite(head));
        }
        if value <= 0.0 {
            return Err(FusionError::NonPositiveHead { head, value });
        }
        if e != 0.0 {
            score *= value.powf(e);
        }
    }
    Ok(score)
}

/// How replay orders a page's candidates.
#[derive(Debug, Clone, Copy)]
pub enum Ranker<'a> {
    Model { params: &'a PredictorParams, spec: &'a PageGroupSpec, weights: FusionWeights },
    /// Uniformly random scores.
    Random,
}

struct ModelScorer<'a> {
    params: &'a PredictorParams,
    spec: &'a PageGroupSpec,
    weights: FusionWeights,
    slots: [Option<usize>; 6],
}

impl<'a> ModelScorer<'a> {
    fn new(params: &'a PredictorParams, spec: &'a PageGroupSpec, weights: FusionWeights) -> Result<Self, FusionError> {
        weights.validate()?;
        for h in weights.required_heads() {
            params.head_slot(h).ok_or(FusionError::MissingHead(h))?;
        }
        let slot = |h| params.head_slot(h);
        Ok(Self {
            params,
            spec,
            weights,
            slots: [
                slot(Head::WatchTime),
                slot(Head::Attributed),
                slot(Head::Author),
                slot(Head::Pdq),
                slot(Head::Completion),
                slot(Head::Interaction),
            ],
        })
    }

    fn score(&self, world: &World, user: u64, video: u64, page: u32) -> Result<f64, FusionError> {
        let c = &self.params.config;
        let v = world.video(video);
        let f: Features = [
            c.bucket(0, Some(user)),
            c.bucket(1, Some(video)),
            c.bucket(2, Some(v.author)),
            c.bucket(3, Some(v.category)),
            c.bucket(4, Some(self.spec.group_of(page) as u64)),
        ];
        let out = forward(self.params, &f);
        let get = |k: usize, missing: f64| self.slots[k].map_or(missing, |s| out[s]);
        let scores = HeadScores {
            watch: get(0, 0.0),
            attributed: get(1, 0.0),
            author: get(2, 0.0),
            pdq: get(3, 1.0),
            completion: get(4, 1.0),
            interaction: get(5, 1.0),
        };
        fused_score(&scores, &self.weights)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayConfig {
    pub candidates_per_page: usize,
    /// Requests replayed per seed (the first ones in dataset order).
    pub max_sessions: usize,
    pub seeds: usize,
    pub base_seed: u64,
    pub bootstrap_samples: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self { candidates_per_page: 12, max_sessions: 20000, seeds: 20, base_seed: 1000, bootstrap_samples: 1000 }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.candidates_per_page < PAGE_SIZE {
            return Err(FusionError::InvalidConfig(format!("candidates_per_page must be at least {PAGE_SIZE}")));
        }
        if self.seeds == 0 || self.max_sessions == 0 {
            return Err(FusionError::InvalidConfig("seeds and max_sessions must be positive".into()));
        }
        Ok(())
    }
}

/// Totals of one replay run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ReplayMetrics {
    pub requests: usize,
    pub impressions: usize,
    /// Impressions with positive watch time.
    pub vv: usize,
    pub watch: f64,
    pub qa_vv: usize,
    pub qa_watch: f64,
    /// Mean next-day visit probability over replayed (user, day) pairs.
    pub lt1: f64,
    /// Mean probability of a visit within three days, holding the pull constant.
    pub lt3: f64,
}

impl ReplayMetrics {
    pub const NAMES: [&'static str; 6] = ["vv", "watch", "qa_vv", "qa_watch", "lt1", "lt3"];

    pub fn values(&self) -> [f64; 6] {
        [self.vv as f64, self.watch, self.qa_vv as f64, self.qa_watch, self.lt1, self.lt3]
    }
}

struct SessionOutcome {
    user: u64,
    day: u32,
    impressions: usize,
    vv: usize,
    watch: f64,
    qa_vv: usize,
    qa_watch: f64,
    preferred_watch: f64,
}

const DRAW_PAGE: u64 = 1;
const DRAW_ENGAGEMENT: u64 = 2;
const DRAW_STOP: u64 = 3;

fn stream(request: u64, kind: u64, x: u64) -> u64 {
    request.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
        ^ kind.wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ x.wrapping_mul(0xA24B_AED4_963E_E407)
}

#[allow(clippy::too_many_arguments)]
fn replay_session(
    world: &World,
    ranker: &Ranker,
    scorer: Option<&ModelScorer>,
    user_id: u64,
    day: u32,
    cfg: &ReplayConfig,
    seed: u64,
    request: u64,
) -> Result<SessionOutcome, FusionError> {
    let mut stops = sub_rng(seed, stream(request, DRAW_STOP, 0));
    let user = &world.users[user_id as usize];
    let max_len = world.config.max_session_length;
    let mut out = SessionOutcome { user: user_id, day, impressions: 0, vv: 0, watch: 0.0, qa_vv: 0, qa_watch: 0.0, preferred_watch: 0.0 };
    let mut history: Vec<HistoryItem> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut prev: Option<u64> = None;
    let mut page = 0u32;
    loop {
        let rng = &mut sub_rng(seed, stream(request, DRAW_PAGE, page as u64));
        let mut candidates: Vec<u64> = Vec::with_capacity(cfg.candidates_per_page);
        for _ in 0..cfg.candidates_per_page {
            let mut pick = world.sample_candidate(user, prev, rng).0;
            for _ in 0..4 {
                if !seen.contains(&pick) && !candidates.contains(&pick) {
                    break;
                }
                pick = world.sample_candidate(user, prev, rng).0;
            }
            candidates.push(pick);
        }
        let mut scored: Vec<(f64, usize)> = Vec::with_capacity(candidates.len());
        for (k, &v) in candidates.iter().enumerate() {
            let s = match (ranker, scorer) {
                (Ranker::Random, _) => rng.random::<f64>(),
                (_, Some(sc)) => sc.score(world, user_id, v, page)?,
                (Ranker::Model { .. }, None) => unreachable!("model ranker without scorer"),
            };
            scored.push((s, k));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, k) in scored.iter().take(PAGE_SIZE) {
            let video = world.video(candidates[k]);
            let e = world.draw_engagement(
                user,
                video,
                &history,
                &mut sub_rng(seed, stream(request, DRAW_ENGAGEMENT, video.id)),
            );
            out.impressions += 1;
            out.watch += e.watch_time;
            let qa = world.is_qa_author(video.author);
            if e.watch_time > 0.0 {
                out.vv += 1;
                if qa {
                    out.qa_vv += 1;
                }
            }
            if qa {
                out.qa_watch += e.watch_time;
            }
            if user.affinity(video.author) > 0.0 {
                out.preferred_watch += e.watch_time;
            }
            history.push(HistoryItem { category: video.category, watch_time: e.watch_time });
            seen.insert(video.id);
            prev = Some(video.id);
            let stop = world.stop_probability(user, video, e.watch_time);
            if out.impressions >= max_len || stops.random::<f64>() < stop {
                return Ok(out);
            }
        }
        page += 1;
    }
}

/// Replays `requests` (`(user, day)` pairs) under one ranker and seed.
pub fn replay_policy(
    world: &World,
    requests: &[(u64, u32)],
    ranker: &Ranker,
    seed: u64,
    cfg: &ReplayConfig,
) -> Result<ReplayMetrics, FusionError> {
    cfg.validate()?;
    let scorer = match ranker {
        Ranker::Model { params, spec, weights } => Some(ModelScorer::new(params, spec, *weights)?),
        Ranker::Random => None,
    };
    let outcomes: Vec<SessionOutcome> = requests
        .par_iter()
        .enumerate()
        .map(|(k, &(user, day))| replay_session(world, ranker, scorer.as_ref(), user, day, cfg, seed, k as u64))
        .collect::<Result<_, _>>()?;
    let mut m = ReplayMetrics { requests: requests.len(), ..ReplayMetrics::default() };
    let mut pull: BTreeMap<(u64, u32), f64> = BTreeMap::new();
    for o in &outcomes {
        m.impressions += o.impressions;
        m.vv += o.vv;
        m.watch += o.watch;
        m.qa_vv += o.qa_vv;
        m.qa_watch += o.qa_watch;
        *pull.entry((o.user, o.day)).or_default() += o.preferred_watch;
    }
    for (&(user, _), &watch) in &pull {
        let p = world.visit_probability(&world.users[user as usize], watch);
        m.lt1 += p;
        m.lt3 += 1.0 - (1.0 - p).powi(3);
    }
    if !pull.is_empty() {
        m.lt1 /= pull.len() as f64;
        m.lt3 /= pull.len() as f64;
    }
    Ok(m)
}

/// `(user, day)` of the first `limit` sessions of `heldout`.
pub fn requests_from(heldout: &Dataset, limit: usize) -> Vec<(u64, u32)> {
    heldout.sessions.iter().take(limit).map(|s| (s.user_id, s.day)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub baseline: ReplayMetrics,
    pub treatment: ReplayMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricDelta {
    pub metric: &'static str,
    /// Mean over seeds of `(treatment - baseline) / baseline`.
    pub mean_relative: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Seeds where treatment strictly exceeds baseline.
    pub positive_seeds: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub per_seed: Vec<SeedOutcome>,
    pub deltas: Vec<MetricDelta>,
}

impl ReplayReport {
    pub fn delta(&self, metric: &str) -> Option<&MetricDelta> {
        self.deltas.iter().find(|d| d.metric == metric)
    }

    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "metric\tmean_rel_delta\tci_low\tci_high\tpositive_seeds\tseeds")?;
        for d in &self.deltas {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                d.metric,
                format_real(d.mean_relative),
                format_real(d.ci_low),
                format_real(d.ci_high),
                d.positive_seeds,
                d.seeds
            )?;
        }
        writeln!(w)?;
        writeln!(w, "seed\tpolicy\t{}", ReplayMetrics::NAMES.join("\t"))?;
        for s in &self.per_seed {
            for (name, m) in [("baseline", &s.baseline), ("treatment", &s.treatment)] {
                let vals: Vec<String> = m.values().iter().map(|&v| format_real(v)).collect();
                writeln!(w, "{}\t{name}\t{}", s.seed, vals.join("\t"))?;
            }
        }
        w.flush()
    }
}

fn relative(t: f64, b: f64) -> f64 {
    if b == 0.0 {
        if t == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (t - b) / b
    }
}

/// Percentile bootstrap over seeds of the mean relative delta (95%).
fn bootstrap_ci(values: &[f64], samples: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    if values.len() < 2 || samples == 0 {
        let v = values.first().copied().unwrap_or(0.0);
        return (v, v);
    }
    let mut means: Vec<f64> = (0..samples)
        .map(|_| (0..values.len()).map(|_| values[rng.random_range(0..values.len())]).sum::<f64>() / values.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (samples - 1) as f64).round() as usize).min(samples - 1)];
    (at(0.025), at(0.975))
}

/// Runs `baseline` and `treatment` rankers over `cfg.seeds` seeds on the
/// same requests and reports per-metric deltas.
pub fn compare_rankers(
    world: &World,
    requests: &[(u64, u32)],
    baseline: &Ranker,
    treatment: &Ranker,
    cfg: &ReplayConfig,
) -> Result<ReplayReport, FusionError> {
    cfg.validate()?;
    if requests.is_empty() {
        return Err(FusionError::EmptyHeldOut);
    }
    let mut per_seed = Vec::with_capacity(cfg.seeds);
    for k in 0..cfg.seeds as u64 {
        let seed = cfg.base_seed + k;
        per_seed.push(SeedOutcome {
            seed,
            baseline: replay_policy(world, requests, baseline, seed, cfg)?,
            treatment: replay_policy(world, requests, treatment, seed, cfg)?,
        });
    }
    let mut rng = sub_rng(cfg.base_seed, 0xb007);
    let deltas = ReplayMetrics::NAMES
        .iter()
        .enumerate()
        .map(|(i, &metric)| {
            let rel: Vec<f64> =
                per_seed.iter().map(|s| relative(s.treatment.values()[i], s.baseline.values()[i])).collect();
            let (ci_low, ci_high) = bootstrap_ci(&rel, cfg.bootstrap_samples, &mut rng);
            MetricDelta {
                metric,
                mean_relative: rel.iter().sum::<f64>() / rel.len() as f64,
                ci_low,
                ci_high,
                positive_seeds: per_seed.iter().filter(|s| s.treatment.values()[i] > s.baseline.values()[i]).count(),
                seeds: per_seed.len(),
            }
        })
        .collect();
    Ok(ReplayReport { per_seed, deltas })
}

/// Replay of `weights` against `baseline_weights` with the same model.
pub fn replay_eval(
    world: &World,
    heldout: &Dataset,
    params: &PredictorParams,
    spec: &PageGroupSpec,
    weights: &FusionWeights,
    baseline_weights: &FusionWeights,
    cfg: &ReplayConfig,
) -> Result<ReplayReport, FusionError> {
    let requests = requests_from(heldout, cfg.max_sessions);
    let baseline = Ranker::Model { params, spec, weights: *baseline_weights };
    let treatment = Ranker::Model { params, spec, weights: *weights };
    compare_rankers(world, &requests, &baseline, &treatment, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{LossKind, ModelConfig};
    use crate::synthgen::{generate, tests::small_config};
    use proptest::prelude::*;

    fn scores(watch: f64, attributed: f64, author: f64) -> HeadScores {
        HeadScores { watch, attributed, author, pdq: 0.5, completion: 0.8, interaction: 0.25 }
    }

    #[test]
    fn fused_examples() {
        let none = FusionWeights { e_pdq: 0.0, e_completion: 0.0, e_interaction: 0.0, ..FusionWeights::default() };
        assert_eq!(fused_score(&scores(2.0, 3.0, 5.0), &none).unwrap(), 10.0);
        let watch_only = FusionWeights { w_attr: 0.0, w_author: 0.0, ..none };
        assert_eq!(fused_score(&scores(2.0, 3.0, 5.0), &watch_only).unwrap(), 2.0);
        let pdq_only = FusionWeights { e_pdq: 1.0, ..none };
        assert_eq!(fused_score(&scores(2.0, 3.0, 5.0), &pdq_only).unwrap(), 5.0);
        let mut bad = scores(1.0, 1.0, 1.0);
        bad.completion = 0.0;
        assert!(matches!(fused_score(&bad, &FusionWeights::default()), Err(FusionError::NonPositiveHead { .. })));
        let zero = FusionWeights { w_watch: 0.0, w_attr: 0.0, w_author: 0.0, ..FusionWeights::default() };
        assert!(zero.validate().is_err());
    }

    proptest! {
        #[test]
        fn increasing_in_additive_heads(
            base in prop::array::uniform3(0.0f64..10.0),
            bump in 0.001f64..5.0,
            head in 0usize..3,
            w in prop::array::uniform3(0.01f64..3.0),
        ) {
            let weights = FusionWeights { w_watch: w[0], w_attr: w[1], w_author: w[2], ..FusionWeights::default() };
            let s = scores(base[0], base[1], base[2]);
            let mut up = base;
            up[head] += bump;
            let t = scores(up[0], up[1], up[2]);
            prop_assert!(fused_score(&t, &weights).unwrap() > fused_score(&s, &weights).unwrap());
        }

        #[test]
        fn scaling_additive_weights_keeps_ranking(
            a in prop::array::uniform3(0.0f64..10.0),
            b in prop::array::uniform3(0.0f64..10.0),
            k in 0i32..6,
        ) {
            let w = FusionWeights { w_watch: 0.7, w_attr: 1.3, w_author: 0.4, ..FusionWeights::default() };
            // power-of-two scaling keeps the products exact
            let c = 2f64.powi(k - 3);
            let wc = FusionWeights { w_watch: w.w_watch * c, w_attr: w.w_attr * c, w_author: w.w_author * c, ..w };
            let (sa, sb) = (scores(a[0], a[1], a[2]), scores(b[0], b[1], b[2]));
            let before = fused_score(&sa, &w).unwrap().total_cmp(&fused_score(&sb, &w).unwrap());
            let after = fused_score(&sa, &wc).unwrap().total_cmp(&fused_score(&sb, &wc).unwrap());
            prop_assert_eq!(before, after);
        }
    }

    fn tiny_world() -> (Dataset, World, PredictorParams) {
        let cfg = small_config(3);
        let (ds, _, world) = generate(&cfg).unwrap();
        let mut params = PredictorParams::new(ModelConfig {
            heads: vec![
                (Head::WatchTime, LossKind::Hybrid),
                (Head::Attributed, LossKind::Hybrid),
                (Head::Author, LossKind::Hybrid),
                (Head::Pdq, LossKind::Mse),
                (Head::Completion, LossKind::Mse),
                (Head::Interaction, LossKind::Mse),
            ],
            ..ModelConfig::default()
        })
        .unwrap();
        params.jitter(0.2, 4);
        (ds, world, params)
    }

    #[test]
    fn equal_weights_give_zero_deltas_and_replay_is_deterministic() {
        let (ds, world, params) = tiny_world();
        let spec = PageGroupSpec::default_groups();
        let cfg = ReplayConfig { max_sessions: 60, seeds: 3, ..ReplayConfig::default() };
        let w = FusionWeights::default();
        let report = replay_eval(&world, &ds, &params, &spec, &w, &w, &cfg).unwrap();
        for d in &report.deltas {
            assert_eq!((d.mean_relative, d.positive_seeds), (0.0, 0), "{}", d.metric);
        }
        let again = replay_eval(&world, &ds, &params, &spec, &w, &w, &cfg).unwrap();
        assert_eq!(report, again);
        let m = &report.per_seed[0].baseline;
        assert!(m.impressions > 0 && (0.0..=1.0).contains(&m.lt1) && m.lt3 >= m.lt1);
    }

    #[test]
    fn missing_head_and_empty_split_are_rejected() {
        let (_, world, _) = tiny_world();
        let params = PredictorParams::new(ModelConfig::single_head(Head::Pdq, LossKind::Mse)).unwrap();
        let spec = PageGroupSpec::default_groups();
        let ranker = Ranker::Model { params: &params, spec: &spec, weights: FusionWeights::default() };
        assert_eq!(
            replay_policy(&world, &[(0, 0)], &ranker, 1, &ReplayConfig::default()),
            Err(FusionError::MissingHead(Head::WatchTime))
        );
        assert_eq!(
            compare_rankers(&world, &[], &Ranker::Random, &Ranker::Random, &ReplayConfig::default()),
            Err(FusionError::EmptyHeldOut)
        );
    }
}
