//! Synthetic multi-day feed logs with planted structure.
//!
//! The generator builds a fixed [`World`] (categories, authors, videos, users)
//! from the seed and then simulates each user's visits independently from a
//! per-user sub-seed. Planted mechanisms:
//!
//! * session depth grows with user activity (`activity^position_bias_strength`),
//!   so deep pages are dominated by active users;
//! * watch time is zero-inflated gamma, scaled by video quality, the user's
//!   author affinity and category preference;
//! * a watched video raises the watch time of the next few same-category
//!   videos (the causal channel recorded in [`GroundTruth`]);
//! * the next-day visit probability grows with affinity and with the previous
//!   day's watch time on preferred authors.
//!
//! All generator parameters are artifact choices, not measurements.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, LogNormal, Poisson, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::datamodel::{
    canonical_real, format_real, quantize_time, session_slide_times, DataError, Dataset, ImpressionRecord, LineReader,
    Session, PAGE_SIZE,
};
use crate::pdq::PageGroupSpec;

pub const SOURCE_FOLLOW: u64 = 0;
pub const SOURCE_INTEREST: u64 = 1;
pub const SOURCE_SIMILAR: u64 = 2;
pub const SOURCE_COLLECTION: u64 = 3;
pub const SOURCE_EXPLORE: u64 = 4;

/// How many preceding impressions can causally lift a watch time.
pub const CARRYOVER_WINDOW: usize = 3;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: `{field}` {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("page group {0} has no impressions")]
    EmptyGroup(usize),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_users: usize,
    pub n_videos: usize,
    pub n_authors: usize,
    pub n_categories: usize,
    pub n_days: usize,
    pub embedding_dim: usize,
    /// Log-normal sigma of per-user activity (mean activity is 1).
    pub activity_shape: f64,
    pub zero_watch_prob: f64,
    pub watch_gamma_shape: f64,
    pub watch_gamma_scale: f64,
    pub author_affinity_strength: f64,
    pub category_carryover_strength: f64,
    pub position_bias_strength: f64,
    pub revisit_base_prob: f64,
    /// Continuation odds scale for an average user.
    pub base_session_length: f64,
    /// Continuation odds multiplier after a skipped (zero-watch) video.
    pub skip_continue_factor: f64,
    /// Poisson mean of additional sessions on a visit day.
    pub extra_session_rate: f64,
    pub max_session_length: usize,
    pub v2v_neighbors: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_users: 5000,
            n_videos: 20000,
            n_authors: 500,
            n_categories: 20,
            n_days: 10,
            embedding_dim: crate::datamodel::DEFAULT_EMBEDDING_DIM,
            activity_shape: 1.0,
            zero_watch_prob: 0.3,
            watch_gamma_shape: 1.5,
            watch_gamma_scale: 8.0,
            author_affinity_strength: 1.0,
            category_carryover_strength: 0.6,
            position_bias_strength: 1.0,
            revisit_base_prob: 0.4,
            base_session_length: 8.0,
            skip_continue_factor: 0.5,
            extra_session_rate: 0.5,
            max_session_length: 400,
            v2v_neighbors: 3,
            seed: 42,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |field, reason: &str| Err(GenError::InvalidConfig { field, reason: reason.to_string() });
        for (field, v) in [
            ("n_users", self.n_users),
            ("n_videos", self.n_videos),
            ("n_authors", self.n_authors),
            ("n_categories", self.n_categories),
            ("n_days", self.n_days),
            ("embedding_dim", self.embedding_dim),
            ("max_session_length", self.max_session_length),
        ] {
            if v == 0 {
                return bad(field, "must be >= 1");
            }
        }
        if self.n_videos < self.n_authors {
            return bad("n_videos", "must be >= n_authors so every author has a video");
        }
        for (field, p) in [("zero_watch_prob", self.zero_watch_prob), ("revisit_base_prob", self.revisit_base_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(field, "must be a probability in [0,1]");
            }
        }
        for (field, v) in [("watch_gamma_shape", self.watch_gamma_shape), ("watch_gamma_scale", self.watch_gamma_scale)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return bad(field, "must be positive and finite");
            }
        }
        for (field, v) in [
            ("activity_shape", self.activity_shape),
            ("author_affinity_strength", self.author_affinity_strength),
            ("category_carryover_strength", self.category_carryover_strength),
            ("position_bias_strength", self.position_bias_strength),
            ("base_session_length", self.base_session_length),
            ("skip_continue_factor", self.skip_continue_factor),
            ("extra_session_rate", self.extra_session_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(field, "must be non-negative and finite");
            }
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG stream `stream` derived from `seed`.
pub fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

const STREAM_WORLD: u64 = 0xC0FFEE;
const STREAM_USERS: u64 = 1 << 40;

#[derive(Debug, Clone)]
pub struct Video {
    pub id: u64,
    pub author: u64,
    pub category: u64,
    pub collection: Option<u64>,
    pub quality: f64,
    pub duration: f64,
    pub embedding: Vec<f64>,
    pub neighbors: Vec<(u64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Author {
    pub id: u64,
    pub home_category: u64,
    pub popularity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub id: u64,
    pub activity: f64,
    pub watch_scale: f64,
    /// `(category, weight)`, weights sum to 1.
    pub categories: Vec<(u64, f64)>,
    /// `(author, affinity)` for the user's preferred authors.
    pub authors: Vec<(u64, f64)>,
}

impl UserProfile {
    pub fn affinity(&self, author: u64) -> f64 {
        self.authors.iter().find(|(a, _)| *a == author).map_or(0.0, |(_, w)| *w)
    }

    pub fn category_weight(&self, category: u64) -> f64 {
        self.categories.iter().find(|(c, _)| *c == category).map_or(0.0, |(_, w)| *w)
    }

    pub fn max_affinity(&self) -> f64 {
        self.authors.iter().map(|(_, w)| *w).fold(0.0, f64::max)
    }
}

/// One preceding impression, as seen by the watch model.
#[derive(Debug, Clone, Copy)]
pub struct HistoryItem {
    pub category: u64,
    pub watch_time: f64,
}

#[derive(Debug, Clone)]
pub struct Engagement {
    pub base: f64,
    /// `(steps back, seconds)`: lift caused by the impression `steps back` earlier.
    pub lifts: Vec<(usize, f64)>,
    pub watch_time: f64,
    pub interaction: bool,
}

/// The latent catalogue and user population; fully determined by the config.
#[derive(Debug, Clone)]
pub struct World {
    pub config: GenConfig,
    pub videos: Vec<Video>,
    pub authors: Vec<Author>,
    pub users: Vec<UserProfile>,
    pub videos_by_category: Vec<Vec<u64>>,
    pub videos_by_author: Vec<Vec<u64>>,
    pub collections: Vec<Vec<u64>>,
    qa_author: Vec<bool>,
}

fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalize_canonical(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| canonical_real(x / n)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl World {
    pub fn build(config: &GenConfig) -> Result<Self, GenError> {
        config.validate()?;
        let c = config;
        let mut rng = sub_rng(c.seed, STREAM_WORLD);
        let dim = c.embedding_dim;

        let centroids: Vec<Vec<f64>> = (0..c.n_categories).map(|_| random_unit(dim, &mut rng)).collect();
        let popularity = LogNormal::new(0.0, 1.0).unwrap();
        let authors: Vec<Author> = (0..c.n_authors)
            .map(|id| Author {
                id: id as u64,
                home_category: rng.random_range(0..c.n_categories) as u64,
                popularity: rng.sample(popularity),
            })
            .collect();
        let author_dirs: Vec<Vec<f64>> = (0..c.n_authors).map(|_| random_unit(dim, &mut rng)).collect();

        let quality = LogNormal::new(0.0, 0.35).unwrap();
        let mut videos = Vec::with_capacity(c.n_videos);
        let mut videos_by_category = vec![Vec::new(); c.n_categories];
        let mut videos_by_author = vec![Vec::new(); c.n_authors];
        for id in 0..c.n_videos {
            // every author gets at least one video
            let author = if id < c.n_authors { id } else { rng.random_range(0..c.n_authors) };
            let category = if rng.random::<f64>() < 0.85 {
                authors[author].home_category
            } else {
                rng.random_range(0..c.n_categories) as u64
            };
            let noise_scale = 0.6 / (dim as f64).sqrt();
            let raw: Vec<f64> = (0..dim)
                .map(|k| {
                    1.6 * centroids[category as usize][k]
                        + 0.9 * author_dirs[author][k]
                        + noise_scale * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            videos.push(Video {
                id: id as u64,
                author: author as u64,
                category,
                collection: None,
                quality: rng.sample(quality),
                duration: quantize_time(rng.random_range(8.0..60.0)),
                embedding: normalize_canonical(&raw),
                neighbors: Vec::new(),
            });
            videos_by_category[category as usize].push(id as u64);
            videos_by_author[author].push(id as u64);
        }

        // Collections: roughly a quarter of each author's catalogue, split into series.
        let mut collections: Vec<Vec<u64>> = Vec::new();
        for vids in &videos_by_author {
            let members: Vec<u64> = vids.iter().copied().filter(|_| rng.random::<f64>() < 0.25).collect();
            for chunk in members.chunks(4) {
                if chunk.len() < 2 {
                    continue;
                }
                let cid = collections.len() as u64;
                for &v in chunk {
                    videos[v as usize].collection = Some(cid);
                }
                collections.push(chunk.to_vec());
            }
        }

        // Video-to-video table: noisy cosine neighbors inside the category.
        for vids in &videos_by_category {
            for &v in vids {
                let ev = &videos[v as usize].embedding;
                let mut scored: Vec<(u64, f64)> = vids
                    .iter()
                    .filter(|&&o| o != v)
                    .map(|&o| {
                        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.05;
                        (o, (dot(ev, &videos[o as usize].embedding) + noise).clamp(0.0, 1.0))
                    })
                    .collect();
                scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                scored.truncate(c.v2v_neighbors);
                videos[v as usize].neighbors = scored.into_iter().map(|(o, s)| (o, canonical_real(s))).collect();
            }
        }

        // Users.
        let sigma = c.activity_shape;
        let activity = LogNormal::new(-0.5 * sigma * sigma, sigma.max(1e-12)).unwrap();
        let watch_scale = LogNormal::new(-0.5 * 0.25 * 0.25, 0.25).unwrap();
        let affinity = Gamma::new(2.0, 0.5).unwrap();
        let author_weights = WeightedIndex::new(authors.iter().map(|a| a.popularity)).unwrap();
        let mut authors_by_category: Vec<Vec<usize>> = vec![Vec::new(); c.n_categories];
        for a in &authors {
            authors_by_category[a.home_category as usize].push(a.id as usize);
        }
        let category_author_weights: Vec<Option<WeightedIndex<f64>>> = authors_by_category
            .iter()
            .map(|ids| WeightedIndex::new(ids.iter().map(|&a| authors[a].popularity)).ok())
            .collect();

        let n_fav = c.n_categories.min(3);
        let n_pref = c.n_authors.min(4);
        let mut users = Vec::with_capacity(c.n_users);
        for id in 0..c.n_users {
            let act = if sigma == 0.0 { 1.0 } else { rng.sample(activity) };
            let mut cats: Vec<u64> = Vec::with_capacity(n_fav);
            while cats.len() < n_fav {
                let k = rng.random_range(0..c.n_categories) as u64;
                if !cats.contains(&k) {
                    cats.push(k);
                }
            }
            let raw_w: Vec<f64> = cats.iter().map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
            let total: f64 = raw_w.iter().sum();
            let categories: Vec<(u64, f64)> = cats.iter().zip(&raw_w).map(|(&k, &w)| (k, w / total)).collect();

            let mut prefs: Vec<(u64, f64)> = Vec::with_capacity(n_pref);
            let mut attempts = 0;
            while prefs.len() < n_pref && attempts < 100 {
                attempts += 1;
                let a = if rng.random::<f64>() < 0.7 {
                    let cat = categories[rng.random_range(0..categories.len())].0 as usize;
                    match &category_author_weights[cat] {
                        Some(w) => authors_by_category[cat][w.sample(&mut rng)],
                        None => author_weights.sample(&mut rng),
                    }
                } else {
                    author_weights.sample(&mut rng)
                } as u64;
                if prefs.iter().all(|(p, _)| *p != a) {
                    prefs.push((a, canonical_real(rng.sample(affinity))));
                }
            }
            users.push(UserProfile {
                id: id as u64,
                activity: act,
                watch_scale: rng.sample(watch_scale),
                categories,
                authors: prefs,
            });
        }

        let mut mass = vec![0.0; c.n_authors];
        for u in &users {
            for &(a, w) in &u.authors {
                mass[a as usize] += w;
            }
        }
        let mut order: Vec<usize> = (0..c.n_authors).collect();
        order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
        let n_qa = (c.n_authors / 10).max(1);
        let mut qa_author = vec![false; c.n_authors];
        for &a in &order[..n_qa] {
            qa_author[a] = true;
        }

        Ok(Self {
            config: c.clone(),
            videos,
            authors,
            users,
            videos_by_category,
            videos_by_author,
            collections,
            qa_author,
        })
    }

    /// High-quality authors: top decile by summed user affinity.
    pub fn is_qa_author(&self, author: u64) -> bool {
        self.qa_author.get(author as usize).copied().unwrap_or(false)
    }

    pub fn video(&self, id: u64) -> &Video {
        &self.videos[id as usize]
    }

    /// Logging-policy candidate draw. Returns `(video, retrieval source)`.
    pub fn sample_candidate(&self, user: &UserProfile, prev: Option<u64>, rng: &mut impl Rng) -> (u64, u64) {
        let r: f64 = rng.random();
        if let Some(p) = prev {
            if let Some(cid) = self.video(p).collection {
                if r < 0.08 {
                    let members = &self.collections[cid as usize];
                    let at = members.iter().position(|&v| v == p).unwrap_or(0);
                    return (members[(at + 1) % members.len()], SOURCE_COLLECTION);
                }
            }
        }
        if r < 0.25 && !user.authors.is_empty() {
            let total: f64 = user.authors.iter().map(|(_, w)| w).sum();
            let mut x = rng.random::<f64>() * total;
            let mut author = user.authors[0].0;
            for &(a, w) in &user.authors {
                author = a;
                if x < w {
                    break;
                }
                x -= w;
            }
            let vids = &self.videos_by_author[author as usize];
            return (vids[rng.random_range(0..vids.len())], SOURCE_FOLLOW);
        }
        if r < 0.55 {
            let mut x: f64 = rng.random();
            let mut cat = user.categories[0].0;
            for &(k, w) in &user.categories {
                cat = k;
                if x < w {
                    break;
                }
                x -= w;
            }
            let vids = &self.videos_by_category[cat as usize];
            if !vids.is_empty() {
                return (vids[rng.random_range(0..vids.len())], SOURCE_INTEREST);
            }
        }
        if r < 0.70 {
            if let Some(p) = prev {
                let nb = &self.video(p).neighbors;
                if !nb.is_empty() {
                    return (nb[rng.random_range(0..nb.len())].0, SOURCE_SIMILAR);
                }
            }
        }
        (rng.random_range(0..self.videos.len()) as u64, SOURCE_EXPLORE)
    }

    /// Draws the watch time of `video`; `history` holds preceding impressions, most recent last.
    pub fn draw_engagement(
        &self,
        user: &UserProfile,
        video: &Video,
        history: &[HistoryItem],
        rng: &mut impl Rng,
    ) -> Engagement {
        let c = &self.config;
        let skip = rng.random::<f64>() < c.zero_watch_prob;
        let g: f64 = rng.sample(Gamma::new(c.watch_gamma_shape, c.watch_gamma_scale).unwrap());
        let interaction_u: f64 = rng.random();
        if skip {
            return Engagement { base: 0.0, lifts: Vec::new(), watch_time: 0.0, interaction: false };
        }
        let affinity = user.affinity(video.author);
        let scale = video.quality
            * user.watch_scale
            * (1.0 + c.author_affinity_strength * affinity)
            * (1.0 + 0.5 * user.category_weight(video.category));
        let base = quantize_time(g * scale);
        let mut lifts = Vec::new();
        let mut watch = base;
        for (back, h) in history.iter().rev().take(CARRYOVER_WINDOW).enumerate() {
            if h.category == video.category && h.watch_time > 0.0 {
                let lift = quantize_time(base * c.category_carryover_strength * 0.5f64.powi(back as i32));
                if lift > 0.0 {
                    lifts.push((back + 1, lift));
                    watch += lift;
                }
            }
        }
        let completion = (watch / video.duration).min(1.0);
        let p_interact = sigmoid(-2.5 + 2.0 * completion + 0.5 * affinity);
        Engagement { base, lifts, watch_time: watch, interaction: interaction_u < p_interact }
    }

    /// Probability that the session ends after showing `video` with the given watch time.
    pub fn stop_probability(&self, user: &UserProfile, video: &Video, watch_time: f64) -> f64 {
        let c = &self.config;
        let odds = c.base_session_length * user.activity.powf(c.position_bias_strength);
        let factor = if watch_time > 0.0 {
            0.5 + video.quality / (1.0 + video.quality)
        } else {
            c.skip_continue_factor
        };
        1.0 / (1.0 + odds * factor)
    }

    /// Probability that the user opens the app on a day, given yesterday's seconds on preferred authors.
    pub fn visit_probability(&self, user: &UserProfile, prev_day_preferred_watch: f64) -> f64 {
        let c = &self.config;
        let pull = 0.3 * user.max_affinity() + prev_day_preferred_watch / 120.0;
        1.0 - (1.0 - c.revisit_base_prob) * (-c.author_affinity_strength * pull).exp()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Planted causal structure of one impression: `watch_time == base + sum(lifts)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpressionTruth {
    pub base: f64,
    /// `(predecessor record index, seconds)`.
    pub contributions: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserTruth {
    pub user_id: u64,
    pub activity: f64,
    pub affinities: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub users: Vec<UserTruth>,
    /// Aligned with `Dataset::sessions` and their records.
    pub impressions: Vec<Vec<ImpressionTruth>>,
}

impl GroundTruth {
    /// Seconds that record `j` of each session planted into its successors.
    pub fn causal_credit(&self, session: usize) -> Vec<f64> {
        let truth = &self.impressions[session];
        let mut credit = vec![0.0; truth.len()];
        for t in truth {
            for &(j, amount) in &t.contributions {
                credit[j] += amount;
            }
        }
        credit
    }
}

struct UserLog {
    sessions: Vec<(Session, Vec<ImpressionTruth>)>,
}

fn simulate_user(world: &World, user: &UserProfile) -> UserLog {
    let c = &world.config;
    let mut rng = sub_rng(c.seed, STREAM_USERS + user.id);
    let extra = Poisson::new(c.extra_session_rate.max(1e-12)).unwrap();
    let mut sessions = Vec::new();
    let mut visited_before = false;
    let mut prev_pref_watch = 0.0;
    let mut counter = 0u64;
    for day in 0..c.n_days as u32 {
        let p_visit = world.visit_probability(user, prev_pref_watch);
        let visit = rng.random::<f64>() < p_visit;
        prev_pref_watch = 0.0;
        if !visit {
            continue;
        }
        let n_sessions = 1 + if c.extra_session_rate > 0.0 { rng.sample(extra) as usize } else { 0 };
        for _ in 0..n_sessions {
            let session_id = user.id * 10_000 + counter;
            counter += 1;
            let (session, truth) = simulate_session(world, user, day, session_id, visited_before, &mut rng);
            prev_pref_watch += session
                .records
                .iter()
                .filter(|r| user.affinity(r.author_id) > 0.0)
                .map(|r| r.watch_time)
                .sum::<f64>();
            sessions.push((session, truth));
        }
        visited_before = true;
    }
    UserLog { sessions }
}

fn simulate_session(
    world: &World,
    user: &UserProfile,
    day: u32,
    session_id: u64,
    revisit: bool,
    rng: &mut ChaCha8Rng,
) -> (Session, Vec<ImpressionTruth>) {
    let c = &world.config;
    let mut records: Vec<ImpressionRecord> = Vec::new();
    let mut truth: Vec<ImpressionTruth> = Vec::new();
    let mut history: Vec<HistoryItem> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut page = 0u32;
    'session: loop {
        let prev = records.last().map(|r| r.video_id);
        let mut slate = Vec::with_capacity(PAGE_SIZE);
        for _ in 0..PAGE_SIZE {
            let mut pick = world.sample_candidate(user, prev, rng);
            for _ in 0..4 {
                if !seen.contains(&pick.0) && slate.iter().all(|(v, _)| *v != pick.0) {
                    break;
                }
                pick = world.sample_candidate(user, prev, rng);
            }
            slate.push(pick);
        }
        for (pos, (vid, source)) in slate.into_iter().enumerate() {
            let video = world.video(vid);
            let e = world.draw_engagement(user, video, &history, rng);
            let idx = records.len();
            truth.push(ImpressionTruth {
                base: e.base,
                contributions: e.lifts.iter().map(|&(back, amt)| (idx - back, amt)).collect(),
            });
            records.push(ImpressionRecord {
                user_id: user.id,
                video_id: vid,
                author_id: video.author,
                category_id: video.category,
                retrieval_source_id: source,
                collection_id: video.collection,
                session_id,
                day,
                page_index: page,
                position_in_page: pos as u8,
                global_position: idx as u32,
                watch_time: e.watch_time,
                video_duration: video.duration,
                interaction: e.interaction,
                content_embedding: video.embedding.clone(),
                v2v_neighbors: video.neighbors.clone(),
                revisit_flag: revisit,
            });
            history.push(HistoryItem { category: video.category, watch_time: e.watch_time });
            seen.insert(vid);
            let p_stop = world.stop_probability(user, video, e.watch_time);
            if records.len() >= c.max_session_length || rng.random::<f64>() < p_stop {
                break 'session;
            }
        }
        page += 1;
    }
    (Session { session_id, user_id: user.id, day, records }, truth)
}

/// Generates the full log. Users are simulated independently (in parallel) from
/// per-user sub-seeds, so the output does not depend on the thread count.
pub fn generate(config: &GenConfig) -> Result<(Dataset, GroundTruth, World), GenError> {
    let world = World::build(config)?;
    let logs: Vec<UserLog> = world.users.par_iter().map(|u| simulate_user(&world, u)).collect();
    let mut all: Vec<(Session, Vec<ImpressionTruth>)> = logs.into_iter().flat_map(|l| l.sessions).collect();
    all.sort_by_key(|(s, _)| (s.day, s.session_id));
    let (sessions, impressions): (Vec<_>, Vec<_>) = all.into_iter().unzip();
    let users = world
        .users
        .iter()
        .map(|u| UserTruth { user_id: u.id, activity: canonical_real(u.activity), affinities: u.authors.clone() })
        .collect();
    Ok((Dataset::new(sessions), GroundTruth { users, impressions }, world))
}

/// Fraction of impressions in `group` whose slide time is exactly zero.
pub fn empirical_zero_fraction(
    dataset: &Dataset,
    spec: &PageGroupSpec,
    group: usize,
    cap: f64,
) -> Result<f64, GenError> {
    let (mut zeros, mut total) = (0usize, 0usize);
    for s in &dataset.sessions {
        let slides = session_slide_times(s, cap)?;
        for (r, slide) in s.records.iter().zip(slides) {
            if spec.group_of(r.page_index) == group {
                total += 1;
                zeros += (slide == 0.0) as usize;
            }
        }
    }
    if total == 0 {
        return Err(GenError::EmptyGroup(group));
    }
    Ok(zeros as f64 / total as f64)
}

/// `(page index, impression count, mean slide time)` for every page that occurs.
pub fn page_slide_profile(dataset: &Dataset, cap: f64) -> Result<Vec<(u32, usize, f64)>, GenError> {
    let mut sums: Vec<(usize, f64)> = Vec::new();
    for s in &dataset.sessions {
        let slides = session_slide_times(s, cap)?;
        for (r, slide) in s.records.iter().zip(slides) {
            let p = r.page_index as usize;
            if sums.len() <= p {
                sums.resize(p + 1, (0, 0.0));
            }
            sums[p].0 += 1;
            sums[p].1 += slide;
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .filter(|(_, (n, _))| *n > 0)
        .map(|(p, (n, total))| (p as u32, n, total / n as f64))
        .collect())
}

/// Count-weighted Pearson correlation between page index and per-page mean slide time.
pub fn page_slide_correlation(profile: &[(u32, usize, f64)]) -> f64 {
    let w: f64 = profile.iter().map(|&(_, n, _)| n as f64).sum();
    if w == 0.0 {
        return 0.0;
    }
    let mx = profile.iter().map(|&(p, n, _)| n as f64 * p as f64).sum::<f64>() / w;
    let my = profile.iter().map(|&(_, n, m)| n as f64 * m).sum::<f64>() / w;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(p, n, m) in profile {
        let (dx, dy) = (p as f64 - mx, m - my);
        sxy += n as f64 * dx * dy;
        sxx += n as f64 * dx * dx;
        syy += n as f64 * dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Mean slide time over impressions whose page lies in `[lo, hi]`.
pub fn mean_slide_on_pages(profile: &[(u32, usize, f64)], lo: u32, hi: u32) -> Option<f64> {
    let (n, total) = profile
        .iter()
        .filter(|(p, _, _)| (lo..=hi).contains(p))
        .fold((0usize, 0.0), |(n, t), &(_, c, m)| (n + c, t + m * c as f64));
    (n > 0).then(|| total / n as f64)
}

const TRUTH_HEADER: &str = "#ltvrank-truth v1";

/// Sidecar format: header, then `U\tuser\tactivity\tauthor:aff,...` lines, then
/// one `I\tsession_id\tglobal_position\tbase\tpred:seconds,...` line per impression
/// in dataset order (`-` for no contributions).
pub fn write_ground_truth<W: Write>(truth: &GroundTruth, dataset: &Dataset, mut w: W) -> io::Result<()> {
    writeln!(w, "{TRUTH_HEADER}")?;
    let mut line = String::new();
    for u in &truth.users {
        line.clear();
        let _ = write!(line, "U\t{}\t{}\t", u.user_id, format_real(u.activity));
        if u.affinities.is_empty() {
            line.push('-');
        }
        for (k, (a, aff)) in u.affinities.iter().enumerate() {
            if k > 0 {
                line.push(',');
            }
            let _ = write!(line, "{a}:{}", format_real(*aff));
        }
        writeln!(w, "{line}")?;
    }
    for (s, imps) in dataset.sessions.iter().zip(&truth.impressions) {
        for (r, t) in s.records.iter().zip(imps) {
            line.clear();
            let _ = write!(line, "I\t{}\t{}\t{}\t", s.session_id, r.global_position, format_real(t.base));
            if t.contributions.is_empty() {
                line.push('-');
            }
            for (k, (j, amt)) in t.contributions.iter().enumerate() {
                if k > 0 {
                    line.push(',');
                }
                let _ = write!(line, "{j}:{}", format_real(*amt));
            }
            writeln!(w, "{line}")?;
        }
    }
    w.flush()
}

pub fn read_ground_truth<R: BufRead>(reader: R, dataset: &Dataset) -> Result<GroundTruth, DataError> {
    let mut lines = LineReader::new(reader);
    lines.expect_header(TRUTH_HEADER)?;
    let mut truth = GroundTruth::default();
    let mut flat: Vec<ImpressionTruth> = Vec::new();
    let perr = |line, offset, field, message: String| DataError::Parse { line, offset, field, message };
    while let Some((line, offset, text)) = lines.next_line()? {
        let parts: Vec<&str> = text.split('\t').collect();
        match parts.as_slice() {
            ["U", user, activity, affs] => {
                let affinities = if *affs == "-" {
                    Vec::new()
                } else {
                    affs.split(',')
                        .map(|p| {
                            let (a, w) = p.split_once(':')?;
                            Some((a.parse().ok()?, w.parse().ok()?))
                        })
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| perr(line, offset, "affinities", format!("bad list `{affs}`")))?
                };
                truth.users.push(UserTruth {
                    user_id: user.parse().map_err(|e| perr(line, offset, "user_id", format!("{e}")))?,
                    activity: activity.parse().map_err(|e| perr(line, offset, "activity", format!("{e}")))?,
                    affinities,
                });
            }
            ["I", _session, _pos, base, contribs] => {
                let contributions = if *contribs == "-" {
                    Vec::new()
                } else {
                    contribs
                        .split(',')
                        .map(|p| {
                            let (j, a) = p.split_once(':')?;
                            Some((j.parse().ok()?, a.parse().ok()?))
                        })
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| perr(line, offset, "contributions", format!("bad list `{contribs}`")))?
                };
                flat.push(ImpressionTruth {
                    base: base.parse().map_err(|e| perr(line, offset, "base", format!("{e}")))?,
                    contributions,
                });
            }
            _ => return Err(perr(line, offset, "kind", format!("unrecognised line `{text}`"))),
        }
    }
    if flat.len() != dataset.num_records() {
        return Err(DataError::Parse {
            line: 0,
            offset: 0,
            field: "impressions",
            message: format!("{} truth lines for {} records", flat.len(), dataset.num_records()),
        });
    }
    let mut it = flat.into_iter();
    truth.impressions = dataset.sessions.iter().map(|s| it.by_ref().take(s.len()).collect()).collect();
    Ok(truth)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::datamodel::validate_session;

    pub(crate) fn small_config(seed: u64) -> GenConfig {
        GenConfig { n_users: 300, n_videos: 2000, n_authors: 80, n_days: 4, seed, ..GenConfig::default() }
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = GenConfig { zero_watch_prob: 1.5, ..GenConfig::default() };
        match cfg.validate() {
            Err(GenError::InvalidConfig { field, .. }) => assert_eq!(field, "zero_watch_prob"),
            other => panic!("{other:?}"),
        }
        let cfg = GenConfig { n_users: 0, ..GenConfig::default() };
        assert!(matches!(generate(&cfg), Err(GenError::InvalidConfig { field: "n_users", .. })));
    }

    #[test]
    fn same_seed_same_output_distinct_seed_differs() {
        let (a, ta, _) = generate(&small_config(3)).unwrap();
        let (b, tb, _) = generate(&small_config(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _, _) = generate(&small_config(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn output_is_valid_and_truth_reconstructs_watch_time() {
        let (ds, truth, _) = generate(&small_config(5)).unwrap();
        assert!(ds.num_records() > 1000);
        for (s, t) in ds.sessions.iter().zip(&truth.impressions) {
            assert!(validate_session(s).is_empty(), "{:?}", validate_session(s));
            for (j, (r, it)) in s.records.iter().zip(t).enumerate() {
                let total = it.base + it.contributions.iter().map(|c| c.1).sum::<f64>();
                assert_eq!(total, r.watch_time);
                assert!(it.contributions.iter().all(|&(p, a)| p < j && a >= 0.0));
            }
        }
    }

    #[test]
    fn preferred_author_impressions_watch_longer() {
        let (ds, _, world) = generate(&small_config(6)).unwrap();
        let (mut pref, mut np, mut all, mut n) = (0.0, 0usize, 0.0, 0usize);
        for r in ds.records() {
            all += r.watch_time;
            n += 1;
            if world.users[r.user_id as usize].affinity(r.author_id) > 0.0 {
                pref += r.watch_time;
                np += 1;
            }
        }
        assert!(np > 0);
        assert!(pref / np as f64 > all / n as f64);
    }

    #[test]
    fn revisit_flag_marks_returning_days() {
        let (ds, _, _) = generate(&small_config(8)).unwrap();
        let mut first_day = std::collections::HashMap::new();
        for s in &ds.sessions {
            first_day.entry(s.user_id).and_modify(|d: &mut u32| *d = (*d).min(s.day)).or_insert(s.day);
        }
        for s in &ds.sessions {
            let expect = s.day > first_day[&s.user_id];
            assert!(s.records.iter().all(|r| r.revisit_flag == expect));
        }
    }

    #[test]
    fn zero_fraction_toy_groups() {
        let spec = PageGroupSpec::single();
        let all_zero = Dataset::new(vec![crate::datamodel::testutil::session_with_watch(&[0.0, 0.0, 0.0])]);
        assert_eq!(empirical_zero_fraction(&all_zero, &spec, 0, 300.0).unwrap(), 1.0);
        // the final record always has slide time 0, so measure the non-final ones
        let two = PageGroupSpec::from_starts(vec![0, 1]).unwrap();
        let mut s = crate::datamodel::testutil::session_with_watch(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        s.records[4].page_index = 1;
        let ds = Dataset::new(vec![s]);
        assert_eq!(empirical_zero_fraction(&ds, &two, 0, 300.0).unwrap(), 0.0);
        assert!(matches!(empirical_zero_fraction(&ds, &PageGroupSpec::default_groups(), 3, 300.0), Err(GenError::EmptyGroup(3))));
    }

    #[test]
    fn ground_truth_round_trips() {
        let (ds, truth, _) = generate(&small_config(9)).unwrap();
        let mut buf = Vec::new();
        write_ground_truth(&truth, &ds, &mut buf).unwrap();
        let back = read_ground_truth(&buf[..], &ds).unwrap();
        assert_eq!(back, truth);
    }
}
