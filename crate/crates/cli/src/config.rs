//! `key = value` pipeline configuration.
//!
//! Every key has a default in [`KEYS`]. Files may omit keys; unknown keys,
//! malformed lines and unparsable values are all collected before failing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ltvrank::attribution::{AttributionConfig, AttributionMode};
use ltvrank::author_ltv::LtvConfig;
use ltvrank::fusion_eval::{FusionWeights, ReplayConfig};
use ltvrank::pdq::PageGroupSpec;
use ltvrank::predictor::{Head, LossKind, ModelConfig, TrainConfig};
use ltvrank::synthgen::GenConfig;
use sha2::{Digest, Sha256};

/// `(key, default, description)` in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "42", "master seed; generator, model init, training shuffles and replay all derive from it"),
    ("out_dir", "ltvrank-out", "artifact directory, relative to the config file"),
    ("gen.n_users", "5000", "simulated users"),
    ("gen.n_videos", "20000", "catalogue size"),
    ("gen.n_authors", "500", "authors; every author owns at least one video"),
    ("gen.n_categories", "20", "content categories"),
    ("gen.n_days", "10", "simulated days"),
    ("gen.embedding_dim", "16", "content embedding dimension"),
    ("gen.activity_shape", "1.0", "log-normal sigma of user activity"),
    ("gen.zero_watch_prob", "0.3", "probability of a zero watch time"),
    ("gen.watch_gamma_shape", "1.5", "gamma shape of positive watch time"),
    ("gen.watch_gamma_scale", "8.0", "gamma scale of positive watch time, seconds"),
    ("gen.author_affinity_strength", "1.0", "watch-time lift from author affinity"),
    ("gen.category_carryover_strength", "0.6", "watch-time lift from same-category predecessors"),
    ("gen.position_bias_strength", "1.0", "coupling of session depth to user activity"),
    ("gen.revisit_base_prob", "0.4", "base daily visit probability"),
    ("gen.base_session_length", "8.0", "continuation odds scale for an average user"),
    ("gen.skip_continue_factor", "0.5", "continuation odds multiplier after a skip"),
    ("gen.extra_session_rate", "0.5", "Poisson mean of extra sessions on a visit day"),
    ("gen.max_session_length", "400", "hard cap on impressions per session"),
    ("gen.v2v_neighbors", "3", "stored video-to-video neighbours per video"),
    ("labels.slide_cap", "300", "slide-time cap Q, seconds"),
    ("labels.pdq_buckets", "50", "quantile buckets T per page group"),
    ("labels.page_groups", "0,1,3,6,10,16,30", "first page of each page group"),
    ("labels.test_days", "2", "trailing days held out for eval and replay"),
    ("labels.attr_mode", "binary", "attribution combination: binary or learned"),
    ("labels.attr_weights", "0,0,0,0,0,0,0", "learned-mode initial weights, pos,col,rec,v2v,mm,auth,cat"),
    ("labels.attr_weight_lr", "0.1", "learned-mode step size on the weights, once per epoch"),
    ("labels.v2v_threshold", "0.5", "v2v similarity threshold (strict)"),
    ("labels.mm_threshold", "0.9", "embedding cosine threshold (strict)"),
    ("labels.adjacency_window", "6", "following positions covered by the position relation"),
    ("labels.ltv_window", "7", "author-LTV window N, days"),
    ("labels.ltv_decay", "0.8", "author-LTV daily decay"),
    ("model.embedding_dim", "16", "embedding width per feature table"),
    ("model.hidden", "64,32", "shared layer widths"),
    ("model.tower_hidden", "16", "hidden width of each head tower"),
    ("model.vocab", "8192,32768,1024,64,16", "hash buckets for user,video,author,category,page_group"),
    (
        "model.heads",
        "pdq:mse,slide_time:mse,attributed:hybrid,author:hybrid,watch_time:hybrid,completion:mse,interaction:mse",
        "head:loss list",
    ),
    ("train.batch_size", "512", "examples per step"),
    ("train.learning_rate", "0.05", "Adagrad step size"),
    ("train.epochs", "3", "passes over the training days"),
    ("train.lambda", "0.1", "Tweedie weight in the hybrid loss"),
    ("train.rho", "1.5", "Tweedie power"),
    ("train.decay", "0.9999", "accumulator decay per update"),
    ("train.initial_accumulator", "1e-8", "initial Adagrad accumulator"),
    ("train.balance_heads", "true", "scale each head's loss by the inverse variance of its training labels"),
    ("eval.pcoc_buckets", "10", "prediction-sorted buckets in the calibration file"),
    ("eval.lt_windows", "1,2", "LT_N horizons, days; at most labels.test_days"),
    ("fusion.w_watch", "1", "treatment weight of the watch-time head"),
    ("fusion.w_attr", "1", "treatment weight of the attributed slide-time head"),
    ("fusion.w_author", "3", "treatment weight of the author head"),
    ("fusion.e_pdq", "1", "treatment exponent of the PDQ head"),
    ("fusion.e_completion", "1", "treatment exponent of the completion head"),
    ("fusion.e_interaction", "1", "treatment exponent of the interaction head"),
    ("baseline.w_watch", "1", "baseline weight of the watch-time head"),
    ("baseline.w_attr", "1", "baseline weight of the attributed slide-time head"),
    ("baseline.w_author", "1", "baseline weight of the author head"),
    ("baseline.e_pdq", "1", "baseline exponent of the PDQ head"),
    ("baseline.e_completion", "1", "baseline exponent of the completion head"),
    ("baseline.e_interaction", "1", "baseline exponent of the interaction head"),
    ("replay.candidates", "12", "candidates drawn per page"),
    ("replay.max_sessions", "20000", "held-out sessions replayed per seed, in log order"),
    ("replay.seeds", "20", "replay seeds"),
    ("replay.bootstrap", "1000", "bootstrap resamples for the confidence intervals"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Gen,
    Labels,
    Train,
    Eval,
    Replay,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Gen, Stage::Labels, Stage::Train, Stage::Eval, Stage::Replay, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Labels => "labels",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Replay => "replay",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    /// Key sections that can change this stage's outputs.
    fn sections(self) -> &'static [&'static str] {
        match self {
            Stage::Gen => &["seed", "gen"],
            Stage::Labels => &["seed", "gen", "labels"],
            Stage::Train => &["seed", "gen", "labels", "model", "train"],
            Stage::Eval => &["seed", "gen", "labels", "model", "train", "eval"],
            Stage::Replay => &["seed", "gen", "labels", "model", "train", "fusion", "baseline", "replay"],
            Stage::Report => &["seed", "gen", "labels", "model", "train", "eval", "fusion", "baseline", "replay"],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub gen: GenConfig,
    pub slide_cap: f64,
    pub pdq_buckets: usize,
    pub page_groups: PageGroupSpec,
    pub test_days: u32,
    pub attribution: AttributionConfig,
    pub attr_weight_lr: f64,
    pub ltv: LtvConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pcoc_buckets: usize,
    pub lt_windows: Vec<u32>,
    pub fusion: FusionWeights,
    pub baseline: FusionWeights,
    pub replay: ReplayConfig,
    /// Resolved `key -> value` for every key.
    values: BTreeMap<&'static str, String>,
}

/// Reads a config file; relative `out_dir` resolves against the file's directory.
pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<PipelineConfig, Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![format!("cannot read config {}: {e}", path.display())])?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse(&text, overrides, seed, base)
}

fn key_entry(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(k, _, _)| *k)
}

/// Parses config text, then `overrides` (`key=value`), then the `seed` flag.
pub fn parse(text: &str, overrides: &[String], seed: Option<u64>, base: &Path) -> Result<PipelineConfig, Vec<String>> {
    let mut errors = Vec::new();
    let mut values: BTreeMap<&'static str, String> = KEYS.iter().map(|(k, d, _)| (*k, d.to_string())).collect();
    let mut seen: BTreeMap<&'static str, usize> = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            errors.push(format!("line {}: expected `key = value`, found `{line}`", n + 1));
            continue;
        };
        let k = k.trim();
        match key_entry(k) {
            Some(key) => {
                if let Some(prev) = seen.insert(key, n + 1) {
                    errors.push(format!("line {}: key `{key}` already set on line {prev}", n + 1));
                }
                values.insert(key, v.trim().to_string());
            }
            None => errors.push(format!("line {}: unknown key `{k}`", n + 1)),
        }
    }
    for o in overrides {
        match o.split_once('=') {
            Some((k, v)) => match key_entry(k.trim()) {
                Some(key) => {
                    values.insert(key, v.trim().to_string());
                }
                None => errors.push(format!("--set: unknown key `{}`", k.trim())),
            },
            None => errors.push(format!("--set: expected `key=value`, found `{o}`")),
        }
    }
    if let Some(s) = seed {
        values.insert("seed", s.to_string());
    }
    let cfg = build(values, base, &mut errors);
    if errors.is_empty() {
        Ok(cfg.expect("no errors implies a config"))
    } else {
        Err(errors)
    }
}

struct Reader<'a> {
    values: &'a BTreeMap<&'static str, String>,
    errors: &'a mut Vec<String>,
}

impl Reader<'_> {
    fn get<T: std::str::FromStr>(&mut self, key: &str) -> Option<T> {
        let v = &self.values[key];
        match v.parse() {
            Ok(x) => Some(x),
            Err(_) => {
                self.errors.push(format!("`{key}`: cannot parse `{v}`"));
                None
            }
        }
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Option<Vec<T>> {
        let v = &self.values[key];
        let parsed: Result<Vec<T>, _> = v.split(',').map(|s| s.trim().parse()).collect();
        match parsed {
            Ok(x) => Some(x),
            Err(_) => {
                self.errors.push(format!("`{key}`: cannot parse list `{v}`"));
                None
            }
        }
    }

    fn array<T: std::str::FromStr + Copy, const N: usize>(&mut self, key: &str) -> Option<[T; N]> {
        let list = self.list::<T>(key)?;
        match <[T; N]>::try_from(list.as_slice()) {
            Ok(a) => Some(a),
            Err(_) => {
                self.errors.push(format!("`{key}`: expected {N} values, found {}", list.len()));
                None
            }
        }
    }

    fn fusion(&mut self, section: &str) -> Option<FusionWeights> {
        let mut g = |k: &str| self.get::<f64>(&format!("{section}.{k}"));
        let w = FusionWeights {
            w_watch: g("w_watch")?,
            w_attr: g("w_attr")?,
            w_author: g("w_author")?,
            e_pdq: g("e_pdq")?,
            e_completion: g("e_completion")?,
            e_interaction: g("e_interaction")?,
        };
        if let Err(e) = w.validate() {
            self.errors.push(format!("{section}: {e}"));
        }
        Some(w)
    }

    fn heads(&mut self) -> Option<Vec<(Head, LossKind)>> {
        let v = self.values["model.heads"].clone();
        let mut out = Vec::new();
        for item in v.split(',') {
            let parsed = item.trim().split_once(':').and_then(|(h, l)| Some((Head::parse(h)?, LossKind::parse(l)?)));
            match parsed {
                Some(p) => out.push(p),
                None => {
                    self.errors.push(format!("`model.heads`: cannot parse `{}` as head:loss", item.trim()));
                    return None;
                }
            }
        }
        Some(out)
    }
}

fn build(values: BTreeMap<&'static str, String>, base: &Path, errors: &mut Vec<String>) -> Option<PipelineConfig> {
    let start = errors.len();
    let mut r = Reader { values: &values, errors };
    let seed: Option<u64> = r.get("seed");
    let gen = (|| {
        Some(GenConfig {
            n_users: r.get("gen.n_users")?,
            n_videos: r.get("gen.n_videos")?,
            n_authors: r.get("gen.n_authors")?,
            n_categories: r.get("gen.n_categories")?,
            n_days: r.get("gen.n_days")?,
            embedding_dim: r.get("gen.embedding_dim")?,
            activity_shape: r.get("gen.activity_shape")?,
            zero_watch_prob: r.get("gen.zero_watch_prob")?,
            watch_gamma_shape: r.get("gen.watch_gamma_shape")?,
            watch_gamma_scale: r.get("gen.watch_gamma_scale")?,
            author_affinity_strength: r.get("gen.author_affinity_strength")?,
            category_carryover_strength: r.get("gen.category_carryover_strength")?,
            position_bias_strength: r.get("gen.position_bias_strength")?,
            revisit_base_prob: r.get("gen.revisit_base_prob")?,
            base_session_length: r.get("gen.base_session_length")?,
            skip_continue_factor: r.get("gen.skip_continue_factor")?,
            extra_session_rate: r.get("gen.extra_session_rate")?,
            max_session_length: r.get("gen.max_session_length")?,
            v2v_neighbors: r.get("gen.v2v_neighbors")?,
            seed: seed?,
        })
    })();
    let slide_cap: Option<f64> = r.get("labels.slide_cap");
    let pdq_buckets: Option<usize> = r.get("labels.pdq_buckets");
    let page_groups = r.list::<u32>("labels.page_groups").and_then(|starts| match PageGroupSpec::from_starts(starts) {
        Ok(s) => Some(s),
        Err(e) => {
            r.errors.push(format!("`labels.page_groups`: {e}"));
            None
        }
    });
    let test_days: Option<u32> = r.get("labels.test_days");
    let mode = match values["labels.attr_mode"].as_str() {
        "binary" => Some(AttributionMode::Binary),
        "learned" => Some(AttributionMode::Learned),
        other => {
            r.errors.push(format!("`labels.attr_mode`: expected binary or learned, found `{other}`"));
            None
        }
    };
    let attribution = (|| {
        Some(AttributionConfig {
            v2v_threshold: r.get("labels.v2v_threshold")?,
            mm_threshold: r.get("labels.mm_threshold")?,
            adjacency_window: r.get("labels.adjacency_window")?,
            mode: mode?,
            weights: r.array("labels.attr_weights")?,
        })
    })();
    let attr_weight_lr: Option<f64> = r.get("labels.attr_weight_lr");
    let ltv = (|| Some(LtvConfig { window: r.get("labels.ltv_window")?, decay: r.get("labels.ltv_decay")? }))();
    let heads = r.heads();
    let model = (|| {
        Some(ModelConfig {
            embedding_dim: r.get("model.embedding_dim")?,
            hidden: r.array("model.hidden")?,
            tower_hidden: r.get("model.tower_hidden")?,
            vocab: r.array("model.vocab")?,
            heads: heads?,
            init_seed: seed?,
            ..ModelConfig::default()
        })
    })();
    let train = (|| {
        Some(TrainConfig {
            batch_size: r.get("train.batch_size")?,
            learning_rate: r.get("train.learning_rate")?,
            epochs: r.get("train.epochs")?,
            lambda: r.get("train.lambda")?,
            rho: r.get("train.rho")?,
            decay: r.get("train.decay")?,
            initial_accumulator: r.get("train.initial_accumulator")?,
            balance_heads: r.get("train.balance_heads")?,
            seed: seed?,
        })
    })();
    let pcoc_buckets: Option<usize> = r.get("eval.pcoc_buckets");
    let lt_windows = r.list::<u32>("eval.lt_windows");
    let fusion = r.fusion("fusion");
    let baseline = r.fusion("baseline");
    let replay = (|| {
        Some(ReplayConfig {
            candidates_per_page: r.get("replay.candidates")?,
            max_sessions: r.get("replay.max_sessions")?,
            seeds: r.get("replay.seeds")?,
            base_seed: seed?.wrapping_add(1_000_000),
            bootstrap_samples: r.get("replay.bootstrap")?,
        })
    })();
    let out_dir = base.join(&values["out_dir"]);
    if errors.len() > start {
        return None;
    }
    let cfg = PipelineConfig {
        seed: seed?,
        out_dir,
        gen: gen?,
        slide_cap: slide_cap?,
        pdq_buckets: pdq_buckets?,
        page_groups: page_groups?,
        test_days: test_days?,
        attribution: attribution?,
        attr_weight_lr: attr_weight_lr?,
        ltv: ltv?,
        model: model?,
        train: train?,
        pcoc_buckets: pcoc_buckets?,
        lt_windows: lt_windows?,
        fusion: fusion?,
        baseline: baseline?,
        replay: replay?,
        values,
    };
    errors.extend(cfg.semantic_errors());
    (errors.len() == start).then_some(cfg)
}

impl PipelineConfig {
    pub fn defaults(base: &Path) -> Self {
        parse("", &[], None, base).expect("defaults are valid")
    }

    fn semantic_errors(&self) -> Vec<String> {
        let mut e = Vec::new();
        if let Err(x) = self.gen.validate() {
            e.push(x.to_string());
        }
        if !(self.slide_cap > 0.0 && self.slide_cap.is_finite()) {
            e.push("`labels.slide_cap` must be positive".into());
        }
        if self.pdq_buckets == 0 {
            e.push("`labels.pdq_buckets` must be at least 1".into());
        }
        if self.test_days == 0 || self.test_days as usize >= self.gen.n_days {
            e.push(format!("`labels.test_days` must lie in [1, gen.n_days - 1], found {}", self.test_days));
        }
        if let Err(x) = self.attribution.validate() {
            e.push(x.to_string());
        }
        if let Err(x) = self.ltv.validate() {
            e.push(x.to_string());
        }
        if let Err(x) = self.model.validate() {
            e.push(x.to_string());
        }
        if let Err(x) = self.train.validate() {
            e.push(x.to_string());
        }
        if self.pcoc_buckets == 0 {
            e.push("`eval.pcoc_buckets` must be at least 1".into());
        }
        if self.lt_windows.iter().any(|&n| n == 0 || n > self.test_days) {
            e.push(format!("`eval.lt_windows` entries must lie in [1, labels.test_days = {}]", self.test_days));
        }
        if let Err(x) = self.replay.validate() {
            e.push(x.to_string());
        }
        if self.attribution.mode == AttributionMode::Learned && self.model.heads.iter().all(|(h, _)| *h != Head::Attributed)
        {
            e.push("learned attribution needs an `attributed` head in `model.heads`".into());
        }
        e
    }

    /// Last training day; later days are held out.
    pub fn last_train_day(&self) -> u32 {
        self.gen.n_days as u32 - self.test_days - 1
    }

    pub fn value(&self, key: &str) -> &str {
        &self.values[key]
    }

    /// Every key in declaration order, `key = value` per line.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, _, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.values[k]);
        }
        s
    }

    /// SHA-256 over the keys that can affect `stage`.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut h = Sha256::new();
        for (k, _, _) in KEYS {
            let section = k.split('.').next().unwrap_or(k);
            if stage.sections().contains(&section) {
                h.update(format!("{k} = {}\n", self.values[k]).as_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Commented reference of every key and its default.
pub fn reference() -> String {
    let mut s = String::new();
    for (k, d, doc) in KEYS {
        let _ = writeln!(s, "# {doc}\n{k} = {d}\n");
    }
    s
}
