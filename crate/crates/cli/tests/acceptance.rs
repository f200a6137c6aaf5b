//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use ltvrank::attribution::{
    attributed_slide_time, fill_attributed_labels, pair_flags, session_attributed_slide_times, session_strengths,
    AttributionConfig, AttributionMode,
};
use ltvrank::author_ltv::{
    aggregate_author_days, audit_no_leakage, author_ltv_label, plan_dual_stream, DualStreamPlan, LtvConfig,
};
use ltvrank::datamodel::{
    base_examples, quantize_time, Dataset, ImpressionRecord, LabeledExample, Session, DEFAULT_SLIDE_CAP,
};
use ltvrank::metrics::{group_names, mse, page_groups_of, pcoc, xauc, xauc_counts, xauc_grouped};
use ltvrank::pdq::{
    build_pdq_labels, fit_quantile_table, fit_tables, quantile_label, PageGroupSpec, DEFAULT_BUCKETS,
};
use ltvrank::predictor::{
    author_step, example_features, gradient_check, predict, train, Features, Head, LossKind, ModelConfig,
    PredictorParams, TrainConfig, TrainingSet,
};
use ltvrank::synthgen::{generate, sub_rng, GenConfig, GroundTruth};
use rand::Rng;

const SEEDS: [u64; 5] = [42, 43, 44, 45, 46];
const TEST_DAYS: u32 = 2;

type Check = Result<String, String>;

struct Line {
    id: usize,
    name: &'static str,
    result: Check,
    secs: f64,
}

fn panic_text(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn run(id: usize, name: &'static str, f: impl FnOnce() -> Check) -> Line {
    eprintln!("criterion {id}: {name}");
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| Err(format!("panic: {}", panic_text(e))));
    Line { id, name, result, secs: start.elapsed().as_secs_f64() }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// 1: quantile labels against a sort-based empirical CDF

fn pdq_labels() -> Check {
    let start = Instant::now();
    let t = DEFAULT_BUCKETS;
    let mut rng = sub_rng(2024, 1);
    let zero_mass = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.97];
    let mut probes_checked = 0;
    for (g, &zero) in zero_mass.iter().enumerate() {
        let scale = 5.0 * (g + 1) as f64;
        let samples: Vec<f64> = (0..10_000)
            .map(|_| {
                if rng.random::<f64>() < zero {
                    0.0
                } else {
                    quantize_time(-scale * (1.0 - rng.random::<f64>()).ln()).min(DEFAULT_SLIDE_CAP)
                }
            })
            .collect();
        let table = fit_quantile_table(g, &samples, t).map_err(|e| e.to_string())?;
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut distinct = sorted.clone();
        distinct.dedup();
        let mut probes = distinct.clone();
        probes.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        probes.push(sorted[n - 1] + 1.0);
        probes.sort_by(f64::total_cmp);

        let mut prev = f64::NEG_INFINITY;
        for &s in &probes {
            // mass strictly below s; at zero, the censored zero mass itself
            let below = if s > 0.0 { sorted.partition_point(|&x| x < s) } else { sorted.partition_point(|&x| x <= 0.0) };
            let label = quantile_label(s, &table);
            let k = (label * t as f64).round() as usize;
            ensure(k * n <= t * below && t * below < (k + 1) * n, || {
                format!("group {g}: label {label} at s={s} is not floor(T*F)/T with F={below}/{n}")
            })?;
            let f = below as f64 / n as f64;
            ensure((f - label).abs() <= 1.0 / t as f64, || format!("group {g}: |F - label| > 1/T at s={s}"))?;
            ensure(label >= prev, || format!("group {g}: label decreases at s={s}"))?;
            prev = label;
            probes_checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!("7 groups x 10000 samples, {probes_checked} probe points, {secs:.2}s"))
}

// ---------------------------------------------------------------------------
// 4: attribution engine against a double loop

fn random_session(rng: &mut impl Rng, id: u64) -> Session {
    let len = rng.random_range(1..=12);
    let dirs = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.6, 0.8, 0.0, 0.0]];
    let records = (0..len)
        .map(|p| {
            let dir = dirs[rng.random_range(0..dirs.len())];
            let mut neighbors: Vec<(u64, f64)> = Vec::new();
            for _ in 0..rng.random_range(0..4) {
                let v = rng.random_range(0..20);
                if neighbors.iter().all(|(u, _)| *u != v) {
                    let score = [0.3, 0.5, 0.7, rng.random::<f64>()][rng.random_range(0..4)];
                    neighbors.push((v, score));
                }
            }
            ImpressionRecord {
                user_id: 1,
                video_id: rng.random_range(0..20),
                author_id: rng.random_range(0..4),
                category_id: rng.random_range(0..3),
                retrieval_source_id: rng.random_range(0..5),
                collection_id: rng.random_bool(0.4).then(|| rng.random_range(0..3)),
                session_id: id,
                day: 0,
                page_index: p / 4,
                position_in_page: (p % 4) as u8,
                global_position: p,
                watch_time: if rng.random_bool(0.3) { 0.0 } else { quantize_time(rng.random_range(0.0..60.0)) },
                video_duration: 60.0,
                interaction: false,
                content_embedding: dir.iter().map(|x| x + 0.2 * (rng.random::<f64>() - 0.5)).collect(),
                v2v_neighbors: neighbors,
                revisit_flag: false,
            }
        })
        .collect();
    Session { session_id: id, user_id: 1, day: 0, records }
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).fold(0.0, |s, (x, y)| s + x * y);
    let na = a.iter().fold(0.0, |s, x| s + x * x).sqrt();
    let nb = b.iter().fold(0.0, |s, x| s + x * x).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn oracle_flags(s: &Session, j: usize, i: usize, cfg: &AttributionConfig) -> [bool; 7] {
    let r = &s.records;
    let (a, b) = (&r[j], &r[i]);
    let w = cfg.adjacency_window;
    let mut col = false;
    if let Some(c) = b.collection_id {
        for (k, rk) in r.iter().enumerate() {
            if k >= j && k <= j + w && k != i && rk.collection_id == Some(c) {
                col = true;
            }
        }
    }
    let mut v2v = false;
    for (from, to) in [(a, b), (b, a)] {
        for &(v, score) in &from.v2v_neighbors {
            if v == to.video_id && score > cfg.v2v_threshold {
                v2v = true;
            }
        }
    }
    [
        i - j <= w,
        col,
        a.retrieval_source_id == b.retrieval_source_id,
        v2v,
        oracle_cosine(&a.content_embedding, &b.content_embedding) > cfg.mm_threshold,
        a.author_id == b.author_id,
        a.category_id == b.category_id,
    ]
}

fn oracle_strength(flags: &[bool; 7], cfg: &AttributionConfig) -> f64 {
    match cfg.mode {
        AttributionMode::Binary => f64::from(u8::from(flags.iter().any(|&f| f))),
        AttributionMode::Learned => {
            let mut z = 0.0;
            for (f, w) in flags.iter().zip(&cfg.weights) {
                if *f {
                    z += w;
                }
            }
            1.0 / (1.0 + (-z).exp())
        }
    }
}

fn attribution_oracle() -> Check {
    let mut rng = sub_rng(77, 4);
    let mut pairs = 0;
    for id in 0..1000u64 {
        let s = random_session(&mut rng, id);
        let mut learned = AttributionConfig {
            mode: AttributionMode::Learned,
            adjacency_window: rng.random_range(1..=8),
            ..AttributionConfig::default()
        };
        learned.weights.iter_mut().for_each(|w| *w = rng.random_range(-3.0..3.0));
        let narrow = AttributionConfig { adjacency_window: rng.random_range(1..=8), ..AttributionConfig::default() };
        for cfg in [AttributionConfig::default(), narrow, learned] {
            for cap in [DEFAULT_SLIDE_CAP, 40.0] {
                let engine = session_strengths(&s, &cfg);
                let fast = session_attributed_slide_times(&s, &cfg, cap);
                let mut k = 0;
                for j in 0..s.len() {
                    let mut expect = 0.0;
                    for i in j + 1..s.len() {
                        let flags = oracle_flags(&s, j, i, &cfg);
                        let c = oracle_strength(&flags, &cfg);
                        expect += c * s.records[i].watch_time;
                        let e = &engine[k];
                        ensure((e.j, e.i) == (j, i), || format!("session {id}: pair order differs at {k}"))?;
                        ensure(e.flags.0 == flags, || format!("session {id} ({j},{i}): flags {:?} vs {flags:?}", e.flags.0))?;
                        ensure(pair_flags(&s, j, i, &cfg).map_err(|e| e.to_string())?.0 == flags, || {
                            format!("session {id} ({j},{i}): pair_flags differs")
                        })?;
                        ensure(e.strength.to_bits() == c.to_bits(), || {
                            format!("session {id} ({j},{i}): strength {} vs {c}", e.strength)
                        })?;
                        k += 1;
                        pairs += 1;
                    }
                    let expect = expect.min(cap);
                    let single = attributed_slide_time(&s, j, &cfg, cap).map_err(|e| e.to_string())?;
                    ensure(fast[j].to_bits() == expect.to_bits() && single.to_bits() == expect.to_bits(), || {
                        format!("session {id} record {j}: attributed {} / {single} vs {expect}", fast[j])
                    })?;
                }
                ensure(k == engine.len(), || format!("session {id}: {} engine pairs, {k} expected", engine.len()))?;
            }
        }
    }
    Ok(format!("1000 sessions, 3 configs x 2 caps, {pairs} pairs identical"))
}

// ---------------------------------------------------------------------------
// 7: decayed author time against brute force

fn brute_ltv(recs: &[&ImpressionRecord], t: u32, cfg: &LtvConfig) -> f64 {
    let mut sum = 0.0;
    for d in 0..=t {
        if d + cfg.window <= t {
            continue;
        }
        let watched: Vec<f64> = recs.iter().filter(|r| r.day == d && r.watch_time > 0.0).map(|r| r.watch_time).collect();
        if watched.is_empty() {
            continue;
        }
        let total = watched.iter().fold(0.0, |a, w| a + w);
        sum += cfg.decay.powi((t - d) as i32) * total;
    }
    sum
}

fn toy_record(day: u32, author: u64, watch: f64) -> ImpressionRecord {
    ImpressionRecord {
        user_id: 1,
        video_id: day as u64,
        author_id: author,
        category_id: 0,
        retrieval_source_id: 0,
        collection_id: None,
        session_id: day as u64,
        day,
        page_index: 0,
        position_in_page: 0,
        global_position: 0,
        watch_time: watch,
        video_duration: 60.0,
        interaction: false,
        content_embedding: vec![1.0],
        v2v_neighbors: Vec::new(),
        revisit_flag: day > 0,
    }
}

fn author_ltv_oracle() -> Check {
    // hand-worked cases: 10s, 20s, 30s on days 0, 1, 2
    let toy = Dataset::new(
        [(0, 10.0), (1, 20.0), (2, 30.0)]
            .iter()
            .map(|&(d, w)| Session { session_id: d as u64, user_id: 1, day: d, records: vec![toy_record(d, 5, w)] })
            .collect(),
    );
    let agg = aggregate_author_days(&toy);
    let cases = [
        (2, 3, 0.5, 42.5),
        (2, 3, 1.0, 60.0),
        (2, 1, 0.5, 30.0),
        (2, 1, 1.0, 30.0),
        (2, 2, 0.5, 40.0),
        (3, 3, 0.5, 20.0),
        (1, 3, 0.5, 25.0),
        (9, 3, 0.5, 0.0),
    ];
    for (t, window, decay, want) in cases {
        let got = author_ltv_label(&agg, 1, 5, t, &LtvConfig { window, decay });
        ensure(got == want, || format!("toy t={t} N={window} alpha={decay}: {got} != {want}"))?;
    }

    let gen = GenConfig { n_users: 200, seed: 7, ..GenConfig::default() };
    let (ds, _, _) = generate(&gen).map_err(|e| e.to_string())?;
    let agg = aggregate_author_days(&ds);
    let mut by_user: BTreeMap<u64, Vec<&ImpressionRecord>> = BTreeMap::new();
    for r in ds.records() {
        by_user.entry(r.user_id).or_default().push(r);
    }
    let mut authors: Vec<u64> = ds.records().map(|r| r.author_id).collect();
    authors.sort_unstable();
    authors.dedup();
    let configs = [
        LtvConfig::default(),
        LtvConfig { window: 7, decay: 1.0 },
        LtvConfig { window: 1, decay: 0.8 },
        LtvConfig { window: 3, decay: 0.5 },
    ];
    let horizon = gen.n_days as u32 + 8;
    let mut checked = 0u64;
    for (&user, recs) in &by_user {
        for &author in &authors {
            let mine: Vec<&ImpressionRecord> = recs.iter().copied().filter(|r| r.author_id == author).collect();
            for t in 0..horizon {
                for cfg in &configs {
                    let got = author_ltv_label(&agg, user, author, t, cfg);
                    let want = brute_ltv(&mine, t, cfg);
                    ensure(got.to_bits() == want.to_bits(), || {
                        format!("user {user} author {author} t={t} {cfg:?}: {got} != {want}")
                    })?;
                    checked += 1;
                }
                // alpha = 1 is a plain windowed sum; N = 1 is the day-t total
                let plain: f64 = mine.iter().filter(|r| r.day + 7 > t && r.day <= t).map(|r| r.watch_time).sum();
                let flat = author_ltv_label(&agg, user, author, t, &configs[1]);
                ensure((flat - plain).abs() <= 1e-9 * plain.max(1.0), || format!("alpha=1 user {user} t={t}"))?;
                let today: f64 = mine.iter().filter(|r| r.day == t).map(|r| r.watch_time).sum();
                let one = author_ltv_label(&agg, user, author, t, &configs[2]);
                ensure((one - today).abs() <= 1e-9 * today.max(1.0), || format!("N=1 user {user} t={t}"))?;
            }
        }
    }
    Ok(format!("{} users x {} authors x {horizon} days x 4 configs: {checked} labels bit-identical", by_user.len(), authors.len()))
}

// ---------------------------------------------------------------------------
// 10: metric identities

fn metric_identities() -> Check {
    let mut rng = sub_rng(11, 10);
    for n in [2usize, 3, 10, 257, 2000] {
        let preds: Vec<f64> = (0..n).map(|_| rng.random_range(0..50) as f64 / 8.0).collect();
        let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0..30) as f64).collect();
        let (mut c, mut o) = (0u64, 0u64);
        for i in 0..n {
            for j in 0..n {
                if labels[i] < labels[j] {
                    o += 1;
                    if preds[i] < preds[j] {
                        c += 1;
                    }
                }
            }
        }
        let got = xauc_counts(&preds, &labels).map_err(|e| e.to_string())?;
        ensure(got == (c, o), || format!("n={n}: counts {got:?} vs brute force {:?}", (c, o)))?;
    }

    let n = 2000;
    let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0..40) as f64).collect();
    let mut grid: Vec<i64> = (-8192..8192).collect();
    for k in (1..grid.len()).rev() {
        grid.swap(k, rng.random_range(0..=k));
    }
    let preds: Vec<f64> = grid[..n].iter().map(|&k| k as f64 / 1024.0).collect();
    let (c, o) = xauc_counts(&preds, &labels).map_err(|e| e.to_string())?;
    let neg: Vec<f64> = preds.iter().map(|p| -p).collect();
    let (cn, on) = xauc_counts(&neg, &labels).map_err(|e| e.to_string())?;
    ensure(on == o && cn + c == o, || format!("antisymmetry: {c} + {cn} != {o}"))?;
    let transforms: [(&str, fn(f64) -> f64); 3] =
        [("exp", f64::exp), ("cubic", |x| x * x * x + x), ("sigmoid", |x| 1.0 / (1.0 + (-x).exp()))];
    for (name, f) in transforms {
        let mapped: Vec<f64> = preds.iter().map(|&p| f(p)).collect();
        let got = xauc_counts(&mapped, &labels).map_err(|e| e.to_string())?;
        ensure(got == (c, o), || format!("{name} transform changed counts"))?;
    }

    let n = 10_000;
    let labels: Vec<f64> = (0..n).map(|_| quantize_time(rng.random_range(0.0..100.0))).collect();
    let random: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let x = xauc(&random, &labels).map_err(|e| e.to_string())?;
    ensure((x - 0.5).abs() <= 0.02, || format!("random predictions: XAUC {x}"))?;

    let preds: Vec<f64> = (0..1000).map(|_| rng.random_range(0.01..20.0)).collect();
    let labels: Vec<f64> =
        (0..1000).map(|_| if rng.random_bool(0.4) { 0.0 } else { rng.random_range(0.0..30.0) }).collect();
    let base = pcoc(&preds, &labels).map_err(|e| e.to_string())?;
    for e in -10..=10 {
        let c = 2f64.powi(e);
        let scaled: Vec<f64> = preds.iter().map(|p| p * c).collect();
        let scaled_labels: Vec<f64> = labels.iter().map(|y| y * c).collect();
        ensure(pcoc(&scaled, &labels).map_err(|e| e.to_string())?.to_bits() == (base * c).to_bits(), || {
            format!("pcoc(c*p) != c*pcoc(p) at c=2^{e}")
        })?;
        ensure(pcoc(&scaled_labels, &scaled_labels).map_err(|e| e.to_string())? == 1.0, || "pcoc(y, y) != 1".into())?;
        ensure(pcoc(&preds, &scaled_labels).map_err(|e| e.to_string())?.to_bits() == (base / c).to_bits(), || {
            format!("pcoc(p, c*y) != pcoc(p)/c at c=2^{e}")
        })?;
    }
    Ok(format!("brute force n<=2000 exact, antisymmetry, 3 monotone maps, random XAUC {x:.4}, PCOC over 21 scales"))
}

// ---------------------------------------------------------------------------
// per-seed fixtures on the default generator

struct Fixture {
    seed: u64,
    ds: Dataset,
    truth: GroundTruth,
    ex: Vec<LabeledExample>,
    spec: PageGroupSpec,
    features: Vec<Features>,
    plans: Vec<DualStreamPlan>,
    test: Vec<usize>,
    build_secs: f64,
}

fn fixture(seed: u64) -> Fixture {
    let start = Instant::now();
    let gen = GenConfig { seed, ..GenConfig::default() };
    let (ds, truth, _) = generate(&gen).expect("generator");
    let last = gen.n_days as u32 - TEST_DAYS - 1;
    let mut ex = base_examples(&ds, DEFAULT_SLIDE_CAP).expect("slide times");
    let day_of = |e: &LabeledExample| ds.sessions[e.session].day;
    let train_ex: Vec<LabeledExample> = ex.iter().filter(|e| day_of(e) <= last).cloned().collect();
    let spec = PageGroupSpec::default_groups();
    let tables = fit_tables(&ds, &train_ex, &spec, DEFAULT_BUCKETS).expect("quantile tables");
    build_pdq_labels(&ds, &mut ex, &spec, &tables).expect("pdq labels");
    fill_attributed_labels(&ds, &mut ex, &AttributionConfig::default(), DEFAULT_SLIDE_CAP).expect("attribution");
    let agg = aggregate_author_days(&ds);
    let plans = (0..=last)
        .map(|t| plan_dual_stream(&ds, &ex, &agg, t as i64, &LtvConfig::default()).expect("plan"))
        .collect();
    let features = example_features(&ds, &ex, &spec, &ModelConfig::default());
    let test = (0..ex.len()).filter(|&k| day_of(&ex[k]) > last).collect();
    Fixture { seed, ds, truth, ex, spec, features, plans, test, build_secs: start.elapsed().as_secs_f64() }
}

impl Fixture {
    /// Held-out predictions of a freshly trained single-head model, in native units.
    fn train_and_predict(&self, head: Head, loss: LossKind) -> Vec<f64> {
        let model = ModelConfig { init_seed: self.seed, ..ModelConfig::single_head(head, loss) };
        let mut params = PredictorParams::new(model).expect("model");
        let tc = TrainConfig { seed: self.seed, ..TrainConfig::default() };
        let data = TrainingSet { features: &self.features, examples: &self.ex, plans: &self.plans };
        train(&mut params, &data, &tc).expect("training");
        let feats: Vec<Features> = self.test.iter().map(|&k| self.features[k]).collect();
        predict(&params, &feats, head).expect("predict").into_iter().map(|p| p * head.unit_seconds()).collect()
    }

    fn test_labels(&self, head: Head) -> Vec<f64> {
        self.test.iter().map(|&k| head.label(&self.ex[k]).expect("label") * head.unit_seconds()).collect()
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

struct SeedRun {
    seed: u64,
    /// Within-group XAUC of the PDQ model minus the slide-time model.
    gain: Vec<Option<f64>>,
    pdq_mse: f64,
    slide_mse: f64,
    corr_attributed: f64,
    corr_raw: f64,
    pcoc_hybrid: f64,
    pcoc_mse: f64,
    debias_secs: f64,
}

fn seed_run(fx: &Fixture) -> SeedRun {
    let start = Instant::now();
    let groups_all = page_groups_of(&fx.ds, &fx.spec);
    let groups: Vec<usize> = fx.test.iter().map(|&k| groups_all[k]).collect();
    let names = group_names(&fx.spec);
    let slide = fx.test_labels(Head::SlideTime);
    let pdq_preds = fx.train_and_predict(Head::Pdq, LossKind::Mse);
    let slide_preds = fx.train_and_predict(Head::SlideTime, LossKind::Mse);
    let gp = xauc_grouped(&pdq_preds, &slide, &groups, &names).expect("grouped");
    let gs = xauc_grouped(&slide_preds, &slide, &groups, &names).expect("grouped");
    let gain = gp.iter().zip(&gs).map(|(a, b)| Some(a.xauc? - b.xauc?)).collect();
    let pdq_mse = mse(&pdq_preds, &fx.test_labels(Head::Pdq)).expect("mse");
    let slide_mse = mse(&slide_preds, &slide).expect("mse");
    let debias_secs = fx.build_secs + start.elapsed().as_secs_f64();

    let credit: Vec<f64> = fx.ex.iter().map(|e| fx.truth.causal_credit(e.session)[e.record]).collect();
    let attributed: Vec<f64> = fx.ex.iter().map(|e| e.attributed_slide_time).collect();
    let raw: Vec<f64> = fx.ex.iter().map(|e| e.slide_time).collect();

    let attr_labels = fx.test_labels(Head::Attributed);
    let hybrid = fx.train_and_predict(Head::Attributed, LossKind::Hybrid);
    let plain = fx.train_and_predict(Head::Attributed, LossKind::Mse);
    SeedRun {
        seed: fx.seed,
        gain,
        pdq_mse,
        slide_mse,
        corr_attributed: pearson(&attributed, &credit),
        corr_raw: pearson(&raw, &credit),
        pcoc_hybrid: pcoc(&hybrid, &attr_labels).expect("pcoc"),
        pcoc_mse: pcoc(&plain, &attr_labels).expect("pcoc"),
        debias_secs,
    }
}

fn debias_direction(runs: &[SeedRun], names: &[String]) -> Check {
    let secs: f64 = runs.iter().map(|r| r.debias_secs).sum();
    let mut parts = Vec::new();
    let mut failed = Vec::new();
    for g in 1..names.len() {
        let vals: Option<Vec<f64>> = runs.iter().map(|r| r.gain[g]).collect();
        let Some(vals) = vals else {
            failed.push(format!("{}: undefined", names[g]));
            continue;
        };
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        parts.push(format!("{} {mean:+.4}", names[g]));
        if mean < 0.01 {
            failed.push(names[g].clone());
        }
    }
    let detail = format!("mean XAUC gain over {} seeds: {} ({secs:.0}s)", runs.len(), parts.join(", "));
    ensure(failed.is_empty() && secs < 600.0, || format!("{detail}; below +0.01: {}", failed.join(", ")))?;
    Ok(detail)
}

fn bounded_stability(runs: &[SeedRun]) -> Check {
    let detail: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: pdq {:.4} vs slide {:.0}", r.seed, r.pdq_mse, r.slide_mse))
        .collect();
    let ok = runs.iter().all(|r| r.pdq_mse < 0.1 && r.slide_mse >= 10.0 * r.pdq_mse);
    ensure(ok, || detail.join("; "))?;
    Ok(detail.join("; "))
}

fn attribution_signal(runs: &[SeedRun]) -> Check {
    let detail: Vec<String> =
        runs.iter()
            .map(|r| {
                format!("seed {}: {:.4} vs {:.4} ({:+.4})", r.seed, r.corr_attributed, r.corr_raw, r.corr_attributed - r.corr_raw)
            })
            .collect();
    ensure(runs.iter().all(|r| r.corr_attributed - r.corr_raw >= 0.05), || detail.join("; "))?;
    Ok(detail.join("; "))
}

fn calibration(runs: &[SeedRun]) -> Check {
    let wins = runs.iter().filter(|r| (r.pcoc_hybrid - 1.0).abs() < (r.pcoc_mse - 1.0).abs()).count();
    let detail: Vec<String> =
        runs.iter().map(|r| format!("seed {}: hybrid {:.3} mse {:.3}", r.seed, r.pcoc_hybrid, r.pcoc_mse)).collect();
    let detail = format!("hybrid closer in {wins}/{}; {}", runs.len(), detail.join("; "));
    ensure(2 * wins > runs.len(), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 8 and 9 on the first seed's fixture

fn dual_stream_hygiene(fx: &Fixture) -> Check {
    let audit = audit_no_leakage(&fx.ds, &fx.ex, &fx.plans);
    ensure(audit.passed(), || format!("audit: {}", audit.violations.iter().take(3).cloned().collect::<Vec<_>>().join("; ")))?;
    for plan in &fx.plans {
        for &(k, _) in &plan.delayed {
            let day = fx.ds.sessions[fx.ex[k].session].day;
            ensure(day + plan.config.window == plan.day, || format!("plan {}: delayed example from day {day}", plan.day))?;
        }
    }

    let mut params = PredictorParams::new(ModelConfig { init_seed: fx.seed, ..ModelConfig::default() }).expect("model");
    let tc = TrainConfig { seed: fx.seed, epochs: 1, ..TrainConfig::default() };
    let plans = &fx.plans[fx.plans.len() - 1..];
    let data = TrainingSet { features: &fx.features, examples: &fx.ex, plans };
    let (mut state, _) = train(&mut params, &data, &tc).map_err(|e| e.to_string())?;
    let others: Vec<Head> = params.heads().into_iter().filter(|&h| h != Head::Author).collect();
    let delayed = &plans[0].delayed;
    ensure(!delayed.is_empty(), || "no delayed-stream examples to step on".into())?;
    let mut steps = 0;
    let mut moved = false;
    for batch in delayed.chunks(tc.batch_size) {
        let shared = params.shared_snapshot();
        let shared_acc = state.shared_snapshot();
        let towers: Vec<Vec<u64>> = others.iter().map(|&h| params.tower_snapshot(h)).collect();
        let author = params.tower_snapshot(Head::Author);
        author_step(&mut params, &mut state, &fx.features, batch, &tc).map_err(|e| e.to_string())?;
        ensure(params.shared_snapshot() == shared, || format!("author step {steps} changed shared parameters"))?;
        ensure(state.shared_snapshot() == shared_acc, || format!("author step {steps} changed shared accumulators"))?;
        for (h, before) in others.iter().zip(&towers) {
            ensure(params.tower_snapshot(*h) == *before, || format!("author step {steps} changed the {h} tower"))?;
        }
        moved |= params.tower_snapshot(Head::Author) != author;
        steps += 1;
    }
    ensure(moved, || "author steps never changed the author tower".into())?;
    Ok(format!(
        "audit: {} plans, {} delayed labels; {steps} author steps left shared parameters bitwise unchanged",
        audit.plans, audit.labels_checked
    ))
}

fn gradient_checks(fx: &Fixture) -> Check {
    let idx: Vec<usize> = fx.test.iter().step_by(397).take(128).copied().collect();
    let feats: Vec<Features> = idx.iter().map(|&k| fx.features[k]).collect();
    let mut parts = Vec::new();
    for (head, loss) in [(Head::Pdq, LossKind::Mse), (Head::Attributed, LossKind::Tweedie), (Head::Attributed, LossKind::Hybrid)] {
        let model = ModelConfig { init_seed: fx.seed, ..ModelConfig::single_head(head, loss) };
        let mut params = PredictorParams::new(model).map_err(|e| e.to_string())?;
        params.jitter(0.3, fx.seed);
        let labels: Vec<f64> = idx.iter().map(|&k| head.label(&fx.ex[k]).expect("label")).collect();
        let r = gradient_check(&params, &feats, &labels, head, &TrainConfig::default(), 100, 1e-5, fx.seed)
            .map_err(|e| e.to_string())?;
        let part = format!("{}: {} probes, max rel err {:.1e}", loss.name(), r.probes, r.max_rel_error);
        ensure(r.probes == 100 && r.max_rel_error < 1e-4, || part.clone())?;
        parts.push(part);
    }
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------------------
// 11 and 12: the full pipeline through the binary

fn run_pipeline(dir: &Path) -> Result<f64, String> {
    let conf = dir.join("pipeline.conf");
    fs::write(&conf, "").map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_ltvrank"))
        .arg("all")
        .arg("--config")
        .arg(&conf)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("pipeline failed: {}", String::from_utf8_lossy(&out.stderr)))?;
    Ok(start.elapsed().as_secs_f64())
}

fn artifacts(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir.join("ltvrank-out")).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        out.insert(name, fs::read(&path).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

fn end_to_end(a: &Path, b: &Path) -> Check {
    let ta = run_pipeline(a)?;
    let tb = run_pipeline(b)?;
    let (fa, fb) = (artifacts(a)?, artifacts(b)?);
    ensure(fa.keys().eq(fb.keys()), || "runs produced different file sets".into())?;
    let differing: Vec<&String> = fa.iter().filter(|(k, v)| fb[*k] != **v).map(|(k, _)| k).collect();
    ensure(differing.is_empty(), || format!("differing artifacts: {differing:?}"))?;
    ensure(ta < 900.0 && tb < 900.0, || format!("runs took {ta:.0}s and {tb:.0}s"))?;
    Ok(format!("{} files byte-identical; runs took {ta:.0}s and {tb:.0}s", fa.len()))
}

fn replay_direction(dir: &Path) -> Check {
    let text = fs::read_to_string(dir.join("ltvrank-out/replay.tsv")).map_err(|e| e.to_string())?;
    let row = text.lines().find(|l| l.starts_with("qa_watch\t")).ok_or("no qa_watch row in replay.tsv")?;
    let f: Vec<&str> = row.split('\t').collect();
    let positive: usize = f[4].parse().map_err(|_| format!("bad row {row}"))?;
    let seeds: usize = f[5].parse().map_err(|_| format!("bad row {row}"))?;
    let detail = format!("QA-watch delta positive at {positive}/{seeds} seeds, mean {}, CI [{}, {}]", f[1], f[2], f[3]);
    ensure(seeds == 20 && positive >= 15, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let mut lines = vec![
        run(1, "PDQ label correctness", pdq_labels),
        run(4, "attribution oracle", attribution_oracle),
        run(7, "author time oracle", author_ltv_oracle),
        run(10, "metric identities", metric_identities),
    ];

    eprintln!("training single-head models on {} seeds", SEEDS.len());
    let start = Instant::now();
    let mut runs = Vec::new();
    let mut first: Option<(Line, Line)> = None;
    let mut sweep_error = None;
    for &seed in &SEEDS {
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            let fx = fixture(seed);
            if first.is_none() {
                first = Some((
                    run(8, "dual-stream hygiene", || dual_stream_hygiene(&fx)),
                    run(9, "gradient checks", || gradient_checks(&fx)),
                ));
            }
            seed_run(&fx)
        }));
        match outcome {
            Ok(r) => runs.push(r),
            Err(e) => {
                sweep_error = Some(format!("seed {seed}: {}", panic_text(e)));
                break;
            }
        }
    }
    let sweep_secs = start.elapsed().as_secs_f64();
    let names = group_names(&PageGroupSpec::default_groups());
    let sweep: [(usize, &'static str, fn(&[SeedRun]) -> Check); 3] = [
        (3, "bounded-label stability", bounded_stability),
        (5, "attribution signal", attribution_signal),
        (6, "hybrid-loss calibration", calibration),
    ];
    let mut push_sweep = |id: usize, name: &'static str, result: Check| {
        let result = match &sweep_error {
            Some(e) => Err(e.clone()),
            None => result,
        };
        lines.push(Line { id, name, result, secs: sweep_secs });
    };
    push_sweep(2, "debias direction", debias_direction(&runs, &names));
    for (id, name, f) in sweep {
        push_sweep(id, name, f(&runs));
    }
    match first {
        Some((a, b)) => lines.extend([a, b]),
        None => {
            for (id, name) in [(8, "dual-stream hygiene"), (9, "gradient checks")] {
                lines.push(Line { id, name, result: Err("no fixture".into()), secs: 0.0 });
            }
        }
    }

    let dirs = (tempfile::tempdir(), tempfile::tempdir());
    match dirs {
        (Ok(a), Ok(b)) => {
            lines.push(run(12, "end-to-end determinism", || end_to_end(a.path(), b.path())));
            lines.push(run(11, "replay direction", || replay_direction(a.path())));
        }
        _ => {
            for (id, name) in [(11, "replay direction"), (12, "end-to-end determinism")] {
                lines.push(Line { id, name, result: Err("cannot create temp dirs".into()), secs: 0.0 });
            }
        }
    }

    lines.sort_by_key(|l| l.id);
    let passed = lines.iter().filter(|l| l.result.is_ok()).count();
    for l in &lines {
        let (tag, detail) = match &l.result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} criterion {:>2} {}: {detail} [{:.1}s]", l.id, l.name, l.secs);
    }
    println!("acceptance: {passed}/{} criteria passed", lines.len());
    if passed == lines.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
