//! Stage runners. Each stage declares its input and output files inside
//! `out_dir`; outputs are written atomically and stamped on success.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ltvrank::attribution::{
    fill_attributed_labels, table1_diagnostics, write_diagnostics, AttributionConfig, AttributionMode,
};
use ltvrank::author_ltv::{
    aggregate_author_days, audit_no_leakage, plan_dual_stream, read_aggregates, write_aggregates, write_plans,
    DualStreamPlan,
};
use ltvrank::datamodel::{
    base_examples, format_real, read_dataset, read_labels, write_dataset, write_labels, Dataset, LabeledExample,
};
use ltvrank::fusion_eval::replay_eval;
use ltvrank::metrics::{
    group_names, lt_n, page_groups_of, pcoc_buckets, xauc_grouped, HeadMetrics, MetricsReport,
};
use ltvrank::pdq::{build_pdq_labels, fit_tables, read_tables, write_tables, PageGroupSpec, QuantileTable};
use ltvrank::predictor::{
    example_features, predict, read_params, train, train_with_learned_attribution, write_params, Features, Head,
    PredictorParams, TrainReport, TrainingSet,
};
use ltvrank::synthgen::{generate, page_slide_profile, write_ground_truth, World};
use thiserror::Error;

use crate::config::{PipelineConfig, Stage};
use crate::store::{embed_meta, is_cached, meta_line, sha256_file, stamp_path, write_atomic, Stamp};

pub const DATASET: &str = "dataset.tsv";
pub const TRUTH: &str = "truth.tsv";
pub const LABELS: &str = "labels.tsv";
pub const TABLES: &str = "pdq_tables.tsv";
pub const AUTHOR_DAYS: &str = "author_days.tsv";
pub const PLANS: &str = "plans.tsv";
pub const DIAGNOSTICS: &str = "attribution_diagnostics.tsv";
pub const MODEL: &str = "model.params";
pub const TRACE: &str = "train_trace.tsv";
pub const ATTR_WEIGHTS: &str = "attribution_weights.tsv";
pub const METRICS: &str = "metrics.tsv";
pub const METRICS_SUMMARY: &str = "metrics_summary.txt";
pub const GROUP_XAUC: &str = "group_xauc.tsv";
pub const CALIBRATION: &str = "calibration.tsv";
pub const REPLAY: &str = "replay.tsv";
pub const REPORT: &str = "report.txt";
pub const FIG_PAGE_SLIDE: &str = "fig_page_slide.tsv";
pub const FIG_QUANTILES: &str = "fig_quantile_thresholds.tsv";
pub const FIG_SLIDE_HIST: &str = "fig_slide_histogram.tsv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("stage `{stage}` is missing inputs (run the earlier stages first):\n  {}",
        .paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("\n  "))]
    MissingInputs { stage: &'static str, paths: Vec<PathBuf> },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingInputs { .. } => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn rt(context: impl std::fmt::Display) -> impl FnOnce(Box<dyn std::error::Error>) -> CliError {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

trait Ctx<T> {
    fn ctx(self, context: impl std::fmt::Display) -> Result<T, CliError>;
}

impl<T, E: std::error::Error + 'static> Ctx<T> for Result<T, E> {
    fn ctx(self, context: impl std::fmt::Display) -> Result<T, CliError> {
        self.map_err(|e| rt(context)(Box::new(e)))
    }
}

pub fn inputs(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Gen => &[],
        Stage::Labels => &[DATASET],
        Stage::Train => &[DATASET, LABELS, TABLES, AUTHOR_DAYS],
        Stage::Eval => &[DATASET, LABELS, TABLES, MODEL, ATTR_WEIGHTS],
        Stage::Replay => &[DATASET, TABLES, MODEL],
        Stage::Report => &[DATASET, LABELS, TABLES, DIAGNOSTICS, TRACE, METRICS, GROUP_XAUC, REPLAY],
    }
}

pub fn outputs(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Gen => &[DATASET, TRUTH],
        Stage::Labels => &[LABELS, TABLES, AUTHOR_DAYS, PLANS, DIAGNOSTICS],
        Stage::Train => &[MODEL, TRACE, ATTR_WEIGHTS],
        Stage::Eval => &[METRICS, METRICS_SUMMARY, GROUP_XAUC, CALIBRATION],
        Stage::Replay => &[REPLAY],
        Stage::Report => &[REPORT, FIG_PAGE_SLIDE, FIG_QUANTILES, FIG_SLIDE_HIST],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub cached: bool,
    pub outputs: Vec<PathBuf>,
}

type Artifacts = Vec<(&'static str, Vec<u8>)>;

/// Runs one stage, or reports it cached when its stamp is current.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<StageOutcome, CliError> {
    let dir = cfg.out_dir.as_path();
    let missing: Vec<PathBuf> = inputs(stage).iter().map(|n| dir.join(n)).filter(|p| !p.exists()).collect();
    if !missing.is_empty() {
        return Err(CliError::MissingInputs { stage: stage.name(), paths: missing });
    }
    let outs: Vec<PathBuf> = outputs(stage).iter().map(|n| dir.join(n)).collect();
    if is_cached(cfg, stage, dir, inputs(stage), outputs(stage)) {
        log::info!("{}: cached", stage.name());
        return Ok(StageOutcome { stage, cached: true, outputs: outs });
    }
    log::info!("{}: running", stage.name());
    let artifacts = match stage {
        Stage::Gen => gen(cfg)?,
        Stage::Labels => labels(cfg)?,
        Stage::Train => train_stage(cfg)?,
        Stage::Eval => eval(cfg)?,
        Stage::Replay => replay(cfg)?,
        Stage::Report => report(cfg)?,
    };
    let meta = meta_line(cfg, stage);
    for (name, bytes) in &artifacts {
        debug_assert!(outputs(stage).contains(name));
        write_atomic(&dir.join(name), &embed_meta(bytes, &meta)).ctx(format!("writing {}", dir.join(name).display()))?;
    }
    let stamp = Stamp::capture(cfg, stage, dir, inputs(stage), outputs(stage)).ctx("hashing artifacts")?;
    write_atomic(&stamp_path(dir, stage), stamp.render(cfg, stage).as_bytes()).ctx("writing stamp")?;
    Ok(StageOutcome { stage, cached: false, outputs: outs })
}

/// Every stage in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<StageOutcome>, CliError> {
    Stage::ALL.into_iter().map(|s| run_stage(s, cfg)).collect()
}

fn bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf).ctx("serializing")?;
    Ok(buf)
}

fn open(dir: &Path, name: &str) -> Result<BufReader<File>, CliError> {
    let p = dir.join(name);
    File::open(&p).map(BufReader::new).ctx(p.display())
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    read_dataset(open(dir, DATASET)?).ctx(dir.join(DATASET).display())
}

fn load_labels(dir: &Path) -> Result<Vec<LabeledExample>, CliError> {
    read_labels(open(dir, LABELS)?).ctx(dir.join(LABELS).display())
}

fn load_tables(dir: &Path) -> Result<(PageGroupSpec, Vec<QuantileTable>), CliError> {
    read_tables(open(dir, TABLES)?).ctx(dir.join(TABLES).display())
}

fn load_model(dir: &Path) -> Result<PredictorParams, CliError> {
    read_params(open(dir, MODEL)?).ctx(dir.join(MODEL).display())
}

fn day_of(ds: &Dataset, ex: &LabeledExample) -> u32 {
    ds.sessions[ex.session].day
}

fn gen(cfg: &PipelineConfig) -> Result<Artifacts, CliError> {
    let (ds, truth, _) = generate(&cfg.gen).ctx("generating")?;
    log::info!("generated {} sessions, {} impressions", ds.sessions.len(), ds.num_records());
    Ok(vec![
        (DATASET, bytes(|b| write_dataset(&ds, b))?),
        (TRUTH, bytes(|b| write_ground_truth(&truth, &ds, b))?),
    ])
}

fn plans_for(
    cfg: &PipelineConfig,
    ds: &Dataset,
    ex: &[LabeledExample],
    agg: &ltvrank::author_ltv::AuthorAggregates,
) -> Result<Vec<DualStreamPlan>, CliError> {
    (0..=cfg.last_train_day())
        .map(|t| plan_dual_stream(ds, ex, agg, t as i64, &cfg.ltv).ctx(format!("planning day {t}")))
        .collect()
}

fn labels(cfg: &PipelineConfig) -> Result<Artifacts, CliError> {
    let dir = cfg.out_dir.as_path();
    let ds = load_dataset(dir)?;
    let mut ex = base_examples(&ds, cfg.slide_cap).ctx("slide times")?;
    let last = cfg.last_train_day();
    // quantile tables see training days only
    let train_ex: Vec<LabeledExample> = ex.iter().filter(|e| day_of(&ds, e) <= last).cloned().collect();
    let spec = &cfg.page_groups;
    let tables = fit_tables(&ds, &train_ex, spec, cfg.pdq_buckets).ctx("fitting quantile tables")?;
    build_pdq_labels(&ds, &mut ex, spec, &tables).ctx("PDQ labels")?;
    fill_attributed_labels(&ds, &mut ex, &cfg.attribution, cfg.slide_cap).ctx("attributed labels")?;
    let agg = aggregate_author_days(&ds);
    let plans = plans_for(cfg, &ds, &ex, &agg)?;
    let audit = audit_no_leakage(&ds, &ex, &plans);
    if !audit.passed() {
        return Err(CliError::Runtime(format!("leakage audit failed: {}", audit.violations.join("; "))));
    }
    log::info!("leakage audit: {} plans, {} delayed labels checked", audit.plans, audit.labels_checked);
    let diagnostics = table1_diagnostics(&ds, &cfg.attribution).ctx("attribution diagnostics")?;
    Ok(vec![
        (LABELS, bytes(|b| write_labels(&ex, b))?),
        (TABLES, bytes(|b| write_tables(&tables, spec, b))?),
        (AUTHOR_DAYS, bytes(|b| write_aggregates(&agg, b))?),
        (PLANS, bytes(|b| write_plans(&plans, &ds, &ex, b))?),
        (DIAGNOSTICS, bytes(|b| write_diagnostics(&diagnostics, b))?),
    ])
}

fn write_trace(report: &TrainReport) -> Vec<u8> {
    let mut s = String::from("epoch\thead\tloss\n");
    for e in &report.epochs {
        for (h, l) in &e.losses {
            let _ = writeln!(s, "{}\t{h}\t{}", e.epoch, format_real(*l));
        }
    }
    let _ = writeln!(s, "steps\tstandard\t{}", report.standard_steps);
    let _ = writeln!(s, "steps\tauthor\t{}", report.author_steps);
    s.into_bytes()
}

fn write_attr_weights(a: &AttributionConfig) -> Vec<u8> {
    let mode = match a.mode {
        AttributionMode::Binary => "binary",
        AttributionMode::Learned => "learned",
    };
    let w: Vec<String> = a.weights.iter().map(|&x| format_real(x)).collect();
    format!("#ltvrank-attribution-weights v1\nmode\t{mode}\nweights\t{}\n", w.join(",")).into_bytes()
}

fn read_attr_weights(dir: &Path, base: &AttributionConfig) -> Result<AttributionConfig, CliError> {
    let p = dir.join(ATTR_WEIGHTS);
    let text = fs::read_to_string(&p).ctx(p.display())?;
    let mut out = base.clone();
    let bad = || CliError::Runtime(format!("{}: malformed attribution weights", p.display()));
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        match line.split_once('\t') {
            Some(("mode", "binary")) => out.mode = AttributionMode::Binary,
            Some(("mode", "learned")) => out.mode = AttributionMode::Learned,
            Some(("weights", w)) => {
                let v: Vec<f64> = w.split(',').map(str::parse).collect::<Result<_, _>>().map_err(|_| bad())?;
                out.weights = v.try_into().map_err(|_| bad())?;
            }
            _ => return Err(bad()),
        }
    }
    Ok(out)
}

fn train_stage(cfg: &PipelineConfig) -> Result<Artifacts, CliError> {
    let dir = cfg.out_dir.as_path();
    let ds = load_dataset(dir)?;
    let mut ex = load_labels(dir)?;
    let (spec, _) = load_tables(dir)?;
    let agg = read_aggregates(open(dir, AUTHOR_DAYS)?).ctx(dir.join(AUTHOR_DAYS).display())?;
    let plans = plans_for(cfg, &ds, &ex, &agg)?;
    let features = example_features(&ds, &ex, &spec, &cfg.model);
    let mut params = PredictorParams::new(cfg.model.clone()).ctx("model")?;
    let mut attribution = cfg.attribution.clone();
    let report = if attribution.mode == AttributionMode::Learned {
        let (_, report) = train_with_learned_attribution(
            &mut params,
            &ds,
            &mut ex,
            &features,
            &plans,
            &mut attribution,
            cfg.slide_cap,
            cfg.attr_weight_lr,
            &cfg.train,
        )
        .ctx("training")?;
        report
    } else {
        let data = TrainingSet { features: &features, examples: &ex, plans: &plans };
        train(&mut params, &data, &cfg.train).ctx("training")?.1
    };
    Ok(vec![
        (MODEL, bytes(|b| write_params(&params, b))?),
        (TRACE, write_trace(&report)),
        (ATTR_WEIGHTS, write_attr_weights(&attribution)),
    ])
}

fn short_hash(dir: &Path, name: &str) -> Result<String, CliError> {
    let h = sha256_file(&dir.join(name)).ctx(dir.join(name).display())?;
    Ok(h[..12].to_string())
}

/// Heads with a held-out label; the author label matures after the log ends.
fn eval_heads(params: &PredictorParams) -> Vec<Head> {
    params.heads().into_iter().filter(|&h| h != Head::Author).collect()
}

fn eval(cfg: &PipelineConfig) -> Result<Artifacts, CliError> {
    let dir = cfg.out_dir.as_path();
    let ds = load_dataset(dir)?;
    let mut ex = load_labels(dir)?;
    let (spec, _) = load_tables(dir)?;
    let params = load_model(dir)?;
    let attribution = read_attr_weights(dir, &cfg.attribution)?;
    if attribution.mode == AttributionMode::Learned {
        fill_attributed_labels(&ds, &mut ex, &attribution, cfg.slide_cap).ctx("attributed labels")?;
    }
    let last = cfg.last_train_day();
    let test: Vec<usize> = (0..ex.len()).filter(|&k| day_of(&ds, &ex[k]) > last).collect();
    if test.is_empty() {
        return Err(CliError::Runtime("held-out days contain no impressions".into()));
    }
    let all_features = example_features(&ds, &ex, &spec, &params.config);
    let features: Vec<Features> = test.iter().map(|&k| all_features[k]).collect();
    let all_groups = page_groups_of(&ds, &spec);
    let groups: Vec<usize> = test.iter().map(|&k| all_groups[k]).collect();
    let names = group_names(&spec);
    let slide: Vec<f64> = test.iter().map(|&k| ex[k].slide_time).collect();

    let mut heads = Vec::new();
    let mut group_cols: Vec<(Head, Vec<Option<f64>>, Vec<u64>)> = Vec::new();
    let mut calibration = String::from("head\tbucket\tpcoc\n");
    for head in eval_heads(&params) {
        let unit = head.unit_seconds();
        let preds: Vec<f64> =
            predict(&params, &features, head).ctx("predicting")?.into_iter().map(|p| p * unit).collect();
        let labels: Vec<f64> =
            test.iter().map(|&k| head.label(&ex[k]).expect("non-author heads are labelled") * unit).collect();
        heads.push(HeadMetrics::compute(head.name(), &preds, &labels, &groups, &names).ctx("metrics")?);
        if matches!(head, Head::Pdq | Head::SlideTime | Head::Attributed) {
            let g = xauc_grouped(&preds, &slide, &groups, &names).ctx("grouped XAUC")?;
            group_cols.push((head, g.iter().map(|x| x.xauc).collect(), g.iter().map(|x| x.pairs).collect()));
        }
        for (b, v) in pcoc_buckets(&preds, &labels, cfg.pcoc_buckets).ctx("calibration")?.into_iter().enumerate() {
            let _ = writeln!(calibration, "{head}\t{b}\t{}", v.map_or_else(|| "NA".into(), format_real));
        }
    }

    let anchor = last;
    let cohort: Vec<u64> = {
        let mut c: Vec<u64> = ds.sessions.iter().filter(|s| s.day == anchor).map(|s| s.user_id).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut lt = Vec::new();
    for &n in &cfg.lt_windows {
        if let Ok(v) = lt_n(&cohort, &ds, anchor, n) {
            lt.push((n, v));
        }
    }
    let report = MetricsReport {
        dataset_id: short_hash(dir, DATASET)?,
        model_id: short_hash(dir, MODEL)?,
        seed: cfg.seed,
        heads,
        lt,
    };

    let mut gx = String::from("group\tpairs");
    for (h, _, _) in &group_cols {
        let _ = write!(gx, "\t{h}");
    }
    gx.push('\n');
    for (g, name) in names.iter().enumerate() {
        let pairs = group_cols.first().map_or(0, |c| c.2[g]);
        let _ = write!(gx, "{name}\t{pairs}");
        for (_, col, _) in &group_cols {
            let _ = write!(gx, "\t{}", col[g].map_or_else(|| "NA".into(), format_real));
        }
        gx.push('\n');
    }
    Ok(vec![
        (METRICS, bytes(|b| report.write_table(b))?),
        (METRICS_SUMMARY, bytes(|b| report.write_summary(b))?),
        (GROUP_XAUC, gx.into_bytes()),
        (CALIBRATION, calibration.into_bytes()),
    ])
}

fn replay(cfg: &PipelineConfig) -> Result<Artifacts, CliError> {
    let dir = cfg.out_dir.as_path();
    let ds = load_dataset(dir)?;
    let (spec, _) = load_tables(dir)?;
    let params = load_model(dir)?;
    let world = World::build(&cfg.gen).ctx("rebuilding the simulator")?;
    let last = cfg.last_train_day();
    let heldout = ds.filter_days(|d| d > last);
    let report =
        replay_eval(&world, &heldout, &params, &spec, &cfg.fusion, &cfg.baseline, &cfg.replay).ctx("replay")?;
    Ok(vec![(REPLAY, bytes(|b| report.write(b))?)])
}

fn tsv_rows(dir: &Path, name: &str) -> Result<Vec<Vec<String>>, CliError> {
    let p = dir.join(name);
    let text = fs::read_to_string(&p).ctx(p.display())?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect())
}

fn num(s: &str) -> String {
    s.parse::<f64>().map_or_else(|_| s.to_string(), |v| format!("{v:.4}"))
}

fn report(cfg: &PipelineConfig) -> Result<Artifacts, CliError> {
    let dir = cfg.out_dir.as_path();
    let mut r = String::from("ltvrank report\n");
    let _ = writeln!(r, "seed {}, last training day {}, {} held-out days\n", cfg.seed, cfg.last_train_day(), cfg.test_days);

    r.push_str("Attribution coverage (percent of within-session pairs / downstream watch time)\n");
    let _ = writeln!(r, "{:<10} {:<16} {:>10} {:>10}", "dimension", "relation", "S_ratio", "V_ratio");
    for row in tsv_rows(dir, DIAGNOSTICS)?.iter().skip(1) {
        let _ = writeln!(r, "{:<10} {:<16} {:>10} {:>10}", row[0], row[1], num(&row[2]), num(&row[3]));
    }

    let metrics = tsv_rows(dir, METRICS)?;
    let mut head_metric: BTreeMap<(String, String), String> = BTreeMap::new();
    for row in metrics.iter().filter(|r| r.len() >= 5 && r[0] == "head") {
        head_metric.insert((row[1].clone(), row[3].clone()), row[4].clone());
    }
    let get = |h: &str, m: &str| head_metric.get(&(h.to_string(), m.to_string())).map_or("-".to_string(), |v| num(v));
    r.push_str("\nHeld-out accuracy (time heads in seconds)\n");
    let _ = writeln!(r, "{:<12} {:>14} {:>12} {:>8} {:>8}", "head", "MSE", "MAE", "XAUC", "PCOC");
    let mut heads: Vec<String> = Vec::new();
    for row in metrics.iter().filter(|r| r.len() >= 5 && r[0] == "head") {
        if !heads.contains(&row[1]) {
            heads.push(row[1].clone());
        }
    }
    for h in &heads {
        let _ = writeln!(
            r,
            "{:<12} {:>14} {:>12} {:>8} {:>8}",
            h,
            get(h, "mse"),
            get(h, "mae"),
            get(h, "xauc"),
            get(h, "pcoc")
        );
    }

    let gx = tsv_rows(dir, GROUP_XAUC)?;
    if let Some(header) = gx.first() {
        r.push_str("\nWithin-page-group XAUC against raw slide time\n");
        let _ = write!(r, "{:<8} {:>12}", "group", "pairs");
        for h in &header[2..] {
            let _ = write!(r, " {h:>12}");
        }
        r.push('\n');
        for row in &gx[1..] {
            let _ = write!(r, "{:<8} {:>12}", row[0], row[1]);
            for v in &row[2..] {
                let _ = write!(r, " {:>12}", num(v));
            }
            r.push('\n');
        }
    }

    let trace = tsv_rows(dir, TRACE)?;
    r.push_str("\nTraining loss by epoch\n");
    for row in trace.iter().skip(1) {
        let _ = writeln!(r, "  {}", row.join("  "));
    }

    let replay_rows = tsv_rows(dir, REPLAY)?;
    r.push_str("\nReplay, treatment vs baseline fusion weights (relative deltas, 95% bootstrap CI over seeds)\n");
    let _ = writeln!(r, "{:<10} {:>10} {:>10} {:>10} {:>10}", "metric", "delta", "ci_low", "ci_high", "positive");
    for row in replay_rows.iter().skip(1).take_while(|row| row[0] != "seed") {
        let pct = |s: &str| s.parse::<f64>().map_or_else(|_| s.to_string(), |v| format!("{:+.3}%", 100.0 * v));
        let _ = writeln!(
            r,
            "{:<10} {:>10} {:>10} {:>10} {:>10}",
            row[0],
            pct(&row[1]),
            pct(&row[2]),
            pct(&row[3]),
            format!("{}/{}", row[4], row[5])
        );
    }

    let ds = load_dataset(dir)?;
    let profile = page_slide_profile(&ds, cfg.slide_cap).ctx("page profile")?;
    let mut fig_page = String::from("page\timpressions\tmean_slide_time\n");
    for (p, n, m) in &profile {
        let _ = writeln!(fig_page, "{p}\t{n}\t{}", format_real(*m));
    }

    let (_, tables) = load_tables(dir)?;
    let mut fig_q = String::from("group\tbucket\tthreshold\n");
    for t in &tables {
        for (b, d) in t.thresholds.iter().enumerate() {
            let _ = writeln!(fig_q, "{}\t{}\t{}", t.group, b + 1, format_real(*d));
        }
    }

    let ex = load_labels(dir)?;
    let bins = 30usize;
    let width = cfg.slide_cap / bins as f64;
    let mut hist = vec![[0usize; 2]; bins + 1];
    for e in &ex {
        for (c, v) in [e.slide_time, e.attributed_slide_time].into_iter().enumerate() {
            let b = if v >= cfg.slide_cap { bins } else { (v / width) as usize };
            hist[b.min(bins)][c] += 1;
        }
    }
    let mut fig_h = String::from("bin_low\tbin_high\tslide_time\tattributed_slide_time\n");
    for (b, [s, a]) in hist.iter().enumerate() {
        let lo = b as f64 * width;
        let hi = if b == bins { cfg.slide_cap } else { lo + width };
        let _ = writeln!(fig_h, "{}\t{}\t{s}\t{a}", format_real(lo), format_real(hi));
    }

    Ok(vec![
        (REPORT, r.into_bytes()),
        (FIG_PAGE_SLIDE, fig_page.into_bytes()),
        (FIG_QUANTILES, fig_q.into_bytes()),
        (FIG_SLIDE_HIST, fig_h.into_bytes()),
    ])
}
