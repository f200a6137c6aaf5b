//! Command-line arguments and dispatch.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};

use crate::config::{self, Stage};
use crate::pipeline::{run_all, run_stage, CliError};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StageArg {
    Gen,
    Labels,
    Train,
    Eval,
    Replay,
    Report,
    /// Every stage in order.
    All,
    /// Print every config key with its default and exit.
    Keys,
}

#[derive(Debug, Parser)]
#[command(name = "ltvrank", version, about = "Run one stage of the ltvrank pipeline")]
pub struct Args {
    pub stage: StageArg,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn stage_of(a: StageArg) -> Option<Stage> {
    match a {
        StageArg::Gen => Some(Stage::Gen),
        StageArg::Labels => Some(Stage::Labels),
        StageArg::Train => Some(Stage::Train),
        StageArg::Eval => Some(Stage::Eval),
        StageArg::Replay => Some(Stage::Replay),
        StageArg::Report => Some(Stage::Report),
        StageArg::All | StageArg::Keys => None,
    }
}

/// Runs the requested stage(s) and writes one status line per stage to `out`.
pub fn execute(args: Args, out: &mut impl Write) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Runtime(format!("writing status: {e}"));
    if let StageArg::Keys = args.stage {
        return write!(out, "{}", config::reference()).map_err(io);
    }
    let Some(path) = args.config else {
        return Err(CliError::Config(vec!["--config <path> is required".into()]));
    };
    let cfg = config::load(&path, &args.set, args.seed).map_err(CliError::Config)?;
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    let outcomes = match stage_of(args.stage) {
        Some(stage) => vec![run_stage(stage, &cfg)?],
        None => run_all(&cfg)?,
    };
    for o in outcomes {
        if o.cached {
            writeln!(out, "{}: cached (inputs and config unchanged)", o.stage.name()).map_err(io)?;
        } else {
            writeln!(out, "{}: wrote {} artifacts to {}", o.stage.name(), o.outputs.len(), cfg.out_dir.display())
                .map_err(io)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::fs;
    use std::path::Path;

    use super::*;

    const TINY: &str = "\
# small enough to run every stage in a few seconds
gen.n_users = 150
gen.n_videos = 600
gen.n_authors = 40
gen.n_days = 5
labels.pdq_buckets = 20
labels.page_groups = 0,1,3
labels.test_days = 1
labels.ltv_window = 2
eval.lt_windows = 1
train.epochs = 1
replay.seeds = 3
replay.max_sessions = 200
replay.bootstrap = 50
";

    fn with_config(dir: &Path, text: &str) -> String {
        let p = dir.join("run.conf");
        fs::write(&p, text).unwrap();
        p.to_string_lossy().into_owned()
    }

    fn ltvrank(argv: &[&str]) -> Result<String, CliError> {
        let args = Args::try_parse_from(std::iter::once("ltvrank").chain(argv.iter().copied())).unwrap();
        let mut out = Vec::new();
        execute(args, &mut out)?;
        Ok(String::from_utf8(out).unwrap())
    }

    #[test]
    fn keys_lists_every_section() {
        let text = ltvrank(&["keys"]).unwrap();
        for key in ["seed = 42", "gen.n_users", "labels.slide_cap", "train.balance_heads", "fusion.w_author = 3", "replay.seeds"] {
            assert!(text.contains(key), "{key}");
        }
    }

    #[test]
    fn missing_config_is_a_usage_error() {
        let e = ltvrank(&["gen"]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("--config"));
    }

    #[test]
    fn config_errors_are_reported_together() {
        let dir = tempfile::tempdir().unwrap();
        let conf = with_config(dir.path(), "gen.n_userz = 5\nthis is not a pair\ntrain.epochs = many\n");
        let e = ltvrank(&["gen", "--config", &conf, "--set", "gen.n_days"]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let msg = e.to_string();
        for needle in ["gen.n_userz", "line 2", "train.epochs", "`gen.n_days`"] {
            assert!(msg.contains(needle), "{needle} missing from: {msg}");
        }
        assert!(!dir.path().join("ltvrank-out").exists());
    }

    #[test]
    fn stage_without_inputs_names_them() {
        let dir = tempfile::tempdir().unwrap();
        let conf = with_config(dir.path(), TINY);
        let e = ltvrank(&["train", "--config", &conf]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("dataset.tsv"), "{e}");
    }

    #[test]
    fn stages_cache_and_invalidate() {
        let dir = tempfile::tempdir().unwrap();
        let conf = with_config(dir.path(), TINY);
        let out = dir.path().join("ltvrank-out");

        let first = ltvrank(&["all", "--config", &conf]).unwrap();
        assert_eq!(first.matches("wrote").count(), 6, "{first}");
        for name in ["dataset.tsv", "labels.tsv", "model.params", "metrics.tsv", "replay.tsv", "report.txt"] {
            let text = fs::read_to_string(out.join(name)).unwrap();
            let meta = text.lines().nth(1).unwrap();
            assert!(meta.starts_with("#ltvrank stage=") && meta.contains("seed=42"), "{name}: {meta}");
        }
        assert!(fs::read_to_string(out.join("report.txt")).unwrap().contains("qa_watch"));

        let again = ltvrank(&["all", "--config", &conf]).unwrap();
        assert_eq!(again.matches("cached").count(), 6, "{again}");

        let changed = ltvrank(&["all", "--config", &conf, "--set", "train.epochs=2"]).unwrap();
        assert!(changed.contains("gen: cached") && changed.contains("labels: cached"), "{changed}");
        for stage in ["train", "eval", "replay", "report"] {
            assert!(changed.contains(&format!("{stage}: wrote")), "{changed}");
        }

        // a changed input reruns the stage that reads it
        let labels = out.join("labels.tsv");
        let mut bytes = fs::read(&labels).unwrap();
        bytes.extend_from_slice(b"#edited\n");
        fs::write(&labels, bytes).unwrap();
        let edited = ltvrank(&["train", "--config", &conf, "--set", "train.epochs=2"]).unwrap();
        assert!(edited.contains("train: wrote"), "{edited}");
    }

    #[test]
    fn seeds_give_distinct_logs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for (dir, seed) in [(&a, "1"), (&b, "2")] {
            let conf = with_config(dir.path(), TINY);
            ltvrank(&["gen", "--config", &conf, "--seed", seed]).unwrap();
        }
        let read = |d: &tempfile::TempDir| fs::read(d.path().join("ltvrank-out/dataset.tsv")).unwrap();
        assert_ne!(read(&a), read(&b));
    }
}
