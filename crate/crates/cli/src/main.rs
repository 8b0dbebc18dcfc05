//! `smtl`: run sequential multi-task benchmarks and score their results.
//!
//! ```sh
//! smtl run --config runs/rs.toml
//! smtl score --results results.json --metric ll --plot --out board/
//! smtl reproduce-table2
//! smtl synth --out data/shapes --classes 4 --per-class 20
//! ```
//!
//! Exit status: 0 success, 1 invalid configuration or input, 2 dataset
//! missing, 3 training failure, 4 reproduced cells outside tolerance.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use smtl_core::config::RunConfigFile;
use smtl_core::data::split::write_split_file;
use smtl_core::data::{synth_task, Difficulty, SynthSpec};
use smtl_core::harness::{run_sequence, verify_non_interference, BenchmarkRun, InterferenceReport};
use smtl_core::model::TaskKind;
use smtl_core::scoring::io::{parse_references, parse_results, references_from_results};
use smtl_core::scoring::published::{reproduce_table2, PublishedTables};
use smtl_core::scoring::render::{render_csv, render_reproduction, render_text};
use smtl_core::scoring::{leaderboard, plot::render_svg, Metric, ScoringConfig};
use smtl_core::Error;

#[derive(Parser, Debug)]
#[command(name = "smtl", version, about = "Sequential multi-task learning benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a strategy over the configured task sequence.
    Run(RunArgs),
    /// Score results files and write leaderboards.
    Score(ScoreArgs),
    /// Recompute the published score table from the shipped accuracy table.
    #[command(name = "reproduce-table2")]
    ReproduceTable2 {
        /// Directory for the report files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with a manifest and a holdout split.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Omit wall-clock timings so the record is byte-stable.
    #[arg(long)]
    deterministic: bool,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Avga,
    Ds,
    Revds,
    Ll,
    All,
}

impl MetricArg {
    fn metrics(self) -> Vec<Metric> {
        match self {
            MetricArg::Avga => vec![Metric::AvgA],
            MetricArg::Ds => vec![Metric::Ds],
            MetricArg::Revds => vec![Metric::RevDs],
            MetricArg::Ll => vec![Metric::Ll],
            MetricArg::All => Metric::ALL.to_vec(),
        }
    }
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    results: PathBuf,
    /// Reference accuracies; derived from the FT and FE rows when omitted.
    #[arg(long)]
    refs: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MetricArg::All)]
    metric: MetricArg,
    /// Minimal-accuracy multiplier for every task.
    #[arg(long)]
    gamma: Option<f64>,
    /// Base of the memory penalty.
    #[arg(long)]
    lambda: Option<f64>,
    /// Also write score-versus-ratio SVG charts.
    #[arg(long)]
    plot: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Classification,
    Pose,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DifficultyArg {
    Easy,
    Hard,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 24)]
    size: usize,
    #[arg(long, value_enum, default_value_t = KindArg::Classification)]
    kind: KindArg,
    #[arg(long, value_enum, default_value_t = DifficultyArg::Easy)]
    difficulty: DifficultyArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of samples listed in `test.txt`.
    #[arg(long, default_value_t = 0.3)]
    test_fraction: f64,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, e: impl fmt::Display) -> Self {
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Score(a) => cmd_score(&a),
        Command::ReproduceTable2 { out } => cmd_reproduce(out.as_deref()),
        Command::Synth(a) => cmd_synth(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn write_atomic(path: &Path, contents: &str) -> CmdResult {
    let io = |e: std::io::Error| Failure::new(1, format!("{}: {e}", path.display()));
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, contents).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))
}

fn cmd_run(a: &RunArgs) -> CmdResult {
    let mut cfg = RunConfigFile::load(&a.config).map_err(|e| Failure::new(1, e))?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if a.deterministic {
        cfg.train.deterministic = true;
    }
    let base = a.config.parent().unwrap_or(Path::new("."));
    let out = a.out.clone().unwrap_or_else(|| base.join(&cfg.output_dir));

    let plan = cfg.build_plan(base).map_err(|e| match e {
        Error::Config(_) => Failure::new(1, e),
        _ => Failure::new(2, e),
    })?;
    log::info!(
        "{} on {} over {} tasks",
        plan.strategy.code(),
        plan.setting,
        plan.tasks.len()
    );
    let run = run_sequence(&plan).map_err(|e| Failure::new(3, format!("training failed: {e}")))?;
    let report = verify_non_interference(&run);
    if !report.is_clean() {
        log::error!("earlier tasks changed during later training: {report:?}");
    }
    let record = run.to_results_file(cfg.method.as_deref());
    let json = serde_json::to_string_pretty(&record).map_err(|e| Failure::new(3, e))? + "\n";
    let summary = summarize(&run, &report);
    write_atomic(&out.join("run_record.json"), &json)?;
    write_atomic(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn summarize(run: &BenchmarkRun, report: &InterferenceReport) -> String {
    let mut s = format!("strategy {}  setting {}\n", run.strategy.code(), run.setting);
    let width = run.tasks.iter().map(|t| t.task.len()).max().unwrap_or(4).max(4);
    s.push_str(&format!("{:<width$}  {:>8}  {:>8}  {:>12}\n", "task", "accuracy", "ratio", "task bits"));
    for t in &run.tasks {
        s.push_str(&format!(
            "{:<width$}  {:>7.1}%  {:>8.4}  {:>12}\n",
            t.task,
            100.0 * t.accuracy,
            t.cost.ratio,
            t.cost.task_bits
        ));
    }
    let mean = run.tasks.iter().map(|t| t.accuracy).sum::<f64>() / run.tasks.len().max(1) as f64;
    s.push_str(&format!("mean accuracy {:.1}%\n", 100.0 * mean));
    if report.is_clean() {
        s.push_str(&format!(
            "earlier tasks unchanged ({} probe comparisons)\n",
            report.comparisons
        ));
    } else {
        s.push_str(&format!(
            "earlier tasks CHANGED: {} probe violations, shared parameters changed after tasks {:?}\n",
            report.violations.len(),
            report.fingerprint_changes
        ));
    }
    s
}

fn cmd_score(a: &ScoreArgs) -> CmdResult {
    let bad = |e: Error| Failure::new(1, e);
    let results = parse_results(&read(&a.results)?).map_err(bad)?;
    let refs = match &a.refs {
        Some(p) => parse_references(&read(p)?).map_err(bad)?,
        None => references_from_results(&results).map_err(bad)?,
    };
    let mut cfg = ScoringConfig::default();
    if let Some(g) = a.gamma {
        cfg.gamma = g;
    }
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    cfg.validate().map_err(bad)?;

    let mut reports = Vec::new();
    for setting in smtl_core::model::Setting::ALL {
        let rows: Vec<_> = results.iter().filter(|r| r.setting == setting).cloned().collect();
        if rows.is_empty() {
            continue;
        }
        let r = refs
            .iter()
            .find(|r| r.setting == setting)
            .ok_or_else(|| Failure::new(1, format!("no reference accuracies for setting {setting}")))?;
        reports.push(leaderboard(&rows, r, &cfg).map_err(bad)?);
    }

    let metrics = a.metric.metrics();
    let text: String = reports
        .iter()
        .map(|r| render_text(r, &metrics))
        .collect::<Vec<_>>()
        .join("\n");
    write_atomic(&a.out.join("leaderboard.txt"), &text)?;
    write_atomic(&a.out.join("leaderboard.csv"), &render_csv(&reports, &metrics).map_err(bad)?)?;
    if a.plot {
        for &m in &metrics {
            write_atomic(&a.out.join(format!("{}.svg", m.key())), &render_svg(&reports, m))?;
        }
    }
    print!("{text}");
    Ok(())
}

fn cmd_reproduce(out: Option<&Path>) -> CmdResult {
    let rep = reproduce_table2(&PublishedTables::load(), &ScoringConfig::default()).map_err(|e| Failure::new(1, e))?;
    let text = render_reproduction(&rep);
    if let Some(dir) = out {
        write_atomic(&dir.join("reproduction.txt"), &text)?;
        let json = serde_json::to_string_pretty(&rep.cells).map_err(|e| Failure::new(1, e))? + "\n";
        write_atomic(&dir.join("reproduction.json"), &json)?;
    }
    print!("{text}");
    let failed = rep.failures().count();
    if failed > 0 {
        return Err(Failure::new(4, format!("{failed} cells outside tolerance")));
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    if !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
        return Err(Failure::new(1, "--test-fraction must be in (0, 1)"));
    }
    let spec = SynthSpec {
        num_classes: a.classes,
        samples_per_class: a.per_class,
        image_size: a.size,
        task_kind: match a.kind {
            KindArg::Classification => TaskKind::Classification,
            KindArg::Pose => TaskKind::Pose,
        },
        difficulty: match a.difficulty {
            DifficultyArg::Easy => Difficulty::Easy,
            DifficultyArg::Hard => Difficulty::Hard,
        },
    };
    let data = synth_task(a.seed, &spec).map_err(|e| Failure::new(1, e))?;
    let manifest = data.write_to(&a.out).map_err(|e| Failure::new(1, e))?;
    let ids: Vec<String> = data.manifest.records.iter().map(|r| r.id.clone()).collect();
    let n_test = ((ids.len() as f64 * a.test_fraction).round() as usize).clamp(1, ids.len().saturating_sub(1).max(1));
    let (train, test) = ids.split_at(ids.len() - n_test);
    write_atomic(&a.out.join("train.txt"), &write_split_file(train))?;
    write_atomic(&a.out.join("test.txt"), &write_split_file(test))?;
    println!("{} samples written to {}", ids.len(), manifest.display());
    Ok(())
}
