//! `flowplan`: path extraction, coverage, training, generation and evaluation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowplan::corpus::{
    act_distribution, load_corpus, save_corpus, split_flowchart_setting, split_uncovered_paths, FlowchartSetting,
    LoadOptions, SplitConfig,
};
use flowplan::evalmetrics::{report, Granularity, ReportOptions, WordVectors};
use flowplan::flowgraph::{coverage_stats, enumerate_paths, load_flowcharts, path_for_dialogue};
use flowplan::synthesis::{augment, GenerationConfig};
use flowplan::nn::Precision;
use flowplan::toy::{make_toy, toy_model_config};
use flowplan::training::{append_metrics, train, write_atomic, Checkpoint, TrainConfig};
use flowplan::{Corpus, CoverageReport, Error, Flowchart};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "flowplan", version, about = "Flowchart-grounded dialogue synthesis with hierarchical planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ChartArgs {
    /// A single flowchart document.
    #[arg(long)]
    flowchart: Option<PathBuf>,
    /// A directory of flowchart documents.
    #[arg(long)]
    flowcharts: Option<PathBuf>,
}

impl ChartArgs {
    fn path(&self) -> &Path {
        self.flowchart.as_deref().or(self.flowcharts.as_deref()).expect("clap enforces one source")
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Setting {
    In,
    Out,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Dialogue,
    Utterance,
}

#[derive(Subcommand)]
enum Command {
    /// List every root-to-action path, one canonical key per line.
    Paths {
        #[command(flatten)]
        charts: ChartArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report which paths a corpus covers.
    Coverage {
        #[command(flatten)]
        charts: ChartArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a planner and write a checkpoint.
    Train {
        #[command(flatten)]
        charts: ChartArgs,
        #[arg(long)]
        corpus: PathBuf,
        /// Training configuration (TOML or JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss log; defaults to `<out>.metrics.jsonl`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Generate synthetic dialogues for every path.
    Generate {
        #[command(flatten)]
        charts: ChartArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Base corpus whose size sets the number of generated dialogues.
        #[arg(long, required_unless_present = "base_size", conflicts_with = "base_size")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        base_size: Option<usize>,
        #[arg(long)]
        factor: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Argmax acts and tokens with latents at their prior means.
        #[arg(long, conflicts_with = "config")]
        greedy: bool,
        /// Generation configuration (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Run manifest; defaults to `<out>.manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score candidate dialogues against references.
    Evaluate {
        #[command(flatten)]
        charts: ChartArgs,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Word-vector file for the embedding metrics.
        #[arg(long)]
        vectors: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "dialogue")]
        granularity: GranularityArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a corpus, or split it for the evaluation settings.
    Inspect {
        #[command(flatten)]
        charts: ChartArgs,
        #[arg(long)]
        corpus: PathBuf,
        /// Split by flowchart: in-flowchart or out-of-flowchart.
        #[arg(long, value_enum, conflicts_with = "split_uncovered")]
        setting: Option<Setting>,
        /// Split by path with this fraction of paths kept for training.
        #[arg(long)]
        split_uncovered: Option<f64>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output directory for `train.jsonl` and `test.jsonl` when splitting.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded toy flowchart, corpus and training config.
    #[command(hide = true)]
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        dialogues: usize,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
    },
}

/// An error carrying its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let missing = matches!(&e, Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound);
        Failure { code: if e.is_validation() || missing { 1 } else { 2 }, message: e.to_string() }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

type CliResult<T = ()> = Result<T, Failure>;

fn require_file(path: &Path) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(invalid(format!("no such file or directory: {}", path.display())))
    }
}

/// Refuses to write over any input.
fn guard_output(out: &Path, inputs: &[&Path]) -> CliResult {
    let Ok(out) = out.canonicalize() else { return Ok(()) };
    for input in inputs {
        if input.canonicalize().is_ok_and(|p| p == out) {
            return Err(invalid(format!("output {} would overwrite an input", out.display())));
        }
    }
    Ok(())
}

fn read_charts(args: &ChartArgs) -> CliResult<BTreeMap<String, Flowchart>> {
    require_file(args.path())?;
    let charts = load_flowcharts(args.path(), false)?;
    if charts.is_empty() {
        return Err(invalid(format!("no flowcharts found in {}", args.path().display())));
    }
    Ok(charts)
}

fn read_corpus(path: &Path, charts: &BTreeMap<String, Flowchart>) -> CliResult<Corpus> {
    require_file(path)?;
    let file = File::open(path).map_err(Error::from)?;
    load_corpus(BufReader::new(file), charts, &LoadOptions::default())
        .map_err(|e| Failure { message: format!("{}: {}", path.display(), e), ..Failure::from(e) })
}

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => std::io::stdout().write_all(text.as_bytes()).map_err(Error::from)?,
    }
    Ok(())
}

fn corpus_bytes(corpus: &Corpus) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    save_corpus(corpus, &mut buf)?;
    Ok(buf)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(value).map_err(Error::from)? + "\n")
}

#[derive(Serialize)]
struct CorpusCoverage {
    total_paths: usize,
    covered_paths: usize,
    uncovered_fraction: f64,
    charts: Vec<CoverageReport>,
}

fn corpus_coverage(corpus: &Corpus, charts: &BTreeMap<String, Flowchart>) -> CliResult<CorpusCoverage> {
    let mut reports = Vec::new();
    for (id, chart) in charts {
        let seen = corpus
            .dialogues
            .iter()
            .filter(|d| &d.flowchart_id == id)
            .map(|d| path_for_dialogue(d, chart))
            .collect::<Result<Vec<_>, _>>()?;
        reports.push(coverage_stats(&seen, chart)?);
    }
    let total: usize = reports.iter().map(|r| r.total_paths).sum();
    let covered: usize = reports.iter().map(|r| r.covered_paths).sum();
    Ok(CorpusCoverage {
        total_paths: total,
        covered_paths: covered,
        uncovered_fraction: 1.0 - covered as f64 / total as f64,
        charts: reports,
    })
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Paths { charts, out } => {
            let charts = read_charts(&charts)?;
            let single = charts.len() == 1;
            let mut text = String::new();
            let mut count = 0;
            for (id, chart) in &charts {
                for path in enumerate_paths(chart) {
                    count += 1;
                    if single {
                        text.push_str(&format!("{}\n", path.key()));
                    } else {
                        text.push_str(&format!("{id}::{}\n", path.key()));
                    }
                }
            }
            emit(out.as_deref(), &text)?;
            eprintln!("{count} paths in {} flowchart(s)", charts.len());
        }
        Command::Coverage { charts, corpus, out } => {
            let charts = read_charts(&charts)?;
            let corpus = read_corpus(&corpus, &charts)?;
            let cov = corpus_coverage(&corpus, &charts)?;
            eprintln!(
                "{} of {} paths covered ({:.1}% uncovered)",
                cov.covered_paths,
                cov.total_paths,
                100.0 * cov.uncovered_fraction
            );
            emit(out.as_deref(), &to_json(&cov)?)?;
        }
        Command::Train { charts: chart_args, corpus: corpus_path, config, seed, out, metrics } => {
            let charts = read_charts(&chart_args)?;
            let corpus = read_corpus(&corpus_path, &charts)?;
            let mut config = match &config {
                Some(path) => {
                    require_file(path)?;
                    TrainConfig::from_file(path)?
                }
                None => TrainConfig::default(),
            };
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let metrics = metrics.unwrap_or_else(|| with_suffix(&out, ".metrics.jsonl"));
            guard_output(&out, &[chart_args.path(), &corpus_path])?;
            guard_output(&metrics, &[chart_args.path(), &corpus_path])?;
            if metrics.exists() {
                std::fs::remove_file(&metrics).map_err(Error::from)?;
            }
            log::info!("training on {} dialogues for {} epochs", corpus.len(), config.epochs);
            let mut log_error = None;
            let checkpoint = train(&corpus, &charts, &config, |r| {
                log::info!("epoch {:>3}  loss {:.4}", r.epoch, r.total);
                if let Err(e) = append_metrics(&metrics, r) {
                    log_error.get_or_insert(e);
                }
            })?;
            if let Some(e) = log_error {
                return Err(e.into());
            }
            checkpoint.save(&out)?;
            let last = checkpoint.history.last().map(|r| r.total).unwrap_or(f64::NAN);
            eprintln!("wrote {} (final loss {last:.4}, hash {})", out.display(), checkpoint.hash()?);
        }
        Command::Generate { charts: chart_args, checkpoint, corpus, base_size, factor, seed, greedy, config, out, manifest } => {
            let charts = read_charts(&chart_args)?;
            require_file(&checkpoint)?;
            let mut gen = match &config {
                Some(path) => {
                    require_file(path)?;
                    let text = std::fs::read_to_string(path).map_err(Error::from)?;
                    serde_json::from_str::<GenerationConfig>(&text)
                        .map_err(|e| invalid(format!("{}: {e}", path.display())))?
                }
                None if greedy => GenerationConfig::greedy(seed),
                None => GenerationConfig::sampling(seed),
            };
            gen.seed = seed;
            if let Some(f) = factor {
                gen.factor = f;
            }
            let base = match (&corpus, base_size) {
                (Some(path), _) => read_corpus(path, &charts)?.len(),
                (None, Some(n)) => n,
                (None, None) => unreachable!("clap requires one of them"),
            };
            let manifest_path = manifest.unwrap_or_else(|| with_suffix(&out, ".manifest.json"));
            let mut inputs = vec![chart_args.path(), checkpoint.as_path()];
            inputs.extend(corpus.as_deref());
            guard_output(&out, &inputs)?;
            guard_output(&manifest_path, &inputs)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let hash = ck.hash()?;
            let (syn, run) = augment(&ck.model, &hash, &charts, base, &gen)?;
            write_atomic(&out, &corpus_bytes(&syn)?)?;
            write_atomic(&manifest_path, to_json(&run)?.as_bytes())?;
            eprintln!(
                "wrote {} synthetic dialogues over {} paths to {} ({} with fallback utterances)",
                syn.len(),
                run.per_path.len(),
                out.display(),
                run.fallback_dialogues
            );
        }
        Command::Evaluate { charts, candidates, references, vectors, granularity, seed, out } => {
            let charts = read_charts(&charts)?;
            let cand = read_corpus(&candidates, &charts)?;
            let refs = read_corpus(&references, &charts)?;
            let wv = match &vectors {
                Some(path) => {
                    require_file(path)?;
                    Some(WordVectors::from_reader(BufReader::new(File::open(path).map_err(Error::from)?))?)
                }
                None => None,
            };
            let options = ReportOptions {
                granularity: match granularity {
                    GranularityArg::Dialogue => Granularity::Dialogue,
                    GranularityArg::Utterance => Granularity::Utterance,
                },
                seed,
                ..ReportOptions::default()
            };
            let r = report(&cand, &refs, wv.as_ref(), &options)?;
            eprint!("{}", r.to_table());
            emit(out.as_deref(), &format!("{}\n", r.to_json_line()?))?;
        }
        Command::Inspect { charts: chart_args, corpus: corpus_path, setting, split_uncovered, seed, out } => {
            let charts = read_charts(&chart_args)?;
            let corpus = read_corpus(&corpus_path, &charts)?;
            let split = match (setting, split_uncovered) {
                (Some(s), _) => {
                    let config = SplitConfig { seed, ..SplitConfig::default() };
                    let s = match s {
                        Setting::In => FlowchartSetting::InFlowchart,
                        Setting::Out => FlowchartSetting::OutOfFlowchart,
                    };
                    Some(split_flowchart_setting(&corpus, s, &config)?)
                }
                (None, Some(fraction)) => Some(split_uncovered_paths(&corpus, &charts, fraction, seed)?),
                (None, None) => None,
            };
            match split {
                Some((train, test)) => {
                    let dir = out.ok_or_else(|| invalid("splitting requires --out <directory>"))?;
                    std::fs::create_dir_all(&dir).map_err(Error::from)?;
                    let (train_path, test_path) = (dir.join("train.jsonl"), dir.join("test.jsonl"));
                    guard_output(&train_path, &[&corpus_path])?;
                    guard_output(&test_path, &[&corpus_path])?;
                    write_atomic(&train_path, &corpus_bytes(&train)?)?;
                    write_atomic(&test_path, &corpus_bytes(&test)?)?;
                    eprintln!("train {} / test {} dialogues written to {}", train.len(), test.len(), dir.display());
                }
                None => {
                    #[derive(Serialize)]
                    struct Summary {
                        dialogues: usize,
                        utterances: usize,
                        flowcharts: Vec<String>,
                        act_distribution: BTreeMap<String, f64>,
                        coverage: CorpusCoverage,
                    }
                    let summary = Summary {
                        dialogues: corpus.len(),
                        utterances: corpus.dialogues.iter().map(|d| d.utterances().count()).sum(),
                        flowcharts: corpus.flowchart_ids.iter().cloned().collect(),
                        act_distribution: act_distribution(&corpus)?
                            .into_iter()
                            .map(|(a, p)| (a.as_str().to_string(), p))
                            .collect(),
                        coverage: corpus_coverage(&corpus, &charts)?,
                    };
                    emit(out.as_deref(), &to_json(&summary)?)?;
                }
            }
        }
        Command::MakeToy { out, seed, dialogues, epochs } => {
            let (chart, corpus) = make_toy(seed, dialogues);
            let charts_dir = out.join("flowcharts");
            std::fs::create_dir_all(&charts_dir).map_err(Error::from)?;
            write_atomic(&charts_dir.join(format!("{}.json", chart.id())), chart.to_document().as_bytes())?;
            write_atomic(&out.join("corpus.jsonl"), &corpus_bytes(&corpus)?)?;
            let config = TrainConfig { epochs, seed, model: toy_model_config(Precision::F32), ..TrainConfig::default() };
            write_atomic(&out.join("train.json"), to_json(&config)?.as_bytes())?;
            eprintln!("wrote toy chart, {} dialogues and a training config to {}", corpus.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLOWPLAN_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
