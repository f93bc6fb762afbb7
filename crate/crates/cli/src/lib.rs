//! The `deferbench` command line: dataset generation, full benchmark runs,
//! SVG reports, standalone corruption and metadata inspection.

pub mod report;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use deferbench::checkpoint::ParamFile;
use deferbench::config::{read_dataset_file, DatasetSource, RunConfig};
use deferbench::data::{corrupt, write_dfd, CorruptionKind, CorruptionSpec, Dataset, SplitTag};
use deferbench::pipelines::{read_manifest, save_bundle, Method};
use deferbench::rng::derive_seed;
use deferbench::sweep::{run_plan, write_classification_csv, write_results_csv, TrainedModel};
use deferbench::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "deferbench", version, about = "Deferral benchmark: learned deferral against uncertainty-based deferral")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory. Must exist.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides the configured global seed (and the synthetic data seed).
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads for training and evaluation.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the configured dataset, split it and write dataset.dfd plus summary.txt.
    Generate,
    /// Train and evaluate the whole plan.
    Run,
    /// Render one SVG per condition from a results CSV.
    Report {
        /// results.csv written by `run`.
        results: PathBuf,
    },
    /// Corrupt a dataset file and write corrupted.dfd.
    Corrupt {
        /// DFD1 or CSV dataset.
        input: PathBuf,
        #[arg(long, value_parser = parse_kind)]
        kind: CorruptionKind,
        #[arg(long)]
        level: u8,
    },
    /// Print metadata of a dataset, a parameter file or a model bundle.
    Inspect { path: PathBuf },
}

fn parse_kind(s: &str) -> Result<CorruptionKind, String> {
    match s {
        "noise" => Ok(CorruptionKind::Noise),
        "blur" => Ok(CorruptionKind::Blur),
        _ => Err(format!("unknown corruption kind '{s}' (noise or blur)")),
    }
}

/// A command failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Usage(_) | Error::Parse { .. } | Error::Empty(_) | Error::Domain(_) => EXIT_USAGE,
            Error::UnsupportedCorruption(_) | Error::Format(_) | Error::InputShape(_) | Error::Label(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        Self { code, message: e.to_string() }
    }
}

type CmdResult = Result<String, Failure>;

/// Runs a parsed command line and returns its exit code; messages go to
/// stdout and errors to stderr.
pub fn execute(cli: Cli) -> i32 {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return EXIT_USAGE;
        }
        // Fails only if a pool already exists, as in repeated in-process calls.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match dispatch(&cli) {
        Ok(message) => {
            print!("{message}");
            EXIT_OK
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Generate => cmd_generate(&resolve_config(cli)?, &output_dir(cli, None)?),
        Command::Run => {
            let config = resolve_config(cli)?;
            let out = output_dir(cli, config.output_dir.as_deref())?;
            cmd_run(&config, &out)
        }
        Command::Report { results } => cmd_report(results, &output_dir(cli, None)?),
        Command::Corrupt { input, kind, level } => {
            let config = resolve_config(cli)?;
            cmd_corrupt(&config, input, *kind, *level, &output_dir(cli, None)?)
        }
        Command::Inspect { path } => cmd_inspect(path),
    }
}

/// Loads the configuration and applies the `--seed` override.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        if let DatasetSource::Synthetic(spec) = &mut config.dataset {
            spec.seed = seed;
        }
    }
    Ok(config)
}

fn output_dir(cli: &Cli, configured: Option<&Path>) -> Result<PathBuf, Failure> {
    let dir = cli
        .out
        .clone()
        .or_else(|| configured.map(Path::to_path_buf))
        .ok_or_else(|| Failure::usage("no output directory: pass --out DIR"))?;
    if !dir.is_dir() {
        return Err(Failure::usage(format!("output directory {} does not exist", dir.display())));
    }
    Ok(dir)
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_FAILURE, message: format!("{}: {e}", path.display()) }
}

/// Human-readable counts, prevalence and split sizes.
pub fn dataset_summary(data: &Dataset) -> String {
    let mut s = String::new();
    let n = data.len();
    let pos = data.positives();
    let _ = writeln!(s, "samples: {n}");
    let _ = writeln!(s, "features: {}", data.dim());
    if let Some(shape) = data.spatial_shape() {
        let _ = writeln!(s, "spatial: {}x{}x{}", shape.height, shape.width, shape.channels);
    }
    let _ = writeln!(s, "positives: {pos}");
    let _ = writeln!(s, "negatives: {}", n - pos);
    let prevalence = if n == 0 { 0.0 } else { pos as f64 / n as f64 };
    let _ = writeln!(s, "prevalence: {:.2}%", 100.0 * prevalence);
    if data.splits().is_some() {
        for tag in SplitTag::ALL {
            if let Ok(idx) = data.indices(tag) {
                let p = idx.iter().filter(|&&i| data.labels()[i] == 1).count();
                let _ = writeln!(s, "split {}: {} samples, {p} positive", format!("{tag:?}").to_lowercase(), idx.len());
            }
        }
    }
    if !data.note().is_empty() {
        let _ = writeln!(s, "note: {}", data.note());
    }
    s
}

pub fn cmd_generate(config: &RunConfig, out: &Path) -> CmdResult {
    config.validate()?;
    let data = config.load_dataset()?;
    let path = out.join("dataset.dfd");
    write_dfd(&data, &path)?;
    let summary = dataset_summary(&data);
    fs::write(out.join("summary.txt"), &summary).map_err(|e| io_failure(out, e))?;
    Ok(format!("wrote {}\n{summary}", path.display()))
}

fn bundle_name(t: &TrainedModel) -> String {
    match t.cost {
        None => t.method.name().to_string(),
        Some(c) => {
            let kind = if t.method == Method::LearnedOneStage { "alpha" } else { "beta" };
            format!("{}_{kind}_{c}", t.method.name())
        }
    }
}

/// Writes results.csv, classification.csv, resolved_config.toml, notes.txt
/// and model bundles. Exit code 1 when any model failed to train.
pub fn cmd_run(config: &RunConfig, out: &Path) -> CmdResult {
    config.validate()?;
    fs::write(out.join("resolved_config.toml"), config.to_canonical_toml()).map_err(|e| io_failure(out, e))?;
    let data = config.load_dataset()?;
    let output = run_plan(&data, &config.sweep, &config.model, &config.corruption, config.seed)?;

    let results = out.join("results.csv");
    write_results_csv(&output.rows, fs::File::create(&results).map_err(|e| io_failure(&results, e))?)?;
    let classification = out.join("classification.csv");
    write_classification_csv(
        &output.classification,
        fs::File::create(&classification).map_err(|e| io_failure(&classification, e))?,
    )?;
    let mut notes = output.notes.join("\n");
    if !notes.is_empty() {
        notes.push('\n');
    }
    fs::write(out.join("notes.txt"), &notes).map_err(|e| io_failure(out, e))?;
    for t in &output.models {
        if let Ok(model) = &t.model {
            let dir = out.join("models").join(format!("seed_{}", t.seed)).join(bundle_name(t));
            save_bundle(model, &dir)?;
        }
    }
    let summary = format!(
        "wrote {} ({} rows) and {} ({} rows)\n",
        results.display(),
        output.rows.len(),
        classification.display(),
        output.classification.len()
    );
    if output.any_failed() {
        return Err(Failure { code: EXIT_FAILURE, message: format!("{summary}some models failed to train:\n{notes}") });
    }
    Ok(summary)
}

pub fn cmd_report(results: &Path, out: &Path) -> CmdResult {
    let written = report::write_report(results, out)?;
    let mut s = String::new();
    for p in written {
        let _ = writeln!(s, "wrote {}", p.display());
    }
    Ok(s)
}

pub fn cmd_corrupt(config: &RunConfig, input: &Path, kind: CorruptionKind, level: u8, out: &Path) -> CmdResult {
    let data = read_dataset_file(input)?;
    let spec = CorruptionSpec::new(kind, level, &config.corruption)?;
    // Same noise stream as the corrupted test sets of `run`.
    let corrupted = corrupt(&data, spec, derive_seed(config.seed, &[0xC0, kind as u64]))?;
    let path = out.join("corrupted.dfd");
    write_dfd(&corrupted, &path)?;
    Ok(format!("wrote {} ({} level {level}, parameter {})\n", path.display(), kind.name(), spec.parameter))
}

pub fn cmd_inspect(path: &Path) -> CmdResult {
    if path.is_dir() {
        let mut s = format!("model bundle {}\n", path.display());
        for (k, v) in read_manifest(path)? {
            let _ = writeln!(s, "{k}: {v}");
        }
        return Ok(s);
    }
    let mut magic = [0u8; 4];
    let bytes = fs::read(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let n = bytes.len().min(4);
    magic[..n].copy_from_slice(&bytes[..n]);
    if &magic == deferbench::checkpoint::DFB_MAGIC {
        let file = ParamFile::decode(&bytes)?;
        let mut s = format!("parameter file {}\nnetwork: {}\nparameters: {}\n", path.display(), file.config, file.params.len());
        for sec in &file.sections {
            let _ = writeln!(s, "section {}: {}x{}", sec.name, sec.rows, sec.cols);
        }
        return Ok(s);
    }
    let data = read_dataset_file(path)?;
    Ok(format!("dataset {}\n{}", path.display(), dataset_summary(&data)))
}
