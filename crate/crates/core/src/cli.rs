//! Command-line pipelines: fit, score, rank, simulate and export-plots.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{BirdError, Result};
use crate::fit::{fit_bird, select_k, BirdModel, FitLimits, KCandidate};
use crate::ingest::{
    build_histograms, choose_base, error_report_path, parse_ratings_lenient, write_error_report,
    BucketingConfig, UserHistogram, MIN_GAP_SECONDS,
};
use crate::math::FixedPointLimits;
use crate::nest::{
    group_distributions, nest_scores, posterior_mean_rating_draws, write_draws_csv,
    write_group_distributions_csv, write_scores_csv, write_scores_json, NestScores, PLOT_DRAWS,
};
use crate::synth::{generate_events, write_events_csv, write_labels_csv, SynthSpec};

#[derive(Debug, Parser)]
#[command(name = "birdnest", version, about = "Rating-fraud detection with Dirichlet-multinomial user mixtures")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a mixture to a ratings CSV and save the model.
    Fit(FitCmd),
    /// Score users of a ratings CSV against a saved model.
    Score(ScoreCmd),
    /// Fit and score in one pass.
    Rank(RankCmd),
    /// Generate a synthetic ratings CSV from a JSON spec.
    Simulate(SimulateCmd),
    /// Write plot data (averaged histograms, posterior mean-rating draws).
    ExportPlots(ExportCmd),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Ratings CSV: user_id,product_id,stars,unix_timestamp_seconds.
    #[arg(long)]
    pub input: PathBuf,
    /// Number of star levels.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(2..=1000))]
    pub stars: u32,
    /// Target number of gap buckets (one more is used to include the largest gap).
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..=1000))]
    pub buckets: u64,
    /// Fixed log base for gap buckets instead of one derived from the
    /// largest gap (which leaves that gap alone in the top bucket).
    #[arg(long, value_parser = parse_base)]
    pub base: Option<f64>,
}

fn parse_base(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(b) if b.is_finite() && b > 1.0 => Ok(b),
        _ => Err(format!("base must be a number greater than 1, got {s}")),
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Fixed number of clusters; overrides the BIC search.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: Option<u64>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub k_min: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub k_max: u64,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_iters: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub restarts: u64,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Monte Carlo draws per user and side.
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
}

#[derive(Debug, Args)]
pub struct FitCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model JSON to write.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreCmd {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scores file; a `.json` extension selects JSON, anything else CSV.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct RankCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also save the fitted model here.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateCmd {
    /// Synthetic population spec (JSON).
    #[arg(long)]
    pub input: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Events CSV; ground truth goes to `<output>.labels.csv`.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportCmd {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Size of the flagged group.
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub top: u64,
    /// Comma-separated users for posterior draws (default: the three highest ranked).
    #[arg(long, value_delimiter = ',')]
    pub users: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,
}

/// Model file: the fitted mixture plus what is needed to rebuild
/// histograms that match it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub stars: u32,
    pub bucketing: BucketingConfig,
    #[serde(flatten)]
    pub model: BirdModel,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<KCandidate>,
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if file.model.rating_dim() != file.stars as usize
            || file.model.temporal_dim() != file.bucketing.num_buckets
        {
            return Err(BirdError::InvalidArgument(
                "model dimensions disagree with its stars/bucketing".into(),
            ));
        }
        file.bucketing.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

/// Every setting that influenced a run, written next to its outputs.
#[derive(Debug, Default, Serialize)]
pub struct ResolvedConfig {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub threads: Option<u16>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    pub output: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stars: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_buckets: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bucketing: Option<BucketingConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_range: Option<(u64, u64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limits: Option<FitLimits>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub users: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<SynthSpec>,
}

fn echo_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        eprintln!("seed {s}");
        s
    })
}

impl FitArgs {
    fn limits(&self) -> Result<FitLimits> {
        if self.tol.is_nan() {
            return Err(BirdError::InvalidArgument("--tol must be a number".into()));
        }
        Ok(FitLimits {
            max_iters: self.max_iters as usize,
            tol: self.tol,
            restarts: self.restarts as usize,
            fixed_point: FixedPointLimits::default(),
        })
    }

    fn k_range(&self) -> Result<(usize, usize)> {
        match self.k {
            Some(k) => Ok((k as usize, k as usize)),
            None if self.k_min <= self.k_max => Ok((self.k_min as usize, self.k_max as usize)),
            None => Err(BirdError::InvalidArgument(format!(
                "--k-min {} exceeds --k-max {}",
                self.k_min, self.k_max
            ))),
        }
    }
}

fn read_events(input: &Path, stars: u32) -> Result<Vec<crate::ingest::RatingEvent>> {
    let parsed = parse_ratings_lenient(BufReader::new(File::open(input)?), stars)?;
    if !parsed.rejected.is_empty() {
        let report = error_report_path(input);
        write_error_report(&report, &parsed.rejected)?;
        log::warn!(
            "{} malformed rows skipped; see {}",
            parsed.rejected.len(),
            report.display()
        );
    }
    parsed.enforce_malformed_limit()?;
    Ok(parsed.events)
}

/// Parse, choose the gap bucketing from the data, and histogram.
fn load_data(data: &DataArgs) -> Result<(Vec<UserHistogram>, BucketingConfig)> {
    let events = read_events(&data.input, data.stars)?;
    let cfg = match data.base {
        Some(base) => BucketingConfig::new(base, data.buckets as usize + 1, MIN_GAP_SECONDS)?,
        None => choose_base(&events, data.buckets as usize)?,
    };
    let hists = build_histograms(&events, &cfg, data.stars)?;
    Ok((hists, cfg))
}

fn fit_model(
    hists: &[UserHistogram],
    fit: &FitArgs,
    seed: u64,
) -> Result<(BirdModel, Vec<KCandidate>)> {
    let limits = fit.limits()?;
    let (lo, hi) = fit.k_range()?;
    if lo == hi {
        Ok((fit_bird(hists, lo, seed, &limits)?, Vec::new()))
    } else {
        let sel = select_k(hists, lo, hi.min(hists.len().max(1)).max(lo), seed, &limits)?;
        Ok((sel.model, sel.candidates))
    }
}

fn write_scores(path: &Path, scores: &NestScores) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        write_scores_json(w, scores)
    } else {
        write_scores_csv(w, &scores.records)
    }
}

fn fit_config(cmd: &'static str, data: &DataArgs, fit: &FitArgs, seed: u64, threads: Option<u16>) -> Result<ResolvedConfig> {
    Ok(ResolvedConfig {
        command: cmd,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        threads,
        input: Some(data.input.clone()),
        stars: Some(data.stars),
        target_buckets: Some(data.buckets),
        k: fit.k,
        k_range: fit.k.is_none().then_some((fit.k_min, fit.k_max)),
        limits: Some(fit.limits()?),
        ..Default::default()
    })
}

fn run_fit(cmd: &FitCmd, threads: Option<u16>) -> Result<()> {
    let seed = resolve_seed(cmd.seed);
    let mut config = fit_config("fit", &cmd.data, &cmd.fit, seed, threads)?;
    let (hists, bucketing) = load_data(&cmd.data)?;
    let (model, candidates) = fit_model(&hists, &cmd.fit, seed)?;
    ModelFile {
        stars: cmd.data.stars,
        bucketing,
        model,
        candidates,
    }
    .save(&cmd.output)?;
    config.bucketing = Some(bucketing);
    config.output = cmd.output.clone();
    write_json(&echo_path(&cmd.output), &config)
}

fn load_with_model(input: &Path, model: &ModelFile) -> Result<Vec<UserHistogram>> {
    let events = read_events(input, model.stars)?;
    build_histograms(&events, &model.bucketing, model.stars)
}

fn run_score(cmd: &ScoreCmd, threads: Option<u16>) -> Result<()> {
    let seed = resolve_seed(cmd.seed);
    let model = ModelFile::load(&cmd.model)?;
    let hists = load_with_model(&cmd.input, &model)?;
    let scores = nest_scores(&model.model, &hists, cmd.score.samples as usize, seed)?;
    write_scores(&cmd.output, &scores)?;
    let config = ResolvedConfig {
        command: "score",
        version: env!("CARGO_PKG_VERSION"),
        seed,
        threads,
        input: Some(cmd.input.clone()),
        model: Some(cmd.model.clone()),
        output: cmd.output.clone(),
        stars: Some(model.stars),
        bucketing: Some(model.bucketing),
        samples: Some(cmd.score.samples),
        ..Default::default()
    };
    write_json(&echo_path(&cmd.output), &config)
}

fn run_rank(cmd: &RankCmd, threads: Option<u16>) -> Result<()> {
    let seed = resolve_seed(cmd.seed);
    let mut config = fit_config("rank", &cmd.data, &cmd.fit, seed, threads)?;
    let (hists, bucketing) = load_data(&cmd.data)?;
    let (model, candidates) = fit_model(&hists, &cmd.fit, seed)?;
    let scores = nest_scores(&model, &hists, cmd.score.samples as usize, seed)?;
    write_scores(&cmd.output, &scores)?;
    if let Some(path) = &cmd.model {
        ModelFile {
            stars: cmd.data.stars,
            bucketing,
            model,
            candidates,
        }
        .save(path)?;
    }
    config.bucketing = Some(bucketing);
    config.samples = Some(cmd.score.samples);
    config.model = cmd.model.clone();
    config.output = cmd.output.clone();
    write_json(&echo_path(&cmd.output), &config)
}

fn labels_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".labels.csv");
    PathBuf::from(s)
}

fn run_simulate(cmd: &SimulateCmd, threads: Option<u16>) -> Result<()> {
    let mut spec: SynthSpec = serde_json::from_reader(BufReader::new(File::open(&cmd.input)?))?;
    if let Some(seed) = cmd.seed {
        spec.seed = seed;
    }
    let synth = generate_events(&spec)?;
    write_events_csv(BufWriter::new(File::create(&cmd.output)?), &synth.events)?;
    write_labels_csv(BufWriter::new(File::create(labels_path(&cmd.output))?), &synth.data)?;
    let config = ResolvedConfig {
        command: "simulate",
        version: env!("CARGO_PKG_VERSION"),
        seed: spec.seed,
        threads,
        input: Some(cmd.input.clone()),
        output: cmd.output.clone(),
        bucketing: Some(spec.bucketing),
        spec: Some(spec),
        ..Default::default()
    };
    write_json(&echo_path(&cmd.output), &config)
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn run_export(cmd: &ExportCmd, threads: Option<u16>) -> Result<()> {
    let seed = resolve_seed(cmd.seed);
    let model = ModelFile::load(&cmd.model)?;
    let hists = load_with_model(&cmd.input, &model)?;
    let scores = nest_scores(&model.model, &hists, cmd.score.samples as usize, seed)?;
    fs::create_dir_all(&cmd.output)?;
    write_scores_csv(BufWriter::new(File::create(cmd.output.join("scores.csv"))?), &scores.records)?;
    let groups = group_distributions(&hists, &scores.records, cmd.top as usize)?;
    write_group_distributions_csv(BufWriter::new(File::create(cmd.output.join("groups.csv"))?), &groups)?;

    let users: Vec<String> = if cmd.users.is_empty() {
        scores.records.iter().take(3).map(|r| r.user_id.clone()).collect()
    } else {
        cmd.users.clone()
    };
    let assignments = model.model.resolve_assignments(&hists)?;
    for user in &users {
        let index = hists
            .iter()
            .position(|h| &h.user_id == user)
            .ok_or_else(|| BirdError::InvalidArgument(format!("unknown user {user}")))?;
        let draws = posterior_mean_rating_draws(
            &model.model,
            &hists[index],
            assignments[index],
            PLOT_DRAWS,
            seed,
            index,
        )?;
        let path = cmd.output.join(format!("draws_{}.csv", file_safe(user)));
        write_draws_csv(BufWriter::new(File::create(path)?), &draws)?;
    }
    let config = ResolvedConfig {
        command: "export-plots",
        version: env!("CARGO_PKG_VERSION"),
        seed,
        threads,
        input: Some(cmd.input.clone()),
        model: Some(cmd.model.clone()),
        output: cmd.output.clone(),
        stars: Some(model.stars),
        bucketing: Some(model.bucketing),
        samples: Some(cmd.score.samples),
        top: Some(cmd.top),
        users: Some(users),
        ..Default::default()
    };
    write_json(&cmd.output.join("config.json"), &config)
}

/// Execute a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
            .map_err(|e| BirdError::InvalidArgument(e.to_string()))?;
    }
    match &cli.command {
        Command::Fit(c) => run_fit(c, cli.threads),
        Command::Score(c) => run_score(c, cli.threads),
        Command::Rank(c) => run_rank(c, cli.threads),
        Command::Simulate(c) => run_simulate(c, cli.threads),
        Command::ExportPlots(c) => run_export(c, cli.threads),
    }
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    code: i32,
    message: String,
}

fn report(kind: &str, code: i32, message: String) -> i32 {
    let line = ErrorLine {
        error: kind,
        code,
        message,
    };
    eprintln!("{}", serde_json::to_string(&line).expect("plain strings serialize"));
    code
}

/// Parse arguments, run, and map the outcome to an exit code. Failures are
/// reported as one JSON line on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => return report("usage", 1, e.to_string().trim_end().to_string()),
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let cat = e.category();
            report(cat.as_str(), cat.exit_code(), e.to_string())
        }
    }
}
