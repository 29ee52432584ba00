//! Command-line wiring: configuration merging, subcommand implementations,
//! model persistence and report emission.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_schema, index_corpus, read_jsonl, write_jsonl, RawRecord, DEFAULT_MIN_COUNT,
};
use crate::em::train;
use crate::error::{Error, Result};
use crate::model::{Hyperparams, TrainedModel};
use crate::predict::{kmeans_regions, predict_corpus, score_predictions, Metrics};
use crate::sampler::ConditionalMode;
use crate::synthetic::{forward_sample, separated_scenario, GeneratorConfig, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    JointRatio,
    PaperLiteral,
}

impl From<ModeArg> for ConditionalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::JointRatio => ConditionalMode::JointRatio,
            ModeArg::PaperLiteral => ConditionalMode::PaperLiteral,
        }
    }
}

/// Optional JSON config file; CLI flags take precedence over these, which
/// take precedence over the built-in defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FileConfig {
    pub areas: Option<usize>,
    pub topics: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub delta_tilde: Option<f64>,
    pub lambda: Option<f64>,
    pub samples: Option<usize>,
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    pub em_iters: Option<usize>,
    pub test_sweeps: Option<usize>,
    pub sigma2_floor: Option<f64>,
    pub seed: Option<u64>,
    pub min_count: Option<usize>,
    pub mode: Option<ConditionalMode>,
    pub kmeans_k: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::validation(format!("invalid config file: {e}")))
    }
}

/// Shared training/prediction knobs exposed as flags.
#[derive(Debug, Clone, Args, Default)]
pub struct HyperArgs {
    /// Config file (JSON); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of latent areas (L).
    #[arg(long, short = 'L')]
    pub areas: Option<usize>,
    /// Topics per area (T).
    #[arg(long, short = 'T')]
    pub topics: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub delta_tilde: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Snapshots retained per E-step (S).
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub em_iters: Option<usize>,
    #[arg(long)]
    pub test_sweeps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Vocabulary frequency threshold.
    #[arg(long)]
    pub min_count: Option<usize>,
    /// Area-conditional evaluation mode.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// K for K-means region construction.
    #[arg(long, short = 'K')]
    pub kmeans_k: Option<usize>,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub hyperparams: Hyperparams,
    pub min_count: usize,
    pub mode: ConditionalMode,
    pub kmeans_k: usize,
}

impl RunConfig {
    /// Precedence: CLI flags > config file > defaults (L=30, T=1,
    /// alpha=50/(L*T), other priors 0.01, K=4).
    pub fn resolve(args: &HyperArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let areas = args.areas.or(file.areas).unwrap_or(30);
        let topics = args.topics.or(file.topics).unwrap_or(1);
        let mut hp = Hyperparams::with_dims(areas, topics);
        if let Some(v) = args.alpha.or(file.alpha) {
            hp.alpha = v;
        }
        if let Some(v) = args.beta.or(file.beta) {
            hp.beta = v;
        }
        if let Some(v) = args.gamma.or(file.gamma) {
            hp.gamma = v;
        }
        if let Some(v) = args.delta.or(file.delta) {
            hp.delta = v;
        }
        if let Some(v) = args.delta_tilde.or(file.delta_tilde) {
            hp.delta_tilde = v;
        }
        if let Some(v) = args.lambda.or(file.lambda) {
            hp.lambda = v;
        }
        if let Some(v) = args.samples.or(file.samples) {
            hp.samples = v;
        }
        if let Some(v) = args.burn_in.or(file.burn_in) {
            hp.burn_in = v;
        }
        if let Some(v) = args.thin.or(file.thin) {
            hp.thin = v;
        }
        if let Some(v) = args.em_iters.or(file.em_iters) {
            hp.em_iters = v;
        }
        if let Some(v) = args.test_sweeps.or(file.test_sweeps) {
            hp.test_sweeps = v;
        }
        if let Some(v) = file.sigma2_floor {
            hp.sigma2_floor = v;
        }
        if let Some(v) = args.seed.or(file.seed) {
            hp.seed = v;
        }
        hp.validate()?;
        Ok(RunConfig {
            hyperparams: hp,
            min_count: args
                .min_count
                .or(file.min_count)
                .unwrap_or(DEFAULT_MIN_COUNT),
            mode: args
                .mode
                .map(ConditionalMode::from)
                .or(file.mode)
                .unwrap_or_default(),
            kmeans_k: args.kmeans_k.or(file.kmeans_k).unwrap_or(4),
        })
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "rate",
    about = "Geospatial topic-model location estimation engine"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Train a model from a labeled JSONL corpus.
    Train(TrainArgs),
    /// Predict regions and coordinates for a test JSONL corpus.
    Predict(PredictArgs),
    /// Score predictions against held-out labels.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic corpus with a ground-truth sidecar.
    Generate(GenerateArgs),
    /// Report top words per area from a trained model.
    Topwords(TopwordsArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training JSONL; records must carry region, lat and lon.
    #[arg(long)]
    pub input: PathBuf,
    /// Output model file (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Output training report (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Log-joint trace CSV for plotting.
    #[arg(long)]
    pub trace_csv: Option<PathBuf>,
    /// Replace region labels with K-means cells over training coordinates.
    #[arg(long)]
    pub derive_regions: bool,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Test JSONL.
    #[arg(long)]
    pub input: PathBuf,
    /// Output predictions CSV: doc_id, region, lat, lon.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for the prediction loop; 1 = sequential.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Labeled test JSONL.
    #[arg(long)]
    pub input: PathBuf,
    /// Output metrics JSON.
    #[arg(long)]
    pub output: PathBuf,
    /// Score an external predictions CSV instead of predicting in-process.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output JSONL path.
    #[arg(long)]
    pub output: PathBuf,
    /// Ground-truth sidecar JSON path.
    #[arg(long)]
    pub truth: PathBuf,
    /// Use the well-separated scenario constructor.
    #[arg(long)]
    pub scenario: bool,
    #[arg(long, default_value_t = 1000)]
    pub docs: usize,
    #[arg(long, default_value_t = 12)]
    pub tokens: usize,
    #[arg(long, default_value_t = 500)]
    pub vocab: usize,
    #[arg(long, short = 'L', default_value_t = 5)]
    pub areas: usize,
    #[arg(long, short = 'T', default_value_t = 1)]
    pub topics: usize,
    /// Region count (plain generation only; the scenario uses one per area).
    #[arg(long, default_value_t = 5)]
    pub regions: usize,
    /// Comma-separated category counts, one per feature (max 3).
    #[arg(long, default_value = "6,6")]
    pub features: String,
    #[arg(long, default_value_t = 10.0)]
    pub spread: f64,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TopwordsArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Output JSON path; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Words reported per area.
    #[arg(long, default_value_t = 8)]
    pub top_n: usize,
    /// Areas reported, by descending document count.
    #[arg(long, default_value_t = 5)]
    pub top_areas: usize,
    /// Optional stop-word list (one word per line) to filter out.
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
}

fn validate_training_records(records: &[RawRecord]) -> Result<()> {
    let mut problems = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let line = i + 1;
        if r.region.is_none() {
            problems.push(format!("line {line}: missing region"));
        }
        if r.lat.is_none() {
            problems.push(format!("line {line}: missing lat"));
        }
        if r.lon.is_none() {
            problems.push(format!("line {line}: missing lon"));
        }
        if problems.len() >= 20 {
            problems.push("...".to_string());
            break;
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::validation(format!(
            "training records lack required labels: {}",
            problems.join("; ")
        )))
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::resolve(&args.hyper)?;
    let mut records = read_jsonl(&args.input)?;
    if args.derive_regions {
        let coords: Vec<[f64; 2]> = records
            .iter()
            .enumerate()
            .map(|(i, r)| match (r.lat, r.lon) {
                (Some(lat), Some(lon)) => Ok([lat, lon]),
                _ => Err(Error::validation(format!(
                    "line {}: missing coordinates for region derivation",
                    i + 1
                ))),
            })
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.hyperparams.seed);
        let (labels, _) = kmeans_regions(&coords, cfg.kmeans_k, &mut rng)?;
        for (r, l) in records.iter_mut().zip(labels) {
            r.region = Some(format!("kmeans-{l}"));
        }
    }
    validate_training_records(&records)?;
    let schema = build_schema(&records, cfg.min_count)?;
    let corpus = index_corpus(&records, &schema)?;
    let (model, report) = train(&corpus, &schema, &cfg.hyperparams, cfg.mode)?;
    model.save(&args.model)?;
    if let Some(path) = &args.report {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, &report)?;
    }
    if let Some(path) = &args.trace_csv {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "iteration,log_joint")?;
        for (i, lj) in report.log_joint_trace.iter().enumerate() {
            writeln!(file, "{i},{lj}")?;
        }
    }
    eprintln!(
        "trained {} areas on {} documents; final log-joint {:?}",
        cfg.hyperparams.areas,
        corpus.len(),
        report.log_joint_trace.last()
    );
    Ok(())
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let model = TrainedModel::load(&args.model)?;
    let records = read_jsonl(&args.input)?;
    let docs = index_corpus(&records, &model.schema)?;
    let mode = args.mode.map(ConditionalMode::from).unwrap_or_default();
    let seed = args.seed.unwrap_or(model.hyperparams.seed);
    let threads = args
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));

    let start = Instant::now();
    let preds = predict_corpus(&model, &docs, mode, seed, threads);
    let elapsed = start.elapsed();

    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.output)?);
    writeln!(out, "doc_id,region,lat,lon")?;
    for p in &preds {
        writeln!(
            out,
            "{},{},{},{}",
            p.doc_index,
            model.schema.regions.name(p.region),
            p.coords[0],
            p.coords[1]
        )?;
    }
    out.flush()?;

    if docs.is_empty() {
        println!("predicted 0 documents");
    } else {
        println!(
            "predicted {} documents, mean latency {:.3} ms/doc ({} threads)",
            docs.len(),
            elapsed.as_secs_f64() * 1000.0 / docs.len() as f64,
            threads
        );
    }
    Ok(())
}

/// Parse an external predictions CSV (doc_id, region, lat, lon).
pub fn read_predictions_csv(path: &Path, model: &TrainedModel) -> Result<Vec<(usize, [f64; 2])>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue; // header
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::validation(format!(
                "predictions line {}: expected 4 fields, got {}",
                i + 1,
                parts.len()
            )));
        }
        let region = model.schema.regions.get(parts[1]).ok_or_else(|| {
            Error::validation(format!(
                "predictions line {}: unknown region {:?}",
                i + 1,
                parts[1]
            ))
        })?;
        let lat: f64 = parts[2]
            .parse()
            .map_err(|_| Error::validation(format!("predictions line {}: bad lat", i + 1)))?;
        let lon: f64 = parts[3]
            .parse()
            .map_err(|_| Error::validation(format!("predictions line {}: bad lon", i + 1)))?;
        out.push((region, [lat, lon]));
    }
    Ok(out)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<Metrics> {
    let model = TrainedModel::load(&args.model)?;
    let records = read_jsonl(&args.input)?;
    let docs = index_corpus(&records, &model.schema)?;
    let mode = args.mode.map(ConditionalMode::from).unwrap_or_default();

    let metrics = match &args.predictions {
        Some(path) => {
            let preds = read_predictions_csv(path, &model)?;
            score_predictions(&preds, &docs, model.schema.num_regions())?
        }
        None => {
            let seed = args.seed.unwrap_or(model.hyperparams.seed);
            let threads = args
                .threads
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            crate::predict::evaluate(&model, &docs, mode, seed, threads)?
        }
    };
    let file = std::io::BufWriter::new(std::fs::File::create(&args.output)?);
    serde_json::to_writer_pretty(file, &metrics)?;
    println!(
        "precision {:.4}, MDE {:.1} km over {} documents",
        metrics.precision, metrics.mde_km, metrics.n_docs
    );
    Ok(metrics)
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let category_sizes: Vec<usize> = if args.features.trim().is_empty() {
        Vec::new()
    } else {
        args.features
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::validation(format!("bad feature size {s:?}")))
            })
            .collect::<Result<_>>()?
    };
    let (records, truth) = if args.scenario {
        separated_scenario(&ScenarioConfig {
            areas: args.areas,
            topics: args.topics,
            spread_deg: args.spread,
            sigma_deg: args.sigma,
            docs: args.docs,
            tokens_per_doc: args.tokens,
            vocab_size: args.vocab,
            category_sizes,
            seed: args.seed,
            ..Default::default()
        })?
    } else {
        let mut hp = Hyperparams::with_dims(args.areas, args.topics);
        hp.seed = args.seed;
        forward_sample(&GeneratorConfig {
            hyperparams: hp,
            docs: args.docs,
            tokens_per_doc: args.tokens,
            vocab_size: args.vocab,
            category_sizes,
            regions: args.regions,
            seed: args.seed,
        })?
    };
    write_jsonl(&args.output, &records)?;
    let file = std::io::BufWriter::new(std::fs::File::create(&args.truth)?);
    serde_json::to_writer(file, &truth)?;
    println!("generated {} documents", records.len());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct AreaTopWords {
    pub area: usize,
    pub center: [f64; 2],
    pub doc_count: u32,
    pub words: Vec<(String, f64)>,
}

/// Top areas by document count; per area, top-N words by posterior mass
/// (counts summed over topics, beta-smoothed).
pub fn top_words(
    model: &TrainedModel,
    top_n: usize,
    top_areas: usize,
    stopwords: &[String],
) -> Vec<AreaTopWords> {
    let v = model.schema.vocab_size();
    let beta = model.hyperparams.beta;
    let mut order: Vec<usize> = (0..model.hyperparams.areas).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(model.area_doc_count[i]));
    order.truncate(top_areas);

    order
        .into_iter()
        .map(|i| {
            let mut mass: Vec<f64> = vec![beta; v];
            for j in 0..model.hyperparams.topics {
                for (r, m) in mass.iter_mut().enumerate() {
                    *m += model.topic_area_word[j][i][r] as f64;
                }
            }
            let total: f64 = mass.iter().sum();
            let mut ranked: Vec<(usize, f64)> = mass
                .into_iter()
                .enumerate()
                .filter(|(r, _)| {
                    !stopwords
                        .iter()
                        .any(|s| s == model.schema.vocabulary.name(*r))
                })
                .collect();
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            ranked.truncate(top_n);
            AreaTopWords {
                area: i,
                center: model.gaussians.mu[i],
                doc_count: model.area_doc_count[i],
                words: ranked
                    .into_iter()
                    .map(|(r, m)| (model.schema.vocabulary.name(r).to_string(), m / total))
                    .collect(),
            }
        })
        .collect()
}

pub fn cmd_topwords(args: &TopwordsArgs) -> Result<()> {
    let model = TrainedModel::load(&args.model)?;
    let stopwords: Vec<String> = match &args.stopwords {
        Some(path) => std::fs::read_to_string(path)?
            .lines()
            .map(|l| l.trim().to_lowercase())
            .filter(|l| !l.is_empty())
            .collect(),
        None => Vec::new(),
    };
    let report = top_words(&model, args.top_n, args.top_areas, &stopwords);
    let json = serde_json::to_string_pretty(&report)?;
    match &args.output {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args).map(|_| ()),
        Command::Generate(args) => cmd_generate(args),
        Command::Topwords(args) => cmd_topwords(args),
    }
}
