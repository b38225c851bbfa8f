//! The `refnms` command line: one binary, one subcommand per pipeline stage.
//!
//! Every command writes its primary output either to `--out` or to the
//! writer passed to [`run`], so the binary and the tests share one code path.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use log::info;

use refnms::autodiff::GradCheckOptions;
use refnms::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use refnms::eval::{format_report, recall_curve, EvalConfig, EvalSet, Method, RecallReport};
use refnms::ingest::{
    build_vocabulary, encode_tokens, load_detection_dump, load_embeddings, load_expressions, load_regions,
    ExpressionRecord, ImageDetections, Split,
};
use refnms::model::{ModelConfig, ModelParameters, Relatedness, ScoredProposal, DEFAULT_DELTA};
use refnms::nms::{
    baseline_pipeline, filter_proposals, parse_budgets, ref_nms_pipeline, Criterion, NmsConfig, ProposalBudget,
    DEFAULT_IOU_THRESHOLD,
};
use refnms::pseudo_gt::{format_pseudo_gt, generate_all, load_pseudo_gt, PseudoGtSet, DEFAULT_GAMMA};
use refnms::synth::{self, SynthConfig};
use refnms::trainer::{model_gradient_check, train_epoch, Dataset, GradCheckSetup, TrainConfig, TrainState};
use refnms::Error;

/// Package version plus the on-disk format versions this build reads and writes.
pub const VERSION_TEXT: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (checkpoint format 1, detection dump #refnms-dets v1)"
);

pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const PARSE: u8 = 4;
    pub const SHAPE: u8 = 5;
    pub const CHECKPOINT: u8 = 6;
    pub const CONFIG: u8 = 7;
    pub const EMPTY: u8 = 8;
    pub const NUMERIC: u8 = 9;
    pub const GRADIENT: u8 = 10;
}

const EXIT_STATUS: &str = "\
Exit status:
  0   success
  2   usage error: unknown flag, missing or malformed argument
  3   missing or unreadable file
  4   malformed input file
  5   shape mismatch (feature or model dimensions)
  6   corrupt or unsupported checkpoint
  7   invalid configuration value
  8   empty input (no expressions to train or evaluate)
  9   non-finite value or autodiff failure
  10  gradient check above tolerance";

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    GradientMismatch { max_rel_error: f64, tolerance: f64 },
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::GradientMismatch {
                max_rel_error,
                tolerance,
            } => {
                write!(
                    f,
                    "gradient check failed: max relative error {max_rel_error:.3e} >= {tolerance:e}"
                )
            }
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::GradientMismatch { .. } => exit::GRADIENT,
            CliError::Core(e) => match e {
                Error::Io { .. } => exit::IO,
                Error::Parse { .. } | Error::Schema(_) => exit::PARSE,
                Error::Shape { .. } => exit::SHAPE,
                Error::Checkpoint(_) => exit::CHECKPOINT,
                Error::Config(_) | Error::Range(_) => exit::CONFIG,
                Error::Empty(_) => exit::EMPTY,
                Error::NonFinite(_) | Error::Graph(_) => exit::NUMERIC,
            },
        }
    }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "refnms",
    version = VERSION_TEXT,
    about = "Expression-aware proposal filtering for referring expression grounding",
    after_help = EXIT_STATUS
)]
pub struct Cli {
    /// Log more (-v info, -vv debug); RUST_LOG takes precedence
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic detection/expression dataset
    #[command(after_help = EXIT_STATUS)]
    SynthData(SynthArgs),
    /// Write pseudo ground-truth regions per expression
    #[command(after_help = EXIT_STATUS)]
    PseudoGt(PseudoGtArgs),
    /// Train the relatedness module on the train split
    #[command(after_help = EXIT_STATUS)]
    Train(TrainArgs),
    /// Filter proposals and print the kept boxes per expression
    #[command(after_help = EXIT_STATUS)]
    Apply(ApplyArgs),
    /// Referent and contextual-object recall across proposal budgets
    #[command(after_help = EXIT_STATUS)]
    EvalRecall(EvalArgs),
    /// Finite-difference check of the model gradients
    #[command(after_help = EXIT_STATUS)]
    GradCheck(GradCheckArgs),
}

/// Dataset file locations.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Directory holding the dataset files; the path flags below override single files
    #[arg(long, default_value = ".")]
    pub data_dir: PathBuf,
    /// Detection dump [default: <data-dir>/detections.tsv]
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Referring expressions [default: <data-dir>/expressions.tsv]
    #[arg(long)]
    pub expressions: Option<PathBuf>,
    /// Annotated regions [default: <data-dir>/regions.tsv]
    #[arg(long)]
    pub regions: Option<PathBuf>,
    /// Word embeddings, one `word v1 v2 ...` per line [default: <data-dir>/embeddings.txt]
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

impl DataArgs {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        DataArgs {
            data_dir: dir.into(),
            detections: None,
            expressions: None,
            regions: None,
            embeddings: None,
        }
    }

    fn path(&self, given: &Option<PathBuf>, file: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.data_dir.join(file))
    }

    pub fn detections_path(&self) -> PathBuf {
        self.path(&self.detections, synth::DETECTIONS_FILE)
    }

    pub fn expressions_path(&self) -> PathBuf {
        self.path(&self.expressions, synth::EXPRESSIONS_FILE)
    }

    pub fn regions_path(&self) -> PathBuf {
        self.path(&self.regions, synth::REGIONS_FILE)
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.path(&self.embeddings, synth::EMBEDDINGS_FILE)
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Images in the train split
    #[arg(long, default_value_t = 200)]
    pub train_images: usize,
    /// Images in the val split
    #[arg(long, default_value_t = 50)]
    pub eval_images: usize,
    /// Object categories (also the feature dimension)
    #[arg(long, default_value_t = 8)]
    pub categories: usize,
    /// Detections per image
    #[arg(long, default_value_t = 20)]
    pub boxes_per_image: usize,
    /// Standard deviation of the Gaussian noise added to the one-hot features
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Seed of every random draw
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Referring expressions per image
    #[arg(long, default_value_t = 2)]
    pub expressions_per_image: usize,
    /// Dimension of the generated word vectors
    #[arg(long, default_value_t = 300)]
    pub embedding_dim: usize,
    /// Output directory (created if missing)
    #[arg(long)]
    pub out: PathBuf,
}

impl SynthArgs {
    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            train_images: self.train_images,
            eval_images: self.eval_images,
            categories: self.categories,
            boxes_per_image: self.boxes_per_image,
            noise: self.noise,
            seed: self.seed,
            expressions_per_image: self.expressions_per_image,
            embedding_dim: self.embedding_dim,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PseudoGtArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Cosine similarity a category name needs with some noun of the expression
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    /// Only expressions of this split (train, val, testA, testB, test)
    #[arg(long)]
    pub split: Option<String>,
    /// Output file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Pseudo ground truth from `pseudo-gt` [default: computed with the configured gamma]
    #[arg(long)]
    pub pseudo_gt: Option<PathBuf>,
    /// `key = value` config file; flags below override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training objective: binary cross-entropy or margin ranking
    #[arg(long, value_parser = ["xe", "rank"])]
    pub loss: Option<String>,
    /// Total epochs, counting those already in a resumed checkpoint
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed for initialization and batch shuffling
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from this checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint written after every epoch
    #[arg(long)]
    pub out: PathBuf,
}

impl TrainArgs {
    pub fn new(data: DataArgs, out: impl Into<PathBuf>) -> Self {
        TrainArgs {
            data,
            pseudo_gt: None,
            config: None,
            loss: None,
            epochs: None,
            seed: None,
            resume: None,
            out: out.into(),
        }
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_config_file(p)?,
            None => TrainConfig::default(),
        };
        if let Some(l) = &self.loss {
            cfg.set("loss", l)?;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// NMS and budget settings shared by `apply` and `eval-recall`.
#[derive(Debug, Clone, Args)]
pub struct FilterArgs {
    /// Boxes below this detector confidence are dropped before scoring
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    pub delta: f64,
    /// Suppress a box when its IoU with a kept box exceeds this
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    pub iou_threshold: f64,
    /// Run NMS across categories instead of per category
    #[arg(long)]
    pub cross_class: bool,
}

impl Default for FilterArgs {
    fn default() -> Self {
        FilterArgs {
            delta: DEFAULT_DELTA,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            cross_class: false,
        }
    }
}

impl FilterArgs {
    fn nms(&self, criterion: Criterion) -> CliResult<NmsConfig> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta {} outside [0, 1]", self.delta)).into());
        }
        Ok(NmsConfig::new(self.iou_threshold, !self.cross_class, criterion)?)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ApplyArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub filter: FilterArgs,
    /// Trained model; required by ref_nms
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// baseline_conf or ref_nms
    #[arg(long, default_value = "ref_nms")]
    pub method: String,
    /// Replace the model with a constant relatedness of 1 (no checkpoint needed)
    #[arg(long)]
    pub stub_relatedness: bool,
    /// Split whose expressions are filtered
    #[arg(long, default_value = "val")]
    pub split: String,
    /// N, real_case or conf>=X
    #[arg(long, default_value = "real_case")]
    pub budget: String,
    /// Output file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ApplyArgs {
    pub fn new(data: DataArgs, method: Method) -> Self {
        ApplyArgs {
            data,
            filter: FilterArgs::default(),
            checkpoint: None,
            method: method.to_string(),
            stub_relatedness: false,
            split: "val".into(),
            budget: "real_case".into(),
            out: None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub filter: FilterArgs,
    /// Pseudo ground truth from `pseudo-gt` [default: computed with --gamma]
    #[arg(long)]
    pub pseudo_gt: Option<PathBuf>,
    /// Similarity threshold used when pseudo ground truth is computed
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    /// Split to evaluate
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Comma-separated: baseline_conf, ref_nms
    #[arg(long, default_value = "baseline_conf,ref_nms")]
    pub method: String,
    /// Comma-separated budgets: N, real_case or conf>=X
    #[arg(long, default_value = "5,10,20,50,real_case")]
    pub budgets: String,
    /// Trained model; required by ref_nms
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// CSV report [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl EvalArgs {
    pub fn new(data: DataArgs) -> Self {
        EvalArgs {
            data,
            filter: FilterArgs::default(),
            pseudo_gt: None,
            gamma: DEFAULT_GAMMA,
            split: "val".into(),
            method: "baseline_conf,ref_nms".into(),
            budgets: "5,10,20,50,real_case".into(),
            checkpoint: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GradCheckArgs {
    /// Vocabulary size of the random instance
    #[arg(long, default_value_t = 12)]
    pub vocab_size: usize,
    /// Word embedding dimension
    #[arg(long, default_value_t = refnms::model::DEFAULT_WORD_DIM)]
    pub word_dim: usize,
    /// GRU hidden size per direction
    #[arg(long, default_value_t = refnms::model::DEFAULT_HIDDEN)]
    pub hidden: usize,
    /// Detector feature dimension
    #[arg(long, default_value_t = 8)]
    pub feature_dim: usize,
    /// Boxes in the random instance
    #[arg(long, default_value_t = 3)]
    pub boxes: usize,
    /// Tokens in the random expression
    #[arg(long, default_value_t = 4)]
    pub tokens: usize,
    /// Draw every parameter from U(-s, s) instead of the training initialization
    #[arg(long)]
    pub param_scale: Option<f64>,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Lower bound on the relative-error denominator
    #[arg(long, default_value_t = 1e-6)]
    pub rel_floor: f64,
    /// Coordinates sampled per tensor; 0 checks every coordinate
    #[arg(long, default_value_t = 16)]
    pub coords: usize,
    /// Seed of the random instance and of coordinate sampling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest acceptable relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

impl Default for GradCheckArgs {
    fn default() -> Self {
        GradCheckArgs::parse_from_defaults()
    }
}

impl GradCheckArgs {
    fn parse_from_defaults() -> Self {
        match Cli::parse_from(["refnms", "grad-check"]).command {
            Command::GradCheck(a) => a,
            _ => unreachable!("grad-check parses to GradCheck"),
        }
    }
}

pub fn run(command: &Command, out: &mut dyn Write) -> CliResult {
    match command {
        Command::SynthData(a) => cmd_synth_data(a, out),
        Command::PseudoGt(a) => cmd_pseudo_gt(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Apply(a) => cmd_apply(a, out),
        Command::EvalRecall(a) => cmd_eval_recall(a, out),
        Command::GradCheck(a) => cmd_grad_check(a, out),
    }
}

fn stdout_err(e: std::io::Error) -> CliError {
    Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    }
    .into()
}

/// Writes `text` to `path`, or to `out` when no path is given.
fn emit(text: &str, path: Option<&Path>, out: &mut dyn Write) -> CliResult {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?,
        None => out.write_all(text.as_bytes()).map_err(stdout_err)?,
    }
    Ok(())
}

fn parse_split(s: &str) -> CliResult<Split> {
    s.parse::<Split>().map_err(|e| Error::Config(e.to_string()).into())
}

pub fn cmd_synth_data(a: &SynthArgs, out: &mut dyn Write) -> CliResult {
    let data = synth::generate(&a.config())?;
    let paths = data.write_to(&a.out)?;
    writeln!(
        out,
        "wrote {} images, {} expressions, {} regions to {}",
        data.detections.len(),
        data.expressions.len(),
        data.regions.len(),
        a.out.display()
    )
    .map_err(stdout_err)?;
    info!("detections at {}", paths.detections.display());
    Ok(())
}

pub fn cmd_pseudo_gt(a: &PseudoGtArgs, out: &mut dyn Write) -> CliResult {
    if !(-1.0..=1.0).contains(&a.gamma) {
        return Err(Error::Config(format!("gamma {} outside [-1, 1]", a.gamma)).into());
    }
    let mut exprs = load_expressions(a.data.expressions_path())?;
    if let Some(s) = &a.split {
        let split = parse_split(s)?;
        exprs.retain(|e| e.split == split);
    }
    let regions = load_regions(a.data.regions_path())?;
    let table = load_embeddings(a.data.embeddings_path())?;
    let sets = generate_all(&exprs, &regions, &table, a.gamma);
    emit(&format_pseudo_gt(&sets), a.out.as_deref(), out)
}

/// Pseudo ground truth from a file, or computed from the embeddings.
fn pseudo_sets(
    file: Option<&Path>,
    data: &DataArgs,
    exprs: &[ExpressionRecord],
    gamma: f64,
) -> CliResult<(Vec<PseudoGtSet>, Vec<refnms::GroundTruthRegion>)> {
    let regions = load_regions(data.regions_path())?;
    let sets = match file {
        Some(p) => load_pseudo_gt(p)?,
        None => {
            let table = load_embeddings(data.embeddings_path())?;
            generate_all(exprs, &regions, &table, gamma)
        }
    };
    Ok((sets, regions))
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult {
    let cfg = a.train_config()?;
    let (feature_dim, images) = load_detection_dump(a.data.detections_path())?;
    let exprs: Vec<ExpressionRecord> = load_expressions(a.data.expressions_path())?
        .into_iter()
        .filter(|e| e.split == Split::Train)
        .collect();
    if exprs.is_empty() {
        return Err(Error::Empty("no train-split expressions".into()).into());
    }
    let (pseudo, regions) = pseudo_sets(a.pseudo_gt.as_deref(), &a.data, &exprs, cfg.gamma)?;

    let mut state = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p, None)?;
            ck.check_config(&cfg);
            if ck.state.params.config.feature_dim != feature_dim {
                return Err(Error::Shape {
                    op: "train",
                    detail: format!(
                        "checkpoint expects {}-d features, detections have {feature_dim}",
                        ck.state.params.config.feature_dim
                    ),
                }
                .into());
            }
            ck.state
        }
        None => {
            let vocab = build_vocabulary(&exprs, cfg.max_len)?;
            let table = load_embeddings(a.data.embeddings_path())?;
            let mc = cfg.model_config(vocab.len(), feature_dim);
            let params = ModelParameters::init(mc, Some(&vocab), Some(&table), cfg.seed)?;
            TrainState::new(params, vocab)
        }
    };
    let data = Dataset::build(&exprs, images, feature_dim, &regions, &pseudo, &state.vocab)?;
    info!(
        "{} expressions, {} images, vocabulary {}, {} parameters",
        data.examples.len(),
        data.images.len(),
        state.vocab.len(),
        state.params.num_parameters()
    );
    let mut trained = false;
    while state.epochs_done < cfg.epochs {
        let m = train_epoch(&mut state, &data, &cfg)?;
        writeln!(
            out,
            "epoch {}/{} loss {:.6} steps {} skipped {}",
            m.epoch + 1,
            cfg.epochs,
            m.mean_loss,
            m.steps,
            m.skipped
        )
        .map_err(stdout_err)?;
        save_checkpoint(&a.out, &Checkpoint::new(state.clone(), &cfg))?;
        trained = true;
    }
    if !trained {
        // already at the requested epoch count; still leave a checkpoint behind
        save_checkpoint(&a.out, &Checkpoint::new(state, &cfg))?;
    }
    writeln!(out, "checkpoint {}", a.out.display()).map_err(stdout_err)?;
    Ok(())
}

fn load_params(path: Option<&Path>, feature_dim: usize) -> CliResult<Option<Checkpoint>> {
    let Some(p) = path else { return Ok(None) };
    let ck = load_checkpoint(p, None)?;
    let cfg: &ModelConfig = &ck.state.params.config;
    if cfg.feature_dim != feature_dim {
        return Err(Error::Shape {
            op: "checkpoint",
            detail: format!(
                "model expects {}-d features, detections have {feature_dim}",
                cfg.feature_dim
            ),
        }
        .into());
    }
    Ok(Some(ck))
}

fn parse_methods(s: &str) -> CliResult<Vec<Method>> {
    let methods: Vec<Method> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse())
        .collect::<refnms::Result<_>>()?;
    if methods.is_empty() {
        return Err(Error::Config("no method given".into()).into());
    }
    Ok(methods)
}

/// One `apply` output line.
pub fn format_proposal(expression_id: &str, p: &ScoredProposal) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        expression_id, p.bbox, p.category_id, p.confidence, p.relatedness, p.fused
    )
}

pub fn cmd_apply(a: &ApplyArgs, out: &mut dyn Write) -> CliResult {
    let method: Method = a.method.parse()?;
    let split = parse_split(&a.split)?;
    let budget: ProposalBudget = a.budget.parse()?;
    let (feature_dim, images) = load_detection_dump(a.data.detections_path())?;
    let exprs = load_expressions(a.data.expressions_path())?;
    let ck = if method == Method::RefNms && !a.stub_relatedness {
        let ck = load_params(a.checkpoint.as_deref(), feature_dim)?;
        Some(ck.ok_or_else(|| Error::Config("ref_nms needs --checkpoint or --stub-relatedness".into()))?)
    } else {
        None
    };
    let by_id: HashMap<&str, &ImageDetections> = images.iter().map(|im| (im.image_id.as_str(), im)).collect();
    let empty = ImageDetections {
        image_id: String::new(),
        records: Vec::new(),
    };

    let mut text = String::new();
    for e in exprs.iter().filter(|e| e.split == split) {
        let image = by_id.get(e.image_id.as_str()).copied().unwrap_or(&empty);
        let kept = match (method, &ck) {
            (Method::BaselineConf, _) => {
                baseline_pipeline(image, a.filter.delta, &a.filter.nms(Criterion::Confidence)?, budget)?
            }
            (Method::RefNms, Some(ck)) => {
                let tokens = encode_tokens(&e.tokens, &ck.state.vocab)?;
                let nms = a.filter.nms(Criterion::Fused)?;
                ref_nms_pipeline(image, &tokens, &ck.state.params, a.filter.delta, &nms, budget)?
            }
            (Method::RefNms, None) => {
                let nms = a.filter.nms(Criterion::Fused)?;
                filter_proposals(image, &[], Relatedness::Constant(1.0), a.filter.delta, &nms, budget)?
            }
        };
        for p in &kept {
            text.push_str(&format_proposal(&e.expression_id, p));
            text.push('\n');
        }
    }
    emit(&text, a.out.as_deref(), out)
}

/// Recall report for every requested method, rows grouped by method.
pub fn eval_report(a: &EvalArgs) -> CliResult<RecallReport> {
    let split = parse_split(&a.split)?;
    let methods = parse_methods(&a.method)?;
    let budgets = parse_budgets(&a.budgets)?;
    let (feature_dim, images) = load_detection_dump(a.data.detections_path())?;
    let exprs: Vec<ExpressionRecord> = load_expressions(a.data.expressions_path())?
        .into_iter()
        .filter(|e| e.split == split)
        .collect();
    let (pseudo, regions) = pseudo_sets(a.pseudo_gt.as_deref(), &a.data, &exprs, a.gamma)?;
    let ck = if methods.contains(&Method::RefNms) {
        let ck = load_params(a.checkpoint.as_deref(), feature_dim)?;
        Some(ck.ok_or_else(|| Error::Config("ref_nms evaluation needs --checkpoint".into()))?)
    } else {
        None
    };
    let vocab = ck.as_ref().map(|c| &c.state.vocab);
    let set = EvalSet::build(split, &exprs, &images, &regions, &pseudo, vocab)?;
    let cfg = EvalConfig {
        delta: a.filter.delta,
        nms: a.filter.nms(Criterion::Confidence)?,
    };
    let params = ck.as_ref().map(|c| &c.state.params);
    let mut report = RecallReport::default();
    for m in methods {
        report.extend(recall_curve(&set, m, &budgets, params, &cfg)?);
    }
    Ok(report)
}

pub fn cmd_eval_recall(a: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let report = eval_report(a)?;
    emit(&format_report(&report)?, a.out.as_deref(), out)
}

pub fn cmd_grad_check(a: &GradCheckArgs, out: &mut dyn Write) -> CliResult {
    let setup = GradCheckSetup {
        config: ModelConfig {
            vocab_size: a.vocab_size,
            word_dim: a.word_dim,
            hidden: a.hidden,
            feature_dim: a.feature_dim,
        },
        boxes: a.boxes,
        tokens: a.tokens,
        param_scale: a.param_scale,
        seed: a.seed,
    };
    if !(a.step > 0.0 && a.rel_floor > 0.0 && a.tolerance > 0.0) {
        return Err(Error::Config("step, rel-floor and tolerance must be > 0".into()).into());
    }
    if let Some(s) = a.param_scale {
        if !(s > 0.0) {
            return Err(Error::Config("param-scale must be > 0".into()).into());
        }
    }
    let opts = GradCheckOptions {
        step: a.step,
        max_coords: (a.coords > 0).then_some(a.coords),
        seed: a.seed,
        rel_floor: a.rel_floor,
    };
    let report = model_gradient_check(&setup, &opts)?;
    let names = ModelParameters::tensor_names();
    let worst = match report.worst {
        Some((k, c)) => {
            let name = names.get(k).map(String::as_str).unwrap_or("features");
            let (an, nu) = report.worst_values;
            format!(" (worst {name}[{c}]: analytic {an:e}, numeric {nu:e})")
        }
        None => String::new(),
    };
    writeln!(
        out,
        "max relative error {:.3e} over {} coordinates{worst}",
        report.max_rel_error, report.coords_checked
    )
    .map_err(stdout_err)?;
    if !(report.max_rel_error < a.tolerance) {
        return Err(CliError::GradientMismatch {
            max_rel_error: report.max_rel_error,
            tolerance: a.tolerance,
        });
    }
    Ok(())
}
