//! The `saliency-sanity` command line.
//!
//! Every command writes its artifacts and a `report.json` into the output
//! directory. The report embeds the parsed command, so `rerun` can repeat
//! any run into another directory with byte-identical results.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{self, NoiseDistribution};
use crate::data::{self, LabeledDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::harness::{self, HarnessConfig, RandomizationOrder};
use crate::metrics::{MetricConfig, MetricId};
use crate::models::{ArchitectureId, Model, Scale};
use crate::report::{self, ExperimentReport, RunManifest, Thresholds};
use crate::saliency::{self, IgConfig, Method, MethodConfig, NoiseScale, SmoothingConfig};
use crate::tensor::Tensor;
use crate::training::{self, TrainConfig};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "SALIENCY_SANITY_OUT";
/// Environment variable naming the directory that holds the MNIST IDX files.
pub const DATA_ENV: &str = "SALIENCY_SANITY_DATA";

/// Training subset used by `train --random-labels` unless overridden.
pub const RANDOM_LABEL_SUBSET: usize = 1000;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PRECONDITION: i32 = 2;
pub const EXIT_ASSERTION: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "saliency-sanity", version, about = "Randomization sanity checks for saliency maps")]
pub struct Cli {
    /// Directory that receives reports, checkpoints and images.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Train a model and write `model.json` plus `trace.csv`.
    Train(TrainArgs),
    /// Write saliency maps as PGM, PPM and JSON.
    Saliency(SaliencyArgs),
    /// Run a randomization test and print verdicts.
    #[command(subcommand)]
    Sanity(SanityCommand),
    /// Run an analytic experiment.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Repeat the run recorded in a report.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleArg {
    Desk,
    Full,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Scale {
        match s {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Full => Scale::Full,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// `mnist`, `synthetic`, or a directory holding `train-*` and `t10k-*`
    /// IDX files.
    #[arg(long, default_value = "mnist")]
    pub dataset: String,
    /// Where `mnist` is looked up (default `data/mnist`).
    #[arg(long, env = DATA_ENV)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Test,
}

impl DataArgs {
    fn load(&self, split: Split, seed: u64) -> Result<LabeledDataset> {
        let prefix = match split {
            Split::Train => "train",
            Split::Test => "t10k",
        };
        match self.dataset.as_str() {
            "synthetic" => data::synthesize(&SyntheticSpec {
                seed: seed.wrapping_add(if split == Split::Test { 1 } else { 0 }),
                ..SyntheticSpec::default()
            }),
            "mnist" => {
                let dir = self.data_dir.clone().unwrap_or_else(|| PathBuf::from("data/mnist"));
                data::load_idx_dir(&dir, prefix)
            }
            other => data::load_idx_dir(Path::new(other), prefix),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MethodArgs {
    /// Comma-separated methods, e.g. `gradient,smoothgrad,guided_backprop`.
    #[arg(long, value_delimiter = ',', default_value = "gradient,smoothgrad,vargrad,gradient_input,integrated_gradients,guided_backprop,gradcam,guided_gradcam")]
    pub methods: Vec<String>,
    #[arg(long, default_value_t = 50)]
    pub ig_steps: usize,
    #[arg(long, default_value_t = 50)]
    pub smooth_samples: usize,
    /// SmoothGrad noise std as a fraction of each input's value range.
    #[arg(long, default_value_t = 0.15)]
    pub smooth_noise: f64,
}

impl MethodArgs {
    fn methods(&self) -> Result<Vec<Method>> {
        self.methods.iter().map(|m| m.parse()).collect()
    }

    fn config(&self, seed: u64) -> MethodConfig {
        MethodConfig {
            ig: IgConfig {
                steps: self.ig_steps,
                ..IgConfig::default()
            },
            smoothing: SmoothingConfig {
                samples: self.smooth_samples,
                noise: NoiseScale::RangeFraction(self.smooth_noise),
                seed,
            },
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MetricArgs {
    /// Comma-separated metrics.
    #[arg(long, value_delimiter = ',', default_value = "spearman_abs,spearman_noabs,ssim,hog_pearson")]
    pub metrics: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub ssim_window: usize,
    /// HOG pixels per cell; by default 16 for maps of at least 64 pixels, else 7.
    #[arg(long)]
    pub hog_cell: Option<usize>,
}

impl MetricArgs {
    fn metrics(&self) -> Result<Vec<MetricId>> {
        self.metrics.iter().map(|m| m.parse()).collect()
    }

    fn config(&self) -> MetricConfig {
        MetricConfig {
            ssim_window: self.ssim_window,
            hog_cell: self.hog_cell,
            ..MetricConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// `linear`, `mlp`, `cnn` or `conv1`.
    #[arg(long, default_value = "cnn")]
    pub arch: String,
    #[arg(long, value_enum, default_value_t = ScaleArg::Desk)]
    pub scale: ScaleArg,
    #[command(flatten)]
    pub data: DataArgs,
    /// Stratified training subset size (default: 1000 with
    /// `--random-labels`, otherwise the whole split).
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Default: 6000 for the MLP and for `--random-labels`, 3000 otherwise.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Default: 5e-4 with `--random-labels`, 1e-3 otherwise.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Default: 0 with `--random-labels`, 1e-3 otherwise.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train on a uniformly permuted copy of the labels and require the
    /// model to memorize it.
    #[arg(long)]
    pub random_labels: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated test-set indices.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub inputs: Vec<usize>,
    /// Target class (default: the predicted class of each input).
    #[arg(long)]
    pub class: Option<usize>,
    #[command(flatten)]
    pub methods: MethodArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SanityArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of test inputs, taken from the start of the test split.
    #[arg(long, default_value_t = 32)]
    pub inputs: usize,
    #[command(flatten)]
    pub methods: MethodArgs,
    #[command(flatten)]
    pub metrics: MetricArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.3)]
    pub pass_below: f64,
    #[arg(long, default_value_t = 0.6)]
    pub fail_above: f64,
    /// Also write one SVG chart per metric.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DataRandArgs {
    #[command(flatten)]
    pub sanity: SanityArgs,
    /// Checkpoint trained with `--random-labels`.
    #[arg(long)]
    pub random_checkpoint: PathBuf,
    /// Output directory of that training run, which holds the permuted
    /// training set it memorized.
    #[arg(long)]
    pub memorized: PathBuf,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SanityCommand {
    /// Randomize layers cumulatively from the logits down.
    Cascade(SanityArgs),
    /// Randomize one layer at a time.
    Independent(SanityArgs),
    /// Randomize layers cumulatively from the input up.
    Reverse(SanityArgs),
    /// Compare a true-label model with a random-label model.
    Datarand(DataRandArgs),
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyzeCommand {
    /// Closed forms on a linear model.
    Linear(LinearArgs),
    /// Activation-pattern formula on the conv-sum-pool model.
    Conv1(Conv1Args),
    /// Similarity of input-times-noise products as the noise grows.
    Dominance(DominanceArgs),
    /// Metric values against random masks.
    Calibrate(CalibrateArgs),
    /// Explanations of inputs and their edge-masked copies.
    Edges(EdgesArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LinearArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    pub w: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "3,4")]
    pub x: Vec<f64>,
    /// Default: zeros.
    #[arg(long, value_delimiter = ',')]
    pub baseline: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Conv1Args {
    #[arg(long, default_value_t = 16)]
    pub side: usize,
    /// Random (filter, input) pairs to check.
    #[arg(long, default_value_t = 50)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSet {
    Photos,
    Mnist,
    Both,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DominanceArgs {
    #[arg(long, value_enum, default_value_t = ImageSet::Both)]
    pub images: ImageSet,
    #[command(flatten)]
    pub data: DataArgs,
    /// MNIST test inputs to include.
    #[arg(long, default_value_t = 8)]
    pub mnist_inputs: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.1,0.25,0.5,1,2")]
    pub grid: Vec<f64>,
    #[arg(long, default_value_t = 4)]
    pub pairs: usize,
    #[command(flatten)]
    pub metrics: MetricArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of gradient maps (test inputs).
    #[arg(long, default_value_t = 50)]
    pub maps: usize,
    #[command(flatten)]
    pub metrics: MetricArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EdgesArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 8)]
    pub inputs: usize,
    #[command(flatten)]
    pub methods: MethodArgs,
    #[command(flatten)]
    pub metrics: MetricArgs,
    #[arg(long, default_value_t = analysis::EDGE_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    /// A `report.json` written by any command.
    pub report: PathBuf,
}

/// What a finished command produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: PathBuf,
    pub exit_code: i32,
    /// Human-readable summary for stdout.
    pub summary: String,
}

/// Exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Memorization { .. }
        | Error::Io { .. }
        | Error::BadMagic { .. }
        | Error::PayloadMismatch { .. }
        | Error::CountMismatch { .. }
        | Error::Checkpoint(_)
        | Error::Json(_)
        | Error::Csv(_) => EXIT_PRECONDITION,
        Error::Diverged { .. } | Error::NonFinite(_) | Error::NonScalarSeed(_) => EXIT_ASSERTION,
        _ => EXIT_USAGE,
    }
}

/// Parses `argv` and runs it, returning the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli.command, &cli.out) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            println!("report: {}", outcome.report.display());
            outcome.exit_code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs one command, writing into `out`.
pub fn run(command: &Command, out: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match command {
        Command::Rerun(args) => {
            let report = ExperimentReport::load(&args.report)?;
            let command: Command = serde_json::from_value(report.manifest.invocation)?;
            if matches!(command, Command::Rerun(_)) {
                return Err(Error::Config("a rerun report cannot be rerun".into()));
            }
            run(&command, out)
        }
        Command::Train(a) => cmd_train(command, a, out),
        Command::Saliency(a) => cmd_saliency(command, a, out),
        Command::Sanity(s) => cmd_sanity(command, s, out),
        Command::Analyze(a) => cmd_analyze(command, a, out),
    }
}

fn write(out: &Path, name: &str, bytes: impl AsRef<[u8]>, artifacts: &mut Vec<String>) -> Result<()> {
    let path = out.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    artifacts.push(name.to_string());
    Ok(())
}

fn finish(out: &Path, mut manifest: RunManifest, artifacts: Vec<String>, results: serde_json::Value, verdicts: Vec<report::Verdict>, summary: String, exit_code: i32) -> Result<RunOutcome> {
    manifest.artifacts = artifacts;
    manifest.artifacts.push("report.json".into());
    let rep = ExperimentReport::new(manifest, results, verdicts);
    let path = out.join("report.json");
    fs::write(&path, rep.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok(RunOutcome {
        report: path,
        exit_code,
        summary,
    })
}

fn manifest(command: &Command, name: &str, seed: u64) -> Result<RunManifest> {
    Ok(RunManifest::new(name, seed, serde_json::to_value(command)?))
}

fn inputs(data: &LabeledDataset, model: &Model, indices: &[usize]) -> Result<Vec<Tensor>> {
    indices
        .iter()
        .map(|&i| {
            if i >= data.len() {
                return Err(Error::Config(format!("input index {i} out of range for {} test items", data.len())));
            }
            data.input(i, model.input_shape())
        })
        .collect()
}

fn cmd_train(command: &Command, a: &TrainArgs, out: &Path) -> Result<RunOutcome> {
    let arch = ArchitectureId::parse(&a.arch, a.scale.into())?;
    let full = a.data.load(Split::Train, a.seed)?;
    let test = a.data.load(Split::Test, a.seed)?;
    let train_size = a.train_size.or(if a.random_labels { Some(RANDOM_LABEL_SUBSET) } else { None });
    let mut train_set = match train_size {
        Some(n) => data::subset(&full, n, a.seed, true)?,
        None => full,
    };
    if a.random_labels {
        train_set = training::permute_labels(&train_set, a.seed)?;
    }
    let cfg = TrainConfig {
        learning_rate: a.learning_rate.unwrap_or(if a.random_labels { 5e-4 } else { 1e-3 }),
        batch_size: a.batch_size,
        iterations: a.iterations.unwrap_or(if a.random_labels || matches!(arch, ArchitectureId::Mlp { .. }) { 6000 } else { 3000 }),
        weight_decay: a.weight_decay.unwrap_or(if a.random_labels { 0.0 } else { 1e-3 }),
        seed: a.seed,
        ..TrainConfig::default()
    };
    let model = Model::build(arch.clone(), a.seed);
    let outcome = training::train(&model, &train_set, &cfg)?;
    let train_acc = training::evaluate(&outcome.model, &train_set)?;
    let test_acc = training::evaluate(&outcome.model, &test)?;

    let mut artifacts = Vec::new();
    write(out, "model.json", outcome.model.to_json()?, &mut artifacts)?;
    write(out, "trace.csv", training::trace_csv(&outcome.trace)?, &mut artifacts)?;
    if a.random_labels {
        let (images, labels) = data::encode_idx(&train_set)?;
        write(out, "memorized-images-idx3-ubyte", images, &mut artifacts)?;
        write(out, "memorized-labels-idx1-ubyte", labels, &mut artifacts)?;
    }
    let mut m = manifest(command, "train", a.seed)?;
    m.config = json!({ "architecture": arch, "train": cfg, "train_items": train_set.len() });
    let results = json!({
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "parameters": training::parameter_count(&outcome.model),
        "final_loss": outcome.trace.last().map(|r| r.loss),
    });
    let summary = format!("train accuracy {train_acc:.4}\ntest accuracy {test_acc:.4}\n");
    let memorized = !a.random_labels || train_acc > harness::MEMORIZATION_THRESHOLD;
    let done = finish(out, m, artifacts, results, vec![], summary, EXIT_OK)?;
    if !memorized {
        return Err(Error::Memorization {
            measured: train_acc,
            required: harness::MEMORIZATION_THRESHOLD,
        });
    }
    Ok(done)
}

fn file_stem(method: Method) -> String {
    method.to_string().replace(':', "-")
}

fn cmd_saliency(command: &Command, a: &SaliencyArgs, out: &Path) -> Result<RunOutcome> {
    let model = Model::load(&a.checkpoint)?;
    let test = a.data.load(Split::Test, a.seed)?;
    let methods = a.methods.methods()?;
    let cfg = a.methods.config(a.seed);
    let xs = inputs(&test, &model, &a.inputs)?;
    let mut artifacts = Vec::new();
    let mut rows = Vec::new();
    for (&idx, x) in a.inputs.iter().zip(&xs) {
        let class = model.resolve_class(x, a.class)?;
        for &method in &methods {
            let map = saliency::explain(&model, x, Some(class), method, &cfg)?;
            let stem = format!("maps/{idx:05}_{}", file_stem(method));
            write(out, &format!("{stem}.pgm"), saliency::pgm_bytes(&map), &mut artifacts)?;
            write(out, &format!("{stem}.ppm"), saliency::ppm_bytes(&map), &mut artifacts)?;
            write(out, &format!("{stem}.json"), serde_json::to_string(&map)?, &mut artifacts)?;
            rows.push(json!({ "input": idx, "method": method, "class": class, "max_abs": map.values.max_abs() }));
        }
    }
    let mut m = manifest(command, "saliency", a.seed)?;
    m.config = json!({ "method": cfg });
    let summary = format!("{} maps for {} inputs\n", rows.len(), xs.len());
    finish(out, m, artifacts, json!({ "maps": rows }), vec![], summary, EXIT_OK)
}

fn cmd_sanity(command: &Command, s: &SanityCommand, out: &Path) -> Result<RunOutcome> {
    let (a, order) = match s {
        SanityCommand::Cascade(a) => (a, Some(RandomizationOrder::Cascading)),
        SanityCommand::Independent(a) => (a, Some(RandomizationOrder::Independent)),
        SanityCommand::Reverse(a) => (a, Some(RandomizationOrder::ReverseCascading)),
        SanityCommand::Datarand(d) => (&d.sanity, None),
    };
    let thresholds = Thresholds {
        pass_below: a.pass_below,
        fail_above: a.fail_above,
    };
    thresholds.validate()?;
    let model = Model::load(&a.checkpoint)?;
    let test = a.data.load(Split::Test, a.seed)?;
    let cfg = HarnessConfig {
        inputs: (0..a.inputs.min(test.len())).collect(),
        methods: a.methods.methods()?,
        metrics: a.metrics.metrics()?,
        seed: a.seed,
        method_config: a.methods.config(a.seed),
        metric_config: a.metrics.config(),
    };
    let table = match (s, order) {
        (SanityCommand::Datarand(d), _) => {
            let rand_model = Model::load(&d.random_checkpoint)?;
            let memorized = data::load_idx_dir(&d.memorized, "memorized")?;
            harness::data_randomization_compare(&model, &rand_model, &memorized, &test, &cfg)?
        }
        (_, Some(order)) => harness::run_randomization(&model, &test, &cfg, order)?,
        _ => unreachable!("every non-datarand mode has an order"),
    };
    let verdicts = report::verdicts(&table, order, thresholds);
    let mut artifacts = Vec::new();
    write(out, "similarity.csv", table.csv_string()?, &mut artifacts)?;
    if a.svg {
        for &metric in &cfg.metrics {
            write(out, &format!("similarity_{metric}.svg"), report::similarity_svg(&table, metric), &mut artifacts)?;
        }
    }
    let mut m = manifest(command, &format!("sanity {}", table.test), a.seed)?;
    m.config = json!({ "harness": cfg, "thresholds": thresholds });
    let mut summary = report::verdict_table(&verdicts);
    if !table.skipped_methods.is_empty() {
        let names: Vec<String> = table.skipped_methods.iter().map(|m| m.to_string()).collect();
        summary.push_str(&format!("skipped (undefined for this architecture): {}\n", names.join(", ")));
    }
    finish(out, m, artifacts, json!({ "similarity": table }), verdicts, summary, EXIT_OK)
}

fn cmd_analyze(command: &Command, which: &AnalyzeCommand, out: &Path) -> Result<RunOutcome> {
    match which {
        AnalyzeCommand::Linear(a) => {
            let baseline = a.baseline.clone().unwrap_or_else(|| vec![0.0; a.w.len()]);
            let rep = analysis::verify_linear_closed_forms(&a.w, &a.x, &baseline, a.seed)?;
            let mut summary = String::new();
            for c in &rep.checks {
                summary.push_str(&format!("{} {} (max error {:e})\n", if c.pass { "PASS" } else { "FAIL" }, c.name, c.max_abs_error));
            }
            summary.push_str(&format!("integrated gradients {:?}; α-weighted variant {:?}\n", rep.ig_standard, rep.ig_alpha_weighted));
            let code = if rep.pass { EXIT_OK } else { EXIT_ASSERTION };
            finish(out, manifest(command, "analyze linear", a.seed)?, vec![], json!({ "linear": rep }), vec![], summary, code)
        }
        AnalyzeCommand::Conv1(a) => {
            if a.side < 3 {
                return Err(Error::Config("conv1 side must be at least 3".into()));
            }
            let reports = analysis::conv1_random_draws(a.side, a.draws, a.seed)?;
            let worst = reports.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max);
            let pass = reports.iter().all(|r| r.pass);
            let summary = format!("{} {} draws, max |formula - autodiff| = {worst:e}\n", if pass { "PASS" } else { "FAIL" }, reports.len());
            let code = if pass { EXIT_OK } else { EXIT_ASSERTION };
            finish(out, manifest(command, "analyze conv1", a.seed)?, vec![], json!({ "conv1": reports, "pass": pass }), vec![], summary, code)
        }
        AnalyzeCommand::Dominance(a) => {
            let metrics = a.metrics.metrics()?;
            let mcfg = a.metrics.config();
            let mut sets: Vec<(&str, Vec<Tensor>)> = Vec::new();
            if matches!(a.images, ImageSet::Photos | ImageSet::Both) {
                sets.push(("photos", data::bundled_photos().into_iter().map(|(_, t)| t).collect()));
            }
            if matches!(a.images, ImageSet::Mnist | ImageSet::Both) {
                let test = a.data.load(Split::Test, a.seed)?;
                sets.push(("mnist", (0..a.mnist_inputs.min(test.len())).map(|i| test.image(i)).collect()));
            }
            let mut curves = Vec::new();
            let mut summary = String::new();
            for (name, images) in &sets {
                for dist in [NoiseDistribution::TruncatedNormal, NoiseDistribution::Uniform] {
                    let c = analysis::input_dominance(images, dist, &a.grid, a.pairs, &metrics, a.seed, &mcfg)?;
                    for (i, p) in c.points.iter().enumerate() {
                        let show = |m| c.product_mean(i, m).zip(c.noise_mean(i, m));
                        if let Some((xp, np)) = show(MetricId::SpearmanAbs) {
                            summary.push_str(&format!("{name} {dist:?} scale {}: spearman_abs x⊙u {xp:.3} vs u {np:.3}\n", p.scale));
                        }
                    }
                    curves.push(json!({ "images": name, "curve": c }));
                }
            }
            let mut m = manifest(command, "analyze dominance", a.seed)?;
            m.config = json!({ "metric": mcfg, "noise": "truncated normal: mean 1, std s, cut at ±2s; uniform: [1-s, 1+s]" });
            finish(out, m, vec![], json!({ "dominance": curves }), vec![], summary, EXIT_OK)
        }
        AnalyzeCommand::Calibrate(a) => {
            let model = Model::load(&a.checkpoint)?;
            let test = a.data.load(Split::Test, a.seed)?;
            let idx: Vec<usize> = (0..a.maps.min(test.len())).collect();
            let xs = inputs(&test, &model, &idx)?;
            let classes = model.predict_batch(&Tensor::stack(&xs)?)?;
            let maps = saliency::explain_batch(&model, &xs, &classes, Method::Base(saliency::BaseMethod::Gradient), &MethodConfig::default())?;
            let metrics = a.metrics.metrics()?;
            let mcfg = a.metrics.config();
            let table = analysis::calibrate_metrics(&maps, &metrics, a.seed, &mcfg)?;
            let mut summary = String::new();
            for r in &table.rows {
                summary.push_str(&format!("{:<22} {:<15} {:>9.5}\n", r.comparison, r.metric.to_string(), r.mean));
            }
            let mut m = manifest(command, "analyze calibrate", a.seed)?;
            m.config = json!({ "metric": mcfg, "random_masks": "standard normal and uniform [-1, 1]" });
            finish(out, m, vec![], json!({ "calibration": table }), vec![], summary, EXIT_OK)
        }
        AnalyzeCommand::Edges(a) => {
            let model = Model::load(&a.checkpoint)?;
            let test = a.data.load(Split::Test, a.seed)?;
            let methods: Vec<Method> = a
                .methods
                .methods()?
                .into_iter()
                .filter(|m| !m.needs_conv() || model.gradcam_tap().is_some())
                .collect();
            let metrics = a.metrics.metrics()?;
            let (mcfg, scfg) = (a.methods.config(a.seed), a.metrics.config());
            let mut artifacts = Vec::new();
            let mut experiments = Vec::new();
            for i in 0..a.inputs.min(test.len()) {
                let x = test.input(i, model.input_shape())?;
                let e = analysis::edge_times_input_experiment(&model, &x, &methods, a.threshold, &mcfg, &metrics, &scfg)?;
                for p in &e.pairs {
                    let stem = format!("edges/{i:05}_{}", file_stem(p.method));
                    for (tag, map) in [("original", &p.original), ("masked", &p.edge_masked)] {
                        write(out, &format!("{stem}_{tag}.pgm"), saliency::pgm_bytes(map), &mut artifacts)?;
                        write(out, &format!("{stem}_{tag}.ppm"), saliency::ppm_bytes(map), &mut artifacts)?;
                    }
                }
                experiments.push(json!({
                    "input": i,
                    "class": e.class,
                    "similarity": e.pairs.iter().map(|p| json!({ "method": p.method, "values": p.similarity })).collect::<Vec<_>>(),
                }));
            }
            let summary = format!("{} inputs, {} methods\n", experiments.len(), methods.len());
            let mut m = manifest(command, "analyze edges", a.seed)?;
            m.config = json!({ "threshold": a.threshold, "method": mcfg, "metric": scfg });
            finish(out, m, artifacts, json!({ "edges": experiments }), vec![], summary, EXIT_OK)
        }
    }
}
