//! Command-line interface: `synth`, `train`, `evaluate` and `generate`.
//!
//! Settings come from built-in defaults, then an optional TOML file
//! (`--config`), then flags. Every command writes the fully resolved settings
//! to `resolved_config.toml` in its output directory. A single `--seed`
//! drives every random stream through [`derive_seed`].

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::synth::{fixtures, synth_generate, OracleSpec};
use crate::data::{DataError, Dataset, GoalId, MarkId};
use crate::eval::{self, EvalConfig, MetricReport};
use crate::generation::{self, GenerationConfig, GenerationMode};
use crate::heads::PointEstimator;
use crate::model::{Model, ModelConfig, ModelError};
use crate::seed::derive_seed;
use crate::training::{self, Checkpoint, TrainConfig, TrainError, TrainingSet};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            Self::Data(_) => "data",
            Self::Model(_) => "model",
            Self::Train(_) => "train",
            Self::Config(_) => "config",
            Self::Io(_) => "io",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ctas", version, about = "Goal-aware temporal point process for action sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a corpus from a known generative process.
    Synth(SynthArgs),
    /// Fit a model to a corpus.
    Train(TrainArgs),
    /// Score checkpoints on a corpus.
    Evaluate(EvaluateArgs),
    /// Generate goal-conditioned sequences from a checkpoint.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML file with settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Oracle description; defaults to the built-in fixture.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Built-in fixture: `goal-chains` or `unit-chain`.
    #[arg(long)]
    fixture: Option<String>,
    /// Log-gap standard deviation for `goal-chains`.
    #[arg(long)]
    sigma: Option<f64>,
    /// Number of sequences.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    margin_weight: Option<f64>,
    #[arg(long)]
    ce_weight: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    estimator: Option<PointEstimator>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint file; repeat to aggregate several runs.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated prefix fractions in (0, 1].
    #[arg(long, value_delimiter = ',')]
    prefix_fractions: Option<Vec<f64>>,
    #[arg(long)]
    estimator: Option<PointEstimator>,
    #[arg(long)]
    mode: Option<GenerationMode>,
    /// Label written to the report.
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Generate from each sequence's goal and first action.
    #[arg(long, conflicts_with_all = ["goal", "first_mark", "first_time"])]
    corpus: Option<PathBuf>,
    #[arg(long, requires_all = ["first_mark", "first_time"])]
    goal: Option<String>,
    #[arg(long)]
    first_mark: Option<String>,
    #[arg(long)]
    first_time: Option<f64>,
    /// Sequences per request.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    mode: Option<GenerationMode>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    estimator: Option<PointEstimator>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSettings {
    pub n: usize,
    pub fixture: String,
    pub sigma: f64,
    pub spec: Option<PathBuf>,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            n: 500,
            fixture: "goal-chains".into(),
            sigma: 0.1,
            spec: None,
        }
    }
}

/// Every setting of a run after defaults, file and flags are merged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub out: PathBuf,
    pub train_fraction: f64,
    pub estimator: PointEstimator,
    pub prefix_fractions: Vec<f64>,
    pub dataset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
    pub synth: SynthSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 0,
            corpus: None,
            checkpoints: Vec::new(),
            out: PathBuf::new(),
            train_fraction: 0.8,
            estimator: PointEstimator::Median,
            prefix_fractions: vec![0.3, 0.6, 1.0],
            dataset: "corpus".into(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generation: GenerationConfig::default(),
            synth: SynthSettings::default(),
        }
    }
}

impl RunConfig {
    fn load(common: &Common, command: &str) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.command = command.into();
        cfg.out = common.out.clone();
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn write_resolved(&self) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        let text = toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(self.out.join("resolved_config.toml"), text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.generation.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CliError::Config(format!(
                "train_fraction {} must lie in (0, 1)",
                self.train_fraction
            )));
        }
        if self.prefix_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(CliError::Config("prefix fractions must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn existing(path: &Path) -> Result<PathBuf> {
    if !path.exists() {
        return Err(CliError::Config(format!("input {} does not exist", path.display())));
    }
    Ok(path.to_path_buf())
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.common, "synth")?;
    set(&mut cfg.synth.n, a.n);
    set(&mut cfg.synth.sigma, a.sigma);
    set(&mut cfg.synth.fixture, a.fixture);
    if let Some(p) = a.spec {
        cfg.synth.spec = Some(existing(&p)?);
    }
    cfg.write_resolved()?;
    let spec = match &cfg.synth.spec {
        Some(p) => OracleSpec::load(p)?,
        None => match cfg.synth.fixture.as_str() {
            "goal-chains" => fixtures::goal_chains(cfg.synth.sigma),
            "unit-chain" => fixtures::unit_chain(),
            other => return Err(CliError::Config(format!("unknown fixture {other:?}"))),
        },
    };
    let data = synth_generate(&spec, cfg.synth.n, derive_seed(cfg.seed, "synth"))?;
    data.write_jsonl(cfg.out.join("corpus.jsonl"))?;
    spec.save(cfg.out.join("spec.json"))?;
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.common, "train")?;
    cfg.corpus = Some(existing(&a.corpus)?);
    set(&mut cfg.train_fraction, a.train_fraction);
    set(&mut cfg.model.dim, a.dim);
    set(&mut cfg.model.clusters, a.clusters);
    set(&mut cfg.model.blocks, a.blocks);
    set(&mut cfg.model.heads, a.heads);
    set(&mut cfg.model.max_len, a.max_len);
    set(&mut cfg.train.gamma, a.gamma);
    set(&mut cfg.train.margin_weight, a.margin_weight);
    set(&mut cfg.train.ce_weight, a.ce_weight);
    set(&mut cfg.train.l2, a.l2);
    set(&mut cfg.train.lr, a.lr);
    set(&mut cfg.train.batch_size, a.batch);
    set(&mut cfg.train.epochs, a.epochs);
    set(&mut cfg.estimator, a.estimator);
    cfg.train.seed = derive_seed(cfg.seed, "train");
    cfg.validate()?;
    cfg.write_resolved()?;

    let data = Dataset::load_jsonl(cfg.corpus.as_ref().expect("set above"))?;
    let split = data.split_by_goal(cfg.train_fraction)?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    split.train.write_jsonl(cfg.out.join("train.jsonl"))?;
    split.test.write_jsonl(cfg.out.join("test.jsonl"))?;

    let mut model = training::initialize(&split.train, cfg.model, cfg.seed)?;
    model.estimator = cfg.estimator;
    let set = TrainingSet::new(&split.train, model.eos_gap)?;
    let ckpt_path = cfg.out.join("checkpoint.json");
    let mut csv = String::from("epoch,nll,goal_margin,action_margin,discounted_ce,total\n");
    let train_cfg = cfg.train;
    training::train(&mut model, &set, &train_cfg, |r, m| {
        let l = &r.loss;
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, l.nll, l.goal_margin, l.action_margin, l.discounted_ce, l.total
        ));
        Checkpoint::from_model(m, Some(train_cfg), r.epoch).save(&ckpt_path)
    })?;
    if train_cfg.epochs == 0 {
        Checkpoint::from_model(&model, Some(train_cfg), 0).save(&ckpt_path)?;
    }
    fs::write(cfg.out.join("losses.csv"), csv)?;
    Ok(())
}

fn load_model(path: &Path, estimator: Option<PointEstimator>) -> Result<Model> {
    let mut m = Model::load(existing(path)?)?;
    if let Some(e) = estimator {
        m.estimator = e;
    }
    Ok(m)
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.common, "evaluate")?;
    cfg.corpus = Some(existing(&a.corpus)?);
    cfg.checkpoints = a.checkpoint.clone();
    set(&mut cfg.prefix_fractions, a.prefix_fractions);
    set(&mut cfg.estimator, a.estimator);
    set(&mut cfg.dataset, a.dataset);
    cfg.generation.mode = a.mode.unwrap_or(GenerationMode::Greedy);
    cfg.generation.seed = derive_seed(cfg.seed, "evaluate");
    cfg.validate()?;
    cfg.write_resolved()?;

    let eval_cfg = EvalConfig {
        prefix_fractions: cfg.prefix_fractions.clone(),
        generation: cfg.generation,
    };
    let mut reports: Vec<MetricReport> = Vec::new();
    for path in &cfg.checkpoints {
        let model = load_model(path, Some(cfg.estimator))?;
        let test = Dataset::load_jsonl_with_vocab(
            cfg.corpus.as_ref().expect("set above"),
            model.marks.clone(),
            model.goals.clone(),
        )?;
        let seed = Checkpoint::load(path)?.train.map_or(cfg.seed, |t| t.seed);
        reports.push(eval::evaluate(&test, &model, &eval_cfg, &cfg.dataset, seed)?);
    }
    let json = serde_json::json!({
        "runs": reports,
        "summary": eval::summarize(&reports),
        "published_reference": eval::PUBLISHED_REFERENCE,
        "reference_note": "published values come from full-scale benchmark corpora and are not comparable to these runs",
    });
    fs::write(cfg.out.join("metrics.json"), serde_json::to_string_pretty(&json).map_err(std::io::Error::other)?)?;
    eval::write_csv(cfg.out.join("metrics.csv"), &reports)?;
    for r in &reports {
        print!("{}", eval::reference_table(r));
    }
    Ok(())
}

fn run_generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.common, "generate")?;
    cfg.checkpoints = vec![a.checkpoint.clone()];
    set(&mut cfg.generation.mode, a.mode);
    set(&mut cfg.generation.max_len, a.max_len);
    set(&mut cfg.generation.min_len, a.min_len);
    set(&mut cfg.estimator, a.estimator);
    cfg.generation.seed = derive_seed(cfg.seed, "generate");
    if let Some(c) = &a.corpus {
        cfg.corpus = Some(existing(c)?);
    }
    cfg.validate()?;
    cfg.write_resolved()?;

    let model = load_model(&a.checkpoint, Some(cfg.estimator))?;
    let mut requests = Vec::new();
    if let Some(c) = &cfg.corpus {
        let data = Dataset::load_jsonl_with_vocab(c, model.marks.clone(), model.goals.clone())?;
        for s in &data.sequences {
            let e = s.events()[0];
            requests.push((s.goal(), (e.mark, e.time)));
        }
    } else {
        let (Some(goal), Some(mark), Some(time)) = (&a.goal, &a.first_mark, a.first_time) else {
            return Err(CliError::Config("pass --corpus or --goal with --first-mark and --first-time".into()));
        };
        let g = model
            .goals
            .id(goal)
            .ok_or_else(|| DataError::Validation(format!("unknown goal {goal:?}")))?;
        let m = model
            .marks
            .id(mark)
            .filter(|&m| MarkId(m) != model.eos())
            .ok_or_else(|| DataError::Validation(format!("unknown mark {mark:?}")))?;
        if !(time >= 0.0) {
            return Err(DataError::Validation(format!("first time {time} must be nonnegative")).into());
        }
        requests.push((GoalId(g), (MarkId(m), time)));
    }
    let requests: Vec<_> = requests
        .iter()
        .flat_map(|r| std::iter::repeat_n(*r, a.count))
        .collect();
    let out = generation::generate_many(&model, &requests, &cfg.generation)?;
    generation::write_generated(cfg.out.join("generated.jsonl"), &model, &out)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Generate(a) => run_generate(a),
    }
}

/// Runs the command line `args` (including the program name) and returns the
/// process exit code: 0 on success, 2 on usage errors, 1 on failures. Failures
/// print one JSON object on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", serde_json::json!({"error": e.kind(), "message": e.to_string()}));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["ctas", "evaluate", "--corpus", "x.jsonl", "--out", "o"]), 2);
        assert_eq!(run(["ctas", "train", "--bogus"]), 2);
        assert_eq!(run(["ctas"]), 2);
    }

    #[test]
    fn failures_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let missing = dir.path().join("missing.jsonl");
        let code = run([
            "ctas".as_ref(),
            "train".as_ref(),
            "--corpus".as_ref(),
            missing.as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn config_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        fs::write(&file, "seed = 5\n[model]\ndim = 8\n[train]\nepochs = 3\n").unwrap();
        let common = Common {
            config: Some(file),
            out: dir.path().join("o"),
            seed: Some(9),
        };
        let cfg = RunConfig::load(&common, "train").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.dim, 8);
        assert_eq!(cfg.model.clusters, 8);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.gamma, 0.9);
        cfg.write_resolved().unwrap();
        let back: RunConfig =
            toml::from_str(&fs::read_to_string(dir.path().join("o/resolved_config.toml")).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn range_checks() {
        let mut cfg = RunConfig::default();
        cfg.train.gamma = 2.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.model.dim = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.model.clusters = 0;
        assert!(cfg.validate().is_err());
    }
}
