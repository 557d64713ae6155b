//! Command-line front end.
//!
//! Every subcommand resolves its configuration as defaults, then an
//! optional JSON file (`--config`), then explicit flags, and validates it
//! before touching any data. Runs that write files also write the
//! resolved configuration next to their outputs.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use crate::action_space::{discretize, parse_language, render_language, Action7, BinningConfig};
use crate::datagen::{build_suite, Dataset, SuiteConfig};
use crate::model::Model;
use crate::training::{
    ablation, affinity_correlation_with, distinct_descriptions, evaluate_retrieval_with, export_embeddings_to,
    finetune, pretrain, write_ablation_csv, FinetuneConfig, FinetuneScope, Prepared, TrainConfig, TrainError,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "lada", version, about = "Language-grounded decomposed action representations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a task suite and write its dataset as JSON Lines.
    Gen(GenArgs),
    /// Read 7-DoF actions from stdin, print one primitive sentence per line.
    Decompose(TextArgs),
    /// Read primitive sentences from stdin, print the bin-center action.
    Parse(TextArgs),
    /// Pretrain on a dataset.
    Pretrain(PretrainArgs),
    /// Fit the action head of a checkpoint with the L1 trajectory loss.
    Finetune(FinetuneArgs),
    /// Report description retrieval and affinity correlation.
    Eval(EvalArgs),
    /// Run the {soft, hard} x {adaptive, fixed} grid over several seeds.
    Ablate(AblateArgs),
    /// Write per-step action embeddings as CSV.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct BinningArgs {
    /// JSON file with a full or partial binning configuration.
    #[arg(long)]
    pub binning: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SuiteArgs {
    #[arg(long)]
    pub n_tasks: Option<usize>,
    /// Fraction of each task's phases drawn from the shared pool.
    #[arg(long)]
    pub sharing: Option<f64>,
    #[arg(long)]
    pub phases_per_task: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub component_choices: Option<usize>,
    #[arg(long)]
    pub phase_duration: Option<usize>,
    #[arg(long)]
    pub action_noise: Option<f64>,
    #[arg(long)]
    pub obs_dim: Option<usize>,
    #[arg(long)]
    pub obs_noise: Option<f64>,
    #[arg(long)]
    pub nuisance: Option<f64>,
    /// Do not append a transfer task.
    #[arg(long)]
    pub no_transfer: bool,
}

/// Resolved `gen` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub episodes: usize,
    pub suite: SuiteConfig,
    pub binning: BinningConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { seed: 0, episodes: 20, suite: SuiteConfig::default(), binning: BinningConfig::default() }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset output path (.jsonl). The suite and resolved config are
    /// written alongside as `<out>.suite.json` and `<out>.config.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Episodes per task.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[command(flatten)]
    pub suite: SuiteArgs,
    #[command(flatten)]
    pub binning: BinningArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TextArgs {
    #[command(flatten)]
    pub binning: BinningArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Weight of the action-description term.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub w_t: Option<f64>,
    #[arg(long)]
    pub w_r: Option<f64>,
    #[arg(long)]
    pub w_g: Option<f64>,
    /// Moving-average window (steps).
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub hard_labels: bool,
    #[arg(long)]
    pub fixed_weights: bool,
    #[arg(long)]
    pub freeze_encoders: bool,
    #[arg(long)]
    pub inverse_weighting: bool,
    #[arg(long)]
    pub embed: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub holdout: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint.json, metrics.csv, evals.csv and
    /// config.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for checkpoint.json, finetune.csv and config.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train every parameter, not just the action head.
    #[arg(long)]
    pub unfreeze_all: bool,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Heldout,
    Transfer,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "heldout")]
    pub split: Split,
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    /// Print the metrics as one JSON object.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    /// Comparison CSV output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Use this dataset for every seed instead of generating one suite per
    /// seed.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Per-run results as CSV.
    #[arg(long)]
    pub raw: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub suite: SuiteArgs,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T, CliError> {
    path.as_ref().map_or_else(|| Ok(T::default()), |p| read_json(p))
}

fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    Model::load(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

macro_rules! overlay {
    ($($dst:expr => $src:expr),* $(,)?) => {
        $(if let Some(v) = $src { $dst = v; })*
    };
}

fn apply_suite(cfg: &mut SuiteConfig, a: &SuiteArgs) {
    overlay! {
        cfg.n_tasks => a.n_tasks,
        cfg.sharing => a.sharing,
        cfg.phases_per_task => a.phases_per_task,
        cfg.pool_size => a.pool_size,
        cfg.component_choices => a.component_choices,
        cfg.phase_duration => a.phase_duration,
        cfg.action_noise => a.action_noise,
        cfg.obs_dim => a.obs_dim,
        cfg.obs_noise => a.obs_noise,
        cfg.nuisance => a.nuisance,
    }
    if a.no_transfer {
        cfg.transfer_task = false;
    }
}

fn apply_train(cfg: &mut TrainConfig, a: &TrainFlags) {
    overlay! {
        cfg.steps => a.steps,
        cfg.batch_size => a.batch_size,
        cfg.lr => a.lr,
        cfg.momentum => a.momentum,
        cfg.clip_norm => a.clip_norm,
        cfg.seed => a.seed,
        cfg.contrastive.tau => a.tau,
        cfg.contrastive.lambda => a.lambda,
        cfg.affinity.w_t => a.w_t,
        cfg.affinity.w_r => a.w_r,
        cfg.affinity.w_g => a.w_g,
        cfg.window => a.window,
        cfg.model.embed => a.embed,
        cfg.model.hidden => a.hidden,
        cfg.holdout => a.holdout,
        cfg.eval_every => a.eval_every,
        cfg.threads => a.threads,
    }
    cfg.hard_labels |= a.hard_labels;
    cfg.fixed_weights |= a.fixed_weights;
    cfg.freeze_encoders |= a.freeze_encoders;
    cfg.inverse_weighting |= a.inverse_weighting;
}

fn resolve_train(config: &Option<PathBuf>, flags: &TrainFlags) -> Result<TrainConfig, CliError> {
    let mut cfg: TrainConfig = load_config(config)?;
    apply_train(&mut cfg, flags);
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn binning(a: &BinningArgs) -> Result<BinningConfig, CliError> {
    let cfg: BinningConfig = load_config(&a.binning)?;
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn gen(a: &GenArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg: GenConfig = load_config(&a.config)?;
    overlay! { cfg.seed => a.seed, cfg.episodes => a.episodes }
    apply_suite(&mut cfg.suite, &a.suite);
    if a.binning.binning.is_some() {
        cfg.binning = binning(&a.binning)?;
    }
    cfg.suite.validate().map_err(usage)?;
    cfg.binning.validate().map_err(usage)?;
    if cfg.episodes == 0 {
        return Err(usage("episodes must be positive"));
    }
    let suite = build_suite(cfg.seed, &cfg.suite, &cfg.binning)?;
    let data = suite.generate_dataset(cfg.episodes, cfg.seed)?;
    data.write(&a.out)?;
    suite.save(&sibling(&a.out, ".suite.json"))?;
    write_json(&sibling(&a.out, ".config.json"), &cfg)?;
    writeln!(stdout, "wrote {} steps of {} tasks to {}", data.records.len(), data.n_tasks(), a.out.display())?;
    Ok(())
}

fn parse_action_line(line: &str) -> Result<Action7, String> {
    let values: Vec<f64> = line
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
        .collect::<Result<_, _>>()?;
    Action7::from_slice(&values).map_err(|e| e.to_string())
}

fn decompose(a: &TextArgs, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = binning(&a.binning)?;
    for (k, line) in stdin.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let action = parse_action_line(&line).map_err(|e| CliError::Runtime(format!("line {}: {e}", k + 1)))?;
        writeln!(stdout, "{}", render_language(&discretize(&action, &cfg)?, &cfg)?)?;
    }
    Ok(())
}

fn parse(a: &TextArgs, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = binning(&a.binning)?;
    for (k, line) in stdin.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let triple = parse_language(&line, &cfg).map_err(|e| CliError::Runtime(format!("line {}: {e}", k + 1)))?;
        let v = triple.center_action(&cfg).to_array();
        let text: Vec<String> = v.iter().map(|x| if *x == 0.0 { "0".into() } else { x.to_string() }).collect();
        writeln!(stdout, "{}", text.join(" "))?;
    }
    Ok(())
}

/// Writes a pretraining failure's last good checkpoint before reporting.
fn report_divergence(e: TrainError, out: &Path) -> CliError {
    if let TrainError::Diverged { last_good, .. } = &e {
        let path = out.join("last_good.json");
        if let Ok(json) = serde_json::to_string(last_good.as_ref()) {
            if std::fs::write(&path, json).is_ok() {
                return CliError::Runtime(format!("{e}; last good checkpoint written to {}", path.display()));
            }
        }
    }
    CliError::Runtime(e.to_string())
}

fn pretrain_cmd(a: &PretrainArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve_train(&a.config, &a.train)?;
    let data = read_dataset(&a.data)?;
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let out = pretrain(&cfg, &data).map_err(|e| report_divergence(e, &a.out))?;
    out.model.save(&a.out.join("checkpoint.json"))?;
    out.log.write_steps_csv(std::fs::File::create(a.out.join("metrics.csv"))?)?;
    out.log.write_evals_csv(std::fs::File::create(a.out.join("evals.csv"))?)?;
    if let Some(e) = out.log.evals.last() {
        writeln!(stdout, "step {} retrieval_top1 {} spearman {}", e.step, e.retrieval_top1, e.spearman)?;
    }
    Ok(())
}

fn finetune_cmd(a: &FinetuneArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg: FinetuneConfig = load_config(&a.config)?;
    overlay! {
        cfg.steps => a.steps,
        cfg.batch_size => a.batch_size,
        cfg.lr => a.lr,
        cfg.momentum => a.momentum,
        cfg.seed => a.seed,
        cfg.eval_every => a.eval_every,
        cfg.threads => a.threads,
    }
    if a.unfreeze_all {
        cfg.scope = FinetuneScope::All;
    }
    cfg.validate().map_err(usage)?;
    let data = read_dataset(&a.data)?;
    let model = load_model(&a.checkpoint)?;
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let (model, log) = finetune(&cfg, &data, model)?;
    model.save(&a.out.join("checkpoint.json"))?;
    log.write_csv(std::fs::File::create(a.out.join("finetune.csv"))?)?;
    if let Some((s, l)) = log.evals.last() {
        writeln!(stdout, "step {s} heldout_l1 {l}")?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    split: String,
    n: usize,
    k: usize,
    chance: f64,
    retrieval_top1: f64,
    spearman: Option<f64>,
    per_task: std::collections::BTreeMap<usize, f64>,
}

fn eval_cmd(a: &EvalArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    if !(0.0..1.0).contains(&a.holdout) {
        return Err(usage("holdout must lie in [0, 1)"));
    }
    let data = read_dataset(&a.data)?;
    let model = load_model(&a.checkpoint)?;
    let prep = Prepared::new(&data)?;
    let splits = data.split(a.holdout);
    let idx: Vec<usize> = match a.split {
        Split::Train => splits.train,
        Split::Heldout => splits.heldout,
        Split::Transfer => splits.transfer,
        Split::All => (0..prep.len()).collect(),
    };
    if idx.is_empty() {
        return Err(CliError::Runtime(format!("the {:?} split is empty", a.split).to_lowercase()));
    }
    let r = evaluate_retrieval_with(&model, &prep, &idx, &distinct_descriptions(&prep))?;
    let rho = affinity_correlation_with(&model, &prep, &idx, &Default::default()).ok();
    let report = EvalReport {
        split: format!("{:?}", a.split).to_lowercase(),
        n: r.n,
        k: r.k,
        chance: r.chance(),
        retrieval_top1: r.top1,
        spearman: rho,
        per_task: r.per_task,
    };
    if a.json {
        writeln!(stdout, "{}", serde_json::to_string(&report)?)?;
    } else {
        writeln!(stdout, "split {} n {} candidates {} chance {}", report.split, report.n, report.k, report.chance)?;
        writeln!(stdout, "retrieval_top1 {}", report.retrieval_top1)?;
        match report.spearman {
            Some(r) => writeln!(stdout, "spearman {r}")?,
            None => writeln!(stdout, "spearman undefined (constant affinity)")?,
        }
        for (t, acc) in &report.per_task {
            writeln!(stdout, "task {t} retrieval_top1 {acc}")?;
        }
    }
    Ok(())
}

/// Resolved `ablate` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub suite: SuiteConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            episodes: 20,
            suite: SuiteConfig::default(),
            train: TrainConfig::default(),
            data: None,
        }
    }
}

fn ablate_cmd(a: &AblateArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg: AblateConfig = load_config(&a.config)?;
    cfg.seeds = (a.first_seed..a.first_seed + a.seeds).collect();
    overlay! { cfg.episodes => a.episodes }
    if a.data.is_some() {
        cfg.data = a.data.clone();
    }
    apply_suite(&mut cfg.suite, &a.suite);
    apply_train(&mut cfg.train, &a.train);
    cfg.train.validate().map_err(usage)?;
    cfg.suite.validate().map_err(usage)?;
    if cfg.seeds.is_empty() || cfg.episodes == 0 {
        return Err(usage("seeds and episodes must be positive"));
    }
    let binning = BinningConfig::default();
    let datasets: Vec<(u64, Dataset)> = match &cfg.data {
        Some(path) => {
            let d = read_dataset(path)?;
            cfg.seeds.iter().map(|&s| (s, d.clone())).collect()
        }
        None => cfg
            .seeds
            .iter()
            .map(|&s| Ok((s, build_suite(s, &cfg.suite, &binning)?.generate_dataset(cfg.episodes, s)?)))
            .collect::<Result<_, CliError>>()?,
    };
    let refs: Vec<(u64, &Dataset)> = datasets.iter().map(|(s, d)| (*s, d)).collect();
    let (rows, raw) = ablation(&cfg.train, &refs)?;
    write_ablation_csv(&rows, std::fs::File::create(&a.out)?)?;
    write_json(&sibling(&a.out, ".config.json"), &cfg)?;
    if let Some(path) = &a.raw {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variant", "seed", "spearman", "heldout_top1", "transfer_top1", "chance", "final_total", "finite"])?;
        for (name, s) in &raw {
            w.write_record([
                name.clone(),
                s.seed.to_string(),
                s.spearman.to_string(),
                s.heldout_top1.to_string(),
                s.transfer_top1.map_or_else(String::new, |v| v.to_string()),
                s.chance.to_string(),
                s.final_total.to_string(),
                s.finite.to_string(),
            ])?;
        }
        w.flush()?;
    }
    for r in &rows {
        writeln!(
            stdout,
            "{:<14} spearman {:.4} heldout {:.4} transfer {:.4} final_total {:.4}",
            r.variant, r.spearman, r.heldout_top1, r.transfer_top1, r.final_total
        )?;
    }
    Ok(())
}

fn export_cmd(a: &ExportArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let data = read_dataset(&a.data)?;
    let model = load_model(&a.checkpoint)?;
    export_embeddings_to(&model, &data, &a.out)?;
    writeln!(stdout, "wrote {} embeddings to {}", data.records.len(), a.out.display())?;
    Ok(())
}

pub fn dispatch(cli: &Cli, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Gen(a) => gen(a, stdout),
        Command::Decompose(a) => decompose(a, stdin, stdout),
        Command::Parse(a) => parse(a, stdin, stdout),
        Command::Pretrain(a) => pretrain_cmd(a, stdout),
        Command::Finetune(a) => finetune_cmd(a, stdout),
        Command::Eval(a) => eval_cmd(a, stdout),
        Command::Ablate(a) => ablate_cmd(a, stdout),
        Command::Export(a) => export_cmd(a, stdout),
    }
}

/// Parses `args` (including the program name), runs the subcommand, and
/// returns the process exit code.
pub fn run<I, T>(args: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(stderr, "{}", e.render());
                    1
                }
            };
        }
    };
    match dispatch(&cli, stdin, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
