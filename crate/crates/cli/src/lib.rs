//! Command-line driver for the two-stage pipeline.
//!
//! Configuration is resolved in order: preset (or the configuration stored
//! in a loaded checkpoint), `--config` file, each `--set key=value`, then
//! `--seed`. Every command logs the resolved configuration before it runs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mom_core::checks::{gradcheck_suite, CheckRow};
use mom_core::config::{format_kv, parse_kv};
use mom_core::datasynth::{generate, Dataset, SignalSample};
use mom_core::evalsuite::{write_reports, MetricReport};
use mom_core::memory::{pool_merge, MemoryPool};
use mom_core::numerics::{ParamStore, Tensor};
use mom_core::persistence::{
    load_checkpoint, load_clip, load_dataset, load_pool, save_checkpoint, save_clip, save_dataset, save_pool,
    Checkpoint,
};
use mom_core::pipeline::{
    build_pool, evaluate, reconstruct, train_stage1, train_stage2, Models, PipelineConfig, Reconstruction, StepLog,
    TrainSummary,
};
use mom_core::Error;

pub const DATASET_FILE: &str = "dataset.momd";
pub const STAGE1_FILE: &str = "stage1.momc";
pub const STAGE2_FILE: &str = "stage2.momc";
pub const POOL_FILE: &str = "pool.momp";
pub const RECON_DIR: &str = "recon";
pub const METRICS_FILE: &str = "metrics.txt";
pub const GRADCHECK_FILE: &str = "gradcheck.txt";

const CONFIG_PREFIX: &str = "config.";

#[derive(Parser, Debug, Clone)]
#[command(
    name = "mom",
    version,
    about = "Brain-signal to video-clip pipeline with a mixture of memories"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Plain `key=value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for initialisation, batching and sampling; also the dataset seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; inputs default to files inside it.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    pub out: PathBuf,
    /// Override one setting, e.g. `--set model.n_layers=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Named base configuration: `default` or `full`.
    #[arg(long, global = true, default_value = "default")]
    pub preset: String,
    /// Write logs to the log file only.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Inputs {
    /// Dataset file [default: OUT/dataset.momd].
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Memory pool file [default: OUT/pool.momp].
    #[arg(long, value_name = "PATH")]
    pub pool: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Generate the synthetic dataset.
    Gen,
    /// Contrastive pre-training of the brain model.
    TrainStage1 {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Build the memory pool from the training split.
    BuildPool {
        #[command(flatten)]
        inputs: Inputs,
        /// Existing pool to merge the new entries into.
        #[arg(long, value_name = "PATH")]
        merge: Option<PathBuf>,
    },
    /// Joint training with retrieval, fusion and the diffusion decoder.
    TrainStage2 {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Sample one clip per input signal.
    Reconstruct {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Compute the metric report.
    Evaluate {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Directory of reconstructed clips; reconstructs when absent.
        #[arg(long, value_name = "DIR")]
        recon: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0} gradient check(s) failed")]
    GradCheck(usize),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const FORMAT: i32 = 4;
    pub const DATA: i32 = 5;
    pub const NUMERIC: i32 = 6;
    pub const RETRIEVAL: i32 = 7;
    pub const EVALUATION: i32 = 8;
    pub const GRADCHECK: i32 = 9;
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::GradCheck(_) => exit::GRADCHECK,
            CliError::Core(e) => match e {
                Error::Config(_) => exit::USAGE,
                Error::Io(_) => exit::IO,
                Error::Format(_) => exit::FORMAT,
                Error::Dimension(_) | Error::EmptyInput(_) | Error::Label(_) | Error::Schedule { .. } => exit::DATA,
                Error::Numeric(_) | Error::Diverged { .. } | Error::Sampling { .. } => exit::NUMERIC,
                Error::Pool(_) | Error::Capacity { .. } | Error::Retrieval(_) => exit::RETRIEVAL,
                Error::Protocol(_) | Error::Check(_) => exit::EVALUATION,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Line-oriented log written to `OUT/<command>.log` and, unless quiet, stdout.
pub struct Logger {
    file: BufWriter<File>,
    echo: bool,
}

impl Logger {
    pub fn create(path: &Path, echo: bool) -> CliResult<Self> {
        Ok(Self {
            file: BufWriter::new(File::create(path)?),
            echo,
        })
    }

    pub fn line(&mut self, text: &str) -> CliResult<()> {
        if self.echo {
            println!("{text}");
        }
        writeln!(self.file, "{text}")?;
        Ok(())
    }

    fn flush(&mut self) -> CliResult<()> {
        self.file.flush()?;
        Ok(())
    }
}

/// Applies `--config`, `--set` and `--seed` on top of `base`.
pub fn resolve_config(mut base: PipelineConfig, global: &GlobalArgs) -> CliResult<PipelineConfig> {
    if let Some(path) = &global.config {
        let text = fs::read_to_string(path)?;
        base.apply(&parse_kv(&text)?)?;
    }
    for kv in &global.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {kv:?}")))?;
        base.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = global.seed {
        base.seed = seed;
        base.data.seed = seed;
    }
    Ok(base)
}

fn config_from_checkpoint(ckpt: &Checkpoint) -> CliResult<PipelineConfig> {
    let map = ckpt
        .meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(CONFIG_PREFIX).map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok(PipelineConfig::from_map(&map)?)
}

fn make_checkpoint(cfg: &PipelineConfig, stage: u8, params: ParamStore) -> Checkpoint {
    let mut meta: std::collections::BTreeMap<String, String> = cfg
        .to_map()
        .into_iter()
        .map(|(k, v)| (format!("{CONFIG_PREFIX}{k}"), v))
        .collect();
    meta.insert("stage".into(), stage.to_string());
    Checkpoint { meta, params }
}

/// A command's resolved configuration, models, log and loaded inputs.
pub struct Context {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub log: Logger,
}

impl Context {
    fn open(name: &str, base: PipelineConfig, global: &GlobalArgs, data: Option<&Dataset>) -> CliResult<Self> {
        let mut cfg = resolve_config(base, global)?;
        if let Some(d) = data {
            cfg.adopt_data(&d.config);
        }
        cfg.validate()?;
        fs::create_dir_all(&global.out)?;
        let mut log = Logger::create(&global.out.join(format!("{name}.log")), !global.quiet)?;
        log.line(&format!("command={name}"))?;
        for line in format_kv(&cfg.resolved()).lines() {
            log.line(&format!("config {line}"))?;
        }
        Ok(Self {
            cfg,
            out: global.out.clone(),
            log,
        })
    }
}

fn or_default(path: &Option<PathBuf>, out: &Path, file: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| out.join(file))
}

fn samples(ds: &Dataset, split: Split) -> &[SignalSample] {
    match split {
        Split::Train => &ds.train,
        Split::Test => &ds.test,
    }
}

fn base_config(global: &GlobalArgs, ckpt: Option<&Checkpoint>) -> CliResult<PipelineConfig> {
    match ckpt {
        Some(c) => config_from_checkpoint(c),
        None => Ok(PipelineConfig::preset(&global.preset)?),
    }
}

/// Runs a training loop, forwarding step logs and keeping the first log
/// write error.
fn with_step_log<T>(log: &mut Logger, f: impl FnOnce(&mut dyn FnMut(&StepLog)) -> mom_core::Result<T>) -> CliResult<T> {
    let mut failure = None;
    let out = f(&mut |s: &StepLog| {
        if failure.is_none() {
            if let Err(e) = log.line(&s.to_string()) {
                failure = Some(e);
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(out?)
}

pub fn cmd_gen(global: &GlobalArgs) -> CliResult<Dataset> {
    let mut ctx = Context::open("gen", PipelineConfig::preset(&global.preset)?, global, None)?;
    let ds = generate(&ctx.cfg.data)?;
    let path = ctx.out.join(DATASET_FILE);
    save_dataset(&ds, &path)?;
    ctx.log.line(&format!(
        "wrote {} train={} test={}",
        path.display(),
        ds.train.len(),
        ds.test.len()
    ))?;
    ctx.log.flush()?;
    Ok(ds)
}

pub fn cmd_train_stage1(global: &GlobalArgs, inputs: &Inputs) -> CliResult<TrainSummary> {
    let ds = load_dataset(&or_default(&inputs.data, &global.out, DATASET_FILE))?;
    let ckpt = inputs.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let mut ctx = Context::open("train_stage1", base_config(global, ckpt.as_ref())?, global, Some(&ds))?;
    let models = Models::new(&ctx.cfg)?;
    let mut store = match ckpt {
        Some(c) => c.params,
        None => models.init_stage1(ctx.cfg.seed)?,
    };
    let cfg = ctx.cfg.clone();
    let summary = with_step_log(&mut ctx.log, |f| train_stage1(&cfg, &models, &ds.train, &mut store, f))?;
    let path = ctx.out.join(STAGE1_FILE);
    save_checkpoint(&make_checkpoint(&cfg, 1, store), &path)?;
    ctx.log
        .line(&format!("wrote {} steps={}", path.display(), summary.steps))?;
    ctx.log.flush()?;
    Ok(summary)
}

pub fn cmd_build_pool(global: &GlobalArgs, inputs: &Inputs, merge: Option<&Path>) -> CliResult<MemoryPool> {
    let ds = load_dataset(&or_default(&inputs.data, &global.out, DATASET_FILE))?;
    let mut ctx = Context::open("build_pool", PipelineConfig::preset(&global.preset)?, global, Some(&ds))?;
    let mut pool = build_pool(&ds.train)?;
    if let Some(m) = merge {
        pool = pool_merge(&load_pool(m)?, &pool)?;
        ctx.log.line(&format!("merged into {}", m.display()))?;
    }
    let path = or_default(&inputs.pool, &ctx.out, POOL_FILE);
    save_pool(&pool, &path)?;
    ctx.log
        .line(&format!("wrote {} entries={}", path.display(), pool.len()))?;
    ctx.log.flush()?;
    Ok(pool)
}

pub fn cmd_train_stage2(global: &GlobalArgs, inputs: &Inputs) -> CliResult<TrainSummary> {
    let ds = load_dataset(&or_default(&inputs.data, &global.out, DATASET_FILE))?;
    let ckpt = load_checkpoint(&or_default(&inputs.checkpoint, &global.out, STAGE1_FILE))?;
    let pool = load_pool(&or_default(&inputs.pool, &global.out, POOL_FILE))?;
    let mut ctx = Context::open("train_stage2", base_config(global, Some(&ckpt))?, global, Some(&ds))?;
    let models = Models::new(&ctx.cfg)?;
    let mut store = ckpt.params;
    let cfg = ctx.cfg.clone();
    let summary = with_step_log(&mut ctx.log, |f| {
        train_stage2(&cfg, &models, &ds.train, &pool, &mut store, f)
    })?;
    let path = ctx.out.join(STAGE2_FILE);
    save_checkpoint(&make_checkpoint(&cfg, 2, store), &path)?;
    ctx.log
        .line(&format!("wrote {} steps={}", path.display(), summary.steps))?;
    ctx.log.flush()?;
    Ok(summary)
}

struct Loaded {
    ds: Dataset,
    store: ParamStore,
    pool: MemoryPool,
    models: Models,
    ctx: Context,
}

fn load_trained(name: &str, global: &GlobalArgs, inputs: &Inputs) -> CliResult<Loaded> {
    let ds = load_dataset(&or_default(&inputs.data, &global.out, DATASET_FILE))?;
    let ckpt = load_checkpoint(&or_default(&inputs.checkpoint, &global.out, STAGE2_FILE))?;
    let pool = load_pool(&or_default(&inputs.pool, &global.out, POOL_FILE))?;
    let ctx = Context::open(name, base_config(global, Some(&ckpt))?, global, Some(&ds))?;
    let models = Models::new(&ctx.cfg)?;
    Ok(Loaded {
        ds,
        store: ckpt.params,
        pool,
        models,
        ctx,
    })
}

fn clip_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("{id:08}.momv"))
}

fn write_reconstructions(l: &mut Loaded, split: Split, dir: &Path) -> CliResult<Vec<Reconstruction>> {
    let input = samples(&l.ds, split);
    let recs = reconstruct(&l.models, &l.store, &l.pool, input, l.ctx.cfg.seed)?;
    fs::create_dir_all(dir)?;
    for r in &recs {
        save_clip(r.id, &r.clip, &clip_path(dir, r.id))?;
        let w = r.weights.as_array();
        l.ctx.log.line(&format!(
            "recon id={} w_txt={:.6} w_img={:.6} w_act={:.6} top_ids={:?}",
            r.id, w[0], w[1], w[2], r.top_ids
        ))?;
    }
    l.ctx
        .log
        .line(&format!("wrote {} clips to {}", recs.len(), dir.display()))?;
    Ok(recs)
}

/// Samples one clip per signal of `split` into `OUT/recon/`.
pub fn cmd_reconstruct(global: &GlobalArgs, inputs: &Inputs, split: Split) -> CliResult<Vec<Reconstruction>> {
    let mut l = load_trained("reconstruct", global, inputs)?;
    let dir = l.ctx.out.join(RECON_DIR);
    let recs = write_reconstructions(&mut l, split, &dir)?;
    l.ctx.log.flush()?;
    Ok(recs)
}

/// Reads every `.momv` clip in `dir`, ordered by file name.
pub fn load_clips(dir: &Path) -> CliResult<Vec<(u64, Tensor)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "momv"));
    paths.sort();
    Ok(paths.iter().map(|p| load_clip(p)).collect::<mom_core::Result<_>>()?)
}

pub fn cmd_evaluate(
    global: &GlobalArgs,
    inputs: &Inputs,
    split: Split,
    recon: Option<&Path>,
) -> CliResult<Vec<MetricReport>> {
    let mut l = load_trained("evaluate", global, inputs)?;
    let clips: Vec<(u64, Tensor)> = match recon {
        Some(dir) => load_clips(dir)?,
        None => {
            let dir = l.ctx.out.join(RECON_DIR);
            write_reconstructions(&mut l, split, &dir)?
                .into_iter()
                .map(|r| (r.id, r.clip))
                .collect()
        }
    };
    let reports = evaluate(&l.ctx.cfg, &l.models, &l.store, samples(&l.ds, split), Some(&clips))?;
    let text = write_reports(&reports)?;
    let path = l.ctx.out.join(METRICS_FILE);
    fs::write(&path, &text)?;
    for line in text.lines() {
        l.ctx.log.line(line)?;
    }
    l.ctx.log.line(&format!("wrote {}", path.display()))?;
    l.ctx.log.flush()?;
    Ok(reports)
}

pub fn format_check_table(rows: &[CheckRow]) -> String {
    let mut s = format!("{:<24} {:>12} {:>6} result\n", "check", "max_rel_err", "elems");
    for r in rows {
        s.push_str(&format!("{r}\n"));
    }
    s
}

pub fn cmd_gradcheck(global: &GlobalArgs) -> CliResult<Vec<CheckRow>> {
    let mut ctx = Context::open("gradcheck", PipelineConfig::preset(&global.preset)?, global, None)?;
    let rows = gradcheck_suite(ctx.cfg.seed)?;
    let table = format_check_table(&rows);
    fs::write(ctx.out.join(GRADCHECK_FILE), &table)?;
    for line in table.lines() {
        ctx.log.line(line)?;
    }
    ctx.log.flush()?;
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::GradCheck(failed));
    }
    Ok(rows)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Gen => cmd_gen(g).map(drop),
        Command::TrainStage1 { inputs } => cmd_train_stage1(g, inputs).map(drop),
        Command::BuildPool { inputs, merge } => cmd_build_pool(g, inputs, merge.as_deref()).map(drop),
        Command::TrainStage2 { inputs } => cmd_train_stage2(g, inputs).map(drop),
        Command::Reconstruct { inputs, split } => cmd_reconstruct(g, inputs, *split).map(drop),
        Command::Evaluate { inputs, split, recon } => cmd_evaluate(g, inputs, *split, recon.as_deref()).map(drop),
        Command::Gradcheck => cmd_gradcheck(g).map(drop),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
