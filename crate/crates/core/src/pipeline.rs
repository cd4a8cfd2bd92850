//! Both training stages, pool construction, reconstruction and evaluation,
//! driven by one [`PipelineConfig`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::brain_model::{BrainModel, BrainModelConfig};
use crate::config::Settings;
use crate::datasynth::{Generator, GeneratorConfig, SignalSample};
use crate::decoder::{stage2_loss, Decoder, DecoderConfig, Stage2Terms, Stage2Weights};
use crate::error::{dim_err, Error, Result};
use crate::evalsuite::{
    self, centroid_flow, epe, frame_gray, mean_std, nway_topk_batch, psnr, retrieval_protocol, ssim,
    temporal_consistency, MetricReport, RetrievalAccuracy,
};
use crate::fusion::FusionModule;
use crate::impl_settings;
use crate::memory::{mean_frames, retrieve, MemoryModule, MemoryPool, PoolMatrices, RetrievalResult, RoutingWeights};
use crate::numerics::{AdamW, AdamWConfig, Graph, OneCycle, ParamStore, Rng, Tensor, Var};
use crate::objectives::{stage1_loss, Stage1Inputs, Stage1Weights};

const STREAM_INIT1: u64 = 1;
const STREAM_INIT2: u64 = 2;
const STREAM_BATCH1: u64 = 3;
const STREAM_BATCH2: u64 = 4;
const STREAM_NOISE: u64 = 5;
const STREAM_SAMPLE: u64 = 6;
const STREAM_EVAL: u64 = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    /// Peak learning rate of the one-cycle schedule.
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Log every n-th step; the first and last steps are always logged.
    pub log_every: usize,
}

impl_settings!(TrainSettings {
    steps,
    batch,
    lr,
    weight_decay,
    clip_norm,
    log_every,
});

impl TrainSettings {
    fn stage1() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            lr: 3e-3,
            weight_decay: 0.01,
            clip_norm: 1.0,
            log_every: 100,
        }
    }

    fn stage2() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 2e-3,
            ..Self::stage1()
        }
    }

    fn validate(&self, section: &str) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config(format!("{section}.batch must be positive")));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("{section}.lr must be positive")));
        }
        if !(self.clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "{section}: clip_norm > 0 and weight_decay >= 0 required"
            )));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            weight_decay: self.weight_decay,
            max_grad_norm: Some(self.clip_norm),
            frozen: vec![crate::decoder::SKIP.to_string()],
            ..AdamWConfig::default()
        })
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self::stage1()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemorySettings {
    pub top_k: usize,
    /// Temperature of the retrieval auxiliary loss over mixture scores.
    pub retrieval_tau: f64,
    /// Scale of the signal branch in the fused condition.
    pub alpha: f64,
}

impl Default for MemorySettings {
    fn default() -> Self {
        Self {
            top_k: crate::memory::DEFAULT_TOP_K,
            retrieval_tau: 0.07,
            alpha: 1.0,
        }
    }
}

impl_settings!(MemorySettings {
    top_k,
    retrieval_tau,
    alpha
});

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Settings {
    pub lambda_stage1: f64,
    pub lambda_diffusion: f64,
    pub lambda_retrieval: f64,
}

impl Default for Stage2Settings {
    fn default() -> Self {
        let w = Stage2Weights::default();
        Self {
            lambda_stage1: w.lambda_stage1,
            lambda_diffusion: w.lambda_diffusion,
            lambda_retrieval: w.lambda_retrieval,
        }
    }
}

impl_settings!(Stage2Settings {
    lambda_stage1,
    lambda_diffusion,
    lambda_retrieval,
});

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub trials: usize,
    /// Candidates per retrieval subset.
    pub subset: usize,
    /// Way count of the larger N-way classification test; the smaller is 2.
    pub ways: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            trials: 100,
            subset: evalsuite::DEFAULT_SUBSET,
            ways: 10,
        }
    }
}

impl_settings!(EvalSettings { trials, subset, ways });

/// Every setting of a run. Keys are `section.field`, plus the top-level
/// `seed`, which drives initialisation, batching and sampling. Shapes shared
/// between sections are taken from `data.*`; setting them elsewhere is
/// rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: GeneratorConfig,
    pub model: BrainModelConfig,
    pub decoder: DecoderConfig,
    pub loss: Stage1Weights,
    pub stage2: Stage2Settings,
    pub memory: MemorySettings,
    pub train1: TrainSettings,
    pub train2: TrainSettings,
    pub eval: EvalSettings,
}

const DERIVED: [&str; 9] = [
    "model.n_voxels",
    "model.d_clip",
    "model.d_act",
    "model.n_classes",
    "decoder.frames",
    "decoder.channels",
    "decoder.height",
    "decoder.width",
    "decoder.d_cond",
];

pub const PRESETS: [&str; 2] = ["default", "full"];

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            data: GeneratorConfig::default(),
            model: BrainModelConfig::default(),
            decoder: DecoderConfig::default(),
            loss: Stage1Weights::default(),
            stage2: Stage2Settings::default(),
            memory: MemorySettings::default(),
            train1: TrainSettings::stage1(),
            train2: TrainSettings::stage2(),
            eval: EvalSettings::default(),
        };
        c.sync();
        c
    }
}

impl PipelineConfig {
    /// `default`, or `full`: 8000 stage-1 steps at batch 144 and 20 epochs of
    /// stage 2 at batch 32.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self::default();
        match name {
            "default" => {}
            "full" => {
                c.train1.steps = 8000;
                c.train1.batch = 144;
                c.train2.batch = 32;
                c.train2.steps = 20 * c.data.n_train.div_ceil(c.train2.batch);
            }
            _ => return Err(Error::Config(format!("unknown preset {name:?}; known: {PRESETS:?}"))),
        }
        Ok(c)
    }

    fn sync(&mut self) {
        let d = &self.data;
        self.model.n_voxels = d.n_voxels;
        self.model.d_clip = d.d_clip;
        self.model.d_act = d.d_act;
        self.model.n_classes = d.n_classes;
        self.decoder.frames = d.frames;
        self.decoder.channels = d.channels;
        self.decoder.height = d.height;
        self.decoder.width = d.width;
        self.decoder.d_cond = d.d_clip;
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if DERIVED.contains(&key) {
            return Err(Error::Config(format!("{key} is derived from data.*; set that instead")));
        }
        if key == "seed" {
            self.seed = value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for seed")))?;
            return Ok(());
        }
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        let r = match section {
            "data" => self.data.set(field, value),
            "model" => self.model.set(field, value),
            "decoder" => self.decoder.set(field, value),
            "loss" => self.loss.set(field, value),
            "stage2" => self.stage2.set(field, value),
            "memory" => self.memory.set(field, value),
            "train1" => self.train1.set(field, value),
            "train2" => self.train2.set(field, value),
            "eval" => self.eval.set(field, value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        };
        r.map_err(|e| match e {
            Error::Config(m) if m.starts_with("unknown key") => Error::Config(format!("unknown key {key:?}")),
            other => other,
        })?;
        self.sync();
        Ok(())
    }

    /// Takes the generator settings of a loaded dataset.
    pub fn adopt_data(&mut self, data: &GeneratorConfig) {
        self.data = data.clone();
        self.sync();
    }

    pub fn apply(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        map.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    fn sections(&self) -> Vec<(&'static str, Vec<(&'static str, String)>)> {
        vec![
            ("data", self.data.entries()),
            ("model", self.model.entries()),
            ("decoder", self.decoder.entries()),
            ("loss", self.loss.entries()),
            ("stage2", self.stage2.entries()),
            ("memory", self.memory.entries()),
            ("train1", self.train1.entries()),
            ("train2", self.train2.entries()),
            ("eval", self.eval.entries()),
        ]
    }

    /// Every key including derived ones, for logging.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let mut m: BTreeMap<String, String> = self
            .sections()
            .into_iter()
            .flat_map(|(s, es)| es.into_iter().map(move |(k, v)| (format!("{s}.{k}"), v)))
            .collect();
        m.insert("seed".into(), self.seed.to_string());
        m
    }

    /// Settable keys only; [`PipelineConfig::from_map`] inverts this.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = self.resolved();
        m.retain(|k, _| !DERIVED.contains(&k.as_str()));
        m
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        c.apply(map)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.decoder.validate()?;
        self.loss.validate()?;
        self.train1.validate("train1")?;
        self.train2.validate("train2")?;
        if self.memory.top_k == 0 {
            return Err(Error::Config("memory.top_k must be at least 1".into()));
        }
        if !(self.memory.retrieval_tau > 0.0) {
            return Err(Error::Config("memory.retrieval_tau must be positive".into()));
        }
        if self.eval.trials == 0 || self.eval.subset < 2 || self.eval.ways < 2 {
            return Err(Error::Config(
                "eval needs trials >= 1, subset >= 2 and ways >= 2".into(),
            ));
        }
        if self.eval.ways > self.data.n_classes {
            return Err(Error::Config(format!(
                "eval.ways {} exceeds data.n_classes {}",
                self.eval.ways, self.data.n_classes
            )));
        }
        Ok(())
    }

    pub fn stage2_weights(&self) -> Stage2Weights {
        Stage2Weights {
            stage1: self.loss.clone(),
            lambda_stage1: self.stage2.lambda_stage1,
            lambda_diffusion: self.stage2.lambda_diffusion,
            lambda_retrieval: self.stage2.lambda_retrieval,
        }
    }
}

/// The four networks of the pipeline.
#[derive(Clone, Debug)]
pub struct Models {
    pub brain: BrainModel,
    pub memory: MemoryModule,
    pub fusion: FusionModule,
    pub decoder: Decoder,
}

impl Models {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let mut fusion = FusionModule::new(m.d_model, m.d_clip, m.d_act);
        fusion.alpha = cfg.memory.alpha;
        Ok(Self {
            brain: BrainModel::new(m.clone())?,
            memory: MemoryModule::new(m.d_model, m.d_clip, m.d_act, cfg.memory.top_k)?,
            fusion,
            decoder: Decoder::new(cfg.decoder.clone())?,
        })
    }

    /// Fresh stage-1 parameters.
    pub fn init_stage1(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.brain.init(&mut store, &mut Rng::new(seed).fork(STREAM_INIT1))?;
        Ok(store)
    }

    /// Adds memory, fusion and decoder parameters unless already present.
    pub fn ensure_stage2(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        if store.index_of("dec.out.w").is_some() {
            return Ok(());
        }
        let mut rng = Rng::new(seed).fork(STREAM_INIT2);
        let mut extra = ParamStore::new();
        self.memory.init(&mut extra, &mut rng)?;
        self.fusion.init(&mut extra, &mut rng)?;
        self.decoder.init(&mut extra, &mut rng)?;
        store.merge_from(&extra);
        Ok(())
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub stage: u8,
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub terms: Vec<(&'static str, f64)>,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage={} step={} lr={:.6e} grad_norm={:.6}",
            self.stage, self.step, self.lr, self.grad_norm
        )?;
        for (k, v) in &self.terms {
            write!(f, " {k}={v:.6}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    /// Total loss at every step, before that step's update.
    pub losses: Vec<f64>,
    /// Diffusion term at every stage-2 step.
    pub diffusion: Vec<f64>,
}

fn rows_const(g: &mut Graph, rows: &[&[f32]]) -> Result<Var> {
    Ok(g.constant(&Tensor::stack_rows(rows)?))
}

pub(crate) struct BatchVars {
    pub(crate) inputs: Stage1Inputs,
    pub(crate) embeddings: Vec<Var>,
}

pub(crate) fn stage1_batch(
    models: &Models,
    g: &mut Graph,
    store: &ParamStore,
    batch: &[&SignalSample],
) -> Result<BatchVars> {
    let brain = &models.brain;
    let mut globals = Vec::with_capacity(batch.len());
    let mut embeddings = Vec::with_capacity(batch.len());
    let mut imgs = Vec::with_capacity(batch.len());
    for s in batch {
        let e = brain.encode(g, store, &s.signal)?;
        globals.push(e.global_token);
        embeddings.push(e.embedding);
        let frames = g.constant(&s.e_img);
        imgs.push(brain.consolidate_frames(g, store, frames)?);
    }
    let f_c = g.concat_rows(&globals)?;
    let img = g.concat_rows(&imgs)?;
    let txt = rows_const(g, &batch.iter().map(|s| s.e_txt.data()).collect::<Vec<_>>())?;
    let act = rows_const(g, &batch.iter().map(|s| s.e_act.data()).collect::<Vec<_>>())?;
    let f_a = brain.action_project(g, store, f_c)?;
    let logits = brain.classify(g, store, f_c)?;
    let labels = Tensor::stack_rows(&batch.iter().map(|s| s.labels.data()).collect::<Vec<_>>())?;
    Ok(BatchVars {
        inputs: Stage1Inputs {
            f_c,
            img,
            txt,
            f_a,
            act,
            logits,
            labels,
        },
        embeddings,
    })
}

fn check_data(samples: &[SignalSample], what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput(format!("no {what} samples")));
    }
    Ok(())
}

fn should_log(step: usize, total: usize, every: usize) -> bool {
    step == 0 || step + 1 == total || (every > 0 && step.is_multiple_of(every))
}

fn optimizer_step(g: &Graph, root: Var, store: &mut ParamStore, opt: &mut AdamW, lr: f64, step: usize) -> Result<f64> {
    let loss = g.scalar(root);
    if !loss.is_finite() {
        return Err(Error::Diverged { step });
    }
    let grads = g.backward(root)?;
    store.zero_grads();
    grads.accumulate_into(store);
    let norm = opt.step(store, lr);
    if !norm.is_finite() || store.iter().any(|p| !p.tensor.all_finite()) {
        return Err(Error::Diverged { step });
    }
    Ok(norm)
}

/// Contrastive pre-training of the brain model on `train`.
pub fn train_stage1(
    cfg: &PipelineConfig,
    models: &Models,
    train: &[SignalSample],
    store: &mut ParamStore,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainSummary> {
    check_data(train, "training")?;
    let t = &cfg.train1;
    let mut rng = Rng::new(cfg.seed).fork(STREAM_BATCH1);
    let mut opt = t.optimizer();
    let sched = OneCycle::new(t.lr, t.steps);
    let mut summary = TrainSummary::default();
    let b = t.batch.min(train.len());
    for step in 0..t.steps {
        let batch: Vec<&SignalSample> = rng
            .sample_distinct(train.len(), b)
            .into_iter()
            .map(|i| &train[i])
            .collect();
        let mut g = Graph::new();
        let vars = stage1_batch(models, &mut g, store, &batch)?;
        let terms = stage1_loss(&mut g, &vars.inputs, &cfg.loss)?;
        let lr = sched.lr(step);
        let grad_norm = optimizer_step(&g, terms.total, store, &mut opt, lr, step)?;
        summary.losses.push(g.scalar(terms.total));
        if should_log(step, t.steps, t.log_every) {
            on_step(&StepLog {
                stage: 1,
                step,
                lr,
                grad_norm,
                terms: terms.values(&g).to_vec(),
            });
        }
    }
    summary.steps = t.steps;
    Ok(summary)
}

/// Memory pool from the training split.
pub fn build_pool(train: &[SignalSample]) -> Result<MemoryPool> {
    check_data(train, "training")?;
    MemoryPool::from_samples(train, "train")
}

/// Routing, retrieval and fusion for a batch of encoded samples. Returns the
/// `B x N` mixture scores, the per-sample retrievals and conditions.
struct Conditioned {
    scores: Var,
    retrievals: Vec<RetrievalResult>,
    conds: Vec<Var>,
}

fn condition_batch(
    models: &Models,
    g: &mut Graph,
    store: &ParamStore,
    embeddings: &[Var],
    pool: &MemoryPool,
    mats: &PoolMatrices,
) -> Result<Conditioned> {
    let mem = &models.memory;
    let pooled = mem.pool_tokens(g, embeddings)?;
    let weights = mem.route_vars(g, store, pooled)?;
    let (qc, qa) = mem.query_vars(g, store, pooled)?;
    let scores = mem.score_vars(g, weights, qc, qa, mats)?;
    let n = pool.len();
    let (wv, sv) = (g.value(weights).to_vec(), g.value(scores).to_vec());
    let mut retrievals = Vec::with_capacity(embeddings.len());
    let mut conds = Vec::with_capacity(embeddings.len());
    for (i, &emb) in embeddings.iter().enumerate() {
        let row: Vec<f32> = sv[i * n..(i + 1) * n].iter().map(|&v| v as f32).collect();
        let w = RoutingWeights {
            w_txt: wv[3 * i],
            w_img: wv[3 * i + 1],
            w_act: wv[3 * i + 2],
        };
        let r = retrieve(&Tensor::vector(row), pool, mem.top_k, w)?;
        let img = g.constant(&r.image_mems);
        let act = g.constant(&r.action_mems);
        let f_hat = models.fusion.attend_memories(g, store, emb, img, act)?;
        let text = g.constant_raw(1, r.text_mem.len(), r.text_mem.to_f64())?;
        conds.push(models.fusion.fuse(g, store, f_hat, text)?);
        retrievals.push(r);
    }
    Ok(Conditioned {
        scores,
        retrievals,
        conds,
    })
}

/// Stage-2 objective for one batch: stage-1 terms, diffusion averaged over
/// `train2.batch` noise draws cycling through `batch`, and the retrieval
/// cross-entropy when every sample has an entry in `pool`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn stage2_batch_loss(
    cfg: &PipelineConfig,
    models: &Models,
    g: &mut Graph,
    store: &ParamStore,
    batch: &[&SignalSample],
    pool: &MemoryPool,
    mats: &PoolMatrices,
    noise: &mut Rng,
) -> Result<Stage2Terms> {
    let w = cfg.stage2_weights();
    let draws = cfg.train2.batch;
    let vars = stage1_batch(models, g, store, batch)?;
    let c = condition_batch(models, g, store, &vars.embeddings, pool, mats)?;

    let targets: Option<Vec<usize>> = batch.iter().map(|s| pool.position_of(s.id)).collect();
    let retrieval = match targets {
        Some(tg) if w.lambda_retrieval > 0.0 => {
            let logits = g.scale(c.scores, 1.0 / cfg.memory.retrieval_tau);
            Some(g.cross_entropy_rows(logits, &tg)?)
        }
        _ => None,
    };

    let mut diff = None;
    for j in 0..draws {
        let i = j % batch.len();
        let l = models
            .decoder
            .diffusion_loss(g, store, &batch[i].clip, c.conds[i], noise)?;
        diff = Some(match diff {
            None => l,
            Some(d) => g.add(d, l)?,
        });
    }
    let diff = diff.ok_or_else(|| Error::EmptyInput("no diffusion draws".into()))?;
    let diff = g.scale(diff, 1.0 / draws as f64);
    stage2_loss(g, &vars.inputs, diff, retrieval, &w)
}

/// Joint training of every module on `train` with retrieval from `pool`.
/// Each step uses `min(batch, n)` distinct samples and `batch` noise draws.
pub fn train_stage2(
    cfg: &PipelineConfig,
    models: &Models,
    train: &[SignalSample],
    pool: &MemoryPool,
    store: &mut ParamStore,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainSummary> {
    check_data(train, "training")?;
    if pool.is_empty() {
        return Err(Error::Pool("stage 2 needs a non-empty pool".into()));
    }
    if models.memory.top_k > pool.len() {
        return Err(Error::Capacity {
            k: models.memory.top_k,
            n: pool.len(),
        });
    }
    models.ensure_stage2(store, cfg.seed)?;
    let t = &cfg.train2;
    let mats = pool.matrices()?;
    let mut rng = Rng::new(cfg.seed).fork(STREAM_BATCH2);
    let mut noise = Rng::new(cfg.seed).fork(STREAM_NOISE);
    let mut opt = t.optimizer();
    let sched = OneCycle::new(t.lr, t.steps);
    let mut summary = TrainSummary::default();
    let b = t.batch.min(train.len());
    for step in 0..t.steps {
        let idx = rng.sample_distinct(train.len(), b);
        let batch: Vec<&SignalSample> = idx.iter().map(|&i| &train[i]).collect();
        let mut g = Graph::new();
        let terms = stage2_batch_loss(cfg, models, &mut g, store, &batch, pool, &mats, &mut noise)?;
        let diff = terms.diffusion;
        let lr = sched.lr(step);
        let grad_norm = optimizer_step(&g, terms.total, store, &mut opt, lr, step)?;
        summary.losses.push(g.scalar(terms.total));
        summary.diffusion.push(g.scalar(diff));
        if should_log(step, t.steps, t.log_every) {
            on_step(&StepLog {
                stage: 2,
                step,
                lr,
                grad_norm,
                terms: terms.values(&g),
            });
        }
    }
    summary.steps = t.steps;
    Ok(summary)
}

/// Retrieval and decoder condition for one signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub retrieval: RetrievalResult,
    /// `[n_tokens, d_clip]`
    pub cond: Tensor,
}

pub fn condition(models: &Models, store: &ParamStore, pool: &MemoryPool, signal: &Tensor) -> Result<Conditioning> {
    let mut g = Graph::new();
    let e = models.brain.encode(&mut g, store, signal)?;
    let mats = pool.matrices()?;
    let mut c = condition_batch(models, &mut g, store, &[e.embedding], pool, &mats)?;
    Ok(Conditioning {
        cond: g.to_tensor(c.conds[0]),
        retrieval: c.retrievals.remove(0),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub id: u64,
    /// `[F, C, H, W]`
    pub clip: Tensor,
    pub weights: RoutingWeights,
    pub top_ids: Vec<u64>,
}

/// Samples one clip per input signal. Each clip's noise depends only on the
/// seed and the sample id.
pub fn reconstruct(
    models: &Models,
    store: &ParamStore,
    pool: &MemoryPool,
    samples: &[SignalSample],
    seed: u64,
) -> Result<Vec<Reconstruction>> {
    let base = Rng::new(seed).fork(STREAM_SAMPLE);
    samples
        .iter()
        .map(|s| {
            let c = condition(models, store, pool, &s.signal)?;
            let clip = models.decoder.sample(store, &c.cond, &mut base.fork(s.id))?;
            Ok(Reconstruction {
                id: s.id,
                clip,
                weights: c.retrieval.weights,
                top_ids: c.retrieval.top_ids,
            })
        })
        .collect()
}

/// Mean absolute difference between two clips.
pub fn clip_mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!("clips {:?} and {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("empty clip".into()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / a.len() as f64)
}

/// `(probes, targets)`: global tokens and consolidated image embeddings.
pub fn embed_pairs(models: &Models, store: &ParamStore, samples: &[SignalSample]) -> Result<(Tensor, Tensor)> {
    check_data(samples, "evaluation")?;
    let mut probes = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        probes.push(models.brain.encode_value(store, &s.signal)?.global_token);
        targets.push(models.brain.consolidate_frames_value(store, &s.e_img)?);
    }
    let p: Vec<&[f32]> = probes.iter().map(|t| t.data()).collect();
    let t: Vec<&[f32]> = targets.iter().map(|t| t.data()).collect();
    Ok((Tensor::stack_rows(&p)?, Tensor::stack_rows(&t)?))
}

/// Signal-to-image retrieval with subsets of `min(subset, n)` candidates.
pub fn stage1_retrieval(
    models: &Models,
    store: &ParamStore,
    samples: &[SignalSample],
    subset: usize,
    seed: u64,
) -> Result<RetrievalAccuracy> {
    let (p, t) = embed_pairs(models, store, samples)?;
    retrieval_protocol(&p, &t, subset.min(samples.len()), &mut Rng::new(seed).fork(STREAM_EVAL))
}

/// The same protocol with probes from the generator's least-squares latent
/// estimate mapped to clean mean image embeddings.
pub fn oracle_retrieval(
    data: &GeneratorConfig,
    samples: &[SignalSample],
    subset: usize,
    seed: u64,
) -> Result<RetrievalAccuracy> {
    check_data(samples, "evaluation")?;
    let gen = Generator::new(data)?;
    let mut probes = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        let z = gen.recover_latent(s.signal.data())?;
        probes.push(gen.clean_image_mean(&z));
        targets.push(mean_frames(&s.e_img));
    }
    let p: Vec<&[f32]> = probes.iter().map(|v| v.as_slice()).collect();
    let t: Vec<&[f32]> = targets.iter().map(|v| v.data()).collect();
    retrieval_protocol(
        &Tensor::stack_rows(&p)?,
        &Tensor::stack_rows(&t)?,
        subset.min(samples.len()),
        &mut Rng::new(seed).fork(STREAM_EVAL),
    )
}

fn gray_frames(clip: &Tensor) -> Result<Vec<Tensor>> {
    let f = clip.shape().first().copied().unwrap_or(0);
    (0..f).map(|i| frame_gray(clip, i)).collect()
}

/// The first positive label, used as the ground-truth class.
fn primary_class(labels: &Tensor) -> Result<usize> {
    labels
        .data()
        .iter()
        .position(|&v| v > 0.5)
        .ok_or_else(|| Error::Label("sample has no positive label".into()))
}

/// Semantic and, when `(id, clip)` reconstructions are supplied,
/// pixel-level metrics on `samples`.
pub fn evaluate(
    cfg: &PipelineConfig,
    models: &Models,
    store: &ParamStore,
    samples: &[SignalSample],
    recons: Option<&[(u64, Tensor)]>,
) -> Result<Vec<MetricReport>> {
    check_data(samples, "evaluation")?;
    let e = &cfg.eval;
    let mut rng = Rng::new(cfg.seed).fork(STREAM_EVAL);
    let mut out = Vec::new();

    let mut logits = Vec::with_capacity(samples.len());
    for s in samples {
        let enc = models.brain.encode_value(store, &s.signal)?;
        logits.push((
            models.brain.classify_value(store, &enc.global_token)?,
            primary_class(&s.labels)?,
        ));
    }
    let pairs: Vec<(&[f32], usize)> = logits.iter().map(|(l, c)| (l.data(), *c)).collect();
    for n in [2, e.ways] {
        let (m, sd) = nway_topk_batch(&pairs, n, 1, &mut rng, e.trials)?;
        out.push(
            MetricReport::new("nway_topk", m, sd, e.trials)
                .with("n", n)
                .with("k", 1)
                .with("samples", samples.len()),
        );
    }

    let subset = e.subset.min(samples.len());
    let (p, t) = embed_pairs(models, store, samples)?;
    let r = retrieval_protocol(&p, &t, subset, &mut rng)?;
    for (dir, v, sd) in [
        ("forward", r.forward, r.forward_std),
        ("backward", r.backward, r.backward_std),
    ] {
        out.push(
            MetricReport::new("retrieval_protocol", v, sd, r.subsets)
                .with("direction", dir)
                .with("subset", subset),
        );
    }

    if let Some(recons) = recons {
        let by_id: HashMap<u64, &Tensor> = recons.iter().map(|(id, c)| (*id, c)).collect();
        let (mut ss, mut ps, mut tc, mut ep) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for s in samples {
            let rec = by_id
                .get(&s.id)
                .ok_or_else(|| Error::Protocol(format!("no reconstruction for sample {}", s.id)))?;
            let (gen, truth) = (gray_frames(rec)?, gray_frames(&s.clip)?);
            if gen.len() != truth.len() {
                return Err(dim_err("reconstruction frame count differs from ground truth"));
            }
            let mut fs = Vec::with_capacity(gen.len());
            let mut fp = Vec::with_capacity(gen.len());
            for (a, b) in gen.iter().zip(&truth) {
                fs.push(ssim(a, b)?);
                fp.push(psnr(a, b, 1.0)?);
            }
            ss.push(mean_std(&fs).0);
            ps.push(mean_std(&fp).0);
            let rows: Vec<&[f32]> = gen.iter().map(|f| f.data()).collect();
            match temporal_consistency(&Tensor::stack_rows(&rows)?) {
                Ok(v) => tc.push(v.value),
                Err(Error::Numeric(_)) => {}
                Err(err) => return Err(err),
            }
            if rec.shape() != s.clip.shape() {
                return Err(dim_err(format!(
                    "reconstruction {:?}, expected {:?}",
                    rec.shape(),
                    s.clip.shape()
                )));
            }
            ep.push(epe(&centroid_flow(rec)?, &s.flow_gt)?);
        }
        let n = samples.len();
        for (name, vals, note) in [
            ("ssim", &ss, "gray_frames"),
            ("psnr", &ps, "gray_frames_peak_1"),
            ("temporal_consistency", &tc, "pearson_consecutive_gray_frames"),
            ("epe", &ep, "centroid_flow"),
        ] {
            if vals.is_empty() {
                return Err(Error::Numeric(format!("{name}: no sample produced a finite value")));
            }
            let (m, sd) = mean_std(vals);
            out.push(
                MetricReport::new(name, m, sd, n)
                    .with("method", note)
                    .with("used", vals.len()),
            );
        }
    }
    Ok(out)
}
