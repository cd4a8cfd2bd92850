//! Finite-difference checks over every objective and the fusion, retrieval
//! and decoder paths at small sizes, with a self-test and a negative control.

use std::fmt;

use crate::datasynth::{generate, SignalSample};
use crate::error::Result;
use crate::numerics::{grad_check, AttentionSpec, GradCheckConfig, Graph, ParamStore, Rng, Tensor, Var};
use crate::objectives::{action_loss, clip_loss, cls_loss, info_nce, stage1_loss};
use crate::pipeline::{stage1_batch, stage2_batch_loss, Models, PipelineConfig};

/// Relative-error threshold every row is judged against.
pub const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub elements: usize,
    /// False for the negative control, which passes when the check fails.
    pub expect_pass: bool,
    pub passed: bool,
}

impl fmt::Display for CheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} {:>12.3e} {:>6} {}",
            self.name,
            self.max_rel_error,
            self.elements,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Configuration small enough to check every parameter path quickly.
pub fn tiny_config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    for (k, v) in [
        ("data.latent_dim", "4"),
        ("data.n_voxels", "12"),
        ("data.d_clip", "6"),
        ("data.d_act", "5"),
        ("data.n_classes", "3"),
        ("data.n_train", "5"),
        ("data.n_test", "1"),
        ("data.frames", "2"),
        ("data.channels", "1"),
        ("data.height", "3"),
        ("data.width", "3"),
        ("model.n_layers", "1"),
        ("model.d_model", "8"),
        ("model.n_tokens", "3"),
        ("decoder.hidden", "8"),
        ("decoder.time_dim", "8"),
        ("decoder.timesteps", "10"),
        ("memory.top_k", "2"),
        ("train2.batch", "3"),
        ("eval.ways", "2"),
    ] {
        c.set(k, v).expect("tiny config keys are valid");
    }
    c
}

fn randn(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut Rng) -> Result<()> {
    store.insert(name, Tensor::matrix(rows, cols, rng.normal_vec(rows * cols, 1.0))?)
}

/// Overwrites every parameter whose name starts with one of `prefixes` with
/// Gaussian values so that zero-initialised paths carry gradient.
fn perturb(store: &mut ParamStore, prefixes: &[&str], scale: f64, rng: &mut Rng) {
    for p in store.iter_mut() {
        if prefixes.iter().any(|pre| p.name.starts_with(pre)) {
            let n = p.tensor.len();
            p.tensor.data_mut().copy_from_slice(&rng.normal_vec(n, scale));
        }
    }
}

fn squared_error(g: &mut Graph, out: Var, target: &Tensor) -> Result<Var> {
    let y = g.constant(target);
    let d = g.sub(out, y)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

struct Suite {
    cfg: GradCheckConfig,
    rows: Vec<CheckRow>,
}

impl Suite {
    fn run<F>(&mut self, name: &'static str, store: &ParamStore, loss: F) -> Result<()>
    where
        F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    {
        let r = grad_check(store, &[], &self.cfg, loss)?;
        self.rows.push(CheckRow {
            name,
            max_rel_error: r.max_rel_error,
            elements: r.elements_checked,
            expect_pass: true,
            passed: r.passes(GRADCHECK_TOL),
        });
        Ok(())
    }
}

fn batch_of(samples: &[SignalSample]) -> Vec<&SignalSample> {
    samples.iter().collect()
}

/// Runs every check. All rows should report `passed`.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = Rng::new(seed);
    let mut suite = Suite {
        cfg: GradCheckConfig {
            seed,
            ..GradCheckConfig::default()
        },
        rows: Vec::new(),
    };

    let mut quad = ParamStore::new();
    randn(&mut quad, "theta", 1, 8, &mut rng)?;
    let quadratic = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
        let t = g.param(s, "theta")?;
        let sq = g.mul(t, t)?;
        let sum = g.sum_all(sq);
        Ok(g.scale(sum, 0.5))
    };
    suite.run("selftest.quadratic", &quad, quadratic)?;
    let faulty = GradCheckConfig {
        corrupt_analytic: Some(0.05),
        ..suite.cfg.clone()
    };
    let r = grad_check(&quad, &[], &faulty, quadratic)?;
    suite.rows.push(CheckRow {
        name: "selftest.fault_injection",
        max_rel_error: r.max_rel_error,
        elements: r.elements_checked,
        expect_pass: false,
        passed: !r.passes(GRADCHECK_TOL),
    });

    let (b, d, da, c) = (4, 6, 5, 3);
    let mut x = ParamStore::new();
    for (name, cols) in [
        ("x.f_c", d),
        ("x.img", d),
        ("x.txt", d),
        ("x.f_a", da),
        ("x.act", da),
        ("x.logits", c),
    ] {
        randn(&mut x, name, b, cols, &mut rng)?;
    }
    let labels = Tensor::matrix(b, c, vec![1., 0., 0., 0., 1., 1., 1., 0., 1., 0., 0., 1.])?;
    let tau = 0.5;
    suite.run("info_nce", &x, |g, s| {
        let (a, t) = (g.param(s, "x.f_c")?, g.param(s, "x.img")?);
        info_nce(g, a, t, tau, false)
    })?;
    suite.run("info_nce.symmetric", &x, |g, s| {
        let (a, t) = (g.param(s, "x.f_c")?, g.param(s, "x.img")?);
        info_nce(g, a, t, tau, true)
    })?;
    suite.run("clip_loss", &x, |g, s| {
        let (f, i, t) = (g.param(s, "x.f_c")?, g.param(s, "x.img")?, g.param(s, "x.txt")?);
        clip_loss(g, f, i, t, tau, false)
    })?;
    suite.run("action_loss", &x, |g, s| {
        let (f, a) = (g.param(s, "x.f_a")?, g.param(s, "x.act")?);
        action_loss(g, f, a, tau, false)
    })?;
    suite.run("cls_loss", &x, |g, s| {
        let l = g.param(s, "x.logits")?;
        cls_loss(g, l, &labels, 2.0, 0.5)
    })?;

    let cfg = tiny_config();
    let data = generate(&cfg.data)?;
    let models = Models::new(&cfg)?;
    let mut s1_store = models.init_stage1(seed)?;
    perturb(&mut s1_store, &["brain.global_proj.b"], 0.3, &mut rng);
    let mut store = s1_store.clone();
    models.ensure_stage2(&mut store, seed)?;
    perturb(&mut store, &["fusion.gate", "mom.router", "dec.out"], 0.3, &mut rng);
    let batch = batch_of(&data.train[..3]);
    let mut w1 = cfg.loss.clone();
    w1.tau = 0.5;

    suite.run("stage1_loss", &s1_store, |g, s| {
        let v = stage1_batch(&models, g, s, &batch)?;
        Ok(stage1_loss(g, &v.inputs, &w1)?.total)
    })?;

    let attn = AttentionSpec::new("attn", 8, 6, 8);
    let mut a_store = ParamStore::new();
    attn.init(&mut a_store, &mut rng)?;
    let q = Tensor::matrix(3, 8, rng.normal_vec(24, 1.0))?;
    let kv = Tensor::matrix(4, 6, rng.normal_vec(24, 1.0))?;
    let target = Tensor::matrix(3, 8, rng.normal_vec(24, 1.0))?;
    suite.run("attention", &a_store, |g, s| {
        let (qv, kvv) = (g.constant(&q), g.constant(&kv));
        let out = attn.forward(g, s, qv, kvv)?;
        squared_error(g, out, &target)
    })?;

    let f_e = Tensor::matrix(3, 8, rng.normal_vec(24, 1.0))?;
    let img = Tensor::matrix(2, 6, rng.normal_vec(12, 1.0))?;
    let act = Tensor::matrix(2, 5, rng.normal_vec(10, 1.0))?;
    let text = Tensor::matrix(1, 6, rng.normal_vec(6, 1.0))?;
    let fused_target = Tensor::matrix(3, 6, rng.normal_vec(18, 1.0))?;
    let fusion_store = store.subset("fusion.");
    suite.run("fusion", &fusion_store, |g, s| {
        let (fv, iv, av, tv) = (g.constant(&f_e), g.constant(&img), g.constant(&act), g.constant(&text));
        let hat = models.fusion.attend_memories(g, s, fv, iv, av)?;
        let out = models.fusion.fuse(g, s, hat, tv)?;
        squared_error(g, out, &fused_target)
    })?;

    let pool = crate::memory::MemoryPool::from_samples(&data.train, "train")?;
    let mats = pool.matrices()?;
    let embeddings = Tensor::matrix(3, 8, rng.normal_vec(24, 1.0))?;
    let mem_store = store.subset("mom.");
    suite.run("router_retrieval", &mem_store, |g, s| {
        let e = g.constant(&embeddings);
        let rows: Vec<Var> = (0..3).map(|i| g.slice_rows(e, i, 1)).collect::<Result<_>>()?;
        let pooled = models.memory.pool_tokens(g, &rows)?;
        let w = models.memory.route_vars(g, s, pooled)?;
        let (qc, qa) = models.memory.query_vars(g, s, pooled)?;
        let scores = models.memory.score_vars(g, w, qc, qa, &mats)?;
        let logits = g.scale(scores, 1.0 / cfg.memory.retrieval_tau);
        g.cross_entropy_rows(logits, &[0, 2, 4])
    })?;

    let dec_store = store.subset("dec.");
    let clip = &data.train[0].clip;
    let cond = Tensor::matrix(3, 6, rng.normal_vec(18, 1.0))?;
    let (t, eps) = models.decoder.draw_noise(&mut rng, clip.shape());
    suite.run("diffusion_loss", &dec_store, |g, s| {
        let cv = g.constant(&cond);
        models.decoder.diffusion_loss_at(g, s, clip, cv, t, &eps)
    })?;

    let mut c2 = cfg.clone();
    c2.loss.tau = 0.5;
    c2.memory.retrieval_tau = 0.5;
    suite.run("stage2_loss", &store, |g, s| {
        let mut noise = Rng::new(seed).fork(11);
        Ok(stage2_batch_loss(&c2, &models, g, s, &batch, &pool, &mats, &mut noise)?.total)
    })?;

    Ok(suite.rows)
}
