//! Toy conditional diffusion decoder: noise schedule, denoiser network,
//! training losses and ancestral sampling.
//!
//! The denoiser predicts noise through a clean-clip estimate:
//! `ε̂ = (s·y_t − √ᾱ_t·D(y_t, cond, t)) / √(1 − ᾱ_t)`, where `D` is a small
//! per-frame transformer block and `s` a stored, untrained scalar equal to 1.
//! `D` reads `ᾱ_t·y_t`, so at high noise it leans on the condition rather
//! than on the nearly uninformative input. With every parameter at zero the
//! prediction is zero.

use crate::error::{dim_err, Error, Result};
use crate::numerics::layers::{layer_norm, linear};
use crate::numerics::{AttentionSpec, Graph, ParamStore, Rng, Tensor, Var};
use crate::objectives::{stage1_loss, Stage1Inputs, Stage1Terms, Stage1Weights};

/// Fixed scale of `y_t` in the noise prediction. Stored with the parameters
/// but never trained: a value other than 1 adds `(1 − s)·y_t/√ᾱ_t` to the
/// sampler's clean-clip estimate.
pub const SKIP: &str = "dec.skip";

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// width of the conditioning tokens (`d_clip`)
    pub d_cond: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            channels: 3,
            height: 16,
            width: 16,
            d_cond: 64,
            hidden: 64,
            time_dim: 32,
            timesteps: 50,
            beta_start: 2e-3,
            beta_end: 0.4,
        }
    }
}

crate::impl_settings!(DecoderConfig {
    frames,
    channels,
    height,
    width,
    d_cond,
    hidden,
    time_dim,
    timesteps,
    beta_start,
    beta_end,
});

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.frames,
            self.channels,
            self.height,
            self.width,
            self.d_cond,
            self.hidden,
            self.time_dim,
        ];
        if dims.contains(&0) || self.timesteps == 0 {
            return Err(Error::Config("decoder dims and timesteps must be positive".into()));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("time_dim must be even".into()));
        }
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end).map(|_| ())
    }

    /// Values per frame, `C·H·W`.
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn clip_shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced `β₁..β_T`.
    pub fn linear(t: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let betas = if t == 1 {
            vec![beta_start]
        } else {
            (0..t)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("empty beta schedule".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("betas must be non-decreasing".into()));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Schedule { t, max: self.steps() });
        }
        Ok(())
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    pub fn sample_t(&self, rng: &mut Rng) -> usize {
        rng.int_inclusive(1, self.steps())
    }
}

/// `y_t = √ᾱ_t·y₀ + √(1 − ᾱ_t)·ε`.
pub fn add_noise(y0: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    if y0.shape() != eps.shape() {
        return Err(dim_err(format!("clip {:?} vs noise {:?}", y0.shape(), eps.shape())));
    }
    let ab = schedule.alpha_bar(t)?;
    schedule.check(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = y0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&y, &e)| (a * y as f64 + b * e as f64) as f32)
        .collect();
    Tensor::new(y0.shape().to_vec(), data)
}

/// Sinusoidal embedding of a timestep, `[time_dim]`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    schedule: NoiseSchedule,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule()?;
        Ok(Self { cfg, schedule })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn attention(&self) -> AttentionSpec {
        AttentionSpec::new("dec.attn", self.cfg.hidden, self.cfg.d_cond, self.cfg.hidden)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let c = &self.cfg;
        let (p, h) = (c.frame_len(), c.hidden);
        store.insert_zero_linear("dec.in", p, h)?;
        store.insert(
            "dec.frame_pos",
            Tensor::matrix(c.frames, h, rng.normal_vec(c.frames * h, 0.1))?,
        )?;
        store.insert_linear("dec.time1", c.time_dim, h, rng)?;
        store.insert_zero_linear("dec.time2", h, h)?;
        store.insert_layer_norm("dec.ln_attn", h)?;
        self.attention().init(store, rng)?;
        store.insert_layer_norm("dec.ln_mlp", h)?;
        store.insert_linear("dec.mlp1", h, 2 * h, rng)?;
        store.insert_linear("dec.mlp2", 2 * h, h, rng)?;
        store.insert_layer_norm("dec.ln_out", h)?;
        store.insert_linear("dec.out", h, p, rng)?;
        store.insert(SKIP, Tensor::filled(&[1, 1], 1.0))
    }

    /// Clean-clip estimate `D(y_t, cond, t)`, `F x (C·H·W)`.
    fn estimate_clean(&self, g: &mut Graph, store: &ParamStore, y_t: Var, cond: Var, t: usize) -> Result<Var> {
        let c = &self.cfg;
        let y_in = g.scale(y_t, self.schedule.alpha_bar(t)?);
        let temb = g.constant_raw(1, c.time_dim, timestep_embedding(t, c.time_dim))?;
        let temb = linear(g, store, "dec.time1", temb)?;
        let temb = g.silu(temb);
        let temb = linear(g, store, "dec.time2", temb)?;

        let h = linear(g, store, "dec.in", y_in)?;
        let h = g.add_row(h, temb)?;
        let pos = g.param(store, "dec.frame_pos")?;
        let mut h = g.add(h, pos)?;

        let x = layer_norm(g, store, "dec.ln_attn", h)?;
        let a = self.attention().forward(g, store, x, cond)?;
        h = g.add(h, a)?;
        let x = layer_norm(g, store, "dec.ln_mlp", h)?;
        let x = linear(g, store, "dec.mlp1", x)?;
        let x = g.silu(x);
        let x = linear(g, store, "dec.mlp2", x)?;
        h = g.add(h, x)?;
        let h = layer_norm(g, store, "dec.ln_out", h)?;
        linear(g, store, "dec.out", h)
    }

    /// Predicted noise for `y_t` (`F x C·H·W`) under conditioning tokens
    /// `cond` (`L x d_cond`).
    pub fn denoise(&self, g: &mut Graph, store: &ParamStore, y_t: Var, cond: Var, t: usize) -> Result<Var> {
        let c = &self.cfg;
        if g.dims(y_t) != (c.frames, c.frame_len()) {
            return Err(dim_err(format!(
                "noisy clip {:?}, expected ({}, {})",
                g.dims(y_t),
                c.frames,
                c.frame_len()
            )));
        }
        if g.dims(cond).1 != c.d_cond {
            return Err(dim_err(format!(
                "condition width {}, expected {}",
                g.dims(cond).1,
                c.d_cond
            )));
        }
        let ab = self.schedule.alpha_bar(t)?;
        self.schedule.check(t)?;
        let clean = self.estimate_clean(g, store, y_t, cond, t)?;
        let s = g.constant(store.tensor(SKIP)?);
        let skip = g.scale_by(y_t, s)?;
        let clean = g.scale(clean, ab.sqrt());
        let diff = g.sub(skip, clean)?;
        Ok(g.scale(diff, 1.0 / (1.0 - ab).sqrt()))
    }

    pub fn denoise_value(&self, store: &ParamStore, y_t: &Tensor, cond: &Tensor, t: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let y = self.frames_const(&mut g, y_t)?;
        let cv = g.constant(cond);
        let out = self.denoise(&mut g, store, y, cv, t)?;
        Tensor::from_f64(self.cfg.clip_shape().to_vec(), g.value(out))
    }

    /// A `[F, C, H, W]` clip as an `F x C·H·W` constant.
    pub fn frames_const(&self, g: &mut Graph, clip: &Tensor) -> Result<Var> {
        let c = &self.cfg;
        if clip.len() != c.frames * c.frame_len() {
            return Err(dim_err(format!(
                "clip {:?}, expected {:?}",
                clip.shape(),
                c.clip_shape()
            )));
        }
        g.constant_raw(c.frames, c.frame_len(), clip.to_f64())
    }

    /// `mean((ε − ε̂(y_t, cond, t))²)` with `t` and `ε` supplied.
    pub fn diffusion_loss_at(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y0: &Tensor,
        cond: Var,
        t: usize,
        eps: &Tensor,
    ) -> Result<Var> {
        let y_t = add_noise(y0, eps, t, &self.schedule)?;
        let yv = self.frames_const(g, &y_t)?;
        let pred = self.denoise(g, store, yv, cond, t)?;
        let target = self.frames_const(g, eps)?;
        let d = g.sub(target, pred)?;
        let sq = g.mul(d, d)?;
        Ok(g.mean_all(sq))
    }

    /// Diffusion loss with `t ~ U{1..T}` and `ε ~ N(0, I)` drawn from `rng`.
    pub fn diffusion_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y0: &Tensor,
        cond: Var,
        rng: &mut Rng,
    ) -> Result<Var> {
        let (t, eps) = self.draw_noise(rng, y0.shape());
        self.diffusion_loss_at(g, store, y0, cond, t, &eps)
    }

    pub fn draw_noise(&self, rng: &mut Rng, shape: &[usize]) -> (usize, Tensor) {
        let t = self.schedule.sample_t(rng);
        let n = shape.iter().product();
        let eps = Tensor::new(shape.to_vec(), rng.normal_vec(n, 1.0)).expect("shape matches length");
        (t, eps)
    }

    /// Ancestral sampling with this decoder's network.
    pub fn sample(&self, store: &ParamStore, cond: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        sample_with(&self.schedule, &self.cfg.clip_shape(), rng, |y_t, t| {
            self.denoise_value(store, y_t, cond, t)
        })
    }
}

/// Monte-Carlo diffusion loss for an arbitrary noise predictor.
pub fn diffusion_loss_with<F>(y0: &Tensor, schedule: &NoiseSchedule, rng: &mut Rng, mut denoiser: F) -> Result<f64>
where
    F: FnMut(&Tensor, usize, &Tensor) -> Result<Tensor>,
{
    let t = schedule.sample_t(rng);
    let eps = Tensor::new(y0.shape().to_vec(), rng.normal_vec(y0.len(), 1.0))?;
    let y_t = add_noise(y0, &eps, t, schedule)?;
    let pred = denoiser(&y_t, t, &eps)?;
    if pred.len() != eps.len() {
        return Err(dim_err("denoiser output does not match clip shape"));
    }
    Ok(eps
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&e, &p)| (e as f64 - p as f64).powi(2))
        .sum::<f64>()
        / eps.len() as f64)
}

/// Standard DDPM ancestral sampling from `y_T ~ N(0, I)`. The clean-clip
/// estimate at each step is clipped to `[-1, 1]`; the result is clamped.
pub fn sample_with<F>(schedule: &NoiseSchedule, shape: &[usize], rng: &mut Rng, mut denoiser: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let n: usize = shape.iter().product();
    let mut x: Vec<f64> = rng.normal_vec_f64(n);
    for t in (1..=schedule.steps()).rev() {
        let xt = Tensor::from_f64(shape.to_vec(), &x)?;
        let eps = denoiser(&xt, t)?;
        if eps.len() != n {
            return Err(dim_err("denoiser output does not match clip shape"));
        }
        let beta = schedule.beta(t)?;
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = schedule.alpha_bar(t - 1)?;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
        for (xi, &e) in x.iter_mut().zip(eps.data()) {
            let x0 = ((*xi - (1.0 - ab).sqrt() * e as f64) / ab.sqrt()).clamp(-1.0, 1.0);
            let z = if t > 1 { rng.normal() } else { 0.0 };
            *xi = c0 * x0 + ct * *xi + sigma * z;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sampling { t });
        }
    }
    Tensor::from_f64(
        shape.to_vec(),
        &x.iter().map(|v| v.clamp(-1.0, 1.0)).collect::<Vec<_>>(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Weights {
    pub stage1: Stage1Weights,
    pub lambda_stage1: f64,
    pub lambda_diffusion: f64,
    /// Weight of the auxiliary retrieval term that trains router and query
    /// projections.
    pub lambda_retrieval: f64,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Self {
            stage1: Stage1Weights::default(),
            lambda_stage1: 1.0,
            lambda_diffusion: 1.0,
            lambda_retrieval: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Stage2Terms {
    pub total: Var,
    pub stage1: Stage1Terms,
    pub diffusion: Var,
    pub retrieval: Option<Var>,
}

impl Stage2Terms {
    pub fn values(&self, g: &Graph) -> Vec<(&'static str, f64)> {
        let mut v = vec![("stage2", g.scalar(self.total))];
        v.extend(self.stage1.values(g));
        v.push(("diffusion", g.scalar(self.diffusion)));
        if let Some(r) = self.retrieval {
            v.push(("retrieval", g.scalar(r)));
        }
        v
    }
}

/// `λ_s·L_stage1 + λ_d·L_diff (+ λ_r·L_retrieval)`.
pub fn stage2_loss(
    g: &mut Graph,
    stage1: &Stage1Inputs,
    diffusion: Var,
    retrieval: Option<Var>,
    w: &Stage2Weights,
) -> Result<Stage2Terms> {
    let s1 = stage1_loss(g, stage1, &w.stage1)?;
    let a = g.scale(s1.total, w.lambda_stage1);
    let b = g.scale(diffusion, w.lambda_diffusion);
    let mut total = g.add(a, b)?;
    if let Some(r) = retrieval {
        let r = g.scale(r, w.lambda_retrieval);
        total = g.add(total, r)?;
    }
    Ok(Stage2Terms {
        total,
        stage1: s1,
        diffusion,
        retrieval,
    })
}
