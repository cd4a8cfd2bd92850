use std::f64::consts::PI;

use super::ParamStore;

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip applied before the update.
    pub max_grad_norm: Option<f64>,
    /// Parameters left untouched, including by weight decay.
    pub frozen: Vec<String>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: Some(1.0),
            frozen: Vec::new(),
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept in `f64`; updated
/// parameters are rounded back to `f32` storage.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the `grad` fields of `store`. Returns the
    /// pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> f64 {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let frozen: Vec<bool> = store.iter().map(|p| self.cfg.frozen.contains(&p.name)).collect();
        let norm = store
            .iter()
            .zip(&frozen)
            .filter(|(_, &f)| !f)
            .flat_map(|(p, _)| p.grad.data().iter())
            .map(|&g| (g as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let clip = match self.cfg.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if frozen[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data().to_vec();
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j] as f64 * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut x = *w as f64;
                x -= lr * c.weight_decay * x;
                x -= lr * mhat / (vhat.sqrt() + c.eps);
                *w = x as f32;
            }
        }
        norm
    }
}

/// One-cycle learning-rate schedule: cosine warm-up from `max_lr / div_factor`
/// to `max_lr` over the first `pct_start` of training, then cosine annealing
/// to `max_lr / (div_factor * final_div_factor)`.
#[derive(Clone, Debug)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self {
            max_lr,
            total_steps,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let initial = self.max_lr / self.div_factor;
        let min = initial / self.final_div_factor;
        if self.total_steps <= 1 {
            return self.max_lr;
        }
        let last = (self.total_steps - 1) as f64;
        let warm_end = (self.pct_start * last).max(1.0);
        let s = step as f64;
        let anneal = |from: f64, to: f64, frac: f64| to + (from - to) * (1.0 + (PI * frac).cos()) / 2.0;
        if s <= warm_end {
            anneal(initial, self.max_lr, s / warm_end)
        } else {
            let frac = ((s - warm_end) / (last - warm_end).max(1.0)).min(1.0);
            anneal(self.max_lr, min, frac)
        }
    }
}
