//! Stage-1 objectives: contrastive alignment of the global token with image,
//! text and action embeddings, and the focal/BCE category loss.

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Weights {
    pub tau: f64,
    pub lambda_action: f64,
    pub lambda_cls: f64,
    pub focal_gamma: f64,
    /// Weight of the focal term; `1 - focal_mix` goes to plain BCE.
    pub focal_mix: f64,
    /// Average anchor→target and target→anchor InfoNCE instead of the
    /// one-directional form.
    pub symmetric: bool,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda_action: 0.1,
            lambda_cls: 10.0,
            focal_gamma: 2.0,
            focal_mix: 0.5,
            symmetric: false,
        }
    }
}

crate::impl_settings!(Stage1Weights {
    tau,
    lambda_action,
    lambda_cls,
    focal_gamma,
    focal_mix,
    symmetric,
});

impl Stage1Weights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.lambda_action < 0.0 || self.lambda_cls < 0.0 || self.focal_gamma < 0.0 {
            return Err(Error::Config("loss weights and gamma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_mix) {
            return Err(Error::Config("focal_mix must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `-(1/B) Σᵢ log softmaxⱼ(âᵢ·t̂ⱼ / τ)[i]` over L2-normalised rows.
pub fn info_nce(g: &mut Graph, anchors: Var, targets: Var, tau: f64, symmetric: bool) -> Result<Var> {
    let (b, d) = g.dims(anchors);
    if g.dims(targets) != (b, d) {
        return Err(dim_err(format!(
            "info_nce anchors {:?} vs targets {:?}",
            g.dims(anchors),
            g.dims(targets)
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config("tau must be positive".into()));
    }
    let a = g.l2_normalize_rows(anchors);
    let t = g.l2_normalize_rows(targets);
    let sims = g.matmul_bt(a, t)?;
    let logits = g.scale(sims, 1.0 / tau);
    let diag: Vec<usize> = (0..b).collect();
    let forward = g.cross_entropy_rows(logits, &diag)?;
    if !symmetric {
        return Ok(forward);
    }
    let lt = g.transpose(logits);
    let backward = g.cross_entropy_rows(lt, &diag)?;
    let sum = g.add(forward, backward)?;
    Ok(g.scale(sum, 0.5))
}

/// `info_nce(f_c, img) + info_nce(f_c, txt)`.
pub fn clip_loss(g: &mut Graph, f_c: Var, img: Var, txt: Var, tau: f64, symmetric: bool) -> Result<Var> {
    let a = info_nce(g, f_c, img, tau, symmetric)?;
    let b = info_nce(g, f_c, txt, tau, symmetric)?;
    g.add(a, b)
}

pub fn action_loss(g: &mut Graph, f_a: Var, act: Var, tau: f64, symmetric: bool) -> Result<Var> {
    info_nce(g, f_a, act, tau, symmetric)
}

fn check_labels(labels: &Tensor) -> Result<()> {
    if let Some(v) = labels.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Label(format!("label value {v} is not 0 or 1")));
    }
    Ok(())
}

/// Mean over all `B x C` entries of `(1 - mix)·BCE + mix·FL` with
/// `p = sigmoid(logit)` clamped to `[1e-7, 1 - 1e-7]`.
pub fn cls_loss(g: &mut Graph, logits: Var, labels: &Tensor, gamma: f64, focal_mix: f64) -> Result<Var> {
    check_labels(labels)?;
    let (b, c) = g.dims(logits);
    if labels.matrix_dims() != (b, c) {
        return Err(dim_err(format!("labels {:?} for logits {b}x{c}", labels.shape())));
    }
    let y = g.constant(labels);
    let not_y = g.affine(y, -1.0, 1.0);
    let p = g.sigmoid(logits);
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = g.affine(p, -1.0, 1.0);
    let log_p = g.log(p)?;
    let log_q = g.log(q)?;

    let pos = g.mul(y, log_p)?;
    let neg = g.mul(not_y, log_q)?;
    let bce = g.add(pos, neg)?;

    let q_pow = g.pow(q, gamma);
    let p_pow = g.pow(p, gamma);
    let fpos = g.mul(q_pow, pos)?;
    let fneg = g.mul(p_pow, neg)?;
    let fl = g.add(fpos, fneg)?;

    // both terms above are negated log-likelihoods
    let bce_w = g.scale(bce, -(1.0 - focal_mix));
    let fl_w = g.scale(fl, -focal_mix);
    let per = g.add(bce_w, fl_w)?;
    Ok(g.mean_all(per))
}

/// Graph inputs for the Stage-1 objective over one batch.
#[derive(Clone, Debug)]
pub struct Stage1Inputs {
    /// `B x d_clip` global tokens
    pub f_c: Var,
    /// `B x d_clip` consolidated image embeddings
    pub img: Var,
    /// `B x d_clip`
    pub txt: Var,
    /// `B x d_act` projected global tokens
    pub f_a: Var,
    /// `B x d_act`
    pub act: Var,
    /// `B x n_classes`
    pub logits: Var,
    /// `B x n_classes` multi-hot
    pub labels: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct Stage1Terms {
    pub total: Var,
    pub clip: Var,
    pub action: Var,
    pub cls: Var,
}

impl Stage1Terms {
    pub fn values(&self, g: &Graph) -> [(&'static str, f64); 4] {
        [
            ("stage1", g.scalar(self.total)),
            ("clip", g.scalar(self.clip)),
            ("action", g.scalar(self.action)),
            ("cls", g.scalar(self.cls)),
        ]
    }
}

/// `L_clip + λ₁·L_action + λ₂·L_cls`.
pub fn stage1_loss(g: &mut Graph, inputs: &Stage1Inputs, w: &Stage1Weights) -> Result<Stage1Terms> {
    w.validate()?;
    let clip = clip_loss(g, inputs.f_c, inputs.img, inputs.txt, w.tau, w.symmetric)?;
    let action = action_loss(g, inputs.f_a, inputs.act, w.tau, w.symmetric)?;
    let cls = cls_loss(g, inputs.logits, &inputs.labels, w.focal_gamma, w.focal_mix)?;
    let a = g.scale(action, w.lambda_action);
    let c = g.scale(cls, w.lambda_cls);
    let total = g.add(clip, a)?;
    let total = g.add(total, c)?;
    Ok(Stage1Terms {
        total,
        clip,
        action,
        cls,
    })
}

fn rows_const(g: &mut Graph, rows: &[&[f32]]) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let t = Tensor::stack_rows(rows)?;
    Ok(g.constant(&t))
}

/// Value-level InfoNCE over row slices.
pub fn info_nce_value(anchors: &[&[f32]], targets: &[&[f32]], tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = rows_const(&mut g, anchors)?;
    let t = rows_const(&mut g, targets)?;
    let l = info_nce(&mut g, a, t, tau, false)?;
    Ok(g.scalar(l))
}

pub fn cls_loss_value(logits: &Tensor, labels: &Tensor, gamma: f64, focal_mix: f64) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits);
    let v = cls_loss(&mut g, l, labels, gamma, focal_mix)?;
    Ok(g.scalar(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckConfig, ParamStore, Rng};
    use proptest::prelude::*;

    fn rows(v: &[Vec<f32>]) -> Vec<&[f32]> {
        v.iter().map(|r| r.as_slice()).collect()
    }

    /// Direct scalar evaluation, independent of the graph.
    fn info_nce_oracle(a: &[Vec<f32>], t: &[Vec<f32>], tau: f64) -> f64 {
        let norm = |v: &[f32]| -> Vec<f64> {
            let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            v.iter().map(|x| *x as f64 / n).collect()
        };
        let (a, t): (Vec<_>, Vec<_>) = (a.iter().map(|r| norm(r)).collect(), t.iter().map(|r| norm(r)).collect());
        let b = a.len();
        let mut total = 0.0;
        for i in 0..b {
            let logits: Vec<f64> = (0..b)
                .map(|j| a[i].iter().zip(&t[j]).map(|(x, y)| x * y).sum::<f64>() / tau)
                .collect();
            let denom: f64 = logits.iter().map(|l| l.exp()).sum();
            total -= (logits[i].exp() / denom).ln();
        }
        total / b as f64
    }

    fn bce_oracle(logits: &[f32], labels: &[f32]) -> f64 {
        logits
            .iter()
            .zip(labels)
            .map(|(&x, &y)| {
                let p = (1.0 / (1.0 + (-(x as f64)).exp())).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / logits.len() as f64
    }

    #[test]
    fn single_pair_is_zero() {
        let a = vec![vec![0.3f32, -1.0, 2.0]];
        let t = vec![vec![5.0f32, 1.0, -1.0]];
        assert_eq!(info_nce_value(&rows(&a), &rows(&t), 0.07).unwrap(), 0.0);
    }

    #[test]
    fn equal_similarities_give_log_b() {
        let a = vec![vec![1.0f32, 0.0], vec![1.0, 0.0]];
        let t = vec![vec![0.0f32, 1.0], vec![0.0, 1.0]];
        let l = info_nce_value(&rows(&a), &rows(&t), 0.07).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_pairs_at_default_temperature() {
        let a = vec![vec![1.0f32, 0.0], vec![0.0, 1.0]];
        let l = info_nce_value(&rows(&a), &rows(&a), 0.07).unwrap();
        let want = (1.0 + (-1.0f64 / 0.07).exp()).ln();
        assert!((l - want).abs() < 1e-15, "{l} vs {want}");
        assert!((l - 6.2e-7).abs() < 1e-8);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(matches!(info_nce_value(&[], &[], 0.07), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn matches_oracle_on_random_batch() {
        let mut rng = Rng::new(1);
        let a: Vec<Vec<f32>> = (0..5).map(|_| rng.normal_vec(8, 1.0)).collect();
        let t: Vec<Vec<f32>> = (0..5).map(|_| rng.normal_vec(8, 1.0)).collect();
        let got = info_nce_value(&rows(&a), &rows(&t), 0.07).unwrap();
        assert!((got - info_nce_oracle(&a, &t, 0.07)).abs() < 1e-9);
    }

    #[test]
    fn clip_loss_examples() {
        let mut g = Graph::new();
        let f = g.constant_raw(1, 3, vec![0.2, 0.4, -0.1]).unwrap();
        let l = clip_loss(&mut g, f, f, f, 0.07, false).unwrap();
        assert_eq!(g.scalar(l), 0.0);

        let mut g = Graph::new();
        let f = g.constant_raw(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let t = g.constant_raw(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let l = clip_loss(&mut g, f, t, t, 0.07, false).unwrap();
        assert!((g.scalar(l) - 2.0 * 2f64.ln()).abs() < 1e-12);

        let mut rng = Rng::new(2);
        let fc: Vec<Vec<f32>> = (0..4).map(|_| rng.normal_vec(8, 1.0)).collect();
        let img: Vec<Vec<f32>> = (0..4).map(|_| rng.normal_vec(8, 1.0)).collect();
        let txt: Vec<Vec<f32>> = (0..4).map(|_| rng.normal_vec(8, 1.0)).collect();
        let mut g = Graph::new();
        let [vf, vi, vt] = [&fc, &img, &txt].map(|m| g.constant(&Tensor::stack_rows(&rows(m)).unwrap()));
        let l = clip_loss(&mut g, vf, vi, vt, 0.07, false).unwrap();
        let want = info_nce_oracle(&fc, &img, 0.07) + info_nce_oracle(&fc, &txt, 0.07);
        assert!((g.scalar(l) - want).abs() < 1e-9);
    }

    #[test]
    fn symmetric_variant_averages_directions() {
        let mut rng = Rng::new(3);
        let a: Vec<Vec<f32>> = (0..3).map(|_| rng.normal_vec(4, 1.0)).collect();
        let t: Vec<Vec<f32>> = (0..3).map(|_| rng.normal_vec(4, 1.0)).collect();
        let mut g = Graph::new();
        let va = g.constant(&Tensor::stack_rows(&rows(&a)).unwrap());
        let vt = g.constant(&Tensor::stack_rows(&rows(&t)).unwrap());
        let l = info_nce(&mut g, va, vt, 0.5, true).unwrap();
        let want = 0.5 * (info_nce_oracle(&a, &t, 0.5) + info_nce_oracle(&t, &a, 0.5));
        assert!((g.scalar(l) - want).abs() < 1e-9);
    }

    #[test]
    fn focal_examples() {
        let logits = Tensor::matrix(1, 4, vec![40.0, 40.0, -40.0, -40.0]).unwrap();
        let labels = Tensor::matrix(1, 4, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(cls_loss_value(&logits, &labels, 2.0, 0.5).unwrap() < 1e-6);

        let one = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let pos = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let l = cls_loss_value(&one, &pos, 2.0, 1.0).unwrap();
        assert!((l - 0.25 * 2f64.ln()).abs() < 1e-6, "{l}");
        assert!((l - 0.1733).abs() < 1e-4);

        let bad = Tensor::matrix(1, 1, vec![0.5]).unwrap();
        assert!(matches!(cls_loss_value(&one, &bad, 2.0, 0.5), Err(Error::Label(_))));
    }

    #[test]
    fn focal_with_zero_gamma_is_bce() {
        let mut rng = Rng::new(4);
        for _ in 0..100 {
            let logits = rng.normal_vec(12, 3.0);
            let labels: Vec<f32> = (0..12).map(|_| if rng.uniform() < 0.3 { 1.0 } else { 0.0 }).collect();
            let lt = Tensor::matrix(3, 4, logits.clone()).unwrap();
            let yt = Tensor::matrix(3, 4, labels.clone()).unwrap();
            let focal = cls_loss_value(&lt, &yt, 0.0, 1.0).unwrap();
            assert!((focal - bce_oracle(&logits, &labels)).abs() < 1e-6);
        }
    }

    fn stage1_batch(g: &mut Graph, rng: &mut Rng, store: &ParamStore) -> Stage1Inputs {
        let f_c = g.param(store, "fc").unwrap();
        let f_a = g.param(store, "fa").unwrap();
        let logits = g.param(store, "logits").unwrap();
        let mk =
            |g: &mut Graph, rng: &mut Rng, r: usize, c: usize| g.constant_raw(r, c, rng.normal_vec_f64(r * c)).unwrap();
        let img = mk(g, rng, 4, 8);
        let txt = mk(g, rng, 4, 8);
        let act = mk(g, rng, 4, 6);
        let labels = Tensor::matrix(4, 3, (0..12).map(|i| ((i * 7) % 3 == 0) as u8 as f32).collect()).unwrap();
        Stage1Inputs {
            f_c,
            img,
            txt,
            f_a,
            act,
            logits,
            labels,
        }
    }

    fn stage1_store(seed: u64) -> ParamStore {
        let mut rng = Rng::new(seed);
        let mut s = ParamStore::new();
        s.insert("fc", Tensor::matrix(4, 8, rng.normal_vec(32, 1.0)).unwrap())
            .unwrap();
        s.insert("fa", Tensor::matrix(4, 6, rng.normal_vec(24, 1.0)).unwrap())
            .unwrap();
        s.insert("logits", Tensor::matrix(4, 3, rng.normal_vec(12, 2.0)).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn stage1_composition() {
        let store = stage1_store(5);
        let mut g = Graph::new();
        let inputs = stage1_batch(&mut g, &mut Rng::new(6), &store);
        let w = Stage1Weights::default();
        let terms = stage1_loss(&mut g, &inputs, &w).unwrap();
        let [_, clip, action, cls] = terms.values(&g).map(|(_, v)| v);
        let total = g.scalar(terms.total);
        assert!((total - (clip + 0.1 * action + 10.0 * cls)).abs() < 1e-9);

        // terms recomputed independently
        let mut g2 = Graph::new();
        let i2 = stage1_batch(&mut g2, &mut Rng::new(6), &store);
        let c2 = clip_loss(&mut g2, i2.f_c, i2.img, i2.txt, 0.07, false).unwrap();
        let a2 = action_loss(&mut g2, i2.f_a, i2.act, 0.07, false).unwrap();
        let k2 = cls_loss(&mut g2, i2.logits, &i2.labels, 2.0, 0.5).unwrap();
        let want = g2.scalar(c2) + 0.1 * g2.scalar(a2) + 10.0 * g2.scalar(k2);
        assert!((total - want).abs() < 1e-9);

        let zero = Stage1Weights {
            lambda_action: 0.0,
            lambda_cls: 0.0,
            ..w
        };
        let mut g3 = Graph::new();
        let i3 = stage1_batch(&mut g3, &mut Rng::new(6), &store);
        let t3 = stage1_loss(&mut g3, &i3, &zero).unwrap();
        assert_eq!(g3.scalar(t3.total), g3.scalar(t3.clip));
    }

    #[test]
    fn stage1_zero_on_aligned_degenerate_batch() {
        let mut g = Graph::new();
        let f = g.constant_raw(1, 2, vec![1.0, 0.0]).unwrap();
        let logits = g.constant_raw(1, 2, vec![60.0, -60.0]).unwrap();
        let inputs = Stage1Inputs {
            f_c: f,
            img: f,
            txt: f,
            f_a: f,
            act: f,
            logits,
            labels: Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(),
        };
        let t = stage1_loss(&mut g, &inputs, &Stage1Weights::default()).unwrap();
        assert!(g.scalar(t.total) < 1e-5);
    }

    #[test]
    fn losses_pass_gradient_check() {
        let store = stage1_store(7);
        let cfg = GradCheckConfig::default();
        let report = grad_check(&store, &[], &cfg, |g, s| {
            let inputs = stage1_batch(g, &mut Rng::new(8), s);
            Ok(stage1_loss(g, &inputs, &Stage1Weights::default())?.total)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn info_nce_gradient_b2_d4() {
        let mut rng = Rng::new(9);
        let mut s = ParamStore::new();
        s.insert("a", Tensor::matrix(2, 4, rng.normal_vec(8, 1.0)).unwrap())
            .unwrap();
        s.insert("t", Tensor::matrix(2, 4, rng.normal_vec(8, 1.0)).unwrap())
            .unwrap();
        let r = grad_check(&s, &[], &GradCheckConfig::default(), |g, s| {
            let a = g.param(s, "a")?;
            let t = g.param(s, "t")?;
            info_nce(g, a, t, 0.07, false)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    proptest! {
        #[test]
        fn info_nce_nonnegative_and_scale_invariant(
            seed in 0u64..10_000,
            b in 1usize..6,
            scale in 0.1f32..20.0,
        ) {
            let mut rng = Rng::new(seed);
            let a: Vec<Vec<f32>> = (0..b).map(|_| rng.normal_vec(5, 1.0)).collect();
            let t: Vec<Vec<f32>> = (0..b).map(|_| rng.normal_vec(5, 1.0)).collect();
            let base = info_nce_value(&rows(&a), &rows(&t), 0.07).unwrap();
            prop_assert!(base >= 0.0);
            let mut scaled = a.clone();
            scaled[0].iter_mut().for_each(|x| *x *= scale);
            let l = info_nce_value(&rows(&scaled), &rows(&t), 0.07).unwrap();
            prop_assert!((l - base).abs() < 1e-5);
        }

        #[test]
        fn info_nce_equal_similarities(b in 1usize..12) {
            let a: Vec<Vec<f32>> = (0..b).map(|_| vec![1.0, 0.0, 0.0]).collect();
            let t: Vec<Vec<f32>> = (0..b).map(|_| vec![0.6, 0.8, 0.0]).collect();
            let l = info_nce_value(&rows(&a), &rows(&t), 0.07).unwrap();
            prop_assert!((l - (b as f64).ln()).abs() < 1e-5);
        }
    }
}
