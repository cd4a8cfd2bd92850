//! Integration of retrieved memories into the brain embedding: two
//! cross-attention branches, then a zero-gated residual merge with the
//! retrieved text embedding.

use crate::error::{Error, Result};
use crate::numerics::layers::{layer_norm, linear};
use crate::numerics::{AttentionSpec, Graph, ParamStore, Rng, Tensor, Var};

const NORM: &str = "fusion.norm";
const GATE_FMRI: &str = "fusion.gate_fmri";
const GATE_TXT: &str = "fusion.gate_txt";

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModule {
    pub d_model: usize,
    pub d_clip: usize,
    pub d_act: usize,
    pub heads: usize,
    pub alpha: f64,
}

/// Conditioning tokens handed to the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedCondition {
    /// `[n_tokens, d_clip]`
    pub tokens: Tensor,
}

impl FusionModule {
    pub fn new(d_model: usize, d_clip: usize, d_act: usize) -> Self {
        Self {
            d_model,
            d_clip,
            d_act,
            heads: 1,
            alpha: 1.0,
        }
    }

    pub fn attn_image(&self) -> AttentionSpec {
        AttentionSpec::new("fusion.attn_img", self.d_model, self.d_clip, self.d_model).with_heads(self.heads)
    }

    pub fn attn_action(&self) -> AttentionSpec {
        AttentionSpec::new("fusion.attn_act", self.d_model, self.d_act, self.d_model).with_heads(self.heads)
    }

    /// Random attention weights; both gates start at exactly zero.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.attn_image().init(store, rng)?;
        self.attn_action().init(store, rng)?;
        store.insert_layer_norm(NORM, self.d_model)?;
        store.insert_zero_linear(GATE_FMRI, self.d_model, self.d_clip)?;
        store.insert_zero_linear(GATE_TXT, self.d_clip, self.d_clip)
    }

    /// `CrossAttn(f_e; image_mems) + CrossAttn(f_e; action_mems)`.
    pub fn attend_memories(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_e: Var,
        image_mems: Var,
        action_mems: Var,
    ) -> Result<Var> {
        if g.dims(image_mems).0 == 0 || g.dims(action_mems).0 == 0 {
            return Err(Error::Retrieval("no memories to attend to".into()));
        }
        let a = self.attn_image().forward(g, store, f_e, image_mems)?;
        let b = self.attn_action().forward(g, store, f_e, action_mems)?;
        g.add(a, b)
    }

    /// `(gate_txt(t) + t)` broadcast over tokens, plus `α·gate_fmri(LN(f̂))`.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, f_e_hat: Var, text_mem: Var) -> Result<Var> {
        let (n, _) = g.dims(f_e_hat);
        let normed = layer_norm(g, store, NORM, f_e_hat)?;
        let z_f = linear(g, store, GATE_FMRI, normed)?;
        let gated = linear(g, store, GATE_TXT, text_mem)?;
        let z_t = g.add(gated, text_mem)?;
        let z_t = g.broadcast_rows(z_t, n)?;
        let z_f = g.scale(z_f, self.alpha);
        g.add(z_t, z_f)
    }

    pub fn attend_memories_value(
        &self,
        store: &ParamStore,
        f_e: &Tensor,
        image_mems: &Tensor,
        action_mems: &Tensor,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let (q, i, a) = (g.constant(f_e), g.constant(image_mems), g.constant(action_mems));
        let out = self.attend_memories(&mut g, store, q, i, a)?;
        Ok(g.to_tensor(out))
    }

    pub fn fuse_value(&self, store: &ParamStore, f_e_hat: &Tensor, text_mem: &Tensor) -> Result<FusedCondition> {
        let mut g = Graph::new();
        let f = g.constant(f_e_hat);
        let t = g.constant_raw(1, text_mem.len(), text_mem.to_f64())?;
        let out = self.fuse(&mut g, store, f, t)?;
        Ok(FusedCondition {
            tokens: g.to_tensor(out),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, AdamW, AdamWConfig, GradCheckConfig, Rng};
    use proptest::prelude::*;

    fn module(d_model: usize, d_clip: usize, d_act: usize, seed: u64) -> (FusionModule, ParamStore) {
        let m = FusionModule::new(d_model, d_clip, d_act);
        let mut store = ParamStore::new();
        m.init(&mut store, &mut Rng::new(seed)).unwrap();
        (m, store)
    }

    fn randomise_gates(store: &mut ParamStore, rng: &mut Rng) {
        for name in [
            "fusion.gate_fmri.w",
            "fusion.gate_fmri.b",
            "fusion.gate_txt.w",
            "fusion.gate_txt.b",
        ] {
            let p = store.get_mut(name).unwrap();
            let n = p.tensor.len();
            p.tensor.data_mut().copy_from_slice(&rng.normal_vec(n, 0.5));
        }
    }

    #[test]
    fn fresh_gates_pass_text_through_bitwise() {
        let (m, store) = module(6, 5, 4, 0);
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            let f = Tensor::matrix(3, 6, rng.normal_vec(18, 3.0)).unwrap();
            let t = Tensor::vector(rng.normal_vec(5, 1.0));
            let out = m.fuse_value(&store, &f, &t).unwrap();
            for r in 0..3 {
                assert!(out
                    .tokens
                    .row(r)
                    .iter()
                    .zip(t.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    #[test]
    fn alpha_zero_gives_text_branch() {
        let (mut m, mut store) = module(4, 3, 2, 2);
        let mut rng = Rng::new(3);
        randomise_gates(&mut store, &mut rng);
        m.alpha = 0.0;
        let t = Tensor::vector(rng.normal_vec(3, 1.0));
        let a = m
            .fuse_value(&store, &Tensor::matrix(2, 4, rng.normal_vec(8, 1.0)).unwrap(), &t)
            .unwrap();
        let b = m
            .fuse_value(&store, &Tensor::matrix(2, 4, rng.normal_vec(8, 5.0)).unwrap(), &t)
            .unwrap();
        assert!(a.tokens.bitwise_eq(&b.tokens));
    }

    #[test]
    fn fuse_matches_hand_evaluation() {
        let (m, mut store) = module(3, 3, 2, 4);
        let gf = vec![0.5, -1.0, 0.0, 1.0, 0.25, 2.0, 0.0, 0.5, -0.5];
        let gt = vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.5, 0.0, -1.0];
        store.get_mut("fusion.gate_fmri.w").unwrap().tensor = Tensor::matrix(3, 3, gf.clone()).unwrap();
        store.get_mut("fusion.gate_fmri.b").unwrap().tensor = Tensor::matrix(1, 3, vec![0.1, 0.0, -0.1]).unwrap();
        store.get_mut("fusion.gate_txt.w").unwrap().tensor = Tensor::matrix(3, 3, gt.clone()).unwrap();
        let f = [[1.0f64, 2.0, 4.0], [-1.0, 0.0, 0.5]];
        let t = [0.3f64, -0.2, 0.9];
        let out = m
            .fuse_value(
                &store,
                &Tensor::matrix(2, 3, f.iter().flatten().map(|&v| v as f32).collect()).unwrap(),
                &Tensor::vector(t.iter().map(|&v| v as f32).collect()),
            )
            .unwrap();
        let z_t: Vec<f64> = (0..3)
            .map(|j| t[j] + (0..3).map(|i| t[i] * gt[i * 3 + j] as f64).sum::<f64>())
            .collect();
        for (r, row) in f.iter().enumerate() {
            let mean = row.iter().sum::<f64>() / 3.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            let ln: Vec<f64> = row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
            for j in 0..3 {
                let bias = [0.1, 0.0, -0.1][j];
                let z_f = bias + (0..3).map(|i| ln[i] * gf[i * 3 + j] as f64).sum::<f64>();
                let want = z_t[j] + z_f;
                assert!((out.tokens.row(r)[j] as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn attention_examples() {
        let (m, mut store) = module(3, 3, 3, 5);
        let mut rng = Rng::new(6);
        let f = Tensor::matrix(2, 3, rng.normal_vec(6, 1.0)).unwrap();
        let img = Tensor::matrix(4, 3, rng.normal_vec(12, 1.0)).unwrap();
        let act = Tensor::matrix(4, 3, rng.normal_vec(12, 1.0)).unwrap();
        let mut zeroed = store.clone();
        for name in ["fusion.attn_img.wv", "fusion.attn_act.wv"] {
            zeroed.get_mut(name).unwrap().tensor = Tensor::zeros(&[3, 3]);
        }
        let out = m.attend_memories_value(&zeroed, &f, &img, &act).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        // K = 1: each branch is its single value row pushed through wv·wo
        let one_img = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let one_act = Tensor::matrix(1, 3, vec![0.0, 1.0, 3.0]).unwrap();
        let out = m.attend_memories_value(&store, &f, &one_img, &one_act).unwrap();
        let project = |x: &Tensor, p: &str| -> Vec<f64> {
            let wv = store.tensor(&format!("{p}.wv")).unwrap().to_f64();
            let wo = store.tensor(&format!("{p}.wo")).unwrap().to_f64();
            let v: Vec<f64> = (0..3)
                .map(|j| (0..3).map(|i| x.data()[i] as f64 * wv[i * 3 + j]).sum())
                .collect();
            (0..3).map(|j| (0..3).map(|i| v[i] * wo[i * 3 + j]).sum()).collect()
        };
        let (pi, pa) = (
            project(&one_img, "fusion.attn_img"),
            project(&one_act, "fusion.attn_act"),
        );
        for r in 0..2 {
            for j in 0..3 {
                assert!((out.row(r)[j] as f64 - (pi[j] + pa[j])).abs() < 1e-5);
            }
        }

        // identity projections, one query, two keys per branch
        for p in ["fusion.attn_img", "fusion.attn_act"] {
            for w in ["wq", "wk", "wv", "wo"] {
                store.get_mut(&format!("{p}.{w}")).unwrap().tensor = Tensor::identity(3);
            }
        }
        let q = [1.0f64, 0.0, 1.0];
        let ki = [[1.0f64, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let ka = [[0.0f64, 0.0, 2.0], [1.0, 1.0, 1.0]];
        let branch = |keys: &[[f64; 3]; 2]| -> Vec<f64> {
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / 3f64.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            (0..3)
                .map(|j| keys.iter().zip(&logits).map(|(k, l)| l.exp() / z * k[j]).sum())
                .collect()
        };
        let (bi, ba) = (branch(&ki), branch(&ka));
        let flat = |m: &[[f64; 3]; 2]| Tensor::matrix(2, 3, m.iter().flatten().map(|&v| v as f32).collect()).unwrap();
        let out = m
            .attend_memories_value(
                &store,
                &Tensor::matrix(1, 3, q.map(|v| v as f32).to_vec()).unwrap(),
                &flat(&ki),
                &flat(&ka),
            )
            .unwrap();
        for j in 0..3 {
            assert!((out.data()[j] as f64 - (bi[j] + ba[j])).abs() < 1e-6);
        }
    }

    #[test]
    fn gates_receive_gradient() {
        let (m, mut store) = module(4, 3, 2, 7);
        let mut rng = Rng::new(8);
        let f = Tensor::matrix(2, 4, rng.normal_vec(8, 1.0)).unwrap();
        let t = Tensor::vector(rng.normal_vec(3, 1.0));
        let target = Tensor::matrix(2, 3, rng.normal_vec(6, 1.0)).unwrap();
        let mut g = Graph::new();
        let fv = g.constant(&f);
        let tv = g.constant_raw(1, 3, t.to_f64()).unwrap();
        let out = m.fuse(&mut g, &store, fv, tv).unwrap();
        let y = g.constant(&target);
        let d = g.sub(out, y).unwrap();
        let sq = g.mul(d, d).unwrap();
        let loss = g.mean_all(sq);
        g.backward(loss).unwrap().accumulate_into(&mut store);
        AdamW::new(AdamWConfig::default()).step(&mut store, 1e-2);
        assert!(store
            .tensor("fusion.gate_fmri.w")
            .unwrap()
            .data()
            .iter()
            .any(|&v| v != 0.0));
        assert!(store
            .tensor("fusion.gate_txt.w")
            .unwrap()
            .data()
            .iter()
            .any(|&v| v != 0.0));
    }

    #[test]
    fn fusion_paths_pass_gradient_check() {
        let (m, mut store) = module(8, 6, 5, 9);
        let mut rng = Rng::new(10);
        randomise_gates(&mut store, &mut rng);
        let f = Tensor::matrix(3, 8, rng.normal_vec(24, 1.0)).unwrap();
        let img = Tensor::matrix(4, 6, rng.normal_vec(24, 1.0)).unwrap();
        let act = Tensor::matrix(4, 5, rng.normal_vec(20, 1.0)).unwrap();
        let t = Tensor::matrix(1, 6, rng.normal_vec(6, 1.0)).unwrap();
        let target = Tensor::matrix(3, 6, rng.normal_vec(18, 1.0)).unwrap();
        let report = grad_check(&store, &[], &GradCheckConfig::default(), |g, s| {
            let fv = g.constant(&f);
            let (iv, av, tv) = (g.constant(&img), g.constant(&act), g.constant(&t));
            let hat = m.attend_memories(g, s, fv, iv, av)?;
            let out = m.fuse(g, s, hat, tv)?;
            let y = g.constant(&target);
            let d = g.sub(out, y)?;
            let sq = g.mul(d, d)?;
            Ok(g.mean_all(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    proptest! {
        #[test]
        fn alpha_continuity(seed in 0u64..2000, eps in 0.0f64..0.5) {
            let (mut m, mut store) = module(4, 3, 2, seed);
            let mut rng = Rng::new(seed + 1);
            randomise_gates(&mut store, &mut rng);
            let f = Tensor::matrix(2, 4, rng.normal_vec(8, 1.0)).unwrap();
            let t = Tensor::vector(rng.normal_vec(3, 1.0));
            m.alpha = 0.0;
            let base = m.fuse_value(&store, &f, &t).unwrap().tokens;
            m.alpha = 1.0;
            let full = m.fuse_value(&store, &f, &t).unwrap().tokens;
            m.alpha = eps;
            let at = m.fuse_value(&store, &f, &t).unwrap().tokens;
            let dist = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
            // ‖z_f‖ = ‖fuse(α=1) − fuse(α=0)‖
            prop_assert!(dist(&at, &base) <= eps * dist(&full, &base) + 1e-6);
        }

        #[test]
        fn duplicated_memories_do_not_change_attention(seed in 0u64..2000, k in 1usize..5) {
            let (m, store) = module(4, 3, 2, seed);
            let mut rng = Rng::new(seed + 7);
            let f = Tensor::matrix(2, 4, rng.normal_vec(8, 1.0)).unwrap();
            let img = Tensor::matrix(k, 3, rng.normal_vec(3 * k, 1.0)).unwrap();
            let act = Tensor::matrix(k, 2, rng.normal_vec(2 * k, 1.0)).unwrap();
            let dup = |x: &Tensor| {
                let rows: Vec<&[f32]> = (0..x.matrix_dims().0).flat_map(|r| [x.row(r), x.row(r)]).collect();
                Tensor::stack_rows(&rows).unwrap()
            };
            let a = m.attend_memories_value(&store, &f, &img, &act).unwrap();
            let b = m.attend_memories_value(&store, &f, &dup(&img), &dup(&act)).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-5);
        }
    }
}
