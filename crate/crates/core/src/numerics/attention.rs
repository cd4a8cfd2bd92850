use super::{Graph, ParamStore, Rng, Tensor, Var};
use crate::error::{dim_err, Result};

/// Shape and parameter naming for one (cross-)attention layer.
///
/// Parameters live in a [`ParamStore`] under `{prefix}.wq` (`d_query x d_inner`),
/// `{prefix}.wk`, `{prefix}.wv` (`d_kv x d_inner`) and `{prefix}.wo`
/// (`d_inner x d_query`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub prefix: String,
    pub d_query: usize,
    pub d_kv: usize,
    pub d_inner: usize,
    pub heads: usize,
}

impl AttentionSpec {
    pub fn new(prefix: impl Into<String>, d_query: usize, d_kv: usize, d_inner: usize) -> Self {
        Self {
            prefix: prefix.into(),
            d_query,
            d_kv,
            d_inner,
            heads: 1,
        }
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    fn name(&self, w: &str) -> String {
        format!("{}.{w}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        if self.heads == 0 || !self.d_inner.is_multiple_of(self.heads) {
            return Err(dim_err(format!(
                "inner width {} not divisible into {} heads",
                self.d_inner, self.heads
            )));
        }
        let q = 1.0 / (self.d_query as f64).sqrt();
        let kv = 1.0 / (self.d_kv as f64).sqrt();
        let o = 1.0 / (self.d_inner as f64).sqrt();
        let (dq, dkv, di) = (self.d_query, self.d_kv, self.d_inner);
        store.insert(self.name("wq"), Tensor::matrix(dq, di, rng.normal_vec(dq * di, q))?)?;
        store.insert(self.name("wk"), Tensor::matrix(dkv, di, rng.normal_vec(dkv * di, kv))?)?;
        store.insert(self.name("wv"), Tensor::matrix(dkv, di, rng.normal_vec(dkv * di, kv))?)?;
        store.insert(self.name("wo"), Tensor::matrix(di, dq, rng.normal_vec(di * dq, o))?)
    }

    /// `softmax(Q Kᵀ / sqrt(d_head)) V`, heads concatenated, then projected by `wo`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q_tokens: Var, kv_tokens: Var) -> Result<Var> {
        if g.dims(q_tokens).1 != self.d_query || g.dims(kv_tokens).1 != self.d_kv {
            return Err(dim_err(format!(
                "attention {} expects query width {} and key width {}, got {:?} and {:?}",
                self.prefix,
                self.d_query,
                self.d_kv,
                g.dims(q_tokens),
                g.dims(kv_tokens)
            )));
        }
        let wq = g.param(store, &self.name("wq"))?;
        let wk = g.param(store, &self.name("wk"))?;
        let wv = g.param(store, &self.name("wv"))?;
        let wo = g.param(store, &self.name("wo"))?;
        let q = g.matmul(q_tokens, wq)?;
        let k = g.matmul(kv_tokens, wk)?;
        let v = g.matmul(kv_tokens, wv)?;
        let dh = self.d_inner / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let logits = g.matmul_bt(qh, kh)?;
            let logits = g.scale(logits, scale);
            let weights = g.softmax_rows(logits)?;
            outs.push(g.matmul(weights, vh)?);
        }
        let mixed = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        g.matmul(mixed, wo)
    }
}
