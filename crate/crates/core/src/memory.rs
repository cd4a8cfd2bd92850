//! Memory pool, modality router, mixture scoring and top-K retrieval.

use std::cmp::Ordering;
use std::collections::HashSet;

use crate::datasynth::SignalSample;
use crate::error::{dim_err, Error, Result};
use crate::numerics::layers::linear;
use crate::numerics::ops::cosine_slices;
use crate::numerics::{Graph, ParamStore, Rng, Tensor, Var};

pub const DEFAULT_TOP_K: usize = 4;

const ROUTER: &str = "mom.router";
const QUERY_CLIP: &str = "mom.query_clip";
const QUERY_ACT: &str = "mom.query_act";

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub id: u64,
    /// `[d_clip]`
    pub e_txt: Tensor,
    /// `[d_clip]`
    pub e_img: Tensor,
    /// `[d_act]`
    pub e_act: Tensor,
    pub source_tag: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryPool {
    entries: Vec<MemoryEntry>,
    d_clip: usize,
    d_act: usize,
}

impl MemoryPool {
    pub fn new(d_clip: usize, d_act: usize) -> Self {
        Self {
            entries: Vec::new(),
            d_clip,
            d_act,
        }
    }

    /// Builds a pool from raw entries, checking dims, finiteness and id
    /// uniqueness.
    pub fn from_entries(d_clip: usize, d_act: usize, entries: Vec<MemoryEntry>) -> Result<Self> {
        let mut pool = Self::new(d_clip, d_act);
        let mut seen = HashSet::with_capacity(entries.len());
        for e in entries {
            if !seen.insert(e.id) {
                return Err(Error::Pool(format!("duplicate entry id {}", e.id)));
            }
            pool.check(&e)?;
            pool.entries.push(e);
        }
        Ok(pool)
    }

    fn check(&self, e: &MemoryEntry) -> Result<()> {
        if e.e_txt.len() != self.d_clip || e.e_img.len() != self.d_clip || e.e_act.len() != self.d_act {
            return Err(Error::Pool(format!(
                "entry {} has dims ({}, {}, {}), pool expects ({}, {}, {})",
                e.id,
                e.e_txt.len(),
                e.e_img.len(),
                e.e_act.len(),
                self.d_clip,
                self.d_clip,
                self.d_act
            )));
        }
        if !(e.e_txt.all_finite() && e.e_img.all_finite() && e.e_act.all_finite()) {
            return Err(Error::Pool(format!("entry {} has non-finite embeddings", e.id)));
        }
        Ok(())
    }

    pub fn push(&mut self, entry: MemoryEntry) -> Result<()> {
        self.check(&entry)?;
        if self.entries.iter().any(|e| e.id == entry.id) {
            return Err(Error::Pool(format!("duplicate entry id {}", entry.id)));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// One entry per sample: text and action embeddings as stored, image
    /// embedding as the mean over frames.
    pub fn from_samples(samples: &[SignalSample], source_tag: &str) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::EmptyInput("no samples for pool".into()))?;
        let (d_clip, d_act) = (first.e_txt.len(), first.e_act.len());
        let entries = samples
            .iter()
            .map(|s| MemoryEntry {
                id: s.id,
                e_txt: s.e_txt.clone(),
                e_img: mean_frames(&s.e_img),
                e_act: s.e_act.clone(),
                source_tag: source_tag.to_string(),
            })
            .collect();
        Self::from_entries(d_clip, d_act, entries)
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_clip, self.d_act)
    }

    pub fn position_of(&self, id: u64) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    /// Stacked modality matrices for scoring on a graph.
    pub fn matrices(&self) -> Result<PoolMatrices> {
        if self.is_empty() {
            return Err(Error::Pool("empty pool".into()));
        }
        let stack = |f: fn(&MemoryEntry) -> &Tensor| {
            let rows: Vec<&[f32]> = self.entries.iter().map(|e| f(e).data()).collect();
            Tensor::stack_rows(&rows)
        };
        Ok(PoolMatrices {
            txt: stack(|e| &e.e_txt)?,
            img: stack(|e| &e.e_img)?,
            act: stack(|e| &e.e_act)?,
        })
    }
}

/// `F x d` frame embeddings averaged to `[d]`.
pub fn mean_frames(frames: &Tensor) -> Tensor {
    let (f, d) = frames.matrix_dims();
    let mut out = vec![0f64; d];
    for r in 0..f {
        for (o, &v) in out.iter_mut().zip(frames.row(r)) {
            *o += v as f64;
        }
    }
    Tensor::vector(out.iter().map(|v| (v / f as f64) as f32).collect())
}

/// Stacked pool embeddings, `N x d` per modality.
#[derive(Clone, Debug)]
pub struct PoolMatrices {
    pub txt: Tensor,
    pub img: Tensor,
    pub act: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoutingWeights {
    pub w_txt: f64,
    pub w_img: f64,
    pub w_act: f64,
}

impl RoutingWeights {
    pub const UNIFORM: Self = Self {
        w_txt: 1.0 / 3.0,
        w_img: 1.0 / 3.0,
        w_act: 1.0 / 3.0,
    };

    /// Softmax of three router logits.
    pub fn from_logits(logits: [f64; 3]) -> Self {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = logits.map(|l| (l - m).exp());
        let s: f64 = e.iter().sum();
        Self {
            w_txt: e[0] / s,
            w_img: e[1] / s,
            w_act: e[2] / s,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.w_txt, self.w_img, self.w_act]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub weights: RoutingWeights,
    /// `[N]`, in pool order
    pub scores: Tensor,
    /// entry ids, best first
    pub top_ids: Vec<u64>,
    /// positions in the pool matching `top_ids`
    pub top_positions: Vec<usize>,
    /// `[d_clip]`, text embedding of the best entry
    pub text_mem: Tensor,
    /// `[K, d_clip]`
    pub image_mems: Tensor,
    /// `[K, d_act]`
    pub action_mems: Tensor,
}

/// `Sᵢ = w_txt·cos(q_clip, txtᵢ) + w_img·cos(q_clip, imgᵢ) + w_act·cos(q_act, actᵢ)`.
pub fn mixture_scores(q_clip: &Tensor, q_act: &Tensor, w: &RoutingWeights, pool: &MemoryPool) -> Result<Tensor> {
    if pool.is_empty() {
        return Err(Error::Pool("cannot score an empty pool".into()));
    }
    let (d_clip, d_act) = pool.dims();
    if q_clip.len() != d_clip || q_act.len() != d_act {
        return Err(dim_err(format!(
            "queries of width ({}, {}) against pool dims ({d_clip}, {d_act})",
            q_clip.len(),
            q_act.len()
        )));
    }
    let mut scores = Vec::with_capacity(pool.len());
    for e in pool.entries() {
        let t = cosine_slices(q_clip.data(), e.e_txt.data())?.0;
        let i = cosine_slices(q_clip.data(), e.e_img.data())?.0;
        let a = cosine_slices(q_act.data(), e.e_act.data())?.0;
        scores.push((w.w_txt * t + w.w_img * i + w.w_act * a) as f32);
    }
    Ok(Tensor::vector(scores))
}

/// Positions of the `k` best scores, best first; equal scores go to the
/// smaller entry id.
pub fn top_k_positions(scores: &[f32], ids: &[u64], k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 {
        return Err(Error::Retrieval("top-K needs K >= 1".into()));
    }
    if k > n {
        return Err(Error::Capacity { k, n });
    }
    let cmp = |&a: &usize, &b: &usize| -> Ordering { scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])) };
    let mut order: Vec<usize> = (0..n).collect();
    if k < n {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    Ok(order)
}

pub fn retrieve(scores: &Tensor, pool: &MemoryPool, k: usize, weights: RoutingWeights) -> Result<RetrievalResult> {
    if pool.is_empty() {
        return Err(Error::Pool("cannot retrieve from an empty pool".into()));
    }
    if scores.len() != pool.len() {
        return Err(dim_err(format!("{} scores for a pool of {}", scores.len(), pool.len())));
    }
    let ids: Vec<u64> = pool.entries().iter().map(|e| e.id).collect();
    let top = top_k_positions(scores.data(), &ids, k)?;
    let entries = pool.entries();
    let img: Vec<&[f32]> = top.iter().map(|&p| entries[p].e_img.data()).collect();
    let act: Vec<&[f32]> = top.iter().map(|&p| entries[p].e_act.data()).collect();
    Ok(RetrievalResult {
        weights,
        scores: scores.clone(),
        top_ids: top.iter().map(|&p| ids[p]).collect(),
        text_mem: entries[top[0]].e_txt.clone(),
        image_mems: Tensor::stack_rows(&img)?,
        action_mems: Tensor::stack_rows(&act)?,
        top_positions: top,
    })
}

/// Concatenates two pools. Entries of `b` whose id collides with one already
/// present are renumbered past the current maximum id.
pub fn pool_merge(a: &MemoryPool, b: &MemoryPool) -> Result<MemoryPool> {
    if a.dims() != b.dims() {
        return Err(Error::Pool(format!(
            "cannot merge pools with dims {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut used: HashSet<u64> = a.entries().iter().map(|e| e.id).collect();
    let mut next = a
        .entries()
        .iter()
        .chain(b.entries())
        .map(|e| e.id)
        .max()
        .map_or(0, |m| m + 1);
    let mut out = a.clone();
    for e in b.entries() {
        let mut e = e.clone();
        if !used.insert(e.id) {
            e.id = next;
            used.insert(next);
            next += 1;
        }
        out.entries.push(e);
    }
    Ok(out)
}

/// Learned router and query projections.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryModule {
    pub d_model: usize,
    pub d_clip: usize,
    pub d_act: usize,
    pub top_k: usize,
}

impl MemoryModule {
    pub fn new(d_model: usize, d_clip: usize, d_act: usize, top_k: usize) -> Result<Self> {
        if d_model == 0 || d_clip == 0 || d_act == 0 {
            return Err(Error::Config("memory dims must be positive".into()));
        }
        if top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(Self {
            d_model,
            d_clip,
            d_act,
            top_k,
        })
    }

    /// Zero router (uniform weights) and random query projections.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        store.insert_zero_linear(ROUTER, self.d_model, 3)?;
        store.insert_linear(QUERY_CLIP, self.d_model, self.d_clip, rng)?;
        store.insert_linear(QUERY_ACT, self.d_model, self.d_act, rng)?;
        Ok(())
    }

    /// Mean over tokens of each `n_tokens x d_model` embedding, stacked.
    pub fn pool_tokens(&self, g: &mut Graph, embeddings: &[Var]) -> Result<Var> {
        let rows: Vec<Var> = embeddings.iter().map(|&e| g.mean_rows(e)).collect();
        g.concat_rows(&rows)
    }

    /// `B x 3` routing weights from pooled embeddings.
    pub fn route_vars(&self, g: &mut Graph, store: &ParamStore, pooled: Var) -> Result<Var> {
        let logits = linear(g, store, ROUTER, pooled)?;
        g.softmax_rows(logits)
    }

    pub fn query_vars(&self, g: &mut Graph, store: &ParamStore, pooled: Var) -> Result<(Var, Var)> {
        Ok((
            linear(g, store, QUERY_CLIP, pooled)?,
            linear(g, store, QUERY_ACT, pooled)?,
        ))
    }

    /// `B x N` mixture scores on the graph.
    pub fn score_vars(&self, g: &mut Graph, weights: Var, q_clip: Var, q_act: Var, pool: &PoolMatrices) -> Result<Var> {
        let n = pool.txt.matrix_dims().0;
        let (b, _) = g.dims(weights);
        let qc = g.l2_normalize_rows(q_clip);
        let qa = g.l2_normalize_rows(q_act);
        let ones = g.constant_raw(1, n, vec![1.0; n])?;
        let mut total = None;
        for (m, (mat, q)) in [(&pool.txt, qc), (&pool.img, qc), (&pool.act, qa)]
            .into_iter()
            .enumerate()
        {
            let keys = g.constant(mat);
            let keys = g.l2_normalize_rows(keys);
            let cos = g.matmul_bt(q, keys)?;
            let w = g.slice_cols(weights, m, 1)?;
            let w = g.matmul(w, ones)?;
            let term = g.mul(w, cos)?;
            total = Some(match total {
                None => term,
                Some(t) => g.add(t, term)?,
            });
        }
        let total = total.expect("three modalities");
        debug_assert_eq!(g.dims(total), (b, n));
        Ok(total)
    }

    pub fn route(&self, store: &ParamStore, f_e: &Tensor) -> Result<RoutingWeights> {
        let mut g = Graph::new();
        let e = g.constant(f_e);
        let pooled = g.mean_rows(e);
        let w = self.route_vars(&mut g, store, pooled)?;
        let v = g.value(w);
        Ok(RoutingWeights {
            w_txt: v[0],
            w_img: v[1],
            w_act: v[2],
        })
    }

    /// `(q_clip [d_clip], q_act [d_act])` from the mean-pooled embedding.
    pub fn query_projections(&self, store: &ParamStore, f_e: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let e = g.constant(f_e);
        let pooled = g.mean_rows(e);
        let (qc, qa) = self.query_vars(&mut g, store, pooled)?;
        Ok((
            Tensor::from_f64(vec![self.d_clip], g.value(qc))?,
            Tensor::from_f64(vec![self.d_act], g.value(qa))?,
        ))
    }

    /// Route, score and retrieve for one `n_tokens x d_model` embedding.
    pub fn query(&self, store: &ParamStore, f_e: &Tensor, pool: &MemoryPool) -> Result<RetrievalResult> {
        let w = self.route(store, f_e)?;
        let (qc, qa) = self.query_projections(store, f_e)?;
        let scores = mixture_scores(&qc, &qa, &w, pool)?;
        retrieve(&scores, pool, self.top_k, w)
    }
}
