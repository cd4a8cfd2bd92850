//! Transformer encoder from a signal vector to a global token `f^c` and a
//! token sequence `f^e`, plus the image, action and class heads.

use crate::error::{dim_err, Error, Result};
use crate::numerics::layers::{layer_norm, linear};
use crate::numerics::{AttentionSpec, Graph, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BrainModelConfig {
    pub n_voxels: usize,
    pub n_layers: usize,
    pub d_model: usize,
    /// Signal tokens, excluding the global token.
    pub n_tokens: usize,
    pub d_clip: usize,
    pub d_act: usize,
    pub n_classes: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for BrainModelConfig {
    fn default() -> Self {
        Self {
            n_voxels: 256,
            n_layers: 2,
            d_model: 32,
            n_tokens: 8,
            d_clip: 64,
            d_act: 48,
            n_classes: 15,
            n_heads: 1,
            mlp_ratio: 2,
        }
    }
}

crate::impl_settings!(BrainModelConfig {
    n_voxels,
    n_layers,
    d_model,
    n_tokens,
    d_clip,
    d_act,
    n_classes,
    n_heads,
    mlp_ratio,
});

impl BrainModelConfig {
    /// 24 layers of width 2048 over 512 signal tokens plus the global token.
    pub fn full_scale(n_voxels: usize, d_clip: usize, d_act: usize) -> Self {
        Self {
            n_voxels,
            n_layers: 24,
            d_model: 2048,
            n_tokens: 512,
            d_clip,
            d_act,
            n_classes: 15,
            n_heads: 16,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_voxels", self.n_voxels),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_tokens", self.n_tokens),
            ("d_clip", self.d_clip),
            ("d_act", self.d_act),
            ("n_classes", self.n_classes),
            ("n_heads", self.n_heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model {name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config("d_model must be divisible by n_heads".into()));
        }
        Ok(())
    }

    /// Voxels per token; the signal is zero-padded up to `chunk * n_tokens`.
    pub fn chunk(&self) -> usize {
        self.n_voxels.div_ceil(self.n_tokens)
    }

    /// Token count including the global token.
    pub fn sequence_len(&self) -> usize {
        self.n_tokens + 1
    }
}

/// Output of [`BrainModel::encode`] as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct BrainEncoding {
    /// `[d_clip]`
    pub global_token: Tensor,
    /// `[n_tokens, d_model]`
    pub embedding: Tensor,
}

/// Graph handles for one encoded sample.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// `1 x d_clip`
    pub global_token: Var,
    /// `n_tokens x d_model`
    pub embedding: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BrainModel {
    pub cfg: BrainModelConfig,
}

const IMAGE_HEAD: &str = "head.image";
const ACTION_HEAD: &str = "head.action";
const CLASS_HEAD: &str = "head.class";

impl BrainModel {
    pub fn new(cfg: BrainModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    fn attention(&self, layer: usize) -> AttentionSpec {
        let d = self.cfg.d_model;
        AttentionSpec::new(format!("brain.block{layer}.attn"), d, d, d).with_heads(self.cfg.n_heads)
    }

    /// Adds freshly initialised encoder and head parameters to `store`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let c = &self.cfg;
        let d = c.d_model;
        let patch_in = c.chunk() * c.n_tokens;
        store.insert(
            "brain.patch.w",
            Tensor::matrix(
                patch_in,
                d,
                rng.normal_vec(patch_in * d, 1.0 / (c.chunk() as f64).sqrt()),
            )?,
        )?;
        store.insert("brain.global", Tensor::matrix(1, d, rng.normal_vec(d, 0.02))?)?;
        store.insert(
            "brain.pos",
            Tensor::matrix(c.sequence_len(), d, rng.normal_vec(c.sequence_len() * d, 0.02))?,
        )?;
        let hidden = d * c.mlp_ratio;
        for l in 0..c.n_layers {
            store.insert_layer_norm(&format!("brain.block{l}.ln1"), d)?;
            self.attention(l).init(store, rng)?;
            store.insert_layer_norm(&format!("brain.block{l}.ln2"), d)?;
            store.insert_linear(&format!("brain.block{l}.mlp1"), d, hidden, rng)?;
            store.insert_linear(&format!("brain.block{l}.mlp2"), hidden, d, rng)?;
        }
        store.insert_layer_norm("brain.ln_final", d)?;
        store.insert_linear("brain.global_proj", d, c.d_clip, rng)?;

        store.insert(format!("{IMAGE_HEAD}.w"), Tensor::identity(c.d_clip))?;
        store.insert(format!("{IMAGE_HEAD}.b"), Tensor::zeros(&[1, c.d_clip]))?;
        store.insert_linear(ACTION_HEAD, c.d_clip, c.d_act, rng)?;
        store.insert_linear(CLASS_HEAD, c.d_clip, c.n_classes, rng)?;
        Ok(())
    }

    fn patches(&self, signal: &Tensor) -> Result<Vec<f64>> {
        let c = &self.cfg;
        if signal.len() != c.n_voxels {
            return Err(dim_err(format!(
                "signal has {} voxels, model expects {}",
                signal.len(),
                c.n_voxels
            )));
        }
        if !signal.all_finite() {
            return Err(Error::Numeric("signal contains non-finite values".into()));
        }
        let mut v = signal.to_f64();
        v.resize(c.chunk() * c.n_tokens, 0.0);
        Ok(v)
    }

    /// Records the encoder forward pass for one signal on `g`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, signal: &Tensor) -> Result<EncodedVars> {
        let c = &self.cfg;
        let chunk = c.chunk();
        let patches = g.constant_raw(c.n_tokens, chunk, self.patches(signal)?)?;
        let w = g.param(store, "brain.patch.w")?;
        let mut tokens = Vec::with_capacity(c.sequence_len());
        tokens.push(g.param(store, "brain.global")?);
        for k in 0..c.n_tokens {
            // each chunk gets its own projection
            let row = g.slice_rows(patches, k, 1)?;
            let wk = g.slice_rows(w, k * chunk, chunk)?;
            tokens.push(g.matmul(row, wk)?);
        }
        let seq = g.concat_rows(&tokens)?;
        let pos = g.param(store, "brain.pos")?;
        let mut h = g.add(seq, pos)?;

        for l in 0..c.n_layers {
            let x = layer_norm(g, store, &format!("brain.block{l}.ln1"), h)?;
            let a = self.attention(l).forward(g, store, x, x)?;
            h = g.add(h, a)?;
            let x = layer_norm(g, store, &format!("brain.block{l}.ln2"), h)?;
            let x = linear(g, store, &format!("brain.block{l}.mlp1"), x)?;
            let x = g.silu(x);
            let x = linear(g, store, &format!("brain.block{l}.mlp2"), x)?;
            h = g.add(h, x)?;
        }
        let h = layer_norm(g, store, "brain.ln_final", h)?;
        let first = g.slice_rows(h, 0, 1)?;
        let global_token = linear(g, store, "brain.global_proj", first)?;
        let embedding = g.slice_rows(h, 1, c.n_tokens)?;
        Ok(EncodedVars {
            global_token,
            embedding,
        })
    }

    /// Mean-pools `frames` (`F x d_clip`) and applies the image head.
    pub fn consolidate_frames(&self, g: &mut Graph, store: &ParamStore, frames: Var) -> Result<Var> {
        let (f, d) = g.dims(frames);
        if f == 0 {
            return Err(Error::EmptyInput("no frames to consolidate".into()));
        }
        if d != self.cfg.d_clip {
            return Err(dim_err(format!("frame width {d}, expected {}", self.cfg.d_clip)));
        }
        let pooled = g.mean_rows(frames);
        linear(g, store, IMAGE_HEAD, pooled)
    }

    /// Action head on each row of `global_token`.
    pub fn action_project(&self, g: &mut Graph, store: &ParamStore, global_token: Var) -> Result<Var> {
        linear(g, store, ACTION_HEAD, global_token)
    }

    /// Class logits for each row of `global_token`.
    pub fn classify(&self, g: &mut Graph, store: &ParamStore, global_token: Var) -> Result<Var> {
        linear(g, store, CLASS_HEAD, global_token)
    }

    pub fn encode_value(&self, store: &ParamStore, signal: &Tensor) -> Result<BrainEncoding> {
        let mut g = Graph::new();
        let e = self.encode(&mut g, store, signal)?;
        let c = &self.cfg;
        Ok(BrainEncoding {
            global_token: Tensor::from_f64(vec![c.d_clip], g.value(e.global_token))?,
            embedding: g.to_tensor(e.embedding),
        })
    }

    pub fn consolidate_frames_value(&self, store: &ParamStore, frames: &Tensor) -> Result<Tensor> {
        if frames.is_empty() {
            return Err(Error::EmptyInput("no frames to consolidate".into()));
        }
        let mut g = Graph::new();
        let f = g.constant(frames);
        let out = self.consolidate_frames(&mut g, store, f)?;
        Tensor::from_f64(vec![self.cfg.d_clip], g.value(out))
    }

    pub fn action_project_value(&self, store: &ParamStore, global_token: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(global_token);
        let out = self.action_project(&mut g, store, x)?;
        Tensor::from_f64(vec![self.cfg.d_act], g.value(out))
    }

    pub fn classify_value(&self, store: &ParamStore, global_token: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(global_token);
        let out = self.classify(&mut g, store, x)?;
        Tensor::from_f64(vec![self.cfg.n_classes], g.value(out))
    }
}
