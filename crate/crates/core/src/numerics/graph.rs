//! Tape-based reverse-mode differentiation over 2-D `f64` values.
//!
//! Every node is a `rows x cols` matrix; vectors are `1 x n` and scalars are
//! `1 x 1`. Parameters enter the tape from a [`ParamStore`] (stored as `f32`)
//! and are widened to `f64`, so forward values and gradients are accumulated
//! in 64-bit.

use std::collections::HashMap;

use super::{ParamStore, Tensor};
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleBy(Var, Var),
    Affine(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var, Vec<f64>),
    L2NormalizeRows(Var, Vec<f64>),
    MeanRows(Var),
    SumAll(Var),
    Sigmoid(Var),
    Silu(Var),
    Log(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    BroadcastRows(Var),
    CrossEntropyRows(Var, Vec<usize>, Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// A single-element perturbation applied when a parameter is read onto the
/// tape. Used by finite-difference checking.
#[derive(Clone, Copy, Debug)]
pub struct Perturbation {
    pub param: usize,
    pub element: usize,
    pub delta: f64,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<usize, Var>,
    perturb: Option<Perturbation>,
}

/// Gradients with respect to every parameter read onto the tape.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub by_param: Vec<(usize, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, param: usize) -> Option<&[f64]> {
        self.by_param
            .iter()
            .find(|(p, _)| *p == param)
            .map(|(_, g)| g.as_slice())
    }

    /// Adds these gradients into the `grad` tensors of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (idx, g) in &self.by_param {
            let p = store.by_index_mut(*idx);
            for (dst, src) in p.grad.data_mut().iter_mut().zip(g) {
                *dst = (*dst as f64 + src) as f32;
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_perturbation(perturb: Perturbation) -> Self {
        Self {
            perturb: Some(perturb),
            ..Self::default()
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_f64(vec![n.rows, n.cols], &n.value).expect("graph node shape is consistent")
    }

    /// Constant input, viewed as a matrix (see [`Tensor::matrix_dims`]).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.matrix_dims();
        self.push(r, c, t.to_f64(), Op::Leaf)
    }

    pub fn constant_raw(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() || rows == 0 || cols == 0 {
            return Err(dim_err(format!("constant {rows}x{cols} with {} values", value.len())));
        }
        Ok(self.push(rows, cols, value, Op::Leaf))
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.push(1, 1, vec![v], Op::Leaf)
    }

    /// Reads a parameter onto the tape. Repeated reads return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if let Some(&v) = self.bound.get(&idx) {
            return Ok(v);
        }
        let t = &store.by_index(idx).tensor;
        let (r, c) = t.matrix_dims();
        let mut value = t.to_f64();
        if let Some(p) = self.perturb {
            if p.param == idx {
                value[p.element] += p.delta;
            }
        }
        let v = self.push(r, c, value, Op::Param);
        self.bound.insert(idx, v);
        Ok(v)
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(dim_err(format!("{what}: {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(dim_err(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let v = matmul_raw(self.value(a), self.value(b), m, k, n);
        Ok(self.push(m, n, v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(dim_err(format!("matmul_bt {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bv[j * k..(j + 1) * k];
                out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        Ok(self.push(m, n, out, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(r, c, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "sub")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(r, c, v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(r, c, v, Op::Mul(a, b)))
    }

    /// Adds the `1 x c` row vector `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(dim_err(format!("add_row {r}x{c} with {:?}", self.dims(row))));
        }
        let rv = self.value(row);
        let v = self
            .value(a)
            .chunks(c)
            .flat_map(|ch| ch.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(r, c, v, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by the `1 x c` vector `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(dim_err(format!("mul_row {r}x{c} with {:?}", self.dims(row))));
        }
        let rv = self.value(row);
        let v = self
            .value(a)
            .chunks(c)
            .flat_map(|ch| ch.iter().zip(rv).map(|(x, y)| x * y))
            .collect();
        Ok(self.push(r, c, v, Op::MulRow(a, row)))
    }

    /// Multiplies `a` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            return Err(dim_err("scale_by expects a 1x1 scale"));
        }
        let (r, c) = self.dims(a);
        let k = self.scalar(s);
        let v = self.value(a).iter().map(|x| x * k).collect();
        Ok(self.push(r, c, v, Op::ScaleBy(a, s)))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|x| scale * x + shift).collect();
        self.push(r, c, v, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let av = self.value(a);
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = av[i * c + j];
            }
        }
        self.push(c, r, v, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let av = self.value(a);
        if av.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut v = Vec::with_capacity(r * c);
        for row in av.chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            v.extend(e.into_iter().map(|x| x / s));
        }
        Ok(self.push(r, c, v, Op::SoftmaxRows(a)))
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` without affine.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = self.dims(a);
        let av = self.value(a);
        let mut v = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        for row in av.chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            v.extend(row.iter().map(|x| (x - mean) * rs));
        }
        self.push(r, c, v, Op::NormalizeRows(a, rstd))
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.normalize_rows(a, eps);
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    /// Scales every row to unit L2 norm. Rows with norm below `1e-12` map to zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let av = self.value(a);
        let mut v = Vec::with_capacity(r * c);
        let mut norms = Vec::with_capacity(r);
        for row in av.chunks(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms.push(n);
            if n < 1e-12 {
                v.extend(std::iter::repeat_n(0.0, c));
            } else {
                v.extend(row.iter().map(|x| x / n));
            }
        }
        self.push(r, c, v, Op::L2NormalizeRows(a, norms))
    }

    /// Column means, `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let av = self.value(a);
        let mut v = vec![0.0; c];
        for row in av.chunks(c) {
            for (o, x) in v.iter_mut().zip(row) {
                *o += x;
            }
        }
        v.iter_mut().for_each(|x| *x /= r as f64);
        self.push(1, c, v, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(r, c, v, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        self.push(r, c, v, Op::Silu(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.value(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        let v = self.value(a).iter().map(|x| x.ln()).collect();
        Ok(self.push(r, c, v, Op::Log(a)))
    }

    /// Elementwise power; inputs must be non-negative unless `p` is an integer.
    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|x| x.powf(p)).collect();
        self.push(r, c, v, Op::Pow(a, p))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|x| x.clamp(lo, hi)).collect();
        self.push(r, c, v, Op::Clamp(a, lo, hi))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > r {
            return Err(dim_err(format!("slice rows {start}..{} of {r}", start + len)));
        }
        let v = self.value(a)[start * c..(start + len) * c].to_vec();
        Ok(self.push(len, c, v, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > c {
            return Err(dim_err(format!("slice cols {start}..{} of {c}", start + len)));
        }
        let av = self.value(a);
        let v = (0..r)
            .flat_map(|i| av[i * c + start..i * c + start + len].iter().copied())
            .collect();
        Ok(self.push(r, len, v, Op::SliceCols(a, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| dim_err("concat of nothing"))?;
        let c = self.dims(first).1;
        let mut rows = 0;
        let mut v = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(dim_err(format!("concat_rows width {pc} vs {c}")));
            }
            rows += pr;
            v.extend_from_slice(self.value(p));
        }
        Ok(self.push(rows, c, v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| dim_err("concat of nothing"))?;
        let r = self.dims(first).0;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(dim_err(format!("concat_cols height {pr} vs {r}")));
            }
            cols += pc;
        }
        let mut v = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let pc = self.dims(p).1;
                v.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(r, cols, v, Op::ConcatCols(parts.to_vec())))
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r != 1 || n == 0 {
            return Err(dim_err(format!("broadcast_rows of {r}x{c} to {n} rows")));
        }
        let v = self.value(a).repeat(n);
        Ok(self.push(n, c, v, Op::BroadcastRows(a)))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(dim_err(format!("{} targets for {r} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(dim_err(format!("target {t} out of {c} classes")));
        }
        let lv = self.value(logits);
        if lv.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("cross-entropy logits contain NaN".into()));
        }
        let mut probs = Vec::with_capacity(r * c);
        let mut loss = 0.0;
        for (row, &t) in lv.chunks(c).zip(targets) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        Ok(self.push(
            1,
            1,
            vec![loss / r as f64],
            Op::CrossEntropyRows(logits, targets.to_vec(), probs),
        ))
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.dims(root) != (1, 1) {
            return Err(dim_err("backward expects a scalar root"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let (r, c) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (_, k) = self.dims(*a);
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // dA = G Bᵀ
                    let ga = acc(&mut grads, *a, r * k);
                    for i in 0..r {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..c {
                                s += g[i * c + j] * bv[p * c + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                    // dB = Aᵀ G
                    let gb = acc(&mut grads, *b, k * c);
                    for i in 0..r {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..c {
                                gb[p * c + j] += aip * g[i * c + j];
                            }
                        }
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (_, k) = self.dims(*a);
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // out is r x c with c = rows of b
                    let ga = acc(&mut grads, *a, r * k);
                    for i in 0..r {
                        for j in 0..c {
                            let gij = g[i * c + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gij * bv[j * k + p];
                            }
                        }
                    }
                    let gb = acc(&mut grads, *b, c * k);
                    for i in 0..r {
                        for j in 0..c {
                            let gij = g[i * c + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                gb[j * k + p] += gij * av[i * k + p];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (x, y) in acc(&mut grads, *a, r * c).iter_mut().zip(&g) {
                        *x += y;
                    }
                    for (x, y) in acc(&mut grads, *b, r * c).iter_mut().zip(&g) {
                        *x += y;
                    }
                }
                Op::Sub(a, b) => {
                    for (x, y) in acc(&mut grads, *a, r * c).iter_mut().zip(&g) {
                        *x += y;
                    }
                    for (x, y) in acc(&mut grads, *b, r * c).iter_mut().zip(&g) {
                        *x -= y;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = acc(&mut grads, *a, r * c);
                    for i in 0..r * c {
                        ga[i] += g[i] * bv[i];
                    }
                    let gb = acc(&mut grads, *b, r * c);
                    for i in 0..r * c {
                        gb[i] += g[i] * av[i];
                    }
                }
                Op::AddRow(a, row) => {
                    for (x, y) in acc(&mut grads, *a, r * c).iter_mut().zip(&g) {
                        *x += y;
                    }
                    let gr = acc(&mut grads, *row, c);
                    for ch in g.chunks(c) {
                        for (x, y) in gr.iter_mut().zip(ch) {
                            *x += y;
                        }
                    }
                }
                Op::MulRow(a, row) => {
                    let (av, rv) = (self.value(*a), self.value(*row));
                    let ga = acc(&mut grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[i * c + j] * rv[j];
                        }
                    }
                    let gr = acc(&mut grads, *row, c);
                    for i in 0..r {
                        for j in 0..c {
                            gr[j] += g[i * c + j] * av[i * c + j];
                        }
                    }
                }
                Op::ScaleBy(a, s) => {
                    let k = self.scalar(*s);
                    let av = self.value(*a);
                    for (x, y) in acc(&mut grads, *a, r * c).iter_mut().zip(&g) {
                        *x += y * k;
                    }
                    let d: f64 = g.iter().zip(av).map(|(x, y)| x * y).sum();
                    acc(&mut grads, *s, 1)[0] += d;
                }
                Op::Affine(a, k) => {
                    for (x, y) in acc(&mut grads, *a, r * c).iter_mut().zip(&g) {
                        *x += y * k;
                    }
                }
                Op::Transpose(a) => {
                    // node is r x c, a is c x r
                    let ga = acc(&mut grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, r * c);
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            ga[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::NormalizeRows(a, rstd) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, r * c);
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                        for j in 0..c {
                            ga[i * c + j] += rstd[i] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
                Op::L2NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, r * c);
                    for i in 0..r {
                        if norms[i] < 1e-12 {
                            continue;
                        }
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            ga[i * c + j] += (gr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let (ar, _) = self.dims(*a);
                    let ga = acc(&mut grads, *a, ar * c);
                    for i in 0..ar {
                        for j in 0..c {
                            ga[i * c + j] += g[j] / ar as f64;
                        }
                    }
                }
                Op::SumAll(a) => {
                    let n = self.value(*a).len();
                    for x in acc(&mut grads, *a, n).iter_mut() {
                        *x += g[0];
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, r * c);
                    for i in 0..r * c {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    let ga = acc(&mut grads, *a, r * c);
                    for i in 0..r * c {
                        let s = sigmoid(av[i]);
                        ga[i] += g[i] * (s + av[i] * s * (1.0 - s));
                    }
                }
                Op::Log(a) => {
                    let av = self.value(*a);
                    let ga = acc(&mut grads, *a, r * c);
                    for i in 0..r * c {
                        ga[i] += g[i] / av[i];
                    }
                }
                Op::Pow(a, p) => {
                    let av = self.value(*a);
                    let ga = acc(&mut grads, *a, r * c);
                    if *p != 0.0 {
                        for i in 0..r * c {
                            let d = if *p == 1.0 { 1.0 } else { p * av[i].powf(p - 1.0) };
                            ga[i] += g[i] * d;
                        }
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let av = self.value(*a);
                    let ga = acc(&mut grads, *a, r * c);
                    for i in 0..r * c {
                        if av[i] > *lo && av[i] < *hi {
                            ga[i] += g[i];
                        }
                    }
                }
                Op::SliceRows(a, start) => {
                    let (ar, _) = self.dims(*a);
                    let ga = acc(&mut grads, *a, ar * c);
                    for (x, y) in ga[start * c..(start + r) * c].iter_mut().zip(&g) {
                        *x += y;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (ar, ac) = self.dims(*a);
                    let ga = acc(&mut grads, *a, ar * ac);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * ac + start + j] += g[i * c + j];
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        for (x, y) in acc(&mut grads, *p, n).iter_mut().zip(&g[off..off + n]) {
                            *x += y;
                        }
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let (pr, pc) = self.dims(*p);
                        let gp = acc(&mut grads, *p, pr * pc);
                        for i in 0..r {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * c + col + j];
                            }
                        }
                        col += pc;
                    }
                }
                Op::BroadcastRows(a) => {
                    let ga = acc(&mut grads, *a, c);
                    for ch in g.chunks(c) {
                        for (x, y) in ga.iter_mut().zip(ch) {
                            *x += y;
                        }
                    }
                }
                Op::CrossEntropyRows(logits, targets, probs) => {
                    let (lr, lc) = self.dims(*logits);
                    let scale = g[0] / lr as f64;
                    let gl = acc(&mut grads, *logits, lr * lc);
                    for i in 0..lr {
                        for j in 0..lc {
                            let onehot = if targets[i] == j { 1.0 } else { 0.0 };
                            gl[i * lc + j] += scale * (probs[i * lc + j] - onehot);
                        }
                    }
                }
            }
        }

        let mut by_param: Vec<(usize, Vec<f64>)> = self
            .bound
            .iter()
            .map(|(&p, &v)| {
                let n = self.value(v).len();
                let g = grads[v.0].take().unwrap_or_else(|| vec![0.0; n]);
                (p, g)
            })
            .collect();
        by_param.sort_by_key(|(p, _)| *p);
        Ok(Gradients { by_param })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(g: &mut Graph, r: usize, c: usize, v: &[f64]) -> Var {
        g.constant_raw(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = var(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = var(&mut g, 2, 1, &[1.0, 1.0]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut g = Graph::new();
        let a = var(&mut g, 2, 3, &[0.0; 6]);
        let b = var(&mut g, 2, 2, &[0.0; 4]);
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut g = Graph::new();
        let a = var(&mut g, 1, 2, &[1000.0, 0.0]);
        let s = g.softmax_rows(a).unwrap();
        assert!((g.value(s)[0] - 1.0).abs() < 1e-12);
        assert!(g.value(s)[1] >= 0.0 && g.value(s)[1] < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let a = var(&mut g, 1, 2, &[f64::NAN, 0.0]);
        assert!(matches!(g.softmax_rows(a), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_uniform_is_log_n() {
        let mut g = Graph::new();
        let a = var(&mut g, 2, 4, &[0.0; 8]);
        let l = g.cross_entropy_rows(a, &[0, 3]).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn param_reads_share_a_node() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let s = g.mul(a, b).unwrap();
        let l = g.sum_all(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(0).unwrap(), &[2.0, 4.0]);
    }
}
