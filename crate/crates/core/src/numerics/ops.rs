//! Value-level tensor operations. Each one evaluates in `f64` and rounds the
//! result to `f32` storage.

use super::{AttentionSpec, Graph, ParamStore, Tensor};
use crate::error::{dim_err, Error, Result};

/// Norm below which a vector counts as zero for cosine similarity.
pub const DEGENERATE_NORM: f64 = 1e-12;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(dim_err(format!("matmul of {:?} and {:?}", a.shape(), b.shape())));
    }
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let c = g.matmul(va, vb)?;
    Ok(g.to_tensor(c))
}

/// Softmax along `axis` with max-subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(dim_err(format!("axis {axis} for shape {shape:?}")));
    }
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0f32; src.len()];
    let mut buf = vec![0f64; n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let m = (0..n).map(|k| src[at(k)] as f64).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = (src[at(k)] as f64 - m).exp();
                s += *b;
            }
            for (k, b) in buf.iter().enumerate() {
                out[at(k)] = (b / s) as f32;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Cosine similarity of two slices. Returns `(value, degenerate)`; when both
/// norms fall below [`DEGENERATE_NORM`] the value is 0 and `degenerate` is set.
pub fn cosine_slices(a: &[f32], b: &[f32]) -> Result<(f64, bool)> {
    if a.len() != b.len() {
        return Err(dim_err(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < DEGENERATE_NORM && nb < DEGENERATE_NORM {
        return Ok((0.0, true));
    }
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Ok((0.0, false));
    }
    Ok(((dot / (na * nb)).clamp(-1.0, 1.0), false))
}

pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(cosine_slices(a.data(), b.data())?.0)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, d) = x.matrix_dims();
    if gain.len() != d || bias.len() != d {
        return Err(dim_err(format!(
            "layer_norm over width {d} with gain {} and bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let mut g = Graph::new();
    let vx = g.constant(x);
    let vg = g.constant(gain);
    let vb = g.constant(bias);
    let y = g.layer_norm(vx, vg, vb, eps)?;
    Tensor::from_f64(x.shape().to_vec(), g.value(y))
}

pub fn cross_attention(
    q_tokens: &Tensor,
    kv_tokens: &Tensor,
    spec: &AttentionSpec,
    params: &ParamStore,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let q = g.constant(q_tokens);
    let kv = g.constant(kv_tokens);
    let out = spec.forward(&mut g, params, q, kv)?;
    Ok(g.to_tensor(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn m(r: usize, c: usize, v: &[f32]) -> Tensor {
        Tensor::matrix(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let b = m(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&Tensor::identity(3), &b).unwrap(), b);
        let c = matmul(&m(2, 2, &[1.0, 2.0, 3.0, 4.0]), &m(2, 1, &[1.0, 1.0])).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
        let z = matmul(&Tensor::zeros(&[2, 3]), &b).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(matches!(matmul(&b, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0; 3]), 0).unwrap();
        for v in s.data() {
            assert!((*v as f64 - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax(&Tensor::vector(vec![2f32.ln(), 0.0, 0.0]), 0).unwrap();
        let want = [0.5, 0.25, 0.25];
        for (v, w) in s.data().iter().zip(want) {
            assert!((*v as f64 - w).abs() < 1e-7);
        }
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]), 0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-7 && s.data()[1] < 1e-7);
        assert!(matches!(
            softmax(&Tensor::vector(vec![f32::NAN]), 0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = m(2, 2, &[0.0, 2f32.ln(), 0.0, 0.0]);
        let s = softmax(&x, 0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-7);
        assert!((s.data()[1] as f64 - 2.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn cosine_examples() {
        let v = Tensor::vector(vec![0.3, -2.0, 1.1]);
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let (x, y) = (Tensor::vector(vec![1.0, 0.0]), Tensor::vector(vec![0.0, 1.0]));
        assert_eq!(cosine_sim(&x, &y).unwrap(), 0.0);
        let d = cosine_sim(&Tensor::vector(vec![1.0, 1.0]), &x).unwrap();
        assert!((d - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        let zero = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(cosine_slices(zero.data(), zero.data()).unwrap(), (0.0, true));
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::filled(&[1, 3], 1.0);
        let zero = Tensor::zeros(&[1, 3]);
        let y = layer_norm(&Tensor::filled(&[1, 3], 4.0), &one, &zero, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let (one2, zero2) = (Tensor::filled(&[1, 2], 1.0), Tensor::zeros(&[1, 2]));
        let y = layer_norm(&m(1, 2, &[1.0, -1.0]), &one2, &zero2, 1e-5).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);
        let bias = m(1, 3, &[0.5, -1.0, 2.0]);
        let y = layer_norm(
            &m(2, 3, &[1.0, 5.0, -2.0, 0.0, 3.0, 9.0]),
            &Tensor::zeros(&[1, 3]),
            &bias,
            1e-5,
        )
        .unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    fn identity_attention(d: usize) -> (AttentionSpec, ParamStore) {
        let spec = AttentionSpec::new("attn", d, d, d);
        let mut store = ParamStore::new();
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("attn.{w}"), Tensor::identity(d)).unwrap();
        }
        (spec, store)
    }

    #[test]
    fn cross_attention_single_key_broadcasts_value() {
        let (spec, store) = identity_attention(2);
        let q = m(3, 2, &[1.0, 0.0, -4.0, 2.0, 0.5, 0.5]);
        let kv = m(1, 2, &[0.25, -0.75]);
        let out = cross_attention(&q, &kv, &spec, &store).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &[0.25, -0.75]);
        }
    }

    #[test]
    fn cross_attention_duplicate_rows_do_not_matter() {
        let mut rng = Rng::new(5);
        let spec = AttentionSpec::new("attn", 4, 3, 4);
        let mut store = ParamStore::new();
        spec.init(&mut store, &mut rng).unwrap();
        let q = m(2, 4, &rng.normal_vec(8, 1.0));
        let row = rng.normal_vec(3, 1.0);
        let single = Tensor::stack_rows(&[&row]).unwrap();
        let dup = Tensor::stack_rows(&[&row, &row, &row]).unwrap();
        let a = cross_attention(&q, &single, &spec, &store).unwrap();
        let b = cross_attention(&q, &dup, &spec, &store).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn cross_attention_hand_example() {
        // W = I, d = 2: Q = K = V = inputs, weights = softmax(q·k / sqrt 2)
        let (spec, store) = identity_attention(2);
        let q = m(1, 2, &[1.0, 0.0]);
        let kv = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let out = cross_attention(&q, &kv, &spec, &store).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let w0 = s.exp() / (s.exp() + 1.0);
        assert!((out.data()[0] as f64 - w0).abs() < 1e-7);
        assert!((out.data()[1] as f64 - (1.0 - w0)).abs() < 1e-7);
    }

    #[test]
    fn cross_attention_shape_mismatch() {
        let (spec, store) = identity_attention(2);
        let err = cross_attention(&m(1, 3, &[0.0; 3]), &m(1, 2, &[0.0; 2]), &spec, &store);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn softmax_on_simplex(v in proptest::collection::vec(-50f32..50f32, 1..40)) {
            let s = softmax(&Tensor::vector(v), 0).unwrap();
            let sum: f64 = s.data().iter().map(|&x| x as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(s.data().iter().all(|&x| x > 0.0));
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in proptest::collection::vec(-5f32..5f32, 6),
            b in proptest::collection::vec(-5f32..5f32, 6),
            c in 0.01f32..100f32,
        ) {
            let (ta, tb) = (Tensor::vector(a.clone()), Tensor::vector(b));
            let scaled = Tensor::vector(a.iter().map(|x| x * c).collect());
            let ab = cosine_sim(&ta, &tb).unwrap();
            prop_assert!((ab - cosine_sim(&tb, &ta).unwrap()).abs() < 1e-6);
            prop_assert!((ab - cosine_sim(&scaled, &tb).unwrap()).abs() < 1e-6);
        }

        #[test]
        fn cross_attention_permutation_invariant(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let spec = AttentionSpec::new("attn", 4, 5, 6).with_heads(2);
            let mut store = ParamStore::new();
            spec.init(&mut store, &mut rng).unwrap();
            let q = m(3, 4, &rng.normal_vec(12, 1.0));
            let rows: Vec<Vec<f32>> = (0..4).map(|_| rng.normal_vec(5, 1.0)).collect();
            let mut perm: Vec<usize> = (0..4).collect();
            rng.shuffle(&mut perm);
            let kv = Tensor::stack_rows(&rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>()).unwrap();
            let kvp = Tensor::stack_rows(&perm.iter().map(|&i| rows[i].as_slice()).collect::<Vec<_>>()).unwrap();
            let a = cross_attention(&q, &kv, &spec, &store).unwrap();
            let b = cross_attention(&q, &kvp, &spec, &store).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-6);
        }
    }
}
