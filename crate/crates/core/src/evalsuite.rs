//! Evaluation protocols: N-way top-K accuracy, SSIM, PSNR, temporal
//! consistency, end-point error and the subset retrieval protocol.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Rng, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_SUBSET: usize = 300;

fn check_nway(n_classes: usize, gt: usize, n: usize, k: usize) -> Result<()> {
    if n < 2 || n > n_classes {
        return Err(Error::Protocol(format!("{n}-way needs 2 <= N <= {n_classes}")));
    }
    if k == 0 || k >= n {
        return Err(Error::Protocol(format!("top-{k} needs 1 <= K < N = {n}")));
    }
    if gt >= n_classes {
        return Err(Error::Protocol(format!("ground-truth class {gt} out of {n_classes}")));
    }
    Ok(())
}

/// One trial: `N − 1` distinct distractors; success iff fewer than `K` of
/// them score at least as high as the ground truth.
fn nway_trial(scores: &[f32], gt: usize, n: usize, k: usize, rng: &mut Rng) -> bool {
    let others = rng.sample_distinct(scores.len() - 1, n - 1);
    let target = scores[gt];
    let ahead = others
        .into_iter()
        .map(|i| if i >= gt { i + 1 } else { i })
        .filter(|&i| scores[i] >= target)
        .count();
    ahead < k
}

/// Fraction of `trials` in which `gt` ranks within the top `k` of `n`
/// candidates.
pub fn nway_topk(scores: &Tensor, gt: usize, n: usize, k: usize, rng: &mut Rng, trials: usize) -> Result<f64> {
    check_nway(scores.len(), gt, n, k)?;
    if trials == 0 {
        return Err(Error::Protocol("need at least one trial".into()));
    }
    let hits = (0..trials).filter(|_| nway_trial(scores.data(), gt, n, k, rng)).count();
    Ok(hits as f64 / trials as f64)
}

/// [`nway_topk`] over many probes, each with its own score vector. Returns
/// the mean accuracy and its standard deviation across probes.
pub fn nway_topk_batch(
    probes: &[(&[f32], usize)],
    n: usize,
    k: usize,
    rng: &mut Rng,
    trials: usize,
) -> Result<(f64, f64)> {
    if probes.is_empty() {
        return Err(Error::EmptyInput("no probes".into()));
    }
    if trials == 0 {
        return Err(Error::Protocol("need at least one trial".into()));
    }
    let mut accs = Vec::with_capacity(probes.len());
    for &(scores, gt) in probes {
        check_nway(scores.len(), gt, n, k)?;
        let hits = (0..trials).filter(|_| nway_trial(scores, gt, n, k, rng)).count();
        accs.push(hits as f64 / trials as f64);
    }
    Ok(mean_std(&accs))
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn image_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(dim_err(format!("expected an H x W image, got {s:?}"))),
    }
}

/// Mean SSIM over every fully contained 11x11 Gaussian window, dynamic
/// range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!("ssim of {:?} and {:?}", a.shape(), b.shape())));
    }
    let (h, w) = image_dims(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(dim_err(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let (x, y) = (a.to_f64(), b.to_f64());
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - SSIM_WINDOW {
        for c in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let wt = win[i] * win[j];
                    let p = (r + i) * w + c + j;
                    mx += wt * x[p];
                    my += wt * y[p];
                    xx += wt * x[p] * x[p];
                    yy += wt * y[p] * y[p];
                    xy += wt * (x[p] * y[p]);
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            let num = (2.0 * (mx * my) + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `10·log₁₀(peak² / MSE)`, or `+∞` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!("psnr of {:?} and {:?}", a.shape(), b.shape())));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalConsistency {
    pub value: f64,
    /// consecutive pairs dropped because a frame had zero variance
    pub skipped_pairs: usize,
}

fn pearson(a: &[f32], b: &[f32]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean Pearson correlation between consecutive rows of `F x d` frame
/// embeddings.
pub fn temporal_consistency(frames: &Tensor) -> Result<TemporalConsistency> {
    let (f, _) = frames.matrix_dims();
    if f < 2 {
        return Err(Error::Protocol(format!(
            "temporal consistency needs >= 2 frames, got {f}"
        )));
    }
    let mut vals = Vec::with_capacity(f - 1);
    let mut skipped = 0;
    for i in 0..f - 1 {
        match pearson(frames.row(i), frames.row(i + 1)) {
            Some(v) => vals.push(v),
            None => skipped += 1,
        }
    }
    if vals.is_empty() {
        return Err(Error::Numeric("every frame pair has zero variance".into()));
    }
    Ok(TemporalConsistency {
        value: vals.iter().sum::<f64>() / vals.len() as f64,
        skipped_pairs: skipped,
    })
}

/// Mean Euclidean norm of the per-pixel flow difference. Accepts any shape
/// whose last axis is 2.
pub fn epe(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!("epe of {:?} and {:?}", a.shape(), b.shape())));
    }
    if a.shape().last() != Some(&2) {
        return Err(dim_err(format!("flow must end in a 2-axis, got {:?}", a.shape())));
    }
    let (x, y) = (a.data(), b.data());
    let n = x.len() / 2;
    let total: f64 = (0..n)
        .map(|p| {
            let dx = x[2 * p] as f64 - y[2 * p] as f64;
            let dy = x[2 * p + 1] as f64 - y[2 * p + 1] as f64;
            (dx * dx + dy * dy).sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

fn unit_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (m, _) = t.matrix_dims();
    (0..m)
        .map(|i| {
            let r: Vec<f64> = t.row(i).iter().map(|&v| v as f64).collect();
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < crate::numerics::ops::DEGENERATE_NORM {
                vec![0.0; r.len()]
            } else {
                r.into_iter().map(|v| v / n).collect()
            }
        })
        .collect()
}

/// Top-1 hits for each probe row against candidate rows: the true partner
/// must score strictly higher than every other candidate.
fn top1_hits(sims: &[Vec<f64>]) -> usize {
    sims.iter()
        .enumerate()
        .filter(|(i, row)| row.iter().enumerate().all(|(j, &s)| j == *i || s < row[*i]))
        .count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalAccuracy {
    pub forward: f64,
    pub backward: f64,
    pub forward_std: f64,
    pub backward_std: f64,
    pub subsets: usize,
}

/// Shuffles the `M` pairs, splits them into `⌊M / subset⌋` disjoint subsets
/// and scores top-1 cosine retrieval within each, in both directions.
pub fn retrieval_protocol(
    probes: &Tensor,
    targets: &Tensor,
    subset: usize,
    rng: &mut Rng,
) -> Result<RetrievalAccuracy> {
    let (m, d) = probes.matrix_dims();
    if targets.matrix_dims() != (m, d) {
        return Err(dim_err(format!(
            "probes {:?} vs targets {:?}",
            probes.shape(),
            targets.shape()
        )));
    }
    if subset == 0 || m < subset {
        return Err(Error::Protocol(format!("{m} pairs cannot fill a subset of {subset}")));
    }
    let (p, t) = (unit_rows(probes), unit_rows(targets));
    let mut order: Vec<usize> = (0..m).collect();
    rng.shuffle(&mut order);
    let (mut fwd, mut bwd) = (Vec::new(), Vec::new());
    for chunk in order.chunks_exact(subset) {
        let sims: Vec<Vec<f64>> = chunk
            .iter()
            .map(|&i| chunk.iter().map(|&j| dot(&p[i], &t[j])).collect())
            .collect();
        let transposed: Vec<Vec<f64>> = (0..subset).map(|j| (0..subset).map(|i| sims[i][j]).collect()).collect();
        fwd.push(top1_hits(&sims) as f64 / subset as f64);
        bwd.push(top1_hits(&transposed) as f64 / subset as f64);
    }
    let (forward, forward_std) = mean_std(&fwd);
    let (backward, backward_std) = mean_std(&bwd);
    Ok(RetrievalAccuracy {
        forward,
        backward,
        forward_std,
        backward_std,
        subsets: fwd.len(),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Frame `f` of a `[F, C, H, W]` clip in `[-1, 1]` as an `H x W` grayscale
/// image in `[0, 1]`.
pub fn frame_gray(clip: &Tensor, f: usize) -> Result<Tensor> {
    let [frames, c, h, w] = clip_dims(clip)?;
    if f >= frames {
        return Err(dim_err(format!("frame {f} of {frames}")));
    }
    let data = clip.data();
    let mut out = vec![0f32; h * w];
    for ch in 0..c {
        let base = (f * c + ch) * h * w;
        for (o, &v) in out.iter_mut().zip(&data[base..base + h * w]) {
            *o += (v + 1.0) / 2.0 / c as f32;
        }
    }
    Tensor::new(vec![h, w], out)
}

fn clip_dims(clip: &Tensor) -> Result<[usize; 4]> {
    match clip.shape() {
        &[f, c, h, w] => Ok([f, c, h, w]),
        s => Err(dim_err(format!("expected an F x C x H x W clip, got {s:?}"))),
    }
}

/// Flow between consecutive frames from the displacement of the
/// brightness-weighted centroid, broadcast to every pixel:
/// `[F − 1, H, W, 2]`.
pub fn centroid_flow(clip: &Tensor) -> Result<Tensor> {
    let [frames, _, h, w] = clip_dims(clip)?;
    if frames < 2 {
        return Err(Error::Protocol("flow needs at least two frames".into()));
    }
    let mut centroids = Vec::with_capacity(frames);
    for f in 0..frames {
        let g = frame_gray(clip, f)?;
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let v = g.data()[y * w + x] as f64;
                sx += v * x as f64;
                sy += v * y as f64;
                sw += v;
            }
        }
        centroids.push(if sw > 0.0 {
            (sx / sw, sy / sw)
        } else {
            ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
        });
    }
    let mut out = Vec::with_capacity((frames - 1) * h * w * 2);
    for f in 0..frames - 1 {
        let (dx, dy) = (centroids[f + 1].0 - centroids[f].0, centroids[f + 1].1 - centroids[f].1);
        for _ in 0..h * w {
            out.push(dx as f32);
            out.push(dy as f32);
        }
    }
    Tensor::new(vec![frames - 1, h, w, 2], out)
}

/// One metric with its spread and the settings that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub std: f64,
    pub n_trials: usize,
    pub config: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, value: f64, std: f64, n_trials: usize) -> Self {
        Self {
            name: name.into(),
            value,
            std,
            n_trials,
            config: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.config.insert(key.into(), value.to_string());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::Protocol(format!("metric {} has no trials", self.name)));
        }
        if !(self.std >= 0.0) {
            return Err(Error::Protocol(format!("metric {} has std {}", self.name, self.std)));
        }
        let bad = |s: &str| s.is_empty() || s.contains(|c: char| c.is_whitespace() || c == '=');
        if bad(&self.name)
            || self
                .config
                .iter()
                .any(|(k, v)| bad(k) || v.contains(char::is_whitespace))
        {
            return Err(Error::Protocol(format!(
                "metric {} has an unserialisable field",
                self.name
            )));
        }
        Ok(())
    }
}

/// `name=<s> value=<f> std=<f> n_trials=<u> [config.<k>=<v> ...]` with
/// config keys in sorted order. Floats use the shortest round-trip form.
impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "name={} value={} std={} n_trials={}",
            self.name, self.value, self.std, self.n_trials
        )?;
        for (k, v) in &self.config {
            write!(f, " config.{k}={v}")?;
        }
        Ok(())
    }
}

impl FromStr for MetricReport {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |m: &str| Error::Protocol(format!("bad metric line {line:?}: {m}"));
        let mut fields = line.split(' ');
        let mut take = |key: &str| -> Result<String> {
            let f = fields.next().ok_or_else(|| bad("missing field"))?;
            f.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| bad(key))
        };
        let name = take("name")?;
        let value = take("value")?.parse().map_err(|_| bad("value"))?;
        let std = take("std")?.parse().map_err(|_| bad("std"))?;
        let n_trials = take("n_trials")?.parse().map_err(|_| bad("n_trials"))?;
        let mut config = BTreeMap::new();
        for f in fields {
            let (k, v) = f
                .strip_prefix("config.")
                .and_then(|r| r.split_once('='))
                .ok_or_else(|| bad("config entry"))?;
            config.insert(k.to_string(), v.to_string());
        }
        let r = Self {
            name,
            value,
            std,
            n_trials,
            config,
        };
        r.validate()?;
        Ok(r)
    }
}

pub fn write_reports(reports: &[MetricReport]) -> Result<String> {
    let mut out = String::new();
    for r in reports {
        r.validate()?;
        out.push_str(&r.to_string());
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_reports(text: &str) -> Result<Vec<MetricReport>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(str::parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn random_image(rng: &mut Rng, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![h, w], (0..h * w).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    #[test]
    fn nway_examples() {
        let mut rng = Rng::new(0);
        let mut s = vec![0.0f32; 60];
        s[7] = 1.0;
        let scores = Tensor::vector(s);
        for (n, k) in [(2, 1), (10, 1), (50, 5), (60, 59)] {
            assert_eq!(nway_topk(&scores, 7, n, k, &mut rng, 200).unwrap(), 1.0);
        }
        assert!(matches!(
            nway_topk(&scores, 7, 61, 1, &mut rng, 10),
            Err(Error::Protocol(_))
        ));
        assert!(nway_topk(&scores, 7, 5, 5, &mut rng, 10).is_err());
        assert!(nway_topk(&scores, 60, 5, 1, &mut rng, 10).is_err());
    }

    #[test]
    fn nway_chance_levels() {
        let mut rng = Rng::new(1);
        for (n, k, tol) in [(2usize, 1usize, 0.02), (50, 1, 0.005), (10, 3, 0.015)] {
            let rows: Vec<Vec<f32>> = (0..10_000)
                .map(|_| (0..100).map(|_| rng.uniform() as f32).collect())
                .collect();
            let probes: Vec<(&[f32], usize)> = rows.iter().map(|r| (r.as_slice(), rng.below(100))).collect();
            let (acc, _) = nway_topk_batch(&probes, n, k, &mut rng, 1).unwrap();
            assert!((acc - k as f64 / n as f64).abs() < tol, "{n}-way top-{k}: {acc}");
        }
    }

    #[test]
    fn ssim_examples() {
        let mut rng = Rng::new(2);
        for _ in 0..100 {
            let a = random_image(&mut rng, 16, 16);
            let b = random_image(&mut rng, 16, 16);
            assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            let s = ssim(&a, &b).unwrap();
            assert!(s.abs() <= 1.0);
            assert_eq!(s, ssim(&b, &a).unwrap());
        }
        let zero = Tensor::zeros(&[12, 12]);
        let one = Tensor::filled(&[12, 12], 1.0);
        let want = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&zero, &one).unwrap() - want).abs() < 1e-7);
        assert!((want - 9.999e-5).abs() < 1e-8);
        assert!(matches!(
            ssim(&zero, &Tensor::zeros(&[12, 13])),
            Err(Error::Dimension(_))
        ));
        assert!(ssim(&Tensor::zeros(&[10, 10]), &Tensor::zeros(&[10, 10])).is_err());
    }

    /// Direct per-window evaluation with the window built independently.
    #[test]
    fn ssim_matches_single_window_oracle() {
        let mut rng = Rng::new(3);
        let a = random_image(&mut rng, 11, 11);
        let b = random_image(&mut rng, 11, 11);
        let w: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
        let norm: f64 = w.iter().sum::<f64>().powi(2);
        let (mut mx, mut my) = (0.0, 0.0);
        for i in 0..11 {
            for j in 0..11 {
                let wt = w[i] * w[j] / norm;
                mx += wt * a.data()[i * 11 + j] as f64;
                my += wt * b.data()[i * 11 + j] as f64;
            }
        }
        let (mut vx, mut vy, mut c) = (0.0, 0.0, 0.0);
        for i in 0..11 {
            for j in 0..11 {
                let wt = w[i] * w[j] / norm;
                let (x, y) = (a.data()[i * 11 + j] as f64 - mx, b.data()[i * 11 + j] as f64 - my);
                vx += wt * x * x;
                vy += wt * y * y;
                c += wt * x * y;
            }
        }
        let want = (2.0 * mx * my + 1e-4) * (2.0 * c + 9e-4) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::filled(&[4, 4], 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = Tensor::filled(&[4, 4], 0.6);
        // the f32 difference is not exactly 0.1, so build the MSE from it
        let mse = ((0.6f32 as f64) - (0.5f32 as f64)).powi(2);
        let got = psnr(&a, &b, 1.0).unwrap();
        assert!((got - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
        let c = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.2, 0.0]).unwrap();
        let z = Tensor::zeros(&[2, 2]);
        // mse = 0.04 / 4 = 0.01 up to f32 rounding of 0.2
        assert!((psnr(&c, &z, 1.0).unwrap() - 20.0).abs() < 1e-6);
        assert_eq!(psnr(&c, &z, 1.0).unwrap(), psnr(&z, &c, 1.0).unwrap());
        assert!(psnr(&c, &a, 1.0).is_err());

        let mut rng = Rng::new(4);
        let base = random_image(&mut rng, 16, 16);
        let noise = Tensor::new(vec![16, 16], rng.normal_vec(256, 1.0)).unwrap();
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.03, 0.1, 0.3, 1.0] {
            let noisy = Tensor::new(
                vec![16, 16],
                base.data().iter().zip(noise.data()).map(|(b, n)| b + amp * n).collect(),
            )
            .unwrap();
            let p = psnr(&base, &noisy, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn temporal_consistency_examples() {
        let v = vec![0.3f32, -1.0, 2.0, 0.5];
        let same = Tensor::stack_rows(&[&v, &v, &v]).unwrap();
        assert!((temporal_consistency(&same).unwrap().value - 1.0).abs() < 1e-12);
        let mean = v.iter().sum::<f32>() / 4.0;
        let neg: Vec<f32> = v.iter().map(|x| -(x - mean)).collect();
        let alt = Tensor::stack_rows(&[&v, &neg, &v, &neg]).unwrap();
        assert!((temporal_consistency(&alt).unwrap().value + 1.0).abs() < 1e-6);

        let flat = vec![1.0f32; 4];
        let r = temporal_consistency(&Tensor::stack_rows(&[&v, &flat, &v, &v]).unwrap()).unwrap();
        assert_eq!(r.skipped_pairs, 2);
        assert!((r.value - 1.0).abs() < 1e-12);
        assert!(matches!(
            temporal_consistency(&Tensor::stack_rows(&[&v]).unwrap()),
            Err(Error::Protocol(_))
        ));

        let mut rng = Rng::new(5);
        let vals: Vec<f64> = (0..100)
            .map(|_| {
                temporal_consistency(&Tensor::matrix(8, 256, rng.normal_vec(8 * 256, 1.0)).unwrap())
                    .unwrap()
                    .value
            })
            .collect();
        let m = vals.iter().sum::<f64>() / 100.0;
        assert!(m.abs() < 0.1);
    }

    #[test]
    fn epe_examples() {
        let mut rng = Rng::new(6);
        let a = Tensor::new(vec![5, 4, 2], rng.normal_vec(40, 1.0)).unwrap();
        assert_eq!(epe(&a, &a).unwrap(), 0.0);
        let shifted = Tensor::new(
            vec![5, 4, 2],
            a.data()
                .iter()
                .enumerate()
                .map(|(i, v)| if i % 2 == 0 { v + 1.0 } else { *v })
                .collect(),
        )
        .unwrap();
        assert!((epe(&a, &shifted).unwrap() - 1.0).abs() < 1e-6);
        let b = Tensor::new(vec![5, 4, 2], rng.normal_vec(40, 1.0)).unwrap();
        let mut total = 0.0;
        for y in 0..5 {
            for x in 0..4 {
                let i = (y * 4 + x) * 2;
                let dx = (a.data()[i] - b.data()[i]) as f64;
                let dy = (a.data()[i + 1] - b.data()[i + 1]) as f64;
                total += (dx * dx + dy * dy).sqrt();
            }
        }
        assert!((epe(&a, &b).unwrap() - total / 20.0).abs() < 1e-6);
        assert!(epe(&a, &Tensor::zeros(&[4, 5, 2])).is_err());
    }

    #[test]
    fn retrieval_examples() {
        let mut rng = Rng::new(7);
        let e = Tensor::matrix(600, 16, rng.normal_vec(600 * 16, 1.0)).unwrap();
        let r = retrieval_protocol(&e, &e, 300, &mut rng).unwrap();
        assert_eq!((r.forward, r.backward, r.subsets), (1.0, 1.0, 2));
        assert!(matches!(
            retrieval_protocol(&e, &e, 601, &mut rng),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn retrieval_matches_similarity_matrix_oracle() {
        let mut rng = Rng::new(8);
        let (m, d, latent) = (40, 12, 4);
        let mix = rng.normal_vec(d * latent, 1.0);
        let mut probes = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..m {
            let z = rng.normal_vec(latent, 1.0);
            for out in [&mut probes, &mut targets] {
                for r in 0..d {
                    let s: f32 = (0..latent).map(|c| mix[r * latent + c] * z[c]).sum();
                    out.push(s + 1.5 * rng.normal() as f32);
                }
            }
        }
        let p = Tensor::matrix(m, d, probes).unwrap();
        let t = Tensor::matrix(m, d, targets).unwrap();
        let got = retrieval_protocol(&p, &t, 10, &mut Rng::new(9)).unwrap();

        // replay the same shuffle and score with a full argmax
        let mut order: Vec<usize> = (0..m).collect();
        Rng::new(9).shuffle(&mut order);
        let cos = |a: &[f32], b: &[f32]| crate::numerics::ops::cosine_slices(a, b).unwrap().0;
        let mut fwd = 0.0;
        let mut bwd = 0.0;
        for chunk in order.chunks(10) {
            for &i in chunk {
                let best_t = chunk
                    .iter()
                    .copied()
                    .max_by(|&a, &b| cos(p.row(i), t.row(a)).total_cmp(&cos(p.row(i), t.row(b))))
                    .unwrap();
                let best_p = chunk
                    .iter()
                    .copied()
                    .max_by(|&a, &b| cos(t.row(i), p.row(a)).total_cmp(&cos(t.row(i), p.row(b))))
                    .unwrap();
                fwd += (best_t == i) as u8 as f64;
                bwd += (best_p == i) as u8 as f64;
            }
        }
        assert!((got.forward - fwd / m as f64).abs() < 1e-12);
        assert!((got.backward - bwd / m as f64).abs() < 1e-12);
        assert!(got.forward > 0.1 && got.forward < 1.0, "{got:?}");
    }

    #[test]
    fn centroid_flow_tracks_a_moving_square() {
        let (f, h, w) = (4, 12, 12);
        let mut data = vec![-1.0f32; f * h * w];
        for fr in 0..f {
            for y in 4..7 {
                for x in (2 + fr)..(5 + fr) {
                    data[(fr * h + y) * w + x] = 1.0;
                }
            }
        }
        let clip = Tensor::new(vec![f, 1, h, w], data).unwrap();
        let flow = centroid_flow(&clip).unwrap();
        assert_eq!(flow.shape(), &[3, 12, 12, 2]);
        let truth = Tensor::new(vec![3, 12, 12, 2], (0..3 * 144).flat_map(|_| [1.0f32, 0.0]).collect()).unwrap();
        assert!(epe(&flow, &truth).unwrap() < 1e-5);
    }

    #[test]
    fn report_round_trip() {
        let r = MetricReport::new("ssim", 0.123456789, 0.01, 300)
            .with("seed", 4)
            .with("checkpoint", "a.ckpt");
        let line = r.to_string();
        assert_eq!(
            line,
            "name=ssim value=0.123456789 std=0.01 n_trials=300 config.checkpoint=a.ckpt config.seed=4"
        );
        assert_eq!(line.parse::<MetricReport>().unwrap(), r);
        let inf = MetricReport::new("psnr", f64::INFINITY, 0.0, 1);
        assert_eq!(inf.to_string().parse::<MetricReport>().unwrap(), inf);
        assert!("name=x value=1 std=-1 n_trials=1".parse::<MetricReport>().is_err());
        assert!("name=x value=1 std=0 n_trials=0".parse::<MetricReport>().is_err());
        assert!("value=1 name=x std=0 n_trials=1".parse::<MetricReport>().is_err());
    }

    proptest! {
        #[test]
        fn report_text_round_trips(v in proptest::num::f64::NORMAL, s in 0.0f64..1e6, n in 1usize..1_000_000) {
            let r = MetricReport::new("m", v, s, n).with("k", n);
            let back: MetricReport = r.to_string().parse().unwrap();
            prop_assert_eq!(back.value.to_bits(), v.to_bits());
            prop_assert_eq!(back, r);
        }

        #[test]
        fn perfect_scores_always_win(seed in 0u64..1000, n in 2usize..30) {
            let mut rng = Rng::new(seed);
            let mut s: Vec<f32> = (0..30).map(|_| rng.uniform() as f32).collect();
            let gt = rng.below(30);
            s[gt] = 2.0;
            let acc = nway_topk(&Tensor::vector(s), gt, n, 1, &mut rng, 20).unwrap();
            prop_assert_eq!(acc, 1.0);
        }
    }
}
