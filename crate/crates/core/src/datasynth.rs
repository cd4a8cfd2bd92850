//! Seeded linear-Gaussian generator standing in for recorded signals and
//! frozen encoders.
//!
//! One latent draw `z ~ N(0, I)` per sample drives everything: the signal
//! `A z + σ_s η`, the text/image/action embeddings `normalize(M z + σ_e η)`,
//! thresholded category labels, and a clip of a Gaussian blob whose start
//! position and velocity are functions of `z` (so its optical flow is known
//! exactly).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// The fifteen superclass names, in label-index order.
pub const SUPERCLASSES: [&str; 15] = [
    "accessory",
    "animal",
    "appliance",
    "electronic",
    "food",
    "furniture",
    "indoor",
    "kitchen",
    "man",
    "others",
    "outdoor",
    "crowd",
    "sports",
    "vehicle",
    "woman",
];

const DEFAULT_KEYWORDS: &str = include_str!("../data/superclasses.txt");

const BLOB_SIGMA: f64 = 2.0;
const MAX_SPEED: f64 = 1.0;
const POSITION_READOUT_SCALE: f64 = 0.3;
/// Label thresholds sit at this many standard deviations of each functional,
/// giving roughly 20% positives per class.
const LABEL_THRESHOLD_SD: f64 = 0.84;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub n_voxels: usize,
    pub d_clip: usize,
    pub d_act: usize,
    pub n_classes: usize,
    pub signal_noise_sigma: f64,
    pub embed_noise_sigma: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Text and image embeddings carry no latent signal (pure noise); only the
    /// action embedding is linked to the sample.
    pub action_only: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            n_voxels: 256,
            d_clip: 64,
            d_act: 48,
            n_classes: 15,
            signal_noise_sigma: 0.1,
            embed_noise_sigma: 0.05,
            n_train: 512,
            n_test: 300,
            frames: 8,
            channels: 3,
            height: 16,
            width: 16,
            action_only: false,
            seed: 0,
        }
    }
}

crate::impl_settings!(GeneratorConfig {
    latent_dim,
    n_voxels,
    d_clip,
    d_act,
    n_classes,
    signal_noise_sigma,
    embed_noise_sigma,
    n_train,
    n_test,
    frames,
    channels,
    height,
    width,
    action_only,
    seed,
});

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("latent_dim", self.latent_dim),
            ("n_voxels", self.n_voxels),
            ("d_clip", self.d_clip),
            ("d_act", self.d_act),
            ("n_classes", self.n_classes),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("n_train", self.n_train),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("generator {name} must be positive")));
        }
        if self.frames < 2 {
            return Err(Error::Config("generator frames must be at least 2".into()));
        }
        if !(self.signal_noise_sigma >= 0.0 && self.embed_noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigmas must be non-negative".into()));
        }
        if self.n_voxels < self.latent_dim {
            return Err(Error::Config(
                "n_voxels must be at least latent_dim for the signal to determine the latent".into(),
            ));
        }
        Ok(())
    }

    pub fn clip_shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }
}

/// One synthetic stimulus with every view derived from the same latent.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalSample {
    pub id: u64,
    /// `[n_voxels]`
    pub signal: Tensor,
    /// `[d_clip]`, unit norm
    pub e_txt: Tensor,
    /// `[frames, d_clip]`, one unit-norm embedding per frame
    pub e_img: Tensor,
    /// `[d_act]`, unit norm
    pub e_act: Tensor,
    /// `[n_classes]` multi-hot with at least one positive
    pub labels: Tensor,
    /// `[frames, channels, height, width]` in `[-1, 1]`
    pub clip: Tensor,
    /// `[frames - 1, height, width, 2]`; `(dx, dy)` per pixel for each frame pair
    pub flow_gt: Tensor,
    /// `[latent_dim]`; only oracles may read this
    pub latent: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub train: Vec<SignalSample>,
    pub test: Vec<SignalSample>,
}

/// The fixed mixing matrices drawn once from the seed.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    /// `n_voxels x latent`
    signal_mix: Vec<f64>,
    /// `d_clip x latent`
    txt_mix: Vec<f64>,
    img_mix: Vec<f64>,
    /// `d_clip x 2`
    position_readout: Vec<f64>,
    /// `d_act x latent`
    act_mix: Vec<f64>,
    /// `n_classes x latent`
    label_functionals: Vec<f64>,
    /// `2 x latent` each
    start_mix: Vec<f64>,
    velocity_mix: Vec<f64>,
    /// `channels x latent`
    gain_mix: Vec<f64>,
}

fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.normal() * scale).collect()
}

fn matvec(m: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn normalized(v: Vec<f64>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| (x / n) as f32).collect()
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed).fork(0);
        let l = cfg.latent_dim;
        let s = 1.0 / (l as f64).sqrt();
        Ok(Self {
            signal_mix: gaussian_matrix(&mut rng, cfg.n_voxels, l, s),
            txt_mix: gaussian_matrix(&mut rng, cfg.d_clip, l, s),
            img_mix: gaussian_matrix(&mut rng, cfg.d_clip, l, s),
            position_readout: gaussian_matrix(&mut rng, cfg.d_clip, 2, POSITION_READOUT_SCALE),
            act_mix: gaussian_matrix(&mut rng, cfg.d_act, l, s),
            label_functionals: gaussian_matrix(&mut rng, cfg.n_classes, l, s),
            start_mix: gaussian_matrix(&mut rng, 2, l, s),
            velocity_mix: gaussian_matrix(&mut rng, 2, l, s),
            gain_mix: gaussian_matrix(&mut rng, cfg.channels, l, s),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Blob centre `(x, y)` in pixels for every frame, and the per-frame velocity.
    fn trajectory(&self, z: &[f64]) -> (Vec<[f64; 2]>, [f64; 2]) {
        let c = &self.cfg;
        let start = matvec(&self.start_mix, 2, z);
        let vel = matvec(&self.velocity_mix, 2, z);
        let centre = [(c.width as f64 - 1.0) / 2.0, (c.height as f64 - 1.0) / 2.0];
        let reach = [c.width as f64 * 0.2, c.height as f64 * 0.2];
        let v = [MAX_SPEED * vel[0].tanh(), MAX_SPEED * vel[1].tanh()];
        let p0 = [
            centre[0] + reach[0] * start[0].tanh() - v[0] * (c.frames as f64 - 1.0) / 2.0,
            centre[1] + reach[1] * start[1].tanh() - v[1] * (c.frames as f64 - 1.0) / 2.0,
        ];
        let traj = (0..c.frames)
            .map(|f| [p0[0] + v[0] * f as f64, p0[1] + v[1] * f as f64])
            .collect();
        (traj, v)
    }

    fn render_clip(&self, z: &[f64], traj: &[[f64; 2]]) -> Vec<f32> {
        let c = &self.cfg;
        let gains: Vec<f64> = matvec(&self.gain_mix, c.channels, z)
            .into_iter()
            .map(|g| 0.6 + 0.4 / (1.0 + (-g).exp()))
            .collect();
        let mut out = Vec::with_capacity(c.frames * c.channels * c.height * c.width);
        for p in traj {
            for &gain in &gains {
                for y in 0..c.height {
                    for x in 0..c.width {
                        let d2 = (x as f64 - p[0]).powi(2) + (y as f64 - p[1]).powi(2);
                        let blob = (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
                        out.push((-1.0 + 2.0 * gain * blob) as f32);
                    }
                }
            }
        }
        out
    }

    fn labels(&self, z: &[f64]) -> Vec<f32> {
        let n = self.cfg.n_classes;
        let l = z.len();
        let mut best = (f64::NEG_INFINITY, 0);
        let mut labels: Vec<f32> = (0..n)
            .map(|k| {
                let u = &self.label_functionals[k * l..(k + 1) * l];
                let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                let score = u.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / norm;
                if score > best.0 {
                    best = (score, k);
                }
                if score > LABEL_THRESHOLD_SD {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        if labels.iter().all(|&v| v == 0.0) {
            labels[best.1] = 1.0;
        }
        labels
    }

    pub fn sample(&self, id: u64, rng: &mut Rng) -> Result<SignalSample> {
        let c = &self.cfg;
        let z = rng.normal_vec_f64(c.latent_dim);
        let noisy = |rng: &mut Rng, clean: Vec<f64>, sigma: f64| -> Vec<f64> {
            clean.into_iter().map(|v| v + sigma * rng.normal()).collect()
        };

        let signal = noisy(rng, matvec(&self.signal_mix, c.n_voxels, &z), c.signal_noise_sigma);
        let (traj, vel) = self.trajectory(&z);

        let e_txt = if c.action_only {
            normalized(rng.normal_vec_f64(c.d_clip))
        } else {
            normalized(noisy(rng, matvec(&self.txt_mix, c.d_clip, &z), c.embed_noise_sigma))
        };
        let semantic = matvec(&self.img_mix, c.d_clip, &z);
        let extent = [c.width as f64, c.height as f64];
        let mut e_img = Vec::with_capacity(c.frames * c.d_clip);
        for p in &traj {
            let frame = if c.action_only {
                rng.normal_vec_f64(c.d_clip)
            } else {
                // position mapped to roughly [-1, 1] before the linear readout
                let pos = [2.0 * p[0] / extent[0] - 1.0, 2.0 * p[1] / extent[1] - 1.0];
                let clean: Vec<f64> = semantic
                    .iter()
                    .enumerate()
                    .map(|(i, s)| s + self.position_readout[2 * i] * pos[0] + self.position_readout[2 * i + 1] * pos[1])
                    .collect();
                noisy(rng, clean, c.embed_noise_sigma)
            };
            e_img.extend(normalized(frame));
        }
        let e_act = normalized(noisy(rng, matvec(&self.act_mix, c.d_act, &z), c.embed_noise_sigma));

        let pairs = c.frames - 1;
        let mut flow = Vec::with_capacity(pairs * c.height * c.width * 2);
        for _ in 0..pairs * c.height * c.width {
            flow.push(vel[0] as f32);
            flow.push(vel[1] as f32);
        }

        Ok(SignalSample {
            id,
            signal: Tensor::vector(signal.iter().map(|&v| v as f32).collect()),
            e_txt: Tensor::vector(e_txt),
            e_img: Tensor::matrix(c.frames, c.d_clip, e_img)?,
            e_act: Tensor::vector(e_act),
            labels: Tensor::vector(self.labels(&z)),
            clip: Tensor::new(c.clip_shape().to_vec(), self.render_clip(&z, &traj))?,
            flow_gt: Tensor::new(vec![pairs, c.height, c.width, 2], flow)?,
            latent: Tensor::vector(z.iter().map(|&v| v as f32).collect()),
        })
    }

    /// Least-squares latent estimate from a signal: `argmin_z ‖A z − signal‖²`.
    pub fn recover_latent(&self, signal: &[f32]) -> Result<Vec<f64>> {
        let b: Vec<f64> = signal.iter().map(|&v| v as f64).collect();
        least_squares(&self.signal_mix, self.cfg.n_voxels, self.cfg.latent_dim, &b)
    }

    /// Noise-free text embedding direction for a latent.
    pub fn clean_text(&self, z: &[f64]) -> Vec<f32> {
        normalized(matvec(&self.txt_mix, self.cfg.d_clip, z))
    }

    pub fn clean_action(&self, z: &[f64]) -> Vec<f32> {
        normalized(matvec(&self.act_mix, self.cfg.d_act, z))
    }

    /// Noise-free frame-averaged image embedding for a latent (each frame
    /// normalised, then averaged).
    pub fn clean_image_mean(&self, z: &[f64]) -> Vec<f32> {
        let c = &self.cfg;
        let semantic = matvec(&self.img_mix, c.d_clip, z);
        let (traj, _) = self.trajectory(z);
        let mut acc = vec![0f64; c.d_clip];
        for p in &traj {
            let pos = [2.0 * p[0] / c.width as f64 - 1.0, 2.0 * p[1] / c.height as f64 - 1.0];
            let frame: Vec<f64> = semantic
                .iter()
                .enumerate()
                .map(|(i, s)| s + self.position_readout[2 * i] * pos[0] + self.position_readout[2 * i + 1] * pos[1])
                .collect();
            for (a, v) in acc.iter_mut().zip(normalized(frame)) {
                *a += v as f64 / c.frames as f64;
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }

    /// Solves for the latent behind a text or action embedding (up to scale).
    pub fn latent_from_text(&self, e: &[f32]) -> Result<Vec<f64>> {
        let b: Vec<f64> = e.iter().map(|&v| v as f64).collect();
        least_squares(&self.txt_mix, self.cfg.d_clip, self.cfg.latent_dim, &b)
    }

    pub fn latent_from_action(&self, e: &[f32]) -> Result<Vec<f64>> {
        let b: Vec<f64> = e.iter().map(|&v| v as f64).collect();
        least_squares(&self.act_mix, self.cfg.d_act, self.cfg.latent_dim, &b)
    }

    /// Solves `[M_img | P] [z; pos] = e` for one frame embedding and returns the latent part.
    pub fn latent_from_frame(&self, e: &[f32]) -> Result<Vec<f64>> {
        let (d, l) = (self.cfg.d_clip, self.cfg.latent_dim);
        let mut aug = Vec::with_capacity(d * (l + 2));
        for r in 0..d {
            aug.extend_from_slice(&self.img_mix[r * l..(r + 1) * l]);
            aug.extend_from_slice(&self.position_readout[2 * r..2 * r + 2]);
        }
        let b: Vec<f64> = e.iter().map(|&v| v as f64).collect();
        let mut x = least_squares(&aug, d, l + 2, &b)?;
        x.truncate(l);
        Ok(x)
    }
}

/// Normal-equation least squares via Cholesky, `a` is `rows x cols` row-major.
pub fn least_squares(a: &[f64], rows: usize, cols: usize, b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != rows * cols || b.len() != rows {
        return Err(Error::Dimension(format!(
            "least squares with a {rows}x{cols} system and {} targets",
            b.len()
        )));
    }
    let mut ata = vec![0f64; cols * cols];
    let mut atb = vec![0f64; cols];
    for r in 0..rows {
        let row = &a[r * cols..(r + 1) * cols];
        for i in 0..cols {
            atb[i] += row[i] * b[r];
            for j in 0..cols {
                ata[i * cols + j] += row[i] * row[j];
            }
        }
    }
    // Cholesky: ata = L Lᵀ
    let mut l = vec![0f64; cols * cols];
    for i in 0..cols {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * cols + k] * l[j * cols + k]).sum();
            if i == j {
                let d = ata[i * cols + i] - s;
                if d <= 1e-300 {
                    return Err(Error::Numeric("least-squares system is singular".into()));
                }
                l[i * cols + i] = d.sqrt();
            } else {
                l[i * cols + j] = (ata[i * cols + j] - s) / l[j * cols + j];
            }
        }
    }
    let mut y = vec![0f64; cols];
    for i in 0..cols {
        let s: f64 = (0..i).map(|k| l[i * cols + k] * y[k]).sum();
        y[i] = (atb[i] - s) / l[i * cols + i];
    }
    let mut x = vec![0f64; cols];
    for i in (0..cols).rev() {
        let s: f64 = (i + 1..cols).map(|k| l[k * cols + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * cols + i];
    }
    Ok(x)
}

/// Generates the train and test splits. Sample `i` of each split draws from
/// its own forked stream, so samples are independent of generation order.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    let gen = Generator::new(cfg)?;
    let root = Rng::new(cfg.seed);
    let (train_rng, test_rng) = (root.fork(1), root.fork(2));
    let train = (0..cfg.n_train)
        .map(|i| gen.sample(i as u64, &mut train_rng.fork(i as u64)))
        .collect::<Result<_>>()?;
    let test = (0..cfg.n_test)
        .map(|i| gen.sample((cfg.n_train + i) as u64, &mut test_rng.fork(i as u64)))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        config: cfg.clone(),
        train,
        test,
    })
}

/// Keyword-to-superclass lookup table.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperclassMap {
    names: Vec<String>,
    keywords: HashMap<String, usize>,
}

impl SuperclassMap {
    /// Parses `keyword: class` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let names: Vec<String> = SUPERCLASSES.iter().map(|s| s.to_string()).collect();
        let mut keywords = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (kw, class) = line.split_once(':').ok_or_else(|| {
                Error::Config(format!("superclass map line {}: expected `keyword: class`", lineno + 1))
            })?;
            let class = class.trim();
            let idx = names
                .iter()
                .position(|n| n == class)
                .ok_or_else(|| Error::Config(format!("superclass map line {}: unknown class {class:?}", lineno + 1)))?;
            keywords.insert(kw.trim().to_lowercase(), idx);
        }
        Ok(Self { names, keywords })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn class_of(&self, keyword: &str) -> usize {
        self.keywords
            .get(&keyword.trim().to_lowercase())
            .copied()
            .unwrap_or_else(|| {
                self.names
                    .iter()
                    .position(|n| n == "others")
                    .expect("others is a superclass")
            })
    }
}

impl Default for SuperclassMap {
    fn default() -> Self {
        Self::parse(DEFAULT_KEYWORDS).expect("bundled superclass table parses")
    }
}

/// Multi-hot union of the superclasses of `words`. Unknown words count as "others".
pub fn map_keywords<S: AsRef<str>>(words: &[S], map: &SuperclassMap) -> Tensor {
    let mut hot = vec![0f32; map.names().len()];
    for w in words {
        hot[map.class_of(w.as_ref())] = 1.0;
    }
    Tensor::vector(hot)
}
