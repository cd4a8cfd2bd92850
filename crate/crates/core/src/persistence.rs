//! Little-endian binary formats for memory pools (`MOMP`), checkpoints
//! (`MOMC`), datasets (`MOMD`) and clips (`MOMV`).
//!
//! Every file starts with a 4-byte magic and a `u32` version. Strings are a
//! `u32` byte length followed by UTF-8. Tensors are a `u32` rank, `u32` dims
//! and raw `f32` data.
//!
//! Pool layout after the magic: `version u32, n_entries u64, d_clip u32,
//! d_act u32, marker u32 = 0x01020304`, then per entry `id u64, tag string,
//! e_txt [d_clip] f32, e_img [d_clip] f32, e_act [d_act] f32`.
//!
//! Checkpoint: `version u32, metadata, n_params u32`, then per parameter
//! `name string, tensor`. Metadata is a `u32` count of key/value strings.
//!
//! Dataset: `version u32, metadata (generator config), n_train u64,
//! n_test u64`, then per sample `id u64` and eight tensors in the order
//! signal, e_txt, e_img, e_act, labels, clip, flow_gt, latent.
//!
//! Clip: `version u32, id u64, tensor`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::Settings;
use crate::datasynth::{Dataset, GeneratorConfig, SignalSample};
use crate::error::{Error, FormatError, Result};
use crate::memory::{MemoryEntry, MemoryPool};
use crate::numerics::{ParamStore, Tensor};

pub const POOL_MAGIC: [u8; 4] = *b"MOMP";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MOMC";
pub const DATASET_MAGIC: [u8; 4] = *b"MOMD";
pub const CLIP_MAGIC: [u8; 4] = *b"MOMV";
pub const VERSION: u32 = 1;
pub const ENDIAN_MARKER: u32 = 0x0102_0304;

type FResult<T> = std::result::Result<T, FormatError>;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn header(magic: [u8; 4]) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(&magic);
        w.u32(VERSION);
        w
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        self.f32s(t.data());
    }

    fn meta(&mut self, meta: &BTreeMap<String, String>) {
        self.u32(meta.len() as u32);
        for (k, v) in meta {
            self.str(k);
            self.str(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], magic: [u8; 4]) -> FResult<Self> {
        let mut r = Self { buf, pos: 0 };
        let found: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        if found != magic {
            return Err(FormatError::BadMagic { expected: magic, found });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::Version {
                expected: VERSION,
                found: version,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> FResult<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(FormatError::Truncated {
                offset: self.buf.len() as u64,
                needed: (n - left) as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> FResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> FResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn f32s(&mut self, n: usize) -> FResult<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| FormatError::Malformed("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect())
    }

    fn str(&mut self) -> FResult<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| FormatError::Malformed("string is not UTF-8".into()))
    }

    fn tensor(&mut self) -> FResult<Tensor> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(FormatError::Malformed(format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| FormatError::Malformed("tensor size overflow".into()))?;
        let data = self.f32s(n)?;
        Tensor::new(shape, data).map_err(|e| FormatError::Malformed(e.to_string()))
    }

    fn meta(&mut self) -> FResult<BTreeMap<String, String>> {
        let n = self.u32()?;
        let mut m = BTreeMap::new();
        for _ in 0..n {
            let k = self.str()?;
            let v = self.str()?;
            m.insert(k, v);
        }
        Ok(m)
    }

    fn finish(self) -> FResult<()> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Malformed(format!(
                "{} trailing bytes at offset {}",
                self.buf.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::write(path, bytes)?)
}

pub fn encode_pool(pool: &MemoryPool) -> Vec<u8> {
    let mut w = Writer::header(POOL_MAGIC);
    let (d_clip, d_act) = pool.dims();
    w.u64(pool.len() as u64);
    w.u32(d_clip as u32);
    w.u32(d_act as u32);
    w.u32(ENDIAN_MARKER);
    for e in pool.entries() {
        w.u64(e.id);
        w.str(&e.source_tag);
        w.f32s(e.e_txt.data());
        w.f32s(e.e_img.data());
        w.f32s(e.e_act.data());
    }
    w.buf
}

pub fn decode_pool(bytes: &[u8]) -> Result<MemoryPool> {
    let mut r = Reader::open(bytes, POOL_MAGIC)?;
    let n = r.u64()?;
    let d_clip = r.u32()? as usize;
    let d_act = r.u32()? as usize;
    let marker = r.u32()?;
    if marker != ENDIAN_MARKER {
        return Err(FormatError::Endianness(marker).into());
    }
    if d_clip == 0 || d_act == 0 {
        return Err(FormatError::DimMismatch(format!("pool dims ({d_clip}, {d_act})")).into());
    }
    let mut entries = Vec::new();
    for _ in 0..n {
        let id = r.u64()?;
        let source_tag = r.str()?;
        entries.push(MemoryEntry {
            id,
            source_tag,
            e_txt: Tensor::vector(r.f32s(d_clip)?),
            e_img: Tensor::vector(r.f32s(d_clip)?),
            e_act: Tensor::vector(r.f32s(d_act)?),
        });
    }
    r.finish()?;
    MemoryPool::from_entries(d_clip, d_act, entries)
        .map_err(|e| FormatError::Malformed(format!("invalid pool contents: {e}")).into())
}

pub fn save_pool(pool: &MemoryPool, path: &Path) -> Result<()> {
    write(path, &encode_pool(pool))
}

pub fn load_pool(path: &Path) -> Result<MemoryPool> {
    decode_pool(&read(path)?)
}

/// Named parameters plus free-form metadata (configs, step counts).
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.meta == other.meta
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|(a, b)| a.name == b.name && a.tensor.bitwise_eq(&b.tensor))
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::header(CHECKPOINT_MAGIC);
    w.meta(&ckpt.meta);
    w.u32(ckpt.params.len() as u32);
    for p in ckpt.params.iter() {
        w.str(&p.name);
        w.tensor(&p.tensor);
    }
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC)?;
    let meta = r.meta()?;
    let n = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = r.str()?;
        let t = r.tensor()?;
        params
            .insert(name, t)
            .map_err(|e| FormatError::Malformed(e.to_string()))?;
    }
    r.finish()?;
    Ok(Checkpoint { meta, params })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write(path, &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read(path)?)
}

fn sample_tensors(s: &SignalSample) -> [&Tensor; 8] {
    [
        &s.signal, &s.e_txt, &s.e_img, &s.e_act, &s.labels, &s.clip, &s.flow_gt, &s.latent,
    ]
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::header(DATASET_MAGIC);
    w.meta(&ds.config.to_map());
    w.u64(ds.train.len() as u64);
    w.u64(ds.test.len() as u64);
    for s in ds.train.iter().chain(&ds.test) {
        w.u64(s.id);
        for t in sample_tensors(s) {
            w.tensor(t);
        }
    }
    w.buf
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(bytes, DATASET_MAGIC)?;
    let meta = r.meta()?;
    let config =
        GeneratorConfig::from_map(&meta).map_err(|e| FormatError::Malformed(format!("dataset config: {e}")))?;
    let n_train = r.u64()? as usize;
    let n_test = r.u64()? as usize;
    let clip_shape = config.clip_shape();
    let mut samples = Vec::new();
    for _ in 0..n_train + n_test {
        let id = r.u64()?;
        let mut t: Vec<Tensor> = Vec::with_capacity(8);
        for _ in 0..8 {
            t.push(r.tensor()?);
        }
        let [signal, e_txt, e_img, e_act, labels, clip, flow_gt, latent]: [Tensor; 8] =
            t.try_into().expect("eight tensors");
        let expect = |t: &Tensor, len: usize, what: &str| -> FResult<()> {
            if t.len() != len {
                return Err(FormatError::DimMismatch(format!(
                    "sample {id} {what} has {} values, expected {len}",
                    t.len()
                )));
            }
            Ok(())
        };
        expect(&signal, config.n_voxels, "signal")?;
        expect(&e_txt, config.d_clip, "e_txt")?;
        expect(&e_img, config.frames * config.d_clip, "e_img")?;
        expect(&e_act, config.d_act, "e_act")?;
        expect(&labels, config.n_classes, "labels")?;
        expect(&latent, config.latent_dim, "latent")?;
        if clip.shape() != clip_shape {
            return Err(FormatError::DimMismatch(format!("sample {id} clip {:?}", clip.shape())).into());
        }
        samples.push(SignalSample {
            id,
            signal,
            e_txt,
            e_img,
            e_act,
            labels,
            clip,
            flow_gt,
            latent,
        });
    }
    r.finish()?;
    let test = samples.split_off(n_train);
    Ok(Dataset {
        config,
        train: samples,
        test,
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write(path, &encode_dataset(ds))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&read(path)?)
}

pub fn encode_clip(id: u64, clip: &Tensor) -> Result<Vec<u8>> {
    if clip.shape().len() != 4 {
        return Err(Error::Dimension(format!(
            "clip must be F x C x H x W, got {:?}",
            clip.shape()
        )));
    }
    let mut w = Writer::header(CLIP_MAGIC);
    w.u64(id);
    w.tensor(clip);
    Ok(w.buf)
}

pub fn decode_clip(bytes: &[u8]) -> Result<(u64, Tensor)> {
    let mut r = Reader::open(bytes, CLIP_MAGIC)?;
    let id = r.u64()?;
    let t = r.tensor()?;
    if t.shape().len() != 4 {
        return Err(FormatError::DimMismatch(format!("clip of rank {}", t.shape().len())).into());
    }
    r.finish()?;
    Ok((id, t))
}

pub fn save_clip(id: u64, clip: &Tensor, path: &Path) -> Result<()> {
    write(path, &encode_clip(id, clip)?)
}

pub fn load_clip(path: &Path) -> Result<(u64, Tensor)> {
    decode_clip(&read(path)?)
}
