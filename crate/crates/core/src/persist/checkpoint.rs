//! Binary subject checkpoint.
//!
//! Layout (all integers u32 little-endian):
//! `"CPSM"`, version, `N`, `d`, `T`, the `N x d` embedding table as f32,
//! `betas` then `alpha_bar` (each `T + 1` f64), a block count, then per block
//! the name length, UTF-8 name, rank, dims and row-major f32 data; finally
//! the SHA-256 of everything before it.
//!
//! Token strings and roles live in a JSON sidecar whose `version_hash` must
//! match the embedding table stored here.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImageShape;
use crate::persist::{load_json, save_json, write_atomic};
use crate::subject::denoiser::{Denoiser, DenoiserConfig};
use crate::subject::vocab::{embedding_hash, VocabularyFile};
use crate::subject::{NoiseSchedule, Subject, Vocabulary};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPSM";
pub const CHECKPOINT_VERSION: u32 = 1;

const IMAGE_SHAPE_BLOCK: &str = "meta.image_shape";

/// Decoded checkpoint contents before pairing with a vocabulary sidecar.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub embeddings: Array2<f64>,
    pub schedule: NoiseSchedule,
    pub model: Denoiser<f64>,
}

fn f32_exact(what: &'static str, v: f64) -> Result<f32> {
    let f = v as f32;
    if f as f64 != v && !(v.is_nan() && f.is_nan()) {
        return Err(Error::Format {
            what,
            reason: format!("{v} is not representable as f32"),
        });
    }
    Ok(f)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f32s(&mut self, what: &'static str, vs: impl IntoIterator<Item = f64>) -> Result<()> {
        for v in vs {
            self.0.extend_from_slice(&f32_exact(what, v)?.to_le_bytes());
        }
        Ok(())
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn block(&mut self, name: &str, shape: &[usize], data: impl IntoIterator<Item = f64>) -> Result<()> {
        self.u32(name.len());
        self.0.extend_from_slice(name.as_bytes());
        self.u32(shape.len());
        for &s in shape {
            self.u32(s);
        }
        self.f32s("checkpoint parameter", data)
    }
}

pub fn write_checkpoint(subject: &Subject) -> Result<Vec<u8>> {
    let vocab = subject.vocab();
    let schedule = subject.schedule();
    let model = subject.model();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION as usize);
    w.u32(vocab.len());
    w.u32(vocab.dim());
    w.u32(schedule.steps());
    w.f32s("embedding", vocab.embeddings().iter().copied())?;
    w.f64s(schedule.betas());
    w.f64s(schedule.alpha_bar());
    let blocks = model.param_blocks();
    w.u32(blocks.len() + 1);
    let img = model.config().image;
    w.block(
        IMAGE_SHAPE_BLOCK,
        &[3],
        [img.height, img.width, img.channels].map(|v| v as f64),
    )?;
    for b in &blocks {
        w.block(&b.name, &b.shape, b.data.iter().copied())?;
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    Ok(w.0)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn truncated() -> Error {
    Error::Format {
        what: "checkpoint",
        reason: "unexpected end of data".into(),
    }
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(truncated)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(truncated)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

struct RawBlock {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 + 32 {
        return Err(Error::integrity("checkpoint length", ">= 36 bytes", format!("{} bytes", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::integrity(
            "checkpoint magic",
            String::from_utf8_lossy(CHECKPOINT_MAGIC),
            String::from_utf8_lossy(&bytes[..4]),
        ));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::integrity("checkpoint SHA-256", hex::encode(trailer), hex::encode(digest)));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::integrity(
            "checkpoint version",
            CHECKPOINT_VERSION.to_string(),
            version.to_string(),
        ));
    }
    let (n, d, t) = (r.u32()?, r.u32()?, r.u32()?);
    let emb = r.f32s(n.checked_mul(d).ok_or_else(truncated)?)?;
    let embeddings = Array2::from_shape_vec((n, d), emb).expect("sized read");
    let betas = r.f64s(t + 1)?;
    let alpha_bar = r.f64s(t + 1)?;
    let schedule = NoiseSchedule::from_betas(betas)?;
    if schedule.alpha_bar().iter().zip(&alpha_bar).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::Format {
            what: "checkpoint",
            reason: "stored alpha_bar does not match betas".into(),
        });
    }
    let count = r.u32()?;
    let mut blocks = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Format {
            what: "checkpoint",
            reason: e.to_string(),
        })?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &s| a.checked_mul(s)).ok_or_else(truncated)?;
        let data = r.f32s(numel)?;
        blocks.push(RawBlock { name, shape, data });
    }
    if r.pos != body.len() {
        return Err(Error::Format {
            what: "checkpoint",
            reason: format!("{} trailing bytes", body.len() - r.pos),
        });
    }
    let model = assemble_model(&blocks, d, t)?;
    Ok(Checkpoint {
        embeddings,
        schedule,
        model,
    })
}

fn assemble_model(blocks: &[RawBlock], cond_dim: usize, steps: usize) -> Result<Denoiser<f64>> {
    let find = |name: &str| {
        blocks.iter().find(|b| b.name == name).ok_or_else(|| Error::Format {
            what: "checkpoint",
            reason: format!("missing block `{name}`"),
        })
    };
    let meta = find(IMAGE_SHAPE_BLOCK)?;
    if meta.data.len() != 3 {
        return Err(Error::shape("checkpoint image shape", 3, meta.data.len()));
    }
    let image = ImageShape::new(meta.data[0] as usize, meta.data[1] as usize, meta.data[2] as usize);
    let in_cw = find("input.cond_weight")?;
    if in_cw.shape.len() != 2 || in_cw.shape[0] < cond_dim {
        return Err(Error::shape("checkpoint input.cond_weight", format!("[>={cond_dim}, h]"), format!("{:?}", in_cw.shape)));
    }
    let config = DenoiserConfig {
        image,
        hidden: in_cw.shape[1],
        blocks: blocks.iter().filter(|b| b.name.starts_with("block") && b.name.ends_with(".weight") && !b.name.ends_with("cond_weight")).count(),
        time_dim: in_cw.shape[0] - cond_dim,
        cond_dim,
        steps,
    };
    let mut model = Denoiser::<f64>::zeros(config);
    let expected: Vec<(String, Vec<usize>)> = model.param_blocks().into_iter().map(|b| (b.name, b.shape)).collect();
    if expected.len() + 1 != blocks.len() {
        return Err(Error::shape("checkpoint block count", expected.len() + 1, blocks.len()));
    }
    for ((name, shape), slot) in expected.iter().zip(model.param_slices_mut()) {
        let b = find(name)?;
        if &b.shape != shape {
            return Err(Error::shape("checkpoint block shape", format!("{name} {shape:?}"), format!("{:?}", b.shape)));
        }
        for (dst, &src) in slot.iter_mut().zip(&b.data) {
            *dst = src;
        }
    }
    Ok(model)
}

/// The vocabulary sidecar written next to a checkpoint.
pub fn vocab_sidecar(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("vocab.json")
}

/// Writes the checkpoint to `path` and the vocabulary sidecar next to it.
pub fn save_subject(subject: &Subject, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    save_json(vocab_sidecar(path), &VocabularyFile::from(subject.vocab()))?;
    write_atomic(path, &write_checkpoint(subject)?)
}

pub fn load_subject(path: impl AsRef<Path>) -> Result<Subject> {
    let path = path.as_ref();
    let ckpt = read_checkpoint(&std::fs::read(path)?)?;
    let file: VocabularyFile = load_json(vocab_sidecar(path))?;
    let stored = embedding_hash(&ckpt.embeddings);
    if file.version_hash != stored {
        return Err(Error::integrity("vocabulary sidecar hash", stored, file.version_hash));
    }
    let vocab = Vocabulary::try_from(file)?;
    Subject::new(vocab, ckpt.schedule, ckpt.model)
}
