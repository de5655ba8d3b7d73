//! Versioned binary checkpoints: model config snapshot, named parameter
//! arrays as 32-bit little-endian floats, Adam state, epoch counter, and the
//! base seed (all run randomness derives from it functionally, so it is the
//! complete RNG state). Writes are atomic: temp file, then rename.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::harness::config::{fnv64, model_canonical_text, model_from_text};
use crate::model::ModelConfig;
use crate::nn::{AdamConfig, AdamState, ParamStore};

const MAGIC: &[u8; 8] = b"ISTDCKP1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Completed epochs.
    pub epoch: u32,
    /// Root of all derived randomness for the run.
    pub base_seed: u64,
    pub best_val_miou: f64,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
}

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        self.inner.write_all(&[v])?;
        Ok(())
    }
    fn u16(&mut self, v: u16) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn bytes(&mut self, v: &[u8]) -> Result<()> {
        self.inner.write_all(v)?;
        Ok(())
    }
    fn f32_array(&mut self, a: &Array4<f32>) -> Result<()> {
        for v in a.iter() {
            self.inner.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::Checkpoint("truncated checkpoint file".into()))
    }
    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.exact(&mut b)?;
        Ok(b[0])
    }
    fn u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn f32_array(&mut self, shape: (usize, usize, usize, usize)) -> Result<Array4<f32>> {
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        let mut data = Vec::with_capacity(len);
        let mut b = [0u8; 4];
        for _ in 0..len {
            self.exact(&mut b)?;
            data.push(f32::from_le_bytes(b));
        }
        Array4::from_shape_vec(shape, data)
            .map_err(|e| Error::Checkpoint(format!("bad array shape: {e}")))
    }
}

/// Serialize atomically: write `<path>.tmp`, then rename over `path`.
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = Writer {
            inner: BufWriter::new(File::create(&tmp)?),
        };
        w.bytes(MAGIC)?;
        w.u32(FORMAT_VERSION)?;
        let model_text = model_canonical_text(&ckpt.model);
        w.u64(fnv64(&model_text))?;
        w.u32(model_text.len() as u32)?;
        w.bytes(model_text.as_bytes())?;
        w.u32(ckpt.epoch)?;
        w.u64(ckpt.base_seed)?;
        w.f64(ckpt.best_val_miou)?;

        w.u32(ckpt.store.len() as u32)?;
        for p in ckpt.store.iter() {
            let name = p.name.as_bytes();
            w.u16(name.len() as u16)?;
            w.bytes(name)?;
            w.u8(u8::from(p.trainable))?;
            let d = p.value.dim();
            for s in [d.0, d.1, d.2, d.3] {
                w.u32(s as u32)?;
            }
            w.f32_array(&p.value)?;
        }

        w.u64(ckpt.adam.t)?;
        w.f64(ckpt.adam.config.lr)?;
        w.f64(ckpt.adam.config.beta1)?;
        w.f64(ckpt.adam.config.beta2)?;
        w.f64(ckpt.adam.config.epsilon)?;
        for (m, v) in ckpt.adam.m.iter().zip(ckpt.adam.v.iter()) {
            w.f32_array(m)?;
            w.f32_array(v)?;
        }
        w.inner.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load and fully validate a checkpoint. `expected_model`, when given, must
/// hash-match the stored config or the load is rejected with no partial
/// state.
pub fn load(path: &Path, expected_model: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    let mut magic = [0u8; 8];
    r.exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic, not a checkpoint file",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {version} (expected {FORMAT_VERSION})",
            path.display()
        )));
    }
    let stored_hash = r.u64()?;
    let text_len = r.u32()? as usize;
    let mut text = vec![0u8; text_len];
    r.exact(&mut text)?;
    let text = String::from_utf8(text)
        .map_err(|_| Error::Checkpoint("model config block is not UTF-8".into()))?;
    if fnv64(&text) != stored_hash {
        return Err(Error::Checkpoint("model config hash mismatch".into()));
    }
    if let Some(expected) = expected_model {
        if fnv64(&model_canonical_text(expected)) != stored_hash {
            return Err(Error::Checkpoint(
                "checkpoint was produced with a different model configuration".into(),
            ));
        }
    }
    let model = model_from_text(&text)?;
    let epoch = r.u32()?;
    let base_seed = r.u64()?;
    let best_val_miou = r.f64()?;

    let count = r.u32()? as usize;
    let mut store = ParamStore::<f32>::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let mut name = vec![0u8; name_len];
        r.exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let trainable = r.u8()? != 0;
        let shape = (
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
        );
        let value = r.f32_array(shape)?;
        store.insert(&name, value, trainable)?;
    }

    let t = r.u64()?;
    let config = AdamConfig {
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        epsilon: r.f64()?,
    };
    let mut adam = AdamState::new(config, &store);
    adam.t = t;
    for i in 0..store.len() {
        let shape = store.by_index(i).value.dim();
        adam.m[i] = r.f32_array(shape)?;
        adam.v[i] = r.f32_array(shape)?;
    }

    Ok(Checkpoint {
        model,
        epoch,
        base_seed,
        best_val_miou,
        store,
        adam,
    })
}
