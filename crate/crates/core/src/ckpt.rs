//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "DRAD"
//! version  u32
//! count    u32      number of entries
//! entry:
//!   name_len u32, name bytes (UTF-8)
//!   dtype    u8      0 = f32, 1 = f64
//!   rank     u32
//!   extents  u32 x rank
//!   data     raw little-endian elements, row-major
//! ```
//!
//! Entries are written in ascending name order, so identical state always
//! produces identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"DRAD";
pub const VERSION: u32 = 1;

/// A dtype-erased tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dtype: u8,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::BYTE_WIDTH);
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        RawTensor { dtype: T::DTYPE_CODE, shape: t.shape().to_vec(), bytes }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE_CODE {
            return Err(Error::Checkpoint(format!(
                "dtype code {} does not match requested element type (code {})",
                self.dtype,
                T::DTYPE_CODE
            )));
        }
        let n: usize = self.shape.iter().product();
        if self.bytes.len() != n * T::BYTE_WIDTH {
            return Err(Error::Checkpoint(format!(
                "entry holds {} bytes, shape {:?} needs {}",
                self.bytes.len(),
                self.shape,
                n * T::BYTE_WIDTH
            )));
        }
        let data = self.bytes.chunks_exact(T::BYTE_WIDTH).map(T::read_le).collect();
        Tensor::new(self.shape.clone(), data)
    }
}

/// Named tensors of one checkpoint, kept sorted by name.
pub type Entries = BTreeMap<String, RawTensor>;

pub fn write_to(mut w: impl Write, entries: &Entries) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.dtype);
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &e in &t.shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        buf.extend_from_slice(&t.bytes);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_from(mut r: impl Read) -> Result<Entries> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut pos)?;
    if version != VERSION {
        return Err(Error::VersionMismatch { found: version, expected: VERSION });
    }
    let count = read_u32(&mut pos)?;
    let mut entries = Entries::new();
    for _ in 0..count {
        let name_len = read_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let dtype = take(&mut pos, 1)?[0];
        let width = match dtype {
            0 => 4,
            1 => 8,
            other => return Err(Error::Checkpoint(format!("unknown dtype code {other}"))),
        };
        let rank = read_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = take(&mut pos, n * width)?.to_vec();
        entries.insert(name, RawTensor { dtype, shape, bytes });
    }
    if pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - pos)));
    }
    Ok(entries)
}

// ── model glue ──────────────────────────────────────────────────────

use crate::adapter::AdapterMlp;
use crate::model::{ConvStage, Model, ModelConfig};
use crate::perturb::GlobalStatsBank;

// Scalar hyperparameters ride along as f64 entries so they survive
// roundtrips exactly regardless of the model element type.
fn meta(v: f64) -> RawTensor {
    RawTensor::from_tensor(&Tensor::new(vec![1], vec![v]).expect("1-element"))
}

fn meta_value(entries: &Entries, name: &str) -> Result<f64> {
    entries
        .get(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?
        .to_tensor::<f64>()
        .map(|t| t.item())
}

/// Flatten a model into named checkpoint entries.
pub fn model_to_entries<T: Scalar>(model: &Model<T>) -> Entries {
    let mut e = Entries::new();
    for (i, st) in model.stages.iter().enumerate() {
        e.insert(format!("encoder.stage{i}.conv1.weight"), RawTensor::from_tensor(&st.w1));
        e.insert(format!("encoder.stage{i}.conv1.bias"), RawTensor::from_tensor(&st.b1));
        e.insert(format!("encoder.stage{i}.conv2.weight"), RawTensor::from_tensor(&st.w2));
        e.insert(format!("encoder.stage{i}.conv2.bias"), RawTensor::from_tensor(&st.b2));
    }
    for (&s, ad) in &model.adapters {
        e.insert(format!("adapter.stage{s}.w1"), RawTensor::from_tensor(&ad.w1));
        e.insert(format!("adapter.stage{s}.b1"), RawTensor::from_tensor(&ad.b1));
        e.insert(format!("adapter.stage{s}.w2"), RawTensor::from_tensor(&ad.w2));
        e.insert(format!("adapter.stage{s}.b2"), RawTensor::from_tensor(&ad.b2));
    }
    for s in model.bank.initialized_stages() {
        let mu = model.bank.get(s).expect("initialized");
        e.insert(format!("bank.stage{s}.mu_datum"), RawTensor::from_tensor(mu));
    }
    e.insert("meta.tau".into(), meta(model.cfg.tau));
    e.insert("meta.eps".into(), meta(model.cfg.eps));
    e.insert("meta.cosine_eps".into(), meta(model.cfg.cosine_eps));
    e.insert("meta.adapter_reduction".into(), meta(model.cfg.adapter_reduction as f64));
    e.insert("meta.adapter_scale".into(), meta(model.cfg.adapter_scale));
    e.insert("meta.bank_momentum".into(), meta(model.bank.momentum));
    e
}

/// Rebuild a model from checkpoint entries. Structure (stage count,
/// channel widths, adapter shapes) comes from the stored tensors.
pub fn model_from_entries<T: Scalar>(entries: &Entries) -> Result<Model<T>> {
    let mut stages: Vec<ConvStage<T>> = Vec::new();
    for i in 0.. {
        let key = format!("encoder.stage{i}.conv1.weight");
        if !entries.contains_key(&key) {
            break;
        }
        let get = |name: String| -> Result<Tensor<T>> {
            entries
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?
                .to_tensor()
        };
        stages.push(ConvStage {
            w1: get(format!("encoder.stage{i}.conv1.weight"))?,
            b1: get(format!("encoder.stage{i}.conv1.bias"))?,
            w2: get(format!("encoder.stage{i}.conv2.weight"))?,
            b2: get(format!("encoder.stage{i}.conv2.bias"))?,
        });
    }
    if stages.is_empty() {
        return Err(Error::Checkpoint("no encoder stages".into()));
    }
    let input_channels = stages[0].w1.shape()[1];
    let stage_channels: Vec<usize> = stages.iter().map(|s| s.w1.shape()[0]).collect();

    let adapter_scale = meta_value(entries, "meta.adapter_scale")?;
    let mut adapters = std::collections::BTreeMap::new();
    for s in 0..stages.len() {
        let key = format!("adapter.stage{s}.w1");
        if let Some(raw) = entries.get(&key) {
            let get = |name: String| -> Result<Tensor<T>> {
                entries
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?
                    .to_tensor()
            };
            adapters.insert(
                s,
                AdapterMlp {
                    w1: raw.to_tensor()?,
                    b1: get(format!("adapter.stage{s}.b1"))?,
                    w2: get(format!("adapter.stage{s}.w2"))?,
                    b2: get(format!("adapter.stage{s}.b2"))?,
                    scale: adapter_scale,
                },
            );
        }
    }

    let bank_momentum = meta_value(entries, "meta.bank_momentum")?;
    let mut bank = GlobalStatsBank::new(stages.len(), bank_momentum);
    for s in 0..stages.len() {
        if let Some(raw) = entries.get(&format!("bank.stage{s}.mu_datum")) {
            bank.set(s, raw.to_tensor()?);
        }
    }

    let reduction = meta_value(entries, "meta.adapter_reduction")? as usize;
    let cfg = ModelConfig {
        stage_channels,
        input_channels,
        tau: meta_value(entries, "meta.tau")?,
        eps: meta_value(entries, "meta.eps")?,
        cosine_eps: meta_value(entries, "meta.cosine_eps")?,
        adapter_reduction: reduction.max(1),
        adapter_scale,
    };
    Ok(Model { cfg, stages, adapters, bank })
}

pub fn save_model<T: Scalar>(path: impl AsRef<Path>, model: &Model<T>) -> Result<()> {
    save(path, &model_to_entries(model))
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    model_from_entries(&load(path)?)
}

pub fn save(path: impl AsRef<Path>, entries: &Entries) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    write_to(std::io::BufWriter::new(f), entries)
}

pub fn load(path: impl AsRef<Path>) -> Result<Entries> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    read_from(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_entries() -> Entries {
        let mut e = Entries::new();
        e.insert(
            "encoder.stage0.conv1.weight".into(),
            RawTensor::from_tensor(&Tensor::from_fn(vec![2, 3, 3, 3], |i| i as f32 * 0.25 - 3.0)),
        );
        e.insert(
            "bank.stage0.mu_datum".into(),
            RawTensor::from_tensor(&Tensor::new(vec![2], vec![0.5f32, -1.25]).unwrap()),
        );
        e
    }

    #[test]
    fn roundtrip_preserves_entries() {
        let entries = sample_entries();
        let mut bytes = Vec::new();
        write_to(&mut bytes, &entries).unwrap();
        let back = read_from(&bytes[..]).unwrap();
        assert_eq!(entries, back);
    }

    #[test]
    fn serialization_is_byte_stable() {
        let entries = sample_entries();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_to(&mut a, &entries).unwrap();
        write_to(&mut b, &entries).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn header_layout_is_exact() {
        let mut e = Entries::new();
        e.insert("x".into(), RawTensor::from_tensor(&Tensor::new(vec![1], vec![1.0f32]).unwrap()));
        let mut bytes = Vec::new();
        write_to(&mut bytes, &e).unwrap();
        assert_eq!(&bytes[0..4], b"DRAD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1); // count
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1); // name len
        assert_eq!(bytes[16], b'x');
        assert_eq!(bytes[17], 0); // f32 dtype code
        assert_eq!(u32::from_le_bytes(bytes[18..22].try_into().unwrap()), 1); // rank
        assert_eq!(u32::from_le_bytes(bytes[22..26].try_into().unwrap()), 1); // extent
        assert_eq!(&bytes[26..30], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 30);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = Vec::new();
        write_to(&mut bytes, &Entries::new()).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            read_from(&bytes[..]),
            Err(Error::VersionMismatch { found: 9, expected: VERSION })
        ));
    }

    #[test]
    fn dtype_mismatch_on_extract() {
        let raw = RawTensor::from_tensor(&Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap());
        assert!(raw.to_tensor::<f64>().is_err());
        assert!(raw.to_tensor::<f32>().is_ok());
    }

    #[test]
    fn truncated_and_corrupt_files_rejected() {
        let entries = sample_entries();
        let mut bytes = Vec::new();
        write_to(&mut bytes, &entries).unwrap();
        assert!(read_from(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_from(&bad[..]).is_err());
    }

    #[test]
    fn model_roundtrips_bit_exactly() {
        use crate::rng::seeded;
        let cfg = ModelConfig { stage_channels: vec![4, 6], ..Default::default() };
        let mut model: Model<f32> = Model::init(cfg, 0.97, &mut seeded(1));
        model.init_adapters(&[0, 1], &mut seeded(2)).unwrap();
        model.bank.set(0, Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());

        let entries = model_to_entries(&model);
        let mut bytes = Vec::new();
        write_to(&mut bytes, &entries).unwrap();
        let back: Model<f32> = model_from_entries(&read_from(&bytes[..]).unwrap()).unwrap();

        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.stages.len(), 2);
        assert_eq!(back.stages[0].w1, model.stages[0].w1);
        assert_eq!(back.adapters.len(), 2);
        assert_eq!(back.adapters[&1].w1, model.adapters[&1].w1);
        assert_eq!(back.bank.get(0).unwrap(), model.bank.get(0).unwrap());
        assert!(!back.bank.is_initialized(1));

        // Save again: identical bytes (load/save identity).
        let again = model_to_entries(&back);
        let mut bytes2 = Vec::new();
        write_to(&mut bytes2, &again).unwrap();
        assert_eq!(bytes, bytes2);
    }
}
