//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "CATN" | u32 version | u32 len, config text | u32 count |
//!   count × ( u16 len, name | u8 rank | rank × u32 dim | numel × f32 )
//! ```
//!
//! The config text is the model's `key=value` config plus `meta.*` training
//! metadata. Tensors are the parameters followed by running statistics.

use std::fs;
use std::path::Path;

use super::{build_model, expected_tensors, Model, ModelConfig, TrainingMeta};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::nn::RunningStats;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CATN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

fn config_text(model: &Model) -> String {
    let mut kv = model.config.to_key_values();
    if let Some(epoch) = model.meta.epoch {
        kv.set("meta.epoch", epoch);
    }
    if let Some(seed) = model.meta.seed {
        kv.set("meta.seed", seed);
    }
    if let Some(loss) = model.meta.loss {
        kv.set("meta.loss", loss);
    }
    kv.render()
}

pub(crate) fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = config_text(model);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());

    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.tensor.shape().to_vec(), p.tensor.values().to_vec()))
        .collect();
    for (name, stats) in &model.norms {
        let c = stats.mean.len();
        tensors.push((format!("{name}.running_mean"), vec![c], stats.mean.clone()));
        tensors.push((format!("{name}.running_var"), vec![c], stats.var.clone()));
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, values) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n, what)?)
            .map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let text = r.utf8(len, "config text")?;
    let kv = KeyValues::parse(text).map_err(|e| Error::Integrity(format!("config text: {e}")))?;
    for key in ["stages", "num_classes", "seed", "input_channels", "input_height", "input_width"] {
        if !kv.contains(key) {
            return Err(Error::Integrity(format!("config text lacks {key:?}")));
        }
    }
    let config = ModelConfig::from_key_values(&kv, &ModelConfig::desk(2, 0))
        .map_err(|e| Error::Integrity(format!("config text: {e}")))?;
    let meta = TrainingMeta {
        epoch: kv.parse_opt("meta.epoch")?,
        seed: kv.parse_opt("meta.seed")?,
        loss: kv.parse_opt("meta.loss")?,
    };

    let expected = expected_tensors(&config);
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::Integrity(format!(
            "config implies {} tensors, file holds {count}",
            expected.len()
        )));
    }
    let mut model = build_model(&config)?;
    let num_params = model.params.len();
    for (slot, (want_name, want_shape)) in expected.iter().enumerate() {
        let name_len = r.u16("tensor name length")? as usize;
        let name = r.utf8(name_len, "tensor name")?;
        if name != want_name {
            return Err(Error::Integrity(format!(
                "tensor {slot} is {name:?}, expected {want_name:?}"
            )));
        }
        let rank = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dimension")? as usize);
        }
        if &shape != want_shape {
            return Err(Error::Integrity(format!(
                "{name} has shape {shape:?}, config implies {want_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, "tensor data")?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        if slot < num_params {
            model.params[slot].tensor.values_mut().copy_from_slice(&values);
        } else {
            let k = slot - num_params;
            let stats: &mut RunningStats = &mut model.norms[k / 2].1;
            if k % 2 == 0 {
                stats.mean = values;
            } else {
                stats.var = values;
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    model.meta = meta;
    Ok(model)
}
