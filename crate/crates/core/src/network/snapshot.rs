//! Flat binary parameter snapshots.
//!
//! Layout (all integers little-endian):
//! `"WUSM"`, version `u32`, layer count `u32`, then until EOF one record per
//! tensor: name length `u32`, name bytes, rank `u32`, `rank` dims as `u64`,
//! element tag `u8` (0 = f32, 1 = f64), raw little-endian elements.

use std::io::{Read, Write};

use super::{Layer, Network};
use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"WUSM";
pub const VERSION: u32 = 1;

fn named_tensors<T: Scalar>(net: &Network<T>) -> Vec<(String, &Tensor<T>)> {
    let mut out = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        match layer {
            Layer::Dense { weights, biases } | Layer::Conv2d { weights, biases, .. } => {
                out.push((format!("layers.{i}.weight"), weights));
                out.push((format!("layers.{i}.bias"), biases));
            }
            Layer::BatchNorm2d {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                out.push((format!("layers.{i}.weight"), gamma));
                out.push((format!("layers.{i}.bias"), beta));
                out.push((format!("layers.{i}.running_mean"), running_mean));
                out.push((format!("layers.{i}.running_var"), running_var));
            }
            _ => {}
        }
    }
    out
}

fn tensor_slot<'a, T: Scalar>(net: &'a mut Network<T>, name: &str) -> Option<&'a mut Tensor<T>> {
    let rest = name.strip_prefix("layers.")?;
    let (idx, field) = rest.split_once('.')?;
    let layer = net.layers.get_mut(idx.parse::<usize>().ok()?)?;
    match (layer, field) {
        (Layer::Dense { weights, .. } | Layer::Conv2d { weights, .. }, "weight") => Some(weights),
        (Layer::Dense { biases, .. } | Layer::Conv2d { biases, .. }, "bias") => Some(biases),
        (Layer::BatchNorm2d { gamma, .. }, "weight") => Some(gamma),
        (Layer::BatchNorm2d { beta, .. }, "bias") => Some(beta),
        (Layer::BatchNorm2d { running_mean, .. }, "running_mean") => Some(running_mean),
        (Layer::BatchNorm2d { running_var, .. }, "running_var") => Some(running_var),
        _ => None,
    }
}

impl<T: Scalar> Network<T> {
    pub fn save_snapshot<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for (name, t) in named_tensors(self) {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            buf.push(T::PRECISION.tag());
            for &v in t.data() {
                v.write_le(&mut buf);
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Overwrites this network's tensors from a snapshot of the same
    /// architecture. Elements stored in the other precision are converted.
    pub fn load_snapshot<R: Read>(&mut self, mut input: R) -> Result<()> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Snapshot("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        let layers = cur.u32()? as usize;
        if layers != self.layers.len() {
            return Err(Error::Snapshot(format!(
                "snapshot has {layers} layers, network has {}",
                self.layers.len()
            )));
        }
        let mut loaded = Vec::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Snapshot("tensor name is not UTF-8".into()))?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let precision = Precision::from_tag(cur.take(1)?[0])
                .ok_or_else(|| Error::Snapshot(format!("{name}: unknown element tag")))?;
            let count: usize = shape.iter().product();
            let raw = cur.take(count * precision.byte_width())?;
            let values: Vec<T> = match precision {
                Precision::F32 => raw.chunks_exact(4).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect(),
                Precision::F64 => raw.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
            };
            let slot = tensor_slot(self, &name)
                .ok_or_else(|| Error::Snapshot(format!("unknown tensor {name}")))?;
            if slot.shape() != shape.as_slice() {
                return Err(Error::Snapshot(format!(
                    "{name}: shape {shape:?} does not match network {:?}",
                    slot.shape()
                )));
            }
            *slot = Tensor::new(shape.clone(), values)?;
            loaded.push(name);
        }
        let expected = named_tensors(self).len();
        if loaded.len() != expected {
            return Err(Error::Snapshot(format!(
                "snapshot holds {} tensors, network has {expected}",
                loaded.len()
            )));
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Snapshot(format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
