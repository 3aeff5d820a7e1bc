//! Binary checkpoint format.
//!
//! ```text
//! magic "SPCKPT1" | u32 version | 32-byte config digest | u32 count
//! count x (u32 name_len | name | u8 dtype | u32 ndim | ndim x u64 dim)
//! payload: little-endian arrays in manifest order
//! u64 FNV-1a of the payload
//! ```

use std::path::Path;

use crate::autodiff::{DType, Float, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 7] = b"SPCKPT1";
pub const VERSION: u32 = 1;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn to_bytes<F: Float>(model: &Model<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.cfg.digest());
    let entries = model.store.entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(F::DTYPE.tag());
        out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    let start = out.len();
    for e in entries {
        for &x in e.value.data() {
            x.write_le(&mut out);
        }
    }
    let sum = fnv1a64(&out[start..]);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint for `cfg`, converting arrays to `F` if needed.
pub fn from_bytes<F: Float>(buf: &[u8], cfg: &ModelConfig) -> Result<Model<F>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    if r.take(32, "config digest")? != cfg.digest() {
        return Err(Error::DigestMismatch);
    }
    let count = r.u32("array count")? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?
            .to_string();
        let tag = r.take(1, "dtype")?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        manifest.push((name, dtype, shape));
    }
    let start = r.pos;
    let mut values = Vec::with_capacity(manifest.len());
    for (name, dtype, shape) in manifest {
        let n: usize = shape.iter().product();
        let w = dtype.width();
        let raw = r.take(n.checked_mul(w).ok_or_else(|| Error::Format("array too large".into()))?, "payload")?;
        let data: Vec<F> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| F::from_f64(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| F::from_f64(f64::read_le(c))).collect(),
        };
        values.push((name, Tensor::new(shape, data)?));
    }
    let end = r.pos;
    let stored = r.u64("checksum")?;
    let computed = fnv1a64(&buf[start..end]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let mut model = Model::new(cfg.clone(), 0)?;
    model.load_values(values)?;
    Ok(model)
}

pub fn save<F: Float>(model: &Model<F>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load<F: Float>(path: &Path, cfg: &ModelConfig) -> Result<Model<F>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Patchifier;
    use crate::scratchpad::TriggerPolicy;

    fn cfg() -> ModelConfig {
        ModelConfig::tiny(16, 16, 1, Patchifier::Fixed { p: 4 }, TriggerPolicy::Entropy(1.5))
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = Model::<f32>::new(cfg(), 7).unwrap();
        let a = to_bytes(&m);
        let back: Model<f32> = from_bytes(&a, &cfg()).unwrap();
        assert_eq!(to_bytes(&back), a);
    }

    #[test]
    fn distinguishes_failures() {
        let m = Model::<f32>::new(cfg(), 7).unwrap();
        let a = to_bytes(&m);

        let mut flipped = a.clone();
        let i = a.len() - 20;
        flipped[i] ^= 1;
        assert!(matches!(from_bytes::<f32>(&flipped, &cfg()), Err(Error::ChecksumMismatch { .. })));

        assert!(matches!(from_bytes::<f32>(&a[..a.len() - 100], &cfg()), Err(Error::Truncated(_))));

        let mut other = cfg();
        other.trunk.d_ff += 2;
        assert!(matches!(from_bytes::<f32>(&a, &other), Err(Error::DigestMismatch)));

        assert!(matches!(from_bytes::<f32>(b"garbage!", &cfg()), Err(Error::Format(_))));
    }

    #[test]
    fn knobs_do_not_change_digest() {
        let mut c = cfg();
        c.trigger = TriggerPolicy::Dense;
        c.patchifier = Patchifier::Fixed { p: 8 };
        assert_eq!(c.digest(), cfg().digest());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
