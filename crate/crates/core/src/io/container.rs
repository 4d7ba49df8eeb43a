//! The named-tensor container shared by checkpoints and dataset bundles.
//!
//! ```text
//! "MLOM"  u32 version  u32 count
//! count × { u32 name_len, name (UTF-8), u32 rank, rank × u32 dim, numel × f64 }
//! ```
//!
//! All integers and floats are little-endian. Integers that do not fit a
//! tensor naturally (seeds, counters) are stored as two-element tensors
//! holding the high and low 32-bit halves.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MLOM";
pub const VERSION: u32 = 1;

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let size: usize = entries
        .iter()
        .map(|(n, t)| 8 + n.len() + 4 * t.shape().len() + 8 * t.data().len())
        .sum();
    let mut out = Vec::with_capacity(12 + size);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Decode {
        what: "MLOM container",
        reason: reason.into(),
    }
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| bad("missing magic"))? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    // each entry takes at least 8 bytes
    if count > r.remaining() / 8 {
        return Err(bad(format!("tensor count {count} exceeds file size")));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| bad(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > r.remaining() / 4 {
            return Err(bad(format!("{name}: rank {rank} exceeds file size")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= r.remaining() / 8)
            .ok_or_else(|| bad(format!("{name}: shape {shape:?} exceeds file size")))?;
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.remaining() != 0 {
        return Err(bad(format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}

pub(crate) fn u64_tensor(x: u64) -> Tensor {
    Tensor::new(vec![2], vec![(x >> 32) as f64, (x & 0xffff_ffff) as f64]).unwrap()
}

pub(crate) fn tensor_u64(name: &str, t: &Tensor) -> Result<u64> {
    let half = |x: f64| -> Result<u64> {
        if x >= 0.0 && x <= u32::MAX as f64 && x.fract() == 0.0 {
            Ok(x as u64)
        } else {
            Err(bad(format!("{name}: not a 32-bit half: {x}")))
        }
    };
    match t.data() {
        [hi, lo] if t.shape() == [2] => Ok(half(*hi)? << 32 | half(*lo)?),
        _ => Err(bad(format!("{name}: expected a two-element integer tensor"))),
    }
}

/// Named lookup over decoded entries, consuming them in order of request.
pub(crate) struct Entries {
    items: Vec<Option<(String, Tensor)>>,
}

impl Entries {
    pub(crate) fn new(items: Vec<(String, Tensor)>) -> Result<Self> {
        for (i, (n, _)) in items.iter().enumerate() {
            if items[..i].iter().any(|(m, _)| m == n) {
                return Err(bad(format!("duplicate tensor {n}")));
            }
        }
        Ok(Entries {
            items: items.into_iter().map(Some).collect(),
        })
    }

    pub(crate) fn take(&mut self, name: &str) -> Result<Tensor> {
        self.items
            .iter_mut()
            .find(|e| e.as_ref().is_some_and(|(n, _)| n == name))
            .and_then(|e| e.take())
            .map(|(_, t)| t)
            .ok_or_else(|| bad(format!("missing tensor {name}")))
    }

    pub(crate) fn take_u64(&mut self, name: &str) -> Result<u64> {
        let t = self.take(name)?;
        tensor_u64(name, &t)
    }

    pub(crate) fn finish(self) -> Result<()> {
        match self.items.into_iter().flatten().next() {
            Some((n, _)) => Err(bad(format!("unexpected tensor {n}"))),
            None => Ok(()),
        }
    }
}
