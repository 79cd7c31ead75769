//! Named trainable parameters and the checkpoint file format.
//!
//! A checkpoint is the magic `DTCK`, a little-endian `u32` version (1), then
//! one record per parameter until end of file:
//!
//! ```text
//! name_len: u64 | name: [u8; name_len] | rank: u64 | dims: [u64; rank] | data: [f64; prod(dims)]
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns the parameters of one network. Gradients recorded on a [`crate::Tape`]
/// are routed back to the store that bound them.
#[derive(Clone, Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Parameter>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed), params: Vec::new() }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return contract(format!("duplicate parameter name {name:?}"));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        self.params[id.0].grad.add_assign(grad);
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to a Vec cannot fail");
        hex::encode(Sha256::digest(&buf))
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        write_records(w, self.params.iter().map(|p| (p.name.as_str(), &p.value)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Overwrites every parameter with the same-named record of `records`.
    /// Records not belonging to this store are ignored; a missing record or a
    /// shape mismatch is an error.
    pub fn load_from(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = records.iter().find(|(n, _)| *n == p.name).ok_or_else(|| {
                Error::Contract(format!("checkpoint has no parameter named {:?}", p.name))
            })?;
            if t.shape() != p.value.shape() {
                return contract(format!(
                    "parameter {:?} has shape {:?} but checkpoint holds {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                ));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

pub fn write_records<'a, W: Write>(
    w: &mut W,
    records: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub(crate) struct Cursor<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl Cursor<'_> {
    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!(
                    "truncated {what}: expected {n} bytes, found {}",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad checkpoint magic".into() });
    }
    let version = u32::from_le_bytes(c.take(4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        let start = c.pos as u64;
        let name_len = c.u64("name length")? as usize;
        let name = String::from_utf8(c.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::Format { offset: start, msg: "name is not UTF-8".into() })?;
        let rank = c.u64("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 8, "tensor data")?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Format { offset: start, msg: e.to_string() })?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    parse_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, -0.0]).unwrap())
            .unwrap();
        s.add("b", Tensor::scalar(f64::MAX)).unwrap();
        s
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = store();
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DTCK");
        let recs = parse_checkpoint(&buf).unwrap();
        let mut t = store();
        for p in t.iter_mut() {
            p.value.data_mut().fill(7.0);
        }
        t.load_from(&recs).unwrap();
        for (a, b) in s.iter().zip(t.iter()) {
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn record_layout_is_little_endian() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(1.0)).unwrap();
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        let mut expect = b"DTCK".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u64.to_le_bytes());
        expect.extend(b"w");
        expect.extend(1u64.to_le_bytes());
        expect.extend(1u64.to_le_bytes());
        expect.extend(1.0f64.to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn truncation_and_magic_are_reported() {
        let mut buf = Vec::new();
        store().write_checkpoint(&mut buf).unwrap();
        let err = parse_checkpoint(&buf[..buf.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        buf[0] = b'X';
        assert!(matches!(parse_checkpoint(&buf), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(s.add("b", Tensor::scalar(0.0)).is_err());
    }
}
