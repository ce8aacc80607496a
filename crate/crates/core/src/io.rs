//! Binary checkpoint format and the raw tensor fixture format.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "LAUG" | u16 major | u16 minor | u8 kind
//! u32 len | spec echo (UTF-8 kv text)
//! u32 len | metadata (UTF-8 kv text)
//! u32 count, then per tensor:
//!     u16 len | name | u8 ndim | u32 dims[ndim] | f32 data[product(dims)]
//! ```
//!
//! Raw tensor file: `"LTEN" | u8 ndim | u32 dims[ndim] | f32 data`.

use std::fmt;
use std::path::Path;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LAUG";
pub const TENSOR_MAGIC: &[u8; 4] = b"LTEN";
pub const VERSION_MAJOR: u16 = 1;
pub const VERSION_MINOR: u16 = 0;

/// Upper bound on a decoded dimension list, to keep malformed headers
/// from allocating absurd buffers.
const MAX_NDIM: u8 = 8;
const MAX_ELEMENTS: u64 = 1 << 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Aae = 1,
    Dynamics = 2,
    Cgan = 3,
    Unified = 4,
}

impl ModelKind {
    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => ModelKind::Aae,
            2 => ModelKind::Dynamics,
            3 => ModelKind::Cgan,
            4 => ModelKind::Unified,
            _ => return None,
        })
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Aae => "aae",
            ModelKind::Dynamics => "dynamics",
            ModelKind::Cgan => "cgan",
            ModelKind::Unified => "unified",
        })
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {major}.{minor} (this build reads {VERSION_MAJOR}.x)")]
    UnsupportedVersion { major: u16, minor: u16 },
    #[error("truncated {what}: needed {needed} bytes, {available} left")]
    Truncated { what: &'static str, needed: u64, available: usize },
    #[error("checkpoint holds a {found} model, expected {expected}")]
    KindMismatch { expected: ModelKind, found: ModelKind },
    #[error("malformed {0}")]
    Malformed(String),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub minor: u16,
    /// Network spec in kv text form.
    pub spec: String,
    /// Free-form kv text: hyper-parameters, provenance.
    pub meta: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: ModelKind, spec: String, meta: String) -> Self {
        Checkpoint {
            kind,
            minor: VERSION_MINOR,
            spec,
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    /// Appends every entry of `params` under `prefix.`.
    pub fn push_params(&mut self, prefix: &str, params: &crate::params::NetworkParams<f32>) {
        for (name, t) in params.iter() {
            self.push(format!("{prefix}.{name}"), t.clone());
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fills `params` from entries named `prefix.<param>`; every parameter
    /// must be present with matching shape.
    pub fn load_params(&self, prefix: &str, params: &mut crate::params::NetworkParams<f32>) -> crate::Result<()> {
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let full = format!("{prefix}.{name}");
            let t = self
                .tensor(&full)
                .ok_or_else(|| FormatError::Malformed(format!("checkpoint lacks tensor `{full}`")))?;
            params.set(&name, t.clone())?;
        }
        Ok(())
    }

    /// Fails unless the stored tensors hold at least `needed` values, so a
    /// crafted spec cannot make a loader allocate far beyond the file size.
    pub fn ensure_holds(&self, needed: usize) -> Result<(), FormatError> {
        let stored: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        if stored < needed {
            return Err(FormatError::Malformed(format!(
                "spec needs {needed} parameters, checkpoint stores {stored}"
            )));
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<(), FormatError> {
        if self.kind != kind {
            return Err(FormatError::KindMismatch {
                expected: kind,
                found: self.kind,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION_MAJOR.to_le_bytes());
        out.extend_from_slice(&self.minor.to_le_bytes());
        out.push(self.kind as u8);
        for text in [&self.spec, &self.meta] {
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor_body(&mut out, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { buf: bytes };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let major = r.u16("version")?;
        let minor = r.u16("version")?;
        if major != VERSION_MAJOR {
            return Err(FormatError::UnsupportedVersion { major, minor });
        }
        let tag = r.u8("kind")?;
        let kind = ModelKind::from_tag(tag).ok_or_else(|| FormatError::Malformed(format!("model kind tag {tag}")))?;
        let spec = r.string32("spec")?;
        let meta = r.string32("metadata")?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u16("tensor name")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| FormatError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            if tensors.iter().any(|(n, _)| n == &name) {
                return Err(FormatError::Malformed(format!("duplicate tensor `{name}`")));
            }
            let t = read_tensor_body(&mut r)?;
            tensors.push((name, t));
        }
        if !r.buf.is_empty() {
            return Err(FormatError::TrailingBytes(r.buf.len()));
        }
        Ok(Checkpoint {
            kind,
            minor,
            spec,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }
}

fn write_tensor_body(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor_body(r: &mut Reader<'_>) -> Result<Tensor<f32>, FormatError> {
    let ndim = r.u8("tensor rank")?;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(FormatError::Malformed(format!("tensor rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    let mut n: u64 = 1;
    for _ in 0..ndim {
        let d = r.u32("tensor shape")?;
        if d == 0 {
            return Err(FormatError::Malformed("zero tensor dimension".into()));
        }
        n = n.saturating_mul(d as u64);
        shape.push(d as usize);
    }
    if n > MAX_ELEMENTS {
        return Err(FormatError::Malformed(format!("tensor of {n} elements")));
    }
    let needed = n * 4;
    if (r.buf.len() as u64) < needed {
        return Err(FormatError::Truncated {
            what: "tensor payload",
            needed,
            available: r.buf.len(),
        });
    }
    let raw = r.take(needed as usize, "tensor payload")?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(&shape, data).map_err(|e| FormatError::Malformed(e.to_string()))
}

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = TENSOR_MAGIC.to_vec();
    write_tensor_body(&mut out, t);
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>, FormatError> {
    let mut r = Reader { buf: bytes };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if &magic != TENSOR_MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let t = read_tensor_body(&mut r)?;
    if !r.buf.is_empty() {
        return Err(FormatError::TrailingBytes(r.buf.len()));
    }
    Ok(t)
}

pub fn save_tensor(path: &Path, t: &Tensor<f32>) -> crate::Result<()> {
    std::fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> crate::Result<Tensor<f32>> {
    Ok(decode_tensor(&std::fs::read(path)?)?)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() < n {
            return Err(FormatError::Truncated {
                what,
                needed: n as u64,
                available: self.buf.len(),
            });
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string32(&mut self, what: &'static str) -> Result<String, FormatError> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| FormatError::Malformed(format!("{what} is not UTF-8")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(ModelKind::Aae, "[network]\nlatent_dim = 4\n".into(), "steps = 3\n".into());
        c.push(
            "a.weight",
            Tensor::new(&[2, 3], vec![1.0, -2.5, f32::MIN_POSITIVE, 0.0, -0.0, 7e30]).unwrap(),
        );
        c.push("b", Tensor::scalar(f32::from_bits(0x3f80_0001)));
        c
    }

    fn bits(c: &Checkpoint) -> Vec<Vec<u32>> {
        c.tensors
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.spec, c.spec);
        assert_eq!(back.meta, c.meta);
        assert_eq!(bits(&back), bits(&c));
        assert_eq!(back, c);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, FormatError::Truncated { .. }), "cut {cut}: {err:?}");
        }
    }

    #[test]
    fn distinct_header_errors() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(FormatError::BadMagic(_))));

        let mut bytes = sample().to_bytes();
        bytes[4..6].copy_from_slice(&2u16.to_le_bytes());
        assert_eq!(
            Checkpoint::from_bytes(&bytes),
            Err(FormatError::UnsupportedVersion { major: 2, minor: 0 })
        );

        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert_eq!(Checkpoint::from_bytes(&bytes), Err(FormatError::TrailingBytes(1)));
    }

    #[test]
    fn later_minor_versions_load() {
        let mut bytes = sample().to_bytes();
        bytes[6..8].copy_from_slice(&7u16.to_le_bytes());
        let c = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(c.minor, 7);
        assert_eq!(bits(&c), bits(&sample()));
    }

    #[test]
    fn kind_is_checked() {
        let c = sample();
        assert!(c.expect_kind(ModelKind::Aae).is_ok());
        assert_eq!(
            c.expect_kind(ModelKind::Cgan),
            Err(FormatError::KindMismatch {
                expected: ModelKind::Cgan,
                found: ModelKind::Aae
            })
        );
    }

    #[test]
    fn raw_tensor_roundtrip_and_errors() {
        let t = Tensor::new(&[1, 2, 2], vec![0.5, -1.0, 3.25, f32::MAX]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(decode_tensor(&bytes).unwrap(), t);
        assert!(matches!(
            decode_tensor(&bytes[..bytes.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
        assert!(matches!(decode_tensor(b"LTEN\x00"), Err(FormatError::Malformed(_))));
        assert!(matches!(decode_tensor(b"LTEN\x01\x00\x00\x00\x00"), Err(FormatError::Malformed(_))));
        // 2^16 x 2^16 elements declared with no payload
        let huge = [b"LTEN\x02".as_slice(), &[0, 0, 1, 0], &[0, 0, 1, 0]].concat();
        assert!(decode_tensor(&huge).is_err());
    }
}
