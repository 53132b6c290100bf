//! Dense row-major tensors of `f64` and the on-disk blob format.
//!
//! `Tensor` is the universal value carrier: feature vectors, parameter
//! matrices, convolution kernels, gradients. It is a plain value type —
//! gradient bookkeeping lives on the [`crate::tape::Tape`], not here.
//!
//! The blob format is a one-line ASCII header followed by raw
//! little-endian 64-bit floats:
//!
//! ```text
//! TENSOR v1 <rank> <extent-1> ... <extent-rank>\n
//! <len * 8 bytes of f64, row-major>
//! ```
//!
//! [`Tensor::parse_blob`] validates the header against the actual byte
//! count before touching the payload, so it is safe on untrusted input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest rank the blob format (and this crate) supports.
pub const MAX_RANK: usize = 8;

const BLOB_MAGIC: &str = "TENSOR";
const BLOB_VERSION: &str = "v1";
/// Headers are short; anything longer is malformed.
const MAX_HEADER_LEN: usize = 256;

/// Dense multi-dimensional array of `f64`, row-major.
///
/// Rank 0 (empty shape) is a scalar with exactly one element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Untrusted wire form; `TryFrom` enforces the shape/data invariant.
#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = String;

    fn try_from(raw: RawTensor) -> std::result::Result<Self, String> {
        let len = checked_len(&raw.shape).map_err(|e| e.to_string())?;
        if len != raw.data.len() {
            return Err(format!(
                "shape {:?} implies {len} elements, got {}",
                raw.shape,
                raw.data.len()
            ));
        }
        if raw.data.iter().any(|v| !v.is_finite()) {
            return Err("non-finite value in tensor data".into());
        }
        Ok(Tensor {
            shape: raw.shape,
            data: raw.data,
        })
    }
}

/// Element count implied by a shape, rejecting zero extents, excessive
/// rank, and products that overflow.
fn checked_len(shape: &[usize]) -> Result<usize> {
    if shape.len() > MAX_RANK {
        return Err(Error::invalid(
            "tensor",
            format!("rank {} exceeds maximum {MAX_RANK}", shape.len()),
        ));
    }
    let mut len: usize = 1;
    for &e in shape {
        if e == 0 {
            return Err(Error::invalid("tensor", "zero extent in shape"));
        }
        len = len
            .checked_mul(e)
            .ok_or_else(|| Error::invalid("tensor", "shape product overflows"))?;
    }
    Ok(len)
}

impl Tensor {
    /// Tensor of zeros with the given shape.
    pub fn zeros(shape: &[usize]) -> Tensor {
        let len = checked_len(shape).expect("invalid shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Tensor with every element set to `value`.
    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let len = checked_len(shape).expect("invalid shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Build from explicit data; the length must match the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let len = checked_len(shape)?;
        if len != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} implies {len} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // zero extents are rejected at construction
    }

    /// True for single-element tensors (any rank); these broadcast.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, value: f64) {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        self.data[r * cols + c] = value;
    }

    /// New tensor with `f` applied elementwise.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let len = checked_len(shape)?;
        if len != self.data.len() {
            return Err(Error::shapes("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Serialize to the blob wire format.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut header = format!("{BLOB_MAGIC} {BLOB_VERSION} {}", self.rank());
        for e in &self.shape {
            header.push_str(&format!(" {e}"));
        }
        header.push('\n');
        let mut out = header.into_bytes();
        out.reserve(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parse a complete blob. The payload length must match the header
    /// exactly; lengths are validated before any allocation sized from
    /// header fields, so arbitrary input cannot trigger huge allocations.
    pub fn parse_blob(bytes: &[u8]) -> Result<Tensor> {
        let nl = bytes
            .iter()
            .take(MAX_HEADER_LEN)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::invalid("tensor blob", "missing header line"))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::invalid("tensor blob", "header is not UTF-8"))?;
        let mut tok = header.split(' ');
        if tok.next() != Some(BLOB_MAGIC) {
            return Err(Error::invalid("tensor blob", "bad magic"));
        }
        if tok.next() != Some(BLOB_VERSION) {
            return Err(Error::invalid("tensor blob", "unsupported version"));
        }
        let rank: usize = tok
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::invalid("tensor blob", "missing rank"))?;
        if rank > MAX_RANK {
            return Err(Error::invalid(
                "tensor blob",
                format!("rank {rank} exceeds maximum {MAX_RANK}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e: usize = tok
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::invalid("tensor blob", "missing extent"))?;
            shape.push(e);
        }
        if tok.next().is_some() {
            return Err(Error::invalid("tensor blob", "trailing header tokens"));
        }
        let len = checked_len(&shape)?;
        let payload = &bytes[nl + 1..];
        let expected = len
            .checked_mul(8)
            .ok_or_else(|| Error::invalid("tensor blob", "payload size overflows"))?;
        if payload.len() != expected {
            return Err(Error::invalid(
                "tensor blob",
                format!("payload is {} bytes, header implies {expected}", payload.len()),
            ));
        }
        let mut data = Vec::with_capacity(len);
        for chunk in payload.chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::invalid("tensor blob", "non-finite value"));
            }
            data.push(v);
        }
        Ok(Tensor { shape, data })
    }

    /// Write the blob to a file.
    pub fn save_blob(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_blob())?;
        Ok(())
    }

    /// Read a blob file.
    pub fn load_blob(path: &std::path::Path) -> Result<Tensor> {
        let bytes = std::fs::read(path)?;
        Tensor::parse_blob(&bytes).map_err(|e| Error::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

/// One standard-normal draw (Box–Muller, cosine branch).
///
/// Implemented here rather than pulled from a distributions crate so the
/// exact sample sequence is pinned by this crate alone — checkpoints and
/// datasets must reproduce bit-exactly across toolchain updates.
pub fn standard_normal(rng: &mut impl rand::Rng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Tensor of i.i.d. standard-normal draws.
pub fn randn(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
    let len = checked_len(shape).expect("invalid shape");
    Tensor {
        shape: shape.to_vec(),
        data: (0..len).map(|_| standard_normal(rng)).collect(),
    }
}

/// Glorot-uniform initialization: uniform in ±√(6 / (fan_in + fan_out)).
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl rand::Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len = checked_len(shape).expect("invalid shape");
    Tensor {
        shape: shape.to_vec(),
        data: (0..len).map(|_| rng.random_range(-limit..=limit)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blob_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = randn(&[3, 4, 2], &mut rng);
        let back = Tensor::parse_blob(&t.to_blob()).unwrap();
        assert_eq!(t, back);
        // Bit-exactness, not just value equality.
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn blob_scalar_round_trip() {
        let t = Tensor::scalar(-0.0);
        let back = Tensor::parse_blob(&t.to_blob()).unwrap();
        assert_eq!(back.item().to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn blob_rejects_bad_input() {
        assert!(Tensor::parse_blob(b"").is_err());
        assert!(Tensor::parse_blob(b"TENSOR v1 1 3\n").is_err()); // missing payload
        assert!(Tensor::parse_blob(b"TENSOR v2 0\n").is_err()); // bad version
        assert!(Tensor::parse_blob(b"BLOB v1 0\n").is_err()); // bad magic
        assert!(Tensor::parse_blob(b"TENSOR v1 1 0\n").is_err()); // zero extent
        assert!(Tensor::parse_blob(b"TENSOR v1 2 3\n").is_err()); // missing extent
        // huge claimed extent must fail on length check, not allocate
        assert!(Tensor::parse_blob(b"TENSOR v1 2 99999999 99999999\nxx").is_err());
        // trailing bytes after the payload
        let mut blob = Tensor::scalar(1.0).to_blob();
        blob.push(0);
        assert!(Tensor::parse_blob(&blob).is_err());
        // non-finite payload
        let mut blob = format!("{BLOB_MAGIC} {BLOB_VERSION} 0\n").into_bytes();
        blob.extend_from_slice(&f64::NAN.to_le_bytes());
        assert!(Tensor::parse_blob(&blob).is_err());
    }

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 4]).is_ok());
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(&[0], vec![]).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = randn(&[5], &mut rng);
        let json = serde_json::to_string(&t).unwrap();
        let back: Tensor = serde_json::from_str(&json).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn json_rejects_mismatched_shape() {
        let r: std::result::Result<Tensor, _> =
            serde_json::from_str(r#"{"shape":[3],"data":[1.0,2.0]}"#);
        assert!(r.is_err());
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at2(1, 2), 5.0);
    }

    #[test]
    fn normal_draws_are_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        let x = randn(&[16], &mut a);
        let y = randn(&[16], &mut b);
        assert_eq!(x, y);
    }
}
