//! Layer-structured flat parameter vectors.
//!
//! A [`ParamVector`] is the unit every other module trades in: client
//! uploads, the global model, attack outputs and aggregation results. The
//! values live in one contiguous `f64` buffer; a shared table of
//! [`LayerShape`]s records which slice belongs to which layer.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named contiguous slice of a flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl LayerShape {
    pub fn new(name: impl Into<String>, offset: usize, len: usize) -> Self {
        Self {
            name: name.into(),
            offset,
            len,
        }
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Builds a contiguous layer table from `(name, len)` pairs.
pub fn layout<S: Into<String>>(layers: impl IntoIterator<Item = (S, usize)>) -> Arc<[LayerShape]> {
    let mut offset = 0;
    layers
        .into_iter()
        .map(|(name, len)| {
            let shape = LayerShape::new(name, offset, len);
            offset += len;
            shape
        })
        .collect()
}

fn check_layout(shapes: &[LayerShape], dim: usize) -> Result<()> {
    let mut expected = 0;
    for s in shapes {
        if s.offset != expected {
            return Err(Error::Shape(format!(
                "layer `{}` starts at {} but previous layers end at {}",
                s.name, s.offset, expected
            )));
        }
        expected += s.len;
    }
    if expected != dim {
        return Err(Error::Shape(format!(
            "layer table covers {expected} scalars, buffer holds {dim}"
        )));
    }
    Ok(())
}

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Flat model parameters with their layer table.
///
/// Immutable once built; every arithmetic operation returns a new vector.
#[derive(Debug, Clone)]
pub struct ParamVector {
    values: Vec<f64>,
    shapes: Arc<[LayerShape]>,
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        self.same_shape(other) && self.values == other.values
    }
}

impl ParamVector {
    /// Wraps `values` with a layer table, validating layout and finiteness.
    pub fn new(values: Vec<f64>, shapes: Arc<[LayerShape]>) -> Result<Self> {
        check_layout(&shapes, values.len())?;
        check_finite(&values, "parameter vector")?;
        Ok(Self { values, shapes })
    }

    /// A single-layer vector named `flat`.
    pub fn from_flat(values: Vec<f64>) -> Result<Self> {
        let len = values.len();
        Self::new(values, layout([("flat", len)]))
    }

    pub fn zeros(shapes: Arc<[LayerShape]>) -> Self {
        let dim = shapes.iter().map(|s| s.len).sum();
        Self {
            values: vec![0.0; dim],
            shapes,
        }
    }

    /// Same layer table, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, Arc::clone(&self.shapes))
    }

    /// Internal constructor for values already known to be finite and sized.
    pub(crate) fn from_parts_unchecked(values: Vec<f64>, shapes: Arc<[LayerShape]>) -> Self {
        debug_assert!(check_layout(&shapes, values.len()).is_ok());
        Self { values, shapes }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn shapes(&self) -> &Arc<[LayerShape]> {
        &self.shapes
    }

    /// Iterates `(shape, values)` per layer.
    pub fn layers(&self) -> impl Iterator<Item = (&LayerShape, &[f64])> {
        self.shapes.iter().map(|s| (s, &self.values[s.range()]))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.shapes, &other.shapes) || self.shapes == other.shapes
    }

    fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "cannot combine vectors of dimension {} and {} with different layer tables",
                self.dim(),
                other.dim()
            )))
        }
    }

    fn finish(&self, values: Vec<f64>, what: &'static str) -> Result<Self> {
        check_finite(&values, what)?;
        Ok(Self::from_parts_unchecked(values, Arc::clone(&self.shapes)))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.ensure_same_shape(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        self.finish(values, "add")
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.ensure_same_shape(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        self.finish(values, "sub")
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        if !s.is_finite() {
            return Err(Error::NonFinite("scale factor"));
        }
        let values = self.values.iter().map(|a| a * s).collect();
        self.finish(values, "scale")
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn squared_distance(&self, other: &Self) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(squared_distance(&self.values, &other.values))
    }

    pub fn distance(&self, other: &Self) -> Result<f64> {
        self.squared_distance(other).map(f64::sqrt)
    }

    /// Rescales so the L2 norm is at most `c`; vectors already inside the
    /// ball are returned unchanged.
    pub fn clip_norm(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::usage(format!("clip bound must be positive, got {c}")));
        }
        let mut values = self.values.clone();
        clip_in_place(&mut values, c);
        Ok(Self::from_parts_unchecked(values, Arc::clone(&self.shapes)))
    }

    /// Coordinate-wise arithmetic mean, summed left to right in slice order.
    pub fn mean(vs: &[ParamVector]) -> Result<Self> {
        let refs: Vec<&ParamVector> = vs.iter().collect();
        Self::mean_of(&refs)
    }

    pub fn mean_of(vs: &[&ParamVector]) -> Result<Self> {
        let (first, rest) = vs
            .split_first()
            .ok_or_else(|| Error::usage("mean of an empty list of vectors"))?;
        let mut acc = first.values.clone();
        for v in rest {
            first.ensure_same_shape(v)?;
            for (a, b) in acc.iter_mut().zip(&v.values) {
                *a += b;
            }
        }
        let n = vs.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        first.finish(acc, "mean")
    }

    /// Serializes to the binary container: a shape table followed by the
    /// values as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.shapes.len() * 32 + self.dim() * 8);
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shapes.len() as u32).to_le_bytes());
        for s in self.shapes.iter() {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.offset as u64).to_le_bytes());
            out.extend_from_slice(&(s.len as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CONTAINER_MAGIC {
            return Err(r.error("bad magic"));
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(r.error(&format!("unsupported container version {version}")));
        }
        let n_layers = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.error("layer name is not UTF-8"))?
                .to_owned();
            let offset = r.u64()? as usize;
            let len = r.u64()? as usize;
            shapes.push(LayerShape { name, offset, len });
        }
        let dim = r.u64()? as usize;
        let raw = r.take(dim.checked_mul(8).ok_or_else(|| r.error("dimension overflow"))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes after values"));
        }
        Self::new(values, shapes.into())
    }
}

const CONTAINER_MAGIC: &[u8; 4] = b"LDPV";
const CONTAINER_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn error(&self, message: &str) -> Error {
        Error::Ingestion {
            path: "<parameter container>".into(),
            offset: self.pos as u64,
            message: message.to_owned(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error("truncated container")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// In-place `v / max(1, ||v|| / c)`. Guarantees `||v|| <= c` afterwards even
/// when the division rounds up.
pub(crate) fn clip_in_place(v: &mut [f64], c: f64) {
    let norm = l2_norm(v);
    if norm <= c {
        return;
    }
    let factor = c / norm;
    for x in v.iter_mut() {
        *x *= factor;
    }
    while l2_norm(v) > c {
        for x in v.iter_mut() {
            *x *= 1.0 - f64::EPSILON;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_flat(v.to_vec()).unwrap()
    }

    #[test]
    fn clip_norm_examples() {
        assert_eq!(pv(&[3.0, 4.0]).clip_norm(5.0).unwrap().values(), &[3.0, 4.0]);
        let clipped = pv(&[3.0, 4.0]).clip_norm(1.0).unwrap();
        assert!((clipped.values()[0] - 0.6).abs() < 1e-15);
        assert!((clipped.values()[1] - 0.8).abs() < 1e-15);
        assert!(clipped.l2_norm() <= 1.0);
        assert_eq!(pv(&[0.0, 0.0, 0.0]).l2_norm(), 0.0);
    }

    #[test]
    fn clip_norm_rejects_nonpositive_bound() {
        assert!(matches!(pv(&[1.0]).clip_norm(0.0), Err(Error::Usage(_))));
        assert!(matches!(pv(&[1.0]).clip_norm(-1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn mean_examples() {
        let m = ParamVector::mean(&[pv(&[0.0, 0.0]), pv(&[2.0, 4.0])]).unwrap();
        assert_eq!(m.values(), &[1.0, 2.0]);
        let v = pv(&[0.1, -7.25, 3.0]);
        assert_eq!(ParamVector::mean(std::slice::from_ref(&v)).unwrap(), v);
        assert!(matches!(ParamVector::mean(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn mean_matches_per_coordinate_loop() {
        let vs = [
            [0.3, -1.2, 5.5],
            [2.25, 0.125, -3.0],
            [-0.7, 9.1, 0.01],
            [1.0, 1.0, 1.0],
        ];
        let params: Vec<_> = vs.iter().map(|v| pv(v)).collect();
        let m = ParamVector::mean(&params).unwrap();
        for j in 0..3 {
            let mut s = 0.0;
            for v in &vs {
                s += v[j];
            }
            assert_eq!(m.values()[j], s / 4.0);
        }
    }

    #[test]
    fn shape_mismatch_is_structural_error() {
        let a = pv(&[1.0, 2.0]);
        let b = ParamVector::new(vec![1.0, 2.0], layout([("w", 1), ("b", 1)])).unwrap();
        assert!(matches!(a.add(&b), Err(Error::Shape(_))));
        assert!(matches!(a.add(&pv(&[1.0])), Err(Error::Shape(_))));
        assert!(matches!(ParamVector::mean(&[a, b]), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_is_numeric_error() {
        assert!(matches!(ParamVector::from_flat(vec![f64::NAN]), Err(Error::NonFinite(_))));
        let big = pv(&[f64::MAX]);
        assert!(matches!(big.add(&big), Err(Error::NonFinite(_))));
        assert!(matches!(big.scale(f64::INFINITY), Err(Error::NonFinite(_))));
    }

    #[test]
    fn bad_layout_rejected() {
        let gap = vec![LayerShape::new("a", 0, 1), LayerShape::new("b", 2, 1)];
        assert!(ParamVector::new(vec![0.0; 3], gap.into()).is_err());
        assert!(ParamVector::new(vec![0.0; 3], layout([("a", 2)])).is_err());
    }

    #[test]
    fn container_round_trip_and_errors() {
        let v = ParamVector::new(vec![1.5, -2.0, 0.25], layout([("weight", 2), ("bias", 1)])).unwrap();
        let bytes = v.to_bytes();
        assert_eq!(ParamVector::from_bytes(&bytes).unwrap(), v);
        assert!(ParamVector::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamVector::from_bytes(&bad).is_err());
    }

    #[test]
    fn container_layout_is_little_endian_with_shape_table() {
        let v = ParamVector::new(vec![1.0], layout([("b", 1)])).unwrap();
        let bytes = v.to_bytes();
        let mut expected = b"LDPV".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'b');
        expected.extend_from_slice(&0u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }
}
