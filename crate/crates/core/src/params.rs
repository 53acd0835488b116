//! Flat parameter vectors with named segment layouts.
//!
//! Model parameters and their gradients live in the same flat representation
//! so optimizers and estimators can treat them uniformly. The layout (segment
//! names, lengths, offsets) is fixed at construction and shared by reference;
//! a gradient produced for a model always carries the model's own layout.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("value length {got} does not match layout length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at index {index}: {value}")]
    NonFinite { index: usize, value: f64 },
    #[error("layout mismatch between parameter vectors")]
    LayoutMismatch,
    #[error("unknown segment {0:?}")]
    UnknownSegment(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub len: usize,
    pub offset: usize,
}

/// Immutable description of how a flat vector splits into named segments.
#[derive(Debug, PartialEq, Eq)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    total_len: usize,
}

impl ParamLayout {
    pub fn new(spec: &[(&str, usize)]) -> Arc<Self> {
        let mut segments = Vec::with_capacity(spec.len());
        let mut offset = 0;
        for (name, len) in spec {
            segments.push(Segment {
                name: (*name).to_string(),
                len: *len,
                offset,
            });
            offset += len;
        }
        Arc::new(ParamLayout {
            segments,
            total_len: offset,
        })
    }

    /// Layout with no parameters, for fixed (non-trainable) distributions.
    pub fn empty() -> Arc<Self> {
        Self::new(&[])
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// FNV-1a hash of the segment spec; stored in checkpoints to reject
    /// parameter files from a different architecture.
    pub fn spec_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for s in &self.segments {
            eat(s.name.as_bytes());
            eat(&(s.len as u64).to_le_bytes());
        }
        h
    }
}

/// A flat `f64` vector tied to a [`ParamLayout`].
#[derive(Clone)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.total_len()];
        ParamVector { layout, values }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self, ParamError> {
        if values.len() != layout.total_len() {
            return Err(ParamError::LengthMismatch {
                expected: layout.total_len(),
                got: values.len(),
            });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(ParamError::NonFinite { index, value });
        }
        Ok(ParamVector { layout, values })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segment(&self, name: &str) -> Result<&[f64], ParamError> {
        let s = self
            .layout
            .segment(name)
            .ok_or_else(|| ParamError::UnknownSegment(name.to_string()))?;
        Ok(&self.values[s.offset..s.offset + s.len])
    }

    pub fn segment_mut(&mut self, name: &str) -> Result<&mut [f64], ParamError> {
        let s = self
            .layout
            .segment(name)
            .cloned()
            .ok_or_else(|| ParamError::UnknownSegment(name.to_string()))?;
        Ok(&mut self.values[s.offset..s.offset + s.len])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    fn check_layout(&self, other: &ParamVector) -> Result<(), ParamError> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(ParamError::LayoutMismatch)
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &ParamVector, c: f64) -> Result<(), ParamError> {
        self.check_layout(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for a in &mut self.values {
            *a *= c;
        }
    }

    pub fn scaled(&self, c: f64) -> ParamVector {
        let mut out = self.clone();
        out.scale(c);
        out
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64, ParamError> {
        self.check_layout(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f64, ParamError> {
        self.check_layout(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

impl fmt::Debug for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ParamVector(len={}, segs=[", self.values.len())?;
        for (i, s) in self.layout.segments().iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{}:{}", s.name, s.len)?;
        }
        write!(f, "])")
    }
}

/// Mean of a non-empty slice of vectors sharing one layout.
pub fn mean_of(vectors: &[ParamVector]) -> Result<ParamVector, ParamError> {
    let first = vectors.first().ok_or(ParamError::LengthMismatch {
        expected: 1,
        got: 0,
    })?;
    let mut acc = ParamVector::zeros(Arc::clone(first.layout()));
    for v in vectors {
        acc.add_scaled(v, 1.0)?;
    }
    acc.scale(1.0 / vectors.len() as f64);
    Ok(acc)
}
