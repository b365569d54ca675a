//! Cosine similarity between descriptors.
//!
//! All accumulation happens in `f64` as a left-to-right fold over the
//! components, so a score is bit-identical no matter which path (scalar,
//! batch, cached norms, any thread count) computed it.

use rayon::prelude::*;

use crate::error::{Result, VprError};
use crate::store::Descriptor;

/// A cosine similarity clamped to `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub const MIN: SimilarityScore = SimilarityScore(-1.0);
    pub const MAX: SimilarityScore = SimilarityScore(1.0);

    fn from_raw(raw: f64) -> Self {
        debug_assert!(raw.abs() <= 1.0 + 1e-9, "cosine out of range: {raw}");
        SimilarityScore(raw.clamp(-1.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl From<SimilarityScore> for f64 {
    fn from(s: SimilarityScore) -> f64 {
        s.0
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + x as f64 * y as f64)
}

#[inline]
pub(crate) fn sq_norm(a: &[f32]) -> f64 {
    dot(a, a)
}

/// `dot / sqrt(|a|^2 |b|^2)`: one square root keeps `cosine(v, v)` exactly 1.
#[inline]
fn cosine_with_norms(a: &[f32], sq_a: f64, b: &[f32], sq_b: f64) -> SimilarityScore {
    SimilarityScore::from_raw(dot(a, b) / (sq_a * sq_b).sqrt())
}

fn check_dims(a: &Descriptor, b: &Descriptor) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(VprError::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(())
}

/// Cosine similarity of two descriptors. A zero-norm operand is an error
/// (`index` 0 for `a`, 1 for `b`).
pub fn cosine(a: &Descriptor, b: &Descriptor) -> Result<SimilarityScore> {
    check_dims(a, b)?;
    let sq_a = sq_norm(a.values());
    if sq_a == 0.0 {
        return Err(VprError::ZeroNorm { index: 0 });
    }
    let sq_b = sq_norm(b.values());
    if sq_b == 0.0 {
        return Err(VprError::ZeroNorm { index: 1 });
    }
    Ok(cosine_with_norms(a.values(), sq_a, b.values(), sq_b))
}

/// Similarity of `query` to every descriptor in `db`, in order.
///
/// A zero-norm database row reports its index; a zero-norm query reports
/// `ZeroNormQuery`.
pub fn similarity_row(query: &Descriptor, db: &[Descriptor]) -> Result<Vec<SimilarityScore>> {
    if db.is_empty() {
        return Err(VprError::EmptyDatabase);
    }
    let sq_q = sq_norm(query.values());
    if sq_q == 0.0 {
        return Err(VprError::ZeroNormQuery);
    }
    db.par_iter()
        .enumerate()
        .map(|(index, d)| {
            check_dims(query, d)?;
            let sq_d = sq_norm(d.values());
            if sq_d == 0.0 {
                return Err(VprError::ZeroNorm { index });
            }
            Ok(cosine_with_norms(query.values(), sq_q, d.values(), sq_d))
        })
        .collect()
}

/// Descriptors with their squared norms precomputed, for repeated lookups by index.
#[derive(Debug, Clone)]
pub struct NormCache<'a> {
    descriptors: &'a [Descriptor],
    sq_norms: Vec<f64>,
}

impl<'a> NormCache<'a> {
    /// Fails if dims differ or any descriptor has zero norm.
    pub fn new(descriptors: &'a [Descriptor]) -> Result<Self> {
        let dim = descriptors.first().ok_or(VprError::EmptyDescriptors)?.dim();
        let sq_norms = descriptors
            .iter()
            .enumerate()
            .map(|(index, d)| {
                if d.dim() != dim {
                    return Err(VprError::DimMismatch {
                        expected: dim,
                        actual: d.dim(),
                    });
                }
                match sq_norm(d.values()) {
                    0.0 => Err(VprError::ZeroNorm { index }),
                    n => Ok(n),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            descriptors,
            sq_norms,
        })
    }

    pub fn dim(&self) -> usize {
        self.descriptors[0].dim()
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    /// Same value as `cosine(&d[i], &d[j])`, bit for bit.
    #[inline]
    pub fn cosine(&self, i: usize, j: usize) -> SimilarityScore {
        cosine_with_norms(
            self.descriptors[i].values(),
            self.sq_norms[i],
            self.descriptors[j].values(),
            self.sq_norms[j],
        )
    }

    /// Similarity of an external query (already known to be non-zero) to row `j`.
    #[inline]
    pub(crate) fn cosine_external(&self, query: &[f32], sq_q: f64, j: usize) -> SimilarityScore {
        cosine_with_norms(query, sq_q, self.descriptors[j].values(), self.sq_norms[j])
    }
}
