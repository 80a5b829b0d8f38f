//! Core domain types and their on-disk formats.
//!
//! Embedding sequences and center banks are stored in small little-endian
//! binary containers (`ESEQ`, `CBNK`) carrying a JSON header, audio as RIFF
//! WAVE, and annotations/detections as TSV.

mod annotations;
mod binary;
mod wav;

pub use annotations::{
    read_annotations, read_detections, write_annotations, write_detections, Annotation,
    AnnotationSet,
};
pub use binary::{
    read_center_bank, read_embedding_sequence, write_center_bank, write_embedding_sequence,
};
pub use wav::{read_wav, write_wav, WavEncoding};

use std::ops::Range;

use crate::error::{KwsError, Result};

/// Rows with a norm below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-8;

/// Tolerance on the unit-norm invariant.
pub const UNIT_NORM_TOL: f64 = 1e-5;

pub const SUPPORTED_SAMPLE_RATES: [u32; 5] = [8000, 16000, 22050, 44100, 48000];

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub(crate) fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// A time-indexed sequence of `D`-dimensional embeddings stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    data: Vec<f32>,
    dim: usize,
    hop_seconds: f64,
    label: Option<String>,
}

impl EmbeddingSequence {
    pub fn new(data: Vec<f32>, dim: usize, hop_seconds: f64, label: Option<String>) -> Result<Self> {
        if dim == 0 {
            return Err(KwsError::Parameter("embedding dimension must be >= 1".into()));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(KwsError::Format(format!(
                "payload of {} values does not form T >= 1 rows of dimension {dim}",
                data.len()
            )));
        }
        if !(hop_seconds.is_finite() && hop_seconds > 0.0) {
            return Err(KwsError::Parameter(format!(
                "frame hop must be positive, got {hop_seconds}"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(KwsError::Format(format!(
                "non-finite value in row {}",
                pos / dim
            )));
        }
        Ok(Self {
            data,
            dim,
            hop_seconds,
            label,
        })
    }

    pub fn from_rows<R: AsRef<[f32]>>(
        rows: &[R],
        hop_seconds: f64,
        label: Option<String>,
    ) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(KwsError::Format(format!(
                    "row {i} has {} values, expected {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(data, dim, hop_seconds, label)
    }

    /// Number of time steps `T`.
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop_seconds
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn with_label(mut self, label: Option<String>) -> Self {
        self.label = label;
        self
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn duration_seconds(&self) -> f64 {
        self.len() as f64 * self.hop_seconds
    }

    /// Largest Euclidean row norm.
    pub fn max_row_norm(&self) -> f64 {
        self.rows().map(norm).fold(0.0, f64::max)
    }

    /// True when every row has unit norm within [`UNIT_NORM_TOL`].
    pub fn is_unit_norm(&self) -> bool {
        self.rows().all(|r| (norm(r) - 1.0).abs() <= UNIT_NORM_TOL)
    }

    /// Builds a sequence with the same metadata from replacement rows.
    pub(crate) fn map_rows<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &[f32], &mut Vec<f32>) -> Result<()>,
    {
        let mut data = Vec::with_capacity(self.data.len());
        for (t, row) in self.rows().enumerate() {
            f(t, row, &mut data)?;
        }
        Self::new(data, self.dim, self.hop_seconds, self.label.clone())
    }

    /// Divides each row by its Euclidean norm.
    pub fn normalize_rows(&self) -> Result<Self> {
        self.map_rows(|t, row, out| {
            let n = norm(row);
            if n < ZERO_NORM {
                return Err(KwsError::DegenerateInput(format!(
                    "row {t} has zero norm and cannot be normalized"
                )));
            }
            out.extend(row.iter().map(|&v| (v as f64 / n) as f32));
            Ok(())
        })
    }
}

/// Trainable centers indexed by keyword class, positional class and cluster.
///
/// Centers are stored flat; the cell `(kw, pos)` owns the contiguous index
/// range `((kw * n_pos) + pos) * n_c .. + n_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    centers: Vec<f32>,
    dim: usize,
    n_pos: usize,
    n_c: usize,
    keyword_names: Vec<String>,
    warnings: Vec<String>,
}

impl CenterBank {
    /// Builds a bank, re-normalizing centers to unit norm.
    ///
    /// Centers whose norm deviated from 1 by more than `1e-3` are listed in
    /// [`CenterBank::warnings`].
    pub fn new(
        centers: Vec<f32>,
        dim: usize,
        n_pos: usize,
        n_c: usize,
        keyword_names: Vec<String>,
    ) -> Result<Self> {
        let n_kw = keyword_names.len();
        if dim == 0 || n_kw == 0 || n_pos == 0 || n_c == 0 {
            return Err(KwsError::Format(format!(
                "center bank needs d, n_kw, n_pos, n_c >= 1 (got d={dim}, n_kw={n_kw}, n_pos={n_pos}, n_c={n_c})"
            )));
        }
        let expected = n_kw * n_pos * n_c * dim;
        if centers.len() != expected {
            return Err(KwsError::Format(format!(
                "center bank payload has {} values, expected {expected} ({n_kw}x{n_pos}x{n_c} centers of dimension {dim})",
                centers.len()
            )));
        }
        let mut normalized = Vec::with_capacity(centers.len());
        let mut warnings = Vec::new();
        for (i, row) in centers.chunks_exact(dim).enumerate() {
            let n = norm(row);
            if !n.is_finite() || n < ZERO_NORM {
                return Err(KwsError::Format(format!("center {i} has zero or non-finite norm")));
            }
            if (n - 1.0).abs() > 1e-3 {
                warnings.push(format!("center {i} had norm {n:.6}; re-normalized"));
            }
            // rows already unit norm to f32 precision are kept bit-exact
            if (n - 1.0).abs() > 1e-6 {
                normalized.extend(row.iter().map(|&v| (v as f64 / n) as f32));
            } else {
                normalized.extend_from_slice(row);
            }
        }
        Ok(Self {
            centers: normalized,
            dim,
            n_pos,
            n_c,
            keyword_names,
            warnings,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_kw(&self) -> usize {
        self.keyword_names.len()
    }

    pub fn n_pos(&self) -> usize {
        self.n_pos
    }

    pub fn n_c(&self) -> usize {
        self.n_c
    }

    pub fn keyword_names(&self) -> &[String] {
        &self.keyword_names
    }

    pub fn keyword_index(&self, name: &str) -> Option<usize> {
        self.keyword_names.iter().position(|k| k == name)
    }

    /// Total number of centers, `n_kw * n_pos * n_c`.
    pub fn len(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn center(&self, index: usize) -> &[f32] {
        &self.centers[index * self.dim..(index + 1) * self.dim]
    }

    pub fn centers(&self) -> std::slice::ChunksExact<'_, f32> {
        self.centers.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.centers
    }

    /// Flat center indices of cell `(kw, pos)` (both zero-based).
    pub fn cell_indices(&self, kw: usize, pos: usize) -> Range<usize> {
        assert!(kw < self.n_kw() && pos < self.n_pos, "cell ({kw}, {pos}) out of range");
        let start = (kw * self.n_pos + pos) * self.n_c;
        start..start + self.n_c
    }

    /// The centers of cell `(kw, pos)` as a row-major slice of `n_c` rows.
    pub fn cell(&self, kw: usize, pos: usize) -> &[f32] {
        let r = self.cell_indices(kw, pos);
        &self.centers[r.start * self.dim..r.end * self.dim]
    }

    /// `(kw, pos, cluster)` of a flat center index.
    pub fn locate(&self, index: usize) -> (usize, usize, usize) {
        let cluster = index % self.n_c;
        let cell = index / self.n_c;
        (cell / self.n_pos, cell % self.n_pos, cluster)
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

/// Mono audio samples at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if !SUPPORTED_SAMPLE_RATES.contains(&sample_rate_hz) {
            return Err(KwsError::Unsupported(format!(
                "sample rate {sample_rate_hz} Hz (supported: {SUPPORTED_SAMPLE_RATES:?})"
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(KwsError::Format(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Mean squared sample value.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&s| s as f64 * s as f64).sum::<f64>() / self.samples.len() as f64
    }
}
