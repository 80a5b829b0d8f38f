//! Quantization-based score calibration.
//!
//! Every operation here works row by row against a [`CenterBank`]:
//!
//! * quantization replaces an embedding by its most similar center,
//! * normalization divides an embedding by `1 + s_max`, where `s_max` is the
//!   similarity to that center (so embeddings far from every center keep a
//!   larger norm and produce larger scores),
//! * the combined mode sums both. Rows are not re-normalized afterwards, so
//!   the inner product of a combined row with any vector is exactly the sum
//!   of the two single-step inner products.
//!
//! Calibration must run on per-segment embeddings before
//! [`combine_segments`] averages overlapping frames.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::tensorio::{dot, norm, CenterBank, EmbeddingSequence, UNIT_NORM_TOL, ZERO_NORM};

/// Floor on the normalization denominator `1 + s_max`.
pub const NU_DENOMINATOR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    None,
    /// Step 1: replace each embedding by its nearest center.
    Quantize,
    /// Step 2: scale each embedding by its quantization error.
    Normalize,
    /// Both steps summed.
    Combined,
}

impl CalibrationMode {
    pub const ALL: [CalibrationMode; 4] = [
        CalibrationMode::None,
        CalibrationMode::Quantize,
        CalibrationMode::Normalize,
        CalibrationMode::Combined,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CalibrationMode::None => "none",
            CalibrationMode::Quantize => "quantize",
            CalibrationMode::Normalize => "normalize",
            CalibrationMode::Combined => "combined",
        }
    }

    /// Column heading used in result tables.
    pub fn table_label(self) -> &'static str {
        match self {
            CalibrationMode::None => "no calibration",
            CalibrationMode::Quantize => "step 1 only",
            CalibrationMode::Normalize => "step 2 only",
            CalibrationMode::Combined => "both steps",
        }
    }
}

impl fmt::Display for CalibrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CalibrationMode {
    type Err = KwsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CalibrationMode::None),
            "quantize" | "step1" => Ok(CalibrationMode::Quantize),
            "normalize" | "step2" => Ok(CalibrationMode::Normalize),
            "combined" | "both" => Ok(CalibrationMode::Combined),
            other => Err(KwsError::Config(format!("unknown calibration mode {other:?}"))),
        }
    }
}

/// Which sides of a query/test comparison are calibrated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationSides {
    #[default]
    Both,
    /// Only query templates; test recordings keep raw embeddings.
    Query,
}

impl FromStr for CalibrationSides {
    type Err = KwsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(CalibrationSides::Both),
            "query" => Ok(CalibrationSides::Query),
            other => Err(KwsError::Config(format!("unknown calibration sides {other:?}"))),
        }
    }
}

/// Segmentation of a long spectrogram into overlapping fixed-length pieces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub segment_length_frames: usize,
    pub segment_hop_frames: usize,
}

impl SegmentLayout {
    pub fn new(segment_length_frames: usize, segment_hop_frames: usize) -> Result<Self> {
        if segment_length_frames == 0
            || segment_hop_frames == 0
            || segment_hop_frames > segment_length_frames
        {
            return Err(KwsError::Parameter(format!(
                "segment layout needs 0 < hop <= length (got length {segment_length_frames}, hop {segment_hop_frames})"
            )));
        }
        Ok(Self {
            segment_length_frames,
            segment_hop_frames,
        })
    }

    /// Absolute frame index of row 0 of segment `i`.
    pub fn offset(&self, segment: usize) -> usize {
        segment * self.segment_hop_frames
    }
}

/// Nearest center of a bank by inner product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestCenter {
    pub index: usize,
    pub similarity: f64,
}

fn check_unit(row: &[f32]) -> Result<()> {
    let n = norm(row);
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(KwsError::Parameter(format!(
            "embedding must have unit norm, got {n}"
        )));
    }
    Ok(())
}

fn check_dim(bank: &CenterBank, dim: usize) -> Result<()> {
    if bank.dim() != dim {
        return Err(KwsError::DimensionMismatch {
            expected: bank.dim(),
            actual: dim,
        });
    }
    Ok(())
}

fn nearest_unchecked(e: &[f32], bank: &CenterBank) -> NearestCenter {
    let mut best = NearestCenter {
        index: 0,
        similarity: f64::NEG_INFINITY,
    };
    for (i, c) in bank.centers().enumerate() {
        let s = dot(e, c);
        // strict comparison keeps the lowest flat index on ties
        if s > best.similarity {
            best = NearestCenter {
                index: i,
                similarity: s,
            };
        }
    }
    best
}

/// The center maximizing `<e, c>` over the whole bank.
pub fn nearest_center(e: &[f32], bank: &CenterBank) -> Result<NearestCenter> {
    if bank.is_empty() {
        return Err(KwsError::Parameter("center bank is empty".into()));
    }
    check_dim(bank, e.len())?;
    check_unit(e)?;
    Ok(nearest_unchecked(e, bank))
}

fn nu_scale(similarity: f64) -> f64 {
    1.0 / (1.0 + similarity).max(NU_DENOMINATOR_FLOOR)
}

fn calibrate_rows<F>(seq: &EmbeddingSequence, bank: &CenterBank, mut f: F) -> Result<EmbeddingSequence>
where
    F: FnMut(&[f32], NearestCenter, &mut Vec<f32>),
{
    if bank.is_empty() {
        return Err(KwsError::Parameter("center bank is empty".into()));
    }
    check_dim(bank, seq.dim())?;
    seq.map_rows(|t, row, out| {
        check_unit(row).map_err(|e| KwsError::Parameter(format!("row {t}: {e}")))?;
        f(row, nearest_unchecked(row, bank), out);
        Ok(())
    })
}

/// Quantization: every row replaced by its nearest center.
pub fn kappa(seq: &EmbeddingSequence, bank: &CenterBank) -> Result<EmbeddingSequence> {
    calibrate_rows(seq, bank, |_, nc, out| {
        out.extend_from_slice(bank.center(nc.index))
    })
}

/// Quantization-error normalization: every row `e` becomes `e / (1 + s_max(e))`.
pub fn nu(seq: &EmbeddingSequence, bank: &CenterBank) -> Result<EmbeddingSequence> {
    calibrate_rows(seq, bank, |row, nc, out| {
        let scale = nu_scale(nc.similarity);
        out.extend(row.iter().map(|&v| (v as f64 * scale) as f32));
    })
}

/// Combined calibration: `kappa(e) + nu(e)` per row, without re-normalization.
pub fn gamma(seq: &EmbeddingSequence, bank: &CenterBank) -> Result<EmbeddingSequence> {
    calibrate_rows(seq, bank, |row, nc, out| {
        let scale = nu_scale(nc.similarity);
        let c = bank.center(nc.index);
        out.extend(
            row.iter()
                .zip(c)
                .map(|(&v, &cv)| (cv as f64 + v as f64 * scale) as f32),
        );
    })
}

pub fn apply_calibration(
    seq: &EmbeddingSequence,
    bank: &CenterBank,
    mode: CalibrationMode,
) -> Result<EmbeddingSequence> {
    match mode {
        CalibrationMode::None => Ok(seq.clone()),
        CalibrationMode::Quantize => kappa(seq, bank),
        CalibrationMode::Normalize => nu(seq, bank),
        CalibrationMode::Combined => gamma(seq, bank),
    }
}

/// Row handling after overlapping segment frames are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombinedRows {
    /// Divide every averaged row by its norm.
    UnitNorm,
    /// Keep averaged rows as they are; needed after normalization or
    /// combined calibration, whose row norms carry the score adjustment.
    Preserve,
}

/// Averages overlapping segment embeddings into one sequence of `total_frames` rows.
///
/// Segment `i` covers absolute frames `i * hop .. i * hop + len`; rows past
/// `total_frames` are ignored.
pub fn combine_segments(
    segments: &[EmbeddingSequence],
    layout: SegmentLayout,
    total_frames: usize,
    rows: CombinedRows,
) -> Result<EmbeddingSequence> {
    let first = segments
        .first()
        .ok_or_else(|| KwsError::Parameter("no segments to combine".into()))?;
    let dim = first.dim();
    if total_frames == 0 {
        return Err(KwsError::Parameter("total_frames must be >= 1".into()));
    }
    let mut sums = vec![0.0f64; total_frames * dim];
    let mut counts = vec![0usize; total_frames];
    for (i, seg) in segments.iter().enumerate() {
        if seg.dim() != dim {
            return Err(KwsError::DimensionMismatch {
                expected: dim,
                actual: seg.dim(),
            });
        }
        if seg.len() != layout.segment_length_frames {
            return Err(KwsError::Parameter(format!(
                "segment {i} has {} frames, layout expects {}",
                seg.len(),
                layout.segment_length_frames
            )));
        }
        let base = layout.offset(i);
        for (t, row) in seg.rows().enumerate() {
            let frame = base + t;
            if frame >= total_frames {
                break;
            }
            counts[frame] += 1;
            for (acc, &v) in sums[frame * dim..(frame + 1) * dim].iter_mut().zip(row) {
                *acc += v as f64;
            }
        }
    }
    let mut data = Vec::with_capacity(total_frames * dim);
    for (frame, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(KwsError::Coverage(frame));
        }
        let mean: Vec<f64> = sums[frame * dim..(frame + 1) * dim]
            .iter()
            .map(|s| s / count as f64)
            .collect();
        let scale = match rows {
            CombinedRows::Preserve => 1.0,
            CombinedRows::UnitNorm => {
                let n = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n < ZERO_NORM {
                    return Err(KwsError::DegenerateInput(format!(
                        "averaged frame {frame} has zero norm"
                    )));
                }
                1.0 / n
            }
        };
        data.extend(mean.iter().map(|v| (v * scale) as f32));
    }
    EmbeddingSequence::new(data, dim, first.hop_seconds(), first.label().map(str::to_owned))
}

/// Mean over time of the best cosine similarity to any center of one cell.
///
/// `cell` is a row-major slice of centers, e.g. [`CenterBank::cell`].
pub fn cossim_sets(seq: &EmbeddingSequence, cell: &[f32]) -> Result<f64> {
    if cell.is_empty() {
        return Err(KwsError::Parameter("center cell is empty".into()));
    }
    let dim = seq.dim();
    if !cell.len().is_multiple_of(dim) {
        return Err(KwsError::DimensionMismatch {
            expected: dim,
            actual: cell.len() % dim,
        });
    }
    let mut total = 0.0;
    for row in seq.rows() {
        let rn = norm(row);
        let best = cell
            .chunks_exact(dim)
            .map(|c| dot(row, c) / (rn * norm(c)))
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    Ok(total / seq.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank2() -> CenterBank {
        CenterBank::new(vec![1.0, 0.0, 0.0, 1.0], 2, 1, 2, vec!["k".into()]).unwrap()
    }

    fn seq(rows: &[[f32; 2]]) -> EmbeddingSequence {
        EmbeddingSequence::from_rows(rows, 0.016, None).unwrap()
    }

    #[test]
    fn nearest_center_inner_product() {
        let nc = nearest_center(&[0.8, 0.6], &bank2()).unwrap();
        assert_eq!(nc.index, 0);
        assert!((nc.similarity - 0.8).abs() < 1e-7);
    }

    #[test]
    fn nearest_center_self_match() {
        let nc = nearest_center(&[0.0, 1.0], &bank2()).unwrap();
        assert_eq!(nc.index, 1);
        assert_eq!(nc.similarity, 1.0);
    }

    #[test]
    fn nearest_center_tie_prefers_lower_index() {
        let h = std::f32::consts::FRAC_1_SQRT_2;
        let nc = nearest_center(&[h, h], &bank2()).unwrap();
        assert_eq!(nc.index, 0);
    }

    #[test]
    fn nearest_center_rejects_non_unit() {
        assert!(nearest_center(&[2.0, 0.0], &bank2()).is_err());
    }

    #[test]
    fn kappa_componentwise_argmax() {
        let out = kappa(&seq(&[[0.6, 0.8], [0.8, 0.6]]), &bank2()).unwrap();
        assert_eq!(out.row(0), &[0.0, 1.0]);
        assert_eq!(out.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn kappa_fixed_point() {
        let s = seq(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(kappa(&s, &bank2()).unwrap(), s);
    }

    #[test]
    fn nu_extremes() {
        let b = bank2();
        let on = nu(&seq(&[[1.0, 0.0]]), &b).unwrap();
        assert_eq!(on.row(0), &[0.5, 0.0]);
        // orthogonal to every center of a one-center bank
        let b1 = CenterBank::new(vec![1.0, 0.0], 2, 1, 1, vec!["k".into()]).unwrap();
        let off = nu(&seq(&[[0.0, 1.0]]), &b1).unwrap();
        assert_eq!(off.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn nu_floor_caps_antipodal_case() {
        let b1 = CenterBank::new(vec![1.0, 0.0], 2, 1, 1, vec!["k".into()]).unwrap();
        let out = nu(&seq(&[[-1.0, 0.0]]), &b1).unwrap();
        assert!((out.max_row_norm() - 1e6).abs() < 1.0);
    }

    #[test]
    fn gamma_on_center() {
        let out = gamma(&seq(&[[0.0, 1.0]]), &bank2()).unwrap();
        assert_eq!(out.row(0), &[0.0, 1.5]);
    }

    #[test]
    fn none_is_identity() {
        let s = seq(&[[0.6, 0.8]]);
        assert_eq!(apply_calibration(&s, &bank2(), CalibrationMode::None).unwrap(), s);
        assert_eq!(
            apply_calibration(&s, &bank2(), CalibrationMode::Combined).unwrap(),
            gamma(&s, &bank2()).unwrap()
        );
    }

    #[test]
    fn combine_without_overlap_concatenates() {
        let layout = SegmentLayout::new(2, 2).unwrap();
        let segs = [seq(&[[3.0, 4.0], [1.0, 0.0]]), seq(&[[0.0, 2.0], [0.6, 0.8]])];
        let out = combine_segments(&segs, layout, 4, CombinedRows::UnitNorm).unwrap();
        assert_eq!(out.len(), 4);
        assert!((out.row(0)[0] - 0.6).abs() < 1e-7);
        assert_eq!(out.row(2), &[0.0, 1.0]);
    }

    #[test]
    fn combine_identical_overlap_is_exact() {
        let layout = SegmentLayout::new(2, 1).unwrap();
        let s = seq(&[[0.6, 0.8], [0.6, 0.8]]);
        let out = combine_segments(&[s.clone(), s.clone()], layout, 3, CombinedRows::UnitNorm).unwrap();
        for row in out.rows() {
            assert_eq!(row, &[0.6, 0.8]);
        }
    }

    #[test]
    fn combine_two_segment_overlap() {
        // T=4, hop=2: absolute frame 2 (third frame) averages seg0 row 2 and seg1 row 0.
        let layout = SegmentLayout::new(4, 2).unwrap();
        let a = seq(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let b = seq(&[[0.0, 1.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]]);
        let out = combine_segments(&[a, b], layout, 6, CombinedRows::UnitNorm).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((out.row(2)[0] - h).abs() < 1e-7 && (out.row(2)[1] - h).abs() < 1e-7);
        assert_eq!(out.row(3), &[0.0, 1.0]);
        assert_eq!(out.row(5), &[0.0, 1.0]);
    }

    #[test]
    fn combine_reports_uncovered_frame() {
        let layout = SegmentLayout::new(2, 2).unwrap();
        let segs = [seq(&[[1.0, 0.0], [1.0, 0.0]])];
        assert!(matches!(
            combine_segments(&segs, layout, 3, CombinedRows::UnitNorm),
            Err(KwsError::Coverage(2))
        ));
    }

    #[test]
    fn combine_preserve_keeps_norms() {
        let layout = SegmentLayout::new(1, 1).unwrap();
        let segs = [seq(&[[0.5, 0.0]])];
        let out = combine_segments(&segs, layout, 1, CombinedRows::Preserve).unwrap();
        assert_eq!(out.row(0), &[0.5, 0.0]);
    }

    #[test]
    fn cossim_sets_cases() {
        let b = bank2();
        let cell = b.cell(0, 0);
        assert_eq!(cossim_sets(&seq(&[[1.0, 0.0], [0.0, 1.0]]), cell).unwrap(), 1.0);
        let b1 = CenterBank::new(vec![1.0, 0.0], 2, 1, 1, vec!["k".into()]).unwrap();
        assert_eq!(cossim_sets(&seq(&[[0.0, 1.0]]), b1.cell(0, 0)).unwrap(), 0.0);
        let h = 0.5f32;
        let r = (1.0f32 - h * h).sqrt();
        let s = seq(&[[1.0, 0.0], [h, r], [0.0, 1.0]]);
        assert!((cossim_sets(&s, b1.cell(0, 0)).unwrap() - 0.5).abs() < 1e-7);
        assert!(cossim_sets(&s, &[]).is_err());
    }

    #[test]
    fn mode_parsing() {
        for m in CalibrationMode::ALL {
            assert_eq!(m.as_str().parse::<CalibrationMode>().unwrap(), m);
        }
        assert!("fancy".parse::<CalibrationMode>().is_err());
    }
}
