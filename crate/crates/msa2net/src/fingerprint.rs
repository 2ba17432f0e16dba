//! Dataset fingerprinting and candidate kernel-size construction.
//!
//! The fingerprint of a dataset is the quartile statistics [Q1, Q2, Q3, P95]
//! of its per-class foreground area proportions, measured on ground-truth
//! masks. The quartile shift vector `1 + QS` scales the base kernel sizes
//! [1, 3, 5, 7] into the 4×4 candidate matrix every self-adaptive
//! convolution selects from.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Base kernel sizes, one per row of the candidate matrix.
pub const BASE_KERNELS: [f64; 4] = [1.0, 3.0, 5.0, 7.0];

/// Largest kernel size a candidate is allowed to quantize to.
pub const MAX_KERNEL: i64 = 13;

/// Quantile levels behind [Q1, Q2, Q3, P95].
pub const QUANTILE_LEVELS: [f64; 4] = [0.25, 0.5, 0.75, 0.95];

#[derive(Debug, Error)]
pub enum FingerprintError {
    #[error("no foreground samples")]
    NoForegroundSamples,
    #[error("mask label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u8, num_classes: usize },
    #[error("proportion {0} outside [0, 1]")]
    ProportionOutOfRange(f64),
    #[error("mask must be non-empty")]
    EmptyMask,
}

/// One measured area proportion: how much of an image one foreground class
/// covers. Background (class 0) is never sampled.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AreaProportionSample {
    pub class_id: usize,
    pub proportion: f64,
    pub sample_id: String,
}

/// Quartile statistics of the per-class area-proportion distributions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Fingerprint {
    pub dataset_id: String,
    pub sample_count: usize,
    /// class_id → [Q1, Q2, Q3, P95] of that class's proportions.
    pub per_class_quartiles: BTreeMap<usize, [f64; 4]>,
    /// [Q1, Q2, Q3, P95] pooled over every foreground sample.
    pub pooled_quartiles: [f64; 4],
}

/// The quantized candidate kernel-size matrix.
///
/// `raw[b][s] = base[b] * shift[s]` exactly; `quantized` rounds each entry to
/// the nearest odd integer (ties up) clamped to [1, MAX_KERNEL].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelCandidateMatrix {
    pub base: [f64; 4],
    pub shift: [f64; 4],
    pub raw: [[f64; 4]; 4],
    pub quantized: [[usize; 4]; 4],
}

impl KernelCandidateMatrix {
    /// Build from a shift vector (`1 + quartiles`).
    pub fn from_shift(shift: [f64; 4]) -> Self {
        let mut raw = [[0.0; 4]; 4];
        let mut quantized = [[0usize; 4]; 4];
        for (b, &base) in BASE_KERNELS.iter().enumerate() {
            for (s, &sh) in shift.iter().enumerate() {
                raw[b][s] = base * sh;
                quantized[b][s] = quantize_odd(raw[b][s]);
            }
        }
        KernelCandidateMatrix {
            base: BASE_KERNELS,
            shift,
            raw,
            quantized,
        }
    }

    /// The base schedule: shift = 1 everywhere, kernels [1, 3, 5, 7].
    pub fn identity() -> Self {
        KernelCandidateMatrix::from_shift([1.0; 4])
    }
}

/// Nearest odd integer, ties rounded up, clamped to [1, MAX_KERNEL].
pub fn quantize_odd(x: f64) -> usize {
    // Odd integers are 2m+1; round (x-1)/2 half-up to get m.
    let m = ((x - 1.0) / 2.0 + 0.5).floor() as i64;
    (2 * m + 1).clamp(1, MAX_KERNEL) as usize
}

/// Per-class area proportions of a label mask.
///
/// Returns `proportion[c-1] = count(mask == c) / (H*W)` for foreground
/// classes `c in 1..num_classes`.
pub fn area_proportions(
    mask: &[u8],
    height: usize,
    width: usize,
    num_classes: usize,
) -> Result<Vec<f64>, FingerprintError> {
    if height == 0 || width == 0 || mask.is_empty() {
        return Err(FingerprintError::EmptyMask);
    }
    assert_eq!(mask.len(), height * width, "mask size mismatch");
    let mut counts = vec![0usize; num_classes];
    for &v in mask {
        let label = v as usize;
        if label >= num_classes {
            return Err(FingerprintError::LabelOutOfRange {
                label: v,
                num_classes,
            });
        }
        counts[label] += 1;
    }
    let total = (height * width) as f64;
    Ok(counts[1..].iter().map(|&c| c as f64 / total).collect())
}

/// [Q1, Q2, Q3, P95] by linear interpolation on the sorted list: quantile q
/// sits at fractional index q·(n−1).
pub fn quartile_stats(samples: &[f64]) -> Result<[f64; 4], FingerprintError> {
    if samples.is_empty() {
        return Err(FingerprintError::NoForegroundSamples);
    }
    for &v in samples {
        if !(0.0..=1.0).contains(&v) {
            return Err(FingerprintError::ProportionOutOfRange(v));
        }
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out = [0.0; 4];
    for (i, &q) in QUANTILE_LEVELS.iter().enumerate() {
        out[i] = interpolate_sorted(&sorted, q);
    }
    Ok(out)
}

fn interpolate_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Candidate matrix for a fingerprint: shift = 1 + pooled quartiles.
pub fn build_candidate_matrix(fp: &Fingerprint) -> KernelCandidateMatrix {
    let mut shift = [0.0; 4];
    for (s, q) in fp.pooled_quartiles.iter().enumerate() {
        shift[s] = 1.0 + q;
    }
    KernelCandidateMatrix::from_shift(shift)
}

/// Fingerprint a dataset given its masks.
///
/// Every strictly positive per-class proportion becomes one sample; classes
/// absent from an image contribute nothing. Statistics are order-invariant,
/// so shuffling the dataset leaves the result bit-identical.
pub fn fingerprint_dataset<'a, I>(
    dataset_id: &str,
    masks: I,
    num_classes: usize,
) -> Result<Fingerprint, FingerprintError>
where
    I: IntoIterator<Item = (String, &'a [u8], usize, usize)>,
{
    let mut per_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut pooled = Vec::new();
    let mut sample_count = 0;
    for (_id, mask, h, w) in masks {
        sample_count += 1;
        let props = area_proportions(mask, h, w, num_classes)?;
        for (i, &p) in props.iter().enumerate() {
            if p > 0.0 {
                per_class.entry(i + 1).or_default().push(p);
                pooled.push(p);
            }
        }
    }
    if pooled.is_empty() {
        return Err(FingerprintError::NoForegroundSamples);
    }
    let mut per_class_quartiles = BTreeMap::new();
    for (class_id, samples) in &per_class {
        per_class_quartiles.insert(*class_id, quartile_stats(samples)?);
    }
    Ok(Fingerprint {
        dataset_id: dataset_id.to_string(),
        sample_count,
        per_class_quartiles,
        pooled_quartiles: quartile_stats(&pooled)?,
    })
}

/// The JSON document written by `fingerprint --out`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FingerprintFile {
    pub dataset_id: String,
    pub sample_count: usize,
    pub per_class_quartiles: BTreeMap<usize, [f64; 4]>,
    pub pooled_quartiles: [f64; 4],
    pub candidate_matrix: KernelCandidateMatrix,
}

impl FingerprintFile {
    pub fn new(fp: &Fingerprint) -> Self {
        FingerprintFile {
            dataset_id: fp.dataset_id.clone(),
            sample_count: fp.sample_count,
            per_class_quartiles: fp.per_class_quartiles.clone(),
            pooled_quartiles: fp.pooled_quartiles,
            candidate_matrix: build_candidate_matrix(fp),
        }
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint {
            dataset_id: self.dataset_id.clone(),
            sample_count: self.sample_count,
            per_class_quartiles: self.per_class_quartiles.clone(),
            pooled_quartiles: self.pooled_quartiles,
        }
    }
}
