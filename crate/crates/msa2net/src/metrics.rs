//! Segmentation metrics: Dice, HD95, sensitivity, specificity, accuracy.
//!
//! HD95 computes exact Euclidean distance transforms (Felzenszwalb's
//! two-pass lower-envelope algorithm) and summarizes each direction by its
//! 95th percentile (the same linear-interpolation quantile as the
//! fingerprint module); the result is the max of the two directions. A
//! plain-Hausdorff mode replaces the percentile with the max.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("prediction and ground-truth lists differ in length: {0} vs {1}")]
    MisalignedLists(usize, usize),
}

/// A binary mask with explicit dimensions (row-major).
#[derive(Clone, Debug)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width);
        BinaryMask {
            height,
            width,
            data,
        }
    }

    pub fn from_labels(labels: &[u8], height: usize, width: usize, class: u8) -> Self {
        BinaryMask::new(height, width, labels.iter().map(|&v| v == class).collect())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    fn check_shape(&self, other: &BinaryMask) -> Result<(), MetricsError> {
        if self.height != other.height || self.width != other.width {
            return Err(MetricsError::ShapeMismatch(
                self.height,
                self.width,
                other.height,
                other.width,
            ));
        }
        Ok(())
    }
}

/// Dice coefficient 2|P∩T| / (|P|+|T|). Both masks empty → 1.0 (perfect
/// absence); the caller can detect that case via `both_empty`.
pub fn dice(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64, MetricsError> {
    pred.check_shape(truth)?;
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut t = 0usize;
    for (a, b) in pred.data.iter().zip(&truth.data) {
        p += *a as usize;
        t += *b as usize;
        inter += (*a && *b) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// How the directed boundary distances are summarized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HausdorffMode {
    /// 95th percentile of each direction (HD95).
    Percentile95,
    /// Plain Hausdorff: max of each direction.
    Max,
}

/// HD95 (or plain Hausdorff) between two masks, in pixel units.
/// Returns `None` when either mask is empty (undefined).
pub fn hd95(
    pred: &BinaryMask,
    truth: &BinaryMask,
    mode: HausdorffMode,
) -> Result<Option<f64>, MetricsError> {
    pred.check_shape(truth)?;
    if pred.count() == 0 || truth.count() == 0 {
        return Ok(None);
    }
    let d_pt = directed_distances(pred, truth);
    let d_tp = directed_distances(truth, pred);
    let summarize = |mut d: Vec<f64>| -> f64 {
        match mode {
            HausdorffMode::Max => d.iter().cloned().fold(0.0, f64::max),
            HausdorffMode::Percentile95 => {
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let pos = 0.95 * (d.len() as f64 - 1.0);
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                d[lo] + (pos - lo as f64) * (d[hi] - d[lo])
            }
        }
    };
    Ok(Some(summarize(d_pt).max(summarize(d_tp))))
}

/// Distance from every set pixel of `from` to the nearest set pixel of `to`,
/// via an exact squared Euclidean distance transform of `to`.
fn directed_distances(from: &BinaryMask, to: &BinaryMask) -> Vec<f64> {
    let edt = squared_edt(to);
    from.data
        .iter()
        .zip(&edt)
        .filter(|(on, _)| **on)
        .map(|(_, d)| d.sqrt())
        .collect()
}

const INF: f64 = 1e18;

/// Exact squared Euclidean distance transform (two 1-D passes of the
/// lower-envelope parabola algorithm).
fn squared_edt(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let mut grid = vec![INF; h * w];
    for (g, &on) in grid.iter_mut().zip(&mask.data) {
        if on {
            *g = 0.0;
        }
    }
    // columns
    let mut col = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        let d = edt_1d(&col);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    // rows
    let mut row = vec![0.0; w];
    for y in 0..h {
        row.copy_from_slice(&grid[y * w..(y + 1) * w]);
        let d = edt_1d(&row);
        grid[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    grid
}

/// 1-D squared distance transform of a sampled function.
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    if !f.iter().any(|&v| v < INF) {
        return vec![INF; n]; // no sites in this line
    }
    let mut v = vec![0usize; n]; // parabola sites
    let mut z = vec![0.0f64; n + 1]; // boundaries
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        if f[q] >= INF {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                // k == 0 is unreachable here: z[0] = −INF and s is finite
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = INF;
                break;
            }
        }
    }
    let mut out = vec![0.0; n];
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
    out
}

/// Per-class confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn confusion(pred: &BinaryMask, truth: &BinaryMask) -> Result<ConfusionCounts, MetricsError> {
    pred.check_shape(truth)?;
    let mut c = ConfusionCounts::default();
    for (p, t) in pred.data.iter().zip(&truth.data) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// TP / (TP + FN); `None` when undefined.
pub fn sensitivity(c: &ConfusionCounts) -> Option<f64> {
    let denom = c.tp + c.fn_;
    (denom > 0).then(|| c.tp as f64 / denom as f64)
}

/// TN / (TN + FP); `None` when undefined.
pub fn specificity(c: &ConfusionCounts) -> Option<f64> {
    let denom = c.tn + c.fp;
    (denom > 0).then(|| c.tn as f64 / denom as f64)
}

/// (TP + TN) / total; `None` on an empty mask.
pub fn accuracy(c: &ConfusionCounts) -> Option<f64> {
    let denom = c.tp + c.tn + c.fp + c.fn_;
    (denom > 0).then(|| (c.tp + c.tn) as f64 / denom as f64)
}

/// Case-averaged metrics for one class.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dice: f64,
    /// Mean HD95 over cases where it is defined; `None` if never defined.
    pub hd95: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: f64,
    /// Cases where prediction and truth were both empty (dice forced to 1).
    pub both_empty_cases: usize,
    /// Cases excluded from the HD95 mean because a mask was empty.
    pub hd95_undefined_cases: usize,
}

/// Metric report across classes and cases.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: BTreeMap<usize, ClassMetrics>,
    pub mean_dice: f64,
    /// `None` when HD95 was undefined for every class.
    pub mean_hd95: Option<f64>,
    pub cases: usize,
}

impl MetricReport {
    /// Aligned plain-text table: average Dice, HD95, then per-class Dice.
    pub fn to_table(&self, class_names: &BTreeMap<usize, String>) -> String {
        let mut header = vec!["Dice".to_string(), "HD95".to_string()];
        let mut row = vec![
            format!("{:.4}", self.mean_dice),
            match self.mean_hd95 {
                Some(v) => format!("{:.4}", v),
                None => "n/a".into(),
            },
        ];
        for (class, m) in &self.per_class {
            header.push(
                class_names
                    .get(class)
                    .cloned()
                    .unwrap_or_else(|| format!("class{}", class)),
            );
            row.push(format!("{:.4}", m.dice));
        }
        let widths: Vec<usize> = header
            .iter()
            .zip(&row)
            .map(|(h, r)| h.len().max(r.len()))
            .collect();
        let fmt = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{:>width$}", c, width = w))
                .collect::<Vec<_>>()
                .join("  ")
        };
        format!("{}\n{}", fmt(&header), fmt(&row))
    }
}

/// Evaluate aligned lists of predicted and ground-truth label maps over the
/// given foreground classes. Metrics are computed per case (class vs rest)
/// and averaged; HD95-undefined cases are excluded from that class's mean.
pub fn evaluate(
    predictions: &[(Vec<u8>, usize, usize)],
    ground_truths: &[(Vec<u8>, usize, usize)],
    classes: &[usize],
    mode: HausdorffMode,
) -> Result<MetricReport, MetricsError> {
    if predictions.len() != ground_truths.len() {
        return Err(MetricsError::MisalignedLists(
            predictions.len(),
            ground_truths.len(),
        ));
    }
    let mut per_class = BTreeMap::new();
    for &class in classes {
        let mut dice_sum = 0.0;
        let mut hd_sum = 0.0;
        let mut hd_n = 0usize;
        let mut sens_sum = 0.0;
        let mut sens_n = 0usize;
        let mut spec_sum = 0.0;
        let mut spec_n = 0usize;
        let mut acc_sum = 0.0;
        let mut both_empty = 0usize;
        let mut hd_undef = 0usize;
        for ((p, ph, pw), (t, th, tw)) in predictions.iter().zip(ground_truths) {
            let pm = BinaryMask::from_labels(p, *ph, *pw, class as u8);
            let tm = BinaryMask::from_labels(t, *th, *tw, class as u8);
            if pm.count() == 0 && tm.count() == 0 {
                both_empty += 1;
            }
            dice_sum += dice(&pm, &tm)?;
            match hd95(&pm, &tm, mode)? {
                Some(d) => {
                    hd_sum += d;
                    hd_n += 1;
                }
                None => hd_undef += 1,
            }
            let c = confusion(&pm, &tm)?;
            if let Some(s) = sensitivity(&c) {
                sens_sum += s;
                sens_n += 1;
            }
            if let Some(s) = specificity(&c) {
                spec_sum += s;
                spec_n += 1;
            }
            acc_sum += accuracy(&c).unwrap_or(0.0);
        }
        let n = predictions.len() as f64;
        per_class.insert(
            class,
            ClassMetrics {
                dice: dice_sum / n,
                hd95: (hd_n > 0).then(|| hd_sum / hd_n as f64),
                sensitivity: (sens_n > 0).then(|| sens_sum / sens_n as f64),
                specificity: (spec_n > 0).then(|| spec_sum / spec_n as f64),
                accuracy: acc_sum / n,
                both_empty_cases: both_empty,
                hd95_undefined_cases: hd_undef,
            },
        );
    }
    let mean_dice =
        per_class.values().map(|m| m.dice).sum::<f64>() / per_class.len().max(1) as f64;
    let hd_vals: Vec<f64> = per_class.values().filter_map(|m| m.hd95).collect();
    let mean_hd95 = (!hd_vals.is_empty()).then(|| hd_vals.iter().sum::<f64>() / hd_vals.len() as f64);
    Ok(MetricReport {
        per_class,
        mean_dice,
        mean_hd95,
        cases: predictions.len(),
    })
}
