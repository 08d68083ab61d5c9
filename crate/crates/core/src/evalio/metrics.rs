//! Segmentation metrics: per-class Dice, 95th-percentile Hausdorff distance,
//! IoU, recall, accuracy, and dataset-level aggregation.
//!
//! Conventions, fixed here so comparisons stay internally consistent:
//! - Dice/IoU with both masks empty is 1.0 (perfect agreement on absence);
//!   recall with an empty reference is likewise 1.0.
//! - HD95 is computed per 2-d sample: boundary pixels are foreground pixels
//!   with any background 8-neighbour (the image border counts as
//!   background), distances are Euclidean between pixel centers, and the
//!   statistic is the nearest-rank 95th percentile of the pooled set of
//!   both directions' nearest-neighbour distances. When either mask is
//!   empty the value is undefined: such cases are excluded from means and
//!   counted in `nan_ratio` instead of being coerced to a number.

use crate::error::Result;
use crate::map::{check_same_shape, BinaryMask};
use ndarray::ArrayView2;
use std::fmt::Write as _;

/// Dice coefficient of one class plane; both-empty is defined as 1.0.
pub fn dice_class(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> f64 {
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    ndarray::Zip::from(&pred).and(&gt).for_each(|&p, &g| {
        inter += (p != 0 && g != 0) as usize;
        a += (p != 0) as usize;
        b += (g != 0) as usize;
    });
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// Intersection over union; both-empty is defined as 1.0.
pub fn iou_class(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    ndarray::Zip::from(&pred).and(&gt).for_each(|&p, &g| {
        inter += (p != 0 && g != 0) as usize;
        union += (p != 0 || g != 0) as usize;
    });
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Fraction of reference foreground recovered; empty reference gives 1.0.
pub fn recall_class(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> f64 {
    let mut tp = 0usize;
    let mut pos = 0usize;
    ndarray::Zip::from(&pred).and(&gt).for_each(|&p, &g| {
        tp += (p != 0 && g != 0) as usize;
        pos += (g != 0) as usize;
    });
    if pos == 0 {
        1.0
    } else {
        tp as f64 / pos as f64
    }
}

/// Fraction of pixels labelled correctly.
pub fn accuracy_class(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> f64 {
    let mut correct = 0usize;
    ndarray::Zip::from(&pred).and(&gt).for_each(|&p, &g| {
        correct += ((p != 0) == (g != 0)) as usize;
    });
    correct as f64 / pred.len() as f64
}

/// Boundary pixels of a plane: foreground with any background 8-neighbour;
/// pixels on the image border are boundary whenever they are foreground.
fn boundary_pixels(plane: ArrayView2<u8>) -> Vec<(usize, usize)> {
    let (h, w) = plane.dim();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if plane[(r, c)] == 0 {
                continue;
            }
            let mut edge = false;
            'scan: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let nr = r as i64 + dr;
                    let nc = c as i64 + dc;
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        edge = true;
                        break 'scan;
                    }
                    if plane[(nr as usize, nc as usize)] == 0 {
                        edge = true;
                        break 'scan;
                    }
                }
            }
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

fn nearest_distances(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(r, c)| {
            to.iter()
                .map(|&(r2, c2)| {
                    let dr = r as f64 - r2 as f64;
                    let dc = c as f64 - c2 as f64;
                    (dr * dr + dc * dc).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Nearest-rank percentile of an unsorted non-empty sample.
fn percentile_nearest_rank(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    let rank = ((q / 100.0) * n as f64).ceil() as usize;
    values[rank.clamp(1, n) - 1]
}

/// 95th-percentile Hausdorff distance of one class plane, or `None` when
/// either mask has no foreground.
pub fn hd95_class(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Option<f64> {
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let mut pooled = nearest_distances(&bp, &bg);
    pooled.extend(nearest_distances(&bg, &bp));
    Some(percentile_nearest_rank(&mut pooled, 95.0))
}

/// Exact (maximum) symmetric Hausdorff distance over boundary pixels;
/// test oracle for the percentile version.
pub fn hausdorff_exact(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Option<f64> {
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let d1 = nearest_distances(&bp, &bg);
    let d2 = nearest_distances(&bg, &bp);
    d1.into_iter().chain(d2).fold(f64::NAN, f64::max).into()
}

/// All metrics of one (pred, gt) pair, per class plane.
#[derive(Debug, Clone)]
pub struct SampleMetrics {
    pub dice: Vec<f64>,
    pub hd95: Vec<Option<f64>>,
    pub iou: Vec<f64>,
    pub recall: Vec<f64>,
    pub accuracy: Vec<f64>,
}

/// Evaluate every class plane of a prediction against the reference.
pub fn evaluate_sample(pred: &BinaryMask, gt: &BinaryMask) -> Result<SampleMetrics> {
    check_same_shape("evaluate_sample", pred.shape(), gt.shape())?;
    let (_, _, classes) = pred.shape();
    let mut m = SampleMetrics {
        dice: Vec::with_capacity(classes),
        hd95: Vec::with_capacity(classes),
        iou: Vec::with_capacity(classes),
        recall: Vec::with_capacity(classes),
        accuracy: Vec::with_capacity(classes),
    };
    for chan in 0..classes {
        let p = pred.data().index_axis(ndarray::Axis(2), chan);
        let g = gt.data().index_axis(ndarray::Axis(2), chan);
        m.dice.push(dice_class(p, g));
        m.hd95.push(hd95_class(p, g));
        m.iou.push(iou_class(p, g));
        m.recall.push(recall_class(p, g));
        m.accuracy.push(accuracy_class(p, g));
    }
    Ok(m)
}

/// Dataset-level aggregate: means per class, with HD95 averaged over defined
/// cases only and the undefined fraction reported as `nan_ratio`.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub classes: usize,
    pub samples: usize,
    pub dice: Vec<f64>,
    /// Mean HD95 over defined cases; `None` when no case was defined.
    pub hd95: Vec<Option<f64>>,
    /// Count of defined HD95 cases per class.
    pub defined: Vec<usize>,
    pub iou: Vec<f64>,
    pub recall: Vec<f64>,
    pub accuracy: Vec<f64>,
}

impl MetricReport {
    pub fn aggregate(samples: &[SampleMetrics]) -> Self {
        let classes = samples.first().map_or(0, |s| s.dice.len());
        let n = samples.len();
        let mut rep = MetricReport {
            classes,
            samples: n,
            dice: vec![0.0; classes],
            hd95: vec![None; classes],
            defined: vec![0; classes],
            iou: vec![0.0; classes],
            recall: vec![0.0; classes],
            accuracy: vec![0.0; classes],
        };
        let mut hd_sum = vec![0.0f64; classes];
        for s in samples {
            for c in 0..classes {
                rep.dice[c] += s.dice[c];
                rep.iou[c] += s.iou[c];
                rep.recall[c] += s.recall[c];
                rep.accuracy[c] += s.accuracy[c];
                if let Some(d) = s.hd95[c] {
                    hd_sum[c] += d;
                    rep.defined[c] += 1;
                }
            }
        }
        if n > 0 {
            for c in 0..classes {
                rep.dice[c] /= n as f64;
                rep.iou[c] /= n as f64;
                rep.recall[c] /= n as f64;
                rep.accuracy[c] /= n as f64;
                if rep.defined[c] > 0 {
                    rep.hd95[c] = Some(hd_sum[c] / rep.defined[c] as f64);
                }
            }
        }
        rep
    }

    /// Mean Dice over classes.
    pub fn mean_dice(&self) -> f64 {
        if self.classes == 0 {
            return 0.0;
        }
        self.dice.iter().sum::<f64>() / self.classes as f64
    }

    /// Mean HD95 over classes with any defined case.
    pub fn mean_hd95(&self) -> Option<f64> {
        let vals: Vec<f64> = self.hd95.iter().filter_map(|v| *v).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Fraction of (sample, class) HD95 cases that were undefined.
    pub fn nan_ratio(&self) -> f64 {
        let total = self.samples * self.classes;
        if total == 0 {
            return 0.0;
        }
        let defined: usize = self.defined.iter().sum();
        (total - defined) as f64 / total as f64
    }

    /// Fixed-column CSV: class, dice, hd95, defined, iou, recall, accuracy.
    /// One row per class plus a `mean` row; a comment header states the
    /// per-2D-sample HD95 convention and the undefined-case rule.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(
            "# hd95 per 2D sample, mean over defined cases only; undefined cases counted in nan_ratio\n",
        );
        let _ = writeln!(out, "# samples={} nan_ratio={:.6}", self.samples, self.nan_ratio());
        out.push_str("class,dice,hd95,defined,iou,recall,accuracy\n");
        let fmt_hd = |v: Option<f64>| match v {
            Some(d) => format!("{d:.6}"),
            None => "nan".to_string(),
        };
        for c in 0..self.classes {
            let _ = writeln!(
                out,
                "{c},{:.6},{},{},{:.6},{:.6},{:.6}",
                self.dice[c],
                fmt_hd(self.hd95[c]),
                self.defined[c],
                self.iou[c],
                self.recall[c],
                self.accuracy[c],
            );
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let _ = writeln!(
            out,
            "mean,{:.6},{},{},{:.6},{:.6},{:.6}",
            self.mean_dice(),
            fmt_hd(self.mean_hd95()),
            self.defined.iter().sum::<usize>(),
            mean(&self.iou),
            mean(&self.recall),
            mean(&self.accuracy),
        );
        out
    }
}
