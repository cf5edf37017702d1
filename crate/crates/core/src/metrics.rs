//! Box overlap metrics and crack-size binned reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::labels::KeypointBox;
use crate::losses::LossSummary;

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.0, 0.001, 0.002, 0.003, 0.004];
pub const CSV_HEADER: &str = "threshold,iou,purity,integrity,count";

pub fn overlap_area(a: &KeypointBox, b: &KeypointBox) -> f64 {
    let w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if w > 0.0 && h > 0.0 {
        w * h
    } else {
        0.0
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

pub fn iou(pred: &KeypointBox, truth: &KeypointBox) -> f64 {
    let o = overlap_area(pred, truth);
    ratio(o, pred.area() + truth.area() - o)
}

/// Overlap as a fraction of the predicted box.
pub fn purity(pred: &KeypointBox, truth: &KeypointBox) -> f64 {
    ratio(overlap_area(pred, truth), pred.area())
}

/// Overlap as a fraction of the ground-truth box.
pub fn integrity(pred: &KeypointBox, truth: &KeypointBox) -> f64 {
    ratio(overlap_area(pred, truth), truth.area())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScore {
    pub iou: f64,
    pub purity: f64,
    pub integrity: f64,
}

impl PairScore {
    pub fn of(pred: &KeypointBox, truth: &KeypointBox) -> Self {
        Self {
            iou: iou(pred, truth),
            purity: purity(pred, truth),
            integrity: integrity(pred, truth),
        }
    }
}

/// One evaluated sample.
#[derive(Debug, Clone, Copy)]
pub struct Scored {
    pub pred: KeypointBox,
    pub truth: KeypointBox,
    pub crack_size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub threshold: f64,
    /// `None` when no sample exceeds the threshold.
    pub mean: Option<PairScore>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub losses: Option<LossSummary>,
}

/// Averages metrics over samples with `crack_size > t` for each threshold.
pub fn binned_report(samples: &[Scored], thresholds: &[f64]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Validation(
            "binned report needs at least one sample".into(),
        ));
    }
    if thresholds.is_empty() || thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(
            "thresholds must be non-empty and strictly increasing".into(),
        ));
    }
    let scores: Vec<PairScore> = samples
        .iter()
        .map(|s| PairScore::of(&s.pred, &s.truth))
        .collect();
    let rows = thresholds
        .iter()
        .map(|&t| {
            let mut sum = (0.0, 0.0, 0.0);
            let mut count = 0;
            for (s, p) in samples.iter().zip(&scores) {
                if s.crack_size > t {
                    sum.0 += p.iou;
                    sum.1 += p.purity;
                    sum.2 += p.integrity;
                    count += 1;
                }
            }
            let n = count as f64;
            ReportRow {
                threshold: t,
                mean: (count > 0).then(|| PairScore {
                    iou: sum.0 / n,
                    purity: sum.1 / n,
                    integrity: sum.2 / n,
                }),
                count,
            }
        })
        .collect();
    Ok(EvalReport { rows, losses: None })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            match r.mean {
                Some(m) => writeln!(
                    out,
                    "{},{:.6},{:.6},{:.6},{}",
                    r.threshold, m.iou, m.purity, m.integrity, r.count
                ),
                None => writeln!(out, "{},,,,{}", r.threshold, r.count),
            }
            .unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>10} {:>10} {:>10} {:>7}\n",
            "Crack size", "IoU", "Purity", "Integrity", "Count"
        );
        for r in &self.rows {
            let label = format!(">{}", r.threshold);
            match r.mean {
                Some(m) => writeln!(
                    out,
                    "{label:<12} {:>10.6} {:>10.6} {:>10.6} {:>7}",
                    m.iou, m.purity, m.integrity, r.count
                ),
                None => writeln!(
                    out,
                    "{label:<12} {:>10} {:>10} {:>10} {:>7}",
                    "-", "-", "-", r.count
                ),
            }
            .unwrap();
        }
        if let Some(l) = &self.losses {
            writeln!(
                out,
                "MAE {:.4}  MSE {:.4}  Huber {:.4}",
                l.mae, l.mse, l.huber
            )
            .unwrap();
        }
        out
    }
}

pub fn parse_thresholds(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad threshold `{p}`")))
        })
        .collect()
}
