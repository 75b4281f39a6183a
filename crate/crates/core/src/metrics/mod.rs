//! Landmark distance and overlap metrics, and dataset-level reports.

mod overlay;

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub use overlay::{render_overlay, write_overlay};

use crate::data::{Prepared, ScaleFactors};
use crate::model::{ModelError, Network};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("mask sizes differ: {0} vs {1}")]
    Shape(usize, usize),
    #[error("segmenter output for {id}: {detail}")]
    Output { id: String, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("image encoding: {0}")]
    Image(String),
}

/// Coordinate space distances are reported in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Basis {
    /// The network's square input space.
    #[default]
    Resized,
    /// Pixel coordinates of the original image.
    Original,
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Basis::Resized => "resized",
            Basis::Original => "original",
        })
    }
}

impl FromStr for Basis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "resized" => Ok(Basis::Resized),
            "original" => Ok(Basis::Original),
            _ => Err(format!("unknown basis `{s}` (expected resized or original)")),
        }
    }
}

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Centroid `(x, y)` of the largest 4-connected region above `threshold`.
///
/// Equal-size regions are resolved in favour of the one whose first pixel
/// comes first in raster order. Returns `None` when nothing exceeds the
/// threshold.
pub fn extract_centroid(prob: &[f32], width: usize, height: usize, threshold: f32) -> Option<(f64, f64)> {
    assert_eq!(prob.len(), width * height, "probability map size");
    let mut seen = vec![false; prob.len()];
    let mut queue = VecDeque::new();
    let mut best: Option<(usize, f64, f64)> = None;
    for seed in 0..prob.len() {
        if seen[seed] || prob[seed] <= threshold {
            continue;
        }
        seen[seed] = true;
        queue.push_back(seed);
        let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % width, i / width);
            n += 1;
            sx += x as f64;
            sy += y as f64;
            let mut visit = |j: usize| {
                if !seen[j] && prob[j] > threshold {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
        }
        if best.is_none_or(|(m, _, _)| n > m) {
            best = Some((n, sx, sy));
        }
    }
    best.map(|(n, sx, sy)| (sx / n as f64, sy / n as f64))
}

/// Distance between a predicted and a true point given in resized coordinates.
pub fn euclidean_distance(pred: (f64, f64), truth: (f64, f64), scale: ScaleFactors, basis: Basis) -> f64 {
    let (p, t) = match basis {
        Basis::Resized => (pred, truth),
        Basis::Original => (scale.to_original(pred), scale.to_original(truth)),
    };
    (p.0 - t.0).hypot(p.1 - t.1)
}

/// `2|P∩G| / (|P|+|G|)`, and 1 when both masks are empty.
pub fn dice_coefficient(pred: &[bool], truth: &[bool]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::Shape(pred.len(), truth.len()));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(truth) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

pub fn binarize(prob: &[f32], threshold: f32) -> Vec<bool> {
    prob.iter().map(|&p| p > threshold).collect()
}

/// Anything that maps a 1×3×S×S image to 1×2×S×S probabilities.
pub trait Segmenter {
    fn segment(&self, sample: &Prepared) -> Result<Tensor, MetricsError>;
}

impl Segmenter for Network<f32> {
    fn segment(&self, sample: &Prepared) -> Result<Tensor, MetricsError> {
        let mut logits = self.predict(&sample.image)?;
        for v in logits.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        Ok(logits)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    /// Missing when the fovea channel has no pixel above threshold.
    pub fovea_ed: Option<f64>,
    pub od_ed: Option<f64>,
    pub od_dc: Option<f64>,
}

/// Mean of the defined entries and how many there were.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub count: usize,
}

impl Aggregate {
    fn of(values: impl Iterator<Item = Option<f64>>) -> Self {
        let (mut sum, mut count) = (0.0, 0);
        for v in values.flatten() {
            sum += v;
            count += 1;
        }
        Aggregate { mean: (count > 0).then(|| sum / count as f64), count }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub basis: Basis,
    pub rows: Vec<EvalRow>,
    pub fovea_ed: Aggregate,
    pub od_ed: Aggregate,
    pub od_dc: Aggregate,
    /// Whether any sample carried optic-disc ground truth.
    pub has_od: bool,
    /// Samples whose ground truth could not support a metric.
    pub warnings: Vec<String>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl EvalReport {
    /// `id,fovea_ed,od_ed,od_dc` rows (optic-disc columns only when annotated)
    /// followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(if self.has_od { "id,fovea_ed,od_ed,od_dc\n" } else { "id,fovea_ed\n" });
        let mut line = |id: &str, f: Option<f64>, e: Option<f64>, d: Option<f64>| {
            out.push_str(id);
            out.push(',');
            out.push_str(&cell(f));
            if self.has_od {
                out.push_str(&format!(",{},{}", cell(e), cell(d)));
            }
            out.push('\n');
        };
        for r in &self.rows {
            line(&r.id, r.fovea_ed, r.od_ed, r.od_dc);
        }
        line("mean", self.fovea_ed.mean, self.od_ed.mean, self.od_dc.mean);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Metrics of one sample from its predicted probabilities.
pub fn score_sample(sample: &Prepared, probs: &Tensor, basis: Basis) -> Result<EvalRow, MetricsError> {
    let size = sample.target.size();
    let want = crate::Shape::new(1, 2, size, size);
    if probs.shape() != want {
        return Err(MetricsError::Output {
            id: sample.id.clone(),
            detail: format!("expected {want}, got {}", probs.shape()),
        });
    }
    let plane = size * size;
    let (fovea, od) = probs.data().split_at(plane);
    let centroid = |p: &[f32]| extract_centroid(p, size, size, DEFAULT_THRESHOLD);
    let fovea_ed = centroid(fovea).map(|c| euclidean_distance(c, sample.fovea_xy, sample.scale, basis));
    let od_ed = match (centroid(od), sample.od_xy) {
        (Some(c), Some(t)) => Some(euclidean_distance(c, t, sample.scale, basis)),
        _ => None,
    };
    let od_dc = if sample.has_od_mask {
        let truth: Vec<bool> = sample.target.od().iter().map(|&v| v > 0.5).collect();
        Some(dice_coefficient(&binarize(od, DEFAULT_THRESHOLD), &truth)?)
    } else {
        None
    };
    Ok(EvalRow { id: sample.id.clone(), fovea_ed, od_ed, od_dc })
}

/// Runs `model` over `data` and collects per-sample and mean metrics.
pub fn evaluate(model: &dyn Segmenter, data: &[Prepared], basis: Basis) -> Result<EvalReport, MetricsError> {
    let mut order: Vec<&Prepared> = data.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rows = Vec::with_capacity(order.len());
    let mut warnings = Vec::new();
    let has_od = data.iter().any(|s| s.has_od_mask || s.od_xy.is_some());
    for s in order {
        let probs = model.segment(s)?;
        rows.push(score_sample(s, &probs, basis)?);
        if has_od && !s.has_od_mask {
            warnings.push(format!("{}: no optic-disc mask, od_dc omitted", s.id));
        }
        if has_od && s.od_xy.is_none() {
            warnings.push(format!("{}: no optic-disc center, od_ed omitted", s.id));
        }
    }
    Ok(EvalReport {
        basis,
        fovea_ed: Aggregate::of(rows.iter().map(|r| r.fovea_ed)),
        od_ed: Aggregate::of(rows.iter().map(|r| r.od_ed)),
        od_dc: Aggregate::of(rows.iter().map(|r| r.od_dc)),
        rows,
        has_od,
        warnings,
    })
}
