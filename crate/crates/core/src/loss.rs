//! Training objective: size-adaptive Gaussian labels, the penalty-reduced
//! focal loss on the classification map, and L1 losses on offset and size.

use crate::error::{dim_err, Error, Result};
use crate::localize::GridPoint;
use crate::tensor::{Tensor, Var};

/// Predictions are clamped to `[PRED_CLAMP, 1 − PRED_CLAMP]` before logs.
pub const PRED_CLAMP: f64 = 1e-7;
/// Minimum IoU a perturbed box must keep when sizing the label radius.
pub const MIN_OVERLAP: f64 = 0.7;
/// Lower bound on the label standard deviation, in grid cells.
pub const MIN_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 4.0 }
    }
}

/// `exp(−((x−p̃x)² + (y−p̃y)²) / 2σ²)` on an `Hs×Ws` grid.
pub fn gaussian_label(center: GridPoint, sigma: f64, hs: usize, ws: usize) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("label sigma must be positive, got {sigma}")));
    }
    if center.x >= ws || center.y >= hs {
        return Err(dim_err!("label center ({}, {}) outside {hs}x{ws} grid", center.x, center.y));
    }
    let denom = 2.0 * sigma * sigma;
    Ok(Tensor::from_fn([hs, ws], |i| {
        let dx = (i % ws) as f64 - center.x as f64;
        let dy = (i / ws) as f64 - center.y as f64;
        (-(dx * dx + dy * dy) / denom).exp()
    }))
}

fn smaller_root(a: f64, b: f64, c: f64) -> f64 {
    // a·r² + b·r + c = 0; the smaller nonnegative root of the three cases.
    let disc = (b * b - 4.0 * a * c).max(0.0);
    (-b - disc.sqrt()) / (2.0 * a)
}

/// Largest shift `r` (grid cells) for which the three corner perturbations
/// (both corners moved together, both moved inward, both moved outward) keep
/// IoU ≥ `min_overlap` with the original `w×h` box.
pub fn gaussian_radius(w: f64, h: f64, min_overlap: f64) -> f64 {
    let o = min_overlap;
    // translation: (w−r)(h−r) / (2wh − (w−r)(h−r)) = o
    let r1 = smaller_root(1.0, -(w + h), w * h * (1.0 - o) / (1.0 + o));
    // shrink: (w−2r)(h−2r) / wh = o
    let r2 = smaller_root(4.0, -2.0 * (w + h), (1.0 - o) * w * h);
    // grow: wh / ((w+2r)(h+2r)) = o
    let r3 = {
        let (a, b, c) = (4.0 * o, 2.0 * o * (w + h), (o - 1.0) * w * h);
        (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)
    };
    r1.min(r2).min(r3)
}

/// `σ_p = max(r/3, 0.5)` for a box given in grid cells.
pub fn adaptive_sigma(w: f64, h: f64) -> f64 {
    (gaussian_radius(w, h, MIN_OVERLAP) / 3.0).max(MIN_SIGMA)
}

/// Value and elementwise derivative of the focal loss; positives are the
/// cells where the label equals exactly 1.
pub fn focal_loss_with_grad(pred: &Tensor, label: &Tensor, p: FocalParams) -> Result<(f64, Vec<f64>)> {
    if pred.shape() != label.shape() {
        return Err(dim_err!("prediction {:?} and label {:?} differ", pred.shape(), label.shape()));
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&raw, &target) in pred.data().iter().zip(label.data()) {
        let clamped = !(PRED_CLAMP..=1.0 - PRED_CLAMP).contains(&raw);
        let y = raw.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
        let (loss, d) = if target == 1.0 {
            let m = 1.0 - y;
            let loss = -m.powf(p.alpha) * y.ln();
            let d = p.alpha * m.powf(p.alpha - 1.0) * y.ln() - m.powf(p.alpha) / y;
            (loss, d)
        } else {
            let w = (1.0 - target).powf(p.beta);
            let l1y = (1.0 - y).ln();
            let loss = -w * y.powf(p.alpha) * l1y;
            let d = -w * (p.alpha * y.powf(p.alpha - 1.0) * l1y - y.powf(p.alpha) / (1.0 - y));
            (loss, d)
        };
        total += loss;
        grad.push(if clamped { 0.0 } else { d });
    }
    Ok((total, grad))
}

/// Penalty-reduced pixel-wise focal loss, summed without normalization.
pub fn focal_loss<'g>(pred: &Var<'g>, label: &Tensor, p: FocalParams) -> Result<Var<'g>> {
    let (value, grad) = focal_loss_with_grad(&pred.value(), label, p)?;
    pred.reduction(value, grad)
}

/// Component-sum `|map[:, p̃] − target|` on a `2×Hs×Ws` map.
fn l1_at<'g>(map: &Var<'g>, cell: GridPoint, target: [f64; 2]) -> Result<Var<'g>> {
    let m = map.value();
    let (c, hs, ws) = m.dims3()?;
    if c != 2 {
        return Err(dim_err!("expected a 2-channel map, got {c}"));
    }
    if cell.x >= ws || cell.y >= hs {
        return Err(dim_err!("cell ({}, {}) outside {hs}x{ws} grid", cell.x, cell.y));
    }
    let mut grad = vec![0.0; m.len()];
    let mut value = 0.0;
    for (ch, t) in target.iter().enumerate() {
        let idx = (ch * hs + cell.y) * ws + cell.x;
        let diff = m.data()[idx] - t;
        value += diff.abs();
        grad[idx] = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    map.reduction(value, grad)
}

/// Grid cell containing pixel position `center` at stride `s`.
pub fn low_res_center(center: (f64, f64), stride: usize) -> GridPoint {
    let s = stride as f64;
    GridPoint { x: (center.0 / s).floor().max(0.0) as usize, y: (center.1 / s).floor().max(0.0) as usize }
}

/// `|O(p̃) − (p̄/s − p̃)|` evaluated at the low-resolution center only.
pub fn offset_loss<'g>(offset: &Var<'g>, center: (f64, f64), stride: usize) -> Result<Var<'g>> {
    if center.0 < 0.0 || center.1 < 0.0 {
        return Err(dim_err!("target center ({}, {}) outside the search image", center.0, center.1));
    }
    let cell = low_res_center(center, stride);
    let s = stride as f64;
    l1_at(offset, cell, [center.0 / s - cell.x as f64, center.1 / s - cell.y as f64])
}

/// `|S(p̃) − s̃|` evaluated at the low-resolution center only.
pub fn size_loss<'g>(size: &Var<'g>, normalized: (f64, f64), cell: GridPoint) -> Result<Var<'g>> {
    l1_at(size, cell, [normalized.0, normalized.1])
}

/// `L = L_Y + λ1·L_O + λ2·L_S`.
pub fn joint_loss<'g>(ly: &Var<'g>, lo: &Var<'g>, ls: &Var<'g>, lambda_offset: f64, lambda_size: f64) -> Result<Var<'g>> {
    ly.add(&lo.scale(lambda_offset))?.add(&ls.scale(lambda_size))
}

/// Label terms for one search image.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Target center in search-image pixels.
    pub center: (f64, f64),
    pub cell: GridPoint,
    /// Target size in search-image pixels.
    pub size: (f64, f64),
    /// `(w/W, h/H)`.
    pub normalized_size: (f64, f64),
    pub label: Tensor,
}

impl GroundTruth {
    /// Builds labels for a target at `center` with pixel `size` inside a
    /// `width×height` search image predicted on an `hs×ws` grid.
    pub fn new(center: (f64, f64), size: (f64, f64), width: usize, height: usize, hs: usize, ws: usize, stride: usize) -> Result<Self> {
        let cell = low_res_center(center, stride);
        if cell.x >= ws || cell.y >= hs || center.0 < 0.0 || center.1 < 0.0 {
            return Err(dim_err!("target center {center:?} outside the {hs}x{ws} grid"));
        }
        let s = stride as f64;
        let sigma = adaptive_sigma(size.0 / s, size.1 / s);
        let label = gaussian_label(cell, sigma, hs, ws)?;
        let normalized_size = ((size.0 / width as f64).clamp(0.0, 1.0), (size.1 / height as f64).clamp(0.0, 1.0));
        Ok(Self { center, cell, size, normalized_size, label })
    }
}
