//! Classification/offset/size heads over the decoder output and the
//! anchor-free decoding of the target box.

use crate::error::{dim_err, Error, Result};
use crate::init::{xavier, SeedRng};
use crate::tensor::{Graph, Tensor, TransformerWeights, Var};

/// Default weight of the cosine window in `Y′ = (1−λ)·Y + λ·window`.
pub const DEFAULT_WINDOW_INFLUENCE: f64 = 0.4;
/// Default interpolation factor for box-size smoothing.
pub const DEFAULT_SIZE_GAMMA: f64 = 0.3;

pub const HEAD_NAMES: [&str; 3] = ["cls", "offset", "size"];

/// Axis-aligned target state in pixels, center-based.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// From top-left `x, y, w, h` (annotation convention).
    pub fn from_corner(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { cx: x + w / 2.0, cy: y + h / 2.0, w, h }
    }

    pub fn to_corner(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let ix = (self.cx + self.w / 2.0).min(other.cx + other.w / 2.0)
            - (self.cx - self.w / 2.0).max(other.cx - other.w / 2.0);
        let iy = (self.cy + self.h / 2.0).min(other.cy + other.h / 2.0)
            - (self.cy - self.h / 2.0).max(other.cy - other.h / 2.0);
        ix.max(0.0) * iy.max(0.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Keeps the center inside `[0, width) × [0, height)` and the size within
    /// `[min_size, frame extent]`.
    pub fn clamped(&self, width: f64, height: f64, min_size: f64) -> Self {
        Self {
            cx: self.cx.clamp(0.0, (width - 1.0).max(0.0)),
            cy: self.cy.clamp(0.0, (height - 1.0).max(0.0)),
            w: self.w.clamp(min_size, width.max(min_size)),
            h: self.h.clamp(min_size, height.max(min_size)),
        }
    }
}

/// A cell of the prediction grid (`x` = column, `y` = row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridPoint {
    pub x: usize,
    pub y: usize,
}

/// Head outputs on the stride-`s` grid: `y` is `Hs×Ws`; `offset` and `size`
/// are `2×Hs×Ws` with channel 0 along x (width) and channel 1 along y (height).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps {
    pub y: Tensor,
    pub offset: Tensor,
    pub size: Tensor,
    pub stride: usize,
}

impl HeadMaps {
    pub fn grid(&self) -> (usize, usize) {
        (self.y.shape()[0], self.y.shape()[1])
    }
}

/// Tape-backed head outputs used during training.
#[derive(Debug, Clone, Copy)]
pub struct HeadMapVars<'g> {
    pub y: Var<'g>,
    pub offset: Var<'g>,
    pub size: Var<'g>,
    pub stride: usize,
}

impl HeadMapVars<'_> {
    pub fn to_maps(&self) -> HeadMaps {
        HeadMaps {
            y: self.y.value().as_ref().clone(),
            offset: self.offset.value().as_ref().clone(),
            size: self.size.value().as_ref().clone(),
            stride: self.stride,
        }
    }
}

fn head_channels(name: &str) -> usize {
    if name == "cls" {
        1
    } else {
        2
    }
}

/// Inserts the three heads, each three position-wise layers `d→d→d→{1,2,2}`.
pub fn init_heads(rng: &mut SeedRng, w: &mut TransformerWeights, d: usize) -> Result<()> {
    for name in HEAD_NAMES {
        let widths = [d, d, d, head_channels(name)];
        for l in 0..3 {
            let (fi, fo) = (widths[l], widths[l + 1]);
            w.insert(format!("heads.{name}.{l}.weight"), xavier(rng, &[fi, fo], fi, fo))?;
            w.insert(format!("heads.{name}.{l}.bias"), Tensor::zeros([fo]))?;
        }
    }
    Ok(())
}

fn run_head<'g>(g: &'g Graph, w: &TransformerWeights, name: &str, x: &Var<'g>, hs: usize, ws: usize) -> Result<Var<'g>> {
    let mut h = *x;
    for l in 0..3 {
        let weight = g.param(w, &format!("heads.{name}.{l}.weight"))?;
        let bias = g.param(w, &format!("heads.{name}.{l}.bias"))?;
        h = h.matmul(&weight)?.add_row(&bias)?;
        h = if l < 2 { h.relu() } else { h.sigmoid() };
    }
    let c = head_channels(name);
    let shape = if c == 1 { vec![hs, ws] } else { vec![c, hs, ws] };
    h.transpose()?.reshape(shape)
}

/// Applies the three heads to the decoder sequence (`Hs·Ws × d`). Each layer
/// is a 1×1 convolution, written as a position-wise linear map.
pub fn heads_forward<'g>(
    graph: &'g Graph,
    weights: &TransformerWeights,
    decoder_seq: &Var<'g>,
    hs: usize,
    ws: usize,
    stride: usize,
) -> Result<HeadMapVars<'g>> {
    let (n, _) = decoder_seq.value().dims2()?;
    if n != hs * ws {
        return Err(dim_err!("{n} decoder tokens cannot form a {hs}x{ws} grid"));
    }
    Ok(HeadMapVars {
        y: run_head(graph, weights, "cls", decoder_seq, hs, ws)?,
        offset: run_head(graph, weights, "offset", decoder_seq, hs, ws)?,
        size: run_head(graph, weights, "size", decoder_seq, hs, ws)?,
        stride,
    })
}

/// Separable raised-cosine prior, peak-normalized to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineWindow {
    pub window: Tensor,
    pub influence: f64,
}

/// Raised cosine over `n` cells; axes of one or two cells are flat.
fn hann(n: usize) -> Vec<f64> {
    if n <= 2 {
        return vec![1.0; n];
    }
    let raw: Vec<f64> = (0..n)
        .map(|i| i.min(n - 1 - i))
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect();
    let peak = raw.iter().copied().fold(0.0, f64::max);
    raw.into_iter().map(|v| v / peak).collect()
}

impl CosineWindow {
    pub fn hann(hs: usize, ws: usize, influence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&influence) {
            return Err(Error::Parameter(format!("window influence {influence} outside [0, 1]")));
        }
        if hs == 0 || ws == 0 {
            return Err(dim_err!("empty window grid"));
        }
        let (wy, wx) = (hann(hs), hann(ws));
        Ok(Self { window: Tensor::from_fn([hs, ws], |i| wy[i / ws] * wx[i % ws]), influence })
    }

    /// Cell with the largest window value (lowest row-major index on ties).
    pub fn center(&self) -> GridPoint {
        argmax(&self.window).expect("window is finite and nonempty")
    }
}

/// `Y′ = (1−λ)·Y + λ·window`.
pub fn apply_window(y: &Tensor, win: &CosineWindow) -> Result<Tensor> {
    let lambda = win.influence;
    y.zip_map(&win.window, |v, c| (1.0 - lambda) * v + lambda * c)
}

/// Peak of a 2-D map; NaNs are skipped and ties go to the lowest row-major
/// index. `None` when every entry is NaN.
pub fn argmax(map: &Tensor) -> Option<GridPoint> {
    let ws = *map.shape().last()?;
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in map.data().iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| GridPoint { x: i % ws, y: i / ws })
}

/// Decoded center in search-image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedCenter {
    pub cx: f64,
    pub cy: f64,
    pub peak: GridPoint,
    pub score: f64,
}

/// `(x_c, y_c) = s · (argmax(Y′) + O(argmax(Y′)))`.
pub fn decode_center(y_prime: &Tensor, offset: &Tensor, stride: usize) -> Result<Option<DecodedCenter>> {
    let (hs, ws) = y_prime.dims2()?;
    if offset.shape() != [2, hs, ws] {
        return Err(dim_err!("offset map {:?} does not match grid {hs}x{ws}", offset.shape()));
    }
    Ok(argmax(y_prime).map(|peak| {
        let s = stride as f64;
        DecodedCenter {
            cx: s * (peak.x as f64 + offset.at(&[0, peak.y, peak.x])),
            cy: s * (peak.y as f64 + offset.at(&[1, peak.y, peak.x])),
            peak,
            score: y_prime.at(&[peak.y, peak.x]),
        }
    }))
}

/// `(w_bb, h_bb) = (W, H) ∗ S(peak)`.
pub fn decode_size(size: &Tensor, peak: GridPoint, width: usize, height: usize) -> Result<(f64, f64)> {
    let (_, hs, ws) = size.dims3()?;
    if peak.x >= ws || peak.y >= hs {
        return Err(dim_err!("peak ({}, {}) outside {hs}x{ws} grid", peak.x, peak.y));
    }
    Ok((width as f64 * size.at(&[0, peak.y, peak.x]), height as f64 * size.at(&[1, peak.y, peak.x])))
}

/// `(1−γ)·prev + γ·pred` per component.
pub fn smooth_size(prev: (f64, f64), pred: (f64, f64), gamma: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Parameter(format!("smoothing factor {gamma} outside [0, 1]")));
    }
    Ok(((1.0 - gamma) * prev.0 + gamma * pred.0, (1.0 - gamma) * prev.1 + gamma * pred.1))
}
