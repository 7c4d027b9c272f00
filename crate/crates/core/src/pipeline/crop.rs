//! Context-padded square crops with average-channel padding.
//!
//! Image coordinates are continuous with pixel `(i, j)` covering
//! `[j, j+1) × [i, i+1)`; pixel values live at pixel centers. A patch of side
//! `T` maps patch coordinate `q` to image coordinate `origin + q·scale`.

use crate::error::{dim_err, Error, Result};
use crate::localize::BoundingBox;
use crate::tensor::Tensor;
use crate::transformer::PadMask;

/// One RGB frame with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pixels: Tensor,
    pub index: usize,
}

impl Frame {
    pub fn new(pixels: Tensor, index: usize) -> Result<Self> {
        let (c, h, w) = pixels.dims3()?;
        if c != 3 || h == 0 || w == 0 {
            return Err(dim_err!("frame must be 3×H×W with nonzero extents, got {:?}", pixels.shape()));
        }
        Ok(Self { pixels, index })
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let n = (self.width() * self.height()) as f64;
        let mut m = [0.0; 3];
        for (c, plane) in self.pixels.data().chunks_exact(self.width() * self.height()).enumerate() {
            m[c] = plane.iter().sum::<f64>() / n;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropResult {
    /// `3×T×T`.
    pub patch: Tensor,
    /// `T×T`; set where the sample fell outside the image.
    pub pad_mask: PadMask,
    /// Image pixels per patch pixel.
    pub scale: f64,
    /// Image coordinates of the patch's top-left corner.
    pub origin: (f64, f64),
}

impl CropResult {
    pub fn size(&self) -> usize {
        self.patch.shape()[2]
    }

    pub fn patch_to_image(&self, q: (f64, f64)) -> (f64, f64) {
        (self.origin.0 + q.0 * self.scale, self.origin.1 + q.1 * self.scale)
    }

    pub fn image_to_patch(&self, p: (f64, f64)) -> (f64, f64) {
        ((p.0 - self.origin.0) / self.scale, (p.1 - self.origin.1) / self.scale)
    }

    pub fn box_to_patch(&self, b: &BoundingBox) -> BoundingBox {
        let (cx, cy) = self.image_to_patch((b.cx, b.cy));
        BoundingBox::new(cx, cy, b.w / self.scale, b.h / self.scale)
    }

    pub fn box_to_image(&self, b: &BoundingBox) -> BoundingBox {
        let (cx, cy) = self.patch_to_image((b.cx, b.cy));
        BoundingBox::new(cx, cy, b.w * self.scale, b.h * self.scale)
    }

    /// Keeps the top-left `stride·⌊T/stride⌋` square.
    pub fn trimmed(&self, stride: usize) -> Result<Self> {
        let t = self.size();
        let n = stride * (t / stride);
        if n == 0 {
            return Err(Error::Config(format!("crop of side {t} is smaller than stride {stride}")));
        }
        if n == t {
            return Ok(self.clone());
        }
        let patch = Tensor::from_fn([3, n, n], |i| {
            let (c, y, x) = (i / (n * n), (i / n) % n, i % n);
            self.patch.at(&[c, y, x])
        });
        let cells = (0..n * n).map(|i| self.pad_mask.is_padded(i / n, i % n)).collect();
        Ok(Self { patch, pad_mask: PadMask::new(n, n, cells)?, scale: self.scale, origin: self.origin })
    }

    /// Grid-resolution mask: a cell is padded when every pixel of its
    /// `stride×stride` block is padded.
    pub fn grid_mask(&self, stride: usize) -> Result<PadMask> {
        let t = self.size();
        if stride == 0 || t % stride != 0 {
            return Err(Error::Config(format!("crop side {t} is not a multiple of stride {stride}")));
        }
        let g = t / stride;
        let cells = (0..g * g)
            .map(|c| {
                let (cy, cx) = (c / g, c % g);
                (0..stride * stride).all(|k| self.pad_mask.is_padded(cy * stride + k / stride, cx * stride + k % stride))
            })
            .collect();
        PadMask::new(g, g, cells)
    }
}

/// Side of the context square `√((w+p)(h+p))`, `p = (w+h)/2`.
pub fn context_side(b: &BoundingBox) -> f64 {
    let p = (b.w + b.h) / 2.0;
    ((b.w + p) * (b.h + p)).sqrt()
}

/// Bilinear sample of channel `c` at pixel-index coordinates `(sx, sy)`,
/// which must lie in `[0, W−1] × [0, H−1]`.
pub fn bilinear(frame: &Frame, c: usize, sx: f64, sy: f64) -> f64 {
    let (w, h) = (frame.width(), frame.height());
    let x0 = (sx.floor() as usize).min(w - 1);
    let y0 = (sy.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
    let px = |y: usize, x: usize| frame.pixels.data()[(c * h + y) * w + x];
    let top = (1.0 - fx) * px(y0, x0) + fx * px(y0, x1);
    let bottom = (1.0 - fx) * px(y1, x0) + fx * px(y1, x1);
    (1.0 - fy) * top + fy * bottom
}

/// Resamples the square of side `side` centered on `center` to `size×size`.
pub fn crop_square(frame: &Frame, center: (f64, f64), side: f64, size: usize) -> Result<CropResult> {
    if size == 0 || !(side > 0.0) || !side.is_finite() {
        return Err(Error::Parameter(format!("invalid crop of side {side} resampled to {size}")));
    }
    let scale = side / size as f64;
    let origin = (center.0 - size as f64 / 2.0 * scale, center.1 - size as f64 / 2.0 * scale);
    let (w, h) = (frame.width(), frame.height());
    let means = frame.channel_means();
    let mut patch = Tensor::zeros([3, size, size]);
    let mut cells = vec![false; size * size];
    let plane = size * size;
    for v in 0..size {
        let sy = origin.1 + (v as f64 + 0.5) * scale - 0.5;
        for u in 0..size {
            let sx = origin.0 + (u as f64 + 0.5) * scale - 0.5;
            let inside = sx >= 0.0 && sx <= (w - 1) as f64 && sy >= 0.0 && sy <= (h - 1) as f64;
            let i = v * size + u;
            cells[i] = !inside;
            for (c, mean) in means.iter().enumerate() {
                patch.data_mut()[c * plane + i] = if inside { bilinear(frame, c, sx, sy) } else { *mean };
            }
        }
    }
    Ok(CropResult { patch, pad_mask: PadMask::new(size, size, cells)?, scale, origin })
}

fn check_box(frame: &Frame, b: &BoundingBox) -> Result<()> {
    if !b.is_valid() {
        return Err(Error::Parameter(format!("invalid box {b:?}")));
    }
    let image = BoundingBox::from_corner(0.0, 0.0, frame.width() as f64, frame.height() as f64);
    if b.intersection(&image) <= 0.0 {
        return Err(Error::Tracking(format!("box {b:?} lies outside the {}x{} frame", frame.width(), frame.height())));
    }
    Ok(())
}

/// Template crop: the context square around `b` resampled to `size×size`.
pub fn crop_template(frame: &Frame, b: &BoundingBox, size: usize) -> Result<CropResult> {
    check_box(frame, b)?;
    crop_square(frame, (b.cx, b.cy), context_side(b), size)
}

/// Search crop: the template rule scaled by `search_size / template_size`.
pub fn crop_search(frame: &Frame, prev: &BoundingBox, search_size: usize, template_size: usize) -> Result<CropResult> {
    check_box(frame, prev)?;
    if template_size == 0 || search_size < template_size {
        return Err(Error::Config(format!("search size {search_size} must be at least template size {template_size}")));
    }
    let side = context_side(prev) * search_size as f64 / template_size as f64;
    crop_square(frame, (prev.cx, prev.cy), side, search_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_frame(w: usize, h: usize, rgb: [f64; 3]) -> Frame {
        Frame::new(Tensor::from_fn([3, h, w], |i| rgb[i / (w * h)]), 0).unwrap()
    }

    #[test]
    fn interior_crop_has_no_padding() {
        let f = uniform_frame(200, 200, [0.2, 0.4, 0.6]);
        let c = crop_template(&f, &BoundingBox::new(100.0, 100.0, 20.0, 20.0), 32).unwrap();
        assert_eq!(c.pad_mask.count(), 0);
        assert!(c.patch.data()[..32 * 32].iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn corner_crop_pads_with_channel_means() {
        let f = Frame::new(Tensor::from_fn([3, 40, 40], |i| (i % 7) as f64 / 7.0), 0).unwrap();
        let c = crop_template(&f, &BoundingBox::new(2.0, 2.0, 10.0, 10.0), 16).unwrap();
        let means = f.channel_means();
        assert!(c.pad_mask.is_padded(0, 0));
        assert!(!c.pad_mask.is_padded(15, 15));
        for ch in 0..3 {
            assert_eq!(c.patch.at(&[ch, 0, 0]), means[ch]);
        }
    }

    #[test]
    fn center_maps_to_patch_center() {
        let f = uniform_frame(300, 200, [0.5; 3]);
        let b = BoundingBox::new(140.0, 90.0, 30.0, 20.0);
        let c = crop_search(&f, &b, 64, 32).unwrap();
        let q = c.image_to_patch((b.cx, b.cy));
        assert!((q.0 - 32.0).abs() < 1e-9 && (q.1 - 32.0).abs() < 1e-9);
    }

    #[test]
    fn box_outside_frame_is_a_tracking_error() {
        let f = uniform_frame(50, 50, [0.5; 3]);
        let r = crop_template(&f, &BoundingBox::new(-40.0, 20.0, 10.0, 10.0), 16);
        assert!(matches!(r, Err(Error::Tracking(_))));
    }

    #[test]
    fn trim_and_grid_mask() {
        let f = uniform_frame(60, 60, [0.5; 3]);
        let c = crop_search(&f, &BoundingBox::new(5.0, 30.0, 10.0, 10.0), 36, 18).unwrap();
        let t = c.trimmed(8).unwrap();
        assert_eq!(t.size(), 32);
        assert_eq!(t.patch.at(&[1, 3, 4]), c.patch.at(&[1, 3, 4]));
        let g = t.grid_mask(8).unwrap();
        assert_eq!((g.height, g.width), (4, 4));
        assert!(g.is_padded(2, 0));
        assert!(!g.is_padded(2, 3));
    }
}
