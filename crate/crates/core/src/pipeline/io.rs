//! Sequence directories: numbered image files plus `groundtruth_rect.txt`
//! with one `x,y,w,h` (top-left) line per frame.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};

use super::crop::Frame;
use crate::error::{Error, Result};
use crate::localize::BoundingBox;
use crate::tensor::Tensor;

pub const GROUNDTRUTH_FILE: &str = "groundtruth_rect.txt";

const IMAGE_EXTENSIONS: [&str; 4] = ["ppm", "pgm", "pnm", "png"];

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Input(format!("image decode failed: {e}"))
    }
}

/// Parses `x,y,w,h` lines; commas, tabs and spaces all separate fields.
pub fn parse_boxes(text: &str) -> Result<Vec<BoundingBox>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let v: Vec<f64> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|_| Error::Input(format!("line {}: bad number `{s}`", i + 1))))
                .collect::<Result<_>>()?;
            if v.len() != 4 {
                return Err(Error::Input(format!("line {}: expected 4 values, got {}", i + 1, v.len())));
            }
            Ok(BoundingBox::from_corner(v[0], v[1], v[2], v[3]))
        })
        .collect()
}

pub fn format_boxes(boxes: &[BoundingBox]) -> String {
    boxes
        .iter()
        .map(|b| {
            let [x, y, w, h] = b.to_corner();
            format!("{x},{y},{w},{h}\n")
        })
        .collect()
}

pub fn read_boxes(path: &Path) -> Result<Vec<BoundingBox>> {
    parse_boxes(&fs::read_to_string(path)?)
}

pub fn write_boxes(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    Ok(fs::write(path, format_boxes(boxes))?)
}

pub fn load_frame(path: &Path, index: usize) -> Result<Frame> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let pixels = Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (w * h), i % (w * h));
        raw[p * 3 + c] as f64 / 255.0
    });
    Frame::new(pixels, index)
}

pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    let (w, h) = (frame.width(), frame.height());
    let data = frame.pixels.data();
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb(std::array::from_fn(|c| (data[c * w * h + p].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path).map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))
}

/// Image files of a sequence directory in name order.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("no image files in {}", dir.display())));
    }
    Ok(paths)
}

/// Frames and (if present) ground truth of a sequence directory.
pub fn load_sequence(dir: &Path) -> Result<(Vec<Frame>, Option<Vec<BoundingBox>>)> {
    let frames = frame_paths(dir)?
        .iter()
        .enumerate()
        .map(|(i, p)| load_frame(p, i))
        .collect::<Result<Vec<_>>>()?;
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let truth = if gt_path.exists() { Some(read_boxes(&gt_path)?) } else { None };
    if let Some(t) = &truth {
        if t.len() < frames.len() {
            return Err(Error::Input(format!("{} ground-truth lines for {} frames", t.len(), frames.len())));
        }
    }
    Ok((frames, truth))
}

/// Writes frames as `0001.ppm`, … and the ground-truth file.
pub fn save_sequence(dir: &Path, frames: &[Frame], truth: &[BoundingBox]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        save_frame(f, &dir.join(format!("{:04}.ppm", i + 1)))?;
    }
    write_boxes(&dir.join(GROUNDTRUTH_FILE), truth)
}
