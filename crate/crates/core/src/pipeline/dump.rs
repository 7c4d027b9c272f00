//! CSV and 8-bit PGM dumps of heatmaps and attention maps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub fn to_csv(map: &Tensor) -> Result<String> {
    let (r, c) = map.dims2()?;
    let mut out = String::with_capacity(r * c * 12);
    for i in 0..r {
        for (j, v) in map.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_csv(path: &Path, map: &Tensor) -> Result<()> {
    Ok(fs::write(path, to_csv(map)?)?)
}

fn normalize(values: &[f64]) -> impl Iterator<Item = u8> + '_ {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    values.iter().map(move |&v| if v.is_finite() { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
}

/// 8-bit gray levels, min-max normalized over the whole map or per row.
pub fn to_gray(map: &Tensor, per_row: bool) -> Result<Vec<u8>> {
    let (r, c) = map.dims2()?;
    if per_row {
        Ok((0..r).flat_map(|i| normalize(map.row(i)).collect::<Vec<_>>()).collect())
    } else {
        let _ = c;
        Ok(normalize(map.data()).collect())
    }
}

pub fn write_pgm(path: &Path, map: &Tensor, per_row: bool) -> Result<()> {
    let (r, c) = map.dims2()?;
    let gray = to_gray(map, per_row)?;
    let file = fs::File::create(path)?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&gray, c as u32, r as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))
}

/// Row `query` of an attention matrix laid out on the key grid `h×w`.
pub fn attention_row_map(attention: &Tensor, query: usize, h: usize, w: usize) -> Result<Tensor> {
    let (n, m) = attention.dims2()?;
    if query >= n || m != h * w {
        return Err(dim_err!("query {query} / key grid {h}x{w} do not fit a {n}x{m} attention map"));
    }
    Tensor::new([h, w], attention.row(query).to_vec())
}
