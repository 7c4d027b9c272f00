//! `TRTR-CKPT v1` parameter archive.
//!
//! Layout: the header line, a line with the parameter count, then for each
//! parameter a line `<name> <rank> <d0> ... <dn>` followed immediately by
//! `8·numel` bytes of little-endian `f64`.

use std::io::{BufRead, Write};

use super::{Tensor, TransformerWeights};
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "TRTR-CKPT v1";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(weights: &TransformerWeights, mut out: W) -> Result<()> {
    writeln!(out, "{CHECKPOINT_HEADER}")?;
    writeln!(out, "{}", weights.len())?;
    for p in weights.iter() {
        if p.name.chars().any(char::is_whitespace) {
            return Err(bad(format!("parameter name `{}` contains whitespace", p.name)));
        }
        let shape = p.value.shape();
        write!(out, "{} {}", p.name, shape.len())?;
        for d in shape {
            write!(out, " {d}")?;
        }
        writeln!(out)?;
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_line<R: BufRead>(input: &mut R) -> Result<String> {
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Err(bad("unexpected end of file"));
    }
    Ok(line.trim_end_matches('\n').to_string())
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<TransformerWeights> {
    let header = read_line(&mut input)?;
    if header != CHECKPOINT_HEADER {
        return Err(bad(format!("bad header `{header}`")));
    }
    let count: usize = read_line(&mut input)?
        .parse()
        .map_err(|_| bad("bad parameter count"))?;
    let mut weights = TransformerWeights::new();
    for _ in 0..count {
        let line = read_line(&mut input)?;
        let mut fields = line.split(' ');
        let name = fields.next().filter(|s| !s.is_empty()).ok_or_else(|| bad("missing name"))?;
        let nums: Vec<usize> = fields
            .map(|f| f.parse().map_err(|_| bad(format!("bad extent `{f}` for `{name}`"))))
            .collect::<Result<_>>()?;
        let (rank, shape) = nums.split_first().ok_or_else(|| bad("missing rank"))?;
        if *rank != shape.len() {
            return Err(bad(format!("rank {rank} but {} extents for `{name}`", shape.len())));
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        input.read_exact(&mut bytes).map_err(|_| bad(format!("truncated data for `{name}`")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        weights.insert(name, Tensor::new(shape.to_vec(), data)?)?;
    }
    Ok(weights)
}
