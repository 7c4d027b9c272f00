//! Encoder over template features, decoder over search features, and the
//! fixed 2-D sinusoidal positional encodings with padding masks.
//!
//! Feature maps are channel-first `d×h×w`; sequences are `hw×d` with
//! positions flattened in row-major (y, x) order.

use crate::attention::{
    ffn, multi_head_attention_detailed, residual_norm, AttentionInputs, FfnWeights, LayerNormWeights,
    MultiHeadWeights,
};
use crate::error::{dim_err, Error, Result};
use crate::init::{xavier, SeedRng};
use crate::tensor::{Graph, Tensor, TransformerWeights, Var};

/// Frequency base of the sinusoidal code.
pub const PE_TEMPERATURE: f64 = 10_000.0;

/// Width, head count, FFN width and layer counts of the encoder-decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TransformerConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub n_enc: usize,
    pub n_dec: usize,
}

impl TransformerConfig {
    /// Desk-scale defaults: `d = 32`, four heads, FFN width `8d`, one layer each.
    pub fn desk() -> Self {
        Self::new(32, 4)
    }

    /// Full-size preset: `d = 256`, eight heads.
    pub fn full() -> Self {
        Self::new(256, 8)
    }

    pub fn new(d: usize, heads: usize) -> Self {
        Self { d, heads, ffn_hidden: 8 * d, n_enc: 1, n_dec: 1 }
    }

    pub fn with_layers(mut self, n_enc: usize, n_dec: usize) -> Self {
        self.n_enc = n_enc;
        self.n_dec = n_dec;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide d = {}", self.heads, self.d)));
        }
        if self.d % 4 != 0 {
            return Err(Error::Config(format!("d = {} must be divisible by 4", self.d)));
        }
        if self.n_enc == 0 || self.n_dec == 0 {
            return Err(Error::Config("at least one encoder and one decoder layer are required".into()));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::Config("FFN hidden width must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Boolean grid, `true` marking a padded (out-of-image) cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PadMask {
    pub height: usize,
    pub width: usize,
    cells: Vec<bool>,
}

impl PadMask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(dim_err!("pad mask has {} cells, expected {height}x{width}", cells.len()));
        }
        Ok(Self { height, width, cells })
    }

    pub fn none(height: usize, width: usize) -> Self {
        Self { height, width, cells: vec![false; height * width] }
    }

    pub fn all(height: usize, width: usize) -> Self {
        Self { height, width, cells: vec![true; height * width] }
    }

    pub fn is_padded(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Same grid with positions permuted: output cell `i` takes input cell `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self { height: self.height, width: self.width, cells: perm.iter().map(|&p| self.cells[p]).collect() }
    }
}

/// Fixed sinusoidal table `N×d`, rows of padded positions zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    pub table: Tensor,
}

/// Two-dimensional sinusoidal code: channels `0..d/2` encode the row index,
/// `d/2..d` the column index, each as interleaved (sin, cos) pairs at
/// geometrically spaced frequencies.
pub fn build_positional_encoding(height: usize, width: usize, d: usize, pad_mask: &PadMask) -> Result<PositionalEncoding> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!("positional encoding width {d} must be a positive multiple of 4")));
    }
    if pad_mask.height != height || pad_mask.width != width {
        return Err(dim_err!(
            "pad mask {}x{} does not match grid {height}x{width}",
            pad_mask.height,
            pad_mask.width
        ));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half / 2).map(|i| PE_TEMPERATURE.powf(-((2 * i) as f64) / half as f64)).collect();
    let mut table = Tensor::zeros([height * width, d]);
    let data = table.data_mut();
    for y in 0..height {
        for x in 0..width {
            if pad_mask.is_padded(y, x) {
                continue;
            }
            let row = &mut data[(y * width + x) * d..(y * width + x + 1) * d];
            for (i, f) in freqs.iter().enumerate() {
                row[2 * i] = (y as f64 * f).sin();
                row[2 * i + 1] = (y as f64 * f).cos();
                row[half + 2 * i] = (x as f64 * f).sin();
                row[half + 2 * i + 1] = (x as f64 * f).cos();
            }
        }
    }
    Ok(PositionalEncoding { table })
}

/// `d×h×w` map → `hw×d` sequence.
pub fn flatten<'g>(map: &Var<'g>) -> Result<Var<'g>> {
    let (d, h, w) = map.value().dims3()?;
    map.reshape([d, h * w])?.transpose()
}

/// `hw×d` sequence → `d×h×w` map.
pub fn unflatten<'g>(seq: &Var<'g>, h: usize, w: usize) -> Result<Var<'g>> {
    let (n, d) = seq.value().dims2()?;
    if n != h * w {
        return Err(dim_err!("sequence of {n} tokens cannot fill a {h}x{w} grid"));
    }
    seq.transpose()?.reshape([d, h, w])
}

/// Template feature map and its padding mask.
#[derive(Debug, Clone)]
pub struct EncoderInput<'g> {
    pub z0: Var<'g>,
    pub pad_mask: PadMask,
}

/// Search feature map and its padding mask.
#[derive(Debug, Clone)]
pub struct DecoderInput<'g> {
    pub x0: Var<'g>,
    pub pad_mask: PadMask,
}

struct EncoderLayer<'g> {
    attn: MultiHeadWeights<'g>,
    norm1: LayerNormWeights<'g>,
    ffn: FfnWeights<'g>,
}

impl<'g> EncoderLayer<'g> {
    fn load(g: &'g Graph, w: &TransformerWeights, layer: usize, heads: usize) -> Result<Self> {
        let p = format!("encoder.{layer}");
        Ok(Self {
            attn: MultiHeadWeights::load(g, w, &format!("{p}.self_attn"), heads)?,
            norm1: LayerNormWeights::load(g, w, &format!("{p}.norm1"))?,
            ffn: FfnWeights::load(g, w, &format!("{p}.ffn"), &format!("{p}.norm2"))?,
        })
    }
}

struct DecoderLayer<'g> {
    self_attn: MultiHeadWeights<'g>,
    norm1: LayerNormWeights<'g>,
    cross_attn: MultiHeadWeights<'g>,
    norm2: LayerNormWeights<'g>,
    ffn: FfnWeights<'g>,
}

impl<'g> DecoderLayer<'g> {
    fn load(g: &'g Graph, w: &TransformerWeights, layer: usize, heads: usize) -> Result<Self> {
        let p = format!("decoder.{layer}");
        Ok(Self {
            self_attn: MultiHeadWeights::load(g, w, &format!("{p}.self_attn"), heads)?,
            norm1: LayerNormWeights::load(g, w, &format!("{p}.norm1"))?,
            cross_attn: MultiHeadWeights::load(g, w, &format!("{p}.cross_attn"), heads)?,
            norm2: LayerNormWeights::load(g, w, &format!("{p}.norm2"))?,
            ffn: FfnWeights::load(g, w, &format!("{p}.ffn"), &format!("{p}.norm3"))?,
        })
    }
}

/// Encoder memory plus every self-attention map (`[layer][head]`).
pub struct Encoded<'g> {
    pub memory: Var<'g>,
    pub pe: Var<'g>,
    pub attention: Vec<Vec<Var<'g>>>,
}

/// Decoder sequence (`HW×d`), its map form and attention maps per layer.
pub struct Decoded<'g> {
    pub sequence: Var<'g>,
    pub map: Var<'g>,
    pub self_attention: Vec<Vec<Var<'g>>>,
    pub cross_attention: Vec<Vec<Var<'g>>>,
}

fn check_width(map: &Var<'_>, cfg: &TransformerConfig) -> Result<(usize, usize)> {
    let (d, h, w) = map.value().dims3()?;
    if d != cfg.d {
        return Err(dim_err!("feature width {d} does not match model width {}", cfg.d));
    }
    Ok((h, w))
}

/// Flattens the template map and applies `cfg.n_enc` encoder layers.
pub fn encode<'g>(
    graph: &'g Graph,
    weights: &TransformerWeights,
    cfg: &TransformerConfig,
    input: &EncoderInput<'g>,
) -> Result<Encoded<'g>> {
    cfg.validate()?;
    let (h, w) = check_width(&input.z0, cfg)?;
    let pe = graph.constant(build_positional_encoding(h, w, cfg.d, &input.pad_mask)?.table);
    let mut x = flatten(&input.z0)?;
    let mut attention = Vec::with_capacity(cfg.n_enc);
    for layer in 0..cfg.n_enc {
        let lw = EncoderLayer::load(graph, weights, layer, cfg.heads)?;
        let inputs = AttentionInputs { xq: x, xkv: x, pq: pe, pk: pe };
        let mha = multi_head_attention_detailed(&inputs, &lw.attn)?;
        let y = residual_norm(&mha.output, &x, &lw.norm1)?;
        x = ffn(&y, &lw.ffn)?;
        attention.push(mha.maps);
    }
    Ok(Encoded { memory: x, pe, attention })
}

/// Decodes the search map against encoder `memory` (all positions in
/// parallel) and reverts the result to `d×H×W`.
pub fn decode<'g>(
    graph: &'g Graph,
    weights: &TransformerWeights,
    cfg: &TransformerConfig,
    input: &DecoderInput<'g>,
    memory: &Var<'g>,
    memory_pe: &Var<'g>,
) -> Result<Decoded<'g>> {
    cfg.validate()?;
    let (h, w) = check_width(&input.x0, cfg)?;
    let (_, md) = memory.value().dims2()?;
    if md != cfg.d {
        return Err(dim_err!("memory width {md} does not match model width {}", cfg.d));
    }
    let pe = graph.constant(build_positional_encoding(h, w, cfg.d, &input.pad_mask)?.table);
    let mut x = flatten(&input.x0)?;
    let mut self_attention = Vec::with_capacity(cfg.n_dec);
    let mut cross_attention = Vec::with_capacity(cfg.n_dec);
    for layer in 0..cfg.n_dec {
        let lw = DecoderLayer::load(graph, weights, layer, cfg.heads)?;
        let sa = multi_head_attention_detailed(&AttentionInputs { xq: x, xkv: x, pq: pe, pk: pe }, &lw.self_attn)?;
        let y = residual_norm(&sa.output, &x, &lw.norm1)?;
        let ca = multi_head_attention_detailed(
            &AttentionInputs { xq: y, xkv: *memory, pq: pe, pk: *memory_pe },
            &lw.cross_attn,
        )?;
        let z = residual_norm(&ca.output, &y, &lw.norm2)?;
        x = ffn(&z, &lw.ffn)?;
        self_attention.push(sa.maps);
        cross_attention.push(ca.maps);
    }
    let map = unflatten(&x, h, w)?;
    Ok(Decoded { sequence: x, map, self_attention, cross_attention })
}

/// Encoder stack followed by decoder stack; every decoder layer attends to
/// the final encoder memory.
pub fn run_transformer<'g>(
    graph: &'g Graph,
    weights: &TransformerWeights,
    cfg: &TransformerConfig,
    enc_in: &EncoderInput<'g>,
    dec_in: &DecoderInput<'g>,
) -> Result<Decoded<'g>> {
    let enc = encode(graph, weights, cfg, enc_in)?;
    decode(graph, weights, cfg, dec_in, &enc.memory, &enc.pe)
}

fn init_attention(rng: &mut SeedRng, w: &mut TransformerWeights, prefix: &str, cfg: &TransformerConfig) -> Result<()> {
    let dh = cfg.head_dim();
    for m in 0..cfg.heads {
        for name in ["wq", "wk", "wv"] {
            w.insert(format!("{prefix}.head{m}.{name}"), xavier(rng, &[cfg.d, dh], cfg.d, dh))?;
        }
    }
    w.insert(format!("{prefix}.wo"), xavier(rng, &[cfg.d, cfg.d], cfg.d, cfg.d))?;
    Ok(())
}

fn init_norm(w: &mut TransformerWeights, prefix: &str, d: usize) -> Result<()> {
    w.insert(format!("{prefix}.gain"), Tensor::full([d], 1.0))?;
    w.insert(format!("{prefix}.bias"), Tensor::zeros([d]))?;
    Ok(())
}

fn init_ffn(rng: &mut SeedRng, w: &mut TransformerWeights, prefix: &str, cfg: &TransformerConfig) -> Result<()> {
    let (d, h) = (cfg.d, cfg.ffn_hidden);
    w.insert(format!("{prefix}.w1"), xavier(rng, &[d, h], d, h))?;
    w.insert(format!("{prefix}.b1"), Tensor::zeros([h]))?;
    w.insert(format!("{prefix}.w2"), xavier(rng, &[h, d], h, d))?;
    w.insert(format!("{prefix}.b2"), Tensor::zeros([d]))?;
    Ok(())
}

/// Inserts freshly initialized encoder and decoder parameters.
pub fn init_transformer(rng: &mut SeedRng, w: &mut TransformerWeights, cfg: &TransformerConfig) -> Result<()> {
    cfg.validate()?;
    for l in 0..cfg.n_enc {
        let p = format!("encoder.{l}");
        init_attention(rng, w, &format!("{p}.self_attn"), cfg)?;
        init_norm(w, &format!("{p}.norm1"), cfg.d)?;
        init_ffn(rng, w, &format!("{p}.ffn"), cfg)?;
        init_norm(w, &format!("{p}.norm2"), cfg.d)?;
    }
    for l in 0..cfg.n_dec {
        let p = format!("decoder.{l}");
        init_attention(rng, w, &format!("{p}.self_attn"), cfg)?;
        init_norm(w, &format!("{p}.norm1"), cfg.d)?;
        init_attention(rng, w, &format!("{p}.cross_attn"), cfg)?;
        init_norm(w, &format!("{p}.norm2"), cfg.d)?;
        init_ffn(rng, w, &format!("{p}.ffn"), cfg)?;
        init_norm(w, &format!("{p}.norm3"), cfg.d)?;
    }
    Ok(())
}
