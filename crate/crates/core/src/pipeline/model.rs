//! Full parameter set (backbone, transformer, heads) and its forward pieces.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::backbone::{backbone_forward, backbone_widths, init_backbone, BACKBONE_STRIDE};
use super::crop::CropResult;
use crate::error::{Error, Result};
use crate::init::seeded;
use crate::localize::{heads_forward, init_heads, HeadMapVars};
use crate::tensor::{read_checkpoint, write_checkpoint};
use crate::tensor::{Graph, TransformerWeights, Var};
use crate::transformer::{decode, encode, init_transformer, Decoded, DecoderInput, Encoded, EncoderInput, PadMask, TransformerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub transformer: TransformerConfig,
    /// Channels of the mid-level backbone tap.
    pub c_mid: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self { transformer: TransformerConfig::desk(), c_mid: 32 }
    }

    pub fn with_layers(mut self, n_enc: usize, n_dec: usize) -> Self {
        self.transformer = self.transformer.with_layers(n_enc, n_dec);
        self
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrTrModel {
    pub config: ModelConfig,
    pub weights: TransformerWeights,
}

fn count_layers(w: &TransformerWeights, prefix: &str) -> usize {
    (0..).take_while(|l| w.contains(&format!("{prefix}.{l}.norm1.gain"))).count()
}

impl TrTrModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.transformer.validate()?;
        let mut rng = seeded(seed);
        let mut weights = TransformerWeights::new();
        init_backbone(&mut rng, &mut weights, config.c_mid, config.transformer.d)?;
        init_transformer(&mut rng, &mut weights, &config.transformer)?;
        init_heads(&mut rng, &mut weights, config.transformer.d)?;
        Ok(Self { config, weights })
    }

    /// Recovers the configuration from parameter names and shapes.
    pub fn from_weights(weights: TransformerWeights) -> Result<Self> {
        let (c_mid, d) = backbone_widths(&weights)?;
        let heads = (0..).take_while(|m| weights.contains(&format!("encoder.0.self_attn.head{m}.wq"))).count();
        let ffn_hidden = weights.get("encoder.0.ffn.w1")?.shape()[1];
        let transformer = TransformerConfig {
            d,
            heads,
            ffn_hidden,
            n_enc: count_layers(&weights, "encoder"),
            n_dec: count_layers(&weights, "decoder"),
        };
        transformer.validate()?;
        let config = ModelConfig { transformer, c_mid };
        let reference = Self::init(config, 0)?;
        for p in reference.weights.iter() {
            let found = weights.get(&p.name).map_err(|_| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if found.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    found.shape(),
                    p.value.shape()
                )));
            }
        }
        if reference.weights.len() != weights.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, configuration expects {}",
                weights.len(),
                reference.weights.len()
            )));
        }
        Ok(Self { config, weights })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        Self::from_weights(read_checkpoint(BufReader::new(file))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        write_checkpoint(&self.weights, BufWriter::new(file))
    }

    pub fn stride(&self) -> usize {
        BACKBONE_STRIDE
    }

    fn mask(&self, crop: &CropResult, pe_mask: bool) -> Result<PadMask> {
        let g = crop.size() / BACKBONE_STRIDE;
        if pe_mask {
            crop.grid_mask(BACKBONE_STRIDE)
        } else {
            Ok(PadMask::none(g, g))
        }
    }

    /// Backbone plus encoder on a stride-aligned template crop.
    pub fn encode_template<'g>(&self, graph: &'g Graph, crop: &CropResult, pe_mask: bool) -> Result<Encoded<'g>> {
        let patch = graph.constant(crop.patch.clone());
        let feats = backbone_forward(graph, &self.weights, &patch)?;
        let input = EncoderInput { z0: feats.out, pad_mask: self.mask(crop, pe_mask)? };
        encode(graph, &self.weights, &self.config.transformer, &input)
    }

    /// Backbone, decoder and heads on a stride-aligned search crop.
    pub fn search_forward<'g>(
        &self,
        graph: &'g Graph,
        crop: &CropResult,
        memory: &Var<'g>,
        memory_pe: &Var<'g>,
        pe_mask: bool,
    ) -> Result<SearchForward<'g>> {
        let patch = graph.constant(crop.patch.clone());
        let feats = backbone_forward(graph, &self.weights, &patch)?;
        let g = crop.size() / BACKBONE_STRIDE;
        let input = DecoderInput { x0: feats.out, pad_mask: self.mask(crop, pe_mask)? };
        let decoded = decode(graph, &self.weights, &self.config.transformer, &input, memory, memory_pe)?;
        let heads = heads_forward(graph, &self.weights, &decoded.sequence, g, g, BACKBONE_STRIDE)?;
        Ok(SearchForward { heads, mid: feats.mid, decoded })
    }
}

pub struct SearchForward<'g> {
    pub heads: HeadMapVars<'g>,
    /// Mid-level features feeding the online branch.
    pub mid: Var<'g>,
    pub decoded: Decoded<'g>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrips_through_weights() {
        let cfg = ModelConfig { transformer: TransformerConfig::new(8, 2).with_layers(2, 3), c_mid: 6 };
        let m = TrTrModel::init(cfg, 4).unwrap();
        let back = TrTrModel::from_weights(m.weights.clone()).unwrap();
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn missing_parameter_is_a_checkpoint_error() {
        let m = TrTrModel::init(ModelConfig { transformer: TransformerConfig::new(8, 2), c_mid: 4 }, 1).unwrap();
        let mut w = TransformerWeights::new();
        for p in m.weights.iter().filter(|p| p.name != "heads.size.2.bias") {
            w.insert(p.name.clone(), p.value.clone()).unwrap();
        }
        assert!(matches!(TrTrModel::from_weights(w), Err(Error::Checkpoint(_))));
    }
}
