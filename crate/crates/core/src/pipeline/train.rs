//! Toy training on template/search pairs cut from one synthetic sequence.

use rand::Rng;

use super::crop::{context_side, crop_square, crop_template, CropResult};
use super::model::TrTrModel;
use super::synth::SyntheticSequence;
use crate::error::{Error, Result};
use crate::init::{seeded, SeedRng};
use crate::localize::BoundingBox;
use crate::loss::{focal_loss, joint_loss, offset_loss, size_loss, FocalParams, GroundTruth};
use crate::tensor::{Graph, TransformerWeights, Var};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub lambda_offset: f64,
    pub lambda_size: f64,
    pub template_size: usize,
    pub search_size: usize,
    /// Largest search-center displacement, in search-patch pixels.
    pub max_shift: f64,
    /// Search side is scaled by `exp(u)`, `u ∈ [−scale_jitter, scale_jitter]`.
    pub scale_jitter: f64,
    pub pe_mask: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            lambda_offset: 1.0,
            lambda_size: 1.0,
            template_size: 64,
            search_size: 128,
            max_shift: 24.0,
            scale_jitter: 0.1,
            pe_mask: true,
        }
    }
}

/// Stride-aligned crops and labels for one training example.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub template: CropResult,
    pub search: CropResult,
    pub truth: GroundTruth,
}

impl TrainingPair {
    /// Search crop around `target` displaced by `shift` search-patch pixels
    /// and rescaled by `zoom`.
    pub fn new(
        template: CropResult,
        frame: &super::crop::Frame,
        target: &BoundingBox,
        search_size: usize,
        template_size: usize,
        shift: (f64, f64),
        zoom: f64,
        stride: usize,
    ) -> Result<Self> {
        let side = context_side(target) * search_size as f64 / template_size as f64 * zoom;
        let px = side / search_size as f64;
        let center = (target.cx + shift.0 * px, target.cy + shift.1 * px);
        let search = crop_square(frame, center, side, search_size)?.trimmed(stride)?;
        let t = search.size();
        let g = t / stride;
        let b = search.box_to_patch(target);
        let truth = GroundTruth::new((b.cx, b.cy), (b.w, b.h), t, t, g, g, stride)?;
        Ok(Self { template, search, truth })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub heatmap: f64,
    pub offset: f64,
    pub size: f64,
}

/// Records the joint loss of one pair on `graph`.
pub fn pair_loss<'g>(graph: &'g Graph, model: &TrTrModel, pair: &TrainingPair, cfg: &TrainConfig) -> Result<(Var<'g>, LossParts)> {
    let enc = model.encode_template(graph, &pair.template, cfg.pe_mask)?;
    let fwd = model.search_forward(graph, &pair.search, &enc.memory, &enc.pe, cfg.pe_mask)?;
    let ly = focal_loss(&fwd.heads.y, &pair.truth.label, FocalParams::default())?;
    let lo = offset_loss(&fwd.heads.offset, pair.truth.center, model.stride())?;
    let ls = size_loss(&fwd.heads.size, pair.truth.normalized_size, pair.truth.cell)?;
    let total = joint_loss(&ly, &lo, &ls, cfg.lambda_offset, cfg.lambda_size)?;
    let parts = LossParts { total: total.value().item(), heatmap: ly.value().item(), offset: lo.value().item(), size: ls.value().item() };
    Ok((total, parts))
}

/// Adam with bias correction over every parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(weights: &TransformerWeights) -> Self {
        let zeros: Vec<Vec<f64>> = weights.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, weights: &mut TransformerWeights, grads: &[Vec<f64>], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (id, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let value = weights.by_id_mut(id).value.data_mut();
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                value[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: TrTrModel,
    /// Loss of every step, evaluated before its update.
    pub losses: Vec<LossParts>,
}

fn sample_pair(rng: &mut SeedRng, template: &CropResult, seq: &SyntheticSequence, cfg: &TrainConfig, stride: usize) -> Result<TrainingPair> {
    let k = rng.gen_range(0..seq.frames.len());
    let mut jitter = |a: f64| if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
    let shift = (jitter(cfg.max_shift), jitter(cfg.max_shift));
    let zoom = jitter(cfg.scale_jitter).exp();
    TrainingPair::new(template.clone(), &seq.frames[k], &seq.truth[k], cfg.search_size, cfg.template_size, shift, zoom, stride)
}

/// Per-parameter gradients of one pair's joint loss.
pub fn pair_gradients(model: &TrTrModel, pair: &TrainingPair, cfg: &TrainConfig) -> Result<(LossParts, Vec<Vec<f64>>)> {
    let graph = Graph::new();
    let (loss, parts) = pair_loss(&graph, model, pair, cfg)?;
    let grads = graph.backward(loss)?;
    let per_param = model
        .weights
        .iter()
        .enumerate()
        .map(|(id, p)| grads.param(id).map_or_else(|| vec![0.0; p.value.len()], <[f64]>::to_vec))
        .collect();
    Ok((parts, per_param))
}

/// Trains `model` with Adam at a fixed rate. The template is always the first
/// frame; each step draws a search crop from a random frame with shift and
/// scale jitter.
pub fn train_toy(mut model: TrTrModel, cfg: &TrainConfig, seq: &SyntheticSequence) -> Result<TrainReport> {
    if seq.frames.is_empty() || seq.frames.len() != seq.truth.len() {
        return Err(Error::Input("training sequence needs frames with matching truth boxes".into()));
    }
    if cfg.search_size < cfg.template_size || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("invalid training configuration".into()));
    }
    let stride = model.stride();
    let template = crop_template(&seq.frames[0], &seq.truth[0], cfg.template_size)?.trimmed(stride)?;
    let mut rng = seeded(cfg.seed);
    let mut adam = Adam::new(&model.weights);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let pair = sample_pair(&mut rng, &template, seq, cfg, stride)?;
        let (parts, grads) = pair_gradients(&model, &pair, cfg)?;
        if !parts.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, detail: format!("non-finite loss or gradient (loss {parts:?})") });
        }
        adam.step(&mut model.weights, &grads, cfg);
        losses.push(parts);
    }
    Ok(TrainReport { model, losses })
}
