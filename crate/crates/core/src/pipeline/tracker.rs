//! Per-sequence tracking state machine.

use super::backbone::{backbone_forward, BACKBONE_STRIDE};
use super::crop::{crop_search, crop_square, crop_template, context_side, CropResult, Frame};
use super::model::TrTrModel;
use crate::error::{Error, Result};
use crate::init::seeded;
use crate::localize::{
    apply_window, decode_center, decode_size, smooth_size, BoundingBox, CosineWindow, GridPoint,
    DEFAULT_SIZE_GAMMA, DEFAULT_WINDOW_INFLUENCE,
};
use crate::loss::GroundTruth;
use crate::online::{blend, online_forward, solve_cg, OnlineConfig, OnlineFilter, TrainingMemory, DEFAULT_BLEND_WEIGHT};
use crate::tensor::{Graph, Tensor};

/// Smallest box side kept after an update, in image pixels.
const MIN_BOX_SIDE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrackerConfig {
    pub template_size: usize,
    pub search_size: usize,
    pub stride: usize,
    pub window_influence: f64,
    pub size_gamma: f64,
    pub blend_weight: f64,
    pub online: bool,
    /// Zero the positional encoding on mean-padded cells.
    pub pe_mask: bool,
    pub online_config: OnlineConfig,
    /// Seed of the online filter's random projection.
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            template_size: 127,
            search_size: 255,
            stride: BACKBONE_STRIDE,
            window_influence: DEFAULT_WINDOW_INFLUENCE,
            size_gamma: DEFAULT_SIZE_GAMMA,
            blend_weight: DEFAULT_BLEND_WEIGHT,
            online: false,
            pe_mask: true,
            online_config: OnlineConfig::default(),
            seed: 0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride != BACKBONE_STRIDE {
            return Err(Error::Config(format!("stride {} differs from backbone stride {BACKBONE_STRIDE}", self.stride)));
        }
        if self.template_size < self.stride || self.search_size < self.template_size {
            return Err(Error::Config(format!(
                "need stride ≤ template size ≤ search size, got {} / {} / {}",
                self.stride, self.template_size, self.search_size
            )));
        }
        for (name, v) in [("window influence", self.window_influence), ("size smoothing", self.size_gamma), ("blend weight", self.blend_weight)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Prediction grid side for the search crop.
    pub fn search_grid(&self) -> usize {
        self.search_size / self.stride
    }
}

/// Online filter, its sample memory and update bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineState {
    pub filter: OnlineFilter,
    pub memory: TrainingMemory,
    pub frames_since_update: usize,
    pub degraded_updates: usize,
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    template_memory: Tensor,
    template_pe: Tensor,
    pub bbox: BoundingBox,
    pub window: CosineWindow,
    pub online: Option<OnlineState>,
    pub config: TrackerConfig,
    pub frames_tracked: usize,
}

/// Per-frame maps and flags.
#[derive(Debug, Clone)]
pub struct Diagnostics {
    /// Offline heatmap `Y`.
    pub y: Tensor,
    pub y_online: Option<Tensor>,
    /// `Y` blended with the online map (equal to `Y` when offline).
    pub y_blend: Tensor,
    /// Windowed map used for decoding.
    pub y_window: Tensor,
    pub peak: Option<GridPoint>,
    /// Blended confidence at the peak.
    pub score: f64,
    pub lost: bool,
    pub online_updated: bool,
    pub degraded_update: bool,
    pub crop_scale: f64,
    pub crop_origin: (f64, f64),
    /// Decoder cross-attention maps, `[layer][head]`, each `HW×hw`.
    pub cross_attention: Vec<Vec<Tensor>>,
    pub self_attention: Vec<Vec<Tensor>>,
}

#[derive(Debug, Clone)]
pub struct TrackOutput {
    pub bbox: BoundingBox,
    pub diagnostics: Diagnostics,
}

fn mid_features(model: &TrTrModel, crop: &CropResult) -> Result<Tensor> {
    let graph = Graph::new();
    let patch = graph.constant(crop.patch.clone());
    let feats = backbone_forward(&graph, &model.weights, &patch)?;
    Ok(feats.mid.value().as_ref().clone())
}

/// Gaussian target for a box given in image coordinates, on `crop`'s grid.
fn online_label(crop: &CropResult, bbox: &BoundingBox, stride: usize) -> Result<Tensor> {
    let t = crop.size();
    let g = t / stride;
    let b = crop.box_to_patch(bbox);
    let limit = t as f64 - 1e-9;
    let center = (b.cx.clamp(0.0, limit), b.cy.clamp(0.0, limit));
    Ok(GroundTruth::new(center, (b.w, b.h), t, t, g, g, stride)?.label)
}

impl TrackerState {
    /// Encodes the template once and, when enabled, fits the online filter
    /// on the first frame and shifted copies of it.
    pub fn init(model: &TrTrModel, frame: &Frame, bbox: BoundingBox, config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        let template = crop_template(frame, &bbox, config.template_size)?.trimmed(config.stride)?;
        let graph = Graph::new();
        let enc = model.encode_template(&graph, &template, config.pe_mask)?;
        let g = config.search_grid();
        let window = CosineWindow::hann(g, g, config.window_influence)?;
        let online = if config.online { Some(Self::init_online(model, frame, &bbox, &config)?) } else { None };
        Ok(Self {
            template_memory: enc.memory.value().as_ref().clone(),
            template_pe: enc.pe.value().as_ref().clone(),
            bbox,
            window,
            online,
            config,
            frames_tracked: 0,
        })
    }

    fn init_online(model: &TrTrModel, frame: &Frame, bbox: &BoundingBox, config: &TrackerConfig) -> Result<OnlineState> {
        let oc = config.online_config;
        let side = context_side(bbox) * config.search_size as f64 / config.template_size as f64;
        let shift = 2.0 * config.stride as f64 * side / config.search_size as f64;
        let offsets = [(0.0, 0.0), (shift, 0.0), (-shift, 0.0), (0.0, shift), (0.0, -shift)];
        let mut samples = Vec::new();
        for &(dx, dy) in offsets.iter().take(1 + oc.augmentations) {
            let crop = crop_square(frame, (bbox.cx + dx, bbox.cy + dy), side, config.search_size)?.trimmed(config.stride)?;
            samples.push((mid_features(model, &crop)?, online_label(&crop, bbox, config.stride)?));
        }
        let memory = TrainingMemory::with_initial(oc.capacity, oc.learning_rate, samples)?;
        let filter = OnlineFilter::new(&mut seeded(config.seed), model.config.c_mid, &oc);
        let outcome = solve_cg(&filter, &memory, oc.init_gn_steps, oc.init_cg_iters)?;
        Ok(OnlineState {
            filter: outcome.filter,
            memory,
            frames_since_update: 0,
            degraded_updates: usize::from(outcome.degraded),
        })
    }

    pub fn template_memory(&self) -> &Tensor {
        &self.template_memory
    }

    pub fn template_pe(&self) -> &Tensor {
        &self.template_pe
    }

    /// Locates the target in `frame` and updates the state.
    pub fn track_frame(&mut self, model: &TrTrModel, frame: &Frame) -> Result<TrackOutput> {
        let cfg = self.config;
        let crop = crop_search(frame, &self.bbox, cfg.search_size, cfg.template_size)?.trimmed(cfg.stride)?;
        let graph = Graph::new();
        let memory = graph.constant(self.template_memory.clone());
        let pe = graph.constant(self.template_pe.clone());
        let fwd = model.search_forward(&graph, &crop, &memory, &pe, cfg.pe_mask)?;
        let maps = fwd.heads.to_maps();
        let mid = fwd.mid.value().as_ref().clone();
        let y_online = match &self.online {
            Some(o) => Some(online_forward(&o.filter, &mid)?),
            None => None,
        };
        let y_blend = match &y_online {
            Some(yo) => blend(&maps.y, yo, cfg.blend_weight)?,
            None => maps.y.clone(),
        };
        let y_window = apply_window(&y_blend, &self.window)?;
        let attention = |maps: &Vec<Vec<crate::tensor::Var<'_>>>| -> Vec<Vec<Tensor>> {
            maps.iter().map(|l| l.iter().map(|v| v.value().as_ref().clone()).collect()).collect()
        };
        let mut diagnostics = Diagnostics {
            y: maps.y.clone(),
            y_online,
            y_blend: y_blend.clone(),
            y_window: y_window.clone(),
            peak: None,
            score: f64::NAN,
            lost: true,
            online_updated: false,
            degraded_update: false,
            crop_scale: crop.scale,
            crop_origin: crop.origin,
            cross_attention: attention(&fwd.decoded.cross_attention),
            self_attention: attention(&fwd.decoded.self_attention),
        };
        self.frames_tracked += 1;

        let Some(center) = decode_center(&y_window, &maps.offset, cfg.stride)? else {
            return Ok(TrackOutput { bbox: self.bbox, diagnostics });
        };
        let t = crop.size();
        let size = decode_size(&maps.size, center.peak, t, t)?;
        let (cx, cy) = crop.patch_to_image((center.cx, center.cy));
        let (w, h) = smooth_size((self.bbox.w, self.bbox.h), (size.0 * crop.scale, size.1 * crop.scale), cfg.size_gamma)?;
        let candidate = BoundingBox::new(cx, cy, w, h);
        if !candidate.is_valid() {
            return Ok(TrackOutput { bbox: self.bbox, diagnostics });
        }
        self.bbox = candidate.clamped(frame.width() as f64, frame.height() as f64, MIN_BOX_SIDE);
        diagnostics.lost = false;
        diagnostics.peak = Some(center.peak);
        diagnostics.score = y_blend.at(&[center.peak.y, center.peak.x]);

        if let Some(online) = &mut self.online {
            let oc = cfg.online_config;
            online.frames_since_update += 1;
            if online.frames_since_update >= oc.update_interval || diagnostics.score > oc.confidence_threshold {
                online.memory.update(mid, online_label(&crop, &self.bbox, cfg.stride)?)?;
                let outcome = solve_cg(&online.filter, &online.memory, oc.update_gn_steps, oc.update_cg_iters)?;
                diagnostics.online_updated = !outcome.degraded;
                diagnostics.degraded_update = outcome.degraded;
                online.degraded_updates += usize::from(outcome.degraded);
                online.filter = outcome.filter;
                online.frames_since_update = 0;
            }
        }
        Ok(TrackOutput { bbox: self.bbox, diagnostics })
    }
}

/// Initializes on the first frame and tracks the rest; the first entry is
/// the given box.
pub fn track_sequence(model: &TrTrModel, frames: &[Frame], init_box: BoundingBox, config: TrackerConfig) -> Result<Vec<BoundingBox>> {
    let first = frames.first().ok_or_else(|| Error::Input("empty sequence".into()))?;
    let mut state = TrackerState::init(model, first, init_box, config)?;
    let mut boxes = vec![init_box];
    for frame in &frames[1..] {
        boxes.push(state.track_frame(model, frame)?.bbox);
    }
    Ok(boxes)
}
