//! Online classification branch: a two-layer convolutional filter over
//! mid-level features, refitted during tracking by Gauss-Newton/CG on a
//! weighted L2 error, and blended with the offline heatmap.

pub mod cg;

use crate::error::{dim_err, Error, Result};
use crate::init::{uniform, SeedRng};
use crate::tensor::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;
use cg::{gauss_newton, LeastSquaresProblem};

/// Weight of the offline map in the blend `Y″ = w·Y′ + (1−w)·Y_online`.
pub const DEFAULT_BLEND_WEIGHT: f64 = 0.6;

/// Tunable schedule and sizes of the online branch.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OnlineConfig {
    pub hidden: usize,
    pub kernel: usize,
    pub reg: f64,
    pub capacity: usize,
    pub learning_rate: f64,
    pub init_gn_steps: usize,
    pub init_cg_iters: usize,
    pub update_gn_steps: usize,
    pub update_cg_iters: usize,
    /// Frames between periodic refits.
    pub update_interval: usize,
    /// Peak score above which a frame triggers a refit.
    pub confidence_threshold: f64,
    /// Shifted copies of the first-frame crop added at initialization.
    pub augmentations: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            kernel: 4,
            reg: 1e-2,
            capacity: 50,
            learning_rate: 0.01,
            init_gn_steps: 10,
            init_cg_iters: 10,
            update_gn_steps: 1,
            update_cg_iters: 5,
            update_interval: 10,
            confidence_threshold: 0.7,
            augmentations: 4,
        }
    }
}

/// `w1: hidden×C_mid×1×1`, `w2: 1×hidden×k×k`.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineFilter {
    pub w1: Tensor,
    pub w2: Tensor,
    pub reg: f64,
}

impl OnlineFilter {
    /// Random projection, zero second layer.
    pub fn new(rng: &mut SeedRng, c_mid: usize, cfg: &OnlineConfig) -> Self {
        let a = (3.0 / c_mid as f64).sqrt();
        Self {
            w1: uniform(rng, &[cfg.hidden, c_mid, 1, 1], a),
            w2: Tensor::zeros([1, cfg.hidden, cfg.kernel, cfg.kernel]),
            reg: cfg.reg,
        }
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.w2.len()
    }

    pub fn params(&self) -> Vec<f64> {
        self.w1.data().iter().chain(self.w2.data()).copied().collect()
    }

    pub fn with_params(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.n_params() {
            return Err(dim_err!("expected {} filter parameters, got {}", self.n_params(), theta.len()));
        }
        let (a, b) = theta.split_at(self.w1.len());
        Ok(Self {
            w1: Tensor::new(self.w1.shape().to_vec(), a.to_vec())?,
            w2: Tensor::new(self.w2.shape().to_vec(), b.to_vec())?,
            reg: self.reg,
        })
    }

    fn kernel(&self) -> usize {
        self.w2.shape()[2]
    }
}

/// Layer geometries for a `C×H×W` feature map. The second layer pads by
/// `k/2`; for even kernels its output is one cell larger than the grid and
/// the trailing row/column is dropped.
fn geometries(filter: &OnlineFilter, feat: &[usize]) -> Result<(ConvGeometry, ConvGeometry)> {
    let g1 = ConvGeometry::new(feat, filter.w1.shape(), 1, 0)?;
    let k = filter.kernel();
    let g2 = ConvGeometry::new(&[g1.c_out, g1.out_h, g1.out_w], filter.w2.shape(), 1, k / 2)?;
    Ok((g1, g2))
}

fn crop(full: &[f64], g2: &ConvGeometry) -> Vec<f64> {
    let (h, w) = (g2.h, g2.w);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        out.extend_from_slice(&full[y * g2.out_w..y * g2.out_w + w]);
    }
    out
}

fn uncrop(map: &[f64], g2: &ConvGeometry) -> Vec<f64> {
    let mut full = vec![0.0; g2.out_h * g2.out_w];
    for y in 0..g2.h {
        full[y * g2.out_w..y * g2.out_w + g2.w].copy_from_slice(&map[y * g2.w..(y + 1) * g2.w]);
    }
    full
}

/// conv1×1 → ReLU → conv k×k; an `H×W` map with no output nonlinearity.
pub fn online_forward(filter: &OnlineFilter, feat: &Tensor) -> Result<Tensor> {
    let (g1, g2) = geometries(filter, feat.shape())?;
    let hidden: Vec<f64> = kernels::conv2d_forward(feat.data(), filter.w1.data(), &g1)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let full = kernels::conv2d_forward(&hidden, filter.w2.data(), &g2);
    Tensor::new([g1.out_h, g1.out_w], crop(&full, &g2))
}

/// `Y″ = w·Y′ + (1−w)·Y_online`.
pub fn blend(y_prime: &Tensor, y_online: &Tensor, w: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Parameter(format!("blend weight {w} outside [0, 1]")));
    }
    y_prime.zip_map(y_online, |a, b| w * a + (1.0 - w) * b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub feat: Tensor,
    pub label: Tensor,
    pub weight: f64,
}

/// Bounded sample set with exponentially decaying weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMemory {
    samples: Vec<TrainingSample>,
    pub capacity: usize,
    pub learning_rate: f64,
}

impl TrainingMemory {
    pub fn new(capacity: usize, learning_rate: f64) -> Self {
        Self { samples: Vec::new(), capacity, learning_rate }
    }

    /// Seeds the memory with equally weighted first-frame samples.
    pub fn with_initial(capacity: usize, learning_rate: f64, samples: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let mut mem = Self::new(capacity, learning_rate);
        let n = samples.len().min(capacity);
        for (feat, label) in samples.into_iter().take(n) {
            mem.check(&feat, &label)?;
            mem.samples.push(TrainingSample { feat, label, weight: 1.0 / n as f64 });
        }
        Ok(mem)
    }

    fn check(&self, feat: &Tensor, label: &Tensor) -> Result<()> {
        let (_, h, w) = feat.dims3()?;
        if label.shape() != [h, w] {
            return Err(dim_err!("label {:?} does not match feature grid {h}x{w}", label.shape()));
        }
        if let Some(first) = self.samples.first() {
            if first.feat.shape() != feat.shape() {
                return Err(dim_err!("feature shape {:?} differs from stored {:?}", feat.shape(), first.feat.shape()));
            }
        }
        Ok(())
    }

    /// Decays existing weights by `(1−η)` and appends the new sample with
    /// the undecayed weight, so weights fall geometrically with age. Beyond
    /// capacity the lowest-weight (oldest on ties) sample is evicted; weights
    /// are then renormalized to sum to one.
    pub fn update(&mut self, feat: Tensor, label: Tensor) -> Result<()> {
        self.check(&feat, &label)?;
        let fresh = self.samples.iter().map(|s| s.weight).fold(0.0, f64::max);
        let fresh = if fresh > 0.0 { fresh } else { 1.0 };
        for s in &mut self.samples {
            s.weight *= 1.0 - self.learning_rate;
        }
        self.samples.push(TrainingSample { feat, label, weight: fresh });
        while self.samples.len() > self.capacity.max(1) {
            let (idx, _) = self
                .samples
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.weight.total_cmp(&b.1.weight))
                .expect("nonempty");
            self.samples.remove(idx);
        }
        let total: f64 = self.samples.iter().map(|s| s.weight).sum();
        for s in &mut self.samples {
            s.weight /= total;
        }
        Ok(())
    }

    pub fn samples(&self) -> &[TrainingSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.samples.iter().map(|s| s.weight).sum()
    }
}

/// Which filter weights a refit may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FitScope {
    #[default]
    Both,
    /// Holds `w1` fixed; the problem is then linear in `w2`.
    SecondLayer,
}

/// `Σᵢ ωᵢ‖f(featᵢ) − Ȳᵢ‖² + λ‖θ‖²` as a residual vector over the fitted
/// weights, with ReLU activation masks frozen at the linearization point.
struct FilterProblem<'a> {
    template: OnlineFilter,
    scope: FitScope,
    memory: &'a TrainingMemory,
    g1: ConvGeometry,
    g2: ConvGeometry,
    /// Per sample: hidden activations and ReLU mask at the linearization point.
    linear: Vec<(Vec<f64>, Vec<bool>)>,
    w2: Vec<f64>,
}

impl<'a> FilterProblem<'a> {
    fn new(filter: &OnlineFilter, memory: &'a TrainingMemory, scope: FitScope) -> Result<Self> {
        let first = memory.samples.first().ok_or_else(|| Error::Parameter("empty training memory".into()))?;
        let (g1, g2) = geometries(filter, first.feat.shape())?;
        Ok(Self { template: filter.clone(), scope, memory, g1, g2, linear: Vec::new(), w2: Vec::new() })
    }

    fn theta_of(&self, filter: &OnlineFilter) -> Vec<f64> {
        match self.scope {
            FitScope::Both => filter.params(),
            FitScope::SecondLayer => filter.w2.data().to_vec(),
        }
    }

    fn filter_of(&self, theta: &[f64]) -> Result<OnlineFilter> {
        match self.scope {
            FitScope::Both => self.template.with_params(theta),
            FitScope::SecondLayer => {
                let mut f = self.template.clone();
                f.w2 = Tensor::new(f.w2.shape().to_vec(), theta.to_vec())?;
                Ok(f)
            }
        }
    }

    /// `(w1-part, w2-part)` of a parameter-space vector; the first is `None`
    /// when `w1` is held fixed.
    fn split<'t>(&self, theta: &'t [f64]) -> (Option<&'t [f64]>, &'t [f64]) {
        match self.scope {
            FitScope::Both => {
                let (a, b) = theta.split_at(self.template.w1.len());
                (Some(a), b)
            }
            FitScope::SecondLayer => (None, theta),
        }
    }
}

impl LeastSquaresProblem for FilterProblem<'_> {
    fn n_params(&self) -> usize {
        match self.scope {
            FitScope::Both => self.template.n_params(),
            FitScope::SecondLayer => self.template.w2.len(),
        }
    }

    fn residuals(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let filter = self.filter_of(theta)?;
        let mut r = Vec::new();
        for s in &self.memory.samples {
            let sw = s.weight.sqrt();
            let pred = online_forward(&filter, &s.feat)?;
            r.extend(pred.data().iter().zip(s.label.data()).map(|(p, y)| sw * (p - y)));
        }
        let sr = self.template.reg.sqrt();
        r.extend(theta.iter().map(|t| sr * t));
        Ok(r)
    }

    fn linearize(&mut self, theta: &[f64]) -> Result<()> {
        let filter = self.filter_of(theta)?;
        self.w2 = filter.w2.data().to_vec();
        self.linear = self
            .memory
            .samples
            .iter()
            .map(|s| {
                let pre = kernels::conv2d_forward(s.feat.data(), filter.w1.data(), &self.g1);
                let mask: Vec<bool> = pre.iter().map(|&v| v > 0.0).collect();
                let act = pre.into_iter().map(|v| v.max(0.0)).collect();
                (act, mask)
            })
            .collect();
        Ok(())
    }

    fn jvp(&self, v: &[f64]) -> Vec<f64> {
        let (v1, v2) = self.split(v);
        let mut out = Vec::new();
        for (s, (act, mask)) in self.memory.samples.iter().zip(&self.linear) {
            let sw = s.weight.sqrt();
            let mut full = kernels::conv2d_forward(act, v2, &self.g2);
            if let Some(v1) = v1 {
                let dpre = kernels::conv2d_forward(s.feat.data(), v1, &self.g1);
                let dact: Vec<f64> = dpre.iter().zip(mask).map(|(d, &m)| if m { *d } else { 0.0 }).collect();
                let b = kernels::conv2d_forward(&dact, &self.w2, &self.g2);
                for (x, y) in full.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            out.extend(crop(&full, &self.g2).into_iter().map(|x| sw * x));
        }
        let sr = self.template.reg.sqrt();
        out.extend(v.iter().map(|t| sr * t));
        out
    }

    fn vjp(&self, u: &[f64]) -> Vec<f64> {
        let n1 = self.n_params() - self.w2.len();
        let mut grad = vec![0.0; self.n_params()];
        let cells = self.g2.h * self.g2.w;
        for (i, (s, (act, mask))) in self.memory.samples.iter().zip(&self.linear).enumerate() {
            let sw = s.weight.sqrt();
            let block: Vec<f64> = u[i * cells..(i + 1) * cells].iter().map(|x| sw * x).collect();
            let gout = uncrop(&block, &self.g2);
            let gw2 = kernels::conv2d_backward_kernel(&gout, act, &self.g2);
            for (dst, v) in grad[n1..].iter_mut().zip(&gw2) {
                *dst += v;
            }
            if self.scope == FitScope::Both {
                let gact = kernels::conv2d_backward_input(&gout, &self.w2, &self.g2);
                let gpre: Vec<f64> = gact.iter().zip(mask).map(|(g, &m)| if m { *g } else { 0.0 }).collect();
                let gw1 = kernels::conv2d_backward_kernel(&gpre, s.feat.data(), &self.g1);
                for (dst, v) in grad[..n1].iter_mut().zip(&gw1) {
                    *dst += v;
                }
            }
        }
        let sr = self.template.reg.sqrt();
        let tail = &u[self.memory.samples.len() * cells..];
        for (dst, v) in grad.iter_mut().zip(tail) {
            *dst += sr * v;
        }
        grad
    }
}

/// Outcome of an online refit.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub filter: OnlineFilter,
    /// Objective before and after every outer step.
    pub objectives: Vec<f64>,
    /// Inner CG traces, one per outer step.
    pub inner: Vec<cg::CgTrace>,
    /// Set when a non-finite value aborted the update; `filter` is then the input filter.
    pub degraded: bool,
}

impl SolveOutcome {
    fn degraded(filter: &OnlineFilter) -> Self {
        Self { filter: filter.clone(), objectives: Vec::new(), inner: Vec::new(), degraded: true }
    }
}

/// The filter's objective on the current memory (regularizing all weights).
pub fn online_objective(filter: &OnlineFilter, memory: &TrainingMemory) -> Result<f64> {
    online_objective_scoped(filter, memory, FitScope::Both)
}

pub fn online_objective_scoped(filter: &OnlineFilter, memory: &TrainingMemory, scope: FitScope) -> Result<f64> {
    let problem = FilterProblem::new(filter, memory, scope)?;
    Ok(problem.residuals(&problem.theta_of(filter))?.iter().map(|r| r * r).sum())
}

/// Refits the filter on `memory` with `gn_steps` Gauss-Newton steps of
/// `cg_iters` conjugate-gradient iterations each.
pub fn solve_cg(filter: &OnlineFilter, memory: &TrainingMemory, gn_steps: usize, cg_iters: usize) -> Result<SolveOutcome> {
    solve_cg_scoped(filter, memory, gn_steps, cg_iters, FitScope::Both)
}

pub fn solve_cg_scoped(
    filter: &OnlineFilter,
    memory: &TrainingMemory,
    gn_steps: usize,
    cg_iters: usize,
    scope: FitScope,
) -> Result<SolveOutcome> {
    if gn_steps == 0 || cg_iters == 0 {
        return Err(Error::Parameter("online solve needs at least one outer and one inner iteration".into()));
    }
    let finite = |t: &Tensor| t.all_finite();
    if !memory.samples.iter().all(|s| finite(&s.feat) && finite(&s.label)) || !finite(&filter.w1) || !finite(&filter.w2) {
        return Ok(SolveOutcome::degraded(filter));
    }
    let mut problem = FilterProblem::new(filter, memory, scope)?;
    let theta0 = problem.theta_of(filter);
    match gauss_newton(&mut problem, &theta0, gn_steps, cg_iters) {
        Ok(report) => Ok(SolveOutcome {
            filter: problem.filter_of(&report.theta)?,
            objectives: report.objectives,
            inner: report.inner,
            degraded: false,
        }),
        Err(Error::Parameter(_)) => Ok(SolveOutcome::degraded(filter)),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded;

    fn small_cfg() -> OnlineConfig {
        OnlineConfig { hidden: 3, kernel: 4, ..OnlineConfig::default() }
    }

    #[test]
    fn zero_filters_give_zero_maps() {
        let mut f = OnlineFilter::new(&mut seeded(3), 2, &small_cfg());
        let feat = Tensor::from_fn([2, 5, 6], |i| (i as f64 * 0.37).sin());
        let out = online_forward(&f, &feat).unwrap();
        assert_eq!(out.shape(), &[5, 6]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        f.w1 = Tensor::zeros(f.w1.shape().to_vec());
        f.w2 = Tensor::full(f.w2.shape().to_vec(), 1.0);
        assert!(online_forward(&f, &feat).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let f = OnlineFilter::new(&mut seeded(3), 2, &small_cfg());
        assert!(matches!(online_forward(&f, &Tensor::zeros([3, 4, 4])), Err(Error::Dimension(_))));
    }

    #[test]
    fn blend_cases() {
        let a = Tensor::full([2, 3], 1.0);
        let b = Tensor::zeros([2, 3]);
        assert_eq!(blend(&a, &b, 1.0).unwrap(), a);
        assert!(blend(&a, &b, 0.6).unwrap().data().iter().all(|&v| v == 0.6));
        let y = Tensor::from_fn([2, 3], |i| i as f64 / 7.0);
        for w in [0.0, 0.3, 0.6, 1.0] {
            assert!(blend(&y, &y, w).unwrap().max_abs_diff(&y) < 1e-15);
        }
        assert!(blend(&a, &b, 1.2).is_err());
    }

    #[test]
    fn memory_weights_and_eviction() {
        let feat = || Tensor::zeros([1, 2, 2]);
        let label = |v: f64| Tensor::full([2, 2], v);
        let mut m = TrainingMemory::new(2, 0.01);
        m.update(feat(), label(0.0)).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.samples()[0].weight, 1.0);
        m.update(feat(), label(1.0)).unwrap();
        m.update(feat(), label(2.0)).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.samples()[0].label.data()[0], 1.0);
        assert_eq!(m.samples()[1].label.data()[0], 2.0);
        assert!(m.samples()[1].weight > m.samples()[0].weight);
        assert!((m.total_weight() - 1.0).abs() < 1e-12);
        assert!(m.update(Tensor::zeros([1, 3, 3]), label(0.0)).is_err());
    }

    #[test]
    fn already_optimal_filter_is_unchanged() {
        let cfg = OnlineConfig { reg: 0.0, ..small_cfg() };
        let f = OnlineFilter::new(&mut seeded(5), 2, &cfg);
        let feat = Tensor::from_fn([2, 4, 4], |i| (i as f64 * 0.21).cos());
        // zero second layer predicts zero, labels are zero: residual vanishes
        let mem = TrainingMemory::with_initial(10, 0.01, vec![(feat, Tensor::zeros([4, 4]))]).unwrap();
        let out = solve_cg(&f, &mem, 3, 5).unwrap();
        assert!(!out.degraded);
        assert_eq!(out.filter, f);
    }

    #[test]
    fn non_finite_features_degrade_gracefully() {
        let f = OnlineFilter::new(&mut seeded(5), 2, &small_cfg());
        let mut feat = Tensor::zeros([2, 4, 4]);
        feat.data_mut()[3] = f64::NAN;
        let mem = TrainingMemory::with_initial(10, 0.01, vec![(feat, Tensor::full([4, 4], 1.0))]).unwrap();
        let out = solve_cg(&f, &mem, 2, 3).unwrap();
        assert!(out.degraded);
        assert_eq!(out.filter, f);
    }

    #[test]
    fn filter_jacobian_products_are_adjoint() {
        let cfg = small_cfg();
        let f = OnlineFilter::new(&mut seeded(9), 2, &cfg);
        let f = f.with_params(&f.params().iter().enumerate().map(|(i, v)| v + 0.1 * ((i as f64) * 1.3).sin()).collect::<Vec<_>>()).unwrap();
        let feat = Tensor::from_fn([2, 5, 5], |i| (i as f64 * 0.77).sin());
        let mem = TrainingMemory::with_initial(4, 0.01, vec![(feat, Tensor::zeros([5, 5]))]).unwrap();
        let mut p = FilterProblem::new(&f, &mem, FitScope::Both).unwrap();
        p.linearize(&f.params()).unwrap();
        let v: Vec<f64> = (0..p.n_params()).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let jv = p.jvp(&v);
        let u: Vec<f64> = (0..jv.len()).map(|i| ((i * 3 % 7) as f64) * 0.1 - 0.3).collect();
        let lhs = cg::dot(&jv, &u);
        let rhs = cg::dot(&v, &p.vjp(&u));
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn refit_reduces_objective_monotonically() {
        let cfg = small_cfg();
        let f = OnlineFilter::new(&mut seeded(11), 3, &cfg);
        let samples = (0..3)
            .map(|k| {
                let feat = Tensor::from_fn([3, 6, 6], |i| ((i + 13 * k) as f64 * 0.41).sin().abs());
                let label = crate::loss::gaussian_label(crate::localize::GridPoint { x: 2 + k, y: 3 }, 1.0, 6, 6).unwrap();
                (feat, label)
            })
            .collect();
        let mem = TrainingMemory::with_initial(10, 0.01, samples).unwrap();
        let out = solve_cg(&f, &mem, 6, 8).unwrap();
        assert!(out.objectives.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.objectives.last().unwrap() < &(0.5 * out.objectives[0]));
        assert!((online_objective(&out.filter, &mem).unwrap() - out.objectives.last().unwrap()).abs() < 1e-9);
    }
}
