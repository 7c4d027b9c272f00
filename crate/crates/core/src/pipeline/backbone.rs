//! Small strided convnet with total stride 8.
//!
//! Three 4×4 stride-2 stages (`3→8→16→C_mid`, ReLU) followed by a 3×3
//! reduction to the model width `d`. The third stage is the mid-level tap.

use crate::error::{Error, Result};
use crate::init::{uniform, xavier, SeedRng};
use crate::tensor::{Graph, Tensor, TransformerWeights, Var};

pub const BACKBONE_STRIDE: usize = 8;

const STAGES: [(usize, usize, usize); 4] = [(4, 2, 1), (4, 2, 1), (4, 2, 1), (3, 1, 1)];

pub struct BackboneOutput<'g> {
    /// `C_mid×T/8×T/8`, after ReLU.
    pub mid: Var<'g>,
    /// `d×T/8×T/8`, no activation.
    pub out: Var<'g>,
}

fn channels(c_mid: usize, d: usize) -> [usize; 5] {
    [3, 8, 16, c_mid, d]
}

pub fn init_backbone(rng: &mut SeedRng, w: &mut TransformerWeights, c_mid: usize, d: usize) -> Result<()> {
    let ch = channels(c_mid, d);
    for (i, &(k, _, _)) in STAGES.iter().enumerate() {
        let (cin, cout) = (ch[i], ch[i + 1]);
        let shape = [cout, cin, k, k];
        let kernel = if i + 1 < STAGES.len() {
            uniform(rng, &shape, (6.0 / (cin * k * k) as f64).sqrt())
        } else {
            xavier(rng, &shape, cin * k * k, cout * k * k)
        };
        w.insert(format!("backbone.conv{}.weight", i + 1), kernel)?;
        w.insert(format!("backbone.conv{}.bias", i + 1), Tensor::zeros([cout]))?;
    }
    Ok(())
}

pub fn backbone_forward<'g>(graph: &'g Graph, weights: &TransformerWeights, patch: &Var<'g>) -> Result<BackboneOutput<'g>> {
    let shape = patch.shape();
    if shape.len() != 3 || shape[1] % BACKBONE_STRIDE != 0 || shape[2] % BACKBONE_STRIDE != 0 {
        return Err(Error::Config(format!("backbone input {shape:?} must be 3×T×T with T divisible by {BACKBONE_STRIDE}")));
    }
    let mut x = *patch;
    let mut mid = None;
    for (i, &(_, stride, pad)) in STAGES.iter().enumerate() {
        let k = graph.param(weights, &format!("backbone.conv{}.weight", i + 1))?;
        let b = graph.param(weights, &format!("backbone.conv{}.bias", i + 1))?;
        x = x.conv2d(&k, stride, pad)?.add_channel(&b)?;
        if i + 1 < STAGES.len() {
            x = x.relu();
        }
        if i + 2 == STAGES.len() {
            mid = Some(x);
        }
    }
    Ok(BackboneOutput { mid: mid.expect("at least two stages"), out: x })
}

/// `C_mid` and `d` recorded in a weight set.
pub fn backbone_widths(w: &TransformerWeights) -> Result<(usize, usize)> {
    let c_mid = w.get("backbone.conv3.weight")?.shape()[0];
    let d = w.get("backbone.conv4.weight")?.shape()[0];
    Ok((c_mid, d))
}
