//! One-pass evaluation: per-frame IoU, success rates and success AUC.

use crate::error::{Error, Result};
use crate::localize::BoundingBox;

/// Number of IoU thresholds `0, 0.05, …, 1` in the success curve.
pub const SUCCESS_STEPS: usize = 21;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub frames: usize,
    pub ious: Vec<f64>,
    pub mean_iou: f64,
    pub success_50: f64,
    pub success_75: f64,
    /// Fraction of frames with IoU ≥ each threshold.
    pub success_curve: Vec<f64>,
    pub auc: f64,
}

fn success_rate(ious: &[f64], threshold: f64) -> f64 {
    ious.iter().filter(|&&v| v >= threshold).count() as f64 / ious.len() as f64
}

pub fn evaluate(pred: &[BoundingBox], truth: &[BoundingBox]) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(Error::Input(format!("{} predictions for {} ground-truth boxes", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Input("no frames to evaluate".into()));
    }
    let ious: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p.iou(t)).collect();
    let success_curve: Vec<f64> = (0..SUCCESS_STEPS)
        .map(|i| success_rate(&ious, i as f64 / (SUCCESS_STEPS - 1) as f64))
        .collect();
    Ok(Metrics {
        frames: ious.len(),
        mean_iou: ious.iter().sum::<f64>() / ious.len() as f64,
        success_50: success_rate(&ious, 0.5),
        success_75: success_rate(&ious, 0.75),
        auc: success_curve.iter().sum::<f64>() / SUCCESS_STEPS as f64,
        success_curve,
        ious,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_disjoint() {
        let b = vec![BoundingBox::from_corner(3.0, 4.0, 10.0, 6.0); 3];
        let m = evaluate(&b, &b).unwrap();
        assert_eq!((m.mean_iou, m.auc, m.success_75), (1.0, 1.0, 1.0));
        let far = vec![BoundingBox::from_corner(50.0, 50.0, 10.0, 6.0); 3];
        let m = evaluate(&far, &b).unwrap();
        assert_eq!(m.mean_iou, 0.0);
        assert_eq!(m.success_50, 0.0);
    }

    #[test]
    fn unit_overlap_is_one_seventh() {
        let a = [BoundingBox::from_corner(0.0, 0.0, 2.0, 2.0)];
        let b = [BoundingBox::from_corner(1.0, 1.0, 2.0, 2.0)];
        assert!((evaluate(&a, &b).unwrap().mean_iou - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_an_input_error() {
        let a = [BoundingBox::new(1.0, 1.0, 1.0, 1.0)];
        assert!(matches!(evaluate(&a, &[]), Err(Error::Input(_))));
    }
}
