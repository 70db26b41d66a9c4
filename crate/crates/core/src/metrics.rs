use crate::error::{QfitError, Result};
use crate::stack::ParameterMap;

/// Root mean squared error over voxels where `mask` is set.
pub fn rmse(estimate: &ParameterMap, truth: &ParameterMap, mask: &[bool]) -> Result<f64> {
    if estimate.len() != truth.len() || mask.len() != truth.len() {
        return Err(QfitError::shape("rmse inputs", truth.len(), (estimate.len(), mask.len())));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((e, t), &m) in estimate.values.iter().zip(&truth.values).zip(mask) {
        if m {
            sum += (e - t) * (e - t);
            n += 1;
        }
    }
    if n == 0 {
        return Err(QfitError::Invalid("rmse over an empty mask".into()));
    }
    Ok((sum / n as f64).sqrt())
}

/// Intersection of the truth mask and both maps' validity.
pub fn joint_mask(truth_mask: &[bool], maps: &[&ParameterMap]) -> Vec<bool> {
    (0..truth_mask.len())
        .map(|v| truth_mask[v] && maps.iter().all(|m| m.mask[v]))
        .collect()
}
