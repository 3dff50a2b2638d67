//! Foster–Greer–Thorbecke measures and the weighted direct estimator.

use serde::{Deserialize, Serialize};

use crate::data::AreaId;
use crate::error::{domain, Result};

/// Poverty-indicator orders supported: headcount, gap and severity.
pub const ALPHAS: [u32; 3] = [0, 1, 2];

fn check_alpha(alpha: u32) -> Result<()> {
    if alpha > 2 {
        return domain(format!("alpha must be 0, 1 or 2, got {alpha}"));
    }
    Ok(())
}

/// Unit contribution `((z - e)/z)^alpha * 1{e < z}`.
pub fn fgt_unit(e: f64, z: f64, alpha: u32) -> Result<f64> {
    if !(z > 0.0) {
        return domain(format!("poverty line must be positive, got {z}"));
    }
    check_alpha(alpha)?;
    Ok(fgt_all(e, z)[alpha as usize])
}

/// All three unit contributions at once; caller guarantees `z > 0`.
#[inline]
pub(crate) fn fgt_all(e: f64, z: f64) -> [f64; 3] {
    if e < z {
        let g = (z - e) / z;
        [1.0, g, g * g]
    } else {
        [0.0; 3]
    }
}

/// Area measure: mean of unit contributions.
pub fn fgt_area(unit_values: &[f64]) -> Result<f64> {
    if unit_values.is_empty() {
        return domain("FGT area mean of an empty list");
    }
    Ok(unit_values.iter().sum::<f64>() / unit_values.len() as f64)
}

/// One per-area, per-order estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FgtEstimate {
    pub area_id: AreaId,
    pub alpha: u32,
    pub value: f64,
    pub mspe: Option<f64>,
    pub cv: Option<f64>,
}

impl FgtEstimate {
    pub fn point(area_id: AreaId, alpha: u32, value: f64) -> Self {
        FgtEstimate {
            area_id,
            alpha,
            value,
            mspe: None,
            cv: None,
        }
    }

    /// Attaches an MSPE and derives the CV; the CV stays missing for a
    /// zero estimate.
    pub fn with_mspe(mut self, mspe: f64) -> Self {
        self.mspe = Some(mspe);
        self.cv = coefficient_of_variation(mspe, self.value);
        self
    }
}

pub fn coefficient_of_variation(variance: f64, value: f64) -> Option<f64> {
    (value > 0.0).then(|| variance.max(0.0).sqrt() / value)
}

/// Weighted direct estimate of one area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectEstimate {
    pub estimate: f64,
    pub variance: f64,
    pub cv: Option<f64>,
}

/// Hájek-type weighted mean of the unit FGT values, with variance
/// `sum w(w-1)(F - est)^2 / Nhat^2`.
pub fn direct_fgt(welfare_and_weights: &[(f64, f64)], z: f64, alpha: u32) -> Result<DirectEstimate> {
    if !(z > 0.0) {
        return domain(format!("poverty line must be positive, got {z}"));
    }
    check_alpha(alpha)?;
    if welfare_and_weights.is_empty() {
        return domain("direct estimator needs at least one sampled unit");
    }
    if let Some((_, w)) = welfare_and_weights.iter().find(|(_, w)| !(*w > 0.0)) {
        return domain(format!("direct estimator needs positive weights, got {w}"));
    }
    let n_hat: f64 = welfare_and_weights.iter().map(|(_, w)| w).sum();
    if !(n_hat > 0.0) {
        return domain("zero total weight");
    }
    let values: Vec<f64> = welfare_and_weights
        .iter()
        .map(|&(e, _)| fgt_all(e, z)[alpha as usize])
        .collect();
    let estimate = welfare_and_weights
        .iter()
        .zip(&values)
        .map(|((_, w), f)| w * f)
        .sum::<f64>()
        / n_hat;
    let variance = welfare_and_weights
        .iter()
        .zip(&values)
        .map(|((_, w), f)| w * (w - 1.0) * (f - estimate).powi(2))
        .sum::<f64>()
        / (n_hat * n_hat);
    Ok(DirectEstimate {
        estimate,
        variance,
        cv: coefficient_of_variation(variance, estimate),
    })
}
