//! Model-versus-direct diagnostics: the W goodness-of-fit statistic, CV
//! ECDF tables, and the Pearson correlation of paired estimates.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::AreaId;
use crate::error::{domain, Result};

/// CV reliability thresholds in percent.
pub const DEFAULT_CV_THRESHOLDS: [f64; 3] = [16.6, 20.0, 33.3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedArea {
    pub area_id: AreaId,
    pub direct: f64,
    pub direct_variance: f64,
    pub model: f64,
    pub model_mspe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WStatistic {
    pub w: f64,
    /// Areas that contributed; the chi-square reference uses this as df.
    pub df: usize,
    /// Areas dropped for a non-positive denominator.
    pub excluded: Vec<AreaId>,
    /// 0.95 quantile of chi-square with `df` degrees of freedom.
    pub chi2_95: Option<f64>,
}

impl WStatistic {
    pub fn exceeds_reference(&self) -> bool {
        self.chi2_95.is_some_and(|q| self.w > q)
    }
}

pub fn chi_squared_quantile(df: usize, level: f64) -> Result<f64> {
    if df == 0 || !(level > 0.0 && level < 1.0) {
        return domain(format!("chi-square quantile needs df >= 1 and level in (0,1), got {df}, {level}"));
    }
    let dist = ChiSquared::new(df as f64).map_err(|e| crate::error::Error::Domain(e.to_string()))?;
    Ok(dist.inverse_cdf(level))
}

/// `W = sum (direct - model)^2 / (var_direct + mspe_model)` over areas with
/// a positive, finite denominator.
pub fn w_statistic(areas: &[PairedArea]) -> Result<WStatistic> {
    let mut terms = Vec::with_capacity(areas.len());
    let mut excluded = Vec::new();
    for a in areas {
        if !(a.direct.is_finite() && a.model.is_finite()) {
            return domain(format!("non-finite estimate for area {}", a.area_id));
        }
        let den = a.direct_variance + a.model_mspe;
        if den > 0.0 && den.is_finite() {
            terms.push((a.area_id.clone(), (a.direct - a.model).powi(2) / den));
        } else {
            excluded.push(a.area_id.clone());
        }
    }
    // Summing in area order keeps W independent of the input order.
    terms.sort_by(|x, y| x.0.cmp(&y.0));
    excluded.sort();
    let df = terms.len();
    Ok(WStatistic {
        w: terms.iter().map(|t| t.1).sum(),
        df,
        excluded,
        chi2_95: (df > 0).then(|| chi_squared_quantile(df, 0.95)).transpose()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvEcdf {
    /// Distinct CV values with the fraction of areas at or below each.
    pub table: Vec<(f64, f64)>,
    /// (threshold, fraction of areas strictly above it).
    pub exceedance: Vec<(f64, f64)>,
}

/// Empirical CDF of CVs (same units as `thresholds`, percent by convention).
pub fn cv_ecdf(cvs: &[f64], thresholds: &[f64]) -> Result<CvEcdf> {
    if cvs.is_empty() {
        return domain("CV ECDF needs at least one value");
    }
    if let Some(v) = cvs.iter().find(|v| !v.is_finite()) {
        return domain(format!("CV values must be finite, got {v}"));
    }
    let mut sorted = cvs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut table: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match table.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => table.push((v, frac)),
        }
    }
    let exceedance = thresholds
        .iter()
        .map(|&t| (t, sorted.iter().filter(|&&v| v > t).count() as f64 / n))
        .collect();
    Ok(CvEcdf { table, exceedance })
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() || a.len() < 2 {
        return domain(format!(
            "correlation needs two equal-length series of length >= 2, got {} and {}",
            a.len(),
            b.len()
        ));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    Ok((saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt()))
}
