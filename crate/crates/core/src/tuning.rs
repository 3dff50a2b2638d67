//! Area-specific tuning parameters: pooled M-quantile fits on a grid of
//! tau, unit-level assignment, area means, the smoothed precision of those
//! means, and the logit model that carries tau to unsampled areas.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AreaId, CensusDataset, SurveyDataset};
use crate::error::{domain, Result};
use crate::numeric::{expit, nelder_mead};
use crate::robust::{check_full_rank, design_with_intercept, mquantile_regress, PsiConfig, RegressionFit, SolverControl};

/// Pooled M-quantile fits, one per grid value of tau.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauGrid {
    pub taus: Vec<f64>,
    pub fits: Vec<RegressionFit>,
}

impl TauGrid {
    /// 0.01, 0.02, ..., 0.99.
    pub fn default_taus() -> Vec<f64> {
        (1..=99).map(|k| k as f64 / 100.0).collect()
    }

    pub fn validate_taus(taus: &[f64]) -> Result<()> {
        if taus.is_empty() {
            return domain("tau grid is empty");
        }
        if taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return domain("tau grid values must lie in (0, 1)");
        }
        if taus.windows(2).any(|w| !(w[0] < w[1])) {
            return domain("tau grid must be strictly ascending");
        }
        Ok(())
    }

    pub fn min_tau(&self) -> f64 {
        self.taus[0]
    }

    pub fn max_tau(&self) -> f64 {
        self.taus[self.taus.len() - 1]
    }

    pub fn clamp(&self, tau: f64) -> f64 {
        tau.clamp(self.min_tau(), self.max_tau())
    }

    /// Grid values whose fit did not converge.
    pub fn flagged(&self) -> Vec<f64> {
        self.taus
            .iter()
            .zip(&self.fits)
            .filter(|(_, f)| !f.converged)
            .map(|(t, _)| *t)
            .collect()
    }
}

/// Fits the pooled M-quantile regression at every grid value.
pub fn fit_grid(survey: &SurveyDataset, taus: &[f64], huber_c: f64, control: SolverControl) -> Result<TauGrid> {
    TauGrid::validate_taus(taus)?;
    let p = survey.p();
    if survey.len() <= p + 1 {
        return domain(format!(
            "pooled sample of {} units is too small for {} covariates",
            survey.len(),
            p
        ));
    }
    let x = design_with_intercept(survey.records().iter().map(|r| r.x.as_slice()), p);
    check_full_rank(&x)?;
    let y = DVector::from_iterator(survey.len(), survey.records().iter().map(|r| r.y));
    let fits = taus
        .par_iter()
        .map(|&tau| mquantile_regress(&x, &y, PsiConfig::new(huber_c, tau)?, control))
        .collect::<Result<Vec<_>>>()?;
    Ok(TauGrid {
        taus: taus.to_vec(),
        fits,
    })
}

/// Grid tau whose fitted line is closest to `y`; ties go to the tau nearest
/// 0.5 and then to the smaller tau.
pub fn assign_unit_tau(y: f64, x: &[f64], grid: &TauGrid) -> f64 {
    let key = |k: usize| ((y - grid.fits[k].predict(x)).abs(), (grid.taus[k] - 0.5).abs(), grid.taus[k]);
    (0..grid.taus.len())
        .map(|k| (k, key(k)))
        .min_by(|(_, a), (_, b)| {
            a.0.total_cmp(&b.0)
                .then(a.1.total_cmp(&b.1))
                .then(a.2.total_cmp(&b.2))
        })
        .map(|(k, _)| grid.taus[k])
        .expect("grid is non-empty")
}

/// Mean of the unit taus, clamped to `[lo, hi]`.
pub fn area_tau(unit_taus: &[f64], lo: f64, hi: f64) -> Result<f64> {
    if unit_taus.is_empty() {
        return domain("area tau needs at least one unit");
    }
    let m = unit_taus.iter().sum::<f64>() / unit_taus.len() as f64;
    Ok(m.clamp(lo, hi))
}

/// `Delta_i = SS_within / (n - m_s) / n_i` with the within-area sum of
/// squares pooled over all sampled areas.
pub fn smooth_delta(
    unit_taus: &BTreeMap<AreaId, Vec<f64>>,
    area_taus: &BTreeMap<AreaId, f64>,
) -> Result<BTreeMap<AreaId, f64>> {
    let n: usize = unit_taus.values().map(Vec::len).sum();
    let m_s = unit_taus.len();
    if n <= m_s {
        return domain(format!(
            "smoothing needs more units ({n}) than sampled areas ({m_s})"
        ));
    }
    let mut ss = 0.0;
    for (area, taus) in unit_taus {
        let Some(&mean) = area_taus.get(area) else {
            return Err(crate::error::Error::MissingArea(area.to_string()));
        };
        ss += taus.iter().map(|t| (t - mean).powi(2)).sum::<f64>();
    }
    let pooled = ss / (n - m_s) as f64;
    Ok(unit_taus
        .iter()
        .map(|(a, t)| (a.clone(), pooled / t.len() as f64))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaFit {
    pub eta: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `Q(eta) = sum (tau_i - expit(z_i' eta))^2 / Delta_i`.
pub fn logit_objective(zbar: &[Vec<f64>], taus: &[f64], weights: &[f64], eta: &[f64]) -> f64 {
    zbar.iter()
        .zip(taus)
        .zip(weights)
        .map(|((z, t), w)| w * (t - expit(dot(z, eta))).powi(2))
        .sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Inverse-Delta weights; zero deltas take the smallest positive one, and
/// all-zero deltas give equal weights.
fn logit_weights(deltas: &[f64]) -> Vec<f64> {
    let min_pos = deltas.iter().copied().filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min);
    let fill = if min_pos.is_finite() { min_pos } else { 1.0 };
    deltas
        .iter()
        .map(|&d| 1.0 / if d > 0.0 { d } else { fill })
        .collect()
}

const ETA_MAX_ITER: usize = 500;

/// Weighted nonlinear least squares for the logit coefficients, started at
/// zero. Gauss–Newton with step halving; Nelder–Mead takes over when the
/// Gauss–Newton step fails to decrease the objective.
pub fn fit_logit_eta(zbar: &[Vec<f64>], taus: &[f64], deltas: &[f64]) -> Result<EtaFit> {
    let m = zbar.len();
    if m == 0 || taus.len() != m || deltas.len() != m {
        return domain("logit model needs one Zbar row, tau and Delta per sampled area");
    }
    let q = zbar[0].len();
    if q == 0 || zbar.iter().any(|z| z.len() != q) {
        return domain("area auxiliary rows must share a positive length");
    }
    if m < q {
        return domain(format!("logit model has {q} coefficients but only {m} sampled areas"));
    }
    if deltas.iter().chain(taus).any(|v| !v.is_finite()) || deltas.iter().any(|d| *d < 0.0) {
        return domain("logit model received invalid tau or Delta");
    }
    let w = logit_weights(deltas);
    let objective = |eta: &[f64]| logit_objective(zbar, taus, &w, eta);

    let mut eta = vec![0.0; q];
    let mut value = objective(&eta);
    let mut iterations = 0;
    let mut stalled = false;
    let mut converged = false;
    while iterations < ETA_MAX_ITER {
        iterations += 1;
        // Normal equations of the linearized problem.
        let mut jtj = DMatrix::<f64>::zeros(q, q);
        let mut jtr = DVector::<f64>::zeros(q);
        for i in 0..m {
            let pr = expit(dot(&zbar[i], &eta));
            let d = pr * (1.0 - pr);
            let r = taus[i] - pr;
            for a in 0..q {
                jtr[a] += w[i] * d * zbar[i][a] * r;
                for b in 0..q {
                    jtj[(a, b)] += w[i] * d * d * zbar[i][a] * zbar[i][b];
                }
            }
        }
        let grad_norm = jtr.amax();
        if grad_norm <= 1e-12 * (1.0 + value) || value == 0.0 {
            converged = true;
            break;
        }
        let Some(step) = jtj.clone().cholesky().map(|c| c.solve(&jtr)) else {
            stalled = true;
            break;
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = eta.iter().zip(step.iter()).map(|(e, s)| e + t * s).collect();
            let v = objective(&trial);
            if v < value {
                let small = step.amax() * t <= 1e-12 * (1.0 + eta.iter().fold(0.0f64, |a, e| a.max(e.abs())));
                let flat = value - v <= 1e-15 * value;
                eta = trial;
                value = v;
                accepted = true;
                if small || flat {
                    converged = true;
                }
                break;
            }
            t *= 0.5;
        }
        if converged {
            break;
        }
        if !accepted {
            stalled = true;
            break;
        }
    }
    if stalled || !converged {
        let remaining = ETA_MAX_ITER.saturating_sub(iterations).max(50) * q.max(1) * 20;
        let nm = nelder_mead(objective, &eta, 0.5, 1e-14, 1e-10, remaining);
        if nm.fx <= value {
            eta = nm.x;
            value = nm.fx;
        }
        iterations += nm.iterations;
        converged = nm.converged;
    }
    Ok(EtaFit {
        eta,
        objective: value,
        iterations,
        converged,
    })
}

/// `expit(zbar' eta)` clamped to `[lo, hi]`.
pub fn predict_tau_oos(zbar: &[f64], eta: &[f64], lo: f64, hi: f64) -> Result<f64> {
    if zbar.len() != eta.len() {
        return domain(format!(
            "area auxiliary row has {} values but eta has {}",
            zbar.len(),
            eta.len()
        ));
    }
    Ok(expit(dot(zbar, eta)).clamp(lo, hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauSource {
    SampledMean,
    OosLogit,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauEstimates {
    /// Unit taus per sampled area, in the survey's canonical record order.
    pub unit_tau: BTreeMap<AreaId, Vec<f64>>,
    pub area_tau: BTreeMap<AreaId, f64>,
    pub delta: BTreeMap<AreaId, f64>,
    pub eta: EtaFit,
    pub source: BTreeMap<AreaId, TauSource>,
    /// Grid values whose pooled fit did not converge.
    pub grid_flagged: Vec<f64>,
}

/// Full tuning pipeline for every census area.
pub fn estimate_taus(
    survey: &SurveyDataset,
    census: &CensusDataset,
    taus: &[f64],
    huber_c: f64,
    control: SolverControl,
) -> Result<TauEstimates> {
    let grid = fit_grid(survey, taus, huber_c, control)?;
    let (lo, hi) = (grid.min_tau(), grid.max_tau());
    let unit_tau: BTreeMap<AreaId, Vec<f64>> = survey
        .area_index()
        .iter()
        .map(|(area, idx)| {
            let t = idx
                .iter()
                .map(|&i| {
                    let r = &survey.records()[i];
                    assign_unit_tau(r.y, &r.x, &grid)
                })
                .collect();
            (area.clone(), t)
        })
        .collect();
    let mut area_taus = BTreeMap::new();
    for (area, t) in &unit_tau {
        area_taus.insert(area.clone(), area_tau(t, lo, hi)?);
    }
    let delta = smooth_delta(&unit_tau, &area_taus)?;

    let sampled: Vec<&AreaId> = unit_tau.keys().collect();
    let zbar: Vec<Vec<f64>> = sampled.iter().map(|a| census.aux_for(a)).collect();
    let eta = fit_logit_eta(
        &zbar,
        &sampled.iter().map(|a| area_taus[*a]).collect::<Vec<_>>(),
        &sampled.iter().map(|a| delta[*a]).collect::<Vec<_>>(),
    )?;

    let mut source: BTreeMap<AreaId, TauSource> = sampled
        .iter()
        .map(|a| ((*a).clone(), TauSource::SampledMean))
        .collect();
    for area in census.areas() {
        if !area_taus.contains_key(area) {
            let t = predict_tau_oos(&census.aux_for(area), &eta.eta, lo, hi)?;
            area_taus.insert(area.clone(), t);
            source.insert(area.clone(), TauSource::OosLogit);
        }
    }
    Ok(TauEstimates {
        unit_tau,
        area_tau: area_taus,
        delta,
        eta,
        source,
        grid_flagged: grid.flagged(),
    })
}
