//! Area-specific error variances, the shared intercept and the area-effect
//! variance, plus the fixed-point iteration that ties them together.
//!
//! Every covariance block here is compound symmetric,
//! `V = a * 11' + s * I`, whose inverse is the rank-one update
//! `V^{-1} = (I - g 11') / s` with `g = a / (s + n a)`. The estimating
//! functions only need per-block sums of `psi` and `psi^2`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{AreaId, SurveyDataset};
use crate::error::{domain, Error, Result};
use crate::numeric::{brent, integrate, norm_pdf};
use crate::robust::{huber_psi, w_star, PsiConfig, RegressionFit};

/// Lower bound for the error variances.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Per-block sufficient statistics of the transformed residuals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSums {
    pub n: f64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl BlockSums {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        values.into_iter().fold(
            BlockSums {
                n: 0.0,
                sum: 0.0,
                sum_sq: 0.0,
            },
            |acc, v| BlockSums {
                n: acc.n + 1.0,
                sum: acc.sum + v,
                sum_sq: acc.sum_sq + v * v,
            },
        )
    }
}

/// `g` in the rank-one form of the compound-symmetry inverse.
#[inline]
pub fn cs_inverse_coefficient(sigma_gamma2: f64, sigma_eps2: f64, n: f64) -> f64 {
    sigma_gamma2 / (sigma_eps2 + n * sigma_gamma2)
}

/// Value of the error-variance estimating function at `s`, given the
/// psi-transformed blocks and the current (standardized) area-effect
/// variance. `consistency` multiplies the trace term (1 for the plain
/// equation).
pub fn sigma_eps_equation(blocks: &[BlockSums], sigma_gamma2: f64, s: f64, consistency: f64) -> f64 {
    blocks
        .iter()
        .map(|b| {
            let g = cs_inverse_coefficient(sigma_gamma2, s, b.n);
            let s2 = b.sum * b.sum;
            let quad = (b.sum_sq - 2.0 * g * s2 + g * g * b.n * s2) / (s * s);
            let trace = b.n * (1.0 - g) / s;
            quad - consistency * trace
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootSolution {
    pub value: f64,
    /// Estimating function at `value`.
    pub residual: f64,
    pub converged: bool,
    /// Set when no sign change was found and a bracket end was returned.
    pub boundary: bool,
}

/// Root in `sigma_eps^2` of the error-variance estimating equation.
///
/// `blocks` holds, per sampled area `l`, the residuals of the fit being
/// evaluated, already divided by that fit's scale; they are passed through
/// `psi` here. `sigma_gamma2` must be on the same standardized scale.
pub fn solve_sigma_eps(
    blocks: &[&[f64]],
    sigma_gamma2: f64,
    psi: PsiConfig,
    consistency: f64,
) -> Result<RootSolution> {
    let sums: Vec<BlockSums> = blocks
        .iter()
        .filter(|b| !b.is_empty())
        .map(|b| BlockSums::of(b.iter().map(|&r| psi.psi(r))))
        .collect();
    let raw_ms = {
        let n: usize = blocks.iter().map(|b| b.len()).sum();
        if n == 0 {
            return domain("error-variance equation needs residuals");
        }
        blocks.iter().flat_map(|b| b.iter()).map(|r| r * r).sum::<f64>() / n as f64
    };
    solve_sigma_eps_sums(&sums, sigma_gamma2, consistency, raw_ms)
}

/// Same as [`solve_sigma_eps`] on precomputed psi block sums.
pub fn solve_sigma_eps_sums(
    sums: &[BlockSums],
    sigma_gamma2: f64,
    consistency: f64,
    raw_mean_square: f64,
) -> Result<RootSolution> {
    if sums.is_empty() {
        return domain("error-variance equation needs residuals");
    }
    if !(sigma_gamma2 >= 0.0) {
        return domain(format!("sigma_gamma2 must be >= 0, got {sigma_gamma2}"));
    }
    let f = |s: f64| sigma_eps_equation(sums, sigma_gamma2, s, consistency);
    let lo = VARIANCE_FLOOR;
    let f_lo = f(lo);
    if f_lo <= 0.0 {
        return Ok(RootSolution {
            value: lo,
            residual: f_lo,
            converged: true,
            boundary: false,
        });
    }
    let total_n: f64 = sums.iter().map(|b| b.n).sum();
    let psi_ms = sums.iter().map(|b| b.sum_sq).sum::<f64>() / total_n;
    let cap = 1e6 * raw_mean_square.max(psi_ms).max(VARIANCE_FLOOR);
    let mut a = lo;
    let mut b = (psi_ms / consistency.max(1e-12)).max(2.0 * lo);
    let mut f_b = f(b);
    while f_b > 0.0 && b < cap {
        a = b;
        b = (4.0 * b).min(cap);
        f_b = f(b);
    }
    if f_b > 0.0 {
        return Ok(RootSolution {
            value: b,
            residual: f_b,
            converged: false,
            boundary: true,
        });
    }
    let root = brent(f, a, b, 1e-10, 200);
    Ok(RootSolution {
        value: root.x,
        residual: root.fx,
        converged: root.converged && root.fx.abs() <= 1e-8,
        boundary: false,
    })
}

/// Grand mean of `y - x' beta_i` over the whole sample.
pub fn estimate_beta0(survey: &SurveyDataset, slopes: &BTreeMap<AreaId, Vec<f64>>) -> Result<f64> {
    let mut total = 0.0;
    for (area, idx) in survey.area_index() {
        let b = slopes
            .get(area)
            .ok_or_else(|| Error::MissingArea(area.to_string()))?;
        for &i in idx {
            let r = &survey.records()[i];
            total += r.y - dot(&r.x, b);
        }
    }
    Ok(total / survey.len() as f64)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Area-effect variance equation at `sigma_gamma2`.
pub fn sigma_gamma_equation(rbar: &[f64], d: &[f64], c: f64, w: f64, sigma_gamma2: f64) -> f64 {
    rbar.iter()
        .zip(d)
        .map(|(&r, &di)| {
            let v = sigma_gamma2 + di;
            let p = huber_psi(r / v.sqrt(), c);
            (p * p - w) / v
        })
        .sum()
}

/// Non-negative root in `sigma_gamma^2` of the area-effect equation, using
/// centered area residual means and `d_i = sigma_eps_i^2 / n_i`.
pub fn solve_sigma_gamma(rbar: &[f64], d: &[f64], c: f64) -> Result<RootSolution> {
    if rbar.len() != d.len() || rbar.is_empty() {
        return domain("area-effect equation needs one residual mean and one d per area");
    }
    if rbar.iter().chain(d).any(|v| !v.is_finite()) || !c.is_finite() {
        return domain("area-effect equation received non-finite input");
    }
    if d.iter().any(|&v| !(v > 0.0)) {
        return domain("area-effect equation needs positive d_i");
    }
    let w = w_star(c);
    let f = |a: f64| sigma_gamma_equation(rbar, d, c, w, a);
    let f0 = f(0.0);
    if f0 <= 0.0 {
        return Ok(RootSolution {
            value: 0.0,
            residual: f0,
            converged: true,
            boundary: false,
        });
    }
    let scale = rbar.iter().map(|r| r * r).fold(0.0, f64::max) + d.iter().copied().fold(0.0, f64::max);
    let cap = 1e8 * scale.max(1e-12);
    let mut a = 0.0;
    let mut b = scale.max(1e-12);
    let mut f_b = f(b);
    while f_b > 0.0 && b < cap {
        a = b;
        b *= 2.0;
        f_b = f(b);
    }
    if f_b > 0.0 {
        return Ok(RootSolution {
            value: b,
            residual: f_b,
            converged: false,
            boundary: true,
        });
    }
    let root = brent(f, a, b, 1e-13, 300);
    Ok(RootSolution {
        value: root.x.max(0.0),
        residual: root.fx,
        converged: root.converged && root.fx.abs() <= 1e-8,
        boundary: false,
    })
}

/// Step-1 output for one area.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaFit {
    pub psi: PsiConfig,
    pub fit: RegressionFit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceControl {
    pub tol: f64,
    pub max_outer: usize,
    /// Run the two steps once (area-effect variance starting at zero)
    /// instead of iterating to a fixed point.
    pub single_pass: bool,
    /// Multiplier on the trace term of the error-variance equation.
    pub eps_consistency: EpsConsistency,
}

/// How the trace term of the error-variance equation is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsConsistency {
    /// Plain equation, trace multiplied by one.
    None,
    /// Trace multiplied by `E[psi_tau(u - m)^2]`, `u` standard normal and
    /// `m` the tau-th M-quantile of `u`.
    Normal,
}

impl Default for VarianceControl {
    fn default() -> Self {
        VarianceControl {
            tol: 1e-6,
            max_outer: 50,
            single_pass: false,
            eps_consistency: EpsConsistency::Normal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSolution {
    pub sigma_eps2: BTreeMap<AreaId, f64>,
    pub sigma_gamma2: f64,
    pub beta0: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Areas whose error-variance root was not cleanly found.
    pub flagged_areas: Vec<AreaId>,
}

/// `E[psi_tau(u - m)^2]` for standard normal `u`, where `m` solves
/// `E[psi_tau(u - m)] = 0`.
pub fn psi_tau_consistency(psi: PsiConfig) -> f64 {
    // Integrate piecewise between the kinks of psi so Simpson stays exact
    // to roundoff on each smooth piece.
    let expect = |m: f64, f: &dyn Fn(f64) -> f64| -> f64 {
        let c = psi.huber_c.min(20.0);
        let knots = [-14.0 + m.min(0.0), m - c, m, m + c, 14.0 + m.max(0.0)];
        knots
            .windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| integrate(&|u| f(u) * norm_pdf(u), w[0], w[1], 1e-14))
            .sum()
    };
    let location = brent(|m| expect(m, &|u| psi.psi(u - m)), -10.0, 10.0, 1e-14, 200).x;
    expect(location, &|u| psi.psi(u - location).powi(2))
}

struct FitSummary {
    scale2: f64,
    sums: Vec<BlockSums>,
    raw_ms: f64,
    consistency: f64,
}

fn summarize(survey: &SurveyDataset, af: &AreaFit, control: &VarianceControl) -> FitSummary {
    let scale = af.fit.scale;
    let mut raw_sq = 0.0;
    let sums = survey
        .area_index()
        .values()
        .map(|idx| {
            BlockSums::of(idx.iter().map(|&i| {
                let r = &survey.records()[i];
                let e = (r.y - af.fit.predict(&r.x)) / scale;
                raw_sq += e * e;
                af.psi.psi(e)
            }))
        })
        .collect();
    let consistency = match control.eps_consistency {
        EpsConsistency::None => 1.0,
        EpsConsistency::Normal => psi_tau_consistency(af.psi),
    };
    FitSummary {
        scale2: scale * scale,
        sums,
        raw_ms: raw_sq / survey.len() as f64,
        consistency,
    }
}

/// Alternates the error-variance solves (all areas) with the intercept and
/// area-effect variance updates until the relative change of all
/// variances falls below `control.tol`.
pub fn iterate_variances(
    survey: &SurveyDataset,
    fits: &BTreeMap<AreaId, AreaFit>,
    huber_c: f64,
    control: &VarianceControl,
) -> Result<VarianceSolution> {
    // Areas sharing tau share the whole Step-1 problem; summarize once.
    let mut by_tau: HashMap<u64, usize> = HashMap::new();
    let mut summaries: Vec<FitSummary> = Vec::new();
    let mut area_group: BTreeMap<&AreaId, usize> = BTreeMap::new();
    for (area, af) in fits {
        let key = af.psi.tau.to_bits();
        let g = *by_tau.entry(key).or_insert_with(|| {
            summaries.push(summarize(survey, af, control));
            summaries.len() - 1
        });
        area_group.insert(area, g);
    }

    let slopes: BTreeMap<AreaId, Vec<f64>> = fits
        .iter()
        .map(|(a, af)| (a.clone(), af.fit.slopes.clone()))
        .collect();
    let beta0 = estimate_beta0(survey, &slopes)?;
    let sampled: Vec<(&AreaId, f64, f64)> = survey
        .area_index()
        .iter()
        .map(|(area, idx)| {
            let b = &slopes[area];
            let mean = idx
                .iter()
                .map(|&i| {
                    let r = &survey.records()[i];
                    r.y - dot(&r.x, b)
                })
                .sum::<f64>()
                / idx.len() as f64;
            (area, mean - beta0, idx.len() as f64)
        })
        .collect();
    let rbar: Vec<f64> = sampled.iter().map(|s| s.1).collect();

    let eps_at = |sigma_gamma2: f64| -> Result<(Vec<f64>, Vec<bool>)> {
        let mut eps = Vec::with_capacity(summaries.len());
        let mut flags = Vec::with_capacity(summaries.len());
        for s in &summaries {
            let sol = solve_sigma_eps_sums(&s.sums, sigma_gamma2 / s.scale2, s.consistency, s.raw_ms)?;
            eps.push((sol.value * s.scale2).max(VARIANCE_FLOOR));
            flags.push(!sol.converged);
        }
        Ok((eps, flags))
    };
    let rel = |new: f64, old: f64| {
        let d = (new - old).abs();
        if d == 0.0 {
            0.0
        } else {
            d / new.abs().max(old.abs())
        }
    };

    // Fixed point in sigma_gamma^2 alone: every error variance is a
    // function of it. Plain substitution with Aitken extrapolation after
    // every two plain steps.
    let mut input = 0.0;
    let mut sigma_gamma2 = 0.0;
    let mut chain: Vec<f64> = Vec::new();
    let mut group_eps: Vec<f64> = Vec::new();
    let mut group_flag: Vec<bool> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let max_outer = if control.single_pass { 1 } else { control.max_outer.max(1) };
    while iterations < max_outer {
        iterations += 1;
        let (eps, flags) = eps_at(input)?;
        let d: Vec<f64> = sampled
            .iter()
            .map(|(area, _, n)| eps[area_group[*area]] / n)
            .collect();
        let next = solve_sigma_gamma(&rbar, &d, huber_c)?.value;
        let mut change = rel(next, input);
        if group_eps.is_empty() {
            change = f64::INFINITY;
        }
        for (new, old) in eps.iter().zip(&group_eps) {
            change = change.max(rel(*new, *old));
        }
        group_eps = eps;
        group_flag = flags;
        sigma_gamma2 = next;
        if change < control.tol {
            converged = true;
            break;
        }
        chain.push(input);
        input = next;
        if let [.., x0, x1] = chain[..] {
            let denom = next - 2.0 * x1 + x0;
            let acc = x0 - (x1 - x0).powi(2) / denom;
            if denom != 0.0 && acc.is_finite() && acc >= 0.0 {
                input = acc;
                chain.clear();
            }
        }
    }
    if control.single_pass {
        converged = true;
    }

    let sigma_eps2 = area_group
        .iter()
        .map(|(a, &g)| ((*a).clone(), group_eps[g]))
        .collect();
    let flagged_areas = area_group
        .iter()
        .filter(|(_, &g)| group_flag[g])
        .map(|(a, _)| (*a).clone())
        .collect();
    Ok(VarianceSolution {
        sigma_eps2,
        sigma_gamma2,
        beta0,
        iterations,
        converged,
        flagged_areas,
    })
}
