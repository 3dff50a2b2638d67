//! Influence functions, robust scale and the M-quantile regression solver.
//!
//! The asymmetric influence function weights the Huber `psi` by `2*tau` on
//! positive residuals and `2*(1 - tau)` on non-positive ones; `tau = 0.5`
//! gives back the symmetric Huber function.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::numeric::{median_in_place, norm_cdf, norm_pdf};

/// Conventional Huber tuning constant.
pub const DEFAULT_HUBER_C: f64 = 1.345;
/// MAD consistency constant for the normal distribution.
pub const MAD_CONSTANT: f64 = 0.6745;
/// Scale returned when the residuals carry no spread.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiConfig {
    pub huber_c: f64,
    pub tau: f64,
}

impl PsiConfig {
    pub fn new(huber_c: f64, tau: f64) -> Result<Self> {
        if !(huber_c > 0.0) {
            return domain(format!("huber tuning constant must be positive, got {huber_c}"));
        }
        if !(tau > 0.0 && tau < 1.0) {
            return domain(format!("tau must lie in (0, 1), got {tau}"));
        }
        Ok(PsiConfig { huber_c, tau })
    }

    #[inline]
    pub fn psi(&self, r: f64) -> f64 {
        asym_psi(r, self.tau, self.huber_c)
    }

    /// IRLS weight `psi_tau(r)/r`, continuous at zero.
    #[inline]
    pub fn weight(&self, r: f64) -> f64 {
        let side = if r > 0.0 { self.tau } else { 1.0 - self.tau };
        let a = r.abs();
        if a <= self.huber_c {
            2.0 * side
        } else {
            2.0 * side * self.huber_c / a
        }
    }
}

#[inline]
pub fn huber_psi(r: f64, c: f64) -> f64 {
    r.clamp(-c, c)
}

#[inline]
fn asym_psi(r: f64, tau: f64, c: f64) -> f64 {
    let side = if r > 0.0 { tau } else { 1.0 - tau };
    2.0 * huber_psi(r, c) * side
}

pub fn asymmetric_psi(r: f64, tau: f64, c: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return domain(format!("tau must lie in (0, 1), got {tau}"));
    }
    Ok(asym_psi(r, tau, c))
}

/// `E[psi(u)^2]` for standard normal `u` and the Huber function.
pub fn w_star(c: f64) -> f64 {
    let upper_tail = 0.5 * statrs::function::erf::erfc(c / std::f64::consts::SQRT_2);
    (2.0 * norm_cdf(c) - 1.0 - 2.0 * c * norm_pdf(c)) + 2.0 * c * c * upper_tail
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MadScale {
    pub scale: f64,
    /// Set when the MAD was zero and the floor was returned.
    pub floored: bool,
}

/// Normalized median absolute deviation about the median.
pub fn mad_scale(residuals: &[f64]) -> Result<MadScale> {
    if residuals.len() < 2 {
        return domain("MAD scale needs at least two residuals");
    }
    let mut buf = residuals.to_vec();
    Ok(mad_in_buffer(&mut buf))
}

fn mad_in_buffer(buf: &mut [f64]) -> MadScale {
    let med = median_in_place(buf);
    buf.iter_mut().for_each(|v| *v = (*v - med).abs());
    let mad = median_in_place(buf) / MAD_CONSTANT;
    if mad > SCALE_FLOOR {
        MadScale {
            scale: mad,
            floored: false,
        }
    } else {
        MadScale {
            scale: SCALE_FLOOR,
            floored: true,
        }
    }
}

/// Solution of the area-specific M-quantile estimating equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub intercept: f64,
    pub slopes: Vec<f64>,
    /// Square root of the scale `q`, in response units.
    pub scale: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm of `sum x_j q^{1/2} psi_tau(r_j)` at the returned solution.
    pub equation_norm: f64,
}

impl RegressionFit {
    pub fn coefficients(&self) -> Vec<f64> {
        std::iter::once(self.intercept)
            .chain(self.slopes.iter().copied())
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.slopes).map(|(a, b)| a * b).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverControl {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverControl {
    fn default() -> Self {
        SolverControl {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

/// Design matrix with a leading intercept column.
pub fn design_with_intercept<'a>(rows: impl ExactSizeIterator<Item = &'a [f64]>, p: usize) -> DMatrix<f64> {
    let n = rows.len();
    let mut m = DMatrix::zeros(n, p + 1);
    for (i, row) in rows.enumerate() {
        m[(i, 0)] = 1.0;
        for (j, v) in row.iter().enumerate() {
            m[(i, j + 1)] = *v;
        }
    }
    m
}

fn column_name(j: usize) -> String {
    if j == 0 {
        "intercept".to_string()
    } else {
        format!("x{j}")
    }
}

/// Rejects a design whose columns are (numerically) linearly dependent,
/// naming each column that lies in the span of the preceding ones.
pub fn check_full_rank(x: &DMatrix<f64>) -> Result<()> {
    let (n, k) = x.shape();
    if n <= k {
        return domain(format!("need more observations ({n}) than coefficients ({k})"));
    }
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut dependent = Vec::new();
    for j in 0..k {
        let col = x.column(j).into_owned();
        let norm0 = col.norm();
        let mut v = col;
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&v);
                v.axpy(-proj, b, 1.0);
            }
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= 1e-10 * norm0 {
            dependent.push(column_name(j));
        } else {
            basis.push(v / norm);
        }
    }
    if dependent.is_empty() {
        Ok(())
    } else {
        Err(Error::RankDeficient { columns: dependent })
    }
}

fn weighted_least_squares(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64]) -> Result<DVector<f64>> {
    let k = x.ncols();
    let mut xtwx = DMatrix::<f64>::zeros(k, k);
    let mut xtwy = DVector::<f64>::zeros(k);
    for (i, &wi) in w.iter().enumerate() {
        let row = x.row(i);
        for a in 0..k {
            let xa = row[a] * wi;
            xtwy[a] += xa * y[i];
            for b in 0..=a {
                xtwx[(a, b)] += xa * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtwx[(b, a)] = xtwx[(a, b)];
        }
    }
    let chol = xtwx
        .cholesky()
        .ok_or_else(|| Error::Domain("weighted normal equations are not positive definite".into()))?;
    Ok(chol.solve(&xtwy))
}

/// Max-norm of the estimating function at coefficients `beta`, together
/// with the scale used to standardize the residuals.
pub fn estimating_equation(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    beta: &DVector<f64>,
    psi: PsiConfig,
) -> (f64, f64) {
    let resid = y - x * beta;
    let mut buf: Vec<f64> = resid.iter().copied().collect();
    let scale = mad_in_buffer(&mut buf).scale;
    (equation_norm(x, &resid, scale, psi), scale)
}

fn equation_norm(x: &DMatrix<f64>, resid: &DVector<f64>, scale: f64, psi: PsiConfig) -> f64 {
    let k = x.ncols();
    let mut g = vec![0.0; k];
    for (i, e) in resid.iter().enumerate() {
        let v = scale * psi.psi(e / scale);
        if v != 0.0 {
            for (a, ga) in g.iter_mut().enumerate() {
                *ga += x[(i, a)] * v;
            }
        }
    }
    g.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// M-quantile regression by iteratively reweighted least squares.
///
/// `x` must contain the intercept column. The scale is the normalized MAD
/// of the current residuals, refreshed every iteration. Iteration stops
/// once the estimating equation is below `control.tol` in max-norm; a fit
/// that stalls or runs out of iterations first is returned with
/// `converged = false`.
pub fn mquantile_regress(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    psi: PsiConfig,
    control: SolverControl,
) -> Result<RegressionFit> {
    if x.nrows() != y.len() {
        return domain(format!(
            "design has {} rows but response has {}",
            x.nrows(),
            y.len()
        ));
    }
    check_full_rank(x)?;
    let n = y.len();
    let mut w = vec![1.0; n];
    let mut beta = weighted_least_squares(x, y, &w)?;
    let mut buf = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;
    let mut scale;
    let mut eq_norm;
    loop {
        let resid = y - x * &beta;
        buf.copy_from_slice(resid.as_slice());
        scale = mad_in_buffer(&mut buf).scale;
        eq_norm = equation_norm(x, &resid, scale, psi);
        if eq_norm <= control.tol {
            converged = true;
            break;
        }
        if iterations >= control.max_iter {
            break;
        }
        iterations += 1;
        for (wi, e) in w.iter_mut().zip(resid.iter()) {
            *wi = psi.weight(e / scale);
        }
        let next = weighted_least_squares(x, y, &w)?;
        let change = (&next - &beta).amax() / beta.amax().max(1.0);
        beta = next;
        if change <= 1e-15 {
            // Stalled at machine precision; report the equation there.
            let resid = y - x * &beta;
            buf.copy_from_slice(resid.as_slice());
            scale = mad_in_buffer(&mut buf).scale;
            eq_norm = equation_norm(x, &resid, scale, psi);
            converged = eq_norm <= control.tol;
            break;
        }
    }
    Ok(RegressionFit {
        intercept: beta[0],
        slopes: beta.iter().skip(1).copied().collect(),
        scale,
        iterations,
        converged,
        equation_norm: eq_norm,
    })
}
