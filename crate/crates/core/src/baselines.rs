//! Homogeneous nested-error regression fitted by maximum likelihood, and its
//! EBP through the same Monte Carlo kernel as the main model.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{AreaId, CensusDataset, SurveyDataset};
use crate::error::{domain, Error, Result};
use crate::fgt::FgtEstimate;
use crate::fit::{shrinkage_factor, AreaParams};
use crate::numeric::nelder_mead;
use crate::predict::{ebp_values, to_estimates, PredictionConfig};
use crate::variance::VARIANCE_FLOOR;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerParams {
    /// Intercept first.
    pub beta: Vec<f64>,
    pub sigma_gamma2: f64,
    pub sigma_eps2: f64,
    pub loglik: f64,
    pub converged: bool,
}

/// Per-area cross products; everything the likelihood needs.
struct AreaMoments {
    n: f64,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    sx: DVector<f64>,
    sy: f64,
    yty: f64,
}

fn moments(survey: &SurveyDataset) -> Vec<AreaMoments> {
    let q = survey.p() + 1;
    survey
        .area_index()
        .values()
        .map(|idx| {
            let mut m = AreaMoments {
                n: idx.len() as f64,
                xtx: DMatrix::zeros(q, q),
                xty: DVector::zeros(q),
                sx: DVector::zeros(q),
                sy: 0.0,
                yty: 0.0,
            };
            for &i in idx {
                let r = &survey.records()[i];
                let x = DVector::from_iterator(q, std::iter::once(1.0).chain(r.x.iter().copied()));
                m.xtx += &x * x.transpose();
                m.xty += &x * r.y;
                m.sx += &x;
                m.sy += r.y;
                m.yty += r.y * r.y;
            }
            m
        })
        .collect()
}

/// GLS coefficients and the profile log-likelihood at given variances.
fn profile(moms: &[AreaMoments], sigma_gamma2: f64, sigma_eps2: f64) -> Option<(DVector<f64>, f64)> {
    let q = moms[0].xty.len();
    let mut a = DMatrix::zeros(q, q);
    let mut rhs = DVector::zeros(q);
    for m in moms {
        let g = sigma_gamma2 / (sigma_eps2 + m.n * sigma_gamma2);
        a += (&m.xtx - g * &m.sx * m.sx.transpose()) / sigma_eps2;
        rhs += (&m.xty - g * m.sy * &m.sx) / sigma_eps2;
    }
    let beta = a.cholesky()?.solve(&rhs);
    let mut ll = 0.0;
    for m in moms {
        let g = sigma_gamma2 / (sigma_eps2 + m.n * sigma_gamma2);
        let rtr = m.yty - 2.0 * beta.dot(&m.xty) + beta.dot(&(&m.xtx * &beta));
        let one_r = m.sy - m.sx.dot(&beta);
        let quad = (rtr - g * one_r * one_r) / sigma_eps2;
        let logdet = (m.n - 1.0) * sigma_eps2.ln() + (sigma_eps2 + m.n * sigma_gamma2).ln();
        ll -= 0.5 * (m.n * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
    }
    ll.is_finite().then_some((beta, ll))
}

/// Gaussian log-likelihood of the NER model at `(sigma_gamma2, sigma_eps2)`
/// with the GLS coefficients plugged in.
pub fn ner_profile_loglik(survey: &SurveyDataset, sigma_gamma2: f64, sigma_eps2: f64) -> Result<f64> {
    if survey.is_empty() || !(sigma_gamma2 >= 0.0 && sigma_eps2 > 0.0) {
        return domain("profile likelihood needs data and sigma_eps2 > 0, sigma_gamma2 >= 0");
    }
    profile(&moments(survey), sigma_gamma2, sigma_eps2)
        .map(|(_, ll)| ll)
        .ok_or_else(|| Error::Domain("profile likelihood is not finite".into()))
}

/// Maximum-likelihood fit of the homogeneous model.
pub fn mr_fit_ml(survey: &SurveyDataset) -> Result<NerParams> {
    let q = survey.p() + 1;
    if survey.len() <= q {
        return domain(format!("ML fit needs more than {q} units, got {}", survey.len()));
    }
    if survey.area_count() < 2 {
        return domain("ML fit needs at least two areas");
    }
    let x = crate::robust::design_with_intercept(survey.records().iter().map(|r| r.x.as_slice()), survey.p());
    crate::robust::check_full_rank(&x)?;
    let moms = moments(survey);

    // Boundary sigma_gamma^2 = 0: OLS with the ML variance.
    let n = survey.len() as f64;
    let rss = {
        let (b, _) = profile(&moms, 0.0, 1.0).ok_or_else(|| Error::Domain("OLS failed".into()))?;
        moms.iter()
            .map(|m| m.yty - 2.0 * b.dot(&m.xty) + b.dot(&(&m.xtx * &b)))
            .sum::<f64>()
    };
    let s0 = (rss / n).max(VARIANCE_FLOOR);
    let (b0, ll0) = profile(&moms, 0.0, s0).ok_or_else(|| Error::Domain("OLS likelihood failed".into()))?;

    let objective = |v: &[f64]| match profile(&moms, v[0].exp(), v[1].exp()) {
        Some((_, ll)) => -ll,
        None => f64::INFINITY,
    };
    let start = [(0.2 * s0).ln(), (0.8 * s0).ln()];
    let mut best = nelder_mead(objective, &start, 0.5, 1e-13, 1e-8, 4000);
    // Restart once from the optimum to shake off a collapsed simplex.
    let again = nelder_mead(objective, &best.x, 0.1, 1e-14, 1e-9, 4000);
    if again.fx <= best.fx {
        best = again;
    }
    let (sg2, se2) = (best.x[0].exp(), best.x[1].exp().max(VARIANCE_FLOOR));
    let interior = profile(&moms, sg2, se2);
    let out = match interior {
        Some((b, ll)) if ll > ll0 => NerParams {
            beta: b.iter().copied().collect(),
            sigma_gamma2: sg2,
            sigma_eps2: se2,
            loglik: ll,
            converged: best.converged,
        },
        _ => NerParams {
            beta: b0.iter().copied().collect(),
            sigma_gamma2: 0.0,
            sigma_eps2: s0,
            loglik: ll0,
            converged: true,
        },
    };
    Ok(out)
}

/// The homogeneous fit expressed as per-area parameters for the shared
/// prediction kernel.
pub fn broadcast_params(
    ner: &NerParams,
    survey: &SurveyDataset,
    census: &CensusDataset,
) -> Result<BTreeMap<AreaId, AreaParams>> {
    let slopes = ner.beta[1..].to_vec();
    let beta0 = ner.beta[0];
    census
        .areas()
        .map(|area| {
            let n_i = survey.area_size(area);
            let (shrinkage, resid_mean) = if n_i > 0 {
                let b = shrinkage_factor(ner.sigma_gamma2, ner.sigma_eps2, n_i)?.value;
                let r = survey
                    .area_records(area)
                    .map(|r| r.y - beta0 - crate::variance::dot(&r.x, &slopes))
                    .sum::<f64>()
                    / n_i as f64;
                (Some(b), Some(r))
            } else {
                (None, None)
            };
            Ok((
                area.clone(),
                AreaParams {
                    area_id: area.clone(),
                    beta0,
                    slopes: slopes.clone(),
                    sigma_gamma2: ner.sigma_gamma2,
                    sigma_eps2: ner.sigma_eps2,
                    tau: 0.5,
                    n_i,
                    shrinkage,
                    resid_mean,
                },
            ))
        })
        .collect()
}

pub fn mr_ebp_values(
    census: &CensusDataset,
    ner: &NerParams,
    survey: &SurveyDataset,
    config: &PredictionConfig,
) -> Result<BTreeMap<AreaId, [f64; 3]>> {
    ebp_values(census, &broadcast_params(ner, survey, census)?, config)
}

pub fn mr_ebp(
    census: &CensusDataset,
    ner: &NerParams,
    survey: &SurveyDataset,
    config: &PredictionConfig,
) -> Result<Vec<FgtEstimate>> {
    Ok(to_estimates(&mr_ebp_values(census, ner, survey, config)?, &config.alphas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SurveyRecord, WelfareTransform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ner_data(m: usize, n: usize, sg: f64, seed: u64, shared_x: bool) -> SurveyDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let mut recs = Vec::new();
        for i in 0..m {
            let g: f64 = sg * rng.sample::<f64, _>(StandardNormal);
            for &common in &xs {
                let x = if shared_x { common } else { rng.random_range(0.0..3.0) };
                recs.push(SurveyRecord {
                    area_id: format!("a{i:02}").into(),
                    welfare: None,
                    y: 2.0 - 0.3 * x + g + rng.sample::<f64, _>(StandardNormal),
                    x: vec![x],
                    weight: 1.0,
                });
            }
        }
        SurveyDataset::new(recs).unwrap()
    }

    #[test]
    fn optimum_beats_variance_grid() {
        let s = ner_data(3, 4, 0.8, 1, false);
        let fit = mr_fit_ml(&s).unwrap();
        let mut best = f64::NEG_INFINITY;
        for i in 0..50 {
            for j in 0..50 {
                let sg2 = i as f64 * 0.06;
                let se2 = 0.05 + j as f64 * 0.06;
                best = best.max(ner_profile_loglik(&s, sg2, se2).unwrap());
            }
        }
        assert!(fit.loglik >= best - 1e-4, "{} < {best}", fit.loglik);
        assert!((ner_profile_loglik(&s, fit.sigma_gamma2, fit.sigma_eps2).unwrap() - fit.loglik).abs() < 1e-12);
    }

    #[test]
    fn balanced_design_gls_equals_ols() {
        let s = ner_data(6, 8, 0.7, 2, true);
        let fit = mr_fit_ml(&s).unwrap();
        let x = crate::robust::design_with_intercept(s.records().iter().map(|r| r.x.as_slice()), 1);
        let y = DVector::from_iterator(s.len(), s.records().iter().map(|r| r.y));
        let xt = x.transpose();
        let ols = (&xt * &x).lu().solve(&(&xt * y)).unwrap();
        assert!(fit.sigma_gamma2 > 0.0);
        assert!((fit.beta[0] - ols[0]).abs() < 1e-8 && (fit.beta[1] - ols[1]).abs() < 1e-8);
    }

    #[test]
    fn no_area_effect_recovered() {
        let mut est: Vec<f64> = (0..50)
            .map(|r| mr_fit_ml(&ner_data(50, 50, 0.0, 100 + r, false)).unwrap().sigma_gamma2)
            .collect();
        est.sort_by(f64::total_cmp);
        let med = 0.5 * (est[24] + est[25]);
        assert!(med < 0.05, "{med}");
    }

    #[test]
    fn loglik_at_optimum_beats_truth() {
        for seed in 0..5 {
            let s = ner_data(20, 10, 0.6, 50 + seed, false);
            let fit = mr_fit_ml(&s).unwrap();
            let truth = ner_profile_loglik(&s, 0.36, 1.0).unwrap();
            assert!(fit.loglik >= truth - 1e-9);
        }
    }

    #[test]
    fn mr_ebp_is_the_shared_kernel() {
        let s = ner_data(4, 6, 0.5, 3, false);
        let census = CensusDataset::new(
            s.records()
                .iter()
                .map(|r| (r.area_id.clone(), r.x.clone()))
                .chain((0..5).map(|k| (AreaId::from("zz"), vec![k as f64 * 0.5]))),
        )
        .unwrap();
        let fit = mr_fit_ml(&s).unwrap();
        let cfg = PredictionConfig {
            k: 25,
            z: 4.0,
            alphas: vec![0, 1, 2],
            transform: WelfareTransform::new(0.0).unwrap(),
            seed: 5,
        };
        let a = mr_ebp_values(&census, &fit, &s, &cfg).unwrap();
        let b = ebp_values(&census, &broadcast_params(&fit, &s, &census).unwrap(), &cfg).unwrap();
        assert_eq!(a, b);
        let p = broadcast_params(&fit, &s, &census).unwrap();
        assert!(p[&AreaId::from("zz")].shrinkage.is_none());
    }

    #[test]
    fn degenerate_variances_are_deterministic() {
        let census = CensusDataset::new((0..4).map(|k| (AreaId::from("a"), vec![k as f64]))).unwrap();
        let survey = SurveyDataset::new(vec![SurveyRecord {
            area_id: "a".into(),
            welfare: None,
            y: 1.0,
            x: vec![0.0],
            weight: 1.0,
        }])
        .unwrap();
        let ner = NerParams {
            beta: vec![1.0, 0.2],
            sigma_gamma2: 0.0,
            sigma_eps2: 0.0,
            loglik: 0.0,
            converged: true,
        };
        let cfg = |k| PredictionConfig {
            k,
            z: 4.0,
            alphas: vec![0, 1],
            transform: WelfareTransform::new(0.0).unwrap(),
            seed: 5,
        };
        let want: f64 = (0..4).map(|k| ((4.0 - (1.0 + 0.2 * k as f64).exp()) / 4.0).max(0.0)).sum::<f64>() / 4.0;
        for k in [1, 9] {
            let v = mr_ebp_values(&census, &ner, &survey, &cfg(k)).unwrap()[&AreaId::from("a")];
            assert!((v[1] - want).abs() < 1e-15);
            assert_eq!(v[0], 0.5);
        }
    }
}
