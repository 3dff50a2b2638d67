//! End-to-end model fit: tuning parameters, per-area M-quantile slopes and
//! the variance components, assembled into one parameter set per census
//! area.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AreaId, CensusDataset, SurveyDataset};
use crate::error::{domain, Error, Result};
use crate::robust::{
    check_full_rank, design_with_intercept, mquantile_regress, PsiConfig, RegressionFit, SolverControl,
    DEFAULT_HUBER_C,
};
use crate::tuning::{estimate_taus, TauEstimates, TauGrid, TauSource};
use crate::variance::{dot, iterate_variances, AreaFit, VarianceControl};

/// Fitted parameters of one area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaParams {
    pub area_id: AreaId,
    pub beta0: f64,
    pub slopes: Vec<f64>,
    pub sigma_gamma2: f64,
    pub sigma_eps2: f64,
    pub tau: f64,
    /// Zero for areas without sample.
    pub n_i: usize,
    pub shrinkage: Option<f64>,
    /// Mean of `y - beta0 - x' beta_i` over the area sample.
    pub resid_mean: Option<f64>,
}

impl AreaParams {
    pub fn is_sampled(&self) -> bool {
        self.n_i > 0
    }

    /// `beta0 + x' beta_i`.
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.beta0 + dot(x, &self.slopes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shrinkage {
    pub value: f64,
    /// Both variances were zero.
    pub degenerate: bool,
}

/// `B_i = sigma_gamma^2 / (sigma_gamma^2 + sigma_eps_i^2 / n_i)`.
pub fn shrinkage_factor(sigma_gamma2: f64, sigma_eps2: f64, n_i: usize) -> Result<Shrinkage> {
    if n_i == 0 {
        return domain("shrinkage factor needs n_i >= 1");
    }
    if !(sigma_gamma2 >= 0.0 && sigma_eps2 >= 0.0) {
        return domain("shrinkage factor needs non-negative variances");
    }
    let denom = sigma_gamma2 + sigma_eps2 / n_i as f64;
    if denom == 0.0 {
        return Ok(Shrinkage {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Shrinkage {
        value: (sigma_gamma2 / denom).clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// How the per-area tuning parameters are obtained.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauMode {
    /// Grid, unit assignment, area means and the logit model.
    #[default]
    Estimate,
    /// Reuse given values; every census area must be present.
    Fixed(BTreeMap<AreaId, f64>),
    /// One value for every area.
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub huber_c: f64,
    pub tau_grid: Vec<f64>,
    pub tau_mode: TauMode,
    pub solver: SolverControl,
    pub variance: VarianceControl,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            huber_c: DEFAULT_HUBER_C,
            tau_grid: TauGrid::default_taus(),
            tau_mode: TauMode::Estimate,
            solver: SolverControl::default(),
            variance: VarianceControl::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaFlags {
    pub tau_source: TauSource,
    pub step1_converged: bool,
    pub step1_iterations: usize,
    pub eps_flagged: bool,
    /// Sampled with fewer than three units.
    pub small_sample: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub areas: BTreeMap<AreaId, AreaFlags>,
    pub grid_flagged: Vec<f64>,
    pub eta: Option<Vec<f64>>,
    pub eta_converged: Option<bool>,
    pub delta: BTreeMap<AreaId, f64>,
    pub variance_iterations: usize,
    pub variance_converged: bool,
    pub out_of_sample: Vec<AreaId>,
}

impl FitReport {
    /// Human-readable warnings for anything that did not converge cleanly.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.grid_flagged.is_empty() {
            out.push(format!("{} tau-grid fits did not converge", self.grid_flagged.len()));
        }
        if self.eta_converged == Some(false) {
            out.push("logit model for tau did not converge".to_string());
        }
        if !self.variance_converged {
            out.push(format!(
                "variance components did not converge in {} iterations",
                self.variance_iterations
            ));
        }
        for (a, f) in &self.areas {
            if !f.step1_converged {
                out.push(format!("area {a}: slope fit did not converge"));
            }
            if f.eps_flagged {
                out.push(format!("area {a}: error-variance root flagged"));
            }
            if f.small_sample {
                out.push(format!("area {a}: fewer than three sampled units"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: BTreeMap<AreaId, AreaParams>,
    pub report: FitReport,
}

impl FitResult {
    pub fn taus(&self) -> BTreeMap<AreaId, f64> {
        self.params.iter().map(|(a, p)| (a.clone(), p.tau)).collect()
    }
}

/// Fits the model on `survey` for every area of `census`.
pub fn fit_nerhdp(survey: &SurveyDataset, census: &CensusDataset, config: &FitConfig) -> Result<FitResult> {
    let out_of_sample = census.check_survey(survey)?;
    let p = survey.p();
    let c = config.huber_c;

    let (area_tau, source, tau_est): (BTreeMap<AreaId, f64>, BTreeMap<AreaId, TauSource>, Option<TauEstimates>) =
        match &config.tau_mode {
            TauMode::Estimate => {
                let est = estimate_taus(survey, census, &config.tau_grid, c, config.solver)?;
                (est.area_tau.clone(), est.source.clone(), Some(est))
            }
            TauMode::Fixed(map) => {
                let mut taus = BTreeMap::new();
                for area in census.areas() {
                    let t = *map.get(area).ok_or_else(|| Error::MissingArea(area.to_string()))?;
                    PsiConfig::new(c, t)?;
                    taus.insert(area.clone(), t);
                }
                let src = taus.keys().map(|a| (a.clone(), TauSource::Fixed)).collect();
                (taus, src, None)
            }
            TauMode::Constant(t) => {
                PsiConfig::new(c, *t)?;
                let taus: BTreeMap<AreaId, f64> = census.areas().map(|a| (a.clone(), *t)).collect();
                let src = taus.keys().map(|a| (a.clone(), TauSource::Fixed)).collect();
                (taus, src, None)
            }
        };

    // Step 1 depends on the area only through tau.
    let x = design_with_intercept(survey.records().iter().map(|r| r.x.as_slice()), p);
    check_full_rank(&x)?;
    let y = DVector::from_iterator(survey.len(), survey.records().iter().map(|r| r.y));
    let mut distinct: Vec<f64> = area_tau.values().copied().collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup_by(|a, b| a.to_bits() == b.to_bits());
    let step1: Vec<RegressionFit> = distinct
        .par_iter()
        .map(|&t| mquantile_regress(&x, &y, PsiConfig::new(c, t)?, config.solver))
        .collect::<Result<_>>()?;
    let lookup = |t: f64| -> &RegressionFit {
        let k = distinct
            .binary_search_by(|v| v.total_cmp(&t))
            .expect("tau present in distinct list");
        &step1[k]
    };

    let fits: BTreeMap<AreaId, AreaFit> = area_tau
        .iter()
        .map(|(a, &t)| {
            (
                a.clone(),
                AreaFit {
                    psi: PsiConfig { huber_c: c, tau: t },
                    fit: lookup(t).clone(),
                },
            )
        })
        .collect();
    let var = iterate_variances(survey, &fits, c, &config.variance)?;

    let mut params = BTreeMap::new();
    let mut flags = BTreeMap::new();
    for (area, af) in &fits {
        let n_i = survey.area_size(area);
        let sigma_eps2 = var.sigma_eps2[area];
        let slopes = af.fit.slopes.clone();
        let (shrinkage, resid_mean) = if n_i > 0 {
            let b = shrinkage_factor(var.sigma_gamma2, sigma_eps2, n_i)?.value;
            let r = survey
                .area_records(area)
                .map(|r| r.y - var.beta0 - dot(&r.x, &slopes))
                .sum::<f64>()
                / n_i as f64;
            (Some(b), Some(r))
        } else {
            (None, None)
        };
        params.insert(
            area.clone(),
            AreaParams {
                area_id: area.clone(),
                beta0: var.beta0,
                slopes,
                sigma_gamma2: var.sigma_gamma2,
                sigma_eps2,
                tau: af.psi.tau,
                n_i,
                shrinkage,
                resid_mean,
            },
        );
        flags.insert(
            area.clone(),
            AreaFlags {
                tau_source: source[area],
                step1_converged: af.fit.converged,
                step1_iterations: af.fit.iterations,
                eps_flagged: var.flagged_areas.contains(area),
                small_sample: n_i > 0 && n_i < 3,
            },
        );
    }

    let report = FitReport {
        areas: flags,
        grid_flagged: tau_est.as_ref().map(|t| t.grid_flagged.clone()).unwrap_or_default(),
        eta: tau_est.as_ref().map(|t| t.eta.eta.clone()),
        eta_converged: tau_est.as_ref().map(|t| t.eta.converged),
        delta: tau_est.map(|t| t.delta).unwrap_or_default(),
        variance_iterations: var.iterations,
        variance_converged: var.converged,
        out_of_sample,
    };
    Ok(FitResult { params, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SurveyRecord;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn shrinkage_examples() {
        assert_eq!(shrinkage_factor(1.0, 0.0, 5).unwrap().value, 1.0);
        assert_eq!(shrinkage_factor(0.0, 2.0, 5).unwrap().value, 0.0);
        assert_eq!(shrinkage_factor(1.0, 2.0, 2).unwrap().value, 0.5);
        let d = shrinkage_factor(0.0, 0.0, 3).unwrap();
        assert!(d.degenerate && d.value == 0.0);
        assert!(shrinkage_factor(1.0, 1.0, 0).is_err());
    }

    fn simulate(m: usize, n: usize, seed: u64) -> (SurveyDataset, CensusDataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut recs = Vec::new();
        let mut census = Vec::new();
        for i in 0..m {
            let area = AreaId::from(format!("a{i:02}"));
            let g = 0.5 * rng.sample::<f64, _>(StandardNormal);
            for _ in 0..n {
                let x = vec![rng.random_range(0.0..2.0), rng.random_range(-1.0..1.0)];
                let e: f64 = rng.sample(StandardNormal);
                recs.push(SurveyRecord {
                    area_id: area.clone(),
                    welfare: None,
                    y: 1.0 + 0.7 * x[0] - 0.4 * x[1] + g + e,
                    x: x.clone(),
                    weight: 1.0,
                });
                census.push((area.clone(), x));
            }
        }
        (SurveyDataset::new(recs).unwrap(), CensusDataset::new(census).unwrap())
    }

    #[test]
    fn single_area_identity_psi_matches_ols() {
        let (survey, census) = simulate(1, 60, 1);
        let config = FitConfig {
            huber_c: 1e6,
            tau_mode: TauMode::Constant(0.5),
            ..Default::default()
        };
        let fit = fit_nerhdp(&survey, &census, &config).unwrap();
        let x = design_with_intercept(survey.records().iter().map(|r| r.x.as_slice()), 2);
        let y = DVector::from_iterator(survey.len(), survey.records().iter().map(|r| r.y));
        let xt: DMatrix<f64> = x.transpose();
        let ols = (&xt * &x).lu().solve(&(&xt * &y)).unwrap();
        let p = fit.params.values().next().unwrap();
        assert!((p.slopes[0] - ols[1]).abs() < 1e-6);
        assert!((p.slopes[1] - ols[2]).abs() < 1e-6);
    }

    #[test]
    fn constant_half_tau_collapses_slopes() {
        let (survey, census) = simulate(6, 15, 2);
        let config = FitConfig {
            tau_mode: TauMode::Constant(0.5),
            ..Default::default()
        };
        let fit = fit_nerhdp(&survey, &census, &config).unwrap();
        let first = &fit.params.values().next().unwrap().slopes;
        assert!(fit.params.values().all(|p| &p.slopes == first));
    }

    #[test]
    fn every_area_gets_params_and_invariants_hold() {
        let (survey, mut census_rows) = {
            let (s, _) = simulate(8, 12, 3);
            let mut rows = Vec::new();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            for i in 0..10 {
                for _ in 0..20 {
                    rows.push((AreaId::from(format!("a{i:02}")), vec![rng.random_range(0.0..2.0), 0.0]));
                }
            }
            (s, rows)
        };
        census_rows.sort_by(|a, b| a.0.cmp(&b.0));
        let census = CensusDataset::new(census_rows).unwrap();
        let fit = fit_nerhdp(&survey, &census, &FitConfig::default()).unwrap();
        assert_eq!(fit.params.len(), 10);
        assert_eq!(fit.report.out_of_sample.len(), 2);
        for p in fit.params.values() {
            assert!(p.sigma_eps2 >= crate::variance::VARIANCE_FLOOR && p.sigma_gamma2 >= 0.0);
            assert_eq!(p.shrinkage.is_some(), p.is_sampled());
            assert_eq!(p.resid_mean.is_some(), p.is_sampled());
            if let Some(b) = p.shrinkage {
                assert!((0.0..=1.0).contains(&b));
            }
        }
        // Intercept-only aux: both unsampled areas share tau and slopes.
        let a = &fit.params[&AreaId::from("a08")];
        let b = &fit.params[&AreaId::from("a09")];
        assert_eq!(a.tau, b.tau);
        assert_eq!(a.slopes, b.slopes);
    }

    #[test]
    fn oos_area_matching_sampled_tau_shares_slopes() {
        let (survey, _) = simulate(5, 10, 4);
        let mut rows: Vec<(AreaId, Vec<f64>)> = survey.records().iter().map(|r| (r.area_id.clone(), r.x.clone())).collect();
        rows.push(("zz".into(), vec![1.0, 0.0]));
        let census = CensusDataset::new(rows).unwrap();
        let mut taus: BTreeMap<AreaId, f64> = census.areas().map(|a| (a.clone(), 0.37)).collect();
        taus.insert("a00".into(), 0.6);
        let fit = fit_nerhdp(
            &survey,
            &census,
            &FitConfig {
                tau_mode: TauMode::Fixed(taus),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(fit.params[&AreaId::from("zz")].slopes, fit.params[&AreaId::from("a01")].slopes);
        assert_ne!(fit.params[&AreaId::from("zz")].slopes, fit.params[&AreaId::from("a00")].slopes);
    }

    #[test]
    fn row_order_invariance() {
        let (survey, census) = simulate(6, 10, 5);
        let mut shuffled: Vec<SurveyRecord> = survey.records().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for i in (1..shuffled.len()).rev() {
            let j = rng.random_range(0..=i);
            shuffled.swap(i, j);
        }
        let s2 = SurveyDataset::new(shuffled).unwrap();
        let a = fit_nerhdp(&survey, &census, &FitConfig::default()).unwrap();
        let b = fit_nerhdp(&s2, &census, &FitConfig::default()).unwrap();
        assert_eq!(serde_json::to_string(&a.params).unwrap(), serde_json::to_string(&b.params).unwrap());
    }

    #[test]
    fn fixed_tau_requires_every_area() {
        let (survey, census) = simulate(3, 10, 7);
        let taus: BTreeMap<AreaId, f64> = [("a00".into(), 0.5)].into_iter().collect();
        let err = fit_nerhdp(
            &survey,
            &census,
            &FitConfig {
                tau_mode: TauMode::Fixed(taus),
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingArea(_)));
    }
}
