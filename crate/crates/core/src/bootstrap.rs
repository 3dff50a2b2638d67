//! Parametric bootstrap MSPE of the EBP estimates.
//!
//! Replicate `b` generates a census population from the fitted model,
//! records its true FGT values, rebuilds the survey on the original
//! covariate rows (same area effects, fresh unit errors), refits, predicts
//! and scores the squared error against that population.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AreaId, CensusDataset, SurveyDataset, WelfareTransform};
use crate::error::{Error, Result};
use crate::fgt::{fgt_all, FgtEstimate};
use crate::fit::{fit_nerhdp, AreaParams, FitConfig, TauMode};
use crate::predict::{derive_seed, ebp_values, generator_sd, substream, to_estimates, PredictionConfig};

const POPULATION: u64 = 1;
const SAMPLE: u64 = 2;
const PREDICTION: u64 = 3;

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_SHARE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub b: usize,
    /// Inner Monte Carlo size of each bootstrap EBP.
    pub k: usize,
    pub seed: u64,
    /// Re-estimate the tuning parameters on every bootstrap sample; when
    /// false they are frozen at the original values.
    pub refit_tau: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            b: 100,
            k: 100,
            seed: 0,
            refit_tau: true,
        }
    }
}

/// One bootstrap population: its area effects and true FGT values.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapPopulation {
    pub u: BTreeMap<AreaId, f64>,
    pub truth: BTreeMap<AreaId, [f64; 3]>,
}

pub fn bootstrap_population(
    census: &CensusDataset,
    params: &BTreeMap<AreaId, AreaParams>,
    transform: &WelfareTransform,
    z: f64,
    seed: u64,
    b: u64,
) -> Result<BootstrapPopulation> {
    let stream_seed = derive_seed(seed, &[POPULATION, b]);
    let mut u = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for (idx, (area, rows)) in census.iter().enumerate() {
        let p = params
            .get(area)
            .ok_or_else(|| Error::MissingArea(area.to_string()))?;
        let mut rng = substream(stream_seed, idx as u32, 0);
        let ua = generator_sd(p.sigma_gamma2) * rng.sample::<f64, _>(StandardNormal);
        let eps_sd = generator_sd(p.sigma_eps2);
        let mut acc = [0.0; 3];
        for x in rows.rows() {
            let y = p.linear_predictor(x) + ua + eps_sd * rng.sample::<f64, _>(StandardNormal);
            let f = fgt_all(transform.inverse(y), z);
            for a in 0..3 {
                acc[a] += f[a];
            }
        }
        let n = rows.len() as f64;
        u.insert(area.clone(), ua);
        truth.insert(area.clone(), acc.map(|s| s / n));
    }
    Ok(BootstrapPopulation { u, truth })
}

/// Bootstrap sample on the original covariate rows, reusing the
/// population's area effects and drawing fresh unit errors.
pub fn bootstrap_sample(
    survey: &SurveyDataset,
    params: &BTreeMap<AreaId, AreaParams>,
    u: &BTreeMap<AreaId, f64>,
    transform: &WelfareTransform,
    seed: u64,
    b: u64,
) -> Result<SurveyDataset> {
    let stream_seed = derive_seed(seed, &[SAMPLE, b]);
    let mut y = vec![0.0; survey.len()];
    for (idx, (area, rows)) in survey.area_index().iter().enumerate() {
        let p = params
            .get(area)
            .ok_or_else(|| Error::MissingArea(area.to_string()))?;
        let ua = *u.get(area).ok_or_else(|| Error::MissingArea(area.to_string()))?;
        let eps_sd = generator_sd(p.sigma_eps2);
        let mut rng = substream(stream_seed, idx as u32, 0);
        for &i in rows {
            let r = &survey.records()[i];
            y[i] = p.linear_predictor(&r.x) + ua + eps_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    survey.with_responses(&y, transform)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDiagnostics {
    pub requested: usize,
    pub succeeded: usize,
    pub failures: Vec<ReplicateFailure>,
    pub seed: u64,
    pub refit_tau: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mspe: BTreeMap<AreaId, [f64; 3]>,
    /// Original point estimates with MSPE and CV attached.
    pub estimates: Vec<FgtEstimate>,
    pub diagnostics: BootstrapDiagnostics,
}

/// Squared errors of one replicate, or the refit error message.
fn replicate(
    survey: &SurveyDataset,
    census: &CensusDataset,
    params: &BTreeMap<AreaId, AreaParams>,
    fit_config: &FitConfig,
    prediction: &PredictionConfig,
    boot: &BootstrapConfig,
    b: u64,
) -> Result<std::result::Result<BTreeMap<AreaId, [f64; 3]>, String>> {
    let pop = bootstrap_population(census, params, &prediction.transform, prediction.z, boot.seed, b)?;
    let sample = bootstrap_sample(survey, params, &pop.u, &prediction.transform, boot.seed, b)?;
    let refit = match fit_nerhdp(&sample, census, fit_config) {
        Ok(f) => f,
        Err(e) => return Ok(Err(e.to_string())),
    };
    let pred = PredictionConfig {
        k: boot.k,
        seed: derive_seed(boot.seed, &[PREDICTION, b]),
        ..prediction.clone()
    };
    let ebp = match ebp_values(census, &refit.params, &pred) {
        Ok(v) => v,
        Err(e) => return Ok(Err(e.to_string())),
    };
    Ok(Ok(ebp
        .iter()
        .map(|(a, v)| {
            let t = pop.truth[a];
            (a.clone(), [0, 1, 2].map(|k| (v[k] - t[k]).powi(2)))
        })
        .collect()))
}

/// Bootstrap MSPE for every census area and FGT order.
///
/// `original` holds the point estimates the CVs are computed against.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_mspe(
    survey: &SurveyDataset,
    census: &CensusDataset,
    params: &BTreeMap<AreaId, AreaParams>,
    fit_config: &FitConfig,
    original: &BTreeMap<AreaId, [f64; 3]>,
    prediction: &PredictionConfig,
    boot: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if boot.b == 0 {
        return Err(Error::Config("bootstrap needs B >= 1".into()));
    }
    prediction.validate()?;
    let mut fit_config = fit_config.clone();
    if !boot.refit_tau {
        fit_config.tau_mode = TauMode::Fixed(params.iter().map(|(a, p)| (a.clone(), p.tau)).collect());
    }
    let outcomes = (0..boot.b)
        .into_par_iter()
        .map(|b| replicate(survey, census, params, &fit_config, prediction, boot, b as u64))
        .collect::<Result<Vec<_>>>()?;

    let mut sums: BTreeMap<AreaId, [f64; 3]> = census.areas().map(|a| (a.clone(), [0.0; 3])).collect();
    let mut failures = Vec::new();
    let mut succeeded = 0usize;
    for (b, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(sq) => {
                succeeded += 1;
                for (a, v) in sq {
                    let s = sums.get_mut(&a).expect("census area");
                    for k in 0..3 {
                        s[k] += v[k];
                    }
                }
            }
            Err(message) => failures.push(ReplicateFailure { replicate: b, message }),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_SHARE * boot.b as f64 || succeeded == 0 {
        return Err(Error::BootstrapFailures {
            failed: failures.len(),
            total: boot.b,
        });
    }
    let mspe: BTreeMap<AreaId, [f64; 3]> = sums
        .into_iter()
        .map(|(a, s)| (a, s.map(|v| v / succeeded as f64)))
        .collect();

    let estimates = to_estimates(original, &prediction.alphas)
        .into_iter()
        .map(|e| {
            let m = mspe
                .get(&e.area_id)
                .map(|v| v[e.alpha as usize])
                .ok_or_else(|| Error::MissingArea(e.area_id.to_string()))?;
            Ok(e.with_mspe(m))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BootstrapResult {
        mspe,
        estimates,
        diagnostics: BootstrapDiagnostics {
            requested: boot.b,
            succeeded,
            failures,
            seed: boot.seed,
            refit_tau: boot.refit_tau,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SurveyRecord;
    use crate::fit::FitResult;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exact_data() -> (SurveyDataset, CensusDataset) {
        let mut recs = Vec::new();
        let mut census = Vec::new();
        for i in 0..4 {
            let area = AreaId::from(format!("a{i}"));
            for j in 0..12 {
                let x = (i * 12 + j) as f64 / 16.0;
                if j < 6 {
                    recs.push(SurveyRecord {
                        area_id: area.clone(),
                        welfare: None,
                        y: 0.5 + 0.4 * x,
                        x: vec![x],
                        weight: 2.0,
                    });
                }
                census.push((area.clone(), vec![x]));
            }
        }
        (SurveyDataset::new(recs).unwrap(), CensusDataset::new(census).unwrap())
    }

    fn pred(seed: u64) -> PredictionConfig {
        PredictionConfig {
            k: 20,
            z: 3.0,
            alphas: vec![0, 1, 2],
            transform: WelfareTransform::new(0.0).unwrap(),
            seed,
        }
    }

    fn fitted(survey: &SurveyDataset, census: &CensusDataset) -> (FitResult, BTreeMap<AreaId, [f64; 3]>) {
        let fit = fit_nerhdp(survey, census, &FitConfig::default()).unwrap();
        let ebp = ebp_values(census, &fit.params, &pred(1)).unwrap();
        (fit, ebp)
    }

    #[test]
    fn zero_variance_fit_has_zero_mspe() {
        let (survey, census) = exact_data();
        let (fit, ebp) = fitted(&survey, &census);
        assert_eq!(fit.params.values().next().unwrap().sigma_gamma2, 0.0);
        let boot = BootstrapConfig {
            b: 5,
            k: 10,
            seed: 2,
            refit_tau: true,
        };
        let res = bootstrap_mspe(&survey, &census, &fit.params, &FitConfig::default(), &ebp, &pred(1), &boot).unwrap();
        // Refit on an error-free sample reproduces the slopes up to roundoff.
        for v in res.mspe.values() {
            assert!(v.iter().all(|m| *m < 1e-20), "{v:?}");
        }
        assert_eq!(res.diagnostics.succeeded, 5);
    }

    fn noisy_data(seed: u64) -> (SurveyDataset, CensusDataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut recs = Vec::new();
        let mut census = Vec::new();
        for i in 0..5 {
            let area = AreaId::from(format!("a{i}"));
            let g: f64 = 0.3 * rng.sample::<f64, _>(StandardNormal);
            for j in 0..30 {
                let x: f64 = rng.random_range(0.0..2.0);
                if j < 10 {
                    recs.push(SurveyRecord {
                        area_id: area.clone(),
                        welfare: None,
                        y: 0.5 + 0.4 * x + g + 0.5 * rng.sample::<f64, _>(StandardNormal),
                        x: vec![x],
                        weight: 3.0,
                    });
                }
                census.push((area.clone(), vec![x]));
            }
        }
        (SurveyDataset::new(recs).unwrap(), CensusDataset::new(census).unwrap())
    }

    #[test]
    fn single_replicate_is_one_squared_deviation() {
        let (survey, census) = noisy_data(3);
        let (fit, ebp) = fitted(&survey, &census);
        let boot = BootstrapConfig {
            b: 1,
            k: 10,
            seed: 4,
            refit_tau: false,
        };
        let res = bootstrap_mspe(&survey, &census, &fit.params, &FitConfig::default(), &ebp, &pred(1), &boot).unwrap();
        let pop = bootstrap_population(&census, &fit.params, &pred(1).transform, 3.0, 4, 0).unwrap();
        let sample = bootstrap_sample(&survey, &fit.params, &pop.u, &pred(1).transform, 4, 0).unwrap();
        let frozen = FitConfig {
            tau_mode: TauMode::Fixed(fit.taus()),
            ..Default::default()
        };
        let refit = fit_nerhdp(&sample, &census, &frozen).unwrap();
        let again = ebp_values(
            &census,
            &refit.params,
            &PredictionConfig {
                k: 10,
                seed: derive_seed(4, &[PREDICTION, 0]),
                ..pred(1)
            },
        )
        .unwrap();
        for (a, m) in &res.mspe {
            for k in 0..3 {
                assert!(m[k] >= 0.0);
                assert_eq!(m[k], (again[a][k] - pop.truth[a][k]).powi(2));
            }
        }
        for e in &res.estimates {
            if e.value > 0.0 {
                assert!((e.cv.unwrap() - e.mspe.unwrap().sqrt() / e.value).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sample_reuses_population_area_effects() {
        let (survey, census) = noisy_data(5);
        let (fit, _) = fitted(&survey, &census);
        let pop = bootstrap_population(&census, &fit.params, &pred(1).transform, 3.0, 8, 2).unwrap();
        // Without unit errors the sample exposes its area effect exactly.
        let silent: BTreeMap<AreaId, AreaParams> = fit
            .params
            .iter()
            .map(|(a, p)| (a.clone(), AreaParams { sigma_eps2: 0.0, ..p.clone() }))
            .collect();
        let sample = bootstrap_sample(&survey, &silent, &pop.u, &pred(1).transform, 8, 2).unwrap();
        for r in sample.records() {
            let p = &fit.params[&r.area_id];
            let u = r.y - p.linear_predictor(&r.x);
            assert!((u - pop.u[&r.area_id]).abs() < 1e-12);
        }
        assert!(pop.u.values().any(|u| *u != 0.0));
    }

    #[test]
    fn thread_count_does_not_change_mspe() {
        let (survey, census) = noisy_data(7);
        let (fit, ebp) = fitted(&survey, &census);
        let boot = BootstrapConfig {
            b: 4,
            k: 10,
            seed: 9,
            refit_tau: true,
        };
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| bootstrap_mspe(&survey, &census, &fit.params, &FitConfig::default(), &ebp, &pred(1), &boot).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn zero_replicates_rejected() {
        let (survey, census) = noisy_data(1);
        let (fit, ebp) = fitted(&survey, &census);
        let boot = BootstrapConfig {
            b: 0,
            ..Default::default()
        };
        assert!(bootstrap_mspe(&survey, &census, &fit.params, &FitConfig::default(), &ebp, &pred(1), &boot).is_err());
    }
}
