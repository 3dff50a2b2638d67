//! Design-based simulation: a fixed synthetic population, repeated simple
//! random samples within areas, and relative bias / RRMSPE / efficiency of
//! the competing estimators against the population's true FGT values.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{mr_ebp_values, mr_fit_ml};
use crate::data::{AreaId, CensusDataset, SurveyDataset, SurveyRecord, WelfareTransform};
use crate::error::{Error, Result};
use crate::fgt::{direct_fgt, fgt_all};
use crate::fit::{fit_nerhdp, FitConfig};
use crate::numeric::{median, norm_cdf};
use crate::predict::{derive_seed, ebp_values, substream, PredictionConfig};

const POPULATION: u64 = 11;
const SAMPLING: u64 = 12;
const PREDICTION: u64 = 13;
const OOS_CHOICE: u64 = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub area_sizes: Vec<usize>,
    pub beta0: f64,
    /// Mean slopes; their count is the covariate count.
    pub beta: Vec<f64>,
    /// Slopes of area `i` are `beta + slope_heterogeneity * zeta_i`.
    pub slope_heterogeneity: f64,
    /// Area error sd is `a + (b - a) * Phi(zeta_i)` for the pair `(a, b)`;
    /// `a > b` makes richer areas less dispersed.
    pub error_sd_range: (f64, f64),
    pub sigma_gamma: f64,
    /// Share of units whose error sd is multiplied by `outlier_scale`.
    pub outlier_share: f64,
    pub outlier_scale: f64,
    /// Intercept of area `i` is shifted by `location_effect * zeta_i`.
    pub location_effect: f64,
    /// Covariates are `U(0, 2) + covariate_shift * Phi(zeta_i)`.
    pub covariate_shift: f64,
    pub transform_shift: f64,
    /// Poverty line as a fraction of the population median welfare.
    pub line_fraction: f64,
    pub seed: u64,
}

impl PopulationSpec {
    /// Heterogeneous default: 40 areas of 20 to 480 units whose location,
    /// slopes and error sd all increase with the area latent `zeta_i`, with
    /// 10% of unit errors inflated threefold.
    pub fn heterogeneous(seed: u64) -> Self {
        PopulationSpec {
            area_sizes: (0..40).map(|i| 20 + (i * 460) / 39).collect(),
            beta0: 1.0,
            beta: vec![0.6, 0.4],
            slope_heterogeneity: 0.15,
            error_sd_range: (0.3, 1.2),
            sigma_gamma: 0.1,
            location_effect: 0.6,
            outlier_share: 0.1,
            outlier_scale: 3.0,
            covariate_shift: 0.0,
            transform_shift: 0.0,
            line_fraction: 0.6,
            seed,
        }
    }

    /// Same layout with common slopes and error sd.
    pub fn homogeneous(seed: u64) -> Self {
        PopulationSpec {
            slope_heterogeneity: 0.0,
            error_sd_range: (0.7, 0.7),
            location_effect: 0.0,
            sigma_gamma: 0.3,
            outlier_share: 0.0,
            ..Self::heterogeneous(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.area_sizes.is_empty() || self.area_sizes.iter().any(|n| *n < 2) {
            return Err(Error::Config("every area needs at least two units".into()));
        }
        if self.beta.is_empty() {
            return Err(Error::Config("population needs at least one covariate".into()));
        }
        let (lo, hi) = self.error_sd_range;
        if !(lo > 0.0 && hi > 0.0) {
            return Err(Error::Config("error sd range endpoints must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.outlier_share) && self.outlier_scale > 0.0) {
            return Err(Error::Config("outlier share must be in [0, 1) and scale positive".into()));
        }
        if !(self.sigma_gamma >= 0.0 && self.line_fraction > 0.0) {
            return Err(Error::Config("sigma_gamma must be >= 0 and line fraction > 0".into()));
        }
        WelfareTransform::new(self.transform_shift)?;
        Ok(())
    }
}

/// Fixed finite population with its true FGT values.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub census: CensusDataset,
    /// Welfare of every unit, aligned with the census rows.
    pub welfare: BTreeMap<AreaId, Vec<f64>>,
    pub z: f64,
    pub truth: BTreeMap<AreaId, [f64; 3]>,
    pub slopes: BTreeMap<AreaId, Vec<f64>>,
    pub error_sd: BTreeMap<AreaId, f64>,
    pub transform: WelfareTransform,
}

pub fn area_label(i: usize) -> AreaId {
    AreaId(format!("A{i:03}"))
}

pub fn generate_population(spec: &PopulationSpec) -> Result<Population> {
    spec.validate()?;
    let transform = WelfareTransform::new(spec.transform_shift)?;
    let seed = derive_seed(spec.seed, &[POPULATION]);
    let p = spec.beta.len();
    let (lo, hi) = spec.error_sd_range;
    let mut rows = Vec::new();
    let mut welfare = BTreeMap::new();
    let mut slopes = BTreeMap::new();
    let mut error_sd = BTreeMap::new();
    for (i, &n) in spec.area_sizes.iter().enumerate() {
        let area = area_label(i);
        let mut rng = substream(seed, i as u32, 0);
        let zeta: f64 = rng.sample(StandardNormal);
        let gamma = spec.sigma_gamma * rng.sample::<f64, _>(StandardNormal);
        let b: Vec<f64> = spec.beta.iter().map(|v| v + spec.slope_heterogeneity * zeta).collect();
        let sd = lo + (hi - lo) * norm_cdf(zeta);
        let shift = spec.covariate_shift * norm_cdf(zeta);
        let mut w = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..2.0) + shift).collect();
            let y = spec.beta0 + spec.location_effect * zeta + x.iter().zip(&b).map(|(a, c)| a * c).sum::<f64>()
                + gamma
                + sd * rng.sample::<f64, _>(StandardNormal)
                    * if rng.random::<f64>() < spec.outlier_share { spec.outlier_scale } else { 1.0 };
            w.push(transform.inverse(y));
            rows.push((area.clone(), x));
        }
        welfare.insert(area.clone(), w);
        slopes.insert(area.clone(), b);
        error_sd.insert(area, sd);
    }
    let census = CensusDataset::new(rows)?;
    let all: Vec<f64> = welfare.values().flatten().copied().collect();
    let z = spec.line_fraction * median(&all);
    if !(z > 0.0) {
        return Err(Error::Config(format!("poverty line rule gave non-positive z = {z}")));
    }
    let truth = welfare
        .iter()
        .map(|(a, w)| {
            let mut acc = [0.0; 3];
            for &e in w {
                let f = fgt_all(e, z);
                for k in 0..3 {
                    acc[k] += f[k];
                }
            }
            (a.clone(), acc.map(|s| s / w.len() as f64))
        })
        .collect();
    let aux = census
        .iter()
        .map(|(a, c)| (a.clone(), std::iter::once(1.0).chain(c.column_means()).collect()))
        .collect();
    let census = census.with_area_aux(aux)?;
    Ok(Population {
        census,
        welfare,
        z,
        truth,
        slopes,
        error_sd,
        transform,
    })
}

/// Simple random sample without replacement within every area not listed
/// in `out_of_sample`; `n_i = max(1, round(fraction * N_i))`, weights
/// `N_i / n_i`.
pub fn srs_draw(
    population: &Population,
    fraction: f64,
    out_of_sample: &BTreeSet<AreaId>,
    seed: u64,
) -> Result<SurveyDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("sampling fraction must be in (0, 1], got {fraction}")));
    }
    let mut records = Vec::new();
    for (idx, (area, rows)) in population.census.iter().enumerate() {
        if out_of_sample.contains(area) {
            continue;
        }
        let big_n = rows.len();
        let n = ((fraction * big_n as f64).round() as usize).clamp(1, big_n);
        let mut rng = substream(seed, idx as u32, 0);
        let mut picked = sample_indices(&mut rng, big_n, n).into_vec();
        picked.sort_unstable();
        let w = &population.welfare[area];
        for j in picked {
            records.push(SurveyRecord {
                area_id: area.clone(),
                welfare: Some(w[j]),
                y: population.transform.forward(w[j])?,
                x: rows.row(j).to_vec(),
                weight: big_n as f64 / n as f64,
            });
        }
    }
    SurveyDataset::new(records)
}

/// Seeded choice of `count` areas to leave unsampled.
pub fn choose_out_of_sample(population: &Population, count: usize, seed: u64) -> BTreeSet<AreaId> {
    let areas: Vec<&AreaId> = population.census.areas().collect();
    let mut rng = substream(derive_seed(seed, &[OOS_CHOICE]), 0, 0);
    sample_indices(&mut rng, areas.len(), count.min(areas.len()))
        .into_iter()
        .map(|i| areas[i].clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Cls,
    Mr,
    Direct,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Cls => "CLS",
            Estimator::Mr => "MR",
            Estimator::Direct => "DIRECT",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Estimator::Cls => 1,
            Estimator::Mr => 2,
            Estimator::Direct => 3,
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cls" => Ok(Estimator::Cls),
            "mr" => Ok(Estimator::Mr),
            "direct" => Ok(Estimator::Direct),
            other => Err(Error::Config(format!("unknown estimator '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub replications: usize,
    pub fraction: f64,
    pub out_of_sample: BTreeSet<AreaId>,
    pub estimators: Vec<Estimator>,
    pub baseline: Estimator,
    pub k: usize,
    pub seed: u64,
    pub fit: FitConfig,
}

impl ExperimentConfig {
    pub fn new(seed: u64) -> Self {
        ExperimentConfig {
            replications: 1000,
            fraction: 0.1,
            out_of_sample: BTreeSet::new(),
            estimators: vec![Estimator::Cls, Estimator::Mr, Estimator::Direct],
            baseline: Estimator::Direct,
            k: 100,
            seed,
            fit: FitConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config("sampling fraction must be in (0, 1]".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators selected".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEstimate {
    pub replicate: usize,
    pub estimator: Estimator,
    pub area_id: AreaId,
    pub alpha: u32,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaMetric {
    pub estimator: Estimator,
    pub area_id: AreaId,
    pub alpha: u32,
    pub rb: f64,
    pub rrmspe: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryMetric {
    pub estimator: Estimator,
    pub alpha: u32,
    pub rb: f64,
    pub rrmspe: f64,
    /// Averaged RRMSPE relative to the baseline's.
    pub eff: Option<f64>,
    pub areas: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_area: Vec<AreaMetric>,
    pub summary: Vec<SummaryMetric>,
    /// (area, alpha) pairs left out because the true value is zero.
    pub excluded_zero_truth: Vec<(AreaId, u32)>,
    pub replications: usize,
}

impl MetricsReport {
    pub fn summary_for(&self, estimator: Estimator, alpha: u32) -> Option<&SummaryMetric> {
        self.summary
            .iter()
            .find(|s| s.estimator == estimator && s.alpha == alpha)
    }
}

/// RB and RRMSPE per (estimator, area, alpha), then averages over the
/// areas in `evaluate` (all areas with estimates when `None`).
pub fn compute_metrics(
    estimates: &[RawEstimate],
    truth: &BTreeMap<AreaId, [f64; 3]>,
    baseline: Estimator,
    evaluate: Option<&BTreeSet<AreaId>>,
    replications: usize,
) -> MetricsReport {
    // (estimator, alpha, area) -> (sum diff, sum sq diff, count)
    let mut acc: BTreeMap<(Estimator, u32, AreaId), (f64, f64, usize)> = BTreeMap::new();
    let mut excluded = BTreeSet::new();
    for e in estimates {
        if evaluate.is_some_and(|s| !s.contains(&e.area_id)) {
            continue;
        }
        let Some(t) = truth.get(&e.area_id).map(|t| t[e.alpha as usize]) else {
            continue;
        };
        if t <= 0.0 {
            excluded.insert((e.area_id.clone(), e.alpha));
            continue;
        }
        let s = acc.entry((e.estimator, e.alpha, e.area_id.clone())).or_insert((0.0, 0.0, 0));
        let d = e.estimate - t;
        s.0 += d;
        s.1 += d * d;
        s.2 += 1;
    }
    let per_area: Vec<AreaMetric> = acc
        .into_iter()
        .map(|((estimator, alpha, area_id), (sd, ssq, n))| {
            let t = truth[&area_id][alpha as usize];
            AreaMetric {
                estimator,
                alpha,
                rb: sd / n as f64 / t,
                rrmspe: (ssq / n as f64).sqrt() / t,
                replicates: n,
                area_id,
            }
        })
        .collect();
    let mut grouped: BTreeMap<(Estimator, u32), (f64, f64, usize)> = BTreeMap::new();
    for m in &per_area {
        let g = grouped.entry((m.estimator, m.alpha)).or_insert((0.0, 0.0, 0));
        g.0 += m.rb;
        g.1 += m.rrmspe;
        g.2 += 1;
    }
    let averaged: BTreeMap<(Estimator, u32), (f64, f64, usize)> = grouped
        .into_iter()
        .map(|(k, (rb, rr, n))| (k, (rb / n as f64, rr / n as f64, n)))
        .collect();
    let summary = averaged
        .iter()
        .map(|(&(estimator, alpha), &(rb, rrmspe, areas))| SummaryMetric {
            estimator,
            alpha,
            rb,
            rrmspe,
            eff: averaged
                .get(&(baseline, alpha))
                .filter(|b| b.1 > 0.0)
                .map(|b| rrmspe / b.1),
            areas,
        })
        .collect();
    MetricsReport {
        per_area,
        summary,
        excluded_zero_truth: excluded.into_iter().collect(),
        replications,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorFailure {
    pub replicate: usize,
    pub estimator: Estimator,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub metrics: MetricsReport,
    pub raw: Vec<RawEstimate>,
    pub failures: Vec<EstimatorFailure>,
    pub z: f64,
}

fn run_estimator(
    estimator: Estimator,
    population: &Population,
    sample: &SurveyDataset,
    config: &ExperimentConfig,
    replicate: usize,
) -> Result<BTreeMap<AreaId, [f64; 3]>> {
    let prediction = PredictionConfig {
        k: config.k,
        z: population.z,
        alphas: vec![0, 1, 2],
        transform: population.transform,
        seed: derive_seed(config.seed, &[PREDICTION, replicate as u64, estimator.tag()]),
    };
    match estimator {
        Estimator::Cls => {
            let fit = fit_nerhdp(sample, &population.census, &config.fit)?;
            ebp_values(&population.census, &fit.params, &prediction)
        }
        Estimator::Mr => {
            let ner = mr_fit_ml(sample)?;
            mr_ebp_values(&population.census, &ner, sample, &prediction)
        }
        Estimator::Direct => sample
            .area_index()
            .keys()
            .map(|area| {
                let pairs: Vec<(f64, f64)> = sample
                    .area_records(area)
                    .map(|r| (r.welfare_or_inverse(&population.transform), r.weight))
                    .collect();
                let mut v = [0.0; 3];
                for a in 0..3u32 {
                    v[a as usize] = direct_fgt(&pairs, population.z, a)?.estimate;
                }
                Ok((area.clone(), v))
            })
            .collect(),
    }
}

/// Runs the experiment on an existing population.
pub fn run_on_population(population: &Population, config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let per_replicate = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            let sample = srs_draw(
                population,
                config.fraction,
                &config.out_of_sample,
                derive_seed(config.seed, &[SAMPLING, r as u64]),
            )?;
            let mut raw = Vec::new();
            let mut failures = Vec::new();
            for &est in &config.estimators {
                match run_estimator(est, population, &sample, config, r) {
                    Ok(values) => {
                        for (area, v) in values {
                            for alpha in 0..3u32 {
                                raw.push(RawEstimate {
                                    replicate: r,
                                    estimator: est,
                                    area_id: area.clone(),
                                    alpha,
                                    estimate: v[alpha as usize],
                                });
                            }
                        }
                    }
                    Err(e) => failures.push(EstimatorFailure {
                        replicate: r,
                        estimator: est,
                        message: e.to_string(),
                    }),
                }
            }
            Ok((raw, failures))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut raw = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in per_replicate {
        raw.extend(r);
        failures.extend(f);
    }
    let evaluate = (!config.out_of_sample.is_empty()).then_some(&config.out_of_sample);
    let metrics = compute_metrics(&raw, &population.truth, config.baseline, evaluate, config.replications);
    Ok(ExperimentOutput {
        metrics,
        raw,
        failures,
        z: population.z,
    })
}

pub fn run_experiment(spec: &PopulationSpec, config: &ExperimentConfig) -> Result<ExperimentOutput> {
    run_on_population(&generate_population(spec)?, config)
}
