//! Monte Carlo empirical best prediction of FGT measures over the census.
//!
//! Each (area, replicate) pair draws from its own ChaCha stream keyed by
//! the seed, the area's position in the census and the replicate index, so
//! results do not depend on how work is spread across threads.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AreaCovariates, AreaId, CensusDataset, WelfareTransform};
use crate::error::{domain, Error, Result};
use crate::fgt::{fgt_all, FgtEstimate, ALPHAS};
use crate::fit::AreaParams;
use crate::variance::VARIANCE_FLOOR;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionConfig {
    /// Monte Carlo replicates.
    pub k: usize,
    /// Poverty line in welfare units.
    pub z: f64,
    pub alphas: Vec<u32>,
    pub transform: WelfareTransform,
    pub seed: u64,
}

impl PredictionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > u32::MAX as usize {
            return Err(Error::Config(format!("K must be in 1..=2^32-1, got {}", self.k)));
        }
        if !(self.z > 0.0) {
            return Err(Error::Config(format!("poverty line must be positive, got {}", self.z)));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !ALPHAS.contains(a)) {
            return Err(Error::Config("alphas must be a non-empty subset of {0, 1, 2}".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Child seed for a labelled sub-computation.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, p| mix(acc ^ mix(*p)))
}

/// Generator for stream `(hi, lo)` under `seed`.
pub fn substream(seed: u64, hi: u32, lo: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((hi as u64) << 32) | lo as u64);
    rng
}

/// Standard deviation used by the generators; variances at or below the
/// floor mark a degenerate fit and draw nothing.
pub fn generator_sd(variance: f64) -> f64 {
    if variance <= VARIANCE_FLOOR {
        0.0
    } else {
        variance.sqrt()
    }
}

/// `sigma_gamma^2 1' V^{-1} (y - beta0 - X beta)` for a sampled area, via
/// the compound-symmetry identity `B_i * rbar_i`.
pub fn conditional_shift(params: &AreaParams) -> Result<f64> {
    match (params.shrinkage, params.resid_mean) {
        (Some(b), Some(r)) if params.n_i > 0 => Ok(b * r),
        _ => domain(format!(
            "area {} has no sample residual mean for the conditional shift",
            params.area_id
        )),
    }
}

/// Mean and standard deviation of the area-level term added to every unit
/// of the area in one replicate.
pub fn area_deviate_law(params: &AreaParams) -> Result<(f64, f64)> {
    if params.is_sampled() {
        let b = params.shrinkage.unwrap_or(0.0);
        Ok((conditional_shift(params)?, generator_sd(params.sigma_gamma2 * (1.0 - b))))
    } else {
        Ok((0.0, generator_sd(params.sigma_gamma2)))
    }
}

/// Per-unit Monte Carlo averages of the three FGT orders for one area.
pub fn ebp_units(
    rows: &AreaCovariates,
    params: &AreaParams,
    config: &PredictionConfig,
    area_index: u32,
) -> Result<Vec<[f64; 3]>> {
    let n = rows.len();
    n.checked_mul(config.k)
        .ok_or_else(|| Error::Config("K times census size overflows".into()))?;
    if rows.p() != params.slopes.len() {
        return Err(Error::Schema(format!(
            "area {} has {} covariates but {} slopes",
            params.area_id,
            rows.p(),
            params.slopes.len()
        )));
    }
    let (shift, dev_sd) = area_deviate_law(params)?;
    let eps_sd = generator_sd(params.sigma_eps2);
    let means: Vec<f64> = rows.rows().map(|x| params.linear_predictor(x) + shift).collect();
    let mut acc = vec![[0.0f64; 3]; n];
    for k in 0..config.k {
        let mut rng = substream(config.seed, area_index, k as u32);
        let dev = dev_sd * rng.sample::<f64, _>(StandardNormal);
        for (mu, a) in means.iter().zip(acc.iter_mut()) {
            let e = eps_sd * rng.sample::<f64, _>(StandardNormal);
            let welfare = config.transform.inverse(mu + dev + e);
            let f = fgt_all(welfare, config.z);
            a[0] += f[0];
            a[1] += f[1];
            a[2] += f[2];
        }
    }
    let kf = config.k as f64;
    for a in acc.iter_mut() {
        for v in a.iter_mut() {
            *v /= kf;
        }
    }
    Ok(acc)
}

/// Area EBPs of all three orders, for every census area.
pub fn ebp_values(
    census: &CensusDataset,
    params: &BTreeMap<AreaId, AreaParams>,
    config: &PredictionConfig,
) -> Result<BTreeMap<AreaId, [f64; 3]>> {
    config.validate()?;
    census
        .total_size()
        .checked_mul(config.k)
        .ok_or_else(|| Error::Config("K times census size overflows".into()))?;
    let areas: Vec<(usize, (&AreaId, &AreaCovariates))> = census.iter().enumerate().collect();
    let out = areas
        .par_iter()
        .map(|(idx, (area, rows))| {
            let p = params
                .get(*area)
                .ok_or_else(|| Error::MissingArea(area.to_string()))?;
            let idx = u32::try_from(*idx).map_err(|_| Error::Config("too many areas".into()))?;
            let units = ebp_units(rows, p, config, idx)?;
            let n = units.len() as f64;
            let mut v = [0.0; 3];
            for u in &units {
                for a in 0..3 {
                    v[a] += u[a];
                }
            }
            Ok(((*area).clone(), v.map(|s| s / n)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(out.into_iter().collect())
}

/// EBPs for the configured orders, ordered by area then alpha.
pub fn ebp_fgt(
    census: &CensusDataset,
    params: &BTreeMap<AreaId, AreaParams>,
    config: &PredictionConfig,
) -> Result<Vec<FgtEstimate>> {
    let values = ebp_values(census, params, config)?;
    Ok(to_estimates(&values, &config.alphas))
}

pub(crate) fn to_estimates(values: &BTreeMap<AreaId, [f64; 3]>, alphas: &[u32]) -> Vec<FgtEstimate> {
    let mut sorted = alphas.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    values
        .iter()
        .flat_map(|(a, v)| {
            sorted
                .iter()
                .map(move |&al| FgtEstimate::point(a.clone(), al, v[al as usize]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::norm_cdf;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    fn params(area: &str, sg2: f64, se2: f64, n_i: usize, b: Option<f64>, r: Option<f64>) -> AreaParams {
        AreaParams {
            area_id: area.into(),
            beta0: 1.0,
            slopes: vec![0.5],
            sigma_gamma2: sg2,
            sigma_eps2: se2,
            tau: 0.5,
            n_i,
            shrinkage: b,
            resid_mean: r,
        }
    }

    fn config(k: usize, z: f64, shift: f64, seed: u64) -> PredictionConfig {
        PredictionConfig {
            k,
            z,
            alphas: vec![0, 1, 2],
            transform: WelfareTransform::new(shift).unwrap(),
            seed,
        }
    }

    #[test]
    fn shift_examples() {
        assert_eq!(conditional_shift(&params("a", 1.0, 1.0, 4, Some(0.8), Some(0.0))).unwrap(), 0.0);
        assert_eq!(conditional_shift(&params("a", 0.0, 1.0, 4, Some(0.0), Some(2.0))).unwrap(), 0.0);
        assert!(conditional_shift(&params("a", 1.0, 1.0, 0, None, None)).is_err());
    }

    #[test]
    fn shift_matches_dense_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = rng.random_range(1..=8);
            let sg2: f64 = rng.random_range(0.0..2.0);
            let se2: f64 = rng.random_range(0.05..2.0);
            let r = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let v = DMatrix::from_fn(n, n, |i, j| sg2 + if i == j { se2 } else { 0.0 });
            let dense = sg2 * DVector::from_element(n, 1.0).dot(&(v.try_inverse().unwrap() * &r));
            let b = crate::fit::shrinkage_factor(sg2, se2, n).unwrap().value;
            let p = params("a", sg2, se2, n, Some(b), Some(r.mean()));
            assert!((conditional_shift(&p).unwrap() - dense).abs() < 1e-10);
        }
    }

    fn one_area_census(xs: &[f64]) -> CensusDataset {
        CensusDataset::new(xs.iter().map(|&x| (AreaId::from("a"), vec![x]))).unwrap()
    }

    #[test]
    fn degenerate_distribution_is_deterministic() {
        let census = one_area_census(&[0.0, 1.0, 2.0, 3.0]);
        let p: BTreeMap<AreaId, AreaParams> =
            [("a".into(), params("a", 0.0, 0.0, 5, Some(0.0), Some(0.0)))].into_iter().collect();
        let t = WelfareTransform::new(0.0).unwrap();
        let z = 3.0;
        let want: Vec<f64> = (0..3)
            .map(|al| {
                [0.0, 1.0, 2.0, 3.0]
                    .iter()
                    .map(|x| fgt_all(t.inverse(1.0 + 0.5 * x), z)[al])
                    .sum::<f64>()
                    / 4.0
            })
            .collect();
        for k in [1, 7, 50] {
            let v = ebp_values(&census, &p, &config(k, z, 0.0, 3)).unwrap()[&AreaId::from("a")];
            for al in 0..3 {
                assert!((v[al] - want[al]).abs() < 1e-15);
            }
        }
    }

    fn lognormal_oracle(mu: f64, sigma: f64, z: f64, c: f64) -> (f64, f64) {
        let a = ((z + c).ln() - mu) / sigma;
        let hcr = norm_cdf(a);
        let gap = (z + c) / z * norm_cdf(a) - (mu + 0.5 * sigma * sigma).exp() / z * norm_cdf(a - sigma);
        (hcr, gap)
    }

    #[test]
    fn oos_unit_values_match_lognormal_closed_form() {
        let xs = [-1.0, 0.0, 0.7, 2.0];
        let census = one_area_census(&xs);
        let sigma: f64 = 0.6;
        let p = params("a", 0.0, sigma * sigma, 0, None, None);
        let (z, c) = (3.0, 0.5);
        let units = ebp_units(census.area(&"a".into()).unwrap(), &p, &config(50_000, z, c, 11), 0).unwrap();
        for (x, u) in xs.iter().zip(&units) {
            let mu = 1.0 + 0.5 * x;
            let (hcr, gap) = lognormal_oracle(mu, sigma, z, c);
            assert!((u[0] - hcr).abs() < 0.005, "{} vs {hcr}", u[0]);
            assert!((u[1] - gap).abs() < 0.005, "{} vs {gap}", u[1]);
        }
    }

    #[test]
    fn estimates_bounded_and_ordered() {
        let census = one_area_census(&[-2.0, 0.0, 1.0, 4.0, 6.0]);
        let p: BTreeMap<AreaId, AreaParams> =
            [("a".into(), params("a", 0.3, 0.8, 3, Some(0.5), Some(-0.4)))].into_iter().collect();
        let v = ebp_values(&census, &p, &config(200, 2.5, 0.0, 5)).unwrap()[&AreaId::from("a")];
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(v[2] <= v[1] && v[1] <= v[0]);
    }

    #[test]
    fn doubling_k_shrinks_mc_spread() {
        let census = one_area_census(&[0.0, 0.5, 1.0, 1.5, 2.0]);
        let p: BTreeMap<AreaId, AreaParams> =
            [("a".into(), params("a", 0.4, 0.5, 0, None, None))].into_iter().collect();
        let spread = |k: usize| {
            let v: Vec<f64> = (0..400)
                .map(|s| ebp_values(&census, &p, &config(k, 2.5, 0.0, s)).unwrap()[&AreaId::from("a")][0])
                .collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        };
        let ratio = spread(80) / spread(40);
        assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.2 * std::f64::consts::FRAC_1_SQRT_2, "{ratio}");
    }

    #[test]
    fn in_sample_deviates_have_conditional_law() {
        let p = params("a", 0.8, 1.2, 6, Some(0.8), Some(0.5));
        let (mean, sd) = area_deviate_law(&p).unwrap();
        let draws: Vec<f64> = (0..40_000)
            .map(|k| mean + sd * substream(9, 0, k).sample::<f64, _>(StandardNormal))
            .collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let v = draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((m - 0.4).abs() < 0.01, "{m}");
        assert!((v - 0.8 * 0.2).abs() < 0.01, "{v}");
    }

    #[test]
    fn seed_determinism_and_missing_area() {
        let census = one_area_census(&[0.0, 1.0]);
        let p: BTreeMap<AreaId, AreaParams> =
            [("a".into(), params("a", 0.3, 0.5, 0, None, None))].into_iter().collect();
        let a = ebp_values(&census, &p, &config(30, 2.0, 0.0, 1)).unwrap();
        let b = ebp_values(&census, &p, &config(30, 2.0, 0.0, 1)).unwrap();
        assert_eq!(a, b);
        assert!(ebp_values(&census, &BTreeMap::new(), &config(30, 2.0, 0.0, 1)).is_err());
        assert!(config(0, 2.0, 0.0, 1).validate().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, &[0, 1]);
        let b = derive_seed(1, &[1, 0]);
        let c = derive_seed(2, &[0, 1]);
        assert!(a != b && a != c && b != c);
    }
}
