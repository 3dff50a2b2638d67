//! Flat `key = value` run configuration. Command-line flags are applied on
//! top of the file through the same setter, so both share validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::diagnostics::DEFAULT_CV_THRESHOLDS;
use crate::error::{Error, Result};
use crate::robust::DEFAULT_HUBER_C;
use crate::sim::Estimator;
use crate::tuning::TauGrid;

/// Every key accepted in a config file, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("survey", "survey CSV: area_id,weight,welfare|y,x1..xp"),
    ("census", "census CSV: area_id,x1..xp"),
    ("area_aux", "area table CSV: area_id,N,z1..zq (z1 is normally the intercept 1)"),
    ("out_dir", "output directory"),
    ("shift", "welfare transform shift c in y = log(E + c); default 0"),
    ("z", "poverty line in welfare units"),
    ("huber_c", "Huber tuning constant; default 1.345"),
    ("tau_grid", "'default' (0.01..0.99 by 0.01), 'start:stop:step', or a comma list"),
    ("tau", "single tau for every area; bypasses tau estimation"),
    ("k", "Monte Carlo draws per unit; default 100"),
    ("b", "bootstrap replicates; default 100"),
    ("refit_tau", "re-estimate tau in every bootstrap replicate; default true"),
    ("seed", "master seed"),
    ("threads", "worker threads; default from NERHDP_THREADS or all cores"),
    ("alphas", "FGT orders as a comma list from {0,1,2}; default 0,1,2"),
    ("estimator", "predict: cls or mr; default cls"),
    ("estimators", "simulate: comma list of cls, mr, direct"),
    ("baseline", "simulate: estimator used as the EFF denominator; default direct"),
    ("population", "simulate: heterogeneous or homogeneous; default heterogeneous"),
    ("replications", "simulate: number of samples drawn; default 200"),
    ("fraction", "simulate: within-area sampling fraction; default 0.1"),
    ("oos_count", "simulate: number of areas left unsampled; default 0"),
    ("direct", "diagnose: direct estimates CSV"),
    ("model", "diagnose: model estimates CSV with mspe"),
    ("cv_thresholds", "diagnose: CV thresholds in percent; default 16.6,20,33.3"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub survey: Option<PathBuf>,
    pub census: Option<PathBuf>,
    pub area_aux: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub shift: f64,
    pub z: Option<f64>,
    pub huber_c: f64,
    pub tau_grid: Vec<f64>,
    pub tau: Option<f64>,
    pub k: usize,
    pub b: usize,
    pub refit_tau: bool,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub alphas: Vec<u32>,
    pub estimator: Estimator,
    pub estimators: Vec<Estimator>,
    pub baseline: Estimator,
    pub population: String,
    pub replications: usize,
    pub fraction: f64,
    pub oos_count: usize,
    pub direct: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub cv_thresholds: Vec<f64>,
    /// Keys set explicitly, with their raw values.
    set: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            survey: None,
            census: None,
            area_aux: None,
            out_dir: PathBuf::from("."),
            shift: 0.0,
            z: None,
            huber_c: DEFAULT_HUBER_C,
            tau_grid: TauGrid::default_taus(),
            tau: None,
            k: 100,
            b: 100,
            refit_tau: true,
            seed: None,
            threads: None,
            alphas: vec![0, 1, 2],
            estimator: Estimator::Cls,
            estimators: vec![Estimator::Cls, Estimator::Mr, Estimator::Direct],
            baseline: Estimator::Direct,
            population: "heterogeneous".into(),
            replications: 200,
            fraction: 0.1,
            oos_count: 0,
            direct: None,
            model: None,
            cv_thresholds: DEFAULT_CV_THRESHOLDS.to_vec(),
            set: BTreeMap::new(),
        }
    }
}

fn bad(key: &str, value: &str, why: &str) -> Error {
    Error::Config(format!("{key} = '{value}': {why}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "not a valid number"))
}

fn list<T>(key: &str, value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(bad(key, value, "empty list"));
    }
    Ok(items)
}

/// Parses a tau grid: `default`, `start:stop:step`, or a comma list.
pub fn parse_tau_grid(value: &str) -> Result<Vec<f64>> {
    let key = "tau_grid";
    let taus = if value == "default" {
        TauGrid::default_taus()
    } else if let [a, b, s] = value.split(':').map(str::trim).collect::<Vec<_>>()[..] {
        let (a, b, s): (f64, f64, f64) = (num(key, a)?, num(key, b)?, num(key, s)?);
        if !(s > 0.0 && b >= a) {
            return Err(bad(key, value, "need start <= stop and step > 0"));
        }
        let n = ((b - a) / s + 1e-9).floor() as usize;
        // Rounded to 1e-12 so that 0.01:0.99:0.01 gives the same values as
        // the default grid.
        (0..=n).map(|i| ((a + i as f64 * s) * 1e12).round() / 1e12).collect()
    } else {
        list(key, value, |v| num(key, v))?
    };
    TauGrid::validate_taus(&taus).map_err(|e| bad(key, value, &e.to_string()))?;
    Ok(taus)
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

impl RunConfig {
    /// Sets one key from its textual value, validating its range.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "survey" => self.survey = Some(value.into()),
            "census" => self.census = Some(value.into()),
            "area_aux" => self.area_aux = Some(value.into()),
            "out_dir" => self.out_dir = value.into(),
            "direct" => self.direct = Some(value.into()),
            "model" => self.model = Some(value.into()),
            "shift" => {
                let v: f64 = num(key, value)?;
                if !v.is_finite() {
                    return Err(bad(key, value, "must be finite"));
                }
                self.shift = v;
            }
            "z" => {
                let v: f64 = num(key, value)?;
                if !(v > 0.0 && v.is_finite()) {
                    return Err(bad(key, value, "poverty line must be positive"));
                }
                self.z = Some(v);
            }
            "huber_c" => {
                let v: f64 = num(key, value)?;
                if !(v > 0.0 && v.is_finite()) {
                    return Err(bad(key, value, "must be positive"));
                }
                self.huber_c = v;
            }
            "tau_grid" => self.tau_grid = parse_tau_grid(value)?,
            "tau" => {
                let v: f64 = num(key, value)?;
                if !(v > 0.0 && v < 1.0) {
                    return Err(bad(key, value, "must lie in (0, 1)"));
                }
                self.tau = Some(v);
            }
            "k" | "b" | "replications" | "threads" => {
                let v: usize = num(key, value)?;
                if v == 0 {
                    return Err(bad(key, value, "must be at least 1"));
                }
                match key {
                    "k" => self.k = v,
                    "b" => self.b = v,
                    "replications" => self.replications = v,
                    _ => self.threads = Some(v),
                }
            }
            "oos_count" => self.oos_count = num(key, value)?,
            "refit_tau" => self.refit_tau = flag(key, value)?,
            "seed" => self.seed = Some(num(key, value)?),
            "alphas" => {
                let mut a = list(key, value, |v| {
                    num::<u32>(key, v).and_then(|a| {
                        if a <= 2 {
                            Ok(a)
                        } else {
                            Err(bad(key, value, "orders must be 0, 1 or 2"))
                        }
                    })
                })?;
                a.sort_unstable();
                a.dedup();
                self.alphas = a;
            }
            "estimator" => self.estimator = value.parse()?,
            "estimators" => self.estimators = list(key, value, str::parse)?,
            "baseline" => self.baseline = value.parse()?,
            "population" => {
                if !["heterogeneous", "homogeneous"].contains(&value) {
                    return Err(bad(key, value, "expected heterogeneous or homogeneous"));
                }
                self.population = value.into();
            }
            "fraction" => {
                let v: f64 = num(key, value)?;
                if !(v > 0.0 && v <= 1.0) {
                    return Err(bad(key, value, "must lie in (0, 1]"));
                }
                self.fraction = v;
            }
            "cv_thresholds" => self.cv_thresholds = list(key, value, |v| num(key, v))?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        self.set.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected 'key = value'", i + 1)))?;
            let key = key.trim();
            if let Some(prev) = seen.insert(key.to_string(), i + 1) {
                return Err(Error::Config(format!(
                    "{origin}:{}: key '{key}' already set on line {prev}",
                    i + 1
                )));
            }
            config
                .set(key, value)
                .map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{origin}:{}: {m}", i + 1)),
                    other => Error::Config(format!("{origin}:{}: {other}", i + 1)),
                })?;
        }
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Keys that were set explicitly, excluding the thread count and output
    /// directory, which never change output contents.
    pub fn effective(&self) -> BTreeMap<String, String> {
        self.set
            .iter()
            .filter(|(k, _)| !["threads", "out_dir"].contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn require_path(&self, key: &str) -> Result<&Path> {
        let p = match key {
            "survey" => &self.survey,
            "census" => &self.census,
            "direct" => &self.direct,
            "model" => &self.model,
            _ => &None,
        };
        p.as_deref()
            .ok_or_else(|| Error::Config(format!("'{key}' is required (config key or --{key})")))
    }

    pub fn require_z(&self) -> Result<f64> {
        self.z
            .ok_or_else(|| Error::Config("poverty line 'z' is required (config key or --z)".into()))
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("'seed' is required for this command (config key or --seed)".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_validates() {
        let c = RunConfig::parse("# run\nz = 4891\nseed=7  # comment\nk = 50\nalphas = 1,0\n", "t").unwrap();
        assert_eq!(c.z, Some(4891.0));
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.k, 50);
        assert_eq!(c.alphas, vec![0, 1]);
        assert_eq!(c.huber_c, DEFAULT_HUBER_C);
    }

    #[test]
    fn rejects_unknown_duplicate_and_out_of_range() {
        let e = RunConfig::parse("zz = 1\n", "t").unwrap_err().to_string();
        assert!(e.contains("t:1") && e.contains("unknown key 'zz'"), "{e}");
        assert!(RunConfig::parse("k = 1\nk = 2\n", "t").is_err());
        assert!(RunConfig::parse("k = 0\n", "t").is_err());
        assert!(RunConfig::parse("z = -1\n", "t").is_err());
        assert!(RunConfig::parse("huber_c = 0\n", "t").is_err());
        assert!(RunConfig::parse("fraction = 1.5\n", "t").is_err());
        assert!(RunConfig::parse("alphas = 3\n", "t").is_err());
        assert!(RunConfig::parse("tau_grid = 0:1:0.1\n", "t").is_err());
        assert!(RunConfig::parse("just text\n", "t").is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let mut c = RunConfig::parse("k = 5\n", "t").unwrap();
        c.set("k", "9").unwrap();
        assert_eq!(c.k, 9);
        assert_eq!(c.effective()["k"], "9");
    }

    #[test]
    fn tau_grid_forms() {
        assert_eq!(parse_tau_grid("0.01:0.99:0.01").unwrap(), TauGrid::default_taus());
        assert_eq!(parse_tau_grid("0.25, 0.5,0.75").unwrap(), vec![0.25, 0.5, 0.75]);
        assert_eq!(parse_tau_grid("0.1:0.3:0.1").unwrap(), vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let samples = [
            ("survey", "s.csv"), ("census", "c.csv"), ("area_aux", "a.csv"), ("out_dir", "o"),
            ("shift", "1"), ("z", "2"), ("huber_c", "1.5"), ("tau_grid", "default"), ("tau", "0.5"),
            ("k", "3"), ("b", "4"), ("refit_tau", "false"), ("seed", "1"), ("threads", "2"),
            ("alphas", "0"), ("estimator", "mr"), ("estimators", "cls,direct"), ("baseline", "mr"),
            ("population", "homogeneous"), ("replications", "3"), ("fraction", "0.2"),
            ("oos_count", "2"), ("direct", "d.csv"), ("model", "m.csv"), ("cv_thresholds", "10,20"),
        ];
        assert_eq!(samples.len(), KEYS.len());
        let mut c = RunConfig::default();
        for (k, v) in samples {
            assert!(KEYS.iter().any(|(key, _)| *key == k), "{k}");
            c.set(k, v).unwrap();
        }
        assert!(!c.effective().contains_key("threads"));
        assert!(!c.effective().contains_key("out_dir"));
    }
}
