//! Survey and census containers and the welfare transform.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Identifier of a small area.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AreaId(pub String);

impl AreaId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AreaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AreaId {
    fn from(s: &str) -> Self {
        AreaId(s.to_string())
    }
}

impl From<String> for AreaId {
    fn from(s: String) -> Self {
        AreaId(s)
    }
}

/// Shifted-log welfare transform `Y = log(E + c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelfareTransform {
    pub shift: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl Default for WelfareTransform {
    fn default() -> Self {
        WelfareTransform { shift: 0.0 }
    }
}

impl WelfareTransform {
    pub fn new(shift: f64) -> Result<Self> {
        if !(shift >= 0.0 && shift.is_finite()) {
            return domain(format!("transform shift must be finite and >= 0, got {shift}"));
        }
        Ok(WelfareTransform { shift })
    }

    pub fn forward(&self, welfare: f64) -> Result<f64> {
        let v = welfare + self.shift;
        if v > 0.0 {
            Ok(v.ln())
        } else {
            domain(format!(
                "welfare {welfare} is not above -shift ({})",
                -self.shift
            ))
        }
    }

    #[inline]
    pub fn inverse(&self, y: f64) -> f64 {
        y.exp() - self.shift
    }

    pub fn apply(&self, value: f64, direction: Direction) -> Result<f64> {
        match direction {
            Direction::Forward => self.forward(value),
            Direction::Inverse => Ok(self.inverse(value)),
        }
    }
}

/// One sampled unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyRecord {
    pub area_id: AreaId,
    /// Untransformed welfare when the input carried it.
    pub welfare: Option<f64>,
    /// Transformed response.
    pub y: f64,
    pub x: Vec<f64>,
    pub weight: f64,
}

impl SurveyRecord {
    pub fn welfare_or_inverse(&self, transform: &WelfareTransform) -> f64 {
        self.welfare.unwrap_or_else(|| transform.inverse(self.y))
    }
}

/// Unit-level sample, kept in a canonical order (area, then response,
/// covariates, weight) so that results do not depend on input row order.
#[derive(Debug, Clone, PartialEq)]
pub struct SurveyDataset {
    records: Vec<SurveyRecord>,
    area_index: BTreeMap<AreaId, Vec<usize>>,
    p: usize,
}

fn canonical_cmp(a: &SurveyRecord, b: &SurveyRecord) -> std::cmp::Ordering {
    a.area_id
        .cmp(&b.area_id)
        .then(a.y.total_cmp(&b.y))
        .then_with(|| {
            a.x.iter()
                .zip(&b.x)
                .map(|(u, v)| u.total_cmp(v))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .then(a.weight.total_cmp(&b.weight))
        .then_with(|| match (a.welfare, b.welfare) {
            (Some(u), Some(v)) => u.total_cmp(&v),
            (None, None) => std::cmp::Ordering::Equal,
            (None, Some(_)) => std::cmp::Ordering::Less,
            (Some(_), None) => std::cmp::Ordering::Greater,
        })
}

impl SurveyDataset {
    pub fn new(mut records: Vec<SurveyRecord>) -> Result<Self> {
        if records.is_empty() {
            return domain("survey has no records");
        }
        let p = records[0].x.len();
        for (i, r) in records.iter().enumerate() {
            if r.x.len() != p {
                return Err(Error::Schema(format!(
                    "survey record {i} has {} covariates, expected {p}",
                    r.x.len()
                )));
            }
            if !r.y.is_finite() || r.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("survey record {i} has a non-finite value")));
            }
            if !(r.weight >= 0.0) {
                return Err(Error::Schema(format!("survey record {i} has negative weight")));
            }
        }
        records.sort_by(canonical_cmp);
        let mut area_index: BTreeMap<AreaId, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            area_index.entry(r.area_id.clone()).or_default().push(i);
        }
        Ok(SurveyDataset { records, area_index, p })
    }

    /// Builds records from welfare values, transforming them.
    pub fn from_welfare(
        rows: impl IntoIterator<Item = (AreaId, f64, Vec<f64>, f64)>,
        transform: &WelfareTransform,
    ) -> Result<Self> {
        let records = rows
            .into_iter()
            .map(|(area_id, welfare, x, weight)| {
                Ok(SurveyRecord {
                    area_id,
                    welfare: Some(welfare),
                    y: transform.forward(welfare)?,
                    x,
                    weight,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(records)
    }

    pub fn records(&self) -> &[SurveyRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of covariates (excluding the intercept).
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn areas(&self) -> impl Iterator<Item = &AreaId> {
        self.area_index.keys()
    }

    pub fn area_count(&self) -> usize {
        self.area_index.len()
    }

    pub fn area_records(&self, area: &AreaId) -> impl Iterator<Item = &SurveyRecord> {
        self.area_index
            .get(area)
            .into_iter()
            .flat_map(move |idx| idx.iter().map(move |&i| &self.records[i]))
    }

    pub fn area_size(&self, area: &AreaId) -> usize {
        self.area_index.get(area).map_or(0, Vec::len)
    }

    pub fn area_index(&self) -> &BTreeMap<AreaId, Vec<usize>> {
        &self.area_index
    }

    /// Same covariates and areas with a new response vector (in canonical
    /// record order). Used to build bootstrap samples.
    pub fn with_responses(&self, y: &[f64], transform: &WelfareTransform) -> Result<Self> {
        if y.len() != self.records.len() {
            return domain(format!(
                "{} responses for {} survey records",
                y.len(),
                self.records.len()
            ));
        }
        let records = self
            .records
            .iter()
            .zip(y)
            .map(|(r, &yv)| SurveyRecord {
                area_id: r.area_id.clone(),
                welfare: Some(transform.inverse(yv)),
                y: yv,
                x: r.x.clone(),
                weight: r.weight,
            })
            .collect();
        Self::new(records)
    }
}

/// Covariates of every population unit in one area, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaCovariates {
    values: Vec<f64>,
    p: usize,
}

impl AreaCovariates {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.values.len().checked_div(self.p).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.p.max(1))
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.p..(j + 1) * self.p]
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut m = vec![0.0; self.p];
        for row in self.rows() {
            for (a, v) in m.iter_mut().zip(row) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|a| *a /= n);
        m
    }
}

/// Auxiliary information for every population unit, grouped by area.
#[derive(Debug, Clone, PartialEq)]
pub struct CensusDataset {
    areas: BTreeMap<AreaId, AreaCovariates>,
    area_aux: BTreeMap<AreaId, Vec<f64>>,
    p: usize,
}

impl CensusDataset {
    /// Builds a census from unit records. Units keep their input order
    /// within each area.
    pub fn new(records: impl IntoIterator<Item = (AreaId, Vec<f64>)>) -> Result<Self> {
        let mut areas: BTreeMap<AreaId, Vec<f64>> = BTreeMap::new();
        let mut p: Option<usize> = None;
        for (i, (area, x)) in records.into_iter().enumerate() {
            match p {
                None => p = Some(x.len()),
                Some(p) if p != x.len() => {
                    return Err(Error::Schema(format!(
                        "census record {i} has {} covariates, expected {p}",
                        x.len()
                    )))
                }
                _ => {}
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("census record {i} has a non-finite value")));
            }
            areas.entry(area).or_default().extend(x);
        }
        let p = p.ok_or_else(|| Error::Domain("census has no records".into()))?;
        let areas = areas
            .into_iter()
            .map(|(a, values)| (a, AreaCovariates { values, p }))
            .collect();
        Ok(CensusDataset {
            areas,
            area_aux: BTreeMap::new(),
            p,
        })
    }

    /// Attaches area-level auxiliary means. Every census area must be
    /// covered and all vectors must share one length.
    pub fn with_area_aux(mut self, aux: BTreeMap<AreaId, Vec<f64>>) -> Result<Self> {
        let q = aux.values().next().map_or(0, Vec::len);
        for (a, z) in &aux {
            if z.len() != q {
                return Err(Error::Schema(format!(
                    "area auxiliary vector for {a} has length {}, expected {q}",
                    z.len()
                )));
            }
            if !self.areas.contains_key(a) {
                return Err(Error::Schema(format!("area auxiliary row for unknown area {a}")));
            }
        }
        if let Some(missing) = self.areas.keys().find(|a| !aux.contains_key(*a)) {
            return Err(Error::Schema(format!("area {missing} has no auxiliary row")));
        }
        self.area_aux = aux;
        Ok(self)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn areas(&self) -> impl Iterator<Item = &AreaId> {
        self.areas.keys()
    }

    pub fn area_count(&self) -> usize {
        self.areas.len()
    }

    pub fn area(&self, id: &AreaId) -> Option<&AreaCovariates> {
        self.areas.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&AreaId, &AreaCovariates)> {
        self.areas.iter()
    }

    pub fn contains(&self, id: &AreaId) -> bool {
        self.areas.contains_key(id)
    }

    pub fn area_size(&self, id: &AreaId) -> usize {
        self.areas.get(id).map_or(0, AreaCovariates::len)
    }

    pub fn total_size(&self) -> usize {
        self.areas.values().map(AreaCovariates::len).sum()
    }

    pub fn area_aux(&self) -> &BTreeMap<AreaId, Vec<f64>> {
        &self.area_aux
    }

    /// Area-level auxiliary vector; an intercept-only `[1.0]` when no
    /// auxiliary table was attached.
    pub fn aux_for(&self, id: &AreaId) -> Vec<f64> {
        self.area_aux.get(id).cloned().unwrap_or_else(|| vec![1.0])
    }

    /// Checks that the survey is compatible with this census and returns
    /// the ids of census areas without sample.
    pub fn check_survey(&self, survey: &SurveyDataset) -> Result<Vec<AreaId>> {
        if survey.p() != self.p {
            return Err(Error::Schema(format!(
                "survey has {} covariates (x1..x{}) but census has {} (x1..x{})",
                survey.p(),
                survey.p(),
                self.p,
                self.p
            )));
        }
        let missing: Vec<String> = survey
            .areas()
            .filter(|a| !self.contains(a))
            .map(|a| a.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Schema(format!(
                "survey areas absent from census: {}",
                missing.join(", ")
            )));
        }
        Ok(self
            .areas()
            .filter(|a| survey.area_size(a) == 0)
            .cloned()
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn transform_examples() {
        let t0 = WelfareTransform::new(0.0).unwrap();
        assert_eq!(t0.forward(1.0).unwrap(), 0.0);
        assert_eq!(t0.inverse(0.0), 1.0);
        let t5 = WelfareTransform::new(5.0).unwrap();
        let back = t5.inverse(t5.forward(100.0).unwrap());
        assert!((back - 100.0).abs() / 100.0 < 1e-12);
        assert!(t5.forward(-5.0).is_err());
        assert!(t5.forward(-4.0).is_ok());
        assert!(WelfareTransform::new(-1.0).is_err());
    }

    proptest! {
        #[test]
        fn transform_round_trip(e in 0.01f64..1e9, c in 0.0f64..100.0) {
            let t = WelfareTransform::new(c).unwrap();
            let back = t.inverse(t.forward(e).unwrap());
            prop_assert!(((back - e) / e).abs() < 1e-12);
        }

        #[test]
        fn transform_strictly_increasing(a in 0.01f64..1e6, d in 1e-6f64..1e3) {
            let t = WelfareTransform::new(1.0).unwrap();
            prop_assert!(t.forward(a + d).unwrap() > t.forward(a).unwrap());
        }
    }

    fn rec(area: &str, y: f64, x: f64) -> SurveyRecord {
        SurveyRecord {
            area_id: area.into(),
            welfare: None,
            y,
            x: vec![x],
            weight: 1.0,
        }
    }

    #[test]
    fn survey_order_is_canonical() {
        let a = SurveyDataset::new(vec![rec("b", 1.0, 2.0), rec("a", 3.0, 1.0), rec("a", 2.0, 5.0)]).unwrap();
        let b = SurveyDataset::new(vec![rec("a", 2.0, 5.0), rec("b", 1.0, 2.0), rec("a", 3.0, 1.0)]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.area_size(&"a".into()), 2);
        assert_eq!(a.area_size(&"zz".into()), 0);
    }

    #[test]
    fn survey_rejects_ragged_covariates() {
        let mut r = rec("a", 1.0, 1.0);
        r.x.push(2.0);
        assert!(matches!(
            SurveyDataset::new(vec![rec("a", 0.0, 0.0), r]),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn census_checks_survey_areas() {
        let census = CensusDataset::new(vec![
            ("a".into(), vec![1.0]),
            ("a".into(), vec![2.0]),
            ("c".into(), vec![3.0]),
        ])
        .unwrap();
        assert_eq!(census.area_size(&"a".into()), 2);
        let survey = SurveyDataset::new(vec![rec("a", 1.0, 1.0)]).unwrap();
        assert_eq!(census.check_survey(&survey).unwrap(), vec![AreaId::from("c")]);
        let bad = SurveyDataset::new(vec![rec("b", 1.0, 1.0)]).unwrap();
        let err = census.check_survey(&bad).unwrap_err().to_string();
        assert!(err.contains('b'), "{err}");
    }
}
