//! CSV and JSON input/output. Readers report errors with file and line;
//! CSV writers print 6 significant digits, JSON keeps full precision.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::data::{AreaId, CensusDataset, SurveyDataset, SurveyRecord, WelfareTransform};
use crate::error::{Error, Result};
use crate::fgt::FgtEstimate;
use crate::fit::AreaParams;

/// Formats `x` with `digits` significant digits, trailing zeros trimmed.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let s = if (-4..digits as i32).contains(&exp) {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        let s = format!("{:.*e}", digits - 1, x);
        let (mantissa, e) = s.split_once('e').expect("exponent form");
        return format!("{}e{e}", trim_zeros(mantissa));
    };
    trim_zeros(&s).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn fmt6(x: f64) -> String {
    format_sig(x, 6)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt6).unwrap_or_default()
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.position() {
        Some(pos) => parse_err(path, pos.line(), e.to_string()),
        None => Error::Csv(e),
    }
}

struct Table {
    headers: Vec<String>,
    /// (line number, fields)
    rows: Vec<(u64, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(Table { headers, rows })
}

/// Checks `headers` against fixed leading names followed by `prefix1..prefixK`
/// and returns K.
fn check_header(path: &Path, headers: &[String], leading: &[&[&str]], prefix: &str) -> Result<usize> {
    let mut problems = Vec::new();
    if headers.len() < leading.len() {
        problems.push(format!(
            "expected at least {} columns, found {}",
            leading.len(),
            headers.len()
        ));
    }
    for (i, options) in leading.iter().enumerate() {
        if let Some(h) = headers.get(i) {
            if !options.contains(&h.as_str()) {
                problems.push(format!("column {} is '{h}', expected {}", i + 1, options.join(" or ")));
            }
        }
    }
    for (k, h) in headers.iter().enumerate().skip(leading.len()) {
        let want = format!("{prefix}{}", k - leading.len() + 1);
        if *h != want {
            problems.push(format!("column {} is '{h}', expected '{want}'", k + 1));
        }
    }
    if problems.is_empty() {
        Ok(headers.len().saturating_sub(leading.len()))
    } else {
        Err(parse_err(path, 1, format!("bad header: {}", problems.join("; "))))
    }
}

fn number(path: &Path, line: u64, column: &str, raw: &str) -> Result<f64> {
    let v: f64 = raw
        .parse()
        .map_err(|_| parse_err(path, line, format!("column '{column}': cannot parse '{raw}' as a number")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(parse_err(path, line, format!("column '{column}': non-finite value '{raw}'")))
    }
}

fn numbers(path: &Path, line: u64, headers: &[String], fields: &[String], from: usize) -> Result<Vec<f64>> {
    fields[from..]
        .iter()
        .zip(&headers[from..])
        .map(|(f, h)| number(path, line, h, f))
        .collect()
}

fn area_field(path: &Path, line: u64, raw: &str) -> Result<AreaId> {
    if raw.is_empty() {
        Err(parse_err(path, line, "column 'area_id': empty area id"))
    } else {
        Ok(AreaId::from(raw))
    }
}

/// Survey CSV: `area_id,weight,welfare|y,x1..xp`.
pub fn read_survey(path: &Path, transform: &WelfareTransform) -> Result<SurveyDataset> {
    let t = read_table(path)?;
    check_header(path, &t.headers, &[&["area_id"], &["weight"], &["welfare", "y"]], "x")?;
    let has_welfare = t.headers[2] == "welfare";
    let mut records = Vec::with_capacity(t.rows.len());
    for (line, f) in &t.rows {
        let area_id = area_field(path, *line, &f[0])?;
        let weight = number(path, *line, "weight", &f[1])?;
        if weight < 0.0 {
            return Err(parse_err(path, *line, format!("column 'weight': negative weight {weight}")));
        }
        let v = number(path, *line, &t.headers[2], &f[2])?;
        let (welfare, y) = if has_welfare {
            let y = transform
                .forward(v)
                .map_err(|e| parse_err(path, *line, format!("column 'welfare': {e}")))?;
            (Some(v), y)
        } else {
            (None, v)
        };
        records.push(SurveyRecord {
            area_id,
            welfare,
            y,
            x: numbers(path, *line, &t.headers, f, 3)?,
            weight,
        });
    }
    if records.is_empty() {
        return Err(parse_err(path, 1, "survey file has no data rows"));
    }
    SurveyDataset::new(records)
}

/// Census CSV: `area_id,x1..xp`; unit order within an area is preserved.
pub fn read_census(path: &Path) -> Result<CensusDataset> {
    let t = read_table(path)?;
    check_header(path, &t.headers, &[&["area_id"]], "x")?;
    let rows = t
        .rows
        .iter()
        .map(|(line, f)| Ok((area_field(path, *line, &f[0])?, numbers(path, *line, &t.headers, f, 1)?)))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(parse_err(path, 1, "census file has no data rows"));
    }
    CensusDataset::new(rows)
}

/// Area auxiliary table `area_id,N,z1..zq`.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaAux {
    pub population: BTreeMap<AreaId, f64>,
    pub zbar: BTreeMap<AreaId, Vec<f64>>,
}

pub fn read_area_aux(path: &Path) -> Result<AreaAux> {
    let t = read_table(path)?;
    let q = check_header(path, &t.headers, &[&["area_id"], &["N"]], "z")?;
    if q == 0 {
        return Err(parse_err(path, 1, "area auxiliary file needs at least one column z1"));
    }
    let mut aux = AreaAux {
        population: BTreeMap::new(),
        zbar: BTreeMap::new(),
    };
    for (line, f) in &t.rows {
        let area = area_field(path, *line, &f[0])?;
        if aux.zbar.contains_key(&area) {
            return Err(parse_err(path, *line, format!("duplicate area '{area}'")));
        }
        aux.population.insert(area.clone(), number(path, *line, "N", &f[1])?);
        aux.zbar.insert(area, numbers(path, *line, &t.headers, f, 2)?);
    }
    Ok(aux)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedData {
    pub survey: SurveyDataset,
    pub census: CensusDataset,
    pub out_of_sample: Vec<AreaId>,
}

/// Loads and cross-checks survey, census and (optionally) the area table.
pub fn load_datasets(
    survey: &Path,
    census: &Path,
    area_aux: Option<&Path>,
    transform: &WelfareTransform,
) -> Result<LoadedData> {
    let survey = read_survey(survey, transform)?;
    let mut census = read_census(census)?;
    if let Some(path) = area_aux {
        census = census.with_area_aux(read_area_aux(path)?.zbar)?;
    }
    let out_of_sample = census.check_survey(&survey)?;
    Ok(LoadedData {
        survey,
        census,
        out_of_sample,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_rows(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// `area_id,beta0,slope_1..p,sigma_gamma2,sigma_eps2,tau,n_i,B_i,resid_mean`.
pub fn write_params_csv(path: &Path, params: &BTreeMap<AreaId, AreaParams>) -> Result<()> {
    let p = params.values().next().map_or(0, |a| a.slopes.len());
    let mut header = strings(&["area_id", "beta0"]);
    header.extend((1..=p).map(|k| format!("slope_{k}")));
    header.extend(strings(&["sigma_gamma2", "sigma_eps2", "tau", "n_i", "B_i", "resid_mean"]));
    write_rows(
        path,
        &header,
        params.values().map(|a| {
            let mut r = vec![a.area_id.to_string(), fmt6(a.beta0)];
            r.extend(a.slopes.iter().map(|&s| fmt6(s)));
            r.extend([
                fmt6(a.sigma_gamma2),
                fmt6(a.sigma_eps2),
                fmt6(a.tau),
                a.n_i.to_string(),
                fmt_opt(a.shrinkage),
                fmt_opt(a.resid_mean),
            ]);
            r
        }),
    )
}

/// `[estimator,]area_id,alpha,estimate[,mspe,cv]`.
pub fn write_estimates_csv(path: &Path, estimates: &[FgtEstimate], estimator: Option<&str>) -> Result<()> {
    let with_mspe = estimates.iter().any(|e| e.mspe.is_some());
    let mut header = Vec::new();
    if estimator.is_some() {
        header.push("estimator".to_string());
    }
    header.extend(strings(&["area_id", "alpha", "estimate"]));
    if with_mspe {
        header.extend(strings(&["mspe", "cv"]));
    }
    write_rows(
        path,
        &header,
        estimates.iter().map(|e| {
            let mut r: Vec<String> = estimator.map(str::to_string).into_iter().collect();
            r.extend([e.area_id.to_string(), e.alpha.to_string(), fmt6(e.value)]);
            if with_mspe {
                r.extend([fmt_opt(e.mspe), fmt_opt(e.cv)]);
            }
            r
        }),
    )
}

/// One direct estimate row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectRow {
    pub area_id: AreaId,
    pub alpha: u32,
    pub estimate: f64,
    pub variance: f64,
    pub cv: Option<f64>,
}

pub fn write_direct_csv(path: &Path, rows: &[DirectRow]) -> Result<()> {
    write_rows(
        path,
        &strings(&["area_id", "alpha", "estimate", "variance", "cv"]),
        rows.iter().map(|d| {
            vec![
                d.area_id.to_string(),
                d.alpha.to_string(),
                fmt6(d.estimate),
                fmt6(d.variance),
                fmt_opt(d.cv),
            ]
        }),
    )
}

fn column(path: &Path, headers: &[String], name: &str) -> Result<Option<usize>> {
    Ok(headers.iter().position(|h| h == name)).and_then(|i| match i {
        Some(i) => Ok(Some(i)),
        None if ["area_id", "alpha", "estimate"].contains(&name) => {
            Err(parse_err(path, 1, format!("missing column '{name}'")))
        }
        None => Ok(None),
    })
}

fn optional_number(path: &Path, line: u64, name: &str, raw: Option<&String>) -> Result<Option<f64>> {
    match raw.map(String::as_str) {
        None | Some("") => Ok(None),
        Some(v) => number(path, line, name, v).map(Some),
    }
}

/// Reads an estimates CSV written by [`write_estimates_csv`] or
/// [`write_direct_csv`]; `variance` is returned in the `mspe` slot.
pub fn read_estimates_csv(path: &Path) -> Result<Vec<FgtEstimate>> {
    let t = read_table(path)?;
    let area = column(path, &t.headers, "area_id")?.expect("required");
    let alpha = column(path, &t.headers, "alpha")?.expect("required");
    let est = column(path, &t.headers, "estimate")?.expect("required");
    let mspe = match column(path, &t.headers, "mspe")? {
        Some(i) => Some(i),
        None => column(path, &t.headers, "variance")?,
    };
    let cv = column(path, &t.headers, "cv")?;
    t.rows
        .iter()
        .map(|(line, f)| {
            let a: u32 = f[alpha]
                .parse()
                .ok()
                .filter(|a| *a <= 2)
                .ok_or_else(|| parse_err(path, *line, format!("column 'alpha': expected 0, 1 or 2, got '{}'", f[alpha])))?;
            Ok(FgtEstimate {
                area_id: area_field(path, *line, &f[area])?,
                alpha: a,
                value: number(path, *line, "estimate", &f[est])?,
                mspe: optional_number(path, *line, "mspe", mspe.map(|i| &f[i]))?,
                cv: optional_number(path, *line, "cv", cv.map(|i| &f[i]))?,
            })
        })
        .collect()
}

/// Writes a CSV of `header` columns where every row is already formatted.
pub fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    write_rows(path, &strings(header), rows)
}

/// Full-precision, pretty-printed JSON.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Record of what produced a set of outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: Option<u64>,
    /// SHA-256 over the effective configuration lines.
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: BTreeMap<String, String>, outputs: Vec<String>) -> Self {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (k, v) in &config {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        let config_hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            seed,
            config_hash,
            config,
            outputs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn significant_digits() {
        assert_eq!(format_sig(0.0, 6), "0");
        assert_eq!(format_sig(1.0, 6), "1");
        assert_eq!(format_sig(0.1234567, 6), "0.123457");
        assert_eq!(format_sig(-12345.678, 6), "-12345.7");
        assert_eq!(format_sig(123456789.0, 6), "1.23457e8");
        assert_eq!(format_sig(0.000012345678, 6), "1.23457e-5");
        assert_eq!(format_sig(9.9999996, 6), "10");
        assert_eq!(format_sig(0.5, 6), "0.5");
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_well_formed_fixture() {
        let d = tempfile::tempdir().unwrap();
        let s = write(d.path(), "s.csv", "area_id,weight,welfare,x1\na,2,10,1\na,2,20,2\nb,1,5,0.5\n");
        let c = write(d.path(), "c.csv", "area_id,x1\na,1\na,2\nb,3\nc,4\nd,5\n");
        let z = write(d.path(), "z.csv", "area_id,N,z1,z2\na,2,1,1.5\nb,1,1,3\nc,1,1,4\nd,1,1,5\n");
        let loaded = load_datasets(&s, &c, Some(&z), &WelfareTransform::default()).unwrap();
        assert_eq!(loaded.survey.len(), 3);
        assert_eq!(loaded.out_of_sample, vec![AreaId::from("c"), AreaId::from("d")]);
        assert_eq!(loaded.out_of_sample.len(), loaded.census.area_count() - loaded.survey.area_count());
        assert_eq!(loaded.census.aux_for(&"b".into()), vec![1.0, 3.0]);
        let y = loaded.survey.area_records(&"b".into()).next().unwrap().y;
        assert!((y - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn survey_area_missing_from_census_is_named() {
        let d = tempfile::tempdir().unwrap();
        let s = write(d.path(), "s.csv", "area_id,weight,y,x1\na,1,1,1\nghost,1,1,1\n");
        let c = write(d.path(), "c.csv", "area_id,x1\na,1\n");
        let e = load_datasets(&s, &c, None, &WelfareTransform::default()).unwrap_err();
        assert!(e.to_string().contains("ghost"), "{e}");
    }

    #[test]
    fn covariate_count_mismatch_names_columns() {
        let d = tempfile::tempdir().unwrap();
        let s = write(d.path(), "s.csv", "area_id,weight,y,x1,x2\na,1,1,1,2\n");
        let c = write(d.path(), "c.csv", "area_id,x1\na,1\n");
        let e = load_datasets(&s, &c, None, &WelfareTransform::default()).unwrap_err();
        assert!(e.to_string().contains("x1..x2") && e.to_string().contains("x1..x1"), "{e}");
    }

    #[test]
    fn parse_errors_carry_line_and_column() {
        let d = tempfile::tempdir().unwrap();
        let s = write(d.path(), "s.csv", "area_id,weight,y,x1\na,1,1,1\na,1,oops,1\n");
        let e = read_survey(&s, &WelfareTransform::default()).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains(":3:") && msg.contains("'y'") && msg.contains("oops"), "{msg}");

        let s = write(d.path(), "s2.csv", "area_id,weight,y,x1\na,1,1\n");
        let e = read_survey(&s, &WelfareTransform::default()).unwrap_err();
        assert!(e.to_string().contains(":2:"), "{e}");

        let s = write(d.path(), "s3.csv", "area,weight,income,x2\n");
        let msg = read_survey(&s, &WelfareTransform::default()).unwrap_err().to_string();
        assert!(msg.contains("'area'") && msg.contains("'income'") && msg.contains("'x1'"), "{msg}");

        let s = write(d.path(), "s4.csv", "area_id,weight,welfare,x1\na,1,-3,1\n");
        let msg = read_survey(&s, &WelfareTransform::default()).unwrap_err().to_string();
        assert!(msg.contains(":2:") && msg.contains("welfare"), "{msg}");
    }

    #[test]
    fn estimates_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("out/ebp.csv");
        let est = vec![
            FgtEstimate::point("a".into(), 0, 0.25).with_mspe(0.0004),
            FgtEstimate::point("a".into(), 1, 0.0).with_mspe(0.0),
        ];
        write_estimates_csv(&p, &est, None).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "area_id,alpha,estimate,mspe,cv\na,0,0.25,0.0004,0.08\na,1,0,0,\n");
        let back = read_estimates_csv(&p).unwrap();
        assert_eq!(back[0].cv, Some(0.08));
        assert_eq!(back[1].cv, None);
    }

    #[test]
    fn manifest_hash_depends_on_config() {
        let mut c = BTreeMap::new();
        c.insert("seed".to_string(), "1".to_string());
        let a = RunManifest::new("fit", Some(1), c.clone(), vec![]);
        assert_eq!(a.config_hash.len(), 64);
        c.insert("seed".to_string(), "2".to_string());
        assert_ne!(a.config_hash, RunManifest::new("fit", Some(2), c, vec![]).config_hash);
    }
}
