//! CSV layout shared by every matrix on disk: one header row of column
//! labels, then one row per matrix row. Floats are written with 17
//! significant digits so they read back bit-for-bit.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use msfa::model::{center_columns, StudyData};
use nalgebra::DMatrix;

use crate::error::{CliError, Result};

pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_matrix_csv(path: &Path, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    if header.len() != m.ncols() {
        return Err(CliError::input(format!(
            "{}: {} labels for {} columns",
            path.display(),
            header.len(),
            m.ncols()
        )));
    }
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let io = |e: csv::Error| CliError::io(path, e.into());
    w.write_record(header).map_err(io)?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|&v| format_f64(v))).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads a header row plus numeric rows. Errors name the offending line
/// (the header is line 1) and column.
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| CliError::input(format!("{}: unreadable header: {e}", path.display())))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(CliError::input(format!("{}: empty header row", path.display())));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, record) in r.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| CliError::input(format!("{}: line {line}: {e}", path.display())))?;
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                CliError::input(format!(
                    "{}: line {line}, column {} ({}): `{cell}` is not a number",
                    path.display(),
                    j + 1,
                    header[j]
                ))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    Ok((header.clone(), DMatrix::from_row_slice(rows, header.len(), &values)))
}

fn check_unique(path: &Path, names: &[String]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(CliError::input(format!("{}: duplicate variable `{n}`", path.display())));
        }
    }
    Ok(())
}

/// Loads one CSV per study, aligns columns to the first study's order,
/// centers every column and applies the optional variance filter.
pub fn ingest(paths: &[PathBuf], filter_variance: Option<f64>) -> Result<Vec<StudyData>> {
    if paths.is_empty() {
        return Err(CliError::input("no study files given"));
    }
    let mut reference: Option<Vec<String>> = None;
    let mut raw = Vec::with_capacity(paths.len());
    for path in paths {
        let (names, x) = read_matrix_csv(path)?;
        check_unique(path, &names)?;
        let x = match &reference {
            None => {
                reference = Some(names);
                x
            }
            Some(reference) => align_columns(path, reference, &names, x)?,
        };
        raw.push(x);
    }
    let names = reference.expect("at least one study");
    let mut studies = Vec::with_capacity(raw.len());
    for (s, mut x) in raw.into_iter().enumerate() {
        center_columns(&mut x);
        for (j, col) in x.column_iter().enumerate() {
            if col.iter().all(|&v| v == 0.0) {
                log::warn!("{}: variable `{}` has zero variance", paths[s].display(), names[j]);
            }
        }
        studies.push(StudyData::new(s, x, names.clone()).map_err(|e| {
            CliError::input(format!("{}: {e}", paths[s].display()))
        })?);
    }
    let studies = match filter_variance {
        Some(fraction) => filter_by_variance(studies, fraction)?,
        None => studies,
    };
    let p = studies[0].p();
    let sizes: Vec<usize> = studies.iter().map(StudyData::n).collect();
    log::info!("ingested S = {}, P = {p}, n = {sizes:?}", studies.len());
    Ok(studies)
}

fn align_columns(path: &Path, reference: &[String], names: &[String], x: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if names == reference {
        return Ok(x);
    }
    let a: BTreeSet<&String> = reference.iter().collect();
    let b: BTreeSet<&String> = names.iter().collect();
    if a != b {
        let diff: Vec<&str> = a.symmetric_difference(&b).map(|s| s.as_str()).collect();
        return Err(CliError::input(format!(
            "{}: variable names differ from the first study; symmetric difference: {}",
            path.display(),
            diff.join(", ")
        )));
    }
    log::warn!("{}: columns reordered to match the first study", path.display());
    let index: HashMap<&String, usize> = names.iter().enumerate().map(|(i, n)| (n, i)).collect();
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for (j, name) in reference.iter().enumerate() {
        out.set_column(j, &x.column(index[name]));
    }
    Ok(out)
}

/// Keeps the `fraction` of variables with the largest pooled variance,
/// in their original order.
pub fn filter_by_variance(studies: Vec<StudyData>, fraction: f64) -> Result<Vec<StudyData>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CliError::input(format!("filter_variance must be in (0, 1], got {fraction}")));
    }
    let p = studies[0].p();
    let total_n: usize = studies.iter().map(StudyData::n).sum();
    let mut pooled = vec![0.0; p];
    for s in &studies {
        for (j, col) in s.x().column_iter().enumerate() {
            pooled[j] += col.norm_squared();
        }
    }
    let keep = ((fraction * p as f64).ceil() as usize).clamp(1, p);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| pooled[b].total_cmp(&pooled[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..keep].to_vec();
    kept.sort_unstable();
    log::info!("variance filter keeps {keep} of {p} variables (pooled n = {total_n})");
    studies
        .into_iter()
        .map(|s| {
            let x = s.x().select_columns(&kept);
            let names = kept.iter().map(|&j| s.var_names()[j].clone()).collect();
            StudyData::new(s.id(), x, names).map_err(CliError::from)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
        p
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -1.0 / 3.0, 1e-300, 2.0f64.sqrt(), 123456.789, -0.0]);
        let names: Vec<String> = ["a", "b,c", "d"].map(String::from).to_vec();
        let p = dir.path().join("m.csv");
        write_matrix_csv(&p, &names, &m).unwrap();
        let (h, back) = read_matrix_csv(&p).unwrap();
        assert_eq!(h, names);
        assert_eq!(back, m);
    }

    #[test]
    fn reorders_columns_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "x,y,z\n1,2,3\n3,4,5\n");
        let b = write(dir.path(), "b.csv", "z,x,y\n30,10,20\n50,30,40\n");
        let s = ingest(&[a, b], None).unwrap();
        assert_eq!(s[1].var_names(), ["x", "y", "z"]);
        assert_eq!(s[1].x(), &DMatrix::from_row_slice(2, 3, &[-10.0, -10.0, -10.0, 10.0, 10.0, 10.0]));
    }

    #[test]
    fn constant_column_is_centered_to_zero() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "x,y\n1,7\n3,7\n5,7\n");
        let s = ingest(&[a], None).unwrap();
        assert!(s[0].x().column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn name_mismatch_lists_symmetric_difference() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "x,y,z\n1,2,3\n3,4,5\n");
        let b = write(dir.path(), "b.csv", "x,y,w\n1,2,3\n3,4,5\n");
        let err = ingest(&[a, b], None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let msg = err.to_string();
        assert!(msg.contains("w, z"), "{msg}");
    }

    #[test]
    fn non_numeric_cell_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "x,y\n1,2\n3,abc\n");
        let msg = ingest(&[a], None).unwrap_err().to_string();
        assert!(msg.contains("line 3, column 2 (y)"), "{msg}");
    }

    #[test]
    fn variance_filter_keeps_top_half() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "a,b,c,d\n0,0,0,0\n1,10,2,-5\n");
        let s = ingest(&[a], Some(0.5)).unwrap();
        assert_eq!(s[0].var_names(), ["b", "d"]);
    }
}
