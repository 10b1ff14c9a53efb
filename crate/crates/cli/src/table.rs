//! CSV and JSONL readers/writers for cohort files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use oncoclip::train::{Phase, PhaseSet};
use serde::Deserialize;

use crate::error::{CliError, Result};

/// A CSV file with a header row, all cells kept as text.
#[derive(Debug, Clone)]
pub struct Table {
    pub path: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let csv_err = |source| CliError::Csv { path: name.clone(), source };
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
        let headers = rdr.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_owned).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()
            .map_err(csv_err)?;
        if rows.is_empty() {
            return Err(CliError::data(format!("{name}: no data rows")));
        }
        Ok(Self { path: name, headers, rows })
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::data(format!("{}: missing column `{name}` (have {})", self.path, self.headers.join(","))))
    }

    pub fn strings(&self, name: &str) -> Result<Vec<&str>> {
        let c = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[c].as_str()).collect())
    }

    pub fn floats(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column_index(name)?;
        self.rows.iter().enumerate().map(|(i, r)| parse_f64(&r[c], &self.path, i, name)).collect()
    }

    pub fn bools(&self, name: &str) -> Result<Vec<bool>> {
        let c = self.column_index(name)?;
        self.rows.iter().enumerate().map(|(i, r)| parse_bool(&r[c], &self.path, i, name)).collect()
    }

    pub fn ids(&self) -> Result<Vec<String>> {
        Ok(self.strings("id")?.into_iter().map(str::to_owned).collect())
    }

    /// Values keyed by id; duplicate ids are rejected.
    pub fn by_id(&self, name: &str) -> Result<HashMap<String, String>> {
        let (ic, vc) = (self.column_index("id")?, self.column_index(name)?);
        let mut out = HashMap::with_capacity(self.rows.len());
        for r in &self.rows {
            if out.insert(r[ic].clone(), r[vc].clone()).is_some() {
                return Err(CliError::data(format!("{}: duplicate id `{}`", self.path, r[ic])));
            }
        }
        Ok(out)
    }

    /// Numeric matrix from the given columns.
    pub fn matrix(&self, columns: &[String]) -> Result<Array2<f64>> {
        let idx = columns.iter().map(|c| self.column_index(c)).collect::<Result<Vec<_>>>()?;
        let mut m = Array2::zeros((self.rows.len(), idx.len()));
        for (i, r) in self.rows.iter().enumerate() {
            for (j, (&c, name)) in idx.iter().zip(columns).enumerate() {
                m[[i, j]] = parse_f64(&r[c], &self.path, i, name)?;
            }
        }
        Ok(m)
    }

    /// Every column after `skip`.
    pub fn value_columns(&self, skip: &[&str]) -> Vec<String> {
        self.headers.iter().filter(|h| !skip.contains(&h.as_str())).cloned().collect()
    }
}

fn parse_f64(cell: &str, path: &str, row: usize, col: &str) -> Result<f64> {
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| CliError::data(format!("{path}: row {}: `{col}` is not a finite number: {cell:?}", row + 1)))
}

pub fn parse_bool(cell: &str, path: &str, row: usize, col: &str) -> Result<bool> {
    match cell {
        "1" | "true" | "True" | "TRUE" => Ok(true),
        "0" | "false" | "False" | "FALSE" => Ok(false),
        _ => Err(CliError::data(format!("{path}: row {}: `{col}` is not a 0/1 flag: {cell:?}", row + 1))),
    }
}

/// `id,d0..` style file: ids plus every other column as a matrix.
pub fn read_matrix(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let t = Table::read(path)?;
    let cols = t.value_columns(&["id"]);
    if cols.is_empty() {
        return Err(CliError::data(format!("{}: no value columns", t.path)));
    }
    Ok((t.ids()?, t.matrix(&cols)?))
}

/// `id,phase,d0..` file grouped by patient, in first-appearance order.
pub fn read_phases(path: &Path) -> Result<Vec<(String, PhaseSet)>> {
    let t = Table::read(path)?;
    let cols = t.value_columns(&["id", "phase"]);
    let m = t.matrix(&cols)?;
    let (ids, phases) = (t.strings("id")?, t.strings("phase")?);
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<&str, BTreeMap<Phase, Vec<f64>>> = HashMap::new();
    for (i, (&id, &ph)) in ids.iter().zip(&phases).enumerate() {
        let phase: Phase = ph.parse()?;
        let entry = groups.entry(id).or_insert_with(|| {
            order.push(id.to_owned());
            BTreeMap::new()
        });
        if entry.insert(phase, m.row(i).to_vec()).is_some() {
            return Err(CliError::data(format!("{}: patient `{id}` repeats phase {ph}", t.path)));
        }
    }
    order
        .into_iter()
        .map(|id| {
            let set = PhaseSet::new(groups.remove(id.as_str()).expect("grouped"))
                .map_err(|e| CliError::data(format!("{}: patient `{id}`: {e}", t.path)))?;
            Ok((id, set))
        })
        .collect()
}

/// Model inputs from either a plain matrix file or a phase file; phase
/// files contribute each patient's preferred phase.
pub fn read_inputs(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let t = Table::read(path)?;
    if t.headers.get(1).map(String::as_str) != Some("phase") {
        return read_matrix(path);
    }
    let sets = read_phases(path)?;
    let width = sets[0].1.input_len();
    let mut x = Array2::zeros((sets.len(), width));
    for (mut row, (_, s)) in x.rows_mut().into_iter().zip(&sets) {
        row.assign(&ndarray::ArrayView1::from(s.preferred().1));
    }
    Ok((sets.into_iter().map(|(id, _)| id).collect(), x))
}

/// Looks up `ids` in an id-keyed column.
pub fn align<'a>(ids: &[String], values: &'a HashMap<String, String>, what: &str) -> Result<Vec<&'a str>> {
    ids.iter()
        .map(|id| values.get(id).map(String::as_str).ok_or_else(|| CliError::data(format!("no {what} for id `{id}`"))))
        .collect()
}

#[derive(Debug, Deserialize)]
pub struct TokenLine {
    pub id: String,
    pub versions: Vec<Vec<usize>>,
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::data(format!("{}: line {}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn write_matrix(path: &Path, ids: &[String], prefix: &str, m: ArrayView2<f64>) -> Result<()> {
    let name = path.display().to_string();
    let csv_err = |source| CliError::Csv { path: name.clone(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["id".to_owned()];
    header.extend((0..m.ncols()).map(|j| format!("{prefix}{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for (id, row) in ids.iter().zip(m.rows()) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let name = path.display().to_string();
    let csv_err = |source| CliError::Csv { path: name.clone(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn flags() {
        assert!(parse_bool("1", "f", 0, "c").unwrap());
        assert!(!parse_bool("false", "f", 0, "c").unwrap());
        assert!(parse_bool("2", "f", 0, "c").is_err());
    }

    #[test]
    fn matrix_and_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.csv", "id,d0,d1\na,1,2\nb, 3 ,4.5\n");
        let (ids, m) = read_matrix(&p).unwrap();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(m, ndarray::array![[1.0, 2.0], [3.0, 4.5]]);
        let bad = write(dir.path(), "bad.csv", "id,d0\na,nan\n");
        assert!(matches!(read_matrix(&bad), Err(CliError::Data(_))));
        let dup = write(dir.path(), "dup.csv", "id,v\na,1\na,2\n");
        assert!(Table::read(&dup).unwrap().by_id("v").is_err());
        let empty = write(dir.path(), "empty.csv", "id,v\n");
        assert!(Table::read(&empty).is_err());
    }

    #[test]
    fn phases_group_by_patient() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "p.csv", "id,phase,d0\nb,V,1\na,A,2\nb,N,3\n");
        let sets = read_phases(&p).unwrap();
        assert_eq!(sets.iter().map(|s| s.0.as_str()).collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(sets[0].1.len(), 2);
        let (ids, x) = read_inputs(&p).unwrap();
        assert_eq!(ids, ["b", "a"]);
        assert_eq!(x, ndarray::array![[1.0], [2.0]]);
        let repeat = write(dir.path(), "r.csv", "id,phase,d0\na,A,1\na,A,2\n");
        assert!(read_phases(&repeat).is_err());
        let plain = write(dir.path(), "n.csv", "id,phase,d0\na,N,1\n");
        assert!(read_phases(&plain).is_err());
    }
}
