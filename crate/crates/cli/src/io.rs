//! Landmark CSV ingestion, Θ files and the shapes JSON contract.

use lkshape::shape::{svd_shape, LandmarkMatrix, ShapeRecord, ShapeSample, WhitenConfig};
use lkshape::{Error, Result};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

const COLUMNS: [&str; 5] = ["specimen_id", "group", "landmark_index", "dim_index", "value"];

/// One parsed specimen.
#[derive(Debug, Clone, PartialEq)]
pub struct Specimen {
    pub id: String,
    pub group: String,
    pub landmarks: LandmarkMatrix,
}

/// A parsed landmark CSV. Specimens are ordered by id, so the row order
/// of the file does not matter.
#[derive(Debug, Clone)]
pub struct DatasetFile {
    pub path: PathBuf,
    pub n_landmarks: usize,
    pub dim: usize,
    pub specimens: Vec<Specimen>,
}

impl DatasetFile {
    /// group → specimen ids, both sorted.
    pub fn groups(&self) -> BTreeMap<String, Vec<String>> {
        let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for s in &self.specimens {
            map.entry(s.group.clone()).or_default().push(s.id.clone());
        }
        map
    }

    pub fn specimen(&self, id: &str) -> Option<&Specimen> {
        self.specimens.iter().find(|s| s.id == id)
    }
}

#[derive(Default)]
struct Pending {
    group: String,
    first_line: usize,
    cells: BTreeMap<(usize, usize), (f64, usize)>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => parse_err(line, format!("{kind:?}")),
    }
}

pub fn parse_dataset(path: &Path) -> Result<DatasetFile> {
    let text = std::fs::read_to_string(path)?;
    let mut ds = parse_dataset_str(&text)?;
    ds.path = path.to_path_buf();
    Ok(ds)
}

pub fn parse_dataset_str(text: &str) -> Result<DatasetFile> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(csv_err)?.clone();
    let mut pos = [0usize; 5];
    for (slot, name) in pos.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column '{name}'")))?;
    }

    let mut pending: BTreeMap<String, Pending> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| record.get(pos[i]).unwrap_or("");
        let id = field(0);
        if id.is_empty() {
            return Err(parse_err(line, "empty specimen_id"));
        }
        let index = |i: usize| -> Result<usize> {
            match field(i).parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v),
                _ => Err(parse_err(
                    line,
                    format!("{} must be a positive integer, got '{}'", COLUMNS[i], field(i)),
                )),
            }
        };
        let landmark = index(2)?;
        let dim = index(3)?;
        let value: f64 = field(4)
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| parse_err(line, format!("non-numeric value '{}'", field(4))))?;

        let entry = pending.entry(id.to_string()).or_insert_with(|| Pending {
            group: field(1).to_string(),
            first_line: line,
            ..Default::default()
        });
        if entry.group != field(1) {
            return Err(parse_err(
                line,
                format!(
                    "specimen '{id}' listed in groups '{}' and '{}'",
                    entry.group,
                    field(1)
                ),
            ));
        }
        if let Some((_, prev)) = entry.cells.insert((landmark, dim), (value, line)) {
            return Err(parse_err(
                line,
                format!(
                    "duplicate cell (landmark {landmark}, dim {dim}) for specimen '{id}', first seen on line {prev}"
                ),
            ));
        }
    }
    if pending.is_empty() {
        return Err(parse_err(1, "no data rows"));
    }

    let extent = |p: &Pending| {
        let n = p.cells.keys().map(|k| k.0).max().unwrap_or(0);
        let k = p.cells.keys().map(|k| k.1).max().unwrap_or(0);
        (n, k)
    };
    let (first_id, first) = pending.iter().next().expect("non-empty");
    let (n_landmarks, dim) = extent(first);
    let mut specimens = Vec::with_capacity(pending.len());
    for (id, p) in &pending {
        let (n, k) = extent(p);
        if (n, k) != (n_landmarks, dim) {
            return Err(parse_err(
                p.first_line,
                format!(
                    "inconsistent dims: specimen '{id}' spans {n}x{k} but '{first_id}' spans {n_landmarks}x{dim}"
                ),
            ));
        }
        let mut data = DMatrix::zeros(n, k);
        for i in 1..=n {
            for j in 1..=k {
                match p.cells.get(&(i, j)) {
                    Some((v, _)) => data[(i - 1, j - 1)] = *v,
                    None => {
                        return Err(parse_err(
                            p.first_line,
                            format!("specimen '{id}' is missing cell (landmark {i}, dim {j})"),
                        ))
                    }
                }
            }
        }
        let landmarks =
            LandmarkMatrix::new(data).map_err(|e| parse_err(p.first_line, format!("specimen '{id}': {e}")))?;
        specimens.push(Specimen {
            id: id.clone(),
            group: p.group.clone(),
            landmarks,
        });
    }
    Ok(DatasetFile {
        path: PathBuf::new(),
        n_landmarks,
        dim,
        specimens,
    })
}

/// Writes specimens in the landmark CSV layout.
pub fn write_dataset(specimens: &[Specimen]) -> String {
    let mut out = COLUMNS.join(",");
    out.push('\n');
    for s in specimens {
        let x = s.landmarks.data();
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                out.push_str(&format!(
                    "{},{},{},{},{:.15e}\n",
                    s.id,
                    s.group,
                    i + 1,
                    j + 1,
                    x[(i, j)]
                ));
            }
        }
    }
    out
}

/// K×K Θ from a header-less CSV; symmetry and positive definiteness are
/// checked here.
pub fn parse_theta(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    parse_theta_str(&text)
}

pub fn parse_theta_str(text: &str) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let row = record
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("non-numeric Θ entry '{f}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let k = rows.len();
    if k == 0 || rows.iter().any(|r| r.len() != k) {
        return Err(Error::Config(format!(
            "Θ must be a square matrix, got {k} rows of lengths {:?}",
            rows.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    let theta = DMatrix::from_fn(k, k, |i, j| rows[i][j]);
    WhitenConfig::with_theta(theta.clone()).map_err(|e| Error::Config(format!("Θ: {e}")))?;
    Ok(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeFlags {
    /// Two singular values (nearly) coincide, so V and H are not unique.
    pub near_tie: bool,
    pub degenerate: bool,
}

/// One specimen in the shapes file. `shape` is absent when extraction
/// failed, in which case `error` says why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeEntry {
    pub specimen: String,
    pub group: String,
    pub shape: Option<ShapeRecord>,
    pub flags: ShapeFlags,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapesFile {
    pub schema_version: u32,
    pub n_landmarks: usize,
    pub dim: usize,
    /// Θ used for whitening; absent means identity.
    pub theta: Option<Vec<Vec<f64>>>,
    pub specimens: Vec<ShapeEntry>,
}

impl ShapesFile {
    pub fn extract(ds: &DatasetFile, theta: Option<&DMatrix<f64>>) -> Result<Self> {
        let cfg = match theta {
            Some(t) => {
                if t.nrows() != ds.dim {
                    return Err(Error::Config(format!(
                        "Θ is {}x{} but the dataset has K = {}",
                        t.nrows(),
                        t.ncols(),
                        ds.dim
                    )));
                }
                WhitenConfig::with_theta(t.clone()).map_err(|e| Error::Config(format!("Θ: {e}")))?
            }
            None => WhitenConfig::identity(),
        };
        let specimens = ds
            .specimens
            .par_iter()
            .map(|s| match svd_shape(&s.landmarks, &cfg) {
                Ok(d) => ShapeEntry {
                    specimen: s.id.clone(),
                    group: s.group.clone(),
                    shape: Some(ShapeRecord::from(&d)),
                    flags: ShapeFlags {
                        near_tie: d.near_tie,
                        degenerate: false,
                    },
                    error: None,
                },
                Err(e) => ShapeEntry {
                    specimen: s.id.clone(),
                    group: s.group.clone(),
                    shape: None,
                    flags: ShapeFlags {
                        near_tie: false,
                        degenerate: matches!(e, Error::DegenerateFigure),
                    },
                    error: Some(e.to_string()),
                },
            })
            .collect();
        Ok(ShapesFile {
            schema_version: SCHEMA_VERSION,
            n_landmarks: ds.n_landmarks,
            dim: ds.dim,
            theta: theta.map(|t| {
                (0..t.nrows())
                    .map(|i| t.row(i).iter().copied().collect())
                    .collect()
            }),
            specimens,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ShapesFile = serde_json::from_str(text)
            .map_err(|e| parse_err(e.line(), format!("shapes file: {e}")))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported shapes schema_version {} (expected {SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.specimens.iter().map(|s| s.group.clone()).collect();
        g.sort();
        g.dedup();
        g
    }

    /// Usable shapes, optionally restricted to one group, plus the ids of
    /// specimens that were skipped because extraction failed.
    pub fn sample(&self, group: Option<&str>) -> Result<(ShapeSample, Vec<String>)> {
        let mut sample = ShapeSample::new(self.n_landmarks, self.dim);
        let mut skipped = Vec::new();
        for e in &self.specimens {
            if group.is_some_and(|g| g != e.group) {
                continue;
            }
            match &e.shape {
                Some(rec) => {
                    let d = rec
                        .to_decomposition()
                        .map_err(|err| err.for_specimen(&e.specimen))?;
                    sample
                        .push(d, Some(e.specimen.clone()))
                        .map_err(|err| err.for_specimen(&e.specimen))?;
                }
                None => skipped.push(e.specimen.clone()),
            }
        }
        if sample.is_empty() {
            return Err(Error::Config(match group {
                Some(g) => format!("group '{g}' has no usable shapes"),
                None => "no usable shapes".into(),
            }));
        }
        Ok((sample, skipped))
    }
}

/// Loads either a landmark CSV (extracting shapes on the fly) or a shapes
/// JSON written by `extract`.
pub fn load_shapes(path: &Path, theta: Option<&DMatrix<f64>>) -> Result<ShapesFile> {
    let text = std::fs::read_to_string(path)?;
    if text.trim_start().starts_with('{') {
        if theta.is_some() {
            return Err(Error::Config(
                "--theta applies to landmark CSV input, not to an extracted shapes file".into(),
            ));
        }
        ShapesFile::from_json(&text)
    } else {
        let mut ds = parse_dataset_str(&text)?;
        ds.path = path.to_path_buf();
        ShapesFile::extract(&ds, theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = "specimen_id,group,landmark_index,dim_index,value\n\
        a,g,1,1,0\na,g,1,2,0\na,g,2,1,1\na,g,2,2,0\na,g,3,1,0\na,g,3,2,2\n";

    #[test]
    fn single_specimen() {
        let ds = parse_dataset_str(ONE).unwrap();
        assert_eq!((ds.n_landmarks, ds.dim, ds.specimens.len()), (3, 2, 1));
        assert_eq!(ds.specimens[0].landmarks.data()[(2, 1)], 2.0);
    }

    #[test]
    fn row_order_irrelevant() {
        let mut lines: Vec<&str> = ONE.lines().collect();
        lines[1..].reverse();
        let ds = parse_dataset_str(&lines.join("\n")).unwrap();
        assert_eq!(
            ds.specimens[0].landmarks,
            parse_dataset_str(ONE).unwrap().specimens[0].landmarks
        );
    }

    #[test]
    fn missing_cell_named() {
        let text = ONE.replace("a,g,2,1,1\n", "");
        let err = parse_dataset_str(&text).unwrap_err().to_string();
        assert!(err.contains("'a'") && err.contains("landmark 2, dim 1"), "{err}");
        assert!(err.starts_with("line 2"), "{err}");
    }

    #[test]
    fn duplicate_and_bad_value() {
        let dup = format!("{ONE}a,g,1,1,5\n");
        let err = parse_dataset_str(&dup).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 8, .. }), "{err}");
        let bad = ONE.replace("a,g,3,2,2", "a,g,3,2,x");
        assert!(matches!(
            parse_dataset_str(&bad).unwrap_err(),
            Error::Parse { line: 7, .. }
        ));
    }

    #[test]
    fn inconsistent_dims() {
        let text = format!("{ONE}b,g,1,1,0\nb,g,1,2,0\nb,g,2,1,1\nb,g,2,2,0\n");
        let err = parse_dataset_str(&text).unwrap_err().to_string();
        assert!(err.contains("inconsistent dims"), "{err}");
    }

    #[test]
    fn theta_checks() {
        assert!(parse_theta_str("2,0.5\n0.5,1\n").is_ok());
        assert!(parse_theta_str("1,2\n2,1\n").unwrap_err().is_input_error());
        assert!(parse_theta_str("1,0\n").is_err());
    }
}
