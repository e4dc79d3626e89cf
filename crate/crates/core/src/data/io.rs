use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{LongitudinalDataset, SubjectRecord};
use crate::error::{Error, Result};

/// Maps CSV columns onto model roles.
///
/// The `*_intercept` flags prepend a constant column of ones to the matching
/// design matrix; the column is synthesized and never read from the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub subject: String,
    pub time: String,
    pub response: String,
    #[serde(default)]
    pub w: Vec<String>,
    #[serde(default)]
    pub x: Vec<String>,
    #[serde(default)]
    pub z: Vec<String>,
    #[serde(default)]
    pub w_intercept: bool,
    #[serde(default)]
    pub x_intercept: bool,
    #[serde(default)]
    pub z_intercept: bool,
}

impl ColumnSchema {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn covariate_columns(&self) -> impl Iterator<Item = &String> {
        self.w.iter().chain(&self.x).chain(&self.z)
    }
}

pub fn load_csv(path: &Path, schema: &ColumnSchema) -> Result<LongitudinalDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header")))
}

fn parse_f64(field: &str, column: &str, line: u64) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        Error::validation(format!("line {line}: column '{column}' value '{field}' is not a number"))
    })
}

struct PendingSubject {
    id: String,
    rows: Vec<(f64, u8, Vec<f64>)>,
}

/// Reads a CSV with a header row, grouping rows by subject (in order of first
/// appearance) and sorting each subject's rows by time.
pub fn read_csv<R: Read>(reader: R, schema: &ColumnSchema) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let subject_col = column_index(&headers, &schema.subject)?;
    let time_col = column_index(&headers, &schema.time)?;
    let response_col = column_index(&headers, &schema.response)?;
    let cov_cols: Vec<(usize, &String)> = schema
        .covariate_columns()
        .map(|name| column_index(&headers, name).map(|i| (i, name)))
        .collect::<Result<_>>()?;

    let mut order: HashMap<String, usize> = HashMap::new();
    let mut pending: Vec<PendingSubject> = Vec::new();
    for (row_no, record) in rdr.records().enumerate() {
        let record = record?;
        let line = row_no as u64 + 2;
        let get = |i: usize| record.get(i).unwrap_or("");
        let id = get(subject_col).to_string();
        let t = parse_f64(get(time_col), &schema.time, line)?;
        let yv = parse_f64(get(response_col), &schema.response, line)?;
        let y = if yv == 0.0 {
            0
        } else if yv == 1.0 {
            1
        } else {
            return Err(Error::validation(format!(
                "line {line}: response '{}' is not 0 or 1",
                get(response_col)
            )));
        };
        let covs = cov_cols
            .iter()
            .map(|&(i, name)| parse_f64(get(i), name, line))
            .collect::<Result<Vec<_>>>()?;
        let slot = *order.entry(id.clone()).or_insert_with(|| {
            pending.push(PendingSubject { id, rows: Vec::new() });
            pending.len() - 1
        });
        pending[slot].rows.push((t, y, covs));
    }
    if pending.is_empty() {
        return Err(Error::validation("CSV contains no observations"));
    }

    let (nw, nx, nz) = (schema.w.len(), schema.x.len(), schema.z.len());
    let p = nw + schema.w_intercept as usize;
    let q = nx + schema.x_intercept as usize;
    let r = nz + schema.z_intercept as usize;
    let subjects = pending
        .into_iter()
        .map(|mut s| {
            s.rows.sort_by(|a, b| a.0.total_cmp(&b.0));
            let n = s.rows.len();
            let block = |offset: usize, width: usize, intercept: bool| {
                let cols = width + intercept as usize;
                DMatrix::from_fn(n, cols, |i, j| {
                    if intercept && j == 0 {
                        1.0
                    } else {
                        s.rows[i].2[offset + j - intercept as usize]
                    }
                })
            };
            let w = block(0, nw, schema.w_intercept);
            let x = block(nw, nx, schema.x_intercept);
            let z = block(nw + nx, nz, schema.z_intercept);
            debug_assert_eq!((w.ncols(), x.ncols(), z.ncols()), (p, q, r));
            SubjectRecord {
                id: s.id,
                times: s.rows.iter().map(|r| r.0).collect(),
                y: s.rows.iter().map(|r| r.1).collect(),
                w,
                x,
                z,
            }
        })
        .collect();
    LongitudinalDataset::new(subjects)
}

/// Writes the dataset in the layout `read_csv` expects under `schema`.
///
/// Intercept columns are omitted; every named column must be unique.
pub fn write_csv<W: Write>(dataset: &LongitudinalDataset, schema: &ColumnSchema, out: W) -> Result<()> {
    let dims = dataset.dims();
    let expect = (
        schema.w.len() + schema.w_intercept as usize,
        schema.x.len() + schema.x_intercept as usize,
        schema.z.len() + schema.z_intercept as usize,
    );
    if expect != (dims.p, dims.q, dims.r) {
        return Err(Error::Schema(format!(
            "schema describes (p, q, r) = {expect:?} but dataset has ({}, {}, {})",
            dims.p, dims.q, dims.r
        )));
    }
    let mut names = vec![schema.subject.clone(), schema.time.clone(), schema.response.clone()];
    names.extend(schema.covariate_columns().cloned());
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
        return Err(Error::Schema(format!("column '{dup}' appears twice")));
    }

    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(&names)?;
    for s in dataset.subjects() {
        for j in 0..s.n_obs() {
            let mut row = vec![s.id.clone(), s.times[j].to_string(), s.y[j].to_string()];
            let skip = |m: &DMatrix<f64>, intercept: bool| -> Vec<String> {
                (intercept as usize..m.ncols()).map(|c| m[(j, c)].to_string()).collect()
            };
            row.extend(skip(&s.w, schema.w_intercept));
            row.extend(skip(&s.x, schema.x_intercept));
            row.extend(skip(&s.z, schema.z_intercept));
            wtr.write_record(&row)?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
