//! Labeled-matrix CSV files: a key column followed by one column per variable.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: DMatrix<f64>,
}

impl LabeledMatrix {
    /// Restrict to `rows` (in that order). Missing labels are an error.
    pub fn select_rows(&self, rows: &[String]) -> Result<LabeledMatrix> {
        let idx = rows
            .iter()
            .map(|r| {
                self.row_labels
                    .iter()
                    .position(|l| l == r)
                    .ok_or_else(|| Error::KeyMismatch(vec![r.clone()]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledMatrix {
            row_labels: rows.to_vec(),
            col_labels: self.col_labels.clone(),
            values: crate::linalg::select_rows(&self.values, &idx),
        })
    }
}

pub fn read_labeled_matrix(path: impl AsRef<Path>) -> Result<LabeledMatrix> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_labeled_matrix(file)
}

pub fn parse_labeled_matrix<R: std::io::Read>(reader: R) -> Result<LabeledMatrix> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Record {
            row: 0,
            reason: "header needs a key column and at least one value column".into(),
        });
    }
    let col_labels: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut row_labels = Vec::new();
    let mut data = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if rec.len() != headers.len() {
            return Err(Error::Record {
                row,
                reason: format!("{} fields, expected {}", rec.len(), headers.len()),
            });
        }
        row_labels.push(rec[0].to_string());
        for (j, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Record {
                row,
                reason: format!("column `{}`: cannot parse `{field}`", col_labels[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Record {
                    row,
                    reason: format!("column `{}` is not finite", col_labels[j]),
                });
            }
            data.push(v);
        }
    }
    let values = DMatrix::from_row_slice(row_labels.len(), col_labels.len(), &data);
    Ok(LabeledMatrix {
        row_labels,
        col_labels,
        values,
    })
}

pub fn write_labeled_matrix(
    path: impl AsRef<Path>,
    key: &str,
    rows: &[String],
    cols: &[String],
    values: &DMatrix<f64>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![key.to_string()];
    header.extend(cols.iter().cloned());
    w.write_record(&header)?;
    for (i, label) in rows.iter().enumerate() {
        let mut rec = vec![label.clone()];
        rec.extend((0..values.ncols()).map(|j| values[(i, j)].to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let values = DMatrix::from_row_slice(2, 2, &[0.1, -2.5e-7, 1.0 / 3.0, 4.0]);
        let rows = vec!["X".to_string(), "Y".to_string()];
        let cols = vec!["a".to_string(), "b".to_string()];
        write_labeled_matrix(&path, "entity", &rows, &cols, &values).unwrap();
        let back = read_labeled_matrix(&path).unwrap();
        assert_eq!(back.values, values);
        assert_eq!(back.row_labels, rows);
        assert_eq!(back.col_labels, cols);
    }

    #[test]
    fn bad_cell_reports_row() {
        let err = parse_labeled_matrix("entity,a\nX,1\nY,oops\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Record { row: 2, .. }));
    }
}
