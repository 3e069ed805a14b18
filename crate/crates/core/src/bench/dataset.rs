use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::matrix::Matrix;
use crate::report::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Design,
    Label,
    Condition,
}

/// Column names per role, in matrix order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnNames {
    pub design: Vec<String>,
    pub label: Vec<String>,
    #[serde(default)]
    pub condition: Vec<String>,
}

/// Dataset schema file: column name to role. Within a role, columns keep
/// the order in which they appear in the CSV header.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub columns: BTreeMap<String, ColumnRole>,
    /// Labels are already standardized, so ensemble variance uses unit
    /// per-label variances.
    #[serde(default)]
    pub labels_prestandardized: bool,
}

impl DatasetSchema {
    pub fn from_names(names: &ColumnNames) -> Self {
        let mut columns = BTreeMap::new();
        for (list, role) in [
            (&names.design, ColumnRole::Design),
            (&names.label, ColumnRole::Label),
            (&names.condition, ColumnRole::Condition),
        ] {
            for n in list {
                columns.insert(n.clone(), role);
            }
        }
        Self {
            columns,
            labels_prestandardized: false,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

/// Per-column `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnRange {
    pub min: f64,
    pub max: f64,
}

impl ColumnRange {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (min, max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        Self { min, max }
    }

    /// Constant columns map to 0.
    #[inline]
    pub fn normalize(&self, v: f64) -> f64 {
        let span = self.max - self.min;
        if span > 0.0 {
            (v - self.min) / span
        } else {
            0.0
        }
    }

    #[inline]
    pub fn denormalize(&self, v: f64) -> f64 {
        let span = self.max - self.min;
        if span > 0.0 {
            self.min + v * span
        } else {
            self.min
        }
    }
}

/// Min-max statistics fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub design: Vec<ColumnRange>,
    pub label: Vec<ColumnRange>,
    #[serde(default)]
    pub condition: Vec<ColumnRange>,
}

fn fit_columns(m: &Matrix) -> Vec<ColumnRange> {
    (0..m.cols())
        .map(|c| ColumnRange::fit((0..m.rows()).map(|r| m.get(r, c))))
        .collect()
}

fn apply(m: &Matrix, ranges: &[ColumnRange], f: impl Fn(&ColumnRange, f64) -> f64) -> Result<Matrix> {
    check_dim("normalization column count", ranges.len(), m.cols())?;
    Ok(Matrix::from_fn(m.rows(), m.cols(), |r, c| f(&ranges[c], m.get(r, c))))
}

impl NormStats {
    pub fn fit(ds: &Dataset) -> Self {
        Self {
            design: fit_columns(&ds.x),
            label: fit_columns(&ds.y),
            condition: ds.cond.as_ref().map(fit_columns).unwrap_or_default(),
        }
    }

    pub fn normalize_design(&self, x: &Matrix) -> Result<Matrix> {
        apply(x, &self.design, ColumnRange::normalize)
    }

    pub fn denormalize_design(&self, x: &Matrix) -> Result<Matrix> {
        apply(x, &self.design, ColumnRange::denormalize)
    }

    pub fn normalize_labels(&self, y: &Matrix) -> Result<Matrix> {
        apply(y, &self.label, ColumnRange::normalize)
    }

    pub fn denormalize_labels(&self, y: &Matrix) -> Result<Matrix> {
        apply(y, &self.label, ColumnRange::denormalize)
    }

    pub fn normalize_cond(&self, c: &Matrix) -> Result<Matrix> {
        apply(c, &self.condition, ColumnRange::normalize)
    }

    pub fn denormalize_cond(&self, c: &Matrix) -> Result<Matrix> {
        apply(c, &self.condition, ColumnRange::denormalize)
    }
}

/// Paired designs and labels, optionally with conditioning columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
    pub cond: Option<Matrix>,
    pub columns: ColumnNames,
    /// Set when the matrices hold normalized values.
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Matrix, cond: Option<Matrix>, columns: ColumnNames) -> Result<Self> {
        check_dim("dataset label rows", x.rows(), y.rows())?;
        check_dim("dataset design names", x.cols(), columns.design.len())?;
        check_dim("dataset label names", y.cols(), columns.label.len())?;
        let cond = cond.filter(|c| c.cols() > 0);
        match &cond {
            Some(c) => {
                check_dim("dataset condition rows", x.rows(), c.rows())?;
                check_dim("dataset condition names", c.cols(), columns.condition.len())?;
            }
            None => check_dim("dataset condition names", 0, columns.condition.len())?,
        }
        Ok(Self {
            x,
            y,
            cond,
            columns,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn design_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn label_dim(&self) -> usize {
        self.y.cols()
    }

    pub fn cond_dim(&self) -> usize {
        self.cond.as_ref().map_or(0, Matrix::cols)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            y: self.y.select_rows(indices),
            cond: self.cond.as_ref().map(|c| c.select_rows(indices)),
            columns: self.columns.clone(),
            norm: self.norm.clone(),
        }
    }

    /// Normalizes with `stats` (usually fitted on the training split).
    pub fn normalize(&self, stats: &NormStats) -> Result<Dataset> {
        if self.norm.is_some() {
            return Err(Error::config("dataset is already normalized"));
        }
        Ok(Dataset {
            x: stats.normalize_design(&self.x)?,
            y: stats.normalize_labels(&self.y)?,
            cond: self.cond.as_ref().map(|c| stats.normalize_cond(c)).transpose()?,
            columns: self.columns.clone(),
            norm: Some(stats.clone()),
        })
    }

    pub fn denormalize(&self) -> Result<Dataset> {
        let stats = self
            .norm
            .as_ref()
            .ok_or_else(|| Error::config("dataset is not normalized"))?;
        Ok(Dataset {
            x: stats.denormalize_design(&self.x)?,
            y: stats.denormalize_labels(&self.y)?,
            cond: self.cond.as_ref().map(|c| stats.denormalize_cond(c)).transpose()?,
            columns: self.columns.clone(),
            norm: None,
        })
    }

    /// Reorders design and label columns: output column `j` is input column
    /// `perm[j]`. Normalization ranges follow their columns.
    pub fn permute_columns(&self, design_perm: &[usize], label_perm: &[usize]) -> Result<Dataset> {
        check_permutation(design_perm, self.design_dim())?;
        check_permutation(label_perm, self.label_dim())?;
        let pick = |names: &[String], perm: &[usize]| perm.iter().map(|&i| names[i].clone()).collect();
        let norm = self.norm.as_ref().map(|s| NormStats {
            design: design_perm.iter().map(|&i| s.design[i]).collect(),
            label: label_perm.iter().map(|&i| s.label[i]).collect(),
            condition: s.condition.clone(),
        });
        Ok(Dataset {
            x: self.x.select_columns(design_perm),
            y: self.y.select_columns(label_perm),
            cond: self.cond.clone(),
            columns: ColumnNames {
                design: pick(&self.columns.design, design_perm),
                label: pick(&self.columns.label, label_perm),
                condition: self.columns.condition.clone(),
            },
            norm,
        })
    }

    /// Reads a headed CSV; `schema` assigns every header column a role.
    pub fn load_csv(path: &Path, schema: &DatasetSchema) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file, schema)
    }

    pub fn read_csv<R: std::io::Read>(reader: R, schema: &DatasetSchema) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        if header.is_empty() || header.iter().all(String::is_empty) {
            return Err(Error::Parse {
                row: 0,
                column: String::new(),
                message: "empty file (no header row)".into(),
            });
        }
        for name in schema.columns.keys() {
            if !header.contains(name) {
                return Err(Error::Parse {
                    row: 0,
                    column: name.clone(),
                    message: "missing column".into(),
                });
            }
        }
        let mut roles = Vec::with_capacity(header.len());
        let mut names = ColumnNames::default();
        for name in &header {
            let role = *schema.columns.get(name).ok_or_else(|| Error::Parse {
                row: 0,
                column: name.clone(),
                message: "column has no role in the schema".into(),
            })?;
            match role {
                ColumnRole::Design => names.design.push(name.clone()),
                ColumnRole::Label => names.label.push(name.clone()),
                ColumnRole::Condition => names.condition.push(name.clone()),
            }
            roles.push(role);
        }
        if names.design.is_empty() || names.label.is_empty() {
            return Err(Error::config("schema needs at least one design and one label column"));
        }
        let (mut xs, mut ys, mut cs) = (Vec::new(), Vec::new(), Vec::new());
        let mut rows = 0;
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            let row = i + 1;
            if record.len() != header.len() {
                return Err(Error::Parse {
                    row,
                    column: String::new(),
                    message: format!("expected {} fields, found {}", header.len(), record.len()),
                });
            }
            for ((cell, name), role) in record.iter().zip(&header).zip(&roles) {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    row,
                    column: name.clone(),
                    message: format!("'{cell}' is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        column: name.clone(),
                        message: format!("'{cell}' is not finite"),
                    });
                }
                match role {
                    ColumnRole::Design => xs.push(v),
                    ColumnRole::Label => ys.push(v),
                    ColumnRole::Condition => cs.push(v),
                }
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::Parse {
                row: 1,
                column: String::new(),
                message: "no data rows".into(),
            });
        }
        let x = Matrix::from_vec(rows, names.design.len(), xs)?;
        let y = Matrix::from_vec(rows, names.label.len(), ys)?;
        let cond = if names.condition.is_empty() {
            None
        } else {
            Some(Matrix::from_vec(rows, names.condition.len(), cs)?)
        };
        Dataset::new(x, y, cond, names)
    }

    /// Writes design, label and condition columns (in that order) with
    /// shortest round-trip number formatting. `comments` become leading
    /// `# ` lines.
    pub fn write_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        let bytes = self.to_csv_bytes(comments)?;
        write_atomic(path, &bytes)
    }

    pub fn to_csv_bytes(&self, comments: &[String]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for c in comments {
            out.extend_from_slice(format!("# {c}\n").as_bytes());
        }
        {
            let mut w = csv::Writer::from_writer(&mut out);
            let header = self
                .columns
                .design
                .iter()
                .chain(&self.columns.label)
                .chain(&self.columns.condition);
            w.write_record(header)?;
            for r in 0..self.len() {
                let mut fields: Vec<String> = self.x.row(r).iter().map(f64::to_string).collect();
                fields.extend(self.y.row(r).iter().map(f64::to_string));
                if let Some(c) = &self.cond {
                    fields.extend(c.row(r).iter().map(f64::to_string));
                }
                w.write_record(&fields)?;
            }
            w.flush()?;
        }
        Ok(out)
    }
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    check_dim("permutation length", n, perm.len())?;
    let mut seen = vec![false; n];
    for &i in perm {
        if i >= n || seen[i] {
            return Err(Error::config(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        seen[i] = true;
    }
    Ok(())
}
