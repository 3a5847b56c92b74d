//! Observed records `(A, Y, X)` with `X ∈ [0,1]^d`, plus CSV input/output.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Column-oriented i.i.d. sample. `x` is row-major `n × d`. For records
/// whose outcome is unobserved (A = 0 under missingness) `y` holds 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub a: Vec<f64>,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    dim: usize,
    /// Any further numeric columns found in the input, by header name.
    pub extra: Vec<(String, Vec<f64>)>,
}

/// Whether every record must carry an outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomePolicy {
    /// `Y` may be blank where `A = 0`.
    MissingWhenUntreated,
    Always,
}

impl Dataset {
    pub fn new(a: Vec<f64>, y: Vec<f64>, x: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("covariate dimension must be at least 1".into()));
        }
        let n = a.len();
        if y.len() != n || x.len() != n * dim {
            return Err(Error::Dimension(format!(
                "column lengths disagree: A has {}, Y has {}, X has {} (expected {})",
                n,
                y.len(),
                x.len(),
                n * dim
            )));
        }
        for (i, v) in x.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::Data(format!(
                    "record {} covariate X{} = {} lies outside [0, 1]",
                    i / dim,
                    i % dim + 1,
                    v
                )));
            }
        }
        if let Some(i) = a.iter().chain(&y).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("record {}", i % n.max(1))));
        }
        Ok(Self {
            a,
            y,
            x,
            dim,
            extra: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    /// Records at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let d = self.dim;
        let mut x = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            x.extend_from_slice(self.point(i));
        }
        Dataset {
            a: idx.iter().map(|&i| self.a[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            x,
            dim: d,
            extra: self
                .extra
                .iter()
                .map(|(n, v)| (n.clone(), idx.iter().map(|&i| v[i]).collect()))
                .collect(),
        }
    }

    pub fn read_csv_path(path: &Path, dim: Option<usize>, policy: OutcomePolicy) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file, dim, policy)
    }

    /// Reads columns `A`, `Y`, `X1..Xd` (any order, extra columns kept).
    /// When `dim` is `None` it is inferred from the `X<j>` headers.
    pub fn read_csv<R: Read>(reader: R, dim: Option<usize>, policy: OutcomePolicy) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Data(format!("column {name} absent")))
        };
        let col_a = find("A")?;
        let col_y = find("Y")?;
        let dim = match dim {
            Some(d) => d,
            None => {
                let max = headers
                    .iter()
                    .filter_map(|h| h.strip_prefix('X').and_then(|s| s.parse::<usize>().ok()))
                    .max()
                    .unwrap_or(0);
                if max == 0 {
                    return Err(Error::Data("column X1 absent".into()));
                }
                max
            }
        };
        let col_x = (1..=dim).map(|j| find(&format!("X{j}"))).collect::<Result<Vec<_>>>()?;
        let used: Vec<usize> = [col_a, col_y].into_iter().chain(col_x.iter().copied()).collect();
        let extra_cols: Vec<usize> = (0..headers.len()).filter(|c| !used.contains(c)).collect();

        let (mut a, mut y, mut x) = (Vec::new(), Vec::new(), Vec::new());
        let mut extra: Vec<Vec<f64>> = vec![Vec::new(); extra_cols.len()];
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            // 1-based data rows, header excluded
            let line = row + 1;
            let field = |c: usize| -> Result<Option<f64>> {
                let s = rec.get(c).unwrap_or("");
                if s.is_empty() || s.eq_ignore_ascii_case("na") {
                    return Ok(None);
                }
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|_| Error::Data(format!("row {line}, column {}: cannot parse '{s}'", headers[c])))
            };
            let need = |c: usize| -> Result<f64> {
                field(c)?.ok_or_else(|| Error::Data(format!("row {line}, column {}: missing value", headers[c])))
            };
            let av = need(col_a)?;
            if av != 0.0 && av != 1.0 {
                return Err(Error::Data(format!("row {line}, column A: expected 0 or 1, got {av}")));
            }
            let yv = match (field(col_y)?, policy) {
                (Some(v), _) => v,
                (None, OutcomePolicy::MissingWhenUntreated) if av == 0.0 => 0.0,
                (None, _) => return Err(Error::Data(format!("row {line}, column Y: missing value"))),
            };
            if !yv.is_finite() {
                return Err(Error::Data(format!("row {line}, column Y: non-finite value")));
            }
            a.push(av);
            y.push(yv);
            for (j, &c) in col_x.iter().enumerate() {
                let v = need(c)?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Data(format!(
                        "row {line}, column X{}: value {v} outside [0, 1]",
                        j + 1
                    )));
                }
                x.push(v);
            }
            for (slot, &c) in extra.iter_mut().zip(&extra_cols) {
                slot.push(field(c)?.unwrap_or(f64::NAN));
            }
        }
        let mut ds = Dataset::new(a, y, x, dim)?;
        ds.extra = extra_cols.iter().map(|&c| headers[c].clone()).zip(extra).collect();
        Ok(ds)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["A".to_string(), "Y".to_string()];
        header.extend((1..=self.dim).map(|j| format!("X{j}")));
        header.extend(self.extra.iter().map(|(n, _)| n.clone()));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![format_f64(self.a[i]), format_f64(self.y[i])];
            row.extend(self.point(i).iter().map(|v| format_f64(*v)));
            row.extend(self.extra.iter().map(|(_, v)| format_f64(v[i])));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest representation that round-trips exactly.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let ds = Dataset::new(vec![1.0, 0.0], vec![0.3, 0.0], vec![0.1, 0.2, 0.3, 1.0], 2).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice(), None, OutcomePolicy::MissingWhenUntreated).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "A,Y,X1,X3\n1,1,0.5,0.5\n";
        let err = Dataset::read_csv(csv.as_bytes(), Some(3), OutcomePolicy::Always).unwrap_err();
        assert!(err.to_string().contains("column X2 absent"), "{err}");
        let err = Dataset::read_csv(csv.as_bytes(), None, OutcomePolicy::Always).unwrap_err();
        assert!(err.to_string().contains("column X2 absent"), "{err}");
    }

    #[test]
    fn errors_carry_row_and_column() {
        let csv = "A,Y,X1\n1,1,0.5\n0,,1.5\n";
        let err = Dataset::read_csv(csv.as_bytes(), None, OutcomePolicy::MissingWhenUntreated).unwrap_err();
        assert!(err.to_string().contains("row 2, column X1"), "{err}");
        let csv = "A,Y,X1\n1,abc,0.5\n";
        let err = Dataset::read_csv(csv.as_bytes(), None, OutcomePolicy::MissingWhenUntreated).unwrap_err();
        assert!(err.to_string().contains("row 1, column Y"), "{err}");
    }

    #[test]
    fn blank_outcome_needs_policy() {
        let csv = "A,Y,X1\n0,,0.5\n";
        assert!(Dataset::read_csv(csv.as_bytes(), None, OutcomePolicy::MissingWhenUntreated).is_ok());
        assert!(Dataset::read_csv(csv.as_bytes(), None, OutcomePolicy::Always).is_err());
    }

    #[test]
    fn extra_columns_are_kept() {
        let csv = "X1,A,Y,b_hat\n0.5,1,1,0.25\n";
        let ds = Dataset::read_csv(csv.as_bytes(), None, OutcomePolicy::Always).unwrap();
        assert_eq!(ds.column("b_hat"), Some(&[0.25][..]));
    }
}
