//! Named accuracy grids and their CSV form.

use crate::harness::tensor_io::atomic_write;
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

/// Row × column accuracy matrix with labels and run metadata.
///
/// Accuracies are quantized to four decimal places on insertion so the CSV
/// form (which prints exactly four fractional digits) round-trips the
/// in-memory matrix exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    rows: Vec<String>,
    cols: Vec<String>,
    values: Vec<Vec<f32>>,
    pub metadata: BTreeMap<String, String>,
}

fn quantize(v: f32) -> f32 {
    (v * 10000.0).round() / 10000.0
}

fn check_label(label: &str) -> Result<()> {
    if label.contains(',') || label.contains('\n') || label.contains('\r') {
        return Err(Error::config(format!(
            "report label {label:?} may not contain commas or newlines"
        )));
    }
    Ok(())
}

impl EvaluationReport {
    pub fn new(rows: Vec<String>, cols: Vec<String>) -> Result<Self> {
        for l in rows.iter().chain(cols.iter()) {
            check_label(l)?;
        }
        let values = vec![vec![0.0; cols.len()]; rows.len()];
        Ok(EvaluationReport {
            rows,
            cols,
            values,
            metadata: BTreeMap::new(),
        })
    }

    pub fn row_labels(&self) -> &[String] {
        &self.rows
    }

    pub fn col_labels(&self) -> &[String] {
        &self.cols
    }

    /// Set an accuracy cell; values must lie in `[0, 1]`.
    pub fn set(&mut self, row: usize, col: usize, accuracy: f32) -> Result<()> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::config(format!(
                "accuracy {accuracy} outside [0, 1] at ({row}, {col})"
            )));
        }
        self.values[row][col] = quantize(accuracy);
        Ok(())
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row][col]
    }

    pub fn matrix(&self) -> &[Vec<f32>] {
        &self.values
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("row");
        for c in &self.cols {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (r, label) in self.rows.iter().enumerate() {
            out.push_str(label);
            for v in &self.values[r] {
                out.push(',');
                out.push_str(&format!("{v:.4}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::config("empty report csv"))?;
        let cols: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        let mut values = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let mut cells = line.split(',');
            rows.push(
                cells
                    .next()
                    .ok_or_else(|| Error::config("missing row label"))?
                    .to_string(),
            );
            let row: Vec<f32> = cells
                .map(|c| {
                    c.parse::<f32>()
                        .map_err(|e| Error::config(format!("bad accuracy cell {c:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            if row.len() != cols.len() {
                return Err(Error::config(format!(
                    "row {} has {} cells, header has {}",
                    rows.last().unwrap(),
                    row.len(),
                    cols.len()
                )));
            }
            values.push(row);
        }
        Ok(EvaluationReport {
            rows,
            cols,
            values,
            metadata: BTreeMap::new(),
        })
    }

    /// Write the CSV (atomically); when metadata is present, a JSON sidecar
    /// `<path>.meta.json` is written next to it.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_csv().as_bytes())?;
        if !self.metadata.is_empty() {
            let sidecar = path.with_extension("meta.json");
            let json = serde_json::to_string_pretty(&self.metadata)?;
            atomic_write(&sidecar, json.as_bytes())?;
        }
        Ok(())
    }

    /// Pretty table for terminal output.
    pub fn render(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.len())
            .max()
            .unwrap_or(3)
            .max(3);
        let colw = self.cols.iter().map(|c| c.len().max(6)).collect::<Vec<_>>();
        let mut out = format!("{:width$}", "");
        for (c, w) in self.cols.iter().zip(&colw) {
            out.push_str(&format!("  {c:>w$}"));
        }
        out.push('\n');
        for (r, label) in self.rows.iter().enumerate() {
            out.push_str(&format!("{label:width$}"));
            for (v, w) in self.values[r].iter().zip(&colw) {
                out.push_str(&format!("  {:>w$.4}", v));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_reproduces_matrix_exactly() {
        let mut r = EvaluationReport::new(
            vec!["no-defense".into(), "ensemble-at".into()],
            vec!["clean".into(), "pgd-0.06".into()],
        )
        .unwrap();
        r.set(0, 0, 0.9731).unwrap();
        r.set(0, 1, 1.0 / 3.0).unwrap();
        r.set(1, 0, 0.0).unwrap();
        r.set(1, 1, 1.0).unwrap();
        let parsed = EvaluationReport::from_csv(&r.to_csv()).unwrap();
        assert_eq!(parsed.matrix(), r.matrix());
        assert_eq!(parsed.row_labels(), r.row_labels());
        assert_eq!(parsed.col_labels(), r.col_labels());
    }

    #[test]
    fn rejects_out_of_range_accuracy() {
        let mut r = EvaluationReport::new(vec!["a".into()], vec!["b".into()]).unwrap();
        assert!(r.set(0, 0, 1.2).is_err());
        assert!(r.set(0, 0, -0.1).is_err());
    }

    #[test]
    fn rejects_labels_with_commas() {
        assert!(EvaluationReport::new(vec!["a,b".into()], vec![]).is_err());
    }

    #[test]
    fn write_csv_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = EvaluationReport::new(vec!["m".into()], vec!["acc".into()]).unwrap();
        r.set(0, 0, 0.5).unwrap();
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        r.write_csv(&p1).unwrap();
        r.write_csv(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn csv_roundtrip_is_exact_for_any_accuracy_matrix(
                values in proptest::collection::vec(0.0f32..=1.0, 1..=12)
            ) {
                let cols = 3.min(values.len());
                let rows = values.len() / cols;
                let mut report = EvaluationReport::new(
                    (0..rows).map(|r| format!("row-{r}")).collect(),
                    (0..cols).map(|c| format!("col-{c}")).collect(),
                ).unwrap();
                for r in 0..rows {
                    for c in 0..cols {
                        report.set(r, c, values[r * cols + c]).unwrap();
                    }
                }
                let parsed = EvaluationReport::from_csv(&report.to_csv()).unwrap();
                prop_assert_eq!(parsed.matrix(), report.matrix());
            }
        }
    }
}
