use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Column order of score tables.
pub const METRIC_NAMES: [&str; 5] = ["dci", "factorvae", "sap", "mig", "irs"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricScores {
    pub dci: f64,
    pub factor_vae: f64,
    pub sap: f64,
    pub mig: f64,
    pub irs: f64,
}

impl MetricScores {
    pub fn to_array(&self) -> [f64; 5] {
        [self.dci, self.factor_vae, self.sap, self.mig, self.irs]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self { dci: a[0], factor_vae: a[1], sap: a[2], mig: a[3], irs: a[4] }
    }
}

/// Sum per row of each cell divided by its column maximum.
pub fn normalized_sum(rows: &[[f64; 5]]) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::Contract("normalized sum of an empty table".into()));
    }
    let mut max = [f64::NEG_INFINITY; 5];
    for r in rows {
        for (m, v) in max.iter_mut().zip(r) {
            if !v.is_finite() {
                return Err(Error::Domain(format!("non-finite score {v}")));
            }
            *m = m.max(*v);
        }
    }
    if let Some(c) = max.iter().position(|&m| m <= 0.0) {
        return Err(Error::Contract(format!("column {} has non-positive maximum {}", METRIC_NAMES[c], max[c])));
    }
    Ok(rows.iter().map(|r| r.iter().zip(&max).map(|(v, m)| v / m).sum()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub scores: MetricScores,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn push(&mut self, method: impl Into<String>, scores: MetricScores) {
        self.rows.push(MetricRow { method: method.into(), scores });
    }

    pub fn normalized_sums(&self) -> Result<Vec<f64>> {
        normalized_sum(&self.rows.iter().map(|r| r.scores.to_array()).collect::<Vec<_>>())
    }

    /// Rows with their normalized sums, best first; equal sums keep input order.
    pub fn ranked(&self) -> Result<Vec<(MetricRow, f64)>> {
        let sums = self.normalized_sums()?;
        let mut out: Vec<(MetricRow, f64)> = self.rows.iter().cloned().zip(sums).collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(out)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut s = String::from("method,dci,factorvae,sap,mig,irs,normalized_sum\n");
        for (row, sum) in self.ranked()? {
            let a = row.scores.to_array();
            writeln!(s, "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}", row.method, a[0], a[1], a[2], a[3], a[4], sum).unwrap();
        }
        Ok(s)
    }

    /// Parses rows of `method,dci,factorvae,sap,mig,irs[,normalized_sum]`; a
    /// stored normalized sum is ignored and recomputed.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Config("empty score table".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let expected = ["method", "dci", "factorvae", "sap", "mig", "irs"];
        if cols.len() < 6 || cols[..6] != expected || (cols.len() == 7 && cols[6] != "normalized_sum") || cols.len() > 7 {
            return Err(Error::Config(format!("bad score table header {header:?}; expected {}[,normalized_sum]", expected.join(","))));
        }
        let mut table = Self::default();
        for (lineno, line) in lines {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != cols.len() {
                return Err(Error::Config(format!("line {}: expected {} fields, found {}", lineno + 1, cols.len(), cells.len())));
            }
            let mut a = [0.0; 5];
            for (slot, cell) in a.iter_mut().zip(&cells[1..6]) {
                *slot = cell
                    .parse()
                    .map_err(|_| Error::Config(format!("line {}: {cell:?} is not a number", lineno + 1)))?;
            }
            table.push(cells[0], MetricScores::from_array(a));
        }
        if table.rows.is_empty() {
            return Err(Error::Config("score table has no rows".into()));
        }
        Ok(table)
    }

    /// Aligned text table, best method first, column maxima marked with `*`.
    pub fn to_text(&self) -> Result<String> {
        let ranked = self.ranked()?;
        let mut max = [f64::NEG_INFINITY; 6];
        for (row, sum) in &ranked {
            let a = row.scores.to_array();
            for c in 0..5 {
                max[c] = max[c].max(a[c]);
            }
            max[5] = max[5].max(*sum);
        }
        let headers = ["Method", "DCI", "FactorVAE", "SAP", "MIG", "IRS", "Normalized Sum"];
        let mut cells: Vec<Vec<String>> = vec![headers.iter().map(|h| h.to_string()).collect()];
        for (row, sum) in &ranked {
            let a = row.scores.to_array();
            let mut line = vec![row.method.clone()];
            for (c, v) in a.iter().chain(std::iter::once(sum)).enumerate() {
                let mark = if *v == max[c] { "*" } else { " " };
                line.push(format!("{v:.3}{mark}"));
            }
            cells.push(line);
        }
        let widths: Vec<usize> = (0..7).map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap()).collect();
        let mut out = String::new();
        for (i, r) in cells.iter().enumerate() {
            let mut line = format!("{:<w$}", r[0], w = widths[0]);
            for c in 1..7 {
                write!(line, "  {:>w$}", r[c], w = widths[c]).unwrap();
            }
            out.push_str(line.trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * 6));
                out.push('\n');
            }
        }
        Ok(out)
    }
}
