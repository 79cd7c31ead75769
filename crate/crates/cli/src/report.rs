use std::path::Path;

use vaebench_core::metrics::MetricTable;

use crate::error::{file_err, HarnessError, Result};

fn header(text: &str) -> Option<&str> {
    text.lines().map(str::trim).find(|l| !l.is_empty())
}

/// Concatenates the rows of several score CSVs. Every file must carry the
/// same header as the first one.
pub fn read_tables(paths: &[impl AsRef<Path>]) -> Result<MetricTable> {
    let mut table = MetricTable::default();
    let mut first: Option<(String, String)> = None;
    for path in paths {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(file_err(path))?;
        let shown = path.display().to_string();
        let h = header(&text)
            .ok_or_else(|| HarnessError::Format { path: shown.clone(), msg: "file is empty".into() })?
            .to_string();
        match &first {
            None => first = Some((shown.clone(), h)),
            Some((p0, h0)) if *h0 != h => {
                return Err(HarnessError::Format {
                    path: shown,
                    msg: format!("columns {h:?} differ from {h0:?} in {p0}"),
                })
            }
            Some(_) => {}
        }
        let part = MetricTable::from_csv(&text).map_err(|e| HarnessError::Format { path: shown, msg: e.to_string() })?;
        table.rows.extend(part.rows);
    }
    if table.rows.is_empty() {
        return Err(HarnessError::Config("report needs at least one score file".into()));
    }
    Ok(table)
}

/// Ranked CSV and aligned text renderings of a table.
pub fn render(table: &MetricTable) -> Result<(String, String)> {
    Ok((table.to_csv()?, table.to_text()?))
}
