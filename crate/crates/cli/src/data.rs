//! Dataset file contract: CSV with header, required columns `id`, `time`, `y`,
//! plus feature columns in header order. Rows may arrive in any order; they are
//! sorted into the canonical layout (individuals by ascending id string, time
//! ascending) before fitting, so shuffled input produces identical output.

use crate::CliError;
use ndarray::{Array1, Array2};
use panel_glmm::PanelLayout;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub layout: PanelLayout,
    /// Individual ids in canonical (ascending) order.
    pub ids: Vec<String>,
    pub feature_names: Vec<String>,
    /// Response in canonical row order.
    pub y: Array1<f64>,
    /// Feature block in canonical row order (no intercept column).
    pub x: Array2<f64>,
}

pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::data(format!("bad header: {e}")))?
        .clone();
    let mut id_col = None;
    let mut time_col = None;
    let mut y_col = None;
    let mut feature_cols = Vec::new();
    let mut feature_names = Vec::new();
    for (j, name) in headers.iter().enumerate() {
        match name {
            "id" => id_col = Some(j),
            "time" => time_col = Some(j),
            "y" => y_col = Some(j),
            other => {
                feature_cols.push(j);
                feature_names.push(other.to_string());
            }
        }
    }
    let (id_col, time_col, y_col) = match (id_col, time_col, y_col) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(CliError::data(
                "dataset needs columns `id`, `time` and `y`",
            ))
        }
    };

    // id → time → (y, features); BTreeMap gives the canonical ordering
    let mut table: BTreeMap<String, BTreeMap<i64, (f64, Vec<f64>)>> = BTreeMap::new();
    let mut max_time = i64::MIN;
    for (row_idx, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| CliError::data(format!("row {}: {e}", row_idx + 2)))?;
        let id = record
            .get(id_col)
            .ok_or_else(|| CliError::data(format!("row {}: missing id", row_idx + 2)))?
            .to_string();
        let time_raw = record
            .get(time_col)
            .ok_or_else(|| CliError::data(format!("row {}: missing time", row_idx + 2)))?;
        let time: i64 = time_raw.parse().map_err(|_| {
            CliError::data(format!(
                "row {}: time {time_raw:?} is not an integer (times must be 1..T)",
                row_idx + 2
            ))
        })?;
        if time < 1 {
            return Err(CliError::data(format!(
                "row {}: time {time} out of range (times must be 1..T)",
                row_idx + 2
            )));
        }
        max_time = max_time.max(time);
        let y: f64 = record
            .get(y_col)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::data(format!("row {}: bad response", row_idx + 2)))?;
        if !y.is_finite() {
            return Err(CliError::data(format!(
                "row {}: non-finite response",
                row_idx + 2
            )));
        }
        let mut features = Vec::with_capacity(feature_cols.len());
        for (&j, name) in feature_cols.iter().zip(&feature_names) {
            let value: f64 = record
                .get(j)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| {
                    CliError::data(format!("row {}: bad value in column {name}", row_idx + 2))
                })?;
            if !value.is_finite() {
                return Err(CliError::data(format!(
                    "row {}: non-finite value in column {name}",
                    row_idx + 2
                )));
            }
            features.push(value);
        }
        if table
            .entry(id.clone())
            .or_default()
            .insert(time, (y, features))
            .is_some()
        {
            return Err(CliError::data(format!(
                "duplicate cell (id {id:?}, time {time})"
            )));
        }
    }

    if table.len() < 2 {
        return Err(CliError::data("panel needs at least 2 individuals"));
    }
    if max_time < 2 {
        return Err(CliError::data("panel needs at least 2 time points"));
    }
    let n_times = max_time as usize;
    // balance: every id carries exactly the times 1..T (duplicates were
    // rejected above, so presence of each time implies exactness)
    for (id, times) in &table {
        for t in 1..=max_time {
            if !times.contains_key(&t) {
                return Err(CliError::data(format!(
                    "unbalanced panel: missing cell (id {id:?}, time {t})"
                )));
            }
        }
    }

    let layout = PanelLayout::new(table.len(), n_times).map_err(CliError::data_from)?;
    let n = layout.n_rows();
    let p = feature_names.len();
    let mut y_arr = Array1::<f64>::zeros(n);
    let mut x_arr = Array2::<f64>::zeros((n, p));
    let mut ids = Vec::with_capacity(table.len());
    for (a, (id, times)) in table.into_iter().enumerate() {
        ids.push(id);
        for (t_idx, (_, (y, features))) in times.into_iter().enumerate() {
            let row = layout.row(a, t_idx);
            y_arr[row] = y;
            for (j, &v) in features.iter().enumerate() {
                x_arr[(row, j)] = v;
            }
        }
    }
    Ok(Dataset {
        layout,
        ids,
        feature_names,
        y: y_arr,
        x: x_arr,
    })
}

/// Writes a dataset in the canonical order with zero-padded ids, so that
/// re-ingestion sorts identically.
pub fn write_dataset<W: Write>(
    mut out: W,
    layout: PanelLayout,
    y: &Array1<f64>,
    x_features: &Array2<f64>,
) -> std::io::Result<()> {
    let width = layout.n_individuals().to_string().len();
    write!(out, "id,time,y")?;
    for j in 0..x_features.ncols() {
        write!(out, ",x{}", j + 1)?;
    }
    writeln!(out)?;
    for a in 0..layout.n_individuals() {
        for t in 0..layout.n_times() {
            let row = layout.row(a, t);
            write!(out, "{:0width$},{},{}", a + 1, t + 1, y[row])?;
            for j in 0..x_features.ncols() {
                write!(out, ",{}", x_features[(row, j)])?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
