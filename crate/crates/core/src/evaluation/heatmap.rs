use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::identification::csv_err;
use crate::motion_io::AppLabel;

use super::CrossAppMatrix;

/// Writes the grid twice: `path` with "mean±std" cells under display
/// names, and `<stem>_raw.csv` next to it with the plain means. Rows are
/// reference applications, columns query applications, both in play order.
/// Returns the raw file's path.
pub fn export_heatmap(matrix: &CrossAppMatrix, path: &Path) -> Result<PathBuf> {
    let n = matrix.apps.len();
    if n == 0
        || matrix.mean.len() != n
        || matrix.std.len() != n
        || matrix.mean.iter().chain(&matrix.std).any(|r| r.len() != n)
        || matrix.mean.iter().flatten().any(|v| !v.is_finite())
    {
        return Err(Error::IncompleteMatrix(format!("{} grid is not a complete {n}×{n} matrix", matrix.metric.tag())));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| matrix.apps[*a].cmp(&matrix.apps[*b]));

    let mut display = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["reference \\ query".to_string()];
    header.extend(order.iter().map(|i| matrix.apps[*i].display_name().to_string()));
    display.write_record(&header).map_err(|e| csv_err(path, e))?;
    for &r in &order {
        let mut rec = vec![matrix.apps[r].display_name().to_string()];
        rec.extend(order.iter().map(|&c| format!("{:.3}±{:.3}", matrix.mean[r][c], matrix.std[r][c])));
        display.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    display.flush().map_err(|e| Error::io(path, e))?;

    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("heatmap");
    let raw_path = path.with_file_name(format!("{stem}_raw.csv"));
    let mut raw = csv::Writer::from_path(&raw_path).map_err(|e| csv_err(&raw_path, e))?;
    let mut header = vec!["reference".to_string()];
    header.extend(order.iter().map(|i| matrix.apps[*i].to_string()));
    raw.write_record(&header).map_err(|e| csv_err(&raw_path, e))?;
    for &r in &order {
        let mut rec = vec![matrix.apps[r].to_string()];
        rec.extend(order.iter().map(|&c| matrix.mean[r][c].to_string()));
        raw.write_record(&rec).map_err(|e| csv_err(&raw_path, e))?;
    }
    raw.flush().map_err(|e| Error::io(&raw_path, e))?;
    Ok(raw_path)
}

/// Parses a raw heatmap CSV back into (applications, means).
pub fn read_heatmap_raw(path: &Path) -> Result<(Vec<AppLabel>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let apps: Vec<AppLabel> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .skip(1)
        .map(str::parse)
        .collect::<Result<_>>()?;
    let mut mean = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>().map_err(|e| Error::MalformedRow { row: i + 2, reason: e.to_string() })
            })
            .collect::<Result<Vec<_>>>()?;
        mean.push(row);
    }
    Ok((apps, mean))
}
