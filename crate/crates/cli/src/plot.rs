//! Long-format plot data from a sweep table.

use std::fs::File;
use std::path::{Path, PathBuf};

use nearopt_core::SweepTable;

use crate::error::CliError;

pub const PLOT_COLUMNS: [&str; 5] = ["series", "x", "mean", "band_lo", "band_hi"];

fn file_stem(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes `<controller>.csv` into `out_dir` for every controller in the sweep.
///
/// Each file has a `cost` series (mean and mean +/- std against epsilon) and,
/// for replanning controllers, a `replans` series of the same shape.
pub fn emit_plot_data(sweep_csv: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let file = File::open(sweep_csv).map_err(|e| CliError::Io(format!("{}: {e}", sweep_csv.display())))?;
    let table = SweepTable::read_csv(file).map_err(|e| CliError::Parse(format!("{}: {e}", sweep_csv.display())))?;
    std::fs::create_dir_all(out_dir)?;

    let mut labels: Vec<&str> = Vec::new();
    for r in &table.rows {
        if !labels.contains(&r.controller.as_str()) {
            labels.push(&r.controller);
        }
    }
    let mut written = Vec::new();
    for label in labels {
        let path = out_dir.join(format!("{}.csv", file_stem(label)));
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io(e.to_string()))?;
        w.write_record(PLOT_COLUMNS).map_err(|e| CliError::Io(e.to_string()))?;
        let rows = table.rows_for(label);
        let mut record = |series: &str, x: f64, m: f64, s: f64| {
            w.write_record([series.to_string(), format!("{x:?}"), format!("{m:?}"), format!("{:?}", m - s), format!("{:?}", m + s)])
                .map_err(|e| CliError::Io(e.to_string()))
        };
        for r in &rows {
            record("cost", r.epsilon, r.mean_cost, r.std_cost)?;
        }
        for r in &rows {
            if let Some((m, s)) = r.replan_stats {
                record("replans", r.epsilon, m, s)?;
            }
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}
