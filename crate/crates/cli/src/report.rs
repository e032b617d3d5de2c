use std::fmt::Write as _;
use std::path::Path;

use uwloc_core::{Error, MetricsReport, Result};

/// Every `PLOT_STRIDE`-th test segment goes to `plot.csv`, indexed by its
/// position in the test set.
pub const PLOT_STRIDE: usize = 10;

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv(rows: impl Iterator<Item = (usize, f64, f64)>) -> String {
    let mut s = String::from("index,y_km,yhat_km\n");
    for (i, y, yhat) in rows {
        let _ = writeln!(s, "{i},{y},{yhat}");
    }
    s
}

/// Writes `metrics.json`, `predictions.csv` and `plot.csv` into `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    if report.predictions.is_empty() {
        return Err(Error::InvalidInput("report has no predictions".into()));
    }
    if !report.is_consistent() {
        return Err(Error::InvalidInput("report metrics disagree with its predictions".into()));
    }
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    write(&dir.join("metrics.json"), &(json + "\n"))?;
    write(&dir.join("predictions.csv"), &csv(report.predictions.iter().copied()))?;
    let plot = report
        .predictions
        .iter()
        .enumerate()
        .filter(|(k, _)| k % PLOT_STRIDE == 0)
        .map(|(k, p)| (k, p.1, p.2));
    write(&dir.join("plot.csv"), &csv(plot))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
