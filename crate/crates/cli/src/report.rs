use std::fmt::Write;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::run::Run;

/// Tables a run may contain, combined under the name of the first column.
const TABLES: &[&str] = &["summary.csv", "ablation_summary.csv"];

/// Concatenates the result tables of earlier runs into `report.csv`
/// (one file per table kind, with a leading `run` column) and `report.md`.
pub fn report(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    if cfg.runs.is_empty() {
        return Err(CliError::config("no runs given to report on"));
    }
    for dir in &cfg.runs {
        if !dir.is_dir() {
            return Err(CliError::config(format!("run directory not found: {}", dir.display())));
        }
    }
    let mut md = String::from("# Results\n");
    let mut found = false;
    for table in TABLES {
        let mut header: Option<csv::StringRecord> = None;
        let mut rows: Vec<csv::StringRecord> = Vec::new();
        for dir in &cfg.runs {
            let path = dir.join(table);
            if !path.exists() {
                continue;
            }
            let mut r = csv::Reader::from_path(&path)?;
            let h = r.headers()?.clone();
            match &header {
                None => header = Some(h),
                Some(existing) if *existing != h => {
                    return Err(CliError::config(format!("{} has different columns", path.display())));
                }
                _ => {}
            }
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            for rec in r.records() {
                let mut row = csv::StringRecord::from(vec![name.clone()]);
                row.extend(rec?.iter());
                rows.push(row);
            }
        }
        let Some(header) = header else { continue };
        found = true;
        let mut full = csv::StringRecord::from(vec!["run"]);
        full.extend(header.iter());
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&full)?;
        for r in &rows {
            w.write_record(r)?;
        }
        run.write(&format!("report.{table}"), w.into_inner().map_err(|e| CliError::config(e.to_string()))?)?;

        let _ = writeln!(md, "\n## {}\n", table.trim_end_matches(".csv"));
        let _ = writeln!(md, "| {} |", full.iter().collect::<Vec<_>>().join(" | "));
        let _ = writeln!(md, "|{}", "---|".repeat(full.len()));
        for r in &rows {
            let cells: Vec<String> = r.iter().map(short).collect();
            let _ = writeln!(md, "| {} |", cells.join(" | "));
        }
    }
    if !found {
        return Err(CliError::config("none of the runs holds a summary table"));
    }
    run.write("report.md", md)?;
    Ok(())
}

/// Four decimals for floats, everything else verbatim.
fn short(cell: &str) -> String {
    match cell.parse::<f64>() {
        Ok(x) if cell.contains('.') || cell.contains('e') => format!("{x:.4}"),
        _ => cell.to_string(),
    }
}
