//! Per-episode metrics and deterministic CSV output.
//!
//! Wall time is nondeterministic, so it goes to a separate timings file; the
//! metric CSVs must reproduce byte-for-byte under a fixed seed.

use crate::HarnessError;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub episode: u64,
    /// Sum of rewards over the episode.
    pub return_sum: f64,
    /// Fraction of executed steps with any violation flag.
    pub violation_rate: f64,
    pub steps: usize,
    /// Planner degraded events during the episode.
    pub degraded: u64,
    pub params: Vec<f64>,
    pub wall_time_s: f64,
}

pub fn write_metrics_csv(
    path: &Path,
    rows: &[MetricsRow],
    param_dim: usize,
) -> Result<(), HarnessError> {
    let mut out = String::from("episode,return,violation_rate,steps,degraded");
    for i in 0..param_dim {
        out.push_str(&format!(",p{}", i));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.episode, r.return_sum, r.violation_rate, r.steps, r.degraded
        ));
        for i in 0..param_dim {
            out.push_str(&format!(",{}", r.params.get(i).copied().unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_timings_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), HarnessError> {
    let mut out = String::from("episode,wall_time_s\n");
    for r in rows {
        out.push_str(&format!("{},{:.3}\n", r.episode, r.wall_time_s));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 5 {
            continue;
        }
        let f = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
        rows.push(MetricsRow {
            episode: cells[0].parse().unwrap_or(0),
            return_sum: f(cells[1]),
            violation_rate: f(cells[2]),
            steps: cells[3].parse().unwrap_or(0),
            degraded: cells[4].parse().unwrap_or(0),
            params: cells[5..].iter().map(|c| f(c)).collect(),
            wall_time_s: 0.0,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            MetricsRow {
                episode: 0,
                return_sum: 12.5,
                violation_rate: 0.05,
                steps: 100,
                degraded: 0,
                params: vec![0.6, 0.25, 1.0],
                wall_time_s: 1.2,
            },
            MetricsRow {
                episode: 1,
                return_sum: 30.125,
                violation_rate: 0.0,
                steps: 100,
                degraded: 1,
                params: vec![0.2, 0.9, 0.4],
                wall_time_s: 0.8,
            },
        ];
        let dir = std::env::temp_dir().join(format!("metrics_test_{}", std::process::id()));
        let path = dir.join("metrics.csv");
        write_metrics_csv(&path, &rows, 3).unwrap();
        let loaded = read_metrics_csv(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].return_sum, 12.5);
        assert_eq!(loaded[1].params, vec![0.2, 0.9, 0.4]);
        // byte determinism of the writer
        let again = dir.join("metrics2.csv");
        write_metrics_csv(&again, &rows, 3).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&again).unwrap()
        );
        std::fs::remove_dir_all(dir).ok();
    }
}
