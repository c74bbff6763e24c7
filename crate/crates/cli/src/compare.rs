//! Side-by-side comparison of robustness reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::report::{load_rows, RobustnessRow};
use crate::CliError;

/// Rows from every report, sorted by gap ascending (ties keep input order).
pub fn compare_rows(mut rows: Vec<RobustnessRow>) -> Result<Vec<RobustnessRow>, CliError> {
    let Some(first) = rows.first() else {
        return Err(CliError::Runtime("no robustness rows to compare".into()));
    };
    let k = first.clients;
    if let Some(other) = rows.iter().find(|r| r.clients != k) {
        return Err(CliError::Runtime(format!(
            "reports disagree on client count: {} has {k} clients, {} has {}",
            first.strategy, other.strategy, other.clients
        )));
    }
    rows.sort_by(|a, b| a.gap.total_cmp(&b.gap));
    Ok(rows)
}

pub fn load_reports(paths: &[impl AsRef<Path>]) -> Result<Vec<RobustnessRow>, CliError> {
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(load_rows::<RobustnessRow>(p.as_ref())?);
    }
    Ok(rows)
}

pub fn render_table(rows: &[RobustnessRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<6} {:<16} {:>8} {:>8} {:>8} {:>8}", "level", "strategy", "worst", "best", "gap", "mean");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<6} {:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.level, r.strategy, r.worst, r.best, r.gap, r.mean
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn row(strategy: &str, clients: usize, worst: f64, best: f64, mean: f64) -> RobustnessRow {
        RobustnessRow {
            level: "H3".into(),
            strategy: strategy.into(),
            clients,
            worst_client: 1,
            worst,
            best_client: 2,
            best,
            gap: best - worst,
            mean,
        }
    }

    #[test]
    fn orders_by_gap() {
        let rows = compare_rows(vec![
            row("fedavg", 4, 0.7309, 0.8159, 0.8159),
            row("fedbn", 4, 0.7656, 0.8159, 0.8109),
            row("fedprox", 4, 0.7421, 0.8085, 0.8085),
        ])
        .unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.strategy.as_str()).collect();
        assert_eq!(names, ["fedbn", "fedprox", "fedavg"]);
        assert!(render_table(&rows).contains("fedbn"));
    }

    #[test]
    fn single_report_passes_through() {
        let one = vec![row("fedavg", 4, 0.5, 0.6, 0.55)];
        assert_eq!(compare_rows(one.clone()).unwrap(), one);
    }

    #[test]
    fn client_count_mismatch_fails() {
        let err = compare_rows(vec![row("fedavg", 4, 0.5, 0.6, 0.55), row("fedbn", 3, 0.5, 0.6, 0.55)]).unwrap_err();
        assert!(err.to_string().contains("client count"));
        assert!(compare_rows(vec![]).is_err());
    }
}
