use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::report::{EvalReport, Rates};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnKind {
    Clean,
    Attacked,
    Transfer,
}

/// One report's rates, overall and per scale bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub label: String,
    pub kind: ColumnKind,
    pub detector: Option<String>,
    pub patch: Option<String>,
    pub overall: Rates,
    pub off_center: Rates,
    pub per_scale: Vec<Rates>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scales: Vec<f64>,
    pub columns: Vec<Column>,
}

/// Lines up reports evaluated on the same grid.
pub fn summarize(reports: &[(String, &EvalReport)]) -> Result<Summary> {
    let (_, first) = reports.first().ok_or_else(|| Error::param("nothing to summarize"))?;
    for (label, r) in reports {
        if r.grid != first.grid || r.meta.seed != first.meta.seed {
            return Err(Error::IncompatibleReports(format!(
                "{label} was evaluated on a different grid or seed"
            )));
        }
    }
    let columns = reports
        .iter()
        .map(|(label, r)| {
            let kind = match (r.meta.transfer, r.aggregates.overall.attack_success_rate.is_some()) {
                (true, _) => ColumnKind::Transfer,
                (false, true) => ColumnKind::Attacked,
                (false, false) => ColumnKind::Clean,
            };
            Column {
                label: label.clone(),
                kind,
                detector: r.meta.detector.clone(),
                patch: r.meta.patch.clone(),
                overall: r.aggregates.overall.clone(),
                off_center: r.aggregates.off_center.clone(),
                per_scale: r.aggregates.per_scale.iter().map(|b| b.rates.clone()).collect(),
            }
        })
        .collect();
    Ok(Summary {
        scales: first.grid.scales.clone(),
        columns,
    })
}

fn cell(r: &Rates, kind: ColumnKind) -> String {
    match kind {
        ColumnKind::Clean => format!("{:.3}", r.clean_detection_rate),
        _ => format!(
            "{:.3} ({}/{})",
            r.attack_success_rate.unwrap_or(0.0),
            r.attack_successes.unwrap_or(0),
            r.success_denominator.unwrap_or(0)
        ),
    }
}

impl Summary {
    /// Plain-text table: clean columns show detection rate, attacked and
    /// transfer columns show attack success with its denominator.
    pub fn render(&self) -> String {
        let mut header = vec!["scale".to_string()];
        header.extend(self.columns.iter().map(|c| {
            let what = match c.kind {
                ColumnKind::Clean => "detect",
                ColumnKind::Attacked => "success",
                ColumnKind::Transfer => "transfer success",
            };
            format!("{} [{what}]", c.label)
        }));
        let mut rows = vec![header];
        for (i, s) in self.scales.iter().enumerate() {
            let mut row = vec![format!("{s:.2}")];
            row.extend(self.columns.iter().map(|c| cell(&c.per_scale[i], c.kind)));
            rows.push(row);
        }
        let mut all = vec!["all".to_string()];
        all.extend(self.columns.iter().map(|c| cell(&c.overall, c.kind)));
        rows.push(all);
        let mut off = vec!["off-center".to_string()];
        off.extend(self.columns.iter().map(|c| cell(&c.off_center, c.kind)));
        rows.push(off);

        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let line: Vec<String> = row.iter().zip(&widths).map(|(v, w)| format!("{v:>w$}")).collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 || i == self.scales.len() {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        out
    }
}
