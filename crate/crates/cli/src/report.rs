//! Side-by-side comparison of evaluation reports from the three training modes.

use std::fmt::Write as _;

use wildattr::metrics::HARD_AVERAGE_ROW;
use wildattr::EvalReport;

/// Column order of the grid, with the directory name each mode is read from.
pub const MODES: [(&str, &str); 3] = [("baseline", "w/o wild"), ("pseudo", "pseudo"), ("constrained", "cons. opt.")];

pub struct Grid {
    /// Row labels: every non-target source in first-seen order, then the hard average.
    pub sources: Vec<String>,
    /// `cells[row][mode]` holds `(ap, auroc)` when that mode reported the row.
    pub cells: Vec<[Option<(f64, f64)>; 3]>,
}

fn lookup(report: &EvalReport, source: &str) -> Option<(f64, f64)> {
    if source == HARD_AVERAGE_ROW {
        return report.hard_average.as_ref().map(|h| (h.ap, h.auroc));
    }
    report.row(source).map(|r| (r.ap, r.auroc))
}

pub fn build(reports: &[Option<EvalReport>; 3]) -> Grid {
    let mut sources: Vec<String> = Vec::new();
    for r in reports.iter().flatten() {
        for row in &r.rows {
            if !sources.contains(&row.source) {
                sources.push(row.source.clone());
            }
        }
    }
    sources.push(HARD_AVERAGE_ROW.to_string());
    let cells = sources
        .iter()
        .map(|s| {
            let mut row = [None; 3];
            for (slot, report) in row.iter_mut().zip(reports) {
                *slot = report.as_ref().and_then(|r| lookup(r, s));
            }
            row
        })
        .collect();
    Grid { sources, cells }
}

fn fixed(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn full(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl Grid {
    fn column(&self, row: usize, metric: usize, mode: usize) -> Option<f64> {
        self.cells[row][mode].map(|c| if metric == 0 { c.0 } else { c.1 })
    }

    pub fn to_markdown(&self, target: &str) -> String {
        let mut out = format!("# Attribution report\n\nTarget source: `{target}`\n\n");
        out.push_str("| source |");
        for metric in ["AP", "AUROC"] {
            for (_, label) in MODES {
                let _ = write!(out, " {metric} ({label}) |");
            }
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(2 * MODES.len()));
        out.push('\n');
        for (i, source) in self.sources.iter().enumerate() {
            let name = if source == HARD_AVERAGE_ROW { "**hard average**" } else { source.as_str() };
            let _ = write!(out, "| {name} |");
            for metric in 0..2 {
                for mode in 0..MODES.len() {
                    let _ = write!(out, " {} |", fixed(self.column(i, metric, mode)));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("source");
        for metric in ["ap", "auroc"] {
            for (mode, _) in MODES {
                let _ = write!(out, ",{metric}_{mode}");
            }
        }
        out.push('\n');
        for (i, source) in self.sources.iter().enumerate() {
            out.push_str(source);
            for metric in 0..2 {
                for mode in 0..MODES.len() {
                    let _ = write!(out, ",{}", full(self.column(i, metric, mode)));
                }
            }
            out.push('\n');
        }
        out
    }
}
