//! Module-switch ablation grid and the masked-category generalization protocol.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::Category;
use crate::harness::checkpoint::RunConfig;
use crate::harness::config::Config;
use crate::harness::evaluate::evaluate_model;
use crate::harness::train::train;
use crate::metrics::{generalization_index, MetricReport, ReportOptions, SpeedGroup};
use crate::model::Switches;
use crate::sim::BenchmarkSplits;

/// Row label and enabled modules (pattern extractor, pattern generator,
/// latent modeling, pattern fusion) of every ablation row, in table order.
pub fn ablation_rows() -> Vec<(&'static str, Switches)> {
    vec![
        ("Baseline", Switches::new(false, false, false, false)),
        ("(a)", Switches::new(true, false, false, false)),
        ("(b)", Switches::new(false, true, false, false)),
        ("(c)", Switches::new(true, true, false, false)),
        ("(d)", Switches::new(false, false, true, false)),
        ("(e)", Switches::new(false, false, true, true)),
        ("(f)", Switches::new(true, true, true, true)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub switches: Switches,
    pub report: MetricReport,
    pub train_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn mark(on: bool) -> &'static str {
    if on {
        "x"
    } else {
        ""
    }
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| | P.E. | P.G. | L.M. | P.F. | Static mean | Static median | Slow mean | Slow median | Fast mean | Fast median | Stability |\n\
             |---|:-:|:-:|:-:|:-:|--:|--:|--:|--:|--:|--:|--:|\n",
        );
        for r in &self.rows {
            let m = r.switches.marks();
            let _ = write!(s, "| {} | {} | {} | {} | {} |", r.name, mark(m[0]), mark(m[1]), mark(m[2]), mark(m[3]));
            for g in SpeedGroup::ALL {
                let e = r.report.groups.get(g);
                let _ = write!(s, " {} | {} |", fmt_opt(e.map(|e| e.mean)), fmt_opt(e.map(|e| e.median)));
            }
            let _ = writeln!(s, " {} |", fmt_opt(r.report.stability.map(|x| x.mean_variance)));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "row,pe,pg,lm,pf,static_mean,static_median,slow_mean,slow_median,fast_mean,fast_median,stability,train_secs\n",
        );
        let num = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
        for r in &self.rows {
            let m = r.switches.marks();
            let _ = write!(s, "{},{},{},{},{}", r.name, m[0] as u8, m[1] as u8, m[2] as u8, m[3] as u8);
            for g in SpeedGroup::ALL {
                let e = r.report.groups.get(g);
                let _ = write!(s, ",{},{}", num(e.map(|e| e.mean)), num(e.map(|e| e.median)));
            }
            let _ = writeln!(s, ",{},{:.1}", num(r.report.stability.map(|x| x.mean_variance)), r.train_secs);
        }
        s
    }
}

fn run_config(cfg: &Config, switches: Switches) -> RunConfig {
    let mut model = cfg.model.clone();
    model.switches = switches;
    RunConfig { model, train: cfg.train.clone(), grid: cfg.grid.clone() }
}

/// Trains and evaluates (on the test split) one model per requested row.
/// With `out_dir`, each row's logs and checkpoints go to `out_dir/<slug>`.
pub fn run_ablation(
    cfg: &Config,
    splits: &BenchmarkSplits,
    rows: &[(&str, Switches)],
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for (name, switches) in rows {
        let dir = out_dir.map(|d| d.join(slug(name)));
        log::info!("ablation row {name}: training");
        let (model, record) = train(run_config(cfg, *switches), &splits.train, Some(&splits.val), dir.as_deref())?;
        let report = evaluate_model(&model, &splits.test, ReportOptions { focus: cfg.focus_category })?;
        table.rows.push(AblationRow {
            name: name.to_string(),
            switches: *switches,
            report,
            train_secs: record.wall_clock_secs,
        });
    }
    Ok(table)
}

fn slug(name: &str) -> String {
    let s: String = name.chars().filter(char::is_ascii_alphanumeric).collect();
    s.to_ascii_lowercase()
}

/// One model variant under the masked-category protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationRow {
    pub name: String,
    pub switches: Switches,
    pub category: Category,
    /// Fast-group mean error on cells of `category`, trained on all data.
    pub full_error: f64,
    /// The same, trained without `category`.
    pub masked_error: f64,
    pub gi: f64,
}

/// Trains every variant twice (full and masked training split) and evaluates
/// both on the shared test split restricted to `category`.
pub fn masked_generalization(
    cfg: &Config,
    full: &BenchmarkSplits,
    masked: &BenchmarkSplits,
    category: Category,
    rows: &[(&str, Switches)],
) -> Result<Vec<GeneralizationRow>> {
    let opts = ReportOptions { focus: Some(category) };
    let fast_error = |splits: &BenchmarkSplits, switches: Switches| -> Result<f64> {
        let (model, _) = train(run_config(cfg, switches), &splits.train, None, None)?;
        let report = evaluate_model(&model, &full.test, opts)?;
        category_fast_mean(&report)
    };
    let mut out = Vec::new();
    for (name, switches) in rows {
        let full_error = fast_error(full, *switches)?;
        let masked_error = fast_error(masked, *switches)?;
        out.push(GeneralizationRow {
            name: name.to_string(),
            switches: *switches,
            category,
            full_error,
            masked_error,
            gi: generalization_index(full_error, masked_error)?,
        });
    }
    Ok(out)
}

/// Fast-group mean on the focus category of a report.
pub fn category_fast_mean(report: &MetricReport) -> Result<f64> {
    report
        .category_groups
        .as_ref()
        .and_then(|(_, g)| g.fast)
        .map(|s| s.mean)
        .ok_or_else(|| crate::error::Error::Data("no fast cells of the focus category in the test split".into()))
}

pub fn generalization_markdown(rows: &[GeneralizationRow]) -> String {
    let mut s = String::from("| Method | Masked category | Fast mean | Fast mean (masked) | GI (%) |\n|---|---|--:|--:|--:|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {:.4} | {:.4} | {:.1} |",
            r.name,
            r.category.label(),
            r.full_error,
            r.masked_error,
            r.gi
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_cover_the_table() {
        let rows = ablation_rows();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[0].1, Switches::baseline());
        assert_eq!(rows[6].1, Switches::full());
        let marks: Vec<[bool; 4]> = rows.iter().map(|r| r.1.marks()).collect();
        assert_eq!(marks[3], [true, true, false, false]);
        assert_eq!(marks[5], [false, false, true, true]);
    }

    #[test]
    fn slugs_are_path_safe() {
        assert_eq!(slug("(f)"), "f");
        assert_eq!(slug("Baseline"), "baseline");
    }
}
