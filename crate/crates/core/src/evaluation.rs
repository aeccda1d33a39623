//! Accuracy and robustness reporting: clean accuracy, per-budget universal
//! perturbation accuracy, the weighted combination of the two, and CSV/text
//! emitters with a fixed schema.
//!
//! All accuracies are percentages in [0, 100]. Displayed values are rounded
//! to one decimal with halves rounding up (90.25 prints as 90.3); CSV files
//! keep full precision.

use std::collections::BTreeMap;

use crate::data::Dataset;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::uap::{worst_case_uap, UapConfig};

pub const DEFAULT_WEIGHT: f64 = 0.5;
/// Budgets of the standard evaluation grid, as percent keys.
pub const EPSILON_GRID: [f64; 4] = [0.10, 0.15, 0.20, 0.25];

/// Percent of `ds` classified correctly.
pub fn clean_accuracy(target: &Ensemble, ds: &Dataset) -> Result<f64> {
    let mut right = 0usize;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(512) {
        let (bx, labels) = ds.batch(chunk);
        let pred = target.predict(&bx)?;
        right += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(100.0 * right as f64 / ds.len() as f64)
}

fn eps_key(eps: f64) -> u32 {
    (eps * 100.0).round() as u32
}

/// Worst-case robust accuracy per budget, plus their mean.
///
/// For each epsilon the attack reruns its full restart sweep (crafting on
/// `craft_ds`, measuring on `eval_ds`); the result maps `round(eps * 100)`
/// to the percentage of `eval_ds` still classified correctly under the
/// strongest perturbation found.
pub fn mean_uap_accuracy(
    target: &Ensemble,
    eval_ds: &Dataset,
    craft_ds: &Dataset,
    base: &UapConfig,
    epsilons: &[f64],
) -> Result<(BTreeMap<u32, f64>, f64)> {
    if epsilons.is_empty() {
        return Err(Error::InvalidArgument("need at least one budget".into()));
    }
    let mut per_eps = BTreeMap::new();
    for &eps in epsilons {
        let cfg = base.with_epsilon(eps)?;
        let worst = worst_case_uap(target, craft_ds, eval_ds, &cfg)?;
        per_eps.insert(eps_key(eps), 100.0 * (1.0 - worst.success_rate));
    }
    let mean = per_eps.values().sum::<f64>() / per_eps.len() as f64;
    Ok((per_eps, mean))
}

/// `w * clean + (1 - w) * mean_uap`, both in percent.
pub fn weighted_accuracy(clean: f64, mean_uap: f64, w: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidArgument(format!("weight {w} outside [0, 1]")));
    }
    if !clean.is_finite() || !mean_uap.is_finite() {
        return Err(Error::NonFinite("weighted_accuracy inputs"));
    }
    Ok(w * clean + (1.0 - w) * mean_uap)
}

/// Round to one decimal with halves going up: 90.25 -> 90.3, 90.24 -> 90.2.
pub fn round_half_up_1dp(x: f64) -> f64 {
    (x * 10.0 + 0.5).floor() / 10.0
}

/// Display form of a percentage, one decimal, half-up.
pub fn fmt1(x: f64) -> String {
    format!("{:.1}", round_half_up_1dp(x))
}

/// One evaluated configuration, ready for the report emitters.
#[derive(Clone, Debug)]
pub struct RobustnessReport {
    pub method: String,
    pub learners: usize,
    pub lambda_jr: f64,
    /// Percent correct on clean inputs.
    pub clean: f64,
    /// Percent correct under the worst perturbation, keyed by percent budget.
    pub uap: BTreeMap<u32, f64>,
    pub mean_uap: f64,
    pub weighted: f64,
    pub w: f64,
}

impl RobustnessReport {
    pub fn new(
        method: impl Into<String>,
        learners: usize,
        lambda_jr: f64,
        clean: f64,
        uap: BTreeMap<u32, f64>,
        w: f64,
    ) -> Result<RobustnessReport> {
        if uap.is_empty() {
            return Err(Error::InvalidArgument("no robustness entries".into()));
        }
        let mean_uap = uap.values().sum::<f64>() / uap.len() as f64;
        let weighted = weighted_accuracy(clean, mean_uap, w)?;
        let r = RobustnessReport {
            method: method.into(),
            learners,
            lambda_jr,
            clean,
            uap,
            mean_uap,
            weighted,
            w,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let pct = |v: f64| (0.0..=100.0).contains(&v);
        if !pct(self.clean) || !pct(self.mean_uap) || !pct(self.weighted) {
            return Err(Error::InvalidArgument(format!(
                "accuracy outside [0, 100]: clean {}, mean_uap {}, weighted {}",
                self.clean, self.mean_uap, self.weighted
            )));
        }
        if self.uap.values().any(|&v| !pct(v)) {
            return Err(Error::InvalidArgument("uap accuracy outside [0, 100]".into()));
        }
        if self.learners == 0 {
            return Err(Error::InvalidArgument("learners must be positive".into()));
        }
        Ok(())
    }
}

fn sorted_desc(reports: &[RobustnessReport]) -> Vec<&RobustnessReport> {
    let mut rows: Vec<&RobustnessReport> = reports.iter().collect();
    rows.sort_by(|a, b| b.weighted.total_cmp(&a.weighted));
    rows
}

/// Fixed-schema CSV, full precision, sorted by weighted accuracy descending.
/// Budgets outside a row's map produce empty cells.
pub fn emit_report_csv(reports: &[RobustnessReport]) -> String {
    let mut out =
        String::from("method,learners,lambda_jr,clean,uap_010,uap_015,uap_020,uap_025,mean_uap,weighted,w\n");
    for r in sorted_desc(reports) {
        let cell = |key: u32| -> String {
            r.uap.get(&key).map_or(String::new(), |v| format!("{v}"))
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.learners,
            r.lambda_jr,
            r.clean,
            cell(10),
            cell(15),
            cell(20),
            cell(25),
            r.mean_uap,
            r.weighted,
            r.w
        ));
    }
    out
}

/// Human-oriented table with one-decimal display rounding, sorted by
/// weighted accuracy descending.
pub fn emit_report_table(reports: &[RobustnessReport]) -> String {
    let rows: Vec<[String; 6]> = sorted_desc(reports)
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                r.learners.to_string(),
                format!("{}", r.lambda_jr),
                fmt1(r.clean),
                fmt1(r.mean_uap),
                fmt1(r.weighted),
            ]
        })
        .collect();
    let header = ["Ensemble", "Learners", "Lambda_JR", "Clean", "Avg UAP", "Weighted"];
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let fmt_row = |cells: &[String]| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        parts.join("  ")
    };
    let head: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    let mut out = fmt_row(&head);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in &rows {
        out.push_str(&fmt_row(row));
        out.push('\n');
    }
    out
}

/// Best row (by weighted accuracy) in each baseline category. Categories
/// with no rows are omitted.
pub fn best_of_categories(reports: &[RobustnessReport]) -> Vec<(&'static str, usize)> {
    let mut out = Vec::new();
    let best = |pred: &dyn Fn(&RobustnessReport) -> bool| -> Option<usize> {
        reports
            .iter()
            .enumerate()
            .filter(|(_, r)| pred(r))
            .max_by(|(_, a), (_, b)| a.weighted.total_cmp(&b.weighted))
            .map(|(i, _)| i)
    };
    if let Some(i) = best(&|r| r.learners == 1 && r.lambda_jr > 0.0) {
        out.push(("JR Only", i));
    }
    if let Some(i) = best(&|r| r.learners > 1 && r.lambda_jr == 0.0) {
        out.push(("Ensemble Only", i));
    }
    if let Some(i) = best(&|r| r.learners == 1 && r.lambda_jr == 0.0) {
        out.push(("Standard", i));
    }
    out
}

/// Minimal scatter of clean vs mean robust accuracy, one circle per row.
pub fn tradeoff_svg(reports: &[RobustnessReport]) -> String {
    let (w, h, pad) = (480.0, 360.0, 48.0);
    let sx = |v: f64| pad + v / 100.0 * (w - 2.0 * pad);
    let sy = |v: f64| h - pad - v / 100.0 * (h - 2.0 * pad);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    s.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        sx(0.0), sy(0.0), sx(100.0), sy(0.0),
        sx(0.0), sy(0.0), sx(0.0), sy(100.0),
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">clean %</text>\n<text x=\"{}\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 14 {})\">mean UAP %</text>\n",
        w / 2.0 - 24.0,
        h - 12.0,
        14.0,
        h / 2.0,
        h / 2.0,
    ));
    for r in sorted_desc(reports) {
        let (cx, cy) = (sx(r.clean), sy(r.mean_uap));
        s.push_str(&format!(
            "<circle cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"4\" fill=\"steelblue\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"9\">{} M={} lam={}</text>\n",
            cx + 6.0,
            cy + 3.0,
            r.method,
            r.learners,
            r.lambda_jr
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(method: &str, m: usize, lam: f64, clean: f64, uaps: &[(u32, f64)]) -> RobustnessReport {
        RobustnessReport::new(
            method,
            m,
            lam,
            clean,
            uaps.iter().copied().collect(),
            DEFAULT_WEIGHT,
        )
        .unwrap()
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(fmt1(90.25), "90.3");
        assert_eq!(fmt1(90.24), "90.2");
        assert_eq!(fmt1(90.351), "90.4");
        assert_eq!(fmt1(100.0), "100.0");
        assert_eq!(round_half_up_1dp(0.05), 0.1);
    }

    #[test]
    fn weighted_examples() {
        let w = weighted_accuracy(97.8, 82.8, 0.5).unwrap();
        assert_eq!(fmt1(w), "90.3");
        let w = weighted_accuracy(99.1, 31.9, 0.5).unwrap();
        assert_eq!(fmt1(w), "65.5");
        assert!(weighted_accuracy(50.0, 50.0, 1.5).is_err());
        assert!(weighted_accuracy(50.0, 50.0, -0.1).is_err());
        // Degenerate weights collapse to one side.
        assert_eq!(weighted_accuracy(80.0, 20.0, 1.0).unwrap(), 80.0);
        assert_eq!(weighted_accuracy(80.0, 20.0, 0.0).unwrap(), 20.0);
    }

    #[test]
    fn csv_schema_and_sorting() {
        let a = report("snapshot", 3, 0.1, 97.8, &[(10, 90.0), (15, 85.0), (20, 80.0), (25, 76.2)]);
        let b = report("single", 1, 0.0, 99.0, &[(10, 40.0), (15, 30.0), (20, 20.0), (25, 10.0)]);
        let csv = emit_report_csv(&[b, a]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,learners,lambda_jr,clean,uap_010,uap_015,uap_020,uap_025,mean_uap,weighted,w"
        );
        // Higher weighted row (snapshot) must come first.
        let first = lines.next().unwrap();
        assert!(first.starts_with("snapshot,3,0.1,97.8,90,85,80,76.2,"), "{first}");
        let second = lines.next().unwrap();
        assert!(second.starts_with("single,1,0,99,"), "{second}");
        assert!(lines.next().is_none());
    }

    #[test]
    fn csv_blank_cells_for_missing_budgets() {
        let r = report("single", 1, 0.0, 95.0, &[(15, 50.0)]);
        let csv = emit_report_csv(&[r]);
        let row = csv.lines().nth(1).unwrap();
        assert!(row.starts_with("single,1,0,95,,50,,,"), "{row}");
    }

    #[test]
    fn table_uses_display_rounding() {
        let r = report("bagging", 6, 0.05, 90.25, &[(10, 82.84), (15, 82.76)]);
        let table = emit_report_table(&[r]);
        assert!(table.contains("90.3"), "{table}");
        assert!(table.contains("82.8"), "{table}");
        assert!(table.lines().next().unwrap().contains("Weighted"));
    }

    #[test]
    fn category_bests() {
        let rows = vec![
            report("single", 1, 0.0, 99.0, &[(10, 30.0)]),
            report("single", 1, 0.1, 98.0, &[(10, 60.0)]),
            report("single", 1, 0.5, 96.0, &[(10, 64.0)]),
            report("bagging", 3, 0.0, 98.5, &[(10, 45.0)]),
            report("snapshot", 3, 0.1, 98.0, &[(10, 80.0)]),
        ];
        let best = best_of_categories(&rows);
        assert_eq!(best, vec![("JR Only", 2), ("Ensemble Only", 3), ("Standard", 0)]);
    }

    #[test]
    fn svg_smoke() {
        let r = report("single", 1, 0.0, 90.0, &[(10, 50.0)]);
        let svg = tradeoff_svg(&[r]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("circle"));
        assert!(svg.ends_with("</svg>\n"));
    }
}
