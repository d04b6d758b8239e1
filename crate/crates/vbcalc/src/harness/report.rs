//! Run results: per-path rows, order-stable aggregates, the CSV artifact,
//! and the human summary. Aggregation walks paths in id order over
//! preallocated slots, so the numbers cannot depend on how a thread pool
//! interleaved the work.

use std::fmt::Write as _;
use std::path::Path;

use crate::covariant::commutation::CommutationCheck;
use crate::harmonic::gauge::HarmonicityReport;
use crate::{Error, Result};

use super::config::{CheckId, CheckKind, Thresholds};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// One simulated path. Aborted paths keep their row (id and seed) with the
/// value columns empty, so path counts always reconcile.
#[derive(Debug, Clone)]
pub struct PathRow {
    pub path_id: usize,
    /// The stream seed this path drew from, derived from run seed and path id.
    pub seed: u64,
    pub terminals: Vec<f64>,
    pub residual: Option<f64>,
    pub aborted: bool,
}

/// Location and spread of the per-path residuals, over surviving paths.
#[derive(Debug, Clone, Copy)]
pub struct Aggregate {
    pub median: f64,
    pub iqr: f64,
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn from_values(vals: &[f64]) -> Aggregate {
        let count = vals.len();
        if count == 0 {
            return Aggregate {
                median: f64::NAN,
                iqr: f64::NAN,
                mean: f64::NAN,
                stderr: f64::NAN,
                count,
            };
        }
        let mut sorted = vals.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("residuals are never NaN"));
        let median = sorted[count / 2];
        let iqr = sorted[(3 * count) / 4] - sorted[count / 4];
        let mean = sorted.iter().sum::<f64>() / count as f64;
        let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (count.max(2) - 1) as f64;
        let stderr = (var / count as f64).sqrt();
        Aggregate {
            median,
            iqr,
            mean,
            stderr,
            count,
        }
    }
}

/// One refinement level of a convergence study.
#[derive(Debug, Clone, Copy)]
pub struct ConvergenceLevel {
    pub dt: f64,
    pub median: f64,
    /// Shrink factor of the median against the previous (coarser) level.
    pub ratio: Option<f64>,
    /// Pairwise order estimate against the previous level.
    pub order: Option<f64>,
    pub aborted: usize,
}

/// A step ladder with its fitted order. `exact` short-circuits the fit when
/// every level sits below the exactness floor.
#[derive(Debug, Clone)]
pub struct ConvergenceTable {
    pub levels: Vec<ConvergenceLevel>,
    pub slope: Option<f64>,
    pub exact: bool,
    pub pass: bool,
}

impl ConvergenceTable {
    /// Least-squares slope of `log median` against `log dt`, the exactness
    /// short-circuit, and the window verdict.
    pub fn fit(levels: Vec<ConvergenceLevel>, th: &Thresholds) -> ConvergenceTable {
        let exact = levels.iter().all(|l| l.median.abs() < th.exact_floor);
        if exact {
            return ConvergenceTable {
                levels,
                slope: None,
                exact: true,
                pass: true,
            };
        }
        // a level at exactly zero would break the log fit; clamp to the floor
        let pts: Vec<(f64, f64)> = levels
            .iter()
            .map(|l| (l.dt.ln(), l.median.abs().max(th.exact_floor).ln()))
            .collect();
        let m = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
        let pass = slope >= th.order_window[0] && slope <= th.order_window[1];
        ConvergenceTable {
            levels,
            slope: Some(slope),
            exact: false,
            pass,
        }
    }
}

/// Final verdict of a run, carrying the process exit code. Configuration
/// errors never reach a report; they surface as `Err` values and exit 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    StatisticalFailure,
    AbortBudgetExceeded,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => 0,
            Verdict::StatisticalFailure => 1,
            Verdict::AbortBudgetExceeded => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::StatisticalFailure => "FAIL (statistics)",
            Verdict::AbortBudgetExceeded => "FAIL (abort budget)",
        }
    }
}

/// Everything a run produces. The CSV and the summary are both derived from
/// this value alone, which is what makes reruns comparable byte for byte.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub check: CheckId,
    pub scene: String,
    pub seed: u64,
    pub paths: usize,
    pub dt: f64,
    pub horizon: f64,
    pub rows: Vec<PathRow>,
    pub residuals: Aggregate,
    pub aborted: usize,
    /// Statistics block, present for `harmonic` runs.
    pub harmonic: Option<HarmonicityReport>,
    /// Defect/curvature pair, present for `commutation` runs.
    pub commutation: Option<CommutationCheck>,
    /// Step-ladder table, present for `convergence:` runs.
    pub convergence: Option<ConvergenceTable>,
    pub verdict: Verdict,
    pub config_hash: String,
    pub version: &'static str,
}

/// Column labels for the terminal values each check records per path.
pub fn terminal_labels(kind: CheckKind) -> &'static [&'static str] {
    match kind {
        CheckKind::Prop21 => &["frame_route", "connector_route"],
        CheckKind::Prop22 => &["stratonovich", "left_point", "mixed_gradient"],
        CheckKind::Prop24 | CheckKind::Prop25 | CheckKind::Prop26 => &["pullback", "direct"],
        CheckKind::Commutation => &["defect", "curvature"],
        CheckKind::Harmonic => &["terminal"],
    }
}

fn push_float(line: &mut String, v: f64) {
    // shortest round-trip decimal; stable across runs and thread counts
    let _ = write!(line, "{v}");
}

impl ExperimentReport {
    /// Render the per-path CSV: a `#`-prefixed provenance block, one header
    /// row, one row per path id.
    pub fn csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# vbcalc {}", self.version);
        let _ = writeln!(out, "# check: {}", self.check);
        let _ = writeln!(out, "# scene: {}", self.scene);
        let _ = writeln!(out, "# config_hash: {}", self.config_hash);
        let _ = writeln!(out, "# seed: {}", self.seed);
        let _ = writeln!(out, "# paths: {}", self.paths);
        let _ = writeln!(out, "# dt: {}", self.dt);
        let _ = writeln!(out, "# horizon: {}", self.horizon);
        let _ = writeln!(out, "# verdict: {}", self.verdict.label());

        out.push_str("path_id,seed");
        for label in terminal_labels(self.check.kind) {
            out.push(',');
            out.push_str(label);
        }
        out.push_str(",residual,aborted\n");

        let width = terminal_labels(self.check.kind).len();
        for row in &self.rows {
            let _ = write!(out, "{},{}", row.path_id, row.seed);
            for j in 0..width {
                out.push(',');
                if let Some(v) = row.terminals.get(j) {
                    push_float(&mut out, *v);
                }
            }
            out.push(',');
            if let Some(r) = row.residual {
                push_float(&mut out, r);
            }
            let _ = writeln!(out, ",{}", row.aborted);
        }
        out
    }

    /// Render the convergence CSV: provenance block plus one row per level.
    pub fn convergence_csv(&self) -> Option<String> {
        let table = self.convergence.as_ref()?;
        let mut out = String::new();
        let _ = writeln!(out, "# vbcalc {}", self.version);
        let _ = writeln!(out, "# check: {}", self.check);
        let _ = writeln!(out, "# scene: {}", self.scene);
        let _ = writeln!(out, "# config_hash: {}", self.config_hash);
        let _ = writeln!(out, "# seed: {}", self.seed);
        let _ = writeln!(out, "# paths_per_level: {}", self.paths);
        match table.slope {
            Some(s) => {
                let _ = writeln!(out, "# fitted_order: {s}");
            }
            None => {
                let _ = writeln!(out, "# fitted_order: exact");
            }
        }
        out.push_str("dt,median_residual,ratio,order,aborted\n");
        for l in &table.levels {
            push_float(&mut out, l.dt);
            out.push(',');
            push_float(&mut out, l.median);
            out.push(',');
            if let Some(r) = l.ratio {
                push_float(&mut out, r);
            }
            out.push(',');
            if let Some(o) = l.order {
                push_float(&mut out, o);
            }
            let _ = writeln!(out, ",{}", l.aborted);
        }
        Some(out)
    }

    /// Multi-line human summary: verdict first, then the numbers behind it.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "check {} on scene '{}': {}",
            self.check,
            self.scene,
            self.verdict.label()
        );
        let _ = writeln!(
            s,
            "  paths {} ({} aborted), dt {}, horizon {}, seed {}",
            self.paths, self.aborted, self.dt, self.horizon, self.seed
        );
        if self.residuals.count > 0 {
            let _ = writeln!(
                s,
                "  residual median {:.6e}  iqr {:.6e}  mean {:.6e}  stderr {:.6e}",
                self.residuals.median, self.residuals.iqr, self.residuals.mean,
                self.residuals.stderr
            );
        }
        if let Some(h) = &self.harmonic {
            let _ = writeln!(
                s,
                "  martingale z {:.3} ({})  trend t {:.3} ({})  max |laplacian| {:.3e}",
                h.z,
                if h.martingale_ok { "ok" } else { "off-center" },
                h.trend_t,
                if h.trend_ok { "ok" } else { "drifting" },
                h.max_laplacian
            );
            if h.identity_gap_median.is_finite() {
                let _ = writeln!(
                    s,
                    "  identity cross-check: median gap {:.3e} at scale {:.3e}",
                    h.identity_gap_median, h.identity_scale
                );
            }
        }
        if let Some(c) = &self.commutation {
            let _ = writeln!(
                s,
                "  defect {:.6e} vs curvature value {:.6e} (gap {:.3e})",
                c.defect,
                c.curvature_term,
                c.gap()
            );
        }
        if let Some(t) = &self.convergence {
            match t.slope {
                Some(slope) => {
                    let _ = writeln!(
                        s,
                        "  convergence order {:.3} over {} levels ({})",
                        slope,
                        t.levels.len(),
                        if t.pass { "in window" } else { "out of window" }
                    );
                }
                None => {
                    let _ = writeln!(
                        s,
                        "  convergence: every level below the exactness floor"
                    );
                }
            }
            for l in &t.levels {
                let _ = writeln!(
                    s,
                    "    dt {:>10}  median {:.6e}  ratio {}",
                    l.dt,
                    l.median,
                    match l.ratio {
                        Some(r) => format!("{r:.3}"),
                        None => "-".to_string(),
                    }
                );
            }
        }
        let _ = writeln!(s, "  exit code {}", self.verdict.exit_code());
        s
    }

    /// Write the CSV (and the convergence CSV when present) plus the summary
    /// into `dir`, named after the check id. Returns the file paths written.
    pub fn write_files(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::config(format!("cannot create '{}': {e}", dir.display())))?;
        let slug = self.check.to_string().replace(':', "_");
        let mut written = Vec::new();

        let csv_path = dir.join(format!("{slug}.csv"));
        std::fs::write(&csv_path, self.csv())?;
        written.push(csv_path);

        if let Some(ccsv) = self.convergence_csv() {
            let p = dir.join(format!("{slug}_levels.csv"));
            std::fs::write(&p, ccsv)?;
            written.push(p);
        }

        let sum_path = dir.join(format!("{slug}_summary.txt"));
        std::fs::write(&sum_path, self.summary())?;
        written.push(sum_path);
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::CheckKind;

    #[test]
    fn quartiles_are_index_based_and_order_free() {
        let a = Aggregate::from_values(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(a.median, 3.0);
        assert_eq!(a.iqr, 4.0 - 2.0);
        assert_eq!(a.mean, 3.0);
        assert_eq!(a.count, 5);
        let b = Aggregate::from_values(&[]);
        assert!(b.median.is_nan());
        assert_eq!(b.count, 0);
        let c = Aggregate::from_values(&[2.5]);
        assert_eq!(c.median, 2.5);
        assert_eq!(c.stderr, 0.0);
    }

    #[test]
    fn verdicts_carry_the_exit_contract() {
        assert_eq!(Verdict::Pass.exit_code(), 0);
        assert_eq!(Verdict::StatisticalFailure.exit_code(), 1);
        assert_eq!(Verdict::AbortBudgetExceeded.exit_code(), 3);
    }

    #[test]
    fn csv_rows_align_with_the_label_row() {
        let report = ExperimentReport {
            check: CheckId {
                kind: CheckKind::Prop22,
                convergence: false,
            },
            scene: "flat".into(),
            seed: 9,
            paths: 2,
            dt: 0.5,
            horizon: 1.0,
            rows: vec![
                PathRow {
                    path_id: 0,
                    seed: 9,
                    terminals: vec![1.5, 1.25, 0.5],
                    residual: Some(0.0),
                    aborted: false,
                },
                PathRow {
                    path_id: 1,
                    seed: 8,
                    terminals: Vec::new(),
                    residual: None,
                    aborted: true,
                },
            ],
            residuals: Aggregate::from_values(&[0.0]),
            aborted: 1,
            harmonic: None,
            commutation: None,
            convergence: None,
            verdict: Verdict::AbortBudgetExceeded,
            config_hash: "f00d".into(),
            version: ARTIFACT_VERSION,
        };
        let csv = report.csv();
        let mut lines = csv.lines().skip_while(|l| l.starts_with('#'));
        assert_eq!(
            lines.next().unwrap(),
            "path_id,seed,stratonovich,left_point,mixed_gradient,residual,aborted"
        );
        assert_eq!(lines.next().unwrap(), "0,9,1.5,1.25,0.5,0,false");
        assert_eq!(lines.next().unwrap(), "1,8,,,,,true");
        assert!(csv.contains("# config_hash: f00d"));
        assert!(report.summary().contains("FAIL (abort budget)"));
    }

    #[test]
    fn exact_tables_pass_without_a_fit() {
        let th = Thresholds::default();
        let levels = vec![
            ConvergenceLevel {
                dt: 4e-3,
                median: 1e-15,
                ratio: None,
                order: None,
                aborted: 0,
            },
            ConvergenceLevel {
                dt: 2e-3,
                median: 2e-16,
                ratio: Some(5.0),
                order: Some(2.3),
                aborted: 0,
            },
            ConvergenceLevel {
                dt: 1e-3,
                median: 1e-16,
                ratio: Some(2.0),
                order: Some(1.0),
                aborted: 0,
            },
        ];
        let t = ConvergenceTable::fit(levels, &th);
        assert!(t.exact && t.pass && t.slope.is_none());
    }

    #[test]
    fn first_order_tables_fit_inside_the_window() {
        let th = Thresholds::default();
        let levels: Vec<ConvergenceLevel> = [4e-3, 2e-3, 1e-3]
            .iter()
            .map(|&dt| ConvergenceLevel {
                dt,
                median: 3.0 * dt,
                ratio: None,
                order: None,
                aborted: 0,
            })
            .collect();
        let t = ConvergenceTable::fit(levels, &th);
        assert!(!t.exact);
        assert!((t.slope.unwrap() - 1.0).abs() < 1e-9);
        assert!(t.pass);
    }
}
