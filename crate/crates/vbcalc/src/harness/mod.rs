//! Experiment runner: fan a check out over an ensemble of paths, aggregate,
//! decide, and emit the artifacts. Per-path work is farmed out to a thread
//! pool, but every path owns a slot keyed by its id and draws from its own
//! seed, so reports are reproducible bit for bit at any thread count.

pub mod config;
pub mod report;

pub use config::{
    load_config, parse_config, CheckId, CheckKind, ExperimentConfig, Thresholds, CHECK_NAMES,
};
pub use report::{
    terminal_labels, Aggregate, ConvergenceLevel, ConvergenceTable, ExperimentReport, PathRow,
    Verdict, ARTIFACT_VERSION,
};

use rayon::prelude::*;

use crate::covariant::bundle_map::{
    builtin_map, bundle_map_ito_residual, bundle_map_mixed_residual, bundle_map_strat_residual,
    BundleMap,
};
use crate::covariant::commutation::{commutation_defect, shifted_parallel_family};
use crate::covariant::{
    conversion_parts, covariant_stratonovich_connector_field, covariant_stratonovich_frame_field,
    decompose,
};
use crate::geometry::fields::FieldKind;
use crate::geometry::Scene;
use crate::harmonic::gauge::{harmonicity_check, section_identity_parts, HarmonicityConfig};
use crate::harmonic::{one_form_scene, PFormSection};
use crate::paths::{
    path_rng, simulate_bundle_path, stream_seed, BaseDynamics, FiberDynamics, Increments, TimeGrid,
};
use crate::{Error, Result};

use config::Prepared;
use nalgebra::DMatrix;

/// Run the configured check once, over its ensemble, and return the full
/// report. Configs that name a `convergence:` check are routed to
/// [`convergence_study`] and rejected here.
pub fn run_check(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let prep = cfg.prepare()?;
    if prep.id.convergence {
        return Err(Error::config(format!(
            "check '{}' declares a step ladder; run it through the convergence command \
             with --steps",
            prep.id
        )));
    }
    match prep.id.kind {
        CheckKind::Harmonic => run_harmonic(cfg, &prep),
        CheckKind::Commutation => run_commutation(cfg, &prep),
        _ => run_residual(cfg, &prep),
    }
}

/// Run the check across a ladder of step sizes sharing one family of
/// drivers: each path draws its noise once on the finest grid and every
/// coarser level sums the same increments blockwise. The ladder must be
/// nested — each step an integer multiple of the next — or it is rejected.
pub fn convergence_study(cfg: &ExperimentConfig, steps: &[f64]) -> Result<ExperimentReport> {
    let prep = cfg.prepare()?;
    let th = &cfg.thresholds;
    let c = &cfg.check;

    if steps.len() < 3 {
        return Err(Error::config(format!(
            "a convergence study needs at least 3 step sizes, got {}",
            steps.len()
        )));
    }
    let mut dts = steps.to_vec();
    if dts.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
        return Err(Error::config("step sizes must be positive numbers"));
    }
    dts.sort_by(|a, b| b.partial_cmp(a).expect("finite steps"));
    for w in dts.windows(2) {
        let f = w[0] / w[1];
        if (f - f.round()).abs() > 1e-9 || f < 2.0 {
            return Err(Error::config(format!(
                "steps are not nested: {} is not an integer multiple of {}",
                w[0], w[1]
            )));
        }
    }
    let fine = dts[dts.len() - 1];
    let fine_steps_f = c.horizon / fine;
    for &dt in &dts {
        let n = c.horizon / dt;
        if (n - n.round()).abs() > 1e-9 * n.round().max(1.0) || n.round() < 1.0 {
            return Err(Error::config(format!(
                "step {} does not divide the horizon {} into whole steps",
                dt, c.horizon
            )));
        }
    }
    let fine_steps = fine_steps_f.round() as usize;

    let mut levels = Vec::with_capacity(dts.len());
    let mut finest_rows = Vec::new();
    let mut prev_median: Option<(f64, f64)> = None;
    for &dt in &dts {
        let factor = (dt / fine).round() as usize;
        let grid = TimeGrid::new(0.0, dt, fine_steps / factor);
        let rows = match prep.id.kind {
            CheckKind::Commutation => vec![commutation_row(cfg, &prep, grid)?],
            _ => ensemble_rows(cfg, &prep, grid, fine_steps, factor)?,
        };
        let vals: Vec<f64> = rows.iter().filter_map(|r| r.residual).collect();
        let agg = Aggregate::from_values(&vals);
        let aborted = rows.iter().filter(|r| r.aborted).count();
        let floor = th.exact_floor;
        let (ratio, order) = match prev_median {
            Some((pm, pdt)) => {
                let r = pm.max(floor) / agg.median.max(floor);
                (Some(r), Some(r.ln() / (pdt / dt).ln()))
            }
            None => (None, None),
        };
        prev_median = Some((agg.median, dt));
        levels.push(ConvergenceLevel {
            dt,
            median: agg.median,
            ratio,
            order,
            aborted,
        });
        if dt == fine {
            finest_rows = rows;
        }
    }

    let over_budget = levels
        .iter()
        .any(|l| l.aborted as f64 > th.abort_budget * c.paths.max(1) as f64);
    let table = ConvergenceTable::fit(levels, th);
    let verdict = if over_budget {
        Verdict::AbortBudgetExceeded
    } else if table.pass {
        Verdict::Pass
    } else {
        Verdict::StatisticalFailure
    };

    let vals: Vec<f64> = finest_rows.iter().filter_map(|r| r.residual).collect();
    Ok(ExperimentReport {
        check: CheckId {
            kind: prep.id.kind,
            convergence: true,
        },
        scene: prep.scene.name.clone(),
        seed: c.seed,
        paths: c.paths,
        dt: fine,
        horizon: c.horizon,
        residuals: Aggregate::from_values(&vals),
        aborted: finest_rows.iter().filter(|r| r.aborted).count(),
        rows: finest_rows,
        harmonic: None,
        commutation: None,
        convergence: Some(table),
        verdict,
        config_hash: cfg.hash(),
        version: ARTIFACT_VERSION,
    })
}

// ───────────────────────── per-kind runners ─────────────────────────

fn run_residual(cfg: &ExperimentConfig, prep: &Prepared) -> Result<ExperimentReport> {
    let c = &cfg.check;
    let rows = ensemble_rows(cfg, prep, prep.grid, prep.grid.steps, 1)?;
    let vals: Vec<f64> = rows.iter().filter_map(|r| r.residual).collect();
    let agg = Aggregate::from_values(&vals);
    let aborted = rows.iter().filter(|r| r.aborted).count();

    let verdict = if aborted as f64 > cfg.thresholds.abort_budget * c.paths as f64 {
        Verdict::AbortBudgetExceeded
    } else if matches!(c.max_residual, Some(m) if !(agg.median <= m)) {
        Verdict::StatisticalFailure
    } else {
        Verdict::Pass
    };

    Ok(ExperimentReport {
        check: prep.id,
        scene: prep.scene.name.clone(),
        seed: c.seed,
        paths: c.paths,
        dt: c.dt,
        horizon: c.horizon,
        residuals: agg,
        aborted,
        rows,
        harmonic: None,
        commutation: None,
        convergence: None,
        verdict,
        config_hash: cfg.hash(),
        version: ARTIFACT_VERSION,
    })
}

fn run_commutation(cfg: &ExperimentConfig, prep: &Prepared) -> Result<ExperimentReport> {
    let th = &cfg.thresholds;
    let row = commutation_row(cfg, prep, prep.grid)?;
    let aborted = row.aborted as usize;

    let mut commutation = None;
    let verdict = if row.aborted {
        Verdict::AbortBudgetExceeded
    } else {
        let defect = row.terminals[0];
        let curvature = row.terminals[1];
        let gap = row.residual.unwrap_or(f64::INFINITY);
        let exact = defect.abs() <= th.exact_floor && curvature.abs() <= th.exact_floor;
        let matched = gap <= th.commutation_rel * curvature.abs().max(th.exact_floor);
        let gated = !matches!(cfg.check.max_residual, Some(m) if !(gap <= m));
        commutation = Some(crate::covariant::commutation::CommutationCheck {
            defect,
            curvature_term: curvature,
        });
        if (exact || matched) && gated {
            Verdict::Pass
        } else {
            Verdict::StatisticalFailure
        }
    };

    let vals: Vec<f64> = row.residual.into_iter().collect();
    Ok(ExperimentReport {
        check: prep.id,
        scene: prep.scene.name.clone(),
        seed: cfg.check.seed,
        paths: 1,
        dt: cfg.check.dt,
        horizon: cfg.check.horizon,
        residuals: Aggregate::from_values(&vals),
        aborted,
        rows: vec![row],
        harmonic: None,
        commutation,
        convergence: None,
        verdict,
        config_hash: cfg.hash(),
        version: ARTIFACT_VERSION,
    })
}

fn run_harmonic(cfg: &ExperimentConfig, prep: &Prepared) -> Result<ExperimentReport> {
    let s = &prep.scene;
    let c = &cfg.check;
    let th = &cfg.thresholds;

    let sigma_field = s.field(c.sigma.as_deref().expect("validated"))?.clone();
    let sigma = PFormSection::new(s, prep.degree, sigma_field)?;
    let theta = s.field(c.theta.as_deref().expect("validated"))?;
    let phi = match &c.phi {
        Some(n) => Some(s.field_of_kind(n, FieldKind::Endomorphism)?),
        None => None,
    };

    let mut hc = HarmonicityConfig::new(prep.grid, c.x0.clone());
    hc.n_paths = c.paths;
    hc.seed = c.seed;
    hc.v_field = match &c.vgauge {
        Some(n) => Some(s.field_of_kind(n, FieldKind::Endomorphism)?.clone()),
        None => None,
    };
    let rep = harmonicity_check(s, &sigma, theta, phi, &hc)?;

    let rows: Vec<PathRow> = rep
        .path_terminals
        .iter()
        .zip(&rep.path_identity)
        .enumerate()
        .map(|(i, (t, g))| PathRow {
            path_id: i,
            seed: stream_seed(c.seed, i as u64),
            terminals: t.map(|v| vec![v]).unwrap_or_default(),
            residual: *g,
            aborted: t.is_none(),
        })
        .collect();

    // the statistic gates are re-applied here so a config override of z_max
    // takes effect without re-running the ensemble
    let martingale_ok = rep.z.abs() < th.z_max;
    let trend_ok = rep.trend_t.abs() < th.z_max;
    let harmonic_ok = martingale_ok && trend_ok;
    let gated = !matches!(
        c.max_residual,
        Some(m) if rep.identity_gap_median.is_finite() && !(rep.identity_gap_median <= m)
    );

    let verdict = if rep.paths_aborted as f64 > th.abort_budget * c.paths as f64 {
        Verdict::AbortBudgetExceeded
    } else if harmonic_ok && gated {
        Verdict::Pass
    } else {
        Verdict::StatisticalFailure
    };

    let gaps: Vec<f64> = rep.path_identity.iter().flatten().copied().collect();
    let mut rep = rep;
    rep.martingale_ok = martingale_ok;
    rep.trend_ok = trend_ok;
    rep.harmonic = harmonic_ok;

    Ok(ExperimentReport {
        check: prep.id,
        scene: prep.scene.name.clone(),
        seed: c.seed,
        paths: c.paths,
        dt: c.dt,
        horizon: c.horizon,
        residuals: Aggregate::from_values(&gaps),
        aborted: rep.paths_aborted,
        rows,
        harmonic: Some(rep),
        commutation: None,
        convergence: None,
        verdict,
        config_hash: cfg.hash(),
        version: ARTIFACT_VERSION,
    })
}

// ───────────────────────── shared path fan-out ─────────────────────────

/// Simulate and score every path of the ensemble at the given grid. The
/// driver is always drawn on the finest grid (`fine_steps` rows) and summed
/// down by `factor`, so refinement levels see the same Brownian paths.
fn ensemble_rows(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    grid: TimeGrid,
    fine_steps: usize,
    factor: usize,
) -> Result<Vec<PathRow>> {
    let s = &prep.scene;
    let c = &cfg.check;
    let kind = prep.id.kind;

    let map = match kind {
        CheckKind::Prop24 | CheckKind::Prop25 | CheckKind::Prop26 => Some(builtin_map(
            c.map.as_deref().expect("validated"),
            s,
        )?),
        _ => None,
    };
    let (drift, diffusion) = match kind {
        CheckKind::Harmonic => (None, None),
        _ => cfg.fiber_fields(s)?,
    };
    let cols = s.dim() + diffusion.map_or(0, |f| f.cols);

    // the derived scene for a degree-1 section's flattened components
    let sep_owned;
    let (sigma, sep, theta_h, vgauge) = if kind == CheckKind::Harmonic {
        let f = s.field(c.sigma.as_deref().expect("validated"))?.clone();
        let sigma = PFormSection::new(s, prep.degree, f)?;
        let sep: &Scene = if prep.degree == 0 {
            s
        } else {
            sep_owned = one_form_scene(s);
            &sep_owned
        };
        let theta = s.field(c.theta.as_deref().expect("validated"))?;
        let vg = match &c.vgauge {
            Some(n) => Some(s.field_of_kind(n, FieldKind::Endomorphism)?),
            None => None,
        };
        (Some(sigma), Some(sep), Some(theta), vg)
    } else {
        (None, None, None, None)
    };

    let v0 = if kind == CheckKind::Harmonic {
        vec![0.0; s.rank()]
    } else {
        prep.v0.clone()
    };
    let fiber = match (drift, diffusion) {
        (None, None) => FiberDynamics::Frozen,
        (drift, diffusion) => FiberDynamics::DriftDiffusion { drift, diffusion },
    };
    let ident = DMatrix::identity(s.rank(), s.rank());

    (0..c.paths)
        .into_par_iter()
        .map(|i| -> Result<PathRow> {
            let run = || -> Result<(Vec<f64>, f64)> {
                let mut rng = path_rng(c.seed, i as u64);
                let fine = Increments::gaussian(&mut rng, fine_steps, cols, grid.dt / factor as f64);
                let driver = if factor == 1 { fine } else { fine.coarsen(factor) };
                let path = simulate_bundle_path(
                    s,
                    BaseDynamics::Brownian,
                    fiber,
                    &c.x0,
                    &v0,
                    grid,
                    &driver,
                )?;
                match kind {
                    CheckKind::Prop21 => {
                        let theta =
                            s.field_of_kind(c.theta.as_deref().expect("validated"), FieldKind::Covector)?;
                        let fp = decompose(s, path.clone(), &ident)?;
                        let a = *covariant_stratonovich_frame_field(s, theta, &fp)
                            .last()
                            .expect("cumulative");
                        let b = *covariant_stratonovich_connector_field(s, theta, &path)?
                            .last()
                            .expect("cumulative");
                        Ok((vec![a, b], (a - b).abs()))
                    }
                    CheckKind::Prop22 => {
                        let theta =
                            s.field_of_kind(c.theta.as_deref().expect("validated"), FieldKind::Covector)?;
                        let fp = decompose(s, path, &ident)?;
                        let parts = conversion_parts(s, theta, &fp);
                        Ok((
                            vec![parts.strat, parts.ito, parts.mixed_nabla],
                            parts.residual(),
                        ))
                    }
                    CheckKind::Prop24 | CheckKind::Prop25 | CheckKind::Prop26 => {
                        let map: &BundleMap = map.as_ref().expect("built above");
                        let chk = match kind {
                            CheckKind::Prop24 => bundle_map_strat_residual(
                                s,
                                map,
                                c.theta.as_deref().expect("validated"),
                                &path,
                            )?,
                            CheckKind::Prop25 => bundle_map_mixed_residual(
                                s,
                                map,
                                c.b.as_deref().expect("validated"),
                                &path,
                            )?,
                            _ => bundle_map_ito_residual(
                                s,
                                map,
                                c.theta.as_deref().expect("validated"),
                                &path,
                            )?,
                        };
                        Ok((vec![chk.lhs, chk.rhs], chk.gap()))
                    }
                    CheckKind::Harmonic => {
                        let parts = section_identity_parts(
                            s,
                            sep.expect("built above"),
                            sigma.as_ref().expect("built above"),
                            theta_h.expect("built above"),
                            vgauge,
                            &path,
                        )?;
                        Ok((vec![parts.lhs], parts.gap()))
                    }
                    CheckKind::Commutation => unreachable!("commutation has its own runner"),
                }
            };
            match run() {
                Ok((terminals, residual))
                    if residual.is_finite() && terminals.iter().all(|t| t.is_finite()) =>
                {
                    Ok(PathRow {
                        path_id: i,
                        seed: stream_seed(c.seed, i as u64),
                        terminals,
                        residual: Some(residual),
                        aborted: false,
                    })
                }
                Err(e) if e.is_config() => Err(e),
                // runtime aborts (chart exit, degenerate frame) and non-finite
                // results (NaN/inf escaping a user field) keep the row
                _ => Ok(PathRow {
                    path_id: i,
                    seed: stream_seed(c.seed, i as u64),
                    terminals: Vec::new(),
                    residual: None,
                    aborted: true,
                }),
            }
        })
        .collect()
}

/// The deterministic commutation family: one row, no noise.
fn commutation_row(cfg: &ExperimentConfig, prep: &Prepared, grid: TimeGrid) -> Result<PathRow> {
    let s = &prep.scene;
    let c = &cfg.check;
    let theta = c.theta.as_deref().expect("validated");
    let vel = s.field_of_kind(c.velocity.as_deref().expect("validated"), FieldKind::Velocity)?;
    let da = c.shift.unwrap_or(1e-2);
    let coord = c.shift_coord.unwrap_or(0);

    let run = || -> Result<(Vec<f64>, f64)> {
        let fam =
            shifted_parallel_family(s, &c.x0, &prep.v0, coord, &[-da, 0.0, da], vel, grid)?;
        let chk = commutation_defect(s, theta, &fam, 1)?;
        Ok((vec![chk.defect, chk.curvature_term], chk.gap()))
    };
    match run() {
        Ok((terminals, residual))
            if residual.is_finite() && terminals.iter().all(|t| t.is_finite()) =>
        {
            Ok(PathRow {
                path_id: 0,
                seed: c.seed,
                terminals,
                residual: Some(residual),
                aborted: false,
            })
        }
        Err(e) if e.is_config() => Err(e),
        _ => Ok(PathRow {
            path_id: 0,
            seed: c.seed,
            terminals: Vec::new(),
            residual: None,
            aborted: true,
        }),
    }
}
