//! Gauge transport along sampled paths, martingale diagnostics, and the
//! pathwise identity connecting a gauged section's Ito integral to its
//! gradient and Hessian terms.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{d0_with_step, one_form_scene, FormScratch, PFormSection};
use crate::covariant::{covariant_ito_field, decompose, horizontal_frame_lift};
use crate::error::{Error, Result};
use crate::geometry::{levi_civita_christoffels, EvalScratch, Field, FieldKind, Scene};
use crate::paths::{
    path_rng, seeded_rng, simulate_bundle_path, BaseDynamics, BundlePath, FiberDynamics,
    Increments, TimeGrid,
};

/// Two-sided rejection threshold shared by the mean and trend statistics.
pub const Z_MAX: f64 = 3.0;

/// Clock driving the gauge equation: wall time `dt`, or the realized
/// quadratic variation `g_ij(x_k) dx^i dx^j` of the base path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaugeMode {
    Dt,
    Bracket,
}

impl std::str::FromStr for GaugeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<GaugeMode> {
        match s {
            "dt" => Ok(GaugeMode::Dt),
            "bracket" => Ok(GaugeMode::Bracket),
            other => Err(Error::config(format!(
                "unknown gauge mode `{other}` (use dt or bracket)"
            ))),
        }
    }
}

/// Endomorphism-valued process along a path, `mats[0] = I`.
#[derive(Debug, Clone)]
pub struct GaugePath {
    pub mats: Vec<DMatrix<f64>>,
}

impl GaugePath {
    pub fn steps(&self) -> usize {
        self.mats.len() - 1
    }

    pub fn terminal(&self) -> &DMatrix<f64> {
        self.mats.last().expect("gauge path is never empty")
    }
}

/// Left-point Euler steps of `De = e Phi(x_k) w_k`. On a non-flat bundle
/// each update is conjugated through one step of frame transport,
/// `e_{k+1} = P_k (e_k + e_k Phi w) P_k^{-1}` with `P_k = U_{k+1} U_k^{-1}`,
/// so the increments read as endomorphism transport induced by the lift.
pub fn solve_gauge(
    s: &Scene,
    phi: &Field,
    path: &BundlePath,
    mode: GaugeMode,
) -> Result<GaugePath> {
    let nn = s.rank();
    let d = s.dim();
    if phi.rows != nn || phi.cols != nn {
        return Err(Error::Shape(format!(
            "gauge field is {}x{}, bundle rank is {nn}",
            phi.rows, phi.cols
        )));
    }
    if path.dim != d {
        return Err(Error::Shape(format!(
            "path base dimension {} does not match scene dimension {d}",
            path.dim
        )));
    }
    let steps = path.steps();
    let frames = if s.bundle.flat {
        None
    } else {
        Some(horizontal_frame_lift(s, path, &DMatrix::identity(nn, nn))?)
    };

    let mut sc = EvalScratch::default();
    let mut phv = vec![0.0; nn * nn];
    let mut phim = DMatrix::zeros(nn, nn);
    let mut dx = vec![0.0; d];
    let mut g = DMatrix::zeros(d, d);
    let dt = path.grid.dt;

    let mut mats = Vec::with_capacity(steps + 1);
    let mut e = DMatrix::identity(nn, nn);
    mats.push(e.clone());
    // Inverse of the previous frame, reused as the left factor next step.
    let mut prev_inv = frames.as_ref().map(|_| DMatrix::identity(nn, nn));

    for k in 0..steps {
        let x = path.x(k);
        let w = match mode {
            GaugeMode::Dt => dt,
            GaugeMode::Bracket => {
                path.dx_into(k, &mut dx);
                if s.manifold.identity_metric {
                    dx.iter().map(|c| c * c).sum()
                } else {
                    s.manifold.metric_into(x, &mut g);
                    let mut w = 0.0;
                    for i in 0..d {
                        for j in 0..d {
                            w += g[(i, j)] * dx[i] * dx[j];
                        }
                    }
                    w
                }
            }
        };
        s.eval_field_into(phi, x, &[], &mut phv, &mut sc);
        for r in 0..nn {
            for c in 0..nn {
                phim[(r, c)] = phv[r * nn + c];
            }
        }
        let mut en = e.clone();
        en.gemm(w, &e, &phim, 1.0);
        if let (Some(frames), Some(pinv)) = (frames.as_ref(), prev_inv.as_mut()) {
            let next_inv = frames[k + 1].clone().try_inverse().ok_or(
                Error::FrameDegenerate {
                    step: k + 1,
                    cond: f64::INFINITY,
                },
            )?;
            // P en P^{-1} with P = U_{k+1} U_k^{-1}
            let p = &frames[k + 1] * &*pinv;
            let p_back = &frames[k] * &next_inv;
            en = &p * en * p_back;
            *pinv = next_inv;
        }
        mats.push(en.clone());
        e = en;
    }
    Ok(GaugePath { mats })
}

// ───────────────────────── sample statistics ─────────────────────────

/// Standardized mean of terminal samples: `z = mean / stderr` and the
/// verdict `|z| < Z_MAX`. A degenerate spread maps to `z = 0` when the mean
/// is also zero and to a signed infinity (verdict false) otherwise.
pub fn martingale_statistic(samples: &[f64]) -> Result<(f64, bool)> {
    if samples.len() < 100 {
        return Err(Error::config(format!(
            "martingale statistic needs at least 100 samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let z = if se == 0.0 {
        if mean == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(mean)
        }
    } else {
        mean / se
    };
    Ok((z, z.abs() < Z_MAX))
}

/// Least-squares slope t-statistic of `values` against `times`, with the
/// same `|t| < Z_MAX` verdict. Flags drift that a terminal mean can hide.
pub fn trend_statistic(times: &[f64], values: &[f64]) -> Result<(f64, bool)> {
    if times.len() != values.len() {
        return Err(Error::Shape(format!(
            "{} times against {} values",
            times.len(),
            values.len()
        )));
    }
    let m = times.len();
    if m < 3 {
        return Err(Error::config(format!(
            "trend statistic needs at least 3 slices, got {m}"
        )));
    }
    let mf = m as f64;
    let tbar = times.iter().sum::<f64>() / mf;
    let ybar = values.iter().sum::<f64>() / mf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (t, y) in times.iter().zip(values.iter()) {
        sxx += (t - tbar) * (t - tbar);
        sxy += (t - tbar) * (y - ybar);
    }
    if sxx == 0.0 {
        return Err(Error::config("trend times are all identical".to_string()));
    }
    let slope = sxy / sxx;
    let icept = ybar - slope * tbar;
    let mut rss = 0.0;
    for (t, y) in times.iter().zip(values.iter()) {
        let r = y - icept - slope * t;
        rss += r * r;
    }
    let se = (rss / (mf - 2.0) / sxx).sqrt();
    let t = if se == 0.0 {
        if slope == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(slope)
        }
    } else {
        slope / se
    };
    Ok((t, t.abs() < Z_MAX))
}

// ───────────────────── the gauged-section identity ─────────────────────

/// Terminal values of the two sides of the pathwise identity
///
/// `int theta D sigma_t  =  int (theta o e) grad sigma d x
///    + 1/2 int (theta o e) [hess sigma + 2 V sigma g] (dx, dx)`
///
/// for `sigma_t = e_t sigma(x_t)` with `e` driven by `V` in bracket mode.
/// Both sides are left-point sums; their gap shrinks at first order in the
/// step because the per-step remainders are centered.
#[derive(Debug, Clone, Copy)]
pub struct SectionIdentityParts {
    pub lhs: f64,
    pub rhs: f64,
}

impl SectionIdentityParts {
    pub fn gap(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

/// Evaluate both sides along one path. `sep` carries the fiber connection
/// for the section's flattened components: the scene itself for degree 0,
/// [`one_form_scene`] output for degree 1. `vfield = None` freezes the
/// gauge at the identity.
pub fn section_identity_parts(
    s: &Scene,
    sep: &Scene,
    sigma: &PFormSection,
    theta: &Field,
    vfield: Option<&Field>,
    path: &BundlePath,
) -> Result<SectionIdentityParts> {
    let d = s.dim();
    let nn = sigma.fiber_len();
    if sep.rank() != nn {
        return Err(Error::Shape(format!(
            "section has {nn} components, fiber scene rank is {}",
            sep.rank()
        )));
    }
    if theta.len() != nn {
        return Err(Error::Shape(format!(
            "pairing field has {} components, section has {nn}",
            theta.len()
        )));
    }
    if let Some(v) = vfield {
        if v.rows != nn || v.cols != nn {
            return Err(Error::Shape(format!(
                "gauge field is {}x{}, section fiber is {nn}",
                v.rows, v.cols
            )));
        }
    }
    let steps = path.steps();
    let grid = path.grid;
    let h = s.fd_step;

    let gauge = match vfield {
        Some(v) => Some(solve_gauge(sep, v, path, GaugeMode::Bracket)?),
        None => None,
    };

    // sigma at the nodes, then the gauged fiber path v_k = e_k sigma(x_k).
    let mut sc = EvalScratch::default();
    let mut sig = vec![0.0; (steps + 1) * nn];
    for k in 0..=steps {
        let row = &mut sig[k * nn..(k + 1) * nn];
        s.eval_field_into(sigma.field(), path.x(k), &[], row, &mut sc);
    }
    let mut xs = Vec::with_capacity((steps + 1) * d);
    for k in 0..=steps {
        xs.extend_from_slice(path.x(k));
    }
    let vs = match &gauge {
        Some(g) => {
            let mut vs = vec![0.0; (steps + 1) * nn];
            let mut tmp = DVector::zeros(nn);
            for k in 0..=steps {
                let sk = DVector::from_column_slice(&sig[k * nn..(k + 1) * nn]);
                tmp.gemv(1.0, &g.mats[k], &sk, 0.0);
                vs[k * nn..(k + 1) * nn].copy_from_slice(tmp.as_slice());
            }
            vs
        }
        None => sig.clone(),
    };
    let spath = BundlePath::from_parts(d, nn, grid, xs, vs);
    let fp = decompose(sep, spath, &DMatrix::identity(nn, nn))?;
    let lhs = *covariant_ito_field(sep, theta, &fp)
        .last()
        .expect("cumulative array is never empty");

    // Right side, all left-point: gauge-paired theta, gradient against dx
    // (plus the base-connection correction off identity metrics), Hessian
    // and gauge terms against the realized bracket.
    let mut fs = FormScratch::new(d);
    let mut th = vec![0.0; nn];
    let mut te = DVector::zeros(nn);
    let mut dx = vec![0.0; d];
    let mut g = DMatrix::zeros(d, d);
    let mut vmat = vec![0.0; nn * nn];
    let mut gam = vec![DMatrix::zeros(nn, nn); d];
    let mut rhs = 0.0;
    for k in 0..steps {
        let x = path.x(k);
        path.dx_into(k, &mut dx);
        sep.eval_field_into(theta, x, &[], &mut th, &mut fs.sc);
        match &gauge {
            Some(gp) => te.gemv_tr(1.0, &gp.mats[k], &DVector::from_column_slice(&th), 0.0),
            None => te.copy_from_slice(&th),
        }

        if let Some(v) = vfield {
            let w = if s.manifold.identity_metric {
                dx.iter().map(|c| c * c).sum::<f64>()
            } else {
                s.manifold.metric_into(x, &mut g);
                let mut w = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        w += g[(i, j)] * dx[i] * dx[j];
                    }
                }
                w
            };
            sep.eval_field_into(v, x, &[], &mut vmat, &mut fs.sc);
            let sk = &sig[k * nn..(k + 1) * nn];
            for r in 0..nn {
                let mut vs_r = 0.0;
                for c in 0..nn {
                    vs_r += vmat[r * nn + c] * sk[c];
                }
                rhs += te[r] * vs_r * w;
            }
        }

        // grads[(l, .)] = covariant derivative of the flattened section
        let grads = d0_with_step(sep, sigma.field(), x, h, &mut fs);
        let lc = if s.manifold.identity_metric {
            None
        } else {
            Some(levi_civita_christoffels(&s.manifold, x, h)?)
        };
        for l in 0..d {
            let mut pair = 0.0;
            for c in 0..nn {
                pair += te[c] * grads[(l, c)];
            }
            rhs += pair * dx[l];
        }
        if let Some(lc) = &lc {
            for j in 0..d {
                for l in 0..d {
                    for m in 0..d {
                        let mut pair = 0.0;
                        for c in 0..nn {
                            pair += te[c] * grads[(m, c)];
                        }
                        rhs += 0.5 * pair * lc[m][(j, l)] * dx[j] * dx[l];
                    }
                }
            }
        }

        // hess[j] rows l: d_j grads_l (inner 2h) + Ghat_j grads_l - LC^m_jl grads_m
        sep.christoffel_into(x, &mut gam, &mut fs.sc);
        let grads0 = d0_with_step(sep, sigma.field(), x, 2.0 * h, &mut fs);
        let mut probe = vec![0.0; d];
        for j in 0..d {
            probe.copy_from_slice(x);
            probe[j] = x[j] + h;
            let ghi = d0_with_step(sep, sigma.field(), &probe, 2.0 * h, &mut fs);
            probe[j] = x[j] - h;
            let glo = d0_with_step(sep, sigma.field(), &probe, 2.0 * h, &mut fs);
            for l in 0..d {
                let mut pair = 0.0;
                for c in 0..nn {
                    let mut hess = (ghi[(l, c)] - glo[(l, c)]) / (2.0 * h);
                    for b in 0..nn {
                        hess += gam[j][(c, b)] * grads0[(l, b)];
                    }
                    if let Some(lc) = &lc {
                        for m in 0..d {
                            hess -= lc[m][(j, l)] * grads0[(m, c)];
                        }
                    }
                    pair += te[c] * hess;
                }
                rhs += 0.5 * pair * dx[j] * dx[l];
            }
        }
    }

    Ok(SectionIdentityParts { lhs, rhs })
}

// ───────────────────────── the combined check ─────────────────────────

#[derive(Debug, Clone)]
pub struct HarmonicityConfig {
    pub n_paths: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    pub x0: Vec<f64>,
    /// Points sampled for the pointwise Laplacian sweep.
    pub sample_points: usize,
    /// Time slices entering the trend regression.
    pub trend_slices: usize,
    /// Paths re-run through the two-sided identity cross-check.
    pub identity_paths: usize,
    /// Gauge for the identity cross-check (bracket mode); `None` = frozen.
    pub v_field: Option<Field>,
}

impl HarmonicityConfig {
    pub fn new(grid: TimeGrid, x0: Vec<f64>) -> HarmonicityConfig {
        HarmonicityConfig {
            n_paths: 200,
            grid,
            seed: 17,
            x0,
            sample_points: 25,
            trend_slices: 16,
            identity_paths: 32,
            v_field: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HarmonicityReport {
    /// Largest Laplacian component over the sampled points.
    pub max_laplacian: f64,
    pub z: f64,
    pub martingale_ok: bool,
    pub trend_t: f64,
    pub trend_ok: bool,
    /// Median terminal gap of the pathwise identity, and the median
    /// magnitude of its left side for scale.
    pub identity_gap_median: f64,
    pub identity_scale: f64,
    pub paths_used: usize,
    pub paths_aborted: usize,
    /// Terminal pairing value per path id; `None` marks an aborted path.
    pub path_terminals: Vec<Option<f64>>,
    /// Identity-gap per path id, where the cross-check ran.
    pub path_identity: Vec<Option<f64>>,
    /// The stochastic verdict: centered terminals and no time trend.
    pub harmonic: bool,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN gaps"));
    v[v.len() / 2]
}

/// Sample chart points for the pointwise sweep: uniform over the periods
/// where the chart is periodic, otherwise jittered around `x0` and kept
/// inside the domain.
fn sample_points(s: &Scene, x0: &[f64], count: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::RngExt;
    let mut rng = seeded_rng(seed ^ 0x706f_696e_7473);
    let d = s.dim();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut p = vec![0.0; d];
        let mut ok = false;
        for _ in 0..64 {
            for i in 0..d {
                let period = s
                    .manifold
                    .periods
                    .as_ref()
                    .and_then(|ps| ps[i]);
                p[i] = match period {
                    Some(per) => rng.random_range(0.0..per),
                    None => x0[i] + rng.random_range(-0.8..0.8),
                };
            }
            if s.manifold.contains(&p) {
                ok = true;
                break;
            }
        }
        if !ok {
            p.copy_from_slice(x0);
        }
        out.push(p);
    }
    out
}

/// Three-part harmonicity diagnostic for a section:
///
/// 1. pointwise: `max |(dd* + d*d) sigma|` over sampled chart points,
/// 2. stochastic: terminals of `int theta D sigma_t` along Brownian paths,
///    where `sigma_t = e_t sigma(B_t)` and the gauge is driven by
///    `-phi / 2` in `dt` mode — the weight at which a Laplacian-free
///    section produces centered, trend-free integrals,
/// 3. cross-check: the two-sided identity gap on a subset of the paths.
///
/// The verdict combines the mean and trend statistics; the other numbers
/// are reported for inspection.
pub fn harmonicity_check(
    s: &Scene,
    sigma: &PFormSection,
    theta: &Field,
    phi: Option<&Field>,
    cfg: &HarmonicityConfig,
) -> Result<HarmonicityReport> {
    let d = s.dim();
    let n = s.rank();
    let nn = sigma.fiber_len();
    if cfg.n_paths < 100 {
        return Err(Error::config(format!(
            "harmonicity check needs at least 100 paths, got {}",
            cfg.n_paths
        )));
    }
    if cfg.trend_slices < 3 {
        return Err(Error::config("need at least 3 trend slices".to_string()));
    }
    if cfg.x0.len() != d {
        return Err(Error::Shape(format!(
            "start point has {} coordinates, scene has {d}",
            cfg.x0.len()
        )));
    }
    if !s.manifold.contains(&cfg.x0) {
        return Err(Error::DomainExit {
            step: 0,
            point: cfg.x0.clone(),
        });
    }
    if theta.len() != nn {
        return Err(Error::Shape(format!(
            "pairing field has {} components, section has {nn}",
            theta.len()
        )));
    }
    if let Some(p) = phi {
        if p.rows != nn || p.cols != nn {
            return Err(Error::Shape(format!(
                "gauge field is {}x{}, section fiber is {nn}",
                p.rows, p.cols
            )));
        }
    }

    let sep_owned;
    let sep: &Scene = match sigma.degree {
        0 => s,
        _ => {
            sep_owned = one_form_scene(s);
            &sep_owned
        }
    };

    // 1. pointwise sweep
    let mut max_laplacian = 0.0f64;
    for p in sample_points(s, &cfg.x0, cfg.sample_points, cfg.seed) {
        let lap = super::hodge_laplacian(s, sigma, &p)?;
        for c in lap {
            max_laplacian = max_laplacian.max(c.abs());
        }
    }

    // Gauge drive at -phi/2: the factor under which the bracket-mode
    // V-term of the identity cancels the Hessian drift of a
    // Laplacian-free section along Brownian paths.
    let phi_eff: Option<Field> = phi.map(|p| {
        let pc = p.clone();
        Field::from_fn(FieldKind::Endomorphism, nn, nn, move |xw, v, out| {
            let mut sc = EvalScratch::default();
            pc.eval_raw(xw, v, out, &mut sc);
            for o in out.iter_mut() {
                *o *= -0.5;
            }
        })
    });

    let steps = cfg.grid.steps;
    let slice_idx: Vec<usize> = (1..=cfg.trend_slices)
        .map(|j| j * steps / cfg.trend_slices)
        .collect();
    let id_paths = cfg.identity_paths.min(cfg.n_paths);
    let ident = DMatrix::identity(nn, nn);
    let v0 = vec![0.0; n];

    struct PathOut {
        terminal: f64,
        slices: Vec<f64>,
        identity: Option<SectionIdentityParts>,
    }

    let results: Result<Vec<Option<PathOut>>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| -> Result<Option<PathOut>> {
            let run = || -> Result<PathOut> {
                let mut rng = path_rng(cfg.seed, i as u64);
                let driver = Increments::gaussian(&mut rng, steps, d, cfg.grid.dt);
                let path = simulate_bundle_path(
                    s,
                    BaseDynamics::Brownian,
                    FiberDynamics::Frozen,
                    &cfg.x0,
                    &v0,
                    cfg.grid,
                    &driver,
                )?;
                let gauge = match &phi_eff {
                    Some(p) => Some(solve_gauge(sep, p, &path, GaugeMode::Dt)?),
                    None => None,
                };
                let mut sc = EvalScratch::default();
                let mut xs = Vec::with_capacity((steps + 1) * d);
                let mut vs = vec![0.0; (steps + 1) * nn];
                let mut sig = vec![0.0; nn];
                let mut tmp = DVector::zeros(nn);
                for k in 0..=steps {
                    xs.extend_from_slice(path.x(k));
                    s.eval_field_into(sigma.field(), path.x(k), &[], &mut sig, &mut sc);
                    match &gauge {
                        Some(g) => {
                            tmp.gemv(1.0, &g.mats[k], &DVector::from_column_slice(&sig), 0.0);
                            vs[k * nn..(k + 1) * nn].copy_from_slice(tmp.as_slice());
                        }
                        None => vs[k * nn..(k + 1) * nn].copy_from_slice(&sig),
                    }
                }
                let spath = BundlePath::from_parts(d, nn, cfg.grid, xs, vs);
                let fp = decompose(sep, spath, &ident)?;
                let curve = covariant_ito_field(sep, theta, &fp);
                let identity = if i < id_paths {
                    Some(section_identity_parts(
                        s,
                        sep,
                        sigma,
                        theta,
                        cfg.v_field.as_ref(),
                        &path,
                    )?)
                } else {
                    None
                };
                Ok(PathOut {
                    terminal: *curve.last().expect("cumulative array is never empty"),
                    slices: slice_idx.iter().map(|&k| curve[k]).collect(),
                    identity,
                })
            };
            match run() {
                Ok(out)
                    if out.terminal.is_finite()
                        && out.slices.iter().all(|v| v.is_finite())
                        && out.identity.iter().all(|id| id.gap().is_finite()) =>
                {
                    Ok(Some(out))
                }
                Err(e) if e.is_config() => Err(e),
                // runtime aborts (chart exit, degenerate frame) and non-finite
                // results (NaN/inf escaping a user field) drop the path
                _ => Ok(None),
            }
        })
        .collect();
    let results = results?;

    let paths_aborted = results.iter().filter(|r| r.is_none()).count();
    let used: Vec<&PathOut> = results.iter().flatten().collect();
    if used.len() < 100 {
        return Err(Error::config(format!(
            "only {} of {} paths survived, need 100 for the statistics",
            used.len(),
            cfg.n_paths
        )));
    }

    let terminals: Vec<f64> = used.iter().map(|p| p.terminal).collect();
    let (z, martingale_ok) = martingale_statistic(&terminals)?;

    let times: Vec<f64> = slice_idx.iter().map(|&k| cfg.grid.time(k)).collect();
    let means: Vec<f64> = (0..slice_idx.len())
        .map(|j| used.iter().map(|p| p.slices[j]).sum::<f64>() / used.len() as f64)
        .collect();
    let (trend_t, trend_ok) = trend_statistic(&times, &means)?;

    let gaps: Vec<f64> = used
        .iter()
        .filter_map(|p| p.identity.as_ref())
        .map(|id| id.gap())
        .collect();
    let scales: Vec<f64> = used
        .iter()
        .filter_map(|p| p.identity.as_ref())
        .map(|id| id.lhs.abs())
        .collect();

    let path_terminals: Vec<Option<f64>> =
        results.iter().map(|r| r.as_ref().map(|p| p.terminal)).collect();
    let path_identity: Vec<Option<f64>> = results
        .iter()
        .map(|r| r.as_ref().and_then(|p| p.identity.as_ref().map(|id| id.gap())))
        .collect();

    Ok(HarmonicityReport {
        max_laplacian,
        z,
        martingale_ok,
        trend_t,
        trend_ok,
        identity_gap_median: median(gaps),
        identity_scale: median(scales),
        paths_used: used.len(),
        paths_aborted,
        path_terminals,
        path_identity,
        harmonic: martingale_ok && trend_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::scenes::{flat, flat_torus, twisted_flat};
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    fn endo_field(nn: usize, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Field {
        Field::from_fn(FieldKind::Endomorphism, nn, nn, move |x, _v, out| f(x, out))
    }

    fn scalar_endo(nn: usize, c: f64) -> Field {
        endo_field(nn, move |_x, out| {
            out.fill(0.0);
            for r in 0..nn {
                out[r * nn + r] = c;
            }
        })
    }

    fn covector_field(n: usize, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Field {
        Field::from_fn(FieldKind::Covector, n, 1, move |x, _v, out| f(x, out))
    }

    fn brownian_path(s: &Scene, x0: &[f64], grid: TimeGrid, seed: u64, idx: u64) -> BundlePath {
        let mut rng = path_rng(seed, idx);
        let driver = Increments::gaussian(&mut rng, grid.steps, s.dim(), grid.dt);
        simulate_bundle_path(
            s,
            BaseDynamics::Brownian,
            FiberDynamics::Frozen,
            x0,
            &vec![0.0; s.rank()],
            grid,
            &driver,
        )
        .unwrap()
    }

    #[test]
    fn zero_field_keeps_the_gauge_at_identity() {
        let s = flat_torus(2, 2);
        let grid = TimeGrid::from_horizon(1.0, 1e-3);
        let path = brownian_path(&s, &[1.0, 2.0], grid, 5, 0);
        let phi = scalar_endo(2, 0.0);
        let g = solve_gauge(&s, &phi, &path, GaugeMode::Dt).unwrap();
        assert!(g.terminal().is_identity(0.0)); // flat case is bitwise

        let tw = twisted_flat(0.8);
        let path = brownian_path(&tw, &[0.2, -0.4], grid, 5, 1);
        let g = solve_gauge(&tw, &phi, &path, GaugeMode::Dt).unwrap();
        let gap = (g.terminal() - DMatrix::<f64>::identity(2, 2)).amax();
        assert!(gap < 1e-9, "conjugation drift {gap}");
    }

    #[test]
    fn scalar_gauge_integrates_the_exponential_clock() {
        let c = 0.7;
        let grid = TimeGrid::from_horizon(1.0, 1e-3);
        let phi = scalar_endo(2, c);

        let s = flat_torus(2, 2);
        let path = brownian_path(&s, &[1.0, 2.0], grid, 11, 0);
        let g = solve_gauge(&s, &phi, &path, GaugeMode::Dt).unwrap();
        let got = g.terminal()[(0, 0)];
        assert!((got - c.exp()).abs() / c.exp() < 1e-3, "got {got}");
        assert!(g.terminal()[(0, 1)].abs() < 1e-12);

        // scalar matrices commute with the transport conjugation
        let tw = twisted_flat(1.1);
        let path = brownian_path(&tw, &[0.3, 0.1], grid, 11, 1);
        let g = solve_gauge(&tw, &phi, &path, GaugeMode::Dt).unwrap();
        let got = g.terminal()[(0, 0)];
        assert!((got - c.exp()).abs() / c.exp() < 1e-3, "twisted got {got}");
    }

    #[test]
    fn bracket_gauge_grows_like_the_traced_clock() {
        // w_k sums the squared coordinate increments, so E[product] is
        // (1 + c d dt)^K -> exp(c d T).
        let c = 0.5;
        let d = 2;
        let s = flat_torus(d, 1);
        let grid = TimeGrid::from_horizon(1.0, 1e-3);
        let phi = scalar_endo(1, c);
        let n_paths = 300;
        let mut acc = 0.0;
        for i in 0..n_paths {
            let path = brownian_path(&s, &[0.0, 0.0], grid, 23, i);
            let g = solve_gauge(&s, &phi, &path, GaugeMode::Bracket).unwrap();
            acc += g.terminal()[(0, 0)];
        }
        let mean = acc / n_paths as f64;
        let want = (c * d as f64).exp();
        assert!(
            (mean - want).abs() / want < 0.02,
            "mean {mean} vs {want}"
        );
    }

    #[test]
    fn martingale_statistic_edge_cases() {
        let zeros = vec![0.0; 150];
        let (z, ok) = martingale_statistic(&zeros).unwrap();
        assert_eq!(z, 0.0);
        assert!(ok);

        let halves = vec![0.5; 150];
        let (z, ok) = martingale_statistic(&halves).unwrap();
        assert!(z.is_infinite() && z > 0.0);
        assert!(!ok);

        assert!(martingale_statistic(&vec![0.0; 99]).unwrap_err().is_config());

        let mut rng = seeded_rng(31);
        let centered: Vec<f64> = (0..400)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let (z, ok) = martingale_statistic(&centered).unwrap();
        assert!(ok, "centered normal flagged, z = {z}");

        let shifted: Vec<f64> = centered.iter().map(|x| x + 1.0).collect();
        let (z, ok) = martingale_statistic(&shifted).unwrap();
        assert!(!ok && z > Z_MAX);
    }

    #[test]
    fn trend_statistic_edge_cases() {
        let times: Vec<f64> = (0..20).map(|k| k as f64 * 0.05).collect();
        let flat_vals = vec![0.25; 20];
        let (t, ok) = trend_statistic(&times, &flat_vals).unwrap();
        assert_eq!(t, 0.0);
        assert!(ok);

        // a clean drift with small residual noise
        let mut rng = seeded_rng(77);
        let drifting: Vec<f64> = times
            .iter()
            .map(|t| {
                0.3 * t
                    + 1e-3
                        * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            })
            .collect();
        let (t, ok) = trend_statistic(&times, &drifting).unwrap();
        assert!(!ok && t > Z_MAX, "t = {t}");

        assert!(trend_statistic(&times[..2], &flat_vals[..2])
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn identity_is_exact_for_affine_flat_sections() {
        // Flat bundle, affine section: every difference the two sides take
        // is exact, so the gap is pure roundoff.
        let s = flat(2, 2, None);
        let sig = PFormSection::new(
            &s,
            0,
            Field::from_fn(FieldKind::Section, 2, 1, |x, _v, out| {
                out[0] = 2.0 * x[0] - x[1] + 0.5;
                out[1] = 0.3 * x[0] + 1.2 * x[1] - 2.0;
            }),
        )
        .unwrap();
        let theta = covector_field(2, |_x, out| {
            out[0] = 0.7;
            out[1] = -1.3;
        });
        let grid = TimeGrid::from_horizon(1.0, 1e-3);
        let path = brownian_path(&s, &[0.1, -0.2], grid, 41, 0);
        let parts = section_identity_parts(&s, &s, &sig, &theta, None, &path).unwrap();
        // The only residue is the nested-difference quotient noise in the
        // (analytically zero) Hessian term, eps/h^2 per entry against a
        // bracket of order T — well under any real first-order defect.
        assert!(parts.gap() < 1e-6, "gap {}", parts.gap());
        assert!(parts.lhs.abs() > 0.1, "degenerate sample");
    }

    #[test]
    fn identity_gap_shrinks_at_first_order() {
        let s = twisted_flat(0.7);
        let sig = PFormSection::new(
            &s,
            0,
            Field::from_fn(FieldKind::Section, 2, 1, |x, _v, out| {
                out[0] = (x[1]).sin() + 1.5;
                out[1] = 0.4 * x[0] + x[1] * x[1] * 0.2;
            }),
        )
        .unwrap();
        let theta = covector_field(2, |x, out| {
            out[0] = 1.0 + 0.3 * (x[0]).cos();
            out[1] = 2.0 - 0.2 * x[1];
        });
        let vfield = scalar_endo(2, 0.6);
        let fine = TimeGrid::from_horizon(1.0, 1e-3);
        let n_paths = 100;
        let mut medians = Vec::new();
        for factor in [4usize, 2, 1] {
            let mut gaps = Vec::with_capacity(n_paths);
            for i in 0..n_paths {
                let mut rng = path_rng(97, i as u64);
                let driver = Increments::gaussian(&mut rng, fine.steps, 2, fine.dt);
                let driver = driver.coarsen(factor);
                let grid = fine.coarsen(factor);
                let path = simulate_bundle_path(
                    &s,
                    BaseDynamics::Brownian,
                    FiberDynamics::Frozen,
                    &[0.2, -0.1],
                    &[0.0, 0.0],
                    grid,
                    &driver,
                )
                .unwrap();
                let parts =
                    section_identity_parts(&s, &s, &sig, &theta, Some(&vfield), &path).unwrap();
                gaps.push(parts.gap());
            }
            medians.push(median(gaps));
        }
        let r10 = medians[0] / medians[1];
        let r21 = medians[1] / medians[2];
        assert!(
            r10 >= 1.6 && r21 >= 1.6,
            "medians {medians:?}, ratios {r10:.2} {r21:.2}"
        );
    }

    #[test]
    fn parallel_torus_form_is_harmonic() {
        let s = flat_torus(2, 1);
        let sig = PFormSection::new(
            &s,
            1,
            Field::from_fn(FieldKind::Mixed, 2, 1, |_x, _v, out| {
                out[0] = 1.0;
                out[1] = 0.0;
            }),
        )
        .unwrap();
        let theta = Field::from_fn(FieldKind::Mixed, 2, 1, |_x, _v, out| {
            out[0] = 1.0;
            out[1] = 0.4;
        });
        let mut cfg = HarmonicityConfig::new(TimeGrid::from_horizon(1.0, 2e-3), vec![PI / 2.0, 0.0]);
        cfg.n_paths = 150;
        let report = harmonicity_check(&s, &sig, &theta, None, &cfg).unwrap();
        assert_eq!(report.z, 0.0); // constant components: identically zero
        assert!(report.harmonic);
        assert!(report.max_laplacian < 1e-8);
        assert_eq!(report.paths_aborted, 0);
    }

    #[test]
    fn sine_torus_form_is_flagged() {
        let s = flat_torus(2, 1);
        let sig = PFormSection::new(
            &s,
            1,
            Field::from_fn(FieldKind::Mixed, 2, 1, |x, _v, out| {
                out[0] = x[0].sin();
                out[1] = 0.0;
            }),
        )
        .unwrap();
        let theta = Field::from_fn(FieldKind::Mixed, 2, 1, |_x, _v, out| {
            out[0] = 1.0;
            out[1] = 0.0;
        });
        let mut cfg = HarmonicityConfig::new(TimeGrid::from_horizon(1.0, 2e-3), vec![PI / 2.0, 0.0]);
        cfg.n_paths = 150;
        let report = harmonicity_check(&s, &sig, &theta, None, &cfg).unwrap();
        assert!(!report.harmonic);
        assert!(report.z < -Z_MAX, "z = {}", report.z);
        assert!(report.max_laplacian > 0.5);
        // the pathwise identity still holds on the non-harmonic section
        assert!(report.identity_gap_median.is_finite());
        assert!(report.identity_gap_median < 0.05 + 0.1 * report.identity_scale);
    }

    #[test]
    fn harmonicity_check_rejects_thin_ensembles() {
        let s = flat_torus(2, 1);
        let sig = PFormSection::new(
            &s,
            1,
            Field::from_fn(FieldKind::Mixed, 2, 1, |_x, _v, out| out.fill(0.0)),
        )
        .unwrap();
        let theta = Field::from_fn(FieldKind::Mixed, 2, 1, |_x, _v, out| out.fill(1.0));
        let mut cfg = HarmonicityConfig::new(TimeGrid::from_horizon(0.1, 1e-2), vec![0.0, 0.0]);
        cfg.n_paths = 50;
        assert!(harmonicity_check(&s, &sig, &theta, None, &cfg)
            .unwrap_err()
            .is_config());
    }
}
