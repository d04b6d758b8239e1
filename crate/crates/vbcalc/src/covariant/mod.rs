//! Covariant stochastic calculus along sampled bundle paths: the connector,
//! horizontal frame lift, antidevelopment, the two Stratonovich routes, the
//! left-point Itô route, the cross quadratic-variation integral, and the
//! conversion between them.
//!
//! Discretization rules, used consistently everywhere:
//!
//! * frame route (A): `a_k = u_k^T theta(x_k)` against the antidevelopment
//!   `f`, trapezoid for Stratonovich, left point for Itô,
//! * connector route (B): per step `theta(xm) . [dv + G_i(xm) vm dx^i]` with
//!   `xm, vm` the step midpoints — the Stratonovich-consistent rule,
//! * cross integral: `sum_j dx^j < b_j(xm), u_k df_k >` with the left-point
//!   frame and realized bracket `dx df`,
//! * all integral ops return the cumulative process as a `(K+1)` array.

pub mod bundle_map;
pub mod commutation;

use crate::error::{Error, Result};
use crate::geometry::{nabla_covector_field, EvalScratch, Field, FieldKind, Scene};
use crate::paths::BundlePath;
use nalgebra::{DMatrix, DVector};

/// Frame lifts abort once the transported frame is this ill-conditioned.
pub const FRAME_COND_LIMIT: f64 = 1e12;

/// How often the lift re-checks the frame's condition number.
const COND_CHECK_STRIDE: usize = 64;

/// Connector in coordinates: `K^b = dv^b + G_i[(b, a)](x) dx^i v^a`.
pub fn apply_connector(
    s: &Scene,
    x: &[f64],
    v: &[f64],
    dx: &[f64],
    dv: &[f64],
) -> Result<DVector<f64>> {
    if !s.manifold.contains(x) {
        return Err(Error::DomainExit {
            step: 0,
            point: x.to_vec(),
        });
    }
    let n = s.rank();
    let mut out = DVector::from_column_slice(dv);
    if !s.bundle.flat {
        let gam = s.christoffel(x);
        let vv = DVector::from_column_slice(v);
        for (i, g) in gam.iter().enumerate() {
            if dx[i] != 0.0 {
                out.axpy(dx[i], &(g * &vv), 1.0);
            }
        }
    }
    debug_assert_eq!(out.len(), n);
    Ok(out)
}

/// Heun transport of a full frame along the discrete base path:
/// `du = -G_j(x) u dx^j`, columns are parallel sections.
pub fn horizontal_frame_lift(
    s: &Scene,
    path: &BundlePath,
    u0: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    let n = s.rank();
    let d = s.dim();
    let steps = path.steps();
    debug_assert_eq!(u0.nrows(), n);
    check_frame(u0, 0)?;

    if s.bundle.flat {
        // du = 0 exactly
        return Ok(vec![u0.clone(); steps + 1]);
    }

    let mut frames = Vec::with_capacity(steps + 1);
    frames.push(u0.clone());
    let mut u = u0.clone();
    let mut sc = EvalScratch::default();
    let mut gam0 = vec![DMatrix::zeros(n, n); d];
    let mut gam1 = vec![DMatrix::zeros(n, n); d];
    let mut dx = vec![0.0; d];
    let mut slope0 = DMatrix::zeros(n, n);
    let mut slope1 = DMatrix::zeros(n, n);

    for k in 0..steps {
        path.dx_into(k, &mut dx);
        s.christoffel_into(path.x(k), &mut gam0, &mut sc);
        s.christoffel_into(path.x(k + 1), &mut gam1, &mut sc);
        slope0.fill(0.0);
        for j in 0..d {
            if dx[j] != 0.0 {
                slope0.gemm(-dx[j], &gam0[j], &u, 1.0);
            }
        }
        let pred = &u + &slope0;
        slope1.fill(0.0);
        for j in 0..d {
            if dx[j] != 0.0 {
                slope1.gemm(-dx[j], &gam1[j], &pred, 1.0);
            }
        }
        u += 0.5 * (&slope0 + &slope1);
        frames.push(u.clone());
        if (k + 1) % COND_CHECK_STRIDE == 0 || k + 1 == steps {
            check_frame(&u, k + 1)?;
        }
    }
    Ok(frames)
}

fn check_frame(u: &DMatrix<f64>, step: usize) -> Result<()> {
    let sv = u.clone().singular_values();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for s in sv.iter() {
        lo = lo.min(*s);
        hi = hi.max(*s);
    }
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond < FRAME_COND_LIMIT) {
        return Err(Error::FrameDegenerate { step, cond });
    }
    Ok(())
}

/// A bundle path together with its horizontal frames and antidevelopment.
/// `u_k f_k = v_k` holds to solver accuracy at every step.
#[derive(Debug, Clone)]
pub struct FramedPath {
    pub path: BundlePath,
    pub frames: Vec<DMatrix<f64>>,
    antidev: Vec<f64>,
}

impl FramedPath {
    pub fn steps(&self) -> usize {
        self.path.steps()
    }

    pub fn frame(&self, k: usize) -> &DMatrix<f64> {
        &self.frames[k]
    }

    /// Antidevelopment components at step `k`.
    pub fn f(&self, k: usize) -> &[f64] {
        let n = self.path.rank;
        &self.antidev[k * n..(k + 1) * n]
    }

    pub fn df_into(&self, k: usize, out: &mut [f64]) {
        let a = self.f(k);
        let b = self.f(k + 1);
        for i in 0..self.path.rank {
            out[i] = b[i] - a[i];
        }
    }
}

/// Lift frames along the path and solve `u_k f_k = v_k` per step.
pub fn decompose(s: &Scene, path: BundlePath, u0: &DMatrix<f64>) -> Result<FramedPath> {
    let n = s.rank();
    let steps = path.steps();
    let frames = horizontal_frame_lift(s, &path, u0)?;
    let mut antidev = Vec::with_capacity((steps + 1) * n);

    if s.bundle.flat && u0.is_identity(0.0) {
        // u = I throughout: f is v itself
        for k in 0..=steps {
            antidev.extend_from_slice(path.v(k));
        }
    } else if s.bundle.flat {
        let lu = u0.clone().lu();
        for k in 0..=steps {
            let f = lu
                .solve(&DVector::from_column_slice(path.v(k)))
                .ok_or(Error::FrameDegenerate {
                    step: k,
                    cond: f64::INFINITY,
                })?;
            antidev.extend(f.iter());
        }
    } else {
        for k in 0..=steps {
            let f = frames[k]
                .clone()
                .lu()
                .solve(&DVector::from_column_slice(path.v(k)))
                .ok_or(Error::FrameDegenerate {
                    step: k,
                    cond: f64::INFINITY,
                })?;
            antidev.extend(f.iter());
        }
    }

    Ok(FramedPath {
        path,
        frames,
        antidev,
    })
}

// ──────────────────── integrals along framed paths ────────────────────

/// Shared accumulation: `a_k^g = sum_b theta^b(x_k) u_k[(b, g)]` paired with
/// increments of `f`, either trapezoid (`strat`) or left-point.
fn frame_route_field(s: &Scene, theta: &Field, fp: &FramedPath, strat: bool) -> Vec<f64> {
    let n = s.rank();
    let steps = fp.steps();
    let mut sc = EvalScratch::default();
    let mut th = vec![0.0; n];
    let mut a_prev = DVector::zeros(n);
    let mut a_next = DVector::zeros(n);
    let mut df = vec![0.0; n];
    let mut out = Vec::with_capacity(steps + 1);
    let mut acc = 0.0;
    out.push(acc);

    s.eval_field_into(theta, fp.path.x(0), &[], &mut th, &mut sc);
    a_prev.gemv_tr(1.0, fp.frame(0), &DVector::from_column_slice(&th), 0.0);

    for k in 0..steps {
        s.eval_field_into(theta, fp.path.x(k + 1), &[], &mut th, &mut sc);
        a_next.gemv_tr(1.0, fp.frame(k + 1), &DVector::from_column_slice(&th), 0.0);
        fp.df_into(k, &mut df);
        let mut term = 0.0;
        if strat {
            for g in 0..n {
                term += 0.5 * (a_prev[g] + a_next[g]) * df[g];
            }
        } else {
            for g in 0..n {
                term += a_prev[g] * df[g];
            }
        }
        acc += term;
        out.push(acc);
        std::mem::swap(&mut a_prev, &mut a_next);
    }
    out
}

pub fn covariant_stratonovich_frame_field(s: &Scene, theta: &Field, fp: &FramedPath) -> Vec<f64> {
    frame_route_field(s, theta, fp, true)
}

pub fn covariant_ito_field(s: &Scene, theta: &Field, fp: &FramedPath) -> Vec<f64> {
    frame_route_field(s, theta, fp, false)
}

pub fn covariant_stratonovich_frame(s: &Scene, theta: &str, fp: &FramedPath) -> Result<Vec<f64>> {
    let f = s.field_of_kind(theta, FieldKind::Covector)?;
    Ok(covariant_stratonovich_frame_field(s, f, fp))
}

pub fn covariant_ito(s: &Scene, theta: &str, fp: &FramedPath) -> Result<Vec<f64>> {
    let f = s.field_of_kind(theta, FieldKind::Covector)?;
    Ok(covariant_ito_field(s, f, fp))
}

/// Connector route: per step accumulate
/// `theta(xm) . [dv + G_i(xm) vm dx^i]` at the midpoint `(xm, vm)`.
pub fn covariant_stratonovich_connector_field(
    s: &Scene,
    theta: &Field,
    path: &BundlePath,
) -> Result<Vec<f64>> {
    let d = s.dim();
    let n = s.rank();
    let steps = path.steps();
    let mut sc = EvalScratch::default();
    let mut th = vec![0.0; n];
    let mut xm = vec![0.0; d];
    let mut vm = vec![0.0; n];
    let mut dx = vec![0.0; d];
    let mut dv = vec![0.0; n];
    let mut gam = vec![DMatrix::zeros(n, n); d];
    let mut incr = DVector::zeros(n);
    let mut out = Vec::with_capacity(steps + 1);
    let mut acc = 0.0;
    out.push(acc);

    for k in 0..steps {
        path.x_mid_into(k, &mut xm);
        if !s.manifold.contains(&xm) {
            return Err(Error::DomainExit {
                step: k,
                point: xm.clone(),
            });
        }
        path.v_mid_into(k, &mut vm);
        path.dx_into(k, &mut dx);
        path.dv_into(k, &mut dv);
        for (i, o) in incr.iter_mut().enumerate() {
            *o = dv[i];
        }
        if !s.bundle.flat {
            s.christoffel_into(&xm, &mut gam, &mut sc);
            let vmid = DVector::from_column_slice(&vm);
            for i in 0..d {
                if dx[i] != 0.0 {
                    incr.gemv(dx[i], &gam[i], &vmid, 1.0);
                }
            }
        }
        s.eval_field_into(theta, &xm, &[], &mut th, &mut sc);
        let mut term = 0.0;
        for b in 0..n {
            term += th[b] * incr[b];
        }
        acc += term;
        out.push(acc);
    }
    Ok(out)
}

pub fn covariant_stratonovich_connector(
    s: &Scene,
    theta: &str,
    path: &BundlePath,
) -> Result<Vec<f64>> {
    let f = s.field_of_kind(theta, FieldKind::Covector)?;
    covariant_stratonovich_connector_field(s, f, path)
}

/// Cross quadratic-variation integral with a caller-supplied `d x n`
/// integrand evaluated at raw step midpoints:
/// per step `sum_j dx^j sum_a b[(j, a)](xm) (u_k df_k)^a`.
pub fn mixed_cross_integral_with(
    s: &Scene,
    fp: &FramedPath,
    mut fill: impl FnMut(&[f64], &mut DMatrix<f64>),
) -> Vec<f64> {
    let d = s.dim();
    let n = s.rank();
    let steps = fp.steps();
    let mut xm = vec![0.0; d];
    let mut dx = vec![0.0; d];
    let mut df = vec![0.0; n];
    let mut b = DMatrix::zeros(d, n);
    let mut udf = DVector::zeros(n);
    let mut out = Vec::with_capacity(steps + 1);
    let mut acc = 0.0;
    out.push(acc);

    for k in 0..steps {
        fp.path.x_mid_into(k, &mut xm);
        fp.path.dx_into(k, &mut dx);
        fp.df_into(k, &mut df);
        udf.gemv(1.0, fp.frame(k), &DVector::from_column_slice(&df), 0.0);
        fill(&xm, &mut b);
        let mut term = 0.0;
        for j in 0..d {
            if dx[j] != 0.0 {
                let mut pair = 0.0;
                for a in 0..n {
                    pair += b[(j, a)] * udf[a];
                }
                term += dx[j] * pair;
            }
        }
        acc += term;
        out.push(acc);
    }
    out
}

pub fn mixed_cross_integral_field(s: &Scene, b: &Field, fp: &FramedPath) -> Vec<f64> {
    let mut sc = EvalScratch::default();
    let mut vals = vec![0.0; b.len()];
    let (rows, cols) = (b.rows, b.cols);
    mixed_cross_integral_with(s, fp, |xm, out| {
        s.eval_field_into(b, xm, &[], &mut vals, &mut sc);
        for j in 0..rows {
            for a in 0..cols {
                out[(j, a)] = vals[j * cols + a];
            }
        }
    })
}

pub fn mixed_cross_integral(s: &Scene, b: &str, fp: &FramedPath) -> Result<Vec<f64>> {
    let f = s.field_of_kind(b, FieldKind::Mixed)?;
    Ok(mixed_cross_integral_field(s, f, fp))
}

/// The three pieces of the conversion identity
/// `strat = ito + mixed_nabla / 2` for one framed path.
#[derive(Debug, Clone, Copy)]
pub struct ConversionParts {
    pub strat: f64,
    pub ito: f64,
    pub mixed_nabla: f64,
}

impl ConversionParts {
    pub fn residual(&self) -> f64 {
        (self.strat - self.ito - 0.5 * self.mixed_nabla).abs()
    }
}

pub fn conversion_parts(s: &Scene, theta: &Field, fp: &FramedPath) -> ConversionParts {
    let strat = covariant_stratonovich_frame_field(s, theta, fp);
    let ito = covariant_ito_field(s, theta, fp);
    let h = s.fd_step;
    let mixed = mixed_cross_integral_with(s, fp, |xm, out| {
        let grad = nabla_covector_field(s, theta, xm, h);
        out.copy_from(&grad);
    });
    ConversionParts {
        strat: *strat.last().unwrap(),
        ito: *ito.last().unwrap(),
        mixed_nabla: *mixed.last().unwrap(),
    }
}

pub fn conversion_residual(s: &Scene, theta: &str, fp: &FramedPath) -> Result<f64> {
    let f = s.field_of_kind(theta, FieldKind::Covector)?;
    Ok(conversion_parts(s, f, fp).residual())
}

/// Itô integral of a base 1-form against the Levi-Civita structure:
/// trapezoid sum minus half the realized `grad alpha` bracket,
/// `(grad alpha)[(j, k)] = d_j alpha_k - lc^m_{jk} alpha_m`.
pub fn ito_form_integral_field(s: &Scene, alpha: &Field, path: &BundlePath) -> Result<Vec<f64>> {
    let d = s.dim();
    let steps = path.steps();
    let h = s.fd_step;
    let mut sc = EvalScratch::default();
    let mut xm = vec![0.0; d];
    let mut dx = vec![0.0; d];
    let mut am = vec![0.0; d];
    let mut hi = vec![0.0; d];
    let mut lo = vec![0.0; d];
    let mut xp = vec![0.0; d];
    let mut out = Vec::with_capacity(steps + 1);
    let mut acc = 0.0;
    out.push(acc);

    for k in 0..steps {
        path.x_mid_into(k, &mut xm);
        path.dx_into(k, &mut dx);
        s.eval_field_into(alpha, &xm, &[], &mut am, &mut sc);
        let mut term = 0.0;
        for j in 0..d {
            term += am[j] * dx[j];
        }
        // half-bracket correction
        let lc = if s.manifold.identity_metric {
            None
        } else {
            Some(crate::geometry::levi_civita_christoffels(
                &s.manifold,
                &xm,
                h,
            )?)
        };
        for j in 0..d {
            if dx[j] == 0.0 {
                continue;
            }
            xp.copy_from_slice(&xm);
            xp[j] = xm[j] + h;
            s.eval_field_into(alpha, &xp, &[], &mut hi, &mut sc);
            xp[j] = xm[j] - h;
            s.eval_field_into(alpha, &xp, &[], &mut lo, &mut sc);
            for l in 0..d {
                if dx[l] == 0.0 {
                    continue;
                }
                let mut grad = (hi[l] - lo[l]) / (2.0 * h);
                if let Some(lc) = &lc {
                    for m in 0..d {
                        grad -= lc[m][(j, l)] * am[m];
                    }
                }
                term -= 0.5 * grad * dx[j] * dx[l];
            }
        }
        acc += term;
        out.push(acc);
    }
    Ok(out)
}

pub fn ito_form_integral(s: &Scene, alpha: &str, path: &BundlePath) -> Result<Vec<f64>> {
    let f = s.field_of_kind(alpha, FieldKind::OneForm)?;
    ito_form_integral_field(s, f, path)
}

/// Per-step connector norms of the lifted frame columns, evaluated at step
/// midpoints. Heun consistency makes each term `O(dt^{3/2})`, so the sum
/// shrinks like `sqrt(dt)` under refinement — the horizontality diagnostic.
pub fn frame_horizontality_defect(s: &Scene, fp: &FramedPath) -> f64 {
    let d = s.dim();
    let n = s.rank();
    let steps = fp.steps();
    let mut sc = EvalScratch::default();
    let mut xm = vec![0.0; d];
    let mut dx = vec![0.0; d];
    let mut gam = vec![DMatrix::zeros(n, n); d];
    let mut total = 0.0;

    for k in 0..steps {
        fp.path.x_mid_into(k, &mut xm);
        fp.path.dx_into(k, &mut dx);
        s.christoffel_into(&xm, &mut gam, &mut sc);
        let u0 = fp.frame(k);
        let u1 = fp.frame(k + 1);
        let du = u1 - u0;
        let umid = 0.5 * (u0 + u1);
        let mut conn = du.clone();
        for i in 0..d {
            if dx[i] != 0.0 {
                conn.gemm(dx[i], &gam[i], &umid, 1.0);
            }
        }
        total += conn.norm();
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::scenes;
    use crate::paths::{
        path_rng, seeded_rng, simulate_bundle_path, stratonovich_sum, BaseDynamics,
        FiberDynamics, Increments, TimeGrid,
    };

    fn brownian_bundle(
        s: &Scene,
        seed: u64,
        idx: u64,
        grid: TimeGrid,
        x0: &[f64],
        v0: &[f64],
        fiber: FiberDynamics,
        extra_cols: usize,
    ) -> BundlePath {
        let driver = Increments::gaussian(
            &mut path_rng(seed, idx),
            grid.steps,
            s.dim() + extra_cols,
            grid.dt,
        );
        simulate_bundle_path(s, BaseDynamics::Brownian, fiber, x0, v0, grid, &driver).unwrap()
    }

    fn ident(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    #[test]
    fn connector_flat_is_dv() {
        let s = scenes::flat(2, 2, None);
        let k = apply_connector(&s, &[0.1, 0.2], &[3.0, 4.0], &[0.5, -0.5], &[1.0, 2.0]).unwrap();
        assert_eq!(k.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn connector_vertical_increment_passes_through() {
        let s = scenes::twisted_flat(2.0);
        let k = apply_connector(&s, &[0.3, 1.7], &[3.0, 4.0], &[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert_eq!(k.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn connector_hand_value_on_twisted_scene() {
        let lam = 0.8;
        let eps = 1e-3;
        let s = scenes::twisted_flat(lam);
        let k = apply_connector(&s, &[0.0, 1.0], &[1.0, 0.0], &[eps, 0.0], &[0.0, 0.0]).unwrap();
        assert!((k[0] - 0.0).abs() < 1e-15);
        assert!((k[1] + lam * eps).abs() < 1e-15);
    }

    #[test]
    fn connector_is_linear_in_increments() {
        let s = scenes::twisted_flat(1.3);
        let x = [0.4, -0.7];
        let v = [2.0, -1.0];
        let (dx1, dv1) = ([0.3, 0.1], [0.2, -0.4]);
        let (dx2, dv2) = ([-0.2, 0.5], [0.1, 0.3]);
        let (a, b) = (1.7, -2.3);
        let lhs = apply_connector(
            &s,
            &x,
            &v,
            &[a * dx1[0] + b * dx2[0], a * dx1[1] + b * dx2[1]],
            &[a * dv1[0] + b * dv2[0], a * dv1[1] + b * dv2[1]],
        )
        .unwrap();
        let k1 = apply_connector(&s, &x, &v, &dx1, &dv1).unwrap();
        let k2 = apply_connector(&s, &x, &v, &dx2, &dv2).unwrap();
        let rhs = a * k1 + b * k2;
        assert!((lhs - rhs).norm() < 1e-13);
    }

    #[test]
    fn flat_lift_returns_initial_frame() {
        let s = scenes::flat(2, 2, None);
        let grid = TimeGrid::from_horizon(0.5, 1e-2);
        let p = brownian_bundle(&s, 1, 0, grid, &[0.0, 0.0], &[1.0, 0.0], FiberDynamics::Frozen, 0);
        let u0 = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 3.0]);
        let frames = horizontal_frame_lift(&s, &p, &u0).unwrap();
        for f in &frames {
            assert_eq!(f, &u0);
        }
    }

    #[test]
    fn twisted_lift_matches_rotation_exponential() {
        let lam = 0.7;
        let c = 1.2;
        let s = scenes::twisted_flat(lam);
        let vel = Field::from_fn(FieldKind::Velocity, 2, 1, |_, _, out| {
            out[0] = 1.0;
            out[1] = 0.0;
        });
        let grid = TimeGrid::from_horizon(1.0, 1e-4);
        let p = simulate_bundle_path(
            &s,
            BaseDynamics::Velocity(&vel),
            FiberDynamics::Frozen,
            &[0.0, c],
            &[0.0, 0.0],
            grid,
            &Increments::zeros(grid.steps, 0),
        )
        .unwrap();
        let frames = horizontal_frame_lift(&s, &p, &ident(2)).unwrap();
        let u = &frames[grid.steps];
        // du = -lam*c*J u dx1  =>  u(T) = exp(-lam*c*T J)
        let th = -lam * c * 1.0;
        let expect = DMatrix::from_row_slice(2, 2, &[th.cos(), th.sin(), -th.sin(), th.cos()]);
        assert!((u - expect).norm() < 1e-6, "{u}");
    }

    #[test]
    fn sphere_loop_holonomy_angle_is_enclosed_area() {
        // chart circle of radius rho encloses spherical area 4 pi rho^2 / (1 + rho^2)
        let area = 0.1;
        let rho = (area / (4.0 * std::f64::consts::PI - area)).sqrt();
        let s = scenes::sphere_stereo();
        let tau = std::f64::consts::TAU;
        let vel = Field::from_fn(FieldKind::Velocity, 2, 1, move |x, _, out| {
            out[0] = -tau * x[1];
            out[1] = tau * x[0];
        });
        let grid = TimeGrid::from_horizon(1.0, 1e-4);
        let p = simulate_bundle_path(
            &s,
            BaseDynamics::Velocity(&vel),
            FiberDynamics::Frozen,
            &[rho, 0.0],
            &[0.0, 0.0],
            grid,
            &Increments::zeros(grid.steps, 0),
        )
        .unwrap();
        let frames = horizontal_frame_lift(&s, &p, &ident(2)).unwrap();
        let u = &frames[grid.steps];
        // conformal metric: transport around a loop is a Euclidean rotation
        let ang = u[(0, 1)].atan2(u[(0, 0)]);
        assert!(
            (ang.abs() - area).abs() < 0.05 * area,
            "angle {ang}, area {area}"
        );
    }

    #[test]
    fn sphere_transport_preserves_metric_norm() {
        let s = scenes::sphere_stereo();
        let grid = TimeGrid::from_horizon(0.25, 1e-3);
        let p = brownian_bundle(&s, 11, 0, grid, &[0.3, 0.1], &[0.0, 0.0], FiberDynamics::Frozen, 0);
        let frames = horizontal_frame_lift(&s, &p, &ident(2)).unwrap();
        let gnorm = |k: usize, col: usize| {
            let g = s.manifold.metric(p.x(k));
            let u = frames[k].column(col);
            let mut q = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    q += g[(i, j)] * u[i] * u[j];
                }
            }
            q.sqrt()
        };
        for col in 0..2 {
            let start = gnorm(0, col);
            let end = gnorm(grid.steps, col);
            assert!(
                (end - start).abs() < 20.0 * grid.dt * start,
                "col {col}: {start} -> {end}"
            );
        }
    }

    #[test]
    fn degenerate_frame_is_rejected() {
        let s = scenes::flat(2, 2, None);
        let grid = TimeGrid::new(0.0, 0.1, 4);
        let p = brownian_bundle(&s, 2, 0, grid, &[0.0, 0.0], &[0.0, 0.0], FiberDynamics::Frozen, 0);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let err = horizontal_frame_lift(&s, &p, &singular).unwrap_err();
        assert!(matches!(err, Error::FrameDegenerate { step: 0, .. }), "{err}");
    }

    #[test]
    fn reconstruction_is_an_exact_invariant() {
        let s = scenes::twisted_flat(1.1);
        let grid = TimeGrid::from_horizon(0.5, 1e-3);
        let p = brownian_bundle(
            &s,
            3,
            0,
            grid,
            &[0.2, -0.3],
            &[1.0, 2.0],
            FiberDynamics::Parallel,
            0,
        );
        let fp = decompose(&s, p, &ident(2)).unwrap();
        let mut worst = 0.0f64;
        for k in 0..=fp.steps() {
            let rec = fp.frame(k) * DVector::from_column_slice(fp.f(k));
            let v = fp.path.v(k);
            for i in 0..2 {
                worst = worst.max((rec[i] - v[i]).abs());
            }
        }
        assert!(worst < 1e-12, "reconstruction drift {worst}");
    }

    #[test]
    fn parallel_fiber_has_constant_antidevelopment() {
        let s = scenes::twisted_flat(1.0);
        let grid = TimeGrid::from_horizon(1.0, 1e-3);
        let p = brownian_bundle(
            &s,
            4,
            0,
            grid,
            &[0.0, 0.5],
            &[1.0, -0.5],
            FiberDynamics::Parallel,
            0,
        );
        let fp = decompose(&s, p, &ident(2)).unwrap();
        let f0 = fp.f(0).to_vec();
        let mut worst = 0.0f64;
        for k in 0..=fp.steps() {
            let f = fp.f(k);
            for i in 0..2 {
                worst = worst.max((f[i] - f0[i]).abs());
            }
        }
        assert!(worst < 10.0 * grid.dt, "antidevelopment drift {worst}");
    }

    #[test]
    fn flat_routes_reduce_to_euclidean_sums() {
        let s = {
            let mut s = scenes::flat(1, 1, None);
            let f = Field::from_exprs(
                FieldKind::Covector,
                1,
                1,
                &["x1".to_string()],
                1,
                1,
                &Default::default(),
            )
            .unwrap();
            s.insert_field("theta", f);
            s
        };
        let grid = TimeGrid::from_horizon(1.0, 1e-3);
        let driver = Increments::gaussian(&mut seeded_rng(5), grid.steps, 2, grid.dt);
        let diffusion = Field::from_fn(FieldKind::FiberDiffusion, 1, 1, |_, _, out| out[0] = 1.0);
        let p = simulate_bundle_path(
            &s,
            BaseDynamics::Brownian,
            FiberDynamics::DriftDiffusion {
                drift: None,
                diffusion: Some(&diffusion),
            },
            &[0.0],
            &[0.0],
            grid,
            &driver,
        )
        .unwrap();
        let k = grid.steps;
        let xs: Vec<f64> = (0..=k).map(|i| p.x(i)[0]).collect();
        let vs: Vec<f64> = (0..=k).map(|i| p.v(i)[0]).collect();
        let fp = decompose(&s, p.clone(), &ident(1)).unwrap();

        let a = covariant_stratonovich_frame(&s, "theta", &fp).unwrap();
        assert_eq!(*a.last().unwrap(), stratonovich_sum(&xs, &vs));

        let i = covariant_ito(&s, "theta", &fp).unwrap();
        assert_eq!(*i.last().unwrap(), crate::paths::ito_sum(&xs, &vs));

        let b = covariant_stratonovich_connector(&s, "theta", &p).unwrap();
        let mut midpoint_ref = 0.0;
        for j in 0..k {
            midpoint_ref += 0.5 * (xs[j] + xs[j + 1]) * (vs[j + 1] - vs[j]);
        }
        assert_eq!(*b.last().unwrap(), midpoint_ref);
    }

    #[test]
    fn frame_route_matches_self_integral_closed_form() {
        // theta = x1, base x = W, fiber v = W: Stratonovich value W^2/2,
        // Ito value W^2/2 - t/2
        let mut s = scenes::flat(1, 1, None);
        s.insert_field(
            "theta",
            Field::from_exprs(
                FieldKind::Covector,
                1,
                1,
                &["x1".to_string()],
                1,
                1,
                &Default::default(),
            )
            .unwrap(),
        );
        let grid = TimeGrid::from_horizon(1.0, 1e-3);
        let mut acc_strat = 0.0;
        let mut acc_ito = 0.0;
        let n_paths = 40;
        for i in 0..n_paths {
            let driver = Increments::gaussian(&mut path_rng(77, i), grid.steps, 1, grid.dt);
            // fiber diffusion 1 against the same driver column as the base
            let mut two_col = Increments::zeros(grid.steps, 2);
            for k in 0..grid.steps {
                let w = driver.row(k)[0];
                two_col.row_mut(k)[0] = w;
                two_col.row_mut(k)[1] = w;
            }
            let diffusion =
                Field::from_fn(FieldKind::FiberDiffusion, 1, 1, |_, _, out| out[0] = 1.0);
            let p = simulate_bundle_path(
                &s,
                BaseDynamics::Brownian,
                FiberDynamics::DriftDiffusion {
                    drift: None,
                    diffusion: Some(&diffusion),
                },
                &[0.0],
                &[0.0],
                grid,
                &two_col,
            )
            .unwrap();
            let w_t = p.x(grid.steps)[0];
            let fp = decompose(&s, p, &ident(1)).unwrap();
            let strat = *covariant_stratonovich_frame(&s, "theta", &fp)
                .unwrap()
                .last()
                .unwrap();
            let ito = *covariant_ito(&s, "theta", &fp).unwrap().last().unwrap();
            acc_strat += (strat - 0.5 * w_t * w_t).abs();
            acc_ito += (ito - (0.5 * w_t * w_t - 0.5)).abs();
        }
        assert!(acc_strat / (n_paths as f64) < 1e-10, "{acc_strat}");
        assert!(acc_ito / (n_paths as f64) < 0.1, "{acc_ito}");
    }

    #[test]
    fn route_gap_shrinks_under_refinement() {
        let mut s = scenes::twisted_flat(1.0);
        s.insert_field(
            "theta",
            Field::from_exprs(
                FieldKind::Covector,
                2,
                1,
                &["1 + x2^2".to_string(), "sin(x1)".to_string()],
                2,
                2,
                &Default::default(),
            )
            .unwrap(),
        );
        let fine = TimeGrid::from_horizon(1.0, 1e-3);
        let n_paths = 200;
        let mut gaps = vec![Vec::new(); 3];
        for i in 0..n_paths {
            let driver = Increments::gaussian(&mut path_rng(123, i), fine.steps, 2, fine.dt);
            for (lvl, factor) in [4usize, 2, 1].iter().enumerate() {
                let grid = fine.coarsen(*factor);
                let drv = if *factor == 1 {
                    driver.clone()
                } else {
                    driver.coarsen(*factor)
                };
                let p = simulate_bundle_path(
                    &s,
                    BaseDynamics::Brownian,
                    FiberDynamics::Parallel,
                    &[0.1, 0.2],
                    &[1.0, 0.5],
                    grid,
                    &drv,
                )
                .unwrap();
                let route_b = *covariant_stratonovich_connector(&s, "theta", &p)
                    .unwrap()
                    .last()
                    .unwrap();
                let fp = decompose(&s, p, &ident(2)).unwrap();
                let route_a = *covariant_stratonovich_frame(&s, "theta", &fp)
                    .unwrap()
                    .last()
                    .unwrap();
                gaps[lvl].push((route_a - route_b).abs());
            }
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let g4 = median(&mut gaps[0]);
        let g2 = median(&mut gaps[1]);
        let g1 = median(&mut gaps[2]);
        assert!(g4 / g2 >= 1.6, "4dt->2dt ratio {}", g4 / g2);
        assert!(g2 / g1 >= 1.6, "2dt->dt ratio {}", g2 / g1);
    }

    #[test]
    fn mixed_integral_recovers_realized_bracket() {
        let mut s = scenes::flat(1, 1, None);
        s.insert_field(
            "b",
            Field::from_exprs(
                FieldKind::Mixed,
                1,
                1,
                &["1".to_string()],
                1,
                1,
                &Default::default(),
            )
            .unwrap(),
        );
        let grid = TimeGrid::from_horizon(1.0, 1e-3);
        let driver = Increments::gaussian(&mut seeded_rng(55), grid.steps, 1, grid.dt);
        let mut two_col = Increments::zeros(grid.steps, 2);
        for k in 0..grid.steps {
            let w = driver.row(k)[0];
            two_col.row_mut(k)[0] = w;
            two_col.row_mut(k)[1] = w;
        }
        let diffusion = Field::from_fn(FieldKind::FiberDiffusion, 1, 1, |_, _, out| out[0] = 1.0);
        let p = simulate_bundle_path(
            &s,
            BaseDynamics::Brownian,
            FiberDynamics::DriftDiffusion {
                drift: None,
                diffusion: Some(&diffusion),
            },
            &[0.0],
            &[0.0],
            grid,
            &two_col,
        )
        .unwrap();
        let fp = decompose(&s, p, &ident(1)).unwrap();
        let m = *mixed_cross_integral(&s, "b", &fp).unwrap().last().unwrap();
        assert!((m - 1.0).abs() < 0.2, "bracket {m}");
    }

    #[test]
    fn mixed_integral_vanishes_on_deterministic_paths() {
        let s = {
            let mut s = scenes::twisted_flat(1.0);
            s.insert_field(
                "b",
                Field::from_exprs(
                    FieldKind::Mixed,
                    2,
                    2,
                    &["1".into(), "x1".into(), "x2".into(), "2".into()],
                    2,
                    2,
                    &Default::default(),
                )
                .unwrap(),
            );
            s
        };
        let vel = Field::from_fn(FieldKind::Velocity, 2, 1, |_, _, out| {
            out[0] = 1.0;
            out[1] = -0.5;
        });
        let grid = TimeGrid::from_horizon(1.0, 1e-3);
        let p = simulate_bundle_path(
            &s,
            BaseDynamics::Velocity(&vel),
            FiberDynamics::Parallel,
            &[0.0, 1.0],
            &[1.0, 0.0],
            grid,
            &Increments::zeros(grid.steps, 0),
        )
        .unwrap();
        let fp = decompose(&s, p, &ident(2)).unwrap();
        let m = *mixed_cross_integral(&s, "b", &fp).unwrap().last().unwrap();
        assert!(m.abs() < 10.0 * grid.dt, "{m}");
    }

    #[test]
    fn conversion_residual_is_exactly_zero_for_constant_theta_flat() {
        let mut s = scenes::flat(2, 2, None);
        s.insert_field(
            "theta",
            Field::from_exprs(
                FieldKind::Covector,
                2,
                1,
                &["3".to_string(), "-2".to_string()],
                2,
                2,
                &Default::default(),
            )
            .unwrap(),
        );
        let grid = TimeGrid::from_horizon(0.5, 1e-2);
        let diffusion = Field::from_fn(FieldKind::FiberDiffusion, 2, 2, |_, _, out| {
            out.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        });
        let driver = Increments::gaussian(&mut seeded_rng(66), grid.steps, 4, grid.dt);
        let p = simulate_bundle_path(
            &s,
            BaseDynamics::Brownian,
            FiberDynamics::DriftDiffusion {
                drift: None,
                diffusion: Some(&diffusion),
            },
            &[0.0, 0.0],
            &[1.0, 1.0],
            grid,
            &driver,
        )
        .unwrap();
        let fp = decompose(&s, p, &ident(2)).unwrap();
        let r = conversion_residual(&s, "theta", &fp).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn conversion_residual_small_on_flat_self_integral() {
        let mut s = scenes::flat(1, 1, None);
        s.insert_field(
            "theta",
            Field::from_exprs(
                FieldKind::Covector,
                1,
                1,
                &["x1".to_string()],
                1,
                1,
                &Default::default(),
            )
            .unwrap(),
        );
        let grid = TimeGrid::from_horizon(1.0, 1e-3);
        let diffusion = Field::from_fn(FieldKind::FiberDiffusion, 1, 1, |_, _, out| out[0] = 1.0);
        let mut residuals = Vec::new();
        for i in 0..20 {
            let base = Increments::gaussian(&mut path_rng(88, i), grid.steps, 1, grid.dt);
            let mut two_col = Increments::zeros(grid.steps, 2);
            for k in 0..grid.steps {
                let w = base.row(k)[0];
                two_col.row_mut(k)[0] = w;
                two_col.row_mut(k)[1] = w;
            }
            let p = simulate_bundle_path(
                &s,
                BaseDynamics::Brownian,
                FiberDynamics::DriftDiffusion {
                    drift: None,
                    diffusion: Some(&diffusion),
                },
                &[0.0],
                &[0.0],
                grid,
                &two_col,
            )
            .unwrap();
            let fp = decompose(&s, p, &ident(1)).unwrap();
            residuals.push(conversion_residual(&s, "theta", &fp).unwrap());
        }
        residuals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(residuals[residuals.len() / 2] < 0.05, "{residuals:?}");
    }

    #[test]
    fn conversion_residual_halves_under_refinement() {
        let mut s = scenes::twisted_flat(0.8);
        s.insert_field(
            "theta",
            Field::from_exprs(
                FieldKind::Covector,
                2,
                1,
                &["cos(x2)".to_string(), "x1".to_string()],
                2,
                2,
                &Default::default(),
            )
            .unwrap(),
        );
        let fine = TimeGrid::from_horizon(1.0, 1e-3);
        let n_paths = 40;
        let mut res = vec![Vec::new(); 2];
        for i in 0..n_paths {
            let driver = Increments::gaussian(&mut path_rng(99, i), fine.steps, 2, fine.dt);
            for (lvl, factor) in [2usize, 1].iter().enumerate() {
                let grid = fine.coarsen(*factor);
                let drv = if *factor == 1 {
                    driver.clone()
                } else {
                    driver.coarsen(*factor)
                };
                let p = simulate_bundle_path(
                    &s,
                    BaseDynamics::Brownian,
                    FiberDynamics::Parallel,
                    &[0.0, 0.3],
                    &[1.0, -1.0],
                    grid,
                    &drv,
                )
                .unwrap();
                let fp = decompose(&s, p, &ident(2)).unwrap();
                res[lvl].push(conversion_residual(&s, "theta", &fp).unwrap());
            }
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let coarse = median(&mut res[0]);
        let fine_r = median(&mut res[1]);
        let ratio = coarse / fine_r;
        assert!((1.4..=3.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn deterministic_paths_make_ito_and_strat_agree() {
        let mut s = scenes::twisted_flat(1.0);
        s.insert_field(
            "theta",
            Field::from_exprs(
                FieldKind::Covector,
                2,
                1,
                &["x2".to_string(), "1".to_string()],
                2,
                2,
                &Default::default(),
            )
            .unwrap(),
        );
        let vel = Field::from_fn(FieldKind::Velocity, 2, 1, |_, _, out| {
            out[0] = 1.0;
            out[1] = 0.5;
        });
        let grid = TimeGrid::from_horizon(1.0, 1e-3);
        let p = simulate_bundle_path(
            &s,
            BaseDynamics::Velocity(&vel),
            FiberDynamics::Parallel,
            &[0.0, 0.0],
            &[1.0, 2.0],
            grid,
            &Increments::zeros(grid.steps, 0),
        )
        .unwrap();
        let fp = decompose(&s, p, &ident(2)).unwrap();
        let a = *covariant_stratonovich_frame(&s, "theta", &fp)
            .unwrap()
            .last()
            .unwrap();
        let i = *covariant_ito(&s, "theta", &fp).unwrap().last().unwrap();
        assert!((a - i).abs() < 10.0 * grid.dt, "{a} vs {i}");
    }

    #[test]
    fn horizontality_defect_shrinks_like_root_dt() {
        let s = scenes::twisted_flat(1.0);
        let fine = TimeGrid::from_horizon(1.0, 1e-3);
        let n_paths = 30;
        let mut sums = [0.0f64; 2];
        for i in 0..n_paths {
            let driver = Increments::gaussian(&mut path_rng(7000, i), fine.steps, 2, fine.dt);
            for (lvl, factor) in [2usize, 1].iter().enumerate() {
                let grid = fine.coarsen(*factor);
                let drv = if *factor == 1 {
                    driver.clone()
                } else {
                    driver.coarsen(*factor)
                };
                let p = simulate_bundle_path(
                    &s,
                    BaseDynamics::Brownian,
                    FiberDynamics::Frozen,
                    &[0.0, 0.0],
                    &[1.0, 0.0],
                    grid,
                    &drv,
                )
                .unwrap();
                let fp = decompose(&s, p, &ident(2)).unwrap();
                sums[lvl] += frame_horizontality_defect(&s, &fp);
            }
        }
        let ratio = sums[0] / sums[1];
        assert!(ratio > 1.25, "coarse/fine defect ratio {ratio}");
    }

    #[test]
    fn ito_form_integral_flat_oracles() {
        let mut s = scenes::flat(1, 1, None);
        s.insert_field(
            "dx1",
            Field::from_exprs(
                FieldKind::OneForm,
                1,
                1,
                &["1".to_string()],
                1,
                1,
                &Default::default(),
            )
            .unwrap(),
        );
        s.insert_field(
            "x1dx1",
            Field::from_exprs(
                FieldKind::OneForm,
                1,
                1,
                &["x1".to_string()],
                1,
                1,
                &Default::default(),
            )
            .unwrap(),
        );
        let grid = TimeGrid::from_horizon(1.0, 1e-3);
        let driver = Increments::gaussian(&mut seeded_rng(31), grid.steps, 1, grid.dt);
        let p = simulate_bundle_path(
            &s,
            BaseDynamics::Brownian,
            FiberDynamics::Frozen,
            &[0.0],
            &[0.0],
            grid,
            &driver,
        )
        .unwrap();
        let w_t = p.x(grid.steps)[0];

        let total = *ito_form_integral(&s, "dx1", &p).unwrap().last().unwrap();
        assert!((total - w_t).abs() < 1e-10);

        let ito = *ito_form_integral(&s, "x1dx1", &p).unwrap().last().unwrap();
        assert!((ito - (0.5 * w_t * w_t - 0.5)).abs() < 0.15, "{ito}");
    }

    #[test]
    fn unregistered_fields_error_by_name() {
        let s = scenes::flat(1, 1, None);
        let grid = TimeGrid::new(0.0, 0.1, 2);
        let p = simulate_bundle_path(
            &s,
            BaseDynamics::Brownian,
            FiberDynamics::Frozen,
            &[0.0],
            &[0.0],
            grid,
            &Increments::zeros(2, 1),
        )
        .unwrap();
        let fp = decompose(&s, p.clone(), &ident(1)).unwrap();
        assert!(matches!(
            covariant_stratonovich_frame(&s, "missing", &fp),
            Err(Error::UnknownField(_))
        ));
        assert!(matches!(
            covariant_stratonovich_connector(&s, "missing", &p),
            Err(Error::UnknownField(_))
        ));
    }
}
