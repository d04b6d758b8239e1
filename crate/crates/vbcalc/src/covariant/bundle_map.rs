//! Fiber-preserving maps between scenes and the pullback identities their
//! image paths satisfy: one for the connector-route Stratonovich integral,
//! one for the cross quadratic-variation integral, and one for the covariant
//! Itô integral.
//!
//! The two derivative blocks of a map `F` over a base map `Fb`:
//!
//! * vertical: `DvF(x, v)(w) = d/de F(x, v + e w)`, a plain fiber
//!   difference quotient — no connection anywhere,
//! * horizontal: `DhF(x, v)(z)` transports `v` one Heun step along `x ± e z`,
//!   pushes both ends through `F`, differences, then adds the target
//!   connector term `G'_i(Fb x) (Fb_* z)^i F(x, v)`.
//!
//! Both are directional and linear in the direction; callers exploit that to
//! evaluate them once per step along the realized increment.

use crate::error::{Error, Result};
use crate::geometry::{nabla_covector_field, EvalScratch, Field, FieldKind, Scene};
use crate::paths::{parallel_transport_step, BundlePath};
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Default probe length for the directional difference quotients.
pub const MAP_FD_STEP: f64 = 1e-5;

type BaseFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type FiberFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// A fiber-preserving map into `target`, given by its base map and fiber map
/// in chart coordinates. Maps receive wrapped source coordinates.
#[derive(Clone)]
pub struct BundleMap {
    pub name: String,
    pub target: Scene,
    pub eps: f64,
    base: BaseFn,
    fiber: FiberFn,
}

impl std::fmt::Debug for BundleMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BundleMap")
            .field("name", &self.name)
            .field("target", &self.target.name)
            .field("eps", &self.eps)
            .finish()
    }
}

impl BundleMap {
    pub fn new(
        name: impl Into<String>,
        target: Scene,
        base: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        fiber: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> BundleMap {
        BundleMap {
            name: name.into(),
            target,
            eps: MAP_FD_STEP,
            base: Arc::new(base),
            fiber: Arc::new(fiber),
        }
    }

    pub fn base_into(&self, x: &[f64], out: &mut [f64]) {
        (self.base)(x, out);
    }

    pub fn fiber_into(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        (self.fiber)(x, v, out);
    }

    /// Push every sampled point through the map.
    pub fn image_path(&self, src: &BundlePath) -> BundlePath {
        let dp = self.target.dim();
        let np = self.target.rank();
        let steps = src.steps();
        let mut xs = vec![0.0; (steps + 1) * dp];
        let mut vs = vec![0.0; (steps + 1) * np];
        for k in 0..=steps {
            (self.base)(src.x(k), &mut xs[k * dp..(k + 1) * dp]);
            (self.fiber)(src.x(k), src.v(k), &mut vs[k * np..(k + 1) * np]);
        }
        BundlePath::from_parts(dp, np, src.grid, xs, vs)
    }

    /// Base-map Jacobian by central differences, `target dim x source dim`.
    pub fn base_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = x.len();
        let dp = self.target.dim();
        let mut jac = DMatrix::zeros(dp, d);
        let mut xp = x.to_vec();
        let mut hi = vec![0.0; dp];
        let mut lo = vec![0.0; dp];
        for l in 0..d {
            xp[l] = x[l] + self.eps;
            (self.base)(&xp, &mut hi);
            xp[l] = x[l] - self.eps;
            (self.base)(&xp, &mut lo);
            xp[l] = x[l];
            for j in 0..dp {
                jac[(j, l)] = (hi[j] - lo[j]) / (2.0 * self.eps);
            }
        }
        jac
    }
}

/// `DvF(x, v)(w)`: difference quotient of the fiber map along `w`,
/// normalized so probe accuracy does not depend on `|w|`.
pub fn vertical_derivative(map: &BundleMap, x: &[f64], v: &[f64], w: &[f64]) -> DVector<f64> {
    let np = map.target.rank();
    let scale = w.iter().map(|c| c * c).sum::<f64>().sqrt();
    let mut out = DVector::zeros(np);
    if scale == 0.0 {
        return out;
    }
    let e = map.eps;
    let mut vp: Vec<f64> = v.to_vec();
    let mut hi = vec![0.0; np];
    let mut lo = vec![0.0; np];
    for i in 0..v.len() {
        vp[i] = v[i] + e * w[i] / scale;
    }
    map.fiber_into(x, &vp, &mut hi);
    for i in 0..v.len() {
        vp[i] = v[i] - e * w[i] / scale;
    }
    map.fiber_into(x, &vp, &mut lo);
    for j in 0..np {
        out[j] = scale * (hi[j] - lo[j]) / (2.0 * e);
    }
    out
}

/// `DvF(x, v)` assembled column-by-column, `target rank x source rank`.
pub fn vertical_derivative_matrix(map: &BundleMap, x: &[f64], v: &[f64]) -> DMatrix<f64> {
    let n = v.len();
    let np = map.target.rank();
    let mut out = DMatrix::zeros(np, n);
    let mut w = vec![0.0; n];
    for a in 0..n {
        w[a] = 1.0;
        let col = vertical_derivative(map, x, v, &w);
        out.column_mut(a).copy_from(&col);
        w[a] = 0.0;
    }
    out
}

/// `DhF(x, v)(z)`: derivative of `F` along the horizontal lift of `z`,
/// measured with the target connector. Linear in `z`; the probe uses the
/// unit direction and rescales.
pub fn horizontal_derivative(
    map: &BundleMap,
    src: &Scene,
    x: &[f64],
    v: &[f64],
    z: &[f64],
) -> DVector<f64> {
    let d = src.dim();
    let n = src.rank();
    let np = map.target.rank();
    let scale = z.iter().map(|c| c * c).sum::<f64>().sqrt();
    let mut out = DVector::zeros(np);
    if scale == 0.0 {
        return out;
    }
    let e = map.eps;
    let mut sc = EvalScratch::default();
    let step: Vec<f64> = z.iter().map(|c| e * c / scale).collect();
    let neg: Vec<f64> = step.iter().map(|c| -c).collect();
    let mut x_hi = vec![0.0; d];
    let mut x_lo = vec![0.0; d];
    for i in 0..d {
        x_hi[i] = x[i] + step[i];
        x_lo[i] = x[i] - step[i];
    }

    let v0 = DVector::from_column_slice(v);
    let (e_hi, e_lo) = if src.bundle.flat {
        (v0.clone(), v0.clone())
    } else {
        let mut g0 = vec![DMatrix::zeros(n, n); d];
        let mut g1 = vec![DMatrix::zeros(n, n); d];
        src.christoffel_into(x, &mut g0, &mut sc);
        src.christoffel_into(&x_hi, &mut g1, &mut sc);
        let e_hi = parallel_transport_step(&g0, &g1, &v0, &step);
        src.christoffel_into(&x_lo, &mut g1, &mut sc);
        let e_lo = parallel_transport_step(&g0, &g1, &v0, &neg);
        (e_hi, e_lo)
    };

    let mut f_hi = vec![0.0; np];
    let mut f_lo = vec![0.0; np];
    map.fiber_into(&x_hi, e_hi.as_slice(), &mut f_hi);
    map.fiber_into(&x_lo, e_lo.as_slice(), &mut f_lo);
    for j in 0..np {
        out[j] = scale * (f_hi[j] - f_lo[j]) / (2.0 * e);
    }

    if !map.target.bundle.flat {
        // target connector term G'_i(Fb x) (Fb_* z)^i F(x, v)
        let dp = map.target.dim();
        let mut bx = vec![0.0; dp];
        map.base_into(x, &mut bx);
        let mut b_hi = vec![0.0; dp];
        let mut b_lo = vec![0.0; dp];
        map.base_into(&x_hi, &mut b_hi);
        map.base_into(&x_lo, &mut b_lo);
        let mut fv = vec![0.0; np];
        map.fiber_into(x, v, &mut fv);
        let fv = DVector::from_column_slice(&fv);
        let mut gp = vec![DMatrix::zeros(np, np); dp];
        map.target.christoffel_into(&bx, &mut gp, &mut sc);
        for i in 0..dp {
            let push = scale * (b_hi[i] - b_lo[i]) / (2.0 * e);
            if push != 0.0 {
                out.gemv(push, &gp[i], &fv, 1.0);
            }
        }
    }
    out
}

/// Two sides of a pullback identity along one path.
#[derive(Debug, Clone, Copy)]
pub struct PullbackCheck {
    pub lhs: f64,
    pub rhs: f64,
}

impl PullbackCheck {
    pub fn gap(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

fn target_covector<'t>(map: &'t BundleMap, theta: &str) -> Result<&'t Field> {
    map.target.field_of_kind(theta, FieldKind::Covector)
}

/// Connector-route Stratonovich integral of `theta` along the image path
/// versus its pullback form on the source:
/// `int (DvF)*theta Dv + int (DhF)*theta o dx`, both at step midpoints.
pub fn bundle_map_strat_residual(
    src: &Scene,
    map: &BundleMap,
    theta: &str,
    path: &BundlePath,
) -> Result<PullbackCheck> {
    let th = target_covector(map, theta)?;
    let image = map.image_path(path);
    let lhs = *super::covariant_stratonovich_connector_field(&map.target, th, &image)?
        .last()
        .unwrap();

    let d = src.dim();
    let n = src.rank();
    let np = map.target.rank();
    let dp = map.target.dim();
    let mut sc = EvalScratch::default();
    let mut xm = vec![0.0; d];
    let mut vm = vec![0.0; n];
    let mut dx = vec![0.0; d];
    let mut dv = vec![0.0; n];
    let mut gam = vec![DMatrix::zeros(n, n); d];
    let mut cdv = DVector::zeros(n);
    let mut bx = vec![0.0; dp];
    let mut thv = vec![0.0; np];
    let mut rhs = 0.0;

    for k in 0..path.steps() {
        path.x_mid_into(k, &mut xm);
        path.v_mid_into(k, &mut vm);
        path.dx_into(k, &mut dx);
        path.dv_into(k, &mut dv);

        // source connector increment at the midpoint
        for (i, o) in cdv.iter_mut().enumerate() {
            *o = dv[i];
        }
        if !src.bundle.flat {
            src.christoffel_into(&xm, &mut gam, &mut sc);
            let vmid = DVector::from_column_slice(&vm);
            for i in 0..d {
                if dx[i] != 0.0 {
                    cdv.gemv(dx[i], &gam[i], &vmid, 1.0);
                }
            }
        }

        map.base_into(&xm, &mut bx);
        map.target.eval_field_into(th, &bx, &[], &mut thv, &mut sc);
        let vert = vertical_derivative(map, &xm, &vm, cdv.as_slice());
        let horiz = horizontal_derivative(map, src, &xm, &vm, &dx);
        for j in 0..np {
            rhs += thv[j] * (vert[j] + horiz[j]);
        }
    }
    Ok(PullbackCheck { lhs, rhs })
}

/// Cross quadratic-variation integral of `b` along the image path versus its
/// two-bracket pullback form on the source:
/// `int (Fb_* x DvF)*b (dx, Dv) + int (Fb_* x DhF)*b (dx, dx)`.
pub fn bundle_map_mixed_residual(
    src: &Scene,
    map: &BundleMap,
    b: &str,
    path: &BundlePath,
) -> Result<PullbackCheck> {
    let bf = map.target.field_of_kind(b, FieldKind::Mixed)?;
    let image = map.image_path(path);
    let u0p = DMatrix::identity(map.target.rank(), map.target.rank());
    let fpi = super::decompose(&map.target, image, &u0p)?;
    let lhs = *super::mixed_cross_integral_field(&map.target, bf, &fpi)
        .last()
        .unwrap();

    let u0 = DMatrix::identity(src.rank(), src.rank());
    let fp = super::decompose(src, path.clone(), &u0)?;

    let d = src.dim();
    let n = src.rank();
    let np = map.target.rank();
    let dp = map.target.dim();
    let mut sc = EvalScratch::default();
    let mut xm = vec![0.0; d];
    let mut vm = vec![0.0; n];
    let mut dx = vec![0.0; d];
    let mut df = vec![0.0; n];
    let mut bx = vec![0.0; dp];
    let mut bvals = vec![0.0; dp * np];
    let mut udf = DVector::zeros(n);
    let mut rhs = 0.0;

    for k in 0..path.steps() {
        fp.path.x_mid_into(k, &mut xm);
        fp.path.v_mid_into(k, &mut vm);
        fp.path.dx_into(k, &mut dx);
        fp.df_into(k, &mut df);
        udf.gemv(1.0, fp.frame(k), &DVector::from_column_slice(&df), 0.0);

        map.base_into(&xm, &mut bx);
        map.target.eval_field_into(bf, &bx, &[], &mut bvals, &mut sc);
        let jac = map.base_jacobian(&xm);
        let vert = vertical_derivative(map, &xm, &vm, udf.as_slice());
        let horiz = horizontal_derivative(map, src, &xm, &vm, &dx);

        // pair_j = < b_j(Fb xm), DvF(u df) + DhF(dx) >
        for l in 0..d {
            if dx[l] == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for j in 0..dp {
                let mut pair = 0.0;
                for bb in 0..np {
                    pair += bvals[j * np + bb] * (vert[bb] + horiz[bb]);
                }
                row += jac[(j, l)] * pair;
            }
            rhs += dx[l] * row;
        }
    }
    Ok(PullbackCheck { lhs, rhs })
}

/// Covariant Itô integral of `theta` along the image path versus its
/// four-term pullback form on the source:
///
/// `int eta DIv  +  int (DhF)*theta o dx
///  + 1/2 int [grad eta - (Fb_* x DvF)* grad' theta](dx, Dv)
///  - 1/2 int (Fb_* x DhF)* grad' theta (dx, dx)`
///
/// with `eta = (DvF)*theta`. Requires a fiberwise-affine map: `eta` must be
/// a field of the base point alone, so `DvF` is taken at `v = 0` (where the
/// affine difference quotient is also exact to rounding).
pub fn bundle_map_ito_residual(
    src: &Scene,
    map: &BundleMap,
    theta: &str,
    path: &BundlePath,
) -> Result<PullbackCheck> {
    let th = target_covector(map, theta)?;
    let image = map.image_path(path);
    let u0p = DMatrix::identity(map.target.rank(), map.target.rank());
    let fpi = super::decompose(&map.target, image, &u0p)?;
    let lhs = *super::covariant_ito_field(&map.target, th, &fpi)
        .last()
        .unwrap();

    let u0 = DMatrix::identity(src.rank(), src.rank());
    let fp = super::decompose(src, path.clone(), &u0)?;

    let d = src.dim();
    let n = src.rank();
    let np = map.target.rank();
    let dp = map.target.dim();
    let h = src.fd_step;

    // eta(x) = DvF(x, 0)^T theta(Fb x), an honest covector field on the source
    let eta_field = {
        let map = map.clone();
        let th = th.clone();
        Field::from_fn(FieldKind::Covector, n, 1, move |x, _v, out| {
            let mut sc = EvalScratch::default();
            let mut bx = vec![0.0; dp];
            map.base_into(x, &mut bx);
            let mut thv = vec![0.0; np];
            map.target.eval_field_into(&th, &bx, &[], &mut thv, &mut sc);
            let zero = vec![0.0; n];
            let dv = vertical_derivative_matrix(&map, x, &zero);
            for a in 0..n {
                let mut acc = 0.0;
                for bb in 0..np {
                    acc += thv[bb] * dv[(bb, a)];
                }
                out[a] = acc;
            }
        })
    };

    let term1 = *super::covariant_ito_field(src, &eta_field, &fp).last().unwrap();

    let mut sc = EvalScratch::default();
    let mut xm = vec![0.0; d];
    let mut vm = vec![0.0; n];
    let mut dx = vec![0.0; d];
    let mut df = vec![0.0; n];
    let mut bx = vec![0.0; dp];
    let mut thv = vec![0.0; np];
    let mut udf = DVector::zeros(n);
    let zero = vec![0.0; n];
    let mut rest = 0.0;

    for k in 0..path.steps() {
        fp.path.x_mid_into(k, &mut xm);
        fp.path.v_mid_into(k, &mut vm);
        fp.path.dx_into(k, &mut dx);
        fp.df_into(k, &mut df);
        udf.gemv(1.0, fp.frame(k), &DVector::from_column_slice(&df), 0.0);

        map.base_into(&xm, &mut bx);
        map.target.eval_field_into(th, &bx, &[], &mut thv, &mut sc);
        let horiz = horizontal_derivative(map, src, &xm, &vm, &dx);
        for j in 0..np {
            rest += thv[j] * horiz[j];
        }

        let jac = map.base_jacobian(&xm);
        let grad_eta = nabla_covector_field(src, &eta_field, &xm, h);
        let grad_th = nabla_covector_field(&map.target, th, &bx, h);
        let dvmat = vertical_derivative_matrix(map, &xm, &zero);
        // (Fb_* x DvF)* grad' theta = jac^T grad' DvF, source-shaped d x n
        let pulled = jac.transpose() * &grad_th * &dvmat;

        for l in 0..d {
            if dx[l] == 0.0 {
                continue;
            }
            let mut pair = 0.0;
            for a in 0..n {
                pair += (grad_eta[(l, a)] - pulled[(l, a)]) * udf[a];
            }
            rest += 0.5 * dx[l] * pair;

            // minus sign: conversion moves the target-side bracket across
            let mut hh = 0.0;
            for j in 0..dp {
                let mut inner = 0.0;
                for bb in 0..np {
                    inner += grad_th[(j, bb)] * horiz[bb];
                }
                hh += jac[(j, l)] * inner;
            }
            rest -= 0.5 * dx[l] * hh;
        }
    }
    Ok(PullbackCheck {
        lhs,
        rhs: term1 + rest,
    })
}

/// Ready-made maps for a rank-2 source scene over a 2d base.
///
/// * `identity` — same scene, both maps the identity,
/// * `affine` — fiber `v -> A v + c` with fixed generic `A`, `c`, over a
///   small base diffeomorphism (a curved base is what keeps the pullback
///   identities from collapsing to per-step algebra: an affine map over an
///   affine base matches the connector sums term by term),
/// * `linear` — a different base diffeomorphism with fiber `v -> A(x) v`,
///   `A(x)` uniformly invertible.
pub fn builtin_map(name: &str, src: &Scene) -> Result<BundleMap> {
    match name {
        "identity" => Ok(BundleMap::new(
            "identity",
            src.clone(),
            |x, out| out.copy_from_slice(x),
            |_, v, out| out.copy_from_slice(v),
        )),
        "affine" => {
            if src.dim() != 2 || src.rank() != 2 {
                return Err(Error::config("affine map needs a 2d rank-2 source scene"));
            }
            Ok(BundleMap::new(
                "affine",
                src.clone(),
                |x, out| {
                    out[0] = x[0] + 0.3 * (x[1]).sin();
                    out[1] = x[1] + 0.3 * (x[0]).cos();
                },
                |_, v, out| {
                    out[0] = 1.2 * v[0] + 0.3 * v[1] + 0.5;
                    out[1] = -0.4 * v[0] + 0.9 * v[1] - 0.25;
                },
            ))
        }
        "linear" => {
            if src.dim() != 2 || src.rank() != 2 {
                return Err(Error::config("linear map needs a 2d rank-2 source scene"));
            }
            Ok(BundleMap::new(
                "linear",
                src.clone(),
                |x, out| {
                    out[0] = x[0] - 0.2 * (x[1]).cos();
                    out[1] = x[1] + 0.2 * (x[0]).sin();
                },
                |x, v, out| {
                    let a00 = 1.0 + 0.2 * x[1].sin();
                    let a01 = 0.1 * x[0].sin();
                    let a10 = -0.1 * x[1].sin();
                    let a11 = 1.0 + 0.1 * x[0].cos();
                    out[0] = a00 * v[0] + a01 * v[1];
                    out[1] = a10 * v[0] + a11 * v[1];
                },
            ))
        }
        other => Err(Error::config(format!(
            "unknown bundle map '{other}' (known: identity, affine, linear)"
        ))),
    }
}

pub const BUILTIN_MAPS: &[&str] = &["identity", "affine", "linear"];
