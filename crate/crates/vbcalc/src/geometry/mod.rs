//! Chart-level differential geometry: manifolds with a metric, vector
//! bundles given by connection coefficients, and the finite-difference
//! operators built on them.
//!
//! Conventions used throughout the crate:
//!
//! * a single chart; points are coordinate vectors of length `d`,
//! * bundle connection coefficients are stored as `d` matrices `G[i]` with
//!   `G[i][(b, a)]` the `b`-component of the derivative of frame vector `a`
//!   in coordinate direction `i`, so sections differentiate as
//!   `(grad_i s)^b = d_i s^b + (G[i] s)^b`,
//! * Levi-Civita coefficients are `d` symmetric matrices `lc[i][(j, k)]`,
//! * central differences with a per-scene step (default `1e-5`),
//! * periodic coordinates are reduced into `[0, period)` before any field
//!   or coefficient evaluation.

pub mod fields;
pub mod scenes;

use crate::error::{Error, Result};
use crate::fieldexpr::Params;
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;
use std::sync::Arc;

pub use fields::{EvalScratch, Field, FieldKind};

/// Default step for all central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone)]
enum Domain {
    All,
    Ball { radius: f64 },
}

#[derive(Clone)]
enum Metric {
    Identity,
    /// g = (2 / (1 + |x|^2))^2 * I
    RoundStereo,
    Custom(Arc<dyn Fn(&[f64], &mut DMatrix<f64>) + Send + Sync>),
}

#[derive(Clone)]
pub struct ChartManifold {
    pub dim: usize,
    /// Per-coordinate period; `None` entries are aperiodic.
    pub periods: Option<Vec<Option<f64>>>,
    domain: Domain,
    metric: Metric,
    /// Metric is exactly the identity everywhere (skips drift/diffusion work).
    pub identity_metric: bool,
}

impl ChartManifold {
    pub fn euclidean(dim: usize, periods: Option<Vec<Option<f64>>>) -> ChartManifold {
        ChartManifold {
            dim,
            periods,
            domain: Domain::All,
            metric: Metric::Identity,
            identity_metric: true,
        }
    }

    pub fn round_stereo(chart_radius: f64) -> ChartManifold {
        ChartManifold {
            dim: 2,
            periods: None,
            domain: Domain::Ball {
                radius: chart_radius,
            },
            metric: Metric::RoundStereo,
            identity_metric: false,
        }
    }

    pub fn with_metric(
        dim: usize,
        metric: impl Fn(&[f64], &mut DMatrix<f64>) + Send + Sync + 'static,
    ) -> ChartManifold {
        ChartManifold {
            dim,
            periods: None,
            domain: Domain::All,
            metric: Metric::Custom(Arc::new(metric)),
            identity_metric: false,
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self.domain {
            Domain::All => x.iter().all(|c| c.is_finite()),
            Domain::Ball { radius } => {
                x.iter().all(|c| c.is_finite())
                    && x.iter().map(|c| c * c).sum::<f64>() < radius * radius
            }
        }
    }

    pub fn wrap_coord(&self, i: usize, xi: f64) -> f64 {
        match &self.periods {
            Some(ps) => match ps[i] {
                Some(p) => xi.rem_euclid(p),
                None => xi,
            },
            None => xi,
        }
    }

    pub fn wrap_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(x.iter().enumerate().map(|(i, &xi)| self.wrap_coord(i, xi)));
    }

    pub fn metric_into(&self, x: &[f64], out: &mut DMatrix<f64>) {
        debug_assert_eq!(out.nrows(), self.dim);
        match &self.metric {
            Metric::Identity => {
                out.fill(0.0);
                out.fill_diagonal(1.0);
            }
            Metric::RoundStereo => {
                let r2: f64 = x.iter().map(|c| c * c).sum();
                let lam = 2.0 / (1.0 + r2);
                out.fill(0.0);
                out.fill_diagonal(lam * lam);
            }
            Metric::Custom(f) => f(x, out),
        }
    }

    pub fn metric(&self, x: &[f64]) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.dim, self.dim);
        self.metric_into(x, &mut g);
        g
    }
}

#[derive(Clone)]
enum Christoffel {
    Zero,
    Fn(Arc<dyn Fn(&[f64], &mut [DMatrix<f64>]) + Send + Sync>),
}

#[derive(Clone)]
pub struct VectorBundle {
    pub rank: usize,
    /// Connection coefficients vanish identically.
    pub flat: bool,
    christoffel: Christoffel,
}

impl VectorBundle {
    pub fn flat(rank: usize) -> VectorBundle {
        VectorBundle {
            rank,
            flat: true,
            christoffel: Christoffel::Zero,
        }
    }

    pub fn from_fn(
        rank: usize,
        f: impl Fn(&[f64], &mut [DMatrix<f64>]) + Send + Sync + 'static,
    ) -> VectorBundle {
        VectorBundle {
            rank,
            flat: false,
            christoffel: Christoffel::Fn(Arc::new(f)),
        }
    }

    /// Fill `out[i]` (one `rank x rank` matrix per coordinate direction) with
    /// the connection coefficients at pre-wrapped `x`.
    pub fn christoffel_into(&self, x: &[f64], out: &mut [DMatrix<f64>]) {
        match &self.christoffel {
            Christoffel::Zero => {
                for m in out.iter_mut() {
                    m.fill(0.0);
                }
            }
            Christoffel::Fn(f) => f(x, out),
        }
    }
}

/// A manifold, a bundle over it, named fields, and shared parameters.
#[derive(Clone)]
pub struct Scene {
    pub name: String,
    pub manifold: ChartManifold,
    pub bundle: VectorBundle,
    pub fields: BTreeMap<String, Field>,
    pub params: Params,
    pub fd_step: f64,
}

impl std::fmt::Debug for Scene {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scene")
            .field("name", &self.name)
            .field("dim", &self.manifold.dim)
            .field("rank", &self.bundle.rank)
            .field("fields", &self.fields.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Scene {
    pub fn dim(&self) -> usize {
        self.manifold.dim
    }

    pub fn rank(&self) -> usize {
        self.bundle.rank
    }

    pub fn insert_field(&mut self, name: impl Into<String>, field: Field) {
        self.fields.insert(name.into(), field);
    }

    pub fn field(&self, name: &str) -> Result<&Field> {
        self.fields
            .get(name)
            .ok_or_else(|| Error::UnknownField(name.to_string()))
    }

    pub fn field_of_kind(&self, name: &str, kind: FieldKind) -> Result<&Field> {
        let f = self.field(name)?;
        if f.kind != kind {
            return Err(Error::FieldKind {
                name: name.to_string(),
                expected: kind.name(),
                actual: f.kind.name(),
            });
        }
        Ok(f)
    }

    /// Evaluate a field at `x` (wrapped here) and fiber point `v`.
    pub fn eval_field_into(
        &self,
        field: &Field,
        x: &[f64],
        v: &[f64],
        out: &mut [f64],
        sc: &mut EvalScratch,
    ) {
        let wrap = std::mem::take(&mut sc.wrap);
        let mut wrap = wrap;
        self.manifold.wrap_into(x, &mut wrap);
        field.eval_raw(&wrap, v, out, sc);
        sc.wrap = wrap;
    }

    /// Name-based convenience used by the CLI and tests: components plus
    /// `(rows, cols)`.
    pub fn eval_field(&self, name: &str, x: &[f64], v: &[f64]) -> Result<(Vec<f64>, usize, usize)> {
        let field = self.field(name)?;
        let mut out = vec![0.0; field.len()];
        let mut sc = EvalScratch::default();
        self.eval_field_into(field, x, v, &mut out, &mut sc);
        Ok((out, field.rows, field.cols))
    }

    /// Bundle connection coefficients at `x` (wrapped here).
    pub fn christoffel_into(&self, x: &[f64], out: &mut [DMatrix<f64>], sc: &mut EvalScratch) {
        if self.bundle.flat {
            for m in out.iter_mut() {
                m.fill(0.0);
            }
            return;
        }
        let mut wrap = std::mem::take(&mut sc.wrap);
        self.manifold.wrap_into(x, &mut wrap);
        self.bundle.christoffel_into(&wrap, out);
        sc.wrap = wrap;
    }

    pub fn christoffel(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let n = self.rank();
        let mut out = vec![DMatrix::zeros(n, n); self.dim()];
        self.christoffel_into(x, &mut out, &mut EvalScratch::default());
        out
    }
}

// ───────────────────────── operators ─────────────────────────

/// Levi-Civita coefficients from the metric by central differences:
/// `lc[i][(j, k)]`, symmetric in `(j, k)` exactly.
pub fn levi_civita_christoffels(
    m: &ChartManifold,
    x: &[f64],
    h: f64,
) -> Result<Vec<DMatrix<f64>>> {
    let d = m.dim;
    if !m.contains(x) {
        return Err(Error::DomainExit {
            step: 0,
            point: x.to_vec(),
        });
    }
    let g = m.metric(x);
    let ginv = nalgebra::Cholesky::new(g)
        .ok_or_else(|| Error::MetricNotPositive { point: x.to_vec() })?
        .inverse();

    // dg[j][(l, k)] = d_j g_{lk}
    let mut xp = x.to_vec();
    let mut glo = DMatrix::zeros(d, d);
    let mut ghi = DMatrix::zeros(d, d);
    let mut dg = Vec::with_capacity(d);
    for j in 0..d {
        xp[j] = x[j] + h;
        m.metric_into(&xp, &mut ghi);
        xp[j] = x[j] - h;
        m.metric_into(&xp, &mut glo);
        xp[j] = x[j];
        dg.push((&ghi - &glo) / (2.0 * h));
    }

    let mut out = vec![DMatrix::zeros(d, d); d];
    for i in 0..d {
        for j in 0..d {
            for k in 0..=j {
                let mut s = 0.0;
                for l in 0..d {
                    s += ginv[(i, l)] * (dg[j][(l, k)] + dg[k][(l, j)] - dg[l][(j, k)]);
                }
                let v = 0.5 * s;
                out[i][(j, k)] = v;
                out[i][(k, j)] = v;
            }
        }
    }
    Ok(out)
}

/// Curvature of the bundle connection at `x`, from central differences of
/// the coefficients plus the commutator term.
#[derive(Debug, Clone)]
pub struct CurvatureValue {
    pub dim: usize,
    pub rank: usize,
    /// Row-major `d x d` grid of `rank x rank` matrices, antisymmetric in
    /// the two base slots by construction.
    mats: Vec<DMatrix<f64>>,
}

impl CurvatureValue {
    pub fn matrix(&self, i: usize, j: usize) -> &DMatrix<f64> {
        &self.mats[i * self.dim + j]
    }

    /// `R(u, w) s` contracted over both base slots.
    pub fn apply(&self, u: &[f64], w: &[f64], s: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.rank);
        for i in 0..self.dim {
            for j in 0..self.dim {
                let c = u[i] * w[j];
                if c != 0.0 {
                    out.axpy(c, &(self.matrix(i, j) * s), 1.0);
                }
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.mats
            .iter()
            .flat_map(|m| m.iter())
            .fold(0.0f64, |a, &b| a.max(b.abs()))
    }
}

pub fn bundle_curvature(s: &Scene, x: &[f64], h: f64) -> Result<CurvatureValue> {
    let d = s.dim();
    let n = s.rank();
    if !s.manifold.contains(x) {
        return Err(Error::DomainExit {
            step: 0,
            point: x.to_vec(),
        });
    }
    let mut sc = EvalScratch::default();
    let zero = vec![DMatrix::zeros(n, n); d];

    let gamma0 = s.christoffel(x);
    // dgam[i][j] = d_i G_j
    let mut xp = x.to_vec();
    let mut dgam: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(d);
    let mut hi = zero.clone();
    let mut lo = zero.clone();
    for i in 0..d {
        xp[i] = x[i] + h;
        s.christoffel_into(&xp, &mut hi, &mut sc);
        xp[i] = x[i] - h;
        s.christoffel_into(&xp, &mut lo, &mut sc);
        xp[i] = x[i];
        dgam.push(
            hi.iter()
                .zip(&lo)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect(),
        );
    }

    let mut mats = vec![DMatrix::zeros(n, n); d * d];
    for i in 0..d {
        for j in (i + 1)..d {
            let mut r = &dgam[i][j] - &dgam[j][i];
            r += &gamma0[i] * &gamma0[j];
            r -= &gamma0[j] * &gamma0[i];
            mats[j * d + i] = -&r;
            mats[i * d + j] = r;
        }
    }
    Ok(CurvatureValue { dim: d, rank: n, mats })
}

/// Covariant derivative of a covector field: `(grad theta)[(j, a)] =
/// d_j theta^a - sum_b G_j[(b, a)] theta^b`.
pub fn nabla_covector_field(s: &Scene, theta: &Field, x: &[f64], h: f64) -> DMatrix<f64> {
    let d = s.dim();
    let n = s.rank();
    debug_assert_eq!(theta.len(), n);
    let mut sc = EvalScratch::default();
    let mut out = DMatrix::zeros(d, n);
    let mut xp = x.to_vec();
    let mut hi = vec![0.0; n];
    let mut lo = vec![0.0; n];
    for j in 0..d {
        xp[j] = x[j] + h;
        s.eval_field_into(theta, &xp, &[], &mut hi, &mut sc);
        xp[j] = x[j] - h;
        s.eval_field_into(theta, &xp, &[], &mut lo, &mut sc);
        xp[j] = x[j];
        for a in 0..n {
            out[(j, a)] = (hi[a] - lo[a]) / (2.0 * h);
        }
    }
    if !s.bundle.flat {
        let mut th = vec![0.0; n];
        s.eval_field_into(theta, x, &[], &mut th, &mut sc);
        let gam = s.christoffel(x);
        for j in 0..d {
            for a in 0..n {
                let mut corr = 0.0;
                for b in 0..n {
                    corr += gam[j][(b, a)] * th[b];
                }
                out[(j, a)] -= corr;
            }
        }
    }
    out
}

pub fn nabla_covector(s: &Scene, theta_name: &str, x: &[f64], h: f64) -> Result<DMatrix<f64>> {
    let theta = s.field_of_kind(theta_name, FieldKind::Covector)?;
    Ok(nabla_covector_field(s, theta, x, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::scenes;

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
    }

    #[test]
    fn flat_christoffels_vanish() {
        let s = scenes::flat(3, 1, None);
        let lc = levi_civita_christoffels(&s.manifold, &[0.4, -1.0, 2.0], FD_STEP).unwrap();
        for m in &lc {
            assert_eq!(max_abs(m), 0.0);
        }
    }

    #[test]
    fn sphere_christoffels_vanish_at_origin() {
        let s = scenes::sphere_stereo();
        let lc = levi_civita_christoffels(&s.manifold, &[0.0, 0.0], FD_STEP).unwrap();
        for m in &lc {
            assert!(max_abs(m) < 1e-10);
        }
    }

    // Independent closed form for a conformal metric g = exp(2 phi) I:
    // lc[i][(j,k)] = d_j phi delta_ik + d_k phi delta_ij - d_i phi delta_jk.
    fn conformal_oracle(x: &[f64]) -> Vec<DMatrix<f64>> {
        let d = x.len();
        let r2: f64 = x.iter().map(|c| c * c).sum();
        let dphi: Vec<f64> = x.iter().map(|&c| -2.0 * c / (1.0 + r2)).collect();
        let mut out = vec![DMatrix::zeros(d, d); d];
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let mut v = 0.0;
                    if i == k {
                        v += dphi[j];
                    }
                    if i == j {
                        v += dphi[k];
                    }
                    if j == k {
                        v -= dphi[i];
                    }
                    out[i][(j, k)] = v;
                }
            }
        }
        out
    }

    #[test]
    fn sphere_christoffels_match_conformal_closed_form() {
        let s = scenes::sphere_stereo();
        let x = [1.0, 0.0];
        let h = FD_STEP;
        let lc = levi_civita_christoffels(&s.manifold, &x, h).unwrap();
        let oracle = conformal_oracle(&x);
        for i in 0..2 {
            let diff = &lc[i] - &oracle[i];
            assert!(max_abs(&diff) < 100.0 * h * h, "dir {i}: {diff}");
        }
    }

    #[test]
    fn christoffel_symmetry_is_exact() {
        let s = scenes::sphere_stereo();
        let lc = levi_civita_christoffels(&s.manifold, &[0.3, -0.8], FD_STEP).unwrap();
        for m in &lc {
            for j in 0..2 {
                for k in 0..2 {
                    assert_eq!(m[(j, k)].to_bits(), m[(k, j)].to_bits());
                }
            }
        }
    }

    #[test]
    fn christoffel_fd_converges_at_second_order() {
        let s = scenes::sphere_stereo();
        let x = [0.7, -0.4];
        let oracle = conformal_oracle(&x);
        let err = |h: f64| {
            let lc = levi_civita_christoffels(&s.manifold, &x, h).unwrap();
            lc.iter()
                .zip(&oracle)
                .map(|(a, b)| max_abs(&(a - b)))
                .fold(0.0f64, f64::max)
        };
        // second-order differences: halving the step divides the error by 4
        let e1 = err(1e-3);
        let e2 = err(5e-4);
        assert!(e1 / e2 > 3.5, "e1={e1:.3e} e2={e2:.3e}");
    }

    #[test]
    fn outside_domain_rejected() {
        let s = scenes::sphere_stereo();
        let err = levi_civita_christoffels(&s.manifold, &[1e6, 0.0], FD_STEP).unwrap_err();
        assert!(matches!(err, Error::DomainExit { .. }));
    }

    #[test]
    fn flat_curvature_vanishes() {
        let s = scenes::flat(2, 2, None);
        let r = bundle_curvature(&s, &[0.3, 0.4], FD_STEP).unwrap();
        assert_eq!(r.max_abs(), 0.0);
    }

    // Hand expansion: G_1 = l * x2 * J, G_2 = 0, so R_12 = -d_2 G_1 = -l J.
    #[test]
    fn twisted_flat_curvature_matches_hand_value() {
        let l = 0.8;
        let s = scenes::twisted_flat(l);
        let h = FD_STEP;
        for x in [[0.0, 0.0], [1.3, -2.0], [-0.4, 5.0]] {
            let r = bundle_curvature(&s, &x, h).unwrap();
            let r12 = r.matrix(0, 1);
            let expect = DMatrix::from_row_slice(2, 2, &[0.0, -l, l, 0.0]);
            assert!(max_abs(&(r12 - &expect)) < 10.0 * h * h, "at {x:?}: {r12}");
        }
    }

    #[test]
    fn curvature_antisymmetry_is_exact() {
        let s = scenes::sphere_stereo();
        let r = bundle_curvature(&s, &[0.5, 0.2], FD_STEP).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let a = r.matrix(i, j);
                let b = r.matrix(j, i);
                for p in 0..2 {
                    for q in 0..2 {
                        // exact float equality, not a tolerance
                        assert_eq!(a[(p, q)], -b[(p, q)]);
                    }
                }
            }
        }
    }

    #[test]
    fn sphere_sectional_curvature_is_one() {
        let s = scenes::sphere_stereo();
        let h = FD_STEP;
        for x in [[0.3, -0.2], [1.0, 0.5], [0.0, 0.0]] {
            let r = bundle_curvature(&s, &x, h).unwrap();
            let g = s.manifold.metric(&x);
            // K = g(R(e1,e2) e2, e1) / (g11 g22 - g12^2)
            let w = r.matrix(0, 1).column(1);
            let num: f64 = (0..2).map(|b| g[(b, 0)] * w[b]).sum();
            let den = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
            let k = num / den;
            assert!((k - 1.0).abs() < 10.0 * h * h, "at {x:?}: K = {k}");
        }
    }

    #[test]
    fn twisted_flat_curvature_is_position_independent() {
        let s = scenes::twisted_flat(1.0);
        let h = FD_STEP;
        let r0 = bundle_curvature(&s, &[0.0, 0.0], h).unwrap();
        let r1 = bundle_curvature(&s, &[3.0, -7.0], h).unwrap();
        let diff = max_abs(&(r0.matrix(0, 1) - r1.matrix(0, 1)));
        assert!(diff < 10.0 * h * h);
    }

    #[test]
    fn metric_positive_definite_on_sampled_points() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for s in [
            scenes::flat(2, 1, None),
            scenes::twisted_flat(1.0),
            scenes::sphere_stereo(),
        ] {
            let d = s.dim();
            for _ in 0..1000 {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
                let g = s.manifold.metric(&x);
                assert!(
                    nalgebra::Cholesky::new(g).is_some(),
                    "{} not PD at {x:?}",
                    s.name
                );
            }
        }
    }

    #[test]
    fn christoffel_continuity_sampled() {
        let s = scenes::sphere_stereo();
        let x = [0.9, 0.1];
        let g0 = s.christoffel(&x);
        for eps in [1e-3, 1e-5] {
            let g1 = s.christoffel(&[x[0] + eps, x[1]]);
            let diff: f64 = g0
                .iter()
                .zip(&g1)
                .map(|(a, b)| max_abs(&(a - b)))
                .fold(0.0, f64::max);
            assert!(diff < 10.0 * eps, "eps={eps}: {diff}");
        }
    }

    #[test]
    fn nabla_covector_flat_constant_is_zero() {
        let s = scenes::flat(2, 2, None);
        let f = Field::from_fn(FieldKind::Covector, 2, 1, |_, _, out| {
            out[0] = 1.0;
            out[1] = -2.0;
        });
        let grad = nabla_covector_field(&s, &f, &[0.3, 0.4], FD_STEP);
        assert_eq!(max_abs(&grad), 0.0);
    }

    #[test]
    fn nabla_covector_linear_component() {
        // theta^1 = x1 on a flat rank-1 scene: gradient is the (j=1, a=1) unit.
        let s = scenes::flat(2, 1, None);
        let f = Field::from_fn(FieldKind::Covector, 1, 1, |x, _, out| out[0] = x[0]);
        let grad = nabla_covector_field(&s, &f, &[0.5, -0.1], FD_STEP);
        assert!((grad[(0, 0)] - 1.0).abs() < 1e-9);
        assert!(grad[(1, 0)].abs() < 1e-12);
    }

    // Constant covector on the twisted scene picks up only the -G^T theta
    // term: (grad theta)[(j, a)] = -sum_b G_j[(b, a)] theta^b.
    #[test]
    fn nabla_covector_twisted_hand_contraction() {
        let l = 1.3;
        let s = scenes::twisted_flat(l);
        let f = Field::from_fn(FieldKind::Covector, 2, 1, |_, _, out| {
            out[0] = 2.0;
            out[1] = 5.0;
        });
        let x = [0.4, 0.9];
        let grad = nabla_covector_field(&s, &f, &x, FD_STEP);
        // G_1 = l x2 J with J[(0,1)] = 1, J[(1,0)] = -1:
        // column a=0 of G_1 is (0, -l x2), column a=1 is (l x2, 0).
        let lx2 = l * x[1];
        assert!((grad[(0, 0)] - lx2 * 5.0).abs() < 1e-9);
        assert!((grad[(0, 1)] + lx2 * 2.0).abs() < 1e-9);
        assert!(grad[(1, 0)].abs() < 1e-12);
        assert!(grad[(1, 1)].abs() < 1e-12);
    }

    #[test]
    fn eval_field_reports_unknown_name() {
        let s = scenes::flat(2, 1, None);
        let err = s.eval_field("nope", &[0.0, 0.0], &[]).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn periodic_wrap_before_evaluation() {
        let tau = std::f64::consts::TAU;
        let s = scenes::flat(1, 1, Some(vec![Some(tau)]));
        let f = Field::from_fn(FieldKind::Covector, 1, 1, |x, _, out| out[0] = x[0]);
        let mut out = [0.0];
        let mut sc = EvalScratch::default();
        s.eval_field_into(&f, &[tau + 0.25], &[], &mut out, &mut sc);
        assert!((out[0] - 0.25).abs() < 1e-12);
        s.eval_field_into(&f, &[-0.25], &[], &mut out, &mut sc);
        assert!((out[0] - (tau - 0.25)).abs() < 1e-12);
    }
}
