//! Uniform time grids, seeded Wiener drivers, discrete stochastic sums, and
//! the path simulator for base and fiber processes.
//!
//! Simulation conventions:
//!
//! * base Brownian motion uses the metric generator: drift
//!   `b^i = -1/2 g^{jk} lc^i_{jk}` and diffusion `sqrt(g^{-1})` (principal
//!   root), Euler-Maruyama in the chart,
//! * on an identity-metric chart the step degenerates to plain addition of
//!   driver increments, so paths reproduce the driver bit for bit,
//! * deterministic base paths integrate a velocity field with Heun steps,
//! * parallel fiber transport uses the same Heun predictor/corrector as the
//!   frame lift, so the two stay consistent at matching resolution,
//! * stored coordinates are never wrapped; periodic reduction happens inside
//!   every field/coefficient evaluation, which keeps increments across the
//!   seam honest.

use crate::error::{Error, Result};
use crate::geometry::{levi_civita_christoffels, EvalScratch, Field, Scene};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The u64 stream seed for one path of a seeded ensemble. The run seed is
/// scrambled before the path index is folded in: XOR alone would hand two
/// nearby run seeds almost the same *set* of streams (reassigned across
/// paths), making "independent" runs share their samples.
pub fn stream_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed) ^ index
}

/// Per-path generator: one master seed, one stream per path index.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    seeded_rng(stream_seed(seed, index))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, steps: usize) -> TimeGrid {
        assert!(dt > 0.0 && steps > 0);
        TimeGrid { t0, dt, steps }
    }

    pub fn from_horizon(horizon: f64, dt: f64) -> TimeGrid {
        let steps = (horizon / dt).round().max(1.0) as usize;
        TimeGrid::new(0.0, dt, steps)
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + self.dt * k as f64
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.steps)
    }

    /// Grid with `factor`-times larger steps over the same horizon.
    pub fn coarsen(&self, factor: usize) -> TimeGrid {
        assert!(factor > 0 && self.steps % factor == 0, "factor must divide steps");
        TimeGrid::new(self.t0, self.dt * factor as f64, self.steps / factor)
    }
}

/// Driver increments, one row per step, `cols` independent scalar drivers.
#[derive(Debug, Clone, PartialEq)]
pub struct Increments {
    pub steps: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl Increments {
    pub fn zeros(steps: usize, cols: usize) -> Increments {
        Increments {
            steps,
            cols,
            data: vec![0.0; steps * cols],
        }
    }

    /// Independent `N(0, dt)` entries, row-major, in a fixed draw order.
    pub fn gaussian<R: rand::Rng>(rng: &mut R, steps: usize, cols: usize, dt: f64) -> Increments {
        let sd = dt.sqrt();
        let data = (0..steps * cols)
            .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        Increments { steps, cols, data }
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.cols..(k + 1) * self.cols]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.cols..(k + 1) * self.cols]
    }

    /// Sum consecutive groups of `factor` rows: the same driver seen on a
    /// grid with `factor`-times larger steps.
    pub fn coarsen(&self, factor: usize) -> Increments {
        assert!(factor > 0 && self.steps % factor == 0, "factor must divide steps");
        let steps = self.steps / factor;
        let mut out = Increments::zeros(steps, self.cols);
        for k in 0..steps {
            for f in 0..factor {
                let src = self.row(k * factor + f);
                let dst = out.row_mut(k);
                for c in 0..self.cols {
                    dst[c] += src[c];
                }
            }
        }
        out
    }

    /// Running sums: `out[k]` is the driver value after `k` steps.
    pub fn cumulative(&self, col: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.steps + 1);
        let mut acc = 0.0;
        out.push(acc);
        for k in 0..self.steps {
            acc += self.row(k)[col];
            out.push(acc);
        }
        out
    }
}

// ───────────────────── discrete stochastic sums ─────────────────────

/// Left-point sum `sum_k a_k (y_{k+1} - y_k)` over matching sample paths.
pub fn ito_sum(a: &[f64], y: &[f64]) -> f64 {
    assert_eq!(a.len(), y.len());
    let mut s = 0.0;
    for k in 0..y.len() - 1 {
        s += a[k] * (y[k + 1] - y[k]);
    }
    s
}

/// Trapezoid sum `sum_k (a_k + a_{k+1})/2 * (y_{k+1} - y_k)`.
pub fn stratonovich_sum(a: &[f64], y: &[f64]) -> f64 {
    assert_eq!(a.len(), y.len());
    let mut s = 0.0;
    for k in 0..y.len() - 1 {
        s += 0.5 * (a[k] + a[k + 1]) * (y[k + 1] - y[k]);
    }
    s
}

/// Realized covariation `sum_k (a_{k+1} - a_k)(y_{k+1} - y_k)`.
pub fn quadratic_covariation(a: &[f64], y: &[f64]) -> f64 {
    assert_eq!(a.len(), y.len());
    let mut s = 0.0;
    for k in 0..y.len() - 1 {
        s += (a[k + 1] - a[k]) * (y[k + 1] - y[k]);
    }
    s
}

// ───────────────────────── path simulation ─────────────────────────

#[derive(Clone, Copy)]
pub enum BaseDynamics<'a> {
    /// Metric Brownian motion driven by the first `dim` driver columns.
    Brownian,
    /// Deterministic flow of a velocity field, Heun steps, no driver use.
    Velocity(&'a Field),
}

#[derive(Clone, Copy)]
pub enum FiberDynamics<'a> {
    /// Fiber point held constant.
    Frozen,
    /// Parallel transport along the realized base path.
    Parallel,
    /// Euler-Maruyama fiber SDE `dv = a(x, v) dt + s(x, v) dB` with `B` the
    /// driver columns after the base's.
    DriftDiffusion {
        drift: Option<&'a Field>,
        diffusion: Option<&'a Field>,
    },
}

/// A sampled base path with its fiber path on a shared grid.
#[derive(Debug, Clone)]
pub struct BundlePath {
    pub dim: usize,
    pub rank: usize,
    pub grid: TimeGrid,
    xs: Vec<f64>,
    vs: Vec<f64>,
}

impl BundlePath {
    /// Assemble a path from flat point arrays: `xs` is `(K+1) * dim`,
    /// `vs` is `(K+1) * rank`, both in step-major order.
    pub fn from_parts(dim: usize, rank: usize, grid: TimeGrid, xs: Vec<f64>, vs: Vec<f64>) -> BundlePath {
        assert_eq!(xs.len(), (grid.steps + 1) * dim, "base point array shape");
        assert_eq!(vs.len(), (grid.steps + 1) * rank, "fiber point array shape");
        BundlePath {
            dim,
            rank,
            grid,
            xs,
            vs,
        }
    }

    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    pub fn x(&self, k: usize) -> &[f64] {
        &self.xs[k * self.dim..(k + 1) * self.dim]
    }

    pub fn v(&self, k: usize) -> &[f64] {
        &self.vs[k * self.rank..(k + 1) * self.rank]
    }

    pub fn dx_into(&self, k: usize, out: &mut [f64]) {
        let a = self.x(k);
        let b = self.x(k + 1);
        for i in 0..self.dim {
            out[i] = b[i] - a[i];
        }
    }

    pub fn dv_into(&self, k: usize, out: &mut [f64]) {
        let a = self.v(k);
        let b = self.v(k + 1);
        for i in 0..self.rank {
            out[i] = b[i] - a[i];
        }
    }

    /// Midpoint of base step `k` in chart coordinates.
    pub fn x_mid_into(&self, k: usize, out: &mut [f64]) {
        let a = self.x(k);
        let b = self.x(k + 1);
        for i in 0..self.dim {
            out[i] = 0.5 * (a[i] + b[i]);
        }
    }

    pub fn v_mid_into(&self, k: usize, out: &mut [f64]) {
        let a = self.v(k);
        let b = self.v(k + 1);
        for i in 0..self.rank {
            out[i] = 0.5 * (a[i] + b[i]);
        }
    }
}

/// Scratch state for base Brownian steps on a non-identity metric.
struct MetricStepper {
    g: DMatrix<f64>,
    drift: DVector<f64>,
    noise: DVector<f64>,
    xw: Vec<f64>,
}

impl MetricStepper {
    fn new(d: usize) -> MetricStepper {
        MetricStepper {
            g: DMatrix::zeros(d, d),
            drift: DVector::zeros(d),
            noise: DVector::zeros(d),
            xw: Vec::with_capacity(d),
        }
    }

    /// One Euler-Maruyama step of metric Brownian motion, in place.
    fn step(&mut self, scene: &Scene, x: &mut [f64], dw: &[f64], dt: f64, k: usize) -> Result<()> {
        let d = x.len();
        let m = &scene.manifold;
        m.wrap_into(x, &mut self.xw);
        if !m.contains(&self.xw) {
            return Err(Error::DomainExit {
                step: k,
                point: self.xw.clone(),
            });
        }
        m.metric_into(&self.xw, &mut self.g);
        let chol = nalgebra::Cholesky::new(self.g.clone()).ok_or(Error::MetricNotPositive {
            point: self.xw.clone(),
        })?;
        let ginv = chol.inverse();
        let lc = levi_civita_christoffels(m, &self.xw, scene.fd_step)?;

        self.drift.fill(0.0);
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                for l in 0..d {
                    s += ginv[(j, l)] * lc[i][(j, l)];
                }
            }
            self.drift[i] = -0.5 * s;
        }

        // principal square root of g^{-1}
        let eig = nalgebra::SymmetricEigen::new(ginv);
        self.noise.fill(0.0);
        for (idx, lam) in eig.eigenvalues.iter().enumerate() {
            debug_assert!(*lam > 0.0);
            let col = eig.eigenvectors.column(idx);
            let proj: f64 = (0..d).map(|i| col[i] * dw[i]).sum();
            let c = lam.sqrt() * proj;
            for i in 0..d {
                self.noise[i] += c * col[i];
            }
        }

        for i in 0..d {
            x[i] += self.drift[i] * dt + self.noise[i];
        }
        Ok(())
    }
}

fn heun_velocity_step(
    scene: &Scene,
    vel: &Field,
    x: &mut [f64],
    dt: f64,
    k1: &mut [f64],
    k2: &mut [f64],
    xp: &mut Vec<f64>,
    sc: &mut EvalScratch,
) {
    scene.eval_field_into(vel, x, &[], k1, sc);
    xp.clear();
    xp.extend(x.iter().zip(k1.iter()).map(|(&xi, &ki)| xi + dt * ki));
    scene.eval_field_into(vel, xp, &[], k2, sc);
    for i in 0..x.len() {
        x[i] += 0.5 * dt * (k1[i] + k2[i]);
    }
}

/// Heun predictor/corrector for `dv = -G_j(x) v dx^j` along one base step.
pub fn parallel_transport_step(
    gam0: &[DMatrix<f64>],
    gam1: &[DMatrix<f64>],
    v: &DVector<f64>,
    dx: &[f64],
) -> DVector<f64> {
    let mut slope0 = DVector::zeros(v.len());
    for (j, g) in gam0.iter().enumerate() {
        if dx[j] != 0.0 {
            slope0.axpy(-dx[j], &(g * v), 1.0);
        }
    }
    let pred = v + &slope0;
    let mut slope1 = DVector::zeros(v.len());
    for (j, g) in gam1.iter().enumerate() {
        if dx[j] != 0.0 {
            slope1.axpy(-dx[j], &(g * &pred), 1.0);
        }
    }
    v + 0.5 * (slope0 + slope1)
}

/// Simulate base and fiber over `grid` with a caller-supplied driver. The
/// driver needs `dim` columns for a Brownian base (none for a velocity base)
/// plus the fiber diffusion's column count.
pub fn simulate_bundle_path(
    scene: &Scene,
    base: BaseDynamics,
    fiber: FiberDynamics,
    x0: &[f64],
    v0: &[f64],
    grid: TimeGrid,
    driver: &Increments,
) -> Result<BundlePath> {
    let d = scene.dim();
    let n = scene.rank();
    if x0.len() != d {
        return Err(Error::Shape(format!(
            "start point has {} coordinates, scene has {d}",
            x0.len()
        )));
    }
    if v0.len() != n {
        return Err(Error::Shape(format!(
            "start fiber point has {} components, bundle rank is {n}",
            v0.len()
        )));
    }
    let base_cols = match base {
        BaseDynamics::Brownian => d,
        BaseDynamics::Velocity(_) => 0,
    };
    let fiber_cols = match fiber {
        FiberDynamics::DriftDiffusion {
            diffusion: Some(s), ..
        } => s.cols,
        _ => 0,
    };
    if driver.steps != grid.steps {
        return Err(Error::Shape(format!(
            "driver has {} steps, grid has {}",
            driver.steps, grid.steps
        )));
    }
    if driver.cols < base_cols + fiber_cols {
        return Err(Error::Shape(format!(
            "driver has {} columns, dynamics need {}",
            driver.cols,
            base_cols + fiber_cols
        )));
    }
    if !scene.manifold.contains(x0) {
        return Err(Error::DomainExit {
            step: 0,
            point: x0.to_vec(),
        });
    }

    let steps = grid.steps;
    let dt = grid.dt;
    let mut xs = Vec::with_capacity((steps + 1) * d);
    let mut vs = Vec::with_capacity((steps + 1) * n);
    xs.extend_from_slice(x0);
    vs.extend_from_slice(v0);

    let mut x = x0.to_vec();
    let mut x_prev = x0.to_vec();
    let mut v = DVector::from_column_slice(v0);
    let mut sc = EvalScratch::default();
    let mut metric_stepper = MetricStepper::new(d);
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut xp: Vec<f64> = Vec::with_capacity(d);
    let mut gam0 = vec![DMatrix::zeros(n, n); d];
    let mut gam1 = vec![DMatrix::zeros(n, n); d];
    let mut dx = vec![0.0; d];
    let mut a = vec![0.0; n];
    let mut sig = vec![0.0; n * fiber_cols];
    let mut vslice = vec![0.0; n];
    let identity_fast = scene.manifold.identity_metric;

    for k in 0..steps {
        x_prev.copy_from_slice(&x);
        match base {
            BaseDynamics::Brownian => {
                let dw = &driver.row(k)[..d];
                if identity_fast {
                    // plain addition: reproduces the driver exactly
                    for i in 0..d {
                        x[i] += dw[i];
                    }
                } else {
                    metric_stepper.step(scene, &mut x, dw, dt, k)?;
                }
            }
            BaseDynamics::Velocity(vel) => {
                heun_velocity_step(scene, vel, &mut x, dt, &mut k1, &mut k2, &mut xp, &mut sc);
            }
        }
        if !scene.manifold.contains(&x) {
            return Err(Error::DomainExit {
                step: k + 1,
                point: x.clone(),
            });
        }
        xs.extend_from_slice(&x);

        match fiber {
            FiberDynamics::Frozen => {}
            FiberDynamics::Parallel => {
                for i in 0..d {
                    dx[i] = x[i] - x_prev[i];
                }
                scene.christoffel_into(&x_prev, &mut gam0, &mut sc);
                scene.christoffel_into(&x, &mut gam1, &mut sc);
                v = parallel_transport_step(&gam0, &gam1, &v, &dx);
            }
            FiberDynamics::DriftDiffusion { drift, diffusion } => {
                vslice.copy_from_slice(v.as_slice());
                if let Some(f) = drift {
                    scene.eval_field_into(f, &x_prev, &vslice, &mut a, &mut sc);
                    for i in 0..n {
                        v[i] += a[i] * dt;
                    }
                }
                if let Some(f) = diffusion {
                    scene.eval_field_into(f, &x_prev, &vslice, &mut sig, &mut sc);
                    let db = &driver.row(k)[base_cols..base_cols + fiber_cols];
                    for i in 0..n {
                        let mut s = 0.0;
                        for c in 0..fiber_cols {
                            s += sig[i * fiber_cols + c] * db[c];
                        }
                        v[i] += s;
                    }
                }
            }
        }
        vs.extend(v.iter());
    }

    Ok(BundlePath {
        dim: d,
        rank: n,
        grid,
        xs,
        vs,
    })
}

/// Run a base Brownian path until `outside` first holds, without storing the
/// path. Returns the first grid time in the outside region, or `None` if the
/// horizon is reached first.
pub fn first_exit_time(
    scene: &Scene,
    x0: &[f64],
    grid: TimeGrid,
    driver: &Increments,
    mut outside: impl FnMut(&[f64]) -> bool,
) -> Result<Option<f64>> {
    let d = scene.dim();
    let mut x = x0.to_vec();
    let mut stepper = MetricStepper::new(d);
    let identity_fast = scene.manifold.identity_metric;
    if outside(&x) {
        return Ok(Some(grid.time(0)));
    }
    for k in 0..grid.steps {
        let dw = &driver.row(k)[..d];
        if identity_fast {
            for i in 0..d {
                x[i] += dw[i];
            }
        } else {
            stepper.step(scene, &mut x, dw, grid.dt, k)?;
        }
        if outside(&x) {
            return Ok(Some(grid.time(k + 1)));
        }
    }
    Ok(None)
}
