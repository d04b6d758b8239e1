//! Bundle-valued differential forms and the operators `d`, `delta`,
//! `dd* + d*d` built from covariant central differences.
//!
//! Degree 0 means a plain section (components `a -> sigma^a`); degree 1
//! stores `(j, a) -> sigma_j^a` row-major, which is also the fiber layout of
//! the derived one-form scene from [`one_form_scene`]. Every derivative gets
//! the covariant correction: Levi-Civita terms on base indices, the bundle
//! connection on fiber indices. Compositions use a nested stencil — outer
//! step `h = scene.fd_step`, inner step `2h` — so the two differencing
//! levels do not resonate.

pub mod gauge;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{levi_civita_christoffels, EvalScratch, Field, Scene, VectorBundle};

/// A section of `E^p` for `p` in `{0, 1}`: the bundle itself, or
/// bundle-valued one-forms. Components come from a [`Field`] evaluated on
/// the base scene; degree fixes the expected shape.
#[derive(Debug, Clone)]
pub struct PFormSection {
    pub degree: usize,
    field: Field,
}

impl PFormSection {
    pub fn new(s: &Scene, degree: usize, field: Field) -> Result<PFormSection> {
        let (d, n) = (s.dim(), s.rank());
        let shape_ok = match degree {
            0 => field.rows == n && field.cols == 1,
            1 => field.rows == d && field.cols == n,
            _ => {
                return Err(Error::config(format!(
                    "form degree {degree} is not supported (use 0 or 1)"
                )))
            }
        };
        if !shape_ok {
            return Err(Error::Shape(format!(
                "degree-{degree} section needs {} components, field is {}x{}",
                if degree == 0 {
                    format!("{n}x1")
                } else {
                    format!("{d}x{n}")
                },
                field.rows,
                field.cols
            )));
        }
        Ok(PFormSection { degree, field })
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    /// Flattened component count: `n` for degree 0, `d * n` for degree 1.
    pub fn fiber_len(&self) -> usize {
        self.field.len()
    }
}

/// The scene whose bundle is `T*M (x) V`: rank `d * n`, fiber index
/// `(j, a) -> j n + a`. Connection coefficients combine both halves,
///
/// `Ghat_i[(j a), (m b)] = -LC^m_{ij} delta_ab + delta_jm G_i[(a, b)]`,
///
/// so a degree-1 section's raw component array parallel-transports with the
/// same machinery as any other fiber vector. Fields are not carried over.
pub fn one_form_scene(s: &Scene) -> Scene {
    let d = s.dim();
    let n = s.rank();
    let nn = d * n;
    let bundle = if s.bundle.flat && s.manifold.identity_metric {
        VectorBundle::flat(nn)
    } else {
        let man = s.manifold.clone();
        let vb = s.bundle.clone();
        let h = s.fd_step;
        VectorBundle::from_fn(nn, move |x, out| {
            // Coefficients are only requested at path/probe points that are
            // already inside the chart, so the metric differencing cannot
            // leave the domain except by a vanishing margin.
            let lc = if man.identity_metric {
                None
            } else {
                Some(
                    levi_civita_christoffels(&man, x, h)
                        .expect("one-form connection probed outside the chart"),
                )
            };
            let mut gam = vec![DMatrix::zeros(n, n); d];
            if !vb.flat {
                vb.christoffel_into(x, &mut gam);
            }
            for i in 0..d {
                let o = &mut out[i];
                o.fill(0.0);
                for j in 0..d {
                    for a in 0..n {
                        let row = j * n + a;
                        if let Some(lc) = &lc {
                            for m in 0..d {
                                o[(row, m * n + a)] -= lc[m][(i, j)];
                            }
                        }
                        for b in 0..n {
                            o[(row, j * n + b)] += gam[i][(a, b)];
                        }
                    }
                }
            }
        })
    };
    Scene {
        name: format!("{}#forms1", s.name),
        manifold: s.manifold.clone(),
        bundle,
        fields: std::collections::BTreeMap::new(),
        params: s.params.clone(),
        fd_step: s.fd_step,
    }
}

// ───────────────────────── pointwise scratch ─────────────────────────

struct FormScratch {
    sc: EvalScratch,
    probe: Vec<f64>,
    lo: Vec<f64>,
}

impl FormScratch {
    fn new(d: usize) -> FormScratch {
        FormScratch {
            sc: EvalScratch::default(),
            probe: vec![0.0; d],
            lo: Vec::new(),
        }
    }

    fn eval(&mut self, s: &Scene, f: &Field, x: &[f64], out: &mut [f64]) {
        s.eval_field_into(f, x, &[], out, &mut self.sc);
    }

    /// Central difference of `f`'s components along coordinate `i`.
    fn diff(&mut self, s: &Scene, f: &Field, x: &[f64], i: usize, h: f64, out: &mut [f64]) {
        self.probe.clear();
        self.probe.extend_from_slice(x);
        self.probe[i] = x[i] + h;
        s.eval_field_into(f, &self.probe, &[], out, &mut self.sc);
        self.probe[i] = x[i] - h;
        self.lo.resize(out.len(), 0.0);
        s.eval_field_into(f, &self.probe, &[], &mut self.lo, &mut self.sc);
        for (o, l) in out.iter_mut().zip(self.lo.iter()) {
            *o = (*o - *l) / (2.0 * h);
        }
    }
}

fn check_point(s: &Scene, x: &[f64]) -> Result<()> {
    if x.len() != s.dim() {
        return Err(Error::Shape(format!(
            "point has {} coordinates, scene has {}",
            x.len(),
            s.dim()
        )));
    }
    if !s.manifold.contains(x) {
        return Err(Error::DomainExit {
            step: 0,
            point: x.to_vec(),
        });
    }
    Ok(())
}

fn inverse_metric(s: &Scene, x: &[f64]) -> Result<Option<DMatrix<f64>>> {
    if s.manifold.identity_metric {
        return Ok(None);
    }
    let g = s.manifold.metric(x);
    match g.try_inverse() {
        Some(gi) => Ok(Some(gi)),
        None => Err(Error::MetricNotPositive { point: x.to_vec() }),
    }
}

// ───────────────────────── the three operators ─────────────────────────

/// `(d sigma)[(j, a)] = d_j sigma^a + G_j[(a, b)] sigma^b` for a degree-0
/// section, by central differences with step `h`.
fn d0_with_step(s: &Scene, f: &Field, x: &[f64], h: f64, fs: &mut FormScratch) -> DMatrix<f64> {
    let d = s.dim();
    let n = s.rank();
    let mut out = DMatrix::zeros(d, n);
    let mut buf = vec![0.0; n];
    for j in 0..d {
        fs.diff(s, f, x, j, h, &mut buf);
        for a in 0..n {
            out[(j, a)] = buf[a];
        }
    }
    if !s.bundle.flat {
        let mut gam = vec![DMatrix::zeros(n, n); d];
        s.christoffel_into(x, &mut gam, &mut fs.sc);
        fs.eval(s, f, x, &mut buf);
        for j in 0..d {
            for a in 0..n {
                for b in 0..n {
                    out[(j, a)] += gam[j][(a, b)] * buf[b];
                }
            }
        }
    }
    out
}

/// Full covariant derivative of a degree-1 section:
/// `grad[i][(j, a)] = d_i sigma_j^a - LC^m_{ij} sigma_m^a + G_i[(a, b)] sigma_j^b`.
fn grad1_with_step(
    s: &Scene,
    f: &Field,
    x: &[f64],
    h: f64,
    fs: &mut FormScratch,
) -> Result<Vec<DMatrix<f64>>> {
    let d = s.dim();
    let n = s.rank();
    let mut grad = Vec::with_capacity(d);
    let mut buf = vec![0.0; d * n];
    for i in 0..d {
        fs.diff(s, f, x, i, h, &mut buf);
        grad.push(DMatrix::from_row_slice(d, n, &buf));
    }
    fs.eval(s, f, x, &mut buf);
    let lc = if s.manifold.identity_metric {
        None
    } else {
        Some(levi_civita_christoffels(&s.manifold, x, h)?)
    };
    let mut gam = vec![DMatrix::zeros(n, n); d];
    if !s.bundle.flat {
        s.christoffel_into(x, &mut gam, &mut fs.sc);
    }
    for (i, gi) in grad.iter_mut().enumerate() {
        for j in 0..d {
            for a in 0..n {
                if let Some(lc) = &lc {
                    for m in 0..d {
                        gi[(j, a)] -= lc[m][(i, j)] * buf[m * n + a];
                    }
                }
                if !s.bundle.flat {
                    for b in 0..n {
                        gi[(j, a)] += gam[i][(a, b)] * buf[j * n + b];
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// `delta sigma^a = -g^{jl} (grad_j sigma)_l^a` for degree 1.
fn delta1_with_step(
    s: &Scene,
    f: &Field,
    x: &[f64],
    h: f64,
    fs: &mut FormScratch,
) -> Result<DVector<f64>> {
    let d = s.dim();
    let n = s.rank();
    let grad = grad1_with_step(s, f, x, h, fs)?;
    let ginv = inverse_metric(s, x)?;
    let mut out = DVector::zeros(n);
    for j in 0..d {
        for l in 0..d {
            let w = match &ginv {
                Some(gi) => gi[(j, l)],
                None => {
                    if j == l {
                        1.0
                    } else {
                        continue;
                    }
                }
            };
            for a in 0..n {
                out[a] -= w * grad[j][(l, a)];
            }
        }
    }
    Ok(out)
}

/// Antisymmetrized covariant derivative: `tau[i][(j, a)] = (grad_i sigma)_j^a
/// - (grad_j sigma)_i^a`. The degree-2 object the Laplacian needs internally.
fn two_form_with_step(
    s: &Scene,
    f: &Field,
    x: &[f64],
    h: f64,
    fs: &mut FormScratch,
) -> Result<Vec<DMatrix<f64>>> {
    let d = s.dim();
    let n = s.rank();
    let grad = grad1_with_step(s, f, x, h, fs)?;
    let mut tau = vec![DMatrix::zeros(d, n); d];
    for i in 0..d {
        for j in 0..d {
            for a in 0..n {
                tau[i][(j, a)] = grad[i][(j, a)] - grad[j][(i, a)];
            }
        }
    }
    Ok(tau)
}

/// Covariant exterior differential of a degree-0 section at `x`: a `d x n`
/// matrix of one-form components. Degree-1 input is rejected; the degree-2
/// image only exists inside [`hodge_laplacian`].
pub fn exterior_d(s: &Scene, sigma: &PFormSection, x: &[f64]) -> Result<DMatrix<f64>> {
    if sigma.degree != 0 {
        return Err(Error::config(format!(
            "exterior_d expects a degree-0 section, got degree {}",
            sigma.degree
        )));
    }
    check_point(s, x)?;
    let mut fs = FormScratch::new(s.dim());
    Ok(d0_with_step(s, &sigma.field, x, s.fd_step, &mut fs))
}

/// Codifferential of a degree-1 section at `x`: the `n`-vector
/// `-g^{jl} [ d_j sigma_l^a - LC^m_{jl} sigma_m^a + G_j[(a, b)] sigma_l^b ]`.
pub fn codifferential(s: &Scene, sigma: &PFormSection, x: &[f64]) -> Result<DVector<f64>> {
    if sigma.degree != 1 {
        return Err(Error::config(format!(
            "codifferential expects a degree-1 section, got degree {}",
            sigma.degree
        )));
    }
    check_point(s, x)?;
    let mut fs = FormScratch::new(s.dim());
    delta1_with_step(s, &sigma.field, x, s.fd_step, &mut fs)
}

/// `(d delta + delta d) sigma` at `x`, flattened to `fiber_len` components.
/// Outer differences use `fd_step`, the inner operator is evaluated with
/// step `2 fd_step`.
pub fn hodge_laplacian(s: &Scene, sigma: &PFormSection, x: &[f64]) -> Result<Vec<f64>> {
    check_point(s, x)?;
    let d = s.dim();
    let n = s.rank();
    let h = s.fd_step;
    let hi = 2.0 * h;
    let mut fs = FormScratch::new(d);
    let ginv = inverse_metric(s, x)?;
    let gw = |j: usize, l: usize| match &ginv {
        Some(gi) => gi[(j, l)],
        None => {
            if j == l {
                1.0
            } else {
                0.0
            }
        }
    };
    let lc = if s.manifold.identity_metric {
        None
    } else {
        Some(levi_civita_christoffels(&s.manifold, x, h)?)
    };
    let mut gam = vec![DMatrix::zeros(n, n); d];
    if !s.bundle.flat {
        s.christoffel_into(x, &mut gam, &mut fs.sc);
    }
    let mut probe = vec![0.0; d];

    match sigma.degree {
        0 => {
            // delta(d sigma): the codifferential pattern applied to the
            // one-form tau(y) = d0(y) computed at the inner step.
            let tau_at = |y: &[f64], fs: &mut FormScratch| d0_with_step(s, &sigma.field, y, hi, fs);
            let tau0 = tau_at(x, &mut fs);
            let mut out = vec![0.0; n];
            for j in 0..d {
                probe.copy_from_slice(x);
                probe[j] = x[j] + h;
                let tau_hi = tau_at(&probe, &mut fs);
                probe[j] = x[j] - h;
                let tau_lo = tau_at(&probe, &mut fs);
                for l in 0..d {
                    let w = gw(j, l);
                    if w == 0.0 {
                        continue;
                    }
                    for a in 0..n {
                        let mut term = (tau_hi[(l, a)] - tau_lo[(l, a)]) / (2.0 * h);
                        if let Some(lc) = &lc {
                            for m in 0..d {
                                term -= lc[m][(j, l)] * tau0[(m, a)];
                            }
                        }
                        if !s.bundle.flat {
                            for b in 0..n {
                                term += gam[j][(a, b)] * tau0[(l, b)];
                            }
                        }
                        out[a] -= w * term;
                    }
                }
            }
            Ok(out)
        }
        1 => {
            let mut out = vec![0.0; d * n];

            // d(delta sigma): degree-0 pattern on rho(y) = delta(y) at the
            // inner step.
            let rho0 = delta1_with_step(s, &sigma.field, x, hi, &mut fs)?;
            for j in 0..d {
                probe.copy_from_slice(x);
                probe[j] = x[j] + h;
                let rho_hi = delta1_with_step(s, &sigma.field, &probe, hi, &mut fs)?;
                probe[j] = x[j] - h;
                let rho_lo = delta1_with_step(s, &sigma.field, &probe, hi, &mut fs)?;
                for a in 0..n {
                    let mut term = (rho_hi[a] - rho_lo[a]) / (2.0 * h);
                    if !s.bundle.flat {
                        for b in 0..n {
                            term += gam[j][(a, b)] * rho0[b];
                        }
                    }
                    out[j * n + a] += term;
                }
            }

            // delta(d sigma): contract the covariant derivative of the
            // degree-2 image tau across its first two slots.
            let tau0 = two_form_with_step(s, &sigma.field, x, hi, &mut fs)?;
            for i in 0..d {
                probe.copy_from_slice(x);
                probe[i] = x[i] + h;
                let tau_hi = two_form_with_step(s, &sigma.field, &probe, hi, &mut fs)?;
                probe[i] = x[i] - h;
                let tau_lo = two_form_with_step(s, &sigma.field, &probe, hi, &mut fs)?;
                for l in 0..d {
                    let w = gw(i, l);
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        for a in 0..n {
                            let mut term = (tau_hi[l][(j, a)] - tau_lo[l][(j, a)]) / (2.0 * h);
                            if let Some(lc) = &lc {
                                for m in 0..d {
                                    term -= lc[m][(i, l)] * tau0[m][(j, a)];
                                    term -= lc[m][(i, j)] * tau0[l][(m, a)];
                                }
                            }
                            if !s.bundle.flat {
                                for b in 0..n {
                                    term += gam[i][(a, b)] * tau0[l][(j, b)];
                                }
                            }
                            out[j * n + a] -= w * term;
                        }
                    }
                }
            }
            Ok(out)
        }
        _ => unreachable!("constructor bounds the degree"),
    }
}
