//! Does integration along a family of paths commute with differentiating in
//! the family parameter? The gap between the two orders is measured directly
//! and compared against the curvature integral that is supposed to account
//! for it.
//!
//! For a family `J(a)` the variation field `W = dav + G(x)(dax) v` (the
//! connector applied to the a-derivative, taken by central differences)
//! is itself a fiber path over the center member; the check computes
//!
//! `defect = [int theta D W]  -  d/da [int theta D J(a)]`
//!
//! both with the connector-route integral, and the reference
//!
//! `curvature_term = int theta(xm) R(xm)(dx, dax) vm`
//!
//! per step against realized base increments. The slot order `R(dx, dax)`
//! is the orientation that makes the curved-scene oracle balance; with the
//! opposite order the two sides agree only up to sign.

use crate::error::{Error, Result};
use crate::geometry::{bundle_curvature, EvalScratch, Field, FieldKind, Scene};
use crate::paths::{simulate_bundle_path, BaseDynamics, BundlePath, FiberDynamics, Increments, TimeGrid};

/// Paths sharing one grid, indexed by an ascending parameter.
#[derive(Debug, Clone)]
pub struct FamilyOfPaths {
    pub params: Vec<f64>,
    pub paths: Vec<BundlePath>,
}

impl FamilyOfPaths {
    pub fn new(params: Vec<f64>, paths: Vec<BundlePath>) -> Result<FamilyOfPaths> {
        if params.len() < 3 {
            return Err(Error::config(
                "a path family needs at least 3 members for central differences",
            ));
        }
        if params.len() != paths.len() {
            return Err(Error::config("family parameter/path count mismatch"));
        }
        if !params.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("family parameters must be strictly increasing"));
        }
        let steps = paths[0].steps();
        if !paths.iter().all(|p| p.steps() == steps) {
            return Err(Error::config("family members must share one grid"));
        }
        Ok(FamilyOfPaths { params, paths })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

/// Deterministic family: start points shifted along one coordinate, base
/// driven by a velocity field, fibers parallel-transported from a shared
/// initial value. Parallel fibers keep the fiber comparison free of any
/// field-gradient contribution.
pub fn shifted_parallel_family(
    s: &Scene,
    x0: &[f64],
    v0: &[f64],
    shift_coord: usize,
    params: &[f64],
    vel: &Field,
    grid: TimeGrid,
) -> Result<FamilyOfPaths> {
    if shift_coord >= s.dim() {
        return Err(Error::config("shift coordinate out of range"));
    }
    let driver = Increments::zeros(grid.steps, 0);
    let mut paths = Vec::with_capacity(params.len());
    for &a in params {
        let mut start = x0.to_vec();
        start[shift_coord] += a;
        paths.push(simulate_bundle_path(
            s,
            BaseDynamics::Velocity(vel),
            FiberDynamics::Parallel,
            &start,
            v0,
            grid,
            &driver,
        )?);
    }
    FamilyOfPaths::new(params.to_vec(), paths)
}

/// Both sides of the commutation identity at one interior family member.
#[derive(Debug, Clone, Copy)]
pub struct CommutationCheck {
    pub defect: f64,
    pub curvature_term: f64,
}

impl CommutationCheck {
    pub fn gap(&self) -> f64 {
        (self.defect - self.curvature_term).abs()
    }
}

pub fn commutation_defect(
    s: &Scene,
    theta: &str,
    fam: &FamilyOfPaths,
    idx: usize,
) -> Result<CommutationCheck> {
    let th = s.field_of_kind(theta, FieldKind::Covector)?;
    if idx == 0 || idx + 1 >= fam.len() {
        return Err(Error::config(
            "commutation check needs an interior family member",
        ));
    }
    let lo = &fam.paths[idx - 1];
    let hi = &fam.paths[idx + 1];
    let center = &fam.paths[idx];
    let da = fam.params[idx + 1] - fam.params[idx - 1];
    let d = s.dim();
    let n = s.rank();
    let steps = center.steps();

    // variation field along the center member
    let mut dax = vec![0.0; d];
    let mut dav = vec![0.0; n];
    let mut ws = Vec::with_capacity((steps + 1) * n);
    for k in 0..=steps {
        for i in 0..d {
            dax[i] = (hi.x(k)[i] - lo.x(k)[i]) / da;
        }
        for i in 0..n {
            dav[i] = (hi.v(k)[i] - lo.v(k)[i]) / da;
        }
        let w = super::apply_connector(s, center.x(k), center.v(k), &dax, &dav)?;
        ws.extend(w.iter());
    }
    let wpath = BundlePath::from_parts(
        d,
        n,
        center.grid,
        center_xs(center),
        ws,
    );
    let int_of_derivative = *super::covariant_stratonovich_connector_field(s, th, &wpath)?
        .last()
        .unwrap();

    let s_hi = *super::covariant_stratonovich_connector_field(s, th, hi)?
        .last()
        .unwrap();
    let s_lo = *super::covariant_stratonovich_connector_field(s, th, lo)?
        .last()
        .unwrap();
    let derivative_of_int = (s_hi - s_lo) / da;

    let defect = int_of_derivative - derivative_of_int;

    // curvature reference along the center member
    let mut sc = EvalScratch::default();
    let mut xm = vec![0.0; d];
    let mut vm = vec![0.0; n];
    let mut dx = vec![0.0; d];
    let mut thv = vec![0.0; n];
    let mut daxm = vec![0.0; d];
    let mut curvature_term = 0.0;
    let h = s.fd_step;
    for k in 0..steps {
        center.x_mid_into(k, &mut xm);
        center.v_mid_into(k, &mut vm);
        center.dx_into(k, &mut dx);
        for i in 0..d {
            let m_hi = 0.5 * (hi.x(k)[i] + hi.x(k + 1)[i]);
            let m_lo = 0.5 * (lo.x(k)[i] + lo.x(k + 1)[i]);
            daxm[i] = (m_hi - m_lo) / da;
        }
        let r = bundle_curvature(s, &xm, h)?;
        let rv = r.apply(&dx, &daxm, &nalgebra::DVector::from_column_slice(&vm));
        s.eval_field_into(th, &xm, &[], &mut thv, &mut sc);
        for b in 0..n {
            curvature_term += thv[b] * rv[b];
        }
    }

    Ok(CommutationCheck {
        defect,
        curvature_term,
    })
}

fn center_xs(p: &BundlePath) -> Vec<f64> {
    let mut xs = Vec::with_capacity((p.steps() + 1) * p.dim);
    for k in 0..=p.steps() {
        xs.extend_from_slice(p.x(k));
    }
    xs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::scenes;

    fn theta_field() -> Field {
        Field::from_exprs(
            FieldKind::Covector,
            2,
            1,
            &["1 + x2^2".to_string(), "sin(x1) + 2".to_string()],
            2,
            2,
            &Default::default(),
        )
        .unwrap()
    }

    fn diagonal_velocity() -> Field {
        Field::from_fn(FieldKind::Velocity, 2, 1, |_, _, out| {
            out[0] = 0.3;
            out[1] = 1.0;
        })
    }

    #[test]
    fn family_needs_three_members() {
        let s = scenes::twisted_flat(1.0);
        let vel = diagonal_velocity();
        let grid = TimeGrid::from_horizon(0.1, 1e-2);
        let err = shifted_parallel_family(
            &s,
            &[0.0, 0.0],
            &[1.0, 0.0],
            0,
            &[-0.01, 0.01],
            &vel,
            grid,
        )
        .unwrap_err();
        assert!(err.is_config(), "{err}");
    }

    #[test]
    fn check_needs_an_interior_member() {
        let mut s = scenes::twisted_flat(1.0);
        s.insert_field("theta", theta_field());
        let vel = diagonal_velocity();
        let grid = TimeGrid::from_horizon(0.1, 1e-2);
        let fam = shifted_parallel_family(
            &s,
            &[0.0, 0.0],
            &[1.0, 0.0],
            0,
            &[-0.01, 0.0, 0.01],
            &vel,
            grid,
        )
        .unwrap();
        assert!(commutation_defect(&s, "theta", &fam, 0).is_err());
        assert!(commutation_defect(&s, "theta", &fam, 2).is_err());
        assert!(commutation_defect(&s, "theta", &fam, 1).is_ok());
    }

    #[test]
    fn flat_parallel_family_commutes_exactly() {
        let mut s = scenes::flat(2, 2, None);
        s.insert_field("theta", theta_field());
        let vel = diagonal_velocity();
        let grid = TimeGrid::from_horizon(1.0, 1e-3);
        let fam = shifted_parallel_family(
            &s,
            &[0.1, -0.2],
            &[1.0, 0.5],
            0,
            &[-0.01, 0.0, 0.01],
            &vel,
            grid,
        )
        .unwrap();
        let check = commutation_defect(&s, "theta", &fam, 1).unwrap();
        // parallel fibers in a flat bundle: every ingredient is exactly zero
        assert_eq!(check.defect, 0.0);
        assert_eq!(check.curvature_term, 0.0);
    }

    #[test]
    fn flat_family_with_moving_fibers_commutes_for_constant_theta() {
        // with fibers that depend on the parameter, a varying theta picks up
        // a gradient cross-term; a constant theta keeps both orders equal
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
        let vel = diagonal_velocity();
        let grid = TimeGrid::from_horizon(1.0, 1e-3);
        let driver = Increments::zeros(grid.steps, 0);
        let drift = Field::from_fn(FieldKind::FiberDrift, 2, 1, |_, v, out| {
            out[0] = 0.4 * v[1];
            out[1] = -0.3 * v[0];
        });
        let params = vec![-0.01, 0.0, 0.01];
        let mut paths = Vec::new();
        for &a in &params {
            paths.push(
                simulate_bundle_path(
                    &s,
                    BaseDynamics::Velocity(&vel),
                    FiberDynamics::DriftDiffusion {
                        drift: Some(&drift),
                        diffusion: None,
                    },
                    &[0.1 + a, -0.2],
                    &[1.0 + 2.0 * a, 0.5 - a],
                    grid,
                    &driver,
                )
                .unwrap(),
            );
        }
        let fam = FamilyOfPaths::new(params, paths).unwrap();
        let check = commutation_defect(&s, "theta", &fam, 1).unwrap();
        assert_eq!(check.curvature_term, 0.0);
        assert!(check.defect.abs() < 1e-10, "defect {}", check.defect);
    }

    #[test]
    fn twisted_defect_is_the_curvature_integral() {
        let mut s = scenes::twisted_flat(1.0);
        s.insert_field("theta", theta_field());
        let vel = diagonal_velocity();
        let grid = TimeGrid::from_horizon(1.0, 1e-3);
        let fam = shifted_parallel_family(
            &s,
            &[0.0, 0.0],
            &[1.0, 0.5],
            0,
            &[-0.01, 0.0, 0.01],
            &vel,
            grid,
        )
        .unwrap();
        let check = commutation_defect(&s, "theta", &fam, 1).unwrap();
        assert!(
            check.curvature_term.abs() > 0.05,
            "reference too small to be meaningful: {}",
            check.curvature_term
        );
        assert!(
            check.gap() <= 0.1 * check.curvature_term.abs(),
            "defect {} vs curvature {}",
            check.defect,
            check.curvature_term
        );
    }

    #[test]
    fn shifting_along_the_other_coordinate_also_balances() {
        let mut s = scenes::twisted_flat(0.7);
        s.insert_field("theta", theta_field());
        let vel = Field::from_fn(FieldKind::Velocity, 2, 1, |_, _, out| {
            out[0] = 1.0;
            out[1] = 0.4;
        });
        let grid = TimeGrid::from_horizon(1.0, 1e-3);
        let fam = shifted_parallel_family(
            &s,
            &[0.2, 0.3],
            &[0.5, 1.0],
            1,
            &[-0.01, 0.0, 0.01],
            &vel,
            grid,
        )
        .unwrap();
        let check = commutation_defect(&s, "theta", &fam, 1).unwrap();
        assert!(
            check.gap() <= 0.1 * check.curvature_term.abs().max(1e-3),
            "defect {} vs curvature {}",
            check.defect,
            check.curvature_term
        );
    }
}
