//! Built-in scenes and the on-disk scene description.
//!
//! Three bases cover the test surface: a Euclidean chart with a flat bundle
//! (optionally periodic), the plane with a rank-2 bundle whose connection
//! twists with the second coordinate, and the unit round sphere in a
//! stereographic chart carrying its tangent bundle.

use super::{ChartManifold, Scene, VectorBundle, FD_STEP};
use crate::error::{Error, Result};
use crate::fieldexpr::Params;
use crate::geometry::fields::{Field, FieldKind};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Euclidean chart in `d` coordinates, rank-`n` flat bundle.
pub fn flat(d: usize, n: usize, periods: Option<Vec<Option<f64>>>) -> Scene {
    Scene {
        name: "flat".to_string(),
        manifold: ChartManifold::euclidean(d, periods),
        bundle: VectorBundle::flat(n),
        fields: BTreeMap::new(),
        params: Params::new(),
        fd_step: FD_STEP,
    }
}

/// Flat scene with every coordinate reduced modulo `2*pi`.
pub fn flat_torus(d: usize, n: usize) -> Scene {
    let tau = std::f64::consts::TAU;
    let mut s = flat(d, n, Some(vec![Some(tau); d]));
    s.name = "torus".to_string();
    s
}

/// Plane with identity metric and a rank-2 bundle whose only nonzero
/// coefficient matrix is `G_1 = lambda * x2 * J`, `J = [[0, 1], [-1, 0]]`.
/// Transport around loops rotates the fiber, so this is the smallest scene
/// with curvature but trivial base geometry.
pub fn twisted_flat(lambda: f64) -> Scene {
    let bundle = VectorBundle::from_fn(2, move |x, out| {
        let c = lambda * x[1];
        out[0][(0, 0)] = 0.0;
        out[0][(0, 1)] = c;
        out[0][(1, 0)] = -c;
        out[0][(1, 1)] = 0.0;
        out[1].fill(0.0);
    });
    let mut params = Params::new();
    params.insert("lambda".to_string(), lambda);
    Scene {
        name: "twisted_flat".to_string(),
        manifold: ChartManifold::euclidean(2, None),
        bundle,
        fields: BTreeMap::new(),
        params,
        fd_step: FD_STEP,
    }
}

/// `d phi` for the round metric `g = exp(2 phi) I`, `phi = log(2/(1+|x|^2))`.
fn round_dphi(x: &[f64]) -> [f64; 2] {
    let r2 = x[0] * x[0] + x[1] * x[1];
    let c = -2.0 / (1.0 + r2);
    [c * x[0], c * x[1]]
}

/// Unit round sphere in stereographic coordinates, tangent bundle with the
/// Levi-Civita connection in closed form. The chart is clipped to a large
/// ball so runaway paths fail loudly instead of losing precision near the
/// missing pole.
pub fn sphere_stereo() -> Scene {
    let bundle = VectorBundle::from_fn(2, |x, out| {
        let dphi = round_dphi(x);
        // conformal metric: lc^b_{ia} = d_a phi delta_bi + d_i phi delta_ba
        //                               - d_b phi delta_ia
        for (i, mat) in out.iter_mut().enumerate() {
            for b in 0..2 {
                for a in 0..2 {
                    let mut v = 0.0;
                    if b == i {
                        v += dphi[a];
                    }
                    if b == a {
                        v += dphi[i];
                    }
                    if i == a {
                        v -= dphi[b];
                    }
                    mat[(b, a)] = v;
                }
            }
        }
    });
    Scene {
        name: "sphere_stereo".to_string(),
        manifold: ChartManifold::round_stereo(100.0),
        bundle,
        fields: BTreeMap::new(),
        params: Params::new(),
        fd_step: FD_STEP,
    }
}

impl Scene {
    /// Same base, flat bundle of the given rank, fields dropped.
    pub fn with_flat_bundle(&self, rank: usize) -> Scene {
        Scene {
            name: self.name.clone(),
            manifold: self.manifold.clone(),
            bundle: VectorBundle::flat(rank),
            fields: BTreeMap::new(),
            params: self.params.clone(),
            fd_step: self.fd_step,
        }
    }
}

/// Base names accepted by [`SceneConfig`], with the options each one reads.
pub const BASES: &[(&str, &str)] = &[
    (
        "flat",
        "Euclidean chart, flat bundle; options: dim, rank, period or periods",
    ),
    (
        "torus",
        "flat with every coordinate reduced mod 2*pi; options: dim, rank",
    ),
    (
        "twisted_flat",
        "plane with a rank-2 bundle twisted by the second coordinate; option: lambda",
    ),
    (
        "sphere_stereo",
        "unit round sphere, stereographic chart, tangent bundle",
    ),
];

/// One field in a scene description: a kind tag plus component expressions
/// in row-major order over the coordinates `x1..` and fiber slots `v1..`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub kind: String,
    pub components: Vec<String>,
}

/// Declarative scene description; decodes from TOML or JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub base: String,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default)]
    pub lambda: Option<f64>,
    /// One period for every coordinate.
    #[serde(default)]
    pub period: Option<f64>,
    /// Per-coordinate periods; `0.0` leaves that coordinate aperiodic.
    #[serde(default)]
    pub periods: Option<Vec<f64>>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub fields: BTreeMap<String, FieldConfig>,
}

impl SceneConfig {
    pub fn builtin(base: &str) -> SceneConfig {
        SceneConfig {
            base: base.to_string(),
            dim: None,
            rank: None,
            lambda: None,
            period: None,
            periods: None,
            params: BTreeMap::new(),
            fields: BTreeMap::new(),
        }
    }

    fn reject_option(&self, base: &str, set: bool, what: &str) -> Result<()> {
        if set {
            return Err(Error::config(format!(
                "scene base '{base}' does not take '{what}'"
            )));
        }
        Ok(())
    }

    fn periods_vec(&self, d: usize) -> Result<Option<Vec<Option<f64>>>> {
        match (&self.period, &self.periods) {
            (Some(_), Some(_)) => Err(Error::config(
                "give either 'period' or 'periods', not both",
            )),
            (Some(p), None) => {
                if !(*p > 0.0) {
                    return Err(Error::config(format!("period must be positive, got {p}")));
                }
                Ok(Some(vec![Some(*p); d]))
            }
            (None, Some(ps)) => {
                if ps.len() != d {
                    return Err(Error::config(format!(
                        "periods has {} entries for a {d}-dimensional base",
                        ps.len()
                    )));
                }
                if ps.iter().any(|p| *p < 0.0 || !p.is_finite()) {
                    return Err(Error::config("periods must be finite and >= 0"));
                }
                Ok(Some(
                    ps.iter()
                        .map(|&p| if p == 0.0 { None } else { Some(p) })
                        .collect(),
                ))
            }
            (None, None) => Ok(None),
        }
    }

    pub fn build(&self) -> Result<Scene> {
        let mut scene = match self.base.as_str() {
            "flat" => {
                self.reject_option("flat", self.lambda.is_some(), "lambda")?;
                let d = self.dim.unwrap_or(2);
                let n = self.rank.unwrap_or(1);
                if d == 0 || n == 0 {
                    return Err(Error::config("dim and rank must be at least 1"));
                }
                flat(d, n, self.periods_vec(d)?)
            }
            "torus" => {
                self.reject_option("torus", self.lambda.is_some(), "lambda")?;
                self.reject_option("torus", self.period.is_some(), "period")?;
                self.reject_option("torus", self.periods.is_some(), "periods")?;
                let d = self.dim.unwrap_or(2);
                let n = self.rank.unwrap_or(1);
                if d == 0 || n == 0 {
                    return Err(Error::config("dim and rank must be at least 1"));
                }
                flat_torus(d, n)
            }
            "twisted_flat" => {
                self.reject_dim_rank("twisted_flat", 2, 2)?;
                self.reject_option("twisted_flat", self.period.is_some(), "period")?;
                self.reject_option("twisted_flat", self.periods.is_some(), "periods")?;
                twisted_flat(self.lambda.unwrap_or(1.0))
            }
            "sphere_stereo" => {
                self.reject_dim_rank("sphere_stereo", 2, 2)?;
                self.reject_option("sphere_stereo", self.lambda.is_some(), "lambda")?;
                self.reject_option("sphere_stereo", self.period.is_some(), "period")?;
                self.reject_option("sphere_stereo", self.periods.is_some(), "periods")?;
                sphere_stereo()
            }
            other => {
                return Err(Error::config(format!(
                    "unknown scene base '{other}' (known: {})",
                    BASES
                        .iter()
                        .map(|(n, _)| *n)
                        .collect::<Vec<_>>()
                        .join(", ")
                )));
            }
        };

        scene.params.extend(self.params.clone());
        let d = scene.dim();
        let n = scene.rank();
        for (name, fc) in &self.fields {
            let kind = FieldKind::from_name(&fc.kind).ok_or_else(|| {
                Error::config(format!("field '{name}': unknown kind '{}'", fc.kind))
            })?;
            let (rows, cols) = field_shape(kind, d, n, fc.components.len()).map_err(|e| {
                Error::config(format!("field '{name}': {e}"))
            })?;
            let field =
                Field::from_exprs(kind, rows, cols, &fc.components, d, n, &scene.params)
                    .map_err(|e| Error::config(format!("field '{name}': {e}")))?;
            scene.insert_field(name.clone(), field);
        }
        Ok(scene)
    }

    fn reject_dim_rank(&self, base: &str, d: usize, n: usize) -> Result<()> {
        if let Some(dd) = self.dim {
            if dd != d {
                return Err(Error::config(format!(
                    "scene base '{base}' is fixed at dim {d}"
                )));
            }
        }
        if let Some(nn) = self.rank {
            if nn != n {
                return Err(Error::config(format!(
                    "scene base '{base}' is fixed at rank {n}"
                )));
            }
        }
        Ok(())
    }
}

/// Component shape for a field kind on a `d`-dimensional base with rank-`n`
/// fiber. `fiber_diffusion` infers its column count from the component count.
fn field_shape(kind: FieldKind, d: usize, n: usize, count: usize) -> Result<(usize, usize)> {
    let shape = match kind {
        FieldKind::Covector | FieldKind::Section | FieldKind::FiberDrift => (n, 1),
        FieldKind::OneForm | FieldKind::Velocity => (d, 1),
        FieldKind::Mixed => (d, n),
        FieldKind::Endomorphism => (n, n),
        FieldKind::FiberDiffusion => {
            if count == 0 || count % n != 0 {
                return Err(Error::Shape(format!(
                    "fiber_diffusion needs a multiple of {n} components, got {count}"
                )));
            }
            (n, count / n)
        }
    };
    Ok(shape)
}

/// Closed-form curvature of the twisted scene: the single independent
/// matrix is `R_12 = -lambda * J`.
pub fn twisted_flat_curvature(lambda: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, -lambda, lambda, 0.0])
}
