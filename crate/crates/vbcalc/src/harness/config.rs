//! Experiment descriptions: which check to run, on which scene, with which
//! fields and budgets. Decodes from TOML or JSON and is validated up front so
//! every rejected input names the offending key.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::covariant::bundle_map::BUILTIN_MAPS;
use crate::geometry::fields::{Field, FieldKind};
use crate::geometry::scenes::SceneConfig;
use crate::geometry::Scene;
use crate::harmonic::gauge::Z_MAX;
use crate::harmonic::PFormSection;
use crate::paths::TimeGrid;
use crate::{Error, Result};

// Default decision thresholds. Every run reads them through [`Thresholds`],
// so a config file can override any one of them without touching code.
pub const ABORT_BUDGET: f64 = 0.01;
pub const ORDER_WINDOW: [f64; 2] = [0.7, 1.3];
pub const RATIO_MIN: f64 = 1.6;
pub const EXACT_FLOOR: f64 = 1e-12;
pub const COMMUTATION_REL: f64 = 0.1;

/// Decision thresholds, one instance per experiment. Defaults come from the
/// module constants; a `[thresholds]` table in the config overrides fields
/// one by one.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Statistic gate for the martingale and trend tests.
    pub z_max: f64,
    /// Fraction of aborted paths a check tolerates before failing outright.
    pub abort_budget: f64,
    /// Accepted least-squares order range for convergence studies.
    pub order_window: [f64; 2],
    /// Required shrink factor of the median residual per grid halving.
    pub ratio_min: f64,
    /// Residuals below this are reported as exact instead of fitted.
    pub exact_floor: f64,
    /// Commutation gate: the defect must match the curvature value to this
    /// relative tolerance.
    pub commutation_rel: f64,
}

impl Default for Thresholds {
    fn default() -> Thresholds {
        Thresholds {
            z_max: Z_MAX,
            abort_budget: ABORT_BUDGET,
            order_window: ORDER_WINDOW,
            ratio_min: RATIO_MIN,
            exact_floor: EXACT_FLOOR,
            commutation_rel: COMMUTATION_REL,
        }
    }
}

impl Thresholds {
    fn validate(&self) -> Result<()> {
        if !(self.z_max > 0.0) {
            return Err(Error::config("thresholds.z_max must be positive"));
        }
        if !(0.0..=1.0).contains(&self.abort_budget) {
            return Err(Error::config("thresholds.abort_budget must lie in [0, 1]"));
        }
        if !(self.order_window[0] > 0.0 && self.order_window[1] >= self.order_window[0]) {
            return Err(Error::config(
                "thresholds.order_window must be an increasing positive pair",
            ));
        }
        if !(self.ratio_min > 1.0) {
            return Err(Error::config("thresholds.ratio_min must exceed 1"));
        }
        if !(self.exact_floor > 0.0) {
            return Err(Error::config("thresholds.exact_floor must be positive"));
        }
        if !(self.commutation_rel > 0.0) {
            return Err(Error::config("thresholds.commutation_rel must be positive"));
        }
        Ok(())
    }
}

/// The individual residual checks the harness knows how to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    /// Terminal gap between the frame route and the connector route of the
    /// Stratonovich pairing integral.
    Prop21,
    /// Residual of the Stratonovich-to-left-point conversion identity.
    Prop22,
    /// Pullback naturality of the Stratonovich integral through a bundle map.
    Prop24,
    /// Pullback naturality of the mixed cross integral through a bundle map.
    Prop25,
    /// Pullback naturality of the left-point integral through a bundle map.
    Prop26,
    /// Parameter-derivative/antidevelopment commutation defect against its
    /// curvature value.
    Commutation,
    /// Harmonic-section battery: pointwise Laplacian sweep plus the
    /// martingale and trend statistics of the pairing terminal.
    Harmonic,
}

pub const CHECK_NAMES: &[&str] = &[
    "prop21",
    "prop22",
    "prop24",
    "prop25",
    "prop26",
    "commutation",
    "harmonic",
];

impl CheckKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckKind::Prop21 => "prop21",
            CheckKind::Prop22 => "prop22",
            CheckKind::Prop24 => "prop24",
            CheckKind::Prop25 => "prop25",
            CheckKind::Prop26 => "prop26",
            CheckKind::Commutation => "commutation",
            CheckKind::Harmonic => "harmonic",
        }
    }

    fn from_name(s: &str) -> Option<CheckKind> {
        Some(match s {
            "prop21" => CheckKind::Prop21,
            "prop22" => CheckKind::Prop22,
            "prop24" => CheckKind::Prop24,
            "prop25" => CheckKind::Prop25,
            "prop26" => CheckKind::Prop26,
            "commutation" => CheckKind::Commutation,
            "harmonic" => CheckKind::Harmonic,
            _ => return None,
        })
    }
}

/// A check id as written in a config: a plain check, or the same check
/// wrapped in `convergence:` to run over a step ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckId {
    pub kind: CheckKind,
    pub convergence: bool,
}

impl fmt::Display for CheckId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.convergence {
            write!(f, "convergence:{}", self.kind.name())
        } else {
            f.write_str(self.kind.name())
        }
    }
}

impl FromStr for CheckId {
    type Err = Error;

    fn from_str(s: &str) -> Result<CheckId> {
        let (convergence, name) = match s.strip_prefix("convergence:") {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        match CheckKind::from_name(name) {
            Some(kind) => Ok(CheckId { kind, convergence }),
            None => Err(Error::config(format!(
                "unknown check id '{s}' (known: {}, each also available as convergence:<id>)",
                CHECK_NAMES.join(", ")
            ))),
        }
    }
}

/// The `[check]` table: the check id plus everything the run needs — path
/// budget, grid, seed, start point, and the names of the scene fields each
/// check reads.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSection {
    pub id: String,
    #[serde(default = "default_paths")]
    pub paths: usize,
    pub horizon: f64,
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    pub x0: Vec<f64>,
    /// Fiber start point; required by every check that moves a fiber point.
    #[serde(default)]
    pub v0: Option<Vec<f64>>,
    /// Pairing covector (`prop21`, `prop22`, `prop24`, `prop26`,
    /// `commutation`) or, for `harmonic`, the pairing against the flattened
    /// section components.
    #[serde(default)]
    pub theta: Option<String>,
    /// Mixed-kind integrand for `prop25`.
    #[serde(default)]
    pub b: Option<String>,
    /// Built-in bundle map name for the pullback checks.
    #[serde(default)]
    pub map: Option<String>,
    /// Base velocity field steering the `commutation` path family.
    #[serde(default)]
    pub velocity: Option<String>,
    /// Coordinate shifted across the `commutation` family (default 0).
    #[serde(default)]
    pub shift_coord: Option<usize>,
    /// Parameter spacing of the `commutation` family (default 1e-2).
    #[serde(default)]
    pub shift: Option<f64>,
    /// Section under test for `harmonic`: a `section` field (degree 0) or a
    /// `mixed` field (degree 1).
    #[serde(default)]
    pub sigma: Option<String>,
    /// Optional gauge generator for `harmonic`, an endomorphism of the
    /// flattened fiber.
    #[serde(default)]
    pub phi: Option<String>,
    /// Optional endomorphism driving the identity cross-check gauge in
    /// `harmonic`.
    #[serde(default)]
    pub vgauge: Option<String>,
    /// Optional fiber drift field, switching the fiber dynamics from frozen
    /// to a driven SDE.
    #[serde(default)]
    pub fiber_drift: Option<String>,
    /// Optional fiber diffusion field (adds its column count to the driver).
    #[serde(default)]
    pub fiber_diffusion: Option<String>,
    /// Optional absolute gate on the median residual: exceed it and the run
    /// exits with a statistical failure.
    #[serde(default)]
    pub max_residual: Option<f64>,
}

fn default_paths() -> usize {
    200
}

/// A full experiment: scene, check, thresholds, output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub check: CheckSection,
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Directory reports are written into; the CLI `--out` flag overrides it.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// Read a config from disk, dispatching on the file extension: `.json` is
/// parsed as JSON, everything else as TOML. Parse errors and validation
/// errors are reported separately.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read '{}': {e}", path.display())))?;
    let json = path.extension().is_some_and(|e| e == "json");
    parse_config(&text, json).map_err(|e| match e {
        Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_config(text: &str, json: bool) -> Result<ExperimentConfig> {
    if json {
        serde_json::from_str(text).map_err(|e| Error::config(format!("JSON parse error: {e}")))
    } else {
        toml::from_str(text).map_err(|e| Error::config(format!("TOML parse error: {e}")))
    }
}

/// Everything a runner needs, resolved and checked once: the built scene,
/// the parsed check id, the time grid, and the fiber start.
#[derive(Debug)]
pub struct Prepared {
    pub scene: Scene,
    pub id: CheckId,
    pub grid: TimeGrid,
    pub v0: Vec<f64>,
    /// For `harmonic`: the section's degree, inferred from the field kind.
    pub degree: usize,
}

impl ExperimentConfig {
    /// Validate the experiment and build its scene. Every rejection names
    /// the violated invariant or the offending key.
    pub fn prepare(&self) -> Result<Prepared> {
        self.thresholds.validate()?;
        let id: CheckId = self.check.id.parse()?;
        let scene = self.scene.build()?;
        let d = scene.dim();
        let n = scene.rank();
        let c = &self.check;

        if c.paths < 1 {
            return Err(Error::config("check.paths must be at least 1"));
        }
        if !(c.dt > 0.0 && c.dt.is_finite()) {
            return Err(Error::config(format!(
                "check.dt must be a positive number, got {}",
                c.dt
            )));
        }
        if !(c.horizon > 0.0 && c.horizon.is_finite()) {
            return Err(Error::config(format!(
                "check.horizon must be a positive number, got {}",
                c.horizon
            )));
        }
        // dt must tile the horizon exactly; a grid that over- or undershoots
        // the horizon would silently change every terminal value.
        let steps_f = c.horizon / c.dt;
        // the negated form also rejects an inf/NaN ratio of two finite inputs
        if !(steps_f < 1e9) {
            return Err(Error::config(format!(
                "check.dt = {} splits the horizon {} into over 1e9 steps",
                c.dt, c.horizon
            )));
        }
        let steps = steps_f.round();
        if steps < 1.0 || (steps_f - steps).abs() > 1e-9 * steps.max(1.0) {
            return Err(Error::config(format!(
                "check.dt = {} does not divide the horizon {} into whole steps",
                c.dt, c.horizon
            )));
        }
        let grid = TimeGrid::new(0.0, c.dt, steps as usize);

        if c.x0.len() != d {
            return Err(Error::config(format!(
                "check.x0 has {} coordinates, scene '{}' has {d}",
                c.x0.len(),
                scene.name
            )));
        }
        if !scene.manifold.contains(&c.x0) {
            return Err(Error::config(format!(
                "check.x0 lies outside the chart of scene '{}'",
                scene.name
            )));
        }
        if let Some(m) = &c.max_residual {
            if !(*m > 0.0) {
                return Err(Error::config("check.max_residual must be positive"));
            }
        }

        // Reject keys the chosen check never reads: a silently ignored field
        // name usually means the config tests something else than intended.
        let relevant: &[&str] = match id.kind {
            CheckKind::Prop21 | CheckKind::Prop22 => {
                &["theta", "v0", "fiber_drift", "fiber_diffusion", "max_residual"]
            }
            CheckKind::Prop24 | CheckKind::Prop26 => {
                &["theta", "map", "v0", "fiber_drift", "fiber_diffusion", "max_residual"]
            }
            CheckKind::Prop25 => {
                &["b", "map", "v0", "fiber_drift", "fiber_diffusion", "max_residual"]
            }
            CheckKind::Commutation => {
                &["theta", "velocity", "shift", "shift_coord", "v0", "max_residual"]
            }
            CheckKind::Harmonic => &["sigma", "theta", "phi", "vgauge", "max_residual"],
        };
        let set: &[(&str, bool)] = &[
            ("theta", c.theta.is_some()),
            ("b", c.b.is_some()),
            ("map", c.map.is_some()),
            ("velocity", c.velocity.is_some()),
            ("shift", c.shift.is_some()),
            ("shift_coord", c.shift_coord.is_some()),
            ("sigma", c.sigma.is_some()),
            ("phi", c.phi.is_some()),
            ("vgauge", c.vgauge.is_some()),
            ("fiber_drift", c.fiber_drift.is_some()),
            ("fiber_diffusion", c.fiber_diffusion.is_some()),
            ("v0", c.v0.is_some()),
        ];
        for (key, _) in set.iter().filter(|(_, s)| *s) {
            if !relevant.contains(key) {
                return Err(Error::config(format!(
                    "check '{}' does not use check.{key}",
                    id.kind.name()
                )));
            }
        }

        let v0 = match id.kind {
            CheckKind::Harmonic => Vec::new(),
            _ => {
                let v0 = c.v0.as_ref().ok_or_else(|| {
                    Error::config(format!(
                        "check '{}' needs check.v0, the fiber start ({n} components)",
                        id.kind.name()
                    ))
                })?;
                if v0.len() != n {
                    return Err(Error::config(format!(
                        "check.v0 has {} components, bundle rank is {n}",
                        v0.len()
                    )));
                }
                v0.clone()
            }
        };

        let need = |name: &Option<String>, key: &str, what: &str| -> Result<String> {
            name.clone().ok_or_else(|| {
                Error::config(format!(
                    "check '{}' needs check.{key}, {what}",
                    id.kind.name()
                ))
            })
        };

        let mut degree = 0;
        match id.kind {
            CheckKind::Prop21 | CheckKind::Prop22 | CheckKind::Prop24 | CheckKind::Prop26 => {
                let th = need(&c.theta, "theta", "a covector field name")?;
                scene.field_of_kind(&th, FieldKind::Covector)?;
            }
            CheckKind::Prop25 => {
                let b = need(&c.b, "b", "a mixed field name")?;
                scene.field_of_kind(&b, FieldKind::Mixed)?;
            }
            CheckKind::Commutation => {
                let th = need(&c.theta, "theta", "a covector field name")?;
                scene.field_of_kind(&th, FieldKind::Covector)?;
                let vel = need(&c.velocity, "velocity", "a velocity field name")?;
                scene.field_of_kind(&vel, FieldKind::Velocity)?;
                if let Some(sc) = c.shift_coord {
                    if sc >= d {
                        return Err(Error::config(format!(
                            "check.shift_coord = {sc} is out of range for a {d}-dimensional base"
                        )));
                    }
                }
                if let Some(sh) = c.shift {
                    if !(sh > 0.0 && sh.is_finite()) {
                        return Err(Error::config("check.shift must be a positive spacing"));
                    }
                }
            }
            CheckKind::Harmonic => {
                let sg = need(&c.sigma, "sigma", "a section or mixed field name")?;
                let f = scene.field(&sg)?;
                degree = match f.kind {
                    FieldKind::Section => 0,
                    FieldKind::Mixed => 1,
                    other => {
                        return Err(Error::config(format!(
                            "check.sigma must name a section (degree 0) or mixed (degree 1) \
                             field; '{sg}' has kind '{}'",
                            other.name()
                        )))
                    }
                };
                // constructing the section re-checks the shape for the scene
                PFormSection::new(&scene, degree, f.clone())?;
                let nn = if degree == 0 { n } else { d * n };
                let th = need(&c.theta, "theta", "the pairing field name")?;
                let tf = scene.field(&th)?;
                if tf.len() != nn {
                    return Err(Error::config(format!(
                        "check.theta '{th}' has {} components, the flattened section has {nn}",
                        tf.len()
                    )));
                }
                for (key, name) in [("phi", &c.phi), ("vgauge", &c.vgauge)] {
                    if let Some(name) = name {
                        let f = scene.field_of_kind(name, FieldKind::Endomorphism)?;
                        if f.rows != nn || f.cols != nn {
                            return Err(Error::config(format!(
                                "check.{key} '{name}' is {}x{}, the flattened fiber needs \
                                 {nn}x{nn}",
                                f.rows, f.cols
                            )));
                        }
                    }
                }
            }
        }

        if matches!(
            id.kind,
            CheckKind::Prop24 | CheckKind::Prop25 | CheckKind::Prop26
        ) {
            let m = need(&c.map, "map", "a built-in bundle map name")?;
            if !BUILTIN_MAPS.contains(&m.as_str()) {
                return Err(Error::config(format!(
                    "unknown bundle map '{m}' (known: {})",
                    BUILTIN_MAPS.join(", ")
                )));
            }
        }

        for (key, name) in [
            ("fiber_drift", &c.fiber_drift),
            ("fiber_diffusion", &c.fiber_diffusion),
        ] {
            if let Some(name) = name {
                let kind = if key == "fiber_drift" {
                    FieldKind::FiberDrift
                } else {
                    FieldKind::FiberDiffusion
                };
                scene.field_of_kind(name, kind)?;
            }
        }

        Ok(Prepared {
            scene,
            id,
            grid,
            v0,
            degree,
        })
    }

    /// Hash of the effective experiment (after CLI overrides), stamped into
    /// every report so an output can be traced to the exact inputs. The
    /// output directory is not hashed: it cannot influence any number.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut c = self.clone();
        c.out = None;
        let canon = serde_json::to_string(&c).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        let out = h.finalize();
        let mut s = String::with_capacity(64);
        for b in out {
            use std::fmt::Write;
            let _ = write!(s, "{b:02x}");
        }
        s
    }

    /// Resolved fiber field pair for the path simulation.
    pub(crate) fn fiber_fields<'a>(
        &self,
        scene: &'a Scene,
    ) -> Result<(Option<&'a Field>, Option<&'a Field>)> {
        let drift = match &self.check.fiber_drift {
            Some(n) => Some(scene.field_of_kind(n, FieldKind::FiberDrift)?),
            None => None,
        };
        let diffusion = match &self.check.fiber_diffusion {
            Some(n) => Some(scene.field_of_kind(n, FieldKind::FiberDiffusion)?),
            None => None,
        };
        Ok((drift, diffusion))
    }
}

/// Convenience constructor used throughout the tests: a check section with
/// the common knobs filled in.
pub fn check_section(id: &str, horizon: f64, dt: f64, x0: Vec<f64>) -> CheckSection {
    CheckSection {
        id: id.to_string(),
        paths: default_paths(),
        horizon,
        dt,
        seed: 0,
        x0,
        v0: None,
        theta: None,
        b: None,
        map: None,
        velocity: None,
        shift_coord: None,
        shift: None,
        sigma: None,
        phi: None,
        vgauge: None,
        fiber_drift: None,
        fiber_diffusion: None,
        max_residual: None,
    }
}
