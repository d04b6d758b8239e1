//! Named field registry: covectors, sections, mixed tensors, endomorphisms,
//! and SDE coefficient fields, backed either by compiled DSL expressions or
//! by built-in closures.

use crate::error::{Error, Result};
use crate::fieldexpr::{compile_str, Params, Program, VarLayout};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    /// Dual fiber components, shape n.
    Covector,
    /// Fiber components, shape n.
    Section,
    /// Base-times-fiber components b[j][alpha], shape d x n.
    Mixed,
    /// Base covector components, shape d.
    OneForm,
    /// Square matrix on some fiber, shape N x N.
    Endomorphism,
    /// Fiber drift coefficients (may read v), shape n.
    FiberDrift,
    /// Fiber diffusion matrix against extra driver columns, shape n x m.
    FiberDiffusion,
    /// Base velocity for deterministic paths, shape d.
    Velocity,
}

impl FieldKind {
    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Covector => "covector",
            FieldKind::Section => "section",
            FieldKind::Mixed => "mixed",
            FieldKind::OneForm => "oneform",
            FieldKind::Endomorphism => "endomorphism",
            FieldKind::FiberDrift => "fiber_drift",
            FieldKind::FiberDiffusion => "fiber_diffusion",
            FieldKind::Velocity => "velocity",
        }
    }

    pub fn from_name(s: &str) -> Option<FieldKind> {
        Some(match s {
            "covector" => FieldKind::Covector,
            "section" => FieldKind::Section,
            "mixed" => FieldKind::Mixed,
            "oneform" => FieldKind::OneForm,
            "endomorphism" => FieldKind::Endomorphism,
            "fiber_drift" => FieldKind::FiberDrift,
            "fiber_diffusion" => FieldKind::FiberDiffusion,
            "velocity" => FieldKind::Velocity,
            _ => return None,
        })
    }
}

/// Reusable evaluation buffers; one per worker thread.
#[derive(Debug, Default, Clone)]
pub struct EvalScratch {
    pub slots: Vec<f64>,
    pub stack: Vec<f64>,
    pub wrap: Vec<f64>,
    pub fd_lo: Vec<f64>,
    pub fd_hi: Vec<f64>,
}

type FieldFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
enum FieldEval {
    /// Row-major compiled programs; slot layout is x1..xd then v1..vn.
    Exprs { programs: Vec<Program>, slots: usize },
    Closure(FieldFn),
}

/// A named tensor field with a fixed component shape. Components are stored
/// row-major; vectors have `cols == 1`.
#[derive(Clone)]
pub struct Field {
    pub kind: FieldKind,
    pub rows: usize,
    pub cols: usize,
    eval: FieldEval,
}

impl Field {
    pub fn from_exprs(
        kind: FieldKind,
        rows: usize,
        cols: usize,
        sources: &[String],
        d: usize,
        n: usize,
        params: &Params,
    ) -> Result<Field> {
        if sources.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} field needs {} components, got {}",
                kind.name(),
                rows * cols,
                sources.len()
            )));
        }
        let layout = VarLayout::base_fiber(d, n);
        let programs = sources
            .iter()
            .map(|src| compile_str(src, &layout, params))
            .collect::<Result<Vec<_>>>()?;
        Ok(Field {
            kind,
            rows,
            cols,
            eval: FieldEval::Exprs {
                programs,
                slots: layout.slots(),
            },
        })
    }

    pub fn from_fn(
        kind: FieldKind,
        rows: usize,
        cols: usize,
        f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Field {
        Field {
            kind,
            rows,
            cols,
            eval: FieldEval::Closure(Arc::new(f)),
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Evaluate at pre-wrapped coordinates. `v` may be empty for fields that
    /// do not read fiber components; missing slots are zero-filled.
    pub fn eval_raw(&self, xw: &[f64], v: &[f64], out: &mut [f64], sc: &mut EvalScratch) {
        debug_assert_eq!(out.len(), self.len());
        match &self.eval {
            FieldEval::Exprs { programs, slots } => {
                sc.slots.clear();
                sc.slots.extend_from_slice(xw);
                sc.slots.extend_from_slice(v);
                if sc.slots.len() < *slots {
                    sc.slots.resize(*slots, 0.0);
                }
                for (o, prog) in out.iter_mut().zip(programs) {
                    *o = prog.eval(&sc.slots, &mut sc.stack);
                }
            }
            FieldEval::Closure(f) => f(xw, v, out),
        }
    }
}

impl std::fmt::Debug for Field {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Field({}, {}x{})",
            self.kind.name(),
            self.rows,
            self.cols
        )
    }
}
