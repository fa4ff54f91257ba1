//! Sensitivity columns of the embedded surface against central differences
//! of full equilibrium re-solves.

use facecap_core::anatomy::{Anatomy, PrecomputedMuscleBasis};
use facecap_core::geometry::{Embedding, Vec3};
use facecap_core::quasistatic::{QuasistaticError, Simulator, SolveSettings};
use facecap_core::rig::JawParams;
use facecap_core::sensitivity::{embed_block, SensitivityError, SensitivitySystem};
use serde::Serialize;
use thiserror::Error;

use crate::parallel::solve_columns;

pub const JAW_NAMES: [&str; 6] = ["jaw_rx", "jaw_ry", "jaw_rz", "jaw_tx", "jaw_ty", "jaw_tz"];
pub const DEFAULT_STEP: f64 = 1e-4;
pub const PASS_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error(transparent)]
    Quasistatic(#[from] QuasistaticError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error("equilibrium did not converge at parameter {param} ({sign}{step})")]
    Unconverged { param: usize, sign: char, step: f64 },
    #[error("surface embedding failed: {0}")]
    Embedding(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradRow {
    pub param: usize,
    pub name: String,
    pub analytic_norm: f64,
    pub fd_norm: f64,
    pub rel_err: f64,
}

impl GradRow {
    pub fn passes(&self) -> bool {
        self.rel_err < PASS_THRESHOLD
    }
}

pub fn param_names(shape_names: &[String]) -> Vec<String> {
    shape_names
        .iter()
        .cloned()
        .chain(JAW_NAMES.iter().map(|s| s.to_string()))
        .collect()
}

/// Columns whose analytic and FD norms are both zero report zero error.
pub fn relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(fd));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn flatten(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

pub fn gradcheck(
    anatomy: &Anatomy,
    basis: &PrecomputedMuscleBasis,
    b: &[f64],
    j: &JawParams,
    step: f64,
    threads: usize,
) -> Result<Vec<GradRow>, GradcheckError> {
    let settings = SolveSettings {
        relative_tolerance: 1e-11,
        ..SolveSettings::default()
    };
    let sim = Simulator::new(anatomy, basis, settings)?;
    let embedding = Embedding::of_vertices(&anatomy.flesh, &anatomy.surface_to_flesh)
        .map_err(|e| GradcheckError::Embedding(e.to_string()))?;
    let state = sim.solve(b, j, None)?;
    if !state.is_converged() {
        return Err(GradcheckError::Unconverged {
            param: 0,
            sign: '0',
            step: 0.0,
        });
    }
    let system = SensitivitySystem::new(&sim, &state)?;
    let block = system.assemble(solve_columns(&system, threads)?)?;
    let analytic = embed_block(&block, &embedding);
    let names = param_names(&basis.shape_names);
    let nb = b.len();
    let mut rows = Vec::with_capacity(names.len());
    for (p, name) in names.iter().enumerate() {
        let mut surfaces = Vec::with_capacity(2);
        for sign in [1.0, -1.0] {
            let mut bp = b.to_vec();
            let mut jp = *j;
            if p < nb {
                bp[p] += sign * step;
            } else {
                jp.0[p - nb] += sign * step;
            }
            let s = sim.solve(&bp, &jp, Some(&state.positions))?;
            if !s.is_converged() {
                return Err(GradcheckError::Unconverged {
                    param: p,
                    sign: if sign > 0.0 { '+' } else { '-' },
                    step,
                });
            }
            surfaces.push(flatten(&embedding.reconstruct(&s.positions)));
        }
        let fd: Vec<f64> = surfaces[0]
            .iter()
            .zip(&surfaces[1])
            .map(|(a, c)| (a - c) / (2.0 * step))
            .collect();
        let col: Vec<f64> = analytic.column(p).iter().copied().collect();
        rows.push(GradRow {
            param: p,
            name: name.clone(),
            analytic_norm: norm(&col),
            fd_norm: norm(&fd),
            rel_err: relative_error(&col, &fd),
        });
    }
    Ok(rows)
}

pub fn format_table(rows: &[GradRow]) -> String {
    let mut s = format!(
        "{:<4} {:<16} {:>14} {:>14} {:>12}  status\n",
        "#", "parameter", "|analytic|", "|fd|", "rel.err"
    );
    for r in rows {
        s += &format!(
            "{:<4} {:<16} {:>14.6e} {:>14.6e} {:>12.3e}  {}\n",
            r.param,
            r.name,
            r.analytic_norm,
            r.fd_norm,
            r.rel_err,
            if r.passes() { "ok" } else { "FAIL" }
        );
    }
    s
}
