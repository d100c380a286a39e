//! Fixed-point refinement of the reference point in coefficient space.
//!
//! With coefficients `y` the reference is `x(y) = x₀ + Σⱼ xⱼ (yⱼ - y⁰ⱼ)` and one
//! step moves `y` by `s·d` with
//!
//! ```text
//! dⱼ = α E[zⱼ] + y⁰ⱼ - yⱼ + α² Var[zⱼ] ⟨δ - Q(x(y)), D Q[xⱼ]⟩_Σ,
//! ```
//!
//! the first-order posterior-mean correction at `x(y)`. The same `d` is a
//! preconditioned negative gradient of the Tikhonov functional
//! `F(y) = ½‖δ - Q(x(y))‖²_Σ + ½ Σⱼ (yⱼ - y⁰ⱼ - α E[zⱼ])² / (α² Var[zⱼ])`.

use std::io::Write;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{ForwardModel, MeasurementSetup};
use crate::prior::AffineExpansion;

#[derive(Debug, Clone, PartialEq)]
pub struct RefineState {
    pub y: DVector<f64>,
    pub y0: DVector<f64>,
    pub update_history: Vec<f64>,
    pub iteration: usize,
}

impl RefineState {
    pub fn new(y0: DVector<f64>) -> Self {
        Self {
            y: y0.clone(),
            y0,
            update_history: Vec::new(),
            iteration: 0,
        }
    }

    /// Starts at the expansion's own reference, `y = y⁰ = 0`.
    pub fn at_origin(expansion: &AffineExpansion) -> Self {
        Self::new(DVector::zeros(expansion.len()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOptions {
    pub max_iter: usize,
    pub step_scale: f64,
    pub stop_tol: f64,
    /// Halve the step whenever the update norm grows.
    pub backtracking: bool,
    /// Divergence is declared once `‖d‖ > blowup_factor · ‖d⁰‖`.
    pub blowup_factor: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            step_scale: 1.0,
            stop_tol: 1e-12,
            backtracking: false,
            blowup_factor: 1e6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub reference: DVector<f64>,
    pub state: RefineState,
}

fn check_dims(y: &DVector<f64>, y0: &DVector<f64>, expansion: &AffineExpansion) -> Result<()> {
    if y.len() != expansion.len() {
        return Err(Error::dim("coefficients", expansion.len(), y.len()));
    }
    if y0.len() != expansion.len() {
        return Err(Error::dim("initial coefficients", expansion.len(), y0.len()));
    }
    Ok(())
}

/// `x₀ + Σⱼ xⱼ (yⱼ - y⁰ⱼ)`.
pub fn reference_point(
    expansion: &AffineExpansion,
    y: &DVector<f64>,
    y0: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dims(y, y0, expansion)?;
    let mut x = expansion.x0().clone();
    for (j, mode) in expansion.modes().iter().enumerate() {
        let c = y[j] - y0[j];
        if c != 0.0 {
            x.axpy(c, mode, 1.0);
        }
    }
    Ok(x)
}

/// Data couplings `⟨δ - Q(x(y)), D Q[xⱼ]⟩_Σ` for every mode.
fn couplings<M: ForwardModel + ?Sized>(
    y: &DVector<f64>,
    y0: &DVector<f64>,
    model: &M,
    expansion: &AffineExpansion,
    meas: &MeasurementSetup,
) -> Result<Vec<f64>> {
    let x = reference_point(expansion, y, y0)?;
    let (q, dq) = model.linearize_measurement(&x, expansion.modes())?;
    if q.len() != meas.len() {
        return Err(Error::dim("measurement", meas.len(), q.len()));
    }
    let weighted = meas.sigma.solve(&(&meas.data - q))?;
    Ok(dq.iter().map(|d| weighted.dot(d)).collect())
}

/// The update direction `d` at `y`.
pub fn update_direction<M: ForwardModel + ?Sized>(
    y: &DVector<f64>,
    y0: &DVector<f64>,
    model: &M,
    expansion: &AffineExpansion,
    meas: &MeasurementSetup,
) -> Result<DVector<f64>> {
    let c = couplings(y, y0, model, expansion, meas)?;
    let a2 = expansion.alpha().powi(2);
    let moments = expansion.moments();
    Ok(DVector::from_fn(y.len(), |j, _| {
        expansion.alpha() * moments[j].mean + y0[j] - y[j] + a2 * moments[j].variance * c[j]
    }))
}

/// Gradient of the Tikhonov functional with respect to `y`.
pub fn tikhonov_gradient<M: ForwardModel + ?Sized>(
    y: &DVector<f64>,
    y0: &DVector<f64>,
    model: &M,
    expansion: &AffineExpansion,
    meas: &MeasurementSetup,
) -> Result<DVector<f64>> {
    let moments = expansion.moments();
    if let Some(j) = moments.iter().position(|m| !(m.variance > 0.0)) {
        return Err(Error::SingularPrior { index: j });
    }
    let c = couplings(y, y0, model, expansion, meas)?;
    let a = expansion.alpha();
    Ok(DVector::from_fn(y.len(), |j, _| {
        -c[j] + (y[j] - y0[j] - a * moments[j].mean) / (moments[j].variance * a * a)
    }))
}

/// One step `y ← y + step_scale · d`.
pub fn refine_step<M: ForwardModel + ?Sized>(
    state: RefineState,
    model: &M,
    expansion: &AffineExpansion,
    meas: &MeasurementSetup,
    step_scale: f64,
) -> Result<RefineState> {
    if !(step_scale > 0.0) {
        return Err(Error::InvalidInput(format!("step scale must be positive, got {step_scale}")));
    }
    let d = update_direction(&state.y, &state.y0, model, expansion, meas)?;
    let norm = d.norm();
    let mut next = state;
    next.update_history.push(norm);
    next.iteration += 1;
    if !norm.is_finite() {
        return Err(Error::Diverged {
            iteration: next.iteration,
            history: next.update_history,
        });
    }
    next.y.axpy(step_scale, &d, 1.0);
    Ok(next)
}

/// Iterates until `‖d‖ ≤ stop_tol` or `max_iter` updates.
///
/// Model failures after the first step are reported as divergence, since the
/// iterate has then left the region where the model can be solved.
pub fn run_refinement<M: ForwardModel + ?Sized>(
    model: &M,
    expansion: &AffineExpansion,
    meas: &MeasurementSetup,
    start: RefineState,
    options: &RefineOptions,
) -> Result<RefineOutcome> {
    if options.max_iter < 1 {
        return Err(Error::InvalidInput("max_iter must be at least 1".into()));
    }
    check_dims(&start.y, &start.y0, expansion)?;
    let mut state = start;
    let mut step = options.step_scale;
    let mut first: Option<f64> = None;
    for _ in 0..options.max_iter {
        let d = match update_direction(&state.y, &state.y0, model, expansion, meas) {
            Ok(d) => d,
            Err(e) if state.iteration == 0 => return Err(e),
            Err(_) => {
                return Err(Error::Diverged {
                    iteration: state.iteration,
                    history: state.update_history,
                })
            }
        };
        let norm = d.norm();
        let previous = state.update_history.last().copied();
        state.update_history.push(norm);
        state.iteration += 1;
        let d0 = *first.get_or_insert(norm);
        if !norm.is_finite() || norm > options.blowup_factor * d0 {
            return Err(Error::Diverged {
                iteration: state.iteration,
                history: state.update_history,
            });
        }
        if norm <= options.stop_tol {
            break;
        }
        if options.backtracking && previous.is_some_and(|p| norm > p) {
            step *= 0.5;
        }
        state.y.axpy(step, &d, 1.0);
    }
    Ok(RefineOutcome {
        reference: reference_point(expansion, &state.y, &state.y0)?,
        state,
    })
}

/// Writes `iteration,update_norm` rows.
pub fn write_history_csv<W: Write>(history: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "update_norm"])?;
    for (i, v) in history.iter().enumerate() {
        w.write_record([i.to_string(), format!("{v:.16e}")])?;
    }
    w.flush()?;
    Ok(())
}
