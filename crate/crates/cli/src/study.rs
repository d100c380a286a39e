//! Convergence and refinement studies over a ladder of amplitudes `α`.

use std::time::Instant;

use anyhow::{bail, Context};
use bayes_lsa::darcy::{darcy_noise_covariance, DarcyModel, DarcyPrediction};
use bayes_lsa::estimators::{estimate_posterior_detailed, Estimate, SampleBudget};
use bayes_lsa::linalg::{field_l2_norm, tensor_l2_norm};
use bayes_lsa::lv::{lv_noise_covariance, LvModel, LV_DATA};
use bayes_lsa::mesh::{build_unit_square_mesh, TriangularMesh};
use bayes_lsa::model::{evaluate_at, generate_data, CountingModel};
use bayes_lsa::prior::{brownian_bridge_modes, build_kle, gaussian_kernel, KleBasis};
use bayes_lsa::refine::{run_refinement, RefineOptions, RefineState};
use bayes_lsa::{
    expand_posterior, AffineExpansion, CoefficientLaw, Error, ForwardModel, MeasurementSetup, MomentOrder,
    PosteriorMoments,
};
use nalgebra::{DMatrix, DVector};

use crate::config::{ModelKind, PredictionKind, Quantity, ReferenceKind, StudyConfig};
use crate::report::{RefineHistory, RefineRecord, StudyRecord};

/// How errors are measured in the prediction space.
#[derive(Debug, Clone)]
pub enum ErrorNorm {
    /// `L²(D)` for fields and `L²(D) ⊗ L²(D)` for kernels, via the mass matrix.
    L2(DMatrix<f64>),
    /// Maximum over grid points (entries for matrices).
    Max,
}

impl ErrorNorm {
    pub fn vector_name(&self) -> &'static str {
        match self {
            ErrorNorm::L2(_) => "L2",
            ErrorNorm::Max => "max",
        }
    }

    pub fn matrix_name(&self) -> &'static str {
        match self {
            ErrorNorm::L2(_) => "L2xL2",
            ErrorNorm::Max => "max",
        }
    }

    pub fn vector(&self, v: &DVector<f64>) -> f64 {
        match self {
            ErrorNorm::L2(m) => field_l2_norm(m, v).unwrap_or(f64::NAN),
            ErrorNorm::Max => v.amax(),
        }
    }

    pub fn matrix(&self, k: &DMatrix<f64>) -> f64 {
        match self {
            ErrorNorm::L2(m) => tensor_l2_norm(m, k).unwrap_or(f64::NAN),
            ErrorNorm::Max => k.amax(),
        }
    }
}

/// Model, prior at `α = 1`, data and error norm for one study.
pub struct Problem {
    pub model: Box<dyn ForwardModel>,
    pub expansion: AffineExpansion,
    pub meas: MeasurementSetup,
    pub norm: ErrorNorm,
    /// Ground-truth parameter behind synthetic data.
    pub truth: Option<DVector<f64>>,
}

fn darcy_meshes(cfg: &StudyConfig) -> anyhow::Result<(TriangularMesh, Option<TriangularMesh>)> {
    let mesh = build_unit_square_mesh(cfg.mesh_level)?;
    let fine = match cfg.kle_level {
        Some(k) if k > cfg.mesh_level => Some(build_unit_square_mesh(k)?),
        _ => None,
    };
    Ok((mesh, fine))
}

/// KLE basis on the parameter mesh of a Darcy study.
pub fn darcy_kle(cfg: &StudyConfig) -> anyhow::Result<(TriangularMesh, KleBasis)> {
    let (mesh, fine) = darcy_meshes(cfg)?;
    let pmesh = fine.unwrap_or(mesh);
    let kle = build_kle(gaussian_kernel, &pmesh, cfg.kle_tol)?;
    Ok((pmesh, kle))
}

pub fn build_problem(cfg: &StudyConfig) -> anyhow::Result<Problem> {
    match cfg.model {
        ModelKind::Darcy => {
            let (mesh, fine) = darcy_meshes(cfg)?;
            let pmesh = fine.clone().unwrap_or_else(|| mesh.clone());
            let kle = build_kle(gaussian_kernel, &pmesh, cfg.kle_tol)?;
            let x0 = DVector::from_element(pmesh.node_count(), 1.0);
            let expansion = kle.uniform_expansion(x0, (!cfg.centered).then_some(0.1), 1.0)?;
            let prediction = match cfg.prediction_or_default() {
                PredictionKind::R2 => DarcyPrediction::Solution,
                _ => DarcyPrediction::Parameter,
            };
            let mut model = DarcyModel::new(mesh, prediction)?;
            if let Some(f) = fine {
                model = model.with_parameter_mesh(f)?;
            }
            let norm = ErrorNorm::L2(model.prediction_mesh().mass_matrix());
            let (meas, truth) = generate_data(
                &model,
                &expansion.with_alpha(cfg.data_alpha)?,
                &darcy_noise_covariance(),
                cfg.seed,
            )?;
            Ok(Problem {
                model: Box::new(model),
                expansion,
                meas,
                norm,
                truth: Some(truth),
            })
        }
        ModelKind::LotkaVolterra => {
            let model = LvModel::default();
            let modes = brownian_bridge_modes(cfg.modes, &model.time_grid())?;
            let x0 = DVector::zeros(model.parameter_dim());
            let laws = vec![CoefficientLaw::StandardNormal; modes.len()];
            let expansion = AffineExpansion::new(x0, modes, laws, 1.0)?;
            let meas = MeasurementSetup::new(
                DVector::from_row_slice(&LV_DATA),
                lv_noise_covariance(cfg.sigma_scale)?,
            )?;
            Ok(Problem {
                model: Box::new(model),
                expansion,
                meas,
                norm: ErrorNorm::Max,
                truth: None,
            })
        }
    }
}

fn budget(cfg: &StudyConfig) -> Option<SampleBudget> {
    match cfg.reference {
        ReferenceKind::Qmc => Some(SampleBudget::halton(cfg.samples)),
        ReferenceKind::Mc => Some(SampleBudget::antithetic(cfg.samples, cfg.seed)),
        ReferenceKind::Quadrature => Some(SampleBudget::tensor_grid(cfg.quadrature_nodes)),
        ReferenceKind::None => None,
    }
}

fn budget_size(cfg: &StudyConfig, modes: usize) -> usize {
    match cfg.reference {
        ReferenceKind::Quadrature => cfg.quadrature_nodes.saturating_pow(modes as u32),
        ReferenceKind::None => 0,
        _ => cfg.samples,
    }
}

fn status_of(e: &anyhow::Error) -> String {
    match e.downcast_ref::<Error>() {
        Some(Error::DegenerateWeights) => "degenerate-weights".into(),
        Some(Error::Diverged { .. }) => "diverged".into(),
        _ => format!("failed: {e:#}").replace(['\n', '\r'], " "),
    }
}

fn quantity_pair(
    q: Quantity,
    norm: &ErrorNorm,
    approx: &PosteriorMoments,
    reference: Option<&Estimate>,
) -> (f64, f64, f64) {
    let diff_v = |a: &DVector<f64>, b: &DVector<f64>| norm.vector(&(a - b));
    let diff_m = |a: &Option<DMatrix<f64>>, b: &Option<DMatrix<f64>>| match (a, b) {
        (Some(a), Some(b)) => norm.matrix(&(a - b)),
        _ => f64::NAN,
    };
    let pick = |m: &PosteriorMoments| match q {
        Quantity::Correlation => m.correlation.clone(),
        Quantity::Covariance => m.covariance.clone(),
        Quantity::Mean => None,
    };
    match q {
        Quantity::Mean => {
            let own = norm.vector(&approx.mean);
            match reference {
                Some(r) => (own, diff_v(&approx.mean, &r.full.mean), diff_v(&r.full.mean, &r.half.mean)),
                None => (own, f64::NAN, f64::NAN),
            }
        }
        _ => {
            let own = pick(approx).map_or(f64::NAN, |m| norm.matrix(&m));
            match reference {
                Some(r) => (own, diff_m(&pick(approx), &pick(&r.full)), diff_m(&pick(&r.full), &pick(&r.half))),
                None => (own, f64::NAN, f64::NAN),
            }
        }
    }
}

/// Records plus the number of model calls spent on the expansions.
#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub records: Vec<StudyRecord>,
    pub expansion_model_calls: usize,
}

pub fn run_convergence_study(cfg: &StudyConfig) -> anyhow::Result<ConvergenceReport> {
    cfg.validate()?;
    let problem = build_problem(cfg)?;
    let quantities = cfg.quantities();
    let order = if quantities == [Quantity::Mean] {
        MomentOrder::MeanOnly
    } else {
        MomentOrder::Full
    };
    let counter = CountingModel::new(problem.model.as_ref());
    let mut records = Vec::with_capacity(cfg.alphas.len() * quantities.len());
    if cfg.alphas.is_empty() {
        return Ok(ConvergenceReport {
            records,
            expansion_model_calls: 0,
        });
    }
    let evals = evaluate_at(&counter, &problem.expansion, problem.expansion.x0())
        .context("derivatives at the reference point")?;
    let budget = budget(cfg);
    let samples = budget_size(cfg, problem.expansion.len());

    for &alpha in &cfg.alphas {
        let start = Instant::now();
        let outcome = (|| -> anyhow::Result<(PosteriorMoments, Option<Estimate>)> {
            let exp = problem.expansion.with_alpha(alpha)?;
            let approx = expand_posterior(&evals, &problem.meas, exp.laws(), alpha, order)?;
            let reference = match &budget {
                Some(b) => Some(estimate_posterior_detailed(problem.model.as_ref(), &exp, &problem.meas, b, order)?),
                None => None,
            };
            Ok((approx, reference))
        })();
        let seconds = cfg.timings.then(|| start.elapsed().as_secs_f64());
        for &q in &quantities {
            let norm_name = match q {
                Quantity::Mean => problem.norm.vector_name(),
                _ => problem.norm.matrix_name(),
            };
            let (own, err, ref_err, status) = match &outcome {
                Ok((approx, reference)) => {
                    let (own, err, ref_err) = quantity_pair(q, &problem.norm, approx, reference.as_ref());
                    (own, err, ref_err, "ok".to_string())
                }
                Err(e) => (f64::NAN, f64::NAN, f64::NAN, status_of(e)),
            };
            records.push(StudyRecord {
                alpha,
                quantity: q.as_str(),
                norm_name,
                expansion_norm: own,
                error_expansion: err,
                reference_error: ref_err,
                reference_kind: cfg.reference.as_str(),
                samples,
                status,
                wallclock_seconds: seconds,
            });
        }
    }
    Ok(ConvergenceReport {
        records,
        expansion_model_calls: counter.total(),
    })
}

#[derive(Debug, Clone)]
pub struct RefinementReport {
    pub records: Vec<RefineRecord>,
    pub histories: Vec<RefineHistory>,
}

pub fn run_refinement_study(cfg: &StudyConfig) -> anyhow::Result<RefinementReport> {
    cfg.validate()?;
    if cfg.prediction == Some(PredictionKind::R2) {
        bail!("refinement moves the reference parameter; compare it with prediction r1");
    }
    let mut cfg = cfg.clone();
    cfg.prediction = None;
    let problem = build_problem(&cfg)?;
    let budget = budget(&cfg);
    let options = RefineOptions {
        max_iter: cfg.iterations,
        step_scale: cfg.step_scale,
        stop_tol: cfg.stop_tol,
        backtracking: cfg.backtracking,
        ..RefineOptions::default()
    };
    let norm_name = problem.norm.vector_name();
    let mut records = Vec::with_capacity(cfg.alphas.len());
    let mut histories = Vec::with_capacity(cfg.alphas.len());
    for &alpha in &cfg.alphas {
        let start = Instant::now();
        let exp = problem.expansion.with_alpha(alpha)?;
        let run = run_refinement(problem.model.as_ref(), &exp, &problem.meas, RefineState::at_origin(&exp), &options);
        let (history, refined, mut status) = match run {
            Ok(out) => {
                let converged = out.state.update_history.last().is_some_and(|&d| d <= options.stop_tol);
                let status = if converged { "ok" } else { "max-iterations" };
                (out.state.update_history, Some(out.reference), status.to_string())
            }
            Err(Error::Diverged { history, .. }) => (history, None, "diverged".to_string()),
            Err(e) => (Vec::new(), None, status_of(&e.into())),
        };
        let reference = match &budget {
            Some(b) => {
                match estimate_posterior_detailed(problem.model.as_ref(), &exp, &problem.meas, b, MomentOrder::MeanOnly) {
                    Ok(r) => Some(r),
                    Err(e) => {
                        if status == "ok" {
                            status = status_of(&e.into());
                        }
                        None
                    }
                }
            }
            None => None,
        };
        let (err_refined, err_initial, ref_err) = match &reference {
            Some(r) => (
                refined
                    .as_ref()
                    .map_or(f64::NAN, |x| problem.norm.vector(&(x - &r.full.mean))),
                problem.norm.vector(&(exp.x0() - &r.full.mean)),
                problem.norm.vector(&(&r.full.mean - &r.half.mean)),
            ),
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        records.push(RefineRecord {
            alpha,
            iterations: history.len(),
            final_update_norm: history.last().copied().unwrap_or(f64::NAN),
            norm_name,
            error_refined: err_refined,
            error_initial: err_initial,
            reference_error: ref_err,
            reference_kind: cfg.reference.as_str(),
            status,
            wallclock_seconds: cfg.timings.then(|| start.elapsed().as_secs_f64()),
        });
        histories.push(RefineHistory {
            alpha,
            update_norms: history,
        });
    }
    Ok(RefinementReport { records, histories })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// `(α, error)` pairs of one quantity whose error is at least `factor` times
/// the estimated reference error.
pub fn resolved_points(records: &[StudyRecord], quantity: &str, factor: f64) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter(|r| r.quantity == quantity && r.status == "ok")
        .filter(|r| r.error_expansion >= factor * r.reference_error)
        .map(|r| (r.alpha, r.error_expansion))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ReferenceKind;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = (2..7).map(|n| {
            let a = 0.5f64.powi(n);
            (a, 3.0 * a.powi(4))
        }).collect();
        assert!((loglog_slope(&pts).unwrap() - 4.0).abs() < 1e-12);
        assert!(loglog_slope(&pts[..1]).is_none());
    }

    #[test]
    fn empty_alpha_list_gives_no_records() {
        let cfg = StudyConfig {
            alphas: vec![],
            mesh_level: 2,
            reference: ReferenceKind::None,
            ..StudyConfig::default()
        };
        let rep = run_convergence_study(&cfg).unwrap();
        assert!(rep.records.is_empty());
    }

    #[test]
    fn expansion_solves_do_not_grow_with_the_sweep() {
        let base = StudyConfig {
            mesh_level: 2,
            kle_tol: 1e-2,
            reference: ReferenceKind::None,
            prediction: Some(PredictionKind::R2),
            ..StudyConfig::default()
        };
        let one = run_convergence_study(&StudyConfig {
            alphas: vec![0.5],
            ..base.clone()
        })
        .unwrap();
        let many = run_convergence_study(&base).unwrap();
        assert_eq!(one.expansion_model_calls, 1);
        assert_eq!(many.expansion_model_calls, one.expansion_model_calls);
        assert_eq!(many.records.len(), 3 * base.alphas.len());
    }

    #[test]
    fn failures_are_recorded_per_row() {
        // far too few quadrature nodes are rejected by the estimator, not the sweep
        let cfg = StudyConfig {
            mesh_level: 2,
            kle_tol: 1e-2,
            alphas: vec![0.5, 0.25],
            reference: ReferenceKind::Quadrature,
            quadrature_nodes: 2,
            ..StudyConfig::default()
        };
        let rep = run_convergence_study(&cfg).unwrap();
        assert_eq!(rep.records.len(), 6);
        assert!(rep.records.iter().all(|r| r.status.starts_with("failed")));
    }
}
