//! The contract forward models implement so the expansion, refinement and
//! sampling code stays model-agnostic.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::SpdMatrix;
use crate::prior::{AffineExpansion, CoefficientLaw};

/// Observed data `δ` and the noise covariance `Σ`.
#[derive(Debug, Clone)]
pub struct MeasurementSetup {
    pub data: DVector<f64>,
    pub sigma: SpdMatrix,
}

impl MeasurementSetup {
    pub fn new(data: DVector<f64>, sigma: SpdMatrix) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidInput("measurement vector is empty".into()));
        }
        if data.len() != sigma.dim() {
            return Err(Error::dim("noise covariance", data.len(), sigma.dim()));
        }
        Ok(Self { data, sigma })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Potential `½‖δ - q‖²_Σ`.
    pub fn potential(&self, q: &DVector<f64>) -> Result<f64> {
        if q.len() != self.len() {
            return Err(Error::dim("measurement", self.len(), q.len()));
        }
        let r = &self.data - q;
        let w = self.sigma.whiten(&r)?;
        Ok(0.5 * w.norm_squared())
    }
}

/// Measurement and prediction of one full model solve.
#[derive(Debug, Clone)]
pub struct Response {
    pub measurement: DVector<f64>,
    pub prediction: DVector<f64>,
}

/// Model derivatives at a reference point along unit (un-scaled) modes.
#[derive(Debug, Clone)]
pub struct ModelEvaluations {
    pub q0: DVector<f64>,
    pub dq_modes: Vec<DVector<f64>>,
    pub r0: DVector<f64>,
    pub dr_modes: Vec<DVector<f64>>,
    /// `D²R[xᵢ, xᵢ]`; `None` only for affine predictions.
    pub d2r_diag: Option<Vec<DVector<f64>>>,
    /// `D²R[m, m]` for the mean direction `m = Σ E[zᵢ] xᵢ`; `None` only for
    /// affine predictions.
    pub d2r_meandir: Option<DVector<f64>>,
    pub prediction_affine: bool,
    pub reference: DVector<f64>,
}

impl ModelEvaluations {
    pub fn modes(&self) -> usize {
        self.dq_modes.len()
    }

    pub fn measurement_dim(&self) -> usize {
        self.q0.len()
    }

    pub fn prediction_dim(&self) -> usize {
        self.r0.len()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let m = self.dq_modes.len();
        let k = self.q0.len();
        let z = self.r0.len();
        if self.dr_modes.len() != m {
            return Err(Error::dim("prediction derivatives", m, self.dr_modes.len()));
        }
        if let Some(v) = self.dq_modes.iter().find(|v| v.len() != k) {
            return Err(Error::dim("measurement derivative", k, v.len()));
        }
        if let Some(v) = self.dr_modes.iter().find(|v| v.len() != z) {
            return Err(Error::dim("prediction derivative", z, v.len()));
        }
        if let Some(d2) = &self.d2r_diag {
            if d2.len() != m {
                return Err(Error::dim("second derivatives", m, d2.len()));
            }
            if let Some(v) = d2.iter().find(|v| v.len() != z) {
                return Err(Error::dim("second derivative", z, v.len()));
            }
        }
        if let Some(v) = &self.d2r_meandir {
            if v.len() != z {
                return Err(Error::dim("mean-direction second derivative", z, v.len()));
            }
        }
        Ok(())
    }
}

pub trait ForwardModel: Sync {
    fn name(&self) -> &str;
    fn parameter_dim(&self) -> usize;
    fn measurement_dim(&self) -> usize;
    fn prediction_dim(&self) -> usize;
    /// `true` when `R` is affine in the parameter, so `D²R ≡ 0`.
    fn prediction_is_affine(&self) -> bool;

    /// Full nonlinear solve at `x`.
    fn evaluate(&self, x: &DVector<f64>) -> Result<Response>;

    /// `Q(x)` and `D_x Q[d]` for every direction `d`.
    fn linearize_measurement(
        &self,
        x: &DVector<f64>,
        directions: &[DVector<f64>],
    ) -> Result<(DVector<f64>, Vec<DVector<f64>>)>;

    /// All derivative data consumed by the second-order expansions.
    ///
    /// `mean_direction` is `None` when the prior is centered; the returned
    /// `d2r_meandir` is then zero.
    fn derivatives(
        &self,
        reference: &DVector<f64>,
        modes: &[DVector<f64>],
        mean_direction: Option<&DVector<f64>>,
    ) -> Result<ModelEvaluations>;
}

/// Derivative data at `reference` for the modes and laws of `expansion`.
pub fn evaluate_at<M: ForwardModel + ?Sized>(
    model: &M,
    expansion: &AffineExpansion,
    reference: &DVector<f64>,
) -> Result<ModelEvaluations> {
    if reference.len() != model.parameter_dim() {
        return Err(Error::dim("reference", model.parameter_dim(), reference.len()));
    }
    if expansion.dim() != model.parameter_dim() {
        return Err(Error::dim("expansion modes", model.parameter_dim(), expansion.dim()));
    }
    let mean_dir = expansion.mean_direction();
    let mean_dir = (mean_dir.amax() > 0.0).then_some(mean_dir);
    let evals = model.derivatives(reference, expansion.modes(), mean_dir.as_ref())?;
    evals.validate()?;
    Ok(evals)
}

/// `(ν₀, δ - q₀)` with `ν₀ = exp(-½‖δ - q₀‖²_Σ)`.
pub fn likelihood_terms(
    evals: &ModelEvaluations,
    meas: &MeasurementSetup,
) -> Result<(f64, DVector<f64>)> {
    if evals.q0.len() != meas.len() {
        return Err(Error::dim("measurement", meas.len(), evals.q0.len()));
    }
    let residual = &meas.data - &evals.q0;
    let nu0 = (-meas.potential(&evals.q0)?).exp();
    Ok((nu0, residual))
}

/// Draws one unit-domain coefficient vector for `laws`.
pub(crate) fn draw_unit<R: Rng>(rng: &mut R, laws: &[CoefficientLaw]) -> Vec<f64> {
    laws.iter()
        .map(|law| {
            if law.is_uniform() {
                rng.random_range(-1.0..=1.0)
            } else {
                rng.sample(StandardNormal)
            }
        })
        .collect()
}

/// Synthetic data: a prior draw as ground truth, its exact measurement, and
/// additive `N(0, Σ)` noise. Returns the setup and the ground-truth parameter.
pub fn generate_data<M: ForwardModel + ?Sized>(
    model: &M,
    expansion: &AffineExpansion,
    sigma: &SpdMatrix,
    seed: u64,
) -> Result<(MeasurementSetup, DVector<f64>)> {
    if sigma.dim() != model.measurement_dim() {
        return Err(Error::dim("noise covariance", model.measurement_dim(), sigma.dim()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = draw_unit(&mut rng, expansion.laws());
    let truth = expansion.realize(&draws)?;
    let q = model.evaluate(&truth)?.measurement;
    let white = DVector::from_iterator(q.len(), (0..q.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let data = q + sigma.factor() * white;
    Ok((MeasurementSetup::new(data, sigma.clone())?, truth))
}

/// Counts the calls into a wrapped model.
pub struct CountingModel<'a, M: ?Sized> {
    inner: &'a M,
    evaluations: AtomicUsize,
    linearizations: AtomicUsize,
    derivative_batches: AtomicUsize,
}

impl<'a, M: ForwardModel + ?Sized> CountingModel<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self {
            inner,
            evaluations: AtomicUsize::new(0),
            linearizations: AtomicUsize::new(0),
            derivative_batches: AtomicUsize::new(0),
        }
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn linearizations(&self) -> usize {
        self.linearizations.load(Ordering::Relaxed)
    }

    pub fn derivative_batches(&self) -> usize {
        self.derivative_batches.load(Ordering::Relaxed)
    }

    pub fn total(&self) -> usize {
        self.evaluations() + self.linearizations() + self.derivative_batches()
    }
}

impl<M: ForwardModel + ?Sized> ForwardModel for CountingModel<'_, M> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn parameter_dim(&self) -> usize {
        self.inner.parameter_dim()
    }
    fn measurement_dim(&self) -> usize {
        self.inner.measurement_dim()
    }
    fn prediction_dim(&self) -> usize {
        self.inner.prediction_dim()
    }
    fn prediction_is_affine(&self) -> bool {
        self.inner.prediction_is_affine()
    }
    fn evaluate(&self, x: &DVector<f64>) -> Result<Response> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate(x)
    }
    fn linearize_measurement(
        &self,
        x: &DVector<f64>,
        directions: &[DVector<f64>],
    ) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        self.linearizations.fetch_add(1, Ordering::Relaxed);
        self.inner.linearize_measurement(x, directions)
    }
    fn derivatives(
        &self,
        reference: &DVector<f64>,
        modes: &[DVector<f64>],
        mean_direction: Option<&DVector<f64>>,
    ) -> Result<ModelEvaluations> {
        self.derivative_batches.fetch_add(1, Ordering::Relaxed);
        self.inner.derivatives(reference, modes, mean_direction)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::AffineToy;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn evals_with_q0(q0: DVector<f64>) -> ModelEvaluations {
        ModelEvaluations {
            dq_modes: vec![DVector::zeros(q0.len())],
            q0,
            r0: DVector::zeros(1),
            dr_modes: vec![DVector::zeros(1)],
            d2r_diag: None,
            d2r_meandir: None,
            prediction_affine: true,
            reference: DVector::zeros(1),
        }
    }

    #[test]
    fn likelihood_zero_and_unit_residual() {
        let q0 = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let meas = MeasurementSetup::new(q0.clone(), SpdMatrix::identity(3)).unwrap();
        let (nu, r) = likelihood_terms(&evals_with_q0(q0.clone()), &meas).unwrap();
        assert_eq!(nu, 1.0);
        assert_eq!(r.norm(), 0.0);

        let mut data = q0.clone();
        data[0] += 1.0;
        let meas = MeasurementSetup::new(data, SpdMatrix::identity(3)).unwrap();
        let (nu, _) = likelihood_terms(&evals_with_q0(q0), &meas).unwrap();
        assert_relative_eq!(nu, (-0.5f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn likelihood_darcy_sigma_against_inverse() {
        let sigma = crate::darcy::darcy_noise_covariance();
        let inv = sigma.matrix().clone().try_inverse().unwrap();
        let q0 = DVector::from_vec(vec![0.01, 0.02, 0.0, -0.01, 0.03]);
        let data = DVector::from_vec(vec![0.05, 0.0, 0.02, 0.01, 0.0]);
        let r = &data - &q0;
        let expected = (-0.5 * (&inv * &r).dot(&r)).exp();
        let meas = MeasurementSetup::new(data, sigma).unwrap();
        let (nu, res) = likelihood_terms(&evals_with_q0(q0), &meas).unwrap();
        assert_relative_eq!(nu, expected, max_relative = 1e-12);
        assert_eq!(res, r);
        assert!(nu > 0.0 && nu <= 1.0);
    }

    #[test]
    fn likelihood_permutation_invariance() {
        let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0]);
        let q0 = DVector::from_vec(vec![0.1, 0.7, -0.3]);
        let data = DVector::from_vec(vec![0.5, 0.2, 0.4]);
        let perm = [2, 0, 1];
        let sp = DMatrix::from_fn(3, 3, |i, j| sigma[(perm[i], perm[j])]);
        let qp = DVector::from_fn(3, |i, _| q0[perm[i]]);
        let dp = DVector::from_fn(3, |i, _| data[perm[i]]);
        let a = likelihood_terms(
            &evals_with_q0(q0),
            &MeasurementSetup::new(data, SpdMatrix::new(sigma).unwrap()).unwrap(),
        )
        .unwrap()
        .0;
        let b = likelihood_terms(
            &evals_with_q0(qp),
            &MeasurementSetup::new(dp, SpdMatrix::new(sp).unwrap()).unwrap(),
        )
        .unwrap()
        .0;
        assert_relative_eq!(a, b, max_relative = 1e-13);
    }

    #[test]
    fn affine_prediction_has_no_second_derivatives() {
        let toy = AffineToy::new(1.0, 2.0);
        let exp = AffineExpansion::new(
            DVector::zeros(1),
            vec![DVector::from_element(1, 1.0)],
            vec![CoefficientLaw::UniformShifted { halfwidth: 1.0, offset: 0.2 }],
            0.5,
        )
        .unwrap();
        let ev = evaluate_at(&toy, &exp, &DVector::zeros(1)).unwrap();
        assert!(ev.prediction_affine);
        assert!(ev.d2r_diag.is_none() && ev.d2r_meandir.is_none());
    }

    #[test]
    fn generated_data_is_deterministic_and_noiseless_in_the_limit() {
        let toy = AffineToy::new(0.5, 2.0);
        let exp = AffineExpansion::new(
            DVector::zeros(1),
            vec![DVector::from_element(1, 1.0)],
            vec![CoefficientLaw::StandardNormal],
            0.3,
        )
        .unwrap();
        let s = SpdMatrix::identity(1);
        let (a, ta) = generate_data(&toy, &exp, &s, 11).unwrap();
        let (b, tb) = generate_data(&toy, &exp, &s, 11).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(ta, tb);

        let tiny = SpdMatrix::new(DMatrix::from_element(1, 1, 1e-24)).unwrap();
        let (m, truth) = generate_data(&toy, &exp, &tiny, 3).unwrap();
        let q = toy.evaluate(&truth).unwrap().measurement;
        assert!((m.data[0] - q[0]).abs() < 1e-10);
    }

    #[test]
    fn generated_noise_has_requested_covariance() {
        let toy = AffineToy::new(0.0, 1.0);
        let exp = AffineExpansion::new(
            DVector::zeros(1),
            vec![DVector::from_element(1, 1.0)],
            vec![CoefficientLaw::StandardNormal],
            1.0,
        )
        .unwrap();
        // two-dimensional noise through a 2-output wrapper
        let sigma = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0])).unwrap();
        let model = crate::toy::Replicated { inner: &toy, copies: 2 };
        let n = 10_000;
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for seed in 0..n {
            let (m, truth) = generate_data(&model, &exp, &sigma, seed).unwrap();
            let e = &m.data - model.evaluate(&truth).unwrap().measurement;
            acc += &e * e.transpose();
        }
        acc /= n as f64;
        for (got, want) in acc.iter().zip(sigma.matrix().iter()) {
            // sd of a sample covariance entry is below sqrt(2·2·2/n) ≈ 0.028
            assert!((got - want).abs() < 0.1, "{got} vs {want}");
        }
    }
}
