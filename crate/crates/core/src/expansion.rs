//! Second-order perturbation approximations of posterior moments.
//!
//! All derivative data is taken along the un-scaled modes; the amplitude `α`
//! is applied here, one power per derivative order, so a whole `α`-sweep
//! reuses a single set of model solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{MeasurementSetup, ModelEvaluations};
use crate::prior::{coefficient_moments, CoefficientLaw, CoefficientMoments};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentSource {
    Expansion,
    Qmc,
    Mc,
    Quadrature,
}

impl MomentSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            MomentSource::Expansion => "expansion",
            MomentSource::Qmc => "qmc",
            MomentSource::Mc => "mc",
            MomentSource::Quadrature => "quadrature",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentOrder {
    MeanOnly,
    Full,
}

#[derive(Debug, Clone)]
pub struct PosteriorMoments {
    pub mean: DVector<f64>,
    pub correlation: Option<DMatrix<f64>>,
    pub covariance: Option<DMatrix<f64>>,
    pub centered: bool,
    pub source: MomentSource,
}

/// Per-mode pieces shared by the three approximations.
struct Terms<'a> {
    evals: &'a ModelEvaluations,
    moments: Vec<CoefficientMoments>,
    alpha: f64,
    /// `⟨δ - q₀, D Q[xᵢ]⟩_Σ`
    couplings: Vec<f64>,
    d2r_diag: Vec<DVector<f64>>,
    d2r_meandir: DVector<f64>,
}

impl<'a> Terms<'a> {
    fn new(
        evals: &'a ModelEvaluations,
        meas: Option<&MeasurementSetup>,
        laws: &[CoefficientLaw],
        alpha: f64,
    ) -> Result<Self> {
        evals.validate()?;
        if laws.len() != evals.modes() {
            return Err(Error::dim("coefficient laws", evals.modes(), laws.len()));
        }
        if !(alpha > 0.0) {
            return Err(Error::InvalidInput(format!("alpha must be positive, got {alpha}")));
        }
        let moments: Vec<_> = laws.iter().map(coefficient_moments).collect();
        let couplings = match meas {
            Some(meas) => {
                if meas.len() != evals.measurement_dim() {
                    return Err(Error::dim("measurement", evals.measurement_dim(), meas.len()));
                }
                let w = meas.sigma.solve(&(&meas.data - &evals.q0))?;
                evals.dq_modes.iter().map(|dq| w.dot(dq)).collect()
            }
            None => vec![0.0; evals.modes()],
        };
        let z = evals.prediction_dim();
        let (d2r_diag, d2r_meandir) = match (&evals.d2r_diag, &evals.d2r_meandir) {
            (Some(d), Some(m)) => (d.clone(), m.clone()),
            (Some(d), None) if moments.iter().all(|m| m.mean == 0.0) => {
                (d.clone(), DVector::zeros(z))
            }
            _ if evals.prediction_affine => {
                (vec![DVector::zeros(z); evals.modes()], DVector::zeros(z))
            }
            _ => return Err(Error::MissingSecondDerivatives),
        };
        Ok(Self {
            evals,
            moments,
            alpha,
            couplings,
            d2r_diag,
            d2r_meandir,
        })
    }

    fn centered(&self) -> bool {
        self.moments.iter().all(|m| m.mean == 0.0)
    }

    /// `α Σ E[zᵢ] D R[xᵢ]`.
    fn mean_shift(&self) -> DVector<f64> {
        let mut s = DVector::zeros(self.evals.prediction_dim());
        if self.centered() {
            return s;
        }
        for (m, dr) in self.moments.iter().zip(&self.evals.dr_modes) {
            s.axpy(self.alpha * m.mean, dr, 1.0);
        }
        s
    }

    /// `α² (Σ Var[zᵢ] D²R[xᵢ] + D²R[m])`.
    fn second_order(&self) -> DVector<f64> {
        let a2 = self.alpha * self.alpha;
        let mut t = DVector::zeros(self.evals.prediction_dim());
        for (m, d2) in self.moments.iter().zip(&self.d2r_diag) {
            t.axpy(a2 * m.variance, d2, 1.0);
        }
        if !self.centered() {
            t.axpy(a2, &self.d2r_meandir, 1.0);
        }
        t
    }

    /// `α² Σ Var[zᵢ] D R[xᵢ] ⟨δ - q₀, D Q[xᵢ]⟩_Σ`.
    fn data_coupling(&self) -> DVector<f64> {
        let a2 = self.alpha * self.alpha;
        let mut g = DVector::zeros(self.evals.prediction_dim());
        for ((m, c), dr) in self.moments.iter().zip(&self.couplings).zip(&self.evals.dr_modes) {
            g.axpy(a2 * m.variance * c, dr, 1.0);
        }
        g
    }

    fn mean(&self) -> DVector<f64> {
        let mut mean = self.evals.r0.clone();
        mean += self.mean_shift();
        mean.axpy(0.5, &self.second_order(), 1.0);
        mean += self.data_coupling();
        mean
    }

    /// `α² Σ Var[zᵢ] D R[xᵢ] ⊗ D R[xᵢ]`.
    fn covariance(&self) -> DMatrix<f64> {
        let z = self.evals.prediction_dim();
        let a2 = self.alpha * self.alpha;
        let mut c = DMatrix::zeros(z, z);
        for (m, dr) in self.moments.iter().zip(&self.evals.dr_modes) {
            c.ger(a2 * m.variance, dr, dr, 1.0);
        }
        symmetrize(c)
    }

    fn correlation(&self) -> DMatrix<f64> {
        let r0 = &self.evals.r0;
        let s = self.mean_shift();
        // every term that multiplies R₀ in a tensor product
        let mut first = s.clone();
        first.axpy(0.5, &self.second_order(), 1.0);
        first += self.data_coupling();

        let mut c = self.covariance();
        c.ger(1.0, r0, r0, 1.0);
        c.ger(1.0, &first, r0, 1.0);
        c.ger(1.0, r0, &first, 1.0);
        c.ger(1.0, &s, &s, 1.0);
        symmetrize(c)
    }
}

fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()) * 0.5
}

pub fn expand_posterior_mean(
    evals: &ModelEvaluations,
    meas: &MeasurementSetup,
    laws: &[CoefficientLaw],
    alpha: f64,
) -> Result<DVector<f64>> {
    Ok(Terms::new(evals, Some(meas), laws, alpha)?.mean())
}

pub fn expand_posterior_correlation(
    evals: &ModelEvaluations,
    meas: &MeasurementSetup,
    laws: &[CoefficientLaw],
    alpha: f64,
) -> Result<DMatrix<f64>> {
    Ok(Terms::new(evals, Some(meas), laws, alpha)?.correlation())
}

/// Leading-order posterior covariance; independent of the data.
pub fn expand_posterior_covariance(
    evals: &ModelEvaluations,
    laws: &[CoefficientLaw],
    alpha: f64,
) -> Result<DMatrix<f64>> {
    Ok(Terms::new(evals, None, laws, alpha)?.covariance())
}

pub fn expand_posterior(
    evals: &ModelEvaluations,
    meas: &MeasurementSetup,
    laws: &[CoefficientLaw],
    alpha: f64,
    order: MomentOrder,
) -> Result<PosteriorMoments> {
    let terms = Terms::new(evals, Some(meas), laws, alpha)?;
    let (correlation, covariance) = match order {
        MomentOrder::MeanOnly => (None, None),
        MomentOrder::Full => (Some(terms.correlation()), Some(terms.covariance())),
    };
    Ok(PosteriorMoments {
        mean: terms.mean(),
        correlation,
        covariance,
        centered: terms.centered(),
        source: MomentSource::Expansion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SpdMatrix;
    use crate::model::{evaluate_at, ForwardModel};
    use crate::prior::AffineExpansion;
    use crate::toy::{toy_modes, toy_sigma, AffineToy, NonlinearToy};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn conjugate_case(s2: f64) -> (ModelEvaluations, MeasurementSetup, Vec<CoefficientLaw>, f64) {
        let toy = AffineToy::new(0.0, 1.0);
        let exp = AffineExpansion::new(
            DVector::zeros(1),
            vec![DVector::from_element(1, 1.0)],
            vec![CoefficientLaw::StandardNormal],
            s2.sqrt(),
        )
        .unwrap();
        let ev = evaluate_at(&toy, &exp, &DVector::zeros(1)).unwrap();
        let meas =
            MeasurementSetup::new(DVector::from_element(1, 0.1), SpdMatrix::identity(1)).unwrap();
        (ev, meas, exp.laws().to_vec(), exp.alpha())
    }

    fn toy_case(offset: Option<f64>, data: [f64; 2]) -> (ModelEvaluations, MeasurementSetup, Vec<CoefficientLaw>) {
        let laws: Vec<_> = [0.8, 0.5]
            .iter()
            .map(|&h| match offset {
                Some(c) => CoefficientLaw::UniformShifted { halfwidth: h, offset: c },
                None => CoefficientLaw::UniformSymmetric { halfwidth: h },
            })
            .collect();
        let x0 = DVector::from_vec(vec![0.1, -0.2]);
        let exp = AffineExpansion::new(x0.clone(), toy_modes(), laws.clone(), 1.0).unwrap();
        let ev = evaluate_at(&NonlinearToy, &exp, &x0).unwrap();
        let meas = MeasurementSetup::new(
            DVector::from_vec(data.to_vec()),
            SpdMatrix::new(toy_sigma()).unwrap(),
        )
        .unwrap();
        (ev, meas, laws)
    }

    #[test]
    fn zero_derivatives_reduce_to_reference() {
        let (mut ev, meas, laws) = toy_case(Some(0.2), [0.3, -0.1]);
        for v in ev.dq_modes.iter_mut().chain(ev.dr_modes.iter_mut()) {
            v.fill(0.0);
        }
        ev.d2r_diag.as_mut().unwrap().iter_mut().for_each(|v| v.fill(0.0));
        ev.d2r_meandir.as_mut().unwrap().fill(0.0);
        let m = expand_posterior_mean(&ev, &meas, &laws, 0.7).unwrap();
        assert_eq!(m, ev.r0);
        let c = expand_posterior_correlation(&ev, &meas, &laws, 0.7).unwrap();
        assert_eq!(c, &ev.r0 * ev.r0.transpose());
        let k = expand_posterior_covariance(&ev, &laws, 0.7).unwrap();
        assert_eq!(k.amax(), 0.0);
    }

    #[test]
    fn conjugate_gaussian_mean_and_second_moment() {
        let s2 = 0.01;
        let (ev, meas, laws, alpha) = conjugate_case(s2);
        let m = expand_posterior_mean(&ev, &meas, &laws, alpha).unwrap();
        assert_relative_eq!(m[0], 0.001, max_relative = 1e-12);
        let toy = AffineToy::new(0.0, 1.0);
        let exact = toy.posterior_mean(s2, 1.0, 0.1);
        assert_relative_eq!(exact, 0.1 * 0.01 / 1.01, max_relative = 1e-14);
        assert!(((m[0] - exact) - 9.90099e-6).abs() < 1e-10);

        // E_post[z²] = var + mean², and the expansion carries s² to leading order
        let c = expand_posterior_correlation(&ev, &meas, &laws, alpha).unwrap();
        let exact2 = toy.posterior_variance(s2, 1.0) + exact * exact;
        assert!((c[(0, 0)] - exact2).abs() <= 2.0 * s2 * s2);
    }

    #[test]
    fn covariance_formula_single_mode() {
        let lam: f64 = 0.6;
        let alpha = 0.3;
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let ev = ModelEvaluations {
            q0: DVector::zeros(1),
            dq_modes: vec![DVector::zeros(1)],
            r0: DVector::zeros(3),
            dr_modes: vec![v.clone()],
            d2r_diag: None,
            d2r_meandir: None,
            prediction_affine: true,
            reference: DVector::zeros(1),
        };
        let laws = [CoefficientLaw::UniformSymmetric { halfwidth: lam.sqrt() }];
        let k = expand_posterior_covariance(&ev, &laws, alpha).unwrap();
        let expected = &v * v.transpose() * (lam * alpha * alpha / 3.0);
        assert!((k - expected).amax() < 1e-15);
    }

    #[test]
    fn missing_second_derivatives_is_an_error() {
        let (mut ev, meas, laws) = toy_case(None, [0.0, 0.0]);
        ev.d2r_diag = None;
        ev.d2r_meandir = None;
        assert!(matches!(
            expand_posterior_mean(&ev, &meas, &laws, 0.5),
            Err(Error::MissingSecondDerivatives)
        ));
        assert!(matches!(
            expand_posterior_mean(&ev, &meas, &laws[..1], 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn centered_mean_term_by_term() {
        let (ev, meas, laws) = toy_case(None, [0.4, 0.2]);
        let alpha = 0.37;
        let m = expand_posterior_mean(&ev, &meas, &laws, alpha).unwrap();
        let w = meas.sigma.solve(&(&meas.data - &ev.q0)).unwrap();
        let mut expected = ev.r0.clone();
        for i in 0..2 {
            let var = laws[i].moments().variance;
            expected += &ev.d2r_diag.as_ref().unwrap()[i] * (0.5 * var * alpha * alpha);
            expected += &ev.dr_modes[i] * (var * alpha * alpha * w.dot(&ev.dq_modes[i]));
        }
        assert!((m - expected).amax() < 1e-15);
    }

    #[test]
    fn alpha_scaling_is_polynomial() {
        let (ev, meas, laws) = toy_case(Some(0.2), [0.4, 0.2]);
        let t = 0.5;
        let a = 0.8;
        // mean(α) = r0 + α·A + α²·B exactly
        let m1 = expand_posterior_mean(&ev, &meas, &laws, a).unwrap() - &ev.r0;
        let m2 = expand_posterior_mean(&ev, &meas, &laws, t * a).unwrap() - &ev.r0;
        let m3 = expand_posterior_mean(&ev, &meas, &laws, 2.0 * a).unwrap() - &ev.r0;
        // recover A, B from α and 2α, predict tα
        let b = (&m3 - &m1 * 2.0) / (2.0 * a * a);
        let lin = (&m1 - &b * (a * a)) / a;
        let pred = &lin * (t * a) + &b * (t * a * t * a);
        assert!((m2 - pred).amax() < 1e-13);
    }

    #[test]
    fn covariance_ignores_data() {
        let (ev, _, laws) = toy_case(Some(0.1), [0.0, 0.0]);
        let a = expand_posterior_covariance(&ev, &laws, 0.4).unwrap();
        let (ev2, _, _) = toy_case(Some(0.1), [5.0, -3.0]);
        let b = expand_posterior_covariance(&ev2, &laws, 0.4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uncentered_correlation_term_by_term() {
        let (ev, meas, laws) = toy_case(Some(0.15), [0.4, 0.2]);
        let alpha = 0.6;
        let a2 = alpha * alpha;
        let w = meas.sigma.solve(&(&meas.data - &ev.q0)).unwrap();
        let r0 = &ev.r0;
        let mom: Vec<_> = laws.iter().map(|l| l.moments()).collect();
        let shift: DVector<f64> = (0..2).map(|i| &ev.dr_modes[i] * (alpha * mom[i].mean)).sum();
        let d2: DVector<f64> = (0..2)
            .map(|i| &ev.d2r_diag.as_ref().unwrap()[i] * (a2 * mom[i].variance))
            .sum::<DVector<f64>>()
            + ev.d2r_meandir.as_ref().unwrap() * a2;
        let mut expected = r0 * r0.transpose()
            + &shift * r0.transpose()
            + r0 * shift.transpose()
            + (&d2 * r0.transpose() + r0 * d2.transpose()) * 0.5
            + &shift * shift.transpose();
        for i in 0..2 {
            let dr = &ev.dr_modes[i];
            expected += dr * dr.transpose() * (a2 * mom[i].variance);
            expected += (dr * r0.transpose() + r0 * dr.transpose())
                * (a2 * mom[i].variance * w.dot(&ev.dq_modes[i]));
        }
        let c = expand_posterior_correlation(&ev, &meas, &laws, alpha).unwrap();
        assert!((&c - expected).amax() < 1e-14);
        assert!((&c - c.transpose()).amax() == 0.0);
    }

    proptest! {
        #[test]
        fn covariance_is_psd(h0 in 0.01f64..2.0, h1 in 0.01f64..2.0, alpha in 0.01f64..1.5) {
            let laws = [
                CoefficientLaw::UniformSymmetric { halfwidth: h0 },
                CoefficientLaw::UniformSymmetric { halfwidth: h1 },
            ];
            let x0 = DVector::from_vec(vec![0.1, -0.2]);
            let ev = NonlinearToy.derivatives(&x0, &toy_modes(), None).unwrap();
            let k = expand_posterior_covariance(&ev, &laws, alpha).unwrap();
            let eig = k.clone().symmetric_eigen();
            prop_assert!(eig.eigenvalues.min() >= -1e-12 * k.amax().max(1e-300));
        }
    }
}
