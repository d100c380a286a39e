//! Small closed-form models used as oracles for the expansions and the
//! sampling estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ForwardModel, ModelEvaluations, Response};

/// `Q(x) = q0 + q1·x`, `R(x) = x` on a scalar parameter.
///
/// With a centered Gaussian prior of variance `s²` and noise variance `σ²`
/// the posterior is Gaussian with mean `s² q1 (δ - q0) / (σ² + q1² s²)`.
#[derive(Debug, Clone)]
pub struct AffineToy {
    pub q0: f64,
    pub q1: f64,
}

impl AffineToy {
    pub fn new(q0: f64, q1: f64) -> Self {
        Self { q0, q1 }
    }

    pub fn posterior_mean(&self, prior_var: f64, noise_var: f64, data: f64) -> f64 {
        prior_var * self.q1 * (data - self.q0) / (noise_var + self.q1 * self.q1 * prior_var)
    }

    pub fn posterior_variance(&self, prior_var: f64, noise_var: f64) -> f64 {
        prior_var * noise_var / (noise_var + self.q1 * self.q1 * prior_var)
    }
}

fn scalar(x: &DVector<f64>) -> Result<f64> {
    if x.len() != 1 {
        return Err(Error::dim("parameter", 1, x.len()));
    }
    Ok(x[0])
}

impl ForwardModel for AffineToy {
    fn name(&self) -> &str {
        "affine-toy"
    }
    fn parameter_dim(&self) -> usize {
        1
    }
    fn measurement_dim(&self) -> usize {
        1
    }
    fn prediction_dim(&self) -> usize {
        1
    }
    fn prediction_is_affine(&self) -> bool {
        true
    }
    fn evaluate(&self, x: &DVector<f64>) -> Result<Response> {
        let v = scalar(x)?;
        Ok(Response {
            measurement: DVector::from_element(1, self.q0 + self.q1 * v),
            prediction: DVector::from_element(1, v),
        })
    }
    fn linearize_measurement(
        &self,
        x: &DVector<f64>,
        directions: &[DVector<f64>],
    ) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        let v = scalar(x)?;
        let dq = directions
            .iter()
            .map(|d| Ok(DVector::from_element(1, self.q1 * scalar(d)?)))
            .collect::<Result<_>>()?;
        Ok((DVector::from_element(1, self.q0 + self.q1 * v), dq))
    }
    fn derivatives(
        &self,
        reference: &DVector<f64>,
        modes: &[DVector<f64>],
        _mean_direction: Option<&DVector<f64>>,
    ) -> Result<ModelEvaluations> {
        let (q0, dq_modes) = self.linearize_measurement(reference, modes)?;
        Ok(ModelEvaluations {
            q0,
            dq_modes,
            r0: reference.clone(),
            dr_modes: modes.to_vec(),
            d2r_diag: None,
            d2r_meandir: None,
            prediction_affine: true,
            reference: reference.clone(),
        })
    }
}

/// Repeats the measurement of an inner model `copies` times.
pub struct Replicated<'a, M: ?Sized> {
    pub inner: &'a M,
    pub copies: usize,
}

impl<M: ForwardModel + ?Sized> ForwardModel for Replicated<'_, M> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn parameter_dim(&self) -> usize {
        self.inner.parameter_dim()
    }
    fn measurement_dim(&self) -> usize {
        self.inner.measurement_dim() * self.copies
    }
    fn prediction_dim(&self) -> usize {
        self.inner.prediction_dim()
    }
    fn prediction_is_affine(&self) -> bool {
        self.inner.prediction_is_affine()
    }
    fn evaluate(&self, x: &DVector<f64>) -> Result<Response> {
        let r = self.inner.evaluate(x)?;
        Ok(Response {
            measurement: repeat(&r.measurement, self.copies),
            prediction: r.prediction,
        })
    }
    fn linearize_measurement(
        &self,
        x: &DVector<f64>,
        directions: &[DVector<f64>],
    ) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        let (q, dq) = self.inner.linearize_measurement(x, directions)?;
        Ok((
            repeat(&q, self.copies),
            dq.iter().map(|d| repeat(d, self.copies)).collect(),
        ))
    }
    fn derivatives(
        &self,
        reference: &DVector<f64>,
        modes: &[DVector<f64>],
        mean_direction: Option<&DVector<f64>>,
    ) -> Result<ModelEvaluations> {
        let mut ev = self.inner.derivatives(reference, modes, mean_direction)?;
        ev.q0 = repeat(&ev.q0, self.copies);
        ev.dq_modes = ev.dq_modes.iter().map(|d| repeat(d, self.copies)).collect();
        Ok(ev)
    }
}

fn repeat(v: &DVector<f64>, copies: usize) -> DVector<f64> {
    DVector::from_iterator(v.len() * copies, (0..copies).flat_map(|_| v.iter().copied()))
}

/// Smooth two-parameter model with closed-form gradients and Hessians.
///
/// ```text
/// Q(x) = [ x₁ + x₂/2 + 0.3 x₁²,  sin x₂ + 0.4 x₁ x₂ ]
/// R(x) = [ exp(x₁/2),  x₁ x₂ + x₂,  cos x₁ + x₂²/2 ]
/// ```
#[derive(Debug, Clone, Default)]
pub struct NonlinearToy;

type Component = (f64, [f64; 2], [[f64; 2]; 2]);

impl NonlinearToy {
    fn q_components(x: [f64; 2]) -> [Component; 2] {
        let [a, b] = x;
        [
            (a + 0.5 * b + 0.3 * a * a, [1.0 + 0.6 * a, 0.5], [[0.6, 0.0], [0.0, 0.0]]),
            (
                b.sin() + 0.4 * a * b,
                [0.4 * b, b.cos() + 0.4 * a],
                [[0.0, 0.4], [0.4, -b.sin()]],
            ),
        ]
    }

    fn r_components(x: [f64; 2]) -> [Component; 3] {
        let [a, b] = x;
        let e = (0.5 * a).exp();
        [
            (e, [0.5 * e, 0.0], [[0.25 * e, 0.0], [0.0, 0.0]]),
            (a * b + b, [b, a + 1.0], [[0.0, 1.0], [1.0, 0.0]]),
            (a.cos() + 0.5 * b * b, [-a.sin(), b], [[-a.cos(), 0.0], [0.0, 1.0]]),
        ]
    }

    fn point(x: &DVector<f64>) -> Result<[f64; 2]> {
        if x.len() != 2 {
            return Err(Error::dim("parameter", 2, x.len()));
        }
        Ok([x[0], x[1]])
    }
}

fn directional(c: &[Component], d: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(c.len(), c.iter().map(|(_, g, _)| g[0] * d[0] + g[1] * d[1]))
}

fn second(c: &[Component], d: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        c.len(),
        c.iter().map(|(_, _, h)| {
            h[0][0] * d[0] * d[0] + 2.0 * h[0][1] * d[0] * d[1] + h[1][1] * d[1] * d[1]
        }),
    )
}

fn values(c: &[Component]) -> DVector<f64> {
    DVector::from_iterator(c.len(), c.iter().map(|(v, _, _)| *v))
}

impl ForwardModel for NonlinearToy {
    fn name(&self) -> &str {
        "nonlinear-toy"
    }
    fn parameter_dim(&self) -> usize {
        2
    }
    fn measurement_dim(&self) -> usize {
        2
    }
    fn prediction_dim(&self) -> usize {
        3
    }
    fn prediction_is_affine(&self) -> bool {
        false
    }
    fn evaluate(&self, x: &DVector<f64>) -> Result<Response> {
        let p = Self::point(x)?;
        Ok(Response {
            measurement: values(&Self::q_components(p)),
            prediction: values(&Self::r_components(p)),
        })
    }
    fn linearize_measurement(
        &self,
        x: &DVector<f64>,
        directions: &[DVector<f64>],
    ) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        let q = Self::q_components(Self::point(x)?);
        Ok((values(&q), directions.iter().map(|d| directional(&q, d)).collect()))
    }
    fn derivatives(
        &self,
        reference: &DVector<f64>,
        modes: &[DVector<f64>],
        mean_direction: Option<&DVector<f64>>,
    ) -> Result<ModelEvaluations> {
        let p = Self::point(reference)?;
        let q = Self::q_components(p);
        let r = Self::r_components(p);
        Ok(ModelEvaluations {
            q0: values(&q),
            dq_modes: modes.iter().map(|d| directional(&q, d)).collect(),
            r0: values(&r),
            dr_modes: modes.iter().map(|d| directional(&r, d)).collect(),
            d2r_diag: Some(modes.iter().map(|d| second(&r, d)).collect()),
            d2r_meandir: Some(
                mean_direction
                    .map(|m| second(&r, m))
                    .unwrap_or_else(|| DVector::zeros(3)),
            ),
            prediction_affine: false,
            reference: reference.clone(),
        })
    }
}

/// Two modes spanning the toy parameter plane.
pub fn toy_modes() -> Vec<DVector<f64>> {
    vec![
        DVector::from_vec(vec![1.0, 0.3]),
        DVector::from_vec(vec![-0.2, 0.8]),
    ]
}

/// Noise covariance used with [`NonlinearToy`].
pub fn toy_sigma() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_derivatives_match_finite_differences() {
        let toy = NonlinearToy;
        let x = DVector::from_vec(vec![0.2, -0.4]);
        let d = DVector::from_vec(vec![0.7, -0.3]);
        let ev = toy.derivatives(&x, std::slice::from_ref(&d), Some(&d)).unwrap();
        let h = 1e-4;
        let fp = toy.evaluate(&(&x + &d * h)).unwrap();
        let fm = toy.evaluate(&(&x - &d * h)).unwrap();
        let f0 = toy.evaluate(&x).unwrap();
        let dq = (&fp.measurement - &fm.measurement) / (2.0 * h);
        let dr = (&fp.prediction - &fm.prediction) / (2.0 * h);
        let d2r = (&fp.prediction - &f0.prediction * 2.0 + &fm.prediction) / (h * h);
        assert!((dq - &ev.dq_modes[0]).amax() < 1e-7);
        assert!((dr - &ev.dr_modes[0]).amax() < 1e-7);
        assert!((d2r - &ev.d2r_diag.as_ref().unwrap()[0]).amax() < 1e-5);
        assert_eq!(ev.d2r_meandir.unwrap(), ev.d2r_diag.unwrap()[0]);
    }
}
