//! Lotka–Volterra predator–prey system with a time-dependent perturbation of
//! the prey growth rate:
//!
//! ```text
//! y₁' = (15/2 + ξ(t)) y₁ - (3/40) y₁ y₂
//! y₂' = (3/20) y₁ y₂ - (15/2) y₂
//! ```
//!
//! Each step takes an explicit Euler predictor followed by exactly five
//! fixed-point sweeps of implicit Euler. The variational solver differentiates
//! this scheme exactly, stage by stage.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::SpdMatrix;
use crate::model::{ForwardModel, ModelEvaluations, Response};

pub const STEPS: usize = 1000;
pub const INITIAL_STATE: [f64; 2] = [20.0, 20.0];
const SWEEPS: usize = 5;

/// The observed data `[(97,19), (46,333), (7,86), (20,20)]`, flattened.
pub const LV_DATA: [f64; 8] = [97.0, 19.0, 46.0, 333.0, 7.0, 86.0, 20.0, 20.0];

#[inline]
fn rhs(y: [f64; 2], xi: f64) -> [f64; 2] {
    let [a, b] = y;
    [(7.5 + xi) * a - 3.0 * a * b / 40.0, 3.0 * a * b / 20.0 - 7.5 * b]
}

/// `J(y, ξ) dy + [y₁ dξ, 0]`.
#[inline]
fn tangent_rhs(y: [f64; 2], xi: f64, dy: [f64; 2], dxi: f64) -> [f64; 2] {
    let [a, b] = y;
    let [da, db] = dy;
    [
        (7.5 + xi - 3.0 * b / 40.0) * da - 3.0 * a / 40.0 * db + a * dxi,
        3.0 * b / 20.0 * da + (3.0 * a / 20.0 - 7.5) * db,
    ]
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub tgrid: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    xi: Vec<f64>,
    /// Inputs of the five corrector sweeps of each step.
    stages: Vec<[[f64; 2]; SWEEPS]>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.tgrid.len() - 1
    }

    pub fn state(&self, n: usize) -> [f64; 2] {
        [self.y1[n], self.y2[n]]
    }

    /// Writes `t,y1,y2` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "y1", "y2"])?;
        for ((t, a), b) in self.tgrid.iter().zip(&self.y1).zip(&self.y2) {
            w.write_record([format!("{t:.17e}"), format!("{a:.17e}"), format!("{b:.17e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `n + 1` equispaced times on `[0, 1]`.
pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|n| n as f64 / steps as f64).collect()
}

/// Integrates from `(20, 20)` with `xi.len() - 1` steps.
pub fn integrate(xi: &[f64]) -> Result<Trajectory> {
    integrate_from(INITIAL_STATE, xi)
}

pub fn integrate_from(y0: [f64; 2], xi: &[f64]) -> Result<Trajectory> {
    if xi.len() < 2 {
        return Err(Error::InvalidInput("need at least one time step".into()));
    }
    let steps = xi.len() - 1;
    let h = 1.0 / steps as f64;
    let mut y1 = Vec::with_capacity(steps + 1);
    let mut y2 = Vec::with_capacity(steps + 1);
    let mut stages = Vec::with_capacity(steps);
    let mut y = y0;
    y1.push(y[0]);
    y2.push(y[1]);
    for n in 0..steps {
        let f = rhs(y, xi[n]);
        let mut it = [y[0] + h * f[0], y[1] + h * f[1]];
        let mut st = [[0.0; 2]; SWEEPS];
        for s in st.iter_mut() {
            *s = it;
            let f = rhs(it, xi[n + 1]);
            it = [y[0] + h * f[0], y[1] + h * f[1]];
        }
        y = it;
        if !(y[0] > 0.0 && y[1] > 0.0) || !y[0].is_finite() || !y[1].is_finite() {
            return Err(Error::NonPositiveState { step: n + 1 });
        }
        stages.push(st);
        y1.push(y[0]);
        y2.push(y[1]);
    }
    Ok(Trajectory {
        tgrid: time_grid(steps),
        y1,
        y2,
        xi: xi.to_vec(),
        stages,
    })
}

/// Derivative of the discrete trajectory in direction `mode`, with zero
/// initial perturbation. Returns `(dy₁, dy₂)` on the grid.
pub fn integrate_derivative(base: &Trajectory, mode: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if mode.len() != base.tgrid.len() {
        return Err(Error::dim("direction", base.tgrid.len(), mode.len()));
    }
    let steps = base.steps();
    let h = 1.0 / steps as f64;
    let mut d1 = Vec::with_capacity(steps + 1);
    let mut d2 = Vec::with_capacity(steps + 1);
    let mut dy = [0.0, 0.0];
    d1.push(0.0);
    d2.push(0.0);
    for n in 0..steps {
        let g = tangent_rhs(base.state(n), base.xi[n], dy, mode[n]);
        let mut dit = [dy[0] + h * g[0], dy[1] + h * g[1]];
        for s in &base.stages[n] {
            let g = tangent_rhs(*s, base.xi[n + 1], dit, mode[n + 1]);
            dit = [dy[0] + h * g[0], dy[1] + h * g[1]];
        }
        dy = dit;
        d1.push(dy[0]);
        d2.push(dy[1]);
    }
    Ok((d1, d2))
}

fn observation_steps(steps: usize) -> Result<[usize; 4]> {
    if steps % 4 != 0 {
        return Err(Error::InvalidInput(format!(
            "step count {steps} does not hit the observation times"
        )));
    }
    let q = steps / 4;
    Ok([q, 2 * q, 3 * q, 4 * q])
}

fn observe_pair(y1: &[f64], y2: &[f64]) -> Result<DVector<f64>> {
    let idx = observation_steps(y1.len() - 1)?;
    Ok(DVector::from_iterator(8, idx.iter().flat_map(|&n| [y1[n], y2[n]])))
}

/// `(y₁, y₂)` at `t = ¼, ½, ¾, 1`, flattened in that order.
pub fn lv_observe(traj: &Trajectory) -> Result<DVector<f64>> {
    observe_pair(&traj.y1, &traj.y2)
}

/// `σ · (I₄ ⊗ [[1, 0.1], [0.1, 1]])`.
pub fn lv_noise_covariance(sigma_scale: f64) -> Result<SpdMatrix> {
    if !(sigma_scale > 0.0) || !sigma_scale.is_finite() {
        return Err(Error::InvalidInput(format!("noise scale must be positive, got {sigma_scale}")));
    }
    let m = DMatrix::from_fn(8, 8, |i, j| {
        if i == j {
            sigma_scale
        } else if i / 2 == j / 2 {
            0.1 * sigma_scale
        } else {
            0.0
        }
    });
    SpdMatrix::new(m)
}

/// The perturbation path `ξ` on the grid is the parameter; the prediction is
/// `ξ` itself.
#[derive(Debug, Clone)]
pub struct LvModel {
    steps: usize,
}

impl Default for LvModel {
    fn default() -> Self {
        Self { steps: STEPS }
    }
}

impl LvModel {
    pub fn new(steps: usize) -> Result<Self> {
        observation_steps(steps)?;
        Ok(Self { steps })
    }

    pub fn time_grid(&self) -> Vec<f64> {
        time_grid(self.steps)
    }

    fn trajectory(&self, x: &DVector<f64>) -> Result<Trajectory> {
        if x.len() != self.steps + 1 {
            return Err(Error::dim("perturbation path", self.steps + 1, x.len()));
        }
        integrate(x.as_slice())
    }

    fn sensitivities(&self, base: &Trajectory, dirs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        dirs.par_iter()
            .map(|d| {
                let (d1, d2) = integrate_derivative(base, d.as_slice())?;
                observe_pair(&d1, &d2)
            })
            .collect()
    }
}

impl ForwardModel for LvModel {
    fn name(&self) -> &str {
        "lotka-volterra"
    }
    fn parameter_dim(&self) -> usize {
        self.steps + 1
    }
    fn measurement_dim(&self) -> usize {
        8
    }
    fn prediction_dim(&self) -> usize {
        self.steps + 1
    }
    fn prediction_is_affine(&self) -> bool {
        true
    }

    fn evaluate(&self, x: &DVector<f64>) -> Result<Response> {
        let traj = self.trajectory(x)?;
        Ok(Response {
            measurement: lv_observe(&traj)?,
            prediction: x.clone(),
        })
    }

    fn linearize_measurement(
        &self,
        x: &DVector<f64>,
        directions: &[DVector<f64>],
    ) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        let traj = self.trajectory(x)?;
        Ok((lv_observe(&traj)?, self.sensitivities(&traj, directions)?))
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::brownian_bridge_modes;

    fn first_integral(y: [f64; 2]) -> f64 {
        0.15 * y[0] - 7.5 * y[0].ln() + 0.075 * y[1] - 7.5 * y[1].ln()
    }

    #[test]
    fn equilibrium_is_stationary() {
        let traj = integrate_from([50.0, 100.0], &vec![0.0; STEPS + 1]).unwrap();
        for n in 0..=STEPS {
            assert!((traj.y1[n] - 50.0).abs() <= 1e-10);
            assert!((traj.y2[n] - 100.0).abs() <= 1e-10);
        }
        let obs = lv_observe(&traj).unwrap();
        assert_eq!(obs.as_slice(), &[50.0, 100.0, 50.0, 100.0, 50.0, 100.0, 50.0, 100.0]);
    }

    #[test]
    fn first_integral_drift_is_first_order() {
        let drift = |steps: usize| {
            let t = integrate(&vec![0.0; steps + 1]).unwrap();
            (first_integral(t.state(steps)) - first_integral(INITIAL_STATE)).abs()
        };
        let coarse = drift(1000);
        let fine = drift(16000);
        assert!(coarse > 0.0);
        let ratio = coarse / fine;
        assert!((ratio - 16.0).abs() < 2.0, "ratio {ratio}");
    }

    #[test]
    fn step_halving_order_is_one() {
        let end = |steps: usize| integrate(&vec![0.0; steps + 1]).unwrap().state(steps);
        let a = end(1000);
        let b = end(2000);
        let c = end(4000);
        let order = ((a[0] - b[0]).abs() / (b[0] - c[0]).abs()).log2();
        assert!((order - 1.0).abs() < 0.1, "order {order}");
    }

    #[test]
    fn observation_indices() {
        assert_eq!(observation_steps(1000).unwrap(), [250, 500, 750, 1000]);
        assert!(observation_steps(1001).is_err());
        let t = time_grid(1000);
        assert_eq!(t[250], 0.25);
    }

    #[test]
    fn noise_covariance_entries() {
        let s = lv_noise_covariance(5.0).unwrap();
        assert_eq!(s.matrix()[(0, 0)], 5.0);
        assert_eq!(s.matrix()[(0, 1)], 0.5);
        assert_eq!(s.matrix()[(0, 2)], 0.0);
        assert_eq!(s.matrix()[(7, 6)], 0.5);
        assert!(lv_noise_covariance(0.0).is_err());
    }

    #[test]
    fn data_layout() {
        let d = LV_DATA;
        assert_eq!((d[0], d[1]), (97.0, 19.0));
        assert_eq!((d[2], d[3]), (46.0, 333.0));
        assert_eq!((d[6], d[7]), (20.0, 20.0));
    }

    #[test]
    fn variational_solution_is_linear() {
        let t = time_grid(STEPS);
        let modes = brownian_bridge_modes(3, &t).unwrap();
        let base = integrate(&vec![0.0; STEPS + 1]).unwrap();
        let zero = integrate_derivative(&base, &vec![0.0; STEPS + 1]).unwrap();
        assert!(zero.0.iter().chain(&zero.1).all(|&v| v == 0.0));

        let (a, b) = (0.7, -1.3);
        let combo: Vec<f64> = modes[0].iter().zip(modes[2].iter()).map(|(x, y)| a * x + b * y).collect();
        let d = integrate_derivative(&base, &combo).unwrap();
        let d0 = integrate_derivative(&base, modes[0].as_slice()).unwrap();
        let d2 = integrate_derivative(&base, modes[2].as_slice()).unwrap();
        for n in 0..=STEPS {
            let expect = a * d0.0[n] + b * d2.0[n];
            assert!((d.0[n] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn variational_solution_matches_finite_differences() {
        let t = time_grid(STEPS);
        let mode = &brownian_bridge_modes(2, &t).unwrap()[1];
        let x0 = DVector::from_iterator(STEPS + 1, t.iter().map(|s| 0.3 * (2.0 * s).sin()));
        let model = LvModel::default();
        let (_, dq) = model.linearize_measurement(&x0, std::slice::from_ref(mode)).unwrap();
        let err = |h: f64| {
            let p = model.evaluate(&(&x0 + mode * h)).unwrap().measurement;
            let m = model.evaluate(&(&x0 - mode * h)).unwrap().measurement;
            ((p - m) / (2.0 * h) - &dq[0]).amax()
        };
        let (e1, e2) = (err(1e-1), err(5e-2));
        assert!((e1 / e2).log2() > 1.9, "{e1} {e2}");
    }

    #[test]
    fn negative_population_is_reported() {
        let xi = vec![-2000.0; STEPS + 1];
        assert!(matches!(integrate(&xi), Err(Error::NonPositiveState { .. })));
    }
}
