//! Darcy flow `-div(exp(b) ∇u) = 1` on the unit square with homogeneous
//! Dirichlet data, discretized with P1 elements.
//!
//! The log-permeability `b` is nodal and enters through `exp(b̄_T)` with `b̄_T`
//! the centroid value on each triangle. Derivative solves are the exact
//! derivatives of this discrete system, so finite differences of
//! [`solve_forward`] converge to them at the expected rate.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{BandedCholesky, BandedSpd, SpdMatrix};
use crate::mesh::{FemField, TriangularMesh};
use crate::model::{ForwardModel, ModelEvaluations, Response};

/// Observation points, in output order.
pub const OBSERVATION_POINTS: [[f64; 2]; 5] =
    [[0.5, 0.5], [0.25, 0.25], [0.75, 0.25], [0.75, 0.75], [0.25, 0.75]];

/// Which prediction `R` the model reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DarcyPrediction {
    /// `R₁ = b`, the log-permeability itself.
    Parameter,
    /// `R₂ = u`, the pressure field.
    Solution,
}

/// Interior numbering and cached element data for one mesh.
#[derive(Debug, Clone)]
struct FemSystem {
    interior: Vec<Option<usize>>,
    n_interior: usize,
    bandwidth: usize,
    local: Vec<[[f64; 3]; 3]>,
    load: Vec<f64>,
}

impl FemSystem {
    fn new(mesh: &TriangularMesh) -> Result<Self> {
        let mut interior: Vec<Option<usize>> = Vec::with_capacity(mesh.node_count());
        let mut n_interior = 0;
        for &b in &mesh.boundary_mask {
            if b {
                interior.push(None);
            } else {
                interior.push(Some(n_interior));
                n_interior += 1;
            }
        }
        if n_interior == 0 {
            return Err(Error::InvalidInput("mesh has no interior nodes".into()));
        }
        let mut bandwidth = 0;
        for tri in &mesh.triangles {
            for &a in tri {
                for &b in tri {
                    if let (Some(i), Some(j)) = (interior[a], interior[b]) {
                        bandwidth = bandwidth.max(i.abs_diff(j));
                    }
                }
            }
        }
        let local = (0..mesh.triangles.len()).map(|t| mesh.local_stiffness(t)).collect();
        let full_load = mesh.lumped_load();
        let mut load = vec![0.0; n_interior];
        for (node, slot) in interior.iter().enumerate() {
            if let Some(i) = slot {
                load[*i] = full_load[node];
            }
        }
        Ok(Self {
            interior,
            n_interior,
            bandwidth,
            local,
            load,
        })
    }

    fn assemble(&self, mesh: &TriangularMesh, coeff: &[f64]) -> BandedSpd {
        let mut a = BandedSpd::zeros(self.n_interior, self.bandwidth);
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let k = &self.local[t];
            for r in 0..3 {
                let Some(i) = self.interior[tri[r]] else { continue };
                for s in 0..3 {
                    if let Some(j) = self.interior[tri[s]] {
                        a.add(i, j, coeff[t] * k[r][s]);
                    }
                }
            }
        }
        a
    }

    /// `y -= Σ_T c_T K_T u` on interior rows, `u` a full nodal vector.
    fn apply_weighted(&self, mesh: &TriangularMesh, c: &[f64], u: &DVector<f64>, y: &mut [f64]) {
        for (t, tri) in mesh.triangles.iter().enumerate() {
            if c[t] == 0.0 {
                continue;
            }
            let k = &self.local[t];
            for r in 0..3 {
                if let Some(i) = self.interior[tri[r]] {
                    let s: f64 = (0..3).map(|s| k[r][s] * u[tri[s]]).sum();
                    y[i] -= c[t] * s;
                }
            }
        }
    }

    fn expand(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.interior.len(),
            self.interior.iter().map(|slot| slot.map_or(0.0, |i| x[i])),
        )
    }
}

fn centroid_values(mesh: &TriangularMesh, v: &DVector<f64>) -> Vec<f64> {
    mesh.triangles
        .iter()
        .map(|&[a, b, c]| (v[a] + v[b] + v[c]) / 3.0)
        .collect()
}

fn exp_coefficients(mesh: &TriangularMesh, b: &DVector<f64>) -> Vec<f64> {
    centroid_values(mesh, b).into_iter().map(f64::exp).collect()
}

fn check_field(mesh: &TriangularMesh, f: &FemField<'_>, what: &'static str) -> Result<()> {
    if f.nodal_values.len() != mesh.node_count() {
        return Err(Error::dim(what, mesh.node_count(), f.nodal_values.len()));
    }
    Ok(())
}

/// Factorized stiffness at one log-permeability, with its forward solution.
struct Linearization {
    factor: BandedCholesky,
    coeff: Vec<f64>,
    u0: DVector<f64>,
}

impl Linearization {
    fn new(sys: &FemSystem, mesh: &TriangularMesh, b: &DVector<f64>) -> Result<Self> {
        let coeff = exp_coefficients(mesh, b);
        if coeff.iter().any(|c| !c.is_finite()) {
            return Err(Error::SolverFailure("exp(b) overflowed".into()));
        }
        let factor = sys.assemble(mesh, &coeff).factor()?;
        let mut y = sys.load.clone();
        factor.solve_in_place(&mut y);
        Ok(Self {
            factor,
            coeff,
            u0: sys.expand(&y),
        })
    }

    /// Weights `exp(b̄)·ξ̄^power` per triangle.
    fn direction_weights(&self, mesh: &TriangularMesh, xi: &DVector<f64>, power: i32) -> Vec<f64> {
        centroid_values(mesh, xi)
            .into_iter()
            .zip(&self.coeff)
            .map(|(x, c)| c * x.powi(power))
            .collect()
    }

    fn first(&self, sys: &FemSystem, mesh: &TriangularMesh, xi: &DVector<f64>) -> DVector<f64> {
        let c1 = self.direction_weights(mesh, xi, 1);
        let mut y = vec![0.0; sys.n_interior];
        sys.apply_weighted(mesh, &c1, &self.u0, &mut y);
        self.factor.solve_in_place(&mut y);
        sys.expand(&y)
    }

    fn second(
        &self,
        sys: &FemSystem,
        mesh: &TriangularMesh,
        xi: &DVector<f64>,
        w1: &DVector<f64>,
    ) -> DVector<f64> {
        let c1: Vec<f64> = self.direction_weights(mesh, xi, 1).iter().map(|c| 2.0 * c).collect();
        let c2 = self.direction_weights(mesh, xi, 2);
        let mut y = vec![0.0; sys.n_interior];
        sys.apply_weighted(mesh, &c1, w1, &mut y);
        sys.apply_weighted(mesh, &c2, &self.u0, &mut y);
        self.factor.solve_in_place(&mut y);
        sys.expand(&y)
    }
}

/// Interior-node Galerkin matrix for `∫ exp(b) ∇u·∇v`.
pub fn assemble_stiffness(mesh: &TriangularMesh, b: &FemField<'_>) -> Result<SpdMatrix> {
    check_field(mesh, b, "log-permeability")?;
    let sys = FemSystem::new(mesh)?;
    let coeff = exp_coefficients(mesh, &b.nodal_values);
    if coeff.iter().any(|c| !c.is_finite()) {
        return Err(Error::NotSpd {
            pivot: 0,
            value: f64::INFINITY,
        });
    }
    SpdMatrix::new(sys.assemble(mesh, &coeff).to_dense())
}

pub fn solve_forward<'m>(mesh: &'m TriangularMesh, b: &FemField<'_>) -> Result<FemField<'m>> {
    check_field(mesh, b, "log-permeability")?;
    let sys = FemSystem::new(mesh)?;
    let lin = Linearization::new(&sys, mesh, &b.nodal_values)?;
    FemField::new(mesh, lin.u0)
}

/// First derivative of the solution at `b0` in direction `xi`.
pub fn solve_derivative_1<'m>(
    mesh: &'m TriangularMesh,
    b0: &FemField<'_>,
    u0: &FemField<'_>,
    xi: &FemField<'_>,
) -> Result<FemField<'m>> {
    check_field(mesh, b0, "log-permeability")?;
    check_field(mesh, u0, "solution")?;
    check_field(mesh, xi, "direction")?;
    let sys = FemSystem::new(mesh)?;
    let lin = Linearization::new(&sys, mesh, &b0.nodal_values)?;
    let lin = Linearization {
        u0: u0.nodal_values.clone(),
        ..lin
    };
    FemField::new(mesh, lin.first(&sys, mesh, &xi.nodal_values))
}

/// Second derivative of the solution at `b0` in direction `(xi, xi)`.
pub fn solve_derivative_2_diag<'m>(
    mesh: &'m TriangularMesh,
    b0: &FemField<'_>,
    u0: &FemField<'_>,
    w1: &FemField<'_>,
    xi: &FemField<'_>,
) -> Result<FemField<'m>> {
    check_field(mesh, b0, "log-permeability")?;
    check_field(mesh, u0, "solution")?;
    check_field(mesh, w1, "first derivative")?;
    check_field(mesh, xi, "direction")?;
    let sys = FemSystem::new(mesh)?;
    let lin = Linearization::new(&sys, mesh, &b0.nodal_values)?;
    let lin = Linearization {
        u0: u0.nodal_values.clone(),
        ..lin
    };
    FemField::new(mesh, lin.second(&sys, mesh, &xi.nodal_values, &w1.nodal_values))
}

/// Point values of `u` at [`OBSERVATION_POINTS`].
pub fn observe(u: &FemField<'_>) -> Result<DVector<f64>> {
    let vals = OBSERVATION_POINTS
        .iter()
        .map(|&p| u.mesh.interpolate(&u.nodal_values, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(DVector::from_vec(vals))
}

/// `Σ = (4 I + 1 1ᵀ) / 1000` on the five observations.
pub fn darcy_noise_covariance() -> SpdMatrix {
    let m = DMatrix::from_fn(5, 5, |i, j| if i == j { 0.005 } else { 0.001 });
    SpdMatrix::new(m).expect("noise covariance is SPD")
}

type Stencil = Vec<(usize, f64)>;

fn stencil(mesh: &TriangularMesh, p: [f64; 2]) -> Result<Stencil> {
    let (t, w) = mesh.locate(p)?;
    Ok(mesh.triangles[t].iter().copied().zip(w).collect())
}

fn apply_stencil(s: &Stencil, v: &DVector<f64>) -> f64 {
    s.iter().map(|&(i, w)| w * v[i]).sum()
}

/// The Darcy forward model as a [`ForwardModel`].
///
/// The parameter is nodal on `parameter_mesh` (the forward mesh unless a finer
/// KLE mesh is supplied) and is transferred to the forward mesh by nodal
/// interpolation.
pub struct DarcyModel {
    mesh: TriangularMesh,
    parameter_mesh: Option<TriangularMesh>,
    transfer: Option<Vec<Stencil>>,
    prediction: DarcyPrediction,
    system: FemSystem,
    observations: Vec<Stencil>,
}

impl DarcyModel {
    pub fn new(mesh: TriangularMesh, prediction: DarcyPrediction) -> Result<Self> {
        let system = FemSystem::new(&mesh)?;
        let observations = OBSERVATION_POINTS
            .iter()
            .map(|&p| stencil(&mesh, p))
            .collect::<Result<_>>()?;
        Ok(Self {
            mesh,
            parameter_mesh: None,
            transfer: None,
            prediction,
            system,
            observations,
        })
    }

    /// Uses a separate mesh for the parameter field.
    pub fn with_parameter_mesh(mut self, parameter_mesh: TriangularMesh) -> Result<Self> {
        let transfer = self
            .mesh
            .nodes
            .iter()
            .map(|&p| stencil(&parameter_mesh, p))
            .collect::<Result<_>>()?;
        self.transfer = Some(transfer);
        self.parameter_mesh = Some(parameter_mesh);
        Ok(self)
    }

    pub fn mesh(&self) -> &TriangularMesh {
        &self.mesh
    }

    pub fn parameter_mesh(&self) -> &TriangularMesh {
        self.parameter_mesh.as_ref().unwrap_or(&self.mesh)
    }

    pub fn prediction(&self) -> DarcyPrediction {
        self.prediction
    }

    /// Mesh the prediction vector lives on, for computing `L²` norms.
    pub fn prediction_mesh(&self) -> &TriangularMesh {
        match self.prediction {
            DarcyPrediction::Parameter => self.parameter_mesh(),
            DarcyPrediction::Solution => &self.mesh,
        }
    }

    fn to_forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.parameter_mesh().node_count();
        if x.len() != n {
            return Err(Error::dim("parameter", n, x.len()));
        }
        Ok(match &self.transfer {
            None => x.clone(),
            Some(t) => DVector::from_iterator(t.len(), t.iter().map(|s| apply_stencil(s, x))),
        })
    }

    fn observe_nodal(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(5, self.observations.iter().map(|s| apply_stencil(s, u)))
    }

    fn linearize(&self, x: &DVector<f64>) -> Result<Linearization> {
        Linearization::new(&self.system, &self.mesh, &self.to_forward(x)?)
    }
}

impl ForwardModel for DarcyModel {
    fn name(&self) -> &str {
        "darcy"
    }
    fn parameter_dim(&self) -> usize {
        self.parameter_mesh().node_count()
    }
    fn measurement_dim(&self) -> usize {
        5
    }
    fn prediction_dim(&self) -> usize {
        self.prediction_mesh().node_count()
    }
    fn prediction_is_affine(&self) -> bool {
        self.prediction == DarcyPrediction::Parameter
    }

    fn evaluate(&self, x: &DVector<f64>) -> Result<Response> {
        let lin = self.linearize(x)?;
        let measurement = self.observe_nodal(&lin.u0);
        let prediction = match self.prediction {
            DarcyPrediction::Parameter => x.clone(),
            DarcyPrediction::Solution => lin.u0,
        };
        Ok(Response {
            measurement,
            prediction,
        })
    }

    fn linearize_measurement(
        &self,
        x: &DVector<f64>,
        directions: &[DVector<f64>],
    ) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        let lin = self.linearize(x)?;
        let dq = directions
            .par_iter()
            .map(|d| {
                let xi = self.to_forward(d)?;
                Ok(self.observe_nodal(&lin.first(&self.system, &self.mesh, &xi)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((self.observe_nodal(&lin.u0), dq))
    }

    fn derivatives(
        &self,
        reference: &DVector<f64>,
        modes: &[DVector<f64>],
        mean_direction: Option<&DVector<f64>>,
    ) -> Result<ModelEvaluations> {
        let lin = self.linearize(reference)?;
        let q0 = self.observe_nodal(&lin.u0);
        let with_second = self.prediction == DarcyPrediction::Solution;
        let solve = |d: &DVector<f64>| -> Result<(DVector<f64>, Option<DVector<f64>>)> {
            let xi = self.to_forward(d)?;
            let w1 = lin.first(&self.system, &self.mesh, &xi);
            let w2 = with_second.then(|| lin.second(&self.system, &self.mesh, &xi, &w1));
            Ok((w1, w2))
        };
        let sols = modes.par_iter().map(solve).collect::<Result<Vec<_>>>()?;
        let dq_modes = sols.iter().map(|(w1, _)| self.observe_nodal(w1)).collect();

        let evals = match self.prediction {
            DarcyPrediction::Parameter => ModelEvaluations {
                q0,
                dq_modes,
                r0: reference.clone(),
                dr_modes: modes.to_vec(),
                d2r_diag: None,
                d2r_meandir: None,
                prediction_affine: true,
                reference: reference.clone(),
            },
            DarcyPrediction::Solution => {
                let meandir = match mean_direction {
                    Some(m) => solve(m)?.1.expect("second derivative requested"),
                    None => DVector::zeros(self.mesh.node_count()),
                };
                let (dr_modes, d2r): (Vec<_>, Vec<_>) = sols
                    .into_iter()
                    .map(|(w1, w2)| (w1, w2.expect("second derivative requested")))
                    .unzip();
                ModelEvaluations {
                    q0,
                    dq_modes,
                    r0: lin.u0,
                    dr_modes,
                    d2r_diag: Some(d2r),
                    d2r_meandir: Some(meandir),
                    prediction_affine: false,
                    reference: reference.clone(),
                }
            }
        };
        Ok(evals)
    }
}
