//! Affine-parametric priors `x = x₀ + α Σⱼ xⱼ zⱼ` and their Karhunen–Loève bases.

use std::f64::consts::{PI, SQRT_2};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{generalized_sym_eig, SpdMatrix, Truncation};
use crate::mesh::TriangularMesh;

/// Law of one scalar coefficient `zⱼ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoefficientLaw {
    /// `U[-h, h]`.
    UniformSymmetric { halfwidth: f64 },
    /// `U[-h, h] + offset`.
    UniformShifted { halfwidth: f64, offset: f64 },
    StandardNormal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientMoments {
    pub mean: f64,
    pub variance: f64,
    pub third_central_moment: f64,
}

impl CoefficientLaw {
    pub fn moments(&self) -> CoefficientMoments {
        coefficient_moments(self)
    }

    pub fn is_uniform(&self) -> bool {
        !matches!(self, CoefficientLaw::StandardNormal)
    }

    /// Maps a draw in the law-native unit domain (`[-1, 1]` for the uniform
    /// laws, the real line for the normal) to a coefficient value.
    #[inline]
    pub fn map_unit(&self, draw: f64) -> f64 {
        match *self {
            CoefficientLaw::UniformSymmetric { halfwidth } => halfwidth * draw,
            CoefficientLaw::UniformShifted { halfwidth, offset } => halfwidth * draw + offset,
            CoefficientLaw::StandardNormal => draw,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            CoefficientLaw::UniformSymmetric { halfwidth }
            | CoefficientLaw::UniformShifted { halfwidth, .. }
                if !(halfwidth >= 0.0) || !halfwidth.is_finite() =>
            {
                Err(Error::InvalidInput(format!("invalid uniform halfwidth {halfwidth}")))
            }
            _ => Ok(()),
        }
    }
}

pub fn coefficient_moments(law: &CoefficientLaw) -> CoefficientMoments {
    match *law {
        CoefficientLaw::UniformSymmetric { halfwidth } => CoefficientMoments {
            mean: 0.0,
            variance: halfwidth * halfwidth / 3.0,
            third_central_moment: 0.0,
        },
        CoefficientLaw::UniformShifted { halfwidth, offset } => CoefficientMoments {
            mean: offset,
            variance: halfwidth * halfwidth / 3.0,
            third_central_moment: 0.0,
        },
        CoefficientLaw::StandardNormal => CoefficientMoments {
            mean: 0.0,
            variance: 1.0,
            third_central_moment: 0.0,
        },
    }
}

#[derive(Debug, Clone)]
pub struct AffineExpansion {
    x0: DVector<f64>,
    modes: Vec<DVector<f64>>,
    laws: Vec<CoefficientLaw>,
    alpha: f64,
}

impl AffineExpansion {
    pub fn new(
        x0: DVector<f64>,
        modes: Vec<DVector<f64>>,
        laws: Vec<CoefficientLaw>,
        alpha: f64,
    ) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::InvalidInput("expansion needs at least one mode".into()));
        }
        if modes.len() != laws.len() {
            return Err(Error::dim("coefficient laws", modes.len(), laws.len()));
        }
        if let Some(m) = modes.iter().find(|m| m.len() != x0.len()) {
            return Err(Error::dim("mode", x0.len(), m.len()));
        }
        for law in &laws {
            law.validate()?;
        }
        check_alpha(alpha)?;
        Ok(Self {
            x0,
            modes,
            laws,
            alpha,
        })
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn modes(&self) -> &[DVector<f64>] {
        &self.modes
    }

    pub fn laws(&self) -> &[CoefficientLaw] {
        &self.laws
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            alpha,
            ..self.clone()
        })
    }

    pub fn with_reference(&self, x0: DVector<f64>) -> Result<Self> {
        if x0.len() != self.x0.len() {
            return Err(Error::dim("reference", self.x0.len(), x0.len()));
        }
        Ok(Self { x0, ..self.clone() })
    }

    pub fn moments(&self) -> Vec<CoefficientMoments> {
        self.laws.iter().map(coefficient_moments).collect()
    }

    pub fn is_centered(&self) -> bool {
        self.laws.iter().all(|l| l.moments().mean == 0.0)
    }

    pub fn is_skewless(&self) -> bool {
        self.laws.iter().all(|l| l.moments().third_central_moment == 0.0)
    }

    /// `Σⱼ E[zⱼ] xⱼ`, without the amplitude `α`.
    pub fn mean_direction(&self) -> DVector<f64> {
        let mut d = DVector::zeros(self.dim());
        for (mode, law) in self.modes.iter().zip(&self.laws) {
            let mean = law.moments().mean;
            if mean != 0.0 {
                d.axpy(mean, mode, 1.0);
            }
        }
        d
    }

    /// `x₀ + α Σⱼ xⱼ zⱼ` with `zⱼ` the law image of `unit_draws[j]`.
    pub fn realize(&self, unit_draws: &[f64]) -> Result<DVector<f64>> {
        if unit_draws.len() != self.len() {
            return Err(Error::dim("draws", self.len(), unit_draws.len()));
        }
        let mut x = self.x0.clone();
        for ((mode, law), &u) in self.modes.iter().zip(&self.laws).zip(unit_draws) {
            let z = law.map_unit(u);
            if z != 0.0 {
                x.axpy(self.alpha * z, mode, 1.0);
            }
        }
        Ok(x)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidInput(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

pub fn realize(expansion: &AffineExpansion, unit_draws: &[f64]) -> Result<DVector<f64>> {
    expansion.realize(unit_draws)
}

/// Truncated Karhunen–Loève basis on a P1 mesh.
#[derive(Debug, Clone)]
pub struct KleBasis {
    pub eigenvalues: Vec<f64>,
    /// Nodal coefficients, orthonormal in `L²(D)`.
    pub eigenfields: Vec<DVector<f64>>,
    pub truncation_tol: f64,
    pub retained: usize,
}

/// The squared-exponential kernel `exp(-20‖x - y‖² / 3)`.
pub fn gaussian_kernel(x: [f64; 2], y: [f64; 2]) -> f64 {
    let dx = x[0] - y[0];
    let dy = x[1] - y[1];
    (-20.0 * (dx * dx + dy * dy) / 3.0).exp()
}

/// Galerkin discretization of the covariance operator with kernel `kernel`.
///
/// `A_ij = ∬ k(x, y) φ_i(x) φ_j(y)` is integrated with one centroid point per
/// triangle pair, i.e. `A = P K Pᵀ` with `P_iT = |T|/3` for `i ∈ T` and
/// `K_TS = k(c_T, c_S)`.
pub fn assemble_kernel_matrix<K>(kernel: K, mesh: &TriangularMesh) -> DMatrix<f64>
where
    K: Fn([f64; 2], [f64; 2]) -> f64 + Sync,
{
    let nt = mesh.triangles.len();
    let n = mesh.node_count();
    let centroids: Vec<[f64; 2]> = (0..nt).map(|t| mesh.centroid(t)).collect();
    let weights: Vec<f64> = (0..nt).map(|t| mesh.signed_area(t) / 3.0).collect();

    // kt[t][s] = K_ts · |s|/3
    let kt: Vec<Vec<f64>> = (0..nt)
        .into_par_iter()
        .map(|t| {
            centroids
                .iter()
                .zip(&weights)
                .map(|(&cs, &ws)| kernel(centroids[t], cs) * ws)
                .collect()
        })
        .collect();

    // K Pᵀ: for each triangle T, the vector over nodes j of Σ_S K_TS P_jS.
    let kp: Vec<Vec<f64>> = kt
        .par_iter()
        .map(|row| {
            let mut out = vec![0.0; n];
            for (s, tri) in mesh.triangles.iter().enumerate() {
                for &j in tri {
                    out[j] += row[s];
                }
            }
            out
        })
        .collect();

    let mut a = DMatrix::<f64>::zeros(n, n);
    for (t, tri) in mesh.triangles.iter().enumerate() {
        for &i in tri {
            for j in 0..n {
                a[(i, j)] += weights[t] * kp[t][j];
            }
        }
    }
    (&a + a.transpose()) * 0.5
}

/// Eigenpairs of the discretized covariance operator with `λ > tol · λ₁`.
pub fn build_kle<K>(kernel: K, mesh: &TriangularMesh, tol: f64) -> Result<KleBasis>
where
    K: Fn([f64; 2], [f64; 2]) -> f64 + Sync,
{
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("KLE tolerance must be positive, got {tol}")));
    }
    let a = assemble_kernel_matrix(kernel, mesh);
    let mass_dense = mesh.mass_matrix();
    let mass = SpdMatrix::new(mass_dense.clone())?;
    let pairs = generalized_sym_eig(&a, &mass, Truncation::RelativeTol(tol))?;
    let keep = pairs.values.iter().take_while(|&&v| v > 0.0).count();
    if keep == 0 {
        return Err(Error::EmptyBasis);
    }
    let load = mesh.lumped_load();
    let mut eigenvalues = Vec::with_capacity(keep);
    let mut eigenfields = Vec::with_capacity(keep);
    for (val, mut vec) in pairs.values.into_iter().zip(pairs.vectors).take(keep) {
        let norm = (&mass_dense * &vec).dot(&vec).sqrt();
        vec /= norm;
        // sign convention: positive mean, else positive largest entry
        let integral = load.dot(&vec);
        let flip = if integral.abs() > 1e-10 {
            integral < 0.0
        } else {
            vec[vec.iamax()] < 0.0
        };
        if flip {
            vec.neg_mut();
        }
        eigenvalues.push(val);
        eigenfields.push(vec);
    }
    Ok(KleBasis {
        retained: eigenvalues.len(),
        eigenvalues,
        eigenfields,
        truncation_tol: tol,
    })
}

impl KleBasis {
    /// Expansion around `x0` with `zᵢ ~ U[-√λᵢ, √λᵢ]` (plus `offset` when
    /// uncentered).
    pub fn uniform_expansion(
        &self,
        x0: DVector<f64>,
        offset: Option<f64>,
        alpha: f64,
    ) -> Result<AffineExpansion> {
        let laws = self
            .eigenvalues
            .iter()
            .map(|&l| match offset {
                None => CoefficientLaw::UniformSymmetric { halfwidth: l.sqrt() },
                Some(c) => CoefficientLaw::UniformShifted {
                    halfwidth: l.sqrt(),
                    offset: c,
                },
            })
            .collect();
        AffineExpansion::new(x0, self.eigenfields.clone(), laws, alpha)
    }

    /// Long-format dump: `mode,eigenvalue,node,x,y,value`.
    pub fn write_csv<W: Write>(&self, mesh: &TriangularMesh, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["mode", "eigenvalue", "node", "x", "y", "value"])?;
        for (k, (lam, field)) in self.eigenvalues.iter().zip(&self.eigenfields).enumerate() {
            for (i, (p, v)) in mesh.nodes.iter().zip(field.iter()).enumerate() {
                w.write_record([
                    (k + 1).to_string(),
                    format!("{lam:.17e}"),
                    i.to_string(),
                    format!("{:.17e}", p[0]),
                    format!("{:.17e}", p[1]),
                    format!("{v:.17e}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Sine modes `√2 sin(kπt)/(kπ)`, `k = 1..=count`, sampled on `tgrid`.
pub fn brownian_bridge_modes(count: usize, tgrid: &[f64]) -> Result<Vec<DVector<f64>>> {
    if count == 0 {
        return Err(Error::InvalidInput("need at least one bridge mode".into()));
    }
    if let Some(t) = tgrid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidInput(format!("time {t} outside [0, 1]")));
    }
    Ok((1..=count)
        .map(|k| {
            let kp = k as f64 * PI;
            DVector::from_iterator(tgrid.len(), tgrid.iter().map(|&t| SQRT_2 * (kp * t).sin() / kp))
        })
        .collect())
}
