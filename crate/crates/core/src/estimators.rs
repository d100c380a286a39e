//! Sampling and quadrature references for posterior moments.
//!
//! Every estimator is a ratio estimator `Σ wₖ R(xₖ) / Σ wₖ` with
//! `wₖ = qₖ ν(xₖ)`, `qₖ` the sample or quadrature weight and `ν` the
//! likelihood. Samples are processed in fixed blocks; each block keeps its own
//! log-weight shift and blocks are merged in index order, so the result does
//! not depend on the number of worker threads and does not underflow when the
//! data sit far out in the prior tails.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::expansion::{MomentOrder, MomentSource, PosteriorMoments};
use crate::model::{ForwardModel, MeasurementSetup};
use crate::prior::{AffineExpansion, CoefficientLaw};

const BLOCK: usize = 64;
const MAX_GRID_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Halton,
    /// `count` antithetic pairs `(z, -z)`.
    AntitheticMc,
    /// Plain Monte Carlo with `count` independent draws.
    PlainMc,
    TensorGrid { nodes_per_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleBudget {
    pub count: usize,
    pub seed: u64,
    pub kind: SampleKind,
}

impl SampleBudget {
    pub fn halton(count: usize) -> Self {
        Self {
            count,
            seed: 0,
            kind: SampleKind::Halton,
        }
    }

    pub fn antithetic(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            kind: SampleKind::AntitheticMc,
        }
    }

    pub fn plain_mc(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            kind: SampleKind::PlainMc,
        }
    }

    pub fn tensor_grid(nodes_per_dim: usize) -> Self {
        Self {
            count: nodes_per_dim,
            seed: 0,
            kind: SampleKind::TensorGrid { nodes_per_dim },
        }
    }
}

/// Full estimate plus the estimate from the first half of the samples, whose
/// difference serves as an error indicator.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub full: PosteriorMoments,
    pub half: PosteriorMoments,
}

pub fn first_primes(count: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(count);
    let mut c = 2u64;
    while primes.len() < count {
        if primes.iter().take_while(|&&p| p * p <= c).all(|&p| c % p != 0) {
            primes.push(c);
        }
        c += 1;
    }
    primes
}

pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while index > 0 {
        r += f * (index % base) as f64;
        index /= base;
        f *= inv;
    }
    r
}

/// Point `index ≥ 1` of the unscrambled Halton sequence in `dim` dimensions.
pub fn halton_point(index: u64, dim: usize) -> Vec<f64> {
    first_primes(dim)
        .into_iter()
        .map(|b| radical_inverse(index, b))
        .collect()
}

/// Gauss–Legendre rule on `[-1, 1]` with weights normalized to sum 1.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    golub_welsch(n, |k| {
        let k = k as f64;
        k / (4.0 * k * k - 1.0).sqrt()
    })
}

/// Gauss–Hermite rule for the standard normal density, weights summing to 1.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    golub_welsch(n, |k| (k as f64).sqrt())
}

/// Nodes and normalized weights from the symmetric Jacobi matrix with zero
/// diagonal and off-diagonal entries `beta(1..n)`.
fn golub_welsch(n: usize, beta: impl Fn(usize) -> f64) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = beta(k);
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // symmetric rules: enforce exact symmetry of nodes and weights
    for i in 0..n / 2 {
        let x = 0.5 * (pairs[n - 1 - i].0 - pairs[i].0);
        let w = 0.5 * (pairs[n - 1 - i].1 + pairs[i].1);
        pairs[i] = (-x, w);
        pairs[n - 1 - i] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    pairs.into_iter().map(|(x, w)| (x, w / total)).unzip()
}

struct Partial {
    max_log: f64,
    s0: f64,
    s1: DVector<f64>,
    s2: Option<DMatrix<f64>>,
}

impl Partial {
    fn empty(z: usize, order: MomentOrder) -> Self {
        Self {
            max_log: f64::NEG_INFINITY,
            s0: 0.0,
            s1: DVector::zeros(z),
            s2: (order == MomentOrder::Full).then(|| DMatrix::zeros(z, z)),
        }
    }

    fn from_samples(samples: &[(f64, DVector<f64>)], z: usize, order: MomentOrder) -> Self {
        let mut p = Self::empty(z, order);
        p.max_log = samples
            .iter()
            .map(|s| s.0)
            .fold(f64::NEG_INFINITY, f64::max);
        if p.max_log == f64::NEG_INFINITY {
            return p;
        }
        for (lw, r) in samples {
            let w = (lw - p.max_log).exp();
            if w == 0.0 {
                continue;
            }
            p.s0 += w;
            p.s1.axpy(w, r, 1.0);
            if let Some(s2) = p.s2.as_mut() {
                s2.ger(w, r, r, 1.0);
            }
        }
        p
    }

    fn merge(mut self, other: &Partial) -> Self {
        if other.max_log == f64::NEG_INFINITY {
            return self;
        }
        if self.max_log == f64::NEG_INFINITY {
            self.max_log = other.max_log;
            self.s0 = other.s0;
            self.s1 = other.s1.clone();
            self.s2 = other.s2.clone();
            return self;
        }
        let m = self.max_log.max(other.max_log);
        let a = (self.max_log - m).exp();
        let b = (other.max_log - m).exp();
        self.max_log = m;
        self.s0 = a * self.s0 + b * other.s0;
        self.s1 *= a;
        self.s1.axpy(b, &other.s1, 1.0);
        if let (Some(s2), Some(o2)) = (self.s2.as_mut(), other.s2.as_ref()) {
            *s2 *= a;
            *s2 += o2 * b;
        }
        self
    }

    fn finish(self, centered: bool, source: MomentSource) -> Result<PosteriorMoments> {
        if !(self.s0 > 0.0) || !self.s0.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        let mean = self.s1 / self.s0;
        let (correlation, covariance) = match self.s2 {
            Some(s2) => {
                let corr = s2 / self.s0;
                let corr = (&corr + corr.transpose()) * 0.5;
                let cov = &corr - &mean * mean.transpose();
                (Some(corr), Some(cov))
            }
            None => (None, None),
        };
        Ok(PosteriorMoments {
            mean,
            correlation,
            covariance,
            centered,
            source,
        })
    }
}

/// A point in the unit coefficient domain with its log quadrature weight.
type UnitPoint = (Vec<f64>, f64);

struct Sampler<'a> {
    kind: SampleKind,
    seed: u64,
    laws: &'a [CoefficientLaw],
    primes: Vec<u64>,
    grid: Vec<(Vec<f64>, Vec<f64>)>,
    normal: Normal,
}

impl<'a> Sampler<'a> {
    fn new(budget: &SampleBudget, laws: &'a [CoefficientLaw]) -> Result<Self> {
        let m = laws.len();
        let mut grid = Vec::new();
        match budget.kind {
            SampleKind::TensorGrid { nodes_per_dim } => {
                if m > MAX_GRID_DIM {
                    return Err(Error::CostGuard { dim: m });
                }
                if nodes_per_dim < 4 {
                    return Err(Error::InvalidInput(format!(
                        "tensor grid needs at least 4 nodes per dimension, got {nodes_per_dim}"
                    )));
                }
                for law in laws {
                    grid.push(if law.is_uniform() {
                        gauss_legendre(nodes_per_dim)
                    } else {
                        gauss_hermite(nodes_per_dim)
                    });
                }
            }
            _ if budget.count < 2 => {
                return Err(Error::InvalidInput(format!(
                    "sample budget needs at least 2 samples, got {}",
                    budget.count
                )))
            }
            _ => {}
        }
        Ok(Self {
            kind: budget.kind,
            seed: budget.seed,
            laws,
            primes: first_primes(m),
            grid,
            normal: Normal::standard(),
        })
    }

    /// Number of units; an antithetic unit yields two points.
    fn units(&self, count: usize) -> usize {
        match self.kind {
            SampleKind::TensorGrid { nodes_per_dim } => nodes_per_dim.pow(self.laws.len() as u32),
            _ => count,
        }
    }

    fn from_uniform(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.laws)
            .map(|(&u, law)| {
                if law.is_uniform() {
                    2.0 * u - 1.0
                } else {
                    self.normal.inverse_cdf(u)
                }
            })
            .collect()
    }

    fn counter_uniforms(&self, unit: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(unit as u64);
        (0..self.laws.len())
            .map(|_| ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64))
            .collect()
    }

    fn points(&self, unit: usize, out: &mut Vec<UnitPoint>) {
        match self.kind {
            SampleKind::Halton => {
                let u: Vec<f64> = self
                    .primes
                    .iter()
                    .map(|&b| radical_inverse(unit as u64 + 1, b))
                    .collect();
                out.push((self.from_uniform(&u), 0.0));
            }
            SampleKind::PlainMc => {
                out.push((self.from_uniform(&self.counter_uniforms(unit)), 0.0));
            }
            SampleKind::AntitheticMc => {
                let z = self.from_uniform(&self.counter_uniforms(unit));
                let neg = z.iter().map(|v| -v).collect();
                out.push((z, 0.0));
                out.push((neg, 0.0));
            }
            SampleKind::TensorGrid { nodes_per_dim } => {
                let mut rem = unit;
                let mut draws = Vec::with_capacity(self.laws.len());
                let mut logw = 0.0;
                for (nodes, weights) in &self.grid {
                    let i = rem % nodes_per_dim;
                    rem /= nodes_per_dim;
                    draws.push(nodes[i]);
                    logw += weights[i].ln();
                }
                out.push((draws, logw));
            }
        }
    }
}

fn source_of(kind: SampleKind) -> MomentSource {
    match kind {
        SampleKind::Halton => MomentSource::Qmc,
        SampleKind::AntitheticMc | SampleKind::PlainMc => MomentSource::Mc,
        SampleKind::TensorGrid { .. } => MomentSource::Quadrature,
    }
}

fn accumulate<M: ForwardModel + ?Sized>(
    model: &M,
    expansion: &AffineExpansion,
    meas: &MeasurementSetup,
    sampler: &Sampler<'_>,
    units: std::ops::Range<usize>,
    order: MomentOrder,
) -> Result<Partial> {
    let z = model.prediction_dim();
    let starts: Vec<usize> = units.clone().step_by(BLOCK).collect();
    let partials: Vec<Partial> = starts
        .into_par_iter()
        .map(|start| {
            let end = (start + BLOCK).min(units.end);
            let mut pts = Vec::with_capacity(2 * BLOCK);
            for u in start..end {
                sampler.points(u, &mut pts);
            }
            let mut samples = Vec::with_capacity(pts.len());
            for (draws, logq) in pts {
                let x = expansion.realize(&draws)?;
                let resp = model.evaluate(&x)?;
                let phi = meas.potential(&resp.measurement)?;
                let lw = if phi.is_finite() { logq - phi } else { f64::NEG_INFINITY };
                samples.push((lw, resp.prediction));
            }
            Ok(Partial::from_samples(&samples, z, order))
        })
        .collect::<Result<_>>()?;
    Ok(partials
        .iter()
        .fold(Partial::empty(z, order), |acc, p| acc.merge(p)))
}

pub fn estimate_posterior_detailed<M: ForwardModel + ?Sized>(
    model: &M,
    expansion: &AffineExpansion,
    meas: &MeasurementSetup,
    budget: &SampleBudget,
    order: MomentOrder,
) -> Result<Estimate> {
    if expansion.dim() != model.parameter_dim() {
        return Err(Error::dim("expansion", model.parameter_dim(), expansion.dim()));
    }
    let sampler = Sampler::new(budget, expansion.laws())?;
    let n = sampler.units(budget.count);
    let mid = n / 2;
    let first = accumulate(model, expansion, meas, &sampler, 0..mid, order)?;
    let second = accumulate(model, expansion, meas, &sampler, mid..n, order)?;
    let centered = expansion.is_centered();
    let source = source_of(budget.kind);
    let full = Partial::empty(model.prediction_dim(), order)
        .merge(&first)
        .merge(&second);
    Ok(Estimate {
        half: first.finish(centered, source)?,
        full: full.finish(centered, source)?,
    })
}

pub fn estimate_posterior<M: ForwardModel + ?Sized>(
    model: &M,
    expansion: &AffineExpansion,
    meas: &MeasurementSetup,
    budget: &SampleBudget,
    order: MomentOrder,
) -> Result<PosteriorMoments> {
    if expansion.dim() != model.parameter_dim() {
        return Err(Error::dim("expansion", model.parameter_dim(), expansion.dim()));
    }
    let sampler = Sampler::new(budget, expansion.laws())?;
    let n = sampler.units(budget.count);
    accumulate(model, expansion, meas, &sampler, 0..n, order)?
        .finish(expansion.is_centered(), source_of(budget.kind))
}

/// Full tensor-product Gauss rule over the coefficients.
pub fn tensor_grid_oracle<M: ForwardModel + ?Sized>(
    model: &M,
    expansion: &AffineExpansion,
    meas: &MeasurementSetup,
    nodes_per_dim: usize,
    order: MomentOrder,
) -> Result<PosteriorMoments> {
    estimate_posterior(model, expansion, meas, &SampleBudget::tensor_grid(nodes_per_dim), order)
}
