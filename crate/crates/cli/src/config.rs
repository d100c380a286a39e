//! Study configuration: a flat TOML file whose keys mirror the command-line
//! flags. Flags given on the command line override values from the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::ValueEnum;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Darcy,
    LotkaVolterra,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Quantity {
    Mean,
    Correlation,
    Covariance,
}

impl Quantity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Quantity::Mean => "mean",
            Quantity::Correlation => "correlation",
            Quantity::Covariance => "covariance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionKind {
    /// Darcy: the log-permeability field.
    R1,
    /// Darcy: the pressure field.
    R2,
    /// Lotka–Volterra: the perturbation path.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceKind {
    Qmc,
    Mc,
    Quadrature,
    None,
}

impl ReferenceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReferenceKind::Qmc => "qmc",
            ReferenceKind::Mc => "mc",
            ReferenceKind::Quadrature => "quadrature",
            ReferenceKind::None => "none",
        }
    }
}

/// `[2⁰, 2⁻¹, …, 2⁻⁷]`.
pub fn default_alphas() -> Vec<f64> {
    (0..8).map(|n| 0.5f64.powi(n)).collect()
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub model: ModelKind,
    /// `None` studies every quantity the model supports.
    pub quantity: Option<Quantity>,
    pub prediction: Option<PredictionKind>,
    pub alphas: Vec<f64>,
    pub centered: bool,
    pub reference: ReferenceKind,
    pub samples: usize,
    pub quadrature_nodes: usize,
    pub seed: u64,
    pub mesh_level: u32,
    /// Finer mesh for the KLE basis; the forward mesh is used when absent.
    pub kle_level: Option<u32>,
    pub kle_tol: f64,
    pub sigma_scale: f64,
    pub modes: usize,
    /// Amplitude of the ground-truth draw behind synthetic data.
    pub data_alpha: f64,
    pub iterations: usize,
    pub step_scale: f64,
    pub stop_tol: f64,
    pub backtracking: bool,
    pub output: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub timings: bool,
    pub threads: Option<usize>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Darcy,
            quantity: None,
            prediction: None,
            alphas: default_alphas(),
            centered: true,
            reference: ReferenceKind::Qmc,
            samples: 100_000,
            quadrature_nodes: 8,
            seed: 1,
            mesh_level: 4,
            kle_level: None,
            kle_tol: 1e-3,
            sigma_scale: 10.0,
            modes: 100,
            data_alpha: 1.0,
            iterations: 100,
            step_scale: 1.0,
            stop_tol: 1e-12,
            backtracking: false,
            output: None,
            history: None,
            timings: false,
            threads: None,
        }
    }
}

impl StudyConfig {
    pub fn from_toml_str(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// The prediction, defaulted per model.
    pub fn prediction_or_default(&self) -> PredictionKind {
        self.prediction.unwrap_or(match self.model {
            ModelKind::Darcy => PredictionKind::R1,
            ModelKind::LotkaVolterra => PredictionKind::Identity,
        })
    }

    pub fn quantities(&self) -> Vec<Quantity> {
        match (self.quantity, self.model) {
            (Some(q), _) => vec![q],
            (None, ModelKind::LotkaVolterra) => vec![Quantity::Mean],
            (None, ModelKind::Darcy) => vec![Quantity::Mean, Quantity::Correlation, Quantity::Covariance],
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
            bail!("alphas must be positive, got {a}");
        }
        if self.alphas.windows(2).any(|w| w[1] > w[0]) {
            bail!("alphas must be sorted in descending order");
        }
        if self.reference != ReferenceKind::None && self.reference != ReferenceKind::Quadrature && self.samples < 2 {
            bail!("at least 2 samples are required");
        }
        if !(self.step_scale > 0.0) {
            bail!("step scale must be positive");
        }
        if !(self.data_alpha > 0.0) {
            bail!("data amplitude must be positive");
        }
        match self.model {
            ModelKind::Darcy => {
                if self.prediction_or_default() == PredictionKind::Identity {
                    bail!("darcy predictions are r1 or r2");
                }
                if self.mesh_level < 1 {
                    bail!("mesh level must be at least 1");
                }
                if self.kle_level.is_some_and(|k| k < self.mesh_level) {
                    bail!("the KLE mesh must not be coarser than the forward mesh");
                }
                if !(self.kle_tol > 0.0) {
                    bail!("KLE tolerance must be positive");
                }
            }
            ModelKind::LotkaVolterra => {
                if self.prediction_or_default() != PredictionKind::Identity {
                    bail!("the lotka-volterra prediction is the perturbation path (identity)");
                }
                if !self.centered {
                    bail!("the lotka-volterra prior has standard normal coefficients and is always centered");
                }
                if self.quantities() != [Quantity::Mean] {
                    bail!("lotka-volterra studies support the posterior mean only");
                }
                if !(self.sigma_scale > 0.0) {
                    bail!("noise scale must be positive");
                }
                if self.modes == 0 {
                    bail!("at least one bridge mode is required");
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_toml_keys() {
        let cfg = StudyConfig::from_toml_str(
            r#"
            model = "lotka-volterra"
            alphas = [0.5, 0.25]
            reference = "mc"
            sigma_scale = 5.0
            samples = 1000
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model, ModelKind::LotkaVolterra);
        assert_eq!(cfg.alphas, vec![0.5, 0.25]);
        assert_eq!(cfg.reference, ReferenceKind::Mc);
        assert_eq!(cfg.prediction_or_default(), PredictionKind::Identity);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_keys_and_bad_alphas() {
        assert!(StudyConfig::from_toml_str("nonsense = 1").is_err());
        let cfg = StudyConfig {
            alphas: vec![0.25, 0.5],
            ..StudyConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = StudyConfig {
            alphas: vec![0.5, -0.25],
            ..StudyConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = StudyConfig {
            model: ModelKind::LotkaVolterra,
            quantity: Some(Quantity::Covariance),
            ..StudyConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_alpha_ladder() {
        let a = default_alphas();
        assert_eq!(a.len(), 8);
        assert_eq!(a[0], 1.0);
        assert_eq!(a[7], 1.0 / 128.0);
    }
}
