//! Argument parsing and subcommand dispatch.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use bayes_lsa::mesh::FemField;
use clap::{Args, Parser, Subcommand};

use crate::config::{ModelKind, PredictionKind, Quantity, ReferenceKind, StudyConfig};
use crate::report::{emit_history, emit_refine_report, emit_report, fmt_f64};
use crate::study::{build_problem, darcy_kle, run_convergence_study, run_refinement_study};

#[derive(Debug, Parser)]
#[command(name = "bayes-lsa", version, about = "Perturbation expansions of posterior moments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Expansion error against a sampling reference over a ladder of α.
    Converge(StudyArgs),
    /// Iterative refinement of the reference point over a ladder of α.
    Refine(StudyArgs),
    /// Write the synthetic data vector (and the Darcy ground truth with --history).
    GenerateData(StudyArgs),
    /// Write the KLE eigenpairs of the Darcy prior.
    KleDump(StudyArgs),
}

#[derive(Debug, Args)]
struct StudyArgs {
    /// TOML file with the same keys as the flags; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    #[arg(long, value_enum)]
    quantity: Option<Quantity>,
    #[arg(long, value_enum)]
    prediction: Option<PredictionKind>,
    /// Comma-separated, descending.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    alphas: Option<Vec<f64>>,
    #[arg(long, conflicts_with = "uncentered")]
    centered: bool,
    /// Shift the uniform KLE coefficients by +0.1.
    #[arg(long)]
    uncentered: bool,
    #[arg(long, value_enum)]
    reference: Option<ReferenceKind>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    quadrature_nodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mesh_level: Option<u32>,
    #[arg(long)]
    kle_level: Option<u32>,
    #[arg(long)]
    kle_tol: Option<f64>,
    #[arg(long)]
    sigma_scale: Option<f64>,
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long)]
    data_alpha: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    step_scale: Option<f64>,
    #[arg(long)]
    stop_tol: Option<f64>,
    #[arg(long)]
    backtracking: bool,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Second CSV destination (refinement histories, Darcy ground truth).
    #[arg(long)]
    history: Option<PathBuf>,
    /// Add a wall-clock column.
    #[arg(long)]
    timings: bool,
    #[arg(long)]
    threads: Option<usize>,
}

impl StudyArgs {
    fn resolve(self) -> anyhow::Result<StudyConfig> {
        let mut cfg = match &self.config {
            Some(p) => StudyConfig::load(p)?,
            None => StudyConfig::default(),
        };
        macro_rules! take {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        take!(model, alphas, reference, samples, quadrature_nodes, seed, mesh_level, kle_tol, sigma_scale);
        take!(modes, data_alpha, iterations, step_scale, stop_tol);
        if self.quantity.is_some() {
            cfg.quantity = self.quantity;
        }
        if self.prediction.is_some() {
            cfg.prediction = self.prediction;
        }
        if self.kle_level.is_some() {
            cfg.kle_level = self.kle_level;
        }
        if self.output.is_some() {
            cfg.output = self.output;
        }
        if self.history.is_some() {
            cfg.history = self.history;
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        if self.centered {
            cfg.centered = true;
        }
        if self.uncentered {
            cfg.centered = false;
        }
        cfg.backtracking |= self.backtracking;
        cfg.timings |= self.timings;
        Ok(cfg)
    }
}

fn sink(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn converge(cfg: &StudyConfig) -> anyhow::Result<()> {
    let report = run_convergence_study(cfg)?;
    let mut out = sink(cfg.output.as_deref())?;
    emit_report(&report.records, cfg.timings, &mut out)?;
    out.flush()?;
    Ok(())
}

fn refine(cfg: &StudyConfig) -> anyhow::Result<()> {
    let report = run_refinement_study(cfg)?;
    let mut out = sink(cfg.output.as_deref())?;
    emit_refine_report(&report.records, cfg.timings, &mut out)?;
    out.flush()?;
    if let Some(p) = &cfg.history {
        let mut h = sink(Some(p))?;
        emit_history(&report.histories, &mut h)?;
        h.flush()?;
    }
    Ok(())
}

fn generate_data(cfg: &StudyConfig) -> anyhow::Result<()> {
    cfg.validate()?;
    let problem = build_problem(cfg)?;
    let mut out = sink(cfg.output.as_deref())?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["index", "value"])?;
        for (i, v) in problem.meas.data.iter().enumerate() {
            w.write_record([i.to_string(), fmt_f64(*v)])?;
        }
        w.flush()?;
    }
    out.flush()?;
    if let (Some(p), Some(truth), ModelKind::Darcy) = (&cfg.history, &problem.truth, cfg.model) {
        let (pmesh, _) = darcy_kle(cfg)?;
        let mut h = sink(Some(p))?;
        FemField::new(&pmesh, truth.clone())?.write_csv(&mut h)?;
        h.flush()?;
    }
    Ok(())
}

fn kle_dump(cfg: &StudyConfig) -> anyhow::Result<()> {
    if cfg.model != ModelKind::Darcy {
        anyhow::bail!("only the darcy prior has a KLE basis");
    }
    cfg.validate()?;
    let (mesh, kle) = darcy_kle(cfg)?;
    let mut out = sink(cfg.output.as_deref())?;
    kle.write_csv(&mesh, &mut out)?;
    out.flush()?;
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::parse_from(args);
    let (task, args): (fn(&StudyConfig) -> anyhow::Result<()>, StudyArgs) = match cli.command {
        Command::Converge(a) => (converge, a),
        Command::Refine(a) => (refine, a),
        Command::GenerateData(a) => (generate_data, a),
        Command::KleDump(a) => (kle_dump, a),
    };
    let cfg = args.resolve()?;
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()?
            .install(|| task(&cfg)),
        None => task(&cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> StudyConfig {
        let cli = Cli::try_parse_from(args).unwrap();
        match cli.command {
            Command::Converge(a) | Command::Refine(a) | Command::GenerateData(a) | Command::KleDump(a) => {
                a.resolve().unwrap()
            }
        }
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("study.toml");
        std::fs::write(&path, "samples = 500\nseed = 9\nalphas = [0.5]\n").unwrap();
        let p = path.to_str().unwrap();
        let cfg = parse(&["bayes-lsa", "converge", "--config", p, "--samples", "64", "--alphas", "0.25,0.125"]);
        assert_eq!(cfg.samples, 64);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.alphas, vec![0.25, 0.125]);
    }

    #[test]
    fn centering_flags() {
        assert!(!parse(&["bayes-lsa", "converge", "--uncentered"]).centered);
        assert!(parse(&["bayes-lsa", "converge", "--centered"]).centered);
        assert!(Cli::try_parse_from(["bayes-lsa", "converge", "--centered", "--uncentered"]).is_err());
    }

    #[test]
    fn model_names() {
        let cfg = parse(&["bayes-lsa", "refine", "--model", "lotka-volterra", "--sigma-scale", "5"]);
        assert_eq!(cfg.model, ModelKind::LotkaVolterra);
        assert_eq!(cfg.sigma_scale, 5.0);
    }
}
