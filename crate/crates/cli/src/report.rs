//! CSV output. Numbers are written as `{:.16e}`, which round-trips every
//! `f64` exactly.

use std::io::Write;

/// One row of a convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRecord {
    pub alpha: f64,
    pub quantity: &'static str,
    pub norm_name: &'static str,
    /// Norm of the expansion's approximation of the quantity.
    pub expansion_norm: f64,
    /// Distance between the expansion and the reference estimate.
    pub error_expansion: f64,
    /// Distance between the reference estimate and its half-sample version.
    pub reference_error: f64,
    pub reference_kind: &'static str,
    pub samples: usize,
    pub status: String,
    pub wallclock_seconds: Option<f64>,
}

/// Final state of one refinement run.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineRecord {
    pub alpha: f64,
    pub iterations: usize,
    pub final_update_norm: f64,
    pub norm_name: &'static str,
    /// Distance between the refined reference and the reference posterior mean.
    pub error_refined: f64,
    /// The same distance for the unrefined reference point.
    pub error_initial: f64,
    pub reference_error: f64,
    pub reference_kind: &'static str,
    pub status: String,
    pub wallclock_seconds: Option<f64>,
}

/// Update norms of one refinement run.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineHistory {
    pub alpha: f64,
    pub update_norms: Vec<f64>,
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn finish<W: Write>(mut w: csv::Writer<W>) -> anyhow::Result<()> {
    w.flush()?;
    Ok(())
}

pub fn emit_report<W: Write>(records: &[StudyRecord], timings: bool, out: W) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "alpha",
        "quantity",
        "norm",
        "expansion_norm",
        "error_expansion",
        "reference_error",
        "reference",
        "samples",
        "status",
    ];
    if timings {
        header.push("wallclock_seconds");
    }
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            fmt_f64(r.alpha),
            r.quantity.to_string(),
            r.norm_name.to_string(),
            fmt_f64(r.expansion_norm),
            fmt_f64(r.error_expansion),
            fmt_f64(r.reference_error),
            r.reference_kind.to_string(),
            r.samples.to_string(),
            r.status.clone(),
        ];
        if timings {
            row.push(fmt_f64(r.wallclock_seconds.unwrap_or(f64::NAN)));
        }
        w.write_record(&row)?;
    }
    finish(w)
}

pub fn emit_refine_report<W: Write>(records: &[RefineRecord], timings: bool, out: W) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "alpha",
        "iterations",
        "final_update_norm",
        "norm",
        "error_refined",
        "error_initial",
        "reference_error",
        "reference",
        "status",
    ];
    if timings {
        header.push("wallclock_seconds");
    }
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            fmt_f64(r.alpha),
            r.iterations.to_string(),
            fmt_f64(r.final_update_norm),
            r.norm_name.to_string(),
            fmt_f64(r.error_refined),
            fmt_f64(r.error_initial),
            fmt_f64(r.reference_error),
            r.reference_kind.to_string(),
            r.status.clone(),
        ];
        if timings {
            row.push(fmt_f64(r.wallclock_seconds.unwrap_or(f64::NAN)));
        }
        w.write_record(&row)?;
    }
    finish(w)
}

/// Long format `alpha,iteration,update_norm`.
pub fn emit_history<W: Write>(histories: &[RefineHistory], out: W) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["alpha", "iteration", "update_norm"])?;
    for h in histories {
        for (i, v) in h.update_norms.iter().enumerate() {
            w.write_record([fmt_f64(h.alpha), i.to_string(), fmt_f64(*v)])?;
        }
    }
    finish(w)
}
