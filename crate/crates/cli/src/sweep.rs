//! λ sweeps: one shared baseline, then ssl → compact → finetune per λ.

use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use sslkit_core::compactor::flop_report;
use sslkit_core::network::Dataset;
use sslkit_core::ssl::{sparsity_stats, SchemeKind};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Phase};
use crate::error::{CliError, Result};
use crate::pipeline::{checkpoint_path, run_pipeline, RunOptions};
use crate::report::CsvOut;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    /// `ok`, or the error that ended the run.
    pub status: String,
    pub test_error: Option<f64>,
    pub sparsity: Vec<(SchemeKind, Option<f64>)>,
    pub flop_ratio: Option<f64>,
    pub output_dir: std::path::PathBuf,
}

/// The config for grid point `i`: every scheme's strength set to `lambda`,
/// the baseline phase dropped, output under `lambda_<i>`.
pub fn point_config(cfg: &ExperimentConfig, i: usize, lambda: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.phases.retain(|&p| p != Phase::Baseline);
    c.output_dir = cfg.output_dir.join(format!("lambda_{i:02}"));
    if let Some(ssl) = c.ssl.as_mut() {
        ssl.schemes.iter_mut().for_each(|s| s.strength = lambda);
    }
    c
}

fn run_point(
    cfg: &ExperimentConfig,
    baseline: &Checkpoint,
    i: usize,
    lambda: f64,
    train_set: &Dataset,
    test_set: &Dataset,
    resume: bool,
) -> SweepRow {
    let pc = point_config(cfg, i, lambda);
    let ssl = pc.ssl.clone();
    let mut row = SweepRow {
        lambda,
        status: "ok".into(),
        test_error: None,
        sparsity: SchemeKind::ALL.iter().map(|&k| (k, None)).collect(),
        flop_ratio: None,
        output_dir: pc.output_dir.clone(),
    };
    let opts = RunOptions {
        resume,
        start_from: Some(baseline.clone()),
    };
    match run_pipeline(&pc, train_set, test_set, opts) {
        Ok(out) => {
            row.test_error = out.last().checkpoint.meta.test_error;
            if let (Some(r), Some(ssl)) = (out.phase(Phase::Ssl), ssl.as_ref()) {
                if let Ok(stats) = sparsity_stats(&r.checkpoint.model, ssl) {
                    for (k, v) in row.sparsity.iter_mut() {
                        *v = stats.scheme_fraction(*k);
                    }
                }
            }
            row.flop_ratio = Some(flop_report(&baseline.model, &out.last().checkpoint.model).ratio());
        }
        Err(e) => {
            warn!("sweep point λ={lambda}: {e}");
            row.status = e.to_string();
        }
    }
    row
}

/// Trains the baseline once (or reuses it), then every grid point. A failed
/// point is recorded in its row and the sweep continues.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    lambdas: &[f64],
    train_set: &Dataset,
    test_set: &Dataset,
    resume: bool,
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(CliError::Config("the λ grid must not be empty".into()));
    }
    cfg.validate()?;
    cfg.ssl_config()?;
    let baseline = if cfg.phases.contains(&Phase::Baseline) {
        let mut bc = cfg.clone();
        bc.phases = vec![Phase::Baseline];
        let out = run_pipeline(&bc, train_set, test_set, RunOptions { resume, start_from: None })?;
        out.last().checkpoint.clone()
    } else {
        Checkpoint::load(&checkpoint_path(&cfg.output_dir, Phase::Baseline))?
    };
    info!("sweep over {} λ values", lambdas.len());
    let point = |(i, &l): (usize, &f64)| run_point(cfg, &baseline, i, l, train_set, test_set, resume);
    let rows: Vec<SweepRow> = if parallel {
        lambdas.par_iter().enumerate().map(point).collect()
    } else {
        lambdas.iter().enumerate().map(point).collect()
    };
    write_summary(&cfg.output_dir.join("sweep_summary.csv"), &rows)?;
    Ok(rows)
}

pub fn write_summary(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = CsvOut::create(path)?;
    let mut header: Vec<String> = ["lambda", "status", "test_error", "flop_ratio"].map(String::from).to_vec();
    header.extend(SchemeKind::ALL.iter().map(|k| format!("sparsity_{k}")));
    out.row(header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec = vec![r.lambda.to_string(), r.status.clone(), opt(r.test_error), opt(r.flop_ratio)];
        rec.extend(r.sparsity.iter().map(|(_, v)| opt(*v)));
        out.row(rec)?;
    }
    out.finish()
}
