//! CSV reports.

use std::fs::{self, File};
use std::path::Path;

use sslkit_core::bench::{plot_rows, BenchRecord};
use sslkit_core::compactor::FlopReport;
use sslkit_core::network::{EpochMetrics, Layer, NetworkModel};
use sslkit_core::ssl::SchemeKind;

use crate::error::{CliError, Result};

pub struct CsvOut {
    path: std::path::PathBuf,
    w: csv::Writer<File>,
}

impl CsvOut {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            w: csv::Writer::from_writer(file),
        })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.w.write_record(fields).map_err(|e| self.err(e))
    }

    fn err(&self, e: csv::Error) -> CliError {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => CliError::io(&self.path, source),
            other => CliError::Config(format!("{}: {other:?}", self.path.display())),
        }
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const METRICS_FIXED: [&str; 8] = [
    "phase",
    "epoch",
    "lr",
    "train_loss",
    "train_error",
    "test_loss",
    "test_error",
    "ssl_penalty",
];

pub fn metrics_header() -> Vec<String> {
    METRICS_FIXED
        .iter()
        .map(|s| s.to_string())
        .chain(SchemeKind::ALL.iter().map(|k| format!("sparsity_{k}")))
        .collect()
}

/// One row per epoch; a sparsity column is empty when that scheme is not
/// configured.
pub fn write_metrics(path: &Path, phase: &str, epochs: &[EpochMetrics]) -> Result<()> {
    let mut out = CsvOut::create(path)?;
    out.row(metrics_header())?;
    for m in epochs {
        let mut row = vec![
            phase.to_string(),
            m.epoch.to_string(),
            m.lr.to_string(),
            m.train_loss.to_string(),
            m.train_error.to_string(),
            opt(m.eval_loss),
            opt(m.eval_error),
            opt(m.ssl_penalty),
        ];
        for k in SchemeKind::ALL {
            row.push(opt(m.sparsity.as_ref().and_then(|s| s.scheme_fraction(k))));
        }
        out.row(row)?;
    }
    out.finish()
}

pub fn write_group_magnitudes(path: &Path, groups: &[(SchemeKind, String, f64)]) -> Result<()> {
    let mut out = CsvOut::create(path)?;
    out.row(["scheme", "layer", "max_abs"])?;
    for (k, layer, v) in groups {
        out.row([k.to_string(), layer.clone(), v.to_string()])?;
    }
    out.finish()
}

pub fn write_flops(path: &Path, report: &FlopReport) -> Result<()> {
    let mut out = CsvOut::create(path)?;
    out.row(["layer", "flops_before", "flops_after", "flops_after_masked", "ratio"])?;
    for l in &report.layers {
        out.row([
            l.name.clone(),
            l.before.to_string(),
            l.after.to_string(),
            l.after_masked.to_string(),
            l.ratio().to_string(),
        ])?;
    }
    out.row([
        "total".to_string(),
        report.total_before.to_string(),
        report.total_after.to_string(),
        report.total_after_masked.to_string(),
        report.ratio().to_string(),
    ])?;
    out.finish()
}

/// Physical size of one conv layer: filters, input channels that still take
/// part, and live shape fibers.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSize {
    pub name: String,
    pub filters: usize,
    pub channels: usize,
    pub fibers: usize,
}

pub fn conv_sizes(model: &NetworkModel) -> Vec<ConvSize> {
    model
        .layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Conv(c) => {
                let w = &c.weights;
                let plane = w.height() * w.width();
                let channels = match &c.live_fibers {
                    None => w.n_channels(),
                    Some(f) => {
                        let mut seen = vec![false; w.n_channels()];
                        f.iter().for_each(|&j| seen[j / plane] = true);
                        seen.iter().filter(|&&s| s).count()
                    }
                };
                Some(ConvSize {
                    name: c.name.clone(),
                    filters: w.n_filters(),
                    channels,
                    fibers: c.live_fiber_count(),
                })
            }
            _ => None,
        })
        .collect()
}

/// One row of the structure table: error, per-conv-layer sizes and FLOP
/// ratios against the baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureRow {
    pub phase: String,
    pub test_error: Option<f64>,
    pub convs: Vec<ConvSize>,
    pub flops: FlopReport,
}

pub fn write_structure(path: &Path, baseline: &NetworkModel, rows: &[StructureRow]) -> Result<()> {
    let names: Vec<String> = conv_sizes(baseline).into_iter().map(|c| c.name).collect();
    let mut out = CsvOut::create(path)?;
    let mut header = vec!["phase".to_string(), "test_error".to_string()];
    for n in &names {
        for col in ["filters", "channels", "fibers", "flop_ratio"] {
            header.push(format!("{n}_{col}"));
        }
    }
    header.push("total_flop_ratio".into());
    out.row(&header)?;
    for r in rows {
        let mut row = vec![r.phase.clone(), opt(r.test_error)];
        for n in &names {
            let c = r.convs.iter().find(|c| &c.name == n);
            row.push(c.map_or(0, |c| c.filters).to_string());
            row.push(c.map_or(0, |c| c.channels).to_string());
            row.push(c.map_or(0, |c| c.fibers).to_string());
            row.push(r.flops.layer(n).map_or(0.0, |l| l.ratio()).to_string());
        }
        row.push(r.flops.ratio().to_string());
        out.row(row)?;
    }
    out.finish()
}

pub fn write_bench(records_path: &Path, plot_path: &Path, records: &[BenchRecord]) -> Result<()> {
    let mut out = CsvOut::create(records_path)?;
    out.row([
        "layer_name",
        "m",
        "k",
        "n",
        "pattern",
        "row_sparsity",
        "col_sparsity",
        "unstructured_sparsity",
        "seed",
        "kernel",
        "wall_time_s",
        "speedup",
        "checksum",
    ])?;
    for r in records {
        let c = &r.case;
        out.row([
            c.layer_name.clone(),
            c.m.to_string(),
            c.k.to_string(),
            c.n.to_string(),
            pattern_str(c.pattern).into(),
            c.row_sparsity.to_string(),
            c.col_sparsity.to_string(),
            c.unstructured_sparsity.to_string(),
            c.seed.to_string(),
            r.kernel.to_string(),
            r.wall_time.to_string(),
            r.speedup_vs_dense.to_string(),
            r.checksum.to_string(),
        ])?;
    }
    out.finish()?;
    let mut plot = CsvOut::create(plot_path)?;
    plot.row(["layer_name", "pattern", "kernel", "sparsity", "speedup"])?;
    for p in plot_rows(records) {
        plot.row([
            p.layer_name,
            pattern_str(p.pattern).into(),
            p.kernel.to_string(),
            p.sparsity.to_string(),
            p.speedup.to_string(),
        ])?;
    }
    plot.finish()
}

fn pattern_str(p: sslkit_core::bench::SparsityPattern) -> &'static str {
    match p {
        sslkit_core::bench::SparsityPattern::Structured => "structured",
        sslkit_core::bench::SparsityPattern::RandomUnstructured => "random_unstructured",
    }
}

/// `(source, layer, dim, error)` rows.
pub fn write_pca(path: &Path, rows: &[(String, String, usize, f64)]) -> Result<()> {
    let mut out = CsvOut::create(path)?;
    out.row(["source", "layer", "dim", "error"])?;
    for (src, layer, d, e) in rows {
        out.row([src.clone(), layer.clone(), d.to_string(), e.to_string()])?;
    }
    out.finish()
}
