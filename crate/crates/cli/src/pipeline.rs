//! Phase orchestration: baseline → ssl → compact → finetune, chained through
//! checkpoints in the output directory.

use std::path::{Path, PathBuf};

use log::{info, warn};
use sslkit_core::compactor::{apply_plan, detect_zero_groups, flop_report, hard_zero, CompactPlan};
use sslkit_core::network::{evaluate, train, Dataset, NetworkModel, TrainHistory};
use sslkit_core::ssl::group_magnitudes;

use crate::checkpoint::{Checkpoint, Metadata, PlanProvenance};
use crate::config::{DatasetFormat, ExperimentConfig, Phase};
use crate::data::{load_cifar10, load_mnist};
use crate::error::{CliError, Result};
use crate::report::{conv_sizes, write_flops, write_group_magnitudes, write_metrics, write_structure, StructureRow};

const EVAL_BATCH: usize = 500;

/// Loads the configured dataset and applies the sample limits.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    let (train_set, test_set) = match d.format {
        DatasetFormat::Mnist => load_mnist(&d.path)?,
        DatasetFormat::Cifar10 => load_cifar10(&d.path)?,
    };
    let cut = |set: Dataset, limit: Option<usize>| match limit {
        Some(n) if n < set.len() => set.head(n),
        _ => set,
    };
    Ok((cut(train_set, d.train_limit), cut(test_set, d.test_limit)))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Reuse a phase's checkpoint when its fingerprint matches the config.
    pub resume: bool,
    /// Input to the first phase instead of the previous phase's checkpoint.
    pub start_from: Option<Checkpoint>,
}

#[derive(Clone, Debug)]
pub struct PhaseResult {
    pub phase: Phase,
    pub checkpoint: Checkpoint,
    pub history: Option<TrainHistory>,
    pub plan: Option<CompactPlan>,
    /// Largest output difference between the compacted net and the
    /// zero-masked original on a test batch.
    pub equivalence: Option<f64>,
    pub reused: bool,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub phases: Vec<PhaseResult>,
    pub structure: Vec<StructureRow>,
}

impl PipelineOutcome {
    pub fn last(&self) -> &PhaseResult {
        self.phases.last().expect("at least one phase")
    }

    pub fn phase(&self, phase: Phase) -> Option<&PhaseResult> {
        self.phases.iter().find(|p| p.phase == phase)
    }
}

pub fn checkpoint_path(dir: &Path, phase: Phase) -> PathBuf {
    dir.join(phase.checkpoint_name())
}

fn phase_seed(cfg: &ExperimentConfig, phase: Phase) -> u64 {
    cfg.seed.wrapping_add(Phase::ALL.iter().position(|&p| p == phase).expect("known phase") as u64)
}

fn input_model(cfg: &ExperimentConfig, phase: Phase, done: &[PhaseResult], start: &mut Option<Checkpoint>) -> Result<NetworkModel> {
    let prev = match phase.previous() {
        None => {
            let (shape, specs) = cfg.network.resolve()?;
            return Ok(NetworkModel::from_specs(shape, &specs, cfg.seed)?);
        }
        Some(p) => p,
    };
    if let Some(r) = done.iter().find(|r| r.phase == prev) {
        return Ok(r.checkpoint.model.clone());
    }
    if let Some(ck) = start.take() {
        return Ok(ck.model);
    }
    let path = checkpoint_path(&cfg.output_dir, prev);
    if !path.exists() {
        return Err(CliError::Config(format!(
            "the {phase} phase needs the {prev} checkpoint {}; run the {prev} phase first",
            path.display()
        )));
    }
    let ck = Checkpoint::load(&path)?;
    if ck.meta.fingerprint != cfg.fingerprint(prev) {
        warn!("{} was produced by a different configuration", path.display());
    }
    Ok(ck.model)
}

fn run_phase(
    cfg: &ExperimentConfig,
    phase: Phase,
    model: NetworkModel,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<PhaseResult> {
    let dir = &cfg.output_dir;
    let meta = |epochs: usize, err: f64| Metadata {
        phase: phase.as_str().into(),
        seed: cfg.seed,
        fingerprint: cfg.fingerprint(phase),
        epochs,
        test_error: Some(err),
    };
    match phase {
        Phase::Baseline | Phase::Ssl | Phase::Finetune => {
            let mut tc = cfg.phase_train(phase).clone();
            tc.seed = phase_seed(cfg, phase);
            let ssl = if phase == Phase::Ssl { Some(cfg.ssl_config()?) } else { None };
            info!("{phase}: training {} epochs", tc.epochs);
            let (model, history) = train(model, train_set, Some(test_set), &tc, ssl)?;
            let (_, err) = evaluate(&model, test_set, EVAL_BATCH)?;
            write_metrics(&dir.join(format!("{phase}_metrics.csv")), phase.as_str(), &history.epochs)?;
            if let Some(ssl) = ssl {
                write_group_magnitudes(&dir.join("ssl_groups.csv"), &group_magnitudes(&model, ssl)?)?;
            }
            Ok(PhaseResult {
                phase,
                checkpoint: Checkpoint::new(model, meta(tc.epochs, err)),
                history: Some(history),
                plan: None,
                equivalence: None,
                reused: false,
            })
        }
        Phase::Compact => {
            let ssl = cfg.ssl_config()?;
            let plan = detect_zero_groups(&model, ssl)?;
            let small = apply_plan(&model, &plan)?;
            let reference = hard_zero(&model, &plan)?;
            let probe = test_set.head(test_set.len().min(64));
            let (x, _) = probe.batch(&(0..probe.len()).collect::<Vec<_>>());
            let diff = small.predict(&x)?.max_abs_diff(&reference.predict(&x)?);
            info!("compact: {} -> {} parameters, max output difference {diff:e}", model.param_count(), small.param_count());
            write_flops(&dir.join("compact_flops.csv"), &flop_report(&model, &small))?;
            let (_, err) = evaluate(&small, test_set, EVAL_BATCH)?;
            let mut ck = Checkpoint::new(small, meta(0, err));
            ck.plan = Some(PlanProvenance::from_plan(&plan));
            Ok(PhaseResult {
                phase,
                checkpoint: ck,
                history: None,
                plan: Some(plan),
                equivalence: Some(diff),
                reused: false,
            })
        }
    }
}

/// Runs the configured phases in order, writing `<phase>.ckpt` and CSV reports
/// into the output directory.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    mut opts: RunOptions,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(|e| CliError::io(dir, e))?;
    let mut done: Vec<PhaseResult> = Vec::new();
    for &phase in &cfg.phases {
        let path = checkpoint_path(dir, phase);
        if opts.resume && path.exists() {
            let ck = Checkpoint::load(&path)?;
            if ck.meta.fingerprint == cfg.fingerprint(phase) {
                info!("{phase}: reusing {}", path.display());
                done.push(PhaseResult {
                    phase,
                    checkpoint: ck,
                    history: None,
                    plan: None,
                    equivalence: None,
                    reused: true,
                });
                continue;
            }
        }
        let model = input_model(cfg, phase, &done, &mut opts.start_from)?;
        let result = run_phase(cfg, phase, model, train_set, test_set)?;
        result.checkpoint.save(&path)?;
        done.push(result);
    }
    let structure = structure_rows(cfg, &done)?;
    Ok(PipelineOutcome { phases: done, structure })
}

fn structure_rows(cfg: &ExperimentConfig, done: &[PhaseResult]) -> Result<Vec<StructureRow>> {
    let baseline = match done.iter().find(|r| r.phase == Phase::Baseline) {
        Some(r) => r.checkpoint.model.clone(),
        None => {
            let p = checkpoint_path(&cfg.output_dir, Phase::Baseline);
            if p.exists() {
                Checkpoint::load(&p)?.model
            } else {
                let (shape, specs) = cfg.network.resolve()?;
                NetworkModel::from_specs(shape, &specs, cfg.seed)?
            }
        }
    };
    let rows: Vec<StructureRow> = done
        .iter()
        .map(|r| StructureRow {
            phase: r.phase.as_str().into(),
            test_error: r.checkpoint.meta.test_error,
            convs: conv_sizes(&r.checkpoint.model),
            flops: flop_report(&baseline, &r.checkpoint.model),
        })
        .collect();
    write_structure(&cfg.output_dir.join("structure.csv"), &baseline, &rows)?;
    Ok(rows)
}
