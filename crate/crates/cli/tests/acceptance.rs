//! Acceptance gates. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Training runs live under `target/tmp/acceptance` and are reused when their
//! config fingerprint matches; `SSLKIT_ACCEPTANCE_FRESH=1` retrains from
//! scratch. Criterion numbers given as arguments select a subset:
//! `cargo test --test acceptance -- 1 2 3`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sslkit_cli::checkpoint::Checkpoint;
use sslkit_cli::commands::pca_curves;
use sslkit_cli::config::{ExperimentConfig, Phase};
use sslkit_cli::data::load_mnist;
use sslkit_cli::pipeline::{checkpoint_path, run_pipeline, PipelineOutcome, RunOptions};
use sslkit_core::bench::{
    alexnet_shape_suite, grid_inversions, run_bench, sparsity_grid, BenchOptions, Kernel, SparsityPattern,
};
use sslkit_core::compactor::{apply_plan, detect_zero_groups, flop_report, hard_zero};
use sslkit_core::network::{gradient_check, Dataset, Layer, LayerSpec, NetworkModel, Shape3};
use sslkit_core::ssl::{
    enumerate_groups, group_magnitudes, group_max_abs, is_dead, GroupingScheme, LayerSelector, SchemeKind, SslConfig,
    SslRegularizer,
};
use sslkit_core::tensor::{csr_dense_matmul, gemm, im2col, lower_weights, ConvGeometry, CsrMatrix, DenseMatrix, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Ctx {
    root: PathBuf,
    work: PathBuf,
    mnist: Option<(Dataset, Dataset)>,
}

impl Ctx {
    fn mnist(&mut self) -> Result<&(Dataset, Dataset), String> {
        if self.mnist.is_none() {
            let dir = self.root.join("data/mnist");
            self.mnist = Some(load_mnist(&dir).map_err(|e| format!("MNIST not available: {e}"))?);
        }
        Ok(self.mnist.as_ref().unwrap())
    }

    /// A frozen config from `configs/`, redirected into the work directory.
    fn config(&self, name: &str) -> Result<ExperimentConfig, String> {
        let mut cfg = ExperimentConfig::load(&self.root.join("configs").join(name)).map_err(|e| e.to_string())?;
        cfg.output_dir = self.work.join(name.trim_end_matches(".toml"));
        cfg.dataset.path = self.root.join(&cfg.dataset.path);
        Ok(cfg)
    }

    fn run(&mut self, cfg: &ExperimentConfig, start_from: Option<Checkpoint>) -> Result<PipelineOutcome, String> {
        let (train, test) = self.mnist()?;
        let opts = RunOptions { resume: true, start_from };
        run_pipeline(cfg, train, test, opts).map_err(|e| e.to_string())
    }

    fn lenet(&mut self) -> Result<(ExperimentConfig, PipelineOutcome), String> {
        let cfg = self.config("lenet_filter_channel.toml")?;
        let out = self.run(&cfg, None)?;
        Ok((cfg, out))
    }
}

fn phase_ck(out: &PipelineOutcome, phase: Phase) -> &Checkpoint {
    &out.phase(phase).expect("phase ran").checkpoint
}

fn test_error(ck: &Checkpoint) -> f64 {
    ck.meta.test_error.expect("trained checkpoints record a test error")
}

fn randomize_biases(m: &mut NetworkModel, rng: &mut ChaCha8Rng) {
    for l in m.weighted_layers() {
        for b in m.weights_mut(l).unwrap().bias_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn conv(name: &str, filters: usize, k: usize, stride: usize, pad: usize) -> LayerSpec {
    LayerSpec::Conv {
        name: name.into(),
        filters,
        kernel: [k, k],
        stride: [stride, stride],
        pad: [pad, pad],
    }
}

fn fc(name: &str, outputs: usize) -> LayerSpec {
    LayerSpec::Fc {
        name: name.into(),
        outputs,
    }
}

fn pool() -> LayerSpec {
    LayerSpec::MaxPool {
        size: [2, 2],
        stride: [2, 2],
    }
}

/// A plain CNN, a residual CNN or an MLP with random sizes.
fn random_net(rng: &mut ChaCha8Rng) -> (Shape3, Vec<LayerSpec>) {
    match rng.gen_range(0..3) {
        0 => {
            let hw = rng.gen_range(6..=8);
            let mut specs = vec![
                conv("conv1", rng.gen_range(2..=3), rng.gen_range(2..=3), rng.gen_range(1..=2), rng.gen_range(0..=1)),
                LayerSpec::Relu,
            ];
            if rng.gen_bool(0.5) {
                specs.push(pool());
            } else {
                specs.push(conv("conv2", rng.gen_range(2..=3), 2, 1, rng.gen_range(0..=1)));
            }
            specs.extend([fc("fc1", rng.gen_range(3..=5)), LayerSpec::Relu, fc("fc2", 3)]);
            ([rng.gen_range(1..=2), hw, hw], specs)
        }
        1 => {
            let f = rng.gen_range(2..=3);
            let specs = vec![
                conv("conv0", f, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::ResidualBegin { id: 0 },
                conv("block_conv1", f, 3, 1, 1),
                LayerSpec::Relu,
                conv("block_conv2", f, 3, 1, 1),
                LayerSpec::ResidualEnd { id: 0 },
                LayerSpec::Relu,
                pool(),
                fc("fc", 3),
            ];
            ([1, 4, 4], specs)
        }
        _ => {
            let hw = rng.gen_range(3..=5);
            let specs = vec![
                fc("fc1", rng.gen_range(4..=8)),
                LayerSpec::Relu,
                fc("fc2", rng.gen_range(3..=6)),
                LayerSpec::Relu,
                fc("fc3", 3),
            ];
            ([1, hw, hw], specs)
        }
    }
}

fn c1_gradients() -> Outcome {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut layer_checks, mut lasso_checks, mut failures) = (0, 0, Vec::new());
    let mut max_params = 0;
    for trial in 0..100 {
        let (shape, specs) = loop {
            let (shape, specs) = random_net(&mut rng);
            // Geometries that do not tile the input are resampled.
            let Ok(m) = NetworkModel::from_specs(shape, &specs, 0) else { continue };
            if m.param_count() <= 500 {
                break (shape, specs);
            }
        };
        let mut m = NetworkModel::from_specs(shape, &specs, trial).map_err(|e| e.to_string())?;
        max_params = max_params.max(m.param_count());
        randomize_biases(&mut m, &mut rng);
        let b = rng.gen_range(2..=3);
        let [c, h, w] = shape;
        let x = normal_tensor(&[b, c, h, w], &mut rng);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..m.output_len())).collect();
        let r = gradient_check(&m, &x, &labels, H, TOL).map_err(|e| e.to_string())?;
        layer_checks += r.checked;
        if r.failures > 0 {
            failures.push(format!("trial {trial} layers: {} of {} (max rel {:.2e})", r.failures, r.checked, r.max_rel_err));
        }
        // Group-Lasso gradients of every applicable scheme.
        for kind in SchemeKind::ALL {
            let cfg = SslConfig {
                couple_filter_channel: false,
                ..SslConfig::new(vec![GroupingScheme::new(kind, rng.gen_range(0.1..2.0))])
            };
            let Ok(reg) = SslRegularizer::new(&cfg, &m) else { continue };
            if reg.terms().iter().all(|(_, g)| g.is_empty()) {
                continue;
            }
            let grad = reg.gradient(&m);
            let mut probe = m.clone();
            for l in m.weighted_layers() {
                for i in 0..m.weights(l).unwrap().param_len() {
                    let base = m.weights(l).unwrap().param(i);
                    probe.weights_mut(l).unwrap().set_param(i, base + H);
                    let plus = reg.penalty(&probe);
                    probe.weights_mut(l).unwrap().set_param(i, base - H);
                    let minus = reg.penalty(&probe);
                    probe.weights_mut(l).unwrap().set_param(i, base);
                    let fd = (plus - minus) / (2.0 * H);
                    let an = grad.layer(l).unwrap().get(i);
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                    lasso_checks += 1;
                    if rel > TOL {
                        failures.push(format!("trial {trial} {kind} layer {l} param {i}: rel {rel:.2e}"));
                    }
                }
            }
        }
    }
    let detail = format!(
        "100 nets (≤{max_params} params), {layer_checks} layer and {lasso_checks} group-Lasso partials, {} failures",
        failures.len()
    );
    check(failures.is_empty(), if failures.is_empty() { detail } else { format!("{detail}: {}", failures[..failures.len().min(3)].join("; ")) })
}

/// Direct convolution of one `C×H×W` input.
fn direct_conv(x: &Tensor, w: &Tensor, bias: &[f64], g: ConvGeometry) -> DenseMatrix {
    let &[c, h, wd] = x.shape() else { unreachable!() };
    let &[n, _, kh, kw] = w.shape() else { unreachable!() };
    let (ho, wo) = g.output_extent(h, wd).unwrap();
    let mut out = DenseMatrix::zeros(n, ho * wo);
    for f in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = bias[f];
                for ch in 0..c {
                    for a in 0..kh {
                        for b in 0..kw {
                            let iy = (oy * g.stride.0 + a) as isize - g.pad.0 as isize;
                            let ix = (ox * g.stride.1 + b) as isize - g.pad.1 as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                s += w.at(&[f, ch, a, b]) * x.at(&[ch, iy as usize, ix as usize]);
                            }
                        }
                    }
                }
                out.set(f, oy * wo + ox, s);
            }
        }
    }
    out
}

fn c2_lowering() -> Outcome {
    const TOL: f64 = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut conv_cases, mut csr_cases, mut worst) = (0, 0, 0.0f64);
    while conv_cases < 150 {
        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=9), rng.gen_range(1..=9));
        let (kh, kw) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let stride = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let pad = (rng.gen_range(0..=2), rng.gen_range(0..=2));
        let g = ConvGeometry::new((kh, kw), stride, pad);
        if g.output_extent(h, w).is_err() {
            continue;
        }
        let n = rng.gen_range(1..=4);
        let x = normal_tensor(&[c, h, w], &mut rng);
        let wt = normal_tensor(&[n, c, kh, kw], &mut rng);
        let bias: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let want = direct_conv(&x, &wt, &bias, g);
        let mut got = gemm(&lower_weights(&wt).unwrap(), &im2col(&x, g).unwrap()).unwrap();
        for f in 0..n {
            for j in 0..got.cols() {
                got.set(f, j, got.get(f, j) + bias[f]);
            }
        }
        worst = worst.max(got.max_abs_diff(&want));
        // The network's conv layer on the same input.
        let spec = LayerSpec::Conv {
            name: "conv".into(),
            filters: n,
            kernel: [kh, kw],
            stride: [stride.0, stride.1],
            pad: [pad.0, pad.1],
        };
        let mut m = NetworkModel::from_specs([c, h, w], &[spec], 0).map_err(|e| e.to_string())?;
        let l = m.weighted_layers()[0];
        let p = m.weights_mut(l).unwrap();
        p.weights_mut().copy_from_slice(wt.data());
        p.bias_mut().copy_from_slice(&bias);
        let out = m.predict(&x.clone().reshape(vec![1, c, h, w]).unwrap()).map_err(|e| e.to_string())?;
        let flat = DenseMatrix::new(1, want.data().len(), want.data().to_vec()).unwrap();
        worst = worst.max(out.max_abs_diff(&flat));
        conv_cases += 1;
    }
    while csr_cases < 100 {
        let (m, k, n) = (rng.gen_range(1..=24), rng.gen_range(1..=24), rng.gen_range(1..=24));
        let density = [0.0, 1.0, rng.gen_range(0.0..1.0)][csr_cases % 3];
        let a = DenseMatrix::from_fn(m, k, |_, _| {
            if rng.gen_bool(density) {
                rng.sample(StandardNormal)
            } else {
                0.0
            }
        });
        let b = DenseMatrix::from_fn(k, n, |_, _| rng.sample(StandardNormal));
        let want = DenseMatrix::from_fn(m, n, |i, j| (0..k).map(|t| a.get(i, t) * b.get(t, j)).sum());
        let sparse = csr_dense_matmul(&CsrMatrix::from_dense(&a, 0.0), &b).unwrap();
        let dense = gemm(&a, &b).unwrap();
        worst = worst.max(sparse.max_abs_diff(&want)).max(dense.max_abs_diff(&want)).max(sparse.max_abs_diff(&dense));
        csr_cases += 1;
    }
    check(
        worst <= TOL,
        format!("{conv_cases} conv and {csr_cases} CSR cases, max elementwise difference {worst:.2e} (tol {TOL:e})"),
    )
}

/// Toy residual CNN with conv→conv, a block, and fc→fc adjacencies.
fn toy_residual() -> (Shape3, Vec<LayerSpec>) {
    (
        [2, 8, 8],
        vec![
            conv("conv1", 4, 3, 1, 0),
            LayerSpec::Relu,
            conv("conv2", 5, 3, 1, 0),
            LayerSpec::Relu,
            LayerSpec::ResidualBegin { id: 0 },
            conv("conv3", 5, 3, 1, 1),
            LayerSpec::Relu,
            conv("conv4", 5, 3, 1, 1),
            LayerSpec::ResidualEnd { id: 0 },
            LayerSpec::Relu,
            pool(),
            fc("fc1", 6),
            LayerSpec::Relu,
            fc("fc2", 3),
        ],
    )
}

fn c3_compaction() -> Outcome {
    use sslkit_core::network::presets;
    const TOL: f64 = 1e-10;
    let nets = [toy_residual(), presets::lenet(), presets::mlp(), presets::mini_resnet()];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut done, mut structural, mut removed_blocks, mut worst) = (0, 0, 0, 0.0f64);
    let mut per_kind = [0usize; 8];
    let mut attempt = 0u64;
    while done < 100 {
        attempt += 1;
        if attempt > 1000 {
            return Err(format!("only {done} completed injections in 1000 attempts"));
        }
        let ki = (attempt as usize) % SchemeKind::ALL.len();
        let kind = SchemeKind::ALL[ki];
        let (shape, specs) = match kind {
            SchemeKind::DepthWise => [&nets[0], &nets[3]][rng.gen_range(0..2)].clone(),
            SchemeKind::NeuronWiseIn | SchemeKind::NeuronWiseOut => [&nets[0], &nets[1], &nets[2]][rng.gen_range(0..3)].clone(),
            _ => [&nets[0], &nets[1]][rng.gen_range(0..2)].clone(),
        };
        let mut m = NetworkModel::from_specs(shape, &specs, attempt).map_err(|e| e.to_string())?;
        randomize_biases(&mut m, &mut rng);
        let layers = match kind {
            SchemeKind::DepthWise => LayerSelector::Default,
            SchemeKind::NeuronWiseIn | SchemeKind::NeuronWiseOut => LayerSelector::Fc,
            _ => LayerSelector::All,
        };
        let cfg = SslConfig {
            couple_filter_channel: false,
            ..SslConfig::new(vec![GroupingScheme::new(kind, 1.0).with_layers(layers)])
        };
        let p = rng.gen_range(0.1..0.7);
        for s in cfg.effective_schemes() {
            for g in enumerate_groups(&s, &m).map_err(|e| e.to_string())? {
                if rng.gen_bool(p) {
                    let w = m.weights_mut(g.layer).unwrap();
                    for &i in &g.members {
                        w.set_param(i, 0.0);
                    }
                }
            }
        }
        let plan = match detect_zero_groups(&m, &cfg) {
            Ok(plan) => plan,
            Err(sslkit_core::Error::Structural { .. }) => {
                structural += 1;
                continue;
            }
            Err(e) => return Err(e.to_string()),
        };
        let small = apply_plan(&m, &plan).map_err(|e| e.to_string())?;
        let reference = hard_zero(&m, &plan).map_err(|e| e.to_string())?;
        let [c, h, w] = m.input_shape();
        let x = Tensor::from_fn(&[4, c, h, w], |_| rng.gen_range(-1.0..1.0));
        let diff = small.predict(&x).unwrap().max_abs_diff(&reference.predict(&x).unwrap());
        worst = worst.max(diff);
        removed_blocks += plan.removed_blocks.len();
        per_kind[ki] += 1;
        done += 1;
    }
    check(
        worst <= TOL,
        format!(
            "100 injections (per scheme {per_kind:?}, {structural} structural rejections, {removed_blocks} blocks removed), max output difference {worst:.2e}"
        ),
    )
}

fn conv_filters(m: &NetworkModel, name: &str) -> usize {
    m.weights(m.find_layer(name).unwrap()).unwrap().n_filters()
}

fn c4_lenet_table(ctx: &mut Ctx) -> Outcome {
    let (_, out) = ctx.lenet()?;
    let base = phase_ck(&out, Phase::Baseline);
    let fine = phase_ck(&out, Phase::Finetune);
    let (eb, ef) = (test_error(base), test_error(fine));
    let (f1, f2) = (conv_filters(&fine.model, "conv1"), conv_filters(&fine.model, "conv2"));
    let report = flop_report(&base.model, &fine.model);
    let r2 = report.layer("conv2").map(|l| l.ratio()).unwrap_or(f64::NAN);
    let r1 = report.layer("conv1").map(|l| l.ratio()).unwrap_or(f64::NAN);
    check(
        eb <= 0.013 && f1 <= 10 && f2 <= 25 && ef <= eb + 0.003 && r2 <= 0.30,
        format!(
            "baseline error {:.2}%, filters {f1}/{f2}, error {:.2}% (limit {:.2}%), FLOP ratio conv1 {:.1}% conv2 {:.1}%",
            100.0 * eb,
            100.0 * ef,
            100.0 * (eb + 0.003),
            100.0 * r1,
            100.0 * r2
        ),
    )
}

fn c5_shape_wise(ctx: &mut Ctx) -> Outcome {
    let (_, lenet) = ctx.lenet()?;
    let base = phase_ck(&lenet, Phase::Baseline).clone();
    let mut cfg = ctx.config("lenet_shape_wise.toml")?;
    cfg.phases.retain(|&p| p != Phase::Baseline);
    let eb = test_error(&base);
    let out = ctx.run(&cfg, Some(base))?;
    let fine = phase_ck(&out, Phase::Finetune);
    let ef = test_error(fine);
    let fibers = match &fine.model.layers()[fine.model.find_layer("conv1").unwrap()] {
        Layer::Conv(c) => c.live_fiber_count(),
        _ => unreachable!(),
    };
    let fibers2 = match &fine.model.layers()[fine.model.find_layer("conv2").unwrap()] {
        Layer::Conv(c) => c.live_fiber_count(),
        _ => unreachable!(),
    };
    check(
        fibers <= 22 && ef <= eb + 0.003,
        format!(
            "conv1 fibers {fibers}/25, conv2 fibers {fibers2}, error {:.2}% (baseline {:.2}%)",
            100.0 * ef,
            100.0 * eb
        ),
    )
}

fn c6_bimodality(ctx: &mut Ctx) -> Outcome {
    let (cfg, out) = ctx.lenet()?;
    let ssl = cfg.ssl.as_ref().unwrap();
    let mags = group_magnitudes(&phase_ck(&out, Phase::Ssl).model, ssl).map_err(|e| e.to_string())?;
    let lo = mags.iter().filter(|(_, _, v)| *v < 1e-4).count();
    let gap: Vec<String> = mags
        .iter()
        .filter(|(_, _, v)| (1e-4..1e-2).contains(v))
        .map(|(k, l, v)| format!("{k} {l} {v:.2e}"))
        .collect();
    let hi = mags.len() - lo - gap.len();
    check(
        gap.is_empty() && lo > 0 && hi > 0,
        format!(
            "{} groups: {lo} below 1e-4, {} in [1e-4, 1e-2) {gap:?}, {hi} at or above 1e-2",
            mags.len(),
            gap.len()
        ),
    )
}

fn c7_depth_wise(ctx: &mut Ctx) -> Outcome {
    let cfg = ctx.config("mini_resnet_depth_wise.toml")?;
    let out = ctx.run(&cfg, None)?;
    let ssl_model = &phase_ck(&out, Phase::Ssl).model;
    let plan = detect_zero_groups(ssl_model, cfg.ssl.as_ref().unwrap()).map_err(|e| e.to_string())?;
    let small = apply_plan(ssl_model, &plan).map_err(|e| e.to_string())?;
    let reference = hard_zero(ssl_model, &plan).map_err(|e| e.to_string())?;
    let (_, test) = ctx.mnist()?;
    let probe = test.head(256);
    let (x, _) = probe.batch(&(0..probe.len()).collect::<Vec<_>>());
    let diff = small.predict(&x).unwrap().max_abs_diff(&reference.predict(&x).unwrap());
    let saved = &phase_ck(&out, Phase::Compact).model;
    let eb = test_error(phase_ck(&out, Phase::Baseline));
    let ef = test_error(phase_ck(&out, Phase::Finetune));
    check(
        !plan.removed_blocks.is_empty() && diff == 0.0 && saved == &small && ef <= eb + 0.005,
        format!(
            "removed blocks {:?}, equivalence difference {diff:e}, error {:.2}% vs unregularized {:.2}%",
            plan.removed_blocks,
            100.0 * ef,
            100.0 * eb
        ),
    )
}

fn c8_structured_vs_unstructured() -> Outcome {
    let suite = alexnet_shape_suite();
    let opts = BenchOptions {
        repeats: 41,
        min_sample_time: 0.1,
        ..BenchOptions::default()
    };
    let recs = run_bench(&suite, &Kernel::ALL, &opts).map_err(|e| e.to_string())?;
    let speedup = |layer: &str, pattern: SparsityPattern, kernel: Kernel| {
        recs.iter()
            .find(|r| r.case.layer_name == layer && r.case.pattern == pattern && r.kernel == kernel)
            .map(|r| r.speedup_vs_dense)
            .expect("record present")
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for c in suite.iter().filter(|c| c.pattern == SparsityPattern::Structured) {
        let s = speedup(&c.layer_name, SparsityPattern::Structured, Kernel::CompactedDense);
        let u = speedup(&c.layer_name, SparsityPattern::RandomUnstructured, Kernel::CsrSparse);
        let structured = c.row_sparsity > 0.0 || c.col_sparsity > 0.0;
        ok &= s >= u && (!structured || s >= 1.0);
        parts.push(format!("{} {s:.2}x vs {u:.2}x", c.layer_name));
    }
    check(ok, format!("compacted vs CSR: {}", parts.join(", ")))
}

fn c9_monotone_grid() -> Outcome {
    const FRACTIONS: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 0.8];
    let cases = sparsity_grid((512, 1152, 729), &FRACTIONS, 9);
    let recs = run_bench(&cases, &[Kernel::Dense, Kernel::CompactedDense], &BenchOptions::default())
        .map_err(|e| e.to_string())?;
    let speedups: Vec<f64> = recs
        .iter()
        .filter(|r| r.kernel == Kernel::CompactedDense)
        .map(|r| r.speedup_vs_dense)
        .collect();
    let inv = grid_inversions(&speedups, FRACTIONS.len(), 0.0);
    let corner = speedups[speedups.len() - 1];
    check(
        inv.len() <= 1,
        format!("{} inversions over 40 neighbour pairs {inv:?}, speedup at 80%/80% {corner:.2}x", inv.len()),
    )
}

fn c10_pca(ctx: &mut Ctx) -> Outcome {
    let (cfg, out) = ctx.lenet()?;
    let layers = ["conv2".to_string()];
    let curve = |p: Phase| -> Result<Vec<f64>, String> {
        let path = checkpoint_path(&cfg.output_dir, p);
        let ck = Checkpoint::load(&path).map_err(|e| e.to_string())?;
        Ok(pca_curves(&ck.model, Some(&layers), None).map_err(|e| e.to_string())?.into_iter().map(|r| r.2).collect())
    };
    drop(out);
    let (base, ssl) = (curve(Phase::Baseline)?, curve(Phase::Ssl)?);
    let monotone = |c: &[f64]| c.windows(2).all(|w| w[1] <= w[0]);
    let below = base.iter().zip(&ssl).filter(|(b, s)| *s > *b).count();
    let at = |c: &[f64], d: usize| c.get(d - 1).copied().unwrap_or(f64::NAN);
    check(
        monotone(&base) && monotone(&ssl) && below == 0 && base.len() == ssl.len(),
        format!(
            "{} dims, monotone {}/{}, ssl above baseline at {below} dims; error at d=5 {:.3} vs {:.3}, d=10 {:.3} vs {:.3}",
            base.len(),
            monotone(&base),
            monotone(&ssl),
            at(&ssl, 5),
            at(&base, 5),
            at(&ssl, 10),
            at(&base, 10)
        ),
    )
}

fn c11_mlp_pixels(ctx: &mut Ctx) -> Outcome {
    let cfg = ctx.config("mlp_neuron_wise_in.toml")?;
    let out = ctx.run(&cfg, None)?;
    let m = &phase_ck(&out, Phase::Ssl).model;
    let l = m.find_layer("fc1").unwrap();
    let groups = enumerate_groups(&GroupingScheme::new(SchemeKind::NeuronWiseIn, 1.0), m).map_err(|e| e.to_string())?;
    let w = m.weights(l).unwrap();
    let threshold = cfg.ssl.as_ref().unwrap().zero_threshold;
    let (mut dead, mut live) = (Vec::new(), Vec::new());
    for g in groups.iter().filter(|g| g.layer == l) {
        let (r, c) = ((g.index / 28) as f64, (g.index % 28) as f64);
        let d = ((r - 13.5).powi(2) + (c - 13.5).powi(2)).sqrt();
        if is_dead(group_max_abs(w, &g.members), threshold) {
            dead.push(d);
        } else {
            live.push(d);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let frac = dead.len() as f64 / (dead.len() + live.len()) as f64;
    let base_err = test_error(phase_ck(&out, Phase::Baseline));
    let ssl_err = test_error(phase_ck(&out, Phase::Ssl));
    check(
        frac >= 0.25 && !live.is_empty() && mean(&dead) > mean(&live),
        format!(
            "{} of 784 input pixels zeroed ({:.1}%), mean centre distance {:.2} zeroed vs {:.2} surviving, error {:.2}% (baseline {:.2}%)",
            dead.len(),
            100.0 * frac,
            mean(&dead),
            mean(&live),
            100.0 * ssl_err,
            100.0 * base_err
        ),
    )
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap();
    let work = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if std::env::var_os("SSLKIT_ACCEPTANCE_FRESH").is_some_and(|v| v == "1") && work.exists() {
        std::fs::remove_dir_all(&work).unwrap();
    }
    let mut ctx = Ctx { root, work, mnist: None };
    type Gate = Box<dyn Fn(&mut Ctx) -> Outcome>;
    let gates: Vec<(u32, &str, Gate)> = vec![
        (1, "gradient correctness", Box::new(|_| c1_gradients())),
        (2, "lowering and kernel equivalence", Box::new(|_| c2_lowering())),
        (3, "compaction equivalence", Box::new(|_| c3_compaction())),
        (4, "LeNet filter/channel sparsity", Box::new(c4_lenet_table)),
        (5, "LeNet shape-wise sparsity", Box::new(c5_shape_wise)),
        (6, "zero-group bimodality", Box::new(c6_bimodality)),
        (7, "depth-wise block removal", Box::new(c7_depth_wise)),
        (8, "structured beats unstructured", Box::new(|_| c8_structured_vs_unstructured())),
        (9, "monotone speedup grid", Box::new(|_| c9_monotone_grid())),
        (10, "PCA reconstruction error", Box::new(c10_pca)),
        (11, "MLP input-pixel sparsity", Box::new(c11_mlp_pixels)),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut lines = Vec::new();
    for (n, name, gate) in &gates {
        if !selected.is_empty() && !selected.contains(n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| gate(&mut ctx)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())));
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        let line = format!("criterion {n:>2} {status} [{:.1}s] {name}: {detail}", t.elapsed().as_secs_f64());
        println!("{line}");
        lines.push((outcome.is_ok(), line));
    }
    println!("\nacceptance summary:");
    for (_, l) in &lines {
        println!("{l}");
    }
    let failed = lines.iter().filter(|(ok, _)| !ok).count();
    println!("{} passed, {failed} failed", lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
