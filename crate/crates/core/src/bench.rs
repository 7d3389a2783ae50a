//! Timing harness: dense GEMM versus row/column-compacted GEMM versus CSR.

use std::fmt;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    csr_dense_matmul, csr_dense_matmul_par, gemm, gemm_par, ConvGeometry, CsrMatrix, DenseMatrix, LoweringShape,
    Scalar,
};

/// Where the timed kernels come from; printed with every report.
pub const KERNEL_PROVENANCE: &str = "dense and compacted GEMM: matrixmultiply crate (sgemm/dgemm); \
CSR: in-house row-accumulation kernel (AVX2 codegen when detected)";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityPattern {
    Structured,
    RandomUnstructured,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Dense,
    CompactedDense,
    CsrSparse,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::Dense, Kernel::CompactedDense, Kernel::CsrSparse];

    pub fn as_str(self) -> &'static str {
        match self {
            Kernel::Dense => "dense",
            Kernel::CompactedDense => "compacted_dense",
            Kernel::CsrSparse => "csr_sparse",
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// One product `W (m×k) · X (k×n)` with a sparsity recipe for `W`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub layer_name: String,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub row_sparsity: f64,
    pub col_sparsity: f64,
    pub pattern: SparsityPattern,
    pub unstructured_sparsity: f64,
    pub seed: u64,
}

impl BenchCase {
    pub fn structured(layer_name: &str, (m, k, n): (usize, usize, usize), row_s: f64, col_s: f64, seed: u64) -> Self {
        Self {
            layer_name: layer_name.into(),
            m,
            k,
            n,
            row_sparsity: row_s,
            col_sparsity: col_s,
            pattern: SparsityPattern::Structured,
            unstructured_sparsity: 0.0,
            seed,
        }
    }

    pub fn unstructured(layer_name: &str, (m, k, n): (usize, usize, usize), sparsity: f64, seed: u64) -> Self {
        Self {
            layer_name: layer_name.into(),
            m,
            k,
            n,
            row_sparsity: 0.0,
            col_sparsity: 0.0,
            pattern: SparsityPattern::RandomUnstructured,
            unstructured_sparsity: sparsity,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.n == 0 {
            return Err(Error::Config(format!("bench case {}: dims must be >= 1", self.layer_name)));
        }
        for (what, v) in [
            ("row_sparsity", self.row_sparsity),
            ("col_sparsity", self.col_sparsity),
            ("unstructured_sparsity", self.unstructured_sparsity),
        ] {
            check_fraction(what, v)?;
        }
        Ok(())
    }

    /// Generates `(weight, features)` for this case.
    pub fn generate(&self) -> Result<(DenseMatrix, DenseMatrix)> {
        self.validate()?;
        match self.pattern {
            SparsityPattern::Structured => {
                make_structured_case(self.m, self.k, self.n, self.row_sparsity, self.col_sparsity, self.seed)
            }
            SparsityPattern::RandomUnstructured => {
                make_unstructured_case(self.m, self.k, self.n, self.unstructured_sparsity, self.seed)
            }
        }
    }
}

fn check_fraction(what: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{what} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Weight with exactly `round(row_s·m)` zero rows and `round(col_s·k)` zero
/// columns at seeded positions; everything else and the features are N(0, 1).
pub fn make_structured_case(
    m: usize,
    k: usize,
    n: usize,
    row_s: f64,
    col_s: f64,
    seed: u64,
) -> Result<(DenseMatrix, DenseMatrix)> {
    check_fraction("row_sparsity", row_s)?;
    check_fraction("col_sparsity", col_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = normal_matrix(m, k, &mut rng);
    let x = normal_matrix(k, n, &mut rng);
    let dead_rows = sample(&mut rng, m, (row_s * m as f64).round() as usize);
    let dead_cols = sample(&mut rng, k, (col_s * k as f64).round() as usize);
    for r in dead_rows.iter() {
        (0..k).for_each(|j| w.set(r, j, 0.0));
    }
    for c in dead_cols.iter() {
        (0..m).for_each(|i| w.set(i, c, 0.0));
    }
    Ok((w, x))
}

/// Weight whose entries are independently zero with probability `sparsity`.
pub fn make_unstructured_case(
    m: usize,
    k: usize,
    n: usize,
    sparsity: f64,
    seed: u64,
) -> Result<(DenseMatrix, DenseMatrix)> {
    check_fraction("sparsity", sparsity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = DenseMatrix::zeros(m, k);
    for v in w.data_mut() {
        let keep = !rng.gen_bool(sparsity);
        let z: f64 = rng.sample(StandardNormal);
        if keep {
            *v = z;
        }
    }
    let x = normal_matrix(k, n, &mut rng);
    Ok((w, x))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub repeats: usize,
    pub warmup: usize,
    /// 1 runs every kernel single-threaded; more enables the parallel
    /// variant of every kernel alike.
    pub threads: usize,
    pub precision: Precision,
    /// Each timing sample repeats the product until it spans this many
    /// seconds, so millisecond kernels are not timed one call at a time.
    pub min_sample_time: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repeats: 11,
            warmup: 3,
            threads: 1,
            precision: Precision::F32,
            min_sample_time: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub case: BenchCase,
    pub kernel: Kernel,
    /// Median seconds per product.
    pub wall_time: f64,
    pub speedup_vs_dense: f64,
    pub checksum: f64,
}

/// Position-weighted sum of an output, indexed by original row.
fn checksum<T: Scalar>(out: &DenseMatrix<T>, row_of: impl Fn(usize) -> usize) -> (f64, f64) {
    let mut sum = 0.0;
    let mut scale = 0.0;
    for i in 0..out.rows() {
        let r = row_of(i);
        for (j, &v) in out.row(i).iter().enumerate() {
            let c = (1 + (r * 7 + j * 13) % 5) as f64;
            sum += c * v.as_f64();
            scale += c * v.as_f64().abs();
        }
    }
    (sum, scale)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn nonzero_rows_cols<T: Scalar>(w: &DenseMatrix<T>) -> (Vec<usize>, Vec<usize>) {
    let rows = (0..w.rows()).filter(|&i| w.row(i).iter().any(|v| !v.is_zero())).collect();
    let cols = (0..w.cols())
        .filter(|&j| (0..w.rows()).any(|i| !w.get(i, j).is_zero()))
        .collect();
    (rows, cols)
}

/// Copies the feature rows matching surviving weight columns.
fn gather_rows<T: Scalar>(x: &DenseMatrix<T>, rows: &[usize], parallel: bool) -> DenseMatrix<T> {
    let n = x.cols();
    let mut data = vec![T::zero(); rows.len() * n];
    if parallel {
        data.par_chunks_mut(n.max(1))
            .zip(rows.par_iter())
            .for_each(|(dst, &r)| dst.copy_from_slice(x.row(r)));
    } else {
        for (dst, &r) in data.chunks_mut(n.max(1)).zip(rows) {
            dst.copy_from_slice(x.row(r));
        }
    }
    DenseMatrix::new(rows.len(), n, data).expect("gathered extents")
}

/// A kernel with its one-time preparation done.
enum Prepared<T: Scalar> {
    Dense,
    Compacted {
        w: DenseMatrix<T>,
        rows: Vec<usize>,
        /// `None` when every column survives and no gather is needed.
        cols: Option<Vec<usize>>,
    },
    Csr(CsrMatrix<T>),
}

impl<T: Scalar> Prepared<T> {
    fn new(kernel: Kernel, w: &DenseMatrix<T>) -> Self {
        match kernel {
            Kernel::Dense => Prepared::Dense,
            Kernel::CompactedDense => {
                let (rows, cols) = nonzero_rows_cols(w);
                let wc = w.select_rows(&rows).select_cols(&cols);
                let cols = (cols.len() < w.cols()).then_some(cols);
                Prepared::Compacted { w: wc, rows, cols }
            }
            Kernel::CsrSparse => Prepared::Csr(CsrMatrix::from_dense(w, T::zero())),
        }
    }

    /// The recurring per-input work: gather (if any) and multiply.
    fn run(&self, w: &DenseMatrix<T>, x: &DenseMatrix<T>, par: bool) -> Result<DenseMatrix<T>> {
        let mm = |a: &DenseMatrix<T>, b: &DenseMatrix<T>| if par { gemm_par(a, b) } else { gemm(a, b) };
        match self {
            Prepared::Dense => mm(w, x),
            Prepared::Compacted { w: wc, cols: None, .. } => mm(wc, x),
            Prepared::Compacted { w: wc, cols: Some(c), .. } => mm(wc, &gather_rows(x, c, par)),
            Prepared::Csr(a) => {
                if par {
                    csr_dense_matmul_par(a, x)
                } else {
                    csr_dense_matmul(a, x)
                }
            }
        }
    }

    fn checksum(&self, out: &DenseMatrix<T>) -> (f64, f64) {
        match self {
            Prepared::Compacted { rows, .. } => checksum(out, |i| rows[i]),
            _ => checksum(out, |i| i),
        }
    }
}

/// Seconds per call of `f`, averaged over enough calls to fill `min_time`.
fn time_calls(iters: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let t = Instant::now();
    for _ in 0..iters {
        f()?;
    }
    Ok(t.elapsed().as_secs_f64() / iters as f64)
}

fn bench_case<T: Scalar>(case: &BenchCase, kernels: &[Kernel], opts: &BenchOptions) -> Result<Vec<BenchRecord>> {
    let (w64, x64) = case.generate()?;
    let w: DenseMatrix<T> = w64.cast();
    let x: DenseMatrix<T> = x64.cast();
    let par = opts.threads > 1;

    // Dense first: it is the reference for checksums and speedups.
    let mut order = vec![Kernel::Dense];
    order.extend(kernels.iter().copied().filter(|&k| k != Kernel::Dense));
    let prepared: Vec<Prepared<T>> = order.iter().map(|&k| Prepared::new(k, &w)).collect();

    let mut sums = Vec::with_capacity(order.len());
    let mut iters = Vec::with_capacity(order.len());
    for p in &prepared {
        let out = p.run(&w, &x, par)?;
        sums.push(p.checksum(&out));
        drop(out);
        let once = time_calls(1, || p.run(&w, &x, par).map(drop))?;
        iters.push(((opts.min_sample_time / once.max(1e-9)).ceil() as usize).clamp(1, 1 << 20));
        for _ in 0..opts.warmup {
            p.run(&w, &x, par)?;
        }
    }
    let (dense_sum, scale) = sums[0];
    for (k, &(sum, _)) in order.iter().zip(&sums) {
        if (sum - dense_sum).abs() > 1e-6 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Correctness(format!(
                "{} {k}: checksum {sum} differs from dense {dense_sum}",
                case.layer_name
            )));
        }
    }

    // Kernels take turns within each repeat so that machine-wide slowdowns
    // hit all of them alike.
    let mut times = vec![Vec::with_capacity(opts.repeats); order.len()];
    for _ in 0..opts.repeats {
        for (i, p) in prepared.iter().enumerate() {
            times[i].push(time_calls(iters[i], || p.run(&w, &x, par).map(drop))?);
        }
    }
    let medians: Vec<f64> = times.into_iter().map(median).collect();

    Ok(kernels
        .iter()
        .map(|&k| {
            let i = order.iter().position(|&o| o == k).expect("kernel scheduled");
            BenchRecord {
                case: case.clone(),
                kernel: k,
                wall_time: medians[i],
                speedup_vs_dense: medians[0] / medians[i],
                checksum: sums[i].0,
            }
        })
        .collect())
}

/// Times every kernel in `kernels` on every case; the dense product is
/// always timed since it is the speedup reference.
pub fn run_bench(cases: &[BenchCase], kernels: &[Kernel], opts: &BenchOptions) -> Result<Vec<BenchRecord>> {
    if opts.repeats < 3 {
        return Err(Error::Config(format!("repeats must be >= 3, got {}", opts.repeats)));
    }
    if opts.threads == 0 {
        return Err(Error::Config("threads must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut out = Vec::new();
        for case in cases {
            let recs = match opts.precision {
                Precision::F32 => bench_case::<f32>(case, kernels, opts)?,
                Precision::F64 => bench_case::<f64>(case, kernels, opts)?,
            };
            log::info!(
                "bench {} {:?} {}x{}x{}: {}",
                case.layer_name,
                case.pattern,
                case.m,
                case.k,
                case.n,
                recs.iter()
                    .map(|r| format!("{}={:.3}x", r.kernel, r.speedup_vs_dense))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            out.extend(recs);
        }
        Ok(out)
    })
}

/// One AlexNet convolution as seen by a single convolution group.
#[derive(Clone, Debug, PartialEq)]
pub struct GemmLayer {
    pub name: &'static str,
    pub in_channels: usize,
    pub filters: usize,
    pub groups: usize,
    pub in_hw: usize,
    pub geometry: ConvGeometry,
}

impl GemmLayer {
    /// `(m, k, n)` of the lowered product for one group.
    pub fn gemm_shape(&self) -> Result<(usize, usize, usize)> {
        let lw = LoweringShape::new(self.in_channels / self.groups, self.in_hw, self.in_hw, self.geometry)?;
        Ok((self.filters / self.groups, lw.patch_len(), lw.positions()))
    }
}

fn pooled(hw: usize, size: usize, stride: usize) -> usize {
    (hw - size) / stride + 1
}

/// AlexNet's five convolutions on 227×227 input, with 3/2 max pooling after
/// conv1, conv2 and conv5 and two-way grouping on conv2, conv4 and conv5.
pub fn alexnet_layers() -> Vec<GemmLayer> {
    let g = |k: usize, s: usize, p: usize| ConvGeometry::new((k, k), (s, s), (p, p));
    let hw1 = 227;
    let hw2 = pooled((hw1 - 11) / 4 + 1, 3, 2);
    let hw3 = pooled(hw2, 3, 2);
    vec![
        GemmLayer { name: "conv1", in_channels: 3, filters: 96, groups: 1, in_hw: hw1, geometry: g(11, 4, 0) },
        GemmLayer { name: "conv2", in_channels: 96, filters: 256, groups: 2, in_hw: hw2, geometry: g(5, 1, 2) },
        GemmLayer { name: "conv3", in_channels: 256, filters: 384, groups: 1, in_hw: hw3, geometry: g(3, 1, 1) },
        GemmLayer { name: "conv4", in_channels: 384, filters: 384, groups: 2, in_hw: hw3, geometry: g(3, 1, 1) },
        GemmLayer { name: "conv5", in_channels: 384, filters: 256, groups: 2, in_hw: hw3, geometry: g(3, 1, 1) },
    ]
}

/// Column and row sparsity learned by group Lasso on AlexNet conv1–conv5.
pub const ALEXNET_STRUCTURED: [(f64, f64); 5] =
    [(0.0, 0.094), (0.632, 0.129), (0.769, 0.406), (0.847, 0.469), (0.807, 0.0)];

/// Element sparsity reached by ℓ1 regularization on the same layers.
pub const ALEXNET_UNSTRUCTURED: [f64; 5] = [0.676, 0.924, 0.972, 0.966, 0.943];

/// Ten cases: each AlexNet conv with its structured (column, row) sparsity,
/// then each with its unstructured sparsity.
pub fn alexnet_shape_suite() -> Vec<BenchCase> {
    let layers = alexnet_layers();
    let shapes: Vec<_> = layers
        .iter()
        .map(|l| l.gemm_shape().expect("AlexNet geometry is consistent"))
        .collect();
    let mut cases = Vec::with_capacity(10);
    for (i, (l, &(col, row))) in layers.iter().zip(&ALEXNET_STRUCTURED).enumerate() {
        cases.push(BenchCase::structured(l.name, shapes[i], row, col, 100 + i as u64));
    }
    for (i, (l, &s)) in layers.iter().zip(&ALEXNET_UNSTRUCTURED).enumerate() {
        cases.push(BenchCase::unstructured(l.name, shapes[i], s, 200 + i as u64));
    }
    cases
}

/// Structured cases over the cartesian product of `fractions` (row-major in
/// row sparsity) at one shape.
pub fn sparsity_grid(shape: (usize, usize, usize), fractions: &[f64], seed: u64) -> Vec<BenchCase> {
    let mut out = Vec::with_capacity(fractions.len() * fractions.len());
    for (i, &row) in fractions.iter().enumerate() {
        for (j, &col) in fractions.iter().enumerate() {
            let name = format!("grid_r{i}_c{j}");
            out.push(BenchCase::structured(&name, shape, row, col, seed + (i * fractions.len() + j) as u64));
        }
    }
    out
}

/// Strict speedup decreases between grid neighbours along either axis,
/// for a `side × side` grid in [`sparsity_grid`] order.
pub fn grid_inversions(speedups: &[f64], side: usize, slack: f64) -> Vec<((usize, usize), (usize, usize))> {
    assert_eq!(speedups.len(), side * side, "grid has {} cells", speedups.len());
    let at = |i: usize, j: usize| speedups[i * side + j];
    let mut out = Vec::new();
    for i in 0..side {
        for j in 0..side {
            if i + 1 < side && at(i + 1, j) < at(i, j) * (1.0 - slack) {
                out.push(((i, j), (i + 1, j)));
            }
            if j + 1 < side && at(i, j + 1) < at(i, j) * (1.0 - slack) {
                out.push(((i, j), (i, j + 1)));
            }
        }
    }
    out
}

/// One bar of a per-layer speedup chart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub layer_name: String,
    pub pattern: SparsityPattern,
    pub kernel: Kernel,
    pub sparsity: f64,
    pub speedup: f64,
}

/// Non-dense records flattened for plotting; `sparsity` is the weight's
/// overall zero fraction.
pub fn plot_rows(records: &[BenchRecord]) -> Vec<PlotRow> {
    records
        .iter()
        .filter(|r| r.kernel != Kernel::Dense)
        .map(|r| {
            let c = &r.case;
            let sparsity = match c.pattern {
                SparsityPattern::Structured => 1.0 - (1.0 - c.row_sparsity) * (1.0 - c.col_sparsity),
                SparsityPattern::RandomUnstructured => c.unstructured_sparsity,
            };
            PlotRow {
                layer_name: c.layer_name.clone(),
                pattern: c.pattern,
                kernel: r.kernel,
                sparsity,
                speedup: r.speedup_vs_dense,
            }
        })
        .collect()
}
