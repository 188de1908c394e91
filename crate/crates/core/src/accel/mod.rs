//! Functional and traffic model of a tiled GEMM accelerator.
//!
//! Buffers hold an 8x9 tile of A, a 9x224 tile of B and an 8x224 tile of C. Each cycle one
//! output element takes nine products through an adder tree and accumulates into C. Tiles are
//! walked K-innermost for every (M, N) tile pair, so each C tile is written back once.
//!
//! In the 8-bit mode products are 16-bit, the adder tree is 32-bit and the C buffer is
//! 16-bit with saturating accumulation. The output stage shifts to the requested fractional
//! length and saturates to 8 bits. The float mode is 32-bit (or `f64`) throughout.
//!
//! The cycle estimate charges one cycle per column step plus one per DMA row transfer. It is
//! a model, not a measurement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcn::{infer_with, FloatGemm, Network};
use crate::mask::BinaryMask;
use crate::quant::{quantized_infer_with, DfpGemm, QuantizedNetwork};
use crate::scalar::Scalar;
use crate::tensor::{
    gemm_ref, gemm_ref_q_bias, round_shift, saturate_i16, saturate_i8, DfpMatrix, Matrix, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    pub a_rows: usize,
    pub a_cols: usize,
    pub b_rows: usize,
    pub b_cols: usize,
    pub c_rows: usize,
    pub c_cols: usize,
    pub multipliers: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            a_rows: 8,
            a_cols: 9,
            b_rows: 9,
            b_cols: 224,
            c_rows: 8,
            c_cols: 224,
            multipliers: 9,
        }
    }
}

impl TileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.a_cols != self.b_rows || self.a_cols != self.multipliers {
            return Err(Error::invalid("A columns, B rows and multiplier count must agree"));
        }
        if self.c_rows != self.a_rows || self.c_cols != self.b_cols {
            return Err(Error::invalid("C tile must be A rows by B columns"));
        }
        if self.a_rows == 0 || self.a_cols == 0 || self.b_cols == 0 {
            return Err(Error::invalid("tile dimensions must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Float32,
    Dfp8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccelJob {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub element_kind: ElementKind,
    /// Output fractional length, 8-bit jobs only.
    pub out_fl: Option<i32>,
}

impl AccelJob {
    pub fn float(m: usize, k: usize, n: usize) -> Self {
        AccelJob {
            m,
            k,
            n,
            element_kind: ElementKind::Float32,
            out_fl: None,
        }
    }

    pub fn dfp(m: usize, k: usize, n: usize, out_fl: i32) -> Self {
        AccelJob {
            m,
            k,
            n,
            element_kind: ElementKind::Dfp8,
            out_fl: Some(out_fl),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.n == 0 {
            return Err(Error::invalid("job dimensions must be at least 1"));
        }
        if (self.element_kind == ElementKind::Dfp8) != self.out_fl.is_some() {
            return Err(Error::invalid("out_fl is required for 8-bit jobs and only for them"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub m_tiles: u64,
    pub k_tiles: u64,
    pub n_tiles: u64,
    pub tiles: u64,
    pub writebacks: u64,
    pub dma_transactions: u64,
    pub cycles: u64,
    pub saturations: u64,
}

impl ScheduleReport {
    pub fn add(&mut self, o: &ScheduleReport) {
        self.m_tiles += o.m_tiles;
        self.k_tiles += o.k_tiles;
        self.n_tiles += o.n_tiles;
        self.tiles += o.tiles;
        self.writebacks += o.writebacks;
        self.dma_transactions += o.dma_transactions;
        self.cycles += o.cycles;
        self.saturations += o.saturations;
    }
}

/// Tile, traffic and cycle counts for one job. DMA is one transaction per buffer row moved:
/// every tile step fills the A and B rows it uses and every finished C tile writes its rows
/// back.
pub fn tile_schedule(job: &AccelJob, cfg: &TileConfig) -> ScheduleReport {
    let (m, k, n) = (job.m as u64, job.k as u64, job.n as u64);
    let mt = m.div_ceil(cfg.a_rows as u64);
    let kt = k.div_ceil(cfg.a_cols as u64);
    let nt = n.div_ceil(cfg.b_cols as u64);
    let tiles = mt * kt * nt;
    let dma = m * kt * nt + k * mt * nt + m * nt;
    ScheduleReport {
        m_tiles: mt,
        k_tiles: kt,
        n_tiles: nt,
        tiles,
        writebacks: mt * nt,
        dma_transactions: dma,
        cycles: tiles * (cfg.c_rows * cfg.c_cols) as u64 + dma,
        saturations: 0,
    }
}

fn tile_ranges(len: usize, step: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..len).step_by(step).map(move |s| (s, (s + step).min(len)))
}

/// Float GEMM through the tile datapath.
pub fn accel_gemm_float<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    cfg: &TileConfig,
) -> Result<(Matrix<T>, ScheduleReport)> {
    cfg.validate()?;
    if a.cols() != b.rows() {
        return Err(Error::dim("accelerator operand shapes do not chain"));
    }
    let job = AccelJob::float(a.rows(), a.cols(), b.cols());
    job.validate()?;
    let (m, k, n) = (job.m, job.k, job.n);
    let mut out = vec![T::zero(); m * n];
    let mut cbuf = vec![T::zero(); cfg.c_rows * cfg.c_cols];
    for (m0, m1) in tile_ranges(m, cfg.a_rows) {
        for (n0, n1) in tile_ranges(n, cfg.b_cols) {
            cbuf.iter_mut().for_each(|v| *v = T::zero());
            for (k0, k1) in tile_ranges(k, cfg.a_cols) {
                for i in m0..m1 {
                    let arow = &a.row(i)[k0..k1];
                    for j in n0..n1 {
                        let mut tree = T::zero();
                        for (l, &av) in arow.iter().enumerate() {
                            tree += av * b.get(k0 + l, j);
                        }
                        cbuf[(i - m0) * cfg.c_cols + (j - n0)] += tree;
                    }
                }
            }
            for i in m0..m1 {
                for j in n0..n1 {
                    out[i * n + j] = cbuf[(i - m0) * cfg.c_cols + (j - n0)];
                }
            }
        }
    }
    Ok((Matrix::from_vec(m, n, out)?, tile_schedule(&job, cfg)))
}

/// 8-bit GEMM through the tile datapath. The bias (at `a.fl + b.fl`) is preloaded into the
/// C buffer. `saturations` counts C-buffer updates that clipped.
pub fn accel_gemm_dfp(
    a: &DfpMatrix,
    b: &DfpMatrix,
    bias: Option<&[i32]>,
    out_fl: i32,
    cfg: &TileConfig,
) -> Result<(DfpMatrix, ScheduleReport)> {
    cfg.validate()?;
    let (am, bm) = (&a.matrix, &b.matrix);
    if am.cols() != bm.rows() {
        return Err(Error::dim("accelerator operand shapes do not chain"));
    }
    if bias.is_some_and(|b| b.len() != am.rows()) {
        return Err(Error::dim("bias length differs from A rows"));
    }
    let job = AccelJob::dfp(am.rows(), am.cols(), bm.cols(), out_fl);
    job.validate()?;
    let (m, k, n) = (job.m, job.k, job.n);
    let shift = a.fl + b.fl - out_fl;
    let mut sat = 0u64;
    let mut out = vec![0i8; m * n];
    let mut cbuf = vec![0i16; cfg.c_rows * cfg.c_cols];
    let bt = bm.transpose();
    for (m0, m1) in tile_ranges(m, cfg.a_rows) {
        for (n0, n1) in tile_ranges(n, cfg.b_cols) {
            for i in m0..m1 {
                let init = bias.map_or(0, |b| b[i] as i64);
                let c = saturate_i16(init);
                sat += u64::from(c as i64 != init);
                cbuf[(i - m0) * cfg.c_cols..(i - m0 + 1) * cfg.c_cols].fill(c);
            }
            for (k0, k1) in tile_ranges(k, cfg.a_cols) {
                for i in m0..m1 {
                    let arow = &am.row(i)[k0..k1];
                    for j in n0..n1 {
                        let bcol = &bt.row(j)[k0..k1];
                        let mut tree = 0i32;
                        for (&x, &y) in arow.iter().zip(bcol) {
                            let p: i16 = x as i16 * y as i16;
                            tree += p as i32;
                        }
                        let slot = &mut cbuf[(i - m0) * cfg.c_cols + (j - n0)];
                        let wide = *slot as i64 + tree as i64;
                        let c = saturate_i16(wide);
                        sat += u64::from(c as i64 != wide);
                        *slot = c;
                    }
                }
            }
            for i in m0..m1 {
                for j in n0..n1 {
                    let c = cbuf[(i - m0) * cfg.c_cols + (j - n0)] as i64;
                    out[i * n + j] = saturate_i8(round_shift(c, shift));
                }
            }
        }
    }
    let mut report = tile_schedule(&job, cfg);
    report.saturations = sat;
    Ok((
        DfpMatrix {
            matrix: Matrix::from_vec(m, n, out)?,
            fl: out_fl,
        },
        report,
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub job: AccelJob,
    #[serde(flatten)]
    pub schedule: ScheduleReport,
}

/// Per-layer schedules of a network run plus their sum.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkReport {
    pub layers: Vec<LayerReport>,
    pub total: ScheduleReport,
}

impl NetworkReport {
    fn push(&mut self, layer: usize, job: AccelJob, schedule: ScheduleReport) {
        self.total.add(&schedule);
        self.layers.push(LayerReport { layer, job, schedule });
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Where GEMMs execute. `Reference` uses the plain reference kernels and only computes the
/// schedule; it never counts saturations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Reference,
    #[default]
    Accel,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ref" | "reference" => Ok(Backend::Reference),
            "accel" => Ok(Backend::Accel),
            _ => Err(Error::invalid(format!("unknown backend '{s}', expected ref or accel"))),
        }
    }
}

/// GEMM backend that runs every layer on the model and records its schedule.
#[derive(Clone, Debug, Default)]
pub struct Accelerator {
    pub cfg: TileConfig,
    pub backend: Backend,
    pub report: NetworkReport,
}

impl Accelerator {
    pub fn new(cfg: TileConfig) -> Self {
        Self::with_backend(cfg, Backend::Accel)
    }

    pub fn with_backend(cfg: TileConfig, backend: Backend) -> Self {
        Accelerator {
            cfg,
            backend,
            report: NetworkReport::default(),
        }
    }
}

impl<T: Scalar> FloatGemm<T> for Accelerator {
    fn gemm(&mut self, layer: usize, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
        let job = AccelJob::float(a.rows(), a.cols(), b.cols());
        let (c, s) = match self.backend {
            Backend::Accel => accel_gemm_float(a, b, &self.cfg)?,
            Backend::Reference => (gemm_ref(a, b)?, tile_schedule(&job, &self.cfg)),
        };
        self.report.push(layer, job, s);
        Ok(c)
    }
}

impl DfpGemm for Accelerator {
    fn gemm(
        &mut self,
        layer: usize,
        a: &DfpMatrix,
        b: &DfpMatrix,
        bias: Option<&[i32]>,
        out_fl: i32,
    ) -> Result<DfpMatrix> {
        let job = AccelJob::dfp(a.matrix.rows(), a.matrix.cols(), b.matrix.cols(), out_fl);
        let (c, s) = match self.backend {
            Backend::Accel => accel_gemm_dfp(a, b, bias, out_fl, &self.cfg)?,
            Backend::Reference => (gemm_ref_q_bias(a, b, bias, out_fl)?, tile_schedule(&job, &self.cfg)),
        };
        self.report.push(layer, job, s);
        Ok(c)
    }
}

/// Float network with every GEMM on the accelerator model.
pub fn run_network_on_accel<T: Scalar>(
    net: &Network<T>,
    image: &Tensor<T>,
    cfg: &TileConfig,
) -> Result<(BinaryMask, NetworkReport)> {
    run_network_with(net, image, cfg, Backend::Accel)
}

pub fn run_network_with<T: Scalar>(
    net: &Network<T>,
    image: &Tensor<T>,
    cfg: &TileConfig,
    backend: Backend,
) -> Result<(BinaryMask, NetworkReport)> {
    let mut acc = Accelerator::with_backend(*cfg, backend);
    let mask = infer_with(net, image, &mut acc)?;
    Ok((mask, acc.report))
}

/// Quantized network with every GEMM on the accelerator model.
pub fn run_quantized_on_accel<T: Scalar>(
    qnet: &QuantizedNetwork,
    image: &Tensor<T>,
    cfg: &TileConfig,
) -> Result<(BinaryMask, NetworkReport)> {
    run_quantized_with(qnet, image, cfg, Backend::Accel)
}

pub fn run_quantized_with<T: Scalar>(
    qnet: &QuantizedNetwork,
    image: &Tensor<T>,
    cfg: &TileConfig,
    backend: Backend,
) -> Result<(BinaryMask, NetworkReport)> {
    let mut acc = Accelerator::with_backend(*cfg, backend);
    let mask = quantized_infer_with(qnet, image, &mut acc)?;
    Ok((mask, acc.report))
}
