//! Pre-norm transformer encoder over packed sequences.
//!
//! Several independent sequences are stacked row-wise into one matrix; the
//! projections and feed-forward run on the whole pack while attention stays
//! inside each sequence's row span.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Bound, Matrix, ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};

/// Scale applied to the init of projections that write into the residual
/// stream, so a freshly built block stays close to the identity.
pub const RESIDUAL_INIT_GAIN: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackShape {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

impl StackShape {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.ff_mult == 0 {
            return Err(Error::InvalidConfig("ff_mult must be >= 1".into()));
        }
        Ok(())
    }

    /// Trainable scalars in one block.
    pub fn block_params(&self) -> usize {
        let d = self.dim;
        let f = self.ff_mult * d;
        // two layer norms, four attention projections, two feed-forward maps
        4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d)
    }

    pub fn params(&self) -> usize {
        self.layers * self.block_params()
    }

    /// Multiply-accumulates for one sequence of `len` rows.
    pub fn macs(&self, len: usize) -> u64 {
        let d = self.dim;
        let f = self.ff_mult * d;
        let per_block = 4 * len * d * d + 2 * len * len * d + 2 * len * d * f;
        (self.layers * per_block) as u64
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles of one transformer stack inside a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct TransformerStack {
    shape: StackShape,
    blocks: Vec<BlockIds>,
}

pub(crate) fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_raw(rows, cols, data)
}

impl TransformerStack {
    /// Registers the weights of a new stack under `prefix`.
    pub fn new<R: Rng>(params: &mut ParamSet, prefix: &str, shape: StackShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let d = shape.dim;
        let f = shape.ff_mult * d;
        let std_in = 1.0 / (d as f64).sqrt();
        let std_out_attn = RESIDUAL_INIT_GAIN / (d as f64).sqrt();
        let std_out_ff = RESIDUAL_INIT_GAIN / (f as f64).sqrt();
        let mut blocks = Vec::with_capacity(shape.layers);
        for l in 0..shape.layers {
            let mut add = |name: &str, m: Matrix| params.add(format!("{prefix}.{l}.{name}"), m);
            blocks.push(BlockIds {
                ln1_g: add("ln1_g", Matrix::filled(1, d, 1.0)),
                ln1_b: add("ln1_b", Matrix::zeros(1, d)),
                wq: add("wq", normal_matrix(rng, d, d, std_in)),
                bq: add("bq", Matrix::zeros(1, d)),
                wk: add("wk", normal_matrix(rng, d, d, std_in)),
                bk: add("bk", Matrix::zeros(1, d)),
                wv: add("wv", normal_matrix(rng, d, d, std_in)),
                bv: add("bv", Matrix::zeros(1, d)),
                wo: add("wo", normal_matrix(rng, d, d, std_out_attn)),
                bo: add("bo", Matrix::zeros(1, d)),
                ln2_g: add("ln2_g", Matrix::filled(1, d, 1.0)),
                ln2_b: add("ln2_b", Matrix::zeros(1, d)),
                w1: add("w1", normal_matrix(rng, d, f, std_in)),
                b1: add("b1", Matrix::zeros(1, f)),
                w2: add("w2", normal_matrix(rng, f, d, std_out_ff)),
                b2: add("b2", Matrix::zeros(1, d)),
            });
        }
        Ok(Self { shape, blocks })
    }

    pub fn shape(&self) -> StackShape {
        self.shape
    }

    /// Handle of the first block's query projection, used by gradient checks.
    pub fn first_query_weight(&self) -> Option<ParamId> {
        self.blocks.first().map(|b| b.wq)
    }

    /// Runs every block over the packed rows of `x`. `segments` lists the
    /// `(start, len)` spans that attend to each other.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (m, d) = tape.shape(x);
        if d != self.shape.dim {
            return Err(Error::dims("transformer_forward", format!("width {d}, expected {}", self.shape.dim)));
        }
        if m == 0 {
            return Err(Error::EmptyInput("transformer_forward"));
        }
        let mut x = x;
        for b in &self.blocks {
            let h = tape.layer_norm_rows(x, p.var(b.ln1_g), p.var(b.ln1_b))?;
            let q = affine(tape, h, p.var(b.wq), p.var(b.bq))?;
            let k = affine(tape, h, p.var(b.wk), p.var(b.bk))?;
            let v = affine(tape, h, p.var(b.wv), p.var(b.bv))?;
            let a = tape.segment_attention(q, k, v, segments, self.shape.heads)?;
            let o = affine(tape, a, p.var(b.wo), p.var(b.bo))?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm_rows(x, p.var(b.ln2_g), p.var(b.ln2_b))?;
            let u = affine(tape, h, p.var(b.w1), p.var(b.b1))?;
            let u = tape.gelu(u);
            let f = affine(tape, u, p.var(b.w2), p.var(b.b2))?;
            x = tape.add(x, f)?;
        }
        Ok(x)
    }
}

/// `x W + b` with `b` broadcast over rows.
pub fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}
