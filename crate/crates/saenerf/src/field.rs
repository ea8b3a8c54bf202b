//! The radiance field: a fully connected coordinate network with sinusoidal
//! input features.
//!
//! Density depends on position only; the viewing direction enters a single
//! final color head. Hidden activations are softplus — smooth everywhere, so
//! finite-difference checks of anything built on top of the field are
//! meaningful. Density output is softplus (non-negative), color outputs are
//! sigmoid (in (0, 1)).
//!
//! Two evaluation paths exist: a plain `f64` one for event-free rendering and
//! prediction passes, and a taped one recording onto [`grad::Tape`] for
//! training. They mirror each other operation for operation and share the
//! scalar activation helpers, so their outputs are bit-identical; a test
//! pins that.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grad::{self, Gradients, Tape, Var};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ArchConfig {
    /// Hidden layer width.
    pub width: usize,
    /// Number of hidden layers.
    pub depth: usize,
    /// Sinusoidal frequency octaves for positions.
    pub n_freq_pos: usize,
    /// Sinusoidal frequency octaves for view directions.
    pub n_freq_dir: usize,
    /// Positions are multiplied by this before encoding, mapping the world
    /// region of interest into roughly [-1, 1] where the octaves resolve.
    pub position_scale: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { width: 128, depth: 4, n_freq_pos: 6, n_freq_dir: 2, position_scale: 0.25 }
    }
}

impl ArchConfig {
    pub fn pos_encoding_len(&self) -> usize {
        3 + 6 * self.n_freq_pos
    }

    pub fn dir_encoding_len(&self) -> usize {
        3 + 6 * self.n_freq_dir
    }
}

/// `[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(n-1) pi v), cos(2^(n-1) pi v)]`,
/// componentwise; length `3 + 6 * n_freq`.
pub fn positional_encode(v: &Vector3<f64>, n_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * n_freq);
    out.extend_from_slice(&[v.x, v.y, v.z]);
    let mut scale = std::f64::consts::PI;
    for _ in 0..n_freq {
        out.push((scale * v.x).sin());
        out.push((scale * v.y).sin());
        out.push((scale * v.z).sin());
        out.push((scale * v.x).cos());
        out.push((scale * v.y).cos());
        out.push((scale * v.z).cos());
        scale *= 2.0;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutput {
    pub sigma: f64,
    pub color: [f64; 3],
}

/// One dense block in the flat parameter vector: `rows x cols` row-major
/// weights at `w_off`, then `rows` biases at `b_off`.
#[derive(Debug, Clone, Copy)]
struct Block {
    w_off: usize,
    b_off: usize,
    rows: usize,
    cols: usize,
}

impl Block {
    fn end(&self) -> usize {
        self.b_off + self.rows
    }

    fn row(&self, r: usize) -> std::ops::Range<usize> {
        let start = self.w_off + r * self.cols;
        start..start + self.cols
    }

    fn bias(&self, r: usize) -> usize {
        self.b_off + r
    }
}

#[derive(Debug, Clone)]
struct Layout {
    hidden: Vec<Block>,
    sigma: Block,
    color: Block,
    total: usize,
}

fn layout(arch: &ArchConfig) -> Layout {
    assert!(arch.depth >= 1, "field needs at least one hidden layer");
    assert!(arch.width >= 1);
    let mut off = 0usize;
    let mut block = |rows: usize, cols: usize| {
        let b = Block { w_off: off, b_off: off + rows * cols, rows, cols };
        off = b.end();
        b
    };
    let mut hidden = Vec::with_capacity(arch.depth);
    let mut in_dim = arch.pos_encoding_len();
    for _ in 0..arch.depth {
        hidden.push(block(arch.width, in_dim));
        in_dim = arch.width;
    }
    let sigma = block(1, arch.width);
    let color = block(3, arch.width + arch.dir_encoding_len());
    Layout { hidden, sigma, color, total: off }
}

pub fn param_count(arch: &ArchConfig) -> usize {
    layout(arch).total
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub arch: ArchConfig,
    pub values: Vec<f64>,
}

impl FieldParams {
    /// Glorot-uniform weights (half-width sqrt(6 / (fan_in + fan_out))),
    /// zero biases. Same seed, same bits.
    pub fn init(arch: ArchConfig, seed: u64) -> FieldParams {
        let lay = layout(&arch);
        let mut values = vec![0.0; lay.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fill = |b: &Block, rng: &mut ChaCha8Rng, values: &mut Vec<f64>| {
            let a = (6.0 / (b.cols + b.rows) as f64).sqrt();
            for w in &mut values[b.w_off..b.b_off] {
                *w = rng.random_range(-a..a);
            }
        };
        for b in &lay.hidden {
            fill(b, &mut rng, &mut values);
        }
        fill(&lay.sigma, &mut rng, &mut values);
        fill(&lay.color, &mut rng, &mut values);
        FieldParams { arch, values }
    }

    pub fn zeros(arch: ArchConfig) -> FieldParams {
        FieldParams { values: vec![0.0; param_count(&arch)], arch }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Flat-vector range of the density head (weights and bias).
    #[cfg(test)]
    pub(crate) fn sigma_head_range(&self) -> std::ops::Range<usize> {
        let b = layout(&self.arch).sigma;
        b.w_off..b.end()
    }

    /// Flat-vector index of the density head bias.
    #[cfg(test)]
    pub(crate) fn sigma_bias_index(&self) -> usize {
        layout(&self.arch).sigma.bias(0)
    }

    /// Plain forward pass. `d` must be unit length.
    pub fn eval(&self, x: &Vector3<f64>, d: &Vector3<f64>) -> FieldOutput {
        debug_assert!((d.norm() - 1.0).abs() < 1e-6, "direction must be unit length");
        let lay = layout(&self.arch);
        let p = &self.values;
        let enc_x = positional_encode(&(x * self.arch.position_scale), self.arch.n_freq_pos);

        let mut h = enc_x;
        let mut next = Vec::with_capacity(self.arch.width);
        for b in &lay.hidden {
            next.clear();
            for r in 0..b.rows {
                let pre = dot_f64(&p[b.row(r)], &h) + p[b.bias(r)];
                next.push(grad::softplus(pre));
            }
            std::mem::swap(&mut h, &mut next);
        }

        let sigma = grad::softplus(dot_f64(&p[lay.sigma.row(0)], &h) + p[lay.sigma.bias(0)]);

        let enc_d = positional_encode(d, self.arch.n_freq_dir);
        let w = self.arch.width;
        let mut color = [0.0; 3];
        for (c, out) in color.iter_mut().enumerate() {
            let row = &p[lay.color.row(c)];
            let pre = dot_f64(&row[..w], &h) + dot_f64(&row[w..], &enc_d) + p[lay.color.bias(c)];
            *out = grad::sigmoid(pre);
        }
        FieldOutput { sigma, color }
    }
}

fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Field parameters registered as tape leaves, ready for differentiable
/// evaluation. Leaves occupy consecutive node ids starting at `first_id`.
pub struct TapedField<'t> {
    tape: &'t Tape,
    arch: ArchConfig,
    lay: Layout,
    vars: Vec<Var<'t>>,
    first_id: u32,
}

impl<'t> TapedField<'t> {
    pub fn new(tape: &'t Tape, params: &FieldParams) -> TapedField<'t> {
        let first_id = tape.node_count() as u32;
        let vars = tape.leaves(&params.values);
        TapedField { tape, arch: params.arch, lay: layout(&params.arch), vars, first_id }
    }

    /// Wraps leaves that already live on the tape (they must be consecutive
    /// and in parameter-layout order, as produced by [`Tape::leaves`]).
    pub fn from_leaves(tape: &'t Tape, arch: ArchConfig, leaves: &[Var<'t>]) -> TapedField<'t> {
        let lay = layout(&arch);
        assert_eq!(leaves.len(), lay.total, "leaf count does not match the architecture");
        let first_id = leaves[0].node_id().expect("parameters must be leaves, not constants");
        TapedField { tape, arch, lay, vars: leaves.to_vec(), first_id }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn param_len(&self) -> usize {
        self.vars.len()
    }

    /// Differentiable forward pass, mirroring [`FieldParams::eval`]
    /// operation for operation.
    pub fn eval(&self, x: &Vector3<f64>, d: &Vector3<f64>) -> (Var<'t>, [Var<'t>; 3]) {
        debug_assert!((d.norm() - 1.0).abs() < 1e-6, "direction must be unit length");
        let t = self.tape;
        let p = &self.vars;
        let enc_x = positional_encode(&(x * self.arch.position_scale), self.arch.n_freq_pos);

        let mut h: Vec<Var<'t>> = Vec::new();
        let mut first = true;
        let mut next: Vec<Var<'t>> = Vec::with_capacity(self.arch.width);
        for b in &self.lay.hidden {
            next.clear();
            for r in 0..b.rows {
                let dot = if first {
                    t.dot_const(&p[b.row(r)], &enc_x)
                } else {
                    t.dot(&p[b.row(r)], &h)
                };
                let pre = dot + p[b.bias(r)];
                next.push(pre.softplus());
            }
            std::mem::swap(&mut h, &mut next);
            first = false;
        }

        let sigma = (t.dot(&p[self.lay.sigma.row(0)], &h) + p[self.lay.sigma.bias(0)]).softplus();

        let enc_d = positional_encode(d, self.arch.n_freq_dir);
        let w = self.arch.width;
        let mut color = [sigma; 3];
        for (c, out) in color.iter_mut().enumerate() {
            let row = self.lay.color.row(c);
            let row_vars = &p[row];
            let pre = t.dot(&row_vars[..w], &h)
                + t.dot_const(&row_vars[w..], &enc_d)
                + p[self.lay.color.bias(c)];
            *out = pre.sigmoid();
        }
        (sigma, color)
    }

    /// Adds `scale * d(output)/d(param_i)` into `out[i]` for all parameters.
    pub fn accumulate_param_gradients(&self, grads: &Gradients, scale: f64, out: &mut [f64]) {
        assert_eq!(out.len(), self.vars.len());
        for (i, o) in out.iter_mut().enumerate() {
            *o += scale * grads.by_id(self.first_id + i as u32);
        }
    }
}
