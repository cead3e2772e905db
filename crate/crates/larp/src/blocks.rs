//! Pre-norm transformer encoder blocks shared by the tokenizer, the prior,
//! and the generator, plus the fixed sin-cos positional tables.

use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::rng::Rng;
use crate::tensor::{ops, Tensor};

pub const INIT_STD: f64 = 0.02;
const MLP_RATIO: usize = 4;

/// Register parameters for a `depth`-block stack under `prefix` (which
/// should end with a dot), including the final layer norm.
pub fn init_block_stack(store: &mut ParamStore, rng: &mut Rng, prefix: &str, dim: usize, depth: usize) {
    for i in 0..depth {
        let b = format!("{prefix}block{i}.");
        store.add_const(&format!("{b}ln1.g"), vec![dim], 1.0);
        store.add_const(&format!("{b}ln1.b"), vec![dim], 0.0);
        for w in ["wq", "wk", "wv", "wo"] {
            store.add_normal(rng, &format!("{b}attn.{w}"), vec![dim, dim], INIT_STD);
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            store.add_const(&format!("{b}attn.{bias}"), vec![dim], 0.0);
        }
        store.add_const(&format!("{b}ln2.g"), vec![dim], 1.0);
        store.add_const(&format!("{b}ln2.b"), vec![dim], 0.0);
        store.add_normal(rng, &format!("{b}mlp.w1"), vec![dim, MLP_RATIO * dim], INIT_STD);
        store.add_const(&format!("{b}mlp.b1"), vec![MLP_RATIO * dim], 0.0);
        store.add_normal(rng, &format!("{b}mlp.w2"), vec![MLP_RATIO * dim, dim], INIT_STD);
        store.add_const(&format!("{b}mlp.b2"), vec![dim], 0.0);
    }
    store.add_const(&format!("{prefix}final.g"), vec![dim], 1.0);
    store.add_const(&format!("{prefix}final.b"), vec![dim], 0.0);
}

/// Residual/feed-forward dropout rates for training-time graphs.
#[derive(Clone, Copy, Debug, Default)]
pub struct DropoutCfg {
    pub resid: f64,
    pub ff: f64,
}

/// Optional training-time stochasticity for a stack forward.
pub struct StackMode<'r> {
    pub dropout: DropoutCfg,
    pub rng: &'r mut Rng,
}

fn dropout(x: &Tensor, rate: f64, rng: &mut Rng) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    let n = x.buf().len();
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..n).map(|_| if rng.uniform() < rate { 0.0 } else { 1.0 / keep }).collect();
    let m = x.tape().constant(x.shape(), mask);
    ops::mul(x, &m)
}

fn maybe_dropout(x: &Tensor, rate: f64, mode: &mut Option<&mut StackMode>) -> Result<Tensor> {
    match mode {
        Some(m) => dropout(x, rate, m.rng),
        None => Ok(x.clone()),
    }
}

/// Multi-head self-attention over a normalized sequence.
fn self_attention(
    binder: &Binder,
    prefix: &str,
    x: &Tensor,
    dim: usize,
    heads: usize,
    causal: bool,
) -> Result<Tensor> {
    let q = ops::linear(x, &binder.p(&format!("{prefix}attn.wq"))?, Some(&binder.p(&format!("{prefix}attn.bq"))?))?;
    let k = ops::linear(x, &binder.p(&format!("{prefix}attn.wk"))?, Some(&binder.p(&format!("{prefix}attn.bk"))?))?;
    let v = ops::linear(x, &binder.p(&format!("{prefix}attn.wv"))?, Some(&binder.p(&format!("{prefix}attn.bv"))?))?;
    let dh = dim / heads;
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = ops::slice_cols(&q, c0, c1)?;
        let kh = ops::slice_cols(&k, c0, c1)?;
        let vh = ops::slice_cols(&v, c0, c1)?;
        per_head.push(ops::attention(&qh, &kh, &vh, causal)?);
    }
    let refs: Vec<&Tensor> = per_head.iter().collect();
    let cat = ops::concat_cols(&refs)?;
    ops::linear(&cat, &binder.p(&format!("{prefix}attn.wo"))?, Some(&binder.p(&format!("{prefix}attn.bo"))?))
}

/// Run a pre-norm block stack (attention + MLP per block, final norm).
pub fn block_stack_forward(
    binder: &Binder,
    prefix: &str,
    x: &Tensor,
    dim: usize,
    heads: usize,
    depth: usize,
    causal: bool,
    mut mode: Option<&mut StackMode>,
) -> Result<Tensor> {
    if dim % heads != 0 {
        return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
    }
    let mut x = x.clone();
    for i in 0..depth {
        let b = format!("{prefix}block{i}.");
        let normed = ops::layernorm_rows(
            &x,
            &binder.p(&format!("{b}ln1.g"))?,
            &binder.p(&format!("{b}ln1.b"))?,
        )?;
        let attn = self_attention(binder, &b, &normed, dim, heads, causal)?;
        let (resid, ff) = match &mode {
            Some(m) => (m.dropout.resid, m.dropout.ff),
            None => (0.0, 0.0),
        };
        let attn = maybe_dropout(&attn, resid, &mut mode)?;
        x = ops::add(&x, &attn)?;
        let normed2 = ops::layernorm_rows(
            &x,
            &binder.p(&format!("{b}ln2.g"))?,
            &binder.p(&format!("{b}ln2.b"))?,
        )?;
        let hidden = ops::gelu(&ops::linear(
            &normed2,
            &binder.p(&format!("{b}mlp.w1"))?,
            Some(&binder.p(&format!("{b}mlp.b1"))?),
        )?)?;
        let hidden = maybe_dropout(&hidden, ff, &mut mode)?;
        let mlp = ops::linear(
            &hidden,
            &binder.p(&format!("{b}mlp.w2"))?,
            Some(&binder.p(&format!("{b}mlp.b2"))?),
        )?;
        let mlp = maybe_dropout(&mlp, resid, &mut mode)?;
        x = ops::add(&x, &mlp)?;
    }
    ops::layernorm_rows(
        &x,
        &binder.p(&format!("{prefix}final.g"))?,
        &binder.p(&format!("{prefix}final.b"))?,
    )
}

// ── fixed positional tables ──────────────────────────────────────────

/// Interleaved sinusoid table: `pe[pos, 2i] = sin(pos / 10000^(2i/dim))`,
/// `pe[pos, 2i+1] = cos(...)`.
pub fn sincos_1d(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        fill_sincos_row(&mut out[pos * dim..(pos + 1) * dim], pos as f64, dim);
    }
    out
}

fn fill_sincos_row(row: &mut [f64], pos: f64, dim: usize) {
    for i in 0..dim {
        let exponent = 2.0 * (i / 2) as f64 / dim as f64;
        let arg = pos / 10000f64.powf(exponent);
        row[i] = if i % 2 == 0 { arg.sin() } else { arg.cos() };
    }
}

/// 3-D sin-cos table over a (time, height, width) patch grid, flattened
/// time-major to match the patch order. The width is split into three even
/// chunks (time gets the remainder), each encoding one axis.
pub fn sincos_3d(grid_t: usize, grid_h: usize, grid_w: usize, dim: usize) -> Vec<f64> {
    let base = (dim / 3) & !1;
    let d_t = dim - 2 * base;
    let m = grid_t * grid_h * grid_w;
    let mut out = vec![0.0; m * dim];
    let mut j = 0;
    for t in 0..grid_t {
        for h in 0..grid_h {
            for w in 0..grid_w {
                let row = &mut out[j * dim..(j + 1) * dim];
                fill_sincos_row(&mut row[..d_t], t as f64, d_t);
                fill_sincos_row(&mut row[d_t..d_t + base], h as f64, base);
                fill_sincos_row(&mut row[d_t + base..], w as f64, base);
                j += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Buf, Tape};

    #[test]
    fn sincos_first_row_alternates_zero_one() {
        let pe = sincos_1d(3, 6);
        for i in 0..6 {
            let expect = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pe[i], expect);
        }
        assert!(pe[6..12].iter().any(|v| *v != 0.0 && *v != 1.0));
    }

    #[test]
    fn sincos_3d_is_deterministic_and_axis_sensitive() {
        let a = sincos_3d(2, 3, 4, 16);
        let b = sincos_3d(2, 3, 4, 16);
        assert_eq!(a, b);
        assert_eq!(a.len(), 24 * 16);
        // Moving one step along width changes only the width chunk.
        let dim = 16;
        let base = (dim / 3) & !1;
        let d_t = dim - 2 * base;
        let row0 = &a[0..dim];
        let row1 = &a[dim..2 * dim];
        assert_eq!(row0[..d_t + base], row1[..d_t + base]);
        assert_ne!(row0[d_t + base..], row1[d_t + base..]);
    }

    #[test]
    fn stack_forward_shapes_and_determinism() {
        let mut rng = Rng::new(4);
        let mut store = ParamStore::new();
        init_block_stack(&mut store, &mut rng, "t.", 8, 2);
        let run = || {
            let tape = Tape::new();
            let binder = Binder::new(tape.clone(), &store, false);
            let x = tape.leaf(Buf::new(vec![5, 8], (0..40).map(|i| (i as f64 * 0.37).sin()).collect()), false);
            let y = block_stack_forward(&binder, "t.", &x, 8, 2, 2, false, None).unwrap();
            assert_eq!(y.shape(), vec![5, 8]);
            y.values().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn causal_stack_rows_ignore_future() {
        let mut rng = Rng::new(9);
        let mut store = ParamStore::new();
        init_block_stack(&mut store, &mut rng, "c.", 8, 2);
        let base: Vec<f64> = (0..6 * 8).map(|_| rng.normal()).collect();
        let run = |vals: &[f64]| {
            let tape = Tape::new();
            let binder = Binder::new(tape.clone(), &store, false);
            let x = tape.leaf(Buf::new(vec![6, 8], vals.to_vec()), false);
            block_stack_forward(&binder, "c.", &x, 8, 2, 2, true, None).unwrap().values().to_vec()
        };
        let reference = run(&base);
        let mut perturbed = base.clone();
        for v in &mut perturbed[4 * 8..] {
            *v += 2.0;
        }
        let out = run(&perturbed);
        assert_eq!(out[..4 * 8], reference[..4 * 8]);
        assert_ne!(out[4 * 8..], reference[4 * 8..]);
    }

    #[test]
    fn dropout_scales_kept_entries() {
        let tape = Tape::new();
        let x = tape.leaf(Buf::new(vec![2, 4], vec![1.0; 8]), false);
        let mut rng = Rng::new(3);
        let y = dropout(&x, 0.5, &mut rng).unwrap();
        for v in y.values().iter() {
            assert!(*v == 0.0 || (*v - 2.0).abs() < 1e-12);
        }
        let z = dropout(&x, 0.0, &mut rng).unwrap();
        assert_eq!(*z.values(), vec![1.0; 8]);
    }
}
