//! Differentiable operators.
//!
//! Each operator is a struct behind the [`Op`] trait: the builder function
//! validates shapes, computes the forward values eagerly, and records the
//! node; `Op::backward` maps the output gradient to per-input gradients.
//! Matrix products are delegated to ndarray's kernel; everything else is
//! written out directly.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2};

use super::{Buf, Tensor};
use crate::error::{Error, Result};

/// Gradient context handed to [`Op::backward`].
pub struct OpCtx<'a> {
    pub inputs: &'a [&'a Buf],
    pub output: &'a Buf,
    pub out_grad: &'a [f64],
    /// Which inputs need a gradient; return `None` for the rest.
    pub needs: &'a [bool],
}

pub trait Op: std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>>;
}

// ── shared helpers ───────────────────────────────────────────────────

fn same_tape(inputs: &[&Tensor]) {
    debug_assert!(
        inputs.windows(2).all(|w| std::rc::Rc::ptr_eq(&w[0].tape().nodes, &w[1].tape().nodes)),
        "operands recorded on different tapes"
    );
}

fn dims2(op: &'static str, buf: &Buf) -> Result<(usize, usize)> {
    buf.dims2().ok_or_else(|| Error::shape(op, format!("expected rank-2 tensor, got {:?}", buf.shape)))
}

/// `out = lhs (?T) * rhs (?T)` on raw row-major slices.
fn mm(lhs: &[f64], lsh: (usize, usize), lt: bool, rhs: &[f64], rsh: (usize, usize), rt: bool) -> Vec<f64> {
    let lv = ArrayView2::from_shape(lsh, lhs).expect("mm lhs layout");
    let rv = ArrayView2::from_shape(rsh, rhs).expect("mm rhs layout");
    let lv = if lt { lv.reversed_axes() } else { lv };
    let rv = if rt { rv.reversed_axes() } else { rv };
    let (m, _) = lv.dim();
    let (_, n) = rv.dim();
    let mut out = Array2::<f64>::zeros((m, n));
    general_mat_mul(1.0, &lv, &rv, 0.0, &mut out);
    out.into_raw_vec_and_offset().0
}

// ── matmul ───────────────────────────────────────────────────────────

#[derive(Debug)]
struct MatMul {
    a: (usize, usize),
    b: (usize, usize),
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_tape(&[a, b]);
    let (ab, bb) = (a.buf(), b.buf());
    let ad = dims2("matmul", &ab)?;
    let bd = dims2("matmul", &bb)?;
    if ad.1 != bd.0 {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", ab.shape, bb.shape)));
    }
    let out = mm(&ab.values, ad, false, &bb.values, bd, false);
    Ok(a.tape().push_op(Box::new(MatMul { a: ad, b: bd }), &[a, b], Buf::new(vec![ad.0, bd.1], out)))
}

impl Op for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let g = ctx.out_grad;
        let gsh = (self.a.0, self.b.1);
        let da = ctx.needs[0].then(|| mm(g, gsh, false, &ctx.inputs[1].values, self.b, true));
        let db = ctx.needs[1].then(|| mm(&ctx.inputs[0].values, self.a, true, g, gsh, false));
        vec![da, db]
    }
}

// ── elementwise ──────────────────────────────────────────────────────

#[derive(Debug)]
struct Add;
#[derive(Debug)]
struct Sub;
#[derive(Debug)]
struct Mul;
#[derive(Debug)]
struct Scale(f64);

fn check_same_shape(op: &'static str, a: &Buf, b: &Buf) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_tape(&[a, b]);
    let (ab, bb) = (a.buf(), b.buf());
    check_same_shape("add", &ab, &bb)?;
    let out: Vec<f64> = ab.values.iter().zip(bb.values.iter()).map(|(x, y)| x + y).collect();
    Ok(a.tape().push_op(Box::new(Add), &[a, b], Buf::new(ab.shape.clone(), out)))
}

impl Op for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let g = ctx.out_grad;
        vec![ctx.needs[0].then(|| g.to_vec()), ctx.needs[1].then(|| g.to_vec())]
    }
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_tape(&[a, b]);
    let (ab, bb) = (a.buf(), b.buf());
    check_same_shape("sub", &ab, &bb)?;
    let out: Vec<f64> = ab.values.iter().zip(bb.values.iter()).map(|(x, y)| x - y).collect();
    Ok(a.tape().push_op(Box::new(Sub), &[a, b], Buf::new(ab.shape.clone(), out)))
}

impl Op for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let g = ctx.out_grad;
        vec![ctx.needs[0].then(|| g.to_vec()), ctx.needs[1].then(|| g.iter().map(|x| -x).collect())]
    }
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_tape(&[a, b]);
    let (ab, bb) = (a.buf(), b.buf());
    check_same_shape("mul", &ab, &bb)?;
    let out: Vec<f64> = ab.values.iter().zip(bb.values.iter()).map(|(x, y)| x * y).collect();
    Ok(a.tape().push_op(Box::new(Mul), &[a, b], Buf::new(ab.shape.clone(), out)))
}

impl Op for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let g = ctx.out_grad;
        let (a, b) = (&ctx.inputs[0].values, &ctx.inputs[1].values);
        vec![
            ctx.needs[0].then(|| g.iter().zip(b.iter()).map(|(g, y)| g * y).collect()),
            ctx.needs[1].then(|| g.iter().zip(a.iter()).map(|(g, x)| g * x).collect()),
        ]
    }
}

pub fn scale(a: &Tensor, factor: f64) -> Result<Tensor> {
    let ab = a.buf();
    let out: Vec<f64> = ab.values.iter().map(|x| x * factor).collect();
    Ok(a.tape().push_op(Box::new(Scale(factor)), &[a], Buf::new(ab.shape.clone(), out)))
}

impl Op for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| ctx.out_grad.iter().map(|g| g * self.0).collect())]
    }
}

// ── broadcast row add (bias) ─────────────────────────────────────────

#[derive(Debug)]
struct AddRow;

/// `out[i, j] = a[i, j] + row[j]`, with `row` of rank 1.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    same_tape(&[a, row]);
    let (ab, rb) = (a.buf(), row.buf());
    let (r, c) = dims2("add_row", &ab)?;
    if rb.shape != [c] {
        return Err(Error::shape("add_row", format!("{:?} vs row {:?}", ab.shape, rb.shape)));
    }
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(ab.values[i * c + j] + rb.values[j]);
        }
    }
    Ok(a.tape().push_op(Box::new(AddRow), &[a, row], Buf::new(vec![r, c], out)))
}

impl Op for AddRow {
    fn name(&self) -> &'static str {
        "add_row"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let g = ctx.out_grad;
        let c = ctx.inputs[1].len();
        let drow = ctx.needs[1].then(|| {
            let mut d = vec![0.0; c];
            for (e, gv) in g.iter().enumerate() {
                d[e % c] += gv;
            }
            d
        });
        vec![ctx.needs[0].then(|| g.to_vec()), drow]
    }
}

// ── layout ops ───────────────────────────────────────────────────────

#[derive(Debug)]
struct Transpose {
    rows: usize,
    cols: usize,
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let ab = a.buf();
    let (r, c) = dims2("transpose", &ab)?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = ab.values[i * c + j];
        }
    }
    Ok(a.tape().push_op(Box::new(Transpose { rows: r, cols: c }), &[a], Buf::new(vec![c, r], out)))
}

impl Op for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        // out is [cols, rows]; transpose the gradient back.
        let (r, c) = (self.rows, self.cols);
        let g = ctx.out_grad;
        vec![ctx.needs[0].then(|| {
            let mut d = vec![0.0; r * c];
            for j in 0..c {
                for i in 0..r {
                    d[i * c + j] = g[j * r + i];
                }
            }
            d
        })]
    }
}

#[derive(Debug)]
struct Reshape;

pub fn reshape(a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
    let ab = a.buf();
    if shape.iter().product::<usize>() != ab.len() {
        return Err(Error::shape("reshape", format!("{:?} -> {:?}", ab.shape, shape)));
    }
    let out = Buf { shape, values: ab.values.clone() };
    Ok(a.tape().push_op(Box::new(Reshape), &[a], out))
}

impl Op for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| ctx.out_grad.to_vec())]
    }
}

#[derive(Debug)]
struct ConcatRows {
    row_counts: Vec<usize>,
    cols: usize,
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    same_tape(parts);
    if parts.is_empty() {
        return Err(Error::shape("concat_rows", "no operands"));
    }
    let bufs: Vec<Buf> = parts.iter().map(|t| t.buf()).collect();
    let (_, cols) = dims2("concat_rows", &bufs[0])?;
    let mut row_counts = Vec::with_capacity(bufs.len());
    let mut out = Vec::new();
    for b in &bufs {
        let (r, c) = dims2("concat_rows", b)?;
        if c != cols {
            return Err(Error::shape("concat_rows", format!("{:?} vs {:?}", bufs[0].shape, b.shape)));
        }
        row_counts.push(r);
        out.extend_from_slice(&b.values);
    }
    let total: usize = row_counts.iter().sum();
    Ok(parts[0]
        .tape()
        .push_op(Box::new(ConcatRows { row_counts, cols }), parts, Buf::new(vec![total, cols], out)))
}

impl Op for ConcatRows {
    fn name(&self) -> &'static str {
        "concat_rows"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let g = ctx.out_grad;
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.row_counts.len());
        for (k, &r) in self.row_counts.iter().enumerate() {
            let span = r * self.cols;
            out.push(ctx.needs[k].then(|| g[offset..offset + span].to_vec()));
            offset += span;
        }
        out
    }
}

#[derive(Debug)]
struct ConcatCols {
    col_counts: Vec<usize>,
    rows: usize,
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    same_tape(parts);
    if parts.is_empty() {
        return Err(Error::shape("concat_cols", "no operands"));
    }
    let bufs: Vec<Buf> = parts.iter().map(|t| t.buf()).collect();
    let (rows, _) = dims2("concat_cols", &bufs[0])?;
    let mut col_counts = Vec::with_capacity(bufs.len());
    for b in &bufs {
        let (r, c) = dims2("concat_cols", b)?;
        if r != rows {
            return Err(Error::shape("concat_cols", format!("{:?} vs {:?}", bufs[0].shape, b.shape)));
        }
        col_counts.push(c);
    }
    let total: usize = col_counts.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for (b, &c) in bufs.iter().zip(&col_counts) {
            out.extend_from_slice(&b.values[i * c..(i + 1) * c]);
        }
    }
    Ok(parts[0]
        .tape()
        .push_op(Box::new(ConcatCols { col_counts, rows }), parts, Buf::new(vec![rows, total], out)))
}

impl Op for ConcatCols {
    fn name(&self) -> &'static str {
        "concat_cols"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let g = ctx.out_grad;
        let total: usize = self.col_counts.iter().sum();
        let mut outs = Vec::with_capacity(self.col_counts.len());
        let mut start = 0;
        for (k, &c) in self.col_counts.iter().enumerate() {
            outs.push(ctx.needs[k].then(|| {
                let mut d = Vec::with_capacity(self.rows * c);
                for i in 0..self.rows {
                    d.extend_from_slice(&g[i * total + start..i * total + start + c]);
                }
                d
            }));
            start += c;
        }
        outs
    }
}

#[derive(Debug)]
struct SliceRows {
    r0: usize,
    r1: usize,
    rows: usize,
    cols: usize,
}

pub fn slice_rows(a: &Tensor, r0: usize, r1: usize) -> Result<Tensor> {
    let ab = a.buf();
    let (r, c) = dims2("slice_rows", &ab)?;
    if r0 >= r1 || r1 > r {
        return Err(Error::shape("slice_rows", format!("rows {r0}..{r1} of {:?}", ab.shape)));
    }
    let out = ab.values[r0 * c..r1 * c].to_vec();
    Ok(a.tape().push_op(
        Box::new(SliceRows { r0, r1, rows: r, cols: c }),
        &[a],
        Buf::new(vec![r1 - r0, c], out),
    ))
}

impl Op for SliceRows {
    fn name(&self) -> &'static str {
        "slice_rows"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| {
            let mut d = vec![0.0; self.rows * self.cols];
            d[self.r0 * self.cols..self.r1 * self.cols].copy_from_slice(ctx.out_grad);
            d
        })]
    }
}

#[derive(Debug)]
struct SliceCols {
    c0: usize,
    c1: usize,
    rows: usize,
    cols: usize,
}

pub fn slice_cols(a: &Tensor, c0: usize, c1: usize) -> Result<Tensor> {
    let ab = a.buf();
    let (r, c) = dims2("slice_cols", &ab)?;
    if c0 >= c1 || c1 > c {
        return Err(Error::shape("slice_cols", format!("cols {c0}..{c1} of {:?}", ab.shape)));
    }
    let w = c1 - c0;
    let mut out = Vec::with_capacity(r * w);
    for i in 0..r {
        out.extend_from_slice(&ab.values[i * c + c0..i * c + c1]);
    }
    Ok(a.tape().push_op(
        Box::new(SliceCols { c0, c1, rows: r, cols: c }),
        &[a],
        Buf::new(vec![r, w], out),
    ))
}

impl Op for SliceCols {
    fn name(&self) -> &'static str {
        "slice_cols"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let w = self.c1 - self.c0;
        vec![ctx.needs[0].then(|| {
            let mut d = vec![0.0; self.rows * self.cols];
            for i in 0..self.rows {
                d[i * self.cols + self.c0..i * self.cols + self.c1]
                    .copy_from_slice(&ctx.out_grad[i * w..(i + 1) * w]);
            }
            d
        })]
    }
}

// ── softmax ──────────────────────────────────────────────────────────

#[derive(Debug)]
struct SoftmaxRows {
    temperature: f64,
    causal: bool,
}

/// Row-wise `softmax(x / temperature)` with max-subtraction. With `causal`,
/// entry `(i, j)` for `j > i` is masked out (output 0); requires a square
/// input.
pub fn softmax_rows(a: &Tensor, temperature: f64, causal: bool) -> Result<Tensor> {
    let ab = a.buf();
    let (r, c) = dims2("softmax", &ab)?;
    if temperature <= 0.0 {
        return Err(Error::Numeric(format!("softmax temperature must be positive, got {temperature}")));
    }
    if causal && r != c {
        return Err(Error::shape("softmax", format!("causal mask needs a square input, got {:?}", ab.shape)));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let window = if causal { i + 1 } else { c };
        let row = &ab.values[i * c..i * c + window];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (j, &x) in row.iter().enumerate() {
            let e = ((x - max) / temperature).exp();
            out[i * c + j] = e;
            denom += e;
        }
        for j in 0..window {
            out[i * c + j] /= denom;
        }
    }
    Ok(a.tape().push_op(Box::new(SoftmaxRows { temperature, causal }), &[a], Buf::new(vec![r, c], out)))
}

impl Op for SoftmaxRows {
    fn name(&self) -> &'static str {
        if self.causal {
            "softmax_causal"
        } else {
            "softmax"
        }
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let (r, c) = ctx.output.dims2().expect("softmax output rank");
        let p = &ctx.output.values;
        let g = ctx.out_grad;
        vec![ctx.needs[0].then(|| {
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let window = if self.causal { i + 1 } else { c };
                let mut dot = 0.0;
                for j in 0..window {
                    dot += g[i * c + j] * p[i * c + j];
                }
                for j in 0..window {
                    d[i * c + j] = p[i * c + j] * (g[i * c + j] - dot) / self.temperature;
                }
            }
            d
        })]
    }
}

// ── layer norm ───────────────────────────────────────────────────────

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
struct LayerNormRows {
    eps: f64,
}

/// Row-wise layer normalization with learnable gain and bias (rank-1, one
/// entry per column).
pub fn layernorm_rows(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    same_tape(&[x, gain, bias]);
    let xb = x.buf();
    let (r, c) = dims2("layernorm", &xb)?;
    let (gb, bb) = (gain.buf(), bias.buf());
    if gb.shape != [c] || bb.shape != [c] {
        return Err(Error::shape(
            "layernorm",
            format!("input {:?} with gain {:?} / bias {:?}", xb.shape, gb.shape, bb.shape),
        ));
    }
    let eps = LN_EPS;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &xb.values[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            out[i * c + j] = (row[j] - mean) * inv * gb.values[j] + bb.values[j];
        }
    }
    Ok(x.tape().push_op(Box::new(LayerNormRows { eps }), &[x, gain, bias], Buf::new(vec![r, c], out)))
}

impl Op for LayerNormRows {
    fn name(&self) -> &'static str {
        "layernorm"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let xb = ctx.inputs[0];
        let gainv = &ctx.inputs[1].values;
        let (r, c) = xb.dims2().expect("layernorm input rank");
        let g = ctx.out_grad;
        let mut dx = ctx.needs[0].then(|| vec![0.0; r * c]);
        let mut dgain = ctx.needs[1].then(|| vec![0.0; c]);
        let mut dbias = ctx.needs[2].then(|| vec![0.0; c]);
        for i in 0..r {
            let row = &xb.values[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            // y is the normalized row before gain/bias.
            let y: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
            if let Some(dg) = dgain.as_mut() {
                for j in 0..c {
                    dg[j] += g[i * c + j] * y[j];
                }
            }
            if let Some(db) = dbias.as_mut() {
                for j in 0..c {
                    db[j] += g[i * c + j];
                }
            }
            if let Some(dx) = dx.as_mut() {
                let gy: Vec<f64> = (0..c).map(|j| g[i * c + j] * gainv[j]).collect();
                let mean_gy = gy.iter().sum::<f64>() / c as f64;
                let mean_gy_y = gy.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for j in 0..c {
                    dx[i * c + j] = (gy[j] - mean_gy - y[j] * mean_gy_y) * inv;
                }
            }
        }
        vec![dx, dgain, dbias]
    }
}

// ── gelu ─────────────────────────────────────────────────────────────

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044715;

#[derive(Debug)]
struct Gelu;

/// Tanh-approximation GELU.
pub fn gelu(a: &Tensor) -> Result<Tensor> {
    let ab = a.buf();
    let out: Vec<f64> = ab
        .values
        .iter()
        .map(|&x| 0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh()))
        .collect();
    Ok(a.tape().push_op(Box::new(Gelu), &[a], Buf::new(ab.shape.clone(), out)))
}

impl Op for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let x = &ctx.inputs[0].values;
        vec![ctx.needs[0].then(|| {
            ctx.out_grad
                .iter()
                .zip(x.iter())
                .map(|(&g, &x)| {
                    let u = GELU_A * (x + GELU_B * x * x * x);
                    let t = u.tanh();
                    let du = GELU_A * (1.0 + 3.0 * GELU_B * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })
                .collect()
        })]
    }
}

// ── cosine similarity ────────────────────────────────────────────────

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug)]
struct CosineSim {
    n: usize,
    c: usize,
    d: usize,
}

/// `out[i, j] = cos(a_i, b_j)` for `a: [n, d]`, `b: [c, d]`. Rows with a
/// norm below `1e-12` are rejected.
pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_tape(&[a, b]);
    let (ab, bb) = (a.buf(), b.buf());
    let (n, d) = dims2("cosine_sim", &ab)?;
    let (c, d2) = dims2("cosine_sim", &bb)?;
    if d != d2 {
        return Err(Error::shape("cosine_sim", format!("{:?} vs {:?}", ab.shape, bb.shape)));
    }
    let na = row_norms("cosine_sim lhs", &ab.values, n, d)?;
    let nb = row_norms("cosine_sim rhs", &bb.values, c, d)?;
    let dots = mm(&ab.values, (n, d), false, &bb.values, (c, d), true);
    let mut out = dots;
    for i in 0..n {
        for j in 0..c {
            out[i * c + j] /= na[i] * nb[j];
        }
    }
    Ok(a.tape().push_op(Box::new(CosineSim { n, c, d }), &[a, b], Buf::new(vec![n, c], out)))
}

fn row_norms(what: &str, values: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    let mut norms = Vec::with_capacity(rows);
    for i in 0..rows {
        let n = values[i * cols..(i + 1) * cols].iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < NORM_FLOOR {
            return Err(Error::Numeric(format!("{what}: zero-norm row {i}")));
        }
        norms.push(n);
    }
    Ok(norms)
}

impl Op for CosineSim {
    fn name(&self) -> &'static str {
        "cosine_sim"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let (n, c, d) = (self.n, self.c, self.d);
        let a = &ctx.inputs[0].values;
        let b = &ctx.inputs[1].values;
        let s = &ctx.output.values;
        let g = ctx.out_grad;
        let na = row_norms("cosine_sim lhs", a, n, d).expect("norms already validated");
        let nb = row_norms("cosine_sim rhs", b, c, d).expect("norms already validated");

        let da = ctx.needs[0].then(|| {
            // da_i = sum_j g_ij [ b_j / (na_i nb_j) - s_ij a_i / na_i^2 ]
            let mut w = vec![0.0; n * c];
            let mut coeff = vec![0.0; n];
            for i in 0..n {
                for j in 0..c {
                    let gij = g[i * c + j];
                    w[i * c + j] = gij / nb[j];
                    coeff[i] += gij * s[i * c + j];
                }
            }
            let mut d_out = mm(&w, (n, c), false, b, (c, d), false);
            for i in 0..n {
                for k in 0..d {
                    d_out[i * d + k] = d_out[i * d + k] / na[i] - coeff[i] * a[i * d + k] / (na[i] * na[i]);
                }
            }
            d_out
        });
        let db = ctx.needs[1].then(|| {
            // db_j = sum_i g_ij [ a_i / (na_i nb_j) - s_ij b_j / nb_j^2 ]
            let mut w = vec![0.0; n * c];
            let mut coeff = vec![0.0; c];
            for i in 0..n {
                for j in 0..c {
                    let gij = g[i * c + j];
                    w[i * c + j] = gij / na[i];
                    coeff[j] += gij * s[i * c + j];
                }
            }
            let mut d_out = mm(&w, (n, c), true, a, (n, d), false);
            for j in 0..c {
                for k in 0..d {
                    d_out[j * d + k] = d_out[j * d + k] / nb[j] - coeff[j] * b[j * d + k] / (nb[j] * nb[j]);
                }
            }
            d_out
        });
        vec![da, db]
    }
}

// ── reductions and losses ────────────────────────────────────────────

#[derive(Debug)]
struct SumAll;

pub fn sum_all(a: &Tensor) -> Result<Tensor> {
    let ab = a.buf();
    let s = ab.values.iter().sum::<f64>();
    Ok(a.tape().push_op(Box::new(SumAll), &[a], Buf::scalar(s)))
}

impl Op for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let g = ctx.out_grad[0];
        vec![ctx.needs[0].then(|| vec![g; ctx.inputs[0].len()])]
    }
}

pub fn mean_all(a: &Tensor) -> Result<Tensor> {
    let n = a.buf().len();
    scale(&sum_all(a)?, 1.0 / n as f64)
}

#[derive(Debug)]
struct MeanAbsDiff;

/// Scalar mean absolute difference between two same-shape tensors.
pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_tape(&[a, b]);
    let (ab, bb) = (a.buf(), b.buf());
    check_same_shape("l1_distance", &ab, &bb)?;
    let n = ab.len() as f64;
    let s = ab.values.iter().zip(bb.values.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
    Ok(a.tape().push_op(Box::new(MeanAbsDiff), &[a, b], Buf::scalar(s)))
}

impl Op for MeanAbsDiff {
    fn name(&self) -> &'static str {
        "l1_distance"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (&ctx.inputs[0].values, &ctx.inputs[1].values);
        let n = a.len() as f64;
        let g = ctx.out_grad[0];
        let signs: Vec<f64> = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| {
                let d = x - y;
                if d > 0.0 {
                    g / n
                } else if d < 0.0 {
                    -g / n
                } else {
                    0.0
                }
            })
            .collect();
        vec![
            ctx.needs[0].then(|| signs.clone()),
            ctx.needs[1].then(|| signs.iter().map(|v| -v).collect()),
        ]
    }
}

#[derive(Debug)]
struct NllFromProbs {
    targets: Vec<u32>,
}

/// `-(1/n) sum_i ln p[i, targets[i]]` over a probability table `[n, c]`.
pub fn nll_from_probs(p: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let pb = p.buf();
    let (n, c) = dims2("nll", &pb)?;
    if targets.len() != n {
        return Err(Error::shape("nll", format!("{n} rows vs {} targets", targets.len())));
    }
    let mut s = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t as usize >= c {
            return Err(Error::shape("nll", format!("target {t} out of range for {c} classes")));
        }
        let prob = pb.values[i * c + t as usize];
        if prob <= 0.0 {
            return Err(Error::Numeric(format!("nll: zero probability at row {i}")));
        }
        s -= prob.ln();
    }
    let out = s / n as f64;
    Ok(p.tape().push_op(Box::new(NllFromProbs { targets: targets.to_vec() }), &[p], Buf::scalar(out)))
}

impl Op for NllFromProbs {
    fn name(&self) -> &'static str {
        "nll"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let pb = ctx.inputs[0];
        let (n, c) = pb.dims2().expect("nll input rank");
        let g = ctx.out_grad[0];
        vec![ctx.needs[0].then(|| {
            let mut d = vec![0.0; n * c];
            for (i, &t) in self.targets.iter().enumerate() {
                let idx = i * c + t as usize;
                d[idx] = -g / (n as f64 * pb.values[idx]);
            }
            d
        })]
    }
}

// ── lookup / selection ───────────────────────────────────────────────

#[derive(Debug)]
struct GatherRows {
    indices: Vec<u32>,
}

/// `out[i] = table[indices[i]]`; scatter-adds gradients back into the table.
pub fn gather_rows(table: &Tensor, indices: &[u32]) -> Result<Tensor> {
    let tb = table.buf();
    let (r, c) = dims2("gather_rows", &tb)?;
    let mut out = Vec::with_capacity(indices.len() * c);
    for &idx in indices {
        if idx as usize >= r {
            return Err(Error::shape("gather_rows", format!("index {idx} out of range for {r} rows")));
        }
        out.extend_from_slice(&tb.values[idx as usize * c..(idx as usize + 1) * c]);
    }
    Ok(table.tape().push_op(
        Box::new(GatherRows { indices: indices.to_vec() }),
        &[table],
        Buf::new(vec![indices.len(), c], out),
    ))
}

impl Op for GatherRows {
    fn name(&self) -> &'static str {
        "gather_rows"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let tb = ctx.inputs[0];
        let (r, c) = tb.dims2().expect("gather input rank");
        let g = ctx.out_grad;
        vec![ctx.needs[0].then(|| {
            let mut d = vec![0.0; r * c];
            for (i, &idx) in self.indices.iter().enumerate() {
                for k in 0..c {
                    d[idx as usize * c + k] += g[i * c + k];
                }
            }
            d
        })]
    }
}

#[derive(Debug)]
struct Clamp01;

/// Clamp to `[0, 1]`; gradient passes only where the input already lies in
/// the interval (inclusive).
pub fn clamp01(a: &Tensor) -> Result<Tensor> {
    let ab = a.buf();
    let out: Vec<f64> = ab.values.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(a.tape().push_op(Box::new(Clamp01), &[a], Buf::new(ab.shape.clone(), out)))
}

impl Op for Clamp01 {
    fn name(&self) -> &'static str {
        "clamp01"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let x = &ctx.inputs[0].values;
        vec![ctx.needs[0].then(|| {
            ctx.out_grad
                .iter()
                .zip(x.iter())
                .map(|(&g, &x)| if (0.0..=1.0).contains(&x) { g } else { 0.0 })
                .collect()
        })]
    }
}

#[derive(Debug)]
struct Ste;

/// Straight-through step: the forward value is `replacement`, the backward
/// Jacobian is the identity onto `z`.
pub fn ste(z: &Tensor, replacement: Buf) -> Result<Tensor> {
    let zb = z.buf();
    if zb.shape != replacement.shape {
        return Err(Error::shape("ste", format!("{:?} vs replacement {:?}", zb.shape, replacement.shape)));
    }
    Ok(z.tape().push_op(Box::new(Ste), &[z], replacement))
}

impl Op for Ste {
    fn name(&self) -> &'static str {
        "ste"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| ctx.out_grad.to_vec())]
    }
}

#[derive(Debug)]
struct RowMix {
    replaced: Vec<bool>,
}

/// Per-row selection: rows flagged in `replaced` come from `replacement`,
/// the rest from `base`. Gradients follow the selection.
pub fn row_mix(base: &Tensor, replacement: &Tensor, replaced: &[bool]) -> Result<Tensor> {
    same_tape(&[base, replacement]);
    let (bb, rb) = (base.buf(), replacement.buf());
    check_same_shape("row_mix", &bb, &rb)?;
    let (n, d) = dims2("row_mix", &bb)?;
    if replaced.len() != n {
        return Err(Error::shape("row_mix", format!("{n} rows vs {} flags", replaced.len())));
    }
    let mut out = Vec::with_capacity(n * d);
    for (i, &rep) in replaced.iter().enumerate() {
        let src = if rep { &rb.values } else { &bb.values };
        out.extend_from_slice(&src[i * d..(i + 1) * d]);
    }
    Ok(base.tape().push_op(
        Box::new(RowMix { replaced: replaced.to_vec() }),
        &[base, replacement],
        Buf::new(vec![n, d], out),
    ))
}

impl Op for RowMix {
    fn name(&self) -> &'static str {
        "row_mix"
    }

    fn backward(&self, ctx: &OpCtx) -> Vec<Option<Vec<f64>>> {
        let (n, d) = ctx.output.dims2().expect("row_mix output rank");
        let g = ctx.out_grad;
        let pick = |want_replaced: bool| {
            let mut out = vec![0.0; n * d];
            for (i, &rep) in self.replaced.iter().enumerate() {
                if rep == want_replaced {
                    out[i * d..(i + 1) * d].copy_from_slice(&g[i * d..(i + 1) * d]);
                }
            }
            out
        };
        vec![ctx.needs[0].then(|| pick(false)), ctx.needs[1].then(|| pick(true))]
    }
}

// ── composites ───────────────────────────────────────────────────────

/// `x @ w + bias`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = matmul(x, w)?;
    match bias {
        Some(b) => add_row(&y, b),
        None => Ok(y),
    }
}

/// Scaled dot-product attention over `q: [s, dk]`, `k: [s', dk]`,
/// `v: [s', dv]`, optionally causally masked (requires `s == s'`).
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    let dk = dims2("attention", &q.buf())?.1;
    let scores = matmul(q, &transpose(k)?)?;
    let scaled = scale(&scores, 1.0 / (dk as f64).sqrt())?;
    let probs = softmax_rows(&scaled, 1.0, causal)?;
    matmul(&probs, v)
}

// ── operator-tag dispatch ────────────────────────────────────────────

/// Operator tags for building nodes dynamically (registry surface used by
/// the gradient checker and the CLI).
#[derive(Debug, Clone)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Softmax { temperature: f64 },
    LayerNorm,
    Gelu,
    Attention { causal: bool },
    Reshape { shape: Vec<usize> },
    Transpose,
    ConcatRows,
    L1Distance,
    CosineSim,
}

fn arity(op: &'static str, inputs: &[&Tensor], want: usize) -> Result<()> {
    if inputs.len() != want {
        return Err(Error::shape(op, format!("expected {want} operands, got {}", inputs.len())));
    }
    Ok(())
}

/// Apply an operator by tag.
pub fn forward_op(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    match kind {
        OpKind::MatMul => {
            arity("matmul", inputs, 2)?;
            matmul(inputs[0], inputs[1])
        }
        OpKind::Add => {
            arity("add", inputs, 2)?;
            add(inputs[0], inputs[1])
        }
        OpKind::Mul => {
            arity("mul", inputs, 2)?;
            mul(inputs[0], inputs[1])
        }
        OpKind::Softmax { temperature } => {
            arity("softmax", inputs, 1)?;
            softmax_rows(inputs[0], *temperature, false)
        }
        OpKind::LayerNorm => {
            arity("layernorm", inputs, 3)?;
            layernorm_rows(inputs[0], inputs[1], inputs[2])
        }
        OpKind::Gelu => {
            arity("gelu", inputs, 1)?;
            gelu(inputs[0])
        }
        OpKind::Attention { causal } => {
            arity("attention", inputs, 3)?;
            attention(inputs[0], inputs[1], inputs[2], *causal)
        }
        OpKind::Reshape { shape } => {
            arity("reshape", inputs, 1)?;
            reshape(inputs[0], shape.clone())
        }
        OpKind::Transpose => {
            arity("transpose", inputs, 1)?;
            transpose(inputs[0])
        }
        OpKind::ConcatRows => concat_rows(inputs),
        OpKind::L1Distance => {
            arity("l1_distance", inputs, 2)?;
            mean_abs_diff(inputs[0], inputs[1])
        }
        OpKind::CosineSim => {
            arity("cosine_sim", inputs, 2)?;
            cosine_sim(inputs[0], inputs[1])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(tape: &Tape, shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        tape.leaf(Buf::new(shape, values), true)
    }

    #[test]
    fn softmax_symmetry_uniform() {
        let tape = Tape::new();
        let x = t(&tape, vec![1, 3], vec![0.0, 0.0, 0.0]);
        let p = softmax_rows(&x, 1.0, false).unwrap();
        for v in p.values().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_temperature_hand_value() {
        // softmax([2, 1] / 0.5) = [e^4, e^2] normalized.
        let tape = Tape::new();
        let x = t(&tape, vec![1, 2], vec![2.0, 1.0]);
        let p = softmax_rows(&x, 0.5, false).unwrap();
        let v = p.values();
        assert!((v[0] - 0.8808).abs() < 5e-5, "{}", v[0]);
        assert!((v[1] - 0.1192).abs() < 5e-5, "{}", v[1]);
    }

    #[test]
    fn softmax_rows_sum_to_one_strictly_positive() {
        let tape = Tape::new();
        let mut rng = crate::rng::Rng::new(11);
        for trial in 0..60 {
            let r = 1 + rng.below(6);
            let c = 1 + rng.below(9);
            // Alternate between wide logits at moderate temperature and the
            // cosine-similarity regime (|logit| <= 1) at temperature 0.03.
            let (span, temp) = if trial % 2 == 0 {
                (60.0, 0.5 + rng.uniform())
            } else {
                (2.0, 0.03)
            };
            let vals: Vec<f64> = (0..r * c).map(|_| (rng.uniform() - 0.5) * span).collect();
            let x = t(&tape, vec![r, c], vals);
            let p = softmax_rows(&x, temp, false).unwrap();
            let v = p.values();
            for i in 0..r {
                let s: f64 = v[i * c..(i + 1) * c].iter().sum();
                assert!((s - 1.0).abs() < 1e-10, "row sum {s}");
                assert!(v[i * c..(i + 1) * c].iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let eye = t(&tape, vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = t(&tape, vec![3, 4], (0..12).map(|v| v as f64 * 0.5 - 2.0).collect());
        let prod = matmul(&eye, &a).unwrap();
        assert_eq!(*prod.values(), *a.values());
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = t(&tape, vec![2, 3], vec![0.0; 6]);
        let b = t(&tape, vec![2, 3], vec![0.0; 6]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
        // Finite differences at h = 1e-5 against the analytic composition.
        let logits = vec![0.3, -1.2, 0.8, 0.1];
        let target = 2u32;
        let eval = |vals: &[f64]| -> f64 {
            let tape = Tape::new();
            let x = tape.constant(vec![1, 4], vals.to_vec());
            let p = softmax_rows(&x, 1.0, false).unwrap();
            nll_from_probs(&p, &[target]).unwrap().scalar()
        };
        let tape = Tape::new();
        let x = t(&tape, vec![1, 4], logits.clone());
        let p = softmax_rows(&x, 1.0, false).unwrap();
        let loss = nll_from_probs(&p, &[target]).unwrap();
        tape.backward(&loss).unwrap();
        let grad = x.grad().unwrap();
        let probs = p.values();
        let h = 1e-5;
        for e in 0..4 {
            let mut up = logits.clone();
            up[e] += h;
            let mut dn = logits.clone();
            dn[e] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            assert!((grad[e] - fd).abs() < 1e-9, "elem {e}: {} vs {fd}", grad[e]);
            let expect = probs[e] - if e as u32 == target { 1.0 } else { 0.0 };
            assert!((grad[e] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_attention_ignores_future_rows() {
        let mut rng = crate::rng::Rng::new(5);
        let (s, d) = (6, 4);
        let base: Vec<f64> = (0..s * d).map(|_| rng.normal()).collect();
        let run = |vals: &[f64]| -> (Vec<f64>, usize) {
            let tape = Tape::new();
            let x = tape.constant(vec![s, d], vals.to_vec());
            let out = attention(&x, &x, &x, true).unwrap();
            (out.values().to_vec(), d)
        };
        let (ref_out, _) = run(&base);
        for row in 2..s {
            let mut perturbed = base.clone();
            for v in &mut perturbed[row * d..(row + 1) * d] {
                *v += 3.5;
            }
            let (out, d) = run(&perturbed);
            for i in 0..row {
                assert_eq!(out[i * d..(i + 1) * d], ref_out[i * d..(i + 1) * d], "row {i} changed");
            }
        }
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let tape = Tape::new();
        let a = t(&tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&tape, vec![1, 3], vec![7.0, 8.0, 9.0]);
        let cat = concat_rows(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), vec![3, 3]);
        let back = slice_rows(&cat, 2, 3).unwrap();
        assert_eq!(*back.values(), *b.values());
        let col = slice_cols(&cat, 1, 2).unwrap();
        assert_eq!(*col.values(), vec![2.0, 5.0, 8.0]);
    }

    #[test]
    fn gather_rows_rejects_out_of_range() {
        let tape = Tape::new();
        let table = t(&tape, vec![3, 2], vec![0.0; 6]);
        assert!(gather_rows(&table, &[0, 3]).is_err());
    }

    #[test]
    fn ste_passes_gradient_unchanged() {
        let tape = Tape::new();
        let z = t(&tape, vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]);
        let replacement = Buf::new(vec![2, 2], vec![9.0, 8.0, 7.0, 6.0]);
        let out = ste(&z, replacement).unwrap();
        assert_eq!(*out.values(), vec![9.0, 8.0, 7.0, 6.0]);
        let w = tape.constant(vec![2, 2], vec![2.0, -1.0, 0.5, 3.0]);
        let loss = sum_all(&mul(&out, &w).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x_grad(&z), vec![2.0, -1.0, 0.5, 3.0]);
        assert_eq!(out.grad().unwrap(), vec![2.0, -1.0, 0.5, 3.0]);
    }

    fn x_grad(x: &Tensor) -> Vec<f64> {
        x.grad().unwrap()
    }

    #[test]
    fn forward_op_dispatch_matches_builders() {
        let tape = Tape::new();
        let a = t(&tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(&tape, vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]);
        let via_kind = forward_op(&OpKind::MatMul, &[&a, &b]).unwrap();
        let direct = matmul(&a, &b).unwrap();
        assert_eq!(*via_kind.values(), *direct.values());
        assert!(forward_op(&OpKind::MatMul, &[&a]).is_err());
    }
}
