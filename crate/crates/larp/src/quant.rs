//! Stochastic vector quantization over a factorized codebook.
//!
//! Code probabilities are a temperature softmax over cosine similarities;
//! lookup samples that multinomial (or takes its argmax in deterministic
//! mode). The straight-through estimator carries gradients across the
//! discrete step, and the quantization loss combines the codebook and
//! commitment terms.

use crate::error::{Error, Result};
use crate::params::Binder;
use crate::rng::Rng;
use crate::tensor::{ops, Tensor};

/// Minimum allowed code-vector norm; rows below this get re-initialized.
pub const CODE_NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct QuantizerConfig {
    pub temperature: f64,
    pub commitment_weight: f64,
    pub codebook_weight: f64,
    pub total_weight: f64,
    pub deterministic: bool,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            temperature: 0.03,
            commitment_weight: 0.25,
            codebook_weight: 1.0,
            total_weight: 0.1,
            deterministic: false,
        }
    }
}

/// Read-only view of a `count x dim` codebook matrix.
#[derive(Clone, Copy)]
pub struct CodebookView<'a> {
    pub dim: usize,
    pub vectors: &'a [f64],
}

impl<'a> CodebookView<'a> {
    pub fn new(dim: usize, vectors: &'a [f64]) -> Self {
        debug_assert_eq!(vectors.len() % dim, 0);
        CodebookView { dim, vectors }
    }

    pub fn count(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

/// Softmax over cosine similarities: `p_i = softmax(cos(v, C_i) / temperature)`.
pub fn code_probs(v: &[f64], book: &CodebookView, temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!("quantizer temperature must be positive, got {temperature}")));
    }
    let vn = norm(v);
    if vn < CODE_NORM_FLOOR {
        return Err(Error::Numeric("code_probs: zero-norm input vector".into()));
    }
    let c = book.count();
    let mut logits = Vec::with_capacity(c);
    for i in 0..c {
        let row = book.row(i);
        let rn = norm(row);
        if rn < CODE_NORM_FLOOR {
            return Err(Error::Numeric(format!("code_probs: zero-norm code vector {i}")));
        }
        let dot: f64 = v.iter().zip(row).map(|(a, b)| a * b).sum();
        logits.push(dot / (vn * rn));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let denom: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= denom;
    }
    Ok(probs)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Argmax with ties resolved to the lowest index.
pub fn argmax_code(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// One code index for `v`: multinomial in stochastic mode, argmax otherwise.
pub fn quantize(
    v: &[f64],
    book: &CodebookView,
    temperature: f64,
    deterministic: bool,
    rng: &mut Rng,
) -> Result<usize> {
    let probs = code_probs(v, book, temperature)?;
    Ok(if deterministic { argmax_code(&probs) } else { rng.multinomial(&probs) })
}

/// Codebook row for index `x`.
pub fn dequantize<'a>(x: usize, book: &CodebookView<'a>) -> Result<&'a [f64]> {
    if x >= book.count() {
        return Err(Error::Data(format!("dequantize: index {x} out of range for {} codes", book.count())));
    }
    Ok(book.row(x))
}

/// How the quantization step behaves inside a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Sample code indices from the multinomial.
    Stochastic,
    /// Argmax code indices.
    Deterministic,
    /// No discrete replacement at all: the identity surrogate the
    /// straight-through gradient assumes, used by finite-difference checks.
    Bypass,
}

/// Parameter names used by the quantizer inside a store.
#[derive(Clone, Debug)]
pub struct SvqParamNames {
    pub codebook: String,
    pub proj_in: String,
    pub proj_out: String,
}

impl SvqParamNames {
    pub fn with_prefix(prefix: &str) -> Self {
        SvqParamNames {
            codebook: format!("{prefix}codebook"),
            proj_in: format!("{prefix}proj_in"),
            proj_out: format!("{prefix}proj_out"),
        }
    }
}

/// Register quantizer parameters: a unit-norm codebook and the bias-free
/// factorized projections.
pub fn init_svq_params(
    store: &mut crate::params::ParamStore,
    rng: &mut Rng,
    names: &SvqParamNames,
    embed_dim: usize,
    code_dim: usize,
    code_count: usize,
) {
    assert!(code_count >= 2, "codebook needs at least 2 codes");
    let mut vectors = Vec::with_capacity(code_count * code_dim);
    for _ in 0..code_count {
        let mut row: Vec<f64>;
        loop {
            row = (0..code_dim).map(|_| rng.normal()).collect();
            let n = norm(&row);
            if n >= CODE_NORM_FLOOR {
                for v in &mut row {
                    *v /= n;
                }
                break;
            }
        }
        vectors.extend_from_slice(&row);
    }
    store.add(&names.codebook, vec![code_count, code_dim], vectors);
    store.add_normal(rng, &names.proj_in, vec![embed_dim, code_dim], 0.02);
    store.add_normal(rng, &names.proj_out, vec![code_dim, embed_dim], 0.02);
}

/// Everything the quantizer contributes to a graph.
pub struct SvqTensors {
    pub tokens: Vec<u32>,
    /// `n x d` dequantized-and-up-projected latents (gradient-carrying).
    pub dequant: Tensor,
    /// Weighted quantization loss (scalar node).
    pub loss: Tensor,
    /// `n x d'` rows entering the discrete step.
    pub pre_quant: Tensor,
    /// `n x d'` rows leaving the discrete step.
    pub ste_out: Tensor,
}

/// Project to the code dimension, quantize each row, and project back,
/// recording the straight-through step and the quantization losses.
///
/// The discrete output is expressed as `C_x + (z' - sg(z'))`, which forwards
/// the code vector exactly while routing the output gradient both straight
/// through to `z'` and into the selected codebook rows.
pub fn svq_forward(
    binder: &Binder,
    latents: &Tensor,
    names: &SvqParamNames,
    cfg: &QuantizerConfig,
    mode: QuantMode,
    rng: &mut Rng,
) -> Result<SvqTensors> {
    let proj_in = binder.p(&names.proj_in)?;
    let proj_out = binder.p(&names.proj_out)?;
    let codebook = binder.p(&names.codebook)?;

    let pre_quant = ops::matmul(latents, &proj_in)?;
    let zb = pre_quant.buf();
    let (n, code_dim) = zb.dims2().expect("pre-quant rank");
    let book_buf = codebook.buf();
    let view = CodebookView::new(code_dim, &book_buf.values);

    let mut tokens = Vec::with_capacity(n);
    for i in 0..n {
        let row = &zb.values[i * code_dim..(i + 1) * code_dim];
        let probs = code_probs(row, &view, cfg.temperature)?;
        let x = match mode {
            QuantMode::Stochastic => rng.multinomial(&probs),
            QuantMode::Deterministic | QuantMode::Bypass => argmax_code(&probs),
        };
        tokens.push(x as u32);
    }

    // Selected code rows as plain values, for the commitment target.
    let mut picked = Vec::with_capacity(n * code_dim);
    for &x in &tokens {
        picked.extend_from_slice(view.row(x as usize));
    }
    let picked_const = binder.tape.constant(vec![n, code_dim], picked);

    let ste_out = match mode {
        QuantMode::Bypass => pre_quant.clone(),
        _ => {
            let gathered = ops::gather_rows(&codebook, &tokens)?;
            let residual = ops::sub(&pre_quant, &pre_quant.detach())?;
            ops::add(&gathered, &residual)?
        }
    };
    let dequant = ops::matmul(&ste_out, &proj_out)?;

    // codebook term: || sg(z') - C_x ||^2, commitment term: || z' - sg(C_x) ||^2,
    // each summed per row and averaged over rows.
    let gathered_for_loss = ops::gather_rows(&codebook, &tokens)?;
    let book_diff = ops::sub(&pre_quant.detach(), &gathered_for_loss)?;
    let book_term = ops::scale(&ops::sum_all(&ops::mul(&book_diff, &book_diff)?)?, 1.0 / n as f64)?;
    let commit_diff = ops::sub(&pre_quant, &picked_const)?;
    let commit_term = ops::scale(&ops::sum_all(&ops::mul(&commit_diff, &commit_diff)?)?, 1.0 / n as f64)?;
    let weighted = ops::add(
        &ops::scale(&book_term, cfg.codebook_weight)?,
        &ops::scale(&commit_term, cfg.commitment_weight)?,
    )?;
    let loss = ops::scale(&weighted, cfg.total_weight)?;

    Ok(SvqTensors { tokens, dequant, loss, pre_quant, ste_out })
}
