//! Training-time autoregressive prior over the holistic latent sequence.
//!
//! A linear input head consumes dequantized latents, a causal transformer
//! trunk predicts the next token's code embedding, and the output head
//! scores it against the live codebook by cosine similarity (same scheme as
//! the quantizer). Trained with two-round scheduled sampling; never used at
//! tokenizer inference time.

use crate::blocks;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::quant::CodebookView;
use crate::rng::Rng;
use crate::tensor::{ops, Tensor};

pub const PREFIX: &str = "prior.";

#[derive(Clone, Copy, Debug)]
pub struct PriorConfig {
    /// Width of the incoming dequantized latents (tokenizer embed dim).
    pub input_dim: usize,
    /// Trunk width.
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Code dimension d' (the predicted embedding width).
    pub code_dim: usize,
    pub output_temperature: f64,
}

/// Linear warm-up schedule for the scheduled-sampling mixing rate.
#[derive(Clone, Copy, Debug)]
pub struct SampleSchedule {
    pub peak_rate: f64,
    pub warm_frac: f64,
    pub total_steps: usize,
}

impl Default for SampleSchedule {
    fn default() -> Self {
        SampleSchedule { peak_rate: 0.5, warm_frac: 0.30, total_steps: 1 }
    }
}

/// Mixing rate at `step`: linear from 0 to `peak_rate` over the first
/// `warm_frac` of training, constant afterwards.
pub fn mix_rate(step: usize, sched: &SampleSchedule) -> f64 {
    let warm = sched.warm_frac * sched.total_steps as f64;
    if warm <= 0.0 {
        return sched.peak_rate;
    }
    let s = step as f64;
    if s >= warm {
        sched.peak_rate
    } else {
        sched.peak_rate * (s / warm)
    }
}

pub struct Prior {
    pub cfg: PriorConfig,
    codebook_name: String,
}

impl Prior {
    /// `codebook_name` points at the live codebook parameter shared with the
    /// quantizer (no frozen copy).
    pub fn new(cfg: PriorConfig, codebook_name: &str) -> Self {
        Prior { cfg, codebook_name: codebook_name.to_string() }
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        store.add_normal(rng, "prior.in_proj.w", vec![self.cfg.input_dim, self.cfg.dim], blocks::INIT_STD);
        store.add_const("prior.in_proj.b", vec![self.cfg.dim], 0.0);
        store.add_normal(rng, "prior.bos", vec![1, self.cfg.dim], blocks::INIT_STD);
        blocks::init_block_stack(store, rng, PREFIX, self.cfg.dim, self.cfg.depth);
        store.add_normal(rng, "prior.out_proj.w", vec![self.cfg.dim, self.cfg.code_dim], blocks::INIT_STD);
        store.add_const("prior.out_proj.b", vec![self.cfg.code_dim], 0.0);
    }

    /// Output head: cosine similarities of predicted embeddings against the
    /// codebook, softmax-normalized at the output temperature.
    pub fn head_probs(&self, binder: &Binder, predicted: &Tensor) -> Result<Tensor> {
        let codebook = binder.p(&self.codebook_name)?;
        let sims = ops::cosine_sim(predicted, &codebook)?;
        ops::softmax_rows(&sims, self.cfg.output_temperature, false)
    }

    /// Trunk forward over shifted inputs: row `i` of the result is computed
    /// from the BOS embedding plus latent rows `< i`.
    fn predicted_embeddings(&self, binder: &Binder, latents: &Tensor) -> Result<Tensor> {
        let lb = latents.buf();
        let (n, d) = lb
            .dims2()
            .ok_or_else(|| Error::shape("prior", format!("latents must be rank 2, got {:?}", lb.shape)))?;
        if d != self.cfg.input_dim {
            return Err(Error::shape("prior", format!("latent width {d} vs configured {}", self.cfg.input_dim)));
        }
        let projected = ops::linear(
            latents,
            &binder.p("prior.in_proj.w")?,
            Some(&binder.p("prior.in_proj.b")?),
        )?;
        let bos = binder.p("prior.bos")?;
        let inputs = if n == 1 {
            bos
        } else {
            let shifted = ops::slice_rows(&projected, 0, n - 1)?;
            ops::concat_rows(&[&bos, &shifted])?
        };
        let hidden = blocks::block_stack_forward(
            binder,
            PREFIX,
            &inputs,
            self.cfg.dim,
            self.cfg.heads,
            self.cfg.depth,
            true,
            None,
        )?;
        ops::linear(&hidden, &binder.p("prior.out_proj.w")?, Some(&binder.p("prior.out_proj.b")?))
    }

    /// Next-token probability table (`n x c`): row `i` is the distribution
    /// for token `i` given strictly earlier positions.
    pub fn probs(&self, binder: &Binder, latents: &Tensor) -> Result<Tensor> {
        let predicted = self.predicted_embeddings(binder, latents)?;
        self.head_probs(binder, &predicted)
    }

    /// Two-round scheduled-sampling NLL.
    ///
    /// Round 1 is teacher-forced. Each position then flips an independent
    /// coin at the current mixing rate; replaced positions take a token
    /// sampled from their round-1 distribution, re-dequantized through the
    /// codebook (detached). Round 2 scores the mixed sequence against the
    /// same ground truth, and the two NLLs are averaged. Per position the
    /// rng draws one coin, plus one sample when the coin hits.
    pub fn loss(
        &self,
        binder: &Binder,
        tokens: &[u32],
        latents: &Tensor,
        step: usize,
        sched: &SampleSchedule,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        let probs1 = self.probs(binder, latents)?;
        let nll1 = ops::nll_from_probs(&probs1, tokens)?;
        let rate = mix_rate(step, sched);
        if rate <= 0.0 {
            return Ok(nll1);
        }
        let (n, d) = latents.buf().dims2().expect("latents rank checked above");
        let pb = probs1.buf();
        let c = pb.dims2().expect("probs rank").1;

        let book = binder.store.get(&self.codebook_name)?;
        let view = CodebookView::new(self.cfg.code_dim, &book.values);
        let out_w = binder.store.get("tok.proj_out").ok();
        // Replacement rows are dequantized sampled tokens mapped back to the
        // latent width; they enter round 2 as constants.
        let mut replaced = vec![false; n];
        let mut replacement = vec![0.0; n * d];
        for i in 0..n {
            if rng.uniform() >= rate {
                continue;
            }
            let row = &pb.values[i * c..(i + 1) * c];
            let sampled = rng.multinomial(row);
            replaced[i] = true;
            let code = view.row(sampled);
            let dest = &mut replacement[i * d..(i + 1) * d];
            match &out_w {
                Some(w) => {
                    // C_x @ proj_out, computed on values.
                    for (k, slot) in dest.iter_mut().enumerate() {
                        *slot = (0..self.cfg.code_dim).map(|q| code[q] * w.values[q * d + k]).sum();
                    }
                }
                None => {
                    debug_assert_eq!(self.cfg.code_dim, d, "no up-projection available");
                    dest.copy_from_slice(code);
                }
            }
        }
        if !replaced.iter().any(|r| *r) {
            // No position flipped: round 2 would recompute round 1 exactly.
            let doubled = ops::add(&nll1, &nll1)?;
            return ops::scale(&doubled, 0.5);
        }
        let repl = binder.tape.constant(vec![n, d], replacement);
        let mixed = ops::row_mix(latents, &repl, &replaced)?;
        let probs2 = self.probs(binder, &mixed)?;
        let nll2 = ops::nll_from_probs(&probs2, tokens)?;
        ops::scale(&ops::add(&nll1, &nll2)?, 0.5)
    }

    /// Draw the next token after a prefix of `k` dequantized latents
    /// (`k x d`, possibly zero rows).
    pub fn sample_next(&self, binder: &Binder, prefix: &Tensor, rng: &mut Rng) -> Result<u32> {
        let (k, _) = prefix
            .buf()
            .dims2()
            .ok_or_else(|| Error::shape("prior", format!("prefix must be rank 2, got {:?}", prefix.shape())))?;
        let bos = binder.p("prior.bos")?;
        let inputs = if k == 0 {
            bos
        } else {
            let projected = ops::linear(
                prefix,
                &binder.p("prior.in_proj.w")?,
                Some(&binder.p("prior.in_proj.b")?),
            )?;
            ops::concat_rows(&[&bos, &projected])?
        };
        let hidden = blocks::block_stack_forward(
            binder,
            PREFIX,
            &inputs,
            self.cfg.dim,
            self.cfg.heads,
            self.cfg.depth,
            true,
            None,
        )?;
        let predicted = ops::linear(
            &hidden,
            &binder.p("prior.out_proj.w")?,
            Some(&binder.p("prior.out_proj.b")?),
        )?;
        let probs = self.head_probs(binder, &predicted)?;
        let pb = probs.buf();
        let c = pb.dims2().expect("probs rank").1;
        let last = &pb.values[k * c..(k + 1) * c];
        Ok(rng.multinomial(last) as u32)
    }
}
