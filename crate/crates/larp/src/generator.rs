//! Downstream autoregressive generator over holistic tokens.
//!
//! The vocabulary is the codebook plus one token per class, a null-class
//! token for the unconditional branch, and a separator. Class-conditional
//! sampling applies classifier-free guidance on the logits; frame
//! prediction conditions in-context on the tokens of a repeat-padded clip.

use std::sync::Arc;

use crate::blocks::{self, DropoutCfg, StackMode};
use crate::ckpt;
use crate::config::{GenMode, RunConfig};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::quant::QuantMode;
use crate::rng::Rng;
use crate::tensor::{ops, Buf, Tape, Tensor};
use crate::tokenizer::Tokenizer;
use crate::train::{adam_update, warmup_cosine, StepMetrics};
use crate::video::{repeat_pad, LabeledClip, PadMode, VideoTensor};

pub const PREFIX: &str = "gen.";

#[derive(Clone, Copy, Debug)]
pub struct GeneratorConfig {
    /// Codebook entries (the only tokens the head can emit).
    pub codebook_size: usize,
    pub classes: usize,
    /// Holistic tokens per sequence n.
    pub tokens: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mode: GenMode,
    pub class_drop_prob: f64,
    pub token_dropout: f64,
    pub resid_dropout: f64,
    pub ff_dropout: f64,
}

impl GeneratorConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        GeneratorConfig {
            codebook_size: cfg.codebook_size,
            classes: cfg.classes,
            tokens: cfg.tokens,
            dim: cfg.gen_dim,
            depth: cfg.gen_depth,
            heads: cfg.gen_heads,
            mode: cfg.gen_mode,
            class_drop_prob: cfg.class_drop_prob,
            token_dropout: cfg.token_dropout,
            resid_dropout: cfg.resid_dropout,
            ff_dropout: cfg.ff_dropout,
        }
    }

    pub fn vocab(&self) -> usize {
        self.codebook_size + self.classes + 2
    }

    pub fn class_token(&self, class_id: usize) -> u32 {
        debug_assert!(class_id < self.classes);
        (self.codebook_size + class_id) as u32
    }

    pub fn null_token(&self) -> u32 {
        (self.codebook_size + self.classes) as u32
    }

    pub fn sep_token(&self) -> u32 {
        (self.codebook_size + self.classes + 1) as u32
    }

    fn max_len(&self) -> usize {
        2 * self.tokens + 1
    }
}

pub struct Generator {
    pub cfg: GeneratorConfig,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Self {
        Generator { cfg }
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        store.add_normal(rng, "gen.embed", vec![self.cfg.vocab(), self.cfg.dim], blocks::INIT_STD);
        store.add_normal(rng, "gen.pos", vec![self.cfg.max_len(), self.cfg.dim], blocks::INIT_STD);
        blocks::init_block_stack(store, rng, PREFIX, self.cfg.dim, self.cfg.depth);
        store.add_normal(rng, "gen.head.w", vec![self.cfg.dim, self.cfg.codebook_size], blocks::INIT_STD);
        store.add_const("gen.head.b", vec![self.cfg.codebook_size], 0.0);
    }

    /// Causal forward over context token ids; returns per-position logits
    /// over the codebook.
    fn logits(&self, binder: &Binder, ctx: &[u32], train: bool, rng: &mut Rng) -> Result<Tensor> {
        if ctx.is_empty() || ctx.len() > self.cfg.max_len() {
            return Err(Error::shape(
                "generator",
                format!("context length {} outside 1..={}", ctx.len(), self.cfg.max_len()),
            ));
        }
        let embed = binder.p("gen.embed")?;
        let mut x = ops::gather_rows(&embed, ctx)?;
        if train && self.cfg.token_dropout > 0.0 {
            // Whole-row token dropout on the embeddings, inverted scaling.
            let keep = 1.0 - self.cfg.token_dropout;
            let mut mask = Vec::with_capacity(ctx.len() * self.cfg.dim);
            for _ in 0..ctx.len() {
                let v = if rng.uniform() < self.cfg.token_dropout { 0.0 } else { 1.0 / keep };
                mask.extend(std::iter::repeat(v).take(self.cfg.dim));
            }
            let m = binder.tape.constant(vec![ctx.len(), self.cfg.dim], mask);
            x = ops::mul(&x, &m)?;
        }
        let pos = ops::slice_rows(&binder.p("gen.pos")?, 0, ctx.len())?;
        let x = ops::add(&x, &pos)?;
        let hidden = if train {
            let mut mode = StackMode {
                dropout: DropoutCfg { resid: self.cfg.resid_dropout, ff: self.cfg.ff_dropout },
                rng,
            };
            blocks::block_stack_forward(
                binder,
                PREFIX,
                &x,
                self.cfg.dim,
                self.cfg.heads,
                self.cfg.depth,
                true,
                Some(&mut mode),
            )?
        } else {
            blocks::block_stack_forward(
                binder,
                PREFIX,
                &x,
                self.cfg.dim,
                self.cfg.heads,
                self.cfg.depth,
                true,
                None,
            )?
        };
        ops::linear(&hidden, &binder.p("gen.head.w")?, Some(&binder.p("gen.head.b")?))
    }

    /// Training/eval NLL for one sequence.
    ///
    /// Class mode: context `[cls | null, x1..x(n-1)]` predicting `x1..xn`;
    /// the class token drops to null with `class_drop_prob` when training.
    /// Frames mode: context `[cond.., sep, x1..x(n-1)]`, loss over the `n`
    /// target predictions only (conditioning positions carry no loss).
    pub fn nll(
        &self,
        binder: &Binder,
        seq: &[u32],
        class_id: Option<usize>,
        cond: Option<&[u32]>,
        train: bool,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        let n = self.cfg.tokens;
        if seq.len() != n {
            return Err(Error::shape("gen_loss", format!("{} tokens vs configured {n}", seq.len())));
        }
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.cfg.codebook_size) {
            return Err(Error::Data(format!("gen_loss: token {bad} outside the codebook", bad = bad)));
        }
        let mut ctx: Vec<u32> = Vec::new();
        let first_target_row;
        match self.cfg.mode {
            GenMode::Class => {
                let dropped = train && rng.uniform() < self.cfg.class_drop_prob;
                let lead = match (dropped, class_id) {
                    (true, _) | (false, None) => self.cfg.null_token(),
                    (false, Some(j)) => self.cfg.class_token(j),
                };
                ctx.push(lead);
                first_target_row = 0;
            }
            GenMode::Frames => {
                let cond = cond.ok_or_else(|| {
                    Error::Data("gen_loss: frames mode needs conditioning tokens".into())
                })?;
                if cond.len() != n {
                    return Err(Error::shape(
                        "gen_loss",
                        format!("{} conditioning tokens vs configured {n}", cond.len()),
                    ));
                }
                ctx.extend_from_slice(cond);
                ctx.push(self.cfg.sep_token());
                first_target_row = n;
            }
        }
        ctx.extend_from_slice(&seq[..n - 1]);
        let logits = self.logits(binder, &ctx, train, rng)?;
        let rows = ops::slice_rows(&logits, first_target_row, first_target_row + n)?;
        let probs = ops::softmax_rows(&rows, 1.0, false)?;
        ops::nll_from_probs(&probs, seq)
    }

    /// Logits for the next token given a context (eval mode, values only).
    fn next_logits(&self, store: &ParamStore, ctx: &[u32]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let binder = Binder::new(tape.clone(), store, false);
        let mut rng = Rng::new(0);
        let logits = self.logits(&binder, ctx, false, &mut rng)?;
        let lb = logits.buf();
        let c = self.cfg.codebook_size;
        Ok(lb.values[(ctx.len() - 1) * c..ctx.len() * c].to_vec())
    }

    /// Class-conditional sampling with classifier-free guidance. No top-k or
    /// top-p filtering; temperature 1.
    pub fn generate_class_conditional(
        &self,
        store: &ParamStore,
        class_id: usize,
        cfg_scale: f64,
        rng: &mut Rng,
    ) -> Result<Vec<u32>> {
        if class_id >= self.cfg.classes {
            return Err(Error::Data(format!(
                "class {class_id} out of range for {} classes",
                self.cfg.classes
            )));
        }
        let n = self.cfg.tokens;
        let mut seq: Vec<u32> = Vec::with_capacity(n);
        for _ in 0..n {
            let mut cond_ctx = vec![self.cfg.class_token(class_id)];
            cond_ctx.extend_from_slice(&seq);
            let cond = self.next_logits(store, &cond_ctx)?;
            let guided = if cfg_scale == 1.0 {
                cond
            } else {
                let mut null_ctx = vec![self.cfg.null_token()];
                null_ctx.extend_from_slice(&seq);
                let uncond = self.next_logits(store, &null_ctx)?;
                guided_logits(&cond, &uncond, cfg_scale)
            };
            seq.push(rng.multinomial(&softmax_values(&guided)) as u32);
        }
        Ok(seq)
    }

    /// Autoregressive continuation after `[cond.., sep]` (no guidance).
    pub fn generate_conditioned(
        &self,
        store: &ParamStore,
        cond: &[u32],
        rng: &mut Rng,
    ) -> Result<Vec<u32>> {
        let n = self.cfg.tokens;
        if cond.len() != n {
            return Err(Error::shape(
                "predict",
                format!("{} conditioning tokens vs configured {n}", cond.len()),
            ));
        }
        let mut ctx: Vec<u32> = cond.to_vec();
        ctx.push(self.cfg.sep_token());
        debug_assert_eq!(ctx.len(), n + 1);
        let mut seq = Vec::with_capacity(n);
        for _ in 0..n {
            let logits = self.next_logits(store, &ctx)?;
            let t = rng.multinomial(&softmax_values(&logits)) as u32;
            seq.push(t);
            ctx.push(t);
        }
        Ok(seq)
    }
}

/// `uncond + scale * (cond - uncond)`; `scale == 1` returns the conditional
/// logits bit-for-bit.
pub fn guided_logits(cond: &[f64], uncond: &[f64], scale: f64) -> Vec<f64> {
    debug_assert_eq!(cond.len(), uncond.len());
    if scale == 1.0 {
        return cond.to_vec();
    }
    cond.iter().zip(uncond).map(|(c, u)| u + scale * (c - u)).collect()
}

/// Stable softmax on plain values (temperature 1).
pub fn softmax_values(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let denom: f64 = out.iter().sum();
    for v in &mut out {
        *v /= denom;
    }
    out
}

// ── corpus tokenization ──────────────────────────────────────────────

/// Deterministically tokenize every clip with the trained tokenizer.
pub fn tokenize_corpus(
    tokenizer: &Tokenizer,
    store: &ParamStore,
    clips: &[LabeledClip],
) -> Result<Vec<(Vec<u32>, usize)>> {
    let mut out = Vec::with_capacity(clips.len());
    for clip in clips {
        let tape = Tape::new();
        let binder = Binder::new(tape.clone(), store, false);
        let mut rng = Rng::new(0);
        let enc = tokenizer.encode(&binder, &clip.video, QuantMode::Deterministic, &mut rng)?;
        out.push((enc.tokens, clip.class_id));
    }
    Ok(out)
}

/// One generator training example.
#[derive(Clone, Debug)]
pub enum GenExample {
    Class { seq: Vec<u32>, class_id: usize },
    Frames { seq: Vec<u32>, cond: Vec<u32> },
}

/// Generator training state (separate store and optimizer from the
/// tokenizer run).
pub struct GenTrainState {
    pub cfg: RunConfig,
    pub gen: Generator,
    pub store: ParamStore,
    pub step: usize,
    pub data_rng: Rng,
    pub model_rng: Rng,
    adam_m: Vec<Vec<f64>>,
    adam_v: Vec<Vec<f64>>,
    adam_t: u64,
    pub history: Vec<StepMetrics>,
}

impl GenTrainState {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let gen = Generator::new(GeneratorConfig::from_run(&cfg));
        let mut store = ParamStore::new();
        let mut init_rng = Rng::new(cfg.seed ^ 0x6E6E);
        gen.init_params(&mut store, &mut init_rng);
        let mut seed_rng = Rng::new(cfg.seed ^ 0x6E6E_0F_DA7A);
        let data_rng = seed_rng.split();
        let model_rng = seed_rng.split();
        let adam_m = store.iter().map(|p| vec![0.0; p.values.len()]).collect();
        let adam_v = store.iter().map(|p| vec![0.0; p.values.len()]).collect();
        Ok(GenTrainState {
            cfg,
            gen,
            store,
            step: 0,
            data_rng,
            model_rng,
            adam_m,
            adam_v,
            adam_t: 0,
            history: Vec::new(),
        })
    }

    pub fn lr(&self, step: usize) -> f64 {
        warmup_cosine(self.cfg.gen_base_lr, self.cfg.gen_warmup_steps, self.cfg.gen_total_steps, step)
    }

    fn example_nll(
        gen: &Generator,
        binder: &Binder,
        ex: &GenExample,
        train: bool,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        match ex {
            GenExample::Class { seq, class_id } => {
                gen.nll(binder, seq, Some(*class_id), None, train, rng)
            }
            GenExample::Frames { seq, cond } => gen.nll(binder, seq, None, Some(cond), train, rng),
        }
    }

    pub fn train_step(&mut self, corpus: &[GenExample]) -> Result<StepMetrics> {
        if corpus.is_empty() {
            return Err(Error::Data("train_step: empty corpus".into()));
        }
        let batch = self.cfg.gen_batch_size;
        let mut grads: Vec<Vec<f64>> =
            self.store.iter().map(|p| vec![0.0; p.values.len()]).collect();
        let mut nll_sum = 0.0;
        for _ in 0..batch {
            let ex = &corpus[self.data_rng.below(corpus.len())];
            let tape = Tape::new();
            let binder = Binder::new(tape.clone(), &self.store, true);
            let nll = Self::example_nll(&self.gen, &binder, ex, true, &mut self.model_rng)?;
            tape.backward(&nll)?;
            for (pidx, grad) in tape.param_grads() {
                for (a, g) in grads[pidx].iter_mut().zip(&grad) {
                    *a += g;
                }
            }
            nll_sum += nll.scalar();
        }
        let nll = nll_sum / batch as f64;
        if !nll.is_finite() {
            return Err(Error::Numeric(format!("step {}: non-finite generator NLL", self.step)));
        }
        for g in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *g /= batch as f64;
        }
        let norm = grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>().sqrt();
        if norm > 1.0 {
            let scale = 1.0 / norm;
            for g in grads.iter_mut().flat_map(|g| g.iter_mut()) {
                *g *= scale;
            }
        }
        let lr = self.lr(self.step);
        self.adam_t += 1;
        let (beta1, beta2, t) = (self.cfg.beta1, self.cfg.beta2, self.adam_t);
        for pidx in 0..self.store.len() {
            let m = &mut self.adam_m[pidx];
            let v = &mut self.adam_v[pidx];
            let values = self.store.values_mut(pidx);
            for (e, g) in grads[pidx].iter().enumerate() {
                adam_update(&mut values[e], &mut m[e], &mut v[e], *g, lr, beta1, beta2, t);
            }
        }
        let metrics = StepMetrics { step: self.step, lr, loss: nll, l1: 0.0, svq: 0.0, prior_nll: nll };
        self.step += 1;
        self.history.push(metrics);
        Ok(metrics)
    }

    /// Mean eval-mode NLL over a held-out corpus (no dropout, no class
    /// dropping; rng untouched).
    pub fn eval_nll(&self, corpus: &[GenExample]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::Data("eval_nll: empty corpus".into()));
        }
        let mut total = 0.0;
        for ex in corpus {
            let tape = Tape::new();
            let binder = Binder::new(tape.clone(), &self.store, false);
            let mut rng = Rng::new(0);
            total += Self::example_nll(&self.gen, &binder, ex, false, &mut rng)?.scalar();
        }
        Ok(total / corpus.len() as f64)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: Vec<(String, Buf)> = Vec::new();
        let meta = vec![
            crate::train::META_VERSION,
            self.cfg.tokens as f64,
            self.cfg.codebook_size as f64,
            self.cfg.gen_dim as f64,
            self.cfg.classes as f64,
            match self.cfg.gen_mode {
                GenMode::Class => 0.0,
                GenMode::Frames => 1.0,
            },
        ];
        entries.push(("__meta".into(), Buf::new(vec![meta.len()], meta)));
        let cfg_vals = ckpt::text_to_values(&self.cfg.to_text());
        entries.push(("__config".into(), Buf::new(vec![cfg_vals.len()], cfg_vals)));
        entries.push(("__step".into(), Buf::new(vec![1], vec![self.step as f64])));
        entries.push(("__adam_t".into(), Buf::new(vec![1], vec![self.adam_t as f64])));
        for (name, rng) in [("__rng_data", &self.data_rng), ("__rng_model", &self.model_rng)] {
            let (state, stream) = rng.state_words();
            let [a, b] = ckpt::u64_to_f64_pair(state);
            let [c, d] = ckpt::u64_to_f64_pair(stream);
            entries.push((name.into(), Buf::new(vec![4], vec![a, b, c, d])));
        }
        for (idx, p) in self.store.iter().enumerate() {
            entries.push((format!("p.{}", p.name), Buf { shape: p.shape.clone(), values: Arc::clone(&p.values) }));
            entries.push((format!("m.{}", p.name), Buf::new(p.shape.clone(), self.adam_m[idx].clone())));
            entries.push((format!("v.{}", p.name), Buf::new(p.shape.clone(), self.adam_v[idx].clone())));
        }
        let mut bytes = Vec::new();
        ckpt::write_ck01(&mut bytes, &entries)?;
        Ok(bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<GenTrainState> {
        let entries = ckpt::read_ck01(&mut std::io::Cursor::new(bytes))?;
        let mut map: std::collections::HashMap<String, Buf> = entries.into_iter().collect();
        let mut need = |name: &str| -> Result<Buf> {
            map.remove(name).ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {name}")))
        };
        let cfg_text = ckpt::values_to_text(&need("__config")?.values)?;
        let cfg = RunConfig::from_text(&cfg_text)?;
        let mut state = GenTrainState::new(cfg)?;
        let _ = need("__meta")?;
        state.step = need("__step")?.values[0] as usize;
        state.adam_t = need("__adam_t")?.values[0] as u64;
        let v = need("__rng_data")?;
        state.data_rng = Rng::from_state_words(
            ckpt::f64_pair_to_u64(v.values[0], v.values[1]),
            ckpt::f64_pair_to_u64(v.values[2], v.values[3]),
        );
        let v = need("__rng_model")?;
        state.model_rng = Rng::from_state_words(
            ckpt::f64_pair_to_u64(v.values[0], v.values[1]),
            ckpt::f64_pair_to_u64(v.values[2], v.values[3]),
        );
        for idx in 0..state.store.len() {
            let pname = state.store.by_idx(idx).name.clone();
            let shape = state.store.by_idx(idx).shape.clone();
            for prefix in ["p.", "m.", "v."] {
                let buf = need(&format!("{prefix}{pname}"))?;
                if buf.shape != shape {
                    return Err(Error::Data(format!(
                        "checkpoint tensor {prefix}{pname} has shape {:?}, expected {:?}",
                        buf.shape, shape
                    )));
                }
                let values = buf.values.as_ref().clone();
                match prefix {
                    "p." => *state.store.values_mut(idx) = values,
                    "m." => state.adam_m[idx] = values,
                    _ => state.adam_v[idx] = values,
                }
            }
        }
        Ok(state)
    }
}

/// Frame prediction: repeat-pad the conditioning clip, tokenize it
/// deterministically, continue after `[cond.., sep]`, then decode.
pub fn predict_frames(
    tokenizer: &Tokenizer,
    tok_store: &ParamStore,
    gen: &Generator,
    gen_store: &ParamStore,
    cond_clip: &VideoTensor,
    rng: &mut Rng,
) -> Result<(VideoTensor, Vec<u32>, Vec<u32>)> {
    let target_frames = tokenizer.cfg.layout.frames;
    if cond_clip.frames >= target_frames {
        return Err(Error::Data(format!(
            "conditioning clip has {} frames, need fewer than {target_frames}",
            cond_clip.frames
        )));
    }
    let padded = repeat_pad(cond_clip, target_frames, PadMode::LastFrame)?;
    let tape = Tape::new();
    let binder = Binder::new(tape.clone(), tok_store, false);
    let mut enc_rng = Rng::new(0);
    let cond_tokens =
        tokenizer.encode(&binder, &padded, QuantMode::Deterministic, &mut enc_rng)?.tokens;
    let sampled = gen.generate_conditioned(gen_store, &cond_tokens, rng)?;
    let tape = Tape::new();
    let binder = Binder::new(tape.clone(), tok_store, false);
    let video = tokenizer.decode_tokens(&binder, &sampled)?;
    Ok((video, cond_tokens, sampled))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_gen(mode: GenMode) -> (Generator, ParamStore) {
        let cfg = GeneratorConfig {
            codebook_size: 8,
            classes: 3,
            tokens: 4,
            dim: 16,
            depth: 1,
            heads: 2,
            mode,
            class_drop_prob: 0.1,
            token_dropout: 0.1,
            resid_dropout: 0.1,
            ff_dropout: 0.1,
        };
        let gen = Generator::new(cfg);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        gen.init_params(&mut store, &mut rng);
        (gen, store)
    }

    #[test]
    fn vocabulary_layout() {
        let (gen, _) = tiny_gen(GenMode::Class);
        assert_eq!(gen.cfg.vocab(), 8 + 3 + 2);
        assert_eq!(gen.cfg.class_token(0), 8);
        assert_eq!(gen.cfg.class_token(2), 10);
        assert_eq!(gen.cfg.null_token(), 11);
        assert_eq!(gen.cfg.sep_token(), 12);
    }

    #[test]
    fn zero_head_gives_ln_c() {
        let (gen, mut store) = tiny_gen(GenMode::Class);
        let widx = store.idx("gen.head.w").unwrap();
        store.values_mut(widx).iter_mut().for_each(|v| *v = 0.0);
        let tape = Tape::new();
        let binder = Binder::new(tape.clone(), &store, false);
        let mut rng = Rng::new(1);
        let nll = gen.nll(&binder, &[0, 3, 5, 7], Some(1), None, false, &mut rng).unwrap();
        assert!((nll.scalar() - (8f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_set_logits_match_hand_computed_cross_entropy() {
        // Zero head weights + a fixed bias make every row's logits the bias.
        let (gen, mut store) = tiny_gen(GenMode::Class);
        let widx = store.idx("gen.head.w").unwrap();
        store.values_mut(widx).iter_mut().for_each(|v| *v = 0.0);
        let bidx = store.idx("gen.head.b").unwrap();
        let bias = store.values_mut(bidx);
        bias.iter_mut().for_each(|v| *v = f64::NEG_INFINITY.max(-30.0));
        bias[0] = (3f64).ln();
        bias[1] = 0.0;
        let tape = Tape::new();
        let binder = Binder::new(tape.clone(), &store, false);
        let mut rng = Rng::new(1);
        let nll = gen.nll(&binder, &[0, 1, 0, 0], Some(0), None, false, &mut rng).unwrap();
        // probs ~ softmax([ln 3, 0, -30 x6]): p0 ~ 3/4, p1 ~ 1/4.
        let z = 3.0 + 1.0 + 6.0 * (-30f64 - (3f64).ln()).exp() * 3.0; // tiny tail
        let p0 = 3.0 / z;
        let p1 = 1.0 / z;
        let expect = -(3.0 * p0.ln() + p1.ln()) / 4.0;
        assert!((nll.scalar() - expect).abs() < 1e-10, "{} vs {expect}", nll.scalar());
    }

    #[test]
    fn class_drop_one_equals_explicit_null() {
        let (gen, store) = tiny_gen(GenMode::Class);
        let seq = [1u32, 2, 3, 4];
        let run = |drop_all: bool, class: Option<usize>| {
            let mut cfg = gen.cfg;
            cfg.class_drop_prob = if drop_all { 1.0 } else { 0.0 };
            let g = Generator::new(cfg);
            let tape = Tape::new();
            let binder = Binder::new(tape.clone(), &store, false);
            let mut rng = Rng::new(7);
            // train=true but zero dropouts elsewhere so only the class path
            // is stochastic.
            let mut cfg2 = g.cfg;
            cfg2.token_dropout = 0.0;
            cfg2.resid_dropout = 0.0;
            cfg2.ff_dropout = 0.0;
            let g2 = Generator::new(cfg2);
            g2.nll(&binder, &seq, class, None, true, &mut rng).unwrap().scalar()
        };
        let dropped = run(true, Some(1));
        let explicit_null = run(false, None);
        assert_eq!(dropped.to_bits(), explicit_null.to_bits());
        let kept = run(false, Some(1));
        assert_ne!(kept.to_bits(), explicit_null.to_bits());
    }

    #[test]
    fn guidance_arithmetic() {
        let cond = vec![1.0, 0.0];
        let uncond = vec![0.0, 0.0];
        assert_eq!(guided_logits(&cond, &uncond, 1.25), vec![1.25, 0.0]);
        // Scale 1 is the conditional branch bit-for-bit.
        let c2 = vec![0.3141592653589793, -2.5];
        assert_eq!(guided_logits(&c2, &uncond, 1.0), c2);
        // Equal branches are a fixed point at any scale.
        let same = vec![0.7, -0.1, 9.0];
        assert_eq!(guided_logits(&same, &same, 3.5), same);
        // Formula check against direct evaluation.
        let mut rng = Rng::new(9);
        let a: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let g = guided_logits(&a, &b, 1.25);
        for i in 0..16 {
            assert!((g[i] - (b[i] + 1.25 * (a[i] - b[i]))).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_causal_in_context() {
        let (gen, store) = tiny_gen(GenMode::Class);
        let ctx: Vec<u32> = vec![gen.cfg.class_token(0), 1, 2, 3];
        let c = gen.cfg.codebook_size;
        let tape = Tape::new();
        let binder = Binder::new(tape.clone(), &store, false);
        let mut rng = Rng::new(1);
        let full = gen.logits(&binder, &ctx, false, &mut rng).unwrap().values().to_vec();
        for k in 0..3 {
            let mut garbled = ctx.clone();
            for slot in &mut garbled[k + 1..] {
                *slot = 7;
            }
            let tape = Tape::new();
            let binder = Binder::new(tape.clone(), &store, false);
            let out = gen.logits(&binder, &garbled, false, &mut rng).unwrap().values().to_vec();
            assert_eq!(out[k * c..(k + 1) * c], full[k * c..(k + 1) * c], "row {k}");
        }
    }

    #[test]
    fn class_conditional_sampling_yields_codebook_tokens() {
        let (gen, store) = tiny_gen(GenMode::Class);
        let mut rng = Rng::new(11);
        let seq = gen.generate_class_conditional(&store, 2, 1.25, &mut rng).unwrap();
        assert_eq!(seq.len(), 4);
        assert!(seq.iter().all(|&t| (t as usize) < 8));
        assert!(gen.generate_class_conditional(&store, 9, 1.25, &mut rng).is_err());
    }

    #[test]
    fn conditioned_generation_prefix_shape() {
        let (gen, store) = tiny_gen(GenMode::Frames);
        let mut rng = Rng::new(13);
        let cond = [0u32, 1, 2, 3];
        let seq = gen.generate_conditioned(&store, &cond, &mut rng).unwrap();
        assert_eq!(seq.len(), 4);
        assert!(gen.generate_conditioned(&store, &[0, 1], &mut rng).is_err());
    }

    fn gen_run_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.frames = 2;
        cfg.height = 8;
        cfg.width = 8;
        cfg.embed_dim = 16;
        cfg.heads = 2;
        cfg.enc_depth = 1;
        cfg.dec_depth = 1;
        cfg.tokens = 4;
        cfg.code_dim = 4;
        cfg.codebook_size = 8;
        cfg.prior_dim = 16;
        cfg.prior_depth = 1;
        cfg.prior_heads = 2;
        cfg.gen_dim = 16;
        cfg.gen_depth = 1;
        cfg.gen_heads = 2;
        cfg.gen_total_steps = 20;
        cfg.gen_warmup_steps = 2;
        cfg.gen_batch_size = 2;
        cfg.classes = 3;
        cfg
    }

    #[test]
    fn generator_training_and_checkpoint_roundtrip() {
        let cfg = gen_run_cfg();
        let mut state = GenTrainState::new(cfg).unwrap();
        let corpus: Vec<GenExample> = (0..6)
            .map(|i| GenExample::Class { seq: vec![i % 8, (i + 3) % 8, 1, 0], class_id: (i % 3) as usize })
            .collect();
        for _ in 0..3 {
            let m = state.train_step(&corpus).unwrap();
            assert!(m.loss.is_finite());
        }
        let eval = state.eval_nll(&corpus).unwrap();
        assert!(eval.is_finite());
        let bytes = state.checkpoint_bytes().unwrap();
        let reloaded = GenTrainState::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(reloaded.checkpoint_bytes().unwrap(), bytes);
    }

    #[test]
    fn frames_mode_trains_on_separated_layout() {
        let mut cfg = gen_run_cfg();
        cfg.gen_mode = GenMode::Frames;
        let mut state = GenTrainState::new(cfg).unwrap();
        let corpus: Vec<GenExample> = (0..4)
            .map(|i| GenExample::Frames {
                seq: vec![i % 8, (i + 1) % 8, (i + 2) % 8, (i + 3) % 8],
                cond: vec![(i + 4) % 8, 0, 1, 2],
            })
            .collect();
        let m = state.train_step(&corpus).unwrap();
        assert!(m.loss.is_finite());
        // Missing conditioning rejected.
        let tape = Tape::new();
        let binder = Binder::new(tape.clone(), &state.store, false);
        let mut rng = Rng::new(1);
        assert!(state.gen.nll(&binder, &[0, 1, 2, 3], None, None, false, &mut rng).is_err());
    }
}
