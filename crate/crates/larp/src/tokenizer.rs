//! Holistic tokenizer: learned queries concatenated with patch embeddings,
//! a transformer encoder over the joint sequence, quantization of the query
//! slice, and query-driven decoding back to pixels.

use std::io::{Read, Write};
use std::path::Path;

use crate::blocks;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::quant::{self, QuantMode, QuantizerConfig, SvqParamNames, SvqTensors};
use crate::rng::Rng;
use crate::tensor::{ops, Tensor};
use crate::video::{self, PatchLayout, VideoTensor};

pub const PREFIX: &str = "tok.";

#[derive(Clone, Debug)]
pub struct TokenizerConfig {
    pub layout: PatchLayout,
    pub embed_dim: usize,
    pub heads: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    /// Holistic token count n.
    pub tokens: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub quant: QuantizerConfig,
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 {
            return Err(Error::Config("token count must be >= 1".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook needs at least 2 codes".into()));
        }
        Ok(())
    }
}

/// Tokenizer model: owns the fixed positional tables; learnable state lives
/// in a [`ParamStore`] under the `tok.` prefix.
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    patch_pos: Vec<f64>,
    holistic_pos: Vec<f64>,
    svq_names: SvqParamNames,
}

/// Graph handles produced by one encode pass.
pub struct EncodeOut {
    pub tokens: Vec<u32>,
    /// `n x d` gradient-carrying dequantized latents.
    pub dequant: Tensor,
    pub svq_loss: Tensor,
    pub svq: SvqTensors,
    /// `m x p` raw patch values of the input (shared with the loss target).
    pub patches: Tensor,
}

/// Graph handles plus materialized outputs from one reconstruction pass.
pub struct ReconOut {
    pub encode: EncodeOut,
    /// `m x p` clamped pixel predictions.
    pub pixels: Tensor,
    pub l1: Tensor,
    pub video: VideoTensor,
}

impl Tokenizer {
    pub fn new(cfg: TokenizerConfig) -> Result<Self> {
        cfg.validate()?;
        let l = &cfg.layout;
        let patch_pos = blocks::sincos_3d(
            l.frames / l.f_t,
            l.height / l.f_h,
            l.width / l.f_w,
            cfg.embed_dim,
        );
        let holistic_pos = blocks::sincos_1d(cfg.tokens, cfg.embed_dim);
        let svq_names = SvqParamNames::with_prefix(PREFIX);
        Ok(Tokenizer { cfg, patch_pos, holistic_pos, svq_names })
    }

    /// Register all tokenizer parameters.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        let d = self.cfg.embed_dim;
        let (m, p) = (self.cfg.layout.patch_count(), self.cfg.layout.patch_dim());
        store.add_normal(rng, "tok.patch_proj.w", vec![p, d], blocks::INIT_STD);
        store.add_const("tok.patch_proj.b", vec![d], 0.0);
        // Unit-scale queries: each slot must start distinct, otherwise every
        // position quantizes to the same code and the codebook collapses.
        store.add_normal(rng, "tok.queries_holistic", vec![self.cfg.tokens, d], 1.0);
        store.add_normal(rng, "tok.queries_patch", vec![m, d], 1.0);
        blocks::init_block_stack(store, rng, "tok.enc.", d, self.cfg.enc_depth);
        quant::init_svq_params(
            store,
            rng,
            &self.svq_names,
            d,
            self.cfg.code_dim,
            self.cfg.codebook_size,
        );
        blocks::init_block_stack(store, rng, "tok.dec.", d, self.cfg.dec_depth);
        store.add_normal(rng, "tok.pixel_proj.w", vec![d, p], blocks::INIT_STD);
        // Biased to mid-gray so the output clamp starts inactive.
        store.add_const("tok.pixel_proj.b", vec![p], 0.5);
    }

    fn check_extents(&self, v: &VideoTensor) -> Result<()> {
        if !self.cfg.layout.matches(v) {
            return Err(Error::shape(
                "encode",
                format!(
                    "video {:?} vs configured {}x{}x{}",
                    v.shape(),
                    self.cfg.layout.frames,
                    self.cfg.layout.height,
                    self.cfg.layout.width
                ),
            ));
        }
        Ok(())
    }

    /// Encode from an existing video node (gradient-carrying when the node
    /// requires it).
    pub fn encode_node(
        &self,
        binder: &Binder,
        video_node: &Tensor,
        mode: QuantMode,
        rng: &mut Rng,
    ) -> Result<EncodeOut> {
        let patches = video::patch_extract_op(video_node, &self.cfg.layout)?;
        let embedded = ops::linear(
            &patches,
            &binder.p("tok.patch_proj.w")?,
            Some(&binder.p("tok.patch_proj.b")?),
        )?;
        let m = self.cfg.layout.patch_count();
        let pos = binder.tape.constant(vec![m, self.cfg.embed_dim], self.patch_pos.clone());
        let embedded = ops::add(&embedded, &pos)?;
        let queries = binder.p("tok.queries_holistic")?;
        let joint = ops::concat_rows(&[&queries, &embedded])?;
        let encoded = blocks::block_stack_forward(
            binder,
            "tok.enc.",
            &joint,
            self.cfg.embed_dim,
            self.cfg.heads,
            self.cfg.enc_depth,
            false,
            None,
        )?;
        // Only the query slice reaches the quantizer; patch rows are dropped.
        let query_slice = ops::slice_rows(&encoded, 0, self.cfg.tokens)?;
        debug_assert_eq!(encoded.shape()[0], self.cfg.tokens + m);
        let svq = quant::svq_forward(binder, &query_slice, &self.svq_names, &self.cfg.quant, mode, rng)?;
        self.assert_own_params(binder);
        Ok(EncodeOut {
            tokens: svq.tokens.clone(),
            dequant: svq.dequant.clone(),
            svq_loss: svq.loss.clone(),
            svq,
            patches,
        })
    }

    pub fn encode(
        &self,
        binder: &Binder,
        video: &VideoTensor,
        mode: QuantMode,
        rng: &mut Rng,
    ) -> Result<EncodeOut> {
        self.check_extents(video)?;
        let node = binder.tape.constant(video.shape(), video.values.clone());
        self.encode_node(binder, &node, mode, rng)
    }

    /// Decode latent rows (`n x d`) to clamped pixel patches (`m x p`).
    pub fn decode_latents(&self, binder: &Binder, latents: &Tensor) -> Result<Tensor> {
        let lb = latents.buf();
        if lb.shape != [self.cfg.tokens, self.cfg.embed_dim] {
            return Err(Error::shape(
                "decode",
                format!("latents {:?} vs [{}, {}]", lb.shape, self.cfg.tokens, self.cfg.embed_dim),
            ));
        }
        let pos = binder.tape.constant(vec![self.cfg.tokens, self.cfg.embed_dim], self.holistic_pos.clone());
        let latents = ops::add(latents, &pos)?;
        let queries = binder.p("tok.queries_patch")?;
        let joint = ops::concat_rows(&[&queries, &latents])?;
        let decoded = blocks::block_stack_forward(
            binder,
            "tok.dec.",
            &joint,
            self.cfg.embed_dim,
            self.cfg.heads,
            self.cfg.dec_depth,
            false,
            None,
        )?;
        let m = self.cfg.layout.patch_count();
        let patch_rows = ops::slice_rows(&decoded, 0, m)?;
        let pixels = ops::linear(
            &patch_rows,
            &binder.p("tok.pixel_proj.w")?,
            Some(&binder.p("tok.pixel_proj.b")?),
        )?;
        ops::clamp01(&pixels)
    }

    /// Decode a token sequence to a video (pure function of tokens and
    /// parameters).
    pub fn decode_tokens(&self, binder: &Binder, tokens: &[u32]) -> Result<VideoTensor> {
        if tokens.len() != self.cfg.tokens {
            return Err(Error::shape(
                "decode",
                format!("{} tokens vs configured {}", tokens.len(), self.cfg.tokens),
            ));
        }
        let book = binder.store.get(&self.svq_names.codebook)?;
        let view = quant::CodebookView::new(self.cfg.code_dim, &book.values);
        let mut rows = Vec::with_capacity(tokens.len() * self.cfg.code_dim);
        for &t in tokens {
            rows.extend_from_slice(quant::dequantize(t as usize, &view)?);
        }
        let codes = binder.tape.constant(vec![self.cfg.tokens, self.cfg.code_dim], rows);
        let latents = ops::matmul(&codes, &binder.p(&self.svq_names.proj_out)?)?;
        let pixels = self.decode_latents(binder, &latents)?;
        self.assert_own_params(binder);
        video::unpatchify_values(&pixels.values(), &self.cfg.layout)
    }

    /// Encode then decode, with the L1 loss measured in patch space (equal
    /// to the mean per-pixel L1 because unpatchify is a permutation).
    pub fn reconstruct_node(
        &self,
        binder: &Binder,
        video_node: &Tensor,
        mode: QuantMode,
        rng: &mut Rng,
    ) -> Result<ReconOut> {
        let encode = self.encode_node(binder, video_node, mode, rng)?;
        let pixels = self.decode_latents(binder, &encode.dequant)?;
        let l1 = ops::mean_abs_diff(&pixels, &encode.patches)?;
        let video = video::unpatchify_values(&pixels.values(), &self.cfg.layout)?;
        Ok(ReconOut { encode, pixels, l1, video })
    }

    pub fn reconstruct(
        &self,
        binder: &Binder,
        video: &VideoTensor,
        mode: QuantMode,
        rng: &mut Rng,
    ) -> Result<ReconOut> {
        self.check_extents(video)?;
        let node = binder.tape.constant(video.shape(), video.values.clone());
        self.reconstruct_node(binder, &node, mode, rng)
    }

    /// The tokenizer must never touch prior or generator parameters.
    fn assert_own_params(&self, binder: &Binder) {
        debug_assert!(
            binder.bound_names().iter().all(|n| n.starts_with(PREFIX)),
            "tokenizer graph bound foreign parameters"
        );
    }
}

// ── token sequence file format ───────────────────────────────────────

pub const TS01_MAGIC: &[u8; 4] = b"TS01";

/// Write a "TS01" record: magic, u32 n, u32 codebook size, n u32 tokens.
pub fn write_ts01<W: Write>(w: &mut W, tokens: &[u32], codebook_size: u32) -> Result<()> {
    w.write_all(TS01_MAGIC)?;
    w.write_all(&(tokens.len() as u32).to_le_bytes())?;
    w.write_all(&codebook_size.to_le_bytes())?;
    for &t in tokens {
        w.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

/// Read a "TS01" record, returning `(tokens, codebook_size)`.
pub fn read_ts01<R: Read>(r: &mut R) -> Result<(Vec<u32>, u32)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Data("ts01: truncated magic".into()))?;
    if &magic != TS01_MAGIC {
        return Err(Error::Data(format!("ts01: bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| Error::Data("ts01: truncated length".into()))?;
    let n = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word).map_err(|_| Error::Data("ts01: truncated codebook size".into()))?;
    let c = u32::from_le_bytes(word);
    let mut tokens = Vec::with_capacity(n);
    for i in 0..n {
        r.read_exact(&mut word).map_err(|_| Error::Data(format!("ts01: truncated at token {i}")))?;
        let t = u32::from_le_bytes(word);
        if t >= c {
            return Err(Error::Data(format!("ts01: token {t} out of range for {c} codes")));
        }
        tokens.push(t);
    }
    Ok((tokens, c))
}

pub fn write_ts01_file(path: &Path, tokens: &[u32], codebook_size: u32) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ts01(&mut f, tokens, codebook_size)?;
    f.flush()?;
    Ok(())
}

pub fn read_ts01_file(path: &Path) -> Result<(Vec<u32>, u32)> {
    let mut f = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?,
    );
    read_ts01(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Buf, Tape};

    fn tiny_cfg(tokens: usize) -> TokenizerConfig {
        TokenizerConfig {
            layout: PatchLayout::new(2, 8, 8, 2, 4, 4).unwrap(),
            embed_dim: 16,
            heads: 2,
            enc_depth: 1,
            dec_depth: 1,
            tokens,
            code_dim: 4,
            codebook_size: 8,
            quant: QuantizerConfig::default(),
        }
    }

    fn setup(tokens: usize, seed: u64) -> (Tokenizer, ParamStore) {
        let tok = Tokenizer::new(tiny_cfg(tokens)).unwrap();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        tok.init_params(&mut store, &mut rng);
        (tok, store)
    }

    fn test_video(seed: u64) -> VideoTensor {
        let mut rng = Rng::new(seed);
        let values = (0..2 * 8 * 8 * 3).map(|_| rng.uniform()).collect();
        VideoTensor::new(2, 8, 8, values).unwrap()
    }

    #[test]
    fn token_count_follows_config_not_patches() {
        for n in [1usize, 4, 9] {
            let (tok, store) = setup(n, 7);
            let tape = Tape::new();
            let binder = Binder::new(tape.clone(), &store, false);
            let mut rng = Rng::new(1);
            let out = tok.encode(&binder, &test_video(3), QuantMode::Stochastic, &mut rng).unwrap();
            assert_eq!(out.tokens.len(), n);
            assert!(out.tokens.iter().all(|&t| t < 8));
            assert_eq!(out.dequant.shape(), vec![n, 16]);
        }
    }

    #[test]
    fn token_count_scales_past_patch_count() {
        // m = 4 patches here; n can exceed it.
        for n in [2usize, 4, 16] {
            let (tok, store) = setup(n, 11);
            let tape = Tape::new();
            let binder = Binder::new(tape.clone(), &store, false);
            let mut rng = Rng::new(2);
            let recon = tok.reconstruct(&binder, &test_video(5), QuantMode::Deterministic, &mut rng).unwrap();
            assert_eq!(recon.encode.tokens.len(), n);
            assert!(recon.l1.scalar().is_finite());
        }
    }

    #[test]
    fn deterministic_encode_is_pure() {
        let (tok, store) = setup(4, 13);
        let v = test_video(9);
        let run = || {
            let tape = Tape::new();
            let binder = Binder::new(tape.clone(), &store, false);
            let mut rng = Rng::new(99);
            let out = tok.encode(&binder, &v, QuantMode::Deterministic, &mut rng).unwrap();
            (out.tokens.clone(), out.dequant.values().to_vec())
        };
        let (t1, d1) = run();
        let (t2, d2) = run();
        assert_eq!(t1, t2);
        assert_eq!(d1, d2);
    }

    #[test]
    fn decode_is_pure_and_total() {
        let (tok, store) = setup(4, 17);
        let run = |tokens: &[u32]| {
            let tape = Tape::new();
            let binder = Binder::new(tape.clone(), &store, false);
            tok.decode_tokens(&binder, tokens).unwrap()
        };
        let a = run(&[1, 5, 2, 7]);
        let b = run(&[1, 5, 2, 7]);
        assert_eq!(a.values, b.values);
        assert_eq!(a.shape(), vec![2, 8, 8, 3]);
        // All-same-token input is valid and finite.
        let c = run(&[3, 3, 3, 3]);
        assert!(c.values.iter().all(|v| v.is_finite()));
        assert!(run2_err(&tok, &store));
    }

    fn run2_err(tok: &Tokenizer, store: &ParamStore) -> bool {
        let tape = Tape::new();
        let binder = Binder::new(tape.clone(), store, false);
        tok.decode_tokens(&binder, &[0, 1]).is_err()
    }

    #[test]
    fn distinct_token_sequences_decode_distinctly() {
        let (tok, store) = setup(4, 23);
        let mut rng = Rng::new(4);
        let mut hits = 0;
        for _ in 0..20 {
            let a: Vec<u32> = (0..4).map(|_| rng.below(8) as u32).collect();
            let b: Vec<u32> = (0..4).map(|_| rng.below(8) as u32).collect();
            if a == b {
                continue;
            }
            let tape = Tape::new();
            let binder = Binder::new(tape.clone(), &store, false);
            let va = tok.decode_tokens(&binder, &a).unwrap();
            let vb = tok.decode_tokens(&binder, &b).unwrap();
            let max_diff = va
                .values
                .iter()
                .zip(&vb.values)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            if max_diff > 0.0 {
                hits += 1;
            }
        }
        assert!(hits >= 15, "only {hits} distinct decodes");
    }

    #[test]
    fn untrained_reconstruction_l1_is_finite_positive() {
        let (tok, store) = setup(4, 29);
        let tape = Tape::new();
        let binder = Binder::new(tape.clone(), &store, false);
        let mut rng = Rng::new(5);
        let recon = tok.reconstruct(&binder, &test_video(11), QuantMode::Stochastic, &mut rng).unwrap();
        let l1 = recon.l1.scalar();
        assert!(l1.is_finite() && l1 > 0.0, "{l1}");
        // Patch-space L1 equals pixel-space L1.
        let v = test_video(11);
        let direct = v
            .values
            .iter()
            .zip(&recon.video.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / v.values.len() as f64;
        assert!((l1 - direct).abs() < 1e-12);
    }

    #[test]
    fn gradients_reach_queries_codebook_and_patch_projection() {
        let (tok, store) = setup(4, 31);
        let tape = Tape::new();
        let binder = Binder::new(tape.clone(), &store, true);
        let mut rng = Rng::new(6);
        let recon = tok.reconstruct(&binder, &test_video(13), QuantMode::Stochastic, &mut rng).unwrap();
        tape.backward(&recon.l1).unwrap();
        for name in ["tok.queries_holistic", "tok.codebook", "tok.patch_proj.w"] {
            let grad = binder.p(name).unwrap().grad().unwrap_or_default();
            let max = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
            assert!(max > 0.0, "{name} got no gradient");
        }
    }

    #[test]
    fn encode_rejects_wrong_extents() {
        let (tok, store) = setup(4, 37);
        let tape = Tape::new();
        let binder = Binder::new(tape.clone(), &store, false);
        let mut rng = Rng::new(7);
        let wrong = VideoTensor::zeros(2, 8, 4);
        assert!(tok.encode(&binder, &wrong, QuantMode::Stochastic, &mut rng).is_err());
    }

    #[test]
    fn full_reconstruction_loss_passes_finite_difference_check() {
        // Identity-surrogate quantization makes the loss smooth in the input.
        let (tok, store) = setup(2, 41);
        let v = test_video(15);
        let x0 = Buf::new(vec![2, 8, 8, 3], v.values.clone());
        let err = crate::tensor::gradcheck::grad_check(
            &move |tape: &Tape, x: &Tensor| {
                let binder = Binder::new(tape.clone(), &store, false);
                let mut rng = Rng::new(0);
                let recon = tok.reconstruct_node(&binder, x, QuantMode::Bypass, &mut rng)?;
                ops::add(&recon.l1, &recon.encode.svq_loss)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn ts01_roundtrip_and_validation() {
        let mut bytes = Vec::new();
        write_ts01(&mut bytes, &[0, 7, 3], 8).unwrap();
        let (tokens, c) = read_ts01(&mut bytes.as_slice()).unwrap();
        assert_eq!(tokens, vec![0, 7, 3]);
        assert_eq!(c, 8);
        // Token out of range rejected.
        let mut bad = Vec::new();
        write_ts01(&mut bad, &[9], 8).unwrap();
        assert!(read_ts01(&mut bad.as_slice()).is_err());
        assert!(read_ts01(&mut b"XS01".as_slice()).is_err());
    }
}
