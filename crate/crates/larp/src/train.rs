//! Joint tokenizer + prior training: combined loss, Adam with a separate
//! learning-rate group for the prior, warm-up cosine schedule, dead-code
//! re-seeding, and checkpointing.

use std::sync::Arc;

use crate::ckpt;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::prior::{Prior, SampleSchedule};
use crate::quant::{QuantMode, CODE_NORM_FLOOR};
use crate::rng::Rng;
use crate::tensor::{ops, Buf, Tape, Tensor};
use crate::tokenizer::Tokenizer;
use crate::video::{LabeledClip, VideoTensor};

const ADAM_EPS: f64 = 1e-8;
const GRAD_CLIP_NORM: f64 = 1.0;
const RESERVOIR_CAP: usize = 512;
pub const META_VERSION: f64 = 1.0;

/// Linear warm-up to `base`, then cosine decay to zero at `total`.
pub fn warmup_cosine(base: f64, warmup: usize, total: usize, step: usize) -> f64 {
    let s = step as f64;
    if warmup > 0 && step < warmup {
        return base * s / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let progress = ((s - warmup as f64) / (total - warmup) as f64).clamp(0.0, 1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Tokenizer-run learning rate at `step`.
pub fn lr_at(cfg: &RunConfig, step: usize) -> f64 {
    warmup_cosine(cfg.base_lr, cfg.warmup_steps, cfg.total_steps, step)
}

/// Per-step loss record.
#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub l1: f64,
    pub svq: f64,
    pub prior_nll: f64,
}

/// Combined objective `L = (L1 + L_svq) + alpha * L_prior` on plain values.
pub fn combine_loss(l1: f64, svq: f64, prior_nll: f64, alpha: f64) -> f64 {
    (l1 + svq) + alpha * prior_nll
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|p| vec![0.0; p.values.len()]).collect();
        let v = store.iter().map(|p| vec![0.0; p.values.len()]).collect();
        AdamState { m, v, t: 0 }
    }
}

/// One Adam update on a single slot. Exposed for the scalar reference test.
pub fn adam_update(
    value: &mut f64,
    m: &mut f64,
    v: &mut f64,
    grad: f64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    t: u64,
) {
    *m = beta1 * *m + (1.0 - beta1) * grad;
    *v = beta2 * *v + (1.0 - beta2) * grad * grad;
    let m_hat = *m / (1.0 - beta1.powi(t as i32));
    let v_hat = *v / (1.0 - beta2.powi(t as i32));
    *value -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
}

/// Graph handles for one clip's combined loss.
pub struct ClipGraph {
    pub total: Tensor,
    pub l1: Tensor,
    pub svq: Tensor,
    pub prior_nll: Option<Tensor>,
    pub tokens: Vec<u32>,
    /// Gradient-carrying dequantized latents fed to the prior.
    pub dequant: Tensor,
    pub pre_quant: Arc<Vec<f64>>,
}

/// Build the combined loss for one video node. With `alpha == 0` the prior
/// is skipped entirely (the no-prior ablation).
pub fn clip_loss(
    tokenizer: &Tokenizer,
    prior: &Prior,
    binder: &Binder,
    video_node: &Tensor,
    mode: QuantMode,
    step: usize,
    sched: &SampleSchedule,
    alpha: f64,
    rng: &mut Rng,
) -> Result<ClipGraph> {
    let recon = tokenizer.reconstruct_node(binder, video_node, mode, rng)?;
    let rec_loss = ops::add(&recon.l1, &recon.encode.svq_loss)?;
    let (total, prior_nll) = if alpha > 0.0 {
        let nll = prior.loss(binder, &recon.encode.tokens, &recon.encode.dequant, step, sched, rng)?;
        (ops::add(&rec_loss, &ops::scale(&nll, alpha)?)?, Some(nll))
    } else {
        (rec_loss, None)
    };
    Ok(ClipGraph {
        total,
        l1: recon.l1.clone(),
        svq: recon.encode.svq_loss.clone(),
        prior_nll,
        tokens: recon.encode.tokens.clone(),
        dequant: recon.encode.dequant.clone(),
        pre_quant: recon.encode.svq.pre_quant.values(),
    })
}

/// Full training state for the joint run.
pub struct TrainState {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
    pub prior: Prior,
    pub step: usize,
    /// Batch selection and augmentation draws.
    pub data_rng: Rng,
    /// Quantizer sampling, scheduled sampling, dead-code re-seeding.
    pub model_rng: Rng,
    adam: AdamState,
    pub history: Vec<StepMetrics>,
    usage: Vec<u64>,
    reservoir: Vec<Vec<f64>>,
    reservoir_next: usize,
}

impl TrainState {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let tokenizer = Tokenizer::new(cfg.tokenizer_config()?)?;
        let prior = Prior::new(cfg.prior_config(), "tok.codebook");
        let mut store = ParamStore::new();
        let mut init_rng = Rng::new(cfg.seed);
        tokenizer.init_params(&mut store, &mut init_rng);
        prior.init_params(&mut store, &mut init_rng);
        let mut seed_rng = Rng::new(cfg.seed ^ 0x5EED_0F_DA7A);
        let data_rng = seed_rng.split();
        let model_rng = seed_rng.split();
        let adam = AdamState::new(&store);
        let usage = vec![0; cfg.codebook_size];
        Ok(TrainState {
            cfg,
            store,
            tokenizer,
            prior,
            step: 0,
            data_rng,
            model_rng,
            adam,
            history: Vec::new(),
            usage,
            reservoir: Vec::new(),
            reservoir_next: 0,
        })
    }

    fn quant_mode(&self) -> QuantMode {
        if self.cfg.deterministic {
            QuantMode::Deterministic
        } else {
            QuantMode::Stochastic
        }
    }

    /// Combined loss over a batch without touching optimizer state.
    /// Consumes the model rng stream.
    pub fn total_loss(&mut self, batch: &[&VideoTensor]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::Data("total_loss: empty batch".into()));
        }
        let sched = self.cfg.sample_schedule();
        let mode = self.quant_mode();
        let (mut l1, mut svq, mut nll) = (0.0, 0.0, 0.0);
        for video in batch {
            let tape = Tape::new();
            let binder = Binder::new(tape.clone(), &self.store, false);
            let node = tape.constant(video.shape(), video.values.clone());
            let graph = clip_loss(
                &self.tokenizer,
                &self.prior,
                &binder,
                &node,
                mode,
                self.step,
                &sched,
                self.cfg.alpha,
                &mut self.model_rng,
            )?;
            l1 += graph.l1.scalar();
            svq += graph.svq.scalar();
            nll += graph.prior_nll.map(|t| t.scalar()).unwrap_or(0.0);
        }
        let b = batch.len() as f64;
        let (l1, svq, nll) = (l1 / b, svq / b, nll / b);
        Ok(StepMetrics {
            step: self.step,
            lr: lr_at(&self.cfg, self.step),
            loss: combine_loss(l1, svq, nll, self.cfg.alpha),
            l1,
            svq,
            prior_nll: nll,
        })
    }

    /// One optimization step over a batch drawn from `dataset`.
    ///
    /// A non-finite loss aborts the step with the component breakdown and
    /// leaves all state untouched except the rng streams.
    pub fn train_step(&mut self, dataset: &[LabeledClip]) -> Result<StepMetrics> {
        if dataset.is_empty() {
            return Err(Error::Data("train_step: empty dataset".into()));
        }
        let sched = self.cfg.sample_schedule();
        let mode = self.quant_mode();
        let batch = self.cfg.batch_size;

        let mut grads: Vec<Vec<f64>> =
            self.store.iter().map(|p| vec![0.0; p.values.len()]).collect();
        let (mut l1_sum, mut svq_sum, mut nll_sum) = (0.0, 0.0, 0.0);
        let mut batch_usage = vec![0u64; self.cfg.codebook_size];
        let mut batch_rows: Vec<Vec<f64>> = Vec::new();

        for _ in 0..batch {
            let idx = self.data_rng.below(dataset.len());
            let flip = self.data_rng.uniform() < self.cfg.flip_prob;
            let video =
                if flip { dataset[idx].video.hflip() } else { dataset[idx].video.clone() };

            let tape = Tape::new();
            let binder = Binder::new(tape.clone(), &self.store, true);
            let node = tape.constant(video.shape(), video.values.clone());
            let graph = clip_loss(
                &self.tokenizer,
                &self.prior,
                &binder,
                &node,
                mode,
                self.step,
                &sched,
                self.cfg.alpha,
                &mut self.model_rng,
            )?;
            tape.backward(&graph.total)?;
            for (pidx, grad) in tape.param_grads() {
                for (a, g) in grads[pidx].iter_mut().zip(&grad) {
                    *a += g;
                }
            }
            l1_sum += graph.l1.scalar();
            svq_sum += graph.svq.scalar();
            nll_sum += graph.prior_nll.as_ref().map(|t| t.scalar()).unwrap_or(0.0);
            for &t in &graph.tokens {
                batch_usage[t as usize] += 1;
            }
            let dp = self.cfg.code_dim;
            batch_rows.push(graph.pre_quant[..dp].to_vec());
        }

        let b = batch as f64;
        let (l1, svq, nll) = (l1_sum / b, svq_sum / b, nll_sum / b);
        let loss = combine_loss(l1, svq, nll, self.cfg.alpha);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "step {}: non-finite loss (l1={l1}, svq={svq}, prior_nll={nll}); step aborted",
                self.step
            )));
        }

        for g in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *g /= b;
        }
        let norm = grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>().sqrt();
        if norm > GRAD_CLIP_NORM {
            let scale = GRAD_CLIP_NORM / norm;
            for g in grads.iter_mut().flat_map(|g| g.iter_mut()) {
                *g *= scale;
            }
        }

        let lr = lr_at(&self.cfg, self.step);
        self.adam.t += 1;
        let (beta1, beta2, t) = (self.cfg.beta1, self.cfg.beta2, self.adam.t);
        for pidx in 0..self.store.len() {
            let group_lr = if self.store.by_idx(pidx).name.starts_with(crate::prior::PREFIX) {
                lr * self.cfg.prior_lr_mult
            } else {
                lr
            };
            let m = &mut self.adam.m[pidx];
            let v = &mut self.adam.v[pidx];
            let values = self.store.values_mut(pidx);
            for (e, g) in grads[pidx].iter().enumerate() {
                adam_update(&mut values[e], &mut m[e], &mut v[e], *g, group_lr, beta1, beta2, t);
            }
        }

        // Codebook usage window: one epoch of steps.
        for (u, add) in self.usage.iter_mut().zip(&batch_usage) {
            *u += add;
        }
        for row in batch_rows {
            if self.reservoir.len() < RESERVOIR_CAP {
                self.reservoir.push(row);
            } else {
                self.reservoir[self.reservoir_next] = row;
                self.reservoir_next = (self.reservoir_next + 1) % RESERVOIR_CAP;
            }
        }
        let steps_per_epoch = dataset.len().div_ceil(batch);
        if self.cfg.dead_code_reseed && (self.step + 1) % steps_per_epoch.max(1) == 0 {
            self.reseed_dead_codes()?;
        }

        let metrics = StepMetrics { step: self.step, lr, loss, l1, svq, prior_nll: nll };
        self.step += 1;
        self.history.push(metrics);
        Ok(metrics)
    }

    /// Replace codes unused in the last epoch window with recent encoder
    /// outputs.
    fn reseed_dead_codes(&mut self) -> Result<()> {
        if self.reservoir.is_empty() {
            self.usage.iter_mut().for_each(|u| *u = 0);
            return Ok(());
        }
        let dp = self.cfg.code_dim;
        let book_idx = self.store.idx("tok.codebook")?;
        for code in 0..self.cfg.codebook_size {
            if self.usage[code] > 0 {
                continue;
            }
            let pick = self.model_rng.below(self.reservoir.len());
            let mut row = self.reservoir[pick].clone();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < CODE_NORM_FLOOR {
                continue;
            }
            // Jitter the copy so revived codes separate instead of piling
            // onto one point of the latent cone.
            let jitter = 0.1 * norm / (dp as f64).sqrt();
            for v in &mut row {
                *v += jitter * self.model_rng.normal();
            }
            self.store.values_mut(book_idx)[code * dp..(code + 1) * dp].copy_from_slice(&row);
        }
        self.usage.iter_mut().for_each(|u| *u = 0);
        Ok(())
    }

    // ── checkpointing ────────────────────────────────────────────────

    fn meta_values(&self) -> Vec<f64> {
        vec![
            META_VERSION,
            self.cfg.tokens as f64,
            self.cfg.codebook_size as f64,
            self.cfg.embed_dim as f64,
            self.cfg.frames as f64,
            self.cfg.height as f64,
            self.cfg.width as f64,
        ]
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: Vec<(String, Buf)> = Vec::new();
        let meta = self.meta_values();
        entries.push(("__meta".into(), Buf::new(vec![meta.len()], meta)));
        let cfg_vals = ckpt::text_to_values(&self.cfg.to_text());
        entries.push(("__config".into(), Buf::new(vec![cfg_vals.len()], cfg_vals)));
        entries.push(("__step".into(), Buf::new(vec![1], vec![self.step as f64])));
        entries.push(("__adam_t".into(), Buf::new(vec![1], vec![self.adam.t as f64])));
        for (name, rng) in [("__rng_data", &self.data_rng), ("__rng_model", &self.model_rng)] {
            let (state, stream) = rng.state_words();
            let [a, b] = ckpt::u64_to_f64_pair(state);
            let [c, d] = ckpt::u64_to_f64_pair(stream);
            entries.push((name.into(), Buf::new(vec![4], vec![a, b, c, d])));
        }
        for (idx, p) in self.store.iter().enumerate() {
            entries.push((format!("p.{}", p.name), Buf { shape: p.shape.clone(), values: Arc::clone(&p.values) }));
            entries.push((format!("m.{}", p.name), Buf::new(p.shape.clone(), self.adam.m[idx].clone())));
            entries.push((format!("v.{}", p.name), Buf::new(p.shape.clone(), self.adam.v[idx].clone())));
        }
        let mut bytes = Vec::new();
        ckpt::write_ck01(&mut bytes, &entries)?;
        Ok(bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<TrainState> {
        let entries = ckpt::read_ck01(&mut std::io::Cursor::new(bytes))?;
        let mut map: std::collections::HashMap<String, Buf> = entries.into_iter().collect();
        let mut need = |name: &str| -> Result<Buf> {
            map.remove(name).ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {name}")))
        };
        let cfg_text = ckpt::values_to_text(&need("__config")?.values)?;
        let cfg = RunConfig::from_text(&cfg_text)?;
        let mut state = TrainState::new(cfg)?;
        let _ = need("__meta")?;
        state.step = need("__step")?.values[0] as usize;
        state.adam.t = need("__adam_t")?.values[0] as u64;
        for (name, slot) in [("__rng_data", 0usize), ("__rng_model", 1usize)] {
            let v = need(name)?;
            let rng = Rng::from_state_words(
                ckpt::f64_pair_to_u64(v.values[0], v.values[1]),
                ckpt::f64_pair_to_u64(v.values[2], v.values[3]),
            );
            if slot == 0 {
                state.data_rng = rng;
            } else {
                state.model_rng = rng;
            }
        }
        for idx in 0..state.store.len() {
            let pname = state.store.by_idx(idx).name.clone();
            let shape = state.store.by_idx(idx).shape.clone();
            for (prefix, dest) in [("p.", 0usize), ("m.", 1), ("v.", 2)] {
                let buf = need(&format!("{prefix}{pname}"))?;
                if buf.shape != shape {
                    return Err(Error::Data(format!(
                        "checkpoint tensor {prefix}{pname} has shape {:?}, expected {:?}",
                        buf.shape, shape
                    )));
                }
                let values = buf.values.as_ref().clone();
                match dest {
                    0 => *state.store.values_mut(idx) = values,
                    1 => state.adam.m[idx] = values,
                    _ => state.adam.v[idx] = values,
                }
            }
        }
        Ok(state)
    }

    /// Config text exactly as echoed at startup and embedded in checkpoints.
    pub fn provenance(&self) -> String {
        self.cfg.to_text()
    }
}

/// Metadata header of a trainer checkpoint: `(tokens, codebook, embed_dim)`.
pub fn checkpoint_meta(bytes: &[u8]) -> Result<(usize, usize, usize)> {
    let entries = ckpt::read_ck01(&mut std::io::Cursor::new(bytes))?;
    let meta = entries
        .iter()
        .find(|(n, _)| n == "__meta")
        .ok_or_else(|| Error::Data("checkpoint is missing tensor __meta".into()))?;
    let v = &meta.1.values;
    if v.len() < 4 {
        return Err(Error::Data("checkpoint __meta too short".into()));
    }
    Ok((v[1] as usize, v[2] as usize, v[3] as usize))
}

/// Render metrics as the CSV emitted by training commands.
pub fn metrics_csv(history: &[StepMetrics]) -> String {
    let mut out = String::from("step,lr,loss,l1,svq,prior_nll\n");
    for m in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.step, m.lr, m.loss, m.l1, m.svq, m.prior_nll
        ));
    }
    out
}

/// Mean of the last `window` entries of a series.
pub fn tail_mean(series: &[f64], window: usize) -> f64 {
    let tail = &series[series.len().saturating_sub(window)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}
