//! Single-token ablation and fixed-index heatmaps over trained tokenizers.

use crate::error::Result;
use crate::params::{Binder, ParamStore};
use crate::quant::QuantMode;
use crate::rng::Rng;
use crate::tensor::Tape;
use crate::tokenizer::Tokenizer;
use crate::video::{psnr, VideoTensor};

/// PSNR impact of replacing one token of one video.
#[derive(Debug, Clone, Copy)]
pub struct AblationRecord {
    pub video_id: usize,
    pub token_index: usize,
    /// Baseline PSNR minus modified PSNR (positive = the token mattered).
    pub delta_psnr: f64,
}

fn decode(tok: &Tokenizer, store: &ParamStore, tokens: &[u32]) -> Result<VideoTensor> {
    let tape = Tape::new();
    let binder = Binder::new(tape.clone(), store, false);
    tok.decode_tokens(&binder, tokens)
}

fn encode_det(tok: &Tokenizer, store: &ParamStore, video: &VideoTensor) -> Result<Vec<u32>> {
    let tape = Tape::new();
    let binder = Binder::new(tape.clone(), store, false);
    let mut rng = Rng::new(0);
    Ok(tok.encode(&binder, video, QuantMode::Deterministic, &mut rng)?.tokens)
}

/// PSNR delta from setting `tokens[index] = replacement` (identity
/// replacements yield exactly zero).
pub fn ablation_delta(
    tok: &Tokenizer,
    store: &ParamStore,
    video: &VideoTensor,
    tokens: &[u32],
    index: usize,
    replacement: u32,
) -> Result<f64> {
    let base = psnr(video, &decode(tok, store, tokens)?)?;
    if tokens[index] == replacement {
        return Ok(0.0);
    }
    let mut modified = tokens.to_vec();
    modified[index] = replacement;
    let changed = psnr(video, &decode(tok, store, &modified)?)?;
    if base == changed {
        return Ok(0.0);
    }
    Ok(base - changed)
}

/// Full ablation grid: every video, every token index, replacement drawn
/// uniformly over the other code indices.
pub fn token_ablation(
    tok: &Tokenizer,
    store: &ParamStore,
    videos: &[VideoTensor],
    rng: &mut Rng,
) -> Result<Vec<AblationRecord>> {
    let c = tok.cfg.codebook_size;
    let mut records = Vec::with_capacity(videos.len() * tok.cfg.tokens);
    for (video_id, video) in videos.iter().enumerate() {
        let tokens = encode_det(tok, store, video)?;
        for index in 0..tokens.len() {
            // Uniform over the codes other than the current one.
            let draw = rng.below(c - 1) as u32;
            let replacement = if draw >= tokens[index] { draw + 1 } else { draw };
            let delta_psnr = ablation_delta(tok, store, video, &tokens, index, replacement)?;
            records.push(AblationRecord { video_id, token_index: index, delta_psnr });
        }
    }
    Ok(records)
}

/// Per-pixel reconstruction difference from zeroing one token index,
/// summed over channels.
#[derive(Debug, Clone)]
pub struct HeatField {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl HeatField {
    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Fraction of spatiotemporal patch cells carrying any heat mass.
    pub fn occupancy(&self, layout: &crate::video::PatchLayout, eps: f64) -> f64 {
        let (gt, gh, gw) = (
            self.frames / layout.f_t,
            self.height / layout.f_h,
            self.width / layout.f_w,
        );
        let mut hot = 0usize;
        for bt in 0..gt {
            for bh in 0..gh {
                for bw in 0..gw {
                    let mut mass = 0.0;
                    for dt in 0..layout.f_t {
                        for dy in 0..layout.f_h {
                            for dx in 0..layout.f_w {
                                let t = bt * layout.f_t + dt;
                                let y = bh * layout.f_h + dy;
                                let x = bw * layout.f_w + dx;
                                mass += self.values[(t * self.height + y) * self.width + x];
                            }
                        }
                    }
                    if mass > eps {
                        hot += 1;
                    }
                }
            }
        }
        hot as f64 / (gt * gh * gw) as f64
    }

    /// One frame as a max-normalized grayscale P6 image.
    pub fn frame_ppm(&self, frame: usize) -> Vec<u8> {
        let max = self.max();
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.values[(frame * self.height + y) * self.width + x];
                let g = if max > 0.0 { ((v / max) * 255.0).round() as u8 } else { 0 };
                out.extend_from_slice(&[g, g, g]);
            }
        }
        out
    }
}

/// Heat fields for every probe video at a fixed token index (tokens at that
/// index are set to code 0).
pub fn token_heatmap(
    tok: &Tokenizer,
    store: &ParamStore,
    videos: &[VideoTensor],
    token_index: usize,
) -> Result<Vec<HeatField>> {
    if token_index >= tok.cfg.tokens {
        return Err(crate::error::Error::Config(format!(
            "token index {token_index} out of range for {} tokens",
            tok.cfg.tokens
        )));
    }
    let mut fields = Vec::with_capacity(videos.len());
    for video in videos {
        let tokens = encode_det(tok, store, video)?;
        let original = decode(tok, store, &tokens)?;
        let mut zeroed = tokens.clone();
        zeroed[token_index] = 0;
        let modified = decode(tok, store, &zeroed)?;
        let (t, h, w) = (video.frames, video.height, video.width);
        let mut values = vec![0.0; t * h * w];
        for frame in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let mut sum = 0.0;
                    for ch in 0..3 {
                        sum += (original.at(frame, y, x, ch) - modified.at(frame, y, x, ch)).abs();
                    }
                    values[(frame * h + y) * w + x] = sum;
                }
            }
        }
        fields.push(HeatField { frames: t, height: h, width: w, values });
    }
    Ok(fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantizerConfig;
    use crate::tokenizer::TokenizerConfig;
    use crate::video::PatchLayout;

    fn setup() -> (Tokenizer, ParamStore, Vec<VideoTensor>) {
        let cfg = TokenizerConfig {
            layout: PatchLayout::new(2, 8, 8, 2, 4, 4).unwrap(),
            embed_dim: 16,
            heads: 2,
            enc_depth: 1,
            dec_depth: 1,
            tokens: 4,
            code_dim: 4,
            codebook_size: 8,
            quant: QuantizerConfig::default(),
        };
        let tok = Tokenizer::new(cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        tok.init_params(&mut store, &mut rng);
        let layout = PatchLayout::new(2, 8, 8, 2, 4, 4).unwrap();
        let videos: Vec<VideoTensor> = crate::video::synth_dataset(9, 2, 3, &layout)
            .unwrap()
            .into_iter()
            .map(|c| c.video)
            .collect();
        (tok, store, videos)
    }

    #[test]
    fn identity_replacement_scores_zero() {
        let (tok, store, videos) = setup();
        let tokens = encode_det(&tok, &store, &videos[0]).unwrap();
        for i in 0..tokens.len() {
            let d = ablation_delta(&tok, &store, &videos[0], &tokens, i, tokens[i]).unwrap();
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn grid_covers_every_video_and_token() {
        let (tok, store, videos) = setup();
        let mut rng = Rng::new(3);
        let records = token_ablation(&tok, &store, &videos, &mut rng).unwrap();
        assert_eq!(records.len(), videos.len() * 4);
        for v in 0..videos.len() {
            assert_eq!(records.iter().filter(|r| r.video_id == v).count(), 4);
        }
        assert!(records.iter().all(|r| r.delta_psnr.is_finite()));
        // The replacement never equals the original token, so decoding
        // genuinely changes.
        assert!(records.iter().any(|r| r.delta_psnr != 0.0));
    }

    #[test]
    fn heat_fields_are_nonnegative_and_zero_for_noop() {
        let (tok, store, videos) = setup();
        let fields = token_heatmap(&tok, &store, &videos, 1).unwrap();
        assert_eq!(fields.len(), videos.len());
        for f in &fields {
            assert!(f.values.iter().all(|v| *v >= 0.0));
        }
        // Forcing the token that is already zero produces an all-zero field.
        let tokens = encode_det(&tok, &store, &videos[0]).unwrap();
        let mut forced = tokens.clone();
        forced[2] = 0;
        let base = decode(&tok, &store, &forced).unwrap();
        let mut again = forced.clone();
        again[2] = 0;
        let same = decode(&tok, &store, &again).unwrap();
        assert_eq!(base.values, same.values);
        assert!(token_heatmap(&tok, &store, &videos, 99).is_err());
    }

    #[test]
    fn heatmap_ppm_and_occupancy() {
        let layout = PatchLayout::new(2, 8, 8, 2, 4, 4).unwrap();
        let mut values = vec![0.0; 2 * 8 * 8];
        values[0] = 2.0;
        let field = HeatField { frames: 2, height: 8, width: 8, values };
        let ppm = field.frame_ppm(0);
        assert!(ppm.starts_with(b"P6\n8 8\n255\n"));
        assert_eq!(ppm[11], 255);
        assert_eq!(field.occupancy(&layout, 1e-9), 0.25);
    }
}
