//! Reconstruction quality versus frame-repetition level.

use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::quant::QuantMode;
use crate::rng::Rng;
use crate::tensor::Tape;
use crate::tokenizer::Tokenizer;
use crate::video::{psnr, repeat_pad, PadMode, VideoTensor};

/// Mean reconstruction PSNR per repetition level. Level `r` builds each
/// probe from its first `T/r` frames tiled cyclically to `T` frames, so
/// higher levels carry less unique content.
pub fn redundancy_sweep(
    tok: &Tokenizer,
    store: &ParamStore,
    videos: &[VideoTensor],
    levels: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let frames = tok.cfg.layout.frames;
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        if level == 0 || frames % level != 0 {
            return Err(Error::Data(format!(
                "repetition level {level} does not divide {frames} frames"
            )));
        }
        let unique = frames / level;
        let mut total = 0.0;
        for video in videos {
            let head = video.first_frames(unique)?;
            let built = repeat_pad(&head, frames, PadMode::Cyclic)?;
            let tape = Tape::new();
            let binder = Binder::new(tape.clone(), store, false);
            let mut rng = Rng::new(0);
            let recon = tok.reconstruct(&binder, &built, QuantMode::Deterministic, &mut rng)?;
            total += psnr(&built, &recon.video)?;
        }
        rows.push((level, total / videos.len().max(1) as f64));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantizerConfig;
    use crate::tokenizer::TokenizerConfig;
    use crate::video::PatchLayout;

    fn setup() -> (Tokenizer, ParamStore, Vec<VideoTensor>) {
        let layout = PatchLayout::new(4, 8, 8, 2, 4, 4).unwrap();
        let cfg = TokenizerConfig {
            layout,
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
        let mut rng = Rng::new(7);
        tok.init_params(&mut store, &mut rng);
        let videos = crate::video::synth_dataset(21, 2, 2, &layout)
            .unwrap()
            .into_iter()
            .map(|c| c.video)
            .collect();
        (tok, store, videos)
    }

    #[test]
    fn level_one_matches_plain_reconstruction() {
        let (tok, store, videos) = setup();
        let rows = redundancy_sweep(&tok, &store, &videos, &[1]).unwrap();
        let mut total = 0.0;
        for v in &videos {
            let tape = Tape::new();
            let binder = Binder::new(tape.clone(), &store, false);
            let mut rng = Rng::new(0);
            let recon = tok.reconstruct(&binder, v, QuantMode::Deterministic, &mut rng).unwrap();
            total += psnr(v, &recon.video).unwrap();
        }
        assert_eq!(rows[0].1, total / videos.len() as f64);
    }

    #[test]
    fn full_repetition_uses_one_frame() {
        let (tok, store, videos) = setup();
        let rows = redundancy_sweep(&tok, &store, &videos, &[4]).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].1.is_finite());
    }

    #[test]
    fn indivisible_level_rejected() {
        let (tok, store, videos) = setup();
        assert!(redundancy_sweep(&tok, &store, &videos, &[3]).is_err());
        assert!(redundancy_sweep(&tok, &store, &videos, &[0]).is_err());
    }
}
