//! Latent-space diagnostics: token ablation, spatiotemporal heatmaps,
//! n-gram statistics, class dominance, and the frame-repetition sweep.
//!
//! Each diagnostic is an [`AnalysisTask`] registered by name and selected at
//! runtime by the `analyze` subcommand; all of them are read-only over model
//! parameters.

mod ablation;
mod ngrams;
mod redundancy;

pub use ablation::{ablation_delta, token_ablation, token_heatmap, AblationRecord, HeatField};
pub use ngrams::{class_dominance, histogram_buckets, ngram_stats, DominanceRow, NgramTable};
pub use redundancy::redundancy_sweep;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tokenizer::Tokenizer;
use crate::video::VideoTensor;

/// Options shared by the analysis tasks; each task reads what it needs.
#[derive(Clone, Debug)]
pub struct AnalyzeOpts {
    pub token_index: Option<usize>,
    pub order: usize,
    pub threshold: Option<u64>,
    pub levels: Vec<usize>,
    pub seed: u64,
}

impl Default for AnalyzeOpts {
    fn default() -> Self {
        AnalyzeOpts { token_index: None, order: 2, threshold: None, levels: vec![1, 2, 4, 8, 16], seed: 7 }
    }
}

/// Everything a task may consume. Model-driven tasks need the tokenizer;
/// corpus-driven tasks need token sequences with class ids.
pub struct AnalyzeContext<'a> {
    pub tokenizer: Option<(&'a Tokenizer, &'a ParamStore)>,
    pub videos: &'a [VideoTensor],
    pub corpus: &'a [(Vec<u32>, usize)],
    pub classes: usize,
    pub out_dir: &'a Path,
    pub opts: AnalyzeOpts,
}

impl<'a> AnalyzeContext<'a> {
    fn model(&self, task: &str) -> Result<(&'a Tokenizer, &'a ParamStore)> {
        self.tokenizer
            .ok_or_else(|| Error::Config(format!("analyze {task}: needs a tokenizer checkpoint")))
    }

    fn need_videos(&self, task: &str) -> Result<&'a [VideoTensor]> {
        if self.videos.is_empty() {
            return Err(Error::Data(format!("analyze {task}: no probe videos")));
        }
        Ok(self.videos)
    }

    fn need_corpus(&self, task: &str) -> Result<&'a [(Vec<u32>, usize)]> {
        if self.corpus.is_empty() {
            return Err(Error::Data(format!("analyze {task}: no token corpus")));
        }
        Ok(self.corpus)
    }
}

/// One runnable diagnostic.
pub trait AnalysisTask {
    fn name(&self) -> &'static str;
    /// Run and return the files written.
    fn run(&self, ctx: &AnalyzeContext) -> Result<Vec<PathBuf>>;
}

struct AblateTask;
struct HeatmapTask;
struct NgramsTask;
struct DominanceTask;
struct RedundancyTask;

/// All registered diagnostics, in CLI listing order.
pub fn registry() -> Vec<Box<dyn AnalysisTask>> {
    vec![
        Box::new(AblateTask),
        Box::new(HeatmapTask),
        Box::new(NgramsTask),
        Box::new(DominanceTask),
        Box::new(RedundancyTask),
    ]
}

/// Look a task up by its registered name.
pub fn find_task(name: &str) -> Result<Box<dyn AnalysisTask>> {
    registry().into_iter().find(|t| t.name() == name).ok_or_else(|| {
        let names: Vec<&str> = registry().iter().map(|t| t.name()).collect();
        Error::Config(format!("unknown analysis task {name:?}; expected one of {}", names.join(", ")))
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

impl AnalysisTask for AblateTask {
    fn name(&self) -> &'static str {
        "ablate"
    }

    fn run(&self, ctx: &AnalyzeContext) -> Result<Vec<PathBuf>> {
        let (tok, store) = ctx.model("ablate")?;
        let videos = ctx.need_videos("ablate")?;
        let mut rng = Rng::new(ctx.opts.seed);
        let records = token_ablation(tok, store, videos, &mut rng)?;
        let mut csv = String::from("video_id,token_idx,delta_psnr\n");
        for r in &records {
            csv.push_str(&format!("{},{},{}\n", r.video_id, r.token_index, r.delta_psnr));
        }
        let path = ctx.out_dir.join("ablation.csv");
        write_text(&path, &csv)?;
        Ok(vec![path])
    }
}

impl AnalysisTask for HeatmapTask {
    fn name(&self) -> &'static str {
        "heatmap"
    }

    fn run(&self, ctx: &AnalyzeContext) -> Result<Vec<PathBuf>> {
        let (tok, store) = ctx.model("heatmap")?;
        let videos = ctx.need_videos("heatmap")?;
        let index = ctx
            .opts
            .token_index
            .ok_or_else(|| Error::Config("analyze heatmap: --token-index is required".into()))?;
        let fields = token_heatmap(tok, store, videos, index)?;
        let mut written = Vec::new();
        std::fs::create_dir_all(ctx.out_dir)?;
        for (v, field) in fields.iter().enumerate() {
            for t in 0..field.frames {
                let path = ctx.out_dir.join(format!("heat_v{v:03}_f{t:02}.ppm"));
                std::fs::write(&path, field.frame_ppm(t))?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

impl AnalysisTask for NgramsTask {
    fn name(&self) -> &'static str {
        "ngrams"
    }

    fn run(&self, ctx: &AnalyzeContext) -> Result<Vec<PathBuf>> {
        let corpus = ctx.need_corpus("ngrams")?;
        let table = ngram_stats(corpus, ctx.opts.order)?;
        let mut csv = String::from("bucket_lo,bucket_hi,unique_ngrams\n");
        for (lo, hi, count) in histogram_buckets(&table) {
            csv.push_str(&format!("{lo},{hi},{count}\n"));
        }
        let path = ctx.out_dir.join("histogram.csv");
        write_text(&path, &csv)?;
        Ok(vec![path])
    }
}

impl AnalysisTask for DominanceTask {
    fn name(&self) -> &'static str {
        "dominance"
    }

    fn run(&self, ctx: &AnalyzeContext) -> Result<Vec<PathBuf>> {
        let corpus = ctx.need_corpus("dominance")?;
        let threshold = ctx
            .opts
            .threshold
            .ok_or_else(|| Error::Config("analyze dominance: --threshold is required".into()))?;
        let table = ngram_stats(corpus, 2)?;
        let rows = class_dominance(&table, threshold)?;
        let mut csv = String::from("rank,score,ngram,class\n");
        for (rank, row) in rows.iter().enumerate() {
            let ngram: Vec<String> = row.ngram.iter().map(|t| t.to_string()).collect();
            csv.push_str(&format!("{},{},{},{}\n", rank, row.score, ngram.join("-"), row.class));
        }
        let path = ctx.out_dir.join("dominance.csv");
        write_text(&path, &csv)?;
        Ok(vec![path])
    }
}

impl AnalysisTask for RedundancyTask {
    fn name(&self) -> &'static str {
        "redundancy"
    }

    fn run(&self, ctx: &AnalyzeContext) -> Result<Vec<PathBuf>> {
        let (tok, store) = ctx.model("redundancy")?;
        let videos = ctx.need_videos("redundancy")?;
        let rows = redundancy_sweep(tok, store, videos, &ctx.opts.levels)?;
        let mut csv = String::from("level,mean_psnr\n");
        for (level, mean) in &rows {
            csv.push_str(&format!("{level},{mean}\n"));
        }
        let path = ctx.out_dir.join("redundancy.csv");
        write_text(&path, &csv)?;
        Ok(vec![path])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_and_lookup() {
        let names: Vec<&str> = registry().iter().map(|t| t.name()).collect();
        assert_eq!(names, vec!["ablate", "heatmap", "ngrams", "dominance", "redundancy"]);
        assert!(find_task("ngrams").is_ok());
        let err = find_task("nope").err().unwrap();
        assert!(err.to_string().contains("nope"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn corpus_tasks_reject_empty_context() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = AnalyzeContext {
            tokenizer: None,
            videos: &[],
            corpus: &[],
            classes: 2,
            out_dir: dir.path(),
            opts: AnalyzeOpts::default(),
        };
        assert!(find_task("ngrams").unwrap().run(&ctx).is_err());
        assert!(find_task("ablate").unwrap().run(&ctx).is_err());
    }

    #[test]
    fn dominance_requires_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = vec![(vec![0u32, 1, 2], 0usize)];
        let ctx = AnalyzeContext {
            tokenizer: None,
            videos: &[],
            corpus: &corpus,
            classes: 2,
            out_dir: dir.path(),
            opts: AnalyzeOpts { threshold: None, ..Default::default() },
        };
        let err = find_task("dominance").unwrap().run(&ctx).err().unwrap();
        assert!(err.to_string().contains("threshold"), "{err}");
    }
}
