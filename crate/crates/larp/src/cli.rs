//! Command-line surface: subcommands wiring all modules into reproducible
//! runs driven by one key=value config.
//!
//! Precedence: defaults < --config file < LARP_SEED < per-key flags. Every
//! config key mirrors a flag (underscores become dashes). The canonical
//! config text is echoed at startup; training commands store the identical
//! text as `config.txt` and embed it in their checkpoints.

use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::analysis::{self, AnalyzeContext, AnalyzeOpts};
use crate::config::{GenMode, RunConfig};
use crate::error::{Error, Result};
use crate::generator::{self, GenExample, GenTrainState};
use crate::params::Binder;
use crate::quant::QuantMode;
use crate::rng::Rng;
use crate::tensor::{gradcheck, Tape};
use crate::tokenizer::{read_ts01_file, write_ts01_file};
use crate::train::{checkpoint_meta, clip_loss, metrics_csv, TrainState};
use crate::video::{
    load_clips, save_clips, synth_dataset, write_ppm_frames, LabeledClip, VideoTensor,
};

/// Probe videos for analysis draw from a shifted seed so they are held out
/// from training.
const PROBE_SEED_OFFSET: u64 = 1000;
/// Held-out clips for reconstruction reports.
const EVAL_SEED_OFFSET: u64 = 500;

fn key_args() -> Vec<Arg> {
    RunConfig::KEYS
        .iter()
        .map(|(key, doc)| {
            Arg::new(*key)
                .long(key.replace('_', "-"))
                .value_name("VALUE")
                .help(*doc)
                .action(ArgAction::Set)
        })
        .collect()
}

fn common_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("key=value config file applied over defaults")];
    args.extend(key_args());
    args
}

fn out_dir_arg() -> Arg {
    Arg::new("out_dir").long("out-dir").value_name("DIR").required(true).help("output directory")
}

fn build_command() -> Command {
    Command::new("larp")
        .about("Holistic video tokenizer with a co-trained autoregressive prior")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("synth-data")
                .about("generate the synthetic labeled dataset")
                .args(common_args())
                .arg(out_dir_arg())
                .arg(Arg::new("ppm").long("ppm").value_name("N").help("export PPM previews for the first N clips")),
        )
        .subcommand(
            Command::new("train-tokenizer")
                .about("jointly train the tokenizer and the AR prior")
                .args(common_args())
                .arg(out_dir_arg())
                .arg(Arg::new("data").long("data").value_name("DIR").help("clip directory with manifest.tsv (default: synthetic)")),
        )
        .subcommand(
            Command::new("train-generator")
                .about("tokenize a corpus and train the AR generator on it")
                .args(common_args())
                .arg(out_dir_arg())
                .arg(Arg::new("tokenizer_checkpoint").long("tokenizer-checkpoint").value_name("FILE").required(true))
                .arg(Arg::new("data").long("data").value_name("DIR")),
        )
        .subcommand(
            Command::new("reconstruct")
                .about("encode and decode held-out clips, reporting L1 and PSNR")
                .args(common_args())
                .arg(out_dir_arg())
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("FILE").required(true))
                .arg(Arg::new("data").long("data").value_name("DIR"))
                .arg(Arg::new("count").long("count").value_name("N").help("number of clips (default 4)")),
        )
        .subcommand(
            Command::new("generate")
                .about("sample class-conditional token sequences and decode them")
                .args(common_args())
                .arg(out_dir_arg())
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("FILE").required(true).help("generator checkpoint"))
                .arg(Arg::new("tokenizer_checkpoint").long("tokenizer-checkpoint").value_name("FILE").required(true)),
        )
        .subcommand(
            Command::new("predict-frames")
                .about("predict a full clip from its first frames")
                .args(common_args())
                .arg(out_dir_arg())
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("FILE").required(true).help("generator checkpoint (frames mode)"))
                .arg(Arg::new("tokenizer_checkpoint").long("tokenizer-checkpoint").value_name("FILE").required(true))
                .arg(Arg::new("data").long("data").value_name("DIR").help("conditioning clip source (default: synthetic)")),
        )
        .subcommand(
            Command::new("analyze")
                .about("latent-space diagnostics")
                .subcommand_required(true)
                .subcommands(analysis::registry().into_iter().map(|task| {
                    let mut sub = Command::new(task.name().to_string())
                        .args(common_args())
                        .arg(out_dir_arg())
                        .arg(Arg::new("checkpoint").long("checkpoint").value_name("FILE").help("tokenizer checkpoint (model-driven tasks)"))
                        .arg(Arg::new("corpus").long("corpus").value_name("DIR").help("token corpus directory (ngrams, dominance)"))
                        .arg(Arg::new("probe_videos").long("probe-videos").value_name("N").help("held-out probe clips (default 10)"));
                    sub = match task.name() {
                        "heatmap" => sub.arg(Arg::new("token_index").long("token-index").value_name("I").required(true)),
                        "ngrams" => sub.arg(Arg::new("order").long("order").value_name("2|3")),
                        "dominance" => sub.arg(Arg::new("threshold").long("threshold").value_name("D").required(true)),
                        "redundancy" => sub.arg(Arg::new("levels").long("levels").value_name("L1,L2,..")),
                        _ => sub,
                    };
                    sub
                })),
        )
        .subcommand(
            Command::new("grad-check")
                .about("finite-difference checks for every operator and the full combined loss")
                .args(common_args()),
        )
}

/// Build the effective config: defaults, then file, then LARP_SEED, then
/// per-key flags.
fn load_config(matches: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = matches.get_one::<String>("config") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {path}: {e}")))?;
        cfg.apply_text(&text)?;
    }
    if let Ok(seed) = std::env::var("LARP_SEED") {
        cfg.set("seed", &seed)?;
    }
    for (key, _) in RunConfig::KEYS {
        if let Some(value) = matches.get_one::<String>(*key) {
            cfg.set(key, value)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_flag<T: std::str::FromStr>(matches: &ArgMatches, name: &str, what: &str) -> Result<Option<T>> {
    match matches.get_one::<String>(name) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|_| Error::Config(format!("bad value {raw:?} for --{what}"))),
    }
}

fn echo_config(cfg: &RunConfig) {
    print!("{}", cfg.to_text());
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig, data: Option<&String>) -> Result<Vec<LabeledClip>> {
    let layout = cfg.layout()?;
    let clips = match data {
        Some(dir) => {
            let clips = load_clips(Path::new(dir))?;
            for (i, clip) in clips.iter().enumerate() {
                if !layout.matches(&clip.video) {
                    return Err(Error::Data(format!(
                        "imported clip {i} has extents {:?}, config expects {}x{}x{}",
                        clip.video.shape(),
                        layout.frames,
                        layout.height,
                        layout.width
                    )));
                }
            }
            clips
        }
        None => synth_dataset(cfg.seed, cfg.classes, cfg.clips, &layout)?,
    };
    if clips.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    Ok(clips)
}

fn read_checkpoint(path: &str) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Data(format!("cannot read checkpoint {path}: {e}")))
}

// ── commands ─────────────────────────────────────────────────────────

fn cmd_synth_data(matches: &ArgMatches) -> Result<()> {
    let cfg = load_config(matches)?;
    echo_config(&cfg);
    let out = PathBuf::from(matches.get_one::<String>("out_dir").unwrap());
    ensure_dir(&out)?;
    let clips = load_dataset(&cfg, None)?;
    save_clips(&out, &clips)?;
    let previews: usize = parse_flag(matches, "ppm", "ppm")?.unwrap_or(0);
    for (i, clip) in clips.iter().take(previews).enumerate() {
        write_ppm_frames(&out.join("preview"), &format!("clip{i:03}"), &clip.video)?;
    }
    println!("wrote {} clips to {}", clips.len(), out.display());
    Ok(())
}

fn cmd_train_tokenizer(matches: &ArgMatches) -> Result<()> {
    let cfg = load_config(matches)?;
    echo_config(&cfg);
    let out = PathBuf::from(matches.get_one::<String>("out_dir").unwrap());
    ensure_dir(&out)?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    let dataset = load_dataset(&cfg, matches.get_one::<String>("data"))?;
    let mut state = TrainState::new(cfg.clone())?;
    let report_every = (cfg.total_steps / 20).max(1);
    while state.step < cfg.total_steps {
        let m = state.train_step(&dataset)?;
        if m.step % report_every == 0 || m.step + 1 == cfg.total_steps {
            println!(
                "step {} lr {:.3e} loss {:.5} l1 {:.5} svq {:.5} prior_nll {:.5}",
                m.step, m.lr, m.loss, m.l1, m.svq, m.prior_nll
            );
        }
    }
    std::fs::write(out.join("metrics.csv"), metrics_csv(&state.history))?;
    std::fs::write(out.join("tokenizer.ck"), state.checkpoint_bytes()?)?;
    println!("checkpoint {}", out.join("tokenizer.ck").display());
    Ok(())
}

/// Carry the fields that must match the tokenizer into the generator run.
fn adopt_tokenizer_fields(dst: &mut RunConfig, src: &RunConfig) {
    for key in [
        "tokens",
        "codebook_size",
        "code_dim",
        "classes",
        "clips",
        "frames",
        "height",
        "width",
        "f_t",
        "f_h",
        "f_w",
        "embed_dim",
        "heads",
        "enc_depth",
        "dec_depth",
        "prior_dim",
        "prior_depth",
        "prior_heads",
    ] {
        let value = src
            .to_text()
            .lines()
            .find(|l| l.starts_with(&format!("{key}=")))
            .and_then(|l| l.split_once('=').map(|(_, v)| v.to_string()))
            .expect("key exists");
        dst.set(key, &value).expect("same schema");
    }
}

fn build_gen_examples(
    cfg: &RunConfig,
    tok_state: &TrainState,
    dataset: &[LabeledClip],
) -> Result<(Vec<GenExample>, Vec<(Vec<u32>, usize)>)> {
    let corpus = generator::tokenize_corpus(&tok_state.tokenizer, &tok_state.store, dataset)?;
    let examples = match cfg.gen_mode {
        GenMode::Class => corpus
            .iter()
            .map(|(seq, class_id)| GenExample::Class { seq: seq.clone(), class_id: *class_id })
            .collect(),
        GenMode::Frames => {
            let mut out = Vec::with_capacity(dataset.len());
            for (clip, (seq, _)) in dataset.iter().zip(&corpus) {
                let head = clip.video.first_frames(cfg.cond_frames.min(clip.video.frames - 1).max(1))?;
                let padded = crate::video::repeat_pad(
                    &head,
                    tok_state.tokenizer.cfg.layout.frames,
                    crate::video::PadMode::LastFrame,
                )?;
                let tape = Tape::new();
                let binder = Binder::new(tape.clone(), &tok_state.store, false);
                let mut rng = Rng::new(0);
                let cond = tok_state
                    .tokenizer
                    .encode(&binder, &padded, QuantMode::Deterministic, &mut rng)?
                    .tokens;
                out.push(GenExample::Frames { seq: seq.clone(), cond });
            }
            out
        }
    };
    Ok((examples, corpus))
}

fn cmd_train_generator(matches: &ArgMatches) -> Result<()> {
    let mut cfg = load_config(matches)?;
    let ck = read_checkpoint(matches.get_one::<String>("tokenizer_checkpoint").unwrap())?;
    let tok_state = TrainState::from_checkpoint_bytes(&ck)?;
    adopt_tokenizer_fields(&mut cfg, &tok_state.cfg);
    cfg.validate()?;
    echo_config(&cfg);
    let out = PathBuf::from(matches.get_one::<String>("out_dir").unwrap());
    ensure_dir(&out)?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;

    let dataset = load_dataset(&tok_state.cfg, matches.get_one::<String>("data"))?;
    let (examples, corpus) = build_gen_examples(&cfg, &tok_state, &dataset)?;

    // Persist the tokenized corpus next to the generator.
    let corpus_dir = out.join("corpus");
    ensure_dir(&corpus_dir)?;
    let mut manifest = String::new();
    for (i, (seq, class_id)) in corpus.iter().enumerate() {
        let name = format!("clip_{i:05}.ts01");
        write_ts01_file(&corpus_dir.join(&name), seq, cfg.codebook_size as u32)?;
        manifest.push_str(&format!("{name}\t{class_id}\n"));
    }
    std::fs::write(corpus_dir.join("manifest.tsv"), manifest)?;

    let mut state = GenTrainState::new(cfg.clone())?;
    let report_every = (cfg.gen_total_steps / 20).max(1);
    while state.step < cfg.gen_total_steps {
        let m = state.train_step(&examples)?;
        if m.step % report_every == 0 || m.step + 1 == cfg.gen_total_steps {
            println!("step {} lr {:.3e} nll {:.5}", m.step, m.lr, m.loss);
        }
    }
    std::fs::write(out.join("gen-metrics.csv"), metrics_csv(&state.history))?;
    std::fs::write(out.join("generator.ck"), state.checkpoint_bytes()?)?;
    println!("checkpoint {}", out.join("generator.ck").display());
    Ok(())
}

fn cmd_reconstruct(matches: &ArgMatches) -> Result<()> {
    let ck = read_checkpoint(matches.get_one::<String>("checkpoint").unwrap())?;
    let state = TrainState::from_checkpoint_bytes(&ck)?;
    let cfg = state.cfg.clone();
    echo_config(&cfg);
    let out = PathBuf::from(matches.get_one::<String>("out_dir").unwrap());
    ensure_dir(&out)?;
    let count: usize = parse_flag(matches, "count", "count")?.unwrap_or(4);
    let clips = match matches.get_one::<String>("data") {
        Some(_) => load_dataset(&cfg, matches.get_one::<String>("data"))?,
        None => {
            let mut eval_cfg = cfg.clone();
            eval_cfg.seed = cfg.seed.wrapping_add(EVAL_SEED_OFFSET);
            eval_cfg.clips = count;
            load_dataset(&eval_cfg, None)?
        }
    };
    let mut csv = String::from("clip,l1,psnr\n");
    for (i, clip) in clips.iter().take(count).enumerate() {
        let tape = Tape::new();
        let binder = Binder::new(tape.clone(), &state.store, false);
        let mut rng = Rng::new(0);
        let recon =
            state.tokenizer.reconstruct(&binder, &clip.video, QuantMode::Deterministic, &mut rng)?;
        let db = crate::video::psnr(&clip.video, &recon.video)?;
        csv.push_str(&format!("{},{},{}\n", i, recon.l1.scalar(), db));
        if i == 0 {
            write_ppm_frames(&out, "original", &clip.video)?;
            write_ppm_frames(&out, "recon", &recon.video)?;
            crate::tensor::io::write_dt01_file(
                &out.join("recon.dt01"),
                &recon.video.shape(),
                &recon.video.values,
            )?;
        }
    }
    std::fs::write(out.join("recon.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn load_generator(path: &str) -> Result<GenTrainState> {
    GenTrainState::from_checkpoint_bytes(&read_checkpoint(path)?)
}

fn check_pair_compat(gen_cfg: &RunConfig, tok_bytes: &[u8]) -> Result<()> {
    let (n, c, _) = checkpoint_meta(tok_bytes)?;
    if n != gen_cfg.tokens || c != gen_cfg.codebook_size {
        return Err(Error::Data(format!(
            "checkpoint mismatch: generator expects n={} c={}, tokenizer provides n={n} c={c}",
            gen_cfg.tokens, gen_cfg.codebook_size
        )));
    }
    Ok(())
}

fn cmd_generate(matches: &ArgMatches) -> Result<()> {
    let cli_cfg = load_config(matches)?;
    let gen_state = load_generator(matches.get_one::<String>("checkpoint").unwrap())?;
    let tok_bytes = read_checkpoint(matches.get_one::<String>("tokenizer_checkpoint").unwrap())?;
    check_pair_compat(&gen_state.cfg, &tok_bytes)?;
    let tok_state = TrainState::from_checkpoint_bytes(&tok_bytes)?;
    let mut cfg = gen_state.cfg.clone();
    for key in ["seed", "class_id", "num_samples", "cfg_scale"] {
        let value = cli_cfg
            .to_text()
            .lines()
            .find(|l| l.starts_with(&format!("{key}=")))
            .and_then(|l| l.split_once('=').map(|(_, v)| v.to_string()))
            .expect("key exists");
        cfg.set(key, &value)?;
    }
    cfg.validate()?;
    echo_config(&cfg);
    let out = PathBuf::from(matches.get_one::<String>("out_dir").unwrap());
    ensure_dir(&out)?;

    let mut master = Rng::new(cfg.seed ^ 0x9E6E_7261_7465);
    let mut csv = String::from("sample,class_id,tokens_file\n");
    for k in 0..cfg.num_samples {
        let mut rng = master.split();
        let tokens =
            gen_state.gen.generate_class_conditional(&gen_state.store, cfg.class_id, cfg.cfg_scale, &mut rng)?;
        let ts_name = format!("sample_{k:03}.ts01");
        write_ts01_file(&out.join(&ts_name), &tokens, cfg.codebook_size as u32)?;
        let tape = Tape::new();
        let binder = Binder::new(tape.clone(), &tok_state.store, false);
        let video = tok_state.tokenizer.decode_tokens(&binder, &tokens)?;
        crate::tensor::io::write_dt01_file(&out.join(format!("sample_{k:03}.dt01")), &video.shape(), &video.values)?;
        write_ppm_frames(&out, &format!("sample_{k:03}"), &video)?;
        csv.push_str(&format!("{k},{},{ts_name}\n", cfg.class_id));
    }
    std::fs::write(out.join("samples.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_predict_frames(matches: &ArgMatches) -> Result<()> {
    let cli_cfg = load_config(matches)?;
    let gen_state = load_generator(matches.get_one::<String>("checkpoint").unwrap())?;
    if gen_state.cfg.gen_mode != GenMode::Frames {
        return Err(Error::Data(
            "predict-frames needs a generator trained with gen_mode=frames".into(),
        ));
    }
    let tok_bytes = read_checkpoint(matches.get_one::<String>("tokenizer_checkpoint").unwrap())?;
    check_pair_compat(&gen_state.cfg, &tok_bytes)?;
    let tok_state = TrainState::from_checkpoint_bytes(&tok_bytes)?;
    let mut cfg = gen_state.cfg.clone();
    for key in ["seed", "cond_frames"] {
        let value = cli_cfg
            .to_text()
            .lines()
            .find(|l| l.starts_with(&format!("{key}=")))
            .and_then(|l| l.split_once('=').map(|(_, v)| v.to_string()))
            .expect("key exists");
        cfg.set(key, &value)?;
    }
    echo_config(&cfg);
    let out = PathBuf::from(matches.get_one::<String>("out_dir").unwrap());
    ensure_dir(&out)?;

    let clips = match matches.get_one::<String>("data") {
        Some(_) => load_dataset(&tok_state.cfg, matches.get_one::<String>("data"))?,
        None => {
            let mut eval_cfg = tok_state.cfg.clone();
            eval_cfg.seed = eval_cfg.seed.wrapping_add(EVAL_SEED_OFFSET);
            eval_cfg.clips = 1;
            load_dataset(&eval_cfg, None)?
        }
    };
    let frames = tok_state.tokenizer.cfg.layout.frames;
    if cfg.cond_frames == 0 || cfg.cond_frames >= frames {
        return Err(Error::Config(format!(
            "cond_frames must be in 1..{frames}, got {}",
            cfg.cond_frames
        )));
    }
    let cond_clip = clips[0].video.first_frames(cfg.cond_frames)?;
    let mut rng = Rng::new(cfg.seed ^ 0x70FE_D1C7);
    let (video, cond_tokens, sampled) = generator::predict_frames(
        &tok_state.tokenizer,
        &tok_state.store,
        &gen_state.gen,
        &gen_state.store,
        &cond_clip,
        &mut rng,
    )?;
    write_ts01_file(&out.join("cond.ts01"), &cond_tokens, cfg.codebook_size as u32)?;
    write_ts01_file(&out.join("predicted.ts01"), &sampled, cfg.codebook_size as u32)?;
    crate::tensor::io::write_dt01_file(&out.join("predicted.dt01"), &video.shape(), &video.values)?;
    write_ppm_frames(&out, "cond", &cond_clip)?;
    write_ppm_frames(&out, "predicted", &video)?;
    let csv = format!("cond_frames,predicted_frames\n{},{}\n", cfg.cond_frames, video.frames);
    std::fs::write(out.join("predict.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn read_corpus(dir: &Path) -> Result<Vec<(Vec<u32>, usize)>> {
    let manifest = dir.join("manifest.tsv");
    let text = std::fs::read_to_string(&manifest)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", manifest.display())))?;
    let mut corpus = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, class) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("corpus manifest line {} has no tab", lineno + 1)))?;
        let class_id: usize = class
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("corpus manifest line {}: bad class {class:?}", lineno + 1)))?;
        let (tokens, _c) = read_ts01_file(&dir.join(name))?;
        corpus.push((tokens, class_id));
    }
    Ok(corpus)
}

fn cmd_analyze(task_name: &str, matches: &ArgMatches) -> Result<()> {
    let cfg = load_config(matches)?;
    let out = PathBuf::from(matches.get_one::<String>("out_dir").unwrap());
    ensure_dir(&out)?;

    let tok_state = match matches.get_one::<String>("checkpoint") {
        Some(path) => Some(TrainState::from_checkpoint_bytes(&read_checkpoint(path)?)?),
        None => None,
    };
    let probe_count: usize = parse_flag(matches, "probe_videos", "probe-videos")?.unwrap_or(10);
    let videos: Vec<VideoTensor> = match &tok_state {
        Some(state) => {
            let mut probe_cfg = state.cfg.clone();
            probe_cfg.seed = probe_cfg.seed.wrapping_add(PROBE_SEED_OFFSET);
            probe_cfg.clips = probe_count;
            load_dataset(&probe_cfg, None)?.into_iter().map(|c| c.video).collect()
        }
        None => Vec::new(),
    };
    let corpus = match matches.get_one::<String>("corpus") {
        Some(dir) => read_corpus(Path::new(dir))?,
        None => Vec::new(),
    };
    echo_config(&cfg);

    let order: usize = match matches.try_get_one::<String>("order") {
        Ok(Some(raw)) => raw
            .parse()
            .map_err(|_| Error::Config(format!("bad value {raw:?} for --order")))?,
        _ => cfg.ngram_order,
    };
    let threshold: Option<u64> = match matches.try_get_one::<String>("threshold") {
        Ok(Some(raw)) => Some(
            raw.parse()
                .map_err(|_| Error::Config(format!("bad value {raw:?} for --threshold")))?,
        ),
        _ => None,
    };
    let token_index: Option<usize> = match matches.try_get_one::<String>("token_index") {
        Ok(Some(raw)) => Some(
            raw.parse()
                .map_err(|_| Error::Config(format!("bad value {raw:?} for --token-index")))?,
        ),
        _ => None,
    };
    let levels: Vec<usize> = match matches.try_get_one::<String>("levels") {
        Ok(Some(raw)) => {
            let mut levels = Vec::new();
            for part in raw.split(',') {
                levels.push(
                    part.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad level {part:?} in --levels")))?,
                );
            }
            levels
        }
        _ => vec![1, 2, 4, 8, 16],
    };

    let opts = AnalyzeOpts { token_index, order, threshold, levels, seed: cfg.seed };
    let classes = tok_state.as_ref().map(|s| s.cfg.classes).unwrap_or(cfg.classes);
    let ctx = AnalyzeContext {
        tokenizer: tok_state.as_ref().map(|s| (&s.tokenizer, &s.store)),
        videos: &videos,
        corpus: &corpus,
        classes,
        out_dir: &out,
        opts,
    };
    let task = analysis::find_task(task_name)?;
    let written = task.run(&ctx)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_grad_check(matches: &ArgMatches) -> Result<()> {
    let cfg = load_config(matches)?;
    echo_config(&cfg);
    let mut failed = 0usize;
    for (name, err) in gradcheck::run_operator_checks(20, cfg.seed)? {
        let ok = err < 1e-4;
        println!("{} {name} max_rel_err {err:.3e}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed += 1;
        }
    }
    let full = full_loss_check()?;
    let ok = full < 1e-4;
    println!("{} full_tokenizer_prior_loss max_rel_err {full:.3e}", if ok { "PASS" } else { "FAIL" });
    if !ok {
        failed += 1;
    }
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}

/// Finite-difference check of the combined tokenizer + prior loss on a
/// 2x8x8 clip, with the identity quantization surrogate and the step-0
/// (teacher-forced) schedule.
pub fn full_loss_check() -> Result<f64> {
    let mut cfg = RunConfig::default();
    for (key, value) in [
        ("frames", "2"),
        ("height", "8"),
        ("width", "8"),
        ("embed_dim", "16"),
        ("heads", "2"),
        ("enc_depth", "1"),
        ("dec_depth", "1"),
        ("tokens", "4"),
        ("code_dim", "4"),
        ("codebook_size", "8"),
        ("prior_dim", "16"),
        ("prior_depth", "1"),
        ("prior_heads", "2"),
    ] {
        cfg.set(key, value)?;
    }
    let state = TrainState::new(cfg.clone())?;
    let layout = cfg.layout()?;
    let dataset = synth_dataset(41, 2, 1, &layout)?;
    let video = &dataset[0].video;
    let x0 = crate::tensor::Buf::new(video.shape(), video.values.clone());
    let store = state.store;
    let tokenizer = state.tokenizer;
    let prior = state.prior;
    let sched = cfg.sample_schedule();
    let alpha = cfg.alpha;
    gradcheck::grad_check(
        &move |tape: &Tape, x: &crate::tensor::Tensor| {
            let binder = Binder::new(tape.clone(), &store, false);
            let mut rng = Rng::new(0);
            let graph = clip_loss(
                &tokenizer,
                &prior,
                &binder,
                x,
                QuantMode::Bypass,
                0,
                &sched,
                alpha,
                &mut rng,
            )?;
            Ok(graph.total)
        },
        &x0,
        1e-5,
    )
}

/// Entry point: parse `args` and dispatch.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = build_command().try_get_matches_from(args).map_err(|e| {
        if matches!(
            e.kind(),
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
        ) {
            let _ = e.print();
            std::process::exit(0);
        }
        Error::Config(e.to_string())
    })?;
    match matches.subcommand() {
        Some(("synth-data", m)) => cmd_synth_data(m),
        Some(("train-tokenizer", m)) => cmd_train_tokenizer(m),
        Some(("train-generator", m)) => cmd_train_generator(m),
        Some(("reconstruct", m)) => cmd_reconstruct(m),
        Some(("generate", m)) => cmd_generate(m),
        Some(("predict-frames", m)) => cmd_predict_frames(m),
        Some(("analyze", m)) => {
            let (task, sub) = m.subcommand().expect("analyze task required");
            cmd_analyze(task, sub)
        }
        Some(("grad-check", m)) => cmd_grad_check(m),
        _ => unreachable!("subcommand required"),
    }
}
