use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cast_core::backbone::Model;
use cast_core::config::RunConfig;
use cast_core::data::{build_corpus, gen_utterance, Corpus};
use cast_core::eval::{build_suite, evaluate, run_ablation};
use cast_core::inference::{synthesize, RequestPrompt, SynthesisRequest};
use cast_core::io::{load_corpus, load_mel, save_corpus, save_mel, Checkpoint, MelHeader};
use cast_core::trainer::{run_pipeline, run_stage, StageId, TrainMode, TrainState};
use cast_core::{Caption, GuidanceScale};

#[derive(Parser)]
#[command(name = "cast-tts", version, about = "Toy flow-matching TTS with unified speech/text timbre prompts")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed (model init and training), or the sampling seed for `synth`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides train.scale_factor.
    #[arg(long, global = true)]
    scale_factor: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        /// Corpus file (default: paths.corpus).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one stage or the whole pipeline.
    Train {
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
        /// Checkpoint to resume from (required for stages 2 and 3).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output directory (default: paths.out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize one utterance.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target text over the toy alphabet.
        #[arg(long)]
        text: String,
        /// Caption prompt, e.g. "gender=1,pitch=2,rate=0,expressiveness=1".
        #[arg(long, conflicts_with_all = ["prompt_mel", "prompt_speaker"])]
        caption: Option<String>,
        /// Speech prompt stored as a mel file.
        #[arg(long, requires = "prompt_text")]
        prompt_mel: Option<PathBuf>,
        /// Speech prompt rendered from corpus speaker N.
        #[arg(long, requires = "prompt_text", conflicts_with = "prompt_mel")]
        prompt_speaker: Option<usize>,
        /// Transcription of the speech prompt.
        #[arg(long)]
        prompt_text: Option<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 3.0)]
        cfg_scale: f64,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the held-out request suite.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// JSON report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and compare the configured variants.
    Ablate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory (default: paths.out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    Base,
    All,
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(f) = g.scale_factor {
        cfg.train.scale_factor = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn corpus_at(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<Corpus> {
    let path = flag.as_ref().unwrap_or(&cfg.paths.corpus);
    if !path.exists() {
        bail!("corpus {} does not exist; run gen-data first", path.display());
    }
    load_corpus(path).with_context(|| format!("loading {}", path.display()))
}

fn load_state(path: &Path) -> Result<(TrainState, u64)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let seed = ck.seed;
    Ok((ck.into_state()?, seed))
}

fn stage_file(dir: &Path, stage: StageId) -> PathBuf {
    dir.join(format!("stage{stage}.ckpt"))
}

fn cmd_train(
    cfg: &RunConfig,
    seed: u64,
    stage: StageArg,
    checkpoint: Option<PathBuf>,
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let corpus = corpus_at(cfg, &corpus)?;
    let out = out.unwrap_or_else(|| cfg.paths.out_dir.clone());
    fs::create_dir_all(&out)?;
    let mut log = BufWriter::new(File::create(out.join("train_log.jsonl"))?);
    let (mut state, seed) = match &checkpoint {
        Some(p) => load_state(p)?,
        None => (TrainState::new(Model::new(cfg.model.clone(), seed)?), seed),
    };
    let single = match stage {
        StageArg::All => None,
        StageArg::One => Some(StageId::One),
        StageArg::Two => Some(StageId::Two),
        StageArg::Three => Some(StageId::Three),
        StageArg::Base => Some(StageId::Base),
    };
    let save = |state: &TrainState, id: StageId| -> cast_core::Result<()> {
        let path = stage_file(&out, id);
        Checkpoint::from_state(state, seed).save(&path)?;
        log::info!("wrote {}", path.display());
        Ok(())
    };
    match single {
        Some(id) => {
            let sc = cfg.train.stage(id)?;
            let report = run_stage(&mut state, &sc, &corpus, &cfg.train, seed, &mut log)?;
            let (first, last) = report.smoothed(10);
            log::info!("stage {id}: {} steps, loss {first:.4} -> {last:.4}", sc.steps);
            save(&state, id)?;
        }
        None => {
            if checkpoint.is_some() {
                bail!("--checkpoint only applies to a single --stage");
            }
            run_pipeline(&mut state, &corpus, &cfg.train, seed, &mut log, |s, sc, report| {
                let (first, last) = report.smoothed(10);
                log::info!("stage {}: {} steps, loss {first:.4} -> {last:.4}", sc.stage, sc.steps);
                save(s, sc.stage)
            })?;
            let last = *state.history.last().expect("at least one stage ran");
            fs::copy(stage_file(&out, last), out.join("final.ckpt"))?;
        }
    }
    log.flush()?;
    println!("{}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let seed = cli.global.seed.unwrap_or(cfg.seed);
    match cli.cmd {
        Command::GenData { out } => {
            let path = out.unwrap_or_else(|| cfg.paths.corpus.clone());
            let c = build_corpus(cfg.corpus.n_speakers, cfg.corpus.n_texts, cfg.corpus.seed)?;
            save_corpus(&c, &path)?;
            log::info!("{} speech pairs, {} text pairs", c.speech.len(), c.text.len());
            println!("{}", path.display());
        }
        Command::Train { stage, checkpoint, corpus, out } => cmd_train(&cfg, seed, stage, checkpoint, corpus, out)?,
        Command::Synth {
            checkpoint,
            text,
            caption,
            prompt_mel,
            prompt_speaker,
            prompt_text,
            corpus,
            cfg_scale,
            steps,
            out,
        } => {
            let (state, _) = load_state(&checkpoint)?;
            let prompt = match (caption, prompt_mel, prompt_speaker) {
                (Some(c), _, _) => RequestPrompt::Caption(c.parse::<Caption>()?),
                (None, Some(p), _) => {
                    RequestPrompt::Speech { mel: load_mel(&p)?, ref_text: prompt_text.expect("required by clap") }
                }
                (None, None, Some(i)) => {
                    let c = corpus_at(&cfg, &corpus)?;
                    let spk = c.speakers.get(i).with_context(|| format!("corpus has {} speakers", c.speakers.len()))?;
                    let ref_text = prompt_text.expect("required by clap");
                    RequestPrompt::Speech { mel: gen_utterance(spk, &ref_text, seed)?.mel, ref_text }
                }
                _ => bail!("give --caption, --prompt-mel or --prompt-speaker"),
            };
            let req = SynthesisRequest {
                target_text: text,
                prompt,
                guidance: GuidanceScale::new(cfg_scale)?,
                num_steps: steps,
                seed,
            };
            let s = synthesize(&state.model, &req)?;
            let header =
                MelHeader { frames: s.mel.rows(), bins: s.mel.cols(), seed, cfg_scale, num_steps: steps };
            save_mel(&s.mel, &header, &out)?;
            log::info!("{} frames, {} evaluations", s.mel.rows(), s.nfe);
            println!("{}", out.display());
        }
        Command::Eval { checkpoint, corpus, cfg_scale, steps, out } => {
            let (state, _) = load_state(&checkpoint)?;
            let c = corpus_at(&cfg, &corpus)?;
            let mut ec = cfg.eval.clone();
            ec.cfg_scale = cfg_scale.unwrap_or(ec.cfg_scale);
            ec.num_steps = steps.unwrap_or(ec.num_steps);
            let suite = build_suite(&c.speakers, ec.n_requests, ec.seed)?;
            let summary = evaluate(&state.model, &suite, &ec)?;
            fs::write(&out, serde_json::to_string_pretty(&summary)? + "\n")?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Ablate { corpus, cfg_scale, steps, out } => {
            let c = corpus_at(&cfg, &corpus)?;
            let mut ec = cfg.eval.clone();
            ec.cfg_scale = cfg_scale.unwrap_or(ec.cfg_scale);
            ec.num_steps = steps.unwrap_or(ec.num_steps);
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.clone());
            fs::create_dir_all(&out)?;
            for v in &cfg.ablation.variants {
                let mode = match v.mode {
                    TrainMode::Staged => "staged",
                    TrainMode::Base => "base",
                };
                log::info!("variant {} ({}, {mode})", v.name, v.model.block.fusion);
            }
            let table = run_ablation(&cfg.ablation.variants, &c, &cfg.train, &ec, seed)?;
            fs::write(out.join("ablation.tsv"), table.to_tsv())?;
            let rendered = table.render();
            fs::write(out.join("ablation.txt"), &rendered)?;
            print!("{rendered}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CAST_LOG_LEVEL", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
