//! Toy objective metrics and the fusion/training-strategy ablation harness.

use std::fmt::Write as _;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Model, ModelConfig, Prompt};
use crate::caption::{Attribute, Caption};
use crate::data::{caption_from_params, gen_utterance, mix_seed, sample_text, tokenize, Corpus, SpeakerParams, N_MELS};
use crate::error::{invalid, CastError, Result};
use crate::flow::{fm_loss, interpolate, FlowStep, GuidanceScale, DEFAULT_ODE_STEPS};
use crate::inference::{synthesize, RequestPrompt, SynthesisRequest};
use crate::mat::MelGrid;
use crate::oracle::estimate_attributes;
use crate::params::ParamStore;
use crate::timbre::{cosine, SpeechEncoder, DEFAULT_CHUNK_SIZE};
use crate::trainer::{run_pipeline, TrainConfig, TrainMode, TrainState};

/// Width of the evaluation speech encoder, shared with the default model.
pub const EVAL_D_TIMBRE: usize = 32;
const RECON_TAUS: [f64; 3] = [0.25, 0.5, 0.75];

fn eval_encoder() -> &'static (ParamStore<f64>, SpeechEncoder) {
    static ENC: OnceLock<(ParamStore<f64>, SpeechEncoder)> = OnceLock::new();
    ENC.get_or_init(|| {
        let (store, enc) = SpeechEncoder::standalone(N_MELS, EVAL_D_TIMBRE, DEFAULT_CHUNK_SIZE);
        (store.cast(), enc)
    })
}

/// Cosine similarity of the mean-pooled speech-encoder outputs of two grids.
pub fn timbre_similarity(a: &MelGrid, b: &MelGrid) -> Result<f64> {
    let (store, enc) = eval_encoder();
    let ea = enc.encode::<f64>(store, a)?.mean_pool();
    let eb = enc.encode::<f64>(store, b)?.mean_pool();
    cosine(&ea, &eb).ok_or_else(|| CastError::UndefinedSimilarity("zero-norm timbre embedding".into()))
}

/// Per-attribute correctness of a generated grid against a caption.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StyleScore {
    /// Predicted level equals the caption level or an adjacent one.
    pub relaxed: [bool; 4],
    pub exact: [bool; 4],
    pub predicted: Caption,
}

pub fn style_accuracy(generated: &MelGrid, caption: &Caption) -> Result<StyleScore> {
    if generated.rows() == 0 || generated.cols() != N_MELS {
        return invalid(format!("style scoring needs a nonempty {N_MELS}-bin grid"));
    }
    let predicted = estimate_attributes(generated).caption();
    let diff = Attribute::ALL.map(|a| predicted.level(a).abs_diff(caption.level(a)));
    Ok(StyleScore { relaxed: diff.map(|d| d <= 1), exact: diff.map(|d| d == 0), predicted })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_requests: usize,
    pub cfg_scale: f64,
    pub num_steps: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_requests: 50, cfg_scale: 3.0, num_steps: DEFAULT_ODE_STEPS, seed: 1234 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_requests == 0 {
            errs.push("n_requests must be positive".to_string());
        }
        if self.num_steps == 0 {
            errs.push("num_steps must be positive".to_string());
        }
        if let Err(e) = GuidanceScale::new(self.cfg_scale) {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CastError::Validation(errs))
        }
    }
}

/// One evaluation request: a known speaker, a prompt utterance and a held-out
/// target text with its ground-truth rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub speaker: SpeakerParams,
    pub caption: Caption,
    pub prompt_text: String,
    pub prompt_mel: MelGrid,
    pub target_text: String,
    pub reference: MelGrid,
    pub seed: u64,
}

/// `n` cases cycling over `speakers` with freshly drawn texts.
pub fn build_suite(speakers: &[SpeakerParams], n: usize, seed: u64) -> Result<Vec<EvalCase>> {
    if speakers.is_empty() {
        return invalid("evaluation needs at least one speaker");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xe7a1, 0));
    (0..n)
        .map(|i| {
            let speaker = speakers[i % speakers.len()];
            let prompt_text = sample_text(&mut rng);
            let target_text = sample_text(&mut rng);
            let prompt_mel = gen_utterance(&speaker, &prompt_text, mix_seed(seed, i as u64, 1))?.mel;
            let reference = gen_utterance(&speaker, &target_text, mix_seed(seed, i as u64, 2))?.mel;
            Ok(EvalCase {
                speaker,
                caption: caption_from_params(&speaker),
                prompt_text,
                prompt_mel,
                target_text,
                reference,
                seed: mix_seed(seed, i as u64, 3),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Speech,
    Text,
}

/// Metrics for one prompt modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: PromptKind,
    /// Mean similarity to the prompt (speech) or to the ground truth (text).
    pub timbre_sim: f64,
    /// Relaxed accuracy per attribute in caption order.
    pub style_acc: [f64; 4],
    pub style_macro: f64,
    pub style_exact_macro: f64,
    /// Fraction of generations whose recovered pitch level is exact.
    pub pitch_acc: f64,
    /// Teacher-forced velocity error on the ground-truth targets.
    pub recon_mse: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub speech: EvalReport,
    pub text: EvalReport,
}

fn recon_mse(model: &Model, case: &EvalCase, prompt: Prompt<'_, f32>) -> Result<f64> {
    let timbre = model.encode_prompt(prompt)?;
    let chars = tokenize(&case.target_text)?;
    let x0 = &case.reference;
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed ^ 0x4ec0);
    let mut total = 0.0;
    for &t in &RECON_TAUS {
        let noise = (0..x0.rows() * x0.cols()).map(|_| rand::Rng::sample(&mut rng, rand_distr::StandardNormal)).collect();
        let x1 = MelGrid::from_vec(x0.rows(), x0.cols(), noise)?;
        let tau = FlowStep::new(t)?;
        let x_tau = interpolate(x0, &x1, tau)?;
        let v = model.velocity(&x_tau, &chars, timbre.as_ref(), tau, false)?;
        total += fm_loss(&v, x0, &x1, &vec![true; x0.rows()])? as f64;
    }
    Ok(total / RECON_TAUS.len() as f64)
}

/// Synthesizes every case with both prompt modalities and scores the results.
pub fn evaluate(model: &Model, suite: &[EvalCase], cfg: &EvalConfig) -> Result<EvalSummary> {
    cfg.validate()?;
    if suite.is_empty() {
        return invalid("empty evaluation suite");
    }
    let guidance = GuidanceScale::new(cfg.cfg_scale)?;
    let mut reports = Vec::new();
    for kind in [PromptKind::Speech, PromptKind::Text] {
        let mut sim = 0.0;
        let mut relaxed = [0usize; 4];
        let mut exact = [0usize; 4];
        let mut pitch = 0usize;
        let mut recon = 0.0;
        for case in suite {
            let prompt = match kind {
                PromptKind::Speech => {
                    RequestPrompt::Speech { mel: case.prompt_mel.clone(), ref_text: case.prompt_text.clone() }
                }
                PromptKind::Text => RequestPrompt::Caption(case.caption),
            };
            let req = SynthesisRequest {
                target_text: case.target_text.clone(),
                prompt,
                guidance,
                num_steps: cfg.num_steps,
                seed: case.seed,
            };
            let out = synthesize(model, &req)?.mel;
            let anchor = match kind {
                PromptKind::Speech => &case.prompt_mel,
                PromptKind::Text => &case.reference,
            };
            sim += timbre_similarity(anchor, &out)?;
            let score = style_accuracy(&out, &case.caption)?;
            for i in 0..4 {
                relaxed[i] += score.relaxed[i] as usize;
                exact[i] += score.exact[i] as usize;
            }
            pitch += (score.predicted.level(Attribute::Pitch) == case.speaker.pitch_idx) as usize;
            recon += match kind {
                PromptKind::Speech => recon_mse(model, case, Prompt::Speech(&case.prompt_mel))?,
                PromptKind::Text => recon_mse(model, case, Prompt::Caption(&case.caption))?,
            };
        }
        let n = suite.len() as f64;
        let style_acc = relaxed.map(|c| c as f64 / n);
        let exact_acc = exact.map(|c| c as f64 / n);
        reports.push(EvalReport {
            kind,
            timbre_sim: sim / n,
            style_acc,
            style_macro: style_acc.iter().sum::<f64>() / 4.0,
            style_exact_macro: exact_acc.iter().sum::<f64>() / 4.0,
            pitch_acc: pitch as f64 / n,
            recon_mse: recon / n,
            n_samples: suite.len(),
        });
    }
    let text = reports.pop().expect("two reports");
    let speech = reports.pop().expect("two reports");
    Ok(EvalSummary { speech, text })
}

/// One ablation arm: an architecture and a training strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
    pub mode: TrainMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    /// Optimizer steps the variant received.
    pub steps: usize,
    pub result: std::result::Result<EvalSummary, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_COLUMNS: [&str; 8] = [
    "variant",
    "steps",
    "speech_timbre_sim",
    "speech_style_acc",
    "speech_recon_mse",
    "text_timbre_sim",
    "text_style_acc",
    "text_recon_mse",
];

impl AblationTable {
    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.name.clone(), r.steps.to_string()];
                match &r.result {
                    Ok(s) => {
                        for rep in [&s.speech, &s.text] {
                            cells.push(format!("{:.4}", rep.timbre_sim));
                            cells.push(format!("{:.4}", rep.style_macro));
                            cells.push(format!("{:.4}", rep.recon_mse));
                        }
                    }
                    Err(_) => cells.extend(std::iter::repeat_n("FAILED".to_string(), 6)),
                }
                cells
            })
            .collect()
    }

    /// Tab-separated, one header line.
    pub fn to_tsv(&self) -> String {
        let mut out = ABLATION_COLUMNS.join("\t");
        out.push('\n');
        for row in self.cells() {
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    /// Aligned columns for humans.
    pub fn render(&self) -> String {
        let cells = self.cells();
        let widths: Vec<usize> = (0..ABLATION_COLUMNS.len())
            .map(|c| cells.iter().map(|r| r[c].len()).chain([ABLATION_COLUMNS[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, row: &[&str]| {
            let parts: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &ABLATION_COLUMNS);
        for row in &cells {
            line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        for r in &self.rows {
            if let Err(e) = &r.result {
                let _ = writeln!(out, "# {} failed: {e}", r.name);
            }
        }
        out
    }
}

/// Trains and evaluates every variant with the same corpus, budget, seeds and
/// request suite. Training failures become `FAILED` rows.
pub fn run_ablation(
    variants: &[Variant],
    corpus: &Corpus,
    train: &TrainConfig,
    eval: &EvalConfig,
    seed: u64,
) -> Result<AblationTable> {
    if variants.len() < 2 {
        return invalid("an ablation needs at least two variants");
    }
    train.validate()?;
    eval.validate()?;
    let suite = build_suite(&corpus.speakers, eval.n_requests, eval.seed)?;
    let mut rows = Vec::new();
    for v in variants {
        let cfg = TrainConfig { mode: v.mode, ..train.clone() };
        let steps = cfg.stages()?.iter().map(|s| s.steps).sum();
        let result = (|| {
            let mut state = TrainState::new(Model::new(v.model.clone(), seed)?);
            run_pipeline(&mut state, corpus, &cfg, seed, &mut std::io::sink(), |_, _, _| Ok(()))?;
            evaluate(&state.model, &suite, eval)
        })();
        if let Err(e) = &result {
            log::warn!("variant {} failed: {e}", v.name);
        }
        rows.push(AblationRow { name: v.name.clone(), steps, result: result.map_err(|e| e.to_string()) });
    }
    Ok(AblationTable { rows })
}
