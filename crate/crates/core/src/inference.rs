//! End-to-end synthesis: duration estimation, condition preparation and
//! classifier-free-guided Euler sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::{Model, Prompt};
use crate::caption::{Attribute, Caption};
use crate::data::{char_count, frames_per_char, tokenize, BASE_FRAMES};
use crate::error::{invalid, Result};
use crate::flow::{cfg_combine, euler_sample, GuidanceScale, DEFAULT_ODE_STEPS};
use crate::mat::{Mat, MelGrid};
use crate::timbre::TimbreSeq;

/// Speaking-rate midpoints of the slow/normal/fast caption levels.
pub const RATE_MIDPOINTS: [f64; 3] = [0.65, 1.0, 1.6];

/// `round(ref_frames · len(gen) / len(ref))`, at least one frame. Ties round
/// away from zero.
pub fn duration_from_speech(ref_text: &str, ref_frames: usize, gen_text: &str) -> Result<usize> {
    let (r, g) = (char_count(ref_text), char_count(gen_text));
    if r == 0 {
        return invalid("reference transcription must be nonempty");
    }
    if ref_frames == 0 {
        return invalid("reference must have at least one frame");
    }
    if g == 0 {
        return invalid("target text must be nonempty");
    }
    // exact integer form of round-half-up for positive operands
    let n = (2 * ref_frames * g + r) / (2 * r);
    Ok(n.max(1))
}

/// `len(gen) · round(base_frames / midpoint(rate level))`.
pub fn duration_from_caption(caption: &Caption, gen_text: &str) -> Result<usize> {
    let g = char_count(gen_text);
    if g == 0 {
        return invalid("target text must be nonempty");
    }
    let mid = RATE_MIDPOINTS[caption.level(Attribute::Rate) as usize];
    debug_assert_eq!(BASE_FRAMES, 4);
    Ok(g * frames_per_char(mid))
}

/// The prompt of a request: a speech reference with its transcription, or a
/// caption.
#[derive(Clone, Debug, PartialEq)]
pub enum RequestPrompt {
    Speech { mel: MelGrid, ref_text: String },
    Caption(Caption),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisRequest {
    pub target_text: String,
    pub prompt: RequestPrompt,
    pub guidance: GuidanceScale,
    pub num_steps: usize,
    pub seed: u64,
}

impl SynthesisRequest {
    pub fn new(target_text: impl Into<String>, prompt: RequestPrompt) -> Self {
        Self {
            target_text: target_text.into(),
            prompt,
            guidance: GuidanceScale::default(),
            num_steps: DEFAULT_ODE_STEPS,
            seed: 0,
        }
    }

    pub fn duration(&self) -> Result<usize> {
        match &self.prompt {
            RequestPrompt::Speech { mel, ref_text } => duration_from_speech(ref_text, mel.rows(), &self.target_text),
            RequestPrompt::Caption(c) => duration_from_caption(c, &self.target_text),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub mel: MelGrid,
    /// Backbone forward evaluations consumed by the sampler.
    pub nfe: usize,
}

/// Everything the sampler needs, identical for both prompt modalities.
struct Prepared {
    cond: Mat<f32>,
    timbre: TimbreSeq,
    x1: MelGrid,
}

fn prepare(model: &Model, req: &SynthesisRequest) -> Result<Prepared> {
    if req.target_text.is_empty() {
        return invalid("target text must be nonempty");
    }
    if req.num_steps == 0 {
        return invalid("at least one sampling step is required");
    }
    let frames = req.duration()?;
    let chars = tokenize(&req.target_text)?;
    let (cond, _) = model.char_encoder().forward(&model.params, &chars, frames)?;
    let prompt = match &req.prompt {
        RequestPrompt::Speech { mel, .. } => Prompt::Speech(mel),
        RequestPrompt::Caption(c) => Prompt::Caption(c),
    };
    let timbre = model.encode_prompt(prompt)?.expect("a prompt was supplied");
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let m = model.config().n_mels;
    let noise = (0..frames * m).map(|_| rng.sample(StandardNormal)).collect();
    let x1 = MelGrid::from_vec(frames, m, noise)?;
    Ok(Prepared { cond, timbre, x1 })
}

/// Generates the target span for `req`.
pub fn synthesize(model: &Model, req: &SynthesisRequest) -> Result<Synthesis> {
    let p = prepare(model, req)?;
    let null_cond = model.null_cond(p.x1.rows());
    let w = req.guidance;
    let mut nfe = 0;
    let mel = euler_sample(
        |x, tau| {
            let v_cond = model.backbone_forward(x, &p.cond, Some(&p.timbre), tau, false)?;
            nfe += 1;
            if w.is_conditional_only() {
                return Ok(v_cond);
            }
            let v_uncond = model.backbone_forward(x, &null_cond, None, tau, true)?;
            nfe += 1;
            cfg_combine(&v_uncond, &v_cond, w)
        },
        &p.x1,
        req.num_steps,
    )?;
    Ok(Synthesis { mel, nfe })
}

/// A sampler that only ever evaluates the conditional branch.
pub fn synthesize_conditional(model: &Model, req: &SynthesisRequest) -> Result<MelGrid> {
    let p = prepare(model, req)?;
    euler_sample(|x, tau| model.backbone_forward(x, &p.cond, Some(&p.timbre), tau, false), &p.x1, req.num_steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BlockConfig, Fusion, ModelConfig};
    use crate::data::{caption_from_params, gen_utterance, sample_text, SpeakerParams};
    use rand::Rng;

    #[test]
    fn speech_duration_table() {
        assert_eq!(duration_from_speech("abcde", 20, "abcdeabcde").unwrap(), 40);
        assert_eq!(duration_from_speech("abc d", 17, "abc d").unwrap(), 17);
        assert_eq!(duration_from_speech("abc", 10, "a").unwrap(), 3);
        assert_eq!(duration_from_speech("ab", 5, "a").unwrap(), 3); // 2.5 rounds up
        assert_eq!(duration_from_speech("abcd", 1, "a").unwrap(), 1); // clamp
        assert!(duration_from_speech("abc", 10, "").is_err());
    }

    #[test]
    fn caption_duration_rules() {
        let c = |rate| Caption::new(1, 1, rate, 1).unwrap();
        assert_eq!(duration_from_caption(&c(1), "abcde").unwrap(), 20);
        assert_eq!(duration_from_caption(&c(0), "abcde").unwrap(), 30);
        assert_eq!(duration_from_caption(&c(2), "abcde").unwrap(), 15);
        assert!(duration_from_caption(&c(2), "ab cd").unwrap() < duration_from_caption(&c(0), "ab cd").unwrap());
    }

    #[test]
    fn caption_duration_tracks_generator() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for i in 0..100 {
            let spk = SpeakerParams::sample(&mut rng);
            let text = sample_text(&mut rng);
            let truth = gen_utterance(&spk, &text, i).unwrap().mel.rows() as f64;
            let est = duration_from_caption(&caption_from_params(&spk), &text).unwrap() as f64;
            assert!((est - truth).abs() <= 0.25 * truth, "{spk:?}: {est} vs {truth}");
        }
    }

    fn model() -> Model {
        let cfg = ModelConfig {
            block: BlockConfig { n_layers: 2, n_heads: 2, d_model: 16, d_timbre: 8, fusion: Fusion::Ca },
            n_conv: 1,
            ..ModelConfig::default()
        };
        let mut m = Model::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ids: Vec<_> = m.params.ids().collect();
        for id in ids {
            if !m.params.entry(id).frozen {
                m.params.get_mut(id).iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
            }
        }
        m
    }

    #[test]
    fn nfe_accounting_and_cfg_collapse() {
        let model = model();
        let spk = SpeakerParams::new(1, 0.2, 1.0, 0.5).unwrap();
        let reference = gen_utterance(&spk, "abc de", 0).unwrap();
        let mut req = SynthesisRequest::new(
            "bad",
            RequestPrompt::Speech { mel: reference.mel.clone(), ref_text: "abc de".into() },
        );
        req.num_steps = 5;
        req.seed = 4;
        let guided = synthesize(&model, &req).unwrap();
        assert_eq!(guided.nfe, 10);
        assert_eq!(guided.mel.rows(), 12);
        req.guidance = GuidanceScale::new(1.0).unwrap();
        let collapsed = synthesize(&model, &req).unwrap();
        assert_eq!(collapsed.nfe, 5);
        assert_eq!(collapsed.mel, synthesize_conditional(&model, &req).unwrap());
        assert_ne!(collapsed.mel, guided.mel);
        // determinism
        assert_eq!(synthesize(&model, &req).unwrap(), collapsed);
    }

    #[test]
    fn caption_requests_use_the_same_sampler() {
        let model = model();
        let mut req = SynthesisRequest::new("ab ab", RequestPrompt::Caption(Caption::new(0, 2, 2, 1).unwrap()));
        req.num_steps = 3;
        let out = synthesize(&model, &req).unwrap();
        assert_eq!(out.mel.rows(), 15);
        assert_eq!(out.nfe, 6);
        assert!(out.mel.is_finite());
    }
}
