//! Synthetic corpus with ground-truth timbre.
//!
//! Every frame is `tilt line + a(t) * (fundamental bump + character bump) + noise`:
//!
//! * the fundamental bump sits at bin `1 + pitch_idx` in every frame,
//! * each letter owns a bump at a fixed bin, shifted by the same pitch offset,
//! * `tilt` adds a straight spectral slope across the bins,
//! * `a(t)` is a slow sinusoidal amplitude modulation whose depth grows with
//!   expressiveness,
//! * each letter lasts `round(BASE_FRAMES / rate)` frames.
//!
//! Because every attribute has a separate, text-independent footprint, the
//! inverter in [`crate::oracle`] can recover it from a grid alone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::caption::Caption;
use crate::error::{invalid, CastError, Result};
use crate::mat::MelGrid;

pub const N_MELS: usize = 16;
pub const BASE_FRAMES: usize = 4;
pub const ALPHABET: &str = "abcdefgh";
pub const FILLER_ID: u8 = 0;
pub const SPACE_ID: u8 = 1;
/// Filler, space and the letters.
pub const VOCAB_SIZE: usize = 2 + 8;

pub const F0_BASE_BIN: usize = 1;
pub const CHAR_BASE_BIN: usize = 6;
pub const BIN_SHIFT: usize = 1;
pub const BUMP_WIDTH: f64 = 0.7;
pub const F0_AMP: f64 = 1.5;
pub const CHAR_AMP: f64 = 1.0;
pub const MOD_DEPTH: f64 = 0.6;
pub const MOD_PERIOD: f64 = 8.0;
pub const NOISE_STD: f64 = 0.05;

/// Maps a character to its token id.
pub fn char_id(c: char) -> Result<u8> {
    if c == ' ' {
        return Ok(SPACE_ID);
    }
    match ALPHABET.find(c) {
        Some(i) => Ok(2 + i as u8),
        None => invalid(format!("character {c:?} is outside the toy alphabet")),
    }
}

pub fn tokenize(text: &str) -> Result<Vec<u8>> {
    if text.is_empty() {
        return invalid("text must be nonempty");
    }
    text.chars().map(char_id).collect()
}

/// Number of characters (tokens) in `text`.
pub fn char_count(text: &str) -> usize {
    text.chars().count()
}

/// Ground-truth timbre of a synthetic speaker.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerParams {
    pub pitch_idx: u8,
    pub tilt: f32,
    pub rate: f32,
    pub expressiveness: f32,
}

impl SpeakerParams {
    pub fn new(pitch_idx: u8, tilt: f32, rate: f32, expressiveness: f32) -> Result<Self> {
        let p = Self { pitch_idx, tilt, rate, expressiveness };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.pitch_idx > 2 {
            bad.push(format!("pitch_idx {} not in 0..=2", self.pitch_idx));
        }
        if !(-1.0..=1.0).contains(&self.tilt) {
            bad.push(format!("tilt {} not in [-1, 1]", self.tilt));
        }
        if !(0.5..=2.0).contains(&self.rate) {
            bad.push(format!("rate {} not in [0.5, 2]", self.rate));
        }
        if !(0.0..=1.0).contains(&self.expressiveness) {
            bad.push(format!("expressiveness {} not in [0, 1]", self.expressiveness));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CastError::InvalidArgument(bad.join("; ")))
        }
    }

    /// Draws a speaker by picking a level per attribute and jittering inside it.
    ///
    /// Rates stay inside the bands where the caption-based duration rule is
    /// consistent with the generator (`round(4 / rate)` of 6-7, 4 and 3 frames).
    pub fn sample(rng: &mut impl Rng) -> Self {
        let pitch_idx = rng.gen_range(0..3u8);
        let tilt = [-0.67f32, 0.0, 0.67][rng.gen_range(0..3)] + rng.gen_range(-0.15f32..0.15);
        let rate = match rng.gen_range(0..3) {
            0 => rng.gen_range(0.6f32..0.7),
            1 => rng.gen_range(0.9f32..1.1),
            _ => rng.gen_range(1.35f32..1.6),
        };
        let expressiveness = [0.15f32, 0.5, 0.85][rng.gen_range(0..3)] + rng.gen_range(-0.1f32..0.1);
        Self { pitch_idx, tilt, rate, expressiveness }
    }

    pub fn frames_per_char(&self) -> usize {
        frames_per_char(self.rate as f64)
    }
}

pub fn frames_per_char(rate: f64) -> usize {
    ((BASE_FRAMES as f64 / rate).round() as usize).max(1)
}

/// Level thresholds shared by captions and the inverter.
pub fn tilt_level(tilt: f64) -> u8 {
    if tilt < -1.0 / 3.0 {
        0
    } else if tilt > 1.0 / 3.0 {
        2
    } else {
        1
    }
}

pub fn rate_level(rate: f64) -> u8 {
    if rate < 0.8 {
        0
    } else if rate > 1.25 {
        2
    } else {
        1
    }
}

pub fn expressiveness_level(e: f64) -> u8 {
    if e < 0.33 {
        0
    } else if e > 0.66 {
        2
    } else {
        1
    }
}

/// Quantizes ground-truth parameters into a caption.
pub fn caption_from_params(speaker: &SpeakerParams) -> Caption {
    Caption::new(
        tilt_level(speaker.tilt as f64),
        speaker.pitch_idx,
        rate_level(speaker.rate as f64),
        expressiveness_level(speaker.expressiveness as f64),
    )
    .expect("levels within arity for valid params")
}

/// A generated utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub mel: MelGrid,
    pub chars: Vec<u8>,
    /// First frame of every word after the first.
    pub word_bounds: Vec<usize>,
    pub speaker: SpeakerParams,
    pub frames_per_char: usize,
}

fn bump(bin: usize, center: f64) -> f64 {
    let d = bin as f64 - center;
    (-d * d / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp()
}

/// Noise-free value of one frame at absolute frame index `t`.
pub fn clean_frame(speaker: &SpeakerParams, token: u8, t: usize) -> [f64; N_MELS] {
    let shift = (speaker.pitch_idx as usize * BIN_SHIFT) as f64;
    let amp = 1.0
        + MOD_DEPTH
            * speaker.expressiveness as f64
            * (2.0 * std::f64::consts::PI * t as f64 / MOD_PERIOD).sin();
    let f0 = F0_BASE_BIN as f64 + shift;
    let mut out = [0.0; N_MELS];
    let mid = (N_MELS as f64 - 1.0) / 2.0;
    for (k, o) in out.iter_mut().enumerate() {
        let line = speaker.tilt as f64 * (k as f64 - mid) / mid;
        let mut excitation = F0_AMP * bump(k, f0);
        if token >= 2 {
            let center = (CHAR_BASE_BIN + (token - 2) as usize) as f64 + shift;
            excitation += CHAR_AMP * bump(k, center);
        }
        *o = line + amp * excitation;
    }
    out
}

/// Renders `text` in the voice of `speaker`, deterministically for a given seed.
pub fn gen_utterance(speaker: &SpeakerParams, text: &str, seed: u64) -> Result<Utterance> {
    speaker.validate()?;
    let chars = tokenize(text)?;
    let fpc = speaker.frames_per_char();
    let frames = chars.len() * fpc;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut mel = MelGrid::zeros(frames, N_MELS);
    let mut word_bounds = Vec::new();
    for (ci, &tok) in chars.iter().enumerate() {
        if ci > 0 && chars[ci - 1] == SPACE_ID && tok != SPACE_ID {
            word_bounds.push(ci * fpc);
        }
        for j in 0..fpc {
            let t = ci * fpc + j;
            let clean = clean_frame(speaker, tok, t);
            for (dst, v) in mel.row_mut(t).iter_mut().zip(clean) {
                *dst = (v + noise.sample(&mut rng)) as f32;
            }
        }
    }
    Ok(Utterance { mel, chars, word_bounds, speaker: *speaker, frames_per_char: fpc })
}

/// A speech-prompted training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechPair {
    pub prompt_mel: MelGrid,
    pub target_mel: MelGrid,
    pub target_chars: Vec<u8>,
    pub speaker_idx: u32,
}

/// A text-prompted training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPair {
    pub caption: Caption,
    pub target_mel: MelGrid,
    pub target_chars: Vec<u8>,
    pub speaker_idx: u32,
}

/// Splits at a uniformly chosen interior word boundary.
pub fn split_prompt_target(u: &Utterance, rng: &mut impl Rng) -> Result<SpeechPair> {
    let &bound = u
        .word_bounds
        .choose(rng)
        .ok_or_else(|| CastError::Unsplittable("utterance has a single word".into()))?;
    Ok(SpeechPair {
        prompt_mel: u.mel.slice_rows(0, bound),
        target_mel: u.mel.slice_rows(bound, u.mel.rows()),
        target_chars: u.chars[bound / u.frames_per_char..].to_vec(),
        speaker_idx: 0,
    })
}

/// Draws a toy sentence of `2..=3` words of `3..=4` letters.
pub fn sample_text(rng: &mut impl Rng) -> String {
    let letters: Vec<char> = ALPHABET.chars().collect();
    let n_words = rng.gen_range(2..=3);
    (0..n_words)
        .map(|_| {
            let len = rng.gen_range(3..=4);
            (0..len).map(|_| *letters.choose(rng).expect("nonempty alphabet")).collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// SplitMix64 finalizer; derives independent per-cell seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Speech- and text-prompted pairs built from a speaker × text grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub speakers: Vec<SpeakerParams>,
    pub texts: Vec<String>,
    pub speech: Vec<SpeechPair>,
    pub text: Vec<TextPair>,
}

/// Samples speakers and texts from `seed`, then builds the grid.
pub fn build_corpus(n_speakers: usize, n_texts: usize, seed: u64) -> Result<Corpus> {
    if n_speakers == 0 || n_texts == 0 {
        return invalid("corpus needs at least one speaker and one text");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX, 0));
    let speakers = (0..n_speakers).map(|_| SpeakerParams::sample(&mut rng)).collect();
    let texts = (0..n_texts).map(|_| sample_text(&mut rng)).collect();
    build_corpus_from(speakers, texts, seed)
}

/// Builds one utterance per (speaker, text) cell; multi-word cells also yield a
/// speech pair with a split fixed at build time.
pub fn build_corpus_from(speakers: Vec<SpeakerParams>, texts: Vec<String>, seed: u64) -> Result<Corpus> {
    let mut speech = Vec::new();
    let mut text = Vec::new();
    for (si, spk) in speakers.iter().enumerate() {
        let caption = caption_from_params(spk);
        for (ti, t) in texts.iter().enumerate() {
            let cell = mix_seed(seed, si as u64, ti as u64);
            let u = gen_utterance(spk, t, cell)?;
            let mut split_rng = ChaCha8Rng::seed_from_u64(cell ^ 0x5eed);
            match split_prompt_target(&u, &mut split_rng) {
                Ok(mut pair) => {
                    pair.speaker_idx = si as u32;
                    speech.push(pair);
                }
                Err(CastError::Unsplittable(_)) => {}
                Err(e) => return Err(e),
            }
            text.push(TextPair {
                caption,
                target_mel: u.mel,
                target_chars: u.chars,
                speaker_idx: si as u32,
            });
        }
    }
    Ok(Corpus { seed, speakers, texts, speech, text })
}
