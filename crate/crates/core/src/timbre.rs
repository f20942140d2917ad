//! Unified timbre encoder: a frozen speech branch, a frozen caption branch and
//! the trainable projector that maps caption embeddings into the speech-derived
//! timbre space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::caption::{Attribute, Caption};
use crate::error::{invalid, Result};
use crate::mat::{Mat, MelGrid};
use crate::nn::Linear;
use crate::params::{Init, ParamId, ParamStore};
use crate::real::Real;

/// Seed of the frozen stand-in encoders; shared by every model so that timbre
/// similarities are comparable across checkpoints.
pub const ENCODER_SEED: u64 = 0x7ED5_EED5;
pub const DEFAULT_CHUNK_SIZE: usize = 8;

/// Which branch produced a timbre sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Speech,
    Text,
    /// The learned unconditional sequence.
    Null,
}

/// Conditioning sequence `T × D` consumed by the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct TimbreSeq<R: Real = f32> {
    pub frames: Mat<R>,
    pub modality: Modality,
}

impl<R: Real> TimbreSeq<R> {
    pub fn new(frames: Mat<R>, modality: Modality) -> Result<Self> {
        if frames.rows() == 0 {
            return invalid("timbre sequence must have at least one frame");
        }
        if !frames.is_finite() {
            return invalid("timbre sequence contains non-finite values");
        }
        Ok(Self { frames, modality })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn mean_pool(&self) -> Vec<R> {
        self.frames.mean_rows()
    }

    pub fn cast<S: Real>(&self) -> TimbreSeq<S> {
        TimbreSeq { frames: self.frames.cast(), modality: self.modality }
    }
}

/// Frozen speech branch: chunk statistics through a fixed random affine map
/// and `tanh`.
#[derive(Clone, Copy, Debug)]
pub struct SpeechEncoder {
    pub lin: Linear,
    pub chunk_size: usize,
    pub n_mels: usize,
}

impl SpeechEncoder {
    pub fn register<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut ChaCha8Rng,
        n_mels: usize,
        d_timbre: usize,
        chunk_size: usize,
    ) -> Self {
        let d_in = 2 * n_mels;
        let w = store.add("speech_enc.w", &[d_in, d_timbre], Init::Normal(1.5 / (d_in as f64).sqrt()), rng);
        let b = store.add("speech_enc.b", &[d_timbre], Init::Normal(0.1), rng);
        store.set_frozen(w, true);
        store.set_frozen(b, true);
        Self { lin: Linear { w, b, d_in, d_out: d_timbre }, chunk_size, n_mels }
    }

    /// An encoder in its own store, identical to the one inside every model.
    pub fn standalone(n_mels: usize, d_timbre: usize, chunk_size: usize) -> (ParamStore<f32>, Self) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(ENCODER_SEED);
        let enc = Self::register(&mut store, &mut rng, n_mels, d_timbre, chunk_size);
        (store, enc)
    }

    /// Per-chunk bin means and standard deviations, each centred across bins.
    pub fn chunk_features<R: Real>(&self, prompt: &MelGrid) -> Result<Mat<R>> {
        if prompt.cols() != self.n_mels {
            return invalid(format!("prompt has {} bins, expected {}", prompt.cols(), self.n_mels));
        }
        if self.chunk_size == 0 || prompt.rows() < self.chunk_size {
            return invalid(format!(
                "speech prompt of {} frames is shorter than one {}-frame chunk",
                prompt.rows(),
                self.chunk_size
            ));
        }
        let n_chunks = prompt.rows() / self.chunk_size;
        let m = self.n_mels;
        let mut feats = Mat::zeros(n_chunks, 2 * m);
        for c in 0..n_chunks {
            let rows = c * self.chunk_size..(c + 1) * self.chunk_size;
            let mut mean = vec![0.0f64; m];
            let mut sq = vec![0.0f64; m];
            for t in rows {
                for (k, &v) in prompt.row(t).iter().enumerate() {
                    mean[k] += v as f64;
                    sq[k] += v as f64 * v as f64;
                }
            }
            let n = self.chunk_size as f64;
            let std: Vec<f64> = (0..m)
                .map(|k| {
                    mean[k] /= n;
                    (sq[k] / n - mean[k] * mean[k]).max(0.0).sqrt()
                })
                .collect();
            let avg_mean = mean.iter().sum::<f64>() / m as f64;
            let avg_std = std.iter().sum::<f64>() / m as f64;
            let row = feats.row_mut(c);
            for k in 0..m {
                row[k] = R::c(mean[k] - avg_mean);
                row[m + k] = R::c(std[k] - avg_std);
            }
        }
        Ok(feats)
    }

    pub fn encode<R: Real>(&self, p: &ParamStore<R>, prompt: &MelGrid) -> Result<TimbreSeq<R>> {
        let feats = self.chunk_features::<R>(prompt)?;
        let out = self.lin.forward(p, &feats).map(|x| x.tanh());
        TimbreSeq::new(out, Modality::Speech)
    }
}

/// Frozen caption branch: one embedding per attribute level plus a position
/// tag, followed by a fixed averaging mix across positions.
#[derive(Clone, Copy, Debug)]
pub struct TextEncoder {
    pub tables: [ParamId; 4],
    pub pos: ParamId,
    pub d_text: usize,
}

impl TextEncoder {
    pub fn register<R: Real>(store: &mut ParamStore<R>, rng: &mut ChaCha8Rng, d_text: usize) -> Self {
        let tables = Attribute::ALL.map(|a| {
            let id = store.add(
                format!("text_enc.{}", a.name()),
                &[a.arity() as usize, d_text],
                Init::Normal(1.0),
                rng,
            );
            store.set_frozen(id, true);
            id
        });
        let pos = store.add("text_enc.pos", &[Attribute::ALL.len(), d_text], Init::Normal(1.0), rng);
        store.set_frozen(pos, true);
        Self { tables, pos, d_text }
    }

    /// Per-position embedding before mixing: level lookup plus position tag.
    pub fn lookup<R: Real>(&self, p: &ParamStore<R>, caption: &Caption) -> Mat<R> {
        let d = self.d_text;
        let pos = p.get(self.pos);
        let mut out = Mat::zeros(Attribute::ALL.len(), d);
        for (i, &attr) in Attribute::ALL.iter().enumerate() {
            let lvl = caption.level(attr) as usize;
            let table = &p.get(self.tables[i])[lvl * d..(lvl + 1) * d];
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = table[j] + pos[i * d + j];
            }
        }
        out
    }

    /// Raw caption embedding sequence (one row per attribute).
    pub fn encode<R: Real>(&self, p: &ParamStore<R>, caption: &Caption) -> Mat<R> {
        let raw = self.lookup(p, caption);
        let mean = raw.mean_rows();
        let half = R::c(0.5);
        let mut out = raw;
        for i in 0..out.rows() {
            for (o, &m) in out.row_mut(i).iter_mut().zip(&mean) {
                *o = half * *o + half * m;
            }
        }
        out
    }
}

/// Trainable affine map from caption space into timbre space.
#[derive(Clone, Copy, Debug)]
pub struct Projector {
    pub lin: Linear,
}

impl Projector {
    pub fn project<R: Real>(&self, p: &ParamStore<R>, text_embeds: &Mat<R>) -> Result<TimbreSeq<R>> {
        if text_embeds.rows() == 0 {
            return invalid("projector input must be nonempty");
        }
        if text_embeds.cols() != self.lin.d_in {
            return invalid(format!(
                "projector expects width {}, got {}",
                self.lin.d_in,
                text_embeds.cols()
            ));
        }
        TimbreSeq::new(self.lin.forward(p, text_embeds), Modality::Text)
    }
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}
