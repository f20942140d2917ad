//! The synthesis network.
//!
//! `concat(x_tau, cond)` is projected per frame to `d_model`, run through a
//! stack of adaLN-zero transformer blocks (self-attention → timbre
//! cross-attention → FFN) with U-Net style long skips, and read out by a
//! modulated linear head. Every residual branch, and the head itself, starts at
//! zero, so a fresh model predicts exactly zero velocity.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caption::Caption;
use crate::convnext::CharEncoder;
use crate::data::{N_MELS, VOCAB_SIZE};
use crate::error::{invalid, CastError, Result};
use crate::flow::{fm_loss_and_grad, FlowStep};
use crate::mat::{Mat, MelGrid};
use crate::nn::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, modulate, modulate_backward,
    pointwise_backward, silu, silu_grad, Attention, AttnCache, Linear, NormCache,
};
use crate::params::{Grads, Init, ParamEntry, ParamId, ParamStore};
use crate::real::Real;
use crate::timbre::{
    Modality, Projector, SpeechEncoder, TextEncoder, TimbreSeq, DEFAULT_CHUNK_SIZE, ENCODER_SEED,
};

const FF_EXPANSION: usize = 4;
const STEP_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

/// How the timbre sequence is fused into the latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fusion {
    /// Timbre frames prepended to the latent; no cross-attention.
    #[serde(rename = "SA")]
    Sa,
    /// Speech timbre prepended, caption timbre through cross-attention.
    #[serde(rename = "SACA")]
    Saca,
    /// Both modalities through cross-attention.
    #[serde(rename = "CA")]
    Ca,
    /// Cross-attention with a learned per-modality tag prepended to the keys.
    #[serde(rename = "CA_TV")]
    CaTv,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [Fusion::Sa, Fusion::Saca, Fusion::Ca, Fusion::CaTv];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::Sa => "SA",
            Fusion::Saca => "SACA",
            Fusion::Ca => "CA",
            Fusion::CaTv => "CA_TV",
        }
    }

    pub fn has_cross_attention(self) -> bool {
        self != Fusion::Sa
    }

    /// Number of `d_model`-wide modulation chunks per block.
    fn mod_chunks(self) -> usize {
        if self.has_cross_attention() {
            9
        } else {
            6
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fusion {
    type Err = CastError;

    fn from_str(s: &str) -> Result<Self> {
        Fusion::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CastError::InvalidArgument(format!("unknown fusion variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_timbre: usize,
    pub fusion: Fusion,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self { n_layers: 4, n_heads: 4, d_model: 64, d_timbre: 32, fusion: Fusion::Ca }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub block: BlockConfig,
    /// ConvNeXt blocks in the character encoder.
    pub n_conv: usize,
    pub n_mels: usize,
    /// Width of the caption embeddings fed to the projector.
    pub d_text: usize,
    /// Prompt frames pooled into one speech-timbre frame.
    pub chunk_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            block: BlockConfig::default(),
            n_conv: 2,
            n_mels: N_MELS,
            d_text: 24,
            chunk_size: DEFAULT_CHUNK_SIZE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.block;
        let mut errs = Vec::new();
        if b.n_layers == 0 || !b.n_layers.is_multiple_of(2) {
            errs.push(format!("n_layers must be positive and even, got {}", b.n_layers));
        }
        if b.n_heads == 0 || !b.d_model.is_multiple_of(b.n_heads) {
            errs.push(format!("d_model {} not divisible by n_heads {}", b.d_model, b.n_heads));
        } else if !(b.d_model / b.n_heads).is_multiple_of(2) {
            errs.push("head width must be even for rotary positions".to_string());
        }
        if b.d_model == 0 || !b.d_model.is_multiple_of(2) {
            errs.push(format!("d_model must be positive and even, got {}", b.d_model));
        }
        for (name, v) in [
            ("d_timbre", b.d_timbre),
            ("n_mels", self.n_mels),
            ("d_text", self.d_text),
            ("chunk_size", self.chunk_size),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CastError::Validation(errs))
        }
    }
}

/// Where a model's timbre comes from.
#[derive(Clone, Copy, Debug)]
pub enum Prompt<'a, R: Real> {
    /// A reference grid, run through the frozen speech encoder.
    Speech(&'a MelGrid),
    /// A caption, run through the frozen text encoder and the projector.
    Caption(&'a Caption),
    /// An already-encoded timbre sequence.
    Encoded(&'a TimbreSeq<R>),
    /// No prompt; only valid together with condition dropout.
    None,
}

/// One flow-matching regression example.
#[derive(Clone, Copy, Debug)]
pub struct FlowExample<'a, R: Real> {
    pub x0: &'a MelGrid<R>,
    pub x1: &'a MelGrid<R>,
    pub tau: FlowStep,
    pub chars: &'a [u8],
    pub prompt: Prompt<'a, R>,
    pub cfg_drop: bool,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    modulation: Linear,
    sa: Attention,
    ca: Option<Attention>,
    ff1: Linear,
    ff2: Linear,
    skip: Option<Linear>,
}

#[derive(Clone, Debug)]
struct Layout {
    speech_enc: SpeechEncoder,
    text_enc: TextEncoder,
    chars: CharEncoder,
    null_cond: ParamId,
    null_timbre: ParamId,
    step1: Linear,
    step2: Linear,
    in_proj: Linear,
    timbre_in: Option<Linear>,
    tags: Option<[ParamId; 2]>,
    blocks: Vec<Block>,
    final_mod: Linear,
    final_out: Linear,
    projector: Projector,
}

/// A backbone together with its frozen encoders and projector, all in one
/// parameter store.
#[derive(Clone, Debug)]
pub struct Model<R: Real = f32> {
    config: ModelConfig,
    pub params: ParamStore<R>,
    layout: Layout,
}

fn register<R: Real>(config: &ModelConfig, store: &mut ParamStore<R>, seed: u64) -> Layout {
    let b = &config.block;
    let (d, dt, m) = (b.d_model, b.d_timbre, config.n_mels);

    let mut enc_rng = ChaCha8Rng::seed_from_u64(ENCODER_SEED);
    let speech_enc = SpeechEncoder::register(store, &mut enc_rng, m, dt, config.chunk_size);
    let text_enc = TextEncoder::register(store, &mut enc_rng, config.d_text);

    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let chars = CharEncoder::new(store, VOCAB_SIZE, d, config.n_conv, rng);
    let null_cond = store.add("null.cond", &[d], Init::Normal(1.0), rng);
    let null_timbre = store.add("null.timbre", &[dt], Init::Normal(0.5), rng);
    let step1 = Linear::new(store, "step.lin1", d, d, Init::Xavier, rng);
    let step2 = Linear::new(store, "step.lin2", d, d, Init::Xavier, rng);
    let in_proj = Linear::new(store, "in_proj", m + d, d, Init::Xavier, rng);
    let timbre_in = matches!(b.fusion, Fusion::Sa | Fusion::Saca)
        .then(|| Linear::new(store, "timbre_in", dt, d, Init::Xavier, rng));
    let tags = (b.fusion == Fusion::CaTv).then(|| {
        [
            store.add("tag.speech", &[dt], Init::Normal(0.5), rng),
            store.add("tag.text", &[dt], Init::Normal(0.5), rng),
        ]
    });
    let n = b.n_layers;
    let blocks = (0..n)
        .map(|i| {
            let name = format!("block{i}");
            let k = b.fusion.mod_chunks();
            Block {
                modulation: Linear::new(store, &format!("{name}.mod"), d, k * d, Init::Zeros, rng),
                sa: Attention::new(store, &format!("{name}.sa"), d, d, b.n_heads, true, rng),
                ca: b
                    .fusion
                    .has_cross_attention()
                    .then(|| Attention::new(store, &format!("{name}.ca"), d, dt, b.n_heads, false, rng)),
                ff1: Linear::new(store, &format!("{name}.ff1"), d, FF_EXPANSION * d, Init::Xavier, rng),
                ff2: Linear::new(store, &format!("{name}.ff2"), FF_EXPANSION * d, d, Init::Xavier, rng),
                skip: (i >= n / 2)
                    .then(|| Linear::new(store, &format!("{name}.skip"), 2 * d, d, Init::IdentityTop, rng)),
            }
        })
        .collect();
    let final_mod = Linear::new(store, "final.mod", d, 2 * d, Init::Zeros, rng);
    let final_out = Linear::new(store, "final.out", d, m, Init::Zeros, rng);
    let projector = Projector { lin: Linear::new(store, "projector", config.d_text, dt, Init::Xavier, rng) };
    Layout {
        speech_enc,
        text_enc,
        chars,
        null_cond,
        null_timbre,
        step1,
        step2,
        in_proj,
        timbre_in,
        tags,
        blocks,
        final_mod,
        final_out,
        projector,
    }
}

/// Sinusoidal features of `tau`, `d` wide.
pub fn step_features<R: Real>(tau: FlowStep, d: usize) -> Mat<R> {
    let half = d / 2;
    let mut out = Mat::zeros(1, d);
    for i in 0..half {
        let freq = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        let arg = STEP_SCALE * tau.tau() * freq;
        out.set(0, i, R::c(arg.sin()));
        out.set(0, half + i, R::c(arg.cos()));
    }
    out
}

fn chunk<R>(m: &[R], i: usize, d: usize) -> &[R] {
    &m[i * d..(i + 1) * d]
}

fn repeat_row<R: Real>(row: &[R], n: usize) -> Mat<R> {
    let mut out = Mat::zeros(n, row.len());
    for t in 0..n {
        out.row_mut(t).copy_from_slice(row);
    }
    out
}

fn sum_rows_into<R: Real>(m: &Mat<R>, dst: &mut [R]) {
    for t in 0..m.rows() {
        for (a, &v) in dst.iter_mut().zip(m.row(t)) {
            *a += v;
        }
    }
}

/// `h += gate ⊙ branch`, gate broadcast over rows.
fn gated_add<R: Real>(h: &mut Mat<R>, gate: &[R], branch: &Mat<R>) {
    for t in 0..h.rows() {
        let br = branch.row(t);
        for ((v, &g), &b) in h.row_mut(t).iter_mut().zip(gate).zip(br) {
            *v += g * b;
        }
    }
}

/// Backward of [`gated_add`] for the branch side: returns `d branch` and
/// accumulates `d gate`.
fn gated_backward<R: Real>(dh: &Mat<R>, gate: &[R], branch: &Mat<R>, dgate: &mut [R]) -> Mat<R> {
    let mut dbr = dh.clone();
    for t in 0..dh.rows() {
        let br = branch.row(t);
        for (j, v) in dbr.row_mut(t).iter_mut().enumerate() {
            dgate[j] += *v * br[j];
            *v *= gate[j];
        }
    }
    dbr
}

#[derive(Clone, Debug)]
struct SubTape<R> {
    norm: NormCache<R>,
    branch: Mat<R>,
}

#[derive(Clone, Debug)]
struct FfTape<R> {
    sub: SubTape<R>,
    input: Mat<R>,
    h1: Mat<R>,
    act: Mat<R>,
}

#[derive(Clone, Debug)]
struct BlockTape<R> {
    skip_in: Option<Mat<R>>,
    m: Vec<R>,
    sa: Option<(SubTape<R>, AttnCache<R>)>,
    ca: Option<(SubTape<R>, AttnCache<R>)>,
    ff: Option<FfTape<R>>,
}

/// Where the timbre-side inputs came from, for routing gradients back.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Source {
    Timbre,
    Null,
    /// Timbre with the tag at `index` prepended.
    Tagged(usize),
}

#[derive(Clone, Debug)]
struct Routed<R> {
    prefix: Option<(Mat<R>, Source)>,
    kv: Option<(Mat<R>, Source)>,
}

#[derive(Clone, Debug)]
struct StepTape<R> {
    feat: Mat<R>,
    z1: Mat<R>,
    s1: Mat<R>,
    t_emb: Mat<R>,
    c: Mat<R>,
}

#[derive(Clone, Debug)]
struct BackboneTape<R> {
    in_cat: Mat<R>,
    routed: Routed<R>,
    n_prefix: usize,
    step: StepTape<R>,
    blocks: Vec<BlockTape<R>>,
    hidden: Mat<R>,
    final_norm: NormCache<R>,
    final_m: Vec<R>,
    final_in: Mat<R>,
}

#[derive(Clone, Debug)]
enum PromptTape<R> {
    Speech { feats: Mat<R>, out: Mat<R> },
    Caption { caption: Caption, text: Mat<R> },
    Fixed,
}

impl<R: Real> Model<R> {
    /// A freshly initialized model. The frozen encoders always come from
    /// [`ENCODER_SEED`]; everything else from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = register(&config, &mut params, seed);
        Ok(Self { config, params, layout })
    }

    /// Wires a model around loaded tensors, which must match the layout of
    /// `config` by name and shape.
    pub fn from_params(config: ModelConfig, loaded: ParamStore<R>) -> Result<Self> {
        let template = Self::new(config, 0)?;
        let mut params = ParamStore::new();
        let mut problems = Vec::new();
        for e in template.params.entries() {
            match loaded.by_name(&e.name) {
                Ok(l) if l.shape == e.shape => {
                    params.push(ParamEntry { frozen: e.frozen, ..l.clone() });
                }
                Ok(l) => problems.push(format!("{}: shape {:?}, expected {:?}", e.name, l.shape, e.shape)),
                Err(_) => problems.push(format!("missing tensor {}", e.name)),
            }
        }
        for name in loaded.names() {
            if template.params.id(name).is_none() {
                problems.push(format!("unexpected tensor {name}"));
            }
        }
        if !problems.is_empty() {
            return Err(CastError::Validation(problems));
        }
        Ok(Self { config: template.config, params, layout: template.layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fusion(&self) -> Fusion {
        self.config.block.fusion
    }

    pub fn cast<S: Real>(&self) -> Model<S> {
        Model { config: self.config.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    pub fn speech_encoder(&self) -> &SpeechEncoder {
        &self.layout.speech_enc
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.layout.text_enc
    }

    pub fn projector(&self) -> &Projector {
        &self.layout.projector
    }

    pub fn char_encoder(&self) -> &CharEncoder {
        &self.layout.chars
    }

    /// The ids of the per-block modulation and cross-attention tensors, used
    /// to force gates in tests.
    pub fn block_param(&self, layer: usize, which: &str) -> Option<ParamId> {
        self.params.id(&format!("block{layer}.{which}"))
    }

    pub fn encode_speech(&self, prompt: &MelGrid) -> Result<TimbreSeq<R>> {
        self.layout.speech_enc.encode(&self.params, prompt)
    }

    pub fn encode_caption(&self, caption: &Caption) -> Result<TimbreSeq<R>> {
        let text = self.layout.text_enc.encode(&self.params, caption);
        self.layout.projector.project(&self.params, &text)
    }

    pub fn encode_prompt(&self, prompt: Prompt<'_, R>) -> Result<Option<TimbreSeq<R>>> {
        Ok(self.encode_prompt_tape(prompt)?.map(|(t, _)| t))
    }

    fn encode_prompt_tape(&self, prompt: Prompt<'_, R>) -> Result<Option<(TimbreSeq<R>, PromptTape<R>)>> {
        Ok(match prompt {
            Prompt::Speech(mel) => {
                let enc = &self.layout.speech_enc;
                let feats = enc.chunk_features::<R>(mel)?;
                let out = enc.lin.forward(&self.params, &feats).map(|x| x.tanh());
                let seq = TimbreSeq::new(out.clone(), Modality::Speech)?;
                Some((seq, PromptTape::Speech { feats, out }))
            }
            Prompt::Caption(c) => {
                let text = self.layout.text_enc.encode(&self.params, c);
                let seq = self.layout.projector.project(&self.params, &text)?;
                Some((seq, PromptTape::Caption { caption: *c, text }))
            }
            Prompt::Encoded(t) => Some((t.clone(), PromptTape::Fixed)),
            Prompt::None => None,
        })
    }

    /// Filler-padded character embeddings.
    pub fn embed_and_pad(&self, chars: &[u8], target_frames: usize) -> Result<Mat<R>> {
        self.layout.chars.embed_and_pad(&self.params, chars, target_frames)
    }

    pub fn convnext_encode(&self, x: &Mat<R>) -> Result<Mat<R>> {
        self.layout.chars.convnext_encode(&self.params, x)
    }

    /// The learned unconditional character sequence.
    pub fn null_cond(&self, frames: usize) -> Mat<R> {
        repeat_row(self.params.get(self.layout.null_cond), frames)
    }

    /// Predicted velocity from an encoded character sequence.
    pub fn backbone_forward(
        &self,
        x_tau: &MelGrid<R>,
        cond: &Mat<R>,
        timbre: Option<&TimbreSeq<R>>,
        tau: FlowStep,
        cfg_drop: bool,
    ) -> Result<MelGrid<R>> {
        Ok(self.run(x_tau, cond, timbre, tau, cfg_drop, false)?.0)
    }

    /// Predicted velocity from raw characters and a prompt.
    pub fn velocity(
        &self,
        x_tau: &MelGrid<R>,
        chars: &[u8],
        timbre: Option<&TimbreSeq<R>>,
        tau: FlowStep,
        cfg_drop: bool,
    ) -> Result<MelGrid<R>> {
        let cond = if cfg_drop {
            self.null_cond(x_tau.rows())
        } else {
            self.layout.chars.forward(&self.params, chars, x_tau.rows())?.0
        };
        self.backbone_forward(x_tau, &cond, timbre, tau, cfg_drop)
    }

    /// Flow-matching loss of one example; gradients of every tensor with a
    /// slot in `g` are accumulated.
    pub fn loss_and_grad(&self, ex: &FlowExample<'_, R>, g: &mut Grads<R>) -> Result<R> {
        let sample = crate::flow::FlowSample::new(ex.x0.clone(), ex.x1.clone(), ex.tau)?;
        let frames = ex.x0.rows();
        let (cond, char_tape) = if ex.cfg_drop {
            (self.null_cond(frames), None)
        } else {
            let (c, t) = self.layout.chars.forward(&self.params, ex.chars, frames)?;
            (c, Some(t))
        };
        let prompt = if ex.cfg_drop { None } else { self.encode_prompt_tape(ex.prompt)? };
        let (v, tape) = self.run(&sample.x_tau, &cond, prompt.as_ref().map(|p| &p.0), ex.tau, ex.cfg_drop, false)?;
        let mask = vec![true; frames];
        let (loss, dv) = fm_loss_and_grad(&v, ex.x0, ex.x1, &mask)?;
        let (dcond, dtimbre) = self.backward(&dv, &tape, g);
        if let Some(ct) = char_tape {
            self.layout.chars.backward(&self.params, &dcond, &ct, g);
        } else if let Some(gn) = g.slot(self.layout.null_cond) {
            sum_rows_into(&dcond, gn);
        }
        if let (Some((_, pt)), Some(dt)) = (prompt, dtimbre) {
            self.prompt_backward(&pt, &dt, g);
        }
        Ok(loss)
    }

    /// Flow-matching loss of one example without gradients.
    pub fn loss(&self, ex: &FlowExample<'_, R>) -> Result<R> {
        let frames = ex.x0.rows();
        let x_tau = crate::flow::interpolate(ex.x0, ex.x1, ex.tau)?;
        let cond = if ex.cfg_drop {
            self.null_cond(frames)
        } else {
            self.layout.chars.forward(&self.params, ex.chars, frames)?.0
        };
        let prompt = if ex.cfg_drop { None } else { self.encode_prompt(ex.prompt)? };
        let v = self.backbone_forward(&x_tau, &cond, prompt.as_ref(), ex.tau, ex.cfg_drop)?;
        crate::flow::fm_loss(&v, ex.x0, ex.x1, &vec![true; frames])
    }

    fn prompt_backward(&self, tape: &PromptTape<R>, dt: &Mat<R>, g: &mut Grads<R>) {
        match tape {
            PromptTape::Speech { feats, out } => {
                let lin = self.layout.speech_enc.lin;
                if g.wants(lin.w) || g.wants(lin.b) {
                    let mut dpre = dt.clone();
                    for (d, &y) in dpre.data_mut().iter_mut().zip(out.data()) {
                        *d *= R::one() - y * y;
                    }
                    lin.accumulate(feats, &dpre, g);
                }
            }
            PromptTape::Caption { caption, text } => {
                let proj = self.layout.projector.lin;
                let dtext = proj.backward(&self.params, text, dt, g);
                let enc = self.layout.text_enc;
                // text = 0.5 raw + 0.5 mean(raw)
                let mean = dtext.mean_rows();
                let half = R::c(0.5);
                let d = enc.d_text;
                for (i, attr) in crate::caption::Attribute::ALL.iter().enumerate() {
                    let draw: Vec<R> = dtext.row(i).iter().zip(&mean).map(|(&a, &m)| half * a + half * m).collect();
                    let lvl = caption.level(*attr) as usize;
                    if let Some(gt) = g.slot(enc.tables[i]) {
                        for (a, &v) in gt[lvl * d..(lvl + 1) * d].iter_mut().zip(&draw) {
                            *a += v;
                        }
                    }
                    if let Some(gp) = g.slot(enc.pos) {
                        for (a, &v) in gp[i * d..(i + 1) * d].iter_mut().zip(&draw) {
                            *a += v;
                        }
                    }
                }
            }
            PromptTape::Fixed => {}
        }
    }

    fn route(&self, timbre: Option<&TimbreSeq<R>>, cfg_drop: bool) -> Result<Routed<R>> {
        let null = || Mat::from_vec(1, self.config.block.d_timbre, self.params.get(self.layout.null_timbre).to_vec());
        let fusion = self.fusion();
        if cfg_drop {
            let n = null()?;
            return Ok(match fusion {
                Fusion::Sa => Routed { prefix: Some((n, Source::Null)), kv: None },
                _ => Routed { prefix: None, kv: Some((n, Source::Null)) },
            });
        }
        let Some(t) = timbre else {
            return invalid("a timbre sequence is required unless conditions are dropped");
        };
        if t.frames.cols() != self.config.block.d_timbre {
            return invalid(format!(
                "timbre width {} does not match d_timbre {}",
                t.frames.cols(),
                self.config.block.d_timbre
            ));
        }
        let seq = t.frames.clone();
        Ok(match fusion {
            Fusion::Sa => Routed { prefix: Some((seq, Source::Timbre)), kv: None },
            Fusion::Saca if t.modality == Modality::Speech => {
                Routed { prefix: Some((seq, Source::Timbre)), kv: Some((null()?, Source::Null)) }
            }
            Fusion::Saca | Fusion::Ca => Routed { prefix: None, kv: Some((seq, Source::Timbre)) },
            Fusion::CaTv => {
                let idx = match t.modality {
                    Modality::Speech => Some(0),
                    Modality::Text => Some(1),
                    Modality::Null => None,
                };
                match idx {
                    Some(i) => {
                        let tags = self.layout.tags.expect("CA_TV registers tags");
                        let tag = Mat::from_vec(1, seq.cols(), self.params.get(tags[i]).to_vec())?;
                        Routed { prefix: None, kv: Some((Mat::vcat(&tag, &seq)?, Source::Tagged(i))) }
                    }
                    None => Routed { prefix: None, kv: Some((seq, Source::Timbre)) },
                }
            }
        })
    }

    fn step_forward(&self, tau: FlowStep) -> StepTape<R> {
        let p = &self.params;
        let feat = step_features(tau, self.config.block.d_model);
        let z1 = self.layout.step1.forward(p, &feat);
        let s1 = z1.map(silu);
        let t_emb = self.layout.step2.forward(p, &s1);
        let c = t_emb.map(silu);
        StepTape { feat, z1, s1, t_emb, c }
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        blk: &Block,
        h: Mat<R>,
        saved: Option<&Mat<R>>,
        c: &Mat<R>,
        kv: Option<&Mat<R>>,
        ablate: bool,
    ) -> Result<(Mat<R>, BlockTape<R>)> {
        let p = &self.params;
        let d = self.config.block.d_model;
        let (mut x, skip_in) = match (blk.skip, saved) {
            (Some(skip), Some(s)) => {
                let cat = Mat::hcat(&h, s)?;
                (skip.forward(p, &cat), Some(cat))
            }
            _ => (h, None),
        };
        let m = blk.modulation.forward(p, c).into_vec();
        let mut tape = BlockTape { skip_in, m, sa: None, ca: None, ff: None };
        if ablate {
            return Ok((x, tape));
        }
        let m = &tape.m;

        let (xh, norm) = layer_norm(&x);
        let a = modulate(&xh, chunk(m, 0, d), chunk(m, 1, d));
        let (branch, cache) = blk.sa.forward(p, &a, &a);
        gated_add(&mut x, chunk(m, 2, d), &branch);
        tape.sa = Some((SubTape { norm, branch }, cache));

        if let Some(ca) = &blk.ca {
            let kv = kv.ok_or_else(|| CastError::Internal("cross-attention without keys".into()))?;
            let (xh, norm) = layer_norm(&x);
            let a = modulate(&xh, chunk(m, 6, d), chunk(m, 7, d));
            let (branch, cache) = ca.forward(p, &a, kv);
            gated_add(&mut x, chunk(m, 8, d), &branch);
            tape.ca = Some((SubTape { norm, branch }, cache));
        }

        let (xh, norm) = layer_norm(&x);
        let input = modulate(&xh, chunk(m, 3, d), chunk(m, 4, d));
        let h1 = blk.ff1.forward(p, &input);
        let act = h1.map(gelu);
        let branch = blk.ff2.forward(p, &act);
        gated_add(&mut x, chunk(m, 5, d), &branch);
        tape.ff = Some(FfTape { sub: SubTape { norm, branch }, input, h1, act });
        Ok((x, tape))
    }

    fn run(
        &self,
        x_tau: &MelGrid<R>,
        cond: &Mat<R>,
        timbre: Option<&TimbreSeq<R>>,
        tau: FlowStep,
        cfg_drop: bool,
        ablate: bool,
    ) -> Result<(MelGrid<R>, BackboneTape<R>)> {
        let p = &self.params;
        let (d, m) = (self.config.block.d_model, self.config.n_mels);
        if x_tau.rows() == 0 {
            return invalid("x_tau must have at least one frame");
        }
        if x_tau.cols() != m {
            return invalid(format!("x_tau has {} bins, expected {m}", x_tau.cols()));
        }
        if cond.rows() != x_tau.rows() {
            return invalid(format!(
                "cond has {} frames but x_tau has {}",
                cond.rows(),
                x_tau.rows()
            ));
        }
        if cond.cols() != d {
            return invalid(format!("cond width {} does not match d_model {d}", cond.cols()));
        }
        let routed = self.route(timbre, cfg_drop)?;
        let in_cat = Mat::hcat(x_tau, cond)?;
        let mut h = self.layout.in_proj.forward(p, &in_cat);
        let mut n_prefix = 0;
        if let Some((pre, _)) = &routed.prefix {
            let tokens = self.layout.timbre_in.expect("prefix fusion registers timbre_in").forward(p, pre);
            n_prefix = tokens.rows();
            h = Mat::vcat(&tokens, &h)?;
        }
        let step = self.step_forward(tau);
        let kv = routed.kv.as_ref().map(|(k, _)| k);

        let n = self.layout.blocks.len();
        let mut saved: Vec<Mat<R>> = Vec::with_capacity(n / 2);
        let mut tapes = Vec::with_capacity(n);
        for (i, blk) in self.layout.blocks.iter().enumerate() {
            let skip_src = (i >= n / 2).then(|| &saved[n - 1 - i]);
            let (next, tape) = self.block_forward(blk, h, skip_src, &step.c, kv, ablate)?;
            h = next;
            if i < n / 2 {
                saved.push(h.clone());
            }
            tapes.push(tape);
        }

        let (hh, final_norm) = layer_norm(&h);
        let final_m = self.layout.final_mod.forward(p, &step.c).into_vec();
        let final_in = modulate(&hh, chunk(&final_m, 0, d), chunk(&final_m, 1, d));
        let out = self.layout.final_out.forward(p, &final_in);
        let velocity = out.slice_rows(n_prefix, out.rows());
        let tape = BackboneTape {
            in_cat,
            routed,
            n_prefix,
            step,
            blocks: tapes,
            hidden: h,
            final_norm,
            final_m,
            final_in,
        };
        Ok((velocity, tape))
    }

    fn block_backward(
        &self,
        blk: &Block,
        dout: &Mat<R>,
        tape: &BlockTape<R>,
        dm: &mut [R],
        dkv: &mut Option<Mat<R>>,
        g: &mut Grads<R>,
    ) -> (Mat<R>, Option<Mat<R>>) {
        let p = &self.params;
        let d = self.config.block.d_model;
        let m = &tape.m;
        let mut dx = dout.clone();

        let ff = tape.ff.as_ref().expect("backward through an ablated block");
        let dbr = gated_backward(&dx, chunk(m, 5, d), &ff.sub.branch, &mut dm[5 * d..6 * d]);
        let dact = blk.ff2.backward(p, &ff.act, &dbr, g);
        let dh1 = pointwise_backward(&ff.h1, &dact, gelu_grad);
        let din = blk.ff1.backward(p, &ff.input, &dh1, g);
        let (ds, rest) = dm[3 * d..].split_at_mut(d);
        let dxh = modulate_backward(&ff.sub.norm.xhat, chunk(m, 4, d), &din, ds, &mut rest[..d]);
        dx.add_assign(&layer_norm_backward(&dxh, &ff.sub.norm));

        if let (Some(ca), Some((sub, cache))) = (&blk.ca, &tape.ca) {
            let dbr = gated_backward(&dx, chunk(m, 8, d), &sub.branch, &mut dm[8 * d..9 * d]);
            let (da, dk) = ca.backward(p, &dbr, cache, g);
            match dkv {
                Some(acc) => acc.add_assign(&dk),
                None => *dkv = Some(dk),
            }
            let (ds, rest) = dm[6 * d..].split_at_mut(d);
            let dxh = modulate_backward(&sub.norm.xhat, chunk(m, 7, d), &da, ds, &mut rest[..d]);
            dx.add_assign(&layer_norm_backward(&dxh, &sub.norm));
        }

        let (sub, cache) = tape.sa.as_ref().expect("self-attention tape");
        let dbr = gated_backward(&dx, chunk(m, 2, d), &sub.branch, &mut dm[2 * d..3 * d]);
        let (dq, dk) = blk.sa.backward(p, &dbr, cache, g);
        let mut da = dq;
        da.add_assign(&dk);
        let (ds, rest) = dm.split_at_mut(d);
        let dxh = modulate_backward(&sub.norm.xhat, chunk(m, 1, d), &da, ds, &mut rest[..d]);
        dx.add_assign(&layer_norm_backward(&dxh, &sub.norm));

        match (blk.skip, &tape.skip_in) {
            (Some(skip), Some(cat)) => {
                let dcat = skip.backward(p, cat, &dx, g);
                let (dh, dsaved) = dcat.hsplit(d);
                (dh, Some(dsaved))
            }
            _ => (dx, None),
        }
    }

    /// Returns `(d cond, d timbre)`.
    fn backward(&self, dv: &MelGrid<R>, tape: &BackboneTape<R>, g: &mut Grads<R>) -> (Mat<R>, Option<Mat<R>>) {
        let p = &self.params;
        let d = self.config.block.d_model;
        let l = &self.layout;
        let mut dc = Mat::zeros(1, d);

        let total = tape.hidden.rows();
        let mut dout = Mat::zeros(total, self.config.n_mels);
        for t in 0..dv.rows() {
            dout.row_mut(tape.n_prefix + t).copy_from_slice(dv.row(t));
        }
        let dfin = l.final_out.backward(p, &tape.final_in, &dout, g);
        let mut dfm = vec![R::zero(); 2 * d];
        let (ds, dsc) = dfm.split_at_mut(d);
        let dhh = modulate_backward(&tape.final_norm.xhat, chunk(&tape.final_m, 1, d), &dfin, ds, dsc);
        let dfm = Mat::from_vec(1, 2 * d, dfm).expect("sized");
        dc.add_assign(&l.final_mod.backward(p, &tape.step.c, &dfm, g));
        let mut dh = layer_norm_backward(&dhh, &tape.final_norm);

        let n = l.blocks.len();
        let mut dsaved: Vec<Option<Mat<R>>> = vec![None; n];
        let mut dkv: Option<Mat<R>> = None;
        let k = self.fusion().mod_chunks();
        for i in (0..n).rev() {
            if let Some(ds) = dsaved[i].take() {
                dh.add_assign(&ds);
            }
            let blk = &l.blocks[i];
            let mut dm = vec![R::zero(); k * d];
            let (dprev, dskip) = self.block_backward(blk, &dh, &tape.blocks[i], &mut dm, &mut dkv, g);
            let dm = Mat::from_vec(1, k * d, dm).expect("sized");
            dc.add_assign(&blk.modulation.backward(p, &tape.step.c, &dm, g));
            if let Some(ds) = dskip {
                dsaved[n - 1 - i] = Some(ds);
            }
            dh = dprev;
        }

        // step MLP
        let st = &tape.step;
        let dt_emb = pointwise_backward(&st.t_emb, &dc, silu_grad);
        let ds1 = l.step2.backward(p, &st.s1, &dt_emb, g);
        let dz1 = pointwise_backward(&st.z1, &ds1, silu_grad);
        l.step1.accumulate(&st.feat, &dz1, g);

        // input side
        let mut dtimbre: Option<Mat<R>> = None;
        let dh0 = dh.slice_rows(tape.n_prefix, total);
        if let Some((pre, src)) = &tape.routed.prefix {
            let dtok = dh.slice_rows(0, tape.n_prefix);
            let dpre = l.timbre_in.expect("prefix fusion registers timbre_in").backward(p, pre, &dtok, g);
            self.timbre_grad(dpre, *src, &mut dtimbre, g);
        }
        if let (Some((_, src)), Some(dk)) = (&tape.routed.kv, dkv) {
            self.timbre_grad(dk, *src, &mut dtimbre, g);
        }
        let dcat = l.in_proj.backward(p, &tape.in_cat, &dh0, g);
        let (_, dcond) = dcat.hsplit(self.config.n_mels);
        (dcond, dtimbre)
    }

    fn timbre_grad(&self, dseq: Mat<R>, src: Source, dtimbre: &mut Option<Mat<R>>, g: &mut Grads<R>) {
        let dseq = match src {
            Source::Null => {
                if let Some(gn) = g.slot(self.layout.null_timbre) {
                    sum_rows_into(&dseq, gn);
                }
                return;
            }
            Source::Tagged(i) => {
                let tags = self.layout.tags.expect("CA_TV registers tags");
                if let Some(gt) = g.slot(tags[i]) {
                    gt.iter_mut().zip(dseq.row(0)).for_each(|(a, &v)| *a += v);
                }
                dseq.slice_rows(1, dseq.rows())
            }
            Source::Timbre => dseq,
        };
        match dtimbre {
            Some(acc) => acc.add_assign(&dseq),
            None => *dtimbre = Some(dseq),
        }
    }
}

/// Builds a freshly initialized model wired for `cfg.fusion`.
pub fn build_variant(cfg: BlockConfig, seed: u64) -> Result<Model> {
    Model::new(ModelConfig { block: cfg, ..ModelConfig::default() }, seed)
}

/// Which stage of the training strategy a parameter set is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainSet {
    /// Everything except the frozen encoders and the projector.
    Backbone,
    /// The projector only.
    Projector,
    /// Every non-frozen tensor.
    All,
}

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("speech_enc.") || name.starts_with("text_enc.")
}

pub fn is_projector_param(name: &str) -> bool {
    name.starts_with("projector.")
}

impl TrainSet {
    pub fn contains<R>(self, entry: &ParamEntry<R>) -> bool {
        if entry.frozen || is_encoder_param(&entry.name) {
            return false;
        }
        match self {
            TrainSet::Backbone => !is_projector_param(&entry.name),
            TrainSet::Projector => is_projector_param(&entry.name),
            TrainSet::All => true,
        }
    }
}
