//! Portable binary formats: checkpoints, corpora and generated mel grids.
//!
//! Everything is little-endian with fixed-width integers, so files move
//! between platforms unchanged.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{Model, ModelConfig};
use crate::caption::Caption;
use crate::data::{Corpus, SpeakerParams, SpeechPair, TextPair};
use crate::error::{CastError, Result};
use crate::mat::MelGrid;
use crate::params::{ParamEntry, ParamStore};
use crate::trainer::{StageId, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CASTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CORPUS_MAGIC: &[u8; 8] = b"CAST-DS\0";
pub const CORPUS_VERSION: u32 = 1;
pub const MEL_MAGIC: &[u8; 8] = b"CASTMEL\0";
pub const MEL_VERSION: u32 = 1;

/// Dtype code of 32-bit IEEE floats, the only payload type.
pub const DTYPE_F32: u8 = 1;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CastError::Format(msg.into()))
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.bytes(&u32::try_from(v).expect("length fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.bytes(s.as_bytes());
    }
    fn blob(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.bytes(b);
    }
    fn mel(&mut self, m: &MelGrid) {
        self.u32(m.rows());
        self.u32(m.cols());
        m.data().iter().for_each(|&v| self.f32(v));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return format_err(format!("truncated file at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| CastError::Format("payload too large".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CastError::Format("invalid utf-8 string".into()))
    }
    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }
    fn mel(&mut self) -> Result<MelGrid> {
        let (rows, cols) = (self.u32()?, self.u32()?);
        let n = rows.checked_mul(cols).ok_or_else(|| CastError::Format("grid too large".into()))?;
        MelGrid::from_vec(rows, cols, self.f32s(n)?)
    }
    fn header(&mut self, magic: &[u8; 8], version: u32, what: &str) -> Result<()> {
        if self.buf.len() < 8 || self.take(8)? != magic {
            return format_err(format!("not a {what} file (bad magic)"));
        }
        let v = self.u32()? as u32;
        if v != version {
            return format_err(format!("unsupported {what} version {v} (expected {version})"));
        }
        Ok(())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return format_err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn stage_code(s: StageId) -> u8 {
    match s {
        StageId::One => 1,
        StageId::Two => 2,
        StageId::Three => 3,
        StageId::Base => 4,
    }
}

fn stage_from_code(c: u8) -> Result<StageId> {
    Ok(match c {
        1 => StageId::One,
        2 => StageId::Two,
        3 => StageId::Three,
        4 => StageId::Base,
        _ => return format_err(format!("unknown stage code {c}")),
    })
}

/// A trained model with its architecture, completed stages and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub history: Vec<StageId>,
    pub seed: u64,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, seed: u64) -> Self {
        Self {
            config: state.model.config().clone(),
            history: state.history.clone(),
            seed,
            params: state.model.params.clone(),
        }
    }

    /// Rebuilds the model; fails if the tensors do not fit the stored config.
    pub fn into_state(self) -> Result<TrainState> {
        let mut model = Model::from_params(self.config, self.params.clone())?;
        // frozen flags come from the file, not the template
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.entry(id).name.clone();
            model.params.set_frozen(id, self.params.by_name(&name)?.frozen);
        }
        Ok(TrainState { model, history: self.history })
    }

    /// Layout: magic, version u32, seed u64, JSON model config (u32 length
    /// prefix), stage count u32 + one code byte per stage (1, 2, 3, 4 = base),
    /// tensor count u32, then per tensor: name (u32 length + utf-8), dtype u8,
    /// trainable u8, rank u32, dims u64 each, row-major f32 payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION as usize);
        w.u64(self.seed);
        w.blob(&serde_json::to_vec(&self.config).expect("config serializes"));
        w.u32(self.history.len());
        self.history.iter().for_each(|&s| w.u8(stage_code(s)));
        w.u32(self.params.len());
        for e in self.params.entries() {
            w.str(&e.name);
            w.u8(DTYPE_F32);
            w.u8(!e.frozen as u8);
            w.u32(e.shape.len());
            e.shape.iter().for_each(|&d| w.u64(d as u64));
            e.data.iter().for_each(|&v| w.f32(v));
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
        let seed = r.u64()?;
        let config: ModelConfig = serde_json::from_slice(r.blob()?)
            .map_err(|e| CastError::Format(format!("bad model config: {e}")))?;
        let history = (0..r.u32()?).map(|_| stage_from_code(r.u8()?)).collect::<Result<Vec<_>>>()?;
        let n = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.str()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return format_err(format!("{name}: unknown dtype code {dtype}"));
            }
            let frozen = match r.u8()? {
                0 => true,
                1 => false,
                f => return format_err(format!("{name}: bad trainable flag {f}")),
            };
            let shape = (0..r.u32()?).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let data = r.f32s(numel.ok_or_else(|| CastError::Format(format!("{name}: shape overflow")))?)?;
            if params.id(&name).is_some() {
                return format_err(format!("duplicate tensor {name}"));
            }
            params.push(ParamEntry { name, shape, data, frozen });
        }
        r.finish()?;
        Ok(Self { config, history, seed, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Layout: magic, version u32, seed u64, then four sections (speakers, texts,
/// speech pairs, text pairs), each a u32 count followed by records that each
/// carry a u32 byte-length prefix.
pub fn corpus_to_bytes(c: &Corpus) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CORPUS_MAGIC);
    w.u32(CORPUS_VERSION as usize);
    w.u64(c.seed);
    fn section<T>(w: &mut Writer, items: &[T], f: impl Fn(&mut Writer, &T)) {
        w.u32(items.len());
        for it in items {
            let mut rec = Writer::default();
            f(&mut rec, it);
            w.blob(&rec.0);
        }
    }
    section(&mut w, &c.speakers, |w, s| {
        w.u8(s.pitch_idx);
        w.f32(s.tilt);
        w.f32(s.rate);
        w.f32(s.expressiveness);
    });
    section(&mut w, &c.texts, |w, t| w.str(t));
    section(&mut w, &c.speech, |w, p| {
        w.u32(p.speaker_idx as usize);
        w.mel(&p.prompt_mel);
        w.mel(&p.target_mel);
        w.blob(&p.target_chars);
    });
    section(&mut w, &c.text, |w, p| {
        w.u32(p.speaker_idx as usize);
        p.caption.levels().iter().for_each(|&l| w.u8(l));
        w.mel(&p.target_mel);
        w.blob(&p.target_chars);
    });
    w.0
}

pub fn corpus_from_bytes(buf: &[u8]) -> Result<Corpus> {
    let mut r = Reader::new(buf);
    r.header(CORPUS_MAGIC, CORPUS_VERSION, "corpus")?;
    let seed = r.u64()?;
    fn section<T>(r: &mut Reader<'_>, f: impl Fn(&mut Reader<'_>) -> Result<T>) -> Result<Vec<T>> {
        (0..r.u32()?)
            .map(|_| {
                let mut rec = Reader::new(r.blob()?);
                let v = f(&mut rec)?;
                rec.finish()?;
                Ok(v)
            })
            .collect()
    }
    let speakers = section(&mut r, |r| {
        let pitch = r.u8()?;
        let v = r.f32s(3)?;
        SpeakerParams::new(pitch, v[0], v[1], v[2]).map_err(|e| CastError::Format(e.to_string()))
    })?;
    let texts = section(&mut r, |r| r.str())?;
    let n_spk = speakers.len();
    let speaker_idx = |r: &mut Reader<'_>| -> Result<u32> {
        let i = r.u32()?;
        if i >= n_spk {
            return format_err(format!("speaker index {i} out of range"));
        }
        Ok(i as u32)
    };
    let speech = section(&mut r, |r| {
        let speaker_idx = speaker_idx(r)?;
        Ok(SpeechPair { speaker_idx, prompt_mel: r.mel()?, target_mel: r.mel()?, target_chars: r.blob()?.to_vec() })
    })?;
    let text = section(&mut r, |r| {
        let speaker_idx = speaker_idx(r)?;
        let l = r.take(4)?;
        let caption = Caption::new(l[0], l[1], l[2], l[3]).map_err(|e| CastError::Format(e.to_string()))?;
        Ok(TextPair { speaker_idx, caption, target_mel: r.mel()?, target_chars: r.blob()?.to_vec() })
    })?;
    r.finish()?;
    Ok(Corpus { seed, speakers, texts, speech, text })
}

pub fn save_corpus(c: &Corpus, path: &Path) -> Result<()> {
    Ok(fs::write(path, corpus_to_bytes(c))?)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    corpus_from_bytes(&fs::read(path)?)
}

/// Sampling settings recorded next to a generated grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MelHeader {
    pub frames: usize,
    pub bins: usize,
    pub seed: u64,
    pub cfg_scale: f64,
    pub num_steps: usize,
}

impl MelHeader {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "bins={}", self.bins);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "w={}", self.cfg_scale);
        let _ = writeln!(s, "num_steps={}", self.num_steps);
        s
    }
}

/// `<path>.txt`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

/// Magic, version u32, then the grid as rows u32, cols u32 and f32 payload.
pub fn mel_to_bytes(m: &MelGrid) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MEL_MAGIC);
    w.u32(MEL_VERSION as usize);
    w.mel(m);
    w.0
}

pub fn mel_from_bytes(buf: &[u8]) -> Result<MelGrid> {
    let mut r = Reader::new(buf);
    r.header(MEL_MAGIC, MEL_VERSION, "mel")?;
    let m = r.mel()?;
    r.finish()?;
    Ok(m)
}

/// Writes the grid and its sidecar header.
pub fn save_mel(m: &MelGrid, header: &MelHeader, path: &Path) -> Result<()> {
    fs::write(path, mel_to_bytes(m))?;
    fs::write(sidecar_path(path), header.render())?;
    Ok(())
}

pub fn load_mel(path: &Path) -> Result<MelGrid> {
    mel_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BlockConfig, Fusion};
    use crate::data::build_corpus;

    fn small_state() -> TrainState {
        let cfg = ModelConfig {
            block: BlockConfig { n_layers: 2, n_heads: 2, d_model: 8, d_timbre: 8, fusion: Fusion::CaTv },
            n_conv: 1,
            ..ModelConfig::default()
        };
        let mut s = TrainState::new(Model::new(cfg, 3).unwrap());
        s.history = vec![StageId::One, StageId::Two];
        s
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let ck = Checkpoint::from_state(&small_state(), 99);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let state = back.into_state().unwrap();
        assert_eq!(state.model.params, small_state().model.params);
        assert_eq!(state.history, vec![StageId::One, StageId::Two]);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let bytes = Checkpoint::from_state(&small_state(), 1).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CastError::Format(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CastError::Format(m)) if m.contains("version 7")));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
        assert!(Checkpoint::from_bytes(b"CAST").is_err());
    }

    #[test]
    fn mismatched_tensors_fail_to_load() {
        let mut ck = Checkpoint::from_state(&small_state(), 1);
        ck.config.block.d_model = 16;
        assert!(matches!(ck.into_state(), Err(CastError::Validation(_))));
    }

    #[test]
    fn corpus_round_trip_is_bit_exact() {
        let c = build_corpus(3, 4, 11).unwrap();
        let bytes = corpus_to_bytes(&c);
        let back = corpus_from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(corpus_to_bytes(&back), bytes);
        assert_eq!(&bytes[..8], CORPUS_MAGIC);
        assert!(corpus_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn mel_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.mel");
        let m = MelGrid::from_vec(2, 3, vec![0.5, -1.0, 2.25, f32::MIN_POSITIVE, 7.0, -0.0]).unwrap();
        let h = MelHeader { frames: 2, bins: 3, seed: 5, cfg_scale: 3.0, num_steps: 32 };
        save_mel(&m, &h, &path).unwrap();
        let back = load_mel(&path).unwrap();
        assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let side = fs::read_to_string(sidecar_path(&path)).unwrap();
        assert_eq!(side, "frames=2\nbins=3\nseed=5\nw=3\nnum_steps=32\n");
    }
}
