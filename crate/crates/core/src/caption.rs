//! Structured speaker captions: one discrete level per attribute.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, CastError, Result};

/// Speaker attributes described by a caption, in sequence order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Attribute {
    /// Coarse spectral tilt, the toy stand-in for gender.
    Gender,
    Pitch,
    Rate,
    Expressiveness,
}

impl Attribute {
    pub const ALL: [Attribute; 4] =
        [Attribute::Gender, Attribute::Pitch, Attribute::Rate, Attribute::Expressiveness];

    pub fn arity(self) -> u8 {
        3
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Gender => "gender",
            Attribute::Pitch => "pitch",
            Attribute::Rate => "rate",
            Attribute::Expressiveness => "expressiveness",
        }
    }

    pub fn level_names(self) -> [&'static str; 3] {
        match self {
            Attribute::Gender => ["dark", "neutral", "bright"],
            Attribute::Pitch => ["low", "mid", "high"],
            Attribute::Rate => ["slow", "normal", "fast"],
            Attribute::Expressiveness => ["flat", "normal", "expressive"],
        }
    }
}

/// A caption: exactly one level per [`Attribute`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Caption {
    levels: [u8; 4],
}

impl Caption {
    pub fn new(gender: u8, pitch: u8, rate: u8, expressiveness: u8) -> Result<Self> {
        Self::from_levels([gender, pitch, rate, expressiveness])
    }

    pub fn from_levels(levels: [u8; 4]) -> Result<Self> {
        for (attr, &lvl) in Attribute::ALL.iter().zip(&levels) {
            if lvl >= attr.arity() {
                return invalid(format!(
                    "level {lvl} out of range for {} (arity {})",
                    attr.name(),
                    attr.arity()
                ));
            }
        }
        Ok(Self { levels })
    }

    pub fn level(&self, attr: Attribute) -> u8 {
        self.levels[attr as usize]
    }

    pub fn levels(&self) -> [u8; 4] {
        self.levels
    }

    /// Every caption over the attribute grid, in lexicographic order.
    pub fn enumerate() -> Vec<Caption> {
        let mut out = Vec::new();
        for g in 0..3 {
            for p in 0..3 {
                for r in 0..3 {
                    for e in 0..3 {
                        out.push(Caption { levels: [g, p, r, e] });
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Caption {
    /// Renders as `gender=dark,pitch=mid,rate=fast,expressiveness=flat`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Attribute::ALL
            .iter()
            .map(|&a| format!("{}={}", a.name(), a.level_names()[self.level(a) as usize]))
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Caption {
    type Err = CastError;

    /// Accepts the [`Display`](fmt::Display) form, with either level names or
    /// numeric level ids; every attribute must appear exactly once.
    fn from_str(s: &str) -> Result<Self> {
        let mut levels: [Option<u8>; 4] = [None; 4];
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| CastError::InvalidArgument(format!("caption entry '{part}' lacks '='")))?;
            let attr = Attribute::ALL
                .iter()
                .copied()
                .find(|a| a.name() == key.trim())
                .ok_or_else(|| CastError::InvalidArgument(format!("unknown attribute '{key}'")))?;
            let value = value.trim();
            let lvl = match attr.level_names().iter().position(|&n| n == value) {
                Some(i) => i as u8,
                None => value
                    .parse::<u8>()
                    .map_err(|_| CastError::InvalidArgument(format!("unknown level '{value}' for {}", attr.name())))?,
            };
            let slot = &mut levels[attr as usize];
            if slot.is_some() {
                return invalid(format!("attribute {} given twice", attr.name()));
            }
            *slot = Some(lvl);
        }
        let mut out = [0u8; 4];
        for (i, l) in levels.iter().enumerate() {
            out[i] = l.ok_or_else(|| {
                CastError::InvalidArgument(format!("caption missing {}", Attribute::ALL[i].name()))
            })?;
        }
        Caption::from_levels(out)
    }
}
