//! Trained-parameter accounting for fine-tuning configurations.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Proj {
    Q,
    K,
    V,
    O,
}

impl Proj {
    pub const ALL: [Proj; 4] = [Proj::Q, Proj::K, Proj::V, Proj::O];

    pub fn letter(self) -> char {
        match self {
            Proj::Q => 'q',
            Proj::K => 'k',
            Proj::V => 'v',
            Proj::O => 'o',
        }
    }
}

/// Subset of the attention projections that carry adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AttachSet(u8);

impl AttachSet {
    pub const QV: AttachSet = AttachSet(0b0101);
    pub const QKVO: AttachSet = AttachSet(0b1111);
    pub const EMPTY: AttachSet = AttachSet(0);

    pub fn of(projs: &[Proj]) -> Self {
        AttachSet(projs.iter().fold(0, |m, p| m | Self::bit(*p)))
    }

    fn bit(p: Proj) -> u8 {
        match p {
            Proj::Q => 1,
            Proj::K => 2,
            Proj::V => 4,
            Proj::O => 8,
        }
    }

    pub fn contains(self, p: Proj) -> bool {
        self.0 & Self::bit(p) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for AttachSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in Proj::ALL {
            if self.contains(p) {
                write!(f, "{}", p.letter())?;
            }
        }
        Ok(())
    }
}

impl FromStr for AttachSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = AttachSet::EMPTY;
        for c in s.chars() {
            let p = match c.to_ascii_lowercase() {
                'q' => Proj::Q,
                'k' => Proj::K,
                'v' => Proj::V,
                'o' => Proj::O,
                _ => return Err(Error::Parse(format!("bad attach set {s:?}"))),
            };
            set.0 |= Self::bit(p);
        }
        if set.is_empty() {
            return Err(Error::Parse("empty attach set".into()));
        }
        Ok(set)
    }
}

/// Fine-tuning method applied to one side (encoder or decoder).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FtMethod {
    NoFt,
    Full,
    Lora,
    /// One expert per accent; the count comes from the accent list.
    MasLora,
}

impl FtMethod {
    pub fn is_adapter(self) -> bool {
        matches!(self, FtMethod::Lora | FtMethod::MasLora)
    }

    pub fn name(self) -> &'static str {
        match self {
            FtMethod::NoFt => "noft",
            FtMethod::Full => "full",
            FtMethod::Lora => "lora",
            FtMethod::MasLora => "maslora",
        }
    }
}

impl FromStr for FtMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_', ' '], "").as_str() {
            "noft" | "none" => Ok(FtMethod::NoFt),
            "full" | "fullft" => Ok(FtMethod::Full),
            "lora" => Ok(FtMethod::Lora),
            "maslora" => Ok(FtMethod::MasLora),
            _ => Err(Error::Parse(format!("unknown fine-tuning method {s:?}"))),
        }
    }
}

/// Architecture facts needed to count adapter parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamShape {
    pub d_model: u64,
    pub enc_layers: u64,
    pub dec_layers: u64,
    pub attach: AttachSet,
    pub base_param_total: u64,
}

impl ParamShape {
    /// Whisper-small: d = 768, 12 + 12 layers, 241,734,912 base parameters.
    pub fn whisper_small(attach: AttachSet) -> Self {
        Self { d_model: 768, enc_layers: 12, dec_layers: 12, attach, base_param_total: 241_734_912 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamBudget {
    pub trained: u64,
    /// Percentage of the total model size, rounded to two decimals.
    pub percent: f64,
}

/// Trained-parameter count and share for an encoder/decoder method pair.
///
/// Each adapted `d × d` projection adds `r·2d` parameters for LoRA and
/// `n·r·2d` for a bank of `n` experts. The encoder has one attention block
/// per layer; the decoder has two (self and cross). The share is taken over
/// base plus added parameters. Full fine-tuning of either side counts the
/// whole base model as trained.
pub fn param_count(shape: &ParamShape, enc: FtMethod, dec: FtMethod, rank: u64, n_experts: u64) -> ParamBudget {
    let per_matrix = rank * 2 * shape.d_model;
    let attach = shape.attach.len() as u64;
    let side = |m: FtMethod, blocks: u64| -> u64 {
        match m {
            FtMethod::NoFt | FtMethod::Full => 0,
            FtMethod::Lora => blocks * attach * per_matrix,
            FtMethod::MasLora => blocks * attach * per_matrix * n_experts,
        }
    };
    let added = side(enc, shape.enc_layers) + side(dec, 2 * shape.dec_layers);
    let full = enc == FtMethod::Full || dec == FtMethod::Full;
    let trained = if full { shape.base_param_total + added } else { added };
    let total = shape.base_param_total + added;
    let percent = if total == 0 { 0.0 } else { 100.0 * trained as f64 / total as f64 };
    ParamBudget { trained, percent: (percent * 100.0).round() / 100.0 }
}
