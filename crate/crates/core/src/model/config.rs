use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::accent::AccentId;
use crate::adapters::{AttachSet, FtMethod};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab_size: 64, d_model: 64, n_heads: 4, enc_layers: 2, dec_layers: 2, ffn_dim: 128, max_len: 24 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.ffn_dim == 0 || self.max_len < 3 {
            return bad("ffn_dim must be positive and max_len >= 3".into());
        }
        Ok(())
    }
}

/// Per-side fine-tuning methods plus adapter hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FtConfig {
    pub encoder: FtMethod,
    pub decoder: FtMethod,
    pub attach: AttachSet,
    pub rank: usize,
    pub alpha: f64,
    /// Expert order for every bank; unused unless a side is `MasLora`.
    pub accents: Vec<AccentId>,
}

impl FtConfig {
    pub fn new(encoder: FtMethod, decoder: FtMethod, attach: AttachSet, rank: usize, accents: Vec<AccentId>) -> Self {
        Self { encoder, decoder, attach, rank, alpha: 1.0, accents }
    }

    pub fn no_ft() -> Self {
        Self::new(FtMethod::NoFt, FtMethod::NoFt, AttachSet::QV, 16, Vec::new())
    }

    pub fn n_accents(&self) -> usize {
        self.accents.len()
    }

    pub fn has_bank(&self) -> bool {
        self.encoder == FtMethod::MasLora || self.decoder == FtMethod::MasLora
    }

    pub fn uses_adapters(&self) -> bool {
        self.encoder.is_adapter() || self.decoder.is_adapter()
    }

    pub fn validate(&self) -> Result<()> {
        if self.uses_adapters() && self.attach.is_empty() {
            return Err(Error::Config("adapter config needs a nonempty attach set".into()));
        }
        if self.has_bank() && self.accents.is_empty() {
            return Err(Error::Config("MasLora needs at least one accent".into()));
        }
        if self.uses_adapters() && self.rank == 0 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        Ok(())
    }

    /// Grid label such as `maslora-qv/lora-qv`.
    pub fn label(&self) -> String {
        format!("{}/{}", GridEntry::side_label(self.encoder, self.attach), GridEntry::side_label(self.decoder, self.attach))
    }
}

/// One row of a fine-tuning grid, parsed from labels like `maslora-qkvo/lora-qkvo`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridEntry {
    pub encoder: FtMethod,
    pub decoder: FtMethod,
    pub attach: AttachSet,
}

impl GridEntry {
    pub fn ft_config(&self, rank: usize, alpha: f64, accents: &[AccentId]) -> FtConfig {
        FtConfig { encoder: self.encoder, decoder: self.decoder, attach: self.attach, rank, alpha, accents: accents.to_vec() }
    }

    fn side_label(m: FtMethod, attach: AttachSet) -> String {
        if m.is_adapter() {
            format!("{}-{attach}", m.name())
        } else {
            m.name().to_string()
        }
    }

    /// The ten rows of the full comparison grid (`qv` and `qkvo` blocks).
    pub fn standard_grid() -> Vec<GridEntry> {
        use FtMethod::*;
        let mut out = vec![
            GridEntry { encoder: NoFt, decoder: NoFt, attach: AttachSet::QV },
            GridEntry { encoder: Full, decoder: Full, attach: AttachSet::QV },
        ];
        for attach in [AttachSet::QV, AttachSet::QKVO] {
            out.push(GridEntry { encoder: Lora, decoder: Lora, attach });
            for dec in [NoFt, Lora, MasLora] {
                out.push(GridEntry { encoder: MasLora, decoder: dec, attach });
            }
        }
        out
    }
}

impl fmt::Display for GridEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", Self::side_label(self.encoder, self.attach), Self::side_label(self.decoder, self.attach))
    }
}

impl FromStr for GridEntry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (enc, dec) = s
            .split_once('/')
            .ok_or_else(|| Error::Parse(format!("grid entry {s:?} must look like enc/dec")))?;
        let mut attach: Option<AttachSet> = None;
        let mut side = |part: &str| -> Result<FtMethod> {
            let part = part.trim();
            let (name, set) = match part.rsplit_once('-') {
                Some((n, a)) if a.parse::<AttachSet>().is_ok() && n.parse::<FtMethod>().is_ok() => (n, Some(a)),
                _ => (part, None),
            };
            let m: FtMethod = name.parse()?;
            if let Some(a) = set {
                let a: AttachSet = a.parse()?;
                if attach.is_some_and(|prev| prev != a) {
                    return Err(Error::Parse(format!("grid entry {s:?} mixes attach sets")));
                }
                attach = Some(a);
            } else if m.is_adapter() {
                return Err(Error::Parse(format!("{part:?} needs an attach suffix like -qv")));
            }
            Ok(m)
        };
        let encoder = side(enc)?;
        let decoder = side(dec)?;
        Ok(GridEntry { encoder, decoder, attach: attach.unwrap_or(AttachSet::QV) })
    }
}
