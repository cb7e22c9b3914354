//! Adapter checkpoints: a directory holding `adapters.idx` plus one `.bin`
//! blob per factor matrix.
//!
//! Index format, one record per line after the `#` header:
//!
//! ```text
//! # maslora adapters v1
//! # layer_path accent d k r alpha a_file b_file
//! enc.0.attn.q AR 64 64 16 1 enc.0.attn.q@AR.A.bin enc.0.attn.q@AR.B.bin
//! ```
//!
//! `accent` is `-` for a plain (non-bank) adapter. Blobs are row-major
//! little-endian `f64` with no header; `A` is `r × k` and `B` is `d × r`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::LoraFactors;
use crate::accent::AccentId;
use crate::blob;
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "adapters.idx";
const HEADER: &str = "# maslora adapters v1";

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterRecord {
    pub layer_path: String,
    pub accent: Option<AccentId>,
    pub factors: LoraFactors,
}

pub fn save_adapters(dir: &Path, records: &[AdapterRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::new();
    index.push_str(HEADER);
    index.push_str("\n# layer_path accent d k r alpha a_file b_file\n");
    for rec in records {
        let tag = rec.accent.as_ref().map_or("-".to_string(), |a| a.to_string());
        let stem = if rec.accent.is_some() { format!("{}@{tag}", rec.layer_path) } else { rec.layer_path.clone() };
        let a_file = blob::file_name(&stem, ".A.bin");
        let b_file = blob::file_name(&stem, ".B.bin");
        let f = &rec.factors;
        blob::write_mat(&dir.join(&a_file), &f.a)?;
        blob::write_mat(&dir.join(&b_file), &f.b)?;
        let _ = writeln!(
            index,
            "{} {tag} {} {} {} {:?} {a_file} {b_file}",
            rec.layer_path,
            f.d(),
            f.k(),
            f.rank(),
            f.alpha
        );
    }
    fs::write(dir.join(INDEX_FILE), index)?;
    Ok(())
}

pub fn load_adapters(dir: &Path) -> Result<Vec<AdapterRecord>> {
    let text = fs::read_to_string(dir.join(INDEX_FILE))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Parse(format!("{}: missing header", INDEX_FILE)));
    }
    let mut out = Vec::new();
    for line in lines {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(Error::Parse(format!("bad adapter record: {line:?}")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
        let (d, k, r) = (num(f[2])?, num(f[3])?, num(f[4])?);
        let alpha: f64 = f[5].parse().map_err(|e| Error::Parse(format!("{:?}: {e}", f[5])))?;
        let a = blob::read_mat(&dir.join(f[6]), r, k)?;
        let b = blob::read_mat(&dir.join(f[7]), d, r)?;
        out.push(AdapterRecord {
            layer_path: f[0].to_string(),
            accent: (f[1] != "-").then(|| AccentId::new(f[1])),
            factors: LoraFactors::from_parts(a, b, alpha)?,
        });
    }
    Ok(out)
}
