//! Model checkpoints: `model.idx` (config echo, seed, fine-tuning config and
//! one line per base matrix) plus `.bin` blobs, with adapter factors stored
//! alongside in the adapter checkpoint format (`adapters.idx`).
//!
//! ```text
//! # maslora model v1
//! config vocab_size=40 d_model=64 n_heads=4 enc_layers=2 dec_layers=2 ffn_dim=128 max_len=24
//! ft encoder=maslora decoder=lora attach=qv rank=16 alpha=1.0 accents=AR,ZH,HI
//! seed 7
//! param enc.0.attn.q.w0 64 64 enc.0.attn.q.w0.bin
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::accent::AccentId;
use crate::adapters::{load_adapters, save_adapters, AdapterRecord, Adapter, AttachSet, FtMethod};
use crate::blob;
use crate::error::{Error, Result};
use crate::numcore::{Mat, Rng};

use super::{FtConfig, ModelConfig, Transformer};

const HEADER: &str = "# maslora model v1";
const INDEX: &str = "model.idx";

pub fn save_model(dir: &Path, m: &Transformer) -> Result<()> {
    fs::create_dir_all(dir)?;
    let c = &m.cfg;
    let ft = &m.ft;
    let mut idx = String::new();
    let _ = writeln!(idx, "{HEADER}");
    let _ = writeln!(
        idx,
        "config vocab_size={} d_model={} n_heads={} enc_layers={} dec_layers={} ffn_dim={} max_len={}",
        c.vocab_size, c.d_model, c.n_heads, c.enc_layers, c.dec_layers, c.ffn_dim, c.max_len
    );
    let accents = ft.accents.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(",");
    let _ = writeln!(
        idx,
        "ft encoder={} decoder={} attach={} rank={} alpha={:?} accents={}",
        ft.encoder.name(),
        ft.decoder.name(),
        ft.attach,
        ft.rank,
        ft.alpha,
        if accents.is_empty() { "-".into() } else { accents }
    );
    let _ = writeln!(idx, "seed {}", m.seed);
    let mut err = None;
    m.visit_params(&mut |path, mat, _| {
        if path.contains(".lora.") || path.contains(".bank.") || err.is_some() {
            return;
        }
        let file = blob::file_name(path, ".bin");
        if let Err(e) = blob::write_mat(&dir.join(&file), mat) {
            err = Some(e);
        }
        let _ = writeln!(idx, "param {path} {} {} {file}", mat.rows(), mat.cols());
    });
    if let Some(e) = err {
        return Err(e);
    }
    fs::write(dir.join(INDEX), idx)?;

    let mut records = Vec::new();
    for (path, lin) in m.projections() {
        match &lin.adapter {
            Adapter::Lora(f) => records.push(AdapterRecord { layer_path: path, accent: None, factors: f.clone() }),
            Adapter::Bank(b) => {
                for (a, f) in b.accent_ids().iter().zip(b.experts()) {
                    records.push(AdapterRecord { layer_path: path.clone(), accent: Some(a.clone()), factors: f.clone() });
                }
            }
            Adapter::None | Adapter::Full => {}
        }
    }
    save_adapters(dir, &records)
}

fn kv<'a>(line: &'a str, prefix: &str) -> Result<HashMap<&'a str, &'a str>> {
    let body = line
        .strip_prefix(prefix)
        .ok_or_else(|| Error::Parse(format!("expected {prefix:?} line, found {line:?}")))?;
    body.split_whitespace()
        .map(|p| p.split_once('=').ok_or_else(|| Error::Parse(format!("bad key=value {p:?}"))))
        .collect()
}

fn get<T: std::str::FromStr>(map: &HashMap<&str, &str>, key: &str) -> Result<T> {
    map.get(key)
        .ok_or_else(|| Error::Parse(format!("missing {key}")))?
        .parse()
        .map_err(|_| Error::Parse(format!("bad {key}")))
}

pub fn load_model(dir: &Path) -> Result<Transformer> {
    let text = fs::read_to_string(dir.join(INDEX))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Parse(format!("{INDEX}: missing header")));
    }
    let c = kv(lines.next().unwrap_or(""), "config ")?;
    let cfg = ModelConfig {
        vocab_size: get(&c, "vocab_size")?,
        d_model: get(&c, "d_model")?,
        n_heads: get(&c, "n_heads")?,
        enc_layers: get(&c, "enc_layers")?,
        dec_layers: get(&c, "dec_layers")?,
        ffn_dim: get(&c, "ffn_dim")?,
        max_len: get(&c, "max_len")?,
    };
    let f = kv(lines.next().unwrap_or(""), "ft ")?;
    let accents_s: String = get(&f, "accents")?;
    let accents = if accents_s == "-" { Vec::new() } else { accents_s.split(',').map(AccentId::new).collect() };
    let ft = FtConfig {
        encoder: get::<String>(&f, "encoder")?.parse::<FtMethod>()?,
        decoder: get::<String>(&f, "decoder")?.parse::<FtMethod>()?,
        attach: get::<String>(&f, "attach")?.parse::<AttachSet>()?,
        rank: get(&f, "rank")?,
        alpha: get(&f, "alpha")?,
        accents,
    };
    let seed: u64 = lines
        .next()
        .and_then(|l| l.strip_prefix("seed "))
        .ok_or_else(|| Error::Parse("missing seed line".into()))?
        .trim()
        .parse()
        .map_err(|_| Error::Parse("bad seed".into()))?;

    let mut mats: HashMap<String, Mat> = HashMap::new();
    for line in lines {
        let p: Vec<&str> = line.split_whitespace().collect();
        if p.len() != 5 || p[0] != "param" {
            return Err(Error::Parse(format!("bad param line {line:?}")));
        }
        let rows = p[2].parse().map_err(|_| Error::Parse("bad rows".into()))?;
        let cols = p[3].parse().map_err(|_| Error::Parse("bad cols".into()))?;
        mats.insert(p[1].to_string(), blob::read_mat(&dir.join(p[4]), rows, cols)?);
    }
    for rec in load_adapters(dir)? {
        let stem = match &rec.accent {
            Some(a) => format!("{}.bank.{a}", rec.layer_path),
            None => format!("{}.lora", rec.layer_path),
        };
        mats.insert(format!("{stem}.A"), rec.factors.a);
        mats.insert(format!("{stem}.B"), rec.factors.b);
    }

    let mut m = Transformer::build(&cfg, &ft, &mut Rng::new(seed))?;
    let mut missing = None;
    m.visit_params_mut(&mut |path, mat, _| match mats.remove(path) {
        Some(v) if v.shape() == mat.shape() => *mat = v,
        _ => {
            missing.get_or_insert_with(|| path.to_string());
        }
    });
    if let Some(p) = missing {
        return Err(Error::Parse(format!("checkpoint lacks a matching matrix for {p}")));
    }
    if let Some(extra) = mats.keys().next() {
        return Err(Error::Parse(format!("checkpoint has unknown matrix {extra}")));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accent::default_accent_ids;

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig { vocab_size: 10, d_model: 8, n_heads: 2, enc_layers: 1, dec_layers: 1, ffn_dim: 8, max_len: 8 };
        let ft = FtConfig::new(FtMethod::MasLora, FtMethod::Lora, AttachSet::QV, 2, default_accent_ids(3));
        let mut m = Transformer::build(&cfg, &ft, &mut Rng::new(3)).unwrap();
        let mut r = Rng::new(99);
        m.visit_params_mut(&mut |p, mat, _| {
            if p.ends_with(".B") {
                *mat = r.gaussian_mat(mat.rows(), mat.cols(), 1.0);
            }
        });
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &m).unwrap();
        assert_eq!(load_model(dir.path()).unwrap(), m);
    }
}
