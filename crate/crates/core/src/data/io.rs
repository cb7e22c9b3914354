//! Text formats for manifests and fold files.
//!
//! Manifest (`.tsv`): `#`-prefixed header lines describe the vocabulary,
//! accents, speakers and sentences; every other line is one utterance:
//!
//! ```text
//! # maslora manifest v1
//! #vocab 64
//! #accent AR 0.6 0.1 7:34,12:35,19:36,25:37 38
//! #speaker AR0 AR 1234 0.83
//! #sentence 0 3 17 9 22
//! 0	AR0	AR	0	3 17 9 22	3 17 9 22
//! ```
//!
//! Utterance columns are tab-separated: id, speaker, accent, sentence id,
//! observed tokens, reference tokens (tokens space-separated). The accent
//! line carries `sub_rate insert_rate table insertions` where the table is
//! a comma list of `from:to` pairs. Severity is written with `{:?}` so it
//! parses back bit-exactly.
//!
//! Fold file: one block per fold.
//!
//! ```text
//! # maslora folds v1
//! fold 0
//! test_speakers AR=AR2 ZH=ZH0
//! train_sentences 4 9 ...
//! valid_sentences ...
//! test_sentences ...
//! train 0 1 ...
//! valid ...
//! test ...
//! end
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::accent::AccentId;
use crate::error::{Error, Result};

use super::corpus::{AccentSpec, Manifest, Sentence, Speaker, Token, Utterance};
use super::folds::FoldSpec;

const MANIFEST_HEADER: &str = "# maslora manifest v1";
const FOLDS_HEADER: &str = "# maslora folds v1";

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>> {
    s.split_whitespace()
        .map(|t| t.parse::<T>().map_err(|_| Error::Parse(format!("bad number {t:?}"))))
        .collect()
}

fn parse_one<T: FromStr>(s: &str) -> Result<T> {
    s.parse::<T>().map_err(|_| Error::Parse(format!("bad value {s:?}")))
}

pub fn write_manifest(m: &Manifest) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MANIFEST_HEADER}");
    let _ = writeln!(out, "#vocab {}", m.vocab_size);
    for a in &m.accents {
        let table = a.substitution.iter().map(|(f, t)| format!("{f}:{t}")).collect::<Vec<_>>().join(",");
        let ins = a.insertions.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "#accent {} {:?} {:?} {table} {}", a.id, a.sub_rate, a.insert_rate, if ins.is_empty() { "-".into() } else { ins });
    }
    for s in &m.speakers {
        let _ = writeln!(out, "#speaker {} {} {} {:?}", s.id, s.accent, s.idiolect_seed, s.severity);
    }
    for s in &m.sentences {
        let _ = writeln!(out, "#sentence {} {}", s.id, join(&s.canonical));
    }
    for u in &m.utterances {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            u.id,
            u.speaker,
            u.accent,
            u.sentence_id,
            join(&u.observed),
            join(&u.reference)
        );
    }
    out
}

pub fn read_manifest(text: &str) -> Result<Manifest> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::Parse("missing manifest header".into()));
    }
    let mut m = Manifest { vocab_size: 0, accents: Vec::new(), speakers: Vec::new(), sentences: Vec::new(), utterances: Vec::new() };
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let (tag, body) = rest.split_once(' ').unwrap_or((rest, ""));
            let f: Vec<&str> = body.split_whitespace().collect();
            match tag {
                "vocab" => m.vocab_size = parse_one(body.trim())?,
                "accent" if f.len() == 5 => {
                    let mut substitution = BTreeMap::new();
                    for pair in f[3].split(',').filter(|p| !p.is_empty()) {
                        let (a, b) = pair.split_once(':').ok_or_else(|| Error::Parse(format!("bad pair {pair:?}")))?;
                        substitution.insert(parse_one::<Token>(a)?, parse_one::<Token>(b)?);
                    }
                    let insertions = if f[4] == "-" {
                        Vec::new()
                    } else {
                        f[4].split(',').map(parse_one::<Token>).collect::<Result<_>>()?
                    };
                    m.accents.push(AccentSpec {
                        id: AccentId::new(f[0]),
                        substitution,
                        sub_rate: parse_one(f[1])?,
                        insert_rate: parse_one(f[2])?,
                        insertions,
                    });
                }
                "speaker" if f.len() == 4 => m.speakers.push(Speaker {
                    id: f[0].to_string(),
                    accent: AccentId::new(f[1]),
                    idiolect_seed: parse_one(f[2])?,
                    severity: parse_one(f[3])?,
                }),
                "sentence" if !f.is_empty() => m.sentences.push(Sentence {
                    id: parse_one(f[0])?,
                    canonical: f[1..].iter().map(|t| parse_one(t)).collect::<Result<_>>()?,
                }),
                "" => {}
                _ => return Err(Error::Parse(format!("bad header line {line:?}"))),
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(Error::Parse(format!("utterance line needs 6 columns: {line:?}")));
        }
        m.utterances.push(Utterance {
            id: parse_one(cols[0])?,
            speaker: cols[1].to_string(),
            accent: AccentId::new(cols[2]),
            sentence_id: parse_one(cols[3])?,
            observed: parse_list(cols[4])?,
            reference: parse_list(cols[5])?,
        });
    }
    Ok(m)
}

pub fn write_folds(folds: &[FoldSpec]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{FOLDS_HEADER}");
    for f in folds {
        let _ = writeln!(out, "fold {}", f.index);
        let spk = f.test_speakers.iter().map(|(a, s)| format!("{a}={s}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "test_speakers {spk}");
        let _ = writeln!(out, "train_sentences {}", join(&f.train_sentences));
        let _ = writeln!(out, "valid_sentences {}", join(&f.valid_sentences));
        let _ = writeln!(out, "test_sentences {}", join(&f.test_sentences));
        let _ = writeln!(out, "train {}", join(&f.train));
        let _ = writeln!(out, "valid {}", join(&f.valid));
        let _ = writeln!(out, "test {}", join(&f.test));
        let _ = writeln!(out, "end");
    }
    out
}

pub fn read_folds(text: &str) -> Result<Vec<FoldSpec>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(FOLDS_HEADER) {
        return Err(Error::Parse("missing folds header".into()));
    }
    let mut folds = Vec::new();
    let mut cur: Option<FoldSpec> = None;
    for line in lines {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        if key == "fold" {
            cur = Some(FoldSpec {
                index: parse_one(rest.trim())?,
                test_speakers: BTreeMap::new(),
                train_sentences: Vec::new(),
                valid_sentences: Vec::new(),
                test_sentences: Vec::new(),
                train: Vec::new(),
                valid: Vec::new(),
                test: Vec::new(),
            });
            continue;
        }
        let f = cur.as_mut().ok_or_else(|| Error::Parse(format!("{key:?} outside a fold block")))?;
        match key {
            "test_speakers" => {
                for kv in rest.split_whitespace() {
                    let (a, s) = kv.split_once('=').ok_or_else(|| Error::Parse(format!("bad speaker {kv:?}")))?;
                    f.test_speakers.insert(AccentId::new(a), s.to_string());
                }
            }
            "train_sentences" => f.train_sentences = parse_list(rest)?,
            "valid_sentences" => f.valid_sentences = parse_list(rest)?,
            "test_sentences" => f.test_sentences = parse_list(rest)?,
            "train" => f.train = parse_list(rest)?,
            "valid" => f.valid = parse_list(rest)?,
            "test" => f.test = parse_list(rest)?,
            "end" => folds.push(cur.take().expect("checked above")),
            _ => return Err(Error::Parse(format!("unknown fold key {key:?}"))),
        }
    }
    if cur.is_some() {
        return Err(Error::Parse("unterminated fold block".into()));
    }
    Ok(folds)
}
