use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::accent::{default_accent_ids, AccentId};
use crate::error::{Error, Result};
use crate::numcore::Rng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First ordinary (word) token id.
pub const FIRST_WORD: usize = 3;

pub type Token = usize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub id: usize,
    pub canonical: Vec<Token>,
}

/// Pronunciation model of one accent: a token substitution table plus
/// accent-specific insertions.
#[derive(Clone, Debug, PartialEq)]
pub struct AccentSpec {
    pub id: AccentId,
    pub substitution: BTreeMap<Token, Token>,
    pub sub_rate: f64,
    pub insert_rate: f64,
    /// Tokens this accent inserts (drawn uniformly when an insertion fires).
    pub insertions: Vec<Token>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Speaker {
    pub id: String,
    pub accent: AccentId,
    pub idiolect_seed: u64,
    /// Scales the accent's rates, in `[0, 1]`.
    pub severity: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub id: usize,
    pub speaker: String,
    pub accent: AccentId,
    pub sentence_id: usize,
    pub observed: Vec<Token>,
    pub reference: Vec<Token>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub vocab_size: usize,
    pub accents: Vec<AccentSpec>,
    pub speakers: Vec<Speaker>,
    pub sentences: Vec<Sentence>,
    pub utterances: Vec<Utterance>,
}

impl Manifest {
    pub fn accent_ids(&self) -> Vec<AccentId> {
        self.accents.iter().map(|a| a.id.clone()).collect()
    }

    pub fn speakers_of(&self, accent: &AccentId) -> Vec<&Speaker> {
        self.speakers.iter().filter(|s| &s.accent == accent).collect()
    }

    pub fn utterance(&self, id: usize) -> Option<&Utterance> {
        // ids are dense and ordered by construction
        self.utterances.get(id).filter(|u| u.id == id).or_else(|| self.utterances.iter().find(|u| u.id == id))
    }

    pub fn select(&self, ids: &[usize]) -> Vec<&Utterance> {
        ids.iter().filter_map(|&i| self.utterance(i)).collect()
    }

    pub fn max_sequence_len(&self) -> usize {
        self.utterances.iter().map(|u| u.observed.len().max(u.reference.len())).max().unwrap_or(0)
    }
}

/// Knobs of the synthetic multi-accent corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_accents: usize,
    pub speakers_per_accent: usize,
    pub n_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Source tokens per accent substitution table.
    pub subs_per_accent: usize,
    pub sub_rate: f64,
    pub insert_rate: f64,
    pub severity_min: f64,
    pub severity_max: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_accents: 6,
            speakers_per_accent: 4,
            n_sentences: 100,
            min_len: 4,
            max_len: 8,
            vocab_size: 64,
            subs_per_accent: 4,
            sub_rate: 0.6,
            insert_rate: 0.1,
            severity_min: 0.6,
            severity_max: 1.0,
            seed: 2024,
        }
    }
}

impl CorpusConfig {
    pub fn n_words(&self) -> usize {
        self.vocab_size.saturating_sub(FIRST_WORD)
    }

    /// End (exclusive) of the canonical word range. Above it each accent owns
    /// `subs_per_accent` variant tokens plus one filler token; none of them
    /// ever appears in a reference.
    pub fn word_end(&self) -> usize {
        self.vocab_size.saturating_sub(self.n_accents * (self.subs_per_accent + 1))
    }

    fn validate(&self) -> Result<()> {
        if self.n_accents == 0 || self.speakers_per_accent == 0 || self.n_sentences == 0 {
            return Err(Error::Config("corpus counts must be >= 1".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        for (name, r) in [("sub_rate", self.sub_rate), ("insert_rate", self.insert_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} {r} outside [0, 1]")));
            }
        }
        if !(0.0..=self.severity_max).contains(&self.severity_min) || self.severity_max > 1.0 {
            return Err(Error::Config("severity range must lie in [0, 1]".into()));
        }
        if self.subs_per_accent == 1 {
            return Err(Error::Config("a substitution table needs at least 2 tokens".into()));
        }
        let needed = self.n_accents * (2 * self.subs_per_accent + 1);
        if needed >= self.n_words() {
            return Err(Error::Config(format!(
                "vocabulary of {} words cannot hold {} disjoint accent tables of {} (+1 filler) tokens",
                self.n_words(),
                self.n_accents,
                self.subs_per_accent
            )));
        }
        Ok(())
    }
}

/// Random canonical sentence over tokens `FIRST_WORD..word_end`.
pub fn random_sentence(id: usize, word_end: usize, min_len: usize, max_len: usize, rng: &mut Rng) -> Sentence {
    let len = rng.range_inclusive(min_len, max_len);
    let canonical = (0..len).map(|_| FIRST_WORD + rng.below(word_end - FIRST_WORD)).collect();
    Sentence { id, canonical }
}

/// Accented rendition of `s` for speaker `sp`.
///
/// Each token is replaced through the accent table with probability
/// `sub_rate × severity`; after each token an accent insertion is emitted with
/// probability `insert_rate × severity`.
pub fn accentize(s: &Sentence, a: &AccentSpec, sp: &Speaker, rng: &mut Rng) -> Vec<Token> {
    let p_sub = a.sub_rate * sp.severity;
    let p_ins = a.insert_rate * sp.severity;
    let mut out = Vec::with_capacity(s.canonical.len() + 2);
    for &tok in &s.canonical {
        // one draw per token keeps streams aligned across rates
        let u = rng.uniform();
        let mapped = match a.substitution.get(&tok) {
            Some(&to) if u < p_sub => to,
            _ => tok,
        };
        out.push(mapped);
        let v = rng.uniform();
        if v < p_ins && !a.insertions.is_empty() {
            out.push(a.insertions[rng.below(a.insertions.len())]);
        }
    }
    out
}

/// Substitution tables from disjoint word sets onto each accent's own variant
/// tokens, plus one dedicated filler token per accent.
fn accent_tables(cfg: &CorpusConfig, rng: &mut Rng) -> Vec<AccentSpec> {
    let mut words: Vec<Token> = (FIRST_WORD..cfg.word_end()).collect();
    rng.shuffle(&mut words);
    let ids = default_accent_ids(cfg.n_accents);
    let m = cfg.subs_per_accent;
    ids.into_iter()
        .enumerate()
        .map(|(i, id)| {
            let src = &words[i * m..(i + 1) * m];
            let own = cfg.word_end() + i * (m + 1);
            let substitution = src.iter().enumerate().map(|(j, &w)| (w, own + j)).collect();
            AccentSpec {
                id,
                substitution,
                sub_rate: cfg.sub_rate,
                insert_rate: cfg.insert_rate,
                insertions: vec![own + m],
            }
        })
        .collect()
}

/// Deterministic synthetic corpus: every speaker reads every sentence once.
pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Manifest> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let accents = accent_tables(cfg, &mut root.fork(1));
    let mut srng = root.fork(2);
    let sentences: Vec<Sentence> = (0..cfg.n_sentences)
        .map(|i| random_sentence(i, cfg.word_end(), cfg.min_len, cfg.max_len, &mut srng))
        .collect();
    let mut prng = root.fork(3);
    let mut speakers = Vec::new();
    for a in &accents {
        for s in 0..cfg.speakers_per_accent {
            let severity = cfg.severity_min + (cfg.severity_max - cfg.severity_min) * prng.uniform();
            speakers.push(Speaker {
                id: format!("{}{s}", a.id),
                accent: a.id.clone(),
                idiolect_seed: prng.next_u64(),
                severity,
            });
        }
    }
    let mut utterances = Vec::with_capacity(speakers.len() * sentences.len());
    for sp in &speakers {
        let accent = accents.iter().find(|a| a.id == sp.accent).expect("speaker accent exists");
        let srng = Rng::new(sp.idiolect_seed);
        for s in &sentences {
            let observed = accentize(s, accent, sp, &mut srng.fork(s.id as u64));
            utterances.push(Utterance {
                id: utterances.len(),
                speaker: sp.id.clone(),
                accent: sp.accent.clone(),
                sentence_id: s.id,
                observed,
                reference: s.canonical.clone(),
            });
        }
    }
    Ok(Manifest { vocab_size: cfg.vocab_size, accents, speakers, sentences, utterances })
}

/// Native (unaccented) utterances over fresh sentences; `observed == reference`.
pub fn gen_clean(n: usize, word_end: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<Utterance> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| {
            let s = random_sentence(i, word_end, min_len, max_len, &mut rng);
            Utterance {
                id: i,
                speaker: "native".into(),
                accent: AccentId::new("native"),
                sentence_id: i,
                observed: s.canonical.clone(),
                reference: s.canonical,
            }
        })
        .collect()
}
