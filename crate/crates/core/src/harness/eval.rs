use std::collections::BTreeMap;

use crate::accent::AccentId;
use crate::adapters::{mixture_weights, MixSpec};
use crate::data::Utterance;
use crate::error::Result;
use crate::metrics::{UttScore, WerSummary};
use crate::model::{Route, Transformer};

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// One score per utterance, in input order.
    pub scores: Vec<UttScore>,
    pub hyps: Vec<Vec<usize>>,
    pub summary: WerSummary,
}

/// Greedy-decodes every utterance and scores it.
///
/// Bank models are folded into plain weights before decoding. `Uniform`
/// needs no labels and uses one merged model; `Aware` and `Single` take each
/// utterance's own accent label as the target (whatever target `mix`
/// names) and use one merged model per accent.
pub fn evaluate(m: &Transformer, utts: &[&Utterance], mix: &MixSpec) -> Result<Evaluation> {
    let limit = m.cfg.max_len - 1;
    let mut merged: BTreeMap<Option<AccentId>, Transformer> = BTreeMap::new();
    let mut scores = Vec::with_capacity(utts.len());
    let mut hyps = Vec::with_capacity(utts.len());
    for u in utts {
        let key = match mix {
            MixSpec::Uniform => None,
            _ if !m.ft.has_bank() => None,
            _ => Some(u.accent.clone()),
        };
        if !merged.contains_key(&key) {
            let w = match (&key, mix) {
                _ if !m.ft.has_bank() => Vec::new(),
                (None, _) => mixture_weights(&MixSpec::Uniform, &m.ft.accents)?,
                (Some(t), MixSpec::Aware { beta, .. }) => {
                    mixture_weights(&MixSpec::Aware { target: t.clone(), beta: *beta }, &m.ft.accents)?
                }
                (Some(t), _) => mixture_weights(&MixSpec::Single { target: t.clone() }, &m.ft.accents)?,
            };
            merged.insert(key.clone(), m.merge_all(&w)?);
        }
        let mm = &merged[&key];
        let hyp = mm.greedy_decode(&u.observed, &Route::Mix(MixSpec::Uniform), limit)?;
        scores.push(UttScore::new(u.id, u.accent.clone(), &u.reference, &hyp)?);
        hyps.push(hyp);
    }
    let summary = WerSummary::from_scores(&scores);
    Ok(Evaluation { scores, hyps, summary })
}

/// Decodes with runtime expert mixing (no merge), for equivalence checks.
pub fn decode_runtime(m: &Transformer, utts: &[&Utterance], mix: &MixSpec) -> Result<Vec<Vec<usize>>> {
    let limit = m.cfg.max_len - 1;
    utts.iter().map(|u| m.greedy_decode(&u.observed, &Route::Mix(mix.clone()), limit)).collect()
}
