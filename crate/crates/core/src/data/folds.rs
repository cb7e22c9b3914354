use std::collections::{BTreeMap, BTreeSet};

use crate::accent::AccentId;
use crate::error::{Error, Result};
use crate::numcore::Rng;

use super::corpus::Manifest;

#[derive(Clone, Debug, PartialEq)]
pub struct FoldOptions {
    pub k: usize,
    /// Sentence shares of (train, valid, test).
    pub ratios: (f64, f64, f64),
    /// Enforces 4 speakers per accent and `k` divisible by it.
    pub speaker_rotation: bool,
    pub seed: u64,
}

impl Default for FoldOptions {
    fn default() -> Self {
        Self { k: 8, ratios: (0.8, 0.1, 0.1), speaker_rotation: true, seed: 0 }
    }
}

/// One speaker- and sentence-disjoint train/valid/test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSpec {
    pub index: usize,
    pub test_speakers: BTreeMap<AccentId, String>,
    pub train_sentences: Vec<usize>,
    pub valid_sentences: Vec<usize>,
    pub test_sentences: Vec<usize>,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits `m` into `k` folds.
///
/// Per fold and accent one speaker is held out for test and the rest supply
/// train/valid utterances. Sentences are shuffled once and sliced into
/// contiguous (wrapping) test and valid windows that advance with the fold
/// index; everything else is train. Test speakers rotate so that, with
/// `k = 8` and 4 speakers, every speaker is tested exactly twice.
pub fn make_folds(m: &Manifest, opts: &FoldOptions) -> Result<Vec<FoldSpec>> {
    let accents = m.accent_ids();
    let spa = m.speakers_of(&accents[0]).len();
    if accents.iter().any(|a| m.speakers_of(a).len() != spa) {
        return Err(Error::Protocol("accents have unequal speaker counts".into()));
    }
    if spa < 2 {
        return Err(Error::Protocol("need at least 2 speakers per accent".into()));
    }
    if opts.k == 0 {
        return Err(Error::Protocol("k must be >= 1".into()));
    }
    if opts.speaker_rotation {
        if spa != 4 {
            return Err(Error::Protocol(format!("speaker-rotation protocol needs 4 speakers per accent, found {spa}")));
        }
        if !opts.k.is_multiple_of(spa) {
            return Err(Error::Protocol(format!("k = {} not divisible by {spa} speakers per accent", opts.k)));
        }
    }
    let (_, rv, rt) = opts.ratios;
    let n = m.sentences.len();
    let n_test = ((n as f64 * rt).round() as usize).max(1);
    let n_valid = ((n as f64 * rv).round() as usize).max(1);
    if n_test + n_valid >= n {
        return Err(Error::Protocol(format!("{n} sentences cannot fill a {n_valid}/{n_test} valid/test split")));
    }

    let mut rng = Rng::new(opts.seed);
    let mut order: Vec<usize> = m.sentences.iter().map(|s| s.id).collect();
    rng.shuffle(&mut order);
    let speaker_orders: BTreeMap<&AccentId, Vec<String>> = accents
        .iter()
        .map(|a| {
            let mut ids: Vec<String> = m.speakers_of(a).into_iter().map(|s| s.id.clone()).collect();
            rng.shuffle(&mut ids);
            (a, ids)
        })
        .collect();

    let mut folds = Vec::with_capacity(opts.k);
    for f in 0..opts.k {
        let start = (f * n_test) % n;
        let window = |off: usize, len: usize| -> Vec<usize> { (0..len).map(|j| order[(start + off + j) % n]).collect() };
        let test_sentences = window(0, n_test);
        let valid_sentences = window(n_test, n_valid);
        let held: BTreeSet<usize> = test_sentences.iter().chain(&valid_sentences).copied().collect();
        let train_sentences: Vec<usize> = order.iter().copied().filter(|s| !held.contains(s)).collect();
        let test_speakers: BTreeMap<AccentId, String> =
            speaker_orders.iter().map(|(a, ids)| ((*a).clone(), ids[f % spa].clone())).collect();

        let tr: BTreeSet<usize> = train_sentences.iter().copied().collect();
        let va: BTreeSet<usize> = valid_sentences.iter().copied().collect();
        let te: BTreeSet<usize> = test_sentences.iter().copied().collect();
        let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for u in &m.utterances {
            let is_test_speaker = test_speakers.get(&u.accent) == Some(&u.speaker);
            if is_test_speaker {
                if te.contains(&u.sentence_id) {
                    test.push(u.id);
                }
            } else if tr.contains(&u.sentence_id) {
                train.push(u.id);
            } else if va.contains(&u.sentence_id) {
                valid.push(u.id);
            }
        }
        folds.push(FoldSpec {
            index: f,
            test_speakers,
            train_sentences,
            valid_sentences,
            test_sentences,
            train,
            valid,
            test,
        });
    }
    Ok(folds)
}

/// Checks the disjointness invariants of one fold against its manifest.
pub fn audit_fold(m: &Manifest, fold: &FoldSpec) -> Result<()> {
    let set = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
    let (tr, va, te) = (set(&fold.train_sentences), set(&fold.valid_sentences), set(&fold.test_sentences));
    if !tr.is_disjoint(&va) || !tr.is_disjoint(&te) || !va.is_disjoint(&te) {
        return Err(Error::Protocol(format!("fold {}: sentence sets overlap", fold.index)));
    }
    let test_spk: BTreeSet<&String> = fold.test_speakers.values().collect();
    for (name, ids, sentences) in [("train", &fold.train, &tr), ("valid", &fold.valid, &va)] {
        for u in m.select(ids) {
            if test_spk.contains(&u.speaker) {
                return Err(Error::Protocol(format!("fold {}: test speaker {} in {name}", fold.index, u.speaker)));
            }
            if !sentences.contains(&u.sentence_id) {
                return Err(Error::Protocol(format!("fold {}: {name} sentence leak", fold.index)));
            }
        }
    }
    for u in m.select(&fold.test) {
        if !test_spk.contains(&u.speaker) || !te.contains(&u.sentence_id) {
            return Err(Error::Protocol(format!("fold {}: bad test utterance {}", fold.index, u.id)));
        }
    }
    for a in m.accent_ids() {
        for (name, ids) in [("train", &fold.train), ("valid", &fold.valid), ("test", &fold.test)] {
            if !m.select(ids).iter().any(|u| u.accent == a) {
                return Err(Error::Protocol(format!("fold {}: accent {a} missing from {name}", fold.index)));
            }
        }
    }
    Ok(())
}
