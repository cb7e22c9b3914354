//! Synthetic multi-accent corpus and the speaker/sentence-disjoint fold protocol.

mod corpus;
mod folds;
pub mod io;

pub use corpus::{
    accentize, gen_clean, gen_corpus, random_sentence, AccentSpec, CorpusConfig, Manifest, Sentence, Speaker,
    Token, Utterance, BOS, EOS, FIRST_WORD, PAD,
};
pub use folds::{audit_fold, make_folds, FoldOptions, FoldSpec};
