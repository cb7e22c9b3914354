use std::fmt;

use serde::{Deserialize, Serialize};

/// Accent label, e.g. `"AR"`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccentId(pub String);

impl AccentId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AccentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AccentId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// Labels for the first six accents; later ones are numbered.
const NAMES: [&str; 6] = ["AR", "ZH", "HI", "KR", "SP", "VI"];

pub fn default_accent_ids(n: usize) -> Vec<AccentId> {
    (0..n)
        .map(|i| match NAMES.get(i) {
            Some(s) if n <= NAMES.len() => AccentId::new(*s),
            _ => AccentId::new(format!("A{i}")),
        })
        .collect()
}
