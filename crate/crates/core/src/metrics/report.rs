//! Per-utterance scores aggregated into per-accent and pooled WER, and the
//! CSV layouts used by the experiment runner.

use std::collections::BTreeMap;

use crate::accent::AccentId;
use crate::error::{Error, Result};

use super::mapsswe::mapsswe;
use super::wer::align;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UttScore {
    pub id: usize,
    pub accent: AccentId,
    pub errors: usize,
    pub ref_len: usize,
}

impl UttScore {
    pub fn new(id: usize, accent: AccentId, reference: &[usize], hyp: &[usize]) -> Result<Self> {
        let a = align(reference, hyp)?;
        Ok(Self { id, accent, errors: a.errors(), ref_len: a.ref_len })
    }
}

/// Error and word totals per accent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WerSummary {
    pub per_accent: BTreeMap<AccentId, (usize, usize)>,
}

impl WerSummary {
    pub fn from_scores(scores: &[UttScore]) -> Self {
        let mut per_accent: BTreeMap<AccentId, (usize, usize)> = BTreeMap::new();
        for s in scores {
            let e = per_accent.entry(s.accent.clone()).or_default();
            e.0 += s.errors;
            e.1 += s.ref_len;
        }
        Self { per_accent }
    }

    pub fn accent(&self, a: &AccentId) -> Option<f64> {
        self.per_accent.get(a).map(|&(e, w)| 100.0 * e as f64 / w as f64)
    }

    pub fn pooled(&self) -> f64 {
        let (e, w) = self.per_accent.values().fold((0, 0), |(e, w), &(a, b)| (e + a, w + b));
        if w == 0 {
            return 0.0;
        }
        100.0 * e as f64 / w as f64
    }

    /// Unweighted mean of the per-accent WERs.
    pub fn macro_mean(&self) -> f64 {
        if self.per_accent.is_empty() {
            return 0.0;
        }
        let s: f64 = self.per_accent.keys().filter_map(|a| self.accent(a)).sum();
        s / self.per_accent.len() as f64
    }

    pub fn merge(&mut self, other: &WerSummary) {
        for (a, &(e, w)) in &other.per_accent {
            let t = self.per_accent.entry(a.clone()).or_default();
            t.0 += e;
            t.1 += w;
        }
    }
}

pub fn fmt2(x: f64) -> String {
    format!("{x:.2}")
}

/// Renders `header` and `rows` as CSV text.
pub fn csv_string<S: AsRef<str>>(header: &[&str], rows: &[Vec<S>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Io(e.into()))?;
    for r in rows {
        w.write_record(r.iter().map(AsRef::as_ref)).map_err(|e| Error::Io(e.into()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

/// `config,<accent>...,Mean,Pooled` with one row per labelled summary.
pub fn wer_table_csv(accents: &[AccentId], rows: &[(String, WerSummary)]) -> Result<String> {
    let mut header = vec!["config"];
    header.extend(accents.iter().map(AccentId::as_str));
    header.extend(["Mean", "Pooled"]);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, s)| {
            let mut r = vec![label.clone()];
            r.extend(accents.iter().map(|a| s.accent(a).map(fmt2).unwrap_or_default()));
            r.push(fmt2(s.macro_mean()));
            r.push(fmt2(s.pooled()));
            r
        })
        .collect();
    csv_string(&header, &body)
}

/// Pairwise significance over systems scored on the same segments, in the
/// same order.
pub fn significance_csv(systems: &[(String, Vec<UttScore>)]) -> Result<String> {
    let mut rows = Vec::new();
    for (i, (la, sa)) in systems.iter().enumerate() {
        for (lb, sb) in &systems[i + 1..] {
            if sa.iter().map(|s| s.id).ne(sb.iter().map(|s| s.id)) {
                return Err(Error::Protocol(format!("{la} and {lb} were scored on different segments")));
            }
            let ea: Vec<usize> = sa.iter().map(|s| s.errors).collect();
            let eb: Vec<usize> = sb.iter().map(|s| s.errors).collect();
            let r = mapsswe(&ea, &eb)?;
            rows.push(vec![
                la.clone(),
                lb.clone(),
                r.n_segments.to_string(),
                format!("{:.4}", r.z),
                format!("{:.4}", r.p),
                if r.significant { "significant" } else { "not-significant" }.to_string(),
                r.degenerate.to_string(),
            ]);
        }
    }
    csv_string(&["system_a", "system_b", "n", "z", "p", "verdict", "degenerate"], &rows)
}

/// Per-utterance scores as `id,accent,errors,ref_len`.
pub fn scores_csv(scores: &[UttScore]) -> Result<String> {
    let rows: Vec<Vec<String>> = scores
        .iter()
        .map(|s| vec![s.id.to_string(), s.accent.to_string(), s.errors.to_string(), s.ref_len.to_string()])
        .collect();
    csv_string(&["id", "accent", "errors", "ref_len"], &rows)
}

pub fn read_scores_csv(text: &str) -> Result<Vec<UttScore>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Parse("short scores row".into()));
        let num = |i: usize| -> Result<usize> { field(i)?.parse().map_err(|_| Error::Parse("bad scores number".into())) };
        out.push(UttScore { id: num(0)?, accent: AccentId::new(field(1)?), errors: num(2)?, ref_len: num(3)? });
    }
    Ok(out)
}
