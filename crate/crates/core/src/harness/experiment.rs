//! Experiment specs and the grid, zero-shot and beta-sweep drivers.
//!
//! A spec is a TOML document; every key has a default:
//!
//! ```toml
//! out_dir = "runs/toy"
//! seeds = [1, 2, 3]
//! folds = [0]
//! k = 8
//! fold_seed = 0
//! grid = ["noft/noft", "full/full", "lora-qv/lora-qv", "maslora-qv/lora-qv"]
//! rank = 4
//! alpha = 1.0
//! eval_mix = "uniform"        # or "aware:2", "single"
//! n_clean = 200
//! betas = [1, 2, 3, 4, 5, 6]
//! zero_shot = ["AR"]
//!
//! [corpus]                     # CorpusConfig
//! [model]                      # ModelConfig
//! [train]                      # TrainConfig
//! [pretrain]                   # PretrainConfig
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accent::AccentId;
use crate::adapters::{param_count, FtMethod, MixSpec, ParamShape};
use crate::data::{gen_clean, gen_corpus, make_folds, CorpusConfig, FoldOptions, FoldSpec, Manifest, Utterance};
use crate::error::{Error, Result};
use crate::metrics::{csv_string, fmt2, read_scores_csv, scores_csv, significance_csv, wer_table_csv, UttScore, WerSummary};
use crate::model::{load_model, save_model, GridEntry, ModelConfig, Transformer};
use crate::numcore::Rng;

use super::eval::evaluate;
use super::svg::line_plot;
use super::train::{pretrain, train, PretrainConfig, TrainConfig, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Output directory; empty means nothing is written.
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub folds: Vec<usize>,
    pub k: usize,
    pub fold_seed: u64,
    pub grid: Vec<String>,
    pub rank: usize,
    pub alpha: f64,
    pub eval_mix: String,
    pub n_clean: usize,
    pub betas: Vec<f64>,
    pub zero_shot: Vec<String>,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::new(),
            seeds: vec![1],
            folds: vec![0],
            k: 8,
            fold_seed: 0,
            grid: GridEntry::standard_grid().iter().map(ToString::to_string).collect(),
            rank: 4,
            alpha: 1.0,
            eval_mix: "uniform".into(),
            n_clean: 200,
            betas: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            zero_shot: Vec::new(),
            corpus: CorpusConfig { n_sentences: 400, ..CorpusConfig::default() },
            model: ModelConfig::default(),
            train: TrainConfig { lr_full: 2e-3, lr_adapter: 1e-2, ..TrainConfig::default() },
            pretrain: PretrainConfig::default(),
        }
    }
}

/// Parses `uniform`, `single` or `aware:<beta>`; targets are filled per
/// utterance at evaluation time.
pub fn parse_mix(s: &str) -> Result<MixSpec> {
    let placeholder = AccentId::new("*");
    match s.trim() {
        "uniform" => Ok(MixSpec::Uniform),
        "single" => Ok(MixSpec::Single { target: placeholder }),
        other => {
            let beta = other
                .strip_prefix("aware:")
                .and_then(|b| b.parse::<f64>().ok())
                .ok_or_else(|| Error::Config(format!("unknown mix {other:?}")))?;
            Ok(MixSpec::Aware { target: placeholder, beta })
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn grid_entries(&self) -> Result<Vec<GridEntry>> {
        self.grid.iter().map(|g| g.parse()).collect()
    }

    pub fn mix(&self) -> Result<MixSpec> {
        parse_mix(&self.eval_mix)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.grid_entries()?;
        self.mix()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if let Some(f) = self.folds.iter().find(|&&f| f >= self.k) {
            return Err(Error::Config(format!("fold {f} outside 0..{}", self.k)));
        }
        if self.corpus.vocab_size > self.model.vocab_size {
            return Err(Error::Config("corpus vocabulary exceeds the model's".into()));
        }
        Ok(())
    }

    fn out(&self) -> Option<&Path> {
        (!self.out_dir.as_os_str().is_empty()).then_some(self.out_dir.as_path())
    }
}

/// Corpus, folds and clean set materialized from a spec.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub manifest: Manifest,
    pub folds: Vec<FoldSpec>,
    pub clean: Vec<Utterance>,
}

impl Workspace {
    pub fn new(spec: &ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        let manifest = gen_corpus(&spec.corpus)?;
        if manifest.max_sequence_len() >= spec.model.max_len {
            return Err(Error::Config(format!(
                "utterances of {} tokens exceed model max_len {}",
                manifest.max_sequence_len(),
                spec.model.max_len
            )));
        }
        let opts = FoldOptions { k: spec.k, seed: spec.fold_seed, ..FoldOptions::default() };
        let folds = make_folds(&manifest, &opts)?;
        let c = &spec.corpus;
        let clean = gen_clean(spec.n_clean, c.word_end(), c.min_len, c.max_len, c.seed ^ 0xC1EA);
        Ok(Self { manifest, folds, clean })
    }

    pub fn fold(&self, f: usize) -> Result<&FoldSpec> {
        self.folds.get(f).ok_or(Error::Index { index: f, size: self.folds.len() })
    }
}

/// Pretrained shared base for `seed`, cached under `out_dir/base/seed<seed>`.
pub fn base_model(spec: &ExperimentSpec, seed: u64) -> Result<Transformer> {
    let cache = spec.out().map(|d| d.join("base").join(format!("seed{seed}")));
    if let Some(dir) = &cache {
        if dir.join("model.idx").exists() {
            return load_model(dir);
        }
    }
    let init = Transformer::init_base(&spec.model, &mut Rng::new(seed))?;
    let c = &spec.corpus;
    let data = gen_clean(spec.pretrain.n_sentences, c.word_end(), c.min_len, c.max_len, seed ^ 0x9E37);
    let (base, _) = pretrain(&init, &data, &spec.pretrain, seed)?;
    if let Some(dir) = &cache {
        save_model(dir, &base)?;
    }
    Ok(base)
}

/// Attaches `entry`'s adapters to `base` and fine-tunes on `fold`.
pub fn fine_tune(
    spec: &ExperimentSpec,
    base: &Transformer,
    entry: &GridEntry,
    accents: &[AccentId],
    m: &Manifest,
    fold: &FoldSpec,
    seed: u64,
) -> Result<TrainOutcome> {
    let ft = entry.ft_config(spec.rank, spec.alpha, accents);
    let mut rng = Rng::new(seed).fork(0xADA9 + fold.index as u64);
    let model = base.with_ft(&ft, &mut rng)?;
    let tc = TrainConfig { seed: seed.wrapping_mul(1000).wrapping_add(fold.index as u64), ..spec.train.clone() };
    train(&model, m, fold, &tc, &spec.mix()?)
}

fn audit_leakage(seen: &BTreeSet<usize>, test: &[usize], what: &str) -> Result<()> {
    if let Some(id) = test.iter().find(|id| seen.contains(id)) {
        return Err(Error::Protocol(format!("{what}: test utterance {id} was seen in training")));
    }
    Ok(())
}

/// Trained-parameter percentage under the full-size reference shape.
pub fn reference_params_pct(entry: &GridEntry, n_experts: usize) -> f64 {
    param_count(&ParamShape::whisper_small(entry.attach), entry.encoder, entry.decoder, 16, n_experts as u64).percent
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub seed: u64,
    pub fold: usize,
    pub accented: Vec<UttScore>,
    pub clean: Vec<UttScore>,
    pub best_epoch: usize,
    pub best_valid_wer: f64,
}

impl RunRecord {
    pub fn accented_wer(&self) -> f64 {
        WerSummary::from_scores(&self.accented).pooled()
    }

    pub fn clean_wer(&self) -> f64 {
        WerSummary::from_scores(&self.clean).pooled()
    }
}

#[derive(Clone, Debug)]
pub struct ConfigResult {
    pub entry: GridEntry,
    pub params_pct: f64,
    pub toy_params_pct: f64,
    pub runs: Vec<RunRecord>,
}

impl ConfigResult {
    pub fn label(&self) -> String {
        self.entry.to_string()
    }

    pub fn accented(&self) -> WerSummary {
        let mut s = WerSummary::default();
        for r in &self.runs {
            s.merge(&WerSummary::from_scores(&r.accented));
        }
        s
    }

    pub fn clean(&self) -> WerSummary {
        let mut s = WerSummary::default();
        for r in &self.runs {
            s.merge(&WerSummary::from_scores(&r.clean));
        }
        s
    }

    pub fn run(&self, seed: u64, fold: usize) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.seed == seed && r.fold == fold)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub accents: Vec<AccentId>,
    pub configs: Vec<ConfigResult>,
}

impl ExperimentReport {
    pub fn config(&self, label: &str) -> Option<&ConfigResult> {
        self.configs.iter().find(|c| c.label() == label)
    }

    /// `encoder,decoder,params_pct,toy_params_pct,accented_wer,clean_wer,runs`.
    pub fn table_csv(&self) -> Result<String> {
        let rows: Vec<Vec<String>> = self
            .configs
            .iter()
            .map(|c| {
                let label = c.label();
                let (enc, dec) = label.split_once('/').unwrap_or((&label, ""));
                vec![
                    enc.to_string(),
                    dec.to_string(),
                    fmt2(c.params_pct),
                    fmt2(c.toy_params_pct),
                    fmt2(c.accented().pooled()),
                    fmt2(c.clean().pooled()),
                    c.runs.len().to_string(),
                ]
            })
            .collect();
        csv_string(&["encoder", "decoder", "params_pct", "toy_params_pct", "accented_wer", "clean_wer", "runs"], &rows)
    }

    pub fn accent_csv(&self) -> Result<String> {
        let rows: Vec<(String, WerSummary)> = self.configs.iter().map(|c| (c.label(), c.accented())).collect();
        wer_table_csv(&self.accents, &rows)
    }

    pub fn runs_csv(&self) -> Result<String> {
        let mut rows = Vec::new();
        for c in &self.configs {
            for r in &c.runs {
                rows.push(vec![
                    c.label(),
                    r.seed.to_string(),
                    r.fold.to_string(),
                    fmt2(r.accented_wer()),
                    fmt2(r.clean_wer()),
                    r.best_epoch.to_string(),
                    fmt2(r.best_valid_wer),
                ]);
            }
        }
        csv_string(&["config", "seed", "fold", "accented_wer", "clean_wer", "best_epoch", "best_valid_wer"], &rows)
    }

    pub fn significance_csv(&self) -> Result<String> {
        let systems: Vec<(String, Vec<UttScore>)> =
            self.configs.iter().map(|c| (c.label(), c.runs.iter().flat_map(|r| r.accented.clone()).collect())).collect();
        significance_csv(&systems)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("table.csv"), self.table_csv()?)?;
        fs::write(dir.join("accents.csv"), self.accent_csv()?)?;
        fs::write(dir.join("runs.csv"), self.runs_csv()?)?;
        fs::write(dir.join("significance.csv"), self.significance_csv()?)?;
        Ok(())
    }
}

fn slug(label: &str) -> String {
    label.replace('/', "__")
}

fn run_cache(spec: &ExperimentSpec, label: &str, seed: u64, fold: usize) -> Option<PathBuf> {
    spec.out().map(|d| d.join("scores").join(format!("{}_s{seed}_f{fold}", slug(label))))
}

fn load_run(dir: &Path, seed: u64, fold: usize) -> Result<Option<RunRecord>> {
    let meta = dir.join("meta.txt");
    if !meta.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&meta)?;
    let mut it = text.split_whitespace();
    let best_epoch = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse("bad meta".into()))?;
    let best_valid_wer = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse("bad meta".into()))?;
    Ok(Some(RunRecord {
        seed,
        fold,
        accented: read_scores_csv(&fs::read_to_string(dir.join("accented.csv"))?)?,
        clean: read_scores_csv(&fs::read_to_string(dir.join("clean.csv"))?)?,
        best_epoch,
        best_valid_wer,
    }))
}

fn save_run(dir: &Path, r: &RunRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("accented.csv"), scores_csv(&r.accented)?)?;
    fs::write(dir.join("clean.csv"), scores_csv(&r.clean)?)?;
    // meta last: its presence marks the run complete
    fs::write(dir.join("meta.txt"), format!("{} {:?}\n", r.best_epoch, r.best_valid_wer))?;
    Ok(())
}

/// Fine-tunes and evaluates every grid entry on every (seed, fold).
///
/// Each finished run is written under `out_dir/scores` and reused when the
/// experiment is resumed.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    run_experiment_with(spec, &mut |_| {})
}

/// As [`run_experiment`], calling `progress` after every run.
pub fn run_experiment_with(spec: &ExperimentSpec, progress: &mut dyn FnMut(&str)) -> Result<ExperimentReport> {
    let ws = Workspace::new(spec)?;
    let entries = spec.grid_entries()?;
    let accents = ws.manifest.accent_ids();
    let mix = spec.mix()?;
    let toy_base = Transformer::init_base(&spec.model, &mut Rng::new(0))?.param_shape();
    let mut configs: Vec<ConfigResult> = entries
        .iter()
        .map(|e| ConfigResult {
            entry: *e,
            params_pct: reference_params_pct(e, accents.len()),
            toy_params_pct: param_count(
                &ParamShape { attach: e.attach, ..toy_base },
                e.encoder,
                e.decoder,
                spec.rank as u64,
                accents.len() as u64,
            )
            .percent,
            runs: Vec::new(),
        })
        .collect();
    for &seed in &spec.seeds {
        let mut base: Option<Transformer> = None;
        for &f in &spec.folds {
            let fold = ws.fold(f)?;
            let test = ws.manifest.select(&fold.test);
            let clean: Vec<&Utterance> = ws.clean.iter().collect();
            for c in configs.iter_mut() {
                let label = c.label();
                let cache = run_cache(spec, &label, seed, f);
                if let Some(dir) = &cache {
                    if let Some(r) = load_run(dir, seed, f)? {
                        c.runs.push(r);
                        continue;
                    }
                }
                if base.is_none() {
                    base = Some(base_model(spec, seed)?);
                }
                let b = base.as_ref().expect("set above");
                let out = fine_tune(spec, b, &c.entry, &accents, &ws.manifest, fold, seed)?;
                audit_leakage(&out.seen, &fold.test, &label)?;
                let run = RunRecord {
                    seed,
                    fold: f,
                    accented: evaluate(&out.model, &test, &mix)?.scores,
                    clean: evaluate(&out.model, &clean, &MixSpec::Uniform)?.scores,
                    best_epoch: out.best_epoch,
                    best_valid_wer: out.best_valid_wer(),
                };
                if let Some(dir) = &cache {
                    save_run(dir, &run)?;
                }
                progress(&format!(
                    "seed={seed} fold={f} config={label} accented_wer={} clean_wer={} best_epoch={}",
                    fmt2(run.accented_wer()),
                    fmt2(run.clean_wer()),
                    run.best_epoch
                ));
                c.runs.push(run);
            }
        }
    }
    let report = ExperimentReport { accents, configs };
    if let Some(dir) = spec.out() {
        report.write(dir)?;
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct ZeroShotRow {
    pub label: String,
    /// Held-out accent with its pooled WER over all runs.
    pub wer: Vec<(AccentId, f64)>,
    pub bank_sizes: Vec<usize>,
}

/// For each held-out accent: drop its utterances from train and valid, fine-tune
/// every grid entry (banks get `n − 1` experts) and score the uniform mixture on
/// that accent's test utterances.
pub fn zero_shot(spec: &ExperimentSpec, held_out: &[AccentId]) -> Result<Vec<ZeroShotRow>> {
    let ws = Workspace::new(spec)?;
    let all = ws.manifest.accent_ids();
    for h in held_out {
        if !all.contains(h) {
            return Err(Error::Config(format!("unknown accent {h}")));
        }
    }
    let entries = spec.grid_entries()?;
    let mut rows: Vec<ZeroShotRow> =
        entries.iter().map(|e| ZeroShotRow { label: e.to_string(), wer: Vec::new(), bank_sizes: Vec::new() }).collect();
    let bases: Vec<Transformer> = spec.seeds.iter().map(|&s| base_model(spec, s)).collect::<Result<_>>()?;
    for h in held_out {
        let seen_accents: Vec<AccentId> = all.iter().filter(|a| *a != h).cloned().collect();
        let mut summaries = vec![WerSummary::default(); entries.len()];
        for (&seed, base) in spec.seeds.iter().zip(&bases) {
            for &f in &spec.folds {
                let full = ws.fold(f)?;
                let keep = |ids: &[usize]| -> Vec<usize> {
                    ws.manifest.select(ids).into_iter().filter(|u| &u.accent != h).map(|u| u.id).collect()
                };
                let fold = FoldSpec { train: keep(&full.train), valid: keep(&full.valid), ..full.clone() };
                let held_ids: Vec<usize> = ws.manifest.utterances.iter().filter(|u| &u.accent == h).map(|u| u.id).collect();
                let test: Vec<&Utterance> =
                    ws.manifest.select(&full.test).into_iter().filter(|u| &u.accent == h).collect();
                for (i, e) in entries.iter().enumerate() {
                    let out = fine_tune(spec, base, e, &seen_accents, &ws.manifest, &fold, seed)?;
                    audit_leakage(&out.seen, &held_ids, &format!("zero-shot {h}"))?;
                    if let Some(b) = out.model.banks().first() {
                        rows[i].bank_sizes.push(b.len());
                    }
                    summaries[i].merge(&evaluate(&out.model, &test, &MixSpec::Uniform)?.summary);
                }
            }
        }
        for (row, s) in rows.iter_mut().zip(&summaries) {
            row.wer.push((h.clone(), s.pooled()));
        }
    }
    if let Some(dir) = spec.out() {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("zero_shot.csv"), zero_shot_csv(&rows, held_out)?)?;
    }
    Ok(rows)
}

pub fn zero_shot_csv(rows: &[ZeroShotRow], held_out: &[AccentId]) -> Result<String> {
    let mut header = vec!["encoder", "decoder"];
    header.extend(held_out.iter().map(AccentId::as_str));
    header.push("Mean");
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let (enc, dec) = r.label.split_once('/').unwrap_or((&r.label, ""));
            let mut v = vec![enc.to_string(), dec.to_string()];
            v.extend(r.wer.iter().map(|(_, w)| fmt2(*w)));
            let mean = r.wer.iter().map(|(_, w)| w).sum::<f64>() / r.wer.len().max(1) as f64;
            v.push(fmt2(mean));
            v
        })
        .collect();
    csv_string(&header, &body)
}

/// Accent-aware WER for each `beta` (targets taken from utterance labels).
pub fn beta_sweep(m: &Transformer, utts: &[&Utterance], betas: &[f64]) -> Result<Vec<(f64, f64)>> {
    if m.ft.encoder != FtMethod::MasLora {
        return Err(Error::Config("beta sweep needs a MasLora encoder".into()));
    }
    let n = m.ft.n_accents() as f64;
    if let Some(b) = betas.iter().find(|b| !(1.0..=n).contains(*b)) {
        return Err(Error::Domain(format!("beta {b} outside [1, {n}]")));
    }
    betas
        .iter()
        .map(|&beta| {
            let mix = MixSpec::Aware { target: AccentId::new("*"), beta };
            Ok((beta, evaluate(m, utts, &mix)?.summary.pooled()))
        })
        .collect()
}

pub fn beta_csv(points: &[(f64, f64)]) -> Result<String> {
    let rows: Vec<Vec<String>> = points.iter().map(|(b, w)| vec![format!("{b}"), fmt2(*w)]).collect();
    csv_string(&["beta", "wer"], &rows)
}

pub fn write_beta_outputs(dir: &Path, points: &[(f64, f64)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("beta.csv"), beta_csv(points)?)?;
    fs::write(dir.join("beta.svg"), line_plot(points, "Accent-aware WER vs beta", "beta", "WER (%)"))?;
    Ok(())
}
