use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::accent::AccentId;
use crate::adapters::{FtMethod, MixSpec};
use crate::data::{FoldSpec, Manifest, Utterance};
use crate::error::{Error, Result};
use crate::model::{FtConfig, Route, Transformer};
use crate::numcore::{Mat, Rng};

use super::eval::evaluate;

/// Learning rate after `step` of `total_steps`, falling linearly from `lr0`
/// to `lr0 / 2`.
pub fn lr_at(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Domain("total_steps must be >= 1".into()));
    }
    if step > total_steps {
        return Err(Error::Domain(format!("step {step} beyond total {total_steps}")));
    }
    Ok(lr0 * (1.0 - step as f64 / (2.0 * total_steps as f64)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial rate when either side is fully fine-tuned.
    pub lr_full: f64,
    /// Initial rate for adapter-only configurations.
    pub lr_adapter: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 3, batch_size: 16, lr_full: 1e-5, lr_adapter: 5e-5, seed: 0 }
    }
}

impl TrainConfig {
    pub fn lr0(&self, ft: &FtConfig) -> f64 {
        if ft.encoder == FtMethod::Full || ft.decoder == FtMethod::Full {
            self.lr_full
        } else {
            self.lr_adapter
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_full > 0.0 && self.lr_adapter > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        Ok(())
    }
}

/// Adam with per-parameter step counts; parameters that receive no gradient
/// in a step keep their moments and are not moved.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<Option<(Mat, Mat, i32)>>,
}

impl Adam {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, state: Vec::new() }
    }

    /// Applies `grads` (aligned with [`Transformer::visit_params`]).
    pub fn step(&mut self, m: &mut Transformer, grads: &[Option<Mat>], lr: f64) {
        if self.state.len() < grads.len() {
            self.state.resize(grads.len(), None);
        }
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut i = 0;
        let state = &mut self.state;
        m.visit_params_mut(&mut |_, p, _| {
            if let Some(Some(g)) = grads.get(i) {
                let (mom, vel, t) = state[i].get_or_insert_with(|| (Mat::zeros(g.rows(), g.cols()), Mat::zeros(g.rows(), g.cols()), 0));
                *t += 1;
                let c1 = 1.0 - b1.powi(*t);
                let c2 = 1.0 - b2.powi(*t);
                for (((w, &g), m1), v1) in p.data_mut().iter_mut().zip(g.data()).zip(mom.data_mut()).zip(vel.data_mut()) {
                    *m1 = b1 * *m1 + (1.0 - b1) * g;
                    *v1 = b2 * *v1 + (1.0 - b2) * g * g;
                    *w -= lr * (*m1 / c1) / ((*v1 / c2).sqrt() + eps);
                }
            }
            i += 1;
        });
    }
}

/// Mean loss and mean gradients over a batch of `(src, reference)` pairs
/// sharing one route.
pub fn batch_grads(m: &Transformer, batch: &[(&[usize], &[usize])], route: &Route) -> Result<(f64, Vec<Option<Mat>>)> {
    let mut total = 0.0;
    let mut acc: Vec<Option<Mat>> = Vec::new();
    for (src, reference) in batch {
        let (loss, grads) = m.loss_and_grads(src, reference, route)?;
        total += loss;
        if acc.is_empty() {
            acc = grads;
            continue;
        }
        for (a, g) in acc.iter_mut().zip(grads) {
            match (a.as_mut(), g) {
                (Some(a), Some(g)) => a.add_scaled_in_place(&g, 1.0)?,
                (None, Some(g)) => *a = Some(g),
                _ => {}
            }
        }
    }
    let n = batch.len().max(1) as f64;
    for g in acc.iter_mut().flatten() {
        *g = g.scale(1.0 / n);
    }
    Ok((total / n, acc))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_wer: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Transformer,
    /// Epoch 0 is the untrained starting point.
    pub history: Vec<EpochStat>,
    pub best_epoch: usize,
    /// Every utterance id that entered a training batch.
    pub seen: BTreeSet<usize>,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn best_valid_wer(&self) -> f64 {
        self.history[self.best_epoch].valid_wer
    }
}

/// Single-accent batches, shuffled within accent and interleaved
/// round-robin across accents.
pub fn accent_batches(utts: &[&Utterance], batch_size: usize, rng: &mut Rng) -> Vec<(AccentId, Vec<usize>)> {
    let mut by_accent: BTreeMap<&AccentId, Vec<usize>> = BTreeMap::new();
    for u in utts {
        by_accent.entry(&u.accent).or_default().push(u.id);
    }
    let mut queues: Vec<(AccentId, Vec<Vec<usize>>)> = by_accent
        .into_iter()
        .map(|(a, mut ids)| {
            rng.shuffle(&mut ids);
            (a.clone(), ids.chunks(batch_size).map(<[usize]>::to_vec).collect())
        })
        .collect();
    for (_, q) in &mut queues {
        q.reverse();
    }
    let mut out = Vec::new();
    loop {
        let mut any = false;
        for (a, q) in &mut queues {
            if let Some(b) = q.pop() {
                out.push((a.clone(), b));
                any = true;
            }
        }
        if !any {
            return out;
        }
    }
}

/// Fine-tunes `model` on `fold.train`, selecting the epoch (including the
/// untrained start) with the lowest validation WER under `valid_mix`.
pub fn train(model: &Transformer, m: &Manifest, fold: &FoldSpec, tc: &TrainConfig, valid_mix: &MixSpec) -> Result<TrainOutcome> {
    tc.validate()?;
    let train_utts = m.select(&fold.train);
    let valid_utts = m.select(&fold.valid);
    if model.ft.has_bank() {
        for u in train_utts.iter().chain(&valid_utts) {
            if !model.ft.accents.contains(&u.accent) {
                return Err(Error::Routing(format!("accent {} has no expert", u.accent)));
            }
        }
    }
    let valid_wer = |mm: &Transformer| -> Result<f64> {
        if valid_utts.is_empty() {
            return Ok(0.0);
        }
        Ok(evaluate(mm, &valid_utts, valid_mix)?.summary.pooled())
    };

    let mut history = vec![EpochStat { epoch: 0, train_loss: f64::NAN, valid_wer: valid_wer(model)? }];
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut seen = BTreeSet::new();
    if tc.epochs == 0 || train_utts.is_empty() || model.trainable_param_count() == 0 {
        return Ok(TrainOutcome { model: best, history, best_epoch, seen, steps: 0 });
    }

    let rng = Rng::new(tc.seed);
    let per_epoch = accent_batches(&train_utts, tc.batch_size, &mut rng.fork(0)).len();
    let total = per_epoch * tc.epochs;
    let lr0 = tc.lr0(&model.ft);
    let mut cur = model.clone();
    let mut opt = Adam::new();
    let mut step = 0;
    for epoch in 1..=tc.epochs {
        let batches = accent_batches(&train_utts, tc.batch_size, &mut rng.fork(epoch as u64));
        let mut loss_sum = 0.0;
        for (accent, ids) in &batches {
            let items: Vec<&Utterance> = m.select(ids);
            let pairs: Vec<(&[usize], &[usize])> = items.iter().map(|u| (&u.observed[..], &u.reference[..])).collect();
            seen.extend(ids.iter().copied());
            let (loss, grads) = batch_grads(&cur, &pairs, &Route::Accent(accent.clone()))?;
            loss_sum += loss;
            opt.step(&mut cur, &grads, lr_at(step, total, lr0)?);
            step += 1;
        }
        let stat = EpochStat { epoch, train_loss: loss_sum / batches.len() as f64, valid_wer: valid_wer(&cur)? };
        if stat.valid_wer < history[best_epoch].valid_wer {
            best = cur.clone();
            best_epoch = epoch;
        }
        history.push(stat);
    }
    Ok(TrainOutcome { model: best, history, best_epoch, seen, steps: step })
}

/// Clean copy-task pretraining of the shared base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub n_sentences: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 16, lr: 2e-3, n_sentences: 4000 }
    }
}

/// Trains every base weight on `data` (observed → reference) and returns the
/// adapter-free result with its per-step losses.
pub fn pretrain(base: &Transformer, data: &[Utterance], pc: &PretrainConfig, seed: u64) -> Result<(Transformer, Vec<f64>)> {
    if data.is_empty() || pc.batch_size == 0 {
        return Err(Error::Config("pretraining needs data and batch_size >= 1".into()));
    }
    let mut rng = Rng::new(seed);
    let full = FtConfig { encoder: FtMethod::Full, decoder: FtMethod::Full, ..FtConfig::no_ft() };
    let mut m = base.with_ft(&full, &mut rng)?;
    let mut opt = Adam::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut pos = order.len();
    let mut losses = Vec::with_capacity(pc.steps);
    for step in 0..pc.steps {
        let mut pairs = Vec::with_capacity(pc.batch_size);
        while pairs.len() < pc.batch_size {
            if pos == order.len() {
                rng.shuffle(&mut order);
                pos = 0;
            }
            let u = &data[order[pos]];
            pairs.push((&u.observed[..], &u.reference[..]));
            pos += 1;
        }
        let (loss, grads) = batch_grads(&m, &pairs, &Route::Mix(MixSpec::Uniform))?;
        losses.push(loss);
        opt.step(&mut m, &grads, lr_at(step, pc.steps, pc.lr)?);
    }
    Ok((m.with_ft(&FtConfig::no_ft(), &mut rng)?, losses))
}
