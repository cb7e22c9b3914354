//! Low-rank adapters and accent-specific expert banks.
//!
//! A LoRA adapter replaces a frozen projection `W0` by `W0 + α·B·A` with
//! `A: r×k`, `B: d×r`. An [`ExpertBank`] holds one such pair per accent:
//! training routes each sample through its own accent's expert only, and
//! inference mixes all experts with a weight vector on the simplex
//! (see [`mixture_weights`]). Because every term is linear in `x`, a mixed
//! layer can be folded back into one dense matrix with [`merge`].
//!
//! Column convention for the public operations: inputs are `k × batch`,
//! outputs `d × batch`. The transformer uses the row form through
//! [`AdaptedLinear::forward_tape`].

mod budget;
mod checkpoint;

pub use budget::{param_count, AttachSet, FtMethod, ParamBudget, ParamShape, Proj};
pub use checkpoint::{load_adapters, save_adapters, AdapterRecord};

use crate::accent::AccentId;
use crate::error::{Error, Result};
use crate::numcore::{Mat, Rng, Tape, Var};

/// The `(A, B, α, r)` low-rank pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    pub a: Mat,
    pub b: Mat,
    pub alpha: f64,
}

impl LoraFactors {
    /// `A ~ N(0, 1/r)`, `B = 0`, so the adapted layer starts equal to the base.
    pub fn init(d: usize, k: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 || rank > d.min(k) {
            return Err(Error::Config(format!("rank {rank} must be in 1..={}", d.min(k))));
        }
        let a = rng.gaussian_mat(rank, k, 1.0 / (rank as f64).sqrt());
        Ok(Self { a, b: Mat::zeros(d, rank), alpha })
    }

    pub fn from_parts(a: Mat, b: Mat, alpha: f64) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(Error::shape("lora factors", b.shape(), a.shape()));
        }
        Ok(Self { a, b, alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d(&self) -> usize {
        self.b.rows()
    }

    pub fn k(&self) -> usize {
        self.a.cols()
    }

    /// Dense `α·B·A`.
    pub fn delta(&self) -> Mat {
        self.b.matmul(&self.a).expect("factor shapes checked at construction").scale(self.alpha)
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// One expert per accent, all sharing `(d, k, r, α)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank {
    accent_ids: Vec<AccentId>,
    experts: Vec<LoraFactors>,
}

impl ExpertBank {
    pub fn init(
        accent_ids: &[AccentId],
        d: usize,
        k: usize,
        rank: usize,
        alpha: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let experts = accent_ids
            .iter()
            .map(|_| LoraFactors::init(d, k, rank, alpha, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(accent_ids.to_vec(), experts)
    }

    pub fn new(accent_ids: Vec<AccentId>, experts: Vec<LoraFactors>) -> Result<Self> {
        if experts.is_empty() || experts.len() != accent_ids.len() {
            return Err(Error::Config(format!(
                "bank needs n >= 1 experts matching {} accent ids, got {}",
                accent_ids.len(),
                experts.len()
            )));
        }
        let first = &experts[0];
        let sig = (first.d(), first.k(), first.rank(), first.alpha);
        if experts.iter().any(|e| (e.d(), e.k(), e.rank(), e.alpha) != sig) {
            return Err(Error::Config("experts must share (d, k, r, alpha)".into()));
        }
        for (i, a) in accent_ids.iter().enumerate() {
            if accent_ids[..i].contains(a) {
                return Err(Error::Config(format!("duplicate accent id {a}")));
            }
        }
        Ok(Self { accent_ids, experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn accent_ids(&self) -> &[AccentId] {
        &self.accent_ids
    }

    pub fn experts(&self) -> &[LoraFactors] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [LoraFactors] {
        &mut self.experts
    }

    pub fn index_of(&self, accent: &AccentId) -> Result<usize> {
        self.accent_ids
            .iter()
            .position(|a| a == accent)
            .ok_or_else(|| Error::Routing(accent.to_string()))
    }

    pub fn expert(&self, accent: &AccentId) -> Result<&LoraFactors> {
        Ok(&self.experts[self.index_of(accent)?])
    }

    /// `α·Σ wᵢ·Bᵢ·Aᵢ` as a dense matrix.
    pub fn weighted_delta(&self, w: &[f64]) -> Result<Mat> {
        self.check_weights(w)?;
        let e0 = &self.experts[0];
        let mut acc = Mat::zeros(e0.d(), e0.k());
        for (e, &wi) in self.experts.iter().zip(w) {
            if wi != 0.0 {
                acc.add_scaled_in_place(&e.b.matmul(&e.a)?, wi * e.alpha)?;
            }
        }
        Ok(acc)
    }

    fn check_weights(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.len() {
            return Err(Error::shape("mixture weights", (self.len(), 1), (w.len(), 1)));
        }
        Ok(())
    }
}

/// How experts combine at inference.
#[derive(Clone, Debug, PartialEq)]
pub enum MixSpec {
    /// Equal `1/n` weights (accent unknown).
    Uniform,
    /// Target expert gets `1/β`; the rest share `1 − 1/β` equally.
    Aware { target: AccentId, beta: f64 },
    /// Only the target expert.
    Single { target: AccentId },
}

/// Weight vector over `accents` for `mix`.
///
/// `Aware(j, n)` returns exactly the uniform vector and `Aware(j, 1)` exactly
/// the one-hot vector.
pub fn mixture_weights(mix: &MixSpec, accents: &[AccentId]) -> Result<Vec<f64>> {
    let n = accents.len();
    if n == 0 {
        return Err(Error::Domain("mixture over zero experts".into()));
    }
    let target_index = |t: &AccentId| {
        accents.iter().position(|a| a == t).ok_or_else(|| Error::Routing(t.to_string()))
    };
    match mix {
        MixSpec::Uniform => Ok(vec![1.0 / n as f64; n]),
        MixSpec::Single { target } => {
            let j = target_index(target)?;
            Ok(one_hot(n, j))
        }
        MixSpec::Aware { target, beta } => {
            let beta = *beta;
            if !(1.0..=n as f64).contains(&beta) {
                return Err(Error::Domain(format!("beta {beta} outside [1, {n}]")));
            }
            let j = target_index(target)?;
            if beta == n as f64 {
                return Ok(vec![1.0 / n as f64; n]);
            }
            if beta == 1.0 {
                return Ok(one_hot(n, j));
            }
            let rest = (1.0 - 1.0 / beta) / (n - 1) as f64;
            let mut w = vec![rest; n];
            w[j] = 1.0 / beta;
            Ok(w)
        }
    }
}

fn one_hot(n: usize, j: usize) -> Vec<f64> {
    let mut w = vec![0.0; n];
    w[j] = 1.0;
    w
}

/// What sits on top of a frozen projection.
#[derive(Clone, Debug, PartialEq)]
pub enum Adapter {
    None,
    /// `W0` itself is trained.
    Full,
    Lora(LoraFactors),
    Bank(ExpertBank),
}

/// How a forward pass uses an expert bank.
#[derive(Clone, Debug, PartialEq)]
pub enum Routing {
    /// Training route: only expert `i`.
    Expert(usize),
    /// Inference mixture with one weight per expert.
    Weights(Vec<f64>),
}

/// A projection `h = W0·x (+ bias)` plus an optional adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedLinear {
    pub w0: Mat,
    /// Length-`d` bias stored as a `1 × d` row.
    pub bias: Option<Mat>,
    pub adapter: Adapter,
}

impl AdaptedLinear {
    pub fn new(w0: Mat, bias: Option<Mat>, adapter: Adapter) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != w0.rows() {
                return Err(Error::shape("bias", w0.shape(), b.shape()));
            }
        }
        let check = |f: &LoraFactors| {
            if (f.d(), f.k()) != w0.shape() {
                Err(Error::shape("adapter", w0.shape(), (f.d(), f.k())))
            } else {
                Ok(())
            }
        };
        match &adapter {
            Adapter::Lora(f) => check(f)?,
            Adapter::Bank(bank) => bank.experts().iter().try_for_each(check)?,
            Adapter::None | Adapter::Full => {}
        }
        Ok(Self { w0, bias, adapter })
    }

    pub fn d(&self) -> usize {
        self.w0.rows()
    }

    pub fn k(&self) -> usize {
        self.w0.cols()
    }

    /// Trainable parameters added on top of the base projection.
    pub fn adapter_param_count(&self) -> usize {
        match &self.adapter {
            Adapter::Lora(f) => f.param_count(),
            Adapter::Bank(b) => b.experts().iter().map(LoraFactors::param_count).sum(),
            Adapter::None | Adapter::Full => 0,
        }
    }

    fn base_cols(&self, x: &Mat) -> Result<Mat> {
        let mut h = self.w0.matmul(x)?;
        if let Some(b) = &self.bias {
            for i in 0..h.rows() {
                let bi = b.data()[i];
                h.row_mut(i).iter_mut().for_each(|v| *v += bi);
            }
        }
        Ok(h)
    }

    /// Row-form forward on a tape: `h = x·W0ᵀ (+ bias) + adapter terms`.
    ///
    /// `grad` marks the trainable parts of this layer as requiring gradients.
    /// Under [`Routing::Expert`] only that expert is placed on the graph, so
    /// no other expert can receive gradient.
    pub fn forward_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: Var,
        routing: Option<&Routing>,
        grad: bool,
    ) -> Result<Var> {
        let w0_trainable = grad && matches!(self.adapter, Adapter::Full);
        let w0 = tape.param(&self.w0, w0_trainable);
        let mut h = tape.matmul_t(x, w0)?;
        if let Some(b) = &self.bias {
            let bv = tape.param(b, w0_trainable);
            h = tape.add_row(h, bv)?;
        }
        match &self.adapter {
            Adapter::None | Adapter::Full => Ok(h),
            Adapter::Lora(f) => {
                let delta = low_rank_term(tape, x, f, f.alpha, grad)?;
                tape.add(h, delta)
            }
            Adapter::Bank(bank) => match routing {
                Some(Routing::Expert(i)) => {
                    let f = bank.experts.get(*i).ok_or(Error::Index { index: *i, size: bank.len() })?;
                    let delta = low_rank_term(tape, x, f, f.alpha, grad)?;
                    tape.add(h, delta)
                }
                Some(Routing::Weights(w)) => {
                    bank.check_weights(w)?;
                    for (f, &wi) in bank.experts.iter().zip(w) {
                        if wi == 0.0 {
                            continue;
                        }
                        let delta = low_rank_term(tape, x, f, f.alpha * wi, grad)?;
                        h = tape.add(h, delta)?;
                    }
                    Ok(h)
                }
                None => Err(Error::Routing("<none>: expert bank needs an accent or mixture".into())),
            },
        }
    }
}

/// `s · (x·Aᵀ)·Bᵀ` without materializing `B·A`.
fn low_rank_term<'a>(tape: &mut Tape<'a>, x: Var, f: &'a LoraFactors, s: f64, grad: bool) -> Result<Var> {
    let a = tape.param(&f.a, grad);
    let b = tape.param(&f.b, grad);
    let xa = tape.matmul_t(x, a)?;
    let xab = tape.matmul_t(xa, b)?;
    Ok(tape.scale(xab, s))
}

/// `(W0 + α·B·A)·x`, evaluated as `W0·x + α·B·(A·x)`.
pub fn lora_forward(x: &Mat, layer: &AdaptedLinear) -> Result<Mat> {
    let Adapter::Lora(f) = &layer.adapter else {
        return Err(Error::Config("lora_forward needs a Lora adapter".into()));
    };
    let mut h = layer.base_cols(x)?;
    h.add_scaled_in_place(&f.b.matmul(&f.a.matmul(x)?)?, f.alpha)?;
    Ok(h)
}

/// `(W0 + α·B_j·A_j)·x` for the expert of `accent`.
pub fn expert_forward(x: &Mat, layer: &AdaptedLinear, accent: &AccentId) -> Result<Mat> {
    let bank = bank_of(layer)?;
    let f = bank.expert(accent)?;
    let mut h = layer.base_cols(x)?;
    h.add_scaled_in_place(&f.b.matmul(&f.a.matmul(x)?)?, f.alpha)?;
    Ok(h)
}

/// `W0·x + α·Σ wᵢ·Bᵢ·(Aᵢ·x)`.
pub fn mixed_forward(x: &Mat, layer: &AdaptedLinear, w: &[f64]) -> Result<Mat> {
    let bank = bank_of(layer)?;
    bank.check_weights(w)?;
    let mut h = layer.base_cols(x)?;
    for (f, &wi) in bank.experts.iter().zip(w) {
        h.add_scaled_in_place(&f.b.matmul(&f.a.matmul(x)?)?, f.alpha * wi)?;
    }
    Ok(h)
}

/// Dense `W0 + α·Σ wᵢ·Bᵢ·Aᵢ`.
pub fn merge(layer: &AdaptedLinear, w: &[f64]) -> Result<Mat> {
    let bank = bank_of(layer)?;
    layer.w0.add(&bank.weighted_delta(w)?)
}

fn bank_of(layer: &AdaptedLinear) -> Result<&ExpertBank> {
    match &layer.adapter {
        Adapter::Bank(b) => Ok(b),
        _ => Err(Error::Config("layer has no expert bank".into())),
    }
}
