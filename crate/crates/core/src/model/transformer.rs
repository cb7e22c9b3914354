use crate::accent::AccentId;
use crate::adapters::{
    merge, mixture_weights, AdaptedLinear, Adapter, AttachSet, ExpertBank, FtMethod, LoraFactors, MixSpec,
    ParamShape, Proj, Routing,
};
use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::numcore::{Mat, Rng, Tape, Var, LN_EPS};

use super::config::{FtConfig, ModelConfig};

/// How a forward pass picks experts.
#[derive(Clone, Debug, PartialEq)]
pub enum Route {
    /// Training route: only this accent's expert.
    Accent(AccentId),
    /// Inference mixture.
    Mix(MixSpec),
    /// Explicit weights in bank order.
    Weights(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Mat,
    pub bias: Mat,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self { gain: Mat::filled(1, d, 1.0), bias: Mat::zeros(1, d) }
    }

    fn forward<'a>(&'a self, t: &mut Tape<'a>, x: Var, grad: bool) -> Result<Var> {
        let g = t.param(&self.gain, grad);
        let b = t.param(&self.bias, grad);
        t.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

impl FeedForward {
    fn init(d: usize, ffn: usize, rng: &mut Rng) -> Self {
        Self {
            w1: rng.gaussian_mat(ffn, d, 1.0 / (d as f64).sqrt()),
            b1: Mat::zeros(1, ffn),
            w2: rng.gaussian_mat(d, ffn, 1.0 / (ffn as f64).sqrt()),
            b2: Mat::zeros(1, d),
        }
    }

    fn forward<'a>(&'a self, t: &mut Tape<'a>, x: Var, grad: bool) -> Result<Var> {
        let w1 = t.param(&self.w1, grad);
        let b1 = t.param(&self.b1, grad);
        let w2 = t.param(&self.w2, grad);
        let b2 = t.param(&self.b2, grad);
        let h = t.matmul_t(x, w1)?;
        let h = t.add_row(h, b1)?;
        let h = t.gelu(h);
        let h = t.matmul_t(h, w2)?;
        t.add_row(h, b2)
    }
}

/// Q/K/V/O projections of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub q: AdaptedLinear,
    pub k: AdaptedLinear,
    pub v: AdaptedLinear,
    pub o: AdaptedLinear,
}

impl Attention {
    fn init(d: usize, rng: &mut Rng) -> Self {
        let mut lin = || {
            AdaptedLinear::new(rng.gaussian_mat(d, d, 1.0 / (d as f64).sqrt()), None, Adapter::None)
                .expect("square projection")
        };
        Self { q: lin(), k: lin(), v: lin(), o: lin() }
    }

    fn projections(&self) -> [(Proj, &AdaptedLinear); 4] {
        [(Proj::Q, &self.q), (Proj::K, &self.k), (Proj::V, &self.v), (Proj::O, &self.o)]
    }

    fn projections_mut(&mut self) -> [(Proj, &mut AdaptedLinear); 4] {
        [(Proj::Q, &mut self.q), (Proj::K, &mut self.k), (Proj::V, &mut self.v), (Proj::O, &mut self.o)]
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<'a>(
        &'a self,
        t: &mut Tape<'a>,
        xq: Var,
        xkv: Var,
        heads: usize,
        causal: bool,
        routing: Option<&Routing>,
        grad: bool,
    ) -> Result<Var> {
        let q = self.q.forward_tape(t, xq, routing, grad)?;
        let k = self.k.forward_tape(t, xkv, routing, grad)?;
        let v = self.v.forward_tape(t, xkv, routing, grad)?;
        let a = t.attention(q, k, v, heads, causal)?;
        self.o.forward_tape(t, a, routing, grad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

/// Pre-LN encoder-decoder transformer whose attention projections can carry
/// LoRA adapters or accent expert banks.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub cfg: ModelConfig,
    pub ft: FtConfig,
    pub seed: u64,
    pub src_embed: Mat,
    pub tgt_embed: Mat,
    pub enc: Vec<EncoderLayer>,
    pub enc_ln: LayerNorm,
    pub dec: Vec<DecoderLayer>,
    pub dec_ln: LayerNorm,
    pub out_w: Mat,
    pub out_b: Mat,
    pos: Mat,
}

macro_rules! bank_experts {
    ($bank:ident) => {
        $bank.experts().iter()
    };
    ($bank:ident mut) => {
        $bank.experts_mut().iter_mut()
    };
}

/// Visits every parameter in a fixed order with its path and trainability.
macro_rules! visit_body {
    ($self:ident, $f:ident, $iter:ident, $($m:tt)?) => {{
        let enc_full = $self.ft.encoder == FtMethod::Full;
        let dec_full = $self.ft.decoder == FtMethod::Full;
        fn lin(path: &str, l: & $($m)? AdaptedLinear, f: &mut dyn FnMut(&str, & $($m)? Mat, bool)) {
            let w0_train = matches!(l.adapter, Adapter::Full);
            f(&format!("{path}.w0"), & $($m)? l.w0, w0_train);
            if let Some(b) = & $($m)? l.bias {
                f(&format!("{path}.bias"), b, w0_train);
            }
            match & $($m)? l.adapter {
                Adapter::Lora(fa) => {
                    f(&format!("{path}.lora.A"), & $($m)? fa.a, true);
                    f(&format!("{path}.lora.B"), & $($m)? fa.b, true);
                }
                Adapter::Bank(bank) => {
                    let ids: Vec<AccentId> = bank.accent_ids().to_vec();
                    for (id, e) in ids.iter().zip(bank_experts!(bank $($m)?)) {
                        f(&format!("{path}.bank.{id}.A"), & $($m)? e.a, true);
                        f(&format!("{path}.bank.{id}.B"), & $($m)? e.b, true);
                    }
                }
                Adapter::None | Adapter::Full => {}
            }
        }
        fn attn(path: &str, a: & $($m)? Attention, f: &mut dyn FnMut(&str, & $($m)? Mat, bool)) {
            lin(&format!("{path}.q"), & $($m)? a.q, f);
            lin(&format!("{path}.k"), & $($m)? a.k, f);
            lin(&format!("{path}.v"), & $($m)? a.v, f);
            lin(&format!("{path}.o"), & $($m)? a.o, f);
        }
        fn ln(path: &str, l: & $($m)? LayerNorm, train: bool, f: &mut dyn FnMut(&str, & $($m)? Mat, bool)) {
            f(&format!("{path}.gain"), & $($m)? l.gain, train);
            f(&format!("{path}.bias"), & $($m)? l.bias, train);
        }
        fn ffn(path: &str, l: & $($m)? FeedForward, train: bool, f: &mut dyn FnMut(&str, & $($m)? Mat, bool)) {
            f(&format!("{path}.w1"), & $($m)? l.w1, train);
            f(&format!("{path}.b1"), & $($m)? l.b1, train);
            f(&format!("{path}.w2"), & $($m)? l.w2, train);
            f(&format!("{path}.b2"), & $($m)? l.b2, train);
        }
        $f("src_embed", & $($m)? $self.src_embed, enc_full);
        for (i, l) in $self.enc.$iter().enumerate() {
            ln(&format!("enc.{i}.ln_attn"), & $($m)? l.ln_attn, enc_full, $f);
            attn(&format!("enc.{i}.attn"), & $($m)? l.attn, $f);
            ln(&format!("enc.{i}.ln_ffn"), & $($m)? l.ln_ffn, enc_full, $f);
            ffn(&format!("enc.{i}.ffn"), & $($m)? l.ffn, enc_full, $f);
        }
        ln("enc_ln", & $($m)? $self.enc_ln, enc_full, $f);
        $f("tgt_embed", & $($m)? $self.tgt_embed, dec_full);
        for (i, l) in $self.dec.$iter().enumerate() {
            ln(&format!("dec.{i}.ln_self"), & $($m)? l.ln_self, dec_full, $f);
            attn(&format!("dec.{i}.self"), & $($m)? l.self_attn, $f);
            ln(&format!("dec.{i}.ln_cross"), & $($m)? l.ln_cross, dec_full, $f);
            attn(&format!("dec.{i}.cross"), & $($m)? l.cross_attn, $f);
            ln(&format!("dec.{i}.ln_ffn"), & $($m)? l.ln_ffn, dec_full, $f);
            ffn(&format!("dec.{i}.ffn"), & $($m)? l.ffn, dec_full, $f);
        }
        ln("dec_ln", & $($m)? $self.dec_ln, dec_full, $f);
        $f("out_w", & $($m)? $self.out_w, dec_full);
        $f("out_b", & $($m)? $self.out_b, dec_full);
    }};
}


fn sinusoidal(max_len: usize, d: usize) -> Mat {
    Mat::from_fn(max_len, d, |p, i| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = p as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl Transformer {
    /// Draws base weights first, then adapters, so two configs built from the
    /// same seed share identical base matrices.
    pub fn build(cfg: &ModelConfig, ft: &FtConfig, rng: &mut Rng) -> Result<Self> {
        let base = Self::init_base(cfg, rng)?;
        base.with_ft(ft, rng)
    }

    /// Adapter-free model with freshly drawn weights.
    pub fn init_base(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let seed = rng.seed();
        let src_embed = rng.gaussian_mat(v, d, 1.0);
        let tgt_embed = rng.gaussian_mat(v, d, 1.0);
        let enc = (0..cfg.enc_layers)
            .map(|_| EncoderLayer {
                ln_attn: LayerNorm::new(d),
                attn: Attention::init(d, rng),
                ln_ffn: LayerNorm::new(d),
                ffn: FeedForward::init(d, cfg.ffn_dim, rng),
            })
            .collect();
        let dec = (0..cfg.dec_layers)
            .map(|_| DecoderLayer {
                ln_self: LayerNorm::new(d),
                self_attn: Attention::init(d, rng),
                ln_cross: LayerNorm::new(d),
                cross_attn: Attention::init(d, rng),
                ln_ffn: LayerNorm::new(d),
                ffn: FeedForward::init(d, cfg.ffn_dim, rng),
            })
            .collect();
        let out_w = rng.gaussian_mat(v, d, 1.0 / (d as f64).sqrt());
        Ok(Self {
            cfg: cfg.clone(),
            ft: FtConfig::no_ft(),
            seed,
            src_embed,
            tgt_embed,
            enc,
            enc_ln: LayerNorm::new(d),
            dec,
            dec_ln: LayerNorm::new(d),
            out_w,
            out_b: Mat::zeros(1, v),
            pos: sinusoidal(cfg.max_len, d),
        })
    }

    /// Copy of this model's base weights with `ft`'s adapters attached.
    ///
    /// Existing adapters are dropped (not merged).
    pub fn with_ft(&self, ft: &FtConfig, rng: &mut Rng) -> Result<Self> {
        ft.validate()?;
        let mut m = self.clone();
        m.ft = ft.clone();
        let d = self.cfg.d_model;
        let attach_side = |a: &mut Attention, method: FtMethod, rng: &mut Rng| -> Result<()> {
            for (p, lin) in a.projections_mut() {
                lin.adapter = match method {
                    FtMethod::NoFt => Adapter::None,
                    FtMethod::Full => Adapter::Full,
                    FtMethod::Lora if ft.attach.contains(p) => {
                        Adapter::Lora(LoraFactors::init(d, d, ft.rank, ft.alpha, rng)?)
                    }
                    FtMethod::MasLora if ft.attach.contains(p) => {
                        Adapter::Bank(ExpertBank::init(&ft.accents, d, d, ft.rank, ft.alpha, rng)?)
                    }
                    FtMethod::Lora | FtMethod::MasLora => Adapter::None,
                };
            }
            Ok(())
        };
        for l in &mut m.enc {
            attach_side(&mut l.attn, ft.encoder, rng)?;
        }
        for l in &mut m.dec {
            attach_side(&mut l.self_attn, ft.decoder, rng)?;
            attach_side(&mut l.cross_attn, ft.decoder, rng)?;
        }
        Ok(m)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Mat, bool)) {
        visit_body!(self, f, iter,)
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat, bool)) {
        visit_body!(self, f, iter_mut, mut)
    }

    fn attentions(&self) -> impl Iterator<Item = (String, &Attention)> {
        let enc = self.enc.iter().enumerate().map(|(i, l)| (format!("enc.{i}.attn"), &l.attn));
        let dec = self.dec.iter().enumerate().flat_map(|(i, l)| {
            [(format!("dec.{i}.self"), &l.self_attn), (format!("dec.{i}.cross"), &l.cross_attn)]
        });
        enc.chain(dec)
    }

    /// Every adapted projection with its layer path, e.g. `enc.0.attn.q`.
    pub fn projections(&self) -> Vec<(String, &AdaptedLinear)> {
        self.attentions()
            .flat_map(|(path, a)| a.projections().map(move |(p, l)| (format!("{path}.{}", p.letter()), l)))
            .collect()
    }

    pub fn adapter_param_count(&self) -> usize {
        self.projections().iter().map(|(_, l)| l.adapter_param_count()).sum()
    }

    /// Parameters of the adapter-free model.
    pub fn base_param_count(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |path, m, _| {
            if !path.contains(".lora.") && !path.contains(".bank.") {
                total += m.len();
            }
        });
        total
    }

    pub fn trainable_param_count(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, m, train| {
            if train {
                total += m.len();
            }
        });
        total
    }

    pub fn param_shape(&self) -> ParamShape {
        ParamShape {
            d_model: self.cfg.d_model as u64,
            enc_layers: self.cfg.enc_layers as u64,
            dec_layers: self.cfg.dec_layers as u64,
            attach: self.ft.attach,
            base_param_total: self.base_param_count() as u64,
        }
    }

    pub fn banks(&self) -> Vec<&ExpertBank> {
        self.projections()
            .into_iter()
            .filter_map(|(_, l)| match &l.adapter {
                Adapter::Bank(b) => Some(b),
                _ => None,
            })
            .collect()
    }

    /// Resolves a route against this model's banks (`None` when it has none).
    pub fn resolve(&self, route: &Route) -> Result<Option<Routing>> {
        if !self.ft.has_bank() {
            return Ok(None);
        }
        let accents = &self.ft.accents;
        Ok(Some(match route {
            Route::Accent(a) => Routing::Expert(
                accents.iter().position(|x| x == a).ok_or_else(|| Error::Routing(a.to_string()))?,
            ),
            Route::Mix(mix) => Routing::Weights(mixture_weights(mix, accents)?),
            Route::Weights(w) => {
                if w.len() != accents.len() {
                    return Err(Error::shape("route weights", (accents.len(), 1), (w.len(), 1)));
                }
                Routing::Weights(w.clone())
            }
        }))
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.cfg.max_len {
            return Err(Error::Length { len, max: self.cfg.max_len });
        }
        if len == 0 {
            return Err(Error::Domain("empty sequence".into()));
        }
        Ok(())
    }

    fn embed<'a>(&'a self, t: &mut Tape<'a>, table: &'a Mat, ids: &[usize], grad: bool) -> Result<Var> {
        self.check_len(ids.len())?;
        let tv = t.param(table, grad);
        let e = t.embed(tv, ids)?;
        let pos = Mat::from_fn(ids.len(), self.cfg.d_model, |i, j| self.pos.get(i, j));
        t.add_const(e, &pos)
    }

    /// Encoder memory for `src`.
    pub fn encode<'a>(&'a self, t: &mut Tape<'a>, src: &[usize], routing: Option<&Routing>, train: bool) -> Result<Var> {
        let full = train && self.ft.encoder == FtMethod::Full;
        let heads = self.cfg.n_heads;
        let mut x = self.embed(t, &self.src_embed, src, full)?;
        for l in &self.enc {
            let h = l.ln_attn.forward(t, x, full)?;
            let a = l.attn.forward(t, h, h, heads, false, routing, train)?;
            x = t.add(x, a)?;
            let h = l.ln_ffn.forward(t, x, full)?;
            let f = l.ffn.forward(t, h, full)?;
            x = t.add(x, f)?;
        }
        self.enc_ln.forward(t, x, full)
    }

    /// Teacher-forced logits (`len(tgt) × vocab`) given encoder memory.
    pub fn decode<'a>(
        &'a self,
        t: &mut Tape<'a>,
        mem: Var,
        tgt: &[usize],
        routing: Option<&Routing>,
        train: bool,
    ) -> Result<Var> {
        let full = train && self.ft.decoder == FtMethod::Full;
        let heads = self.cfg.n_heads;
        let mut y = self.embed(t, &self.tgt_embed, tgt, full)?;
        for l in &self.dec {
            let h = l.ln_self.forward(t, y, full)?;
            let a = l.self_attn.forward(t, h, h, heads, true, routing, train)?;
            y = t.add(y, a)?;
            let h = l.ln_cross.forward(t, y, full)?;
            let a = l.cross_attn.forward(t, h, mem, heads, false, routing, train)?;
            y = t.add(y, a)?;
            let h = l.ln_ffn.forward(t, y, full)?;
            let f = l.ffn.forward(t, h, full)?;
            y = t.add(y, f)?;
        }
        let y = self.dec_ln.forward(t, y, full)?;
        let w = t.param(&self.out_w, full);
        let b = t.param(&self.out_b, full);
        let logits = t.matmul_t(y, w)?;
        t.add_row(logits, b)
    }

    /// Teacher-forced logits for `tgt_prefix` (which should start with BOS).
    pub fn forward(&self, src: &[usize], tgt_prefix: &[usize], route: &Route) -> Result<Mat> {
        let routing = self.resolve(route)?;
        let mut t = Tape::new();
        let mem = self.encode(&mut t, src, routing.as_ref(), false)?;
        let logits = self.decode(&mut t, mem, tgt_prefix, routing.as_ref(), false)?;
        Ok(t.value(logits).clone())
    }

    /// Records the training loss for one `(src, reference)` pair on `t`.
    ///
    /// The decoder reads `BOS + reference` and predicts `reference + EOS`.
    pub fn loss<'a>(&'a self, t: &mut Tape<'a>, src: &[usize], reference: &[usize], routing: Option<&Routing>) -> Result<Var> {
        let mut tgt_in = Vec::with_capacity(reference.len() + 1);
        tgt_in.push(BOS);
        tgt_in.extend_from_slice(reference);
        let mut tgt_out = reference.to_vec();
        tgt_out.push(EOS);
        let mem = self.encode(t, src, routing, true)?;
        let logits = self.decode(t, mem, &tgt_in, routing, true)?;
        t.cross_entropy(logits, &tgt_out, PAD)
    }

    /// Loss and gradients (aligned with [`Transformer::visit_params`] order,
    /// `None` where no gradient reached the parameter).
    pub fn loss_and_grads(&self, src: &[usize], reference: &[usize], route: &Route) -> Result<(f64, Vec<Option<Mat>>)> {
        let routing = self.resolve(route)?;
        let mut t = Tape::new();
        let loss = self.loss(&mut t, src, reference, routing.as_ref())?;
        t.backprop(loss)?;
        let mut grads = Vec::new();
        self.visit_params(&mut |_, m, train| grads.push(if train { t.param_grad(m).cloned() } else { None }));
        Ok((t.scalar(loss), grads))
    }

    /// Greedy decoding from BOS until EOS or `max_len` output tokens.
    pub fn greedy_decode(&self, src: &[usize], route: &Route, max_len: usize) -> Result<Vec<usize>> {
        Ok(self.greedy_decode_with_margin(src, route, max_len)?.0)
    }

    /// Greedy decoding that also reports the smallest top-1/top-2 logit gap seen.
    pub fn greedy_decode_with_margin(&self, src: &[usize], route: &Route, max_len: usize) -> Result<(Vec<usize>, f64)> {
        let routing = self.resolve(route)?;
        let mut t = Tape::new();
        let mem = self.encode(&mut t, src, routing.as_ref(), false)?;
        let mut prefix = vec![BOS];
        let mut out = Vec::new();
        let mut margin = f64::INFINITY;
        let limit = max_len.min(self.cfg.max_len.saturating_sub(1));
        while out.len() < limit {
            let logits = self.decode(&mut t, mem, &prefix, routing.as_ref(), false)?;
            let lv = t.value(logits);
            let last = lv.rows() - 1;
            let best = lv.argmax_row(last);
            let row = lv.row(last);
            let second = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != best)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            margin = margin.min(row[best] - second);
            if best == EOS {
                break;
            }
            out.push(best);
            prefix.push(best);
        }
        Ok((out, margin))
    }

    /// Adapter-free model with every adapter folded into its base matrix.
    ///
    /// Banks are merged with weights `w`; plain LoRA adapters with their
    /// own factors.
    pub fn merge_all(&self, w: &[f64]) -> Result<Transformer> {
        let mut m = self.clone();
        let fold = |lin: &mut AdaptedLinear| -> Result<()> {
            let merged = match &lin.adapter {
                Adapter::None | Adapter::Full => lin.w0.clone(),
                Adapter::Lora(f) => lin.w0.add(&f.delta())?,
                Adapter::Bank(b) => {
                    if b.len() != w.len() {
                        return Err(Error::Config(format!(
                            "bank of {} experts cannot merge {} weights",
                            b.len(),
                            w.len()
                        )));
                    }
                    merge(lin, w)?
                }
            };
            lin.w0 = merged;
            lin.adapter = Adapter::None;
            Ok(())
        };
        for l in &mut m.enc {
            for (_, lin) in l.attn.projections_mut() {
                fold(lin)?;
            }
        }
        for l in &mut m.dec {
            for (_, lin) in l.self_attn.projections_mut().into_iter().chain(l.cross_attn.projections_mut()) {
                fold(lin)?;
            }
        }
        m.ft = FtConfig { encoder: FtMethod::NoFt, decoder: FtMethod::NoFt, ..self.ft.clone() };
        Ok(m)
    }

    /// Merge under a mixture spec (resolving the target accent against the banks).
    pub fn merge_mix(&self, mix: &MixSpec) -> Result<Transformer> {
        let w = if self.ft.has_bank() { mixture_weights(mix, &self.ft.accents)? } else { Vec::new() };
        self.merge_all(&w)
    }

    pub fn attach(&self) -> AttachSet {
        self.ft.attach
    }
}
