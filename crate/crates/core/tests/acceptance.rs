//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::Instant;

use maslora::accent::{default_accent_ids, AccentId};
use maslora::adapters::{merge, mixed_forward, param_count, Adapter, AdaptedLinear, AttachSet, ExpertBank, FtMethod, LoraFactors, ParamShape};
use maslora::data::{gen_corpus, make_folds, CorpusConfig, FoldOptions, Utterance};
use maslora::harness::{base_model, batch_grads, beta_sweep, evaluate, fine_tune, ExperimentSpec, Workspace};
use maslora::metrics::{align, mapsswe, wer};
use maslora::model::{FtConfig, GridEntry, ModelConfig, Route, Transformer};
use maslora::{mixture_weights, MixSpec, Rng};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn param_audit() -> Outcome {
    let t = Instant::now();
    let want = [0.0, 100.0, 0.73, 1.44, 1.91, 4.21, 1.44, 2.84, 3.76, 8.07];
    let got: Vec<f64> = GridEntry::standard_grid()
        .iter()
        .map(|e| param_count(&ParamShape::whisper_small(e.attach), e.encoder, e.decoder, 16, 6).percent)
        .collect();
    let secs = t.elapsed().as_secs_f64();
    let fmt: Vec<String> = got.iter().map(|p| format!("{p:.2}")).collect();
    ensure(got == want && secs < 1.0, format!("[{}] in {secs:.3}s", fmt.join(", ")))
}

fn mixture_algebra() -> Outcome {
    for n in 1..=12 {
        let ids = default_accent_ids(n);
        let uniform = mixture_weights(&MixSpec::Uniform, &ids).map_err(|e| e.to_string())?;
        for (j, t) in ids.iter().enumerate() {
            let at_n = mixture_weights(&MixSpec::Aware { target: t.clone(), beta: n as f64 }, &ids).unwrap();
            let at_1 = mixture_weights(&MixSpec::Aware { target: t.clone(), beta: 1.0 }, &ids).unwrap();
            let hot: Vec<f64> = (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
            if at_n != uniform || at_1 != hot {
                return Err(format!("reduction broken at n={n} target={t}"));
            }
        }
    }
    let mut rng = Rng::new(2);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let n = rng.range_inclusive(1, 12);
        let ids = default_accent_ids(n);
        let beta = 1.0 + rng.uniform() * (n as f64 - 1.0);
        let target = ids[rng.below(n)].clone();
        let w = mixture_weights(&MixSpec::Aware { target, beta }, &ids).map_err(|e| e.to_string())?;
        worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    ensure(worst <= 1e-15, format!("exact reductions for n=1..12; max |sum-1| = {worst:e} over 10000 cases"))
}

fn random_bank_layer(rng: &mut Rng) -> (AdaptedLinear, usize) {
    let (d, k) = (rng.range_inclusive(1, 64), rng.range_inclusive(1, 64));
    let (r, n) = (rng.range_inclusive(1, 8), rng.range_inclusive(1, 8));
    let w0 = rng.gaussian_mat(d, k, 1.0);
    let experts = (0..n)
        .map(|_| LoraFactors::from_parts(rng.gaussian_mat(r, k, 1.0), rng.gaussian_mat(d, r, 1.0), 1.0).unwrap())
        .collect();
    let bank = ExpertBank::new(default_accent_ids(n), experts).unwrap();
    (AdaptedLinear::new(w0, None, Adapter::Bank(bank)).unwrap(), n)
}

fn random_weights(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| rng.uniform() + 1e-3).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn with_random_experts(m: &mut Transformer, rng: &mut Rng) {
    m.visit_params_mut(&mut |p, mat, _| {
        if p.ends_with(".B") {
            *mat = rng.gaussian_mat(mat.rows(), mat.cols(), 0.5);
        }
    });
}

fn merge_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng::new(3);
    let mut worst_rel: f64 = 0.0;
    let banks = 200;
    for _ in 0..banks {
        let (layer, n) = random_bank_layer(&mut rng);
        let w = random_weights(&mut rng, n);
        let cols = rng.range_inclusive(1, 8);
        let x = rng.gaussian_mat(layer.k(), cols, 1.0);
        let runtime = mixed_forward(&x, &layer, &w).map_err(|e| e.to_string())?;
        let merged = merge(&layer, &w).map_err(|e| e.to_string())?.matmul(&x).unwrap();
        worst_rel = worst_rel.max(merged.max_abs_diff(&runtime) / runtime.max_abs().max(1e-300));
    }
    let cfg = ModelConfig { vocab_size: 24, d_model: 32, n_heads: 4, enc_layers: 2, dec_layers: 2, ffn_dim: 64, max_len: 16 };
    let ids = default_accent_ids(6);
    let mut worst_abs: f64 = 0.0;
    let models = 12;
    for s in 0..models {
        let ft = FtConfig::new(FtMethod::MasLora, FtMethod::MasLora, AttachSet::QKVO, 4, ids.clone());
        let mut m = Transformer::build(&cfg, &ft, &mut Rng::new(100 + s)).unwrap();
        with_random_experts(&mut m, &mut rng);
        let src: Vec<usize> = (0..10).map(|_| 3 + rng.below(21)).collect();
        let prefix: Vec<usize> = std::iter::once(1).chain((0..6).map(|_| 3 + rng.below(21))).collect();
        let target = ids[rng.below(6)].clone();
        let beta = 1.0 + 5.0 * rng.uniform();
        for mix in [MixSpec::Uniform, MixSpec::Single { target: target.clone() }, MixSpec::Aware { target, beta }] {
            let mixed = m.forward(&src, &prefix, &Route::Mix(mix.clone())).unwrap();
            let merged = m.merge_mix(&mix).unwrap().forward(&src, &prefix, &Route::Mix(MixSpec::Uniform)).unwrap();
            worst_abs = worst_abs.max(mixed.max_abs_diff(&merged));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(
        worst_rel < 1e-10 && worst_abs < 1e-9 && secs < 10.0,
        format!("{banks} banks max rel {worst_rel:e}; {models} models max |logit diff| {worst_abs:e}; {secs:.2}s"),
    )
}

fn gradient_isolation() -> Outcome {
    let cfg = ModelConfig { vocab_size: 24, d_model: 16, n_heads: 2, enc_layers: 2, dec_layers: 1, ffn_dim: 32, max_len: 12 };
    let ids = default_accent_ids(6);
    let ft = FtConfig::new(FtMethod::MasLora, FtMethod::MasLora, AttachSet::QKVO, 2, ids.clone());
    let mut m = Transformer::build(&cfg, &ft, &mut Rng::new(4)).unwrap();
    with_random_experts(&mut m, &mut Rng::new(5));
    let mut meta = Vec::new();
    m.visit_params(&mut |p, _, trainable| meta.push((p.to_string(), trainable)));
    let batch: Vec<(Vec<usize>, Vec<usize>)> = (0..4)
        .map(|i| ((3..9).map(|t| t + i).collect(), (4..8).map(|t| t + i).collect()))
        .collect();
    let pairs: Vec<(&[usize], &[usize])> = batch.iter().map(|(s, r)| (&s[..], &r[..])).collect();
    let (mut checked, mut live) = (0usize, 0usize);
    for a in &ids {
        let (_, grads) = batch_grads(&m, &pairs, &Route::Accent(a.clone())).map_err(|e| e.to_string())?;
        let own = format!(".bank.{a}.");
        for ((path, trainable), g) in meta.iter().zip(&grads) {
            let zero = g.as_ref().is_none_or(|g| g.is_zero());
            if path.contains(&own) {
                live += usize::from(!zero);
            } else if path.contains(".bank.") || !trainable {
                checked += 1;
                if !zero {
                    return Err(format!("accent {a}: nonzero gradient on {path}"));
                }
            }
        }
    }
    ensure(live > 0, format!("{checked} frozen or foreign tensors exactly zero across 6 accents; {live} target tensors live"))
}

fn zero_init() -> Outcome {
    let cfg = ModelConfig { vocab_size: 24, d_model: 16, n_heads: 2, enc_layers: 2, dec_layers: 2, ffn_dim: 32, max_len: 12 };
    let ids = default_accent_ids(6);
    let base = Transformer::init_base(&cfg, &mut Rng::new(6)).unwrap();
    let src = [4, 9, 13, 7, 21, 5];
    let prefix = [1, 6, 11, 3];
    let want = base.forward(&src, &prefix, &Route::Mix(MixSpec::Uniform)).unwrap();
    let mut mixes = vec![MixSpec::Uniform];
    for t in &ids {
        mixes.push(MixSpec::Single { target: t.clone() });
        for b in [1.0, 1.5, 2.0, 3.0, 4.5, 6.0] {
            mixes.push(MixSpec::Aware { target: t.clone(), beta: b });
        }
    }
    let methods = [FtMethod::NoFt, FtMethod::Lora, FtMethod::MasLora];
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for enc in methods {
        for dec in methods {
            for attach in [AttachSet::QV, AttachSet::QKVO] {
                let ft = FtConfig::new(enc, dec, attach, 4, ids.clone());
                let m = base.with_ft(&ft, &mut Rng::new(7)).unwrap();
                for mix in &mixes {
                    let got = m.forward(&src, &prefix, &Route::Mix(mix.clone())).map_err(|e| e.to_string())?;
                    worst = worst.max(got.max_abs_diff(&want));
                    n += 1;
                }
            }
        }
    }
    ensure(worst <= 1e-12, format!("{n} (config, mix) pairs; max |logit diff| {worst:e}"))
}

fn gradient_correctness() -> Outcome {
    let mut details = Vec::new();
    let mut worst: f64 = 0.0;
    for seed in [1, 2, 3] {
        let (n, e) = common::mlp_max_rel_err(seed);
        if n > 1000 {
            return Err(format!("network has {n} parameters"));
        }
        worst = worst.max(e);
        details.push(format!("mlp seed {seed} ({n} params) {e:.1e}"));
    }
    let ft = FtConfig::new(FtMethod::MasLora, FtMethod::Lora, AttachSet::QKVO, 2, default_accent_ids(3));
    let mut m = Transformer::build(&common::tiny_cfg(), &ft, &mut Rng::new(6)).unwrap();
    with_random_experts(&mut m, &mut Rng::new(7));
    let (e, _) = common::transformer_max_rel_err(&m, &Route::Accent(AccentId::new("ZH")));
    worst = worst.max(e);
    details.push(format!("adapted transformer {e:.1e}"));
    ensure(worst < 1e-4, details.join("; "))
}

fn all_strings(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s: &Vec<u8>| (0..3u8).map(move |c| s.iter().copied().chain([c]).collect::<Vec<u8>>()))
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn oracle(r: &[u8], h: &[u8], memo: &mut BTreeMap<(usize, usize), usize>) -> usize {
    if r.is_empty() {
        return h.len();
    }
    if h.is_empty() {
        return r.len();
    }
    if let Some(&v) = memo.get(&(r.len(), h.len())) {
        return v;
    }
    let sub = oracle(&r[1..], &h[1..], memo) + usize::from(r[0] != h[0]);
    let del = oracle(&r[1..], h, memo) + 1;
    let ins = oracle(r, &h[1..], memo) + 1;
    let v = sub.min(del).min(ins);
    memo.insert((r.len(), h.len()), v);
    v
}

fn wer_oracle() -> Outcome {
    let strings = all_strings(6);
    let mut pairs = 0usize;
    let mut memo = BTreeMap::new();
    for r in strings.iter().filter(|s| !s.is_empty()) {
        for h in &strings {
            memo.clear();
            let want = oracle(r, h, &mut memo);
            let a = align(r, h).map_err(|e| e.to_string())?;
            if a.errors() != want || a.hits + a.substitutions + a.deletions != r.len() {
                return Err(format!("{r:?} vs {h:?}: {} != {want}", a.errors()));
            }
            pairs += 1;
        }
    }
    let long: Vec<u8> = (0..9).collect();
    let mut long_hyp = long.clone();
    long_hyp[4] = 99;
    let pooled = wer(&[(&[1u8][..], &[2u8][..]), (&long[..], &long_hyp[..])]).map_err(|e| e.to_string())?;
    let per_utt: f64 = (100.0 + 100.0 / 9.0) / 2.0;
    ensure(
        pooled == 20.0 && (pooled - per_utt).abs() > 30.0,
        format!("{pairs} pairs match; pooled {pooled} vs per-utterance mean {per_utt:.2}"),
    )
}

fn fold_audit() -> Outcome {
    for seed in 0..10u64 {
        let m = gen_corpus(&CorpusConfig { n_sentences: 60, seed: 1000 + seed, ..CorpusConfig::default() })
            .map_err(|e| e.to_string())?;
        let folds = make_folds(&m, &FoldOptions { seed, ..FoldOptions::default() }).map_err(|e| e.to_string())?;
        if folds.len() != 8 {
            return Err(format!("seed {seed}: {} folds", folds.len()));
        }
        let mut tested: BTreeMap<&str, usize> = BTreeMap::new();
        for f in &folds {
            for sp in f.test_speakers.values() {
                *tested.entry(sp).or_default() += 1;
            }
            let set = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
            let (tr, va, te) = (set(&f.train_sentences), set(&f.valid_sentences), set(&f.test_sentences));
            if !tr.is_disjoint(&va) || !tr.is_disjoint(&te) || !va.is_disjoint(&te) {
                return Err(format!("seed {seed} fold {}: sentence sets overlap", f.index));
            }
            let test_spk: BTreeSet<&str> = f.test_speakers.values().map(String::as_str).collect();
            for (ids, allowed) in [(&f.train, &tr), (&f.valid, &va)] {
                for u in m.select(ids) {
                    if test_spk.contains(u.speaker.as_str()) || !allowed.contains(&u.sentence_id) {
                        return Err(format!("seed {seed} fold {}: utterance {} misplaced", f.index, u.id));
                    }
                }
            }
            for u in m.select(&f.test) {
                if !test_spk.contains(u.speaker.as_str()) || !te.contains(&u.sentence_id) {
                    return Err(format!("seed {seed} fold {}: test utterance {} misplaced", f.index, u.id));
                }
            }
        }
        if m.speakers.iter().any(|s| tested.get(s.id.as_str()) != Some(&2)) {
            return Err(format!("seed {seed}: some speaker not tested exactly twice"));
        }
    }
    Ok("10 seeds x 8 folds, 24 speakers each tested twice, all sets disjoint".into())
}

fn mapsswe_sanity() -> Outcome {
    let same = mapsswe(&[3, 1, 4, 1, 5], &[3, 1, 4, 1, 5]).map_err(|e| e.to_string())?;
    let d = [2i64, 0, -1, 3, 1, 1];
    let a: Vec<usize> = d.iter().map(|&x| (x + 3) as usize).collect();
    let r = mapsswe(&a, &[3; 6]).map_err(|e| e.to_string())?;
    ensure(
        same.p == 1.0 && same.z == 0.0 && (r.z - 1.732).abs() <= 0.01,
        format!("identical p={}; hand case z={:.4} p={:.4}", same.p, r.z, r.p),
    )
}

struct SeedRun {
    seed: u64,
    lora: f64,
    maslora: f64,
    base_clean: f64,
    full_clean: f64,
    maslora_clean: f64,
    beta2: f64,
    beta6: f64,
    beta6_is_uniform: bool,
}

fn pooled(m: &Transformer, utts: &[&Utterance]) -> Result<f64, String> {
    Ok(evaluate(m, utts, &MixSpec::Uniform).map_err(|e| e.to_string())?.summary.pooled())
}

fn toy_runs() -> Result<Vec<SeedRun>, String> {
    let spec = ExperimentSpec { seeds: vec![1, 2, 3], ..ExperimentSpec::default() };
    let ws = Workspace::new(&spec).map_err(|e| e.to_string())?;
    let accents = ws.manifest.accent_ids();
    let fold = &ws.folds[0];
    let test = ws.manifest.select(&fold.test);
    let clean: Vec<&Utterance> = ws.clean.iter().collect();
    let mut runs = Vec::new();
    for &seed in &spec.seeds {
        let base = base_model(&spec, seed).map_err(|e| e.to_string())?;
        let tune = |label: &str| -> Result<Transformer, String> {
            let entry: GridEntry = label.parse().map_err(|e: maslora::Error| e.to_string())?;
            Ok(fine_tune(&spec, &base, &entry, &accents, &ws.manifest, fold, seed).map_err(|e| e.to_string())?.model)
        };
        let lora = tune("lora-qv/lora-qv")?;
        let mas = tune("maslora-qv/lora-qv")?;
        let full = tune("full/full")?;
        let sweep = beta_sweep(&mas, &test, &[2.0, 6.0]).map_err(|e| e.to_string())?;
        let uniform = evaluate(&mas, &test, &MixSpec::Uniform).map_err(|e| e.to_string())?;
        let aware6 = evaluate(&mas, &test, &MixSpec::Aware { target: AccentId::new("*"), beta: 6.0 }).map_err(|e| e.to_string())?;
        let run = SeedRun {
            seed,
            lora: pooled(&lora, &test)?,
            maslora: uniform.summary.pooled(),
            base_clean: pooled(&base, &clean)?,
            full_clean: pooled(&full, &clean)?,
            maslora_clean: pooled(&mas, &clean)?,
            beta2: sweep[0].1,
            beta6: sweep[1].1,
            beta6_is_uniform: sweep[1].1 == uniform.summary.pooled() && aware6.hyps == uniform.hyps,
        };
        eprintln!(
            "  seed {}: test WER lora {:.2} maslora {:.2} | clean WER base {:.2} full {:.2} maslora {:.2} | beta2 {:.2} beta6 {:.2}",
            run.seed, run.lora, run.maslora, run.base_clean, run.full_clean, run.maslora_clean, run.beta2, run.beta6
        );
        runs.push(run);
    }
    Ok(runs)
}

fn ordering(runs: &[SeedRun]) -> Outcome {
    let wins_a = runs.iter().filter(|r| r.maslora <= r.lora).count();
    let wins_b = runs.iter().filter(|r| r.full_clean - r.base_clean > r.maslora_clean - r.base_clean).count();
    let a: Vec<String> = runs.iter().map(|r| format!("{:.2}<={:.2}", r.maslora, r.lora)).collect();
    let b: Vec<String> = runs.iter().map(|r| format!("{:.2}>{:.2}", r.full_clean, r.maslora_clean)).collect();
    let detail = format!(
        "maslora<=lora in {wins_a}/3 [{}]; full forgets more in {wins_b}/3 [{}]",
        a.join(" "),
        b.join(" ")
    );
    ensure(wins_a >= 2 && wins_b >= 2, detail)
}

fn beta_shape(runs: &[SeedRun]) -> Outcome {
    let wins = runs.iter().filter(|r| r.beta2 <= r.beta6).count();
    let exact = runs.iter().all(|r| r.beta6_is_uniform);
    let pts: Vec<String> = runs.iter().map(|r| format!("{:.2}<={:.2}", r.beta2, r.beta6)).collect();
    ensure(wins >= 2 && exact, format!("beta2<=beta6 in {wins}/3 [{}]; beta6 == uniform in every run: {exact}", pts.join(" ")))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let simple: [(&str, fn() -> Outcome); 8] = [
        ("1 parameter audit", param_audit),
        ("2 mixture-weight algebra", mixture_algebra),
        ("3 merge/mixture equivalence", merge_equivalence),
        ("4 gradient isolation", gradient_isolation),
        ("5 zero-init transparency", zero_init),
        ("6 gradient correctness", gradient_correctness),
        ("7 WER oracle equivalence", wer_oracle),
        ("8 fold-protocol audit", fold_audit),
    ];
    for (name, f) in simple {
        results.push((name, f()));
        report(results.last().unwrap());
    }
    let t = Instant::now();
    match toy_runs() {
        Ok(runs) => {
            let secs = t.elapsed().as_secs_f64();
            let budget = |o: Outcome| match o {
                Ok(d) if secs < 3600.0 => Ok(format!("{d}; {secs:.0}s")),
                Ok(d) => Err(format!("{d}; {secs:.0}s over budget")),
                e => e,
            };
            results.push(("9 toy-scale ordering", budget(ordering(&runs))));
            report(results.last().unwrap());
            results.push(("10 beta-sweep shape", beta_shape(&runs)));
            report(results.last().unwrap());
        }
        Err(e) => {
            results.push(("9 toy-scale ordering", Err(e.clone())));
            report(results.last().unwrap());
            results.push(("10 beta-sweep shape", Err(e)));
            report(results.last().unwrap());
        }
    }
    results.push(("11 MAPSSWE sanity", mapsswe_sanity()));
    report(results.last().unwrap());
    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn report((name, r): &(&str, Outcome)) {
    match r {
        Ok(d) => println!("PASS criterion {name}: {d}"),
        Err(d) => println!("FAIL criterion {name}: {d}"),
    }
}
