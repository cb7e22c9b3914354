use std::fs;

use maslora::accent::AccentId;
use maslora::adapters::{param_count, AttachSet, FtMethod, ParamShape};
use maslora::data::{gen_clean, CorpusConfig, Utterance};
use maslora::harness::{
    accent_batches, base_model, batch_grads, beta_sweep, decode_runtime, evaluate, fine_tune, pretrain, run_experiment, train, write_beta_outputs,
    zero_shot, Adam, ExperimentSpec, PretrainConfig, TrainConfig, Workspace,
};
use maslora::model::{FtConfig, GridEntry, ModelConfig, Route, Transformer};
use maslora::{MixSpec, Rng};

fn tiny_spec() -> ExperimentSpec {
    ExperimentSpec {
        grid: vec!["noft/noft".into(), "maslora-qv/lora-qv".into()],
        rank: 2,
        n_clean: 12,
        betas: vec![1.0, 2.0, 3.0],
        corpus: CorpusConfig {
            n_accents: 3,
            n_sentences: 30,
            min_len: 3,
            max_len: 5,
            vocab_size: 32,
            subs_per_accent: 2,
            ..CorpusConfig::default()
        },
        model: ModelConfig { vocab_size: 32, d_model: 16, n_heads: 2, enc_layers: 1, dec_layers: 1, ffn_dim: 32, max_len: 14 },
        train: TrainConfig { epochs: 2, batch_size: 8, lr_full: 2e-3, lr_adapter: 1e-2, seed: 0 },
        pretrain: PretrainConfig { steps: 40, batch_size: 8, lr: 3e-3, n_sentences: 100 },
        ..ExperimentSpec::default()
    }
}

fn maslora_entry() -> GridEntry {
    GridEntry { encoder: FtMethod::MasLora, decoder: FtMethod::Lora, attach: AttachSet::QV }
}

/// Fine-tuned MasLora model whose experts are then pushed apart, so mixtures
/// are never trivially equal.
fn trained_maslora(spec: &ExperimentSpec) -> (Workspace, Transformer, Transformer) {
    let ws = Workspace::new(spec).unwrap();
    let base = base_model(spec, 1).unwrap();
    let out = fine_tune(spec, &base, &maslora_entry(), &ws.manifest.accent_ids(), &ws.manifest, &ws.folds[0], 1).unwrap();
    let mut m = out.model;
    let mut rng = Rng::new(11);
    m.visit_params_mut(&mut |p, mat, _| {
        if p.ends_with(".B") {
            let noise = rng.gaussian_mat(mat.rows(), mat.cols(), 0.3);
            mat.add_scaled_in_place(&noise, 1.0).unwrap();
        }
    });
    (ws, base, m)
}

fn scores_of(m: &Transformer, utts: &[&Utterance], mix: &MixSpec) -> Vec<usize> {
    evaluate(m, utts, mix).unwrap().scores.iter().map(|s| s.errors).collect()
}

#[test]
fn zero_epochs_return_the_start_model() {
    let spec = tiny_spec();
    let ws = Workspace::new(&spec).unwrap();
    let base = Transformer::init_base(&spec.model, &mut Rng::new(3)).unwrap();
    let ft = maslora_entry().ft_config(2, 1.0, &ws.manifest.accent_ids());
    let m = base.with_ft(&ft, &mut Rng::new(4)).unwrap();
    let tc = TrainConfig { epochs: 0, ..spec.train.clone() };
    let out = train(&m, &ws.manifest, &ws.folds[0], &tc, &MixSpec::Uniform).unwrap();
    assert_eq!(out.model, m);
    assert_eq!((out.best_epoch, out.steps, out.history.len()), (0, 0, 1));
    assert!(out.seen.is_empty());
}

#[test]
fn adapter_steps_leave_base_weights_untouched() {
    let spec = tiny_spec();
    let ws = Workspace::new(&spec).unwrap();
    let base = base_model(&spec, 1).unwrap();
    let ft = maslora_entry().ft_config(2, 1.0, &ws.manifest.accent_ids());
    let mut m = base.with_ft(&ft, &mut Rng::new(4)).unwrap();
    let start = m.clone();
    let train_utts = ws.manifest.select(&ws.folds[0].train);
    let mut opt = Adam::new();
    for (accent, ids) in accent_batches(&train_utts, 8, &mut Rng::new(5)).iter().take(6) {
        let items = ws.manifest.select(ids);
        let pairs: Vec<(&[usize], &[usize])> = items.iter().map(|u| (&u.observed[..], &u.reference[..])).collect();
        let (_, grads) = batch_grads(&m, &pairs, &Route::Accent(accent.clone())).unwrap();
        opt.step(&mut m, &grads, 1e-2);
    }
    let mut before = Vec::new();
    start.visit_params(&mut |p, mat, trainable| before.push((p.to_string(), mat.clone(), trainable)));
    let mut i = 0;
    let mut moved = 0;
    m.visit_params(&mut |p, mat, _| {
        let (bp, bm, trainable) = &before[i];
        assert_eq!(bp, p);
        if *trainable {
            moved += usize::from(bm != mat);
        } else {
            assert_eq!(bm, mat, "{p} changed");
        }
        i += 1;
    });
    assert!(moved > 0);
}

#[test]
fn pretraining_lowers_the_copy_loss() {
    let spec = tiny_spec();
    let c = &spec.corpus;
    let data = gen_clean(64, c.word_end(), c.min_len, c.max_len, 9);
    let init = Transformer::init_base(&spec.model, &mut Rng::new(2)).unwrap();
    let pc = PretrainConfig { steps: 60, ..spec.pretrain.clone() };
    let (m, losses) = pretrain(&init, &data, &pc, 2).unwrap();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.8 * head, "{head} -> {tail}");
    assert_eq!(m.ft, FtConfig::no_ft());
}

#[test]
fn best_checkpoint_has_the_lowest_validation_wer() {
    let spec = tiny_spec();
    let ws = Workspace::new(&spec).unwrap();
    let base = base_model(&spec, 1).unwrap();
    let fold = &ws.folds[0];
    let out = fine_tune(&spec, &base, &maslora_entry(), &ws.manifest.accent_ids(), &ws.manifest, fold, 1).unwrap();
    let min = out.history.iter().map(|h| h.valid_wer).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_valid_wer(), min);
    assert!(out.history[..out.best_epoch].iter().all(|h| h.valid_wer > min));
    let valid = ws.manifest.select(&fold.valid);
    assert_eq!(evaluate(&out.model, &valid, &MixSpec::Uniform).unwrap().summary.pooled(), min);
    let train_ids: std::collections::BTreeSet<usize> = fold.train.iter().copied().collect();
    assert_eq!(out.seen, train_ids);
}

#[test]
fn unadapted_model_ignores_the_mixture() {
    let spec = tiny_spec();
    let ws = Workspace::new(&spec).unwrap();
    let base = base_model(&spec, 1).unwrap();
    let test = ws.manifest.select(&ws.folds[0].test);
    let a = AccentId::new("*");
    let want = evaluate(&base, &test, &MixSpec::Uniform).unwrap();
    for mix in [MixSpec::Single { target: a.clone() }, MixSpec::Aware { target: a, beta: 2.0 }] {
        assert_eq!(evaluate(&base, &test, &mix).unwrap(), want);
    }
}

#[test]
fn merged_decoding_matches_runtime_mixing() {
    let spec = tiny_spec();
    let (ws, _, m) = trained_maslora(&spec);
    let test = ws.manifest.select(&ws.folds[0].test);
    let merged = evaluate(&m, &test, &MixSpec::Uniform).unwrap();
    assert_eq!(merged.hyps, decode_runtime(&m, &test, &MixSpec::Uniform).unwrap());

    let zh = AccentId::new(ws.manifest.accent_ids()[1].as_str());
    let only: Vec<&Utterance> = test.iter().copied().filter(|u| u.accent == zh).collect();
    let mix = MixSpec::Aware { target: zh, beta: 2.0 };
    assert_eq!(evaluate(&m, &only, &mix).unwrap().hyps, decode_runtime(&m, &only, &mix).unwrap());
}

#[test]
fn aware_mixture_reduces_to_uniform_and_single() {
    let spec = tiny_spec();
    let (ws, _, m) = trained_maslora(&spec);
    let test = ws.manifest.select(&ws.folds[0].test);
    let star = AccentId::new("*");
    let n = ws.manifest.accent_ids().len() as f64;
    assert_eq!(
        scores_of(&m, &test, &MixSpec::Aware { target: star.clone(), beta: n }),
        scores_of(&m, &test, &MixSpec::Uniform)
    );
    assert_eq!(
        scores_of(&m, &test, &MixSpec::Aware { target: star.clone(), beta: 1.0 }),
        scores_of(&m, &test, &MixSpec::Single { target: star })
    );
}

#[test]
fn grid_of_the_unadapted_model_equals_direct_evaluation() {
    let spec = ExperimentSpec { grid: vec!["noft/noft".into()], ..tiny_spec() };
    let report = run_experiment(&spec).unwrap();
    let ws = Workspace::new(&spec).unwrap();
    let base = base_model(&spec, 1).unwrap();
    let test = ws.manifest.select(&ws.folds[0].test);
    let direct = evaluate(&base, &test, &MixSpec::Uniform).unwrap().summary;
    let c = report.config("noft/noft").unwrap();
    assert_eq!(c.accented(), direct);
    assert_eq!(c.params_pct, 0.0);
}

#[test]
fn params_column_follows_param_count() {
    let spec = ExperimentSpec { train: TrainConfig { epochs: 0, ..tiny_spec().train }, ..tiny_spec() };
    let report = run_experiment(&spec).unwrap();
    let c = report.config("maslora-qv/lora-qv").unwrap();
    let want = param_count(&ParamShape::whisper_small(AttachSet::QV), FtMethod::MasLora, FtMethod::Lora, 16, 3).percent;
    assert_eq!(c.params_pct, want);
    let table = report.table_csv().unwrap();
    assert!(table.lines().nth(2).unwrap().starts_with(&format!("maslora-qv,lora-qv,{want:.2},")));
}

#[test]
fn reruns_write_identical_files() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_experiment(&ExperimentSpec { out_dir: d.path().to_path_buf(), ..tiny_spec() }).unwrap();
    }
    for f in ["table.csv", "accents.csv", "runs.csv", "significance.csv"] {
        let a = fs::read(dirs[0].path().join(f)).unwrap();
        assert_eq!(a, fs::read(dirs[1].path().join(f)).unwrap(), "{f}");
    }
    let again = run_experiment(&ExperimentSpec { out_dir: dirs[0].path().to_path_buf(), ..tiny_spec() }).unwrap();
    assert_eq!(again.table_csv().unwrap(), fs::read_to_string(dirs[1].path().join("table.csv")).unwrap());
}

#[test]
fn held_out_accent_gets_a_smaller_bank() {
    let spec = ExperimentSpec { grid: vec!["maslora-qv/lora-qv".into()], ..tiny_spec() };
    let held = [AccentId::new("ZH")];
    let rows = zero_shot(&spec, &held).unwrap();
    assert_eq!(rows[0].bank_sizes, vec![2]);
    assert_eq!(rows[0].wer.len(), 1);
    assert!(rows[0].wer[0].1.is_finite());
    assert!(zero_shot(&spec, &[AccentId::new("XX")]).is_err());
}

#[test]
fn beta_sweep_writes_a_point_per_beta() {
    let spec = tiny_spec();
    let (ws, base, m) = trained_maslora(&spec);
    let test = ws.manifest.select(&ws.folds[0].test);
    let pts = beta_sweep(&m, &test, &spec.betas).unwrap();
    assert_eq!(pts.len(), 3);
    assert_eq!(pts[2].1, evaluate(&m, &test, &MixSpec::Uniform).unwrap().summary.pooled());
    let dir = tempfile::tempdir().unwrap();
    write_beta_outputs(dir.path(), &pts).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join("beta.csv")).unwrap().lines().count(), 4);
    assert!(fs::read_to_string(dir.path().join("beta.svg")).unwrap().contains("<polyline"));
    assert!(beta_sweep(&base, &test, &spec.betas).is_err());
    assert!(beta_sweep(&m, &test, &[4.0]).is_err());
}
