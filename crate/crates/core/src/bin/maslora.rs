use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use maslora::accent::AccentId;
use maslora::adapters::{param_count, AttachSet, FtMethod, MixSpec, ParamShape};
use maslora::data::io::{write_folds, write_manifest};
use maslora::data::audit_fold;
use maslora::error::{Error, Result};
use maslora::harness::{
    base_model, beta_sweep, evaluate, fine_tune, parse_mix, run_experiment_with, write_beta_outputs, zero_shot,
    ExperimentSpec, Workspace,
};
use maslora::metrics::{align, csv_string, fmt2, mapsswe, wer_table_csv};
use maslora::model::{load_model, save_model, GridEntry};

#[derive(Parser)]
#[command(name = "maslora", version, about = "Accent-expert LoRA mixtures on a toy encoder-decoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment spec (every key optional)
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a spec key, e.g. `--set train.epochs=1` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (overrides `out_dir`)
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus manifest
    Gen(Common),
    /// Write and audit the cross-validation folds
    Folds(Common),
    /// Fine-tune one grid entry on one fold and save the checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        /// Grid label such as `maslora-qv/lora-qv`
        #[arg(long)]
        entry: String,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Evaluate a checkpoint on a fold's test utterances
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// `uniform`, `single` or `aware:<beta>`
        #[arg(long, default_value = "uniform")]
        mix: String,
    },
    /// Run the full grid over seeds and folds
    Grid(Common),
    /// Held-out-accent experiment
    ZeroShot {
        #[command(flatten)]
        common: Common,
        /// Comma-separated accents (defaults to the spec's `zero_shot`)
        #[arg(long, value_delimiter = ',')]
        held_out: Vec<String>,
    },
    /// Accent-aware WER as a function of beta
    BetaSweep {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to sweep; trains `maslora-qv/lora-qv` when absent
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Trained-parameter percentages for the grid
    AuditParams(Common),
    /// Score hypothesis files against a reference file (one utterance per line)
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        /// Second system for the matched-pair test
        #[arg(long)]
        hyp_b: Option<PathBuf>,
    },
}

fn load_spec(c: &Common) -> Result<ExperimentSpec> {
    let text = match &c.config {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for s in &c.sets {
        let (key, value) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set needs KEY=VALUE, got {s:?}")))?;
        let value: toml::Value = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        set_path(&mut table, key.trim(), value)?;
    }
    let mut spec: ExperimentSpec = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    if let Some(o) = &c.out {
        spec.out_dir = o.clone();
    }
    spec.validate()?;
    Ok(spec)
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("bad key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn out_dir(spec: &ExperimentSpec) -> PathBuf {
    if spec.out_dir.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        spec.out_dir.clone()
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, text)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn read_lines(p: &Path) -> Result<Vec<Vec<String>>> {
    Ok(fs::read_to_string(p)?.lines().map(|l| l.split_whitespace().map(str::to_string).collect()).collect())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen(c) => {
            let spec = load_spec(&c)?;
            let ws = Workspace::new(&spec)?;
            write(&out_dir(&spec).join("manifest.tsv"), &write_manifest(&ws.manifest))?;
        }
        Cmd::Folds(c) => {
            let spec = load_spec(&c)?;
            let ws = Workspace::new(&spec)?;
            for f in &ws.folds {
                audit_fold(&ws.manifest, f)?;
            }
            write(&out_dir(&spec).join("folds.txt"), &write_folds(&ws.folds))?;
            println!("folds={} audit=ok", ws.folds.len());
        }
        Cmd::Train { common, entry, fold, seed } => {
            let spec = load_spec(&common)?;
            let ws = Workspace::new(&spec)?;
            let entry: GridEntry = entry.parse()?;
            let base = base_model(&spec, seed)?;
            let out = fine_tune(&spec, &base, &entry, &ws.manifest.accent_ids(), &ws.manifest, ws.fold(fold)?, seed)?;
            for h in &out.history {
                println!("epoch={} train_loss={:.4} valid_wer={}", h.epoch, h.train_loss, fmt2(h.valid_wer));
            }
            let dir = out_dir(&spec).join(format!("model_{}_f{fold}_s{seed}", entry.to_string().replace('/', "__")));
            save_model(&dir, &out.model)?;
            println!("best_epoch={} checkpoint={}", out.best_epoch, dir.display());
        }
        Cmd::Eval { common, model, fold, mix } => {
            let spec = load_spec(&common)?;
            let ws = Workspace::new(&spec)?;
            let m = load_model(&model)?;
            let test = ws.manifest.select(&ws.fold(fold)?.test);
            let e = evaluate(&m, &test, &parse_mix(&mix)?)?;
            let clean: Vec<_> = ws.clean.iter().collect();
            let c = evaluate(&m, &clean, &MixSpec::Uniform)?;
            let csv = wer_table_csv(&ws.manifest.accent_ids(), &[(m.ft.label(), e.summary.clone())])?;
            write(&out_dir(&spec).join("eval.csv"), &csv)?;
            println!("accented_wer={} clean_wer={}", fmt2(e.summary.pooled()), fmt2(c.summary.pooled()));
        }
        Cmd::Grid(c) => {
            let spec = load_spec(&c)?;
            let spec = ExperimentSpec { out_dir: out_dir(&spec), ..spec };
            let report = run_experiment_with(&spec, &mut |line| eprintln!("{line}"))?;
            print!("{}", report.table_csv()?);
        }
        Cmd::ZeroShot { common, held_out } => {
            let spec = load_spec(&common)?;
            let spec = ExperimentSpec { out_dir: out_dir(&spec), ..spec };
            let held = if held_out.is_empty() { spec.zero_shot.clone() } else { held_out };
            if held.is_empty() {
                return Err(Error::Config("no held-out accents given".into()));
            }
            let held: Vec<AccentId> = held.into_iter().map(AccentId::new).collect();
            let rows = zero_shot(&spec, &held)?;
            print!("{}", maslora::harness::zero_shot_csv(&rows, &held)?);
        }
        Cmd::BetaSweep { common, model, fold, seed } => {
            let spec = load_spec(&common)?;
            let ws = Workspace::new(&spec)?;
            let m = match model {
                Some(p) => load_model(&p)?,
                None => {
                    let entry = GridEntry { encoder: FtMethod::MasLora, decoder: FtMethod::Lora, attach: AttachSet::QV };
                    let base = base_model(&spec, seed)?;
                    fine_tune(&spec, &base, &entry, &ws.manifest.accent_ids(), &ws.manifest, ws.fold(fold)?, seed)?.model
                }
            };
            let test = ws.manifest.select(&ws.fold(fold)?.test);
            let points = beta_sweep(&m, &test, &spec.betas)?;
            write_beta_outputs(&out_dir(&spec), &points)?;
            for (b, w) in points {
                println!("beta={b} wer={}", fmt2(w));
            }
        }
        Cmd::AuditParams(c) => {
            let spec = load_spec(&c)?;
            let n = spec.corpus.n_accents as u64;
            let mut rows = Vec::new();
            for e in spec.grid_entries()? {
                let p = param_count(&ParamShape::whisper_small(e.attach), e.encoder, e.decoder, 16, n);
                let label = e.to_string();
                let (enc, dec) = label.split_once('/').unwrap_or((&label, ""));
                rows.push(vec![enc.to_string(), dec.to_string(), p.trained.to_string(), fmt2(p.percent)]);
            }
            let csv = csv_string(&["encoder", "decoder", "trained", "percent"], &rows)?;
            write(&out_dir(&spec).join("params.csv"), &csv)?;
            print!("{csv}");
        }
        Cmd::Score { reference, hyp, hyp_b } => {
            let refs = read_lines(&reference)?;
            let score = |p: &Path| -> Result<(Vec<usize>, usize)> {
                let hyps = read_lines(p)?;
                if hyps.len() != refs.len() {
                    return Err(Error::Protocol(format!("{} has {} lines, reference has {}", p.display(), hyps.len(), refs.len())));
                }
                let mut errs = Vec::with_capacity(refs.len());
                let mut words = 0;
                for (r, h) in refs.iter().zip(&hyps) {
                    let a = align(r, h)?;
                    errs.push(a.errors());
                    words += a.ref_len;
                }
                Ok((errs, words))
            };
            let (ea, words) = score(&hyp)?;
            println!("wer={}", fmt2(100.0 * ea.iter().sum::<usize>() as f64 / words.max(1) as f64));
            if let Some(b) = hyp_b {
                let (eb, _) = score(&b)?;
                println!("wer_b={}", fmt2(100.0 * eb.iter().sum::<usize>() as f64 / words.max(1) as f64));
                let r = mapsswe(&ea, &eb)?;
                println!("z={:.4} p={:.4} significant={} degenerate={}", r.z, r.p, r.significant, r.degenerate);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} msg={:?}", e.kind(), e.to_string());
            ExitCode::FAILURE
        }
    }
}
