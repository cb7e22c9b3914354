use std::fs;
use std::process::{Command, Output};

fn maslora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maslora")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn audit_params_prints_the_reference_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = maslora(&["audit-params", "-o", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pcts: Vec<String> = stdout(&o).lines().skip(1).map(|l| l.rsplit(',').next().unwrap().to_string()).collect();
    assert_eq!(pcts, ["0.00", "100.00", "0.73", "1.44", "1.91", "4.21", "1.44", "2.84", "3.76", "8.07"]);
    assert!(dir.path().join("params.csv").exists());
}

#[test]
fn failures_print_a_machine_readable_line() {
    let o = maslora(&["audit-params", "--set", "rank=\"four\""]);
    assert!(!o.status.success());
    let err = stderr(&o);
    let line = err.lines().last().unwrap();
    assert!(line.starts_with("error kind=config msg="), "{line}");

    let o = maslora(&["eval", "--model", "/nonexistent/model", "--set", "corpus.n_sentences=20"]);
    assert!(!o.status.success());
    assert!(stderr(&o).lines().last().unwrap().starts_with("error kind="));
}

#[test]
fn config_file_and_overrides_shape_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("spec.toml");
    fs::write(&cfg, "[corpus]\nn_sentences = 20\nn_accents = 2\n").unwrap();
    let out = dir.path().join("out");
    let o = maslora(&["gen", "-c", cfg.to_str().unwrap(), "--set", "corpus.n_sentences=24", "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(out.join("manifest.tsv")).unwrap();
    let utts = manifest.lines().filter(|l| l.contains('\t')).count();
    assert_eq!(utts, 2 * 4 * 24);

    let o = maslora(&["folds", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "folds=8 audit=ok");
}

#[test]
fn score_compares_two_systems() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    fs::write(p("ref"), "a b c d e\nf g h i j\n").unwrap();
    fs::write(p("a"), "a b c d x\nf g h i j\n").unwrap();
    fs::write(p("b"), "a x c x x\nf g x i j\n").unwrap();
    let o = maslora(&[
        "score",
        "--ref",
        p("ref").to_str().unwrap(),
        "--hyp",
        p("a").to_str().unwrap(),
        "--hyp-b",
        p("b").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("wer=10.00"), "{out}");
    assert!(out.contains("wer_b=40.00"), "{out}");
    assert!(out.contains("z=-3.0000"), "{out}");
}
