use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bispik::corpus::synthetic_text;

const SMALL: [&str; 12] = [
    "--set", "model.d_model=16", "--set", "model.n_heads=2", "--set", "model.d_ff=32",
    "--set", "model.max_seq_len=32", "--set", "train.seq_len=32", "--set", "train.batch_size=2",
];

fn bispik(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bispik")).args(args).output().expect("spawn bispik")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
    corpus: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, synthetic_text(8_000, 2)).unwrap();
    Workspace { dir, corpus }
}

impl Workspace {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, cmd: &str, out: &str, extra: &[&str]) -> Output {
        let out = self.path(out);
        let mut args = vec![cmd, "--corpus", s(&self.corpus), "--steps", "4", "--out", s(&out)];
        args.extend(SMALL);
        args.extend(extra);
        bispik(&args)
    }
}

#[test]
fn train_then_generate_is_repeatable() {
    let w = workspace();
    let o = w.train("train", "m.ckpt", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("val_ce: "));
    assert!(w.path("m.ckpt.config").exists(), "snapshot written next to the checkpoint");
    let ckpt = w.path("m.ckpt");
    let gen = |seed: &str| bispik(&["generate", "--checkpoint", s(&ckpt), "--prompt", "The", "--n-new", "12", "--temperature", "1.0", "--seed", seed]);
    let (a, b) = (gen("3"), gen("3"));
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(a.stdout.len(), 13, "12 bytes plus newline");
}

#[test]
fn generation_past_context_reports_truncation() {
    let w = workspace();
    assert!(w.train("train", "m.ckpt", &[]).status.success());
    let ckpt = w.path("m.ckpt");
    let o = bispik(&["generate", "--checkpoint", s(&ckpt), "--prompt", "abc", "--n-new", "40"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("context truncated"), "{}", stderr(&o));
}

#[test]
fn distill_then_eval_and_profile() {
    let w = workspace();
    assert!(w.train("train-teacher", "t.ckpt", &[]).status.success());
    let teacher = w.path("t.ckpt");
    let metrics = w.path("s.tsv");
    let o = w.train("distill", "s.ckpt", &["--teacher", s(&teacher), "--metrics", s(&metrics)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(m.lines().count(), 2 + 4, "magic, header and one line per step");

    let student = w.path("s.ckpt");
    let o = bispik(&["eval", "--checkpoint", s(&student), "--corpus", s(&w.corpus), "--set", "train.seq_len=32"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("val_ce: ") && text.contains("layer.1.firing_rate: "), "{text}");

    let report = w.path("r.txt");
    let o = bispik(&["profile", "--checkpoint", s(&student), "--corpus", s(&w.corpus), "--report", s(&report), "--set", "train.seq_len=32"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::metadata(&report).unwrap().len() > 0);
}

#[test]
fn profile_works_on_an_untrained_model() {
    let w = workspace();
    let mut args = vec!["profile", "--corpus", s(&w.corpus)];
    args.extend(SMALL);
    let o = bispik(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!stdout(&o).is_empty());
}

#[test]
fn snapshot_reproduces_the_run() {
    let w = workspace();
    let snap = w.path("run.conf");
    let a = w.path("a.ckpt");
    let mut args = vec!["train", "--corpus", s(&w.corpus), "--steps", "3", "--out", s(&a), "--snapshot", s(&snap)];
    args.extend(SMALL);
    assert!(bispik(&args).status.success());
    let b = w.path("b.ckpt");
    let o = bispik(&["train", "--config", s(&snap), "--out", s(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn usage_and_config_errors_exit_2_with_one_line() {
    let w = workspace();
    let cases: Vec<Vec<&str>> = vec![
        vec!["frobnicate"],
        vec!["distill", "--corpus", s(&w.corpus), "--out", "x.ckpt"],
        vec!["train", "--corpus", "/nonexistent/corpus.txt", "--out", "x.ckpt"],
        vec!["train", "--corpus", s(&w.corpus), "--out", "x.ckpt", "--set", "train.lr_peak=-1"],
        vec!["train", "--corpus", s(&w.corpus), "--out", "x.ckpt", "--set", "model.no_such_key=1"],
        vec!["train", "--corpus", s(&w.corpus), "--out", "/nonexistent/dir/x.ckpt"],
    ];
    for args in cases {
        let o = bispik(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert_eq!(stderr(&o).lines().count(), 1, "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn runtime_errors_exit_1() {
    let w = workspace();
    let bad = w.path("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let o = bispik(&["generate", "--checkpoint", s(&bad), "--prompt", "x"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error: "));
}

#[test]
fn help_and_selftest() {
    assert!(bispik(&["--help"]).status.success());
    let o = bispik(&["selftest", "--quick"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("all checks passed"));
}
