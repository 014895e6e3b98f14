//! `bispik` command line: argument parsing, config resolution, snapshots and
//! the subcommand drivers.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_model, save_model};
use crate::config::RunConfig;
use crate::corpus::{tokenize, windows, Corpus};
use crate::energy::energy_report;
use crate::error::{Error, Result};
use crate::model::{generate, Model, ModelKind};
use crate::numerics::Rng;
use crate::training::{train_loop, validation_ce, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "bispik", version, about = "Binary spiking causal language model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the dense teacher on a corpus and write its checkpoint.
    TrainTeacher(Common),
    /// Train a spiking student against a frozen teacher.
    Distill(Common),
    /// Train a spiking model on next-token cross-entropy only.
    Train(Common),
    /// Continue a prompt with a trained checkpoint.
    Generate(Common),
    /// Emit the energy report for one evaluation window.
    Profile(Common),
    /// Report validation cross-entropy and per-layer firing rates.
    Eval(Common),
    /// Run the built-in invariant and gradient checks.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Config file (`[section]` + `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.total_steps=200`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Corpus text file (repeatable).
    #[arg(long)]
    corpus: Vec<PathBuf>,
    /// Teacher checkpoint for `distill`.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Input checkpoint (resume, generate, eval, profile).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics TSV output.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Energy report output.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Resolved-config snapshot output.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long = "n-new")]
    n_new: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct SelftestArgs {
    /// Smaller sample sizes.
    #[arg(long)]
    quick: bool,
}

/// Runs the CLI on `argv` (including the program name). Returns the process
/// exit status: 0 success, 1 runtime failure, 2 usage or config error.
pub fn run_command(argv: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let _ = writeln!(err, "{first}");
            return 2;
        }
    };
    let result = match cli.command {
        Command::Selftest(a) => {
            return if crate::selftest::run(out, a.quick) { 0 } else { 1 };
        }
        Command::TrainTeacher(c) => dispatch(Mode::TrainTeacher, &c, out, err),
        Command::Distill(c) => dispatch(Mode::Distill, &c, out, err),
        Command::Train(c) => dispatch(Mode::Train, &c, out, err),
        Command::Generate(c) => dispatch(Mode::Generate, &c, out, err),
        Command::Profile(c) => dispatch(Mode::Profile, &c, out, err),
        Command::Eval(c) => dispatch(Mode::Eval, &c, out, err),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            let _ = writeln!(err, "error: {line}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    TrainTeacher,
    Distill,
    Train,
    Generate,
    Profile,
    Eval,
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Config(format!("--config: file `{}` does not exist", p.display())));
            }
            RunConfig::from_file(p)?
        }
        None => RunConfig::default(),
    };
    for s in &c.set {
        cfg.set_dotted(s)?;
    }
    if !c.corpus.is_empty() {
        cfg.paths.corpus = c.corpus.clone();
    }
    let override_path = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
        if v.is_some() {
            *slot = v.clone();
        }
    };
    override_path(&mut cfg.paths.teacher, &c.teacher);
    override_path(&mut cfg.paths.checkpoint_in, &c.checkpoint);
    override_path(&mut cfg.paths.checkpoint_out, &c.out);
    override_path(&mut cfg.paths.metrics_out, &c.metrics);
    override_path(&mut cfg.paths.report_out, &c.report);
    if let Some(s) = c.steps {
        cfg.train.total_steps = s;
    }
    if let Some(s) = c.seed {
        cfg.train.seed = s;
        cfg.generate.seed = s;
    }
    if let Some(p) = &c.prompt {
        cfg.generate.prompt = p.clone();
    }
    if let Some(n) = c.n_new {
        cfg.generate.n_new = n;
    }
    if let Some(t) = c.temperature {
        cfg.generate.temperature = t;
    }
    Ok(cfg)
}

fn require<'a>(p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    let p = p.as_deref().ok_or_else(|| Error::Config(format!("{field} is required for this command")))?;
    if !p.exists() {
        return Err(Error::Config(format!("{field}: file `{}` does not exist", p.display())));
    }
    Ok(p)
}

fn check_output(p: &Option<PathBuf>, field: &str) -> Result<()> {
    if let Some(p) = p {
        let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !dir.is_dir() {
            return Err(Error::Config(format!("{field}: directory `{}` does not exist", dir.display())));
        }
    }
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    if cfg.paths.corpus.is_empty() {
        return Err(Error::Config("paths.corpus is required for this command".into()));
    }
    for p in &cfg.paths.corpus {
        if !p.exists() {
            return Err(Error::Config(format!("paths.corpus: file `{}` does not exist", p.display())));
        }
    }
    Corpus::from_files(&cfg.paths.corpus, cfg.val_fraction)
}

fn snapshot_path(c: &Common, cfg: &RunConfig) -> Option<PathBuf> {
    if let Some(s) = &c.snapshot {
        return Some(s.clone());
    }
    [&cfg.paths.checkpoint_out, &cfg.paths.report_out, &cfg.paths.metrics_out]
        .into_iter()
        .flatten()
        .next()
        .map(|p| {
            let mut s = p.clone().into_os_string();
            s.push(".config");
            PathBuf::from(s)
        })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn dispatch(mode: Mode, c: &Common, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = resolve(c)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.energy.validate()?;
    for (p, f) in [
        (&cfg.paths.checkpoint_out, "paths.checkpoint_out"),
        (&cfg.paths.metrics_out, "paths.metrics_out"),
        (&cfg.paths.report_out, "paths.report_out"),
        (&c.snapshot, "--snapshot"),
    ] {
        check_output(p, f)?;
    }
    let io = |e| Error::io("stdout", e);
    if let Some(s) = snapshot_path(c, &cfg) {
        write_file(&s, cfg.to_text().as_bytes())?;
    }
    match mode {
        Mode::TrainTeacher | Mode::Train | Mode::Distill => {
            let corpus = load_corpus(&cfg)?;
            let out_path = cfg
                .paths
                .checkpoint_out
                .clone()
                .ok_or_else(|| Error::Config("paths.checkpoint_out is required for training".into()))?;
            let kind = if mode == Mode::TrainTeacher { ModelKind::Ann } else { ModelKind::Snn };
            let (model, adam) = match &cfg.paths.checkpoint_in {
                Some(_) => {
                    let (m, a) = load_model(require(&cfg.paths.checkpoint_in, "paths.checkpoint_in")?)?;
                    if m.kind != kind {
                        return Err(Error::Config(format!(
                            "paths.checkpoint_in holds a {} model, this command trains {}",
                            m.kind.as_str(),
                            kind.as_str()
                        )));
                    }
                    (m, a)
                }
                None => (Model::init(kind, cfg.model, cfg.train.seed)?, None),
            };
            let teacher = if mode == Mode::Distill {
                let (t, _) = load_model(require(&cfg.paths.teacher, "paths.teacher")?)?;
                cfg.spad.validate()?;
                Some(t)
            } else {
                None
            };
            let tcfg = TrainConfig { spad: teacher.as_ref().map(|_| cfg.spad), ..cfg.train };
            let mut metrics: Vec<u8> = Vec::new();
            let outcome = train_loop(&tcfg, model, &corpus, teacher.as_ref(), adam, &mut metrics)?;
            save_model(&out_path, &outcome.model, Some(&outcome.adam))?;
            if let Some(m) = &cfg.paths.metrics_out {
                write_file(m, &metrics)?;
            }
            let ce = validation_ce(&outcome.model, &corpus.val, tcfg.seq_len.min(outcome.model.cfg.max_seq_len), tcfg.val_windows)?;
            writeln!(out, "steps: {}", tcfg.total_steps).map_err(io)?;
            writeln!(out, "val_ce: {ce}").map_err(io)?;
            writeln!(out, "checkpoint: {}", out_path.display()).map_err(io)?;
        }
        Mode::Generate => {
            let (model, _) = load_model(require(&cfg.paths.checkpoint_in, "paths.checkpoint_in")?)?;
            if cfg.generate.prompt.is_empty() {
                return Err(Error::Config("generate.prompt must not be empty".into()));
            }
            let prompt = tokenize(cfg.generate.prompt.as_bytes());
            let mut rng = Rng::seed(cfg.generate.seed);
            let g = generate(&model, &prompt, cfg.generate.n_new, cfg.generate.temperature, &mut rng)?;
            let new = crate::corpus::detokenize(&g.tokens[prompt.len()..]);
            out.write_all(&new).map_err(io)?;
            writeln!(out).map_err(io)?;
            if g.truncated_steps > 0 {
                let _ = writeln!(err, "note: context truncated from the left on {} steps", g.truncated_steps);
            }
        }
        Mode::Profile => {
            let model = match &cfg.paths.checkpoint_in {
                Some(_) => load_model(require(&cfg.paths.checkpoint_in, "paths.checkpoint_in")?)?.0,
                None => Model::init(ModelKind::Snn, cfg.model, cfg.train.seed)?,
            };
            if model.kind != ModelKind::Snn {
                return Err(Error::Config("paths.checkpoint_in: profile needs a spiking model".into()));
            }
            let corpus = load_corpus(&cfg)?;
            let len = cfg.train.seq_len.min(model.cfg.max_seq_len);
            let ws = windows(&corpus.val, len);
            let w = ws.get(cfg.eval_offset).ok_or_else(|| {
                Error::Config(format!(
                    "energy.eval_offset {} is past the {} validation windows",
                    cfg.eval_offset,
                    ws.len()
                ))
            })?;
            let (_, trace) = model.snn_forward(&w.inputs)?;
            let report = energy_report(&model.cfg, &trace, &cfg.energy)?;
            write!(out, "{}", report.table()).map_err(io)?;
            if let Some(p) = &cfg.paths.report_out {
                write_file(p, report.to_text().as_bytes())?;
            }
        }
        Mode::Eval => {
            let (model, _) = load_model(require(&cfg.paths.checkpoint_in, "paths.checkpoint_in")?)?;
            let corpus = load_corpus(&cfg)?;
            let len = cfg.train.seq_len.min(model.cfg.max_seq_len);
            let ce = validation_ce(&model, &corpus.val, len, cfg.train.val_windows)?;
            writeln!(out, "val_ce: {ce}").map_err(io)?;
            if model.kind == ModelKind::Snn {
                let ws = windows(&corpus.val, len);
                let n = ws.len().min(cfg.train.val_windows.max(1));
                let mut rates = vec![0.0; model.cfg.n_layers];
                for w in &ws[..n] {
                    let (_, trace) = model.snn_forward(&w.inputs)?;
                    for (r, f) in rates.iter_mut().zip(&trace.firing) {
                        *r += f.sfsa_input.rate() / n as f64;
                    }
                }
                for (i, r) in rates.iter().enumerate() {
                    writeln!(out, "layer.{i}.firing_rate: {r}").map_err(io)?;
                }
            }
        }
    }
    Ok(())
}
