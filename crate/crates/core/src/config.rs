//! Run configuration: a line-oriented `key = value` file with `[section]`
//! headers. `#` starts a comment. Sections and keys:
//!
//! ```text
//! [model]     vocab_size d_model n_layers n_heads d_ff max_seq_len t_steps
//!             neuron_mode lif_beta lif_u_thr surrogate_alpha ternary_alpha
//!             ternary_u_reset ternary_beta attn_thr relaxed init_std
//! [train]     lr_peak warmup_ratio total_steps batch_size grad_accum grad_clip
//!             adam_beta1 adam_beta2 adam_eps seed seq_len val_windows
//! [spad]      lambda (five comma-separated weights) tau gamma_attn gamma_feat
//! [data]      val_fraction
//! [generate]  prompt n_new temperature seed
//! [energy]    e_mac e_ac eval_offset
//! [paths]     corpus teacher checkpoint_in checkpoint_out metrics_out report_out
//! ```
//!
//! `corpus` may list several files separated by `,`.

use std::path::{Path, PathBuf};

use crate::distill::SpadConfig;
use crate::energy::EnergyConstants;
use crate::error::{Error, Result};
use crate::model::{parse, ModelConfig};
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub corpus: Vec<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub metrics_out: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    pub prompt: String,
    pub n_new: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { prompt: String::new(), n_new: 64, temperature: 0.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub spad: SpadConfig,
    pub val_fraction: f64,
    pub generate: GenerateConfig,
    pub energy: EnergyConstants,
    /// Validation window index profiled by `profile`.
    pub eval_offset: usize,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            spad: SpadConfig::default(),
            val_fraction: 0.1,
            generate: GenerateConfig::default(),
            energy: EnergyConstants::default(),
            eval_offset: 0,
            paths: Paths::default(),
        }
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    let v = v.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Applies one `section.key = value` setting.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let field = format!("{section}.{key}");
        let wrap = |e: Error| match e {
            Error::Config(m) => Error::Config(format!("{field}: {m}")),
            other => other,
        };
        match section {
            "model" => self.model.set(key, value).map_err(wrap),
            "train" => self.train.set(key, value).map_err(wrap),
            "spad" => match key {
                "lambda" => {
                    let parts: Vec<&str> = value.split(',').collect();
                    if parts.len() != 5 {
                        return Err(Error::Config(format!("{field}: expected five comma-separated weights")));
                    }
                    for (i, p) in parts.iter().enumerate() {
                        self.spad.lambda[i] = parse(&field, p)?;
                    }
                    Ok(())
                }
                "tau" => Ok(self.spad.tau = parse(&field, value)?),
                "gamma_attn" => Ok(self.spad.gamma_attn = parse(&field, value)?),
                "gamma_feat" => Ok(self.spad.gamma_feat = parse(&field, value)?),
                _ => Err(Error::Config(format!("unknown key `{field}`"))),
            },
            "data" => match key {
                "val_fraction" => Ok(self.val_fraction = parse(&field, value)?),
                _ => Err(Error::Config(format!("unknown key `{field}`"))),
            },
            "generate" => match key {
                "prompt" => Ok(self.generate.prompt = unescape(value)),
                "n_new" => Ok(self.generate.n_new = parse(&field, value)?),
                "temperature" => Ok(self.generate.temperature = parse(&field, value)?),
                "seed" => Ok(self.generate.seed = parse(&field, value)?),
                _ => Err(Error::Config(format!("unknown key `{field}`"))),
            },
            "energy" => match key {
                "e_mac" => Ok(self.energy.e_mac = parse(&field, value)?),
                "e_ac" => Ok(self.energy.e_ac = parse(&field, value)?),
                "eval_offset" => Ok(self.eval_offset = parse(&field, value)?),
                _ => Err(Error::Config(format!("unknown key `{field}`"))),
            },
            "paths" => {
                match key {
                    "corpus" => {
                        self.paths.corpus =
                            value.split(',').filter_map(opt_path).collect();
                    }
                    "teacher" => self.paths.teacher = opt_path(value),
                    "checkpoint_in" => self.paths.checkpoint_in = opt_path(value),
                    "checkpoint_out" => self.paths.checkpoint_out = opt_path(value),
                    "metrics_out" => self.paths.metrics_out = opt_path(value),
                    "report_out" => self.paths.report_out = opt_path(value),
                    _ => return Err(Error::Config(format!("unknown key `{field}`"))),
                }
                Ok(())
            }
            _ => Err(Error::Config(format!("unknown section `[{section}]`"))),
        }
    }

    /// Applies a `section.key=value` override.
    pub fn set_dotted(&mut self, assignment: &str) -> Result<()> {
        let (lhs, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not section.key=value")))?;
        let (section, key) = lhs
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key `{}` needs a section", lhs.trim())))?;
        self.set(section, key, value)
    }

    pub fn parse_text(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find(" #") {
                Some(p) => &raw[..p],
                None if raw.trim_start().starts_with('#') => "",
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| Error::Config(format!("{origin}:{}: {m}", i + 1));
            if let Some(rest) = line.strip_prefix('[') {
                section = rest
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("malformed section header `{line}`")))?
                    .trim()
                    .to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected key = value, got `{line}`")))?;
            if section.is_empty() {
                return Err(at(format!("key `{}` outside any section", k.trim())));
            }
            cfg.set(&section, k.trim(), v).map_err(|e| match e {
                Error::Config(m) => at(m),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text, &path.display().to_string())
    }

    /// Full resolved configuration in the file format.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# bispik-config 1\n");
        let mut section = |name: &str, kv: Vec<(String, String)>| {
            s.push_str(&format!("[{name}]\n"));
            for (k, v) in kv {
                s.push_str(&format!("{k} = {v}\n"));
            }
        };
        section("model", self.model.to_kv());
        section("train", self.train.to_kv());
        let l = self.spad.lambda;
        section(
            "spad",
            vec![
                ("lambda".into(), format!("{},{},{},{},{}", l[0], l[1], l[2], l[3], l[4])),
                ("tau".into(), self.spad.tau.to_string()),
                ("gamma_attn".into(), self.spad.gamma_attn.to_string()),
                ("gamma_feat".into(), self.spad.gamma_feat.to_string()),
            ],
        );
        section("data", vec![("val_fraction".into(), self.val_fraction.to_string())]);
        section(
            "generate",
            vec![
                ("prompt".into(), escape(&self.generate.prompt)),
                ("n_new".into(), self.generate.n_new.to_string()),
                ("temperature".into(), self.generate.temperature.to_string()),
                ("seed".into(), self.generate.seed.to_string()),
            ],
        );
        section(
            "energy",
            vec![
                ("e_mac".into(), self.energy.e_mac.to_string()),
                ("e_ac".into(), self.energy.e_ac.to_string()),
                ("eval_offset".into(), self.eval_offset.to_string()),
            ],
        );
        let corpus: Vec<String> = self.paths.corpus.iter().map(|p| p.display().to_string()).collect();
        section(
            "paths",
            vec![
                ("corpus".into(), corpus.join(",")),
                ("teacher".into(), show(&self.paths.teacher)),
                ("checkpoint_in".into(), show(&self.paths.checkpoint_in)),
                ("checkpoint_out".into(), show(&self.paths.checkpoint_out)),
                ("metrics_out".into(), show(&self.paths.metrics_out)),
                ("report_out".into(), show(&self.paths.report_out)),
            ],
        );
        s
    }
}

/// Prompts may hold spaces, `#`, `=` or newlines; these are written as
/// `\s`, `\h`, `\e`, `\n` and `\\`.
fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            '#' => out.push_str("\\h"),
            '=' => out.push_str("\\e"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('s') => out.push(' '),
            Some('h') => out.push('#'),
            Some('e') => out.push('='),
            Some('n') => out.push('\n'),
            Some('\\') => out.push('\\'),
            Some(o) => {
                out.push('\\');
                out.push(o);
            }
            None => out.push('\\'),
        }
    }
    out
}
