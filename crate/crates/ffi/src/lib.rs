//! C ABI over the `bispik` model: opaque model handles, integer status codes
//! and a per-thread last-error message.
//!
//! Every function returns a [`BispikStatus`]. On failure the message is
//! available from [`bispik_last_error`] until the next call on that thread.
//! Handles from [`bispik_model_load`] / [`bispik_model_init`] must be
//! released with [`bispik_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use bispik::checkpoint::{load_model, save_model};
use bispik::config::RunConfig;
use bispik::energy::{energy_report, EnergyConstants};
use bispik::model::{generate, Model, ModelKind};
use bispik::numerics::Rng;
use bispik::Error;

/// Opaque model handle.
pub struct BispikModel {
    inner: Model,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BispikStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    Config = 6,
    Evaluation = 7,
    Internal = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BispikKind {
    Spiking = 0,
    Dense = 1,
}

/// Energy summary for one sequence.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BispikEnergy {
    pub ann_energy_mj: f64,
    pub snn_energy_mj: f64,
    pub total_flops: u64,
    pub total_sops: u64,
    /// Mean block-input firing rate over layers.
    pub mean_firing_rate: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(BispikStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Dimension(_) | Error::Alignment(_) => BispikStatus::Dimension,
            Error::Validation(_) => BispikStatus::InvalidArgument,
            Error::Config(_) => BispikStatus::Config,
            Error::Evaluation(_) => BispikStatus::Evaluation,
            Error::Format(_) => BispikStatus::Format,
            Error::Io { .. } => BispikStatus::Io,
            _ => BispikStatus::Internal,
        };
        Failure(code, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(BispikStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BispikStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            BispikStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            BispikStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(BispikStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_arg<'a>(m: *const BispikModel) -> Result<&'a Model, Failure> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn tokens_arg(p: *const u32, n: usize) -> Result<Vec<usize>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(null("tokens"));
    }
    Ok(std::slice::from_raw_parts(p, n).iter().map(|&t| t as usize).collect())
}

/// Last error message on this thread; empty after a successful call. The
/// pointer stays valid until the next `bispik_*` call on the same thread.
#[no_mangle]
pub extern "C" fn bispik_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bispik_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bispik_model_load(path: *const c_char, out: *mut *mut BispikModel) -> BispikStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (inner, _) = load_model(path)?;
        *out = Box::into_raw(Box::new(BispikModel { inner }));
        Ok(())
    })
}

/// Creates a freshly initialised model. `config` is optional config-file
/// text whose `[model]` section sets the architecture.
///
/// # Safety
/// `config` must be null or NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bispik_model_init(
    kind: BispikKind,
    config: *const c_char,
    seed: u64,
    out: *mut *mut BispikModel,
) -> BispikStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config.is_null() {
            RunConfig::default()
        } else {
            RunConfig::parse_text(str_arg(config, "config")?, "config")?
        };
        let kind = match kind {
            BispikKind::Spiking => ModelKind::Snn,
            BispikKind::Dense => ModelKind::Ann,
        };
        let inner = Model::init(kind, cfg.model, seed)?;
        *out = Box::into_raw(Box::new(BispikModel { inner }));
        Ok(())
    })
}

/// Writes the model (without optimizer state) to a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bispik_model_save(model: *const BispikModel, path: *const c_char) -> BispikStatus {
    guard(|| {
        let m = model_arg(model)?;
        save_model(str_arg(path, "path")?, m, None)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bispik_model_free(model: *mut BispikModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size, maximum sequence length and allocated parameter count.
///
/// # Safety
/// `model` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn bispik_model_info(
    model: *const BispikModel,
    vocab_size: *mut usize,
    max_seq_len: *mut usize,
    n_params: *mut usize,
) -> BispikStatus {
    guard(|| {
        let m = model_arg(model)?;
        if let Some(v) = vocab_size.as_mut() {
            *v = m.cfg.vocab_size;
        }
        if let Some(v) = max_seq_len.as_mut() {
            *v = m.cfg.max_seq_len;
        }
        if let Some(v) = n_params.as_mut() {
            *v = m.allocated_params();
        }
        Ok(())
    })
}

/// Next-token logits for every position, row-major `[n_tokens, vocab]`.
///
/// # Safety
/// `tokens` must hold `n_tokens` ids and `logits` room for `logits_len` values.
#[no_mangle]
pub unsafe extern "C" fn bispik_model_forward(
    model: *const BispikModel,
    tokens: *const u32,
    n_tokens: usize,
    logits: *mut f64,
    logits_len: usize,
) -> BispikStatus {
    guard(|| {
        let m = model_arg(model)?;
        let toks = tokens_arg(tokens, n_tokens)?;
        let need = n_tokens * m.cfg.vocab_size;
        if logits_len < need {
            return Err(Failure(BispikStatus::BufferTooSmall, format!("logits needs {need} values, got {logits_len}")));
        }
        if logits.is_null() {
            return Err(null("logits"));
        }
        let out = m.logits(&toks)?;
        std::slice::from_raw_parts_mut(logits, need).copy_from_slice(out.data());
        Ok(())
    })
}

/// Continues `prompt` by `n_new` tokens (greedy when `temperature` is 0)
/// and writes the full sequence to `out_tokens`.
///
/// # Safety
/// `prompt` must hold `n_prompt` ids, `out_tokens` room for `out_cap`
/// values, and `out_len` be writable.
#[no_mangle]
pub unsafe extern "C" fn bispik_generate(
    model: *const BispikModel,
    prompt: *const u32,
    n_prompt: usize,
    n_new: usize,
    temperature: f64,
    seed: u64,
    out_tokens: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> BispikStatus {
    guard(|| {
        let m = model_arg(model)?;
        let p = tokens_arg(prompt, n_prompt)?;
        if out_len.is_null() || out_tokens.is_null() {
            return Err(null("output buffer"));
        }
        let need = n_prompt + n_new;
        *out_len = need;
        if out_cap < need {
            return Err(Failure(BispikStatus::BufferTooSmall, format!("output needs {need} tokens, got {out_cap}")));
        }
        let g = generate(m, &p, n_new, temperature, &mut Rng::seed(seed))?;
        let out = std::slice::from_raw_parts_mut(out_tokens, need);
        for (o, &t) in out.iter_mut().zip(&g.tokens) {
            *o = t as u32;
        }
        Ok(())
    })
}

/// Energy estimate for one forward pass of a spiking model over `tokens`.
/// Non-positive constants select the defaults.
///
/// # Safety
/// `tokens` must hold `n_tokens` ids and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn bispik_energy(
    model: *const BispikModel,
    tokens: *const u32,
    n_tokens: usize,
    e_mac: f64,
    e_ac: f64,
    out: *mut BispikEnergy,
) -> BispikStatus {
    guard(|| {
        let m = model_arg(model)?;
        let toks = tokens_arg(tokens, n_tokens)?;
        if out.is_null() {
            return Err(null("out"));
        }
        if m.kind != ModelKind::Snn {
            return Err(Failure(BispikStatus::InvalidArgument, "energy needs a spiking model".into()));
        }
        let d = EnergyConstants::default();
        let c = EnergyConstants {
            e_mac: if e_mac > 0.0 { e_mac } else { d.e_mac },
            e_ac: if e_ac > 0.0 { e_ac } else { d.e_ac },
        };
        let (_, trace) = m.snn_forward(&toks)?;
        let r = energy_report(&m.cfg, &trace, &c)?;
        let n = r.layers.len().max(1) as f64;
        *out = BispikEnergy {
            ann_energy_mj: r.ann_energy_mj,
            snn_energy_mj: r.snn_energy_mj,
            total_flops: r.total_flops(),
            total_sops: r.total_sops(),
            mean_firing_rate: r.layers.iter().map(|l| l.firing_rate).sum::<f64>() / n,
        };
        Ok(())
    })
}
