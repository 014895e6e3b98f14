//! Byte-level tokenization, train/validation splitting, fixed-length
//! windows, and small synthetic corpora for smoke runs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub fn tokenize(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

/// Bytes of the token stream; ids outside `0..256` (the sequence marker) are
/// skipped.
pub fn detokenize(tokens: &[usize]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

/// One next-token training example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Corpus {
    /// Splits off the trailing `val_fraction` of the tokens for validation.
    pub fn from_tokens(tokens: Vec<usize>, val_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!("val_fraction must lie in [0, 1), got {val_fraction}")));
        }
        if tokens.len() < 2 {
            return Err(Error::Validation("corpus needs at least two tokens".into()));
        }
        let n_val = (tokens.len() as f64 * val_fraction).round() as usize;
        let cut = tokens.len() - n_val;
        let val = tokens[cut..].to_vec();
        let mut train = tokens;
        train.truncate(cut);
        Ok(Self { train, val })
    }

    pub fn from_text(text: &[u8], val_fraction: f64) -> Result<Self> {
        Self::from_tokens(tokenize(text), val_fraction)
    }

    /// Reads one or more UTF-8 text files, concatenated in the given order.
    pub fn from_files(paths: &[impl AsRef<Path>], val_fraction: f64) -> Result<Self> {
        let mut bytes = Vec::new();
        for p in paths {
            let b = std::fs::read(p.as_ref()).map_err(|e| Error::io(p, e))?;
            std::str::from_utf8(&b).map_err(|e| {
                Error::Format(format!("{} is not UTF-8: {e}", p.as_ref().display()))
            })?;
            bytes.extend_from_slice(&b);
        }
        Self::from_text(&bytes, val_fraction)
    }
}

/// Contiguous windows of `len` inputs with targets shifted by one; stride
/// `len`, trailing remainder dropped.
pub fn windows(tokens: &[usize], len: usize) -> Vec<Window> {
    if len == 0 || tokens.len() < len + 1 {
        return Vec::new();
    }
    (0..=(tokens.len() - len - 1) / len)
        .map(|i| {
            let s = i * len;
            Window { inputs: tokens[s..s + len].to_vec(), targets: tokens[s + 1..s + len + 1].to_vec() }
        })
        .collect()
}

/// `pattern` repeated until `n_bytes` long.
pub fn periodic_text(pattern: &str, n_bytes: usize) -> Vec<u8> {
    pattern.bytes().cycle().take(n_bytes).collect()
}

const WORDS: &[&str] = &[
    "the", "a", "spike", "neuron", "fires", "when", "its", "membrane", "crosses", "threshold", "and",
    "then", "resets", "model", "reads", "every", "token", "in", "order", "attention", "looks", "back",
    "at", "earlier", "words", "small", "networks", "learn", "simple", "patterns", "from", "text",
    "over", "many", "steps", "time", "signal", "flows", "through", "layers", "of", "binary", "units",
    "energy", "is", "spent", "only", "on", "events", "teacher", "student", "copies", "what", "it",
    "sees", "with", "care",
];

/// Deterministic English-like text: sentences of 4–11 words drawn from a
/// fixed word list with a Zipf-like bias.
pub fn synthetic_text(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = Rng::seed(seed);
    let mut out = Vec::with_capacity(n_bytes + 64);
    while out.len() < n_bytes {
        let n = 4 + rng.below(8);
        for w in 0..n {
            let u = rng.uniform();
            let idx = ((u * u) * WORDS.len() as f64) as usize;
            let word = WORDS[idx.min(WORDS.len() - 1)];
            if w == 0 {
                let mut cs = word.chars();
                if let Some(c) = cs.next() {
                    out.extend(c.to_uppercase().to_string().bytes());
                    out.extend(cs.as_str().bytes());
                }
            } else {
                out.push(b' ');
                out.extend(word.bytes());
            }
        }
        out.extend_from_slice(b". ");
    }
    out.truncate(n_bytes);
    out
}
