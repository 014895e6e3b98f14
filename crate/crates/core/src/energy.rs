//! MAC counting, firing-rate measurement and the MAC/AC energy model.
//!
//! Counting rules (biases, norms and elementwise work ignored):
//!
//! | component | MACs |
//! |---|---|
//! | Q/K/V/out projections | `4·L·d²` |
//! | attention scores | `h·L²·d_head` |
//! | attention × values | `h·L²·d_head` |
//! | FFN | `2·L·d·d_ff` |
//! | embedding lookup, positional add | `0` |
//! | LM head | `L·d·V` |
//!
//! Spiking blocks pay one accumulate per delivered spike:
//! `SOPs(l) = f_r(l)·T·FLOPs(l)`, with `f_r(l)` the spikes per neuron per
//! step entering block `l`. Embedding and head stay dense MACs.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TraceBundle};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyConstants {
    /// Joules per multiply-accumulate.
    pub e_mac: f64,
    /// Joules per accumulate.
    pub e_ac: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self { e_mac: 4.6e-12, e_ac: 0.9e-12 }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_mac > 0.0 && self.e_ac > 0.0) {
            return Err(Error::Config(format!(
                "energy constants must be positive, got e_mac={} e_ac={}",
                self.e_mac, self.e_ac
            )));
        }
        Ok(())
    }

    pub fn mac_mj(&self, ops: u64) -> f64 {
        ops as f64 * self.e_mac * 1e3
    }

    pub fn ac_mj(&self, ops: u64) -> f64 {
        ops as f64 * self.e_ac * 1e3
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockFlops {
    pub projections: u64,
    pub scores: u64,
    pub values: u64,
    pub sffn: u64,
}

impl BlockFlops {
    pub fn sfsa(&self) -> u64 {
        self.projections + self.scores + self.values
    }

    pub fn total(&self) -> u64 {
        self.sfsa() + self.sffn
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopCounts {
    pub seq_len: usize,
    pub embed: u64,
    pub blocks: Vec<BlockFlops>,
    pub head: u64,
}

impl FlopCounts {
    pub fn total(&self) -> u64 {
        self.embed + self.head + self.blocks.iter().map(BlockFlops::total).sum::<u64>()
    }
}

pub fn count_flops(cfg: &ModelConfig, seq_len: usize) -> Result<FlopCounts> {
    if seq_len == 0 || seq_len > cfg.max_seq_len {
        return Err(Error::Validation(format!(
            "seq_len {seq_len} outside 1..={}",
            cfg.max_seq_len
        )));
    }
    let (l, d, h, ff, v) = (
        seq_len as u64,
        cfg.d_model as u64,
        cfg.n_heads as u64,
        cfg.d_ff as u64,
        cfg.vocab_size as u64,
    );
    let dh = cfg.d_head() as u64;
    let block = BlockFlops {
        projections: 4 * l * d * d,
        scores: h * l * l * dh,
        values: h * l * l * dh,
        sffn: 2 * l * d * ff,
    };
    Ok(FlopCounts { seq_len, embed: 0, blocks: vec![block; cfg.n_layers], head: l * d * v })
}

/// Per-layer `f_r(l)`: spikes entering each block per neuron per step.
pub fn measure_firing_rates(trace: &TraceBundle) -> Result<Vec<f64>> {
    if trace.firing.is_empty() {
        return Err(Error::Validation("trace has no firing counters".into()));
    }
    trace
        .firing
        .iter()
        .enumerate()
        .map(|(l, f)| {
            if f.sfsa_input.steps == 0 {
                Err(Error::Validation(format!("layer {l} recorded no time steps")))
            } else {
                Ok(f.sfsa_input.rate())
            }
        })
        .collect()
}

/// `round(f_r·T·flops)`.
pub fn sops(f_r: f64, t_steps: usize, flops: u64) -> Result<u64> {
    if !(0.0..=1.0).contains(&f_r) {
        return Err(Error::Validation(format!("firing rate {f_r} outside [0, 1]")));
    }
    Ok((f_r * t_steps as f64 * flops as f64).round() as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerEnergy {
    pub flops: u64,
    pub flops_sfsa: u64,
    pub flops_sffn: u64,
    pub firing_rate: f64,
    /// Rate of the spikes entering the block's FFN (informational).
    pub sffn_input_rate: f64,
    pub sops: u64,
    pub ann_energy_mj: f64,
    pub snn_energy_mj: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub t_steps: usize,
    pub seq_len: usize,
    pub layers: Vec<LayerEnergy>,
    pub embed_flops: u64,
    pub lmhead_flops: u64,
    pub ann_energy_mj: f64,
    pub snn_energy_mj: f64,
}

pub const REPORT_MAGIC: &str = "bispik-energy-report";
pub const REPORT_VERSION: u32 = 1;

/// Builds the report from measured rates; `sffn_rates` only feed the
/// informational column.
pub fn energy_report_from_rates(
    cfg: &ModelConfig,
    seq_len: usize,
    t_steps: usize,
    rates: &[f64],
    sffn_rates: &[f64],
    constants: &EnergyConstants,
) -> Result<EnergyReport> {
    constants.validate()?;
    let flops = count_flops(cfg, seq_len)?;
    if rates.len() != flops.blocks.len() || sffn_rates.len() != rates.len() {
        return Err(Error::Dimension(format!(
            "{} firing rates for {} layers",
            rates.len(),
            flops.blocks.len()
        )));
    }
    let mut layers = Vec::with_capacity(rates.len());
    for ((b, &r), &rf) in flops.blocks.iter().zip(rates).zip(sffn_rates) {
        let s = sops(r, t_steps, b.total())?;
        layers.push(LayerEnergy {
            flops: b.total(),
            flops_sfsa: b.sfsa(),
            flops_sffn: b.sffn,
            firing_rate: r,
            sffn_input_rate: rf,
            sops: s,
            ann_energy_mj: constants.mac_mj(b.total()),
            snn_energy_mj: constants.ac_mj(s),
        });
    }
    let dense = constants.mac_mj(flops.embed + flops.head);
    let ann = dense + constants.mac_mj(flops.blocks.iter().map(BlockFlops::total).sum());
    let snn = dense + constants.ac_mj(layers.iter().map(|l| l.sops).sum());
    Ok(EnergyReport {
        t_steps,
        seq_len,
        layers,
        embed_flops: flops.embed,
        lmhead_flops: flops.head,
        ann_energy_mj: ann,
        snn_energy_mj: snn,
    })
}

pub fn energy_report(
    cfg: &ModelConfig,
    trace: &TraceBundle,
    constants: &EnergyConstants,
) -> Result<EnergyReport> {
    let (rates, sffn) = if cfg.n_layers == 0 {
        (Vec::new(), Vec::new())
    } else {
        let r = measure_firing_rates(trace)?;
        (r, trace.firing.iter().map(|f| f.sffn_input.rate()).collect())
    };
    energy_report_from_rates(cfg, trace.seq_len, trace.t_steps, &rates, &sffn, constants)
}

impl EnergyReport {
    pub fn total_flops(&self) -> u64 {
        self.embed_flops + self.lmhead_flops + self.layers.iter().map(|l| l.flops).sum::<u64>()
    }

    pub fn total_sops(&self) -> u64 {
        self.layers.iter().map(|l| l.sops).sum()
    }

    /// Machine-readable `key: value` lines under a magic/version header.
    pub fn to_text(&self) -> String {
        let mut s = format!("{REPORT_MAGIC} {REPORT_VERSION}\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}: {v}");
        };
        kv("t_steps", self.t_steps.to_string());
        kv("seq_len", self.seq_len.to_string());
        kv("n_layers", self.layers.len().to_string());
        kv("embed_flops", self.embed_flops.to_string());
        kv("lmhead_flops", self.lmhead_flops.to_string());
        for (i, l) in self.layers.iter().enumerate() {
            kv(&format!("layer.{i}.flops"), l.flops.to_string());
            kv(&format!("layer.{i}.flops_sfsa"), l.flops_sfsa.to_string());
            kv(&format!("layer.{i}.flops_sffn"), l.flops_sffn.to_string());
            kv(&format!("layer.{i}.firing_rate"), l.firing_rate.to_string());
            kv(&format!("layer.{i}.sffn_input_rate"), l.sffn_input_rate.to_string());
            kv(&format!("layer.{i}.sops"), l.sops.to_string());
            kv(&format!("layer.{i}.ann_energy_mj"), l.ann_energy_mj.to_string());
            kv(&format!("layer.{i}.snn_energy_mj"), l.snn_energy_mj.to_string());
        }
        kv("total_flops", self.total_flops().to_string());
        kv("total_sops", self.total_sops().to_string());
        kv("ann_energy_mj", self.ann_energy_mj.to_string());
        kv("snn_energy_mj", self.snn_energy_mj.to_string());
        s
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "T = {}, L = {}", self.t_steps, self.seq_len);
        let _ = writeln!(
            s,
            "{:<8} {:>14} {:>10} {:>14} {:>12} {:>12}",
            "layer", "MACs", "f_r", "SOPs", "ANN mJ", "SNN mJ"
        );
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<8} {:>14} {:>10.4} {:>14} {:>12.6e} {:>12.6e}",
                i, l.flops, l.firing_rate, l.sops, l.ann_energy_mj, l.snn_energy_mj
            );
        }
        let _ = writeln!(s, "{:<8} {:>14}", "embed", self.embed_flops);
        let _ = writeln!(s, "{:<8} {:>14}", "lm-head", self.lmhead_flops);
        let _ = writeln!(s, "total ANN energy: {:.6e} mJ", self.ann_energy_mj);
        let _ = writeln!(s, "total SNN energy: {:.6e} mJ", self.snn_energy_mj);
        s
    }
}
