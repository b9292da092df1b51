//! Theoretical energy from operation counts.
//!
//! Billing of recorded events:
//!
//! | event | spiking model | dense twin |
//! |---|---|---|
//! | product with a spike/count operand of total `c` | `c·n` (left) or `c·m` (right) ACs per group | `m·k·n` MACs |
//! | other products | `m·k·n` MACs | `m·k·n` MACs |
//! | index-mask aggregation | `adds` ACs | `dense_macs` MACs |
//! | LIF update | 1 AC per neuron per sub-step | 0 |

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::ForecastModel;
use crate::opcount::{self, OpEvent};

/// Energy per multiply-accumulate, picojoules.
pub const E_MAC_PJ: f64 = 4.6;
/// Energy per accumulate, picojoules.
pub const E_AC_PJ: f64 = 0.9;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerCounts {
    pub layer: String,
    pub mac_ops: u64,
    pub ac_ops: u64,
    pub neuron_updates: u64,
    pub spikes: u64,
    /// MACs of the same layer in the dense twin.
    pub dense_macs: u64,
}

impl LayerCounts {
    pub fn spike_rate(&self) -> f64 {
        if self.neuron_updates == 0 {
            0.0
        } else {
            self.spikes as f64 / self.neuron_updates as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub params: usize,
    /// In order of first appearance.
    pub layers: Vec<LayerCounts>,
}

impl OpCounts {
    /// Bills a list of recorded events.
    pub fn from_events(events: &[OpEvent], params: usize) -> Self {
        let mut layers: Vec<LayerCounts> = Vec::new();
        for e in events {
            let name = match e.scope() {
                "" => "other",
                s => s,
            };
            let idx = match layers.iter().position(|l| l.layer == name) {
                Some(i) => i,
                None => {
                    layers.push(LayerCounts {
                        layer: name.to_string(),
                        ..LayerCounts::default()
                    });
                    layers.len() - 1
                }
            };
            let l = &mut layers[idx];
            match *e {
                OpEvent::MatMul {
                    groups,
                    m,
                    k,
                    n,
                    left_count,
                    right_count,
                    ..
                } => {
                    let dense = (groups * m * k * n) as u64;
                    l.dense_macs += dense;
                    match (left_count, right_count) {
                        (Some(c), _) => l.ac_ops += c * n as u64,
                        (None, Some(c)) => l.ac_ops += c * m as u64,
                        (None, None) => l.mac_ops += dense,
                    }
                }
                OpEvent::Aggregate { adds, dense_macs, .. } => {
                    l.ac_ops += adds;
                    l.dense_macs += dense_macs;
                }
                OpEvent::Neurons { updates, spikes, .. } => {
                    l.ac_ops += updates;
                    l.neuron_updates += updates;
                    l.spikes += spikes;
                }
            }
        }
        OpCounts { params, layers }
    }

    pub fn mac_ops(&self) -> u64 {
        self.layers.iter().map(|l| l.mac_ops).sum()
    }

    pub fn ac_ops(&self) -> u64 {
        self.layers.iter().map(|l| l.ac_ops).sum()
    }

    pub fn dense_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.dense_macs).sum()
    }
}

/// Runs one forward pass on a batch and bills it.
pub fn count_ops(model: &ForecastModel, inputs: &Tensor, times: &[Vec<DateTime<Utc>>]) -> Result<OpCounts> {
    let rec = opcount::Recording::start();
    model.forward(inputs, times)?;
    Ok(OpCounts::from_events(&rec.finish(), model.param_count()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEnergy {
    pub layer: String,
    pub mac_ops: u64,
    pub ac_ops: u64,
    pub spike_rate: f64,
    pub energy_mj: f64,
    pub dense_energy_mj: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub params: usize,
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
    pub layers: Vec<LayerEnergy>,
    pub mac_ops: u64,
    pub ac_ops: u64,
    pub dense_ops: u64,
    pub energy_mj: f64,
    pub dense_energy_mj: f64,
    /// `(dense − spiking) / dense × 100`; 0 when both are 0.
    pub reduction_pct: f64,
}

fn mj(ops: u64, pj: f64) -> f64 {
    ops as f64 * pj * 1e-9
}

pub fn estimate_energy(counts: &OpCounts, e_mac_pj: f64, e_ac_pj: f64) -> Result<EnergyReport> {
    if !(e_mac_pj > 0.0 && e_ac_pj > 0.0 && e_mac_pj.is_finite() && e_ac_pj.is_finite()) {
        return Err(Error::contract(format!(
            "energy costs must be positive, got e_mac={e_mac_pj} e_ac={e_ac_pj}"
        )));
    }
    let layers: Vec<LayerEnergy> = counts
        .layers
        .iter()
        .map(|l| LayerEnergy {
            layer: l.layer.clone(),
            mac_ops: l.mac_ops,
            ac_ops: l.ac_ops,
            spike_rate: l.spike_rate(),
            energy_mj: mj(l.mac_ops, e_mac_pj) + mj(l.ac_ops, e_ac_pj),
            dense_energy_mj: mj(l.dense_macs, e_mac_pj),
        })
        .collect();
    let energy_mj = layers.iter().map(|l| l.energy_mj).sum::<f64>();
    let dense_energy_mj = layers.iter().map(|l| l.dense_energy_mj).sum::<f64>();
    let reduction_pct = if dense_energy_mj > 0.0 {
        (dense_energy_mj - energy_mj) / dense_energy_mj * 100.0
    } else {
        0.0
    };
    Ok(EnergyReport {
        params: counts.params,
        e_mac_pj,
        e_ac_pj,
        layers,
        mac_ops: counts.mac_ops(),
        ac_ops: counts.ac_ops(),
        dense_ops: counts.dense_macs(),
        energy_mj,
        dense_energy_mj,
        reduction_pct,
    })
}

impl EnergyReport {
    pub fn ops(&self) -> u64 {
        self.mac_ops + self.ac_ops
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "params_m: {:.6}", self.params as f64 / 1e6);
        let _ = writeln!(s, "e_mac_pj: {}", self.e_mac_pj);
        let _ = writeln!(s, "e_ac_pj: {}", self.e_ac_pj);
        let _ = writeln!(s, "mac_ops: {}", self.mac_ops);
        let _ = writeln!(s, "ac_ops: {}", self.ac_ops);
        let _ = writeln!(s, "ops_g: {:.6}", self.ops() as f64 / 1e9);
        let _ = writeln!(s, "energy_mj: {:.6}", self.energy_mj);
        let _ = writeln!(s, "dense_ops_g: {:.6}", self.dense_ops as f64 / 1e9);
        let _ = writeln!(s, "dense_energy_mj: {:.6}", self.dense_energy_mj);
        let _ = writeln!(s, "reduction_pct: {:.2}", self.reduction_pct);
        s
    }

    /// Two-row comparison: params, ops, energy, reduction.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let p = self.params as f64 / 1e6;
        let _ = writeln!(
            s,
            "{:<12} {:>10} {:>10} {:>12} {:>10}",
            "Method", "Param (M)", "Ops (G)", "Energy (mJ)", "Reduction"
        );
        let _ = writeln!(
            s,
            "{:<12} {:>10.4} {:>10.4} {:>12.6} {:>10}",
            "dense twin",
            p,
            self.dense_ops as f64 / 1e9,
            self.dense_energy_mj,
            "-"
        );
        let _ = writeln!(
            s,
            "{:<12} {:>10.4} {:>10.4} {:>12.6} {:>9.2}%",
            "spiking",
            p,
            self.ops() as f64 / 1e9,
            self.energy_mj,
            self.reduction_pct
        );
        s
    }

    /// `layer,mac_ops,ac_ops,spike_rate,energy_mj`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,mac_ops,ac_ops,spike_rate,energy_mj\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{},{},{}", l.layer, l.mac_ops, l.ac_ops, l.spike_rate, l.energy_mj);
        }
        s
    }

    pub fn write(&self, text_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        let (t, c) = (text_path.as_ref(), csv_path.as_ref());
        fs::write(t, self.to_text()).map_err(|e| Error::io(t, e))?;
        fs::write(c, self.to_csv()).map_err(|e| Error::io(c, e))
    }
}
