use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::Tensor;

use super::bound::ibb_bound;
use super::estimate::{c0_const, estimate_probs, mutual_info, soft_assign_all};
use super::{ClusterState, LabelTerm};

pub const CSV_HEADER: &str = "epoch,layer,I_xtilde_x,I_xtilde_y,ib_loss,ibb,c0";

/// IB diagnostics of one merging block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerIb {
    pub layer: usize,
    pub i_xtilde_x: f64,
    pub i_xtilde_y: f64,
    pub ib_loss: f64,
    pub ibb: f64,
    pub c0: f64,
}

impl LayerIb {
    /// `IB − (IBB − C₀)`; non-positive whenever the bound holds.
    pub fn margin(&self) -> f64 {
        self.ib_loss - (self.ibb - self.c0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IbReport {
    pub epoch: usize,
    pub dataset: String,
    pub layers: Vec<LayerIb>,
}

/// Evaluates one block's IB terms from its merged tokens `[n, P·D]`.
pub fn layer_ib(
    layer: usize,
    merged: &Tensor<f64>,
    phi_input: &Tensor<f64>,
    labels: &[usize],
    cs: &ClusterState,
) -> Result<LayerIb> {
    let phi_merged = soft_assign_all(merged, &cs.merged_centroids)?;
    let probs = estimate_probs(&phi_merged, phi_input, labels, cs.classes())?;
    let i_xtilde_x = mutual_info(&probs.joint_input)?;
    let i_xtilde_y = mutual_info(&probs.joint_label)?;
    Ok(LayerIb {
        layer,
        i_xtilde_x,
        i_xtilde_y,
        ib_loss: i_xtilde_x - i_xtilde_y,
        ibb: ibb_bound(merged, phi_input, LabelTerm::Observed(labels), cs)?,
        c0: c0_const(phi_input),
    })
}

pub fn write_csv<W: Write>(reports: &[IbReport], mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in reports {
        for l in &r.layers {
            writeln!(
                out,
                "{},{},{:e},{:e},{:e},{:e},{:e}",
                r.epoch, l.layer, l.i_xtilde_x, l.i_xtilde_y, l.ib_loss, l.ibb, l.c0
            )?;
        }
    }
    Ok(())
}
