//! Analytic FLOP counts. One multiply-accumulate is 2 FLOPs; every softmax,
//! exp or sigmoid element is 4; additions, ReLU and scaling are 1 each;
//! layer norm is 5 per element.

use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::transformer::{BlockLayout, BlockStyle, MaskRole, ModelSpec, ParamStore};

const MAC: u64 = 2;
const EXP: u64 = 4;
const NORM: u64 = 5;

/// Token-merging cost `6CDP + 3C + ND² + NDP` for a regular block.
/// `mask_width` is the `C` of the formula, whose meaning is left to the caller.
pub fn merge_flops_regular(n: u64, d: u64, p: u64, mask_width: u64) -> u64 {
    6 * mask_width * d * p + 3 * mask_width + n * d * d + n * d * p
}

/// Efficient blocks merge both `X` and `Z`, adding another `NDP`.
pub fn merge_flops_efficient(n: u64, d: u64, p: u64, mask_width: u64) -> u64 {
    merge_flops_regular(n, d, p, mask_width) + n * d * p
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockFlops {
    pub block: usize,
    pub tokens_in: usize,
    pub tokens_out: usize,
    /// Norm, local projection (efficient), QKV, scores, softmax, output projection.
    pub attention: u64,
    /// Residuals, fusion (efficient), second norm and the two-layer MLP.
    pub mlp: u64,
    /// Mask generation and the merge product; zero for unmasked blocks.
    pub merge_overhead: u64,
    pub total: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub embed: u64,
    pub blocks: Vec<BlockFlops>,
    pub head: u64,
    pub total: u64,
    pub parameters: usize,
}

/// Inference FLOPs per image for `spec`, with masks generated per sample.
pub fn model_flops(spec: &ModelSpec) -> Result<FlopsReport> {
    spec.validate()?;
    let d = spec.dim as u64;
    let n0 = spec.tokens() as u64;
    let mut embed = MAC * n0 * spec.patch_dim() as u64 * d + n0 * d;
    if spec.positional {
        embed += n0 * d;
    }
    let blocks: Vec<BlockFlops> = spec.layout()?.iter().map(|b| block_flops(spec, b)).collect();
    let last = blocks.last().map_or(n0, |b| b.tokens_out as u64);
    let c = spec.classes as u64;
    let head = last * d + MAC * d * c + c;
    let total = embed + head + blocks.iter().map(|b| b.total).sum::<u64>();
    let parameters = ParamStore::<f32>::init(spec, 0)?.count();
    Ok(FlopsReport {
        embed,
        blocks,
        head,
        total,
        parameters,
    })
}

fn block_flops(spec: &ModelSpec, b: &BlockLayout) -> BlockFlops {
    let d = spec.dim as u64;
    let n = b.tokens as u64;
    let m = b.out_tokens() as u64;
    let p = b.merged as u64;
    let hidden = d * spec.mlp_ratio as u64;
    let heads = spec.heads as u64;
    let efficient = b.style == BlockStyle::Efficient;

    let mut attention = NORM * n * d + 4 * MAC * n * d * d + 2 * MAC * n * n * d + EXP * heads * n * n;
    if efficient {
        attention += MAC * n * d * d + 2 * n * d;
    }

    let mut mlp = NORM * m * d + MAC * m * d * hidden + 2 * m * hidden + MAC * m * hidden * d + 2 * m * d;
    if efficient {
        mlp += 2 * MAC * m * d * d + 2 * m * d;
    } else if !b.merges {
        mlp += n * d;
    }

    let merge_overhead = match b.role {
        MaskRole::None => 0,
        MaskRole::Init => {
            // X/τ, linear, sigmoid, column softmax.
            n * d + MAC * n * d * p + n * p + 2 * EXP * n * p
        }
        MaskRole::Chained => chained_overhead(spec, n, p),
    } + if b.merges {
        let streams = if efficient { 2 } else { 1 };
        streams * MAC * n * p * d
    } else {
        0
    };

    BlockFlops {
        block: b.index,
        tokens_in: b.tokens,
        tokens_out: b.out_tokens(),
        attention,
        mlp,
        merge_overhead,
        total: attention + mlp + merge_overhead,
    }
}

/// One recurrent mask step for a single sample.
fn chained_overhead(spec: &ModelSpec, n: u64, p: u64) -> u64 {
    let d = spec.dim as u64;
    let c = spec.classes as u64;
    let pd = p * d;
    let input = spec.input_dim() as u64;
    // Previous merge GᵀZ and soft assignments of merged and input features.
    let merged = MAC * n * pd;
    let assign = 3 * c * pd + EXP * c + 3 * c * input + EXP * c;
    // ψ per cluster and the [P, D] coefficient.
    let psi = 3 * c;
    let coeff = 3 * c * pd + 2 * c * pd;
    // MLP(Z), its product with the coefficient, the step and the column softmax.
    let mask_mlp = 2 * MAC * n * d * d + 3 * n * d;
    let step = MAC * n * d * p + 2 * n * p + EXP * n * p;
    merged + assign + psi + coeff + mask_mlp + step
}

pub const CSV_HEADER: &str = "block,tokens_in,tokens_out,attention,mlp,merge_overhead,total";

impl FlopsReport {
    /// One row per block, then `embed`, `head` and `total` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for b in &self.blocks {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                b.block, b.tokens_in, b.tokens_out, b.attention, b.mlp, b.merge_overhead, b.total
            )?;
        }
        writeln!(w, "embed,,,,,,{}", self.embed)?;
        writeln!(w, "head,,,,,,{}", self.head)?;
        writeln!(w, "total,,,,,,{}", self.total)
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>5} {:>7} {:>12} {:>12} {:>12} {:>12}",
            "block", "tokens", "attention", "mlp", "merge", "total"
        )?;
        for b in &self.blocks {
            let tokens = format!("{}>{}", b.tokens_in, b.tokens_out);
            writeln!(
                f,
                "{:>5} {:>7} {:>12} {:>12} {:>12} {:>12}",
                b.block, tokens, b.attention, b.mlp, b.merge_overhead, b.total
            )?;
        }
        writeln!(f, "embed {}", self.embed)?;
        writeln!(f, "head {}", self.head)?;
        writeln!(f, "total {}", self.total)?;
        write!(f, "parameters {}", self.parameters)
    }
}
