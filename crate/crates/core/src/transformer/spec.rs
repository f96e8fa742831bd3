use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{grid_dims, merged_count};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockStyle {
    Regular,
    Efficient,
}

/// A run of blocks at constant token count. With `ratio < 1` every block
/// of the stage builds a mask and the last one merges `N → P` tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub depth: usize,
    pub style: BlockStyle,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub image_height: usize,
    pub image_width: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    #[serde(default = "one")]
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub classes: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "yes")]
    pub positional: bool,
    pub stages: Vec<StageSpec>,
}

fn one() -> usize {
    1
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_tau() -> f64 {
    0.5
}
fn default_eta() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}

/// Whether and how a block builds its merge mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskRole {
    None,
    /// First block of a merging stage: mask from the block input.
    Init,
    /// Later blocks: one recurrent step from the previous block's mask.
    Chained,
}

/// Static shape information for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockLayout {
    pub index: usize,
    pub stage: usize,
    pub style: BlockStyle,
    pub tokens: usize,
    pub grid: Option<(usize, usize)>,
    pub role: MaskRole,
    /// `P`; equals `tokens` when the block has no mask.
    pub merged: usize,
    pub merged_grid: Option<(usize, usize)>,
    /// Whether this block applies its mask to the token stream.
    pub merges: bool,
}

impl BlockLayout {
    pub fn out_tokens(&self) -> usize {
        if self.merges {
            self.merged
        } else {
            self.tokens
        }
    }

    pub fn out_grid(&self) -> Option<(usize, usize)> {
        if self.merges {
            self.merged_grid
        } else {
            self.grid
        }
    }

    pub fn has_mask(&self) -> bool {
        self.role != MaskRole::None
    }
}

impl ModelSpec {
    /// `depth` regular blocks in one stage at compression `ratio`, for 16×16
    /// single-channel images in patches of 4.
    pub fn toy(depth: usize, ratio: f64, classes: usize) -> Self {
        ModelSpec {
            image_height: 16,
            image_width: 16,
            channels: 1,
            patch: 4,
            dim: 32,
            heads: 1,
            mlp_ratio: 4,
            classes,
            tau: default_tau(),
            eta: default_eta(),
            positional: true,
            stages: vec![StageSpec {
                depth,
                style: BlockStyle::Regular,
                ratio,
            }],
        }
    }

    /// Same architecture with every stage at `ratio`.
    pub fn with_ratio(&self, ratio: f64) -> Self {
        let mut s = self.clone();
        for st in &mut s.stages {
            st.ratio = ratio;
        }
        s
    }

    pub fn depth(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch, self.image_width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn input_dim(&self) -> usize {
        self.image_height * self.image_width * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("model spec: {m}")));
        if self.patch == 0
            || !self.image_height.is_multiple_of(self.patch)
            || !self.image_width.is_multiple_of(self.patch)
        {
            return bad("patch size must divide the image sides");
        }
        if self.image_height == 0 || self.image_width == 0 || self.channels == 0 {
            return bad("image dimensions must be positive");
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("head count must divide the embedding width");
        }
        if self.mlp_ratio == 0 || self.classes == 0 {
            return bad("mlp ratio and class count must be positive");
        }
        if !(self.tau > 0.0) || !(self.eta >= 0.0) || !self.eta.is_finite() {
            return bad("tau must be positive and eta non-negative");
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.depth == 0) {
            return bad("every stage needs at least one block");
        }
        self.layout().map(|_| ())
    }

    pub fn layout(&self) -> Result<Vec<BlockLayout>> {
        let mut tokens = self.tokens();
        let mut grid = Some(self.grid());
        let mut out = Vec::with_capacity(self.depth());
        for (si, st) in self.stages.iter().enumerate() {
            if st.style == BlockStyle::Efficient && grid.is_none() {
                return Err(Error::invalid(format!(
                    "stage {si}: efficient blocks need a token grid"
                )));
            }
            let merging = st.ratio < 1.0;
            let (merged, merged_grid) = match (merging, st.style) {
                (false, _) => (tokens, grid),
                (true, BlockStyle::Efficient) => {
                    let (h, w) = grid.expect("checked above");
                    let (hp, wp) = grid_dims(h, w, st.ratio)?;
                    (hp * wp, Some((hp, wp)))
                }
                (true, BlockStyle::Regular) => (merged_count(tokens, st.ratio)?, None),
            };
            if !merging && !(st.ratio > 0.0 && st.ratio <= 1.0) {
                return Err(Error::invalid(format!("stage {si}: ratio {} outside (0, 1]", st.ratio)));
            }
            for k in 0..st.depth {
                let role = match (merging, k) {
                    (false, _) => MaskRole::None,
                    (true, 0) => MaskRole::Init,
                    (true, _) => MaskRole::Chained,
                };
                out.push(BlockLayout {
                    index: out.len(),
                    stage: si,
                    style: st.style,
                    tokens,
                    grid,
                    role,
                    merged,
                    merged_grid,
                    merges: merging && k + 1 == st.depth,
                });
            }
            if merging {
                tokens = merged;
                grid = merged_grid;
            }
        }
        Ok(out)
    }
}
