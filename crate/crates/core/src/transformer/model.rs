use crate::error::{Error, Result};
use crate::ib::{ibb_coefficient, psi, ClusterState, LabelTerm};
use crate::mask::{merge_tokens, UpdateScope};
use crate::numerics::{Scalar, Tape, Tensor, Var};

use super::layers::{self, AttnVars, MlpVars, NormVars};
use super::params::{Bound, ParamStore};
use super::spec::{BlockLayout, BlockStyle, MaskRole, ModelSpec};

/// How masks are produced during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum MaskMode<'a> {
    /// No masks, no merging: the plain transformer.
    Off,
    /// Masks are built and applied but chained blocks skip the recurrent
    /// step, since no cluster statistics exist yet.
    Bootstrap,
    Update(UpdateContext<'a>),
}

#[derive(Clone, Copy, Debug)]
pub struct UpdateContext<'a> {
    /// Indexed by block; required for every chained block.
    pub states: &'a [Option<ClusterState>],
    /// Input assignments of the batch, `[B, C]`.
    pub phi_input: &'a Tensor<f64>,
    pub labels: LabelTerm<'a>,
    pub scope: UpdateScope,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    /// Attention output `[B, N, D]`.
    pub z: Var,
    /// `[B, N, P]`
    pub mask: Option<Var>,
    /// `GᵀZ`, `[B, P, D]`.
    pub merged: Option<Var>,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub embedded: Var,
    pub blocks: Vec<BlockTrace>,
    pub logits: Var,
}

impl ForwardTrace {
    /// Block features for IB statistics: merged tokens when the block has a
    /// mask, otherwise its attention output; flattened to `[B, ·]` in f64.
    pub fn features<T: Scalar>(&self, tape: &Tape<T>, block: usize) -> Result<Tensor<f64>> {
        let b = &self.blocks[block];
        let v = tape.value(b.merged.unwrap_or(b.z));
        let n = v.shape()[0];
        v.cast::<f64>().reshape(&[n, v.len() / n])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
    layout: Vec<BlockLayout>,
}

impl<T: Scalar> Model<T> {
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let params = ParamStore::init(spec, seed)?;
        Self::new(spec.clone(), params)
    }

    /// Pairs `params` with `spec`, checking every expected tensor is present
    /// with the right shape.
    pub fn new(spec: ModelSpec, params: ParamStore<T>) -> Result<Self> {
        let reference = ParamStore::<T>::init(&spec, 0)?;
        if reference.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, found {}",
                reference.len(),
                params.len()
            )));
        }
        for (name, t) in reference.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape("parameters", got.shape(), t.shape()));
            }
        }
        let layout = spec.layout()?;
        Ok(Model { spec, params, layout })
    }

    pub fn layout(&self) -> &[BlockLayout] {
        &self.layout
    }

    /// Blocks that build a mask.
    pub fn mask_blocks(&self) -> Vec<usize> {
        self.layout.iter().filter(|b| b.has_mask()).map(|b| b.index).collect()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    fn block_var(bound: &Bound, block: usize, key: &str) -> Result<Var> {
        bound.var(&format!("blocks.{block}.{key}"))
    }

    fn attn_vars(&self, bound: &Bound, block: usize) -> Result<AttnVars> {
        let get = |w: &str| {
            (0..self.spec.heads)
                .map(|h| Self::block_var(bound, block, &format!("attn.{w}.h{h}")))
                .collect::<Result<Vec<_>>>()
        };
        Ok(AttnVars {
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
        })
    }

    fn mlp_vars(bound: &Bound, block: usize, prefix: &str) -> Result<MlpVars> {
        let v = |k: &str| Self::block_var(bound, block, &format!("{prefix}.{k}"));
        Ok(MlpVars {
            w1: v("fc1.weight")?,
            b1: v("fc1.bias")?,
            w2: v("fc2.weight")?,
            b2: v("fc2.bias")?,
        })
    }

    fn norm_vars(bound: &Bound, prefix: &str) -> Result<NormVars> {
        Ok(NormVars {
            gamma: bound.var(&format!("{prefix}.gamma"))?,
            beta: bound.var(&format!("{prefix}.beta"))?,
        })
    }

    /// Patch embedding of `[B, H, W, C]` (or `[B, H, W]` for one channel)
    /// images into `[B, N, D]` tokens.
    pub fn embed(&self, tape: &mut Tape<T>, bound: &Bound, images: &Tensor<T>) -> Result<Var> {
        let s = &self.spec;
        let images = match images.rank() {
            3 => images.reshape(&[images.shape()[0], images.shape()[1], images.shape()[2], 1])?,
            _ => images.clone(),
        };
        let want = [s.image_height, s.image_width, s.channels];
        if images.rank() != 4 || images.shape()[1..] != want {
            return Err(Error::shape("embed", images.shape(), &want));
        }
        let patches = tape.constant(layers::patchify(&images, s.patch)?);
        let x = layers::linear(
            tape,
            patches,
            bound.var("embed.weight")?,
            Some(bound.var("embed.bias")?),
        )?;
        if s.positional {
            tape.add_broadcast(x, bound.var("embed.pos")?)
        } else {
            Ok(x)
        }
    }

    /// One block with an explicit mask. Returns `(Z, merged, output)`; the
    /// block merges only if its layout says so and `mask` is present.
    pub fn block_forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        block: usize,
        x: Var,
        mask: Option<Var>,
    ) -> Result<(Var, Option<Var>, Var)> {
        let l = &self.layout[block];
        let (tokens, d) = (tape.shape(x)[1], tape.shape(x)[2]);
        if tokens != l.tokens || d != self.spec.dim {
            return Err(Error::shape("block", tape.shape(x), &[l.tokens, self.spec.dim]));
        }
        if let Some(g) = mask {
            self.check_mask(tape, block, g)?;
        }
        let z = self.block_z(tape, bound, block, x)?;
        self.block_tail(tape, bound, block, x, z, mask)
    }

    fn block_tail(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        block: usize,
        x: Var,
        z: Var,
        mask: Option<Var>,
    ) -> Result<(Var, Option<Var>, Var)> {
        let l = &self.layout[block];
        let merged = match mask {
            Some(g) => Some(layers::merge(tape, g, z)?),
            None => None,
        };
        let merging = l.merges && mask.is_some();
        let trunk = match l.style {
            BlockStyle::Regular if merging => merged.expect("mask present"),
            BlockStyle::Regular => tape.add(x, z)?,
            BlockStyle::Efficient => {
                let (xm, zm) = if merging {
                    (
                        layers::merge(tape, mask.expect("mask present"), x)?,
                        merged.expect("mask present"),
                    )
                } else {
                    (x, z)
                };
                let fx = tape.matmul(xm, Self::block_var(bound, block, "fuse.x")?)?;
                let fz = tape.matmul(zm, Self::block_var(bound, block, "fuse.z")?)?;
                let u = tape.add(fx, fz)?;
                tape.add_broadcast(u, Self::block_var(bound, block, "fuse.bias")?)?
            }
        };
        let ln2 = Self::norm_vars(bound, &format!("blocks.{block}.ln2"))?;
        let h = layers::norm(tape, trunk, &ln2)?;
        let m = Self::mlp_vars(bound, block, "mlp")?;
        let h = layers::mlp(tape, h, &m)?;
        let out = tape.add(trunk, h)?;

        let expect = if merging { l.out_tokens() } else { l.tokens };
        if tape.shape(out)[1] != expect {
            return Err(Error::shape("block output", tape.shape(out), &[expect]));
        }
        Ok((z, merged, out))
    }

    /// Mean-pool then linear: `[B, N, D]` → `[B, classes]`.
    pub fn head(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let pooled = tape.mean_tokens(x)?;
        layers::linear(tape, pooled, bound.var("head.weight")?, Some(bound.var("head.bias")?))
    }

    /// One recurrent mask step on the tape. The update coefficients come
    /// from the current values and enter as constants.
    fn update_mask(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        block: usize,
        prev: Var,
        z: Var,
        ctx: &UpdateContext<'_>,
    ) -> Result<Var> {
        let state = ctx
            .states
            .get(block)
            .and_then(Option::as_ref)
            .ok_or(Error::MissingClusterState { block })?;
        let l = &self.layout[block];
        let (b, d, p) = (tape.shape(z)[0], self.spec.dim, l.merged);
        if ctx.phi_input.rows() != b {
            return Err(Error::shape("update_mask", &[b], ctx.phi_input.shape()));
        }
        let g64 = tape.value(prev).cast::<f64>();
        let z64 = tape.value(z).cast::<f64>();
        let merged = merge_tokens(&z64, &g64)?;
        let psi = psi(ctx.phi_input, ctx.labels, state)?;
        let coeffs = (0..b)
            .map(|i| Ok(ibb_coefficient(merged.slice0(i).data(), psi.row(i), state, [p, d])?.transpose()))
            .collect::<Result<Vec<_>>>()?;
        let mt = tape.constant(Tensor::stack(&coeffs)?.cast::<T>());

        let mv = Self::mlp_vars(bound, block, "mask.mlp")?;
        let mz = layers::mlp(tape, z, &mv)?;
        let term = tape.bmm(mz, mt)?;
        let n = l.tokens;
        let eta = self.spec.eta;
        let raw = match ctx.scope {
            UpdateScope::Batch => {
                let flat = tape.reshape(term, &[1, b, n * p])?;
                let mean = tape.mean_tokens(flat)?;
                let mean = tape.reshape(mean, &[n, p])?;
                let delta = tape.scale(mean, -2.0 * eta)?;
                tape.add_broadcast(prev, delta)?
            }
            UpdateScope::PerSample => {
                let delta = tape.scale(term, -2.0 * eta)?;
                tape.add(prev, delta)?
            }
        };
        layers::normalize_mask(tape, raw)
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        images: &Tensor<T>,
        mode: &MaskMode<'_>,
    ) -> Result<ForwardTrace> {
        let embedded = self.embed(tape, bound, images)?;
        let mut x = embedded;
        let mut prev_mask: Option<Var> = None;
        let mut blocks = Vec::with_capacity(self.layout.len());
        for l in &self.layout {
            let i = l.index;
            let tokens = tape.shape(x)[1];
            if tokens != l.tokens {
                return Err(Error::shape("block", tape.shape(x), &[l.tokens, self.spec.dim]));
            }
            // Z does not depend on the mask, and the recurrent step needs it.
            let z = self.block_z(tape, bound, i, x)?;
            let mask = match (mode, l.role) {
                (MaskMode::Off, _) | (_, MaskRole::None) => None,
                (_, MaskRole::Init) => {
                    let w = Self::block_var(bound, i, "mask.f.weight")?;
                    let b = Self::block_var(bound, i, "mask.f.bias")?;
                    Some(layers::init_mask(tape, x, w, b, self.spec.tau)?)
                }
                (MaskMode::Bootstrap, MaskRole::Chained) => {
                    let prev = prev_mask.ok_or_else(|| Error::invalid("chained mask without predecessor"))?;
                    Some(layers::normalize_mask(tape, prev)?)
                }
                (MaskMode::Update(ctx), MaskRole::Chained) => {
                    let prev = prev_mask.ok_or_else(|| Error::invalid("chained mask without predecessor"))?;
                    Some(self.update_mask(tape, bound, i, prev, z, ctx)?)
                }
            };
            if let Some(g) = mask {
                self.check_mask(tape, i, g)?;
            }
            let (z, merged, out) = self.block_tail(tape, bound, i, x, z, mask)?;
            blocks.push(BlockTrace {
                z,
                mask,
                merged,
                output: out,
            });
            prev_mask = mask;
            x = out;
        }
        let logits = self.head(tape, bound, x)?;
        Ok(ForwardTrace {
            embedded,
            blocks,
            logits,
        })
    }

    fn check_mask(&self, tape: &Tape<T>, block: usize, g: Var) -> Result<()> {
        let l = &self.layout[block];
        let gs = tape.shape(g);
        if gs.len() != 3 || gs[1] != l.tokens || gs[2] != l.merged {
            return Err(Error::shape("block mask", gs, &[l.tokens, l.merged]));
        }
        Ok(())
    }

    fn block_z(&self, tape: &mut Tape<T>, bound: &Bound, block: usize, x: Var) -> Result<Var> {
        let l = &self.layout[block];
        let src = match l.style {
            BlockStyle::Regular => x,
            BlockStyle::Efficient => {
                let w = Self::block_var(bound, block, "local.weight")?;
                let b = Self::block_var(bound, block, "local.bias")?;
                let h = layers::linear(tape, x, w, Some(b))?;
                tape.relu(h)?
            }
        };
        let ln1 = Self::norm_vars(bound, &format!("blocks.{block}.ln1"))?;
        let h = layers::norm(tape, src, &ln1)?;
        let attn = self.attn_vars(bound, block)?;
        layers::attention(tape, h, &attn)
    }

    /// Forward pass with all parameters as constants; returns the tape too.
    pub fn evaluate(&self, images: &Tensor<T>, mode: &MaskMode<'_>) -> Result<(Tape<T>, ForwardTrace)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let trace = self.forward(&mut tape, &bound, images, mode)?;
        Ok((tape, trace))
    }
}
