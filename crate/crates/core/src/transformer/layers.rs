use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// `x·w + b` over the last axis.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_broadcast(y, b),
        None => Ok(y),
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn mlp<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &MlpVars) -> Result<Var> {
    let h = linear(tape, x, p.w1, Some(p.b1))?;
    let h = tape.relu(h)?;
    linear(tape, h, p.w2, Some(p.b2))
}

/// Per-head projection slices: `wq/wk/wv` are `[D, d_h]`, `wo` is `[d_h, D]`.
#[derive(Clone, Debug)]
pub struct AttnVars {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Vec<Var>,
}

/// `Σ_h softmax(Q_h K_hᵀ/√d_h) V_h · Wo_h` for tokens `[B, N, D]`.
pub fn attention<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &AttnVars) -> Result<Var> {
    if tape.shape(x).len() != 3 {
        return Err(Error::shape("attention", tape.shape(x), &[]));
    }
    let mut out: Option<Var> = None;
    for h in 0..p.wq.len() {
        let dh = tape.shape(p.wq[h])[1];
        let q = tape.matmul(x, p.wq[h])?;
        let k = tape.matmul(x, p.wk[h])?;
        let v = tape.matmul(x, p.wv[h])?;
        let kt = tape.transpose(k)?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.softmax(scores)?;
        let ctx = tape.bmm(attn, v)?;
        let proj = tape.matmul(ctx, p.wo[h])?;
        out = Some(match out {
            None => proj,
            Some(acc) => tape.add(acc, proj)?,
        });
    }
    out.ok_or_else(|| Error::invalid("attention needs at least one head"))
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

pub fn norm<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &NormVars) -> Result<Var> {
    tape.layer_norm(x, p.gamma, p.beta, LN_EPS)
}

/// Column softmax over the token axis of `[B, N, P]`.
pub fn normalize_mask<T: Scalar>(tape: &mut Tape<T>, raw: Var) -> Result<Var> {
    let t = tape.transpose(raw)?;
    let s = tape.softmax(t)?;
    tape.transpose(s)
}

/// `G¹ = softmax_N(sigmoid((X/τ)·W + b))`.
pub fn init_mask<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var, tau: f64) -> Result<Var> {
    let xs = tape.scale(x, 1.0 / tau)?;
    let logits = linear(tape, xs, w, Some(b))?;
    let act = tape.sigmoid(logits)?;
    normalize_mask(tape, act)
}

/// `X̃ = GᵀZ` per sample: `[B, N, P]`, `[B, N, D]` → `[B, P, D]`.
pub fn merge<T: Scalar>(tape: &mut Tape<T>, g: Var, z: Var) -> Result<Var> {
    let gt = tape.transpose(g)?;
    tape.bmm(gt, z)
}

/// Splits `[B, H, W, C]` images into row-major patches `[B, N, p·p·C]`.
pub fn patchify<T: Scalar>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || patch == 0 || !s[1].is_multiple_of(patch) || !s[2].is_multiple_of(patch) {
        return Err(Error::shape("patchify", s, &[patch]));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let feat = patch * patch * c;
    let data = images.data();
    let mut out = Vec::with_capacity(images.len());
    for i in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..patch {
                    let row = ((i * h + py * patch + dy) * w + px * patch) * c;
                    out.extend_from_slice(&data[row..row + patch * c]);
                }
            }
        }
    }
    Tensor::new(&[b, gh * gw, feat], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn leaf(tape: &mut Tape<f64>, rng: &mut Rng, shape: &[usize]) -> Var {
        tape.leaf(rng.normal_tensor(shape, 1.0))
    }

    fn attn_vars(tape: &mut Tape<f64>, rng: &mut Rng, d: usize, heads: usize) -> AttnVars {
        let dh = d / heads;
        let mut p = AttnVars {
            wq: vec![],
            wk: vec![],
            wv: vec![],
            wo: vec![],
        };
        for _ in 0..heads {
            p.wq.push(leaf(tape, rng, &[d, dh]));
            p.wk.push(leaf(tape, rng, &[d, dh]));
            p.wv.push(leaf(tape, rng, &[d, dh]));
            p.wo.push(leaf(tape, rng, &[dh, d]));
        }
        p
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let mut rng = Rng::new(0);
        let mut tape = Tape::<f64>::new();
        let p = attn_vars(&mut tape, &mut rng, 4, 1);
        let xt = rng.normal_tensor::<f64>(&[1, 1, 4], 1.0);
        let x = tape.constant(xt.clone());
        let out = attention(&mut tape, x, &p).unwrap();
        let want = xt
            .matmul(tape.value(p.wv[0]))
            .unwrap()
            .matmul(tape.value(p.wo[0]))
            .unwrap();
        assert!(tape.value(out).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn identical_tokens_identical_outputs() {
        let mut rng = Rng::new(1);
        let mut tape = Tape::<f64>::new();
        let p = attn_vars(&mut tape, &mut rng, 4, 2);
        let row: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let x = tape.constant(Tensor::new(&[1, 2, 4], row.repeat(2)).unwrap());
        let out = attention(&mut tape, x, &p).unwrap();
        let v = tape.value(out);
        assert_eq!(&v.data()[..4], &v.data()[4..]);
    }

    #[test]
    fn attention_matches_scalar_loops() {
        let mut rng = Rng::new(2);
        let mut tape = Tape::<f32>::new();
        let (n, d) = (3, 4);
        let w: Vec<Tensor<f32>> = (0..4).map(|_| rng.normal_tensor(&[d, d], 0.7)).collect();
        let xt = rng.normal_tensor::<f32>(&[1, n, d], 1.0);
        let wv: Vec<Var> = w.iter().map(|t| tape.leaf(t.clone())).collect();
        let p = AttnVars {
            wq: vec![wv[0]],
            wk: vec![wv[1]],
            wv: vec![wv[2]],
            wo: vec![wv[3]],
        };
        let x = tape.constant(xt.clone());
        let out = attention(&mut tape, x, &p).unwrap();

        let x64 = xt.cast::<f64>().reshape(&[n, d]).unwrap();
        let w64: Vec<Tensor<f64>> = w.iter().map(Tensor::cast).collect();
        let proj = |m: &Tensor<f64>, t: usize, j: usize| (0..d).map(|k| x64.at(&[t, k]) * m.at(&[k, j])).sum::<f64>();
        for t in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|s| (0..d).map(|j| proj(&w64[0], t, j) * proj(&w64[1], s, j)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for o in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    let ctx: f64 = (0..n).map(|s| e[s] / z * proj(&w64[2], s, j)).sum();
                    acc += ctx * w64[3].at(&[j, o]);
                }
                let got = tape.value(out).at(&[0, t, o]) as f64;
                assert!((got - acc).abs() <= 1e-6 * acc.abs().max(1.0), "{got} vs {acc}");
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = Rng::new(3);
        let mut tape = Tape::<f64>::new();
        let p = attn_vars(&mut tape, &mut rng, 4, 2);
        let xt = rng.normal_tensor::<f64>(&[1, 5, 4], 1.0);
        let perm = [3, 0, 4, 1, 2];
        let xp = Tensor::from_fn(&[1, 5, 4], |k| xt.at(&[0, perm[k / 4], k % 4]));
        let (x, xpv) = (tape.constant(xt), tape.constant(xp));
        let a = attention(&mut tape, x, &p).unwrap();
        let b = attention(&mut tape, xpv, &p).unwrap();
        for (t, &src) in perm.iter().enumerate() {
            for j in 0..4 {
                let (u, v) = (tape.value(b).at(&[0, t, j]), tape.value(a).at(&[0, src, j]));
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patchify_layout() {
        let img = Tensor::<f64>::from_fn(&[1, 8, 8, 1], |k| k as f64);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[1, 4, 16]);
        // Token 1 is the top-right patch; its first row starts at column 4.
        assert_eq!(&p.data()[16..20], &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(p.at(&[0, 2, 0]), 32.0);
        assert!(patchify(&Tensor::<f64>::zeros(&[1, 6, 8, 1]), 4).is_err());
    }

    #[test]
    fn tape_mask_matches_reference() {
        let mut rng = Rng::new(4);
        let x = rng.normal_tensor::<f64>(&[2, 5, 3], 1.0);
        let w = rng.normal_tensor::<f64>(&[3, 2], 1.0);
        let b = rng.normal_tensor::<f64>(&[2], 1.0);
        let want = crate::mask::init_mask(&x, &w, &b, 0.3).unwrap();
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
        let g = init_mask(&mut tape, xv, wv, bv, 0.3).unwrap();
        assert!(tape.value(g).max_abs_diff(&want) < 1e-15);
    }
}
