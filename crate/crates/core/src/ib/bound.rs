use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::estimate::{c0_const, clamped_ln, neg_entropy, soft_assign, soft_assign_all};
use super::{ClusterState, LabelTerm};

/// `ψ[i, a] = Σ_b φ(X_i, b) log φ(X_i, b) − log Q(a | y_i)`; returns `[n, C]`.
pub fn psi(phi_input: &Tensor<f64>, labels: LabelTerm<'_>, cs: &ClusterState) -> Result<Tensor<f64>> {
    let (n, c) = (phi_input.rows(), cs.classes());
    labels.check(n, c)?;
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let h = neg_entropy(phi_input.row(i));
        out.extend((0..c).map(|a| h - labels.log_q(i, a, cs)));
    }
    Tensor::new(&[n, c], out)
}

/// Per-sample contributions `Σ_a φ(X̃_i, a) ψ[i, a]`; their mean is IBB.
pub fn ibb_terms(
    merged: &Tensor<f64>,
    phi_input: &Tensor<f64>,
    labels: LabelTerm<'_>,
    cs: &ClusterState,
) -> Result<Vec<f64>> {
    if merged.rows() != phi_input.rows() {
        return Err(Error::shape("ibb_bound", merged.shape(), phi_input.shape()));
    }
    let phi_merged = soft_assign_all(merged, &cs.merged_centroids)?;
    let psi = psi(phi_input, labels, cs)?;
    Ok((0..merged.rows())
        .map(|i| phi_merged.row(i).iter().zip(psi.row(i)).map(|(p, s)| p * s).sum())
        .collect())
}

/// The separable bound `IBB` over merged tokens `[n, P·D]`.
pub fn ibb_bound(
    merged: &Tensor<f64>,
    phi_input: &Tensor<f64>,
    labels: LabelTerm<'_>,
    cs: &ClusterState,
) -> Result<f64> {
    let terms = ibb_terms(merged, phi_input, labels, cs)?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Half the gradient of sample `i`'s IBB term with respect to its merged
/// tokens, `M_i = Σ_a φ_a ψ_a (C̃_a − Σ_a' φ_a' C̃_a')`, shaped `[P, D]`.
///
/// `S_a (γ C̃_a − ζ) / γ²` equals `φ_a (C̃_a − ζ/γ)`, so only the normalised
/// assignments are ever formed.
pub fn ibb_coefficient(
    merged_row: &[f64],
    psi_row: &[f64],
    cs: &ClusterState,
    shape: [usize; 2],
) -> Result<Tensor<f64>> {
    let cents = &cs.merged_centroids;
    if shape[0] * shape[1] != merged_row.len() || psi_row.len() != cents.rows() {
        return Err(Error::shape(
            "ibb_coefficient",
            &shape,
            &[merged_row.len(), psi_row.len()],
        ));
    }
    let phi = soft_assign(merged_row, cents)?;
    let dim = merged_row.len();
    let mut centre = vec![0.0; dim];
    for (a, &p) in phi.iter().enumerate() {
        for (m, &c) in centre.iter_mut().zip(cents.row(a)) {
            *m += p * c;
        }
    }
    let mut out = vec![0.0; dim];
    for (a, (&p, &s)) in phi.iter().zip(psi_row).enumerate() {
        let w = p * s;
        for ((o, &c), &m) in out.iter_mut().zip(cents.row(a)).zip(&centre) {
            *o += w * (c - m);
        }
    }
    Tensor::new(&shape, out)
}

pub(crate) fn merge_all(g: &Tensor<f64>, z: &Tensor<f64>) -> Result<Tensor<f64>> {
    if g.rank() != 2 || z.rank() != 3 || z.shape()[1] != g.rows() {
        return Err(Error::shape("merge", g.shape(), z.shape()));
    }
    let (n, p, d) = (z.shape()[0], g.cols(), z.shape()[2]);
    let gt = g.transpose();
    let rows = (0..n).map(|i| gt.matmul(&z.slice0(i))).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&rows)?.reshape(&[n, p * d])
}

/// IBB as a function of the mask, for tokens `z: [n, N, D]`.
pub fn ibb_objective(
    g: &Tensor<f64>,
    z: &Tensor<f64>,
    phi_input: &Tensor<f64>,
    labels: LabelTerm<'_>,
    cs: &ClusterState,
) -> Result<f64> {
    ibb_bound(&merge_all(g, z)?, phi_input, labels, cs)
}

/// Closed-form `∇_G IBB = (2/n) Σ_i Z_i M_iᵀ`, shaped like `g`.
pub fn ibb_grad(
    g: &Tensor<f64>,
    z: &Tensor<f64>,
    phi_input: &Tensor<f64>,
    labels: LabelTerm<'_>,
    cs: &ClusterState,
) -> Result<Tensor<f64>> {
    let merged = merge_all(g, z)?;
    let (n, tokens, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let p = g.cols();
    if cs.merged_dim() != p * d {
        return Err(Error::shape("ibb_grad", &[p, d], cs.merged_centroids.shape()));
    }
    let psi = psi(phi_input, labels, cs)?;
    let mut grad = Tensor::<f64>::zeros(&[tokens, p]);
    for i in 0..n {
        let m = ibb_coefficient(merged.row(i), psi.row(i), cs, [p, d])?;
        let zi = z.slice0(i);
        let gi = zi.matmul(&m.transpose())?;
        for (acc, v) in grad.data_mut().iter_mut().zip(gi.data()) {
            *acc += v;
        }
    }
    let scale = 2.0 / n as f64;
    Ok(grad.map(|v| v * scale))
}

/// Central finite differences of `f` around `g`, entry by entry.
pub fn fd_grad(g: &Tensor<f64>, step: f64, mut f: impl FnMut(&Tensor<f64>) -> Result<f64>) -> Result<Tensor<f64>> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = g.clone();
    let mut out = Vec::with_capacity(g.len());
    for k in 0..g.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + step;
        let hi = f(&probe)?;
        probe.data_mut()[k] = orig - step;
        let lo = f(&probe)?;
        probe.data_mut()[k] = orig;
        out.push((hi - lo) / (2.0 * step));
    }
    Tensor::new(g.shape(), out)
}

/// Upper bound on `I(X̃, X)`: `(1/n) Σ_i Σ_a Σ_b φ̃_ia φ_ib log φ_ib − C₀`.
pub fn lemma1_bound(phi_merged: &Tensor<f64>, phi_input: &Tensor<f64>) -> f64 {
    let n = phi_merged.rows();
    let first: f64 = (0..n)
        .map(|i| phi_merged.row(i).iter().sum::<f64>() * neg_entropy(phi_input.row(i)))
        .sum::<f64>()
        / n as f64;
    first - c0_const(phi_input)
}

/// Lower bound on `I(X̃, Y)`: `(1/n) Σ_i Σ_a φ̃_ia log Q(a | y_i)` for any `q[a, y]`.
pub fn lemma2_bound(phi_merged: &Tensor<f64>, labels: &[usize], q: &Tensor<f64>) -> f64 {
    let n = phi_merged.rows();
    (0..n)
        .map(|i| {
            phi_merged
                .row(i)
                .iter()
                .enumerate()
                .map(|(a, &p)| p * clamped_ln(q.at(&[a, labels[i]])))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ib::{estimate_probs, ib_loss, mutual_info, update_q, Probe, ProbeDims};
    use crate::numerics::Rng;

    fn uniform_state(c: usize, dim: usize) -> ClusterState {
        let mut rng = Rng::new(0);
        ClusterState::new(
            rng.normal_tensor(&[c, dim], 1.0),
            rng.normal_tensor(&[c, 2], 1.0),
            Tensor::full(&[c, c], 1.0 / c as f64),
            vec![1.0 / c as f64; c],
            0,
        )
        .unwrap()
    }

    #[test]
    fn uniform_cancellation() {
        let c = 3;
        let cs = uniform_state(c, 4);
        let mut rng = Rng::new(1);
        let merged = rng.normal_tensor::<f64>(&[5, 4], 1.0);
        let phi_x = Tensor::full(&[5, c], 1.0 / c as f64);
        let v = ibb_bound(&merged, &phi_x, LabelTerm::Observed(&[0, 1, 2, 0, 1]), &cs).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn single_sample_hard_assignments() {
        // Two far-apart centroids give a hard φ̃; input φ is exactly one-hot.
        let cs = ClusterState::new(
            Tensor::new(&[2, 1], vec![0.0, 100.0]).unwrap(),
            Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap(),
            Tensor::new(&[2, 2], vec![0.25, 0.6, 0.75, 0.4]).unwrap(),
            vec![0.5, 0.5],
            0,
        )
        .unwrap();
        let merged = Tensor::new(&[1, 1], vec![0.0]).unwrap();
        let phi_x = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let v = ibb_bound(&merged, &phi_x, LabelTerm::Observed(&[1]), &cs).unwrap();
        // log φ(X, b*) = 0 and a* = 0, so the bound is −log Q(0 | 1).
        assert!((v + 0.6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn separable_over_samples() {
        let mut rng = Rng::new(2);
        let probe = Probe::random(&mut rng, ProbeDims::new(12, 5, 2, 3, 3)).unwrap();
        let merged = probe.merged().unwrap();
        let labels = LabelTerm::Observed(&probe.labels);
        let whole = ibb_bound(&merged, &probe.phi_input, labels, &probe.state).unwrap();
        let split = 5;
        let head = Tensor::stack(&(0..split).map(|i| merged.slice0(i)).collect::<Vec<_>>()).unwrap();
        let tail = Tensor::stack(&(split..12).map(|i| merged.slice0(i)).collect::<Vec<_>>()).unwrap();
        let phi_h = Tensor::stack(&(0..split).map(|i| probe.phi_input.slice0(i)).collect::<Vec<_>>()).unwrap();
        let phi_t = Tensor::stack(&(split..12).map(|i| probe.phi_input.slice0(i)).collect::<Vec<_>>()).unwrap();
        let a = ibb_bound(&head, &phi_h, LabelTerm::Observed(&probe.labels[..split]), &probe.state).unwrap();
        let b = ibb_bound(&tail, &phi_t, LabelTerm::Observed(&probe.labels[split..]), &probe.state).unwrap();
        let weighted = (a * split as f64 + b * (12 - split) as f64) / 12.0;
        assert!((whole - weighted).abs() < 1e-12);
    }

    #[test]
    fn psi_cases() {
        let c = 3;
        let cs = uniform_state(c, 2);
        let phi_x = Tensor::full(&[1, c], 1.0 / c as f64);
        let v = psi(&phi_x, LabelTerm::Observed(&[2]), &cs).unwrap();
        assert!(v.data().iter().all(|x| x.abs() < 1e-12));

        let mut hard = uniform_state(2, 2);
        hard.q = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let phi_x = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let v = psi(&phi_x, LabelTerm::Observed(&[0]), &hard).unwrap();
        assert!(v.at(&[0, 0]).abs() < 1e-12);
    }

    #[test]
    fn psi_matches_double_sum() {
        let mut rng = Rng::new(3);
        let probe = Probe::random(&mut rng, ProbeDims::new(6, 4, 2, 2, 3)).unwrap();
        let v = psi(&probe.phi_input, LabelTerm::Observed(&probe.labels), &probe.state).unwrap();
        for i in 0..6 {
            for a in 0..3 {
                let mut want = 0.0;
                for b in 0..3 {
                    let p = probe.phi_input.at(&[i, b]);
                    want += p * p.ln();
                }
                for y in 0..3 {
                    if probe.labels[i] == y {
                        want -= probe.state.q.at(&[a, y]).ln();
                    }
                }
                assert!((v.at(&[i, a]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prior_term_is_expected_log_q() {
        let mut rng = Rng::new(4);
        let probe = Probe::random(&mut rng, ProbeDims::new(6, 4, 2, 2, 3)).unwrap();
        let prior = psi(&probe.phi_input, LabelTerm::Prior, &probe.state).unwrap();
        let per_class: Vec<Tensor<f64>> = (0..3)
            .map(|y| psi(&probe.phi_input, LabelTerm::Observed(&[y; 6]), &probe.state).unwrap())
            .collect();
        for k in 0..prior.len() {
            let want: f64 = (0..3)
                .map(|y| probe.state.class_prior[y] * per_class[y].data()[k])
                .sum();
            assert!((prior.data()[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_centroids_give_zero_gradient() {
        let mut rng = Rng::new(5);
        let mut probe = Probe::random(&mut rng, ProbeDims::new(6, 4, 2, 2, 3)).unwrap();
        let row = probe.state.merged_centroids.row(0).to_vec();
        for a in 1..3 {
            probe.state.merged_centroids.row_mut(a).copy_from_slice(&row);
        }
        let g = probe.gradient(LabelTerm::Observed(&probe.labels)).unwrap();
        assert!(g.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn constant_psi_gives_zero_gradient() {
        let mut rng = Rng::new(6);
        let mut probe = Probe::random(&mut rng, ProbeDims::new(6, 4, 2, 2, 3)).unwrap();
        probe.state.q = Tensor::full(&[3, 3], 1.0 / 3.0);
        let g = probe.gradient(LabelTerm::Observed(&probe.labels)).unwrap();
        assert!(g.data().iter().all(|&v| v.abs() < 1e-14), "{:?}", g.data());
    }

    #[test]
    fn fd_of_constant_is_zero() {
        let g = Tensor::<f64>::ones(&[3, 2]);
        let fd = fd_grad(&g, 1e-5, |_| Ok(4.2)).unwrap();
        assert!(fd.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fd_of_quadratic_probe() {
        let mut rng = Rng::new(7);
        let z = rng.normal_tensor::<f64>(&[5, 3], 1.0);
        let m = rng.normal_tensor::<f64>(&[2, 3], 1.0);
        let g = rng.normal_tensor::<f64>(&[5, 2], 1.0);
        let f = |g: &Tensor<f64>| {
            let r = g.transpose().matmul(&z)?.zip_map(&m, |a, b| a - b)?;
            Ok(r.data().iter().map(|v| v * v).sum())
        };
        let fd = fd_grad(&g, 1e-5, f).unwrap();
        let r = g.transpose().matmul(&z).unwrap().zip_map(&m, |a, b| a - b).unwrap();
        let closed = z.matmul(&r.transpose()).unwrap().map(|v| 2.0 * v);
        assert!(fd.max_abs_diff(&closed) < 1e-8);
    }

    #[test]
    fn fd_rejects_bad_step() {
        let g = Tensor::<f64>::ones(&[1, 1]);
        assert!(fd_grad(&g, 0.0, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn analytic_gradient_matches_fd() {
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let dims = ProbeDims::random(&mut rng);
            let probe = Probe::random(&mut rng, dims).unwrap();
            let err = probe.gradient_error(1e-5).unwrap();
            assert!(err <= 1e-5, "{dims:?}: {err}");
        }
    }

    #[test]
    fn theorem_and_lemmas_hold() {
        let mut rng = Rng::new(9);
        for _ in 0..100 {
            let dims = ProbeDims::random_bound(&mut rng);
            let probe = Probe::random(&mut rng, dims).unwrap();
            let merged = probe.merged().unwrap();
            let phi_m = soft_assign_all(&merged, &probe.state.merged_centroids).unwrap();
            let c = dims.classes;
            let probs = estimate_probs(&phi_m, &probe.phi_input, &probe.labels, c).unwrap();
            let ib = ib_loss(&probs).unwrap();
            let q = update_q(&phi_m, &probe.labels, c).unwrap();
            let mut cs = probe.state.clone();
            cs.q = q;
            let ibb = ibb_bound(&merged, &probe.phi_input, LabelTerm::Observed(&probe.labels), &cs).unwrap();
            let c0 = c0_const(&probe.phi_input);
            assert!(ib <= ibb - c0 + 1e-9, "{ib} > {ibb} - {c0}");

            let i_x = mutual_info(&probs.joint_input).unwrap();
            assert!(i_x <= lemma1_bound(&phi_m, &probe.phi_input) + 1e-9);
            let random_q = rng
                .normal_tensor::<f64>(&[c, c], 1.0)
                .transpose()
                .softmax_rows()
                .transpose();
            let i_y = mutual_info(&probs.joint_label).unwrap();
            assert!(i_y >= lemma2_bound(&phi_m, &probe.labels, &random_q) - 1e-9);
        }
    }
}
