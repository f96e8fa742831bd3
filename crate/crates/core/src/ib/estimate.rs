use crate::error::{Error, Result};
use crate::numerics::{softmax_slice, Tensor};

use super::kmeans::sq_dist;

/// Floor applied to every probability before it enters a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

pub fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// Soft cluster membership `φ(x, a) ∝ exp(-‖x − c_a‖²)`, evaluated as a
/// softmax of negative squared distances so well-separated data never
/// underflows to 0/0.
pub fn soft_assign(point: &[f64], centroids: &Tensor<f64>) -> Result<Vec<f64>> {
    if centroids.rank() != 2 || centroids.cols() != point.len() {
        return Err(Error::shape("soft_assign", &[point.len()], centroids.shape()));
    }
    let mut logits: Vec<f64> = (0..centroids.rows())
        .map(|a| -sq_dist(point, centroids.row(a)))
        .collect();
    softmax_slice(&mut logits);
    Ok(logits)
}

/// [`soft_assign`] for every row of `points`; returns `[n, C]`.
pub fn soft_assign_all(points: &Tensor<f64>, centroids: &Tensor<f64>) -> Result<Tensor<f64>> {
    let c = centroids.rows();
    let mut out = Vec::with_capacity(points.rows() * c);
    for i in 0..points.rows() {
        out.extend(soft_assign(points.row(i), centroids)?);
    }
    Tensor::new(&[points.rows(), c], out)
}

/// Unnormalised similarities `S_a = exp(-‖x − c_a‖²)` and their sum `γ`.
///
/// Only meaningful when distances are O(1); the estimator itself never uses
/// these directly.
pub fn raw_similarities(point: &[f64], centroids: &Tensor<f64>) -> (Vec<f64>, f64) {
    let s: Vec<f64> = (0..centroids.rows())
        .map(|a| (-sq_dist(point, centroids.row(a))).exp())
        .collect();
    let gamma = s.iter().sum();
    (s, gamma)
}

/// Marginal and joint cluster probabilities built from soft assignments.
#[derive(Clone, Debug, PartialEq)]
pub struct Probabilities {
    /// `P(X̃ ∈ a)`
    pub merged: Vec<f64>,
    /// `P(X ∈ b)`
    pub input: Vec<f64>,
    /// `P(Y = y)`
    pub label: Vec<f64>,
    /// `P(X̃ ∈ a, X ∈ b)`, rows indexed by `a`.
    pub joint_input: Tensor<f64>,
    /// `P(X̃ ∈ a, Y = y)`, rows indexed by `a`.
    pub joint_label: Tensor<f64>,
}

pub fn estimate_probs(
    phi_merged: &Tensor<f64>,
    phi_input: &Tensor<f64>,
    labels: &[usize],
    classes: usize,
) -> Result<Probabilities> {
    let n = phi_merged.rows();
    if phi_input.rows() != n || labels.len() != n {
        return Err(Error::shape("estimate_probs", phi_merged.shape(), phi_input.shape()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {y} outside {classes} classes")));
    }
    let (ca, cb) = (phi_merged.cols(), phi_input.cols());
    let inv_n = 1.0 / n as f64;
    let mut merged = vec![0.0; ca];
    let mut input = vec![0.0; cb];
    let mut label = vec![0.0; classes];
    let mut joint_input = Tensor::zeros(&[ca, cb]);
    let mut joint_label = Tensor::zeros(&[ca, classes]);
    for i in 0..n {
        let (pt, px) = (phi_merged.row(i), phi_input.row(i));
        label[labels[i]] += inv_n;
        for (a, &pa) in pt.iter().enumerate() {
            merged[a] += pa * inv_n;
            let jl = joint_label.row_mut(a);
            jl[labels[i]] += pa * inv_n;
            for (j, &pb) in joint_input.row_mut(a).iter_mut().zip(px) {
                *j += pa * pb * inv_n;
            }
        }
        for (b, &pb) in px.iter().enumerate() {
            input[b] += pb * inv_n;
        }
    }
    Ok(Probabilities {
        merged,
        input,
        label,
        joint_input,
        joint_label,
    })
}

/// Mutual information (nats) of a joint table, using its own marginals.
pub fn mutual_info(joint: &Tensor<f64>) -> Result<f64> {
    if joint.rank() != 2 {
        return Err(Error::shape("mutual_info", joint.shape(), &[]));
    }
    if joint.data().iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::Probability("negative or non-finite entry".into()));
    }
    let total = joint.sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Probability(format!("joint sums to {total}")));
    }
    let (ra, cb) = (joint.rows(), joint.cols());
    let rows: Vec<f64> = (0..ra).map(|a| joint.row(a).iter().sum()).collect();
    let mut cols = vec![0.0; cb];
    for a in 0..ra {
        for (c, &p) in cols.iter_mut().zip(joint.row(a)) {
            *c += p;
        }
    }
    let mut mi = 0.0;
    for a in 0..ra {
        for b in 0..cb {
            let p = joint.row(a)[b];
            if p > 0.0 {
                mi += p * (p / (rows[a] * cols[b])).ln();
            }
        }
    }
    Ok(mi)
}

/// `IB = I(X̃, X) − I(X̃, Y)`.
pub fn ib_loss(probs: &Probabilities) -> Result<f64> {
    Ok(mutual_info(&probs.joint_input)? - mutual_info(&probs.joint_label)?)
}

/// Variational distribution `Q(a | y) = Σ_i φ(X̃_i, a)·1{y_i = y} / #{y_i = y}`.
/// Returned as `[C, classes]` with columns indexed by class.
pub fn update_q(phi_merged: &Tensor<f64>, labels: &[usize], classes: usize) -> Result<Tensor<f64>> {
    if phi_merged.rows() != labels.len() {
        return Err(Error::shape("update_q", phi_merged.shape(), &[labels.len()]));
    }
    let ca = phi_merged.cols();
    let mut counts = vec![0usize; classes];
    let mut q = Tensor::zeros(&[ca, classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} outside {classes} classes")));
        }
        counts[y] += 1;
        for (a, &p) in phi_merged.row(i).iter().enumerate() {
            q.row_mut(a)[y] += p;
        }
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    for a in 0..ca {
        for (v, &c) in q.row_mut(a).iter_mut().zip(&counts) {
            *v /= c as f64;
        }
    }
    Ok(q)
}

/// Data-only constant `C₀ = (1/n²) Σ_i Σ_j Σ_b φ(X_i, b)·log φ(X_j, b)`,
/// evaluated in O(nC) as `Σ_b mean_i φ(X_i, b) · mean_j log φ(X_j, b)`.
pub fn c0_const(phi_input: &Tensor<f64>) -> f64 {
    let (n, cb) = (phi_input.rows(), phi_input.cols());
    let inv_n = 1.0 / n as f64;
    (0..cb)
        .map(|b| {
            let (mut mean_p, mut mean_log) = (0.0, 0.0);
            for i in 0..n {
                let p = phi_input.row(i)[b];
                mean_p += p * inv_n;
                mean_log += clamped_ln(p) * inv_n;
            }
            mean_p * mean_log
        })
        .sum()
}

/// `Σ_b φ log φ` of one assignment vector (its negative entropy).
pub fn neg_entropy(phi: &[f64]) -> f64 {
    phi.iter().map(|&p| p * clamped_ln(p)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random_simplex_rows(rng: &mut Rng, n: usize, c: usize) -> Tensor<f64> {
        rng.normal_tensor::<f64>(&[n, c], 1.5).softmax_rows()
    }

    #[test]
    fn dominant_centroid() {
        let cents = Tensor::new(&[3, 2], vec![0.0, 0.0, 10.0, 0.0, 0.0, -10.0]).unwrap();
        let phi = soft_assign(&[0.0, 0.0], &cents).unwrap();
        assert!(phi[0] >= 1.0 - 1e-6);
    }

    #[test]
    fn equidistant_point() {
        let cents = Tensor::new(&[2, 1], vec![-1.0, 1.0]).unwrap();
        assert_eq!(soft_assign(&[0.0], &cents).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn soft_assign_matches_unstabilised_formula() {
        let mut rng = Rng::new(21);
        for _ in 0..20 {
            let cents = rng.normal_tensor::<f64>(&[4, 3], 0.8);
            let x: Vec<f64> = (0..3).map(|_| rng.normal() * 0.8).collect();
            let phi = soft_assign(&x, &cents).unwrap();
            let (s, gamma) = raw_similarities(&x, &cents);
            for (p, sa) in phi.iter().zip(&s) {
                assert!((p - sa / gamma).abs() < 1e-12);
                assert!((p * gamma - sa).abs() <= 1e-9 * sa);
            }
        }
    }

    #[test]
    fn soft_assign_dimension_mismatch() {
        let cents = Tensor::<f64>::zeros(&[2, 3]);
        assert!(soft_assign(&[0.0, 1.0], &cents).is_err());
    }

    #[test]
    fn single_sample_joint_is_outer_product() {
        let pt = Tensor::new(&[1, 2], vec![0.3, 0.7]).unwrap();
        let px = Tensor::new(&[1, 2], vec![0.6, 0.4]).unwrap();
        let p = estimate_probs(&pt, &px, &[1], 2).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let want = pt.row(0)[a] * px.row(0)[b];
                assert!((p.joint_input.at(&[a, b]) - want).abs() < 1e-15);
            }
        }
        assert_eq!(p.label, vec![0.0, 1.0]);
    }

    #[test]
    fn hard_assignments_give_contingency_table() {
        let pt = Tensor::new(&[4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let px = Tensor::new(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let p = estimate_probs(&pt, &px, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(p.joint_input.data(), &[0.25, 0.25, 0.0, 0.5]);
        assert_eq!(p.joint_label.data(), &[0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn joint_rows_match_marginals() {
        let mut rng = Rng::new(22);
        let pt = random_simplex_rows(&mut rng, 12, 3);
        let px = random_simplex_rows(&mut rng, 12, 3);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let p = estimate_probs(&pt, &px, &labels, 3).unwrap();
        for a in 0..3 {
            // Summation oracle: the marginal straight from the assignments.
            let direct: f64 = (0..12).map(|i| pt.row(i)[a]).sum::<f64>() / 12.0;
            let row: f64 = p.joint_input.row(a).iter().sum();
            let row_y: f64 = p.joint_label.row(a).iter().sum();
            assert!((row - direct).abs() < 1e-12);
            assert!((row_y - direct).abs() < 1e-12);
            assert!((p.merged[a] - direct).abs() < 1e-12);
        }
        assert!((p.joint_input.sum() - 1.0).abs() < 1e-9);
        assert!((p.joint_label.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mi_of_independent_joint_is_zero() {
        let r = [0.2, 0.5, 0.3];
        let c = [0.6, 0.4];
        let j = Tensor::from_fn(&[3, 2], |k| r[k / 2] * c[k % 2]);
        assert!(mutual_info(&j).unwrap().abs() < 1e-15);
    }

    #[test]
    fn mi_of_diagonal_joint_is_log_c() {
        let j = Tensor::from_fn(&[4, 4], |k| if k / 4 == k % 4 { 0.25 } else { 0.0 });
        assert!((mutual_info(&j).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mi_matches_term_by_term_oracle() {
        let mut rng = Rng::new(23);
        for _ in 0..10 {
            let raw = rng.uniform_tensor::<f64>(&[3, 4], 0.0, 1.0);
            let total = raw.sum();
            let j = raw.map(|v| v / total);
            let mut oracle = 0.0;
            for a in 0..3 {
                for b in 0..4 {
                    let pa: f64 = (0..4).map(|k| j.at(&[a, k])).sum();
                    let pb: f64 = (0..3).map(|k| j.at(&[k, b])).sum();
                    let p = j.at(&[a, b]);
                    oracle += p * p.ln() - p * pa.ln() - p * pb.ln();
                }
            }
            assert!((mutual_info(&j).unwrap() - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn mi_rejects_bad_tables() {
        let neg = Tensor::new(&[1, 2], vec![1.5, -0.5]).unwrap();
        assert!(matches!(mutual_info(&neg), Err(Error::Probability(_))));
        let unnormalised = Tensor::new(&[1, 2], vec![0.5, 0.6]).unwrap();
        assert!(matches!(mutual_info(&unnormalised), Err(Error::Probability(_))));
    }

    #[test]
    fn ib_zero_when_merged_independent() {
        let pt = Tensor::new(&[4, 2], vec![0.5; 8]).unwrap();
        let px = Tensor::new(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = estimate_probs(&pt, &px, &[0, 1, 0, 1], 2).unwrap();
        assert!(ib_loss(&p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn ib_minus_log2_when_merged_predicts_label_only() {
        // X̃ hard-encodes Y; X's clusters are uniform noise, so I(X̃,X)=0.
        let pt = Tensor::new(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let px = Tensor::new(&[4, 2], vec![0.5; 8]).unwrap();
        let p = estimate_probs(&pt, &px, &[0, 1, 0, 1], 2).unwrap();
        assert!((ib_loss(&p).unwrap() + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ib_is_difference_of_mutual_informations() {
        let mut rng = Rng::new(24);
        let pt = random_simplex_rows(&mut rng, 9, 3);
        let px = random_simplex_rows(&mut rng, 9, 3);
        let labels = [0, 1, 2, 0, 1, 2, 2, 2, 0];
        let p = estimate_probs(&pt, &px, &labels, 3).unwrap();
        let direct = mutual_info(&p.joint_input).unwrap() - mutual_info(&p.joint_label).unwrap();
        assert_eq!(ib_loss(&p).unwrap(), direct);
    }

    #[test]
    fn q_hard_assignment() {
        let pt = Tensor::new(&[3, 2], vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let q = update_q(&pt, &[1, 1, 0], 2).unwrap();
        assert_eq!(q.at(&[1, 1]), 1.0);
        assert_eq!(q.at(&[0, 0]), 1.0);
    }

    #[test]
    fn q_uniform() {
        let pt = Tensor::new(&[6, 3], vec![1.0 / 3.0; 18]).unwrap();
        let q = update_q(&pt, &[0, 1, 2, 0, 1, 2], 3).unwrap();
        assert!(q.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn q_matches_summation_oracle_and_normalises() {
        let mut rng = Rng::new(25);
        let pt = random_simplex_rows(&mut rng, 10, 3);
        let labels = [0, 1, 2, 0, 0, 1, 2, 1, 0, 2];
        let q = update_q(&pt, &labels, 3).unwrap();
        for y in 0..3 {
            let members: Vec<usize> = (0..10).filter(|&i| labels[i] == y).collect();
            let mut col = 0.0;
            for a in 0..3 {
                let want: f64 = members.iter().map(|&i| pt.row(i)[a]).sum::<f64>() / members.len() as f64;
                assert!((q.at(&[a, y]) - want).abs() < 1e-15);
                col += q.at(&[a, y]);
            }
            assert!((col - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn q_empty_class() {
        let pt = Tensor::new(&[2, 2], vec![0.5; 4]).unwrap();
        assert!(matches!(update_q(&pt, &[0, 0], 2), Err(Error::EmptyClass { class: 1 })));
    }

    #[test]
    fn c0_single_uniform_sample() {
        let px = Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap();
        assert!((c0_const(&px) + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn c0_uniform_assignments() {
        let px = Tensor::new(&[5, 4], vec![0.25; 20]).unwrap();
        assert!((c0_const(&px) - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn c0_matches_triple_sum() {
        let mut rng = Rng::new(26);
        for n in 1..=8 {
            let px = random_simplex_rows(&mut rng, n, 3);
            let mut brute = 0.0;
            for i in 0..n {
                for j in 0..n {
                    for b in 0..3 {
                        brute += px.row(i)[b] * px.row(j)[b].ln();
                    }
                }
            }
            brute /= (n * n) as f64;
            assert!((c0_const(&px) - brute).abs() < 1e-12);
        }
    }
}
