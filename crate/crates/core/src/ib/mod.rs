//! Clustering-based information-bottleneck estimates, the separable bound
//! IBB and its closed-form gradient with respect to a merge mask.

mod bound;
mod estimate;
mod kmeans;
mod probe;
mod report;

pub use bound::{
    fd_grad, ibb_bound, ibb_coefficient, ibb_grad, ibb_objective, ibb_terms, lemma1_bound, lemma2_bound, psi,
};
pub use estimate::{
    c0_const, clamped_ln, estimate_probs, ib_loss, mutual_info, neg_entropy, raw_similarities, soft_assign,
    soft_assign_all, update_q, Probabilities, LOG_FLOOR,
};
pub use kmeans::{kmeans, KMeans};
pub use probe::{gradcheck, GradCheck, Probe, ProbeDims, GRADCHECK_STEP, GRADCHECK_TOL};
pub use report::{layer_ib, write_csv, IbReport, LayerIb, CSV_HEADER};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-block statistics frozen for the duration of an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    /// `[C, P·D]`, merged tokens flattened row-major.
    pub merged_centroids: Tensor<f64>,
    /// `[C, input_dim]`
    pub input_centroids: Tensor<f64>,
    /// `[C, C]`, `q[a, y] = Q(X̃ ∈ a | Y = y)`.
    pub q: Tensor<f64>,
    pub class_prior: Vec<f64>,
    pub epoch: usize,
}

impl ClusterState {
    pub fn new(
        merged_centroids: Tensor<f64>,
        input_centroids: Tensor<f64>,
        q: Tensor<f64>,
        class_prior: Vec<f64>,
        epoch: usize,
    ) -> Result<Self> {
        let c = class_prior.len();
        if merged_centroids.rank() != 2 || merged_centroids.rows() != c {
            return Err(Error::shape("cluster_state", merged_centroids.shape(), &[c]));
        }
        if input_centroids.rank() != 2 || input_centroids.rows() != c {
            return Err(Error::shape("cluster_state", input_centroids.shape(), &[c]));
        }
        if q.shape() != [c, c] {
            return Err(Error::shape("cluster_state", q.shape(), &[c, c]));
        }
        for y in 0..c {
            let col: f64 = (0..c).map(|a| q.at(&[a, y])).sum();
            if (col - 1.0).abs() > 1e-9 {
                return Err(Error::Probability(format!("Q column {y} sums to {col}")));
            }
        }
        if q.data().iter().any(|&v| v < 0.0) || class_prior.iter().any(|&p| p < 0.0) {
            return Err(Error::Probability("negative entry".into()));
        }
        let total: f64 = class_prior.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Probability(format!("class prior sums to {total}")));
        }
        Ok(ClusterState {
            merged_centroids,
            input_centroids,
            q,
            class_prior,
            epoch,
        })
    }

    pub fn classes(&self) -> usize {
        self.class_prior.len()
    }

    pub fn merged_dim(&self) -> usize {
        self.merged_centroids.cols()
    }
}

/// How the label-dependent part of `ψ` is evaluated.
#[derive(Clone, Copy, Debug)]
pub enum LabelTerm<'a> {
    /// Training: `log Q(a | y_i)` with the observed label.
    Observed(&'a [usize]),
    /// Inference: `Σ_y P(y) log Q(a | y)` under the stored class prior.
    Prior,
}

impl LabelTerm<'_> {
    /// `log Q` contribution for sample `i` and merged cluster `a`.
    pub(crate) fn log_q(&self, i: usize, a: usize, cs: &ClusterState) -> f64 {
        match self {
            LabelTerm::Observed(labels) => clamped_ln(cs.q.at(&[a, labels[i]])),
            LabelTerm::Prior => cs
                .class_prior
                .iter()
                .enumerate()
                .map(|(y, &p)| p * clamped_ln(cs.q.at(&[a, y])))
                .sum(),
        }
    }

    pub(crate) fn check(&self, n: usize, classes: usize) -> Result<()> {
        if let LabelTerm::Observed(labels) = self {
            if labels.len() != n {
                return Err(Error::shape("labels", &[labels.len()], &[n]));
            }
            if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
                return Err(Error::invalid(format!("label {y} outside {classes} classes")));
            }
        }
        Ok(())
    }
}
