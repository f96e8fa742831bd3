use crate::error::Result;
use crate::numerics::{Rng, Tensor};

use super::bound::{fd_grad, ibb_grad, ibb_objective, merge_all};
use super::estimate::{soft_assign_all, update_q};
use super::{ClusterState, LabelTerm};

/// Sizes of a random gradient-check instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeDims {
    pub samples: usize,
    pub tokens: usize,
    pub merged: usize,
    pub dim: usize,
    pub classes: usize,
}

impl ProbeDims {
    pub fn new(samples: usize, tokens: usize, merged: usize, dim: usize, classes: usize) -> Self {
        ProbeDims {
            samples,
            tokens,
            merged,
            dim,
            classes,
        }
    }

    /// n ≤ 16, N ≤ 8, P ≤ min(4, N), D ≤ 4, C ∈ {2, 3}.
    pub fn random(rng: &mut Rng) -> Self {
        let classes = 2 + rng.below(2);
        let tokens = 1 + rng.below(8);
        ProbeDims {
            samples: classes + rng.below(17 - classes),
            tokens,
            merged: 1 + rng.below(tokens.min(4)),
            dim: 1 + rng.below(4),
            classes,
        }
    }

    /// n ∈ [4, 32], C ∈ [2, 4], P·D ≤ 16.
    pub fn random_bound(rng: &mut Rng) -> Self {
        let merged = 1 + rng.below(4);
        let dim = 1 + rng.below(16 / merged);
        ProbeDims {
            samples: 4 + rng.below(29),
            tokens: merged + rng.below(4),
            merged,
            dim,
            classes: 2 + rng.below(3),
        }
    }
}

/// A random but self-consistent IB instance: mask, tokens, labels, frozen
/// cluster statistics and input assignments.
#[derive(Clone, Debug)]
pub struct Probe {
    pub dims: ProbeDims,
    /// `[N, P]`, convex columns.
    pub g: Tensor<f64>,
    /// `[n, N, D]`
    pub z: Tensor<f64>,
    pub labels: Vec<usize>,
    pub state: ClusterState,
    /// `[n, C]`
    pub phi_input: Tensor<f64>,
}

const INPUT_DIM: usize = 3;

impl Probe {
    pub fn random(rng: &mut Rng, dims: ProbeDims) -> Result<Self> {
        let ProbeDims {
            samples: n,
            tokens,
            merged: p,
            dim: d,
            classes: c,
        } = dims;
        let g = rng
            .normal_tensor::<f64>(&[tokens, p], 1.0)
            .transpose()
            .softmax_rows()
            .transpose();
        let z = rng.normal_tensor::<f64>(&[n, tokens, d], 0.8);
        let mut labels: Vec<usize> = (0..n).map(|i| if i < c { i } else { rng.below(c) }).collect();
        let order = rng.permutation(n);
        labels = order.iter().map(|&k| labels[k]).collect();

        let inputs = rng.normal_tensor::<f64>(&[n, INPUT_DIM], 1.0);
        let input_centroids = rng.normal_tensor::<f64>(&[c, INPUT_DIM], 0.8);
        let phi_input = soft_assign_all(&inputs, &input_centroids)?;

        let merged_centroids = rng.normal_tensor::<f64>(&[c, p * d], 0.5);
        let phi_merged = soft_assign_all(&merge_all(&g, &z)?, &merged_centroids)?;
        let q = update_q(&phi_merged, &labels, c)?;
        let mut prior = vec![0.0; c];
        for &y in &labels {
            prior[y] += 1.0 / n as f64;
        }
        let state = ClusterState::new(merged_centroids, input_centroids, q, prior, 0)?;
        Ok(Probe {
            dims,
            g,
            z,
            labels,
            state,
            phi_input,
        })
    }

    /// Merged tokens `[n, P·D]` under the current mask.
    pub fn merged(&self) -> Result<Tensor<f64>> {
        merge_all(&self.g, &self.z)
    }

    pub fn objective(&self, g: &Tensor<f64>, labels: LabelTerm<'_>) -> Result<f64> {
        ibb_objective(g, &self.z, &self.phi_input, labels, &self.state)
    }

    pub fn gradient(&self, labels: LabelTerm<'_>) -> Result<Tensor<f64>> {
        ibb_grad(&self.g, &self.z, &self.phi_input, labels, &self.state)
    }

    /// Largest entrywise relative error between the closed-form gradient and
    /// central differences. Entries where both sides are below 1e-8 in
    /// magnitude use the absolute error; a non-finite entry gives infinity.
    pub fn gradient_error(&self, step: f64) -> Result<f64> {
        let labels = LabelTerm::Observed(&self.labels);
        let analytic = self.gradient(labels)?;
        let numeric = fd_grad(&self.g, step, |g| self.objective(g, labels))?;
        Ok(analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &f)| {
                let err = (a - f).abs() / a.abs().max(f.abs()).max(1e-8);
                if err.is_nan() {
                    f64::INFINITY
                } else {
                    err
                }
            })
            .fold(0.0, f64::max))
    }
}

/// Outcome of [`gradcheck`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub trials: usize,
    pub max_rel_err: f64,
    pub failures: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-5;

/// Compares the closed-form IBB gradient with finite differences on
/// `trials` random instances.
pub fn gradcheck(trials: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = Rng::new(seed);
    let mut report = GradCheck {
        trials,
        max_rel_err: 0.0,
        failures: 0,
    };
    for _ in 0..trials {
        let dims = ProbeDims::random(&mut rng);
        let err = Probe::random(&mut rng, dims)?.gradient_error(GRADCHECK_STEP)?;
        report.max_rel_err = report.max_rel_err.max(err);
        if err > GRADCHECK_TOL {
            report.failures += 1;
        }
    }
    Ok(report)
}
