// SPDX-License-Identifier: Apache-2.0

//! Linear regression with squared loss, used as the training workload.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("no vectors to aggregate")]
    NoVectors,
}

/// Rows of features with one target each.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Splits into `parts` contiguous batches; the first `len % parts` get one extra row.
    pub fn partition(&self, parts: usize) -> Vec<Batch> {
        let ranges = fedcrypt_core::codec::chunk_ranges(self.len(), parts.max(1)).expect("parts >= 1");
        ranges
            .into_iter()
            .map(|r| Batch {
                features: self.features[r.clone()].to_vec(),
                targets: self.targets[r].to_vec(),
            })
            .collect()
    }

    pub fn concat(batches: &[Batch]) -> Batch {
        Batch {
            features: batches.iter().flat_map(|b| b.features.iter().cloned()).collect(),
            targets: batches.iter().flat_map(|b| b.targets.iter().copied()).collect(),
        }
    }
}

/// Mean squared error `(1/n) * |X theta - y|^2`.
pub fn loss(theta: &[f64], batch: &Batch) -> Result<f64, ModelError> {
    let residuals = residuals(theta, batch)?;
    Ok(residuals.iter().map(|r| r * r).sum::<f64>() / batch.len() as f64)
}

fn residuals(theta: &[f64], batch: &Batch) -> Result<Vec<f64>, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if batch.features.len() != batch.targets.len() {
        return Err(ModelError::ShapeMismatch {
            expected: batch.targets.len(),
            got: batch.features.len(),
        });
    }
    batch
        .features
        .iter()
        .zip(&batch.targets)
        .map(|(x, y)| {
            if x.len() != theta.len() {
                return Err(ModelError::ShapeMismatch {
                    expected: theta.len(),
                    got: x.len(),
                });
            }
            Ok(x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>() - y)
        })
        .collect()
}

/// Analytic gradient `2 X^T (X theta - y) / n`.
pub fn gradient(theta: &[f64], batch: &Batch) -> Result<Vec<f64>, ModelError> {
    let residuals = residuals(theta, batch)?;
    let n = batch.len() as f64;
    let mut g = vec![0.0; theta.len()];
    for (x, r) in batch.features.iter().zip(&residuals) {
        for (gj, xj) in g.iter_mut().zip(x) {
            *gj += xj * r;
        }
    }
    for gj in &mut g {
        *gj = 2.0 * *gj / n;
    }
    Ok(g)
}

/// `theta - lr * g`.
pub fn apply_update(theta: &[f64], g: &[f64], learning_rate: f64) -> Result<Vec<f64>, ModelError> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(ModelError::BadLearningRate(learning_rate));
    }
    if theta.len() != g.len() {
        return Err(ModelError::ShapeMismatch {
            expected: theta.len(),
            got: g.len(),
        });
    }
    Ok(theta.iter().zip(g).map(|(t, gi)| t - learning_rate * gi).collect())
}

/// Element-wise arithmetic mean of plaintext vectors.
pub fn local_aggregate(vectors: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
    let weights = vec![1.0; vectors.len()];
    weighted_mean(vectors, &weights)
}

/// Element-wise mean weighted by `weights`.
pub fn weighted_mean(vectors: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>, ModelError> {
    let first = vectors.first().ok_or(ModelError::NoVectors)?;
    if weights.len() != vectors.len() {
        return Err(ModelError::ShapeMismatch {
            expected: vectors.len(),
            got: weights.len(),
        });
    }
    if vectors.len() == 1 {
        return Ok(first.clone());
    }
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; first.len()];
    for (v, w) in vectors.iter().zip(weights) {
        if v.len() != first.len() {
            return Err(ModelError::ShapeMismatch {
                expected: first.len(),
                got: v.len(),
            });
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    for o in &mut out {
        *o /= total;
    }
    Ok(out)
}

/// How a local aggregator combines the gradients of its domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DomainWeighting {
    /// Plain mean over local learners.
    #[default]
    Uniform,
    /// Mean weighted by each local learner's sample count.
    Samples,
}

/// A synthetic least-squares problem.
#[derive(Debug, Clone)]
pub struct SyntheticProblem {
    pub data: Batch,
    pub true_theta: Vec<f64>,
}

impl SyntheticProblem {
    /// Features uniform in [-1, 1), targets from a random `theta` plus noise.
    /// With `grid_bits = Some(k)` every feature, target and the true
    /// parameter vector lie on the `2^-k` grid.
    pub fn generate(seed: u64, dims: usize, samples: usize, grid_bits: Option<u32>) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let snap = |x: f64| match grid_bits {
            Some(k) => {
                let s = (1u64 << k) as f64;
                (x * s).round() / s
            }
            None => x,
        };
        let true_theta: Vec<f64> = (0..dims).map(|_| snap(rng.gen_range(-2.0..2.0))).collect();
        let mut features = Vec::with_capacity(samples);
        let mut targets = Vec::with_capacity(samples);
        for _ in 0..samples {
            let x: Vec<f64> = (0..dims).map(|_| snap(rng.gen_range(-1.0..1.0))).collect();
            let clean: f64 = x.iter().zip(&true_theta).map(|(a, b)| a * b).sum();
            targets.push(snap(clean + rng.gen_range(-0.1..0.1)));
            features.push(x);
        }
        Self {
            data: Batch { features, targets },
            true_theta,
        }
    }
}

/// Source of gradients for one federated participant.
pub trait GradientSource: Send {
    /// Gradient at the current parameters. Called once per attempt at a round.
    fn gradient(&mut self) -> Vec<f64>;
    /// Applies the federated average.
    fn apply(&mut self, average: &[f64]);
    fn parameters(&self) -> &[f64];
}

/// A participant training linear regression. With more than one local
/// partition it acts as a local aggregator: gradients of its local learners
/// are averaged in plaintext before entering the encrypted protocol.
#[derive(Debug, Clone)]
pub struct LinearTrainer {
    theta: Vec<f64>,
    local: Vec<Batch>,
    learning_rate: f64,
    weighting: DomainWeighting,
}

impl LinearTrainer {
    pub fn new(theta: Vec<f64>, local: Vec<Batch>, learning_rate: f64) -> Self {
        assert!(!local.is_empty(), "at least one local learner");
        Self {
            theta,
            local,
            learning_rate,
            weighting: DomainWeighting::Uniform,
        }
    }

    pub fn with_weighting(mut self, weighting: DomainWeighting) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn local_learners(&self) -> usize {
        self.local.len()
    }
}

impl GradientSource for LinearTrainer {
    fn gradient(&mut self) -> Vec<f64> {
        let grads: Vec<Vec<f64>> = self
            .local
            .iter()
            .map(|b| gradient(&self.theta, b).expect("trainer data matches model"))
            .collect();
        let weights: Vec<f64> = match self.weighting {
            DomainWeighting::Uniform => vec![1.0; grads.len()],
            DomainWeighting::Samples => self.local.iter().map(|b| b.len() as f64).collect(),
        };
        weighted_mean(&grads, &weights).expect("equal lengths")
    }

    fn apply(&mut self, average: &[f64]) {
        self.theta = apply_update(&self.theta, average, self.learning_rate).expect("shapes match");
    }

    fn parameters(&self) -> &[f64] {
        &self.theta
    }
}

/// Emits the same vector every round and ignores updates. Used by
/// benchmarks where only aggregation cost matters.
#[derive(Debug, Clone)]
pub struct FixedGradient {
    vector: Vec<f64>,
    last: Vec<f64>,
}

impl FixedGradient {
    pub fn new(vector: Vec<f64>) -> Self {
        Self {
            last: vec![0.0; vector.len()],
            vector,
        }
    }

    pub fn last_average(&self) -> &[f64] {
        &self.last
    }
}

impl GradientSource for FixedGradient {
    fn gradient(&mut self) -> Vec<f64> {
        self.vector.clone()
    }

    fn apply(&mut self, average: &[f64]) {
        self.last = average.to_vec();
    }

    fn parameters(&self) -> &[f64] {
        &self.last
    }
}

/// Full-batch gradient descent on `data`, the centralized reference.
pub fn centralized_descent(
    theta0: &[f64],
    data: &Batch,
    learning_rate: f64,
    rounds: usize,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut trajectory = vec![theta0.to_vec()];
    let mut theta = theta0.to_vec();
    for _ in 0..rounds {
        theta = apply_update(&theta, &gradient(&theta, data)?, learning_rate)?;
        trajectory.push(theta.clone());
    }
    Ok(trajectory)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_problem_has_zero_gradient() {
        let b = Batch {
            features: vec![vec![1.0, 2.0], vec![3.0, -1.0]],
            targets: vec![0.0, 0.0],
        };
        assert_eq!(gradient(&[0.0, 0.0], &b).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn hand_derivative() {
        // d/dθ (θ·1 - 0)^2 = 2θ = 2 at θ = 1
        let b = Batch {
            features: vec![vec![1.0]],
            targets: vec![0.0],
        };
        assert_eq!(gradient(&[1.0], &b).unwrap(), vec![2.0]);
    }

    #[test]
    fn update_arithmetic() {
        assert_eq!(apply_update(&[1.0], &[2.0], 0.5).unwrap(), vec![0.0]);
        assert_eq!(apply_update(&[1.0, -3.0], &[0.0, 0.0], 0.1).unwrap(), vec![1.0, -3.0]);
        assert!(apply_update(&[1.0], &[1.0], 0.0).is_err());
        assert!(apply_update(&[1.0], &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn local_means() {
        assert_eq!(local_aggregate(&[vec![1.0, 2.0]]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(
            local_aggregate(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            vec![2.0, 3.0]
        );
        assert!(local_aggregate(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert_eq!(local_aggregate(&[]), Err(ModelError::NoVectors));
    }

    #[test]
    fn shape_errors() {
        let b = Batch {
            features: vec![vec![1.0, 2.0]],
            targets: vec![0.0],
        };
        assert!(matches!(gradient(&[1.0], &b), Err(ModelError::ShapeMismatch { .. })));
        assert_eq!(gradient(&[1.0], &Batch::default()), Err(ModelError::EmptyBatch));
    }

    #[test]
    fn grid_problem_is_on_grid() {
        let p = SyntheticProblem::generate(1, 3, 20, Some(8));
        let on_grid = |x: f64| (x * 256.0).fract() == 0.0;
        assert!(p.true_theta.iter().all(|&x| on_grid(x)));
        assert!(p.data.features.iter().flatten().all(|&x| on_grid(x)));
        assert!(p.data.targets.iter().all(|&x| on_grid(x)));
    }
}
