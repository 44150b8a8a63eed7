//! Stacking statistics and the pairwise-bound check that justifies the
//! consistency loss: mean/median pooling, the conjugate Gaussian posterior
//! update, the sigma/sqrt(n) Monte Carlo law, and the L1 upper bound on the
//! distance to the posterior mean.
//!
//! Everything here is a correctness oracle, so all arithmetic is f64.

use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum StackError {
    #[error("empty stack")]
    EmptyStack,
    #[error("shape mismatch: item {index} has {got} elements, expected {expected}")]
    ShapeMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("index {index} out of range for stack of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

/// A stack of same-shape feature arrays, flattened.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    items: Vec<Vec<f64>>,
}

impl FeatureStack {
    pub fn new(items: Vec<Vec<f64>>) -> Result<Self, StackError> {
        if items.is_empty() {
            return Err(StackError::EmptyStack);
        }
        let expected = items[0].len();
        for (index, it) in items.iter().enumerate() {
            if it.len() != expected {
                return Err(StackError::ShapeMismatch {
                    index,
                    got: it.len(),
                    expected,
                });
            }
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires n >= 1
    }

    pub fn items(&self) -> &[Vec<f64>] {
        &self.items
    }

    pub fn dim(&self) -> usize {
        self.items[0].len()
    }

    /// Elementwise arithmetic mean over the stack.
    pub fn sample_mean(&self) -> Vec<f64> {
        let n = self.items.len() as f64;
        let mut out = vec![0.0; self.dim()];
        for it in &self.items {
            for (o, v) in out.iter_mut().zip(it) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n;
        }
        out
    }

    /// Elementwise sample standard deviation (unbiased, n-1); zeros for n=1.
    pub fn sample_std(&self) -> Vec<f64> {
        let n = self.items.len();
        let mean = self.sample_mean();
        let mut out = vec![0.0; self.dim()];
        if n < 2 {
            return out;
        }
        for it in &self.items {
            for ((o, v), m) in out.iter_mut().zip(it).zip(&mean) {
                let d = v - m;
                *o += d * d;
            }
        }
        for o in &mut out {
            *o = (*o / (n as f64 - 1.0)).sqrt();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMethod {
    Mean,
    Median,
}

/// Elementwise mean or median of the stack. Median of an even stack is the
/// average of the two central order statistics.
pub fn pool_stack(stack: &FeatureStack, method: PoolMethod) -> Vec<f64> {
    match method {
        PoolMethod::Mean => stack.sample_mean(),
        PoolMethod::Median => {
            let n = stack.len();
            let mut out = vec![0.0; stack.dim()];
            let mut col = vec![0.0; n];
            for (j, o) in out.iter_mut().enumerate() {
                for (i, it) in stack.items.iter().enumerate() {
                    col[i] = it[j];
                }
                col.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                *o = if n % 2 == 1 {
                    col[n / 2]
                } else {
                    0.5 * (col[n / 2 - 1] + col[n / 2])
                };
            }
            out
        }
    }
}

/// Gaussian prior N(t0, sigma0^2) with observation noise std sigma.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub t0: Vec<f64>,
    pub sigma0: f64,
    pub sigma: f64,
}

impl GaussianPrior {
    pub fn new(t0: Vec<f64>, sigma0: f64, sigma: f64) -> Result<Self, StackError> {
        if sigma0 <= 0.0 || sigma <= 0.0 {
            return Err(StackError::Invalid(format!(
                "sigma0 {} and sigma {} must be > 0",
                sigma0, sigma
            )));
        }
        Ok(Self { t0, sigma0, sigma })
    }
}

/// Conjugate posterior for a Gaussian mean:
/// mean = (sigma^2 t0 + sigma0^2 sum t_i) / (sigma^2 + n sigma0^2),
/// variance = sigma^2 sigma0^2 / (sigma^2 + n sigma0^2).
pub fn bayes_update(
    prior: &GaussianPrior,
    observations: &[Vec<f64>],
) -> Result<(Vec<f64>, f64), StackError> {
    let dim = prior.t0.len();
    for (index, obs) in observations.iter().enumerate() {
        if obs.len() != dim {
            return Err(StackError::ShapeMismatch {
                index,
                got: obs.len(),
                expected: dim,
            });
        }
    }
    let n = observations.len() as f64;
    let s2 = prior.sigma * prior.sigma;
    let s02 = prior.sigma0 * prior.sigma0;
    let denom = s2 + n * s02;
    let mut mean = vec![0.0; dim];
    for (j, m) in mean.iter_mut().enumerate() {
        let sum: f64 = observations.iter().map(|o| o[j]).sum();
        *m = (s2 * prior.t0[j] + s02 * sum) / denom;
    }
    Ok((mean, s2 * s02 / denom))
}

/// One row of the Monte Carlo report for the sigma/sqrt(n) law.
#[derive(Debug, Clone)]
pub struct StackingLawRow {
    pub n: usize,
    pub sigma: f64,
    pub trials: usize,
    pub empirical_std: f64,
    pub predicted_std: f64,
    pub ratio: f64,
}

/// Draws `trials` stacks of n samples from N(0, sigma) per n, pools by
/// mean, and reports the sample std of the pooled values against
/// sigma/sqrt(n). Each (n, trial) draws from its own substream so trial
/// scheduling order cannot matter.
pub fn stacking_law_mc(
    sigma: f64,
    n_values: &[usize],
    trials: usize,
    rng: &Rng,
) -> Result<Vec<StackingLawRow>, StackError> {
    if trials < 1000 {
        return Err(StackError::Invalid(format!(
            "trials {} must be >= 1000",
            trials
        )));
    }
    if sigma <= 0.0 {
        return Err(StackError::Invalid(format!("sigma {} must be > 0", sigma)));
    }
    let mut rows = Vec::with_capacity(n_values.len());
    for (ni, &n) in n_values.iter().enumerate() {
        if n == 0 {
            return Err(StackError::Invalid("n must be >= 1".into()));
        }
        let mut pooled = Vec::with_capacity(trials);
        for trial in 0..trials {
            let mut r = rng.child(((ni as u64) << 32) | trial as u64);
            let sum: f64 = (0..n).map(|_| r.normal(0.0, sigma)).sum();
            pooled.push(sum / n as f64);
        }
        let mean: f64 = pooled.iter().sum::<f64>() / trials as f64;
        let var: f64 = pooled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (trials as f64 - 1.0);
        let empirical_std = var.sqrt();
        let predicted_std = sigma / (n as f64).sqrt();
        rows.push(StackingLawRow {
            n,
            sigma,
            trials,
            empirical_std,
            predicted_std,
            ratio: empirical_std / predicted_std,
        });
    }
    Ok(rows)
}

/// Result of one evaluation of the pairwise upper bound.
#[derive(Debug, Clone, Copy)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Checks, under summed L1 distance, that
/// |t_i - E[t_hat]|_1 <= w0 |t_i - t0|_1 + w i sum_{j!=i} |t_i - t_j|_1
/// with w0 = sigma^2/(sigma^2 + n sigma0^2), w = sigma0^2/(same).
pub fn bound_check(
    stack: &FeatureStack,
    prior: &GaussianPrior,
    i: usize,
) -> Result<BoundCheck, StackError> {
    let n = stack.len();
    if i >= n {
        return Err(StackError::IndexOutOfRange { index: i, len: n });
    }
    if prior.t0.len() != stack.dim() {
        return Err(StackError::ShapeMismatch {
            index: 0,
            got: prior.t0.len(),
            expected: stack.dim(),
        });
    }
    let (posterior_mean, _) = bayes_update(prior, stack.items())?;
    let ti = &stack.items()[i];
    let lhs = l1(ti, &posterior_mean);

    let s2 = prior.sigma * prior.sigma;
    let s02 = prior.sigma0 * prior.sigma0;
    let denom = s2 + n as f64 * s02;
    let mut rhs = (s2 / denom) * l1(ti, &prior.t0);
    for (j, tj) in stack.items().iter().enumerate() {
        if j != i {
            rhs += (s02 / denom) * l1(ti, tj);
        }
    }
    Ok(BoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    use crate::rng::Rng as DetRng;

    #[test]
    fn mean_pool_of_two() {
        let s = FeatureStack::new(vec![vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(pool_stack(&s, PoolMethod::Mean), vec![2.0]);
    }

    #[test]
    fn median_pool_robust_to_outlier() {
        let s = FeatureStack::new(vec![vec![1.0], vec![2.0], vec![100.0]]).unwrap();
        assert_eq!(pool_stack(&s, PoolMethod::Median), vec![2.0]);
    }

    #[test]
    fn single_item_pool_is_identity() {
        let s = FeatureStack::new(vec![vec![4.0, -1.0]]).unwrap();
        assert_eq!(pool_stack(&s, PoolMethod::Mean), vec![4.0, -1.0]);
        assert_eq!(pool_stack(&s, PoolMethod::Median), vec![4.0, -1.0]);
    }

    #[test]
    fn empty_stack_rejected() {
        assert!(matches!(
            FeatureStack::new(vec![]),
            Err(StackError::EmptyStack)
        ));
    }

    #[test]
    fn mismatched_items_rejected() {
        assert!(FeatureStack::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn bayes_no_evidence_returns_prior() {
        let prior = GaussianPrior::new(vec![0.5], 2.0, 1.0).unwrap();
        let (mean, var) = bayes_update(&prior, &[]).unwrap();
        assert_eq!(mean, vec![0.5]);
        assert!((var - 4.0).abs() < 1e-15);
    }

    #[test]
    fn bayes_hand_case() {
        // sigma=1, sigma0=1, t0=0, obs {2,4} -> mean 2, variance 1/3
        let prior = GaussianPrior::new(vec![0.0], 1.0, 1.0).unwrap();
        let (mean, var) = bayes_update(&prior, &[vec![2.0], vec![4.0]]).unwrap();
        assert!((mean[0] - 2.0).abs() < 1e-12);
        assert!((var - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bayes_prior_washout() {
        // sigma=1, sigma0=1e3, single observation 5 -> mean 5e6/(1+1e6)
        let prior = GaussianPrior::new(vec![0.0], 1e3, 1.0).unwrap();
        let (mean, _) = bayes_update(&prior, &[vec![5.0]]).unwrap();
        assert!((mean[0] - 5e6 / (1.0 + 1e6)).abs() < 1e-12);
    }

    #[test]
    fn bayes_shape_mismatch_rejected() {
        let prior = GaussianPrior::new(vec![0.0, 0.0], 1.0, 1.0).unwrap();
        assert!(bayes_update(&prior, &[vec![1.0]]).is_err());
    }

    #[test]
    fn bayes_variance_decreasing_in_n() {
        let prior = GaussianPrior::new(vec![0.0], 1.3, 0.7).unwrap();
        let mut last = f64::INFINITY;
        for n in 0..10 {
            let obs = vec![vec![1.0]; n];
            let (_, var) = bayes_update(&prior, &obs).unwrap();
            assert!(var < last);
            last = var;
        }
    }

    #[test]
    fn bound_degenerate_all_equal() {
        let s = FeatureStack::new(vec![vec![3.0], vec![3.0], vec![3.0]]).unwrap();
        let prior = GaussianPrior::new(vec![3.0], 1.0, 1.0).unwrap();
        let b = bound_check(&s, &prior, 1).unwrap();
        assert_eq!(b.lhs, 0.0);
        assert_eq!(b.rhs, 0.0);
        assert!(b.holds);
    }

    #[test]
    fn bound_equality_case_n1() {
        // n=1, sigma0=sigma: lhs = |t1-t0|/2 = rhs
        let s = FeatureStack::new(vec![vec![4.0]]).unwrap();
        let prior = GaussianPrior::new(vec![1.0], 2.0, 2.0).unwrap();
        let b = bound_check(&s, &prior, 0).unwrap();
        assert!((b.lhs - 1.5).abs() < 1e-12);
        assert!((b.lhs - b.rhs).abs() < 1e-12);
    }

    #[test]
    fn bound_index_out_of_range() {
        let s = FeatureStack::new(vec![vec![1.0]]).unwrap();
        let prior = GaussianPrior::new(vec![0.0], 1.0, 1.0).unwrap();
        assert!(matches!(
            bound_check(&s, &prior, 1),
            Err(StackError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn stacking_law_small_run() {
        let rng = DetRng::new(11, 0);
        let rows = stacking_law_mc(1.0, &[1, 16], 2000, &rng).unwrap();
        assert!((rows[0].ratio - 1.0).abs() < 0.06);
        assert!((rows[1].ratio - 1.0).abs() < 0.06);
    }

    #[test]
    fn stacking_law_rejects_few_trials() {
        let rng = DetRng::new(11, 0);
        assert!(stacking_law_mc(1.0, &[1], 10, &rng).is_err());
    }

    #[test]
    fn batch_equals_sequential_updating() {
        let mut rng = DetRng::new(3, 0);
        for _ in 0..100 {
            let dim = 1 + rng.uniform_usize(4);
            let n = 1 + rng.uniform_usize(6);
            let t0: Vec<f64> = (0..dim).map(|_| rng.normal(0.0, 2.0)).collect();
            let sigma0 = rng.uniform(0.1, 3.0);
            let sigma = rng.uniform(0.1, 3.0);
            let obs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.normal(0.0, 2.0)).collect())
                .collect();

            let prior = GaussianPrior::new(t0.clone(), sigma0, sigma).unwrap();
            let (batch_mean, batch_var) = bayes_update(&prior, &obs).unwrap();

            let mut cur = GaussianPrior::new(t0, sigma0, sigma).unwrap();
            let mut var = sigma0 * sigma0;
            for o in &obs {
                let (m, v) = bayes_update(&cur, std::slice::from_ref(o)).unwrap();
                var = v;
                cur = GaussianPrior::new(m, v.sqrt(), sigma).unwrap();
            }
            for (a, b) in batch_mean.iter().zip(&cur.t0) {
                let rel = (a - b).abs() / a.abs().max(1.0);
                assert!(rel < 1e-9, "mean mismatch: {} vs {}", a, b);
            }
            assert!((batch_var - var).abs() / batch_var.max(1e-300) < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn bound_holds_on_random_stacks(
            seed in 0u64..1000,
            n in 2usize..9,
            dim in 1usize..6,
        ) {
            let mut rng = DetRng::new(seed, 99);
            let items: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.normal(0.0, 1.5)).collect())
                .collect();
            let stack = FeatureStack::new(items).unwrap();
            let t0: Vec<f64> = (0..dim).map(|_| rng.normal(0.0, 1.5)).collect();
            let sigma0 = rng.uniform(0.05, 4.0);
            let sigma = rng.uniform(0.05, 4.0);
            let prior = GaussianPrior::new(t0, sigma0, sigma).unwrap();
            let i = rng.uniform_usize(n);
            let b = bound_check(&stack, &prior, i).unwrap();
            prop_assert!(b.holds, "lhs {} rhs {}", b.lhs, b.rhs);
        }

        #[test]
        fn mean_pool_matches_sample_mean(
            seed in 0u64..200,
            n in 1usize..10,
            dim in 1usize..5,
        ) {
            let mut rng = DetRng::new(seed, 42);
            let items: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.normal(0.0, 3.0)).collect())
                .collect();
            let stack = FeatureStack::new(items).unwrap();
            prop_assert_eq!(pool_stack(&stack, PoolMethod::Mean), stack.sample_mean());
        }
    }
}
