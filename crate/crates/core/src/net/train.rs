//! Plain per-sample stochastic gradient descent for the localization network.
//!
//! Every epoch walks the samples in their given order and takes one SGD step
//! after each forward + backward pass. Incremental updates matter here: the
//! useful gradient directions are weak relative to the loss curvature, so a
//! fixed epoch budget needs sample-count many more steps than full-batch
//! descent to move the early layers at all. Each step still runs its
//! convolutions in parallel when the `parallel` feature is on, and the fixed
//! visit order keeps runs bit-reproducible in both builds. The recorded loss
//! for an epoch is the running mean of the per-sample losses, each measured
//! just before its own update.

use super::{backward, forward, ops::FeatureMap, NetError, NetworkParams, NetworkSpec};
use crate::par;

/// One training example: input intensity map and target heatmap stack.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: FeatureMap,
    pub target: FeatureMap,
}

/// Gradient descent settings.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub epochs: usize,
}

/// Mean loss of `params` over `samples` without updating anything.
pub fn mean_loss(params: &NetworkParams, samples: &[TrainSample]) -> Result<f64, NetError> {
    let losses = par::map_slice(samples, |s| {
        forward(params, &s.input).map(|pass| super::loss_total(&pass, &s.target))
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

/// Trains from a seeded initialization, returning the final parameters and
/// the per-epoch loss curve.
///
/// A non-finite sample loss aborts with [`NetError::Diverged`]; with zero
/// epochs the seeded initialization is returned untouched.
pub fn train(
    spec: &NetworkSpec,
    seed: u64,
    samples: &[TrainSample],
    opts: &TrainOptions,
) -> Result<(NetworkParams, Vec<f64>), NetError> {
    if samples.is_empty() {
        return Err(NetError::Shape("no training samples".to_string()));
    }
    for s in samples {
        spec.check_dims(s.input.dims)?;
    }
    let mut params = spec.init_params(seed);
    let mut curve = Vec::with_capacity(opts.epochs);
    let inv_n = 1.0 / samples.len() as f64;
    for epoch in 0..opts.epochs {
        let mut loss = 0.0;
        for s in samples {
            let pass = forward(&params, &s.input)?;
            let (l, grad) = backward(&params, &pass, &s.input, &s.target)?;
            if !l.is_finite() {
                return Err(NetError::Diverged { epoch, loss: l });
            }
            loss += l * inv_n;
            params.add_scaled(&grad, -opts.learning_rate);
        }
        curve.push(loss);
    }
    Ok((params, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn toy_samples(n: usize, dims: [usize; 3]) -> Vec<TrainSample> {
        (0..n)
            .map(|i| {
                let mut r = rng::stream(77, 1, i as u64);
                let mut input = FeatureMap::zeros(1, dims);
                for v in &mut input.data {
                    *v = r.random_range(0.0..1.0);
                }
                // Smooth target correlated with the input so there is
                // something learnable.
                let mut target = FeatureMap::zeros(1, dims);
                for (t, x) in target.data.iter_mut().zip(&input.data) {
                    *t = 0.5 * x;
                }
                TrainSample { input, target }
            })
            .collect()
    }

    #[test]
    fn loss_decreases_on_toy_problem() {
        let spec = NetworkSpec::new(1, 1, vec![2]).unwrap();
        let samples = toy_samples(2, [4, 4, 4]);
        let opts = TrainOptions {
            learning_rate: 0.5,
            epochs: 40,
        };
        let (_, curve) = train(&spec, 5, &samples, &opts).unwrap();
        assert_eq!(curve.len(), 40);
        assert!(
            curve[39] < 0.5 * curve[0],
            "loss {} -> {} did not halve",
            curve[0],
            curve[39]
        );
    }

    #[test]
    fn training_is_deterministic() {
        let spec = NetworkSpec::new(1, 1, vec![2]).unwrap();
        let samples = toy_samples(2, [4, 4, 4]);
        let opts = TrainOptions {
            learning_rate: 0.2,
            epochs: 5,
        };
        let (p1, c1) = train(&spec, 9, &samples, &opts).unwrap();
        let (p2, c2) = train(&spec, 9, &samples, &opts).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let spec = NetworkSpec::new(1, 1, vec![2]).unwrap();
        let samples = toy_samples(1, [4, 4, 4]);
        let opts = TrainOptions {
            learning_rate: 0.2,
            epochs: 0,
        };
        let (p, curve) = train(&spec, 4, &samples, &opts).unwrap();
        assert!(curve.is_empty());
        assert_eq!(p, spec.init_params(4));
    }

    #[test]
    fn runaway_learning_rate_reports_divergence() {
        let spec = NetworkSpec::new(1, 1, vec![2]).unwrap();
        let samples = toy_samples(2, [4, 4, 4]);
        let opts = TrainOptions {
            learning_rate: 1e18,
            epochs: 200,
        };
        match train(&spec, 5, &samples, &opts) {
            Err(NetError::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn single_sample_first_curve_entry_is_the_initial_loss() {
        // With one sample the first recorded loss is measured before any
        // update, so it must equal the independent mean_loss evaluation.
        let spec = NetworkSpec::new(1, 1, vec![2]).unwrap();
        let samples = toy_samples(1, [4, 4, 4]);
        let opts = TrainOptions {
            learning_rate: 0.1,
            epochs: 1,
        };
        let init = spec.init_params(8);
        let expect = mean_loss(&init, &samples).unwrap();
        let (_, curve) = train(&spec, 8, &samples, &opts).unwrap();
        assert!((curve[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn updates_are_per_sample_in_given_order() {
        // Oracle: replay the incremental updates by hand with forward and
        // backward, asserting both the final parameters and the recorded
        // running-mean loss.
        let spec = NetworkSpec::new(1, 1, vec![2]).unwrap();
        let samples = toy_samples(2, [4, 4, 4]);
        let opts = TrainOptions {
            learning_rate: 0.3,
            epochs: 2,
        };
        let mut expect = spec.init_params(11);
        let mut expect_curve = Vec::new();
        for _ in 0..opts.epochs {
            let mut loss = 0.0;
            for s in &samples {
                let pass = forward(&expect, &s.input).unwrap();
                let (l, g) = backward(&expect, &pass, &s.input, &s.target).unwrap();
                loss += l / samples.len() as f64;
                expect.add_scaled(&g, -opts.learning_rate);
            }
            expect_curve.push(loss);
        }
        let (params, curve) = train(&spec, 11, &samples, &opts).unwrap();
        assert_eq!(params, expect);
        assert_eq!(curve, expect_curve);
    }

    #[test]
    fn empty_sample_set_is_an_error() {
        let spec = NetworkSpec::new(1, 1, vec![2]).unwrap();
        let opts = TrainOptions {
            learning_rate: 0.1,
            epochs: 1,
        };
        assert!(train(&spec, 1, &[], &opts).is_err());
    }
}
