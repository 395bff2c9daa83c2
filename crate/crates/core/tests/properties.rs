use nalgebra::DMatrix;
use proptest::prelude::*;
use sapsim::learners::{fit_learner, Family, LearnerSpec};
use sapsim::superlearner::{fit_super_learner, make_folds, EnsembleMode, Loss};
use sapsim::SeededStream;

fn data(seed: u64, n: usize, p: usize, family: Family) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = SeededStream::new(seed, 0).rng();
    let x = DMatrix::from_fn(n, p, |_, _| rng.normal(0.0, 1.0));
    let y = (0..n)
        .map(|i| {
            let eta = 0.3 + 0.8 * x[(i, 0)] - 0.5 * x[(i, p - 1)];
            match family {
                Family::Gaussian => eta + rng.normal(0.0, 1.0),
                Family::Binomial => rng.bernoulli(sapsim::stats::expit(eta)) as u8 as f64,
            }
        })
        .collect();
    (x, y)
}

fn in_sample_loss(family: Family, y: &[f64], p: &[f64]) -> f64 {
    let loss = Loss::for_family(family);
    y.iter().zip(p).map(|(a, b)| loss.value(*a, *b)).sum::<f64>() / y.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Heavier penalties never fit the training data better.
    #[test]
    fn ridge_training_loss_grows_with_lambda(seed in 0u64..1000, l1 in 0.0f64..5.0, dl in 0.01f64..20.0, binomial in any::<bool>()) {
        let family = if binomial { Family::Binomial } else { Family::Gaussian };
        let (x, y) = data(seed, 120, 3, family);
        let a = fit_learner(&LearnerSpec::ridge(l1, family), &x, &y, None, None).unwrap();
        let b = fit_learner(&LearnerSpec::ridge(l1 + dl, family), &x, &y, None, None).unwrap();
        prop_assume!(!a.fallback && !b.fallback);
        let la = in_sample_loss(family, &y, &a.predict(&x).unwrap());
        let lb = in_sample_loss(family, &y, &b.predict(&x).unwrap());
        prop_assert!(lb >= la - 1e-9, "{la} > {lb}");
    }

    /// Integer weights give the same fit as replicating rows.
    #[test]
    fn weights_equal_replication(seed in 0u64..1000, binomial in any::<bool>(), lambda in 0.0f64..2.0) {
        let family = if binomial { Family::Binomial } else { Family::Gaussian };
        let (x, y) = data(seed, 60, 2, family);
        let mut rng = SeededStream::new(seed, 9).rng();
        let w: Vec<f64> = (0..60).map(|_| (1 + rng.below(3)) as f64).collect();
        let mut rows = Vec::new();
        for (i, wi) in w.iter().enumerate() {
            rows.extend(std::iter::repeat_n(i, *wi as usize));
        }
        let xr = DMatrix::from_fn(rows.len(), 2, |r, j| x[(rows[r], j)]);
        let yr: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let spec = LearnerSpec::ridge(lambda, family);
        let a = fit_learner(&spec, &x, &y, Some(&w), None).unwrap();
        let b = fit_learner(&spec, &xr, &yr, None, None).unwrap();
        for (ca, cb) in a.coefficients.iter().zip(&b.coefficients) {
            prop_assert!((ca - cb).abs() < 1e-6, "{:?} vs {:?}", a.coefficients, b.coefficients);
        }
    }

    /// Convex Super Learner weights lie on the simplex and the ensemble
    /// never has higher CV risk than its best learner.
    #[test]
    fn convex_weights_on_simplex(seed in 0u64..1000) {
        let (x, y) = data(seed, 150, 3, Family::Binomial);
        let library = [
            LearnerSpec::intercept_only(Family::Binomial),
            LearnerSpec::main_terms(Family::Binomial),
            LearnerSpec::ridge(5.0, Family::Binomial),
        ];
        let folds = make_folds(150, 5, &SeededStream::new(seed, 1), None, None).unwrap();
        let fit = fit_super_learner(&library, &x, &y, &folds, Loss::for_family(Family::Binomial), EnsembleMode::Convex).unwrap();
        prop_assert!(fit.weights.iter().all(|w| *w >= 0.0));
        prop_assert!((fit.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let best = fit.cv_risk.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(fit.ensemble_cv_risk <= best + 1e-10);
    }
}
