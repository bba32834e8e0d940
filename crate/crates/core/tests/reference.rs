use std::sync::Arc;

use averaging_games::diffusion_ref::{euler_maruyama_terminal, ks_distance, ConstantCoefficients, DiffusionSpec, FnCoefficients};
use averaging_games::experiments::least_squares_slope;

/// Weak error of Euler–Maruyama for `dX = -2 X dt + dW`, `X(0) = 10`, against the exact
/// Gaussian moments; the start far from equilibrium makes the bias large against the Monte
/// Carlo error.
#[test]
fn euler_maruyama_weak_order_one() {
    let theta = 2.0;
    let coefficients = Arc::new(FnCoefficients::new(1, move |x, drift, sigma| {
        drift[0] = -theta * x[0];
        sigma[0] = 1.0;
    }));
    let spec = DiffusionSpec::new(coefficients, vec![10.0], 1.0).unwrap();
    let mean = 10.0 * (-theta).exp();
    let second = mean * mean + (1.0 - (-2.0 * theta).exp()) / (2.0 * theta);
    let (mut first_err, mut second_err) = (Vec::new(), Vec::new());
    let dts = [1e-2, 5e-3, 2.5e-3];
    for dt in dts {
        let xs = euler_maruyama_terminal(&spec, dt, 5, 400_000).unwrap();
        let m1 = xs.iter().map(|x| x[0]).sum::<f64>() / xs.len() as f64;
        let m2 = xs.iter().map(|x| x[0] * x[0]).sum::<f64>() / xs.len() as f64;
        first_err.push((m1 - mean).abs());
        second_err.push((m2 - second).abs());
    }
    for errors in [&first_err, &second_err] {
        assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
        let points: Vec<(f64, f64)> = dts.iter().zip(errors.iter()).map(|(d, e)| (d.ln(), e.ln())).collect();
        let slope = least_squares_slope(&points).unwrap();
        assert!((0.7..1.3).contains(&slope), "slope {slope}, errors {errors:?}");
    }
}

#[test]
fn constant_coefficients_give_exact_gaussian_in_one_step() {
    let spec = DiffusionSpec::new(Arc::new(ConstantCoefficients::new(vec![0.5], vec![2.0]).unwrap()), vec![1.0], 2.0)
        .unwrap();
    let one = euler_maruyama_terminal(&spec, 2.0, 9, 20_000).unwrap();
    let many = euler_maruyama_terminal(&spec, 0.01, 10, 20_000).unwrap();
    let a: Vec<f64> = one.iter().map(|x| x[0]).collect();
    let b: Vec<f64> = many.iter().map(|x| x[0]).collect();
    // both are Normal(2, 8); two-sample KS at n = 2e4 stays below 0.02 with high probability
    assert!(ks_distance(&a, &b).unwrap() < 0.02);
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    assert!((mean - 2.0).abs() < 4.0 * (8.0f64 / 2e4).sqrt());
}
