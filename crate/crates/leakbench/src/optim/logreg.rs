//! Deterministic convex solver for the multinomial logistic-regression
//! leakage probes: full-batch gradient descent with backtracking line search,
//! zero initialization, l2 regularization on the feature weights (intercept
//! row unregularized).

use crate::autodiff::{matmul, matmul_at_b};
use crate::error::{Error, Result};

/// Solver knobs for probe fits.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSolverConfig {
    pub l2_strength: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for ProbeSolverConfig {
    fn default() -> Self {
        ProbeSolverConfig { l2_strength: 1e-4, max_iters: 2000, grad_tol: 1e-7 }
    }
}

/// Fitted probe: weight matrix `[d+1, k]` (last row is the intercept), plus
/// convergence diagnostics. `converged == false` means the gradient-norm
/// target was not reached within `max_iters`; reports carry that flag.
#[derive(Debug, Clone)]
pub struct ProbeFit {
    pub weights: Vec<f64>,
    pub dim: usize,
    pub classes: usize,
    pub converged: bool,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub objective_trace: Vec<f64>,
}

/// Mean cross-entropy plus l2 penalty, and its gradient, at `w [d+1, k]`.
/// `xa` is the design matrix `[n, d+1]` with the trailing ones column.
fn objective_and_grad(
    xa: &[f64],
    n: usize,
    d1: usize,
    labels: &[usize],
    k: usize,
    w: &[f64],
    l2: f64,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let logits = matmul(xa, w, n, d1, k);
    let mut nll = 0.0;
    let mut resid = if want_grad { vec![0.0; n * k] } else { Vec::new() };
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|x| (x - m).exp()).sum();
        let lse = m + denom.ln();
        nll += lse - row[labels[i]];
        if want_grad {
            for j in 0..k {
                let p = (row[j] - m).exp() / denom;
                resid[i * k + j] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
            }
        }
    }
    let mut obj = nll / n as f64;
    // Regularize feature rows only; the intercept row is index d1-1.
    let feat = &w[..(d1 - 1) * k];
    obj += 0.5 * l2 * feat.iter().map(|v| v * v).sum::<f64>();

    if !want_grad {
        return (obj, None);
    }
    let mut grad = matmul_at_b(xa, &resid, n, d1, k);
    for (gi, wi) in grad[..(d1 - 1) * k].iter_mut().zip(feat) {
        *gi += l2 * wi;
    }
    (obj, Some(grad))
}

/// Fit an l2-regularized multinomial logistic regression on `x [n, d]` with
/// integer labels in `[0, k)`.
///
/// Deterministic: zero init and a deterministic Armijo line search, so the
/// result is a pure function of the inputs.
pub fn fit_multinomial_logreg(
    x: &[f64],
    n: usize,
    d: usize,
    labels: &[usize],
    k: usize,
    cfg: &ProbeSolverConfig,
) -> Result<ProbeFit> {
    if x.len() != n * d || labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "features {}x{d} with {} labels do not match data of length {}",
            n,
            labels.len(),
            x.len()
        )));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("need at least {k} samples, got {n}")));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "probe features".into() });
    }
    let mut seen = vec![false; k];
    for &l in labels {
        if l >= k {
            return Err(Error::InvalidArgument(format!(
                "class label {l} out of range for {k} classes"
            )));
        }
        seen[l] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::InvalidArgument(format!(
            "class {missing} has no training samples"
        )));
    }

    // Design matrix with a trailing ones column for the intercept.
    let d1 = d + 1;
    let mut xa = vec![1.0; n * d1];
    for i in 0..n {
        xa[i * d1..i * d1 + d].copy_from_slice(&x[i * d..(i + 1) * d]);
    }

    let mut w = vec![0.0; d1 * k];
    let mut trace = Vec::with_capacity(cfg.max_iters + 1);
    let (mut obj, grad) =
        objective_and_grad(&xa, n, d1, labels, k, &w, cfg.l2_strength, true);
    let mut grad = grad.expect("requested");
    trace.push(obj);

    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = l2_norm(&grad);
    const ARMIJO_C: f64 = 1e-4;

    for iter in 0..cfg.max_iters {
        if grad_norm < cfg.grad_tol {
            converged = true;
            break;
        }
        iterations = iter + 1;
        let sq = grad_norm * grad_norm;
        let mut step = 1.0;
        let mut trial = vec![0.0; w.len()];
        let mut accepted = false;
        for _ in 0..60 {
            for ((t, wv), gv) in trial.iter_mut().zip(&w).zip(&grad) {
                *t = wv - step * gv;
            }
            let (trial_obj, _) =
                objective_and_grad(&xa, n, d1, labels, k, &trial, cfg.l2_strength, false);
            if trial_obj <= obj - ARMIJO_C * step * sq {
                accepted = true;
                obj = trial_obj;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // Step collapsed to rounding level; nothing more to gain.
            break;
        }
        std::mem::swap(&mut w, &mut trial);
        trace.push(obj);
        let (_, g) = objective_and_grad(&xa, n, d1, labels, k, &w, cfg.l2_strength, true);
        grad = g.expect("requested");
        grad_norm = l2_norm(&grad);
    }
    if grad_norm < cfg.grad_tol {
        converged = true;
    }

    Ok(ProbeFit {
        weights: w,
        dim: d,
        classes: k,
        converged,
        iterations,
        final_grad_norm: grad_norm,
        objective_trace: trace,
    })
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Predicted class per row of `x [n, d]`; ties break toward the lowest index.
pub fn probe_predict(fit: &ProbeFit, x: &[f64], n: usize) -> Vec<usize> {
    let d = fit.dim;
    let k = fit.classes;
    assert_eq!(x.len(), n * d, "feature matrix does not match fit dimension");
    let mut preds = Vec::with_capacity(n);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for j in 0..k {
            let mut s = fit.weights[d * k + j]; // intercept row
            for (fi, xv) in row.iter().enumerate() {
                s += xv * fit.weights[fi * k + j];
            }
            if s > best_score {
                best_score = s;
                best = j;
            }
        }
        preds.push(best);
    }
    preds
}

/// Fraction of argmax-correct predictions on a held-out set.
pub fn probe_accuracy(fit: &ProbeFit, x: &[f64], n: usize, labels: &[usize]) -> f64 {
    assert_eq!(labels.len(), n);
    let preds = probe_predict(fit, x, n);
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(rng: &mut ChaCha8Rng, mean: f64, sigma: f64) -> f64 {
        // Box-Muller.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        mean + sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    #[test]
    fn separable_classes_reach_perfect_held_in_accuracy() {
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for i in 0..50 {
            x.push(-10.0 + 0.01 * i as f64);
            labels.push(0usize);
            x.push(10.0 - 0.01 * i as f64);
            labels.push(1usize);
        }
        let fit =
            fit_multinomial_logreg(&x, 100, 1, &labels, 2, &ProbeSolverConfig::default()).unwrap();
        assert_eq!(probe_accuracy(&fit, &x, 100, &labels), 1.0);
    }

    #[test]
    fn symmetric_data_puts_boundary_at_zero() {
        let mut x = Vec::new();
        let mut labels = Vec::new();
        let mut rng = stream_rng(5, "test/logreg-sym");
        for _ in 0..200 {
            let v: f64 = rng.gen_range(0.2..3.0);
            x.push(v);
            labels.push(1usize);
            x.push(-v);
            labels.push(0usize);
        }
        let fit =
            fit_multinomial_logreg(&x, 400, 1, &labels, 2, &ProbeSolverConfig::default()).unwrap();
        // Decision boundary where class logits tie: (w0-w1)x + (b0-b1) = 0.
        let (w0, w1) = (fit.weights[0], fit.weights[1]);
        let (b0, b1) = (fit.weights[2], fit.weights[3]);
        let boundary = -(b0 - b1) / (w0 - w1);
        assert!(boundary.abs() < 1e-6, "boundary {boundary}");
    }

    #[test]
    fn overlapping_gaussians_hit_the_bayes_rate() {
        // Two 1-D Gaussians at ±1, σ=1: Bayes accuracy is Φ(1) ≈ 0.8413.
        let mut rng = stream_rng(17, "test/logreg-bayes");
        let draw = |rng: &mut ChaCha8Rng, n: usize| {
            let mut x = Vec::with_capacity(n);
            let mut l = Vec::with_capacity(n);
            for i in 0..n {
                let cls = i % 2;
                let mean = if cls == 0 { -1.0 } else { 1.0 };
                x.push(gaussian(rng, mean, 1.0));
                l.push(cls);
            }
            (x, l)
        };
        let (x_train, l_train) = draw(&mut rng, 20_000);
        let (x_test, l_test) = draw(&mut rng, 20_000);
        let fit = fit_multinomial_logreg(
            &x_train,
            20_000,
            1,
            &l_train,
            2,
            &ProbeSolverConfig::default(),
        )
        .unwrap();
        let acc = probe_accuracy(&fit, &x_test, 20_000, &l_test);
        let bayes = 0.8413447460685429;
        assert!((acc - bayes).abs() < 0.02, "accuracy {acc} vs Bayes {bayes}");
    }

    #[test]
    fn objective_decreases_monotonically() {
        let mut rng = stream_rng(23, "test/logreg-mono");
        let n = 120;
        let x: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<usize> = (0..n).map(|i| (x[i * 2] + 0.3 * x[i * 2 + 1] > 0.0) as usize).collect();
        let fit =
            fit_multinomial_logreg(&x, n, 2, &labels, 2, &ProbeSolverConfig::default()).unwrap();
        for pair in fit.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0], "objective rose: {} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn fit_is_invariant_to_sample_order() {
        let mut rng = stream_rng(31, "test/logreg-order");
        let n = 300;
        let d = 3;
        let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let labels: Vec<usize> = (0..n).map(|i| (x[i * d] > 0.2) as usize).collect();
        let fit = fit_multinomial_logreg(&x, n, d, &labels, 2, &ProbeSolverConfig::default()).unwrap();

        // Reverse the sample order.
        let mut x_rev = vec![0.0; n * d];
        let mut l_rev = vec![0usize; n];
        for i in 0..n {
            x_rev[(n - 1 - i) * d..(n - i) * d].copy_from_slice(&x[i * d..(i + 1) * d]);
            l_rev[n - 1 - i] = labels[i];
        }
        let fit_rev =
            fit_multinomial_logreg(&x_rev, n, d, &l_rev, 2, &ProbeSolverConfig::default()).unwrap();
        let max_dev = fit
            .weights
            .iter()
            .zip(&fit_rev.weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max)
            ;
        assert!(max_dev < 1e-8, "weights moved {max_dev} under shuffling");
    }

    #[test]
    fn stronger_l2_never_grows_the_weights() {
        let mut rng = stream_rng(37, "test/logreg-l2");
        let n = 200;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<usize> = x.iter().map(|&v| (v > 0.0) as usize).collect();
        let mut last_norm = f64::INFINITY;
        for l2 in [1e-6, 1e-4, 1e-2, 1e-1, 1.0] {
            let cfg = ProbeSolverConfig { l2_strength: l2, ..Default::default() };
            let fit = fit_multinomial_logreg(&x, n, 1, &labels, 2, &cfg).unwrap();
            let norm = l2_norm(&fit.weights);
            assert!(norm <= last_norm + 1e-9, "l2 {l2} grew weights to {norm}");
            last_norm = norm;
        }
    }

    #[test]
    fn absent_class_is_an_error() {
        let x = vec![0.1, 0.2, 0.3, 0.4];
        let labels = vec![0usize, 0, 0, 0];
        let err = fit_multinomial_logreg(&x, 4, 1, &labels, 2, &ProbeSolverConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn non_finite_features_are_an_error() {
        let x = vec![0.1, f64::NAN, 0.3, 0.4];
        let labels = vec![0usize, 1, 0, 1];
        assert!(fit_multinomial_logreg(&x, 4, 1, &labels, 2, &ProbeSolverConfig::default()).is_err());
    }

    #[test]
    fn ties_break_toward_lowest_class() {
        let fit = ProbeFit {
            weights: vec![0.0; 2 * 3],
            dim: 1,
            classes: 3,
            converged: true,
            iterations: 0,
            final_grad_norm: 0.0,
            objective_trace: vec![],
        };
        assert_eq!(probe_predict(&fit, &[1.0, -4.0], 2), vec![0, 0]);
    }

    #[test]
    fn adamw_reaches_the_same_optimum_on_the_convex_objective() {
        use crate::optim::adamw::{AdamW, AdamWConfig};
        use crate::autodiff::Tensor;

        let mut rng = stream_rng(41, "test/logreg-adamw");
        let n = 60;
        let d = 2;
        let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|i| (x[i * d] + x[i * d + 1] > 0.1) as usize).collect();
        let cfg = ProbeSolverConfig { l2_strength: 1e-2, ..Default::default() };
        let fit = fit_multinomial_logreg(&x, n, d, &labels, 2, &cfg).unwrap();
        let best_obj = *fit.objective_trace.last().unwrap();

        // Same objective minimized by AdamW (wd = 0; the l2 term stays inside
        // the objective so the two optimizers see the same function).
        let d1 = d + 1;
        let mut xa = vec![1.0; n * d1];
        for i in 0..n {
            xa[i * d1..i * d1 + d].copy_from_slice(&x[i * d..(i + 1) * d]);
        }
        let mut w = Tensor::zeros(vec![d1, 2]);
        let mut opt = AdamW::new(AdamWConfig::new(0.05, 0.0), &[d1 * 2]);
        let mut final_obj = f64::INFINITY;
        for _ in 0..4000 {
            let (obj, grad) =
                objective_and_grad(&xa, n, d1, &labels, 2, w.data(), cfg.l2_strength, true);
            final_obj = obj;
            let g = grad.unwrap();
            let grads: Vec<Option<&[f64]>> = vec![Some(&g)];
            opt.step(&mut [("w", &mut w)], &grads).unwrap();
        }
        assert!(
            (final_obj - best_obj).abs() < 1e-6,
            "AdamW {final_obj} vs probe solver {best_obj}"
        );
    }
}
