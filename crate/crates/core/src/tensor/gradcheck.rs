//! Central finite-difference gradient checking.
//!
//! The oracle perturbs every input element of an `f64` copy of the graph
//! inputs and evaluates the loss twice per element. Model code is generic
//! over [`crate::scalar::Scalar`], so the analytic pass under test can run
//! in either precision against the same `f64` differences.

use ndarray::ArrayD;

/// Central finite differences of `f` at `inputs`, one array per input.
///
/// `f` must be a pure function of its arguments (rebuild the graph inside).
pub fn finite_diff<F>(inputs: &[ArrayD<f64>], eps: f64, mut f: F) -> Vec<ArrayD<f64>>
where
    F: FnMut(&[ArrayD<f64>]) -> f64,
{
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = ArrayD::<f64>::zeros(inputs[k].raw_dim());
        let n = inputs[k].len();
        for j in 0..n {
            let orig = work[k].as_slice_mut().expect("standard layout")[j];
            work[k].as_slice_mut().expect("standard layout")[j] = orig + eps;
            let fp = f(&work);
            work[k].as_slice_mut().expect("standard layout")[j] = orig - eps;
            let fm = f(&work);
            work[k].as_slice_mut().expect("standard layout")[j] = orig;
            g.as_slice_mut().expect("standard layout")[j] = (fp - fm) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// Worst elementwise relative error between analytic and finite-difference
/// gradients: `|a - fd| / max(|a|, |fd|, floor)`.
pub fn max_rel_err(analytic: &[ArrayD<f64>], fd: &[ArrayD<f64>], floor: f64) -> f64 {
    assert_eq!(analytic.len(), fd.len(), "gradient list length mismatch");
    let mut worst = 0.0f64;
    for (a, d) in analytic.iter().zip(fd.iter()) {
        assert_eq!(a.shape(), d.shape(), "gradient shape mismatch");
        for (&av, &dv) in a.iter().zip(d.iter()) {
            let denom = av.abs().max(dv.abs()).max(floor);
            let rel = (av - dv).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
