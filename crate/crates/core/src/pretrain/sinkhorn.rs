//! Balanced soft assignment of samples to prototypes (Sinkhorn–Knopp),
//! computed in the log domain.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Transport plan for `exp(scores / eps)` with uniform marginals.
///
/// `scores` is `[B, K]`. The result is non-negative, every row sums to `1/B`
/// exactly (rows are normalized last) and columns approach `1/K` as `iters`
/// grows.
pub fn sinkhorn(scores: &Tensor, iters: usize, eps: f64) -> Result<Tensor> {
    let &[b, k] = scores.shape() else {
        return Err(Error::shape(format!("sinkhorn expects [B,K] scores, got {:?}", scores.shape())));
    };
    if iters == 0 {
        return Err(Error::invalid("sinkhorn needs at least one iteration"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    if !scores.is_finite() {
        return Err(Error::NonFinite("sinkhorn scores".into()));
    }
    let logk: Vec<f64> = scores.data().iter().map(|s| s / eps).collect();
    let (log_rows, log_cols) = (-(b as f64).ln(), -(k as f64).ln());
    let mut u = vec![0.0; b];
    let mut v = vec![0.0; k];
    for _ in 0..iters {
        for j in 0..k {
            v[j] = log_cols - logsumexp((0..b).map(|i| logk[i * k + j] + u[i]));
        }
        for i in 0..b {
            u[i] = log_rows - logsumexp((0..k).map(|j| logk[i * k + j] + v[j]));
        }
    }
    Ok(Tensor::from_fn([b, k], |idx| {
        let (i, j) = (idx / k, idx % k);
        (logk[idx] + u[i] + v[j]).exp()
    }))
}

/// Row and column sums of a `[B, K]` matrix.
pub fn marginals(q: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (b, k) = (q.shape()[0], q.shape()[1]);
    let d = q.data();
    let rows = (0..b).map(|i| d[i * k..(i + 1) * k].iter().sum()).collect();
    let cols = (0..k).map(|j| (0..b).map(|i| d[i * k + j]).sum()).collect();
    (rows, cols)
}
