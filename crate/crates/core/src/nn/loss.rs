use ndarray::{Array1, Array2, ArrayView1};

pub fn log_softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = row.fold(0.0, |acc, &v| acc + (v - max).exp()).ln() + max;
    row.mapv(|v| v - lse)
}

pub fn softmax(row: ArrayView1<f64>) -> Array1<f64> {
    log_softmax(row).mapv(f64::exp)
}

/// Mean cross-entropy over the batch; returns the loss and `dL/dlogits`.
pub fn cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let batch = logits.nrows();
    assert_eq!(batch, targets.len(), "one target per row");
    let mut grad = Array2::<f64>::zeros(logits.dim());
    let mut total = 0.0;
    for (i, (row, &t)) in logits.rows().into_iter().zip(targets).enumerate() {
        let lp = log_softmax(row);
        total -= lp[t];
        let mut g = grad.row_mut(i);
        for (k, v) in lp.iter().enumerate() {
            g[k] = v.exp() / batch as f64;
        }
        g[t] -= 1.0 / batch as f64;
    }
    (total / batch as f64, grad)
}
