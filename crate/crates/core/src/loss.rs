/// Per-step mean squared error `mean((y - t)^2)` and its gradient
/// `2 (y - t) / o`.
pub fn mse(y: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(y.len(), target.len(), "mse: length mismatch");
    let o = y.len() as f64;
    let mut loss = 0.0;
    let grad = y
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let e = a - b;
            loss += e * e;
            2.0 * e / o
        })
        .collect();
    (loss / o, grad)
}

/// Softmax cross-entropy of `logits` against class `target`, with the
/// gradient `softmax(logits) - onehot(target)`.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    assert!(target < logits.len(), "cross_entropy: class out of range");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[target] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

/// Index of the largest logit, lower index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
