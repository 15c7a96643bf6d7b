/// Reference valley finder written from the definition, 1-based. Endpoints
/// are always kept; runs of tied interior valleys keep their first index.
pub fn reference_valleys(alpha: &[f64]) -> Vec<usize> {
    let n = alpha.len();
    let interior = |t: usize| t > 1 && t < n && alpha[t - 1] <= alpha[t - 2] && alpha[t - 1] <= alpha[t];
    let mut kept = vec![1];
    for t in 2..n {
        if interior(t) && !interior(t - 1) {
            kept.push(t);
        }
    }
    if n > 1 {
        kept.push(n);
    }
    kept
}

/// Scalar-loop recomputation of the normalized weighted mean per segment.
pub fn reference_aggregate(h: &[Vec<f64>], alpha: &[f64], valleys1: &[usize]) -> Vec<Vec<f64>> {
    let n = alpha.len();
    let d = h[0].len();
    let mut out = Vec::new();
    if valleys1.len() == 1 {
        let mut num = vec![0.0; d];
        for j in 0..d {
            num[j] = h[0][j];
        }
        out.push(num);
        return out;
    }
    for w in valleys1.windows(2) {
        let (start, end) = (w[0], (w[1] + 1).min(n));
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for t in start..=end {
            den += alpha[t - 1];
            for j in 0..d {
                num[j] += alpha[t - 1] * h[t - 1][j];
            }
        }
        out.push(num.into_iter().map(|v| v / den).collect());
    }
    out
}

