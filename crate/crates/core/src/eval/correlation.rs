use super::EvalError;

fn check(xs: &[f64], ys: &[f64], min: usize) -> Result<(), EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < min {
        return Err(EvalError::TooShort { len: xs.len(), min });
    }
    Ok(())
}

/// Pearson correlation; `Ok(None)` when either input has zero variance.
pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> Result<Option<f64>, EvalError> {
    check(xs, ys, 2)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; `Ok(None)` when
/// either list is constant.
pub fn spearman_rank_correlation(xs: &[f64], ys: &[f64]) -> Result<Option<f64>, EvalError> {
    check(xs, ys, 3)?;
    pearson_correlation(&average_ranks(xs), &average_ranks(ys))
}
