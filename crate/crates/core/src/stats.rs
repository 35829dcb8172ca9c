//! Small statistics helpers: quantiles, means and fractional ranks.

use crate::scalar::Real;

/// Quantile by linear interpolation between order statistics, using the
/// `q * (n - 1)` index convention. Returns `None` for empty input.
pub fn quantile<T: Real>(values: &[T], q: f64) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::lit(pos - lo as f64);
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

pub fn mean<T: Real>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().copied().sum::<T>() / T::from_usize_lossy(values.len()))
    }
}

/// 1-based fractional ranks; tied values share the average of their ranks.
pub fn fractional_ranks<T: Real>(values: &[T]) -> Vec<T> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![T::zero(); values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = T::lit((start + 1 + end) as f64 / 2.0);
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}
