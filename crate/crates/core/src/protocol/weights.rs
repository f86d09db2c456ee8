/// Aggregation weights `w_j ∝ (τ_j + 1 + max(√t, ‖g^{t−1}‖))^{−a}`,
/// normalized; uniform when every stamp exceeds `uniform_after` or when all
/// staleness values coincide.
pub fn adaptive_weights(
    staleness: &[usize],
    t: usize,
    last_grad_norm: f64,
    exponent: f64,
    uniform_after: usize,
    stamps: &[usize],
) -> Vec<f64> {
    let j = staleness.len();
    if j == 0 {
        return Vec::new();
    }
    let uniform = vec![1.0 / j as f64; j];
    if stamps.iter().all(|&s| s > uniform_after) || staleness.iter().all(|&s| s == staleness[0]) {
        return uniform;
    }
    let shift = 1.0 + (t as f64).sqrt().max(last_grad_norm);
    let raw: Vec<f64> = staleness.iter().map(|&s| (s as f64 + shift).powf(-exponent)).collect();
    let total: f64 = raw.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return uniform;
    }
    raw.iter().map(|w| w / total).collect()
}
