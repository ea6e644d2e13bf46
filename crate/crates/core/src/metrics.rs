//! Distances between vectors on a common grid.

/// Total variation distance `½ Σ |p − q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "tv_distance: length mismatch");
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `max |p − q|`.
pub fn linf_distance(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "linf_distance: length mismatch");
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tv_of_disjoint_laws_is_one() {
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(tv_distance(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert_eq!(linf_distance(&[0.3, 0.7], &[0.1, 0.8]), 0.19999999999999998);
    }
}
