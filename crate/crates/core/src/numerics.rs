//! Small numerical helpers shared across modules.

use libm::{erfc, lgamma as ln_gamma};
use std::f64::consts::{PI, SQRT_2};

/// Upper tail `P(Z > x)` of the standard normal law.
pub fn normal_upper_tail(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// `P(a < Z <= b)` for a standard normal `Z`, evaluated on whichever tail keeps
/// the subtraction well conditioned.
pub fn normal_interval_mass(a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let m = if a >= 0.0 {
        normal_upper_tail(a) - normal_upper_tail(b)
    } else if b <= 0.0 {
        normal_upper_tail(-b) - normal_upper_tail(-a)
    } else {
        1.0 - normal_upper_tail(b) - normal_upper_tail(-a)
    };
    m.max(0.0)
}

/// Poisson probability mass `e^{-m} m^k / k!`.
pub fn poisson_pmf(k: u64, mean: f64) -> f64 {
    if mean == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    let kf = k as f64;
    (kf * mean.ln() - mean - ln_gamma(kf + 1.0)).exp()
}

/// Numerically stable `log Σ exp(v)`; returns `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Gauss–Hermite nodes and weights for the weight function `e^{-x^2}`.
///
/// Nodes are returned in decreasing order. Newton iteration on the
/// orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "at least one node");
    let pim4 = PI.powf(-0.25);
    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        if n % 2 == 1 && i == m - 1 {
            z = 0.0;
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Composite trapezoid weights for `n` equally spaced points with spacing `h`.
pub fn trapezoid_weights(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n];
    if n >= 1 {
        w[0] = 0.5 * h;
        w[n - 1] = 0.5 * h;
    }
    if n == 1 {
        w[0] = 0.0;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn double_factorial_odd(k: u32) -> f64 {
        (1..=k).step_by(2).map(|v| v as f64).product()
    }

    #[test]
    fn hermite_rule_integrates_even_moments() {
        for &n in &[5usize, 20, 33] {
            let (x, w) = gauss_hermite(n);
            for p in (0..2 * n as u32).step_by(2) {
                // ∫ x^p e^{-x²} dx = (p-1)!! √π / 2^{p/2}
                let exact = if p == 0 {
                    PI.sqrt()
                } else {
                    double_factorial_odd(p - 1) * PI.sqrt() / 2f64.powi(p as i32 / 2)
                };
                let got: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(p as i32)).sum();
                assert!(
                    (got - exact).abs() <= 1e-10 * exact.max(1.0),
                    "n={n} p={p}: {got} vs {exact}"
                );
            }
            let odd: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(3)).sum();
            assert!(odd.abs() < 1e-12);
        }
    }

    #[test]
    fn odd_rule_has_a_center_node() {
        let (x, _) = gauss_hermite(33);
        assert_eq!(x[16], 0.0);
        assert!(x.windows(2).all(|p| p[0] > p[1]));
    }

    #[test]
    fn normal_masses_match_cdf_differences() {
        let cdf = |x: f64| 1.0 - normal_upper_tail(x);
        let c = normal_interval_mass(-1.0, 1.0);
        assert!((c - 0.682_689_492_137_085_9).abs() < 1e-14, "{c:e}");
        assert!((normal_interval_mass(0.2, 0.7) - (cdf(0.7) - cdf(0.2))).abs() < 1e-15);
        // deep tail keeps relative accuracy
        let t = normal_interval_mass(10.0, f64::INFINITY);
        assert!((t / 7.619_853_024_160_593e-24 - 1.0).abs() < 1e-12);
        assert_eq!(normal_interval_mass(1.0, 1.0), 0.0);
    }

    #[test]
    fn poisson_pmf_known_values() {
        assert!((poisson_pmf(0, 1.0) / (-1f64).exp() - 1.0).abs() < 1e-15);
        assert!((poisson_pmf(3, 2.0) - 8.0 / 6.0 * (-2f64).exp()).abs() < 1e-15);
        assert_eq!(poisson_pmf(0, 0.0), 1.0);
        assert_eq!(poisson_pmf(2, 0.0), 0.0);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = log_sum_exp([1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp([f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
