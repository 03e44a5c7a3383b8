//! Log-space binomial coefficients.
//!
//! Every coefficient used by the model goes through `ln_choose` so that
//! ratios stay finite for files with thousands of pieces.

use statrs::function::gamma::ln_gamma;

/// `ln C(n, k)` for integer arguments, `None` when the coefficient is zero
/// (negative argument or `k > n`).
pub fn ln_choose(n: i64, k: i64) -> Option<f64> {
    if n < 0 || k < 0 || k > n {
        return None;
    }
    Some(ln_factorial(n as u64) - ln_factorial(k as u64) - ln_factorial((n - k) as u64))
}

/// `ln C(n, k)` with a real-valued upper argument, evaluated through the
/// Gamma function. `None` when `k > n`.
pub fn ln_choose_real(n: f64, k: u64) -> Option<f64> {
    let kf = k as f64;
    if n < 0.0 || kf > n {
        return None;
    }
    Some(ln_gamma(n + 1.0) - ln_gamma(kf + 1.0) - ln_gamma(n - kf + 1.0))
}

fn ln_factorial(n: u64) -> f64 {
    if n < 2 {
        0.0
    } else {
        ln_gamma(n as f64 + 1.0)
    }
}

/// Table of `ln n!` for `n = 0..=max`, for hot loops over a fixed file size.
#[derive(Debug, Clone)]
pub struct LnFactorials(Vec<f64>);

impl LnFactorials {
    pub fn new(max: usize) -> Self {
        let mut table = Vec::with_capacity(max + 1);
        let mut acc = 0.0;
        table.push(0.0);
        for n in 1..=max {
            acc += (n as f64).ln();
            table.push(acc);
        }
        Self(table)
    }

    pub fn max(&self) -> usize {
        self.0.len() - 1
    }

    /// `ln C(n, k)`, `None` outside the support. Panics if `n` exceeds the table.
    pub fn ln_choose(&self, n: i64, k: i64) -> Option<f64> {
        if n < 0 || k < 0 || k > n {
            return None;
        }
        let t = &self.0;
        Some(t[n as usize] - t[k as usize] - t[(n - k) as usize])
    }
}

/// Plain binomial coefficient as `f64`; zero outside the support.
pub fn choose(n: i64, k: i64) -> f64 {
    ln_choose(n, k).map_or(0.0, f64::exp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact(n: u64, k: u64) -> f64 {
        (0..k).fold(1.0, |acc, t| acc * (n - t) as f64 / (t + 1) as f64)
    }

    #[test]
    fn matches_product_form() {
        for n in 0..40u64 {
            for k in 0..=n {
                let want = exact(n, k);
                let got = choose(n as i64, k as i64);
                assert!((got - want).abs() <= 1e-9 * want, "C({n},{k}) {got} vs {want}");
            }
        }
    }

    #[test]
    fn zero_outside_support() {
        assert_eq!(choose(5, -1), 0.0);
        assert_eq!(choose(5, 6), 0.0);
        assert_eq!(choose(-2, 0), 0.0);
        assert!(ln_choose_real(2.5, 3).is_none());
    }

    #[test]
    fn real_argument_agrees_on_integers() {
        for n in 1..30u64 {
            for k in 0..=n {
                let a = ln_choose_real(n as f64, k).unwrap();
                let b = ln_choose(n as i64, k as i64).unwrap();
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn table_agrees_with_gamma() {
        let t = LnFactorials::new(300);
        for n in [0i64, 1, 7, 60, 299, 300] {
            for k in [0i64, n.min(1), n / 2, n] {
                let a = t.ln_choose(n, k).unwrap();
                let b = ln_choose(n, k).unwrap();
                assert!((a - b).abs() < 1e-8 * b.abs().max(1.0));
            }
        }
        assert!(t.ln_choose(3, 4).is_none());
    }

    #[test]
    fn large_arguments_stay_finite() {
        let v = ln_choose(10_000, 5_000).unwrap();
        assert!(v.is_finite() && v > 6900.0);
    }
}
