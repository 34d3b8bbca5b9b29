//! Univariate power series truncated at a fixed order.

use std::ops::{Add, Mul};

use num_traits::{FromPrimitive, Num};

/// Coefficients `c_0 .. c_{order-1}`; everything from `x^order` on is dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedSeries<T> {
    coeffs: Vec<T>,
}

impl<T: Num + Clone> TruncatedSeries<T> {
    pub fn zero(order: usize) -> Self {
        TruncatedSeries {
            coeffs: vec![T::zero(); order],
        }
    }

    pub fn one(order: usize) -> Self {
        let mut s = Self::zero(order);
        if order > 0 {
            s.coeffs[0] = T::one();
        }
        s
    }

    /// Builds a series from coefficients, padding or truncating to `order`.
    pub fn from_coeffs(mut coeffs: Vec<T>, order: usize) -> Self {
        coeffs.resize(order, T::zero());
        TruncatedSeries { coeffs }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeff(&self, n: usize) -> T {
        self.coeffs.get(n).cloned().unwrap_or_else(T::zero)
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<T> {
        self.coeffs
    }

    pub fn scale(&self, k: &T) -> Self {
        TruncatedSeries {
            coeffs: self.coeffs.iter().map(|c| c.clone() * k.clone()).collect(),
        }
    }

    /// `f(x) -> f(x^j)`, `j >= 1`.
    pub fn substitute_power(&self, j: usize) -> Self {
        assert!(j >= 1);
        let n = self.order();
        let mut out = Self::zero(n);
        for (i, c) in self.coeffs.iter().enumerate() {
            let k = i * j;
            if k >= n {
                break;
            }
            out.coeffs[k] = c.clone();
        }
        out
    }

    /// `f(x) -> x^k f(x)`.
    pub fn shift(&self, k: usize) -> Self {
        let n = self.order();
        let mut out = Self::zero(n);
        for i in 0..n.saturating_sub(k) {
            out.coeffs[i + k] = self.coeffs[i].clone();
        }
        out
    }
}

impl<T: Num + Clone + FromPrimitive> TruncatedSeries<T> {
    /// `exp(f)` for a series with zero constant term, via `n F_n = sum_k k f_k F_{n-k}`.
    pub fn exp(&self) -> Self {
        let n = self.order();
        assert!(
            n == 0 || self.coeffs[0].is_zero(),
            "exp needs a zero constant term"
        );
        let mut out = Self::one(n);
        for m in 1..n {
            let mut acc = T::zero();
            for k in 1..=m {
                if self.coeffs[k].is_zero() {
                    continue;
                }
                let kf = T::from_usize(k).unwrap();
                acc = acc + kf * self.coeffs[k].clone() * out.coeffs[m - k].clone();
            }
            out.coeffs[m] = acc / T::from_usize(m).unwrap();
        }
        out
    }
}

impl<T: Num + Clone> Add for &TruncatedSeries<T> {
    type Output = TruncatedSeries<T>;

    fn add(self, rhs: Self) -> TruncatedSeries<T> {
        let n = self.order().min(rhs.order());
        TruncatedSeries {
            coeffs: (0..n)
                .map(|i| self.coeffs[i].clone() + rhs.coeffs[i].clone())
                .collect(),
        }
    }
}

impl<T: Num + Clone> Mul for &TruncatedSeries<T> {
    type Output = TruncatedSeries<T>;

    fn mul(self, rhs: Self) -> TruncatedSeries<T> {
        let n = self.order().min(rhs.order());
        let mut out: TruncatedSeries<T> = TruncatedSeries::zero(n);
        for (i, a) in self.coeffs.iter().enumerate().take(n) {
            if a.is_zero() {
                continue;
            }
            for j in 0..n - i {
                out.coeffs[i + j] = out.coeffs[i + j].clone() + a.clone() * rhs.coeffs[j].clone();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use proptest::prelude::*;

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn exp_of_x_is_inverse_factorials() {
        let x = TruncatedSeries::from_coeffs(vec![rat(0, 1), rat(1, 1)], 6);
        let e = x.exp();
        let fact = [1, 1, 2, 6, 24, 120];
        for (n, f) in fact.iter().enumerate() {
            assert_eq!(e.coeff(n), rat(1, *f));
        }
    }

    #[test]
    fn geometric_series_via_exp_log() {
        // 1/(1-x) = exp(sum x^k / k)
        let n = 10;
        let log: Vec<_> = (0..n)
            .map(|k| if k == 0 { rat(0, 1) } else { rat(1, k as i64) })
            .collect();
        let g = TruncatedSeries::from_coeffs(log, n).exp();
        assert!(g.coeffs().iter().all(|c| *c == rat(1, 1)));
    }

    #[test]
    fn substitute_and_shift() {
        let s = TruncatedSeries::from_coeffs(vec![1i64, 2, 3, 4, 5], 5);
        assert_eq!(s.substitute_power(2).coeffs(), &[1, 0, 2, 0, 3]);
        assert_eq!(s.shift(2).coeffs(), &[0, 0, 1, 2, 3]);
    }

    proptest! {
        #[test]
        fn exp_has_unit_constant_term(c in proptest::collection::vec(-5i64..5, 1..8)) {
            let mut coeffs: Vec<BigRational> = c.iter().map(|&v| rat(v, 1)).collect();
            coeffs.insert(0, rat(0, 1));
            let order = coeffs.len();
            let e = TruncatedSeries::from_coeffs(coeffs, order).exp();
            prop_assert_eq!(e.coeff(0), rat(1, 1));
        }

        #[test]
        fn exp_is_a_homomorphism(
            a in proptest::collection::vec(-3i64..3, 5),
            b in proptest::collection::vec(-3i64..3, 5),
        ) {
            let mk = |v: &[i64]| {
                let mut c: Vec<BigRational> = v.iter().map(|&x| rat(x, 1)).collect();
                c[0] = rat(0, 1);
                TruncatedSeries::from_coeffs(c, 5)
            };
            let (fa, fb) = (mk(&a), mk(&b));
            let lhs = (&fa + &fb).exp();
            let rhs = &fa.exp() * &fb.exp();
            prop_assert_eq!(lhs, rhs);
        }
    }
}
