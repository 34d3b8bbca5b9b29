//! Multivariate polynomials truncated to a box of exponents.
//!
//! Only monomials `x^e` with `e_k <= cap_k` for every variable are kept.
//! Products of polynomials with non-negative exponents never move mass from
//! outside the box back inside, so coefficients inside the box are exact.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MultiPoly {
    caps: Vec<usize>,
    strides: Vec<usize>,
    coeffs: Vec<f64>,
}

impl MultiPoly {
    /// The zero polynomial on the box `caps`, failing if the box has more
    /// than `max_terms` monomials.
    pub fn zero(caps: &[usize], max_terms: u64) -> Result<Self> {
        let mut strides = Vec::with_capacity(caps.len());
        let mut len: u64 = 1;
        for &c in caps {
            strides.push(len as usize);
            len = len.saturating_mul(c as u64 + 1);
        }
        if len > max_terms {
            return Err(Error::ComplexityExceeded {
                what: "polynomial box",
                needed: len,
                budget: max_terms,
            });
        }
        Ok(MultiPoly {
            caps: caps.to_vec(),
            strides,
            coeffs: vec![0.0; len as usize],
        })
    }

    pub fn one(caps: &[usize], max_terms: u64) -> Result<Self> {
        let mut p = Self::zero(caps, max_terms)?;
        p.coeffs[0] = 1.0;
        Ok(p)
    }

    pub fn n_vars(&self) -> usize {
        self.caps.len()
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    fn index(&self, exps: &[usize]) -> Option<usize> {
        let mut idx = 0;
        for (k, &e) in exps.iter().enumerate() {
            if e > self.caps[k] {
                return None;
            }
            idx += e * self.strides[k];
        }
        Some(idx)
    }

    fn exponents(&self, mut idx: usize) -> Vec<usize> {
        self.caps
            .iter()
            .map(|&c| {
                let e = idx % (c + 1);
                idx /= c + 1;
                e
            })
            .collect()
    }

    /// Coefficient of `x^exps` (zero outside the box).
    pub fn coeff(&self, exps: &[usize]) -> f64 {
        self.index(exps).map_or(0.0, |i| self.coeffs[i])
    }

    /// Adds `c x^exps`; monomials outside the box are dropped.
    pub fn add_term(&mut self, exps: &[usize], c: f64) {
        if let Some(i) = self.index(exps) {
            self.coeffs[i] += c;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.coeffs {
            *v *= c;
        }
    }

    pub fn add_assign(&mut self, other: &MultiPoly) {
        assert_eq!(self.caps, other.caps);
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += b;
        }
    }

    pub fn mul(&self, other: &MultiPoly) -> MultiPoly {
        assert_eq!(self.caps, other.caps);
        let mut out = MultiPoly {
            caps: self.caps.clone(),
            strides: self.strides.clone(),
            coeffs: vec![0.0; self.coeffs.len()],
        };
        let other_terms: Vec<(Vec<usize>, f64)> = other
            .coeffs
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0.0)
            .map(|(i, &c)| (other.exponents(i), c))
            .collect();
        for (i, &a) in self.coeffs.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let ea = self.exponents(i);
            'terms: for (eb, b) in &other_terms {
                let mut idx = 0;
                for k in 0..self.caps.len() {
                    let e = ea[k] + eb[k];
                    if e > self.caps[k] {
                        continue 'terms;
                    }
                    idx += e * self.strides[k];
                }
                out.coeffs[idx] += a * b;
            }
        }
        out
    }

    /// Multiplies in place by `1 + sum_k a_k x_k`.
    pub fn mul_linear(&mut self, a: &[f64]) {
        assert_eq!(a.len(), self.caps.len());
        // Walk indices downward so each source coefficient is read before
        // it is overwritten.
        for idx in (0..self.coeffs.len()).rev() {
            let mut acc = self.coeffs[idx];
            let mut rest = idx;
            for k in 0..self.caps.len() {
                let e = rest % (self.caps[k] + 1);
                rest /= self.caps[k] + 1;
                if e > 0 && a[k] != 0.0 {
                    acc += a[k] * self.coeffs[idx - self.strides[k]];
                }
            }
            self.coeffs[idx] = acc;
        }
    }

    /// Multiplies in place by `sum_j c_j x_k^j`.
    pub fn mul_univariate(&mut self, k: usize, c: &[f64]) {
        let cap = self.caps[k];
        let stride = self.strides[k];
        for idx in (0..self.coeffs.len()).rev() {
            let e = (idx / stride) % (cap + 1);
            let mut acc = 0.0;
            for (j, &cj) in c.iter().enumerate().take(e + 1) {
                if cj != 0.0 {
                    acc += cj * self.coeffs[idx - j * stride];
                }
            }
            self.coeffs[idx] = acc;
        }
    }

    /// `exp(self)` for a polynomial with zero constant term. Terminates
    /// because powers leave the box after at most `sum caps` steps.
    pub fn exp(&self) -> MultiPoly {
        assert!(
            self.coeffs.first().is_none_or(|&c| c == 0.0),
            "exp needs a zero constant term"
        );
        let mut out = MultiPoly {
            caps: self.caps.clone(),
            strides: self.strides.clone(),
            coeffs: vec![0.0; self.coeffs.len()],
        };
        out.coeffs[0] = 1.0;
        let mut power = out.clone();
        let max_degree: usize = self.caps.iter().sum();
        for k in 1..=max_degree {
            power = power.mul(self);
            power.scale(1.0 / k as f64);
            if power.coeffs.iter().all(|&c| c == 0.0) {
                break;
            }
            out.add_assign(&power);
        }
        out
    }
}
