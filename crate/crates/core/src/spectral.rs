//! The orthonormal eigenbasis `f_{d,beta}` of the likelihood ratio.
//!
//! `L_d(t, t') = sum_beta s^{|beta|-1} f_{d,beta}(t) f_{d,beta}(t')`, where
//! `f` depends on `lambda` only. At depth 1 the basis consists of Charlier
//! polynomials in the root degree. Deeper levels follow from
//!
//! ```text
//! f_{d+1,gamma}(t) = sqrt(prod_k gamma_k!) [x^gamma]
//!     exp(-sqrt(lambda) x_0) prod_tau (1 + sum_k x_k f_{d,beta_k}(tau) / sqrt(lambda))^{N_tau}
//! ```
//!
//! with one formal variable per distinct child `beta_k` of `gamma` (of
//! multiplicity `gamma_k`) and `x_0` the variable of the trivial child, if
//! present. Variables outside the support of `gamma` drop out of the
//! coefficient, which keeps the extraction finite.

use dashmap::DashMap;
use statrs::function::factorial::{binomial, ln_factorial};

use crate::counting::{count_depth, phi_eval};
use crate::error::{Error, Result};
use crate::model::{ModelParams, TreePair};
use crate::multipoly::MultiPoly;
use crate::trees::{enumerate, Tree};

use num_traits::ToPrimitive;

/// Default cap on the number of monomials in one coefficient extraction.
pub const DEFAULT_MAX_TERMS: u64 = 1 << 20;

/// `f_{1,m}(ell) = sqrt(m!) [x^m] e^{-x sqrt(lambda)} (1 + x/sqrt(lambda))^ell`.
pub fn charlier(m: usize, ell: usize, lambda: f64) -> f64 {
    let sl = lambda.sqrt();
    let half_ln_mfact = 0.5 * ln_factorial(m as u64);
    let mut acc = 0.0;
    for j in 0..=m.min(ell) {
        let k = m - j;
        let ln_mag = half_ln_mfact + k as f64 * sl.ln() - ln_factorial(k as u64)
            + binomial(ell as u64, j as u64).ln()
            - 0.5 * j as f64 * lambda.ln();
        let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
        acc += sign * ln_mag.exp();
    }
    acc
}

/// Memoized eigenvector values for one `lambda`.
pub struct EigenTable {
    lambda: f64,
    sqrt_lambda: f64,
    max_terms: u64,
    memo: DashMap<(usize, u32, u32), f64>,
}

impl EigenTable {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::invalid(format!("lambda must be > 0, got {lambda}")));
        }
        Ok(EigenTable {
            lambda,
            sqrt_lambda: lambda.sqrt(),
            max_terms: DEFAULT_MAX_TERMS,
            memo: DashMap::new(),
        })
    }

    pub fn with_max_terms(mut self, max_terms: u64) -> Self {
        self.max_terms = max_terms;
        self
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `f_{d,beta}(t)`.
    pub fn value(&self, d: usize, beta: Tree, t: Tree) -> Result<f64> {
        for (name, x) in [("basis tree", beta), ("tree", t)] {
            if x.depth() > d {
                return Err(Error::invalid(format!(
                    "{name} {x} has depth {} > {d}",
                    x.depth()
                )));
            }
        }
        self.value_unchecked(d, beta, t)
    }

    fn value_unchecked(&self, d: usize, beta: Tree, t: Tree) -> Result<f64> {
        if beta.is_trivial() {
            return Ok(1.0);
        }
        if d == 1 {
            return Ok(charlier(beta.degree(), t.degree(), self.lambda));
        }
        let key = (d, beta.id(), t.id());
        if let Some(v) = self.memo.get(&key) {
            return Ok(*v);
        }
        let vars = beta.children();
        let caps: Vec<usize> = vars.iter().map(|&(_, g)| g).collect();
        let mut poly = MultiPoly::one(&caps, self.max_terms)?;
        if let Some(k) = vars.iter().position(|(b, _)| b.is_trivial()) {
            let series: Vec<f64> = (0..=caps[k])
                .map(|j| {
                    let mag = (j as f64 * self.sqrt_lambda.ln() - ln_factorial(j as u64)).exp();
                    if j % 2 == 0 {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect();
            poly.mul_univariate(k, &series);
        }
        let mut a = vec![0.0; vars.len()];
        for &(tau, n) in t.children() {
            for (k, &(b, _)) in vars.iter().enumerate() {
                a[k] = self.value_unchecked(d - 1, b, tau)? / self.sqrt_lambda;
            }
            for _ in 0..n {
                poly.mul_linear(&a);
            }
        }
        let norm: f64 = caps.iter().map(|&g| 0.5 * ln_factorial(g as u64)).sum();
        let v = norm.exp() * poly.coeff(&caps);
        self.memo.insert(key, v);
        Ok(v)
    }
}

/// One-shot `f_{d,beta}(t)`; use an [`EigenTable`] to share work.
pub fn eigen(d: usize, beta: Tree, t: Tree, lambda: f64) -> Result<f64> {
    EigenTable::new(lambda)?.value(d, beta, t)
}

/// A truncated spectral sum for `L_d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralLr {
    /// `sum_{|beta| <= B} s^{|beta|-1} f(t) f(t')`; may be non-positive.
    pub value: f64,
    /// `sum_{n <= B} A_{d,n} s^{2(n-1)}`.
    pub truncation_weight: f64,
    /// `Phi_d(s^2)`, the untruncated weight.
    pub full_weight: f64,
    pub positive: bool,
}

/// `L_d` from the basis trees of size at most `max_basis_size`.
pub fn spectral_lr(
    params: ModelParams,
    table: &EigenTable,
    pair: &TreePair,
    max_basis_size: usize,
) -> Result<SpectralLr> {
    if max_basis_size == 0 {
        return Err(Error::invalid("basis size bound must be at least 1"));
    }
    check_lambda(params, table)?;
    let ModelParams { s, d, .. } = params;
    if d == 0 {
        return Ok(SpectralLr {
            value: 1.0,
            truncation_weight: 1.0,
            full_weight: 1.0,
            positive: true,
        });
    }
    let mut value = 0.0;
    for beta in enumerate(max_basis_size, d) {
        let w = s.powi(beta.size() as i32 - 1);
        if w == 0.0 {
            continue;
        }
        value += w * table.value(d, beta, pair.left)? * table.value(d, beta, pair.right)?;
    }
    let counts = count_depth(d, max_basis_size);
    let truncation_weight = (1..=max_basis_size)
        .map(|n| counts.get(n).to_f64().unwrap() * (s * s).powi(n as i32 - 1))
        .sum();
    let full_weight = if s < 1.0 {
        phi_eval(d, s * s, 64)?.value
    } else {
        f64::MAX
    };
    Ok(SpectralLr {
        value,
        truncation_weight,
        full_weight,
        positive: value > 0.0,
    })
}

fn check_lambda(params: ModelParams, table: &EigenTable) -> Result<()> {
    if params.lambda != table.lambda() {
        return Err(Error::invalid(format!(
            "eigen table built for lambda = {}, model has {}",
            table.lambda(),
            params.lambda
        )));
    }
    Ok(())
}

/// `prod_gamma sqrt(prod_i m_i!) [x_1^{m_1} .. x_n^{m_n}] exp(sum_{i<j} x_i x_j)`,
/// with `ms[i][gamma]` the multiplicity of coordinate `gamma` in the `i`-th
/// basis tree. All vectors are padded with zeros to a common length.
pub fn mixed_moment_limit(ms: &[Vec<usize>]) -> Result<f64> {
    if ms.len() < 2 {
        return Err(Error::invalid("mixed moments need at least two factors"));
    }
    let width = ms.iter().map(Vec::len).max().unwrap_or(0);
    let n = ms.len();
    let mut acc = 1.0;
    for g in 0..width {
        let caps: Vec<usize> = ms.iter().map(|m| m.get(g).copied().unwrap_or(0)).collect();
        let mut pairs = MultiPoly::zero(&caps, DEFAULT_MAX_TERMS)?;
        let mut e = vec![0; n];
        for i in 0..n {
            for j in i + 1..n {
                e[i] = 1;
                e[j] = 1;
                pairs.add_term(&e, 1.0);
                e[i] = 0;
                e[j] = 0;
            }
        }
        acc *= sqrt_factorials(&caps) * pairs.exp().coeff(&caps);
        if acc == 0.0 {
            break;
        }
    }
    Ok(acc)
}

/// `sum_ell Poi(lambda)(ell) prod_i f_{1,m_i}(ell)`, in closed form:
/// `sqrt(prod m_i!) [x^m] exp(sum_{|S| >= 2} lambda^{1-|S|/2} prod_{i in S} x_i)`.
pub fn mixed_moment_d1(ms: &[usize], lambda: f64) -> Result<f64> {
    let n = ms.len();
    if n >= usize::BITS as usize {
        return Err(Error::invalid("too many factors"));
    }
    let mut poly = MultiPoly::zero(ms, DEFAULT_MAX_TERMS)?;
    let mut e = vec![0; n];
    for mask in 1u64..(1u64 << n) {
        let size = mask.count_ones() as usize;
        if size < 2 {
            continue;
        }
        for (i, ei) in e.iter_mut().enumerate() {
            *ei = ((mask >> i) & 1) as usize;
        }
        poly.add_term(&e, lambda.powf(1.0 - size as f64 / 2.0));
    }
    Ok(sqrt_factorials(ms) * poly.exp().coeff(ms))
}

fn sqrt_factorials(ms: &[usize]) -> f64 {
    ms.iter()
        .map(|&m| 0.5 * ln_factorial(m as u64))
        .sum::<f64>()
        .exp()
}

/// `y_beta = (sum_tau N_tau f_{d,beta}(tau) - lambda 1{beta trivial}) / sqrt(lambda)`
/// for each basis tree, where `N` are the root children of `t` (depth at
/// most `d + 1`).
pub fn project_y(table: &EigenTable, d: usize, t: Tree, basis: &[Tree]) -> Result<Vec<f64>> {
    if t.depth() > d + 1 {
        return Err(Error::invalid(format!(
            "tree {t} has depth {} > {}",
            t.depth(),
            d + 1
        )));
    }
    let lambda = table.lambda();
    basis
        .iter()
        .map(|&beta| {
            let mut acc = if beta.is_trivial() { -lambda } else { 0.0 };
            for &(tau, n) in t.children() {
                acc += n as f64 * table.value(d, beta, tau)?;
            }
            Ok(acc / lambda.sqrt())
        })
        .collect()
}
