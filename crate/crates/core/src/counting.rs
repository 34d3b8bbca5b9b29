//! Exact counts of unlabeled rooted trees and their generating functions.
//!
//! `A_{d,n}` is the number of trees with `n` nodes and depth at most `d`, and
//! `Phi_d(x) = sum_n A_{d,n} x^{n-1}`. Starting from `Phi_0 = 1`, each level
//! follows from the previous one through
//!
//! ```text
//! Phi_{d+1}(x) = exp( sum_{j >= 1} x^j Phi_d(x^j) / j )
//! ```
//!
//! which is evaluated here with exact rational arithmetic and truncated at a
//! fixed order. `A_n` (no depth bound) equals `A_{n-1,n}`.

use std::collections::HashMap;
use std::sync::{Arc, LazyLock, Mutex};

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::series::TruncatedSeries;

/// Numerical value of Otter's constant, for comparisons.
pub const OTTER_ALPHA: f64 = 0.338_321_856_899_208_7;

/// Exact counts `A_{d,1} .. A_{d,N}`; `depth == None` means unbounded depth.
#[derive(Clone, Debug, PartialEq)]
pub struct CountTable {
    pub depth: Option<usize>,
    pub counts: Vec<BigUint>,
}

impl CountTable {
    /// `A_{d,n}` for `1 <= n <= N`.
    pub fn get(&self, n: usize) -> &BigUint {
        &self.counts[n - 1]
    }

    pub fn max_n(&self) -> usize {
        self.counts.len()
    }
}

type Levels = Vec<Arc<[BigUint]>>;

// Cached levels Phi_0, Phi_1, ... per truncation order.
static LEVELS: LazyLock<Mutex<HashMap<usize, Levels>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));

fn next_level(prev: &[BigUint], order: usize) -> Vec<BigUint> {
    let prev = TruncatedSeries::from_coeffs(
        prev.iter()
            .map(|c| BigRational::from_integer(BigInt::from(c.clone())))
            .collect(),
        order,
    );
    let mut log = TruncatedSeries::zero(order);
    for j in 1..order {
        let inv_j = BigRational::new(BigInt::one(), BigInt::from(j));
        let term = prev.substitute_power(j).shift(j).scale(&inv_j);
        log = &log + &term;
    }
    log.exp()
        .into_coeffs()
        .into_iter()
        .map(|c| {
            assert!(c.is_integer(), "tree counts are integers");
            c.to_integer()
                .to_biguint()
                .expect("tree counts are non-negative")
        })
        .collect()
}

fn level(d: usize, order: usize) -> Arc<[BigUint]> {
    // Depth beyond order - 1 adds no trees of size <= order.
    let d = d.min(order.saturating_sub(1));
    let mut cache = LEVELS.lock().unwrap();
    let levels = cache.entry(order).or_insert_with(|| {
        let mut phi0 = vec![BigUint::zero(); order];
        if order > 0 {
            phi0[0] = BigUint::one();
        }
        vec![Arc::from(phi0)]
    });
    while levels.len() <= d {
        let next = next_level(levels.last().unwrap(), order);
        levels.push(Arc::from(next));
    }
    levels[d].clone()
}

/// `Phi_d` truncated at `order` terms: coefficient `n - 1` is `A_{d,n}`.
pub fn phi_d_series(d: usize, order: usize) -> TruncatedSeries<BigUint> {
    TruncatedSeries::from_coeffs(level(d, order).to_vec(), order)
}

/// `A_{d,1} .. A_{d,N}`.
pub fn count_depth(d: usize, max_n: usize) -> CountTable {
    CountTable {
        depth: Some(d),
        counts: level(d, max_n).to_vec(),
    }
}

/// `A_1 .. A_N`.
pub fn count_unbounded(max_n: usize) -> CountTable {
    CountTable {
        depth: None,
        counts: level(max_n.saturating_sub(1), max_n).to_vec(),
    }
}

/// A truncated evaluation of `Phi_d(x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhiValue {
    pub value: f64,
    /// Geometric extrapolation of the omitted terms.
    pub tail_estimate: f64,
    /// False when the empirical coefficient ratio does not certify decay.
    pub tail_reliable: bool,
}

fn eval_counts(counts: &[BigUint], x: f64) -> PhiValue {
    let n = counts.len();
    let as_f64: Vec<f64> = counts.iter().map(|c| c.to_f64().unwrap()).collect();
    let value = as_f64.iter().rev().fold(0.0, |acc, &a| acc * x + a);
    let last = as_f64[n - 1];
    let prev = as_f64[n - 2];
    let ratio = if prev == 0.0 { 0.0 } else { x * last / prev };
    let head = last * x.powi(n as i32 - 1);
    if ratio >= 1.0 {
        PhiValue {
            value,
            tail_estimate: f64::MAX,
            tail_reliable: false,
        }
    } else {
        PhiValue {
            value,
            tail_estimate: head * ratio / (1.0 - ratio),
            tail_reliable: true,
        }
    }
}

fn check_order(order: usize) -> Result<()> {
    if order < 2 {
        return Err(Error::invalid("evaluation order must be at least 2"));
    }
    Ok(())
}

/// `Phi_d(x)` for `0 <= x < 1`, summed over trees of size `<= order`.
pub fn phi_eval(d: usize, x: f64, order: usize) -> Result<PhiValue> {
    check_order(order)?;
    if !x.is_finite() || x < 0.0 {
        return Err(Error::domain(format!("Phi_d needs x >= 0, got {x}")));
    }
    if x >= 1.0 {
        return Err(Error::domain(format!(
            "Phi_d diverges for x >= 1 (got {x})"
        )));
    }
    Ok(eval_counts(&level(d, order), x))
}

/// `Phi(x) = lim_d Phi_d(x)`, summed over trees of size `<= order`. Finite
/// only for `x <= alpha`; beyond that the tail is flagged unreliable.
pub fn phi_eval_unbounded(x: f64, order: usize) -> Result<PhiValue> {
    check_order(order)?;
    if !x.is_finite() || x < 0.0 {
        return Err(Error::domain(format!("Phi needs x >= 0, got {x}")));
    }
    Ok(eval_counts(&level(order - 1, order), x))
}

/// `A_{N-1} / A_N`, which tends to Otter's constant.
pub fn otter_plain_ratio(max_n: usize) -> Result<f64> {
    if max_n < 2 {
        return Err(Error::invalid("need at least two counts"));
    }
    let table = count_unbounded(max_n);
    Ok(table.get(max_n - 1).to_f64().unwrap() / table.get(max_n).to_f64().unwrap())
}

/// Otter's constant from `A_{N-1}/A_N`, with the `n^{-3/2}` prefactor of
/// the asymptotic count divided out: `(A_{N-1}/A_N) ((N-1)/N)^{3/2}`.
pub fn estimate_otter(max_n: usize) -> Result<f64> {
    if max_n < 10 {
        return Err(Error::invalid("Otter estimate needs N >= 10"));
    }
    let n = max_n as f64;
    Ok(otter_plain_ratio(max_n)? * ((n - 1.0) / n).powf(1.5))
}
