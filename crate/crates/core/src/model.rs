//! Galton-Watson trees with Poisson offspring, the independent pair model
//! and the correlated pair model: samplers and exact log-domain pmfs.
//!
//! In the correlated model the root of each tree has `Poisson(lambda s)`
//! shared children, each carrying a correlated subtree pair of depth `d-1`,
//! plus `Poisson(lambda (1-s))` extra independent children on each side. The
//! pmf of a pair sums over every way of matching the children of one root
//! against the children of the other.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use dashmap::DashMap;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};
use crate::trees::Tree;

/// Log-probability. `-inf` encodes probability zero.
pub type LogProb = f64;

/// Default cap on DP transitions for a single pair pmf.
pub const DEFAULT_BUDGET: u64 = 50_000_000;

/// Memo tables are cleared once they hold this many entries.
const MEMO_CAP: usize = 4_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelParams {
    pub lambda: f64,
    pub s: f64,
    pub d: usize,
}

impl ModelParams {
    pub fn new(lambda: f64, s: f64, d: usize) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::invalid(format!("lambda must be > 0, got {lambda}")));
        }
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::invalid(format!("s must lie in [0, 1], got {s}")));
        }
        Ok(ModelParams { lambda, s, d })
    }

    pub fn with_depth(self, d: usize) -> Self {
        ModelParams { d, ..self }
    }
}

/// An ordered pair of trees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TreePair {
    pub left: Tree,
    pub right: Tree,
}

impl TreePair {
    pub fn new(left: Tree, right: Tree) -> Self {
        TreePair { left, right }
    }

    pub fn trivial() -> Self {
        TreePair::new(Tree::trivial(), Tree::trivial())
    }

    /// Parses `left<TAB>right`.
    pub fn parse(line: &str) -> Result<Self> {
        let mut parts = line.split('\t');
        let (Some(l), Some(r), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                offset: 0,
                message: "expected two tab-separated tree codes".into(),
            });
        };
        let left = Tree::parse(l.trim())?;
        let right = Tree::parse(r.trim()).map_err(|e| match e {
            Error::Parse { offset, message } => Error::Parse {
                offset: offset + l.len() + 1,
                message,
            },
            other => other,
        })?;
        Ok(TreePair::new(left, right))
    }

    pub fn depth(&self) -> usize {
        self.left.depth().max(self.right.depth())
    }
}

impl fmt::Display for TreePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}", self.left, self.right)
    }
}

#[derive(Clone, Copy, Debug)]
struct PoissonDraw(Option<Poisson<f64>>);

impl PoissonDraw {
    fn new(mean: f64) -> Self {
        PoissonDraw((mean > 0.0).then(|| Poisson::new(mean).expect("finite positive mean")))
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.0.map_or(0, |p| p.sample(rng) as usize)
    }
}

/// A parameterized model with memoized pmfs. Share one instance across
/// threads: the memo tables are concurrent.
pub struct Model {
    params: ModelParams,
    budget: u64,
    ln_lambda: f64,
    degree: PoissonDraw,
    shared: PoissonDraw,
    extra: PoissonDraw,
    gw_memo: DashMap<(usize, u32), LogProb>,
    joint_memo: DashMap<(usize, u32, u32), LogProb>,
    inserts: AtomicUsize,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("params", &self.params)
            .field("budget", &self.budget)
            .finish_non_exhaustive()
    }
}

impl Model {
    pub fn new(params: ModelParams) -> Self {
        let ModelParams { lambda, s, .. } = params;
        Model {
            params,
            budget: DEFAULT_BUDGET,
            ln_lambda: lambda.ln(),
            degree: PoissonDraw::new(lambda),
            shared: PoissonDraw::new(lambda * s),
            extra: PoissonDraw::new(lambda * (1.0 - s)),
            gw_memo: DashMap::new(),
            joint_memo: DashMap::new(),
            inserts: AtomicUsize::new(0),
        }
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = budget;
        self
    }

    pub fn params(&self) -> ModelParams {
        self.params
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    /// A GW tree of depth at most `d`.
    pub fn sample_gw<R: Rng + ?Sized>(&self, rng: &mut R) -> Tree {
        self.sample_gw_at(self.params.d, rng)
    }

    pub fn sample_gw_at<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> Tree {
        if d == 0 {
            return Tree::trivial();
        }
        let k = self.degree.sample(rng);
        let children: Vec<Tree> = (0..k).map(|_| self.sample_gw_at(d - 1, rng)).collect();
        Tree::from_children(children)
    }

    /// A pair from the correlated model.
    pub fn sample_correlated<R: Rng + ?Sized>(&self, rng: &mut R) -> TreePair {
        self.sample_correlated_at(self.params.d, rng)
    }

    pub fn sample_correlated_at<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> TreePair {
        if d == 0 {
            return TreePair::trivial();
        }
        let m = self.shared.sample(rng);
        let mut left = Vec::with_capacity(m);
        let mut right = Vec::with_capacity(m);
        for _ in 0..m {
            let p = self.sample_correlated_at(d - 1, rng);
            left.push(p.left);
            right.push(p.right);
        }
        let extra_left = self.extra.sample(rng);
        left.extend((0..extra_left).map(|_| self.sample_gw_at(d - 1, rng)));
        let extra_right = self.extra.sample(rng);
        right.extend((0..extra_right).map(|_| self.sample_gw_at(d - 1, rng)));
        TreePair::new(Tree::from_children(left), Tree::from_children(right))
    }

    /// A pair from the independent model.
    pub fn sample_null<R: Rng + ?Sized>(&self, rng: &mut R) -> TreePair {
        let left = self.sample_gw(rng);
        let right = self.sample_gw(rng);
        TreePair::new(left, right)
    }

    fn note_insert(&self) {
        if self.inserts.fetch_add(1, Ordering::Relaxed) + 1 >= MEMO_CAP {
            self.inserts.store(0, Ordering::Relaxed);
            self.gw_memo.clear();
            self.joint_memo.clear();
        }
    }

    fn check_depth(&self, d: usize, t: Tree) -> Result<()> {
        if t.depth() > d {
            return Err(Error::invalid(format!(
                "tree {t} has depth {} > {d}",
                t.depth()
            )));
        }
        Ok(())
    }

    /// `log GW_{lambda,d}(t)`.
    pub fn gw_logpmf(&self, t: Tree) -> Result<LogProb> {
        self.gw_logpmf_at(self.params.d, t)
    }

    pub fn gw_logpmf_at(&self, d: usize, t: Tree) -> Result<LogProb> {
        self.check_depth(d, t)?;
        Ok(self.gw_unchecked(d, t))
    }

    fn gw_unchecked(&self, d: usize, t: Tree) -> LogProb {
        if d == 0 {
            return 0.0;
        }
        if let Some(v) = self.gw_memo.get(&(d, t.id())) {
            return *v;
        }
        let mut acc = -self.params.lambda;
        for &(child, n) in t.children() {
            let g = self.gw_unchecked(d - 1, child);
            acc += n as f64 * (self.ln_lambda + g) - ln_factorial(n as u64);
        }
        self.note_insert();
        self.gw_memo.insert((d, t.id()), acc);
        acc
    }

    /// `log P1_{lambda,s,d}(t, t')`.
    pub fn joint_logpmf(&self, pair: &TreePair) -> Result<LogProb> {
        self.joint_logpmf_at(self.params.d, pair.left, pair.right)
    }

    pub fn joint_logpmf_at(&self, d: usize, t: Tree, u: Tree) -> Result<LogProb> {
        self.check_depth(d, t)?;
        self.check_depth(d, u)?;
        self.joint_unchecked(d, t, u)
    }

    fn joint_unchecked(&self, d: usize, t: Tree, u: Tree) -> Result<LogProb> {
        if d == 0 {
            return Ok(0.0);
        }
        if self.params.s == 0.0 {
            return Ok(self.gw_unchecked(d, t) + self.gw_unchecked(d, u));
        }
        let key = (d, t.id().min(u.id()), t.id().max(u.id()));
        if let Some(v) = self.joint_memo.get(&key) {
            return Ok(*v);
        }
        let v = self.joint_dp(d, t, u)?;
        self.note_insert();
        self.joint_memo.insert(key, v);
        Ok(v)
    }

    /// Sum over matchings, as a DP over the children of the row tree with
    /// the remaining column capacities as state.
    ///
    /// For `s < 1` every weight is divided by `a_i b_j` where `a_i, b_j` are
    /// the Poisson means of the unmatched children, which turns the cell
    /// weights into `s / (lambda (1-s)^2)` times the depth-`(d-1)` likelihood
    /// ratio of the two subtrees.
    fn joint_dp(&self, d: usize, t: Tree, u: Tree) -> Result<LogProb> {
        let cap = |x: Tree| {
            x.children()
                .iter()
                .fold(1u64, |acc, &(_, n)| acc.saturating_mul(n as u64 + 1))
        };
        let (row_tree, col_tree) = if (cap(t), t.id()) <= (cap(u), u.id()) {
            (u, t)
        } else {
            (t, u)
        };
        let rows = row_tree.children();
        let cols = col_tree.children();
        let states = cap(col_tree);
        if states > self.budget {
            return Err(Error::ComplexityExceeded {
                what: "joint pmf state space",
                needed: states,
                budget: self.budget,
            });
        }

        let lambda = self.params.lambda;
        let s = self.params.s;
        let full = s >= 1.0;
        let ln_shared = (lambda * s).ln();
        let ln_extra = (lambda * (1.0 - s)).ln();
        let row_scale: Vec<f64> = rows
            .iter()
            .map(|&(c, _)| {
                if full {
                    0.0
                } else {
                    ln_extra + self.gw_unchecked(d - 1, c)
                }
            })
            .collect();
        let col_scale: Vec<f64> = cols
            .iter()
            .map(|&(c, _)| {
                if full {
                    0.0
                } else {
                    ln_extra + self.gw_unchecked(d - 1, c)
                }
            })
            .collect();
        let mut ln_w = Vec::with_capacity(rows.len() * cols.len());
        for (i, &(a, _)) in rows.iter().enumerate() {
            for (j, &(b, _)) in cols.iter().enumerate() {
                let p = self.joint_unchecked(d - 1, a, b)?;
                ln_w.push(ln_shared + p - row_scale[i] - col_scale[j]);
            }
        }
        let problem = Matching {
            rows: rows.iter().map(|&(_, n)| n).collect(),
            cols: cols.iter().map(|&(_, n)| n).collect(),
            ln_w,
            full,
            budget: self.budget,
        };
        let mut ln_sum = problem.solve::<Lin>()?;
        if !ln_sum.is_finite() {
            ln_sum = problem.solve::<Log>()?;
        }
        let outer: f64 = rows
            .iter()
            .zip(&row_scale)
            .chain(cols.iter().zip(&col_scale))
            .map(|(&(_, n), &r)| n as f64 * r)
            .sum();
        Ok(ln_sum + outer - 2.0 * lambda + lambda * s)
    }
}

/// The scaled matching sum
/// `sum_M prod_ij w_ij^{m_ij}/m_ij! prod_i rho(N_i - r_i) prod_j rho(K_j - c_j)`
/// with `rho(k) = 1/k!`, or `rho(k) = 1{k = 0}` when `full`.
struct Matching {
    rows: Vec<usize>,
    cols: Vec<usize>,
    ln_w: Vec<f64>,
    full: bool,
    budget: u64,
}

trait Semiring: Copy {
    const ZERO: Self;
    const ONE: Self;
    fn add(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn from_ln(x: f64) -> Self;
    fn to_ln(self) -> f64;
    fn is_zero(self) -> bool;
    /// Any monotone image of the value, for locating the maximum.
    fn key(self) -> f64;
}

#[derive(Clone, Copy)]
struct Lin(f64);

impl Semiring for Lin {
    const ZERO: Self = Lin(0.0);
    const ONE: Self = Lin(1.0);
    fn add(self, o: Self) -> Self {
        Lin(self.0 + o.0)
    }
    fn mul(self, o: Self) -> Self {
        Lin(self.0 * o.0)
    }
    fn from_ln(x: f64) -> Self {
        Lin(x.exp())
    }
    fn to_ln(self) -> f64 {
        self.0.ln()
    }
    fn is_zero(self) -> bool {
        self.0 == 0.0
    }
    fn key(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy)]
struct Log(f64);

impl Semiring for Log {
    const ZERO: Self = Log(f64::NEG_INFINITY);
    const ONE: Self = Log(0.0);
    fn add(self, o: Self) -> Self {
        let (hi, lo) = if self.0 >= o.0 {
            (self.0, o.0)
        } else {
            (o.0, self.0)
        };
        if lo == f64::NEG_INFINITY {
            Log(hi)
        } else {
            Log(hi + (lo - hi).exp().ln_1p())
        }
    }
    fn mul(self, o: Self) -> Self {
        Log(self.0 + o.0)
    }
    fn from_ln(x: f64) -> Self {
        Log(x)
    }
    fn to_ln(self) -> f64 {
        self.0
    }
    fn is_zero(self) -> bool {
        self.0 == f64::NEG_INFINITY
    }
    fn key(self) -> f64 {
        self.0
    }
}

impl Matching {
    fn rho<W: Semiring>(&self, k: usize) -> W {
        if self.full {
            if k == 0 {
                W::ONE
            } else {
                W::ZERO
            }
        } else {
            W::from_ln(-ln_factorial(k as u64))
        }
    }

    /// Log of the matching sum. Non-finite output from the linear semiring
    /// signals overflow or underflow.
    fn solve<W: Semiring>(&self) -> Result<f64> {
        let nc = self.cols.len();
        let mut stride = vec![1usize; nc];
        for j in 1..nc {
            stride[j] = stride[j - 1] * (self.cols[j - 1] + 1);
        }
        let states = if nc == 0 {
            1
        } else {
            stride[nc - 1] * (self.cols[nc - 1] + 1)
        };
        let rem = |st: usize, j: usize| (st / stride[j]) % (self.cols[j] + 1);

        let mut cur = vec![W::ZERO; states];
        cur[states - 1] = W::ONE;
        let mut ln_scale = 0.0;
        let mut work_done = 0u64;

        for (i, &n) in self.rows.iter().enumerate() {
            let width = n + 1;
            let mut work = vec![W::ZERO; states * width];
            for st in 0..states {
                work[st * width] = cur[st];
            }
            for j in 0..nc {
                let ln_w = self.ln_w[i * nc + j];
                if ln_w == f64::NEG_INFINITY {
                    continue;
                }
                let top = n.min(self.cols[j]);
                let pw: Vec<W> = (0..=top)
                    .map(|m| W::from_ln(m as f64 * ln_w - ln_factorial(m as u64)))
                    .collect();
                let mut next = vec![W::ZERO; states * width];
                for st in 0..states {
                    let rj = rem(st, j);
                    for r in 0..width {
                        let v = work[st * width + r];
                        if v.is_zero() {
                            continue;
                        }
                        let hi = rj.min(n - r);
                        for (m, &p) in pw.iter().enumerate().take(hi + 1) {
                            let to = (st - m * stride[j]) * width + r + m;
                            next[to] = next[to].add(v.mul(p));
                        }
                        work_done += hi as u64 + 1;
                    }
                }
                if work_done > self.budget {
                    return Err(Error::ComplexityExceeded {
                        what: "joint pmf transitions",
                        needed: work_done,
                        budget: self.budget,
                    });
                }
                work = next;
            }
            let ends: Vec<W> = (0..width).map(|r| self.rho(n - r)).collect();
            for st in 0..states {
                let mut acc = W::ZERO;
                for r in 0..width {
                    acc = acc.add(work[st * width + r].mul(ends[r]));
                }
                cur[st] = acc;
            }
            let max = cur
                .iter()
                .copied()
                .max_by(|a, b| a.key().total_cmp(&b.key()))
                .unwrap();
            if max.is_zero() {
                return Ok(f64::NEG_INFINITY);
            }
            let shift = max.to_ln();
            if !shift.is_finite() {
                return Ok(shift);
            }
            let inv = W::from_ln(-shift);
            for v in &mut cur {
                *v = v.mul(inv);
            }
            ln_scale += shift;
        }

        let mut total = W::ZERO;
        for (st, &v) in cur.iter().enumerate() {
            if v.is_zero() {
                continue;
            }
            let mut term = v;
            for j in 0..nc {
                term = term.mul(self.rho(rem(st, j)));
            }
            total = total.add(term);
        }
        if total.is_zero() && !self.full {
            // Every term is positive when s < 1, so zero means underflow.
            return Ok(f64::NAN);
        }
        Ok(total.to_ln() + ln_scale)
    }
}

/// Convenience wrapper: one GW sample.
pub fn sample_gw<R: Rng + ?Sized>(params: ModelParams, rng: &mut R) -> Tree {
    Model::new(params).sample_gw(rng)
}

/// Convenience wrapper: one correlated sample.
pub fn sample_correlated<R: Rng + ?Sized>(params: ModelParams, rng: &mut R) -> TreePair {
    Model::new(params).sample_correlated(rng)
}
