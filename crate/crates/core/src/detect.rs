//! Detection layer: TV bounds, the Gaussian KL limit, the base one-sided
//! event `{L_d >= A}` and its propagation to deeper levels through the
//! bilinear statistic `Z_S`.

use std::collections::HashMap;
use std::sync::Arc;

use num_traits::ToPrimitive;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::counting::{count_depth, phi_eval};
use crate::error::{Error, Result};
use crate::likelihood::{mc_estimate, Measure};
use crate::model::{Model, ModelParams, TreePair};
use crate::rng::{par_streams, Stream, DEFAULT_STREAMS};
use crate::stats::Estimate;
use crate::trees::{enumerate, Tree};

/// Default KL level fixing the base depth.
pub const DEFAULT_K: f64 = 2.0;
/// Default cap on the number of trees in a tabulation universe.
pub const DEFAULT_MAX_TREES: usize = 600;
/// Default GW mass allowed outside the universe in [`Tabulation::Full`].
pub const DEFAULT_TAIL_BUDGET: f64 = 1e-4;

const KL_REL_TOL: f64 = 1e-10;
const MAX_KL_ORDER: usize = 1024;

/// `(1 - e^{-2 lambda}, e^{-2 lambda} (e^{lambda s} - 1) / 2)`: the uniform
/// upper bound on the TV distance and the lower bound obtained from the
/// pair of trivial trees.
pub fn tv_bounds(lambda: f64, s: f64) -> (f64, f64) {
    let e = (-2.0 * lambda).exp();
    (1.0 - e, 0.5 * e * (lambda * s).exp_m1())
}

/// A KL value with an estimate of the omitted tail.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlValue {
    pub value: f64,
    pub tail: f64,
}

fn check_s(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::domain(format!(
            "the Gaussian KL needs 0 <= s < 1, got {s}"
        )));
    }
    Ok(())
}

fn check_d(d: usize) -> Result<()> {
    if d == 0 {
        return Err(Error::invalid("the Gaussian KL needs d >= 1"));
    }
    Ok(())
}

/// `log Phi_d(s^2) / 2` over trees of size `<= order`.
pub fn gaussian_kl_at(d: usize, s: f64, order: usize) -> Result<KlValue> {
    check_s(s)?;
    check_d(d)?;
    let phi = phi_eval(d, s * s, order)?;
    let tail = if phi.tail_reliable {
        0.5 * (phi.tail_estimate / phi.value).ln_1p()
    } else {
        f64::INFINITY
    };
    Ok(KlValue {
        value: 0.5 * phi.value.ln(),
        tail,
    })
}

/// `-1/2 sum_{beta in X_{d-1}, |beta| <= max_n} log(1 - s^{2|beta|})`.
pub fn gaussian_kl_product(d: usize, s: f64, max_n: usize) -> Result<KlValue> {
    check_s(s)?;
    check_d(d)?;
    if max_n < 2 {
        return Err(Error::invalid("the product form needs max_n >= 2"));
    }
    let counts = count_depth(d - 1, max_n);
    let terms: Vec<f64> = (1..=max_n)
        .map(|n| -0.5 * counts.get(n).to_f64().unwrap() * (-s.powi(2 * n as i32)).ln_1p())
        .collect();
    let value = terms.iter().sum();
    let (last, prev) = (terms[max_n - 1], terms[max_n - 2]);
    let ratio = if prev > 0.0 { last / prev } else { 0.0 };
    let tail = if ratio < 1.0 {
        last * ratio / (1.0 - ratio)
    } else {
        f64::INFINITY
    };
    Ok(KlValue { value, tail })
}

/// `KL` of the Gaussian limit at depth `d`, with the truncation order
/// doubled until the tail is negligible.
pub fn gaussian_kl(d: usize, s: f64) -> Result<f64> {
    let mut order = 64;
    loop {
        let v = gaussian_kl_at(d, s, order)?;
        if v.tail <= KL_REL_TOL * v.value.max(1.0) {
            return Ok(v.value);
        }
        if order >= MAX_KL_ORDER {
            return Err(Error::TailBudgetExceeded {
                tail: v.tail,
                budget: KL_REL_TOL * v.value.max(1.0),
            });
        }
        order *= 2;
    }
}

/// Smallest `d <= d_max` whose Gaussian KL reaches `k`. Partial sums are
/// lower bounds, so an uncertified tail still settles the comparison once
/// the partial sum passes `k`.
pub fn select_d0(s: f64, k: f64, d_max: usize) -> Result<Option<usize>> {
    for d in 1..=d_max {
        let reached = match gaussian_kl(d, s) {
            Ok(v) => v >= k,
            Err(Error::TailBudgetExceeded { .. }) => {
                let lower = gaussian_kl_at(d, s, MAX_KL_ORDER)?.value;
                if lower < k {
                    return Err(Error::TailBudgetExceeded {
                        tail: f64::INFINITY,
                        budget: KL_REL_TOL,
                    });
                }
                true
            }
            Err(e) => return Err(e),
        };
        if reached {
            return Ok(Some(d));
        }
    }
    Ok(None)
}

/// `log A` with `A = Phi_d(s^2)^{1/16}`.
pub fn base_log_threshold(d: usize, s: f64) -> Result<f64> {
    Ok(gaussian_kl(d, s)? / 8.0)
}

/// `max(4 lambda p0^{1/4}, 3 lambda^{3/4})`.
pub fn sigma_threshold(lambda: f64, p0_mass: f64) -> Result<f64> {
    if lambda.is_nan() || lambda < 1.0 {
        return Err(Error::domain(format!(
            "sigma needs lambda >= 1, got {lambda}"
        )));
    }
    if !(0.0..=1.0).contains(&p0_mass) {
        return Err(Error::invalid(format!("mass {p0_mass} outside [0, 1]")));
    }
    Ok((4.0 * lambda * p0_mass.powf(0.25)).max(3.0 * lambda.powf(0.75)))
}

/// `(epsilon(s, c), lambda_0(s, c))` under which one propagation step
/// halves the null mass and keeps the power above `c`.
pub fn propagation_constants(s: f64, c: f64) -> (f64, f64) {
    let sc = s * c;
    let eps = (sc / 8.0).powi(4).min((1.0 - c) * sc * sc / 16.0);
    let lambda0 = (8.0 / (sc * (1.0 - c))).max((6.0 / sc).powi(4));
    (eps, lambda0)
}

/// The upper bound on `E_{P0}[Z^4]`.
pub fn z_fourth_moment_bound(lambda: f64, p0_mass: f64) -> f64 {
    36.0 * lambda.powi(4) * p0_mass * p0_mass + 13.0 * lambda.powi(3) * p0_mass
}

/// The upper bound on `Var_{P1}(Z)` given `E_{P1}[Z]`.
pub fn z_variance_bound(lambda: f64, s: f64, mean_p1: f64, p0_mass: f64) -> f64 {
    mean_p1 + lambda * lambda * (1.0 + s * s) * p0_mass
}

/// How an event is turned into finite mass tables over a universe `E` of
/// the smallest trees at its depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Tabulation {
    /// Use `S ∩ (E × E)` as the event; its tables are exact.
    Restrict { max_trees: usize },
    /// Approximate `S` itself, failing when the GW mass outside `E`
    /// exceeds `tail_budget`.
    Full { max_trees: usize, tail_budget: f64 },
}

impl Default for Tabulation {
    fn default() -> Self {
        Tabulation::Restrict {
            max_trees: DEFAULT_MAX_TREES,
        }
    }
}

impl Tabulation {
    fn max_trees(self) -> usize {
        match self {
            Tabulation::Restrict { max_trees } | Tabulation::Full { max_trees, .. } => max_trees,
        }
    }
}

/// All trees of depth `<= d` up to the largest size whose count stays
/// within `max_trees`.
pub fn universe(d: usize, max_trees: usize) -> Vec<Tree> {
    let mut total = 0usize;
    let mut size = 0;
    let counts = count_depth(d, 64);
    while size < 64 {
        let next = counts.get(size + 1).to_usize().unwrap_or(usize::MAX);
        if total.saturating_add(next) > max_trees {
            break;
        }
        total += next;
        size += 1;
    }
    enumerate(size, d).collect()
}

/// Mass tables of an explicit event `S ⊂ E × E` at depth `d`.
#[derive(Debug)]
pub struct Tables {
    params: ModelParams,
    universe: Vec<Tree>,
    index: HashMap<u32, usize>,
    gw: Vec<f64>,
    joint: Vec<f64>,
    member: Vec<bool>,
    row_mass: Vec<f64>,
    col_mass: Vec<f64>,
    p0: f64,
    p1: f64,
    outside: f64,
    tail: f64,
}

impl Tables {
    /// Tabulates the member pairs of `universe × universe` picked by `keep`.
    /// `keep` gets the two trees and `log L_d` of the pair.
    fn build<F>(model: &Model, d: usize, universe: Vec<Tree>, mut keep: F) -> Result<Tables>
    where
        F: FnMut(Tree, Tree, f64) -> Result<bool>,
    {
        let n = universe.len();
        let mut gw = Vec::with_capacity(n);
        for &t in &universe {
            gw.push(model.gw_logpmf_at(d, t)?);
        }
        let mut joint = vec![0.0; n * n];
        let mut member = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let (t, u) = (universe[i], universe[j]);
                let lj = model.joint_logpmf_at(d, t, u)?;
                joint[i * n + j] = lj.exp();
                member[i * n + j] = keep(t, u, lj - gw[i] - gw[j])?;
            }
        }
        let gw: Vec<f64> = gw.into_iter().map(f64::exp).collect();
        let mut row_mass = vec![0.0; n];
        let mut col_mass = vec![0.0; n];
        let (mut p0, mut p1) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if member[i * n + j] {
                    row_mass[i] += gw[j];
                    col_mass[j] += gw[i];
                    p0 += gw[i] * gw[j];
                    p1 += joint[i * n + j];
                }
            }
        }
        let outside = (1.0 - gw.iter().sum::<f64>()).max(0.0);
        let index = universe
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id(), i))
            .collect();
        Ok(Tables {
            params: model.params().with_depth(d),
            universe,
            index,
            gw,
            joint,
            member,
            row_mass,
            col_mass,
            p0,
            p1,
            outside,
            tail: 0.0,
        })
    }

    pub fn depth(&self) -> usize {
        self.params.d
    }

    pub fn params(&self) -> ModelParams {
        self.params
    }

    pub fn universe(&self) -> &[Tree] {
        &self.universe
    }

    /// Number of member pairs.
    pub fn len(&self) -> usize {
        self.member.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `P0_d(S)`.
    pub fn p0(&self) -> f64 {
        self.p0
    }

    /// `P1_d(S)`.
    pub fn p1(&self) -> f64 {
        self.p1
    }

    /// GW mass of trees outside the universe.
    pub fn outside_mass(&self) -> f64 {
        self.outside
    }

    /// Bound on the error of the tables relative to the tabulated event:
    /// zero for a restricted event.
    pub fn tail(&self) -> f64 {
        self.tail
    }

    pub fn contains(&self, t: Tree, u: Tree) -> bool {
        match (self.index.get(&t.id()), self.index.get(&u.id())) {
            (Some(&i), Some(&j)) => self.member[i * self.universe.len() + j],
            _ => false,
        }
    }

    /// `mu_left(tau) = sum_{tau' : (tau, tau') in S} GW_d(tau')`.
    pub fn row_mass(&self, t: Tree) -> f64 {
        self.index.get(&t.id()).map_or(0.0, |&i| self.row_mass[i])
    }

    /// `mu_right(tau') = sum_{tau : (tau, tau') in S} GW_d(tau)`.
    pub fn col_mass(&self, u: Tree) -> f64 {
        self.index.get(&u.id()).map_or(0.0, |&j| self.col_mass[j])
    }

    fn counts(&self, t: Tree) -> Vec<(usize, u32)> {
        t.children()
            .iter()
            .filter_map(|&(c, m)| self.index.get(&c.id()).map(|&i| (i, m as u32)))
            .collect()
    }

    fn z_from_counts(&self, left: &[(usize, u32)], right: &[(usize, u32)]) -> f64 {
        let lambda = self.params.lambda;
        let n = self.universe.len();
        let mut z = lambda * lambda * self.p0;
        for &(i, k) in left {
            z -= lambda * k as f64 * self.row_mass[i];
        }
        for &(j, k) in right {
            z -= lambda * k as f64 * self.col_mass[j];
        }
        for &(i, a) in left {
            for &(j, b) in right {
                if self.member[i * n + j] {
                    z += (a * b) as f64;
                }
            }
        }
        z
    }

    /// `Z_S(t, t') = sum_{(tau,tau') in S} (N_tau - lambda GW(tau)) (N'_tau' - lambda GW(tau'))`
    /// for a pair one level deeper than the event.
    pub fn z_statistic(&self, t: Tree, u: Tree) -> f64 {
        self.z_from_counts(&self.counts(t), &self.counts(u))
    }

    /// Draws the child counts of universe trees in a pair at depth `d + 1`.
    ///
    /// Children form Poisson processes over tree types, so the counts of
    /// types inside `E` can be drawn without building the rest of the pair.
    pub fn count_sampler(&self) -> CountSampler {
        let ModelParams { lambda, s, .. } = self.params;
        let n = self.universe.len();
        let null: Vec<f64> = self.gw.iter().map(|g| lambda * g).collect();
        let mut left = vec![0.0; n];
        let mut right = vec![0.0; n];
        let mut pairs = Vec::new();
        let mut pair_w = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let p = self.joint[i * n + j];
                left[i] += p;
                right[j] += p;
                if p > 0.0 {
                    pairs.push((i, j));
                    pair_w.push(lambda * s * p);
                }
            }
        }
        // One-sided arrivals: the unmatched augmentation plus matched pairs
        // whose partner falls outside the universe.
        for i in 0..n {
            left[i] = (lambda * self.gw[i] - lambda * s * left[i]).max(0.0);
            right[i] = (lambda * self.gw[i] - lambda * s * right[i]).max(0.0);
        }
        CountSampler {
            null: Categorical::new(&null),
            left: Categorical::new(&left),
            right: Categorical::new(&right),
            pairs: Categorical::new(&pair_w),
            pair_cells: pairs,
        }
    }
}

#[derive(Clone, Debug)]
struct Categorical(Option<(Poisson<f64>, WeightedIndex<f64>)>);

impl Categorical {
    fn new(rates: &[f64]) -> Self {
        let total: f64 = rates.iter().sum();
        if total <= 0.0 {
            return Categorical(None);
        }
        Categorical(Some((
            Poisson::new(total).expect("positive finite rate"),
            WeightedIndex::new(rates).expect("non-negative weights"),
        )))
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<usize>) {
        if let Some((count, which)) = &self.0 {
            let k = count.sample(rng) as usize;
            out.extend((0..k).map(|_| which.sample(rng)));
        }
    }
}

/// Exact sampler of universe child counts; see [`Tables::count_sampler`].
#[derive(Clone, Debug)]
pub struct CountSampler {
    null: Categorical,
    left: Categorical,
    right: Categorical,
    pairs: Categorical,
    pair_cells: Vec<(usize, usize)>,
}

fn tally(mut idx: Vec<usize>) -> Vec<(usize, u32)> {
    idx.sort_unstable();
    let mut out: Vec<(usize, u32)> = Vec::new();
    for i in idx {
        match out.last_mut() {
            Some((j, k)) if *j == i => *k += 1,
            _ => out.push((i, 1)),
        }
    }
    out
}

impl CountSampler {
    /// Universe counts `(N_tau)`, `(N'_tau)` of a pair drawn from `under`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        under: Measure,
        rng: &mut R,
    ) -> (Vec<(usize, u32)>, Vec<(usize, u32)>) {
        let (mut l, mut r) = (Vec::new(), Vec::new());
        match under {
            Measure::Null => {
                self.null.draw(rng, &mut l);
                self.null.draw(rng, &mut r);
            }
            Measure::Alt => {
                let mut cells = Vec::new();
                self.pairs.draw(rng, &mut cells);
                for c in cells {
                    let (i, j) = self.pair_cells[c];
                    l.push(i);
                    r.push(j);
                }
                self.left.draw(rng, &mut l);
                self.right.draw(rng, &mut r);
            }
        }
        (tally(l), tally(r))
    }
}

/// `n` draws of `Z_S` for pairs at depth `S.depth() + 1` under `under`.
pub fn sample_z<R: Rng + ?Sized>(
    tables: &Tables,
    under: Measure,
    n: usize,
    rng: &mut R,
) -> Vec<f64> {
    let sampler = tables.count_sampler();
    par_streams(rng, n, DEFAULT_STREAMS, |st, k| {
        (0..k)
            .map(|_| {
                let (l, r) = sampler.sample(under, st);
                tables.z_from_counts(&l, &r)
            })
            .collect::<Vec<f64>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// `Z_S` on an explicit pair.
pub fn zs_statistic(tables: &Tables, pair: &TreePair) -> Result<f64> {
    let want = tables.depth() + 1;
    if pair.depth() > want {
        return Err(Error::invalid(format!(
            "pair has depth {} but the statistic is defined at depth {want}",
            pair.depth()
        )));
    }
    Ok(tables.z_statistic(pair.left, pair.right))
}

/// A one-sided event on pairs at a fixed depth.
#[derive(Clone, Debug)]
pub enum EventSet {
    /// `{L_d >= A}`, decided by the exact likelihood ratio.
    Threshold { depth: usize, log_a: f64 },
    /// `{Z_S >= sigma}` for the tabulated event `S` one level down.
    Propagated { sigma: f64, below: Arc<Tables> },
    /// A finite set of pairs with its mass tables.
    Explicit(Arc<Tables>),
}

impl EventSet {
    pub fn depth(&self) -> usize {
        match self {
            EventSet::Threshold { depth, .. } => *depth,
            EventSet::Propagated { below, .. } => below.depth() + 1,
            EventSet::Explicit(t) => t.depth(),
        }
    }

    fn contains_with(&self, t: Tree, u: Tree, log_lr: f64) -> bool {
        match self {
            EventSet::Threshold { log_a, .. } => log_lr >= *log_a,
            EventSet::Propagated { sigma, below } => below.z_statistic(t, u) >= *sigma,
            EventSet::Explicit(tab) => tab.contains(t, u),
        }
    }

    pub fn contains(&self, model: &Model, pair: &TreePair) -> Result<bool> {
        let lr = match self {
            EventSet::Threshold { depth, .. } => {
                crate::likelihood::log_lr_at(model, *depth, pair.left, pair.right)?
            }
            _ => 0.0,
        };
        Ok(self.contains_with(pair.left, pair.right, lr))
    }

    /// Mass tables over the universe of at most `max_trees` trees.
    pub fn tabulate(&self, model: &Model, how: Tabulation) -> Result<Tables> {
        let d = self.depth();
        let trees = universe(d, how.max_trees());
        let lambda = model.params().lambda;
        if let Tabulation::Full { tail_budget, .. } = how {
            let inside: f64 = trees
                .iter()
                .map(|&t| model.gw_logpmf_at(d, t).map(f64::exp))
                .sum::<Result<f64>>()?;
            let outside = (1.0 - inside).max(0.0);
            if outside > tail_budget {
                return Err(Error::TailBudgetExceeded {
                    tail: outside,
                    budget: tail_budget,
                });
            }
        }
        if let EventSet::Propagated { below, .. } = self {
            if below.params().lambda != lambda || below.params().s != model.params().s {
                return Err(Error::invalid("tables were built for other parameters"));
            }
        }
        let mut tables =
            Tables::build(model, d, trees, |t, u, lr| Ok(self.contains_with(t, u, lr)))?;
        if matches!(how, Tabulation::Full { .. }) {
            // Pairs with either side outside the universe.
            tables.tail = 2.0 * tables.outside;
        }
        Ok(tables)
    }
}

/// MC estimates of an event's null and alternative masses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub p0: Estimate,
    pub p1: Estimate,
    /// `P1 >= c` up to three standard errors.
    pub meets_target: bool,
    /// The event is all pairs (`s = 0` gives `A = 1`).
    pub degenerate: bool,
}

fn calibrate(p0: Estimate, p1: Estimate, target_c: f64, degenerate: bool) -> Calibration {
    Calibration {
        p0,
        p1,
        meets_target: p1.mean + 3.0 * p1.std_error >= target_c,
        degenerate,
    }
}

fn event_mass<R: Rng + ?Sized>(
    model: &Model,
    event: &EventSet,
    under: Measure,
    n: usize,
    rng: &mut R,
) -> Result<Estimate> {
    let d = event.depth();
    mc_estimate(rng, n, |st: &mut Stream| {
        let pair = match under {
            Measure::Null => TreePair::new(model.sample_gw_at(d, st), model.sample_gw_at(d, st)),
            Measure::Alt => model.sample_correlated_at(d, st),
        };
        Ok(if event.contains(model, &pair)? {
            1.0
        } else {
            0.0
        })
    })
}

/// The base event `{L_{d0} >= A}` with `A = Phi_{d0}(s^2)^{1/16}`, with MC
/// estimates of its masses from `n_cal` pairs per measure.
pub fn base_event<R: Rng + ?Sized>(
    model: &Model,
    d0: usize,
    target_c: f64,
    n_cal: usize,
    rng: &mut R,
) -> Result<(EventSet, Calibration)> {
    if d0 == 0 {
        return Err(Error::invalid("the base depth must be at least 1"));
    }
    let log_a = base_log_threshold(d0, model.params().s)?;
    let event = EventSet::Threshold { depth: d0, log_a };
    let p0 = event_mass(model, &event, Measure::Null, n_cal, rng)?;
    let p1 = event_mass(model, &event, Measure::Alt, n_cal, rng)?;
    let degenerate = log_a == 0.0;
    Ok((event, calibrate(p0, p1, target_c, degenerate)))
}

/// One propagation step.
#[derive(Clone, Debug)]
pub struct Level {
    pub depth: usize,
    pub sigma: f64,
    /// Tables of the event one level down.
    pub below: Arc<Tables>,
}

/// A base event followed by a chain of `Z_S` propagation steps.
#[derive(Clone, Debug)]
pub struct DetectionTest {
    pub params: ModelParams,
    pub base: EventSet,
    pub chain: Vec<Level>,
}

impl DetectionTest {
    pub fn new(params: ModelParams, base: EventSet) -> Self {
        DetectionTest {
            params: params.with_depth(base.depth()),
            base,
            chain: Vec::new(),
        }
    }

    pub fn depth(&self) -> usize {
        self.top().depth()
    }

    /// The event tested at the final depth.
    pub fn top(&self) -> EventSet {
        match self.chain.last() {
            None => self.base.clone(),
            Some(l) => EventSet::Propagated {
                sigma: l.sigma,
                below: l.below.clone(),
            },
        }
    }

    pub fn accepts(&self, model: &Model, pair: &TreePair) -> Result<bool> {
        self.top().contains(model, pair)
    }
}

/// Extends `test` one level: tabulates its top event `S`, sets
/// `sigma = sigma_threshold(lambda, P0(S))` and reports MC masses of
/// `S' = {Z_S >= sigma}` from `n_cal` exact count draws per measure.
pub fn propagate<R: Rng + ?Sized>(
    model: &Model,
    test: &DetectionTest,
    how: Tabulation,
    target_c: f64,
    n_cal: usize,
    rng: &mut R,
) -> Result<(DetectionTest, Calibration)> {
    let tables = Arc::new(test.top().tabulate(model, how)?);
    let sigma = sigma_threshold(model.params().lambda, tables.p0().min(1.0))?;
    let mass = |under, rng: &mut R| {
        let hits = sample_z(&tables, under, n_cal, rng).into_iter().map(|z| {
            if z >= sigma {
                1.0
            } else {
                0.0
            }
        });
        hits.collect::<crate::stats::Accumulator>().estimate()
    };
    let p0 = mass(Measure::Null, rng);
    let p1 = mass(Measure::Alt, rng);
    let mut next = test.clone();
    next.chain.push(Level {
        depth: tables.depth() + 1,
        sigma,
        below: tables,
    });
    next.params = next.params.with_depth(next.depth());
    Ok((next, calibrate(p0, p1, target_c, false)))
}

/// Settings of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub grid: Vec<(f64, f64)>,
    /// Base depth; chosen by [`select_d0`] when `None`.
    pub d0: Option<usize>,
    pub d_max: usize,
    pub k_level: f64,
    pub target_c: f64,
    pub n_samples: usize,
    pub tabulation: Tabulation,
    pub budget: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            grid: Vec::new(),
            d0: None,
            d_max: 3,
            k_level: DEFAULT_K,
            target_c: 0.1,
            n_samples: 2000,
            tabulation: Tabulation::default(),
            budget: crate::model::DEFAULT_BUDGET,
        }
    }
}

/// Which test a row reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    /// `{L_d >= A_d}` at the row depth.
    Lr,
    /// The propagated `Z_S` chain.
    Zs,
    /// Marker: the grid point stopped here on a resource limit.
    BudgetExceeded,
}

impl RowKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RowKind::Lr => "lr",
            RowKind::Zs => "zs",
            RowKind::BudgetExceeded => "budget_exceeded",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRow {
    pub lambda: f64,
    pub s: f64,
    pub depth: usize,
    pub test: RowKind,
    pub type1: Option<Estimate>,
    pub power: Option<Estimate>,
    pub sigma: Option<f64>,
    pub a: Option<f64>,
}

fn marker(lambda: f64, s: f64, depth: usize) -> ExperimentRow {
    ExperimentRow {
        lambda,
        s,
        depth,
        test: RowKind::BudgetExceeded,
        type1: None,
        power: None,
        sigma: None,
        a: None,
    }
}

fn is_resource(e: &Error) -> bool {
    matches!(
        e,
        Error::ComplexityExceeded { .. } | Error::TailBudgetExceeded { .. }
    )
}

fn lr_row<R: Rng + ?Sized>(
    model: &Model,
    d: usize,
    n: usize,
    rng: &mut R,
) -> Result<ExperimentRow> {
    let ModelParams { lambda, s, .. } = model.params();
    let log_a = base_log_threshold(d, s)?;
    let event = EventSet::Threshold { depth: d, log_a };
    Ok(ExperimentRow {
        lambda,
        s,
        depth: d,
        test: RowKind::Lr,
        type1: Some(event_mass(model, &event, Measure::Null, n, rng)?),
        power: Some(event_mass(model, &event, Measure::Alt, n, rng)?),
        sigma: None,
        a: Some(log_a.exp()),
    })
}

/// Type-I error and power per grid point and depth, for the plain LR test
/// and the propagated `Z_S` test. Resource failures end the grid point
/// with a marker row; other errors abort.
pub fn run_experiment<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    rng: &mut R,
) -> Result<Vec<ExperimentRow>> {
    let mut rows = Vec::new();
    for &(lambda, s) in &cfg.grid {
        let d0 = match cfg.d0 {
            Some(d) => d,
            None => match select_d0(s, cfg.k_level, cfg.d_max) {
                Ok(Some(d)) => d,
                Ok(None) => cfg.d_max,
                Err(e) if is_resource(&e) => {
                    rows.push(marker(lambda, s, 0));
                    continue;
                }
                Err(e) => return Err(e),
            },
        };
        let params = ModelParams::new(lambda, s, d0)?;
        let model = Model::new(params).with_budget(cfg.budget);
        let mut test = DetectionTest::new(
            params,
            EventSet::Threshold {
                depth: d0,
                log_a: 0.0,
            },
        );
        for d in d0..=cfg.d_max {
            let step = (|| -> Result<()> {
                rows.push(lr_row(&model, d, cfg.n_samples, rng)?);
                if d == d0 {
                    test.base = EventSet::Threshold {
                        depth: d0,
                        log_a: base_log_threshold(d0, s)?,
                    };
                } else {
                    let (next, cal) = propagate(
                        &model,
                        &test,
                        cfg.tabulation,
                        cfg.target_c,
                        cfg.n_samples,
                        rng,
                    )?;
                    test = next;
                    rows.push(ExperimentRow {
                        lambda,
                        s,
                        depth: d,
                        test: RowKind::Zs,
                        type1: Some(cal.p0),
                        power: Some(cal.p1),
                        sigma: test.chain.last().map(|l| l.sigma),
                        a: None,
                    });
                }
                Ok(())
            })();
            match step {
                Ok(()) => {}
                Err(e) if is_resource(&e) => {
                    rows.push(marker(lambda, s, d));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counting::{count_unbounded, OTTER_ALPHA};
    use crate::likelihood::mc_kl;
    use crate::rng::stream;
    use crate::stats::Accumulator;

    fn model(lambda: f64, s: f64, d: usize) -> Model {
        Model::new(ModelParams::new(lambda, s, d).unwrap())
    }

    #[test]
    fn tv_bound_values() {
        let (strong, weak) = tv_bounds(1.0, 0.5);
        assert!((strong - (1.0 - (-2.0f64).exp())).abs() < 1e-15);
        assert!((strong - 0.8647).abs() < 1e-4);
        assert!((weak - 0.0439).abs() < 1e-4);
        assert_eq!(tv_bounds(3.0, 0.0).1, 0.0);
        let mut prev = 0.0;
        for k in 1..=10 {
            let w = tv_bounds(5.0, k as f64 / 10.0).1;
            assert!(w > prev);
            prev = w;
        }
    }

    #[test]
    fn kl_depth_one_closed_form() {
        for s in [0.1, 0.5, 0.9] {
            let v = gaussian_kl(1, s).unwrap();
            assert!((v + 0.5 * (1.0 - s * s).ln()).abs() < 1e-9, "{s}");
        }
        assert_eq!(gaussian_kl(3, 0.0).unwrap(), 0.0);
        assert!(matches!(gaussian_kl(2, 1.0), Err(Error::Domain(_))));
        assert!(matches!(
            gaussian_kl(0, 0.5),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn kl_two_forms_agree() {
        for d in 1..=4 {
            for s in [0.3, 0.5, 0.58] {
                let a = gaussian_kl_at(d, s, 120).unwrap();
                let b = gaussian_kl_product(d, s, 120).unwrap();
                let budget = a.tail + b.tail + 1e-12;
                assert!((a.value - b.value).abs() <= budget, "{d} {s}: {a:?} {b:?}");
            }
        }
    }

    #[test]
    fn kl_at_otter_threshold_stays_below_limit() {
        // Phi(alpha) is finite; bound it by the partial sum plus a tail
        // that decays like n^{-3/2}.
        let n = 60;
        let counts = count_unbounded(n);
        let head = phi_eval(n - 1, OTTER_ALPHA, n).unwrap().value;
        let last = counts.get(n).to_f64().unwrap() * OTTER_ALPHA.powi(n as i32 - 1);
        let limit = 0.5 * (head + 2.0 * n as f64 * last).ln();
        let s = OTTER_ALPHA.sqrt();
        let mut prev = 0.0;
        for d in [2, 4, 6, 8] {
            let v = gaussian_kl_at(d, s, 200).unwrap().value;
            assert!(v > prev && v < limit, "{d}: {v} vs {limit}");
            prev = v;
        }
    }

    #[test]
    fn d0_selection() {
        assert_eq!(select_d0(0.9, 2.0, 6).unwrap(), Some(2));
        assert_eq!(select_d0(0.9, 0.5, 6).unwrap(), Some(1));
        assert_eq!(select_d0(0.3, 2.0, 3).unwrap(), None);
    }

    #[test]
    fn sigma_and_constants() {
        assert!((sigma_threshold(16.0, 2f64.powi(-8)).unwrap() - 24.0).abs() < 1e-12);
        assert!((sigma_threshold(5.0, 0.0).unwrap() - 3.0 * 5f64.powf(0.75)).abs() < 1e-12);
        assert_eq!(sigma_threshold(1.0, 1.0).unwrap(), 4.0);
        assert!(matches!(sigma_threshold(0.5, 0.1), Err(Error::Domain(_))));

        let (eps, l0) = propagation_constants(0.9, 0.1);
        assert!((eps - 1.6e-8).abs() < 1e-9, "{eps}");
        assert!((l0 - (6.0f64 / 0.09).powi(4)).abs() < 1e-6 * l0);
        assert!((l0 - 1.975e7).abs() < 1e4);
        let (eps, l0) = propagation_constants(1.0, 0.5);
        assert_eq!(eps, (1.0f64 / 16.0).powi(4).min(0.5 * 0.25 / 16.0));
        assert_eq!(l0, 32f64.max(12f64.powi(4)));
        assert!(propagation_constants(1.0, 0.999).1 > propagation_constants(1.0, 0.99).1);
    }

    #[test]
    fn base_event_markov() {
        let m = model(2.0, 0.9, 2);
        let (ev, cal) = base_event(&m, 2, 0.1, 20_000, &mut stream(21, 0)).unwrap();
        let EventSet::Threshold { log_a, .. } = ev else {
            panic!("base event is a threshold")
        };
        let phi = phi_eval(2, 0.81, 400).unwrap().value;
        assert!((log_a - phi.ln() / 16.0).abs() < 1e-9);
        assert!(cal.p0.mean <= (-log_a).exp() + 3.0 * cal.p0.std_error);
        assert!(cal.p1.mean > cal.p0.mean);
        assert!(!cal.degenerate);
    }

    #[test]
    fn base_event_degenerate_at_zero() {
        let m = model(2.0, 0.0, 2);
        let (_, cal) = base_event(&m, 2, 0.5, 500, &mut stream(22, 0)).unwrap();
        assert!(cal.degenerate);
        assert_eq!((cal.p0.mean, cal.p1.mean), (1.0, 1.0));
    }

    fn small_tables(how: Tabulation) -> (Model, Tables) {
        let m = model(1.5, 0.8, 1);
        let ev = EventSet::Threshold {
            depth: 1,
            log_a: base_log_threshold(1, 0.8).unwrap(),
        };
        let t = ev.tabulate(&m, how).unwrap();
        (m, t)
    }

    #[test]
    fn tables_are_consistent() {
        let (m, t) = small_tables(Tabulation::Restrict { max_trees: 12 });
        assert_eq!(t.universe().len(), 12);
        assert_eq!(t.tail(), 0.0);
        assert!(t.p0() > 0.0 && t.p0() < t.p1() && t.p1() < 1.0);
        let mut p0 = 0.0;
        for &a in t.universe() {
            assert!(
                (t.row_mass(a)
                    - t.universe()
                        .iter()
                        .filter(|&&b| t.contains(a, b))
                        .map(|&b| m.gw_logpmf_at(1, b).unwrap().exp())
                        .sum::<f64>())
                .abs()
                    < 1e-15
            );
            p0 += m.gw_logpmf_at(1, a).unwrap().exp() * t.row_mass(a);
        }
        assert!((p0 - t.p0()).abs() < 1e-14);
    }

    #[test]
    fn full_tabulation_checks_tail() {
        let (_, t) = small_tables(Tabulation::Full {
            max_trees: 14,
            tail_budget: 1e-4,
        });
        assert!(t.outside_mass() < 1e-4 && t.tail() == 2.0 * t.outside_mass());
        let m = model(8.0, 0.9, 2);
        let ev = EventSet::Threshold {
            depth: 2,
            log_a: 0.5,
        };
        let err = ev
            .tabulate(
                &m,
                Tabulation::Full {
                    max_trees: 50,
                    tail_budget: 1e-4,
                },
            )
            .unwrap_err();
        assert!(matches!(err, Error::TailBudgetExceeded { .. }));
    }

    #[test]
    fn empty_event_gives_zero() {
        let m = model(2.0, 0.5, 2);
        let ev = EventSet::Threshold {
            depth: 1,
            log_a: f64::INFINITY,
        };
        let t = ev
            .tabulate(&m, Tabulation::Restrict { max_trees: 10 })
            .unwrap();
        assert!(t.is_empty());
        let mut rng = stream(23, 0);
        for _ in 0..50 {
            let pair = m.sample_correlated_at(2, &mut rng);
            assert_eq!(zs_statistic(&t, &pair).unwrap(), 0.0);
        }
    }

    #[test]
    fn count_sampler_matches_tree_sampler() {
        let (m, t) = small_tables(Tabulation::Restrict { max_trees: 8 });
        let n = 60_000;
        for under in [Measure::Null, Measure::Alt] {
            let direct = mc_estimate(&mut stream(24, 0), n, |st| {
                let pair = match under {
                    Measure::Null => TreePair::new(m.sample_gw_at(2, st), m.sample_gw_at(2, st)),
                    Measure::Alt => m.sample_correlated_at(2, st),
                };
                zs_statistic(&t, &pair)
            })
            .unwrap();
            let counts: Accumulator = sample_z(&t, under, n, &mut stream(25, 0))
                .into_iter()
                .collect();
            let counts = counts.estimate();
            let gap = (direct.mean - counts.mean).abs();
            let se = (direct.std_error.powi(2) + counts.std_error.powi(2)).sqrt();
            assert!(gap < 4.0 * se, "{under:?}: {direct:?} vs {counts:?}");
        }
    }

    #[test]
    fn z_moments_match_their_bounds() {
        let (m, t) = small_tables(Tabulation::Restrict { max_trees: 10 });
        let lambda = m.params().lambda;
        let n = 200_000;
        let null = sample_z(&t, Measure::Null, n, &mut stream(26, 0));
        let alt = sample_z(&t, Measure::Alt, n, &mut stream(27, 0));
        let mean0: Accumulator = null.iter().copied().collect();
        assert!(mean0.estimate().within(0.0, 3.0), "{:?}", mean0.estimate());
        let mean1: Accumulator = alt.iter().copied().collect();
        let target = lambda * 0.8 * t.p1();
        assert!(
            mean1.estimate().within(target, 3.0),
            "{:?} vs {target}",
            mean1.estimate()
        );

        let fourth: Accumulator = null.iter().map(|z| z.powi(4)).collect();
        let f = fourth.estimate();
        assert!(f.mean <= z_fourth_moment_bound(lambda, t.p0()) + 4.0 * f.std_error);

        let sq: Accumulator = alt.iter().map(|z| (z - mean1.mean()).powi(2)).collect();
        let v = sq.estimate();
        let bound = z_variance_bound(lambda, 0.8, lambda * 0.8 * t.p1(), t.p0());
        assert!(v.mean <= bound + 4.0 * v.std_error, "{v:?} vs {bound}");
    }

    #[test]
    fn propagation_contracts_type_one() {
        let m = model(1.5, 0.8, 1);
        let base = EventSet::Threshold {
            depth: 1,
            log_a: base_log_threshold(1, 0.8).unwrap(),
        };
        let test = DetectionTest::new(m.params(), base);
        let how = Tabulation::Restrict { max_trees: 10 };
        let (next, cal) = propagate(&m, &test, how, 0.01, 50_000, &mut stream(28, 0)).unwrap();
        let below = &next.chain[0].below;
        assert_eq!(next.depth(), 2);
        assert!(
            cal.p0.mean <= 0.5 * below.p0() + 3.0 * cal.p0.std_error,
            "{cal:?}"
        );

        // The propagated event decides real pairs the same way.
        let mut rng = stream(29, 0);
        for _ in 0..100 {
            let pair = m.sample_correlated_at(2, &mut rng);
            let z = zs_statistic(below, &pair).unwrap();
            assert_eq!(next.accepts(&m, &pair).unwrap(), z >= next.chain[0].sigma);
        }

        // A second step tabulates the propagated event at depth 2.
        let (deeper, _) = propagate(
            &m,
            &next,
            Tabulation::Restrict { max_trees: 30 },
            0.01,
            2000,
            &mut stream(30, 0),
        )
        .unwrap();
        assert_eq!(deeper.depth(), 3);
        assert!(deeper.chain[1].sigma >= 3.0 * 1.5f64.powf(0.75));
    }

    #[test]
    fn experiment_rows() {
        let cfg = ExperimentConfig {
            grid: vec![(1.5, 0.0), (1.5, 0.9)],
            d0: Some(1),
            d_max: 2,
            n_samples: 3000,
            tabulation: Tabulation::Restrict { max_trees: 12 },
            ..ExperimentConfig::default()
        };
        let rows = run_experiment(&cfg, &mut stream(31, 0)).unwrap();
        assert_eq!(rows.len(), 6);
        for r in rows.iter().filter(|r| r.s == 0.0) {
            let (t1, pw) = (r.type1.unwrap(), r.power.unwrap());
            let se = (t1.std_error.powi(2) + pw.std_error.powi(2)).sqrt();
            assert!((t1.mean - pw.mean).abs() <= 4.0 * se + 1e-12, "{r:?}");
        }
        assert_eq!(rows.iter().filter(|r| r.test == RowKind::Zs).count(), 2);
        assert!(rows
            .iter()
            .all(|r| r.test != RowKind::Zs || r.sigma.unwrap() > 0.0));
    }

    #[test]
    fn experiment_marks_budget_overrun() {
        let cfg = ExperimentConfig {
            grid: vec![(20.0, 0.9)],
            d0: Some(2),
            d_max: 2,
            n_samples: 5,
            budget: 10,
            ..ExperimentConfig::default()
        };
        let rows = run_experiment(&cfg, &mut stream(32, 0)).unwrap();
        assert_eq!(rows.last().unwrap().test, RowKind::BudgetExceeded);
    }

    #[test]
    fn kl_bounded_by_second_moment() {
        // Jensen: KL = E_{P1}[log L] <= log E_{P1}[L] = log Phi_d(s^2).
        let cap = phi_eval(2, 0.25, 100).unwrap().value.ln();
        let m = model(2.0, 0.5, 2);
        let e = mc_kl(&m, 20_000, &mut stream(33, 0)).unwrap();
        assert!(
            e.mean > 0.0 && e.mean <= cap + 4.0 * e.std_error,
            "{e:?} vs {cap}"
        );
    }
}
