//! The likelihood ratio `L_d = P1_d / P0_d` and Monte-Carlo functionals of it.

use rand::Rng;

use crate::error::Result;
use crate::model::{Model, TreePair};
use crate::rng::{par_streams, Stream, DEFAULT_STREAMS};
use crate::stats::{merge_all, Accumulator, Estimate};
use crate::trees::Tree;

/// Which law the Monte-Carlo pairs are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Measure {
    /// Independent GW trees.
    Null,
    /// The correlated model.
    Alt,
}

/// `log L_d(t, t')` at the model depth.
pub fn log_lr(model: &Model, pair: &TreePair) -> Result<f64> {
    log_lr_at(model, model.params().d, pair.left, pair.right)
}

pub fn log_lr_at(model: &Model, d: usize, t: Tree, u: Tree) -> Result<f64> {
    let joint = model.joint_logpmf_at(d, t, u)?;
    if d == 0 || model.params().s == 0.0 {
        return Ok(0.0);
    }
    Ok(joint - model.gw_logpmf_at(d, t)? - model.gw_logpmf_at(d, u)?)
}

/// Runs `f` once per sample over seeded streams and merges in stream order.
pub fn mc_estimate<R, F>(rng: &mut R, n: usize, f: F) -> Result<Estimate>
where
    R: Rng + ?Sized,
    F: Fn(&mut Stream) -> Result<f64> + Sync,
{
    let parts = par_streams(rng, n, DEFAULT_STREAMS, |s, k| {
        let mut acc = Accumulator::new();
        for _ in 0..k {
            acc.push(f(s)?);
        }
        Ok(acc)
    });
    let parts: Vec<Accumulator> = parts.into_iter().collect::<Result<_>>()?;
    Ok(merge_all(&parts).estimate())
}

fn sample_pair(model: &Model, under: Measure, rng: &mut Stream) -> TreePair {
    match under {
        Measure::Null => model.sample_null(rng),
        Measure::Alt => model.sample_correlated(rng),
    }
}

/// `E[L_d^k]` under the chosen measure, by direct sampling.
pub fn mc_moment<R: Rng + ?Sized>(
    model: &Model,
    k: u32,
    under: Measure,
    n: usize,
    rng: &mut R,
) -> Result<Estimate> {
    mc_estimate(rng, n, |s| {
        let pair = sample_pair(model, under, s);
        Ok((k as f64 * log_lr(model, &pair)?).exp())
    })
}

/// `E_{P0}[L(T_1,T_2) L(T_2,T_3) ... L(T_m,T_1)]` over `m` independent GW
/// trees; `m = 1` gives `E[L(T, T)]`.
pub fn cyclic_moment<R: Rng + ?Sized>(
    model: &Model,
    m: usize,
    n: usize,
    rng: &mut R,
) -> Result<Estimate> {
    assert!(m >= 1, "a cycle needs at least one tree");
    mc_estimate(rng, n, |s| {
        let trees: Vec<Tree> = (0..m).map(|_| model.sample_gw(s)).collect();
        let mut acc = 0.0;
        for i in 0..m {
            acc += log_lr_at(model, model.params().d, trees[i], trees[(i + 1) % m])?;
        }
        Ok(acc.exp())
    })
}

/// `KL(P1_d || P0_d) = E_{P1}[log L_d]`.
pub fn mc_kl<R: Rng + ?Sized>(model: &Model, n: usize, rng: &mut R) -> Result<Estimate> {
    mc_estimate(rng, n, |s| log_lr(model, &model.sample_correlated(s)))
}
