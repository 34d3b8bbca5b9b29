//! Correlated Erdős–Rényi graph pairs and partial alignment by scoring
//! vertex pairs with the likelihood ratio of their neighborhood trees.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Geometric};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::likelihood::log_lr_at;
use crate::model::Model;
use crate::trees::Tree;

/// Simple undirected graph on `0..n` with sorted adjacency lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    adj: Vec<Vec<u32>>,
}

impl Graph {
    /// Builds a graph from an edge list; duplicate edges are merged.
    pub fn from_edges(n: usize, edges: &[(u32, u32)]) -> Result<Graph> {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a as usize >= n || b as usize >= n {
                return Err(Error::invalid(format!("edge ({a}, {b}) outside 0..{n}")));
            }
            if a == b {
                return Err(Error::invalid(format!("self-loop at {a}")));
            }
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Graph { adj })
    }

    pub fn n(&self) -> usize {
        self.adj.len()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    pub fn neighbors(&self, v: usize) -> &[u32] {
        &self.adj[v]
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adj[a].binary_search(&(b as u32)).is_ok()
    }

    /// Edges `(a, b)` with `a < b`, in increasing order.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for (a, list) in self.adj.iter().enumerate() {
            out.extend(
                list.iter()
                    .filter(|&&b| b as usize > a)
                    .map(|&b| (a as u32, b)),
            );
        }
        out
    }
}

/// Writes `u v` lines, one per edge.
pub fn write_edges<W: Write>(g: &Graph, mut w: W) -> std::io::Result<()> {
    for (a, b) in g.edges() {
        writeln!(w, "{a} {b}")?;
    }
    Ok(())
}

/// Reads `u v` lines; blank lines and `#` comments are skipped. `n` is one
/// past the largest vertex unless given.
pub fn read_edges<R: BufRead>(r: R, n: Option<usize>) -> Result<Graph> {
    let mut edges = Vec::new();
    let mut offset = 0;
    for line in r.lines() {
        let line = line.map_err(|e| Error::invalid(e.to_string()))?;
        let body = line.split('#').next().unwrap_or("").trim();
        if !body.is_empty() {
            let mut it = body.split_whitespace().map(str::parse::<u32>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => edges.push((a, b)),
                _ => {
                    return Err(Error::Parse {
                        offset,
                        message: format!("expected `u v`, got {body:?}"),
                    })
                }
            }
        }
        offset += line.len() + 1;
    }
    let n = n.unwrap_or_else(|| {
        edges
            .iter()
            .map(|&(a, b)| a.max(b) as usize + 1)
            .max()
            .unwrap_or(0)
    });
    Graph::from_edges(n, &edges)
}

/// `G` and `H`, where `H` is a relabeling by `pi_star` of a graph
/// correlated with `G`.
#[derive(Clone, Debug)]
pub struct CorrelatedGraphPair {
    pub lambda: f64,
    pub s: f64,
    pub g: Graph,
    pub h: Graph,
    /// Vertex `u` of `G` corresponds to `pi_star[u]` in `H`.
    pub pi_star: Vec<u32>,
}

impl CorrelatedGraphPair {
    pub fn n(&self) -> usize {
        self.g.n()
    }

    pub fn q(&self) -> f64 {
        self.lambda / self.n() as f64
    }
}

/// Samples a correlated pair: each vertex pair carries edges in both
/// graphs with probability `q^2 + s q (1-q)` and in exactly one of them
/// with probability `q (1-q) (1-s)` each, where `q = lambda / n`.
pub fn gen_correlated_er<R: Rng + ?Sized>(
    n: usize,
    lambda: f64,
    s: f64,
    rng: &mut R,
) -> Result<CorrelatedGraphPair> {
    if n < 2 {
        return Err(Error::invalid("need at least two vertices"));
    }
    if !(lambda > 0.0 && lambda < n as f64) {
        return Err(Error::invalid(format!(
            "need 0 < lambda < n, got lambda = {lambda}, n = {n}"
        )));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("s = {s} outside [0, 1]")));
    }
    let q = lambda / n as f64;
    let both = q * q + s * q * (1.0 - q);
    let one = q * (1.0 - q) * (1.0 - s);
    let any = both + 2.0 * one;
    let mut g_edges = Vec::new();
    let mut h_edges = Vec::new();
    let total = n as u64 * (n as u64 - 1) / 2;
    let skip = Geometric::new(any).map_err(|e| Error::invalid(e.to_string()))?;
    // Walk the pairs (i, j), i < j, in row-major order, jumping over
    // pairs without any edge.
    let (mut i, mut row_start) = (0u64, 0u64);
    let row_len = |i: u64| n as u64 - 1 - i;
    let mut k = skip.sample(rng);
    while k < total {
        while k >= row_start + row_len(i) {
            row_start += row_len(i);
            i += 1;
        }
        let j = i + 1 + (k - row_start);
        let e = (i as u32, j as u32);
        let x = rng.random::<f64>() * any;
        if x < both {
            g_edges.push(e);
            h_edges.push(e);
        } else if x < both + one {
            g_edges.push(e);
        } else {
            h_edges.push(e);
        }
        k = k.saturating_add(1).saturating_add(skip.sample(rng));
    }
    let mut pi_star: Vec<u32> = (0..n as u32).collect();
    pi_star.shuffle(rng);
    let relabeled: Vec<(u32, u32)> = h_edges
        .iter()
        .map(|&(a, b)| (pi_star[a as usize], pi_star[b as usize]))
        .collect();
    Ok(CorrelatedGraphPair {
        lambda,
        s,
        g: Graph::from_edges(n, &g_edges)?,
        h: Graph::from_edges(n, &relabeled)?,
        pi_star,
    })
}

/// The depth-`d` neighborhood of a vertex as a rooted tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Neighborhood {
    pub tree: Tree,
    /// The ball had a cycle through a vertex at distance `< d`; `tree` is
    /// then the BFS spanning tree.
    pub cycle: bool,
}

/// BFS from `v` to depth `d`.
pub fn neighborhood_tree(g: &Graph, v: usize, d: usize) -> Neighborhood {
    let mut order = vec![v];
    let mut parent = vec![usize::MAX];
    let mut level = vec![0usize];
    let mut seen = std::collections::HashMap::from([(v, 0usize)]);
    let mut cycle = false;
    let mut queue = VecDeque::from([0usize]);
    while let Some(k) = queue.pop_front() {
        if level[k] == d {
            continue;
        }
        let x = order[k];
        for &y in g.neighbors(x) {
            let y = y as usize;
            match seen.get(&y) {
                None => {
                    seen.insert(y, order.len());
                    order.push(y);
                    parent.push(k);
                    level.push(level[k] + 1);
                    queue.push_back(order.len() - 1);
                }
                Some(&j) => {
                    if j != parent[k] {
                        cycle = true;
                    }
                }
            }
        }
    }
    let mut kids: Vec<Vec<Tree>> = vec![Vec::new(); order.len()];
    let mut tree = Tree::trivial();
    for k in (0..order.len()).rev() {
        tree = Tree::from_children(std::mem::take(&mut kids[k]));
        if k > 0 {
            kids[parent[k]].push(tree);
        }
    }
    Neighborhood { tree, cycle }
}

/// Depth-`d` tree of non-backtracking walks from `v`. Equal to the BFS
/// tree when the ball is a tree, and invariant under relabeling otherwise.
pub fn unfolded_tree(g: &Graph, v: usize, d: usize) -> Tree {
    fn walk(g: &Graph, x: usize, from: usize, d: usize) -> Tree {
        if d == 0 {
            return Tree::trivial();
        }
        Tree::from_children(
            g.neighbors(x)
                .iter()
                .filter(|&&y| y as usize != from)
                .map(|&y| walk(g, y as usize, x, d - 1)),
        )
    }
    walk(g, v, usize::MAX, d)
}

/// How vertex neighborhoods become trees for scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TreeKind {
    /// [`neighborhood_tree`]: BFS spanning tree, with a cycle flag.
    Bfs,
    /// [`unfolded_tree`]; the cycle flag still comes from the BFS.
    Unfolded,
}

/// Candidate generation and scoring limits of [`score_candidates`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignConfig {
    pub d: usize,
    pub tree: TreeKind,
    /// Score every pair when `n` is at most this.
    pub all_pairs_up_to: usize,
    /// Candidates `u'` must have `|deg u - deg u'|` at most this.
    pub degree_window: usize,
    /// Per `u`, keep this many candidates by neighbor-degree profile.
    pub profile_keep: usize,
    /// Per `u`, keep this many candidates by the depth-`(d-1)` score.
    pub prefilter_keep: usize,
    /// Maximum number of depth-`d` likelihood evaluations.
    pub budget: usize,
}

impl AlignConfig {
    pub fn new(d: usize) -> Self {
        AlignConfig {
            d,
            tree: TreeKind::Unfolded,
            all_pairs_up_to: 500,
            degree_window: 1,
            profile_keep: 40,
            prefilter_keep: 3,
            budget: 1_000_000,
        }
    }
}

/// Scored candidate pairs, best first.
#[derive(Clone, Debug)]
pub struct Scored {
    n: usize,
    /// `(score, u, u')`.
    candidates: Vec<(f64, u32, u32)>,
    pi_star: Vec<u32>,
    flagged_g: Vec<bool>,
    flagged_h: Vec<bool>,
    /// The evaluation budget ran out before all candidates were scored.
    pub truncated: bool,
    /// Candidates dropped because their likelihood exceeded the model budget.
    pub skipped: usize,
}

/// One matched pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub u: u32,
    pub u_prime: u32,
    pub score: f64,
    pub correct: bool,
    /// Either endpoint had a cycle in its neighborhood.
    pub flagged: bool,
}

/// A partial one-to-one matching between the vertices of `G` and `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialAlignment {
    pub n: usize,
    pub matches: Vec<Match>,
    pub truncated: bool,
}

impl PartialAlignment {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn correct(&self) -> usize {
        self.matches.iter().filter(|m| m.correct).count()
    }

    pub fn wrong(&self) -> usize {
        self.len() - self.correct()
    }

    /// Matched vertices as a fraction of `n`.
    pub fn coverage(&self) -> f64 {
        self.len() as f64 / self.n as f64
    }

    /// Correct matches among matched pairs (zero when empty).
    pub fn correct_fraction(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.correct() as f64 / self.len() as f64
        }
    }

    pub fn error_fraction(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.wrong() as f64 / self.len() as f64
        }
    }

    /// The same statistics over pairs whose neighborhoods were trees.
    pub fn unflagged(&self) -> PartialAlignment {
        PartialAlignment {
            n: self.n,
            matches: self
                .matches
                .iter()
                .copied()
                .filter(|m| !m.flagged)
                .collect(),
            truncated: self.truncated,
        }
    }
}

impl Scored {
    pub fn candidates(&self) -> &[(f64, u32, u32)] {
        &self.candidates
    }

    /// Greedy one-to-one assembly by descending score over pairs scoring
    /// at least `log_a`.
    pub fn assemble(&self, log_a: f64) -> PartialAlignment {
        let mut used_g = vec![false; self.n];
        let mut used_h = vec![false; self.n];
        let mut matches = Vec::new();
        for &(score, u, v) in &self.candidates {
            if score < log_a {
                break;
            }
            let (ui, vi) = (u as usize, v as usize);
            if used_g[ui] || used_h[vi] {
                continue;
            }
            used_g[ui] = true;
            used_h[vi] = true;
            matches.push(Match {
                u,
                u_prime: v,
                score,
                correct: self.pi_star[ui] == v,
                flagged: self.flagged_g[ui] || self.flagged_h[vi],
            });
        }
        PartialAlignment {
            n: self.n,
            matches,
            truncated: self.truncated || self.skipped > 0,
        }
    }
}

fn profile(g: &Graph, v: usize) -> Vec<usize> {
    let mut p: Vec<usize> = g
        .neighbors(v)
        .iter()
        .map(|&w| g.degree(w as usize))
        .collect();
    p.sort_unstable_by(|a, b| b.cmp(a));
    p
}

fn profile_distance(a: &[usize], b: &[usize]) -> usize {
    let len = a.len().max(b.len());
    (0..len)
        .map(|i| {
            a.get(i)
                .copied()
                .unwrap_or(0)
                .abs_diff(b.get(i).copied().unwrap_or(0))
        })
        .sum()
}

fn best_per_row(mut scored: Vec<(f64, u32, u32)>, keep: usize) -> Vec<(u32, u32)> {
    scored.sort_by(|a, b| a.1.cmp(&b.1).then(b.0.total_cmp(&a.0)).then(a.2.cmp(&b.2)));
    let mut out = Vec::new();
    let mut i = 0;
    while i < scored.len() {
        let u = scored[i].1;
        let mut taken = 0;
        while i < scored.len() && scored[i].1 == u {
            if taken < keep {
                out.push((u, scored[i].2));
                taken += 1;
            }
            i += 1;
        }
    }
    out
}

/// Scores candidate pairs `(u, u')` by `log L_d` of their depth-`d`
/// neighborhood trees.
pub fn score_candidates(
    pair: &CorrelatedGraphPair,
    model: &Model,
    cfg: &AlignConfig,
) -> Result<Scored> {
    let n = pair.n();
    let d = cfg.d;
    let nb = |g: &Graph, depth: usize| -> Vec<Neighborhood> {
        (0..n)
            .into_par_iter()
            .map(|v| {
                let mut nb = neighborhood_tree(g, v, depth);
                if cfg.tree == TreeKind::Unfolded {
                    nb.tree = unfolded_tree(g, v, depth);
                }
                nb
            })
            .collect()
    };
    let (tg, th) = (nb(&pair.g, d), nb(&pair.h, d));
    // Pairs whose likelihood exceeds the model budget are dropped and
    // counted.
    let score = |u: u32, v: u32, a: &[Neighborhood], b: &[Neighborhood], depth| match log_lr_at(
        model,
        depth,
        a[u as usize].tree,
        b[v as usize].tree,
    ) {
        Ok(x) => Ok(Some((x, u, v))),
        Err(Error::ComplexityExceeded { .. }) => Ok(None),
        Err(e) => Err(e),
    };

    let mut skipped = 0;
    let mut cands: Vec<(u32, u32)> = if n <= cfg.all_pairs_up_to || d == 0 {
        (0..n as u32)
            .flat_map(|u| (0..n as u32).map(move |v| (u, v)))
            .collect()
    } else {
        let (pg, ph): (Vec<_>, Vec<_>) = (
            (0..n).map(|v| profile(&pair.g, v)).collect(),
            (0..n).map(|v| profile(&pair.h, v)).collect(),
        );
        let mut by_degree: Vec<Vec<u32>> = Vec::new();
        for v in 0..n {
            let k = pair.h.degree(v);
            if by_degree.len() <= k {
                by_degree.resize(k + 1, Vec::new());
            }
            by_degree[k].push(v as u32);
        }
        let near: Vec<(f64, u32, u32)> = (0..n)
            .into_par_iter()
            .flat_map_iter(|u| {
                let k = pair.g.degree(u);
                let lo = k.saturating_sub(cfg.degree_window);
                let hi = (k + cfg.degree_window).min(by_degree.len().saturating_sub(1));
                let mut row: Vec<(f64, u32, u32)> = (lo..=hi)
                    .filter(|&j| j < by_degree.len())
                    .flat_map(|j| by_degree[j].iter())
                    .map(|&v| {
                        (
                            -(profile_distance(&pg[u], &ph[v as usize]) as f64),
                            u as u32,
                            v,
                        )
                    })
                    .collect();
                row.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)));
                row.truncate(cfg.profile_keep);
                row
            })
            .collect();
        let near = best_per_row(near, cfg.profile_keep);
        if d >= 2 && cfg.prefilter_keep > 0 {
            let (sg, sh) = (nb(&pair.g, d - 1), nb(&pair.h, d - 1));
            let pre: Vec<Option<(f64, u32, u32)>> = near
                .par_iter()
                .map(|&(u, v)| score(u, v, &sg, &sh, d - 1))
                .collect::<Result<_>>()?;
            skipped += pre.iter().filter(|x| x.is_none()).count();
            best_per_row(pre.into_iter().flatten().collect(), cfg.prefilter_keep)
        } else {
            near
        }
    };
    let truncated = cands.len() > cfg.budget;
    cands.truncate(cfg.budget);
    let scored: Vec<Option<(f64, u32, u32)>> = cands
        .par_iter()
        .map(|&(u, v)| score(u, v, &tg, &th, d))
        .collect::<Result<_>>()?;
    skipped += scored.iter().filter(|x| x.is_none()).count();
    let mut candidates: Vec<(f64, u32, u32)> = scored.into_iter().flatten().collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    Ok(Scored {
        n,
        candidates,
        pi_star: pair.pi_star.clone(),
        flagged_g: tg.iter().map(|t| t.cycle).collect(),
        flagged_h: th.iter().map(|t| t.cycle).collect(),
        truncated,
        skipped,
    })
}

/// Scores candidates and assembles the matching at threshold `log_a`.
pub fn align_lr(
    pair: &CorrelatedGraphPair,
    model: &Model,
    cfg: &AlignConfig,
    log_a: f64,
) -> Result<PartialAlignment> {
    Ok(score_candidates(pair, model, cfg)?.assemble(log_a))
}
