//! One-node-per-cluster selection maximizing total pairwise edge weight.
//!
//! This is the generalized minimum clique problem with cost `-a_ij`:
//! exhaustive enumeration for exactness, and a restarted hill climber over
//! single-node swaps for sizes where enumeration is out of reach.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::affinity::MatchGraph;
use crate::error::{Error, Result};

/// Largest number of combinations [`solve_exact`] will enumerate.
pub const ENUMERATION_BUDGET: u64 = 1_000_000;

/// Minimum gain for the local search to accept a swap.
const IMPROVEMENT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmcpMethod {
    Exact,
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmcpSolution {
    /// One node index per cluster, in cluster order.
    pub selection: Vec<usize>,
    pub total_weight: f64,
    pub method: GmcpMethod,
    /// Edge-weight additions performed by the search.
    pub evaluations: u64,
}

/// Node indices of every cluster, in node order.
pub fn cluster_members(g: &MatchGraph) -> Result<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); g.n_clusters];
    for (i, node) in g.nodes.iter().enumerate() {
        members[node.cluster].push(i);
    }
    if let Some(c) = members.iter().position(Vec::is_empty) {
        return Err(Error::InvalidParameter(format!("cluster {c} has no nodes")));
    }
    Ok(members)
}

/// Number of one-per-cluster selections, saturating.
pub fn combination_count(g: &MatchGraph) -> Result<u64> {
    Ok(cluster_members(g)?
        .iter()
        .fold(1u64, |acc, c| acc.saturating_mul(c.len() as u64)))
}

/// Sum of `a_ij` over selected pairs, accumulated column by column
/// (`j = 1..`, `i < j`).
pub fn selection_weight(g: &MatchGraph, selection: &[usize]) -> f64 {
    let mut total = 0.0;
    for j in 1..selection.len() {
        let row = g.matrix.row(selection[j]);
        for &i in &selection[..j] {
            total += row[i];
        }
    }
    total
}

fn single_cluster(members: &[usize], g: &MatchGraph, method: GmcpMethod) -> GmcpSolution {
    let best = members
        .iter()
        .copied()
        .max_by(|&i, &j| {
            let (ni, nj) = (&g.nodes[i], &g.nodes[j]);
            ni.similarity
                .total_cmp(&nj.similarity)
                .then_with(|| nj.ref_id.cmp(&ni.ref_id))
        })
        .expect("cluster is non-empty");
    GmcpSolution {
        selection: vec![best],
        total_weight: 0.0,
        method,
        evaluations: 0,
    }
}

/// Global optimum by exhaustive depth-first enumeration. Among equal totals
/// the lexicographically first selection wins. A single cluster yields its
/// highest-similarity node.
pub fn solve_exact(g: &MatchGraph) -> Result<GmcpSolution> {
    let members = cluster_members(g)?;
    let combos = combination_count(g)?;
    if combos > ENUMERATION_BUDGET {
        return Err(Error::Scale(format!(
            "{combos} combinations exceed the enumeration budget of {ENUMERATION_BUDGET}; use solve_local"
        )));
    }
    if members.len() == 1 {
        return Ok(single_cluster(&members[0], g, GmcpMethod::Exact));
    }

    struct Search<'a> {
        g: &'a MatchGraph,
        members: &'a [Vec<usize>],
        current: Vec<usize>,
        best: Vec<usize>,
        best_total: f64,
        evaluations: u64,
    }

    impl Search<'_> {
        fn descend(&mut self, depth: usize, total: f64) {
            if depth == self.members.len() {
                if total > self.best_total {
                    self.best_total = total;
                    self.best.copy_from_slice(&self.current);
                }
                return;
            }
            for &v in &self.members[depth] {
                let row = self.g.matrix.row(v);
                // Same summation order as `selection_weight`.
                let mut t = total;
                for &u in &self.current[..depth] {
                    t += row[u];
                }
                self.evaluations += depth as u64;
                self.current[depth] = v;
                self.descend(depth + 1, t);
            }
        }
    }

    let nc = members.len();
    let mut search = Search {
        g,
        members: &members,
        current: vec![0; nc],
        best: vec![0; nc],
        best_total: f64::NEG_INFINITY,
        evaluations: 0,
    };
    search.descend(0, 0.0);
    Ok(GmcpSolution {
        selection: search.best,
        total_weight: search.best_total,
        method: GmcpMethod::Exact,
        evaluations: search.evaluations,
    })
}

/// Change in total weight from putting `v` in place of `selection[c]`.
fn swap_gain(g: &MatchGraph, selection: &[usize], c: usize, v: usize) -> f64 {
    let u = selection[c];
    let (rv, ru) = (g.matrix.row(v), g.matrix.row(u));
    selection
        .iter()
        .enumerate()
        .filter(|&(c2, _)| c2 != c)
        .map(|(_, &w)| rv[w] - ru[w])
        .sum()
}

/// Best single swap as `(cluster, node, gain)`, if any gains more than the
/// improvement tolerance.
pub fn best_swap(g: &MatchGraph, members: &[Vec<usize>], selection: &[usize]) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for (c, nodes) in members.iter().enumerate() {
        for &v in nodes {
            if v == selection[c] {
                continue;
            }
            let gain = swap_gain(g, selection, c, v);
            if gain > IMPROVEMENT_TOL && best.is_none_or(|b| gain > b.2) {
                best = Some((c, v, gain));
            }
        }
    }
    best
}

/// Steepest-ascent hill climbing from `restarts` random selections. Restart
/// `r` draws from stream `r` of a generator seeded with `seed`.
pub fn solve_local(g: &MatchGraph, restarts: usize, seed: u64) -> Result<GmcpSolution> {
    if restarts == 0 {
        return Err(Error::InvalidParameter("restarts must be at least 1".into()));
    }
    let members = cluster_members(g)?;
    if members.len() == 1 {
        return Ok(single_cluster(&members[0], g, GmcpMethod::Local));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut evaluations = 0u64;
    let per_swap_scan = (g.n() * (members.len() - 1)) as u64;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let mut selection: Vec<usize> = members
            .iter()
            .map(|nodes| nodes[rng.random_range(0..nodes.len())])
            .collect();
        loop {
            evaluations += per_swap_scan;
            match best_swap(g, &members, &selection) {
                Some((c, v, _)) => selection[c] = v,
                None => break,
            }
        }
        let total = selection_weight(g, &selection);
        if best.as_ref().is_none_or(|b| total > b.1) {
            best = Some((selection, total));
        }
    }
    let (selection, total_weight) = best.expect("at least one restart");
    Ok(GmcpSolution {
        selection,
        total_weight,
        method: GmcpMethod::Local,
        evaluations,
    })
}
