//! Dominant-set extraction with discrete replicator dynamics.
//!
//! The solver starts at the barycenter of the simplex and iterates
//! `x_i <- x_i (Ax)_i / (x^T A x)` until the L1 change drops below the
//! tolerance. For symmetric nonnegative `A` the payoff `x^T A x` never
//! decreases along the trajectory, and the support of the limit is a
//! dominant set whenever the limit is a strict local maximizer.

pub mod oracle;

use std::collections::BTreeMap;
use std::io::Write;

pub use oracle::{
    all_dominant_sets, best_dominant_set, oracle_ws, total_weight, verify_dominant, Dominance, VerifiedSet,
    WeightOracle, VERIFY_TOL,
};

use crate::affinity::MatchGraph;
use crate::error::{Error, Result};
use crate::matrix::AffinityMatrix;

/// Slack allowed on simplex sums and on payoff monotonicity.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop once `||x_{t+1} - x_t||_1` falls below this.
    pub convergence_tol: f64,
    /// Coordinates above this form the support.
    pub support_epsilon: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 10_000,
            convergence_tol: 1e-8,
            support_epsilon: 1e-4,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0
            || self.convergence_tol.is_nan()
            || self.convergence_tol <= 0.0
            || self.support_epsilon.is_nan()
            || self.support_epsilon <= 0.0
        {
            return Err(Error::InvalidParameter(format!("bad solver config {self:?}")));
        }
        Ok(())
    }
}

/// A point of the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn barycenter(n: usize) -> Self {
        SimplexVector(vec![1.0 / n as f64; n])
    }

    pub fn new(x: Vec<f64>) -> Result<Self> {
        if x.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter(
                "simplex entries must be finite and >= 0".into(),
            ));
        }
        let sum: f64 = x.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL * x.len().max(1) as f64 {
            return Err(Error::InvalidParameter(format!("simplex entries sum to {sum}")));
        }
        Ok(SimplexVector(x))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One replicator update. Fails when the current payoff is zero.
pub fn replicator_step(a: &AffinityMatrix, x: &SimplexVector) -> Result<SimplexVector> {
    let mut ax = vec![0.0; a.n()];
    let mut next = vec![0.0; a.n()];
    step_into(a, x.as_slice(), &mut ax, &mut next)?;
    Ok(SimplexVector(next))
}

/// Writes the update of `x` into `next`; returns the payoff of `x`.
fn step_into(a: &AffinityMatrix, x: &[f64], ax: &mut [f64], next: &mut [f64]) -> Result<f64> {
    a.mul_vec(x, ax);
    let payoff = dot(x, ax);
    update(x, ax, payoff, next)?;
    Ok(payoff)
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// `next_i = x_i (Ax)_i / payoff`, renormalized against round-off.
/// Coordinates that decay into the subnormal range are flushed to zero.
fn update(x: &[f64], ax: &[f64], payoff: f64, next: &mut [f64]) -> Result<()> {
    if payoff.is_nan() || payoff <= 0.0 {
        return Err(Error::ZeroPayoff);
    }
    let mut sum = 0.0;
    for ((n, xi), v) in next.iter_mut().zip(x).zip(ax) {
        *n = xi * v / payoff;
        if *n < f64::MIN_POSITIVE {
            *n = 0.0;
        }
        sum += *n;
    }
    for n in next.iter_mut() {
        *n /= sum;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominantSetResult {
    /// Node indices with `x_i > support_epsilon`, ascending.
    pub support: Vec<usize>,
    pub x: SimplexVector,
    /// `x^T A x` at the returned point.
    pub payoff: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// State after each replicator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub iteration: usize,
    /// Payoff at the new point.
    pub payoff: f64,
    pub l1_change: f64,
    pub support_size: usize,
    /// Deviation of the coordinate sum from one.
    pub sum_error: f64,
    pub min_coordinate: f64,
}

/// Runs replicator dynamics from the barycenter.
pub fn solve(a: &AffinityMatrix, config: &SolverConfig) -> Result<DominantSetResult> {
    solve_observed(a, config, |_| {})
}

/// Like [`solve`], calling `observe` after every step.
pub fn solve_observed<F: FnMut(&StepInfo)>(
    a: &AffinityMatrix,
    config: &SolverConfig,
    mut observe: F,
) -> Result<DominantSetResult> {
    config.validate()?;
    let n = a.n();
    if n == 0 {
        return Err(Error::EmptySelection("graph has no nodes"));
    }
    if n == 1 {
        return Ok(DominantSetResult {
            support: vec![0],
            x: SimplexVector(vec![1.0]),
            payoff: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    if a.is_all_zero() {
        return Err(Error::NoEdges);
    }

    let mut x = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let mut ax = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    let mut previous = f64::NEG_INFINITY;
    // Step info waits one iteration for the payoff of its point, which falls
    // out of the next mat-vec.
    let mut pending: Option<StepInfo> = None;
    let payoff = loop {
        a.mul_vec(&x, &mut ax);
        let payoff = dot(&x, &ax);
        if let Some(mut info) = pending.take() {
            info.payoff = payoff;
            debug_assert!(
                payoff >= previous - SIMPLEX_TOL,
                "payoff decreased from {previous} to {payoff} at step {iterations}"
            );
            observe(&info);
        }
        previous = payoff;
        if converged || iterations >= config.max_iterations {
            break payoff;
        }
        update(&x, &ax, payoff, &mut next)?;
        iterations += 1;
        let change: f64 = x.iter().zip(&next).map(|(p, q)| (p - q).abs()).sum();
        std::mem::swap(&mut x, &mut next);
        pending = Some(StepInfo {
            iteration: iterations,
            payoff: f64::NAN,
            l1_change: change,
            support_size: x.iter().filter(|v| **v > config.support_epsilon).count(),
            sum_error: (x.iter().sum::<f64>() - 1.0).abs(),
            min_coordinate: x.iter().copied().fold(f64::INFINITY, f64::min),
        });
        converged = change < config.convergence_tol;
    };
    let support = (0..n).filter(|&i| x[i] > config.support_epsilon).collect();
    Ok(DominantSetResult {
        support,
        x: SimplexVector(x),
        payoff,
        iterations,
        converged,
    })
}

/// Solves and writes `iteration,payoff,support_size` rows as CSV.
pub fn solve_traced<W: Write>(a: &AffinityMatrix, config: &SolverConfig, trace: W) -> Result<DominantSetResult> {
    let mut w = csv::Writer::from_writer(trace);
    w.write_record(["iteration", "payoff", "support_size"])?;
    let mut failure = None;
    let result = solve_observed(a, config, |s| {
        if failure.is_none() {
            let row = [
                s.iteration.to_string(),
                s.payoff.to_string(),
                s.support_size.to_string(),
            ];
            if let Err(e) = w.write_record(&row) {
                failure = Some(e);
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    w.flush()?;
    Ok(result)
}

/// Repeatedly extracts a dominant set and removes its nodes, until no edges
/// remain or `max_sets` sets were found.
pub fn peel_dominant_sets(
    a: &AffinityMatrix,
    config: &SolverConfig,
    max_sets: usize,
) -> Result<Vec<DominantSetResult>> {
    let mut remaining = a.clone();
    let mut removed: Vec<usize> = Vec::new();
    let mut sets = Vec::new();
    while sets.len() < max_sets && !remaining.is_all_zero() {
        let r = solve(&remaining, config)?;
        if r.support.is_empty() {
            break;
        }
        removed.extend(&r.support);
        remaining = a.without_nodes(&removed);
        sets.push(r);
    }
    Ok(sets)
}

/// Keeps at most one support node per cluster: the one with the largest
/// coordinate, then the larger similarity, then the smaller reference id.
///
/// Returns cluster index → node index; clusters without support nodes are
/// absent.
pub fn select_per_cluster(result: &DominantSetResult, g: &MatchGraph) -> Result<BTreeMap<usize, usize>> {
    if result.support.is_empty() {
        return Err(Error::EmptySelection("dominant set has an empty support"));
    }
    if result.x.len() != g.n() {
        return Err(Error::DimensionMismatch {
            expected: g.n(),
            actual: result.x.len(),
        });
    }
    let x = result.x.as_slice();
    let mut picks: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in &result.support {
        let cluster = g.nodes[i].cluster;
        let better = match picks.get(&cluster) {
            None => true,
            Some(&j) => {
                let (ni, nj) = (&g.nodes[i], &g.nodes[j]);
                x[i].total_cmp(&x[j])
                    .then(ni.similarity.total_cmp(&nj.similarity))
                    .then_with(|| nj.ref_id.cmp(&ni.ref_id))
                    .is_gt()
            }
        };
        if better {
            picks.insert(cluster, i);
        }
    }
    Ok(picks)
}

/// Per-cluster selection for a match graph, with the degenerate cases
/// resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSelection {
    /// Cluster index → node index.
    pub picks: BTreeMap<usize, usize>,
    pub result: Option<DominantSetResult>,
    /// Set when the graph had no edges and the best-scoring node was taken.
    pub degenerate: bool,
}

/// Solves `g` and selects per cluster. A graph without edges (for instance a
/// single cluster) yields the node with the highest similarity, flagged as
/// degenerate.
pub fn select_on_graph(g: &MatchGraph, config: &SolverConfig) -> Result<GraphSelection> {
    if g.n() == 0 {
        return Err(Error::EmptySelection("graph has no nodes"));
    }
    match solve(&g.matrix, config) {
        Ok(r) => {
            let picks = select_per_cluster(&r, g)?;
            Ok(GraphSelection {
                picks,
                result: Some(r),
                degenerate: false,
            })
        }
        Err(Error::NoEdges) | Err(Error::ZeroPayoff) => {
            let best = (0..g.n())
                .max_by(|&i, &j| {
                    let (ni, nj) = (&g.nodes[i], &g.nodes[j]);
                    ni.similarity
                        .total_cmp(&nj.similarity)
                        .then_with(|| nj.ref_id.cmp(&ni.ref_id))
                })
                .expect("non-empty graph");
            log::debug!("graph without edges; falling back to best-scoring node {best}");
            Ok(GraphSelection {
                picks: BTreeMap::from([(g.nodes[best].cluster, best)]),
                result: None,
                degenerate: true,
            })
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::{build_graph_from_nodes, AffinityParams, GraphNode};
    use crate::geo::GpsCoord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> AffinityMatrix {
        AffinityMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn step_fixed_points() {
        let a = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let x = SimplexVector::barycenter(2);
        let next = replicator_step(&a, &x).unwrap();
        assert_eq!(next.as_slice(), &[0.5, 0.5]);
        assert_eq!(a.quadratic_form(next.as_slice()), 0.5);

        let tri = m(&[&[0.0, 1.0, 1.0], &[1.0, 0.0, 1.0], &[1.0, 1.0, 0.0]]);
        let x = SimplexVector::barycenter(3);
        let next = replicator_step(&tri, &x).unwrap();
        for v in next.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((tri.quadratic_form(next.as_slice()) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_payoff_is_an_error() {
        let a = m(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]);
        let x = SimplexVector::new(vec![0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(replicator_step(&a, &x), Err(Error::ZeroPayoff)));
    }

    #[test]
    fn payoff_monotone_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.random_range(2..15);
            let mut a = AffinityMatrix::zeros(n);
            for i in 0..n {
                for j in (i + 1)..n {
                    a.set_sym(i, j, rng.random_range(0.0..1.0));
                }
            }
            let mut x = SimplexVector::barycenter(n);
            let mut p = a.quadratic_form(x.as_slice());
            for _ in 0..1000 {
                x = replicator_step(&a, &x).unwrap();
                let q = a.quadratic_form(x.as_slice());
                assert!(q >= p - SIMPLEX_TOL, "{q} < {p}");
                let s: f64 = x.as_slice().iter().sum();
                assert!((s - 1.0).abs() <= SIMPLEX_TOL);
                assert!(x.as_slice().iter().all(|v| *v >= 0.0));
                p = q;
            }
        }
    }

    #[test]
    fn solve_examples() {
        let single = AffinityMatrix::zeros(1);
        let r = solve(&single, &SolverConfig::default()).unwrap();
        assert_eq!((r.support.clone(), r.payoff), (vec![0], 0.0));

        let a = m(&[&[0.0, 1.0, 0.1], &[1.0, 0.0, 0.1], &[0.1, 0.1, 0.0]]);
        let r = solve(&a, &SolverConfig::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.support, vec![0, 1]);
        assert!(verify_dominant(&r.support, &a).unwrap());

        let tri = m(&[&[0.0, 1.0, 1.0], &[1.0, 0.0, 1.0], &[1.0, 1.0, 0.0]]);
        assert_eq!(solve(&tri, &SolverConfig::default()).unwrap().support, vec![0, 1, 2]);

        assert!(matches!(
            solve(&AffinityMatrix::zeros(3), &SolverConfig::default()),
            Err(Error::NoEdges)
        ));
        assert!(solve(&AffinityMatrix::zeros(0), &SolverConfig::default()).is_err());
    }

    #[test]
    fn solve_is_deterministic() {
        let a = m(&[&[0.0, 0.3, 0.7], &[0.3, 0.0, 0.2], &[0.7, 0.2, 0.0]]);
        let cfg = SolverConfig::default();
        assert_eq!(solve(&a, &cfg).unwrap(), solve(&a, &cfg).unwrap());
    }

    #[test]
    fn trace_has_one_row_per_iteration() {
        let a = m(&[&[0.0, 1.0, 0.1], &[1.0, 0.0, 0.1], &[0.1, 0.1, 0.0]]);
        let mut out = Vec::new();
        let r = solve_traced(&a, &SolverConfig::default(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), r.iterations + 1);
        assert!(text.starts_with("iteration,payoff,support_size\n1,"));
    }

    #[test]
    fn peel_off_separates_two_cliques() {
        let a = m(&[
            &[0.0, 1.0, 0.0, 0.0],
            &[1.0, 0.0, 0.0, 0.0],
            &[0.0, 0.0, 0.0, 0.5],
            &[0.0, 0.0, 0.5, 0.0],
        ]);
        let sets = peel_dominant_sets(&a, &SolverConfig::default(), 5).unwrap();
        let supports: Vec<Vec<usize>> = sets.iter().map(|s| s.support.clone()).collect();
        assert_eq!(supports, vec![vec![0, 1], vec![2, 3]]);
    }

    fn node(id: &str, cluster: usize, s: f64) -> GraphNode {
        GraphNode {
            ref_id: id.into(),
            cluster,
            gps: GpsCoord::new(40.0, -80.0).unwrap(),
            similarity: s,
        }
    }

    #[test]
    fn selection_keeps_one_per_cluster() {
        let g = build_graph_from_nodes(
            vec![node("a", 0, 0.9), node("b", 0, 0.8), node("c", 1, 0.7)],
            2,
            AffinityParams::default(),
        )
        .unwrap();
        let result = DominantSetResult {
            support: vec![0, 1, 2],
            x: SimplexVector::new(vec![0.2, 0.3, 0.5]).unwrap(),
            payoff: 0.0,
            iterations: 0,
            converged: true,
        };
        let picks = select_per_cluster(&result, &g).unwrap();
        assert_eq!(picks, BTreeMap::from([(0, 1), (1, 2)]));

        let tie = DominantSetResult {
            x: SimplexVector::new(vec![0.25, 0.25, 0.5]).unwrap(),
            ..result.clone()
        };
        assert_eq!(select_per_cluster(&tie, &g).unwrap()[&0], 0);

        let empty = DominantSetResult {
            support: vec![],
            ..result
        };
        assert!(matches!(select_per_cluster(&empty, &g), Err(Error::EmptySelection(_))));
    }

    #[test]
    fn single_cluster_graph_is_degenerate() {
        let g = build_graph_from_nodes(
            vec![node("a", 0, 0.4), node("b", 0, 0.9), node("c", 0, 0.9)],
            1,
            AffinityParams::default(),
        )
        .unwrap();
        let sel = select_on_graph(&g, &SolverConfig::default()).unwrap();
        assert!(sel.degenerate);
        assert_eq!(sel.picks, BTreeMap::from([(0, 1)]));
    }
}
