//! Exponential-time reference implementation of the recursive dominant-set
//! weights, for verification at small scale only.
//!
//! For `R` non-empty, `j` in `R` and `i` outside it:
//!
//! ```text
//! phi_R(j, i) = a_ji - (1/|R|) * sum_{k in R} a_jk
//! w_S(i)      = 1                                          if |S| = 1
//!             = sum_{j in S\{i}} phi_{S\{i}}(j, i) * w_{S\{i}}(j)   otherwise
//! W(S)        = sum_{i in S} w_S(i)
//! ```

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::matrix::AffinityMatrix;

/// Largest set whose weights the oracle will expand.
pub const MAX_ORACLE_SET: usize = 15;
/// Largest graph the oracle accepts.
pub const MAX_ORACLE_NODES: usize = 20;
/// Values within this distance of zero count as zero, so they fail every
/// strict inequality in the dominance test.
pub const VERIFY_TOL: f64 = 1e-9;
/// Cap on sets visited by [`best_dominant_set`].
const FAMILY_BUDGET: usize = 200_000;

type Mask = u32;

fn bit(i: usize) -> Mask {
    1 << i
}

fn members(mask: Mask) -> impl Iterator<Item = usize> {
    (0..Mask::BITS as usize).filter(move |&i| mask & bit(i) != 0)
}

/// Memoizing evaluator of `w_S(i)` over one matrix.
pub struct WeightOracle<'a> {
    a: &'a AffinityMatrix,
    memo: HashMap<(Mask, usize), f64>,
}

impl<'a> WeightOracle<'a> {
    pub fn new(a: &'a AffinityMatrix) -> Result<Self> {
        if a.n() > MAX_ORACLE_NODES {
            return Err(Error::Scale(format!(
                "oracle supports at most {MAX_ORACLE_NODES} nodes, graph has {}",
                a.n()
            )));
        }
        Ok(WeightOracle {
            a,
            memo: HashMap::new(),
        })
    }

    fn mask_of(&self, set: &[usize]) -> Result<Mask> {
        let mut mask = 0;
        for &i in set {
            if i >= self.a.n() {
                return Err(Error::InvalidParameter(format!("node {i} out of range")));
            }
            mask |= bit(i);
        }
        if mask.count_ones() as usize > MAX_ORACLE_SET {
            return Err(Error::Scale(format!(
                "oracle supports sets of at most {MAX_ORACLE_SET} nodes"
            )));
        }
        if mask == 0 {
            return Err(Error::EmptySelection("oracle needs a non-empty set"));
        }
        Ok(mask)
    }

    fn phi(&self, rest: Mask, j: usize, i: usize) -> f64 {
        let size = rest.count_ones() as f64;
        let mean: f64 = members(rest).map(|k| self.a.get(j, k)).sum::<f64>() / size;
        self.a.get(j, i) - mean
    }

    fn w_mask(&mut self, mask: Mask, i: usize) -> f64 {
        if mask.count_ones() == 1 {
            return 1.0;
        }
        if let Some(&v) = self.memo.get(&(mask, i)) {
            return v;
        }
        let rest = mask & !bit(i);
        let mut total = 0.0;
        for j in members(rest) {
            total += self.phi(rest, j, i) * self.w_mask(rest, j);
        }
        self.memo.insert((mask, i), total);
        total
    }

    fn total_mask(&mut self, mask: Mask) -> f64 {
        members(mask).map(|i| self.w_mask(mask, i)).sum()
    }

    /// `w_S(i)`; `i` must belong to `set`.
    pub fn weight(&mut self, set: &[usize], i: usize) -> Result<f64> {
        let mask = self.mask_of(set)?;
        if mask & bit(i) == 0 {
            return Err(Error::InvalidParameter(format!("node {i} is not in the set")));
        }
        Ok(self.w_mask(mask, i))
    }

    /// `W(S)`
    pub fn total_weight(&mut self, set: &[usize]) -> Result<f64> {
        let mask = self.mask_of(set)?;
        Ok(self.total_mask(mask))
    }

    fn check_mask(&mut self, mask: Mask) -> Dominance {
        for i in members(mask) {
            let w = self.w_mask(mask, i);
            if w <= VERIFY_TOL {
                return Dominance::NotCoherent { node: i, weight: w };
            }
        }
        for i in (0..self.a.n()).filter(|&i| mask & bit(i) == 0) {
            let w = self.w_mask(mask | bit(i), i);
            if w >= -VERIFY_TOL {
                return Dominance::NotMaximal { node: i, weight: w };
            }
        }
        // Every non-empty subset, including the set itself.
        let mut sub = mask;
        while sub != 0 {
            let total = self.total_mask(sub);
            if total <= VERIFY_TOL {
                return Dominance::NonPositiveSubset {
                    subset: members(sub).collect(),
                    total,
                };
            }
            sub = (sub - 1) & mask;
        }
        Dominance::Dominant
    }

    /// Checks all three dominant-set conditions and reports the first failure.
    pub fn check(&mut self, set: &[usize]) -> Result<Dominance> {
        let mask = self.mask_of(set)?;
        // The outside test expands sets one larger than `set`.
        if mask.count_ones() as usize >= MAX_ORACLE_SET && (mask.count_ones() as usize) < self.a.n() {
            return Err(Error::Scale(format!(
                "oracle supports sets of at most {} nodes for the maximality test",
                MAX_ORACLE_SET - 1
            )));
        }
        Ok(self.check_mask(mask))
    }

    /// Payoff `x^T A x` of the set's characteristic vector `x_i = w_S(i) / W(S)`.
    pub fn characteristic_payoff(&mut self, set: &[usize]) -> Result<f64> {
        let mask = self.mask_of(set)?;
        let total = self.total_mask(mask);
        if total.abs() <= VERIFY_TOL {
            return Err(Error::UndefinedMetric("characteristic vector of a zero-weight set"));
        }
        let x: Vec<(usize, f64)> = members(mask).map(|i| (i, self.w_mask(mask, i) / total)).collect();
        let mut payoff = 0.0;
        for &(i, xi) in &x {
            for &(j, xj) in &x {
                payoff += xi * xj * self.a.get(i, j);
            }
        }
        Ok(payoff)
    }
}

/// Outcome of a dominance check.
#[derive(Debug, Clone, PartialEq)]
pub enum Dominance {
    Dominant,
    /// `w_S(node)` is not positive.
    NotCoherent {
        node: usize,
        weight: f64,
    },
    /// Adding the outside `node` would not decrease coherence.
    NotMaximal {
        node: usize,
        weight: f64,
    },
    /// Some non-empty subset has non-positive total weight.
    NonPositiveSubset {
        subset: Vec<usize>,
        total: f64,
    },
}

impl Dominance {
    pub fn is_dominant(&self) -> bool {
        matches!(self, Dominance::Dominant)
    }
}

/// `w_S(i)` evaluated directly from the recursion.
pub fn oracle_ws(set: &[usize], i: usize, a: &AffinityMatrix) -> Result<f64> {
    WeightOracle::new(a)?.weight(set, i)
}

/// `W(S)`
pub fn total_weight(set: &[usize], a: &AffinityMatrix) -> Result<f64> {
    WeightOracle::new(a)?.total_weight(set)
}

/// True iff `set` is a dominant set of `a`, with every strict inequality
/// required to hold by more than [`VERIFY_TOL`].
pub fn verify_dominant(set: &[usize], a: &AffinityMatrix) -> Result<bool> {
    Ok(WeightOracle::new(a)?.check(set)?.is_dominant())
}

/// A dominant set found by exhaustive search, with its characteristic payoff.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedSet {
    pub nodes: Vec<usize>,
    pub payoff: f64,
}

/// Every dominant set of `a`, found by growing sets whose subsets all have
/// positive total weight (that family is closed under taking subsets).
pub fn all_dominant_sets(a: &AffinityMatrix) -> Result<Vec<VerifiedSet>> {
    let mut oracle = WeightOracle::new(a)?;
    let n = a.n();
    let mut family: HashSet<Mask> = HashSet::new();
    let mut level: Vec<Mask> = (0..n).map(bit).collect();
    let mut found = Vec::new();
    while !level.is_empty() {
        family.extend(level.iter().copied());
        if family.len() > FAMILY_BUDGET {
            return Err(Error::Scale("too many positive-weight subsets to enumerate".into()));
        }
        let mut next = Vec::new();
        for &mask in &level {
            let size = mask.count_ones() as usize;
            if size < MAX_ORACLE_SET && oracle.check_mask(mask).is_dominant() {
                let nodes: Vec<usize> = members(mask).collect();
                let payoff = oracle.characteristic_payoff(&nodes)?;
                found.push(VerifiedSet { nodes, payoff });
            }
            if size + 1 >= MAX_ORACLE_SET {
                continue;
            }
            let top = members(mask).last().unwrap_or(0);
            for j in (top + 1)..n {
                let grown = mask | bit(j);
                let subsets_ok = members(grown).all(|k| family.contains(&(grown & !bit(k))));
                if subsets_ok && oracle.total_mask(grown) > VERIFY_TOL {
                    next.push(grown);
                }
            }
        }
        level = next;
    }
    Ok(found)
}

/// The dominant set with the largest characteristic payoff, if any.
pub fn best_dominant_set(a: &AffinityMatrix) -> Result<Option<VerifiedSet>> {
    Ok(all_dominant_sets(a)?
        .into_iter()
        .max_by(|x, y| x.payoff.total_cmp(&y.payoff)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> AffinityMatrix {
        AffinityMatrix::from_rows(&[vec![0.0, 1.0, 0.1], vec![1.0, 0.0, 0.1], vec![0.1, 0.1, 0.0]]).unwrap()
    }

    fn triangle() -> AffinityMatrix {
        AffinityMatrix::from_rows(&[vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]).unwrap()
    }

    #[test]
    fn singleton_weight_is_one() {
        assert_eq!(oracle_ws(&[2], 2, &example()).unwrap(), 1.0);
    }

    #[test]
    fn pair_weight_is_edge() {
        let a = example();
        assert_eq!(oracle_ws(&[1, 2], 2, &a).unwrap(), 0.1);
        assert_eq!(oracle_ws(&[0, 1], 1, &a).unwrap(), 1.0);
        assert!((total_weight(&[0, 2], &a).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_outside_weight() {
        // w_{0,1,2}(1) = phi_{0,2}(0,1) w_{0,2}(0) + phi_{0,2}(2,1) w_{0,2}(2)
        //             = 0.95 * 0.1 + 0.05 * 0.1
        let w = oracle_ws(&[0, 1, 2], 1, &example()).unwrap();
        assert!((w - 0.1).abs() < 1e-15, "{w}");
    }

    #[test]
    fn verify_examples() {
        let a = example();
        assert!(verify_dominant(&[0, 1], &a).unwrap());
        assert!(!verify_dominant(&[0, 2], &a).unwrap());
        assert!(!verify_dominant(&[0, 1, 2], &a).unwrap());
        assert!(verify_dominant(&[0, 1, 2], &triangle()).unwrap());
        assert!(!verify_dominant(&[0], &triangle()).unwrap());
    }

    #[test]
    fn isolated_singleton_is_not_dominant() {
        // Adding any node gives weight exactly zero, which is not < 0.
        let a = AffinityMatrix::zeros(3);
        let mut o = WeightOracle::new(&a).unwrap();
        assert!(matches!(o.check(&[1]).unwrap(), Dominance::NotMaximal { .. }));
        let single = AffinityMatrix::zeros(1);
        assert!(verify_dominant(&[0], &single).unwrap());
    }

    #[test]
    fn exhaustive_search_finds_the_pair() {
        let best = best_dominant_set(&example()).unwrap().unwrap();
        assert_eq!(best.nodes, vec![0, 1]);
        assert!((best.payoff - 0.5).abs() < 1e-15);
        let tri = best_dominant_set(&triangle()).unwrap().unwrap();
        assert_eq!(tri.nodes, vec![0, 1, 2]);
        assert!((tri.payoff - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn scale_limits() {
        let big = AffinityMatrix::zeros(21);
        assert!(matches!(WeightOracle::new(&big), Err(Error::Scale(_))));
        let a = AffinityMatrix::zeros(20);
        let set: Vec<usize> = (0..16).collect();
        assert!(matches!(oracle_ws(&set, 0, &a), Err(Error::Scale(_))));
        assert!(oracle_ws(&[], 0, &a).is_err());
        assert!(oracle_ws(&[1], 0, &a).is_err());
    }
}
