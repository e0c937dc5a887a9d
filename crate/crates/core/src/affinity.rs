//! Multipartite match graph over all retrieved reference buildings.
//!
//! Every retrieved candidate becomes one node, tagged with the cluster
//! (query building) that retrieved it. Nodes from different clusters are
//! joined by an edge weighted by GPS proximity and matching similarity:
//!
//! `a_ij = 0.5 * (exp(-d_ij^2 / (2 sigma^2)) + alpha * (s_i + s_j))`
//!
//! Nodes in the same cluster are never joined, and neither are two nodes
//! for the same reference building retrieved by different query buildings:
//! one building cannot match both.

use std::io::Write;

use crate::error::{Error, Result};
use crate::geo::{self, GpsCoord};
use crate::matrix::AffinityMatrix;
use crate::retrieval::{CandidateCluster, GpsLookup};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceUnit {
    Meters,
    Kilometers,
}

impl DistanceUnit {
    fn convert_meters(self, m: f64) -> f64 {
        match self {
            DistanceUnit::Meters => m,
            DistanceUnit::Kilometers => m / 1000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffinityParams {
    /// Gaussian kernel scale, in `unit`.
    pub sigma: f64,
    /// Weight of the similarity term.
    pub alpha: f64,
    pub unit: DistanceUnit,
}

impl Default for AffinityParams {
    fn default() -> Self {
        AffinityParams {
            sigma: 0.3,
            alpha: 0.5,
            unit: DistanceUnit::Kilometers,
        }
    }
}

impl AffinityParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Edge weight for two nodes `distance_m` apart with similarities `si`, `sj`.
    pub fn edge_weight(&self, distance_m: f64, si: f64, sj: f64) -> f64 {
        let d = self.unit.convert_meters(distance_m);
        0.5 * ((-d * d / (2.0 * self.sigma * self.sigma)).exp() + self.alpha * (si + sj))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub ref_id: String,
    pub cluster: usize,
    pub gps: GpsCoord,
    pub similarity: f64,
}

#[derive(Debug, Clone)]
pub struct MatchGraph {
    pub nodes: Vec<GraphNode>,
    pub matrix: AffinityMatrix,
    pub params: AffinityParams,
    pub n_clusters: usize,
}

impl MatchGraph {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    /// Writes a plain-text dump: a header, one line per node, then the matrix.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        let unit = match self.params.unit {
            DistanceUnit::Meters => "m",
            DistanceUnit::Kilometers => "km",
        };
        writeln!(
            w,
            "# match-graph n={} clusters={} sigma={} alpha={} unit={}",
            self.n(),
            self.n_clusters,
            self.params.sigma,
            self.params.alpha,
            unit
        )?;
        for (i, node) in self.nodes.iter().enumerate() {
            writeln!(
                w,
                "node {i} {} {} {} {} {}",
                node.cluster, node.ref_id, node.gps.lat, node.gps.lon, node.similarity
            )?;
        }
        for i in 0..self.n() {
            let row: Vec<String> = self.matrix.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

/// Builds the graph from retrieval clusters, resolving GPS through `refs`.
pub fn build_graph<L: GpsLookup + ?Sized>(
    clusters: &[CandidateCluster],
    refs: &L,
    params: AffinityParams,
) -> Result<MatchGraph> {
    let mut nodes = Vec::new();
    for (c, cluster) in clusters.iter().enumerate() {
        for m in &cluster.members {
            let gps = refs
                .gps_of(&m.ref_id)
                .ok_or_else(|| Error::InvalidCoordinate(format!("no GPS for reference `{}`", m.ref_id)))?;
            nodes.push(GraphNode {
                ref_id: m.ref_id.clone(),
                cluster: c,
                gps,
                similarity: m.similarity,
            });
        }
    }
    build_graph_from_nodes(nodes, clusters.len(), params)
}

/// Builds the graph from explicit nodes; `cluster` indices must be below
/// `n_clusters`.
pub fn build_graph_from_nodes(nodes: Vec<GraphNode>, n_clusters: usize, params: AffinityParams) -> Result<MatchGraph> {
    if n_clusters == 0 {
        return Err(Error::InvalidParameter("graph needs at least one cluster".into()));
    }
    params.validate()?;
    for node in &nodes {
        node.gps
            .validate()
            .map_err(|e| Error::InvalidCoordinate(format!("node `{}`: {e}", node.ref_id)))?;
        if node.cluster >= n_clusters {
            return Err(Error::InvalidParameter(format!(
                "node `{}` in cluster {} of {n_clusters}",
                node.ref_id, node.cluster
            )));
        }
        if !node.similarity.is_finite() || node.similarity < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "node `{}` similarity {}",
                node.ref_id, node.similarity
            )));
        }
    }
    let n = nodes.len();
    let mut matrix = AffinityMatrix::zeros(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&nodes[i], &nodes[j]);
            if a.cluster == b.cluster || a.ref_id == b.ref_id {
                continue;
            }
            let d = geo::distance_unchecked(a.gps, b.gps);
            matrix.set_sym(i, j, params.edge_weight(d, a.similarity, b.similarity));
        }
    }
    Ok(MatchGraph {
        nodes,
        matrix,
        params,
        n_clusters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::Candidate;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn gps(lat: f64, lon: f64) -> GpsCoord {
        GpsCoord::new(lat, lon).unwrap()
    }

    #[test]
    fn weight_examples() {
        let p = AffinityParams::default();
        assert_eq!(p.edge_weight(0.0, 0.0, 0.0), 0.5);
        assert_eq!(p.edge_weight(0.0, 1.0, 1.0), 1.0);
        // 0.5 * exp(-0.5)
        assert!((p.edge_weight(300.0, 0.0, 0.0) - 0.303_265_329_856_316_7).abs() < 1e-15);
        assert_eq!((p.sigma, p.alpha), (0.3, 0.5));
        let meters = AffinityParams {
            sigma: 300.0,
            unit: DistanceUnit::Meters,
            ..p
        };
        assert_eq!(meters.edge_weight(300.0, 0.2, 0.4), p.edge_weight(300.0, 0.2, 0.4));
    }

    #[test]
    fn builds_from_clusters() {
        let mut lookup = HashMap::new();
        lookup.insert("a".to_string(), gps(40.0, -80.0));
        lookup.insert("b".to_string(), gps(40.0, -80.0));
        lookup.insert("c".to_string(), gps(40.001, -80.0));
        let clusters = vec![
            CandidateCluster {
                query_id: "q0".into(),
                members: vec![
                    Candidate {
                        ref_id: "a".into(),
                        similarity: 1.0,
                    },
                    Candidate {
                        ref_id: "c".into(),
                        similarity: 0.5,
                    },
                ],
            },
            CandidateCluster {
                query_id: "q1".into(),
                members: vec![Candidate {
                    ref_id: "b".into(),
                    similarity: 1.0,
                }],
            },
        ];
        let g = build_graph(&clusters, &lookup, AffinityParams::default()).unwrap();
        assert_eq!(g.n(), 3);
        assert_eq!(g.matrix.get(0, 1), 0.0);
        assert_eq!(g.matrix.get(0, 2), 1.0);
        assert!(g.matrix.get(1, 2) > 0.0 && g.matrix.get(1, 2) < 1.0);
        g.matrix.validate().unwrap();

        let missing = vec![CandidateCluster {
            query_id: "q".into(),
            members: vec![Candidate {
                ref_id: "zz".into(),
                similarity: 1.0,
            }],
        }];
        assert!(matches!(
            build_graph(&missing, &lookup, AffinityParams::default()),
            Err(Error::InvalidCoordinate(_))
        ));
    }

    #[test]
    fn same_reference_in_two_clusters_is_not_joined() {
        let node = |c| GraphNode {
            ref_id: "a".into(),
            cluster: c,
            gps: gps(0.0, 0.0),
            similarity: 0.5,
        };
        let other = GraphNode {
            ref_id: "b".into(),
            ..node(2)
        };
        let g = build_graph_from_nodes(vec![node(0), node(1), other], 3, AffinityParams::default()).unwrap();
        assert_eq!(g.matrix.get(0, 1), 0.0);
        assert_eq!(g.matrix.get(0, 2), 0.75);
        assert_eq!(g.matrix.get(1, 2), 0.75);
    }

    #[test]
    fn rejects_bad_params_and_gps() {
        let node = GraphNode {
            ref_id: "a".into(),
            cluster: 0,
            gps: gps(0.0, 0.0),
            similarity: 0.5,
        };
        let bad = AffinityParams {
            sigma: 0.0,
            ..AffinityParams::default()
        };
        assert!(build_graph_from_nodes(vec![node.clone()], 1, bad).is_err());
        assert!(build_graph_from_nodes(vec![node.clone()], 0, AffinityParams::default()).is_err());
        let broken = GraphNode {
            gps: GpsCoord {
                lat: f64::NAN,
                lon: 0.0,
            },
            ..node
        };
        assert!(matches!(
            build_graph_from_nodes(vec![broken], 1, AffinityParams::default()),
            Err(Error::InvalidCoordinate(_))
        ));
    }

    #[test]
    fn dump_lists_nodes_and_rows() {
        let nodes = vec![
            GraphNode {
                ref_id: "a".into(),
                cluster: 0,
                gps: gps(0.0, 0.0),
                similarity: 0.5,
            },
            GraphNode {
                ref_id: "b".into(),
                cluster: 1,
                gps: gps(0.0, 0.0),
                similarity: 0.5,
            },
        ];
        let g = build_graph_from_nodes(nodes, 2, AffinityParams::default()).unwrap();
        let mut out = Vec::new();
        g.write_dump(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().nth(3).unwrap().starts_with("0 0.75"));
    }

    proptest! {
        #[test]
        fn structural_invariants(
            raw in prop::collection::vec((0usize..4, -0.01f64..0.01, -0.01f64..0.01, 0.0f64..=1.0), 1..25),
        ) {
            let nodes: Vec<GraphNode> = raw
                .iter()
                .enumerate()
                .map(|(i, &(c, dlat, dlon, s))| GraphNode {
                    ref_id: format!("r{i}"),
                    cluster: c,
                    gps: gps(40.0 + dlat, -80.0 + dlon),
                    similarity: s,
                })
                .collect();
            let g = build_graph_from_nodes(nodes, 4, AffinityParams::default()).unwrap();
            g.matrix.validate().unwrap();
            for i in 0..g.n() {
                for j in 0..g.n() {
                    let v = g.matrix.get(i, j);
                    prop_assert!((0.0..=1.0).contains(&v));
                    if g.nodes[i].cluster == g.nodes[j].cluster {
                        prop_assert_eq!(v, 0.0);
                    } else {
                        prop_assert!(v > 0.0);
                    }
                }
            }
        }

        #[test]
        fn monotone_in_distance_and_similarity(d in 0.0f64..1000.0, step in 1.0f64..500.0, s in 0.0f64..0.9, ds in 0.01f64..0.1) {
            let p = AffinityParams::default();
            prop_assert!(p.edge_weight(d + step, s, s) < p.edge_weight(d, s, s));
            prop_assert!(p.edge_weight(d, s, s + ds) > p.edge_weight(d, s, s));
        }
    }
}
