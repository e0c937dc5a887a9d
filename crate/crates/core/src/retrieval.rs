//! Building records, an exact reference index, and per-query k-NN clusters.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GpsCoord;
use crate::metric::{similarity_from_distance, Embedding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Street,
    Bird,
}

impl View {
    pub fn opposite(self) -> View {
        match self {
            View::Street => View::Bird,
            View::Bird => View::Street,
        }
    }

    /// Neighbors retrieved per query building by default.
    pub fn default_k(self) -> usize {
        match self {
            View::Street => 100,
            View::Bird => 10,
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Street => "street",
            View::Bird => "bird",
        })
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "street" => Ok(View::Street),
            "bird" => Ok(View::Bird),
            other => Err(Error::Config(format!("unknown view `{other}`"))),
        }
    }
}

/// Camera headings a record may carry.
pub const HEADINGS: [u16; 4] = [0, 90, 180, 270];

/// One detected building.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildingRecord {
    pub id: String,
    pub city: String,
    pub image_id: String,
    pub view: View,
    pub heading_deg: u16,
    /// Location of the image the building was detected in.
    pub gps: GpsCoord,
    pub raw_features: Vec<f64>,
    pub embedding: Option<Embedding>,
    pub det_score: f64,
    /// Annotated identity shared by both views of the same physical building.
    pub match_id: Option<String>,
}

impl BuildingRecord {
    pub fn validate(&self) -> Result<()> {
        self.gps.validate()?;
        if !HEADINGS.contains(&self.heading_deg) {
            return Err(Error::InvalidParameter(format!(
                "record {}: heading {} not in {HEADINGS:?}",
                self.id, self.heading_deg
            )));
        }
        if !(0.0..=1.0).contains(&self.det_score) {
            return Err(Error::InvalidParameter(format!(
                "record {}: det_score {} outside [0, 1]",
                self.id, self.det_score
            )));
        }
        Ok(())
    }
}

/// Looks up a reference building's GPS by id.
pub trait GpsLookup {
    fn gps_of(&self, ref_id: &str) -> Option<GpsCoord>;
}

impl GpsLookup for HashMap<String, GpsCoord> {
    fn gps_of(&self, ref_id: &str) -> Option<GpsCoord> {
        self.get(ref_id).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub ref_id: String,
    pub similarity: f64,
}

/// A query building and its nearest reference buildings, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateCluster {
    pub query_id: String,
    pub members: Vec<Candidate>,
}

/// Immutable exact-search index over reference embeddings.
#[derive(Debug, Clone)]
pub struct ReferenceIndex {
    records: Vec<BuildingRecord>,
    dim: usize,
    /// Row-major embeddings, `records.len() x dim`.
    vectors: Vec<f64>,
    by_id: HashMap<String, usize>,
}

pub fn build_index(refs: Vec<BuildingRecord>) -> Result<ReferenceIndex> {
    ReferenceIndex::new(refs)
}

impl ReferenceIndex {
    pub fn new(refs: Vec<BuildingRecord>) -> Result<Self> {
        if refs.is_empty() {
            return Err(Error::Retrieval("no reference records".into()));
        }
        let mut by_id = HashMap::with_capacity(refs.len());
        let mut dim = None;
        let mut vectors = Vec::new();
        for (i, r) in refs.iter().enumerate() {
            r.validate()?;
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            let e = r
                .embedding
                .as_ref()
                .ok_or_else(|| Error::Retrieval(format!("record {} has no embedding", r.id)))?;
            match dim {
                None => dim = Some(e.dim()),
                Some(d) if d != e.dim() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        actual: e.dim(),
                    })
                }
                _ => {}
            }
            vectors.extend_from_slice(e.as_slice());
        }
        Ok(ReferenceIndex {
            records: refs,
            dim: dim.unwrap_or(0),
            vectors,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[BuildingRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&BuildingRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// The `k` most similar references of the opposite view, sorted by
    /// descending similarity with ties broken by ascending id.
    pub fn knn(&self, query: &BuildingRecord, k: usize) -> Result<CandidateCluster> {
        if k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        let q = query
            .embedding
            .as_ref()
            .ok_or_else(|| Error::Retrieval(format!("query {} has no embedding", query.id)))?;
        if q.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: q.dim(),
            });
        }
        let q = q.as_slice();
        let mut scored: Vec<(f64, usize)> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.view != query.view)
            .map(|(i, _)| {
                let d2: f64 = self.vector(i).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                (similarity_from_distance(d2.sqrt().min(2.0)), i)
            })
            .collect();
        if scored.is_empty() {
            return Err(Error::Retrieval(format!(
                "index holds no {} references for query {}",
                query.view.opposite(),
                query.id
            )));
        }
        let order = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0)
                .then_with(|| self.records[a.1].id.cmp(&self.records[b.1].id))
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(CandidateCluster {
            query_id: query.id.clone(),
            members: scored
                .into_iter()
                .map(|(s, i)| Candidate {
                    ref_id: self.records[i].id.clone(),
                    similarity: s,
                })
                .collect(),
        })
    }
}

impl GpsLookup for ReferenceIndex {
    fn gps_of(&self, ref_id: &str) -> Option<GpsCoord> {
        self.get(ref_id).map(|r| r.gps)
    }
}

pub fn knn(index: &ReferenceIndex, query: &BuildingRecord, k: usize) -> Result<CandidateCluster> {
    index.knn(query, k)
}
