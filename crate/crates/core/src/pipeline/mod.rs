//! End-to-end localization of grouped query buildings, the baselines it is
//! compared against, evaluation curves, the solver benchmark and file I/O.

mod bench;
mod eval;
pub mod io;
pub mod suite;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use bench::{bench_runtime, random_graph, BenchRow, BenchStatus};
pub use eval::{evaluate, AccuracyCurve, DEFAULT_THRESHOLDS_M};

use crate::affinity::{build_graph, AffinityParams, MatchGraph};
use crate::domset::{select_on_graph, SolverConfig};
use crate::error::{Error, Result};
use crate::geo::{geo_distance_m, mean_gps, GpsCoord};
use crate::gmcp::{self, ENUMERATION_BUDGET};
use crate::metric::{l2_normalize, similarity, Embedder, Embedding};
use crate::retrieval::{BuildingRecord, CandidateCluster, ReferenceIndex, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Domset,
    Gmcp,
    Nn1,
    Random,
    FullImage,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Domset,
        Method::Gmcp,
        Method::Nn1,
        Method::Random,
        Method::FullImage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Domset => "domset",
            Method::Gmcp => "gmcp",
            Method::Nn1 => "nn1",
            Method::Random => "random",
            Method::FullImage => "full_image",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Buildings detected in one or more images taken at one location.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub id: String,
    pub view: View,
    /// Sorted by record id.
    pub buildings: Vec<BuildingRecord>,
    pub truth: GpsCoord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub query_id: String,
    pub method: Method,
    pub predicted: GpsCoord,
    pub truth: GpsCoord,
    pub error_m: f64,
    pub n_clusters_used: usize,
    pub runtime_ms: f64,
    /// Set when the method could not produce its own fix and fell back to
    /// the nearest-neighbor estimate (or, for the graph methods, when the
    /// graph had no edges).
    pub fallback: bool,
}

/// Identifier shared by all queries taken at one location.
pub fn query_id(city: &str, gps: GpsCoord) -> String {
    format!("{city}/{:.7},{:.7}", gps.lat, gps.lon)
}

/// Groups `view` records by city and location into queries, sorted by id.
///
/// With `n_views = 4` a query holds every building seen at the location;
/// with `n_views = 1` it holds the buildings of one image, chosen uniformly
/// among the location's non-empty images using a generator seeded by `seed`
/// and the query id.
pub fn group_queries(records: &[BuildingRecord], view: View, n_views: usize, seed: u64) -> Result<Vec<Query>> {
    if n_views != 1 && n_views != 4 {
        return Err(Error::Config(format!("views must be 1 or 4, got {n_views}")));
    }
    let mut groups: BTreeMap<String, (GpsCoord, BTreeMap<&str, Vec<&BuildingRecord>>)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.view == view) {
        let id = query_id(&r.city, r.gps);
        let (_, images) = groups.entry(id).or_insert_with(|| (r.gps, BTreeMap::new()));
        images.entry(r.image_id.as_str()).or_default().push(r);
    }
    if groups.is_empty() {
        return Err(Error::Config(format!("no {view} records to query with")));
    }
    let queries = groups
        .into_iter()
        .map(|(id, (truth, images))| {
            let mut buildings: Vec<BuildingRecord> = if n_views == 4 {
                images.into_values().flatten().cloned().collect()
            } else {
                let mut rng = rng_for(seed, &id);
                let pick = rng.random_range(0..images.len());
                images
                    .into_values()
                    .nth(pick)
                    .unwrap_or_default()
                    .into_iter()
                    .cloned()
                    .collect()
            };
            buildings.sort_by(|a, b| a.id.cmp(&b.id));
            Query {
                id,
                view,
                buildings,
                truth,
            }
        })
        .collect();
    Ok(queries)
}

/// Stable 64-bit FNV-1a hash.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn rng_for(seed: u64, key: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(key));
    rng
}

/// Fills every record's embedding from its raw features.
pub fn embed_records(records: &mut [BuildingRecord], embedder: &Embedder) -> Result<()> {
    records.par_iter_mut().try_for_each(|r| {
        r.embedding = Some(embedder.embed(&r.raw_features).map_err(|e| match e {
            Error::DimensionMismatch { .. } | Error::DegenerateVector { .. } => {
                Error::InvalidParameter(format!("record {}: {e}", r.id))
            }
            other => other,
        })?);
        Ok(())
    })
}

/// Whole-image embeddings: the embedding of the normalized mean of an
/// image's building raw features.
#[derive(Debug, Clone)]
pub struct ImageIndex {
    /// `(image_id, view, gps, embedding)`, sorted by image id.
    images: Vec<(String, View, GpsCoord, Embedding)>,
}

fn image_embedding(buildings: &[&BuildingRecord], embedder: &Embedder) -> Result<Embedding> {
    let dim = buildings[0].raw_features.len();
    let mut mean = vec![0.0; dim];
    for b in buildings {
        if b.raw_features.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: b.raw_features.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(&b.raw_features) {
            *m += v;
        }
    }
    let unit = l2_normalize(&mean)?;
    embedder.embed(unit.as_slice())
}

fn group_by_image<'a>(
    records: impl IntoIterator<Item = &'a BuildingRecord>,
) -> BTreeMap<&'a str, Vec<&'a BuildingRecord>> {
    let mut images: BTreeMap<&str, Vec<&BuildingRecord>> = BTreeMap::new();
    for r in records {
        images.entry(r.image_id.as_str()).or_default().push(r);
    }
    images
}

impl ImageIndex {
    pub fn new(records: &[BuildingRecord], embedder: &Embedder) -> Result<Self> {
        let images = group_by_image(records)
            .into_iter()
            .map(|(id, rs)| Ok((id.to_string(), rs[0].view, rs[0].gps, image_embedding(&rs, embedder)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageIndex { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Best-matching image of the other view as `(image_id, gps, similarity)`;
    /// ties go to the smaller image id.
    pub fn best_match(&self, query: &Embedding, view: View) -> Option<(&str, GpsCoord, f64)> {
        let mut best: Option<(&str, GpsCoord, f64)> = None;
        for (id, v, gps, e) in &self.images {
            if *v == view {
                continue;
            }
            let s = similarity(query, e);
            if best.is_none_or(|b| s > b.2) {
                best = Some((id, *gps, s));
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizeConfig {
    /// Neighbors per query building; `None` uses the query view's default.
    pub k: Option<usize>,
    pub affinity: AffinityParams,
    pub solver: SolverConfig,
    /// Local-search restarts when exact GMCP is over budget.
    pub gmcp_restarts: usize,
    pub seed: u64,
    /// Record wall-clock time per query; off keeps results reproducible.
    pub timing: bool,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        LocalizeConfig {
            k: None,
            affinity: AffinityParams::default(),
            solver: SolverConfig::default(),
            gmcp_restarts: 10,
            seed: 0,
            timing: false,
        }
    }
}

impl LocalizeConfig {
    pub fn k_for(&self, view: View) -> usize {
        self.k.unwrap_or_else(|| view.default_k())
    }
}

/// Everything the localizers search against.
pub struct Localizer<'a> {
    pub index: &'a ReferenceIndex,
    /// Needed only for [`Method::FullImage`].
    pub images: Option<&'a ImageIndex>,
    /// Reference images per view, for the random baseline.
    ref_images: BTreeMap<View, Vec<GpsCoord>>,
}

impl<'a> Localizer<'a> {
    pub fn new(index: &'a ReferenceIndex, images: Option<&'a ImageIndex>) -> Self {
        let mut ref_images: BTreeMap<View, Vec<GpsCoord>> = BTreeMap::new();
        for (view, list) in [View::Street, View::Bird].map(|v| (v, index.records().iter().filter(move |r| r.view == v)))
        {
            let gps: Vec<GpsCoord> = group_by_image(list).into_values().map(|rs| rs[0].gps).collect();
            ref_images.insert(view, gps);
        }
        Localizer {
            index,
            images,
            ref_images,
        }
    }

    fn clusters(&self, q: &Query, k: usize) -> Result<Vec<CandidateCluster>> {
        q.buildings.iter().map(|b| self.index.knn(b, k)).collect()
    }

    fn finish(
        &self,
        q: &Query,
        method: Method,
        predicted: GpsCoord,
        n_clusters_used: usize,
        fallback: bool,
    ) -> Result<LocalizationResult> {
        Ok(LocalizationResult {
            query_id: q.id.clone(),
            method,
            predicted,
            truth: q.truth,
            error_m: geo_distance_m(predicted, q.truth)?,
            n_clusters_used,
            runtime_ms: 0.0,
            fallback,
        })
    }

    fn check_query(q: &Query) -> Result<()> {
        if q.buildings.is_empty() {
            return Err(Error::EmptySelection("query has no buildings"));
        }
        Ok(())
    }

    /// Mean GPS of each query building's top-1 reference.
    pub fn localize_nn1(&self, q: &Query) -> Result<LocalizationResult> {
        Self::check_query(q)?;
        let clusters = self.clusters(q, 1)?;
        let points = self.top1_gps(&clusters)?;
        self.finish(q, Method::Nn1, mean_gps(&points)?, clusters.len(), false)
    }

    fn top1_gps(&self, clusters: &[CandidateCluster]) -> Result<Vec<GpsCoord>> {
        clusters
            .iter()
            .map(|c| {
                let id = &c.members[0].ref_id;
                self.index
                    .get(id)
                    .map(|r| r.gps)
                    .ok_or_else(|| Error::Retrieval(format!("reference {id} vanished")))
            })
            .collect()
    }

    fn nn1_fallback(&self, q: &Query, method: Method, clusters: &[CandidateCluster]) -> Result<LocalizationResult> {
        log::warn!(
            "query {}: {method} selected nothing, using the nearest-neighbor fix",
            q.id
        );
        let points = self.top1_gps(clusters)?;
        self.finish(q, method, mean_gps(&points)?, clusters.len(), true)
    }

    fn graph(&self, q: &Query, cfg: &LocalizeConfig) -> Result<(Vec<CandidateCluster>, MatchGraph)> {
        Self::check_query(q)?;
        let clusters = self.clusters(q, cfg.k_for(q.view))?;
        let g = build_graph(&clusters, self.index, cfg.affinity)?;
        Ok((clusters, g))
    }

    /// Retrieval, match graph, dominant set, one pick per cluster, mean GPS.
    pub fn localize_domset(&self, q: &Query, cfg: &LocalizeConfig) -> Result<LocalizationResult> {
        let (clusters, g) = self.graph(q, cfg)?;
        let selection = match select_on_graph(&g, &cfg.solver) {
            Ok(s) => s,
            Err(Error::EmptySelection(_)) => return self.nn1_fallback(q, Method::Domset, &clusters),
            Err(e) => return Err(e),
        };
        let points: Vec<GpsCoord> = selection.picks.values().map(|&i| g.nodes[i].gps).collect();
        self.finish(
            q,
            Method::Domset,
            mean_gps(&points)?,
            selection.picks.len(),
            selection.degenerate,
        )
    }

    /// Same retrieval and graph, solved as GMCP: exactly when the number of
    /// combinations fits the enumeration budget, by local search otherwise.
    pub fn localize_gmcp(&self, q: &Query, cfg: &LocalizeConfig) -> Result<LocalizationResult> {
        let (_, g) = self.graph(q, cfg)?;
        let solution = if gmcp::combination_count(&g)? <= ENUMERATION_BUDGET {
            gmcp::solve_exact(&g)?
        } else {
            gmcp::solve_local(&g, cfg.gmcp_restarts, cfg.seed ^ fnv1a(&q.id))?
        };
        let points: Vec<GpsCoord> = solution.selection.iter().map(|&i| g.nodes[i].gps).collect();
        self.finish(q, Method::Gmcp, mean_gps(&points)?, points.len(), false)
    }

    /// GPS of a reference image of the other view drawn uniformly, with a
    /// generator seeded by `seed` and the query id.
    pub fn localize_random(&self, q: &Query, seed: u64) -> Result<LocalizationResult> {
        let images = &self.ref_images[&q.view.opposite()];
        if images.is_empty() {
            return Err(Error::Retrieval(format!("no {} reference images", q.view.opposite())));
        }
        let mut rng = rng_for(seed, &q.id);
        let predicted = images[rng.random_range(0..images.len())];
        self.finish(q, Method::Random, predicted, 0, false)
    }

    /// GPS of the best whole-image match over all of the query's images.
    pub fn localize_full_image(&self, q: &Query, embedder: &Embedder) -> Result<LocalizationResult> {
        Self::check_query(q)?;
        let images = self
            .images
            .ok_or_else(|| Error::Config("full-image matching needs an image index".into()))?;
        let mut best: Option<(GpsCoord, f64)> = None;
        for rs in group_by_image(&q.buildings).into_values() {
            let e = image_embedding(&rs, embedder)?;
            if let Some((_, gps, s)) = images.best_match(&e, q.view) {
                if best.is_none_or(|b| s > b.1) {
                    best = Some((gps, s));
                }
            }
        }
        let (predicted, _) =
            best.ok_or_else(|| Error::Retrieval(format!("no {} reference images", q.view.opposite())))?;
        self.finish(q, Method::FullImage, predicted, 0, false)
    }

    pub fn localize(
        &self,
        q: &Query,
        method: Method,
        cfg: &LocalizeConfig,
        embedder: Option<&Embedder>,
    ) -> Result<LocalizationResult> {
        let start = Instant::now();
        let mut result = match method {
            Method::Domset => self.localize_domset(q, cfg),
            Method::Gmcp => self.localize_gmcp(q, cfg),
            Method::Nn1 => self.localize_nn1(q),
            Method::Random => self.localize_random(q, cfg.seed),
            Method::FullImage => {
                let e = embedder.ok_or_else(|| Error::Config("full-image matching needs an embedder".into()))?;
                self.localize_full_image(q, e)
            }
        }?;
        if cfg.timing {
            result.runtime_ms = start.elapsed().as_secs_f64() * 1e3;
        }
        Ok(result)
    }

    /// Runs every method on every query, in parallel across queries. Results
    /// come back ordered by query, then by the order of `methods`.
    pub fn run(
        &self,
        queries: &[Query],
        methods: &[Method],
        cfg: &LocalizeConfig,
        embedder: Option<&Embedder>,
    ) -> Result<Vec<LocalizationResult>> {
        let per_query: Vec<Vec<LocalizationResult>> = queries
            .par_iter()
            .map(|q| methods.iter().map(|&m| self.localize(q, m, cfg, embedder)).collect())
            .collect::<Result<_>>()?;
        Ok(per_query.into_iter().flatten().collect())
    }
}

/// Domset accuracy at `threshold_m` for each `k` in `ks`.
pub fn k_sweep(
    localizer: &Localizer<'_>,
    queries: &[Query],
    ks: &[usize],
    threshold_m: f64,
    cfg: &LocalizeConfig,
) -> Result<Vec<(usize, f64)>> {
    ks.iter()
        .map(|&k| {
            let cfg = LocalizeConfig {
                k: Some(k),
                ..cfg.clone()
            };
            let results = localizer.run(queries, &[Method::Domset], &cfg, None)?;
            let curve = evaluate(&results, &[threshold_m])?;
            Ok((k, curve.accuracy(Method::Domset)?[0]))
        })
        .collect()
}
