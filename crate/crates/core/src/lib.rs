//! Cross-view geo-localization: locate a street-level or aerial query by
//! matching its detected buildings against geo-tagged reference buildings of
//! the other view, then picking mutually consistent matches with dominant
//! sets.

pub mod affinity;
pub mod domset;
pub mod error;
pub mod geo;
pub mod gmcp;
pub mod matrix;
pub mod metric;
pub mod pipeline;
pub mod retrieval;
pub mod synth;

pub use affinity::{build_graph, AffinityParams, DistanceUnit, GraphNode, MatchGraph};
pub use domset::{DominantSetResult, SimplexVector, SolverConfig};
pub use error::{Error, Result};
pub use geo::{geo_distance_m, mean_gps, GpsCoord};
pub use matrix::AffinityMatrix;
pub use metric::{Embedder, EmbedderShape, Embedding, PairSample, TrainConfig};
pub use pipeline::{evaluate, AccuracyCurve, LocalizationResult, LocalizeConfig, Localizer, Method, Query};
pub use retrieval::{BuildingRecord, Candidate, CandidateCluster, ReferenceIndex, View};
pub use synth::{generate, SynthCity, SynthConfig};
