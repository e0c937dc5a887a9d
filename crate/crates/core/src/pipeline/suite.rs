//! The fixed-seed benchmark: a synthetic city, an embedder trained on its
//! train split, and 1-view and 4-view queries drawn from its test split.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::metric::{average_precision, similarity, train_embedder, Embedder, PairSample, TrainConfig, TrainOutcome};
use crate::retrieval::{ReferenceIndex, View};
use crate::synth::{generate, make_query_set, Split, SynthCity, SynthConfig};

use super::{embed_records, ImageIndex, LocalizationResult, LocalizeConfig, Localizer, Method, Query};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub city: SynthConfig,
    pub train: TrainConfig,
    pub query_view: View,
    /// Queries kept per view count, sampled without replacement; 0 keeps all.
    pub max_queries: usize,
    pub methods: Vec<Method>,
    pub localize: LocalizeConfig,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            city: SynthConfig::default(),
            train: TrainConfig::default(),
            query_view: View::Bird,
            max_queries: 100,
            methods: Method::ALL.to_vec(),
            localize: LocalizeConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteRun {
    pub training: TrainOutcome,
    pub ap_untrained: f64,
    pub ap_trained: f64,
    pub one_view: Vec<LocalizationResult>,
    pub four_view: Vec<LocalizationResult>,
}

/// Trains on the city's train split with its configured negative ratio.
pub fn train_on_city(city: &SynthCity, config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    let pairs = city.pairs(Split::Train, city.config.negatives_per_positive, seed)?;
    train_embedder(&pairs, config)
}

/// Average precision of `embedder` similarities on labelled pairs.
pub fn pair_ap(embedder: &Embedder, pairs: &[PairSample]) -> Result<f64> {
    let scores = pairs
        .iter()
        .map(|p| Ok((similarity(&embedder.embed(&p.x)?, &embedder.embed(&p.y)?), p.matched)))
        .collect::<Result<Vec<_>>>()?;
    average_precision(&scores)
}

/// Queries of one split, subsampled to at most `max_queries` (0 keeps all)
/// and embedded.
pub fn city_queries(
    city: &SynthCity,
    embedder: &Embedder,
    view: View,
    n_views: usize,
    split: Split,
    max_queries: usize,
    seed: u64,
) -> Result<Vec<Query>> {
    let mut queries = make_query_set(city, view, n_views, split, seed)?;
    if max_queries > 0 && queries.len() > max_queries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = index::sample(&mut rng, queries.len(), max_queries).into_vec();
        keep.sort_unstable();
        let mut all: Vec<Option<Query>> = queries.into_iter().map(Some).collect();
        queries = keep.into_iter().filter_map(|i| all[i].take()).collect();
    }
    for q in &mut queries {
        embed_records(&mut q.buildings, embedder)?;
    }
    Ok(queries)
}

/// The city's reference side: every record of the view opposite to the
/// queries, embedded, plus its image index.
pub fn city_references(
    city: &SynthCity,
    embedder: &Embedder,
    query_view: View,
) -> Result<(ReferenceIndex, ImageIndex)> {
    let mut refs = city.records(query_view.opposite(), Split::All);
    embed_records(&mut refs, embedder)?;
    let images = ImageIndex::new(&refs, embedder)?;
    Ok((ReferenceIndex::new(refs)?, images))
}

/// Localizes `queries` against the city's references.
pub fn localize_in_city(
    city: &SynthCity,
    embedder: &Embedder,
    queries: &[Query],
    methods: &[Method],
    config: &LocalizeConfig,
) -> Result<Vec<LocalizationResult>> {
    let Some(view) = queries.first().map(|q| q.view) else {
        return Ok(Vec::new());
    };
    let (index, images) = city_references(city, embedder, view)?;
    Localizer::new(&index, Some(&images)).run(queries, methods, config, Some(embedder))
}

/// Generates the city, trains, scores held-out pairs and localizes test
/// queries with 1 and 4 views.
pub fn run_suite(config: &SuiteConfig) -> Result<SuiteRun> {
    let city = generate(&config.city)?;
    let training = train_on_city(&city, &config.train, config.seed)?;
    let held_out = city.pairs(
        Split::Test,
        city.config.negatives_per_positive,
        config.seed.wrapping_add(1),
    )?;
    let untrained = Embedder::random(config.train.shape, config.train.margin, config.train.seed)?;
    let ap_untrained = pair_ap(&untrained, &held_out)?;
    let ap_trained = pair_ap(&training.embedder, &held_out)?;

    let embedder = &training.embedder;
    let (index, images) = city_references(&city, embedder, config.query_view)?;
    let localizer = Localizer::new(&index, Some(&images));
    let mut by_views = [1, 4].into_iter().map(|n_views| {
        let queries = city_queries(
            &city,
            embedder,
            config.query_view,
            n_views,
            Split::Test,
            config.max_queries,
            config.seed.wrapping_add(2),
        )?;
        localizer.run(&queries, &config.methods, &config.localize, Some(embedder))
    });
    let one_view = by_views.next().expect("two view counts")?;
    let four_view = by_views.next().expect("two view counts")?;
    Ok(SuiteRun {
        training,
        ap_untrained,
        ap_trained,
        one_view,
        four_view,
    })
}
