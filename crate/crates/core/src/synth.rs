//! Seeded synthetic cities: a grid of GPS locations, latent buildings seen
//! from street level and from the air, and the pair and query sets built
//! from them.
//!
//! Each latent building carries a feature vector drawn around one of many
//! building-type prototypes, so look-alike buildings are common. The city is
//! cut into square districts and each district builds from its own small
//! palette of types, so look-alikes also cluster in space. A building's
//! street and bird observations add a fixed per-view offset and independent
//! noise.
//! Only the leading `signal_dim` coordinates carry identity; the rest are
//! pure noise, `nuisance_gain` times louder, which a learned projection can
//! discard but a random one cannot.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::geo::{self, GpsCoord, LocalXY};
use crate::metric::PairSample;
use crate::pipeline::{group_queries, query_id, Query};
use crate::retrieval::{BuildingRecord, View, HEADINGS};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub city: String,
    /// South-west corner of the location grid.
    pub origin: GpsCoord,
    pub n_locations: usize,
    pub grid_spacing_m: f64,
    /// Inclusive range of buildings per image.
    pub buildings_per_view: (usize, usize),
    /// Inclusive range of extra buildings visible only from the air, per
    /// bird image.
    pub bird_only_buildings: (usize, usize),
    pub feature_noise_sigma: f64,
    pub detection_dropout_prob: f64,
    pub negatives_per_positive: usize,
    pub raw_dim: usize,
    pub signal_dim: usize,
    pub nuisance_gain: f64,
    pub building_types: usize,
    /// Side of the square districts that share a type palette.
    pub district_size_m: f64,
    pub types_per_district: usize,
    /// Spread of individual buildings around their type prototype.
    pub type_spread: f64,
    /// Per-coordinate scale of the fixed view offsets.
    pub view_offset_scale: f64,
    /// Fraction of locations whose records are used for training.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            city: "synth".into(),
            origin: GpsCoord { lat: 40.44, lon: -80.0 },
            n_locations: 400,
            grid_spacing_m: 80.0,
            buildings_per_view: (2, 6),
            bird_only_buildings: (0, 3),
            feature_noise_sigma: 0.15,
            detection_dropout_prob: 0.1,
            negatives_per_positive: 20,
            raw_dim: 64,
            signal_dim: 16,
            nuisance_gain: 6.0,
            building_types: 256,
            district_size_m: 400.0,
            types_per_district: 12,
            type_spread: 0.25,
            view_offset_scale: 0.1,
            train_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_locations == 0 {
            return bad("n_locations must be at least 1".into());
        }
        if self.city.is_empty() || self.city.contains('/') {
            return bad(format!("city name `{}` must be non-empty without '/'", self.city));
        }
        self.origin.validate()?;
        if !(self.grid_spacing_m.is_finite() && self.grid_spacing_m > 0.0) {
            return bad(format!("grid spacing {} must be > 0", self.grid_spacing_m));
        }
        for (name, (lo, hi)) in [
            ("buildings_per_view", self.buildings_per_view),
            ("bird_only_buildings", self.bird_only_buildings),
        ] {
            if lo > hi {
                return bad(format!("{name} range {lo}..={hi} is empty"));
            }
        }
        if self.buildings_per_view.1 == 0 {
            return bad("buildings_per_view must allow at least one building".into());
        }
        for (name, v) in [
            ("feature_noise_sigma", self.feature_noise_sigma),
            ("nuisance_gain", self.nuisance_gain),
            ("type_spread", self.type_spread),
            ("view_offset_scale", self.view_offset_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, p) in [
            ("detection_dropout_prob", self.detection_dropout_prob),
            ("train_fraction", self.train_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.signal_dim == 0 || self.signal_dim > self.raw_dim {
            return bad(format!(
                "signal_dim {} must lie in 1..={}",
                self.signal_dim, self.raw_dim
            ));
        }
        if self.building_types == 0 || self.types_per_district == 0 {
            return bad("building_types and types_per_district must be at least 1".into());
        }
        if !(self.district_size_m.is_finite() && self.district_size_m > 0.0) {
            return bad(format!("district size {} must be > 0", self.district_size_m));
        }
        Ok(())
    }
}

/// A physical building before observation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBuilding {
    pub id: String,
    pub location: usize,
    pub heading_deg: u16,
    pub features: Vec<f64>,
    /// False for buildings that only the aerial images show.
    pub street_visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCity {
    pub config: SynthConfig,
    pub locations: Vec<GpsCoord>,
    pub train_location: Vec<bool>,
    pub buildings: Vec<LatentBuilding>,
    pub street_records: Vec<BuildingRecord>,
    pub bird_records: Vec<BuildingRecord>,
    /// Query id → true GPS for every location.
    pub ground_truth: BTreeMap<String, GpsCoord>,
    /// Fixed offsets added to every street and bird observation.
    pub view_offsets: [Vec<f64>; 2],
}

fn image_id(city: &str, loc: usize, view: View, heading: u16) -> String {
    format!("{city}/{loc:05}/{view}/{heading:03}")
}

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Builds a city; bit-identical for equal configs.
pub fn generate(config: &SynthConfig) -> Result<SynthCity> {
    config.validate()?;
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);

    let cols = (c.n_locations as f64).sqrt().ceil() as usize;
    let grid_xy = |i: usize| {
        (
            (i % cols) as f64 * c.grid_spacing_m,
            (i / cols) as f64 * c.grid_spacing_m,
        )
    };
    let locations = (0..c.n_locations)
        .map(|i| {
            let (x, y) = grid_xy(i);
            geo::unproject(LocalXY { x, y, anchor: c.origin })
        })
        .collect::<Result<Vec<_>>>()?;
    let district_cols = ((cols - 1) as f64 * c.grid_spacing_m / c.district_size_m) as usize + 1;
    let district_of = |i: usize| {
        let (x, y) = grid_xy(i);
        (y / c.district_size_m) as usize * district_cols + (x / c.district_size_m) as usize
    };
    let n_districts = district_of(c.n_locations - 1) + district_cols;

    let mut order: Vec<usize> = (0..c.n_locations).collect();
    order.shuffle(&mut rng);
    let n_train = (c.train_fraction * c.n_locations as f64).round() as usize;
    let mut train_location = vec![false; c.n_locations];
    for &i in &order[..n_train] {
        train_location[i] = true;
    }

    let view_offsets = [
        gaussian_vec(&mut rng, c.raw_dim, c.view_offset_scale),
        gaussian_vec(&mut rng, c.raw_dim, c.view_offset_scale),
    ];
    let prototypes: Vec<Vec<f64>> = (0..c.building_types)
        .map(|_| gaussian_vec(&mut rng, c.signal_dim, 1.0))
        .collect();
    let palette_size = c.types_per_district.min(c.building_types);
    let palettes: Vec<Vec<usize>> = (0..n_districts)
        .map(|_| rand::seq::index::sample(&mut rng, c.building_types, palette_size).into_vec())
        .collect();
    let signal_noise = Normal::new(0.0, c.feature_noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let nuisance_noise =
        Normal::new(0.0, c.feature_noise_sigma * c.nuisance_gain).map_err(|e| Error::Config(e.to_string()))?;

    let mut buildings = Vec::new();
    let mut street_records = Vec::new();
    let mut bird_records = Vec::new();
    for (loc, &gps) in locations.iter().enumerate() {
        let palette = &palettes[district_of(loc)];
        for heading in HEADINGS {
            let shared = rng.random_range(c.buildings_per_view.0..=c.buildings_per_view.1);
            let extra = rng.random_range(c.bird_only_buildings.0..=c.bird_only_buildings.1);
            for b in 0..shared + extra {
                let proto = &prototypes[palette[rng.random_range(0..palette.len())]];
                let mut features = vec![0.0; c.raw_dim];
                for (f, p) in features.iter_mut().zip(proto) {
                    *f = p + c.type_spread * rng.sample::<f64, _>(StandardNormal);
                }
                let latent = LatentBuilding {
                    id: format!("{}/b{:07}", c.city, buildings.len()),
                    location: loc,
                    heading_deg: heading,
                    features,
                    street_visible: b < shared,
                };
                let views: &[View] = if latent.street_visible {
                    &[View::Street, View::Bird]
                } else {
                    &[View::Bird]
                };
                for &view in views {
                    // Draw every observation so dropout does not shift later streams.
                    let mut raw = latent.features.clone();
                    let offset = &view_offsets[view as usize];
                    for (d, (x, o)) in raw.iter_mut().zip(offset).enumerate() {
                        let noise = if d < c.signal_dim {
                            &signal_noise
                        } else {
                            &nuisance_noise
                        };
                        *x += o + noise.sample(&mut rng);
                    }
                    let det_score = rng.random_range(0.5..1.0);
                    let dropped = rng.random::<f64>() < c.detection_dropout_prob;
                    if dropped {
                        continue;
                    }
                    let records = match view {
                        View::Street => &mut street_records,
                        View::Bird => &mut bird_records,
                    };
                    let image = image_id(&c.city, loc, view, heading);
                    let slot = records
                        .iter()
                        .rev()
                        .take_while(|r: &&BuildingRecord| r.image_id == image)
                        .count();
                    records.push(BuildingRecord {
                        id: format!("{image}/{slot:02}"),
                        city: c.city.clone(),
                        image_id: image,
                        view,
                        heading_deg: heading,
                        gps,
                        raw_features: raw,
                        embedding: None,
                        det_score,
                        match_id: Some(latent.id.clone()),
                    });
                }
                buildings.push(latent);
            }
        }
    }

    let ground_truth = locations.iter().map(|&g| (query_id(&c.city, g), g)).collect();
    Ok(SynthCity {
        config: c.clone(),
        locations,
        train_location,
        buildings,
        street_records,
        bird_records,
        ground_truth,
        view_offsets,
    })
}

impl SynthCity {
    fn location_of(&self, record: &BuildingRecord) -> usize {
        let loc = record.image_id.split('/').nth(1).and_then(|s| s.parse().ok());
        loc.expect("synthetic image ids embed the location index")
    }

    fn in_split(&self, record: &BuildingRecord, split: Split) -> bool {
        match split {
            Split::All => true,
            Split::Train => self.train_location[self.location_of(record)],
            Split::Test => !self.train_location[self.location_of(record)],
        }
    }

    pub fn records(&self, view: View, split: Split) -> Vec<BuildingRecord> {
        let all = match view {
            View::Street => &self.street_records,
            View::Bird => &self.bird_records,
        };
        all.iter().filter(|r| self.in_split(r, split)).cloned().collect()
    }

    /// Street records then bird records.
    pub fn all_records(&self, split: Split) -> Vec<BuildingRecord> {
        let mut out = self.records(View::Street, split);
        out.extend(self.records(View::Bird, split));
        out
    }

    /// Matched and sampled unmatched cross-view pairs over one split.
    pub fn pairs(&self, split: Split, negatives_per_positive: usize, seed: u64) -> Result<Vec<PairSample>> {
        make_pair_dataset(
            &self.records(View::Street, split),
            &self.records(View::Bird, split),
            negatives_per_positive,
            seed,
        )
    }
}

/// Every matched (street, bird) pair as a positive, plus
/// `negatives_per_positive` distinct unmatched pairs per positive drawn
/// uniformly (fewer if the pool runs out). `x` is the street side.
pub fn make_pair_dataset(
    street: &[BuildingRecord],
    bird: &[BuildingRecord],
    negatives_per_positive: usize,
    seed: u64,
) -> Result<Vec<PairSample>> {
    if street.is_empty() || bird.is_empty() {
        return Err(Error::InsufficientData("pairs need records from both views".into()));
    }
    let mut bird_by_match: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, b) in bird.iter().enumerate() {
        if let Some(m) = &b.match_id {
            bird_by_match.entry(m.as_str()).or_default().push(j);
        }
    }
    let mut positives = HashSet::new();
    let mut pairs = Vec::new();
    for (i, s) in street.iter().enumerate() {
        let Some(m) = &s.match_id else { continue };
        for &j in bird_by_match.get(m.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
            positives.insert((i, j));
            pairs.push(PairSample {
                x: s.raw_features.clone(),
                y: bird[j].raw_features.clone(),
                matched: true,
            });
        }
    }
    let pool = street.len() * bird.len() - positives.len();
    let wanted = (positives.len() * negatives_per_positive).min(pool);
    if wanted < positives.len() * negatives_per_positive {
        log::warn!(
            "only {pool} unmatched pairs available, wanted {}",
            positives.len() * negatives_per_positive
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = HashSet::with_capacity(wanted);
    while taken.len() < wanted {
        let (i, j) = (rng.random_range(0..street.len()), rng.random_range(0..bird.len()));
        if positives.contains(&(i, j)) || !taken.insert((i, j)) {
            continue;
        }
        pairs.push(PairSample {
            x: street[i].raw_features.clone(),
            y: bird[j].raw_features.clone(),
            matched: false,
        });
    }
    Ok(pairs)
}

/// Query sets over one split of the city. See [`group_queries`].
pub fn make_query_set(city: &SynthCity, view: View, n_views: usize, split: Split, seed: u64) -> Result<Vec<Query>> {
    let records = city.records(view, split);
    if records.is_empty() {
        return Err(Error::Config(format!("city has no {view} records in the split")));
    }
    group_queries(&records, view, n_views, seed)
}
