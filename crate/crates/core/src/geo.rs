//! GPS coordinates, a local equirectangular projection, and city-scale
//! distance and averaging.
//!
//! All distances are planar: both points are projected onto the tangent
//! plane at their midpoint and the Euclidean norm is taken there. At the
//! scales this crate deals with (a few km) the error against a geodesic
//! distance is far below the evaluation thresholds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Beyond this distance from the anchor, projection still works but warns.
const PROJECTION_WARN_M: f64 = 100_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsCoord {
    pub lat: f64,
    pub lon: f64,
}

impl GpsCoord {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let p = GpsCoord { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lat.is_finite() || !self.lon.is_finite() {
            return Err(Error::InvalidCoordinate(format!(
                "non-finite ({}, {})",
                self.lat, self.lon
            )));
        }
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::InvalidCoordinate(format!("latitude {} out of range", self.lat)));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::InvalidCoordinate(format!("longitude {} out of range", self.lon)));
        }
        Ok(())
    }
}

/// Meters east (`x`) and north (`y`) of `anchor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalXY {
    pub x: f64,
    pub y: f64,
    pub anchor: GpsCoord,
}

impl LocalXY {
    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Equirectangular projection of `p` into the tangent plane at `anchor`.
pub fn project(p: GpsCoord, anchor: GpsCoord) -> Result<LocalXY> {
    p.validate()?;
    anchor.validate()?;
    let xy = project_unchecked(p, anchor);
    if xy.norm() > PROJECTION_WARN_M {
        log::warn!(
            "projecting ({}, {}) {:.0} m from anchor; equirectangular error grows with distance",
            p.lat,
            p.lon,
            xy.norm()
        );
    }
    Ok(xy)
}

fn project_unchecked(p: GpsCoord, anchor: GpsCoord) -> LocalXY {
    let cos_lat = anchor.lat.to_radians().cos();
    LocalXY {
        x: EARTH_RADIUS_M * cos_lat * (p.lon - anchor.lon).to_radians(),
        y: EARTH_RADIUS_M * (p.lat - anchor.lat).to_radians(),
        anchor,
    }
}

/// Inverse of [`project`].
pub fn unproject(xy: LocalXY) -> Result<GpsCoord> {
    if !xy.x.is_finite() || !xy.y.is_finite() {
        return Err(Error::InvalidCoordinate(format!(
            "non-finite local ({}, {})",
            xy.x, xy.y
        )));
    }
    let cos_lat = xy.anchor.lat.to_radians().cos();
    if cos_lat <= f64::EPSILON {
        return Err(Error::InvalidCoordinate("anchor at a pole".into()));
    }
    let lat = xy.anchor.lat + (xy.y / EARTH_RADIUS_M).to_degrees();
    let lon = xy.anchor.lon + (xy.x / (EARTH_RADIUS_M * cos_lat)).to_degrees();
    GpsCoord::new(lat, lon)
}

/// Planar distance in meters, measured in the tangent plane at the midpoint.
pub fn geo_distance_m(a: GpsCoord, b: GpsCoord) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(distance_unchecked(a, b))
}

pub(crate) fn distance_unchecked(a: GpsCoord, b: GpsCoord) -> f64 {
    let mid = GpsCoord {
        lat: 0.5 * (a.lat + b.lat),
        lon: 0.5 * (a.lon + b.lon),
    };
    let pa = project_unchecked(a, mid);
    let pb = project_unchecked(b, mid);
    (pa.x - pb.x).hypot(pa.y - pb.y)
}

/// Component-wise arithmetic mean; valid for city-scale extents.
pub fn mean_gps(points: &[GpsCoord]) -> Result<GpsCoord> {
    if points.is_empty() {
        return Err(Error::EmptySelection("mean of zero GPS points"));
    }
    // Sorted summation keeps the result independent of input order.
    let mut lats: Vec<f64> = points.iter().map(|p| p.lat).collect();
    let mut lons: Vec<f64> = points.iter().map(|p| p.lon).collect();
    lats.sort_by(f64::total_cmp);
    lons.sort_by(f64::total_cmp);
    let n = points.len() as f64;
    let lat = lats.iter().sum::<f64>() / n;
    let lon = lons.iter().sum::<f64>() / n;
    // Clamp against round-off pushing a mean past the extreme input.
    let lat = lat.clamp(lats[0], lats[lats.len() - 1]);
    let lon = lon.clamp(lons[0], lons[lons.len() - 1]);
    GpsCoord::new(lat, lon)
}
