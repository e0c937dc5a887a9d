//! Building records as JSON Lines and localization results as CSV.
//!
//! One record per line:
//!
//! ```text
//! {"id": "...", "city": "...", "image_id": "...", "view": "street"|"bird",
//!  "heading_deg": 0, "lat": 40.4, "lon": -80.0, "raw_features": [...],
//!  "embedding": [...], "det_score": 0.9, "match_id": "..."}
//! ```
//!
//! `embedding` and `match_id` are optional. Unknown keys are ignored with a
//! warning.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GpsCoord;
use crate::metric::Embedding;
use crate::retrieval::{BuildingRecord, View};

use super::{LocalizationResult, Method};

const RECORD_KEYS: [&str; 11] = [
    "id",
    "city",
    "image_id",
    "view",
    "heading_deg",
    "lat",
    "lon",
    "raw_features",
    "embedding",
    "det_score",
    "match_id",
];

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    city: String,
    image_id: String,
    view: View,
    heading_deg: u16,
    lat: f64,
    lon: f64,
    raw_features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
    det_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    match_id: Option<String>,
}

/// One image, as seen through its building records.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub city: String,
    pub view: View,
    pub heading_deg: u16,
    pub gps: GpsCoord,
    pub record_ids: Vec<String>,
}

/// Image id → image, derived from records.
pub fn image_table(records: &[BuildingRecord]) -> BTreeMap<String, ImageEntry> {
    let mut table: BTreeMap<String, ImageEntry> = BTreeMap::new();
    for r in records {
        table
            .entry(r.image_id.clone())
            .or_insert_with(|| ImageEntry {
                city: r.city.clone(),
                view: r.view,
                heading_deg: r.heading_deg,
                gps: r.gps,
                record_ids: Vec::new(),
            })
            .record_ids
            .push(r.id.clone());
    }
    table
}

fn parse_line(line_no: usize, text: &str) -> Result<BuildingRecord> {
    let parse_err = |message: String| Error::Parse { line: line_no, message };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    let serde_json::Value::Object(map) = &value else {
        return Err(parse_err("expected a JSON object".into()));
    };
    for key in map.keys().filter(|k| !RECORD_KEYS.contains(&k.as_str())) {
        log::warn!("line {line_no}: ignoring unknown field `{key}`");
    }
    let line: RecordLine = serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
    let embedding = line
        .embedding
        .map(Embedding::from_unit)
        .transpose()
        .map_err(|e| parse_err(format!("embedding: {e}")))?;
    let record = BuildingRecord {
        id: line.id,
        city: line.city,
        image_id: line.image_id,
        view: line.view,
        heading_deg: line.heading_deg,
        gps: GpsCoord {
            lat: line.lat,
            lon: line.lon,
        },
        raw_features: line.raw_features,
        embedding,
        det_score: line.det_score,
        match_id: line.match_id,
    };
    record.validate().map_err(|e| parse_err(e.to_string()))?;
    Ok(record)
}

/// Reads records from JSON Lines; blank lines are skipped.
pub fn read_records<R: Read>(r: R) -> Result<Vec<BuildingRecord>> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(i + 1, &line)?);
    }
    Ok(records)
}

pub fn write_records<W: Write>(records: &[BuildingRecord], w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    for r in records {
        let line = RecordLine {
            id: r.id.clone(),
            city: r.city.clone(),
            image_id: r.image_id.clone(),
            view: r.view,
            heading_deg: r.heading_deg,
            lat: r.gps.lat,
            lon: r.gps.lon,
            raw_features: r.raw_features.clone(),
            embedding: r.embedding.as_ref().map(|e| e.as_slice().to_vec()),
            det_score: r.det_score,
            match_id: r.match_id.clone(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Records and their image table from a JSONL file.
pub fn ingest(path: &Path) -> Result<(Vec<BuildingRecord>, BTreeMap<String, ImageEntry>)> {
    let records = read_records(File::open(path)?)?;
    let images = image_table(&records);
    Ok((records, images))
}

pub fn emit_records(records: &[BuildingRecord], path: &Path) -> Result<()> {
    write_records(records, File::create(path)?)
}

#[derive(Serialize, Deserialize)]
struct ResultRow {
    query_id: String,
    method: String,
    pred_lat: f64,
    pred_lon: f64,
    true_lat: f64,
    true_lon: f64,
    error_m: f64,
    runtime_ms: f64,
}

/// CSV with header
/// `query_id,method,pred_lat,pred_lon,true_lat,true_lon,error_m,runtime_ms`.
pub fn write_results<W: Write>(results: &[LocalizationResult], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in results {
        out.serialize(ResultRow {
            query_id: r.query_id.clone(),
            method: r.method.to_string(),
            pred_lat: r.predicted.lat,
            pred_lon: r.predicted.lon,
            true_lat: r.truth.lat,
            true_lon: r.truth.lon,
            error_m: r.error_m,
            runtime_ms: r.runtime_ms,
        })?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a results CSV. Cluster counts and fallback flags are not stored and
/// come back as zero and false.
pub fn read_results<R: Read>(r: R) -> Result<Vec<LocalizationResult>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<ResultRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let method: Method = row.method.parse().map_err(|e: Error| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        out.push(LocalizationResult {
            query_id: row.query_id,
            method,
            predicted: GpsCoord {
                lat: row.pred_lat,
                lon: row.pred_lon,
            },
            truth: GpsCoord {
                lat: row.true_lat,
                lon: row.true_lon,
            },
            error_m: row.error_m,
            n_clusters_used: 0,
            runtime_ms: row.runtime_ms,
            fallback: false,
        });
    }
    Ok(out)
}
