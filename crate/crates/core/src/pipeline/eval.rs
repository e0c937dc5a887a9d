use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};

use super::{LocalizationResult, Method};

/// Thresholds of the default accuracy curve, in meters.
pub const DEFAULT_THRESHOLDS_M: [f64; 8] = [50.0, 100.0, 150.0, 200.0, 250.0, 300.0, 400.0, 500.0];

/// Fraction of queries localized within each threshold, per method.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyCurve {
    pub thresholds_m: Vec<f64>,
    /// Method → (query count, accuracy per threshold).
    pub methods: BTreeMap<Method, (usize, Vec<f64>)>,
}

impl AccuracyCurve {
    pub fn accuracy(&self, method: Method) -> Result<&[f64]> {
        self.methods
            .get(&method)
            .map(|(_, acc)| acc.as_slice())
            .ok_or(Error::UndefinedMetric("no results for the requested method"))
    }

    /// Accuracy at one of the curve's thresholds.
    pub fn at(&self, method: Method, threshold_m: f64) -> Result<f64> {
        let i = self
            .thresholds_m
            .iter()
            .position(|&t| t == threshold_m)
            .ok_or_else(|| Error::InvalidParameter(format!("threshold {threshold_m} not on the curve")))?;
        Ok(self.accuracy(method)?[i])
    }

    /// CSV with header `method,threshold_m,accuracy,queries`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["method", "threshold_m", "accuracy", "queries"])?;
        for (method, (count, acc)) in &self.methods {
            for (t, a) in self.thresholds_m.iter().zip(acc) {
                out.write_record([method.as_str(), &t.to_string(), &a.to_string(), &count.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// `accuracy(t) = |{error_m <= t}| / |results|`, separately for each method.
/// Thresholds are sorted ascending; infinite thresholds are allowed.
pub fn evaluate(results: &[LocalizationResult], thresholds_m: &[f64]) -> Result<AccuracyCurve> {
    if results.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of zero results"));
    }
    if thresholds_m.is_empty() || thresholds_m.iter().any(|t| t.is_nan() || *t < 0.0) {
        return Err(Error::InvalidParameter("thresholds must be non-empty and >= 0".into()));
    }
    let mut thresholds = thresholds_m.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let mut errors: BTreeMap<Method, Vec<f64>> = BTreeMap::new();
    for r in results {
        errors.entry(r.method).or_default().push(r.error_m);
    }
    let methods = errors
        .into_iter()
        .map(|(m, errs)| {
            let n = errs.len();
            let acc = thresholds
                .iter()
                .map(|&t| errs.iter().filter(|&&e| e <= t).count() as f64 / n as f64)
                .collect();
            (m, (n, acc))
        })
        .collect();
    Ok(AccuracyCurve {
        thresholds_m: thresholds,
        methods,
    })
}
