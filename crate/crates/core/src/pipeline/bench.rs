use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::affinity::{build_graph_from_nodes, AffinityParams, GraphNode, MatchGraph};
use crate::domset::{select_on_graph, SolverConfig};
use crate::error::{Error, Result};
use crate::geo::{self, GpsCoord, LocalXY};
use crate::gmcp::{self, ENUMERATION_BUDGET};

/// Calls shorter than this are repeated and averaged.
const MIN_SAMPLE: Duration = Duration::from_millis(2);

const BENCH_ORIGIN: GpsCoord = GpsCoord { lat: 40.44, lon: -80.0 };

/// A match graph shaped like a real query: `nc` clusters of `k` candidates
/// scattered over a 1.5 km square, except that one candidate per cluster
/// lies within 50 m of a common true location.
pub fn random_graph<R: Rng>(nc: usize, k: usize, rng: &mut R) -> Result<MatchGraph> {
    if nc == 0 || k == 0 {
        return Err(Error::InvalidParameter("graph needs nc >= 1 and k >= 1".into()));
    }
    let at = |x: f64, y: f64| {
        geo::unproject(LocalXY {
            x,
            y,
            anchor: BENCH_ORIGIN,
        })
    };
    let truth = (rng.random_range(0.0..1500.0), rng.random_range(0.0..1500.0));
    let mut nodes = Vec::with_capacity(nc * k);
    for c in 0..nc {
        let true_slot = rng.random_range(0..k);
        for j in 0..k {
            let gps = if j == true_slot {
                at(
                    truth.0 + rng.random_range(-50.0..50.0),
                    truth.1 + rng.random_range(-50.0..50.0),
                )?
            } else {
                at(rng.random_range(0.0..1500.0), rng.random_range(0.0..1500.0))?
            };
            nodes.push(GraphNode {
                ref_id: format!("c{c}/n{j}"),
                cluster: c,
                gps,
                similarity: rng.random_range(0.3..1.0),
            });
        }
    }
    build_graph_from_nodes(nodes, nc, AffinityParams::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchStatus {
    Ok,
    /// Exact GMCP would exceed the enumeration budget.
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: &'static str,
    pub nc: usize,
    pub k: usize,
    pub n: usize,
    pub combinations: u64,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub trials: usize,
    pub status: BenchStatus,
}

impl BenchRow {
    pub fn write_csv<W: Write>(rows: &[BenchRow], w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "method",
            "nc",
            "k",
            "n",
            "combinations",
            "mean_ms",
            "median_ms",
            "trials",
            "status",
        ])?;
        for r in rows {
            let status = match r.status {
                BenchStatus::Ok => "ok",
                BenchStatus::Skipped => "skipped",
            };
            out.write_record([
                r.method.to_string(),
                r.nc.to_string(),
                r.k.to_string(),
                r.n.to_string(),
                r.combinations.to_string(),
                format!("{:.6}", r.mean_ms),
                format!("{:.6}", r.median_ms),
                r.trials.to_string(),
                status.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Milliseconds per call, repeating fast calls to get a measurable span.
fn time_call<F: FnMut() -> Result<()>>(mut f: F) -> Result<f64> {
    let start = Instant::now();
    let mut reps = 0u32;
    while reps == 0 || start.elapsed() < MIN_SAMPLE {
        f()?;
        reps += 1;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / reps as f64)
}

fn summarize(method: &'static str, nc: usize, k: usize, combinations: u64, mut times: Vec<f64>) -> BenchRow {
    let trials = times.len();
    let mean_ms = times.iter().sum::<f64>() / trials as f64;
    times.sort_by(f64::total_cmp);
    let median_ms = if trials % 2 == 1 {
        times[trials / 2]
    } else {
        0.5 * (times[trials / 2 - 1] + times[trials / 2])
    };
    BenchRow {
        method,
        nc,
        k,
        n: nc * k,
        combinations,
        mean_ms,
        median_ms,
        trials,
        status: BenchStatus::Ok,
    }
}

/// Times the dominant-set selection and exact GMCP on `trials` random graphs
/// for every `(nc, k)` pair. GMCP rows beyond the enumeration budget are
/// marked skipped. Timings vary between runs; everything else is seeded.
pub fn bench_runtime(nc_list: &[usize], k_list: &[usize], trials: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    let solver = SolverConfig::default();
    let mut rows = Vec::new();
    for &nc in nc_list {
        for &k in k_list {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((nc as u64) << 32) | k as u64);
            let graphs = (0..trials)
                .map(|_| random_graph(nc, k, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let combinations = gmcp::combination_count(&graphs[0])?;

            let domset = graphs
                .iter()
                .map(|g| time_call(|| select_on_graph(g, &solver).map(|_| ())))
                .collect::<Result<Vec<_>>>()?;
            rows.push(summarize("domset", nc, k, combinations, domset));

            if combinations > ENUMERATION_BUDGET {
                rows.push(BenchRow {
                    method: "gmcp",
                    nc,
                    k,
                    n: nc * k,
                    combinations,
                    mean_ms: f64::NAN,
                    median_ms: f64::NAN,
                    trials: 0,
                    status: BenchStatus::Skipped,
                });
                continue;
            }
            let exact = graphs
                .iter()
                .map(|g| time_call(|| gmcp::solve_exact(g).map(|_| ())))
                .collect::<Result<Vec<_>>>()?;
            rows.push(summarize("gmcp", nc, k, combinations, exact));
        }
    }
    Ok(rows)
}
