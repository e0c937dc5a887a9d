//! Fixtures shared by the solver benchmarks.

use crossview_core::pipeline::random_graph;
use crossview_core::MatchGraph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The random match graph used for one `(nc, k)` benchmark cell.
pub fn graph(nc: usize, k: usize, seed: u64) -> MatchGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((nc as u64) << 32) | k as u64);
    random_graph(nc, k, &mut rng).expect("nc and k are positive")
}
