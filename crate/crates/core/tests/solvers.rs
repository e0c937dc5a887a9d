use crossview_core::domset::{best_dominant_set, solve, solve_observed, verify_dominant, StepInfo, SIMPLEX_TOL};
use crossview_core::geo::geo_distance_m;
use crossview_core::gmcp::{self, best_swap, cluster_members, combination_count};
use crossview_core::metric::contrastive_grad;
use crossview_core::pipeline::random_graph;
use crossview_core::{AffinityMatrix, Embedder, EmbedderShape, MatchGraph, PairSample, SolverConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Edge weight recomputed from the node list rather than read from the matrix.
fn direct_weight(g: &MatchGraph, i: usize, j: usize) -> f64 {
    let (a, b) = (&g.nodes[i], &g.nodes[j]);
    if a.cluster == b.cluster || a.ref_id == b.ref_id {
        return 0.0;
    }
    g.params
        .edge_weight(geo_distance_m(a.gps, b.gps).unwrap(), a.similarity, b.similarity)
}

/// Odometer over all selections; the first maximum in lexicographic order wins.
fn brute_force(g: &MatchGraph) -> (Vec<usize>, f64) {
    let members = cluster_members(g).unwrap();
    let mut digits = vec![0usize; members.len()];
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    loop {
        let sel: Vec<usize> = digits.iter().zip(&members).map(|(&d, m)| m[d]).collect();
        let mut w = 0.0;
        for x in 0..sel.len() {
            for y in x + 1..sel.len() {
                w += direct_weight(g, sel[x], sel[y]);
            }
        }
        if w > best.1 + 1e-12 {
            best = (sel, w);
        }
        let mut pos = digits.len();
        loop {
            if pos == 0 {
                return best;
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < members[pos].len() {
                break;
            }
            digits[pos] = 0;
        }
    }
}

fn weight_of(g: &MatchGraph, sel: &[usize]) -> f64 {
    let mut w = 0.0;
    for x in 0..sel.len() {
        for y in x + 1..sel.len() {
            w += direct_weight(g, sel[x], sel[y]);
        }
    }
    w
}

#[test]
fn exact_gmcp_agrees_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0;
    while checked < 60 {
        let nc = rng.random_range(2..=5);
        let k = rng.random_range(1..=8);
        let g = random_graph(nc, k, &mut rng).unwrap();
        if combination_count(&g).unwrap() > 20_000 {
            continue;
        }
        let exact = gmcp::solve_exact(&g).unwrap();
        let (sel, w) = brute_force(&g);
        assert!(
            (exact.total_weight - w).abs() < 1e-9,
            "nc {nc} k {k}: {} vs {w}",
            exact.total_weight
        );
        if exact.selection != sel {
            assert!((weight_of(&g, &exact.selection) - w).abs() < 1e-9);
        }
        checked += 1;
    }
}

#[test]
fn local_search_stops_at_a_swap_optimum_below_the_exact_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let g = random_graph(4, 6, &mut rng).unwrap();
        let exact = gmcp::solve_exact(&g).unwrap();
        let local = gmcp::solve_local(&g, 5, 9).unwrap();
        assert!(local.total_weight <= exact.total_weight + 1e-12);
        let members = cluster_members(&g).unwrap();
        assert!(best_swap(&g, &members, &local.selection).is_none());
    }
}

fn symmetric(n: usize, entries: &[f64], sparsity: &[bool]) -> AffinityMatrix {
    let mut a = AffinityMatrix::zeros(n);
    let pairs = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
    for (t, (i, j)) in pairs.enumerate() {
        a.set_sym(i, j, if sparsity[t] { 0.0 } else { entries[t] });
    }
    a
}

fn matrix_strategy(max_n: usize) -> impl Strategy<Value = AffinityMatrix> {
    (2..=max_n).prop_flat_map(|n| {
        let m = n * (n - 1) / 2;
        (
            Just(n),
            prop::collection::vec(0.0f64..1.0, m),
            prop::collection::vec(prop::bool::weighted(0.3), m),
        )
            .prop_map(|(n, e, s)| symmetric(n, &e, &s))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn replicator_stays_on_the_simplex_and_climbs(a in matrix_strategy(14)) {
        if a.is_all_zero() {
            return Ok(());
        }
        let mut steps: Vec<StepInfo> = Vec::new();
        let r = solve_observed(&a, &SolverConfig::default(), |s| steps.push(*s)).unwrap();
        let mut previous = f64::NEG_INFINITY;
        for s in &steps {
            prop_assert!(s.sum_error <= SIMPLEX_TOL, "sum error {}", s.sum_error);
            prop_assert!(s.min_coordinate >= 0.0);
            prop_assert!(s.payoff >= previous - 1e-12, "payoff {} after {previous}", s.payoff);
            previous = s.payoff;
        }
        prop_assert_eq!(steps.len(), r.iterations);
    }

    #[test]
    fn support_is_dominant_or_near_the_best(a in matrix_strategy(9)) {
        let Ok(r) = solve(&a, &SolverConfig::default()) else {
            return Ok(());
        };
        if !verify_dominant(&r.support, &a).unwrap() {
            let best = best_dominant_set(&a).unwrap().expect("a non-zero matrix has a dominant set");
            prop_assert!(r.payoff >= 0.95 * best.payoff, "payoff {} best {}", r.payoff, best.payoff);
        }
    }
}

fn max_relative_error(embedder: &Embedder, sample: &PairSample) -> f64 {
    let h = 1e-5;
    let grad = contrastive_grad(sample, embedder).unwrap();
    let params = embedder.params();
    let mut probe = embedder.clone();
    let mut worst: f64 = 0.0;
    for p in 0..params.len() {
        let mut shifted = params.clone();
        shifted[p] = params[p] + h;
        probe.set_params(&shifted).unwrap();
        let up = probe.loss(sample).unwrap();
        shifted[p] = params[p] - h;
        probe.set_params(&shifted).unwrap();
        let down = probe.loss(sample).unwrap();
        let fd = (up - down) / (2.0 * h);
        let scale = grad[p].abs().max(fd.abs()).max(1e-6);
        worst = worst.max((grad[p] - fd).abs() / scale);
    }
    worst
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (shape, seed) in [
        (
            EmbedderShape {
                input_dim: 12,
                hidden: None,
                output_dim: 5,
            },
            1,
        ),
        (
            EmbedderShape {
                input_dim: 10,
                hidden: Some(7),
                output_dim: 4,
            },
            2,
        ),
    ] {
        let embedder = Embedder::random(shape, 1.0, seed).unwrap();
        for t in 0..20 {
            let x: Vec<f64> = (0..shape.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.8..0.8)).collect();
            let sample = PairSample {
                x,
                y,
                matched: t % 2 == 0,
            };
            let err = max_relative_error(&embedder, &sample);
            assert!(err <= 1e-4, "{shape:?} sample {t}: {err}");
        }
    }
}

#[test]
fn local_search_usually_finds_the_exact_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut equal = 0;
    for t in 0..100 {
        let nc = rng.random_range(2..=5);
        let k = rng.random_range(2..=6);
        let g = random_graph(nc, k, &mut rng).unwrap();
        let exact = gmcp::solve_exact(&g).unwrap();
        let local = gmcp::solve_local(&g, 10, t).unwrap();
        assert!(local.total_weight <= exact.total_weight + 1e-12);
        if (local.total_weight - exact.total_weight).abs() <= 1e-12 {
            equal += 1;
        }
    }
    assert!(equal >= 80, "{equal} of 100");
}
