//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (run with `--nocapture` to see them). The expensive ring fixture
//! and the trained models are built once and shared.

use std::sync::LazyLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uagc::activity::{build_histogram, normalize_activity, smooth_histogram};
use uagc::diffengine::{NodeId, ParamId, ParamStore, SparseOperator, Tensor};
use uagc::geodata::{haversine_miles, RoadGraph, RoadNode, MILES_PER_DEGREE};
use uagc::graphbuild::{combine_adjacency, cooccurrence_matrix, distance_adjacency, SensorAdjacency};
use uagc::models::{
    count_parameters, save_checkpoint, Architecture, BatchInputs, EmbeddingMode, Forecaster,
    GraphOperators, ModelConfig, TeacherInputs,
};
use uagc::pathgen::{astar_route_idx, generate_path_set, make_grid, PathSet};
use uagc::sparse::SparseMatrix;
use uagc::training::{
    make_synthetic_dataset, masked_metrics, trainer, DatasetSplit, DatasetView, MetricAccumulator,
    SyntheticBundle, TrainConfig,
};
use uagc::{ActivityTable, Real, Tape};

fn report(criterion: usize, ok: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion}: {detail}");
}

// ─── shared fixtures ────────────────────────────────────────────────────

struct RingFixture {
    bundle: SyntheticBundle,
    adjacency: SensorAdjacency,
    activity: ActivityTable,
    split: DatasetSplit,
}

static RING: LazyLock<RingFixture> = LazyLock::new(|| {
    let bundle = make_synthetic_dataset(20, 28, 42);
    let snapped = uagc::geodata::snap_sensors(&bundle.graph, &bundle.sensors).unwrap();
    let grid = make_grid(&bundle.graph, &snapped, 2.0, 2.0).unwrap();
    let paths = generate_path_set(&bundle.graph, &grid, &snapped, &[1.0, 0.9, 0.8], 5, 42).unwrap();
    let a_dist = distance_adjacency(&bundle.graph, &snapped, 5.0, 80.0).unwrap();
    let a_cooc = cooccurrence_matrix(&paths, snapped.len()).unwrap();
    let adjacency = combine_adjacency(a_dist, a_cooc, 5.0, 80.0).unwrap();
    let hist: ActivityTable = build_histogram(bundle.survey.iter().copied(), 2).unwrap();
    let activity = normalize_activity(&smooth_histogram(&hist, 2.0).unwrap(), true);
    let split = DatasetSplit::chronological(&bundle.series).unwrap();
    RingFixture {
        bundle,
        adjacency,
        activity,
        split,
    }
});

fn ring_model_config(arch: Architecture, k_diffusion: usize) -> ModelConfig {
    ModelConfig {
        n_sensors: 20,
        dim: 16,
        p_steps: 12,
        q_steps: 12,
        k_diffusion,
        n_layers: 1,
        n_heads: 4,
        d_key: 4,
        embedding: EmbeddingMode::Activity,
        use_sensor_embedding: true,
        architecture: arch,
        n_activity_categories: 2,
        center_activity: true,
    }
}

fn ring_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        learning_rate: 0.01,
        max_epochs: 40, // the early-stopping bound keeps this well under 50
        patience: 5,
        lr_reduce_trials: 2,
        lr_factor: 0.1,
        seed: 7,
        threads: 2,
        scheduled_sampling_tau: None,
        log_timing: false,
    }
}

struct TrainedModels {
    gcrn: Forecaster,
    gcrn_val_mae: f64,
    gcrn_epochs: usize,
    lstm_val_mae: f64,
    last_repeat_val_mae: f64,
    gcrn_test_mae: f64,
    k3_test_mae: f64,
    train_seconds: f64,
}

static TRAINED: LazyLock<TrainedModels> = LazyLock::new(|| {
    let ring = &*RING;
    let view = DatasetView {
        series: &ring.bundle.series,
        split: &ring.split,
        activity: Some(&ring.activity),
    };
    let cfg = ring_train_config();
    let (p, q) = (12, 12);

    let started = Instant::now();
    let mut gcrn = Forecaster::new(
        ring_model_config(Architecture::Gcrn, 1),
        Some(GraphOperators::from_adjacency(&ring.adjacency)),
        cfg.seed,
    )
    .unwrap();
    let gcrn_out = trainer::train(&mut gcrn, &view, &cfg).unwrap();

    let mut lstm = Forecaster::new(ring_model_config(Architecture::Lstm, 1), None, cfg.seed).unwrap();
    let lstm_out = trainer::train(&mut lstm, &view, &cfg).unwrap();
    let train_seconds = started.elapsed().as_secs_f64();

    let mut k3 = Forecaster::new(
        ring_model_config(Architecture::Gcrn, 3),
        Some(GraphOperators::from_adjacency(&ring.adjacency)),
        cfg.seed,
    )
    .unwrap();
    trainer::train(&mut k3, &view, &cfg).unwrap();

    let val_windows = ring.split.windows_in(&ring.split.val, p, q);
    let last_repeat = trainer::evaluate_last_repeat(&view, &val_windows, p, q);

    let test_windows = ring.split.windows_in(&ring.split.test, p, q);
    let gcrn_test = trainer::evaluate(&gcrn, &view, &test_windows, 32, 2).unwrap();
    let k3_test = trainer::evaluate(&k3, &view, &test_windows, 32, 2).unwrap();

    TrainedModels {
        gcrn,
        gcrn_val_mae: gcrn_out.best_val_mae,
        gcrn_epochs: gcrn_out.epochs_run,
        lstm_val_mae: lstm_out.best_val_mae,
        last_repeat_val_mae: last_repeat.overall_mae().unwrap(),
        gcrn_test_mae: gcrn_test.overall_mae().unwrap(),
        k3_test_mae: k3_test.overall_mae().unwrap(),
        train_seconds,
    }
});

// ─── criterion 1: gradient suite ────────────────────────────────────────

/// Central-finite-difference check of every trainable parameter against
/// the tape's analytic gradients.
fn grad_check(
    store: &mut ParamStore<Real>,
    build: &dyn Fn(&mut Tape, &ParamStore<Real>) -> NodeId,
    tol: f64,
    label: &str,
) {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    let analytic: std::collections::HashMap<ParamId, Tensor<Real>> =
        tape.backward(loss).into_iter().collect();
    let h = 1e-5;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        for i in 0..store.get(id).value.numel() {
            let orig = store.get(id).value.data()[i];
            let eval = |store: &mut ParamStore<Real>, v: f64| {
                store.get_mut(id).value.data_mut()[i] = v;
                let mut t = Tape::new();
                let l = build(&mut t, store);
                t.value(l).data()[0]
            };
            let fp = eval(store, orig + h);
            let fm = eval(store, orig - h);
            store.get_mut(id).value.data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic.get(&id).map(|g| g.data()[i]).unwrap_or(0.0);
            let denom = an.abs().max(fd.abs()).max(1e-4);
            assert!(
                (an - fd).abs() / denom < tol,
                "{label}: {} [{i}]: analytic {an} vs fd {fd}",
                store.get(id).name
            );
        }
    }
}

fn rand_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn toy_graph(n: usize) -> GraphOperators {
    let mut triplets = Vec::new();
    for i in 0..n {
        triplets.push((i, (i + 1) % n, 0.7));
        triplets.push((i, i, 1.0));
    }
    GraphOperators::from_combined(&SparseMatrix::from_triplets(n, n, triplets).unwrap())
}

fn toy_model_config(arch: Architecture) -> ModelConfig {
    ModelConfig {
        n_sensors: 4,
        dim: 8,
        p_steps: 3,
        q_steps: 3,
        k_diffusion: 1,
        n_layers: 1,
        n_heads: 2,
        d_key: 4,
        embedding: EmbeddingMode::Activity,
        use_sensor_embedding: true,
        architecture: arch,
        n_activity_categories: 2,
        center_activity: true,
    }
}

fn toy_inputs(cfg: &ModelConfig, batch: usize, seed: u64) -> (BatchInputs, Vec<Tensor<Real>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = batch * cfg.n_sensors;
    let mut tensor = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let history = (0..cfg.p_steps).map(|_| tensor(&[rows, 1])).collect();
    let embedding_rows = (0..cfg.p_steps + cfg.q_steps)
        .map(|_| tensor(&[batch, cfg.n_activity_categories]))
        .collect();
    let teacher = (0..cfg.q_steps).map(|_| tensor(&[rows, 1])).collect();
    (
        BatchInputs {
            batch,
            history,
            embedding_rows,
        },
        teacher,
    )
}

#[test]
fn criterion_01_gradient_suite() {
    let started = Instant::now();
    let tol = 1e-3;

    // Every registered forward op, grouped into composite chains.
    let mut store = ParamStore::new();
    store.add("a", Tensor::from_f64_slice(&[4, 5], &rand_values(20, 1)), true);
    store.add("w", Tensor::from_f64_slice(&[5, 3], &rand_values(15, 2)), true);
    store.add("b", Tensor::from_f64_slice(&[3], &rand_values(3, 3)), true);
    store.add("m", Tensor::from_f64_slice(&[4, 3], &rand_values(12, 4)), true);
    grad_check(
        &mut store,
        &|tape, store| {
            let a = tape.param(store, store.id("a").unwrap());
            let w = tape.param(store, store.id("w").unwrap());
            let b = tape.param(store, store.id("b").unwrap());
            let m = tape.param(store, store.id("m").unwrap());
            let y = tape.matmul(a, w);
            let y = tape.add(y, b);
            let y = tape.sub(y, m);
            let y = tape.mul(y, m);
            let y = tape.sigmoid(y);
            let y = tape.tanh(y);
            let y = tape.softmax(y);
            let y = tape.relu(y);
            let y = tape.abs(y);
            let y = tape.scale(y, 1.3);
            tape.sum(y)
        },
        tol,
        "dense chain",
    );

    let mut store = ParamStore::new();
    store.add("x", Tensor::from_f64_slice(&[5, 7], &rand_values(35, 5)), true);
    store.add("g", Tensor::from_f64_slice(&[7], &rand_values(7, 6)), true);
    store.add("bb", Tensor::from_f64_slice(&[7], &rand_values(7, 7)), true);
    store.add("table", Tensor::from_f64_slice(&[6, 4], &rand_values(24, 8)), true);
    let sparse = SparseMatrix::from_triplets(
        5,
        5,
        vec![(0, 1, 0.5), (1, 3, -0.8), (2, 2, 1.1), (3, 0, 0.4), (4, 4, 0.9)],
    )
    .unwrap();
    let op = std::sync::Arc::new(SparseOperator::new(sparse));
    grad_check(
        &mut store,
        &|tape, store| {
            let x = tape.param(store, store.id("x").unwrap());
            let g = tape.param(store, store.id("g").unwrap());
            let b = tape.param(store, store.id("bb").unwrap());
            let t = tape.param(store, store.id("table").unwrap());
            let ln = tape.layer_norm(x, g, b);
            let sp = tape.sparse_matmul(op.clone(), ln);
            let sliced = tape.slice_last(sp, 1, 4);
            let emb = tape.embedding_lookup(t, vec![0, 2, 2, 5, 1]);
            let cat = tape.concat(sliced, emb);
            let rs = tape.reshape(cat, &[5, 8]);
            let y = tape.tanh(rs);
            tape.sum(y)
        },
        tol,
        "norm/sparse/embed chain",
    );

    for causal in [false, true] {
        let mut store = ParamStore::new();
        store.add("q", Tensor::from_f64_slice(&[2, 4, 6], &rand_values(48, 9)), true);
        store.add("k", Tensor::from_f64_slice(&[2, 4, 6], &rand_values(48, 10)), true);
        store.add("v", Tensor::from_f64_slice(&[2, 4, 6], &rand_values(48, 11)), true);
        store.add("s1", Tensor::from_f64_slice(&[4, 2], &rand_values(8, 12)), true);
        store.add("s2", Tensor::from_f64_slice(&[4, 2], &rand_values(8, 13)), true);
        grad_check(
            &mut store,
            &|tape, store| {
                let q = tape.param(store, store.id("q").unwrap());
                let k = tape.param(store, store.id("k").unwrap());
                let v = tape.param(store, store.id("v").unwrap());
                let qh = tape.split_heads(q, 2);
                let kh = tape.split_heads(k, 2);
                let vh = tape.split_heads(v, 2);
                let at = tape.scaled_dot_attention(qh, kh, vh, causal);
                let at = tape.merge_heads(at, 2);
                let s1 = tape.param(store, store.id("s1").unwrap());
                let s2 = tape.param(store, store.id("s2").unwrap());
                let st = tape.stack_steps(&[s1, s2]);
                let st = tape.repeat_rows(st, 2);
                let st = tape.tile_rows(st, 1);
                let st = tape.reshape(st, &[2, 4, 4]);
                let cat = tape.concat(at, st);
                let y = tape.sigmoid(cat);
                tape.sum(y)
            },
            tol,
            "attention chain",
        );
    }

    // Both full models, end to end at the toy shape.
    fn masked_loss(
        model: &Forecaster,
        inputs: &BatchInputs,
        teacher: &[Tensor<Real>],
        target: &Tensor<Real>,
        mask: &Tensor<Real>,
        want_grads: bool,
    ) -> (f64, Vec<(ParamId, Tensor<Real>)>) {
        let mut tape = Tape::new();
        let preds = model.forward(
            &mut tape,
            inputs,
            Some(TeacherInputs {
                values: teacher,
                feed_probability: 1.0,
                rng: None,
            }),
        );
        let tgt = tape.input(target.clone());
        let msk = tape.input(mask.clone());
        let diff = tape.sub(preds, tgt);
        let abs = tape.abs(diff);
        let masked = tape.mul(abs, msk);
        let loss = tape.sum(masked);
        let value = tape.value(loss).data()[0];
        let grads = if want_grads { tape.backward(loss) } else { Vec::new() };
        (value, grads)
    }

    for arch in [Architecture::Gcrn, Architecture::Gctf] {
        let cfg = toy_model_config(arch);
        let mut model = Forecaster::new(cfg.clone(), Some(toy_graph(4)), 31).unwrap();
        let (inputs, teacher) = toy_inputs(&cfg, 2, 55);
        let target = Tensor::from_f64_slice(&[8, 3, 1], &rand_values(24, 56));
        let mask_vals: Vec<f64> = rand_values(24, 57)
            .into_iter()
            .map(|v| if v > -0.5 { 1.0 } else { 0.0 })
            .collect();
        let mask = Tensor::from_f64_slice(&[8, 3, 1], &mask_vals);

        let (_, grads) = masked_loss(&model, &inputs, &teacher, &target, &mask, true);
        let analytic: std::collections::HashMap<ParamId, Tensor<Real>> = grads.into_iter().collect();
        let h = 1e-5;
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            if !model.store.get(id).trainable {
                continue;
            }
            for i in 0..model.store.get(id).value.numel() {
                let orig = model.store.get(id).value.data()[i];
                model.store.get_mut(id).value.data_mut()[i] = orig + h;
                let (fp, _) = masked_loss(&model, &inputs, &teacher, &target, &mask, false);
                model.store.get_mut(id).value.data_mut()[i] = orig - h;
                let (fm, _) = masked_loss(&model, &inputs, &teacher, &target, &mask, false);
                model.store.get_mut(id).value.data_mut()[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic.get(&id).map(|g| g.data()[i]).unwrap_or(0.0);
                let denom = an.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "{arch:?} {} [{i}]: analytic {an} vs fd {fd}",
                    model.store.get(id).name
                );
            }
        }
    }

    let elapsed = started.elapsed();
    report(
        1,
        elapsed < Duration::from_secs(60),
        &format!(
            "all ops and both full models match finite differences (rel err < 1e-3) in {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

// ─── criterion 2: A* optimality ─────────────────────────────────────────

/// Test-local Dijkstra, independent of the library's search code paths.
fn oracle_dijkstra(adj: &[Vec<(usize, f64)>], src: usize) -> Vec<f64> {
    #[derive(PartialEq)]
    struct E(f64, usize);
    impl Eq for E {}
    impl Ord for E {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            other.0.total_cmp(&self.0)
        }
    }
    impl PartialOrd for E {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    let mut dist = vec![f64::INFINITY; adj.len()];
    dist[src] = 0.0;
    let mut heap = std::collections::BinaryHeap::new();
    heap.push(E(0.0, src));
    while let Some(E(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(E(nd, v));
            }
        }
    }
    dist
}

fn random_road_graph(seed: u64, max_nodes: usize) -> RoadGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(20..=max_nodes);
    let nodes: Vec<RoadNode> = (0..n)
        .map(|i| RoadNode {
            node_id: format!("n{i:03}"),
            lat: 34.0 + rng.random_range(-0.3..0.3),
            lon: -118.0 + rng.random_range(-0.3..0.3),
        })
        .collect();
    let mut edges = Vec::new();
    let m = rng.random_range(n..5 * n);
    for e in 0..m {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a == b {
            continue;
        }
        // Road lengths never undercut the straight line, which keeps the
        // scaled haversine heuristic admissible.
        let straight = haversine_miles(nodes[a].lat, nodes[a].lon, nodes[b].lat, nodes[b].lon);
        edges.push((
            format!("e{e}"),
            nodes[a].node_id.clone(),
            nodes[b].node_id.clone(),
            straight.max(1e-6) * rng.random_range(1.0..2.5),
            rng.random_range(0.0..1.0) < 0.35,
        ));
    }
    RoadGraph::from_parts(nodes, edges, |_| 0).unwrap()
}

#[test]
fn criterion_02_astar_optimality() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let mut checked = 0usize;
    for seed in 0..110u64 {
        let graph = random_road_graph(seed, 200);
        let n = graph.nodes().len();
        for coeff in [1.0, 0.9, 0.8] {
            // Scaled-cost adjacency for the oracle.
            let mut adj = vec![Vec::new(); n];
            for e in graph.edges() {
                let w = e.length_miles * if e.is_freeway { coeff } else { 1.0 };
                adj[e.from].push((e.to, w));
            }
            for _ in 0..4 {
                let src = rng.random_range(0..n);
                let dst = rng.random_range(0..n);
                let oracle = oracle_dijkstra(&adj, src)[dst];
                match astar_route_idx(&graph, src, dst, coeff).unwrap() {
                    Some(path) => {
                        assert!(
                            path.total_cost == oracle
                                || (path.total_cost - oracle).abs() <= 1e-12 * oracle.max(1.0),
                            "seed {seed} coeff {coeff}: {} vs {oracle}",
                            path.total_cost
                        );
                    }
                    None => assert!(oracle.is_infinite(), "seed {seed}: oracle reached, search did not"),
                }
                checked += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    report(
        2,
        elapsed < Duration::from_secs(30),
        &format!(
            "{checked} routes across 110 random graphs match the Dijkstra oracle in {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

// ─── criterion 3: adjacency invariants ──────────────────────────────────

#[test]
fn criterion_03_adjacency_invariants() {
    let ring = &*RING;
    let adj = &ring.adjacency;
    adj.validate().expect("structural invariants");
    let n = adj.n_sensors();
    for i in 0..n {
        assert_eq!(adj.a_dist.get(i, i), 1.0, "distance kernel diagonal");
        assert_eq!(adj.a_cooc.get(i, i), 1.0, "co-occurrence diagonal (all appear)");
    }
    for (r, c, v) in adj.a_cooc.iter() {
        assert_eq!(adj.a_cooc.get(c, r), v, "co-occurrence symmetry");
        assert!((0.0..=1.0 + 1e-12).contains(&v));
    }
    for (r, c, _) in adj.a.iter() {
        assert!(adj.a_dist.get(r, c) != 0.0, "support(A) within support(A_dist)");
    }
    let fwd_sums = adj.a_fwd.row_sums();
    let bwd_sums = adj.a_bwd.row_sums();
    for (r, s) in fwd_sums.iter().chain(bwd_sums.iter()).enumerate() {
        assert!(s == &0.0 || (s - 1.0).abs() <= 1e-9, "walk row {r} sums to {s}");
    }
    report(
        3,
        true,
        &format!("ring adjacency ({n} sensors, nnz {}) satisfies all invariants", adj.a.nnz()),
    );
}

// ─── criterion 4: kernel values ─────────────────────────────────────────

/// Directed two-node road at an exact along-road spacing.
fn two_node_graph(spacing_miles: f64) -> RoadGraph {
    let dlat = spacing_miles / MILES_PER_DEGREE;
    let nodes = vec![
        RoadNode {
            node_id: "a".into(),
            lat: 34.0,
            lon: -118.0,
        },
        RoadNode {
            node_id: "b".into(),
            lat: 34.0 + dlat,
            lon: -118.0,
        },
    ];
    let edges = vec![("e".to_string(), "a".to_string(), "b".to_string(), spacing_miles, false)];
    RoadGraph::from_parts(nodes, edges, |_| 0).unwrap()
}

#[test]
fn criterion_04_kernel_values() {
    let sensors = |g: &RoadGraph| {
        uagc::geodata::snap_sensors(
            g,
            &[
                uagc::geodata::Sensor {
                    sensor_id: "s0".into(),
                    lat: g.node(0).lat,
                    lon: g.node(0).lon,
                },
                uagc::geodata::Sensor {
                    sensor_id: "s1".into(),
                    lat: g.node(1).lat,
                    lon: g.node(1).lon,
                },
            ],
        )
        .unwrap()
    };
    // dist 0 -> 1 exactly.
    let g = two_node_graph(5.0);
    let a = distance_adjacency(&g, &sensors(&g), 5.0, 80.0).unwrap();
    assert_eq!(a.get(0, 0), 1.0);
    // dist 5, sigma 5 -> exp(-1) within 1e-5.
    let off = a.get(0, 1);
    assert!((off - 0.36788).abs() < 1e-5, "kernel at 5 miles: {off}");
    // dist >= kappa -> zero (strict cutoff).
    let g = two_node_graph(80.0);
    let a = distance_adjacency(&g, &sensors(&g), 5.0, 80.0).unwrap();
    assert_eq!(a.get(0, 1), 0.0, "cutoff must exclude dist == kappa");
    report(4, true, "kernel values at 0/5/80 miles match exp(-d^2/25) with a strict cutoff");
}

// ─── criteria 5-7: trained ring models ──────────────────────────────────

#[test]
fn criterion_05_synthetic_end_to_end() {
    let t = &*TRAINED;
    let vs_baseline = t.gcrn_val_mae / t.last_repeat_val_mae;
    let vs_lstm = t.gcrn_val_mae / t.lstm_val_mae;
    let ok = vs_baseline <= 0.70 && vs_lstm <= 0.95 && t.train_seconds < 1200.0 && t.gcrn_epochs <= 50;
    report(
        5,
        ok,
        &format!(
            "val MAE {:.3} mph = {:.0}% below LastRepeat ({:.3}) and {:.1}% below UA-LSTM ({:.3}); {} epochs, {:.0}s",
            t.gcrn_val_mae,
            100.0 * (1.0 - vs_baseline),
            t.last_repeat_val_mae,
            100.0 * (1.0 - vs_lstm),
            t.lstm_val_mae,
            t.gcrn_epochs,
            t.train_seconds
        ),
    );
}

#[test]
fn criterion_06_diffusion_step_ablation() {
    let t = &*TRAINED;
    // K = 3 must not beat K = 1 by more than 2%: extra diffusion adds no
    // information on a well-constructed graph.
    let ok = t.k3_test_mae >= 0.98 * t.gcrn_test_mae;
    report(
        6,
        ok,
        &format!(
            "test MAE: K=1 {:.3} mph, K=3 {:.3} mph (K=3 / K=1 = {:.3})",
            t.gcrn_test_mae,
            t.k3_test_mae,
            t.k3_test_mae / t.gcrn_test_mae
        ),
    );
}

/// In-process equivalent of the simulate command: constant-speed history,
/// two activity scenario windows, per-sensor deltas at one horizon step.
fn scenario_deltas(model: &Forecaster, activity: &ActivityTable, weekday: usize) -> Vec<f64> {
    let cfg = &model.cfg;
    let mean = model.store.get(model.store.id("scaler.mean").unwrap()).value.data()[0];
    let std = model.store.get(model.store.id("scaler.std").unwrap()).value.data()[0];
    let standardized = (30.0 - mean) / std;
    let run = |start_minute: usize| -> Vec<f64> {
        let rows = (0..cfg.p_steps + cfg.q_steps)
            .map(|i| {
                let total = start_minute + 5 * i;
                let w = (weekday + total / 1440) % 7;
                let bin = w * 288 + (total % 1440) / 5;
                let v = activity.bin_vector(bin);
                Tensor::from_vec(&[1, v.len()], v)
            })
            .collect();
        let inputs = BatchInputs {
            batch: 1,
            history: (0..cfg.p_steps)
                .map(|_| Tensor::filled(&[cfg.n_sensors, 1], standardized))
                .collect(),
            embedding_rows: rows,
        };
        let mut tape = Tape::new();
        let preds = model.forward(&mut tape, &inputs, None);
        (0..cfg.n_sensors)
            .map(|s| mean + std * tape.value(preds).data()[s * cfg.q_steps + 2])
            .collect()
    };
    let morning = run(6 * 60 + 35);
    let evening = run(16 * 60 + 45);
    morning.iter().zip(&evening).map(|(a, b)| a - b).collect()
}

#[test]
fn criterion_07_activity_response_simulation() {
    let ring = &*RING;
    let t = &*TRAINED;
    let deltas = scenario_deltas(&t.gcrn, &ring.activity, 2);
    let planted: Vec<usize> = ring
        .bundle
        .morning_sensors
        .iter()
        .chain(&ring.bundle.evening_sensors)
        .copied()
        .collect();
    let planted_max = planted
        .iter()
        .map(|&s| deltas[s].abs())
        .fold(0.0f64, f64::max);

    // Zero-parameter model: identical outputs for both scenarios.
    let mut zero = Forecaster::new(
        ring_model_config(Architecture::Gcrn, 1),
        Some(GraphOperators::from_adjacency(&ring.adjacency)),
        0,
    )
    .unwrap();
    for id in zero.store.ids().collect::<Vec<_>>() {
        if zero.store.get(id).trainable {
            let shape = zero.store.get(id).value.shape().to_vec();
            zero.store.get_mut(id).value = Tensor::zeros(&shape);
        }
    }
    for (name, value) in [("scaler.mean", ring.split.scaler.mean), ("scaler.std", ring.split.scaler.std)] {
        let id = zero.store.id(name).unwrap();
        zero.store.get_mut(id).value = Tensor::scalar(value);
    }
    let zero_max = scenario_deltas(&zero, &ring.activity, 2)
        .iter()
        .map(|d| d.abs())
        .fold(0.0f64, f64::max);

    let ok = planted_max > 1.0 && zero_max < 0.1;
    report(
        7,
        ok,
        &format!(
            "trained model: max |delta| {planted_max:.2} mph at planted sensors; zero model: {zero_max:.3} mph"
        ),
    );
}

// ─── criterion 8: determinism ───────────────────────────────────────────

#[test]
fn criterion_08_determinism() {
    // Path sets: two consecutive generations serialize byte-identically.
    let bundle = make_synthetic_dataset(8, 2, 3);
    let snapped = uagc::geodata::snap_sensors(&bundle.graph, &bundle.sensors).unwrap();
    let grid = make_grid(&bundle.graph, &snapped, 2.0, 2.0).unwrap();
    let mut path_bytes = Vec::new();
    for _ in 0..2 {
        let paths = generate_path_set(&bundle.graph, &grid, &snapped, &[1.0, 0.9], 3, 11).unwrap();
        let mut bytes = Vec::new();
        paths.write(&bundle.graph, &mut bytes).unwrap();
        path_bytes.push(bytes);
    }
    assert_eq!(path_bytes[0], path_bytes[1], "path sets must be byte-identical");
    let reread = PathSet::read(std::io::Cursor::new(&path_bytes[0]), &bundle.graph, &snapped).unwrap();
    let mut rewritten = Vec::new();
    reread.write(&bundle.graph, &mut rewritten).unwrap();
    assert_eq!(path_bytes[0], rewritten, "parse/serialize round trip");

    // Checkpoints and logs: two identical training runs.
    let hist: ActivityTable = build_histogram(bundle.survey.iter().copied(), 2).unwrap();
    let activity = normalize_activity(&smooth_histogram(&hist, 2.0).unwrap(), true);
    let split = DatasetSplit::chronological(&bundle.series).unwrap();
    let view = DatasetView {
        series: &bundle.series,
        split: &split,
        activity: Some(&activity),
    };
    let cfg = ModelConfig {
        n_sensors: 8,
        dim: 8,
        p_steps: 3,
        q_steps: 2,
        ..ring_model_config(Architecture::Gcrn, 1)
    };
    let tcfg = TrainConfig {
        max_epochs: 2,
        threads: 2,
        seed: 5,
        log_timing: false,
        ..ring_train_config()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut artifacts = Vec::new();
    for run in 0..2 {
        let mut triplets = Vec::new();
        for i in 0..8 {
            triplets.push((i, (i + 1) % 8, 0.9));
            triplets.push((i, i, 1.0));
        }
        let graph = GraphOperators::from_combined(&SparseMatrix::from_triplets(8, 8, triplets).unwrap());
        let mut model = Forecaster::new(cfg.clone(), Some(graph), tcfg.seed).unwrap();
        let outcome = trainer::train(&mut model, &view, &tcfg).unwrap();
        let path = dir.path().join(format!("run{run}.ckpt"));
        save_checkpoint(&path, &model).unwrap();
        artifacts.push((std::fs::read(&path).unwrap(), outcome.logs));
    }
    assert_eq!(artifacts[0].0, artifacts[1].0, "checkpoints must be byte-identical");
    assert_eq!(artifacts[0].1, artifacts[1].1, "training logs must be identical");
    report(8, true, "path sets, checkpoints and logs reproduce byte-identically across runs");
}

// ─── criterion 9: metric correctness ────────────────────────────────────

#[test]
fn criterion_09_metric_correctness() {
    // Hand-computed 2x2 fixture at 1e-12.
    let pred = [1.0, 2.0, 10.0, 20.0];
    let truth = [2.0, 4.0, 10.0, 16.0];
    let mask = [true, true, true, true];
    let out = masked_metrics(&pred, &truth, &mask, 2, &[1, 2]);
    let m1 = out[0].1.unwrap();
    assert!((m1.mae - 1.5).abs() < 1e-12);
    assert!((m1.rmse - 2.5f64.sqrt()).abs() < 1e-12);
    assert!((m1.mape_percent.unwrap() - 50.0).abs() < 1e-12);
    let m2 = out[1].1.unwrap();
    assert!((m2.mae - 2.0).abs() < 1e-12);
    assert!((m2.rmse - 8.0f64.sqrt()).abs() < 1e-12);
    assert!((m2.mape_percent.unwrap() - 12.5).abs() < 1e-12);

    // Horizon indexing (3/6/last) against a direct recomputation from the
    // saved windows.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (q, n) = (12, 4);
    let mut acc = MetricAccumulator::new(q);
    let mut saved = Vec::new();
    for _ in 0..9 {
        let pred: Vec<f64> = (0..q * n).map(|_| rng.random_range(10.0..70.0)).collect();
        let truth: Vec<f64> = (0..q * n).map(|_| rng.random_range(10.0..70.0)).collect();
        let mask: Vec<bool> = (0..q * n).map(|_| rng.random_range(0.0..1.0) > 0.1).collect();
        acc.add_window(&pred, &truth, &mask);
        saved.push((pred, truth, mask));
    }
    assert_eq!(acc.report_steps(), vec![3, 6, 12]);
    for step in [3usize, 6, 12] {
        let mut abs = 0.0;
        let mut count = 0u64;
        for (pred, truth, mask) in &saved {
            for i in 0..n {
                let idx = (step - 1) * n + i;
                if mask[idx] {
                    abs += (pred[idx] - truth[idx]).abs();
                    count += 1;
                }
            }
        }
        let got = acc.step_metrics(step).unwrap().mae;
        assert!(
            (got - abs / count as f64).abs() < 1e-12,
            "step {step}: {got} vs direct"
        );
    }
    report(9, true, "masked MAE/RMSE/MAPE match hand values at 1e-12; horizon indexing verified");
}

// ─── criterion 10: calibration (reported, not asserted) ─────────────────

#[test]
fn criterion_10_calibration_report() {
    let count = count_parameters(&ModelConfig::defaults(207, 9)).unwrap();
    println!(
        "criterion 10: PASS — calibration report: default recurrent config for a 207-sensor \
         network has {count} parameters (reference order of magnitude 174,401; ratio {:.2}); \
         grid-shape and adjacency-NNZ calibration need the real sensor/road inputs, which are \
         not bundled, so those two numbers are not reported here",
        count as f64 / 174_401.0
    );
}
