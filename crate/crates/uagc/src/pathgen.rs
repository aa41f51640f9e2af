//! Travel-path generation.
//!
//! The sensor region is partitioned into a square mileage grid; for every
//! ordered cell pair, seeded endpoints are drawn and routed with A* under a
//! set of freeway cost coefficients. The resulting path multiset drives the
//! co-occurrence similarity between sensors.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geodata::{haversine_miles, RoadGraph, SnappedSensor, MILES_PER_DEGREE};

#[derive(Debug, Error)]
pub enum PathGenError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("cell size must be positive, got {0}")]
    NonPositiveCellSize(f64),
    #[error("grid requires at least one sensor")]
    NoSensors,
    #[error("freeway coefficient {0} outside (0, 1]")]
    BadCoefficient(f64),
    #[error("coefficient list is empty")]
    EmptyCoefficients,
    #[error("grid contains no cells with road nodes")]
    EmptyGrid,
    #[error("unknown node id {0}")]
    UnknownNode(String),
}

/// Square mileage grid over the padded sensor bounding box, with the road
/// nodes falling inside each cell.
#[derive(Debug, Clone)]
pub struct Grid {
    origin_lat: f64,
    origin_lon: f64,
    cell_miles: f64,
    n_rows: usize,
    n_cols: usize,
    lon_miles_per_degree: f64,
    cell_nodes: Vec<Vec<usize>>,
}

impl Grid {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    /// Road nodes inside a cell, by flat index `row * n_cols + col`.
    pub fn cell_nodes(&self, cell: usize) -> &[usize] {
        &self.cell_nodes[cell]
    }

    /// Cell containing a coordinate, if it falls inside the padded box.
    pub fn cell_of(&self, lat: f64, lon: f64) -> Option<usize> {
        let row = ((lat - self.origin_lat) * MILES_PER_DEGREE / self.cell_miles).floor();
        let col = ((lon - self.origin_lon) * self.lon_miles_per_degree / self.cell_miles).floor();
        if row >= 0.0 && col >= 0.0 && (row as usize) < self.n_rows && (col as usize) < self.n_cols {
            Some(row as usize * self.n_cols + col as usize)
        } else {
            None
        }
    }
}

/// Partitions the padded sensor extent into `cell_size_miles` squares.
/// Rows follow latitude (height), columns longitude (width); the local
/// metric is 1 degree latitude = R*pi/180 miles and longitude scaled by
/// cos(mean sensor latitude).
pub fn make_grid(
    graph: &RoadGraph,
    sensors: &[SnappedSensor],
    cell_size_miles: f64,
    padding_miles: f64,
) -> Result<Grid, PathGenError> {
    if !(cell_size_miles.is_finite() && cell_size_miles > 0.0) {
        return Err(PathGenError::NonPositiveCellSize(cell_size_miles));
    }
    if sensors.is_empty() {
        return Err(PathGenError::NoSensors);
    }
    let lats: Vec<f64> = sensors.iter().map(|s| s.sensor.lat).collect();
    let lons: Vec<f64> = sensors.iter().map(|s| s.sensor.lon).collect();
    let (min_lat, max_lat) = (
        lats.iter().copied().fold(f64::INFINITY, f64::min),
        lats.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let (min_lon, max_lon) = (
        lons.iter().copied().fold(f64::INFINITY, f64::min),
        lons.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let mean_lat = lats.iter().sum::<f64>() / lats.len() as f64;
    let lon_miles_per_degree = MILES_PER_DEGREE * mean_lat.to_radians().cos();

    let height_miles = (max_lat - min_lat) * MILES_PER_DEGREE + 2.0 * padding_miles;
    let width_miles = (max_lon - min_lon) * lon_miles_per_degree + 2.0 * padding_miles;
    // The 1e-9 slack keeps exact multiples of the cell size from gaining a
    // row to float noise.
    let n_rows = ((height_miles / cell_size_miles - 1e-9).ceil() as usize).max(1);
    let n_cols = ((width_miles / cell_size_miles - 1e-9).ceil() as usize).max(1);

    let origin_lat = min_lat - padding_miles / MILES_PER_DEGREE;
    let origin_lon = min_lon - padding_miles / lon_miles_per_degree;

    let mut grid = Grid {
        origin_lat,
        origin_lon,
        cell_miles: cell_size_miles,
        n_rows,
        n_cols,
        lon_miles_per_degree,
        cell_nodes: vec![Vec::new(); n_rows * n_cols],
    };
    for (i, node) in graph.nodes().iter().enumerate() {
        if let Some(cell) = grid.cell_of(node.lat, node.lon) {
            grid.cell_nodes[cell].push(i);
        }
    }
    Ok(grid)
}

/// A routed path: node indices, the edges joining them, and the total cost
/// under the freeway coefficient. A source-equals-destination route is the
/// empty path with cost zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TravelPath {
    pub nodes: Vec<usize>,
    pub edges: Vec<usize>,
    pub total_cost: f64,
    pub freeway_coefficient: f64,
}

impl TravelPath {
    /// Fraction of path mileage on freeway edges (0 for the empty path).
    pub fn freeway_fraction(&self, graph: &RoadGraph) -> f64 {
        let mut total = 0.0;
        let mut freeway = 0.0;
        for &ei in &self.edges {
            let e = &graph.edges()[ei];
            total += e.length_miles;
            if e.is_freeway {
                freeway += e.length_miles;
            }
        }
        if total > 0.0 {
            freeway / total
        } else {
            0.0
        }
    }
}

#[derive(Copy, Clone, PartialEq)]
struct Frontier {
    f_cost: f64,
    rank: usize,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .f_cost
            .total_cmp(&self.f_cost)
            .then_with(|| other.rank.cmp(&self.rank))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Cost-optimal route under per-edge cost `length * (coefficient if freeway
/// else 1)`. The heuristic is haversine-to-destination scaled by the
/// coefficient, which stays admissible because every edge costs at least
/// coefficient times its straight-line length. Returns `None` when the
/// destination is unreachable.
pub fn astar_route_idx(
    graph: &RoadGraph,
    src: usize,
    dst: usize,
    freeway_coefficient: f64,
) -> Result<Option<TravelPath>, PathGenError> {
    if !(freeway_coefficient > 0.0 && freeway_coefficient <= 1.0) {
        return Err(PathGenError::BadCoefficient(freeway_coefficient));
    }
    if src == dst {
        return Ok(Some(TravelPath {
            nodes: Vec::new(),
            edges: Vec::new(),
            total_cost: 0.0,
            freeway_coefficient,
        }));
    }
    let n = graph.nodes().len();
    let dst_node = graph.node(dst);
    let heuristic = |i: usize| {
        let node = graph.node(i);
        haversine_miles(node.lat, node.lon, dst_node.lat, dst_node.lon) * freeway_coefficient
    };
    let mut g_score = vec![f64::INFINITY; n];
    let mut parent_edge: Vec<Option<usize>> = vec![None; n];
    let mut heap = std::collections::BinaryHeap::new();
    g_score[src] = 0.0;
    heap.push(Frontier {
        f_cost: heuristic(src),
        rank: graph.id_rank(src),
        node: src,
    });
    while let Some(Frontier { f_cost, node, .. }) = heap.pop() {
        if node == dst {
            let mut nodes = vec![dst];
            let mut edges = Vec::new();
            let mut cur = dst;
            while let Some(ei) = parent_edge[cur] {
                edges.push(ei);
                cur = graph.edges()[ei].from;
                nodes.push(cur);
            }
            nodes.reverse();
            edges.reverse();
            return Ok(Some(TravelPath {
                nodes,
                edges,
                total_cost: g_score[dst],
                freeway_coefficient,
            }));
        }
        if f_cost > g_score[node] + heuristic(node) {
            continue; // stale entry
        }
        for &ei in graph.out_edges(node) {
            let e = &graph.edges()[ei];
            let step = e.length_miles
                * if e.is_freeway {
                    freeway_coefficient
                } else {
                    1.0
                };
            let tentative = g_score[node] + step;
            if tentative < g_score[e.to] {
                g_score[e.to] = tentative;
                parent_edge[e.to] = Some(ei);
                heap.push(Frontier {
                    f_cost: tentative + heuristic(e.to),
                    rank: graph.id_rank(e.to),
                    node: e.to,
                });
            }
        }
    }
    Ok(None)
}

/// Id-based wrapper over [`astar_route_idx`].
pub fn astar_route(
    graph: &RoadGraph,
    src_node: &str,
    dst_node: &str,
    freeway_coefficient: f64,
) -> Result<Option<TravelPath>, PathGenError> {
    let src = graph
        .node_idx(src_node)
        .ok_or_else(|| PathGenError::UnknownNode(src_node.to_string()))?;
    let dst = graph
        .node_idx(dst_node)
        .ok_or_else(|| PathGenError::UnknownNode(dst_node.to_string()))?;
    astar_route_idx(graph, src, dst, freeway_coefficient)
}

/// One generated path as stored in a path set.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub origin_cell: usize,
    pub dest_cell: usize,
    pub repetition: usize,
    pub coefficient: f64,
    pub nodes: Vec<usize>,
}

/// The generated path multiset plus sensor appearance statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub seed: u64,
    pub records: Vec<PathRecord>,
    /// Number of paths each sensor appears on (indexed like the sensor list).
    pub appearance: Vec<u64>,
    /// Number of paths each unordered sensor pair (i < j) co-appears on.
    pub coappearance: HashMap<(usize, usize), u64>,
}

impl PathSet {
    /// Builds counts from records; a sensor appears on a path when its
    /// snapped node is on the path's node sequence.
    pub fn from_records(seed: u64, records: Vec<PathRecord>, sensors: &[SnappedSensor]) -> Self {
        let mut node_sensors: HashMap<usize, Vec<usize>> = HashMap::new();
        for (si, s) in sensors.iter().enumerate() {
            node_sensors.entry(s.node).or_default().push(si);
        }
        let mut appearance = vec![0u64; sensors.len()];
        let mut coappearance: HashMap<(usize, usize), u64> = HashMap::new();
        for rec in &records {
            let mut hits: BTreeSet<usize> = BTreeSet::new();
            for node in &rec.nodes {
                if let Some(sis) = node_sensors.get(node) {
                    hits.extend(sis.iter().copied());
                }
            }
            let hits: Vec<usize> = hits.into_iter().collect();
            for (a, &i) in hits.iter().enumerate() {
                appearance[i] += 1;
                for &j in &hits[a + 1..] {
                    *coappearance.entry((i, j)).or_insert(0) += 1;
                }
            }
        }
        Self {
            seed,
            records,
            appearance,
            coappearance,
        }
    }

    pub fn coappear(&self, i: usize, j: usize) -> u64 {
        if i == j {
            return self.appearance[i];
        }
        let key = (i.min(j), i.max(j));
        self.coappearance.get(&key).copied().unwrap_or(0)
    }

    /// Writes `# uagc-paths v1 seed=<u64>` then one
    /// `origin;dest;rep;coeff;node,node,...` line per path.
    pub fn write(&self, graph: &RoadGraph, out: &mut impl Write) -> Result<(), PathGenError> {
        writeln!(out, "# uagc-paths v1 seed={}", self.seed)?;
        for rec in &self.records {
            let ids: Vec<&str> = rec
                .nodes
                .iter()
                .map(|&n| graph.node(n).node_id.as_str())
                .collect();
            writeln!(
                out,
                "{};{};{};{};{}",
                rec.origin_cell,
                rec.dest_cell,
                rec.repetition,
                rec.coefficient,
                ids.join(",")
            )?;
        }
        Ok(())
    }

    pub fn read(
        input: impl BufRead,
        graph: &RoadGraph,
        sensors: &[SnappedSensor],
    ) -> Result<Self, PathGenError> {
        let mut lines = input.lines();
        let header = lines.next().ok_or(PathGenError::Format {
            line: 1,
            msg: "empty file".into(),
        })??;
        let seed = header
            .strip_prefix("# uagc-paths v1 seed=")
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| PathGenError::Format {
                line: 1,
                msg: format!("bad header `{header}`"),
            })?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.splitn(5, ';').collect();
            if fields.len() != 5 {
                return Err(PathGenError::Format {
                    line: lineno,
                    msg: "expected origin;dest;rep;coeff;nodes".into(),
                });
            }
            let parse_usize = |s: &str, what: &str| {
                s.trim().parse::<usize>().map_err(|_| PathGenError::Format {
                    line: lineno,
                    msg: format!("bad {what} `{s}`"),
                })
            };
            let coefficient = fields[3].trim().parse::<f64>().map_err(|_| PathGenError::Format {
                line: lineno,
                msg: format!("bad coefficient `{}`", fields[3]),
            })?;
            let nodes = if fields[4].is_empty() {
                Vec::new()
            } else {
                fields[4]
                    .split(',')
                    .map(|id| {
                        graph
                            .node_idx(id)
                            .ok_or_else(|| PathGenError::UnknownNode(id.to_string()))
                    })
                    .collect::<Result<Vec<_>, _>>()?
            };
            records.push(PathRecord {
                origin_cell: parse_usize(fields[0], "origin cell")?,
                dest_cell: parse_usize(fields[1], "dest cell")?,
                repetition: parse_usize(fields[2], "repetition")?,
                coefficient,
                nodes,
            });
        }
        Ok(Self::from_records(seed, records, sensors))
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Per-task RNG seed so route generation over cell pairs is order- and
/// thread-count-independent.
fn task_seed(seed: u64, origin: usize, dest: usize, rep: usize) -> u64 {
    let mut state = seed;
    let mut out = splitmix64(&mut state);
    state ^= origin as u64;
    out ^= splitmix64(&mut state);
    state ^= dest as u64;
    out ^= splitmix64(&mut state);
    state ^= rep as u64;
    out ^ splitmix64(&mut state)
}

/// Generates the path multiset: for every ordered cell pair and repetition
/// one endpoint pair is drawn uniformly from the cells' node sets, then one
/// route per coefficient is attempted with the same endpoints. Pairs with
/// an empty cell and unreachable routes are skipped. Pure in all arguments
/// including the seed.
pub fn generate_path_set(
    graph: &RoadGraph,
    grid: &Grid,
    sensors: &[SnappedSensor],
    coefficients: &[f64],
    repetitions: usize,
    seed: u64,
) -> Result<PathSet, PathGenError> {
    if coefficients.is_empty() {
        return Err(PathGenError::EmptyCoefficients);
    }
    for &c in coefficients {
        if !(c > 0.0 && c <= 1.0) {
            return Err(PathGenError::BadCoefficient(c));
        }
    }
    let nonempty: Vec<usize> = (0..grid.n_cells())
        .filter(|&c| !grid.cell_nodes(c).is_empty())
        .collect();
    if nonempty.is_empty() {
        return Err(PathGenError::EmptyGrid);
    }

    let mut tasks = Vec::with_capacity(nonempty.len() * nonempty.len() * repetitions);
    for &origin in &nonempty {
        for &dest in &nonempty {
            for rep in 0..repetitions {
                tasks.push((origin, dest, rep));
            }
        }
    }

    let chunks: Vec<Result<Vec<PathRecord>, PathGenError>> = tasks
        .par_iter()
        .map(|&(origin, dest, rep)| {
            let mut rng = ChaCha8Rng::seed_from_u64(task_seed(seed, origin, dest, rep));
            let origin_nodes = grid.cell_nodes(origin);
            let dest_nodes = grid.cell_nodes(dest);
            let src = origin_nodes[rng.random_range(0..origin_nodes.len())];
            let dst = dest_nodes[rng.random_range(0..dest_nodes.len())];
            let mut out = Vec::new();
            for &coeff in coefficients {
                if let Some(path) = astar_route_idx(graph, src, dst, coeff)? {
                    out.push(PathRecord {
                        origin_cell: origin,
                        dest_cell: dest,
                        repetition: rep,
                        coefficient: coeff,
                        nodes: path.nodes,
                    });
                }
            }
            Ok(out)
        })
        .collect();

    let mut records = Vec::new();
    for chunk in chunks {
        records.extend(chunk?);
    }
    records.sort_by(|a, b| {
        (a.origin_cell, a.dest_cell, a.repetition)
            .cmp(&(b.origin_cell, b.dest_cell, b.repetition))
            .then(a.coefficient.total_cmp(&b.coefficient))
    });
    Ok(PathSet::from_records(seed, records, sensors))
}
