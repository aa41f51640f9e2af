//! Road-network ingestion and sensor snapping.
//!
//! The canonical interchange format is a pair of CSV files (nodes, edges);
//! OSM XML import is a converter that produces the same in-memory graph.
//! Distances are directed: an edge is one direction of travel, and a
//! two-way street is two edges.

use std::collections::{BinaryHeap, HashMap, HashSet};
use std::io::BufRead;

use thiserror::Error;

/// Mean Earth radius in miles; all pipeline units are miles/mph.
pub const EARTH_RADIUS_MILES: f64 = 3958.8;

/// Miles per degree of latitude (and of longitude at the equator).
pub const MILES_PER_DEGREE: f64 = EARTH_RADIUS_MILES * std::f64::consts::PI / 180.0;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("line {line}: edge {edge_id} references missing node {node_id}")]
    DanglingEndpoint {
        line: usize,
        edge_id: String,
        node_id: String,
    },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("xml error at byte {pos}: {msg}")]
    Xml { pos: u64, msg: String },
    #[error("way {way_id} references undeclared node {node_id}")]
    UndeclaredWayNode { way_id: String, node_id: String },
    #[error("no ways left after highway filtering")]
    EmptyOsmResult,
    #[error("unknown node id {0}")]
    UnknownNode(String),
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("sensor {0} has non-finite coordinates")]
    BadSensorCoordinates(String),
}

fn format_err(line: usize, msg: impl Into<String>) -> GeoError {
    GeoError::Format {
        line,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadNode {
    pub node_id: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadEdge {
    pub edge_id: String,
    /// Index into `RoadGraph::nodes`.
    pub from: usize,
    pub to: usize,
    pub length_miles: f64,
    pub is_freeway: bool,
}

/// Directed road network with an out-adjacency index.
///
/// Immutable after construction; distance queries are reentrant.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadGraph {
    nodes: Vec<RoadNode>,
    edges: Vec<RoadEdge>,
    node_index: HashMap<String, usize>,
    out_edges: Vec<Vec<usize>>,
    /// Rank of each node when node ids are sorted lexicographically; used
    /// for deterministic tie-breaking in searches and snapping.
    id_rank: Vec<usize>,
}

impl RoadGraph {
    /// Builds a graph from parts, validating ids, endpoints and lengths.
    /// Edge endpoints are given as node ids; `line_of` maps an edge index
    /// back to a source line for error messages (identity when not parsing).
    pub fn from_parts(
        nodes: Vec<RoadNode>,
        edges: Vec<(String, String, String, f64, bool)>,
        line_of: impl Fn(usize) -> usize,
    ) -> Result<Self, GeoError> {
        let mut node_index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if !n.lat.is_finite() || !n.lon.is_finite() {
                return Err(GeoError::BadSensorCoordinates(n.node_id.clone()));
            }
            if node_index.insert(n.node_id.clone(), i).is_some() {
                return Err(GeoError::DuplicateId(n.node_id.clone()));
            }
        }
        let mut built = Vec::with_capacity(edges.len());
        let mut edge_ids = HashSet::with_capacity(edges.len());
        let mut out_edges = vec![Vec::new(); nodes.len()];
        for (i, (edge_id, from_id, to_id, length_miles, is_freeway)) in
            edges.into_iter().enumerate()
        {
            if !edge_ids.insert(edge_id.clone()) {
                return Err(GeoError::DuplicateId(edge_id));
            }
            if !(length_miles.is_finite() && length_miles > 0.0) {
                return Err(format_err(
                    line_of(i),
                    format!("edge {edge_id}: non-positive length {length_miles}"),
                ));
            }
            let lookup = |node_id: &str| {
                node_index
                    .get(node_id)
                    .copied()
                    .ok_or_else(|| GeoError::DanglingEndpoint {
                        line: line_of(i),
                        edge_id: edge_id.clone(),
                        node_id: node_id.to_string(),
                    })
            };
            let from = lookup(&from_id)?;
            let to = lookup(&to_id)?;
            out_edges[from].push(built.len());
            built.push(RoadEdge {
                edge_id,
                from,
                to,
                length_miles,
                is_freeway,
            });
        }
        let mut order: Vec<usize> = (0..nodes.len()).collect();
        order.sort_by(|&a, &b| nodes[a].node_id.cmp(&nodes[b].node_id));
        let mut id_rank = vec![0; nodes.len()];
        for (rank, idx) in order.into_iter().enumerate() {
            id_rank[idx] = rank;
        }
        Ok(Self {
            nodes,
            edges: built,
            node_index,
            out_edges,
            id_rank,
        })
    }

    pub fn nodes(&self) -> &[RoadNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[RoadEdge] {
        &self.edges
    }

    pub fn node_idx(&self, node_id: &str) -> Option<usize> {
        self.node_index.get(node_id).copied()
    }

    pub fn node(&self, idx: usize) -> &RoadNode {
        &self.nodes[idx]
    }

    pub fn out_edges(&self, node: usize) -> &[usize] {
        &self.out_edges[node]
    }

    /// Lexicographic rank of a node's id among all node ids.
    pub fn id_rank(&self, node: usize) -> usize {
        self.id_rank[node]
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sensor {
    pub sensor_id: String,
    pub lat: f64,
    pub lon: f64,
}

/// A sensor matched to its nearest graph node.
#[derive(Debug, Clone, PartialEq)]
pub struct SnappedSensor {
    pub sensor: Sensor,
    /// Index of the snapped node in the graph.
    pub node: usize,
    pub snap_distance_miles: f64,
}

/// Great-circle distance in miles.
pub fn haversine_miles(lat_a: f64, lon_a: f64, lat_b: f64, lon_b: f64) -> f64 {
    let phi_a = lat_a.to_radians();
    let phi_b = lat_b.to_radians();
    let d_phi = (lat_b - lat_a).to_radians();
    let d_lambda = (lon_b - lon_a).to_radians();
    let s = (d_phi / 2.0).sin().powi(2) + phi_a.cos() * phi_b.cos() * (d_lambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_MILES * s.sqrt().min(1.0).asin()
}

fn split_header(line: &str) -> Vec<&str> {
    line.trim_end_matches(['\r', '\n']).split(',').collect()
}

fn expect_header(got: &str, want: &str) -> Result<(), GeoError> {
    if split_header(got) != split_header(want) {
        return Err(format_err(1, format!("expected header `{want}`, got `{got}`")));
    }
    Ok(())
}

fn parse_f64(field: &str, line: usize, what: &str) -> Result<f64, GeoError> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| format_err(line, format!("invalid {what}: `{field}`")))
}

/// Parses the canonical node/edge CSV pair into a validated graph.
///
/// Headers: `node_id,lat,lon` and
/// `edge_id,from_node,to_node,length_miles,is_freeway`.
pub fn parse_edge_csv(nodes_file: impl BufRead, edges_file: impl BufRead) -> Result<RoadGraph, GeoError> {
    let mut nodes = Vec::new();
    let mut lines = nodes_file.lines();
    let header = lines.next().ok_or_else(|| format_err(1, "empty nodes file"))??;
    expect_header(&header, "node_id,lat,lon")?;
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(format_err(lineno, format!("expected 3 fields, got {}", fields.len())));
        }
        let lat = parse_f64(fields[1], lineno, "latitude")?;
        let lon = parse_f64(fields[2], lineno, "longitude")?;
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(format_err(lineno, format!("coordinates out of range: {lat},{lon}")));
        }
        nodes.push(RoadNode {
            node_id: fields[0].to_string(),
            lat,
            lon,
        });
    }

    let mut edges = Vec::new();
    let mut edge_lines = Vec::new();
    let mut lines = edges_file.lines();
    let header = lines.next().ok_or_else(|| format_err(1, "empty edges file"))??;
    expect_header(&header, "edge_id,from_node,to_node,length_miles,is_freeway")?;
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(format_err(lineno, format!("expected 5 fields, got {}", fields.len())));
        }
        let length = parse_f64(fields[3], lineno, "length_miles")?;
        let is_freeway = match fields[4].trim() {
            "0" => false,
            "1" => true,
            other => return Err(format_err(lineno, format!("is_freeway must be 0 or 1, got `{other}`"))),
        };
        edges.push((
            fields[0].to_string(),
            fields[1].to_string(),
            fields[2].to_string(),
            length,
            is_freeway,
        ));
        edge_lines.push(lineno);
    }
    RoadGraph::from_parts(nodes, edges, |i| edge_lines[i])
}

/// Writes the canonical CSV pair; `parse_edge_csv` of the output reproduces
/// the graph exactly (floats use shortest round-trip decimals).
pub fn write_edge_csv(
    graph: &RoadGraph,
    nodes_out: &mut impl std::io::Write,
    edges_out: &mut impl std::io::Write,
) -> Result<(), GeoError> {
    writeln!(nodes_out, "node_id,lat,lon")?;
    for n in &graph.nodes {
        writeln!(nodes_out, "{},{},{}", n.node_id, n.lat, n.lon)?;
    }
    writeln!(edges_out, "edge_id,from_node,to_node,length_miles,is_freeway")?;
    for e in &graph.edges {
        writeln!(
            edges_out,
            "{},{},{},{},{}",
            e.edge_id,
            graph.nodes[e.from].node_id,
            graph.nodes[e.to].node_id,
            e.length_miles,
            if e.is_freeway { 1 } else { 0 }
        )?;
    }
    Ok(())
}

/// Parses `sensor_id,lat,lon` rows.
pub fn parse_sensor_csv(file: impl BufRead) -> Result<Vec<Sensor>, GeoError> {
    let mut lines = file.lines();
    let header = lines.next().ok_or_else(|| format_err(1, "empty sensors file"))??;
    expect_header(&header, "sensor_id,lat,lon")?;
    let mut sensors = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(format_err(lineno, format!("expected 3 fields, got {}", fields.len())));
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(GeoError::DuplicateId(fields[0].to_string()));
        }
        sensors.push(Sensor {
            sensor_id: fields[0].to_string(),
            lat: parse_f64(fields[1], lineno, "latitude")?,
            lon: parse_f64(fields[2], lineno, "longitude")?,
        });
    }
    Ok(sensors)
}

/// Freeway classes: edges from these highway tags get the freeway cost
/// coefficient during path generation.
pub const FREEWAY_HIGHWAY_TAGS: [&str; 2] = ["motorway", "motorway_link"];

/// Imports an OSM XML extract. Ways whose `highway` tag is in the filter
/// become chains of directed edges between consecutive node refs;
/// `oneway=yes` suppresses the reverse direction. Nodes not referenced by
/// any retained way are dropped.
pub fn parse_osm_xml(
    osm_file: impl BufRead,
    highway_filter: &HashSet<String>,
) -> Result<RoadGraph, GeoError> {
    use quick_xml::events::Event;

    let mut reader = quick_xml::Reader::from_reader(osm_file);
    let mut buf = Vec::new();

    struct OsmWay {
        id: String,
        refs: Vec<String>,
        highway: Option<String>,
        oneway_yes: bool,
    }

    let mut coords: HashMap<String, (f64, f64)> = HashMap::new();
    let mut ways: Vec<OsmWay> = Vec::new();
    let mut current: Option<OsmWay> = None;

    let attr_map = |e: &quick_xml::events::BytesStart| -> Result<HashMap<String, String>, GeoError> {
        let mut map = HashMap::new();
        for attr in e.attributes() {
            let attr = attr.map_err(|err| GeoError::Xml {
                pos: 0,
                msg: err.to_string(),
            })?;
            let key = String::from_utf8_lossy(attr.key.as_ref()).into_owned();
            let value = String::from_utf8_lossy(&attr.value).into_owned();
            map.insert(key, value);
        }
        Ok(map)
    };

    loop {
        let event = reader.read_event_into(&mut buf).map_err(|err| GeoError::Xml {
            pos: reader.buffer_position(),
            msg: err.to_string(),
        })?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let is_empty = matches!(event, Event::Empty(_));
                match e.name().as_ref() {
                    b"node" => {
                        let attrs = attr_map(e)?;
                        let (Some(id), Some(lat), Some(lon)) =
                            (attrs.get("id"), attrs.get("lat"), attrs.get("lon"))
                        else {
                            return Err(GeoError::Xml {
                                pos: reader.buffer_position(),
                                msg: "node element missing id/lat/lon".into(),
                            });
                        };
                        let lat = parse_f64(lat, 0, "latitude")?;
                        let lon = parse_f64(lon, 0, "longitude")?;
                        coords.insert(id.clone(), (lat, lon));
                    }
                    b"way" => {
                        let attrs = attr_map(e)?;
                        let id = attrs.get("id").cloned().unwrap_or_default();
                        let way = OsmWay {
                            id,
                            refs: Vec::new(),
                            highway: None,
                            oneway_yes: false,
                        };
                        if is_empty {
                            ways.push(way);
                        } else {
                            current = Some(way);
                        }
                    }
                    b"nd" => {
                        if let Some(way) = current.as_mut() {
                            let attrs = attr_map(e)?;
                            if let Some(r) = attrs.get("ref") {
                                way.refs.push(r.clone());
                            }
                        }
                    }
                    b"tag" => {
                        if let Some(way) = current.as_mut() {
                            let attrs = attr_map(e)?;
                            match (attrs.get("k").map(String::as_str), attrs.get("v")) {
                                (Some("highway"), Some(v)) => way.highway = Some(v.clone()),
                                (Some("oneway"), Some(v)) => way.oneway_yes = v == "yes",
                                _ => {}
                            }
                        }
                    }
                    _ => {}
                }
            }
            Event::End(ref e) => {
                if e.name().as_ref() == b"way" {
                    if let Some(way) = current.take() {
                        ways.push(way);
                    }
                }
            }
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }

    let retained: Vec<&OsmWay> = ways
        .iter()
        .filter(|w| w.highway.as_deref().is_some_and(|h| highway_filter.contains(h)))
        .collect();
    if retained.is_empty() {
        return Err(GeoError::EmptyOsmResult);
    }

    // Keep only referenced nodes, in first-reference order.
    let mut nodes = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    for way in &retained {
        for r in &way.refs {
            if seen.insert(r) {
                let (lat, lon) = coords.get(r).copied().ok_or_else(|| GeoError::UndeclaredWayNode {
                    way_id: way.id.clone(),
                    node_id: r.clone(),
                })?;
                nodes.push(RoadNode {
                    node_id: r.clone(),
                    lat,
                    lon,
                });
            }
        }
    }

    let mut edges = Vec::new();
    for way in &retained {
        let is_freeway = way
            .highway
            .as_deref()
            .is_some_and(|h| FREEWAY_HIGHWAY_TAGS.contains(&h));
        for (seg, pair) in way.refs.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            let (lat_a, lon_a) = coords[a];
            let (lat_b, lon_b) = coords[b];
            let length = haversine_miles(lat_a, lon_a, lat_b, lon_b);
            if length <= 0.0 {
                // Duplicate consecutive refs happen in real extracts; skip
                // zero-length segments rather than failing the import.
                continue;
            }
            edges.push((
                format!("w{}.{}", way.id, seg),
                a.clone(),
                b.clone(),
                length,
                is_freeway,
            ));
            if !way.oneway_yes {
                edges.push((
                    format!("w{}.{}.r", way.id, seg),
                    b.clone(),
                    a.clone(),
                    length,
                    is_freeway,
                ));
            }
        }
    }
    RoadGraph::from_parts(nodes, edges, |_| 0)
}

/// Snaps each sensor to the graph node minimizing haversine distance, ties
/// broken by lexicographically smallest node id.
pub fn snap_sensors(graph: &RoadGraph, sensors: &[Sensor]) -> Result<Vec<SnappedSensor>, GeoError> {
    if graph.is_empty() {
        return Err(GeoError::EmptyGraph);
    }
    sensors
        .iter()
        .map(|s| {
            if !s.lat.is_finite() || !s.lon.is_finite() {
                return Err(GeoError::BadSensorCoordinates(s.sensor_id.clone()));
            }
            let mut best: Option<(f64, usize)> = None;
            for (i, n) in graph.nodes.iter().enumerate() {
                let d = haversine_miles(s.lat, s.lon, n.lat, n.lon);
                let better = match best {
                    None => true,
                    Some((bd, bi)) => {
                        d < bd || (d == bd && graph.id_rank[i] < graph.id_rank[bi])
                    }
                };
                if better {
                    best = Some((d, i));
                }
            }
            let (snap_distance_miles, node) = best.expect("non-empty graph");
            Ok(SnappedSensor {
                sensor: s.clone(),
                node,
                snap_distance_miles,
            })
        })
        .collect()
}

#[derive(Copy, Clone, PartialEq)]
struct HeapEntry {
    cost: f64,
    rank: usize,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Min-heap via BinaryHeap: invert. Ties broken by node-id rank so
        // expansion order never depends on insertion order.
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.rank.cmp(&self.rank))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source directed shortest distances (Dijkstra). Unreached nodes
/// hold `f64::INFINITY`. `cutoff` stops expanding nodes beyond that
/// distance; entries below the cutoff are still exact.
pub fn shortest_distances_from(graph: &RoadGraph, src: usize, cutoff: Option<f64>) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; graph.nodes.len()];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(HeapEntry {
        cost: 0.0,
        rank: graph.id_rank[src],
        node: src,
    });
    while let Some(HeapEntry { cost, node, .. }) = heap.pop() {
        if cost > dist[node] {
            continue;
        }
        if let Some(c) = cutoff {
            if cost > c {
                continue;
            }
        }
        for &ei in &graph.out_edges[node] {
            let e = &graph.edges[ei];
            let next = cost + e.length_miles;
            if next < dist[e.to] {
                dist[e.to] = next;
                heap.push(HeapEntry {
                    cost: next,
                    rank: graph.id_rank[e.to],
                    node: e.to,
                });
            }
        }
    }
    dist
}

/// Directed shortest-path length between two nodes; `None` when the
/// destination is unreachable.
pub fn road_distance_miles(
    graph: &RoadGraph,
    src_node: &str,
    dst_node: &str,
) -> Result<Option<f64>, GeoError> {
    let src = graph
        .node_idx(src_node)
        .ok_or_else(|| GeoError::UnknownNode(src_node.to_string()))?;
    let dst = graph
        .node_idx(dst_node)
        .ok_or_else(|| GeoError::UnknownNode(dst_node.to_string()))?;
    let d = shortest_distances_from(graph, src, None)[dst];
    Ok(if d.is_finite() { Some(d) } else { None })
}
