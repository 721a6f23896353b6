//! Spawn-point graphs, A* shortest paths and pose sequences along them.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::scalar::Scalar;
use crate::scene::Pose;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("duplicate node id {0}")]
    DuplicateNode(u64),
    #[error("edge {edge} references unknown node {id}")]
    UnknownEndpoint { edge: usize, id: u64 },
    #[error("edge {edge} is a self-loop on node {id}")]
    SelfLoop { edge: usize, id: u64 },
    #[error("edge {edge} ({a}-{b}) has nonpositive weight {weight}")]
    NonPositiveWeight {
        edge: usize,
        a: u64,
        b: u64,
        weight: f64,
    },
    #[error("edge {edge} ({a}-{b}) weight {weight} is shorter than the straight-line distance {distance}")]
    WeightBelowDistance {
        edge: usize,
        a: u64,
        b: u64,
        weight: f64,
        distance: f64,
    },
    #[error("edge {edge} duplicates an earlier edge between {a} and {b}")]
    DuplicateEdge { edge: usize, a: u64, b: u64 },
    #[error("node {0} does not exist")]
    MissingNode(u64),
    #[error("node {end} is unreachable from node {start}")]
    Unreachable { start: u64, end: u64 },
    #[error("sampling step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("trajectory has no nodes")]
    EmptyTrajectory,
    #[error("unknown viewpoint `{0}` (expected driver, monitor or drone)")]
    UnknownViewpoint(String),
    #[error("graph file: {0}")]
    File(String),
}

/// On-disk graph: `{"nodes": [{"id", "x", "y", "z"}], "edges": [{"a", "b", "weight"?}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub a: u64,
    pub b: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

impl GraphFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| GraphError::File(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| GraphError::File(format!("{}: {e}", path.display())))
    }
}

/// Undirected spawn-point graph whose edge weights are at least the
/// straight-line distance between their endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseGraph<T> {
    ids: Vec<u64>,
    index: BTreeMap<u64, usize>,
    positions: Vec<Vec3<T>>,
    /// Neighbors sorted by node id.
    adjacency: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> CaseGraph<T> {
    /// Builds a graph; `edges` are `(a, b, weight)` with `None` meaning Euclidean length.
    pub fn new(
        nodes: impl IntoIterator<Item = (u64, Vec3<T>)>,
        edges: impl IntoIterator<Item = (u64, u64, Option<T>)>,
    ) -> Result<Self, GraphError> {
        let mut ids = Vec::new();
        let mut index = BTreeMap::new();
        let mut positions = Vec::new();
        for (id, p) in nodes {
            if index.insert(id, ids.len()).is_some() {
                return Err(GraphError::DuplicateNode(id));
            }
            ids.push(id);
            positions.push(p);
        }
        let mut adjacency: Vec<Vec<(usize, T)>> = vec![Vec::new(); ids.len()];
        for (edge, (a, b, weight)) in edges.into_iter().enumerate() {
            let ia = *index.get(&a).ok_or(GraphError::UnknownEndpoint { edge, id: a })?;
            let ib = *index.get(&b).ok_or(GraphError::UnknownEndpoint { edge, id: b })?;
            if ia == ib {
                return Err(GraphError::SelfLoop { edge, id: a });
            }
            if adjacency[ia].iter().any(|(n, _)| *n == ib) {
                return Err(GraphError::DuplicateEdge { edge, a, b });
            }
            let distance = (positions[ia] - positions[ib]).norm();
            let w = weight.unwrap_or(distance);
            if !(w > T::zero()) || !w.is_finite() {
                return Err(GraphError::NonPositiveWeight {
                    edge,
                    a,
                    b,
                    weight: w.to_f64_lossy(),
                });
            }
            if w < distance * (T::one() - T::lit(1e-12)) {
                return Err(GraphError::WeightBelowDistance {
                    edge,
                    a,
                    b,
                    weight: w.to_f64_lossy(),
                    distance: distance.to_f64_lossy(),
                });
            }
            adjacency[ia].push((ib, w));
            adjacency[ib].push((ia, w));
        }
        for list in &mut adjacency {
            list.sort_by_key(|(n, _)| ids[*n]);
        }
        Ok(CaseGraph {
            ids,
            index,
            positions,
            adjacency,
        })
    }

    pub fn from_file(file: &GraphFile) -> Result<Self, GraphError> {
        Self::new(
            file.nodes
                .iter()
                .map(|n| (n.id, Vec3::from_f64(n.x, n.y, n.z))),
            file.edges
                .iter()
                .map(|e| (e.a, e.b, e.weight.map(T::lit))),
        )
    }

    pub fn to_file(&self) -> GraphFile {
        let nodes = self
            .ids
            .iter()
            .zip(&self.positions)
            .map(|(&id, p)| NodeRecord {
                id,
                x: p.x.to_f64_lossy(),
                y: p.y.to_f64_lossy(),
                z: p.z.to_f64_lossy(),
            })
            .collect();
        let mut edges = Vec::new();
        for (i, list) in self.adjacency.iter().enumerate() {
            for &(j, w) in list {
                if i < j {
                    edges.push(EdgeRecord {
                        a: self.ids[i],
                        b: self.ids[j],
                        weight: Some(w.to_f64_lossy()),
                    });
                }
            }
        }
        GraphFile { nodes, edges }
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn position(&self, id: u64) -> Option<Vec3<T>> {
        self.index.get(&id).map(|&i| self.positions[i])
    }

    /// Neighbors of `id` as `(neighbor id, weight)`, ascending by id.
    pub fn neighbors(&self, id: u64) -> Option<Vec<(u64, T)>> {
        self.index.get(&id).map(|&i| {
            self.adjacency[i]
                .iter()
                .map(|&(j, w)| (self.ids[j], w))
                .collect()
        })
    }

    fn resolve(&self, id: u64) -> Result<usize, GraphError> {
        self.index.get(&id).copied().ok_or(GraphError::MissingNode(id))
    }
}

/// Path through the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct Trajectory<T> {
    pub nodes: Vec<u64>,
    pub points: Vec<Vec3<T>>,
    pub cost: T,
}

/// Search bookkeeping, for comparing against other searches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchStats {
    /// Expansion count per node id.
    pub expansions: BTreeMap<u64, u32>,
}

impl SearchStats {
    pub fn total(&self) -> u32 {
        self.expansions.values().sum()
    }
}

struct OpenEntry<T> {
    f: T,
    id: u64,
    node: usize,
    g: T,
}

impl<T: Scalar> PartialEq for OpenEntry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Scalar> Eq for OpenEntry<T> {}

impl<T: Scalar> PartialOrd for OpenEntry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Scalar> Ord for OpenEntry<T> {
    // Reversed: BinaryHeap is a max-heap and we pop the smallest (f, id).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .partial_cmp(&self.f)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.id.cmp(&self.id))
            .then_with(|| other.g.partial_cmp(&self.g).unwrap_or(Ordering::Equal))
    }
}

/// A* from `start` to `end`; see [`shortest_path_with_stats`].
pub fn shortest_path<T: Scalar>(
    graph: &CaseGraph<T>,
    start: u64,
    end: u64,
) -> Result<Trajectory<T>, GraphError> {
    shortest_path_with_stats(graph, start, end).map(|(t, _)| t)
}

/// A* with `f = g + h`, `h` the straight-line distance to `end`.
///
/// Improved children are re-pushed onto the open list and stale entries are
/// skipped when popped. The search stops when `end` is popped, then traces
/// parents back to `start`. Equal `f` values pop in ascending node id order.
pub fn shortest_path_with_stats<T: Scalar>(
    graph: &CaseGraph<T>,
    start: u64,
    end: u64,
) -> Result<(Trajectory<T>, SearchStats), GraphError> {
    let s = graph.resolve(start)?;
    let e = graph.resolve(end)?;
    let n = graph.node_count();
    let goal = graph.positions[e];
    let h = |i: usize| (graph.positions[i] - goal).norm();

    let mut best_g = vec![T::infinity(); n];
    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut closed = vec![false; n];
    let mut stats = SearchStats {
        expansions: BTreeMap::new(),
    };
    let mut open = BinaryHeap::new();
    best_g[s] = T::zero();
    open.push(OpenEntry {
        f: h(s),
        id: start,
        node: s,
        g: T::zero(),
    });

    let mut found = false;
    while let Some(current) = open.pop() {
        let u = current.node;
        if closed[u] || current.g > best_g[u] {
            continue;
        }
        if u == e {
            found = true;
            break;
        }
        closed[u] = true;
        *stats.expansions.entry(graph.ids[u]).or_insert(0) += 1;
        for &(v, w) in &graph.adjacency[u] {
            if closed[v] {
                continue;
            }
            let g = best_g[u] + w;
            if g < best_g[v] {
                best_g[v] = g;
                parent[v] = Some(u);
                open.push(OpenEntry {
                    f: g + h(v),
                    id: graph.ids[v],
                    node: v,
                    g,
                });
            }
        }
    }
    if !found {
        return Err(GraphError::Unreachable { start, end });
    }

    let mut order = vec![e];
    let mut cur = e;
    while let Some(p) = parent[cur] {
        order.push(p);
        cur = p;
    }
    order.reverse();
    debug_assert_eq!(order[0], s);
    Ok((
        Trajectory {
            nodes: order.iter().map(|&i| graph.ids[i]).collect(),
            points: order.iter().map(|&i| graph.positions[i]).collect(),
            cost: best_g[e],
        },
        stats,
    ))
}

/// Position along a trajectory and the unit tangent of the ground track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct TrajectorySample<T> {
    pub position: Vec3<T>,
    pub heading: [T; 2],
    /// Arc length from the start of the trajectory.
    pub arc_length: T,
}

fn heading_of<T: Scalar>(d: Vec3<T>) -> Option<[T; 2]> {
    let n = (d.x * d.x + d.y * d.y).sqrt();
    (n > T::zero()).then(|| [d.x / n, d.y / n])
}

/// Samples at arc lengths `0, step, 2·step, …` strictly below the total length,
/// then the final point. A sample exactly on a corner takes the outgoing
/// segment's heading. A trajectory of zero length yields one sample with
/// `default_heading`.
pub fn sample_trajectory<T: Scalar>(
    traj: &Trajectory<T>,
    step: T,
    default_heading: [T; 2],
) -> Result<Vec<TrajectorySample<T>>, GraphError> {
    if !(step > T::zero()) || !step.is_finite() {
        return Err(GraphError::NonPositiveStep(step.to_f64_lossy()));
    }
    let first = *traj.points.first().ok_or(GraphError::EmptyTrajectory)?;

    struct Segment<T> {
        start: Vec3<T>,
        delta: Vec3<T>,
        from: T,
        length: T,
        heading: [T; 2],
    }
    let mut segments: Vec<Segment<T>> = Vec::new();
    let mut arc = T::zero();
    let mut heading = default_heading;
    for pair in traj.points.windows(2) {
        let delta = pair[1] - pair[0];
        let length = delta.norm();
        if length == T::zero() {
            continue;
        }
        heading = heading_of(delta).unwrap_or(heading);
        segments.push(Segment {
            start: pair[0],
            delta,
            from: arc,
            length,
            heading,
        });
        arc += length;
    }
    let total = arc;
    let Some(last_segment) = segments.last() else {
        return Ok(vec![TrajectorySample {
            position: first,
            heading: default_heading,
            arc_length: T::zero(),
        }]);
    };
    let end = *traj.points.last().expect("nonempty");
    let end_heading = last_segment.heading;

    let mut out = Vec::new();
    let limit = total - total * T::lit(1e-12);
    let mut seg = 0;
    for k in 0.. {
        let s = T::from_usize_lossy(k) * step;
        if s >= limit {
            break;
        }
        while seg + 1 < segments.len() && segments[seg + 1].from <= s {
            seg += 1;
        }
        let sg = &segments[seg];
        let t = ((s - sg.from) / sg.length).min(T::one());
        out.push(TrajectorySample {
            position: sg.start + sg.delta * t,
            heading: sg.heading,
            arc_length: s,
        });
    }
    out.push(TrajectorySample {
        position: end,
        heading: end_heading,
        arc_length: total,
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Viewpoint {
    Driver,
    Monitor,
    Drone,
}

impl Viewpoint {
    pub fn as_str(&self) -> &'static str {
        match self {
            Viewpoint::Driver => "driver",
            Viewpoint::Monitor => "monitor",
            Viewpoint::Drone => "drone",
        }
    }
}

impl FromStr for Viewpoint {
    type Err = GraphError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "driver" => Ok(Viewpoint::Driver),
            "monitor" => Ok(Viewpoint::Monitor),
            "drone" => Ok(Viewpoint::Drone),
            _ => Err(GraphError::UnknownViewpoint(s.to_string())),
        }
    }
}

/// Where the observed vehicle stands when the camera is the one moving.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct VehiclePlacement<T> {
    pub position: Vec3<T>,
    pub yaw: T,
}

/// Camera rig settings. These are configuration, not measured values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct RigConfig<T> {
    pub eye_height: T,
    pub drone_altitude: T,
    pub fov: T,
    /// Fixed camera position of the monitor rig.
    pub monitor_anchor: Vec3<T>,
    /// Observed vehicle for the driver rig.
    pub target: VehiclePlacement<T>,
}

impl<T: Scalar> Default for RigConfig<T> {
    fn default() -> Self {
        RigConfig {
            eye_height: T::lit(1.2),
            drone_altitude: T::lit(30.0),
            fov: T::lit(1.0),
            monitor_anchor: Vec3::from_f64(0.0, 0.0, 6.0),
            target: VehiclePlacement {
                position: Vec3::zero(),
                yaw: T::zero(),
            },
        }
    }
}

fn yaw_of<T: Scalar>(h: [T; 2]) -> T {
    h[1].atan2(h[0])
}

/// Camera poses for each sample under the named rig.
///
/// * `driver`: camera at the sample raised by `eye_height`, looking along the
///   heading with `+z` up; the vehicle is `rig.target`.
/// * `monitor`: camera fixed at `monitor_anchor`, looking at the sample; the
///   vehicle stands at the sample facing the heading.
/// * `drone`: camera `drone_altitude` above the sample looking straight down,
///   image up along the heading; the vehicle stands at the sample.
pub fn poses_from_samples<T: Scalar>(
    samples: &[TrajectorySample<T>],
    viewpoint: &str,
    rig: &RigConfig<T>,
) -> Result<Vec<Pose<T>>, GraphError> {
    let vp: Viewpoint = viewpoint.parse()?;
    let z_up = Vec3::new(T::zero(), T::zero(), T::one());
    Ok(samples
        .iter()
        .map(|s| {
            let flat = Vec3::new(s.heading[0], s.heading[1], T::zero());
            match vp {
                Viewpoint::Driver => Pose {
                    model_angle: rig.target.yaw,
                    model_position: rig.target.position,
                    camera_position: s.position + z_up * rig.eye_height,
                    camera_direction: flat,
                    camera_up: z_up,
                    fov: rig.fov,
                },
                Viewpoint::Monitor => {
                    let dir = (s.position - rig.monitor_anchor)
                        .normalized()
                        .unwrap_or(-z_up);
                    let up = if dir.dot(z_up).abs() >= T::one() - T::lit(1e-6) {
                        flat
                    } else {
                        z_up
                    };
                    Pose {
                        model_angle: yaw_of(s.heading),
                        model_position: s.position,
                        camera_position: rig.monitor_anchor,
                        camera_direction: dir,
                        camera_up: up,
                        fov: rig.fov,
                    }
                }
                Viewpoint::Drone => Pose {
                    model_angle: yaw_of(s.heading),
                    model_position: s.position,
                    camera_position: s.position + z_up * rig.drone_altitude,
                    camera_direction: -z_up,
                    camera_up: flat,
                    fov: rig.fov,
                },
            }
        })
        .collect())
}
