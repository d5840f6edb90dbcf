//! Undirected network topologies.
//!
//! Processor ids are dense integers `0..n`. The named constructors cover the
//! shapes the laboratory cares about: chains, rings, and the degree-3 "Y"
//! gadget (a chain whose far end forks into two leaves). Arbitrary graphs can
//! be loaded from a small text format and are validated on the way in.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("invalid size {got} for {kind} (need at least {min})")]
    InvalidSize {
        kind: &'static str,
        got: usize,
        min: usize,
    },
    #[error("edge {0}-{1} references a processor outside 0..{2}")]
    NodeOutOfRange(usize, usize, usize),
    #[error("self-loop on processor {0}")]
    SelfLoop(usize),
    #[error("graph is not connected (processor {0} unreachable from 0)")]
    Disconnected(usize),
    #[error("graph file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown topology descriptor `{0}`")]
    UnknownDescriptor(String),
}

/// Immutable undirected connected graph with sorted adjacency lists.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Graph {
    adjacency: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an edge list. Duplicate edges are merged; self-loops,
    /// out-of-range ids and disconnected inputs are rejected.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, TopologyError> {
        if n == 0 {
            return Err(TopologyError::InvalidSize {
                kind: "graph",
                got: 0,
                min: 1,
            });
        }
        let mut sets = vec![BTreeSet::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(TopologyError::NodeOutOfRange(u, v, n));
            }
            if u == v {
                return Err(TopologyError::SelfLoop(u));
            }
            sets[u].insert(v);
            sets[v].insert(u);
        }
        let graph = Graph {
            adjacency: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        };
        if let Some(p) = graph.first_unreachable() {
            return Err(TopologyError::Disconnected(p));
        }
        Ok(graph)
    }

    /// Path `0 - 1 - ... - (n-1)`.
    pub fn chain(n: usize) -> Result<Self, TopologyError> {
        if n == 0 {
            return Err(TopologyError::InvalidSize {
                kind: "chain",
                got: n,
                min: 1,
            });
        }
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::from_edges(n, &edges)
    }

    /// Cycle `0 - 1 - ... - (n-1) - 0`.
    pub fn ring(n: usize) -> Result<Self, TopologyError> {
        if n < 3 {
            return Err(TopologyError::InvalidSize {
                kind: "ring",
                got: n,
                min: 3,
            });
        }
        let mut edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        edges.push((n - 1, 0));
        Self::from_edges(n, &edges)
    }

    /// Chain `0 .. r+1` whose last node `r+1` is also joined to two leaves,
    /// `q = r+2` and `q' = r+3`. Node `r+1` has degree 3 whenever `r >= 1`.
    pub fn y_network(r: usize) -> Self {
        let hub = r + 1;
        let mut edges: Vec<_> = (1..=hub).map(|i| (i - 1, i)).collect();
        edges.push((hub, r + 2));
        edges.push((hub, r + 3));
        Self::from_edges(r + 4, &edges).expect("y network is connected by construction")
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn neighbors(&self, p: usize) -> &[usize] {
        &self.adjacency[p]
    }

    pub fn degree(&self, p: usize) -> usize {
        self.adjacency[p].len()
    }

    pub fn are_neighbors(&self, p: usize, q: usize) -> bool {
        self.adjacency[p].binary_search(&q).is_ok()
    }

    /// Edges as `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(u, ns)| ns.iter().filter(move |&&v| u < v).map(move |&v| (u, v)))
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Hop distance by BFS; `None` when `q` is unreachable from `p`.
    pub fn distance(&self, p: usize, q: usize) -> Option<usize> {
        self.bfs(p)[q]
    }

    fn bfs(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.len()];
        let mut queue = VecDeque::from([source]);
        dist[source] = Some(0);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap_or(0);
            for &v in &self.adjacency[u] {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    fn first_unreachable(&self) -> Option<usize> {
        self.bfs(0).iter().position(Option::is_none)
    }

    /// Parses the graph file format: an `n=<count>` line followed by
    /// `edge u v` lines. Blank lines and `#` comments are ignored.
    pub fn parse_file_format(text: &str) -> Result<Self, TopologyError> {
        let mut n = None;
        let mut edges = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| TopologyError::Parse {
                line: line_no,
                msg: msg.to_string(),
            };
            if let Some(count) = line.strip_prefix("n=") {
                if n.is_some() {
                    return Err(err("duplicate n= line"));
                }
                n = Some(count.trim().parse::<usize>().map_err(|_| err("bad count"))?);
            } else if let Some(rest) = line.strip_prefix("edge") {
                let ids: Vec<_> = rest.split_whitespace().collect();
                if ids.len() != 2 {
                    return Err(err("expected `edge u v`"));
                }
                let u = ids[0].parse().map_err(|_| err("bad processor id"))?;
                let v = ids[1].parse().map_err(|_| err("bad processor id"))?;
                edges.push((u, v));
            } else {
                return Err(err("unrecognized line"));
            }
        }
        let n = n.ok_or(TopologyError::Parse {
            line: 0,
            msg: "missing n= line".into(),
        })?;
        Self::from_edges(n, &edges)
    }

    pub fn to_file_format(&self) -> String {
        let mut out = format!("n={}\n", self.len());
        for (u, v) in self.edges() {
            out.push_str(&format!("edge {u} {v}\n"));
        }
        out
    }
}

/// A graph together with the descriptor it was built from.
///
/// Descriptors are `chain:<n>`, `ring:<n>`, `y:<r>` and
/// `custom:<n>:<u>-<v>,<u>-<v>,...`; the last one is how arbitrary graphs are
/// embedded in trace headers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    kind: TopologyKind,
    graph: Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TopologyKind {
    Chain(usize),
    Ring(usize),
    Y(usize),
    Custom,
}

impl Topology {
    pub fn chain(n: usize) -> Result<Self, TopologyError> {
        Ok(Self {
            kind: TopologyKind::Chain(n),
            graph: Graph::chain(n)?,
        })
    }

    pub fn ring(n: usize) -> Result<Self, TopologyError> {
        Ok(Self {
            kind: TopologyKind::Ring(n),
            graph: Graph::ring(n)?,
        })
    }

    pub fn y_network(r: usize) -> Self {
        Self {
            kind: TopologyKind::Y(r),
            graph: Graph::y_network(r),
        }
    }

    pub fn custom(graph: Graph) -> Self {
        Self {
            kind: TopologyKind::Custom,
            graph,
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn len(&self) -> usize {
        self.graph.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.is_empty()
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TopologyKind::Chain(n) => write!(f, "chain:{n}"),
            TopologyKind::Ring(n) => write!(f, "ring:{n}"),
            TopologyKind::Y(r) => write!(f, "y:{r}"),
            TopologyKind::Custom => {
                let edges: Vec<_> = self.graph.edges().map(|(u, v)| format!("{u}-{v}")).collect();
                write!(f, "custom:{}:{}", self.graph.len(), edges.join(","))
            }
        }
    }
}

impl FromStr for Topology {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || TopologyError::UnknownDescriptor(s.to_string());
        let (kind, rest) = s.split_once(':').ok_or_else(unknown)?;
        match kind {
            "chain" => Topology::chain(rest.parse().map_err(|_| unknown())?),
            "ring" => Topology::ring(rest.parse().map_err(|_| unknown())?),
            "y" => Ok(Topology::y_network(rest.parse().map_err(|_| unknown())?)),
            "custom" => {
                let (n, list) = rest.split_once(':').unwrap_or((rest, ""));
                let n = n.parse().map_err(|_| unknown())?;
                let mut edges = Vec::new();
                for item in list.split(',').filter(|e| !e.is_empty()) {
                    let (u, v) = item.split_once('-').ok_or_else(unknown)?;
                    edges.push((
                        u.parse().map_err(|_| unknown())?,
                        v.parse().map_err(|_| unknown())?,
                    ));
                }
                Ok(Topology::custom(Graph::from_edges(n, &edges)?))
            }
            _ => Err(unknown()),
        }
    }
}
