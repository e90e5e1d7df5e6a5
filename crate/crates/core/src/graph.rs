//! Communication topologies and their Metropolis–Hastings mixing matrices.
//!
//! A [`Topology`] is an undirected, connected, simple graph stored as sorted
//! neighbor lists. A [`MixingMatrix`] is a dense row-major `V × V` doubly
//! stochastic matrix. Row `i` doubles as the next-node distribution of a
//! random walk sitting at `i` and as node `i`'s averaging weights in gossip.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on row/column sums for a matrix to count as doubly stochastic.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Whole-graph resampling budget for Erdős–Rényi draws.
pub const ER_MAX_ATTEMPTS: u32 = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{kind} topology does not support V = {nodes}: {reason}")]
    InvalidNodeCount {
        kind: TopologyKind,
        nodes: usize,
        reason: &'static str,
    },
    #[error("edge probability {0} outside (0, 1]")]
    InvalidEdgeProbability(f64),
    #[error("edge probability is required for erdos_renyi and only allowed there")]
    EdgeProbabilityMismatch,
    #[error("erdos_renyi graph with seed {seed} still disconnected after {attempts} attempts")]
    NotConnected { seed: u64, attempts: u32 },
    #[error("neighbor lists are not a valid simple undirected graph: {0}")]
    InvalidAdjacency(String),
    #[error("matrix entry ({row}, {col}) = {value} is not a probability")]
    InvalidEntry { row: usize, col: usize, value: f64 },
    #[error("matrix is not doubly stochastic: max |sum - 1| = {deviation:e}")]
    NotDoublyStochastic { deviation: f64 },
    #[error("matrix has {got} entries, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Cycle,
    Complete,
    Torus2d,
    ErdosRenyi,
}

impl TopologyKind {
    pub const ALL: [TopologyKind; 4] = [
        TopologyKind::Cycle,
        TopologyKind::Complete,
        TopologyKind::Torus2d,
        TopologyKind::ErdosRenyi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TopologyKind::Cycle => "cycle",
            TopologyKind::Complete => "complete",
            TopologyKind::Torus2d => "torus2d",
            TopologyKind::ErdosRenyi => "erdos_renyi",
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TopologyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopologyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown topology kind `{s}`"))
    }
}

/// Undirected connected graph on nodes `0..V`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    kind: TopologyKind,
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    /// Wraps explicit neighbor lists after checking symmetry, simplicity and
    /// connectivity. Lists are sorted on the way in.
    pub fn from_neighbors(
        kind: TopologyKind,
        mut neighbors: Vec<Vec<usize>>,
    ) -> Result<Self, GraphError> {
        let n = neighbors.len();
        if n == 0 {
            return Err(GraphError::InvalidAdjacency("empty graph".into()));
        }
        for list in neighbors.iter_mut() {
            list.sort_unstable();
        }
        for (i, list) in neighbors.iter().enumerate() {
            for w in list.windows(2) {
                if w[0] == w[1] {
                    return Err(GraphError::InvalidAdjacency(format!(
                        "duplicate edge {i}-{}",
                        w[0]
                    )));
                }
            }
            for &j in list {
                if j >= n {
                    return Err(GraphError::InvalidAdjacency(format!(
                        "node {i} lists out-of-range neighbor {j}"
                    )));
                }
                if j == i {
                    return Err(GraphError::InvalidAdjacency(format!("self-edge at {i}")));
                }
                if neighbors[j].binary_search(&i).is_err() {
                    return Err(GraphError::InvalidAdjacency(format!(
                        "edge {i}-{j} is not symmetric"
                    )));
                }
            }
        }
        let topo = Topology { kind, neighbors };
        if !topo.is_connected() {
            return Err(GraphError::InvalidAdjacency("graph is disconnected".into()));
        }
        Ok(topo)
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Breadth-first reachability from node 0.
    pub fn is_connected(&self) -> bool {
        bfs_reaches_all(&self.neighbors)
    }
}

fn bfs_reaches_all(adj: &[Vec<usize>]) -> bool {
    let n = adj.len();
    if n == 0 {
        return false;
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = queue.pop_front() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                count += 1;
                queue.push_back(j);
            }
        }
    }
    count == n
}

/// Builds one of the supported topologies.
///
/// `edge_probability` must be given exactly when `kind` is
/// [`TopologyKind::ErdosRenyi`]; `seed` is only consumed by that kind.
/// Disconnected Erdős–Rényi draws are discarded and the whole graph is
/// redrawn, up to [`ER_MAX_ATTEMPTS`] times.
pub fn build_topology(
    kind: TopologyKind,
    nodes: usize,
    edge_probability: Option<f64>,
    seed: u64,
) -> Result<Topology, GraphError> {
    if edge_probability.is_some() != (kind == TopologyKind::ErdosRenyi) {
        return Err(GraphError::EdgeProbabilityMismatch);
    }
    let invalid = |reason| GraphError::InvalidNodeCount {
        kind,
        nodes,
        reason,
    };
    let neighbors = match kind {
        TopologyKind::Cycle => {
            if nodes < 3 {
                return Err(invalid("a simple cycle needs at least 3 nodes"));
            }
            (0..nodes)
                .map(|i| vec![(i + nodes - 1) % nodes, (i + 1) % nodes])
                .collect()
        }
        TopologyKind::Complete => {
            if nodes < 2 {
                return Err(invalid("needs at least 2 nodes"));
            }
            (0..nodes)
                .map(|i| (0..nodes).filter(|&j| j != i).collect())
                .collect()
        }
        TopologyKind::Torus2d => {
            let side = integer_sqrt(nodes);
            if side < 2 || side * side != nodes {
                return Err(invalid("needs V = k^2 with k >= 2"));
            }
            (0..nodes)
                .map(|i| {
                    let (r, c) = (i / side, i % side);
                    let mut list = vec![
                        ((r + side - 1) % side) * side + c,
                        ((r + 1) % side) * side + c,
                        r * side + (c + side - 1) % side,
                        r * side + (c + 1) % side,
                    ];
                    // k = 2 folds opposite neighbors onto each other
                    list.sort_unstable();
                    list.dedup();
                    list
                })
                .collect()
        }
        TopologyKind::ErdosRenyi => {
            let prob = edge_probability.expect("checked above");
            if !(prob > 0.0 && prob <= 1.0) {
                return Err(GraphError::InvalidEdgeProbability(prob));
            }
            if nodes < 2 {
                return Err(invalid("needs at least 2 nodes"));
            }
            return erdos_renyi(nodes, prob, seed);
        }
    };
    Topology::from_neighbors(kind, neighbors)
}

fn erdos_renyi(nodes: usize, prob: f64, seed: u64) -> Result<Topology, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..ER_MAX_ATTEMPTS {
        let mut adj = vec![Vec::new(); nodes];
        for i in 0..nodes {
            for j in (i + 1)..nodes {
                if rng.random::<f64>() < prob {
                    adj[i].push(j);
                    adj[j].push(i);
                }
            }
        }
        if bfs_reaches_all(&adj) {
            return Topology::from_neighbors(TopologyKind::ErdosRenyi, adj);
        }
    }
    Err(GraphError::NotConnected {
        seed,
        attempts: ER_MAX_ATTEMPTS,
    })
}

fn integer_sqrt(n: usize) -> usize {
    let mut k = (n as f64).sqrt() as usize;
    while k * k > n {
        k -= 1;
    }
    while (k + 1) * (k + 1) <= n {
        k += 1;
    }
    k
}

/// Dense row-major `V × V` doubly stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    size: usize,
    entries: Vec<f64>,
}

impl MixingMatrix {
    /// Validates entries in `[0, 1]` and row/column sums within
    /// [`STOCHASTIC_TOL`].
    pub fn from_row_major(size: usize, entries: Vec<f64>) -> Result<Self, GraphError> {
        if entries.len() != size * size || size == 0 {
            return Err(GraphError::ShapeMismatch {
                expected: size * size,
                got: entries.len(),
            });
        }
        for (k, &value) in entries.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(GraphError::InvalidEntry {
                    row: k / size,
                    col: k % size,
                    value,
                });
            }
        }
        let m = MixingMatrix { size, entries };
        let deviation = m.stochastic_deviation();
        if deviation > STOCHASTIC_TOL {
            return Err(GraphError::NotDoublyStochastic { deviation });
        }
        Ok(m)
    }

    pub fn identity(size: usize) -> Self {
        let mut entries = vec![0.0; size * size];
        for i in 0..size {
            entries[i * size + i] = 1.0;
        }
        MixingMatrix { size, entries }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.size..(i + 1) * self.size]
    }

    pub fn as_row_major(&self) -> &[f64] {
        &self.entries
    }

    /// Largest `|row sum - 1|` or `|column sum - 1|`.
    pub fn stochastic_deviation(&self) -> f64 {
        let n = self.size;
        let mut worst = 0.0f64;
        for i in 0..n {
            let row: f64 = self.row(i).iter().sum();
            let col: f64 = (0..n).map(|r| self.get(r, i)).sum();
            worst = worst.max((row - 1.0).abs()).max((col - 1.0).abs());
        }
        worst
    }

    /// Bitwise symmetry.
    pub fn is_symmetric(&self) -> bool {
        let n = self.size;
        (0..n).all(|i| (0..i).all(|j| self.get(i, j).to_bits() == self.get(j, i).to_bits()))
    }

    /// True when every off-diagonal nonzero is an edge of `topology`.
    pub fn support_within(&self, topology: &Topology) -> bool {
        let n = self.size;
        n == topology.node_count()
            && (0..n).all(|i| {
                (0..n).all(|j| i == j || self.get(i, j) == 0.0 || topology.has_edge(i, j))
            })
    }

    /// Nonzero `(column, weight)` pairs of row `i`, in column order.
    pub fn row_support(&self, i: usize) -> Vec<(usize, f64)> {
        self.row(i)
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(j, &w)| (j, w))
            .collect()
    }

    /// `PᵀP`, used for the spectral gap `p`.
    pub fn gram(&self) -> Vec<f64> {
        let n = self.size;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let s: f64 = (0..n).map(|k| self.get(k, i) * self.get(k, j)).sum();
                out[i * n + j] = s;
                out[j * n + i] = s;
            }
        }
        out
    }

    /// Irreducibility check: every state reachable from every other state
    /// through positive entries.
    pub fn is_irreducible(&self) -> bool {
        let n = self.size;
        let forward: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && self.get(i, j) > 0.0).collect())
            .collect();
        let backward: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && self.get(j, i) > 0.0).collect())
            .collect();
        n == 1 || (bfs_reaches_all(&forward) && bfs_reaches_all(&backward))
    }
}

/// The Metropolis–Hastings matrix of `topology`:
/// `p_ij = min{1/(deg i + 1), 1/(deg j + 1)}` on edges, leftover mass on the
/// diagonal.
pub fn metropolis_hastings(topology: &Topology) -> MixingMatrix {
    let n = topology.node_count();
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        let di = topology.degree(i) as f64;
        for &j in topology.neighbors(i) {
            let dj = topology.degree(j) as f64;
            entries[i * n + j] = (1.0 / (di + 1.0)).min(1.0 / (dj + 1.0));
        }
    }
    for i in 0..n {
        let off: f64 = topology.neighbors(i).iter().map(|&j| entries[i * n + j]).sum();
        entries[i * n + i] = 1.0 - off;
    }
    MixingMatrix { size: n, entries }
}

/// Number of strictly positive off-diagonal entries (models sent per gossip
/// round; self-loops cost nothing).
pub fn offdiag_nnz(p: &MixingMatrix) -> u64 {
    let n = p.size();
    let mut count = 0;
    for i in 0..n {
        for j in 0..n {
            if i != j && p.get(i, j) > 0.0 {
                count += 1;
            }
        }
    }
    count
}

/// Inverse-CDF sampler over the rows of a transition matrix.
#[derive(Debug, Clone)]
pub struct TransitionSampler {
    targets: Vec<Vec<usize>>,
    cumulative: Vec<Vec<f64>>,
}

impl TransitionSampler {
    /// Fails when any row sum deviates from 1 by more than `tol`.
    pub fn new(p: &MixingMatrix, tol: f64) -> Result<Self, (usize, f64)> {
        let n = p.size();
        let mut targets = Vec::with_capacity(n);
        let mut cumulative = Vec::with_capacity(n);
        for i in 0..n {
            let support = p.row_support(i);
            let mut acc = 0.0;
            let mut cum = Vec::with_capacity(support.len());
            for &(_, w) in &support {
                acc += w;
                cum.push(acc);
            }
            if (acc - 1.0).abs() > tol {
                return Err((i, acc));
            }
            targets.push(support.into_iter().map(|(j, _)| j).collect());
            cumulative.push(cum);
        }
        Ok(TransitionSampler {
            targets,
            cumulative,
        })
    }

    /// Next state from `row` given a uniform draw `u ∈ [0, 1)`.
    #[inline]
    pub fn pick(&self, row: usize, u: f64) -> usize {
        let cum = &self.cumulative[row];
        let total = *cum.last().expect("rows have support");
        let x = u * total;
        let k = cum.partition_point(|&c| c <= x);
        self.targets[row][k.min(cum.len() - 1)]
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, row: usize, rng: &mut R) -> usize {
        self.pick(row, rng.random::<f64>())
    }
}
