//! Synthetic per-node datasets and the gradient oracles of the global
//! objective `f(x) = (1/V) Σ_v f_v(x)`.
//!
//! Each node's loss is the average sample loss on its shard plus an optional
//! ridge term `(reg/2)‖x‖²`, so `f_v` and `f` are invariant to duplicating
//! shard rows.

use std::io::{self, Read, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

/// Attempts at a Dirichlet partition before giving up on empty nodes.
pub const PARTITION_MAX_ATTEMPTS: u32 = 100;

const SHARD_MAGIC: &[u8; 8] = b"WGSHARD1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset parameter: {0}")]
    InvalidParameter(String),
    #[error("dirichlet partition left node {node} empty after {attempts} attempts")]
    EmptyNode { node: usize, attempts: u32 },
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("shard file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    LeastSquares,
    Logistic,
}

impl Task {
    fn code(self) -> u64 {
        match self {
            Task::LeastSquares => 0,
            Task::Logistic => 1,
        }
    }

    fn from_code(code: u64) -> Option<Task> {
        match code {
            0 => Some(Task::LeastSquares),
            1 => Some(Task::Logistic),
            _ => None,
        }
    }
}

/// One node's local dataset. Features are row-major `n × model_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub node: usize,
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn row(&self, i: usize, dim: usize) -> &[f64] {
        &self.features[i * dim..(i + 1) * dim]
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// The global objective over all node shards.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    task: Task,
    model_dim: usize,
    regularization: f64,
    shards: Vec<Shard>,
    optimum: Option<Vec<f64>>,
}

impl Objective {
    /// Validates shard shapes and, for least squares, precomputes the
    /// closed-form minimizer.
    pub fn new(
        task: Task,
        model_dim: usize,
        regularization: f64,
        shards: Vec<Shard>,
    ) -> Result<Self, DataError> {
        if model_dim == 0 || shards.is_empty() {
            return Err(DataError::InvalidParameter(
                "need model_dim >= 1 and at least one shard".into(),
            ));
        }
        if regularization.is_nan() || regularization < 0.0 {
            return Err(DataError::InvalidParameter(format!(
                "regularization {regularization} must be >= 0"
            )));
        }
        for (v, s) in shards.iter().enumerate() {
            if s.is_empty() || s.features.len() != s.len() * model_dim {
                return Err(DataError::InvalidParameter(format!(
                    "shard {v} has {} targets and {} feature values",
                    s.len(),
                    s.features.len()
                )));
            }
            if s.features.iter().chain(&s.targets).any(|x| !x.is_finite()) {
                return Err(DataError::InvalidParameter(format!("shard {v} is not finite")));
            }
            if task == Task::Logistic && s.targets.iter().any(|&y| y != 0.0 && y != 1.0) {
                return Err(DataError::InvalidParameter(format!(
                    "shard {v} has logistic targets outside {{0, 1}}"
                )));
            }
        }
        let mut obj = Objective {
            task,
            model_dim,
            regularization,
            shards,
            optimum: None,
        };
        if task == Task::LeastSquares {
            obj.optimum = obj.solve_least_squares();
        }
        Ok(obj)
    }

    fn solve_least_squares(&self) -> Option<Vec<f64>> {
        let d = self.model_dim;
        let v = self.shards.len() as f64;
        let mut h = vec![0.0; d * d];
        let mut g = vec![0.0; d];
        for s in &self.shards {
            let w = 1.0 / (v * s.len() as f64);
            for i in 0..s.len() {
                let a = s.row(i, d);
                for r in 0..d {
                    g[r] += w * a[r] * s.targets[i];
                    for c in 0..d {
                        h[r * d + c] += w * a[r] * a[c];
                    }
                }
            }
        }
        for r in 0..d {
            h[r * d + r] += self.regularization;
        }
        linalg::solve(d, &h, &[g]).ok().map(|mut x| x.remove(0))
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    pub fn node_count(&self) -> usize {
        self.shards.len()
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    pub fn shard(&self, node: usize) -> &Shard {
        &self.shards[node]
    }

    /// Closed-form minimizer of the least-squares objective, when the normal
    /// equations are nonsingular.
    pub fn optimum(&self) -> Option<&[f64]> {
        self.optimum.as_deref()
    }

    #[inline]
    fn sample_loss(&self, a: &[f64], y: f64, x: &[f64]) -> f64 {
        let z = dot(a, x);
        match self.task {
            Task::LeastSquares => 0.5 * (z - y) * (z - y),
            Task::Logistic => softplus(z) - y * z,
        }
    }

    /// d(loss)/d(aᵀx) for one sample.
    #[inline]
    fn sample_slope(&self, a: &[f64], y: f64, x: &[f64]) -> f64 {
        let z = dot(a, x);
        match self.task {
            Task::LeastSquares => z - y,
            Task::Logistic => sigmoid(z) - y,
        }
    }

    fn ridge(&self, x: &[f64]) -> f64 {
        0.5 * self.regularization * dot(x, x)
    }

    pub fn local_loss(&self, node: usize, x: &[f64]) -> f64 {
        let s = &self.shards[node];
        let d = self.model_dim;
        let total: f64 = (0..s.len())
            .map(|i| self.sample_loss(s.row(i, d), s.targets[i], x))
            .sum();
        total / s.len() as f64 + self.ridge(x)
    }

    /// Full local gradient `∇f_v(x)`.
    pub fn local_gradient(&self, node: usize, x: &[f64]) -> Vec<f64> {
        let s = &self.shards[node];
        let mut out = vec![0.0; self.model_dim];
        self.accumulate_rows(s, 0..s.len(), x, &mut out);
        out
    }

    fn accumulate_rows(
        &self,
        s: &Shard,
        rows: impl ExactSizeIterator<Item = usize>,
        x: &[f64],
        out: &mut [f64],
    ) {
        let d = self.model_dim;
        let count = rows.len() as f64;
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in rows {
            let a = s.row(i, d);
            let slope = self.sample_slope(a, s.targets[i], x);
            for (o, ai) in out.iter_mut().zip(a) {
                *o += slope * ai;
            }
        }
        for (o, xi) in out.iter_mut().zip(x) {
            *o = *o / count + self.regularization * xi;
        }
    }

    /// Minibatch gradient of node `node`'s loss at `x`, written into `out`.
    ///
    /// Rows are drawn without replacement, fresh on every call. A batch
    /// larger than the shard is clamped to the shard size, which yields the
    /// full local gradient.
    pub fn stochastic_gradient_into<R: Rng + ?Sized>(
        &self,
        node: usize,
        x: &[f64],
        batch_size: usize,
        rng: &mut R,
        out: &mut [f64],
    ) {
        let s = &self.shards[node];
        let n = s.len();
        let batch = batch_size.clamp(1, n);
        if batch == n {
            self.accumulate_rows(s, 0..n, x, out);
        } else {
            let picks = index::sample(rng, n, batch);
            self.accumulate_rows(s, picks.into_iter(), x, out);
        }
    }

    pub fn stochastic_gradient<R: Rng + ?Sized>(
        &self,
        node: usize,
        x: &[f64],
        batch_size: usize,
        rng: &mut R,
    ) -> Vec<f64> {
        let mut out = vec![0.0; self.model_dim];
        self.stochastic_gradient_into(node, x, batch_size, rng, &mut out);
        out
    }

    /// `f(x)`.
    pub fn global_loss(&self, x: &[f64]) -> f64 {
        let v = self.shards.len();
        (0..v).map(|node| self.local_loss(node, x)).sum::<f64>() / v as f64
    }

    /// `∇f(x)`.
    pub fn global_gradient(&self, x: &[f64]) -> Vec<f64> {
        let v = self.shards.len() as f64;
        let mut out = vec![0.0; self.model_dim];
        for node in 0..self.shards.len() {
            for (o, g) in out.iter_mut().zip(self.local_gradient(node, x)) {
                *o += g / v;
            }
        }
        out
    }

    /// `‖∇f(x)‖²`.
    pub fn global_grad_norm(&self, x: &[f64]) -> f64 {
        let g = self.global_gradient(x);
        dot(&g, &g)
    }

    /// Gradient diversity `max_v ‖∇f_v(x) − ∇f(x)‖²`.
    pub fn diversity(&self, x: &[f64]) -> f64 {
        let g = self.global_gradient(x);
        (0..self.shards.len())
            .map(|node| {
                self.local_gradient(node, x)
                    .iter()
                    .zip(&g)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// Writes all shards as a flat little-endian binary file.
    ///
    /// Layout: magic `WGSHARD1`; `V`, `model_dim`, task code as `u64`;
    /// regularization as `f64`; then per node its row count `n` as `u64`,
    /// `n × model_dim` row-major features and `n` targets as `f64`.
    pub fn write_shards<W: Write>(&self, mut w: W) -> Result<(), DataError> {
        w.write_all(SHARD_MAGIC)?;
        for word in [self.shards.len() as u64, self.model_dim as u64, self.task.code()] {
            w.write_all(&word.to_le_bytes())?;
        }
        w.write_all(&self.regularization.to_le_bytes())?;
        for s in &self.shards {
            w.write_all(&(s.len() as u64).to_le_bytes())?;
            for x in s.features.iter().chain(&s.targets) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_shards<R: Read>(mut r: R) -> Result<Objective, DataError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SHARD_MAGIC {
            return Err(DataError::Format("bad magic".into()));
        }
        let mut word = || -> Result<u64, DataError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let nodes = word()? as usize;
        let dim = word()? as usize;
        let task = Task::from_code(word()?).ok_or_else(|| DataError::Format("unknown task".into()))?;
        let reg = f64::from_bits(word()?);
        let mut shards = Vec::with_capacity(nodes);
        for node in 0..nodes {
            let n = word()? as usize;
            let mut floats = |len: usize| -> Result<Vec<f64>, DataError> {
                (0..len).map(|_| word().map(f64::from_bits)).collect()
            };
            let features = floats(n * dim)?;
            let targets = floats(n)?;
            shards.push(Shard {
                node,
                features,
                targets,
            });
        }
        Objective::new(task, dim, reg, shards)
    }
}

/// Parameters of [`make_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    pub task: Task,
    pub nodes: usize,
    pub n_per_node: usize,
    pub model_dim: usize,
    /// Distance of each node's planted model from the shared one.
    pub hetero_shift: f64,
    pub noise_std: f64,
    pub regularization: f64,
    pub seed: u64,
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    loop {
        let g = gaussian_vec(rng, len);
        let norm = dot(&g, &g).sqrt();
        if norm > 1e-12 {
            return g.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Planted-model synthetic data with a heterogeneity knob.
///
/// A shared model `w*` is drawn once; node `v` gets its own planted model
/// `w_v = w* + hetero_shift · u_v` with `u_v` a random unit vector, and
/// standard-normal features. Least-squares targets are `a·w_v` plus
/// Gaussian noise of standard deviation `noise_std`. Logistic targets are
/// Bernoulli draws with probability `sigmoid(a·w_v + noise)`.
pub fn make_synthetic(params: &SyntheticParams) -> Result<(Objective, Vec<f64>), DataError> {
    let SyntheticParams {
        task,
        nodes,
        n_per_node,
        model_dim,
        hetero_shift,
        noise_std,
        regularization,
        seed,
    } = *params;
    if nodes == 0 || n_per_node == 0 || model_dim == 0 {
        return Err(DataError::InvalidParameter("sizes must be positive".into()));
    }
    if !(hetero_shift >= 0.0 && noise_std >= 0.0) {
        return Err(DataError::InvalidParameter(
            "hetero_shift and noise_std must be >= 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_star = gaussian_vec(&mut rng, model_dim);
    let mut shards = Vec::with_capacity(nodes);
    for node in 0..nodes {
        let u = unit_vec(&mut rng, model_dim);
        let w_v: Vec<f64> = w_star.iter().zip(&u).map(|(w, u)| w + hetero_shift * u).collect();
        let features = gaussian_vec(&mut rng, n_per_node * model_dim);
        let targets = (0..n_per_node)
            .map(|i| {
                let a = &features[i * model_dim..(i + 1) * model_dim];
                let eps: f64 = StandardNormal.sample(&mut rng);
                let z = dot(a, &w_v) + noise_std * eps;
                match task {
                    Task::LeastSquares => z,
                    Task::Logistic => f64::from(rng.random::<f64>() < sigmoid(z)),
                }
            })
            .collect();
        shards.push(Shard {
            node,
            features,
            targets,
        });
    }
    Ok((Objective::new(task, model_dim, regularization, shards)?, w_star))
}

/// Parameters of [`make_label_skewed`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelSkewParams {
    pub nodes: usize,
    pub n_per_node: usize,
    pub model_dim: usize,
    pub classes: usize,
    /// Dirichlet concentration; `None` splits samples uniformly at random.
    pub alpha: Option<f64>,
    pub noise_std: f64,
    pub regularization: f64,
    pub seed: u64,
}

/// Binary logistic data built from a balanced multi-class pool and split
/// across nodes by class with [`dirichlet_partition`].
///
/// Class `c` has a Gaussian center; a sample of class `c` has features
/// `center_c + noise_std · N(0, I)` and binary target `c mod 2`.
pub fn make_label_skewed(params: &LabelSkewParams) -> Result<(Objective, Vec<Vec<usize>>), DataError> {
    let p = *params;
    if p.nodes == 0 || p.n_per_node == 0 || p.model_dim == 0 || p.classes < 2 {
        return Err(DataError::InvalidParameter(
            "sizes must be positive and classes >= 2".into(),
        ));
    }
    let total = p.nodes * p.n_per_node;
    if total < p.classes {
        return Err(DataError::InvalidParameter("fewer samples than classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let centers: Vec<Vec<f64>> = (0..p.classes).map(|_| gaussian_vec(&mut rng, p.model_dim)).collect();
    let labels: Vec<usize> = (0..total).map(|i| i % p.classes).collect();
    let mut features = Vec::with_capacity(total * p.model_dim);
    for &c in &labels {
        for &mu in &centers[c] {
            let eps: f64 = StandardNormal.sample(&mut rng);
            features.push(mu + p.noise_std * eps);
        }
    }
    let partition_seed = rng.random::<u64>();
    let parts = match p.alpha {
        Some(alpha) => dirichlet_partition(&labels, p.nodes, alpha, partition_seed)?,
        None => {
            let mut order: Vec<usize> = (0..total).collect();
            let mut prng = ChaCha8Rng::seed_from_u64(partition_seed);
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut prng);
            order.chunks(p.n_per_node).map(|c| c.to_vec()).collect()
        }
    };
    let shards = parts
        .iter()
        .enumerate()
        .map(|(node, idx)| Shard {
            node,
            features: idx
                .iter()
                .flat_map(|&i| features[i * p.model_dim..(i + 1) * p.model_dim].iter().copied())
                .collect(),
            targets: idx.iter().map(|&i| (labels[i] % 2) as f64).collect(),
        })
        .collect();
    Ok((Objective::new(Task::Logistic, p.model_dim, p.regularization, shards)?, parts))
}

/// Splits sample indices across `nodes` with per-class Dirichlet(α) shares.
///
/// For each class, node shares are drawn from `Dirichlet(alpha · 1_V)` and
/// the class's samples (in index order) are assigned by flooring
/// `share · count` and handing the leftover samples to the largest
/// fractional remainders, so counts are exact. Partitions that leave a node
/// empty are redrawn up to [`PARTITION_MAX_ATTEMPTS`] times.
pub fn dirichlet_partition(
    class_labels: &[usize],
    nodes: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(DataError::InvalidParameter(format!("alpha {alpha} must be > 0")));
    }
    if nodes == 0 {
        return Err(DataError::InvalidParameter("need at least one node".into()));
    }
    let n_classes = class_labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &c) in class_labels.iter().enumerate() {
        by_class[c].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(DataError::EmptyClass(c));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| DataError::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut empty_node = 0;
    for _ in 0..PARTITION_MAX_ATTEMPTS {
        let mut parts = vec![Vec::new(); nodes];
        for members in &by_class {
            let shares = loop {
                let g: Vec<f64> = (0..nodes).map(|_| gamma.sample(&mut rng)).collect();
                let sum: f64 = g.iter().sum();
                if sum > 0.0 && sum.is_finite() {
                    break g.into_iter().map(|x| x / sum).collect::<Vec<f64>>();
                }
            };
            let counts = largest_remainder(&shares, members.len());
            let mut cursor = 0;
            for (node, &count) in counts.iter().enumerate() {
                parts[node].extend_from_slice(&members[cursor..cursor + count]);
                cursor += count;
            }
        }
        match parts.iter().position(Vec::is_empty) {
            None => {
                for p in parts.iter_mut() {
                    p.sort_unstable();
                }
                return Ok(parts);
            }
            Some(node) => empty_node = node,
        }
    }
    Err(DataError::EmptyNode {
        node: empty_node,
        attempts: PARTITION_MAX_ATTEMPTS,
    })
}

/// Integer counts summing to `total`, proportional to `shares`.
fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(shift: f64, noise: f64) -> SyntheticParams {
        SyntheticParams {
            task: Task::LeastSquares,
            nodes: 6,
            n_per_node: 30,
            model_dim: 4,
            hetero_shift: shift,
            noise_std: noise,
            regularization: 0.0,
            seed: 42,
        }
    }

    #[test]
    fn planted_optimum_is_stationary() {
        let (obj, w_star) = make_synthetic(&params(0.0, 0.0)).unwrap();
        for v in 0..obj.node_count() {
            let g = obj.local_gradient(v, &w_star);
            assert!(dot(&g, &g) <= 1e-20);
        }
        assert!(obj.global_grad_norm(&w_star) <= 1e-10);
        let opt = obj.optimum().unwrap();
        assert!(opt.iter().zip(&w_star).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn iid_shards_have_no_diversity_at_shared_optimum() {
        let (obj, w) = make_synthetic(&params(0.0, 0.0)).unwrap();
        assert!(obj.diversity(&w) <= 1e-10 * (1.0 + obj.global_grad_norm(&w)));
    }

    #[test]
    fn diversity_grows_with_shift() {
        let mut last = -1.0;
        for shift in [0.1, 1.0, 10.0] {
            let (obj, w) = make_synthetic(&params(shift, 0.0)).unwrap();
            let d = obj.diversity(&w);
            assert!(d > last, "shift {shift}: {d} <= {last}");
            last = d;
        }
    }

    #[test]
    fn full_batch_equals_local_gradient() {
        let (obj, _) = make_synthetic(&params(1.0, 0.1)).unwrap();
        let x = vec![0.3, -0.2, 0.1, 0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(obj.stochastic_gradient(2, &x, 30, &mut rng), obj.local_gradient(2, &x));
        assert_eq!(obj.stochastic_gradient(2, &x, 500, &mut rng), obj.local_gradient(2, &x));
    }

    #[test]
    fn planted_local_model_zero_minibatch() {
        let p = SyntheticParams {
            nodes: 3,
            ..params(2.0, 0.0)
        };
        let (obj, w_star) = make_synthetic(&p).unwrap();
        // recover node 1's planted model from its exact fit
        let s = obj.shard(1);
        let local = Objective::new(Task::LeastSquares, 4, 0.0, vec![s.clone()]).unwrap();
        let w1 = local.optimum().unwrap().to_vec();
        assert!(w1.iter().zip(&w_star).any(|(a, b)| (a - b).abs() > 1e-3));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = obj.stochastic_gradient(1, &w1, 7, &mut rng);
        assert!(g.iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn duplication_invariance() {
        let (obj, _) = make_synthetic(&params(1.0, 0.2)).unwrap();
        let doubled: Vec<Shard> = obj
            .shards()
            .iter()
            .map(|s| Shard {
                node: s.node,
                features: s.features.iter().chain(&s.features).copied().collect(),
                targets: s.targets.iter().chain(&s.targets).copied().collect(),
            })
            .collect();
        let obj2 = Objective::new(Task::LeastSquares, 4, 0.0, doubled).unwrap();
        let x = vec![0.1, 0.2, -0.3, 0.4];
        assert!((obj.global_loss(&x) - obj2.global_loss(&x)).abs() < 1e-12);
        for (a, b) in obj.global_gradient(&x).iter().zip(obj2.global_gradient(&x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_instance_by_hand() {
        // node 0: a = (1, 0), y = 1; node 1: a = (0, 2), y = -1 ; x = 0
        let shards = vec![
            Shard { node: 0, features: vec![1.0, 0.0], targets: vec![1.0] },
            Shard { node: 1, features: vec![0.0, 2.0], targets: vec![-1.0] },
        ];
        let obj = Objective::new(Task::LeastSquares, 2, 0.0, shards).unwrap();
        let x = [0.0, 0.0];
        // f = (0.5 + 0.5) / 2
        assert!((obj.global_loss(&x) - 0.5).abs() < 1e-15);
        // ∇f = ((-1, 0) + (0, 2)) / 2
        assert_eq!(obj.global_gradient(&x), vec![-0.5, 1.0]);
        assert!((obj.global_grad_norm(&x) - 1.25).abs() < 1e-15);
    }

    #[test]
    fn logistic_targets_validated() {
        let bad = vec![Shard { node: 0, features: vec![1.0], targets: vec![0.5] }];
        assert!(Objective::new(Task::Logistic, 1, 0.0, bad).is_err());
    }

    #[test]
    fn partition_single_node() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let parts = dirichlet_partition(&labels, 1, 0.5, 3).unwrap();
        assert_eq!(parts, vec![(0..50).collect::<Vec<_>>()]);
    }

    #[test]
    fn partition_errors() {
        let labels = vec![0, 2, 2];
        assert!(matches!(
            dirichlet_partition(&labels, 2, 1.0, 0),
            Err(DataError::EmptyClass(1))
        ));
        assert!(dirichlet_partition(&[0, 1], 2, 0.0, 0).is_err());
        assert!(matches!(
            dirichlet_partition(&[0, 1], 5, 1.0, 0),
            Err(DataError::EmptyNode { .. })
        ));
    }

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 10), vec![5, 3, 2]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 10).iter().sum::<usize>(), 10);
    }

    #[test]
    fn shard_file_round_trip() {
        let (obj, _) = make_synthetic(&params(1.0, 0.1)).unwrap();
        let mut buf = Vec::new();
        obj.write_shards(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 32 + 6 * (8 + 30 * 5 * 8));
        let back = Objective::read_shards(buf.as_slice()).unwrap();
        assert_eq!(back, obj);
        assert!(Objective::read_shards(&b"nonsense-bytes"[..]).is_err());
    }

    #[test]
    fn label_skewed_logistic() {
        let (obj, parts) = make_label_skewed(&LabelSkewParams {
            nodes: 5,
            n_per_node: 40,
            model_dim: 3,
            classes: 4,
            alpha: Some(0.5),
            noise_std: 1.0,
            regularization: 1e-2,
            seed: 9,
        })
        .unwrap();
        assert_eq!(obj.task(), Task::Logistic);
        assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), 200);
        assert!(obj.global_loss(&[0.0; 3]).is_finite());
        assert!((obj.global_loss(&[0.0; 3]) - 2f64.ln()).abs() < 1e-12);
    }
}
