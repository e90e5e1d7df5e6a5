//! Asynchronous Multi-Walk and Asynchronous Gossip as engine steppers.
//!
//! A walk's model is untouched between its own iterations, so the multi-walk
//! gradient is taken at the walk's current model; no stale buffer exists.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Objective;
use crate::engine::{EventKind, StepOutcome, Stepper};
use crate::graph::{offdiag_nnz, MixingMatrix, Topology, TransitionSampler, STOCHASTIC_TOL};
use crate::metrics::ModelState;
use crate::streams::{self, Purpose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgoError {
    #[error("{walks} walks need at least as many nodes, graph has {nodes}")]
    TooManyWalks { walks: usize, nodes: usize },
    #[error("walk count must be >= 1")]
    NoWalks,
    #[error("size mismatch: {0}")]
    Shape(String),
    #[error("mixing matrix has weight on a non-edge")]
    OffGraph,
    #[error("row {row} of the transition matrix sums to {sum}")]
    RowSum { row: usize, sum: f64 },
    #[error("invalid learning rate: {0}")]
    LearningRate(String),
    #[error("batch size must be >= 1")]
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearningRate {
    Constant { eta: f64 },
    /// `initial · factor^⌊t / every⌋`.
    StepDecay { initial: f64, factor: f64, every: u64 },
}

impl LearningRate {
    pub fn at(&self, t: u64) -> f64 {
        match *self {
            LearningRate::Constant { eta } => eta,
            LearningRate::StepDecay {
                initial,
                factor,
                every,
            } => initial * factor.powi((t / every).min(i32::MAX as u64) as i32),
        }
    }

    pub fn validate(&self) -> Result<(), AlgoError> {
        let ok = match *self {
            LearningRate::Constant { eta } => eta >= 0.0 && eta.is_finite(),
            LearningRate::StepDecay {
                initial,
                factor,
                every,
            } => initial >= 0.0 && initial.is_finite() && (0.0..=1.0).contains(&factor) && every > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(AlgoError::LearningRate(format!("{self:?}")))
        }
    }
}

/// Settings shared by both algorithms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub learning_rate: LearningRate,
    pub batch_size: usize,
    pub seed: u64,
}

fn check_shapes(topology: &Topology, p: &MixingMatrix, objective: &Objective, x0: &[f64]) -> Result<(), AlgoError> {
    let v = topology.node_count();
    if p.size() != v || objective.node_count() != v {
        return Err(AlgoError::Shape(format!(
            "graph V = {v}, matrix {}, objective {} nodes",
            p.size(),
            objective.node_count()
        )));
    }
    if x0.len() != objective.model_dim() {
        return Err(AlgoError::Shape(format!(
            "x0 has {} entries, model_dim = {}",
            x0.len(),
            objective.model_dim()
        )));
    }
    if !p.support_within(topology) {
        return Err(AlgoError::OffGraph);
    }
    Ok(())
}

fn check_settings(s: &StepSettings) -> Result<(), AlgoError> {
    s.learning_rate.validate()?;
    if s.batch_size == 0 {
        return Err(AlgoError::Batch);
    }
    Ok(())
}

fn finite_or_err(model: &[f64], what: impl FnOnce() -> String) -> Result<(), String> {
    if model.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(format!("{} became non-finite", what()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkState {
    pub node: usize,
    pub rng_move: ChaCha8Rng,
    pub rng_grad: ChaCha8Rng,
}

/// Node 0's copies `u^r` and the last visiting walk `l` (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct HubState {
    pub copies: Vec<Vec<f64>>,
    pub last: usize,
}

#[derive(Debug, Clone)]
pub struct MultiWalk {
    objective: Objective,
    sampler: TransitionSampler,
    models: Vec<Vec<f64>>,
    walks: Vec<WalkState>,
    hub: HubState,
    hub_mixing: bool,
    settings: StepSettings,
    grad: Vec<f64>,
}

impl MultiWalk {
    /// `walks` walks; walk `r` (1-based) starts at node `r − 1`.
    pub fn new(
        topology: &Topology,
        p: &MixingMatrix,
        walks: usize,
        x0: &[f64],
        objective: Objective,
        settings: StepSettings,
    ) -> Result<Self, AlgoError> {
        check_shapes(topology, p, &objective, x0)?;
        check_settings(&settings)?;
        if walks == 0 {
            return Err(AlgoError::NoWalks);
        }
        if walks > topology.node_count() {
            return Err(AlgoError::TooManyWalks {
                walks,
                nodes: topology.node_count(),
            });
        }
        let sampler = TransitionSampler::new(p, STOCHASTIC_TOL).map_err(|(row, sum)| AlgoError::RowSum { row, sum })?;
        let walk_states = (0..walks)
            .map(|r| WalkState {
                node: r,
                rng_move: streams::stream(settings.seed, Purpose::WalkMove, r),
                rng_grad: streams::stream(settings.seed, Purpose::Gradient, r),
            })
            .collect();
        Ok(MultiWalk {
            grad: vec![0.0; x0.len()],
            objective,
            sampler,
            models: vec![x0.to_vec(); walks],
            walks: walk_states,
            hub: HubState {
                copies: vec![x0.to_vec(); walks],
                last: 0,
            },
            hub_mixing: true,
            settings,
        })
    }

    /// Skips the Node-0 mixing lines when `false`.
    pub fn with_hub_mixing(mut self, enabled: bool) -> Self {
        self.hub_mixing = enabled;
        self
    }

    pub fn walk_count(&self) -> usize {
        self.walks.len()
    }

    pub fn walk_nodes(&self) -> Vec<usize> {
        self.walks.iter().map(|w| w.node).collect()
    }

    pub fn hub(&self) -> &HubState {
        &self.hub
    }

    /// `x ← u^l + (1/R)(x − u^r)`, then `u^r ← x`, `l ← r`.
    ///
    /// Evaluated as `x − (1 − 1/R)(x − u^r) + (u^l − u^r)`, which leaves `x`
    /// bitwise unchanged when `R = 1` or when all three models coincide.
    fn mix_at_hub(&mut self, r: usize) {
        let keep = 1.0 - 1.0 / self.walks.len() as f64;
        let l = self.hub.last;
        let x = &mut self.models[r];
        let ur = &self.hub.copies[r];
        let ul = &self.hub.copies[l];
        for i in 0..x.len() {
            x[i] = x[i] - keep * (x[i] - ur[i]) + (ul[i] - ur[i]);
        }
        self.hub.copies[r].copy_from_slice(x);
        self.hub.last = r;
    }
}

impl ModelState for MultiWalk {
    fn models(&self) -> &[Vec<f64>] {
        &self.models
    }

    fn hub_model(&self) -> Option<&[f64]> {
        Some(&self.hub.copies[self.hub.last])
    }
}

impl Stepper for MultiWalk {
    fn actor_count(&self) -> usize {
        self.walks.len()
    }

    fn event_kind(&self) -> EventKind {
        EventKind::WalkIterationDone
    }

    fn objective(&self) -> &Objective {
        &self.objective
    }

    fn step(&mut self, r: usize, t: u64) -> Result<StepOutcome, String> {
        let eta = self.settings.learning_rate.at(t);
        let node = self.walks[r].node;
        let walk = &mut self.walks[r];
        self.objective.stochastic_gradient_into(
            node,
            &self.models[r],
            self.settings.batch_size,
            &mut walk.rng_grad,
            &mut self.grad,
        );
        for (x, g) in self.models[r].iter_mut().zip(&self.grad) {
            *x -= eta * g;
        }
        if node == 0 && self.hub_mixing {
            self.mix_at_hub(r);
        }
        finite_or_err(&self.models[r], || format!("model of walk {}", r + 1))?;
        let walk = &mut self.walks[r];
        walk.node = self.sampler.pick(node, walk.rng_move.random::<f64>());
        Ok(StepOutcome {
            messages: 1,
            tau: 0,
            node,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Gossip {
    objective: Objective,
    /// Per node: `(j, p_ij)` for `j ≠ i` with `p_ij > 0`.
    neighbors: Vec<Vec<(usize, f64)>>,
    models: Vec<Vec<f64>>,
    scratch: Vec<Vec<f64>>,
    anchors: Vec<Vec<f64>>,
    anchor_iteration: Vec<u64>,
    rngs: Vec<ChaCha8Rng>,
    messages: u64,
    settings: StepSettings,
    grad: Vec<f64>,
}

impl Gossip {
    pub fn new(
        topology: &Topology,
        p: &MixingMatrix,
        x0: &[f64],
        objective: Objective,
        settings: StepSettings,
    ) -> Result<Self, AlgoError> {
        check_shapes(topology, p, &objective, x0)?;
        check_settings(&settings)?;
        TransitionSampler::new(p, STOCHASTIC_TOL).map_err(|(row, sum)| AlgoError::RowSum { row, sum })?;
        let v = topology.node_count();
        let neighbors = (0..v)
            .map(|i| p.row_support(i).into_iter().filter(|&(j, _)| j != i).collect())
            .collect();
        Ok(Gossip {
            grad: vec![0.0; x0.len()],
            objective,
            neighbors,
            models: vec![x0.to_vec(); v],
            scratch: vec![x0.to_vec(); v],
            anchors: vec![x0.to_vec(); v],
            anchor_iteration: vec![0; v],
            rngs: (0..v).map(|i| streams::stream(settings.seed, Purpose::Gradient, i)).collect(),
            messages: offdiag_nnz(p),
            settings,
        })
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    pub fn messages_per_iteration(&self) -> u64 {
        self.messages
    }

    /// `x_i ← Σ_j p_ij x_j` for every node, from the pre-mixing values.
    ///
    /// Written as `x_i + Σ_{j≠i} p_ij (x_j − x_i)` so that equal models stay
    /// bitwise equal.
    fn mix(&mut self) {
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            let xi = &self.models[i];
            let out = &mut self.scratch[i];
            out.copy_from_slice(xi);
            for &(j, w) in nbrs {
                let xj = &self.models[j];
                for k in 0..out.len() {
                    out[k] += w * (xj[k] - xi[k]);
                }
            }
        }
        std::mem::swap(&mut self.models, &mut self.scratch);
    }
}

impl ModelState for Gossip {
    fn models(&self) -> &[Vec<f64>] {
        &self.models
    }
}

impl Stepper for Gossip {
    fn actor_count(&self) -> usize {
        self.models.len()
    }

    fn event_kind(&self) -> EventKind {
        EventKind::NodeGradientDone
    }

    fn objective(&self) -> &Objective {
        &self.objective
    }

    fn reports_tau(&self) -> bool {
        true
    }

    fn step(&mut self, v: usize, t: u64) -> Result<StepOutcome, String> {
        let eta = self.settings.learning_rate.at(t);
        self.objective.stochastic_gradient_into(
            v,
            &self.anchors[v],
            self.settings.batch_size,
            &mut self.rngs[v],
            &mut self.grad,
        );
        for (x, g) in self.models[v].iter_mut().zip(&self.grad) {
            *x -= eta * g;
        }
        self.mix();
        for (i, m) in self.models.iter().enumerate() {
            finite_or_err(m, || format!("model of node {i}"))?;
        }
        self.anchors[v].copy_from_slice(&self.models[v]);
        let tau = t - self.anchor_iteration[v];
        self.anchor_iteration[v] = t + 1;
        Ok(StepOutcome {
            messages: self.messages,
            tau,
            node: v,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, Shard, SyntheticParams, Task};
    use crate::engine::{run, EngineConfig, RunOptions, Stop};
    use crate::graph::{build_topology, metropolis_hastings, TopologyKind};

    fn settings(eta: f64, seed: u64) -> StepSettings {
        StepSettings {
            learning_rate: LearningRate::Constant { eta },
            batch_size: 4,
            seed,
        }
    }

    fn problem(kind: TopologyKind, v: usize, shift: f64) -> (Topology, MixingMatrix, Objective) {
        let topo = build_topology(kind, v, None, 0).unwrap();
        let p = metropolis_hastings(&topo);
        let (obj, _) = make_synthetic(&SyntheticParams {
            task: Task::LeastSquares,
            nodes: v,
            n_per_node: 16,
            model_dim: 3,
            hetero_shift: shift,
            noise_std: 0.1,
            regularization: 0.0,
            seed: 5,
        })
        .unwrap();
        (topo, p, obj)
    }

    #[test]
    fn walk_count_limits() {
        let (topo, p, obj) = problem(TopologyKind::Cycle, 5, 0.0);
        let x0 = [0.0; 3];
        assert_eq!(
            MultiWalk::new(&topo, &p, 6, &x0, obj.clone(), settings(0.1, 1)).unwrap_err(),
            AlgoError::TooManyWalks { walks: 6, nodes: 5 }
        );
        assert_eq!(
            MultiWalk::new(&topo, &p, 0, &x0, obj.clone(), settings(0.1, 1)).unwrap_err(),
            AlgoError::NoWalks
        );
        let one = MultiWalk::new(&topo, &p, 1, &x0, obj.clone(), settings(0.1, 1)).unwrap();
        assert_eq!(one.walk_nodes(), vec![0]);
        let all = MultiWalk::new(&topo, &p, 5, &x0, obj, settings(0.1, 1)).unwrap();
        assert_eq!(all.walk_nodes(), vec![0, 1, 2, 3, 4]);
        assert!(all.models().iter().all(|m| m == &x0));
    }

    #[test]
    fn shape_errors() {
        let (topo, p, obj) = problem(TopologyKind::Cycle, 5, 0.0);
        assert!(matches!(
            Gossip::new(&topo, &p, &[0.0; 2], obj.clone(), settings(0.1, 1)),
            Err(AlgoError::Shape(_))
        ));
        let bigger = build_topology(TopologyKind::Cycle, 6, None, 0).unwrap();
        assert!(matches!(
            Gossip::new(&bigger, &metropolis_hastings(&bigger), &[0.0; 3], obj.clone(), settings(0.1, 1)),
            Err(AlgoError::Shape(_))
        ));
        let complete = build_topology(TopologyKind::Complete, 5, None, 0).unwrap();
        assert_eq!(
            Gossip::new(&topo, &metropolis_hastings(&complete), &[0.0; 3], obj.clone(), settings(0.1, 1)).unwrap_err(),
            AlgoError::OffGraph
        );
        let bad_rate = StepSettings {
            learning_rate: LearningRate::Constant { eta: -1.0 },
            ..settings(0.0, 1)
        };
        assert!(Gossip::new(&topo, &p, &[0.0; 3], obj, bad_rate).is_err());
    }

    #[test]
    fn step_decay_schedule() {
        let lr = LearningRate::StepDecay {
            initial: 1.0,
            factor: 0.5,
            every: 10,
        };
        assert_eq!(lr.at(0), 1.0);
        assert_eq!(lr.at(9), 1.0);
        assert_eq!(lr.at(10), 0.5);
        assert_eq!(lr.at(35), 0.125);
    }

    #[test]
    fn two_walk_hub_mixing_by_hand() {
        let (topo, p, obj) = problem(TopologyKind::Cycle, 4, 0.0);
        let mut mw = MultiWalk::new(&topo, &p, 2, &[0.0; 3], obj, settings(0.0, 1)).unwrap();
        // walk 2 arrives at node 0 with hand-set state; l = walk 1
        mw.models[0] = vec![1.0, 2.0, 3.0];
        mw.hub.copies[0] = vec![0.5, 0.5, 0.5];
        mw.hub.copies[1] = vec![-1.0, 0.0, 1.0];
        mw.models[1] = vec![3.0, 4.0, 5.0];
        mw.walks[1].node = 0;
        mw.step(1, 0).unwrap();
        // u^1 + (x - u^2)/2 = (0.5,0.5,0.5) + ((4,4,4))/2
        assert_eq!(mw.models[1], vec![2.5, 2.5, 2.5]);
        assert_eq!(mw.hub.copies[1], mw.models[1]);
        assert_eq!(mw.hub.last, 1);
        assert_eq!(mw.models[0], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn hub_copies_track_visits() {
        let (topo, p, obj) = problem(TopologyKind::Cycle, 5, 1.0);
        let mut mw = MultiWalk::new(&topo, &p, 3, &[0.0; 3], obj, settings(0.05, 3)).unwrap();
        let mut snapshot = mw.hub.copies.clone();
        let mut rng = streams::stream(99, Purpose::Delay, 0);
        for t in 0..3000 {
            let r = rng.random_range(0..3);
            let at_hub = mw.walks[r].node == 0;
            mw.step(r, t).unwrap();
            if at_hub {
                assert_eq!(mw.hub.copies[r], mw.models[r]);
                assert_eq!(mw.hub.last, r);
                snapshot[r] = mw.hub.copies[r].clone();
            }
            assert_eq!(mw.hub.copies, snapshot);
        }
    }

    #[test]
    fn gossip_three_node_hand_example() {
        // complete graph on 3 nodes: MH gives p_ij = 1/3 everywhere
        let topo = build_topology(TopologyKind::Complete, 3, None, 0).unwrap();
        let p = metropolis_hastings(&topo);
        let shards = (0..3)
            .map(|v| Shard {
                node: v,
                features: vec![1.0, 0.0],
                targets: vec![v as f64],
            })
            .collect();
        let obj = Objective::new(Task::LeastSquares, 2, 0.0, shards).unwrap();
        let mut g = Gossip::new(&topo, &p, &[0.0, 0.0], obj, settings(0.5, 1)).unwrap();
        g.models = vec![vec![3.0, 0.0], vec![0.0, 3.0], vec![0.0, 0.0]];
        // node 2 anchor (0,0): residual 0 - 2 = -2 -> grad (-2, 0); x_2 = (1, 0)
        g.step(2, 0).unwrap();
        for m in &g.models {
            assert!((m[0] - 4.0 / 3.0).abs() < 1e-15 && (m[1] - 1.0).abs() < 1e-15);
        }
        assert_eq!(g.anchors[2], g.models[2]);
        assert_eq!(g.anchors[0], vec![0.0, 0.0]);
    }

    #[test]
    fn gossip_mean_moves_only_by_gradient() {
        let (topo, p, obj) = problem(TopologyKind::Cycle, 6, 2.0);
        let mut g = Gossip::new(&topo, &p, &[0.3; 3], obj, settings(0.05, 2)).unwrap();
        let mut rng = streams::stream(5, Purpose::Delay, 0);
        for t in 0..500 {
            let v = rng.random_range(0..6);
            let before = crate::metrics::consensus(&g.models);
            let anchor = g.anchors[v].clone();
            let mut grad_rng = g.rngs[v].clone();
            let grad = g.objective.stochastic_gradient(v, &anchor, 4, &mut grad_rng);
            g.step(v, t).unwrap();
            let after = crate::metrics::consensus(&g.models);
            for k in 0..3 {
                let expect = before[k] - 0.05 * grad[k] / 6.0;
                assert!((after[k] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_rate_is_a_fixed_point() {
        let (topo, p, obj) = problem(TopologyKind::Cycle, 8, 3.0);
        let x0 = [0.7, -1.1, 2.5];
        let opts = RunOptions {
            stop: Stop::MaxIterations(2000),
            eval_interval: 500,
            seed: 4,
            trace: false,
        };
        let mut mw = MultiWalk::new(&topo, &p, 4, &x0, obj.clone(), settings(0.0, 4)).unwrap();
        run(&EngineConfig::default(), &mut mw, &opts).unwrap();
        assert!(mw.models().iter().chain(&mw.hub.copies).all(|m| m == &x0));
        let mut g = Gossip::new(&topo, &p, &x0, obj, settings(0.0, 4)).unwrap();
        run(&EngineConfig::default(), &mut g, &opts).unwrap();
        assert!(g.models().iter().all(|m| m == &x0));
    }

    #[test]
    fn single_walk_hub_mixing_is_identity() {
        let (topo, p, obj) = problem(TopologyKind::Cycle, 5, 2.0);
        let opts = RunOptions {
            stop: Stop::MaxIterations(3000),
            eval_interval: 100,
            seed: 8,
            trace: true,
        };
        let mut on = MultiWalk::new(&topo, &p, 1, &[0.0; 3], obj.clone(), settings(0.05, 8)).unwrap();
        let mut off = on.clone().with_hub_mixing(false);
        let a = run(&EngineConfig::default(), &mut on, &opts).unwrap();
        let b = run(&EngineConfig::default(), &mut off, &opts).unwrap();
        assert_eq!(on.models(), off.models());
        assert_eq!(a.trace, b.trace);
        let strip = |r: &crate::metrics::RunRecord| (r.t, r.loss.to_bits(), r.grad_norm.to_bits());
        assert_eq!(
            a.records.iter().map(strip).collect::<Vec<_>>(),
            b.records.iter().map(strip).collect::<Vec<_>>()
        );
        assert!(a.records.iter().all(|r| r.loss_hub.is_some()));
    }

    #[test]
    fn walk_visits_are_uniform_on_cycle() {
        let (topo, p, obj) = problem(TopologyKind::Cycle, 5, 0.0);
        let mut mw = MultiWalk::new(&topo, &p, 1, &[0.0; 3], obj, settings(0.0, 12)).unwrap();
        let n = 100_000u64;
        let mut visits = [0u64; 5];
        for t in 0..n {
            visits[mw.step(0, t).unwrap().node] += 1;
        }
        // Markov-chain samples are correlated; the slow mode of the lazy
        // cycle inflates the variance by at most (1 + λ₂)/(1 − λ₂).
        let lambda2 = 1.0 / 3.0 + 2.0 / 3.0 * (2.0 * std::f64::consts::PI / 5.0).cos();
        let inflation = (1.0 + lambda2) / (1.0 - lambda2);
        let se = (0.2 * 0.8 / n as f64 * inflation).sqrt();
        for &c in &visits {
            assert!((c as f64 / n as f64 - 0.2).abs() < 3.0 * se, "{visits:?}");
        }
    }

    #[test]
    fn message_counts_and_staleness() {
        let (topo, p, obj) = problem(TopologyKind::Cycle, 6, 0.0);
        let mut g = Gossip::new(&topo, &p, &[0.0; 3], obj.clone(), settings(0.01, 1)).unwrap();
        assert_eq!(g.messages_per_iteration(), 12);
        let s = g.step(3, 0).unwrap();
        assert_eq!((s.messages, s.tau), (12, 0));
        assert_eq!(g.step(1, 1).unwrap().tau, 1);
        assert_eq!(g.step(3, 2).unwrap().tau, 1);
        assert_eq!(g.step(1, 7).unwrap().tau, 5);
        let mut mw = MultiWalk::new(&topo, &p, 2, &[0.0; 3], obj, settings(0.01, 1)).unwrap();
        assert_eq!(mw.step(0, 0).unwrap().messages, 1);
    }

    #[test]
    fn divergence_is_reported() {
        let (topo, p, obj) = problem(TopologyKind::Complete, 4, 0.0);
        let mut mw = MultiWalk::new(&topo, &p, 2, &[1.0; 3], obj, settings(1e200, 1)).unwrap();
        let opts = RunOptions {
            stop: Stop::MaxIterations(100),
            eval_interval: 10,
            seed: 1,
            trace: false,
        };
        let err = run(&EngineConfig::default(), &mut mw, &opts).unwrap_err();
        assert!(matches!(err, crate::engine::EngineError::Invariant { .. }));
    }
}
