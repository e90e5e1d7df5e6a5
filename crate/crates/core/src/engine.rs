//! Discrete-event driver: per-actor Poisson clocks, the global iteration
//! counter, simulated wall-clock time and bit accounting.
//!
//! Each actor (a walk or a node) completes iterations after i.i.d.
//! exponential delays of mean `mean_delay`. The earliest pending completion
//! is popped, handed to the [`Stepper`], and the actor's next completion is
//! scheduled from the current time. Ties on fire time are broken by
//! insertion sequence number.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;
use thiserror::Error;

use crate::data::Objective;
use crate::metrics::{self, ModelState, RunRecord};
use crate::streams::{self, Purpose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error("invariant violated at iteration {iteration}: {message}")]
    Invariant { iteration: u64, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    WalkIterationDone,
    NodeGradientDone,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Event {
    pub fire_time: f64,
    pub seq: u64,
    pub actor: usize,
    pub kind: EventKind,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.fire_time
            .total_cmp(&other.fire_time)
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Min-queue over `(fire_time, seq)`.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<Event>>,
}

impl EventQueue {
    pub fn push(&mut self, event: Event) {
        self.heap.push(Reverse(event));
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop().map(|Reverse(e)| e)
    }

    pub fn peek(&self) -> Option<&Event> {
        self.heap.peek().map(|Reverse(e)| e)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// How one iteration's duration is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub enum DelayModel {
    /// A single exponential covering computation and communication.
    #[default]
    Lumped,
    /// Independent computation and communication exponentials, summed; the
    /// computation part has mean `compute_fraction · mean_delay`.
    Split { compute_fraction: f64 },
}

/// Per-actor exponential clocks, each drawing from its own stream.
#[derive(Debug, Clone)]
pub struct Clocks {
    means: Vec<f64>,
    model: DelayModel,
    rngs: Vec<ChaCha8Rng>,
    kind: EventKind,
    next_seq: u64,
}

impl Clocks {
    pub fn new(
        actors: usize,
        kind: EventKind,
        config: &EngineConfig,
        seed: u64,
    ) -> Result<Self, EngineError> {
        let means = match &config.per_actor_delay {
            Some(m) if m.len() != actors => {
                return Err(EngineError::Config(format!(
                    "{} per-actor delays for {actors} actors",
                    m.len()
                )))
            }
            Some(m) => m.clone(),
            None => vec![config.mean_delay; actors],
        };
        if let Some(bad) = means.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return Err(EngineError::Config(format!("mean delay {bad} must be > 0")));
        }
        if let DelayModel::Split { compute_fraction } = config.delay_model {
            if !(compute_fraction > 0.0 && compute_fraction < 1.0) {
                return Err(EngineError::Config(format!(
                    "compute_fraction {compute_fraction} must be in (0, 1)"
                )));
            }
        }
        Ok(Clocks {
            means,
            model: config.delay_model,
            rngs: (0..actors).map(|a| streams::stream(seed, Purpose::Delay, a)).collect(),
            kind,
            next_seq: 0,
        })
    }

    fn draw(mean: f64, rng: &mut impl Rng) -> f64 {
        Exp::new(1.0 / mean).expect("positive rate").sample(rng)
    }

    /// The actor's next completion: `now` plus a fresh delay.
    pub fn schedule_next(&mut self, actor: usize, now: f64) -> Event {
        let mean = self.means[actor];
        let rng = &mut self.rngs[actor];
        let delay = match self.model {
            DelayModel::Lumped => Self::draw(mean, rng),
            DelayModel::Split { compute_fraction } => {
                Self::draw(mean * compute_fraction, rng)
                    + Self::draw(mean * (1.0 - compute_fraction), rng)
            }
        };
        let seq = self.next_seq;
        self.next_seq += 1;
        Event {
            fire_time: now + delay,
            seq,
            actor,
            kind: self.kind,
        }
    }
}

/// What one iteration did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StepOutcome {
    /// Models transmitted.
    pub messages: u64,
    /// Global iterations between the snapshot the gradient was taken at and
    /// now.
    pub tau: u64,
    /// Node where the gradient was computed.
    pub node: usize,
}

/// An algorithm state machine driven by the engine.
pub trait Stepper: ModelState {
    fn actor_count(&self) -> usize;

    fn event_kind(&self) -> EventKind;

    fn objective(&self) -> &Objective;

    /// Whether records carry the staleness column.
    fn reports_tau(&self) -> bool {
        false
    }

    /// Runs global iteration `iteration`, triggered by `actor`.
    fn step(&mut self, actor: usize, iteration: u64) -> Result<StepOutcome, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineConfig {
    pub mean_delay: f64,
    pub delay_model: DelayModel,
    /// Optional per-actor mean delays overriding `mean_delay`.
    pub per_actor_delay: Option<Vec<f64>>,
    pub model_bits: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            mean_delay: 1.0,
            delay_model: DelayModel::Lumped,
            per_actor_delay: None,
            model_bits: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Stop {
    MaxIterations(u64),
    MaxSimTime(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub stop: Stop,
    pub eval_interval: u64,
    pub seed: u64,
    /// Keep a per-iteration trace (actor, node, staleness).
    pub trace: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Accounting {
    pub iterations: u64,
    pub sim_time: f64,
    pub bits: u64,
    pub gradient_evals: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: u64,
    pub fire_time: f64,
    pub actor: usize,
    pub node: usize,
    pub tau: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub accounting: Accounting,
    pub trace: Vec<TraceRow>,
}

fn record(
    stepper: &(impl Stepper + ?Sized),
    acc: &Accounting,
    tau: Option<f64>,
) -> RunRecord {
    let e = metrics::evaluate(stepper, stepper.objective());
    RunRecord {
        t: acc.iterations,
        sim_time: acc.sim_time,
        bits: acc.bits,
        gradient_evals: acc.gradient_evals,
        loss: e.loss,
        grad_norm: e.grad_norm,
        loss_hub: e.loss_hub,
        spread: e.spread,
        tau_mean: tau,
    }
}

/// Drives `stepper` until the stop criterion, emitting a record at `t = 0`,
/// every `eval_interval` iterations, and at the final iteration.
pub fn run<S: Stepper + ?Sized>(
    config: &EngineConfig,
    stepper: &mut S,
    options: &RunOptions,
) -> Result<RunOutput, EngineError> {
    if options.eval_interval == 0 {
        return Err(EngineError::Config("eval_interval must be >= 1".into()));
    }
    match options.stop {
        Stop::MaxSimTime(z) if z.is_nan() || z < 0.0 => {
            return Err(EngineError::Config(format!("max_sim_time {z} must be >= 0")))
        }
        _ => {}
    }
    let actors = stepper.actor_count();
    let mut clocks = Clocks::new(actors, stepper.event_kind(), config, options.seed)?;
    let mut queue = EventQueue::default();
    for actor in 0..actors {
        queue.push(clocks.schedule_next(actor, 0.0));
    }

    let with_tau = stepper.reports_tau();
    let mut acc = Accounting::default();
    let mut records = vec![record(stepper, &acc, None)];
    let mut trace = Vec::new();
    let (mut tau_sum, mut tau_count) = (0u64, 0u64);

    loop {
        let done = match options.stop {
            Stop::MaxIterations(n) => acc.iterations >= n,
            Stop::MaxSimTime(z) => queue.peek().is_none_or(|e| e.fire_time > z),
        };
        if done {
            break;
        }
        let event = queue.pop().expect("every actor keeps one pending event");
        let t = acc.iterations;
        let outcome = stepper
            .step(event.actor, t)
            .map_err(|message| EngineError::Invariant { iteration: t, message })?;
        acc.iterations += 1;
        acc.sim_time = event.fire_time;
        acc.gradient_evals += 1;
        acc.bits += outcome.messages * config.model_bits;
        tau_sum += outcome.tau;
        tau_count += 1;
        if options.trace {
            trace.push(TraceRow {
                t,
                fire_time: event.fire_time,
                actor: event.actor,
                node: outcome.node,
                tau: outcome.tau,
            });
        }
        queue.push(clocks.schedule_next(event.actor, event.fire_time));
        if acc.iterations % options.eval_interval == 0 {
            let tau = with_tau.then(|| tau_sum as f64 / tau_count as f64);
            records.push(record(stepper, &acc, tau));
            (tau_sum, tau_count) = (0, 0);
        }
    }
    if records.last().is_some_and(|r| r.t != acc.iterations) {
        let tau = (with_tau && tau_count > 0).then(|| tau_sum as f64 / tau_count as f64);
        records.push(record(stepper, &acc, tau));
    }
    Ok(RunOutput {
        records,
        accounting: acc,
        trace,
    })
}

/// Re-applies a recorded actor sequence to a fresh stepper.
pub fn replay<S: Stepper + ?Sized>(stepper: &mut S, actors: &[usize]) -> Result<(), EngineError> {
    for (t, &actor) in actors.iter().enumerate() {
        stepper
            .step(actor, t as u64)
            .map_err(|message| EngineError::Invariant {
                iteration: t as u64,
                message,
            })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Shard, Task};

    /// Counts calls; a single scalar model that never changes.
    struct Idle {
        objective: Objective,
        models: Vec<Vec<f64>>,
        actors: usize,
        calls: Vec<usize>,
        fail_at: Option<u64>,
    }

    impl Idle {
        fn new(actors: usize) -> Self {
            let shard = Shard {
                node: 0,
                features: vec![1.0],
                targets: vec![0.0],
            };
            Idle {
                objective: Objective::new(Task::LeastSquares, 1, 0.0, vec![shard]).unwrap(),
                models: vec![vec![0.0]],
                actors,
                calls: Vec::new(),
                fail_at: None,
            }
        }
    }

    impl ModelState for Idle {
        fn models(&self) -> &[Vec<f64>] {
            &self.models
        }
    }

    impl Stepper for Idle {
        fn actor_count(&self) -> usize {
            self.actors
        }
        fn event_kind(&self) -> EventKind {
            EventKind::WalkIterationDone
        }
        fn objective(&self) -> &Objective {
            &self.objective
        }
        fn step(&mut self, actor: usize, iteration: u64) -> Result<StepOutcome, String> {
            if self.fail_at == Some(iteration) {
                return Err("boom".into());
            }
            self.calls.push(actor);
            Ok(StepOutcome {
                messages: 1,
                tau: 0,
                node: actor,
            })
        }
    }

    fn opts(stop: Stop, eval: u64, seed: u64) -> RunOptions {
        RunOptions {
            stop,
            eval_interval: eval,
            seed,
            trace: false,
        }
    }

    #[test]
    fn record_count() {
        let mut s = Idle::new(3);
        let out = run(&EngineConfig::default(), &mut s, &opts(Stop::MaxIterations(100), 10, 1)).unwrap();
        assert_eq!(out.records.len(), 11);
        assert_eq!(out.records[0].t, 0);
        assert_eq!(out.records[10].t, 100);
        let out = run(&EngineConfig::default(), &mut Idle::new(3), &opts(Stop::MaxIterations(95), 10, 1)).unwrap();
        assert_eq!(out.records.len(), 11);
        assert_eq!(out.records.last().unwrap().t, 95);
    }

    #[test]
    fn exponential_mean() {
        let cfg = EngineConfig {
            mean_delay: 2.5,
            ..EngineConfig::default()
        };
        let mut clocks = Clocks::new(1, EventKind::WalkIterationDone, &cfg, 4).unwrap();
        let n = 100_000;
        let total: f64 = (0..n).map(|_| clocks.schedule_next(0, 0.0).fire_time).sum();
        assert!((total / n as f64 - 2.5).abs() < 0.02 * 2.5);
    }

    #[test]
    fn split_delay_keeps_mean() {
        let cfg = EngineConfig {
            mean_delay: 1.0,
            delay_model: DelayModel::Split {
                compute_fraction: 0.3,
            },
            ..EngineConfig::default()
        };
        let mut clocks = Clocks::new(1, EventKind::NodeGradientDone, &cfg, 8).unwrap();
        let n = 100_000;
        let total: f64 = (0..n).map(|_| clocks.schedule_next(0, 0.0).fire_time).sum();
        assert!((total / n as f64 - 1.0).abs() < 0.02);
    }

    #[test]
    fn queue_orders_by_time_then_seq() {
        let mut q = EventQueue::default();
        let ev = |t, seq, actor| Event {
            fire_time: t,
            seq,
            actor,
            kind: EventKind::NodeGradientDone,
        };
        q.push(ev(1.0, 2, 0));
        q.push(ev(1.0, 1, 1));
        q.push(ev(0.5, 3, 2));
        assert_eq!(q.pop().unwrap().actor, 2);
        assert_eq!(q.pop().unwrap().actor, 1);
        assert_eq!(q.pop().unwrap().actor, 0);
        assert!(q.is_empty());
    }

    #[test]
    fn deterministic_and_monotone() {
        let run_once = |seed| {
            let mut s = Idle::new(4);
            let o = RunOptions {
                trace: true,
                ..opts(Stop::MaxIterations(500), 50, seed)
            };
            let out = run(&EngineConfig::default(), &mut s, &o).unwrap();
            (out, s.calls)
        };
        let (a, calls_a) = run_once(9);
        let (b, calls_b) = run_once(9);
        assert_eq!(a, b);
        assert_eq!(calls_a, calls_b);
        assert!(a.trace.windows(2).all(|w| w[1].fire_time > w[0].fire_time));
        assert!(a.records.windows(2).all(|w| w[1].t > w[0].t && w[1].bits >= w[0].bits));
        let (c, _) = run_once(10);
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn sim_time_stop() {
        let mut s = Idle::new(2);
        let out = run(&EngineConfig::default(), &mut s, &opts(Stop::MaxSimTime(50.0), 1000, 3)).unwrap();
        assert!(out.accounting.sim_time <= 50.0);
        // two rate-1 clocks: about 100 events by time 50
        assert!((60..140).contains(&out.accounting.iterations));
        assert_eq!(out.records.last().unwrap().t, out.accounting.iterations);
    }

    #[test]
    fn invariant_violation_reports_iteration() {
        let mut s = Idle::new(2);
        s.fail_at = Some(17);
        let err = run(&EngineConfig::default(), &mut s, &opts(Stop::MaxIterations(100), 10, 3)).unwrap_err();
        assert_eq!(
            err,
            EngineError::Invariant {
                iteration: 17,
                message: "boom".into()
            }
        );
    }

    #[test]
    fn config_errors() {
        let mut s = Idle::new(2);
        assert!(run(&EngineConfig::default(), &mut s, &opts(Stop::MaxIterations(10), 0, 3)).is_err());
        let bad = EngineConfig {
            mean_delay: 0.0,
            ..EngineConfig::default()
        };
        assert!(run(&bad, &mut s, &opts(Stop::MaxIterations(10), 1, 3)).is_err());
        let wrong_len = EngineConfig {
            per_actor_delay: Some(vec![1.0]),
            ..EngineConfig::default()
        };
        assert!(run(&wrong_len, &mut s, &opts(Stop::MaxIterations(10), 1, 3)).is_err());
    }

    #[test]
    fn per_actor_override_shifts_share() {
        // actor 0 ten times faster: it should fire about 10/11 of the time
        let cfg = EngineConfig {
            per_actor_delay: Some(vec![0.1, 1.0]),
            ..EngineConfig::default()
        };
        let mut s = Idle::new(2);
        run(&cfg, &mut s, &opts(Stop::MaxIterations(11_000), 11_000, 5)).unwrap();
        let zeros = s.calls.iter().filter(|&&a| a == 0).count() as f64;
        assert!((zeros / 11_000.0 - 10.0 / 11.0).abs() < 0.02);
    }
}
