use walkgossip::algorithms::{Gossip, LearningRate, MultiWalk, StepSettings};
use walkgossip::data::{make_synthetic, Objective, SyntheticParams, Task};
use walkgossip::engine::{run, EngineConfig, RunOptions, Stepper, Stop};
use walkgossip::graph::{build_topology, metropolis_hastings, TopologyKind};
use walkgossip::metrics::{self, ModelState};

fn problem(v: usize) -> (Objective, Vec<f64>) {
    make_synthetic(&SyntheticParams {
        task: Task::LeastSquares,
        nodes: v,
        n_per_node: 32,
        model_dim: 4,
        hetero_shift: 0.5,
        noise_std: 0.1,
        regularization: 0.0,
        seed: 77,
    })
    .unwrap()
}

fn settings(eta: f64, seed: u64) -> StepSettings {
    StepSettings {
        learning_rate: LearningRate::Constant { eta },
        batch_size: 4,
        seed,
    }
}

#[test]
fn gradient_vanishes_at_closed_form_optimum() {
    let (obj, _) = problem(6);
    let x = obj.optimum().unwrap().to_vec();
    assert!(obj.global_grad_norm(&x) <= 1e-8);
}

#[test]
fn single_walk_hub_copy_tracks_walk_after_hub_steps() {
    let t = build_topology(TopologyKind::Cycle, 6, None, 0).unwrap();
    let p = metropolis_hastings(&t);
    let (obj, _) = problem(6);
    let mut mw = MultiWalk::new(&t, &p, 1, &[0.0; 4], obj.clone(), settings(0.05, 1)).unwrap();
    let mut hub_steps = 0;
    for it in 0..2000 {
        let at_hub = mw.walk_nodes()[0] == 0;
        mw.step(0, it).unwrap();
        if at_hub {
            hub_steps += 1;
            assert_eq!(mw.hub_model().unwrap(), &mw.models()[0][..]);
            let e = metrics::evaluate(&mw, &obj);
            assert_eq!(e.loss_hub, Some(e.loss));
        }
    }
    assert!(hub_steps > 100);
}

#[test]
fn evaluation_is_read_only() {
    let t = build_topology(TopologyKind::Complete, 5, None, 0).unwrap();
    let p = metropolis_hastings(&t);
    let (obj, _) = problem(5);
    let mut g = Gossip::new(&t, &p, &[0.0; 4], obj.clone(), settings(0.1, 2)).unwrap();
    let opts = RunOptions {
        stop: Stop::MaxIterations(100),
        eval_interval: 100,
        seed: 2,
        trace: false,
    };
    run(&EngineConfig::default(), &mut g, &opts).unwrap();
    let before: Vec<Vec<u64>> = g.models().iter().map(|m| m.iter().map(|x| x.to_bits()).collect()).collect();
    let e1 = metrics::evaluate(&g, &obj);
    let e2 = metrics::evaluate(&g, &obj);
    let after: Vec<Vec<u64>> = g.models().iter().map(|m| m.iter().map(|x| x.to_bits()).collect()).collect();
    assert_eq!(before, after);
    assert_eq!(e1, e2);
}

#[test]
fn wall_clock_per_iteration_is_delay_over_walks() {
    let t = build_topology(TopologyKind::Cycle, 8, None, 0).unwrap();
    let p = metropolis_hastings(&t);
    let (obj, _) = problem(8);
    for walks in [1usize, 4] {
        let mut mw = MultiWalk::new(&t, &p, walks, &[0.0; 4], obj.clone(), settings(0.0, 3)).unwrap();
        let cfg = EngineConfig {
            mean_delay: 2.0,
            ..EngineConfig::default()
        };
        let n = 10_000;
        let opts = RunOptions {
            stop: Stop::MaxIterations(n),
            eval_interval: n,
            seed: 3,
            trace: false,
        };
        let out = run(&cfg, &mut mw, &opts).unwrap();
        let expect = 2.0 / walks as f64;
        assert!((out.accounting.sim_time / n as f64 - expect).abs() <= 0.05 * expect);
    }
}

#[test]
fn gossip_staleness_averages_node_count() {
    // under iid clocks a node's anchor is on average V - 1 iterations old
    let v = 10;
    let t = build_topology(TopologyKind::Complete, v, None, 0).unwrap();
    let p = metropolis_hastings(&t);
    let (obj, _) = problem(v);
    let mut g = Gossip::new(&t, &p, &[0.0; 4], obj, settings(0.01, 4)).unwrap();
    let opts = RunOptions {
        stop: Stop::MaxIterations(20_000),
        eval_interval: 20_000,
        seed: 4,
        trace: true,
    };
    let out = run(&EngineConfig::default(), &mut g, &opts).unwrap();
    let tail = &out.trace[1000..];
    let mean = tail.iter().map(|r| r.tau as f64).sum::<f64>() / tail.len() as f64;
    assert!((mean - (v - 1) as f64).abs() < 0.3, "{mean}");
}
