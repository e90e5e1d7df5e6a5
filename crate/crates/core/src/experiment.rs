//! Experiment orchestration behind the `analyze`, `run` and `sweep`
//! subcommands.

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::algorithms::{AlgoError, Gossip, MultiWalk, StepSettings};
use crate::chain::{self, ChainError};
use crate::config::{AlgorithmName, ConfigError, ExperimentConfig};
use crate::data::{self, DataError, LabelSkewParams, Objective, SyntheticParams};
use crate::engine::{self, EngineError, RunOptions, RunOutput, TraceRow};
use crate::graph::{self, GraphError, MixingMatrix, Topology, TopologyKind};
use crate::metrics;

/// Walk cap for Monte-Carlo excursions in `analyze`, as a multiple of `V²`.
pub const MC_MAX_STEPS_PER_V2: u64 = 1000;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("seed {seed}: {source}")]
    Engine { seed: u64, source: EngineError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid sweep: {0}")]
    Sweep(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

impl ExperimentError {
    /// True when a run aborted on a violated runtime invariant.
    pub fn is_invariant(&self) -> bool {
        matches!(
            self,
            ExperimentError::Engine {
                source: EngineError::Invariant { .. },
                ..
            }
        )
    }
}

/// Graph, mixing matrix and data built from one config.
#[derive(Debug, Clone)]
pub struct Problem {
    pub topology: Topology,
    pub matrix: MixingMatrix,
    pub objective: Objective,
}

pub fn build_problem(cfg: &ExperimentConfig) -> Result<Problem, ExperimentError> {
    let t = &cfg.topology;
    let topology = graph::build_topology(t.kind, t.nodes, t.edge_probability, t.seed)?;
    let matrix = graph::metropolis_hastings(&topology);
    let d = &cfg.data;
    let objective = match (d.hetero_shift, d.alpha) {
        (Some(shift), _) => {
            data::make_synthetic(&SyntheticParams {
                task: d.task,
                nodes: t.nodes,
                n_per_node: d.n_per_node,
                model_dim: d.model_dim,
                hetero_shift: shift,
                noise_std: d.noise_std,
                regularization: d.regularization,
                seed: d.seed,
            })?
            .0
        }
        (None, alpha) => {
            data::make_label_skewed(&LabelSkewParams {
                nodes: t.nodes,
                n_per_node: d.n_per_node,
                model_dim: d.model_dim,
                classes: d.classes,
                alpha,
                noise_std: d.noise_std,
                regularization: d.regularization,
                seed: d.seed,
            })?
            .0
        }
    };
    Ok(Problem {
        topology,
        matrix,
        objective,
    })
}

/// One simulation of `cfg` with run seed `seed`, starting from the zero model.
pub fn simulate(cfg: &ExperimentConfig, problem: &Problem, seed: u64) -> Result<RunOutput, ExperimentError> {
    let x0 = vec![0.0; problem.objective.model_dim()];
    let settings = StepSettings {
        learning_rate: cfg.learning_rate(),
        batch_size: cfg.algorithm.batch,
        seed,
    };
    let options = RunOptions {
        stop: cfg.stop(),
        eval_interval: cfg.run.eval_interval,
        seed,
        trace: cfg.run.trace,
    };
    let engine_cfg = cfg.engine();
    let out = match cfg.algorithm.name {
        AlgorithmName::Mw => {
            let walks = cfg.algorithm.walks.expect("validated");
            let mut s = MultiWalk::new(
                &problem.topology,
                &problem.matrix,
                walks,
                &x0,
                problem.objective.clone(),
                settings,
            )?
            .with_hub_mixing(cfg.algorithm.hub_mixing);
            engine::run(&engine_cfg, &mut s, &options)
        }
        AlgorithmName::Gossip => {
            let mut s = Gossip::new(&problem.topology, &problem.matrix, &x0, problem.objective.clone(), settings)?;
            engine::run(&engine_cfg, &mut s, &options)
        }
    };
    out.map_err(|source| ExperimentError::Engine { seed, source })
}

/// Writes `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), ExperimentError> {
    let io_err = |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    };
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let file = fs::File::create(&tmp).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    fill(&mut w).and_then(|_| w.flush()).map_err(io_err)?;
    drop(w);
    fs::rename(&tmp, path).map_err(io_err)
}

fn create_dir(dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, ExperimentError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))
}

pub const TRACE_COLUMNS: [&str; 5] = ["t", "Z", "actor", "node", "tau"];

fn write_trace(w: &mut dyn Write, rows: &[TraceRow]) -> io::Result<()> {
    writeln!(w, "{}", TRACE_COLUMNS.join(","))?;
    for r in rows {
        writeln!(w, "{},{:e},{},{},{}", r.t, r.fire_time, r.actor, r.node, r.tau)?;
    }
    Ok(())
}

/// Runs every seed and writes `<out>/<algo>_seed<seed>.csv` for each,
/// plus a `.trace.csv` sidecar when tracing is on. Returns the metric paths
/// in seed order.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Vec<PathBuf>, ExperimentError> {
    cfg.validate()?;
    create_dir(out)?;
    let problem = build_problem(cfg)?;
    let algo = cfg.algorithm.name.as_str();
    let provenance = cfg.to_toml();
    pool(jobs)?.install(|| {
        cfg.run
            .seeds
            .par_iter()
            .map(|&seed| {
                let output = simulate(cfg, &problem, seed)?;
                let run_id = format!("{algo}_seed{seed}");
                let path = out.join(format!("{run_id}.csv"));
                write_atomic(&path, |w| {
                    metrics::write_csv_header(&mut *w, &provenance, &[])?;
                    metrics::write_csv_rows(w, &run_id, algo, seed, &output.records, &[])
                })?;
                if cfg.run.trace {
                    let trace = out.join(format!("{run_id}.trace.csv"));
                    write_atomic(&trace, |w| write_trace(w, &output.trace))?;
                }
                Ok(path)
            })
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Walks,
    Alpha,
    Topology,
    Nodes,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Walks => "R",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Topology => "topology",
            SweepAxis::Nodes => "V",
        }
    }

    /// `cfg` with this axis set to `value`, revalidated.
    pub fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig, ExperimentError> {
        let bad = |what: &str| ExperimentError::Sweep(format!("{} value `{value}`: {what}", self.as_str()));
        let mut c = cfg.clone();
        match self {
            SweepAxis::Walks => {
                if c.algorithm.name != AlgorithmName::Mw {
                    return Err(bad("walk sweeps need algorithm mw"));
                }
                c.algorithm.walks = Some(value.parse().map_err(|_| bad("not an integer"))?);
            }
            SweepAxis::Alpha => {
                c.data.alpha = Some(value.parse().map_err(|_| bad("not a number"))?);
                c.data.hetero_shift = None;
            }
            SweepAxis::Topology => {
                c.topology.kind = TopologyKind::from_str(value).map_err(|_| bad("unknown topology"))?;
                if c.topology.kind != TopologyKind::ErdosRenyi {
                    c.topology.edge_probability = None;
                }
            }
            SweepAxis::Nodes => c.topology.nodes = value.parse().map_err(|_| bad("not an integer"))?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "R" | "r" | "walks" => Ok(SweepAxis::Walks),
            "alpha" => Ok(SweepAxis::Alpha),
            "topology" => Ok(SweepAxis::Topology),
            "V" | "v" | "nodes" => Ok(SweepAxis::Nodes),
            other => Err(format!("unknown sweep axis `{other}` (R, alpha, topology, V)")),
        }
    }
}

/// Cartesian product of `values × seeds`, aggregated into one long-format
/// CSV at `<out>/sweep_<axis>.csv` with trailing `axis,value` columns.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    out: &Path,
    jobs: usize,
) -> Result<PathBuf, ExperimentError> {
    if values.is_empty() {
        return Err(ExperimentError::Sweep("empty axis".into()));
    }
    cfg.validate()?;
    create_dir(out)?;
    let points = values
        .iter()
        .map(|v| {
            let c = axis.apply(cfg, v)?;
            let problem = build_problem(&c)?;
            Ok((v.as_str(), c, problem))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let jobs_list: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|i| cfg.run.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results = pool(jobs)?.install(|| {
        jobs_list
            .par_iter()
            .map(|&(i, seed)| simulate(&points[i].1, &points[i].2, seed).map(|o| o.records))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let path = out.join(format!("sweep_{}.csv", axis.as_str()));
    let provenance = format!(
        "{}sweep.axis = \"{}\"\nsweep.values = [{}]",
        cfg.to_toml(),
        axis.as_str(),
        values.iter().map(|v| format!("\"{v}\"")).collect::<Vec<_>>().join(", ")
    );
    write_atomic(&path, |w| {
        metrics::write_csv_header(&mut *w, &provenance, &["axis", "value"])?;
        for (&(i, seed), records) in jobs_list.iter().zip(&results) {
            let (value, c, _) = &points[i];
            let algo = c.algorithm.name.as_str();
            let run_id = format!("{}{}_{algo}_seed{seed}", axis.as_str(), value);
            metrics::write_csv_rows(&mut *w, &run_id, algo, seed, records, &[axis.as_str(), value])?;
        }
        Ok(())
    })?;
    Ok(path)
}

/// One row of the `analyze` table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalysisRow {
    pub topology: TopologyKind,
    pub nodes: usize,
    pub offdiag_nnz: u64,
    pub p: f64,
    pub p_prime: f64,
    pub mean_return: f64,
    pub second_return: f64,
    pub mc: Option<chain::McMoments>,
}

pub const ANALYSIS_COLUMNS: [&str; 11] = [
    "topology",
    "V",
    "offdiag_nnz",
    "p",
    "p_prime",
    "mean_return",
    "second_return",
    "mc_mean",
    "mc_mean_se",
    "mc_second",
    "mc_second_se",
];

/// Spectral gaps and return-time moments of the configured topology family
/// over the analysis sizes.
pub fn analyze(cfg: &ExperimentConfig) -> Result<Vec<AnalysisRow>, ExperimentError> {
    let t = &cfg.topology;
    let (target, mc_samples) = cfg.analysis.as_ref().map_or((0, 0), |a| (a.target, a.mc_samples));
    cfg.analysis_nodes()
        .into_iter()
        .map(|v| {
            let topo = graph::build_topology(t.kind, v, t.edge_probability, t.seed)?;
            let p = graph::metropolis_hastings(&topo);
            let gaps = chain::spectral_gaps(&p)?;
            let exact = chain::return_moments_exact(&p, target)?;
            let mc = if mc_samples > 0 {
                let cap = MC_MAX_STEPS_PER_V2 * (v as u64) * (v as u64);
                Some(chain::return_moments_mc(&p, target, mc_samples, cap, t.seed)?)
            } else {
                None
            };
            Ok(AnalysisRow {
                topology: t.kind,
                nodes: v,
                offdiag_nnz: graph::offdiag_nnz(&p),
                p: gaps.p,
                p_prime: gaps.p_prime,
                mean_return: exact.mean,
                second_return: exact.second,
                mc,
            })
        })
        .collect()
}

pub fn write_analysis_csv(w: &mut dyn Write, rows: &[AnalysisRow], provenance: &str) -> io::Result<()> {
    for line in provenance.lines() {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "{}", ANALYSIS_COLUMNS.join(","))?;
    for r in rows {
        let mc = match r.mc {
            Some(m) => {
                let se = m.moments.stderr.expect("Monte-Carlo moments carry stderr");
                format!("{:e},{:e},{:e},{:e}", m.moments.mean, se.mean, m.moments.second, se.second)
            }
            None => ",,,".to_string(),
        };
        writeln!(
            w,
            "{},{},{},{:e},{:e},{:e},{:e},{mc}",
            r.topology, r.nodes, r.offdiag_nnz, r.p, r.p_prime, r.mean_return, r.second_return
        )?;
    }
    Ok(())
}

/// Fixed-width table for the terminal.
pub fn format_analysis_table(rows: &[AnalysisRow]) -> String {
    let mut s = format!(
        "{:<12} {:>5} {:>12} {:>12} {:>12} {:>14}\n",
        "topology", "V", "p", "p'", "E[h]", "H^2"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<12} {:>5} {:>12.6e} {:>12.6e} {:>12.6} {:>14.6}\n",
            r.topology.as_str(),
            r.nodes,
            r.p,
            r.p_prime,
            r.mean_return,
            r.second_return
        ));
    }
    s
}

/// Analyzes and writes `<out>/analysis_<topology>.csv`.
pub fn cmd_analyze(cfg: &ExperimentConfig, out: &Path) -> Result<(Vec<AnalysisRow>, PathBuf), ExperimentError> {
    cfg.validate()?;
    let rows = analyze(cfg)?;
    create_dir(out)?;
    let path = out.join(format!("analysis_{}.csv", cfg.topology.kind));
    let provenance = cfg.to_toml();
    write_atomic(&path, |w| write_analysis_csv(w, &rows, &provenance))?;
    Ok((rows, path))
}
