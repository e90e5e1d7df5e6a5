//! Convergence metrics and the per-evaluation [`RunRecord`].

use std::io::{self, Write};

use serde::Serialize;

use crate::data::Objective;

/// A read-only view of an algorithm's models.
pub trait ModelState {
    /// The models averaged into the consensus point: walk models for
    /// multi-walk, node models for gossip.
    fn models(&self) -> &[Vec<f64>];

    /// The hub's latest mixed model `u^l` (multi-walk only).
    fn hub_model(&self) -> Option<&[f64]> {
        None
    }
}

/// Metrics evaluated on one algorithm state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    /// `‖∇f‖²` at the consensus model.
    pub grad_norm: f64,
    pub loss_hub: Option<f64>,
    /// Largest Euclidean distance between any two models.
    pub spread: f64,
}

/// One metrics row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunRecord {
    pub t: u64,
    pub sim_time: f64,
    pub bits: u64,
    pub gradient_evals: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub loss_hub: Option<f64>,
    pub spread: f64,
    /// Mean staleness of the iterations since the previous record.
    pub tau_mean: Option<f64>,
}

pub fn consensus(models: &[Vec<f64>]) -> Vec<f64> {
    let dim = models.first().map_or(0, Vec::len);
    let k = models.len() as f64;
    let mut out = vec![0.0; dim];
    for m in models {
        for (o, x) in out.iter_mut().zip(m) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= k);
    out
}

pub fn max_pairwise_distance(models: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (i, a) in models.iter().enumerate() {
        for b in &models[i + 1..] {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            worst = worst.max(d2);
        }
    }
    worst.sqrt()
}

/// Full-data evaluation at the consensus model (and the hub model, if any).
pub fn evaluate<S: ModelState + ?Sized>(state: &S, objective: &Objective) -> Evaluation {
    let models = state.models();
    let center = if models.len() == 1 {
        models[0].clone()
    } else {
        consensus(models)
    };
    Evaluation {
        loss: objective.global_loss(&center),
        grad_norm: objective.global_grad_norm(&center),
        loss_hub: state.hub_model().map(|h| objective.global_loss(h)),
        spread: max_pairwise_distance(models),
    }
}

/// Where a run first reached a gradient-norm target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TargetHit {
    pub iterations: u64,
    pub sim_time: f64,
    pub bits: u64,
}

/// First record whose `grad_norm` is at or below `target`, or `None`.
pub fn time_to_target(records: &[RunRecord], target: f64) -> Option<TargetHit> {
    records.iter().find(|r| r.grad_norm <= target).map(|r| TargetHit {
        iterations: r.t,
        sim_time: r.sim_time,
        bits: r.bits,
    })
}

/// Version tag written as the first line of every metrics CSV.
pub const CSV_VERSION_LINE: &str = "# walkgossip metrics csv v1";

pub const CSV_COLUMNS: [&str; 11] = [
    "run_id", "algo", "t", "Z", "B", "loss", "grad_norm", "loss_hub", "spread", "tau_mean", "seed",
];

/// Writes the version line, `#`-prefixed provenance lines and the header.
/// `extra` columns (sweep axes) follow the fixed ones.
pub fn write_csv_header<W: Write>(mut w: W, provenance: &str, extra: &[&str]) -> io::Result<()> {
    writeln!(w, "{CSV_VERSION_LINE}")?;
    for line in provenance.lines() {
        writeln!(w, "# {line}")?;
    }
    let mut cols = CSV_COLUMNS.to_vec();
    cols.extend_from_slice(extra);
    writeln!(w, "{}", cols.join(","))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:e}")).unwrap_or_default()
}

pub fn write_csv_rows<W: Write>(
    mut w: W,
    run_id: &str,
    algo: &str,
    seed: u64,
    records: &[RunRecord],
    extra: &[&str],
) -> io::Result<()> {
    let tail: String = extra.iter().map(|v| format!(",{v}")).collect();
    for r in records {
        writeln!(
            w,
            "{run_id},{algo},{},{:e},{},{:e},{:e},{},{:e},{},{seed}{tail}",
            r.t,
            r.sim_time,
            r.bits,
            r.loss,
            r.grad_norm,
            opt(r.loss_hub),
            r.spread,
            opt(r.tau_mean),
        )?;
    }
    Ok(())
}
