//! CSV and JSON artifacts of a run.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use oid_core::central::count_dispatched;
use oid_core::consensus::AdmmConfig;
use oid_core::error::{OidError, Result};
use oid_core::harness::{Algorithm, SimulationOutput};
use oid_core::scenario::{fmt_float, Scenario};

/// Round to nine significant digits, the precision of every number we write.
fn sig9(x: f64) -> f64 {
    if x.is_finite() { fmt_float(x).parse().unwrap_or(x) } else { x }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Setpoint {
    pub house: usize,
    pub p_c: f64,
    pub q_c: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlotSummary {
    pub slot: usize,
    pub hour: f64,
    pub config_hash: String,
    pub iterations: usize,
    pub final_residual: Option<f64>,
    pub objective: f64,
    pub loss: f64,
    pub dispatched: usize,
    pub rank_ratio: f64,
    pub warning: Option<String>,
    pub setpoints: Vec<Setpoint>,
}

/// Largest setpoint disagreement with an earlier run of another algorithm
/// on the same scenario, over the slots both runs cover.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossCheck {
    pub against: String,
    pub slots: usize,
    pub max_abs_dp: f64,
    pub max_abs_dq: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub scenario_hash: String,
    pub admm: AdmmConfig,
    pub dispatch_eps: f64,
    pub slots: Vec<SlotSummary>,
    #[serde(default)]
    pub cross_check: Vec<CrossCheck>,
}

pub fn scenario_hash(s: &Scenario) -> String {
    hex::encode(Sha256::digest(s.to_json().as_bytes()))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> OidError {
    OidError::Format { path: path.display().to_string(), msg: e.to_string() }
}

/// Writes `dispatch.csv`, `convergence.csv`, `summary.json` and the
/// per-algorithm copy `summary-<algo>.json` used for later cross-checks.
pub fn write_run(
    out: &Path,
    scenario: &Scenario,
    algo: Algorithm,
    admm: &AdmmConfig,
    slots: &[usize],
    runs: &[SimulationOutput],
    dispatch_eps: f64,
) -> Result<RunSummary> {
    let nodes = scenario.house_nodes();

    let mut dispatch = String::from("slot,house,p_c,q_c,v_mag\n");
    let mut convergence = String::from("slot,iteration,id,error\n");
    let mut entries = Vec::with_capacity(runs.len());
    for (&slot, run) in slots.iter().zip(runs) {
        let r = &run.result;
        let mags = r.magnitudes();
        for (k, sp) in r.setpoints.iter().enumerate() {
            let node = nodes[k];
            writeln!(dispatch, "{slot},{node},{},{},{}", fmt_float(sp.p_c), fmt_float(sp.q_c), fmt_float(mags[node]))
                .expect("writing to a String");
        }
        for t in &run.trace {
            for (k, e) in t.house_errors.iter().enumerate() {
                writeln!(convergence, "{slot},{},h{},{}", t.round, nodes[k], fmt_float(*e)).expect("writing to a String");
            }
            for b in &t.border_errors {
                writeln!(convergence, "{slot},{},b{}-{}:{},{}", t.round, b.a, b.j, b.node, fmt_float(b.error))
                    .expect("writing to a String");
            }
        }
        entries.push(SlotSummary {
            slot,
            hour: scenario.profiles.slot_hours[slot],
            config_hash: run.hash_hex(),
            iterations: run.iterations,
            final_residual: run.trace.last().map(|t| sig9(t.residual)),
            objective: sig9(r.objective),
            loss: sig9(r.breakdown.loss),
            dispatched: count_dispatched(r, dispatch_eps),
            rank_ratio: sig9(r.rank_ratio),
            warning: run.warning.as_ref().map(|w| w.to_string()),
            setpoints: r
                .setpoints
                .iter()
                .zip(&nodes)
                .map(|(sp, &house)| Setpoint { house, p_c: sig9(sp.p_c), q_c: sig9(sp.q_c) })
                .collect(),
        });
    }

    let mut summary = RunSummary {
        algorithm: algo.to_string(),
        scenario_hash: scenario_hash(scenario),
        admm: admm.clone(),
        dispatch_eps,
        slots: entries,
        cross_check: Vec::new(),
    };
    for other in [Algorithm::Central, Algorithm::Doid1, Algorithm::Doid2] {
        if other == algo {
            continue;
        }
        let path = out.join(format!("summary-{other}.json"));
        let Ok(text) = std::fs::read_to_string(&path) else { continue };
        let theirs: RunSummary = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
        if theirs.scenario_hash != summary.scenario_hash {
            log::info!("{}: different scenario, skipping cross-check", path.display());
            continue;
        }
        if let Some(c) = cross_check(&summary, &theirs) {
            summary.cross_check.push(c);
        }
    }

    std::fs::write(out.join("dispatch.csv"), dispatch)?;
    std::fs::write(out.join("convergence.csv"), convergence)?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    std::fs::write(out.join("summary.json"), &json)?;
    std::fs::write(out.join(format!("summary-{algo}.json")), &json)?;
    Ok(summary)
}

fn cross_check(ours: &RunSummary, theirs: &RunSummary) -> Option<CrossCheck> {
    let mut c = CrossCheck { against: theirs.algorithm.clone(), slots: 0, max_abs_dp: 0.0, max_abs_dq: 0.0 };
    for a in &ours.slots {
        let Some(b) = theirs.slots.iter().find(|b| b.slot == a.slot) else { continue };
        c.slots += 1;
        for sa in &a.setpoints {
            let Some(sb) = b.setpoints.iter().find(|sb| sb.house == sa.house) else { continue };
            c.max_abs_dp = c.max_abs_dp.max((sa.p_c - sb.p_c).abs());
            c.max_abs_dq = c.max_abs_dq.max((sa.q_c - sb.q_c).abs());
        }
    }
    (c.slots > 0).then(|| CrossCheck { max_abs_dp: sig9(c.max_abs_dp), max_abs_dq: sig9(c.max_abs_dq), ..c })
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub lambda: f64,
    pub dispatched: usize,
    pub objective: f64,
    pub losses: f64,
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut s = String::from("lambda,dispatched,objective,losses\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", fmt_float(r.lambda), r.dispatched, fmt_float(r.objective), fmt_float(r.losses))
            .expect("writing to a String");
    }
    std::fs::write(path, s)?;
    Ok(())
}
