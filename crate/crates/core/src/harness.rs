//! Message-passing simulation of the dispatch algorithms.
//!
//! Utility, CEM and customer agents keep their own state and talk only
//! through a [`Bus`] that runs synchronous rounds: agents compute, post
//! messages, the bus checks every message against the protocol and delivers
//! them at the barrier. Every delivered message is logged so a run can be
//! replayed and checked bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use oid_conic::{Solver, C64};

use crate::central::{solve_central_with, CostSpec, DispatchResult, VoltageLimits};
use crate::clusters::{
    assemble_result, block_diff_sq, border_errors, cem_update, cluster_dual_update, combined_residual,
    validate_partition, Algorithm2State, BorderError, CemUpdate, ClusterPartition,
};
use crate::consensus::{
    customer_update, dual_update, finish, step_sq, utility_solve, AdmmConfig, ConsensusVars, ConvergenceWarning,
    UtilityUpdate,
};
use crate::error::{OidError, Result};
use crate::feeder::{FeederModel, HouseLoad, HousePayload, InverterSpec, OperatingPoint};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Central,
    Doid1,
    Doid2,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Central => "central",
            Algorithm::Doid1 => "doid1",
            Algorithm::Doid2 => "doid2",
        })
    }
}

/// Customers are numbered by house index (position in `feeder.houses()`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentId {
    Utility,
    Cem(usize),
    Customer(usize),
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentId::Utility => f.write_str("utility"),
            AgentId::Cem(a) => write!(f, "cem-{a}"),
            AgentId::Customer(h) => write!(f, "customer-{h}"),
        }
    }
}

pub type Block = [[C64; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Payload {
    /// Network-side copy `(P̄, Q̄)`, manager to customer.
    SetpointCopy { p: f64, q: f64 },
    /// Customer setpoint `(P, Q)`, customer to manager.
    SetpointValue { p: f64, q: f64 },
    /// `Vᵃ_j` over the border endpoints, CEM to neighbouring CEM.
    BorderBlock(Block),
    /// Available PV power and load; the net injection is `p_av − p_load`.
    NetLoadReport { p_av: f64, p_load: f64, q_load: f64 },
}

impl Payload {
    pub fn tag(&self) -> u8 {
        match self {
            Payload::SetpointCopy { .. } => 1,
            Payload::SetpointValue { .. } => 2,
            Payload::BorderBlock(_) => 3,
            Payload::NetLoadReport { .. } => 4,
        }
    }

    fn floats(&self) -> Vec<f64> {
        match *self {
            Payload::SetpointCopy { p, q } | Payload::SetpointValue { p, q } => vec![p, q],
            Payload::BorderBlock(b) => b.iter().flatten().flat_map(|z| [z.re, z.im]).collect(),
            Payload::NetLoadReport { p_av, p_load, q_load } => vec![p_av, p_load, q_load],
        }
    }

    fn arity(tag: u8) -> Option<usize> {
        match tag {
            1 | 2 => Some(2),
            3 => Some(8),
            4 => Some(3),
            _ => None,
        }
    }

    fn from_floats(tag: u8, x: &[f64]) -> Option<Self> {
        Some(match tag {
            1 => Payload::SetpointCopy { p: x[0], q: x[1] },
            2 => Payload::SetpointValue { p: x[0], q: x[1] },
            3 => {
                let z = |i: usize| C64::new(x[2 * i], x[2 * i + 1]);
                Payload::BorderBlock([[z(0), z(1)], [z(2), z(3)]])
            }
            4 => Payload::NetLoadReport { p_av: x[0], p_load: x[1], q_load: x[2] },
            _ => return None,
        })
    }

    fn bits_eq(&self, other: &Payload) -> bool {
        self.tag() == other.tag()
            && self.floats().iter().zip(other.floats()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Message {
    pub from: AgentId,
    pub to: AgentId,
    pub round: u32,
    pub payload: Payload,
}

impl Message {
    fn bits_eq(&self, other: &Message) -> bool {
        self.from == other.from && self.to == other.to && self.round == other.round && self.payload.bits_eq(&other.payload)
    }
}

/// Telemetry of one ADMM round (round 0, the reports, has none).
/// `house_errors[k] = max(|P̄ − P|, |Q̄ − Q|)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub round: u32,
    pub house_errors: Vec<f64>,
    pub border_errors: Vec<BorderError>,
    pub objective: f64,
    pub residual: f64,
    pub wall_time_s: f64,
    pub messages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub slot: usize,
    pub admm: AdmmConfig,
    /// Overrides the scenario's partition for the clustered algorithm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<Vec<Vec<usize>>>,
}

impl SimConfig {
    pub fn new(slot: usize, admm: AdmmConfig) -> Self {
        Self { slot, admm, partition: None }
    }
}

/// SHA-256 over the scenario, algorithm and configuration; guards replay.
pub fn config_hash(scenario: &Scenario, algorithm: Algorithm, config: &SimConfig) -> [u8; 32] {
    #[derive(Serialize)]
    struct Key<'a> {
        scenario: &'a Scenario,
        algorithm: Algorithm,
        config: &'a SimConfig,
    }
    let json = serde_json::to_vec(&Key { scenario, algorithm, config }).expect("plain data serializes");
    Sha256::digest(&json).into()
}

/// Which messages the running algorithm allows.
#[derive(Debug, Clone)]
struct Protocol {
    algorithm: Algorithm,
    /// Manager of each house.
    manager: Vec<AgentId>,
    neighbors: Vec<BTreeSet<usize>>,
}

impl Protocol {
    fn check(&self, m: &Message) -> std::result::Result<(), String> {
        use AgentId::*;
        let house_ok = |h: usize| h < self.manager.len();
        let manages = |mgr: AgentId, h: usize| house_ok(h) && self.manager[h] == mgr;
        match (m.from, m.to, &m.payload) {
            (Customer(h), mgr, Payload::NetLoadReport { .. }) if m.round == 0 && manages(mgr, h) => Ok(()),
            (_, _, Payload::NetLoadReport { .. }) => Err("net-load reports go from a customer to its manager in round 0".into()),
            _ if m.round == 0 => Err("round 0 carries only net-load reports".into()),
            _ if self.algorithm == Algorithm::Central => Err("the central algorithm exchanges no messages after the reports".into()),
            (mgr, Customer(h), Payload::SetpointCopy { .. }) if manages(mgr, h) => Ok(()),
            (Customer(h), mgr, Payload::SetpointValue { .. }) if manages(mgr, h) => Ok(()),
            (Cem(a), Cem(j), Payload::BorderBlock(_))
                if self.algorithm == Algorithm::Doid2 && a < self.neighbors.len() && self.neighbors[a].contains(&j) =>
            {
                Ok(())
            }
            (_, _, Payload::BorderBlock(_)) => Err("border blocks travel only between neighbouring CEMs".into()),
            (from, to, p) => Err(format!("{} from {from} to {to} is not part of the protocol", tag_name(p.tag()))),
        }
    }
}

fn tag_name(tag: u8) -> &'static str {
    match tag {
        1 => "SetpointCopy",
        2 => "SetpointValue",
        3 => "BorderBlock",
        4 => "NetLoadReport",
        _ => "unknown payload",
    }
}

/// In-memory bus with per-round barriers. In replay mode the logged messages
/// are delivered instead of the live ones, after checking both agree bit for
/// bit.
pub struct Bus {
    protocol: Protocol,
    round: u32,
    pending: Vec<Message>,
    seen: BTreeSet<(AgentId, AgentId, u8)>,
    inboxes: BTreeMap<AgentId, Vec<Message>>,
    log: Vec<Message>,
    replay: Option<Vec<Message>>,
}

impl Bus {
    fn new(protocol: Protocol) -> Self {
        Self {
            protocol,
            round: 0,
            pending: Vec::new(),
            seen: BTreeSet::new(),
            inboxes: BTreeMap::new(),
            log: Vec::new(),
            replay: None,
        }
    }

    /// Bus for a partition-free algorithm over `n_houses` customers, for
    /// driving the protocol by hand.
    pub fn for_utility(algorithm: Algorithm, n_houses: usize) -> Self {
        Self::new(Protocol { algorithm, manager: vec![AgentId::Utility; n_houses], neighbors: Vec::new() })
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    /// Queues a message for the current round.
    pub fn send(&mut self, m: Message) -> Result<()> {
        let err = |msg: String| OidError::Protocol { sender: m.from.to_string(), round: m.round, msg };
        if m.round != self.round {
            return Err(err(format!("message for round {} posted during round {}", m.round, self.round)));
        }
        self.protocol.check(&m).map_err(err)?;
        if !self.seen.insert((m.from, m.to, m.payload.tag())) {
            return Err(err(format!("second {} to {} in one round", tag_name(m.payload.tag()), m.to)));
        }
        self.pending.push(m);
        Ok(())
    }

    /// Ends the round: delivers everything posted and opens the next round.
    pub fn barrier(&mut self) -> Result<usize> {
        let mut batch = std::mem::take(&mut self.pending);
        if let Some(expected) = &self.replay {
            let start = self.log.len();
            for (i, live) in batch.iter_mut().enumerate() {
                let logged = expected.get(start + i).ok_or_else(|| OidError::Protocol {
                    sender: live.from.to_string(),
                    round: live.round,
                    msg: format!("replay log ends before message {}", start + i),
                })?;
                if !live.bits_eq(logged) {
                    return Err(OidError::Protocol {
                        sender: live.from.to_string(),
                        round: live.round,
                        msg: format!("replay diverged at message {}", start + i),
                    });
                }
                *live = *logged;
            }
        }
        let n = batch.len();
        for m in &batch {
            self.inboxes.entry(m.to).or_default().push(*m);
        }
        self.log.extend(batch);
        self.seen.clear();
        self.round += 1;
        Ok(n)
    }

    /// Messages addressed to `id`; nothing else is visible to an agent.
    pub fn take_inbox(&mut self, id: AgentId) -> Vec<Message> {
        self.inboxes.remove(&id).unwrap_or_default()
    }

    pub fn log(&self) -> &[Message] {
        &self.log
    }
}

fn protocol_err(agent: AgentId, round: u32, msg: impl Into<String>) -> OidError {
    OidError::Protocol { sender: agent.to_string(), round, msg: msg.into() }
}

struct CustomerAgent {
    id: usize,
    manager: AgentId,
    payload: HousePayload,
    a: f64,
    b: f64,
    /// One-house consensus state: own setpoint, last copy, own multipliers.
    vars: ConsensusVars,
    pending: Option<OperatingPoint>,
}

impl CustomerAgent {
    fn me(&self) -> AgentId {
        AgentId::Customer(self.id)
    }

    fn report(&self) -> Message {
        let HousePayload { inverter, load } = self.payload;
        Message {
            from: self.me(),
            to: self.manager,
            round: 0,
            payload: Payload::NetLoadReport { p_av: inverter.p_av, p_load: load.p_load, q_load: load.q_load },
        }
    }

    fn compute(&mut self, kappa: f64) -> Result<()> {
        let (lp, lq) = self.vars.customer_linear(0, kappa);
        self.pending = Some(customer_update(&self.payload.inverter, self.a, self.b, kappa, lp, lq)?);
        Ok(())
    }

    fn post(&self, round: u32) -> Message {
        let s = self.pending.expect("computed before posting");
        Message { from: self.me(), to: self.manager, round, payload: Payload::SetpointValue { p: s.p_c, q: s.q_c } }
    }

    fn receive(&mut self, inbox: &[Message], round: u32, kappa: f64) -> Result<()> {
        let copy = match inbox {
            [Message { from, payload: Payload::SetpointCopy { p, q }, .. }] if *from == self.manager => (*p, *q),
            _ => return Err(protocol_err(self.me(), round, format!("expected one setpoint copy, got {} messages", inbox.len()))),
        };
        let s = self.pending.take().expect("computed before receiving");
        self.vars.pbar[0] = copy.0;
        self.vars.qbar[0] = copy.1;
        self.vars.p[0] = s.p_c;
        self.vars.q[0] = s.q_c;
        dual_update(&mut self.vars, [0], kappa);
        Ok(())
    }
}

/// Builds a manager's network from the static feeder and received reports;
/// houses it does not manage keep zero injections and are never read.
fn feeder_from_reports(static_feeder: &FeederModel, inbox: &[Message], me: AgentId, round: u32) -> Result<FeederModel> {
    let mut payloads: Vec<HousePayload> = (0..static_feeder.n_houses()).map(|k| *static_feeder.house(k)).collect();
    for m in inbox {
        match (m.from, m.payload) {
            (AgentId::Customer(h), Payload::NetLoadReport { p_av, p_load, q_load }) => {
                payloads[h].inverter.p_av = p_av;
                payloads[h].load = HouseLoad { p_load, q_load };
            }
            _ => return Err(protocol_err(me, round, "unexpected message while collecting reports")),
        }
    }
    static_feeder.with_payloads(&payloads)
}

/// The manager's view of the feeder before any report: topology and inverter
/// ratings only.
fn static_feeder(feeder: &FeederModel) -> Result<FeederModel> {
    let payloads: Vec<HousePayload> = (0..feeder.n_houses())
        .map(|k| {
            let h = feeder.house(k);
            HousePayload {
                inverter: InverterSpec { p_av: 0.0, ..h.inverter },
                load: HouseLoad { p_load: 0.0, q_load: 0.0 },
            }
        })
        .collect();
    feeder.with_payloads(&payloads)
}

struct UtilityAgent<'a> {
    feeder: FeederModel,
    cost: &'a CostSpec,
    limits: &'a VoltageLimits,
    config: &'a AdmmConfig,
    solver: Solver,
    vars: ConsensusVars,
    iteration: usize,
    last: Option<UtilityUpdate>,
}

impl UtilityAgent<'_> {
    fn compute(&mut self) -> Result<()> {
        let (vars, kappa) = (&self.vars, self.config.kappa);
        self.last = Some(utility_solve(
            &self.feeder,
            self.cost,
            self.limits,
            kappa,
            |k| vars.utility_linear(k, kappa),
            &mut self.solver,
            self.iteration + 1,
        )?);
        Ok(())
    }

    fn post(&self, round: u32) -> Vec<Message> {
        let u = self.last.as_ref().expect("computed before posting");
        (0..u.pbar.len())
            .map(|k| Message {
                from: AgentId::Utility,
                to: AgentId::Customer(k),
                round,
                payload: Payload::SetpointCopy { p: u.pbar[k], q: u.qbar[k] },
            })
            .collect()
    }

    fn receive(&mut self, inbox: &[Message], round: u32) -> Result<()> {
        let u = self.last.as_ref().expect("computed before receiving");
        self.vars.pbar.clone_from(&u.pbar);
        self.vars.qbar.clone_from(&u.qbar);
        let values = setpoint_values(inbox, self.vars.p.len(), AgentId::Utility, round)?;
        for (k, (p, q)) in values {
            self.vars.p[k] = p;
            self.vars.q[k] = q;
        }
        let n = self.vars.p.len();
        dual_update(&mut self.vars, 0..n, self.config.kappa);
        self.iteration += 1;
        Ok(())
    }
}

fn setpoint_values(inbox: &[Message], n: usize, me: AgentId, round: u32) -> Result<Vec<(usize, (f64, f64))>> {
    inbox
        .iter()
        .map(|m| match (m.from, m.payload) {
            (AgentId::Customer(h), Payload::SetpointValue { p, q }) if h < n => Ok((h, (p, q))),
            _ => Err(protocol_err(me, round, format!("unexpected message from {}", m.from))),
        })
        .collect()
}

struct CemAgent<'a> {
    a: usize,
    feeder: FeederModel,
    cost: &'a CostSpec,
    limits: &'a VoltageLimits,
    config: &'a AdmmConfig,
    partition: &'a ClusterPartition,
    solver: Solver,
    houses: Vec<usize>,
    /// Only this cluster's houses and links are ever read or written.
    state: Algorithm2State,
    last: Option<CemUpdate>,
}

impl CemAgent<'_> {
    fn me(&self) -> AgentId {
        AgentId::Cem(self.a)
    }

    fn compute(&mut self) -> Result<()> {
        self.last = Some(cem_update(
            self.a,
            &self.state,
            &self.feeder,
            self.cost,
            self.limits,
            self.partition,
            self.config,
            &mut self.solver,
        )?);
        Ok(())
    }

    fn post(&self, round: u32) -> Vec<Message> {
        let u = self.last.as_ref().expect("computed before posting");
        let borders = self.state.links[self.a].iter().zip(&u.blocks).map(|(l, b)| Message {
            from: self.me(),
            to: AgentId::Cem(l.neighbor),
            round,
            payload: Payload::BorderBlock(*b),
        });
        let copies = u.houses.iter().enumerate().map(|(i, &k)| Message {
            from: self.me(),
            to: AgentId::Customer(k),
            round,
            payload: Payload::SetpointCopy { p: u.pbar[i], q: u.qbar[i] },
        });
        borders.chain(copies).collect()
    }

    fn receive(&mut self, inbox: &[Message], round: u32) -> Result<()> {
        let me = self.me();
        let u = self.last.as_ref().expect("computed before receiving");
        let vars = &mut self.state.vars;
        for (i, &k) in u.houses.iter().enumerate() {
            vars.pbar[k] = u.pbar[i];
            vars.qbar[k] = u.qbar[i];
        }
        let mut got = 0;
        for m in inbox {
            match (m.from, m.payload) {
                (AgentId::Customer(h), Payload::SetpointValue { p, q }) if self.houses.binary_search(&h).is_ok() => {
                    vars.p[h] = p;
                    vars.q[h] = q;
                    got += 1;
                }
                (AgentId::Cem(j), Payload::BorderBlock(b)) => {
                    let link = self.state.links[self.a]
                        .iter_mut()
                        .find(|l| l.neighbor == j)
                        .ok_or_else(|| protocol_err(me, round, format!("border block from non-neighbour cem-{j}")))?;
                    link.received = b;
                    got += 1;
                }
                _ => return Err(protocol_err(me, round, format!("unexpected message from {}", m.from))),
            }
        }
        if got != self.houses.len() + self.state.links[self.a].len() {
            return Err(protocol_err(me, round, "missing setpoint or border message"));
        }
        for (link, b) in self.state.links[self.a].iter_mut().zip(&u.blocks) {
            link.own = *b;
        }
        dual_update(&mut self.state.vars, self.houses.iter().copied(), self.config.kappa);
        for link in &mut self.state.links[self.a] {
            cluster_dual_update(link, self.config.kappa);
        }
        self.state.v[self.a] = Some(u.v.clone());
        self.state.iteration += 1;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub algorithm: Algorithm,
    pub result: DispatchResult,
    pub trace: Vec<TraceRecord>,
    pub messages: Vec<Message>,
    pub config_hash: [u8; 32],
    pub warning: Option<ConvergenceWarning>,
    /// ADMM rounds after the reports; 0 for the central algorithm.
    pub iterations: usize,
    /// Net-load reports sent in round 0.
    pub reports: usize,
}

impl SimulationOutput {
    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        f.write_all(&encode_log(&self.config_hash, &self.messages))?;
        f.flush()?;
        Ok(())
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.config_hash)
    }
}

pub fn run_simulation(scenario: &Scenario, algorithm: Algorithm, config: &SimConfig) -> Result<SimulationOutput> {
    simulate(scenario, algorithm, config, None)
}

/// Re-runs the logged simulation, delivering the logged messages and
/// checking that every agent reproduces them bit for bit.
pub fn inject_message_log(
    path: impl AsRef<Path>,
    scenario: &Scenario,
    algorithm: Algorithm,
    config: &SimConfig,
) -> Result<SimulationOutput> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let (hash, messages) =
        decode_log(&bytes).map_err(|msg| OidError::Format { path: path.display().to_string(), msg })?;
    if hash != config_hash(scenario, algorithm, config) {
        return Err(OidError::Format {
            path: path.display().to_string(),
            msg: "config hash mismatch: the log was produced with a different scenario or configuration".into(),
        });
    }
    let n = messages.len();
    let out = simulate(scenario, algorithm, config, Some(messages))?;
    if out.messages.len() != n {
        return Err(OidError::Format {
            path: path.display().to_string(),
            msg: format!("log holds {n} messages, replay used {}", out.messages.len()),
        });
    }
    Ok(out)
}

fn simulate(scenario: &Scenario, algorithm: Algorithm, config: &SimConfig, replay: Option<Vec<Message>>) -> Result<SimulationOutput> {
    scenario.validate()?;
    config.admm.check()?;
    let feeder = scenario.feeder_at(config.slot)?;
    let cost = scenario.cost_spec()?;
    let limits = scenario.limits();
    let n = feeder.n_houses();
    let hash = config_hash(scenario, algorithm, config);

    let partition = match algorithm {
        Algorithm::Doid2 => {
            let raw = config.partition.as_ref().or(scenario.partition.as_ref()).ok_or_else(|| {
                OidError::Partition("the clustered algorithm needs a partition".into())
            })?;
            Some(validate_partition(&feeder, raw)?)
        }
        _ => None,
    };
    let manager: Vec<AgentId> = match &partition {
        Some(p) => feeder.houses().iter().map(|&node| AgentId::Cem(p.owner(node))).collect(),
        None => vec![AgentId::Utility; n],
    };
    let neighbors = partition.as_ref().map_or_else(Vec::new, |p| {
        p.neighbors.iter().map(|nb| nb.iter().copied().collect()).collect()
    });
    let mut bus = Bus::new(Protocol { algorithm, manager: manager.clone(), neighbors });
    bus.replay = replay;

    let mut customers: Vec<CustomerAgent> = (0..n)
        .map(|k| CustomerAgent {
            id: k,
            manager: manager[k],
            payload: *feeder.house(k),
            a: cost.a[k],
            b: cost.b[k],
            vars: ConsensusVars::zeros(1),
            pending: None,
        })
        .collect();

    // round 0: every customer reports to its manager
    for c in &customers {
        bus.send(c.report())?;
    }
    let reports = bus.barrier()?;
    let base = static_feeder(&feeder)?;
    let mut trace = Vec::new();

    let kappa = config.admm.kappa;
    let mut warning = None;
    let (result, iterations) = match algorithm {
        Algorithm::Central => {
            let inbox = bus.take_inbox(AgentId::Utility);
            let local = feeder_from_reports(&base, &inbox, AgentId::Utility, 0)?;
            let t = Instant::now();
            let r = solve_central_with(&local, &cost, &limits, &config.admm.solve)?;
            trace.push(TraceRecord {
                round: 1,
                house_errors: vec![0.0; n],
                border_errors: Vec::new(),
                objective: r.objective,
                residual: 0.0,
                wall_time_s: t.elapsed().as_secs_f64(),
                messages: 0,
            });
            (r, 0)
        }
        Algorithm::Doid1 => {
            let inbox = bus.take_inbox(AgentId::Utility);
            let mut utility = UtilityAgent {
                feeder: feeder_from_reports(&base, &inbox, AgentId::Utility, 0)?,
                cost: &cost,
                limits: &limits,
                config: &config.admm,
                solver: Solver::new(config.admm.solve.settings()),
                vars: ConsensusVars::zeros(n),
                iteration: 0,
                last: None,
            };
            // what the bus observes: copies and values as they travel
            let mut seen = ConsensusVars::zeros(n);
            loop {
                let t = Instant::now();
                let round = bus.round();
                let (u, c) = rayon::join(
                    || utility.compute(),
                    || customers.par_iter_mut().try_for_each(|c| c.compute(kappa)),
                );
                u?;
                c?;
                for m in utility.post(round) {
                    bus.send(m)?;
                }
                for c in &customers {
                    bus.send(c.post(round))?;
                }
                let count = bus.barrier()?;
                let inbox = bus.take_inbox(AgentId::Utility);
                utility.receive(&inbox, round)?;
                for c in customers.iter_mut() {
                    let inbox = bus.take_inbox(c.me());
                    c.receive(&inbox, round, kappa)?;
                }
                let (residual, step) = observe(&mut seen, &bus.log()[bus.log().len() - count..]);
                let loss = utility.last.as_ref().expect("solved").result.breakdown.loss;
                trace.push(record(round, &seen, Vec::new(), objective(&cost, loss, &seen), residual, t, count));
                if config.admm.converged(residual, step) {
                    break;
                }
                if utility.iteration >= config.admm.max_iters {
                    warning = Some(ConvergenceWarning { iterations: utility.iteration, final_error: residual });
                    break;
                }
            }
            let last = utility.last.take().expect("at least one round").result;
            (finish(last, &utility.vars, &cost, config.admm.solve.ratio_tol), utility.iteration)
        }
        Algorithm::Doid2 => {
            let partition = partition.as_ref().expect("validated above");
            let mut cems = Vec::with_capacity(partition.len());
            for a in 0..partition.len() {
                let inbox = bus.take_inbox(AgentId::Cem(a));
                cems.push(CemAgent {
                    a,
                    feeder: feeder_from_reports(&base, &inbox, AgentId::Cem(a), 0)?,
                    cost: &cost,
                    limits: &limits,
                    config: &config.admm,
                    partition,
                    solver: Solver::new(config.admm.solve.settings()),
                    houses: partition.houses(a, &feeder),
                    state: Algorithm2State::new(partition, n),
                    last: None,
                });
            }
            let mut seen = Algorithm2State::new(partition, n);
            loop {
                let t = Instant::now();
                let round = bus.round();
                let (u, c) = rayon::join(
                    || cems.par_iter_mut().try_for_each(CemAgent::compute),
                    || customers.par_iter_mut().try_for_each(|c| c.compute(kappa)),
                );
                u?;
                c?;
                // border exchange first, then setpoints
                let posts: Vec<Vec<Message>> = cems.iter().map(|c| c.post(round)).collect();
                for m in posts.iter().flatten().filter(|m| matches!(m.payload, Payload::BorderBlock(_))) {
                    bus.send(*m)?;
                }
                for m in posts.iter().flatten().filter(|m| !matches!(m.payload, Payload::BorderBlock(_))) {
                    bus.send(*m)?;
                }
                for c in &customers {
                    bus.send(c.post(round))?;
                }
                let count = bus.barrier()?;
                for c in cems.iter_mut() {
                    let inbox = bus.take_inbox(c.me());
                    c.receive(&inbox, round)?;
                }
                for c in customers.iter_mut() {
                    let inbox = bus.take_inbox(c.me());
                    c.receive(&inbox, round, kappa)?;
                }
                let (residual, step) = observe_clusters(&mut seen, partition, &bus.log()[bus.log().len() - count..]);
                let loss: f64 = cems.iter().map(|c| c.last.as_ref().expect("solved").result.breakdown.loss).sum();
                let borders = border_errors(&seen, partition);
                trace.push(record(round, &seen.vars, borders, objective(&cost, loss, &seen.vars), residual, t, count));
                let iteration = cems[0].state.iteration;
                if config.admm.converged(residual, step) {
                    break;
                }
                if iteration >= config.admm.max_iters {
                    warning = Some(ConvergenceWarning { iterations: iteration, final_error: residual });
                    break;
                }
            }
            let updates: Vec<CemUpdate> = cems.iter_mut().map(|c| c.last.take().expect("solved")).collect();
            let r = assemble_result(&feeder, partition, &updates, &seen.vars, &cost, config.admm.solve.ratio_tol);
            (r, cems[0].state.iteration)
        }
    };
    if let Some(w) = &warning {
        log::warn!("{algorithm}: {w}");
    }
    if let Some(expected) = &bus.replay {
        if expected.len() != bus.log.len() {
            return Err(protocol_err(AgentId::Utility, bus.round, format!(
                "replay stopped after {} of {} logged messages",
                bus.log.len(),
                expected.len()
            )));
        }
    }
    Ok(SimulationOutput {
        algorithm,
        result,
        trace,
        messages: bus.log,
        config_hash: hash,
        warning,
        iterations,
        reports,
    })
}

fn record(
    round: u32,
    vars: &ConsensusVars,
    border_errors: Vec<BorderError>,
    objective: f64,
    residual: f64,
    t: Instant,
    messages: usize,
) -> TraceRecord {
    let house_errors =
        (0..vars.p.len()).map(|k| (vars.pbar[k] - vars.p[k]).abs().max((vars.qbar[k] - vars.q[k]).abs())).collect();
    TraceRecord { round, house_errors, border_errors, objective, residual, wall_time_s: t.elapsed().as_secs_f64(), messages }
}

fn objective(cost: &CostSpec, loss: f64, vars: &ConsensusVars) -> f64 {
    let reg: f64 = vars.p.iter().zip(&vars.q).map(|(p, q)| p.hypot(*q)).sum();
    let customer: f64 = vars.p.iter().enumerate().map(|(k, &p)| cost.customer_cost(k, p)).sum();
    cost.loss_weight * loss + cost.lambda * reg + customer
}

/// Updates the observed copies and values from one round of messages;
/// returns the squared residual and squared setpoint step.
fn observe(seen: &mut ConsensusVars, round: &[Message]) -> (f64, f64) {
    let mut values = vec![OperatingPoint::new(0.0, 0.0); seen.p.len()];
    let mut houses = Vec::new();
    for m in round {
        match (m.from, m.to, m.payload) {
            (_, AgentId::Customer(h), Payload::SetpointCopy { p, q }) => {
                seen.pbar[h] = p;
                seen.qbar[h] = q;
            }
            (AgentId::Customer(h), _, Payload::SetpointValue { p, q }) => {
                values[h] = OperatingPoint::new(p, q);
                houses.push(h);
            }
            _ => {}
        }
    }
    houses.sort_unstable();
    let fresh: Vec<OperatingPoint> = houses.iter().map(|&h| values[h]).collect();
    let step = step_sq(seen, &fresh, &houses);
    for &h in &houses {
        seen.p[h] = values[h].p_c;
        seen.q[h] = values[h].q_c;
    }
    (seen.residual_sq(0..seen.p.len()), step)
}

fn observe_clusters(seen: &mut Algorithm2State, partition: &ClusterPartition, round: &[Message]) -> (f64, f64) {
    let (_, mut step) = observe(&mut seen.vars, round);
    for m in round {
        if let (AgentId::Cem(a), AgentId::Cem(j), Payload::BorderBlock(b)) = (m.from, m.to, m.payload) {
            let link = seen.links[a].iter_mut().find(|l| l.neighbor == j).expect("protocol checked");
            step += block_diff_sq(&link.own, &b);
            link.own = b;
            let back = seen.links[j].iter_mut().find(|l| l.neighbor == a).expect("symmetric links");
            back.received = b;
        }
    }
    (combined_residual(seen, partition), step)
}

const MAGIC: &[u8; 8] = b"OIDMSG01";

fn agent_bytes(id: AgentId) -> [u8; 5] {
    let (kind, idx) = match id {
        AgentId::Utility => (0u8, 0u32),
        AgentId::Cem(a) => (1, a as u32),
        AgentId::Customer(h) => (2, h as u32),
    };
    let mut out = [kind, 0, 0, 0, 0];
    out[1..].copy_from_slice(&idx.to_le_bytes());
    out
}

/// Header `OIDMSG01` plus the 32-byte config hash, then records of
/// `u32 length` followed by `u32 round, sender, receiver, u8 tag, f64…`, all
/// little-endian; an agent id is a kind byte (0 utility, 1 CEM, 2 customer)
/// and a `u32` index.
pub fn encode_log(hash: &[u8; 32], messages: &[Message]) -> Vec<u8> {
    let mut out = Vec::with_capacity(40 + messages.len() * 35);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(hash);
    for m in messages {
        let floats = m.payload.floats();
        let len = 4 + 5 + 5 + 1 + 8 * floats.len();
        out.extend_from_slice(&(len as u32).to_le_bytes());
        out.extend_from_slice(&m.round.to_le_bytes());
        out.extend_from_slice(&agent_bytes(m.from));
        out.extend_from_slice(&agent_bytes(m.to));
        out.push(m.payload.tag());
        for x in floats {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Inverse of [`encode_log`]; errors name the byte offset of the problem.
pub fn decode_log(bytes: &[u8]) -> std::result::Result<([u8; 32], Vec<Message>), String> {
    if bytes.len() < 40 {
        return Err(format!("truncated header at offset {}", bytes.len()));
    }
    if &bytes[..8] != MAGIC {
        return Err("offset 0: not a message log".into());
    }
    let hash: [u8; 32] = bytes[8..40].try_into().expect("32 bytes");
    let mut messages = Vec::new();
    let mut at = 40;
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let agent_at = |i: usize| -> std::result::Result<AgentId, String> {
        let idx = u32_at(i + 1) as usize;
        match bytes[i] {
            0 if idx == 0 => Ok(AgentId::Utility),
            1 => Ok(AgentId::Cem(idx)),
            2 => Ok(AgentId::Customer(idx)),
            k => Err(format!("offset {i}: bad agent kind {k}")),
        }
    };
    while at < bytes.len() {
        if bytes.len() - at < 4 {
            return Err(format!("truncated record length at offset {at}"));
        }
        let len = u32_at(at) as usize;
        let body = at + 4;
        if bytes.len() - body < len {
            return Err(format!("truncated record at offset {at}: {len} bytes announced, {} left", bytes.len() - body));
        }
        if len < 15 {
            return Err(format!("record at offset {at} is too short"));
        }
        let tag = bytes[body + 14];
        let arity = Payload::arity(tag).ok_or_else(|| format!("offset {}: unknown payload tag {tag}", body + 14))?;
        if len != 15 + 8 * arity {
            return Err(format!("record at offset {at}: length {len} does not fit payload {}", tag_name(tag)));
        }
        let floats: Vec<f64> = (0..arity)
            .map(|i| f64::from_le_bytes(bytes[body + 15 + 8 * i..body + 23 + 8 * i].try_into().expect("8 bytes")))
            .collect();
        messages.push(Message {
            round: u32_at(body),
            from: agent_at(body + 4)?,
            to: agent_at(body + 9)?,
            payload: Payload::from_floats(tag, &floats).expect("tag checked"),
        });
        at = body + len;
    }
    Ok((hash, messages))
}
