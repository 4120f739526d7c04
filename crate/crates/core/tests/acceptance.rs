//! Acceptance suite: one PASS/FAIL line per criterion on stderr (written past
//! the test harness's capture so it shows in plain `cargo test` output).
//! Run with `cargo test -p oid-core --test acceptance`.

mod common;
#[path = "../../conic/tests/support/mod.rs"]
mod solver_oracles;

use std::io::Write as _;
use std::sync::OnceLock;

use nalgebra::SymmetricEigen;
use oid_conic::{CMatrix, C64};
use oid_core::central::{count_dispatched, solve_central_with, CostSpec, DispatchResult, SolveOptions, VoltageLimits};
use oid_core::clusters::{run_algorithm2, validate_partition, Algorithm2State};
use oid_core::consensus::reference::run_four_dual;
use oid_core::consensus::{run_algorithm1, AdmmConfig, AdmmOutcome, Algorithm1State};
use oid_core::feeder::{FeederModel, HouseLoad, HousePayload, InverterSpec, Line, Node, Role};
use oid_core::harness::{inject_message_log, run_simulation, Algorithm, Payload, SimConfig, TraceRecord};
use oid_core::scenario::{parse_scenario, Scenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// pinned tolerances
const SETPOINT_TOL: f64 = 1e-3;
const SAME_LOOP_TOL: f64 = 1e-8;
const RANK_TOL: f64 = 1e-6;
const BALANCE_TOL: f64 = 1e-4;
const DISPATCH_EPS: f64 = 1e-4;
const ENVELOPE: f64 = 1e-2;
const KAPPA_TOL: f64 = 2e-3;
const SDP_ORACLE_TOL: f64 = 1e-5;
const OPF_ORACLE_TOL: f64 = 2e-3;
const BUDGET_S: f64 = 300.0;

const SLOTS: [usize; 3] = [10, 13, 16];
const LAMBDAS: [f64; 2] = [0.8, 0.0];
const LAMBDA_GRID: [f64; 5] = [0.0, 0.2, 0.4, 0.8, 1.6];

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("{verdict} criterion {n:>2} ({name}): {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn bundled() -> &'static Scenario {
    static S: OnceLock<Scenario> = OnceLock::new();
    S.get_or_init(|| parse_scenario(include_str!("../scenarios/fig1.json")).unwrap())
}

fn with_lambda(lambda: f64) -> Scenario {
    let mut s = bundled().clone();
    s.cost.lambda = lambda;
    s
}

fn noon() -> usize {
    bundled().slot_at_hour(13.0)
}

fn central_opts() -> SolveOptions {
    SolveOptions { tol: 1e-9, ..Default::default() }
}

fn central(s: &Scenario, slot: usize) -> DispatchResult {
    solve_central_with(&s.feeder_at(slot).unwrap(), &s.cost_spec().unwrap(), &s.limits(), &central_opts()).unwrap()
}

/// Settings under which the distributed loops are run to their limit.
fn converged(kappa: f64, max_iters: usize) -> AdmmConfig {
    AdmmConfig { kappa, epsilon: 1e-12, max_iters, step_epsilon: Some(1e-12), ..AdmmConfig::default() }
}

/// Largest per-house |ΔP| or |ΔQ|.
fn gap(a: &DispatchResult, b: &DispatchResult) -> f64 {
    a.setpoints
        .iter()
        .zip(&b.setpoints)
        .map(|(x, y)| (x.p_c - y.p_c).abs().max((x.q_c - y.q_c).abs()))
        .fold(0.0, f64::max)
}

struct Doid1Run {
    slot: usize,
    lambda: f64,
    out: AdmmOutcome<Algorithm1State>,
}

/// DOID-1 at three slots and both λ of the bundled scenario.
fn doid1_runs() -> &'static [Doid1Run] {
    static R: OnceLock<Vec<Doid1Run>> = OnceLock::new();
    R.get_or_init(|| {
        let mut runs = Vec::new();
        for lambda in LAMBDAS {
            let s = with_lambda(lambda);
            for slot in SLOTS {
                let f = s.feeder_at(slot).unwrap();
                let out = run_algorithm1(&f, &s.cost_spec().unwrap(), &s.limits(), &converged(0.02, 5000)).unwrap();
                runs.push(Doid1Run { slot, lambda, out });
            }
        }
        runs
    })
}

struct Doid2Run {
    lambda: f64,
    out: AdmmOutcome<Algorithm2State>,
}

/// DOID-2 at noon on the bundled two-cluster partition.
fn doid2_runs() -> &'static [Doid2Run] {
    static R: OnceLock<Vec<Doid2Run>> = OnceLock::new();
    R.get_or_init(|| {
        LAMBDAS
            .iter()
            .map(|&lambda| {
                let s = with_lambda(lambda);
                let f = s.feeder_at(noon()).unwrap();
                let p = validate_partition(&f, s.partition.as_ref().unwrap()).unwrap();
                let cfg = AdmmConfig { epsilon: 1e-10, ..converged(1.0, 8000) };
                Doid2Run { lambda, out: run_algorithm2(&f, &s.cost_spec().unwrap(), &s.limits(), &p, &cfg).unwrap() }
            })
            .collect()
    })
}

/// Radial tree with 4–8 nodes, random spans and a random mix of houses and poles;
/// every leaf is a house.
fn random_feeder(seed: u64) -> (FeederModel, CostSpec, VoltageLimits) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(4..=8);
    let parent: Vec<usize> = (1..n).map(|k| rng.random_range(0..k)).collect();
    let is_leaf = |k: usize| !parent.contains(&k);
    let z_base = 240.0 * 240.0 / 1e4;
    let tan_load = 0.9f64.acos().tan();
    let irradiance = rng.random_range(0.5..1.0);
    let nodes: Vec<Node> = (0..n)
        .map(|id| {
            if id == 0 {
                return Node { id, role: Role::Slack, house: None };
            }
            if !is_leaf(id) && rng.random_bool(0.4) {
                return Node { id, role: Role::Pole, house: None };
            }
            let dc = rng.random_range(0.4..0.8);
            let p_load = rng.random_range(0.05..0.25);
            let house = HousePayload {
                inverter: InverterSpec { s: 1.1 * dc, p_av: 0.9 * dc * irradiance, theta: 0.85f64.acos() },
                load: HouseLoad { p_load, q_load: p_load * tan_load },
            };
            Node { id, role: Role::House, house: Some(house) }
        })
        .collect();
    let lines = parent
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let km = rng.random_range(0.02..0.06);
            Line::new(m, k + 1, C64::new(1.0, 0.0) / (C64::new(0.55, 0.35) * km / z_base))
        })
        .collect();
    let f = FeederModel::new(nodes, lines).unwrap();
    let lambda = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.4) };
    let cost = CostSpec::uniform(f.n_houses(), 1.0, lambda, 0.0, 0.1);
    (f, cost, VoltageLimits::new(0.917, 1.042).unwrap())
}

fn rank_ratio(v: &CMatrix) -> f64 {
    let mut e: Vec<f64> = SymmetricEigen::new(v.clone()).eigenvalues.iter().copied().collect();
    e.sort_by(|a, b| b.total_cmp(a));
    if e[0] > 0.0 { e[1].max(0.0) / e[0] } else { 0.0 }
}

/// Admittance matrix rebuilt here from the line list.
fn ybus(f: &FeederModel) -> CMatrix {
    let n = f.n_nodes();
    let mut y = CMatrix::zeros(n, n);
    for l in f.lines() {
        y[(l.m, l.m)] += l.y_series + l.y_shunt;
        y[(l.n, l.n)] += l.y_series + l.y_shunt;
        y[(l.m, l.n)] -= l.y_series;
        y[(l.n, l.m)] -= l.y_series;
    }
    y
}

fn injection(f: &FeederModel, r: &DispatchResult, node: usize) -> C64 {
    match f.house_index(node) {
        Some(k) => {
            let h = f.house(k);
            let sp = r.setpoints[k];
            C64::new(h.inverter.p_av - sp.p_c - h.load.p_load, sp.q_c - h.load.q_load)
        }
        None => C64::new(0.0, 0.0),
    }
}

/// Largest power mismatch over `rows` of voltages `v` given on `nodes`.
fn mismatch(f: &FeederModel, r: &DispatchResult, nodes: &[usize], v: &oid_conic::CVector, rows: &[usize]) -> f64 {
    let y = ybus(f);
    let pos = |n: usize| nodes.iter().position(|&m| m == n);
    rows.iter()
        .filter(|&&n| n != 0)
        .map(|&n| {
            let i = pos(n).unwrap();
            let current: C64 = nodes.iter().enumerate().map(|(j, &m)| y[(n, m)] * v[j]).sum();
            (v[i] * current.conj() - injection(f, r, n)).norm()
        })
        .fold(0.0, f64::max)
}

fn elapsed(t: std::time::Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

#[test]
fn criterion_01_central_equals_doid1() {
    let t = std::time::Instant::now();
    let mut worst_fig1 = 0.0f64;
    let mut unconverged = 0;
    for run in doid1_runs() {
        let c = central(&with_lambda(run.lambda), run.slot);
        worst_fig1 = worst_fig1.max(gap(&run.out.result, &c));
        unconverged += run.out.warning.is_some() as usize;
    }
    let mut worst_random = 0.0f64;
    for seed in 0..10 {
        let (f, cost, lim) = random_feeder(seed);
        let c = solve_central_with(&f, &cost, &lim, &central_opts()).unwrap();
        let d = run_algorithm1(&f, &cost, &lim, &converged(0.02, 5000)).unwrap();
        unconverged += d.warning.is_some() as usize;
        worst_random = worst_random.max(gap(&d.result, &c));
    }
    let secs = elapsed(t);
    let pass = worst_fig1 <= SETPOINT_TOL && worst_random <= SETPOINT_TOL && secs <= BUDGET_S;
    report(
        1,
        "central = DOID-1",
        pass,
        &format!(
            "max gap {worst_fig1:.2e} pu on fig1 (slots {SLOTS:?}, λ {LAMBDAS:?}), {worst_random:.2e} pu on 10 random feeders; \
             {unconverged} run(s) hit the iteration cap; {secs:.0} s"
        ),
    );
}

#[test]
fn criterion_02_central_equals_doid2() {
    let t = std::time::Instant::now();
    let mut worst = 0.0f64;
    let mut iters = Vec::new();
    for run in doid2_runs() {
        let c = central(&with_lambda(run.lambda), noon());
        worst = worst.max(gap(&run.out.result, &c));
        iters.push(run.out.state.iteration);
    }

    // one cluster holding every node is DOID-1 in disguise
    let s = with_lambda(0.0);
    let f = s.feeder_at(noon()).unwrap();
    let cost = s.cost_spec().unwrap();
    let cfg = AdmmConfig { epsilon: 1e-300, max_iters: 60, ..AdmmConfig::default() };
    let single = validate_partition(&f, &[(1..f.n_nodes()).collect()]).unwrap();
    let a2 = run_algorithm2(&f, &cost, &s.limits(), &single, &cfg).unwrap();
    let a1 = run_algorithm1(&f, &cost, &s.limits(), &cfg).unwrap();
    let same = gap(&a2.result, &a1.result);

    let secs = elapsed(t);
    let pass = worst <= SETPOINT_TOL && same <= SAME_LOOP_TOL && secs <= BUDGET_S;
    report(
        2,
        "central = DOID-2",
        pass,
        &format!(
            "two clusters: max gap {worst:.2e} pu after {iters:?} rounds (λ {LAMBDAS:?}); \
             single cluster vs DOID-1 over 60 rounds: {same:.2e}; {secs:.0} s"
        ),
    );
}

#[test]
fn criterion_03_four_dual_loop_equals_simplified_loop() {
    let chain = common::Chain::random(12, 3);
    let f = chain.feeder();
    let solve = SolveOptions { tol: 1e-10, ..Default::default() };
    let cfg = AdmmConfig { epsilon: 1e-300, max_iters: 30, solve, ..AdmmConfig::default() };
    let simple = run_algorithm1(&f, &chain.cost(), &chain.limits, &cfg).unwrap();
    let full = run_four_dual(&f, &chain.cost(), &chain.limits, &cfg, 30).unwrap();
    let mut worst = 0.0f64;
    for (s, r) in simple.state.history.iter().zip(&full) {
        let v = &s.vars;
        for k in 0..v.p.len() {
            for (a, b) in [
                (v.pbar[k], r.pbar[k]),
                (v.qbar[k], r.qbar[k]),
                (v.p[k], r.p[k]),
                (v.q[k], r.q[k]),
                (v.gamma[k], r.gamma[k]),
                (v.gamma[k], r.gamma_bar[k]),
                (v.mu[k], r.mu[k]),
                (v.mu[k], r.mu_bar[k]),
            ] {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let n = simple.state.history.len().min(full.len());
    report(3, "four-dual = simplified", worst <= SAME_LOOP_TOL && n == 30, &format!("max iterate gap {worst:.2e} over {n} rounds"));
}

#[test]
fn criterion_04_rank_one_tightness() {
    let mut worst_ratio = 0.0f64;
    let mut worst_balance = 0.0f64;
    let mut matrices = 0;
    // every V is checked for rank and, through its extracted vector, for power balance on its own rows
    let mut check = |f: &FeederModel, r: &DispatchResult, v: &CMatrix, nodes: &[usize], rows: &[usize]| {
        worst_ratio = worst_ratio.max(rank_ratio(v));
        matrices += 1;
        let x = oid_conic::rank1_extract(v, 1.0).unwrap();
        worst_balance = worst_balance.max(mismatch(f, r, nodes, &x, rows));
    };
    let all = |f: &FeederModel| (0..f.n_nodes()).collect::<Vec<_>>();
    for lambda in LAMBDA_GRID {
        let s = with_lambda(lambda);
        for slot in 0..s.n_slots() {
            let f = s.feeder_at(slot).unwrap();
            let r = central(&s, slot);
            check(&f, &r, &r.v_matrix, &all(&f), &all(&f));
        }
    }
    for run in doid1_runs() {
        let f = with_lambda(run.lambda).feeder_at(run.slot).unwrap();
        check(&f, &run.out.result, run.out.state.v.as_ref().unwrap(), &all(&f), &all(&f));
    }
    for run in doid2_runs() {
        let s = with_lambda(run.lambda);
        let f = s.feeder_at(noon()).unwrap();
        let p = validate_partition(&f, s.partition.as_ref().unwrap()).unwrap();
        for (a, v) in run.out.state.v.iter().enumerate() {
            check(&f, &run.out.result, v.as_ref().unwrap(), &p.extended[a], &p.clusters[a]);
        }
    }
    report(
        4,
        "rank-one tightness",
        worst_ratio <= RANK_TOL && worst_balance <= BALANCE_TOL,
        &format!("{matrices} matrices (central, DOID-1 V, DOID-2 Vᵃ), max λ2/λ1 {worst_ratio:.2e}, max nodal mismatch {worst_balance:.2e} pu"),
    );
}

#[test]
fn criterion_05_sparsity_monotone_in_lambda() {
    let counts: Vec<usize> =
        LAMBDA_GRID.iter().map(|&l| count_dispatched(&central(&with_lambda(l), noon()), DISPATCH_EPS)).collect();
    let monotone = counts.windows(2).all(|w| w[1] <= w[0]);
    let all_at_zero = counts[0] == bundled().n_houses();
    report(
        5,
        "group-sparsity monotonicity",
        monotone && all_at_zero,
        &format!("dispatched counts {counts:?} over λ {LAMBDA_GRID:?} at hour {}", bundled().profiles.slot_hours[noon()]),
    );
}

/// First round from which every error stays below `tol` through the end of the run.
fn settles_at(errors: &[f64]) -> Option<usize> {
    let last_bad = errors.iter().rposition(|&e| !(e < ENVELOPE));
    match last_bad {
        None => Some(1),
        Some(i) if i + 1 < errors.len() => Some(i + 2),
        _ => None,
    }
}

#[test]
fn criterion_06_convergence_envelope() {
    let mut doid1_at = Vec::new();
    let mut doid2_at = Vec::new();
    let open = AdmmConfig { epsilon: 1e-300, max_iters: 200, ..AdmmConfig::default() };
    for lambda in LAMBDAS {
        let s = with_lambda(lambda);
        let f = s.feeder_at(noon()).unwrap();
        let cost = s.cost_spec().unwrap();
        let a1 = run_algorithm1(&f, &cost, &s.limits(), &open).unwrap();
        let e1: Vec<f64> = a1
            .state
            .history
            .iter()
            .map(|h| h.p_errors().into_iter().chain(h.q_errors()).fold(0.0, f64::max))
            .collect();
        doid1_at.push(settles_at(&e1));

        let p = validate_partition(&f, s.partition.as_ref().unwrap()).unwrap();
        let a2 = run_algorithm2(&f, &cost, &s.limits(), &p, &open).unwrap();
        let e2: Vec<f64> =
            a2.state.history.iter().map(|h| h.border_errors.iter().map(|b| b.error).fold(0.0, f64::max)).collect();
        doid2_at.push(settles_at(&e2));
    }
    let pass = doid1_at.iter().all(|r| r.is_some_and(|r| r <= 50)) && doid2_at.iter().all(|r| r.is_some_and(|r| r <= 100));
    report(
        6,
        "convergence envelope",
        pass,
        &format!(
            "errors stay below {ENVELOPE:.0e} from round {doid1_at:?} (DOID-1 consensus) and {doid2_at:?} (DOID-2 borders), \
             λ {LAMBDAS:?}, κ = 1, 200 rounds"
        ),
    );
}

#[test]
fn criterion_07_kappa_robustness() {
    let t = std::time::Instant::now();
    let mut worst = 0.0f64;
    let mut iters = Vec::new();
    for lambda in LAMBDAS {
        let s = with_lambda(lambda);
        let f = s.feeder_at(noon()).unwrap();
        let cost = s.cost_spec().unwrap();
        let runs: Vec<_> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&k| run_algorithm1(&f, &cost, &s.limits(), &converged(k, 10_000)).unwrap())
            .collect();
        iters.extend(runs.iter().map(|r| r.state.iteration));
        for i in 0..runs.len() {
            for j in i + 1..runs.len() {
                worst = worst.max(gap(&runs[i].result, &runs[j].result));
            }
        }
    }
    let secs = elapsed(t);
    report(
        7,
        "κ-robustness",
        worst <= KAPPA_TOL,
        &format!("max pairwise gap {worst:.2e} pu over κ ∈ {{0.5, 1, 2}}, λ {LAMBDAS:?} (rounds {iters:?}); {secs:.0} s"),
    );
}

#[test]
fn criterion_08_solver_suite() {
    let table = solver_oracles::example_table();
    let failed: Vec<&str> = table.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let sdp = solver_oracles::random_sdp_gap(0..3);
    report(
        8,
        "conic solver suite",
        failed.is_empty() && sdp <= SDP_ORACLE_TOL,
        &format!("{}/{} examples hold {failed:?}; random SDP gap to first-order oracle {sdp:.2e}", table.len() - failed.len(), table.len()),
    );
}

#[test]
fn criterion_09_brute_force_opf_oracle() {
    let mut worst_gap = 0.0f64;
    let mut worst_setpoint = 0.0f64;
    let mut bound_ok = true;
    let chains: Vec<_> = (0..8).map(|s| common::Chain::random(s, 2)).chain((10..13).map(|s| common::Chain::random(s, 3))).collect();
    for chain in &chains {
        let r = solve_central_with(&chain.feeder(), &chain.cost(), &chain.limits, &central_opts()).unwrap();
        let o = common::brute_force(chain, 1e-3).expect("a feasible grid point");
        bound_ok &= r.objective <= o.objective + 1e-7;
        worst_gap = worst_gap.max(o.objective - r.objective);
        let s = r.setpoints[chain.pv_house()];
        worst_setpoint = worst_setpoint.max((s.p_c - o.p).abs().max((s.q_c - o.q).abs()));
    }
    report(
        9,
        "brute-force OPF oracle",
        bound_ok && worst_gap <= OPF_ORACLE_TOL && worst_setpoint <= OPF_ORACLE_TOL,
        &format!(
            "{} feeders: relaxation lower-bounds the grid oracle: {bound_ok}; max objective gap {worst_gap:.2e}, max setpoint gap {worst_setpoint:.2e} pu",
            chains.len()
        ),
    );
}

fn strip_time(t: &[TraceRecord]) -> Vec<TraceRecord> {
    t.iter()
        .cloned()
        .map(|mut r| {
            r.wall_time_s = 0.0;
            r
        })
        .collect()
}

#[test]
fn criterion_10_protocol_and_replay() {
    let s = with_lambda(0.0);
    let h = s.n_houses();
    let cfg = SimConfig::new(noon(), AdmmConfig { epsilon: 1e-300, max_iters: 10, ..AdmmConfig::default() });
    let mut notes = Vec::new();
    let mut pass = true;

    let c = run_simulation(&s, Algorithm::Central, &cfg).unwrap();
    let ok = c.messages.len() == h && c.messages.iter().all(|m| matches!(m.payload, Payload::NetLoadReport { .. }));
    notes.push(format!("central {} reports", c.messages.len()));
    pass &= ok;

    let dir = tempfile::tempdir().unwrap();
    for (algo, per_round) in [(Algorithm::Doid1, 2 * h), (Algorithm::Doid2, 2 * h + 2)] {
        let out = run_simulation(&s, algo, &cfg).unwrap();
        let counts_ok = out.reports == h && out.trace.iter().all(|r| r.messages == per_round) && out.trace.len() == 10;
        let path = dir.path().join(format!("{algo}.log"));
        out.write_log(&path).unwrap();
        let replay = inject_message_log(&path, &s, algo, &cfg).unwrap();
        let same = strip_time(&replay.trace) == strip_time(&out.trace)
            && replay.result.setpoints.iter().zip(&out.result.setpoints).all(|(x, y)| {
                (x.p_c.to_bits(), x.q_c.to_bits()) == (y.p_c.to_bits(), y.q_c.to_bits())
            });
        notes.push(format!("{algo} {per_round}/round counts ok: {counts_ok}, replay bit-identical: {same}"));
        pass &= counts_ok && same;
    }
    report(10, "protocol and replay", pass, &notes.join("; "));
}
