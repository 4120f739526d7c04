//! Utility↔customer consensus ADMM.
//!
//! The utility keeps copies `(P̄, Q̄)` of every setpoint and solves the network
//! SDP with a proximal consensus term; each customer solves a 2-D QP over its
//! inverter region; one pair of multipliers `(γ, μ)` per house is shared by
//! both sides.

use oid_conic::{CMatrix, ConicProgram, LinExpr, Solver};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::central::{require_optimal, summarize, CostSpec, DispatchResult, SolveOptions, VoltageLimits};
use crate::error::{model, OidError, Result};
use crate::feeder::{FeederModel, InverterSpec, OperatingPoint};
use crate::sdp::{add_network, NetworkVars, NetworkView};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    pub kappa: f64,
    /// Threshold on `‖p̄ − p‖² + ‖q̄ − q‖²`.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Optional second test on successive customer setpoints,
    /// `‖p[i+1] − p[i]‖² + ‖q[i+1] − q[i]‖² ≤ step_epsilon`; guards against
    /// stopping on a small consensus gap while the iterates still drift.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_epsilon: Option<f64>,
    pub solve: SolveOptions,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self { kappa: 1.0, epsilon: 1e-6, max_iters: 500, step_epsilon: None, solve: SolveOptions::default() }
    }
}

impl AdmmConfig {
    pub(crate) fn check(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.epsilon > 0.0 && self.max_iters > 0) {
            return model("admm needs kappa > 0, epsilon > 0 and max_iters > 0");
        }
        if self.step_epsilon.is_some_and(|e| !(e > 0.0)) {
            return model("step_epsilon must be positive");
        }
        Ok(())
    }
}

impl AdmmConfig {
    pub(crate) fn converged(&self, residual: f64, step: f64) -> bool {
        residual <= self.epsilon && self.step_epsilon.is_none_or(|e| step <= e)
    }
}

pub(crate) fn step_sq(vars: &ConsensusVars, new: &[OperatingPoint], houses: &[usize]) -> f64 {
    houses
        .iter()
        .zip(new)
        .map(|(&k, o)| (o.p_c - vars.p[k]).powi(2) + (o.q_c - vars.q[k]).powi(2))
        .sum()
}

/// Per-house copies and multipliers. Index `k` is the `k`-th house.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConsensusVars {
    pub pbar: Vec<f64>,
    pub qbar: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub gamma: Vec<f64>,
    pub mu: Vec<f64>,
}

impl ConsensusVars {
    pub fn zeros(n: usize) -> Self {
        Self {
            pbar: vec![0.0; n],
            qbar: vec![0.0; n],
            p: vec![0.0; n],
            q: vec![0.0; n],
            gamma: vec![0.0; n],
            mu: vec![0.0; n],
        }
    }

    /// `‖p̄ − p‖² + ‖q̄ − q‖²` over the given houses.
    pub fn residual_sq(&self, houses: impl IntoIterator<Item = usize>) -> f64 {
        houses
            .into_iter()
            .map(|k| (self.pbar[k] - self.p[k]).powi(2) + (self.qbar[k] - self.q[k]).powi(2))
            .sum()
    }

    /// Linear coefficients of the utility's consensus term.
    pub fn utility_linear(&self, k: usize, kappa: f64) -> (f64, f64) {
        (
            self.gamma[k] - 0.5 * kappa * (self.pbar[k] + self.p[k]),
            self.mu[k] - 0.5 * kappa * (self.qbar[k] + self.q[k]),
        )
    }

    /// Linear coefficients (with the sign of a reward) of the customer QP.
    pub fn customer_linear(&self, k: usize, kappa: f64) -> (f64, f64) {
        (
            self.gamma[k] + 0.5 * kappa * (self.pbar[k] + self.p[k]),
            self.mu[k] + 0.5 * kappa * (self.qbar[k] + self.q[k]),
        )
    }
}

/// One completed iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// State after the dual update.
    pub vars: ConsensusVars,
    /// Termination quantity for this iteration.
    pub residual: f64,
    /// `‖p[i] − p[i−1]‖² + ‖q[i] − q[i−1]‖²` over customer setpoints.
    pub step: f64,
    pub solver_iterations: usize,
}

impl IterationRecord {
    /// `|P_c,h − P̄_c,h|` per house.
    pub fn p_errors(&self) -> Vec<f64> {
        self.vars.pbar.iter().zip(&self.vars.p).map(|(a, b)| (a - b).abs()).collect()
    }

    pub fn q_errors(&self) -> Vec<f64> {
        self.vars.qbar.iter().zip(&self.vars.q).map(|(a, b)| (a - b).abs()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Algorithm1State {
    pub iteration: usize,
    pub vars: ConsensusVars,
    /// `V` from the last utility solve.
    pub v: Option<CMatrix>,
    pub history: Vec<IterationRecord>,
}

impl Algorithm1State {
    pub fn new(n_houses: usize) -> Self {
        Self { iteration: 0, vars: ConsensusVars::zeros(n_houses), v: None, history: Vec::new() }
    }
}

/// Reported when the iteration cap is hit before the residual drops below ε.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceWarning {
    pub iterations: usize,
    pub final_error: f64,
}

impl std::fmt::Display for ConvergenceWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "no convergence after {} iterations (residual {:.3e})", self.iterations, self.final_error)
    }
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome<S> {
    pub result: DispatchResult,
    pub state: S,
    pub warning: Option<ConvergenceWarning>,
}

#[derive(Debug, Clone)]
pub struct UtilityUpdate {
    pub v: CMatrix,
    pub pbar: Vec<f64>,
    pub qbar: Vec<f64>,
    pub(crate) result: DispatchResult,
}

/// Network SDP with the proximal consensus term
/// `κ/2 (P̄² + Q̄²) + lin_p·P̄ + lin_q·Q̄` for every house in `view`.
pub(crate) fn copy_program(
    feeder: &FeederModel,
    view: &NetworkView,
    cost: &CostSpec,
    limits: &VoltageLimits,
    kappa: f64,
    linear: impl Fn(usize) -> (f64, f64),
) -> (ConicProgram, NetworkVars) {
    let mut prog = ConicProgram::new();
    let net = add_network(&mut prog, feeder, view, cost, limits);
    for (i, &k) in net.houses.iter().enumerate() {
        let (lp, lq) = linear(k);
        prog.add_square(net.p[i], 0.5 * kappa);
        prog.add_square(net.q[i], 0.5 * kappa);
        prog.add_objective(&LinExpr::new().with(net.p[i], lp).with(net.q[i], lq));
    }
    (prog, net)
}

/// Utility step: minimizes the network cost plus the consensus term, no inverter region.
pub fn utility_update(
    state: &Algorithm1State,
    feeder: &FeederModel,
    cost: &CostSpec,
    limits: &VoltageLimits,
    config: &AdmmConfig,
    solver: &mut Solver,
) -> Result<UtilityUpdate> {
    let vars = &state.vars;
    let linear = |k: usize| vars.utility_linear(k, config.kappa);
    utility_solve(feeder, cost, limits, config.kappa, linear, solver, state.iteration + 1)
}

pub(crate) fn utility_solve(
    feeder: &FeederModel,
    cost: &CostSpec,
    limits: &VoltageLimits,
    kappa: f64,
    linear: impl Fn(usize) -> (f64, f64),
    solver: &mut Solver,
    iteration: usize,
) -> Result<UtilityUpdate> {
    let view = NetworkView::full(feeder);
    let (prog, net) = copy_program(feeder, &view, cost, limits, kappa, linear);
    let context = format!("utility, iteration {iteration}");
    let sol = solver.solve(&prog)?;
    require_optimal(&sol, &context)?;
    let pbar: Vec<f64> = net.p.iter().map(|&v| sol.value(v)).collect();
    let qbar: Vec<f64> = net.q.iter().map(|&v| sol.value(v)).collect();
    let setpoints = pbar.iter().zip(&qbar).map(|(&p, &q)| OperatingPoint::new(p, q)).collect();
    let result = summarize(&sol, &net, setpoints, cost);
    Ok(UtilityUpdate { v: result.v_matrix.clone(), pbar, qbar, result })
}

/// Customer step: exact minimizer of
/// `a P² + b P + κ/2 (P² + Q²) − lin_p·P − lin_q·Q` over the inverter region,
/// where `lin_p = γ + κ/2 (P̄[i] + P[i])` and `lin_q` likewise.
pub fn customer_update(spec: &InverterSpec, a: f64, b: f64, kappa: f64, lin_p: f64, lin_q: f64) -> Result<OperatingPoint> {
    if spec.p_av > spec.s * (1.0 + 1e-12) || spec.s < 0.0 || spec.p_av < 0.0 {
        return model(format!("inverter region is malformed: P_av = {}, S = {}", spec.p_av, spec.s));
    }
    let wp = a + 0.5 * kappa;
    let wq = 0.5 * kappa;
    if !(wp > 0.0 && wq > 0.0) {
        return model("customer QP needs kappa > 0 and a ≥ 0");
    }
    // objective = wp (P − p0)² + wq (Q − q0)² + const
    let p0 = (lin_p - b) / (2.0 * wp);
    let q0 = lin_q / (2.0 * wq);
    Ok(weighted_projection(spec, wp, wq, p0, q0))
}

/// Minimizes `wp (P − p0)² + wq (Q − q0)²` over the region by enumerating the
/// interior stationary point, the minimizer on each boundary curve and the
/// vertices; the best feasible candidate is optimal because the problem is
/// convex and strictly so.
pub(crate) fn weighted_projection(spec: &InverterSpec, wp: f64, wq: f64, p0: f64, q0: f64) -> OperatingPoint {
    let (pav, s) = (spec.p_av, spec.s);
    let tan = spec.theta.tan();
    let sloped = tan.is_finite() && tan < 1e12;
    let f = |p: f64, q: f64| wp * (p - p0).powi(2) + wq * (q - q0).powi(2);
    let mut cands: Vec<(f64, f64)> = vec![(p0, q0), (0.0, q0), (pav, q0), (pav, 0.0), (0.0, 0.0)];

    let room = (s * s - pav * pav).max(0.0).sqrt();
    cands.extend([(0.0, room), (0.0, -room), (pav, s), (pav, -s)]);
    if sloped {
        // along Q = ±t(Pav − P): minimize wp (P − p0)² + wq (±t(Pav − P) − q0)²
        for sign in [1.0, -1.0] {
            let st = sign * tan;
            let p = (wp * p0 + wq * st * (st * pav - q0)) / (wp + wq * st * st);
            cands.push((p, st * (pav - p)));
            cands.push((0.0, st * pav));
            let x = s * spec.theta.cos();
            cands.push((pav - x, sign * s * spec.theta.sin()));
        }
    }
    // circle (Pav − P)² + Q² = S² with a nonnegative multiplier
    let x0 = pav - p0;
    let h = |nu: f64| (wp * x0 / (wp + nu)).powi(2) + (wq * q0 / (wq + nu)).powi(2) - s * s;
    if h(0.0) > 0.0 {
        let (mut lo, mut hi) = (0.0, 1.0);
        while h(hi) > 0.0 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if h(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-16 * hi {
                break;
            }
        }
        let nu = 0.5 * (lo + hi);
        let x = wp * x0 / (wp + nu);
        let q = wq * q0 / (wq + nu);
        // renormalize onto the circle
        let r = x.hypot(q);
        let (x, q) = if r > 0.0 { (x * s / r, q * s / r) } else { (x, q) };
        cands.push((pav - x, q));
    }
    let scale = 1.0 + s;
    let tol = 1e-12 * scale;
    let feasible = |p: f64, q: f64| {
        let x = pav - p;
        p >= -tol
            && x >= -tol
            && x * x + q * q <= s * s + tol * scale
            && (!sloped || q.abs() <= tan * x + tol)
    };
    let best = cands
        .into_iter()
        .filter(|&(p, q)| p.is_finite() && q.is_finite() && feasible(p, q))
        .map(|(p, q)| (p.clamp(0.0, pav), q))
        .min_by(|a, b| f(a.0, a.1).total_cmp(&f(b.0, b.1)))
        .unwrap_or((pav, 0.0));
    OperatingPoint::new(best.0, best.1)
}

/// `γ += κ/2 (P̄ − P)`, `μ += κ/2 (Q̄ − Q)` for the given houses.
pub fn dual_update(vars: &mut ConsensusVars, houses: impl IntoIterator<Item = usize>, kappa: f64) {
    for k in houses {
        vars.gamma[k] += 0.5 * kappa * (vars.pbar[k] - vars.p[k]);
        vars.mu[k] += 0.5 * kappa * (vars.qbar[k] - vars.q[k]);
    }
}

/// All customer updates of one iteration, from the pre-iteration state.
pub(crate) fn customer_round(feeder: &FeederModel, cost: &CostSpec, kappa: f64, vars: &ConsensusVars, houses: &[usize]) -> Result<Vec<OperatingPoint>> {
    houses
        .par_iter()
        .map(|&k| {
            let (lp, lq) = vars.customer_linear(k, kappa);
            customer_update(&feeder.house(k).inverter, cost.a[k], cost.b[k], kappa, lp, lq)
        })
        .collect()
}

pub fn run_algorithm1(
    feeder: &FeederModel,
    cost: &CostSpec,
    limits: &VoltageLimits,
    config: &AdmmConfig,
) -> Result<AdmmOutcome<Algorithm1State>> {
    config.check()?;
    cost.check(feeder.n_houses())?;
    limits.check()?;
    let n = feeder.n_houses();
    let all: Vec<usize> = (0..n).collect();
    let mut state = Algorithm1State::new(n);
    let mut solver = Solver::new(config.solve.settings());
    let mut warning = None;
    let last = loop {
        let (utility, customers) = rayon::join(
            || utility_update(&state, feeder, cost, limits, config, &mut solver),
            || customer_round(feeder, cost, config.kappa, &state.vars, &all),
        );
        let utility = utility?;
        let customers = customers?;
        state.iteration += 1;
        let vars = &mut state.vars;
        vars.pbar = utility.pbar;
        vars.qbar = utility.qbar;
        let step = step_sq(vars, &customers, &all);
        vars.p = customers.iter().map(|s| s.p_c).collect();
        vars.q = customers.iter().map(|s| s.q_c).collect();
        dual_update(vars, all.iter().copied(), config.kappa);
        let residual = vars.residual_sq(all.iter().copied());
        log::debug!("consensus iteration {}: residual {residual:.3e}", state.iteration);
        state.history.push(IterationRecord {
            iteration: state.iteration,
            vars: vars.clone(),
            residual,
            step,
            solver_iterations: utility.result.solver_iterations,
        });
        state.v = Some(utility.v);
        if config.converged(residual, step) {
            break utility.result;
        }
        if state.iteration >= config.max_iters {
            let w = ConvergenceWarning { iterations: state.iteration, final_error: residual };
            log::warn!("consensus ADMM: {w}");
            warning = Some(w);
            break utility.result;
        }
    };
    let result = finish(last, &state.vars, cost, config.solve.ratio_tol);
    Ok(AdmmOutcome { result, state, warning })
}

/// Final result: customer-side setpoints with the last network solution.
pub(crate) fn finish(mut r: DispatchResult, vars: &ConsensusVars, cost: &CostSpec, ratio_tol: f64) -> DispatchResult {
    r.setpoints = vars.p.iter().zip(&vars.q).map(|(&p, &q)| OperatingPoint::new(p, q)).collect();
    r.breakdown.regularizer = cost.lambda * r.setpoints.iter().map(OperatingPoint::norm).sum::<f64>();
    r.breakdown.customer = r.setpoints.iter().enumerate().map(|(k, s)| cost.customer_cost(k, s.p_c)).sum();
    r.objective = cost.loss_weight * r.breakdown.loss + r.breakdown.regularizer + r.breakdown.customer;
    if !(r.rank_ratio <= ratio_tol) {
        r.voltages = None;
    }
    r
}

/// The unsimplified iteration with separate utility/customer multipliers
/// `γ̄, γ, μ̄, μ` and explicit auxiliary variables `x, y`; kept as a reference
/// for the simplified loop above.
pub mod reference {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Default)]
    pub struct FourDualVars {
        pub pbar: Vec<f64>,
        pub qbar: Vec<f64>,
        pub p: Vec<f64>,
        pub q: Vec<f64>,
        pub x: Vec<f64>,
        pub y: Vec<f64>,
        pub gamma_bar: Vec<f64>,
        pub gamma: Vec<f64>,
        pub mu_bar: Vec<f64>,
        pub mu: Vec<f64>,
    }

    /// Runs exactly `iterations` steps from zero initialization and returns the
    /// state after each one.
    pub fn run_four_dual(
        feeder: &FeederModel,
        cost: &CostSpec,
        limits: &VoltageLimits,
        config: &AdmmConfig,
        iterations: usize,
    ) -> Result<Vec<FourDualVars>> {
        config.check()?;
        let n = feeder.n_houses();
        let kappa = config.kappa;
        let z = vec![0.0; n];
        let mut s = FourDualVars {
            pbar: z.clone(),
            qbar: z.clone(),
            p: z.clone(),
            q: z.clone(),
            x: z.clone(),
            y: z.clone(),
            gamma_bar: z.clone(),
            gamma: z.clone(),
            mu_bar: z.clone(),
            mu: z,
        };
        let mut solver = Solver::new(config.solve.settings());
        let mut out = Vec::with_capacity(iterations);
        for it in 1..=iterations {
            // S1, utility: γ̄ P̄ + κ/2 (P̄ − x)²  →  κ/2 P̄² + (γ̄ − κx) P̄
            let u = utility_solve(
                feeder,
                cost,
                limits,
                kappa,
                |k| (s.gamma_bar[k] - kappa * s.x[k], s.mu_bar[k] - kappa * s.y[k]),
                &mut solver,
                it,
            )?;
            // S1, customers: −γ P + κ/2 (x − P)²  →  κ/2 P² − (γ + κx) P
            let c: Vec<OperatingPoint> = (0..n)
                .map(|k| {
                    customer_update(
                        &feeder.house(k).inverter,
                        cost.a[k],
                        cost.b[k],
                        kappa,
                        s.gamma[k] + kappa * s.x[k],
                        s.mu[k] + kappa * s.y[k],
                    )
                })
                .collect::<Result<_>>()?;
            s.pbar = u.pbar;
            s.qbar = u.qbar;
            s.p = c.iter().map(|o| o.p_c).collect();
            s.q = c.iter().map(|o| o.q_c).collect();
            for k in 0..n {
                // S2: stationarity of the Lagrangian in x and y
                s.x[k] = 0.5 * (s.pbar[k] + s.p[k]) + (s.gamma_bar[k] - s.gamma[k]) / (2.0 * kappa);
                s.y[k] = 0.5 * (s.qbar[k] + s.q[k]) + (s.mu_bar[k] - s.mu[k]) / (2.0 * kappa);
                // S3
                s.gamma_bar[k] += kappa * (s.pbar[k] - s.x[k]);
                s.gamma[k] += kappa * (s.x[k] - s.p[k]);
                s.mu_bar[k] += kappa * (s.qbar[k] - s.y[k]);
                s.mu[k] += kappa * (s.y[k] - s.q[k]);
            }
            out.push(s.clone());
        }
        Ok(out)
    }
}

impl From<ConvergenceWarning> for OidError {
    fn from(w: ConvergenceWarning) -> Self {
        OidError::Solve { context: "admm".into(), msg: w.to_string() }
    }
}
