//! Centralized relaxed dispatch: one SDP over the whole feeder.

use oid_conic::{rank_one_factor, CMatrix, CVector, ConicProgram, ConicSolution, Settings, Solver, Status};
use serde::{Deserialize, Serialize};

use crate::error::{model, OidError, Result};
use crate::feeder::{FeederModel, OperatingPoint};
use crate::sdp::{add_customer_cost, add_network, add_region, NetworkVars, NetworkView};

/// `loss_weight·Tr(LV) + λ Σ‖(P_c,h, Q_c,h)‖ + Σ (a_h P_c,h² + b_h P_c,h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub loss_weight: f64,
    pub lambda: f64,
    /// Per-house quadratic curtailment coefficients.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl CostSpec {
    pub fn uniform(n_houses: usize, loss_weight: f64, lambda: f64, a: f64, b: f64) -> Self {
        Self { loss_weight, lambda, a: vec![a; n_houses], b: vec![b; n_houses] }
    }

    /// Loss minimization with a linear curtailment price of 0.1.
    pub fn standard(n_houses: usize, lambda: f64) -> Self {
        Self::uniform(n_houses, 1.0, lambda, 0.0, 0.1)
    }

    pub fn customer_cost(&self, k: usize, p: f64) -> f64 {
        self.a[k] * p * p + self.b[k] * p
    }

    pub(crate) fn check(&self, n_houses: usize) -> Result<()> {
        if self.a.len() != n_houses || self.b.len() != n_houses {
            return model(format!("cost coefficients must have one entry per house ({n_houses})"));
        }
        if !(self.loss_weight >= 0.0 && self.lambda >= 0.0) || self.a.iter().any(|&a| !(a >= 0.0)) {
            return model("cost weights must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageLimits {
    pub vmin: f64,
    pub vmax: f64,
}

impl VoltageLimits {
    pub fn new(vmin: f64, vmax: f64) -> Result<Self> {
        if !(vmin > 0.0 && vmin < vmax) {
            return model(format!("voltage limits need 0 < vmin < vmax, got [{vmin}, {vmax}]"));
        }
        Ok(Self { vmin, vmax })
    }

    pub(crate) fn check(&self) -> Result<()> {
        Self::new(self.vmin, self.vmax).map(|_| ())
    }
}

/// Inner-solver accuracy and the rank-one acceptance threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub ratio_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-7, max_iters: 50_000, ratio_tol: 1e-6 }
    }
}

impl SolveOptions {
    pub fn settings(&self) -> Settings {
        Settings::with_tol(self.tol, self.max_iters)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    /// Unweighted `Tr(LV)`.
    pub loss: f64,
    pub regularizer: f64,
    pub customer: f64,
}

#[derive(Debug, Clone)]
pub struct DispatchResult {
    pub v_matrix: CMatrix,
    /// Rank-one voltage phasors when `rank_ratio ≤ ratio_tol`.
    pub voltages: Option<CVector>,
    pub setpoints: Vec<OperatingPoint>,
    pub objective: f64,
    pub breakdown: CostBreakdown,
    pub rank_ratio: f64,
    pub solver_iterations: usize,
}

impl DispatchResult {
    /// `|V_n|` from the diagonal of `V`.
    pub fn magnitudes(&self) -> Vec<f64> {
        (0..self.v_matrix.nrows()).map(|n| self.v_matrix[(n, n)].re.max(0.0).sqrt()).collect()
    }
}

/// Houses whose setpoint pair has norm above `eps`.
pub fn count_dispatched(result: &DispatchResult, eps: f64) -> usize {
    result.setpoints.iter().filter(|s| s.norm() > eps).count()
}

pub(crate) struct CentralProgram {
    pub program: ConicProgram,
    pub net: NetworkVars,
}

pub fn assemble_central(feeder: &FeederModel, cost: &CostSpec, limits: &VoltageLimits) -> Result<ConicProgram> {
    Ok(build_central(feeder, cost, limits)?.program)
}

pub(crate) fn build_central(feeder: &FeederModel, cost: &CostSpec, limits: &VoltageLimits) -> Result<CentralProgram> {
    limits.check()?;
    cost.check(feeder.n_houses())?;
    let mut program = ConicProgram::new();
    let net = add_network(&mut program, feeder, &NetworkView::full(feeder), cost, limits);
    for (i, &k) in net.houses.iter().enumerate() {
        let h = feeder.house(k);
        if h.inverter.p_av > h.inverter.s * (1.0 + 1e-12) {
            return model(format!("house {}: P_av exceeds the inverter rating", feeder.houses()[k]));
        }
        add_region(&mut program, net.p[i], net.q[i], &h.inverter);
        add_customer_cost(&mut program, net.p[i], cost.a[k], cost.b[k]);
    }
    Ok(CentralProgram { program, net })
}

pub fn solve_central(feeder: &FeederModel, cost: &CostSpec, limits: &VoltageLimits) -> Result<DispatchResult> {
    solve_central_with(feeder, cost, limits, &SolveOptions::default())
}

pub fn solve_central_with(
    feeder: &FeederModel,
    cost: &CostSpec,
    limits: &VoltageLimits,
    opts: &SolveOptions,
) -> Result<DispatchResult> {
    let cp = build_central(feeder, cost, limits)?;
    let sol = Solver::new(opts.settings()).solve(&cp.program)?;
    let result = dispatch_from(&sol, &cp.net, cost, "central")?;
    check_rank(result, opts.ratio_tol, "central")
}

pub(crate) fn require_optimal(sol: &ConicSolution, context: &str) -> Result<()> {
    match sol.status {
        Status::Optimal => Ok(()),
        Status::MaxIters => Err(OidError::Solve {
            context: context.to_string(),
            msg: format!(
                "iteration cap reached after {} iterations (primal {:.2e}, dual {:.2e})",
                sol.iterations, sol.primal_residual, sol.dual_residual
            ),
        }),
        Status::Infeasible => Err(OidError::Solve { context: context.to_string(), msg: "problem is infeasible".into() }),
    }
}

/// Reads setpoints from the network copies `net.p`, `net.q`.
pub(crate) fn dispatch_from(sol: &ConicSolution, net: &NetworkVars, cost: &CostSpec, context: &str) -> Result<DispatchResult> {
    require_optimal(sol, context)?;
    let setpoints: Vec<OperatingPoint> =
        net.p.iter().zip(&net.q).map(|(&p, &q)| OperatingPoint::new(sol.value(p), sol.value(q))).collect();
    Ok(summarize(sol, net, setpoints, cost))
}

pub(crate) fn summarize(sol: &ConicSolution, net: &NetworkVars, setpoints: Vec<OperatingPoint>, cost: &CostSpec) -> DispatchResult {
    let v_matrix = net.lift.voltage_matrix(&sol.matrix(net.lift.block));
    let factor = rank_one_factor(&v_matrix).ok();
    let rank_ratio = factor.as_ref().map_or(f64::INFINITY, |f| f.ratio);
    let breakdown = CostBreakdown {
        loss: sol.eval(&net.loss),
        regularizer: cost.lambda * setpoints.iter().map(OperatingPoint::norm).sum::<f64>(),
        customer: net.houses.iter().zip(&setpoints).map(|(&k, s)| cost.customer_cost(k, s.p_c)).sum(),
    };
    DispatchResult {
        objective: cost.loss_weight * breakdown.loss + breakdown.regularizer + breakdown.customer,
        voltages: factor.map(|f| f.vector),
        v_matrix,
        setpoints,
        breakdown,
        rank_ratio,
        solver_iterations: sol.iterations,
    }
}

/// Drops the voltage vector and errors when the relaxation is not tight.
pub(crate) fn check_rank(mut result: DispatchResult, ratio_tol: f64, context: &str) -> Result<DispatchResult> {
    if !(result.rank_ratio <= ratio_tol) {
        result.voltages = None;
        return Err(OidError::Rank { context: context.to_string(), ratio: result.rank_ratio });
    }
    Ok(result)
}
