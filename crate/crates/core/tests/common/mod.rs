//! Test support: small random feeders and a brute-force dispatch oracle that
//! never touches the SDP machinery.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use oid_conic::C64;
use oid_core::central::{CostSpec, VoltageLimits};
use oid_core::feeder::{FeederModel, HouseLoad, HousePayload, InverterSpec, Line, Node, Role};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A chain `0 — 1 [— 2]` with one PV house at the far end and, on 3-node
/// chains, a middle node that is either a pole or a load without PV.
#[derive(Debug, Clone)]
pub struct Chain {
    pub z: Vec<C64>,
    pub middle_load: Option<(f64, f64)>,
    pub p_av: f64,
    pub s: f64,
    pub theta: f64,
    pub load: (f64, f64),
    pub lambda: f64,
    pub a: f64,
    pub b: f64,
    pub limits: VoltageLimits,
}

impl Chain {
    pub fn random(seed: u64, n_nodes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = (1..n_nodes)
            .map(|_| {
                let r = rng.random_range(0.1..0.5);
                C64::new(r, r * rng.random_range(0.3..1.0))
            })
            .collect();
        let middle_load = (n_nodes == 3 && rng.random_bool(0.5))
            .then(|| (rng.random_range(0.0..0.1), rng.random_range(0.0..0.05)));
        let p_av = rng.random_range(0.1..0.35);
        let p_load = rng.random_range(0.0..0.08);
        Self {
            z,
            middle_load,
            p_av,
            s: p_av * rng.random_range(1.0..1.15),
            theta: 0.85f64.acos(),
            load: (p_load, p_load * 0.9f64.acos().tan()),
            lambda: if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.4) },
            a: if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.3) },
            b: 0.1,
            limits: VoltageLimits { vmin: 0.917, vmax: 1.042 },
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.z.len() + 1
    }

    pub fn feeder(&self) -> FeederModel {
        let n = self.n_nodes();
        let house = |p_av: f64, s: f64, load: (f64, f64)| HousePayload {
            inverter: InverterSpec { s, p_av, theta: self.theta },
            load: HouseLoad { p_load: load.0, q_load: load.1 },
        };
        let nodes = (0..n)
            .map(|id| match id {
                0 => Node { id, role: Role::Slack, house: None },
                k if k == n - 1 => Node { id, role: Role::House, house: Some(house(self.p_av, self.s, self.load)) },
                _ => match self.middle_load {
                    Some(l) => Node { id, role: Role::House, house: Some(house(0.0, 0.0, l)) },
                    None => Node { id, role: Role::Pole, house: None },
                },
            })
            .collect();
        let lines = self.z.iter().enumerate().map(|(k, z)| Line::new(k, k + 1, C64::new(1.0, 0.0) / z)).collect();
        FeederModel::new(nodes, lines).unwrap()
    }

    pub fn cost(&self) -> CostSpec {
        let h = if self.middle_load.is_some() { 2 } else { 1 };
        let mut c = CostSpec::uniform(h, 1.0, self.lambda, 0.0, self.b);
        c.a[h - 1] = self.a;
        c
    }

    /// Index of the PV house among the feeder's houses.
    pub fn pv_house(&self) -> usize {
        if self.middle_load.is_some() { 1 } else { 0 }
    }

    fn ybus(&self) -> DMatrix<C64> {
        let n = self.n_nodes();
        let mut y = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
        for (k, z) in self.z.iter().enumerate() {
            let g = C64::new(1.0, 0.0) / z;
            y[(k, k)] += g;
            y[(k + 1, k + 1)] += g;
            y[(k, k + 1)] -= g;
            y[(k + 1, k)] -= g;
        }
        y
    }

    /// Complex injections at nodes `1..n` for curtailment `(p, q)`.
    fn targets(&self, p: f64, q: f64) -> Vec<C64> {
        let n = self.n_nodes();
        (1..n)
            .map(|k| {
                if k == n - 1 {
                    C64::new(self.p_av - self.load.0 - p, -self.load.1 + q)
                } else {
                    let (pl, ql) = self.middle_load.unwrap_or((0.0, 0.0));
                    C64::new(-pl, -ql)
                }
            })
            .collect()
    }
}

/// Newton power flow with the slack fixed at `v0` (real). Returns all node
/// voltages, or `None` if it fails to converge.
pub fn power_flow(y: &DMatrix<C64>, targets: &[C64], v0: f64, start: Option<&[C64]>) -> Option<Vec<C64>> {
    let n = y.nrows();
    let mut v: Vec<C64> = match start {
        Some(s) => s.to_vec(),
        None => vec![C64::new(v0, 0.0); n],
    };
    v[0] = C64::new(v0, 0.0);
    let k = n - 1;
    for _ in 0..50 {
        let current: Vec<C64> = (0..n).map(|i| (0..n).map(|j| y[(i, j)] * v[j]).sum()).collect();
        let mut f = DVector::zeros(2 * k);
        for i in 1..n {
            let s = v[i] * current[i].conj() - targets[i - 1];
            f[2 * (i - 1)] = s.re;
            f[2 * (i - 1) + 1] = s.im;
        }
        if f.amax() < 1e-13 {
            return Some(v);
        }
        // dS_i = dV_i conj(I_i) + V_i conj(Y_il dV_l)
        let mut jac = DMatrix::zeros(2 * k, 2 * k);
        for i in 1..n {
            for l in 1..n {
                for (c, dv) in [C64::new(1.0, 0.0), C64::new(0.0, 1.0)].into_iter().enumerate() {
                    let mut ds = v[i] * (y[(i, l)] * dv).conj();
                    if i == l {
                        ds += dv * current[i].conj();
                    }
                    jac[(2 * (i - 1), 2 * (l - 1) + c)] = ds.re;
                    jac[(2 * (i - 1) + 1, 2 * (l - 1) + c)] = ds.im;
                }
            }
        }
        let dx = jac.lu().solve(&f)?;
        for i in 1..n {
            v[i] -= C64::new(dx[2 * (i - 1)], dx[2 * (i - 1) + 1]);
        }
    }
    None
}

#[derive(Debug, Clone, Copy)]
pub struct OraclePoint {
    pub p: f64,
    pub q: f64,
    pub v0: f64,
    pub loss: f64,
    pub objective: f64,
}

/// Best feasible rank-one point over a `step` grid of the inverter region
/// (boundary points included). For each `(p, q)` the slack magnitude is the
/// highest one keeping every node at or below `vmax`, found by bisection:
/// node voltages rise with the slack voltage and, for fixed injections,
/// losses fall as voltages rise.
pub fn brute_force(chain: &Chain, step: f64) -> Option<OraclePoint> {
    let y = chain.ybus();
    let (vmin, vmax) = (chain.limits.vmin, chain.limits.vmax);
    let tan = chain.theta.tan();
    let mut best: Option<OraclePoint> = None;
    let np = (chain.p_av / step).ceil() as usize;
    for ip in 0..=np {
        let p = (ip as f64 * step).min(chain.p_av);
        let head = chain.p_av - p;
        let qmax = (tan * head).min((chain.s * chain.s - head * head).max(0.0).sqrt());
        let nq = (qmax / step).floor() as i64;
        let mut qs: Vec<f64> = (-nq..=nq).map(|i| i as f64 * step).collect();
        if qmax > nq as f64 * step {
            qs.push(qmax);
            qs.push(-qmax);
        }
        let mut warm: Option<Vec<C64>> = None;
        for q in qs {
            let targets = chain.targets(p, q);
            let eval = |m: f64, warm: &Option<Vec<C64>>| power_flow(&y, &targets, m, warm.as_deref());
            let Some(top) = eval(vmax, &warm) else { continue };
            let peak = |v: &[C64]| v.iter().map(|z| z.norm()).fold(0.0, f64::max);
            let v = if peak(&top) <= vmax {
                top
            } else {
                let Some(bottom) = eval(vmin, &warm) else { continue };
                if peak(&bottom) > vmax {
                    continue;
                }
                let (mut lo, mut hi) = (vmin, vmax);
                let mut at = bottom;
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    match eval(mid, &Some(at.clone())) {
                        Some(vm) if peak(&vm) <= vmax => {
                            lo = mid;
                            at = vm;
                        }
                        _ => hi = mid,
                    }
                }
                at
            };
            if v.iter().any(|z| z.norm() < vmin - 1e-12) {
                continue;
            }
            let current: Vec<C64> = (0..v.len()).map(|i| (0..v.len()).map(|j| y[(i, j)] * v[j]).sum()).collect();
            let loss: f64 = v.iter().zip(&current).map(|(vi, ii)| (vi * ii.conj()).re).sum();
            let objective = loss + chain.lambda * p.hypot(q) + chain.a * p * p + chain.b * p;
            if best.is_none_or(|b| objective < b.objective) {
                best = Some(OraclePoint { p, q, v0: v[0].re, loss, objective });
            }
            warm = Some(v);
        }
    }
    best
}

/// Feasibility and objective of `(p, q)` with slack `v0`; used to confirm the
/// oracle's choice of slack voltage.
pub fn evaluate(chain: &Chain, p: f64, q: f64, v0: f64) -> Option<f64> {
    let y = chain.ybus();
    let v = power_flow(&y, &chain.targets(p, q), v0, None)?;
    if v.iter().any(|z| z.norm() > chain.limits.vmax + 1e-12 || z.norm() < chain.limits.vmin - 1e-12) {
        return None;
    }
    let current: Vec<C64> = (0..v.len()).map(|i| (0..v.len()).map(|j| y[(i, j)] * v[j]).sum()).collect();
    let loss: f64 = v.iter().zip(&current).map(|(vi, ii)| (vi * ii.conj()).re).sum();
    Some(loss + chain.lambda * p.hypot(q) + chain.a * p * p + chain.b * p)
}
