//! Single-phase feeder: nodes, π-model lines, PV inverters and the Hermitian
//! matrices that express injections and voltage magnitudes as traces.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use oid_conic::{CMatrix, CVector, C64};
use serde::{Deserialize, Serialize};

use crate::error::{model, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Slack,
    Pole,
    House,
}

/// Apparent rating `S`, available active power `P_av` and power-factor angle `theta`, all pu/rad.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverterSpec {
    pub s: f64,
    pub p_av: f64,
    pub theta: f64,
}

/// Curtailed active power and injected reactive power.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub p_c: f64,
    pub q_c: f64,
}

impl OperatingPoint {
    pub fn new(p_c: f64, q_c: f64) -> Self {
        Self { p_c, q_c }
    }

    pub fn norm(&self) -> f64 {
        self.p_c.hypot(self.q_c)
    }
}

/// Constant-PQ demand (pu); `q_load > 0` is consumed reactive power.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HouseLoad {
    pub p_load: f64,
    pub q_load: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HousePayload {
    pub inverter: InverterSpec,
    pub load: HouseLoad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: usize,
    pub role: Role,
    /// Present iff `role == House`.
    pub house: Option<HousePayload>,
}

/// π-model line; `y_shunt` is the shunt admittance at each end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub m: usize,
    pub n: usize,
    pub y_series: C64,
    pub y_shunt: C64,
}

impl Line {
    pub fn new(m: usize, n: usize, y_series: C64) -> Self {
        Self { m, n, y_series, y_shunt: C64::new(0.0, 0.0) }
    }
}

/// Voltage and power bases used to translate physical data into pu.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerUnitBase {
    pub v_base: f64,
    pub s_base: f64,
}

impl PerUnitBase {
    pub fn z_base(&self) -> f64 {
        self.v_base * self.v_base / self.s_base
    }

    pub fn ohm_to_pu(&self, z: C64) -> C64 {
        z / self.z_base()
    }

    pub fn watts_to_pu(&self, w: f64) -> f64 {
        w / self.s_base
    }
}

/// Hermitian matrices with `Tr(A V) = Re{V_n I_n*}`, `Tr(B V) = Im{V_n I_n*}`,
/// `Tr(M V) = |V_n|²` for `V = vvᴴ`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMatrices {
    pub a: CMatrix,
    pub b: CMatrix,
    pub m: CMatrix,
}

/// Bus admittance matrix of a connected line set.
pub fn build_admittance(lines: &[Line], n_nodes: usize) -> Result<CMatrix> {
    check_lines(lines, n_nodes)?;
    let mut y = CMatrix::zeros(n_nodes, n_nodes);
    for l in lines {
        y[(l.m, l.m)] += l.y_series + l.y_shunt;
        y[(l.n, l.n)] += l.y_series + l.y_shunt;
        y[(l.m, l.n)] -= l.y_series;
        y[(l.n, l.m)] -= l.y_series;
    }
    Ok(y)
}

fn check_lines(lines: &[Line], n_nodes: usize) -> Result<()> {
    if n_nodes == 0 {
        return model("feeder has no nodes");
    }
    let mut seen = BTreeSet::new();
    let mut adj = vec![Vec::new(); n_nodes];
    for l in lines {
        if l.m >= n_nodes || l.n >= n_nodes {
            return model(format!("line ({}, {}) references a node outside 0..{n_nodes}", l.m, l.n));
        }
        if l.m == l.n {
            return model(format!("line ({}, {}) is a self loop", l.m, l.n));
        }
        if l.y_series.norm() == 0.0 || !l.y_series.re.is_finite() || !l.y_series.im.is_finite() {
            return model(format!("line ({}, {}) has zero or non-finite series admittance", l.m, l.n));
        }
        if !seen.insert((l.m.min(l.n), l.m.max(l.n))) {
            return model(format!("duplicate line ({}, {})", l.m, l.n));
        }
        adj[l.m].push(l.n);
        adj[l.n].push(l.m);
    }
    let mut reached = vec![false; n_nodes];
    let mut queue = VecDeque::from([0usize]);
    reached[0] = true;
    while let Some(u) = queue.pop_front() {
        for &w in &adj[u] {
            if !reached[w] {
                reached[w] = true;
                queue.push_back(w);
            }
        }
    }
    if let Some(orphan) = reached.iter().position(|r| !r) {
        return model(format!("graph is disconnected: node {orphan} is unreachable from node 0"));
    }
    Ok(())
}

pub fn node_matrices(y: &CMatrix, n: usize) -> Result<NodeMatrices> {
    let d = y.nrows();
    if n >= d {
        return model(format!("node {n} out of range for a {d}-node admittance matrix"));
    }
    let mut yn = CMatrix::zeros(d, d);
    yn.set_row(n, &y.row(n));
    let yh = yn.adjoint();
    let a = (&yn + &yh).map(|z| z * 0.5);
    let b = (&yn - &yh).map(|z| z * C64::new(0.0, 0.5));
    let mut m = CMatrix::zeros(d, d);
    m[(n, n)] = C64::new(1.0, 0.0);
    Ok(NodeMatrices { a, b, m })
}

/// Membership in the inverter operating region, each inequality relaxed by `tol`.
pub fn region_contains(spec: &InverterSpec, point: &OperatingPoint, tol: f64) -> bool {
    let OperatingPoint { p_c, q_c } = *point;
    let head = spec.p_av - p_c;
    p_c >= -tol
        && p_c <= spec.p_av + tol
        && q_c * q_c <= spec.s * spec.s - head * head + tol
        && q_c.abs() <= spec.theta.tan() * head + tol
}

/// `L = Σ Re{y_mn}(e_m − e_n)(e_m − e_n)ᵀ`, so that `Tr(L vvᴴ)` is the series loss.
pub fn loss_matrix(lines: &[Line], n_nodes: usize) -> Result<DMatrix<f64>> {
    check_lines(lines, n_nodes)?;
    let mut l = DMatrix::zeros(n_nodes, n_nodes);
    for line in lines {
        add_line_loss(&mut l, line, 1.0);
    }
    Ok(l)
}

pub(crate) fn add_line_loss(l: &mut DMatrix<f64>, line: &Line, weight: f64) {
    let g = weight * line.y_series.re;
    l[(line.m, line.m)] += g;
    l[(line.n, line.n)] += g;
    l[(line.m, line.n)] -= g;
    l[(line.n, line.m)] -= g;
}

/// Validated radial feeder. Immutable once built.
#[derive(Debug, Clone)]
pub struct FeederModel {
    nodes: Vec<Node>,
    lines: Vec<Line>,
    y: CMatrix,
    houses: Vec<usize>,
    poles: Vec<usize>,
}

impl FeederModel {
    pub fn new(nodes: Vec<Node>, lines: Vec<Line>) -> Result<Self> {
        let n = nodes.len();
        for (k, node) in nodes.iter().enumerate() {
            if node.id != k {
                return model(format!("node ids must be 0..{n} in order; found {} at position {k}", node.id));
            }
            if (k == 0) != (node.role == Role::Slack) {
                return model(format!("node {k}: node 0 and only node 0 is the slack"));
            }
            if (node.role == Role::House) != node.house.is_some() {
                return model(format!("node {k}: house data present iff the role is House"));
            }
            if let Some(h) = &node.house {
                let inv = &h.inverter;
                if !(inv.s >= 0.0 && inv.p_av >= 0.0 && inv.theta > 0.0 && inv.theta <= std::f64::consts::FRAC_PI_2) {
                    return model(format!("node {k}: invalid inverter {inv:?}"));
                }
                if !(h.load.p_load >= 0.0 && h.load.q_load.is_finite()) {
                    return model(format!("node {k}: invalid load {:?}", h.load));
                }
            }
        }
        let y = build_admittance(&lines, n)?;
        if lines.len() + 1 != n {
            return model(format!("feeder must be radial: {n} nodes need {} lines, got {}", n - 1, lines.len()));
        }
        let houses = nodes.iter().filter(|x| x.role == Role::House).map(|x| x.id).collect();
        let poles = nodes.iter().filter(|x| x.role == Role::Pole).map(|x| x.id).collect();
        Ok(Self { nodes, lines, y, houses, poles })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn admittance(&self) -> &CMatrix {
        &self.y
    }

    /// House node ids in increasing order; position `k` is house `H_{k+1}`.
    pub fn houses(&self) -> &[usize] {
        &self.houses
    }

    pub fn poles(&self) -> &[usize] {
        &self.poles
    }

    pub fn n_houses(&self) -> usize {
        self.houses.len()
    }

    /// Payload of the `k`-th house.
    pub fn house(&self, k: usize) -> &HousePayload {
        self.nodes[self.houses[k]].house.as_ref().expect("house node carries a payload")
    }

    pub fn house_index(&self, node: usize) -> Option<usize> {
        self.houses.binary_search(&node).ok()
    }

    pub fn node_matrices(&self, n: usize) -> Result<NodeMatrices> {
        node_matrices(&self.y, n)
    }

    pub fn loss_matrix(&self) -> DMatrix<f64> {
        loss_matrix(&self.lines, self.n_nodes()).expect("lines validated at construction")
    }

    pub fn neighbors(&self, n: usize) -> Vec<usize> {
        self.lines
            .iter()
            .filter_map(|l| if l.m == n { Some(l.n) } else if l.n == n { Some(l.m) } else { None })
            .collect()
    }

    /// Same network with new house payloads (one per house, in house order).
    pub fn with_payloads(&self, payloads: &[HousePayload]) -> Result<Self> {
        if payloads.len() != self.houses.len() {
            return model(format!("expected {} house payloads, got {}", self.houses.len(), payloads.len()));
        }
        let mut nodes = self.nodes.clone();
        for (&node, p) in self.houses.iter().zip(payloads) {
            nodes[node].house = Some(*p);
        }
        Self::new(nodes, self.lines.clone())
    }

    /// Complex power injected at every node, `V_n (Yv)_n*`.
    pub fn injections(&self, v: &CVector) -> Vec<C64> {
        let i = &self.y * v;
        (0..self.n_nodes()).map(|n| v[n] * i[n].conj()).collect()
    }

    /// Largest nodal power-balance mismatch of `v` against the given setpoints
    /// (houses: net PV minus load; poles: zero; slack excluded).
    pub fn balance_residual(&self, v: &CVector, setpoints: &[OperatingPoint]) -> f64 {
        let s = self.injections(v);
        let mut worst: f64 = 0.0;
        for (k, &node) in self.houses.iter().enumerate() {
            let h = self.house(k);
            let want = C64::new(
                h.inverter.p_av - setpoints[k].p_c - h.load.p_load,
                setpoints[k].q_c - h.load.q_load,
            );
            worst = worst.max((s[node] - want).norm());
        }
        for &node in &self.poles {
            worst = worst.max(s[node].norm());
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use oid_conic::trace_product;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn outer(v: &CVector) -> CMatrix {
        v * v.adjoint()
    }

    fn path3() -> Vec<Line> {
        vec![Line::new(0, 1, c(2.0, 0.0)), Line::new(1, 2, c(1.0, 1.0))]
    }

    fn random_v(rng: &mut ChaCha8Rng, n: usize) -> CVector {
        CVector::from_fn(n, |_, _| c(rng.random_range(0.9..1.1), rng.random_range(-0.1..0.1)))
    }

    #[test]
    fn single_line_admittance() {
        let y = build_admittance(&[Line::new(0, 1, c(1.0, 0.0))], 2).unwrap();
        assert_eq!(y, CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(-1.0, 0.0), c(-1.0, 0.0), c(1.0, 0.0)]));
        let line = Line { y_shunt: c(0.0, 0.01), ..Line::new(0, 1, c(1.0, 0.0)) };
        let y = build_admittance(&[line], 2).unwrap();
        assert_eq!(y[(0, 0)], c(1.0, 0.01));
        assert_eq!(y[(1, 1)], c(1.0, 0.01));
        assert_eq!(y[(0, 1)], c(-1.0, 0.0));
    }

    #[test]
    fn path_admittance_matches_entry_formula() {
        let lines = path3();
        let y = build_admittance(&lines, 3).unwrap();
        // y_mn looked up per unordered pair
        let y_of = |m: usize, n: usize| -> C64 {
            match (m.min(n), m.max(n)) {
                (0, 1) => c(2.0, 0.0),
                (1, 2) => c(1.0, 1.0),
                _ => c(0.0, 0.0),
            }
        };
        for m in 0..3 {
            for n in 0..3 {
                let want = if m == n { (0..3).filter(|&j| j != m).map(|j| y_of(m, j)).sum() } else { -y_of(m, n) };
                assert_eq!(y[(m, n)], want, "entry ({m},{n})");
            }
        }
    }

    #[test]
    fn admittance_errors() {
        assert!(build_admittance(&[Line::new(0, 1, c(1.0, 0.0))], 3).is_err());
        let dup = [Line::new(0, 1, c(1.0, 0.0)), Line::new(1, 0, c(2.0, 0.0))];
        assert!(build_admittance(&dup, 2).is_err());
        assert!(build_admittance(&[Line::new(0, 5, c(1.0, 0.0))], 2).is_err());
    }

    #[test]
    fn flat_voltage_carries_no_power() {
        let y = build_admittance(&path3(), 3).unwrap();
        let v = CVector::from_element(3, c(1.0, 0.0));
        for n in 0..3 {
            let nm = node_matrices(&y, n).unwrap();
            assert!(trace_product(&nm.a, &outer(&v)).abs() < 1e-15);
        }
    }

    #[test]
    fn node_matrices_match_direct_injection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = build_admittance(&[Line::new(0, 1, c(1.0, -0.5))], 2).unwrap();
        for _ in 0..10 {
            let v = random_v(&mut rng, 2);
            let i = &y * &v;
            let s1 = v[1] * i[1].conj();
            let nm = node_matrices(&y, 1).unwrap();
            let vv = outer(&v);
            assert!((trace_product(&nm.a, &vv) - s1.re).abs() < 1e-12);
            assert!((trace_product(&nm.b, &vv) - s1.im).abs() < 1e-12);
            assert!((trace_product(&nm.m, &vv) - v[1].norm_sqr()).abs() < 1e-12);
        }
        assert!(node_matrices(&y, 2).is_err());
    }

    #[test]
    fn node_matrices_are_hermitian() {
        let y = build_admittance(&path3(), 3).unwrap();
        for n in 0..3 {
            let nm = node_matrices(&y, n).unwrap();
            assert_eq!(nm.a, nm.a.adjoint());
            assert_eq!(nm.b, nm.b.adjoint());
        }
    }

    #[test]
    fn loss_matrix_per_line() {
        let l = loss_matrix(&[Line::new(0, 1, c(1.0, 0.0))], 2).unwrap();
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lines = path3();
        let l = loss_matrix(&lines, 3).unwrap();
        let lc = l.map(|x| c(x, 0.0));
        for _ in 0..10 {
            let v = random_v(&mut rng, 3);
            let want: f64 = lines.iter().map(|ln| ln.y_series.re * (v[ln.m] - v[ln.n]).norm_sqr()).sum();
            assert!((trace_product(&lc, &outer(&v)) - want).abs() < 1e-12);
        }
        let flat = CVector::from_element(3, c(1.0, 0.0));
        assert!(trace_product(&lc, &outer(&flat)).abs() < 1e-15);
    }

    #[test]
    fn region_examples() {
        let theta = 0.85f64.acos();
        let dark = InverterSpec { s: 1.0, p_av: 0.0, theta };
        assert!(region_contains(&dark, &OperatingPoint::new(0.0, 0.0), 0.0));
        assert!(!region_contains(&dark, &OperatingPoint::new(0.0, 0.01), 0.0));
        assert!(!region_contains(&dark, &OperatingPoint::new(0.01, 0.0), 0.0));
        let sunny = InverterSpec { s: 1.1, p_av: 1.0, theta };
        assert!(region_contains(&sunny, &OperatingPoint::new(0.0, 0.0), 0.0));
        assert!(!region_contains(&sunny, &OperatingPoint::new(1.0, 0.1), 0.0));
        assert!(region_contains(&sunny, &OperatingPoint::new(1.0, 0.0), 0.0));
    }

    #[test]
    fn feeder_validation() {
        let house = HousePayload {
            inverter: InverterSpec { s: 1.0, p_av: 0.5, theta: 0.5 },
            load: HouseLoad::default(),
        };
        let nodes = vec![
            Node { id: 0, role: Role::Slack, house: None },
            Node { id: 1, role: Role::House, house: Some(house) },
        ];
        let f = FeederModel::new(nodes.clone(), vec![Line::new(0, 1, c(1.0, 0.0))]).unwrap();
        assert_eq!(f.houses(), &[1]);
        let mut bad = nodes.clone();
        bad[1].house = None;
        assert!(FeederModel::new(bad, vec![Line::new(0, 1, c(1.0, 0.0))]).is_err());
        let mut bad = nodes;
        bad[0].role = Role::Pole;
        assert!(FeederModel::new(bad, vec![Line::new(0, 1, c(1.0, 0.0))]).is_err());
    }
}
