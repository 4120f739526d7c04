//! Pieces shared by every relaxed problem: the network block over a node
//! subset, the inverter region and the group-sparsity epigraphs.

use nalgebra::DMatrix;
use oid_conic::{CMatrix, ConicProgram, LinExpr, PsdBlock, ScalarVar, C64};

use crate::central::{CostSpec, VoltageLimits};
use crate::feeder::{add_line_loss, FeederModel, InverterSpec, Role};

/// A principal sub-network: the nodes spanned by the local matrix and which of
/// them carry balance and voltage rows.
#[derive(Debug, Clone)]
pub(crate) struct NetworkView {
    /// Global ids of the local rows/columns, increasing.
    pub nodes: Vec<usize>,
    /// Global ids with power-balance rows (houses and poles only).
    pub balance: Vec<usize>,
    /// Global ids with voltage-magnitude rows.
    pub voltage: Vec<usize>,
    /// Lines counted in the local loss term, with their weight.
    pub loss_lines: Vec<(usize, f64)>,
}

impl NetworkView {
    pub fn full(feeder: &FeederModel) -> Self {
        let all: Vec<usize> = (0..feeder.n_nodes()).collect();
        Self {
            balance: all.iter().copied().filter(|&n| n != 0).collect(),
            voltage: all.clone(),
            nodes: all,
            loss_lines: (0..feeder.lines().len()).map(|k| (k, 1.0)).collect(),
        }
    }

    /// `T` with `v_local = T u`: `u_root = v_root` per connected piece and
    /// `u_k = y_e (v_k − v_parent)` for the series admittance of the line to the
    /// parent. Working with `U` (`V = T U Tᴴ`) keeps all entries O(1) even when
    /// line admittances are in the hundreds.
    pub fn basis(&self, feeder: &FeederModel) -> CMatrix {
        let d = self.nodes.len();
        let mut adj: Vec<Vec<(usize, C64)>> = vec![Vec::new(); d];
        for l in feeder.lines() {
            if let (Ok(a), Ok(b)) = (self.nodes.binary_search(&l.m), self.nodes.binary_search(&l.n)) {
                adj[a].push((b, l.y_series));
                adj[b].push((a, l.y_series));
            }
        }
        let mut t = CMatrix::zeros(d, d);
        let mut seen = vec![false; d];
        let mut order = Vec::with_capacity(d);
        let mut parent = vec![usize::MAX; d];
        for root in 0..d {
            if seen[root] {
                continue;
            }
            seen[root] = true;
            t[(root, root)] = C64::new(1.0, 0.0);
            let mut stack = vec![root];
            while let Some(u) = stack.pop() {
                order.push(u);
                for &(w, y) in &adj[u] {
                    if !seen[w] {
                        seen[w] = true;
                        parent[w] = u;
                        let row = t.row(u).into_owned();
                        t.set_row(w, &row);
                        t[(w, w)] += C64::new(1.0, 0.0) / y;
                        stack.push(w);
                    }
                }
            }
        }
        // A branch carries roughly the current of the houses below it; scaling
        // its column by that count keeps the diagonal of U within one order of
        // magnitude.
        let mut below = vec![0usize; d];
        for &u in order.iter().rev() {
            if feeder.nodes()[self.nodes[u]].role == Role::House {
                below[u] += 1;
            }
            if parent[u] != usize::MAX {
                below[parent[u]] += below[u];
            }
        }
        for k in 0..d {
            if parent[k] != usize::MAX {
                let s = below[k].max(1) as f64;
                t.column_mut(k).iter_mut().for_each(|z| *z *= s);
            }
        }
        t
    }

    pub fn local(&self, global: usize) -> usize {
        self.nodes.binary_search(&global).expect("node belongs to the view")
    }

    pub fn submatrix(&self, m: &CMatrix) -> CMatrix {
        let d = self.nodes.len();
        CMatrix::from_fn(d, d, |i, j| m[(self.nodes[i], self.nodes[j])])
    }

    pub fn loss_matrix(&self, feeder: &FeederModel) -> DMatrix<f64> {
        let mut full = DMatrix::zeros(feeder.n_nodes(), feeder.n_nodes());
        for &(k, w) in &self.loss_lines {
            add_line_loss(&mut full, &feeder.lines()[k], w);
        }
        let d = self.nodes.len();
        DMatrix::from_fn(d, d, |i, j| full[(self.nodes[i], self.nodes[j])])
    }
}

/// A PSD block `U` standing for `V = T U Tᴴ` over a view's local nodes.
#[derive(Debug, Clone)]
pub(crate) struct Lift {
    pub block: PsdBlock,
    pub t: CMatrix,
    th: CMatrix,
}

impl Lift {
    pub fn new(prog: &mut ConicProgram, t: CMatrix) -> Self {
        let block = prog.add_psd_block(t.nrows());
        let th = t.adjoint();
        Self { block, t, th }
    }

    /// `Re Tr(C V)` for a local Hermitian `C`, as an expression in `U`.
    pub fn trace(&self, c: &CMatrix) -> LinExpr {
        let mut m = &self.th * c * &self.t;
        let scale = m.iter().fold(0.0_f64, |a, z| a.max(z.norm()));
        // products of exact zeros with the basis leave rounding dust
        m.iter_mut().for_each(|z| {
            if z.norm() <= 1e-14 * scale {
                *z = C64::new(0.0, 0.0);
            }
        });
        let mut e = LinExpr::new();
        e.add_trace(self.block, &m, 1.0);
        e
    }

    /// `Re V_ij`.
    pub fn entry_re(&self, i: usize, j: usize) -> LinExpr {
        let mut c = CMatrix::zeros(self.t.nrows(), self.t.nrows());
        c[(i, j)] += C64::new(0.5, 0.0);
        c[(j, i)] += C64::new(0.5, 0.0);
        self.trace(&c)
    }

    /// `Im V_ij`.
    pub fn entry_im(&self, i: usize, j: usize) -> LinExpr {
        let mut c = CMatrix::zeros(self.t.nrows(), self.t.nrows());
        if i != j {
            c[(j, i)] = C64::new(0.0, -0.5);
            c[(i, j)] = C64::new(0.0, 0.5);
        }
        self.trace(&c)
    }

    /// `V = T U Tᴴ`, symmetrized.
    pub fn voltage_matrix(&self, u: &CMatrix) -> CMatrix {
        let v = &self.t * u * &self.th;
        (&v + v.adjoint()).map(|z| z * 0.5)
    }
}

/// Handles to the network part of a program.
#[derive(Debug, Clone)]
pub(crate) struct NetworkVars {
    pub lift: Lift,
    /// House indices in the same order as `p`, `q`.
    pub houses: Vec<usize>,
    pub p: Vec<ScalarVar>,
    pub q: Vec<ScalarVar>,
    pub loss: LinExpr,
}

/// Adds `V ⪰ 0`, balance rows, voltage rows, the weighted loss and the
/// group-sparsity term over the view's houses.
pub(crate) fn add_network(
    prog: &mut ConicProgram,
    feeder: &FeederModel,
    view: &NetworkView,
    cost: &CostSpec,
    limits: &VoltageLimits,
) -> NetworkVars {
    let lift = Lift::new(prog, view.basis(feeder));
    let trace_of = |m: &CMatrix| lift.trace(&view.submatrix(m));
    let mut houses = Vec::new();
    let (mut p, mut q) = (Vec::new(), Vec::new());
    for &n in &view.balance {
        let nm = feeder.node_matrices(n).expect("node in range");
        match feeder.nodes()[n].role {
            Role::House => {
                let k = feeder.house_index(n).expect("house node");
                let h = feeder.house(k);
                let (pv, qv) = (prog.add_free(), prog.add_free());
                // Tr(A V) = P_av − P_load − P_c,  Tr(B V) = −Q_load + Q_c
                prog.add_equality(trace_of(&nm.a).with(pv, 1.0), h.inverter.p_av - h.load.p_load);
                prog.add_equality(trace_of(&nm.b).with(qv, -1.0), -h.load.q_load);
                houses.push(k);
                p.push(pv);
                q.push(qv);
            }
            Role::Pole => {
                prog.add_equality(trace_of(&nm.a), 0.0);
                prog.add_equality(trace_of(&nm.b), 0.0);
            }
            Role::Slack => unreachable!("the slack bus has no balance row"),
        }
    }
    for &n in &view.voltage {
        let i = view.local(n);
        prog.add_range(lift.entry_re(i, i), limits.vmin * limits.vmin, limits.vmax * limits.vmax);
    }
    let loss = lift.trace(&view.loss_matrix(feeder).map(|x| C64::new(x, 0.0)));
    if cost.loss_weight != 0.0 {
        let mut weighted = LinExpr::new();
        weighted.add_expr(&loss, cost.loss_weight);
        prog.add_objective(&weighted);
    }
    if cost.lambda > 0.0 {
        for (&pv, &qv) in p.iter().zip(&q) {
            let t = prog.add_free();
            prog.add_soc(LinExpr::var(t), vec![LinExpr::var(pv), LinExpr::var(qv)]);
            prog.add_objective(&LinExpr::new().with(t, cost.lambda));
        }
    }
    NetworkVars { lift, houses, p, q, loss }
}

/// `(P_c, Q_c) ∈ F^OID`: `0 ≤ P_c ≤ P_av`, `‖(Q_c, P_av − P_c)‖ ≤ S`,
/// `|Q_c| ≤ tanθ (P_av − P_c)`.
pub(crate) fn add_region(prog: &mut ConicProgram, p: ScalarVar, q: ScalarVar, spec: &InverterSpec) {
    prog.add_range(LinExpr::var(p), 0.0, spec.p_av);
    prog.add_soc(
        LinExpr::constant(spec.s),
        vec![LinExpr::var(q), LinExpr::constant(spec.p_av).with(p, -1.0)],
    );
    let tan = spec.theta.tan();
    if tan.is_finite() && tan < 1e8 {
        prog.add_range(LinExpr::var(q).with(p, tan), f64::NEG_INFINITY, tan * spec.p_av);
        prog.add_range(LinExpr::new().with(q, -1.0).with(p, tan), f64::NEG_INFINITY, tan * spec.p_av);
    }
}

/// Adds `a P² + b P`.
pub(crate) fn add_customer_cost(prog: &mut ConicProgram, p: ScalarVar, a: f64, b: f64) {
    if a != 0.0 {
        prog.add_square(p, a);
    }
    if b != 0.0 {
        prog.add_objective(&LinExpr::new().with(p, b));
    }
}
