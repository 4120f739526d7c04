//! Multi-cluster DOID: each cluster energy manager (CEM) solves an SDP over
//! its extended node set and agrees with tree neighbours on the 2×2 voltage
//! block of the line joining them.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::Matrix2;
use oid_conic::{rank_one_factor, CMatrix, CVector, LinExpr, Solver, C64};
use serde::{Deserialize, Serialize};

use crate::central::{require_optimal, summarize, CostBreakdown, CostSpec, DispatchResult, VoltageLimits};
use crate::consensus::{
    copy_program, customer_round, dual_update, finish, step_sq, AdmmConfig, AdmmOutcome, ConsensusVars,
    ConvergenceWarning,
};
use crate::error::{OidError, Result};
use crate::feeder::{FeederModel, OperatingPoint};
use crate::sdp::NetworkView;

/// The single line joining two neighbouring clusters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Border {
    /// Cluster ids, `a < j`.
    pub a: usize,
    pub j: usize,
    /// Index into `feeder.lines()`.
    pub line: usize,
    /// Endpoints ordered by node id; rows/columns of every border block.
    pub nodes: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPartition {
    /// `𝒞ᵃ`, sorted.
    pub clusters: Vec<Vec<usize>>,
    /// `𝒞̃ᵃ`: `𝒞ᵃ` plus the far ends of lines leaving it, sorted.
    pub extended: Vec<Vec<usize>>,
    /// `ℬ̃ᵃ`, sorted cluster ids.
    pub neighbors: Vec<Vec<usize>>,
    pub borders: Vec<Border>,
    owner: Vec<usize>,
}

fn partition_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(OidError::Partition(msg.into()))
}

/// Checks a raw partition and derives extended sets, neighbours and border
/// lines. Node 0 may be left out; it then joins the cluster of its lowest
/// numbered neighbour, since every balance row next to it needs `V_0`.
pub fn validate_partition(feeder: &FeederModel, raw: &[Vec<usize>]) -> Result<ClusterPartition> {
    let n = feeder.n_nodes();
    if raw.is_empty() {
        return partition_err("no clusters given");
    }
    let mut clusters: Vec<BTreeSet<usize>> = Vec::with_capacity(raw.len());
    for (a, c) in raw.iter().enumerate() {
        let set: BTreeSet<usize> = c.iter().copied().collect();
        if set.is_empty() {
            return partition_err(format!("cluster {a} is empty"));
        }
        if set.len() != c.len() {
            return partition_err(format!("cluster {a} lists a node twice"));
        }
        if let Some(&bad) = set.iter().find(|&&v| v >= n) {
            return partition_err(format!("cluster {a} names node {bad}, feeder has {n} nodes"));
        }
        clusters.push(set);
    }
    let extend = |c: &BTreeSet<usize>| -> BTreeSet<usize> {
        let mut e = c.clone();
        for &m in c {
            e.extend(feeder.neighbors(m));
        }
        e
    };
    // nestedness is judged on the sets as given
    let raw_ext: Vec<BTreeSet<usize>> = clusters.iter().map(extend).collect();
    for a in 0..clusters.len() {
        for j in 0..clusters.len() {
            if a != j && raw_ext[a].is_subset(&raw_ext[j]) {
                return partition_err(format!("clusters {a} and {j} are nested"));
            }
        }
    }
    let mut owner = vec![usize::MAX; n];
    for (a, c) in clusters.iter().enumerate() {
        for &v in c {
            if owner[v] != usize::MAX {
                return partition_err(format!("node {v} belongs to clusters {} and {a}", owner[v]));
            }
            owner[v] = a;
        }
    }
    if owner[0] == usize::MAX {
        let host = feeder.neighbors(0).into_iter().filter(|&m| owner[m] != usize::MAX).min();
        match host {
            Some(m) => {
                owner[0] = owner[m];
                clusters[owner[m]].insert(0);
            }
            None => return partition_err("node 0 is not covered and none of its neighbours is"),
        }
    }
    if let Some(v) = owner.iter().position(|&o| o == usize::MAX) {
        return partition_err(format!("node {v} is not in any cluster"));
    }
    let extended: Vec<BTreeSet<usize>> = clusters.iter().map(extend).collect();
    let k = clusters.len();
    for a in 0..k {
        for j in 0..k {
            if a != j && extended[a].is_subset(&extended[j]) {
                return partition_err(format!("clusters {a} and {j} are nested"));
            }
        }
    }

    let mut lines_between: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (li, l) in feeder.lines().iter().enumerate() {
        let (oa, ob) = (owner[l.m], owner[l.n]);
        if oa != ob {
            lines_between.entry((oa.min(ob), oa.max(ob))).or_default().push(li);
        }
    }
    let mut neighbors = vec![Vec::new(); k];
    let mut borders = Vec::new();
    for a in 0..k {
        for j in a + 1..k {
            if extended[a].is_disjoint(&extended[j]) {
                continue;
            }
            let lines = lines_between.get(&(a, j)).map_or(&[][..], Vec::as_slice);
            match lines {
                [] => {
                    return partition_err(format!(
                        "clusters {a} and {j} share extended nodes without a line between them; \
                         cluster graph is not a tree"
                    ))
                }
                [li] => {
                    let l = &feeder.lines()[*li];
                    borders.push(Border { a, j, line: *li, nodes: [l.m.min(l.n), l.m.max(l.n)] });
                    neighbors[a].push(j);
                    neighbors[j].push(a);
                }
                many => {
                    return partition_err(format!(
                        "clusters {a} and {j} are joined by {} lines; one border line per pair is supported",
                        many.len()
                    ))
                }
            }
        }
    }
    // connected with k − 1 edges
    if borders.len() + 1 != k || !tree_connected(&neighbors) {
        return partition_err("cluster graph is not a tree");
    }
    for (a, c) in clusters.iter().enumerate() {
        for &v in c {
            if feeder.neighbors(v).iter().any(|m| !extended[a].contains(m)) {
                return partition_err(format!("node {v} has a neighbour outside the extended cluster {a}"));
            }
        }
    }
    for nb in &mut neighbors {
        nb.sort_unstable();
    }
    Ok(ClusterPartition {
        clusters: clusters.into_iter().map(|s| s.into_iter().collect()).collect(),
        extended: extended.into_iter().map(|s| s.into_iter().collect()).collect(),
        neighbors,
        borders,
        owner,
    })
}

fn tree_connected(neighbors: &[Vec<usize>]) -> bool {
    let mut seen = vec![false; neighbors.len()];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(a) = queue.pop_front() {
        for &j in &neighbors[a] {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

impl ClusterPartition {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn owner(&self, node: usize) -> usize {
        self.owner[node]
    }

    /// House indices located in `𝒞ᵃ`.
    pub fn houses(&self, a: usize, feeder: &FeederModel) -> Vec<usize> {
        self.clusters[a].iter().filter_map(|&n| feeder.house_index(n)).collect()
    }

    pub fn border(&self, a: usize, j: usize) -> Option<&Border> {
        let (lo, hi) = (a.min(j), a.max(j));
        self.borders.iter().find(|b| b.a == lo && b.j == hi)
    }

    /// Local problem of cluster `a`: balance rows on `𝒞ᵃ \ {0}`, voltage rows
    /// on `𝒞ᵃ`, full weight on internal lines and half on border lines.
    pub(crate) fn view(&self, a: usize, feeder: &FeederModel) -> NetworkView {
        let inside = |v: usize| self.owner[v] == a;
        let loss_lines = feeder
            .lines()
            .iter()
            .enumerate()
            .filter_map(|(k, l)| match (inside(l.m), inside(l.n)) {
                (true, true) => Some((k, 1.0)),
                (true, false) | (false, true) => Some((k, 0.5)),
                (false, false) => None,
            })
            .collect();
        NetworkView {
            nodes: self.extended[a].clone(),
            balance: self.clusters[a].iter().copied().filter(|&v| v != 0).collect(),
            voltage: self.clusters[a].clone(),
            loss_lines,
        }
    }
}

/// Border state kept by CEM `a` for neighbour `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct BorderLink {
    pub neighbor: usize,
    pub nodes: [usize; 2],
    /// Own block `Vᵃ_j` from the last solve.
    pub own: [[C64; 2]; 2],
    /// Neighbour's block `Vʲ_a` as last received.
    pub received: [[C64; 2]; 2],
    pub upsilon: Matrix2<f64>,
    pub psi: Matrix2<f64>,
}

/// `|√V_nn^a − √V_nn^j|` for one endpoint of a border line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BorderError {
    pub a: usize,
    pub j: usize,
    pub node: usize,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub iteration: usize,
    pub vars: ConsensusVars,
    pub border_errors: Vec<BorderError>,
    /// Setpoint residual plus squared Frobenius border residuals.
    pub residual: f64,
    pub step: f64,
    pub solver_iterations: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Algorithm2State {
    pub iteration: usize,
    pub vars: ConsensusVars,
    /// Per cluster, one link per neighbour in `neighbors[a]` order.
    pub links: Vec<Vec<BorderLink>>,
    /// Latest local `Vᵃ` per cluster, over `extended[a]`.
    pub v: Vec<Option<CMatrix>>,
    pub history: Vec<ClusterRecord>,
}

impl Algorithm2State {
    pub fn new(partition: &ClusterPartition, n_houses: usize) -> Self {
        let zero = [[C64::new(0.0, 0.0); 2]; 2];
        let links = (0..partition.len())
            .map(|a| {
                partition.neighbors[a]
                    .iter()
                    .map(|&j| BorderLink {
                        neighbor: j,
                        nodes: partition.border(a, j).expect("neighbours share a border").nodes,
                        own: zero,
                        received: zero,
                        upsilon: Matrix2::zeros(),
                        psi: Matrix2::zeros(),
                    })
                    .collect()
            })
            .collect();
        Self {
            iteration: 0,
            vars: ConsensusVars::zeros(n_houses),
            links,
            v: vec![None; partition.len()],
            history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CemUpdate {
    pub cluster: usize,
    pub v: CMatrix,
    /// House indices of `ℋᵃ` with their copies.
    pub houses: Vec<usize>,
    pub pbar: Vec<f64>,
    pub qbar: Vec<f64>,
    /// `Vᵃ_j` per neighbour, in `neighbors[a]` order.
    pub blocks: Vec<[[C64; 2]; 2]>,
    pub(crate) result: DispatchResult,
}

/// CEM step: cluster SDP plus setpoint consensus on `ℋᵃ` and, per neighbour,
/// `κ/2 (α_j + β_j) + Tr(Υᵀ Re Vᵃ_j) + Tr(Ψᵀ Im Vᵃ_j)` with
/// `α_j ≥ ‖a_j‖²`, `β_j ≥ ‖b_j‖²`.
#[allow(clippy::too_many_arguments)]
pub fn cem_update(
    a: usize,
    state: &Algorithm2State,
    feeder: &FeederModel,
    cost: &CostSpec,
    limits: &VoltageLimits,
    partition: &ClusterPartition,
    config: &AdmmConfig,
    solver: &mut Solver,
) -> Result<CemUpdate> {
    let view = partition.view(a, feeder);
    let vars = &state.vars;
    let (mut prog, net) = copy_program(feeder, &view, cost, limits, config.kappa, |k| vars.utility_linear(k, config.kappa));
    for link in &state.links[a] {
        let idx = link.nodes.map(|v| view.local(v));
        let (mut re_terms, mut im_terms) = (Vec::with_capacity(4), Vec::with_capacity(4));
        let mut linear = LinExpr::new();
        for r in 0..2 {
            for c in 0..2 {
                let re = net.lift.entry_re(idx[r], idx[c]);
                let im = net.lift.entry_im(idx[r], idx[c]);
                let mid = 0.5 * (link.own[r][c] + link.received[r][c]);
                linear.add_expr(&re, link.upsilon[(r, c)]);
                linear.add_expr(&im, link.psi[(r, c)]);
                re_terms.push(re.plus(-mid.re));
                im_terms.push(im.plus(-mid.im));
            }
        }
        let (alpha, beta) = (prog.add_free(), prog.add_free());
        prog.add_squared_norm_epigraph(alpha, re_terms);
        prog.add_squared_norm_epigraph(beta, im_terms);
        prog.add_objective(&LinExpr::new().with(alpha, 0.5 * config.kappa).with(beta, 0.5 * config.kappa));
        prog.add_objective(&linear);
    }
    let sol = solver.solve(&prog)?;
    require_optimal(&sol, &format!("cluster {a}, iteration {}", state.iteration + 1))?;
    let pbar: Vec<f64> = net.p.iter().map(|&v| sol.value(v)).collect();
    let qbar: Vec<f64> = net.q.iter().map(|&v| sol.value(v)).collect();
    let setpoints = pbar.iter().zip(&qbar).map(|(&p, &q)| OperatingPoint::new(p, q)).collect();
    let result = summarize(&sol, &net, setpoints, cost);
    let v = result.v_matrix.clone();
    let blocks = state.links[a]
        .iter()
        .map(|link| {
            let idx = link.nodes.map(|n| view.local(n));
            [[v[(idx[0], idx[0])], v[(idx[0], idx[1])]], [v[(idx[1], idx[0])], v[(idx[1], idx[1])]]]
        })
        .collect();
    Ok(CemUpdate { cluster: a, v, houses: net.houses.clone(), pbar, qbar, blocks, result })
}

/// `Υ_{a,j} += κ/2 (Re Vᵃ_j − Re Vʲ_a)`, `Ψ_{a,j} += κ/2 (Im Vᵃ_j − Im Vʲ_a)`.
pub fn cluster_dual_update(link: &mut BorderLink, kappa: f64) {
    for r in 0..2 {
        for c in 0..2 {
            let d = link.own[r][c] - link.received[r][c];
            link.upsilon[(r, c)] += 0.5 * kappa * d.re;
            link.psi[(r, c)] += 0.5 * kappa * d.im;
        }
    }
}

pub(crate) fn block_diff_sq(x: &[[C64; 2]; 2], y: &[[C64; 2]; 2]) -> f64 {
    (0..2).flat_map(|r| (0..2).map(move |c| (x[r][c] - y[r][c]).norm_sqr())).sum()
}

pub fn run_algorithm2(
    feeder: &FeederModel,
    cost: &CostSpec,
    limits: &VoltageLimits,
    partition: &ClusterPartition,
    config: &AdmmConfig,
) -> Result<AdmmOutcome<Algorithm2State>> {
    config.check()?;
    cost.check(feeder.n_houses())?;
    limits.check()?;
    let n = feeder.n_houses();
    let all: Vec<usize> = (0..n).collect();
    let mut state = Algorithm2State::new(partition, n);
    let mut solvers: Vec<Solver> = (0..partition.len()).map(|_| Solver::new(config.solve.settings())).collect();
    let mut warning = None;
    let last = loop {
        let (cems, customers) = rayon::join(
            || {
                use rayon::prelude::*;
                solvers
                    .par_iter_mut()
                    .enumerate()
                    .map(|(a, s)| cem_update(a, &state, feeder, cost, limits, partition, config, s))
                    .collect::<Result<Vec<_>>>()
            },
            || customer_round(feeder, cost, config.kappa, &state.vars, &all),
        );
        let cems = cems?;
        let customers = customers?;
        state.iteration += 1;
        let mut step = step_sq(&state.vars, &customers, &all);
        apply_round(&mut state, &cems, &customers, config.kappa, &mut step);
        let residual = combined_residual(&state, partition);
        let border_errors = border_errors(&state, partition);
        log::debug!("cluster iteration {}: residual {residual:.3e}", state.iteration);
        state.history.push(ClusterRecord {
            iteration: state.iteration,
            vars: state.vars.clone(),
            border_errors,
            residual,
            step,
            solver_iterations: cems.iter().map(|c| c.result.solver_iterations).collect(),
        });
        if config.converged(residual, step) {
            break cems;
        }
        if state.iteration >= config.max_iters {
            let w = ConvergenceWarning { iterations: state.iteration, final_error: residual };
            log::warn!("cluster ADMM: {w}");
            warning = Some(w);
            break cems;
        }
    };
    let result = assemble_result(feeder, partition, &last, &state.vars, cost, config.solve.ratio_tol);
    Ok(AdmmOutcome { result, state, warning })
}

/// Exchange and dual phase of one round, from fresh CEM and customer updates.
pub(crate) fn apply_round(
    state: &mut Algorithm2State,
    cems: &[CemUpdate],
    customers: &[OperatingPoint],
    kappa: f64,
    step: &mut f64,
) {
    for c in cems {
        for (i, &k) in c.houses.iter().enumerate() {
            state.vars.pbar[k] = c.pbar[i];
            state.vars.qbar[k] = c.qbar[i];
        }
        for (link, block) in state.links[c.cluster].iter_mut().zip(&c.blocks) {
            *step += block_diff_sq(&link.own, block);
            link.own = *block;
        }
        state.v[c.cluster] = Some(c.v.clone());
    }
    // border exchange: Vʲ_a as just computed by j
    for c in cems {
        for li in 0..state.links[c.cluster].len() {
            let j = state.links[c.cluster][li].neighbor;
            let back = state.links[j].iter().find(|l| l.neighbor == c.cluster).expect("symmetric links").own;
            state.links[c.cluster][li].received = back;
        }
    }
    let vars = &mut state.vars;
    vars.p = customers.iter().map(|s| s.p_c).collect();
    vars.q = customers.iter().map(|s| s.q_c).collect();
    let n = vars.p.len();
    dual_update(vars, 0..n, kappa);
    for links in &mut state.links {
        for link in links {
            cluster_dual_update(link, kappa);
        }
    }
}

/// Setpoint residual plus `‖Vᵃ_j − Vʲ_a‖_F²` once per border line.
pub(crate) fn combined_residual(state: &Algorithm2State, partition: &ClusterPartition) -> f64 {
    let n = state.vars.p.len();
    let mut r = state.vars.residual_sq(0..n);
    for b in &partition.borders {
        let link = state.links[b.a].iter().find(|l| l.neighbor == b.j).expect("link exists");
        r += block_diff_sq(&link.own, &link.received);
    }
    r
}

pub(crate) fn border_errors(state: &Algorithm2State, partition: &ClusterPartition) -> Vec<BorderError> {
    let mut out = Vec::new();
    for b in &partition.borders {
        let link = state.links[b.a].iter().find(|l| l.neighbor == b.j).expect("link exists");
        for (i, &node) in b.nodes.iter().enumerate() {
            let mine = link.own[i][i].re.max(0.0).sqrt();
            let theirs = link.received[i][i].re.max(0.0).sqrt();
            out.push(BorderError { a: b.a, j: b.j, node, error: (mine - theirs).abs() });
        }
    }
    out
}

/// Global result from the last CEM solves: losses summed over clusters,
/// voltages reassembled when every cluster is rank one.
pub(crate) fn assemble_result(
    feeder: &FeederModel,
    partition: &ClusterPartition,
    cems: &[CemUpdate],
    vars: &ConsensusVars,
    cost: &CostSpec,
    ratio_tol: f64,
) -> DispatchResult {
    let locals: Vec<CMatrix> = cems.iter().map(|c| c.v.clone()).collect();
    let rank_ratio = cems.iter().map(|c| c.result.rank_ratio).fold(0.0, f64::max);
    let loss = cems.iter().map(|c| c.result.breakdown.loss).sum();
    let n = feeder.n_nodes();
    let (v_matrix, voltages) = match reassemble_voltages(partition, &locals, ratio_tol) {
        Ok(v) => (&v * v.adjoint(), Some(v)),
        Err(_) => {
            // partial matrix: each cluster's own rows and columns
            let mut m = CMatrix::zeros(n, n);
            for (a, local) in locals.iter().enumerate() {
                let ext = &partition.extended[a];
                for (i, &gi) in ext.iter().enumerate() {
                    for (j, &gj) in ext.iter().enumerate() {
                        if partition.owner(gi) == a || partition.owner(gj) == a {
                            m[(gi, gj)] = local[(i, j)];
                        }
                    }
                }
            }
            (m, None)
        }
    };
    let base = DispatchResult {
        v_matrix,
        voltages,
        setpoints: Vec::new(),
        objective: 0.0,
        breakdown: CostBreakdown { loss, ..CostBreakdown::default() },
        rank_ratio,
        solver_iterations: cems.iter().map(|c| c.result.solver_iterations).sum(),
    };
    let mut r = finish(base, vars, cost, f64::INFINITY);
    if !(rank_ratio <= ratio_tol) {
        r.voltages = None;
    }
    r
}

/// Stitches per-cluster rank-one factors into one phasor vector: clusters are
/// visited along the tree from the one holding node 0, each rotated so its
/// entries on the shared border nodes line up with the parent's; node 0 is
/// given phase 0.
pub fn reassemble_voltages(partition: &ClusterPartition, locals: &[CMatrix], ratio_tol: f64) -> Result<CVector> {
    if locals.len() != partition.len() {
        return Err(OidError::Model(format!("{} local matrices for {} clusters", locals.len(), partition.len())));
    }
    let mut factors = Vec::with_capacity(locals.len());
    for (a, v) in locals.iter().enumerate() {
        if v.nrows() != partition.extended[a].len() {
            return Err(OidError::Model(format!("cluster {a}: local matrix has the wrong dimension")));
        }
        let f = rank_one_factor(v)?;
        if !(f.ratio <= ratio_tol) {
            return Err(OidError::Rank { context: format!("cluster {a}"), ratio: f.ratio });
        }
        factors.push(f.vector);
    }
    let n = partition.owner.len();
    let mut out = CVector::zeros(n);
    let root = partition.owner(0);
    let mut aligned: Vec<Option<CVector>> = vec![None; partition.len()];
    let pos = |a: usize, node: usize| partition.extended[a].binary_search(&node).expect("node in extended set");
    let v0 = factors[root][pos(root, 0)];
    let anchor = if v0.norm() > 0.0 { v0.conj() / v0.norm() } else { C64::new(1.0, 0.0) };
    aligned[root] = Some(factors[root].map(|z| z * anchor));
    let mut queue = VecDeque::from([root]);
    while let Some(a) = queue.pop_front() {
        for &j in &partition.neighbors[a] {
            if aligned[j].is_some() {
                continue;
            }
            let b = partition.border(a, j).expect("neighbours share a border");
            let parent = aligned[a].as_ref().expect("parent aligned");
            let mut s = C64::new(0.0, 0.0);
            for &node in &b.nodes {
                s += parent[pos(a, node)] * factors[j][pos(j, node)].conj();
            }
            let rot = if s.norm() > 0.0 { s / s.norm() } else { C64::new(1.0, 0.0) };
            aligned[j] = Some(factors[j].map(|z| z * rot));
            queue.push_back(j);
        }
    }
    for (a, vec) in aligned.iter().enumerate() {
        let vec = vec.as_ref().expect("cluster tree is connected");
        for &node in &partition.clusters[a] {
            out[node] = vec[pos(a, node)];
        }
    }
    Ok(out)
}
