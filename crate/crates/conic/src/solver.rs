//! Operator-splitting (ADMM) solver for [`ConicProgram`]s.
//!
//! Iterates on `min ½xᵀPx + qᵀx s.t. z = Ax, z ∈ C` with a cached dense
//! inverse of `P + σI + AᵀRA`, Ruiz equilibration, over-relaxation,
//! adaptive penalty and safeguarded Anderson acceleration on the
//! pre-projection iterate. A [`Solver`] keeps its factorization, scaling and last
//! iterate between calls: a program with identical structure (same `A`, `P` and
//! cone layout, any `q`, bounds and shifts) is warm started.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::accel::Anderson;
use crate::error::{ConicError, Result};
use crate::linalg::hermitian_psd_project;
use crate::program::{
    pack_hermitian, unpack_hermitian, ConicProgram, ConstraintId, LinExpr, PsdBlock, ScalarVar, SegmentKind,
    StandardForm,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    /// Relative tolerance for primal residual, dual residual and duality gap.
    pub tol: f64,
    pub max_iters: usize,
    /// Over-relaxation factor in (0, 2).
    pub alpha: f64,
    pub rho: f64,
    pub sigma: f64,
    pub scaling_iters: usize,
    pub check_every: usize,
    pub adaptive_rho: bool,
    pub adapt_every: usize,
    pub infeasibility_tol: f64,
    pub warm_start: bool,
    /// Anderson memory; 0 runs plain ADMM.
    pub anderson_mem: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iters: 50_000,
            alpha: 1.5,
            rho: 0.1,
            sigma: 1e-6,
            scaling_iters: 15,
            check_every: 5,
            adaptive_rho: true,
            adapt_every: 200,
            infeasibility_tol: 1e-6,
            warm_start: true,
            anderson_mem: 20,
        }
    }
}

impl Settings {
    pub fn with_tol(tol: f64, max_iters: usize) -> Self {
        Self { tol, max_iters, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Optimal,
    MaxIters,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub status: Status,
    /// Primal coordinates.
    pub x: Vec<f64>,
    /// Constraint values projected onto their sets.
    pub z: Vec<f64>,
    /// Multipliers, one per standard-form row.
    pub y: Vec<f64>,
    pub objective: f64,
    /// `‖Ax − z‖∞ / (1 + max(‖Ax‖∞, ‖z‖∞))`.
    pub primal_residual: f64,
    /// `‖Px + q + Aᵀy‖∞ / (1 + max(‖Px‖∞, ‖Aᵀy‖∞, ‖q‖∞))`.
    pub dual_residual: f64,
    /// `|p − d| / (1 + |p| + |d|)`.
    pub gap: f64,
    pub iterations: usize,
    constraint_rows: Vec<std::ops::Range<usize>>,
    block_rows: Vec<(PsdBlock, usize)>,
}

impl ConicSolution {
    pub fn value(&self, v: ScalarVar) -> f64 {
        self.x[v.coord()]
    }

    pub fn eval(&self, e: &LinExpr) -> f64 {
        e.eval(&self.x)
    }

    /// The PSD-projected value of a Hermitian block.
    pub fn matrix(&self, b: PsdBlock) -> crate::linalg::CMatrix {
        let start = self
            .block_rows
            .iter()
            .find(|(bb, _)| *bb == b)
            .map(|&(_, r)| r)
            .expect("block belongs to the solved program");
        unpack_hermitian(&self.z[start..start + b.len()], b.dim())
    }

    /// The block value read from the primal coordinates (not projected).
    pub fn matrix_unprojected(&self, b: PsdBlock) -> crate::linalg::CMatrix {
        unpack_hermitian(&self.x[b.coords()], b.dim())
    }

    pub fn dual(&self, c: ConstraintId) -> &[f64] {
        &self.y[self.constraint_rows[c.0].clone()]
    }
}

/// Solves a program from a cold start.
pub fn solve(p: &ConicProgram, tol: f64, max_iters: usize) -> Result<ConicSolution> {
    if !(tol > 0.0) {
        return Err(ConicError::InvalidProgram(format!("tolerance must be positive, got {tol}")));
    }
    Solver::new(Settings::with_tol(tol, max_iters)).solve(p)
}

#[derive(Debug, Clone, PartialEq)]
struct StructureKey {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
    p_diag: Vec<f64>,
    equality: Vec<bool>,
    segments: Vec<(std::ops::Range<usize>, SegmentKind)>,
}

impl StructureKey {
    fn of(sf: &StandardForm) -> Self {
        Self {
            n: sf.n,
            rows: sf.rows.clone(),
            p_diag: sf.p_diag.clone(),
            equality: (0..sf.m).map(|r| sf.is_equality_row(r)).collect(),
            segments: sf.segments.iter().map(|s| (s.rows.clone(), s.kind.clone())).collect(),
        }
    }
}

struct Cache {
    key: StructureKey,
    d: Vec<f64>,
    e: Vec<f64>,
    cost_scale: f64,
    rho: f64,
    rho_vec: Vec<f64>,
    /// `(P + σI + AᵀRA)⁻¹`, dense: a matrix-vector product beats two
    /// triangular solves at these sizes.
    kinv: DMatrix<f64>,
    x: DVector<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
}

/// Stateful solver holding the factorization and last iterate.
pub struct Solver {
    pub settings: Settings,
    cache: Option<Cache>,
    refactorizations: usize,
}

impl Solver {
    pub fn new(settings: Settings) -> Self {
        Self { settings, cache: None, refactorizations: 0 }
    }

    /// Number of KKT factorizations performed so far.
    pub fn factorizations(&self) -> usize {
        self.refactorizations
    }

    pub fn reset(&mut self) {
        self.cache = None;
    }

    pub fn solve(&mut self, program: &ConicProgram) -> Result<ConicSolution> {
        let sf = program.standard_form()?;
        let key = StructureKey::of(&sf);
        let reuse = self.settings.warm_start && self.cache.as_ref().is_some_and(|c| c.key == key);
        if !reuse {
            self.cache = Some(self.build_cache(&sf, key)?);
        }
        let mut cache = self.cache.take().expect("cache present");
        let out = self.iterate(&sf, &mut cache);
        self.cache = Some(cache);
        let mut sol = out?;
        sol.block_rows = program
            .blocks()
            .iter()
            .zip(sf.segments.iter().filter(|s| matches!(s.kind, SegmentKind::Psd { .. })))
            .map(|(b, s)| (*b, s.rows.start))
            .collect();
        sol.constraint_rows = sf.constraint_rows.clone();
        Ok(sol)
    }

    fn build_cache(&mut self, sf: &StandardForm, key: StructureKey) -> Result<Cache> {
        let (d, e) = ruiz(sf, self.settings.scaling_iters);
        let p_scaled: Vec<f64> = (0..sf.n).map(|j| sf.p_diag[j] * d[j] * d[j]).collect();
        let q_inf = (0..sf.n).map(|j| (sf.q[j] * d[j]).abs()).fold(0.0, f64::max);
        let p_mean = if sf.n > 0 { p_scaled.iter().sum::<f64>() / sf.n as f64 } else { 0.0 };
        let denom = p_mean.max(q_inf);
        let cost_scale = if denom > 1e-12 { (1.0 / denom).clamp(1e-4, 1e4) } else { 1.0 };
        let rho = self.settings.rho;
        let rho_vec = rho_vector(sf, rho);
        let kinv = self.factor(sf, &d, &e, cost_scale, &rho_vec)?;
        Ok(Cache {
            key,
            d,
            e,
            cost_scale,
            rho,
            rho_vec,
            kinv,
            x: DVector::zeros(sf.n),
            z: vec![0.0; sf.m],
            y: vec![0.0; sf.m],
        })
    }

    fn factor(&mut self, sf: &StandardForm, d: &[f64], e: &[f64], c: f64, rho_vec: &[f64]) -> Result<DMatrix<f64>> {
        self.refactorizations += 1;
        let n = sf.n;
        let mut k = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            k[(j, j)] = c * sf.p_diag[j] * d[j] * d[j] + self.settings.sigma;
        }
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for (r, row) in sf.rows.iter().enumerate() {
            scratch.clear();
            scratch.extend(row.iter().map(|&(j, a)| (j, a * e[r] * d[j])));
            let w = rho_vec[r];
            for &(i, ai) in &scratch {
                for &(j, aj) in &scratch {
                    k[(i, j)] += w * ai * aj;
                }
            }
        }
        Cholesky::new(k)
            .map(|c| c.inverse())
            .ok_or_else(|| ConicError::Eigen("KKT matrix is not positive definite".into()))
    }

    fn iterate(&mut self, sf: &StandardForm, cache: &mut Cache) -> Result<ConicSolution> {
        let s = self.settings.clone();
        let (n, m) = (sf.n, sf.m);
        let c = cache.cost_scale;
        // scaled data
        let p: Vec<f64> = (0..n).map(|j| c * sf.p_diag[j] * cache.d[j] * cache.d[j]).collect();
        let q: Vec<f64> = (0..n).map(|j| c * sf.q[j] * cache.d[j]).collect();
        let a: Vec<Vec<(usize, f64)>> = sf
            .rows
            .iter()
            .enumerate()
            .map(|(r, row)| row.iter().map(|&(j, v)| (j, v * cache.e[r] * cache.d[j])).collect())
            .collect();
        let lo: Vec<f64> = (0..m).map(|r| sf.lo[r] * cache.e[r]).collect();
        let hi: Vec<f64> = (0..m).map(|r| sf.hi[r] * cache.e[r]).collect();
        let shift: Vec<f64> = (0..m).map(|r| sf.shift[r] * cache.e[r]).collect();

        let mut x = cache.x.clone();
        let mut z = cache.z.clone();
        let mut y = cache.y.clone();
        let mut y_prev = y.clone();
        let mut rhs = DVector::<f64>::zeros(n);
        let mut xt = DVector::<f64>::zeros(n);
        let mut zt = vec![0.0; m];
        let mut v = vec![0.0; m];
        let mut atv = vec![0.0; n];

        let mut status = Status::MaxIters;
        let mut iters = 0;
        let mut report = Residuals::default();

        let mut aa = Anderson::new(s.anderson_mem);
        let mut w = DVector::<f64>::zeros(n + m);
        let mut fw = DVector::<f64>::zeros(n + m);
        // plain successor of the last accepted point, used when an
        // extrapolated point turns out worse
        let mut fallback: Option<(DVector<f64>, f64)> = None;
        pack_state(&x, &z, &y, &cache.rho_vec, &mut w);

        for it in 1..=s.max_iters.max(1) {
            iters = it;
            // rhs = σx − q + Aᵀ(Rz − y)
            for r in 0..m {
                v[r] = cache.rho_vec[r] * z[r] - y[r];
            }
            mul_at(&a, &v, &mut atv);
            for j in 0..n {
                rhs[j] = s.sigma * x[j] - q[j] + atv[j];
            }
            xt.gemv(1.0, &cache.kinv, &rhs, 0.0);
            mul_a(&a, xt.as_slice(), &mut zt);
            for j in 0..n {
                x[j] = s.alpha * xt[j] + (1.0 - s.alpha) * x[j];
            }
            y_prev.copy_from_slice(&y);
            for r in 0..m {
                let zr = s.alpha * zt[r] + (1.0 - s.alpha) * z[r];
                v[r] = zr + y[r] / cache.rho_vec[r];
            }
            project(sf, &lo, &hi, &shift, &v, &mut z)?;
            for r in 0..m {
                y[r] = cache.rho_vec[r] * (v[r] - z[r]);
            }

            if s.anderson_mem > 0 {
                pack_state(&x, &z, &y, &cache.rho_vec, &mut fw);
                let gnorm = (&fw - &w).norm();
                if let Some((plain, ref_norm)) = fallback.take() {
                    if !(gnorm <= ref_norm) {
                        // reject the extrapolation and resume from the plain iterate
                        aa.reset();
                        w.copy_from(&plain);
                        unpack_state(sf, (&lo, &hi, &shift), &cache.rho_vec, &w, &mut x, &mut z, &mut y)?;
                        continue;
                    }
                }
                if it % s.check_every != 0 && it != s.max_iters {
                    match aa.push(&w, &fw) {
                        Some(next) => {
                            fallback = Some((fw.clone(), gnorm));
                            w.copy_from(&next);
                            unpack_state(sf, (&lo, &hi, &shift), &cache.rho_vec, &w, &mut x, &mut z, &mut y)?;
                        }
                        None => w.copy_from(&fw),
                    }
                    continue;
                }
                w.copy_from(&fw);
            } else if it % s.check_every != 0 && it != s.max_iters {
                continue;
            }
            report = residuals(sf, cache, &x, &z, &y);
            if report.primal <= s.tol && report.dual <= s.tol && report.gap <= s.tol {
                status = Status::Optimal;
                break;
            }
            if primal_infeasible(sf, cache, &y, &y_prev, s.infeasibility_tol) {
                status = Status::Infeasible;
                break;
            }
            if s.adaptive_rho && it % s.adapt_every == 0 {
                let new_rho = adapted_rho(&p, &q, &a, &x, &z, &y, cache.rho);
                if new_rho > 5.0 * cache.rho || new_rho < 0.2 * cache.rho {
                    cache.rho = new_rho;
                    cache.rho_vec = rho_vector(sf, new_rho);
                    cache.kinv = self.factor(sf, &cache.d, &cache.e, c, &cache.rho_vec)?;
                    aa.reset();
                    pack_state(&x, &z, &y, &cache.rho_vec, &mut w);
                }
            }
        }
        if iters % s.check_every != 0 && status == Status::MaxIters {
            report = residuals(sf, cache, &x, &z, &y);
        }

        cache.x = x.clone();
        cache.z = z.clone();
        cache.y = y.clone();

        let xu: Vec<f64> = (0..n).map(|j| x[j] * cache.d[j]).collect();
        let zu: Vec<f64> = (0..m).map(|r| z[r] / cache.e[r]).collect();
        let yu: Vec<f64> = (0..m).map(|r| y[r] * cache.e[r] / c).collect();
        Ok(ConicSolution {
            status,
            objective: report.objective,
            x: xu,
            z: zu,
            y: yu,
            primal_residual: report.primal,
            dual_residual: report.dual,
            gap: report.gap,
            iterations: iters,
            constraint_rows: Vec::new(),
            block_rows: Vec::new(),
        })
    }
}

/// ADMM state as `(x, v)` with `v = z + y/ρ` the point before projection.
fn pack_state(x: &DVector<f64>, z: &[f64], y: &[f64], rho: &[f64], w: &mut DVector<f64>) {
    let n = x.len();
    w.rows_mut(0, n).copy_from(x);
    for (r, out) in w.as_mut_slice()[n..].iter_mut().enumerate() {
        *out = z[r] + y[r] / rho[r];
    }
}

#[allow(clippy::too_many_arguments)]
fn unpack_state(
    sf: &StandardForm,
    bounds: (&[f64], &[f64], &[f64]),
    rho: &[f64],
    w: &DVector<f64>,
    x: &mut DVector<f64>,
    z: &mut [f64],
    y: &mut [f64],
) -> Result<()> {
    let n = x.len();
    x.copy_from(&w.rows(0, n));
    let v = &w.as_slice()[n..];
    project(sf, bounds.0, bounds.1, bounds.2, v, z)?;
    for r in 0..z.len() {
        y[r] = rho[r] * (v[r] - z[r]);
    }
    Ok(())
}

fn rho_vector(sf: &StandardForm, rho: f64) -> Vec<f64> {
    (0..sf.m)
        .map(|r| if sf.is_equality_row(r) { 1e3 * rho } else { rho })
        .collect()
}

fn mul_a(a: &[Vec<(usize, f64)>], x: &[f64], out: &mut [f64]) {
    for (r, row) in a.iter().enumerate() {
        out[r] = row.iter().map(|&(j, v)| v * x[j]).sum();
    }
}

fn mul_at(a: &[Vec<(usize, f64)>], y: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (r, row) in a.iter().enumerate() {
        let yr = y[r];
        if yr == 0.0 {
            continue;
        }
        for &(j, v) in row {
            out[j] += v * yr;
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Ruiz equilibration of the KKT matrix, uniform within each cone segment.
fn ruiz(sf: &StandardForm, iters: usize) -> (Vec<f64>, Vec<f64>) {
    let (n, m) = (sf.n, sf.m);
    let mut d = vec![1.0; n];
    let mut e = vec![1.0; m];
    let mut col = vec![0.0; n];
    let mut row = vec![0.0; m];
    let inv_sqrt = |x: f64| if x < 1e-8 { 1.0 } else { (1.0 / x.sqrt()).clamp(1e-4, 1e4) };
    for _ in 0..iters {
        for j in 0..n {
            col[j] = (sf.p_diag[j] * d[j] * d[j]).abs();
        }
        for (r, rw) in sf.rows.iter().enumerate() {
            let mut rm: f64 = 0.0;
            for &(j, a) in rw {
                let v = (a * e[r] * d[j]).abs();
                rm = rm.max(v);
                if v > col[j] {
                    col[j] = v;
                }
            }
            row[r] = rm;
        }
        let dd: Vec<f64> = col.iter().map(|&c| inv_sqrt(c)).collect();
        let mut de: Vec<f64> = row.iter().map(|&c| inv_sqrt(c)).collect();
        for seg in &sf.segments {
            if !matches!(seg.kind, SegmentKind::Box) && !seg.rows.is_empty() {
                let mean = de[seg.rows.clone()].iter().sum::<f64>() / seg.rows.len() as f64;
                de[seg.rows.clone()].iter_mut().for_each(|x| *x = mean);
            }
        }
        for j in 0..n {
            d[j] = (d[j] * dd[j]).clamp(1e-6, 1e6);
        }
        for r in 0..m {
            e[r] = (e[r] * de[r]).clamp(1e-6, 1e6);
        }
    }
    (d, e)
}

fn project_soc(w: &mut [f64]) {
    let t = w[0];
    let nx = w[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
    if nx <= t {
        return;
    }
    if nx <= -t {
        w.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let a = 0.5 * (t + nx);
    w[0] = a;
    let f = a / nx;
    w[1..].iter_mut().for_each(|x| *x *= f);
}

fn project(sf: &StandardForm, lo: &[f64], hi: &[f64], shift: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
    for seg in &sf.segments {
        let rows = seg.rows.clone();
        match seg.kind {
            SegmentKind::Box => {
                for r in rows {
                    out[r] = v[r].max(lo[r]).min(hi[r]);
                }
            }
            SegmentKind::Soc => {
                let mut w: Vec<f64> = rows.clone().map(|r| v[r] - shift[r]).collect();
                project_soc(&mut w);
                for (k, r) in rows.enumerate() {
                    out[r] = w[k] + shift[r];
                }
            }
            SegmentKind::Psd { dim } => {
                let h = unpack_hermitian(&v[rows.clone()], dim);
                let ph = hermitian_psd_project(&h)?;
                pack_hermitian(&ph, &mut out[rows]);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Default, Clone, Copy)]
struct Residuals {
    primal: f64,
    dual: f64,
    gap: f64,
    objective: f64,
}

/// Residuals evaluated on unscaled data.
fn residuals(sf: &StandardForm, cache: &Cache, x: &DVector<f64>, z: &[f64], y: &[f64]) -> Residuals {
    let (n, m) = (sf.n, sf.m);
    let c = cache.cost_scale;
    let xu: Vec<f64> = (0..n).map(|j| x[j] * cache.d[j]).collect();
    let zu: Vec<f64> = (0..m).map(|r| z[r] / cache.e[r]).collect();
    let yu: Vec<f64> = (0..m).map(|r| y[r] * cache.e[r] / c).collect();
    let mut ax = vec![0.0; m];
    mul_a(&sf.rows, &xu, &mut ax);
    let mut aty = vec![0.0; n];
    mul_at(&sf.rows, &yu, &mut aty);
    let px: Vec<f64> = (0..n).map(|j| sf.p_diag[j] * xu[j]).collect();

    let prim = (0..m).map(|r| (ax[r] - zu[r]).abs()).fold(0.0, f64::max);
    let prim_scale = inf_norm(&ax).max(inf_norm(&zu));
    let dual = (0..n).map(|j| (px[j] + sf.q[j] + aty[j]).abs()).fold(0.0, f64::max);
    let dual_scale = inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&sf.q));

    let xpx: f64 = (0..n).map(|j| xu[j] * px[j]).sum();
    let qx: f64 = (0..n).map(|j| sf.q[j] * xu[j]).sum();
    let primal_obj = 0.5 * xpx + qx;
    let dual_obj = -0.5 * xpx - support(sf, &yu);
    Residuals {
        primal: prim / (1.0 + prim_scale),
        dual: dual / (1.0 + dual_scale),
        gap: (primal_obj - dual_obj).abs() / (1.0 + primal_obj.abs() + dual_obj.abs()),
        objective: primal_obj + sf.q_const,
    }
}

/// Support function of the constraint set at `y`, ignoring components whose
/// sign is incompatible with an infinite bound (multipliers sit in the normal
/// cone by construction, so those are rounding noise).
fn support(sf: &StandardForm, y: &[f64]) -> f64 {
    let mut s = 0.0;
    for seg in &sf.segments {
        match seg.kind {
            SegmentKind::Box => {
                for r in seg.rows.clone() {
                    if y[r] > 0.0 && sf.hi[r].is_finite() {
                        s += sf.hi[r] * y[r];
                    } else if y[r] < 0.0 && sf.lo[r].is_finite() {
                        s += sf.lo[r] * y[r];
                    }
                }
            }
            _ => {
                for r in seg.rows.clone() {
                    s += y[r] * sf.shift[r];
                }
            }
        }
    }
    s
}

fn primal_infeasible(
    sf: &StandardForm,
    cache: &Cache,
    y: &[f64],
    y_prev: &[f64],
    eps: f64,
) -> bool {
    let m = sf.m;
    let dy: Vec<f64> = (0..m).map(|r| (y[r] - y_prev[r]) * cache.e[r]).collect();
    let norm = inf_norm(&dy);
    if norm < 1e-10 {
        return false;
    }
    let mut atdy = vec![0.0; sf.n];
    mul_at(&sf.rows, &dy, &mut atdy);
    if inf_norm(&atdy) > eps * norm {
        return false;
    }
    let mut sup = 0.0;
    for seg in &sf.segments {
        match seg.kind {
            SegmentKind::Box => {
                for r in seg.rows.clone() {
                    if dy[r] > eps * norm {
                        if !sf.hi[r].is_finite() {
                            return false;
                        }
                        sup += sf.hi[r] * dy[r];
                    } else if dy[r] < -eps * norm {
                        if !sf.lo[r].is_finite() {
                            return false;
                        }
                        sup += sf.lo[r] * dy[r];
                    }
                }
            }
            SegmentKind::Soc => {
                let mut w: Vec<f64> = seg.rows.clone().map(|r| dy[r]).collect();
                project_soc(&mut w);
                if inf_norm(&w) > eps * norm {
                    return false;
                }
                sup += seg.rows.clone().map(|r| dy[r] * sf.shift[r]).sum::<f64>();
            }
            SegmentKind::Psd { dim } => {
                let h = unpack_hermitian(&dy[seg.rows.clone()], dim);
                match hermitian_psd_project(&h) {
                    Ok(p) if p.iter().all(|z| z.norm() <= eps * norm) => {}
                    _ => return false,
                }
            }
        }
    }
    sup < -eps * norm
}

fn adapted_rho(p: &[f64], q: &[f64], a: &[Vec<(usize, f64)>], x: &DVector<f64>, z: &[f64], y: &[f64], rho: f64) -> f64 {
    let n = p.len();
    let m = z.len();
    let mut ax = vec![0.0; m];
    mul_a(a, x.as_slice(), &mut ax);
    let mut aty = vec![0.0; n];
    mul_at(a, y, &mut aty);
    let prim = (0..m).map(|r| (ax[r] - z[r]).abs()).fold(0.0, f64::max);
    let prim_n = inf_norm(&ax).max(inf_norm(z)).max(1e-10);
    let px: Vec<f64> = (0..n).map(|j| p[j] * x[j]).collect();
    let dual = (0..n).map(|j| (px[j] + q[j] + aty[j]).abs()).fold(0.0, f64::max);
    let dual_n = inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(q)).max(1e-10);
    let ratio = ((prim / prim_n) / (dual / dual_n).max(1e-16)).sqrt();
    (rho * ratio).clamp(1e-6, 1e6)
}
