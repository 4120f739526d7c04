//! Program builder: Hermitian PSD blocks, scalars, affine rows and second-order cones.
//!
//! Every variable is a real coordinate. A Hermitian block `X` of dimension `d`
//! occupies `d²` coordinates: the `d` diagonal entries, followed by
//! `(√2·Re X_ij, √2·Im X_ij)` for each `i < j` in row-major order. With this
//! scaling the Euclidean inner product of coordinate vectors equals
//! `Re Tr(X Y)`, so PSD projection in coordinates is the Frobenius projection.

use std::f64::consts::SQRT_2;
use std::ops::Range;

use crate::error::{ConicError, Result};
use crate::linalg::{CMatrix, C64};

/// Handle to a scalar decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScalarVar(pub(crate) usize);

impl ScalarVar {
    pub fn coord(self) -> usize {
        self.0
    }
}

/// Handle to a Hermitian PSD matrix variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PsdBlock {
    pub(crate) offset: usize,
    pub(crate) dim: usize,
}

impl PsdBlock {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.dim * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.dim == 0
    }

    pub fn coords(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn diag_coord(&self, i: usize) -> usize {
        debug_assert!(i < self.dim);
        self.offset + i
    }

    /// Coordinates of `√2·Re X_ij` and `√2·Im X_ij` for `i < j`.
    pub fn pair_coords(&self, i: usize, j: usize) -> (usize, usize) {
        debug_assert!(i < j && j < self.dim);
        let d = self.dim;
        // pairs preceding row i: sum_{r<i} (d - 1 - r)
        let before = i * (2 * d - i - 1) / 2;
        let k = before + (j - i - 1);
        let base = self.offset + d + 2 * k;
        (base, base + 1)
    }
}

/// Packs a Hermitian matrix into block coordinates.
pub fn pack_hermitian(h: &CMatrix, out: &mut [f64]) {
    let d = h.nrows();
    debug_assert_eq!(out.len(), d * d);
    for i in 0..d {
        out[i] = h[(i, i)].re;
    }
    let mut k = d;
    for i in 0..d {
        for j in i + 1..d {
            let z = 0.5 * (h[(i, j)] + h[(j, i)].conj());
            out[k] = SQRT_2 * z.re;
            out[k + 1] = SQRT_2 * z.im;
            k += 2;
        }
    }
}

/// Inverse of [`pack_hermitian`].
pub fn unpack_hermitian(x: &[f64], d: usize) -> CMatrix {
    debug_assert_eq!(x.len(), d * d);
    let mut h = CMatrix::zeros(d, d);
    for i in 0..d {
        h[(i, i)] = C64::new(x[i], 0.0);
    }
    let mut k = d;
    for i in 0..d {
        for j in i + 1..d {
            let z = C64::new(x[k], x[k + 1]) / SQRT_2;
            h[(i, j)] = z;
            h[(j, i)] = z.conj();
            k += 2;
        }
    }
    h
}

/// Affine expression `Σ c_k x_k + constant` over coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub(crate) terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn var(v: ScalarVar) -> Self {
        Self { terms: vec![(v.0, 1.0)], constant: 0.0 }
    }

    pub fn with(mut self, v: ScalarVar, coeff: f64) -> Self {
        self.add_var(v, coeff);
        self
    }

    pub fn plus(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn add_var(&mut self, v: ScalarVar, coeff: f64) {
        if coeff != 0.0 {
            self.terms.push((v.0, coeff));
        }
    }

    pub fn add_coord(&mut self, coord: usize, coeff: f64) {
        if coeff != 0.0 {
            self.terms.push((coord, coeff));
        }
    }

    pub fn add_expr(&mut self, other: &LinExpr, scale: f64) {
        self.terms.extend(other.terms.iter().map(|&(k, c)| (k, c * scale)));
        self.constant += scale * other.constant;
    }

    /// Adds `scale · Re X_ij`.
    pub fn add_entry_re(&mut self, block: PsdBlock, i: usize, j: usize, scale: f64) {
        if i == j {
            self.add_coord(block.diag_coord(i), scale);
        } else {
            let (re, _) = block.pair_coords(i.min(j), i.max(j));
            self.add_coord(re, scale / SQRT_2);
        }
    }

    /// Adds `scale · Im X_ij` (zero on the diagonal).
    pub fn add_entry_im(&mut self, block: PsdBlock, i: usize, j: usize, scale: f64) {
        if i == j {
            return;
        }
        let (_, im) = block.pair_coords(i.min(j), i.max(j));
        let sign = if i < j { 1.0 } else { -1.0 };
        self.add_coord(im, sign * scale / SQRT_2);
    }

    /// Adds `scale · Re Tr(C X)` for the Hermitian coefficient matrix `C`.
    pub fn add_trace(&mut self, block: PsdBlock, c: &CMatrix, scale: f64) {
        let d = block.dim;
        debug_assert_eq!(c.nrows(), d);
        for i in 0..d {
            let cii = c[(i, i)].re;
            if cii != 0.0 {
                self.add_coord(block.diag_coord(i), scale * cii);
            }
            for j in i + 1..d {
                let z = c[(i, j)];
                if z.re == 0.0 && z.im == 0.0 {
                    continue;
                }
                let (re, im) = block.pair_coords(i, j);
                self.add_coord(re, scale * SQRT_2 * z.re);
                self.add_coord(im, scale * SQRT_2 * z.im);
            }
        }
    }

    /// Evaluates the expression at a coordinate vector.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(k, c)| c * x[k]).sum::<f64>()
    }

    pub(crate) fn merged(&self) -> Vec<(usize, f64)> {
        let mut t = self.terms.clone();
        t.sort_by_key(|&(k, _)| k);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(t.len());
        for (k, c) in t {
            match out.last_mut() {
                Some((lk, lc)) if *lk == k => *lc += c,
                _ => out.push((k, c)),
            }
        }
        out.retain(|&(_, c)| c != 0.0);
        out
    }
}

/// Handle to a constraint, used to read its dual values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConstraintId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    /// `lo ≤ expr ≤ hi`; an equality when `lo == hi`.
    Range { expr: LinExpr, lo: f64, hi: f64 },
    /// `t ≥ ‖(x_1, …, x_k)‖₂`.
    Soc { t: LinExpr, x: Vec<LinExpr> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarKind {
    Free,
    Nonnegative,
}

/// A conic program: minimize `Σ w_k x_k² + cᵀx + c0` subject to affine ranges,
/// second-order cones, and PSD membership of every Hermitian block.
#[derive(Debug, Clone, Default)]
pub struct ConicProgram {
    n: usize,
    blocks: Vec<PsdBlock>,
    scalars: Vec<(usize, ScalarKind)>,
    constraints: Vec<Constraint>,
    linear: Vec<f64>,
    quadratic: Vec<f64>,
    objective_constant: f64,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_coords(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> &[PsdBlock] {
        &self.blocks
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    fn grow(&mut self, k: usize) -> usize {
        let off = self.n;
        self.n += k;
        self.linear.resize(self.n, 0.0);
        self.quadratic.resize(self.n, 0.0);
        off
    }

    pub fn add_psd_block(&mut self, dim: usize) -> PsdBlock {
        let offset = self.grow(dim * dim);
        let b = PsdBlock { offset, dim };
        self.blocks.push(b);
        b
    }

    pub fn add_free(&mut self) -> ScalarVar {
        let k = self.grow(1);
        self.scalars.push((k, ScalarKind::Free));
        ScalarVar(k)
    }

    pub fn add_nonneg(&mut self) -> ScalarVar {
        let k = self.grow(1);
        self.scalars.push((k, ScalarKind::Nonnegative));
        ScalarVar(k)
    }

    fn push(&mut self, c: Constraint) -> ConstraintId {
        self.constraints.push(c);
        ConstraintId(self.constraints.len() - 1)
    }

    pub fn add_equality(&mut self, expr: LinExpr, rhs: f64) -> ConstraintId {
        self.push(Constraint::Range { expr, lo: rhs, hi: rhs })
    }

    pub fn add_range(&mut self, expr: LinExpr, lo: f64, hi: f64) -> ConstraintId {
        self.push(Constraint::Range { expr, lo, hi })
    }

    pub fn add_soc(&mut self, t: LinExpr, x: Vec<LinExpr>) -> ConstraintId {
        self.push(Constraint::Soc { t, x })
    }

    /// Rotated-cone epigraph `s ≥ ‖x‖²` written as the standard cone
    /// `(s + 1)/2 ≥ ‖(x, (s - 1)/2)‖`.
    pub fn add_squared_norm_epigraph(&mut self, s: ScalarVar, x: Vec<LinExpr>) -> ConstraintId {
        let t = LinExpr::new().with(s, 0.5).plus(0.5);
        let mut xs = x;
        xs.push(LinExpr::new().with(s, 0.5).plus(-0.5));
        self.add_soc(t, xs)
    }

    /// Adds `expr` to the objective.
    pub fn add_objective(&mut self, expr: &LinExpr) {
        for &(k, c) in &expr.terms {
            self.linear[k] += c;
        }
        self.objective_constant += expr.constant;
    }

    /// Adds `weight · v²` to the objective.
    pub fn add_square(&mut self, v: ScalarVar, weight: f64) {
        self.quadratic[v.0] += weight;
    }

    pub fn add_square_coord(&mut self, coord: usize, weight: f64) {
        self.quadratic[coord] += weight;
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.objective_constant
            + x.iter()
                .zip(self.linear.iter().zip(&self.quadratic))
                .map(|(&xi, (&c, &w))| c * xi + w * xi * xi)
                .sum::<f64>()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        for (i, c) in self.constraints.iter().enumerate() {
            let check = |e: &LinExpr| -> Result<()> {
                if let Some(&(k, _)) = e.terms.iter().find(|&&(k, _)| k >= self.n) {
                    return Err(ConicError::InvalidProgram(format!(
                        "constraint {i} references coordinate {k} of {}",
                        self.n
                    )));
                }
                if e.terms.iter().any(|(_, c)| !c.is_finite()) || !e.constant.is_finite() {
                    return Err(ConicError::InvalidProgram(format!("constraint {i} has a non-finite coefficient")));
                }
                Ok(())
            };
            match c {
                Constraint::Range { expr, lo, hi } => {
                    check(expr)?;
                    if lo > hi || lo.is_nan() || hi.is_nan() {
                        return Err(ConicError::InvalidProgram(format!("constraint {i} has empty range [{lo}, {hi}]")));
                    }
                }
                Constraint::Soc { t, x } => {
                    check(t)?;
                    for e in x {
                        check(e)?;
                    }
                }
            }
        }
        if let Some(w) = self.quadratic.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(ConicError::InvalidProgram(format!("quadratic weight {w} must be finite and nonnegative")));
        }
        if self.linear.iter().any(|c| !c.is_finite()) {
            return Err(ConicError::InvalidProgram("non-finite linear objective".into()));
        }
        Ok(())
    }

    /// Lowers the program to `min ½xᵀPx + qᵀx s.t. Ax ∈ C`.
    pub(crate) fn standard_form(&self) -> Result<StandardForm> {
        self.validate()?;
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        let mut shift = Vec::new();
        let mut segments = Vec::new();
        let mut constraint_rows = Vec::with_capacity(self.constraints.len());

        for b in &self.blocks {
            let start = rows.len();
            for k in b.coords() {
                rows.push(vec![(k, 1.0)]);
            }
            let end = rows.len();
            lo.resize(end, f64::NEG_INFINITY);
            hi.resize(end, f64::INFINITY);
            shift.resize(end, 0.0);
            segments.push(Segment { rows: start..end, kind: SegmentKind::Psd { dim: b.dim } });
        }
        for &(k, kind) in &self.scalars {
            if kind == ScalarKind::Nonnegative {
                let r = rows.len();
                rows.push(vec![(k, 1.0)]);
                lo.push(0.0);
                hi.push(f64::INFINITY);
                shift.push(0.0);
                segments.push(Segment { rows: r..r + 1, kind: SegmentKind::Box });
            }
        }
        for c in &self.constraints {
            let start = rows.len();
            match c {
                Constraint::Range { expr, lo: l, hi: h } => {
                    rows.push(expr.merged());
                    lo.push(l - expr.constant);
                    hi.push(h - expr.constant);
                    shift.push(0.0);
                    segments.push(Segment { rows: start..start + 1, kind: SegmentKind::Box });
                }
                Constraint::Soc { t, x } => {
                    for e in std::iter::once(t).chain(x.iter()) {
                        rows.push(e.merged());
                        lo.push(f64::NEG_INFINITY);
                        hi.push(f64::INFINITY);
                        // Ax + const ∈ K  ⇔  Ax - (-const) ∈ K
                        shift.push(-e.constant);
                    }
                    segments.push(Segment { rows: start..rows.len(), kind: SegmentKind::Soc });
                }
            }
            constraint_rows.push(start..rows.len());
        }
        Ok(StandardForm {
            n: self.n,
            m: rows.len(),
            p_diag: self.quadratic.iter().map(|w| 2.0 * w).collect(),
            q: self.linear.clone(),
            q_const: self.objective_constant,
            rows,
            lo,
            hi,
            shift,
            segments,
            constraint_rows,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum SegmentKind {
    Box,
    Soc,
    Psd { dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Segment {
    pub rows: Range<usize>,
    pub kind: SegmentKind,
}

/// `min ½xᵀdiag(p)x + qᵀx + q_const  s.t.  z = Ax`, with `z ∈ [lo, hi]` on box
/// rows and `z - shift ∈ K` on cone segments.
#[derive(Debug, Clone)]
pub(crate) struct StandardForm {
    pub n: usize,
    pub m: usize,
    pub p_diag: Vec<f64>,
    pub q: Vec<f64>,
    pub q_const: f64,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub shift: Vec<f64>,
    pub segments: Vec<Segment>,
    pub constraint_rows: Vec<Range<usize>>,
}

impl StandardForm {
    pub fn is_equality_row(&self, r: usize) -> bool {
        self.lo[r] == self.hi[r]
    }
}
