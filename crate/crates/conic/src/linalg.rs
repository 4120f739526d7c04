//! Dense Hermitian helpers: real embedding, PSD projection and rank-one extraction.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

use crate::error::{ConicError, Result};

pub type C64 = Complex<f64>;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

const HERMITIAN_TOL: f64 = 1e-12;

/// Largest entrywise deviation `|H_ij - conj(H_ji)|`.
pub fn hermitian_deviation(h: &CMatrix) -> f64 {
    let n = h.nrows();
    let mut dev: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            dev = dev.max((h[(i, j)] - h[(j, i)].conj()).norm());
        }
    }
    dev
}

fn symmetric_deviation(s: &DMatrix<f64>) -> f64 {
    let n = s.nrows();
    let mut dev: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            dev = dev.max((s[(i, j)] - s[(j, i)]).abs());
        }
    }
    dev
}

fn scale_of<T, F: Fn(&T) -> f64>(it: impl Iterator<Item = T>, f: F) -> f64 {
    it.fold(1.0_f64, |m, x| m.max(f(&x)))
}

/// Real embedding `[[Re H, -Im H], [Im H, Re H]]` of a Hermitian matrix.
///
/// The embedding is symmetric, carries every eigenvalue of `H` twice, and
/// is PSD exactly when `H` is.
pub fn hermitian_embed(h: &CMatrix) -> Result<DMatrix<f64>> {
    if !h.is_square() {
        return Err(ConicError::NotHermitian { deviation: f64::INFINITY });
    }
    let dev = hermitian_deviation(h);
    let scale = scale_of(h.iter(), |z| z.norm());
    if !(dev <= HERMITIAN_TOL * scale) {
        return Err(ConicError::NotHermitian { deviation: dev });
    }
    Ok(embed_unchecked(h))
}

pub(crate) fn embed_unchecked(h: &CMatrix) -> DMatrix<f64> {
    let d = h.nrows();
    let mut m = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        for j in 0..d {
            let z = h[(i, j)];
            m[(i, j)] = z.re;
            m[(i + d, j + d)] = z.re;
            m[(i, j + d)] = -z.im;
            m[(i + d, j)] = z.im;
        }
    }
    m
}

/// Inverse of [`hermitian_embed`]; averages the duplicated blocks.
pub fn hermitian_unembed(m: &DMatrix<f64>) -> CMatrix {
    let d = m.nrows() / 2;
    CMatrix::from_fn(d, d, |i, j| {
        let re = 0.5 * (m[(i, j)] + m[(i + d, j + d)]);
        let im = 0.5 * (m[(i + d, j)] - m[(i, j + d)]);
        C64::new(re, im)
    })
}

fn eigen(s: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if s.iter().any(|x| !x.is_finite()) {
        return Err(ConicError::Eigen("non-finite entry".into()));
    }
    let n = s.nrows().max(1);
    SymmetricEigen::try_new(s, f64::EPSILON, 500 * n)
        .ok_or_else(|| ConicError::Eigen("symmetric QR did not converge".into()))
}

/// Frobenius-nearest PSD matrix: `U max(Λ, 0) Uᵀ`.
pub fn psd_project(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !s.is_square() {
        return Err(ConicError::NotSymmetric { deviation: f64::INFINITY });
    }
    let dev = symmetric_deviation(s);
    let scale = scale_of(s.iter(), |x| x.abs());
    if !(dev <= HERMITIAN_TOL * scale) {
        return Err(ConicError::NotSymmetric { deviation: dev });
    }
    project_symmetrized(s)
}

/// Projection without the symmetry check; the lower triangle is mirrored first.
pub(crate) fn project_symmetrized(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    let mut sym = s.clone();
    for i in 0..n {
        for j in i + 1..n {
            let a = 0.5 * (s[(i, j)] + s[(j, i)]);
            sym[(i, j)] = a;
            sym[(j, i)] = a;
        }
    }
    let eig = eigen(sym)?;
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return Ok(rebuild(&eig, n, |l| l));
    }
    if eig.eigenvalues.iter().all(|&l| l <= 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    Ok(rebuild(&eig, n, |l| l.max(0.0)))
}

fn rebuild(eig: &SymmetricEigen<f64, nalgebra::Dyn>, n: usize, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        let w = f(l);
        if w == 0.0 {
            continue;
        }
        let u = eig.eigenvectors.column(k);
        out.ger(w, &u, &u, 1.0);
    }
    out
}

/// Projection of a Hermitian matrix onto the Hermitian PSD cone.
///
/// Works on the complex matrix directly; this equals projecting the real
/// embedding and mapping back, at a quarter of the cost.
pub fn hermitian_psd_project(h: &CMatrix) -> Result<CMatrix> {
    let n = h.nrows();
    if h.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(ConicError::Eigen("non-finite entry".into()));
    }
    let mut sym = h.clone();
    for i in 0..n {
        sym[(i, i)] = C64::new(h[(i, i)].re, 0.0);
        for j in i + 1..n {
            let a = (h[(i, j)] + h[(j, i)].conj()) * 0.5;
            sym[(i, j)] = a;
            sym[(j, i)] = a.conj();
        }
    }
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 500 * n.max(1))
        .ok_or_else(|| ConicError::Eigen("Hermitian QR did not converge".into()))?;
    if eig.eigenvalues.iter().all(|&l| l <= 0.0) {
        return Ok(CMatrix::zeros(n, n));
    }
    let mut out = CMatrix::zeros(n, n);
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l <= 0.0 {
            continue;
        }
        let u = eig.eigenvectors.column(k);
        out.gerc(C64::new(l, 0.0), &u, &u, C64::new(1.0, 0.0));
    }
    Ok(out)
}

/// Eigen-summary of a Hermitian PSD matrix used for rank diagnostics.
#[derive(Debug, Clone)]
pub struct RankOneFactor {
    /// `sqrt(λ1)·u1`, phase-normalized so entry 0 is real and nonnegative.
    pub vector: CVector,
    pub lambda1: f64,
    pub lambda2: f64,
    /// `λ2 / λ1` (0 for the zero matrix).
    pub ratio: f64,
    /// `sqrt(Σ_{k≥2} λ_k²)`, the Frobenius distance to the best rank-one approximant.
    pub tail_norm: f64,
}

/// Top eigenpair of a Hermitian matrix without enforcing a ratio threshold.
pub fn rank_one_factor(v: &CMatrix) -> Result<RankOneFactor> {
    let d = v.nrows();
    if d == 0 {
        return Ok(RankOneFactor {
            vector: CVector::zeros(0),
            lambda1: 0.0,
            lambda2: 0.0,
            ratio: 0.0,
            tail_norm: 0.0,
        });
    }
    let embedded = hermitian_embed(v)?;
    let eig = eigen(embedded)?;
    let mut order: Vec<usize> = (0..2 * d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    // every eigenvalue of V appears twice in the embedding
    let lambda1 = eig.eigenvalues[order[0]].max(0.0);
    let lambda2 = if d > 1 { eig.eigenvalues[order[2]].max(0.0) } else { 0.0 };
    let tail_sq: f64 = order[2..].iter().map(|&k| eig.eigenvalues[k].powi(2)).sum::<f64>() * 0.5;
    let col = eig.eigenvectors.column(order[0]);
    let mut u = CVector::from_fn(d, |i, _| C64::new(col[i], col[i + d]));
    let norm = u.norm();
    if norm > 0.0 {
        u /= C64::new(norm, 0.0);
    }
    let u0 = u[0];
    if u0.norm() > 0.0 {
        let rot = u0.conj() / u0.norm();
        u *= rot;
        u[0] = C64::new(u[0].re.abs(), 0.0);
    }
    let ratio = if lambda1 > 0.0 { lambda2 / lambda1 } else { 0.0 };
    Ok(RankOneFactor {
        vector: u * C64::new(lambda1.sqrt(), 0.0),
        lambda1,
        lambda2,
        ratio,
        tail_norm: tail_sq.sqrt(),
    })
}

/// Extracts `v` with `V ≈ v vᴴ`, failing when `λ2/λ1 > ratio_tol`.
pub fn rank1_extract(v: &CMatrix, ratio_tol: f64) -> Result<CVector> {
    let f = rank_one_factor(v)?;
    if f.ratio > ratio_tol {
        return Err(ConicError::Rank { ratio: f.ratio });
    }
    Ok(f.vector)
}

/// `Re Tr(A B)` for Hermitian `A`, `B`.
pub fn trace_product(a: &CMatrix, b: &CMatrix) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += (a[(i, j)] * b[(j, i)]).re;
        }
    }
    acc
}
