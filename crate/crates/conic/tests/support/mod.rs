//! Independent oracles and the documented example table for the conic
//! primitives. Shared with the acceptance suite of the dispatch crate.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use oid_conic::{
    hermitian_embed, psd_project, rank1_extract, solve, CMatrix, CVector, ConicError, ConicProgram, LinExpr, Status, C64,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cyclic Jacobi eigensolver, independent of nalgebra's QR path.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| m[(i, j)].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[(i, i)]).collect(), v)
}

pub struct RandomSdp {
    pub c: CMatrix,
    pub a: Vec<CMatrix>,
    pub b: Vec<f64>,
    pub feasible: CMatrix,
}

pub fn random_hermitian(rng: &mut ChaCha8Rng, d: usize) -> CMatrix {
    let r = CMatrix::from_fn(d, d, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    (&r + r.adjoint()) * C64::new(0.5, 0.0)
}

pub fn random_sdp(seed: u64, d: usize, k: usize) -> RandomSdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = CMatrix::from_fn(d, d, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let c = &g * g.adjoint() + CMatrix::identity(d, d) * C64::new(0.2, 0.0);
    let a: Vec<CMatrix> = (0..k).map(|_| random_hermitian(&mut rng, d)).collect();
    let f = CMatrix::from_fn(d, d, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let feasible = &f * f.adjoint() + CMatrix::identity(d, d) * C64::new(0.5, 0.0);
    let b = a.iter().map(|ai| tr(ai, &feasible)).collect();
    RandomSdp { c, a, b, feasible }
}

pub fn tr(a: &CMatrix, b: &CMatrix) -> f64 {
    (a * b).trace().re
}

pub fn herm_project_complex(h: &CMatrix) -> CMatrix {
    let eig = SymmetricEigen::new(h.clone());
    let d = h.nrows();
    let mut out = CMatrix::zeros(d, d);
    for k in 0..d {
        let l = eig.eigenvalues[k];
        if l > 0.0 {
            let u = eig.eigenvectors.column(k);
            out += &u * u.adjoint() * C64::new(l, 0.0);
        }
    }
    out
}

/// Augmented-Lagrangian outer loop with accelerated projected-gradient inner solves.
pub fn first_order_oracle(sdp: &RandomSdp) -> f64 {
    let d = sdp.c.nrows();
    let rho = 5.0;
    let a_norm_sq: f64 = sdp.a.iter().map(|a| a.norm_squared()).sum();
    let step = 1.0 / (rho * a_norm_sq);
    let mut lam = vec![0.0; sdp.a.len()];
    let mut x = CMatrix::identity(d, d);
    for _outer in 0..400 {
        let mut yk = x.clone();
        let mut t = 1.0_f64;
        for _inner in 0..4000 {
            let mut g = sdp.c.clone();
            for (i, ai) in sdp.a.iter().enumerate() {
                let r = tr(ai, &yk) - sdp.b[i];
                g += ai * C64::new(lam[i] + rho * r, 0.0);
            }
            let x_new = herm_project_complex(&(&yk - g * C64::new(step, 0.0)));
            let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let moved = (&x_new - &x).norm();
            yk = &x_new + (&x_new - &x) * C64::new((t - 1.0) / t_new, 0.0);
            x = x_new;
            t = t_new;
            if moved < 1e-14 {
                break;
            }
        }
        let mut worst: f64 = 0.0;
        for (i, ai) in sdp.a.iter().enumerate() {
            let r = tr(ai, &x) - sdp.b[i];
            lam[i] += rho * r;
            worst = worst.max(r.abs());
        }
        if worst < 1e-11 {
            break;
        }
    }
    tr(&sdp.c, &x)
}

pub fn program_of(sdp: &RandomSdp) -> (ConicProgram, oid_conic::PsdBlock) {
    let d = sdp.c.nrows();
    let mut p = ConicProgram::new();
    let blk = p.add_psd_block(d);
    for (ai, &bi) in sdp.a.iter().zip(&sdp.b) {
        let mut e = LinExpr::new();
        e.add_trace(blk, ai, 1.0);
        p.add_equality(e, bi);
    }
    let mut obj = LinExpr::new();
    obj.add_trace(blk, &sdp.c, 1.0);
    p.add_objective(&obj);
    (p, blk)
}


fn sorted_eigs(m: &DMatrix<f64>) -> Vec<f64> {
    let mut e: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    e.sort_by(f64::total_cmp);
    e
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Every documented example of the primitives, as `(name, passed)`.
pub fn example_table() -> Vec<(&'static str, bool)> {
    let c = C64::new;
    let mut rows = Vec::new();

    let i4 = hermitian_embed(&CMatrix::identity(2, 2)).unwrap();
    rows.push(("embed I2 -> I4", (i4 - DMatrix::<f64>::identity(4, 4)).norm() == 0.0));
    let pauli = CMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.0, -1.0), c(0.0, 1.0), c(0.0, 0.0)]);
    rows.push(("embed Pauli-y spectrum", close(&sorted_eigs(&hermitian_embed(&pauli).unwrap()), &[-1.0, -1.0, 1.0, 1.0], 1e-12)));
    rows.push(("embed 0 -> 0", hermitian_embed(&CMatrix::zeros(3, 3)).unwrap().norm() == 0.0));

    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -1.0]));
    let want = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 0.0]));
    rows.push(("project diag(1,-1)", (psd_project(&d).unwrap() - want).norm() < 1e-14));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = DMatrix::<f64>::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
    let psd = &r * r.transpose();
    rows.push(("project fixes PSD", (psd_project(&psd).unwrap() - &psd).norm() < 1e-12));
    let mut ok = true;
    for _ in 0..20 {
        let r = DMatrix::<f64>::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let s = (&r + r.transpose()) * 0.5;
        let (lam, u) = jacobi_eigen(&s);
        let mut oracle = DMatrix::<f64>::zeros(5, 5);
        for k in 0..5 {
            if lam[k] > 0.0 {
                let col = u.column(k);
                oracle += lam[k] * &col * col.transpose();
            }
        }
        ok &= (psd_project(&s).unwrap() - oracle).norm() < 1e-10;
    }
    rows.push(("project vs Jacobi oracle", ok));

    let v = CVector::from_vec(vec![c(1.0, 0.0), c(0.5, 0.5)]);
    let vv = &v * v.adjoint();
    let got = rank1_extract(&vv, 1e-6).unwrap();
    // equal up to a unit phase
    let phase = (got.adjoint() * &v)[(0, 0)];
    rows.push(("rank1 exact", (phase.norm() - v.norm_squared()).abs() < 1e-12 && (&got * got.adjoint() - &vv).norm() < 1e-12));
    let rank2 = matches!(rank1_extract(&CMatrix::identity(2, 2), 1e-6), Err(ConicError::Rank { ratio }) if (ratio - 1.0).abs() < 1e-12);
    rows.push(("rank1 rejects I2", rank2));
    let v3 = CVector::from_vec(vec![c(1.0, 0.0), c(0.3, -0.4), c(-0.2, 0.9)]);
    let noisy = &v3 * v3.adjoint() + CMatrix::identity(3, 3) * c(1e-9, 0.0);
    let got = rank1_extract(&noisy, 1e-6).unwrap();
    rows.push(("rank1 perturbed", (0..3).all(|i| (got[i] - v3[i]).norm() < 1e-4)));

    let tol = 1e-7;
    let mut p = ConicProgram::new();
    let x = p.add_free();
    let s = p.add_nonneg();
    p.add_equality(LinExpr::var(x).with(s, -1.0), 3.0);
    p.add_objective(&LinExpr::var(x));
    let sol = solve(&p, tol, 50_000).unwrap();
    rows.push(("solve 1-D LP", sol.status == Status::Optimal && (sol.value(x) - 3.0).abs() < 1e-5));

    let mut p = ConicProgram::new();
    let b = p.add_psd_block(2);
    for k in 0..2 {
        let mut e = LinExpr::new();
        e.add_entry_re(b, k, k, 1.0);
        p.add_equality(e, 1.0);
    }
    let mut t = LinExpr::new();
    t.add_trace(b, &CMatrix::identity(2, 2), 1.0);
    p.add_objective(&t);
    let sol = solve(&p, tol, 50_000).unwrap();
    rows.push(("solve diagonal SDP", sol.status == Status::Optimal && (sol.objective - 2.0).abs() < 1e-5));

    let mut p = ConicProgram::new();
    let t = p.add_free();
    p.add_soc(LinExpr::var(t), vec![LinExpr::constant(3.0), LinExpr::constant(4.0)]);
    p.add_objective(&LinExpr::var(t));
    let sol = solve(&p, tol, 50_000).unwrap();
    rows.push(("solve SOC", sol.status == Status::Optimal && (sol.value(t) - 5.0).abs() < 1e-5));

    rows
}

/// Largest `|solver − oracle|` objective gap over a few random SDPs (d=4, 5 equalities).
pub fn random_sdp_gap(seeds: std::ops::Range<u64>) -> f64 {
    seeds
        .map(|seed| {
            let sdp = random_sdp(100 + seed, 4, 5);
            let (p, _) = program_of(&sdp);
            let sol = solve(&p, 1e-9, 200_000).unwrap();
            if sol.status != Status::Optimal {
                return f64::INFINITY;
            }
            (sol.objective - first_order_oracle(&sdp)).abs()
        })
        .fold(0.0, f64::max)
}
