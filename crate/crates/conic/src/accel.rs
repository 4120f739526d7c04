//! Type-II Anderson acceleration for a fixed-point map `w ↦ F(w)`.

use nalgebra::{DMatrix, DVector};

pub(crate) struct Anderson {
    mem: usize,
    /// Columns: successive differences of `g = F(w) − w`.
    dg: Vec<DVector<f64>>,
    /// Columns: successive differences of `F(w)`.
    df: Vec<DVector<f64>>,
    last: Option<(DVector<f64>, DVector<f64>)>,
}

impl Anderson {
    pub fn new(mem: usize) -> Self {
        Self { mem, dg: Vec::new(), df: Vec::new(), last: None }
    }

    pub fn reset(&mut self) {
        self.dg.clear();
        self.df.clear();
        self.last = None;
    }

    /// Records the pair `(w, F(w))` and returns the extrapolated next point,
    /// or `None` while the memory is empty or the least-squares system is
    /// degenerate.
    pub fn push(&mut self, w: &DVector<f64>, f: &DVector<f64>) -> Option<DVector<f64>> {
        let g = f - w;
        if let Some((g_old, f_old)) = self.last.take() {
            if self.dg.len() == self.mem {
                self.dg.remove(0);
                self.df.remove(0);
            }
            self.dg.push(&g - &g_old);
            self.df.push(f - &f_old);
        }
        self.last = Some((g.clone(), f.clone()));
        let k = self.dg.len();
        if k == 0 {
            return None;
        }
        let mut gram = DMatrix::<f64>::zeros(k, k);
        let mut rhs = DVector::<f64>::zeros(k);
        for i in 0..k {
            rhs[i] = self.dg[i].dot(&g);
            for j in 0..=i {
                let v = self.dg[i].dot(&self.dg[j]);
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }
        let trace = gram.trace();
        if !(trace > 0.0) || !trace.is_finite() {
            return None;
        }
        for i in 0..k {
            gram[(i, i)] += 1e-10 * trace;
        }
        let gamma = gram.cholesky()?.solve(&rhs);
        if gamma.iter().any(|c| !c.is_finite()) {
            return None;
        }
        let mut next = f.clone();
        for i in 0..k {
            next.axpy(-gamma[i], &self.df[i], 1.0);
        }
        Some(next)
    }
}
