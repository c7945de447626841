//! Small dense linear algebra: partial-pivoted LU for `k ≤ 16` systems.

use crate::error::{Error, Result};

/// Largest system `solve_small` accepts.
pub const MAX_SOLVE_DIM: usize = 16;

/// Pivots below this magnitude are treated as singular.
pub const PIVOT_TOLERANCE: f64 = 1e-10;

/// `P·A = L·U`, with `L` unit-lower and `U` upper packed into one buffer.
#[derive(Clone, Debug)]
pub struct LuFactors {
    n: usize,
    lu: Vec<f64>,
    /// `perm[i]` is the original row that ended up in position `i`.
    perm: Vec<usize>,
}

impl LuFactors {
    pub fn factor(a: &[f64], n: usize) -> Result<Self> {
        debug_assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut best = col;
            let mut best_abs = lu[col * n + col].abs();
            for row in col + 1..n {
                let v = lu[row * n + col].abs();
                if v > best_abs {
                    best = row;
                    best_abs = v;
                }
            }
            if best_abs < PIVOT_TOLERANCE {
                return Err(Error::SingularMatrix {
                    pivot: best_abs,
                    context: None,
                });
            }
            if best != col {
                for j in 0..n {
                    lu.swap(col * n + j, best * n + j);
                }
                perm.swap(col, best);
            }
            let pivot = lu[col * n + col];
            for row in col + 1..n {
                let factor = lu[row * n + col] / pivot;
                lu[row * n + col] = factor;
                if factor != 0.0 {
                    for j in col + 1..n {
                        lu[row * n + j] -= factor * lu[col * n + j];
                    }
                }
            }
        }
        Ok(LuFactors { n, lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A·x = b` in place for one column.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut acc = y[i];
            for j in 0..i {
                acc -= self.lu[i * n + j] * y[j];
            }
            y[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = y[i];
            for j in i + 1..n {
                acc -= self.lu[i * n + j] * y[j];
            }
            y[i] = acc / self.lu[i * n + i];
        }
        b.copy_from_slice(&y);
    }

    /// Solves `Aᵀ·x = b` in place for one column.
    pub fn solve_transpose_in_place(&self, b: &mut [f64]) {
        // Aᵀ = Uᵀ·Lᵀ·P, so solve Uᵀw = b, Lᵀv = w, then x = Pᵀv.
        let n = self.n;
        let mut w = b.to_vec();
        for i in 0..n {
            let mut acc = w[i];
            for j in 0..i {
                acc -= self.lu[j * n + i] * w[j];
            }
            w[i] = acc / self.lu[i * n + i];
        }
        for i in (0..n).rev() {
            let mut acc = w[i];
            for j in i + 1..n {
                acc -= self.lu[j * n + i] * w[j];
            }
            w[i] = acc;
        }
        for (i, &p) in self.perm.iter().enumerate() {
            b[p] = w[i];
        }
    }

    /// Solves `A·X = B` for `B` laid out as `[batch, n, m]`.
    pub fn solve_batched(&self, b: &[f64], m: usize) -> Vec<f64> {
        self.apply_columns(b, m, |col| self.solve_in_place(col))
    }

    /// Solves `Aᵀ·X = B` for `B` laid out as `[batch, n, m]`.
    pub fn solve_transpose_batched(&self, b: &[f64], m: usize) -> Vec<f64> {
        self.apply_columns(b, m, |col| self.solve_transpose_in_place(col))
    }

    fn apply_columns(&self, b: &[f64], m: usize, solve: impl Fn(&mut [f64])) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; b.len()];
        let mut col = vec![0.0; n];
        for (src, dst) in b.chunks(n * m).zip(out.chunks_mut(n * m)) {
            for j in 0..m {
                for i in 0..n {
                    col[i] = src[i * m + j];
                }
                solve(&mut col);
                for i in 0..n {
                    dst[i * m + j] = col[i];
                }
            }
        }
        out
    }
}
