//! Dense two-phase tableau simplex for small linear programs.
//!
//! Solves `maximize c'x  subject to  A x <= b,  x >= 0` with Bland's rule for
//! both the entering and the leaving variable, so pivoting is deterministic
//! and cannot cycle.

use thiserror::Error;

const PIVOT_EPS: f64 = 1e-11;
const FEAS_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("dimension mismatch in linear program data")]
    Dimension,
    #[error("pivot limit reached")]
    PivotLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub value: f64,
    /// Optimal multipliers `y >= 0` of `A x <= b`, so that `b'y = value`.
    pub duals: Vec<f64>,
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    basis: Vec<usize>,
    ncols: usize,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.rows[i][self.ncols]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                row[c] = 0.0;
            }
        }
        self.basis[r] = c;
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut r = cost.to_vec();
        for (i, &bi) in self.basis.iter().enumerate() {
            let cb = cost[bi];
            if cb != 0.0 {
                for (rj, t) in r.iter_mut().zip(&self.rows[i]) {
                    *rj -= cb * t;
                }
            }
        }
        r
    }

    /// Maximizes `cost' z` over columns `< allowed`.
    fn optimize(&mut self, cost: &[f64], allowed: usize) -> Result<(), LpError> {
        let limit = 50 * (self.ncols + self.rows.len() + 10);
        for _ in 0..limit {
            let r = self.reduced_costs(cost);
            let Some(enter) = (0..allowed).find(|&j| r[j] > PIVOT_EPS) else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows.len() {
                let a = self.rows[i][enter];
                if a > PIVOT_EPS {
                    let ratio = self.rhs(i).max(0.0) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - 1e-14
                                || (ratio <= lr + 1e-14 && self.basis[i] < self.basis[li])
                            {
                                Some((i, ratio))
                            } else {
                                Some((li, lr))
                            }
                        }
                    };
                }
            }
            match leave {
                Some((row, _)) => self.pivot(row, enter),
                None => return Err(LpError::Unbounded),
            }
        }
        Err(LpError::PivotLimit)
    }
}

/// `maximize c'x  s.t.  A x <= b,  x >= 0`, with `a` given row-wise.
pub fn maximize(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Result<LpSolution, LpError> {
    let k = c.len();
    let m = a.len();
    if b.len() != m || a.iter().any(|r| r.len() != k) {
        return Err(LpError::Dimension);
    }
    let negated: Vec<bool> = b.iter().map(|&bi| bi < 0.0).collect();
    let n_art = negated.iter().filter(|&&x| x).count();
    // Columns: x (k) | slacks (m) | artificials (n_art) | rhs.
    let ncols = k + m + n_art;
    let mut rows = Vec::with_capacity(m);
    let mut basis = Vec::with_capacity(m);
    let mut art = k + m;
    for i in 0..m {
        let sign = if negated[i] { -1.0 } else { 1.0 };
        let mut row = vec![0.0; ncols + 1];
        for j in 0..k {
            row[j] = sign * a[i][j];
        }
        row[k + i] = sign;
        row[ncols] = sign * b[i];
        if negated[i] {
            row[art] = 1.0;
            basis.push(art);
            art += 1;
        } else {
            basis.push(k + i);
        }
        rows.push(row);
    }
    let mut t = Tableau { rows, basis, ncols };

    if n_art > 0 {
        let mut phase1 = vec![0.0; ncols];
        for v in phase1.iter_mut().skip(k + m) {
            *v = -1.0;
        }
        t.optimize(&phase1, ncols)?;
        let infeasibility: f64 = (0..m)
            .filter(|&i| t.basis[i] >= k + m)
            .map(|i| t.rhs(i))
            .sum();
        if infeasibility > FEAS_EPS * (1.0 + b.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
            return Err(LpError::Infeasible);
        }
        // Drive zero-level artificials out of the basis where possible.
        for i in 0..m {
            if t.basis[i] >= k + m {
                if let Some(j) = (0..k + m).find(|&j| t.rows[i][j].abs() > PIVOT_EPS) {
                    t.pivot(i, j);
                }
            }
        }
    }

    let mut cost = vec![0.0; ncols];
    cost[..k].copy_from_slice(c);
    t.optimize(&cost, k + m)?;

    let mut x = vec![0.0; k];
    for (i, &bi) in t.basis.iter().enumerate() {
        if bi < k {
            x[bi] = t.rhs(i).max(0.0);
        }
    }
    let value = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    let r = t.reduced_costs(&cost);
    let duals = (0..m)
        .map(|i| {
            let y = if negated[i] { r[k + i] } else { -r[k + i] };
            y.max(0.0)
        })
        .collect();
    Ok(LpSolution { x, value, duals })
}
