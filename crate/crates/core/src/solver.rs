//! Log-barrier interior-point solver for [`LogDomainProgram`]s.
//!
//! Equalities are eliminated up front (`y = y_p + N w`); the remaining
//! unconstrained barrier problems are minimized by damped Newton steps.
//! Multiplier variables only ever couple to the core variables `w` and to
//! multipliers of the same robust row, so the Newton system is solved through
//! a block Schur complement: each multiplier block is factored on its own and
//! folded into a dense system over the core variables.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{LogDomainProgram, Point};

/// Exponents above this are treated as overflow and the step is rejected.
const EXP_CLIP: f64 = 300.0;
const ARMIJO: f64 = 0.01;
const SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 80;
/// Centering stops once half the squared Newton decrement drops below this.
const NEWTON_TOL: f64 = 1e-10;
const CHOLESKY_REG: f64 = 1e-12;
/// Phase I returns as soon as every constraint has at least this slack.
const PHASE_ONE_MARGIN: f64 = 1e-3;
const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver options: {0}")]
    Options(String),
    #[error("variable index {index} out of range in {what}")]
    Index { what: String, index: usize },
    #[error("program data is not finite in {0}")]
    NonFinite(String),
    #[error("start point has wrong dimensions")]
    StartDimension,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_newton: usize,
    pub barrier_mu: f64,
    pub initial_t: f64,
    /// Record one trace row per Newton step.
    pub trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_newton: 200,
            barrier_mu: 10.0,
            initial_t: 1.0,
            trace: false,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(SolverError::Options(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.barrier_mu > 1.0 && self.barrier_mu.is_finite()) {
            return Err(SolverError::Options(format!(
                "barrier_mu must exceed 1, got {}",
                self.barrier_mu
            )));
        }
        if !(self.initial_t > 0.0 && self.initial_t.is_finite()) {
            return Err(SolverError::Options(format!(
                "initial_t must be positive, got {}",
                self.initial_t
            )));
        }
        if self.max_newton == 0 {
            return Err(SolverError::Options("max_newton must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Optimal,
    Infeasible,
    MaxIterations,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Status::Optimal => "optimal",
            Status::Infeasible => "infeasible",
            Status::MaxIterations => "max_iterations",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    /// 0 for phase I, then 1, 2, ... for the barrier stages.
    pub stage: usize,
    pub newton_iter: usize,
    pub objective: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktReport {
    pub max_violation: f64,
    /// Half the squared Newton decrement of `t f + barrier`, divided by `t`:
    /// the objective error left by imperfect centering.
    pub stationarity: f64,
    /// Duality-gap bound `m / t`.
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.max_violation.max(self.stationarity).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Solution {
    pub y: Vec<f64>,
    pub nu: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub status: Status,
    pub newton_iterations: usize,
    pub t_final: f64,
    /// Objective at the end of each barrier stage.
    pub stage_objectives: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

impl Solution {
    pub fn point(&self) -> Point {
        Point {
            y: self.y.clone(),
            nu: self.nu.clone(),
        }
    }

    pub fn write_trace_csv<W: Write>(&self, writer: W) -> Result<(), SolverError> {
        let mut w = std::io::BufWriter::new(writer);
        writeln!(w, "stage,newton_iter,objective,residual")?;
        for r in &self.trace {
            writeln!(w, "{},{},{},{}", r.stage, r.newton_iter, r.objective, r.residual)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PhaseOne {
    Feasible(Point),
    /// The smallest achievable max-violation is bounded below by this
    /// positive value.
    Infeasible { min_violation: f64 },
    MaxIterations,
}

type Sparse = Vec<(usize, f64)>;

#[derive(Debug, Clone)]
struct Con {
    exps: Vec<(Sparse, f64)>,
    core: Sparse,
    nu: Sparse,
    constant: f64,
}

#[derive(Debug, Clone)]
struct Block {
    nus: Vec<usize>,
    core: Vec<usize>,
    cons: Vec<usize>,
}

/// Equality-free reformulation over `(w, nu)`.
#[derive(Debug, Clone)]
struct Compiled {
    ny: usize,
    rc: usize,
    nnu: usize,
    y_p: Vec<f64>,
    /// `y_v = y_p[v] + sum N[v] . w`
    null_rows: Vec<Sparse>,
    /// `free[k]` is the `y` index of core variable `k` (phase-I slack excluded).
    free: Vec<usize>,
    cons: Vec<Con>,
    obj_core: Sparse,
    obj_nu: Sparse,
    obj_const: f64,
    blocks: Vec<Block>,
    core_cons: Vec<usize>,
    /// Position of each multiplier within its block.
    nu_local: Vec<usize>,
}

enum Reduction {
    Ok(Compiled),
    Inconsistent(f64),
}

fn check_sparse(what: &str, v: &[(usize, f64)], len: usize) -> Result<(), SolverError> {
    for &(i, a) in v {
        if i >= len {
            return Err(SolverError::Index {
                what: what.into(),
                index: i,
            });
        }
        if !a.is_finite() {
            return Err(SolverError::NonFinite(what.into()));
        }
    }
    Ok(())
}

fn validate(prog: &LogDomainProgram) -> Result<(), SolverError> {
    let (ny, nnu) = (prog.ny(), prog.nnu());
    check_sparse("objective", &prog.objective.y, ny)?;
    check_sparse("objective", &prog.objective.nu, nnu)?;
    for c in &prog.inequalities {
        for t in &c.exp_terms {
            check_sparse(&c.label, &t.y, ny)?;
            if !t.offset.is_finite() {
                return Err(SolverError::NonFinite(c.label.clone()));
            }
        }
        check_sparse(&c.label, &c.linear.y, ny)?;
        check_sparse(&c.label, &c.linear.nu, nnu)?;
        if !c.linear.constant.is_finite() {
            return Err(SolverError::NonFinite(c.label.clone()));
        }
    }
    for e in &prog.equalities {
        check_sparse(&e.label, &e.y, ny)?;
        if !e.constant.is_finite() {
            return Err(SolverError::NonFinite(e.label.clone()));
        }
    }
    if let Some(s) = &prog.start {
        if s.y.len() != ny || s.nu.len() != nnu {
            return Err(SolverError::StartDimension);
        }
    }
    Ok(())
}

/// Gauss-Jordan elimination of `A y = -c`. Returns pivot columns with their
/// reduced rows, or the residual of an inconsistent row.
fn reduce_equalities(prog: &LogDomainProgram) -> Result<(Vec<usize>, Vec<Vec<f64>>), f64> {
    let ny = prog.ny();
    let mut rows: Vec<Vec<f64>> = prog
        .equalities
        .iter()
        .map(|e| {
            let mut r = vec![0.0; ny + 1];
            for &(v, a) in &e.y {
                r[v] += a;
            }
            r[ny] = -e.constant;
            r
        })
        .collect();
    let mut pivots = Vec::new();
    let mut next = 0;
    for col in 0..ny {
        if next == rows.len() {
            break;
        }
        let mut best = next;
        for r in next + 1..rows.len() {
            if rows[r][col].abs() > rows[best][col].abs() {
                best = r;
            }
        }
        if rows[best][col].abs() <= PIVOT_TOL {
            continue;
        }
        rows.swap(next, best);
        let p = rows[next][col];
        for v in rows[next].iter_mut() {
            *v /= p;
        }
        let pivot_row = rows[next].clone();
        for (r, row) in rows.iter_mut().enumerate() {
            if r != next && row[col] != 0.0 {
                let f = row[col];
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                row[col] = 0.0;
            }
        }
        pivots.push(col);
        next += 1;
    }
    for row in &rows[next..] {
        let scale = 1.0 + row.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if row[ny].abs() > 1e-9 * scale {
            return Err(row[ny].abs());
        }
    }
    rows.truncate(next);
    Ok((pivots, rows))
}

fn compile(prog: &LogDomainProgram, phase_one: bool) -> Reduction {
    let ny = prog.ny();
    let nnu = prog.nnu();
    let (pivots, rows) = match reduce_equalities(prog) {
        Ok(r) => r,
        Err(resid) => return Reduction::Inconsistent(resid),
    };
    let mut is_pivot = vec![None; ny];
    for (r, &c) in pivots.iter().enumerate() {
        is_pivot[c] = Some(r);
    }
    let free: Vec<usize> = (0..ny).filter(|&v| is_pivot[v].is_none()).collect();
    let mut core_of = vec![usize::MAX; ny];
    for (k, &v) in free.iter().enumerate() {
        core_of[v] = k;
    }
    let mut y_p = vec![0.0; ny];
    let mut null_rows = vec![Vec::new(); ny];
    for v in 0..ny {
        match is_pivot[v] {
            None => null_rows[v] = vec![(core_of[v], 1.0)],
            Some(r) => {
                y_p[v] = rows[r][ny];
                null_rows[v] = free
                    .iter()
                    .enumerate()
                    .filter(|(_, &f)| rows[r][f] != 0.0)
                    .map(|(k, &f)| (k, -rows[r][f]))
                    .collect();
            }
        }
    }
    let rc = free.len() + usize::from(phase_one);

    let mut scratch = vec![0.0; rc];
    let mut seen = vec![false; rc];
    let mut touched: Vec<usize> = Vec::new();
    let mut to_core = |a: &[(usize, f64)]| -> (Sparse, f64) {
        let mut off = 0.0;
        for &(v, coef) in a {
            off += coef * y_p[v];
            for &(k, nk) in &null_rows[v] {
                if !seen[k] {
                    seen[k] = true;
                    touched.push(k);
                }
                scratch[k] += coef * nk;
            }
        }
        touched.sort_unstable();
        let out = touched
            .iter()
            .filter_map(|&k| {
                let v = scratch[k];
                scratch[k] = 0.0;
                seen[k] = false;
                (v != 0.0).then_some((k, v))
            })
            .collect();
        touched.clear();
        (out, off)
    };

    let mut cons = Vec::with_capacity(prog.inequalities.len() + nnu + 1);
    for c in &prog.inequalities {
        let exps = c
            .exp_terms
            .iter()
            .map(|t| {
                let (a, off) = to_core(&t.y);
                (a, off + t.offset)
            })
            .collect();
        let (mut core, off) = to_core(&c.linear.y);
        if phase_one {
            core.push((rc - 1, -1.0));
        }
        cons.push(Con {
            exps,
            core,
            nu: c.linear.nu.clone(),
            constant: c.linear.constant + off,
        });
    }
    for v in 0..nnu {
        cons.push(Con {
            exps: vec![],
            core: if phase_one { vec![(rc - 1, -1.0)] } else { vec![] },
            nu: vec![(v, -1.0)],
            constant: 0.0,
        });
    }
    let (obj_core, obj_nu, obj_const) = if phase_one {
        // s >= -1 keeps phase I bounded.
        cons.push(Con {
            exps: vec![],
            core: vec![(rc - 1, -1.0)],
            nu: vec![],
            constant: -1.0,
        });
        (vec![(rc - 1, 1.0)], vec![], 0.0)
    } else {
        let (core, off) = to_core(&prog.objective.y);
        (core, prog.objective.nu.clone(), prog.objective.constant + off)
    };

    // Multiplier blocks by union-find over constraint supports.
    let mut parent: Vec<usize> = (0..nnu).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for c in &cons {
        if let Some(&(first, _)) = c.nu.first() {
            let a = find(&mut parent, first);
            for &(v, _) in &c.nu[1..] {
                let b = find(&mut parent, v);
                if a != b {
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    parent[hi] = lo;
                }
            }
        }
    }
    let mut block_of_root = vec![usize::MAX; nnu];
    let mut blocks: Vec<Block> = Vec::new();
    let mut nu_local = vec![0; nnu];
    for v in 0..nnu {
        let r = find(&mut parent, v);
        if block_of_root[r] == usize::MAX {
            block_of_root[r] = blocks.len();
            blocks.push(Block {
                nus: vec![],
                core: vec![],
                cons: vec![],
            });
        }
        let b = &mut blocks[block_of_root[r]];
        nu_local[v] = b.nus.len();
        b.nus.push(v);
    }
    let mut core_cons = Vec::new();
    let mut mark = vec![usize::MAX; rc];
    for (ci, c) in cons.iter().enumerate() {
        match c.nu.first() {
            None => core_cons.push(ci),
            Some(&(v, _)) => {
                let bi = block_of_root[find(&mut parent, v)];
                blocks[bi].cons.push(ci);
            }
        }
    }
    for (bi, b) in blocks.iter_mut().enumerate() {
        for &ci in &b.cons {
            let c = &cons[ci];
            let iter = c.core.iter().chain(c.exps.iter().flat_map(|(a, _)| a.iter()));
            for &(k, _) in iter {
                if mark[k] != bi {
                    mark[k] = bi;
                    b.core.push(k);
                }
            }
        }
        b.core.sort_unstable();
    }

    Reduction::Ok(Compiled {
        ny,
        rc,
        nnu,
        y_p,
        null_rows,
        free,
        cons,
        obj_core,
        obj_nu,
        obj_const,
        blocks,
        core_cons,
        nu_local,
    })
}

fn dot(a: &[(usize, f64)], x: &[f64]) -> f64 {
    a.iter().map(|&(i, v)| v * x[i]).sum()
}

impl Compiled {
    fn expand(&self, w: &[f64]) -> Vec<f64> {
        (0..self.ny)
            .map(|v| self.y_p[v] + dot(&self.null_rows[v], w))
            .collect()
    }

    /// Core coordinates of a `y` vector that satisfies the equalities.
    fn project(&self, y: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&v| y[v]).collect()
    }

    fn objective(&self, w: &[f64], nu: &[f64]) -> f64 {
        self.obj_const + dot(&self.obj_core, w) + dot(&self.obj_nu, nu)
    }

    /// Constraint value, or `None` when an exponent exceeds the clip.
    fn con_value(&self, c: &Con, w: &[f64], nu: &[f64]) -> Option<f64> {
        let mut h = c.constant + dot(&c.core, w) + dot(&c.nu, nu);
        for (a, off) in &c.exps {
            let e = off + dot(a, w);
            if e > EXP_CLIP {
                return None;
            }
            h += e.exp();
        }
        Some(h)
    }

    /// Barrier function `t f - sum log(-h)`, `None` outside the domain.
    fn barrier_value(&self, t: f64, w: &[f64], nu: &[f64]) -> Option<f64> {
        let mut v = t * self.objective(w, nu);
        for c in &self.cons {
            let h = self.con_value(c, w, nu)?;
            if !(h < 0.0) {
                return None;
            }
            v -= (-h).ln();
        }
        Some(v)
    }

    fn max_con(&self, w: &[f64], nu: &[f64], skip_last: bool) -> Option<f64> {
        let n = self.cons.len() - usize::from(skip_last);
        let mut m = f64::NEG_INFINITY;
        for c in &self.cons[..n] {
            m = m.max(self.con_value(c, w, nu)?);
        }
        Some(m)
    }
}

/// Gradient and Hessian of the barrier objective, split by block.
struct NewtonSystem {
    g_core: Vec<f64>,
    g_nu: Vec<f64>,
    h_cc: DMatrix<f64>,
    h_cb: Vec<DMatrix<f64>>,
    h_bb: Vec<DMatrix<f64>>,
}

fn cholesky_regularized(m: &DMatrix<f64>) -> nalgebra::linalg::Cholesky<f64, nalgebra::Dyn> {
    if let Some(ch) = m.clone().cholesky() {
        return ch;
    }
    let scale = m.diagonal().iter().fold(1.0f64, |a, &d| a.max(d.abs()));
    let mut reg = CHOLESKY_REG * scale;
    loop {
        let mut r = m.clone();
        for i in 0..r.nrows() {
            r[(i, i)] += reg;
        }
        if let Some(ch) = r.cholesky() {
            return ch;
        }
        reg *= 10.0;
    }
}

impl Compiled {
    fn newton_system(&self, t: f64, w: &[f64], nu: &[f64]) -> NewtonSystem {
        let rc = self.rc;
        let mut g_core = vec![0.0; rc];
        let mut g_nu = vec![0.0; self.nnu];
        for &(k, a) in &self.obj_core {
            g_core[k] += t * a;
        }
        for &(v, a) in &self.obj_nu {
            g_nu[v] += t * a;
        }
        let mut h_cc = DMatrix::zeros(rc, rc);
        let mut h_cb: Vec<DMatrix<f64>> = Vec::with_capacity(self.blocks.len());
        let mut h_bb: Vec<DMatrix<f64>> = Vec::with_capacity(self.blocks.len());
        let mut pos = vec![usize::MAX; rc];
        let mut grad = vec![0.0; rc];
        let mut support: Vec<usize> = Vec::new();

        // Accumulates one constraint into the core gradient scratch and the
        // core Hessian; returns the barrier weight 1/(-h).
        let mut seen = vec![false; rc];
        let core_part = |c: &Con,
                             grad: &mut Vec<f64>,
                             seen: &mut Vec<bool>,
                             support: &mut Vec<usize>,
                             g_core: &mut Vec<f64>,
                             h_cc: &mut DMatrix<f64>|
         -> f64 {
            let mut h = c.constant + dot(&c.core, w) + dot(&c.nu, nu);
            let vals: Vec<f64> = c
                .exps
                .iter()
                .map(|(a, off)| (off + dot(a, w)).exp())
                .collect();
            h += vals.iter().sum::<f64>();
            let inv = 1.0 / (-h);
            debug_assert!(inv > 0.0, "iterate left the barrier domain");
            for &(k, a) in &c.core {
                if !seen[k] {
                    seen[k] = true;
                    support.push(k);
                }
                grad[k] += a;
            }
            for ((a, _), &e) in c.exps.iter().zip(&vals) {
                for &(k, ak) in a {
                    if !seen[k] {
                        seen[k] = true;
                        support.push(k);
                    }
                    grad[k] += e * ak;
                }
                // Curvature of the exponential term: PSD by construction.
                let we = e * inv;
                for &(k1, a1) in a {
                    for &(k2, a2) in a {
                        h_cc[(k1, k2)] += we * a1 * a2;
                    }
                }
            }
            let inv2 = inv * inv;
            for &k1 in support.iter() {
                g_core[k1] += grad[k1] * inv;
                for &k2 in support.iter() {
                    h_cc[(k1, k2)] += inv2 * grad[k1] * grad[k2];
                }
            }
            inv
        };

        for &ci in &self.core_cons {
            core_part(&self.cons[ci], &mut grad, &mut seen, &mut support, &mut g_core, &mut h_cc);
            for &k in &support {
                grad[k] = 0.0;
                seen[k] = false;
            }
            support.clear();
        }
        for b in &self.blocks {
            for (p, &k) in b.core.iter().enumerate() {
                pos[k] = p;
            }
            let kb = b.nus.len();
            let mut cb = DMatrix::zeros(b.core.len(), kb);
            let mut bb = DMatrix::zeros(kb, kb);
            for &ci in &b.cons {
                let c = &self.cons[ci];
                let inv = core_part(c, &mut grad, &mut seen, &mut support, &mut g_core, &mut h_cc);
                let inv2 = inv * inv;
                for &(v, a) in &c.nu {
                    g_nu[v] += a * inv;
                    let lv = self.nu_local[v];
                    for &(v2, a2) in &c.nu {
                        bb[(lv, self.nu_local[v2])] += inv2 * a * a2;
                    }
                    for &k in &support {
                        cb[(pos[k], lv)] += inv2 * grad[k] * a;
                    }
                }
                for &k in &support {
                    grad[k] = 0.0;
                    seen[k] = false;
                }
                support.clear();
            }
            h_cb.push(cb);
            h_bb.push(bb);
        }
        NewtonSystem {
            g_core,
            g_nu,
            h_cc,
            h_cb,
            h_bb,
        }
    }

    /// Newton direction `H d = -g` by block elimination.
    fn newton_step(&self, sys: &NewtonSystem) -> (Vec<f64>, Vec<f64>) {
        let mut schur = sys.h_cc.clone();
        let mut rhs = DVector::from_iterator(self.rc, sys.g_core.iter().map(|g| -g));
        let mut xs: Vec<DMatrix<f64>> = Vec::with_capacity(self.blocks.len());
        let mut zs: Vec<DVector<f64>> = Vec::with_capacity(self.blocks.len());
        for (bi, b) in self.blocks.iter().enumerate() {
            let ch = cholesky_regularized(&sys.h_bb[bi]);
            let gb = DVector::from_iterator(b.nus.len(), b.nus.iter().map(|&v| sys.g_nu[v]));
            let z = ch.solve(&gb);
            let x = ch.solve(&sys.h_cb[bi].transpose());
            let cb = &sys.h_cb[bi];
            let upd = cb * &x;
            let rz = cb * &z;
            for (p, &k) in b.core.iter().enumerate() {
                rhs[k] += rz[p];
                for (q, &k2) in b.core.iter().enumerate() {
                    schur[(k, k2)] -= upd[(p, q)];
                }
            }
            xs.push(x);
            zs.push(z);
        }
        let dc = if self.rc > 0 {
            cholesky_regularized(&schur).solve(&rhs)
        } else {
            DVector::zeros(0)
        };
        let mut dnu = vec![0.0; self.nnu];
        for (bi, b) in self.blocks.iter().enumerate() {
            let dcb = DVector::from_iterator(b.core.len(), b.core.iter().map(|&k| dc[k]));
            let db = -(&zs[bi]) - &xs[bi] * dcb;
            for (l, &v) in b.nus.iter().enumerate() {
                dnu[v] = db[l];
            }
        }
        (dc.iter().copied().collect(), dnu)
    }
}

struct Iterate {
    w: Vec<f64>,
    nu: Vec<f64>,
}

enum Centering {
    Converged,
    /// Phase I found a point with enough slack.
    EarlyStop,
    MaxIterations,
}

struct Run<'a> {
    c: &'a Compiled,
    opts: &'a SolverOptions,
    trace: Vec<TraceRow>,
    newton_total: usize,
}

impl Run<'_> {
    /// Damped Newton centering of `t f + barrier`. `early` is checked after
    /// every accepted step.
    fn center(&mut self, stage: usize, t: f64, x: &mut Iterate, early: &dyn Fn(&Iterate) -> bool) -> Centering {
        let c = self.c;
        let mut f_cur = c
            .barrier_value(t, &x.w, &x.nu)
            .expect("centering starts inside the domain");
        for iter in 0..self.opts.max_newton {
            let sys = c.newton_system(t, &x.w, &x.nu);
            let (dw, dnu) = c.newton_step(&sys);
            let slope: f64 = sys.g_core.iter().zip(&dw).map(|(g, d)| g * d).sum::<f64>()
                + sys.g_nu.iter().zip(&dnu).map(|(g, d)| g * d).sum::<f64>();
            let decrement = -slope;
            if self.opts.trace {
                self.trace.push(TraceRow {
                    stage,
                    newton_iter: iter,
                    objective: c.objective(&x.w, &x.nu),
                    residual: decrement.max(0.0) / 2.0,
                });
            }
            if !(decrement / 2.0 > NEWTON_TOL) {
                return Centering::Converged;
            }
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let w: Vec<f64> = x.w.iter().zip(&dw).map(|(a, d)| a + step * d).collect();
                let nu: Vec<f64> = x.nu.iter().zip(&dnu).map(|(a, d)| a + step * d).collect();
                if let Some(f_new) = c.barrier_value(t, &w, &nu) {
                    if f_new <= f_cur + ARMIJO * step * slope {
                        accepted = Some((w, nu, f_new));
                        break;
                    }
                }
                step *= SHRINK;
            }
            self.newton_total += 1;
            match accepted {
                Some((w, nu, f_new)) => {
                    let stalled = f_new >= f_cur;
                    x.w = w;
                    x.nu = nu;
                    f_cur = f_new;
                    if stalled {
                        // Rounding floor of the barrier objective reached.
                        return Centering::Converged;
                    }
                    if early(x) {
                        return Centering::EarlyStop;
                    }
                }
                // No descent possible at machine precision: treat as centered.
                None => return Centering::Converged,
            }
        }
        Centering::MaxIterations
    }
}

enum PhaseOneOutcome {
    Feasible(Iterate),
    Infeasible(f64),
    MaxIterations,
}

fn phase_one_compiled(
    prog: &LogDomainProgram,
    reduced: &Compiled,
    opts: &SolverOptions,
    trace: &mut Vec<TraceRow>,
    newton_total: &mut usize,
) -> PhaseOneOutcome {
    let pc = match compile(prog, true) {
        Reduction::Ok(c) => c,
        Reduction::Inconsistent(r) => return PhaseOneOutcome::Infeasible(r),
    };
    let s_idx = pc.rc - 1;
    let mut w = match &prog.start {
        Some(p) => reduced.project(&p.y),
        None => vec![0.0; reduced.rc],
    };
    let nu = match &prog.start {
        Some(p) => p.nu.clone(),
        None => vec![1.0; pc.nnu],
    };
    w.push(0.0);
    let mut max_h = match pc.max_con(&w, &nu, true) {
        Some(m) => m,
        None => {
            w.iter_mut().for_each(|v| *v = 0.0);
            match pc.max_con(&w, &nu, true) {
                Some(m) => m,
                None => return PhaseOneOutcome::MaxIterations,
            }
        }
    };
    // Constraints read h - s <= 0, so with s = 0 the maximum is max h.
    w[s_idx] = max_h.max(-0.5) + 1.0;
    let mut x = Iterate { w, nu };
    let m = pc.cons.len() as f64;
    let strip = |x: &Iterate| Iterate {
        w: x.w[..s_idx].to_vec(),
        nu: x.nu.clone(),
    };
    let orig_max = |x: &Iterate| pc.max_con(&x.w, &x.nu, true).map(|v| v + x.w[s_idx]);
    let mut run = Run {
        c: &pc,
        opts,
        trace: std::mem::take(trace),
        newton_total: *newton_total,
    };
    let early = |x: &Iterate| orig_max(x).is_some_and(|v| v <= -PHASE_ONE_MARGIN);
    let mut t = opts.initial_t;
    let outcome = loop {
        let centering = run.center(0, t, &mut x, &early);
        max_h = orig_max(&x).unwrap_or(f64::INFINITY);
        match centering {
            Centering::EarlyStop => break PhaseOneOutcome::Feasible(strip(&x)),
            Centering::MaxIterations => break PhaseOneOutcome::MaxIterations,
            Centering::Converged => {}
        }
        if max_h <= -opts.tol {
            break PhaseOneOutcome::Feasible(strip(&x));
        }
        let lower = x.w[s_idx] - m / t;
        if lower > opts.tol {
            break PhaseOneOutcome::Infeasible(lower);
        }
        if m / t <= opts.tol {
            break PhaseOneOutcome::Infeasible(max_h.max(0.0));
        }
        t *= opts.barrier_mu;
    };
    *trace = run.trace;
    *newton_total = run.newton_total;
    outcome
}

/// Searches for a strictly feasible point of `prog`.
pub fn phase_one(prog: &LogDomainProgram, opts: &SolverOptions) -> Result<PhaseOne, SolverError> {
    opts.validate()?;
    validate(prog)?;
    let reduced = match compile(prog, false) {
        Reduction::Ok(c) => c,
        Reduction::Inconsistent(r) => return Ok(PhaseOne::Infeasible { min_violation: r }),
    };
    let mut trace = Vec::new();
    let mut count = 0;
    Ok(match phase_one_compiled(prog, &reduced, opts, &mut trace, &mut count) {
        PhaseOneOutcome::Feasible(x) => PhaseOne::Feasible(Point {
            y: reduced.expand(&x.w),
            nu: x.nu,
        }),
        PhaseOneOutcome::Infeasible(v) => PhaseOne::Infeasible { min_violation: v },
        PhaseOneOutcome::MaxIterations => PhaseOne::MaxIterations,
    })
}

fn report(prog: &LogDomainProgram, c: &Compiled, point: &Point, w: &[f64], t: f64) -> KktReport {
    let max_violation = prog.max_violation(point);
    let m = c.cons.len() as f64;
    let stationarity = match c.barrier_value(t, w, &point.nu) {
        Some(_) => {
            let sys = c.newton_system(t, w, &point.nu);
            let (dw, dnu) = c.newton_step(&sys);
            let slope: f64 = sys.g_core.iter().zip(&dw).map(|(g, d)| g * d).sum::<f64>()
                + sys.g_nu.iter().zip(&dnu).map(|(g, d)| g * d).sum::<f64>();
            (-slope).max(0.0) / (2.0 * t)
        }
        None => f64::INFINITY,
    };
    KktReport {
        max_violation,
        stationarity,
        complementarity: m / t,
    }
}

/// Residuals of `point` for barrier weight `t`.
pub fn kkt_residuals(prog: &LogDomainProgram, point: &Point, t: f64) -> Result<KktReport, SolverError> {
    validate(prog)?;
    if point.y.len() != prog.ny() || point.nu.len() != prog.nnu() {
        return Err(SolverError::StartDimension);
    }
    match compile(prog, false) {
        Reduction::Ok(c) => {
            let w = c.project(&point.y);
            Ok(report(prog, &c, point, &w, t))
        }
        Reduction::Inconsistent(r) => Ok(KktReport {
            max_violation: r,
            stationarity: f64::INFINITY,
            complementarity: f64::INFINITY,
        }),
    }
}

pub fn solve(prog: &LogDomainProgram, opts: &SolverOptions) -> Result<Solution, SolverError> {
    opts.validate()?;
    validate(prog)?;
    let infeasible = |trace: Vec<TraceRow>, newton: usize| Solution {
        y: vec![f64::NAN; prog.ny()],
        nu: vec![f64::NAN; prog.nnu()],
        objective: f64::NAN,
        kkt_residual: f64::INFINITY,
        status: Status::Infeasible,
        newton_iterations: newton,
        t_final: 0.0,
        stage_objectives: vec![],
        trace,
    };
    let c = match compile(prog, false) {
        Reduction::Ok(c) => c,
        Reduction::Inconsistent(_) => return Ok(infeasible(vec![], 0)),
    };
    let mut trace = Vec::new();
    let mut newton_total = 0;

    let hinted = prog.start.as_ref().and_then(|p| {
        let w = c.project(&p.y);
        c.barrier_value(1.0, &w, &p.nu).map(|_| Iterate {
            w,
            nu: p.nu.clone(),
        })
    });
    let mut x = match hinted {
        Some(x) => x,
        None => match phase_one_compiled(prog, &c, opts, &mut trace, &mut newton_total) {
            PhaseOneOutcome::Feasible(x) => x,
            PhaseOneOutcome::Infeasible(_) => return Ok(infeasible(trace, newton_total)),
            PhaseOneOutcome::MaxIterations => {
                let mut s = infeasible(trace, newton_total);
                s.status = Status::MaxIterations;
                return Ok(s);
            }
        },
    };

    let m = c.cons.len() as f64;
    let mut run = Run {
        c: &c,
        opts,
        trace,
        newton_total,
    };
    let mut t = opts.initial_t;
    let mut stage = 1;
    let mut stage_objectives = Vec::new();
    let status = loop {
        let centering = run.center(stage, t, &mut x, &|_| false);
        stage_objectives.push(c.objective(&x.w, &x.nu));
        if let Centering::MaxIterations = centering {
            break Status::MaxIterations;
        }
        if m / t <= opts.tol {
            break Status::Optimal;
        }
        t *= opts.barrier_mu;
        stage += 1;
    };

    let point = Point {
        y: c.expand(&x.w),
        nu: x.nu.clone(),
    };
    let kkt = report(prog, &c, &point, &x.w, t);
    let objective = prog.objective.eval(&point.y, &point.nu);
    let status = if status == Status::Optimal && kkt.max() > opts.tol {
        log::warn!(
            "barrier converged but KKT residual {:.3e} exceeds tolerance {:.1e}",
            kkt.max(),
            opts.tol
        );
        Status::MaxIterations
    } else {
        status
    };
    Ok(Solution {
        y: point.y,
        nu: point.nu,
        objective,
        kkt_residual: kkt.max(),
        status,
        newton_iterations: run.newton_total,
        t_final: t,
        stage_objectives,
        trace: run.trace,
    })
}
