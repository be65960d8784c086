//! Polytopic uncertainty over contact matrices.
//!
//! The set is a product of per-row polytopes. Row `i` constrains the rates of
//! the edges entering node `i` by a prior box and by affine inequalities
//! derived from the observed infection series. Each row is exposed in cone
//! form `F beta + g >= 0` with the rows of `F` ordered as: upper bounds, lower
//! bounds, data constraints.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::epidemic::ObservationSet;
use crate::lp::{self, LpError};
use crate::network::{ContactNetwork, NonnegativeMatrix};

/// Membership slack accepted by [`UncertaintyModel::contains`].
pub const MEMBERSHIP_TOL: f64 = 1e-9;
/// Clamp margin keeping the observed escape ratio strictly below one.
pub const RATIO_CLAMP_EPS: f64 = 1e-12;
/// Tolerance on the escape ratio before clamping.
pub const RATIO_RANGE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("prior bound {value} on edge {src} -> {dst} is outside (0, 1)")]
    BoundOutOfRange { src: usize, dst: usize, value: f64 },
    #[error("invalid prior scales lo = {lo}, hi = {hi}; need 0 < lo <= 1 <= hi")]
    InvalidScales { lo: f64, hi: f64 },
    #[error("observation horizon must be at least 1")]
    HorizonTooShort,
    #[error("escape ratio {ratio} at node {node}, t = {t} is inconsistent with the model")]
    InconsistentData { node: usize, t: usize, ratio: f64 },
    #[error("data constraint references node {0} outside the network")]
    NodeOutOfRange(usize),
    #[error("uncertainty polytope of row {0} is empty")]
    EmptyRow(usize),
    #[error("weight vector for row {row} has length {got}, expected {expected}")]
    WeightLength { row: usize, expected: usize, got: usize },
    #[error("weights must be nonnegative and finite")]
    NegativeWeight,
    #[error("row {0} linear program failed: {1}")]
    Lp(usize, LpError),
    #[error("malformed model: {0}")]
    Malformed(String),
}

/// Box prior `lo <= beta <= hi` on every edge, zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBounds {
    pub n: usize,
    /// Aligned with `ContactNetwork::edges`.
    pub edges: Vec<EdgeBounds>,
    pub lo_scale: f64,
    pub hi_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeBounds {
    pub src: usize,
    pub dst: usize,
    pub lo: f64,
    pub hi: f64,
}

pub fn build_prior(
    net: &ContactNetwork,
    lo_scale: f64,
    hi_scale: f64,
) -> Result<PriorBounds, UncertaintyError> {
    if !(lo_scale > 0.0 && lo_scale <= 1.0 && hi_scale >= 1.0 && hi_scale.is_finite()) {
        return Err(UncertaintyError::InvalidScales {
            lo: lo_scale,
            hi: hi_scale,
        });
    }
    let edges = net
        .edges()
        .iter()
        .map(|e| {
            let (lo, hi) = (lo_scale * e.rate, hi_scale * e.rate);
            for value in [lo, hi] {
                if !(value > 0.0 && value < 1.0) {
                    return Err(UncertaintyError::BoundOutOfRange {
                        src: e.src,
                        dst: e.dst,
                        value,
                    });
                }
            }
            Ok(EdgeBounds {
                src: e.src,
                dst: e.dst,
                lo,
                hi,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(PriorBounds {
        n: net.n(),
        edges,
        lo_scale,
        hi_scale,
    })
}

/// `sum_j coeffs[j] * beta_{row, j} <= rhs`, with `coeffs` dense over all nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConstraint {
    pub row: usize,
    pub t: usize,
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

/// Affine relaxation of the observed dynamics: for each sensor `i` and step
/// `t` with `p_i(t) < 1`,
/// `(1/n) sum_{j in sensors} beta_ij p_j(t) <= 1 - (1 - r)^(1/n)` where
/// `r = (p_i(t+1) - p_i(t)(1 - delta_i)) / (1 - p_i(t))`.
pub fn build_data_constraints(
    obs: &ObservationSet,
    n: usize,
) -> Result<Vec<DataConstraint>, UncertaintyError> {
    if obs.horizon < 1 {
        return Err(UncertaintyError::HorizonTooShort);
    }
    if let Some(&s) = obs.sensors.iter().find(|&&s| s >= n) {
        return Err(UncertaintyError::NodeOutOfRange(s));
    }
    let nf = n as f64;
    let mut out = Vec::new();
    for (k, &i) in obs.sensors.iter().enumerate() {
        let delta = obs.delta0[k];
        for t in 0..obs.horizon {
            let now = obs.values[t][k];
            let next = obs.values[t + 1][k];
            if now >= 1.0 {
                continue;
            }
            let ratio = (next - now * (1.0 - delta)) / (1.0 - now);
            if !(ratio >= -RATIO_RANGE_TOL && ratio <= 1.0 + RATIO_RANGE_TOL) {
                return Err(UncertaintyError::InconsistentData { node: i, t, ratio });
            }
            let r = ratio.clamp(0.0, 1.0 - RATIO_CLAMP_EPS);
            // 1 - (1 - r)^(1/n), accurate for small r.
            let rhs = -((-r).ln_1p() / nf).exp_m1();
            let mut coeffs = vec![0.0; n];
            for (kk, &j) in obs.sensors.iter().enumerate() {
                coeffs[j] = obs.values[t][kk] / nf;
            }
            if coeffs.iter().all(|&c| c == 0.0) {
                continue;
            }
            out.push(DataConstraint {
                row: i,
                t,
                coeffs,
                rhs,
            });
        }
    }
    Ok(out)
}

/// One affine data inequality projected onto a row's coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowInequality {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

/// Feasible rates of the edges entering one node.
#[derive(Debug, Clone, PartialEq)]
pub struct RowPolytope {
    pub row: usize,
    /// Source node of each coordinate, ascending.
    pub sources: Vec<usize>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub data: Vec<RowInequality>,
}

impl RowPolytope {
    pub fn dim(&self) -> usize {
        self.sources.len()
    }

    pub fn num_constraints(&self) -> usize {
        2 * self.dim() + self.data.len()
    }

    /// Dense `F`, one `Vec` per constraint.
    pub fn f_matrix(&self) -> Vec<Vec<f64>> {
        let k = self.dim();
        let mut f = Vec::with_capacity(self.num_constraints());
        for c in 0..k {
            let mut r = vec![0.0; k];
            r[c] = -1.0;
            f.push(r);
        }
        for c in 0..k {
            let mut r = vec![0.0; k];
            r[c] = 1.0;
            f.push(r);
        }
        for d in &self.data {
            f.push(d.coeffs.iter().map(|v| -v).collect());
        }
        f
    }

    pub fn g_vector(&self) -> Vec<f64> {
        self.hi
            .iter()
            .copied()
            .chain(self.lo.iter().map(|v| -v))
            .chain(self.data.iter().map(|d| d.rhs))
            .collect()
    }

    /// Slacks `F beta + g`.
    pub fn slacks(&self, beta: &[f64]) -> Vec<f64> {
        let hi = self.hi.iter().zip(beta).map(|(h, b)| h - b);
        let lo = self.lo.iter().zip(beta).map(|(l, b)| b - l);
        let data = self.data.iter().map(|d| {
            d.rhs - d.coeffs.iter().zip(beta).map(|(c, b)| c * b).sum::<f64>()
        });
        hi.chain(lo).chain(data).collect()
    }

    pub fn contains(&self, beta: &[f64]) -> bool {
        beta.len() == self.dim() && self.slacks(beta).iter().all(|&s| s >= -MEMBERSHIP_TOL)
    }

    fn lp_rows(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let a = self
            .f_matrix()
            .into_iter()
            .map(|r| r.into_iter().map(|v| -v).collect())
            .collect();
        (a, self.g_vector())
    }

    fn check_weights(&self, m: &[f64]) -> Result<(), UncertaintyError> {
        if m.len() != self.dim() {
            return Err(UncertaintyError::WeightLength {
                row: self.row,
                expected: self.dim(),
                got: m.len(),
            });
        }
        if m.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(UncertaintyError::NegativeWeight);
        }
        Ok(())
    }

    /// `max m'beta` over the row, with a maximizer and the multipliers of
    /// `F beta + g >= 0`.
    pub fn sup(&self, m: &[f64]) -> Result<lp::LpSolution, UncertaintyError> {
        self.check_weights(m)?;
        if self.dim() == 0 {
            return Ok(lp::LpSolution {
                x: vec![],
                value: 0.0,
                duals: vec![0.0; self.num_constraints()],
            });
        }
        let (a, b) = self.lp_rows();
        lp::maximize(m, &a, &b).map_err(|e| match e {
            LpError::Infeasible => UncertaintyError::EmptyRow(self.row),
            e => UncertaintyError::Lp(self.row, e),
        })
    }

    /// Optimal value of the dual `min g'nu  s.t.  F'nu + m <= 0,  nu >= 0`,
    /// solved as its own linear program.
    pub fn dual_value(&self, m: &[f64]) -> Result<f64, UncertaintyError> {
        self.check_weights(m)?;
        let f = self.f_matrix();
        let g = self.g_vector();
        let k = self.dim();
        // Rows of F' indexed by coordinate.
        let a: Vec<Vec<f64>> = (0..k).map(|c| f.iter().map(|r| r[c]).collect()).collect();
        let b: Vec<f64> = m.iter().map(|v| -v).collect();
        let c: Vec<f64> = g.iter().map(|v| -v).collect();
        let sol = lp::maximize(&c, &a, &b).map_err(|e| UncertaintyError::Lp(self.row, e))?;
        Ok(-sol.value)
    }

    /// Point maximizing the smallest slack, capped at 1, and that slack.
    /// Errors if the row is empty.
    pub fn interior_point(&self) -> Result<(Vec<f64>, f64), UncertaintyError> {
        let k = self.dim();
        if k == 0 {
            return Ok((vec![], 1.0));
        }
        let (a, b) = self.lp_rows();
        let mut rows: Vec<Vec<f64>> = a
            .into_iter()
            .map(|mut r| {
                r.push(1.0);
                r
            })
            .collect();
        let mut rhs = b;
        let mut cap = vec![0.0; k + 1];
        cap[k] = 1.0;
        rows.push(cap);
        rhs.push(1.0);
        let mut c = vec![0.0; k + 1];
        c[k] = 1.0;
        let sol = lp::maximize(&c, &rows, &rhs).map_err(|e| match e {
            LpError::Infeasible => UncertaintyError::EmptyRow(self.row),
            e => UncertaintyError::Lp(self.row, e),
        })?;
        let slack = sol.x[k];
        Ok((sol.x[..k].to_vec(), slack))
    }

    /// One hit-and-run move restricted to the coordinates with `lo < hi`.
    fn hit_and_run_step<R: Rng>(&self, beta: &mut [f64], rng: &mut R) {
        let k = self.dim();
        let mut d: Vec<f64> = (0..k)
            .map(|c| {
                if self.hi[c] > self.lo[c] {
                    rng.sample(StandardNormal)
                } else {
                    0.0
                }
            })
            .collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return;
        }
        d.iter_mut().for_each(|v| *v /= norm);
        let slacks = self.slacks(beta);
        let (mut t_lo, mut t_hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for (row, s) in self.f_matrix().iter().zip(slacks) {
            let rate: f64 = row.iter().zip(&d).map(|(a, b)| a * b).sum();
            let s = s.max(0.0);
            if rate > 1e-15 {
                t_lo = t_lo.max(-s / rate);
            } else if rate < -1e-15 {
                t_hi = t_hi.min(s / -rate);
            }
        }
        if !(t_lo.is_finite() && t_hi.is_finite()) || t_hi <= t_lo {
            return;
        }
        let tau = rng.random_range(t_lo..=t_hi);
        for (b, dv) in beta.iter_mut().zip(&d) {
            *b += tau * dv;
        }
    }
}

/// Where a model's data came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(rename = "T")]
    pub horizon: Option<usize>,
    /// 1-based node indices.
    pub sensors: Vec<usize>,
    pub lo_scale: f64,
    pub hi_scale: f64,
}

/// Product of row polytopes; the convex uncertainty set over contact matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyModel {
    pub n: usize,
    pub rows: Vec<RowPolytope>,
    pub provenance: Provenance,
}

/// Intersects the prior box with the data constraints and checks every row
/// is nonempty with a phase-I linear program.
pub fn assemble(
    prior: &PriorBounds,
    data: &[DataConstraint],
) -> Result<UncertaintyModel, UncertaintyError> {
    let n = prior.n;
    let mut rows: Vec<RowPolytope> = (0..n)
        .map(|i| {
            let bounds: Vec<&EdgeBounds> = prior.edges.iter().filter(|e| e.dst == i).collect();
            RowPolytope {
                row: i,
                sources: bounds.iter().map(|e| e.src).collect(),
                lo: bounds.iter().map(|e| e.lo).collect(),
                hi: bounds.iter().map(|e| e.hi).collect(),
                data: Vec::new(),
            }
        })
        .collect();
    for dc in data {
        if dc.row >= n || dc.coeffs.len() != n {
            return Err(UncertaintyError::NodeOutOfRange(dc.row));
        }
        let row = &mut rows[dc.row];
        let coeffs: Vec<f64> = row.sources.iter().map(|&j| dc.coeffs[j]).collect();
        if coeffs.iter().all(|&c| c == 0.0) {
            continue;
        }
        row.data.push(RowInequality { coeffs, rhs: dc.rhs });
    }
    for row in &rows {
        row.interior_point()?;
    }
    let mut sensors: Vec<usize> = data.iter().map(|d| d.row + 1).collect();
    sensors.sort_unstable();
    sensors.dedup();
    Ok(UncertaintyModel {
        n,
        rows,
        provenance: Provenance {
            horizon: data.iter().map(|d| d.t + 1).max(),
            sensors,
            lo_scale: prior.lo_scale,
            hi_scale: prior.hi_scale,
        },
    })
}

impl UncertaintyModel {
    /// Membership of a full contact matrix, including its zero pattern.
    pub fn contains(&self, b: &NonnegativeMatrix) -> bool {
        if b.n() != self.n {
            return false;
        }
        for row in &self.rows {
            for col in 0..self.n {
                if b.get(row.row, col) != 0.0 && row.sources.binary_search(&col).is_err() {
                    return false;
                }
            }
            let beta: Vec<f64> = row.sources.iter().map(|&j| b.get(row.row, j)).collect();
            if !row.contains(&beta) {
                return false;
            }
        }
        true
    }

    /// `max_beta sum_j m_j beta_ij` over row `i`; `m` is indexed like the
    /// row's in-edges.
    pub fn row_sup(&self, i: usize, m: &[f64]) -> Result<f64, UncertaintyError> {
        let row = self
            .rows
            .get(i)
            .ok_or(UncertaintyError::NodeOutOfRange(i))?;
        Ok(row.sup(m)?.value)
    }

    /// The all-upper-bounds matrix of the prior box.
    pub fn upper_matrix(&self) -> NonnegativeMatrix {
        self.matrix_from(|r| r.hi.clone())
    }

    pub fn matrix_from<F: Fn(&RowPolytope) -> Vec<f64>>(&self, rows: F) -> NonnegativeMatrix {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for r in &self.rows {
            for (&j, v) in r.sources.iter().zip(rows(r)) {
                m[(r.row, j)] = v;
            }
        }
        NonnegativeMatrix::new(m).expect("row values are nonnegative")
    }

    /// Draws a contact matrix by running `steps` hit-and-run moves in every
    /// row, each started from that row's max-slack interior point.
    pub fn sample<R: Rng>(&self, rng: &mut R, steps: usize) -> Result<NonnegativeMatrix, UncertaintyError> {
        let mut rows = Vec::with_capacity(self.n);
        for r in &self.rows {
            let (mut beta, _) = r.interior_point()?;
            for _ in 0..steps {
                r.hit_and_run_step(&mut beta, rng);
            }
            rows.push(beta);
        }
        Ok(self.matrix_from(|r| rows[r.row].clone()))
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(&ModelFile::from(self))
    }

    pub fn from_json(text: &str) -> Result<Self, UncertaintyError> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| UncertaintyError::Malformed(e.to_string()))?;
        file.try_into()
    }
}

/// On-disk form of one row: dense row-major `F`, `g`, and the edge
/// `[src, dst]` (1-based) of each coordinate.
#[derive(Debug, Serialize, Deserialize)]
struct RowFile {
    node: usize,
    edges: Vec<[usize; 2]>,
    rows: usize,
    cols: usize,
    f: Vec<f64>,
    g: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    n: usize,
    rows: Vec<RowFile>,
    provenance: Provenance,
}

impl From<&UncertaintyModel> for ModelFile {
    fn from(m: &UncertaintyModel) -> Self {
        ModelFile {
            n: m.n,
            rows: m
                .rows
                .iter()
                .map(|r| RowFile {
                    node: r.row + 1,
                    edges: r.sources.iter().map(|&j| [j + 1, r.row + 1]).collect(),
                    rows: r.num_constraints(),
                    cols: r.dim(),
                    f: r.f_matrix().concat(),
                    g: r.g_vector(),
                })
                .collect(),
            provenance: m.provenance.clone(),
        }
    }
}

impl TryFrom<ModelFile> for UncertaintyModel {
    type Error = UncertaintyError;

    fn try_from(file: ModelFile) -> Result<Self, Self::Error> {
        let bad = |msg: &str| UncertaintyError::Malformed(msg.to_string());
        let mut rows = Vec::with_capacity(file.rows.len());
        for (i, rf) in file.rows.into_iter().enumerate() {
            let k = rf.cols;
            if rf.node != i + 1 || rf.edges.len() != k || rf.f.len() != rf.rows * k || rf.g.len() != rf.rows
            {
                return Err(bad("inconsistent row dimensions"));
            }
            if rf.rows < 2 * k {
                return Err(bad("missing box rows"));
            }
            let f_row = |r: usize| &rf.f[r * k..(r + 1) * k];
            for c in 0..k {
                let (up, low) = (f_row(c), f_row(k + c));
                let unit = |row: &[f64], s: f64| {
                    row.iter().enumerate().all(|(j, &v)| v == if j == c { s } else { 0.0 })
                };
                if !unit(up, -1.0) || !unit(low, 1.0) {
                    return Err(bad("box rows out of canonical order"));
                }
            }
            let data = (2 * k..rf.rows)
                .map(|r| RowInequality {
                    coeffs: f_row(r).iter().map(|v| -v).collect(),
                    rhs: rf.g[r],
                })
                .collect();
            rows.push(RowPolytope {
                row: i,
                sources: rf.edges.iter().map(|e| e[0] - 1).collect(),
                hi: rf.g[..k].to_vec(),
                lo: rf.g[k..2 * k].iter().map(|v| -v).collect(),
                data,
            });
        }
        if rows.len() != file.n {
            return Err(bad("row count differs from n"));
        }
        Ok(UncertaintyModel {
            n: file.n,
            rows,
            provenance: file.provenance,
        })
    }
}
