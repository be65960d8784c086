//! Geometric-programming layer: monomials and posynomials, the logarithmic
//! change of variables, dualization of robust rows, and assembly of the
//! robust allocation program.
//!
//! A [`LogDomainProgram`] has two kinds of variables: `y`, logarithms of the
//! positive GP variables, and `nu`, nonnegative multipliers that stay in the
//! linear domain. Every inequality reads
//! `sum_k exp(a_k'y + b_k) + l'(y, nu) + c <= 0`; equalities are affine in `y`;
//! `nu >= 0` is implicit.

use serde::Serialize;
use thiserror::Error;

use crate::allocate::CostModel;
use crate::network::{spectral_radius, state_matrix, NetworkError, DEFAULT_RHO_TOL};
use crate::uncertainty::{RowPolytope, UncertaintyModel};

/// Rows whose interior is thinner than this are treated as degenerate.
const INTERIOR_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("monomial coefficient {0} is not strictly positive")]
    NonPositiveCoefficient(f64),
    #[error("exponent is not finite")]
    NonFiniteExponent,
    #[error("posynomial has no terms")]
    EmptyPosynomial,
    #[error("variable index {0} out of range")]
    UnknownVariable(usize),
    #[error("row {0} polytope is unbounded")]
    UnboundedRow(usize),
    #[error("row {0} polytope is empty")]
    EmptyRow(usize),
    #[error("row {0} polytope has empty interior after fixing degenerate coordinates")]
    DegenerateRow(usize),
    #[error("row {row}: {got} monomials for {expected} coordinates")]
    MonomialCount { row: usize, expected: usize, got: usize },
    #[error("budget {0} must be nonnegative and finite")]
    InvalidBudget(f64),
    #[error("control node {0} out of range")]
    ControlOutOfRange(usize),
    #[error("cost model covers {got} nodes, network has {expected}")]
    CostDimension { expected: usize, got: usize },
    #[error("allocation vector has length {got}, expected {expected}")]
    AllocationLength { expected: usize, got: usize },
    #[error("allocation entry {index} = {value} is not strictly positive")]
    NonPositiveAllocation { index: usize, value: f64 },
    #[error("node {0} has no in-edges; the network is not strongly connected")]
    NotStronglyConnected(usize),
    #[error("spectral radius: {0}")]
    Network(#[from] NetworkError),
}

/// `coeff * prod_v x_v^{a_v}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Monomial {
    pub coeff: f64,
    pub exponents: Vec<(usize, f64)>,
}

impl Monomial {
    pub fn new(coeff: f64, exponents: Vec<(usize, f64)>) -> Result<Self, GpError> {
        if !(coeff > 0.0 && coeff.is_finite()) {
            return Err(GpError::NonPositiveCoefficient(coeff));
        }
        if exponents.iter().any(|(_, a)| !a.is_finite()) {
            return Err(GpError::NonFiniteExponent);
        }
        Ok(Self { coeff, exponents })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.exponents
            .iter()
            .fold(self.coeff, |acc, &(v, a)| acc * x[v].powf(a))
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, GpError> {
        Self::new(self.coeff * factor, self.exponents.clone())
    }

    /// `log m(e^y) = a'y + log coeff`.
    pub fn log_affine(&self) -> ExpTerm {
        ExpTerm {
            y: self.exponents.clone(),
            offset: self.coeff.ln(),
        }
    }
}

/// Sum of monomials over a shared variable space.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Posynomial {
    pub terms: Vec<Monomial>,
}

impl Posynomial {
    pub fn new(terms: Vec<Monomial>) -> Result<Self, GpError> {
        if terms.is_empty() {
            return Err(GpError::EmptyPosynomial);
        }
        for t in &terms {
            if !(t.coeff > 0.0) {
                return Err(GpError::NonPositiveCoefficient(t.coeff));
            }
        }
        Ok(Self { terms })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|m| m.eval(x)).sum()
    }
}

/// Standard-form GP: minimize a monomial subject to `posynomial <= 1` and
/// `monomial = 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometricProgram {
    pub var_names: Vec<String>,
    pub objective: Monomial,
    pub inequalities: Vec<Posynomial>,
    pub equalities: Vec<Monomial>,
}

/// `exp(a'y + offset)` with sparse `a`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpTerm {
    pub y: Vec<(usize, f64)>,
    pub offset: f64,
}

impl ExpTerm {
    pub fn exponent(&self, y: &[f64]) -> f64 {
        self.offset + self.y.iter().map(|&(v, a)| a * y[v]).sum::<f64>()
    }
}

/// Affine form over `(y, nu)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LinearForm {
    pub y: Vec<(usize, f64)>,
    pub nu: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinearForm {
    pub fn eval(&self, y: &[f64], nu: &[f64]) -> f64 {
        self.constant
            + self.y.iter().map(|&(v, a)| a * y[v]).sum::<f64>()
            + self.nu.iter().map(|&(v, a)| a * nu[v]).sum::<f64>()
    }
}

/// `sum exp(terms) + linear <= 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inequality {
    pub label: String,
    pub exp_terms: Vec<ExpTerm>,
    pub linear: LinearForm,
}

impl Inequality {
    pub fn eval(&self, y: &[f64], nu: &[f64]) -> f64 {
        self.exp_terms
            .iter()
            .map(|t| t.exponent(y).exp())
            .sum::<f64>()
            + self.linear.eval(y, nu)
    }
}

/// `a'y + constant = 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Equality {
    pub label: String,
    pub y: Vec<(usize, f64)>,
    pub constant: f64,
}

/// A point of a [`LogDomainProgram`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Point {
    pub y: Vec<f64>,
    pub nu: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LogDomainProgram {
    pub y_names: Vec<String>,
    pub nu_names: Vec<String>,
    /// Minimized.
    pub objective: LinearForm,
    pub inequalities: Vec<Inequality>,
    pub equalities: Vec<Equality>,
    /// Suggested starting point; the solver falls back to phase I when it is
    /// absent or not strictly feasible.
    #[serde(skip)]
    pub start: Option<Point>,
}

impl LogDomainProgram {
    pub fn add_y(&mut self, name: impl Into<String>) -> usize {
        self.y_names.push(name.into());
        self.y_names.len() - 1
    }

    pub fn add_nu(&mut self, name: impl Into<String>) -> usize {
        self.nu_names.push(name.into());
        self.nu_names.len() - 1
    }

    pub fn ny(&self) -> usize {
        self.y_names.len()
    }

    pub fn nnu(&self) -> usize {
        self.nu_names.len()
    }

    /// Largest violation over inequalities, equalities, and `nu >= 0`.
    pub fn max_violation(&self, p: &Point) -> f64 {
        let ineq = self
            .inequalities
            .iter()
            .map(|c| c.eval(&p.y, &p.nu))
            .fold(0.0, f64::max);
        let eq = self
            .equalities
            .iter()
            .map(|e| (e.constant + e.y.iter().map(|&(v, a)| a * p.y[v]).sum::<f64>()).abs())
            .fold(0.0, f64::max);
        let nu = p.nu.iter().map(|v| -v).fold(0.0, f64::max);
        ineq.max(eq).max(nu)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    fn check_vars(&self, vars: &[(usize, f64)]) -> Result<(), GpError> {
        match vars.iter().find(|(v, _)| *v >= self.ny()) {
            Some(&(v, _)) => Err(GpError::UnknownVariable(v)),
            None => Ok(()),
        }
    }

    /// Appends the log-domain form of `posy <= 1`. Single-term posynomials
    /// become affine inequalities.
    pub fn push_posynomial(&mut self, label: impl Into<String>, posy: &Posynomial) -> Result<(), GpError> {
        for m in &posy.terms {
            self.check_vars(&m.exponents)?;
        }
        let label = label.into();
        if let [single] = posy.terms.as_slice() {
            let t = single.log_affine();
            self.inequalities.push(Inequality {
                label,
                exp_terms: vec![],
                linear: LinearForm {
                    y: t.y,
                    nu: vec![],
                    constant: t.offset,
                },
            });
        } else {
            self.inequalities.push(Inequality {
                label,
                exp_terms: posy.terms.iter().map(Monomial::log_affine).collect(),
                linear: LinearForm {
                    constant: -1.0,
                    ..Default::default()
                },
            });
        }
        Ok(())
    }

    /// Appends `m = 1` as `a'y + log coeff = 0`.
    pub fn push_monomial_equality(&mut self, label: impl Into<String>, m: &Monomial) -> Result<(), GpError> {
        self.check_vars(&m.exponents)?;
        let t = m.log_affine();
        self.equalities.push(Equality {
            label: label.into(),
            y: t.y,
            constant: t.offset,
        });
        Ok(())
    }
}

/// Convexifies a standard-form GP with `y = log x`.
pub fn log_transform(gp: &GeometricProgram) -> Result<LogDomainProgram, GpError> {
    let mut prog = LogDomainProgram {
        y_names: gp.var_names.clone(),
        ..Default::default()
    };
    let obj = Monomial::new(gp.objective.coeff, gp.objective.exponents.clone())?.log_affine();
    prog.check_vars(&obj.y)?;
    prog.objective = LinearForm {
        y: obj.y,
        nu: vec![],
        constant: obj.offset,
    };
    for (k, posy) in gp.inequalities.iter().enumerate() {
        let posy = Posynomial::new(posy.terms.clone())?;
        for m in &posy.terms {
            Monomial::new(m.coeff, m.exponents.clone())?;
        }
        prog.push_posynomial(format!("posy[{k}]"), &posy)?;
    }
    for (k, m) in gp.equalities.iter().enumerate() {
        let m = Monomial::new(m.coeff, m.exponents.clone())?;
        prog.push_monomial_equality(format!("mono[{k}]"), &m)?;
    }
    Ok(prog)
}

/// What [`dualize_robust_row`] emitted for one row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowBlock {
    pub row: usize,
    /// Indices of the row's `nu` variables, empty when the row has no
    /// uncertain coordinates left.
    pub nu: Vec<usize>,
    /// Coordinates of the row polytope that remain uncertain.
    pub free: Vec<usize>,
    /// Reduced polytope over `free`, whose `F`/`g` the block uses.
    pub reduced: RowPolytope,
    /// Index of the `g'nu + fixed <= 1` inequality.
    pub budget_inequality: usize,
}

/// Splits coordinates with `lo == hi` out of a row. Returns the reduced
/// polytope over the remaining coordinates, their indices, and the fixed
/// values.
fn reduce_row(row: &RowPolytope) -> Result<(RowPolytope, Vec<usize>, Vec<(usize, f64)>), GpError> {
    if row.hi.iter().any(|h| !h.is_finite()) {
        return Err(GpError::UnboundedRow(row.row));
    }
    let free: Vec<usize> = (0..row.dim()).filter(|&c| row.hi[c] > row.lo[c]).collect();
    let fixed: Vec<(usize, f64)> = (0..row.dim())
        .filter(|&c| row.hi[c] <= row.lo[c])
        .map(|c| (c, row.lo[c]))
        .collect();
    if fixed.iter().any(|&(c, v)| row.hi[c] < v) {
        return Err(GpError::EmptyRow(row.row));
    }
    let mut data = Vec::new();
    for d in &row.data {
        let rhs = d.rhs - fixed.iter().map(|&(c, v)| d.coeffs[c] * v).sum::<f64>();
        let coeffs: Vec<f64> = free.iter().map(|&c| d.coeffs[c]).collect();
        if coeffs.iter().all(|&v| v == 0.0) {
            if rhs < -1e-12 {
                return Err(GpError::EmptyRow(row.row));
            }
            continue;
        }
        data.push(crate::uncertainty::RowInequality { coeffs, rhs });
    }
    let reduced = RowPolytope {
        row: row.row,
        sources: free.iter().map(|&c| row.sources[c]).collect(),
        lo: free.iter().map(|&c| row.lo[c]).collect(),
        hi: free.iter().map(|&c| row.hi[c]).collect(),
        data,
    };
    Ok((reduced, free, fixed))
}

/// Replaces the robust row constraint
/// `sup_{beta in row} sum_c beta_c m_c(x) + fixed(x) <= 1`
/// by its dual certificate: fresh `nu >= 0` with `F'nu + m(x) <= 0`
/// componentwise and `g'nu + fixed(x) <= 1`.
///
/// Coordinates with `lo == hi` are certain; their monomials move into the
/// fixed part scaled by the known rate.
pub fn dualize_robust_row(
    prog: &mut LogDomainProgram,
    row: &RowPolytope,
    uncertain: &[Monomial],
    fixed_terms: &[Monomial],
) -> Result<RowBlock, GpError> {
    if uncertain.len() != row.dim() {
        return Err(GpError::MonomialCount {
            row: row.row,
            expected: row.dim(),
            got: uncertain.len(),
        });
    }
    let (reduced, free, fixed) = reduce_row(row)?;
    let mut certain: Vec<Monomial> = fixed_terms.to_vec();
    for &(c, v) in &fixed {
        certain.push(uncertain[c].scaled(v)?);
    }
    if !free.is_empty() {
        match reduced.interior_point() {
            Ok((_, slack)) if slack > INTERIOR_EPS => {}
            Ok(_) => return Err(GpError::DegenerateRow(row.row)),
            Err(_) => return Err(GpError::EmptyRow(row.row)),
        }
    }

    let nu: Vec<usize> = (0..reduced.num_constraints())
        .map(|r| prog.add_nu(format!("nu[{}][{}]", row.row + 1, r)))
        .collect();
    let f = reduced.f_matrix();
    let g = reduced.g_vector();
    for (k, &c) in free.iter().enumerate() {
        prog.check_vars(&uncertain[c].exponents)?;
        prog.inequalities.push(Inequality {
            label: format!("row[{}].coord[{}]", row.row + 1, reduced.sources[k] + 1),
            exp_terms: vec![uncertain[c].log_affine()],
            linear: LinearForm {
                y: vec![],
                nu: nu
                    .iter()
                    .zip(&f)
                    .filter(|(_, fr)| fr[k] != 0.0)
                    .map(|(&v, fr)| (v, fr[k]))
                    .collect(),
                constant: 0.0,
            },
        });
    }
    for m in &certain {
        prog.check_vars(&m.exponents)?;
    }
    prog.inequalities.push(Inequality {
        label: format!("row[{}].bound", row.row + 1),
        exp_terms: certain.iter().map(Monomial::log_affine).collect(),
        linear: LinearForm {
            y: vec![],
            nu: nu
                .iter()
                .zip(&g)
                .filter(|(_, gv)| **gv != 0.0)
                .map(|(&v, &gv)| (v, gv))
                .collect(),
            constant: -1.0,
        },
    });
    Ok(RowBlock {
        row: row.row,
        nu,
        free,
        reduced,
        budget_inequality: prog.inequalities.len() - 1,
    })
}

/// Variable layout of an assembled allocation program.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationLayout {
    /// `log dc_i` for every node.
    pub dc: Vec<usize>,
    /// `log u_i` for every node.
    pub u: Vec<usize>,
    pub lambda: usize,
    pub rows: Vec<RowBlock>,
}

#[derive(Debug, Clone)]
pub struct AllocationProgram {
    pub program: LogDomainProgram,
    pub layout: AllocationLayout,
}

enum DcPolicy<'a> {
    Budgeted {
        cost: &'a CostModel,
        budget: f64,
        control: &'a [usize],
    },
    Pinned(&'a [f64]),
}

/// Robust allocation as a log-domain program: minimize `log lambda` subject to
/// `sup_beta sum_j beta_ij u_j / (u_i lambda) + dc_i / lambda <= 1` for every
/// row, the budget, the box on `dc`, and `prod u = 1`.
///
/// The budget `sum_i g_i(dc_i) <= C` with `g_i(d) = k_i / d - k_i / dc_hi_i`
/// is normalized to `sum_i (k_i / R) / dc_i <= 1` with
/// `R = C + sum_i k_i / dc_hi_i`. Non-control nodes, and all nodes when
/// `C = 0`, are pinned at their natural rate.
pub fn assemble_robust_allocation(
    model: &UncertaintyModel,
    cost: &CostModel,
    budget: f64,
    control: &[usize],
) -> Result<AllocationProgram, GpError> {
    if !(budget >= 0.0 && budget.is_finite()) {
        return Err(GpError::InvalidBudget(budget));
    }
    if cost.len() != model.n {
        return Err(GpError::CostDimension {
            expected: model.n,
            got: cost.len(),
        });
    }
    if let Some(&c) = control.iter().find(|&&c| c >= model.n) {
        return Err(GpError::ControlOutOfRange(c));
    }
    build(
        model,
        DcPolicy::Budgeted {
            cost,
            budget,
            control,
        },
    )
}

/// The same program with every `dc_i` pinned; its optimum is the worst-case
/// spectral radius of the fixed allocation.
pub fn assemble_worst_case(model: &UncertaintyModel, dc: &[f64]) -> Result<AllocationProgram, GpError> {
    if dc.len() != model.n {
        return Err(GpError::AllocationLength {
            expected: model.n,
            got: dc.len(),
        });
    }
    if let Some((index, &value)) = dc.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(GpError::NonPositiveAllocation { index, value });
    }
    build(model, DcPolicy::Pinned(dc))
}

fn build(model: &UncertaintyModel, policy: DcPolicy) -> Result<AllocationProgram, GpError> {
    let n = model.n;
    if n > 1 {
        if let Some(r) = model.rows.iter().find(|r| r.dim() == 0) {
            return Err(GpError::NotStronglyConnected(r.row));
        }
    }
    let mut prog = LogDomainProgram::default();
    let dc: Vec<usize> = (0..n).map(|i| prog.add_y(format!("log_dc[{}]", i + 1))).collect();
    let u: Vec<usize> = (0..n).map(|i| prog.add_y(format!("log_u[{}]", i + 1))).collect();
    let lambda = prog.add_y("log_lambda");
    prog.objective = LinearForm {
        y: vec![(lambda, 1.0)],
        ..Default::default()
    };

    // Pinned values and the starting allocation.
    let mut dc_start = vec![0.0; n];
    match policy {
        DcPolicy::Pinned(values) => {
            for i in 0..n {
                prog.push_monomial_equality(
                    format!("pin[{}]", i + 1),
                    &Monomial::new(1.0 / values[i], vec![(dc[i], 1.0)])?,
                )?;
                dc_start[i] = values[i];
            }
        }
        DcPolicy::Budgeted {
            cost,
            budget,
            control,
        } => {
            let mut is_control = vec![false; n];
            if budget > 0.0 {
                for &c in control {
                    is_control[c] = true;
                }
            }
            let n_control = is_control.iter().filter(|&&c| c).count();
            let mut budget_terms = Vec::new();
            let mut rhs = budget;
            // Spend per control node at the start, strictly inside (0, 1).
            let share = if n_control > 0 {
                (budget / (2.0 * n_control as f64)).min(0.5)
            } else {
                0.0
            };
            for i in 0..n {
                let hi = cost.upper[i];
                if !is_control[i] {
                    prog.push_monomial_equality(
                        format!("pin[{}]", i + 1),
                        &Monomial::new(1.0 / hi, vec![(dc[i], 1.0)])?,
                    )?;
                    dc_start[i] = hi;
                    continue;
                }
                let lo = cost.lower[i];
                let k = cost.slope(i);
                rhs += k / hi;
                budget_terms.push((i, k));
                prog.push_posynomial(
                    format!("dc_upper[{}]", i + 1),
                    &Posynomial::new(vec![Monomial::new(1.0 / hi, vec![(dc[i], 1.0)])?])?,
                )?;
                prog.push_posynomial(
                    format!("dc_lower[{}]", i + 1),
                    &Posynomial::new(vec![Monomial::new(lo, vec![(dc[i], -1.0)])?])?,
                )?;
                dc_start[i] = cost.inverse(i, share);
            }
            if !budget_terms.is_empty() {
                let terms = budget_terms
                    .iter()
                    .map(|&(i, k)| Monomial::new(k / rhs, vec![(dc[i], -1.0)]))
                    .collect::<Result<Vec<_>, _>>()?;
                // A single control node gives a one-term posynomial, handled
                // as an affine bound by `push_posynomial`.
                prog.push_posynomial("budget", &Posynomial::new(terms)?)?;
            }
        }
    }

    // prod u = 1
    prog.push_monomial_equality(
        "normalize_u",
        &Monomial::new(1.0, u.iter().map(|&v| (v, 1.0)).collect())?,
    )?;

    let mut rows = Vec::with_capacity(n);
    for row in &model.rows {
        let i = row.row;
        let uncertain = row
            .sources
            .iter()
            .map(|&j| Monomial::new(1.0, vec![(u[j], 1.0), (u[i], -1.0), (lambda, -1.0)]))
            .collect::<Result<Vec<_>, _>>()?;
        let fixed = Monomial::new(1.0, vec![(dc[i], 1.0), (lambda, -1.0)])?;
        rows.push(dualize_robust_row(&mut prog, row, &uncertain, &[fixed])?);
    }

    let layout = AllocationLayout {
        dc,
        u,
        lambda,
        rows,
    };
    prog.start = Some(starting_point(model, &prog, &layout, &dc_start)?);
    Ok(AllocationProgram {
        program: prog,
        layout,
    })
}

/// Strictly feasible start: the Perron pair of the all-upper-bounds state
/// matrix with `lambda` 10% above its root, and multipliers that put the row
/// sup on the upper-bound constraints.
fn starting_point(
    model: &UncertaintyModel,
    prog: &LogDomainProgram,
    layout: &AllocationLayout,
    dc: &[f64],
) -> Result<Point, GpError> {
    let n = model.n;
    let m = state_matrix(&model.upper_matrix(), dc)?;
    let perron = spectral_radius(&m, DEFAULT_RHO_TOL)?;
    let lambda = 1.1 * perron.rho.max(f64::MIN_POSITIVE);
    let mean_log = perron.vector.iter().map(|v| v.ln()).sum::<f64>() / n as f64;
    let u: Vec<f64> = perron.vector.iter().map(|v| (v.ln() - mean_log).exp()).collect();

    let mut y = vec![0.0; prog.ny()];
    for i in 0..n {
        y[layout.dc[i]] = dc[i].ln();
        y[layout.u[i]] = u[i].ln();
    }
    y[layout.lambda] = lambda.ln();

    const ETA: f64 = 0.02;
    let mut nu = vec![0.0; prog.nnu()];
    for block in &layout.rows {
        let red = &block.reduced;
        let k = red.dim();
        if k == 0 {
            continue;
        }
        let scale = 1.0
            + red.hi.iter().sum::<f64>()
            + red.data.iter().map(|d| d.rhs.abs()).sum::<f64>();
        let eps = 0.01 / scale;
        let i = block.row;
        for c in 0..k {
            let weight = u[red.sources[c]] / (u[i] * lambda);
            nu[block.nu[c]] = weight * (1.0 + ETA) + eps;
            nu[block.nu[k + c]] = eps;
        }
        for r in 2 * k..red.num_constraints() {
            nu[block.nu[r]] = eps;
        }
    }
    Ok(Point { y, nu })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ContactNetwork, Edge};
    use crate::uncertainty::{assemble, build_data_constraints, build_prior};

    fn two_cycle(rate: f64) -> ContactNetwork {
        ContactNetwork::new(
            2,
            vec![
                Edge { src: 0, dst: 1, rate },
                Edge { src: 1, dst: 0, rate },
            ],
        )
        .unwrap()
    }

    #[test]
    fn log_transform_examples() {
        let gp = GeometricProgram {
            var_names: vec!["x1".into(), "x2".into()],
            objective: Monomial::new(1.0, vec![(0, 1.0)]).unwrap(),
            inequalities: vec![Posynomial::new(vec![
                Monomial::new(1.0, vec![(0, 1.0)]).unwrap(),
                Monomial::new(1.0, vec![(1, 1.0)]).unwrap(),
            ])
            .unwrap()],
            equalities: vec![Monomial::new(1.0, vec![(0, 1.0), (1, 1.0)]).unwrap()],
        };
        let prog = log_transform(&gp).unwrap();
        assert_eq!(prog.equalities[0].y, vec![(0, 1.0), (1, 1.0)]);
        assert_eq!(prog.equalities[0].constant, 0.0);
        let ineq = &prog.inequalities[0];
        assert_eq!(ineq.exp_terms.len(), 2);
        assert_eq!(ineq.linear.constant, -1.0);
        // e^{y1} + e^{y2} <= 1 at y = (ln 0.3, ln 0.6)
        let y = [0.3f64.ln(), 0.6f64.ln()];
        assert!((ineq.eval(&y, &[]) - (-0.1)).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonpositive_coefficients() {
        assert!(matches!(
            Monomial::new(0.0, vec![]),
            Err(GpError::NonPositiveCoefficient(_))
        ));
        assert!(matches!(Posynomial::new(vec![]), Err(GpError::EmptyPosynomial)));
        let gp = GeometricProgram {
            var_names: vec!["x".into()],
            objective: Monomial { coeff: -1.0, exponents: vec![] },
            inequalities: vec![],
            equalities: vec![],
        };
        assert!(log_transform(&gp).is_err());
    }

    #[test]
    fn degenerate_row_reduces_to_nominal_constraint() {
        let net = two_cycle(0.2);
        let model = assemble(&build_prior(&net, 1.0, 1.0).unwrap(), &[]).unwrap();
        let mut prog = LogDomainProgram::default();
        let u1 = prog.add_y("u1");
        let u2 = prog.add_y("u2");
        let lam = prog.add_y("lam");
        let dc = prog.add_y("dc");
        let m = Monomial::new(1.0, vec![(u2, 1.0), (u1, -1.0), (lam, -1.0)]).unwrap();
        let fixed = Monomial::new(1.0, vec![(dc, 1.0), (lam, -1.0)]).unwrap();
        let block = dualize_robust_row(&mut prog, &model.rows[0], &[m], &[fixed]).unwrap();
        assert!(block.nu.is_empty());
        assert_eq!(prog.inequalities.len(), 1);
        // 0.2 u2/(u1 lam) + dc/lam <= 1 at u = 1, lam = 1, dc = 0.5: 0.7 - 1.
        let y = [0.0, 0.0, 0.0, 0.5f64.ln()];
        assert!((prog.inequalities[0].eval(&y, &[]) + 0.3).abs() < 1e-15);
    }

    #[test]
    fn interval_row_block_is_exact_at_the_upper_endpoint() {
        let net = two_cycle(0.2);
        let model = assemble(&build_prior(&net, 0.5, 1.5).unwrap(), &[]).unwrap();
        let mut prog = LogDomainProgram::default();
        let u1 = prog.add_y("u1");
        let u2 = prog.add_y("u2");
        let lam = prog.add_y("lam");
        let dc = prog.add_y("dc");
        let m = Monomial::new(1.0, vec![(u2, 1.0), (u1, -1.0), (lam, -1.0)]).unwrap();
        let fixed = Monomial::new(1.0, vec![(dc, 1.0), (lam, -1.0)]).unwrap();
        let block = dualize_robust_row(&mut prog, &model.rows[0], &[m], &[fixed]).unwrap();
        assert_eq!(block.nu.len(), 2);
        // At u2/u1 = 2, lam = 1, dc = 0.3: sup = 0.3 * 2 + 0.3 = 0.9 <= 1.
        let y = [0.0, 2f64.ln(), 0.0, 0.3f64.ln()];
        // Dual certificate: weight on the upper-bound row.
        let nu = [2.0, 0.0];
        for c in &prog.inequalities {
            assert!(c.eval(&y, &nu) <= 1e-12, "{} violated", c.label);
        }
        assert!((prog.inequalities[1].eval(&y, &nu) - (0.9 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn allocation_program_shape_and_start() {
        let net = two_cycle(0.2);
        let p0 = crate::epidemic::InfectionState::uniform(2, 0.5).unwrap();
        let traj =
            crate::epidemic::simulate(&net, &net.rate_matrix(), &[0.5, 0.5], &p0, 3).unwrap();
        let obs = crate::epidemic::observe(&traj, &[0, 1]).unwrap();
        let model = assemble(
            &build_prior(&net, 0.5, 1.5).unwrap(),
            &build_data_constraints(&obs, 2).unwrap(),
        )
        .unwrap();
        let cost = CostModel::homogeneous(2, 0.1, 0.5).unwrap();
        let ap = assemble_robust_allocation(&model, &cost, 1.0, &[0, 1]).unwrap();
        let prog = &ap.program;
        assert_eq!(prog.ny(), 5);
        let expected_nu: usize = model.rows.iter().map(|r| r.num_constraints()).sum();
        assert_eq!(prog.nnu(), expected_nu);
        let start = prog.start.as_ref().unwrap();
        for c in &prog.inequalities {
            assert!(c.eval(&start.y, &start.nu) < 0.0, "{} not strict", c.label);
        }
        assert!(start.nu.iter().all(|&v| v > 0.0));
        assert!(prog.max_violation(start) < 1e-12);
        assert!(prog.to_json().unwrap().contains("log_lambda"));

        assert!(matches!(
            assemble_robust_allocation(&model, &cost, -1.0, &[0]),
            Err(GpError::InvalidBudget(_))
        ));
        assert!(matches!(
            assemble_robust_allocation(&model, &cost, 1.0, &[2]),
            Err(GpError::ControlOutOfRange(2))
        ));
    }

    #[test]
    fn zero_budget_pins_every_node() {
        let net = two_cycle(0.2);
        let model = assemble(&build_prior(&net, 0.5, 1.5).unwrap(), &[]).unwrap();
        let cost = CostModel::homogeneous(2, 0.1, 0.5).unwrap();
        let ap = assemble_robust_allocation(&model, &cost, 0.0, &[0, 1]).unwrap();
        let pins = ap
            .program
            .equalities
            .iter()
            .filter(|e| e.label.starts_with("pin"))
            .count();
        assert_eq!(pins, 2);
        assert!(!ap.program.inequalities.iter().any(|c| c.label == "budget"));
    }
}
