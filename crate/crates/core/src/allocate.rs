//! Allocation problems: robust allocation over an uncertainty model, the
//! known-network optimum, worst-case evaluation of a fixed allocation, and the
//! vaccination cost model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::gp::{assemble_robust_allocation, assemble_worst_case, AllocationProgram, GpError};
use crate::network::{spectral_radius, state_matrix, NetworkError, NonnegativeMatrix, DEFAULT_RHO_TOL};
use crate::solver::{solve, SolverError, SolverOptions, Status};
use crate::uncertainty::{Provenance, RowPolytope, UncertaintyError, UncertaintyModel};

/// Slack allowed when checking that a rate lies inside its cost bounds.
const BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AllocateError {
    #[error("cost bounds for node {node} must satisfy 0 < lower < upper, got [{lower}, {upper}]")]
    InvalidBounds { node: usize, lower: f64, upper: f64 },
    #[error("rate {value} for node {node} outside [{lower}, {upper}]")]
    OutOfRange {
        node: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("node {0} out of range")]
    NodeOutOfRange(usize),
    #[error("contact matrix is reducible")]
    Reducible,
    #[error("allocation program is infeasible")]
    Infeasible,
    #[error("program assembly: {0}")]
    Program(#[from] GpError),
    #[error("solver: {0}")]
    Solver(#[from] SolverError),
    #[error("network: {0}")]
    Network(#[from] NetworkError),
    #[error("uncertainty model: {0}")]
    Uncertainty(#[from] UncertaintyError),
}

/// Per-node bounds on the complementary recovery rate and the cost
/// `g_i(d) = (1/d - 1/upper_i) / (1/lower_i - 1/upper_i)`, which is 0 at the
/// natural rate and 1 at the fastest recovery.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostModel {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl CostModel {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, AllocateError> {
        if lower.len() != upper.len() {
            return Err(AllocateError::NodeOutOfRange(lower.len().min(upper.len())));
        }
        for (node, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo > 0.0 && lo < hi && hi.is_finite()) {
                return Err(AllocateError::InvalidBounds {
                    node,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn homogeneous(n: usize, lower: f64, upper: f64) -> Result<Self, AllocateError> {
        Self::new(vec![lower; n], vec![upper; n])
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    /// `k_i = 1 / (1/lower_i - 1/upper_i)`.
    pub fn slope(&self, node: usize) -> f64 {
        1.0 / (1.0 / self.lower[node] - 1.0 / self.upper[node])
    }

    fn formula(&self, node: usize, dc: f64) -> f64 {
        (1.0 / dc - 1.0 / self.upper[node]) * self.slope(node)
    }

    pub fn cost(&self, node: usize, dc: f64) -> Result<f64, AllocateError> {
        if node >= self.len() {
            return Err(AllocateError::NodeOutOfRange(node));
        }
        let (lower, upper) = (self.lower[node], self.upper[node]);
        if !(dc >= lower && dc <= upper) {
            return Err(AllocateError::OutOfRange {
                node,
                value: dc,
                lower,
                upper,
            });
        }
        if dc == upper {
            return Ok(0.0);
        }
        if dc == lower {
            return Ok(1.0);
        }
        Ok(self.formula(node, dc))
    }

    /// The rate whose cost is `spend`, for `spend` in `[0, 1]`.
    pub fn inverse(&self, node: usize, spend: f64) -> f64 {
        1.0 / (spend / self.slope(node) + 1.0 / self.upper[node])
    }

    /// Total cost of an allocation. Rates within `BOUND_TOL` of a bound are
    /// clamped onto it.
    pub fn spend(&self, dc: &[f64]) -> Result<f64, AllocateError> {
        let mut total = 0.0;
        for (node, &d) in dc.iter().enumerate() {
            if node >= self.len() {
                return Err(AllocateError::NodeOutOfRange(node));
            }
            let d = if d < self.lower[node] && d >= self.lower[node] - BOUND_TOL {
                self.lower[node]
            } else if d > self.upper[node] && d <= self.upper[node] + BOUND_TOL {
                self.upper[node]
            } else {
                d
            };
            total += self.cost(node, d)?;
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationResult {
    pub dc: Vec<f64>,
    pub lambda_star: f64,
    pub spend: f64,
    pub status: Status,
    pub kkt_residual: f64,
    pub provenance: Provenance,
}

impl AllocationResult {
    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

fn run(
    ap: &AllocationProgram,
    opts: &SolverOptions,
) -> Result<(Vec<f64>, f64, Status, f64), AllocateError> {
    let sol = solve(&ap.program, opts)?;
    if sol.status == Status::Infeasible {
        return Err(AllocateError::Infeasible);
    }
    if sol.status == Status::MaxIterations {
        log::warn!(
            "allocation solve stopped at the iteration cap (kkt residual {:.3e})",
            sol.kkt_residual
        );
    }
    let dc = ap.layout.dc.iter().map(|&v| sol.y[v].exp()).collect();
    let lambda = sol.y[ap.layout.lambda].exp();
    Ok((dc, lambda, sol.status, sol.kkt_residual))
}

/// Minimizes the worst-case spectral radius over `model` subject to the
/// budget. Non-control nodes keep their natural rate.
pub fn robust_allocate(
    model: &UncertaintyModel,
    cost: &CostModel,
    budget: f64,
    control: &[usize],
    opts: &SolverOptions,
) -> Result<AllocationResult, AllocateError> {
    let ap = assemble_robust_allocation(model, cost, budget, control)?;
    let (mut dc, lambda_star, status, kkt_residual) = run(&ap, opts)?;
    for (i, d) in dc.iter_mut().enumerate() {
        *d = d.clamp(cost.lower[i], cost.upper[i]);
    }
    let spend = cost.spend(&dc)?;
    Ok(AllocationResult {
        dc,
        lambda_star,
        spend,
        status,
        kkt_residual,
        provenance: model.provenance.clone(),
    })
}

/// Uncertainty model containing exactly `b`.
pub fn singleton_model(b: &NonnegativeMatrix) -> UncertaintyModel {
    let n = b.n();
    let rows = (0..n)
        .map(|i| {
            let sources: Vec<usize> = (0..n).filter(|&j| b.get(i, j) > 0.0).collect();
            let vals: Vec<f64> = sources.iter().map(|&j| b.get(i, j)).collect();
            RowPolytope {
                row: i,
                sources,
                lo: vals.clone(),
                hi: vals,
                data: vec![],
            }
        })
        .collect();
    UncertaintyModel {
        n,
        rows,
        provenance: Provenance {
            horizon: None,
            sensors: vec![],
            lo_scale: 1.0,
            hi_scale: 1.0,
        },
    }
}

/// Allocation minimizing `rho(B + diag(dc))` for a known contact matrix.
pub fn optimal_allocate(
    b: &NonnegativeMatrix,
    cost: &CostModel,
    budget: f64,
    control: &[usize],
    opts: &SolverOptions,
) -> Result<AllocationResult, AllocateError> {
    if b.n() > 1 && !b.is_irreducible() {
        return Err(AllocateError::Reducible);
    }
    robust_allocate(&singleton_model(b), cost, budget, control, opts)
}

/// Worst-case spectral radius of `M(B, dc)` over `B` in `model`.
pub fn worst_case_rho(model: &UncertaintyModel, dc: &[f64], opts: &SolverOptions) -> Result<f64, AllocateError> {
    let ap = assemble_worst_case(model, dc)?;
    Ok(run(&ap, opts)?.1)
}

/// `rho(B + diag(dc))`.
pub fn evaluate_allocation(b: &NonnegativeMatrix, dc: &[f64]) -> Result<f64, AllocateError> {
    if b.n() > 1 && !b.is_irreducible() {
        return Err(AllocateError::Reducible);
    }
    Ok(spectral_radius(&state_matrix(b, dc)?, DEFAULT_RHO_TOL)?.rho)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certification {
    pub samples: usize,
    /// Largest sampled `rho(M(B, dc))`.
    pub max_rho: f64,
    /// Samples exceeding the certified bound by more than the tolerance.
    pub violations: usize,
}

/// Samples `samples` contact matrices from `model` by per-row hit-and-run and
/// checks `rho(M(B, dc)) <= bound + tol` for each. Sample `k` uses stream `k`
/// of a ChaCha generator seeded with `seed`, so results do not depend on the
/// thread count.
pub fn certify(
    model: &UncertaintyModel,
    dc: &[f64],
    bound: f64,
    tol: f64,
    samples: usize,
    steps: usize,
    seed: u64,
) -> Result<Certification, AllocateError> {
    let rhos = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let b = model.sample(&mut rng, steps)?;
            Ok(spectral_radius(&state_matrix(&b, dc)?, DEFAULT_RHO_TOL)?.rho)
        })
        .collect::<Result<Vec<f64>, AllocateError>>()?;
    Ok(Certification {
        samples,
        max_rho: rhos.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        violations: rhos.iter().filter(|&&r| r > bound + tol).count(),
    })
}
