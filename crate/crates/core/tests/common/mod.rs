//! Brute-force oracles and instance builders shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use robust_sis::allocate::CostModel;
use robust_sis::epidemic::{observe, simulate, InfectionState, Trajectory};
use robust_sis::experiments::{generate_network, GeneratorParams};
use robust_sis::network::{ContactNetwork, NonnegativeMatrix};
use robust_sis::uncertainty::{assemble, build_data_constraints, build_prior, RowPolytope, UncertaintyModel};

pub const LO_SCALE: f64 = 0.5;
pub const HI_SCALE: f64 = 1.5;

/// Spectral radius from the full complex spectrum, independent of the
/// library's power iteration.
pub fn rho_eig(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn rho_of(b: &NonnegativeMatrix, dc: &[f64]) -> f64 {
    rho_eig(&(b.as_matrix() + DMatrix::from_diagonal(&DVector::from_column_slice(dc))))
}

/// Vertices of `F beta + g >= 0` by solving every square subsystem of
/// active constraints.
pub fn vertices(row: &RowPolytope) -> Vec<Vec<f64>> {
    let k = row.dim();
    if k == 0 {
        return vec![vec![]];
    }
    let f = row.f_matrix();
    let g = row.g_vector();
    let m = f.len();
    let mut out: Vec<Vec<f64>> = Vec::new();
    let mut subset: Vec<usize> = (0..k).collect();
    loop {
        let a = DMatrix::from_fn(k, k, |r, c| f[subset[r]][c]);
        let rhs = DVector::from_fn(k, |r, _| -g[subset[r]]);
        if let Some(beta) = a.lu().solve(&rhs) {
            let beta: Vec<f64> = beta.iter().copied().collect();
            let feasible = beta.iter().all(|v| v.is_finite())
                && (0..m).all(|r| f[r].iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + g[r] >= -1e-9);
            if feasible && !out.iter().any(|v| v.iter().zip(&beta).all(|(a, b)| (a - b).abs() < 1e-9)) {
                out.push(beta);
            }
        }
        // next k-subset of 0..m in lexicographic order
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if subset[i] < m - k + i {
                break;
            }
        }
        subset[i] += 1;
        for j in i + 1..k {
            subset[j] = subset[j - 1] + 1;
        }
    }
}

/// Vertices not dominated entrywise by another vertex.
pub fn maximal(vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    vs.iter()
        .filter(|v| {
            !vs.iter().any(|w| {
                w.iter().zip(v.iter()).all(|(a, b)| *a >= b - 1e-12) && w.iter().zip(v.iter()).any(|(a, b)| *a > b + 1e-9)
            })
        })
        .cloned()
        .collect()
}

/// Every contact matrix assembled from one maximal vertex per row.
pub fn vertex_matrices(model: &UncertaintyModel) -> Vec<DMatrix<f64>> {
    let n = model.n;
    let mut mats = vec![DMatrix::zeros(n, n)];
    for row in &model.rows {
        let verts = maximal(&vertices(row));
        let mut next = Vec::with_capacity(mats.len() * verts.len());
        for m in &mats {
            for v in &verts {
                let mut m = m.clone();
                for (c, &src) in row.sources.iter().enumerate() {
                    m[(row.row, src)] = v[c];
                }
                next.push(m);
            }
        }
        mats = next;
    }
    mats
}

pub fn worst_over(mats: &[DMatrix<f64>], dc: &[f64]) -> f64 {
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(dc));
    mats.iter().map(|m| rho_eig(&(m + &d))).fold(f64::NEG_INFINITY, f64::max)
}

/// Brute-force minimum of `worst_over(mats, dc)` over three-node allocations
/// that spend the whole budget: a 0.005 grid on the first two rates with the
/// third set by the budget, then a 0.0005 grid around the best cell.
pub fn grid_oracle(mats: &[DMatrix<f64>], cost: &CostModel, budget: f64) -> (f64, Vec<f64>) {
    assert_eq!(cost.len(), 3);
    let eval = |d1: f64, d2: f64| -> Option<(f64, Vec<f64>)> {
        let (l, u) = (cost.lower[2], cost.upper[2]);
        if d1 < cost.lower[0] || d1 > cost.upper[0] || d2 < cost.lower[1] || d2 > cost.upper[1] {
            return None;
        }
        let left = budget - cost.cost(0, d1).ok()? - cost.cost(1, d2).ok()?;
        if left < -1e-12 {
            return None;
        }
        let d3 = cost.inverse(2, left).clamp(l, u);
        let dc = vec![d1, d2, d3];
        Some((worst_over(mats, &dc), dc))
    };
    let search = |lo: [f64; 2], hi: [f64; 2], step: f64| {
        let mut best: Option<(f64, Vec<f64>)> = None;
        let steps = |a: f64, b: f64| ((b - a) / step).round() as usize;
        for i in 0..=steps(lo[0], hi[0]) {
            for j in 0..=steps(lo[1], hi[1]) {
                let d1 = (lo[0] + i as f64 * step).min(hi[0]);
                let d2 = (lo[1] + j as f64 * step).min(hi[1]);
                if let Some((v, dc)) = eval(d1, d2) {
                    if best.as_ref().is_none_or(|b| v < b.0) {
                        best = Some((v, dc));
                    }
                }
            }
        }
        best.expect("some grid point spends within budget")
    };
    let coarse = search([cost.lower[0], cost.lower[1]], [cost.upper[0], cost.upper[1]], 0.005);
    let w = 0.01;
    let lo = [
        (coarse.1[0] - w).max(cost.lower[0]),
        (coarse.1[1] - w).max(cost.lower[1]),
    ];
    let hi = [
        (coarse.1[0] + w).min(cost.upper[0]),
        (coarse.1[1] + w).min(cost.upper[1]),
    ];
    let fine = search(lo, hi, 0.0005);
    if fine.0 < coarse.0 {
        fine
    } else {
        coarse
    }
}

/// A simulated outbreak on a generated network.
pub struct Instance {
    pub net: ContactNetwork,
    pub b: NonnegativeMatrix,
    pub delta0: Vec<f64>,
    pub trajectory: Trajectory,
}

impl Instance {
    pub fn model(&self, horizon: usize) -> UncertaintyModel {
        let n = self.net.n();
        let prior = build_prior(&self.net, LO_SCALE, HI_SCALE).unwrap();
        let sensors: Vec<usize> = (0..n).collect();
        let obs = observe(&self.trajectory, &sensors).unwrap().prefix(horizon).unwrap();
        let data = build_data_constraints(&obs, n).unwrap();
        assemble(&prior, &data).unwrap()
    }

    pub fn cost(&self, dc_lower: f64) -> CostModel {
        CostModel::new(
            vec![dc_lower; self.delta0.len()],
            self.delta0.iter().map(|d| 1.0 - d).collect(),
        )
        .unwrap()
    }
}

/// Random instance with `n` nodes; `delta0` drawn per node from `delta_range`
/// and the initial state uniform on `[0.05, 0.95]`. Seeds whose band is
/// unattainable are skipped deterministically.
pub fn random_instance(
    n: usize,
    seed: u64,
    params: &GeneratorParams,
    delta_range: (f64, f64),
    horizon: usize,
) -> Instance {
    for attempt in 0u64.. {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(attempt));
        let delta0: Vec<f64> = (0..n).map(|_| rng.random_range(delta_range.0..=delta_range.1)).collect();
        let dc_upper: Vec<f64> = delta0.iter().map(|d| 1.0 - d).collect();
        let Ok(net) = generate_network(n, rng.random(), params, HI_SCALE, &dc_upper) else {
            continue;
        };
        let p0 = InfectionState::new((0..n).map(|_| rng.random_range(0.05..=0.95)).collect()).unwrap();
        let b = net.rate_matrix();
        let trajectory = simulate(&net, &b, &delta0, &p0, horizon).unwrap();
        return Instance {
            net,
            b,
            delta0,
            trajectory,
        };
    }
    unreachable!()
}
