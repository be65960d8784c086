mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{rho_eig, vertices};
use robust_sis::allocate::CostModel;
use robust_sis::epidemic::{linear_step, sis_step, InfectionState};
use robust_sis::network::{inf_max_value, spectral_radius, NonnegativeMatrix, DEFAULT_RHO_TOL};
use robust_sis::uncertainty::{Provenance, RowInequality, RowPolytope, UncertaintyModel};

fn irreducible(n: usize) -> impl Strategy<Value = NonnegativeMatrix> {
    proptest::collection::vec(0.0..1.0f64, n * n).prop_map(move |vals| {
        let mut m = DMatrix::from_row_slice(n, n, &vals);
        for i in 0..n {
            // keep a cycle so the matrix stays irreducible after thinning
            let j = (i + 1) % n;
            m[(j, i)] = m[(j, i)].max(0.05);
        }
        m.iter_mut().filter(|v| **v < 0.4).for_each(|v| *v = 0.0);
        for i in 0..n {
            let j = (i + 1) % n;
            if m[(j, i)] == 0.0 {
                m[(j, i)] = 0.05;
            }
        }
        NonnegativeMatrix::new(m).unwrap()
    })
}

fn row_polytope() -> impl Strategy<Value = RowPolytope> {
    (1usize..=4).prop_flat_map(|k| {
        (
            proptest::collection::vec((0.01..0.4f64, 0.01..0.5f64), k),
            proptest::collection::vec((proptest::collection::vec(0.0..1.0f64, k), 0.01..0.3f64), 0..4),
        )
            .prop_map(move |(boxes, rows)| {
                let lo: Vec<f64> = boxes.iter().map(|b| b.0).collect();
                let hi: Vec<f64> = boxes.iter().map(|b| b.0 + b.1).collect();
                let mid: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
                let data = rows
                    .into_iter()
                    .map(|(coeffs, slack)| {
                        let rhs = coeffs.iter().zip(&mid).map(|(a, b)| a * b).sum::<f64>() + slack;
                        RowInequality { coeffs, rhs }
                    })
                    .collect();
                RowPolytope {
                    row: 0,
                    sources: (1..=k).collect(),
                    lo,
                    hi,
                    data,
                }
            })
    })
}

/// Model whose first row is `row` and whose other rows have no in-edges.
fn one_row_model(row: RowPolytope, provenance: Provenance) -> UncertaintyModel {
    let n = row.dim() + 1;
    let mut rows = vec![row];
    rows.extend((1..n).map(|i| RowPolytope { row: i, sources: vec![], lo: vec![], hi: vec![], data: vec![] }));
    UncertaintyModel { n, rows, provenance }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inf_max_value_bounds_the_spectral_radius(
        m in (1usize..=6).prop_flat_map(irreducible),
        scale in proptest::collection::vec(0.01..1.0f64, 6),
    ) {
        let rho = rho_eig(m.as_matrix());
        let u: Vec<f64> = scale[..m.n()].to_vec();
        prop_assert!(inf_max_value(&m, &u).unwrap() >= rho - 1e-9);
        let p = spectral_radius(&m, DEFAULT_RHO_TOL).unwrap();
        prop_assert!((p.rho - rho).abs() <= 1e-8 * rho.max(1.0));
    }

    #[test]
    fn linear_step_dominates_sis_step(
        raw in proptest::collection::vec(0.0..0.3f64, 16),
        p in proptest::collection::vec(0.0..=1.0f64, 4),
        delta in proptest::collection::vec(0.05..0.95f64, 4),
    ) {
        let mut b = DMatrix::from_row_slice(4, 4, &raw);
        b.fill_diagonal(0.0);
        let b = NonnegativeMatrix::new(b).unwrap();
        let dc: Vec<f64> = delta.iter().map(|d| 1.0 - d).collect();
        let next = sis_step(&InfectionState::new(p.clone()).unwrap(), &b, &delta).unwrap();
        let lin = linear_step(&p, &b, &dc).unwrap();
        for (a, b) in lin.iter().zip(next.as_slice()) {
            prop_assert!(*a >= b - 1e-12);
        }
    }

    #[test]
    fn cost_inverse_round_trips(lower in 0.05..0.4f64, width in 0.05..0.5f64, frac in 0.0..=1.0f64) {
        let cost = CostModel::homogeneous(1, lower, lower + width).unwrap();
        let dc = cost.inverse(0, frac);
        prop_assert!(dc >= lower - 1e-12 && dc <= lower + width + 1e-12);
        prop_assert!((cost.cost(0, dc).unwrap() - frac).abs() <= 1e-9);
    }

    #[test]
    fn row_sup_matches_the_best_vertex(row in row_polytope(), m in proptest::collection::vec(0.05..2.0f64, 4)) {
        let m = &m[..row.dim()];
        let best = vertices(&row)
            .iter()
            .map(|v| v.iter().zip(m).map(|(a, b)| a * b).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        let sup = row.sup(m).unwrap();
        prop_assert!((sup.value - best).abs() <= 1e-9 * (1.0 + best));
        prop_assert!((row.dual_value(m).unwrap() - best).abs() <= 1e-9 * (1.0 + best));
        prop_assert!(row.contains(&sup.x));
    }

    #[test]
    fn samples_stay_inside_and_below_the_sup(row in row_polytope(), seed in any::<u64>()) {
        let k = row.dim();
        let model = one_row_model(row, Provenance { horizon: None, sensors: vec![], lo_scale: 1.0, hi_scale: 1.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = model.sample(&mut rng, 20).unwrap();
        prop_assert!(model.contains(&b));
        let ones = vec![1.0; k];
        let total: f64 = (1..=k).map(|j| b.get(0, j)).sum();
        prop_assert!(total <= model.row_sup(0, &ones).unwrap() + 1e-9);
    }

    #[test]
    fn model_json_round_trips(row in row_polytope()) {
        let model = one_row_model(row, Provenance { horizon: Some(3), sensors: vec![1, 2], lo_scale: 0.5, hi_scale: 1.5 });
        let back = UncertaintyModel::from_json(&model.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, model);
    }
}
