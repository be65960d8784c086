mod common;

use common::{random_instance, rho_of, LO_SCALE, HI_SCALE};
use robust_sis::allocate::{certify, evaluate_allocation, optimal_allocate, robust_allocate, worst_case_rho};
use robust_sis::experiments::GeneratorParams;
use robust_sis::gp::{log_transform, GeometricProgram, Monomial, Posynomial};
use robust_sis::solver::{solve, SolverOptions, Status};
use robust_sis::uncertainty::{assemble, build_prior};

fn mono(coeff: f64, exps: &[(usize, f64)]) -> Monomial {
    Monomial::new(coeff, exps.to_vec()).unwrap()
}

fn solve_gp(gp: &GeometricProgram) -> (f64, Vec<f64>) {
    let prog = log_transform(gp).unwrap();
    let sol = solve(&prog, &SolverOptions::default()).unwrap();
    assert_eq!(sol.status, Status::Optimal);
    (sol.objective.exp(), sol.y.iter().map(|v| v.exp()).collect())
}

#[test]
fn epigraph_of_a_sum_with_a_product_floor() {
    // min x + y s.t. xy >= 1, written as min t with (x + y) / t <= 1
    let gp = GeometricProgram {
        var_names: vec!["x".into(), "y".into(), "t".into()],
        objective: mono(1.0, &[(2, 1.0)]),
        inequalities: vec![
            Posynomial::new(vec![mono(1.0, &[(0, 1.0), (2, -1.0)]), mono(1.0, &[(1, 1.0), (2, -1.0)])]).unwrap(),
            Posynomial::new(vec![mono(1.0, &[(0, -1.0), (1, -1.0)])]).unwrap(),
        ],
        equalities: vec![],
    };
    let (value, x) = solve_gp(&gp);
    assert!((value - 2.0).abs() < 1e-6, "{value}");
    assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] - 1.0).abs() < 1e-3);
}

#[test]
fn largest_box_for_a_surface_area() {
    // max xyz s.t. 2(xy + yz + xz) <= 24: the cube of side 2
    let gp = GeometricProgram {
        var_names: vec!["x".into(), "y".into(), "z".into()],
        objective: mono(1.0, &[(0, -1.0), (1, -1.0), (2, -1.0)]),
        inequalities: vec![Posynomial::new(vec![
            mono(2.0 / 24.0, &[(0, 1.0), (1, 1.0)]),
            mono(2.0 / 24.0, &[(1, 1.0), (2, 1.0)]),
            mono(2.0 / 24.0, &[(0, 1.0), (2, 1.0)]),
        ])
        .unwrap()],
        equalities: vec![],
    };
    let (value, x) = solve_gp(&gp);
    assert!((value - 0.125).abs() < 1e-6, "{value}");
    for v in x {
        assert!((v - 2.0).abs() < 1e-3, "{v}");
    }
}

#[test]
fn monomial_equality_is_respected() {
    // min x + y s.t. xy = 4
    let gp = GeometricProgram {
        var_names: vec!["x".into(), "y".into(), "t".into()],
        objective: mono(1.0, &[(2, 1.0)]),
        inequalities: vec![
            Posynomial::new(vec![mono(1.0, &[(0, 1.0), (2, -1.0)]), mono(1.0, &[(1, 1.0), (2, -1.0)])]).unwrap(),
        ],
        equalities: vec![mono(0.25, &[(0, 1.0), (1, 1.0)])],
    };
    let (value, x) = solve_gp(&gp);
    assert!((value - 4.0).abs() < 1e-6, "{value}");
    assert!((x[0] * x[1] - 4.0).abs() < 1e-8);
}

fn params() -> GeneratorParams {
    GeneratorParams {
        density: 0.3,
        ..Default::default()
    }
}

#[test]
fn optimal_rate_is_attained_by_its_allocation() {
    let opts = SolverOptions::default();
    for seed in 0..5 {
        let n = 4 + seed as usize;
        let inst = random_instance(n, 70 + seed, &params(), (0.3, 0.7), 0);
        let cost = inst.cost(0.1);
        let control: Vec<usize> = (0..n).collect();
        let opt = optimal_allocate(&inst.b, &cost, 0.5 * n as f64, &control, &opts).unwrap();
        assert_eq!(opt.status, Status::Optimal);
        assert!((opt.lambda_star - rho_of(&inst.b, &opt.dc)).abs() < 1e-6);
        assert!(opt.spend <= 0.5 * n as f64 + 1e-6);
    }
}

#[test]
fn robust_rate_is_sandwiched_and_certified() {
    let opts = SolverOptions::default();
    for seed in 0..4 {
        let n = 4 + 2 * seed as usize;
        let horizon = 5;
        let inst = random_instance(n, 90 + seed, &params(), (0.3, 0.7), horizon);
        let cost = inst.cost(0.1);
        let budget = 0.5 * n as f64;
        let control: Vec<usize> = (0..n).collect();
        let model = inst.model(horizon);
        let box_only = assemble(&build_prior(&inst.net, LO_SCALE, HI_SCALE).unwrap(), &[]).unwrap();

        let rob = robust_allocate(&model, &cost, budget, &control, &opts).unwrap();
        let loose = robust_allocate(&box_only, &cost, budget, &control, &opts).unwrap();
        let opt = optimal_allocate(&inst.b, &cost, budget, &control, &opts).unwrap();
        assert!(rob.lambda_star <= loose.lambda_star + 1e-6);
        assert!(rob.lambda_star >= opt.lambda_star - 1e-6);
        assert!(rob.lambda_star >= evaluate_allocation(&inst.b, &rob.dc).unwrap() - 1e-6);

        let wc = worst_case_rho(&model, &rob.dc, &opts).unwrap();
        assert!((wc - rob.lambda_star).abs() < 1e-5, "{wc} vs {}", rob.lambda_star);
        let cert = certify(&model, &rob.dc, rob.lambda_star, 1e-6, 200, 30, seed).unwrap();
        assert_eq!(cert.violations, 0, "max sampled rho {}", cert.max_rho);
    }
}

#[test]
fn restricted_control_leaves_other_nodes_natural() {
    let inst = random_instance(6, 123, &params(), (0.3, 0.7), 4);
    let cost = inst.cost(0.1);
    let model = inst.model(4);
    let control = [1, 4];
    let rob = robust_allocate(&model, &cost, 3.0, &control, &SolverOptions::default()).unwrap();
    for i in 0..6 {
        if !control.contains(&i) {
            assert!((rob.dc[i] - cost.upper[i]).abs() < 1e-9);
        }
    }
    let all: Vec<usize> = (0..6).collect();
    let full = robust_allocate(&model, &cost, 3.0, &all, &SolverOptions::default()).unwrap();
    assert!(full.lambda_star <= rob.lambda_star + 1e-6);
}
