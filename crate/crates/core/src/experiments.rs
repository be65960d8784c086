//! Run configuration, synthetic networks, and the sweep harnesses that
//! trace the certified worst-case rate against the amount of data.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocate::{
    evaluate_allocation, optimal_allocate, robust_allocate, AllocateError, AllocationResult, CostModel,
};
use crate::epidemic::{observe, simulate, EpidemicError, InfectionState, ObservationSet, Trajectory};
use crate::network::{
    is_strongly_connected, spectral_radius, state_matrix, ContactNetwork, Edge, NetworkError, DEFAULT_RHO_TOL,
};
use crate::solver::SolverOptions;
use crate::uncertainty::{assemble, build_data_constraints, build_prior, UncertaintyError, UncertaintyModel};

/// Slack on the nonincreasing checks of the certified curves.
pub const MONOTONE_TOL: f64 = 1e-6;
/// Slack on `rho(M(B_true, d_rob)) >= rho(M(B_true, d_opt))`.
pub const GAP_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot place the spectral radius in [{lo}, {hi}]: {reason}")]
    Band { lo: f64, hi: f64, reason: String },
    #[error("robust allocation at {param} is worse than the optimal one by {gap:e}")]
    NegativeGap { param: f64, gap: f64 },
    #[error("certified rate increased from {prev} to {next} at {param}")]
    NotMonotone { param: f64, prev: f64, next: f64 },
    #[error("network: {0}")]
    Network(#[from] NetworkError),
    #[error("epidemic: {0}")]
    Epidemic(#[from] EpidemicError),
    #[error("uncertainty: {0}")]
    Uncertainty(#[from] UncertaintyError),
    #[error("allocation: {0}")]
    Allocate(#[from] AllocateError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

impl ExperimentError {
    /// True when the failure is an infeasible allocation program.
    pub fn is_infeasible(&self) -> bool {
        matches!(self, ExperimentError::Allocate(AllocateError::Infeasible))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    /// Probability of each off-cycle directed edge.
    pub density: f64,
    /// Weights are log-uniform in `[weight_scale / 10, weight_scale]` before
    /// rescaling.
    pub weight_scale: f64,
    /// Target band for `rho(hi_scale * B + diag(dc_upper))`.
    pub rho_band: [f64; 2],
    /// Overrides the run seed for network generation.
    pub seed: Option<u64>,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            density: 0.15,
            weight_scale: 0.1,
            rho_band: [1.1, 1.6],
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSource {
    Synthetic(GeneratorParams),
    /// Edge list with header `src,dst,weight`, 1-based nodes.
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RecoverySpec {
    Homogeneous(f64),
    /// CSV with header `node,delta0`, 1-based nodes.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SensorPolicy {
    /// The `k` nodes of largest weighted in+out degree.
    TopK(usize),
    /// Explicit 1-based node list.
    List(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSet {
    All,
    /// Explicit 1-based node list.
    List(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n: usize,
    pub network: NetworkSource,
    pub lo_scale: f64,
    pub hi_scale: f64,
    pub delta0: RecoverySpec,
    pub p0: f64,
    pub t_max: usize,
    pub sensors: SensorPolicy,
    /// Sensor counts visited by the sensor sweep: 0, step, 2 step, ..., n.
    pub sensor_step: usize,
    /// Defaults to `n / 2`.
    pub budget: Option<f64>,
    /// Smallest allowed complementary recovery rate.
    pub dc_lower: f64,
    pub control: ControlSet,
    pub solver: SolverOptions,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Fill the `seconds` column with wall-clock times. Off by default so
    /// that sweep outputs are reproducible byte for byte.
    pub record_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n: 20,
            network: NetworkSource::Synthetic(GeneratorParams::default()),
            lo_scale: 0.5,
            hi_scale: 1.5,
            delta0: RecoverySpec::Homogeneous(0.5),
            p0: 0.5,
            t_max: 40,
            sensors: SensorPolicy::TopK(20),
            sensor_step: 1,
            budget: None,
            dc_lower: 0.1,
            control: ControlSet::All,
            solver: SolverOptions::default(),
            out_dir: PathBuf::from("out"),
            seed: 7,
            record_timing: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn budget(&self) -> f64 {
        self.budget.unwrap_or(0.5 * self.n as f64)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if !(self.lo_scale > 0.0 && self.lo_scale <= 1.0 && self.hi_scale >= 1.0) {
            return bad(format!(
                "need 0 < lo_scale <= 1 <= hi_scale, got {} and {}",
                self.lo_scale, self.hi_scale
            ));
        }
        if !(0.0..=1.0).contains(&self.p0) {
            return bad(format!("p0 = {} outside [0, 1]", self.p0));
        }
        if self.t_max == 0 {
            return bad("t_max must be positive".into());
        }
        if self.sensor_step == 0 {
            return bad("sensor_step must be positive".into());
        }
        if !(self.budget() >= 0.0 && self.budget().is_finite()) {
            return bad(format!("budget {} must be nonnegative", self.budget()));
        }
        let paths = [
            match &self.delta0 {
                RecoverySpec::File(p) => Some(p),
                RecoverySpec::Homogeneous(_) => None,
            },
            match &self.network {
                NetworkSource::Csv(p) => Some(p),
                NetworkSource::Synthetic(_) => None,
            },
        ];
        if let Some(p) = paths.into_iter().flatten().find(|p| !p.exists()) {
            return bad(format!("{} does not exist", p.display()));
        }
        let check_nodes = |what: &str, nodes: &[usize]| {
            match nodes.iter().find(|&&v| v == 0 || v > self.n) {
                Some(v) => Err(ExperimentError::Config(format!("{what} node {v} outside 1..={}", self.n))),
                None => Ok(()),
            }
        };
        if let SensorPolicy::List(v) = &self.sensors {
            check_nodes("sensor", v)?;
        }
        if let SensorPolicy::TopK(k) = self.sensors {
            if k > self.n {
                return bad(format!("top_k {k} exceeds n = {}", self.n));
            }
        }
        if let ControlSet::List(v) = &self.control {
            check_nodes("control", v)?;
        }
        self.solver
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))
    }
}

/// Random strongly connected network: a Hamiltonian cycle through a random
/// permutation plus independent extra edges, with log-uniform weights
/// rescaled so `rho(hi_scale * B + diag(dc_upper))` falls inside the band.
pub fn generate_network(
    n: usize,
    seed: u64,
    params: &GeneratorParams,
    hi_scale: f64,
    dc_upper: &[f64],
) -> Result<ContactNetwork, ExperimentError> {
    let [band_lo, band_hi] = params.rho_band;
    let band_err = |reason: String| ExperimentError::Band {
        lo: band_lo,
        hi: band_hi,
        reason,
    };
    if n < 2 {
        return Err(ExperimentError::Config("generated networks need n >= 2".into()));
    }
    if !(0.0..=1.0).contains(&params.density) || !(params.weight_scale > 0.0 && params.weight_scale < 1.0) {
        return Err(ExperimentError::Config(format!(
            "density {} or weight_scale {} out of range",
            params.density, params.weight_scale
        )));
    }
    if dc_upper.len() != n {
        return Err(ExperimentError::Config("dc_upper length differs from n".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut on_cycle = vec![vec![false; n]; n];
    for k in 0..n {
        on_cycle[order[k]][order[(k + 1) % n]] = true;
    }
    let (wlo, whi) = ((params.weight_scale / 10.0).ln(), params.weight_scale.ln());
    let mut edges = Vec::new();
    for src in 0..n {
        for dst in 0..n {
            if src == dst {
                continue;
            }
            let keep = on_cycle[src][dst] | (rng.random::<f64>() < params.density);
            let w = rng.random_range(wlo..=whi).exp();
            if keep {
                edges.push(Edge { src, dst, rate: w });
            }
        }
    }
    let net = ContactNetwork::new(n, edges)?;

    let max_dc = dc_upper.iter().copied().fold(0.0, f64::max);
    if band_hi <= max_dc || band_lo > band_hi {
        return Err(band_err(format!("band must lie above max dc_upper = {max_dc}")));
    }
    let rho_at = |s: f64| -> Result<f64, ExperimentError> {
        let m = state_matrix(&net.scaled_rate_matrix(s * hi_scale), dc_upper)?;
        Ok(spectral_radius(&m, DEFAULT_RHO_TOL)?.rho)
    };
    let current = rho_at(1.0)?;
    if (band_lo..=band_hi).contains(&current) {
        return Ok(net);
    }
    let target = 0.5 * (band_lo.max(max_dc) + band_hi);
    // rho is increasing in the scale; bracket then bisect.
    let (mut lo, mut hi) = (0.0, 1.0);
    while rho_at(hi)? < target {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(band_err("weights cannot reach the band".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rho_at(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let scale = 0.5 * (lo + hi);
    let max_rate = net.edges().iter().map(|e| e.rate).fold(0.0, f64::max);
    if !(scale * max_rate * hi_scale < 1.0) {
        return Err(band_err(format!(
            "rescaled upper bound {} is not below 1",
            scale * max_rate * hi_scale
        )));
    }
    Ok(net.rescaled(scale)?)
}

/// Nodes ordered by weighted in+out degree, largest first; ties go to the
/// lower index.
pub fn rank_by_degree(net: &ContactNetwork) -> Vec<usize> {
    let deg = net.total_weighted_degree();
    let mut order: Vec<usize> = (0..net.n()).collect();
    order.sort_by(|&a, &b| deg[b].total_cmp(&deg[a]).then(a.cmp(&b)));
    order
}

/// Everything derived from a config before any allocation is solved.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: RunConfig,
    pub network: ContactNetwork,
    pub delta0: Vec<f64>,
    pub trajectory: Trajectory,
    pub cost: CostModel,
    pub control: Vec<usize>,
    pub ranking: Vec<usize>,
}

fn read_delta0(path: &Path, n: usize) -> Result<Vec<f64>, ExperimentError> {
    #[derive(Deserialize)]
    struct Row {
        node: usize,
        delta0: f64,
    }
    let mut out = vec![f64::NAN; n];
    let mut rdr = csv::Reader::from_path(path)?;
    for row in rdr.deserialize() {
        let row: Row = row?;
        if row.node == 0 || row.node > n {
            return Err(ExperimentError::Config(format!("delta0 node {} outside 1..={n}", row.node)));
        }
        out[row.node - 1] = row.delta0;
    }
    if let Some(i) = out.iter().position(|v| v.is_nan()) {
        return Err(ExperimentError::Config(format!("delta0 missing for node {}", i + 1)));
    }
    Ok(out)
}

impl Scenario {
    pub fn build(config: &RunConfig) -> Result<Self, ExperimentError> {
        config.validate()?;
        let n = config.n;
        let delta0 = match &config.delta0 {
            RecoverySpec::Homogeneous(d) => vec![*d; n],
            RecoverySpec::File(p) => read_delta0(p, n)?,
        };
        if let Some(d) = delta0.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
            return Err(ExperimentError::Config(format!("delta0 {d} outside (0, 1)")));
        }
        let dc_upper: Vec<f64> = delta0.iter().map(|d| 1.0 - d).collect();
        if let Some(u) = dc_upper.iter().find(|&&u| u <= config.dc_lower) {
            return Err(ExperimentError::Config(format!(
                "dc_lower {} must be below every natural rate (found {u})",
                config.dc_lower
            )));
        }
        let network = match &config.network {
            NetworkSource::Synthetic(params) => generate_network(
                n,
                params.seed.unwrap_or(config.seed),
                params,
                config.hi_scale,
                &dc_upper,
            )?,
            NetworkSource::Csv(path) => ContactNetwork::load_csv(n, path)?,
        };
        if n > 1 && !is_strongly_connected(&network) {
            return Err(ExperimentError::Config("network is not strongly connected".into()));
        }
        let p0 = InfectionState::uniform(n, config.p0)?;
        let trajectory = simulate(&network, &network.rate_matrix(), &delta0, &p0, config.t_max)?;
        let cost = CostModel::new(vec![config.dc_lower; n], dc_upper)?;
        let control = match &config.control {
            ControlSet::All => (0..n).collect(),
            ControlSet::List(v) => {
                let mut c: Vec<usize> = v.iter().map(|x| x - 1).collect();
                c.sort_unstable();
                c.dedup();
                c
            }
        };
        let ranking = rank_by_degree(&network);
        Ok(Self {
            config: config.clone(),
            network,
            delta0,
            trajectory,
            cost,
            control,
            ranking,
        })
    }

    /// Sensor set of the configured policy, 0-based and sorted.
    pub fn sensors(&self) -> Vec<usize> {
        match &self.config.sensors {
            SensorPolicy::TopK(k) => self.top_sensors(*k),
            SensorPolicy::List(v) => {
                let mut s: Vec<usize> = v.iter().map(|x| x - 1).collect();
                s.sort_unstable();
                s.dedup();
                s
            }
        }
    }

    pub fn top_sensors(&self, k: usize) -> Vec<usize> {
        let mut s = self.ranking[..k.min(self.ranking.len())].to_vec();
        s.sort_unstable();
        s
    }

    pub fn observations(&self, sensors: &[usize], horizon: usize) -> Result<Option<ObservationSet>, ExperimentError> {
        if sensors.is_empty() {
            return Ok(None);
        }
        Ok(Some(observe(&self.trajectory, sensors)?.prefix(horizon)?))
    }

    /// Uncertainty model from the first `horizon` observations of `sensors`.
    pub fn model(&self, sensors: &[usize], horizon: usize) -> Result<UncertaintyModel, ExperimentError> {
        let prior = build_prior(&self.network, self.config.lo_scale, self.config.hi_scale)?;
        let data = match self.observations(sensors, horizon)? {
            Some(obs) => build_data_constraints(&obs, self.config.n)?,
            None => vec![],
        };
        Ok(assemble(&prior, &data)?)
    }

    pub fn robust(&self, model: &UncertaintyModel) -> Result<AllocationResult, ExperimentError> {
        Ok(robust_allocate(
            model,
            &self.cost,
            self.config.budget(),
            &self.control,
            &self.config.solver,
        )?)
    }

    pub fn optimal(&self) -> Result<AllocationResult, ExperimentError> {
        Ok(optimal_allocate(
            &self.network.rate_matrix(),
            &self.cost,
            self.config.budget(),
            &self.control,
            &self.config.solver,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: f64,
    pub lambda_star: f64,
    pub rho_eval_rob: f64,
    pub rho_eval_opt: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub const HEADER: &'static str = "param,lambda_star,rho_eval_rob,rho_eval_opt,seconds";

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ExperimentError> {
        let mut w = std::io::BufWriter::new(writer);
        writeln!(w, "{}", Self::HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.param, r.lambda_star, r.rho_eval_rob, r.rho_eval_opt, r.seconds
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ExperimentError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Smallest parameter whose certified rate is below 1.
    pub fn first_below_one(&self) -> Option<f64> {
        self.rows.iter().find(|r| r.lambda_star < 1.0).map(|r| r.param)
    }

    /// Errors if the certified column increases by more than `MONOTONE_TOL`.
    pub fn check_nonincreasing(&self) -> Result<(), ExperimentError> {
        for w in self.rows.windows(2) {
            if w[1].lambda_star > w[0].lambda_star + MONOTONE_TOL {
                return Err(ExperimentError::NotMonotone {
                    param: w[1].param,
                    prev: w[0].lambda_star,
                    next: w[1].lambda_star,
                });
            }
        }
        Ok(())
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, ExperimentError> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?)
}

/// Solves one robust allocation per sweep point on a pool of `jobs` workers;
/// rows come back in the order of `points`.
fn sweep<F>(scenario: &Scenario, points: &[(f64, Vec<usize>, usize)], jobs: usize, each: F) -> Result<SweepResult, ExperimentError>
where
    F: Fn(&SweepRow) + Sync,
{
    let opt = scenario.optimal()?;
    let b_true = scenario.network.rate_matrix();
    let rho_opt = evaluate_allocation(&b_true, &opt.dc)?;
    let timing = scenario.config.record_timing;
    let rows = pool(jobs)?.install(|| {
        points
            .par_iter()
            .map(|(param, sensors, horizon)| {
                let start = Instant::now();
                let model = scenario.model(sensors, *horizon)?;
                let rob = scenario.robust(&model)?;
                let rho_rob = evaluate_allocation(&b_true, &rob.dc)?;
                let row = SweepRow {
                    param: *param,
                    lambda_star: rob.lambda_star,
                    rho_eval_rob: rho_rob,
                    rho_eval_opt: rho_opt,
                    seconds: if timing { start.elapsed().as_secs_f64() } else { 0.0 },
                };
                each(&row);
                Ok(row)
            })
            .collect::<Result<Vec<_>, ExperimentError>>()
    })?;
    Ok(SweepResult { rows })
}

/// Certified rate against the observation horizon `T = 1..=t_max` with the
/// configured sensors.
pub fn sweep_t(scenario: &Scenario, jobs: usize) -> Result<SweepResult, ExperimentError> {
    let sensors = scenario.sensors();
    let points: Vec<_> = (1..=scenario.config.t_max)
        .map(|t| (t as f64, sensors.clone(), t))
        .collect();
    let result = sweep(scenario, &points, jobs, |r| {
        log::info!("T = {}: lambda* = {:.6}", r.param, r.lambda_star)
    })?;
    if let Err(e) = result.check_nonincreasing() {
        log::warn!("{e}");
    }
    Ok(result)
}

/// Certified rate against the number of top-ranked sensors at horizon
/// `t_max`.
pub fn sweep_sensors(scenario: &Scenario, jobs: usize) -> Result<SweepResult, ExperimentError> {
    let n = scenario.config.n;
    let mut counts: Vec<usize> = (0..=n).step_by(scenario.config.sensor_step).collect();
    if counts.last() != Some(&n) {
        counts.push(n);
    }
    let points: Vec<_> = counts
        .iter()
        .map(|&k| (k as f64, scenario.top_sensors(k), scenario.config.t_max))
        .collect();
    let result = sweep(scenario, &points, jobs, |r| {
        log::info!("|V_S| = {}: lambda* = {:.6}", r.param, r.lambda_star)
    })?;
    if let Err(e) = result.check_nonincreasing() {
        log::warn!("{e}");
    }
    match result.first_below_one() {
        Some(k) => log::info!("certified rate drops below 1 with {k} sensors"),
        None => log::info!("certified rate stays at or above 1 for every sensor count"),
    }
    Ok(result)
}

/// Robust allocations per horizon evaluated on the true network next to the
/// known-network optimum. Errors if a robust allocation beats the optimum by
/// more than `GAP_TOL`.
pub fn compare_allocations(scenario: &Scenario, jobs: usize) -> Result<SweepResult, ExperimentError> {
    let result = sweep_t(scenario, jobs)?;
    for r in &result.rows {
        let gap = r.rho_eval_rob - r.rho_eval_opt;
        if gap < -GAP_TOL {
            return Err(ExperimentError::NegativeGap { param: r.param, gap });
        }
    }
    if let Some(last) = result.rows.last() {
        log::info!(
            "gap at T = {}: {:.6}",
            last.param,
            last.rho_eval_rob - last.rho_eval_opt
        );
    }
    Ok(result)
}
