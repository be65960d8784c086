//! Discrete-time SIS mean-field dynamics and sensor observations.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{ContactNetwork, NonnegativeMatrix};

#[derive(Debug, Error)]
pub enum EpidemicError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("infection probability p[{index}] = {value} outside [0, 1]")]
    StateOutOfRange { index: usize, value: f64 },
    #[error("transmission rate B[{row}][{col}] = {value} outside [0, 1)")]
    RateOutOfRange { row: usize, col: usize, value: f64 },
    #[error("recovery rate delta[{index}] = {value} outside (0, 1)")]
    RecoveryOutOfRange { index: usize, value: f64 },
    #[error("complementary rate dc[{index}] = {value} outside (0, 1]")]
    ComplementaryOutOfRange { index: usize, value: f64 },
    #[error("rate matrix has support outside the network at ({row}, {col})")]
    SparsityViolation { row: usize, col: usize },
    #[error("sensor set is empty")]
    NoSensors,
    #[error("sensor index {index} out of range for {n} nodes")]
    SensorOutOfRange { index: usize, n: usize },
    #[error("observation grid incomplete: missing t = {t}, node = {node}")]
    MissingObservation { t: usize, node: usize },
    #[error("horizon {requested} exceeds available horizon {available}")]
    HorizonTooLong { requested: usize, available: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Fractions of each district that are infected at one time slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfectionState(Vec<f64>);

impl InfectionState {
    pub fn new(p: Vec<f64>) -> Result<Self, EpidemicError> {
        check_unit_interval(&p)?;
        Ok(Self(p))
    }

    pub fn uniform(n: usize, value: f64) -> Result<Self, EpidemicError> {
        Self::new(vec![value; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_unit_interval(p: &[f64]) -> Result<(), EpidemicError> {
    match p.iter().position(|x| !(0.0..=1.0).contains(x)) {
        Some(index) => Err(EpidemicError::StateOutOfRange {
            index,
            value: p[index],
        }),
        None => Ok(()),
    }
}

fn check_rates(b: &NonnegativeMatrix) -> Result<(), EpidemicError> {
    let n = b.n();
    for row in 0..n {
        for col in 0..n {
            let value = b.get(row, col);
            if value >= 1.0 || (row == col && value != 0.0) {
                return Err(EpidemicError::RateOutOfRange { row, col, value });
            }
        }
    }
    Ok(())
}

fn check_dim(expected: usize, got: usize) -> Result<(), EpidemicError> {
    if expected != got {
        return Err(EpidemicError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// One step of the nonlinear recursion
/// `p_i' = (1 - p_i) (1 - prod_j (1 - B_ij p_j)) + (1 - delta_i) p_i`.
pub fn sis_step(
    p: &InfectionState,
    b: &NonnegativeMatrix,
    delta: &[f64],
) -> Result<InfectionState, EpidemicError> {
    let n = p.len();
    check_dim(n, b.n())?;
    check_dim(n, delta.len())?;
    check_rates(b)?;
    if let Some(index) = delta.iter().position(|d| !(*d > 0.0 && *d < 1.0)) {
        return Err(EpidemicError::RecoveryOutOfRange {
            index,
            value: delta[index],
        });
    }
    let p = p.as_slice();
    let next = (0..n)
        .map(|i| {
            let escape: f64 = (0..n)
                .filter(|&j| b.get(i, j) > 0.0)
                .map(|j| 1.0 - b.get(i, j) * p[j])
                .product();
            let v = (1.0 - p[i]) * (1.0 - escape) + (1.0 - delta[i]) * p[i];
            v.clamp(0.0, 1.0)
        })
        .collect();
    Ok(InfectionState(next))
}

/// One step of the linear upper bound `p' = (B + diag(dc)) p`, unclipped.
pub fn linear_step(p: &[f64], b: &NonnegativeMatrix, dc: &[f64]) -> Result<Vec<f64>, EpidemicError> {
    let n = p.len();
    check_dim(n, b.n())?;
    check_dim(n, dc.len())?;
    if let Some(index) = dc.iter().position(|d| !(*d > 0.0 && *d <= 1.0)) {
        return Err(EpidemicError::ComplementaryOutOfRange {
            index,
            value: dc[index],
        });
    }
    let mut out = b.mul_vec(p);
    for i in 0..n {
        out[i] += dc[i] * p[i];
    }
    Ok(out)
}

/// Full trajectory of the uncontrolled dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<InfectionState>,
    pub delta0: Vec<f64>,
    pub rates_used: NonnegativeMatrix,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }
}

/// Rolls out `horizon` steps of [`sis_step`] with the natural recovery rates.
pub fn simulate(
    net: &ContactNetwork,
    b: &NonnegativeMatrix,
    delta0: &[f64],
    p0: &InfectionState,
    horizon: usize,
) -> Result<Trajectory, EpidemicError> {
    let n = net.n();
    check_dim(n, b.n())?;
    check_dim(n, p0.len())?;
    for row in 0..n {
        for col in 0..n {
            if row != col && b.get(row, col) > 0.0 && !net.has_edge(col, row) {
                return Err(EpidemicError::SparsityViolation { row, col });
            }
        }
    }
    let mut states = Vec::with_capacity(horizon + 1);
    states.push(p0.clone());
    for _ in 0..horizon {
        let next = sis_step(states.last().expect("nonempty"), b, delta0)?;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        delta0: delta0.to_vec(),
        rates_used: b.clone(),
    })
}

/// The dataset available to the planner: sensor readings over `t = 0..=horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    /// Sorted, distinct node indices.
    pub sensors: Vec<usize>,
    pub horizon: usize,
    /// `values[t][k]` is the reading of `sensors[k]` at time `t`.
    pub values: Vec<Vec<f64>>,
    /// Natural recovery rate of each sensor, aligned with `sensors`.
    pub delta0: Vec<f64>,
}

/// Optional multiplicative measurement noise, `p * (1 + sigma * z)` with
/// `z ~ U[-1, 1]`, clipped into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiplicativeNoise {
    pub sigma: f64,
    pub seed: u64,
}

fn normalize_sensors(sensors: &[usize], n: usize) -> Result<Vec<usize>, EpidemicError> {
    if sensors.is_empty() {
        return Err(EpidemicError::NoSensors);
    }
    let mut s = sensors.to_vec();
    s.sort_unstable();
    s.dedup();
    if let Some(&index) = s.iter().find(|&&i| i >= n) {
        return Err(EpidemicError::SensorOutOfRange { index, n });
    }
    Ok(s)
}

pub fn observe(traj: &Trajectory, sensors: &[usize]) -> Result<ObservationSet, EpidemicError> {
    observe_with_noise(traj, sensors, None)
}

pub fn observe_with_noise(
    traj: &Trajectory,
    sensors: &[usize],
    noise: Option<MultiplicativeNoise>,
) -> Result<ObservationSet, EpidemicError> {
    let n = traj.delta0.len();
    let sensors = normalize_sensors(sensors, n)?;
    let mut rng = noise.map(|nz| (nz.sigma, ChaCha8Rng::seed_from_u64(nz.seed)));
    let values = traj
        .states
        .iter()
        .map(|state| {
            sensors
                .iter()
                .map(|&i| {
                    let p = state.as_slice()[i];
                    match rng.as_mut() {
                        Some((sigma, rng)) => {
                            let z: f64 = rng.random_range(-1.0..=1.0);
                            (p * (1.0 + *sigma * z)).clamp(0.0, 1.0)
                        }
                        None => p,
                    }
                })
                .collect()
        })
        .collect();
    let delta0 = sensors.iter().map(|&i| traj.delta0[i]).collect();
    Ok(ObservationSet {
        sensors,
        horizon: traj.horizon(),
        values,
        delta0,
    })
}

impl ObservationSet {
    /// The same dataset truncated to `t = 0..=horizon`.
    pub fn prefix(&self, horizon: usize) -> Result<Self, EpidemicError> {
        if horizon > self.horizon {
            return Err(EpidemicError::HorizonTooLong {
                requested: horizon,
                available: self.horizon,
            });
        }
        Ok(Self {
            horizon,
            values: self.values[..=horizon].to_vec(),
            ..self.clone()
        })
    }

    /// Restriction to a subset of the current sensors.
    pub fn restrict(&self, sensors: &[usize]) -> Result<Self, EpidemicError> {
        let n = self.sensors.last().map_or(0, |&s| s + 1);
        let wanted = normalize_sensors(sensors, n.max(1))?;
        let pos: Vec<usize> = wanted
            .iter()
            .map(|s| {
                self.sensors
                    .binary_search(s)
                    .map_err(|_| EpidemicError::SensorOutOfRange { index: *s, n })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            sensors: wanted,
            horizon: self.horizon,
            values: self
                .values
                .iter()
                .map(|row| pos.iter().map(|&k| row[k]).collect())
                .collect(),
            delta0: pos.iter().map(|&k| self.delta0[k]).collect(),
        })
    }

    /// Series of one sensor, `None` if `node` is not a sensor.
    pub fn series(&self, node: usize) -> Option<Vec<f64>> {
        let k = self.sensors.binary_search(&node).ok()?;
        Some(self.values.iter().map(|row| row[k]).collect())
    }

    /// Writes `t,node,p` rows with 1-based node indices.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EpidemicError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["t", "node", "p"])?;
        for (t, row) in self.values.iter().enumerate() {
            for (k, &p) in row.iter().enumerate() {
                wtr.write_record([t.to_string(), (self.sensors[k] + 1).to_string(), p.to_string()])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads `t,node,p` rows; `delta0` holds the natural recovery rate of every
    /// node of the network.
    pub fn read_csv<R: Read>(reader: R, delta0: &[f64]) -> Result<Self, EpidemicError> {
        #[derive(Deserialize)]
        struct Row {
            t: usize,
            node: usize,
            p: f64,
        }
        let n = delta0.len();
        let mut rows = Vec::new();
        let mut rdr = csv::Reader::from_reader(reader);
        for row in rdr.deserialize() {
            let row: Row = row?;
            if row.node == 0 || row.node > n {
                return Err(EpidemicError::SensorOutOfRange { index: row.node, n });
            }
            rows.push(row);
        }
        let sensor_list: Vec<usize> = rows.iter().map(|r| r.node - 1).collect();
        let sensors = normalize_sensors(&sensor_list, n)?;
        let horizon = rows.iter().map(|r| r.t).max().unwrap_or(0);
        let mut values = vec![vec![f64::NAN; sensors.len()]; horizon + 1];
        for r in &rows {
            let k = sensors.binary_search(&(r.node - 1)).expect("sensor collected");
            values[r.t][k] = r.p;
        }
        for (t, row) in values.iter().enumerate() {
            if let Some(k) = row.iter().position(|v| v.is_nan()) {
                return Err(EpidemicError::MissingObservation {
                    t,
                    node: sensors[k] + 1,
                });
            }
            check_unit_interval(row)?;
        }
        Ok(Self {
            delta0: sensors.iter().map(|&i| delta0[i]).collect(),
            sensors,
            horizon,
            values,
        })
    }
}
