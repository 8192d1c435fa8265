//! Spatial SIRS agent-based simulator on a periodic L x L lattice.
//!
//! The model is written in structural form: an initial draw `u_{0,n}` per
//! agent decides infection at t = 0, and one draw `u_{t,n}` per agent per
//! step decides its transition. Draws are consumed in row-major cell order,
//! which pins down the exogenous layout so runs are reproducible.

mod oracle;

pub use oracle::{exact_pushforward, total_variation, Pushforward, MAX_LIVE_PATHS};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Lattice geometry and simulation horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeConfig {
    side: usize,
    horizon: usize,
}

impl LatticeConfig {
    pub fn new(side: usize, horizon: usize) -> Result<Self> {
        if side < 2 {
            return Err(Error::InvalidConfig(format!("lattice side {side} < 2")));
        }
        if horizon < 1 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        Ok(Self { side, horizon })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn population(&self) -> usize {
        self.side * self.side
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self { side: 10, horizon: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum AgentStatus {
    Susceptible = 0,
    Infected = 1,
    Recovered = 2,
}

impl AgentStatus {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Susceptible),
            1 => Some(Self::Infected),
            2 => Some(Self::Recovered),
            _ => None,
        }
    }
}

/// Transition probabilities `(alpha, beta, gamma)` for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl ParamVector {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let v = Self { alpha, beta, gamma };
        if !v.is_probability() {
            return Err(Error::InvalidConfig(format!(
                "parameter vector ({alpha}, {beta}, {gamma}) outside [0,1]^3"
            )));
        }
        Ok(v)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            alpha: a[0],
            beta: a[1],
            gamma: a[2],
        }
    }

    pub fn is_probability(&self) -> bool {
        self.as_array().iter().all(|p| (0.0..=1.0).contains(p))
    }

    /// Lockdown mask `v ⊙ (0, 1, 1)`.
    pub fn locked_down(&self) -> Self {
        Self { alpha: 0.0, ..*self }
    }
}

/// Initial infection probability plus per-step parameters `theta_1..theta_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbmSchedule {
    pub i0: f64,
    pub thetas: Vec<ParamVector>,
}

impl AbmSchedule {
    pub fn constant(i0: f64, theta: ParamVector, horizon: usize) -> Self {
        Self {
            i0,
            thetas: vec![theta; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.thetas.len()
    }
}

/// Agent statuses in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MicroState(Vec<AgentStatus>);

impl MicroState {
    pub fn new(cells: Vec<AgentStatus>) -> Self {
        Self(cells)
    }

    pub fn filled(status: AgentStatus, n: usize) -> Self {
        Self(vec![status; n])
    }

    pub fn cells(&self) -> &[AgentStatus] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The aggregation map: counts of (S, I, R).
    pub fn counts(&self) -> [u32; 3] {
        let mut c = [0u32; 3];
        for s in &self.0 {
            c[s.code() as usize] += 1;
        }
        c
    }

    pub fn to_digits(&self) -> String {
        self.0.iter().map(|s| char::from(b'0' + s.code())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroTrajectory {
    pub schedule: AbmSchedule,
    pub states: Vec<MicroState>,
}

impl MicroTrajectory {
    pub fn aggregate(&self) -> AggregateTrajectory {
        AggregateTrajectory {
            counts: self.states.iter().map(MicroState::counts).collect(),
        }
    }
}

/// Per-step `(S, I, R)` counts, `T + 1` rows summing to the population.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AggregateTrajectory {
    pub counts: Vec<[u32; 3]>,
}

impl AggregateTrajectory {
    pub fn new(counts: Vec<[u32; 3]>) -> Result<Self> {
        let traj = Self { counts };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.counts.first() else {
            return Err(Error::Dataset("empty trajectory".into()));
        };
        let total: u32 = first.iter().sum();
        for (t, c) in self.counts.iter().enumerate() {
            if c.iter().sum::<u32>() != total {
                return Err(Error::Dataset(format!(
                    "counts at t={t} sum to {} instead of {total}",
                    c.iter().sum::<u32>()
                )));
            }
        }
        Ok(())
    }

    pub fn population(&self) -> u32 {
        self.counts.first().map(|c| c.iter().sum()).unwrap_or(0)
    }

    /// Number of steps `T` (the trajectory has `T + 1` rows).
    pub fn horizon(&self) -> usize {
        self.counts.len().saturating_sub(1)
    }

    pub fn infected(&self) -> impl Iterator<Item = u32> + '_ {
        self.counts.iter().map(|c| c[1])
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "S", "I", "R"])?;
        for (t, c) in self.counts.iter().enumerate() {
            out.write_record([
                t.to_string(),
                c[0].to_string(),
                c[1].to_string(),
                c[2].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Writes one length-N digit string per step.
pub fn write_micro_states<W: Write>(mut w: W, traj: &MicroTrajectory) -> Result<()> {
    for s in &traj.states {
        writeln!(w, "{}", s.to_digits())?;
    }
    Ok(())
}

/// Distinct von Neumann neighbours of cell `n` with periodic boundaries.
///
/// On a 2x2 lattice the left/right (and up/down) neighbours coincide, so
/// the set has two members instead of four.
pub fn von_neumann_neighbors(n: usize, side: usize) -> Result<Vec<usize>> {
    if n >= side * side {
        return Err(Error::CellOutOfRange { index: n, side });
    }
    let (row, col) = (n / side, n % side);
    let up = ((row + side - 1) % side) * side + col;
    let down = ((row + 1) % side) * side + col;
    let left = row * side + (col + side - 1) % side;
    let right = row * side + (col + 1) % side;
    let mut out = vec![up, down, left, right];
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// `1 - (1 - alpha)^k`.
pub fn infection_probability(alpha: f64, k: u32) -> f64 {
    if k == 0 {
        return 0.0;
    }
    1.0 - (1.0 - alpha).powi(k as i32)
}

/// Precomputed neighbour lists for one lattice size.
#[derive(Debug, Clone)]
pub struct Lattice {
    side: usize,
    neighbors: Vec<Vec<usize>>,
}

impl Lattice {
    pub fn new(side: usize) -> Self {
        let neighbors = (0..side * side)
            .map(|n| von_neumann_neighbors(n, side).expect("index in range"))
            .collect();
        Self { side, neighbors }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn population(&self) -> usize {
        self.side * self.side
    }

    pub fn neighbors(&self, n: usize) -> &[usize] {
        &self.neighbors[n]
    }

    pub fn infected_neighbors(&self, cells: &[AgentStatus], n: usize) -> u32 {
        self.neighbors[n]
            .iter()
            .filter(|&&m| cells[m] == AgentStatus::Infected)
            .count() as u32
    }

    pub fn init_state(&self, i0: f64, rng: &mut RngStream) -> MicroState {
        let cells = (0..self.population())
            .map(|_| {
                if rng.uniform() < i0 {
                    AgentStatus::Infected
                } else {
                    AgentStatus::Susceptible
                }
            })
            .collect();
        MicroState(cells)
    }

    /// One synchronous update; every agent reads the time-t state.
    pub fn step(&self, x: &MicroState, theta: &ParamVector, rng: &mut RngStream) -> MicroState {
        let cells = &x.0;
        let next = (0..cells.len())
            .map(|n| {
                let u = rng.uniform();
                match cells[n] {
                    AgentStatus::Susceptible => {
                        let p = infection_probability(theta.alpha, self.infected_neighbors(cells, n));
                        if u < p {
                            AgentStatus::Infected
                        } else {
                            AgentStatus::Susceptible
                        }
                    }
                    AgentStatus::Infected => {
                        if u < theta.beta {
                            AgentStatus::Recovered
                        } else {
                            AgentStatus::Infected
                        }
                    }
                    AgentStatus::Recovered => {
                        if u < theta.gamma {
                            AgentStatus::Susceptible
                        } else {
                            AgentStatus::Recovered
                        }
                    }
                }
            })
            .collect();
        MicroState(next)
    }

    pub fn simulate(
        &self,
        schedule: &AbmSchedule,
        rng: &mut RngStream,
    ) -> MicroTrajectory {
        let mut states = Vec::with_capacity(schedule.thetas.len() + 1);
        let mut x = self.init_state(schedule.i0, rng);
        for theta in &schedule.thetas {
            let next = self.step(&x, theta, rng);
            states.push(std::mem::replace(&mut x, next));
        }
        states.push(x);
        MicroTrajectory {
            schedule: schedule.clone(),
            states,
        }
    }
}

pub fn init_state(config: &LatticeConfig, i0: f64, rng: &mut RngStream) -> MicroState {
    Lattice::new(config.side()).init_state(i0, rng)
}

pub fn step(
    config: &LatticeConfig,
    x: &MicroState,
    theta: &ParamVector,
    rng: &mut RngStream,
) -> MicroState {
    Lattice::new(config.side()).step(x, theta, rng)
}

/// Runs `x_0..x_T` under `schedule`.
pub fn simulate(
    config: &LatticeConfig,
    schedule: &AbmSchedule,
    rng: &mut RngStream,
) -> Result<MicroTrajectory> {
    if schedule.horizon() != config.horizon() {
        return Err(Error::ScheduleLength {
            expected: config.horizon(),
            got: schedule.horizon(),
        });
    }
    Ok(Lattice::new(config.side()).simulate(schedule, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn neighbors_center_of_3x3() {
        assert_eq!(set(&von_neumann_neighbors(4, 3).unwrap()), set(&[1, 3, 5, 7]));
    }

    #[test]
    fn neighbors_wrap_around() {
        assert_eq!(set(&von_neumann_neighbors(0, 3).unwrap()), set(&[1, 2, 3, 6]));
    }

    #[test]
    fn neighbors_collapse_on_2x2() {
        assert_eq!(set(&von_neumann_neighbors(0, 2).unwrap()), set(&[1, 2]));
        for n in 0..4 {
            assert_eq!(von_neumann_neighbors(n, 2).unwrap().len(), 2);
        }
    }

    #[test]
    fn neighbors_reject_out_of_range() {
        assert!(matches!(
            von_neumann_neighbors(9, 3),
            Err(Error::CellOutOfRange { index: 9, side: 3 })
        ));
    }

    #[test]
    fn neighbors_are_symmetric() {
        for side in 2..7 {
            for n in 0..side * side {
                let nb = von_neumann_neighbors(n, side).unwrap();
                assert!(!nb.contains(&n));
                if side >= 3 {
                    assert_eq!(nb.len(), 4);
                }
                for m in nb {
                    assert!(von_neumann_neighbors(m, side).unwrap().contains(&n));
                }
            }
        }
    }

    #[test]
    fn infection_probability_examples() {
        assert_eq!(infection_probability(0.3, 0), 0.0);
        assert_eq!(infection_probability(1.0, 2), 1.0);
        assert!((infection_probability(0.5, 2) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn infection_probability_monotone() {
        let mut prev_a = 0.0;
        for i in 0..=20 {
            let a = i as f64 / 20.0;
            let p = infection_probability(a, 3);
            assert!(p >= prev_a);
            prev_a = p;
            let mut prev_k = 0.0;
            for k in 0..6 {
                let q = infection_probability(a, k);
                assert!(q >= prev_k && (0.0..=1.0).contains(&q));
                prev_k = q;
            }
        }
    }

    #[test]
    fn init_extremes() {
        let cfg = LatticeConfig::new(4, 1).unwrap();
        let mut rng = RngStream::new(3);
        assert_eq!(init_state(&cfg, 0.0, &mut rng).counts(), [16, 0, 0]);
        assert_eq!(init_state(&cfg, 1.0, &mut rng).counts(), [0, 16, 0]);
    }

    #[test]
    fn init_mean_matches_binomial() {
        let lattice = Lattice::new(2);
        let mut rng = RngStream::new(11);
        let reps = 100_000;
        let total: u64 = (0..reps)
            .map(|_| lattice.init_state(0.5, &mut rng).counts()[1] as u64)
            .sum();
        let mean = total as f64 / reps as f64;
        assert!((mean - 2.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn zero_params_freeze_state() {
        let lattice = Lattice::new(3);
        let mut rng = RngStream::new(5);
        let x = lattice.init_state(0.4, &mut rng);
        let y = lattice.step(&x, &ParamVector::new(0.0, 0.0, 0.0).unwrap(), &mut rng);
        assert_eq!(x, y);
    }

    #[test]
    fn certain_recovery() {
        let lattice = Lattice::new(3);
        let mut rng = RngStream::new(5);
        let x = MicroState::filled(AgentStatus::Infected, 9);
        let y = lattice.step(&x, &ParamVector::new(0.7, 1.0, 0.0).unwrap(), &mut rng);
        assert_eq!(y, MicroState::filled(AgentStatus::Recovered, 9));
    }

    #[test]
    fn one_step_infected_count_matches_enumeration() {
        // x = (I, S, S, S) on 2x2; cells 1 and 2 neighbour cell 0, cell 3 does not.
        // Next infected count = 1 + Bin(2, 0.5): pmf over {1,2,3} = {.25,.5,.25}.
        let lattice = Lattice::new(2);
        let theta = ParamVector::new(0.5, 0.0, 0.0).unwrap();
        let x = MicroState::new(vec![
            AgentStatus::Infected,
            AgentStatus::Susceptible,
            AgentStatus::Susceptible,
            AgentStatus::Susceptible,
        ]);
        let exact = [0.0, 0.25, 0.5, 0.25, 0.0];
        let mut rng = RngStream::new(99);
        let reps = 100_000;
        let mut hist = [0usize; 5];
        for _ in 0..reps {
            hist[lattice.step(&x, &theta, &mut rng).counts()[1] as usize] += 1;
        }
        let tv: f64 = hist
            .iter()
            .zip(exact)
            .map(|(&h, p)| (h as f64 / reps as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "tv {tv}");
    }

    #[test]
    fn simulate_without_seed_infection_stays_susceptible() {
        let cfg = LatticeConfig::new(5, 8).unwrap();
        let sched = AbmSchedule::constant(0.0, ParamVector::new(0.9, 0.3, 0.2).unwrap(), 8);
        let traj = simulate(&cfg, &sched, &mut RngStream::new(1)).unwrap();
        assert_eq!(traj.states.len(), 9);
        assert!(traj.aggregate().counts.iter().all(|c| *c == [25, 0, 0]));
    }

    #[test]
    fn simulate_is_deterministic() {
        let cfg = LatticeConfig::new(6, 10).unwrap();
        let sched = AbmSchedule::constant(0.2, ParamVector::new(0.4, 0.2, 0.1).unwrap(), 10);
        let a = simulate(&cfg, &sched, &mut RngStream::new(17)).unwrap();
        let b = simulate(&cfg, &sched, &mut RngStream::new(17)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn simulate_rejects_length_mismatch() {
        let cfg = LatticeConfig::new(3, 4).unwrap();
        let sched = AbmSchedule::constant(0.2, ParamVector::new(0.4, 0.2, 0.1).unwrap(), 3);
        assert!(matches!(
            simulate(&cfg, &sched, &mut RngStream::new(1)),
            Err(Error::ScheduleLength { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let traj = AggregateTrajectory::new(vec![[3, 1, 0], [2, 1, 1]]).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,S,I,R\n0,3,1,0\n1,2,1,1\n");
    }

    #[test]
    fn config_validation() {
        assert!(LatticeConfig::new(1, 5).is_err());
        assert!(LatticeConfig::new(3, 0).is_err());
        assert_eq!(LatticeConfig::new(10, 20).unwrap().population(), 100);
    }
}
