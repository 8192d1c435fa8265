//! Exact distribution of aggregate trajectories on tiny lattices.
//!
//! The chain is propagated forward over (micro state, count history) pairs.
//! Each agent has at most two successor statuses per step, and successors
//! with zero probability are dropped agent-wise before the product is
//! formed, so the live set stays small for L <= 3.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::BuildHasherDefault;

/// Hash map with a fixed hasher key, so iteration and summation order are
/// the same on every run.
type StableMap<K, V> = HashMap<K, V, BuildHasherDefault<DefaultHasher>>;

use super::{infection_probability, AbmSchedule, AggregateTrajectory, Lattice, LatticeConfig, ParamVector};
use crate::error::{Error, Result};

/// Upper bound on live (micro state, history) pairs.
pub const MAX_LIVE_PATHS: usize = 20_000_000;

/// Exact pmf over aggregate trajectories, sorted by trajectory.
#[derive(Debug, Clone)]
pub struct Pushforward {
    population: u32,
    entries: Vec<(AggregateTrajectory, f64)>,
}

impl Pushforward {
    pub fn entries(&self) -> &[(AggregateTrajectory, f64)] {
        &self.entries
    }

    pub fn population(&self) -> u32 {
        self.population
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum()
    }

    pub fn prob(&self, y: &AggregateTrajectory) -> f64 {
        self.entries
            .binary_search_by(|(k, _)| k.cmp(y))
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    /// Shannon entropy in nats, with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .entries
            .iter()
            .filter(|(_, p)| *p > 0.0)
            .map(|(_, p)| p * p.ln())
            .sum::<f64>()
    }

    pub fn support_size(&self) -> usize {
        self.entries.len()
    }
}

/// Total variation between the exact pmf and an empirical sample.
pub fn total_variation(exact: &Pushforward, samples: &[AggregateTrajectory]) -> f64 {
    let n = samples.len() as f64;
    let mut counts: StableMap<&AggregateTrajectory, usize> = StableMap::default();
    for s in samples {
        *counts.entry(s).or_default() += 1;
    }
    let mut tv = 0.0;
    for (y, p) in exact.entries() {
        let q = counts.remove(y).unwrap_or(0) as f64 / n;
        tv += (p - q).abs();
    }
    // samples outside the exact support
    tv += counts.values().map(|&c| c as f64 / n).sum::<f64>();
    tv / 2.0
}

type Packed = u32;

fn status_at(code: Packed, n: usize) -> u8 {
    ((code >> (2 * n)) & 0b11) as u8
}

fn counts_of(code: Packed, population: usize) -> [u32; 3] {
    let mut c = [0u32; 3];
    for n in 0..population {
        c[status_at(code, n) as usize] += 1;
    }
    c
}

/// Packs (S, I) of one step into a byte; R is implied by the population.
fn count_key(c: [u32; 3], population: usize) -> u64 {
    (c[0] as u64) * (population as u64 + 1) + c[1] as u64
}

fn successors(lattice: &Lattice, code: Packed, theta: &ParamVector) -> Vec<(Packed, f64)> {
    let population = lattice.population();
    let mut out: Vec<(Packed, f64)> = vec![(0, 1.0)];
    for n in 0..population {
        let status = status_at(code, n);
        let options: [(u8, f64); 2] = match status {
            0 => {
                let k = lattice
                    .neighbors(n)
                    .iter()
                    .filter(|&&m| status_at(code, m) == 1)
                    .count() as u32;
                let p = infection_probability(theta.alpha, k);
                [(1, p), (0, 1.0 - p)]
            }
            1 => [(2, theta.beta), (1, 1.0 - theta.beta)],
            _ => [(0, theta.gamma), (2, 1.0 - theta.gamma)],
        };
        let mut next = Vec::with_capacity(out.len() * 2);
        for &(partial, p) in &out {
            for &(s, q) in &options {
                if q > 0.0 {
                    next.push((partial | ((s as Packed) << (2 * n)), p * q));
                }
            }
        }
        out = next;
    }
    out
}

/// Exact `tau`-pushforward of the ABM under `schedule` for L in {2, 3}, T <= 4.
pub fn exact_pushforward(config: &LatticeConfig, schedule: &AbmSchedule) -> Result<Pushforward> {
    if !(2..=3).contains(&config.side()) {
        return Err(Error::InvalidConfig(format!(
            "exact enumeration supports L in {{2,3}}, got {}",
            config.side()
        )));
    }
    if config.horizon() > 4 {
        return Err(Error::InvalidConfig(format!(
            "exact enumeration supports T <= 4, got {}",
            config.horizon()
        )));
    }
    if schedule.horizon() != config.horizon() {
        return Err(Error::ScheduleLength {
            expected: config.horizon(),
            got: schedule.horizon(),
        });
    }
    let lattice = Lattice::new(config.side());
    let population = lattice.population();
    let radix = ((population + 1) * (population + 1)) as u64;

    // x_0: independent Bernoulli(i0) infections.
    let i0 = schedule.i0;
    let mut init: Vec<(Packed, f64)> = vec![(0, 1.0)];
    for n in 0..population {
        let mut next = Vec::with_capacity(init.len() * 2);
        for &(partial, p) in &init {
            if i0 > 0.0 {
                next.push((partial | (1 << (2 * n)), p * i0));
            }
            if i0 < 1.0 {
                next.push((partial, p * (1.0 - i0)));
            }
        }
        init = next;
    }
    let mut live: StableMap<(Packed, u64), f64> = StableMap::default();
    for (code, p) in init {
        let key = count_key(counts_of(code, population), population);
        *live.entry((code, key)).or_default() += p;
    }

    for theta in &schedule.thetas {
        let mut cache: StableMap<Packed, Vec<(Packed, f64)>> = StableMap::default();
        let mut next: StableMap<(Packed, u64), f64> = StableMap::with_capacity_and_hasher(live.len() * 2, Default::default());
        for (&(code, hist), &p) in &live {
            let succ = cache
                .entry(code)
                .or_insert_with(|| successors(&lattice, code, theta));
            for &(to, q) in succ.iter() {
                let key = hist * radix + count_key(counts_of(to, population), population);
                *next.entry((to, key)).or_default() += p * q;
            }
            if next.len() > MAX_LIVE_PATHS {
                return Err(Error::SizeGuard(next.len()));
            }
        }
        live = next;
    }

    let steps = schedule.horizon() + 1;
    let mut by_history: StableMap<u64, f64> = StableMap::default();
    for ((_, hist), p) in live {
        *by_history.entry(hist).or_default() += p;
    }
    let side = population as u64 + 1;
    let mut entries: Vec<(AggregateTrajectory, f64)> = by_history
        .into_iter()
        .map(|(mut hist, p)| {
            let mut counts = vec![[0u32; 3]; steps];
            for t in (0..steps).rev() {
                let key = hist % radix;
                hist /= radix;
                let s = (key / side) as u32;
                let i = (key % side) as u32;
                counts[t] = [s, i, population as u32 - s - i];
            }
            (AggregateTrajectory { counts }, p)
        })
        .collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(Pushforward {
        population: population as u32,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abm::simulate;
    use crate::rng::RngStream;

    fn sched(i0: f64, a: f64, b: f64, g: f64, t: usize) -> AbmSchedule {
        AbmSchedule::constant(i0, ParamVector::new(a, b, g).unwrap(), t)
    }

    #[test]
    fn degenerate_initialisation() {
        let cfg = LatticeConfig::new(2, 2).unwrap();
        let pf = exact_pushforward(&cfg, &sched(1.0, 0.4, 0.3, 0.2, 2)).unwrap();
        for (y, _) in pf.entries() {
            assert_eq!(y.counts[0], [0, 4, 0]);
        }
        assert!((pf.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn initial_marginal_is_binomial() {
        let cfg = LatticeConfig::new(2, 1).unwrap();
        let pf = exact_pushforward(&cfg, &sched(0.5, 0.4, 0.3, 0.2, 1)).unwrap();
        let p: f64 = pf
            .entries()
            .iter()
            .filter(|(y, _)| y.counts[0] == [2, 2, 0])
            .map(|(_, p)| p)
            .sum();
        assert!((p - 0.375).abs() < 1e-12);
    }

    #[test]
    fn no_transmission_means_infections_never_grow() {
        let cfg = LatticeConfig::new(3, 3).unwrap();
        let pf = exact_pushforward(&cfg, &sched(0.3, 0.0, 0.4, 0.5, 3)).unwrap();
        for (y, p) in pf.entries() {
            assert!(*p > 0.0);
            for w in y.counts.windows(2) {
                assert!(w[1][1] <= w[0][1]);
            }
        }
        assert!((pf.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masses_sum_to_one_and_simplex_holds() {
        let cfg = LatticeConfig::new(2, 4).unwrap();
        let pf = exact_pushforward(&cfg, &sched(0.35, 0.6, 0.3, 0.25, 4)).unwrap();
        assert!((pf.total_mass() - 1.0).abs() < 1e-12);
        for (y, _) in pf.entries() {
            assert!(y.counts.iter().all(|c| c.iter().sum::<u32>() == 4));
            assert_eq!(y.counts[0][2], 0);
        }
        assert!(pf.entropy() > 0.0);
    }

    #[test]
    fn rejects_large_lattices() {
        let cfg = LatticeConfig::new(4, 2).unwrap();
        assert!(exact_pushforward(&cfg, &sched(0.3, 0.1, 0.1, 0.1, 2)).is_err());
        let cfg = LatticeConfig::new(2, 5).unwrap();
        assert!(exact_pushforward(&cfg, &sched(0.3, 0.1, 0.1, 0.1, 5)).is_err());
    }

    /// Mean TV of an n-sample empirical pmf from the exact one (normal approximation).
    fn sampling_noise_floor(pf: &Pushforward, n: usize) -> f64 {
        pf.entries()
            .iter()
            .map(|(_, p)| (2.0 * p * (1.0 - p) / (std::f64::consts::PI * n as f64)).sqrt())
            .sum::<f64>()
            / 2.0
    }

    #[test]
    fn empirical_matches_exact() {
        let cfg = LatticeConfig::new(2, 3).unwrap();
        let s = sched(0.5, 0.5, 0.2, 0.1, 3);
        let pf = exact_pushforward(&cfg, &s).unwrap();
        let root = RngStream::new(2024);
        let n = 1_000_000;
        let samples: Vec<_> = (0..n as u64)
            .map(|r| simulate(&cfg, &s, &mut root.split(r)).unwrap().aggregate())
            .collect();
        let tv = total_variation(&pf, &samples);
        let floor = sampling_noise_floor(&pf, n);
        assert!(tv < 1.25 * floor, "tv {tv}, noise floor {floor}");

        // per-step count marginals at 10^5 replicates
        let head = &samples[..100_000];
        for t in 0..=3 {
            let mut exact: HashMap<[u32; 3], f64> = HashMap::new();
            for (y, p) in pf.entries() {
                *exact.entry(y.counts[t]).or_default() += p;
            }
            let mut emp: HashMap<[u32; 3], f64> = HashMap::new();
            for y in head {
                *emp.entry(y.counts[t]).or_default() += 1e-5;
            }
            let mut keys: Vec<_> = exact.keys().chain(emp.keys()).copied().collect();
            keys.sort();
            keys.dedup();
            let tv_t: f64 = keys
                .iter()
                .map(|k| (exact.get(k).unwrap_or(&0.0) - emp.get(k).unwrap_or(&0.0)).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv_t < 0.01, "t={t} marginal tv {tv_t}");
        }
    }
}
