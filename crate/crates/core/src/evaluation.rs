//! Held-out metrics, the table experiment, lockdown counterfactuals and exact
//! abstraction-error checks on tiny lattices.

use std::collections::BTreeMap;
use std::io::Write;

use log::info;
use serde::{Deserialize, Serialize};

use crate::abm::{exact_pushforward, AggregateTrajectory, Lattice, LatticeConfig, ParamVector};
use crate::error::{Error, Result};
use crate::interventions::{AbmIntervention, EtaDistribution, LOCKDOWN_START_MAX, LOCKDOWN_START_MIN, LOCKDOWN_STEPS};
use crate::rng::{Purpose, RngStream};
use crate::surrogate::{trajectory_log_prob, Family, TrainedPair};
use crate::trainer::{generate_dataset, train, Dataset, Record, Regime, SplitSummary, TrainConfig};

/// Anything that assigns log-probabilities to aggregate trajectories under an
/// ABM-level intervention.
pub trait TrajectoryModel {
    fn log_probs(&self, iota: &AbmIntervention, ys: &[&AggregateTrajectory]) -> Result<Vec<f64>>;
}

impl TrajectoryModel for TrainedPair {
    fn log_probs(&self, iota: &AbmIntervention, ys: &[&AggregateTrajectory]) -> Result<Vec<f64>> {
        let lp = self.model.emission_log_probs(&self.translate(iota)?)?;
        ys.iter().map(|y| trajectory_log_prob(&lp, y)).collect()
    }
}

/// Surrogate whose distribution is the exact ABM pushforward.
#[derive(Debug, Clone)]
pub struct LookupTableSurrogate {
    config: LatticeConfig,
}

impl LookupTableSurrogate {
    pub fn new(config: LatticeConfig) -> Self {
        Self { config }
    }
}

impl TrajectoryModel for LookupTableSurrogate {
    fn log_probs(&self, iota: &AbmIntervention, ys: &[&AggregateTrajectory]) -> Result<Vec<f64>> {
        let table = exact_pushforward(&self.config, &iota.apply_to_abm(self.config.horizon())?)?;
        Ok(ys.iter().map(|y| table.prob(y).ln()).collect())
    }
}

/// `(1 / (N^2 R)) sum_r (1 / (T + 1)) sum_t |sim_t - obs_t|^2`.
pub fn amse_of(simulated: &[AggregateTrajectory], observed: &[AggregateTrajectory]) -> Result<f64> {
    if simulated.len() != observed.len() || observed.is_empty() {
        return Err(Error::Evaluation(format!(
            "{} simulated and {} observed trajectories",
            simulated.len(),
            observed.len()
        )));
    }
    let mut total = 0.0;
    for (s, o) in simulated.iter().zip(observed) {
        if s.counts.len() != o.counts.len() {
            return Err(Error::Evaluation("trajectory lengths differ".into()));
        }
        let sq: f64 = s
            .counts
            .iter()
            .zip(&o.counts)
            .flat_map(|(a, b)| (0..3).map(move |k| (a[k] as f64 - b[k] as f64).powi(2)))
            .sum();
        total += sq / s.counts.len() as f64;
    }
    let n = observed[0].population() as f64;
    Ok(total / (n * n * observed.len() as f64))
}

/// AMSE with `samples` surrogate draws per test record, averaged.
pub fn amse(pair: &TrainedPair, test: &[Record], samples: usize, seed: u64) -> Result<f64> {
    if samples == 0 {
        return Err(Error::InvalidConfig("AMSE needs at least one sample per record".into()));
    }
    let master = RngStream::new(seed).purpose(Purpose::Eval);
    let observed: Vec<AggregateTrajectory> = test.iter().map(|r| r.trajectory.clone()).collect();
    let mut acc = 0.0;
    for s in 0..samples {
        let sims = test
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut rng = master.split((s * test.len() + i) as u64);
                pair.sample(&r.intervention, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        acc += amse_of(&sims, &observed)?;
    }
    Ok(acc / samples as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnllReport {
    /// Mean NLL over records with positive likelihood.
    pub anll: f64,
    /// Records with zero likelihood, reported apart.
    pub excluded: usize,
}

pub fn anll(pair: &TrainedPair, test: &[Record]) -> Result<AnllReport> {
    if test.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let ll = pair.log_likelihoods(test)?;
    let finite: Vec<f64> = ll.iter().copied().filter(|v| v.is_finite()).collect();
    let anll = if finite.is_empty() {
        f64::INFINITY
    } else {
        -finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(AnllReport { anll, excluded: ll.len() - finite.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Quartiles by linear interpolation between order statistics.
pub fn quartiles(values: &[f64]) -> Result<Quartiles> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return Err(Error::Evaluation("quartiles need non-empty, NaN-free input".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        if lo == hi {
            v[lo]
        } else {
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        }
    };
    Ok(Quartiles { q1: at(0.25), median: at(0.5), q3: at(0.75) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub family: Family,
    pub train_regime: Regime,
    /// Test set drawn under this regime's distribution (`I'` or `O'`).
    pub test_regime: Regime,
    pub amse: Quartiles,
    pub anll: Quartiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableConfig {
    pub side: usize,
    pub horizon: usize,
    pub train_records: usize,
    pub test_records: usize,
    pub amse_samples: usize,
    pub train: TrainConfig,
    pub families: Vec<Family>,
    pub seed: u64,
}

impl Default for TableConfig {
    fn default() -> Self {
        Self {
            side: 10,
            horizon: 20,
            train_records: 1000,
            test_records: 1000,
            amse_samples: 1,
            train: TrainConfig::default(),
            families: Family::ALL.to_vec(),
            seed: 0,
        }
    }
}

/// Seeds derived from the table's master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSeeds {
    pub train_interventional: u64,
    pub train_observational: u64,
    pub test_interventional: u64,
    pub test_observational: u64,
    pub training: u64,
    pub evaluation: u64,
}

impl TableSeeds {
    pub fn derive(seed: u64) -> Self {
        let m = RngStream::new(seed);
        Self {
            train_interventional: m.split(1).seed(),
            train_observational: m.split(2).seed(),
            test_interventional: m.split(3).seed(),
            test_observational: m.split(4).seed(),
            training: m.split(5).seed(),
            evaluation: m.split(6).seed(),
        }
    }

    pub fn train_seed(&self, regime: Regime) -> u64 {
        match regime {
            Regime::Interventional => self.train_interventional,
            Regime::Observational => self.train_observational,
        }
    }

    pub fn test_seed(&self, regime: Regime) -> u64 {
        match regime {
            Regime::Interventional => self.test_interventional,
            Regime::Observational => self.test_observational,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub family: Family,
    pub train_regime: Regime,
    pub test_regime: Regime,
    pub split: usize,
    pub amse: f64,
    pub anll: f64,
    pub excluded: usize,
}

pub struct TableRun {
    pub rows: Vec<MetricsRow>,
    pub per_split: Vec<SplitMetrics>,
    pub summaries: BTreeMap<(Family, Regime), Vec<SplitSummary>>,
    pub pairs: BTreeMap<(Family, Regime), Vec<TrainedPair>>,
    pub seeds: TableSeeds,
}

/// Evaluates trained pairs on both held-out sets and aggregates over splits.
pub fn evaluate_pairs(
    family: Family,
    train_regime: Regime,
    pairs: &[TrainedPair],
    tests: &BTreeMap<Regime, Dataset>,
    amse_samples: usize,
    eval_seed: u64,
) -> Result<(Vec<MetricsRow>, Vec<SplitMetrics>)> {
    let mut rows = Vec::new();
    let mut per_split = Vec::new();
    for (&test_regime, test) in tests {
        let mut amses = Vec::new();
        let mut anlls = Vec::new();
        for (split, pair) in pairs.iter().enumerate() {
            let am = amse(pair, &test.records, amse_samples, eval_seed)?;
            let an = anll(pair, &test.records)?;
            amses.push(am);
            anlls.push(an.anll);
            per_split.push(SplitMetrics {
                family,
                train_regime,
                test_regime,
                split,
                amse: am,
                anll: an.anll,
                excluded: an.excluded,
            });
        }
        rows.push(MetricsRow {
            family,
            train_regime,
            test_regime,
            amse: quartiles(&amses)?,
            anll: quartiles(&anlls)?,
        });
    }
    Ok((rows, per_split))
}

/// Trains every family under both regimes and evaluates on `I'` and `O'`.
pub fn reproduce_table(config: &TableConfig) -> Result<TableRun> {
    let lattice = LatticeConfig::new(config.side, config.horizon)?;
    let seeds = TableSeeds::derive(config.seed);
    let mut train_sets = BTreeMap::new();
    let mut tests = BTreeMap::new();
    for regime in Regime::ALL {
        let eta = regime.eta();
        train_sets.insert(regime, generate_dataset(&eta, config.train_records, &lattice, seeds.train_seed(regime))?);
        tests.insert(regime, generate_dataset(&eta, config.test_records, &lattice, seeds.test_seed(regime))?);
    }
    let train_config = TrainConfig { seed: seeds.training, ..config.train.clone() };
    let mut run = TableRun {
        rows: Vec::new(),
        per_split: Vec::new(),
        summaries: BTreeMap::new(),
        pairs: BTreeMap::new(),
        seeds,
    };
    for &family in &config.families {
        for regime in Regime::ALL {
            info!("training {family} on regime {regime}");
            let results = train(family, &train_sets[&regime], &train_config)?;
            let pairs: Vec<TrainedPair> = results.iter().map(|r| r.pair.clone()).collect();
            let (rows, per_split) =
                evaluate_pairs(family, regime, &pairs, &tests, config.amse_samples, seeds.evaluation)?;
            run.rows.extend(rows);
            run.per_split.extend(per_split);
            run.summaries.insert((family, regime), results.into_iter().map(|r| r.summary).collect());
            run.pairs.insert((family, regime), pairs);
        }
    }
    Ok(run)
}

pub fn write_table_csv<W: Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let mut cw = csv::Writer::from_writer(w);
    cw.write_record([
        "family",
        "train_regime",
        "test_regime",
        "amse_median",
        "amse_q1",
        "amse_q3",
        "anll_median",
        "anll_q1",
        "anll_q3",
    ])?;
    for r in rows {
        cw.write_record([
            r.family.label().to_string(),
            r.train_regime.symbol().to_string(),
            format!("{}'", r.test_regime.symbol()),
            r.amse.median.to_string(),
            r.amse.q1.to_string(),
            r.amse.q3.to_string(),
            r.anll.median.to_string(),
            r.anll.q1.to_string(),
            r.anll.q3.to_string(),
        ])?;
    }
    cw.flush()?;
    Ok(())
}

/// Mean infected-count curves with and without a lockdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub lockdown_start: usize,
    pub abm_lock: Vec<f64>,
    pub abm_nolock: Vec<f64>,
    pub surrogate_lock: Vec<f64>,
    pub surrogate_nolock: Vec<f64>,
}

/// Mean of `lock - nolock` over the lockdown window.
pub fn window_gap(lock: &[f64], nolock: &[f64], start: usize) -> f64 {
    let window = start..start + LOCKDOWN_STEPS;
    window.clone().map(|t| lock[t] - nolock[t]).sum::<f64>() / window.len() as f64
}

impl Counterfactual {
    pub fn abm_gap(&self) -> f64 {
        window_gap(&self.abm_lock, &self.abm_nolock, self.lockdown_start)
    }

    pub fn surrogate_gap(&self) -> f64 {
        window_gap(&self.surrogate_lock, &self.surrogate_nolock, self.lockdown_start)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut cw = csv::Writer::from_writer(w);
        cw.write_record([
            "t",
            "abm_mean_I_lock",
            "abm_mean_I_nolock",
            "surrogate_mean_I_lock",
            "surrogate_mean_I_nolock",
        ])?;
        for t in 0..self.abm_lock.len() {
            cw.write_record([
                t.to_string(),
                self.abm_lock[t].to_string(),
                self.abm_nolock[t].to_string(),
                self.surrogate_lock[t].to_string(),
                self.surrogate_nolock[t].to_string(),
            ])?;
        }
        cw.flush()?;
        Ok(())
    }
}

fn mean_infected(trajs: &[AggregateTrajectory]) -> Vec<f64> {
    let len = trajs[0].counts.len();
    (0..len)
        .map(|t| trajs.iter().map(|y| y.counts[t][1] as f64).sum::<f64>() / trajs.len() as f64)
        .collect()
}

/// Paired replicates share a random stream, so lockdown and no-lockdown runs
/// differ only through the intervention.
pub fn lockdown_counterfactual(
    pair: &TrainedPair,
    config: &LatticeConfig,
    v: ParamVector,
    a: f64,
    t_l: usize,
    n_runs: usize,
    seed: u64,
) -> Result<Counterfactual> {
    if n_runs == 0 {
        return Err(Error::InvalidConfig("counterfactual needs at least one run".into()));
    }
    let lock = AbmIntervention::InitLock { v, a, t_l };
    let nolock = AbmIntervention::Init { v, a };
    let lock_schedule = lock.apply_to_abm(config.horizon())?;
    let nolock_schedule = nolock.apply_to_abm(config.horizon())?;
    let lattice = Lattice::new(config.side());
    let master = RngStream::new(seed);
    let abm_stream = master.purpose(Purpose::Data);
    let sur_stream = master.purpose(Purpose::Eval);
    let mut abm = (Vec::with_capacity(n_runs), Vec::with_capacity(n_runs));
    let mut sur = (Vec::with_capacity(n_runs), Vec::with_capacity(n_runs));
    for r in 0..n_runs as u64 {
        abm.0.push(lattice.simulate(&lock_schedule, &mut abm_stream.split(r)).aggregate());
        abm.1.push(lattice.simulate(&nolock_schedule, &mut abm_stream.split(r)).aggregate());
        sur.0.push(pair.sample(&lock, &mut sur_stream.split(r))?);
        sur.1.push(pair.sample(&nolock, &mut sur_stream.split(r))?);
    }
    Ok(Counterfactual {
        lockdown_start: t_l,
        abm_lock: mean_infected(&abm.0),
        abm_nolock: mean_infected(&abm.1),
        surrogate_lock: mean_infected(&sur.0),
        surrogate_nolock: mean_infected(&sur.1),
    })
}

/// Finite weighted set of interventions standing in for `eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaGrid {
    pub points: Vec<(AbmIntervention, f64)>,
}

impl EtaGrid {
    /// Tensor grid over `(alpha, beta, gamma, a)`, plus lockdown starts for
    /// the mixture, with uniform weights inside each component. Horizons too
    /// short for any lockdown window keep only the `Init` points.
    pub fn new(eta: &EtaDistribution, levels: &[f64], horizon: usize) -> Result<Self> {
        if levels.is_empty() || levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::InvalidConfig("grid levels must lie in [0, 1]".into()));
        }
        let mut base = Vec::new();
        for &al in levels {
            for &be in levels {
                for &ga in levels {
                    for &a in levels {
                        base.push((ParamVector::new(al, be, ga)?, a));
                    }
                }
            }
        }
        let lockdowns_fit = horizon >= LOCKDOWN_START_MAX + LOCKDOWN_STEPS;
        let p_lock = match *eta {
            EtaDistribution::UniformUnion { p_lock } if lockdowns_fit => p_lock,
            _ => 0.0,
        };
        let mut points: Vec<(AbmIntervention, f64)> = Vec::new();
        if p_lock < 1.0 {
            let w = (1.0 - p_lock) / base.len() as f64;
            points.extend(base.iter().map(|&(v, a)| (AbmIntervention::Init { v, a }, w)));
        }
        if p_lock > 0.0 {
            let starts = LOCKDOWN_START_MIN..=LOCKDOWN_START_MAX;
            let w = p_lock / (base.len() * starts.clone().count()) as f64;
            for &(v, a) in &base {
                for t_l in starts.clone() {
                    points.push((AbmIntervention::InitLock { v, a, t_l }, w));
                }
            }
        }
        Ok(Self { points })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPointError {
    pub intervention: AbmIntervention,
    pub weight: f64,
    pub kl: f64,
    pub cross_entropy: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractionReport {
    pub expected_kl: f64,
    pub expected_cross_entropy: f64,
    pub points: Vec<GridPointError>,
}

/// Exact `KL(tau_# P_iota || Q_omega(iota))` at every grid point.
pub fn abstraction_error_exact(
    model: &dyn TrajectoryModel,
    grid: &EtaGrid,
    config: &LatticeConfig,
) -> Result<AbstractionReport> {
    let mut points = Vec::with_capacity(grid.points.len());
    for &(iota, weight) in &grid.points {
        let exact = exact_pushforward(config, &iota.apply_to_abm(config.horizon())?)?;
        let ys: Vec<&AggregateTrajectory> = exact.entries().iter().map(|(y, _)| y).collect();
        let lq = model.log_probs(&iota, &ys)?;
        let (mut kl, mut ce) = (0.0, 0.0);
        for ((_, p), q) in exact.entries().iter().zip(&lq) {
            if *p > 0.0 {
                kl += p * (p.ln() - q);
                ce -= p * q;
            }
        }
        points.push(GridPointError { intervention: iota, weight, kl, cross_entropy: ce, entropy: exact.entropy() });
    }
    let total_weight: f64 = points.iter().map(|p| p.weight).sum();
    let expected = |f: &dyn Fn(&GridPointError) -> f64| {
        points.iter().map(|p| p.weight * f(p)).sum::<f64>() / total_weight
    };
    Ok(AbstractionReport {
        expected_kl: expected(&|p| p.kl),
        expected_cross_entropy: expected(&|p| p.cross_entropy),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub epsilon: f64,
    /// `P_eta(KL >= epsilon)`.
    pub probability: f64,
    /// `E_eta[CE] / epsilon`.
    pub bound: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub grid_points: usize,
    pub expected_kl: f64,
    pub expected_cross_entropy: f64,
    /// Largest `|KL - (CE - H)|` over finite grid points.
    pub max_decomposition_gap: f64,
    pub rows: Vec<BoundRow>,
}

pub const DECOMPOSITION_TOLERANCE: f64 = 1e-9;

/// Checks `P(KL >= eps) <= E[CE] / eps` exactly on the grid.
pub fn markov_bound_check(
    model: &dyn TrajectoryModel,
    grid: &EtaGrid,
    config: &LatticeConfig,
    epsilons: &[f64],
) -> Result<BoundReport> {
    let report = abstraction_error_exact(model, grid, config)?;
    let total_weight: f64 = report.points.iter().map(|p| p.weight).sum();
    let mut gap: f64 = 0.0;
    for p in &report.points {
        if p.kl.is_finite() || p.cross_entropy.is_finite() {
            gap = gap.max((p.kl - (p.cross_entropy - p.entropy)).abs());
        }
    }
    if gap.is_nan() || gap > DECOMPOSITION_TOLERANCE {
        return Err(Error::BoundViolated(format!("KL differs from CE - H by {gap:e}")));
    }
    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        if eps <= 0.0 {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {eps}")));
        }
        let probability = report.points.iter().filter(|p| p.kl >= eps).map(|p| p.weight).sum::<f64>() / total_weight;
        let bound = report.expected_cross_entropy / eps;
        if probability > bound {
            return Err(Error::BoundViolated(format!("P(KL >= {eps}) = {probability} exceeds {bound}")));
        }
        rows.push(BoundRow { epsilon: eps, probability, bound, slack: bound - probability });
    }
    Ok(BoundReport {
        grid_points: report.points.len(),
        expected_kl: report.expected_kl,
        expected_cross_entropy: report.expected_cross_entropy,
        max_decomposition_gap: gap,
        rows,
    })
}
