//! Dataset generation and joint training of `(psi, phi)`.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abm::{AggregateTrajectory, Lattice, LatticeConfig};
use crate::error::{Error, Result};
use crate::interventions::{sample_intervention, AbmIntervention, EtaDistribution, InterventionRecord};
use crate::rng::{Purpose, RngStream};
use crate::surrogate::{Family, TrainedPair};

/// One `(intervention, aggregate trajectory)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub intervention: AbmIntervention,
    pub trajectory: AggregateTrajectory,
}

/// Training regime: interventional data (`I`) or observational data (`O`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "I")]
    Interventional,
    #[serde(rename = "O")]
    Observational,
}

impl Regime {
    pub const ALL: [Regime; 2] = [Regime::Interventional, Regime::Observational];

    pub fn eta(self) -> EtaDistribution {
        match self {
            Regime::Interventional => EtaDistribution::union(),
            Regime::Observational => EtaDistribution::UniformInit,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Regime::Interventional => "I",
            Regime::Observational => "O",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "i" | "interventional" => Ok(Regime::Interventional),
            "O" | "o" | "observational" => Ok(Regime::Observational),
            other => Err(Error::InvalidConfig(format!("unknown regime {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub side: usize,
    pub horizon: usize,
    pub population: u32,
    pub eta: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<Record>,
}

fn generate_record(lattice: &Lattice, eta: &EtaDistribution, horizon: usize, master: &RngStream, r: usize) -> Result<Record> {
    let mut rng = master.split(r as u64);
    let intervention = sample_intervention(eta, &mut rng);
    let schedule = intervention.apply_to_abm(horizon)?;
    let trajectory = lattice.simulate(&schedule, &mut rng).aggregate();
    Ok(Record { intervention, trajectory })
}

fn dataset_header(eta: &EtaDistribution, config: &LatticeConfig, seed: u64) -> DatasetHeader {
    DatasetHeader {
        side: config.side(),
        horizon: config.horizon(),
        population: config.population() as u32,
        eta: eta.describe(),
        seed,
    }
}

/// Samples `count` records in parallel; record `r` depends only on
/// `(seed, r)`.
pub fn generate_dataset(eta: &EtaDistribution, count: usize, config: &LatticeConfig, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidConfig("dataset needs at least one record".into()));
    }
    let lattice = Lattice::new(config.side());
    let master = RngStream::new(seed).purpose(Purpose::Data);
    let records = (0..count)
        .into_par_iter()
        .map(|r| generate_record(&lattice, eta, config.horizon(), &master, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { header: dataset_header(eta, config, seed), records })
}

pub fn generate_dataset_sequential(
    eta: &EtaDistribution,
    count: usize,
    config: &LatticeConfig,
    seed: u64,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidConfig("dataset needs at least one record".into()));
    }
    let lattice = Lattice::new(config.side());
    let master = RngStream::new(seed).purpose(Purpose::Data);
    let records = (0..count)
        .map(|r| generate_record(&lattice, eta, config.horizon(), &master, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { header: dataset_header(eta, config, seed), records })
}

const META_PREFIX: &str = "# ";

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.population as usize != h.side * h.side {
            return Err(Error::Dataset(format!("N={} is not L^2 for L={}", h.population, h.side)));
        }
        for (i, r) in self.records.iter().enumerate() {
            let y = &r.trajectory;
            y.validate()?;
            if y.horizon() != h.horizon || y.population() != h.population {
                return Err(Error::Dataset(format!("record {i} does not match T={}, N={}", h.horizon, h.population)));
            }
            if y.counts[0][2] != 0 {
                return Err(Error::Dataset(format!("record {i} has recovered agents at t=0")));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{META_PREFIX}{}", serde_json::to_string(&self.header)?)?;
        let mut cw = csv::Writer::from_writer(w);
        let mut head: Vec<String> = ["kind", "alpha", "beta", "gamma", "a", "t_l"].map(String::from).to_vec();
        for t in 0..=self.header.horizon {
            head.extend([format!("S{t}"), format!("I{t}"), format!("R{t}")]);
        }
        cw.write_record(&head)?;
        for r in &self.records {
            let ir = InterventionRecord::from(&r.intervention);
            let mut row = vec![
                ir.kind,
                ir.alpha.to_string(),
                ir.beta.to_string(),
                ir.gamma.to_string(),
                ir.a.to_string(),
                ir.t_l.to_string(),
            ];
            row.extend(r.trajectory.counts.iter().flatten().map(u32::to_string));
            cw.write_record(&row)?;
        }
        cw.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut br = BufReader::new(reader);
        let mut first = String::new();
        br.read_line(&mut first)?;
        let meta = first
            .trim_end()
            .strip_prefix(META_PREFIX)
            .ok_or_else(|| Error::Dataset("missing metadata line".into()))?;
        let header: DatasetHeader = serde_json::from_str(meta)?;
        let width = 6 + 3 * (header.horizon + 1);
        let mut cr = csv::Reader::from_reader(br);
        let mut records = Vec::new();
        for (i, row) in cr.records().enumerate() {
            let row = row?;
            if row.len() != width {
                return Err(Error::Dataset(format!("row {i} has {} fields, expected {width}", row.len())));
            }
            let num = |k: usize| -> Result<f64> {
                row[k].parse().map_err(|_| Error::Dataset(format!("row {i} field {k}: {}", &row[k])))
            };
            let ir = InterventionRecord {
                kind: row[0].to_string(),
                alpha: num(1)?,
                beta: num(2)?,
                gamma: num(3)?,
                a: num(4)?,
                t_l: row[5].parse().map_err(|_| Error::Dataset(format!("row {i}: bad t_l")))?,
            };
            let intervention = AbmIntervention::try_from(&ir)?;
            let mut counts = Vec::with_capacity(header.horizon + 1);
            for t in 0..=header.horizon {
                let mut c = [0u32; 3];
                for (k, slot) in c.iter_mut().enumerate() {
                    let f = 6 + 3 * t + k;
                    *slot = row[f].parse().map_err(|_| Error::Dataset(format!("row {i} field {f}: {}", &row[f])))?;
                }
                counts.push(c);
            }
            records.push(Record { intervention, trajectory: AggregateTrajectory::new(counts)? });
        }
        let ds = Self { header, records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub splits: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            max_epochs: 1000,
            batch_size: 50,
            patience: 20,
            train_size: 800,
            val_size: 200,
            splits: 5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.batch_size > self.train_size {
            return bad("batch size must be in 1..=train size");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.val_size == 0 || self.splits == 0 {
            return bad("validation size and split count must be positive");
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("learning rate must be positive and Adam moments in [0, 1)");
        }
        Ok(())
    }
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(size: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self { beta1, beta2, epsilon, step: 0, m: vec![0.0; size], v: vec![0.0; size] }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state {} for {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("coordinate {k} is {}", grads[k])));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for k in 0..params.len() {
            let g = grads[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            params[k] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of a batch and its gradient over `psi ++ phi`.
#[derive(Debug, Clone)]
pub struct BatchNll {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Records with zero likelihood, left out of the mean.
    pub excluded: usize,
    pub used: usize,
}

pub fn batch_nll(pair: &TrainedPair, batch: &[&Record]) -> Result<BatchNll> {
    let mut tape = pair.tape(batch)?;
    let used = tape.per_record.iter().filter(|v| v.is_finite()).count();
    let excluded = batch.len() - used;
    if used == 0 {
        return Err(Error::Training("every record in the batch has zero likelihood".into()));
    }
    if tape.per_record.iter().any(|v| v.is_nan()) {
        return Err(Error::Training("NaN log-likelihood".into()));
    }
    let weights: Vec<f64> = tape
        .per_record
        .iter()
        .map(|v| if v.is_finite() { -1.0 / used as f64 } else { 0.0 })
        .collect();
    let g = &mut tape.graph;
    let mut loss = None;
    for &m in &tape.per_time {
        let s = g.weighted_sum(m, weights.clone())?;
        loss = Some(match loss {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let loss = loss.expect("at least one time step");
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    let mut gradient = pair.model.psi_gradient(&grads, &tape.psi);
    gradient.extend(pair.omega.params().gradient(&grads, &tape.phi));
    Ok(BatchNll { value, gradient, excluded, used })
}

/// Mean NLL over finite records, plus the number excluded.
pub fn mean_nll(pair: &TrainedPair, records: &[Record]) -> Result<(f64, usize)> {
    let ll = pair.log_likelihoods(records)?;
    let finite: Vec<f64> = ll.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::Training("no record has positive likelihood".into()));
    }
    Ok((-finite.iter().sum::<f64>() / finite.len() as f64, ll.len() - finite.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: usize,
    pub best_epoch: usize,
    pub stopping_epoch: usize,
    pub best_val_nll: f64,
    /// Index 0 is the untrained model.
    pub val_curve: Vec<f64>,
    /// Mean training-batch NLL per epoch; index 0 is empty.
    pub train_curve: Vec<Option<f64>>,
    pub excluded_records: usize,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub pair: TrainedPair,
    pub summary: SplitSummary,
}

const MAX_EXCLUDED_FRACTION: f64 = 0.01;

fn check_exclusions(excluded: usize, total: usize, what: &str) -> Result<()> {
    if excluded as f64 > MAX_EXCLUDED_FRACTION * total as f64 {
        return Err(Error::Training(format!(
            "{excluded} of {total} {what} records have zero likelihood"
        )));
    }
    if excluded > 0 {
        warn!("{excluded} of {total} {what} records excluded for zero likelihood");
    }
    Ok(())
}

/// Trains one split starting from `pair`.
pub fn train_split(
    mut pair: TrainedPair,
    train: &[Record],
    val: &[Record],
    config: &TrainConfig,
    split: usize,
    order_rng: &mut RngStream,
) -> Result<TrainResult> {
    config.validate()?;
    let (val0, ex0) = mean_nll(&pair, val)?;
    check_exclusions(ex0, val.len(), "validation")?;
    let mut params = pair.flat();
    let mut best = (val0, 0usize, params.clone());
    let mut val_curve = vec![val0];
    let mut train_curve = vec![None];
    let mut adam = Adam::new(params.len(), config.beta1, config.beta2, config.epsilon);
    let mut since_best = 0;
    let mut excluded_total = ex0;
    let mut stopping_epoch = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.max_epochs {
        order_rng.shuffle(&mut order);
        let (mut sum, mut used, mut excluded) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Record> = chunk.iter().map(|&i| &train[i]).collect();
            let b = batch_nll(&pair, &batch)?;
            sum += b.value * b.used as f64;
            used += b.used;
            excluded += b.excluded;
            adam.step(&mut params, &b.gradient, config.learning_rate)?;
            pair.set_flat(&params)?;
        }
        check_exclusions(excluded, train.len(), "training")?;
        let (val_nll, ex) = mean_nll(&pair, val)?;
        check_exclusions(ex, val.len(), "validation")?;
        excluded_total += excluded + ex;
        train_curve.push(Some(sum / used as f64));
        val_curve.push(val_nll);
        stopping_epoch = epoch;
        if val_nll < best.0 {
            best = (val_nll, epoch, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        debug!("split {split} epoch {epoch}: train {:.4} val {val_nll:.4}", sum / used as f64);
        if since_best >= config.patience {
            break;
        }
    }
    pair.set_flat(&best.2)?;
    info!(
        "split {split}: best validation NLL {:.4} at epoch {}, stopped at {stopping_epoch}",
        best.0, best.1
    );
    Ok(TrainResult {
        pair,
        summary: SplitSummary {
            split,
            best_epoch: best.1,
            stopping_epoch,
            best_val_nll: best.0,
            val_curve,
            train_curve,
            excluded_records: excluded_total,
        },
    })
}

/// Train/validation index sets for split `s`.
pub fn split_indices(count: usize, config: &TrainConfig, split: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let needed = config.train_size + config.val_size;
    if count < needed {
        return Err(Error::Dataset(format!("{count} records, split needs {needed}")));
    }
    let mut idx: Vec<usize> = (0..count).collect();
    RngStream::new(config.seed).purpose(Purpose::Splits).split(split as u64).shuffle(&mut idx);
    let train = idx[..config.train_size].to_vec();
    let val = idx[config.train_size..needed].to_vec();
    Ok((train, val))
}

/// Trains a fresh pair on each split.
pub fn train(family: Family, dataset: &Dataset, config: &TrainConfig) -> Result<Vec<TrainResult>> {
    config.validate()?;
    let h = &dataset.header;
    (0..config.splits)
        .map(|s| {
            let (ti, vi) = split_indices(dataset.len(), config, s)?;
            let pick = |ix: &[usize]| ix.iter().map(|&i| dataset.records[i].clone()).collect::<Vec<_>>();
            let master = RngStream::new(config.seed);
            let mut init = master.purpose(Purpose::Init).split(s as u64);
            let pair = TrainedPair::new(family, h.population, h.horizon, &mut init)?;
            let mut order = master.purpose(Purpose::Splits).split(1_000 + s as u64);
            train_split(pair, &pick(&ti), &pick(&vi), config, s, &mut order)
        })
        .collect()
}

/// Self-describing record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub family: Family,
    pub regime: Option<Regime>,
    pub dataset: DatasetHeader,
    pub config: TrainConfig,
    pub parameter_count: usize,
    pub splits: Vec<SplitSummary>,
    pub checkpoints: Vec<String>,
}
