//! Surrogate macromodels with multinomial emissions: LODE, LODE-RNN, LRNN.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::abm::AggregateTrajectory;
use crate::error::{Error, Result};
use crate::grad::{multinomial_log_pmf, Checkpoint, Gradients, Graph, ParameterStore, Tensor, Var};
use crate::interventions::{lockdown_masks, AbmIntervention, SurrogateIntervention};
use crate::nn::{FeedForward, FeedForwardSpec, Gru, GruSpec, OutputActivation};
use crate::ode::DEFAULT_DT;
use crate::rng::RngStream;
use crate::trainer::Record;

pub const HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Lode,
    LodeRnn,
    Lrnn,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Lode, Family::LodeRnn, Family::Lrnn];

    pub fn name(self) -> &'static str {
        match self {
            Family::Lode => "lode",
            Family::LodeRnn => "lodernn",
            Family::Lrnn => "lrnn",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Family::Lode => "LODE",
            Family::LodeRnn => "LODERNN",
            Family::Lrnn => "LRNN",
        }
    }

    pub fn omega_spec(self) -> FeedForwardSpec {
        let sizes = match self {
            Family::Lode => vec![3, 32, 64, 64, 64, 32, 3],
            Family::LodeRnn | Family::Lrnn => vec![3, 32, 64, 32, 3],
        };
        FeedForwardSpec::new(sizes, OutputActivation::Sigmoid).expect("static spec")
    }

    pub fn gru_spec(self) -> Option<GruSpec> {
        match self {
            Family::Lode => None,
            _ => Some(GruSpec::new(3, HIDDEN).expect("static spec")),
        }
    }

    pub fn head_spec(self) -> Option<FeedForwardSpec> {
        match self {
            Family::Lode => None,
            _ => Some(
                FeedForwardSpec::new(vec![HIDDEN, 32, 64, 32, 16, 3], OutputActivation::Identity)
                    .expect("static spec"),
            ),
        }
    }

    /// Trainable scalars in psi and phi together.
    pub fn parameter_count(self) -> usize {
        self.gru_spec().map_or(0, |s| s.parameter_count())
            + self.head_spec().map_or(0, |s| s.parameter_count())
            + self.omega_spec().parameter_count()
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lode" => Ok(Family::Lode),
            "lodernn" | "lode-rnn" | "lode_rnn" => Ok(Family::LodeRnn),
            "lrnn" => Ok(Family::Lrnn),
            other => Err(Error::InvalidConfig(format!("unknown surrogate family {other}"))),
        }
    }
}

/// Graph handles for the psi parameters.
#[derive(Debug, Clone, Default)]
pub struct PsiVars {
    gru: Vec<Var>,
    head: Vec<Var>,
}

/// A surrogate family instance with its psi parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    family: Family,
    population: u32,
    horizon: usize,
    gru: Option<Gru>,
    head: Option<FeedForward>,
}

impl SurrogateModel {
    pub fn new(family: Family, population: u32, horizon: usize, rng: &mut RngStream) -> Result<Self> {
        check_dims(population, horizon)?;
        let gru = family.gru_spec().map(|s| Gru::init(s, rng));
        let head = family.head_spec().map(|s| FeedForward::init(s, rng));
        Ok(Self { family, population, horizon, gru, head })
    }

    pub fn zeros(family: Family, population: u32, horizon: usize) -> Result<Self> {
        check_dims(population, horizon)?;
        Ok(Self {
            family,
            population,
            horizon,
            gru: family.gru_spec().map(Gru::zeros),
            head: family.head_spec().map(FeedForward::zeros),
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn population(&self) -> u32 {
        self.population
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn head_mut(&mut self) -> Option<&mut FeedForward> {
        self.head.as_mut()
    }

    pub fn psi_count(&self) -> usize {
        self.gru.as_ref().map_or(0, |g| g.params().parameter_count())
            + self.head.as_ref().map_or(0, |h| h.params().parameter_count())
    }

    pub fn psi_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.psi_count());
        if let Some(g) = &self.gru {
            out.extend(g.params().flatten());
        }
        if let Some(h) = &self.head {
            out.extend(h.params().flatten());
        }
        out
    }

    pub fn set_psi_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.psi_count() {
            return Err(Error::Shape(format!("{} values for {} psi parameters", flat.len(), self.psi_count())));
        }
        let split = self.gru.as_ref().map_or(0, |g| g.params().parameter_count());
        if let Some(g) = &mut self.gru {
            g.params_mut().unflatten(&flat[..split])?;
        }
        if let Some(h) = &mut self.head {
            h.params_mut().unflatten(&flat[split..])?;
        }
        Ok(())
    }

    pub fn bind_psi(&self, g: &mut Graph) -> PsiVars {
        PsiVars {
            gru: self.gru.as_ref().map(|m| m.params().bind(g)).unwrap_or_default(),
            head: self.head.as_ref().map(|m| m.params().bind(g)).unwrap_or_default(),
        }
    }

    pub fn psi_gradient(&self, grads: &Gradients, vars: &PsiVars) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.psi_count());
        if let Some(m) = &self.gru {
            out.extend(m.params().gradient(grads, &vars.gru));
        }
        if let Some(m) = &self.head {
            out.extend(m.params().gradient(grads, &vars.head));
        }
        out
    }

    fn psi_store(&self) -> ParameterStore {
        let mut store = ParameterStore::new();
        let parts = [
            ("gru", self.gru.as_ref().map(Gru::params)),
            ("head", self.head.as_ref().map(FeedForward::params)),
        ];
        for (prefix, p) in parts {
            if let Some(p) = p {
                for (n, t) in p.names().iter().zip(p.tensors()) {
                    store.insert(format!("{prefix}.{n}"), t.clone()).expect("unique");
                }
            }
        }
        store
    }

    fn psi_fingerprint(&self) -> String {
        let gru = self.family.gru_spec().map(|s| s.fingerprint()).unwrap_or_default();
        let head = self.family.head_spec().map(|s| s.fingerprint()).unwrap_or_default();
        format!("{}:{gru}:{head}", self.family)
    }

    fn with_psi_store(&mut self, store: &ParameterStore) -> Result<()> {
        let flat = store.flatten();
        self.set_psi_flat(&flat)
    }

    /// Per-step log-probabilities `[B, 3]` for `t = 0..T`. `thetas[t - 1]`
    /// holds the `[B, 3]` surrogate parameters for step `t`.
    pub fn emission_graph(&self, g: &mut Graph, psi: &PsiVars, i0: &[f64], thetas: &[Var]) -> Result<Vec<Var>> {
        if thetas.len() != self.horizon {
            return Err(Error::ScheduleLength { expected: self.horizon, got: thetas.len() });
        }
        let b = i0.len();
        let z0 = || -> Result<Tensor> {
            Tensor::matrix(b, 3, i0.iter().flat_map(|&a| [1.0 - a, a, 0.0]).collect())
        };
        let mut out = Vec::with_capacity(self.horizon + 1);
        match self.family {
            Family::Lode => {
                let mut z = g.constant(z0()?);
                out.push(lode_emission(g, z, 0));
                for (t, &th) in thetas.iter().enumerate() {
                    z = g.sirs_euler(z, th, DEFAULT_DT)?;
                    out.push(lode_emission(g, z, t + 1));
                }
            }
            Family::LodeRnn => {
                let (gru, head) = self.networks();
                let mut z = g.constant(z0()?);
                let mut h = g.constant(Tensor::zeros(&[b, HIDDEN]));
                for t in 0..=self.horizon {
                    if t > 0 {
                        z = g.sirs_euler(z, thetas[t - 1], DEFAULT_DT)?;
                    }
                    h = gru.step(g, &psi.gru, z, h)?;
                    out.push(logits_to_log_probs(g, head, &psi.head, h)?);
                }
            }
            Family::Lrnn => {
                let (gru, head) = self.networks();
                let o0 = i0.iter().flat_map(|&a| [(1.0 - a).ln(), a.ln(), f64::NEG_INFINITY]).collect();
                out.push(g.constant(Tensor::matrix(b, 3, o0)?));
                let mut h0 = vec![0.0; b * HIDDEN];
                for (r, &a) in i0.iter().enumerate() {
                    h0[r * HIDDEN] = 1.0 - a;
                    h0[r * HIDDEN + 1] = a;
                }
                let mut h = g.constant(Tensor::matrix(b, HIDDEN, h0)?);
                for &th in thetas {
                    h = gru.step(g, &psi.gru, th, h)?;
                    out.push(logits_to_log_probs(g, head, &psi.head, h)?);
                }
            }
        }
        Ok(out)
    }

    fn networks(&self) -> (&Gru, &FeedForward) {
        (
            self.gru.as_ref().expect("recurrent family has a GRU"),
            self.head.as_ref().expect("recurrent family has a head"),
        )
    }

    /// Emission log-probabilities for a single surrogate intervention.
    pub fn emission_log_probs(&self, iota: &SurrogateIntervention) -> Result<Vec<[f64; 3]>> {
        let mut g = Graph::new();
        let psi = self.bind_psi(&mut g);
        let thetas: Vec<Var> = iota
            .thetas(self.horizon)?
            .into_iter()
            .map(|th| g.constant(Tensor::from_rows(&[th])))
            .collect();
        let lp = self.emission_graph(&mut g, &psi, &[iota.a()], &thetas)?;
        Ok(lp.iter().map(|&v| row3(g.value(v), 0)).collect())
    }

    pub fn log_likelihood(&self, iota: &SurrogateIntervention, y: &AggregateTrajectory) -> Result<f64> {
        self.check_trajectory(y)?;
        let lp = self.emission_log_probs(iota)?;
        trajectory_log_prob(&lp, y)
    }

    pub fn sample(&self, iota: &SurrogateIntervention, rng: &mut RngStream) -> Result<AggregateTrajectory> {
        let lp = self.emission_log_probs(iota)?;
        sample_trajectory(&lp, self.population, rng)
    }

    pub fn check_trajectory(&self, y: &AggregateTrajectory) -> Result<()> {
        if y.horizon() != self.horizon || y.population() != self.population {
            return Err(Error::Dataset(format!(
                "trajectory with T={}, N={} for a model with T={}, N={}",
                y.horizon(),
                y.population(),
                self.horizon,
                self.population
            )));
        }
        Ok(())
    }
}

fn check_dims(population: u32, horizon: usize) -> Result<()> {
    if population == 0 || horizon == 0 {
        return Err(Error::InvalidConfig("surrogate needs N >= 1 and T >= 1".into()));
    }
    Ok(())
}

fn row3(t: &Tensor, r: usize) -> [f64; 3] {
    let row = t.row(r);
    [row[0], row[1], row[2]]
}

fn lode_emission(g: &mut Graph, z: Var, t: usize) -> Var {
    if g.value(z).data().iter().any(|&v| v < 0.0) {
        warn!("ODE state left the simplex at t={t}; clamping emission probabilities");
        let c = g.clamp_simplex(z);
        g.log(c)
    } else {
        g.log(z)
    }
}

fn logits_to_log_probs(g: &mut Graph, head: &FeedForward, vars: &[Var], h: Var) -> Result<Var> {
    let o = head.forward(g, vars, h)?;
    if g.value(o).data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("non-finite emission logits".into()));
    }
    Ok(g.log_softmax(o))
}

/// `sum_t log Mult(y_t | p_t)`.
pub fn trajectory_log_prob(log_probs: &[[f64; 3]], y: &AggregateTrajectory) -> Result<f64> {
    if log_probs.len() != y.counts.len() {
        return Err(Error::ScheduleLength { expected: log_probs.len(), got: y.counts.len() });
    }
    let mut total = 0.0;
    for (c, lp) in y.counts.iter().zip(log_probs) {
        total += multinomial_log_pmf(c, lp)?;
        if total == f64::NEG_INFINITY {
            break;
        }
    }
    Ok(total)
}

/// Draws `(S, I, R)` as a chain of binomials.
pub fn sample_multinomial(n: u32, probs: [f64; 3], rng: &mut RngStream) -> Result<[u32; 3]> {
    let binom = |trials: u32, p: f64, rng: &mut RngStream| -> Result<u32> {
        if trials == 0 || p <= 0.0 {
            return Ok(0);
        }
        if p >= 1.0 {
            return Ok(trials);
        }
        let d = Binomial::new(trials as u64, p).map_err(|e| Error::Evaluation(e.to_string()))?;
        Ok(d.sample(rng) as u32)
    };
    let total: f64 = probs.iter().sum();
    let p = probs.map(|v| v.max(0.0) / total);
    let s = binom(n, p[0], rng)?;
    let rest = 1.0 - p[0];
    let i = if rest > 0.0 { binom(n - s, (p[1] / rest).min(1.0), rng)? } else { 0 };
    Ok([s, i, n - s - i])
}

pub fn sample_trajectory(log_probs: &[[f64; 3]], n: u32, rng: &mut RngStream) -> Result<AggregateTrajectory> {
    let counts = log_probs
        .iter()
        .map(|lp| sample_multinomial(n, lp.map(f64::exp), rng))
        .collect::<Result<Vec<_>>>()?;
    AggregateTrajectory::new(counts)
}

/// Surrogate parameters `psi` together with the intervention map `omega^phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPair {
    pub model: SurrogateModel,
    pub omega: FeedForward,
}

/// A recorded forward pass over a batch of records.
pub struct BatchTape {
    pub graph: Graph,
    pub psi: PsiVars,
    pub phi: Vec<Var>,
    /// `[B]` log-pmf contributions, one node per time step.
    pub per_time: Vec<Var>,
    /// Total log-likelihood of each record.
    pub per_record: Vec<f64>,
}

impl TrainedPair {
    pub fn new(family: Family, population: u32, horizon: usize, rng: &mut RngStream) -> Result<Self> {
        let model = SurrogateModel::new(family, population, horizon, rng)?;
        let omega = FeedForward::init(family.omega_spec(), rng);
        Ok(Self { model, omega })
    }

    pub fn family(&self) -> Family {
        self.model.family
    }

    pub fn parameter_count(&self) -> usize {
        self.model.psi_count() + self.omega.params().parameter_count()
    }

    /// `psi` followed by `phi`.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.model.psi_flat();
        v.extend(self.omega.params().flatten());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.parameter_count())));
        }
        let k = self.model.psi_count();
        self.model.set_psi_flat(&flat[..k])?;
        self.omega.params_mut().unflatten(&flat[k..])
    }

    pub fn translate(&self, iota: &AbmIntervention) -> Result<SurrogateIntervention> {
        iota.omega_apply(&self.omega)
    }

    /// Builds the differentiable log-likelihood of every record.
    pub fn tape(&self, records: &[&Record]) -> Result<BatchTape> {
        if records.is_empty() {
            return Err(Error::Training("empty batch".into()));
        }
        let horizon = self.model.horizon;
        for r in records {
            self.model.check_trajectory(&r.trajectory)?;
        }
        let mut g = Graph::new();
        let psi = self.model.bind_psi(&mut g);
        let phi = self.omega.params().bind(&mut g);
        let b = records.len();
        let v_in: Vec<f64> = records.iter().flat_map(|r| r.intervention.v().as_array()).collect();
        let v_in = g.constant(Tensor::matrix(b, 3, v_in)?);
        let v_hat = self.omega.forward(&mut g, &phi, v_in)?;
        let masks = records
            .iter()
            .map(|r| lockdown_masks(r.intervention.lockdown_start(), horizon))
            .collect::<Result<Vec<_>>>()?;
        let mut thetas = Vec::with_capacity(horizon);
        for t in 0..horizon {
            if masks.iter().all(|m| m[t] == [1.0; 3]) {
                thetas.push(v_hat);
            } else {
                let m = masks.iter().flat_map(|m| m[t]).collect();
                thetas.push(g.mul_const(v_hat, Tensor::matrix(b, 3, m)?)?);
            }
        }
        let i0: Vec<f64> = records.iter().map(|r| r.intervention.a()).collect();
        let lp = self.model.emission_graph(&mut g, &psi, &i0, &thetas)?;
        let mut per_record = vec![0.0; b];
        let mut per_time = Vec::with_capacity(lp.len());
        for (t, &l) in lp.iter().enumerate() {
            let counts = records.iter().map(|r| r.trajectory.counts[t]).collect();
            let m = g.multinomial_log_pmf(l, counts)?;
            for (acc, v) in per_record.iter_mut().zip(g.value(m).data()) {
                *acc += v;
            }
            per_time.push(m);
        }
        Ok(BatchTape { graph: g, psi, phi, per_time, per_record })
    }

    /// Log-likelihood of each record without keeping gradients.
    pub fn log_likelihoods(&self, records: &[Record]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(256) {
            let refs: Vec<&Record> = chunk.iter().collect();
            out.extend(self.tape(&refs)?.per_record);
        }
        Ok(out)
    }

    pub fn log_likelihood(&self, iota: &AbmIntervention, y: &AggregateTrajectory) -> Result<f64> {
        self.model.log_likelihood(&self.translate(iota)?, y)
    }

    pub fn sample(&self, iota: &AbmIntervention, rng: &mut RngStream) -> Result<AggregateTrajectory> {
        self.model.sample(&self.translate(iota)?, rng)
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            family: self.model.family,
            population: self.model.population,
            horizon: self.model.horizon,
            psi: self.model.psi_store().to_checkpoint(&self.model.psi_fingerprint()),
            phi: self.omega.params().to_checkpoint(&self.omega.spec().fingerprint()),
        }
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        let mut model = SurrogateModel::zeros(ck.family, ck.population, ck.horizon)?;
        let psi = ParameterStore::from_checkpoint(&ck.psi, &model.psi_fingerprint(), model.psi_count())?;
        model.with_psi_store(&psi)?;
        let spec = ck.family.omega_spec();
        let phi = ParameterStore::from_checkpoint(&ck.phi, &spec.fingerprint(), spec.parameter_count())?;
        let omega = FeedForward::from_params(spec, phi)?;
        Ok(Self { model, omega })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&ModelCheckpoint::load(path)?)
    }
}

/// Parameter checkpoint with family tag and `(N, T)` header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub family: Family,
    pub population: u32,
    pub horizon: usize,
    pub psi: Checkpoint,
    pub phi: Checkpoint,
}

impl ModelCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
