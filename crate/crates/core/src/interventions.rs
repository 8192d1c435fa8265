//! Hard interventions on the ABM and on the surrogate macromodels.
//!
//! Every ABM intervention fixes the full parameter schedule and the initial
//! infection probability. The lockdown variant zeroes the transmission rate
//! on the inclusive window `t_l ..= t_l + 5`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::abm::{AbmSchedule, ParamVector};
use crate::error::{Error, Result};
use crate::nn::FeedForward;
use crate::rng::RngStream;

pub const LOCKDOWN_START_MIN: usize = 5;
pub const LOCKDOWN_START_MAX: usize = 10;
/// Number of masked steps, `t_l ..= t_l + 5`.
pub const LOCKDOWN_STEPS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AbmIntervention {
    Init { v: ParamVector, a: f64 },
    InitLock { v: ParamVector, a: f64, t_l: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurrogateIntervention {
    Init { v: [f64; 3], a: f64 },
    InitLock { v: [f64; 3], a: f64, t_l: usize },
}

/// Outcome of comparing two interventions under the partial order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartialOrdering {
    Equal,
    Less,
    Greater,
    Incomparable,
}

/// The interventional distribution used for sampling training/test data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EtaDistribution {
    /// Uniform over `(v, a) in [0,1]^4`, no lockdown.
    UniformInit,
    /// Mixture: lockdown with probability `p_lock`, otherwise as `UniformInit`.
    UniformUnion { p_lock: f64 },
}

impl EtaDistribution {
    pub fn union() -> Self {
        Self::UniformUnion { p_lock: 0.5 }
    }

    pub fn describe(&self) -> String {
        match self {
            Self::UniformInit => "uniform_init".into(),
            Self::UniformUnion { p_lock } => format!("uniform_union(p_lock={p_lock})"),
        }
    }
}

impl AbmIntervention {
    pub fn v(&self) -> ParamVector {
        match *self {
            Self::Init { v, .. } | Self::InitLock { v, .. } => v,
        }
    }

    pub fn a(&self) -> f64 {
        match *self {
            Self::Init { a, .. } | Self::InitLock { a, .. } => a,
        }
    }

    pub fn lockdown_start(&self) -> Option<usize> {
        match *self {
            Self::Init { .. } => None,
            Self::InitLock { t_l, .. } => Some(t_l),
        }
    }

    /// Builds the post-intervention schedule `(I_0, theta_1..theta_T)`.
    pub fn apply_to_abm(&self, horizon: usize) -> Result<AbmSchedule> {
        let v = self.v();
        let mut thetas = vec![v; horizon];
        if let Some(t_l) = self.lockdown_start() {
            check_window(t_l, horizon)?;
            for t in t_l..t_l + LOCKDOWN_STEPS {
                thetas[t - 1] = v.locked_down();
            }
        }
        Ok(AbmSchedule { i0: self.a(), thetas })
    }

    /// The full assignment this intervention makes: I_0 then theta_1..theta_T.
    fn assignment(&self, horizon: usize) -> Option<(f64, Vec<ParamVector>)> {
        self.apply_to_abm(horizon).ok().map(|s| (s.i0, s.thetas))
    }

    /// Partial order on interventions.
    ///
    /// Both variants intervene on all of `theta_{1:T}` and `I_0`, so two
    /// interventions are comparable only when every assigned value agrees.
    pub fn compare(&self, other: &Self, horizon: usize) -> PartialOrdering {
        match (self.assignment(horizon), other.assignment(horizon)) {
            (Some(a), Some(b)) if a == b => PartialOrdering::Equal,
            (None, None) if self == other => PartialOrdering::Equal,
            _ => PartialOrdering::Incomparable,
        }
    }

    pub fn omega_apply(&self, f_phi: &FeedForward) -> Result<SurrogateIntervention> {
        let v = f_phi.eval_one(&self.v().as_array())?;
        let v = [v[0], v[1], v[2]];
        Ok(match *self {
            Self::Init { a, .. } => SurrogateIntervention::Init { v, a },
            Self::InitLock { a, t_l, .. } => SurrogateIntervention::InitLock { v, a, t_l },
        })
    }
}

impl From<PartialOrdering> for Option<Ordering> {
    fn from(p: PartialOrdering) -> Self {
        match p {
            PartialOrdering::Equal => Some(Ordering::Equal),
            PartialOrdering::Less => Some(Ordering::Less),
            PartialOrdering::Greater => Some(Ordering::Greater),
            PartialOrdering::Incomparable => None,
        }
    }
}

fn check_window(t_l: usize, horizon: usize) -> Result<()> {
    if !(LOCKDOWN_START_MIN..=LOCKDOWN_START_MAX).contains(&t_l) {
        return Err(Error::InvalidConfig(format!(
            "lockdown start {t_l} outside {LOCKDOWN_START_MIN}..={LOCKDOWN_START_MAX}"
        )));
    }
    let needed = t_l + LOCKDOWN_STEPS;
    if horizon < needed {
        return Err(Error::HorizonTooShort {
            horizon,
            start: t_l,
            needed,
        });
    }
    Ok(())
}

impl SurrogateIntervention {
    pub fn a(&self) -> f64 {
        match *self {
            Self::Init { a, .. } | Self::InitLock { a, .. } => a,
        }
    }

    pub fn v(&self) -> [f64; 3] {
        match *self {
            Self::Init { v, .. } | Self::InitLock { v, .. } => v,
        }
    }

    pub fn lockdown_start(&self) -> Option<usize> {
        match *self {
            Self::Init { .. } => None,
            Self::InitLock { t_l, .. } => Some(t_l),
        }
    }

    /// Surrogate schedule `theta~_1..theta~_T`.
    pub fn thetas(&self, horizon: usize) -> Result<Vec<[f64; 3]>> {
        let v = self.v();
        let mut thetas = vec![v; horizon];
        if let Some(t_l) = self.lockdown_start() {
            check_window(t_l, horizon)?;
            for t in t_l..t_l + LOCKDOWN_STEPS {
                thetas[t - 1] = [0.0, v[1], v[2]];
            }
        }
        Ok(thetas)
    }

    /// Per-step multiplicative mask applied to `v`: `(0,1,1)` inside the
    /// lockdown window, `(1,1,1)` elsewhere. Index `t - 1` holds step `t`.
    pub fn masks(&self, horizon: usize) -> Result<Vec<[f64; 3]>> {
        lockdown_masks(self.lockdown_start(), horizon)
    }
}

pub(crate) fn lockdown_masks(start: Option<usize>, horizon: usize) -> Result<Vec<[f64; 3]>> {
    let mut masks = vec![[1.0; 3]; horizon];
    if let Some(t_l) = start {
        check_window(t_l, horizon)?;
        for m in &mut masks[t_l - 1..t_l - 1 + LOCKDOWN_STEPS] {
            m[0] = 0.0;
        }
    }
    Ok(masks)
}

pub fn sample_intervention(eta: &EtaDistribution, rng: &mut RngStream) -> AbmIntervention {
    let lock = match *eta {
        EtaDistribution::UniformInit => false,
        EtaDistribution::UniformUnion { p_lock } => rng.uniform() < p_lock,
    };
    let v = ParamVector {
        alpha: rng.uniform(),
        beta: rng.uniform(),
        gamma: rng.uniform(),
    };
    let a = rng.uniform();
    if lock {
        let t_l = rng.uniform_int(LOCKDOWN_START_MIN, LOCKDOWN_START_MAX);
        AbmIntervention::InitLock { v, a, t_l }
    } else {
        AbmIntervention::Init { v, a }
    }
}

/// Flat row used by the CSV/JSON intervention formats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub kind: String,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub a: f64,
    pub t_l: i64,
}

impl From<&AbmIntervention> for InterventionRecord {
    fn from(iota: &AbmIntervention) -> Self {
        let v = iota.v();
        Self {
            kind: match iota {
                AbmIntervention::Init { .. } => "init".into(),
                AbmIntervention::InitLock { .. } => "init_lock".into(),
            },
            alpha: v.alpha,
            beta: v.beta,
            gamma: v.gamma,
            a: iota.a(),
            t_l: iota.lockdown_start().map(|t| t as i64).unwrap_or(-1),
        }
    }
}

impl TryFrom<&InterventionRecord> for AbmIntervention {
    type Error = Error;

    fn try_from(r: &InterventionRecord) -> Result<Self> {
        let v = ParamVector::new(r.alpha, r.beta, r.gamma)?;
        if !(0.0..=1.0).contains(&r.a) {
            return Err(Error::Dataset(format!("a = {} outside [0,1]", r.a)));
        }
        match (r.kind.as_str(), r.t_l) {
            ("init", -1) => Ok(Self::Init { v, a: r.a }),
            ("init_lock", t) if (LOCKDOWN_START_MIN as i64..=LOCKDOWN_START_MAX as i64).contains(&t) => {
                Ok(Self::InitLock {
                    v,
                    a: r.a,
                    t_l: t as usize,
                })
            }
            (kind, t) => Err(Error::Dataset(format!(
                "invalid intervention kind `{kind}` with t_l = {t}"
            ))),
        }
    }
}
