//! Finite-difference checks of the surrogate NLL gradient.
//!
//! The reference objective below is an independent scalar implementation of
//! the three surrogate families, generic over the number type. Evaluating it
//! on [`Central`] pairs yields `f(x + h) - f(x - h)` without the cancellation
//! that plain subtraction of two nearby objective values suffers.

use std::cell::Cell;
use std::cmp::Ordering;
use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::log_multinomial_coefficient;
use crate::interventions::lockdown_masks;
use crate::nn::FeedForwardSpec;
use crate::surrogate::{Family, TrainedPair, HIDDEN};
use crate::trainer::{batch_nll, Record};

pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn of(v: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn relu(self) -> Self;
    /// Representative value used for comparisons and stabilising shifts.
    fn value(self) -> f64;
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn relu(self) -> Self {
        self.max(0.0)
    }
    fn value(self) -> f64 {
        self
    }
}

/// A quantity evaluated at two points `x+ = mid + half` and `x- = mid - half`.
///
/// Every operation updates `half` from closed-form difference identities, so
/// `half` keeps full relative precision even when it is many orders of
/// magnitude smaller than `mid`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Central {
    pub mid: f64,
    pub half: f64,
}

impl Central {
    pub fn new(mid: f64, half: f64) -> Self {
        Self { mid, half }
    }

    pub fn plus(self) -> f64 {
        self.mid + self.half
    }

    pub fn minus(self) -> f64 {
        self.mid - self.half
    }

    fn from_ends(plus: f64, minus: f64, half: f64) -> Self {
        Self { mid: 0.5 * (plus + minus), half }
    }
}

impl Add for Central {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.mid + o.mid, self.half + o.half)
    }
}

impl Sub for Central {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.mid - o.mid, self.half - o.half)
    }
}

impl Neg for Central {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.mid, -self.half)
    }
}

impl Mul for Central {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::new(self.mid * o.mid + self.half * o.half, self.mid * o.half + self.half * o.mid)
    }
}

impl Div for Central {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let (p, m) = (o.plus(), o.minus());
        Self::from_ends(
            self.plus() / p,
            self.minus() / m,
            (self.half * o.mid - self.mid * o.half) / (p * m),
        )
    }
}

impl Scalar for Central {
    fn of(v: f64) -> Self {
        Self::new(v, 0.0)
    }
    fn exp(self) -> Self {
        let e = self.mid.exp();
        Self::new(e * self.half.cosh(), e * self.half.sinh())
    }
    fn ln(self) -> Self {
        let (p, m) = (self.plus(), self.minus());
        Self::from_ends(p.ln(), m.ln(), 0.5 * (2.0 * self.half / m).ln_1p())
    }
    fn tanh(self) -> Self {
        let (p, m) = (self.plus(), self.minus());
        Self::from_ends(p.tanh(), m.tanh(), 0.5 * (2.0 * self.half).sinh() / (p.cosh() * m.cosh()))
    }
    fn relu(self) -> Self {
        let (p, m) = (self.plus(), self.minus());
        match (p > 0.0, m > 0.0) {
            (true, true) => self,
            (false, false) => Self::of(0.0),
            _ => {
                KINK_CROSSED.with(|k| k.set(true));
                let (p, m) = (p.max(0.0), m.max(0.0));
                Self::from_ends(p, m, 0.5 * (p - m))
            }
        }
    }
    fn value(self) -> f64 {
        self.mid
    }
}

thread_local! {
    static KINK_CROSSED: Cell<bool> = const { Cell::new(false) };
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::of(1.0) / (S::of(1.0) + (-x).exp())
}

/// Cursor over a flat parameter vector in tape order.
struct Cursor<'a, S> {
    flat: &'a [S],
    at: usize,
}

impl<'a, S: Scalar> Cursor<'a, S> {
    fn take(&mut self, n: usize) -> &'a [S] {
        let s = &self.flat[self.at..self.at + n];
        self.at += n;
        s
    }
}

struct Dense<'a, S> {
    layers: Vec<(&'a [S], &'a [S], usize, usize)>,
    sigmoid_out: bool,
}

impl<'a, S: Scalar> Dense<'a, S> {
    fn read(spec: &FeedForwardSpec, c: &mut Cursor<'a, S>) -> Self {
        let layers = spec
            .sizes()
            .windows(2)
            .map(|w| {
                let wt = c.take(w[0] * w[1]);
                let b = c.take(w[1]);
                (wt, b, w[0], w[1])
            })
            .collect();
        Self { layers, sigmoid_out: spec.output() == crate::nn::OutputActivation::Sigmoid }
    }

    fn apply(&self, x: &[S]) -> Vec<S> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, &(w, b, fin, fout)) in self.layers.iter().enumerate() {
            let mut y: Vec<S> = b.to_vec();
            for (k, &xk) in h.iter().enumerate().take(fin) {
                for j in 0..fout {
                    y[j] = y[j] + xk * w[k * fout + j];
                }
            }
            for v in &mut y {
                *v = if l < last {
                    v.relu()
                } else if self.sigmoid_out {
                    sigmoid(*v)
                } else {
                    *v
                };
            }
            h = y;
        }
        h
    }
}

struct GruRef<'a, S> {
    w_i: &'a [S],
    w_h: &'a [S],
    b_i: &'a [S],
    b_h: &'a [S],
    input: usize,
}

impl<'a, S: Scalar> GruRef<'a, S> {
    fn step(&self, x: &[S], h: &[S]) -> Vec<S> {
        let hd = h.len();
        let pre = |w: &[S], v: &[S], col: usize| -> S {
            let mut acc = S::of(0.0);
            for (k, &vk) in v.iter().enumerate() {
                acc = acc + vk * w[k * 3 * hd + col];
            }
            acc
        };
        (0..hd)
            .map(|j| {
                let z = sigmoid(pre(self.w_i, x, j) + self.b_i[j] + pre(self.w_h, h, j) + self.b_h[j]);
                let r = sigmoid(pre(self.w_i, x, hd + j) + self.b_i[hd + j] + pre(self.w_h, h, hd + j) + self.b_h[hd + j]);
                let n = (pre(self.w_i, x, 2 * hd + j)
                    + self.b_i[2 * hd + j]
                    + r * (pre(self.w_h, h, 2 * hd + j) + self.b_h[2 * hd + j]))
                    .tanh();
                (S::of(1.0) - z) * h[j] + z * n
            })
            .collect()
    }
}

fn log_softmax<S: Scalar>(o: &[S]) -> Vec<S> {
    let m = S::of(o.iter().map(|v| v.value()).max_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal)).unwrap_or(0.0));
    let mut s = S::of(0.0);
    for &v in o {
        s = s + (v - m).exp();
    }
    let lse = m + s.ln();
    o.iter().map(|&v| v - lse).collect()
}

/// Mean NLL of `records` under `pair` with parameters replaced by `flat`
/// (`psi ++ phi`, tape order).
pub fn reference_nll<S: Scalar>(pair: &TrainedPair, flat: &[S], records: &[Record]) -> Result<S> {
    if flat.len() != pair.parameter_count() {
        return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), pair.parameter_count())));
    }
    let family = pair.family();
    let horizon = pair.model.horizon();
    let mut c = Cursor { flat, at: 0 };
    let gru = family.gru_spec().map(|g| GruRef {
        w_i: c.take(g.input * 3 * g.hidden),
        w_h: c.take(g.hidden * 3 * g.hidden),
        b_i: c.take(3 * g.hidden),
        b_h: c.take(3 * g.hidden),
        input: g.input,
    });
    let head = family.head_spec().map(|s| Dense::read(&s, &mut c));
    let omega = Dense::read(&family.omega_spec(), &mut c);

    let mut total = S::of(0.0);
    for rec in records {
        let y = &rec.trajectory;
        let a = rec.intervention.a();
        let v_in: Vec<S> = rec.intervention.v().as_array().iter().map(|&x| S::of(x)).collect();
        let v_hat = omega.apply(&v_in);
        let masks = lockdown_masks(rec.intervention.lockdown_start(), horizon)?;
        let theta = |t: usize| -> [S; 3] {
            let m = masks[t - 1];
            [v_hat[0] * S::of(m[0]), v_hat[1] * S::of(m[1]), v_hat[2] * S::of(m[2])]
        };
        let mut log_probs: Vec<Vec<S>> = Vec::with_capacity(horizon + 1);
        let ode = || {
            let mut z = [S::of(1.0 - a), S::of(a), S::of(0.0)];
            let mut out = vec![z];
            for t in 1..=horizon {
                let [al, be, ga] = theta(t);
                let (s, i, r) = (z[0], z[1], z[2]);
                z = [
                    s + ga * r - al * i * s,
                    i + al * i * s - be * i,
                    r + be * i - ga * r,
                ];
                out.push(z);
            }
            out
        };
        match family {
            Family::Lode => {
                for z in ode() {
                    log_probs.push(z.iter().map(|&p| p.ln()).collect());
                }
            }
            Family::LodeRnn => {
                let (gru, head) = (gru.as_ref().expect("gru"), head.as_ref().expect("head"));
                let mut h = vec![S::of(0.0); HIDDEN];
                for z in ode() {
                    h = gru.step(&z[..gru.input], &h);
                    log_probs.push(log_softmax(&head.apply(&h)));
                }
            }
            Family::Lrnn => {
                let (gru, head) = (gru.as_ref().expect("gru"), head.as_ref().expect("head"));
                log_probs.push(vec![S::of((1.0 - a).ln()), S::of(a.ln()), S::of(f64::NEG_INFINITY)]);
                let mut h = vec![S::of(0.0); HIDDEN];
                h[0] = S::of(1.0 - a);
                h[1] = S::of(a);
                for t in 1..=horizon {
                    h = gru.step(&theta(t), &h);
                    log_probs.push(log_softmax(&head.apply(&h)));
                }
            }
        }
        let mut ll = S::of(0.0);
        for (counts, lp) in y.counts.iter().zip(&log_probs) {
            ll = ll + S::of(log_multinomial_coefficient(counts));
            for k in 0..3 {
                if counts[k] > 0 {
                    ll = ll + S::of(counts[k] as f64) * lp[k];
                }
            }
        }
        if !ll.value().is_finite() {
            return Err(Error::Evaluation("reference objective is not finite".into()));
        }
        total = total - ll;
    }
    Ok(total / S::of(records.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateMismatch {
    pub index: usize,
    pub analytic: f64,
    pub finite_difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub family: Family,
    pub records: usize,
    pub coordinates: usize,
    /// Tape objective minus the reference objective at the base point.
    pub value_gap: f64,
    pub max_relative_error: f64,
    /// Largest absolute error among coordinates below the absolute threshold.
    pub max_small_abs_error: f64,
    pub failures: Vec<CoordinateMismatch>,
    /// Coordinates whose `[x - h, x + h]` interval moves some ReLU input across
    /// zero; these use a one-sided difference on the side without a crossing.
    pub one_sided: Vec<usize>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub const REL_TOLERANCE: f64 = 1e-4;
pub const ABS_THRESHOLD: f64 = 1e-8;

/// Step used for coordinate value `x`.
pub fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

struct Slope {
    slope: f64,
    one_sided: bool,
}

/// Central difference at coordinate `k`, or a one-sided one when the central
/// interval contains a ReLU kink. `None` when both sides contain one.
fn smooth_difference(
    pair: &TrainedPair,
    point: &mut [Central],
    k: usize,
    x: f64,
    h: f64,
    records: &[Record],
) -> Result<Option<Slope>> {
    let attempts = [(x, h, 2.0 * h, false), (x + 0.5 * h, 0.5 * h, h, true), (x - 0.5 * h, 0.5 * h, h, true)];
    let mut found = None;
    for (mid, half, width, one_sided) in attempts {
        point[k] = Central::new(mid, half);
        KINK_CROSSED.with(|c| c.set(false));
        let diff = reference_nll(pair, point, records)?.half;
        if !KINK_CROSSED.with(|c| c.get()) {
            found = Some(Slope { slope: 2.0 * diff / width, one_sided });
            break;
        }
    }
    point[k] = Central::of(x);
    Ok(found)
}

/// Compares the tape gradient of the mean NLL with central differences of
/// the reference objective on every coordinate.
pub fn check_gradients(pair: &TrainedPair, records: &[Record]) -> Result<GradCheckReport> {
    let refs: Vec<&Record> = records.iter().collect();
    let tape = batch_nll(pair, &refs)?;
    if tape.excluded > 0 {
        return Err(Error::Evaluation("gradient check needs records with positive likelihood".into()));
    }
    let base = pair.flat();
    let mut point: Vec<Central> = base.iter().map(|&x| Central::of(x)).collect();
    let value_gap = tape.value - reference_nll(pair, &point, records)?.value();
    let mut report = GradCheckReport {
        family: pair.family(),
        records: records.len(),
        coordinates: base.len(),
        value_gap,
        max_relative_error: 0.0,
        max_small_abs_error: 0.0,
        failures: Vec::new(),
        one_sided: Vec::new(),
    };
    for k in 0..base.len() {
        let h = fd_step(base[k]);
        let Some(fd) = smooth_difference(pair, &mut point, k, base[k], h, records)? else {
            report.failures.push(CoordinateMismatch {
                index: k,
                analytic: tape.gradient[k],
                finite_difference: f64::NAN,
            });
            continue;
        };
        if fd.one_sided {
            report.one_sided.push(k);
        }
        let fd = fd.slope;
        let a = tape.gradient[k];
        let ok = if a.abs() < ABS_THRESHOLD {
            let err = (a - fd).abs();
            report.max_small_abs_error = report.max_small_abs_error.max(err);
            err < ABS_THRESHOLD
        } else {
            let rel = (a - fd).abs() / a.abs();
            report.max_relative_error = report.max_relative_error.max(rel);
            rel < REL_TOLERANCE
        };
        if !ok {
            report.failures.push(CoordinateMismatch { index: k, analytic: a, finite_difference: fd });
        }
    }
    Ok(report)
}
