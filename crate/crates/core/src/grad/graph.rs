//! Tape for reverse-mode differentiation over small dense tensors.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over
//! the node list visits every consumer before its inputs. Operations are
//! coarse (affine maps, a fused GRU cell, a fused SIRS Euler step, a
//! multinomial log-pmf) to keep tapes short for the surrogate models.

use super::multinomial::{log_multinomial_coefficient, log_pmf_unchecked};
use super::tensor::{matmul, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    LogSoftmax(Var),
    ClampSimplex(Var),
    /// Fused gate update; `gi`/`gh` are `[B, 3H]` pre-activations ordered
    /// (update, reset, candidate).
    GruCell { gi: Var, gh: Var, h: Var },
    SirsEuler { z: Var, theta: Var, dt: f64 },
    MultinomialLogPmf { logp: Var, counts: Vec<[u32; 3]> },
    WeightedSum { x: Var, weights: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    differentiated: bool,
}

/// Gradients of a scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err(what: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    /// `x W + b` with `x: [B, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.shape().len() != 2 || xv.cols() != wv.rows() || bv.len() != wv.cols() {
            return Err(Error::Shape(format!(
                "linear: x {:?}, w {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let (rows, inner, out) = (xv.rows(), wv.rows(), wv.cols());
        let mut y = matmul(xv.data(), wv.data(), rows, inner, out);
        for r in 0..rows {
            for (yv, b) in y[r * out..(r + 1) * out].iter_mut().zip(bv.data()) {
                *yv += b;
            }
        }
        let value = Tensor::matrix(rows, out, y)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(shape_err(what, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if !xv.same_shape(&c) {
            return Err(shape_err("mul_const", xv, &c));
        }
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulConst(x, c)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    /// Natural log; `ln 0 = -inf`.
    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        self.push(value, Op::Log(x))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::LogSoftmax(x))
    }

    /// Row-wise `max(x, 0) / sum(max(x, 0))`.
    pub fn clamp_simplex(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out: Vec<f64> = xv.data().iter().map(|v| v.max(0.0)).collect();
        for row in out.chunks_mut(cols) {
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::ClampSimplex(x))
    }

    /// Gated recurrent update `h' = (1 - z) h + z n` with
    /// `z = s(gi_z + gh_z)`, `r = s(gi_r + gh_r)`, `n = tanh(gi_n + r gh_n)`.
    pub fn gru_cell(&mut self, gi: Var, gh: Var, h: Var) -> Result<Var> {
        let (giv, ghv, hv) = (self.value(gi), self.value(gh), self.value(h));
        let hidden = hv.cols();
        if !giv.same_shape(ghv) || giv.cols() != 3 * hidden || giv.rows() != hv.rows() {
            return Err(Error::Shape(format!(
                "gru_cell: gi {:?}, gh {:?}, h {:?}",
                giv.shape(),
                ghv.shape(),
                hv.shape()
            )));
        }
        let rows = hv.rows();
        let mut out = vec![0.0; rows * hidden];
        for r in 0..rows {
            let (gir, ghr, hr) = (giv.row(r), ghv.row(r), hv.row(r));
            for j in 0..hidden {
                let z = sigmoid(gir[j] + ghr[j]);
                let rg = sigmoid(gir[hidden + j] + ghr[hidden + j]);
                let n = (gir[2 * hidden + j] + rg * ghr[2 * hidden + j]).tanh();
                out[r * hidden + j] = (1.0 - z) * hr[j] + z * n;
            }
        }
        let value = Tensor::matrix(rows, hidden, out)?;
        Ok(self.push(value, Op::GruCell { gi, gh, h }))
    }

    /// One explicit Euler step of the SIRS system for each row of `z`
    /// (proportions) under rates `theta = (alpha, beta, gamma)`.
    pub fn sirs_euler(&mut self, z: Var, theta: Var, dt: f64) -> Result<Var> {
        let (zv, tv) = (self.value(z), self.value(theta));
        if !zv.same_shape(tv) || zv.cols() != 3 {
            return Err(shape_err("sirs_euler", zv, tv));
        }
        let mut out = zv.data().to_vec();
        for (row, th) in out.chunks_mut(3).zip(tv.data().chunks(3)) {
            let next = crate::ode::euler_update([row[0], row[1], row[2]], [th[0], th[1], th[2]], dt);
            row.copy_from_slice(&next);
        }
        let value = Tensor::new(zv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::SirsEuler { z, theta, dt }))
    }

    /// Per-row multinomial log-pmf of `counts` under row log-probabilities.
    /// Output has shape `[B]`.
    pub fn multinomial_log_pmf(&mut self, logp: Var, counts: Vec<[u32; 3]>) -> Result<Var> {
        let lv = self.value(logp);
        if lv.cols() != 3 || lv.rows() != counts.len() {
            return Err(Error::Shape(format!(
                "multinomial: log-probs {:?} for {} count rows",
                lv.shape(),
                counts.len()
            )));
        }
        let out = counts
            .iter()
            .enumerate()
            .map(|(r, c)| log_pmf_unchecked(c, lv.row(r)))
            .collect();
        Ok(self.push(Tensor::vector(out), Op::MultinomialLogPmf { logp, counts }))
    }

    /// `sum_i w_i x_i` over all elements; zero-weight entries are skipped even
    /// when they are infinite.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::Shape(format!(
                "weighted_sum: {} values, {} weights",
                xv.len(),
                weights.len()
            )));
        }
        let s = xv
            .data()
            .iter()
            .zip(&weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|(v, w)| v * w)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    /// Reverse sweep from the scalar `loss`. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(loss.0));
        }
        if self.differentiated {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.differentiated = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.nodes[loss.0].value.shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, d: Tensor| match &mut grads[v.0] {
            Some(t) => t.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        let like = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape().to_vec(), data).expect("shape");
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, inner, out) = (xv.rows(), wv.rows(), wv.cols());
                let gd = g.data();
                let mut dx = vec![0.0; rows * inner];
                let mut dw = vec![0.0; inner * out];
                let mut db = vec![0.0; out];
                for r in 0..rows {
                    let grow = &gd[r * out..(r + 1) * out];
                    for (d, gv) in db.iter_mut().zip(grow) {
                        *d += gv;
                    }
                    for k in 0..inner {
                        let wrow = &wv.data()[k * out..(k + 1) * out];
                        dx[r * inner + k] = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        let xv_k = xv.data()[r * inner + k];
                        if xv_k != 0.0 {
                            for (d, gv) in dw[k * out..(k + 1) * out].iter_mut().zip(grow) {
                                *d += xv_k * gv;
                            }
                        }
                    }
                }
                if !matches!(self.nodes[x.0].op, Op::Const) {
                    acc(*x, like(xv, dx));
                }
                acc(*w, like(wv, dw));
                acc(*b, like(self.value(*b), db));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(bv.data()).map(|(g, b)| g * b).collect();
                let db = g.data().iter().zip(av.data()).map(|(g, a)| g * a).collect();
                acc(*a, like(av, da));
                acc(*b, like(bv, db));
            }
            Op::MulConst(x, c) => {
                let d = g.data().iter().zip(c.data()).map(|(g, c)| g * c).collect();
                acc(*x, like(c, d));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*x, like(xv, d));
            }
            Op::Sigmoid(x) => {
                let d = g.data().iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                acc(*x, like(y, d));
            }
            Op::Tanh(x) => {
                let d = g.data().iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                acc(*x, like(y, d));
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &x)| if g == 0.0 { 0.0 } else { g / x })
                    .collect();
                acc(*x, like(xv, d));
            }
            Op::LogSoftmax(x) => {
                let cols = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((drow, grow), yrow) in d
                    .chunks_mut(cols)
                    .zip(g.data().chunks(cols))
                    .zip(y.data().chunks(cols))
                {
                    let gs: f64 = grow.iter().sum();
                    for k in 0..cols {
                        drow[k] = grow[k] - yrow[k].exp() * gs;
                    }
                }
                acc(*x, like(y, d));
            }
            Op::ClampSimplex(x) => {
                let xv = self.value(*x);
                let cols = y.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let xr = xv.row(r);
                    let yr = y.row(r);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let s: f64 = xr.iter().map(|v| v.max(0.0)).sum();
                    let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for k in 0..cols {
                        if xr[k] > 0.0 {
                            d[r * cols + k] = (gr[k] - gy) / s;
                        }
                    }
                }
                acc(*x, like(xv, d));
            }
            Op::GruCell { gi, gh, h } => {
                let (giv, ghv, hv) = (self.value(*gi), self.value(*gh), self.value(*h));
                let hidden = hv.cols();
                let rows = hv.rows();
                let mut dgi = vec![0.0; giv.len()];
                let mut dgh = vec![0.0; ghv.len()];
                let mut dh = vec![0.0; hv.len()];
                for r in 0..rows {
                    let (gir, ghr, hr) = (giv.row(r), ghv.row(r), hv.row(r));
                    let base = r * 3 * hidden;
                    for j in 0..hidden {
                        let gy = g.data()[r * hidden + j];
                        if gy == 0.0 {
                            continue;
                        }
                        let z = sigmoid(gir[j] + ghr[j]);
                        let rg = sigmoid(gir[hidden + j] + ghr[hidden + j]);
                        let n = (gir[2 * hidden + j] + rg * ghr[2 * hidden + j]).tanh();
                        dh[r * hidden + j] += gy * (1.0 - z);
                        let dz = gy * (n - hr[j]) * z * (1.0 - z);
                        let dn = gy * z * (1.0 - n * n);
                        let dr = dn * ghr[2 * hidden + j] * rg * (1.0 - rg);
                        dgi[base + j] = dz;
                        dgh[base + j] = dz;
                        dgi[base + hidden + j] = dr;
                        dgh[base + hidden + j] = dr;
                        dgi[base + 2 * hidden + j] = dn;
                        dgh[base + 2 * hidden + j] = dn * rg;
                    }
                }
                acc(*gi, like(giv, dgi));
                acc(*gh, like(ghv, dgh));
                if !matches!(self.nodes[h.0].op, Op::Const) {
                    acc(*h, like(hv, dh));
                }
            }
            Op::SirsEuler { z, theta, dt } => {
                let (zv, tv) = (self.value(*z), self.value(*theta));
                let mut dz = vec![0.0; zv.len()];
                let mut dth = vec![0.0; tv.len()];
                for r in 0..zv.rows() {
                    let (s, i, rr) = (zv.get(r, 0), zv.get(r, 1), zv.get(r, 2));
                    let (a, b, c) = (tv.get(r, 0), tv.get(r, 1), tv.get(r, 2));
                    let (gs, gi, gr) = (g.get(r, 0), g.get(r, 1), g.get(r, 2));
                    // s' = s + dt(c r - a i s), i' = i + dt(a i s - b i), r' = r + dt(b i - c r)
                    dz[3 * r] = gs * (1.0 - dt * a * i) + gi * dt * a * i;
                    dz[3 * r + 1] = gs * (-dt * a * s) + gi * (1.0 + dt * (a * s - b)) + gr * dt * b;
                    dz[3 * r + 2] = gs * dt * c + gr * (1.0 - dt * c);
                    dth[3 * r] = (gi - gs) * dt * i * s;
                    dth[3 * r + 1] = (gr - gi) * dt * i;
                    dth[3 * r + 2] = (gs - gr) * dt * rr;
                }
                if !matches!(self.nodes[z.0].op, Op::Const) {
                    acc(*z, like(zv, dz));
                }
                if !matches!(self.nodes[theta.0].op, Op::Const) {
                    acc(*theta, like(tv, dth));
                }
            }
            Op::MultinomialLogPmf { logp, counts } => {
                let lv = self.value(*logp);
                let mut d = vec![0.0; lv.len()];
                for (r, c) in counts.iter().enumerate() {
                    let gy = g.data()[r];
                    for k in 0..3 {
                        if c[k] > 0 {
                            d[3 * r + k] = gy * c[k] as f64;
                        }
                    }
                }
                if !matches!(self.nodes[logp.0].op, Op::Const) {
                    acc(*logp, like(lv, d));
                }
            }
            Op::WeightedSum { x, weights } => {
                let gy = g.item();
                let xv = self.value(*x);
                acc(*x, like(xv, weights.iter().map(|w| w * gy).collect()));
            }
        }
    }
}

/// `ln N! - sum ln c!` for a batch, exposed for tests that rebuild log-pmfs.
pub fn log_coefficients(counts: &[[u32; 3]]) -> Vec<f64> {
    counts.iter().map(log_multinomial_coefficient).collect()
}
