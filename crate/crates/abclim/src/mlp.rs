//! Finite-width MLP under an abc-parametrization.
//!
//! The trainable parameters are the pre-multiplier weights `w^l`; the
//! effective weight is `W^l = n^{-a_l} w^l` and initialization draws
//! `w^l ~ N(0, n^{-2 b_l})` entrywise. The backward pass is hand-rolled so
//! the multipliers enter gradients exactly; central finite differences are
//! the correctness oracle in the tests.
//!
//! Width sweeps probe the infinite-width predictions through coordinate
//! sizes, the feature kernel `x^L(xi) . x^L(zeta) / n`, and the (learning-
//! rate-scaled) empirical neural tangent kernel.

use crate::abc::AbcParam;
use crate::util::{fill_standard_normal, rng_stream, Mat};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use std::io::{Read, Write};

/// Pointwise activation. `Gelu { sigma }` is the smoothed relu
/// `x (erf(x/sigma) + 1)/2 + sigma exp(-x^2/sigma^2) / (2 sqrt(pi))`,
/// whose derivative is `(erf(x/sigma) + 1)/2`. Relu's derivative at 0 is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Quadratic,
    Relu,
    Tanh,
    Gelu { sigma: f64 },
}

pub const DEFAULT_GELU_SIGMA: f64 = 0.1;

impl Activation {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Activation::Identity => x,
            Activation::Quadratic => x * x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Gelu { sigma } => {
                0.5 * x * (erf(x / sigma) + 1.0)
                    + sigma * (-x * x / (sigma * sigma)).exp() / (2.0 * std::f64::consts::PI.sqrt())
            }
        }
    }

    pub fn deriv(&self, x: f64) -> f64 {
        match *self {
            Activation::Identity => 1.0,
            Activation::Quadratic => 2.0 * x,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Gelu { sigma } => 0.5 * (erf(x / sigma) + 1.0),
        }
    }

    /// Second derivative (a.e. for relu), used by forward tangents.
    pub fn second_deriv(&self, x: f64) -> f64 {
        match *self {
            Activation::Identity => 0.0,
            Activation::Quadratic => 2.0,
            Activation::Relu => 0.0,
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Gelu { sigma } => {
                (-x * x / (sigma * sigma)).exp() / (sigma * std::f64::consts::PI.sqrt())
            }
        }
    }

    /// True for activations whose nesting keeps polynomials polynomial.
    pub fn is_polynomial(&self) -> bool {
        matches!(self, Activation::Identity | Activation::Quadratic)
    }
}

/// Training loss; `prime` is the derivative in the prediction, per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Mse,
    Logistic,
}

impl Loss {
    pub fn value(&self, f: &[f64], y: &[f64]) -> f64 {
        match self {
            Loss::Mse => f
                .iter()
                .zip(y.iter())
                .map(|(fi, yi)| 0.5 * (fi - yi) * (fi - yi))
                .sum(),
            Loss::Logistic => f
                .iter()
                .zip(y.iter())
                .map(|(fi, yi)| softplus(*fi) - yi * fi)
                .sum(),
        }
    }

    pub fn prime(&self, f: &[f64], y: &[f64]) -> Vec<f64> {
        match self {
            Loss::Mse => f.iter().zip(y.iter()).map(|(fi, yi)| fi - yi).collect(),
            Loss::Logistic => f
                .iter()
                .zip(y.iter())
                .map(|(fi, yi)| sigmoid(*fi) - yi)
                .collect(),
        }
    }

    pub fn prime_scalar(&self, f: f64, y: f64) -> f64 {
        self.prime(&[f], &[y])[0]
    }

    pub fn value_scalar(&self, f: f64, y: f64) -> f64 {
        self.value(&[f], &[y])
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// A training routine: base learning rate (the LR used is `eta n^{-c}`),
/// training pairs, loss, batch size.
#[derive(Debug, Clone)]
pub struct TrainRoutine {
    pub eta: f64,
    pub data: Vec<(Vec<f64>, Vec<f64>)>,
    pub loss: Loss,
    pub batch_size: usize,
}

impl TrainRoutine {
    pub fn new(eta: f64, data: Vec<(Vec<f64>, Vec<f64>)>, loss: Loss) -> Self {
        TrainRoutine { eta, data, loss, batch_size: 1 }
    }

    /// Pair for step t, cycling through the data.
    pub fn pair(&self, t: usize) -> (&[f64], &[f64]) {
        let (xi, y) = &self.data[t % self.data.len()];
        (xi, y)
    }
}

/// Scalar-input, scalar-output routine used by the infinite-width engines
/// (they evolve the d = d_out = 1 dynamics).
#[derive(Debug, Clone)]
pub struct ScalarRoutine {
    pub eta: f64,
    pub data: Vec<(f64, f64)>,
    pub loss: Loss,
}

impl ScalarRoutine {
    pub fn new(eta: f64, data: Vec<(f64, f64)>, loss: Loss) -> Self {
        ScalarRoutine { eta, data, loss }
    }

    pub fn pair(&self, t: usize) -> (f64, f64) {
        self.data[t % self.data.len()]
    }
}

/// Forward-pass cache: pre- and post-activations per hidden layer.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub h: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
}

/// Per-layer loss gradients w.r.t. the trainable `w^l` (and bias).
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Mat>,
    pub bias: Option<Vec<f64>>,
}

impl Gradients {
    pub fn frobenius_sq(&self) -> f64 {
        let mut s: f64 = self.weights.iter().map(|g| g.frobenius_sq()).sum();
        if let Some(b) = &self.bias {
            s += b.iter().map(|v| v * v).sum::<f64>();
        }
        s
    }
}

/// Width-n MLP with abc multipliers. Bias is supported for shallow nets
/// (`L = 1`) with the exponents `a_bias = -1/2`, `b_bias = 1/2`.
#[derive(Debug, Clone)]
pub struct FiniteMlp {
    pub param: AbcParam,
    pub n: usize,
    pub d: usize,
    pub d_out: usize,
    pub activation: Activation,
    pub seed: u64,
    /// Trainable pre-multiplier weights; `weights[l-1]` is `w^l`.
    weights: Vec<Mat>,
    /// Optional shallow bias (pre-multiplier).
    bias: Option<Vec<f64>>,
    /// Init snapshot plus iid transpose copies of the middle layers, present
    /// only in decoupled-backprop mode.
    decoupled: Option<DecoupledState>,
}

#[derive(Debug, Clone)]
struct DecoupledState {
    w0: Vec<Mat>,
    wtilde: Vec<Mat>,
}

pub const BIAS_A: f64 = -0.5;
pub const BIAS_B: f64 = 0.5;

impl FiniteMlp {
    /// Sample a fresh network. Weight entries are `n^{-b_l}` times standard
    /// normals drawn from a seed-derived stream, so matched seeds across
    /// parametrizations share the same underlying normals.
    pub fn init(
        param: &AbcParam,
        n: usize,
        d: usize,
        d_out: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        Self::init_inner(param, n, d, d_out, activation, seed, false)
    }

    /// As [`FiniteMlp::init`], with a trainable bias on `h^1` (shallow only).
    pub fn init_with_bias(
        param: &AbcParam,
        n: usize,
        d: usize,
        d_out: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        Self::init_inner(param, n, d, d_out, activation, seed, true)
    }

    fn init_inner(
        param: &AbcParam,
        n: usize,
        d: usize,
        d_out: usize,
        activation: Activation,
        seed: u64,
        with_bias: bool,
    ) -> Result<Self> {
        if n == 0 || d == 0 || d_out == 0 {
            return Err(Error::InvalidArgument("dimensions must be positive".into()));
        }
        if with_bias && param.depth() != 1 {
            return Err(Error::InvalidArgument(
                "bias is supported for shallow (L = 1) nets only".into(),
            ));
        }
        let l = param.depth();
        let mut weights = Vec::with_capacity(l + 1);
        for layer in 1..=l + 1 {
            let (rows, cols) = layer_shape(layer, l, n, d, d_out);
            let mut m = Mat::zeros(rows, cols);
            let mut rng = rng_stream(seed, &[0x57, layer as u64]);
            fill_standard_normal(&mut rng, &mut m.data);
            let scale = (n as f64).powf(-param.b_f64(layer));
            m.scale(scale);
            weights.push(m);
        }
        let bias = if with_bias {
            let mut b = vec![0.0; n];
            let mut rng = rng_stream(seed, &[0x57, 0xb1a5]);
            fill_standard_normal(&mut rng, &mut b);
            let scale = (n as f64).powf(-BIAS_B);
            b.iter_mut().for_each(|v| *v *= scale);
            Some(b)
        } else {
            None
        };
        Ok(FiniteMlp {
            param: param.clone(),
            n,
            d,
            d_out,
            activation,
            seed,
            weights,
            bias,
            decoupled: None,
        })
    }

    /// Switch backprop to use fixed iid copies of the middle-layer transposes
    /// (`dx = (Wtilde + dW^T) dhbar` instead of `W_t^T dhbar`).
    pub fn enable_decoupled_backprop(&mut self, seed: u64) {
        let l = self.param.depth();
        let mut w0 = Vec::new();
        let mut wtilde = Vec::new();
        for layer in 2..=l {
            w0.push(self.weights[layer - 1].clone());
            let mut m = Mat::zeros(self.n, self.n);
            let mut rng = rng_stream(seed, &[0x7e, layer as u64]);
            fill_standard_normal(&mut rng, &mut m.data);
            m.scale((self.n as f64).powf(-self.param.b_f64(layer)));
            wtilde.push(m);
        }
        self.decoupled = Some(DecoupledState { w0, wtilde });
    }

    pub fn weights(&self, layer: usize) -> &Mat {
        &self.weights[layer - 1]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut Mat {
        &mut self.weights[layer - 1]
    }

    /// Resample layer `layer`'s weights from a fresh stream (used by the
    /// transfer experiment to discard the pretrained readout).
    pub fn reinit_layer(&mut self, layer: usize, seed: u64) {
        let mut rng = rng_stream(seed, &[0x4e, layer as u64]);
        let m = &mut self.weights[layer - 1];
        fill_standard_normal(&mut rng, &mut m.data);
        m.scale((self.n as f64).powf(-self.param.b_f64(layer)));
    }

    fn multiplier(&self, layer: usize) -> f64 {
        (self.n as f64).powf(-self.param.a_f64(layer))
    }

    /// Forward pass: `h^1 = W^1 xi (+ bias)`, `x^l = phi(h^l)`,
    /// `f = W^{L+1} x^L`.
    pub fn forward(&self, xi: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if xi.len() != self.d {
            return Err(Error::DimensionMismatch(format!(
                "input length {} != d = {}",
                xi.len(),
                self.d
            )));
        }
        let l = self.param.depth();
        let mut h = Vec::with_capacity(l);
        let mut x = Vec::with_capacity(l);
        let mut h1 = self.weights[0].matvec(xi);
        let m1 = self.multiplier(1);
        h1.iter_mut().for_each(|v| *v *= m1);
        if let Some(b) = &self.bias {
            let mb = (self.n as f64).powf(-BIAS_A);
            for (hv, bv) in h1.iter_mut().zip(b.iter()) {
                *hv += mb * bv;
            }
        }
        h.push(h1);
        for layer in 2..=l {
            let xl: Vec<f64> =
                h.last().unwrap().iter().map(|v| self.activation.value(*v)).collect();
            let mut hl = self.weights[layer - 1].matvec(&xl);
            let ml = self.multiplier(layer);
            hl.iter_mut().for_each(|v| *v *= ml);
            x.push(xl);
            h.push(hl);
        }
        let xl: Vec<f64> = h.last().unwrap().iter().map(|v| self.activation.value(*v)).collect();
        let mut f = self.weights[l].matvec(&xl);
        let mf = self.multiplier(l + 1);
        f.iter_mut().for_each(|v| *v *= mf);
        x.push(xl);
        Ok((f, ForwardCache { h, x }))
    }

    /// Backward pass seeded with `df = dloss/df`; returns gradients w.r.t.
    /// the trainable `w^l` (multipliers included).
    fn backward(&self, xi: &[f64], cache: &ForwardCache, df: &[f64]) -> Gradients {
        let l = self.param.depth();
        let mut grads: Vec<Mat> = (1..=l + 1)
            .map(|layer| {
                let (r, c) = layer_shape(layer, l, self.n, self.d, self.d_out);
                Mat::zeros(r, c)
            })
            .collect();
        let mf = self.multiplier(l + 1);
        let xl = &cache.x[l - 1];
        {
            let g = &mut grads[l];
            for i in 0..self.d_out {
                let row = g.row_mut(i);
                let s = mf * df[i];
                for (gij, xj) in row.iter_mut().zip(xl.iter()) {
                    *gij = s * xj;
                }
            }
        }
        let mut gx = self.weights[l].matvec_t(df);
        gx.iter_mut().for_each(|v| *v *= mf);
        let mut bias_grad = None;
        for layer in (1..=l).rev() {
            let ml = self.multiplier(layer);
            let hl = &cache.h[layer - 1];
            let gh: Vec<f64> = gx
                .iter()
                .zip(hl.iter())
                .map(|(g, h)| g * self.activation.deriv(*h))
                .collect();
            let prev: &[f64] = if layer == 1 { xi } else { &cache.x[layer - 2] };
            {
                let g = &mut grads[layer - 1];
                for i in 0..g.rows {
                    let s = ml * gh[i];
                    if s == 0.0 {
                        continue;
                    }
                    let row = g.row_mut(i);
                    for (gij, pj) in row.iter_mut().zip(prev.iter()) {
                        *gij = s * pj;
                    }
                }
            }
            if layer == 1 {
                if self.bias.is_some() {
                    let mb = (self.n as f64).powf(-BIAS_A);
                    bias_grad = Some(gh.iter().map(|v| mb * v).collect());
                }
                break;
            }
            gx = match &self.decoupled {
                Some(dec) => {
                    // (Wtilde + dW^T) gh, everything pre-multiplier.
                    let idx = layer - 2;
                    let mut out = dec.wtilde[idx].matvec(&gh);
                    let mut delta_t = self.weights[layer - 1].clone();
                    delta_t.add_scaled(&dec.w0[idx], -1.0);
                    let dtg = delta_t.matvec_t(&gh);
                    for (o, v) in out.iter_mut().zip(dtg.iter()) {
                        *o = (*o + v) * ml;
                    }
                    out
                }
                None => {
                    let mut out = self.weights[layer - 1].matvec_t(&gh);
                    out.iter_mut().for_each(|v| *v *= ml);
                    out
                }
            };
        }
        Gradients { weights: grads, bias: bias_grad }
    }

    /// Exact chain-rule gradients of `loss(f(xi), y)` w.r.t. every `w^l`.
    pub fn gradients(&self, xi: &[f64], y: &[f64], loss: Loss) -> Result<Gradients> {
        let (f, cache) = self.forward(xi)?;
        let df = loss.prime(&f, y);
        Ok(self.backward(xi, &cache, &df))
    }

    /// Gradients of the scalar logit itself (`d_out` must be 1).
    pub fn logit_gradients(&self, xi: &[f64]) -> Result<Gradients> {
        if self.d_out != 1 {
            return Err(Error::InvalidArgument("logit gradients need d_out = 1".into()));
        }
        let (_, cache) = self.forward(xi)?;
        Ok(self.backward(xi, &cache, &[1.0]))
    }

    /// One SGD step on a single pair: `w^l -= eta n^{-c} grad`.
    pub fn sgd_step(&mut self, xi: &[f64], y: &[f64], routine: &TrainRoutine) -> Result<()> {
        let g = self.gradients(xi, y, routine.loss)?;
        self.apply_gradients(&g, routine.eta);
        Ok(())
    }

    /// One SGD step on a batch, averaging per-example gradients.
    pub fn sgd_step_batch(
        &mut self,
        batch: &[(Vec<f64>, Vec<f64>)],
        routine: &TrainRoutine,
    ) -> Result<()> {
        let mut acc: Option<Gradients> = None;
        for (xi, y) in batch {
            let g = self.gradients(xi, y, routine.loss)?;
            match &mut acc {
                None => acc = Some(g),
                Some(a) => {
                    for (am, gm) in a.weights.iter_mut().zip(g.weights.iter()) {
                        am.add_scaled(gm, 1.0);
                    }
                    if let (Some(ab), Some(gb)) = (a.bias.as_mut(), g.bias.as_ref()) {
                        for (x, v) in ab.iter_mut().zip(gb.iter()) {
                            *x += v;
                        }
                    }
                }
            }
        }
        if let Some(mut a) = acc {
            let inv = 1.0 / batch.len() as f64;
            for m in a.weights.iter_mut() {
                m.scale(inv);
            }
            if let Some(b) = a.bias.as_mut() {
                b.iter_mut().for_each(|v| *v *= inv);
            }
            self.apply_gradients(&a, routine.eta);
        }
        Ok(())
    }

    /// `w -= eta n^{-c} g`, optionally restricted to the listed layers.
    pub fn apply_gradients(&mut self, g: &Gradients, eta: f64) {
        self.apply_gradients_masked(g, eta, None)
    }

    pub fn apply_gradients_masked(&mut self, g: &Gradients, eta: f64, layers: Option<&[usize]>) {
        let lr = eta * (self.n as f64).powf(-self.param.c_f64());
        for (idx, gm) in g.weights.iter().enumerate() {
            let layer = idx + 1;
            if let Some(mask) = layers {
                if !mask.contains(&layer) {
                    continue;
                }
            }
            self.weights[idx].add_scaled(gm, -lr);
        }
        if let (Some(b), Some(gb)) = (self.bias.as_mut(), g.bias.as_ref()) {
            let include = layers.map_or(true, |m| m.contains(&1));
            if include {
                for (x, v) in b.iter_mut().zip(gb.iter()) {
                    *x -= lr * v;
                }
            }
        }
    }

    /// Feature kernel `F(xi, zeta) = x^L(xi) . x^L(zeta) / n`.
    pub fn feature_kernel(&self, xi: &[f64], zeta: &[f64]) -> Result<f64> {
        let (_, ca) = self.forward(xi)?;
        let (_, cb) = self.forward(zeta)?;
        let xa = ca.x.last().unwrap();
        let xb = cb.x.last().unwrap();
        Ok(xa.iter().zip(xb.iter()).map(|(a, b)| a * b).sum::<f64>() / self.n as f64)
    }

    /// Empirical tangent kernel `n^{-c} <grad f(xi), grad f(zeta)>` over all
    /// trainable parameters, so that one kernel-GD step with base rate eta
    /// matches one SGD step to first order for any `c`.
    pub fn empirical_ntk(&self, xi: &[f64], zeta: &[f64]) -> Result<f64> {
        let ga = self.logit_gradients(xi)?;
        let gb = self.logit_gradients(zeta)?;
        let mut acc = 0.0;
        for (ma, mb) in ga.weights.iter().zip(gb.weights.iter()) {
            acc += ma.data.iter().zip(mb.data.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        if let (Some(ba), Some(bb)) = (ga.bias.as_ref(), gb.bias.as_ref()) {
            acc += ba.iter().zip(bb.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(acc * (self.n as f64).powf(-self.param.c_f64()))
    }

    /// Train for `t_steps` SGD steps (batching per the routine), recording
    /// probes at every step including t = 0.
    pub fn train(
        &mut self,
        routine: &TrainRoutine,
        t_steps: usize,
        probes: &Probes,
    ) -> Result<Trajectory> {
        let mut traj = Trajectory::new(probes);
        let mut cursor = 0usize;
        for t in 0..=t_steps {
            traj.record(self, routine, t, cursor)?;
            if t == t_steps {
                break;
            }
            if routine.batch_size <= 1 {
                let (xi, y) = routine.pair(cursor);
                let (xi, y) = (xi.to_vec(), y.to_vec());
                self.sgd_step(&xi, &y, routine)?;
                cursor += 1;
            } else {
                let batch: Vec<(Vec<f64>, Vec<f64>)> = (0..routine.batch_size)
                    .map(|k| {
                        let (xi, y) = routine.pair(cursor + k);
                        (xi.to_vec(), y.to_vec())
                    })
                    .collect();
                self.sgd_step_batch(&batch, routine)?;
                cursor += routine.batch_size;
            }
        }
        Ok(traj)
    }

    /// Serialize as a JSON shape header followed by little-endian f64 weights.
    pub fn save_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            param: &'a AbcParam,
            n: usize,
            d: usize,
            d_out: usize,
            activation: Activation,
            seed: u64,
            has_bias: bool,
            shapes: Vec<(usize, usize)>,
        }
        let header = Header {
            param: &self.param,
            n: self.n,
            d: self.d,
            d_out: self.d_out,
            activation: self.activation,
            seed: self.seed,
            has_bias: self.bias.is_some(),
            shapes: self.weights.iter().map(|m| (m.rows, m.cols)).collect(),
        };
        let hdr = serde_json::to_vec(&header)?;
        out.write_all(&(hdr.len() as u64).to_le_bytes())?;
        out.write_all(&hdr)?;
        for m in &self.weights {
            for v in &m.data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        if let Some(b) = &self.bias {
            for v in b {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            param: AbcParam,
            n: usize,
            d: usize,
            d_out: usize,
            activation: Activation,
            seed: u64,
            has_bias: bool,
            shapes: Vec<(usize, usize)>,
        }
        let mut len8 = [0u8; 8];
        input.read_exact(&mut len8)?;
        let hlen = u64::from_le_bytes(len8) as usize;
        let mut hbuf = vec![0u8; hlen];
        input.read_exact(&mut hbuf)?;
        let header: Header = serde_json::from_slice(&hbuf)?;
        let mut weights = Vec::with_capacity(header.shapes.len());
        let mut f8 = [0u8; 8];
        for (r, c) in &header.shapes {
            let mut m = Mat::zeros(*r, *c);
            for v in m.data.iter_mut() {
                input.read_exact(&mut f8)?;
                *v = f64::from_le_bytes(f8);
            }
            weights.push(m);
        }
        let bias = if header.has_bias {
            let mut b = vec![0.0; header.n];
            for v in b.iter_mut() {
                input.read_exact(&mut f8)?;
                *v = f64::from_le_bytes(f8);
            }
            Some(b)
        } else {
            None
        };
        Ok(FiniteMlp {
            param: header.param,
            n: header.n,
            d: header.d,
            d_out: header.d_out,
            activation: header.activation,
            seed: header.seed,
            weights,
            bias,
            decoupled: None,
        })
    }
}

fn layer_shape(layer: usize, l: usize, n: usize, d: usize, d_out: usize) -> (usize, usize) {
    if layer == 1 {
        (n, d)
    } else if layer == l + 1 {
        (d_out, n)
    } else {
        (n, n)
    }
}

/// Coordinate size `sqrt(|v|^2 / n)`: the scale of a typical entry.
pub fn coordinate_size(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyVector);
    }
    Ok((v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt())
}

/// What to record along a trajectory.
#[derive(Debug, Clone, Default)]
pub struct Probes {
    /// Inputs whose logits are recorded each step.
    pub inputs: Vec<Vec<f64>>,
    /// Pairs (i, j) into `inputs` whose feature kernel is recorded.
    pub feature_kernel_pairs: Vec<(usize, usize)>,
    /// Record coordinate sizes of `h^l_t` and `Delta h^l_t` per hidden layer.
    pub coordinate_sizes: bool,
}

/// Per-step records of a training run; always includes t = 0.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<usize>,
    pub loss: Vec<f64>,
    /// `logits[k][p][o]`: step k, probe input p, output o.
    pub logits: Vec<Vec<Vec<f64>>>,
    pub feature_kernels: Vec<Vec<f64>>,
    pub h_sizes: Vec<Vec<f64>>,
    pub dh_sizes: Vec<Vec<f64>>,
    probes: Probes,
    h0: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    fn new(probes: &Probes) -> Self {
        Trajectory {
            steps: Vec::new(),
            loss: Vec::new(),
            logits: Vec::new(),
            feature_kernels: Vec::new(),
            h_sizes: Vec::new(),
            dh_sizes: Vec::new(),
            probes: probes.clone(),
            h0: None,
        }
    }

    fn record(
        &mut self,
        net: &FiniteMlp,
        routine: &TrainRoutine,
        t: usize,
        cursor: usize,
    ) -> Result<()> {
        self.steps.push(t);
        let (xi, y) = routine.pair(cursor);
        let (f, cache) = net.forward(xi)?;
        self.loss.push(routine.loss.value(&f, y));
        let mut probe_logits = Vec::with_capacity(self.probes.inputs.len());
        for p in &self.probes.inputs {
            let (fp, _) = net.forward(p)?;
            probe_logits.push(fp);
        }
        self.logits.push(probe_logits);
        let mut fks = Vec::new();
        for (i, j) in &self.probes.feature_kernel_pairs {
            fks.push(net.feature_kernel(&self.probes.inputs[*i], &self.probes.inputs[*j])?);
        }
        self.feature_kernels.push(fks);
        if self.probes.coordinate_sizes {
            let sizes: Vec<f64> = cache.h.iter().map(|h| coordinate_size(h).unwrap()).collect();
            if self.h0.is_none() {
                self.h0 = Some(cache.h.clone());
            }
            let h0 = self.h0.as_ref().unwrap();
            let dsizes: Vec<f64> = cache
                .h
                .iter()
                .zip(h0.iter())
                .map(|(h, h0)| {
                    let d: Vec<f64> = h.iter().zip(h0.iter()).map(|(a, b)| a - b).collect();
                    coordinate_size(&d).unwrap()
                })
                .collect();
            self.h_sizes.push(sizes);
            self.dh_sizes.push(dsizes);
        }
        Ok(())
    }

    /// CSV with header `t,loss,<probe columns>`.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("t,loss");
        let n_probe = self.logits.first().map_or(0, |v| v.len());
        let d_out = self.logits.first().and_then(|v| v.first()).map_or(0, |v| v.len());
        for p in 0..n_probe {
            for o in 0..d_out {
                header.push_str(&format!(",f_probe{p}_{o}"));
            }
        }
        for (i, j) in self.probes.feature_kernel_pairs.iter() {
            header.push_str(&format!(",F_{i}_{j}"));
        }
        let n_layers = self.h_sizes.first().map_or(0, |v| v.len());
        for l in 0..n_layers {
            header.push_str(&format!(",hsize_l{}", l + 1));
        }
        for l in 0..n_layers {
            header.push_str(&format!(",dhsize_l{}", l + 1));
        }
        let mut out = header;
        out.push('\n');
        for k in 0..self.steps.len() {
            let mut row = format!("{},{}", self.steps[k], self.loss[k]);
            for p in &self.logits[k] {
                for v in p {
                    row.push_str(&format!(",{v}"));
                }
            }
            for v in &self.feature_kernels[k] {
                row.push_str(&format!(",{v}"));
            }
            if !self.h_sizes.is_empty() {
                for v in &self.h_sizes[k] {
                    row.push_str(&format!(",{v}"));
                }
                for v in &self.dh_sizes[k] {
                    row.push_str(&format!(",{v}"));
                }
            }
            out.push_str(&row);
            out.push('\n');
        }
        out
    }
}
