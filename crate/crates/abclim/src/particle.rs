//! Monte-Carlo particle representation of the infinite-width limit.
//!
//! Each of the M particles carries one joint sample of every limit random
//! variable in play; expectations become sample means with O(M^{-1/2}) error.
//! The depth-2 engines maintain a Gaussian history per matrix side: new
//! matrix-output Gaussians are drawn conditionally on all earlier ones
//! through a running Cholesky factor whose covariance entries are plug-in
//! estimates from the same ensemble. The transpose-correlation corrections
//! (the Z-dot terms) come from per-particle forward-mode tangents with the
//! estimated scalars held frozen, and their coefficients are sample means of
//! the symbolic partials.
//!
//! Probe inputs must be declared up front so the Gaussian histories cover
//! every (step, input) evaluation point; there is no API for adding probes
//! mid-run. Nonsmooth activations (relu) use almost-everywhere derivatives
//! in the tangent pass; results for them carry that caveat.
//!
//! All randomness is counter-based per particle, and every reduction runs in
//! a fixed tree order, so sequential and parallel runs agree bitwise.

use crate::mlp::{Activation, Loss, ScalarRoutine};
use crate::util::{counter_normal, mean_stderr, min_eigenvalue_symmetric, tree_sum, Mat};
use crate::{Error, Result};
use rayon::prelude::*;

/// Sample mean and stderr of per-particle values with fixed reduction order.
fn estimate_slice(values: &[f64]) -> (f64, f64) {
    mean_stderr(values)
}

fn mean_slice(values: &[f64]) -> f64 {
    tree_sum(values) / values.len() as f64
}

/// Shallow (depth-1) ensemble: slots `Z^{U_t}` and `Z^{nV_t}` per particle.
#[derive(Debug, Clone)]
pub struct ShallowEnsemble {
    pub m: usize,
    pub seed: u64,
    pub t: usize,
    u: Vec<f64>,
    nv: Vec<f64>,
    /// Transients from the most recent step.
    h: Vec<f64>,
    x: Vec<f64>,
}

impl ShallowEnsemble {
    /// Initialize `Z^{U_0}`, `Z^{nV_0}` as independent standard normals,
    /// one counter-based stream per particle.
    pub fn init_ensemble(m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("particle count must be >= 1".into()));
        }
        let u: Vec<f64> =
            (0..m).into_par_iter().map(|p| counter_normal(seed, &[0x01, p as u64])).collect();
        let nv: Vec<f64> =
            (0..m).into_par_iter().map(|p| counter_normal(seed, &[0x02, p as u64])).collect();
        Ok(ShallowEnsemble { m, seed, t: 0, u, nv, h: vec![0.0; m], x: vec![0.0; m] })
    }

    /// Estimate the current logit limit on an arbitrary input.
    pub fn probe(&self, xi: f64, act: Activation) -> (f64, f64) {
        let vals: Vec<f64> = self
            .u
            .par_iter()
            .zip(self.nv.par_iter())
            .map(|(u, nv)| nv * act.value(xi * u))
            .collect();
        estimate_slice(&vals)
    }

    /// One SGD step of the shallow limit: computes the `f` estimate at the
    /// current state, then updates every particle with the plug-in loss
    /// derivative. Returns (f mean, f stderr).
    pub fn shallow_step(
        &mut self,
        xi: f64,
        y: f64,
        eta: f64,
        act: Activation,
        loss: Loss,
    ) -> (f64, f64) {
        self.h.par_iter_mut().zip(self.u.par_iter()).for_each(|(h, u)| *h = xi * u);
        self.x.par_iter_mut().zip(self.h.par_iter()).for_each(|(x, h)| *x = act.value(*h));
        let prods: Vec<f64> =
            self.nv.par_iter().zip(self.x.par_iter()).map(|(nv, x)| nv * x).collect();
        let (f_mean, f_stderr) = estimate_slice(&prods);
        let chi = loss.prime_scalar(f_mean, y);
        let (u, nv, h, x) = (&mut self.u, &mut self.nv, &self.h, &self.x);
        u.par_iter_mut()
            .zip(nv.par_iter_mut())
            .zip(h.par_iter().zip(x.par_iter()))
            .for_each(|((u, nv), (h, x))| {
                let u_new = *u - eta * chi * xi * *nv * act.deriv(*h);
                let nv_new = *nv - eta * chi * x;
                *u = u_new;
                *nv = nv_new;
            });
        self.t += 1;
        (f_mean, f_stderr)
    }

    /// Named per-particle slots for [`ShallowEnsemble::estimate`].
    pub fn slot(&self, name: &str) -> Result<&[f64]> {
        match name {
            "u" => Ok(&self.u),
            "nv" => Ok(&self.nv),
            "h" => Ok(&self.h),
            "x" => Ok(&self.x),
            other => Err(Error::UnknownSlot(other.to_string())),
        }
    }

    /// Sample mean and stderr of `f(slots...)` over particles, with a fixed
    /// order-independent reduction.
    pub fn estimate<F: Fn(&[f64]) -> f64>(&self, slots: &[&str], f: F) -> Result<(f64, f64)> {
        let views: Vec<&[f64]> = slots.iter().map(|s| self.slot(s)).collect::<Result<_>>()?;
        let vals: Vec<f64> = (0..self.m)
            .map(|p| {
                let args: Vec<f64> = views.iter().map(|v| v[p]).collect();
                f(&args)
            })
            .collect();
        Ok(estimate_slice(&vals))
    }

    /// Binary snapshot: little-endian f64 slots behind a JSON header.
    pub fn dump<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        let header = serde_json::json!({
            "m": self.m, "seed": self.seed, "t": self.t, "slots": ["u", "nv"],
        });
        let hdr = serde_json::to_vec(&header)?;
        out.write_all(&(hdr.len() as u64).to_le_bytes())?;
        out.write_all(&hdr)?;
        for slot in [&self.u, &self.nv] {
            for v in slot {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

/// Gaussian history: an ordered list of generated matrix-output Gaussians
/// with estimated covariance, its jittered Cholesky factor, and the backing
/// per-particle standard-normal draws.
pub struct GaussianHistory {
    pub labels: Vec<String>,
    /// Estimated covariance, row per label.
    pub cov: Vec<Vec<f64>>,
    /// Cholesky rows (row i has i+1 entries).
    pub chol: Vec<Vec<f64>>,
    /// Per-label, per-particle epsilon draws backing the construction.
    pub eps: Vec<Vec<f64>>,
    /// Per-label, per-particle hat-Z values.
    pub draws: Vec<Vec<f64>>,
    m: usize,
    seed: u64,
    salt: u64,
}

impl GaussianHistory {
    pub fn new(m: usize, seed: u64, salt: u64) -> Self {
        GaussianHistory {
            labels: Vec::new(),
            cov: Vec::new(),
            chol: Vec::new(),
            eps: Vec::new(),
            draws: Vec::new(),
            m,
            seed,
            salt,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Append a label with covariance row `cov_row` against existing labels
    /// (last entry is the variance); re-factor and draw per-particle hat-Z
    /// values conditionally via one fresh epsilon per particle.
    ///
    /// `eps_override`, when set to (label index, particle, delta), shifts one
    /// backing epsilon; the replay path of the tangent tests uses it.
    pub fn extend(
        &mut self,
        label: String,
        cov_row: &[f64],
        eps_override: Option<(usize, usize, f64)>,
    ) -> Result<&[f64]> {
        let k = self.len();
        assert_eq!(cov_row.len(), k + 1, "cov row must include the diagonal");
        // Forward substitution against the current factor.
        let mut w = vec![0.0; k];
        for i in 0..k {
            let mut acc = cov_row[i];
            for j in 0..i {
                acc -= self.chol[i][j] * w[j];
            }
            w[i] = acc / self.chol[i][i];
        }
        let wsq: f64 = w.iter().map(|v| v * v).sum();
        let mut pivot_sq = cov_row[k] - wsq;
        if pivot_sq <= 0.0 {
            // Variance-scaled jitter ladder before declaring non-PSD.
            let scale = cov_row[k].abs().max(1.0);
            let mut jitter = 1e-10 * scale;
            while cov_row[k] + jitter - wsq <= 0.0 {
                jitter *= 10.0;
                if jitter > 1e-6 * scale {
                    let mut full = self.cov.clone();
                    for (i, row) in full.iter_mut().enumerate() {
                        row.push(cov_row[i]);
                    }
                    full.push(cov_row.to_vec());
                    return Err(Error::NotPsd(min_eigenvalue_symmetric(&Mat::from_rows(&full))));
                }
            }
            pivot_sq = cov_row[k] + jitter - wsq;
        }
        let mut row = w;
        row.push(pivot_sq.sqrt());
        let idx = k;
        let (seed, salt) = (self.seed, self.salt);
        let mut eps_new: Vec<f64> = (0..self.m)
            .into_par_iter()
            .map(|p| counter_normal(seed, &[salt, idx as u64, p as u64]))
            .collect();
        if let Some((l, p, delta)) = eps_override {
            if l == idx {
                eps_new[p] += delta;
            }
        }
        let draws: Vec<f64> = (0..self.m)
            .into_par_iter()
            .map(|p| {
                let mut acc = row[idx] * eps_new[p];
                for (s, c) in row[..idx].iter().enumerate() {
                    acc += c * self.eps[s][p];
                }
                acc
            })
            .collect();
        // Apply any override aimed at an older epsilon retroactively: callers
        // set overrides before the run, so older labels were already shifted.
        self.labels.push(label);
        for (i, r) in self.cov.iter_mut().enumerate() {
            r.push(cov_row[i]);
        }
        self.cov.push(cov_row.to_vec());
        self.chol.push(row);
        self.eps.push(eps_new);
        self.draws.push(draws);
        Ok(&self.draws[idx])
    }
}

/// Whether the depth-2 backward pass uses an independent transpose copy or
/// the true transpose (with its Z-dot correction).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth2Mode {
    Decoupled,
    Coupled,
}

/// Configuration for a depth-2 particle run.
#[derive(Debug, Clone)]
pub struct Depth2Config {
    pub m: usize,
    pub seed: u64,
    pub mode: Depth2Mode,
    pub act: Activation,
    /// Probe inputs, declared up front.
    pub probes: Vec<f64>,
    /// Maximum number of SGD steps the ensemble will take (sizes the tangent
    /// direction space).
    pub t_max: usize,
    /// Include the current step's forward draw in the transpose Z-dot sum
    /// (the general program-order rule; nonzero only for activations with a
    /// nonvanishing second derivative). Disabled, the sum stops at r < t.
    pub zdot_current: bool,
}

impl Depth2Config {
    pub fn new(m: usize, seed: u64, mode: Depth2Mode, act: Activation) -> Self {
        Depth2Config { m, seed, mode, act, probes: Vec::new(), t_max: 4, zdot_current: true }
    }
}

/// Per-step output of the depth-2 engine.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub f_mean: f64,
    pub f_stderr: f64,
    pub chi: f64,
    /// (mean, stderr) per probe input.
    pub probe_logits: Vec<(f64, f64)>,
    /// Z-dot coefficients on `dhbar_r` in the training forward pass.
    pub theta_fwd: Vec<f64>,
    /// Z-dot coefficients on `x_s` in the backward pass.
    pub theta_bwd: Vec<f64>,
}

/// Depth-2 particle ensemble implementing the partially-decoupled and the
/// fully-coupled limit recursions.
pub struct DepthTwoEnsemble {
    pub cfg: Depth2Config,
    pub t: usize,
    u: Vec<f64>,
    nv: Vec<f64>,
    /// Tangents of u w.r.t. the backward draws (m x t_max, row-major).
    tan_u: Vec<f64>,
    /// Tangents of nv w.r.t. the training forward draws (m x t_max).
    tan_nv: Vec<f64>,
    pub hist_fwd: GaussianHistory,
    pub hist_bwd: GaussianHistory,
    /// Per forward label: lower-layer activation values (m).
    x_label: Vec<Vec<f64>>,
    /// Training-step index per forward label.
    label_train: Vec<Option<usize>>,
    /// Per training step: x values and their backward tangents.
    x_train: Vec<Vec<f64>>,
    tan_x_train: Vec<Vec<f64>>,
    /// Per backward label: dhbar values and their forward tangents.
    dhbar: Vec<Vec<f64>>,
    tan_dhbar: Vec<Vec<f64>>,
    chis: Vec<f64>,
    /// Recorded or replayed scalar estimates (see `scalar`).
    tape: ScalarTape,
    /// Pending epsilon override for the tangent finite-difference test:
    /// (history kind: 0 fwd / 1 bwd, label, particle, delta).
    eps_override: Option<(u8, usize, usize, f64)>,
}

enum ScalarTape {
    Record(Vec<f64>),
    Replay(Vec<f64>, usize),
}

impl DepthTwoEnsemble {
    pub fn new(cfg: Depth2Config) -> Result<Self> {
        if cfg.m == 0 {
            return Err(Error::InvalidArgument("particle count must be >= 1".into()));
        }
        let m = cfg.m;
        let u: Vec<f64> =
            (0..m).into_par_iter().map(|p| counter_normal(cfg.seed, &[0x01, p as u64])).collect();
        let nv: Vec<f64> =
            (0..m).into_par_iter().map(|p| counter_normal(cfg.seed, &[0x02, p as u64])).collect();
        let tangents = cfg.mode == Depth2Mode::Coupled;
        let tan_len = if tangents { m * cfg.t_max } else { 0 };
        Ok(DepthTwoEnsemble {
            hist_fwd: GaussianHistory::new(m, cfg.seed, 0xF0),
            hist_bwd: GaussianHistory::new(m, cfg.seed, 0xB0),
            cfg,
            t: 0,
            u,
            nv,
            tan_u: vec![0.0; tan_len],
            tan_nv: vec![0.0; tan_len],
            x_label: Vec::new(),
            label_train: Vec::new(),
            x_train: Vec::new(),
            tan_x_train: Vec::new(),
            dhbar: Vec::new(),
            tan_dhbar: Vec::new(),
            chis: Vec::new(),
            tape: ScalarTape::Record(Vec::new()),
            eps_override: None,
        })
    }

    /// Freeze all scalar estimates to a previously recorded tape (tangent
    /// finite-difference testing: symbolic partials treat scalars as
    /// constants, so the perturbed replay must too).
    pub fn replay_scalars(&mut self, tape: Vec<f64>) {
        self.tape = ScalarTape::Replay(tape, 0);
    }

    pub fn recorded_scalars(&self) -> Vec<f64> {
        match &self.tape {
            ScalarTape::Record(v) => v.clone(),
            ScalarTape::Replay(v, _) => v.clone(),
        }
    }

    pub fn set_eps_override(&mut self, bwd: bool, label: usize, particle: usize, delta: f64) {
        self.eps_override = Some((if bwd { 1 } else { 0 }, label, particle, delta));
    }

    fn scalar(&mut self, computed: f64) -> f64 {
        match &mut self.tape {
            ScalarTape::Record(v) => {
                v.push(computed);
                computed
            }
            ScalarTape::Replay(v, i) => {
                let out = v[*i];
                *i += 1;
                out
            }
        }
    }

    fn coupled(&self) -> bool {
        self.cfg.mode == Depth2Mode::Coupled
    }

    pub fn tangent_u(&self, particle: usize, dir: usize) -> f64 {
        self.tan_u[particle * self.cfg.t_max + dir]
    }

    pub fn x_train_value(&self, s: usize, particle: usize) -> f64 {
        self.x_train[s][particle]
    }

    pub fn tangent_x_train(&self, s: usize, particle: usize, dir: usize) -> f64 {
        self.tan_x_train[s][particle * self.cfg.t_max + dir]
    }

    /// Forward-evaluate the lower layer on `zeta` and extend the forward
    /// history; returns (x values, hbar values, backward-tangents of x,
    /// forward-tangents of hbar, theta coefficients).
    #[allow(clippy::type_complexity)]
    fn forward_input(
        &mut self,
        zeta: f64,
        eta: f64,
        is_train: bool,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let m = self.cfg.m;
        let t_max = self.cfg.t_max;
        let act = self.cfg.act;
        let coupled = self.coupled();
        // h = zeta u; x = phi(h); tan_bwd(x) = phi'(h) zeta tan_bwd(u).
        let h: Vec<f64> = self.u.par_iter().map(|u| zeta * u).collect();
        let x: Vec<f64> = h.par_iter().map(|h| act.value(*h)).collect();
        let mut tan_x = vec![0.0; if coupled { m * t_max } else { 0 }];
        if coupled {
            tan_x
                .par_chunks_mut(t_max)
                .zip(h.par_iter())
                .zip(self.tan_u.par_chunks(t_max))
                .for_each(|((tx, h), tu)| {
                    let d = act.deriv(*h) * zeta;
                    for (a, b) in tx.iter_mut().zip(tu.iter()) {
                        *a = d * b;
                    }
                });
        }
        // Covariance row against existing forward labels (plug-in estimates).
        let mut cov_row = Vec::with_capacity(self.hist_fwd.len() + 1);
        for old in self.x_label.iter() {
            let prods: Vec<f64> =
                x.par_iter().zip(old.par_iter()).map(|(a, b)| a * b).collect();
            let v = mean_slice(&prods);
            cov_row.push(v);
        }
        let sq: Vec<f64> = x.par_iter().map(|a| a * a).collect();
        cov_row.push(mean_slice(&sq));
        for v in cov_row.iter_mut() {
            *v = self.scalar(*v);
        }
        let over = self.eps_override.and_then(|(kind, l, p, d)| {
            if kind == 0 {
                Some((l, p, d))
            } else {
                None
            }
        });
        let label = format!("Wx[{}]({})", self.t, zeta);
        self.hist_fwd.extend(label, &cov_row, over)?;
        let zhat = self.hist_fwd.draws.last().unwrap().clone();
        // hbar = zhat + sum_r theta_r dhbar_r - eta sum_s chi_s E[x_s x] dhbar_s.
        let mut theta_fwd = Vec::new();
        if coupled && !self.dhbar.is_empty() {
            for r in 0..self.dhbar.len() {
                let means: Vec<f64> = tan_x.chunks(t_max).map(|c| c[r]).collect();
                let th = self.scalar(mean_slice(&means));
                theta_fwd.push(th);
            }
        }
        let mut coef = vec![0.0; self.dhbar.len()];
        for (s, chi_s) in self.chis.iter().enumerate() {
            let lbl = self
                .label_train
                .iter()
                .position(|v| *v == Some(s))
                .expect("training label registered");
            coef[s] = -eta * chi_s * cov_row[lbl];
        }
        for (r, th) in theta_fwd.iter().enumerate() {
            coef[r] += th;
        }
        let mut hbar = zhat;
        for (s, c) in coef.iter().enumerate() {
            if *c == 0.0 {
                continue;
            }
            let dh = &self.dhbar[s];
            hbar.par_iter_mut().zip(dh.par_iter()).for_each(|(h, d)| *h += c * d);
        }
        // tan_fwd(hbar): one-hot on this draw (training labels only) plus the
        // dhbar tangents weighted by the same coefficients.
        let mut tan_hbar = vec![0.0; if coupled && is_train { m * t_max } else { 0 }];
        if coupled && is_train {
            let dir = self.x_train.len(); // this step's training fwd index
            tan_hbar.par_chunks_mut(t_max).for_each(|c| c[dir] = 1.0);
            for (s, c) in coef.iter().enumerate() {
                if *c == 0.0 {
                    continue;
                }
                let td = &self.tan_dhbar[s];
                tan_hbar
                    .par_chunks_mut(t_max)
                    .zip(td.par_chunks(t_max))
                    .for_each(|(a, b)| {
                        for (x, y) in a.iter_mut().zip(b.iter()) {
                            *x += c * y;
                        }
                    });
            }
        }
        Ok((x, hbar, tan_x, tan_hbar, theta_fwd))
    }

    /// One SGD step of the depth-2 limit on the pair `(xi, y)`.
    pub fn step(&mut self, xi: f64, y: f64, eta: f64, loss: Loss) -> Result<StepStats> {
        if self.t >= self.cfg.t_max {
            return Err(Error::StepCap { steps: self.t + 1, cap: self.cfg.t_max });
        }
        let m = self.cfg.m;
        let t_max = self.cfg.t_max;
        let act = self.cfg.act;
        let coupled = self.coupled();
        // Training input forward.
        let (x_t, hbar_t, tan_x_t, tan_hbar_t, theta_fwd) =
            self.forward_input(xi, eta, true)?;
        let xbar_t: Vec<f64> = hbar_t.par_iter().map(|h| act.value(*h)).collect();
        let prods: Vec<f64> =
            self.nv.par_iter().zip(xbar_t.par_iter()).map(|(a, b)| a * b).collect();
        let (f_raw, f_stderr) = estimate_slice(&prods);
        let f_mean = self.scalar(f_raw);
        self.x_label.push(x_t.clone());
        self.label_train.push(Some(self.x_train.len()));
        // Probe forwards.
        let probes = self.cfg.probes.clone();
        let mut probe_logits = Vec::with_capacity(probes.len());
        for zeta in probes {
            let (x_p, hbar_p, _, _, _) = self.forward_input(zeta, eta, false)?;
            let xbar_p: Vec<f64> = hbar_p.par_iter().map(|h| act.value(*h)).collect();
            let pr: Vec<f64> =
                self.nv.par_iter().zip(xbar_p.par_iter()).map(|(a, b)| a * b).collect();
            let (pm, ps) = estimate_slice(&pr);
            let pm = self.scalar(pm);
            probe_logits.push((pm, ps));
            self.x_label.push(x_p);
            self.label_train.push(None);
        }
        let chi = loss.prime_scalar(f_mean, y);
        // Backward pass at the training point.
        // dhbar_t = phi'(hbar) nv; tangents via product rule.
        let dhbar_t: Vec<f64> = hbar_t
            .par_iter()
            .zip(self.nv.par_iter())
            .map(|(h, nv)| act.deriv(*h) * nv)
            .collect();
        let mut tan_dhbar_t = vec![0.0; if coupled { m * t_max } else { 0 }];
        if coupled {
            tan_dhbar_t
                .par_chunks_mut(t_max)
                .enumerate()
                .for_each(|(p, c)| {
                    let h = hbar_t[p];
                    let nv = self.nv[p];
                    let d2 = act.second_deriv(h) * nv;
                    let d1 = act.deriv(h);
                    for (q, cv) in c.iter_mut().enumerate() {
                        *cv = d2 * tan_hbar_t[p * t_max + q] + d1 * self.tan_nv[p * t_max + q];
                    }
                });
        }
        // Backward history extension.
        let mut cov_row = Vec::with_capacity(self.hist_bwd.len() + 1);
        for old in self.dhbar.iter() {
            let prods: Vec<f64> =
                dhbar_t.par_iter().zip(old.par_iter()).map(|(a, b)| a * b).collect();
            cov_row.push(mean_slice(&prods));
        }
        let sq: Vec<f64> = dhbar_t.par_iter().map(|a| a * a).collect();
        cov_row.push(mean_slice(&sq));
        for v in cov_row.iter_mut() {
            *v = self.scalar(*v);
        }
        let over = self.eps_override.and_then(|(kind, l, p, d)| {
            if kind == 1 {
                Some((l, p, d))
            } else {
                None
            }
        });
        let label = format!("Wtdhbar[{}]", self.t);
        self.hist_bwd.extend(label, &cov_row, over)?;
        let zhat_b = self.hist_bwd.draws.last().unwrap().clone();
        // Z-dot for the transpose: theta'_s = E d(dhbar_t)/d(hatZ^{Wx_s}),
        // over training forward draws s = 0..=t.
        let mut theta_bwd = Vec::new();
        if coupled {
            let upper = if self.cfg.zdot_current { self.t + 1 } else { self.t };
            for s in 0..upper {
                let means: Vec<f64> = tan_dhbar_t.chunks(t_max).map(|c| c[s]).collect();
                let th = self.scalar(mean_slice(&means));
                theta_bwd.push(th);
            }
        }
        // dx = zhat_b + sum theta'_s x_s - eta sum chi_s E[dhbar_s dhbar_t] x_s.
        let mut coef = vec![0.0; self.x_train.len() + 1];
        for (s, chi_s) in self.chis.iter().enumerate() {
            coef[s] = -eta * chi_s * cov_row[s];
        }
        for (s, th) in theta_bwd.iter().enumerate() {
            coef[s] += th;
        }
        let mut dx = zhat_b;
        for (s, c) in coef.iter().enumerate() {
            if *c == 0.0 {
                continue;
            }
            let xs: &[f64] = if s < self.x_train.len() { &self.x_train[s] } else { &x_t };
            dx.par_iter_mut().zip(xs.par_iter()).for_each(|(a, b)| *a += c * b);
        }
        // tan_bwd(dx) = e_t + sum_s coef_s tan_bwd(x_s).
        let mut tan_dx = vec![0.0; if coupled { m * t_max } else { 0 }];
        if coupled {
            let dir = self.t;
            tan_dx.par_chunks_mut(t_max).for_each(|c| c[dir] = 1.0);
            for (s, c) in coef.iter().enumerate() {
                if *c == 0.0 {
                    continue;
                }
                let ts: &[f64] = if s < self.tan_x_train.len() {
                    &self.tan_x_train[s]
                } else {
                    &tan_x_t
                };
                tan_dx
                    .par_chunks_mut(t_max)
                    .zip(ts.par_chunks(t_max))
                    .for_each(|(a, b)| {
                        for (x, y) in a.iter_mut().zip(b.iter()) {
                            *x += c * y;
                        }
                    });
            }
        }
        // dh = phi'(h_t) dx with h_t = xi u; updates for u, nv.
        let u = &mut self.u;
        let nv = &mut self.nv;
        let dh: Vec<f64> = u
            .par_iter()
            .zip(dx.par_iter())
            .map(|(uv, dxv)| act.deriv(xi * uv) * dxv)
            .collect();
        if coupled {
            // tan(dh) = phi''(h) xi tan(u) dx + phi'(h) tan(dx);
            // tan(u') = tan(u) - eta chi xi tan(dh);
            // tan(nv') = tan(nv) - eta chi tan(xbar_t),
            //   tan(xbar_t) = phi'(hbar) tan(hbar).
            let tan_u = &mut self.tan_u;
            tan_u
                .par_chunks_mut(t_max)
                .enumerate()
                .for_each(|(p, tu)| {
                    let h = xi * u[p];
                    let d2 = act.second_deriv(h) * xi;
                    let d1 = act.deriv(h);
                    for (q, tuq) in tu.iter_mut().enumerate() {
                        let tan_dh = d2 * *tuq * dx[p] + d1 * tan_dx[p * t_max + q];
                        *tuq -= eta * chi * xi * tan_dh;
                    }
                });
            let tan_nv = &mut self.tan_nv;
            tan_nv
                .par_chunks_mut(t_max)
                .enumerate()
                .for_each(|(p, tn)| {
                    let dphi = act.deriv(hbar_t[p]);
                    for (q, tnq) in tn.iter_mut().enumerate() {
                        *tnq -= eta * chi * dphi * tan_hbar_t[p * t_max + q];
                    }
                });
        }
        u.par_iter_mut()
            .zip(dh.par_iter())
            .for_each(|(uv, dhv)| *uv -= eta * chi * xi * dhv);
        nv.par_iter_mut()
            .zip(xbar_t.par_iter())
            .for_each(|(nvv, xbv)| *nvv -= eta * chi * xbv);
        self.x_train.push(x_t);
        if coupled {
            self.tan_x_train.push(tan_x_t);
            self.tan_dhbar.push(tan_dhbar_t);
        }
        self.dhbar.push(dhbar_t);
        self.chis.push(chi);
        self.t += 1;
        Ok(StepStats { f_mean, f_stderr, chi, probe_logits, theta_fwd, theta_bwd })
    }

    /// Current-state logit estimate on a declared probe is available from the
    /// last [`StepStats`]; this evaluates `E[Z^{nV} phi(zeta Z^{U})]`-style
    /// slot expressions instead.
    pub fn slot(&self, name: &str) -> Result<&[f64]> {
        if let Some(rest) = name.strip_prefix("x_train:") {
            let idx: usize = rest
                .parse()
                .map_err(|_| Error::UnknownSlot(name.to_string()))?;
            return self
                .x_train
                .get(idx)
                .map(|v| v.as_slice())
                .ok_or_else(|| Error::UnknownSlot(name.to_string()));
        }
        if let Some(rest) = name.strip_prefix("dhbar:") {
            let idx: usize = rest
                .parse()
                .map_err(|_| Error::UnknownSlot(name.to_string()))?;
            return self
                .dhbar
                .get(idx)
                .map(|v| v.as_slice())
                .ok_or_else(|| Error::UnknownSlot(name.to_string()));
        }
        match name {
            "u" => Ok(&self.u),
            "nv" => Ok(&self.nv),
            other => Err(Error::UnknownSlot(other.to_string())),
        }
    }

    pub fn estimate<F: Fn(&[f64]) -> f64>(&self, slots: &[&str], f: F) -> Result<(f64, f64)> {
        let views: Vec<&[f64]> = slots.iter().map(|s| self.slot(s)).collect::<Result<_>>()?;
        let vals: Vec<f64> = (0..self.cfg.m)
            .map(|p| {
                let args: Vec<f64> = views.iter().map(|v| v[p]).collect();
                f(&args)
            })
            .collect();
        Ok(estimate_slice(&vals))
    }

    /// Binary snapshot of the persistent slots (JSON header + LE f64).
    pub fn dump<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        let mut slots: Vec<String> = vec!["u".into(), "nv".into()];
        for s in 0..self.x_train.len() {
            slots.push(format!("x_train:{s}"));
        }
        for s in 0..self.dhbar.len() {
            slots.push(format!("dhbar:{s}"));
        }
        let header = serde_json::json!({
            "m": self.cfg.m, "seed": self.cfg.seed, "t": self.t, "slots": slots,
        });
        let hdr = serde_json::to_vec(&header)?;
        out.write_all(&(hdr.len() as u64).to_le_bytes())?;
        out.write_all(&hdr)?;
        for name in &slots {
            for v in self.slot(name)? {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

/// Particle trajectory for the drivers: per-step f estimate with stderr, the
/// plug-in chi, and probe estimates.
#[derive(Debug, Clone)]
pub struct ParticleTrajectory {
    pub f_train: Vec<f64>,
    pub f_stderr: Vec<f64>,
    pub chi: Vec<f64>,
    pub loss: Vec<f64>,
    pub probe_logits: Vec<Vec<f64>>,
    pub probe_stderr: Vec<Vec<f64>>,
}

/// Run the shallow limit for `t_records` recorded steps (t_records - 1
/// updates), recording the training-point estimate before each update.
pub fn run_shallow(
    m: usize,
    seed: u64,
    act: Activation,
    routine: &ScalarRoutine,
    t_records: usize,
    probes: &[f64],
) -> Result<ParticleTrajectory> {
    let mut ens = ShallowEnsemble::init_ensemble(m, seed)?;
    let mut out = ParticleTrajectory {
        f_train: Vec::new(),
        f_stderr: Vec::new(),
        chi: Vec::new(),
        loss: Vec::new(),
        probe_logits: Vec::new(),
        probe_stderr: Vec::new(),
    };
    for t in 0..t_records {
        let (xi, y) = routine.pair(t);
        let (fm, fs) = ens.probe(xi, act);
        out.f_train.push(fm);
        out.f_stderr.push(fs);
        out.loss.push(routine.loss.value_scalar(fm, y));
        let mut pl = Vec::new();
        let mut ps = Vec::new();
        for &p in probes {
            let (a, b) = ens.probe(p, act);
            pl.push(a);
            ps.push(b);
        }
        out.probe_logits.push(pl);
        out.probe_stderr.push(ps);
        if t + 1 == t_records {
            break;
        }
        let (_, _) = ens.shallow_step(xi, y, routine.eta, act, routine.loss);
        out.chi.push(routine.loss.prime_scalar(fm, y));
    }
    Ok(out)
}

/// Average `blocks` independent runs; the stderr across block means is an
/// honest error bar for the whole trajectory, feedback through the plug-in
/// loss derivative included (a single ensemble's `std/sqrt(M)` understates
/// that part).
fn combine_blocks(blocks: Vec<ParticleTrajectory>) -> ParticleTrajectory {
    let b = blocks.len();
    let t_len = blocks[0].f_train.len();
    let n_probe = blocks[0].probe_logits.first().map_or(0, |v| v.len());
    let mut out = ParticleTrajectory {
        f_train: Vec::with_capacity(t_len),
        f_stderr: Vec::with_capacity(t_len),
        chi: Vec::new(),
        loss: Vec::new(),
        probe_logits: Vec::new(),
        probe_stderr: Vec::new(),
    };
    for t in 0..t_len {
        let vals: Vec<f64> = blocks.iter().map(|tr| tr.f_train[t]).collect();
        let (mean, se) = mean_stderr(&vals);
        out.f_train.push(mean);
        out.f_stderr.push(se);
        let losses: Vec<f64> = blocks.iter().map(|tr| tr.loss[t]).collect();
        out.loss.push(tree_sum(&losses) / b as f64);
        let mut pl = Vec::with_capacity(n_probe);
        let mut ps = Vec::with_capacity(n_probe);
        for p in 0..n_probe {
            let vals: Vec<f64> = blocks.iter().map(|tr| tr.probe_logits[t][p]).collect();
            let (mean, se) = mean_stderr(&vals);
            pl.push(mean);
            ps.push(se);
        }
        out.probe_logits.push(pl);
        out.probe_stderr.push(ps);
        if t < t_len - 1 {
            let vals: Vec<f64> = blocks.iter().map(|tr| tr.chi[t]).collect();
            out.chi.push(tree_sum(&vals) / b as f64);
        }
    }
    out
}

/// Blocked shallow run: `m_total` particles split over `blocks` independent
/// sub-ensembles.
pub fn run_shallow_blocked(
    m_total: usize,
    blocks: usize,
    seed: u64,
    act: Activation,
    routine: &ScalarRoutine,
    t_records: usize,
    probes: &[f64],
) -> Result<ParticleTrajectory> {
    let m = (m_total / blocks).max(1);
    let runs: Vec<ParticleTrajectory> = (0..blocks)
        .map(|b| run_shallow(m, seed.wrapping_add(b as u64), act, routine, t_records, probes))
        .collect::<Result<_>>()?;
    Ok(combine_blocks(runs))
}

/// Blocked depth-2 run; see [`run_shallow_blocked`].
#[allow(clippy::too_many_arguments)]
pub fn run_depth2_blocked(
    m_total: usize,
    blocks: usize,
    seed: u64,
    mode: Depth2Mode,
    act: Activation,
    routine: &ScalarRoutine,
    t_records: usize,
    probes: &[f64],
) -> Result<ParticleTrajectory> {
    let m = (m_total / blocks).max(1);
    let runs: Vec<ParticleTrajectory> = (0..blocks)
        .map(|b| {
            run_depth2(m, seed.wrapping_add(b as u64), mode, act, routine, t_records, probes)
        })
        .collect::<Result<_>>()?;
    Ok(combine_blocks(runs))
}

/// Run a depth-2 limit for `t_records` recorded steps (t_records - 1 updates).
pub fn run_depth2(
    m: usize,
    seed: u64,
    mode: Depth2Mode,
    act: Activation,
    routine: &ScalarRoutine,
    t_records: usize,
    probes: &[f64],
) -> Result<ParticleTrajectory> {
    let updates = t_records.saturating_sub(1);
    let mut ens = DepthTwoEnsemble::new(Depth2Config {
        m,
        seed,
        mode,
        act,
        probes: probes.to_vec(),
        // Sized for one extra forward evaluation at the final record.
        t_max: updates + 1,
        zdot_current: true,
    })?;
    let mut out = ParticleTrajectory {
        f_train: Vec::new(),
        f_stderr: Vec::new(),
        chi: Vec::new(),
        loss: Vec::new(),
        probe_logits: Vec::new(),
        probe_stderr: Vec::new(),
    };
    for t in 0..t_records {
        let (xi, y) = routine.pair(t);
        // A final no-update evaluation reuses step() with eta sign irrelevant:
        // we always step, but only record the pre-update estimates.
        let stats = ens.step(xi, y, routine.eta, routine.loss)?;
        out.f_train.push(stats.f_mean);
        out.f_stderr.push(stats.f_stderr);
        out.loss.push(routine.loss.value_scalar(stats.f_mean, y));
        out.probe_logits.push(stats.probe_logits.iter().map(|v| v.0).collect());
        out.probe_stderr.push(stats.probe_logits.iter().map(|v| v.1).collect());
        if t < updates {
            out.chi.push(stats.chi);
        }
    }
    Ok(out)
}
