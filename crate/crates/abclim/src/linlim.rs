//! Shallow linear network in the maximal-update parametrization: the finite
//! width-n form and its exact infinite-width twin in (d + d_out)-dimensional
//! coefficient space. Aside from initialization and the hidden size, the two
//! SGD loops are identical, including bias handling (with the alpha
//! multiplier), global gradient clipping, and weight decay.
//!
//! [`lin1lp_run`] is an independent second route to the same limit through
//! the (A, B, C, D) coefficient recurrence; the tests hold the two routes to
//! 1e-12 of each other.

use crate::mlp::Loss;
use crate::util::{fill_standard_normal, rng_stream, Mat};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Hyperparameters shared by the finite and coefficient-space nets.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinHyper {
    pub sigma_u: f64,
    pub sigma_v: f64,
    /// Bias multiplier; `alpha = 0` freezes the bias (its gradient is zero).
    pub alpha: f64,
    pub eta: f64,
    /// Global gradient-clip threshold; `f64::INFINITY` disables clipping.
    pub clip_g: f64,
    /// Weight-decay coefficient.
    pub decay_gamma: f64,
}

impl LinHyper {
    pub fn plain(eta: f64) -> Self {
        LinHyper {
            sigma_u: 1.0,
            sigma_v: 1.0,
            alpha: 0.0,
            eta,
            clip_g: f64::INFINITY,
            decay_gamma: 0.0,
        }
    }
}

/// Batched forward/backward/step interface shared by the finite and
/// coefficient-space nets (and by the meta-learning driver).
pub trait LinearModel: Clone + Send {
    /// Logits for a batch of inputs (rows of `xi`).
    fn forward_batch(&self, xi: &Mat) -> Result<Mat>;
    /// Raw (pre-clip) gradient direction, as produced by the backward pass.
    fn gradient(&self, xi: &Mat, y: &Mat, loss: Loss) -> Result<LinGrad>;
    /// `params += eta * rho * d - eta * gamma * params`, with `rho` the
    /// caller-chosen clip factor.
    fn apply(&mut self, d: &LinGrad, eta: f64, rho: f64, gamma: f64);
    fn hyper(&self) -> &LinHyper;

    /// One SGD step with the model's own hyperparameters: clip then step.
    fn sgd_step(&mut self, xi: &Mat, y: &Mat, loss: Loss) -> Result<()> {
        let h = *self.hyper();
        let d = self.gradient(xi, y, loss)?;
        let rho = clip_factor(&d, h.alpha, h.clip_g);
        self.apply(&d, h.eta, rho, h.decay_gamma);
        Ok(())
    }
}

/// Gradient direction (du, dv, db) in either representation.
#[derive(Debug, Clone)]
pub struct LinGrad {
    pub du: Mat,
    pub dv: Mat,
    pub db: Vec<f64>,
}

impl LinGrad {
    /// Clip norm `sqrt(|du|_F^2 + |dv|_F^2 + |db/alpha|^2)`.
    pub fn clip_norm(&self, alpha: f64) -> f64 {
        let mut g = self.du.frobenius_sq() + self.dv.frobenius_sq();
        if alpha > 0.0 {
            g += self.db.iter().map(|v| (v / alpha) * (v / alpha)).sum::<f64>();
        }
        g.sqrt()
    }

    pub fn add_scaled(&mut self, other: &LinGrad, s: f64) {
        self.du.add_scaled(&other.du, s);
        self.dv.add_scaled(&other.dv, s);
        for (a, b) in self.db.iter_mut().zip(other.db.iter()) {
            *a += s * b;
        }
    }
}

pub fn clip_factor(d: &LinGrad, alpha: f64, clip_g: f64) -> f64 {
    if !clip_g.is_finite() {
        return 1.0;
    }
    let g = d.clip_norm(alpha);
    if g > clip_g {
        clip_g / g
    } else {
        1.0
    }
}

/// Finite width-n shallow linear net `f(xi) = v (u xi + alpha beta)` with the
/// sqrt-n multipliers cancelled.
#[derive(Debug, Clone)]
pub struct LinearNet {
    pub n: usize,
    pub d: usize,
    pub d_out: usize,
    /// u: n x d.
    pub u: Mat,
    /// v: d_out x n.
    pub v: Mat,
    /// beta: length n, initialized to zero.
    pub b: Vec<f64>,
    pub hyper: LinHyper,
}

impl LinearNet {
    pub fn init(n: usize, d: usize, d_out: usize, hyper: LinHyper, seed: u64) -> Result<Self> {
        if n == 0 || d == 0 || d_out == 0 {
            return Err(Error::InvalidArgument("dimensions must be positive".into()));
        }
        let scale = 1.0 / (n as f64).sqrt();
        let mut u = Mat::zeros(n, d);
        let mut rng = rng_stream(seed, &[0x57, 1]);
        fill_standard_normal(&mut rng, &mut u.data);
        u.scale(hyper.sigma_u * scale);
        let mut v = Mat::zeros(d_out, n);
        let mut rng = rng_stream(seed, &[0x57, 2]);
        fill_standard_normal(&mut rng, &mut v.data);
        v.scale(hyper.sigma_v * scale);
        Ok(LinearNet { n, d, d_out, u, v, b: vec![0.0; n], hyper })
    }

    fn hidden(&self, xi: &Mat) -> Mat {
        // H = Xi u^T + b, rows are batch entries.
        let mut h = Mat::zeros(xi.rows, self.n);
        for r in 0..xi.rows {
            let mut hv = self.u.matvec(xi.row(r));
            for (a, b) in hv.iter_mut().zip(self.b.iter()) {
                *a += b;
            }
            h.row_mut(r).copy_from_slice(&hv);
        }
        h
    }
}

impl LinearModel for LinearNet {
    fn forward_batch(&self, xi: &Mat) -> Result<Mat> {
        if xi.cols != self.d {
            return Err(Error::DimensionMismatch(format!(
                "input cols {} != d = {}",
                xi.cols, self.d
            )));
        }
        let h = self.hidden(xi);
        let mut f = Mat::zeros(xi.rows, self.d_out);
        for r in 0..xi.rows {
            let fv = self.v.matvec(h.row(r));
            f.row_mut(r).copy_from_slice(&fv);
        }
        Ok(f)
    }

    fn gradient(&self, xi: &Mat, y: &Mat, loss: Loss) -> Result<LinGrad> {
        let f = self.forward_batch(xi)?;
        if y.rows != f.rows || y.cols != f.cols {
            return Err(Error::DimensionMismatch("label shape".into()));
        }
        let h = self.hidden(xi);
        // chi: B x d_out.
        let mut chi = Mat::zeros(f.rows, f.cols);
        for r in 0..f.rows {
            let c = loss.prime(f.row(r), y.row(r));
            chi.row_mut(r).copy_from_slice(&c);
        }
        // du = -v^T chi^T Xi (n x d)
        let vt_chit = {
            // (v^T chi^T): n x B
            let mut m = Mat::zeros(self.n, chi.rows);
            for r in 0..chi.rows {
                let col = self.v.matvec_t(chi.row(r));
                for i in 0..self.n {
                    *m.at_mut(i, r) = col[i];
                }
            }
            m
        };
        let mut du = vt_chit.matmul(xi);
        du.scale(-1.0);
        // dv = -chi^T H (d_out x n)
        let mut dv = chi.transpose().matmul(&h);
        dv.scale(-1.0);
        // db = -alpha^2 (1^T chi) v  (length n)
        let alpha = self.hyper.alpha;
        let mut db = vec![0.0; self.n];
        if alpha != 0.0 {
            let mut colsum = vec![0.0; chi.cols];
            for r in 0..chi.rows {
                for (cs, cv) in colsum.iter_mut().zip(chi.row(r).iter()) {
                    *cs += cv;
                }
            }
            let vsum = self.v.matvec_t(&colsum);
            for (dbi, vi) in db.iter_mut().zip(vsum.iter()) {
                *dbi = -alpha * alpha * vi;
            }
        }
        Ok(LinGrad { du, dv, db })
    }

    fn apply(&mut self, d: &LinGrad, eta: f64, rho: f64, gamma: f64) {
        // param += eta rho d - eta gamma param (decay acts on the old value).
        self.u.scale(1.0 - eta * gamma);
        self.u.add_scaled(&d.du, eta * rho);
        self.v.scale(1.0 - eta * gamma);
        self.v.add_scaled(&d.dv, eta * rho);
        for (b, db) in self.b.iter_mut().zip(d.db.iter()) {
            *b = *b * (1.0 - eta * gamma) + eta * rho * db;
        }
    }

    fn hyper(&self) -> &LinHyper {
        &self.hyper
    }
}

/// Infinite-width shallow linear net in coefficient space: state lives in
/// `d + d_out` coordinates with the diagonal initialization
/// `uu^T = (sigma_u I, 0)`, `vv = (0, sigma_v I)`, `bb = 0`.
#[derive(Debug, Clone)]
pub struct CoeffNet {
    pub d: usize,
    pub d_out: usize,
    /// uu: (d + d_out) x d.
    pub uu: Mat,
    /// vv: d_out x (d + d_out).
    pub vv: Mat,
    /// bb: length d + d_out.
    pub bb: Vec<f64>,
    pub hyper: LinHyper,
}

pub fn init_coeff(d: usize, d_out: usize, hyper: LinHyper) -> Result<CoeffNet> {
    if d == 0 || d_out == 0 {
        return Err(Error::InvalidArgument("dimensions must be positive".into()));
    }
    if hyper.sigma_u < 0.0 || hyper.sigma_v < 0.0 {
        return Err(Error::InvalidArgument("init scales must be nonnegative".into()));
    }
    let k = d + d_out;
    let mut uu = Mat::zeros(k, d);
    for i in 0..d {
        *uu.at_mut(i, i) = hyper.sigma_u;
    }
    let mut vv = Mat::zeros(d_out, k);
    for i in 0..d_out {
        *vv.at_mut(i, d + i) = hyper.sigma_v;
    }
    Ok(CoeffNet { d, d_out, uu, vv, bb: vec![0.0; k], hyper })
}

impl CoeffNet {
    fn hidden(&self, xi: &Mat) -> Mat {
        let k = self.d + self.d_out;
        let mut h = Mat::zeros(xi.rows, k);
        for r in 0..xi.rows {
            let mut hv = self.uu.matvec(xi.row(r));
            for (a, b) in hv.iter_mut().zip(self.bb.iter()) {
                *a += b;
            }
            h.row_mut(r).copy_from_slice(&hv);
        }
        h
    }

    /// Gram entry between the embeddings `u xi + b` of two inputs, computed in
    /// coefficient space.
    pub fn embedding_dot(&self, xi: &[f64], zeta: &[f64]) -> f64 {
        let mut a = self.uu.matvec(xi);
        let mut b = self.uu.matvec(zeta);
        for (av, bv) in a.iter_mut().zip(self.bb.iter()) {
            *av += bv;
        }
        for (bv, cv) in b.iter_mut().zip(self.bb.iter()) {
            *bv += cv;
        }
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }
}

impl LinearModel for CoeffNet {
    fn forward_batch(&self, xi: &Mat) -> Result<Mat> {
        if xi.cols != self.d {
            return Err(Error::DimensionMismatch(format!(
                "input cols {} != d = {}",
                xi.cols, self.d
            )));
        }
        let h = self.hidden(xi);
        let mut f = Mat::zeros(xi.rows, self.d_out);
        for r in 0..xi.rows {
            let fv = self.vv.matvec(h.row(r));
            f.row_mut(r).copy_from_slice(&fv);
        }
        Ok(f)
    }

    fn gradient(&self, xi: &Mat, y: &Mat, loss: Loss) -> Result<LinGrad> {
        let f = self.forward_batch(xi)?;
        if y.rows != f.rows || y.cols != f.cols {
            return Err(Error::DimensionMismatch("label shape".into()));
        }
        let h = self.hidden(xi);
        let k = self.d + self.d_out;
        let mut chi = Mat::zeros(f.rows, f.cols);
        for r in 0..f.rows {
            let c = loss.prime(f.row(r), y.row(r));
            chi.row_mut(r).copy_from_slice(&c);
        }
        let vt_chit = {
            let mut m = Mat::zeros(k, chi.rows);
            for r in 0..chi.rows {
                let col = self.vv.matvec_t(chi.row(r));
                for i in 0..k {
                    *m.at_mut(i, r) = col[i];
                }
            }
            m
        };
        let mut du = vt_chit.matmul(xi);
        du.scale(-1.0);
        let mut dv = chi.transpose().matmul(&h);
        dv.scale(-1.0);
        let alpha = self.hyper.alpha;
        let mut db = vec![0.0; k];
        if alpha != 0.0 {
            let mut colsum = vec![0.0; chi.cols];
            for r in 0..chi.rows {
                for (cs, cv) in colsum.iter_mut().zip(chi.row(r).iter()) {
                    *cs += cv;
                }
            }
            let vsum = self.vv.matvec_t(&colsum);
            for (dbi, vi) in db.iter_mut().zip(vsum.iter()) {
                *dbi = -alpha * alpha * vi;
            }
        }
        Ok(LinGrad { du, dv, db })
    }

    fn apply(&mut self, d: &LinGrad, eta: f64, rho: f64, gamma: f64) {
        // param += eta rho d - eta gamma param (decay acts on the old value).
        self.uu.scale(1.0 - eta * gamma);
        self.uu.add_scaled(&d.du, eta * rho);
        self.vv.scale(1.0 - eta * gamma);
        self.vv.add_scaled(&d.dv, eta * rho);
        for (b, db) in self.bb.iter_mut().zip(d.db.iter()) {
            *b = *b * (1.0 - eta * gamma) + eta * rho * db;
        }
    }

    fn hyper(&self) -> &LinHyper {
        &self.hyper
    }
}

/// One step of a coefficient-space net on a batch.
pub fn coeff_sgd_step(net: &mut CoeffNet, xi: &Mat, y: &Mat, loss: Loss) -> Result<()> {
    net.sgd_step(xi, y, loss)
}

/// Forward pass of a coefficient-space net on a batch.
pub fn coeff_forward(net: &CoeffNet, xi: &Mat) -> Result<Mat> {
    net.forward_batch(xi)
}

/// Routine for the closed-form recurrence: single pairs, base LR eta.
#[derive(Debug, Clone)]
pub struct LinRoutine {
    pub eta: f64,
    pub data: Vec<(Vec<f64>, Vec<f64>)>,
    pub loss: Loss,
}

/// Exact infinite-width trajectory of the plain shallow linear net (unit
/// init scales, no bias/clip/decay), by the coefficient-matrix recurrence:
///
/// `f_t(xi) = (A_t C_t + B_t D_t) xi`,
/// `(A,B) -= eta chi (x) (C xi_t, D xi_t)`, `(C,D) -= eta (A^T chi, B^T chi) (x) xi_t`
///
/// with `A_0 = I_{d_out}`, `D_0 = I_d`, `B_0 = C_0 = 0`. Returns the logits of
/// each probe input at every step `0..=t_steps`.
pub fn lin1lp_run(
    routine: &LinRoutine,
    t_steps: usize,
    d: usize,
    d_out: usize,
    probes: &[Vec<f64>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut a = Mat::zeros(d_out, d_out);
    for i in 0..d_out {
        *a.at_mut(i, i) = 1.0;
    }
    let mut dmat = Mat::zeros(d, d);
    for i in 0..d {
        *dmat.at_mut(i, i) = 1.0;
    }
    let mut b = Mat::zeros(d_out, d);
    let mut c = Mat::zeros(d, d_out);
    let logits = |a: &Mat, b: &Mat, c: &Mat, dm: &Mat, xi: &[f64]| -> Vec<f64> {
        // f = A (C^T xi) + B (D xi); C is stored as d x d_out.
        let cxi = c.matvec_t(xi);
        let dxi = dm.matvec(xi);
        let mut f = a.matvec(&cxi);
        let bd = b.matvec(&dxi);
        for (fv, bv) in f.iter_mut().zip(bd.iter()) {
            *fv += bv;
        }
        f
    };
    let mut out = Vec::with_capacity(t_steps + 1);
    for t in 0..=t_steps {
        out.push(probes.iter().map(|p| logits(&a, &b, &c, &dmat, p)).collect());
        if t == t_steps {
            break;
        }
        let (xi_t, y_t) = &routine.data[t % routine.data.len()];
        if xi_t.len() != d || y_t.len() != d_out {
            return Err(Error::DimensionMismatch("routine pair shape".into()));
        }
        let f_t = logits(&a, &b, &c, &dmat, xi_t);
        let chi = routine.loss.prime(&f_t, y_t);
        let cxi = c.matvec_t(xi_t);
        let dxi = dmat.matvec(xi_t);
        let at_chi = a.matvec_t(&chi);
        let bt_chi = b.matvec_t(&chi);
        // (A, B) update: A -= eta chi (x) (C xi), B -= eta chi (x) (D xi).
        for i in 0..d_out {
            let s = routine.eta * chi[i];
            for j in 0..d_out {
                *a.at_mut(i, j) -= s * cxi[j];
            }
            for j in 0..d {
                *b.at_mut(i, j) -= s * dxi[j];
            }
        }
        // C is d x d_out: C[p][q] -= eta (A^T chi)[q] xi[p].
        for p in 0..d {
            for q in 0..d_out {
                *c.at_mut(p, q) -= routine.eta * at_chi[q] * xi_t[p];
            }
        }
        // D is d x d: D[p][q] -= eta (B^T chi)[p] xi[q].
        for p in 0..d {
            for q in 0..d {
                *dmat.at_mut(p, q) -= routine.eta * bt_chi[p] * xi_t[q];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_stream;
    use rand::Rng;

    fn batch(rows: &[Vec<f64>]) -> Mat {
        Mat::from_rows(rows)
    }

    #[test]
    fn init_coeff_diagonal() {
        let net = init_coeff(1, 1, LinHyper::plain(1.0)).unwrap();
        assert_eq!(net.uu.data, vec![1.0, 0.0]);
        assert_eq!(net.vv.data, vec![0.0, 1.0]);
        assert_eq!(net.bb, vec![0.0, 0.0]);
    }

    #[test]
    fn fresh_coeff_net_outputs_zero() {
        let net = init_coeff(3, 2, LinHyper::plain(0.5)).unwrap();
        let f = net.forward_batch(&batch(&[vec![1.0, -2.0, 0.3], vec![0.0, 1.0, 1.0]])).unwrap();
        assert!(f.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_linear_in_inputs_without_bias() {
        let mut net = init_coeff(2, 1, LinHyper::plain(1.0)).unwrap();
        // Perturb the state so forward is nonzero, keep bb = 0.
        *net.uu.at_mut(2, 0) = 0.7;
        let f1 = net.forward_batch(&batch(&[vec![1.0, 2.0]])).unwrap();
        let f2 = net.forward_batch(&batch(&[vec![2.0, 4.0]])).unwrap();
        assert!((2.0 * f1.at(0, 0) - f2.at(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn one_step_hand_example_gives_two_xi() {
        // d = d_out = 1, sigma = 1, eta = 1, MSE on (1, 1): chi_0 = -1,
        // after one step f(xi) = 2 xi.
        let mut net = init_coeff(1, 1, LinHyper::plain(1.0)).unwrap();
        net.sgd_step(&batch(&[vec![1.0]]), &batch(&[vec![1.0]]), Loss::Mse).unwrap();
        let f = net.forward_batch(&batch(&[vec![1.0], vec![-0.3]])).unwrap();
        assert!((f.at(0, 0) - 2.0).abs() < 1e-12);
        assert!((f.at(1, 0) + 0.6).abs() < 1e-12);
    }

    #[test]
    fn eta_zero_is_identity() {
        let mut net = init_coeff(2, 2, LinHyper::plain(0.0)).unwrap();
        let before = net.uu.data.clone();
        net.sgd_step(&batch(&[vec![1.0, 1.0]]), &batch(&[vec![1.0, -1.0]]), Loss::Mse).unwrap();
        assert_eq!(net.uu.data, before);
    }

    #[test]
    fn clip_rescales_to_threshold_exactly() {
        let mut hyper = LinHyper::plain(1.0);
        hyper.clip_g = 1e-3;
        let net = init_coeff(1, 1, hyper).unwrap();
        let d = net.gradient(&batch(&[vec![1.0]]), &batch(&[vec![1.0]]), Loss::Mse).unwrap();
        let g = d.clip_norm(hyper.alpha);
        assert!(g > hyper.clip_g);
        let rho = clip_factor(&d, hyper.alpha, hyper.clip_g);
        assert!((rho * g - hyper.clip_g).abs() < 1e-15);
        // Post-clip update norm <= eta * g always.
        assert!(rho * g * hyper.eta <= hyper.eta * hyper.clip_g + 1e-15);
    }

    #[test]
    fn weight_decay_contracts_on_zero_gradient() {
        let mut hyper = LinHyper::plain(0.5);
        hyper.decay_gamma = 0.01;
        let mut net = init_coeff(1, 1, hyper).unwrap();
        // Zero gradient: y equals prediction (= 0 at init).
        net.sgd_step(&batch(&[vec![1.0]]), &batch(&[vec![0.0]]), Loss::Mse).unwrap();
        let factor = 1.0 - hyper.eta * hyper.decay_gamma;
        assert!((net.uu.at(0, 0) - factor).abs() < 1e-15);
        assert!((net.vv.at(0, 1) - factor).abs() < 1e-15);
    }

    #[test]
    fn lin1lp_zero_steps_is_zero_function() {
        let routine = LinRoutine { eta: 1.0, data: vec![(vec![1.0], vec![1.0])], loss: Loss::Mse };
        let traj = lin1lp_run(&routine, 0, 1, 1, &[vec![2.0]]).unwrap();
        assert_eq!(traj[0][0], vec![0.0]);
    }

    #[test]
    fn lin1lp_one_step_hand_example() {
        let routine = LinRoutine { eta: 1.0, data: vec![(vec![1.0], vec![1.0])], loss: Loss::Mse };
        let traj = lin1lp_run(&routine, 1, 1, 1, &[vec![1.0], vec![-0.3]]).unwrap();
        assert!((traj[1][0][0] - 2.0).abs() < 1e-12);
        assert!((traj[1][1][0] + 0.6).abs() < 1e-12);
    }

    #[test]
    fn coeff_pipeline_matches_recurrence_to_1e12() {
        // Random 10-step routines, several dim combos, plain hyper.
        let mut rng = rng_stream(42, &[1]);
        for &(d, d_out) in &[(1usize, 1usize), (2, 1), (3, 2)] {
            for _case in 0..8 {
                let data: Vec<(Vec<f64>, Vec<f64>)> = (0..10)
                    .map(|_| {
                        let xi: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        let y: Vec<f64> = (0..d_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        (xi, y)
                    })
                    .collect();
                let probes: Vec<Vec<f64>> =
                    (0..3).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
                let eta = rng.gen_range(0.05..0.5);
                let routine = LinRoutine { eta, data: data.clone(), loss: Loss::Mse };
                let exact = lin1lp_run(&routine, 10, d, d_out, &probes).unwrap();
                let mut net = init_coeff(d, d_out, LinHyper::plain(eta)).unwrap();
                for t in 0..=10usize {
                    let f = net.forward_batch(&Mat::from_rows(&probes)).unwrap();
                    for (p, probe_logits) in exact[t].iter().enumerate() {
                        for (o, want) in probe_logits.iter().enumerate() {
                            assert!(
                                (f.at(p, o) - want).abs() < 1e-12,
                                "t={t} p={p} o={o}: {} vs {want}",
                                f.at(p, o)
                            );
                        }
                    }
                    if t < 10 {
                        let (xi, y) = &data[t];
                        net.sgd_step(
                            &Mat::from_rows(&[xi.clone()]),
                            &Mat::from_rows(&[y.clone()]),
                            Loss::Mse,
                        )
                        .unwrap();
                    }
                }
            }
        }
    }

    #[test]
    fn finite_linear_net_approaches_coeff_net() {
        // Width-limit property: average logit gap shrinks from n = 256 to 4096.
        let d = 2;
        let d_out = 1;
        let hyper = LinHyper::plain(0.2);
        let mut rng = rng_stream(7, &[3]);
        let data: Vec<(Vec<f64>, Vec<f64>)> = (0..5)
            .map(|_| {
                (
                    (0..d).map(|_| rng.gen_range(-1.0..1.0f64)).collect(),
                    vec![rng.gen_range(-1.0..1.0f64)],
                )
            })
            .collect();
        let probe = vec![0.7, -0.4];
        let mut limit_net = init_coeff(d, d_out, hyper).unwrap();
        let mut limit_f = Vec::new();
        for t in 0..=5usize {
            limit_f.push(limit_net.forward_batch(&Mat::from_rows(&[probe.clone()])).unwrap().at(0, 0));
            if t < 5 {
                let (xi, y) = &data[t];
                limit_net
                    .sgd_step(
                        &Mat::from_rows(&[xi.clone()]),
                        &Mat::from_rows(&[y.clone()]),
                        Loss::Mse,
                    )
                    .unwrap();
            }
        }
        let mut gaps = Vec::new();
        for &n in &[256usize, 4096] {
            let mut total = 0.0;
            let seeds = 20;
            for seed in 0..seeds {
                let mut net = LinearNet::init(n, d, d_out, hyper, 1000 + seed).unwrap();
                let mut gap = 0.0;
                for t in 0..=5usize {
                    let f = net.forward_batch(&Mat::from_rows(&[probe.clone()])).unwrap().at(0, 0);
                    gap += (f - limit_f[t]).abs();
                    if t < 5 {
                        let (xi, y) = &data[t];
                        net.sgd_step(
                            &Mat::from_rows(&[xi.clone()]),
                            &Mat::from_rows(&[y.clone()]),
                            Loss::Mse,
                        )
                        .unwrap();
                    }
                }
                total += gap / 6.0;
            }
            gaps.push(total / seeds as f64);
        }
        assert!(
            gaps[1] < gaps[0],
            "gap at 4096 ({}) should be below gap at 256 ({})",
            gaps[1],
            gaps[0]
        );
    }

    #[test]
    fn alpha_zero_freezes_bias() {
        let mut hyper = LinHyper::plain(1.0);
        hyper.alpha = 0.0;
        let mut net = init_coeff(1, 1, hyper).unwrap();
        net.sgd_step(&batch(&[vec![1.0]]), &batch(&[vec![1.0]]), Loss::Mse).unwrap();
        assert!(net.bb.iter().all(|v| *v == 0.0));
    }
}
