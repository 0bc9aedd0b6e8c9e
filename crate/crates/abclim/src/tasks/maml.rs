//! First-order MAML over the shallow linear models, and the kernel-model
//! variant that tracks the readout as a stack of (input, coefficient) pairs.
//!
//! Meta-training adapts with step `eps` (never clipped), accumulates the
//! test-set gradients at the adapted parameters over the task batch, clips
//! the accumulated meta gradient globally, and applies the meta step. The
//! kernel algorithm instead clips and pushes per task, exactly as its
//! push/pop formulation prescribes. Meta-testing adapts for a fixed 20 steps.

use super::fewshot::FewShotTask;
use crate::abc::{AbcParam, NamedParam};
use crate::linlim::{clip_factor, LinGrad, LinearModel};
use crate::mlp::{Activation, FiniteMlp, Loss};
use crate::util::Mat;
use crate::Result;
use std::cell::RefCell;
use std::collections::HashMap;

pub const META_TEST_ADAPT_STEPS: usize = 20;

#[derive(Debug, Clone, Copy)]
pub struct MamlConfig {
    /// Adaptation step size.
    pub eps: f64,
    /// Meta learning rate.
    pub eta: f64,
    pub task_batch: usize,
    /// Meta-gradient clip threshold (infinity disables).
    pub clip_g: f64,
    /// Adaptation steps during meta-training.
    pub adapt_steps: usize,
}

fn task_mats(pairs: &[(Vec<f64>, Vec<f64>)]) -> (Mat, Mat) {
    let xs: Vec<Vec<f64>> = pairs.iter().map(|(x, _)| x.clone()).collect();
    let ys: Vec<Vec<f64>> = pairs.iter().map(|(_, y)| y.clone()).collect();
    (Mat::from_rows(&xs), Mat::from_rows(&ys))
}

fn test_mats(task: &FewShotTask) -> (Mat, Mat) {
    let xs: Vec<Vec<f64>> = task.test.iter().map(|(x, _)| x.clone()).collect();
    let ys: Vec<Vec<f64>> = task
        .test
        .iter()
        .map(|(_, c)| {
            let mut v = vec![0.0; task.n_way];
            v[*c] = 1.0;
            v
        })
        .collect();
    (Mat::from_rows(&xs), Mat::from_rows(&ys))
}

/// Adapt a clone of the model on the task's train set (no clipping, no decay).
fn adapt<M: LinearModel>(model: &M, task: &FewShotTask, eps: f64, steps: usize) -> Result<M> {
    let mut adapted = model.clone();
    let (xs, ys) = task_mats(&task.train);
    for _ in 0..steps {
        let g = adapted.gradient(&xs, &ys, Loss::Mse)?;
        adapted.apply(&g, eps, 1.0, 0.0);
    }
    Ok(adapted)
}

/// First-order MAML meta-training of a linear model (finite or coefficient
/// space) on a task stream.
pub fn maml_train<M: LinearModel>(
    model: &mut M,
    tasks: &[FewShotTask],
    cfg: &MamlConfig,
) -> Result<()> {
    let alpha = model.hyper().alpha;
    for batch in tasks.chunks(cfg.task_batch.max(1)) {
        let mut acc: Option<LinGrad> = None;
        for task in batch {
            let adapted = adapt(model, task, cfg.eps, cfg.adapt_steps)?;
            let (xs, ys) = test_mats(task);
            let g = adapted.gradient(&xs, &ys, Loss::Mse)?;
            match &mut acc {
                None => acc = Some(g),
                Some(a) => a.add_scaled(&g, 1.0),
            }
        }
        if let Some(g) = acc {
            let rho = clip_factor(&g, alpha, cfg.clip_g);
            model.apply(&g, cfg.eta, rho, 0.0);
        }
    }
    Ok(())
}

/// Meta-test accuracy: adapt 20 steps per task, then argmax accuracy on the
/// task's test points.
pub fn maml_meta_test<M: LinearModel>(
    model: &M,
    tasks: &[FewShotTask],
    eps: f64,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for task in tasks {
        let adapted = adapt(model, task, eps, META_TEST_ADAPT_STEPS)?;
        let (xs, _) = test_mats(task);
        let f = adapted.forward_batch(&xs)?;
        for (row, (_, label)) in task.test.iter().enumerate() {
            let pred = argmax(f.row(row));
            correct += (pred == *label) as usize;
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Kernel model: a stack of (input, coefficient-vector) pairs with
/// `f_Q(xi) = sum_q coeff * K(input, xi)`; the empty stack predicts 0.
pub struct KernelModelQ<K: Fn(&[f64], &[f64]) -> f64> {
    pub stack: Vec<(Vec<f64>, Vec<f64>)>,
    pub kernel: K,
    pub n_way: usize,
}

impl<K: Fn(&[f64], &[f64]) -> f64> KernelModelQ<K> {
    pub fn new(kernel: K, n_way: usize) -> Self {
        KernelModelQ { stack: Vec::new(), kernel, n_way }
    }

    pub fn predict(&self, xi: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.n_way];
        for (zeta, q) in &self.stack {
            let k = (self.kernel)(zeta, xi);
            for (fi, qi) in f.iter_mut().zip(q.iter()) {
                *fi += qi * k;
            }
        }
        f
    }

    fn chis(&self, pairs: &[(Vec<f64>, Vec<f64>)]) -> Vec<Vec<f64>> {
        pairs
            .iter()
            .map(|(x, y)| Loss::Mse.prime(&self.predict(x), y))
            .collect()
    }

    /// Push the adaptation entries for one pass over the train pairs.
    fn push_adaptation(&mut self, pairs: &[(Vec<f64>, Vec<f64>)], eps: f64) {
        let chis = self.chis(pairs);
        for ((x, _), chi) in pairs.iter().zip(chis.iter()) {
            let coeff: Vec<f64> = chi.iter().map(|c| -eps * c).collect();
            self.stack.push((x.clone(), coeff));
        }
    }
}

/// One meta-training pass of the kernel MAML algorithm: per task, push the
/// adaptation entries, take the test-set loss derivatives, pop the
/// adaptation entries, clip by the kernel norm, and push the meta update.
pub fn maml_kernel_train<K: Fn(&[f64], &[f64]) -> f64>(
    model: &mut KernelModelQ<K>,
    tasks: &[FewShotTask],
    cfg: &MamlConfig,
) -> Result<()> {
    for task in tasks {
        let depth_before = model.stack.len();
        for _ in 0..cfg.adapt_steps {
            model.push_adaptation(&task.train, cfg.eps);
        }
        // Test-set loss derivatives at the adapted model.
        let (xs, ys) = test_mats(task);
        let mut chi_hat = Vec::with_capacity(task.test.len());
        for r in 0..xs.rows {
            chi_hat.push(Loss::Mse.prime(&model.predict(xs.row(r)), ys.row(r)));
        }
        // Pop the adaptation entries.
        model.stack.truncate(depth_before);
        // Kernel-norm clip over the test gradient.
        let mut gsq = 0.0;
        for i in 0..xs.rows {
            for j in 0..xs.rows {
                let k = (model.kernel)(xs.row(i), xs.row(j));
                let dot: f64 =
                    chi_hat[i].iter().zip(chi_hat[j].iter()).map(|(a, b)| a * b).sum();
                gsq += dot * k;
            }
        }
        let g = gsq.max(0.0).sqrt();
        let rho = if cfg.clip_g.is_finite() && g > cfg.clip_g { cfg.clip_g / g } else { 1.0 };
        for (r, chi) in chi_hat.iter().enumerate() {
            let coeff: Vec<f64> = chi.iter().map(|c| -rho * cfg.eta * c).collect();
            model.stack.push((xs.row(r).to_vec(), coeff));
        }
    }
    Ok(())
}

/// Meta-test accuracy of the kernel model: push 20 adaptation passes, score,
/// pop.
pub fn maml_kernel_meta_test<K: Fn(&[f64], &[f64]) -> f64>(
    model: &mut KernelModelQ<K>,
    tasks: &[FewShotTask],
    eps: f64,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for task in tasks {
        let depth_before = model.stack.len();
        for _ in 0..META_TEST_ADAPT_STEPS {
            model.push_adaptation(&task.train, eps);
        }
        for (x, label) in &task.test {
            let pred = argmax(&model.predict(x));
            correct += (pred == *label) as usize;
            total += 1;
        }
        model.stack.truncate(depth_before);
    }
    Ok(correct as f64 / total.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McKernelKind {
    Nngp,
    Ntk,
}

/// Monte-Carlo estimate of the NNGP or NTK kernel of a shallow network, by
/// averaging feature inner products (respectively empirical tangent kernels)
/// over freshly sampled wide finite nets. Evaluations are cached and
/// symmetrized by averaging both argument orders.
pub struct McKernel {
    nets: Vec<FiniteMlp>,
    kind: McKernelKind,
    cache: RefCell<HashMap<(Vec<u64>, Vec<u64>), (f64, f64)>>,
}

pub fn nngp_ntk_kernel_mc(
    kind: McKernelKind,
    act: Activation,
    d: usize,
    width: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<McKernel> {
    let param = AbcParam::named(NamedParam::Ntp, 1)?;
    let nets = (0..mc_samples)
        .map(|s| FiniteMlp::init(&param, width, d, 1, act, seed.wrapping_add(s as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(McKernel { nets, kind, cache: RefCell::new(HashMap::new()) })
}

impl McKernel {
    /// Kernel estimate with its Monte-Carlo stderr.
    pub fn eval_with_stderr(&self, xi: &[f64], zeta: &[f64]) -> Result<(f64, f64)> {
        let key = (bits(xi), bits(zeta));
        if let Some(v) = self.cache.borrow().get(&key) {
            return Ok(*v);
        }
        let mut vals = Vec::with_capacity(self.nets.len());
        for net in &self.nets {
            let v = match self.kind {
                McKernelKind::Nngp => {
                    0.5 * (net.feature_kernel(xi, zeta)? + net.feature_kernel(zeta, xi)?)
                }
                McKernelKind::Ntk => {
                    0.5 * (net.empirical_ntk(xi, zeta)? + net.empirical_ntk(zeta, xi)?)
                }
            };
            vals.push(v);
        }
        let out = crate::util::mean_stderr(&vals);
        self.cache.borrow_mut().insert(key, out);
        Ok(out)
    }

    pub fn eval(&self, xi: &[f64], zeta: &[f64]) -> f64 {
        self.eval_with_stderr(xi, zeta).map(|v| v.0).unwrap_or(f64::NAN)
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[cfg(test)]
mod tests {
    use super::super::fewshot::{gen_fewshot, FewShotSpec};
    use super::*;
    use crate::linlim::{init_coeff, LinHyper, LinearNet};

    fn spec() -> FewShotSpec {
        FewShotSpec { d: 4, n_way: 3, k_shot: 1, test_per_class: 2, noise: 0.2 }
    }

    fn cfg() -> MamlConfig {
        MamlConfig { eps: 0.3, eta: 0.1, task_batch: 4, clip_g: 0.5, adapt_steps: 1 }
    }

    #[test]
    fn zero_meta_rate_leaves_model_unchanged() {
        let tasks = gen_fewshot(3, &spec(), 8).unwrap();
        let mut model = init_coeff(4, 3, LinHyper::plain(1.0)).unwrap();
        let before = model.uu.data.clone();
        let mut c = cfg();
        c.eta = 0.0;
        maml_train(&mut model, &tasks, &c).unwrap();
        assert_eq!(model.uu.data, before);
    }

    #[test]
    fn zero_adaptation_step_reduces_to_plain_sgd_on_test_sets() {
        let tasks = gen_fewshot(4, &spec(), 6).unwrap();
        let mut c = cfg();
        c.eps = 0.0;
        c.task_batch = 1;
        c.clip_g = f64::INFINITY;
        let mut model = init_coeff(4, 3, LinHyper::plain(c.eta)).unwrap();
        maml_train(&mut model, &tasks, &c).unwrap();
        // Manual: plain batched SGD on each task's test set in order.
        let mut manual = init_coeff(4, 3, LinHyper::plain(c.eta)).unwrap();
        for task in &tasks {
            let (xs, ys) = test_mats(task);
            manual.sgd_step(&xs, &ys, Loss::Mse).unwrap();
        }
        for (a, b) in model.uu.data.iter().zip(manual.uu.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_maml_empty_stack_predicts_zero() {
        let model = KernelModelQ::new(|a: &[f64], b: &[f64]| dot(a, b), 3);
        assert_eq!(model.predict(&[1.0, 2.0]), vec![0.0; 3]);
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }

    /// Explicit 0-hidden-layer first-order MAML with the same per-task
    /// semantics as the kernel algorithm: the cross-oracle.
    fn explicit_linear_maml(tasks: &[FewShotTask], cfg: &MamlConfig, d: usize, n_way: usize) -> Mat {
        let mut w = Mat::zeros(n_way, d);
        let forward = |w: &Mat, x: &[f64]| w.matvec(x);
        for task in tasks {
            let mut w_ad = w.clone();
            for _ in 0..cfg.adapt_steps {
                let chis: Vec<Vec<f64>> = task
                    .train
                    .iter()
                    .map(|(x, y)| Loss::Mse.prime(&forward(&w_ad, x), y))
                    .collect();
                for ((x, _), chi) in task.train.iter().zip(chis.iter()) {
                    for (r, c) in chi.iter().enumerate() {
                        for (j, xj) in x.iter().enumerate() {
                            *w_ad.at_mut(r, j) -= cfg.eps * c * xj;
                        }
                    }
                }
            }
            // Test gradient at adapted weights.
            let mut g = Mat::zeros(n_way, d);
            for (x, label) in &task.test {
                let mut y = vec![0.0; n_way];
                y[*label] = 1.0;
                let chi = Loss::Mse.prime(&forward(&w_ad, x), &y);
                for (r, c) in chi.iter().enumerate() {
                    for (j, xj) in x.iter().enumerate() {
                        *g.at_mut(r, j) += c * xj;
                    }
                }
            }
            let gn = g.frobenius_sq().sqrt();
            let rho = if cfg.clip_g.is_finite() && gn > cfg.clip_g { cfg.clip_g / gn } else { 1.0 };
            w.add_scaled(&g, -rho * cfg.eta);
        }
        w
    }

    #[test]
    fn kernel_maml_linear_kernel_equals_explicit_linear_model() {
        let s = spec();
        let tasks = gen_fewshot(11, &s, 12).unwrap();
        let c = cfg();
        let mut model = KernelModelQ::new(|a: &[f64], b: &[f64]| dot(a, b), s.n_way);
        maml_kernel_train(&mut model, &tasks, &c).unwrap();
        let w = explicit_linear_maml(&tasks, &c, s.d, s.n_way);
        // Compare predictions on fresh probe inputs.
        let probes = gen_fewshot(99, &s, 2).unwrap();
        for task in &probes {
            for (x, _) in &task.test {
                let fq = model.predict(x);
                let fw = w.matvec(x);
                for (a, b) in fq.iter().zip(fw.iter()) {
                    assert!((a - b).abs() < 1e-8, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn kernel_maml_clip_hits_threshold_exactly() {
        let s = spec();
        let tasks = gen_fewshot(21, &s, 1).unwrap();
        let mut c = cfg();
        c.clip_g = 1e-3; // force clipping
        let mut model = KernelModelQ::new(|a: &[f64], b: &[f64]| dot(a, b), s.n_way);
        maml_kernel_train(&mut model, &tasks, &c).unwrap();
        // The pushed meta entries have kernel norm exactly eta * clip_g.
        let pushed = &model.stack;
        let mut gsq = 0.0;
        for (xi, qi) in pushed {
            for (xj, qj) in pushed {
                gsq += dot(qi, qj) * dot(xi, xj);
            }
        }
        let want = c.eta * c.clip_g;
        assert!(
            (gsq.sqrt() - want).abs() < 1e-12,
            "pushed norm {} vs {}",
            gsq.sqrt(),
            want
        );
    }

    #[test]
    fn kernel_maml_zero_eps_pushes_inert_adaptation() {
        let s = spec();
        let tasks = gen_fewshot(31, &s, 6).unwrap();
        let mut c = cfg();
        c.eps = 0.0;
        let mut with_adapt = KernelModelQ::new(|a: &[f64], b: &[f64]| dot(a, b), s.n_way);
        maml_kernel_train(&mut with_adapt, &tasks, &c).unwrap();
        // Same stream through an explicit model without any adaptation step.
        let w = explicit_linear_maml(&tasks, &c, s.d, s.n_way);
        for task in &tasks[..2] {
            for (x, _) in &task.test {
                let fq = with_adapt.predict(x);
                let fw = w.matvec(x);
                for (a, b) in fq.iter().zip(fw.iter()) {
                    assert!((a - b).abs() < 1e-8);
                }
            }
        }
    }

    /// Mean post-adaptation test MSE: the quantity meta-training minimizes.
    fn adapted_test_loss<M: LinearModel>(
        model: &M,
        tasks: &[FewShotTask],
        eps: f64,
    ) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for task in tasks {
            let adapted = super::adapt(model, task, eps, META_TEST_ADAPT_STEPS).unwrap();
            let (xs, ys) = test_mats(task);
            let f = adapted.forward_batch(&xs).unwrap();
            for r in 0..xs.rows {
                total += Loss::Mse.value(f.row(r), ys.row(r));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn finite_maml_reduces_meta_objective() {
        let s = FewShotSpec { d: 8, n_way: 4, k_shot: 1, test_per_class: 2, noise: 0.3 };
        let train_tasks = gen_fewshot(41, &s, 240).unwrap();
        let test_tasks = gen_fewshot(42, &s, 80).unwrap();
        let hyper = LinHyper { alpha: 1.0, sigma_v: 0.25, ..LinHyper::plain(0.05) };
        let cfg = MamlConfig {
            eps: 0.05,
            eta: 0.05,
            task_batch: 8,
            clip_g: 0.5,
            adapt_steps: 1,
        };
        let mut model = LinearNet::init(256, s.d, s.n_way, hyper, 7).unwrap();
        let loss0 = adapted_test_loss(&model, &test_tasks, cfg.eps);
        let acc0 = maml_meta_test(&model, &test_tasks, cfg.eps).unwrap();
        maml_train(&mut model, &train_tasks, &cfg).unwrap();
        let loss1 = adapted_test_loss(&model, &test_tasks, cfg.eps);
        let acc1 = maml_meta_test(&model, &test_tasks, cfg.eps).unwrap();
        assert!(
            loss1 < loss0,
            "meta-training should reduce the adapted test loss: {loss0} -> {loss1}"
        );
        assert!(acc1 >= acc0 - 0.02, "accuracy should not regress: {acc0} -> {acc1}");
        assert!(acc1 > 0.4, "well above 4-way chance: {acc1}");
    }

    #[test]
    fn mc_kernels_match_hand_algebra_for_identity() {
        // Shallow identity NTP: NTK -> 2 xi . zeta, NNGP -> xi . zeta.
        let ntk = nngp_ntk_kernel_mc(McKernelKind::Ntk, Activation::Identity, 2, 4096, 16, 5)
            .unwrap();
        let (k, se) = ntk.eval_with_stderr(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((k - 2.0 * 0.5).abs() <= 4.0 * se.max(1e-3), "ntk {k} +- {se}");
        let gp = nngp_ntk_kernel_mc(McKernelKind::Nngp, Activation::Identity, 2, 4096, 16, 5)
            .unwrap();
        let (k, se) = gp.eval_with_stderr(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((k - 0.5).abs() <= 4.0 * se.max(1e-3), "nngp {k} +- {se}");
        // Symmetric by construction.
        let a = gp.eval(&[0.3, 0.9], &[-0.2, 0.4]);
        let b = gp.eval(&[-0.2, 0.4], &[0.3, 0.9]);
        assert_eq!(a, b);
    }
}
