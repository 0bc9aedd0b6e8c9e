//! Reusable experiment drivers shared by the CLI and the acceptance suite:
//! finite-vs-limit comparisons, width sweeps of the kernel-regime and
//! feature-learning signatures, and the learning-rate nonlinearity probe.

use crate::abc::AbcParam;
use crate::mlp::{coordinate_size, Activation, FiniteMlp, Loss, ScalarRoutine, TrainRoutine};
use crate::particle::{run_depth2_blocked, run_shallow_blocked, Depth2Mode, ParticleTrajectory};
use crate::util::{ls_slope, rng_stream, Mat};
use crate::wick::{exact_run, ExactDepth, ExactTrajectory, WickCaps};
use crate::Result;
use rand::Rng;
use rayon::prelude::*;

/// Which network the toy comparison evolves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyDepth {
    One,
    TwoDecoupled,
    TwoCoupled,
}

impl ToyDepth {
    pub fn exact(self) -> ExactDepth {
        match self {
            ToyDepth::One => ExactDepth::One,
            ToyDepth::TwoDecoupled => ExactDepth::TwoDecoupled,
            ToyDepth::TwoCoupled => ExactDepth::TwoCoupled,
        }
    }

    pub fn hidden_layers(self) -> usize {
        match self {
            ToyDepth::One => 1,
            _ => 2,
        }
    }

    pub fn decoupled(self) -> bool {
        self == ToyDepth::TwoDecoupled
    }
}

/// Random sign data `(xi_t, y_t) in {±1}^2` for the toy comparison.
pub fn random_sign_data(seed: u64, steps: usize) -> Vec<(f64, f64)> {
    let mut rng = rng_stream(seed, &[0x70]);
    (0..steps)
        .map(|_| {
            let x = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let y = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            (x, y)
        })
        .collect()
}

/// Train a finite maximal-update net on the scalar routine and return the
/// per-step losses at t = 0..t_records-1 (loss before each update).
pub fn finite_toy_losses(
    depth: ToyDepth,
    phi: Activation,
    routine: &ScalarRoutine,
    n: usize,
    t_records: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let param = AbcParam::named(crate::abc::NamedParam::Mup, depth.hidden_layers())?;
    let mut net = FiniteMlp::init(&param, n, 1, 1, phi, seed)?;
    if depth.decoupled() {
        net.enable_decoupled_backprop(seed ^ 0x5eed);
    }
    let tr = TrainRoutine::new(
        routine.eta,
        routine.data.iter().map(|(x, y)| (vec![*x], vec![*y])).collect(),
        routine.loss,
    );
    let mut out = Vec::with_capacity(t_records);
    for t in 0..t_records {
        let (xi, y) = routine.pair(t);
        let f = net.forward(&[xi])?.0[0];
        out.push(routine.loss.value_scalar(f, y));
        if t + 1 < t_records {
            let (xv, yv) = tr.pair(t);
            let (xv, yv) = (xv.to_vec(), yv.to_vec());
            net.sgd_step(&xv, &yv, &tr)?;
        }
    }
    Ok(out)
}

/// Result of one toy comparison config.
#[derive(Debug, Clone)]
pub struct ToyCompare {
    pub widths: Vec<usize>,
    /// Mean over seeds and steps of |finite loss - limit loss| per width.
    pub gaps: Vec<f64>,
    pub exact: ExactTrajectory,
    pub particle: ParticleTrajectory,
    /// max_t |exact - particle| / stderr_t.
    pub worst_sigma: f64,
}

/// Finite-width maximal-update nets against the exact limit, cross-checked by
/// the particle engine.
#[allow(clippy::too_many_arguments)]
pub fn toy_compare(
    depth: ToyDepth,
    phi: Activation,
    routine: &ScalarRoutine,
    t_records: usize,
    widths: &[usize],
    seeds: u64,
    particles: usize,
    blocks: usize,
) -> Result<ToyCompare> {
    let caps = WickCaps::default();
    let exact = exact_run(depth.exact(), phi, routine, t_records, &[], &caps)?;
    let particle = match depth {
        ToyDepth::One => {
            run_shallow_blocked(particles, blocks, 0xACC, phi, routine, t_records, &[])?
        }
        ToyDepth::TwoDecoupled => run_depth2_blocked(
            particles,
            blocks,
            0xACC,
            Depth2Mode::Decoupled,
            phi,
            routine,
            t_records,
            &[],
        )?,
        ToyDepth::TwoCoupled => run_depth2_blocked(
            particles,
            blocks,
            0xACC,
            Depth2Mode::Coupled,
            phi,
            routine,
            t_records,
            &[],
        )?,
    };
    let mut worst_sigma: f64 = 0.0;
    for t in 0..t_records {
        let se = particle.f_stderr[t].max(1e-12);
        worst_sigma = worst_sigma.max((particle.f_train[t] - exact.f_train[t]).abs() / se);
    }
    let mut gaps = Vec::with_capacity(widths.len());
    for &n in widths {
        let per_seed: Vec<f64> = (0..seeds)
            .into_par_iter()
            .map(|s| -> Result<f64> {
                let losses = finite_toy_losses(depth, phi, routine, n, t_records, 0xF17E + s)?;
                let gap: f64 = losses
                    .iter()
                    .zip(exact.loss.iter())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / t_records as f64;
                Ok(gap)
            })
            .collect::<Result<_>>()?;
        gaps.push(per_seed.iter().sum::<f64>() / per_seed.len() as f64);
    }
    Ok(ToyCompare { widths: widths.to_vec(), gaps, exact, particle, worst_sigma })
}

/// Slope of log mean|f_0(xi)| against log n for a parametrization (the
/// feature-learning limit forces f_0 -> 0 like n^{-1/2} under maximal update).
pub fn f0_scale_slope(
    param: &AbcParam,
    act: Activation,
    widths: &[usize],
    seeds: u64,
    xi: &[f64],
) -> Result<f64> {
    let mut means = Vec::with_capacity(widths.len());
    for &n in widths {
        let vals: Vec<f64> = (0..seeds)
            .into_par_iter()
            .map(|s| -> Result<f64> {
                let net = FiniteMlp::init(param, n, xi.len(), 1, act, 0xF0 + s)?;
                Ok(net.forward(xi)?.0[0].abs())
            })
            .collect::<Result<_>>()?;
        means.push(vals.iter().sum::<f64>() / vals.len() as f64);
    }
    let lx: Vec<f64> = widths.iter().map(|n| (*n as f64).ln()).collect();
    let ly: Vec<f64> = means.iter().map(|v| v.ln()).collect();
    Ok(ls_slope(&lx, &ly))
}

/// Mean over seeds of |F_1(xi, zeta) - F_0(xi, zeta)| per width: the
/// one-step feature-kernel drift.
pub fn feature_kernel_drift(
    param: &AbcParam,
    act: Activation,
    widths: &[usize],
    seeds: u64,
    xi: &[f64],
    zeta: &[f64],
    eta: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(widths.len());
    for &n in widths {
        let vals: Vec<f64> = (0..seeds)
            .into_par_iter()
            .map(|s| -> Result<f64> {
                let mut net = FiniteMlp::init(param, n, xi.len(), 1, act, 0xD1 + s)?;
                let f0 = net.feature_kernel(xi, zeta)?;
                let routine =
                    TrainRoutine::new(eta, vec![(xi.to_vec(), vec![1.0])], Loss::Mse);
                net.sgd_step(xi, &[1.0], &routine)?;
                let f1 = net.feature_kernel(xi, zeta)?;
                Ok((f1 - f0).abs())
            })
            .collect::<Result<_>>()?;
        out.push(vals.iter().sum::<f64>() / vals.len() as f64);
    }
    Ok(out)
}

/// RMS residual of the best linear-through-origin fit of
/// `f_1(xi_0) - f_0(xi_0)` against the learning-rate grid, seed-averaged.
/// Kernel-regime dynamics are linear in eta in the limit; maximal-update
/// dynamics are not.
pub fn eta_nonlinearity_residual(
    param: &AbcParam,
    act: Activation,
    n: usize,
    etas: &[f64],
    seeds: u64,
    xi0: f64,
    y0: f64,
) -> Result<f64> {
    let mut mean_delta = vec![0.0; etas.len()];
    for s in 0..seeds {
        let base = FiniteMlp::init(param, n, 1, 1, act, 0xE7A + s)?;
        let f0 = base.forward(&[xi0])?.0[0];
        for (k, &eta) in etas.iter().enumerate() {
            let mut net = base.clone();
            let routine = TrainRoutine::new(eta, vec![(vec![xi0], vec![y0])], Loss::Mse);
            net.sgd_step(&[xi0], &[y0], &routine)?;
            let f1 = net.forward(&[xi0])?.0[0];
            mean_delta[k] += (f1 - f0) / seeds as f64;
        }
    }
    let (_, rms) = crate::util::fit_linear_through_origin(etas, &mean_delta);
    Ok(rms)
}

/// Per-layer slope of log coordinate_size(h^l_0) against log n.
pub fn init_coordinate_slopes(
    param: &AbcParam,
    act: Activation,
    widths: &[usize],
    seeds: u64,
    xi: &[f64],
) -> Result<Vec<f64>> {
    let depth = param.depth();
    let mut per_layer_means = vec![Vec::with_capacity(widths.len()); depth];
    for &n in widths {
        let sizes: Vec<Vec<f64>> = (0..seeds)
            .into_par_iter()
            .map(|s| -> Result<Vec<f64>> {
                let net = FiniteMlp::init(param, n, xi.len(), 1, act, 0x111 + s)?;
                let (_, cache) = net.forward(xi)?;
                Ok(cache.h.iter().map(|h| coordinate_size(h).unwrap()).collect())
            })
            .collect::<Result<_>>()?;
        for l in 0..depth {
            let mean = sizes.iter().map(|v| v[l]).sum::<f64>() / seeds as f64;
            per_layer_means[l].push(mean);
        }
    }
    let lx: Vec<f64> = widths.iter().map(|n| (*n as f64).ln()).collect();
    Ok(per_layer_means
        .iter()
        .map(|means| {
            let ly: Vec<f64> = means.iter().map(|v| v.ln()).collect();
            ls_slope(&lx, &ly)
        })
        .collect())
}

/// Trajectory of a finite net against kernel gradient descent with the given
/// kernel table: returns `max_t max_probe |f_t - kgd_t|`.
pub fn finite_vs_kgd_gap(
    param: &AbcParam,
    act: Activation,
    n: usize,
    seed: u64,
    table: &crate::kernelgd::KernelTable,
    pairs: &[(usize, f64)],
    eta: f64,
    t_steps: usize,
) -> Result<f64> {
    let mut net = FiniteMlp::init(param, n, table.inputs[0].len(), 1, act, seed)?;
    let f0: Vec<f64> = table
        .inputs
        .iter()
        .map(|x| net.forward(x).map(|v| v.0[0]))
        .collect::<Result<_>>()?;
    let kgd = crate::kernelgd::kgd_run(table, pairs, eta, Loss::Mse, t_steps, &f0)?;
    let routine = TrainRoutine::new(
        eta,
        pairs.iter().map(|(i, y)| (table.inputs[*i].clone(), vec![*y])).collect(),
        Loss::Mse,
    );
    let mut worst: f64 = 0.0;
    for t in 0..=t_steps {
        for (i, x) in table.inputs.iter().enumerate() {
            let f = net.forward(x)?.0[0];
            worst = worst.max((f - kgd[t][i]).abs());
        }
        if t < t_steps {
            let (xi, y) = routine.pair(t);
            let (xi, y) = (xi.to_vec(), y.to_vec());
            net.sgd_step(&xi, &y, &routine)?;
        }
    }
    Ok(worst)
}

/// Paired symmetry run: train the same seed under the original and the
/// shifted parametrization and return the worst relative deviation of the
/// training-point logits over the trajectory.
pub fn symmetry_gap(
    param: &AbcParam,
    theta: crate::abc::Rat,
    act: Activation,
    n: usize,
    seed: u64,
    routine: &TrainRoutine,
    t_steps: usize,
) -> Result<f64> {
    let shifted = param.symmetry_shift(theta);
    let mut net_a = FiniteMlp::init(param, n, routine.data[0].0.len(), routine.data[0].1.len(), act, seed)?;
    let mut net_b = FiniteMlp::init(&shifted, n, routine.data[0].0.len(), routine.data[0].1.len(), act, seed)?;
    let mut worst: f64 = 0.0;
    for t in 0..=t_steps {
        let (xi, _) = routine.pair(t);
        let fa = net_a.forward(xi)?.0;
        let fb = net_b.forward(xi)?.0;
        for (a, b) in fa.iter().zip(fb.iter()) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
            worst = worst.max(rel);
        }
        if t < t_steps {
            let (xi, y) = routine.pair(t);
            let (xi, y) = (xi.to_vec(), y.to_vec());
            net_a.sgd_step(&xi, &y, routine)?;
            net_b.sgd_step(&xi, &y, routine)?;
        }
    }
    Ok(worst)
}

/// Gram matrix of the input-side embeddings of a Word2Vec state on the full
/// vocabulary, for width-limit comparisons.
pub fn w2v_gram(state: &crate::tasks::W2VState) -> Mat {
    let v = state.vocab();
    let mut g = Mat::zeros(v, v);
    for a in 0..v {
        for b in 0..v {
            *g.at_mut(a, b) = state.embedding_dot(a, b);
        }
    }
    g
}
