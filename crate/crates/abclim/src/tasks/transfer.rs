//! Transfer-triviality experiment: pretrain a kernel-regime network, discard
//! the readout, finetune, and compare against the same pipeline without
//! pretraining. In the kernel-regime limit the two finetuned networks agree,
//! so the gap must shrink with width; feature-learning parametrizations keep
//! a nonvanishing gap (reported, not asserted).

use crate::abc::{AbcParam, Regime};
use crate::mlp::{Activation, FiniteMlp, TrainRoutine};
use crate::{Error, Result};
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct TransferSpec {
    pub act: Activation,
    pub d: usize,
    pub t_pre: usize,
    pub t_fine: usize,
    pub routine_a: TrainRoutine,
    pub routine_b: TrainRoutine,
    pub probes: Vec<Vec<f64>>,
    pub seeds: u64,
}

/// Per width: mean over seeds of `max_xi |g_{T;t}(xi) - g_{0;t}(xi)|`, where
/// both arms share the initialization and the resampled readout.
pub fn transfer_triviality(
    param: &AbcParam,
    widths: &[usize],
    spec: &TransferSpec,
) -> Result<Vec<(usize, f64)>> {
    let cls = param.classify();
    if cls.regime != Regime::KernelRegime {
        return Err(Error::NotKernelRegime(cls.regime.to_string()));
    }
    transfer_gaps_unchecked(param, widths, spec)
}

/// The same sweep without the kernel-regime guard, for the documented
/// feature-learning control runs.
pub fn transfer_gaps_unchecked(
    param: &AbcParam,
    widths: &[usize],
    spec: &TransferSpec,
) -> Result<Vec<(usize, f64)>> {
    let depth = param.depth();
    let mut out = Vec::with_capacity(widths.len());
    for &n in widths {
        let gaps: Vec<f64> = (0..spec.seeds)
            .into_par_iter()
            .map(|seed| -> Result<f64> {
                let init = FiniteMlp::init(param, n, spec.d, 1, spec.act, 10_000 + seed)?;
                // Pretrained arm.
                let mut pre = init.clone();
                for t in 0..spec.t_pre {
                    let (xi, y) = spec.routine_a.pair(t);
                    let (xi, y) = (xi.to_vec(), y.to_vec());
                    pre.sgd_step(&xi, &y, &spec.routine_a)?;
                }
                // Both arms get the same fresh readout, then finetune on B.
                let mut ctl = init;
                let readout_seed = 20_000 + seed;
                pre.reinit_layer(depth + 1, readout_seed);
                ctl.reinit_layer(depth + 1, readout_seed);
                for t in 0..spec.t_fine {
                    let (xi, y) = spec.routine_b.pair(t);
                    let (xi, y) = (xi.to_vec(), y.to_vec());
                    pre.sgd_step(&xi, &y, &spec.routine_b)?;
                    ctl.sgd_step(&xi, &y, &spec.routine_b)?;
                }
                let mut worst: f64 = 0.0;
                for probe in &spec.probes {
                    let fp = pre.forward(probe)?.0[0];
                    let fc = ctl.forward(probe)?.0[0];
                    worst = worst.max((fp - fc).abs());
                }
                Ok(worst)
            })
            .collect::<Result<_>>()?;
        out.push((n, gaps.iter().sum::<f64>() / gaps.len() as f64));
    }
    Ok(out)
}
