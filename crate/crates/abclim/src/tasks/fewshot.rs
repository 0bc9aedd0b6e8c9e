//! Synthetic few-shot classification tasks: Gaussian class prototypes with
//! isotropic noise, standing in for image benchmarks at desk scale.

use crate::util::{counter_normal, rng_stream};
use crate::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct FewShotSpec {
    pub d: usize,
    pub n_way: usize,
    pub k_shot: usize,
    /// Per-class test points.
    pub test_per_class: usize,
    /// Noise scale around each prototype.
    pub noise: f64,
}

/// One N-way K-shot task: train pairs carry one-hot targets, test pairs the
/// class index.
#[derive(Debug, Clone)]
pub struct FewShotTask {
    pub n_way: usize,
    pub k_shot: usize,
    pub train: Vec<(Vec<f64>, Vec<f64>)>,
    pub test: Vec<(Vec<f64>, usize)>,
}

fn one_hot(class: usize, n_way: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_way];
    v[class] = 1.0;
    v
}

/// Deterministic task stream: per task, `n_way` Gaussian prototypes in R^d;
/// train and test points are prototype plus noise.
pub fn gen_fewshot(seed: u64, spec: &FewShotSpec, count: usize) -> Result<Vec<FewShotTask>> {
    if spec.d == 0 || spec.n_way == 0 || spec.k_shot == 0 {
        return Err(Error::InvalidArgument("few-shot dims must be positive".into()));
    }
    let mut tasks = Vec::with_capacity(count);
    for task_idx in 0..count {
        let mut rng = rng_stream(seed, &[0xF5, task_idx as u64]);
        let protos: Vec<Vec<f64>> = (0..spec.n_way)
            .map(|c| {
                (0..spec.d)
                    .map(|j| counter_normal(seed, &[0xF6, task_idx as u64, c as u64, j as u64]))
                    .collect()
            })
            .collect();
        let mut train = Vec::with_capacity(spec.n_way * spec.k_shot);
        for c in 0..spec.n_way {
            for _ in 0..spec.k_shot {
                let x: Vec<f64> = protos[c]
                    .iter()
                    .map(|p| p + spec.noise * rng.gen_range(-1.0..1.0f64))
                    .collect();
                train.push((x, one_hot(c, spec.n_way)));
            }
        }
        let mut test = Vec::with_capacity(spec.n_way * spec.test_per_class);
        for c in 0..spec.n_way {
            for _ in 0..spec.test_per_class {
                let x: Vec<f64> = protos[c]
                    .iter()
                    .map(|p| p + spec.noise * rng.gen_range(-1.0..1.0f64))
                    .collect();
                test.push((x, c));
            }
        }
        tasks.push(FewShotTask { n_way: spec.n_way, k_shot: spec.k_shot, train, test });
    }
    Ok(tasks)
}
