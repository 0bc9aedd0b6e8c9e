//! Kernel-regime machinery: the layerwise kernels `Sigma^{ml}`, the limit
//! kernel of a kernel-regime parametrization, and kernel gradient descent.
//!
//! The Gaussian layer statistics follow the initialization-stable recursion
//! (first-layer covariance `xi . zeta`, then `E phi(u) phi(v)` under the
//! propagated bivariate Gaussian). Bivariate expectations go through 2D
//! Gauss-Hermite quadrature (1D on the collinear diagonal), exact for the
//! identity activation.

use crate::abc::{AbcParam, Rat, Regime};
use crate::mlp::{Activation, Loss};
use crate::util::gauss_hermite_normal;
use crate::{Error, Result};
use num_traits::One;
use serde::Serialize;

/// Default nodes per dimension for the bivariate expectations.
pub const DEFAULT_QUAD_NODES: usize = 64;

/// Bivariate Gaussian second-moment state for an input pair:
/// `(E a^2, E b^2, E a b)` of the layer preactivations at (xi, zeta).
#[derive(Debug, Clone, Copy)]
pub struct PairMoments {
    pub qaa: f64,
    pub qbb: f64,
    pub qab: f64,
}

/// `E f(A) g(B)` for centered jointly Gaussian (A, B) with the given second
/// moments, by tensorized Gauss-Hermite quadrature; collinear pairs reduce to
/// a 1D quadrature so the degenerate diagonal stays exact.
pub fn bivariate_expect<F, G>(m: PairMoments, nodes: usize, f: F, g: G) -> f64
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let sa = m.qaa.max(0.0).sqrt();
    let sb = m.qbb.max(0.0).sqrt();
    if sa == 0.0 || sb == 0.0 {
        let (z, w) = gauss_hermite_normal(nodes);
        if sa == 0.0 && sb == 0.0 {
            return f(0.0) * g(0.0);
        }
        if sa == 0.0 {
            let fa = f(0.0);
            return fa * z.iter().zip(&w).map(|(zi, wi)| wi * g(sb * zi)).sum::<f64>();
        }
        let gb = g(0.0);
        return gb * z.iter().zip(&w).map(|(zi, wi)| wi * f(sa * zi)).sum::<f64>();
    }
    let rho = (m.qab / (sa * sb)).clamp(-1.0, 1.0);
    let (z, w) = gauss_hermite_normal(nodes);
    if rho.abs() >= 1.0 - 1e-12 {
        let sgn = rho.signum();
        return z
            .iter()
            .zip(&w)
            .map(|(zi, wi)| wi * f(sa * zi) * g(sgn * sb * zi))
            .sum();
    }
    let c = (1.0 - rho * rho).sqrt();
    let mut acc = 0.0;
    for (za, wa) in z.iter().zip(&w) {
        let fa = f(sa * za);
        if fa == 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for (zb, wb) in z.iter().zip(&w) {
            inner += wb * g(sb * (rho * za + c * zb));
        }
        acc += wa * fa * inner;
    }
    acc
}

/// Propagate the layer moments of an initialization-stable parametrization:
/// layer 1 has covariance `xi . zeta`; deeper layers apply `E phi phi`.
fn propagate_moments(
    xi: &[f64],
    zeta: &[f64],
    act: Activation,
    layers: usize,
    nodes: usize,
) -> Vec<PairMoments> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>();
    let mut out = Vec::with_capacity(layers);
    let mut m = PairMoments { qaa: dot(xi, xi), qbb: dot(zeta, zeta), qab: dot(xi, zeta) };
    out.push(m);
    for _ in 2..=layers {
        m = PairMoments {
            qaa: bivariate_expect(
                PairMoments { qaa: m.qaa, qbb: m.qaa, qab: m.qaa },
                nodes,
                |a| act.value(a),
                |b| act.value(b),
            ),
            qbb: bivariate_expect(
                PairMoments { qaa: m.qbb, qbb: m.qbb, qab: m.qbb },
                nodes,
                |a| act.value(a),
                |b| act.value(b),
            ),
            qab: bivariate_expect(m, nodes, |a| act.value(a), |b| act.value(b)),
        };
        out.push(m);
    }
    out
}

/// `Sigma^{ml}(xi, zeta)`: the layer-m activation covariance (or `xi . zeta`
/// at m = 0) times the product of derivative factors
/// `E phi'(h^k(xi)) phi'(h^k(zeta))` for k in m+1..=l.
pub fn sigma_ml(
    m: usize,
    l: usize,
    xi: &[f64],
    zeta: &[f64],
    param: &AbcParam,
    act: Activation,
    nodes: usize,
) -> Result<f64> {
    let depth = param.depth();
    if m > l {
        return Err(Error::InvalidArgument(format!("sigma_ml needs m <= l (got {m} > {l})")));
    }
    if l > depth {
        return Err(Error::LayerOutOfRange { index: l, max: depth });
    }
    // Canonical argument order: both quadrature factors are the same function
    // here, so sorting makes the numerical value exactly symmetric.
    let (xi, zeta) = if xi.iter().partial_cmp(zeta.iter()) == Some(std::cmp::Ordering::Greater) {
        (zeta, xi)
    } else {
        (xi, zeta)
    };
    let moments = propagate_moments(xi, zeta, act, l.max(1), nodes);
    let base = if m == 0 {
        xi.iter().zip(zeta.iter()).map(|(a, b)| a * b).sum::<f64>()
    } else {
        // E Z^{x^m(xi)} Z^{x^m(zeta)} from the layer-m preactivations.
        bivariate_expect(moments[m - 1], nodes, |a| act.value(a), |b| act.value(b))
    };
    let mut acc = base;
    for k in (m + 1)..=l {
        acc *= bivariate_expect(moments[k - 1], nodes, |a| act.deriv(a), |b| act.deriv(b));
    }
    Ok(acc)
}

/// Kernel values on a finite input set.
#[derive(Debug, Clone, Serialize)]
pub struct KernelTable {
    pub inputs: Vec<Vec<f64>>,
    /// values[i][j] = K(inputs[i], inputs[j]).
    pub values: Vec<Vec<f64>>,
    /// Set when the parametrization has `a_{L+1}+b_{L+1} > 2a_{L+1}+c` (the
    /// one-step-lag case): the kernel is then the last-layer covariance
    /// alone, as in the NNGP limit.
    pub lag_case: bool,
}

impl KernelTable {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    pub fn find(&self, x: &[f64]) -> Result<usize> {
        self.inputs
            .iter()
            .position(|v| v == x)
            .ok_or(Error::MissingKernelInput)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,value\n");
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out.push_str(&format!("{i},{j},{v}\n"));
            }
        }
        out
    }
}

/// The limit kernel of a kernel-regime parametrization:
/// `Sigma = [2a_{L+1}+c = 1] Sigma^{LL}
///        + [a_{L+1}+b_{L+1}+r = 1] sum_{m=ell-1}^{L-1} theta_{m+1} Sigma^{mL}`
/// with the indicator weights and the layer threshold `ell` decided by exact
/// rational exponent comparisons.
pub fn limit_kernel(
    param: &AbcParam,
    act: Activation,
    inputs: &[Vec<f64>],
    nodes: usize,
) -> Result<KernelTable> {
    let cls = param.classify();
    if cls.regime != Regime::KernelRegime {
        return Err(Error::NotKernelRegime(cls.regime.to_string()));
    }
    let depth = param.depth();
    let one = Rat::one();
    let al = param.a(depth + 1);
    let bl = param.b(depth + 1);
    let c = param.c();
    let last_update_max = al + al + c == one;
    let last_init_max = al + bl + param.r_value() == one;
    let lag_case = al + bl > al + al + c;
    let mut weights = vec![0.0; depth + 1]; // weight on Sigma^{mL}, m = 0..=L
    if lag_case {
        // One-step lag: the NNGP-limit form applies.
        if last_update_max {
            weights[depth] = 1.0;
        }
    } else {
        if last_update_max {
            weights[depth] = 1.0;
        }
        if last_init_max {
            // theta exponents: e_W[l] = a_{L+1}+b_{L+1}+c-1+2a_l (+1 at l=1);
            // e_l = min_{m<=l} e_W[m]; ell = first l with e_l = e_L.
            let mut e_w = Vec::with_capacity(depth);
            for l in 1..=depth {
                let ind = if l == 1 { Rat::one() } else { Rat::from_integer(0) };
                e_w.push(al + bl + c - one + param.a(l) + param.a(l) + ind);
            }
            let mut e_layer = Vec::with_capacity(depth);
            let mut running = e_w[0];
            for l in 0..depth {
                if e_w[l] < running {
                    running = e_w[l];
                }
                e_layer.push(running);
            }
            let e_last = e_layer[depth - 1];
            let ell = (1..=depth).find(|l| e_layer[l - 1] == e_last).unwrap();
            for m in (ell - 1)..depth {
                // vartheta_{m+1} = 1 iff theta_{W^{m+1}} carries the layer
                // scale, i.e. e_W[m+1] == e_layer[m+1].
                if e_w[m] == e_layer[m] {
                    weights[m] += 1.0;
                }
            }
        }
    }
    let n = inputs.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut k = 0.0;
            for (m, w) in weights.iter().enumerate() {
                if *w != 0.0 {
                    k += w * sigma_ml(m, depth, &inputs[i], &inputs[j], param, act, nodes)?;
                }
            }
            values[i][j] = k;
            values[j][i] = k;
        }
    }
    Ok(KernelTable { inputs: inputs.to_vec(), values, lag_case })
}

/// Kernel gradient descent: `f_{t+1}(xi) = f_t(xi) - eta K(xi, xi_t) L'(f_t(xi_t), y_t)`.
/// `f0` supplies the initial values on the table inputs (the kernel-regime
/// limit evolves deterministically conditioned on them). Training pairs are
/// (table index, target). Returns `f` on all table inputs at steps 0..=T.
pub fn kgd_run(
    table: &KernelTable,
    pairs: &[(usize, f64)],
    eta: f64,
    loss: Loss,
    t_steps: usize,
    f0: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let n = table.inputs.len();
    if f0.len() != n {
        return Err(Error::DimensionMismatch("f0 length".into()));
    }
    for (i, _) in pairs {
        if *i >= n {
            return Err(Error::MissingKernelInput);
        }
    }
    let mut f = f0.to_vec();
    let mut out = Vec::with_capacity(t_steps + 1);
    out.push(f.clone());
    for t in 0..t_steps {
        let (it, y) = pairs[t % pairs.len()];
        let chi = loss.prime_scalar(f[it], y);
        for (fi, row) in f.iter_mut().zip(0..n) {
            *fi -= eta * table.get(row, it) * chi;
        }
        out.push(f.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abc::NamedParam;
    use crate::mlp::{FiniteMlp, TrainRoutine};
    use crate::util::{log_log_slope, mean_stderr, rng_stream};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn ntp(l: usize) -> AbcParam {
        AbcParam::named(NamedParam::Ntp, l).unwrap()
    }

    #[test]
    fn sigma_identity_shallow() {
        let p = ntp(1);
        let s11 = sigma_ml(1, 1, &[0.8], &[-0.5], &p, Activation::Identity, 64).unwrap();
        assert!((s11 - 0.8 * -0.5).abs() < 1e-12);
        let s01 = sigma_ml(0, 1, &[0.8], &[-0.5], &p, Activation::Identity, 64).unwrap();
        assert!((s01 - 0.8 * -0.5).abs() < 1e-12);
        assert!(sigma_ml(2, 1, &[1.0], &[1.0], &p, Activation::Identity, 64).is_err());
    }

    #[test]
    fn sigma_relu_derivative_halves_on_diagonal() {
        let p = ntp(1);
        let xi = [0.9];
        let s01 = sigma_ml(0, 1, &xi, &xi, &p, Activation::Relu, 64).unwrap();
        assert!(
            (s01 - 0.9 * 0.9 * 0.5).abs() < 1e-10,
            "E[1(Z>0)] should be exactly 1/2 on the diagonal: {s01}"
        );
        // Cross-check against Monte Carlo off the diagonal.
        let zeta = [0.4];
        let got = sigma_ml(0, 1, &xi, &zeta, &p, Activation::Relu, 64).unwrap();
        let mut rng = rng_stream(3, &[1]);
        let m = 400_000;
        let (sa, sb, rho) = (0.9f64, 0.4f64, 1.0f64);
        let _ = rho;
        let mut vals = Vec::with_capacity(m);
        for _ in 0..m {
            let z: f64 = rng.sample(StandardNormal);
            // Collinear d=1 inputs share the same Gaussian direction.
            let a = sa * z;
            let b = sb * z;
            let va = if a > 0.0 { 1.0 } else { 0.0 };
            let vb = if b > 0.0 { 1.0 } else { 0.0 };
            vals.push(0.9 * 0.4 * va * vb);
        }
        let (mc, se) = mean_stderr(&vals);
        assert!((got - mc).abs() <= 4.0 * se.max(1e-4), "quad {got} vs mc {mc}");
    }

    #[test]
    fn ntp_limit_kernel_is_sum_of_sigmas() {
        let p = ntp(2);
        let inputs = vec![vec![1.0, 0.2], vec![-0.4, 0.9]];
        let table = limit_kernel(&p, Activation::Tanh, &inputs, 64).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..=2)
                    .map(|m| {
                        sigma_ml(m, 2, &inputs[i], &inputs[j], &p, Activation::Tanh, 64).unwrap()
                    })
                    .sum();
                assert!((table.get(i, j) - want).abs() < 1e-10);
            }
        }
        assert!(!table.lag_case);
    }

    #[test]
    fn nngp_param_gets_last_layer_kernel_only() {
        use crate::abc::rat_from_str as r;
        let p = AbcParam::new(
            vec![r("0").unwrap(), r("1/2").unwrap(), r("1/2").unwrap()],
            vec![r("0").unwrap(), r("0").unwrap(), r("1/2").unwrap()],
            r("0").unwrap(),
        )
        .unwrap();
        assert!(p.classify().nngp_limit);
        let inputs = vec![vec![0.7], vec![-0.3]];
        let table = limit_kernel(&p, Activation::Tanh, &inputs, 64).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want =
                    sigma_ml(2, 2, &inputs[i], &inputs[j], &p, Activation::Tanh, 64).unwrap();
                assert!((table.get(i, j) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn shallow_linear_ntp_kernel_is_two_xi_zeta() {
        let p = ntp(1);
        let inputs = vec![vec![1.0], vec![-0.6], vec![0.3]];
        let table = limit_kernel(&p, Activation::Identity, &inputs, 64).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = 2.0 * inputs[i][0] * inputs[j][0];
                assert!((table.get(i, j) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn feature_learning_param_is_rejected() {
        let p = AbcParam::named(NamedParam::Mup, 2).unwrap();
        assert!(matches!(
            limit_kernel(&p, Activation::Tanh, &[vec![1.0]], 16),
            Err(Error::NotKernelRegime(_))
        ));
    }

    #[test]
    fn sigma_diagonal_positive() {
        let p = ntp(2);
        for act in [Activation::Tanh, Activation::Relu, Activation::Gelu { sigma: 0.1 }] {
            let v = sigma_ml(2, 2, &[0.8, -0.1], &[0.8, -0.1], &p, act, 64).unwrap();
            assert!(v > 0.0, "{act:?}: {v}");
        }
    }

    #[test]
    fn kgd_zero_kernel_keeps_f_constant() {
        let table = KernelTable {
            inputs: vec![vec![1.0], vec![2.0]],
            values: vec![vec![0.0; 2]; 2],
            lag_case: false,
        };
        let out = kgd_run(&table, &[(0, 1.0)], 0.7, Loss::Mse, 5, &[0.3, -0.2]).unwrap();
        for step in &out {
            assert_eq!(step, &vec![0.3, -0.2]);
        }
    }

    #[test]
    fn kgd_single_step_substitution() {
        let table = KernelTable {
            inputs: vec![vec![1.0], vec![2.0]],
            values: vec![vec![2.0, 4.0], vec![4.0, 8.0]],
            lag_case: false,
        };
        let f0 = vec![0.1, -0.4];
        let eta = 0.3;
        let out = kgd_run(&table, &[(0, 1.0)], eta, Loss::Mse, 1, &f0).unwrap();
        let chi = f0[0] - 1.0;
        assert!((out[1][0] - (f0[0] - eta * 2.0 * chi)).abs() < 1e-15);
        assert!((out[1][1] - (f0[1] - eta * 4.0 * chi)).abs() < 1e-15);
    }

    #[test]
    fn kgd_deltas_scale_linearly_in_chi() {
        // One step from the same state: scaling L' by lambda scales the
        // per-step delta by lambda. MSE chi scales with (f0 - y).
        let table = KernelTable {
            inputs: vec![vec![1.0], vec![0.5]],
            values: vec![vec![2.0, 1.0], vec![1.0, 0.5]],
            lag_case: false,
        };
        let f0 = vec![0.0, 0.0];
        let a = kgd_run(&table, &[(0, 1.0)], 0.4, Loss::Mse, 1, &f0).unwrap();
        let b = kgd_run(&table, &[(0, 3.0)], 0.4, Loss::Mse, 1, &f0).unwrap();
        for i in 0..2 {
            let da = a[1][i] - f0[i];
            let db = b[1][i] - f0[i];
            assert!((db - 3.0 * da).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_kernel_gd_equals_explicit_linear_model() {
        // K(xi, zeta) = xi . zeta from f0 = 0 is exactly SGD on f(x) = w . x
        // with w0 = 0.
        let inputs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.7, -0.2]];
        let mut values = vec![vec![0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                values[i][j] =
                    inputs[i].iter().zip(inputs[j].iter()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let table = KernelTable { inputs: inputs.clone(), values, lag_case: false };
        let pairs = [(0usize, 1.0), (1, -0.5), (2, 0.7)];
        let eta = 0.25;
        let out = kgd_run(&table, &pairs, eta, Loss::Mse, 6, &[0.0; 3]).unwrap();
        let mut w = vec![0.0; 2];
        for t in 0..6 {
            let (it, y) = pairs[t % 3];
            for (i, f_kgd) in out[t].iter().enumerate() {
                let fw: f64 = w.iter().zip(inputs[i].iter()).map(|(a, b)| a * b).sum();
                assert!((fw - f_kgd).abs() < 1e-12, "t={t} i={i}");
            }
            let ft: f64 = w.iter().zip(inputs[it].iter()).map(|(a, b)| a * b).sum();
            let chi = ft - y;
            for (wi, xi) in w.iter_mut().zip(inputs[it].iter()) {
                *wi -= eta * chi * xi;
            }
        }
    }

    #[test]
    fn limit_kernel_matches_empirical_ntk_of_wide_net() {
        let p = ntp(1);
        let inputs = vec![vec![1.0], vec![-0.6]];
        let table = limit_kernel(&p, Activation::Tanh, &inputs, 64).unwrap();
        let n = 1 << 13;
        let seeds = 4;
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for s in 0..seeds {
                    let net = FiniteMlp::init(&p, n, 1, 1, Activation::Tanh, 300 + s).unwrap();
                    acc += net.empirical_ntk(&inputs[i], &inputs[j]).unwrap();
                }
                let emp = acc / seeds as f64;
                let want = table.get(i, j);
                assert!(
                    (emp - want).abs() < 0.08 * want.abs().max(1.0),
                    "K[{i}][{j}]: empirical {emp} vs limit {want}"
                );
            }
        }
    }

    #[test]
    fn wide_kernel_regime_nets_track_kgd() {
        // NTP tanh L=1: max_t |f_t - kgd f_t| shrinks with width.
        let p = ntp(1);
        let act = Activation::Tanh;
        let inputs = vec![vec![1.0], vec![-0.7], vec![0.4]];
        let table = limit_kernel(&p, act, &inputs, 64).unwrap();
        let pairs = [(0usize, 1.0), (1, -0.5)];
        let eta = 0.4;
        let t_steps = 5;
        let widths = [512usize, 2048, 8192];
        let seeds = 4;
        let mut gaps = Vec::new();
        for &n in &widths {
            let mut gap_acc = 0.0;
            for s in 0..seeds {
                let mut net = FiniteMlp::init(&p, n, 1, 1, act, 700 + s).unwrap();
                let f0: Vec<f64> =
                    inputs.iter().map(|x| net.forward(x).unwrap().0[0]).collect();
                let kgd = kgd_run(&table, &pairs, eta, Loss::Mse, t_steps, &f0).unwrap();
                let routine = TrainRoutine::new(
                    eta,
                    pairs.iter().map(|(i, y)| (inputs[*i].clone(), vec![*y])).collect(),
                    Loss::Mse,
                );
                let mut worst: f64 = 0.0;
                for t in 0..=t_steps {
                    for (i, x) in inputs.iter().enumerate() {
                        let f = net.forward(x).unwrap().0[0];
                        worst = worst.max((f - kgd[t][i]).abs());
                    }
                    if t < t_steps {
                        let (xi, y) = routine.pair(t);
                        let (xi, y) = (xi.to_vec(), y.to_vec());
                        net.sgd_step(&xi, &y, &routine).unwrap();
                    }
                }
                gap_acc += worst;
            }
            gaps.push(gap_acc / seeds as f64);
        }
        let xs: Vec<f64> = widths.iter().map(|w| *w as f64).collect();
        let slope = log_log_slope(&xs, &gaps);
        assert!(slope <= -0.3, "gap slope {slope} (gaps {gaps:?})");
    }

    #[test]
    fn lr_deficient_middle_layer_drops_out_of_the_kernel() {
        // L = 2 with the middle layer's effective update suppressed
        // (a_2 raised, b_2 lowered, a_2 + b_2 = 1/2 kept): its kernel piece
        // gets weight 0, leaving Sigma^{02} + Sigma^{22}.
        use crate::abc::rat_from_str as r;
        let p = AbcParam::new(
            vec![r("0").unwrap(), r("3/4").unwrap(), r("1/2").unwrap()],
            vec![r("0").unwrap(), r("-1/4").unwrap(), r("0").unwrap()],
            r("0").unwrap(),
        )
        .unwrap();
        let cls = p.classify();
        assert_eq!(cls.regime, crate::abc::Regime::KernelRegime);
        assert_eq!(cls.r, crate::abc::rat_from_str("1/2").unwrap());
        let inputs = vec![vec![1.0, -0.3], vec![0.4, 0.8]];
        let table = limit_kernel(&p, Activation::Tanh, &inputs, 64).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = sigma_ml(0, 2, &inputs[i], &inputs[j], &p, Activation::Tanh, 64)
                    .unwrap()
                    + sigma_ml(2, 2, &inputs[i], &inputs[j], &p, Activation::Tanh, 64).unwrap();
                assert!(
                    (table.get(i, j) - want).abs() < 1e-10,
                    "K[{i}][{j}] = {} vs {want}",
                    table.get(i, j)
                );
            }
        }
        // Physical check: one finite SGD step moves f by -eta K chi up to
        // O(n^{-1/2}) (the suppressed layer still contributes at finite n).
        let n = 4096;
        let eta = 0.5;
        let (xi, zeta) = (&inputs[0], &inputs[1]);
        let mut acc = 0.0;
        let seeds = 4u64;
        for s in 0..seeds {
            let mut net = FiniteMlp::init(&p, n, 2, 1, Activation::Tanh, 4200 + s).unwrap();
            let f0 = net.forward(zeta).unwrap().0[0];
            let chi = net.forward(xi).unwrap().0[0] - 1.0;
            let routine = TrainRoutine::new(eta, vec![(xi.clone(), vec![1.0])], Loss::Mse);
            net.sgd_step(xi, &[1.0], &routine).unwrap();
            let f1 = net.forward(zeta).unwrap().0[0];
            acc += (f1 - f0) / (-eta * chi) / seeds as f64;
        }
        let want = table.get(1, 0);
        assert!(
            (acc - want).abs() < 0.08 * want.abs().max(1.0),
            "one-step finite kernel {acc} vs limit {want}"
        );
    }

    #[test]
    fn lag_case_flags_and_returns_last_layer_kernel() {
        // a_{L+1} + b_{L+1} > 2 a_{L+1} + c: the one-step-lag case. With the
        // readout updated maximally the kernel is the last-layer covariance.
        use crate::abc::rat_from_str as r;
        let p = AbcParam::new(
            vec![r("0").unwrap(), r("0").unwrap()],
            vec![r("0").unwrap(), r("3/2").unwrap()],
            r("1").unwrap(),
        )
        .unwrap();
        let cls = p.classify();
        assert_eq!(cls.regime, crate::abc::Regime::KernelRegime);
        let inputs = vec![vec![0.9], vec![-0.4]];
        let table = limit_kernel(&p, Activation::Tanh, &inputs, 64).unwrap();
        assert!(table.lag_case);
        for i in 0..2 {
            for j in 0..2 {
                let want =
                    sigma_ml(1, 1, &inputs[i], &inputs[j], &p, Activation::Tanh, 64).unwrap();
                assert!((table.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn missing_input_is_rejected() {
        let table = KernelTable {
            inputs: vec![vec![1.0]],
            values: vec![vec![1.0]],
            lag_case: false,
        };
        assert!(kgd_run(&table, &[(3, 1.0)], 0.1, Loss::Mse, 1, &[0.0]).is_err());
        assert!(table.find(&[2.0]).is_err());
        assert_eq!(table.find(&[1.0]).unwrap(), 0);
    }
}
