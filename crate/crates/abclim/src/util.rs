//! Shared numerics: a small row-major matrix, seeded RNG streams,
//! deterministic reductions, least-squares slope fits, Gauss-Hermite nodes,
//! and a jittered Cholesky for small covariance matrices.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec shape");
        let mut y = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.iter()) {
                acc += a * b;
            }
            y[i] = acc;
        }
        y
    }

    /// y = A^T x.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "matvec_t shape");
        let mut y = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            let row = self.row(i);
            for (yj, a) in y.iter_mut().zip(row.iter()) {
                *yj += a * xi;
            }
        }
        y
    }

    /// C = A B.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.at(i, k);
                if aik == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                let orow = out.row_mut(i);
                for (o, b) in orow.iter_mut().zip(brow.iter()) {
                    *o += aik * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                *out.at_mut(j, i) = self.at(i, j);
            }
        }
        out
    }

    /// A += s * B.
    pub fn add_scaled(&mut self, other: &Mat, s: f64) {
        assert_eq!(self.data.len(), other.data.len(), "add_scaled shape");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// SplitMix64 step, used to derive independent stream seeds.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic RNG stream derived from a base seed and salts.
pub fn rng_stream(seed: u64, salts: &[u64]) -> ChaCha8Rng {
    let mut s = splitmix64(seed ^ 0x51ed_2701_8c93_41ab);
    for &salt in salts {
        s = splitmix64(s ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    ChaCha8Rng::seed_from_u64(s)
}

/// Counter-based standard normal: a pure function of (seed, salts), so
/// per-particle streams need no state and parallel evaluation is bitwise
/// reproducible. Box-Muller over two splitmix64 uniforms.
pub fn counter_normal(seed: u64, salts: &[u64]) -> f64 {
    let mut s = splitmix64(seed ^ 0xa076_1d64_78bd_642f);
    for &salt in salts {
        s = splitmix64(s ^ salt.wrapping_mul(0xe703_7ed1_a0b4_28db));
    }
    let u1_bits = splitmix64(s);
    let u2_bits = splitmix64(u1_bits ^ 0x8ebc_6af0_9c88_c6e3);
    // u1 in (0, 1], u2 in [0, 1).
    let u1 = ((u1_bits >> 11) as f64 + 1.0) / 9_007_199_254_740_992.0;
    let u2 = (u2_bits >> 11) as f64 / 9_007_199_254_740_992.0;
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fill a slice with iid standard normals from `rng`.
pub fn fill_standard_normal<R: Rng>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// Deterministic chunked sum: identical result in serial and parallel runs.
pub fn tree_sum(values: &[f64]) -> f64 {
    const CHUNK: usize = 4096;
    if values.len() <= CHUNK {
        return values.iter().sum();
    }
    let partials: Vec<f64> = values.chunks(CHUNK).map(|c| c.iter().sum()).collect();
    tree_sum(&partials)
}

/// Mean and standard error of the mean, with a fixed reduction order.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n > 0, "mean of empty slice");
    let mean = tree_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = tree_sum(&sq) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Least-squares slope of y against x.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&xi, &yi) in x.iter().zip(y.iter()) {
        num += (xi - mx) * (yi - my);
        den += (xi - mx) * (xi - mx);
    }
    num / den
}

/// Slope of log(y) against log(x) (log-log fit).
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    ls_slope(&lx, &ly)
}

/// Best least-squares fit y = m*x through the origin; returns (m, rms residual).
pub fn fit_linear_through_origin(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let num: f64 = x.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
    let den: f64 = x.iter().map(|a| a * a).sum();
    let m = num / den;
    let ss: f64 = x.iter().zip(y.iter()).map(|(a, b)| (b - m * a) * (b - m * a)).sum();
    (m, (ss / x.len() as f64).sqrt())
}

/// Gauss-Hermite nodes/weights for weight exp(-x^2), by Newton iteration on
/// the physicists' Hermite recurrence. `E f(Z) = sum_i w_i f(sqrt(2) x_i) / sqrt(pi)`
/// for standard normal Z.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    let mut z = 0.0f64;
    for i in 0..m {
        // Standard initial guesses (Numerical Recipes).
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = std::f64::consts::PI.powf(-0.25);
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2
                    - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    // Ascending order.
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

/// Nodes/weights for expectations of a standard normal: `E f(Z) ~= sum w_i f(z_i)`.
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_hermite(n);
    let s = std::f64::consts::PI.sqrt();
    let nodes = x.iter().map(|v| v * std::f64::consts::SQRT_2).collect();
    let weights = w.iter().map(|v| v / s).collect();
    (nodes, weights)
}

/// Lower-triangular Cholesky factor of a symmetric matrix plus `jitter * I`.
/// Returns None when a pivot goes nonpositive.
pub fn cholesky_jittered(a: &Mat, jitter: f64) -> Option<Mat> {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.at(i, j);
            if i == j {
                sum += jitter;
            }
            for k in 0..j {
                sum -= l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                *l.at_mut(i, j) = sum.sqrt();
            } else {
                *l.at_mut(i, j) = sum / l.at(j, j);
            }
        }
    }
    Some(l)
}

/// Smallest eigenvalue of a small symmetric matrix, by cyclic Jacobi rotation.
pub fn min_eigenvalue_symmetric(a: &Mat) -> f64 {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    if n == 0 {
        return 0.0;
    }
    let mut m = a.clone();
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.at(i, j).abs();
            }
        }
        if off < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.at(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m.at(q, q) - m.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    *m.at_mut(k, p) = c * mkp - s * mkq;
                    *m.at_mut(k, q) = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    *m.at_mut(p, k) = c * mpk - s * mqk;
                    *m.at_mut(q, k) = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m.at(i, i)).fold(f64::INFINITY, f64::min)
}

/// Solve L w = b for lower-triangular L (forward substitution).
pub fn forward_substitute(l: &Mat, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut acc = b[i];
        for k in 0..i {
            acc -= l.at(i, k) * w[k];
        }
        w[i] = acc / l.at(i, i);
    }
    w
}

/// Inverse of a lower-triangular matrix.
pub fn invert_lower_triangular(l: &Mat) -> Mat {
    let n = l.rows;
    let mut inv = Mat::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = forward_substitute(l, &e);
        for i in 0..n {
            *inv.at_mut(i, j) = col[i];
        }
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose_agree() {
        let a = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(a.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(a.transpose().matvec(&[1.0, 1.0]), a.matvec_t(&[1.0, 1.0]));
    }

    #[test]
    fn tree_sum_matches_serial() {
        let v: Vec<f64> = (0..20_000).map(|i| (i as f64).sin()).collect();
        let serial: f64 = v.iter().sum();
        assert!((tree_sum(&v) - serial).abs() < 1e-9);
    }

    #[test]
    fn gauss_hermite_integrates_moments() {
        let (z, w) = gauss_hermite_normal(32);
        let m2: f64 = z.iter().zip(&w).map(|(zi, wi)| wi * zi * zi).sum();
        let m4: f64 = z.iter().zip(&w).map(|(zi, wi)| wi * zi.powi(4)).sum();
        assert!((m2 - 1.0).abs() < 1e-12);
        assert!((m4 - 3.0).abs() < 1e-10);
    }

    #[test]
    fn cholesky_recovers_matrix() {
        let a = Mat::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let l = cholesky_jittered(&a, 0.0).unwrap();
        let lt = l.matmul(&l.transpose());
        for (x, y) in lt.data.iter().zip(a.data.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobi_min_eigenvalue() {
        let a = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        assert!((min_eigenvalue_symmetric(&a) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn slope_fit_exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.5 * v - 1.0).collect();
        assert!((ls_slope(&x, &y) - 2.5).abs() < 1e-12);
    }
}
