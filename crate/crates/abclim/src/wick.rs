//! Exact infinite-width limits for polynomial activations.
//!
//! Every limit random variable is represented as a polynomial over a basis of
//! independent standard Gaussians. New correlated Gaussians (the hat-Z draws
//! of the depth-2 limits) are registered through a Cholesky row over fresh
//! basis variables, with covariance entries computed exactly from polynomial
//! expectations at creation time. Expectations reduce to Gaussian moments:
//! small ones go through Isserlis pairing directly, large products through
//! exact tensor Gauss-Hermite quadrature (exact for polynomials at sufficient
//! node counts).
//!
//! Cost grows exponentially in the step count (the nesting of the activation
//! and its derivative roughly squares the degree each step), so this engine
//! is an oracle for short horizons, not a production path; hard caps guard
//! every growth axis.

use crate::mlp::{Activation, ScalarRoutine};
use crate::util::{forward_substitute, gauss_hermite_normal, invert_lower_triangular, Mat};
use crate::{Error, Result};
use std::collections::{BTreeMap, HashMap};

/// Maximum number of Gaussian basis variables a polynomial may touch.
pub const MAX_VARS: usize = 24;

/// Exponent vector over the basis variables.
pub type Mono = [u8; MAX_VARS];

const ZERO_MONO: Mono = [0u8; MAX_VARS];

/// Resource caps for the exact engine.
#[derive(Debug, Clone, Copy)]
pub struct WickCaps {
    /// Maximum total degree of any monomial sent to an expectation.
    pub degree_cap: usize,
    /// Maximum number of terms in any polynomial.
    pub term_cap: usize,
    /// Maximum number of recorded steps (t = 0 .. t_cap - 1) per run.
    pub t_cap: usize,
    /// Maximum grid size for quadrature-based expectations.
    pub grid_cap: usize,
}

impl Default for WickCaps {
    fn default() -> Self {
        WickCaps { degree_cap: 96, term_cap: 1 << 20, t_cap: 4, grid_cap: 50_000_000 }
    }
}

/// Double factorial (k-1)!! for even k; odd k maps to 0 (odd moments vanish).
fn gaussian_moment_1d(k: usize) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    let mut acc = 1.0;
    let mut j = 1;
    while j < k {
        acc *= j as f64;
        j += 2;
    }
    acc
}

/// `E prod_i Z_i^{k_i}` for jointly Gaussian `Z` with covariance `cov`, by
/// memoized recursive pairing (Gaussian integration by parts); zero-covariance
/// branches are pruned, so independent bases cost next to nothing.
pub fn isserlis(multi_index: &[u32], cov: &Mat, degree_cap: usize) -> Result<f64> {
    if cov.rows != cov.cols || cov.rows != multi_index.len() {
        return Err(Error::DimensionMismatch("isserlis cov shape".into()));
    }
    let degree: u32 = multi_index.iter().sum();
    if degree as usize > degree_cap {
        return Err(Error::DegreeCap { degree: degree as usize, cap: degree_cap });
    }
    if degree % 2 == 1 {
        return Ok(0.0);
    }
    let k: Vec<u16> = multi_index.iter().map(|v| *v as u16).collect();
    let mut memo: HashMap<Vec<u16>, f64> = HashMap::new();
    Ok(isserlis_rec(&k, cov, &mut memo))
}

fn isserlis_rec(k: &[u16], cov: &Mat, memo: &mut HashMap<Vec<u16>, f64>) -> f64 {
    let i = match k.iter().position(|v| *v > 0) {
        None => return 1.0,
        Some(i) => i,
    };
    if let Some(v) = memo.get(k) {
        return *v;
    }
    let mut acc = 0.0;
    // Pair one copy of Z_i with another copy of itself...
    if k[i] >= 2 && cov.at(i, i) != 0.0 {
        let mut rest = k.to_vec();
        rest[i] -= 2;
        acc += (k[i] - 1) as f64 * cov.at(i, i) * isserlis_rec(&rest, cov, memo);
    }
    // ... or with a copy of any other variable.
    for j in 0..k.len() {
        if j == i || k[j] == 0 || cov.at(i, j) == 0.0 {
            continue;
        }
        let mut rest = k.to_vec();
        rest[i] -= 1;
        rest[j] -= 1;
        acc += k[j] as f64 * cov.at(i, j) * isserlis_rec(&rest, cov, memo);
    }
    memo.insert(k.to_vec(), acc);
    acc
}

/// Polynomial over independent standard Gaussian basis variables.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPoly {
    terms: BTreeMap<Mono, f64>,
}

impl GaussianPoly {
    pub fn zero() -> Self {
        GaussianPoly { terms: BTreeMap::new() }
    }

    pub fn constant(c: f64) -> Self {
        let mut p = GaussianPoly::zero();
        if c != 0.0 {
            p.terms.insert(ZERO_MONO, c);
        }
        p
    }

    pub fn var(i: usize) -> Self {
        assert!(i < MAX_VARS, "basis variable index over MAX_VARS");
        let mut m = ZERO_MONO;
        m[i] = 1;
        let mut p = GaussianPoly::zero();
        p.terms.insert(m, 1.0);
        p
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn total_degree(&self) -> usize {
        self.terms
            .keys()
            .map(|m| m.iter().map(|v| *v as usize).sum())
            .max()
            .unwrap_or(0)
    }

    /// Basis variables with a nonzero exponent somewhere.
    pub fn active_vars(&self) -> Vec<usize> {
        let mut seen = [false; MAX_VARS];
        for m in self.terms.keys() {
            for (i, e) in m.iter().enumerate() {
                if *e > 0 {
                    seen[i] = true;
                }
            }
        }
        (0..MAX_VARS).filter(|i| seen[*i]).collect()
    }

    pub fn add_scaled(&mut self, other: &GaussianPoly, s: f64) {
        if s == 0.0 {
            return;
        }
        for (m, c) in other.terms.iter() {
            let e = self.terms.entry(*m).or_insert(0.0);
            *e += s * c;
            if *e == 0.0 {
                self.terms.remove(m);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        if s == 0.0 {
            self.terms.clear();
            return;
        }
        for c in self.terms.values_mut() {
            *c *= s;
        }
    }

    pub fn mul(&self, other: &GaussianPoly, caps: &WickCaps) -> Result<GaussianPoly> {
        let mut out = GaussianPoly::zero();
        for (ma, ca) in self.terms.iter() {
            for (mb, cb) in other.terms.iter() {
                let mut m = *ma;
                let mut deg = 0usize;
                for (mi, bi) in m.iter_mut().zip(mb.iter()) {
                    let sum = *mi as usize + *bi as usize;
                    if sum > u8::MAX as usize {
                        return Err(Error::DegreeCap { degree: sum, cap: u8::MAX as usize });
                    }
                    *mi = sum as u8;
                    deg += sum;
                }
                if deg > caps.degree_cap {
                    return Err(Error::DegreeCap { degree: deg, cap: caps.degree_cap });
                }
                let e = out.terms.entry(m).or_insert(0.0);
                *e += ca * cb;
                if *e == 0.0 {
                    out.terms.remove(&m);
                }
            }
            if out.terms.len() > caps.term_cap {
                return Err(Error::TermCap { terms: out.terms.len(), cap: caps.term_cap });
            }
        }
        Ok(out)
    }

    /// Symbolic partial derivative w.r.t. basis variable `i`.
    pub fn derivative(&self, i: usize) -> GaussianPoly {
        let mut out = GaussianPoly::zero();
        for (m, c) in self.terms.iter() {
            if m[i] == 0 {
                continue;
            }
            let mut dm = *m;
            dm[i] -= 1;
            let e = out.terms.entry(dm).or_insert(0.0);
            *e += c * m[i] as f64;
            if *e == 0.0 {
                out.terms.remove(&dm);
            }
        }
        out
    }

    /// Exact expectation over the independent standard Gaussian basis,
    /// directly from per-variable moments.
    fn expect_direct(&self) -> f64 {
        let mut acc = 0.0;
        'outer: for (m, c) in self.terms.iter() {
            let mut w = 1.0;
            for e in m.iter() {
                if *e % 2 == 1 {
                    continue 'outer;
                }
                if *e > 0 {
                    w *= gaussian_moment_1d(*e as usize);
                }
            }
            acc += c * w;
        }
        acc
    }

    /// Evaluate on the tensor grid over `vars` (recursive partial evaluation;
    /// index order: `vars[0]` slowest, `vars.last()` fastest).
    fn eval_on_grid(&self, vars: &[usize], nodes: &[f64]) -> Vec<f64> {
        if vars.is_empty() {
            return vec![self.terms.get(&ZERO_MONO).copied().unwrap_or(0.0)];
        }
        let v = vars[vars.len() - 1];
        // Group terms by the exponent of v, with v zeroed out of the monomial.
        let mut groups: BTreeMap<u8, BTreeMap<Mono, f64>> = BTreeMap::new();
        for (m, c) in self.terms.iter() {
            let e = m[v];
            let mut mm = *m;
            mm[v] = 0;
            *groups.entry(e).or_default().entry(mm).or_insert(0.0) += c;
        }
        let rest = &vars[..vars.len() - 1];
        let block = nodes.len().pow(rest.len() as u32);
        let mut out = vec![0.0; nodes.len() * block];
        for (ni, &z) in nodes.iter().enumerate() {
            let mut reduced: BTreeMap<Mono, f64> = BTreeMap::new();
            for (e, sub) in groups.iter() {
                let f = z.powi(*e as i32);
                for (m, c) in sub.iter() {
                    *reduced.entry(*m).or_insert(0.0) += c * f;
                }
            }
            let sub = GaussianPoly { terms: reduced }.eval_on_grid(rest, nodes);
            for (bi, val) in sub.iter().enumerate() {
                out[bi * nodes.len() + ni] = *val;
            }
        }
        out
    }
}

/// Exact expectation of a polynomial over the basis, honoring the caps.
pub fn poly_expect(p: &GaussianPoly, caps: &WickCaps) -> Result<f64> {
    let deg = p.total_degree();
    if deg > caps.degree_cap {
        return Err(Error::DegreeCap { degree: deg, cap: caps.degree_cap });
    }
    if p.num_terms() > caps.term_cap {
        return Err(Error::TermCap { terms: p.num_terms(), cap: caps.term_cap });
    }
    Ok(p.expect_direct())
}

/// Exact `E[p q]` without forming the product when it would be large:
/// falls back to tensor Gauss-Hermite quadrature over the union of active
/// variables, with the node count chosen for polynomial exactness.
pub fn expect_product(p: &GaussianPoly, q: &GaussianPoly, caps: &WickCaps) -> Result<f64> {
    let deg = p.total_degree() + q.total_degree();
    if deg > caps.degree_cap {
        return Err(Error::DegreeCap { degree: deg, cap: caps.degree_cap });
    }
    let pairs = p.num_terms().saturating_mul(q.num_terms());
    if pairs <= 1_000_000 {
        let prod = p.mul(q, &WickCaps { term_cap: usize::MAX, ..*caps })?;
        return Ok(prod.expect_direct());
    }
    // Quadrature route.
    let mut vars: Vec<usize> = p.active_vars();
    for v in q.active_vars() {
        if !vars.contains(&v) {
            vars.push(v);
        }
    }
    vars.sort_unstable();
    let n_nodes = deg / 2 + 1;
    let grid = (n_nodes as u128).pow(vars.len() as u32);
    if grid > caps.grid_cap as u128 {
        return Err(Error::TermCap { terms: grid as usize, cap: caps.grid_cap });
    }
    let (nodes, weights) = gauss_hermite_normal(n_nodes);
    let pv = p.eval_on_grid(&vars, &nodes);
    let qv = q.eval_on_grid(&vars, &nodes);
    let mut acc = 0.0;
    for (idx, (a, b)) in pv.iter().zip(qv.iter()).enumerate() {
        let mut w = 1.0;
        let mut rem = idx;
        for _ in 0..vars.len() {
            w *= weights[rem % n_nodes];
            rem /= n_nodes;
        }
        acc += w * a * b;
    }
    Ok(acc)
}

/// Compose a polynomial activation with a polynomial: `phi(p)`.
pub fn act_compose(p: &GaussianPoly, phi: Activation, caps: &WickCaps) -> Result<GaussianPoly> {
    match phi {
        Activation::Identity => Ok(p.clone()),
        Activation::Quadratic => p.mul(p, caps),
        other => Err(Error::InvalidArgument(format!(
            "exact engine supports polynomial activations only (got {other:?})"
        ))),
    }
}

/// `phi'(p)` for polynomial `phi`.
pub fn act_deriv_compose(p: &GaussianPoly, phi: Activation) -> Result<GaussianPoly> {
    match phi {
        Activation::Identity => Ok(GaussianPoly::constant(1.0)),
        Activation::Quadratic => {
            let mut q = p.clone();
            q.scale(2.0);
            Ok(q)
        }
        other => Err(Error::InvalidArgument(format!(
            "exact engine supports polynomial activations only (got {other:?})"
        ))),
    }
}

/// Registry of correlated Gaussians expanded over fresh independent basis
/// variables: entry i is `sum_s rows[i][s] eta_{var_ids[s]}`.
struct EtaBasis {
    labels: Vec<String>,
    rows: Vec<Vec<f64>>,
    cov: Vec<Vec<f64>>,
    var_ids: Vec<usize>,
}

impl EtaBasis {
    fn new() -> Self {
        EtaBasis { labels: Vec::new(), rows: Vec::new(), cov: Vec::new(), var_ids: Vec::new() }
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    /// Register a new Gaussian with the given covariance row against the
    /// existing entries (last element of `cov_row` is the variance).
    fn extend(
        &mut self,
        label: String,
        cov_row: &[f64],
        next_var: &mut usize,
    ) -> Result<GaussianPoly> {
        let k = self.len();
        assert_eq!(cov_row.len(), k + 1, "cov row must include the diagonal");
        if *next_var >= MAX_VARS {
            return Err(Error::VarCap { vars: *next_var + 1, cap: MAX_VARS });
        }
        let lmat = self.chol_mat();
        let w = forward_substitute(&lmat, &cov_row[..k]);
        let wsq: f64 = w.iter().map(|v| v * v).sum();
        let mut pivot_sq = cov_row[k] - wsq;
        if pivot_sq <= 0.0 {
            // Jitter escalation for near-degenerate histories, scaled to the
            // variance so large-variance labels get a proportionate floor.
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
                    let m = Mat::from_rows(&full);
                    return Err(Error::NotPsd(crate::util::min_eigenvalue_symmetric(&m)));
                }
            }
            pivot_sq = cov_row[k] + jitter - wsq;
        }
        let mut row = w;
        row.push(pivot_sq.sqrt());
        self.labels.push(label);
        for (i, r) in self.cov.iter_mut().enumerate() {
            r.push(cov_row[i]);
        }
        self.cov.push(cov_row.to_vec());
        self.var_ids.push(*next_var);
        *next_var += 1;
        let mut p = GaussianPoly::zero();
        for (s, c) in row.iter().enumerate() {
            if *c != 0.0 {
                p.add_scaled(&GaussianPoly::var(self.var_ids[s]), *c);
            }
        }
        self.rows.push(row);
        Ok(p)
    }

    fn chol_mat(&self) -> Mat {
        let k = self.len();
        let mut m = Mat::zeros(k, k);
        for (i, row) in self.rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                *m.at_mut(i, j) = *v;
            }
        }
        m
    }

    /// Convert per-eta expectations `E d p / d eta_s` into per-entry
    /// symbolic partials `E d p / d hatZ_j` through the inverse Cholesky.
    fn theta_from_eta_derivs(&self, eta_expect: &[f64]) -> Vec<f64> {
        let k = self.len();
        let inv = invert_lower_triangular(&self.chol_mat());
        (0..k)
            .map(|j| (0..k).map(|s| inv.at(s, j) * eta_expect[s]).sum())
            .collect()
    }
}

/// Which limit to evolve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExactDepth {
    One,
    TwoDecoupled,
    TwoCoupled,
}

/// Exact limit trajectory: `t_records` recorded steps. Step t = 0 records the
/// state before any update, so `t_records` points mean `t_records - 1` SGD
/// updates.
#[derive(Debug, Clone)]
pub struct ExactTrajectory {
    pub f_train: Vec<f64>,
    pub chi: Vec<f64>,
    pub loss: Vec<f64>,
    /// `probe_logits[t][p]`.
    pub probe_logits: Vec<Vec<f64>>,
    /// ZDot coefficients entering the training-input forward pass at each
    /// step (coupled mode): `theta_fwd[t][r]` multiplies `Z^{dhbar_r}`.
    pub theta_fwd: Vec<Vec<f64>>,
}

/// Evolve the exact infinite-width dynamics for a polynomial activation.
pub fn exact_run(
    depth: ExactDepth,
    phi: Activation,
    routine: &ScalarRoutine,
    t_records: usize,
    probes: &[f64],
    caps: &WickCaps,
) -> Result<ExactTrajectory> {
    exact_run_opts(depth, phi, routine, t_records, probes, caps, true)
}

/// As [`exact_run`], with control over whether the transpose Z-dot sum
/// includes the current step's forward draw (the general program-order rule)
/// or stops one step earlier.
#[allow(clippy::too_many_arguments)]
pub fn exact_run_opts(
    depth: ExactDepth,
    phi: Activation,
    routine: &ScalarRoutine,
    t_records: usize,
    probes: &[f64],
    caps: &WickCaps,
    zdot_current: bool,
) -> Result<ExactTrajectory> {
    if t_records > caps.t_cap {
        return Err(Error::StepCap { steps: t_records, cap: caps.t_cap });
    }
    if !phi.is_polynomial() {
        return Err(Error::InvalidArgument(
            "exact engine supports polynomial activations only".into(),
        ));
    }
    match depth {
        ExactDepth::One => exact_run_depth1(phi, routine, t_records, probes, caps),
        ExactDepth::TwoDecoupled => {
            exact_run_depth2(phi, routine, t_records, probes, caps, false, zdot_current)
        }
        ExactDepth::TwoCoupled => {
            exact_run_depth2(phi, routine, t_records, probes, caps, true, zdot_current)
        }
    }
}

fn exact_run_depth1(
    phi: Activation,
    routine: &ScalarRoutine,
    t_records: usize,
    probes: &[f64],
    caps: &WickCaps,
) -> Result<ExactTrajectory> {
    // Basis: var 0 = Z^{U_0}, var 1 = Z^{nV_0}.
    let mut u = GaussianPoly::var(0);
    let mut v = GaussianPoly::var(1);
    let mut out = ExactTrajectory {
        f_train: Vec::new(),
        chi: Vec::new(),
        loss: Vec::new(),
        probe_logits: Vec::new(),
        theta_fwd: Vec::new(),
    };
    for t in 0..t_records {
        let (xi_t, y_t) = routine.pair(t);
        let mut h = u.clone();
        h.scale(xi_t);
        let x = act_compose(&h, phi, caps)?;
        let f = expect_product(&v, &x, caps)?;
        out.f_train.push(f);
        out.loss.push(routine.loss.value_scalar(f, y_t));
        let mut plogits = Vec::with_capacity(probes.len());
        for &pz in probes {
            let mut hp = u.clone();
            hp.scale(pz);
            let xp = act_compose(&hp, phi, caps)?;
            plogits.push(expect_product(&v, &xp, caps)?);
        }
        out.probe_logits.push(plogits);
        if t + 1 == t_records {
            break;
        }
        let chi = routine.loss.prime_scalar(f, y_t);
        out.chi.push(chi);
        // V update: v -= eta chi x; U update: u -= eta chi xi v phi'(h).
        let mut v_next = v.clone();
        v_next.add_scaled(&x, -routine.eta * chi);
        let dphi = act_deriv_compose(&h, phi)?;
        let vdphi = v.mul(&dphi, caps)?;
        let mut u_next = u;
        u_next.add_scaled(&vdphi, -routine.eta * chi * xi_t);
        u = u_next;
        v = v_next;
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn exact_run_depth2(
    phi: Activation,
    routine: &ScalarRoutine,
    t_records: usize,
    probes: &[f64],
    caps: &WickCaps,
    coupled: bool,
    zdot_current: bool,
) -> Result<ExactTrajectory> {
    // Vars: 0 = Z^{U_0}, 1 = Z^{nV_0}; the rest are allocated to draws.
    let mut next_var = 2usize;
    let mut u = GaussianPoly::var(0);
    let mut v = GaussianPoly::var(1);
    let mut fwd = EtaBasis::new();
    let mut bwd = EtaBasis::new();
    // Per forward label: the lower-layer activation polynomial (for future
    // covariance rows) and the training-step index when it is one.
    let mut fwd_label_x: Vec<GaussianPoly> = Vec::new();
    let mut fwd_label_train: Vec<Option<usize>> = Vec::new();
    let mut x_train: Vec<GaussianPoly> = Vec::new();
    let mut dhbar: Vec<GaussianPoly> = Vec::new();
    let mut chis: Vec<f64> = Vec::new();
    let mut out = ExactTrajectory {
        f_train: Vec::new(),
        chi: Vec::new(),
        loss: Vec::new(),
        probe_logits: Vec::new(),
        theta_fwd: Vec::new(),
    };
    let eta = routine.eta;
    for t in 0..t_records {
        let (xi_t, y_t) = routine.pair(t);
        let mut f_train_t = None;
        let mut hbar_train = None;
        let mut h_train = None;
        let mut plogits = Vec::with_capacity(probes.len());
        // Forward for the training input first, then the probes.
        let inputs: Vec<(f64, bool)> = std::iter::once((xi_t, true))
            .chain(probes.iter().map(|&p| (p, false)))
            .collect();
        for (zeta, is_train) in inputs {
            let mut h = u.clone();
            h.scale(zeta);
            let x = act_compose(&h, phi, caps)?;
            // Covariance row against all existing forward labels.
            let mut cov_row = Vec::with_capacity(fwd.len() + 1);
            for old in fwd_label_x.iter() {
                cov_row.push(expect_product(&x, old, caps)?);
            }
            cov_row.push(expect_product(&x, &x, caps)?);
            let zhat = fwd.extend(format!("Wx[{t}]({zeta})"), &cov_row, &mut next_var)?;
            // ZDot from the transpose use in backprop: coefficients on the
            // dhbar_r of earlier steps.
            let mut hbar = zhat;
            let mut thetas = Vec::new();
            if coupled && bwd.len() > 0 {
                let eta_expect: Vec<f64> = bwd
                    .var_ids
                    .iter()
                    .map(|&vid| poly_expect(&x.derivative(vid), caps))
                    .collect::<Result<_>>()?;
                thetas = bwd.theta_from_eta_derivs(&eta_expect);
                for (r, th) in thetas.iter().enumerate() {
                    hbar.add_scaled(&dhbar[r], *th);
                }
            }
            // Delta W contribution: - eta sum_s chi_s E[x_s x] dhbar_s.
            for (s, chi_s) in chis.iter().enumerate() {
                let lbl = fwd_label_train
                    .iter()
                    .position(|v| *v == Some(s))
                    .expect("training label registered");
                hbar.add_scaled(&dhbar[s], -eta * chi_s * cov_row[lbl]);
            }
            let xbar = act_compose(&hbar, phi, caps)?;
            let f = expect_product(&v, &xbar, caps)?;
            fwd_label_x.push(x.clone());
            if is_train {
                fwd_label_train.push(Some(x_train.len()));
                x_train.push(x);
                f_train_t = Some(f);
                hbar_train = Some(hbar);
                h_train = Some(h);
                out.theta_fwd.push(thetas);
            } else {
                fwd_label_train.push(None);
                plogits.push(f);
            }
        }
        let f = f_train_t.unwrap();
        out.f_train.push(f);
        out.loss.push(routine.loss.value_scalar(f, y_t));
        out.probe_logits.push(plogits);
        if t + 1 == t_records {
            break;
        }
        let chi = routine.loss.prime_scalar(f, y_t);
        out.chi.push(chi);
        // Backward pass at the training point.
        let hbar_t = hbar_train.unwrap();
        let h_t = h_train.unwrap();
        let dphi_bar = act_deriv_compose(&hbar_t, phi)?;
        let dhbar_t = dphi_bar.mul(&v, caps)?;
        let mut cov_row = Vec::with_capacity(bwd.len() + 1);
        for old in dhbar.iter() {
            cov_row.push(expect_product(&dhbar_t, old, caps)?);
        }
        cov_row.push(expect_product(&dhbar_t, &dhbar_t, caps)?);
        let zhat_b = bwd.extend(format!("Wtdhbar[{t}]"), &cov_row, &mut next_var)?;
        let mut dx = zhat_b;
        if coupled {
            // ZDot for the transpose multiply: sum over forward draws. Only
            // training labels can carry dependence (probe draws are leaves).
            let eta_expect: Vec<f64> = fwd
                .var_ids
                .iter()
                .map(|&vid| poly_expect(&dhbar_t.derivative(vid), caps))
                .collect::<Result<_>>()?;
            let thetas = fwd.theta_from_eta_derivs(&eta_expect);
            for (lbl, th) in thetas.iter().enumerate() {
                if *th == 0.0 {
                    continue;
                }
                if let Some(s) = fwd_label_train[lbl] {
                    if !zdot_current && s == t {
                        continue;
                    }
                    dx.add_scaled(&x_train[s], *th);
                }
            }
        }
        for (s, chi_s) in chis.iter().enumerate() {
            dx.add_scaled(&x_train[s], -eta * chi_s * cov_row[s]);
        }
        let dphi_h = act_deriv_compose(&h_t, phi)?;
        let dh = dphi_h.mul(&dx, caps)?;
        // Parameter updates.
        let xbar_t = act_compose(&hbar_t, phi, caps)?;
        let mut v_next = v.clone();
        v_next.add_scaled(&xbar_t, -eta * chi);
        let mut u_next = u;
        u_next.add_scaled(&dh, -eta * chi * xi_t);
        u = u_next;
        v = v_next;
        dhbar.push(dhbar_t);
        chis.push(chi);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linlim::{lin1lp_run, LinRoutine};
    use crate::mlp::Loss;
    use crate::util::{mean_stderr, rng_stream};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn caps() -> WickCaps {
        WickCaps::default()
    }

    #[test]
    fn isserlis_fourth_moment() {
        let cov = Mat::from_rows(&[vec![1.0]]);
        assert_eq!(isserlis(&[4], &cov, 32).unwrap(), 3.0);
        assert_eq!(isserlis(&[3], &cov, 32).unwrap(), 0.0);
        assert_eq!(isserlis(&[0], &cov, 32).unwrap(), 1.0);
    }

    #[test]
    fn isserlis_two_two_with_correlation() {
        let rho = 0.37;
        let cov = Mat::from_rows(&[vec![1.0, rho], vec![rho, 1.0]]);
        let got = isserlis(&[2, 2], &cov, 32).unwrap();
        assert!((got - (1.0 + 2.0 * rho * rho)).abs() < 1e-12);
    }

    #[test]
    fn isserlis_degree_cap_errors() {
        let cov = Mat::from_rows(&[vec![1.0]]);
        assert!(matches!(
            isserlis(&[40], &cov, 32),
            Err(Error::DegreeCap { degree: 40, cap: 32 })
        ));
    }

    #[test]
    fn isserlis_matches_monte_carlo_on_random_psd() {
        let mut rng = rng_stream(17, &[0]);
        for case in 0..6 {
            let dim = 2 + case % 3;
            // Random PSD: A A^T + small ridge.
            let mut a = Mat::zeros(dim, dim);
            for v in a.data.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let mut cov = a.matmul(&a.transpose());
            for i in 0..dim {
                *cov.at_mut(i, i) += 0.1;
            }
            let mut idx = vec![0u32; dim];
            for v in idx.iter_mut() {
                *v = rng.gen_range(0..3);
            }
            if idx.iter().sum::<u32>() % 2 == 1 {
                idx[0] += 1;
            }
            let exact = isserlis(&idx, &cov, 32).unwrap();
            let l = crate::util::cholesky_jittered(&cov, 1e-12).unwrap();
            let m = 400_000;
            let mut vals = Vec::with_capacity(m);
            for _ in 0..m {
                let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let mut x = vec![0.0; dim];
                for i in 0..dim {
                    for j in 0..=i {
                        x[i] += l.at(i, j) * z[j];
                    }
                }
                let mut t = 1.0;
                for (xi, k) in x.iter().zip(idx.iter()) {
                    for _ in 0..*k {
                        t *= xi;
                    }
                }
                vals.push(t);
            }
            let (mean, stderr) = mean_stderr(&vals);
            assert!(
                (mean - exact).abs() <= 4.0 * stderr.max(1e-6),
                "idx {idx:?}: mc {mean} vs exact {exact} (stderr {stderr})"
            );
        }
    }

    #[test]
    fn poly_expect_basics() {
        let c = GaussianPoly::constant(2.5);
        assert_eq!(poly_expect(&c, &caps()).unwrap(), 2.5);
        let z = GaussianPoly::var(0);
        assert_eq!(poly_expect(&z, &caps()).unwrap(), 0.0);
        // E[(a z0 + b z1)^2] = a^2 + b^2 for independent basis vars.
        let mut p = GaussianPoly::zero();
        p.add_scaled(&GaussianPoly::var(0), 0.6);
        p.add_scaled(&GaussianPoly::var(1), -1.1);
        let sq = p.mul(&p, &caps()).unwrap();
        assert!((poly_expect(&sq, &caps()).unwrap() - (0.36 + 1.21)).abs() < 1e-12);
    }

    #[test]
    fn grid_expectation_matches_direct_route() {
        let mut p = GaussianPoly::constant(0.3);
        p.add_scaled(&GaussianPoly::var(0), 0.9);
        p.add_scaled(&GaussianPoly::var(1), -0.4);
        let mut q = p.clone();
        for _ in 0..3 {
            q = q.mul(&p, &caps()).unwrap();
        }
        // q = p^4; E[q^2] two ways.
        let direct = q.mul(&q, &caps()).unwrap().expect_direct();
        let vars = q.active_vars();
        let n_nodes = q.total_degree() + 1;
        let (nodes, weights) = gauss_hermite_normal(n_nodes);
        let pv = q.eval_on_grid(&vars, &nodes);
        let mut acc = 0.0;
        for (idx, a) in pv.iter().enumerate() {
            let mut w = 1.0;
            let mut rem = idx;
            for _ in 0..vars.len() {
                w *= weights[rem % n_nodes];
                rem /= n_nodes;
            }
            acc += w * a * a;
        }
        assert!(((acc - direct) / direct).abs() < 1e-10, "grid {acc} vs direct {direct}");
    }

    #[test]
    fn act_compose_quadratic_expansion() {
        // (a z0 + b z1)^2 = a^2 z0^2 + 2ab z0 z1 + b^2 z1^2.
        let mut p = GaussianPoly::zero();
        p.add_scaled(&GaussianPoly::var(0), 2.0);
        p.add_scaled(&GaussianPoly::var(1), 3.0);
        let sq = act_compose(&p, Activation::Quadratic, &caps()).unwrap();
        assert_eq!(sq.num_terms(), 3);
        let d = act_deriv_compose(&p, Activation::Quadratic).unwrap();
        let mut expect_d = p.clone();
        expect_d.scale(2.0);
        assert_eq!(d, expect_d);
        assert_eq!(act_compose(&p, Activation::Identity, &caps()).unwrap(), p);
        assert!(act_compose(&p, Activation::Tanh, &caps()).is_err());
    }

    #[test]
    fn depth1_identity_matches_linear_recurrence_to_1e12() {
        let data = vec![(1.0, 1.0), (-1.0, 0.5), (0.5, -1.0), (1.0, -0.5)];
        let routine = ScalarRoutine::new(0.7, data.clone(), Loss::Mse);
        let probes = vec![1.0, -0.6];
        let traj =
            exact_run(ExactDepth::One, Activation::Identity, &routine, 4, &probes, &caps())
                .unwrap();
        let lin_routine = LinRoutine {
            eta: 0.7,
            data: data.iter().map(|(x, y)| (vec![*x], vec![*y])).collect(),
            loss: Loss::Mse,
        };
        let lin = lin1lp_run(&lin_routine, 3, 1, 1, &[vec![1.0], vec![-0.6]]).unwrap();
        for t in 0..4 {
            for p in 0..2 {
                assert!(
                    (traj.probe_logits[t][p] - lin[t][p][0]).abs() < 1e-12,
                    "t={t} p={p}: {} vs {}",
                    traj.probe_logits[t][p],
                    lin[t][p][0]
                );
            }
        }
    }

    #[test]
    fn depth1_zero_updates_and_f0() {
        let routine = ScalarRoutine::new(1.0, vec![(1.0, 1.0)], Loss::Mse);
        let traj =
            exact_run(ExactDepth::One, Activation::Quadratic, &routine, 1, &[], &caps()).unwrap();
        assert_eq!(traj.f_train, vec![0.0]);
    }

    #[test]
    fn sign_flip_of_labels_flips_trajectory_for_identity() {
        let data = vec![(1.0, 1.0), (-1.0, 0.5), (0.5, -1.0)];
        let flipped: Vec<(f64, f64)> = data.iter().map(|(x, y)| (*x, -y)).collect();
        let probes = vec![0.8, -0.8];
        for depth in [ExactDepth::One, ExactDepth::TwoDecoupled, ExactDepth::TwoCoupled] {
            let a = exact_run(
                depth,
                Activation::Identity,
                &ScalarRoutine::new(0.5, data.clone(), Loss::Mse),
                4,
                &probes,
                &caps(),
            )
            .unwrap();
            let b = exact_run(
                depth,
                Activation::Identity,
                &ScalarRoutine::new(0.5, flipped.clone(), Loss::Mse),
                4,
                &probes,
                &caps(),
            )
            .unwrap();
            for t in 0..4 {
                assert!(
                    (a.f_train[t] + b.f_train[t]).abs() < 1e-10,
                    "depth {depth:?} t {t}: {} vs {}",
                    a.f_train[t],
                    b.f_train[t]
                );
                for p in 0..probes.len() {
                    assert!((a.probe_logits[t][p] + b.probe_logits[t][p]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn coupled_minus_decoupled_first_update_matches_warmup() {
        // Linear phi: the transpose correlation adds theta_0 = -eta chi_0
        // xi_0 xi_1 times Z^{dhbar_0} to Z^{W x_1}, shifting f_1 by
        // theta_0 E[Z^{nV_1} Z^{dhbar_0}] = theta_0.
        let eta = 0.6;
        let (xi0, y0) = (1.0, 1.0);
        let xi1 = -0.7;
        let data = vec![(xi0, y0), (xi1, 0.3)];
        let routine = ScalarRoutine::new(eta, data, Loss::Mse);
        let dec =
            exact_run(ExactDepth::TwoDecoupled, Activation::Identity, &routine, 2, &[], &caps())
                .unwrap();
        let cou =
            exact_run(ExactDepth::TwoCoupled, Activation::Identity, &routine, 2, &[], &caps())
                .unwrap();
        assert_eq!(dec.f_train[0], cou.f_train[0]);
        let chi0 = dec.chi[0];
        let predicted_gap = -eta * chi0 * xi0 * xi1;
        let got_gap = cou.f_train[1] - dec.f_train[1];
        assert!(
            (got_gap - predicted_gap).abs() < 1e-10,
            "gap {got_gap} vs predicted {predicted_gap}"
        );
        assert!((cou.theta_fwd[1][0] - predicted_gap).abs() < 1e-10);
    }

    #[test]
    fn registry_rejects_impossible_covariance() {
        let mut basis = EtaBasis::new();
        let mut next_var = 2usize;
        basis.extend("a".into(), &[1.0], &mut next_var).unwrap();
        // Covariance 2 against a unit-variance entry is not PSD.
        let err = basis.extend("b".into(), &[2.0, 1.0], &mut next_var);
        assert!(matches!(err, Err(Error::NotPsd(_))));
        // A duplicate row is fine (degenerate direction gets jitter).
        let dup = basis.extend("a2".into(), &[1.0, 1.0], &mut next_var).unwrap();
        assert!(dup.num_terms() >= 1);
    }

    #[test]
    fn step_cap_enforced() {
        let routine = ScalarRoutine::new(1.0, vec![(1.0, 1.0)], Loss::Mse);
        let err = exact_run(ExactDepth::One, Activation::Identity, &routine, 9, &[], &caps());
        assert!(matches!(err, Err(Error::StepCap { steps: 9, cap: 4 })));
    }

    #[test]
    fn basis_variable_cap_enforced_for_many_probes() {
        // Each recorded step registers one draw per input, so a long probe
        // list exhausts the basis variable budget with a clear error.
        let routine = ScalarRoutine::new(0.1, vec![(1.0, 1.0), (-1.0, 0.5)], Loss::Mse);
        let probes: Vec<f64> = (0..8).map(|k| 0.1 * (k + 1) as f64).collect();
        let err = exact_run(
            ExactDepth::TwoDecoupled,
            Activation::Identity,
            &routine,
            4,
            &probes,
            &caps(),
        );
        assert!(matches!(err, Err(Error::VarCap { .. })), "{err:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn isserlis_odd_total_degree_vanishes(k0 in 0u32..4, k1 in 0u32..4, rho in -0.9f64..0.9) {
            prop_assume!((k0 + k1) % 2 == 1);
            let cov = Mat::from_rows(&[vec![1.0, rho], vec![rho, 1.0]]);
            prop_assert_eq!(isserlis(&[k0, k1], &cov, 32).unwrap(), 0.0);
        }
    }
}
