//! CBOW Word2Vec with negative sampling, in two representations: a finite
//! width-n embedding table and the exact infinite-width coefficient form
//! (2|V| coordinates per word, block one-hot at initialization).
//!
//! Per step: sample a sentence and center word i, average the context window
//! into Phi^J, draw the target tau (= i with probability p, else uniform over
//! V minus i), and apply
//!
//!   dPhi^j    = +/- (eta/|J|) sigmoid-factor Phi^tau-hat   (j in J)
//!   dPhi^tau  = +/- eta       sigmoid-factor Phi^J
//!
//! with the attract factor `1 - sigmoid(z)` for tau = i and the repel factor
//! `sigmoid(z)` otherwise, followed by weight decay on every row.

use crate::mlp::sigmoid;
use crate::util::{counter_normal, rng_stream, Mat};
use crate::{Error, Result};
use rand::Rng;
use statrs::function::gamma::ln_gamma;
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone, Copy)]
pub struct W2VConfig {
    pub window: usize,
    /// Probability that the sampled target is the center word.
    pub p_positive: f64,
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub eta: f64,
    pub gamma: f64,
}

impl Default for W2VConfig {
    fn default() -> Self {
        W2VConfig {
            window: 4,
            p_positive: 1.0 / 21.0,
            sigma_u: 1.0,
            sigma_v: 1.0,
            eta: 0.05,
            gamma: 0.001,
        }
    }
}

/// Tokenized corpus with a fixed vocabulary size.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub sentences: Vec<Vec<usize>>,
    pub vocab: usize,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        for s in &self.sentences {
            for &t in s {
                if t >= self.vocab {
                    return Err(Error::TokenOutOfRange { token: t, vocab: self.vocab });
                }
            }
        }
        Ok(())
    }
}

/// Whitespace-tokenized text file with a minimum-frequency filter; tokens
/// below the threshold are dropped. Returns the corpus and the kept words in
/// index order.
pub fn load_corpus(path: &Path, min_freq: usize) -> Result<(Corpus, Vec<String>)> {
    let text = std::fs::read_to_string(path)?;
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for line in text.lines() {
        for tok in line.split_whitespace() {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<&str> =
        counts.iter().filter(|(_, c)| **c >= min_freq).map(|(w, _)| *w).collect();
    kept.sort_unstable();
    let index: HashMap<&str, usize> =
        kept.iter().enumerate().map(|(i, w)| (*w, i)).collect();
    let mut sentences = Vec::new();
    for line in text.lines() {
        let s: Vec<usize> =
            line.split_whitespace().filter_map(|t| index.get(t).copied()).collect();
        if s.len() >= 2 {
            sentences.push(s);
        }
    }
    Ok((
        Corpus { sentences, vocab: kept.len() },
        kept.into_iter().map(|s| s.to_string()).collect(),
    ))
}

/// Word embeddings in one of the two representations. Rows of `phi` are the
/// input-side embeddings `Phi^j`, rows of `phi_hat` the output-side `Phi^tau`.
#[derive(Debug, Clone)]
pub enum W2VState {
    Finite { phi: Mat, phi_hat: Mat, cfg: W2VConfig },
    Coeff { phi: Mat, phi_hat: Mat, cfg: W2VConfig },
}

impl W2VState {
    /// Finite width-n state with Gaussian init of std `sigma / sqrt(n)`.
    pub fn init_finite(vocab: usize, n: usize, cfg: W2VConfig, seed: u64) -> Self {
        let mut phi = Mat::zeros(vocab, n);
        let mut phi_hat = Mat::zeros(vocab, n);
        let su = cfg.sigma_u / (n as f64).sqrt();
        let sv = cfg.sigma_v / (n as f64).sqrt();
        for w in 0..vocab {
            for j in 0..n {
                *phi.at_mut(w, j) = su * counter_normal(seed, &[0x10, w as u64, j as u64]);
                *phi_hat.at_mut(w, j) = sv * counter_normal(seed, &[0x11, w as u64, j as u64]);
            }
        }
        W2VState::Finite { phi, phi_hat, cfg }
    }

    /// Infinite-width coefficient state: 2|V| coordinates per word with the
    /// block-diagonal one-hot initialization.
    pub fn init_coeff(vocab: usize, cfg: W2VConfig) -> Self {
        let mut phi = Mat::zeros(vocab, 2 * vocab);
        let mut phi_hat = Mat::zeros(vocab, 2 * vocab);
        for w in 0..vocab {
            *phi.at_mut(w, w) = cfg.sigma_u;
            *phi_hat.at_mut(w, vocab + w) = cfg.sigma_v;
        }
        W2VState::Coeff { phi, phi_hat, cfg }
    }

    pub fn cfg(&self) -> &W2VConfig {
        match self {
            W2VState::Finite { cfg, .. } | W2VState::Coeff { cfg, .. } => cfg,
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            W2VState::Finite { phi, .. } | W2VState::Coeff { phi, .. } => phi.rows,
        }
    }

    fn tables(&mut self) -> (&mut Mat, &mut Mat, W2VConfig) {
        match self {
            W2VState::Finite { phi, phi_hat, cfg } | W2VState::Coeff { phi, phi_hat, cfg } => {
                (phi, phi_hat, *cfg)
            }
        }
    }

    fn tables_ref(&self) -> (&Mat, &Mat) {
        match self {
            W2VState::Finite { phi, phi_hat, .. } | W2VState::Coeff { phi, phi_hat, .. } => {
                (phi, phi_hat)
            }
        }
    }

    /// Embedding inner product `<h(word_a), h(word_b)>` (via the coefficient
    /// Gram in coefficient mode).
    pub fn embedding_dot(&self, a: usize, b: usize) -> f64 {
        let (phi, _) = self.tables_ref();
        phi.row(a).iter().zip(phi.row(b).iter()).map(|(x, y)| x * y).sum()
    }

    /// One CBOW update given center `i`, context `js`, target `tau`.
    pub fn update(&mut self, i: usize, js: &[usize], tau: usize) -> Result<()> {
        let vocab = self.vocab();
        for &t in js.iter().chain([i, tau].iter()) {
            if t >= vocab {
                return Err(Error::TokenOutOfRange { token: t, vocab });
            }
        }
        let (phi, phi_hat, cfg) = self.tables();
        let dim = phi.cols;
        // Phi^J = mean of the context rows.
        let mut ctx = vec![0.0; dim];
        for &j in js {
            for (c, v) in ctx.iter_mut().zip(phi.row(j).iter()) {
                *c += v;
            }
        }
        let inv = 1.0 / js.len() as f64;
        ctx.iter_mut().for_each(|c| *c *= inv);
        let z: f64 = ctx.iter().zip(phi_hat.row(tau).iter()).map(|(a, b)| a * b).sum();
        let factor = if tau == i { 1.0 - sigmoid(z) } else { -sigmoid(z) };
        let tau_row: Vec<f64> = phi_hat.row(tau).to_vec();
        // Weight decay acts on the pre-update values of every row.
        let decay = 1.0 - cfg.eta * cfg.gamma;
        if cfg.gamma != 0.0 {
            phi.scale(decay);
            phi_hat.scale(decay);
        }
        let step_ctx = cfg.eta / js.len() as f64 * factor;
        for &j in js {
            let row = phi.row_mut(j);
            for (r, t) in row.iter_mut().zip(tau_row.iter()) {
                *r += step_ctx * t;
            }
        }
        let step_tau = cfg.eta * factor;
        let row = phi_hat.row_mut(tau);
        for (r, c) in row.iter_mut().zip(ctx.iter()) {
            *r += step_tau * c;
        }
        Ok(())
    }
}

/// Train for `steps` sampled CBOW updates over the corpus.
pub fn w2v_train(state: &mut W2VState, corpus: &Corpus, steps: usize, seed: u64) -> Result<()> {
    corpus.validate()?;
    if corpus.vocab != state.vocab() {
        return Err(Error::DimensionMismatch("corpus vocab vs state vocab".into()));
    }
    let cfg = *state.cfg();
    let vocab = corpus.vocab;
    let mut rng = rng_stream(seed, &[0x573256]);
    for _ in 0..steps {
        let s = &corpus.sentences[rng.gen_range(0..corpus.sentences.len())];
        if s.len() < 2 {
            continue;
        }
        let pos = rng.gen_range(0..s.len());
        let i = s[pos];
        let lo = pos.saturating_sub(cfg.window);
        let hi = (pos + cfg.window + 1).min(s.len());
        let js: Vec<usize> =
            (lo..hi).filter(|p| *p != pos).map(|p| s[p]).collect();
        if js.is_empty() {
            continue;
        }
        let tau = if rng.gen_range(0.0..1.0f64) < cfg.p_positive {
            i
        } else {
            // Uniform over V minus the center word.
            let mut t = rng.gen_range(0..vocab - 1);
            if t >= i {
                t += 1;
            }
            t
        };
        state.update(i, &js, tau)?;
    }
    Ok(())
}

/// Word-analogy accuracy: for each (a, b, c, answer), predict
/// `argmax_i <h_i, h_a - h_b + h_c>` over i not in {a, b, c}, ties broken by
/// the lowest index.
pub fn analogy_eval(state: &W2VState, quads: &[[usize; 4]]) -> f64 {
    analogy_eval_with_candidates(state, quads, None)
}

/// As [`analogy_eval`], with the argmax optionally restricted to a candidate
/// set (the excluded {a, b, c} still never win). Default is the full
/// vocabulary.
pub fn analogy_eval_with_candidates(
    state: &W2VState,
    quads: &[[usize; 4]],
    candidates: Option<&[usize]>,
) -> f64 {
    let (phi, _) = state.tables_ref();
    let vocab = phi.rows;
    let all: Vec<usize> = (0..vocab).collect();
    let cands = candidates.unwrap_or(&all);
    let mut correct = 0usize;
    for quad in quads {
        let [a, b, c, answer] = *quad;
        let target: Vec<f64> = phi
            .row(a)
            .iter()
            .zip(phi.row(b).iter())
            .zip(phi.row(c).iter())
            .map(|((x, y), z)| x - y + z)
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for &i in cands {
            if i == a || i == b || i == c {
                continue;
            }
            let s: f64 = phi.row(i).iter().zip(target.iter()).map(|(x, y)| x * y).sum();
            let better = match best {
                None => true,
                Some((_, bs)) => s > bs,
            };
            if better {
                best = Some((i, s));
            }
        }
        if let Some((i, _)) = best {
            correct += (i == answer) as usize;
        }
    }
    correct as f64 / quads.len().max(1) as f64
}

/// Planted-structure corpus: every word is a (family, role) pair laid out
/// through a seeded vocabulary permutation, and sentences mix family-mates
/// and role-mates of a latent (family, role). The quadruples
/// ((f1,r1),(f1,r2),(f2,r2) -> (f2,r1)) are exact analogies of the additive
/// structure.
pub struct PlantedCorpus {
    pub corpus: Corpus,
    pub quads: Vec<[usize; 4]>,
}

pub fn gen_planted_corpus(
    seed: u64,
    families: usize,
    roles: usize,
    sentences: usize,
    sentence_len: usize,
    n_quads: usize,
) -> PlantedCorpus {
    let vocab = families * roles;
    let mut rng = rng_stream(seed, &[0x9c]);
    // Random placement of (family, role) pairs into vocabulary indices.
    let mut perm: Vec<usize> = (0..vocab).collect();
    for i in (1..vocab).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let word = |f: usize, r: usize| perm[f * roles + r];
    // Two sentence types: all tokens share a family (roles vary) or all share
    // a role (families vary). Role sentences are oversampled to offset the
    // thinner per-pair rate of the larger family axis.
    let p_family_sentence = roles as f64 / (roles + families) as f64;
    let mut sents = Vec::with_capacity(sentences);
    for _ in 0..sentences {
        let mut s = Vec::with_capacity(sentence_len);
        if rng.gen_range(0.0..1.0f64) < p_family_sentence {
            let f = rng.gen_range(0..families);
            for _ in 0..sentence_len {
                s.push(word(f, rng.gen_range(0..roles)));
            }
        } else {
            let r = rng.gen_range(0..roles);
            for _ in 0..sentence_len {
                s.push(word(rng.gen_range(0..families), r));
            }
        }
        sents.push(s);
    }
    let mut quads = Vec::with_capacity(n_quads);
    for _ in 0..n_quads {
        let f1 = rng.gen_range(0..families);
        let mut f2 = rng.gen_range(0..families - 1);
        if f2 >= f1 {
            f2 += 1;
        }
        let r1 = rng.gen_range(0..roles);
        let mut r2 = rng.gen_range(0..roles - 1);
        if r2 >= r1 {
            r2 += 1;
        }
        quads.push([word(f1, r1), word(f1, r2), word(f2, r2), word(f2, r1)]);
    }
    PlantedCorpus { corpus: Corpus { sentences: sents, vocab }, quads }
}

/// Exact two-sided binomial test p-value for observing `k` successes out of
/// `n` trials at success probability `p` (summing all outcomes at most as
/// likely as the observed one).
pub fn binomial_two_sided_p(k: usize, n: usize, p: f64) -> f64 {
    let ln_pmf = |j: usize| -> f64 {
        ln_gamma(n as f64 + 1.0) - ln_gamma(j as f64 + 1.0) - ln_gamma((n - j) as f64 + 1.0)
            + j as f64 * p.ln()
            + (n - j) as f64 * (1.0 - p).ln()
    };
    let obs = ln_pmf(k);
    let mut total = 0.0;
    for j in 0..=n {
        let lj = ln_pmf(j);
        if lj <= obs + 1e-9 {
            total += lj.exp();
        }
    }
    total.min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> W2VConfig {
        W2VConfig { window: 2, eta: 0.1, gamma: 0.0, ..Default::default() }
    }

    #[test]
    fn zero_eta_leaves_embeddings_fixed() {
        let corpus = Corpus { sentences: vec![vec![0, 1, 2, 3]], vocab: 4 };
        let mut cfg = tiny_cfg();
        cfg.eta = 0.0;
        let mut state = W2VState::init_coeff(4, cfg);
        let before = match &state {
            W2VState::Coeff { phi, .. } => phi.data.clone(),
            _ => unreachable!(),
        };
        w2v_train(&mut state, &corpus, 50, 3).unwrap();
        let after = match &state {
            W2VState::Coeff { phi, .. } => phi.data.clone(),
            _ => unreachable!(),
        };
        assert_eq!(before, after);
    }

    #[test]
    fn single_negative_update_matches_closed_form() {
        let cfg = tiny_cfg();
        let mut state = W2VState::init_coeff(4, cfg);
        // Context {1, 2}, center 0, negative target 3.
        let (phi0, hat0) = match &state {
            W2VState::Coeff { phi, phi_hat, .. } => (phi.clone(), phi_hat.clone()),
            _ => unreachable!(),
        };
        state.update(0, &[1, 2], 3).unwrap();
        let (phi1, _) = state.tables_ref();
        // Phi^J . Phi^3-hat = 0 at diagonal init, so sigma = 1/2; each context
        // row moves by -(eta/|J|) * 1/2 * Phi^3-hat.
        let step = -(cfg.eta / 2.0) * 0.5;
        for j in [1usize, 2] {
            for col in 0..phi0.cols {
                let want = phi0.at(j, col) + step * hat0.at(3, col);
                assert!((phi1.at(j, col) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decay_contracts_all_rows() {
        let mut cfg = tiny_cfg();
        cfg.gamma = 0.01;
        // Make the update inert by hitting sigmoid'(0) on an untouched row:
        // easiest is to check untouched rows only.
        let mut state = W2VState::init_coeff(4, cfg);
        state.update(0, &[1], 3).unwrap();
        let (phi, _) = state.tables_ref();
        let factor = 1.0 - cfg.eta * cfg.gamma;
        // Row 2 was untouched by the update: pure decay.
        assert!((phi.at(2, 2) - cfg.sigma_u * factor).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let corpus = Corpus { sentences: vec![vec![0, 9]], vocab: 4 };
        let mut state = W2VState::init_coeff(4, tiny_cfg());
        assert!(matches!(
            w2v_train(&mut state, &corpus, 1, 1),
            Err(Error::TokenOutOfRange { token: 9, vocab: 4 })
        ));
    }

    #[test]
    fn planted_exact_analogy_is_recovered() {
        // Hand-plant additive structure in a finite table.
        let cfg = tiny_cfg();
        let mut state = W2VState::init_finite(6, 8, cfg, 3);
        if let W2VState::Finite { phi, .. } = &mut state {
            phi.scale(0.0);
            // h = family + role with orthogonal unit directions.
            // words: 0 = (f0,r0), 1 = (f0,r1), 2 = (f1,r1), answer 3 = (f1,r0).
            let assign = [(0usize, 0usize), (0, 1), (1, 1), (1, 0)];
            for (w, (f, r)) in assign.iter().enumerate() {
                *phi.at_mut(w, *f) = 1.0;
                *phi.at_mut(w, 4 + *r) = 1.0;
            }
            // Words 4, 5 orthogonal to everything.
            *phi.at_mut(4, 2) = 1.0;
            *phi.at_mut(5, 3) = 1.0;
        }
        let acc = analogy_eval(&state, &[[0, 1, 2, 3]]);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn counting_two_of_three() {
        let cfg = tiny_cfg();
        let mut state = W2VState::init_finite(8, 8, cfg, 3);
        if let W2VState::Finite { phi, .. } = &mut state {
            phi.scale(0.0);
            for (w, (f, r)) in
                [(0usize, (0usize, 0usize)), (1, (0, 1)), (2, (1, 1)), (3, (1, 0))].iter().map(|x| *x)
            {
                *phi.at_mut(w, f) = 1.0;
                *phi.at_mut(w, 4 + r) = 1.0;
            }
            *phi.at_mut(4, 2) = 1.0;
            *phi.at_mut(5, 3) = 1.0;
            *phi.at_mut(6, 2) = 0.5;
            *phi.at_mut(7, 3) = 0.5;
        }
        // Two correct quads, one wrong answer.
        let acc = analogy_eval(&state, &[[0, 1, 2, 3], [1, 0, 3, 2], [0, 1, 2, 4]]);
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_coeff_init_ties_break_to_lowest_index() {
        let state = W2VState::init_coeff(10, tiny_cfg());
        // All candidate scores are exactly zero; the argmax must be the
        // lowest non-excluded index.
        let quads = [[3usize, 4, 5, 0], [0, 1, 2, 3]];
        // First quad: candidates 0.. -> lowest is 0 = answer (correct).
        // Second: lowest non-excluded is 3 = answer (correct).
        assert_eq!(analogy_eval(&state, &quads), 1.0);
        let quads2 = [[0usize, 1, 2, 7]];
        assert_eq!(analogy_eval(&state, &quads2), 0.0);
    }

    #[test]
    fn analogy_invariant_under_orthogonal_transform() {
        let cfg = tiny_cfg();
        let planted = gen_planted_corpus(5, 4, 2, 50, 8, 20);
        let mut state = W2VState::init_finite(planted.corpus.vocab, 16, cfg, 9);
        w2v_train(&mut state, &planted.corpus, 400, 12).unwrap();
        let before = analogy_eval(&state, &planted.quads);
        // Apply a random rotation (Givens product) to all embeddings.
        if let W2VState::Finite { phi, phi_hat, .. } = &mut state {
            let mut rng = rng_stream(77, &[1]);
            for _ in 0..40 {
                let a = rng.gen_range(0..phi.cols);
                let mut b = rng.gen_range(0..phi.cols - 1);
                if b >= a {
                    b += 1;
                }
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let (s, c) = theta.sin_cos();
                for m in [&mut *phi, &mut *phi_hat] {
                    for r in 0..m.rows {
                        let va = m.at(r, a);
                        let vb = m.at(r, b);
                        *m.at_mut(r, a) = c * va - s * vb;
                        *m.at_mut(r, b) = s * va + c * vb;
                    }
                }
            }
        }
        let after = analogy_eval(&state, &planted.quads);
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn binomial_test_behaves() {
        // k right at the mean: p-value near 1; far tail: tiny.
        assert!(binomial_two_sided_p(50, 100, 0.5) > 0.9);
        assert!(binomial_two_sided_p(90, 100, 0.5) < 1e-10);
        let p = binomial_two_sided_p(5, 500, 1.0 / 97.0);
        assert!(p > 0.01, "typical draw should not reject: {p}");
    }

    #[test]
    fn corpus_file_round_trip_with_min_freq() {
        let dir = std::env::temp_dir().join("abclim_w2v_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corpus.txt");
        std::fs::write(&path, "a b a b c\na b a d\n").unwrap();
        let (corpus, words) = load_corpus(&path, 2).unwrap();
        // c and d appear once and are filtered out.
        assert_eq!(words, vec!["a".to_string(), "b".to_string()]);
        assert_eq!(corpus.vocab, 2);
        assert_eq!(corpus.sentences.len(), 2);
        assert_eq!(corpus.sentences[0], vec![0, 1, 0, 1]);
    }
}
