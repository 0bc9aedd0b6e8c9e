//! Exact classification of abc-parametrizations.
//!
//! All exponents are exact rationals so the facet conditions of the
//! classification (equalities like `2 a_{L+1} + c = 1`) are decidable.
//!
//! Note on scope: the stability / feature-learning characterizations behind
//! [`AbcParam::classify`] are derived for tanh and small-sigma gelu
//! activations; the classifier applies the exponent conditions regardless of
//! which activation callers run downstream (see [`CLASSIFICATION_NOTE`]).

use crate::{Error, Result};
use num_rational::Rational64;
use num_traits::{One, Zero};
use serde::de::Error as DeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;

/// Caveat attached to classification output.
pub const CLASSIFICATION_NOTE: &str = "classification by exact exponent conditions; \
the underlying characterizations assume tanh or small-sigma gelu activations";

pub type Rat = Rational64;

fn rat(n: i64, d: i64) -> Rat {
    Rational64::new(n, d)
}

/// Exponents of an abc-parametrization of an `L`-hidden-layer MLP.
///
/// `a` and `b` are indexed by layer `1..=L+1`; `c` scales the learning rate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbcParam {
    l: usize,
    a: Vec<Rat>,
    b: Vec<Rat>,
    c: Rat,
}

/// The four named parametrizations of the summary table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum NamedParam {
    Sp,
    Ntp,
    Mfp,
    Mup,
}

impl FromStr for NamedParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SP" => Ok(NamedParam::Sp),
            "NTP" => Ok(NamedParam::Ntp),
            "MFP" => Ok(NamedParam::Mfp),
            "MUP" | "µP" | "MU-P" => Ok(NamedParam::Mup),
            other => Err(Error::UnknownParamName(other.to_string())),
        }
    }
}

impl fmt::Display for NamedParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NamedParam::Sp => "SP",
            NamedParam::Ntp => "NTP",
            NamedParam::Mfp => "MFP",
            NamedParam::Mup => "MUP",
        };
        f.write_str(s)
    }
}

/// Training regime of a parametrization in the infinite-width limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    FeatureLearning,
    KernelRegime,
    Trivial,
    Unstable,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self)
    }
}

/// Full classification of a parametrization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classification {
    pub r: Rat,
    pub r_per_layer: Vec<Rat>,
    pub init_stable: bool,
    pub stable: bool,
    pub nontrivial: bool,
    pub regime: Regime,
    pub nngp_limit: bool,
    pub last_layer_updated_maximally: bool,
    pub last_layer_initialized_maximally: bool,
}

impl AbcParam {
    /// Build from exponent vectors indexed 1..=L+1.
    pub fn new(a: Vec<Rat>, b: Vec<Rat>, c: Rat) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() {
            return Err(Error::InvalidArgument(format!(
                "a and b must both have L+1 >= 2 entries (got {} and {})",
                a.len(),
                b.len()
            )));
        }
        if a.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least one hidden layer (L >= 1)".into(),
            ));
        }
        Ok(AbcParam { l: a.len() - 1, a, b, c })
    }

    /// Hidden-layer count L.
    pub fn depth(&self) -> usize {
        self.l
    }

    /// Weight-multiplier exponent `a_l`, layer index in 1..=L+1.
    pub fn a(&self, layer: usize) -> Rat {
        assert!(layer >= 1 && layer <= self.l + 1, "layer out of range");
        self.a[layer - 1]
    }

    /// Init-variance exponent `b_l`, layer index in 1..=L+1.
    pub fn b(&self, layer: usize) -> Rat {
        assert!(layer >= 1 && layer <= self.l + 1, "layer out of range");
        self.b[layer - 1]
    }

    pub fn c(&self) -> Rat {
        self.c
    }

    pub fn with_c(&self, c: Rat) -> AbcParam {
        AbcParam { c, ..self.clone() }
    }

    /// Effective weight multiplier exponent at width n: `W^l = n^{-a_l} w^l`.
    pub fn a_f64(&self, layer: usize) -> f64 {
        ratio_to_f64(self.a(layer))
    }

    pub fn b_f64(&self, layer: usize) -> f64 {
        ratio_to_f64(self.b(layer))
    }

    pub fn c_f64(&self) -> f64 {
        ratio_to_f64(self.c)
    }

    /// The named columns of the summary table. SP takes its minimal stable
    /// learning-rate exponent `c = 1`; the others take `c = 0` except MFP's
    /// `c = -1`.
    pub fn named(name: NamedParam, l: usize) -> Result<Self> {
        if l < 1 {
            return Err(Error::InvalidArgument("L must be >= 1".into()));
        }
        let half = rat(1, 2);
        match name {
            NamedParam::Sp => {
                let a = vec![Rat::zero(); l + 1];
                let mut b = vec![half; l + 1];
                b[0] = Rat::zero();
                AbcParam::new(a, b, Rat::one())
            }
            NamedParam::Ntp => {
                let mut a = vec![half; l + 1];
                a[0] = Rat::zero();
                let b = vec![Rat::zero(); l + 1];
                AbcParam::new(a, b, Rat::zero())
            }
            NamedParam::Mfp => {
                if l != 1 {
                    return Err(Error::MfpRequiresDepthOne(l));
                }
                AbcParam::new(vec![Rat::zero(), Rat::one()], vec![Rat::zero(); 2], -Rat::one())
            }
            NamedParam::Mup => {
                let mut a = vec![Rat::zero(); l + 1];
                a[0] = -half;
                a[l] = half;
                let b = vec![half; l + 1];
                AbcParam::new(a, b, Rat::zero())
            }
        }
    }

    /// `min(a_{L+1}+b_{L+1}, 2a_{L+1}+c)`, the scale exponent of the effective
    /// last-layer weights during training.
    fn last_layer_scale(&self) -> Rat {
        let al = self.a(self.l + 1);
        let bl = self.b(self.l + 1);
        (al + bl).min(al + al + self.c)
    }

    /// The update exponent `r`: `min(a_{L+1}+b_{L+1}, 2a_{L+1}+c) + c - 1
    /// + min_l (2 a_l + [l = 1])`.
    pub fn r_value(&self) -> Rat {
        let body = (1..=self.l)
            .map(|l| self.layer_gap(l))
            .min()
            .expect("L >= 1");
        self.last_layer_scale() + self.c - Rat::one() + body
    }

    fn layer_gap(&self, l: usize) -> Rat {
        let ind = if l == 1 { Rat::one() } else { Rat::zero() };
        self.a(l) + self.a(l) + ind
    }

    /// Per-layer update exponent `r_l`; layer `W^l` is updated maximally iff
    /// `r_l = 0` (in a stable parametrization).
    pub fn layer_r(&self, l: usize) -> Result<Rat> {
        if l < 1 || l > self.l {
            return Err(Error::LayerOutOfRange { index: l, max: self.l });
        }
        Ok(self.last_layer_scale() + self.c - Rat::one() + self.layer_gap(l))
    }

    /// Initialization stability: `(pre)activations are Theta(1), logits O(1)`.
    pub fn init_stable(&self) -> bool {
        let half = rat(1, 2);
        if self.a(1) + self.b(1) != Rat::zero() {
            return false;
        }
        for l in 2..=self.l {
            if self.a(l) + self.b(l) != half {
                return false;
            }
        }
        self.a(self.l + 1) + self.b(self.l + 1) >= half
    }

    /// Full classification per the stability / nontriviality /
    /// feature-learning / kernel-regime characterizations.
    pub fn classify(&self) -> Classification {
        let r = self.r_value();
        let r_per_layer: Vec<Rat> = (1..=self.l).map(|l| self.layer_r(l).unwrap()).collect();
        let init_stable = self.init_stable();
        let al = self.a(self.l + 1);
        let bl = self.b(self.l + 1);
        let last_update = al + al + self.c; // exponent in 2a_{L+1}+c
        let last_init = al + bl + r; // exponent in a_{L+1}+b_{L+1}+r
        let one = Rat::one();
        let stable =
            init_stable && r >= Rat::zero() && last_update >= one && last_init >= one;
        let nontrivial = stable && (last_init == one || last_update == one);
        let regime = if !stable {
            Regime::Unstable
        } else if !nontrivial {
            Regime::Trivial
        } else if r == Rat::zero() {
            Regime::FeatureLearning
        } else {
            Regime::KernelRegime
        };
        Classification {
            r,
            r_per_layer,
            init_stable,
            stable,
            nontrivial,
            regime,
            nngp_limit: stable && last_init > one && last_update == one,
            last_layer_updated_maximally: last_update == one,
            last_layer_initialized_maximally: last_init == one,
        }
    }

    /// The gradient/LR symmetry: `a += theta, b -= theta, c -= 2 theta` leaves
    /// every `f_t` trajectory fixed.
    pub fn symmetry_shift(&self, theta: Rat) -> AbcParam {
        let a = self.a.iter().map(|v| v + theta).collect();
        let b = self.b.iter().map(|v| v - theta).collect();
        AbcParam { l: self.l, a, b, c: self.c - theta - theta }
    }

    /// Smallest `c` making the parametrization stable, holding `a`, `b` fixed;
    /// `None` when initialization stability fails (it is independent of `c`).
    ///
    /// Each stability constraint is monotone nondecreasing in `c`, so the
    /// answer is the max of the individual exact lower bounds.
    pub fn min_stable_c(&self) -> Option<Rat> {
        if !self.init_stable() {
            return None;
        }
        let one = Rat::one();
        let two = rat(2, 1);
        let three = rat(3, 1);
        let al = self.a(self.l + 1);
        let bl = self.b(self.l + 1);
        let q = (1..=self.l).map(|l| self.layer_gap(l)).min().unwrap();
        // r >= 0 with r = min(al+bl+c, 2al+2c) - 1 + q:
        let b1 = one - q - al - bl;
        let b2 = (one - q) / two - al;
        // 2 a_{L+1} + c >= 1:
        let b3 = one - al - al;
        // a_{L+1} + b_{L+1} + r >= 1, i.e. min(al+bl+c, 2al+2c) >= 2-q-al-bl:
        let b4 = two - q - two * (al + bl);
        let b5 = (two - q - three * al - bl) / two;
        Some(b1.max(b2).max(b3).max(b4).max(b5))
    }
}

fn ratio_to_f64(r: Rat) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Render a rational as the wire format "p/q" (or "p" when q = 1).
pub fn rat_to_string(r: Rat) -> String {
    r.to_string()
}

/// Parse the wire format "p/q" or "p".
pub fn rat_from_str(s: &str) -> Result<Rat> {
    Rational64::from_str(s.trim())
        .map_err(|e| Error::InvalidArgument(format!("bad rational `{s}`: {e}")))
}

impl Serialize for AbcParam {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Wire<'a> {
            #[serde(rename = "L")]
            l: usize,
            a: Vec<String>,
            b: Vec<String>,
            c: String,
            #[serde(skip_serializing_if = "Option::is_none")]
            _phantom: Option<&'a ()>,
        }
        Wire {
            l: self.l,
            a: self.a.iter().map(|v| rat_to_string(*v)).collect(),
            b: self.b.iter().map(|v| rat_to_string(*v)).collect(),
            c: rat_to_string(self.c),
            _phantom: None,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AbcParam {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Wire {
            #[serde(rename = "L")]
            l: usize,
            a: Vec<String>,
            b: Vec<String>,
            c: String,
        }
        let w = Wire::deserialize(deserializer)?;
        let parse = |v: &[String]| -> std::result::Result<Vec<Rat>, D::Error> {
            v.iter()
                .map(|s| rat_from_str(s).map_err(|e| D::Error::custom(e.to_string())))
                .collect()
        };
        let a = parse(&w.a)?;
        let b = parse(&w.b)?;
        let c = rat_from_str(&w.c).map_err(|e| D::Error::custom(e.to_string()))?;
        let p = AbcParam::new(a, b, c).map_err(|e| D::Error::custom(e.to_string()))?;
        if p.depth() != w.l {
            return Err(D::Error::custom(format!(
                "L = {} inconsistent with {} exponent entries",
                w.l,
                p.depth() + 1
            )));
        }
        Ok(p)
    }
}

impl Serialize for Classification {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Wire {
            r: String,
            r_per_layer: Vec<String>,
            init_stable: bool,
            stable: bool,
            nontrivial: bool,
            regime: Regime,
            nngp_limit: bool,
            last_layer_updated_maximally: bool,
            last_layer_initialized_maximally: bool,
            note: &'static str,
        }
        Wire {
            r: rat_to_string(self.r),
            r_per_layer: self.r_per_layer.iter().map(|v| rat_to_string(*v)).collect(),
            init_stable: self.init_stable,
            stable: self.stable,
            nontrivial: self.nontrivial,
            regime: self.regime,
            nngp_limit: self.nngp_limit,
            last_layer_updated_maximally: self.last_layer_updated_maximally,
            last_layer_initialized_maximally: self.last_layer_initialized_maximally,
            note: CLASSIFICATION_NOTE,
        }
        .serialize(serializer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mup(l: usize) -> AbcParam {
        AbcParam::named(NamedParam::Mup, l).unwrap()
    }

    fn ntp(l: usize) -> AbcParam {
        AbcParam::named(NamedParam::Ntp, l).unwrap()
    }

    #[test]
    fn named_param_table_columns() {
        let p = mup(3);
        assert_eq!(p.a, vec![rat(-1, 2), rat(0, 1), rat(0, 1), rat(1, 2)]);
        assert_eq!(p.b, vec![rat(1, 2); 4]);
        assert_eq!(p.c, rat(0, 1));

        let p = ntp(2);
        assert_eq!(p.a, vec![rat(0, 1), rat(1, 2), rat(1, 2)]);
        assert_eq!(p.b, vec![rat(0, 1); 3]);
        assert_eq!(p.c, rat(0, 1));

        let p = AbcParam::named(NamedParam::Mfp, 1).unwrap();
        assert_eq!(p.a, vec![rat(0, 1), rat(1, 1)]);
        assert_eq!(p.b, vec![rat(0, 1); 2]);
        assert_eq!(p.c, rat(-1, 1));

        assert!(matches!(
            AbcParam::named(NamedParam::Mfp, 2),
            Err(Error::MfpRequiresDepthOne(2))
        ));
    }

    #[test]
    fn r_values_match_summary_table() {
        assert_eq!(ntp(2).r_value(), rat(1, 2));
        assert_eq!(mup(3).r_value(), rat(0, 1));
        assert_eq!(AbcParam::named(NamedParam::Sp, 2).unwrap().r_value(), rat(1, 2));
        assert_eq!(AbcParam::named(NamedParam::Mfp, 1).unwrap().r_value(), rat(0, 1));
    }

    #[test]
    fn layer_r_examples() {
        assert_eq!(mup(3).layer_r(1).unwrap(), rat(0, 1));
        assert_eq!(mup(3).layer_r(2).unwrap(), rat(0, 1));
        assert_eq!(mup(3).layer_r(3).unwrap(), rat(0, 1));
        assert_eq!(ntp(2).layer_r(2).unwrap(), rat(1, 2));
        assert!(ntp(2).layer_r(3).is_err());
        assert!(ntp(2).layer_r(0).is_err());
    }

    #[test]
    fn classify_table_rows() {
        for (p, want_r, want_regime) in [
            (AbcParam::named(NamedParam::Sp, 2).unwrap(), rat(1, 2), Regime::KernelRegime),
            (ntp(2), rat(1, 2), Regime::KernelRegime),
            (AbcParam::named(NamedParam::Mfp, 1).unwrap(), rat(0, 1), Regime::FeatureLearning),
            (mup(2), rat(0, 1), Regime::FeatureLearning),
        ] {
            let c = p.classify();
            assert_eq!(c.r, want_r);
            assert!(c.stable && c.nontrivial);
            assert_eq!(c.regime, want_regime);
            // Both summary rows: 2a_{L+1}+c = 1 and a_{L+1}+b_{L+1}+r = 1.
            assert!(c.last_layer_updated_maximally);
            assert!(c.last_layer_initialized_maximally);
        }
    }

    #[test]
    fn sp_with_small_c_is_unstable() {
        let p = AbcParam::named(NamedParam::Sp, 2).unwrap().with_c(rat(0, 1));
        let c = p.classify();
        assert_eq!(c.regime, Regime::Unstable);
        assert!(c.init_stable, "SP init is fine; training blows up");
    }

    #[test]
    fn bad_first_layer_breaks_init_stability() {
        let mut a = vec![rat(1, 10), rat(1, 2), rat(1, 2)];
        let b = vec![rat(0, 1); 3];
        a[1] = rat(1, 2);
        let p = AbcParam::new(a, b, rat(0, 1)).unwrap();
        let c = p.classify();
        assert!(!c.init_stable);
        assert_eq!(c.regime, Regime::Unstable);
    }

    #[test]
    fn nngp_limit_flag() {
        // NTP body, enlarged b_{L+1}: a+b+r > 1, 2a+c = 1.
        let p = AbcParam::new(
            vec![rat(0, 1), rat(1, 2), rat(1, 2)],
            vec![rat(0, 1), rat(0, 1), rat(1, 2)],
            rat(0, 1),
        )
        .unwrap();
        let c = p.classify();
        assert!(c.stable && c.nontrivial);
        assert!(c.nngp_limit);
        assert_eq!(c.regime, Regime::KernelRegime);
        assert!(!ntp(2).classify().nngp_limit);
    }

    #[test]
    fn symmetry_shift_examples() {
        let p = mup(1).symmetry_shift(rat(1, 2));
        assert_eq!(p, AbcParam::named(NamedParam::Mfp, 1).unwrap());
        let q = ntp(2);
        assert_eq!(q.symmetry_shift(rat(0, 1)), q);
    }

    #[test]
    fn min_stable_c_examples() {
        let sp = AbcParam::named(NamedParam::Sp, 2).unwrap();
        assert_eq!(sp.min_stable_c(), Some(rat(1, 1)));
        let mup2 = mup(2);
        assert_eq!(mup2.min_stable_c(), Some(rat(0, 1)));
        let bad = AbcParam::new(
            vec![rat(1, 10), rat(1, 2)],
            vec![rat(0, 1), rat(0, 1)],
            rat(0, 1),
        )
        .unwrap();
        assert_eq!(bad.min_stable_c(), None);
    }

    #[test]
    fn json_round_trip() {
        let p = mup(3);
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"-1/2\""));
        let q: AbcParam = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
    }

    fn arb_rat() -> impl Strategy<Value = Rat> {
        (-8i64..=8, 1i64..=4).prop_map(|(n, d)| rat(n, d))
    }

    fn arb_param() -> impl Strategy<Value = AbcParam> {
        (1usize..=3).prop_flat_map(|l| {
            (
                proptest::collection::vec(arb_rat(), l + 1),
                proptest::collection::vec(arb_rat(), l + 1),
                arb_rat(),
            )
                .prop_map(|(a, b, c)| AbcParam::new(a, b, c).unwrap())
        })
    }

    /// Random init-stable parametrization with c at or above the stable floor.
    pub(crate) fn arb_stable_param() -> impl Strategy<Value = AbcParam> {
        (1usize..=3).prop_flat_map(|l| {
            (
                proptest::collection::vec(arb_rat(), l + 1),
                (0i64..=2, 1i64..=2),
            )
                .prop_map(move |(a, (dn, dd))| {
                    let mut b = vec![Rat::zero(); l + 1];
                    b[0] = -a[0];
                    for i in 1..l {
                        b[i] = rat(1, 2) - a[i];
                    }
                    b[l] = (rat(1, 2) - a[l]).max(rat(-1, 2));
                    let p = AbcParam::new(a, b, Rat::zero()).unwrap();
                    let c0 = p.min_stable_c().expect("init-stable by construction");
                    p.with_c(c0 + rat(dn, dd))
                })
        })
    }

    proptest! {
        #[test]
        fn r_is_min_of_layer_rs(p in arb_param()) {
            let r = p.r_value();
            let min = (1..=p.depth()).map(|l| p.layer_r(l).unwrap()).min().unwrap();
            prop_assert_eq!(r, min);
        }

        #[test]
        fn classify_invariant_under_symmetry(p in arb_param(), n in -4i64..=4, d in 1i64..=4) {
            let theta = rat(n, d);
            let c0 = p.classify();
            let c1 = p.symmetry_shift(theta).classify();
            prop_assert_eq!(c0, c1);
        }

        #[test]
        fn min_stable_c_is_tight(p in arb_param()) {
            match p.min_stable_c() {
                None => prop_assert!(!p.init_stable()),
                Some(c0) => {
                    prop_assert!(p.with_c(c0).classify().stable);
                    prop_assert!(!p.with_c(c0 - rat(1, 64)).classify().stable);
                }
            }
        }

        #[test]
        fn dichotomy_exhausts_nontrivial_stable(p in arb_stable_param()) {
            let c = p.classify();
            prop_assert!(c.stable);
            if c.nontrivial {
                let fl = c.regime == Regime::FeatureLearning;
                let kr = c.regime == Regime::KernelRegime;
                prop_assert!(fl ^ kr);
                prop_assert_eq!(fl, c.r == Rat::zero());
                prop_assert_eq!(kr, c.r > Rat::zero());
            } else {
                prop_assert_eq!(c.regime, Regime::Trivial);
            }
        }
    }
}
