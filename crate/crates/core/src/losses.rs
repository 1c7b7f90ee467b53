//! Temperature-scaled cosine softmax and the objective terms built on it.
//!
//! Class embeddings passed to these functions are expected to be unit
//! vectors (the encoder guarantees this). Region embeddings may have any
//! nonzero length; they are normalized here.

use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};
use std::fmt;
use std::str::FromStr;

/// Softmax temperature `τ > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature<T>(T);

impl<T: Scalar> Temperature<T> {
    pub fn new(tau: T) -> Result<Self> {
        if tau > T::zero() && tau.is_finite() {
            Ok(Temperature(tau))
        } else {
            Err(Error::config(format!("temperature must be positive and finite, got {tau}")))
        }
    }

    pub fn get(self) -> T {
        self.0
    }
}

/// How background proposals enter the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BgMode {
    /// Push every background region toward a uniform class distribution.
    #[default]
    SoftBg,
    /// Learn a separate class-free prompt that background regions match.
    LearnableBg,
    /// Ignore background regions.
    NoBg,
}

impl BgMode {
    pub const ALL: [BgMode; 3] = [BgMode::SoftBg, BgMode::LearnableBg, BgMode::NoBg];

    pub fn as_str(self) -> &'static str {
        match self {
            BgMode::SoftBg => "soft_bg",
            BgMode::LearnableBg => "learnable_bg",
            BgMode::NoBg => "no_bg",
        }
    }
}

impl fmt::Display for BgMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BgMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft_bg" => Ok(BgMode::SoftBg),
            "learnable_bg" => Ok(BgMode::LearnableBg),
            "no_bg" => Ok(BgMode::NoBg),
            other => Err(Error::config(format!(
                "bg_mode must be soft_bg, learnable_bg or no_bg, got {other:?}"
            ))),
        }
    }
}

/// Class probabilities over an ordered class set.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector<T>(pub Vec<T>);

impl<T: Scalar> ScoreVector<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> T {
        self.0.iter().copied().sum()
    }

    /// Index of the largest entry; the first one wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Largest probability.
    pub fn max(&self) -> T {
        self.0[self.argmax()]
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> T {
        let mut h = T::zero();
        for &p in &self.0 {
            if p > T::zero() {
                h -= p * p.ln();
            }
        }
        h
    }
}

/// Direction of `f` as a unit vector.
///
/// The vector is first divided by its largest magnitude, so exactly scaled
/// copies `α·f` give bit-identical results.
pub fn unit<T: Scalar>(f: &[T]) -> Result<Vec<T>> {
    let m = f.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    if !(m > T::zero()) || !m.is_finite() {
        return Err(Error::data("region embedding has zero or non-finite norm"));
    }
    let g: Vec<T> = f.iter().map(|&x| x / m).collect();
    let n = dot(&g, &g).sqrt();
    Ok(g.into_iter().map(|x| x / n).collect())
}

/// `cos(f, t_c) / τ` for every embedding, with `f` already unit length.
pub fn logits<T: Scalar, E: AsRef<[T]>>(f_unit: &[T], embeddings: &[E], tau: Temperature<T>) -> Vec<T> {
    embeddings
        .iter()
        .map(|t| dot(f_unit, t.as_ref()) / tau.get())
        .collect()
}

/// Numerically stable log-softmax.
///
/// Returns `(log p, p)`. The largest logit is subtracted before
/// exponentiation.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> (Vec<T>, Vec<T>) {
    let m = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let exps: Vec<T> = logits.iter().map(|&x| (x - m).exp()).collect();
    let s: T = exps.iter().copied().sum();
    let ls = s.ln();
    let logp = logits.iter().map(|&x| (x - m) - ls).collect();
    let p = exps.into_iter().map(|e| e / s).collect();
    (logp, p)
}

fn check_embeddings<T: Scalar, E: AsRef<[T]>>(f: &[T], embeddings: &[E]) -> Result<()> {
    if embeddings.is_empty() {
        return Err(Error::data("no class embeddings"));
    }
    for t in embeddings {
        if t.as_ref().len() != f.len() {
            return Err(Error::Dimension {
                what: "class embedding",
                expected: f.len(),
                found: t.as_ref().len(),
            });
        }
    }
    Ok(())
}

/// Softmax over `cos(f, t_c) / τ`.
pub fn class_probs<T: Scalar, E: AsRef<[T]>>(
    f: &[T],
    embeddings: &[E],
    tau: Temperature<T>,
) -> Result<ScoreVector<T>> {
    check_embeddings(f, embeddings)?;
    let u = unit(f)?;
    Ok(ScoreVector(log_softmax(&logits(&u, embeddings, tau)).1))
}

/// `max(log p, log ε)` with the crate-wide floor ε.
#[inline]
pub fn clamped_log<T: Scalar>(logp: T) -> T {
    logp.max(T::log_floor().ln())
}

/// Cross-entropy of one positive region against its class index.
pub fn positive_loss<T: Scalar, E: AsRef<[T]>>(
    f: &[T],
    label: usize,
    embeddings: &[E],
    tau: Temperature<T>,
) -> Result<T> {
    check_embeddings(f, embeddings)?;
    if label >= embeddings.len() {
        return Err(Error::data(format!(
            "label index {label} outside {} base classes",
            embeddings.len()
        )));
    }
    let u = unit(f)?;
    let (logp, _) = log_softmax(&logits(&u, embeddings, tau));
    Ok(-clamped_log(logp[label]))
}

/// Mean negative log-probability over all classes for a background region.
///
/// Minimized, with value `ln |C|`, when the region's class distribution is
/// uniform.
pub fn soft_bg_loss<T: Scalar, E: AsRef<[T]>>(f: &[T], embeddings: &[E], tau: Temperature<T>) -> Result<T> {
    check_embeddings(f, embeddings)?;
    if embeddings.len() < 2 {
        return Err(Error::data("the soft background loss needs at least two classes"));
    }
    let u = unit(f)?;
    let (logp, _) = log_softmax(&logits(&u, embeddings, tau));
    Ok(soft_bg_from_log_probs(&logp))
}

/// Soft background loss of an explicit probability vector.
pub fn soft_bg_loss_from_scores<T: Scalar>(p: &ScoreVector<T>) -> Result<T> {
    if p.len() < 2 {
        return Err(Error::data("the soft background loss needs at least two classes"));
    }
    let logp: Vec<T> = p.0.iter().map(|&x| x.ln()).collect();
    Ok(soft_bg_from_log_probs(&logp))
}

/// `-(1/C) Σ clamp(log p_c)`, averaged with a running mean so equal terms
/// reproduce their value exactly.
fn soft_bg_from_log_probs<T: Scalar>(logp: &[T]) -> T {
    let mut m = clamped_log(logp[0]);
    for (k, &lp) in logp.iter().enumerate().skip(1) {
        m += (clamped_log(lp) - m) / T::lit((k + 1) as f64);
    }
    -m
}

/// Probability that a region belongs to the background prompt rather than
/// to any base class.
pub fn learnable_bg_prob<T: Scalar, E: AsRef<[T]>>(
    f: &[T],
    embeddings: &[E],
    t_bg: &[T],
    tau: Temperature<T>,
) -> Result<T> {
    check_embeddings(f, embeddings)?;
    if t_bg.len() != f.len() {
        return Err(Error::Dimension {
            what: "background embedding",
            expected: f.len(),
            found: t_bg.len(),
        });
    }
    let u = unit(f)?;
    let mut l = logits(&u, embeddings, tau);
    l.push(dot(&u, t_bg) / tau.get());
    let (logp, _) = log_softmax(&l);
    Ok(logp[logp.len() - 1].exp())
}

/// `-log p_bg`, clamped.
pub fn learnable_bg_loss<T: Scalar>(p_bg: T) -> Result<T> {
    if !(p_bg > T::zero() && p_bg <= T::one()) {
        return Err(Error::data(format!("background probability must lie in (0, 1], got {p_bg}")));
    }
    Ok(-clamped_log(p_bg.ln()))
}

/// Per-region loss terms and their gradients with respect to logits.
///
/// These are the building blocks of the training objective; the public loss
/// functions above evaluate the same expressions.
pub(crate) mod terms {
    use super::*;

    /// Cross-entropy against `label`; gradient `p - onehot`.
    pub fn positive<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
        let (logp, mut p) = log_softmax(logits);
        let clamped = logp[label] < T::log_floor().ln();
        let loss = -clamped_log(logp[label]);
        if clamped {
            p.iter_mut().for_each(|x| *x = T::zero());
        } else {
            p[label] -= T::one();
        }
        (loss, p)
    }

    /// Soft background term; gradient `p_j·|U|/C - [j ∈ U]/C` where `U`
    /// holds the classes whose log-probability is above the clamp.
    pub fn soft_bg<T: Scalar>(logits: &[T]) -> (T, Vec<T>) {
        let (logp, p) = log_softmax(logits);
        let c = T::lit(logits.len() as f64);
        let floor = T::log_floor().ln();
        let active: Vec<bool> = logp.iter().map(|&lp| lp >= floor).collect();
        let n_active = T::lit(active.iter().filter(|&&a| a).count() as f64);
        let loss = soft_bg_from_log_probs(&logp);
        let g = p
            .iter()
            .zip(&active)
            .map(|(&pj, &a)| {
                let base = pj * n_active / c;
                if a {
                    base - T::one() / c
                } else {
                    base
                }
            })
            .collect();
        (loss, g)
    }

    /// Learnable background term over `[base logits..., bg logit]`;
    /// gradient `p - onehot(bg)`.
    pub fn learnable_bg<T: Scalar>(logits_with_bg: &[T]) -> (T, Vec<T>) {
        let last = logits_with_bg.len() - 1;
        positive(logits_with_bg, last)
    }
}

/// Mean negative term plus mean positive term for one context group.
///
/// `positives` pairs each region embedding with its base-class index.
/// `t_bg` is required in [`BgMode::LearnableBg`].
pub fn group_loss<T: Scalar, E: AsRef<[T]>>(
    positives: &[(&[T], usize)],
    negatives: &[&[T]],
    mode: BgMode,
    embeddings: &[E],
    t_bg: Option<&[T]>,
    tau: Temperature<T>,
) -> Result<T> {
    if positives.is_empty() {
        return Err(Error::data("group has no positive proposals"));
    }
    if mode != BgMode::NoBg && negatives.is_empty() {
        return Err(Error::data(format!("mode {mode} needs at least one negative proposal")));
    }
    let mut lp = T::zero();
    for &(f, label) in positives {
        lp += positive_loss(f, label, embeddings, tau)?;
    }
    lp /= T::lit(positives.len() as f64);

    let ln = match mode {
        BgMode::NoBg => T::zero(),
        BgMode::SoftBg => {
            let mut s = T::zero();
            for f in negatives {
                s += soft_bg_loss(f, embeddings, tau)?;
            }
            s / T::lit(negatives.len() as f64)
        }
        BgMode::LearnableBg => {
            let t_bg = t_bg.ok_or_else(|| Error::config("learnable_bg mode needs a background embedding"))?;
            let mut s = T::zero();
            for f in negatives {
                s += learnable_bg_loss(learnable_bg_prob(f, embeddings, t_bg, tau)?)?;
            }
            s / T::lit(negatives.len() as f64)
        }
    };
    Ok(ln + lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tau(t: f64) -> Temperature<f64> {
        Temperature::new(t).unwrap()
    }

    /// Unit embeddings whose cosines with `e0` are the given values.
    fn with_cosines(cos: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = cos.len() + 1;
        let mut f = vec![0.0; d];
        f[0] = 1.0;
        let embs = cos
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let mut t = vec![0.0; d];
                t[0] = c;
                t[i + 1] = (1.0 - c * c).sqrt();
                t
            })
            .collect();
        (f, embs)
    }

    #[test]
    fn two_class_softmax() {
        let (f, e) = with_cosines(&[1.0, 0.0]);
        let p = class_probs(&f, &e, tau(1.0)).unwrap();
        assert_abs_diff_eq!(p.0[0], 0.731058578630, epsilon = 1e-9);
        assert_abs_diff_eq!(p.0[1], 0.268941421370, epsilon = 1e-9);
        let sharp = class_probs(&f, &e, tau(0.01)).unwrap();
        assert_abs_diff_eq!(sharp.0[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn equal_cosines_are_uniform() {
        let (f, e) = with_cosines(&[0.3; 5]);
        let p = class_probs(&f, &e, tau(0.01)).unwrap();
        assert!(p.0.iter().all(|&x| x == 0.2));
    }

    #[test]
    fn zero_region_rejected() {
        let (_, e) = with_cosines(&[0.3, 0.1]);
        assert!(class_probs(&[0.0, 0.0, 0.0], &e, tau(1.0)).is_err());
    }

    #[test]
    fn positive_loss_values() {
        let (f, e) = with_cosines(&[1.0, 0.0]);
        assert_abs_diff_eq!(positive_loss(&f, 0, &e, tau(1.0)).unwrap(), 0.313261687519, epsilon = 1e-9);
        let (f, e) = with_cosines(&[0.5, 0.5]);
        assert_abs_diff_eq!(positive_loss(&f, 1, &e, tau(1.0)).unwrap(), 0.693147180560, epsilon = 1e-12);
        let (f, e) = with_cosines(&[1.0, -1.0]);
        assert!(positive_loss(&f, 0, &e, tau(0.01)).unwrap() < 1e-12);
        assert!(positive_loss(&f, 2, &e, tau(0.01)).is_err());
    }

    #[test]
    fn soft_bg_values() {
        let p = ScoreVector(vec![0.97, 0.01, 0.01, 0.01]);
        assert_abs_diff_eq!(soft_bg_loss_from_scores(&p).unwrap(), 3.461492, epsilon = 1e-6);
        let u = ScoreVector(vec![0.25; 4]);
        assert_abs_diff_eq!(soft_bg_loss_from_scores(&u).unwrap(), 4f64.ln(), epsilon = 1e-15);
        let h = ScoreVector(vec![0.5; 2]);
        assert_abs_diff_eq!(soft_bg_loss_from_scores(&h).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let (f, e) = with_cosines(&[0.2; 4]);
        assert_eq!(soft_bg_loss(&f, &e, tau(0.01)).unwrap(), 4f64.ln());
    }

    #[test]
    fn learnable_bg_values() {
        let (f, e) = with_cosines(&[0.0, 0.0, 1.0]);
        let (base, bg) = e.split_at(2);
        let p = learnable_bg_prob(&f, base, &bg[0], tau(1.0)).unwrap();
        assert_abs_diff_eq!(p, std::f64::consts::E / (2.0 + std::f64::consts::E), epsilon = 1e-12);
        assert_abs_diff_eq!(learnable_bg_loss(p).unwrap(), 0.551444713, epsilon = 1e-8);
        assert_abs_diff_eq!(learnable_bg_loss(1.0 / 3.0).unwrap(), 1.098612289, epsilon = 1e-8);
        assert_eq!(learnable_bg_loss(1.0).unwrap(), 0.0);
        let (f, e) = with_cosines(&[0.4; 4]);
        let (base, bg) = e.split_at(3);
        assert_abs_diff_eq!(learnable_bg_prob(&f, base, &bg[0], tau(0.5)).unwrap(), 0.25, epsilon = 1e-15);
        let (f, e) = with_cosines(&[0.1, 0.2, 0.9]);
        let (base, bg) = e.split_at(2);
        assert!(1.0 - learnable_bg_prob(&f, base, &bg[0], tau(0.01)).unwrap() < 1e-9);
    }

    #[test]
    fn group_loss_combines_means() {
        let (fp, ep) = with_cosines(&[0.5, 0.5, 0.5, 0.5]);
        let pos = [(fp.as_slice(), 0usize)];
        let neg = [fp.as_slice()];
        let total = group_loss(&pos, &neg, BgMode::SoftBg, &ep, None, tau(1.0)).unwrap();
        assert_abs_diff_eq!(total, 2.0 * 4f64.ln(), epsilon = 1e-12);
        let only_pos = group_loss(&pos, &[], BgMode::NoBg, &ep, None, tau(1.0)).unwrap();
        assert_abs_diff_eq!(only_pos, 4f64.ln(), epsilon = 1e-12);
        let twice = group_loss(&pos, &[fp.as_slice(), fp.as_slice()], BgMode::SoftBg, &ep, None, tau(1.0)).unwrap();
        assert_eq!(twice, total);
        assert!(group_loss(&[], &neg, BgMode::SoftBg, &ep, None, tau(1.0)).is_err());
        assert!(group_loss(&pos, &[], BgMode::SoftBg, &ep, None, tau(1.0)).is_err());
    }

    #[test]
    fn term_gradients_match_differences() {
        let l = [0.3, -1.2, 2.0, 0.7];
        let h = 1e-6;
        for which in 0..3 {
            let f = |x: &[f64]| match which {
                0 => terms::positive(x, 2),
                1 => terms::soft_bg(x),
                _ => terms::learnable_bg(x),
            };
            let (_, g) = f(&l);
            for j in 0..l.len() {
                let mut a = l;
                let mut b = l;
                a[j] += h;
                b[j] -= h;
                let num = (f(&a).0 - f(&b).0) / (2.0 * h);
                assert_abs_diff_eq!(g[j], num, epsilon = 1e-8);
            }
        }
    }
}
