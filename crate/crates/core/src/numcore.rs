//! Numerical primitives shared by every other module.
//!
//! Softmax and log-softmax always subtract the maximum logit before
//! exponentiating, so arbitrarily large logits never overflow.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance on the sum of a probability vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A probability distribution over `C` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("probability vector is empty"));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("probability {v} outside [0, 1]")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    /// One-hot distribution at `class`.
    pub fn one_hot(len: usize, class: usize) -> Result<Self> {
        if class >= len {
            return Err(Error::invalid(format!("class {class} out of range for {len} classes")));
        }
        let mut v = vec![0.0; len];
        v[class] = 1.0;
        Ok(Self(v))
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Unnormalised class scores. Entries are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for LogitVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::invalid("empty logit vector"));
    }
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::invalid(format!("non-finite logit {} at index {i}", values[i]))),
        None => Ok(()),
    }
}

/// `softmax(z / tau)`.
pub fn tempered_softmax(z: &[f64], tau: f64) -> Result<ProbVector> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    check_finite(z)?;
    let mut out = vec![0.0; z.len()];
    softmax_into(z, tau, &mut out);
    Ok(ProbVector(out))
}

/// `log softmax(z)` via log-sum-exp.
pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    check_finite(z)?;
    let mut out = vec![0.0; z.len()];
    log_softmax_into(z, 1.0, &mut out);
    Ok(out)
}

/// Unchecked tempered softmax for hot loops. Inputs must be finite and non-empty.
pub(crate) fn softmax_into(z: &[f64], tau: f64, out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = ((v - max) / tau).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_softmax_into(z: &[f64], tau: f64, out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|&v| ((v - max) / tau).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max) / tau - lse;
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> Result<usize> {
    if v.is_empty() {
        return Err(Error::invalid("argmax of an empty sequence"));
    }
    Ok(argmax_unchecked(v))
}

pub(crate) fn argmax_unchecked(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Deterministic random stream (ChaCha8, seeded from a `u64`).
///
/// ChaCha8 output is specified bit-for-bit, so equal seeds give equal
/// streams on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    /// Uniform in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `0..n`, in sampling order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn constant_logits_give_uniform() {
        for c in [-7.5, 0.0, 3.0, 1e5] {
            let p = tempered_softmax(&[c, c, c], 4.0).unwrap();
            assert!(close(p.as_slice(), &[1.0 / 3.0; 3], 1e-15));
        }
    }

    #[test]
    fn softmax_matches_high_precision_values() {
        let p = tempered_softmax(&[1.0, 2.0, 3.0], 1.0).unwrap();
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_65, 0.665_240_955_774_821_9];
        assert!(close(p.as_slice(), &expected, 1e-15));
    }

    #[test]
    fn huge_temperature_flattens() {
        let p = tempered_softmax(&[1.0, 2.0, 3.0], 1e6).unwrap();
        assert!(close(p.as_slice(), &[1.0 / 3.0; 3], 1e-6));
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        assert!(matches!(tempered_softmax(&[1.0], 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(tempered_softmax(&[1.0], -1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(tempered_softmax(&[f64::NAN, 1.0], 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(log_softmax(&[f64::INFINITY]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn log_softmax_cases() {
        let l = log_softmax(&[0.0, 0.0]).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!(close(&l, &[-ln2, -ln2], 1e-15));

        let l = log_softmax(&[1000.0, 0.0]).unwrap();
        assert!(l[0].abs() < 1e-12);
        assert!((l[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn argmax_cases() {
        assert_eq!(argmax(&[0.1, 0.1, 0.5, 0.3]).unwrap(), 2);
        assert_eq!(argmax(&[0.5, 0.5]).unwrap(), 0);
        assert_eq!(argmax(&[-1.0, -2.0, -3.0]).unwrap(), 0);
        assert!(argmax(&[]).is_err());
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
        assert_eq!(ProbVector::one_hot(3, 1).unwrap().as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn seeded_streams_repeat() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        let xs: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        let na: Vec<u64> = (0..16).map(|_| a.standard_normal().to_bits()).collect();
        let nb: Vec<u64> = (0..16).map(|_| b.standard_normal().to_bits()).collect();
        assert_eq!(na, nb);
        assert_ne!(SeededRng::new(1).next_u64(), SeededRng::new(2).next_u64());
    }

    proptest! {
        #[test]
        fn softmax_is_simplex_and_order_preserving(
            z in prop::collection::vec(-50.0f64..50.0, 1..12),
            tau in 0.05f64..20.0,
        ) {
            let p = tempered_softmax(&z, tau).unwrap();
            let sum: f64 = p.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            for i in 0..z.len() {
                for j in 0..z.len() {
                    if z[i] < z[j] {
                        prop_assert!(p[i] <= p[j]);
                    }
                }
            }
            prop_assert_eq!(argmax(p.as_slice()).unwrap(), argmax(&z).unwrap());
        }

        #[test]
        fn exp_log_softmax_matches_softmax(z in prop::collection::vec(-30.0f64..30.0, 1..10)) {
            let l = log_softmax(&z).unwrap();
            let p = tempered_softmax(&z, 1.0).unwrap();
            let total: f64 = l.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for (a, b) in l.iter().zip(p.as_slice()) {
                prop_assert!((a.exp() - b).abs() < 1e-12);
            }
        }
    }
}
