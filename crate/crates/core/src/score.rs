//! Pointwise binomial evidence scores over ordered neighbour labels, and
//! their Monte-Carlo null distributions.
//!
//! For a test point, the k-th neighbour bit is 1 when the neighbour belongs
//! to the test cohort. Under local exchangeability the count of such bits
//! among the first `K` neighbours is `Binomial(K, p)`, with `p` the test
//! cohort's share of the active pool. The evidence at scale `K` is the
//! negative natural log of the upper-tail probability of the observed count;
//! the score is its maximum over `K = 1..=K_M`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Cohort, PooledIndex};
use crate::error::{Error, Result};

/// Draws per independent random stream in [`calibrate_null`].
const NULL_CHUNK: usize = 4096;

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidProbability(p))
    }
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for i in 1..=n {
        acc += (i as f64).ln();
        out.push(acc);
    }
    out
}

/// `-ln Pr[Binomial(k, p) >= b]` for every `b` in `0..=k`.
///
/// Upper tails are accumulated in log space from the top term down; when the
/// upper tail exceeds one half the complementary lower tail is accumulated
/// instead and mapped through `ln_1p`, which keeps tiny scores accurate.
fn neglog_tails(k: usize, ln_p: f64, ln_q: f64, ln_fact: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), k + 1);
    let ln_pmf: Vec<f64> = (0..=k)
        .map(|b| ln_fact[k] - ln_fact[b] - ln_fact[k - b] + b as f64 * ln_p + (k - b) as f64 * ln_q)
        .collect();
    // ln Pr[B >= b]
    let mut upper = vec![f64::NEG_INFINITY; k + 2];
    for b in (0..=k).rev() {
        upper[b] = log_add(upper[b + 1], ln_pmf[b]);
    }
    // ln Pr[B <= b]
    let mut lower = vec![f64::NEG_INFINITY; k + 1];
    let mut acc = f64::NEG_INFINITY;
    for b in 0..=k {
        acc = log_add(acc, ln_pmf[b]);
        lower[b] = acc;
    }
    out[0] = 0.0;
    for b in 1..=k {
        out[b] = if upper[b] < -std::f64::consts::LN_2 {
            -upper[b]
        } else {
            -(-lower[b - 1].exp()).ln_1p()
        };
        out[b] = out[b].max(0.0);
    }
}

/// Negative natural log of the exact binomial upper tail `Pr[Binomial(k, p) >= b_obs]`.
pub fn binomial_tail_neglog(k: usize, p: f64, b_obs: usize) -> Result<f64> {
    check_probability(p)?;
    if b_obs > k {
        return Err(Error::CountOutOfRange { b_obs, k });
    }
    if b_obs == 0 {
        return Ok(0.0);
    }
    let ln_fact = ln_factorials(k);
    let mut out = vec![0.0; k + 1];
    neglog_tails(k, p.ln(), (-p).ln_1p(), &ln_fact, &mut out);
    Ok(out[b_obs])
}

/// Precomputed per-scale evidence `-ln Pr[Binomial(K, p) >= b]` for all
/// `1 <= K <= k_max`, `0 <= b <= K`.
#[derive(Debug, Clone)]
pub struct TailTable {
    p: f64,
    k_max: usize,
    vals: Vec<f64>,
}

impl TailTable {
    pub fn new(p: f64, k_max: usize) -> Result<Self> {
        check_probability(p)?;
        let ln_fact = ln_factorials(k_max);
        let (ln_p, ln_q) = (p.ln(), (-p).ln_1p());
        let mut vals = vec![0.0; (k_max + 1) * (k_max + 2) / 2];
        for k in 1..=k_max {
            let off = Self::offset(k);
            neglog_tails(k, ln_p, ln_q, &ln_fact, &mut vals[off..off + k + 1]);
        }
        Ok(TailTable { p, k_max, vals })
    }

    #[inline]
    fn offset(k: usize) -> usize {
        k * (k + 1) / 2
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    #[inline]
    pub fn get(&self, k: usize, b: usize) -> f64 {
        self.vals[Self::offset(k) + b]
    }

    /// Max-over-scales score of a bit sequence; sequences longer than
    /// `k_max` are cut at `k_max`. Returns `(value, argmax K)`, the argmax
    /// being the smallest scale attaining the maximum (`0` when empty).
    #[inline]
    pub fn score_bits<I: IntoIterator<Item = bool>>(&self, bits: I) -> (f64, usize) {
        let mut count = 0;
        let mut best = 0.0;
        let mut arg = 0;
        for (i, bit) in bits.into_iter().take(self.k_max).enumerate() {
            count += bit as usize;
            let k = i + 1;
            let v = self.vals[Self::offset(k) + count];
            if k == 1 || v > best {
                best = v;
                arg = k;
            }
        }
        (best, arg)
    }
}

/// Ordered membership bits of a point's neighbours (1 = test cohort).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborSequence {
    pub bits: Vec<bool>,
    /// fewer than the requested `K_M` active neighbours were available
    pub truncated: bool,
}

impl NeighborSequence {
    pub fn new(bits: Vec<bool>) -> Self {
        NeighborSequence { bits, truncated: false }
    }

    /// `B(K)` for `K = 1..=len`.
    pub fn cumulative(&self) -> Vec<usize> {
        self.bits
            .iter()
            .scan(0, |acc, &b| {
                *acc += b as usize;
                Some(*acc)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    pub value: f64,
    pub argmax_k: usize,
    /// cohort whose local overdensity the score measures
    pub direction: Cohort,
}

/// Scores a sequence whose bits mark test-cohort neighbours (the test
/// cohort defaults to `Y`; see [`score_sequence_for`]).
pub fn score_sequence(seq: &NeighborSequence, p: f64) -> Result<AnomalyScore> {
    score_sequence_for(seq, p, Cohort::Y)
}

pub fn score_sequence_for(seq: &NeighborSequence, p: f64, direction: Cohort) -> Result<AnomalyScore> {
    if seq.bits.is_empty() {
        return Err(Error::EmptySequence);
    }
    let table = TailTable::new(p, seq.bits.len())?;
    let (value, argmax_k) = table.score_bits(seq.bits.iter().copied());
    Ok(AnomalyScore {
        value,
        argmax_k,
        direction,
    })
}

/// Score of one pooled point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointScore {
    pub id: usize,
    pub score: AnomalyScore,
    pub truncated: bool,
}

/// Test cohort's share of the active pool.
pub fn active_share(idx: &PooledIndex, test: Cohort) -> Result<f64> {
    for c in [Cohort::X, Cohort::Y] {
        if idx.active_count(c) == 0 {
            return Err(Error::EmptyCohort(c.name()));
        }
    }
    Ok(idx.active_count(test) as f64 / idx.total_active() as f64)
}

pub(crate) fn warn_depth(idx: &PooledIndex, k_max: usize) {
    if k_max * 10 > idx.total_active() {
        log::warn!(
            "K_M = {k_max} exceeds a tenth of the pooled size {}; the binomial null is only approximate",
            idx.total_active()
        );
    }
}

/// Neighbour bits of `q` among the first `k_max` active neighbours.
pub fn neighbor_sequence(idx: &PooledIndex, q: usize, test: Cohort, k_max: usize) -> Result<NeighborSequence> {
    let nb = idx.knn_query(q, k_max)?;
    Ok(NeighborSequence {
        truncated: nb.len() < k_max,
        bits: nb.iter().map(|n| n.origin == test).collect(),
    })
}

/// Scores every active point of `test` against the current pool, with
/// `p = n_test / (n_X + n_Y)` over active counts.
pub fn score_cohort(idx: &PooledIndex, test: Cohort, k_max: usize) -> Result<Vec<PointScore>> {
    if k_max == 0 {
        return Err(Error::InvalidConfig("K_M must be at least 1".into()));
    }
    let p = active_share(idx, test)?;
    warn_depth(idx, k_max);
    let table = TailTable::new(p, k_max)?;
    let origins = idx.origins();
    idx.active_ids(test)
        .map(|q| {
            let nb = idx.knn_query(q, k_max)?;
            let (value, argmax_k) = table.score_bits(nb.iter().map(|n| origins[n.id] == test));
            Ok(PointScore {
                id: q,
                score: AnomalyScore {
                    value,
                    argmax_k,
                    direction: test,
                },
                truncated: nb.len() < k_max,
            })
        })
        .collect()
}

/// Monte-Carlo distribution of max-over-scales scores of i.i.d.
/// Bernoulli(`p_hat`) sequences of length `k_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullModel {
    pub p_hat: f64,
    pub k_max: usize,
    pub n_mc: usize,
    pub seed: u64,
    samples: Vec<f64>,
}

impl NullModel {
    /// Sorted ascending.
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn from_samples(p_hat: f64, k_max: usize, seed: u64, mut samples: Vec<f64>) -> Self {
        samples.sort_by(f64::total_cmp);
        NullModel {
            p_hat,
            k_max,
            n_mc: samples.len(),
            seed,
            samples,
        }
    }

    /// Empirical quantile: the sample at index `floor(q * n)`, clamped to the
    /// last sample.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&q) || q.is_nan() {
            return Err(Error::InvalidLevel(q));
        }
        let n = self.samples.len();
        let i = ((q * n as f64 + 1e-9).floor() as usize).min(n - 1);
        Ok(self.samples[i])
    }

    /// Samples `>= threshold`.
    pub fn tail(&self, threshold: f64) -> &[f64] {
        let start = self.samples.partition_point(|&v| v < threshold);
        &self.samples[start..]
    }

    /// Fraction of samples `>= threshold`.
    pub fn exceedance(&self, threshold: f64) -> f64 {
        self.tail(threshold).len() as f64 / self.samples.len() as f64
    }
}

pub fn calibrate_null(k_max: usize, p: f64, n_mc: usize, seed: u64) -> Result<NullModel> {
    if n_mc < 1000 {
        return Err(Error::TooFewSamples { min: 1000, got: n_mc });
    }
    if k_max == 0 {
        return Err(Error::InvalidConfig("K_M must be at least 1".into()));
    }
    let table = TailTable::new(p, k_max)?;
    let mut samples = Vec::with_capacity(n_mc);
    let mut chunk = 0u64;
    while samples.len() < n_mc {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chunk);
        let m = NULL_CHUNK.min(n_mc - samples.len());
        for _ in 0..m {
            let (v, _) = table.score_bits((0..k_max).map(|_| rng.random::<f64>() < p));
            samples.push(v);
        }
        chunk += 1;
    }
    Ok(NullModel::from_samples(p, k_max, seed, samples))
}

/// Score threshold whose null exceedance probability is `p_ext`.
pub fn flag_threshold(null: &NullModel, p_ext: f64) -> Result<f64> {
    if !(p_ext > 0.0 && p_ext < 1.0) {
        return Err(Error::InvalidLevel(p_ext));
    }
    if (null.n_mc as f64) < 10.0 / p_ext {
        log::warn!(
            "n_mc = {} gives fewer than 10 expected exceedances at p_ext = {p_ext}",
            null.n_mc
        );
    }
    null.quantile(1.0 - p_ext)
}

/// Writes `point_id, cohort, row, upsilon, argmax_k, direction, truncated`.
pub fn write_scores_csv(path: &Path, idx: &PooledIndex, scores: &[PointScore]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "point_id",
        "cohort",
        "row",
        "upsilon",
        "argmax_k",
        "direction",
        "truncated",
    ])?;
    for s in scores {
        w.write_record([
            s.id.to_string(),
            idx.origin(s.id).to_string(),
            idx.cohort_row(s.id).to_string(),
            format!("{:?}", s.score.value),
            s.score.argmax_k.to_string(),
            format!("{}-overdensity", s.score.direction),
            s.truncated.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{pool, FeatureMatrix};
    use approx::assert_relative_eq;

    #[test]
    fn all_successes_tail() {
        let v = binomial_tail_neglog(5, 0.5, 5).unwrap();
        assert_relative_eq!(v, 32f64.ln(), max_relative = 1e-14);
        assert_relative_eq!(v, 3.4657, epsilon = 1e-4);
    }

    #[test]
    fn whole_support_tail_is_zero() {
        assert_eq!(binomial_tail_neglog(10, 0.5, 0).unwrap(), 0.0);
    }

    #[test]
    fn two_term_tail() {
        // Pr[B>=3] = 4*(1/4)^3*(3/4) + (1/4)^4 = 13/256
        let v = binomial_tail_neglog(4, 0.25, 3).unwrap();
        assert_relative_eq!(v, -(13.0f64 / 256.0).ln(), max_relative = 1e-13);
        assert_relative_eq!(v, 2.98023, epsilon = 1e-5);
    }

    #[test]
    fn tail_errors() {
        assert!(matches!(
            binomial_tail_neglog(4, 0.0, 1),
            Err(Error::InvalidProbability(_))
        ));
        assert!(matches!(
            binomial_tail_neglog(4, 1.0, 1),
            Err(Error::InvalidProbability(_))
        ));
        assert!(matches!(
            binomial_tail_neglog(4, 0.5, 5),
            Err(Error::CountOutOfRange { b_obs: 5, k: 4 })
        ));
    }

    #[test]
    fn deep_tail_stays_finite() {
        // Pr = 0.01^150 = 1e-300
        let v = binomial_tail_neglog(150, 0.01, 150).unwrap();
        assert_relative_eq!(v, 300.0 * 10f64.ln(), max_relative = 1e-12);
        let v = binomial_tail_neglog(2000, 0.5, 2000).unwrap();
        assert_relative_eq!(v, 2000.0 * 2f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn table_matches_direct() {
        let t = TailTable::new(0.3, 40).unwrap();
        for k in [1, 7, 40] {
            for b in 0..=k {
                assert_eq!(t.get(k, b), binomial_tail_neglog(k, 0.3, b).unwrap());
            }
        }
    }

    #[test]
    fn sequence_hand_example() {
        let s = score_sequence(&NeighborSequence::new(vec![true, true, false]), 0.5).unwrap();
        // per-K: ln 2, ln 4, -ln(1/2)
        assert_relative_eq!(s.value, 4f64.ln(), max_relative = 1e-14);
        assert_eq!(s.argmax_k, 2);
    }

    #[test]
    fn all_zero_bits_score_zero() {
        let s = score_sequence(&NeighborSequence::new(vec![false; 12]), 0.4).unwrap();
        assert_eq!(s.value, 0.0);
        assert_eq!(s.argmax_k, 1);
        assert!(matches!(
            score_sequence(&NeighborSequence::new(vec![]), 0.5),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn null_is_deterministic_and_two_point_for_depth_one() {
        let a = calibrate_null(1, 0.5, 20_000, 9).unwrap();
        let b = calibrate_null(1, 0.5, 20_000, 9).unwrap();
        assert_eq!(a, b);
        let zeros = a.samples().iter().filter(|&&v| v == 0.0).count();
        let ln2 = a.samples().iter().filter(|&&v| (v - 2f64.ln()).abs() < 1e-15).count();
        assert_eq!(zeros + ln2, 20_000);
        let sd = (20_000.0f64 * 0.25).sqrt();
        assert!((zeros as f64 - 10_000.0).abs() < 3.0 * sd, "zeros = {zeros}");
        assert!(matches!(
            calibrate_null(5, 0.5, 999, 0),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn quantile_conventions() {
        let null = NullModel::from_samples(0.5, 1, 0, (0..100).map(f64::from).collect());
        assert_eq!(null.quantile(0.97).unwrap(), 97.0);
        assert_eq!(null.quantile(0.0).unwrap(), 0.0);
        assert_eq!(flag_threshold(&null, 0.01).unwrap(), 99.0);
        assert_eq!(flag_threshold(&null, 0.5).unwrap(), 50.0);
        assert!(matches!(flag_threshold(&null, 0.0), Err(Error::InvalidLevel(_))));
        assert!(matches!(flag_threshold(&null, 1.0), Err(Error::InvalidLevel(_))));
        assert_eq!(null.tail(97.0), &[97.0, 98.0, 99.0]);
    }

    #[test]
    fn single_test_point() {
        let x = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let y = FeatureMatrix::from_rows(&[vec![0.5]]).unwrap();
        let idx = pool(&x, &y).unwrap();
        let s = score_cohort(&idx, Cohort::Y, 3).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].id, 3);
        // no Y neighbours at all: tail probability one everywhere
        assert_eq!(s[0].score.value, 0.0);
        assert_eq!(active_share(&idx, Cohort::Y).unwrap(), 0.25);
    }
}
