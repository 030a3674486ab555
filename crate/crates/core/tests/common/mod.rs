//! Independent reference implementations used by the integration and
//! acceptance tests.
#![allow(dead_code)]

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shiftscope::subspace::{loss_and_grad, Batch};

/// Natural log of a big unsigned integer via its top 60 bits.
pub fn ln_big(n: &BigUint) -> f64 {
    let bits = n.bits();
    if bits <= 60 {
        return n.to_f64().unwrap().ln();
    }
    let shift = bits - 60;
    (n >> shift).to_f64().unwrap().ln() + shift as f64 * std::f64::consts::LN_2
}

/// `-ln P[Bin(k, num/den) >= b]` by exact rational summation.
pub fn exact_tail_neglog(k: usize, num: u64, den: u64, b: usize) -> f64 {
    let p = BigRational::new(num.into(), den.into());
    let q = BigRational::one() - &p;
    let mut total = BigRational::zero();
    let mut binom = BigRational::one();
    for j in 0..=k {
        if j > 0 {
            binom = binom * BigRational::from_integer((k - j + 1).into()) / BigRational::from_integer(j.into());
        }
        if j >= b {
            total += &binom * pow(&p, j) * pow(&q, k - j);
        }
    }
    let ratio = |r: &BigRational| {
        let (n, d) = (r.numer().to_biguint().unwrap(), r.denom().to_biguint().unwrap());
        ln_big(&n) - ln_big(&d)
    };
    let half = BigRational::new(1.into(), 2.into());
    if total > half {
        // complement is exact, so tiny scores keep full relative precision
        let c = BigRational::one() - &total;
        if c.is_zero() {
            return 0.0;
        }
        -(-ratio(&c).exp()).ln_1p()
    } else {
        -ratio(&total)
    }
}

fn pow(r: &BigRational, e: usize) -> BigRational {
    let mut out = BigRational::one();
    for _ in 0..e {
        out *= r;
    }
    out
}

/// Upper binomial tail in f64 by log-sum-exp over explicit terms.
pub fn tail_neglog_f64(k: usize, p: f64, b: usize) -> f64 {
    if b == 0 {
        return 0.0;
    }
    let lnc = |j: usize| -> f64 { (1..=j).map(|i| ((k - j + i) as f64 / i as f64).ln()).sum() };
    let terms: Vec<f64> = (b..=k)
        .map(|j| lnc(j) + j as f64 * p.ln() + (k - j) as f64 * (1.0 - p).ln())
        .collect();
    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    -(mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln())
}

/// Max over prefixes of the per-prefix tail score, with the first argmax.
pub fn score_by_enumeration(bits: &[bool], p: f64) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    let mut b = 0;
    for (i, &bit) in bits.iter().enumerate() {
        b += bit as usize;
        let v = tail_neglog_f64(i + 1, p, b);
        if v > best.0 {
            best = (v, i + 1);
        }
    }
    best
}

/// One-sided KS statistic `sup (F_null - F_obs)` by evaluating both ECDFs
/// at every sample value.
pub fn d_plus_naive(obs: &[f64], null: &[f64]) -> f64 {
    let ecdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
    obs.iter()
        .chain(null)
        .map(|&x| ecdf(null, x) - ecdf(obs, x))
        .fold(0.0, f64::max)
}

/// Exact permutation p-value of `D+` over all relabelings of the pooled
/// sample into groups of the original sizes.
pub fn permutation_p(obs: &[f64], null: &[f64]) -> f64 {
    let pooled: Vec<f64> = obs.iter().chain(null).copied().collect();
    let n = pooled.len();
    let k = obs.len();
    let observed = d_plus_naive(obs, null);
    let (mut hits, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let (a, b): (Vec<(usize, f64)>, Vec<(usize, f64)>) = pooled
            .iter()
            .copied()
            .enumerate()
            .partition(|(i, _)| mask >> i & 1 == 1);
        let a: Vec<f64> = a.into_iter().map(|(_, v)| v).collect();
        let b: Vec<f64> = b.into_iter().map(|(_, v)| v).collect();
        total += 1;
        if d_plus_naive(&a, &b) >= observed - 1e-12 {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

/// Indices of the `k` nearest rows to `q` (excluding `q`), ties by index.
pub fn brute_knn(points: &[Vec<f64>], q: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != q)
        .map(|(i, p)| (p.iter().zip(&points[q]).map(|(a, b)| (a - b) * (a - b)).sum(), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, i)| i).collect()
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Batch {
    let values: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let target: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let mut query: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.5).collect();
    query[0] = true;
    Batch {
        values,
        d,
        target,
        query,
    }
}

/// Largest relative deviation between the analytic gradient and central
/// differences of the loss, with the weight normalizer held fixed.
pub fn gradient_check(seed: u64, n: usize, d: usize, k: usize, tau: f64, lambda: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = random_batch(&mut rng, n, d);
    let theta: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let softplus = |t: f64| if t > 30.0 { t } else { t.exp().ln_1p() };
    let norm: f64 = theta.iter().map(|&t| softplus(t)).sum();
    let (_, _, grad) = loss_and_grad(&theta, &batch, tau, k, lambda, Some(norm)).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for j in 0..d {
        let mut tp = theta.clone();
        tp[j] += h;
        let mut tm = theta.clone();
        tm[j] -= h;
        let lp = loss_and_grad(&tp, &batch, tau, k, lambda, Some(norm)).unwrap().1;
        let lm = loss_and_grad(&tm, &batch, tau, k, lambda, Some(norm)).unwrap().1;
        let fd = (lp - lm) / (2.0 * h);
        let denom = grad[j].abs().max(fd.abs()).max(1e-8);
        worst = worst.max((grad[j] - fd).abs() / denom);
    }
    worst
}
