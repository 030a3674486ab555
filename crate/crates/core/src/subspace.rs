//! Neighbour-enriched subspace localization.
//!
//! Per-feature weights are learned so that, in a soft kNN over weighted
//! features, query points put as much neighbour mass as possible on target
//! points. The learned ranking is then cut to a discrete subset by hard-kNN
//! cross-validation.

use std::collections::HashMap;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Cohort, FeatureMatrix};
use crate::equalize::{self, EqualizationResult, EqualizeParams};
use crate::error::{Error, Result};
use crate::knn::BruteForce;
use crate::optim::Adam;

const SELF_PENALTY: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubspaceMasks {
    pub target: Vec<bool>,
    pub query: Vec<bool>,
}

impl SubspaceMasks {
    /// `query` defaults to `target`.
    pub fn new(target: Vec<bool>, query: Option<Vec<bool>>) -> Result<Self> {
        let query = query.unwrap_or_else(|| target.clone());
        if query.len() != target.len() {
            return Err(Error::DimensionMismatch(target.len(), query.len()));
        }
        if !query.iter().any(|&q| q) {
            return Err(Error::EmptyInput("query set"));
        }
        Ok(SubspaceMasks { target, query })
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn n_queries(&self) -> usize {
        self.query.iter().filter(|&&q| q).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub pos_frac: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub lr: f64,
    pub l1: f64,
    pub n_splits: usize,
    pub seed: u64,
    /// multiply the temperature by the number of features, so logits use
    /// the mean rather than the sum of weighted squared differences
    pub tau_per_feature: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 100,
            beta: 0.2,
            epochs: 3000,
            batch_size: 200,
            pos_frac: 0.5,
            tau_start: 1.0,
            tau_end: 0.1,
            lr: 1e-2,
            l1: 1e-2,
            n_splits: 5,
            seed: 0,
            tau_per_feature: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.k == 0 || self.epochs == 0 || self.batch_size < 2 {
            return bad("K and epochs must be positive and batch_size at least 2");
        }
        if !(self.pos_frac > 0.0 && self.pos_frac < 1.0) {
            return bad("pos_frac must lie in (0, 1)");
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0 && self.tau_end <= self.tau_start) {
            return bad("temperatures must be positive with tau_end <= tau_start");
        }
        if !(self.lr > 0.0 && self.l1 >= 0.0 && self.beta >= 0.0) {
            return bad("lr must be positive, l1 and beta non-negative");
        }
        if self.n_splits < 2 {
            return bad("n_splits must be at least 2");
        }
        Ok(())
    }
}

fn softplus(t: f64) -> f64 {
    if t > 30.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `(w_raw, w_eff)` for unconstrained parameters `theta`.
pub fn effective_weights(theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFiniteParameter);
    }
    let raw: Vec<f64> = theta.iter().map(|&t| softplus(t)).collect();
    let eff = scale_weights(&raw, raw.iter().sum());
    Ok((raw, eff))
}

/// `w_raw * d / (sum + 1e-8)` with `sum` held fixed.
fn scale_weights(raw: &[f64], sum: f64) -> Vec<f64> {
    let c = raw.len() as f64 / (sum + 1e-8);
    raw.iter().map(|w| w * c).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub theta: Vec<f64>,
    pub w_raw: Vec<f64>,
    pub w_eff: Vec<f64>,
}

impl WeightVector {
    pub fn from_theta(theta: Vec<f64>) -> Result<Self> {
        let (w_raw, w_eff) = effective_weights(&theta)?;
        Ok(WeightVector { theta, w_raw, w_eff })
    }

    /// Feature indices by decreasing `w_eff`, ties by index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut r: Vec<usize> = (0..self.w_eff.len()).collect();
        r.sort_by(|&a, &b| self.w_eff[b].total_cmp(&self.w_eff[a]).then(a.cmp(&b)));
        r
    }

    /// The `m` highest-weighted features, ascending.
    pub fn top_m(&self, m: usize) -> Vec<usize> {
        let mut r = self.ranking();
        r.truncate(m);
        r.sort_unstable();
        r
    }
}

fn logit_scale(tau: f64) -> f64 {
    1.0 / tau.max(1e-6)
}

/// Indices of the row's kept logits, by decreasing logit then index.
fn top_k_row(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    let k = k.min(logits.len());
    let cmp = |a: &usize, b: &usize| logits[*b].total_cmp(&logits[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// Softmax row over the kept columns. `out` is zero elsewhere.
fn softmax_row(logits: &[f64], keep: &[usize], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let mx = keep.iter().map(|&j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &j in keep {
        let e = (logits[j] - mx).exp();
        out[j] = e;
        z += e;
    }
    for &j in keep {
        out[j] /= z;
    }
}

fn row_logits(batch: &[f64], d: usize, w_eff: &[f64], scale: f64, i: usize, out: &mut [f64]) {
    let zi = &batch[i * d..(i + 1) * d];
    for (j, o) in out.iter_mut().enumerate() {
        let zj = &batch[j * d..(j + 1) * d];
        let mut s = 0.0;
        for k in 0..d {
            let t = w_eff[k] * (zi[k] - zj[k]);
            s += t * t;
        }
        *o = -s * scale;
    }
    out[i] -= SELF_PENALTY;
}

/// In-batch soft kNN probabilities (row-major `B x B`) for a row-major
/// `B x d` batch.
pub fn soft_knn_probs(batch: &[f64], d: usize, w_eff: &[f64], tau: f64, k: usize) -> Result<Vec<f64>> {
    let b = batch.len() / d.max(1);
    if b < 2 {
        return Err(Error::DegenerateBatch(b));
    }
    let scale = logit_scale(tau);
    let keep_k = k.min(b - 1);
    let mut p = vec![0.0; b * b];
    let mut logits = vec![0.0; b];
    for i in 0..b {
        row_logits(batch, d, w_eff, scale, i, &mut logits);
        let keep = top_k_row(&logits, keep_k);
        softmax_row(&logits, &keep, &mut p[i * b..(i + 1) * b]);
    }
    Ok(p)
}

/// `(obj, loss)` for probabilities `p` over a batch with the given masks.
pub fn batch_objective(p: &[f64], target: &[bool], query: &[bool], w_raw: &[f64], lambda: f64) -> Result<(f64, f64)> {
    let b = target.len();
    let mut n_q = 0usize;
    let mut total = 0.0;
    for i in (0..b).filter(|&i| query[i]) {
        n_q += 1;
        total += (0..b).filter(|&j| target[j]).map(|j| p[i * b + j]).sum::<f64>();
    }
    if n_q == 0 {
        return Err(Error::NoQueriesInBatch);
    }
    let obj = total / n_q as f64;
    Ok((obj, -obj + lambda * w_raw.iter().sum::<f64>()))
}

/// A training batch: row-major features and per-row masks.
#[derive(Debug, Clone)]
pub struct Batch {
    pub values: Vec<f64>,
    pub d: usize,
    pub target: Vec<bool>,
    pub query: Vec<bool>,
}

/// Loss and its gradient with respect to `theta` on one batch. The weight
/// normalizer is `norm` if given, else the current `sum(w_raw)`; either way
/// it is treated as a constant.
pub fn loss_and_grad(
    theta: &[f64],
    batch: &Batch,
    tau: f64,
    k: usize,
    lambda: f64,
    norm: Option<f64>,
) -> Result<(f64, f64, Vec<f64>)> {
    let d = batch.d;
    let b = batch.target.len();
    if b < 2 {
        return Err(Error::DegenerateBatch(b));
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFiniteParameter);
    }
    let raw: Vec<f64> = theta.iter().map(|&t| softplus(t)).collect();
    let sum = norm.unwrap_or_else(|| raw.iter().sum());
    let eff = scale_weights(&raw, sum);
    let c = d as f64 / (sum + 1e-8);
    let scale = logit_scale(tau);
    let keep_k = k.min(b - 1);

    let queries: Vec<usize> = (0..b).filter(|&i| batch.query[i]).collect();
    if queries.is_empty() {
        return Err(Error::NoQueriesInBatch);
    }
    let nq = queries.len() as f64;
    let mut logits = vec![0.0; b];
    let mut prow = vec![0.0; b];
    // g[k] = sum_i sum_j P_ij (t_j - m_i) diff_ijk^2
    let mut g = vec![0.0; d];
    let mut obj = 0.0;
    for &i in &queries {
        row_logits(&batch.values, d, &eff, scale, i, &mut logits);
        let keep = top_k_row(&logits, keep_k);
        softmax_row(&logits, &keep, &mut prow);
        let m: f64 = keep.iter().filter(|&&j| batch.target[j]).map(|&j| prow[j]).sum();
        obj += m;
        let zi = &batch.values[i * d..(i + 1) * d];
        for &j in &keep {
            let t = if batch.target[j] { 1.0 } else { 0.0 };
            let a = prow[j] * (t - m);
            if a == 0.0 {
                continue;
            }
            let zj = &batch.values[j * d..(j + 1) * d];
            for kk in 0..d {
                let diff = zi[kk] - zj[kk];
                g[kk] += a * diff * diff;
            }
        }
    }
    obj /= nq;
    let loss = -obj + lambda * raw.iter().sum::<f64>();
    // d loss / d w_eff_k = 2 w_eff_k scale g_k / nq, since d logit / d w_eff_k = -2 w_eff_k diff^2 scale
    let grad = (0..d)
        .map(|kk| {
            let dl_dweff = 2.0 * eff[kk] * scale * g[kk] / nq;
            (dl_dweff * c + lambda) * sigmoid(theta[kk])
        })
        .collect();
    Ok((obj, loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub weights: WeightVector,
    /// fewer queries than the batch quota; every batch used all of them
    pub insufficient_queries: bool,
    pub skipped_epochs: usize,
    #[serde(skip)]
    pub raw_sum_trace: Vec<f64>,
}

fn draw_batch(
    u: &FeatureMatrix,
    masks: &SubspaceMasks,
    queries: &[usize],
    others: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let want_q = ((cfg.batch_size as f64 * cfg.pos_frac).round() as usize).max(1);
    let n_q = want_q.min(queries.len());
    let n_o = (cfg.batch_size - n_q).min(others.len());
    let mut ids: Vec<usize> = index::sample(rng, queries.len(), n_q)
        .into_iter()
        .map(|i| queries[i])
        .collect();
    ids.extend(index::sample(rng, others.len(), n_o).into_iter().map(|i| others[i]));
    ids.shuffle(rng);
    let d = u.n_cols();
    let mut values = Vec::with_capacity(ids.len() * d);
    for &i in &ids {
        values.extend_from_slice(u.row(i));
    }
    Batch {
        values,
        d,
        target: ids.iter().map(|&i| masks.target[i]).collect(),
        query: ids.iter().map(|&i| masks.query[i]).collect(),
    }
}

/// Adam on `theta` from zeros with one stratified batch per epoch and a
/// geometric temperature schedule.
pub fn train_weights(u: &FeatureMatrix, masks: &SubspaceMasks, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if masks.len() != u.n_rows() {
        return Err(Error::DimensionMismatch(u.n_rows(), masks.len()));
    }
    let d = u.n_cols();
    let queries: Vec<usize> = (0..masks.len()).filter(|&i| masks.query[i]).collect();
    let others: Vec<usize> = (0..masks.len()).filter(|&i| !masks.query[i]).collect();
    if queries.is_empty() {
        return Err(Error::EmptyInput("query set"));
    }
    let want_q = ((cfg.batch_size as f64 * cfg.pos_frac).round() as usize).max(1);
    let insufficient = queries.len() < want_q;
    if insufficient {
        log::warn!(
            "only {} queries for a batch quota of {want_q}; using all of them per batch",
            queries.len()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = vec![0.0; d];
    let mut opt = Adam::new(d, cfg.lr);
    let mut skipped = 0;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let ratio = cfg.tau_end / cfg.tau_start;
    let tau_unit = if cfg.tau_per_feature { d as f64 } else { 1.0 };
    for t in 0..cfg.epochs {
        let frac = if cfg.epochs > 1 {
            t as f64 / (cfg.epochs - 1) as f64
        } else {
            0.0
        };
        let tau = cfg.tau_start * ratio.powf(frac) * tau_unit;
        let batch = draw_batch(u, masks, &queries, &others, cfg, &mut rng);
        if batch.target.len() < 2 {
            return Err(Error::DegenerateBatch(batch.target.len()));
        }
        match loss_and_grad(&theta, &batch, tau, cfg.k, cfg.l1, None) {
            Ok((_, _, grad)) => opt.step(&mut theta, &grad),
            Err(Error::NoQueriesInBatch) => skipped += 1,
            Err(e) => return Err(e),
        }
        trace.push(theta.iter().map(|&t| softplus(t)).sum());
    }
    Ok(TrainOutcome {
        weights: WeightVector::from_theta(theta)?,
        insufficient_queries: insufficient,
        skipped_epochs: skipped,
        raw_sum_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub m: usize,
    pub mean_score: f64,
    pub purity_only: f64,
    pub per_fold: Vec<f64>,
}

/// Per-query `(phi, q)` from a ranked hit list.
pub fn purity_and_ndcg(hits: &[bool], k: usize) -> (f64, f64) {
    let c = hits.iter().filter(|&&h| h).count();
    let phi = c as f64 / k as f64;
    if c == 0 {
        return (phi, 0.0);
    }
    let disc = |r: usize| 1.0 / ((r + 1) as f64).log2();
    let dcg: f64 = hits
        .iter()
        .enumerate()
        .filter(|(_, &h)| h)
        .map(|(r, _)| disc(r + 1))
        .sum();
    let ideal: f64 = (1..=c).map(disc).sum();
    (phi, dcg / ideal)
}

pub fn combined_score(phi: f64, q: f64, beta: f64) -> f64 {
    phi + beta * (1.0 - phi) * q
}

/// Stratified fold labels: queries and non-queries are shuffled separately
/// and dealt round-robin.
pub fn stratified_folds(query: &[bool], n_splits: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; query.len()];
    for flag in [true, false] {
        let mut ids: Vec<usize> = (0..query.len()).filter(|&i| query[i] == flag).collect();
        ids.shuffle(&mut rng);
        for (r, i) in ids.into_iter().enumerate() {
            fold[i] = r % n_splits;
        }
    }
    fold
}

/// Cross-validated score of the feature subset `subset`.
pub fn cv_subset_score(
    u: &FeatureMatrix,
    masks: &SubspaceMasks,
    subset: &[usize],
    k: usize,
    beta: f64,
    n_splits: usize,
    seed: u64,
) -> Result<SubsetScore> {
    let folds = stratified_folds(&masks.query, n_splits, seed);
    let bf = subset_engine(u, subset)?;
    cv_with_engine(&bf, u, masks, subset, &folds, k, beta, n_splits)
}

fn subset_engine(u: &FeatureMatrix, subset: &[usize]) -> Result<BruteForce> {
    if subset.is_empty() {
        return Err(Error::EmptyInput("feature subset"));
    }
    if let Some(&j) = subset.iter().find(|&&j| j >= u.n_cols()) {
        return Err(Error::SubsetOutOfRange {
            index: j,
            d: u.n_cols(),
        });
    }
    Ok(BruteForce::new(
        u.values(),
        u.n_cols(),
        (0..u.n_rows() as u32).collect(),
        Some(subset),
    ))
}

#[allow(clippy::too_many_arguments)]
fn cv_with_engine(
    bf: &BruteForce,
    u: &FeatureMatrix,
    masks: &SubspaceMasks,
    subset: &[usize],
    folds: &[usize],
    k: usize,
    beta: f64,
    n_splits: usize,
) -> Result<SubsetScore> {
    if n_splits < 2 {
        return Err(Error::InvalidConfig("n_splits must be at least 2".into()));
    }
    let n_q = masks.n_queries();
    if n_q < n_splits {
        return Err(Error::TooFewSamplesPerFold(format!(
            "{n_q} queries for {n_splits} folds"
        )));
    }
    let mut per_fold = Vec::with_capacity(n_splits);
    let mut purity_fold = Vec::with_capacity(n_splits);
    let mut q = vec![0.0; subset.len()];
    for f in 0..n_splits {
        let n_train = folds.iter().filter(|&&x| x != f).count();
        if n_train < k {
            return Err(Error::TooFewSamplesPerFold(format!(
                "{n_train} training points for K={k}"
            )));
        }
        let (mut s_sum, mut p_sum, mut n) = (0.0, 0.0, 0usize);
        for i in (0..u.n_rows()).filter(|&i| folds[i] == f && masks.query[i]) {
            let row = u.row(i);
            for (t, &j) in subset.iter().enumerate() {
                q[t] = row[j];
            }
            let nn = bf.query(&q, k, |id| folds[id as usize] != f);
            let hits: Vec<bool> = nn.iter().map(|&(_, id)| masks.target[id as usize]).collect();
            let (phi, nd) = purity_and_ndcg(&hits, k);
            s_sum += combined_score(phi, nd, beta);
            p_sum += phi;
            n += 1;
        }
        per_fold.push(s_sum / n as f64);
        purity_fold.push(p_sum / n as f64);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(SubsetScore {
        m: subset.len(),
        mean_score: mean(&per_fold),
        purity_only: mean(&purity_fold),
        per_fold,
    })
}

/// Candidate subset sizes: `d`, then multiples of 50 down to 150, of 5 down
/// to 50, of 2 down to 16, then every size from 15 to 1.
pub fn subset_grid(d: usize) -> Vec<usize> {
    let mut g = Vec::new();
    if d == 0 {
        return g;
    }
    g.push(d);
    let mut cur = d;
    for (floor, step) in [(150, 50), (50, 5), (16, 2)] {
        loop {
            let next = (cur - 1) / step * step;
            if next < floor || cur <= floor {
                break;
            }
            g.push(next);
            cur = next;
        }
    }
    for m in (1..=15.min(cur - 1)).rev() {
        g.push(m);
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub m_star: usize,
    pub features: Vec<usize>,
    pub curve: Vec<SubsetScore>,
}

/// Scores every grid size and keeps the best (ties: smaller subset).
pub fn select_subset(
    u: &FeatureMatrix,
    masks: &SubspaceMasks,
    w: &WeightVector,
    cfg: &TrainConfig,
) -> Result<Selection> {
    let folds = stratified_folds(&masks.query, cfg.n_splits, cfg.seed);
    let mut curve = Vec::new();
    for m in subset_grid(u.n_cols()) {
        let subset = w.top_m(m);
        let bf = subset_engine(u, &subset)?;
        curve.push(cv_with_engine(
            &bf,
            u,
            masks,
            &subset,
            &folds,
            cfg.k,
            cfg.beta,
            cfg.n_splits,
        )?);
    }
    let best = curve
        .iter()
        .min_by(|a, b| b.mean_score.total_cmp(&a.mean_score).then(a.m.cmp(&b.m)))
        .expect("grid is non-empty");
    Ok(Selection {
        m_star: best.m,
        features: w.top_m(best.m),
        curve,
    })
}

pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    use std::collections::BTreeSet;
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineParams {
    pub max_refine_iters: usize,
    pub stable_jaccard: f64,
    pub graph_k: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams {
            max_refine_iters: 5,
            stable_jaccard: 0.95,
            graph_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineIteration {
    pub support: Vec<usize>,
    pub w_eff: Vec<f64>,
    pub m_star: usize,
    pub curve: Vec<SubsetScore>,
    pub n_queries: usize,
    pub insufficient_queries: bool,
}

/// Attribution of one mode: the final support and the points the mode
/// resolves to after re-localization in that support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAttribution {
    pub cohort: Cohort,
    /// cohort rows of the mode as first detected
    pub initial_points: Vec<usize>,
    /// cohort rows of the mode after the last re-localization
    pub points: Vec<usize>,
    /// all pruned rows of `cohort` in the last re-localization
    pub pruned_in_support: Vec<usize>,
    pub support: Vec<usize>,
    pub converged: bool,
    pub iterations: Vec<RefineIteration>,
}

/// Shared state for refining several modes of one cohort pair.
pub struct Refiner<'a> {
    x: &'a FeatureMatrix,
    y: &'a FeatureMatrix,
    u: FeatureMatrix,
    eq_params: EqualizeParams,
    cfg: TrainConfig,
    params: RefineParams,
    seed: u64,
    cache: HashMap<Vec<usize>, EqualizationResult>,
}

impl<'a> Refiner<'a> {
    pub fn new(
        x: &'a FeatureMatrix,
        y: &'a FeatureMatrix,
        eq_params: EqualizeParams,
        cfg: TrainConfig,
        params: RefineParams,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let u = x.vstack(y)?;
        Ok(Refiner {
            x,
            y,
            u,
            eq_params,
            cfg,
            params,
            seed,
            cache: HashMap::new(),
        })
    }

    fn offset(&self, c: Cohort) -> usize {
        match c {
            Cohort::X => 0,
            Cohort::Y => self.x.n_rows(),
        }
    }

    fn masks(&self, cohort: Cohort, rows: &[usize]) -> Result<SubspaceMasks> {
        let n = self.u.n_rows();
        let off = self.offset(cohort);
        let target: Vec<bool> = (0..n)
            .map(|i| (i >= self.x.n_rows()) == (cohort == Cohort::Y))
            .collect();
        let mut query = vec![false; n];
        for &r in rows {
            query[off + r] = true;
        }
        SubspaceMasks::new(target, Some(query))
    }

    /// Equalization restricted to `support`, memoized.
    pub fn equalize_in(&mut self, support: &[usize]) -> Result<&EqualizationResult> {
        if !self.cache.contains_key(support) {
            let xs = self.x.select_columns(support)?;
            let ys = self.y.select_columns(support)?;
            let r = equalize::equalize(&xs, &ys, &self.eq_params, self.seed)?;
            self.cache.insert(support.to_vec(), r);
        }
        Ok(&self.cache[support])
    }

    /// Alternates weight learning and re-localization for one mode.
    pub fn refine(&mut self, cohort: Cohort, mode: &[usize]) -> Result<ModeAttribution> {
        if mode.is_empty() {
            return Err(Error::EmptyPrunedSet);
        }
        let mut points = mode.to_vec();
        let mut pruned_in_support = Vec::new();
        let mut iterations: Vec<RefineIteration> = Vec::new();
        let mut converged = false;
        for it in 0..self.params.max_refine_iters {
            let masks = self.masks(cohort, &points)?;
            let cfg = TrainConfig {
                seed: self.cfg.seed.wrapping_add(it as u64),
                ..self.cfg.clone()
            };
            let trained = train_weights(&self.u, &masks, &cfg)?;
            let sel = select_subset(&self.u, &masks, &trained.weights, &cfg)?;
            log::info!(
                "{cohort} mode of {} points, iteration {it}: support {:?}",
                points.len(),
                sel.features
            );
            let stable = iterations
                .last()
                .is_some_and(|prev| jaccard(&prev.support, &sel.features) >= self.params.stable_jaccard);
            let support = sel.features.clone();
            iterations.push(RefineIteration {
                support: sel.features,
                w_eff: trained.weights.w_eff,
                m_star: sel.m_star,
                curve: sel.curve,
                n_queries: points.len(),
                insufficient_queries: trained.insufficient_queries,
            });
            if stable {
                converged = true;
                break;
            }
            let graph_k = self.params.graph_k;
            let eq = self.equalize_in(&support)?;
            let pruned = eq.pruned(cohort).to_vec();
            if pruned.is_empty() {
                log::info!("no {cohort} points pruned in support {support:?}");
                pruned_in_support.clear();
                break;
            }
            let sub = match cohort {
                Cohort::X => self.x,
                Cohort::Y => self.y,
            }
            .select_columns(&support)?;
            let modes = equalize::partition_modes(&pruned, &sub, graph_k)?.modes;
            // largest overlap with the current points, then largest mode
            let mut next: Vec<usize> = Vec::new();
            let mut best = (0, 0);
            for m in modes {
                let key = (overlap(&m, &points), m.len());
                if next.is_empty() || key > best {
                    best = key;
                    next = m;
                }
            }
            pruned_in_support = pruned;
            points = next;
            if points.len() < self.cfg.n_splits {
                log::warn!(
                    "{cohort} mode shrank to {} points in support {support:?}; too few to cross-validate, stopping",
                    points.len()
                );
                break;
            }
        }
        let support = iterations.last().map(|r| r.support.clone()).unwrap_or_default();
        Ok(ModeAttribution {
            cohort,
            initial_points: mode.to_vec(),
            points,
            pruned_in_support,
            support,
            converged,
            iterations,
        })
    }
}

fn overlap(a: &[usize], b: &[usize]) -> usize {
    a.iter().filter(|v| b.binary_search(v).is_ok()).count()
}

/// Refines every mode of both pruned sets of `eq`, largest first, keeping
/// modes with at least `min_mode_size` points.
pub fn refine_loop(
    x: &FeatureMatrix,
    y: &FeatureMatrix,
    eq: &EqualizationResult,
    eq_params: &EqualizeParams,
    cfg: &TrainConfig,
    params: &RefineParams,
    min_mode_size: usize,
    seed: u64,
) -> Result<Vec<ModeAttribution>> {
    if eq.pruned_x.is_empty() && eq.pruned_y.is_empty() {
        return Err(Error::EmptyPrunedSet);
    }
    let mut refiner = Refiner::new(x, y, eq_params.clone(), cfg.clone(), params.clone(), seed)?;
    let mut out = Vec::new();
    for cohort in [Cohort::Y, Cohort::X] {
        let pruned = eq.pruned(cohort);
        if pruned.is_empty() {
            continue;
        }
        let pts = match cohort {
            Cohort::X => x,
            Cohort::Y => y,
        };
        for mode in equalize::partition_modes(pruned, pts, params.graph_k)?.modes {
            if mode.len() < min_mode_size.max(1) {
                continue;
            }
            out.push(refiner.refine(cohort, &mode)?);
        }
    }
    Ok(out)
}
