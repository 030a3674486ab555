//! Tail-based bidirectional equalization.
//!
//! Both directions are scored against the pooled set. Whenever a one-sided
//! KS test finds the observed score tail stochastically larger than the null
//! tail, the most extreme tail points are pruned together with their run of
//! same-cohort nearest neighbours. During a pruning phase only the tail
//! candidates are re-scored (with the outer iteration's `p`); once both
//! tests pass, every active point is re-scored and the loop repeats until
//! the tests pass straight after a global recomputation.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{pool, Cohort, FeatureMatrix, PooledIndex};
use crate::error::{Error, Result};
use crate::knn::BruteForce;
use crate::score::{self, calibrate_null, NullModel, TailTable};

/// Smallest observed tail allowed to reject.
pub const MIN_TAIL: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EqualizeParams {
    pub k_max: usize,
    pub q_tail: f64,
    pub alpha: f64,
    pub prune_batch: usize,
    pub max_outer_iters: usize,
    /// Monte-Carlo draws per direction null
    pub n_mc: usize,
    pub min_tail: usize,
    /// extra neighbour-list depth kept beyond `k_max`
    pub cache_margin: usize,
}

impl Default for EqualizeParams {
    fn default() -> Self {
        EqualizeParams {
            k_max: 400,
            q_tail: 0.97,
            alpha: 0.05,
            prune_batch: 10,
            max_outer_iters: 50,
            n_mc: 100_000,
            min_tail: MIN_TAIL,
            cache_margin: 64,
        }
    }
}

impl EqualizeParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.k_max == 0 {
            return bad("k_max must be at least 1");
        }
        if !(self.q_tail > 0.0 && self.q_tail < 1.0) {
            return bad("q_tail must lie in (0, 1)");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if self.prune_batch == 0 {
            return bad("prune_batch must be at least 1");
        }
        if self.max_outer_iters == 0 {
            return bad("max_outer_iters must be at least 1");
        }
        if self.n_mc < 1000 {
            return bad("n_mc must be at least 1000");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailTestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub tail_threshold: f64,
    pub n_obs_tail: usize,
    pub n_null_tail: usize,
}

/// Empirical `q`-quantile of the null samples (index `floor(q n)`).
pub fn tail_threshold(null: &NullModel, q_tail: f64) -> Result<f64> {
    null.quantile(q_tail)
}

/// One-sided two-sample KS test of "observed tail stochastically larger
/// than null tail", with the default minimum tail size.
pub fn ks_one_sided(obs_tail: &[f64], null_tail: &[f64], alpha: f64) -> Result<TailTestResult> {
    ks_one_sided_min(obs_tail, null_tail, alpha, MIN_TAIL)
}

/// `D+ = sup_x (F_null(x) - F_obs(x))` with the asymptotic p-value
/// `exp(-2 m D+^2)`, `m = n_obs n_null / (n_obs + n_null)`. Inputs must be
/// sorted ascending. Rejection needs `p < alpha` and `n_obs >= min_tail`.
pub fn ks_one_sided_min(obs_tail: &[f64], null_tail: &[f64], alpha: f64, min_tail: usize) -> Result<TailTestResult> {
    if null_tail.is_empty() {
        return Err(Error::EmptyNullTail);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidLevel(alpha));
    }
    let (n_obs, n_null) = (obs_tail.len(), null_tail.len());
    let tail_threshold = null_tail[0];
    if n_obs == 0 {
        return Ok(TailTestResult {
            statistic: 0.0,
            p_value: 1.0,
            reject: false,
            tail_threshold,
            n_obs_tail: 0,
            n_null_tail: n_null,
        });
    }
    let d = d_plus(obs_tail, null_tail);
    let m = (n_obs * n_null) as f64 / (n_obs + n_null) as f64;
    let p_value = (-2.0 * m * d * d).exp().min(1.0);
    Ok(TailTestResult {
        statistic: d,
        p_value,
        reject: p_value < alpha && n_obs >= min_tail.max(1),
        tail_threshold,
        n_obs_tail: n_obs,
        n_null_tail: n_null,
    })
}

/// `sup_x (F_null(x) - F_obs(x))` over right-continuous ECDFs of sorted inputs.
pub(crate) fn d_plus(obs: &[f64], null: &[f64]) -> f64 {
    let (no, nn) = (obs.len() as f64, null.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best = 0.0f64;
    while i < obs.len() || j < null.len() {
        let v = match (obs.get(i), null.get(j)) {
            (Some(&a), Some(&b)) => a.min(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!(),
        };
        while i < obs.len() && obs[i] <= v {
            i += 1;
        }
        while j < null.len() && null[j] <= v {
            j += 1;
        }
        best = best.max(j as f64 / nn - i as f64 / no);
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Global,
    Prune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub outer: usize,
    pub kind: StepKind,
    pub p_hat_y: f64,
    pub active_x: usize,
    pub active_y: usize,
    pub test_y: TailTestResult,
    pub test_x: TailTestResult,
    /// cohort rows removed in this step
    pub removed_y: Vec<usize>,
    pub removed_x: Vec<usize>,
}

/// Pruned representative sets, equalized cohorts and the iteration trace.
/// Ids are row indices within each cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqualizationResult {
    pub n_x: usize,
    pub n_y: usize,
    pub pruned_x: Vec<usize>,
    pub pruned_y: Vec<usize>,
    #[serde(with = "rle")]
    pub eq_mask_x: Vec<bool>,
    #[serde(with = "rle")]
    pub eq_mask_y: Vec<bool>,
    pub outer_iters: usize,
    pub max_iters_exceeded: bool,
    pub trace: Vec<TraceStep>,
}

impl EqualizationResult {
    pub fn pruned(&self, c: Cohort) -> &[usize] {
        match c {
            Cohort::X => &self.pruned_x,
            Cohort::Y => &self.pruned_y,
        }
    }

    /// `(|pruned X| + |pruned Y|) / (n_X + n_Y)`.
    pub fn pruned_to_total(&self) -> f64 {
        let n = self.n_x + self.n_y;
        if n == 0 {
            return 0.0;
        }
        (self.pruned_x.len() + self.pruned_y.len()) as f64 / n as f64
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "step",
            "outer",
            "kind",
            "active_x",
            "active_y",
            "pruned_fraction",
            "tail_y",
            "d_y",
            "p_y",
            "reject_y",
            "tail_x",
            "d_x",
            "p_x",
            "reject_x",
            "removed_y",
            "removed_x",
        ])?;
        let n = (self.n_x + self.n_y).max(1) as f64;
        for s in &self.trace {
            let frac = 1.0 - (s.active_x + s.active_y) as f64 / n;
            w.write_record([
                s.step.to_string(),
                s.outer.to_string(),
                format!("{:?}", s.kind).to_lowercase(),
                s.active_x.to_string(),
                s.active_y.to_string(),
                format!("{frac:?}"),
                s.test_y.n_obs_tail.to_string(),
                format!("{:?}", s.test_y.statistic),
                format!("{:?}", s.test_y.p_value),
                s.test_y.reject.to_string(),
                s.test_x.n_obs_tail.to_string(),
                format!("{:?}", s.test_x.statistic),
                format!("{:?}", s.test_x.p_value),
                s.test_x.reject.to_string(),
                s.removed_y.len().to_string(),
                s.removed_x.len().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Run-length encoding of boolean masks for JSON output:
/// `{"len": n, "first": bit, "runs": [..]}`.
pub mod rle {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct RleMask {
        pub len: usize,
        pub first: bool,
        pub runs: Vec<usize>,
    }

    impl RleMask {
        pub fn encode(mask: &[bool]) -> Self {
            let mut runs = Vec::new();
            let mut i = 0;
            while i < mask.len() {
                let mut j = i;
                while j < mask.len() && mask[j] == mask[i] {
                    j += 1;
                }
                runs.push(j - i);
                i = j;
            }
            RleMask {
                len: mask.len(),
                first: mask.first().copied().unwrap_or(true),
                runs,
            }
        }

        pub fn decode(&self) -> Vec<bool> {
            let mut out = Vec::with_capacity(self.len);
            let mut bit = self.first;
            for &r in &self.runs {
                out.extend(std::iter::repeat_n(bit, r));
                bit = !bit;
            }
            out
        }
    }

    pub fn serialize<S: Serializer>(mask: &[bool], s: S) -> Result<S::Ok, S::Error> {
        RleMask::encode(mask).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let r = RleMask::deserialize(d)?;
        let out = r.decode();
        if out.len() != r.len {
            return Err(serde::de::Error::custom("run lengths do not add up to len"));
        }
        Ok(out)
    }
}

/// Seed of a direction's null, symmetric under swapping the cohorts.
pub fn null_seed(seed: u64, n_test: usize, n_ref: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [n_test as u64, n_ref as u64] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

#[derive(Debug, Clone)]
struct Direction {
    table: TailTable,
    threshold: f64,
    null_tail: Vec<f64>,
    /// pooled id -> current score
    candidates: BTreeMap<usize, f64>,
}

/// Mutable equalization state over one pooled index.
pub struct Equalizer {
    idx: PooledIndex,
    params: EqualizeParams,
    seed: u64,
    nulls: HashMap<(usize, usize), NullModel>,
    trace: Vec<TraceStep>,
    pruned_order: Vec<usize>,
    buf: Vec<u32>,
}

impl Equalizer {
    /// Pools already standardized cohorts and precomputes neighbour lists.
    pub fn new(x: &FeatureMatrix, y: &FeatureMatrix, params: EqualizeParams, seed: u64) -> Result<Self> {
        params.validate()?;
        if x.n_rows() == 0 {
            return Err(Error::EmptyCohort("X"));
        }
        if y.n_rows() == 0 {
            return Err(Error::EmptyCohort("Y"));
        }
        let mut idx = pool(x, y)?;
        score::warn_depth(&idx, params.k_max);
        idx.build_cache(params.k_max + params.cache_margin);
        Ok(Equalizer {
            idx,
            params,
            seed,
            nulls: HashMap::new(),
            trace: Vec::new(),
            pruned_order: Vec::new(),
            buf: Vec::new(),
        })
    }

    pub fn index(&self) -> &PooledIndex {
        &self.idx
    }

    /// Removes `candidate` and the consecutive run of same-cohort active
    /// neighbours that precedes the first active opposite-cohort point.
    /// Returns the removed pooled ids.
    pub fn prune_step(&mut self, candidate: usize) -> Result<Vec<usize>> {
        self.prune_with_stoppers(candidate, &[])
    }

    /// As [`prune_step`](Self::prune_step), additionally treating the
    /// (already inactive) `stoppers` as opposite-cohort boundary points.
    fn prune_with_stoppers(&mut self, candidate: usize, stoppers: &[bool]) -> Result<Vec<usize>> {
        if !self.idx.is_active(candidate) {
            return Err(Error::InactiveCandidate(candidate));
        }
        let dir = self.idx.origin(candidate);
        let mut removed = vec![candidate];
        {
            let active = self.idx.active_mask();
            let visible = |id: usize| active[id] || stoppers.get(id).copied().unwrap_or(false);
            self.idx.walk_visible(candidate, visible, |id, origin| {
                if origin == dir {
                    removed.push(id);
                    true
                } else {
                    false
                }
            });
        }
        for &id in &removed {
            self.idx.deactivate(id);
        }
        self.pruned_order.extend_from_slice(&removed);
        Ok(removed)
    }

    fn null_for(&mut self, test: Cohort) -> Result<&NullModel> {
        let n_test = self.idx.active_count(test);
        let n_ref = self.idx.active_count(test.other());
        let key = (n_test, n_ref);
        if !self.nulls.contains_key(&key) {
            let p = n_test as f64 / (n_test + n_ref) as f64;
            let null = calibrate_null(
                self.params.k_max,
                p,
                self.params.n_mc,
                null_seed(self.seed, n_test, n_ref),
            )?;
            self.nulls.insert(key, null);
        }
        Ok(&self.nulls[&key])
    }

    fn score_point(&mut self, q: usize, table: &TailTable) -> f64 {
        let mut buf = std::mem::take(&mut self.buf);
        self.idx.neighbor_ids(q, self.params.k_max, &mut buf);
        let origins = self.idx.origins();
        let test = origins[q];
        let (v, _) = table.score_bits(buf.iter().map(|&id| origins[id as usize] == test));
        self.buf = buf;
        v
    }

    fn global_direction(&mut self, test: Cohort) -> Result<Direction> {
        let p = score::active_share(&self.idx, test)?;
        let table = TailTable::new(p, self.params.k_max)?;
        let q_tail = self.params.q_tail;
        let null = self.null_for(test)?;
        let threshold = tail_threshold(null, q_tail)?;
        let null_tail = null.tail(threshold).to_vec();
        let ids: Vec<usize> = self.idx.active_ids(test).collect();
        let mut candidates = BTreeMap::new();
        for q in ids {
            let v = self.score_point(q, &table);
            if v >= threshold {
                candidates.insert(q, v);
            }
        }
        Ok(Direction {
            table,
            threshold,
            null_tail,
            candidates,
        })
    }

    fn test(&self, dir: &Direction) -> Result<TailTestResult> {
        let mut obs: Vec<f64> = dir
            .candidates
            .values()
            .copied()
            .filter(|&v| v >= dir.threshold)
            .collect();
        obs.sort_by(f64::total_cmp);
        let mut r = ks_one_sided_min(&obs, &dir.null_tail, self.params.alpha, self.params.min_tail)?;
        r.tail_threshold = dir.threshold;
        Ok(r)
    }

    /// Highest-scoring tail members, ties by lowest id.
    fn most_extreme(&self, dir: &Direction) -> Vec<usize> {
        let mut tail: Vec<(f64, usize)> = dir
            .candidates
            .iter()
            .filter(|(_, &v)| v >= dir.threshold)
            .map(|(&id, &v)| (v, id))
            .collect();
        tail.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        tail.into_iter().take(self.params.prune_batch).map(|e| e.1).collect()
    }

    fn rescore(&mut self, dir: &mut Direction) {
        let ids: Vec<usize> = dir.candidates.keys().copied().collect();
        for q in ids {
            if self.idx.is_active(q) {
                let v = self.score_point(q, &dir.table);
                dir.candidates.insert(q, v);
            } else {
                dir.candidates.remove(&q);
            }
        }
    }

    fn record(
        &mut self,
        outer: usize,
        kind: StepKind,
        p_hat_y: f64,
        tests: (TailTestResult, TailTestResult),
        removed: (Vec<usize>, Vec<usize>),
    ) {
        let rows = |ids: Vec<usize>, idx: &PooledIndex| -> Vec<usize> {
            let mut r: Vec<usize> = ids.into_iter().map(|i| idx.cohort_row(i)).collect();
            r.sort_unstable();
            r
        };
        let step = TraceStep {
            step: self.trace.len(),
            outer,
            kind,
            p_hat_y,
            active_x: self.idx.active_count(Cohort::X),
            active_y: self.idx.active_count(Cohort::Y),
            test_y: tests.0,
            test_x: tests.1,
            removed_y: rows(removed.0, &self.idx),
            removed_x: rows(removed.1, &self.idx),
        };
        log::debug!(
            "step {} ({:?}): active {}/{}, Y tail {} D={:.4} p={:.3e}, X tail {} D={:.4} p={:.3e}",
            step.step,
            kind,
            step.active_x,
            step.active_y,
            step.test_y.n_obs_tail,
            step.test_y.statistic,
            step.test_y.p_value,
            step.test_x.n_obs_tail,
            step.test_x.statistic,
            step.test_x.p_value
        );
        self.trace.push(step);
    }

    /// Runs the full alternating loop and returns the result.
    pub fn run(mut self) -> Result<EqualizationResult> {
        let mut outer = 0;
        let mut exceeded = false;
        loop {
            if outer == self.params.max_outer_iters {
                exceeded = true;
                log::warn!("equalization stopped after {outer} outer iterations without converging");
                break;
            }
            outer += 1;
            let mut dy = self.global_direction(Cohort::Y)?;
            let mut dx = self.global_direction(Cohort::X)?;
            let p_hat_y = dy.table.p();
            let mut ty = self.test(&dy)?;
            let mut tx = self.test(&dx)?;
            self.record(outer, StepKind::Global, p_hat_y, (ty, tx), (vec![], vec![]));
            if !ty.reject && !tx.reject {
                break;
            }
            while ty.reject || tx.reject {
                let mut removed_y = Vec::new();
                let mut removed_x = Vec::new();
                let n = self.idx.len();
                let mut stoppers = vec![false; n];
                if ty.reject {
                    for c in self.most_extreme(&dy) {
                        if self.idx.is_active(c) {
                            removed_y.extend(self.prune_step(c)?);
                        }
                    }
                    for &id in &removed_y {
                        stoppers[id] = true;
                    }
                }
                if tx.reject {
                    for c in self.most_extreme(&dx) {
                        if self.idx.is_active(c) {
                            removed_x.extend(self.prune_with_stoppers(c, &stoppers)?);
                        }
                    }
                }
                if removed_x.is_empty() && removed_y.is_empty() {
                    break;
                }
                self.rescore(&mut dy);
                self.rescore(&mut dx);
                ty = self.test(&dy)?;
                tx = self.test(&dx)?;
                self.record(outer, StepKind::Prune, p_hat_y, (ty, tx), (removed_y, removed_x));
            }
        }
        let (n_x, n_y) = (self.idx.n_x(), self.idx.n_y());
        let mask = self.idx.active_mask();
        let eq_mask_x = mask[..n_x].to_vec();
        let eq_mask_y = mask[n_x..].to_vec();
        let pruned_x = (0..n_x).filter(|&i| !eq_mask_x[i]).collect();
        let pruned_y = (0..n_y).filter(|&i| !eq_mask_y[i]).collect();
        Ok(EqualizationResult {
            n_x,
            n_y,
            pruned_x,
            pruned_y,
            eq_mask_x,
            eq_mask_y,
            outer_iters: outer,
            max_iters_exceeded: exceeded,
            trace: self.trace,
        })
    }
}

/// Equalizes two standardized cohorts.
pub fn equalize(
    x: &FeatureMatrix,
    y: &FeatureMatrix,
    params: &EqualizeParams,
    seed: u64,
) -> Result<EqualizationResult> {
    Equalizer::new(x, y, params.clone(), seed)?.run()
}

/// Disjoint spatial modes of a pruned set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModePartition {
    pub modes: Vec<Vec<usize>>,
    pub graph_k: usize,
}

/// Connected components of the mutual-kNN graph among the pruned points
/// (row ids into `points`), largest first, ties by smallest member.
pub fn partition_modes(pruned: &[usize], points: &FeatureMatrix, graph_k: usize) -> Result<ModePartition> {
    if pruned.is_empty() {
        return Err(Error::EmptyPrunedSet);
    }
    let mut ids: Vec<usize> = pruned.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let m = ids.len();
    let bf = BruteForce::new(
        points.values(),
        points.n_cols(),
        ids.iter().map(|&i| i as u32).collect(),
        None,
    );
    let pos: HashMap<usize, usize> = ids.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let neigh: Vec<Vec<usize>> = ids
        .iter()
        .map(|&i| {
            bf.query(points.row(i), graph_k, |j| j as usize != i)
                .into_iter()
                .map(|(_, j)| pos[&(j as usize)])
                .collect()
        })
        .collect();
    let mut parent: Vec<usize> = (0..m).collect();
    fn find(parent: &mut [usize], mut a: usize) -> usize {
        while parent[a] != a {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        a
    }
    for a in 0..m {
        for &b in &neigh[a] {
            if neigh[b].contains(&a) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for a in 0..m {
        let r = find(&mut parent, a);
        groups.entry(r).or_default().push(ids[a]);
    }
    let mut modes: Vec<Vec<usize>> = groups.into_values().collect();
    modes.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    Ok(ModePartition { modes, graph_k })
}
