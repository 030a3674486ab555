//! Cohort loading, pooled standardization and the pooled neighbour index.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::{cmp_key, BruteForce};

/// Dense `n × d` matrix of finite reals with named columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_cols: usize,
    values: Vec<f64>,
    feature_names: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(values: Vec<f64>, n_cols: usize, feature_names: Vec<String>) -> Result<Self> {
        if feature_names.len() != n_cols {
            return Err(Error::DimensionMismatch(feature_names.len(), n_cols));
        }
        if n_cols == 0 {
            if !values.is_empty() {
                return Err(Error::EmptyInput("zero-column matrix with values"));
            }
        } else if values.len() % n_cols != 0 {
            return Err(Error::DimensionMismatch(values.len() % n_cols, n_cols));
        }
        let mut seen = HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateFeature(name.clone()));
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                line: pos / n_cols + 2,
                col: pos % n_cols + 1,
            });
        }
        let n_rows = if n_cols == 0 { 0 } else { values.len() / n_cols };
        Ok(FeatureMatrix {
            n_rows,
            n_cols,
            values,
            feature_names,
        })
    }

    /// Matrix with generated names `f0, f1, ...`.
    pub fn from_values(values: Vec<f64>, n_cols: usize) -> Result<Self> {
        Self::new(values, n_cols, default_names(n_cols))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * n_cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n_cols {
                return Err(Error::RaggedRow {
                    line: i + 1,
                    expected: n_cols,
                    found: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Self::from_values(values, n_cols)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_cols.max(1)).take(self.n_rows)
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(j).step_by(self.n_cols).copied()
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<FeatureMatrix> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.n_cols) {
            return Err(Error::SubsetOutOfRange {
                index: bad,
                d: self.n_cols,
            });
        }
        let mut values = Vec::with_capacity(self.n_rows * cols.len());
        for r in self.rows() {
            values.extend(cols.iter().map(|&c| r[c]));
        }
        let names = cols.iter().map(|&c| self.feature_names[c].clone()).collect();
        FeatureMatrix::new(values, cols.len(), names)
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.n_cols);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            values,
            feature_names: self.feature_names.clone(),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn vstack(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.n_cols != other.n_cols {
            return Err(Error::DimensionMismatch(self.n_cols, other.n_cols));
        }
        let mut values = Vec::with_capacity(self.values.len() + other.values.len());
        values.extend_from_slice(&self.values);
        values.extend_from_slice(&other.values);
        Ok(FeatureMatrix {
            n_rows: self.n_rows + other.n_rows,
            n_cols: self.n_cols,
            values,
            feature_names: self.feature_names.clone(),
        })
    }

    pub fn write_csv(&self, path: &Path, delimiter: u8) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_path(path)?;
        w.write_record(&self.feature_names)?;
        let mut rec = Vec::with_capacity(self.n_cols);
        for r in self.rows() {
            rec.clear();
            rec.extend(r.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn default_names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("f{j}")).collect()
}

/// Reads a delimited file whose first row holds the feature names.
///
/// Line numbers in errors are 1-based and count the header.
pub fn load_csv(path: &Path, delimiter: u8) -> Result<FeatureMatrix> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let d = names.len();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(i + 2, |p| p.line() as usize);
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if rec.len() != d {
            return Err(Error::RaggedRow {
                line,
                expected: d,
                found: rec.len(),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::NonNumericCell {
                line,
                col: j + 1,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { line, col: j + 1 });
            }
            values.push(v);
        }
    }
    FeatureMatrix::new(values, d, names)
}

/// Reads a sidecar mask: one `0` or `1` per line.
pub fn load_mask(path: &Path) -> Result<Vec<bool>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        match l.trim() {
            "" => continue,
            "0" => out.push(false),
            "1" => out.push(true),
            other => {
                return Err(Error::NonNumericCell {
                    line: i + 1,
                    col: 1,
                    value: other.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Pooled per-feature location and scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub means: Vec<f64>,
    pub stddevs: Vec<f64>,
    pub constant_features: Vec<usize>,
}

impl StandardizationStats {
    pub fn apply(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        let d = self.means.len();
        if m.n_cols() != d {
            return Err(Error::DimensionMismatch(m.n_cols(), d));
        }
        let mut values = m.values().to_vec();
        for r in values.chunks_exact_mut(d.max(1)) {
            for j in 0..d {
                r[j] = if self.stddevs[j] > 0.0 {
                    (r[j] - self.means[j]) / self.stddevs[j]
                } else {
                    0.0
                };
            }
        }
        FeatureMatrix::new(values, d, m.feature_names().to_vec())
    }

    /// Maps standardized values back; constant features return their mean.
    pub fn invert(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        let d = self.means.len();
        if m.n_cols() != d {
            return Err(Error::DimensionMismatch(m.n_cols(), d));
        }
        let mut values = m.values().to_vec();
        for r in values.chunks_exact_mut(d.max(1)) {
            for j in 0..d {
                r[j] = r[j] * self.stddevs[j] + self.means[j];
            }
        }
        FeatureMatrix::new(values, d, m.feature_names().to_vec())
    }
}

/// Standardizes both cohorts with statistics of their pooled rows
/// (population variance). Constant columns become zeros.
pub fn standardize(
    x: &FeatureMatrix,
    y: &FeatureMatrix,
) -> Result<(FeatureMatrix, FeatureMatrix, StandardizationStats)> {
    if x.n_cols() != y.n_cols() {
        return Err(Error::DimensionMismatch(x.n_cols(), y.n_cols()));
    }
    let n = x.n_rows() + y.n_rows();
    if n < 2 {
        return Err(Error::EmptyInput("standardization needs at least two pooled rows"));
    }
    let d = x.n_cols();
    let mut means = vec![0.0; d];
    for r in x.rows().chain(y.rows()) {
        for j in 0..d {
            means[j] += r[j];
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for r in x.rows().chain(y.rows()) {
        for j in 0..d {
            let t = r[j] - means[j];
            var[j] += t * t;
        }
    }
    let mut stddevs = Vec::with_capacity(d);
    let mut constant_features = Vec::new();
    for j in 0..d {
        let s = (var[j] / n as f64).sqrt();
        if s <= 1e-12 * means[j].abs().max(1.0) {
            constant_features.push(j);
            stddevs.push(0.0);
        } else {
            stddevs.push(s);
        }
    }
    let stats = StandardizationStats {
        means,
        stddevs,
        constant_features,
    };
    Ok((stats.apply(x)?, stats.apply(y)?, stats))
}

/// Cohort membership of a pooled point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cohort {
    X,
    Y,
}

impl Cohort {
    pub fn other(self) -> Cohort {
        match self {
            Cohort::X => Cohort::Y,
            Cohort::Y => Cohort::X,
        }
    }

    pub(crate) fn idx(self) -> usize {
        match self {
            Cohort::X => 0,
            Cohort::Y => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Cohort::X => "X",
            Cohort::Y => "Y",
        }
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub origin: Cohort,
    pub distance: f64,
}

/// Cached neighbour lists computed against the actives at build time.
///
/// Filtering a cached list by the current active mask yields the exact
/// current list as long as no point was reactivated since the build.
#[derive(Debug, Clone)]
struct NeighborCache {
    depth: usize,
    ids: Vec<u32>,
    len: Vec<u32>,
    /// the list holds every point that was active when it was computed
    complete: Vec<bool>,
}

/// X rows followed by Y rows, with an active mask and exact ordered kNN.
#[derive(Debug, Clone)]
pub struct PooledIndex {
    dim: usize,
    points: Vec<f64>,
    origins: Vec<Cohort>,
    active: Vec<bool>,
    n_x: usize,
    n_y: usize,
    active_counts: [usize; 2],
    engine: BruteForce,
    cache: Option<NeighborCache>,
}

pub fn pool(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<PooledIndex> {
    if x.n_cols() != y.n_cols() {
        return Err(Error::DimensionMismatch(x.n_cols(), y.n_cols()));
    }
    let dim = x.n_cols();
    let mut points = Vec::with_capacity(x.values().len() + y.values().len());
    points.extend_from_slice(x.values());
    points.extend_from_slice(y.values());
    let (n_x, n_y) = (x.n_rows(), y.n_rows());
    let n = n_x + n_y;
    let mut origins = vec![Cohort::X; n_x];
    origins.extend(std::iter::repeat_n(Cohort::Y, n_y));
    let engine = BruteForce::new(&points, dim, (0..n as u32).collect(), None);
    Ok(PooledIndex {
        dim,
        points,
        origins,
        active: vec![true; n],
        n_x,
        n_y,
        active_counts: [n_x, n_y],
        engine,
        cache: None,
    })
}

impl PooledIndex {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn origins(&self) -> &[Cohort] {
        &self.origins
    }

    pub fn origin(&self, id: usize) -> Cohort {
        self.origins[id]
    }

    pub fn point(&self, id: usize) -> &[f64] {
        &self.points[id * self.dim..(id + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn is_active(&self, id: usize) -> bool {
        self.active[id]
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    pub fn active_count(&self, c: Cohort) -> usize {
        self.active_counts[c.idx()]
    }

    pub fn total_active(&self) -> usize {
        self.active_counts[0] + self.active_counts[1]
    }

    /// Pooled id range of a cohort.
    pub fn cohort_range(&self, c: Cohort) -> std::ops::Range<usize> {
        match c {
            Cohort::X => 0..self.n_x,
            Cohort::Y => self.n_x..self.n_x + self.n_y,
        }
    }

    /// Pooled id of row `row` of cohort `c`.
    pub fn pooled_id(&self, c: Cohort, row: usize) -> usize {
        self.cohort_range(c).start + row
    }

    /// Row index within its own cohort.
    pub fn cohort_row(&self, id: usize) -> usize {
        if id < self.n_x {
            id
        } else {
            id - self.n_x
        }
    }

    pub fn active_ids(&self, c: Cohort) -> impl Iterator<Item = usize> + '_ {
        self.cohort_range(c).filter(|&i| self.active[i])
    }

    pub fn deactivate(&mut self, id: usize) {
        if self.active[id] {
            self.active[id] = false;
            self.active_counts[self.origins[id].idx()] -= 1;
        }
    }

    /// Reactivation invalidates the neighbour cache.
    pub fn activate(&mut self, id: usize) {
        if !self.active[id] {
            self.active[id] = true;
            self.active_counts[self.origins[id].idx()] += 1;
            self.cache = None;
        }
    }

    /// Ordered neighbours of an active point among the other active points.
    pub fn knn_query(&self, q: usize, k: usize) -> Result<Vec<Neighbor>> {
        if self.total_active() == 0 {
            return Err(Error::EmptyIndex);
        }
        if !self.active[q] {
            return Err(Error::InactiveQuery(q));
        }
        let found = match self.cached_prefix(q, k) {
            Some(ids) => ids.into_iter().map(|id| (self.sq_dist(q, id as usize), id)).collect(),
            None => self.brute(q, k),
        };
        Ok(found
            .into_iter()
            .map(|(d, id)| Neighbor {
                id: id as usize,
                origin: self.origins[id as usize],
                distance: d.sqrt(),
            })
            .collect())
    }

    fn sq_dist(&self, a: usize, b: usize) -> f64 {
        crate::knn::sq_dist(self.point(a), self.point(b))
    }

    fn brute(&self, q: usize, k: usize) -> Vec<(f64, u32)> {
        let active = &self.active;
        let q32 = q as u32;
        self.engine
            .query(self.point(q), k, |id| id != q32 && active[id as usize])
    }

    fn cached_prefix(&self, q: usize, k: usize) -> Option<Vec<u32>> {
        let cache = self.cache.as_ref()?;
        let len = cache.len[q] as usize;
        let list = &cache.ids[q * cache.depth..q * cache.depth + len];
        let mut out = Vec::with_capacity(k.min(len));
        for &id in list {
            if out.len() == k {
                break;
            }
            if self.active[id as usize] {
                out.push(id);
            }
        }
        if out.len() == k || cache.complete[q] {
            Some(out)
        } else {
            None
        }
    }

    /// Precomputes neighbour lists of `depth` entries for every active point.
    pub fn build_cache(&mut self, depth: usize) {
        let n = self.len();
        let mut ids = vec![0u32; n * depth];
        let mut len = vec![0u32; n];
        let mut complete = vec![false; n];
        let others = self.total_active().saturating_sub(1);
        for q in 0..n {
            if !self.active[q] {
                continue;
            }
            let found = self.brute(q, depth);
            for (slot, (_, id)) in ids[q * depth..].iter_mut().zip(&found) {
                *slot = *id;
            }
            len[q] = found.len() as u32;
            complete[q] = found.len() >= others;
        }
        self.cache = Some(NeighborCache {
            depth,
            ids,
            len,
            complete,
        });
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Ids of the first `k` active neighbours of `q`, refreshing the cached
    /// list from scratch when pruning has left too few entries in it.
    pub(crate) fn neighbor_ids(&mut self, q: usize, k: usize, out: &mut Vec<u32>) {
        out.clear();
        if let Some(cache) = &self.cache {
            let len = cache.len[q] as usize;
            let list = &cache.ids[q * cache.depth..q * cache.depth + len];
            for &id in list {
                if out.len() == k {
                    return;
                }
                if self.active[id as usize] {
                    out.push(id);
                }
            }
            if out.len() == k || cache.complete[q] {
                return;
            }
            self.refresh(q);
            out.clear();
            let cache = self.cache.as_ref().unwrap();
            let len = cache.len[q] as usize;
            out.extend(cache.ids[q * cache.depth..q * cache.depth + len].iter().take(k));
            return;
        }
        out.extend(self.brute(q, k).into_iter().map(|e| e.1));
    }

    fn refresh(&mut self, q: usize) {
        let depth = self.cache.as_ref().map_or(0, |c| c.depth);
        let found = self.brute(q, depth);
        let others = self.total_active().saturating_sub(1);
        let cache = self.cache.as_mut().unwrap();
        for (slot, (_, id)) in cache.ids[q * depth..].iter_mut().zip(&found) {
            *slot = *id;
        }
        cache.len[q] = found.len() as u32;
        cache.complete[q] = found.len() >= others;
    }

    /// Visits the neighbours of `q` accepted by `visible` in rank order until
    /// `visit` returns false or they are exhausted. `visible` must accept a
    /// subset of the points active when the cache was built.
    pub(crate) fn walk_visible<V, F>(&self, q: usize, visible: V, mut visit: F)
    where
        V: Fn(usize) -> bool,
        F: FnMut(usize, Cohort) -> bool,
    {
        let mut last: Option<u32> = None;
        if let Some(cache) = &self.cache {
            let len = cache.len[q] as usize;
            for &id in &cache.ids[q * cache.depth..q * cache.depth + len] {
                if visible(id as usize) {
                    if !visit(id as usize, self.origins[id as usize]) {
                        return;
                    }
                    last = Some(id);
                }
            }
            if cache.complete[q] {
                return;
            }
        }
        let q32 = q as u32;
        let all = self
            .engine
            .sorted_all(self.point(q), |id| id != q32 && visible(id as usize));
        let skip = match last {
            None => 0,
            Some(l) => {
                let key = (self.sq_dist(q, l as usize), l);
                all.partition_point(|e| cmp_key(e, &key).is_le())
            }
        };
        for &(_, id) in &all[skip..] {
            if !visit(id as usize, self.origins[id as usize]) {
                return;
            }
        }
    }
}
