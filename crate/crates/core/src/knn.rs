//! Exact brute-force nearest-neighbour search.
//!
//! Reference points are stored column-major in tiles of [`TILE`] so the
//! distance kernel vectorises across points while still accumulating each
//! squared distance in plain feature order. Every distance produced here is
//! therefore bit-identical to [`sq_dist`], and neighbour lists are ordered by
//! `(distance, id)`.

use std::cmp::Ordering;

const TILE: usize = 8;
const CHUNK: usize = 2048;

/// Squared Euclidean distance, summed in feature order.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let t = x - y;
        acc += t * t;
    }
    acc
}

#[inline]
pub(crate) fn cmp_key(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Bounded selection of the `k` smallest `(distance, id)` keys.
///
/// Keys must be pushed in ascending id order; that makes a strict distance
/// comparison against the current threshold an exact tie-break.
pub(crate) struct TopK {
    k: usize,
    buf: Vec<(f64, u32)>,
    thr: f64,
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        TopK {
            k,
            buf: Vec::with_capacity(2 * k.max(16)),
            thr: f64::INFINITY,
        }
    }

    #[inline]
    pub(crate) fn threshold(&self) -> f64 {
        self.thr
    }

    #[inline]
    pub(crate) fn push(&mut self, d: f64, id: u32) {
        if self.k == 0 {
            return;
        }
        if d < self.thr {
            self.buf.push((d, id));
            if self.buf.len() >= 2 * self.k.max(16) {
                self.shrink();
            }
        }
    }

    fn shrink(&mut self) {
        let k = self.k;
        self.buf.select_nth_unstable_by(k - 1, cmp_key);
        self.buf.truncate(k);
        self.thr = self.buf.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
    }

    pub(crate) fn finish(mut self) -> Vec<(f64, u32)> {
        self.buf.sort_unstable_by(cmp_key);
        self.buf.truncate(self.k);
        self.buf
    }
}

/// Column-major snapshot of a reference set for exact kNN queries.
#[derive(Debug, Clone)]
pub struct BruteForce {
    dim: usize,
    n: usize,
    stride: usize,
    ids: Vec<u32>,
    cols: Vec<f64>,
}

impl BruteForce {
    /// Builds from row-major `points` (each row `full_dim` long), keeping the
    /// rows listed in `ids` (ascending) and, if given, only `columns`.
    pub fn new(points: &[f64], full_dim: usize, ids: Vec<u32>, columns: Option<&[usize]>) -> Self {
        debug_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        let all: Vec<usize>;
        let columns = match columns {
            Some(c) => c,
            None => {
                all = (0..full_dim).collect();
                &all
            }
        };
        let dim = columns.len();
        let n = ids.len();
        let stride = n.div_ceil(TILE) * TILE;
        let mut cols = vec![f64::INFINITY; dim * stride];
        for (j, &id) in ids.iter().enumerate() {
            let row = &points[id as usize * full_dim..(id as usize + 1) * full_dim];
            for (c, &f) in columns.iter().enumerate() {
                cols[c * stride + j] = row[f];
            }
        }
        BruteForce {
            dim,
            n,
            stride,
            ids,
            cols,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// The `k` nearest reference points to `q` accepted by `keep`, as
    /// `(squared distance, id)` sorted by distance then id.
    pub fn query<F: Fn(u32) -> bool>(&self, q: &[f64], k: usize, keep: F) -> Vec<(f64, u32)> {
        assert_eq!(q.len(), self.dim);
        let mut top = TopK::new(k);
        let mut buf = vec![0.0; CHUNK];
        let mut start = 0;
        while start < self.stride {
            let end = (start + CHUNK).min(self.stride);
            let out = &mut buf[..end - start];
            scan(&self.cols, self.stride, self.dim, q, start, out);
            let real_end = end.min(self.n);
            if start < real_end {
                let thr = top.threshold();
                for (j, &d) in out[..real_end - start].iter().enumerate() {
                    if d < thr {
                        let id = self.ids[start + j];
                        if keep(id) {
                            top.push(d, id);
                        }
                    }
                }
            }
            start = end;
        }
        top.finish()
    }

    /// Every accepted reference point ordered by `(distance, id)`.
    pub fn sorted_all<F: Fn(u32) -> bool>(&self, q: &[f64], keep: F) -> Vec<(f64, u32)> {
        let mut out = vec![0.0; self.stride];
        scan(&self.cols, self.stride, self.dim, q, 0, &mut out);
        let mut all: Vec<(f64, u32)> = out[..self.n]
            .iter()
            .zip(&self.ids)
            .filter(|(_, &id)| keep(id))
            .map(|(&d, &id)| (d, id))
            .collect();
        all.sort_unstable_by(cmp_key);
        all
    }
}

#[inline(always)]
fn scan_impl(cols: &[f64], stride: usize, dim: usize, q: &[f64], start: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len() % TILE, 0);
    for (t, tile) in out.chunks_exact_mut(TILE).enumerate() {
        let j = start + t * TILE;
        let mut acc = [0.0f64; TILE];
        for (d, &qd) in q.iter().enumerate().take(dim) {
            let col: &[f64; TILE] = cols[d * stride + j..d * stride + j + TILE].try_into().unwrap();
            for l in 0..TILE {
                let t = col[l] - qd;
                acc[l] += t * t;
            }
        }
        tile.copy_from_slice(&acc);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn scan_avx2(cols: &[f64], stride: usize, dim: usize, q: &[f64], start: usize, out: &mut [f64]) {
    scan_impl(cols, stride, dim, q, start, out)
}

fn scan(cols: &[f64], stride: usize, dim: usize, q: &[f64], start: usize, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2; the kernel has no FMA contraction,
            // so results match the scalar path bit for bit.
            unsafe { scan_avx2(cols, stride, dim, q, start, out) };
            return;
        }
    }
    scan_impl(cols, stride, dim, q, start, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matches_sorted_pairwise_distances() {
        let (n, d) = (300, 7);
        let pts = random_points(n, d, 1);
        let bf = BruteForce::new(&pts, d, (0..n as u32).collect(), None);
        for q in [0usize, 17, 299] {
            let qv = &pts[q * d..(q + 1) * d];
            let got = bf.query(qv, 25, |id| id as usize != q);
            let mut want: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != q)
                .map(|j| (sq_dist(qv, &pts[j * d..(j + 1) * d]), j as u32))
                .collect();
            want.sort_by(cmp_key);
            want.truncate(25);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn ties_broken_by_id() {
        // four points on a line, query at the centre of two equidistant pairs
        let pts = vec![0.0, 2.0, 1.0, 1.0, 3.0];
        let bf = BruteForce::new(&pts, 1, (0..5).collect(), None);
        let got = bf.query(&[1.0], 4, |id| id != 2);
        let ids: Vec<u32> = got.iter().map(|e| e.1).collect();
        assert_eq!(ids, vec![3, 0, 1, 4]);
    }

    #[test]
    fn column_subset_and_filter() {
        let (n, d) = (50, 4);
        let pts = random_points(n, d, 2);
        let cols = [1usize, 3];
        let ids: Vec<u32> = (0..n as u32).filter(|i| i % 3 != 0).collect();
        let bf = BruteForce::new(&pts, d, ids.clone(), Some(&cols));
        let q = [0.1, -0.2];
        let got = bf.sorted_all(&q, |id| id % 2 == 0);
        let mut want: Vec<(f64, u32)> = ids
            .iter()
            .filter(|&&id| id % 2 == 0)
            .map(|&id| {
                let r = &pts[id as usize * d..];
                (sq_dist(&q, &[r[1], r[3]]), id)
            })
            .collect();
        want.sort_by(cmp_key);
        assert_eq!(got, want);
    }

    #[test]
    fn k_larger_than_set() {
        let pts = random_points(5, 2, 3);
        let bf = BruteForce::new(&pts, 2, (0..5).collect(), None);
        assert_eq!(bf.query(&[0.0, 0.0], 10, |_| true).len(), 5);
        assert!(bf.query(&[0.0, 0.0], 0, |_| true).is_empty());
    }
}
