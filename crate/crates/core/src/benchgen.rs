//! Synthetic 20-dimensional benchmark: a four-component Gaussian mixture
//! background with either a global component displacement or a compact
//! injected cluster.
//!
//! Component indices are 0-based here. Randomness is drawn in fixed blocks
//! of samples, each from its own ChaCha stream, so outputs depend only on
//! the seed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};

pub const DIM: usize = 20;
const BLOCK: usize = 1024;

pub const WEIGHTS: [f64; 4] = [0.35, 0.30, 0.20, 0.15];

#[rustfmt::skip]
pub const MEANS: [[f64; DIM]; 4] = [
    [0.0, 0.0, 0.5, -0.5, 0.0, 0.3, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [2.5, -1.0, -0.5, 1.0, 0.5, -0.3, 0.0, 0.2, -0.2, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [-2.0, 1.5, 0.0, 0.5, -1.0, 0.0, 0.3, -0.2, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0, 2.0, -1.0, -1.0, 0.0, 0.5, -0.5, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
];

/// Diagonal covariance entries (variances).
#[rustfmt::skip]
pub const VARIANCES: [[f64; DIM]; 4] = [
    [1.2, 1.0, 0.8, 0.9, 0.7, 0.8, 1.0, 1.0, 0.9, 1.0, 1.0, 1.0, 1.0, 0.8, 0.8, 0.8, 0.9, 0.9, 0.9, 0.9],
    [0.9, 1.1, 0.7, 0.8, 0.8, 0.7, 1.0, 0.9, 1.0, 1.0, 1.0, 0.9, 1.0, 0.8, 0.8, 0.8, 1.0, 1.0, 0.9, 0.9],
    [1.0, 0.8, 1.0, 0.9, 0.7, 1.1, 0.8, 0.9, 1.0, 1.0, 0.9, 1.0, 1.0, 0.9, 0.8, 0.8, 0.8, 0.9, 0.9, 1.0],
    [1.1, 0.9, 0.8, 1.0, 0.8, 0.8, 0.9, 1.0, 1.0, 0.9, 1.0, 1.0, 0.9, 0.8, 0.8, 0.8, 0.9, 0.9, 1.0, 1.0],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec {
            weights: WEIGHTS.to_vec(),
            means: MEANS.iter().map(|m| m.to_vec()).collect(),
            variances: VARIANCES.iter().map(|v| v.to_vec()).collect(),
        }
    }
}

impl MixtureSpec {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn std(&self, m: usize, j: usize) -> f64 {
        self.variances[m][j].sqrt()
    }

    /// Analytic mixture mean per coordinate.
    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|j| self.weights.iter().zip(&self.means).map(|(w, mu)| w * mu[j]).sum())
            .collect()
    }

    fn pick(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (m, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return m;
            }
        }
        self.weights.len() - 1
    }
}

/// The displaced component and coordinates of the global experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalShiftSpec {
    pub sigma: f64,
    pub shifted_component: usize,
    pub coords: Vec<usize>,
}

impl GlobalShiftSpec {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "sigma must be finite and >= 0, got {sigma}"
            )));
        }
        Ok(GlobalShiftSpec {
            sigma,
            shifted_component: 1,
            coords: vec![0, 1, 3],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalShiftSpec {
    pub n_inject: usize,
    pub active_dims: Vec<usize>,
    pub anchor_offsets: Vec<f64>,
    pub scales: Vec<f64>,
    pub shrinkage: f64,
    pub base_component: usize,
}

impl LocalShiftSpec {
    pub fn new(n_inject: usize) -> Result<Self> {
        if n_inject == 0 {
            return Err(Error::InvalidSpec("n_inject must be at least 1".into()));
        }
        Ok(LocalShiftSpec {
            n_inject,
            active_dims: vec![2, 4, 6, 8, 9],
            anchor_offsets: vec![1.1, -0.4, 0.4, -0.2, 0.3],
            scales: vec![0.11, 0.08, 0.04, 0.04, 0.03],
            shrinkage: 0.7,
            base_component: 0,
        })
    }
}

/// Ground truth written next to generated cohorts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Truth {
    Global {
        seed: u64,
        n: usize,
        spec: GlobalShiftSpec,
    },
    Local {
        seed: u64,
        n: usize,
        spec: LocalShiftSpec,
        /// rows of Y holding injected samples
        injected_ids: Vec<usize>,
    },
}

impl Truth {
    /// Coordinates that carry the shift.
    pub fn coords(&self) -> &[usize] {
        match self {
            Truth::Global { spec, .. } => &spec.coords,
            Truth::Local { spec, .. } => &spec.active_dims,
        }
    }

    pub fn injected_ids(&self) -> Option<&[usize]> {
        match self {
            Truth::Local { injected_ids, .. } => Some(injected_ids),
            Truth::Global { .. } => None,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

pub(crate) fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_X: u64 = 1;
const TAG_Y: u64 = 2;
const TAG_INJECT: u64 = 3;
const TAG_ROTATION: u64 = 4;

/// Draws `n` mixture samples. Each sample consumes one uniform and `dim`
/// normals; the component offset `shift(m, j)` is added after scaling, so
/// shifted and unshifted draws with one seed share their noise.
fn sample_mixture<F: Fn(usize, usize) -> f64>(spec: &MixtureSpec, n: usize, seed: u64, shift: F) -> Vec<f64> {
    let d = spec.dim();
    let mut out = Vec::with_capacity(n * d);
    let mut block = 0u64;
    while out.len() < n * d {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(block);
        let rows = BLOCK.min(n - out.len() / d);
        for _ in 0..rows {
            let m = spec.pick(rng.random::<f64>());
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                out.push(spec.means[m][j] + shift(m, j) + spec.std(m, j) * z);
            }
        }
        block += 1;
    }
    out
}

fn matrix(values: Vec<f64>) -> FeatureMatrix {
    FeatureMatrix::from_values(values, DIM).expect("generated values are finite")
}

/// `n` i.i.d. background draws.
pub fn sample_background(n: usize, seed: u64) -> FeatureMatrix {
    matrix(sample_mixture(&MixtureSpec::default(), n, seed, |_, _| 0.0))
}

/// Unshifted X and a Y whose component 1 is displaced by `sigma` on
/// coordinates {0, 1, 3}. For a fixed seed, Y's noise does not depend on
/// `sigma`.
pub fn make_global_pair(sigma: f64, n: usize, seed: u64) -> Result<(FeatureMatrix, FeatureMatrix, Truth)> {
    let spec = GlobalShiftSpec::new(sigma)?;
    let mix = MixtureSpec::default();
    let x = sample_mixture(&mix, n, sub_seed(seed, TAG_X), |_, _| 0.0);
    let y = sample_mixture(&mix, n, sub_seed(seed, TAG_Y), |m, j| {
        if m == spec.shifted_component && spec.coords.contains(&j) {
            sigma
        } else {
            0.0
        }
    });
    Ok((matrix(x), matrix(y), Truth::Global { seed, n, spec }))
}

/// Random `k x k` orthogonal matrix (row-major) from Gram-Schmidt on a
/// seeded Gaussian matrix; the implied R has a positive diagonal.
pub fn random_rotation(k: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f64> = (0..k * k).map(|_| rng.sample(StandardNormal)).collect();
    // columns of a -> orthonormal columns of q
    let mut q = vec![0.0; k * k];
    for c in 0..k {
        let mut v: Vec<f64> = (0..k).map(|r| a[r * k + c]).collect();
        for p in 0..c {
            let dot: f64 = (0..k).map(|r| q[r * k + p] * v[r]).sum();
            for r in 0..k {
                v[r] -= dot * q[r * k + p];
            }
        }
        let norm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        for r in 0..k {
            q[r * k + c] = v[r] / norm;
        }
    }
    q
}

/// Injected cluster samples (row-major, `DIM` columns).
pub fn sample_injected(spec: &LocalShiftSpec, seed: u64) -> Vec<f64> {
    let mix = MixtureSpec::default();
    let m = spec.base_component;
    let k = spec.active_dims.len();
    let rot = random_rotation(k, sub_seed(seed, TAG_ROTATION));
    let center: Vec<f64> = spec
        .active_dims
        .iter()
        .zip(&spec.anchor_offsets)
        .map(|(&j, &o)| mix.means[m][j] + o * mix.std(m, j))
        .collect();
    let axis: Vec<f64> = spec
        .active_dims
        .iter()
        .zip(&spec.scales)
        .map(|(&j, &s)| s * mix.std(m, j))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, TAG_INJECT));
    let mut out = Vec::with_capacity(spec.n_inject * DIM);
    let mut z = vec![0.0; k];
    for _ in 0..spec.n_inject {
        let mut row = [0.0; DIM];
        for (j, v) in row.iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            *v = mix.means[m][j] + spec.shrinkage * mix.std(m, j) * e;
        }
        for (t, zt) in z.iter_mut().enumerate() {
            *zt = axis[t] * rng.sample::<f64, _>(StandardNormal);
        }
        for (r, &j) in spec.active_dims.iter().enumerate() {
            let off: f64 = (0..k).map(|c| rot[r * k + c] * z[c]).sum();
            row[j] = center[r] + off;
        }
        out.extend_from_slice(&row);
    }
    out
}

/// Background X and Y, with `n_inject` cluster samples appended to Y.
pub fn make_local_pair(n_inject: usize, n: usize, seed: u64) -> Result<(FeatureMatrix, FeatureMatrix, Truth)> {
    let spec = LocalShiftSpec::new(n_inject)?;
    let mix = MixtureSpec::default();
    let x = sample_mixture(&mix, n, sub_seed(seed, TAG_X), |_, _| 0.0);
    let mut y = sample_mixture(&mix, n, sub_seed(seed, TAG_Y), |_, _| 0.0);
    y.extend(sample_injected(&spec, seed));
    let injected_ids = (n..n + n_inject).collect();
    Ok((
        matrix(x),
        matrix(y),
        Truth::Local {
            seed,
            n,
            spec,
            injected_ids,
        },
    ))
}
