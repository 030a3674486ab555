use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shiftscope::benchgen::{self, Truth, MEANS, VARIANCES, WEIGHTS};
use shiftscope::FeatureMatrix;

#[rustfmt::skip]
const MEANS_T: [[f64; 20]; 4] = [
    [0.0, 0.0, 0.5, -0.5, 0.0, 0.3, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [2.5, -1.0, -0.5, 1.0, 0.5, -0.3, 0.0, 0.2, -0.2, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [-2.0, 1.5, 0.0, 0.5, -1.0, 0.0, 0.3, -0.2, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0, 2.0, -1.0, -1.0, 0.0, 0.5, -0.5, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
];

#[rustfmt::skip]
const VARIANCES_T: [[f64; 20]; 4] = [
    [1.2, 1.0, 0.8, 0.9, 0.7, 0.8, 1.0, 1.0, 0.9, 1.0, 1.0, 1.0, 1.0, 0.8, 0.8, 0.8, 0.9, 0.9, 0.9, 0.9],
    [0.9, 1.1, 0.7, 0.8, 0.8, 0.7, 1.0, 0.9, 1.0, 1.0, 1.0, 0.9, 1.0, 0.8, 0.8, 0.8, 1.0, 1.0, 0.9, 0.9],
    [1.0, 0.8, 1.0, 0.9, 0.7, 1.1, 0.8, 0.9, 1.0, 1.0, 0.9, 1.0, 1.0, 0.9, 0.8, 0.8, 0.8, 0.9, 0.9, 1.0],
    [1.1, 0.9, 0.8, 1.0, 0.8, 0.8, 0.9, 1.0, 1.0, 0.9, 1.0, 1.0, 0.9, 0.8, 0.8, 0.8, 0.9, 0.9, 1.0, 1.0],
];

#[test]
fn mixture_tables_match_transcription() {
    assert_eq!(WEIGHTS, [0.35, 0.30, 0.20, 0.15]);
    assert_eq!(MEANS, MEANS_T);
    assert_eq!(VARIANCES, VARIANCES_T);
}

#[test]
fn injected_ids_are_the_last_rows() {
    for (n_inject, n) in [(1, 10), (50, 400), (300, 2000)] {
        let (x, y, truth) = benchgen::make_local_pair(n_inject, n, 4).unwrap();
        assert_eq!(x.n_rows(), n);
        assert_eq!(y.n_rows(), n + n_inject);
        let want: Vec<usize> = (n..n + n_inject).collect();
        assert_eq!(truth.injected_ids().unwrap(), want.as_slice());
    }
}

#[test]
fn generation_is_a_pure_function_of_the_seed() {
    let a = benchgen::make_global_pair(0.25, 3000, 17).unwrap();
    let b = benchgen::make_global_pair(0.25, 3000, 17).unwrap();
    assert_eq!(a, b);
    let c = benchgen::make_global_pair(0.25, 3000, 18).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn truth_round_trips_through_json() {
    let (_, _, t) = benchgen::make_local_pair(12, 100, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("truth.json");
    t.write_json(&p).unwrap();
    assert_eq!(Truth::read_json(&p).unwrap(), t);
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

/// Permutation p-value of the two-sample energy statistic.
fn energy_p(x: &FeatureMatrix, y: &FeatureMatrix, n_perm: usize, seed: u64) -> f64 {
    let pts: Vec<&[f64]> = x.rows().chain(y.rows()).collect();
    let n = pts.len();
    let nx = x.n_rows();
    let dm: Vec<f64> = (0..n * n).map(|k| dist(pts[k / n], pts[k % n])).collect();
    let stat = |lab: &[bool]| {
        let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let v = dm[i * n + j];
                match (lab[i], lab[j]) {
                    (true, true) => xx += v,
                    (false, false) => yy += v,
                    _ => xy += v,
                }
            }
        }
        let (a, b) = (nx as f64, (n - nx) as f64);
        xy / (a * b) - xx / (a * a) - yy / (b * b)
    };
    let mut lab: Vec<bool> = (0..n).map(|i| i < nx).collect();
    let observed = stat(&lab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ge = 1;
    for _ in 0..n_perm {
        lab.shuffle(&mut rng);
        if stat(&lab) >= observed {
            ge += 1;
        }
    }
    ge as f64 / (n_perm + 1) as f64
}

#[test]
fn zero_sigma_pairs_pass_energy_test() {
    let seeds = 40;
    let mut rejected = 0;
    for seed in 0..seeds {
        let (x, y, _) = benchgen::make_global_pair(0.0, 150, seed).unwrap();
        if energy_p(&x, &y, 199, seed) <= 0.01 {
            rejected += 1;
        }
    }
    assert!(rejected * 20 <= seeds, "{rejected} of {seeds} seeds rejected at 1%");
}

#[test]
fn strong_shift_fails_energy_test() {
    let (x, y, _) = benchgen::make_global_pair(1.5, 150, 0).unwrap();
    assert!(energy_p(&x, &y, 199, 0) <= 0.01);
}
