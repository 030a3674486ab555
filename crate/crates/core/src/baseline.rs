//! Classifier two-sample baseline: an MLP discriminating Y from X, with Y
//! samples ranked by posterior odds.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};
use crate::optim::Adam;

const P_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
    /// training epochs
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: vec![128, 64, 32],
            lr: 1e-3,
            l2: 1e-4,
            batch_size: 256,
            max_iters: 300,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) || self.batch_size == 0 || self.max_iters == 0 {
            return Err(Error::InvalidConfig(
                "layer widths, batch_size and max_iters must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.l2 >= 0.0) {
            return Err(Error::InvalidConfig("lr must be positive and l2 non-negative".into()));
        }
        Ok(())
    }
}

/// Dense ReLU network with a single logit output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    weights: Vec<Array2<f32>>,
    biases: Vec<Array1<f32>>,
    trained: bool,
    /// mean training loss per epoch
    pub loss_history: Vec<f64>,
}

impl Mlp {
    /// Uniform fan-in initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
    pub fn init(d: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![d];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let bound = (6.0 / w[0] as f64).sqrt() as f32;
            weights.push(Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-bound..bound)));
            biases.push(Array1::zeros(w[1]));
        }
        Mlp {
            weights,
            biases,
            trained: false,
            loss_history: Vec::new(),
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn weights(&self) -> &[Array2<f32>] {
        &self.weights
    }

    /// Activations of every layer; the last entry holds the logits.
    fn forward(&self, x: ArrayView2<f32>) -> Vec<Array2<f32>> {
        let mut acts = vec![x.to_owned()];
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(w) + b;
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    /// Mean binary cross-entropy of a batch and its gradients.
    fn backward(&self, x: ArrayView2<f32>, y: &[f32], l2: f32) -> (f64, Vec<Array2<f32>>, Vec<Array1<f32>>) {
        let acts = self.forward(x);
        let n = y.len() as f32;
        let logits = acts.last().expect("output layer");
        let mut loss = 0.0f64;
        let mut delta = Array2::<f32>::zeros((y.len(), 1));
        for (i, &t) in y.iter().enumerate() {
            let z = logits[[i, 0]];
            // log(1 + e^z) - t z, computed stably
            loss += (z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z) as f64;
            let p = 1.0 / (1.0 + (-z).exp());
            delta[[i, 0]] = (p - t) / n;
        }
        loss /= y.len() as f64;
        let sq: f32 = self.weights.iter().map(|w| w.iter().map(|v| v * v).sum::<f32>()).sum();
        loss += 0.5 * (l2 * sq / n) as f64;

        let nl = self.weights.len();
        let mut gw = vec![Array2::zeros((0, 0)); nl];
        let mut gb = vec![Array1::zeros(0); nl];
        for l in (0..nl).rev() {
            gw[l] = acts[l].t().dot(&delta) + &(&self.weights[l] * (l2 / n));
            gb[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l].t());
                back.zip_mut_with(&acts[l], |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
                delta = back;
            }
        }
        (loss, gw, gb)
    }

    /// Posterior probability of cohort Y for each row.
    pub fn predict_proba(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(Error::UntrainedModel);
        }
        let d = self.weights[0].nrows();
        if x.n_cols() != d {
            return Err(Error::DimensionMismatch(d, x.n_cols()));
        }
        let mut out = Vec::with_capacity(x.n_rows());
        for chunk in to_f32(x).axis_chunks_iter(Axis(0), 4096) {
            let acts = self.forward(chunk);
            out.extend(acts.last().unwrap().iter().map(|&z| 1.0 / (1.0 + (-(z as f64)).exp())));
        }
        Ok(out)
    }
}

fn to_f32(x: &FeatureMatrix) -> Array2<f32> {
    Array2::from_shape_vec((x.n_rows(), x.n_cols()), x.values().iter().map(|&v| v as f32).collect())
        .expect("row-major shape")
}

/// Trains on X (label 0) and Y (label 1) with Adam over shuffled mini-batches.
pub fn train_mlp(x: &FeatureMatrix, y: &FeatureMatrix, cfg: &MlpConfig) -> Result<Mlp> {
    cfg.validate()?;
    if x.n_rows() == 0 {
        return Err(Error::EmptyCohort("X"));
    }
    if y.n_rows() == 0 {
        return Err(Error::EmptyCohort("Y"));
    }
    if x.n_cols() != y.n_cols() {
        return Err(Error::DimensionMismatch(x.n_cols(), y.n_cols()));
    }
    let data = to_f32(&x.vstack(y)?);
    let labels: Vec<f32> = (0..data.nrows())
        .map(|i| if i < x.n_rows() { 0.0 } else { 1.0 })
        .collect();
    let mut model = Mlp::init(x.n_cols(), &cfg.hidden, cfg.seed);
    let mut opt_w: Vec<Adam> = model.weights.iter().map(|w| Adam::new(w.len(), cfg.lr)).collect();
    let mut opt_b: Vec<Adam> = model.biases.iter().map(|b| Adam::new(b.len(), cfg.lr)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    let l2 = cfg.l2 as f32;
    for epoch in 0..cfg.max_iters {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = data.select(Axis(0), batch);
            let yb: Vec<f32> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, gw, gb) = model.backward(xb.view(), &yb, l2);
            total += loss * batch.len() as f64;
            for l in 0..model.weights.len() {
                let w = model.weights[l].as_slice_mut().expect("standard layout");
                opt_w[l].step_f32(w, gw[l].as_standard_layout().as_slice().expect("standard layout"));
                let b = model.biases[l].as_slice_mut().expect("standard layout");
                opt_b[l].step_f32(b, gb[l].as_slice().expect("standard layout"));
            }
        }
        let mean = total / data.nrows() as f64;
        log::debug!("epoch {epoch}: loss {mean:.5}");
        model.loss_history.push(mean);
    }
    model.trained = true;
    Ok(model)
}

/// Y rows by decreasing posterior odds, ties by row id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRanking {
    pub entries: Vec<(usize, f64)>,
}

pub fn odds(p: f64) -> f64 {
    let p = p.clamp(P_CLIP, 1.0 - P_CLIP);
    p / (1.0 - p)
}

pub fn ranking_from_probs(probs: &[f64]) -> RatioRanking {
    let mut entries: Vec<(usize, f64)> = probs.iter().map(|&p| odds(p)).enumerate().collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    RatioRanking { entries }
}

pub fn rank_by_ratio(model: &Mlp, y: &FeatureMatrix) -> Result<RatioRanking> {
    Ok(ranking_from_probs(&model.predict_proba(y)?))
}

/// Fraction of `injected` found among the top `k` ranked rows.
pub fn injected_recall_at(ranking: &RatioRanking, injected: &[usize], k: usize) -> Result<f64> {
    if injected.is_empty() {
        return Err(Error::EmptyInjectedSet);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let set: HashSet<usize> = injected.iter().copied().collect();
    let hits = ranking
        .entries
        .iter()
        .take(k)
        .filter(|(id, _)| set.contains(id))
        .count();
    Ok(hits as f64 / set.len() as f64)
}

pub fn write_ranking_csv(path: &Path, ranking: &RatioRanking) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "score", "rank"])?;
    for (r, (id, s)) in ranking.entries.iter().enumerate() {
        w.write_record([id.to_string(), format!("{s:?}"), (r + 1).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(v: &[f64]) -> FeatureMatrix {
        FeatureMatrix::from_values(v.to_vec(), 1).unwrap()
    }

    #[test]
    fn odds_and_ties() {
        assert!((odds(0.9) - 9.0).abs() < 1e-12);
        assert!(odds(1.0).is_finite());
        let r = ranking_from_probs(&[0.5, 0.5, 0.5]);
        assert_eq!(r.entries, vec![(0, 1.0), (1, 1.0), (2, 1.0)]);
        let r = ranking_from_probs(&[0.1, 0.9, 0.5]);
        assert_eq!(r.entries.iter().map(|e| e.0).collect::<Vec<_>>(), vec![1, 2, 0]);
    }

    #[test]
    fn recall_counting() {
        let r = RatioRanking {
            entries: (0..1000).map(|i| (i, 1000.0 - i as f64)).collect(),
        };
        let inj: Vec<usize> = (250..450).collect();
        assert_eq!(injected_recall_at(&r, &inj, 400).unwrap(), 0.75);
        assert_eq!(injected_recall_at(&r, &(0..10).collect::<Vec<_>>(), 400).unwrap(), 1.0);
        assert_eq!(injected_recall_at(&r, &[900], 400).unwrap(), 0.0);
        assert!(matches!(injected_recall_at(&r, &[], 400), Err(Error::EmptyInjectedSet)));
    }

    #[test]
    fn untrained_model_refuses() {
        let m = Mlp::init(1, &[4], 0);
        assert!(matches!(m.predict_proba(&line(&[0.0])), Err(Error::UntrainedModel)));
    }

    #[test]
    fn separable_toy() {
        let x = line(&vec![-5.0; 500]);
        let y = line(&vec![5.0; 500]);
        let cfg = MlpConfig::default();
        let m = train_mlp(&x, &y, &cfg).unwrap();
        let px = m.predict_proba(&x).unwrap();
        let py = m.predict_proba(&y).unwrap();
        let acc = (px.iter().filter(|&&p| p < 0.5).count() + py.iter().filter(|&&p| p > 0.5).count()) as f64 / 1000.0;
        assert!(acc >= 0.99);
        assert!(m.loss_history[9] < m.loss_history[0]);
        let again = train_mlp(&x, &y, &cfg).unwrap();
        assert_eq!(again.weights(), m.weights());
    }
}
