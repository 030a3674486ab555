//! End-to-end runs over a list of seeds, the versioned run report, and
//! aggregation of several reports into plot-ready tables.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baseline::{self, MlpConfig};
use crate::benchgen::{self, Truth};
use crate::dataset::{load_csv, standardize, Cohort, FeatureMatrix};
use crate::equalize::{self, EqualizationResult, EqualizeParams};
use crate::error::{Error, Result, StageExt};
use crate::subspace::{self, jaccard, ModeAttribution, RefineParams, TrainConfig};

pub const REPORT_SCHEMA: &str = "shiftscope.run-report/1";
pub const AGGREGATE_SCHEMA: &str = "shiftscope.aggregate/1";

/// Where the two cohorts come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSource {
    Global {
        sigma: f64,
        n: usize,
    },
    Local {
        n_inject: usize,
        n: usize,
    },
    Csv {
        x: PathBuf,
        y: PathBuf,
        #[serde(default)]
        truth: Option<PathBuf>,
        #[serde(default = "default_delimiter")]
        delimiter: char,
    },
}

fn default_delimiter() -> char {
    ','
}

impl InputSource {
    /// The swept benchmark parameter, if any.
    pub fn parameter(&self) -> Option<f64> {
        match self {
            InputSource::Global { sigma, .. } => Some(*sigma),
            InputSource::Local { n_inject, .. } => Some(*n_inject as f64),
            InputSource::Csv { .. } => None,
        }
    }

    fn blank_parameter(&self) -> InputSource {
        match self {
            InputSource::Global { n, .. } => InputSource::Global { sigma: 0.0, n: *n },
            InputSource::Local { n, .. } => InputSource::Local { n_inject: 0, n: *n },
            other => other.clone(),
        }
    }

    /// Cohorts (unstandardized) and optional ground truth for one seed.
    pub fn load(&self, seed: u64) -> Result<(FeatureMatrix, FeatureMatrix, Option<Truth>)> {
        match self {
            InputSource::Global { sigma, n } => {
                let (x, y, t) = benchgen::make_global_pair(*sigma, *n, seed)?;
                Ok((x, y, Some(t)))
            }
            InputSource::Local { n_inject, n } => {
                let (x, y, t) = benchgen::make_local_pair(*n_inject, *n, seed)?;
                Ok((x, y, Some(t)))
            }
            InputSource::Csv { x, y, truth, delimiter } => {
                let delim = u8::try_from(*delimiter)
                    .map_err(|_| Error::InvalidConfig(format!("delimiter {delimiter:?} is not ASCII")))?;
                let xm = load_csv(x, delim)?;
                let ym = load_csv(y, delim)?;
                let t = truth.as_deref().map(Truth::read_json).transpose()?;
                Ok((xm, ym, t))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: InputSource,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub equalize: EqualizeParams,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub refine: RefineParams,
    /// pruned modes smaller than this are not attributed
    #[serde(default = "default_min_mode_size")]
    pub min_mode_size: usize,
    /// train the MLP baseline when injected ids are known
    #[serde(default)]
    pub baseline: bool,
    #[serde(default)]
    pub mlp: MlpConfig,
    #[serde(default = "default_recall_k")]
    pub recall_k: usize,
    /// run seeds on separate threads
    #[serde(default)]
    pub parallel: bool,
}

fn default_min_mode_size() -> usize {
    20
}

fn default_recall_k() -> usize {
    400
}

impl RunConfig {
    pub fn new(input: InputSource, seeds: Vec<u64>) -> Self {
        RunConfig {
            input,
            seeds,
            equalize: EqualizeParams::default(),
            train: TrainConfig::default(),
            refine: RefineParams::default(),
            min_mode_size: default_min_mode_size(),
            baseline: false,
            mlp: MlpConfig::default(),
            recall_k: default_recall_k(),
            parallel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list is empty".into()));
        }
        let uniq: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if uniq.len() != self.seeds.len() {
            return Err(Error::InvalidConfig("seed list has duplicates".into()));
        }
        if self.recall_k == 0 {
            return Err(Error::InvalidConfig("recall_k must be at least 1".into()));
        }
        self.equalize.validate()?;
        self.train.validate()?;
        self.mlp.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqualizationSummary {
    pub n_x: usize,
    pub n_y: usize,
    pub pruned_x: usize,
    pub pruned_y: usize,
    pub pruned_to_total: f64,
    pub outer_iters: usize,
    pub max_iters_exceeded: bool,
    pub steps: usize,
}

impl From<&EqualizationResult> for EqualizationSummary {
    fn from(r: &EqualizationResult) -> Self {
        EqualizationSummary {
            n_x: r.n_x,
            n_y: r.n_y,
            pruned_x: r.pruned_x.len(),
            pruned_y: r.pruned_y.len(),
            pruned_to_total: r.pruned_to_total(),
            outer_iters: r.outer_iters,
            max_iters_exceeded: r.max_iters_exceeded,
            steps: r.trace.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub cohort: Cohort,
    pub initial_size: usize,
    pub final_size: usize,
    pub pruned_in_support: usize,
    pub support: Vec<usize>,
    pub converged: bool,
    /// the support is a proper feature subset and enters the identified set
    pub attributed: bool,
    /// support after each refinement iteration
    pub support_path: Vec<Vec<usize>>,
    pub m_star_path: Vec<usize>,
    pub insufficient_queries: bool,
}

impl ModeReport {
    fn new(m: &ModeAttribution, d: usize) -> Self {
        ModeReport {
            cohort: m.cohort,
            initial_size: m.initial_points.len(),
            final_size: m.points.len(),
            pruned_in_support: m.pruned_in_support.len(),
            support: m.support.clone(),
            converged: m.converged,
            attributed: !m.support.is_empty() && m.support.len() < d,
            support_path: m.iterations.iter().map(|i| i.support.clone()).collect(),
            m_star_path: m.iterations.iter().map(|i| i.m_star).collect(),
            insufficient_queries: m.iterations.iter().any(|i| i.insufficient_queries),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub pruned_to_total: f64,
    /// injected rows among the Y points pruned when the dominant Y mode is
    /// re-equalized in its support
    pub pruned_to_injected: Option<f64>,
    /// injected rows among the Y points pruned in the full feature space
    pub pruned_to_injected_full: Option<f64>,
    pub injected_recall: Option<Recall>,
    /// Jaccard of the identified set with the true shift coordinates
    pub support_jaccard_truth: Option<f64>,
    /// pairwise Jaccard between mode supports
    pub mode_jaccard: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub parameter: Option<f64>,
    pub equalization: EqualizationSummary,
    pub modes: Vec<ModeReport>,
    /// union of the attributed mode supports
    pub identified_set: Vec<usize>,
    pub metrics: SeedMetrics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedTimes {
    pub seed: u64,
    pub equalize_s: f64,
    pub attribute_s: f64,
    pub baseline_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub version: String,
    pub config: RunConfig,
    pub n_features: usize,
    pub seeds: Vec<SeedReport>,
    /// fraction of seeds whose identified set contains each feature
    pub inclusion_frequency: Vec<f64>,
    /// pairwise Jaccard between per-seed identified sets
    pub seed_jaccard: Vec<Vec<f64>>,
    pub max_iters_exceeded: bool,
    /// excluded from determinism comparisons
    pub wall_times: Vec<SeedTimes>,
}

impl RunReport {
    /// The report with all wall times zeroed.
    pub fn without_times(&self) -> RunReport {
        let mut r = self.clone();
        r.wall_times.iter_mut().for_each(|t| {
            *t = SeedTimes {
                seed: t.seed,
                ..Default::default()
            }
        });
        r
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<RunReport> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let v: serde_json::Value = serde_json::from_slice(&fs::read(path)?)?;
        let schema = v.get("schema").and_then(|s| s.as_str()).unwrap_or("<none>");
        if schema != REPORT_SCHEMA {
            return Err(Error::SchemaMismatch(format!(
                "{} has schema {schema}, expected {REPORT_SCHEMA}",
                path.display()
            )));
        }
        Ok(serde_json::from_value(v)?)
    }

    /// `report.json`, `seeds.csv`, `modes.csv` and `inclusion.csv` in `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_json(&dir.join("report.json"))?;

        let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
        let mut w = csv::Writer::from_path(dir.join("seeds.csv"))?;
        w.write_record([
            "seed",
            "parameter",
            "pruned_x",
            "pruned_y",
            "pruned_to_total",
            "pruned_to_injected",
            "injected_recall",
            "identified_set",
        ])?;
        for s in &self.seeds {
            w.write_record([
                s.seed.to_string(),
                opt(s.parameter),
                s.equalization.pruned_x.to_string(),
                s.equalization.pruned_y.to_string(),
                format!("{:?}", s.metrics.pruned_to_total),
                opt(s.metrics.pruned_to_injected),
                opt(s.metrics.injected_recall.as_ref().map(|r| r.value)),
                join(&s.identified_set),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("modes.csv"))?;
        w.write_record([
            "seed",
            "mode",
            "cohort",
            "initial_size",
            "final_size",
            "pruned_in_support",
            "converged",
            "attributed",
            "support",
        ])?;
        for s in &self.seeds {
            for (i, m) in s.modes.iter().enumerate() {
                w.write_record([
                    s.seed.to_string(),
                    i.to_string(),
                    m.cohort.to_string(),
                    m.initial_size.to_string(),
                    m.final_size.to_string(),
                    m.pruned_in_support.to_string(),
                    m.converged.to_string(),
                    m.attributed.to_string(),
                    join(&m.support),
                ])?;
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("inclusion.csv"))?;
        w.write_record(["feature", "frequency"])?;
        for (j, f) in self.inclusion_frequency.iter().enumerate() {
            w.write_record([j.to_string(), format!("{f:?}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

fn fraction_found(found: &[usize], injected: &[usize]) -> f64 {
    let hits = injected.iter().filter(|i| found.binary_search(i).is_ok()).count();
    hits as f64 / injected.len() as f64
}

fn jaccard_matrix(sets: &[&[usize]]) -> Vec<Vec<f64>> {
    sets.iter()
        .map(|a| sets.iter().map(|b| jaccard(a, b)).collect())
        .collect()
}

/// Standardize, equalize, partition and attribute one seed.
pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<(SeedReport, SeedTimes)> {
    let (x, y, truth) = cfg.input.load(seed).stage("load")?;
    let (x, y, _) = standardize(&x, &y).stage("standardize")?;
    let mut times = SeedTimes {
        seed,
        ..Default::default()
    };

    let t = Instant::now();
    let eq = equalize::equalize(&x, &y, &cfg.equalize, seed).stage("equalize")?;
    times.equalize_s = t.elapsed().as_secs_f64();
    log::info!(
        "seed {seed}: pruned {} X and {} Y points",
        eq.pruned_x.len(),
        eq.pruned_y.len()
    );

    let t = Instant::now();
    let train = TrainConfig {
        seed: cfg.train.seed.wrapping_add(seed),
        ..cfg.train.clone()
    };
    let attributions = if eq.pruned_x.is_empty() && eq.pruned_y.is_empty() {
        Vec::new()
    } else {
        subspace::refine_loop(&x, &y, &eq, &cfg.equalize, &train, &cfg.refine, cfg.min_mode_size, seed)
            .stage("attribute")?
    };
    times.attribute_s = t.elapsed().as_secs_f64();

    let modes: Vec<ModeReport> = attributions.iter().map(|m| ModeReport::new(m, x.n_cols())).collect();
    let identified: BTreeSet<usize> = modes
        .iter()
        .filter(|m| m.attributed)
        .flat_map(|m| m.support.iter().copied())
        .collect();
    let identified_set: Vec<usize> = identified.into_iter().collect();
    let supports: Vec<&[usize]> = attributions.iter().map(|m| m.support.as_slice()).collect();

    let injected = truth.as_ref().and_then(|t| t.injected_ids());
    let dominant_y = attributions.iter().find(|m| m.cohort == Cohort::Y);
    let pruned_to_injected = injected.map(|ids| match dominant_y {
        Some(m) => fraction_found(&m.pruned_in_support, ids),
        None => fraction_found(&eq.pruned_y, ids),
    });
    let pruned_to_injected_full = injected.map(|ids| fraction_found(&eq.pruned_y, ids));

    let t = Instant::now();
    let injected_recall = match injected {
        Some(ids) if cfg.baseline => {
            let mlp = MlpConfig {
                seed: cfg.mlp.seed.wrapping_add(seed),
                ..cfg.mlp.clone()
            };
            let model = baseline::train_mlp(&x, &y, &mlp).stage("baseline")?;
            let ranking = baseline::rank_by_ratio(&model, &y).stage("baseline")?;
            let value = baseline::injected_recall_at(&ranking, ids, cfg.recall_k).stage("baseline")?;
            Some(Recall { k: cfg.recall_k, value })
        }
        _ => None,
    };
    times.baseline_s = t.elapsed().as_secs_f64();

    let support_jaccard_truth = truth.as_ref().map(|t| {
        let mut c = t.coords().to_vec();
        c.sort_unstable();
        jaccard(&identified_set, &c)
    });

    let report = SeedReport {
        seed,
        parameter: cfg.input.parameter(),
        equalization: EqualizationSummary::from(&eq),
        modes,
        metrics: SeedMetrics {
            pruned_to_total: eq.pruned_to_total(),
            pruned_to_injected,
            pruned_to_injected_full,
            injected_recall,
            support_jaccard_truth,
            mode_jaccard: jaccard_matrix(&supports),
        },
        identified_set,
    };
    Ok((report, times))
}

/// Runs every seed of `cfg` and assembles the report.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let results: Vec<Result<(SeedReport, SeedTimes)>> = if cfg.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = cfg
                .seeds
                .iter()
                .map(|&seed| s.spawn(move || run_seed(cfg, seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("seed worker panicked"))
                .collect()
        })
    } else {
        cfg.seeds.iter().map(|&seed| run_seed(cfg, seed)).collect()
    };
    let mut seeds = Vec::new();
    let mut wall_times = Vec::new();
    for r in results {
        let (s, t) = r?;
        seeds.push(s);
        wall_times.push(t);
    }
    let (x, _, _) = cfg.input.load(cfg.seeds[0]).stage("load")?;
    let d = x.n_cols();
    let mut counts = vec![0usize; d];
    for s in &seeds {
        for &j in &s.identified_set {
            counts[j] += 1;
        }
    }
    let n = seeds.len() as f64;
    let sets: Vec<&[usize]> = seeds.iter().map(|s| s.identified_set.as_slice()).collect();
    Ok(RunReport {
        schema: REPORT_SCHEMA.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        n_features: d,
        inclusion_frequency: counts.iter().map(|&c| c as f64 / n).collect(),
        seed_jaccard: jaccard_matrix(&sets),
        max_iters_exceeded: seeds.iter().any(|s| s.equalization.max_iters_exceeded),
        seeds,
        wall_times,
    })
}

/// Linear-interpolation percentile of a sorted sample.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionRow {
    pub parameter: Option<f64>,
    pub feature: usize,
    pub selected: usize,
    pub n_seeds: usize,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub parameter: Option<f64>,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub p25: f64,
    pub p75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTables {
    pub schema: String,
    pub sources: Vec<String>,
    pub inclusion: Vec<InclusionRow>,
    pub bands: Vec<BandRow>,
}

impl AggregateTables {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(dir.join("aggregate.json"), s)?;
        let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
        let mut w = csv::Writer::from_path(dir.join("inclusion_frequency.csv"))?;
        w.write_record(["parameter", "feature", "selected", "n_seeds", "frequency"])?;
        for r in &self.inclusion {
            w.write_record([
                opt(r.parameter),
                r.feature.to_string(),
                r.selected.to_string(),
                r.n_seeds.to_string(),
                format!("{:?}", r.frequency),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("ratio_bands.csv"))?;
        w.write_record(["parameter", "metric", "n", "mean", "p25", "p75"])?;
        for r in &self.bands {
            w.write_record([
                opt(r.parameter),
                r.metric.clone(),
                r.n.to_string(),
                format!("{:?}", r.mean),
                format!("{:?}", r.p25),
                format!("{:?}", r.p75),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Groups seed reports by benchmark parameter. Reports must share a schema
/// and, unless `force`, a configuration up to the parameter and seed list.
pub fn aggregate(reports: &[(String, RunReport)], force: bool) -> Result<AggregateTables> {
    let Some((first_name, first)) = reports.first() else {
        return Err(Error::EmptyInput("no reports to aggregate"));
    };
    let key = |r: &RunReport| {
        let mut c = r.config.clone();
        c.input = c.input.blank_parameter();
        c.seeds.clear();
        c.parallel = false;
        c
    };
    let base = key(first);
    for (name, r) in reports {
        if r.schema != first.schema {
            return Err(Error::SchemaMismatch(format!(
                "{name} has schema {}, {first_name} has {}",
                r.schema, first.schema
            )));
        }
        if r.n_features != first.n_features {
            return Err(Error::SchemaMismatch(format!(
                "{name} has {} features, {first_name} has {}",
                r.n_features, first.n_features
            )));
        }
        if !force && key(r) != base {
            return Err(Error::SchemaMismatch(format!(
                "{name} and {first_name} were produced with different configurations"
            )));
        }
    }

    let mut params: Vec<Option<f64>> = Vec::new();
    for (_, r) in reports {
        for s in &r.seeds {
            if !params.iter().any(|p| same_param(*p, s.parameter)) {
                params.push(s.parameter);
            }
        }
    }
    params.sort_by(|a, b| {
        a.unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&b.unwrap_or(f64::NEG_INFINITY))
    });

    let d = first.n_features;
    let mut inclusion = Vec::new();
    let mut bands = Vec::new();
    for p in params {
        let group: Vec<&SeedReport> = reports
            .iter()
            .flat_map(|(_, r)| r.seeds.iter())
            .filter(|s| same_param(s.parameter, p))
            .collect();
        for j in 0..d {
            let selected = group.iter().filter(|s| s.identified_set.contains(&j)).count();
            inclusion.push(InclusionRow {
                parameter: p,
                feature: j,
                selected,
                n_seeds: group.len(),
                frequency: selected as f64 / group.len() as f64,
            });
        }
        let metrics: [(&str, fn(&SeedReport) -> Option<f64>); 4] = [
            ("pruned_to_total", |s| Some(s.metrics.pruned_to_total)),
            ("pruned_to_injected", |s| s.metrics.pruned_to_injected),
            ("pruned_to_injected_full", |s| s.metrics.pruned_to_injected_full),
            ("injected_recall", |s| {
                s.metrics.injected_recall.as_ref().map(|r| r.value)
            }),
        ];
        for (name, get) in metrics {
            let mut v: Vec<f64> = group.iter().filter_map(|s| get(s)).collect();
            if v.is_empty() {
                continue;
            }
            v.sort_by(f64::total_cmp);
            bands.push(BandRow {
                parameter: p,
                metric: name.into(),
                n: v.len(),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                p25: percentile(&v, 0.25),
                p75: percentile(&v, 0.75),
            });
        }
    }
    Ok(AggregateTables {
        schema: AGGREGATE_SCHEMA.into(),
        sources: reports.iter().map(|(n, _)| n.clone()).collect(),
        inclusion,
        bands,
    })
}

fn same_param(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a.to_bits() == b.to_bits(),
        (None, None) => true,
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed_report(seed: u64, p: f64, set: Vec<usize>, ratio: f64) -> SeedReport {
        SeedReport {
            seed,
            parameter: Some(p),
            equalization: EqualizationSummary {
                n_x: 10,
                n_y: 10,
                pruned_x: 0,
                pruned_y: 0,
                pruned_to_total: ratio,
                outer_iters: 1,
                max_iters_exceeded: false,
                steps: 1,
            },
            modes: vec![],
            identified_set: set,
            metrics: SeedMetrics {
                pruned_to_total: ratio,
                pruned_to_injected: None,
                pruned_to_injected_full: None,
                injected_recall: None,
                support_jaccard_truth: None,
                mode_jaccard: vec![],
            },
        }
    }

    fn report(sigma: f64, seeds: Vec<SeedReport>) -> RunReport {
        let cfg = RunConfig::new(
            InputSource::Global { sigma, n: 100 },
            seeds.iter().map(|s| s.seed).collect(),
        );
        RunReport {
            schema: REPORT_SCHEMA.into(),
            version: "0".into(),
            config: cfg,
            n_features: 3,
            inclusion_frequency: vec![],
            seed_jaccard: vec![],
            max_iters_exceeded: false,
            seeds,
            wall_times: vec![],
        }
    }

    #[test]
    fn percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.25), 2.0);
        assert_eq!(percentile(&v, 0.75), 4.0);
        assert_eq!(percentile(&[1.0, 2.0], 0.25), 1.25);
        assert_eq!(percentile(&[7.0], 0.75), 7.0);
    }

    #[test]
    fn inclusion_counts() {
        let seeds: Vec<SeedReport> = (0..11)
            .map(|s| seed_report(s, 0.3, if s < 9 { vec![0, 2] } else { vec![2] }, 0.01))
            .collect();
        let t = aggregate(&[("a".into(), report(0.3, seeds))], false).unwrap();
        let f0 = t.inclusion.iter().find(|r| r.feature == 0).unwrap();
        assert_eq!((f0.selected, f0.n_seeds), (9, 11));
        assert_eq!(f0.frequency, 9.0 / 11.0);
        assert_eq!(t.inclusion.iter().find(|r| r.feature == 1).unwrap().frequency, 0.0);
        assert_eq!(t.inclusion.iter().find(|r| r.feature == 2).unwrap().frequency, 1.0);
    }

    #[test]
    fn single_report_bands_collapse() {
        let t = aggregate(
            &[("a".into(), report(0.1, vec![seed_report(0, 0.1, vec![], 0.02)]))],
            false,
        )
        .unwrap();
        assert_eq!(t.bands.len(), 1);
        let b = &t.bands[0];
        assert_eq!((b.mean, b.p25, b.p75), (0.02, 0.02, 0.02));
    }

    #[test]
    fn sweep_groups_by_parameter() {
        let a = report(
            0.1,
            vec![seed_report(0, 0.1, vec![], 0.01), seed_report(1, 0.1, vec![], 0.03)],
        );
        let b = report(0.3, vec![seed_report(0, 0.3, vec![0], 0.05)]);
        let t = aggregate(&[("a".into(), a), ("b".into(), b)], false).unwrap();
        let params: Vec<Option<f64>> = t.bands.iter().map(|b| b.parameter).collect();
        assert_eq!(params, vec![Some(0.1), Some(0.3)]);
        assert!((t.bands[0].mean - 0.02).abs() < 1e-15);
    }

    #[test]
    fn config_mismatch_needs_force() {
        let a = report(0.1, vec![seed_report(0, 0.1, vec![], 0.01)]);
        let mut b = report(0.1, vec![seed_report(1, 0.1, vec![], 0.01)]);
        b.config.equalize.alpha = 0.01;
        let pair = [("a".into(), a), ("b".into(), b)];
        assert!(matches!(aggregate(&pair, false), Err(Error::SchemaMismatch(_))));
        assert!(aggregate(&pair, true).is_ok());
        let mut c = pair[1].1.clone();
        c.schema = "other/9".into();
        assert!(matches!(
            aggregate(&[pair[0].clone(), ("c".into(), c)], true),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = RunConfig::new(InputSource::Global { sigma: 0.1, n: 10 }, vec![]);
        assert!(c.validate().is_err());
        c.seeds = vec![1, 1];
        assert!(c.validate().is_err());
        c.seeds = vec![1, 2];
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_round_trips() {
        let c = RunConfig::new(
            InputSource::Csv {
                x: "x.csv".into(),
                y: "y.csv".into(),
                truth: None,
                delimiter: ',',
            },
            vec![3],
        );
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"K\":100"));
        let back: RunConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn missing_input_is_stage_tagged() {
        let c = RunConfig::new(
            InputSource::Csv {
                x: "/nonexistent/x.csv".into(),
                y: "/nonexistent/y.csv".into(),
                truth: None,
                delimiter: ',',
            },
            vec![0],
        );
        match run_pipeline(&c) {
            Err(Error::Stage { stage, source }) => {
                assert_eq!(stage, "load");
                assert!(matches!(*source, Error::MissingFile(_)));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
