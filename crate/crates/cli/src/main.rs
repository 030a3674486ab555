use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use shiftscope::baseline::{self, MlpConfig};
use shiftscope::benchgen::{self, Truth};
use shiftscope::equalize::{self, EqualizationResult, EqualizeParams};
use shiftscope::pipeline::{self, InputSource, RunConfig, RunReport};
use shiftscope::score;
use shiftscope::subspace::{self, RefineParams, TrainConfig};
use shiftscope::{load_csv, pool, standardize, Cohort, FeatureMatrix};

/// Exit status when a stage finished but hit its iteration cap.
const EXIT_MAX_ITERS: u8 = 3;

#[derive(Parser)]
#[command(name = "shiftscope", version, about = "Two-sample shift detection and attribution")]
struct Cli {
    /// output directory
    #[arg(long, global = true, env = "SHIFTSCOPE_OUT", default_value = "shiftscope-out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark cohort pair with ground truth
    BenchGen {
        #[command(subcommand)]
        kind: BenchKind,
    },
    /// Score both cohorts and flag points above the p_ext null threshold
    Score {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        hyper: Hyper,
    },
    /// Bidirectional tail equalization
    Equalize {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        hyper: Hyper,
        /// exit 0 even if the iteration cap was reached
        #[arg(long)]
        allow_max_iters: bool,
    },
    /// Mode partition and subspace attribution of an equalization result
    Attribute {
        #[command(flatten)]
        data: DataArgs,
        /// equalization.json written by `equalize`
        #[arg(long)]
        equalization: PathBuf,
        #[command(flatten)]
        hyper: Hyper,
    },
    /// Full pipeline over one or more seeds
    Pipeline(PipelineArgs),
    /// MLP classifier ranking and injected recall
    Baseline {
        #[command(flatten)]
        data: DataArgs,
        /// recall cutoff
        #[arg(long, default_value_t = 400)]
        k: usize,
        #[command(flatten)]
        hyper: Hyper,
    },
    /// Inclusion frequencies and ratio bands over run reports
    Aggregate {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// aggregate reports produced with different configurations
        #[arg(long)]
        force: bool,
    },
}

#[derive(Subcommand)]
enum BenchKind {
    /// Mean shift of one mixture component
    Global {
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 50_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Injected low-dimensional population
    Local {
        #[arg(long)]
        inject: usize,
        #[arg(long, default_value_t = 50_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    /// ground-truth JSON from bench-gen
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    /// skip pooled standardization
    #[arg(long)]
    raw: bool,
}

impl DataArgs {
    fn load(&self) -> Result<(FeatureMatrix, FeatureMatrix)> {
        let d = u8::try_from(self.delimiter).context("delimiter must be ASCII")?;
        let x = load_csv(&self.x, d).context("loading X")?;
        let y = load_csv(&self.y, d).context("loading Y")?;
        if self.raw {
            return Ok((x, y));
        }
        let (x, y, _) = standardize(&x, &y).context("standardizing")?;
        Ok((x, y))
    }

    fn truth(&self) -> Result<Option<Truth>> {
        self.truth
            .as_deref()
            .map(|p| Truth::read_json(p).with_context(|| format!("reading {}", p.display())))
            .transpose()
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Bench {
    Global,
    Local,
}

#[derive(Args)]
struct PipelineArgs {
    /// TOML file with input, seeds and hyperparameters
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, conflicts_with_all = ["x", "y"])]
    bench: Option<Bench>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    inject: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, requires = "y")]
    x: Option<PathBuf>,
    #[arg(long, requires = "x")]
    y: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// comma-separated seed list [default: 0..=10 global, 0..=4 local, 0 for CSV input]
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// also train the MLP baseline
    #[arg(long)]
    baseline: bool,
    /// run seeds in parallel
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    allow_max_iters: bool,
    #[command(flatten)]
    hyper: Hyper,
}

/// Hyperparameters settable from flags or the config file. Unset values
/// fall back to the library defaults.
#[derive(Args, Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct Hyper {
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    q_tail: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// null exceedance level for flagging in `score`
    #[arg(long)]
    p_ext: Option<f64>,
    #[arg(long)]
    n_mc: Option<usize>,
    #[arg(long)]
    prune_batch: Option<usize>,
    #[arg(long)]
    max_outer_iters: Option<usize>,
    #[arg(long)]
    min_tail: Option<usize>,
    /// soft neighbourhood size
    #[arg(long = "K", id = "K")]
    #[serde(rename = "K")]
    k: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch")]
    #[serde(alias = "batch")]
    batch_size: Option<usize>,
    #[arg(long)]
    pos_frac: Option<f64>,
    #[arg(long)]
    tau_start: Option<f64>,
    #[arg(long)]
    tau_end: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    l1: Option<f64>,
    #[arg(long = "folds")]
    #[serde(alias = "folds")]
    n_splits: Option<usize>,
    #[arg(long)]
    tau_per_feature: Option<bool>,
    #[arg(long)]
    graph_k: Option<usize>,
    #[arg(long)]
    max_refine_iters: Option<usize>,
    #[arg(long)]
    stable_jaccard: Option<f64>,
    #[arg(long)]
    min_mode_size: Option<usize>,
    #[arg(long)]
    mlp_lr: Option<f64>,
    #[arg(long)]
    mlp_l2: Option<f64>,
    #[arg(long)]
    mlp_batch: Option<usize>,
    #[arg(long)]
    mlp_iters: Option<usize>,
    #[arg(long)]
    recall_k: Option<usize>,
    /// base seed for stochastic stages
    #[arg(long)]
    seed: Option<u64>,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f; } )*
    };
}

impl Hyper {
    fn overlay(mut self, top: &Hyper) -> Hyper {
        overlay!(
            self,
            top,
            k_max,
            q_tail,
            alpha,
            p_ext,
            n_mc,
            prune_batch,
            max_outer_iters,
            min_tail,
            k,
            beta,
            epochs,
            batch_size,
            pos_frac,
            tau_start,
            tau_end,
            lr,
            l1,
            n_splits,
            tau_per_feature,
            graph_k,
            max_refine_iters,
            stable_jaccard,
            min_mode_size,
            mlp_lr,
            mlp_l2,
            mlp_batch,
            mlp_iters,
            recall_k,
            seed
        );
        self
    }

    fn equalize(&self) -> EqualizeParams {
        let mut p = EqualizeParams::default();
        set(&mut p.k_max, self.k_max);
        set(&mut p.q_tail, self.q_tail);
        set(&mut p.alpha, self.alpha);
        set(&mut p.n_mc, self.n_mc);
        set(&mut p.prune_batch, self.prune_batch);
        set(&mut p.max_outer_iters, self.max_outer_iters);
        set(&mut p.min_tail, self.min_tail);
        p
    }

    fn train(&self) -> TrainConfig {
        let mut c = TrainConfig::default();
        set(&mut c.k, self.k);
        set(&mut c.beta, self.beta);
        set(&mut c.epochs, self.epochs);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.pos_frac, self.pos_frac);
        set(&mut c.tau_start, self.tau_start);
        set(&mut c.tau_end, self.tau_end);
        set(&mut c.lr, self.lr);
        set(&mut c.l1, self.l1);
        set(&mut c.n_splits, self.n_splits);
        set(&mut c.tau_per_feature, self.tau_per_feature);
        set(&mut c.seed, self.seed);
        c
    }

    fn refine(&self) -> RefineParams {
        let mut r = RefineParams::default();
        set(&mut r.graph_k, self.graph_k);
        set(&mut r.max_refine_iters, self.max_refine_iters);
        set(&mut r.stable_jaccard, self.stable_jaccard);
        r
    }

    fn mlp(&self) -> MlpConfig {
        let mut m = MlpConfig::default();
        set(&mut m.lr, self.mlp_lr);
        set(&mut m.l2, self.mlp_l2);
        set(&mut m.batch_size, self.mlp_batch);
        set(&mut m.max_iters, self.mlp_iters);
        set(&mut m.seed, self.seed);
        m
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

/// Config file layout: hyperparameters at top level, plus input and seeds.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    input: Option<InputSource>,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
    #[serde(default)]
    baseline: Option<bool>,
    #[serde(default)]
    parallel: Option<bool>,
    #[serde(flatten)]
    hyper: Hyper,
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn bench_gen(out: &Path, kind: BenchKind) -> Result<()> {
    let (x, y, truth) = match kind {
        BenchKind::Global { sigma, n, seed } => benchgen::make_global_pair(sigma, n, seed),
        BenchKind::Local { inject, n, seed } => benchgen::make_local_pair(inject, n, seed),
    }?;
    fs::create_dir_all(out)?;
    x.write_csv(&out.join("X.csv"), b',')?;
    y.write_csv(&out.join("Y.csv"), b',')?;
    truth.write_json(&out.join("truth.json"))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_score(out: &Path, data: &DataArgs, hyper: &Hyper) -> Result<()> {
    let (x, y) = data.load()?;
    let k_max = hyper.k_max.unwrap_or(400);
    let p_ext = hyper.p_ext.unwrap_or(1e-5);
    let n_mc = hyper.n_mc.unwrap_or(1_000_000);
    let mut idx = pool(&x, &y)?;
    idx.build_cache(k_max);
    fs::create_dir_all(out)?;
    let mut summary = serde_json::Map::new();
    for (i, c) in [Cohort::Y, Cohort::X].into_iter().enumerate() {
        let p = score::active_share(&idx, c)?;
        let scores = score::score_cohort(&idx, c, k_max)?;
        let null = score::calibrate_null(k_max, p, n_mc, hyper.seed().wrapping_add(i as u64))?;
        let thr = score::flag_threshold(&null, p_ext)?;
        let flagged: Vec<usize> = scores
            .iter()
            .filter(|s| s.score.value >= thr)
            .map(|s| idx.cohort_row(s.id))
            .collect();
        println!("{c}: p = {p:.4}, threshold {thr:.4}, {} flagged", flagged.len());
        score::write_scores_csv(&out.join(format!("scores_{}.csv", c.name())), &idx, &scores)?;
        summary.insert(
            c.name().to_string(),
            serde_json::json!({ "p": p, "threshold": thr, "p_ext": p_ext, "flagged": flagged }),
        );
    }
    write_json(&out.join("flagged.json"), &summary)
}

fn cmd_equalize(out: &Path, data: &DataArgs, hyper: &Hyper, allow: bool) -> Result<ExitCode> {
    let (x, y) = data.load()?;
    let r = equalize::equalize(&x, &y, &hyper.equalize(), hyper.seed())?;
    fs::create_dir_all(out)?;
    write_json(&out.join("equalization.json"), &r)?;
    r.write_trace_csv(&out.join("trace.csv"))?;
    println!(
        "pruned {} X and {} Y points (ratio {:.4}) in {} outer iterations",
        r.pruned_x.len(),
        r.pruned_y.len(),
        r.pruned_to_total(),
        r.outer_iters
    );
    Ok(status(r.max_iters_exceeded, allow))
}

fn cmd_attribute(out: &Path, data: &DataArgs, eq_path: &Path, hyper: &Hyper) -> Result<()> {
    let (x, y) = data.load()?;
    let eq: EqualizationResult =
        serde_json::from_slice(&fs::read(eq_path).with_context(|| format!("reading {}", eq_path.display()))?)?;
    if eq.n_x != x.n_rows() || eq.n_y != y.n_rows() {
        bail!("equalization result does not match the cohort sizes");
    }
    let modes = subspace::refine_loop(
        &x,
        &y,
        &eq,
        &hyper.equalize(),
        &hyper.train(),
        &hyper.refine(),
        hyper.min_mode_size.unwrap_or(20),
        hyper.seed(),
    )?;
    fs::create_dir_all(out)?;
    write_json(&out.join("attribution.json"), &modes)?;
    for m in &modes {
        println!(
            "{} mode of {} points: support {:?}",
            m.cohort,
            m.initial_points.len(),
            m.support
        );
    }
    Ok(())
}

fn cmd_baseline(out: &Path, data: &DataArgs, k: usize, hyper: &Hyper) -> Result<()> {
    let Some(truth) = data.truth()? else {
        bail!("recall needs the injected ids: pass --truth with a localized-benchmark truth file");
    };
    let Some(injected) = truth.injected_ids() else {
        bail!("the truth file has no injected ids (global benchmark)");
    };
    let (x, y) = data.load()?;
    let model = baseline::train_mlp(&x, &y, &hyper.mlp())?;
    let ranking = baseline::rank_by_ratio(&model, &y)?;
    let recall = baseline::injected_recall_at(&ranking, injected, k)?;
    fs::create_dir_all(out)?;
    baseline::write_ranking_csv(&out.join("ranking.csv"), &ranking)?;
    write_json(
        &out.join("baseline.json"),
        &serde_json::json!({ "k": k, "injected_recall": recall, "loss_history": model.loss_history }),
    )?;
    println!("InjectedRecall@{k} = {recall:.4}");
    Ok(())
}

fn run_config(args: &PipelineArgs) -> Result<RunConfig> {
    let file: FileConfig = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => FileConfig::default(),
    };
    let hyper = file.hyper.clone().overlay(&args.hyper);
    let input = if let Some(b) = args.bench {
        let n = args.n.unwrap_or(50_000);
        match b {
            Bench::Global => InputSource::Global {
                sigma: args.sigma.context("--bench global needs --sigma")?,
                n,
            },
            Bench::Local => InputSource::Local {
                n_inject: args.inject.context("--bench local needs --inject")?,
                n,
            },
        }
    } else if let (Some(x), Some(y)) = (&args.x, &args.y) {
        InputSource::Csv {
            x: x.clone(),
            y: y.clone(),
            truth: args.truth.clone(),
            delimiter: ',',
        }
    } else if let Some(i) = file.input {
        i
    } else {
        bail!("no input: pass --bench, --x/--y, or an [input] table in --config");
    };
    let seeds = args.seeds.clone().or(file.seeds).unwrap_or_else(|| match input {
        InputSource::Global { .. } => (0..11).collect(),
        InputSource::Local { .. } => (0..5).collect(),
        InputSource::Csv { .. } => vec![0],
    });
    let mut cfg = RunConfig::new(input, seeds);
    cfg.equalize = hyper.equalize();
    cfg.train = hyper.train();
    cfg.refine = hyper.refine();
    cfg.mlp = hyper.mlp();
    set(&mut cfg.min_mode_size, hyper.min_mode_size);
    set(&mut cfg.recall_k, hyper.recall_k);
    cfg.baseline = args.baseline || file.baseline.unwrap_or(false);
    cfg.parallel = args.parallel || file.parallel.unwrap_or(false);
    Ok(cfg)
}

fn cmd_pipeline(out: &Path, args: &PipelineArgs) -> Result<ExitCode> {
    let cfg = run_config(args)?;
    let report = pipeline::run_pipeline(&cfg)?;
    report.write_dir(out)?;
    for s in &report.seeds {
        println!(
            "seed {}: ratio {:.4}, identified {:?}",
            s.seed, s.metrics.pruned_to_total, s.identified_set
        );
    }
    println!("report written to {}", out.join("report.json").display());
    Ok(status(report.max_iters_exceeded, args.allow_max_iters))
}

fn cmd_aggregate(out: &Path, paths: &[PathBuf], force: bool) -> Result<()> {
    let reports = paths
        .iter()
        .map(|p| Ok((p.display().to_string(), RunReport::read_json(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let t = pipeline::aggregate(&reports, force)?;
    t.write_dir(out)?;
    println!("aggregated {} reports into {}", reports.len(), out.display());
    Ok(())
}

fn status(max_iters: bool, allow: bool) -> ExitCode {
    if max_iters && !allow {
        eprintln!("equalization reached the outer iteration cap");
        ExitCode::from(EXIT_MAX_ITERS)
    } else {
        ExitCode::SUCCESS
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let out = cli.out.as_path();
    match cli.cmd {
        Command::BenchGen { kind } => bench_gen(out, kind)?,
        Command::Score { data, hyper } => cmd_score(out, &data, &hyper)?,
        Command::Equalize {
            data,
            hyper,
            allow_max_iters,
        } => return cmd_equalize(out, &data, &hyper, allow_max_iters),
        Command::Attribute {
            data,
            equalization,
            hyper,
        } => cmd_attribute(out, &data, &equalization, &hyper)?,
        Command::Pipeline(args) => return cmd_pipeline(out, &args),
        Command::Baseline { data, k, hyper } => cmd_baseline(out, &data, k, &hyper)?,
        Command::Aggregate { reports, force } => cmd_aggregate(out, &reports, force)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        Cli::command().debug_assert();
    }
}
