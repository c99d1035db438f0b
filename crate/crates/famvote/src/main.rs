//! Command-line surface. Every subcommand writes its artifacts plus a
//! manifest under a user-chosen output directory; `pipeline` chains all
//! stages from one config file.

use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};

use famvote::dataset::{
    load_family_partition, load_labels, load_predictions, FamilyPartition, ScoreMode,
};
use famvote::manifest::RunManifest;
use famvote::pipeline::{
    compute_runs, resolve_seed, run_aggregate, run_analyze_report, run_compare, run_lcs_stage,
    run_pipeline, write_scores, AggregateSection, AnalyzeSection, LcsSection, PipelineOptions,
    SynthSection, DEFAULT_TAU,
};
use famvote::scoring::{EnsembleContext, SoftVariant};
use famvote::synth::{generate, SynthConfig};
use famvote::voting::{
    make_weight_scheme, outcome_accuracy, WeightKind, DEFAULT_EPSILON, DEFAULT_GAMMA, DEFAULT_RHO,
};
use famvote::{FamvoteError, Result};

#[derive(Parser)]
#[command(
    name = "famvote",
    version,
    about = "Family-aware ensemble aggregation and diagnostics"
)]
struct Cli {
    /// Cap worker threads (default: all cores). Results are identical at
    /// any thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score predictions against labels into an accuracy matrix.
    Score(ScoreCmd),
    /// Run aggregation methods and write per-question outcomes.
    Aggregate(AggregateCmd),
    /// Cross-validated learned candidate scoring.
    Lcs(LcsCmd),
    /// One diagnostic report on a pool.
    Analyze(AnalyzeCmd),
    /// Generate a synthetic pool with planted family correlations.
    Synth(SynthCmd),
    /// Accuracy leaderboard with significance against a baseline.
    Compare(CompareCmd),
    /// Run every configured stage from one config file.
    Pipeline(PipelineCmd),
}

/// Input pool shared by the data-consuming subcommands.
#[derive(Args)]
struct DataArgs {
    /// Prediction JSONL files; each model id is its file stem.
    #[arg(long, num_args = 1.., required = true)]
    predictions: Vec<PathBuf>,
    /// Labels JSONL.
    #[arg(long)]
    labels: PathBuf,
    /// Label scoring mode: exact or soft.
    #[arg(long, default_value = "exact")]
    mode: String,
    /// Family map TOML; models form singleton families when omitted.
    #[arg(long)]
    families: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<(EnsembleContext, FamilyPartition)> {
        let mode: ScoreMode = self.mode.parse()?;
        let mut predictions = Vec::with_capacity(self.predictions.len());
        for path in &self.predictions {
            predictions.push(load_predictions(path, None)?);
        }
        let labels = load_labels(&self.labels, mode)?;
        let mut ids: Vec<String> = predictions.iter().map(|p| p.model_id.clone()).collect();
        ids.sort();
        let partition = match &self.families {
            Some(path) => load_family_partition(path, &ids)?,
            None => FamilyPartition::singletons(&ids),
        };
        let ctx = EnsembleContext::build(&predictions, &labels, SoftVariant::LeaveOneOut)?;
        Ok((ctx, partition))
    }

    fn record(&self, manifest: &mut RunManifest) -> Result<()> {
        for path in &self.predictions {
            manifest.record_input(path)?;
        }
        manifest.record_input(&self.labels)?;
        if let Some(path) = &self.families {
            manifest.record_input(path)?;
        }
        Ok(())
    }

    fn describe(&self, sub: &str, out: &Path) -> String {
        let mut s = format!("famvote {sub} --labels {}", self.labels.display());
        for p in &self.predictions {
            s.push_str(&format!(" --predictions {}", p.display()));
        }
        if self.mode != "exact" {
            s.push_str(&format!(" --mode {}", self.mode));
        }
        if let Some(f) = &self.families {
            s.push_str(&format!(" --families {}", f.display()));
        }
        s.push_str(&format!(" --out {}", out.display()));
        s
    }
}

/// Vote parameters shared by aggregate, analyze, and compare.
#[derive(Args)]
struct VoteArgs {
    /// Weight scheme: overall or per-type.
    #[arg(long, default_value = "overall")]
    weights: String,
    /// Family-vote concentration (default 1.0; hfv-sharp defaults to 2.0).
    #[arg(long)]
    alpha: Option<f64>,
    /// Family-reliability cutoff.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Family-size discount exponent.
    #[arg(long, default_value_t = DEFAULT_RHO)]
    rho: f64,
    /// Family-quality exponent.
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    /// Log-odds clipping bound.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
}

impl VoteArgs {
    fn section(&self, methods: Vec<String>) -> AggregateSection {
        AggregateSection {
            methods,
            weights: self.weights.clone(),
            alpha: self.alpha,
            tau: self.tau,
            rho: self.rho,
            gamma: self.gamma,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Args)]
struct ScoreCmd {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory.
    #[arg(long = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AggregateCmd {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory.
    #[arg(long = "out")]
    out: PathBuf,
    /// Methods to run (repeatable or comma-separated).
    #[arg(long = "method", num_args = 1.., value_delimiter = ',', default_value = "hfv")]
    methods: Vec<String>,
    #[command(flatten)]
    vote: VoteArgs,
}

#[derive(Args)]
struct LcsCmd {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory.
    #[arg(long = "out")]
    out: PathBuf,
    /// Candidates per question.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 200)]
    trees: usize,
    #[arg(long, default_value_t = 5)]
    depth: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    /// Fold-shuffle seed (FAMVOTE_SEED, then 0, when omitted).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AnalyzeCmd {
    /// Report: taxonomy|correlation|spectrum|cluster|gap|balanced|scaling|flips|granularity.
    report: String,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory.
    #[arg(long = "out")]
    out: PathBuf,
    #[command(flatten)]
    vote: VoteArgs,
    /// Cluster count (defaults to the family count).
    #[arg(long)]
    cluster_k: Option<usize>,
    /// Subset sizes for the scaling report (comma-separated).
    #[arg(long, value_delimiter = ',')]
    scaling_ks: Vec<usize>,
    /// Random subsets per size for the scaling report.
    #[arg(long, default_value_t = 200)]
    scaling_samples: usize,
    /// Seed for clustering and subset sampling.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthCmd {
    /// Generator config TOML.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long = "out")]
    out: PathBuf,
    /// Seed fallback when the config omits one.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CompareCmd {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory.
    #[arg(long = "out")]
    out: PathBuf,
    /// Methods on the leaderboard (comma-separated).
    #[arg(
        long = "method",
        num_args = 1..,
        value_delimiter = ',',
        default_value = "majority,calibrated,dedup,corr,rccv,qualrccv,hfv"
    )]
    methods: Vec<String>,
    /// Paired-bootstrap baseline; must be among the methods.
    #[arg(long, default_value = "calibrated")]
    baseline: String,
    #[arg(long, default_value_t = famvote::stats::DEFAULT_RESAMPLES)]
    resamples: usize,
    /// Bootstrap seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    vote: VoteArgs,
}

#[derive(Args)]
struct PipelineCmd {
    /// Pipeline config TOML.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long = "out")]
    out: PathBuf,
    /// Seed fallback when the config omits one.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: cannot size the thread pool: {e}");
            std::process::exit(2);
        }
    }
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("FAMVOTE_SEED") {
        Ok(raw) => raw
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| FamvoteError::usage(format!("FAMVOTE_SEED is not an integer: `{raw}`"))),
        Err(_) => Ok(None),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Score(cmd) => cmd_score(cmd),
        Command::Aggregate(cmd) => cmd_aggregate(cmd),
        Command::Lcs(cmd) => cmd_lcs(cmd),
        Command::Analyze(cmd) => cmd_analyze(cmd),
        Command::Synth(cmd) => cmd_synth(cmd),
        Command::Compare(cmd) => cmd_compare(cmd),
        Command::Pipeline(cmd) => cmd_pipeline(cmd),
    }
}

fn cmd_score(cmd: ScoreCmd) -> Result<()> {
    let (ctx, _) = cmd.data.load()?;
    let mut manifest = RunManifest::new(cmd.data.describe("score", &cmd.out), vec![])?;
    cmd.data.record(&mut manifest)?;
    let hash = manifest.save(&cmd.out.join("manifest.json"))?;
    write_scores(&cmd.out.join("scores.csv"), &hash, &ctx)?;
    println!(
        "scored {} models on {} questions -> {}",
        ctx.num_models(),
        ctx.num_questions(),
        cmd.out.join("scores.csv").display()
    );
    Ok(())
}

fn cmd_aggregate(cmd: AggregateCmd) -> Result<()> {
    let (ctx, partition) = cmd.data.load()?;
    let mut manifest = RunManifest::new(cmd.data.describe("aggregate", &cmd.out), vec![])?;
    cmd.data.record(&mut manifest)?;
    let hash = manifest.save(&cmd.out.join("manifest.json"))?;
    let agg = cmd.vote.section(cmd.methods);
    let kind: WeightKind = agg.weights.parse()?;
    let weights = make_weight_scheme(&ctx.matrix, kind, agg.epsilon)?;
    let runs = run_aggregate(&cmd.out, &hash, &ctx, &partition, &weights, &agg)?;
    for (name, run) in &runs {
        let mut line = format!(
            "{name}: accuracy {:.4} over {} questions",
            outcome_accuracy(&ctx, &run.outcomes),
            ctx.num_questions()
        );
        if let Some(sel) = &run.hfv_selection {
            line.push_str(&format!(" (selected alpha={}, tau={})", sel.alpha, sel.tau));
        }
        println!("{line}");
    }
    println!("artifacts under {}", cmd.out.display());
    Ok(())
}

fn cmd_lcs(cmd: LcsCmd) -> Result<()> {
    let seed = resolve_seed(None, cmd.seed, env_seed()?);
    let (ctx, partition) = cmd.data.load()?;
    let mut manifest = RunManifest::new(cmd.data.describe("lcs", &cmd.out), vec![seed])?;
    cmd.data.record(&mut manifest)?;
    let hash = manifest.save(&cmd.out.join("manifest.json"))?;
    let section = LcsSection {
        k: cmd.k,
        folds: cmd.folds,
        trees: cmd.trees,
        depth: cmd.depth,
        learning_rate: cmd.learning_rate,
    };
    let run = run_lcs_stage(&cmd.out, &hash, &ctx, &partition, &section, seed)?;
    println!(
        "lcs accuracy {:.4} over {} questions ({} folds, k={})",
        run.accuracy,
        ctx.num_questions(),
        cmd.folds,
        cmd.k
    );
    if !run.degenerate_folds.is_empty() {
        println!(
            "note: folds {:?} had single-class training labels and kept the vote ranking",
            run.degenerate_folds
        );
    }
    println!("artifacts under {}", cmd.out.display());
    Ok(())
}

fn cmd_analyze(cmd: AnalyzeCmd) -> Result<()> {
    let seed = resolve_seed(None, cmd.seed, env_seed()?);
    let (ctx, partition) = cmd.data.load()?;
    let mut manifest = RunManifest::new(
        format!(
            "{} {}",
            cmd.data.describe("analyze", &cmd.out),
            cmd.report
        ),
        vec![seed],
    )?;
    cmd.data.record(&mut manifest)?;
    let hash = manifest.save(&cmd.out.join("manifest.json"))?;
    // Vote-comparing reports look these two up by name.
    let agg = cmd
        .vote
        .section(vec!["calibrated".to_string(), "hfv".to_string()]);
    let kind: WeightKind = agg.weights.parse()?;
    let weights = make_weight_scheme(&ctx.matrix, kind, agg.epsilon)?;
    let runs = compute_runs(&ctx, &partition, &weights, &agg.methods, &agg.params())?;
    let analyze = AnalyzeSection {
        reports: vec![cmd.report.clone()],
        cluster_k: cmd.cluster_k,
        scaling_ks: cmd.scaling_ks.clone(),
        scaling_samples: cmd.scaling_samples,
    };
    run_analyze_report(
        &cmd.out,
        &hash,
        &ctx,
        &partition,
        &weights,
        &agg,
        &analyze,
        &runs,
        &cmd.report,
        seed,
    )?;
    println!(
        "report {} written under {}",
        cmd.report,
        cmd.out.join("analyze").display()
    );
    Ok(())
}

fn cmd_synth(cmd: SynthCmd) -> Result<()> {
    let text = fs::read_to_string(&cmd.config).map_err(|source| FamvoteError::Io {
        path: cmd.config.clone(),
        source,
    })?;
    let section: SynthSection = toml::from_str(&text).map_err(|e| FamvoteError::Parse {
        path: cmd.config.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    let seed = resolve_seed(section.seed, cmd.seed, env_seed()?);
    let config = SynthConfig {
        families: section.families,
        rho_w: section.rho_w,
        rho_b: section.rho_b,
        n_questions: section.n_questions,
        answer_space: section.answer_space,
        seed,
    };
    let mut manifest = RunManifest::new(
        format!(
            "famvote synth --config {} --out {}",
            cmd.config.display(),
            cmd.out.display()
        ),
        vec![seed],
    )?;
    manifest.record_config(&cmd.config)?;
    manifest.save(&cmd.out.join("manifest.json"))?;
    let out = generate(&config)?;
    out.write_dataset(&cmd.out)?;
    println!(
        "generated {} models in {} families on {} questions -> {}",
        out.predictions.len(),
        out.partition.num_families(),
        config.n_questions,
        cmd.out.display()
    );
    Ok(())
}

fn cmd_compare(cmd: CompareCmd) -> Result<()> {
    let seed = resolve_seed(None, cmd.seed, env_seed()?);
    let (ctx, partition) = cmd.data.load()?;
    let mut manifest = RunManifest::new(cmd.data.describe("compare", &cmd.out), vec![seed])?;
    cmd.data.record(&mut manifest)?;
    let hash = manifest.save(&cmd.out.join("manifest.json"))?;
    let agg = cmd.vote.section(cmd.methods);
    let kind: WeightKind = agg.weights.parse()?;
    let weights = make_weight_scheme(&ctx.matrix, kind, agg.epsilon)?;
    let runs = compute_runs(&ctx, &partition, &weights, &agg.methods, &agg.params())?;
    let rows = run_compare(
        &cmd.out,
        &hash,
        &ctx,
        &runs,
        &cmd.baseline,
        cmd.resamples,
        seed,
    )?;
    println!(
        "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "method", "acc", "ci_low", "ci_high", "delta", "p"
    );
    for row in &rows {
        println!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>+8.4} {:>8.4}",
            row.method, row.accuracy, row.ci_low, row.ci_high, row.delta_vs_baseline, row.p_value
        );
    }
    println!(
        "leaderboard at {}",
        cmd.out.join("compare/leaderboard.csv").display()
    );
    Ok(())
}

fn cmd_pipeline(cmd: PipelineCmd) -> Result<()> {
    let summary = run_pipeline(&PipelineOptions {
        config_path: cmd.config,
        out_dir: cmd.out,
        seed_flag: cmd.seed,
        env_seed: env_seed()?,
    })?;
    println!(
        "pipeline complete: {} (manifest {})",
        summary.stages.join(", "),
        &summary.manifest_hash[..16]
    );
    println!("artifacts under {}", summary.out_dir.display());
    Ok(())
}
