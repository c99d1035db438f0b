//! Declarative end-to-end runs: a TOML config names the data source and
//! stages, and every artifact lands in one output directory stamped with
//! the run's manifest hash.
//!
//! Stage order is fixed: data (synth or load) -> score -> aggregate ->
//! compare -> analyze -> lcs. Reports are CSV, per-question artifacts are
//! JSONL with a manifest header line, structured reports are JSON. Reruns
//! with the same config and seed write identical report bytes at any
//! thread count and from any directory; only manifest.json carries the
//! invocation-specific command line and timestamp.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{
    answer_flip_report, balanced_ensemble, classify_taxonomy, cluster_models, correlation_report,
    gap_decomposition, granularity_ablation, partition_from_labels, scaling_curve, ClusterMethod,
    CorrelationReport, Tier,
};
use crate::dataset::{
    load_family_partition, load_labels, load_predictions, FamilyPartition, LabelSet,
    PredictionSet, ScoreMode,
};
use crate::error::{FamvoteError, Result};
use crate::gbdt::GbdtConfig;
use crate::lcs::{run_lcs_cv, LcsConfig};
use crate::manifest::RunManifest;
use crate::scoring::{EnsembleContext, SoftVariant, DEFAULT_CORRECT_THRESHOLD};
use crate::stats::{bootstrap_ci, paired_bootstrap_p, DEFAULT_RESAMPLES};
use crate::synth::{generate, FamilySpec, SynthConfig};
use crate::voting::{
    best_model_index, make_weight_scheme, outcome_accuracy, run_method, score_outcomes, Method,
    MethodRun, VoteOutcome, WeightKind, WeightScheme, DEFAULT_EPSILON, DEFAULT_GAMMA, DEFAULT_RHO,
};

/// Default family-vote concentration exponent.
pub const DEFAULT_ALPHA: f64 = 1.0;
/// Default family-reliability cutoff.
pub const DEFAULT_TAU: f64 = 0.5;
/// Sharpened concentration used by the `hfv-sharp` method name when no
/// explicit alpha is given.
pub const SHARP_ALPHA: f64 = 2.0;

const DEFAULT_METHODS: [&str; 7] = [
    "majority",
    "calibrated",
    "dedup",
    "corr",
    "rccv",
    "qualrccv",
    "hfv",
];
const DEFAULT_REPORTS: [&str; 5] = ["taxonomy", "correlation", "spectrum", "gap", "balanced"];

/// Vote parameters shared by method-name parsing across CLI and config.
#[derive(Debug, Clone)]
pub struct MethodParams {
    /// None means each method name picks its own default.
    pub alpha: Option<f64>,
    pub tau: f64,
    pub rho: f64,
    pub gamma: f64,
}

impl Default for MethodParams {
    fn default() -> Self {
        MethodParams {
            alpha: None,
            tau: DEFAULT_TAU,
            rho: DEFAULT_RHO,
            gamma: DEFAULT_GAMMA,
        }
    }
}

/// Maps a method name to a configured method.
pub fn parse_method(name: &str, params: &MethodParams) -> Result<Method> {
    let method = match name {
        "majority" => Method::Majority,
        "calibrated" => Method::Calibrated,
        "dedup" => Method::Dedup,
        "corr" => Method::Corr,
        "rccv" => Method::Rccv { rho: params.rho },
        "qualrccv" => Method::Qualrccv {
            rho: params.rho,
            gamma: params.gamma,
        },
        "hfv" => Method::Hfv {
            alpha: params.alpha.unwrap_or(DEFAULT_ALPHA),
            tau: params.tau,
        },
        "hfv-sharp" => Method::Hfv {
            alpha: params.alpha.unwrap_or(SHARP_ALPHA),
            tau: params.tau,
        },
        "hfv-auto" => Method::HfvAuto,
        other => {
            return Err(FamvoteError::usage(format!(
                "unknown method `{other}` (expected majority|calibrated|dedup|corr|rccv|qualrccv|hfv|hfv-sharp|hfv-auto)"
            )))
        }
    };
    Ok(method)
}

/// One leaderboard line: accuracy with CI and significance vs a baseline.
#[derive(Debug, Clone, Serialize)]
pub struct LeaderboardRow {
    pub method: String,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub delta_vs_baseline: f64,
    /// One-sided paired-bootstrap p (fraction of resamples where the
    /// baseline outperforms this method; ties count 0.5).
    pub p_value: f64,
}

/// Scores every method on the shared question set against a baseline.
/// Rows are sorted by accuracy descending, then method name.
pub fn compare_methods(
    ctx: &EnsembleContext,
    runs: &[(String, Vec<VoteOutcome>)],
    baseline: &str,
    resamples: usize,
    seed: u64,
) -> Result<Vec<LeaderboardRow>> {
    let n = ctx.num_questions();
    for (name, outcomes) in runs {
        if outcomes.len() != n {
            return Err(FamvoteError::contract(format!(
                "method `{name}` has {} outcomes but the matrix has {n} questions",
                outcomes.len()
            )));
        }
    }
    let baseline_outcomes = runs
        .iter()
        .find(|(name, _)| name == baseline)
        .map(|(_, o)| o)
        .ok_or_else(|| {
            FamvoteError::usage(format!("baseline `{baseline}` is not among the methods"))
        })?;
    let baseline_scores = score_outcomes(ctx, baseline_outcomes);
    let baseline_mean = crate::stats::mean(&baseline_scores);
    let mut rows = Vec::with_capacity(runs.len());
    for (name, outcomes) in runs {
        let scores = score_outcomes(ctx, outcomes);
        let boot = bootstrap_ci(&scores, resamples, seed)?;
        let p_value = paired_bootstrap_p(&scores, &baseline_scores, resamples, seed)?;
        rows.push(LeaderboardRow {
            method: name.clone(),
            accuracy: boot.point,
            ci_low: boot.ci_low,
            ci_high: boot.ci_high,
            delta_vs_baseline: boot.point - baseline_mean,
            p_value,
        });
    }
    rows.sort_by(|a, b| {
        b.accuracy
            .partial_cmp(&a.accuracy)
            .expect("finite accuracies")
            .then_with(|| a.method.cmp(&b.method))
    });
    Ok(rows)
}

fn default_mode() -> String {
    "exact".to_string()
}

/// Parsed pipeline config. Exactly one of `synth` and `input` supplies
/// the data.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineFile {
    pub seed: Option<u64>,
    /// Label scoring mode for loaded data: "exact" or "soft". Synthetic
    /// data is always exact.
    #[serde(default = "default_mode")]
    pub mode: String,
    pub synth: Option<SynthSection>,
    pub input: Option<InputSection>,
    #[serde(default)]
    pub aggregate: AggregateSection,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub analyze: AnalyzeSection,
    pub lcs: Option<LcsSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub families: Vec<FamilySpec>,
    pub rho_w: f64,
    pub rho_b: f64,
    pub n_questions: usize,
    pub answer_space: usize,
    /// Falls back to the pipeline seed.
    pub seed: Option<u64>,
}

/// Paths resolve relative to the config file's directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    pub predictions: Vec<PathBuf>,
    pub labels: PathBuf,
    pub families: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregateSection {
    pub methods: Vec<String>,
    /// "overall" or "per-type".
    pub weights: String,
    pub alpha: Option<f64>,
    pub tau: f64,
    pub rho: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for AggregateSection {
    fn default() -> Self {
        AggregateSection {
            methods: DEFAULT_METHODS.iter().map(|s| s.to_string()).collect(),
            weights: "overall".to_string(),
            alpha: None,
            tau: DEFAULT_TAU,
            rho: DEFAULT_RHO,
            gamma: DEFAULT_GAMMA,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl AggregateSection {
    pub fn params(&self) -> MethodParams {
        MethodParams {
            alpha: self.alpha,
            tau: self.tau,
            rho: self.rho,
            gamma: self.gamma,
        }
    }

    fn hfv_alpha(&self) -> f64 {
        self.alpha.unwrap_or(DEFAULT_ALPHA)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub baseline: String,
    pub resamples: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            baseline: "calibrated".to_string(),
            resamples: DEFAULT_RESAMPLES,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    pub reports: Vec<String>,
    /// Cluster count; defaults to the reference partition's family count.
    pub cluster_k: Option<usize>,
    /// Subset sizes for the scaling report; a default ladder otherwise.
    pub scaling_ks: Vec<usize>,
    pub scaling_samples: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        AnalyzeSection {
            reports: DEFAULT_REPORTS.iter().map(|s| s.to_string()).collect(),
            cluster_k: None,
            scaling_ks: Vec::new(),
            scaling_samples: 200,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LcsSection {
    pub k: usize,
    pub folds: usize,
    pub trees: usize,
    pub depth: usize,
    pub learning_rate: f64,
}

impl Default for LcsSection {
    fn default() -> Self {
        LcsSection {
            k: 5,
            folds: 5,
            trees: 200,
            depth: 5,
            learning_rate: 0.1,
        }
    }
}

/// How the pipeline was invoked; env/flag seeds are fallbacks below the
/// config's own seed.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub config_path: PathBuf,
    pub out_dir: PathBuf,
    pub seed_flag: Option<u64>,
    pub env_seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub manifest_hash: String,
    pub stages: Vec<String>,
    pub out_dir: PathBuf,
}

/// Seed precedence: config file, then flag, then FAMVOTE_SEED, then 0.
pub fn resolve_seed(config: Option<u64>, flag: Option<u64>, env: Option<u64>) -> u64 {
    config.or(flag).or(env).unwrap_or(0)
}

/// Runs all configured stages. On failure, partial artifacts are kept and
/// a FAILED marker with the error text is written to the output root.
pub fn run_pipeline(opts: &PipelineOptions) -> Result<PipelineSummary> {
    match run_pipeline_inner(opts) {
        Ok(summary) => Ok(summary),
        Err(err) => {
            let _ = fs::create_dir_all(&opts.out_dir);
            let _ = fs::write(opts.out_dir.join("FAILED"), format!("{err}\n"));
            Err(err)
        }
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|source| FamvoteError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
    }
    fs::write(path, bytes).map_err(|source| FamvoteError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// CSV table prefixed with a `# manifest <hash>` comment line.
fn write_csv(path: &Path, hash: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().from_writer(Vec::new());
    wtr.write_record(header).expect("csv header");
    for row in rows {
        wtr.write_record(row).expect("csv row");
    }
    let body = wtr.into_inner().expect("csv buffer");
    let mut bytes = format!("# manifest {hash}\n").into_bytes();
    bytes.extend_from_slice(&body);
    write_bytes(path, &bytes)
}

/// JSONL whose first line is a manifest header object.
fn write_jsonl<T: Serialize>(path: &Path, hash: &str, records: &[T]) -> Result<()> {
    let mut out = format!("{{\"manifest\":\"{hash}\"}}\n");
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

/// JSON document wrapping a report with its manifest hash.
fn write_json_report<T: Serialize>(path: &Path, hash: &str, report: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Wrapper<'a, T> {
        manifest: &'a str,
        report: &'a T,
    }
    let mut text = serde_json::to_string_pretty(&Wrapper {
        manifest: hash,
        report,
    })
    .expect("report serializes");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

#[derive(Serialize)]
struct OutcomeRecord<'a> {
    question_id: &'a str,
    chosen: &'a str,
    score: f64,
}

#[derive(Serialize)]
struct LcsRecord<'a> {
    question_id: &'a str,
    fold: usize,
    chosen: &'a str,
    score: f64,
}

struct LoadedData {
    predictions: Vec<PredictionSet>,
    labels: LabelSet,
    partition: FamilyPartition,
    stage: String,
}

fn acquire_data(
    config: &PipelineFile,
    config_dir: &Path,
    out_dir: &Path,
    seed: u64,
) -> Result<LoadedData> {
    match (&config.synth, &config.input) {
        (Some(_), Some(_)) => Err(FamvoteError::usage(
            "config declares both [synth] and [input]; pick one data source",
        )),
        (None, None) => Err(FamvoteError::usage(
            "config declares neither [synth] nor [input]; one data source is required",
        )),
        (Some(synth), None) => {
            if config.mode != "exact" {
                return Err(FamvoteError::usage(
                    "synthetic data is always exact mode; remove `mode`",
                ));
            }
            let synth_config = SynthConfig {
                families: synth.families.clone(),
                rho_w: synth.rho_w,
                rho_b: synth.rho_b,
                n_questions: synth.n_questions,
                answer_space: synth.answer_space,
                seed: synth.seed.unwrap_or(seed),
            };
            let out = generate(&synth_config)?;
            out.write_dataset(&out_dir.join("data"))?;
            Ok(LoadedData {
                predictions: out.predictions,
                labels: out.labels,
                partition: out.partition,
                stage: "data:synth".to_string(),
            })
        }
        (None, Some(input)) => {
            let mode: ScoreMode = config.mode.parse()?;
            let mut predictions = Vec::with_capacity(input.predictions.len());
            for rel in &input.predictions {
                predictions.push(load_predictions(&config_dir.join(rel), None)?);
            }
            let labels = load_labels(&config_dir.join(&input.labels), mode)?;
            let mut model_ids: Vec<String> =
                predictions.iter().map(|p| p.model_id.clone()).collect();
            model_ids.sort();
            let partition = match &input.families {
                Some(rel) => load_family_partition(&config_dir.join(rel), &model_ids)?,
                None => FamilyPartition::singletons(&model_ids),
            };
            Ok(LoadedData {
                predictions,
                labels,
                partition,
                stage: "data:load".to_string(),
            })
        }
    }
}

fn run_pipeline_inner(opts: &PipelineOptions) -> Result<PipelineSummary> {
    let config_text =
        fs::read_to_string(&opts.config_path).map_err(|source| FamvoteError::Io {
            path: opts.config_path.clone(),
            source,
        })?;
    let config: PipelineFile =
        toml::from_str(&config_text).map_err(|e| FamvoteError::Parse {
            path: opts.config_path.clone(),
            line: 0,
            message: e.to_string(),
        })?;
    let seed = resolve_seed(config.seed, opts.seed_flag, opts.env_seed);
    let config_dir = opts
        .config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();

    let mut manifest = RunManifest::new(
        format!(
            "famvote pipeline --config {} --out {}",
            opts.config_path.display(),
            opts.out_dir.display()
        ),
        vec![seed],
    )?;
    manifest.record_config(&opts.config_path)?;
    if let Some(input) = &config.input {
        for rel in &input.predictions {
            manifest.record_input(&config_dir.join(rel))?;
        }
        manifest.record_input(&config_dir.join(&input.labels))?;
        if let Some(rel) = &input.families {
            manifest.record_input(&config_dir.join(rel))?;
        }
    }
    let hash = manifest.save(&opts.out_dir.join("manifest.json"))?;
    let mut stages = Vec::new();

    let data = acquire_data(&config, &config_dir, &opts.out_dir, seed)?;
    stages.push(data.stage.clone());

    let ctx = EnsembleContext::build(&data.predictions, &data.labels, SoftVariant::LeaveOneOut)?;
    let partition = &data.partition;
    write_scores(&opts.out_dir.join("scores.csv"), &hash, &ctx)?;
    stages.push("score".to_string());

    let weight_kind: WeightKind = config.aggregate.weights.parse()?;
    let weights = make_weight_scheme(&ctx.matrix, weight_kind, config.aggregate.epsilon)?;

    let runs = run_aggregate(&opts.out_dir, &hash, &ctx, partition, &weights, &config.aggregate)?;
    stages.push(format!("aggregate({})", runs.len()));

    run_compare(
        &opts.out_dir,
        &hash,
        &ctx,
        &runs,
        &config.compare.baseline,
        config.compare.resamples,
        seed,
    )?;
    stages.push("compare".to_string());

    for report in &config.analyze.reports {
        run_analyze_report(
            &opts.out_dir,
            &hash,
            &ctx,
            partition,
            &weights,
            &config.aggregate,
            &config.analyze,
            &runs,
            report,
            seed,
        )?;
        stages.push(format!("analyze:{report}"));
    }

    if let Some(lcs) = &config.lcs {
        run_lcs_stage(&opts.out_dir, &hash, &ctx, partition, lcs, seed)?;
        stages.push("lcs".to_string());
    }

    Ok(PipelineSummary {
        manifest_hash: hash,
        stages,
        out_dir: opts.out_dir.clone(),
    })
}

/// Wide accuracy-matrix table: one row per model, one column per question.
pub fn write_scores(path: &Path, hash: &str, ctx: &EnsembleContext) -> Result<()> {
    let mut header = vec!["model_id"];
    for qid in &ctx.matrix.question_ids {
        header.push(qid.as_str());
    }
    let rows: Vec<Vec<String>> = ctx
        .matrix
        .model_ids
        .iter()
        .enumerate()
        .map(|(m, id)| {
            let mut row = vec![id.clone()];
            row.extend(ctx.matrix.scores[m].iter().map(|&s| fmt_f64(s)));
            row
        })
        .collect();
    write_csv(path, hash, &header, &rows)
}

/// Runs each named method once; shared by the aggregate stage and any
/// report that needs method outcomes without aggregate artifacts.
pub fn compute_runs(
    ctx: &EnsembleContext,
    partition: &FamilyPartition,
    weights: &WeightScheme,
    methods: &[String],
    params: &MethodParams,
) -> Result<Vec<(String, MethodRun)>> {
    if methods.is_empty() {
        return Err(FamvoteError::usage("no methods named"));
    }
    methods
        .iter()
        .map(|name| {
            let method = parse_method(name, params)?;
            Ok((name.clone(), run_method(ctx, partition, weights, method)?))
        })
        .collect()
}

/// Aggregate stage: per-question outcome JSONL per method plus a summary
/// table, under `<out>/aggregate/`.
pub fn run_aggregate(
    out_dir: &Path,
    hash: &str,
    ctx: &EnsembleContext,
    partition: &FamilyPartition,
    weights: &WeightScheme,
    agg: &AggregateSection,
) -> Result<Vec<(String, MethodRun)>> {
    let params = agg.params();
    let runs = compute_runs(ctx, partition, weights, &agg.methods, &params)?;
    let mut summary_rows = Vec::with_capacity(runs.len());
    for (name, run) in &runs {
        let records: Vec<OutcomeRecord<'_>> = run
            .outcomes
            .iter()
            .enumerate()
            .map(|(q, o)| OutcomeRecord {
                question_id: &ctx.matrix.question_ids[q],
                chosen: &o.chosen,
                score: ctx.answer_score(q, &o.chosen).unwrap_or(0.0),
            })
            .collect();
        write_jsonl(&out_dir.join("aggregate").join(format!("{name}.jsonl")), hash, &records)?;
        summary_rows.push(vec![
            name.clone(),
            parse_method(name, &params)?.label(),
            fmt_f64(outcome_accuracy(ctx, &run.outcomes)),
            ctx.num_questions().to_string(),
        ]);
    }
    write_csv(
        &out_dir.join("aggregate").join("summary.csv"),
        hash,
        &["method", "label", "accuracy", "questions"],
        &summary_rows,
    )?;
    Ok(runs)
}

/// Compare stage: accuracy leaderboard with CIs and paired-bootstrap
/// significance vs the baseline, at `<out>/compare/leaderboard.csv`.
pub fn run_compare(
    out_dir: &Path,
    hash: &str,
    ctx: &EnsembleContext,
    runs: &[(String, MethodRun)],
    baseline: &str,
    resamples: usize,
    seed: u64,
) -> Result<Vec<LeaderboardRow>> {
    let named: Vec<(String, Vec<VoteOutcome>)> = runs
        .iter()
        .map(|(name, run)| (name.clone(), run.outcomes.clone()))
        .collect();
    let rows = compare_methods(ctx, &named, baseline, resamples, seed)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                fmt_f64(r.accuracy),
                fmt_f64(r.ci_low),
                fmt_f64(r.ci_high),
                fmt_f64(r.delta_vs_baseline),
                fmt_f64(r.p_value),
            ]
        })
        .collect();
    write_csv(
        &out_dir.join("compare").join("leaderboard.csv"),
        hash,
        &["method", "accuracy", "ci_low", "ci_high", "delta_vs_baseline", "p_value"],
        &table,
    )?;
    Ok(rows)
}

fn find_run<'r>(runs: &'r [(String, MethodRun)], name: &str, report: &str) -> Result<&'r MethodRun> {
    runs.iter()
        .find(|(n, _)| n == name)
        .map(|(_, run)| run)
        .ok_or_else(|| {
            FamvoteError::usage(format!(
                "analyze report `{report}` needs method `{name}` in aggregate.methods"
            ))
        })
}

/// Analyze stage: one named diagnostic report under `<out>/analyze/`.
/// Reports that compare votes look up the needed methods in `runs`.
#[allow(clippy::too_many_arguments)]
pub fn run_analyze_report(
    out_dir: &Path,
    hash: &str,
    ctx: &EnsembleContext,
    partition: &FamilyPartition,
    weights: &WeightScheme,
    agg: &AggregateSection,
    analyze: &AnalyzeSection,
    runs: &[(String, MethodRun)],
    report: &str,
    seed: u64,
) -> Result<()> {
    let dir = out_dir.join("analyze");
    match report {
        "taxonomy" => {
            let baseline = find_run(runs, "calibrated", report)?;
            let best_id = ctx.matrix.model_ids[best_model_index(&ctx.matrix)].clone();
            let taxonomy = classify_taxonomy(
                ctx,
                &best_id,
                &baseline.outcomes,
                "calibrated",
                DEFAULT_CORRECT_THRESHOLD,
            )?;
            let tier_rows: Vec<Vec<String>> = Tier::ALL
                .iter()
                .map(|&t| {
                    vec![
                        t.to_string(),
                        taxonomy.counts.get(&t).copied().unwrap_or(0).to_string(),
                        fmt_f64(taxonomy.share(t)),
                        t.description().to_string(),
                    ]
                })
                .collect();
            write_csv(
                &dir.join("taxonomy.csv"),
                hash,
                &["tier", "count", "share", "description"],
                &tier_rows,
            )?;
            let acc_rows: Vec<Vec<String>> = runs
                .iter()
                .map(|(name, run)| {
                    let scores = score_outcomes(ctx, &run.outcomes);
                    let mut row = vec![name.clone()];
                    for &t in &Tier::ALL {
                        row.push(fmt_opt(taxonomy.accuracy_on(t, &scores)));
                    }
                    row.push(fmt_f64(outcome_accuracy(ctx, &run.outcomes)));
                    row
                })
                .collect();
            write_csv(
                &dir.join("tier_accuracy.csv"),
                hash,
                &["method", "T0", "T1", "T2", "T3", "T4", "overall"],
                &acc_rows,
            )?;
        }
        "correlation" => {
            let corr = correlation_report(&ctx.matrix, partition)?;
            write_correlation(&dir, hash, &corr)?;
        }
        "spectrum" => {
            let corr = correlation_report(&ctx.matrix, partition)?;
            let spectrum =
                crate::analysis::spectrum_report(&corr.to_matrix(), &corr.model_ids, partition)?;
            write_json_report(&dir.join("spectrum.json"), hash, &spectrum)?;
            let kish_rows: Vec<Vec<String>> = spectrum
                .kish
                .iter()
                .map(|k| {
                    vec![
                        k.family_id.clone(),
                        k.n_f.to_string(),
                        fmt_f64(k.mean_within_r),
                        fmt_f64(k.n_eff),
                    ]
                })
                .collect();
            write_csv(
                &dir.join("kish.csv"),
                hash,
                &["family_id", "n_f", "mean_within_r", "n_eff"],
                &kish_rows,
            )?;
        }
        "cluster" => {
            let corr = correlation_report(&ctx.matrix, partition)?;
            let matrix = corr.to_matrix();
            let k = analyze.cluster_k.unwrap_or(partition.num_families());
            let mut rows = Vec::new();
            for method in [ClusterMethod::Spectral, ClusterMethod::Ward] {
                let mut report =
                    cluster_models(&matrix, &corr.model_ids, partition, method, k, seed)?;
                let labels: Vec<usize> = corr
                    .model_ids
                    .iter()
                    .map(|id| report.assignment[id])
                    .collect();
                let discovered = partition_from_labels(&corr.model_ids, &labels)?;
                let hfv = run_method(
                    ctx,
                    &discovered,
                    weights,
                    Method::Hfv {
                        alpha: agg.hfv_alpha(),
                        tau: agg.tau,
                    },
                )?;
                report.hfv_accuracy = Some(outcome_accuracy(ctx, &hfv.outcomes));
                rows.push(vec![
                    method.to_string(),
                    k.to_string(),
                    fmt_f64(report.ari),
                    fmt_f64(report.nmi),
                    fmt_opt(report.hfv_accuracy),
                ]);
            }
            write_csv(
                &dir.join("cluster.csv"),
                hash,
                &["method", "k", "ari", "nmi", "hfv_accuracy"],
                &rows,
            )?;
        }
        "gap" => {
            let baseline = find_run(runs, "calibrated", report)?;
            let gap = gap_decomposition(ctx, &baseline.outcomes)?;
            let row = vec![vec![
                gap.best_model_id.clone(),
                fmt_f64(gap.best_single),
                fmt_f64(gap.ensemble),
                fmt_f64(gap.routing),
                fmt_f64(gap.oracle),
                fmt_opt(gap.voting_fraction),
                fmt_opt(gap.routing_fraction),
                fmt_opt(gap.selection_fraction),
            ]];
            write_csv(
                &dir.join("gap.csv"),
                hash,
                &[
                    "best_model_id",
                    "best_single",
                    "ensemble",
                    "routing",
                    "oracle",
                    "voting_fraction",
                    "routing_fraction",
                    "selection_fraction",
                ],
                &row,
            )?;
        }
        "balanced" => {
            let balanced = balanced_ensemble(ctx, partition, weights)?;
            let row = vec![vec![
                balanced.kept.join("|"),
                fmt_f64(balanced.full_accuracy),
                fmt_f64(balanced.balanced_accuracy),
                fmt_f64(balanced.delta),
            ]];
            write_csv(
                &dir.join("balanced.csv"),
                hash,
                &["kept", "full_accuracy", "balanced_accuracy", "delta"],
                &row,
            )?;
        }
        "scaling" => {
            let m = ctx.num_models();
            let ks: Vec<usize> = if analyze.scaling_ks.is_empty() {
                let ladder = [4, 6, 8, 12];
                let mut ks: Vec<usize> =
                    ladder.iter().copied().filter(|&k| k < m).collect();
                ks.push(m);
                ks
            } else {
                analyze.scaling_ks.clone()
            };
            let rows_report = scaling_curve(
                ctx,
                partition,
                weights,
                Method::Hfv {
                    alpha: agg.hfv_alpha(),
                    tau: agg.tau,
                },
                &ks,
                analyze.scaling_samples,
                seed,
            )?;
            let rows: Vec<Vec<String>> = rows_report
                .iter()
                .map(|r| {
                    vec![
                        r.k.to_string(),
                        r.samples.to_string(),
                        fmt_f64(r.mean_gap),
                        fmt_f64(r.frac_positive),
                        fmt_f64(r.imbalance_gap_corr),
                    ]
                })
                .collect();
            write_csv(
                &dir.join("scaling.csv"),
                hash,
                &["k", "samples", "mean_gap", "frac_positive", "imbalance_gap_corr"],
                &rows,
            )?;
        }
        "flips" => {
            let calibrated = find_run(runs, "calibrated", report)?;
            let hfv = find_run(runs, "hfv", report)?;
            let flips = answer_flip_report(
                ctx,
                &calibrated.outcomes,
                &hfv.outcomes,
                DEFAULT_CORRECT_THRESHOLD,
            )?;
            let mut rows = vec![vec![
                "all".to_string(),
                ctx.num_questions().to_string(),
                flips.wrong_to_correct.to_string(),
                flips.correct_to_wrong.to_string(),
                fmt_f64(
                    outcome_accuracy(ctx, &hfv.outcomes)
                        - outcome_accuracy(ctx, &calibrated.outcomes),
                ),
            ]];
            for (ty, t) in &flips.per_type {
                rows.push(vec![
                    ty.clone(),
                    t.questions.to_string(),
                    t.wrong_to_correct.to_string(),
                    t.correct_to_wrong.to_string(),
                    fmt_f64(t.delta_accuracy),
                ]);
            }
            write_csv(
                &dir.join("flips.csv"),
                hash,
                &["scope", "questions", "wrong_to_correct", "correct_to_wrong", "delta_accuracy"],
                &rows,
            )?;
        }
        "granularity" => {
            let partitions = vec![
                ("families".to_string(), partition.clone()),
                (
                    "singletons".to_string(),
                    FamilyPartition::singletons(&ctx.matrix.model_ids),
                ),
                (
                    "merged".to_string(),
                    FamilyPartition::merged(&ctx.matrix.model_ids, "pool"),
                ),
            ];
            let ablation =
                granularity_ablation(ctx, weights, &partitions, agg.hfv_alpha(), agg.tau)?;
            let rows: Vec<Vec<String>> = ablation
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r.name.clone(),
                        r.num_families.to_string(),
                        fmt_f64(r.hfv_accuracy),
                        fmt_f64(r.hfv_accuracy - ablation.calibrated_accuracy),
                    ]
                })
                .collect();
            write_csv(
                &dir.join("granularity.csv"),
                hash,
                &["partition", "num_families", "hfv_accuracy", "delta_vs_calibrated"],
                &rows,
            )?;
        }
        other => {
            return Err(FamvoteError::usage(format!(
                "unknown analyze report `{other}` (expected taxonomy|correlation|spectrum|cluster|gap|balanced|scaling|flips|granularity)"
            )))
        }
    }
    Ok(())
}

fn write_correlation(dir: &Path, hash: &str, corr: &CorrelationReport) -> Result<()> {
    let summary = vec![vec![
        fmt_opt(corr.within_family_mean),
        fmt_opt(corr.cross_family_mean),
        fmt_opt(corr.gap),
        fmt_opt(corr.mannwhitney_p),
        corr.constant_models.len().to_string(),
    ]];
    write_csv(
        &dir.join("correlation.csv"),
        hash,
        &["within_family_mean", "cross_family_mean", "gap", "mannwhitney_p", "constant_models"],
        &summary,
    )?;
    let mut header = vec!["model_id"];
    for id in &corr.model_ids {
        header.push(id.as_str());
    }
    let rows: Vec<Vec<String>> = corr
        .model_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let mut row = vec![id.clone()];
            row.extend(corr.corr[i].iter().map(|&r| fmt_f64(r)));
            row
        })
        .collect();
    write_csv(&dir.join("correlation_matrix.csv"), hash, &header, &rows)
}

/// LCS stage: cross-validated candidate-scoring artifacts under
/// `<out>/lcs/`.
pub fn run_lcs_stage(
    out_dir: &Path,
    hash: &str,
    ctx: &EnsembleContext,
    partition: &FamilyPartition,
    section: &LcsSection,
    seed: u64,
) -> Result<crate::lcs::LcsRun> {
    let config = LcsConfig {
        k: section.k,
        folds: section.folds,
        gbdt: GbdtConfig {
            n_estimators: section.trees,
            learning_rate: section.learning_rate,
            max_depth: section.depth,
        },
        seed,
        ..LcsConfig::default()
    };
    let run = run_lcs_cv(ctx, partition, &config)?;
    let dir = out_dir.join("lcs");
    let records: Vec<LcsRecord<'_>> = (0..ctx.num_questions())
        .map(|q| LcsRecord {
            question_id: &ctx.matrix.question_ids[q],
            fold: run.fold_of[q],
            chosen: &run.chosen[q],
            score: run.scores[q],
        })
        .collect();
    write_jsonl(&dir.join("predictions.jsonl"), hash, &records)?;
    let fold_rows: Vec<Vec<String>> = run
        .fold_accuracies
        .iter()
        .enumerate()
        .map(|(f, &acc)| vec![f.to_string(), fmt_f64(acc)])
        .collect();
    write_csv(&dir.join("folds.csv"), hash, &["fold", "accuracy"], &fold_rows)?;
    let imp_rows: Vec<Vec<String>> = run
        .feature_names
        .iter()
        .zip(&run.feature_importance)
        .map(|(name, &imp)| vec![name.clone(), fmt_f64(imp)])
        .collect();
    write_csv(&dir.join("importance.csv"), hash, &["feature", "importance"], &imp_rows)?;
    let summary = vec![vec![
        fmt_f64(run.accuracy),
        config.k.to_string(),
        config.folds.to_string(),
        section.trees.to_string(),
        run.degenerate_folds.len().to_string(),
    ]];
    write_csv(
        &dir.join("summary.csv"),
        hash,
        &["accuracy", "k", "folds", "trees", "degenerate_folds"],
        &summary,
    )?;
    Ok(run)
}
