//! Diagnostics over scored prediction pools: difficulty tiers, error
//! correlation, eigen spectrum, clustering against a reference partition,
//! oracle-gap decomposition, and ensemble ablations.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::cluster::{
    adjusted_rand_index, normalized_mutual_info, spectral_clusters, symmetric_dim, ward_clusters,
};
use crate::dataset::FamilyPartition;
use crate::error::{FamvoteError, Result};
use crate::scoring::{AccuracyMatrix, EnsembleContext};
use crate::stats::{mann_whitney_p, mean, pearson};
use crate::voting::{
    best_model_index, best_model_per_family, oracle_accuracy, outcome_accuracy, routing_oracle,
    run_method, score_outcomes, Method, VoteOutcome, WeightScheme,
};

/// Difficulty tier of one question relative to a pool and a baseline vote.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Tier {
    /// Every model correct.
    T0,
    /// Best model and baseline vote both correct.
    T1,
    /// Best model correct, baseline vote wrong.
    T2,
    /// Best model wrong, some other model correct.
    T3,
    /// No model correct.
    T4,
}

impl Tier {
    pub const ALL: [Tier; 5] = [Tier::T0, Tier::T1, Tier::T2, Tier::T3, Tier::T4];

    pub fn description(self) -> &'static str {
        match self {
            Tier::T0 => "trivial: every model correct",
            Tier::T1 => "easy: best model and baseline vote correct",
            Tier::T2 => "misleading: best model correct, baseline vote wrong",
            Tier::T3 => "hard: best model wrong, some model correct",
            Tier::T4 => "impossible: no model correct",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Tier::T0 => "T0",
            Tier::T1 => "T1",
            Tier::T2 => "T2",
            Tier::T3 => "T3",
            Tier::T4 => "T4",
        };
        f.write_str(name)
    }
}

/// Per-question difficulty tiers plus their shares.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonomyReport {
    /// Which vote defined "baseline correct" (metadata, e.g. "calibrated").
    pub baseline: String,
    pub best_model_id: String,
    pub threshold: f64,
    /// Tier per question, in matrix column order.
    pub tiers: Vec<Tier>,
    pub counts: BTreeMap<Tier, usize>,
    /// Tier shares; they sum to 1.
    pub shares: BTreeMap<Tier, f64>,
}

impl TaxonomyReport {
    /// Question columns in a tier.
    pub fn questions_in(&self, tier: Tier) -> Vec<usize> {
        self.tiers
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == tier)
            .map(|(q, _)| q)
            .collect()
    }

    pub fn share(&self, tier: Tier) -> f64 {
        self.shares.get(&tier).copied().unwrap_or(0.0)
    }

    /// Mean of `scores` restricted to a tier; None when the tier is empty.
    pub fn accuracy_on(&self, tier: Tier, scores: &[f64]) -> Option<f64> {
        let questions = self.questions_in(tier);
        if questions.is_empty() {
            return None;
        }
        Some(questions.iter().map(|&q| scores[q]).sum::<f64>() / questions.len() as f64)
    }
}

/// Classifies each question into a difficulty tier.
///
/// `baseline_outcomes` is the flat vote that defines "majority correct";
/// its name is recorded as metadata. When the taxonomy is defined against
/// the same baseline later evaluated on it, the baseline's accuracy on T2
/// is structurally zero.
pub fn classify_taxonomy(
    ctx: &EnsembleContext,
    best_model_id: &str,
    baseline_outcomes: &[VoteOutcome],
    baseline_name: &str,
    threshold: f64,
) -> Result<TaxonomyReport> {
    let best = ctx.matrix.model_index(best_model_id).ok_or_else(|| {
        FamvoteError::validation(format!("best model `{best_model_id}` not in matrix"))
    })?;
    let n = ctx.num_questions();
    if baseline_outcomes.len() != n {
        return Err(FamvoteError::contract(format!(
            "baseline has {} outcomes, matrix has {n} questions",
            baseline_outcomes.len()
        )));
    }
    if n == 0 {
        return Err(FamvoteError::validation("no questions to classify"));
    }
    let correct = ctx.matrix.correctness(threshold);
    let baseline_scores = score_outcomes(ctx, baseline_outcomes);
    let tiers: Vec<Tier> = (0..n)
        .map(|q| {
            let best_ok = correct.is_correct(best, q);
            let baseline_ok = baseline_scores[q] >= threshold;
            if correct.all_correct(q) {
                Tier::T0
            } else if best_ok && baseline_ok {
                Tier::T1
            } else if best_ok {
                Tier::T2
            } else if correct.any_correct(q) {
                Tier::T3
            } else {
                Tier::T4
            }
        })
        .collect();
    let mut counts: BTreeMap<Tier, usize> = Tier::ALL.iter().map(|&t| (t, 0)).collect();
    for &t in &tiers {
        *counts.get_mut(&t).expect("all tiers present") += 1;
    }
    let shares = counts
        .iter()
        .map(|(&t, &c)| (t, c as f64 / n as f64))
        .collect();
    Ok(TaxonomyReport {
        baseline: baseline_name.to_string(),
        best_model_id: best_model_id.to_string(),
        threshold,
        tiers,
        counts,
        shares,
    })
}

/// Pairwise Pearson correlation of per-question score vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub model_ids: Vec<String>,
    /// Symmetric with unit diagonal; constant-score models correlate 0.
    pub corr: Vec<Vec<f64>>,
    /// Mean r over same-family model pairs; None without such pairs.
    pub within_family_mean: Option<f64>,
    /// Mean r over cross-family model pairs; None without such pairs.
    pub cross_family_mean: Option<f64>,
    pub gap: Option<f64>,
    /// Two-sided Mann-Whitney p comparing within vs cross pair populations.
    pub mannwhitney_p: Option<f64>,
    /// Models whose score rows are constant (Pearson undefined there).
    pub constant_models: Vec<String>,
}

impl CorrelationReport {
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let m = self.model_ids.len();
        DMatrix::from_fn(m, m, |i, j| self.corr[i][j])
    }
}

pub fn correlation_report(
    matrix: &AccuracyMatrix,
    partition: &FamilyPartition,
) -> Result<CorrelationReport> {
    let m = matrix.num_models();
    if m < 2 || matrix.num_questions() < 2 {
        return Err(FamvoteError::validation(
            "correlation needs at least 2 models and 2 questions",
        ));
    }
    let constant_models: Vec<String> = (0..m)
        .filter(|&i| {
            let row = &matrix.scores[i];
            row.iter().all(|&s| s == row[0])
        })
        .map(|i| matrix.model_ids[i].clone())
        .collect();
    let mut corr = vec![vec![0.0; m]; m];
    let mut within = Vec::new();
    let mut cross = Vec::new();
    #[allow(clippy::needless_range_loop)]
    for i in 0..m {
        corr[i][i] = 1.0;
        let fam_i = family_of_checked(partition, &matrix.model_ids[i])?;
        for j in (i + 1)..m {
            let r = pearson(&matrix.scores[i], &matrix.scores[j]);
            corr[i][j] = r;
            corr[j][i] = r;
            let fam_j = family_of_checked(partition, &matrix.model_ids[j])?;
            if fam_i == fam_j {
                within.push(r);
            } else {
                cross.push(r);
            }
        }
    }
    let mean_of = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(mean(v))
        }
    };
    let within_family_mean = mean_of(&within);
    let cross_family_mean = mean_of(&cross);
    let gap = match (within_family_mean, cross_family_mean) {
        (Some(w), Some(c)) => Some(w - c),
        _ => None,
    };
    let mannwhitney_p = if within.is_empty() || cross.is_empty() {
        None
    } else {
        Some(mann_whitney_p(&within, &cross)?)
    };
    Ok(CorrelationReport {
        model_ids: matrix.model_ids.clone(),
        corr,
        within_family_mean,
        cross_family_mean,
        gap,
        mannwhitney_p,
        constant_models,
    })
}

fn family_of_checked<'a>(partition: &'a FamilyPartition, model_id: &str) -> Result<&'a str> {
    partition
        .family_of(model_id)
        .ok_or_else(|| FamvoteError::validation(format!("model `{model_id}` has no family")))
}

/// Kish effective sample size `n / (1 + (n - 1) rho)`.
///
/// Negative mean correlations clamp to zero, so the result never exceeds n.
pub fn kish_n_eff(n: usize, rho: f64) -> f64 {
    n as f64 / (1.0 + (n as f64 - 1.0) * rho.max(0.0))
}

/// Effective voter count per family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KishRow {
    pub family_id: String,
    pub n_f: usize,
    /// Mean within-family pairwise r; 0 for singletons (no pairs).
    pub mean_within_r: f64,
    pub n_eff: f64,
}

/// Eigen spectrum of a correlation matrix plus per-family Kish sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Descending eigenvalues; their sum is the trace (M for correlation).
    pub eigenvalues: Vec<f64>,
    pub trace: f64,
    pub top1_share: f64,
    pub top5_share: f64,
    /// (sum lambda)^2 / sum lambda^2, in [1, M].
    pub participation_ratio: f64,
    pub kish: Vec<KishRow>,
}

pub fn spectrum_report(
    corr: &DMatrix<f64>,
    model_ids: &[String],
    partition: &FamilyPartition,
) -> Result<SpectrumReport> {
    let m = symmetric_dim(corr, 1e-9)?;
    if m != model_ids.len() {
        return Err(FamvoteError::contract(format!(
            "correlation is {m}x{m} but {} model ids given",
            model_ids.len()
        )));
    }
    let eig = SymmetricEigen::new(corr.clone());
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    let trace: f64 = eigenvalues.iter().sum();
    if trace <= 0.0 {
        return Err(FamvoteError::contract(format!(
            "correlation trace {trace} is not positive"
        )));
    }
    let sum_sq: f64 = eigenvalues.iter().map(|l| l * l).sum();
    let top1_share = eigenvalues[0] / trace;
    let top5_share = eigenvalues.iter().take(5).sum::<f64>() / trace;
    let participation_ratio = trace * trace / sum_sq;
    let index_of: BTreeMap<&str, usize> = model_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut kish = Vec::with_capacity(partition.num_families());
    for (family_id, members) in partition.families() {
        let idx: Vec<usize> = members
            .iter()
            .map(|id| {
                index_of.get(id.as_str()).copied().ok_or_else(|| {
                    FamvoteError::contract(format!("family member `{id}` not in correlation"))
                })
            })
            .collect::<Result<_>>()?;
        let mut rs = Vec::new();
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[(a + 1)..] {
                rs.push(corr[(i, j)]);
            }
        }
        let mean_within_r = if rs.is_empty() { 0.0 } else { mean(&rs) };
        kish.push(KishRow {
            family_id: family_id.clone(),
            n_f: idx.len(),
            mean_within_r,
            n_eff: kish_n_eff(idx.len(), mean_within_r),
        });
    }
    Ok(SpectrumReport {
        eigenvalues,
        trace,
        top1_share,
        top5_share,
        participation_ratio,
        kish,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    Spectral,
    Ward,
}

impl fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusterMethod::Spectral => "spectral",
            ClusterMethod::Ward => "ward",
        })
    }
}

impl FromStr for ClusterMethod {
    type Err = FamvoteError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral" => Ok(ClusterMethod::Spectral),
            "ward" => Ok(ClusterMethod::Ward),
            other => Err(FamvoteError::usage(format!(
                "unknown cluster method `{other}` (expected spectral|ward)"
            ))),
        }
    }
}

/// A discovered model grouping and its agreement with the reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub method: ClusterMethod,
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
    pub ari: f64,
    pub nmi: f64,
    /// Filled by callers that re-run the family vote on the discovered
    /// partition.
    pub hfv_accuracy: Option<f64>,
}

pub fn cluster_models(
    corr: &DMatrix<f64>,
    model_ids: &[String],
    reference: &FamilyPartition,
    method: ClusterMethod,
    k: usize,
    seed: u64,
) -> Result<ClusteringReport> {
    if model_ids.len() != corr.nrows() {
        return Err(FamvoteError::contract(format!(
            "correlation is {}x{} but {} model ids given",
            corr.nrows(),
            corr.ncols(),
            model_ids.len()
        )));
    }
    let labels = match method {
        ClusterMethod::Spectral => spectral_clusters(corr, k, seed)?,
        ClusterMethod::Ward => ward_clusters(corr, k)?,
    };
    let family_index: BTreeMap<&str, usize> = reference
        .families()
        .iter()
        .enumerate()
        .map(|(i, (f, _))| (f.as_str(), i))
        .collect();
    let reference_labels: Vec<usize> = model_ids
        .iter()
        .map(|id| {
            family_of_checked(reference, id).map(|f| family_index[f])
        })
        .collect::<Result<_>>()?;
    Ok(ClusteringReport {
        method,
        k,
        assignment: model_ids
            .iter()
            .cloned()
            .zip(labels.iter().copied())
            .collect(),
        ari: adjusted_rand_index(&reference_labels, &labels),
        nmi: normalized_mutual_info(&reference_labels, &labels),
        hfv_accuracy: None,
    })
}

/// Builds a partition from discovered cluster labels (families c00, c01, ...).
pub fn partition_from_labels(model_ids: &[String], labels: &[usize]) -> Result<FamilyPartition> {
    if model_ids.len() != labels.len() {
        return Err(FamvoteError::contract(format!(
            "{} model ids but {} labels",
            model_ids.len(),
            labels.len()
        )));
    }
    let assignment: BTreeMap<String, String> = model_ids
        .iter()
        .zip(labels)
        .map(|(id, &l)| (id.clone(), format!("c{l:02}")))
        .collect();
    FamilyPartition::from_assignment(&assignment, model_ids, None)
}

/// How much of the oracle-vs-best-model gap each strategy captures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapReport {
    pub best_model_id: String,
    pub best_single: f64,
    pub ensemble: f64,
    /// Per-question max(best model, ensemble).
    pub routing: f64,
    /// Per-question best model.
    pub oracle: f64,
    /// (ensemble - best) / (oracle - best); None when oracle == best.
    pub voting_fraction: Option<f64>,
    /// (routing - best) / (oracle - best).
    pub routing_fraction: Option<f64>,
    /// (oracle - routing) / (oracle - best): what needs per-question
    /// model selection.
    pub selection_fraction: Option<f64>,
}

pub fn gap_decomposition(
    ctx: &EnsembleContext,
    ensemble_outcomes: &[VoteOutcome],
) -> Result<GapReport> {
    let best_idx = best_model_index(&ctx.matrix);
    let ensemble_scores = score_outcomes(ctx, ensemble_outcomes);
    if ensemble_scores.len() != ctx.num_questions() {
        return Err(FamvoteError::contract(format!(
            "ensemble has {} outcomes, matrix has {} questions",
            ensemble_scores.len(),
            ctx.num_questions()
        )));
    }
    let best_single = ctx.matrix.model_accuracy(best_idx);
    let ensemble = mean(&ensemble_scores);
    let routing = routing_oracle(&ctx.matrix, &ensemble_scores, best_idx)?;
    let oracle = oracle_accuracy(&ctx.matrix);
    let denom = oracle - best_single;
    let frac = |num: f64| if denom > 0.0 { Some(num / denom) } else { None };
    Ok(GapReport {
        best_model_id: ctx.matrix.model_ids[best_idx].clone(),
        best_single,
        ensemble,
        routing,
        oracle,
        voting_fraction: frac(ensemble - best_single),
        routing_fraction: frac(routing - best_single),
        selection_fraction: frac(oracle - routing),
    })
}

/// One best model per family, evaluated with a calibrated vote.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalancedReport {
    pub kept: Vec<String>,
    pub full_accuracy: f64,
    pub balanced_accuracy: f64,
    /// balanced - full.
    pub delta: f64,
}

pub fn balanced_ensemble(
    ctx: &EnsembleContext,
    partition: &FamilyPartition,
    weights: &WeightScheme,
) -> Result<BalancedReport> {
    let kept_idx = best_model_per_family(&ctx.matrix, partition)?;
    let kept = kept_idx
        .iter()
        .map(|&i| ctx.matrix.model_ids[i].clone())
        .collect();
    let full = run_method(ctx, partition, weights, Method::Calibrated)?;
    let balanced = run_method(ctx, partition, weights, Method::Dedup)?;
    let full_accuracy = outcome_accuracy(ctx, &full.outcomes);
    let balanced_accuracy = outcome_accuracy(ctx, &balanced.outcomes);
    Ok(BalancedReport {
        kept,
        full_accuracy,
        balanced_accuracy,
        delta: balanced_accuracy - full_accuracy,
    })
}

/// Gap behavior of random multi-family subsets of one size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingRow {
    pub k: usize,
    pub samples: usize,
    /// Mean over subsets of (method - calibrated) accuracy.
    pub mean_gap: f64,
    /// Fraction of subsets with a strictly positive gap.
    pub frac_positive: f64,
    /// Pearson correlation of gap with subset family-share imbalance.
    pub imbalance_gap_corr: f64,
}

const SUBSET_SAMPLE_TRIES: usize = 1000;

/// Samples `samples_per_k` random multi-family subsets per size in
/// `k_range` and compares `method` to the calibrated vote on each subset.
///
/// Weights are looked up per model, so the full-pool scheme is exact on
/// subsets; family stats are recomputed per subset. `k == M` degenerates
/// to the single full-pool subset.
pub fn scaling_curve(
    ctx: &EnsembleContext,
    partition: &FamilyPartition,
    weights: &WeightScheme,
    method: Method,
    k_range: &[usize],
    samples_per_k: usize,
    seed: u64,
) -> Result<Vec<ScalingRow>> {
    let m = ctx.num_models();
    if partition.num_families() < 2 {
        return Err(FamvoteError::validation(
            "scaling curve needs at least 2 families",
        ));
    }
    if samples_per_k == 0 {
        return Err(FamvoteError::usage("samples_per_k must be positive"));
    }
    let mut rows = Vec::with_capacity(k_range.len());
    for &k in k_range {
        if k < 2 || k > m {
            return Err(FamvoteError::usage(format!(
                "subset size k={k} must satisfy 2 <= k <= {m}"
            )));
        }
        let samples = if k == m { 1 } else { samples_per_k };
        let per_subset: Vec<(f64, f64)> = (0..samples)
            .into_par_iter()
            .map(|i| subset_gap(ctx, partition, weights, &method, k, seed, i as u64))
            .collect::<Result<_>>()?;
        let gaps: Vec<f64> = per_subset.iter().map(|&(g, _)| g).collect();
        let imbalances: Vec<f64> = per_subset.iter().map(|&(_, im)| im).collect();
        rows.push(ScalingRow {
            k,
            samples,
            mean_gap: mean(&gaps),
            frac_positive: gaps.iter().filter(|&&g| g > 0.0).count() as f64 / gaps.len() as f64,
            imbalance_gap_corr: pearson(&gaps, &imbalances),
        });
    }
    Ok(rows)
}

fn subset_gap(
    ctx: &EnsembleContext,
    partition: &FamilyPartition,
    weights: &WeightScheme,
    method: &Method,
    k: usize,
    seed: u64,
    index: u64,
) -> Result<(f64, f64)> {
    let m = ctx.num_models();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((k as u64) << 32) | index);
    let rows: Vec<usize> = if k == m {
        (0..m).collect()
    } else {
        let mut tries = 0;
        loop {
            let mut picked = rand::seq::index::sample(&mut rng, m, k).into_vec();
            picked.sort_unstable();
            if spans_multiple_families(ctx, partition, &picked)? {
                break picked;
            }
            tries += 1;
            if tries >= SUBSET_SAMPLE_TRIES {
                return Err(FamvoteError::validation(format!(
                    "could not sample a multi-family subset of size {k} in {SUBSET_SAMPLE_TRIES} tries"
                )));
            }
        }
    };
    let sub_ctx = restrict_context(ctx, &rows);
    let sub_ids = sub_ctx.matrix.model_ids.clone();
    let sub_partition = FamilyPartition::from_assignment(partition.assignment(), &sub_ids, None)?;
    let calibrated = run_method(&sub_ctx, &sub_partition, weights, Method::Calibrated)?;
    let other = run_method(&sub_ctx, &sub_partition, weights, *method)?;
    let gap = outcome_accuracy(&sub_ctx, &other.outcomes)
        - outcome_accuracy(&sub_ctx, &calibrated.outcomes);
    let max_family = sub_partition
        .families()
        .iter()
        .map(|(_, members)| members.len())
        .max()
        .unwrap_or(0);
    Ok((gap, max_family as f64 / k as f64))
}

fn spans_multiple_families(
    ctx: &EnsembleContext,
    partition: &FamilyPartition,
    rows: &[usize],
) -> Result<bool> {
    let first = family_of_checked(partition, &ctx.matrix.model_ids[rows[0]])?;
    for &r in &rows[1..] {
        if family_of_checked(partition, &ctx.matrix.model_ids[r])? != first {
            return Ok(true);
        }
    }
    Ok(false)
}

fn restrict_context(ctx: &EnsembleContext, rows: &[usize]) -> EnsembleContext {
    // Rows are ascending, so model_ids stay sorted.
    let matrix = AccuracyMatrix {
        model_ids: rows.iter().map(|&r| ctx.matrix.model_ids[r].clone()).collect(),
        question_ids: ctx.matrix.question_ids.clone(),
        question_types: ctx.matrix.question_types.clone(),
        scores: rows.iter().map(|&r| ctx.matrix.scores[r].clone()).collect(),
        mode: ctx.matrix.mode,
        soft_variant: ctx.matrix.soft_variant,
    };
    let answers = rows.iter().map(|&r| ctx.answers[r].clone()).collect();
    EnsembleContext { matrix, answers }
}

/// Flip counts per question type.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TypeFlips {
    pub questions: usize,
    pub wrong_to_correct: usize,
    pub correct_to_wrong: usize,
    /// Mean score of b minus mean score of a on this type.
    pub delta_accuracy: f64,
}

/// What changed between two runs' chosen answers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlipReport {
    /// Questions whose chosen answer differs.
    pub flips: usize,
    pub wrong_to_correct: usize,
    pub correct_to_wrong: usize,
    /// wrong_to_correct - correct_to_wrong.
    pub net: i64,
    pub per_type: BTreeMap<String, TypeFlips>,
}

pub fn answer_flip_report(
    ctx: &EnsembleContext,
    outcomes_a: &[VoteOutcome],
    outcomes_b: &[VoteOutcome],
    threshold: f64,
) -> Result<FlipReport> {
    let n = ctx.num_questions();
    if outcomes_a.len() != n || outcomes_b.len() != n {
        return Err(FamvoteError::contract(format!(
            "outcome lengths {} and {} do not both match {n} questions",
            outcomes_a.len(),
            outcomes_b.len()
        )));
    }
    let scores_a = score_outcomes(ctx, outcomes_a);
    let scores_b = score_outcomes(ctx, outcomes_b);
    let mut flips = 0;
    let mut w2c = 0;
    let mut c2w = 0;
    let mut per_type: BTreeMap<String, (usize, usize, usize, f64, f64)> = BTreeMap::new();
    for q in 0..n {
        let slot = per_type
            .entry(ctx.matrix.question_types[q].clone())
            .or_insert((0, 0, 0, 0.0, 0.0));
        slot.0 += 1;
        slot.3 += scores_a[q];
        slot.4 += scores_b[q];
        if outcomes_a[q].chosen != outcomes_b[q].chosen {
            flips += 1;
        }
        let a_ok = scores_a[q] >= threshold;
        let b_ok = scores_b[q] >= threshold;
        if !a_ok && b_ok {
            w2c += 1;
            slot.1 += 1;
        } else if a_ok && !b_ok {
            c2w += 1;
            slot.2 += 1;
        }
    }
    let per_type = per_type
        .into_iter()
        .map(|(ty, (count, tw2c, tc2w, sum_a, sum_b))| {
            (
                ty,
                TypeFlips {
                    questions: count,
                    wrong_to_correct: tw2c,
                    correct_to_wrong: tc2w,
                    delta_accuracy: (sum_b - sum_a) / count as f64,
                },
            )
        })
        .collect();
    Ok(FlipReport {
        flips,
        wrong_to_correct: w2c,
        correct_to_wrong: c2w,
        net: w2c as i64 - c2w as i64,
        per_type,
    })
}

/// Family-vote accuracy under one partition granularity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GranularityRow {
    pub name: String,
    pub num_families: usize,
    pub hfv_accuracy: f64,
}

/// Family-vote accuracy across partition granularities, with the flat
/// calibrated vote as the shared reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GranularityReport {
    pub calibrated_accuracy: f64,
    pub alpha: f64,
    pub tau: f64,
    pub rows: Vec<GranularityRow>,
}

/// Evaluates the family vote under each named partition with one fixed
/// weight scheme, so rows differ only in grouping.
pub fn granularity_ablation(
    ctx: &EnsembleContext,
    weights: &WeightScheme,
    partitions: &[(String, FamilyPartition)],
    alpha: f64,
    tau: f64,
) -> Result<GranularityReport> {
    if partitions.is_empty() {
        return Err(FamvoteError::usage("no partitions to compare"));
    }
    let reference_partition = &partitions[0].1;
    let calibrated = run_method(ctx, reference_partition, weights, Method::Calibrated)?;
    let calibrated_accuracy = outcome_accuracy(ctx, &calibrated.outcomes);
    let rows = partitions
        .iter()
        .map(|(name, partition)| {
            let run = run_method(ctx, partition, weights, Method::Hfv { alpha, tau })?;
            Ok(GranularityRow {
                name: name.clone(),
                num_families: partition.num_families(),
                hfv_accuracy: outcome_accuracy(ctx, &run.outcomes),
            })
        })
        .collect::<Result<_>>()?;
    Ok(GranularityReport {
        calibrated_accuracy,
        alpha,
        tau,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{LabelAnswers, LabelRecord, LabelSet, PredictionSet, ScoreMode};
    use crate::scoring::{SoftVariant, DEFAULT_CORRECT_THRESHOLD};
    use crate::voting::{make_weight_scheme, WeightKind, DEFAULT_EPSILON};

    /// Context from (model, [answers]) rows and (gold, type) columns.
    fn make_typed_ctx(rows: &[(&str, &[&str])], gold: &[(&str, &str)]) -> EnsembleContext {
        let preds: Vec<PredictionSet> = rows
            .iter()
            .map(|(model, answers)| {
                let entries = answers
                    .iter()
                    .enumerate()
                    .map(|(q, a)| (format!("q{q:03}"), a.to_string()))
                    .collect();
                PredictionSet::new(*model, entries)
            })
            .collect();
        let entries = gold
            .iter()
            .enumerate()
            .map(|(q, (g, ty))| {
                (
                    format!("q{q:03}"),
                    LabelRecord {
                        answers: LabelAnswers::Exact(g.to_string()),
                        question_type: ty.to_string(),
                    },
                )
            })
            .collect();
        let labels = LabelSet::new(ScoreMode::Exact, entries).unwrap();
        EnsembleContext::build(&preds, &labels, SoftVariant::LeaveOneOut).unwrap()
    }

    fn make_ctx(rows: &[(&str, &[&str])], gold: &[&str]) -> EnsembleContext {
        let typed: Vec<(&str, &str)> = gold.iter().map(|&g| (g, "other")).collect();
        make_typed_ctx(rows, &typed)
    }

    fn partition_of(groups: &[(&str, &[&str])]) -> FamilyPartition {
        let mut assignment = BTreeMap::new();
        let mut models = Vec::new();
        for (family, members) in groups {
            for m in *members {
                assignment.insert(m.to_string(), family.to_string());
                models.push(m.to_string());
            }
        }
        FamilyPartition::from_assignment(&assignment, &models, None).unwrap()
    }

    fn tiers_fixture() -> (EnsembleContext, Vec<VoteOutcome>) {
        // m1 is best (4/6, ties m2 but wins on id). On q2 the wrong "w"
        // ties m1's tally (ln2 + 0 vs ln2) and wins on supporter count,
        // so the baseline errs there while m1 is right: a T2 column.
        let ctx = make_ctx(
            &[
                ("m1", &["g", "g", "g", "x", "x", "g"]),
                ("m2", &["g", "g", "w", "g", "x", "g"]),
                ("m3", &["g", "x", "w", "g", "y", "g"]),
            ],
            &["g", "g", "g", "g", "g", "g"],
        );
        let weights = make_weight_scheme(&ctx.matrix, WeightKind::Overall, DEFAULT_EPSILON).unwrap();
        let run = run_method(
            &ctx,
            &FamilyPartition::singletons(&ctx.matrix.model_ids),
            &weights,
            Method::Calibrated,
        )
        .unwrap();
        (ctx, run.outcomes)
    }

    #[test]
    fn taxonomy_assigns_all_five_tiers() {
        let (ctx, baseline) = tiers_fixture();
        let report = classify_taxonomy(
            &ctx,
            "m1",
            &baseline,
            "calibrated",
            DEFAULT_CORRECT_THRESHOLD,
        )
        .unwrap();
        assert_eq!(
            report.tiers,
            vec![Tier::T0, Tier::T1, Tier::T2, Tier::T3, Tier::T4, Tier::T0]
        );
        let share_sum: f64 = report.shares.values().sum();
        assert!((share_sum - 1.0).abs() < 1e-9);
        assert_eq!(report.counts[&Tier::T0], 2);
        assert_eq!(report.counts[&Tier::T2], 1);
    }

    #[test]
    fn baseline_is_structurally_wrong_on_t2() {
        let (ctx, baseline) = tiers_fixture();
        let report = classify_taxonomy(
            &ctx,
            "m1",
            &baseline,
            "calibrated",
            DEFAULT_CORRECT_THRESHOLD,
        )
        .unwrap();
        let baseline_scores = score_outcomes(&ctx, &baseline);
        assert_eq!(report.accuracy_on(Tier::T2, &baseline_scores), Some(0.0));
        // Best model is wrong on all of T3 and T4 by definition.
        let best_row = &ctx.matrix.scores[ctx.matrix.model_index("m1").unwrap()];
        for tier in [Tier::T3, Tier::T4] {
            for q in report.questions_in(tier) {
                assert!(best_row[q] < DEFAULT_CORRECT_THRESHOLD);
            }
        }
    }

    #[test]
    fn duplicated_rows_correlate_exactly() {
        let ctx = make_ctx(
            &[
                ("m1", &["g", "w", "g", "w", "g", "g"]),
                ("m2", &["g", "w", "g", "w", "g", "g"]),
                ("m3", &["w", "g", "g", "g", "w", "g"]),
            ],
            &["g", "g", "g", "g", "g", "g"],
        );
        let partition = partition_of(&[("a", &["m1", "m2"]), ("b", &["m3"])]);
        let report = correlation_report(&ctx.matrix, &partition).unwrap();
        assert_eq!(report.within_family_mean, Some(1.0));
        assert!(report.constant_models.is_empty());
        // Symmetric with unit diagonal.
        for i in 0..3 {
            assert_eq!(report.corr[i][i], 1.0);
            for j in 0..3 {
                assert_eq!(report.corr[i][j], report.corr[j][i]);
            }
        }
    }

    #[test]
    fn constant_rows_are_flagged_and_correlate_zero() {
        let ctx = make_ctx(
            &[
                ("always", &["g", "g", "g", "g"]),
                ("m2", &["g", "w", "g", "w"]),
                ("m3", &["w", "g", "g", "w"]),
            ],
            &["g", "g", "g", "g"],
        );
        let partition = partition_of(&[("a", &["always", "m2"]), ("b", &["m3"])]);
        let report = correlation_report(&ctx.matrix, &partition).unwrap();
        assert_eq!(report.constant_models, vec!["always".to_string()]);
        assert_eq!(report.within_family_mean, Some(0.0));
    }

    #[test]
    fn spectrum_identity_and_rank_one() {
        let m = 6;
        let ids: Vec<String> = (0..m).map(|i| format!("m{i}")).collect();
        let partition = FamilyPartition::singletons(&ids);
        let identity = DMatrix::identity(m, m);
        let r = spectrum_report(&identity, &ids, &partition).unwrap();
        assert!((r.participation_ratio - m as f64).abs() < 1e-9);
        assert!((r.top1_share - 1.0 / m as f64).abs() < 1e-9);
        assert!((r.trace - m as f64).abs() < 1e-9);

        let ones = DMatrix::from_element(m, m, 1.0);
        let r = spectrum_report(&ones, &ids, &partition).unwrap();
        assert!((r.participation_ratio - 1.0).abs() < 1e-9);
        assert!((r.top1_share - 1.0).abs() < 1e-9);
        assert!((r.eigenvalues[0] - m as f64).abs() < 1e-9);
    }

    #[test]
    fn kish_closed_form() {
        assert_eq!(kish_n_eff(5, 1.0), 1.0);
        assert_eq!(kish_n_eff(5, 0.0), 5.0);
        assert!((kish_n_eff(4, 0.5) - 1.6).abs() < 1e-12);
        // Negative correlations clamp rather than exceeding n.
        assert_eq!(kish_n_eff(5, -0.3), 5.0);
    }

    #[test]
    fn spectrum_rejects_asymmetric() {
        let ids = vec!["m0".to_string(), "m1".to_string()];
        let partition = FamilyPartition::singletons(&ids);
        let mut corr = DMatrix::identity(2, 2);
        corr[(0, 1)] = 0.5;
        assert!(spectrum_report(&corr, &ids, &partition).is_err());
    }

    #[test]
    fn clustering_recovers_planted_reference() {
        let ids: Vec<String> = (0..6).map(|i| format!("m{i}")).collect();
        let partition = partition_of(&[
            ("a", &["m0", "m1", "m2"]),
            ("b", &["m3", "m4", "m5"]),
        ]);
        let corr = DMatrix::from_fn(6, 6, |i, j| {
            if i == j {
                1.0
            } else if (i < 3) == (j < 3) {
                0.9
            } else {
                0.1
            }
        });
        for method in [ClusterMethod::Spectral, ClusterMethod::Ward] {
            let report = cluster_models(&corr, &ids, &partition, method, 2, 3).unwrap();
            assert_eq!(report.ari, 1.0, "{method}");
            assert_eq!(report.nmi, 1.0, "{method}");
        }
    }

    #[test]
    fn gap_fractions_bracket_strategies() {
        // m1 is best with 2/4; the calibrated vote fixes one more.
        let ctx = make_ctx(
            &[
                ("m1", &["g", "g", "w", "w"]),
                ("m2", &["g", "x", "g", "x"]),
                ("m3", &["g", "x", "g", "x"]),
            ],
            &["g", "g", "g", "g"],
        );
        let weights = WeightScheme::uniform(&ctx.matrix.model_ids, 1.0);
        let partition = FamilyPartition::singletons(&ctx.matrix.model_ids);
        let run = run_method(&ctx, &partition, &weights, Method::Calibrated).unwrap();
        let report = gap_decomposition(&ctx, &run.outcomes).unwrap();
        assert_eq!(report.best_model_id, "m1");
        assert_eq!(report.best_single, 0.5);
        assert_eq!(report.oracle, 0.75);
        assert!(report.routing >= report.best_single.max(report.ensemble) - 1e-12);
        assert!(report.oracle >= report.routing - 1e-12);
        let voting = report.voting_fraction.unwrap();
        let routing = report.routing_fraction.unwrap();
        let selection = report.selection_fraction.unwrap();
        assert!(voting <= routing + 1e-12);
        assert!((routing + selection - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gap_fractions_undefined_when_oracle_equals_best() {
        let ctx = make_ctx(
            &[("m1", &["g", "g"]), ("m2", &["g", "w"])],
            &["g", "g"],
        );
        let weights = WeightScheme::uniform(&ctx.matrix.model_ids, 1.0);
        let partition = FamilyPartition::singletons(&ctx.matrix.model_ids);
        let run = run_method(&ctx, &partition, &weights, Method::Calibrated).unwrap();
        let report = gap_decomposition(&ctx, &run.outcomes).unwrap();
        assert_eq!(report.voting_fraction, None);
        assert_eq!(report.routing_fraction, None);
    }

    #[test]
    fn balanced_ensemble_keeps_best_per_family() {
        let ctx = make_ctx(
            &[
                ("m1", &["g", "g", "g", "w"]),
                ("m2", &["g", "g", "w", "w"]),
                ("m3", &["g", "w", "g", "g"]),
            ],
            &["g", "g", "g", "g"],
        );
        let weights = make_weight_scheme(&ctx.matrix, WeightKind::Overall, DEFAULT_EPSILON).unwrap();
        // m1 (0.75) beats m2 (0.5) inside family a.
        let partition = partition_of(&[("a", &["m1", "m2"]), ("b", &["m3"])]);
        let report = balanced_ensemble(&ctx, &partition, &weights).unwrap();
        assert_eq!(report.kept, vec!["m1".to_string(), "m3".to_string()]);

        // Singleton families keep everything and change nothing.
        let singles = FamilyPartition::singletons(&ctx.matrix.model_ids);
        let report = balanced_ensemble(&ctx, &singles, &weights).unwrap();
        assert_eq!(report.kept.len(), 3);
        assert_eq!(report.delta, 0.0);
    }

    #[test]
    fn scaling_full_pool_is_single_subset() {
        let ctx = make_ctx(
            &[
                ("m1", &["g", "g", "w", "g"]),
                ("m2", &["g", "w", "g", "g"]),
                ("m3", &["w", "g", "g", "g"]),
                ("m4", &["g", "g", "g", "w"]),
            ],
            &["g", "g", "g", "g"],
        );
        let weights = make_weight_scheme(&ctx.matrix, WeightKind::Overall, DEFAULT_EPSILON).unwrap();
        let partition = partition_of(&[("a", &["m1", "m2"]), ("b", &["m3", "m4"])]);
        let rows = scaling_curve(
            &ctx,
            &partition,
            &weights,
            Method::Hfv { alpha: 1.0, tau: 0.0 },
            &[4],
            50,
            9,
        )
        .unwrap();
        assert_eq!(rows[0].samples, 1);
        let full_cal = run_method(&ctx, &partition, &weights, Method::Calibrated).unwrap();
        let full_hfv =
            run_method(&ctx, &partition, &weights, Method::Hfv { alpha: 1.0, tau: 0.0 }).unwrap();
        let expected = outcome_accuracy(&ctx, &full_hfv.outcomes)
            - outcome_accuracy(&ctx, &full_cal.outcomes);
        assert!((rows[0].mean_gap - expected).abs() < 1e-12);
    }

    #[test]
    fn scaling_self_comparison_is_all_zero() {
        let ctx = make_ctx(
            &[
                ("m1", &["g", "g", "w"]),
                ("m2", &["g", "w", "g"]),
                ("m3", &["w", "g", "g"]),
            ],
            &["g", "g", "g"],
        );
        let weights = make_weight_scheme(&ctx.matrix, WeightKind::Overall, DEFAULT_EPSILON).unwrap();
        let partition = partition_of(&[("a", &["m1", "m2"]), ("b", &["m3"])]);
        let rows =
            scaling_curve(&ctx, &partition, &weights, Method::Calibrated, &[2, 3], 20, 1).unwrap();
        for row in rows {
            assert_eq!(row.mean_gap, 0.0);
            assert_eq!(row.frac_positive, 0.0);
        }
    }

    #[test]
    fn flip_report_counts_transitions() {
        let ctx = make_typed_ctx(
            &[
                ("m1", &["g", "g", "w", "g", "w"]),
                ("m2", &["g", "w", "g", "g", "w"]),
            ],
            &[
                ("g", "number"),
                ("g", "number"),
                ("g", "other"),
                ("g", "other"),
                ("g", "other"),
            ],
        );
        let weights = WeightScheme::uniform(&ctx.matrix.model_ids, 1.0);
        let partition = FamilyPartition::singletons(&ctx.matrix.model_ids);
        let a = run_method(&ctx, &partition, &weights, Method::Majority).unwrap();
        // b: pick m1's answers by dropping m2 to ~zero weight.
        let skewed = WeightScheme::explicit(&[("m1", 1.0), ("m2", 1e-9)]);
        let b = run_method(&ctx, &partition, &skewed, Method::Calibrated).unwrap();

        let identical = answer_flip_report(&ctx, &a.outcomes, &a.outcomes, 0.5).unwrap();
        assert_eq!(identical.flips, 0);
        assert_eq!(identical.net, 0);

        let report = answer_flip_report(&ctx, &a.outcomes, &b.outcomes, 0.5).unwrap();
        // q1: tie g/w resolves to g in a; b follows m1 to g (no change).
        // q2: tie g/w resolves to g in a; b follows m1 to w (correct->wrong).
        assert_eq!(report.correct_to_wrong, 1);
        assert_eq!(report.wrong_to_correct, 0);
        assert_eq!(report.net, -1);
        assert_eq!(report.per_type["other"].correct_to_wrong, 1);
        assert_eq!(report.per_type["number"].correct_to_wrong, 0);
        assert!(report.per_type["other"].delta_accuracy < 0.0);
        assert_eq!(report.per_type["number"].delta_accuracy, 0.0);
    }

    #[test]
    fn granularity_extremes_equal_flat_vote() {
        let ctx = make_ctx(
            &[
                ("m1", &["g", "g", "w", "g"]),
                ("m2", &["g", "w", "g", "g"]),
                ("m3", &["w", "g", "g", "w"]),
            ],
            &["g", "g", "g", "g"],
        );
        let weights = make_weight_scheme(&ctx.matrix, WeightKind::Overall, DEFAULT_EPSILON).unwrap();
        let ids = ctx.matrix.model_ids.clone();
        let partitions = vec![
            ("singletons".to_string(), FamilyPartition::singletons(&ids)),
            ("merged".to_string(), FamilyPartition::merged(&ids, "all")),
        ];
        let report = granularity_ablation(&ctx, &weights, &partitions, 1.0, 0.0).unwrap();
        assert_eq!(report.rows[0].hfv_accuracy, report.calibrated_accuracy);
        assert_eq!(report.rows[1].hfv_accuracy, report.calibrated_accuracy);
        assert_eq!(report.rows[0].num_families, 3);
        assert_eq!(report.rows[1].num_families, 1);
    }
}
