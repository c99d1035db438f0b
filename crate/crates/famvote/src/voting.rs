//! Training-free aggregation methods over a scored model pool.
//!
//! All methods are weighted pluralities over normalized answers; they
//! differ only in how the per-model (or per-family) weights are built.
//! Every vote op is a pure per-question function, so drivers may
//! parallelize over questions freely.
//!
//! Tie-breaking everywhere: highest tally, then larger supporter count,
//! then lexicographically smallest normalized answer.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FamilyPartition;
use crate::error::{FamvoteError, Result};
use crate::scoring::{AccuracyMatrix, EnsembleContext};

/// Default log-odds clip fraction.
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Default family-size discount exponent for redundancy-corrected votes.
pub const DEFAULT_RHO: f64 = 0.4;

/// Default family-quality exponent for quality-weighted votes.
pub const DEFAULT_GAMMA: f64 = 1.0;

/// log(p / (1-p)) with p clipped to [eps, 1-eps].
pub fn log_odds(p: f64, epsilon: f64) -> f64 {
    let p = p.clamp(epsilon, 1.0 - epsilon);
    (p / (1.0 - p)).ln()
}

/// sign(w) * |w|^alpha; exact passthrough at alpha = 1.
pub fn signed_pow(w: f64, alpha: f64) -> f64 {
    if alpha == 1.0 {
        return w;
    }
    if w >= 0.0 {
        w.powf(alpha)
    } else {
        -((-w).powf(alpha))
    }
}

/// Weight granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Overall,
    PerType,
}

impl std::str::FromStr for WeightKind {
    type Err = FamvoteError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overall" => Ok(WeightKind::Overall),
            "per-type" | "per_type" => Ok(WeightKind::PerType),
            other => Err(FamvoteError::usage(format!(
                "unknown weight kind `{other}` (expected `overall` or `per-type`)"
            ))),
        }
    }
}

/// Per-model log-odds weights, optionally per question type.
///
/// Per-type lookups fall back to the model's overall weight when the
/// (model, type) cell was never seen (possible on small training folds).
#[derive(Debug, Clone)]
pub struct WeightScheme {
    pub kind: WeightKind,
    pub epsilon: f64,
    overall: BTreeMap<String, f64>,
    per_type: BTreeMap<(String, String), f64>,
}

impl WeightScheme {
    pub fn weight(&self, model_id: &str, question_type: &str) -> Result<f64> {
        let overall = self.overall.get(model_id).copied().ok_or_else(|| {
            FamvoteError::contract(format!("no weight for model `{model_id}`"))
        })?;
        match self.kind {
            WeightKind::Overall => Ok(overall),
            WeightKind::PerType => Ok(self
                .per_type
                .get(&(model_id.to_string(), question_type.to_string()))
                .copied()
                .unwrap_or(overall)),
        }
    }

    /// Multiplies every weight by c (argmax invariance checks).
    pub fn scaled(&self, c: f64) -> WeightScheme {
        WeightScheme {
            kind: self.kind,
            epsilon: self.epsilon,
            overall: self.overall.iter().map(|(k, v)| (k.clone(), v * c)).collect(),
            per_type: self
                .per_type
                .iter()
                .map(|(k, v)| (k.clone(), v * c))
                .collect(),
        }
    }

    #[cfg(test)]
    pub(crate) fn uniform(model_ids: &[String], w: f64) -> WeightScheme {
        WeightScheme {
            kind: WeightKind::Overall,
            epsilon: DEFAULT_EPSILON,
            overall: model_ids.iter().map(|m| (m.clone(), w)).collect(),
            per_type: BTreeMap::new(),
        }
    }

    #[cfg(test)]
    pub(crate) fn explicit(weights: &[(&str, f64)]) -> WeightScheme {
        WeightScheme {
            kind: WeightKind::Overall,
            epsilon: DEFAULT_EPSILON,
            overall: weights
                .iter()
                .map(|(m, w)| (m.to_string(), *w))
                .collect(),
            per_type: BTreeMap::new(),
        }
    }
}

/// Builds log-odds weights from matrix accuracies, optionally restricted to
/// a column subset (training folds).
pub fn make_weight_scheme_on(
    matrix: &AccuracyMatrix,
    kind: WeightKind,
    epsilon: f64,
    columns: Option<&[usize]>,
) -> Result<WeightScheme> {
    if matrix.num_models() == 0 || matrix.num_questions() == 0 {
        return Err(FamvoteError::validation("matrix is empty"));
    }
    if !(0.0 < epsilon && epsilon < 0.5) {
        return Err(FamvoteError::validation(format!(
            "epsilon {epsilon} out of (0, 0.5)"
        )));
    }
    let all: Vec<usize>;
    let cols: &[usize] = match columns {
        Some(c) => c,
        None => {
            all = (0..matrix.num_questions()).collect();
            &all
        }
    };
    if cols.is_empty() {
        return Err(FamvoteError::validation("no columns to compute weights on"));
    }
    let mut overall = BTreeMap::new();
    let mut per_type = BTreeMap::new();
    for (m, model_id) in matrix.model_ids.iter().enumerate() {
        let acc = matrix.model_accuracy_on(m, cols);
        overall.insert(model_id.clone(), log_odds(acc, epsilon));
        if kind == WeightKind::PerType {
            let mut by_type: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for &q in cols {
                by_type
                    .entry(matrix.question_types[q].as_str())
                    .or_default()
                    .push(q);
            }
            for (ty, ty_cols) in by_type {
                let acc = matrix.model_accuracy_on(m, &ty_cols);
                per_type.insert((model_id.clone(), ty.to_string()), log_odds(acc, epsilon));
            }
        }
    }
    Ok(WeightScheme {
        kind,
        epsilon,
        overall,
        per_type,
    })
}

/// Builds log-odds weights over the full dataset.
pub fn make_weight_scheme(
    matrix: &AccuracyMatrix,
    kind: WeightKind,
    epsilon: f64,
) -> Result<WeightScheme> {
    make_weight_scheme_on(matrix, kind, epsilon, None)
}

/// Per-family statistics: internal-ensemble accuracy, weight, quality, size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyStat {
    pub family_id: String,
    /// Accuracy of the family's internal calibrated vote.
    pub p_f: f64,
    /// log-odds of clipped p_f.
    pub w_f: f64,
    /// Max member accuracy.
    pub q_f: f64,
    pub n_f: usize,
}

#[derive(Debug, Clone)]
pub struct FamilyStats {
    stats: BTreeMap<String, FamilyStat>,
}

impl FamilyStats {
    pub fn get(&self, family_id: &str) -> Result<&FamilyStat> {
        self.stats.get(family_id).ok_or_else(|| {
            FamvoteError::contract(format!("no stats for family `{family_id}`"))
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &FamilyStat> {
        self.stats.values()
    }

    #[cfg(test)]
    pub(crate) fn from_list(stats: Vec<FamilyStat>) -> FamilyStats {
        FamilyStats {
            stats: stats.into_iter().map(|s| (s.family_id.clone(), s)).collect(),
        }
    }
}

/// Computes family stats by running each family's internal calibrated vote
/// over `columns` (full dataset when None) and scoring the winners.
pub fn build_family_stats(
    ctx: &EnsembleContext,
    partition: &FamilyPartition,
    weights: &WeightScheme,
    epsilon: f64,
    columns: Option<&[usize]>,
) -> Result<FamilyStats> {
    let all: Vec<usize>;
    let cols: &[usize] = match columns {
        Some(c) => c,
        None => {
            all = (0..ctx.num_questions()).collect();
            &all
        }
    };
    if cols.is_empty() {
        return Err(FamvoteError::validation("no columns to compute family stats on"));
    }
    let mut stats = BTreeMap::new();
    for (family_id, members) in partition.families() {
        let member_idx = member_indices(ctx, members)?;
        let mut score_sum = 0.0;
        for &q in cols {
            let outcome = family_stage1_vote(ctx, weights, &member_idx, q)?;
            let score = ctx.answer_score(q, &outcome.chosen).ok_or_else(|| {
                FamvoteError::contract(format!(
                    "stage-1 winner `{}` has no supporter on question {q}",
                    outcome.chosen
                ))
            })?;
            score_sum += score;
        }
        let p_f = score_sum / cols.len() as f64;
        let q_f = member_idx
            .iter()
            .map(|&m| ctx.matrix.model_accuracy_on(m, cols))
            .fold(f64::NEG_INFINITY, f64::max);
        stats.insert(
            family_id.clone(),
            FamilyStat {
                family_id: family_id.clone(),
                p_f,
                w_f: log_odds(p_f, epsilon),
                q_f,
                n_f: member_idx.len(),
            },
        );
    }
    Ok(FamilyStats { stats })
}

fn member_indices(ctx: &EnsembleContext, members: &[String]) -> Result<Vec<usize>> {
    members
        .iter()
        .map(|m| {
            ctx.matrix.model_index(m).ok_or_else(|| {
                FamvoteError::contract(format!("family member `{m}` not in matrix"))
            })
        })
        .collect()
}

/// One question's aggregation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub chosen: String,
    /// top-1 tally minus top-2 tally; unanimous outcomes report their total
    /// tally floored at zero.
    pub margin: f64,
    pub tally: BTreeMap<String, f64>,
    pub supporters: BTreeMap<String, Vec<String>>,
}

/// Candidate ordering: higher tally, then more supporters, then
/// lexicographically smaller answer. Shared by every vote op and by the
/// learned scorer's candidate ranking.
pub fn candidate_order(
    a: (&str, f64, usize),
    b: (&str, f64, usize),
) -> std::cmp::Ordering {
    b.1.partial_cmp(&a.1)
        .expect("tallies are finite")
        .then_with(|| b.2.cmp(&a.2))
        .then_with(|| a.0.cmp(b.0))
}

/// Builds a VoteOutcome from weighted ballots in a fixed order.
///
/// Ballots must be supplied in a canonical order (ascending model index or
/// family id); the tally accumulates left to right, so identical ballots
/// yield bit-identical outcomes.
fn outcome_from_ballots(ballots: &[(String, f64, &str)]) -> VoteOutcome {
    let mut tally: BTreeMap<String, f64> = BTreeMap::new();
    let mut supporters: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (answer, weight, voter) in ballots {
        *tally.entry(answer.clone()).or_insert(0.0) += *weight;
        supporters
            .entry(answer.clone())
            .or_default()
            .push(voter.to_string());
    }
    let mut ranked: Vec<(&str, f64, usize)> = tally
        .iter()
        .map(|(a, &t)| (a.as_str(), t, supporters[a].len()))
        .collect();
    ranked.sort_by(|a, b| candidate_order(*a, *b));
    let chosen = ranked[0].0.to_string();
    let margin = if ranked.len() >= 2 {
        ranked[0].1 - ranked[1].1
    } else {
        ranked[0].1.max(0.0)
    };
    VoteOutcome {
        chosen,
        margin,
        tally,
        supporters,
    }
}

fn weighted_vote(
    ctx: &EnsembleContext,
    weights: &WeightScheme,
    participants: &[usize],
    question: usize,
    weight_of: impl Fn(usize, f64) -> f64,
) -> Result<VoteOutcome> {
    let qtype = &ctx.matrix.question_types[question];
    let mut ballots = Vec::with_capacity(participants.len());
    for &m in participants {
        let base = weights.weight(&ctx.matrix.model_ids[m], qtype)?;
        ballots.push((
            ctx.answers[m][question].clone(),
            weight_of(m, base),
            ctx.matrix.model_ids[m].as_str(),
        ));
    }
    Ok(outcome_from_ballots(&ballots))
}

/// Unweighted plurality over normalized answers.
pub fn majority_vote(ctx: &EnsembleContext, question: usize) -> VoteOutcome {
    let ballots: Vec<(String, f64, &str)> = (0..ctx.num_models())
        .map(|m| {
            (
                ctx.answers[m][question].clone(),
                1.0,
                ctx.matrix.model_ids[m].as_str(),
            )
        })
        .collect();
    outcome_from_ballots(&ballots)
}

/// Weighted plurality with per-model log-odds weights.
pub fn calibrated_vote(
    ctx: &EnsembleContext,
    weights: &WeightScheme,
    question: usize,
) -> Result<VoteOutcome> {
    let participants: Vec<usize> = (0..ctx.num_models()).collect();
    weighted_vote(ctx, weights, &participants, question, |_, w| w)
}

/// Highest-accuracy model per family (ties: lexicographically smallest id).
pub fn best_model_per_family(
    matrix: &AccuracyMatrix,
    partition: &FamilyPartition,
) -> Result<Vec<usize>> {
    let mut kept = Vec::with_capacity(partition.num_families());
    for (family_id, members) in partition.families() {
        let mut best: Option<(usize, f64)> = None;
        for member in members {
            let m = matrix.model_index(member).ok_or_else(|| {
                FamvoteError::contract(format!(
                    "family `{family_id}` member `{member}` not in matrix"
                ))
            })?;
            let acc = matrix.model_accuracy(m);
            let replace = match best {
                None => true,
                Some((bm, bacc)) => {
                    acc > bacc || (acc == bacc && matrix.model_ids[m] < matrix.model_ids[bm])
                }
            };
            if replace {
                best = Some((m, acc));
            }
        }
        kept.push(best.expect("families are nonempty").0);
    }
    kept.sort_unstable();
    Ok(kept)
}

/// Calibrated vote restricted to the best model of each family.
pub fn dedup_vote(
    ctx: &EnsembleContext,
    weights: &WeightScheme,
    partition: &FamilyPartition,
    question: usize,
) -> Result<VoteOutcome> {
    let kept = best_model_per_family(&ctx.matrix, partition)?;
    weighted_vote(ctx, weights, &kept, question, |_, w| w)
}

/// Mean pairwise normalized-answer agreement per model, over all questions.
pub fn mean_pairwise_agreement(ctx: &EnsembleContext) -> Vec<f64> {
    let n = ctx.num_models();
    let q_count = ctx.num_questions();
    if n < 2 || q_count == 0 {
        return vec![0.0; n];
    }
    let mut rates = vec![0.0; n];
    for (a, rate) in rates.iter_mut().enumerate() {
        let mut total = 0.0;
        for b in 0..n {
            if a == b {
                continue;
            }
            let matches = (0..q_count)
                .filter(|&q| ctx.answers[a][q] == ctx.answers[b][q])
                .count();
            total += matches as f64 / q_count as f64;
        }
        *rate = total / (n - 1) as f64;
    }
    rates
}

/// Weighted plurality with weights divided by mean pairwise agreement
/// (floored at the scheme's epsilon).
pub fn correlation_aware_vote(
    ctx: &EnsembleContext,
    weights: &WeightScheme,
    agreement: &[f64],
    question: usize,
) -> Result<VoteOutcome> {
    let participants: Vec<usize> = (0..ctx.num_models()).collect();
    let eps = weights.epsilon;
    weighted_vote(ctx, weights, &participants, question, |m, w| {
        w / agreement[m].max(eps)
    })
}

/// Two-stage family vote: within-family calibrated winners, then a
/// cross-family plurality weighted by W_f^alpha over families with
/// p_f >= tau.
pub fn hfv_vote(
    ctx: &EnsembleContext,
    weights: &WeightScheme,
    partition: &FamilyPartition,
    family_stats: &FamilyStats,
    alpha: f64,
    tau: f64,
    question: usize,
) -> Result<VoteOutcome> {
    if alpha < 1.0 {
        return Err(FamvoteError::validation(format!("alpha {alpha} < 1")));
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(FamvoteError::validation(format!("tau {tau} out of [0, 1)")));
    }
    let mut ballots: Vec<(String, f64, &str)> = Vec::with_capacity(partition.num_families());
    for (family_id, members) in partition.families() {
        let stat = family_stats.get(family_id)?;
        if stat.p_f < tau {
            continue;
        }
        let member_idx = member_indices(ctx, members)?;
        let stage1 = family_stage1_vote(ctx, weights, &member_idx, question)?;
        ballots.push((stage1.chosen, signed_pow(stat.w_f, alpha), family_id));
    }
    if ballots.is_empty() {
        return Err(FamvoteError::contract(format!(
            "tau {tau} excludes every family"
        )));
    }
    // Stage-2 supporters are the member models of each voting family.
    let mut tally: BTreeMap<String, f64> = BTreeMap::new();
    let mut supporters: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (answer, weight, family_id) in &ballots {
        *tally.entry(answer.clone()).or_insert(0.0) += *weight;
        let members = partition
            .families()
            .iter()
            .find(|(f, _)| f == family_id)
            .map(|(_, m)| m.clone())
            .unwrap_or_default();
        supporters.entry(answer.clone()).or_default().extend(members);
    }
    let mut ranked: Vec<(&str, f64, usize)> = tally
        .iter()
        .map(|(a, &t)| (a.as_str(), t, supporters[a].len()))
        .collect();
    ranked.sort_by(|a, b| candidate_order(*a, *b));
    let chosen = ranked[0].0.to_string();
    let margin = if ranked.len() >= 2 {
        ranked[0].1 - ranked[1].1
    } else {
        ranked[0].1.max(0.0)
    };
    Ok(VoteOutcome {
        chosen,
        margin,
        tally,
        supporters,
    })
}

/// Within-family calibrated vote (Stage 1).
fn family_stage1_vote(
    ctx: &EnsembleContext,
    weights: &WeightScheme,
    member_idx: &[usize],
    question: usize,
) -> Result<VoteOutcome> {
    weighted_vote(ctx, weights, member_idx, question, |_, w| w)
}

/// Weighted plurality with model weight w / |F(m)|^rho.
pub fn rccv_vote(
    ctx: &EnsembleContext,
    weights: &WeightScheme,
    partition: &FamilyPartition,
    rho: f64,
    question: usize,
) -> Result<VoteOutcome> {
    if rho < 0.0 {
        return Err(FamvoteError::validation(format!("rho {rho} < 0")));
    }
    let sizes = family_sizes(ctx, partition)?;
    let participants: Vec<usize> = (0..ctx.num_models()).collect();
    weighted_vote(ctx, weights, &participants, question, |m, w| {
        if rho == 0.0 {
            w
        } else {
            w / (sizes[m] as f64).powf(rho)
        }
    })
}

/// Weighted plurality with model weight w * q_f^gamma / |F(m)|^rho.
pub fn qualrccv_vote(
    ctx: &EnsembleContext,
    weights: &WeightScheme,
    partition: &FamilyPartition,
    family_stats: &FamilyStats,
    rho: f64,
    gamma: f64,
    question: usize,
) -> Result<VoteOutcome> {
    if rho < 0.0 || gamma < 0.0 {
        return Err(FamvoteError::validation(format!(
            "rho {rho} and gamma {gamma} must be >= 0"
        )));
    }
    let sizes = family_sizes(ctx, partition)?;
    let mut quality = vec![1.0; ctx.num_models()];
    for (m, model_id) in ctx.matrix.model_ids.iter().enumerate() {
        let family_id = partition.family_of(model_id).ok_or_else(|| {
            FamvoteError::contract(format!("model `{model_id}` has no family"))
        })?;
        quality[m] = family_stats.get(family_id)?.q_f;
    }
    let participants: Vec<usize> = (0..ctx.num_models()).collect();
    weighted_vote(ctx, weights, &participants, question, |m, w| {
        let q_factor = if gamma == 0.0 {
            1.0
        } else {
            quality[m].powf(gamma)
        };
        let size_div = if rho == 0.0 {
            1.0
        } else {
            (sizes[m] as f64).powf(rho)
        };
        w * q_factor / size_div
    })
}

fn family_sizes(ctx: &EnsembleContext, partition: &FamilyPartition) -> Result<Vec<usize>> {
    let mut sizes = vec![0usize; ctx.num_models()];
    for (m, model_id) in ctx.matrix.model_ids.iter().enumerate() {
        let family_id = partition.family_of(model_id).ok_or_else(|| {
            FamvoteError::contract(format!("model `{model_id}` has no family"))
        })?;
        let (_, members) = partition
            .families()
            .iter()
            .find(|(f, _)| f == family_id)
            .expect("family_of implies membership");
        sizes[m] = members.len();
    }
    Ok(sizes)
}

/// Max model score on one question.
pub fn oracle_select(matrix: &AccuracyMatrix, question: usize) -> f64 {
    (0..matrix.num_models())
        .map(|m| matrix.scores[m][question])
        .fold(0.0, f64::max)
}

/// Mean of per-question oracle selections.
pub fn oracle_accuracy(matrix: &AccuracyMatrix) -> f64 {
    if matrix.num_questions() == 0 {
        return 0.0;
    }
    (0..matrix.num_questions())
        .map(|q| oracle_select(matrix, q))
        .sum::<f64>()
        / matrix.num_questions() as f64
}

/// Mean of per-question max(best-model score, ensemble score).
pub fn routing_oracle(
    matrix: &AccuracyMatrix,
    ensemble_scores: &[f64],
    best_model_idx: usize,
) -> Result<f64> {
    if ensemble_scores.len() != matrix.num_questions() {
        return Err(FamvoteError::contract(format!(
            "ensemble scored {} questions, matrix has {}",
            ensemble_scores.len(),
            matrix.num_questions()
        )));
    }
    if matrix.num_questions() == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..matrix.num_questions())
        .map(|q| matrix.scores[best_model_idx][q].max(ensemble_scores[q]))
        .sum();
    Ok(total / matrix.num_questions() as f64)
}

/// Index of the highest-accuracy model (ties: smallest id, i.e. first row).
pub fn best_model_index(matrix: &AccuracyMatrix) -> usize {
    let mut best = 0;
    let mut best_acc = matrix.model_accuracy(0);
    for m in 1..matrix.num_models() {
        let acc = matrix.model_accuracy(m);
        if acc > best_acc {
            best = m;
            best_acc = acc;
        }
    }
    best
}

/// HFV-auto grid axes.
pub const HFV_ALPHA_GRID: [f64; 7] = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0];
pub const HFV_TAU_GRID: [f64; 5] = [0.0, 0.45, 0.50, 0.55, 0.60];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HfvGridCell {
    pub alpha: f64,
    pub tau: f64,
    /// Mean held-out accuracy; None when tau excluded every family in some
    /// training fold.
    pub mean_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HfvAutoSelection {
    pub alpha: f64,
    pub tau: f64,
    pub grid: Vec<HfvGridCell>,
}

/// Selects (alpha, tau) by 5-fold cross-validation over the grid.
///
/// Folds are assigned round-robin over the sorted question order. Weights
/// and family stats are recomputed on each training fold. Ties prefer the
/// smallest alpha, then the smallest tau.
pub fn hfv_auto_select(
    ctx: &EnsembleContext,
    partition: &FamilyPartition,
    kind: WeightKind,
    epsilon: f64,
    folds: usize,
) -> Result<HfvAutoSelection> {
    let q_count = ctx.num_questions();
    if q_count < folds {
        return Err(FamvoteError::validation(format!(
            "{q_count} questions cannot fill {folds} folds"
        )));
    }
    let fold_of: Vec<usize> = (0..q_count).map(|q| q % folds).collect();
    // score_sums[cell] accumulates held-out scores; None marks invalid cells.
    let cells: Vec<(f64, f64)> = HFV_ALPHA_GRID
        .iter()
        .flat_map(|&a| HFV_TAU_GRID.iter().map(move |&t| (a, t)))
        .collect();
    let mut score_sums: Vec<Option<f64>> = vec![Some(0.0); cells.len()];
    for fold in 0..folds {
        let train: Vec<usize> = (0..q_count).filter(|&q| fold_of[q] != fold).collect();
        let test: Vec<usize> = (0..q_count).filter(|&q| fold_of[q] == fold).collect();
        let fold_weights = make_weight_scheme_on(&ctx.matrix, kind, epsilon, Some(&train))?;
        let fold_stats = build_family_stats(ctx, partition, &fold_weights, epsilon, Some(&train))?;
        let fold_results: Vec<Option<f64>> = cells
            .par_iter()
            .map(|&(alpha, tau)| {
                let mut sum = 0.0;
                for &q in &test {
                    match hfv_vote(ctx, &fold_weights, partition, &fold_stats, alpha, tau, q) {
                        Ok(outcome) => {
                            sum += ctx.answer_score(q, &outcome.chosen).unwrap_or(0.0);
                        }
                        Err(_) => return None,
                    }
                }
                Some(sum)
            })
            .collect();
        for (i, fold_sum) in fold_results.into_iter().enumerate() {
            score_sums[i] = match (score_sums[i], fold_sum) {
                (Some(acc), Some(s)) => Some(acc + s),
                _ => None,
            };
        }
    }
    let grid: Vec<HfvGridCell> = cells
        .iter()
        .zip(&score_sums)
        .map(|(&(alpha, tau), sum)| HfvGridCell {
            alpha,
            tau,
            mean_accuracy: sum.map(|s| s / q_count as f64),
        })
        .collect();
    let best = grid
        .iter()
        .filter(|c| c.mean_accuracy.is_some())
        .max_by(|a, b| {
            a.mean_accuracy
                .partial_cmp(&b.mean_accuracy)
                .unwrap()
                // On ties prefer smaller alpha, then smaller tau: invert.
                .then_with(|| b.alpha.partial_cmp(&a.alpha).unwrap())
                .then_with(|| b.tau.partial_cmp(&a.tau).unwrap())
        })
        .ok_or_else(|| {
            FamvoteError::contract("every grid cell was invalidated by tau filtering")
        })?;
    Ok(HfvAutoSelection {
        alpha: best.alpha,
        tau: best.tau,
        grid,
    })
}

/// Aggregation method selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Method {
    Majority,
    Calibrated,
    Dedup,
    Corr,
    Hfv { alpha: f64, tau: f64 },
    HfvAuto,
    Rccv { rho: f64 },
    Qualrccv { rho: f64, gamma: f64 },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Majority => "majority".to_string(),
            Method::Calibrated => "calibrated".to_string(),
            Method::Dedup => "dedup".to_string(),
            Method::Corr => "corr".to_string(),
            Method::Hfv { alpha, tau } => {
                if *alpha == 1.0 && *tau == 0.0 {
                    "hfv".to_string()
                } else {
                    format!("hfv-sharp(alpha={alpha},tau={tau})")
                }
            }
            Method::HfvAuto => "hfv-auto".to_string(),
            Method::Rccv { rho } => format!("rccv(rho={rho})"),
            Method::Qualrccv { rho, gamma } => format!("qualrccv(rho={rho},gamma={gamma})"),
        }
    }
}

/// A full method run: per-question outcomes plus any selected parameters.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub outcomes: Vec<VoteOutcome>,
    pub hfv_selection: Option<HfvAutoSelection>,
}

/// Runs one method over every question, in parallel, deterministically.
pub fn run_method(
    ctx: &EnsembleContext,
    partition: &FamilyPartition,
    weights: &WeightScheme,
    method: Method,
) -> Result<MethodRun> {
    let questions: Vec<usize> = (0..ctx.num_questions()).collect();
    let mut hfv_selection = None;
    let outcomes: Vec<VoteOutcome> = match method {
        Method::Majority => questions
            .par_iter()
            .map(|&q| Ok(majority_vote(ctx, q)))
            .collect::<Result<_>>()?,
        Method::Calibrated => questions
            .par_iter()
            .map(|&q| calibrated_vote(ctx, weights, q))
            .collect::<Result<_>>()?,
        Method::Dedup => {
            let kept = best_model_per_family(&ctx.matrix, partition)?;
            questions
                .par_iter()
                .map(|&q| weighted_vote(ctx, weights, &kept, q, |_, w| w))
                .collect::<Result<_>>()?
        }
        Method::Corr => {
            let agreement = mean_pairwise_agreement(ctx);
            questions
                .par_iter()
                .map(|&q| correlation_aware_vote(ctx, weights, &agreement, q))
                .collect::<Result<_>>()?
        }
        Method::Hfv { alpha, tau } => {
            let stats = build_family_stats(ctx, partition, weights, weights.epsilon, None)?;
            questions
                .par_iter()
                .map(|&q| hfv_vote(ctx, weights, partition, &stats, alpha, tau, q))
                .collect::<Result<_>>()?
        }
        Method::HfvAuto => {
            let selection = hfv_auto_select(ctx, partition, weights.kind, weights.epsilon, 5)?;
            let stats = build_family_stats(ctx, partition, weights, weights.epsilon, None)?;
            let outcomes = questions
                .par_iter()
                .map(|&q| {
                    hfv_vote(
                        ctx,
                        weights,
                        partition,
                        &stats,
                        selection.alpha,
                        selection.tau,
                        q,
                    )
                })
                .collect::<Result<_>>()?;
            hfv_selection = Some(selection);
            outcomes
        }
        Method::Rccv { rho } => questions
            .par_iter()
            .map(|&q| rccv_vote(ctx, weights, partition, rho, q))
            .collect::<Result<_>>()?,
        Method::Qualrccv { rho, gamma } => {
            let stats = build_family_stats(ctx, partition, weights, weights.epsilon, None)?;
            questions
                .par_iter()
                .map(|&q| qualrccv_vote(ctx, weights, partition, &stats, rho, gamma, q))
                .collect::<Result<_>>()?
        }
    };
    Ok(MethodRun {
        outcomes,
        hfv_selection,
    })
}

/// Per-question scores of a run's chosen answers.
pub fn score_outcomes(ctx: &EnsembleContext, outcomes: &[VoteOutcome]) -> Vec<f64> {
    outcomes
        .iter()
        .enumerate()
        .map(|(q, o)| {
            ctx.answer_score(q, &o.chosen)
                .expect("chosen answers always have a supporter")
        })
        .collect()
}

/// Dataset mean of a run's chosen-answer scores.
pub fn outcome_accuracy(ctx: &EnsembleContext, outcomes: &[VoteOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    score_outcomes(ctx, outcomes).iter().sum::<f64>() / outcomes.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{LabelAnswers, LabelRecord, LabelSet, PredictionSet, ScoreMode};
    use proptest::prelude::*;

    /// Builds a context from (model_id, [answers per question]) rows plus
    /// gold answers; question ids q000, q001, ...
    fn make_ctx(rows: &[(&str, &[&str])], gold: &[&str]) -> EnsembleContext {
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
            .map(|(q, g)| {
                (
                    format!("q{q:03}"),
                    LabelRecord {
                        answers: LabelAnswers::Exact(g.to_string()),
                        question_type: "other".to_string(),
                    },
                )
            })
            .collect();
        let labels = LabelSet::new(ScoreMode::Exact, entries).unwrap();
        EnsembleContext::build(&preds, &labels, crate::scoring::SoftVariant::LeaveOneOut).unwrap()
    }

    #[test]
    fn log_odds_frozen_values() {
        assert_eq!(log_odds(0.5, 1e-3), 0.0);
        assert!((log_odds(0.75, 1e-3) - 3f64.ln()).abs() < 1e-15);
        assert!((log_odds(1.0, 1e-3) - 6.906754778648554).abs() < 1e-12);
        assert!((log_odds(0.0, 1e-3) + 6.906754778648554).abs() < 1e-12);
    }

    #[test]
    fn majority_picks_plurality_and_breaks_ties() {
        let ctx = make_ctx(
            &[
                ("m1", &["yes", "a"]),
                ("m2", &["yes", "b"]),
                ("m3", &["no", "b"]),
            ],
            &["yes", "b"],
        );
        let o = majority_vote(&ctx, 0);
        assert_eq!(o.chosen, "yes");
        assert_eq!(o.margin, 1.0);
        // q1: b has 2 supporters, a has 1.
        let o = majority_vote(&ctx, 1);
        assert_eq!(o.chosen, "b");

        // Pure tie: equal tally, equal supporters, lexicographic wins.
        let ctx = make_ctx(&[("m1", &["y"]), ("m2", &["x"])], &["x"]);
        let o = majority_vote(&ctx, 0);
        assert_eq!(o.chosen, "x");
        assert_eq!(o.margin, 0.0);
    }

    #[test]
    fn calibrated_heavier_model_wins() {
        let ctx = make_ctx(&[("m1", &["x"]), ("m2", &["y"])], &["x"]);
        let weights = WeightScheme::explicit(&[("m1", 2.0), ("m2", 1.0)]);
        let o = calibrated_vote(&ctx, &weights, 0).unwrap();
        assert_eq!(o.chosen, "x");
        assert!((o.margin - 1.0).abs() < 1e-12);
    }

    #[test]
    fn calibrated_family_block_example() {
        // 5 family members answering "no" vs 3 independents answering "yes".
        let rows: Vec<(String, Vec<&str>)> = (0..5)
            .map(|i| (format!("fam{i}"), vec!["no"]))
            .chain((0..3).map(|i| (format!("ind{i}"), vec!["yes"])))
            .collect();
        let borrowed: Vec<(&str, &[&str])> = rows
            .iter()
            .map(|(m, a)| (m.as_str(), a.as_slice()))
            .collect();
        let ctx = make_ctx(&borrowed, &["yes"]);
        let mut w: Vec<(&str, f64)> = Vec::new();
        for (m, _) in &borrowed {
            w.push((m, if m.starts_with("fam") { 1.0 } else { 2.0 }));
        }
        let weights = WeightScheme::explicit(&w);
        let o = calibrated_vote(&ctx, &weights, 0).unwrap();
        assert_eq!(o.chosen, "yes"); // 6 > 5

        let mut w2: Vec<(&str, f64)> = Vec::new();
        for (m, _) in &borrowed {
            w2.push((m, if m.starts_with("fam") { 1.0 } else { 1.1 }));
        }
        let weights = WeightScheme::explicit(&w2);
        let o = calibrated_vote(&ctx, &weights, 0).unwrap();
        assert_eq!(o.chosen, "no"); // 5 > 3.3
    }

    #[test]
    fn dedup_keeps_best_per_family() {
        let ctx = make_ctx(
            &[("a1", &["x", "x"]), ("a2", &["y", "x"]), ("b1", &["y", "y"])],
            &["x", "x"],
        );
        // a1 scores 1.0, a2 scores 0.5, b1 scores 0.0.
        let mut assignment = BTreeMap::new();
        assignment.insert("a1".to_string(), "famA".to_string());
        assignment.insert("a2".to_string(), "famA".to_string());
        assignment.insert("b1".to_string(), "famB".to_string());
        let models: Vec<String> = vec!["a1".into(), "a2".into(), "b1".into()];
        let partition = FamilyPartition::from_assignment(&assignment, &models, None).unwrap();
        let kept = best_model_per_family(&ctx.matrix, &partition).unwrap();
        assert_eq!(kept, vec![0, 2]); // a1 and b1

        let weights = WeightScheme::uniform(&models, 1.0);
        let o = dedup_vote(&ctx, &weights, &partition, 0).unwrap();
        // Only a1 ("x") and b1 ("y") vote; tie broken lexicographically.
        assert_eq!(o.chosen, "x");
    }

    #[test]
    fn dedup_with_singletons_matches_calibrated() {
        let ctx = make_ctx(
            &[("m1", &["a", "b"]), ("m2", &["b", "b"]), ("m3", &["a", "c"])],
            &["a", "b"],
        );
        let models: Vec<String> = vec!["m1".into(), "m2".into(), "m3".into()];
        let partition = FamilyPartition::singletons(&models);
        let weights =
            make_weight_scheme(&ctx.matrix, WeightKind::Overall, DEFAULT_EPSILON).unwrap();
        for q in 0..2 {
            let d = dedup_vote(&ctx, &weights, &partition, q).unwrap();
            let c = calibrated_vote(&ctx, &weights, q).unwrap();
            assert_eq!(d, c);
        }
    }

    #[test]
    fn agreement_rates_are_mean_pairwise_match_fractions() {
        let ctx = make_ctx(
            &[("m1", &["a", "b"]), ("m2", &["a", "c"]), ("m3", &["x", "y"])],
            &["a", "b"],
        );
        let rates = mean_pairwise_agreement(&ctx);
        // m1-m2 agree on 1/2, m1-m3 on 0, m2-m3 on 0.
        assert!((rates[0] - 0.25).abs() < 1e-12);
        assert!((rates[1] - 0.25).abs() < 1e-12);
        assert!((rates[2] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_aware_boosts_disagreeing_model() {
        let ctx = make_ctx(&[("m1", &["x"]), ("m2", &["x"]), ("m3", &["y"])], &["y"]);
        let weights = WeightScheme::uniform(
            &["m1".to_string(), "m2".to_string(), "m3".to_string()],
            1.0,
        );
        // m1, m2 always agree (rate 0.5 each vs m3=0); m3 gets the floor.
        let agreement = mean_pairwise_agreement(&ctx);
        let o = correlation_aware_vote(&ctx, &weights, &agreement, 0).unwrap();
        // m3 weight = 1/eps = 1000 >> 2/0.5.
        assert_eq!(o.chosen, "y");

        // Uniform agreement: same winner as calibrated.
        let ctx2 = make_ctx(&[("m1", &["x"]), ("m2", &["x"]), ("m3", &["x"])], &["x"]);
        let agreement2 = mean_pairwise_agreement(&ctx2);
        let o2 = correlation_aware_vote(&ctx2, &weights, &agreement2, 0).unwrap();
        let c2 = calibrated_vote(&ctx2, &weights, 0).unwrap();
        assert_eq!(o2.chosen, c2.chosen);
    }

    #[test]
    fn hfv_recovers_misleading_consensus() {
        // 5-member family all wrong, 3 singleton families correct.
        let rows: Vec<(String, Vec<&str>)> = (0..5)
            .map(|i| (format!("fam{i}"), vec!["no"]))
            .chain((0..3).map(|i| (format!("ind{i}"), vec!["yes"])))
            .collect();
        let borrowed: Vec<(&str, &[&str])> = rows
            .iter()
            .map(|(m, a)| (m.as_str(), a.as_slice()))
            .collect();
        let ctx = make_ctx(&borrowed, &["yes"]);
        let models: Vec<String> = borrowed.iter().map(|(m, _)| m.to_string()).collect();
        let mut assignment = BTreeMap::new();
        for m in &models {
            let fam = if m.starts_with("fam") { "big" } else { m.as_str() };
            assignment.insert(m.clone(), fam.to_string());
        }
        let partition = FamilyPartition::from_assignment(&assignment, &models, None).unwrap();
        let weights = WeightScheme::uniform(&models, 1.0);
        let stats = FamilyStats::from_list(
            partition
                .families()
                .iter()
                .map(|(f, members)| FamilyStat {
                    family_id: f.clone(),
                    p_f: 0.8,
                    w_f: log_odds(0.8, DEFAULT_EPSILON),
                    q_f: 0.8,
                    n_f: members.len(),
                })
                .collect(),
        );
        let cal = calibrated_vote(&ctx, &weights, 0).unwrap();
        assert_eq!(cal.chosen, "no"); // 5 > 3
        let hfv = hfv_vote(&ctx, &weights, &partition, &stats, 1.0, 0.0, 0).unwrap();
        assert_eq!(hfv.chosen, "yes"); // 3 families > 1
    }

    #[test]
    fn hfv_tau_excludes_weak_families_and_errors_when_all_gone() {
        let ctx = make_ctx(&[("m1", &["x"]), ("m2", &["y"])], &["x"]);
        let models = vec!["m1".to_string(), "m2".to_string()];
        let partition = FamilyPartition::singletons(&models);
        let weights = WeightScheme::uniform(&models, 1.0);
        let stats = FamilyStats::from_list(vec![
            FamilyStat {
                family_id: "m1".into(),
                p_f: 0.9,
                w_f: log_odds(0.9, DEFAULT_EPSILON),
                q_f: 0.9,
                n_f: 1,
            },
            FamilyStat {
                family_id: "m2".into(),
                p_f: 0.3,
                w_f: log_odds(0.3, DEFAULT_EPSILON),
                q_f: 0.3,
                n_f: 1,
            },
        ]);
        let o = hfv_vote(&ctx, &weights, &partition, &stats, 1.0, 0.5, 0).unwrap();
        assert_eq!(o.chosen, "x");
        assert!(!o.tally.contains_key("y"));
        let err = hfv_vote(&ctx, &weights, &partition, &stats, 1.0, 0.95, 0).unwrap_err();
        assert!(err.to_string().contains("excludes"), "{err}");
    }

    #[test]
    fn hfv_singleton_partition_matches_calibrated_exactly() {
        let ctx = make_ctx(
            &[
                ("m1", &["a", "b", "c", "a"]),
                ("m2", &["b", "b", "c", "a"]),
                ("m3", &["a", "c", "d", "b"]),
            ],
            &["a", "b", "c", "a"],
        );
        let models: Vec<String> = vec!["m1".into(), "m2".into(), "m3".into()];
        let partition = FamilyPartition::singletons(&models);
        let weights =
            make_weight_scheme(&ctx.matrix, WeightKind::Overall, DEFAULT_EPSILON).unwrap();
        let stats =
            build_family_stats(&ctx, &partition, &weights, DEFAULT_EPSILON, None).unwrap();
        for q in 0..4 {
            let h = hfv_vote(&ctx, &weights, &partition, &stats, 1.0, 0.0, q).unwrap();
            let c = calibrated_vote(&ctx, &weights, q).unwrap();
            assert_eq!(h.chosen, c.chosen, "question {q}");
            assert_eq!(h.tally, c.tally, "question {q}");
        }
    }

    #[test]
    fn rccv_family_discount_matches_closed_form() {
        assert!((5f64.powf(0.4) - 1.9037).abs() < 1e-4);
        let ctx = make_ctx(
            &[("f1", &["x"]), ("f2", &["x"]), ("s1", &["y"])],
            &["y"],
        );
        let models: Vec<String> = vec!["f1".into(), "f2".into(), "s1".into()];
        let mut assignment = BTreeMap::new();
        assignment.insert("f1".to_string(), "fam".to_string());
        assignment.insert("f2".to_string(), "fam".to_string());
        assignment.insert("s1".to_string(), "s1".to_string());
        let partition = FamilyPartition::from_assignment(&assignment, &models, None).unwrap();
        let weights = WeightScheme::uniform(&models, 1.0);
        let o = rccv_vote(&ctx, &weights, &partition, 1.0, 0).unwrap();
        // Family weight 1/2 each: tally x = 1.0, y = 1.0, tie on tally;
        // "x" has two supporters so it wins on the supporter rule.
        assert_eq!(o.chosen, "x");
        let o = rccv_vote(&ctx, &weights, &partition, 2.0, 0).unwrap();
        // tally x = 0.5, y = 1.0.
        assert_eq!(o.chosen, "y");
    }

    #[test]
    fn qualrccv_quality_rescaling_hand_case() {
        let ctx = make_ctx(&[("f1", &["x"]), ("g1", &["y"])], &["x"]);
        let models: Vec<String> = vec!["f1".into(), "g1".into()];
        let mut assignment = BTreeMap::new();
        assignment.insert("f1".to_string(), "famF".to_string());
        assignment.insert("g1".to_string(), "famG".to_string());
        let partition = FamilyPartition::from_assignment(&assignment, &models, None).unwrap();
        let weights = WeightScheme::uniform(&models, 1.0);
        let stats = FamilyStats::from_list(vec![
            FamilyStat {
                family_id: "famF".into(),
                p_f: 0.9,
                w_f: log_odds(0.9, DEFAULT_EPSILON),
                q_f: 0.9,
                n_f: 1,
            },
            FamilyStat {
                family_id: "famG".into(),
                p_f: 0.6,
                w_f: log_odds(0.6, DEFAULT_EPSILON),
                q_f: 0.6,
                n_f: 1,
            },
        ]);
        let o = qualrccv_vote(&ctx, &weights, &partition, &stats, 0.0, 1.0, 0).unwrap();
        assert_eq!(o.chosen, "x"); // 0.9 > 0.6
        assert!((o.tally["x"] - 0.9).abs() < 1e-12);
        assert!((o.tally["y"] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn oracle_and_routing_dominance() {
        let ctx = make_ctx(
            &[
                ("m1", &["a", "x", "c", "x"]),
                ("m2", &["x", "b", "c", "x"]),
            ],
            &["a", "b", "c", "d"],
        );
        let oracle = oracle_accuracy(&ctx.matrix);
        assert!((oracle - 0.75).abs() < 1e-12);
        let best = best_model_index(&ctx.matrix);
        let weights = WeightScheme::uniform(&["m1".to_string(), "m2".to_string()], 1.0);
        let run = run_method(
            &ctx,
            &FamilyPartition::singletons(&["m1".to_string(), "m2".to_string()]),
            &weights,
            Method::Calibrated,
        )
        .unwrap();
        let ens_scores = score_outcomes(&ctx, &run.outcomes);
        let routing = routing_oracle(&ctx.matrix, &ens_scores, best).unwrap();
        let ens_acc = outcome_accuracy(&ctx, &run.outcomes);
        let best_acc = ctx.matrix.model_accuracy(best);
        assert!(oracle >= routing - 1e-12);
        assert!(routing >= ens_acc.max(best_acc) - 1e-12);
    }

    #[test]
    fn hfv_auto_grid_has_35_cells() {
        let rows: Vec<(String, Vec<&str>)> = (0..4)
            .map(|i| {
                let answers: Vec<&str> = (0..10).map(|q| if q % 2 == 0 { "a" } else { "b" })
                    .map(|a| if i >= 2 && a == "a" { "c" } else { a })
                    .collect();
                (format!("m{i}"), answers)
            })
            .collect();
        let borrowed: Vec<(&str, &[&str])> = rows
            .iter()
            .map(|(m, a)| (m.as_str(), a.as_slice()))
            .collect();
        let gold: Vec<&str> = (0..10).map(|q| if q % 2 == 0 { "a" } else { "b" }).collect();
        let ctx = make_ctx(&borrowed, &gold);
        let models: Vec<String> = borrowed.iter().map(|(m, _)| m.to_string()).collect();
        let partition = FamilyPartition::singletons(&models);
        let sel =
            hfv_auto_select(&ctx, &partition, WeightKind::Overall, DEFAULT_EPSILON, 5).unwrap();
        assert_eq!(sel.grid.len(), 35);
        assert!(HFV_ALPHA_GRID.contains(&sel.alpha));
        assert!(HFV_TAU_GRID.contains(&sel.tau));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// Reduction chain and scale invariance on random small pools.
        #[test]
        fn reductions_and_scale_invariance(
            seed in 0u64..1000,
            num_models in 2usize..6,
            num_questions in 1usize..8,
            scale in 0.25f64..8.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let answers = ["x", "y", "z"];
            let rows: Vec<(String, Vec<&str>)> = (0..num_models)
                .map(|m| {
                    let row: Vec<&str> = (0..num_questions)
                        .map(|_| answers[rng.gen_range(0..answers.len())])
                        .collect();
                    (format!("m{m}"), row)
                })
                .collect();
            let borrowed: Vec<(&str, &[&str])> = rows
                .iter()
                .map(|(m, a)| (m.as_str(), a.as_slice()))
                .collect();
            let gold: Vec<&str> = (0..num_questions)
                .map(|_| answers[rng.gen_range(0..answers.len())])
                .collect();
            let ctx = make_ctx(&borrowed, &gold);
            let models: Vec<String> = borrowed.iter().map(|(m, _)| m.to_string()).collect();
            // Random 2-family partition.
            let mut assignment = BTreeMap::new();
            for m in &models {
                let fam = if rng.gen_bool(0.5) { "famA" } else { "famB" };
                assignment.insert(m.clone(), fam.to_string());
            }
            // Ensure both families exist; fall back to singletons otherwise.
            let partition = FamilyPartition::from_assignment(&assignment, &models, None).unwrap();
            let weights =
                make_weight_scheme(&ctx.matrix, WeightKind::Overall, DEFAULT_EPSILON).unwrap();
            let stats =
                build_family_stats(&ctx, &partition, &weights, DEFAULT_EPSILON, None).unwrap();

            for q in 0..num_questions {
                let cal = calibrated_vote(&ctx, &weights, q).unwrap();
                let rccv0 = rccv_vote(&ctx, &weights, &partition, 0.0, q).unwrap();
                prop_assert_eq!(&rccv0.chosen, &cal.chosen);
                let rccv = rccv_vote(&ctx, &weights, &partition, 0.7, q).unwrap();
                let qual0 =
                    qualrccv_vote(&ctx, &weights, &partition, &stats, 0.7, 0.0, q).unwrap();
                prop_assert_eq!(&qual0.chosen, &rccv.chosen);

                // Scale invariance of the chosen answer. Summing scaled
                // weights rounds differently from scaling the summed tally,
                // so near-ties (margin at float-noise level) may re-round to
                // another of the tied candidates; decisive margins must not.
                let scaled = weights.scaled(scale);
                let cal_s = calibrated_vote(&ctx, &scaled, q).unwrap();
                let noise = 1e-9 * (1.0 + cal.tally.values().fold(0.0f64, |m, t| m.max(t.abs())));
                if cal.margin > noise {
                    prop_assert_eq!(&cal_s.chosen, &cal.chosen);
                } else {
                    let top = cal.tally[&cal.chosen];
                    prop_assert!(cal.tally[&cal_s.chosen] >= top - noise);
                }
            }

            // Singleton partition: HFV == calibrated, chosen answers equal.
            let singles = FamilyPartition::singletons(&models);
            let s_stats =
                build_family_stats(&ctx, &singles, &weights, DEFAULT_EPSILON, None).unwrap();
            for q in 0..num_questions {
                let h = hfv_vote(&ctx, &weights, &singles, &s_stats, 1.0, 0.0, q).unwrap();
                let c = calibrated_vote(&ctx, &weights, q).unwrap();
                prop_assert_eq!(&h.chosen, &c.chosen);
            }
        }

        /// Adding weight to the winning candidate never flips the winner.
        #[test]
        fn winner_monotone_under_extra_weight(
            seed in 0u64..1000,
            extra in 0.01f64..5.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let answers = ["x", "y", "z"];
            let rows: Vec<(String, Vec<&str>)> = (0..4)
                .map(|m| {
                    (format!("m{m}"), vec![answers[rng.gen_range(0..3)]])
                })
                .collect();
            let borrowed: Vec<(&str, &[&str])> = rows
                .iter()
                .map(|(m, a)| (m.as_str(), a.as_slice()))
                .collect();
            let ctx = make_ctx(&borrowed, &["x"]);
            let models: Vec<String> = borrowed.iter().map(|(m, _)| m.to_string()).collect();
            let weights = WeightScheme::uniform(&models, 1.0);
            let before = calibrated_vote(&ctx, &weights, 0).unwrap();
            // Bump one supporter of the winner.
            let supporter = before.supporters[&before.chosen][0].clone();
            let bumped: Vec<(&str, f64)> = models
                .iter()
                .map(|m| {
                    (
                        m.as_str(),
                        if *m == supporter { 1.0 + extra } else { 1.0 },
                    )
                })
                .collect();
            let weights2 = WeightScheme::explicit(&bumped);
            let after = calibrated_vote(&ctx, &weights2, 0).unwrap();
            prop_assert_eq!(before.chosen, after.chosen);
        }
    }
}
