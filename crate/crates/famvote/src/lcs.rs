//! Learned candidate scoring: quality-weighted vote tallies propose top-K
//! candidate answers per question, a boosted classifier scores each
//! candidate's correctness probability from structural features, and the
//! highest-scoring candidate wins.
//!
//! All evaluation is strict K-fold cross-validation stratified by question
//! type: calibration weights, family stats, and supporter accuracies are
//! recomputed on each training fold, so a held-out question's label never
//! touches anything used to predict it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::dataset::FamilyPartition;
use crate::error::{FamvoteError, Result};
use crate::gbdt::{train_gbdt, GbdtConfig, GbdtModel};
use crate::scoring::{EnsembleContext, DEFAULT_CORRECT_THRESHOLD};
use crate::voting::{
    build_family_stats, candidate_order, make_weight_scheme_on, qualrccv_vote, VoteOutcome,
    WeightKind, DEFAULT_GAMMA, DEFAULT_RHO,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LcsConfig {
    /// Candidates per question proposed by the vote tally.
    pub k: usize,
    pub folds: usize,
    /// Family-size discount of the candidate-proposing vote.
    pub rho: f64,
    /// Family-quality exponent of the candidate-proposing vote.
    pub gamma: f64,
    pub weight_kind: WeightKind,
    pub epsilon: f64,
    /// A candidate whose answer scores at least this much is a positive
    /// training example (exact-mode scores are 0/1, so 0.5 means "correct").
    pub threshold: f64,
    pub gbdt: GbdtConfig,
    /// Shuffles questions within each type before dealing them to folds.
    pub seed: u64,
}

impl Default for LcsConfig {
    fn default() -> Self {
        LcsConfig {
            k: 5,
            folds: 5,
            rho: DEFAULT_RHO,
            gamma: DEFAULT_GAMMA,
            weight_kind: WeightKind::Overall,
            epsilon: crate::voting::DEFAULT_EPSILON,
            threshold: DEFAULT_CORRECT_THRESHOLD,
            gbdt: GbdtConfig::default(),
            seed: 0,
        }
    }
}

/// One proposed answer with the structure behind its tally.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidate {
    pub answer: String,
    /// Supporting model count; at least 1 by construction.
    pub n_m: usize,
    /// Distinct supporting family count; at most n_m.
    pub n_f: usize,
    pub total_weight: f64,
    /// Tally minus the top tally: 0 for the leader, negative otherwise.
    pub margin: f64,
    pub avg_supporter_acc: f64,
    pub max_supporter_acc: f64,
    pub min_supporter_acc: f64,
    pub best_model_supports: bool,
    /// Characters in the normalized answer.
    pub answer_length: usize,
    /// One-hot over the context's type vocabulary; all zero for an
    /// unknown type.
    pub type_indicators: Vec<f64>,
}

impl Candidate {
    /// Fixed feature order: n_m, n_f, total_weight, margin, avg/max/min
    /// supporter accuracy, best_model_supports, answer_length, then one
    /// indicator per known question type.
    pub fn features(&self) -> Vec<f64> {
        let mut v = vec![
            self.n_m as f64,
            self.n_f as f64,
            self.total_weight,
            self.margin,
            self.avg_supporter_acc,
            self.max_supporter_acc,
            self.min_supporter_acc,
            if self.best_model_supports { 1.0 } else { 0.0 },
            self.answer_length as f64,
        ];
        v.extend_from_slice(&self.type_indicators);
        v
    }
}

/// Feature names matching `Candidate::features` order.
pub fn feature_names(types: &[String]) -> Vec<String> {
    let mut names = vec![
        "n_m".to_string(),
        "n_f".to_string(),
        "total_weight".to_string(),
        "margin".to_string(),
        "avg_supporter_acc".to_string(),
        "max_supporter_acc".to_string(),
        "min_supporter_acc".to_string(),
        "best_model_supports".to_string(),
        "answer_length".to_string(),
    ];
    names.extend(types.iter().map(|t| format!("type={t}")));
    names
}

/// Fold-local statistics candidates are featurized against.
pub struct CandidateContext<'a> {
    pub ctx: &'a EnsembleContext,
    pub partition: &'a FamilyPartition,
    /// Per model row, accuracy on the training columns.
    pub model_accuracies: Vec<f64>,
    /// Row of the training-best model (ties: first row, smallest id).
    pub best_model: usize,
    /// Type vocabulary for the one-hot indicators, sorted.
    pub types: Vec<String>,
}

impl<'a> CandidateContext<'a> {
    pub fn new(
        ctx: &'a EnsembleContext,
        partition: &'a FamilyPartition,
        train_columns: &[usize],
    ) -> Result<Self> {
        if train_columns.is_empty() {
            return Err(FamvoteError::validation("empty training column set"));
        }
        let model_accuracies: Vec<f64> = (0..ctx.num_models())
            .map(|m| ctx.matrix.model_accuracy_on(m, train_columns))
            .collect();
        let best_model = model_accuracies
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.partial_cmp(b)
                    .expect("finite accuracies")
                    .then(ib.cmp(ia))
            })
            .map(|(i, _)| i)
            .expect("at least one model");
        Ok(CandidateContext {
            ctx,
            partition,
            model_accuracies,
            best_model,
            types: ctx.matrix.distinct_types(),
        })
    }
}

/// Top-K tally entries of a vote outcome as featurized candidates, in the
/// shared candidate order (fewer than K when fewer answers exist).
pub fn generate_candidates(
    outcome: &VoteOutcome,
    question: usize,
    k: usize,
    cctx: &CandidateContext<'_>,
) -> Result<Vec<Candidate>> {
    if k == 0 {
        return Err(FamvoteError::usage("candidate count k must be >= 1"));
    }
    let mut ranked: Vec<(&str, f64, usize)> = outcome
        .tally
        .iter()
        .map(|(a, &t)| (a.as_str(), t, outcome.supporters[a].len()))
        .collect();
    ranked.sort_by(|a, b| candidate_order(*a, *b));
    let top_tally = ranked[0].1;
    let qtype = &cctx.ctx.matrix.question_types[question];
    ranked
        .into_iter()
        .take(k)
        .map(|(answer, tally, _)| {
            let supporters = &outcome.supporters[answer];
            let mut accs = Vec::with_capacity(supporters.len());
            let mut families = BTreeSet::new();
            let mut best_supports = false;
            for id in supporters {
                let m = cctx.ctx.matrix.model_index(id).ok_or_else(|| {
                    FamvoteError::contract(format!("supporter `{id}` not in matrix"))
                })?;
                accs.push(cctx.model_accuracies[m]);
                if m == cctx.best_model {
                    best_supports = true;
                }
                families.insert(cctx.partition.family_of(id).ok_or_else(|| {
                    FamvoteError::contract(format!("supporter `{id}` has no family"))
                })?);
            }
            let type_indicators = cctx
                .types
                .iter()
                .map(|t| if t == qtype { 1.0 } else { 0.0 })
                .collect();
            Ok(Candidate {
                answer: answer.to_string(),
                n_m: supporters.len(),
                n_f: families.len(),
                total_weight: tally,
                margin: tally - top_tally,
                avg_supporter_acc: accs.iter().sum::<f64>() / accs.len() as f64,
                max_supporter_acc: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                min_supporter_acc: accs.iter().copied().fold(f64::INFINITY, f64::min),
                best_model_supports: best_supports,
                answer_length: answer.chars().count(),
                type_indicators,
            })
        })
        .collect()
}

/// Highest predicted-probability candidate; ties prefer the higher vote
/// tally, then the lexicographically smaller answer.
pub fn lcs_predict<'c>(
    candidates: &'c [Candidate],
    model: &GbdtModel,
) -> Result<&'c Candidate> {
    if candidates.is_empty() {
        return Err(FamvoteError::contract("no candidates to rank"));
    }
    let mut best = &candidates[0];
    let mut best_p = model.predict_proba(&best.features());
    for candidate in &candidates[1..] {
        let p = model.predict_proba(&candidate.features());
        let better = p > best_p
            || (p == best_p
                && (candidate.total_weight > best.total_weight
                    || (candidate.total_weight == best.total_weight
                        && candidate.answer < best.answer)));
        if better {
            best = candidate;
            best_p = p;
        }
    }
    Ok(best)
}

/// Deals questions into `folds` round-robin within each type after a
/// seeded shuffle; a global counter keeps overall fold sizes within one.
pub fn stratified_folds(types: &[String], folds: usize, seed: u64) -> Result<Vec<usize>> {
    let n = types.len();
    if folds < 2 {
        return Err(FamvoteError::usage(format!(
            "cross-validation needs >= 2 folds, got {folds}"
        )));
    }
    if n < folds {
        return Err(FamvoteError::validation(format!(
            "{n} questions cannot fill {folds} folds"
        )));
    }
    let mut by_type: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (q, ty) in types.iter().enumerate() {
        by_type.entry(ty.as_str()).or_default().push(q);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; n];
    let mut counter = 0usize;
    for (_, mut group) in by_type {
        group.shuffle(&mut rng);
        for q in group {
            fold_of[q] = counter % folds;
            counter += 1;
        }
    }
    Ok(fold_of)
}

/// Cross-validated predictions plus training diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LcsRun {
    /// Chosen answer per question, matrix column order.
    pub chosen: Vec<String>,
    /// Score of each chosen answer.
    pub scores: Vec<f64>,
    pub accuracy: f64,
    /// Held-out fold of each question.
    pub fold_of: Vec<usize>,
    /// Held-out accuracy per fold.
    pub fold_accuracies: Vec<f64>,
    pub feature_names: Vec<String>,
    /// Mean split-gain importance over folds that trained a model.
    pub feature_importance: Vec<f64>,
    /// Folds whose training rows were single-class and fell back to the
    /// tally's own ranking.
    pub degenerate_folds: Vec<usize>,
}

struct FoldResult {
    fold: usize,
    predictions: Vec<(usize, String, f64)>,
    importance: Option<Vec<f64>>,
}

/// Runs the full cross-validated pipeline.
///
/// Per fold: weights, family stats, and model accuracies come from the
/// training columns; training rows are that fold's training questions'
/// candidates labeled by the dataset metric; the held-out questions are
/// then predicted with the trained scorer. With `k == 1`, or in a fold
/// whose training labels are single-class (nothing to learn), the tally's
/// top candidate is kept, which is exactly the quality-weighted vote.
pub fn run_lcs_cv(
    ctx: &EnsembleContext,
    partition: &FamilyPartition,
    config: &LcsConfig,
) -> Result<LcsRun> {
    let n = ctx.num_questions();
    if config.k == 0 {
        return Err(FamvoteError::usage("candidate count k must be >= 1"));
    }
    let fold_of = stratified_folds(&ctx.matrix.question_types, config.folds, config.seed)?;
    let type_vocab = ctx.matrix.distinct_types();
    let names = feature_names(&type_vocab);

    let fold_results: Vec<FoldResult> = (0..config.folds)
        .into_par_iter()
        .map(|fold| run_fold(ctx, partition, config, &fold_of, fold))
        .collect::<Result<_>>()?;

    let mut chosen = vec![String::new(); n];
    let mut scores = vec![0.0; n];
    let mut fold_accuracies = vec![0.0; config.folds];
    let mut importance_sum = vec![0.0; names.len()];
    let mut trained_folds = 0usize;
    let mut degenerate_folds = Vec::new();
    for result in fold_results {
        let mut sum = 0.0;
        let count = result.predictions.len();
        for (q, answer, score) in result.predictions {
            sum += score;
            chosen[q] = answer;
            scores[q] = score;
        }
        fold_accuracies[result.fold] = sum / count as f64;
        match result.importance {
            Some(imp) => {
                for (acc, x) in importance_sum.iter_mut().zip(&imp) {
                    *acc += x;
                }
                trained_folds += 1;
            }
            None => degenerate_folds.push(result.fold),
        }
    }
    let feature_importance = if trained_folds > 0 {
        importance_sum
            .iter()
            .map(|x| x / trained_folds as f64)
            .collect()
    } else {
        importance_sum
    };
    Ok(LcsRun {
        accuracy: scores.iter().sum::<f64>() / n as f64,
        chosen,
        scores,
        fold_of,
        fold_accuracies,
        feature_names: names,
        feature_importance,
        degenerate_folds,
    })
}

fn run_fold(
    ctx: &EnsembleContext,
    partition: &FamilyPartition,
    config: &LcsConfig,
    fold_of: &[usize],
    fold: usize,
) -> Result<FoldResult> {
    let train_cols: Vec<usize> = (0..ctx.num_questions())
        .filter(|&q| fold_of[q] != fold)
        .collect();
    let test_cols: Vec<usize> = (0..ctx.num_questions())
        .filter(|&q| fold_of[q] == fold)
        .collect();
    let weights = make_weight_scheme_on(
        &ctx.matrix,
        config.weight_kind,
        config.epsilon,
        Some(&train_cols),
    )?;
    let stats = build_family_stats(ctx, partition, &weights, config.epsilon, Some(&train_cols))?;
    let cctx = CandidateContext::new(ctx, partition, &train_cols)?;

    let propose = |q: usize| -> Result<Vec<Candidate>> {
        let outcome = qualrccv_vote(
            ctx,
            &weights,
            partition,
            &stats,
            config.rho,
            config.gamma,
            q,
        )?;
        generate_candidates(&outcome, q, config.k, &cctx)
    };

    let model: Option<GbdtModel> = if config.k == 1 {
        // A single candidate cannot be re-ranked.
        None
    } else {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut labels: Vec<bool> = Vec::new();
        for &q in &train_cols {
            for candidate in propose(q)? {
                let score = ctx.answer_score(q, &candidate.answer).ok_or_else(|| {
                    FamvoteError::contract(format!(
                        "candidate `{}` has no supporter on question {q}",
                        candidate.answer
                    ))
                })?;
                rows.push(candidate.features());
                labels.push(score >= config.threshold);
            }
        }
        let positives = labels.iter().filter(|&&y| y).count();
        if positives == 0 || positives == labels.len() {
            // Nothing to learn; keep the tally's own ranking.
            None
        } else {
            Some(train_gbdt(&rows, &labels, &config.gbdt)?)
        }
    };

    let predictions = test_cols
        .iter()
        .map(|&q| {
            let candidates = propose(q)?;
            let winner = match &model {
                Some(m) => lcs_predict(&candidates, m)?,
                None => &candidates[0],
            };
            let score = ctx.answer_score(q, &winner.answer).ok_or_else(|| {
                FamvoteError::contract(format!(
                    "chosen `{}` has no supporter on question {q}",
                    winner.answer
                ))
            })?;
            Ok((q, winner.answer.clone(), score))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldResult {
        fold,
        predictions,
        importance: model.map(|m| m.feature_importance),
    })
}

/// Small correlated pool shared by lcs and pipeline tests.
#[cfg(test)]
pub(crate) fn test_pool(seed: u64, n_questions: usize) -> (EnsembleContext, FamilyPartition) {
    use crate::scoring::SoftVariant;
    use crate::synth::{generate, FamilySpec, SynthConfig};
    let config = SynthConfig {
        families: vec![
            FamilySpec {
                family_id: "big".to_string(),
                accuracies: vec![0.75; 4],
            },
            FamilySpec {
                family_id: "solo0".to_string(),
                accuracies: vec![0.7],
            },
            FamilySpec {
                family_id: "solo1".to_string(),
                accuracies: vec![0.8],
            },
        ],
        rho_w: 0.7,
        rho_b: 0.2,
        n_questions,
        answer_space: 6,
        seed,
    };
    let out = generate(&config).unwrap();
    let ctx = EnsembleContext::build(&out.predictions, &out.labels, SoftVariant::LeaveOneOut)
        .unwrap();
    (ctx, out.partition)
}
