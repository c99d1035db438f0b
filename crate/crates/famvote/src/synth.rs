//! Synthetic ensembles with planted family-correlated errors.
//!
//! Correctness is a thresholded one-factor-per-level Gaussian: per question
//! q, model m draws x = sqrt(rho_b)*g_q + sqrt(rho_w - rho_b)*h_{F(m),q} plus
//! sqrt(1 - rho_w)*e_{m,q} and answers correctly iff x < PhiInv(p_m).
//! Erring members of a family output the family's question-specific wrong
//! token, so within-family errors form a consensus. The measured Pearson
//! correlation of binary correctness is attenuated relative to the latent
//! rho; `calibrate_latent_rho` inverts that attenuation through a
//! bivariate-normal quadrature so measured correlations can be planted
//! directly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    FamilyPartition, LabelAnswers, LabelRecord, LabelSet, PredictionSet, ScoreMode,
};
use crate::error::{FamvoteError, Result};

/// One family: id plus one accuracy per member.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilySpec {
    pub family_id: String,
    pub accuracies: Vec<f64>,
}

/// Generator configuration (TOML-serializable).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub families: Vec<FamilySpec>,
    /// Latent within-family correlation, in [0, 1).
    pub rho_w: f64,
    /// Latent between-family correlation, in [0, rho_w].
    pub rho_b: f64,
    pub n_questions: usize,
    /// Number of distinct answer tokens (>= 2); token 0 is always correct.
    pub answer_space: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(FamvoteError::validation("no families configured"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for fam in &self.families {
            if fam.family_id.is_empty() {
                return Err(FamvoteError::validation("empty family id"));
            }
            if !seen.insert(&fam.family_id) {
                return Err(FamvoteError::validation(format!(
                    "duplicate family id `{}`",
                    fam.family_id
                )));
            }
            if fam.accuracies.is_empty() {
                return Err(FamvoteError::validation(format!(
                    "family `{}` has no members",
                    fam.family_id
                )));
            }
            for &p in &fam.accuracies {
                if !(0.0 < p && p < 1.0) {
                    return Err(FamvoteError::validation(format!(
                        "accuracy {p} out of (0, 1) in family `{}`",
                        fam.family_id
                    )));
                }
            }
        }
        if !(0.0 <= self.rho_b && self.rho_b <= self.rho_w && self.rho_w < 1.0) {
            return Err(FamvoteError::validation(format!(
                "need 0 <= rho_b <= rho_w < 1, got rho_b={}, rho_w={}",
                self.rho_b, self.rho_w
            )));
        }
        if self.n_questions == 0 {
            return Err(FamvoteError::validation("n_questions must be positive"));
        }
        if self.answer_space < 2 {
            return Err(FamvoteError::validation("answer_space must be at least 2"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SynthConfig> {
        let text = fs::read_to_string(path).map_err(|source| FamvoteError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: SynthConfig = toml::from_str(&text).map_err(|e| FamvoteError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).expect("synth config serializes");
        fs::write(path, text).map_err(|source| FamvoteError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Inverse standard normal CDF (Wichura's rational approximation,
/// absolute error below 1e-9 on (0, 1)).
pub fn inv_phi(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_813e4) * r
            + 6.726_577_092_700_87e4)
            * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5)
            * q;
        let den = ((((((5.226_495_278_852_854e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return num / den;
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_7e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// Standard normal density.
fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// P(X < t1, Y < t2) for standard bivariate normal with correlation rho,
/// by Simpson quadrature over x of phi(x) * Phi((t2 - rho x)/sqrt(1-rho^2)).
pub fn bvn_cdf(t1: f64, t2: f64, rho: f64) -> f64 {
    assert!(rho.abs() < 1.0, "latent correlation must be in (-1, 1)");
    if rho == 0.0 {
        return crate::stats::normal_cdf(t1) * crate::stats::normal_cdf(t2);
    }
    let lo = -8.5f64;
    let hi = t1.min(8.5);
    if hi <= lo {
        return 0.0;
    }
    let denom = (1.0 - rho * rho).sqrt();
    let f = |x: f64| phi(x) * crate::stats::normal_cdf((t2 - rho * x) / denom);
    let steps = 4000usize;
    let h = (hi - lo) / steps as f64;
    let mut sum = f(lo) + f(hi);
    for i in 1..steps {
        let x = lo + h * i as f64;
        sum += if i % 2 == 1 { 4.0 * f(x) } else { 2.0 * f(x) };
    }
    sum * h / 3.0
}

/// Pearson correlation of the binary indicators 1[X < PhiInv(p1)] and
/// 1[Y < PhiInv(p2)] under latent correlation rho.
pub fn binary_corr(p1: f64, p2: f64, rho: f64) -> f64 {
    let t1 = inv_phi(p1);
    let t2 = inv_phi(p2);
    let p11 = bvn_cdf(t1, t2, rho);
    let cov = p11 - p1 * p2;
    let denom = (p1 * (1.0 - p1) * p2 * (1.0 - p2)).sqrt();
    cov / denom
}

/// Finds the latent rho whose thresholded binary correlation at marginals
/// (p1, p2) equals `target`, by bisection on [0, 0.9999].
pub fn calibrate_latent_rho(p1: f64, p2: f64, target: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&target) {
        return Err(FamvoteError::usage(format!(
            "target binary correlation {target} out of [0, 1)"
        )));
    }
    if target == 0.0 {
        return Ok(0.0);
    }
    let mut lo = 0.0f64;
    let mut hi = 0.9999f64;
    if binary_corr(p1, p2, hi) < target {
        return Err(FamvoteError::usage(format!(
            "target binary correlation {target} unreachable at marginals ({p1}, {p2})"
        )));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if binary_corr(p1, p2, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Generator output: predictions, exact-mode labels, and the family map.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub predictions: Vec<PredictionSet>,
    pub labels: LabelSet,
    pub partition: FamilyPartition,
}

impl SynthOutput {
    /// Writes the pool in the standard dataset layout, so every command
    /// runs unchanged on it: `predictions/<model>.jsonl`, `labels.jsonl`,
    /// `families.toml`.
    pub fn write_dataset(&self, dir: &Path) -> Result<()> {
        for set in &self.predictions {
            crate::dataset::save_predictions(
                set,
                &dir.join("predictions").join(format!("{}.jsonl", set.model_id)),
            )?;
        }
        crate::dataset::save_labels(&self.labels, &dir.join("labels.jsonl"))?;
        crate::dataset::save_family_partition(&self.partition, &dir.join("families.toml"))
    }
}

fn answer_token(index: usize) -> String {
    format!("ans{index:03}")
}

/// Samples a standard normal by inverse transform (open-interval uniform).
fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return inv_phi(u);
        }
    }
}

/// Generates a synthetic ensemble. Same config means byte-identical output.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    // Canonical orders: families and models sorted by id, independent of
    // config order.
    let mut assignment: BTreeMap<String, String> = BTreeMap::new();
    let mut accuracy_of: BTreeMap<String, f64> = BTreeMap::new();
    for fam in &config.families {
        for (i, &p) in fam.accuracies.iter().enumerate() {
            let model_id = format!("{}_{i:02}", fam.family_id);
            if assignment.insert(model_id.clone(), fam.family_id.clone()).is_some() {
                return Err(FamvoteError::validation(format!(
                    "model id collision `{model_id}`"
                )));
            }
            accuracy_of.insert(model_id, p);
        }
    }
    let models: Vec<String> = assignment.keys().cloned().collect();
    let partition = FamilyPartition::from_assignment(&assignment, &models, None)?;
    let family_ids: Vec<String> = partition
        .families()
        .iter()
        .map(|(f, _)| f.clone())
        .collect();
    let family_index: BTreeMap<&str, usize> = family_ids
        .iter()
        .enumerate()
        .map(|(i, f)| (f.as_str(), i))
        .collect();
    let model_family: Vec<usize> = models
        .iter()
        .map(|m| family_index[partition.family_of(m).unwrap()])
        .collect();
    let thresholds: Vec<f64> = models.iter().map(|m| inv_phi(accuracy_of[m])).collect();

    let coef_g = config.rho_b.sqrt();
    let coef_h = (config.rho_w - config.rho_b).sqrt();
    let coef_e = (1.0 - config.rho_w).sqrt();

    // One RNG stream per question; draws happen in a fixed canonical order
    // (shared factor, then families, then models), so output is identical
    // at any thread count.
    let per_question: Vec<Vec<usize>> = (0..config.n_questions)
        .into_par_iter()
        .map(|q| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(q as u64);
            let g = sample_normal(&mut rng);
            let mut h = Vec::with_capacity(family_ids.len());
            let mut wrong_token = Vec::with_capacity(family_ids.len());
            for _ in &family_ids {
                h.push(sample_normal(&mut rng));
                wrong_token.push(rng.gen_range(1..config.answer_space));
            }
            models
                .iter()
                .enumerate()
                .map(|(m, _)| {
                    let e = sample_normal(&mut rng);
                    let fam = model_family[m];
                    let x = coef_g * g + coef_h * h[fam] + coef_e * e;
                    if x < thresholds[m] {
                        0
                    } else {
                        wrong_token[fam]
                    }
                })
                .collect()
        })
        .collect();

    let question_id = |q: usize| format!("q{q:05}");
    let predictions: Vec<PredictionSet> = models
        .iter()
        .enumerate()
        .map(|(m, model_id)| {
            let entries: BTreeMap<String, String> = (0..config.n_questions)
                .map(|q| (question_id(q), answer_token(per_question[q][m])))
                .collect();
            PredictionSet::new(model_id.clone(), entries)
        })
        .collect();
    let label_entries: BTreeMap<String, LabelRecord> = (0..config.n_questions)
        .map(|q| {
            (
                question_id(q),
                LabelRecord {
                    answers: LabelAnswers::Exact(answer_token(0)),
                    question_type: "synthetic".to_string(),
                },
            )
        })
        .collect();
    let labels = LabelSet::new(ScoreMode::Exact, label_entries)?;
    Ok(SynthOutput {
        predictions,
        labels,
        partition,
    })
}

/// One cell of the phase sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho_w: f64,
    pub rho_b: f64,
    pub layout: String,
    pub profile: String,
    /// Condition (i): positive within-vs-between correlation gap.
    pub cond_gap: bool,
    /// Condition (ii): every family's internal-vote accuracy above one half
    /// (measured, averaged over seeds).
    pub cond_pf: bool,
    /// Condition (iii): family sizes imbalanced.
    pub cond_imbalance: bool,
    /// Smallest family internal-vote accuracy, averaged over seeds.
    pub mean_min_pf: f64,
    /// Mean HFV minus calibrated accuracy over seeds.
    pub mean_gap: f64,
    /// Fraction of seeds with a strictly positive gap.
    pub frac_positive: f64,
    pub num_seeds: usize,
}

fn layout_families(layout: &str, profile: &str) -> Vec<FamilySpec> {
    let strong = 0.72;
    let weak_profile = profile == "weak-family";
    match layout {
        // One 5-member family among 7 singletons. The weak profile mixes
        // the big family's accuracies; its internal vote stays above one
        // half because calibrated weights handle sub-0.5 members.
        "one-big" => {
            let big_accs: Vec<f64> = if weak_profile {
                vec![0.55, 0.42, 0.40, 0.38, 0.36]
            } else {
                vec![strong; 5]
            };
            let mut fams = vec![FamilySpec {
                family_id: "big".to_string(),
                accuracies: big_accs,
            }];
            for i in 0..7 {
                fams.push(FamilySpec {
                    family_id: format!("solo{i}"),
                    accuracies: vec![strong],
                });
            }
            fams
        }
        // 12 singleton families: equal sizes, zero family structure. The
        // weak profile plants one near-random singleton whose family
        // accuracy is its own accuracy, putting it below one half.
        "balanced" => (0..12)
            .map(|i| FamilySpec {
                family_id: format!("solo{i:02}"),
                accuracies: vec![if weak_profile && i == 0 { 0.30 } else { strong }],
            })
            .collect(),
        // 4 equal blocks of 3. The weak profile makes one whole block
        // err together often enough that its internal vote drops below
        // one half.
        "equal-blocks" => (0..4)
            .map(|i| FamilySpec {
                family_id: format!("fam{i}"),
                accuracies: if weak_profile && i == 0 {
                    vec![0.20, 0.20, 0.20]
                } else {
                    vec![strong; 3]
                },
            })
            .collect(),
        other => panic!("unknown layout `{other}`"),
    }
}

/// Sweeps correlation gap, family imbalance, and family quality, reporting
/// the HFV-minus-calibrated gap per cell over the given seeds.
pub fn family_advantage_sweep(
    n_questions: usize,
    seeds: &[u64],
    answer_space: usize,
) -> Result<Vec<SweepRow>> {
    use crate::scoring::{EnsembleContext, SoftVariant};
    use crate::voting::{
        build_family_stats, make_weight_scheme, outcome_accuracy, run_method, Method, WeightKind,
        DEFAULT_EPSILON,
    };
    if seeds.is_empty() {
        return Err(FamvoteError::usage("sweep needs at least one seed"));
    }
    let rho_pairs = [(0.6, 0.3), (0.3, 0.3)];
    let layouts = ["one-big", "balanced", "equal-blocks"];
    let profiles = ["strong", "weak-family"];
    let mut rows = Vec::new();
    for &(rho_w, rho_b) in &rho_pairs {
        for layout in layouts {
            for profile in profiles {
                let mut gaps = Vec::with_capacity(seeds.len());
                let mut min_pf_sum = 0.0;
                for &seed in seeds {
                    let config = SynthConfig {
                        families: layout_families(layout, profile),
                        rho_w,
                        rho_b,
                        n_questions,
                        answer_space,
                        seed,
                    };
                    let out = generate(&config)?;
                    let ctx = EnsembleContext::build(
                        &out.predictions,
                        &out.labels,
                        SoftVariant::LeaveOneOut,
                    )?;
                    let weights =
                        make_weight_scheme(&ctx.matrix, WeightKind::Overall, DEFAULT_EPSILON)?;
                    let stats = build_family_stats(
                        &ctx,
                        &out.partition,
                        &weights,
                        DEFAULT_EPSILON,
                        None,
                    )?;
                    min_pf_sum += stats.iter().map(|s| s.p_f).fold(f64::INFINITY, f64::min);
                    let cal = run_method(&ctx, &out.partition, &weights, Method::Calibrated)?;
                    let hfv = run_method(
                        &ctx,
                        &out.partition,
                        &weights,
                        Method::Hfv {
                            alpha: 1.0,
                            tau: 0.0,
                        },
                    )?;
                    gaps.push(
                        outcome_accuracy(&ctx, &hfv.outcomes)
                            - outcome_accuracy(&ctx, &cal.outcomes),
                    );
                }
                let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
                let frac_positive =
                    gaps.iter().filter(|&&g| g > 0.0).count() as f64 / gaps.len() as f64;
                let mean_min_pf = min_pf_sum / seeds.len() as f64;
                rows.push(SweepRow {
                    rho_w,
                    rho_b,
                    layout: layout.to_string(),
                    profile: profile.to_string(),
                    cond_gap: rho_w > rho_b,
                    cond_pf: mean_min_pf > 0.5,
                    cond_imbalance: layout == "one-big",
                    mean_min_pf,
                    mean_gap,
                    frac_positive,
                    num_seeds: seeds.len(),
                });
            }
        }
    }
    Ok(rows)
}
