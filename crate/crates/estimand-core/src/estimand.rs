//! Estimand definitions and their estimators.
//!
//! Three estimands for the treatment difference at the analysis visit:
//!
//! * theoretic — the difference if every patient completed assigned
//!   treatment (hypothetical strategy for all ICEs);
//! * de facto — the treatment-policy difference, using all data regardless
//!   of ICEs;
//! * hybrid — "null" effect (reference profile plus the non-inferiority
//!   margin) for safety-related ICEs, hypothetical completion for the rest.
//!
//! Exact oracle values are computed from a simulator truth bundle; the
//! estimation pipelines combine data views, MMRM fits, reference-based
//! multiple imputation, and Rubin pooling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Arm, DataInclusionPolicy, Dataset};
use crate::error::{Error, Result};
use crate::ice::{classify_dataset, Category};
use crate::impute::{check_rules, impute, CellScope, ImputationRule, SubjectScope};
use crate::mmrm::{fit, fit_with_start, MmrmFit, MmrmModelSpec};
use crate::pool::{pool, MiEstimate, Tail};
use crate::seed::derive_seed;
use crate::sim::TruthBundle;

/// Which estimand a pipeline targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimandKind {
    Theoretic,
    DeFacto,
    Hybrid,
}

impl EstimandKind {
    pub fn parse(s: &str) -> Option<EstimandKind> {
        match s {
            "theoretic" => Some(EstimandKind::Theoretic),
            "defacto" | "de_facto" => Some(EstimandKind::DeFacto),
            "hybrid" => Some(EstimandKind::Hybrid),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            EstimandKind::Theoretic => "theoretic",
            EstimandKind::DeFacto => "defacto",
            EstimandKind::Hybrid => "hybrid",
        }
    }
}

/// Strategy applied to one ICE category under the hybrid estimand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryStrategy {
    /// Impute post-ICE cells by jump-to-reference (plus the margin in
    /// non-inferiority analyses): the "null effect" handling.
    NullViaReference,
    /// Leave post-ICE cells to the MAR likelihood (hypothetical completion).
    HypotheticalMar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimandSpec {
    pub kind: EstimandKind,
    /// Non-inferiority margin; 0 for superiority.
    pub delta: f64,
    pub smaller_is_better: bool,
    /// 1-based analysis visit; `None` uses the schedule's primary visit.
    pub analysis_visit: Option<u32>,
    pub alpha: f64,
    /// Hybrid per-category strategies, indexed by `Category::slot()`.
    pub strategy_map: [CategoryStrategy; 3],
}

impl EstimandSpec {
    pub fn new(kind: EstimandKind, delta: f64) -> Self {
        EstimandSpec {
            kind,
            delta,
            smaller_is_better: true,
            analysis_visit: None,
            alpha: 0.05,
            strategy_map: [
                CategoryStrategy::NullViaReference,
                CategoryStrategy::HypotheticalMar,
                CategoryStrategy::HypotheticalMar,
            ],
        }
    }

    pub fn theoretic() -> Self {
        Self::new(EstimandKind::Theoretic, 0.0)
    }

    pub fn defacto(delta: f64) -> Self {
        Self::new(EstimandKind::DeFacto, delta)
    }

    pub fn hybrid(delta: f64) -> Self {
        Self::new(EstimandKind::Hybrid, delta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta < 0.0 {
            return Err(Error::Config("delta must be nonnegative".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config("alpha must lie in (0,1)".into()));
        }
        Ok(())
    }

    /// Null value of the treatment difference under H0 and the tail of the
    /// alternative, in the outcome's own orientation.
    pub fn null_and_tail(&self) -> (f64, Tail) {
        if self.smaller_is_better {
            (self.delta, Tail::Less)
        } else {
            (-self.delta, Tail::Greater)
        }
    }
}

// ---------------------------------------------------------------------------
// Oracles over a truth bundle
// ---------------------------------------------------------------------------

fn check_exp_arm(truth: &TruthBundle, exp_arm: Arm) -> Result<usize> {
    if exp_arm.is_control() {
        return Err(Error::Config("experimental arm must not be arm 0".into()));
    }
    truth
        .arms
        .iter()
        .position(|a| *a == exp_arm)
        .ok_or_else(|| Error::Validation(format!("arm {exp_arm} not in truth bundle")))
}

/// Treatment difference if everyone completed assigned treatment: the mean
/// of Y_T(exp) - Y_T(0) over all subjects.
pub fn true_theoretic(truth: &TruthBundle, exp_arm: Arm) -> Result<f64> {
    let z = check_exp_arm(truth, exp_arm)?;
    let pos = truth.analysis_position();
    let n = truth.subjects.len() as f64;
    Ok(truth
        .subjects
        .iter()
        .map(|s| s.y_complete[z][pos] - s.y_complete[0][pos])
        .sum::<f64>()
        / n)
}

/// Treatment-policy difference: the mean of the policy outcomes (including
/// post-ICE drift) at the analysis visit.
pub fn true_defacto(truth: &TruthBundle, exp_arm: Arm) -> Result<f64> {
    let z = check_exp_arm(truth, exp_arm)?;
    let pos = truth.analysis_position();
    let n = truth.subjects.len() as f64;
    for s in &truth.subjects {
        if s.policy.len() <= z || s.policy[z].len() <= pos {
            return Err(Error::Validation(
                "policy trajectories missing from bundle".into(),
            ));
        }
    }
    Ok(truth
        .subjects
        .iter()
        .map(|s| s.policy[z][pos] - s.policy[0][pos])
        .sum::<f64>()
        / n)
}

/// Hybrid estimand, conditional-decomposition form:
/// E[Y(1)-Y(0) | S(1)=0] Pr(S(1)=0) + delta Pr(S(1)=1).
///
/// Written for the smaller-is-better orientation (delta >= 0 worsens the
/// experimental arm); negate delta for larger-is-better outcomes.
pub fn true_hybrid(truth: &TruthBundle, exp_arm: Arm, delta: f64) -> Result<f64> {
    let z = check_exp_arm(truth, exp_arm)?;
    let pos = truth.analysis_position();
    let n = truth.subjects.len() as f64;
    let n1 = truth.subjects.iter().filter(|s| s.cat1[z]).count() as f64;
    let pr1 = n1 / n;
    let adherent_sum: f64 = truth
        .subjects
        .iter()
        .filter(|s| !s.cat1[z])
        .map(|s| s.y_complete[z][pos] - s.y_complete[0][pos])
        .sum();
    let adherent_term = if n - n1 > 0.0 {
        (adherent_sum / (n - n1)) * (1.0 - pr1)
    } else {
        0.0
    };
    Ok(adherent_term + delta * pr1)
}

/// Hybrid estimand, subject-level form:
/// mean over subjects of (Y(1)-Y(0))(1-S(1)) + delta S(1).
/// Algebraically identical to `true_hybrid`; both are kept as independent
/// computation routes.
pub fn true_hybrid_pointwise(truth: &TruthBundle, exp_arm: Arm, delta: f64) -> Result<f64> {
    let z = check_exp_arm(truth, exp_arm)?;
    let pos = truth.analysis_position();
    let n = truth.subjects.len() as f64;
    Ok(truth
        .subjects
        .iter()
        .map(|s| {
            if s.cat1[z] {
                delta
            } else {
                s.y_complete[z][pos] - s.y_complete[0][pos]
            }
        })
        .sum::<f64>()
        / n)
}

/// The tempting-but-wrong decomposition
/// {Pr(S(1)=0) E[Y(1)] + Pr(S(1)=1)(delta + E[Y(0)])} - E[Y(0)],
/// which ignores that the adherent subpopulation's outcomes differ from the
/// population's. Equals the hybrid estimand only when S(1) is independent of
/// the outcomes.
pub fn naive_decomposition(truth: &TruthBundle, exp_arm: Arm, delta: f64) -> Result<f64> {
    let z = check_exp_arm(truth, exp_arm)?;
    let pos = truth.analysis_position();
    let n = truth.subjects.len() as f64;
    let pr1 = truth.subjects.iter().filter(|s| s.cat1[z]).count() as f64 / n;
    let e_y1 = truth
        .subjects
        .iter()
        .map(|s| s.y_complete[z][pos])
        .sum::<f64>()
        / n;
    let e_y0 = truth
        .subjects
        .iter()
        .map(|s| s.y_complete[0][pos])
        .sum::<f64>()
        / n;
    Ok((1.0 - pr1) * e_y1 + pr1 * (delta + e_y0) - e_y0)
}

// ---------------------------------------------------------------------------
// Estimation pipelines
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub n: usize,
    /// LS-mean change from baseline at the analysis visit.
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PooledDiagnostics {
    pub w_within: f64,
    pub b_between: f64,
    pub df: f64,
    pub m: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastResult {
    /// Experimental arm contrasted against arm 0.
    pub arm: Arm,
    pub value: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub df: f64,
    /// One-sided p-value against H0: difference = delta (oriented by the
    /// direction flag).
    pub p_value: f64,
    pub pooled: Option<PooledDiagnostics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub pipeline: String,
    pub m: usize,
    pub master_seed: u64,
    pub rules: Vec<String>,
    pub tool_version: String,
    pub spec_sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimandResult {
    pub kind: EstimandKind,
    pub delta: f64,
    pub smaller_is_better: bool,
    pub analysis_visit: u32,
    pub alpha: f64,
    pub endpoint_name: String,
    pub arms: Vec<ArmResult>,
    pub contrasts: Vec<ContrastResult>,
    pub provenance: Provenance,
}

fn spec_hash(spec: &EstimandSpec, m: usize, seed: u64) -> String {
    let payload = serde_json::json!({
        "spec": spec,
        "m": m,
        "seed": seed,
    });
    let mut hasher = Sha256::new();
    hasher.update(payload.to_string().as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Imputation rules realizing an estimand spec.
pub fn rules_for(spec: &EstimandSpec) -> Vec<ImputationRule> {
    match spec.kind {
        EstimandKind::Theoretic => Vec::new(),
        EstimandKind::DeFacto => vec![
            ImputationRule::jump_to_reference(SubjectScope::ExperimentalArms, spec.delta),
            ImputationRule::mar_own_arm(SubjectScope::ControlArm),
        ],
        EstimandKind::Hybrid => {
            let mut rules = Vec::new();
            for category in Category::ALL {
                if spec.strategy_map[category.slot()] == CategoryStrategy::NullViaReference {
                    rules.push(
                        ImputationRule::jump_to_reference(SubjectScope::ExperimentalArms, spec.delta)
                            .with_category(category)
                            .with_cells(CellScope::PostIceMissing),
                    );
                    // reference-based imputation from arm 0 to arm 0 is MAR
                    rules.push(
                        ImputationRule::mar_own_arm(SubjectScope::ControlArm)
                            .with_category(category)
                            .with_cells(CellScope::PostIceMissing),
                    );
                }
            }
            rules
        }
    }
}

struct PerImputationAnalysis {
    contrasts: Vec<MiEstimate>, // one per experimental arm
    means: Vec<MiEstimate>,     // one per arm
}

fn analyze_fit(
    fitted: &MmrmFit,
    exp_arms: &[Arm],
    all_arms: &[Arm],
    visit: u32,
    alpha: f64,
) -> Result<PerImputationAnalysis> {
    let mut contrasts = Vec::with_capacity(exp_arms.len());
    for &arm in exp_arms {
        let c = fitted.contrast(arm, Arm::CONTROL, visit, alpha)?;
        contrasts.push(MiEstimate {
            value: c.value,
            se: c.se,
            complete_df: fitted.residual_df,
        });
    }
    let mut means = Vec::with_capacity(all_arms.len());
    for &arm in all_arms {
        let e = fitted.ls_mean_change(arm, visit)?;
        means.push(MiEstimate {
            value: e.value,
            se: e.se,
            complete_df: fitted.residual_df,
        });
    }
    Ok(PerImputationAnalysis { contrasts, means })
}

/// Run the estimation pipeline for one estimand on one dataset.
///
/// Deterministic in (dataset, spec, m, master_seed): imputation draws come
/// from counter-derived streams and per-imputation analyses are combined in
/// imputation order, so parallel and sequential execution agree exactly.
pub fn estimate(dataset: &Dataset, spec: &EstimandSpec, m: usize, master_seed: u64) -> Result<EstimandResult> {
    spec.validate()?;
    let classified = classify_dataset(dataset);
    let report = classified.validate();
    if !report.is_clean() {
        return Err(Error::Validation(format!(
            "dataset has {} violation(s); first: {}",
            report.violations.len(),
            report.violations[0].message
        )));
    }
    let visit = spec
        .analysis_visit
        .unwrap_or(classified.schedule.analysis_visit);
    if classified.schedule.position(visit).is_none() {
        return Err(Error::Validation(format!("analysis visit {visit} outside schedule")));
    }
    if spec.smaller_is_better != classified.smaller_is_better && spec.delta > 0.0 {
        return Err(Error::Config(
            "direction flag disagrees with dataset metadata while a margin is in use".into(),
        ));
    }

    let arms = classified.arms();
    let exp_arms: Vec<Arm> = arms.iter().copied().filter(|a| !a.is_control()).collect();
    let (null_value, tail) = spec.null_and_tail();
    let model = MmrmModelSpec::default();

    let stage = |what: &str, e: Error| -> Error {
        match e {
            Error::Numerical { stage, msg } => Error::Numerical {
                stage: format!("{what}/{stage}"),
                msg,
            },
            other => other,
        }
    };

    let (arm_results, contrast_results, rules_desc) = match spec.kind {
        EstimandKind::Theoretic => {
            let view = classified.analysis_view(DataInclusionPolicy::OnTreatmentOnly)?;
            let fitted = fit(&view, &model).map_err(|e| stage("theoretic-mmrm", e))?;
            let mut arm_results = Vec::new();
            for &arm in &arms {
                let e = fitted.ls_mean_change(arm, visit)?;
                arm_results.push(ArmResult {
                    arm,
                    n: classified.n_in_arm(arm),
                    mean: e.value,
                    se: e.se,
                });
            }
            let mut contrast_results = Vec::new();
            for &arm in &exp_arms {
                let c = fitted.contrast(arm, Arm::CONTROL, visit, spec.alpha)?;
                contrast_results.push(ContrastResult {
                    arm,
                    value: c.value,
                    se: c.se,
                    ci_low: c.ci_low,
                    ci_high: c.ci_high,
                    df: c.df,
                    p_value: c.one_sided_p(null_value, tail == Tail::Less),
                    pooled: None,
                });
            }
            (arm_results, contrast_results, Vec::new())
        }
        EstimandKind::DeFacto | EstimandKind::Hybrid => {
            let policy = match spec.kind {
                EstimandKind::DeFacto => DataInclusionPolicy::AllAvailable,
                _ => DataInclusionPolicy::OnTreatmentOnly,
            };
            let view = classified.analysis_view(policy)?;
            let base = fit(&view, &model).map_err(|e| stage("base-mmrm", e))?;
            let rules = rules_for(spec);
            let require_complete = spec.kind == EstimandKind::DeFacto;
            check_rules(&view, &rules, require_complete)?;
            let imputed = impute(&view, &rules, &base, m, master_seed)
                .map_err(|e| stage("imputation", e))?;

            let analyses: Vec<Result<PerImputationAnalysis>> = imputed
                .completed
                .par_iter()
                .map(|ds| {
                    let fitted = fit_with_start(ds, &model, Some(&base.theta))
                        .map_err(|e| stage("imputation-mmrm", e))?;
                    analyze_fit(&fitted, &exp_arms, &arms, visit, spec.alpha)
                })
                .collect();
            let mut per_imp = Vec::with_capacity(m);
            for a in analyses {
                per_imp.push(a?);
            }

            let mut contrast_results = Vec::new();
            for (i, &arm) in exp_arms.iter().enumerate() {
                let series: Vec<MiEstimate> = per_imp.iter().map(|a| a.contrasts[i]).collect();
                let pooled = pool(&series, spec.alpha, null_value, tail)?;
                contrast_results.push(ContrastResult {
                    arm,
                    value: pooled.q_bar,
                    se: pooled.se(),
                    ci_low: pooled.ci_low,
                    ci_high: pooled.ci_high,
                    df: pooled.df,
                    p_value: pooled.p_value,
                    pooled: Some(PooledDiagnostics {
                        w_within: pooled.w_within,
                        b_between: pooled.b_between,
                        df: pooled.df,
                        m,
                    }),
                });
            }
            let mut arm_results = Vec::new();
            for (i, &arm) in arms.iter().enumerate() {
                let series: Vec<MiEstimate> = per_imp.iter().map(|a| a.means[i]).collect();
                let pooled = pool(&series, spec.alpha, 0.0, Tail::Less)?;
                arm_results.push(ArmResult {
                    arm,
                    n: classified.n_in_arm(arm),
                    mean: pooled.q_bar,
                    se: pooled.se(),
                });
            }
            (
                arm_results,
                contrast_results,
                rules.iter().map(|r| r.describe()).collect(),
            )
        }
    };

    Ok(EstimandResult {
        kind: spec.kind,
        delta: spec.delta,
        smaller_is_better: spec.smaller_is_better,
        analysis_visit: visit,
        alpha: spec.alpha,
        endpoint_name: classified.endpoint_name.clone(),
        arms: arm_results,
        contrasts: contrast_results,
        provenance: Provenance {
            pipeline: spec.kind.label().to_string(),
            m,
            master_seed,
            rules: rules_desc,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            spec_sha256: spec_hash(spec, m, master_seed),
        },
    })
}

/// Seed for the analysis of replication `r` in a Monte-Carlo run.
pub fn replication_seed(master: u64, replication: usize) -> u64 {
    derive_seed(master, &[0xA11, replication as u64])
}

// ---------------------------------------------------------------------------
// Plug-in estimator
// ---------------------------------------------------------------------------

/// Direct plug-in estimator: the across-imputation average of
/// (experimental-arm mean) - (control-arm mean) of completed values at the
/// analysis visit. The margin enters through the imputed values themselves.
///
/// Every subject must have a value at the analysis visit in every completed
/// dataset (fill partially imputed datasets with model means first), and
/// every experimental-arm subject with an ICE must be classified.
pub fn plug_in_mu_hat(completed: &[Dataset], exp_arm: Arm, visit: u32) -> Result<f64> {
    if completed.is_empty() {
        return Err(Error::Config("no completed datasets".into()));
    }
    let mut total = 0.0;
    for ds in completed {
        let pos = ds
            .schedule
            .position(visit)
            .ok_or_else(|| Error::Validation(format!("visit {visit} outside schedule")))?;
        let mut sum_exp = 0.0;
        let mut n_exp = 0.0;
        let mut sum_ctl = 0.0;
        let mut n_ctl = 0.0;
        for s in &ds.subjects {
            if s.arm == exp_arm && s.ice.is_some() && s.ice_category.is_none() {
                return Err(Error::Validation(format!(
                    "subject `{}` has an unclassified ICE",
                    s.id
                )));
            }
            let value = s.outcomes[pos].ok_or_else(|| {
                Error::Validation(format!(
                    "subject `{}` missing at analysis visit in a completed dataset",
                    s.id
                ))
            })?;
            if s.arm == exp_arm {
                sum_exp += value;
                n_exp += 1.0;
            } else if s.arm.is_control() {
                sum_ctl += value;
                n_ctl += 1.0;
            }
        }
        if n_exp == 0.0 || n_ctl == 0.0 {
            return Err(Error::Validation("empty arm in plug-in computation".into()));
        }
        total += sum_exp / n_exp - sum_ctl / n_ctl;
    }
    Ok(total / completed.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VisitSchedule;
    use crate::sim::{scenario_by_name, simulate, SubjectTruth};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn bundle(subjects: Vec<SubjectTruth>) -> TruthBundle {
        TruthBundle {
            schedule: VisitSchedule::from_weeks(&[4.0]).unwrap(),
            arms: vec![Arm(0), Arm(1)],
            subjects,
        }
    }

    fn subj(y0: f64, y1: f64, s1: bool) -> SubjectTruth {
        SubjectTruth {
            id: "x".into(),
            assigned: Arm(0),
            baseline: 8.0,
            y_complete: vec![vec![y0], vec![y1]],
            policy: vec![vec![y0], vec![y1]],
            cat1: vec![false, s1],
            ice: vec![None, None],
        }
    }

    #[test]
    fn hybrid_boundary_cases() {
        // no Category-1 events: plain treatment difference
        let b = bundle(vec![subj(0.0, -1.0, false), subj(0.5, -0.75, false)]);
        assert_relative_eq!(true_hybrid(&b, Arm(1), 0.4).unwrap(), -1.125, epsilon = 1e-12);
        assert_relative_eq!(
            true_hybrid(&b, Arm(1), 0.4).unwrap(),
            true_theoretic(&b, Arm(1)).unwrap(),
            epsilon = 1e-12
        );
        // everyone has a Category-1 event: the margin itself
        let b = bundle(vec![subj(0.0, -1.0, true), subj(0.5, -0.75, true)]);
        assert_relative_eq!(true_hybrid(&b, Arm(1), 0.4).unwrap(), 0.4, epsilon = 1e-15);
    }

    #[test]
    fn hybrid_direct_evaluation() {
        // E[Y(1)-Y(0)|S=0] = -1.0, Pr(S=1) = 0.2, delta = 0 -> -0.8
        let mut subjects = vec![subj(0.0, -1.0, false); 8];
        subjects.push(subj(0.0, 5.0, true));
        subjects.push(subj(0.0, 7.0, true));
        let b = bundle(subjects);
        assert_relative_eq!(true_hybrid(&b, Arm(1), 0.0).unwrap(), -0.8, epsilon = 1e-12);
    }

    #[test]
    fn both_forms_agree_on_random_bundles() {
        let mut rng = crate::seed::rng_at(11, &[0]);
        for _ in 0..1000 {
            let n = 3 + (rng.random::<u32>() % 40) as usize;
            let delta = rng.random::<f64>();
            let subjects: Vec<SubjectTruth> = (0..n)
                .map(|_| {
                    subj(
                        4.0 * rng.random::<f64>() - 2.0,
                        4.0 * rng.random::<f64>() - 2.0,
                        rng.random::<f64>() < 0.3,
                    )
                })
                .collect();
            let b = bundle(subjects);
            let a = true_hybrid(&b, Arm(1), delta).unwrap();
            let c = true_hybrid_pointwise(&b, Arm(1), delta).unwrap();
            assert!((a - c).abs() <= 1e-12, "{a} vs {c}");
        }
    }

    #[test]
    fn six_subject_bundle_shows_non_equivalence() {
        // Subjects with S(1)=1 have Y(1)-Y(0) shifted by -2 relative to the
        // rest, so selecting on S(1) matters.
        //
        // Adherent (S=0): diffs -1, -1, 0, 0 -> E[diff|S=0] = -0.5
        // Cat-1 (S=1): y1 shifted by -2: diffs -3, -2 (never used by the
        // hybrid, which replaces them with delta)
        let subjects = vec![
            subj(0.0, -1.0, false),
            subj(0.5, -0.5, false),
            subj(-0.25, -0.25, false),
            subj(1.0, 1.0, false),
            subj(0.0, -3.0, true),
            subj(0.5, -1.5, true),
        ];
        let b = bundle(subjects);
        let delta = 0.4;
        // by hand: Pr1 = 1/3, E[diff|S=0] = -0.5
        // hybrid = (2/3)(-0.5) + (1/3)(0.4) = -0.2
        let hybrid = true_hybrid(&b, Arm(1), delta).unwrap();
        assert_relative_eq!(hybrid, -0.2, epsilon = 1e-12);
        // naive: E[Y1] = (-1 -0.5 -0.25 +1 -3 -1.5)/6 = -0.875
        //        E[Y0] = (0 +0.5 -0.25 +1 +0 +0.5)/6 = 0.291666..
        // naive = (2/3)(-0.875) + (1/3)(0.4 + 0.2916..) - 0.2916..
        let e_y0 = (0.0 + 0.5 - 0.25 + 1.0 + 0.0 + 0.5) / 6.0;
        let e_y1 = (-1.0 - 0.5 - 0.25 + 1.0 - 3.0 - 1.5) / 6.0;
        let naive_hand = (2.0 / 3.0) * e_y1 + (1.0 / 3.0) * (delta + e_y0) - e_y0;
        let naive = naive_decomposition(&b, Arm(1), delta).unwrap();
        assert_relative_eq!(naive, naive_hand, epsilon = 1e-12);
        assert!(
            (naive - hybrid).abs() > 0.05,
            "constructed bundle should separate the two: {naive} vs {hybrid}"
        );
        // with all S=0 they coincide exactly
        let b0 = bundle(vec![subj(0.1, -0.9, false), subj(0.3, -0.2, false)]);
        assert_relative_eq!(
            naive_decomposition(&b0, Arm(1), delta).unwrap(),
            true_hybrid(&b0, Arm(1), delta).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn naive_equals_hybrid_under_independence_in_expectation() {
        // S(1) independent of outcomes: the two estimands agree in
        // expectation; check the mean gap over replicated bundles.
        let mut rng = crate::seed::rng_at(23, &[0]);
        let reps = 400;
        let mut gaps = Vec::with_capacity(reps);
        for _ in 0..reps {
            let subjects: Vec<SubjectTruth> = (0..80)
                .map(|_| {
                    subj(
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 1.0,
                        rng.random::<f64>() < 0.25,
                    )
                })
                .collect();
            let b = bundle(subjects);
            gaps.push(
                naive_decomposition(&b, Arm(1), 0.3).unwrap()
                    - true_hybrid(&b, Arm(1), 0.3).unwrap(),
            );
        }
        let mean = gaps.iter().sum::<f64>() / reps as f64;
        let sd = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let mc_se = sd / (reps as f64).sqrt();
        assert!(mean.abs() <= 4.0 * mc_se, "mean gap {mean}, mc se {mc_se}");
    }

    #[test]
    fn delta_linearity_with_slope_pr_s1() {
        let mut rng = crate::seed::rng_at(31, &[0]);
        let subjects: Vec<SubjectTruth> = (0..50)
            .map(|_| {
                subj(
                    rng.random::<f64>(),
                    rng.random::<f64>() - 1.0,
                    rng.random::<f64>() < 0.3,
                )
            })
            .collect();
        let pr1 = subjects.iter().filter(|s| s.cat1[1]).count() as f64 / 50.0;
        let b = bundle(subjects);
        let v0 = true_hybrid(&b, Arm(1), 0.0).unwrap();
        let v1 = true_hybrid(&b, Arm(1), 0.2).unwrap();
        let v2 = true_hybrid(&b, Arm(1), 0.4).unwrap();
        assert_relative_eq!(v1 - v0, 0.2 * pr1, epsilon = 1e-12);
        assert_relative_eq!(v2 - v1, 0.2 * pr1, epsilon = 1e-12);
        // affine: midpoint matches exactly
        assert_relative_eq!(v1, 0.5 * (v0 + v2), epsilon = 1e-12);
    }

    #[test]
    fn hybrid_lies_in_mixture_bounds() {
        let mut rng = crate::seed::rng_at(37, &[0]);
        for _ in 0..50 {
            let subjects: Vec<SubjectTruth> = (0..40)
                .map(|_| {
                    subj(
                        rng.random::<f64>() - 0.5,
                        2.0 * rng.random::<f64>() - 1.5,
                        rng.random::<f64>() < 0.4,
                    )
                })
                .collect();
            let b = bundle(subjects);
            let delta = 0.4;
            let z = 1usize;
            let n = b.subjects.len() as f64;
            let n1 = b.subjects.iter().filter(|s| s.cat1[z]).count() as f64;
            if n1 == 0.0 || n1 == n {
                continue;
            }
            let adherent = b
                .subjects
                .iter()
                .filter(|s| !s.cat1[z])
                .map(|s| s.y_complete[z][0] - s.y_complete[0][0])
                .sum::<f64>()
                / (n - n1);
            let h = true_hybrid(&b, Arm(1), delta).unwrap();
            let lo = adherent.min(delta);
            let hi = adherent.max(delta);
            assert!(h >= lo - 1e-12 && h <= hi + 1e-12, "{h} not in [{lo}, {hi}]");
        }
    }

    #[test]
    fn no_ice_dataset_gives_identical_pipelines() {
        let mut config = scenario_by_name("j2r_correct").unwrap();
        config.cat1_per_visit_hazard = vec![0.0, 0.0];
        config.cat2_threshold = f64::INFINITY;
        config.cat3_per_visit_hazard = 0.0;
        config.intermittent_missing = 0.03; // keep some MAR gaps
        config.n_per_arm = vec![80, 80];
        let (ds, _) = simulate(&config).unwrap();

        let m = 30;
        let seed = 99;
        let theo = estimate(&ds, &EstimandSpec::theoretic(), m, seed).unwrap();
        let hybrid = estimate(&ds, &EstimandSpec::hybrid(0.0), m, seed).unwrap();
        let defacto = estimate(&ds, &EstimandSpec::defacto(0.0), m, seed).unwrap();

        // hybrid has no targeted cells: exactly the theoretic fit
        assert_relative_eq!(
            theo.contrasts[0].value,
            hybrid.contrasts[0].value,
            epsilon = 1e-10
        );
        assert!(hybrid.contrasts[0].pooled.as_ref().unwrap().b_between < 1e-20);
        // de facto imputes the MCAR gaps: agreement within MI noise
        let b = defacto.contrasts[0].pooled.as_ref().unwrap().b_between;
        let tol = 3.0 * (b / m as f64).sqrt() + 1e-9;
        assert!(
            (defacto.contrasts[0].value - theo.contrasts[0].value).abs() <= tol,
            "defacto {} vs theoretic {} (tol {tol})",
            defacto.contrasts[0].value,
            theo.contrasts[0].value
        );
    }

    #[test]
    fn estimate_is_deterministic() {
        let config = scenario_by_name("j2r_correct").unwrap();
        let mut small = config.clone();
        small.n_per_arm = vec![60, 60];
        let (ds, _) = simulate(&small).unwrap();
        let spec = EstimandSpec::hybrid(0.0);
        let a = estimate(&ds, &spec, 10, 7).unwrap();
        let b = estimate(&ds, &spec, 10, 7).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = estimate(&ds, &spec, 10, 8).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn plug_in_reduces_to_arm_means_on_complete_data() {
        let mut config = scenario_by_name("j2r_correct").unwrap();
        config.cat1_per_visit_hazard = vec![0.0, 0.0];
        config.cat2_threshold = f64::INFINITY;
        config.cat3_per_visit_hazard = 0.0;
        config.intermittent_missing = 0.0;
        config.n_per_arm = vec![50, 50];
        let (ds, _) = simulate(&config).unwrap();
        let pos = ds.schedule.analysis_position();
        let mean = |arm: Arm| {
            let vals: Vec<f64> = ds
                .subjects
                .iter()
                .filter(|s| s.arm == arm)
                .map(|s| s.outcomes[pos].unwrap())
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let expected = mean(Arm(1)) - mean(Arm(0));
        let got = plug_in_mu_hat(
            std::slice::from_ref(&ds),
            Arm(1),
            ds.schedule.analysis_visit,
        )
        .unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
    }
}
