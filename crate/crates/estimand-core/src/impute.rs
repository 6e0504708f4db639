//! Multiple-imputation engine: proper parameter draws from a converged MMRM,
//! conditional-normal imputation, jump-to-reference profiles (with optional
//! non-inferiority shift), own-arm MAR imputation, and return-to-baseline.
//!
//! Determinism: (dataset, rules, M, master_seed) fully determine the result.
//! Per-imputation and per-subject RNG streams are derived from the master
//! seed by counter, so parallel and sequential execution agree bit for bit.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::ice::Category;
use crate::mmrm::{CovarianceEstimate, MmrmFit};
use crate::seed::{derive_seed, rng_at};

const SEED_DRAW: u64 = 0x11;
const SEED_SUBJECT: u64 = 0x22;

/// Which imputation model a rule applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// Impute from the subject's own arm profile (MAR).
    MarOwnArm,
    /// Jump to the reference arm's profile after the deviation visit.
    JumpToReference,
    /// Jump to reference, then shift post-deviation imputed values by the
    /// non-inferiority margin.
    JumpToReferencePlusNim,
    /// Post-deviation mean returns to the subject's baseline.
    ReturnToBaseline,
}

/// Which subjects a rule matches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectScope {
    All,
    ControlArm,
    ExperimentalArms,
    Arm(Arm),
}

/// Which missing cells of a matched subject are targeted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellScope {
    AllMissing,
    /// Only missing cells at or after the ICE onset visit.
    PostIceMissing,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImputationRule {
    pub kind: RuleKind,
    /// Reference arm for the jump kinds; arm 0 unless overridden.
    pub reference_arm: Arm,
    /// Non-inferiority margin, used by `JumpToReferencePlusNim` only.
    pub nim: f64,
    pub scope: SubjectScope,
    /// When set, only subjects whose governing ICE has this category match.
    pub category: Option<Category>,
    pub cells: CellScope,
}

impl ImputationRule {
    pub fn mar_own_arm(scope: SubjectScope) -> Self {
        ImputationRule {
            kind: RuleKind::MarOwnArm,
            reference_arm: Arm::CONTROL,
            nim: 0.0,
            scope,
            category: None,
            cells: CellScope::AllMissing,
        }
    }

    pub fn jump_to_reference(scope: SubjectScope, nim: f64) -> Self {
        ImputationRule {
            kind: if nim > 0.0 {
                RuleKind::JumpToReferencePlusNim
            } else {
                RuleKind::JumpToReference
            },
            reference_arm: Arm::CONTROL,
            nim,
            scope,
            category: None,
            cells: CellScope::AllMissing,
        }
    }

    pub fn with_category(mut self, category: Category) -> Self {
        self.category = Some(category);
        self
    }

    pub fn with_cells(mut self, cells: CellScope) -> Self {
        self.cells = cells;
        self
    }

    pub fn matches(&self, subject: &SubjectRecord) -> bool {
        let scope_ok = match self.scope {
            SubjectScope::All => true,
            SubjectScope::ControlArm => subject.arm.is_control(),
            SubjectScope::ExperimentalArms => !subject.arm.is_control(),
            SubjectScope::Arm(a) => subject.arm == a,
        };
        let cat_ok = match self.category {
            None => true,
            Some(c) => subject.ice_category == Some(c),
        };
        scope_ok && cat_ok
    }

    pub fn describe(&self) -> String {
        format!(
            "{:?} scope={:?} category={:?} cells={:?} reference={} nim={}",
            self.kind, self.scope, self.category, self.cells, self.reference_arm, self.nim
        )
    }
}

/// One (beta, Sigma) draw from the approximate sampling distribution of the
/// REML estimates.
#[derive(Debug, Clone)]
pub struct ParameterDraw {
    pub beta: DVector<f64>,
    pub sigma: CovarianceEstimate,
}

/// M completed datasets plus everything needed to reproduce them.
#[derive(Debug, Clone)]
pub struct ImputedSet {
    pub m: usize,
    pub completed: Vec<Dataset>,
    pub master_seed: u64,
    pub per_imputation_seeds: Vec<u64>,
    pub parameter_draws: Vec<ParameterDraw>,
}

// ---------------------------------------------------------------------------
// Parameter draws
// ---------------------------------------------------------------------------

fn chol_lower(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    nalgebra::linalg::Cholesky::new(m.clone())
        .map(|c| c.l())
        .ok_or_else(|| Error::numerical("draw", format!("{what} not positive definite")))
}

/// Draw fixed effects from N(beta, vcov_beta) and a covariance from the
/// asymptotic normal on the log-Cholesky parameters (mapped back, so the
/// result is positive definite by construction).
pub fn draw_parameters(fit: &MmrmFit, seed: u64) -> Result<ParameterDraw> {
    let mut rng = rng_at(seed, &[SEED_DRAW]);
    draw_parameters_with_rng(fit, &mut rng)
}

pub fn draw_parameters_with_rng(fit: &MmrmFit, rng: &mut ChaCha8Rng) -> Result<ParameterDraw> {
    let l_beta = chol_lower(&fit.vcov_beta, "vcov_beta")?;
    let z_beta = DVector::from_iterator(
        fit.beta.len(),
        (0..fit.beta.len()).map(|_| StandardNormal.sample(rng)),
    );
    let beta = &fit.beta + l_beta * z_beta;

    let l_theta = chol_lower(&fit.theta_cov, "theta covariance")?;
    let z_theta = DVector::from_iterator(
        fit.theta.len(),
        (0..fit.theta.len()).map(|_| StandardNormal.sample(rng)),
    );
    let theta = &fit.theta + l_theta * z_theta;
    let sigma = fit.covariance_from_theta(&theta)?;
    Ok(ParameterDraw { beta, sigma })
}

// ---------------------------------------------------------------------------
// Conditional normal
// ---------------------------------------------------------------------------

/// Conditional mean and covariance of the `missing` coordinates given the
/// observed ones, under N(mu, sigma).
pub fn conditional_moments(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    observed: &[(usize, f64)],
    missing: &[usize],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let nm = missing.len();
    let no = observed.len();
    let mu_m = DVector::from_iterator(nm, missing.iter().map(|&i| mu[i]));
    let sig_mm = DMatrix::from_fn(nm, nm, |r, c| sigma[(missing[r], missing[c])]);
    if no == 0 {
        return Ok((mu_m, sig_mm));
    }
    let sig_oo = DMatrix::from_fn(no, no, |r, c| sigma[(observed[r].0, observed[c].0)]);
    let sig_mo = DMatrix::from_fn(nm, no, |r, c| sigma[(missing[r], observed[c].0)]);
    let resid_o = DVector::from_iterator(no, observed.iter().map(|&(i, y)| y - mu[i]));

    let chol = nalgebra::linalg::Cholesky::new(sig_oo)
        .ok_or_else(|| Error::numerical("conditional", "observed-block covariance singular"))?;
    let diag = chol.l_dirty().diagonal();
    let dmin = diag.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    let dmax = diag.iter().fold(0.0_f64, |a, &v| a.max(v));
    if !(dmin > 0.0) || (dmax / dmin).powi(2) > 1e12 {
        return Err(Error::numerical(
            "conditional",
            "observed-block covariance ill-conditioned (beyond 1e12)",
        ));
    }
    // mu_m + S_mo S_oo^-1 (y_o - mu_o); S_mm - S_mo S_oo^-1 S_om
    let solved_resid = chol.solve(&resid_o);
    let solved_cross = chol.solve(&sig_mo.transpose());
    let mean = mu_m + &sig_mo * solved_resid;
    let cov = sig_mm - &sig_mo * solved_cross;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((mean, cov))
}

/// Draw the missing coordinates from their conditional normal law.
pub fn conditional_draw(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    observed: &[(usize, f64)],
    missing: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if missing.is_empty() {
        return Ok(Vec::new());
    }
    let (mean, cov) = conditional_moments(mu, sigma, observed, missing)?;
    let nm = missing.len();
    // conditional covariance is PSD; floor tiny negative eigenvalues from
    // rounding via an eigendecomposition fallback
    let l = match nalgebra::linalg::Cholesky::new(cov.clone()) {
        Some(c) => c.l(),
        None => {
            let eig = nalgebra::linalg::SymmetricEigen::new(cov);
            let mut l = DMatrix::zeros(nm, nm);
            for i in 0..nm {
                let v = eig.eigenvalues[i].max(0.0).sqrt();
                for r in 0..nm {
                    l[(r, i)] = eig.eigenvectors[(r, i)] * v;
                }
            }
            l
        }
    };
    let z = DVector::from_iterator(nm, (0..nm).map(|_| StandardNormal.sample(rng)));
    let draw = mean + l * z;
    Ok(draw.iter().copied().collect())
}

/// Impute a subject's targeted missing cells given a profile (mu, sigma),
/// conditioning on all observed values. Returns the completed outcome vector;
/// non-targeted missing cells stay missing.
pub fn impute_subject(
    subject: &SubjectRecord,
    targeted: &[usize],
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Option<f64>>> {
    let observed: Vec<(usize, f64)> = subject
        .outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|y| (i, y)))
        .collect();
    let draws = conditional_draw(mu, sigma, &observed, targeted, rng)?;
    let mut out = subject.outcomes.clone();
    for (&pos, &value) in targeted.iter().zip(&draws) {
        out[pos] = Some(value);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Jump-to-reference / return-to-baseline profiles
// ---------------------------------------------------------------------------

/// Mean and covariance for a subject who deviates after visit position k
/// (0-based count of on-treatment visits): own-arm model mean through k,
/// reference-arm mean after, both at the subject's baseline.
///
/// With a shared covariance the jump covariance equals it exactly. With
/// per-arm covariances the pre-deviation block is the subject's own arm's and
/// the conditional law of post- given pre-deviation visits equals the
/// reference arm's.
pub fn build_j2r_profile(
    fit: &MmrmFit,
    draw: &ParameterDraw,
    subject: &SubjectRecord,
    k: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let t = fit.n_visits;
    if k > t {
        return Err(Error::Config(format!("deviation index {k} beyond {t} visits")));
    }
    let reference = Arm::CONTROL;
    if !fit.arms.contains(&reference) {
        return Err(Error::Validation("reference arm absent from fit".into()));
    }
    let own = fit.mean_profile_with(&draw.beta, subject.arm, subject.baseline)?;
    let refp = fit.mean_profile_with(&draw.beta, reference, subject.baseline)?;
    let mut mu = DVector::zeros(t);
    for pos in 0..t {
        mu[pos] = if pos < k { own[pos] } else { refp[pos] };
    }

    let arm_idx = fit
        .arms
        .iter()
        .position(|a| *a == subject.arm)
        .ok_or_else(|| Error::Validation(format!("arm {} not in fit", subject.arm)))?;
    let sigma = match &draw.sigma {
        CovarianceEstimate::Shared(s) => s.clone(),
        CovarianceEstimate::PerArm(mats) => {
            let own_s = &mats[arm_idx];
            let ref_s = &mats[0];
            if k == 0 {
                ref_s.clone()
            } else if k == t {
                own_s.clone()
            } else {
                j2r_covariance(own_s, ref_s, k)?
            }
        }
    };
    Ok((mu, sigma))
}

/// Piece together the jump covariance: own-arm block before deviation, the
/// reference arm's conditional law (regression and residual covariance)
/// after.
fn j2r_covariance(own: &DMatrix<f64>, reference: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let t = own.nrows();
    let pre: Vec<usize> = (0..k).collect();
    let post: Vec<usize> = (k..t).collect();
    let own_11 = DMatrix::from_fn(k, k, |r, c| own[(pre[r], pre[c])]);
    let ref_11 = DMatrix::from_fn(k, k, |r, c| reference[(pre[r], pre[c])]);
    let ref_21 = DMatrix::from_fn(t - k, k, |r, c| reference[(post[r], pre[c])]);
    let ref_22 = DMatrix::from_fn(t - k, t - k, |r, c| reference[(post[r], post[c])]);

    let chol = nalgebra::linalg::Cholesky::new(ref_11)
        .ok_or_else(|| Error::numerical("j2r", "reference pre-deviation block singular"))?;
    // regression of post on pre under the reference law
    let reg = chol.solve(&ref_21.transpose()).transpose(); // (t-k) x k
    let schur = &ref_22 - &reg * ref_21.transpose();

    let s_21 = &reg * &own_11;
    let s_22 = schur + &reg * &own_11 * reg.transpose();

    let mut out = DMatrix::zeros(t, t);
    for r in 0..k {
        for c in 0..k {
            out[(r, c)] = own_11[(r, c)];
        }
    }
    for r in 0..(t - k) {
        for c in 0..k {
            out[(k + r, c)] = s_21[(r, c)];
            out[(c, k + r)] = s_21[(r, c)];
        }
    }
    for r in 0..(t - k) {
        for c in 0..(t - k) {
            out[(k + r, k + c)] = s_22[(r, c)];
        }
    }
    Ok((&out + out.transpose()) * 0.5)
}

/// Shift values by the non-inferiority margin: +delta when smaller outcomes
/// mean better efficacy (the imputed deficit becomes exactly "null" at the
/// margin), -delta otherwise.
pub fn apply_nim_shift(values: &mut [f64], delta: f64, smaller_is_better: bool) {
    let shift = if smaller_is_better { delta } else { -delta };
    for v in values.iter_mut() {
        *v += shift;
    }
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

fn targeted_cells(subject: &SubjectRecord, cells: CellScope, n_visits: usize) -> Vec<usize> {
    let k = subject.deviation_index(n_visits);
    subject
        .missing_positions()
        .into_iter()
        .filter(|&pos| match cells {
            CellScope::AllMissing => true,
            CellScope::PostIceMissing => subject.ice.is_some() && pos >= k,
        })
        .collect()
}

/// Validate rule set against a dataset: at most one matching rule per subject;
/// when `require_complete`, every missing cell must be covered.
pub fn check_rules(dataset: &Dataset, rules: &[ImputationRule], require_complete: bool) -> Result<()> {
    let t = dataset.n_visits();
    for s in &dataset.subjects {
        let matching: Vec<usize> = rules
            .iter()
            .enumerate()
            .filter_map(|(i, r)| if r.matches(s) { Some(i) } else { None })
            .collect();
        if matching.len() > 1 {
            return Err(Error::Config(format!(
                "subject `{}` matched by {} overlapping rules",
                s.id,
                matching.len()
            )));
        }
        if require_complete {
            let covered: Vec<usize> = match matching.first() {
                Some(&i) => targeted_cells(s, rules[i].cells, t),
                None => Vec::new(),
            };
            let missing = s.missing_positions();
            if covered.len() != missing.len() {
                return Err(Error::Config(format!(
                    "subject `{}` has {} missing cell(s) not covered by any rule",
                    s.id,
                    missing.len() - covered.len()
                )));
            }
        }
    }
    Ok(())
}

/// Produce M completed datasets under the given rules.
///
/// Each imputation draws fresh parameters from `fit`, then dispatches every
/// matched subject to its rule. Observed cells are never modified. The NIM
/// shift of `JumpToReferencePlusNim` applies to imputed cells at
/// post-deviation visits only.
pub fn impute(
    dataset: &Dataset,
    rules: &[ImputationRule],
    fit: &MmrmFit,
    m: usize,
    master_seed: u64,
) -> Result<ImputedSet> {
    if m < 2 {
        return Err(Error::Config("at least 2 imputations required".into()));
    }
    check_rules(dataset, rules, false)?;
    let t = dataset.n_visits();

    let mut completed = Vec::with_capacity(m);
    let mut seeds = Vec::with_capacity(m);
    let mut draws = Vec::with_capacity(m);
    for imp in 0..m {
        let imp_seed = derive_seed(master_seed, &[SEED_DRAW, imp as u64]);
        let mut draw_rng = rng_at(master_seed, &[SEED_DRAW, imp as u64]);
        let draw = draw_parameters_with_rng(fit, &mut draw_rng)?;

        let mut ds = dataset.clone();
        for (subj_idx, subject) in dataset.subjects.iter().enumerate() {
            let Some(rule) = rules.iter().find(|r| r.matches(subject)) else {
                continue;
            };
            let targeted = targeted_cells(subject, rule.cells, t);
            if targeted.is_empty() {
                continue;
            }
            let k = subject.deviation_index(t);
            let (mu, sigma) = match rule.kind {
                RuleKind::MarOwnArm => {
                    let mu = fit.mean_profile_with(&draw.beta, subject.arm, subject.baseline)?;
                    let arm_idx = fit.arms.iter().position(|a| *a == subject.arm).unwrap();
                    (mu, draw.sigma.for_arm_index(arm_idx).clone())
                }
                RuleKind::JumpToReference | RuleKind::JumpToReferencePlusNim => {
                    build_j2r_profile(fit, &draw, subject, k)?
                }
                RuleKind::ReturnToBaseline => {
                    let own = fit.mean_profile_with(&draw.beta, subject.arm, subject.baseline)?;
                    let floor_value = if dataset.values_are_change {
                        0.0
                    } else {
                        subject.baseline
                    };
                    let mut mu = DVector::zeros(t);
                    for pos in 0..t {
                        mu[pos] = if pos < k { own[pos] } else { floor_value };
                    }
                    let arm_idx = fit.arms.iter().position(|a| *a == subject.arm).unwrap();
                    (mu, draw.sigma.for_arm_index(arm_idx).clone())
                }
            };
            let mut subj_rng = rng_at(master_seed, &[SEED_SUBJECT, imp as u64, subj_idx as u64]);
            let mut outcomes = impute_subject(subject, &targeted, &mu, &sigma, &mut subj_rng)?;
            if rule.kind == RuleKind::JumpToReferencePlusNim {
                let shift = if dataset.smaller_is_better {
                    rule.nim
                } else {
                    -rule.nim
                };
                for &pos in &targeted {
                    if pos >= k {
                        if let Some(v) = outcomes[pos].as_mut() {
                            *v += shift;
                        }
                    }
                }
            }
            ds.subjects[subj_idx].outcomes = outcomes;
        }
        completed.push(ds);
        seeds.push(imp_seed);
        draws.push(draw);
    }

    Ok(ImputedSet {
        m,
        completed,
        master_seed,
        per_imputation_seeds: seeds,
        parameter_draws: draws,
    })
}

/// Fill every remaining missing cell with its own-arm conditional mean under
/// the fit (no noise). Used for plug-in cross-checks on partially imputed
/// datasets.
pub fn complete_with_model_means(dataset: &Dataset, fit: &MmrmFit) -> Result<Dataset> {
    let mut out = dataset.clone();
    for subject in &mut out.subjects {
        let missing = subject.missing_positions();
        if missing.is_empty() {
            continue;
        }
        let mu = fit.mean_profile(subject.arm, subject.baseline)?;
        let sigma = fit.sigma_for_arm(subject.arm)?;
        let observed: Vec<(usize, f64)> = subject
            .outcomes
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|y| (i, y)))
            .collect();
        let (mean, _) = conditional_moments(&mu, sigma, &observed, &missing)?;
        for (&pos, &value) in missing.iter().zip(mean.iter()) {
            subject.outcomes[pos] = Some(value);
        }
    }
    Ok(out)
}

/// Export as stacked CSV: the dataset schema prefixed by an
/// `imputation_index` column (1-based).
pub fn write_stacked_csv<W: Write>(set: &ImputedSet, mut writer: W) -> Result<()> {
    let mut header = vec!["imputation_index".to_string()];
    header.extend(crate::data::CSV_HEADER.iter().map(|s| s.to_string()));
    writeln!(writer, "{}", header.join(","))?;
    for (idx, ds) in set.completed.iter().enumerate() {
        let mut buf = Vec::new();
        crate::data::write_dataset_csv(ds, &mut buf)?;
        let text = String::from_utf8(buf).expect("csv is utf-8");
        for line in text.lines().skip(1) {
            writeln!(writer, "{},{}", idx + 1, line)?;
        }
    }
    Ok(())
}

pub fn write_stacked_csv_path(set: &ImputedSet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_stacked_csv(set, std::io::BufWriter::new(file))
}
