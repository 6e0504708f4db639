//! Mixed model for repeated measures: REML estimation with an unstructured
//! within-subject covariance, least-squares means, and treatment contrasts.
//!
//! Model: for subject i with observed visit subset O_i,
//! `y_i = X_i beta + e_i`, `e_i ~ N(0, Sigma[O_i, O_i])`, with fixed effects
//! saturated in visit: a per-visit intercept, per-visit offsets for each
//! experimental arm, and a per-visit slope on (baseline - mean baseline).
//! This spans the conventional treatment + visit + treatment*visit +
//! baseline + baseline*visit structure and makes the LS-mean at the mean
//! baseline a single coefficient lookup.
//!
//! The restricted likelihood is profiled over beta and maximized over the
//! covariance parameters with BFGS. Sigma is parameterized by its Cholesky
//! factor with log diagonal, so every iterate is positive definite without
//! constraints. Subjects are grouped by (arm, missingness pattern) and the
//! likelihood and its analytic gradient are evaluated from per-group moment
//! sums, so the cost per iteration does not grow with the number of subjects.
//!
//! With complete data and a shared covariance the REML maximizer has a closed
//! form (per-visit least squares for beta, residual cross-products over
//! n - q for Sigma); `fit` takes that path unless asked not to.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};

/// Fixed-effect / estimation settings for one MMRM fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MmrmModelSpec {
    /// Estimate a separate unstructured covariance per arm.
    pub per_arm_covariance: bool,
    pub max_iterations: usize,
    /// Convergence: relative change in restricted log-likelihood.
    pub rel_tol: f64,
    /// Convergence: L2 norm of the restricted-likelihood gradient.
    pub grad_tol: f64,
    /// Skip the closed-form complete-data path (used by tests to exercise
    /// the optimizer).
    pub force_iterative: bool,
}

impl Default for MmrmModelSpec {
    fn default() -> Self {
        MmrmModelSpec {
            per_arm_covariance: false,
            max_iterations: 200,
            rel_tol: 1e-8,
            grad_tol: 1e-6,
            force_iterative: false,
        }
    }
}

/// Point estimate with a standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

/// Difference of LS-means with a two-sided t confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastEstimate {
    pub value: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub df: f64,
    pub alpha: f64,
}

impl ContrastEstimate {
    /// One-sided p-value against H0: mu = null. `less` tests Ha: mu < null.
    pub fn one_sided_p(&self, null: f64, less: bool) -> f64 {
        let t = (self.value - null) / self.se;
        let dist = StudentsT::new(0.0, 1.0, self.df).expect("valid df");
        if less {
            dist.cdf(t)
        } else {
            1.0 - dist.cdf(t)
        }
    }
}

/// Estimated within-subject covariance.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceEstimate {
    Shared(DMatrix<f64>),
    /// One matrix per arm, in the fit's arm order.
    PerArm(Vec<DMatrix<f64>>),
}

impl CovarianceEstimate {
    pub fn for_arm_index(&self, arm_idx: usize) -> &DMatrix<f64> {
        match self {
            CovarianceEstimate::Shared(m) => m,
            CovarianceEstimate::PerArm(v) => &v[arm_idx],
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, CovarianceEstimate::Shared(_))
    }
}

/// Column classes within one visit block of the design matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
enum ColClass {
    Intercept,
    ArmOffset(usize), // index into frame.arms (>= 1)
    BaselineSlope,
}

/// Converged REML fit.
#[derive(Debug, Clone)]
pub struct MmrmFit {
    pub beta: DVector<f64>,
    pub column_names: Vec<String>,
    pub sigma: CovarianceEstimate,
    pub vcov_beta: DMatrix<f64>,
    pub reml_loglik: f64,
    pub converged: bool,
    pub n_iterations: usize,
    /// Restricted log-likelihood after each optimizer iteration.
    pub loglik_trace: Vec<f64>,
    /// Arms present, sorted, control first.
    pub arms: Vec<Arm>,
    pub n_visits: usize,
    pub n_subjects: usize,
    pub mean_baseline: f64,
    /// Residual degrees of freedom: subjects minus the rank of the
    /// between-subject design.
    pub residual_df: f64,
    pub values_are_change: bool,
    /// Log-Cholesky covariance parameters at the optimum.
    pub theta: DVector<f64>,
    /// Asymptotic covariance of `theta` (inverse observed information).
    pub theta_cov: DMatrix<f64>,
}

// ---------------------------------------------------------------------------
// Model frame: design layout + per-pattern moment sums
// ---------------------------------------------------------------------------

struct Pattern {
    arm_idx: usize,
    /// Observed visit positions, ascending.
    mask: Vec<usize>,
    n: f64,
    sb: f64,
    sbb: f64,
    sy: DVector<f64>,
    sby: DVector<f64>,
    syy: DMatrix<f64>,
}

struct Frame {
    arms: Vec<Arm>,
    t: usize,
    /// Columns per visit block: intercept + one per experimental arm + baseline.
    q: usize,
    p: usize,
    patterns: Vec<Pattern>,
    n_subjects: usize,
    n_obs: usize,
    mean_baseline: f64,
    per_arm: bool,
    column_names: Vec<String>,
    /// theta length per covariance group.
    theta_per_group: usize,
    n_groups: usize,
}

impl Frame {
    fn col(&self, visit_pos: usize, class: ColClass) -> usize {
        let offset = match class {
            ColClass::Intercept => 0,
            ColClass::ArmOffset(arm_idx) => arm_idx, // arms[1..] map to offsets 1..=K
            ColClass::BaselineSlope => self.q - 1,
        };
        visit_pos * self.q + offset
    }

    fn group_of(&self, arm_idx: usize) -> usize {
        if self.per_arm {
            arm_idx
        } else {
            0
        }
    }
}

fn build_frame(dataset: &Dataset, spec: &MmrmModelSpec) -> Result<Frame> {
    let report = dataset.validate();
    if !report.is_clean() {
        return Err(Error::Validation(format!(
            "dataset has {} violation(s); first: {}",
            report.violations.len(),
            report.violations[0].message
        )));
    }
    let arms = dataset.arms();
    if arms.len() < 2 {
        return Err(Error::Validation(
            "MMRM requires at least two arms".into(),
        ));
    }
    let t = dataset.n_visits();
    let q = 1 + (arms.len() - 1) + 1;
    let p = t * q;
    let mean_baseline = dataset.mean_baseline();

    let mut per_visit_count = vec![0usize; t];
    let mut map: BTreeMap<(usize, u64), Pattern> = BTreeMap::new();
    let mut n_obs = 0usize;
    for s in &dataset.subjects {
        let mask: Vec<usize> = s.observed_positions();
        if mask.is_empty() {
            continue; // no observed post-baseline data: contributes nothing
        }
        for &pos in &mask {
            per_visit_count[pos] += 1;
        }
        n_obs += mask.len();
        let bits = mask.iter().fold(0u64, |acc, &m| acc | (1 << m));
        let arm_idx = arms.iter().position(|a| *a == s.arm).expect("arm present");
        let m = mask.len();
        let entry = map.entry((arm_idx, bits)).or_insert_with(|| Pattern {
            arm_idx,
            mask: mask.clone(),
            n: 0.0,
            sb: 0.0,
            sbb: 0.0,
            sy: DVector::zeros(m),
            sby: DVector::zeros(m),
            syy: DMatrix::zeros(m, m),
        });
        let b = s.baseline - mean_baseline;
        let y = DVector::from_iterator(m, mask.iter().map(|&pos| s.outcomes[pos].unwrap()));
        entry.n += 1.0;
        entry.sb += b;
        entry.sbb += b * b;
        entry.sy += &y;
        entry.sby += &y * b;
        entry.syy.ger(1.0, &y, &y, 1.0);
    }
    for (pos, &count) in per_visit_count.iter().enumerate() {
        if count == 0 {
            return Err(Error::Validation(format!(
                "visit {} has no observed values",
                pos + 1
            )));
        }
    }

    let mut column_names = Vec::with_capacity(p);
    for visit in 1..=t {
        column_names.push(format!("visit{visit}"));
        for arm in &arms[1..] {
            column_names.push(format!("arm{}:visit{visit}", arm.0));
        }
        column_names.push(format!("baseline:visit{visit}"));
    }

    Ok(Frame {
        t,
        q,
        p,
        patterns: map.into_values().collect(),
        n_subjects: dataset.subjects.len(),
        n_obs,
        mean_baseline,
        per_arm: spec.per_arm_covariance,
        column_names,
        theta_per_group: t * (t + 1) / 2,
        n_groups: if spec.per_arm_covariance { arms.len() } else { 1 },
        arms,
    })
}

// ---------------------------------------------------------------------------
// Log-Cholesky parameterization
// ---------------------------------------------------------------------------

/// Lower-triangular factor from one theta block (row-major lower triangle,
/// log scale on the diagonal).
fn chol_factor_from_theta(theta: &[f64], t: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(t, t);
    let mut k = 0;
    for r in 0..t {
        for c in 0..=r {
            l[(r, c)] = if r == c { theta[k].exp() } else { theta[k] };
            k += 1;
        }
    }
    l
}

fn sigma_from_theta(theta: &[f64], t: usize) -> DMatrix<f64> {
    let l = chol_factor_from_theta(theta, t);
    &l * l.transpose()
}

/// theta block for a given SPD matrix.
fn theta_from_sigma(sigma: &DMatrix<f64>) -> Result<Vec<f64>> {
    let t = sigma.nrows();
    let chol = nalgebra::linalg::Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::SingularFit("covariance not positive definite".into()))?;
    let l = chol.l();
    let mut theta = Vec::with_capacity(t * (t + 1) / 2);
    for r in 0..t {
        for c in 0..=r {
            theta.push(if r == c { l[(r, c)].ln() } else { l[(r, c)] });
        }
    }
    Ok(theta)
}

/// d(Sigma)/d(theta_k) for one block: E_k L' + L E_k'.
fn sigma_derivative(l: &DMatrix<f64>, t: usize, k: usize) -> DMatrix<f64> {
    // locate (r, c) of parameter k in the row-major lower triangle
    let mut idx = 0;
    let (mut row, mut col) = (0, 0);
    'outer: for r in 0..t {
        for c in 0..=r {
            if idx == k {
                row = r;
                col = c;
                break 'outer;
            }
            idx += 1;
        }
    }
    let e_val = if row == col { l[(row, col)] } else { 1.0 };
    // D = E L' + L E' where E has e_val at (row, col)
    let mut d = DMatrix::zeros(t, t);
    for j in 0..t {
        d[(row, j)] += e_val * l[(j, col)];
        d[(j, row)] += e_val * l[(j, col)];
    }
    d
}

fn submatrix(m: &DMatrix<f64>, mask: &[usize]) -> DMatrix<f64> {
    let k = mask.len();
    DMatrix::from_fn(k, k, |r, c| m[(mask[r], mask[c])])
}

// ---------------------------------------------------------------------------
// REML evaluation from pattern moments
// ---------------------------------------------------------------------------

struct EvalCore {
    loglik: f64,
    beta: DVector<f64>,
    h_inv: DMatrix<f64>,
    /// Per-pattern Sigma inverse on the pattern mask.
    a_mats: Vec<DMatrix<f64>>,
}

/// Scatter a pattern-level kernel into the p x p moment-weighted matrix.
fn scatter_kernel(frame: &Frame, pat: &Pattern, kernel: &DMatrix<f64>, out: &mut DMatrix<f64>) {
    let arm_idx = pat.arm_idx;
    let m = pat.mask.len();
    // column index + weight-kind (0 => weight 1, 1 => weight b) per class
    let mut cols: Vec<(usize, u8)> = Vec::with_capacity(3);
    for r in 0..m {
        cols.clear();
        let tr = pat.mask[r];
        cols.push((frame.col(tr, ColClass::Intercept), 0));
        if arm_idx >= 1 {
            cols.push((frame.col(tr, ColClass::ArmOffset(arm_idx)), 0));
        }
        cols.push((frame.col(tr, ColClass::BaselineSlope), 1));
        for s in 0..m {
            let ts = pat.mask[s];
            let krs = kernel[(r, s)];
            if krs == 0.0 {
                continue;
            }
            let mut cols_s: [(usize, u8); 3] = [(0, 0); 3];
            let mut n_s = 0;
            cols_s[n_s] = (frame.col(ts, ColClass::Intercept), 0);
            n_s += 1;
            if arm_idx >= 1 {
                cols_s[n_s] = (frame.col(ts, ColClass::ArmOffset(arm_idx)), 0);
                n_s += 1;
            }
            cols_s[n_s] = (frame.col(ts, ColClass::BaselineSlope), 1);
            n_s += 1;
            for &(c1, k1) in cols.iter() {
                for &(c2, k2) in cols_s[..n_s].iter() {
                    let moment = match (k1, k2) {
                        (0, 0) => pat.n,
                        (1, 1) => pat.sbb,
                        _ => pat.sb,
                    };
                    out[(c1, c2)] += krs * moment;
                }
            }
        }
    }
}

/// Scatter X' K y sums into the length-p vector.
fn scatter_rhs(frame: &Frame, pat: &Pattern, kernel: &DMatrix<f64>, out: &mut DVector<f64>) {
    let k_sy = kernel * &pat.sy;
    let k_sby = kernel * &pat.sby;
    for (r, &tr) in pat.mask.iter().enumerate() {
        out[frame.col(tr, ColClass::Intercept)] += k_sy[r];
        if pat.arm_idx >= 1 {
            out[frame.col(tr, ColClass::ArmOffset(pat.arm_idx))] += k_sy[r];
        }
        out[frame.col(tr, ColClass::BaselineSlope)] += k_sby[r];
    }
}

/// Fitted mean (at centered baseline 0) and baseline slope on a pattern mask.
fn pattern_mean_slope(frame: &Frame, pat: &Pattern, beta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let m = pat.mask.len();
    let mut mean = DVector::zeros(m);
    let mut slope = DVector::zeros(m);
    for (r, &tr) in pat.mask.iter().enumerate() {
        let mut mu = beta[frame.col(tr, ColClass::Intercept)];
        if pat.arm_idx >= 1 {
            mu += beta[frame.col(tr, ColClass::ArmOffset(pat.arm_idx))];
        }
        mean[r] = mu;
        slope[r] = beta[frame.col(tr, ColClass::BaselineSlope)];
    }
    (mean, slope)
}

fn eval_core(frame: &Frame, theta: &DVector<f64>) -> Result<EvalCore> {
    let t = frame.t;
    let tpg = frame.theta_per_group;
    // covariance per group
    let mut sigmas = Vec::with_capacity(frame.n_groups);
    for g in 0..frame.n_groups {
        let block = &theta.as_slice()[g * tpg..(g + 1) * tpg];
        if block.iter().any(|v| !v.is_finite() || v.abs() > 30.0) {
            // exp(30) is far beyond any data scale; treat as infeasible so the
            // line search backs off instead of chasing rounding noise
            return Err(Error::numerical("reml", "covariance parameter out of range"));
        }
        sigmas.push(sigma_from_theta(block, t));
    }

    let mut h = DMatrix::zeros(frame.p, frame.p);
    let mut g_vec = DVector::zeros(frame.p);
    let mut logdet_v = 0.0;
    let mut y_quad = 0.0;
    let mut a_mats = Vec::with_capacity(frame.patterns.len());
    for pat in &frame.patterns {
        let sigma = &sigmas[frame.group_of(pat.arm_idx)];
        let sub = submatrix(sigma, &pat.mask);
        let chol = nalgebra::linalg::Cholesky::new(sub).ok_or_else(|| {
            Error::numerical("reml", "pattern covariance not positive definite")
        })?;
        // condition guard: beyond ~1e12 the quadratic form is rounding noise
        let diag = chol.l_dirty().diagonal();
        let dmin = diag.iter().fold(f64::INFINITY, |a, &v| a.min(v));
        let dmax = diag.iter().fold(0.0_f64, |a, &v| a.max(v));
        if !(dmin > 0.0) || (dmax / dmin).powi(2) > 1e12 {
            return Err(Error::numerical("reml", "pattern covariance ill-conditioned"));
        }
        let logdet: f64 = 2.0 * diag.iter().map(|d| d.ln()).sum::<f64>();
        let a = chol.inverse();
        logdet_v += pat.n * logdet;
        y_quad += (&a * &pat.syy).trace();
        scatter_kernel(frame, pat, &a, &mut h);
        scatter_rhs(frame, pat, &a, &mut g_vec);
        a_mats.push(a);
    }

    let h_chol = nalgebra::linalg::Cholesky::new(h.clone())
        .ok_or_else(|| Error::numerical("reml", "X'V^-1X not positive definite"))?;
    let logdet_h: f64 = 2.0 * h_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let beta = h_chol.solve(&g_vec);
    let quad = y_quad - beta.dot(&g_vec);
    let h_inv = h_chol.inverse();

    let constant = -0.5 * (frame.n_obs as f64 - frame.p as f64) * (2.0 * std::f64::consts::PI).ln();
    let loglik = -0.5 * (logdet_v + logdet_h + quad) + constant;
    if !loglik.is_finite() {
        return Err(Error::numerical("reml", "non-finite restricted log-likelihood"));
    }
    Ok(EvalCore {
        loglik,
        beta,
        h_inv,
        a_mats,
    })
}

fn eval_gradient(frame: &Frame, theta: &DVector<f64>, core: &EvalCore) -> DVector<f64> {
    let t = frame.t;
    let tpg = frame.theta_per_group;
    let mut grad = DVector::zeros(theta.len());
    // Cholesky factors per group (for derivative construction)
    let mut l_factors = Vec::with_capacity(frame.n_groups);
    for g in 0..frame.n_groups {
        let block = &theta.as_slice()[g * tpg..(g + 1) * tpg];
        l_factors.push(chol_factor_from_theta(block, t));
    }

    // Residual cross-product pieces per pattern, reused across theta components.
    struct PatPieces {
        mean: DVector<f64>,
        slope: DVector<f64>,
    }
    let pieces: Vec<PatPieces> = frame
        .patterns
        .iter()
        .map(|pat| {
            let (mean, slope) = pattern_mean_slope(frame, pat, &core.beta);
            PatPieces { mean, slope }
        })
        .collect();

    for g in 0..frame.n_groups {
        let l = &l_factors[g];
        for k in 0..tpg {
            let d_full = sigma_derivative(l, t, k);
            let mut term1 = 0.0;
            let mut term3 = 0.0;
            let mut m_k = DMatrix::zeros(frame.p, frame.p);
            for (pat, pp) in frame.patterns.iter().zip(&pieces) {
                if frame.group_of(pat.arm_idx) != g {
                    continue;
                }
                let a = &core.a_mats[frame
                    .patterns
                    .iter()
                    .position(|p2| std::ptr::eq(p2, pat))
                    .unwrap()];
                let d_sub = submatrix(&d_full, &pat.mask);
                term1 += pat.n * (a * &d_sub).trace();
                let kmat = a * &d_sub * a;
                scatter_kernel(frame, pat, &kmat, &mut m_k);
                // tr(K S_P) via moment expansion of S_P = sum r r'
                let k_sy = &kmat * &pat.sy;
                let k_sby = &kmat * &pat.sby;
                let k_mean = &kmat * &pp.mean;
                let k_slope = &kmat * &pp.slope;
                term3 += (&kmat * &pat.syy).trace()
                    - 2.0 * pp.mean.dot(&k_sy)
                    - 2.0 * pp.slope.dot(&k_sby)
                    + pat.n * pp.mean.dot(&k_mean)
                    + 2.0 * pat.sb * pp.mean.dot(&k_slope)
                    + pat.sbb * pp.slope.dot(&k_slope);
            }
            let term2 = (&core.h_inv * &m_k).trace();
            grad[g * tpg + k] = -0.5 * (term1 - term2 - term3);
        }
    }
    grad
}

// ---------------------------------------------------------------------------
// Rank checks
// ---------------------------------------------------------------------------

/// Pivoted Cholesky rank of a Gram matrix; returns Err with the first aliased
/// column's name when rank deficient and `names` is provided.
fn gram_rank(gram: &DMatrix<f64>, names: Option<&[String]>, tol_rel: f64) -> Result<usize> {
    let p = gram.nrows();
    let mut work = gram.clone();
    let mut perm: Vec<usize> = (0..p).collect();
    let max_diag: f64 = (0..p).map(|i| work[(i, i)]).fold(0.0, f64::max);
    if max_diag <= 0.0 {
        if let Some(names) = names {
            return Err(Error::RankDeficient {
                column: names[0].clone(),
            });
        }
        return Ok(0);
    }
    let tol = tol_rel * max_diag;
    let mut rank = 0;
    for step in 0..p {
        // pick the largest remaining diagonal
        let (best, best_val) = (step..p)
            .map(|i| (i, work[(i, i)]))
            .fold((step, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best_val <= tol {
            if let Some(names) = names {
                return Err(Error::RankDeficient {
                    column: names[perm[best]].clone(),
                });
            }
            return Ok(rank);
        }
        work.swap_rows(step, best);
        work.swap_columns(step, best);
        perm.swap(step, best);
        rank += 1;
        let pivot = work[(step, step)].sqrt();
        for i in (step + 1)..p {
            work[(i, step)] /= pivot;
        }
        for i in (step + 1)..p {
            for j in (step + 1)..=i {
                let v = work[(i, step)] * work[(j, step)];
                work[(i, j)] -= v;
                work[(j, i)] = work[(i, j)];
            }
        }
    }
    Ok(rank)
}

fn design_rank_check(frame: &Frame) -> Result<()> {
    let mut gram = DMatrix::zeros(frame.p, frame.p);
    for pat in &frame.patterns {
        let m = pat.mask.len();
        let identity = DMatrix::identity(m, m);
        scatter_kernel(frame, pat, &identity, &mut gram);
    }
    gram_rank(&gram, Some(&frame.column_names), 1e-10).map(|_| ())
}

fn between_design_rank(dataset: &Dataset, arms: &[Arm], mean_baseline: f64) -> usize {
    let q = arms.len() + 1; // intercept + (K) arm dummies + baseline, minus none: 1 + K + 1
    let mut gram = DMatrix::zeros(q, q);
    for s in &dataset.subjects {
        let mut row = DVector::zeros(q);
        row[0] = 1.0;
        if let Some(idx) = arms.iter().position(|a| *a == s.arm) {
            if idx >= 1 {
                row[idx] = 1.0;
            }
        }
        row[q - 1] = s.baseline - mean_baseline;
        gram.ger(1.0, &row, &row, 1.0);
    }
    gram_rank(&gram, None, 1e-10).unwrap_or(0)
}

// ---------------------------------------------------------------------------
// Starting values
// ---------------------------------------------------------------------------

fn starting_sigma(dataset: &Dataset, frame: &Frame) -> Result<DMatrix<f64>> {
    let t = frame.t;
    let q = frame.q;
    // Per-visit least squares on (1, arm dummies, centered baseline).
    let mut coefs: Vec<DVector<f64>> = Vec::with_capacity(t);
    for pos in 0..t {
        let mut gram = DMatrix::zeros(q, q);
        let mut rhs = DVector::zeros(q);
        for s in &dataset.subjects {
            if let Some(y) = s.outcomes[pos] {
                let mut row = DVector::zeros(q);
                row[0] = 1.0;
                if let Some(idx) = frame.arms.iter().position(|a| *a == s.arm) {
                    if idx >= 1 {
                        row[idx] = 1.0;
                    }
                }
                row[q - 1] = s.baseline - frame.mean_baseline;
                gram.ger(1.0, &row, &row, 1.0);
                rhs += row * y;
            }
        }
        // small ridge keeps degenerate visits from blocking start values
        let ridge = 1e-8 * (gram.trace() / q as f64).max(1.0);
        for i in 0..q {
            gram[(i, i)] += ridge;
        }
        let chol = nalgebra::linalg::Cholesky::new(gram)
            .ok_or_else(|| Error::numerical("start-values", "per-visit Gram not PD"))?;
        coefs.push(chol.solve(&rhs));
    }

    // Pairwise-deletion residual covariance.
    let mut cross = DMatrix::<f64>::zeros(t, t);
    let mut counts = DMatrix::<f64>::zeros(t, t);
    for s in &dataset.subjects {
        let b = s.baseline - frame.mean_baseline;
        let arm_idx = frame.arms.iter().position(|a| *a == s.arm).unwrap_or(0);
        let resid: Vec<Option<f64>> = (0..t)
            .map(|pos| {
                s.outcomes[pos].map(|y| {
                    let c = &coefs[pos];
                    let mut mu = c[0] + b * c[q - 1];
                    if arm_idx >= 1 {
                        mu += c[arm_idx];
                    }
                    y - mu
                })
            })
            .collect();
        for t1 in 0..t {
            if let Some(r1) = resid[t1] {
                for t2 in 0..t {
                    if let Some(r2) = resid[t2] {
                        cross[(t1, t2)] += r1 * r2;
                        counts[(t1, t2)] += 1.0;
                    }
                }
            }
        }
    }
    let mut sigma0 = DMatrix::zeros(t, t);
    for t1 in 0..t {
        for t2 in 0..t {
            let c: f64 = counts[(t1, t2)];
            sigma0[(t1, t2)] = if c > 1.5 { cross[(t1, t2)] / (c - 1.0) } else { 0.0 };
        }
    }
    // symmetrize and project to SPD with an eigenvalue floor
    sigma0 = (&sigma0 + sigma0.transpose()) * 0.5;
    let trace = sigma0.trace();
    if !(trace > 1e-12) {
        return Err(Error::SingularFit(
            "residual covariance has (near-)zero trace; outcomes carry no variation".into(),
        ));
    }
    let floor = 1e-6 * trace / t as f64;
    let eig = nalgebra::linalg::SymmetricEigen::new(sigma0);
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let mut out = DMatrix::zeros(t, t);
    for i in 0..t {
        let v = eig.eigenvectors.column(i);
        out.ger(vals[i], &v, &v, 1.0);
    }
    Ok((&out + out.transpose()) * 0.5)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct OptimOutcome {
    theta: DVector<f64>,
    core: EvalCore,
    converged: bool,
    iterations: usize,
    trace: Vec<f64>,
}

/// BFGS with backtracking line search on the negated restricted
/// log-likelihood; the Armijo condition keeps the log-likelihood
/// non-decreasing across iterations.
fn maximize_reml(frame: &Frame, theta0: DVector<f64>, spec: &MmrmModelSpec) -> Result<OptimOutcome> {
    let dim = theta0.len();
    let mut theta = theta0;
    let mut core = eval_core(frame, &theta)?;
    let mut grad = eval_gradient(frame, &theta, &core);
    // scale the initial metric so the first trial step has norm <= ~1
    let mut h_inv = DMatrix::identity(dim, dim) / grad.norm().max(1.0);
    let mut first_update = true;
    let mut trace = vec![core.loglik];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..spec.max_iterations {
        iterations = iter + 1;
        if grad.norm() < spec.grad_tol && iter > 0 {
            converged = true;
            break;
        }
        let mut dir = &h_inv * &grad; // ascent direction
        if dir.dot(&grad) <= 0.0 {
            h_inv = DMatrix::identity(dim, dim);
            dir = grad.clone();
        }
        let slope = dir.dot(&grad);
        let mut alpha = 1.0;
        let mut accepted: Option<(DVector<f64>, EvalCore)> = None;
        for _ in 0..40 {
            let cand = &theta + &dir * alpha;
            match eval_core(frame, &cand) {
                Ok(c) if c.loglik >= core.loglik + 1e-4 * alpha * slope => {
                    accepted = Some((cand, c));
                    break;
                }
                _ => alpha *= 0.5,
            }
        }
        let Some((theta_new, core_new)) = accepted else {
            // No uphill step exists at this scale; accept if the gradient is
            // already small, otherwise report non-convergence via caller.
            converged = grad.norm() < spec.grad_tol.max(1e-4);
            break;
        };
        let grad_new = eval_gradient(frame, &theta_new, &core_new);
        let rel_change =
            (core_new.loglik - core.loglik).abs() / (core.loglik.abs() + 1.0);
        let s = &theta_new - &theta;
        let yv = &grad_new - &grad; // gradient of -l changes sign; for BFGS on -l use -(yv)
        theta = theta_new;
        core = core_new;
        grad = grad_new;
        trace.push(core.loglik);
        if rel_change < spec.rel_tol {
            // Progress has dropped to (or below) f64 resolution of the
            // log-likelihood; the Newton polish below finishes the job of
            // driving the gradient under tolerance.
            converged = grad.norm() < spec.grad_tol;
            break;
        }
        // BFGS update on the minimization problem f = -l: y_min = -yv
        let y_min = -yv;
        let sy = s.dot(&y_min);
        if sy > 1e-12 * s.norm() * y_min.norm() {
            if first_update {
                // standard self-scaling before the first curvature update
                let scale = sy / y_min.dot(&y_min);
                if scale.is_finite() && scale > 0.0 {
                    h_inv = DMatrix::identity(dim, dim) * scale;
                }
                first_update = false;
            }
            let hy = &h_inv * &y_min;
            let yhy = y_min.dot(&hy);
            let rho = 1.0 / sy;
            // H+ = (I - rho s y')H(I - rho y s') + rho s s'
            let mut h_new = h_inv.clone();
            // h_new -= rho * (s (hy)' + hy s') then += rho^2 yhy s s' + rho s s'
            for i in 0..dim {
                for j in 0..dim {
                    h_new[(i, j)] += -rho * (s[i] * hy[j] + hy[i] * s[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
            h_inv = h_new;
        }
    }

    // Newton polish: at the optimum, log-likelihood comparisons are noise but
    // gradient evaluations stay accurate, so solve for the gradient root with
    // the finite-difference information matrix. Accept steps only when the
    // gradient norm shrinks.
    if !converged {
        for _ in 0..15 {
            if grad.norm() < spec.grad_tol {
                converged = true;
                break;
            }
            let Ok(info) = fd_information(frame, &theta) else { break };
            let step = match nalgebra::linalg::Cholesky::new(info.clone()) {
                Some(chol) => chol.solve(&grad),
                None => {
                    let eig = nalgebra::linalg::SymmetricEigen::new(info);
                    let max_abs = eig.eigenvalues.iter().fold(1e-10_f64, |a, v| a.max(v.abs()));
                    let floor = 1e-8 * max_abs;
                    let mut sol = DVector::zeros(dim);
                    for i in 0..dim {
                        let v = eig.eigenvectors.column(i);
                        sol += v * (v.dot(&grad) / eig.eigenvalues[i].max(floor));
                    }
                    sol
                }
            };
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..12 {
                let cand = &theta + &step * scale;
                if let Ok(c) = eval_core(frame, &cand) {
                    let g = eval_gradient(frame, &cand, &c);
                    if g.norm() < grad.norm() {
                        theta = cand;
                        core = c;
                        grad = g;
                        trace.push(core.loglik);
                        accepted = true;
                        break;
                    }
                }
                scale *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if grad.norm() < spec.grad_tol {
            converged = true;
        }
    }

    Ok(OptimOutcome {
        theta,
        core,
        converged,
        iterations,
        trace,
    })
}

/// Negative Hessian of the restricted log-likelihood by central differences
/// of the analytic gradient.
fn fd_information(frame: &Frame, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let dim = theta.len();
    let mut hess = DMatrix::zeros(dim, dim);
    for k in 0..dim {
        let h = 1e-4 * (1.0 + theta[k].abs());
        let mut tp = theta.clone();
        tp[k] += h;
        let mut tm = theta.clone();
        tm[k] -= h;
        let cp = eval_core(frame, &tp)?;
        let cm = eval_core(frame, &tm)?;
        let gp = eval_gradient(frame, &tp, &cp);
        let gm = eval_gradient(frame, &tm, &cm);
        let col = (gp - gm) / (2.0 * h);
        for r in 0..dim {
            hess[(r, k)] = col[r];
        }
    }
    Ok((&hess + hess.transpose()) * (-0.5))
}

// ---------------------------------------------------------------------------
// Closed-form complete-data path
// ---------------------------------------------------------------------------

fn try_closed_form(dataset: &Dataset, frame: &Frame) -> Result<Option<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)>> {
    if frame.per_arm {
        return Ok(None);
    }
    let t = frame.t;
    let complete = dataset
        .subjects
        .iter()
        .all(|s| s.outcomes.iter().all(|v| v.is_some()));
    if !complete {
        return Ok(None);
    }
    let n = dataset.subjects.len();
    let q = frame.q;
    let mut gram = DMatrix::zeros(q, q);
    let mut rhs = DMatrix::zeros(q, t);
    for s in &dataset.subjects {
        let mut row = DVector::zeros(q);
        row[0] = 1.0;
        let arm_idx = frame.arms.iter().position(|a| *a == s.arm).unwrap();
        if arm_idx >= 1 {
            row[arm_idx] = 1.0;
        }
        row[q - 1] = s.baseline - frame.mean_baseline;
        gram.ger(1.0, &row, &row, 1.0);
        for (pos, v) in s.outcomes.iter().enumerate() {
            let y = v.unwrap();
            for c in 0..q {
                rhs[(c, pos)] += row[c] * y;
            }
        }
    }
    gram_rank(&gram, Some(&frame.column_names), 1e-10)?;
    let chol = nalgebra::linalg::Cholesky::new(gram)
        .ok_or_else(|| Error::numerical("closed-form", "between-subject Gram not PD"))?;
    let coef = chol.solve(&rhs); // q x t
    let gram_inv = chol.inverse();

    // residual cross products
    let mut s_mat = DMatrix::zeros(t, t);
    for s in &dataset.subjects {
        let arm_idx = frame.arms.iter().position(|a| *a == s.arm).unwrap();
        let b = s.baseline - frame.mean_baseline;
        let mut resid = DVector::zeros(t);
        for pos in 0..t {
            let mut mu = coef[(0, pos)] + b * coef[(q - 1, pos)];
            if arm_idx >= 1 {
                mu += coef[(arm_idx, pos)];
            }
            resid[pos] = s.outcomes[pos].unwrap() - mu;
        }
        s_mat.ger(1.0, &resid, &resid, 1.0);
    }
    let denom = n as f64 - q as f64;
    if denom <= 0.0 {
        return Err(Error::Validation(
            "not enough subjects for REML with complete data".into(),
        ));
    }
    let sigma = s_mat / denom;
    if nalgebra::linalg::Cholesky::new(sigma.clone()).is_none() {
        return Err(Error::SingularFit(
            "complete-data residual covariance not positive definite".into(),
        ));
    }

    // map to the visit-blocked beta layout and vcov = Sigma (x) Gram^-1
    let p = frame.p;
    let mut beta = DVector::zeros(p);
    for pos in 0..t {
        for c in 0..q {
            beta[pos * q + c] = coef[(c, pos)];
        }
    }
    let mut vcov = DMatrix::zeros(p, p);
    for t1 in 0..t {
        for t2 in 0..t {
            for c1 in 0..q {
                for c2 in 0..q {
                    vcov[(t1 * q + c1, t2 * q + c2)] = sigma[(t1, t2)] * gram_inv[(c1, c2)];
                }
            }
        }
    }
    Ok(Some((beta, sigma, vcov)))
}

// ---------------------------------------------------------------------------
// Public fitting API
// ---------------------------------------------------------------------------

/// Fit the MMRM by REML.
pub fn fit(dataset: &Dataset, spec: &MmrmModelSpec) -> Result<MmrmFit> {
    fit_with_start(dataset, spec, None)
}

/// Fit with optional warm-start covariance parameters (used by the multiple
/// imputation loop, where consecutive fits are near each other).
pub fn fit_with_start(
    dataset: &Dataset,
    spec: &MmrmModelSpec,
    warm_theta: Option<&DVector<f64>>,
) -> Result<MmrmFit> {
    let frame = build_frame(dataset, spec)?;
    design_rank_check(&frame)?;
    let rank_between = between_design_rank(dataset, &frame.arms, frame.mean_baseline);
    let residual_df = frame.n_subjects as f64 - rank_between as f64;
    if residual_df <= 0.0 {
        return Err(Error::Validation(
            "non-positive residual degrees of freedom".into(),
        ));
    }

    if !spec.force_iterative {
        if let Some((beta, sigma, vcov)) = try_closed_form(dataset, &frame)? {
            let theta_vec = DVector::from_vec(theta_from_sigma(&sigma)?);
            let core = eval_core(&frame, &theta_vec)?;
            let theta_cov = observed_information_cov(&frame, &theta_vec)?;
            return Ok(MmrmFit {
                beta,
                column_names: frame.column_names.clone(),
                sigma: CovarianceEstimate::Shared(sigma),
                vcov_beta: vcov,
                reml_loglik: core.loglik,
                converged: true,
                n_iterations: 0,
                loglik_trace: vec![core.loglik],
                arms: frame.arms.clone(),
                n_visits: frame.t,
                n_subjects: frame.n_subjects,
                mean_baseline: frame.mean_baseline,
                residual_df,
                values_are_change: dataset.values_are_change,
                theta: theta_vec,
                theta_cov,
            });
        }
    }

    // starting values
    let theta0 = match warm_theta {
        Some(th) if th.len() == frame.n_groups * frame.theta_per_group => th.clone(),
        _ => {
            let sigma0 = starting_sigma(dataset, &frame)?;
            let block = theta_from_sigma(&sigma0)?;
            let mut v = Vec::with_capacity(frame.n_groups * frame.theta_per_group);
            for _ in 0..frame.n_groups {
                v.extend_from_slice(&block);
            }
            DVector::from_vec(v)
        }
    };

    let outcome = maximize_reml(&frame, theta0, spec)?;
    let fit = finalize_fit(dataset, &frame, &outcome, residual_df)?;
    if !outcome.converged {
        return Err(Error::NonConvergence {
            iterations: outcome.iterations,
            last_loglik: outcome.core.loglik,
            last_fit: Box::new(fit),
        });
    }
    Ok(fit)
}

fn finalize_fit(
    dataset: &Dataset,
    frame: &Frame,
    outcome: &OptimOutcome,
    residual_df: f64,
) -> Result<MmrmFit> {
    let t = frame.t;
    let tpg = frame.theta_per_group;
    let sigma = if frame.per_arm {
        let mats = (0..frame.n_groups)
            .map(|g| sigma_from_theta(&outcome.theta.as_slice()[g * tpg..(g + 1) * tpg], t))
            .collect();
        CovarianceEstimate::PerArm(mats)
    } else {
        CovarianceEstimate::Shared(sigma_from_theta(&outcome.theta.as_slice()[..tpg], t))
    };
    let theta_cov = observed_information_cov(frame, &outcome.theta)?;
    Ok(MmrmFit {
        beta: outcome.core.beta.clone(),
        column_names: frame.column_names.clone(),
        sigma,
        vcov_beta: outcome.core.h_inv.clone(),
        reml_loglik: outcome.core.loglik,
        converged: outcome.converged,
        n_iterations: outcome.iterations,
        loglik_trace: outcome.trace.clone(),
        arms: frame.arms.clone(),
        n_visits: frame.t,
        n_subjects: frame.n_subjects,
        mean_baseline: frame.mean_baseline,
        residual_df,
        values_are_change: dataset.values_are_change,
        theta: outcome.theta.clone(),
        theta_cov,
    })
}

/// Covariance of theta from the observed information (finite differences of
/// the analytic gradient, symmetrized).
fn observed_information_cov(frame: &Frame, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let dim = theta.len();
    let info = fd_information(frame, theta)?;
    match nalgebra::linalg::Cholesky::new(info.clone()) {
        Some(chol) => Ok(chol.inverse()),
        None => {
            // floor eigenvalues; near-flat directions get wide but finite variance
            let eig = nalgebra::linalg::SymmetricEigen::new(info);
            let max_abs = eig.eigenvalues.iter().fold(1e-8_f64, |a, v| a.max(v.abs()));
            let floor = 1e-8 * max_abs;
            let mut out = DMatrix::zeros(dim, dim);
            for i in 0..dim {
                let v = eig.eigenvectors.column(i);
                out.ger(1.0 / eig.eigenvalues[i].max(floor), &v, &v, 1.0);
            }
            Ok((&out + out.transpose()) * 0.5)
        }
    }
}

// ---------------------------------------------------------------------------
// LS-means and contrasts
// ---------------------------------------------------------------------------

impl MmrmFit {
    fn q_block(&self) -> usize {
        1 + (self.arms.len() - 1) + 1
    }

    fn arm_index(&self, arm: Arm) -> Result<usize> {
        self.arms
            .iter()
            .position(|a| *a == arm)
            .ok_or_else(|| Error::Validation(format!("arm {} not in fit", arm)))
    }

    fn visit_position(&self, visit: u32) -> Result<usize> {
        if visit >= 1 && (visit as usize) <= self.n_visits {
            Ok(visit as usize - 1)
        } else {
            Err(Error::Validation(format!(
                "visit {} outside schedule (1..={})",
                visit, self.n_visits
            )))
        }
    }

    /// Contrast vector (length p) for the LS-mean of one arm at one visit,
    /// evaluated at the overall mean baseline.
    fn ls_mean_vector(&self, arm_idx: usize, pos: usize) -> DVector<f64> {
        let q = self.q_block();
        let mut c = DVector::zeros(self.beta.len());
        c[pos * q] = 1.0;
        if arm_idx >= 1 {
            c[pos * q + arm_idx] = 1.0;
        }
        c
    }

    /// Model-based mean change from baseline at a visit for an arm, at the
    /// overall mean baseline.
    pub fn ls_mean_change(&self, arm: Arm, visit: u32) -> Result<Estimate> {
        if !self.converged {
            return Err(Error::Validation("fit did not converge".into()));
        }
        let arm_idx = self.arm_index(arm)?;
        let pos = self.visit_position(visit)?;
        let c = self.ls_mean_vector(arm_idx, pos);
        let mut value = c.dot(&self.beta);
        if !self.values_are_change {
            value -= self.mean_baseline;
        }
        let var = (&c.transpose() * &self.vcov_beta * &c)[(0, 0)];
        Ok(Estimate {
            value,
            se: var.max(0.0).sqrt(),
        })
    }

    /// Difference of LS-means (arm_a minus arm_b) at a visit, with a
    /// two-sided (1 - alpha) t interval on the residual degrees of freedom.
    pub fn contrast(&self, arm_a: Arm, arm_b: Arm, visit: u32, alpha: f64) -> Result<ContrastEstimate> {
        if !self.converged {
            return Err(Error::Validation("fit did not converge".into()));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0,1)", alpha)));
        }
        let ia = self.arm_index(arm_a)?;
        let ib = self.arm_index(arm_b)?;
        let pos = self.visit_position(visit)?;
        let c = self.ls_mean_vector(ia, pos) - self.ls_mean_vector(ib, pos);
        let value = c.dot(&self.beta);
        let var = (&c.transpose() * &self.vcov_beta * &c)[(0, 0)];
        let se = var.max(0.0).sqrt();
        let tq = StudentsT::new(0.0, 1.0, self.residual_df)
            .map_err(|e| Error::numerical("contrast", e.to_string()))?
            .inverse_cdf(1.0 - alpha / 2.0);
        Ok(ContrastEstimate {
            value,
            se,
            ci_low: value - tq * se,
            ci_high: value + tq * se,
            df: self.residual_df,
            alpha,
        })
    }

    /// Mean outcome profile for an arm at a given (uncentered) baseline,
    /// evaluated under an arbitrary coefficient vector with this fit's
    /// layout. Used by parameter-draw imputation.
    pub fn mean_profile_with(&self, beta: &DVector<f64>, arm: Arm, baseline: f64) -> Result<DVector<f64>> {
        let arm_idx = self.arm_index(arm)?;
        let q = self.q_block();
        let b = baseline - self.mean_baseline;
        let mut mu = DVector::zeros(self.n_visits);
        for pos in 0..self.n_visits {
            let mut v = beta[pos * q] + b * beta[pos * q + q - 1];
            if arm_idx >= 1 {
                v += beta[pos * q + arm_idx];
            }
            mu[pos] = v;
        }
        Ok(mu)
    }

    pub fn mean_profile(&self, arm: Arm, baseline: f64) -> Result<DVector<f64>> {
        self.mean_profile_with(&self.beta.clone(), arm, baseline)
    }

    pub fn sigma_for_arm(&self, arm: Arm) -> Result<&DMatrix<f64>> {
        let idx = self.arm_index(arm)?;
        Ok(self.sigma.for_arm_index(idx))
    }

    /// Rebuild a covariance estimate from a theta vector with this fit's
    /// block structure (always SPD by construction).
    pub fn covariance_from_theta(&self, theta: &DVector<f64>) -> Result<CovarianceEstimate> {
        let t = self.n_visits;
        let tpg = t * (t + 1) / 2;
        if theta.len() % tpg != 0 {
            return Err(Error::Config("theta length does not match layout".into()));
        }
        let groups = theta.len() / tpg;
        if groups == 1 {
            Ok(CovarianceEstimate::Shared(sigma_from_theta(
                &theta.as_slice()[..tpg],
                t,
            )))
        } else {
            Ok(CovarianceEstimate::PerArm(
                (0..groups)
                    .map(|g| sigma_from_theta(&theta.as_slice()[g * tpg..(g + 1) * tpg], t))
                    .collect(),
            ))
        }
    }

    /// Smallest eigenvalue over all covariance blocks.
    pub fn sigma_min_eigenvalue(&self) -> f64 {
        let mats: Vec<&DMatrix<f64>> = match &self.sigma {
            CovarianceEstimate::Shared(m) => vec![m],
            CovarianceEstimate::PerArm(v) => v.iter().collect(),
        };
        mats.iter()
            .map(|m| {
                nalgebra::linalg::SymmetricEigen::new((*m).clone())
                    .eigenvalues
                    .iter()
                    .fold(f64::INFINITY, |a, &v| a.min(v))
            })
            .fold(f64::INFINITY, f64::min)
    }
}

// ---------------------------------------------------------------------------
// Gradient check hook (used by tests and the acceptance suite)
// ---------------------------------------------------------------------------

/// Evaluate the restricted log-likelihood and its analytic gradient at a
/// point on a dataset; exposed so verification code can compare against
/// finite differences without reaching into internals.
pub fn reml_value_and_gradient(
    dataset: &Dataset,
    spec: &MmrmModelSpec,
    theta: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let frame = build_frame(dataset, spec)?;
    let core = eval_core(&frame, theta)?;
    let grad = eval_gradient(&frame, theta, &core);
    Ok((core.loglik, grad))
}

/// Dimension of the covariance parameter vector for a dataset under a spec.
pub fn theta_dimension(dataset: &Dataset, spec: &MmrmModelSpec) -> Result<usize> {
    let frame = build_frame(dataset, spec)?;
    Ok(frame.n_groups * frame.theta_per_group)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SubjectRecord, VisitSchedule};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn make_dataset(
        n_per_arm: &[usize],
        t: usize,
        effects: &[f64],
        seed: u64,
        missing_prob: f64,
    ) -> Dataset {
        let mut rng = crate::seed::rng_at(seed, &[0]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let weeks: Vec<f64> = (1..=t).map(|i| 4.0 * i as f64).collect();
        let mut subjects = Vec::new();
        for (arm, &n) in n_per_arm.iter().enumerate() {
            for i in 0..n {
                let baseline = 8.0 + normal.sample(&mut rng);
                let mut outcomes = Vec::with_capacity(t);
                for pos in 0..t {
                    let mu = effects[arm] * (pos as f64 + 1.0) / t as f64
                        - 0.3 * (baseline - 8.0);
                    let y = mu + 0.8 * normal.sample(&mut rng);
                    let miss = rng.random::<f64>() < missing_prob;
                    outcomes.push(if miss { None } else { Some(y) });
                }
                subjects.push(SubjectRecord {
                    id: format!("A{arm}S{i:04}"),
                    arm: Arm(arm as u32),
                    baseline,
                    outcomes,
                    post_ice_flags: vec![false; t],
                    ice: None,
                    ice_category: None,
                });
            }
        }
        Dataset {
            schedule: VisitSchedule::from_weeks(&weeks).unwrap(),
            subjects,
            endpoint_name: "change".into(),
            smaller_is_better: true,
            values_are_change: true,
        }
    }

    /// ANCOVA at one visit: OLS of y on (1, arm dummies, centered baseline).
    fn ancova(dataset: &Dataset, pos: usize) -> (DVector<f64>, DMatrix<f64>, f64) {
        let arms = dataset.arms();
        let q = arms.len() + 1;
        let mb = dataset.mean_baseline();
        let mut gram = DMatrix::zeros(q, q);
        let mut rhs = DVector::zeros(q);
        let mut rows = Vec::new();
        for s in &dataset.subjects {
            if let Some(y) = s.outcomes[pos] {
                let mut row = DVector::zeros(q);
                row[0] = 1.0;
                let idx = arms.iter().position(|a| *a == s.arm).unwrap();
                if idx >= 1 {
                    row[idx] = 1.0;
                }
                row[q - 1] = s.baseline - mb;
                gram.ger(1.0, &row, &row, 1.0);
                rhs += &row * y;
                rows.push((row, y));
            }
        }
        let chol = nalgebra::linalg::Cholesky::new(gram.clone()).unwrap();
        let coef = chol.solve(&rhs);
        let mut rss = 0.0;
        for (row, y) in &rows {
            let r = y - row.dot(&coef);
            rss += r * r;
        }
        let df = rows.len() as f64 - q as f64;
        let sigma2 = rss / df;
        (coef, chol.inverse() * sigma2, df)
    }

    #[test]
    fn single_visit_complete_equals_ancova() {
        let ds = make_dataset(&[30, 30], 1, &[0.0, -0.7], 11, 0.0);
        let fit = fit(&ds, &MmrmModelSpec::default()).unwrap();
        let (coef, vcov, _df) = ancova(&ds, 0);
        let contrast = fit.contrast(Arm(1), Arm(0), 1, 0.05).unwrap();
        assert_relative_eq!(contrast.value, coef[1], epsilon = 1e-8);
        assert_relative_eq!(contrast.se, vcov[(1, 1)].sqrt(), epsilon = 1e-8);
    }

    #[test]
    fn iterative_matches_closed_form_on_complete_data() {
        let ds = make_dataset(&[25, 25], 3, &[0.0, -0.5], 5, 0.0);
        let fast = fit(&ds, &MmrmModelSpec::default()).unwrap();
        let slow = fit(
            &ds,
            &MmrmModelSpec {
                force_iterative: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(slow.converged);
        for pos in 0..fast.beta.len() {
            assert_relative_eq!(fast.beta[pos], slow.beta[pos], epsilon = 1e-6);
        }
        let ca = fast.contrast(Arm(1), Arm(0), 3, 0.05).unwrap();
        let cb = slow.contrast(Arm(1), Arm(0), 3, 0.05).unwrap();
        assert_relative_eq!(ca.value, cb.value, epsilon = 1e-7);
        assert_relative_eq!(ca.se, cb.se, epsilon = 1e-6);
    }

    #[test]
    fn final_visit_contrast_equals_ancova_on_complete_data() {
        let ds = make_dataset(&[40, 40], 3, &[0.0, -0.8], 7, 0.0);
        let fit = fit(&ds, &MmrmModelSpec::default()).unwrap();
        let (coef, vcov, _) = ancova(&ds, 2);
        let c = fit.contrast(Arm(1), Arm(0), 3, 0.05).unwrap();
        assert_relative_eq!(c.value, coef[1], epsilon = 1e-8);
        assert_relative_eq!(c.se, vcov[(1, 1)].sqrt(), epsilon = 1e-8);
    }

    #[test]
    fn all_zero_outcomes_is_singular_fit() {
        let mut ds = make_dataset(&[10, 10], 2, &[0.0, 0.0], 3, 0.0);
        for s in &mut ds.subjects {
            for v in s.outcomes.iter_mut() {
                *v = Some(0.0);
            }
        }
        let err = fit(&ds, &MmrmModelSpec::default()).unwrap_err();
        assert!(matches!(err, Error::SingularFit(_)), "got {err:?}");
        let err = fit(
            &ds,
            &MmrmModelSpec {
                force_iterative: true,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::SingularFit(_)), "got {err:?}");
    }

    #[test]
    fn duplicated_arm_has_equal_ls_means() {
        // one arm duplicated as two arms: LS-means agree
        let base = make_dataset(&[30], 2, &[-0.4], 9, 0.0);
        let mut subjects = base.subjects.clone();
        for s in &mut subjects {
            s.arm = Arm(0);
        }
        let mut dup = base.subjects.clone();
        for s in &mut dup {
            s.arm = Arm(1);
            s.id = format!("{}x", s.id);
        }
        subjects.extend(dup);
        let ds = Dataset {
            subjects,
            ..base.clone()
        };
        let fit = fit(&ds, &MmrmModelSpec::default()).unwrap();
        for visit in 1..=2 {
            let a = fit.ls_mean_change(Arm(0), visit).unwrap();
            let b = fit.ls_mean_change(Arm(1), visit).unwrap();
            assert_relative_eq!(a.value, b.value, epsilon = 1e-8);
        }
        let c = fit.contrast(Arm(1), Arm(1), 2, 0.05).unwrap();
        assert_eq!(c.value, 0.0);
        assert!(c.ci_low <= 0.0 && c.ci_high >= 0.0);
        assert_relative_eq!(c.ci_high - c.ci_low, 2.0 * (c.ci_high - c.value), epsilon = 1e-12);
    }

    #[test]
    fn loglik_non_decreasing_and_sigma_spd_with_missing_data() {
        let ds = make_dataset(&[40, 40], 4, &[0.0, -0.6], 21, 0.15);
        let fit = fit(&ds, &MmrmModelSpec::default()).unwrap();
        assert!(fit.converged);
        for w in fit.loglik_trace.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-9,
                "restricted log-likelihood decreased: {} -> {}",
                w[0],
                w[1]
            );
        }
        assert!(fit.sigma_min_eigenvalue() > 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = MmrmModelSpec {
            force_iterative: true,
            ..Default::default()
        };
        let ds = make_dataset(&[30, 30], 3, &[0.0, -0.5], 13, 0.2);
        let fit_res = fit(&ds, &spec).unwrap();
        let mut points = vec![fit_res.theta.clone()];
        // a random interior point
        let mut rng = crate::seed::rng_at(99, &[1]);
        let perturbed = DVector::from_iterator(
            fit_res.theta.len(),
            fit_res
                .theta
                .iter()
                .map(|v| v + 0.3 * (rng.random::<f64>() - 0.5)),
        );
        points.push(perturbed);
        for theta in points {
            let (_, grad) = reml_value_and_gradient(&ds, &spec, &theta).unwrap();
            let mut fd = DVector::zeros(theta.len());
            for k in 0..theta.len() {
                let h = 1e-5 * (1.0 + theta[k].abs());
                let mut tp = theta.clone();
                tp[k] += h;
                let mut tm = theta.clone();
                tm[k] -= h;
                let (lp, _) = reml_value_and_gradient(&ds, &spec, &tp).unwrap();
                let (lm, _) = reml_value_and_gradient(&ds, &spec, &tm).unwrap();
                fd[k] = (lp - lm) / (2.0 * h);
            }
            let rel = (&grad - &fd).norm() / fd.norm().max(1.0);
            assert!(rel <= 1e-5, "gradient mismatch: rel error {rel}");
        }
    }

    #[test]
    fn outcome_shift_equivariance() {
        let ds = make_dataset(&[25, 25], 3, &[0.0, -0.4], 31, 0.1);
        let mut shifted = ds.clone();
        for s in &mut shifted.subjects {
            for v in s.outcomes.iter_mut() {
                *v = v.map(|x| x + 2.5);
            }
        }
        let f0 = fit(&ds, &MmrmModelSpec::default()).unwrap();
        let f1 = fit(&shifted, &MmrmModelSpec::default()).unwrap();
        for visit in 1..=3 {
            for arm in [Arm(0), Arm(1)] {
                let a = f0.ls_mean_change(arm, visit).unwrap();
                let b = f1.ls_mean_change(arm, visit).unwrap();
                assert_relative_eq!(b.value - a.value, 2.5, epsilon = 1e-10);
            }
            let c0 = f0.contrast(Arm(1), Arm(0), visit, 0.05).unwrap();
            let c1 = f1.contrast(Arm(1), Arm(0), visit, 0.05).unwrap();
            assert_relative_eq!(c0.value, c1.value, epsilon = 1e-10);
        }
    }

    #[test]
    fn rank_deficient_design_names_column() {
        // Two "arms" with identical membership is impossible; instead make
        // baseline constant AND collinear with the intercept at one visit by
        // zeroing all baselines.
        let mut ds = make_dataset(&[15, 15], 2, &[0.0, -0.3], 17, 0.0);
        for s in &mut ds.subjects {
            s.baseline = 5.0;
        }
        let err = fit(&ds, &MmrmModelSpec::default()).unwrap_err();
        match err {
            Error::RankDeficient { column } => {
                assert!(column.contains("baseline"), "column = {column}");
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn raw_values_and_change_values_give_same_contrast() {
        let change = make_dataset(&[30, 30], 2, &[0.0, -0.5], 41, 0.0);
        let mut raw = change.clone();
        raw.values_are_change = false;
        for s in &mut raw.subjects {
            for v in s.outcomes.iter_mut() {
                *v = v.map(|x| x + s.baseline);
            }
        }
        let fc = fit(&change, &MmrmModelSpec::default()).unwrap();
        let fr = fit(&raw, &MmrmModelSpec::default()).unwrap();
        let cc = fc.contrast(Arm(1), Arm(0), 2, 0.05).unwrap();
        let cr = fr.contrast(Arm(1), Arm(0), 2, 0.05).unwrap();
        // identical up to the change in the baseline coefficient (+1), which
        // cancels in the contrast
        assert_relative_eq!(cc.value, cr.value, epsilon = 1e-8);
        // ls_mean_change subtracts the mean baseline for raw data
        let mc = fc.ls_mean_change(Arm(1), 2).unwrap();
        let mr = fr.ls_mean_change(Arm(1), 2).unwrap();
        assert_relative_eq!(mc.value, mr.value, epsilon = 1e-8);
    }

    #[test]
    fn per_arm_covariance_fits() {
        let spec = MmrmModelSpec {
            per_arm_covariance: true,
            ..Default::default()
        };
        let ds = make_dataset(&[35, 35], 3, &[0.0, -0.5], 51, 0.1);
        let fit = fit(&ds, &spec).unwrap();
        assert!(fit.converged);
        match &fit.sigma {
            CovarianceEstimate::PerArm(v) => assert_eq!(v.len(), 2),
            _ => panic!("expected per-arm covariance"),
        }
        assert!(fit.sigma_min_eigenvalue() > 0.0);
    }
}
