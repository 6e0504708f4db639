//! Generative model for longitudinal trials with potential outcomes under
//! every arm, per-category intercurrent-event processes, post-ICE policy
//! trajectories, and the truth bundle that powers exact estimand oracles.
//!
//! Per-subject trajectories are generated from seeds derived by counter from
//! the master seed, so generation order (or parallelism) cannot change the
//! output.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    Arm, Dataset, IceEvent, IceReason, SubjectRecord, VisitSchedule,
};
use crate::error::{Error, Result};
use crate::ice::{classify, Category};
use crate::seed::rng_at;

const STREAM_BASELINE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_ICE: u64 = 3;
const STREAM_OBSERVE: u64 = 4;
const STREAM_REASON: u64 = 6;

/// Full scenario description. All rates are probabilities in [0, 1]; mean
/// profiles are change-from-baseline units per visit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub n_per_arm: Vec<usize>,
    pub weeks: Vec<f64>,
    /// On-treatment mean change profile per arm per visit.
    pub mean_change: Vec<Vec<f64>>,
    /// Between-visit covariance (T x T, SPD), shared by all arms.
    pub covariance: Vec<Vec<f64>>,
    pub baseline_mean: f64,
    pub baseline_sd: f64,
    /// Effect of (baseline - baseline_mean) on the mean change at every visit.
    pub baseline_slope: f64,
    /// Per-visit hazard of a safety (Category 1) ICE, one entry per arm.
    pub cat1_per_visit_hazard: Vec<f64>,
    /// A Category 2 (rescue / lack of efficacy) ICE triggers at the first
    /// visit whose latent on-treatment value is worse than this threshold;
    /// infinity disables.
    pub cat2_threshold: f64,
    /// Per-visit hazard of an administrative (Category 3) dropout.
    pub cat3_per_visit_hazard: f64,
    /// Pre-ICE sporadic missed-visit probability (MCAR).
    pub intermittent_missing: f64,
    /// Probability that post-ICE visits are still collected (retrieved
    /// dropout); drawn once per subject.
    pub retrieval_prob: f64,
    /// When true, Category 1 hazards are independent of outcomes; when false
    /// they are tilted by a latent frailty tied to the subject's own outcome
    /// noise.
    pub principal_ignorability: bool,
    /// Logit tilt per standardized frailty unit (used when
    /// principal_ignorability is false).
    pub frailty_strength: f64,
    /// Speed at which post-ICE policy trajectories move toward the reference
    /// (arm 0) profile: 0 = stay on own profile, 1 = fully reference.
    pub rescue_pull: f64,
    /// Additive mean shift on post-ICE policy values for Category 2 subjects
    /// (rescue medication effect; negative = improvement when smaller is
    /// better).
    pub cat2_rescue_shift: f64,
    pub smaller_is_better: bool,
    pub endpoint_name: String,
    /// Non-inferiority margin recommended for analyses of this scenario
    /// (0 = superiority).
    pub delta: f64,
    pub master_seed: u64,
}

impl ScenarioConfig {
    pub fn n_visits(&self) -> usize {
        self.weeks.len()
    }

    pub fn n_arms(&self) -> usize {
        self.n_per_arm.len()
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let t = self.n_visits();
        DMatrix::from_fn(t, t, |r, c| self.covariance[r][c])
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.n_visits();
        let k = self.n_arms();
        if t == 0 || k < 2 {
            return Err(Error::Config(
                "scenario needs at least one visit and two arms".into(),
            ));
        }
        if self.n_per_arm.iter().any(|&n| n == 0) {
            return Err(Error::Config("empty arm in scenario".into()));
        }
        if self.mean_change.len() != k || self.mean_change.iter().any(|p| p.len() != t) {
            return Err(Error::Config("mean_change must be n_arms x n_visits".into()));
        }
        if self.covariance.len() != t || self.covariance.iter().any(|r| r.len() != t) {
            return Err(Error::Config("covariance must be n_visits x n_visits".into()));
        }
        if nalgebra::linalg::Cholesky::new(self.covariance_matrix()).is_none() {
            return Err(Error::Config("covariance not positive definite".into()));
        }
        if self.cat1_per_visit_hazard.len() != k {
            return Err(Error::Config("cat1 hazards must have one entry per arm".into()));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.cat1_per_visit_hazard.iter().all(|&h| unit(h))
            || !unit(self.cat3_per_visit_hazard)
            || !unit(self.intermittent_missing)
            || !unit(self.retrieval_prob)
            || !unit(self.rescue_pull)
        {
            return Err(Error::Config("rates must lie in [0, 1]".into()));
        }
        if !(self.baseline_sd > 0.0) {
            return Err(Error::Config("baseline sd must be positive".into()));
        }
        if self.delta < 0.0 {
            return Err(Error::Config("delta must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self
    }
}

/// Everything about one simulated subject, under every arm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub id: String,
    pub assigned: Arm,
    pub baseline: f64,
    /// Completion potential outcomes `[arm][visit]` (no ICEs).
    pub y_complete: Vec<Vec<f64>>,
    /// Policy outcomes `[arm][visit]` including post-ICE drift.
    pub policy: Vec<Vec<f64>>,
    /// Potential Category-1 indicator S(z) per arm: the governing ICE under
    /// that arm is Category 1.
    pub cat1: Vec<bool>,
    /// Governing ICE per arm: (onset visit, category).
    pub ice: Vec<Option<(u32, Category)>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthBundle {
    pub schedule: VisitSchedule,
    pub arms: Vec<Arm>,
    pub subjects: Vec<SubjectTruth>,
}

impl TruthBundle {
    pub fn analysis_position(&self) -> usize {
        self.schedule.analysis_position()
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Simulate one trial: the observed-world dataset (assigned arm only) plus
/// the full truth bundle.
pub fn simulate(config: &ScenarioConfig) -> Result<(Dataset, TruthBundle)> {
    config.validate()?;
    let t = config.n_visits();
    let k = config.n_arms();
    let seed = config.master_seed;
    let chol = nalgebra::linalg::Cholesky::new(config.covariance_matrix())
        .expect("validated SPD");
    let l = chol.l();
    let worse_sign = if config.smaller_is_better { 1.0 } else { -1.0 };
    let sd_last = config.covariance[t - 1][t - 1].sqrt();

    let schedule = VisitSchedule::from_weeks(&config.weeks)?;
    let mut subjects = Vec::new();
    let mut truths = Vec::new();
    let mut j: u64 = 0; // global subject counter
    for (arm_idx, &n) in config.n_per_arm.iter().enumerate() {
        for _ in 0..n {
            let id = format!("S{:05}", j + 1);
            let assigned = Arm(arm_idx as u32);

            let mut rng_b = rng_at(seed, &[STREAM_BASELINE, j]);
            let baseline = config.baseline_mean + config.baseline_sd * {
                let z: f64 = StandardNormal.sample(&mut rng_b);
                z
            };

            // latent on-treatment trajectories per arm
            let mut y_complete = Vec::with_capacity(k);
            let mut noise = Vec::with_capacity(k);
            for z in 0..k {
                let mut rng_n = rng_at(seed, &[STREAM_NOISE, j, z as u64]);
                let zvec =
                    DVector::from_iterator(t, (0..t).map(|_| {
                        let v: f64 = StandardNormal.sample(&mut rng_n);
                        v
                    }));
                let eps = &l * zvec;
                let mut y = Vec::with_capacity(t);
                for pos in 0..t {
                    y.push(
                        config.mean_change[z][pos]
                            + config.baseline_slope * (baseline - config.baseline_mean)
                            + eps[pos],
                    );
                }
                noise.push(eps);
                y_complete.push(y);
            }

            // governing ICE per arm
            let mut ice_per_arm: Vec<Option<(u32, Category)>> = Vec::with_capacity(k);
            for z in 0..k {
                let mut rng_i = rng_at(seed, &[STREAM_ICE, j, z as u64]);
                // Category 1: per-visit hazard, possibly frailty-tilted
                let base_h = config.cat1_per_visit_hazard[z];
                let mut cat1_onset: Option<u32> = None;
                for visit in 1..=t {
                    let u: f64 = rng_i.random();
                    let h = if config.principal_ignorability || base_h <= 0.0 || base_h >= 1.0 {
                        base_h
                    } else {
                        let frail = worse_sign * noise[z][t - 1] / sd_last;
                        expit(logit(base_h) + config.frailty_strength * frail)
                    };
                    if cat1_onset.is_none() && u < h {
                        cat1_onset = Some(visit as u32);
                    }
                }
                // Category 2: first visit whose latent value is worse than
                // the threshold; the measurement at the trigger visit is
                // still collected, so data are affected from the next visit.
                let mut cat2_onset: Option<u32> = None;
                if config.cat2_threshold.is_finite() {
                    for pos in 0..t.saturating_sub(1) {
                        let worse = worse_sign * y_complete[z][pos]
                            >= worse_sign * config.cat2_threshold;
                        if worse {
                            cat2_onset = Some(pos as u32 + 2);
                            break;
                        }
                    }
                }
                // Category 3: per-visit administrative dropout hazard
                let mut cat3_onset: Option<u32> = None;
                for visit in 1..=t {
                    let u: f64 = rng_i.random();
                    if cat3_onset.is_none() && u < config.cat3_per_visit_hazard {
                        cat3_onset = Some(visit as u32);
                    }
                }

                let mut candidates: Vec<(u32, Category)> = Vec::new();
                if let Some(v) = cat1_onset {
                    candidates.push((v, Category::Cat1Safety));
                }
                if let Some(v) = cat2_onset {
                    candidates.push((v, Category::Cat2Efficacy));
                }
                if let Some(v) = cat3_onset {
                    candidates.push((v, Category::Cat3Admin));
                }
                // earliest onset wins; ties resolve by category priority
                candidates.sort_by(|a, b| {
                    a.0.cmp(&b.0)
                        .then(b.1.priority().cmp(&a.1.priority()))
                });
                ice_per_arm.push(candidates.first().copied());
            }

            // policy trajectories
            let mut policy = Vec::with_capacity(k);
            for z in 0..k {
                let mut traj = y_complete[z].clone();
                if let Some((onset, category)) = ice_per_arm[z] {
                    let onset_pos = onset as usize - 1;
                    for pos in onset_pos..t {
                        let pull = config.rescue_pull
                            * (config.mean_change[0][pos] - config.mean_change[z][pos]);
                        let rescue = if category == Category::Cat2Efficacy {
                            config.cat2_rescue_shift
                        } else {
                            0.0
                        };
                        traj[pos] = y_complete[z][pos] + pull + rescue;
                    }
                }
                policy.push(traj);
            }

            // observed-world projection of the assigned arm
            let mut rng_o = rng_at(seed, &[STREAM_OBSERVE, j]);
            let retrieved = rng_o.random::<f64>() < config.retrieval_prob;
            let intermittent: Vec<bool> = (0..t)
                .map(|_| rng_o.random::<f64>() < config.intermittent_missing)
                .collect();
            let za = arm_idx;
            let onset_pos = ice_per_arm[za].map(|(v, _)| v as usize - 1).unwrap_or(t);
            let mut outcomes = Vec::with_capacity(t);
            let mut flags = Vec::with_capacity(t);
            for pos in 0..t {
                if pos < onset_pos {
                    flags.push(false);
                    outcomes.push(if intermittent[pos] {
                        None
                    } else {
                        Some(y_complete[za][pos])
                    });
                } else {
                    flags.push(true);
                    outcomes.push(if retrieved {
                        Some(policy[za][pos])
                    } else {
                        None
                    });
                }
            }

            let ice_event = ice_per_arm[za].map(|(onset, category)| {
                let mut rng_r = rng_at(seed, &[STREAM_REASON, j]);
                sample_ice_event(onset, category, &mut rng_r)
            });
            let ice_category = ice_event.as_ref().map(classify);
            debug_assert_eq!(ice_category, ice_per_arm[za].map(|(_, c)| c));

            subjects.push(SubjectRecord {
                id: id.clone(),
                arm: assigned,
                baseline,
                outcomes,
                post_ice_flags: flags,
                ice: ice_event,
                ice_category,
            });
            truths.push(SubjectTruth {
                id,
                assigned,
                baseline,
                y_complete,
                policy,
                cat1: ice_per_arm
                    .iter()
                    .map(|e| matches!(e, Some((_, Category::Cat1Safety))))
                    .collect(),
                ice: ice_per_arm,
            });
            j += 1;
        }
    }

    let dataset = Dataset {
        schedule: schedule.clone(),
        subjects,
        endpoint_name: config.endpoint_name.clone(),
        smaller_is_better: config.smaller_is_better,
        values_are_change: true,
    };
    let truth = TruthBundle {
        schedule,
        arms: (0..k as u32).map(Arm).collect(),
        subjects: truths,
    };
    Ok((dataset, truth))
}

/// Draw a reason record consistent with the intended category (the classifier
/// maps it back to the same category).
fn sample_ice_event(
    onset: u32,
    category: Category,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> IceEvent {
    let u: f64 = rng.random();
    let (reason, persistent, deteriorated) = match category {
        Category::Cat1Safety => {
            if u < 0.70 {
                (IceReason::Ae, false, false)
            } else if u < 0.85 {
                (IceReason::Death, false, false)
            } else {
                (IceReason::SubjectDecision, true, false)
            }
        }
        Category::Cat2Efficacy => {
            if u < 0.60 {
                (IceReason::RescueMedication, false, false)
            } else if u < 0.90 {
                (IceReason::LackOfEfficacy, false, false)
            } else {
                (IceReason::SubjectDecision, false, true)
            }
        }
        Category::Cat3Admin => {
            if u < 0.35 {
                (IceReason::LostToFollowup, false, false)
            } else if u < 0.60 {
                (IceReason::SubjectDecision, false, false)
            } else if u < 0.80 {
                (IceReason::ProtocolAdmin, false, false)
            } else {
                (IceReason::InvestigatorDecision, false, false)
            }
        }
    };
    IceEvent {
        visit_of_onset: onset,
        reason,
        persistent_ae_before_dc: persistent,
        efficacy_deteriorated_before_dc: deteriorated,
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

fn ar1_covariance(sds: &[f64], rho: f64) -> Vec<Vec<f64>> {
    let t = sds.len();
    (0..t)
        .map(|r| {
            (0..t)
                .map(|c| sds[r] * sds[c] * rho.powi((r as i32 - c as i32).abs()))
                .collect()
        })
        .collect()
}

/// Named presets whose target moments follow published summary tables for
/// a superiority GLP-1 trial (three arms) and a non-inferiority basal-insulin
/// trial (two arms); rates were tuned so realized category frequencies land
/// on the targets under inter-category competition.
pub fn calibrate_preset(name: &str) -> Result<ScenarioConfig> {
    match name {
        "award1_like" => Ok(ScenarioConfig {
            name: "award1_like".into(),
            n_per_arm: vec![141, 280, 279],
            weeks: vec![6.0, 13.0, 19.0, 26.0],
            // placebo settles near -0.41; the two active arms near -1.26/-1.51
            mean_change: vec![
                vec![-0.25, -0.35, -0.40, -0.41],
                vec![-0.90, -1.10, -1.22, -1.26],
                vec![-1.05, -1.30, -1.45, -1.51],
            ],
            covariance: ar1_covariance(&[0.70, 0.80, 0.88, 0.92], 0.65),
            baseline_mean: 8.1,
            baseline_sd: 1.3,
            baseline_slope: -0.25,
            // targets: 6.4% / 6.4% / 5.4% subjects with a Category-1 ICE
            cat1_per_visit_hazard: vec![0.0178, 0.0163, 0.0136],
            // target: 16.3% placebo / 3.6% / 1.4% Category-2 subjects
            cat2_threshold: 0.82,
            // target: roughly 2.8% / 1.8% / 2.9% Category-3 subjects
            cat3_per_visit_hazard: 0.0074,
            intermittent_missing: 0.02,
            retrieval_prob: 0.80,
            principal_ignorability: true,
            frailty_strength: 0.0,
            rescue_pull: 1.0,
            cat2_rescue_shift: -0.90,
            smaller_is_better: true,
            endpoint_name: "hba1c_change".into(),
            delta: 0.0,
            master_seed: 20_260_101,
        }),
        "imagine3_like" => Ok(ScenarioConfig {
            name: "imagine3_like".into(),
            n_per_arm: vec![449, 663],
            weeks: vec![12.0, 26.0, 39.0, 52.0],
            mean_change: vec![
                vec![-0.30, -0.27, -0.25, -0.24],
                vec![-0.52, -0.49, -0.47, -0.46],
            ],
            covariance: ar1_covariance(&[0.80, 0.85, 0.88, 0.90], 0.60),
            baseline_mean: 7.9,
            baseline_sd: 0.95,
            baseline_slope: -0.30,
            // targets: 5.3% control / 10.6% experimental Category-1 subjects
            cat1_per_visit_hazard: vec![0.0145, 0.0300],
            // target: ~2% Category-2 subjects in both arms
            cat2_threshold: 1.78,
            // target: ~10.6% Category-3 subjects
            cat3_per_visit_hazard: 0.0302,
            intermittent_missing: 0.02,
            retrieval_prob: 0.30,
            principal_ignorability: true,
            frailty_strength: 0.0,
            rescue_pull: 1.0,
            cat2_rescue_shift: -0.20,
            smaller_is_better: true,
            endpoint_name: "hba1c_change".into(),
            delta: 0.4,
            master_seed: 20_260_102,
        }),
        other => Err(Error::Config(format!("unknown preset `{other}`"))),
    }
}

/// Scenarios available to `validate`: the two trial-like presets plus a null
/// MAR scenario and a correctly-specified jump-to-reference scenario.
pub fn scenario_by_name(name: &str) -> Result<ScenarioConfig> {
    match name {
        "award1_like" | "imagine3_like" => calibrate_preset(name),
        "null_mar" => Ok(ScenarioConfig {
            name: "null_mar".into(),
            n_per_arm: vec![300, 300],
            weeks: vec![6.0, 13.0, 19.0, 26.0],
            mean_change: vec![
                vec![-0.20, -0.30, -0.38, -0.40],
                vec![-0.20, -0.30, -0.38, -0.40],
            ],
            covariance: ar1_covariance(&[0.75, 0.82, 0.86, 0.90], 0.60),
            baseline_mean: 8.0,
            baseline_sd: 1.0,
            baseline_slope: -0.25,
            cat1_per_visit_hazard: vec![0.0, 0.0],
            cat2_threshold: 0.95,
            cat3_per_visit_hazard: 0.015,
            intermittent_missing: 0.03,
            retrieval_prob: 0.50,
            principal_ignorability: true,
            frailty_strength: 0.0,
            rescue_pull: 1.0,
            cat2_rescue_shift: 0.0,
            smaller_is_better: true,
            endpoint_name: "hba1c_change".into(),
            delta: 0.0,
            master_seed: 20_260_103,
        }),
        "j2r_correct" => Ok(ScenarioConfig {
            name: "j2r_correct".into(),
            n_per_arm: vec![400, 400],
            weeks: vec![6.0, 13.0, 19.0, 26.0],
            mean_change: vec![
                vec![-0.28, -0.36, -0.40, -0.41],
                vec![-0.90, -1.05, -1.15, -1.20],
            ],
            covariance: ar1_covariance(&[0.80, 0.85, 0.88, 0.90], 0.60),
            baseline_mean: 8.0,
            baseline_sd: 1.0,
            baseline_slope: -0.25,
            cat1_per_visit_hazard: vec![0.011, 0.015],
            cat2_threshold: 1.00,
            cat3_per_visit_hazard: 0.010,
            intermittent_missing: 0.02,
            retrieval_prob: 0.50,
            principal_ignorability: true,
            frailty_strength: 0.0,
            rescue_pull: 1.0,
            cat2_rescue_shift: 0.0,
            smaller_is_better: true,
            endpoint_name: "hba1c_change".into(),
            delta: 0.0,
            master_seed: 20_260_104,
        }),
        other => Err(Error::Config(format!("unknown scenario `{other}`"))),
    }
}

pub const SCENARIO_NAMES: [&str; 4] = ["award1_like", "imagine3_like", "null_mar", "j2r_correct"];

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> ScenarioConfig {
        scenario_by_name("j2r_correct").unwrap()
    }

    #[test]
    fn zero_hazards_give_complete_dataset() {
        let mut config = base_config();
        config.cat1_per_visit_hazard = vec![0.0, 0.0];
        config.cat2_threshold = f64::INFINITY;
        config.cat3_per_visit_hazard = 0.0;
        config.intermittent_missing = 0.0;
        let (ds, truth) = simulate(&config).unwrap();
        assert!(ds.subjects.iter().all(|s| s.ice.is_none()));
        assert!(ds
            .subjects
            .iter()
            .all(|s| s.outcomes.iter().all(|v| v.is_some())));
        assert!(truth.subjects.iter().all(|t| t.ice.iter().all(|e| e.is_none())));
        assert!(ds.validate().is_clean());
    }

    #[test]
    fn seed_determinism_and_sensitivity() {
        let config = base_config();
        let (d1, t1) = simulate(&config).unwrap();
        let (d2, t2) = simulate(&config).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(t1.subjects.len(), t2.subjects.len());
        assert_eq!(t1.subjects[0].y_complete, t2.subjects[0].y_complete);
        let (d3, _) = simulate(&config.clone().with_seed(777)).unwrap();
        assert_ne!(d1, d3);
    }

    #[test]
    fn observed_equals_potential_for_no_ice_subjects() {
        let (ds, truth) = simulate(&base_config()).unwrap();
        for (s, tr) in ds.subjects.iter().zip(&truth.subjects) {
            if s.ice.is_none() {
                for (pos, v) in s.outcomes.iter().enumerate() {
                    if let Some(y) = v {
                        assert_eq!(*y, tr.y_complete[s.arm.0 as usize][pos]);
                    }
                }
            }
        }
    }

    #[test]
    fn cat1_proportions_match_hazards_without_competition() {
        // hazards chosen so total Cat-1 probability is 10.6% vs 5.3%
        let mut config = base_config();
        config.n_per_arm = vec![663, 663];
        config.cat2_threshold = f64::INFINITY;
        config.cat3_per_visit_hazard = 0.0;
        let t = config.n_visits() as f64;
        let h1 = 1.0 - (1.0_f64 - 0.053).powf(1.0 / t);
        let h2 = 1.0 - (1.0_f64 - 0.106).powf(1.0 / t);
        config.cat1_per_visit_hazard = vec![h1, h2];
        let (ds, _) = simulate(&config).unwrap();
        for (arm, target) in [(0u32, 0.053), (1u32, 0.106)] {
            let n = ds.n_in_arm(Arm(arm)) as f64;
            let count = ds
                .subjects
                .iter()
                .filter(|s| s.arm == Arm(arm) && s.ice_category == Some(Category::Cat1Safety))
                .count() as f64;
            let se = (target * (1.0 - target) / n).sqrt();
            assert!(
                (count / n - target).abs() <= 3.0 * se,
                "arm {arm}: {} vs {target}",
                count / n
            );
        }
    }

    #[test]
    fn governing_ice_priority_on_ties() {
        // force simultaneous candidates: cat1 hazard 1.0 at visit 1 and a
        // cat2 trigger from visit 1 (threshold -inf means always worse);
        // cat1 must win (onset 1 beats cat2's onset 2 anyway, and priority
        // breaks exact ties)
        let mut config = base_config();
        config.cat1_per_visit_hazard = vec![1.0, 1.0];
        config.cat2_threshold = f64::NEG_INFINITY;
        let (ds, _) = simulate(&config).unwrap();
        assert!(ds
            .subjects
            .iter()
            .all(|s| s.ice_category == Some(Category::Cat1Safety)));
    }

    #[test]
    fn cat2_trigger_is_mar_given_observed_history() {
        // the trigger visit's measurement is collected: onset is strictly
        // after the first visit whose value crossed the threshold
        let (ds, truth) = simulate(&base_config()).unwrap();
        let mut checked = 0;
        for (s, tr) in ds.subjects.iter().zip(&truth.subjects) {
            if let Some((onset, Category::Cat2Efficacy)) = tr.ice[s.arm.0 as usize] {
                assert!(onset >= 2);
                let trigger_pos = onset as usize - 2;
                let val = tr.y_complete[s.arm.0 as usize][trigger_pos];
                assert!(val >= 0.85 - 1e-12);
                checked += 1;
            }
        }
        assert!(checked > 0, "scenario produced no Category-2 events");
    }

    #[test]
    fn frailty_links_cat1_to_outcomes_only_when_pi_false() {
        let mut config = base_config();
        config.n_per_arm = vec![3000, 3000];
        config.cat1_per_visit_hazard = vec![0.04, 0.04];
        config.cat2_threshold = f64::INFINITY;
        config.cat3_per_visit_hazard = 0.0;
        config.frailty_strength = 1.5;

        // chi-square (2x2) of S(1) against a median split of Y_T(1) - Y_T(0)
        let chi2 = |pi: bool| -> f64 {
            let mut c = config.clone();
            c.principal_ignorability = pi;
            let (_, truth) = simulate(&c).unwrap();
            let pos = truth.analysis_position();
            let mut diffs: Vec<f64> = truth
                .subjects
                .iter()
                .map(|s| s.y_complete[1][pos] - s.y_complete[0][pos])
                .collect();
            let mut sorted = diffs.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = sorted[sorted.len() / 2];
            let mut table = [[0.0f64; 2]; 2];
            for (s, d) in truth.subjects.iter().zip(diffs.iter_mut()) {
                let r = usize::from(s.cat1[1]);
                let col = usize::from(*d > median);
                table[r][col] += 1.0;
            }
            let n: f64 = table.iter().flatten().sum();
            let mut chi = 0.0;
            for r in 0..2 {
                for col in 0..2 {
                    let row_sum: f64 = table[r].iter().sum();
                    let col_sum: f64 = table[0][col] + table[1][col];
                    let expected = row_sum * col_sum / n;
                    chi += (table[r][col] - expected).powi(2) / expected;
                }
            }
            chi
        };

        // 5% critical value for 1 df is 3.84
        assert!(chi2(true) < 3.84 * 2.0, "independence violated under PI");
        assert!(chi2(false) > 3.84, "frailty produced no dependence");
    }

    #[test]
    fn presets_validate_and_generate_clean_data() {
        for name in SCENARIO_NAMES {
            let config = scenario_by_name(name).unwrap();
            config.validate().unwrap();
            let (ds, truth) = simulate(&config).unwrap();
            assert!(ds.validate().is_clean(), "{name} produced dirty data");
            assert_eq!(ds.subjects.len(), truth.subjects.len());
        }
        assert!(calibrate_preset("unknown").is_err());
        // the NI preset carries the 0.4 margin
        assert_eq!(calibrate_preset("imagine3_like").unwrap().delta, 0.4);
    }
}
