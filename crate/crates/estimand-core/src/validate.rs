//! Monte-Carlo validation: simulate replicated trials, run the estimand
//! pipelines, and report bias, coverage, and rejection rates against the
//! exact oracles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Arm;
use crate::error::{Error, Result};
use crate::estimand::{
    estimate, replication_seed, true_defacto, true_hybrid, true_theoretic, EstimandKind,
    EstimandSpec,
};
use crate::seed::derive_seed;
use crate::sim::{simulate, ScenarioConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McConfig {
    pub scenario: ScenarioConfig,
    pub replications: usize,
    /// Imputations per MI pipeline.
    pub m: usize,
    pub master_seed: u64,
    pub pipelines: Vec<EstimandKind>,
    /// Run replications on the rayon pool; sequential otherwise. Results are
    /// identical either way.
    pub parallel: bool,
    pub alpha: f64,
}

/// One pipeline x experimental-arm summary over all replications.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineStats {
    pub pipeline: EstimandKind,
    pub arm: Arm,
    pub n_replications: usize,
    pub mean_estimate: f64,
    /// Mean of the per-replication oracle values (the Monte-Carlo estimate
    /// of the population estimand).
    pub mean_oracle: f64,
    /// mean_estimate - mean_oracle.
    pub bias: f64,
    /// Monte-Carlo standard error of the bias (paired differences).
    pub bias_mc_se: f64,
    /// Fraction of replications whose CI covers the population estimand
    /// (estimated by mean_oracle).
    pub coverage: f64,
    /// Fraction of replications rejecting H0 at the one-sided level.
    pub rejection_rate: f64,
    pub mean_se: f64,
    pub sd_estimate: f64,
}

/// Ordering checks across pipelines, evaluated per replication over every
/// experimental arm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderingStats {
    /// |defacto| < |hybrid| with the same sign.
    pub attenuation_fraction: f64,
    /// theoretic <= hybrid <= defacto in signed value (smaller-is-better).
    pub signed_order_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McValidationReport {
    pub scenario: String,
    pub replications: usize,
    pub m: usize,
    pub master_seed: u64,
    pub alpha: f64,
    pub stats: Vec<PipelineStats>,
    /// Present when all three pipelines were run.
    pub ordering: Option<OrderingStats>,
}

struct RepOutcome {
    // estimate, ci_low, ci_high, p, oracle per (pipeline, exp arm)
    rows: Vec<(EstimandKind, Arm, f64, f64, f64, f64, f64)>,
}

fn run_replication(config: &McConfig, r: usize) -> Result<RepOutcome> {
    let scenario = config
        .scenario
        .clone()
        .with_seed(derive_seed(config.master_seed, &[0x5e, r as u64]));
    let (dataset, truth) = simulate(&scenario)?;
    let analysis_seed = replication_seed(config.master_seed, r);
    let exp_arms: Vec<Arm> = (1..scenario.n_per_arm.len() as u32).map(Arm).collect();

    let mut rows = Vec::new();
    for &kind in &config.pipelines {
        let mut spec = EstimandSpec::new(kind, scenario.delta);
        spec.alpha = config.alpha;
        let result = estimate(&dataset, &spec, config.m, analysis_seed)?;
        for (i, &arm) in exp_arms.iter().enumerate() {
            let c = &result.contrasts[i];
            let oracle = match kind {
                EstimandKind::Theoretic => true_theoretic(&truth, arm)?,
                EstimandKind::DeFacto => true_defacto(&truth, arm)?,
                EstimandKind::Hybrid => true_hybrid(&truth, arm, scenario.delta)?,
            };
            rows.push((kind, arm, c.value, c.ci_low, c.ci_high, c.p_value, oracle));
        }
    }
    Ok(RepOutcome { rows })
}

/// Simulate `replications` trials and summarize every requested pipeline
/// against its own oracle. Replication seeds are derived by counter, and
/// aggregation runs in replication order, so `parallel` cannot change the
/// report.
pub fn run_mc_validation(config: &McConfig) -> Result<McValidationReport> {
    if config.replications < 50 {
        return Err(Error::Config(
            "at least 50 replications required for Monte-Carlo validation".into(),
        ));
    }
    if config.pipelines.is_empty() {
        return Err(Error::Config("no pipelines requested".into()));
    }
    let outcomes: Vec<Result<RepOutcome>> = if config.parallel {
        (0..config.replications)
            .into_par_iter()
            .map(|r| run_replication(config, r))
            .collect()
    } else {
        (0..config.replications)
            .map(|r| run_replication(config, r))
            .collect()
    };
    let mut reps = Vec::with_capacity(config.replications);
    for o in outcomes {
        reps.push(o?);
    }

    let exp_arms: Vec<Arm> = (1..config.scenario.n_per_arm.len() as u32).map(Arm).collect();
    let mut stats = Vec::new();
    for &kind in &config.pipelines {
        for &arm in &exp_arms {
            let rows: Vec<&(EstimandKind, Arm, f64, f64, f64, f64, f64)> = reps
                .iter()
                .flat_map(|rep| rep.rows.iter())
                .filter(|row| row.0 == kind && row.1 == arm)
                .collect();
            let n = rows.len();
            let nf = n as f64;
            let mean_est = rows.iter().map(|r| r.2).sum::<f64>() / nf;
            let mean_orc = rows.iter().map(|r| r.6).sum::<f64>() / nf;
            let diffs: Vec<f64> = rows.iter().map(|r| r.2 - r.6).collect();
            let bias = diffs.iter().sum::<f64>() / nf;
            let bias_sd =
                (diffs.iter().map(|d| (d - bias).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
            let coverage = rows
                .iter()
                .filter(|r| r.3 <= mean_orc && mean_orc <= r.4)
                .count() as f64
                / nf;
            let rejection = rows.iter().filter(|r| r.5 < config.alpha / 2.0).count() as f64 / nf;
            let mean_se = rows.iter().map(|r| (r.4 - r.3) / 2.0).sum::<f64>() / nf;
            let sd_est = {
                let m = mean_est;
                (rows.iter().map(|r| (r.2 - m).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt()
            };
            stats.push(PipelineStats {
                pipeline: kind,
                arm,
                n_replications: n,
                mean_estimate: mean_est,
                mean_oracle: mean_orc,
                bias,
                bias_mc_se: bias_sd / nf.sqrt(),
                coverage,
                rejection_rate: rejection,
                mean_se,
                sd_estimate: sd_est,
            });
        }
    }

    let ordering = if config.pipelines.len() == 3 {
        let mut att = 0usize;
        let mut ord = 0usize;
        for rep in &reps {
            let mut ok_att = true;
            let mut ok_ord = true;
            for &arm in &exp_arms {
                let get = |kind: EstimandKind| -> f64 {
                    rep.rows
                        .iter()
                        .find(|row| row.0 == kind && row.1 == arm)
                        .map(|row| row.2)
                        .unwrap_or(f64::NAN)
                };
                let t = get(EstimandKind::Theoretic);
                let d = get(EstimandKind::DeFacto);
                let h = get(EstimandKind::Hybrid);
                if !(d.abs() < h.abs() && d.signum() == h.signum()) {
                    ok_att = false;
                }
                if !(t <= h && h <= d) {
                    ok_ord = false;
                }
            }
            att += ok_att as usize;
            ord += ok_ord as usize;
        }
        Some(OrderingStats {
            attenuation_fraction: att as f64 / reps.len() as f64,
            signed_order_fraction: ord as f64 / reps.len() as f64,
        })
    } else {
        None
    };

    Ok(McValidationReport {
        scenario: config.scenario.name.clone(),
        replications: config.replications,
        m: config.m,
        master_seed: config.master_seed,
        alpha: config.alpha,
        stats,
        ordering,
    })
}
