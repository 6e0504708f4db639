//! Rubin's-rules combination of per-imputation estimates into one pooled
//! estimate with total variance, adjusted degrees of freedom, confidence
//! interval, and a one-sided p-value.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// One per-imputation analysis result.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MiEstimate {
    pub value: f64,
    pub se: f64,
    /// Complete-data degrees of freedom of the analysis that produced it.
    pub complete_df: f64,
}

/// Direction of the one-sided alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    /// Ha: mu < null
    Less,
    /// Ha: mu > null
    Greater,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub q_bar: f64,
    /// Mean within-imputation variance.
    pub w_within: f64,
    /// Between-imputation variance.
    pub b_between: f64,
    /// Total variance W + (1 + 1/M) B.
    pub t_var: f64,
    pub df: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// One-sided p-value against the stated null.
    pub p_value: f64,
    pub m: usize,
    pub alpha: f64,
    pub null_value: f64,
    pub tail: Tail,
}

impl PooledEstimate {
    pub fn se(&self) -> f64 {
        self.t_var.sqrt()
    }
}

/// Combine per-imputation estimates by Rubin's rules.
///
/// Degrees of freedom follow the Barnard-Rubin small-sample idea of
/// harmonically combining the classic large-sample df with an observed-data
/// df capped by the complete-data value: with lambda = (1+1/M) B / T,
/// df = 1 / (lambda^2/(M-1) + 1/((1-lambda) df_com)). As B -> 0 this tends to
/// the complete-data df, and B = 0 exactly uses it.
pub fn pool(
    estimates: &[MiEstimate],
    alpha: f64,
    null_value: f64,
    tail: Tail,
) -> Result<PooledEstimate> {
    let m = estimates.len();
    if m < 2 {
        return Err(Error::Config(format!(
            "pooling requires at least 2 imputations, got {m}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (0,1)")));
    }
    for (i, e) in estimates.iter().enumerate() {
        if !(e.se > 0.0) || !e.value.is_finite() {
            return Err(Error::Config(format!(
                "estimate {i} has non-positive se or non-finite value"
            )));
        }
    }
    let mf = m as f64;
    let q_bar = estimates.iter().map(|e| e.value).sum::<f64>() / mf;
    let w = estimates.iter().map(|e| e.se * e.se).sum::<f64>() / mf;
    let b = estimates
        .iter()
        .map(|e| (e.value - q_bar).powi(2))
        .sum::<f64>()
        / (mf - 1.0);
    let t_var = w + (1.0 + 1.0 / mf) * b;
    let df_com = estimates
        .iter()
        .map(|e| e.complete_df)
        .fold(f64::INFINITY, f64::min);

    let df = if b == 0.0 {
        df_com
    } else {
        let lambda = ((1.0 + 1.0 / mf) * b / t_var).clamp(0.0, 1.0);
        if lambda == 0.0 {
            df_com
        } else {
            let df_old = (mf - 1.0) / (lambda * lambda);
            let df_obs = (1.0 - lambda) * df_com;
            if df_obs <= 0.0 {
                df_old
            } else {
                1.0 / (1.0 / df_old + 1.0 / df_obs)
            }
        }
    };
    if !(df > 0.0) {
        return Err(Error::numerical("pool", "non-positive degrees of freedom"));
    }

    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::numerical("pool", e.to_string()))?;
    let tq = dist.inverse_cdf(1.0 - alpha / 2.0);
    let se = t_var.sqrt();
    let tstat = (q_bar - null_value) / se;
    let p_value = match tail {
        Tail::Less => dist.cdf(tstat),
        Tail::Greater => 1.0 - dist.cdf(tstat),
    };

    Ok(PooledEstimate {
        q_bar,
        w_within: w,
        b_between: b,
        t_var,
        df,
        ci_low: q_bar - tq * se,
        ci_high: q_bar + tq * se,
        p_value,
        m,
        alpha,
        null_value,
        tail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn est(value: f64, se: f64, df: f64) -> MiEstimate {
        MiEstimate {
            value,
            se,
            complete_df: df,
        }
    }

    #[test]
    fn degenerate_b_zero_uses_complete_df() {
        let p = pool(&[est(1.0, 0.5, 40.0); 3], 0.05, 0.0, Tail::Less).unwrap();
        assert_relative_eq!(p.q_bar, 1.0, epsilon = 1e-15);
        assert_eq!(p.b_between, 0.0);
        assert_relative_eq!(p.t_var, 0.25, epsilon = 1e-15);
        assert_eq!(p.df, 40.0);
        let tq = StudentsT::new(0.0, 1.0, 40.0).unwrap().inverse_cdf(0.975);
        assert_relative_eq!(p.ci_high, 1.0 + tq * 0.5, epsilon = 1e-12);
    }

    #[test]
    fn hand_arithmetic_m2() {
        let p = pool(
            &[est(0.0, 1.0, 100.0), est(2.0, 1.0, 100.0)],
            0.05,
            0.0,
            Tail::Less,
        )
        .unwrap();
        assert_relative_eq!(p.q_bar, 1.0, epsilon = 1e-15);
        assert_relative_eq!(p.w_within, 1.0, epsilon = 1e-15);
        assert_relative_eq!(p.b_between, 2.0, epsilon = 1e-15);
        assert_relative_eq!(p.t_var, 1.0 + 1.5 * 2.0, epsilon = 1e-15);
    }

    /// Straight-line second implementation used as an oracle.
    fn pool_oracle(values: &[f64], ses: &[f64], df_com: f64) -> (f64, f64, f64, f64, f64) {
        let m = values.len() as f64;
        let mut qbar = 0.0;
        for v in values {
            qbar += v;
        }
        qbar /= m;
        let mut w = 0.0;
        for s in ses {
            w += s * s;
        }
        w /= m;
        let mut b = 0.0;
        for v in values {
            b += (v - qbar) * (v - qbar);
        }
        b /= m - 1.0;
        let t = w + (1.0 + 1.0 / m) * b;
        let df = if b == 0.0 {
            df_com
        } else {
            let lambda = (1.0 + 1.0 / m) * b / t;
            let df_old = (m - 1.0) / (lambda * lambda);
            let df_obs = (1.0 - lambda) * df_com;
            df_old * df_obs / (df_old + df_obs)
        };
        (qbar, w, b, t, df)
    }

    #[test]
    fn matches_straight_line_oracle_on_random_inputs() {
        let mut rng = crate::seed::rng_at(2024, &[0]);
        for case in 0..100 {
            let m = 2 + (rng.random::<u32>() % 30) as usize;
            let df_com = 5.0 + 200.0 * rng.random::<f64>();
            let mut values = Vec::with_capacity(m);
            let mut ses = Vec::with_capacity(m);
            for _ in 0..m {
                values.push(4.0 * rng.random::<f64>() - 2.0);
                ses.push(0.1 + rng.random::<f64>());
            }
            let ests: Vec<MiEstimate> = values
                .iter()
                .zip(&ses)
                .map(|(&v, &s)| est(v, s, df_com))
                .collect();
            let p = pool(&ests, 0.05, 0.0, Tail::Less).unwrap();
            let (qbar, w, b, t, df) = pool_oracle(&values, &ses, df_com);
            assert!((p.q_bar - qbar).abs() <= 1e-12, "case {case} q_bar");
            assert!((p.w_within - w).abs() <= 1e-12, "case {case} W");
            assert!((p.b_between - b).abs() <= 1e-12, "case {case} B");
            assert!((p.t_var - t).abs() <= 1e-12, "case {case} T");
            assert!((p.df - df).abs() <= 1e-9 * df, "case {case} df");
            assert!(p.t_var >= p.w_within, "case {case} T >= W");
        }
    }

    #[test]
    fn se_monotonicity() {
        let base = vec![est(0.2, 0.5, 50.0), est(0.4, 0.6, 50.0), est(0.1, 0.7, 50.0)];
        let p0 = pool(&base, 0.05, 0.0, Tail::Less).unwrap();
        let mut bumped = base.clone();
        bumped[1].se = 0.9;
        let p1 = pool(&bumped, 0.05, 0.0, Tail::Less).unwrap();
        assert!(p1.t_var >= p0.t_var);
    }

    #[test]
    fn scale_equivariance() {
        let base = vec![est(0.2, 0.5, 50.0), est(0.4, 0.6, 50.0), est(0.1, 0.7, 50.0)];
        let c = 3.7;
        let scaled: Vec<MiEstimate> = base
            .iter()
            .map(|e| est(e.value * c, e.se * c, e.complete_df))
            .collect();
        let p0 = pool(&base, 0.05, 0.0, Tail::Less).unwrap();
        let p1 = pool(&scaled, 0.05, 0.0, Tail::Less).unwrap();
        assert_relative_eq!(p1.q_bar, c * p0.q_bar, epsilon = 1e-12);
        assert_relative_eq!(p1.t_var, c * c * p0.t_var, epsilon = 1e-12);
    }

    #[test]
    fn df_tends_to_complete_df_as_b_vanishes() {
        let df_com = 80.0;
        let mut prev_gap = f64::INFINITY;
        for spread in [1.0, 0.1, 0.01, 1e-4, 1e-8] {
            let ests = vec![
                est(-spread, 1.0, df_com),
                est(spread, 1.0, df_com),
                est(0.0, 1.0, df_com),
            ];
            let p = pool(&ests, 0.05, 0.0, Tail::Less).unwrap();
            let gap = (p.df - df_com).abs();
            assert!(gap <= prev_gap + 1e-9, "df not approaching complete df");
            prev_gap = gap;
        }
        assert!(prev_gap < 1e-3);
    }

    #[test]
    fn one_sided_p_direction() {
        let ests = vec![est(-0.5, 0.2, 100.0), est(-0.55, 0.2, 100.0)];
        let less = pool(&ests, 0.05, 0.0, Tail::Less).unwrap();
        let greater = pool(&ests, 0.05, 0.0, Tail::Greater).unwrap();
        assert!(less.p_value < 0.05);
        assert!(greater.p_value > 0.95);
        assert_relative_eq!(less.p_value + greater.p_value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_single_imputation() {
        let err = pool(&[est(1.0, 1.0, 10.0)], 0.05, 0.0, Tail::Less).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
