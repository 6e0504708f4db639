use estimand_core::data::Arm;
use estimand_core::estimand::*;
use estimand_core::ice::{summarize, Category};
use estimand_core::sim::{scenario_by_name, simulate};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("recovery");
    match mode {
        "recovery" => recovery(
            args.get(2).map(String::as_str).unwrap_or("j2r_correct"),
            args.get(3).and_then(|s| s.parse().ok()).unwrap_or(50),
            args.get(4).and_then(|s| s.parse().ok()).unwrap_or(20),
        ),
        "rates" => rates(args.get(2).map(String::as_str).unwrap_or("award1_like")),
        "ordering" => ordering(
            args.get(2).map(String::as_str).unwrap_or("award1_like"),
            args.get(3).and_then(|s| s.parse().ok()).unwrap_or(50),
            args.get(4).and_then(|s| s.parse().ok()).unwrap_or(20),
        ),
        "slope" => slope(
            args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20),
            args.get(3).and_then(|s| s.parse().ok()).unwrap_or(50),
        ),
        other => eprintln!("unknown mode {other}"),
    }
}

fn rates(name: &str) {
    let mut config = scenario_by_name(name).unwrap();
    let mut totals = vec![[0.0f64; 4]; config.n_per_arm.len()];
    let reps = 40;
    for r in 0..reps {
        config.master_seed = 1000 + r;
        let (ds, _) = simulate(&config).unwrap();
        let table = summarize(&ds).unwrap();
        for (i, row) in table.rows.iter().enumerate() {
            totals[i][0] += row.pct_any();
            totals[i][1] += row.pct(Category::Cat1Safety);
            totals[i][2] += row.pct(Category::Cat2Efficacy);
            totals[i][3] += row.pct(Category::Cat3Admin);
        }
    }
    for (i, t) in totals.iter().enumerate() {
        println!(
            "arm {i}: any {:.1}% cat1 {:.1}% cat2 {:.1}% cat3 {:.1}%",
            t[0] / reps as f64,
            t[1] / reps as f64,
            t[2] / reps as f64,
            t[3] / reps as f64
        );
    }
}

fn recovery(name: &str, reps: usize, m: usize) {
    let base = scenario_by_name(name).unwrap();
    let exp_arms: Vec<Arm> = (1..base.n_per_arm.len() as u32).map(Arm).collect();
    let mut rows: Vec<(String, Vec<f64>, Vec<f64>)> = vec![
        ("theoretic".into(), vec![], vec![]),
        ("defacto".into(), vec![], vec![]),
        ("hybrid".into(), vec![], vec![]),
    ];
    let mut cover = 0usize;
    let mut widths: Vec<f64> = Vec::new();
    for r in 0..reps {
        let config = base.clone().with_seed(4000 + r as u64);
        let (ds, truth) = simulate(&config).unwrap();
        let seed = replication_seed(config.master_seed, r);
        let arm = exp_arms[0];
        let delta = config.delta;

        let theo = estimate(&ds, &EstimandSpec::theoretic(), m, seed).unwrap();
        let defa = estimate(&ds, &EstimandSpec::defacto(delta), m, seed).unwrap();
        let hybr = estimate(&ds, &EstimandSpec::hybrid(delta), m, seed).unwrap();

        rows[0].1.push(theo.contrasts[0].value);
        rows[0].2.push(true_theoretic(&truth, arm).unwrap());
        rows[1].1.push(defa.contrasts[0].value);
        rows[1].2.push(true_defacto(&truth, arm).unwrap());
        rows[2].1.push(hybr.contrasts[0].value);
        rows[2].2.push(true_hybrid(&truth, arm, delta).unwrap());

        let oracle = *rows[2].2.last().unwrap();
        if hybr.contrasts[0].ci_low <= oracle && oracle <= hybr.contrasts[0].ci_high {
            cover += 1;
        }
        widths.push(hybr.contrasts[0].ci_high - hybr.contrasts[0].ci_low);
        let _ = r;
    }
    for (label, ests, oracles) in &rows {
        let diffs: Vec<f64> = ests.iter().zip(oracles).map(|(e, o)| e - o).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>()
            / (diffs.len() - 1) as f64)
            .sqrt();
        let mc_se = sd / (diffs.len() as f64).sqrt();
        let mean_est = ests.iter().sum::<f64>() / ests.len() as f64;
        let mean_orc = oracles.iter().sum::<f64>() / oracles.len() as f64;
        println!(
            "{label}: mean est {mean_est:.4} mean oracle {mean_orc:.4} bias {mean:+.4} mc_se {mc_se:.4} |z| {:.2}",
            mean.abs() / mc_se
        );
    }
    println!(
        "hybrid coverage (per-rep oracle): {:.3} ({cover}/{reps})",
        cover as f64 / reps as f64
    );
    // coverage of the population value (mean oracle over reps)
    let pop: f64 = rows[2].2.iter().sum::<f64>() / reps as f64;
    let ests = &rows[2].1;
    let est_mean = ests.iter().sum::<f64>() / reps as f64;
    let est_sd = (ests.iter().map(|e| (e - est_mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    let oracle_sd = {
        let m = pop;
        (rows[2].2.iter().map(|o| (o - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt()
    };
    let half = widths.iter().sum::<f64>() / (2.0 * reps as f64);
    let pop_cover = ests
        .iter()
        .zip(widths.iter())
        .filter(|(e, w)| (*e - pop).abs() <= *w / 2.0)
        .count();
    println!(
        "population hybrid {pop:.4}; est sd {est_sd:.4}; oracle sd {oracle_sd:.4}; mean CI half-width {half:.4}; population coverage {:.3}",
        pop_cover as f64 / reps as f64
    );
}

fn ordering(name: &str, reps: usize, m: usize) {
    let base = scenario_by_name(name).unwrap();
    let n_exp = base.n_per_arm.len() - 1;
    let mut ok_att = 0usize; // |defacto| < |hybrid| and sign preserved, all exp arms
    let mut ok_ord = 0usize; // theoretic <= hybrid <= defacto (signed), all exp arms
    for r in 0..reps {
        let config = base.clone().with_seed(7000 + r as u64);
        let (ds, _) = simulate(&config).unwrap();
        let seed = replication_seed(config.master_seed, r);
        let delta = config.delta;
        let theo = estimate(&ds, &EstimandSpec::theoretic(), m, seed).unwrap();
        let defa = estimate(&ds, &EstimandSpec::defacto(delta), m, seed).unwrap();
        let hybr = estimate(&ds, &EstimandSpec::hybrid(delta), m, seed).unwrap();
        let mut att = true;
        let mut ord = true;
        for i in 0..n_exp {
            let t = theo.contrasts[i].value;
            let d = defa.contrasts[i].value;
            let h = hybr.contrasts[i].value;
            if !(d.abs() < h.abs() && d.signum() == h.signum()) {
                att = false;
            }
            if !(t <= h && h <= d) {
                ord = false;
            }
            if r < 5 && i == 0 {
                println!("rep {r}: theo {t:.3} hybrid {h:.3} defacto {d:.3}");
            }
        }
        ok_att += att as usize;
        ok_ord += ord as usize;
    }
    println!(
        "attenuation |defacto|<|hybrid| & sign: {:.3}; signed theo<=hyb<=def: {:.3}",
        ok_att as f64 / reps as f64,
        ok_ord as f64 / reps as f64
    );
}

fn slope(n_seeds: usize, m: usize) {
    use estimand_core::ice::Category;
    let mut config = scenario_by_name("imagine3_like").unwrap();
    if std::env::args().nth(4).as_deref() == Some("clean") {
        config.cat2_threshold = f64::INFINITY;
        config.cat3_per_visit_hazard = 0.0;
        config.intermittent_missing = 0.0;
        config.retrieval_prob = 0.0;
    }
    let (ds, _) = simulate(&config).unwrap();
    let n_exp = ds.subjects.iter().filter(|s| s.arm == Arm(1)).count() as f64;
    let n_cat1 = ds
        .subjects
        .iter()
        .filter(|s| s.arm == Arm(1) && s.ice_category == Some(Category::Cat1Safety))
        .count() as f64;
    let p_cat1 = n_cat1 / n_exp;
    let deltas = [0.0, 0.2, 0.4];
    let mut slopes = Vec::new();
    for seed in 0..n_seeds {
        let mut ests = Vec::new();
        for &d in &deltas {
            let r = estimate(&ds, &EstimandSpec::hybrid(d), m, 9000 + seed as u64).unwrap();
            ests.push(r.contrasts[0].value);
        }
        // least squares slope over the three deltas
        let dbar = deltas.iter().sum::<f64>() / 3.0;
        let ebar = ests.iter().sum::<f64>() / 3.0;
        let num: f64 = deltas.iter().zip(&ests).map(|(d, e)| (d - dbar) * (e - ebar)).sum();
        let den: f64 = deltas.iter().map(|d| (d - dbar).powi(2)).sum();
        slopes.push(num / den);
        // affineness residual
        let mid_gap = ests[1] - 0.5 * (ests[0] + ests[2]);
        if seed < 3 {
            println!("seed {seed}: ests {:?} slope {:.4} midgap {:.2e}", ests, num / den, mid_gap);
        }
    }
    let mean = slopes.iter().sum::<f64>() / slopes.len() as f64;
    let sd = (slopes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (slopes.len() - 1) as f64).sqrt();
    let mc_se = sd / (slopes.len() as f64).sqrt();
    println!(
        "cat1 exp proportion {p_cat1:.4}; mean slope {mean:.4} mc_se {mc_se:.5} |z| {:.2}",
        (mean - p_cat1).abs() / mc_se
    );
}
