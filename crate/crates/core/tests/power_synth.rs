mod common;

use std::collections::BTreeMap;

use common::crossed_table;
use regbase::baseline::{window_table, Strategy};
use regbase::design::parse_formula;
use regbase::lmm::LmmProblem;
use regbase::ols::fit_table;
use regbase::power::{power_synthetic, simulate_response, AnalysisPlan, SignificanceTest};
use regbase::stats::variance;
use regbase::synth::{generate, theoretical_residual_variance, SynthConfig};

#[test]
fn simulated_responses_have_model_mean_and_variance() {
    let t = crossed_table(12, 10, 12, 1.0);
    let (fixed, random) = parse_formula("uv ~ baseline + condition + (1 | subj) + (1 | item)").unwrap();
    let prob = LmmProblem::new(&t, &fixed, &random).unwrap();
    let fit = prob.fit().unwrap();
    let x = &prob.design;
    let xb: Vec<f64> = (0..prob.n_obs())
        .map(|i| (0..x.n_cols()).map(|j| x.x[(i, j)] * x.column_scale[j] * fit.coefficients[j]).sum())
        .collect();
    let total_var = fit.sigma.powi(2) + fit.components.iter().map(|c| c.std_devs[0].powi(2)).sum::<f64>();
    let reps = 3000;
    let n = prob.n_obs();
    let mut sum = vec![0.0; n];
    let mut sq = vec![0.0; n];
    for k in 0..reps {
        let y = simulate_response(&prob, &fit, 100 + k).unwrap();
        for i in 0..n {
            sum[i] += y[i];
            sq[i] += (y[i] - xb[i]).powi(2);
        }
    }
    let se_mean = (total_var / reps as f64).sqrt();
    let worst_mean = (0..n).map(|i| (sum[i] / reps as f64 - xb[i]).abs() / se_mean).fold(0.0, f64::max);
    assert!(worst_mean < 4.5, "max standardized mean deviation {worst_mean}");
    let avg_var = sq.iter().sum::<f64>() / (n * reps as usize) as f64;
    assert!((avg_var / total_var - 1.0).abs() < 0.05, "variance {avg_var} vs {total_var}");
}

fn small_power_config(effect: f64) -> SynthConfig {
    SynthConfig {
        true_effect_uv: effect,
        ..SynthConfig::preset("s3-power").unwrap()
    }
}

#[test]
fn lrt_size_is_nominal_and_power_grows_with_effect() {
    let plan = AnalysisPlan::for_strategy(Strategy::Regression, &["condition"], Default::default(), None);
    let null = power_synthetic(&small_power_config(0.0), &plan, "condition", SignificanceTest::Lrt, 600, 31).unwrap();
    let tol = 3.0 * (0.05f64 * 0.95 / 600.0).sqrt();
    assert!((null.power - 0.05).abs() < tol, "size {}", null.power);
    assert_eq!(null.n_failed, 0);

    let powers: Vec<f64> = [0.0, 0.15, 0.3, 0.45]
        .iter()
        .map(|&d| power_synthetic(&small_power_config(d), &plan, "condition", SignificanceTest::TAbove2, 200, 5).unwrap().power)
        .collect();
    assert!(powers.windows(2).all(|w| w[0] < w[1]), "{powers:?}");
    assert!(powers[3] > 0.95);
}

#[test]
fn power_is_identical_with_one_thread() {
    let plan = AnalysisPlan::for_strategy(Strategy::Traditional, &["condition"], Default::default(), None);
    let c = small_power_config(0.25);
    let a = power_synthetic(&c, &plan, "condition", SignificanceTest::TAbove2, 150, 77).unwrap();
    let b = regbase::par::with_threads(1, || power_synthetic(&c, &plan, "condition", SignificanceTest::TAbove2, 150, 77).unwrap());
    assert_eq!(a, b);
}

#[test]
fn residual_variance_matches_theory_across_baseline_sds() {
    for sb in [0.25, 1.0] {
        let c = SynthConfig {
            sigma_baseline: sb,
            ..SynthConfig::preset("s3-variance").unwrap()
        };
        let (e, _) = generate(&c, 40).unwrap();
        let t = window_table(&e, &c.baseline_window, &c.analysis_window, None).unwrap();
        let trad = variance(&Strategy::Traditional.prepare(&t, "baseline").unwrap().values);
        // per-sample noise adds its window-average variance to each mean
        let noise = c.noise_sd();
        let n_base = e.sampling().sample_range(&c.baseline_window).unwrap().len() as f64;
        let n_win = e.sampling().sample_range(&c.analysis_window).unwrap().len() as f64;
        let want = theoretical_residual_variance(&c, Strategy::Traditional).unwrap();
        let extra = noise * noise * (1.0 / n_base + 1.0 / n_win);
        assert!(((trad - extra) / want - 1.0).abs() < 0.05, "σ_b={sb}: {trad} vs {want} + {extra}");
        let reg = fit_table(&t, &Strategy::Regression.model_spec("uv", &["condition"], "baseline")).unwrap();
        let want_r = theoretical_residual_variance(&c, Strategy::Regression).unwrap();
        assert!((reg.sigma2 / want_r - 1.0).abs() < 0.05, "σ_b={sb}: regression {} vs {want_r}", reg.sigma2);
    }
}

#[test]
fn per_condition_baseline_sd_is_honoured() {
    let c = SynthConfig {
        n_items: 200,
        sigma_baseline_by_condition: Some(BTreeMap::from([("match".into(), 0.2), ("mismatch".into(), 2.0)])),
        ..SynthConfig::default()
    };
    let (_, truth) = generate(&c, 3).unwrap();
    for (cond, sd) in [("match", 0.2), ("mismatch", 2.0)] {
        let b: Vec<f64> = truth.trials.iter().filter(|t| t.condition == cond).map(|t| t.baseline_state[0]).collect();
        let got = variance(&b).sqrt();
        assert!((got / sd - 1.0).abs() < 0.1, "{cond}: {got} vs {sd}");
    }
}

#[test]
fn coupling_is_recovered_from_generated_data() {
    let c = SynthConfig::preset("s3-coupled").unwrap();
    for (coupling, seed) in [(1.0, 1), (0.5, 2), (-0.2, 3)] {
        let c = SynthConfig { drift_coupling: coupling, ..c.clone() };
        let (e, _) = generate(&c, seed).unwrap();
        let t = window_table(&e, &c.baseline_window, &c.analysis_window, None).unwrap();
        let f = fit_table(&t, &Strategy::Regression.model_spec("uv", &["condition"], "baseline")).unwrap();
        let (b, se) = (f.coefficient("baseline").unwrap(), f.std_error("baseline").unwrap());
        assert!((b - coupling).abs() < 3.0 * se, "{coupling}: {b} ± {se}");
    }
}
