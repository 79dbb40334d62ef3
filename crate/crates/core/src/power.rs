//! Monte Carlo power by simulate → refit → test.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baseline::{window_table, Strategy};
use crate::design::{ModelSpec, RandomSpec};
use crate::epochs::RoiMap;
use crate::error::{Error, Result};
use crate::lmm::{fit_model, lrt, FittedLmm, FittedModel, LmmProblem};
use crate::par;
use crate::stats::clopper_pearson;
use crate::synth::{generate, stream_rng, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignificanceTest {
    /// `|t| >= 2` on the target column (one fit per replicate).
    TAbove2,
    /// Likelihood-ratio test of dropping the target term, α = 0.05.
    Lrt,
}

impl SignificanceTest {
    pub fn label(&self) -> &'static str {
        match self {
            SignificanceTest::TAbove2 => "t",
            SignificanceTest::Lrt => "lrt",
        }
    }
}

impl std::str::FromStr for SignificanceTest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t" => Ok(Self::TAbove2),
            "lrt" => Ok(Self::Lrt),
            _ => Err(Error::invalid(format!("unknown test '{s}' (expected t or lrt)"))),
        }
    }
}

pub const LRT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerResult {
    pub strategy: String,
    pub term: String,
    pub test: SignificanceTest,
    pub n_sim: usize,
    pub n_significant: usize,
    /// Replicates whose refit failed; counted as non-significant.
    pub n_failed: usize,
    pub power: f64,
    pub lo: f64,
    pub hi: f64,
    pub seed: u64,
    /// AIC of the model on the source data.
    pub aic: Option<f64>,
}

impl PowerResult {
    fn from_outcomes(strategy: &str, term: &str, test: SignificanceTest, seed: u64, aic: Option<f64>, outcomes: &[Option<bool>]) -> Self {
        let n_sim = outcomes.len();
        let n_significant = outcomes.iter().filter(|o| **o == Some(true)).count();
        let n_failed = outcomes.iter().filter(|o| o.is_none()).count();
        let (lo, hi) = clopper_pearson(n_significant, n_sim, 0.95);
        Self {
            strategy: strategy.into(),
            term: term.into(),
            test,
            n_sim,
            n_significant,
            n_failed,
            power: n_significant as f64 / n_sim as f64,
            lo,
            hi,
            seed,
            aic,
        }
    }
}

/// CSV `strategy,term,power,lo,hi,n_sim,aic`.
pub fn write_power_csv<W: std::io::Write>(results: &[PowerResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["strategy", "term", "power", "lo", "hi", "n_sim", "aic"])?;
    for r in results {
        w.write_record([
            r.strategy.clone(),
            r.term.clone(),
            r.power.to_string(),
            r.lo.to_string(),
            r.hi.to_string(),
            r.n_sim.to_string(),
            r.aic.map(|a| a.to_string()).unwrap_or_else(|| "NA".into()),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

fn check_n_sim(n_sim: usize) -> Result<()> {
    if n_sim < 100 {
        return Err(Error::invalid(format!("n_sim must be >= 100, got {n_sim}")));
    }
    Ok(())
}

/// Seed of replicate `i`; depends only on `(seed, i)`.
pub fn replicate_seed(seed: u64, i: usize) -> u64 {
    stream_rng(seed, i as u64).next_u64()
}

/// Draws a response from a fitted mixed model on the problem's design:
/// `Xβ + Zb + ε` with `b` from the fitted random-effects covariance and
/// `ε ~ N(0, σ²)`.
pub fn simulate_response(problem: &LmmProblem, fit: &FittedLmm, seed: u64) -> Result<Vec<f64>> {
    if fit.coefficients.len() != problem.design.n_cols() || fit.theta.len() != problem.n_theta() {
        return Err(Error::invalid("fitted model does not match the problem"));
    }
    let mut rng = stream_rng(seed, 0);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let factors = problem.relative_factors(&fit.theta);
    let mut b = Vec::with_capacity(problem.q());
    for (blk, t) in problem.blocks.iter().zip(&factors) {
        for _ in 0..blk.levels.len() {
            if blk.k() == 1 {
                b.push(fit.sigma * t[0][0] * normal());
            } else {
                let (z0, z1) = (normal(), normal());
                b.push(fit.sigma * t[0][0] * z0);
                b.push(fit.sigma * (t[1][0] * z0 + t[1][1] * z1));
            }
        }
    }
    let x = &problem.design.x;
    let scale = &problem.design.column_scale;
    Ok((0..problem.n_obs())
        .map(|i| {
            let fixed: f64 = (0..x.ncols()).map(|j| x[(i, j)] * fit.coefficients[j] * scale[j]).sum();
            let random: f64 = problem.z_row(i).iter().map(|&(a, v)| v * b[a]).sum();
            fixed + random + fit.sigma * normal()
        })
        .collect())
}

/// Single column of `term`, as required by the t rule.
fn target_column(names: &[String], column_terms: &[String], term: &str) -> Result<String> {
    let cols: Vec<&String> = names
        .iter()
        .zip(column_terms)
        .filter(|(_, t)| *t == term)
        .map(|(n, _)| n)
        .collect();
    match cols.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(Error::Formula(format!("target term '{term}' is not in the model"))),
        _ => Err(Error::invalid(format!(
            "target term '{term}' has {} columns; use the LRT test",
            cols.len()
        ))),
    }
}

/// Power of `term` by simulating from a fitted mixed model and refitting it.
pub fn power_fitted(
    problem: &LmmProblem,
    fit: &FittedLmm,
    term: &str,
    test: SignificanceTest,
    n_sim: usize,
    seed: u64,
) -> Result<PowerResult> {
    check_n_sim(n_sim)?;
    let column = match test {
        SignificanceTest::TAbove2 => Some(target_column(&problem.design.names, &problem.design.column_terms, term)?),
        SignificanceTest::Lrt => None,
    };
    let reduced = match test {
        SignificanceTest::TAbove2 => None,
        SignificanceTest::Lrt => {
            let design = problem.design.without_term(term)?;
            let fixed = problem.fixed.without_term(term)?;
            Some(LmmProblem::from_parts(
                fixed,
                problem.random.clone(),
                design,
                problem.y.clone(),
                problem.blocks.clone(),
            )?)
        }
    };
    let outcomes = par::map_indexed(n_sim, |i| -> Option<bool> {
        let y = simulate_response(problem, fit, replicate_seed(seed, i)).ok()?;
        let full = problem.with_response(y.clone()).ok()?.fit().ok()?;
        match (&reduced, &column) {
            (Some(red), _) => {
                let small = red.with_response(y).ok()?.fit().ok()?;
                Some(lrt(&small, &full).ok()?.p_value < LRT_ALPHA)
            }
            (None, Some(col)) => Some(full.t_value(col)?.abs() >= 2.0),
            (None, None) => None,
        }
    });
    Ok(PowerResult::from_outcomes("fitted", term, test, seed, Some(fit.aic), &outcomes))
}

/// Analysis applied to each simulated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisPlan {
    pub strategy: Strategy,
    pub fixed: ModelSpec,
    pub random: RandomSpec,
    #[serde(default)]
    pub roi_map: Option<RoiMap>,
}

impl AnalysisPlan {
    /// The strategy's model over `factors`.
    pub fn for_strategy(strategy: Strategy, factors: &[&str], random: RandomSpec, roi_map: Option<RoiMap>) -> Self {
        Self {
            strategy,
            fixed: strategy.model_spec("uv", factors, "baseline"),
            random,
            roi_map,
        }
    }
}

fn fit_and_test(
    table: &crate::epochs::TrialTable,
    plan: &AnalysisPlan,
    term: &str,
    test: SignificanceTest,
) -> Result<(bool, FittedModel)> {
    let table = plan.strategy.prepare(table, "baseline")?;
    let full = fit_model(&table, &plan.fixed, &plan.random)?;
    let sig = match test {
        SignificanceTest::TAbove2 => {
            let design = crate::design::build_design(&table, &plan.fixed)?;
            let col = target_column(&design.names, &design.column_terms, term)?;
            full.t_value(&col)
                .ok_or_else(|| Error::UnknownColumn(col.clone()))?
                .abs()
                >= 2.0
        }
        SignificanceTest::Lrt => {
            let small = fit_model(&table, &plan.fixed.without_term(term)?, &plan.random)?;
            lrt(&small, &full)?.p_value < LRT_ALPHA
        }
    };
    Ok((sig, full))
}

/// Power of `term` under `plan` on data regenerated from `config`. Replicate
/// `i` uses the generator seed [`replicate_seed`]`(seed, i)`, so strategies
/// run with the same seed see identical data. The reported AIC is that of
/// replicate 0.
pub fn power_synthetic(
    config: &SynthConfig,
    plan: &AnalysisPlan,
    term: &str,
    test: SignificanceTest,
    n_sim: usize,
    seed: u64,
) -> Result<PowerResult> {
    check_n_sim(n_sim)?;
    config.validate()?;
    let one = |i: usize| -> Result<(bool, FittedModel)> {
        let (e, _) = generate(config, replicate_seed(seed, i))?;
        let table = window_table(&e, &config.baseline_window, &config.analysis_window, plan.roi_map.as_ref())?;
        fit_and_test(&table, plan, term, test)
    };
    let mut runs = par::map_indexed(n_sim, one);
    // a mis-specified plan fails every replicate; report it instead of power 0
    if runs[0].as_ref().is_err_and(|e| !is_refit_failure(e)) {
        return Err(runs.swap_remove(0).expect_err("checked above"));
    }
    let aic = runs[0].as_ref().ok().map(|(_, fit)| fit.aic());
    let outcomes: Vec<Option<bool>> = runs.into_iter().map(|r| r.ok().map(|(s, _)| s)).collect();
    Ok(PowerResult::from_outcomes(plan.strategy.label(), term, test, seed, aic, &outcomes))
}

fn is_refit_failure(e: &Error) -> bool {
    matches!(e, Error::NotConverged { .. } | Error::Numerical(_) | Error::RankDeficient { .. })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::parse_formula;
    use crate::epochs::{TrialRow, TrialTable};

    fn grouped_table(n_groups: usize, per: usize) -> TrialTable {
        let mut rows = Vec::new();
        for g in 0..n_groups {
            for k in 0..per {
                rows.push(TrialRow {
                    subject: format!("s{g}"),
                    item: format!("i{k}"),
                    condition: if k % 2 == 0 { "a".into() } else { "b".into() },
                    trial_index: k as i64,
                    location: "Cz".into(),
                });
            }
        }
        let values = (0..rows.len()).map(|i| (i as f64 * 0.7).sin()).collect();
        TrialTable {
            location_kind: "channel".into(),
            rows,
            values,
            covariates: Default::default(),
        }
    }

    #[test]
    fn zero_variance_gives_fixed_part() {
        let t = grouped_table(4, 6);
        let (fixed, random) = parse_formula("uv ~ condition + (1 | subj)").unwrap();
        let prob = LmmProblem::new(&t, &fixed, &random).unwrap();
        let mut fit = prob.fit().unwrap();
        fit.sigma = 0.0;
        let y = simulate_response(&prob, &fit, 1).unwrap();
        let b0 = fit.coefficients[0];
        let b1 = fit.coefficients[1];
        for (row, v) in t.rows.iter().zip(&y) {
            let code = if row.condition == "a" { 1.0 } else { -1.0 };
            assert!((v - (b0 + b1 * code)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_small_n_sim_and_missing_term() {
        let t = grouped_table(4, 6);
        let (fixed, random) = parse_formula("uv ~ condition + (1 | subj)").unwrap();
        let prob = LmmProblem::new(&t, &fixed, &random).unwrap();
        let fit = prob.fit().unwrap();
        assert!(power_fitted(&prob, &fit, "condition", SignificanceTest::TAbove2, 10, 1).is_err());
        assert!(power_fitted(&prob, &fit, "roi", SignificanceTest::TAbove2, 100, 1).is_err());
    }

    #[test]
    fn power_csv_layout() {
        let r = PowerResult::from_outcomes("regression", "condition", SignificanceTest::TAbove2, 3, Some(10.5), &[Some(true), Some(false), None, Some(true)]);
        assert_eq!(r.n_significant, 2);
        assert_eq!(r.n_failed, 1);
        assert_eq!(r.power, 0.5);
        assert!(r.lo <= r.power && r.power <= r.hi);
        let mut buf = Vec::new();
        write_power_csv(&[r], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("strategy,term,power,lo,hi,n_sim,aic\nregression,condition,0.5,"));
    }
}
