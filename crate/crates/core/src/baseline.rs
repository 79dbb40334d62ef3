//! Baseline features, traditional subtraction and the spectral log-ratio.

use serde::{Deserialize, Serialize};

use crate::design::ModelSpec;
use crate::epochs::{roi_average, window_average, EpochSet, RoiMap, TimeWindow, TrialTable};
use crate::error::{Error, Result};

/// Mean voltage over a baseline window, one value per (trial, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineFeature {
    pub window: TimeWindow,
    pub table: TrialTable,
}

impl BaselineFeature {
    pub fn values(&self) -> &[f64] {
        &self.table.values
    }

    /// Value for trial `t`, channel `c` of the source epoch set.
    pub fn get(&self, n_channels: usize, t: usize, c: usize) -> f64 {
        self.table.values[t * n_channels + c]
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["subj", "item", "trial", "channel", "baseline_uv"])?;
        for (r, v) in self.table.rows.iter().zip(&self.table.values) {
            w.write_record([
                r.subject.as_str(),
                r.item.as_str(),
                &r.trial_index.to_string(),
                r.location.as_str(),
                &v.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

pub fn baseline_feature(e: &EpochSet, w: &TimeWindow) -> Result<BaselineFeature> {
    Ok(BaselineFeature {
        window: *w,
        table: window_average(e, w)?,
    })
}

/// Analysis-window means with the baseline-window mean attached as the
/// `baseline` covariate, optionally averaged into ROIs.
pub fn window_table(
    e: &EpochSet,
    baseline_window: &TimeWindow,
    analysis_window: &TimeWindow,
    roi_map: Option<&RoiMap>,
) -> Result<TrialTable> {
    let feat = baseline_feature(e, baseline_window)?;
    let t = window_average(e, analysis_window)?.join_covariate("baseline", &feat.table)?;
    match roi_map {
        Some(m) => roi_average(&t, m),
        None => Ok(t),
    }
}

/// Subtracts each trial/channel baseline mean from every sample.
pub fn apply_traditional(e: &EpochSet, w: &TimeWindow) -> Result<EpochSet> {
    let feat = baseline_feature(e, w)?;
    let nc = e.n_channels();
    Ok(e.map_traces(|t, c, tr| {
        let b = feat.get(nc, t, c);
        tr.iter_mut().for_each(|v| *v -= b);
    }))
}

/// Subtracts `weight(t, c) * baseline` from every sample; `weight = 1` is
/// traditional correction.
pub fn apply_weighted(
    e: &EpochSet,
    feat: &BaselineFeature,
    weight: impl Fn(usize, usize, usize) -> f64,
    center: f64,
) -> EpochSet {
    let nc = e.n_channels();
    e.map_traces(|t, c, tr| {
        let b = feat.get(nc, t, c) - center;
        for (k, v) in tr.iter_mut().enumerate() {
            *v -= weight(t, c, k) * b;
        }
    })
}

/// `ln(power_window) - ln(power_baseline)`; multiply by 10/ln(10) for dB.
pub fn log_ratio_normalize(power_window: f64, power_baseline: f64) -> Result<f64> {
    if !(power_window > 0.0 && power_baseline > 0.0) {
        return Err(Error::invalid(format!(
            "power must be positive, got window={power_window}, baseline={power_baseline}"
        )));
    }
    Ok(power_window.ln() - power_baseline.ln())
}

/// Log-ratio in decibels.
pub fn log_ratio_db(power_window: f64, power_baseline: f64) -> Result<f64> {
    Ok(10.0 * log_ratio_normalize(power_window, power_baseline)? / std::f64::consts::LN_10)
}

/// How the pre-stimulus baseline enters a window-level model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Baseline ignored.
    None,
    /// Baseline subtracted from the response (weight pinned to 1).
    Traditional,
    /// Baseline as an additive covariate.
    Regression,
    /// Baseline plus every pairwise interaction among baseline and factors.
    RegressionPairwise,
    /// Full crossing of baseline and factors.
    RegressionFull,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::None,
        Strategy::Traditional,
        Strategy::Regression,
        Strategy::RegressionPairwise,
        Strategy::RegressionFull,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Traditional => "traditional",
            Strategy::Regression => "regression",
            Strategy::RegressionPairwise => "regression-pairwise",
            Strategy::RegressionFull => "regression-full",
        }
    }

    /// Weight the baseline is pinned to, if it is not estimated.
    pub fn pinned_weight(&self) -> Option<f64> {
        match self {
            Strategy::None => Some(0.0),
            Strategy::Traditional => Some(1.0),
            _ => None,
        }
    }

    /// Fixed-effects spec over `factors` for this strategy, with the baseline
    /// covariate called `baseline`.
    pub fn model_spec(&self, response: &str, factors: &[&str], baseline: &str) -> ModelSpec {
        let mut with_b = vec![baseline];
        with_b.extend_from_slice(factors);
        let terms = match self {
            Strategy::None | Strategy::Traditional => crossed_terms(factors, factors.len()),
            Strategy::Regression => {
                let mut t = vec![baseline.to_string()];
                t.extend(crossed_terms(factors, factors.len()));
                t
            }
            Strategy::RegressionPairwise => {
                let mut t = crossed_terms(&with_b, 2);
                t.extend(crossed_terms(factors, factors.len()).into_iter().filter(|x| x.matches(':').count() >= 2));
                t
            }
            Strategy::RegressionFull => crossed_terms(&with_b, with_b.len()),
        };
        let refs: Vec<&str> = terms.iter().map(String::as_str).collect();
        ModelSpec::new(response, &refs)
    }

    /// Applies the response transformation of a pinned strategy: the
    /// traditional strategy subtracts the `baseline` covariate.
    pub fn prepare(&self, t: &TrialTable, baseline: &str) -> Result<TrialTable> {
        match self {
            Strategy::Traditional => {
                let b = t
                    .numeric(baseline)
                    .ok_or_else(|| Error::UnknownColumn(baseline.to_string()))?;
                let v = t.values.iter().zip(b).map(|(y, b)| y - b).collect();
                t.with_values(v)
            }
            _ => Ok(t.clone()),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.label() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown strategy '{s}' (expected none, traditional, regression, regression-pairwise or regression-full)"
                ))
            })
    }
}

/// Main effects and interactions up to `max_order`, by order then position.
fn crossed_terms(names: &[&str], max_order: usize) -> Vec<String> {
    let n = names.len();
    let mut subsets: Vec<Vec<usize>> = (1u32..(1 << n))
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect::<Vec<_>>())
        .filter(|s: &Vec<usize>| s.len() <= max_order)
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    subsets
        .into_iter()
        .map(|s| s.iter().map(|&i| names[i]).collect::<Vec<_>>().join(":"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epochs::{SamplingInfo, TrialMeta};
    use proptest::prelude::{prop_assert, proptest};
    use super::Strategy;

    fn epochs(values: Vec<f64>, n_trials: usize, n_samples: usize) -> EpochSet {
        let trials = (0..n_trials)
            .map(|t| TrialMeta {
                subject: "s".into(),
                item: format!("i{t}"),
                condition: if t % 2 == 0 { "a" } else { "b" }.into(),
                trial_index: t as i64,
            })
            .collect();
        EpochSet::new(values, trials, vec!["Cz".into()], SamplingInfo::new(500.0, -100.0, n_samples).unwrap()).unwrap()
    }

    #[test]
    fn constant_epoch_feature() {
        let e = epochs(vec![3.0; 200], 2, 100);
        let f = baseline_feature(&e, &TimeWindow::new(-100.0, 0.0).unwrap()).unwrap();
        assert_eq!(f.values(), &[3.0, 3.0]);
    }

    #[test]
    fn whole_epoch_feature_is_trial_mean() {
        let vals: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin() * 5.0).collect();
        let e = epochs(vals.clone(), 2, 100);
        let f = baseline_feature(&e, &TimeWindow::whole(e.sampling())).unwrap();
        for t in 0..2 {
            let m: f64 = vals[t * 100..(t + 1) * 100].iter().sum::<f64>() / 100.0;
            assert!((f.values()[t] - m).abs() < 1e-12);
        }
    }

    #[test]
    fn traditional_zeroes_window_and_is_idempotent() {
        let vals: Vec<f64> = (0..300).map(|i| ((i * 7919) % 101) as f64 / 10.0 - 5.0).collect();
        let e = epochs(vals, 3, 100);
        let w = TimeWindow::new(-100.0, 0.0).unwrap();
        let once = apply_traditional(&e, &w).unwrap();
        for v in baseline_feature(&once, &w).unwrap().values() {
            assert!(v.abs() < 1e-10);
        }
        let twice = apply_traditional(&once, &w).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_ratio_cases() {
        assert_eq!(log_ratio_normalize(7.5, 7.5).unwrap(), 0.0);
        assert!((log_ratio_normalize(10.0, 1.0).unwrap() - std::f64::consts::LN_10).abs() < 1e-12);
        assert!((log_ratio_db(10.0, 1.0).unwrap() - 10.0).abs() < 1e-12);
        assert!(log_ratio_normalize(0.0, 1.0).is_err());
        assert!(log_ratio_normalize(1.0, -2.0).is_err());
    }

    #[test]
    fn strategy_specs() {
        let f = ["roi", "condition"];
        let pw = Strategy::RegressionPairwise.model_spec("uv", &f, "baseline");
        assert_eq!(
            pw.formula(),
            "uv ~ baseline + roi + condition + baseline:roi + baseline:condition + roi:condition"
        );
        let full = Strategy::RegressionFull.model_spec("uv", &f, "baseline");
        assert_eq!(full.terms.len(), 7);
        assert_eq!(full.term_labels().last().unwrap(), "baseline:roi:condition");
        assert_eq!(Strategy::Traditional.model_spec("uv", &f, "baseline").formula(), "uv ~ roi + condition + roi:condition");
        assert_eq!(Strategy::Regression.model_spec("uv", &["condition"], "baseline").formula(), "uv ~ baseline + condition");
        for s in Strategy::ALL {
            assert_eq!(s.label().parse::<Strategy>().unwrap(), s);
        }
        assert!("weighted".parse::<Strategy>().is_err());
    }

    proptest! {
        #[test]
        fn log_ratio_matches_log_of_quotient(a in 1e-6f64..1e6, b in 1e-6f64..1e6) {
            let d = log_ratio_normalize(a, b).unwrap();
            let q = (a / b).ln();
            prop_assert!((d - q).abs() <= 1e-12 * q.abs().max(1.0));
        }

        #[test]
        fn log_ratio_scale_invariant(a in 1e-3f64..1e3, b in 1e-3f64..1e3, s in 1e-3f64..1e3) {
            let d1 = log_ratio_normalize(a, b).unwrap();
            let d2 = log_ratio_normalize(s * a, s * b).unwrap();
            prop_assert!((d1 - d2).abs() < 1e-9);
        }

        #[test]
        fn subtraction_commutes_with_window_mean(vals in proptest::collection::vec(-50.0f64..50.0, 200)) {
            let e = epochs(vals, 2, 100);
            let base = TimeWindow::new(-100.0, 0.0).unwrap();
            let analysis = TimeWindow::new(20.0, 60.0).unwrap();
            let corrected = window_average(&apply_traditional(&e, &base).unwrap(), &analysis).unwrap();
            let raw = window_average(&e, &analysis).unwrap();
            let feat = baseline_feature(&e, &base).unwrap();
            for i in 0..2 {
                prop_assert!((corrected.values[i] - (raw.values[i] - feat.values()[i])).abs() < 1e-10);
            }
        }
    }
}
