//! Subject-level bootstrap bands, difference waves and the
//! baseline-correlation diagnostic.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::apply_traditional;
use crate::design::ModelSpec;
use crate::epochs::{subject_means, EpochSet, SubjectWaveforms, TimeWindow};
use crate::error::{Error, Result};
use crate::ols::regression_adjust;
use crate::stats::{pearson, quantile_sorted};
use crate::synth::stream_rng;
use crate::{par, stats};

pub const DEFAULT_N_BOOT: usize = 2000;

/// Percentile bootstrap band over a flat cell grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapBand {
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
    pub n_boot: usize,
    pub seed: u64,
}

fn check_band_args(n_subjects: usize, min_subjects: usize, level: f64, n_boot: usize) -> Result<()> {
    if n_subjects < min_subjects {
        return Err(Error::invalid(format!(
            "bootstrap needs at least {min_subjects} subjects, got {n_subjects}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("level must lie in (0, 1), got {level}")));
    }
    if n_boot < 100 {
        return Err(Error::invalid(format!("n_boot must be >= 100, got {n_boot}")));
    }
    Ok(())
}

/// Subject indices drawn with replacement, one stream per replicate.
fn resample_indices(n_subjects: usize, n_boot: usize, seed: u64) -> Vec<Vec<usize>> {
    par::map_indexed(n_boot, |r| {
        let mut rng = stream_rng(seed, r as u64);
        (0..n_subjects).map(|_| rng.random_range(0..n_subjects)).collect()
    })
}

/// Percentile interval of `stat(cell, resample)` per cell. NaN replicates are
/// ignored; a cell with no finite replicate gets NaN bounds.
fn percentile_cells(
    n_subjects: usize,
    n_cells: usize,
    level: f64,
    n_boot: usize,
    seed: u64,
    stat: impl Fn(usize, &[usize]) -> f64 + Sync + Send,
) -> (Vec<f64>, Vec<f64>) {
    let draws = resample_indices(n_subjects, n_boot, seed);
    let (qlo, qhi) = ((1.0 - level) / 2.0, (1.0 + level) / 2.0);
    let bounds = par::map_indexed(n_cells, |cell| {
        let mut v: Vec<f64> = draws.iter().map(|d| stat(cell, d)).filter(|x| !x.is_nan()).collect();
        v.sort_by(f64::total_cmp);
        (quantile_sorted(&v, qlo), quantile_sorted(&v, qhi))
    });
    bounds.into_iter().unzip()
}

/// Rows of `w` reordered by subject name.
fn sorted_rows(w: &SubjectWaveforms) -> Vec<usize> {
    let mut order: Vec<usize> = (0..w.subjects.len()).collect();
    order.sort_by(|&a, &b| w.subjects[a].cmp(&w.subjects[b]));
    order
}

/// Resamples subjects with replacement and takes the `(1 ± level)/2`
/// quantiles of the across-subject mean per cell.
pub fn bootstrap_band(subject_level: &SubjectWaveforms, level: f64, n_boot: usize, seed: u64) -> Result<BootstrapBand> {
    let n = subject_level.subjects.len();
    check_band_args(n, 2, level, n_boot)?;
    let order = sorted_rows(subject_level);
    let cells = subject_level.n_cells;
    let (lower, upper) = percentile_cells(n, cells, level, n_boot, seed, |cell, idx| {
        idx.iter().map(|&i| subject_level.data[order[i] * cells + cell]).sum::<f64>() / n as f64
    });
    Ok(BootstrapBand {
        estimate: subject_level.mean(),
        lower,
        upper,
        level,
        n_boot,
        seed,
    })
}

/// Per-condition curves over `channels × samples`, as exported to CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    pub channels: Vec<String>,
    pub times_ms: Vec<f64>,
    /// Curve labels, one block of `channels × samples` each.
    pub conditions: Vec<String>,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl CurveSet {
    fn push(&mut self, label: String, band: BootstrapBand) {
        self.conditions.push(label);
        self.estimate.extend(band.estimate);
        self.lower.extend(band.lower);
        self.upper.extend(band.upper);
    }

    fn block(&self, condition: usize, channel: usize) -> std::ops::Range<usize> {
        let ns = self.times_ms.len();
        let start = (condition * self.channels.len() + channel) * ns;
        start..start + ns
    }

    pub fn estimate_wave(&self, condition: usize, channel: usize) -> &[f64] {
        &self.estimate[self.block(condition, channel)]
    }

    pub fn lower_wave(&self, condition: usize, channel: usize) -> &[f64] {
        &self.lower[self.block(condition, channel)]
    }

    pub fn upper_wave(&self, condition: usize, channel: usize) -> &[f64] {
        &self.upper[self.block(condition, channel)]
    }

    /// Long CSV `channel,time_ms,condition,estimate,lo,hi`; undefined values
    /// are written as `NA`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let fmt = |v: f64| if v.is_nan() { "NA".to_string() } else { v.to_string() };
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["channel", "time_ms", "condition", "estimate", "lo", "hi"])?;
        for (k, cond) in self.conditions.iter().enumerate() {
            for (c, ch) in self.channels.iter().enumerate() {
                for (i, t) in self.block(k, c).zip(&self.times_ms) {
                    w.write_record([
                        ch.as_str(),
                        &t.to_string(),
                        cond.as_str(),
                        &fmt(self.estimate[i]),
                        &fmt(self.lower[i]),
                        &fmt(self.upper[i]),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Grand averages of every condition with subject bootstrap bands.
pub fn condition_bands(e: &EpochSet, level: f64, n_boot: usize, seed: u64) -> Result<CurveSet> {
    let (subject_level, _) = subject_means(e);
    let mut out = CurveSet {
        channels: e.channels().to_vec(),
        times_ms: e.sampling().times(),
        conditions: Vec::new(),
        estimate: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
    };
    for (cond, sw) in subject_level {
        let band = bootstrap_band(&sw, level, n_boot, seed)?;
        out.push(cond, band);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Correction {
    None,
    Traditional { window: TimeWindow },
    /// Pointwise `baseline + condition + baseline:condition` model, with the
    /// fitted baseline terms removed trial by trial.
    Regression { window: TimeWindow },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceWave {
    pub condition_a: String,
    pub condition_b: String,
    pub channels: Vec<String>,
    pub times_ms: Vec<f64>,
    /// Per-subject `a − b` over `channels × samples`.
    pub subject_level: SubjectWaveforms,
    pub grand: Vec<f64>,
}

impl DifferenceWave {
    pub fn channel_wave(&self, channel: usize) -> &[f64] {
        let ns = self.times_ms.len();
        &self.grand[channel * ns..(channel + 1) * ns]
    }
}

/// Applies `correction`, forms per-subject condition means and subtracts
/// `a − b` within subject before averaging over subjects. Subjects lacking
/// either condition are skipped with a warning.
pub fn difference_wave(e: &EpochSet, condition_a: &str, condition_b: &str, correction: &Correction) -> Result<DifferenceWave> {
    let conds = e.conditions();
    for c in [condition_a, condition_b] {
        if !conds.iter().any(|x| x == c) {
            return Err(Error::invalid(format!("condition '{c}' has no trials")));
        }
    }
    let corrected = match correction {
        Correction::None => e.clone(),
        Correction::Traditional { window } => apply_traditional(e, window)?,
        Correction::Regression { window } => {
            let keep: Vec<usize> = (0..e.n_trials())
                .filter(|&t| {
                    let c = &e.trials()[t].condition;
                    c == condition_a || c == condition_b
                })
                .collect();
            let sub = e.select_trials(&keep);
            let spec = if condition_a == condition_b {
                ModelSpec::new("uv", &["baseline"])
            } else {
                ModelSpec::new("uv", &["baseline", "condition", "baseline:condition"])
            };
            regression_adjust(&sub, &spec, window)?
        }
    };
    let (means, _) = subject_means(&corrected);
    let (wa, wb) = (&means[condition_a], &means[condition_b]);
    let row_of = |w: &SubjectWaveforms| -> BTreeMap<String, usize> {
        w.subjects.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect()
    };
    let (ia, ib) = (row_of(wa), row_of(wb));
    let cells = wa.n_cells;
    let mut subjects = Vec::new();
    let mut data = Vec::new();
    for s in corrected.subjects() {
        match (ia.get(&s), ib.get(&s)) {
            (Some(&ra), Some(&rb)) => {
                data.extend(wa.row(ra).iter().zip(wb.row(rb)).map(|(a, b)| a - b));
                subjects.push(s);
            }
            _ => log::warn!("subject {s} lacks '{condition_a}' or '{condition_b}'; left out of the difference wave"),
        }
    }
    if subjects.is_empty() {
        return Err(Error::invalid(format!(
            "no subject has trials in both '{condition_a}' and '{condition_b}'"
        )));
    }
    let subject_level = SubjectWaveforms {
        subjects,
        n_cells: cells,
        data,
    };
    Ok(DifferenceWave {
        condition_a: condition_a.into(),
        condition_b: condition_b.into(),
        channels: e.channels().to_vec(),
        times_ms: e.sampling().times(),
        grand: subject_level.mean(),
        subject_level,
    })
}

/// Difference wave with a bootstrap band, as a one-curve [`CurveSet`].
pub fn difference_band(d: &DifferenceWave, level: f64, n_boot: usize, seed: u64) -> Result<CurveSet> {
    let band = bootstrap_band(&d.subject_level, level, n_boot, seed)?;
    let mut out = CurveSet {
        channels: d.channels.clone(),
        times_ms: d.times_ms.clone(),
        conditions: Vec::new(),
        estimate: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
    };
    out.push(format!("{}-{}", d.condition_a, d.condition_b), band);
    Ok(out)
}

/// Per condition and sample: Pearson r across subjects between the
/// subject-average baseline feature and the subject-average voltage, with a
/// 95% subject bootstrap band. Undefined correlations are NaN.
pub fn baseline_correlation_curve(e: &EpochSet, w: &TimeWindow, n_boot: usize, seed: u64) -> Result<CurveSet> {
    let range = e.sampling().sample_range(w)?;
    let (nc, ns) = (e.n_channels(), e.n_samples());
    let (subject_level, _) = subject_means(e);
    let mut out = CurveSet {
        channels: e.channels().to_vec(),
        times_ms: e.sampling().times(),
        conditions: Vec::new(),
        estimate: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
    };
    for (cond, sw) in subject_level {
        let n = sw.subjects.len();
        check_band_args(n, 3, 0.95, n_boot)?;
        let order = sorted_rows(&sw);
        // baseline feature per (sorted subject, channel)
        let feat: Vec<f64> = order
            .iter()
            .flat_map(|&s| {
                let row = sw.row(s);
                let range = range.clone();
                (0..nc).map(move |c| stats::mean(&row[c * ns + range.start..c * ns + range.end]))
            })
            .collect();
        let volt = |s: usize, cell: usize| sw.data[order[s] * sw.n_cells + cell];
        let r_of = |cell: usize, idx: &[usize]| -> f64 {
            let c = cell / ns;
            let x: Vec<f64> = idx.iter().map(|&s| feat[s * nc + c]).collect();
            let y: Vec<f64> = idx.iter().map(|&s| volt(s, cell)).collect();
            pearson(&x, &y).unwrap_or(f64::NAN)
        };
        let all: Vec<usize> = (0..n).collect();
        let estimate: Vec<f64> = par::map_indexed(nc * ns, |cell| r_of(cell, &all));
        let (lower, upper) = percentile_cells(n, nc * ns, 0.95, n_boot, seed, r_of);
        out.push(
            cond,
            BootstrapBand {
                estimate,
                lower,
                upper,
                level: 0.95,
                n_boot,
                seed,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epochs::{SamplingInfo, TrialMeta};

    fn waves(subjects: &[&str], data: Vec<f64>) -> SubjectWaveforms {
        SubjectWaveforms {
            subjects: subjects.iter().map(|s| s.to_string()).collect(),
            n_cells: data.len() / subjects.len(),
            data,
        }
    }

    #[test]
    fn identical_subjects_give_zero_width() {
        let w = waves(&["a", "b", "c"], vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0]);
        let b = bootstrap_band(&w, 0.95, 200, 3).unwrap();
        assert_eq!(b.lower, vec![1.5, -2.0]);
        assert_eq!(b.upper, vec![1.5, -2.0]);
    }

    #[test]
    fn band_rejects_bad_arguments() {
        let w = waves(&["a"], vec![1.0]);
        assert!(bootstrap_band(&w, 0.95, 200, 1).is_err());
        let w = waves(&["a", "b"], vec![1.0, 2.0]);
        assert!(bootstrap_band(&w, 1.0, 200, 1).is_err());
        assert!(bootstrap_band(&w, 0.95, 50, 1).is_err());
    }

    #[test]
    fn band_is_order_invariant_and_deterministic() {
        let w1 = waves(&["a", "b", "c", "d"], vec![1.0, 5.0, 2.0, 7.0, 4.0, 1.0, 9.0, 3.0]);
        let w2 = waves(&["c", "a", "d", "b"], vec![4.0, 1.0, 1.0, 5.0, 9.0, 3.0, 2.0, 7.0]);
        let b1 = bootstrap_band(&w1, 0.83, 500, 11).unwrap();
        let b2 = bootstrap_band(&w2, 0.83, 500, 11).unwrap();
        assert_eq!(b1, b2);
        for i in 0..2 {
            assert!(b1.lower[i] <= b1.upper[i]);
        }
    }

    fn small_epochs() -> EpochSet {
        let mut trials = Vec::new();
        let mut data = Vec::new();
        let mut k = 0.0f64;
        for s in ["s1", "s2", "s3", "s4"] {
            for (i, c) in ["a", "b", "a", "b"].iter().enumerate() {
                trials.push(TrialMeta {
                    subject: s.into(),
                    item: format!("i{i}"),
                    condition: c.to_string(),
                    trial_index: i as i64,
                });
                for n in 0..6 {
                    k += 1.0;
                    data.push((k * 0.37).sin() * 3.0 + n as f64 * 0.1);
                }
            }
        }
        EpochSet::new(data, trials, vec!["Cz".into()], SamplingInfo::new(100.0, -20.0, 6).unwrap()).unwrap()
    }

    #[test]
    fn difference_wave_identities() {
        let e = small_epochs();
        let w = TimeWindow::new(-20.0, 0.0).unwrap();
        let same = difference_wave(&e, "a", "a", &Correction::None).unwrap();
        assert!(same.grand.iter().all(|v| *v == 0.0));

        let ab = difference_wave(&e, "a", "b", &Correction::None).unwrap();
        let ba = difference_wave(&e, "b", "a", &Correction::None).unwrap();
        for (x, y) in ab.grand.iter().zip(&ba.grand) {
            assert_eq!(*x, -*y);
        }
        let trad = difference_wave(&e, "a", "b", &Correction::Traditional { window: w }).unwrap();
        assert!((trad.grand[0] + trad.grand[1]).abs() < 1e-12);
        // none − traditional is the baseline difference, constant over time
        let shift: Vec<f64> = ab.grand.iter().zip(&trad.grand).map(|(n, t)| n - t).collect();
        for v in &shift {
            assert!((v - shift[0]).abs() < 1e-12);
        }
        assert!(difference_wave(&e, "a", "zzz", &Correction::None).is_err());
        let reg = difference_wave(&e, "a", "b", &Correction::Regression { window: w }).unwrap();
        assert!(reg.grand.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn correlation_curve_in_range() {
        let e = small_epochs();
        let w = TimeWindow::new(-20.0, 0.0).unwrap();
        let curve = baseline_correlation_curve(&e, &w, 200, 5).unwrap();
        assert_eq!(curve.conditions, vec!["a", "b"]);
        for r in curve.estimate.iter().filter(|r| !r.is_nan()) {
            assert!((-1.0..=1.0).contains(r));
        }
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("channel,time_ms,condition,estimate,lo,hi\n"));
    }
}
