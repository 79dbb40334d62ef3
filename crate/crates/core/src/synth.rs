//! Ground-truth synthetic ERP generator.
//!
//! Each trial draws a latent baseline state `b ~ N(µ_baseline, σ_baseline²)`
//! and a trial residual `ε ~ N(0, σ²)`. Pre-stimulus samples are `b` plus
//! drift plus white noise; post-stimulus samples are the intercepts plus
//! `drift_coupling · b`, drift, the condition effect (inside the analysis
//! window only), `ε` and white noise.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baseline::Strategy;
use crate::epochs::{EpochSet, SamplingInfo, TimeWindow, TrialMeta};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_items: usize,
    /// Repetitions of every (subject, item) pair.
    pub n_trials_per_cell: usize,
    pub conditions: Vec<String>,
    pub channels: Vec<String>,
    /// Difference between the first and last condition inside the analysis
    /// window (µV).
    pub true_effect_uv: f64,
    /// Post-stimulus grand mean (µV).
    #[serde(default)]
    pub intercept_uv: f64,
    /// Trial-level residual SD σ.
    pub sigma: f64,
    /// SD of the latent baseline state.
    pub sigma_baseline: f64,
    /// Optional per-condition override of `sigma_baseline`.
    #[serde(default)]
    pub sigma_baseline_by_condition: Option<BTreeMap<String, f64>>,
    pub mu_baseline: f64,
    /// True weight of the baseline state in the post-stimulus signal.
    pub drift_coupling: f64,
    /// Linear within-epoch drift (µV/s).
    pub drift_rate_uv_per_s: f64,
    pub random_sd_subject: f64,
    pub random_sd_item: f64,
    /// Per-sample white-noise SD; defaults to `sigma`.
    #[serde(default)]
    pub sample_noise_sd: Option<f64>,
    pub sampling: SamplingInfo,
    pub baseline_window: TimeWindow,
    pub analysis_window: TimeWindow,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 20,
            n_items: 20,
            n_trials_per_cell: 1,
            conditions: vec!["match".into(), "mismatch".into()],
            channels: vec!["Cz".into()],
            true_effect_uv: 0.0,
            intercept_uv: 0.0,
            sigma: 1.0,
            sigma_baseline: 0.5,
            sigma_baseline_by_condition: None,
            mu_baseline: 0.0,
            drift_coupling: 0.0,
            drift_rate_uv_per_s: 0.0,
            random_sd_subject: 0.0,
            random_sd_item: 0.0,
            sample_noise_sd: None,
            sampling: SamplingInfo {
                rate_hz: 500.0,
                epoch_start_ms: -100.0,
                n_samples: 350,
            },
            baseline_window: TimeWindow {
                start_ms: -100.0,
                end_ms: 0.0,
            },
            analysis_window: TimeWindow {
                start_ms: 350.0,
                end_ms: 600.0,
            },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let sds = [
            ("sigma", self.sigma),
            ("sigma_baseline", self.sigma_baseline),
            ("random_sd_subject", self.random_sd_subject),
            ("random_sd_item", self.random_sd_item),
            ("sample_noise_sd", self.sample_noise_sd.unwrap_or(0.0)),
        ];
        for (name, v) in sds {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a finite SD >= 0, got {v}")));
            }
        }
        if let Some(m) = &self.sigma_baseline_by_condition {
            if m.values().any(|v| !(*v >= 0.0)) {
                return Err(Error::invalid("per-condition baseline SDs must be >= 0"));
            }
        }
        if self.n_subjects == 0 || self.n_items == 0 || self.n_trials_per_cell == 0 {
            return Err(Error::invalid("subject, item and repetition counts must be >= 1"));
        }
        if self.conditions.is_empty() || self.channels.is_empty() {
            return Err(Error::invalid("need at least one condition and one channel"));
        }
        SamplingInfo::new(self.sampling.rate_hz, self.sampling.epoch_start_ms, self.sampling.n_samples)?;
        self.sampling.sample_range(&self.baseline_window)?;
        self.sampling.sample_range(&self.analysis_window)?;
        Ok(())
    }

    pub fn n_trials(&self) -> usize {
        self.n_subjects * self.n_items * self.n_trials_per_cell
    }

    pub fn noise_sd(&self) -> f64 {
        self.sample_noise_sd.unwrap_or(self.sigma)
    }

    fn baseline_sd(&self, condition: &str) -> f64 {
        self.sigma_baseline_by_condition
            .as_ref()
            .and_then(|m| m.get(condition).copied())
            .unwrap_or(self.sigma_baseline)
    }

    /// Condition effect for level `idx`: +effect/2 on the first level,
    /// −effect/2 on the last, 0 in between.
    pub fn condition_offset(&self, idx: usize) -> f64 {
        let k = self.conditions.len();
        if k < 2 {
            0.0
        } else if idx == 0 {
            self.true_effect_uv / 2.0
        } else if idx == k - 1 {
            -self.true_effect_uv / 2.0
        } else {
            0.0
        }
    }

    /// Named scenarios used by the CLI and the acceptance suite.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            sample_noise_sd: Some(0.25),
            ..Self::default()
        };
        match name {
            // 20 000 trials, uncoupled baseline noise
            "s3-variance" => Ok(Self {
                n_subjects: 20,
                n_items: 100,
                n_trials_per_cell: 10,
                ..base
            }),
            // baseline state fully carried into the analysis window
            "s3-coupled" => Ok(Self {
                n_subjects: 20,
                n_items: 50,
                n_trials_per_cell: 2,
                drift_coupling: 1.0,
                ..base
            }),
            // 400 trials; condition effect gives ~70% power for the
            // regression model under |t| >= 2
            "s3-power" => Ok(Self {
                n_subjects: 20,
                n_items: 20,
                n_trials_per_cell: 1,
                true_effect_uv: 0.2524,
                ..base
            }),
            // crossed subjects/items with a negative baseline weight and
            // five ROIs of four channels
            "n400" => Ok(Self {
                n_subjects: 20,
                n_items: 40,
                n_trials_per_cell: 1,
                channels: ["F3", "F7", "FC5", "FC1", "P3", "P7", "CP5", "CP1", "F4", "F8", "FC6", "FC2", "P4", "P8", "CP6", "CP2", "Fz", "Cz", "Pz", "FCz"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
                true_effect_uv: 1.0,
                intercept_uv: -0.9,
                sigma: 3.9,
                sigma_baseline: 3.0,
                drift_coupling: -0.2,
                random_sd_subject: 0.5,
                random_sd_item: 1.0,
                sample_noise_sd: Some(1.0),
                sampling: SamplingInfo {
                    rate_hz: 250.0,
                    epoch_start_ms: -200.0,
                    n_samples: 250,
                },
                ..Self::default()
            }),
            other => Err(Error::invalid(format!(
                "unknown synth preset '{other}' (expected s3-variance, s3-coupled, s3-power or n400)"
            ))),
        }
    }

    /// Channel → ROI map for the `n400` preset's montage.
    pub fn n400_roi_map() -> crate::epochs::RoiMap {
        let groups = [
            ("LA", ["F3", "F7", "FC5", "FC1"]),
            ("LP", ["P3", "P7", "CP5", "CP1"]),
            ("RA", ["F4", "F8", "FC6", "FC2"]),
            ("RP", ["P4", "P8", "CP6", "CP2"]),
            ("M", ["Fz", "Cz", "Pz", "FCz"]),
        ];
        groups
            .iter()
            .flat_map(|(roi, chans)| chans.iter().map(move |c| (c.to_string(), roi.to_string())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialTruth {
    pub subject: String,
    pub item: String,
    pub trial_index: i64,
    pub condition: String,
    /// Latent baseline state per channel.
    pub baseline_state: Vec<f64>,
    /// Trial residual ε per channel.
    pub residual: Vec<f64>,
}

/// Everything needed to check estimates against the generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub seed: u64,
    pub subject_effects: BTreeMap<String, f64>,
    pub item_effects: BTreeMap<String, f64>,
    pub trials: Vec<TrialTruth>,
}

const SUBJECT_STREAM: u64 = u64::MAX;
const ITEM_STREAM: u64 = u64::MAX - 1;

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Generates an epoch set and its latent values.
pub fn generate(c: &SynthConfig, seed: u64) -> Result<(EpochSet, GroundTruth)> {
    c.validate()?;
    let subj_names: Vec<String> = (1..=c.n_subjects).map(|s| format!("s{s:02}")).collect();
    let item_names: Vec<String> = (1..=c.n_items).map(|i| format!("i{i:03}")).collect();
    let mut rng = stream_rng(seed, SUBJECT_STREAM);
    let subj_eff: Vec<f64> = (0..c.n_subjects).map(|_| c.random_sd_subject * normal(&mut rng)).collect();
    let mut rng = stream_rng(seed, ITEM_STREAM);
    let item_eff: Vec<f64> = (0..c.n_items).map(|_| c.random_sd_item * normal(&mut rng)).collect();

    let ns = c.sampling.n_samples;
    let nc = c.channels.len();
    let times = c.sampling.times();
    let analysis = c.sampling.sample_range(&c.analysis_window)?;
    let noise_sd = c.noise_sd();
    let k = c.conditions.len();
    let reps = c.n_trials_per_cell;

    let trials = par::map_indexed(c.n_trials(), |t| {
        let s = t / (c.n_items * reps);
        let i = (t / reps) % c.n_items;
        let r = t % reps;
        let cond_idx = (s + i + r) % k;
        let cond = &c.conditions[cond_idx];
        let mut rng = stream_rng(seed, t as u64);
        let mut data = Vec::with_capacity(nc * ns);
        let mut states = Vec::with_capacity(nc);
        let mut residuals = Vec::with_capacity(nc);
        let b_sd = c.baseline_sd(cond);
        let offset = c.intercept_uv + subj_eff[s] + item_eff[i];
        for _ in 0..nc {
            let b = c.mu_baseline + b_sd * normal(&mut rng);
            let eps = c.sigma * normal(&mut rng);
            for (kk, &tau) in times.iter().enumerate() {
                let drift = c.drift_rate_uv_per_s * tau / 1000.0;
                let noise = noise_sd * normal(&mut rng);
                let v = if tau < 0.0 {
                    b + drift + noise
                } else {
                    let effect = if analysis.contains(&kk) { c.condition_offset(cond_idx) } else { 0.0 };
                    offset + c.drift_coupling * b + drift + effect + eps + noise
                };
                data.push(v);
            }
            states.push(b);
            residuals.push(eps);
        }
        let meta = TrialMeta {
            subject: subj_names[s].clone(),
            item: item_names[i].clone(),
            condition: cond.clone(),
            trial_index: (i * reps + r) as i64,
        };
        let truth = TrialTruth {
            subject: meta.subject.clone(),
            item: meta.item.clone(),
            trial_index: meta.trial_index,
            condition: cond.clone(),
            baseline_state: states,
            residual: residuals,
        };
        (meta, data, truth)
    });

    let mut metas = Vec::with_capacity(trials.len());
    let mut data = Vec::with_capacity(trials.len() * nc * ns);
    let mut truths = Vec::with_capacity(trials.len());
    for (m, d, tr) in trials {
        metas.push(m);
        data.extend(d);
        truths.push(tr);
    }
    let epochs = EpochSet::new(data, metas, c.channels.clone(), c.sampling)?;
    Ok((
        epochs,
        GroundTruth {
            config: c.clone(),
            seed,
            subject_effects: subj_names.into_iter().zip(subj_eff).collect(),
            item_effects: item_names.into_iter().zip(item_eff).collect(),
            trials: truths,
        },
    ))
}

/// Residual variance of the window mean under each strategy when the
/// baseline is pure noise: σ² without subtraction, σ² + σ_baseline² with it.
pub fn theoretical_residual_variance(c: &SynthConfig, strategy: Strategy) -> Result<f64> {
    if c.drift_coupling != 0.0 {
        return Err(Error::invalid(format!(
            "theoretical residual variance assumes drift_coupling = 0, got {}",
            c.drift_coupling
        )));
    }
    let s2 = c.sigma * c.sigma;
    Ok(match strategy {
        Strategy::Traditional => s2 + c.sigma_baseline * c.sigma_baseline,
        _ => s2,
    })
}
