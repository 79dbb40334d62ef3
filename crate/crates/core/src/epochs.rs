//! Epoched EEG data: ingestion, artifact rejection and window/ROI aggregation.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid tolerance used when matching sample times to windows and when
/// validating a loaded time grid.
pub const TIME_TOL_MS: f64 = 1e-6;

pub const EPOCH_COLUMNS: [&str; 7] = ["subj", "item", "condition", "trial", "channel", "time_ms", "uv"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingInfo {
    pub rate_hz: f64,
    /// Time of the first sample relative to stimulus onset.
    pub epoch_start_ms: f64,
    pub n_samples: usize,
}

impl SamplingInfo {
    pub fn new(rate_hz: f64, epoch_start_ms: f64, n_samples: usize) -> Result<Self> {
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(Error::invalid(format!("rate_hz must be positive, got {rate_hz}")));
        }
        if n_samples == 0 {
            return Err(Error::invalid("n_samples must be at least 1"));
        }
        if !epoch_start_ms.is_finite() {
            return Err(Error::invalid("epoch_start_ms must be finite"));
        }
        Ok(Self {
            rate_hz,
            epoch_start_ms,
            n_samples,
        })
    }

    pub fn period_ms(&self) -> f64 {
        1000.0 / self.rate_hz
    }

    pub fn time_ms(&self, k: usize) -> f64 {
        self.epoch_start_ms + k as f64 * self.period_ms()
    }

    /// All sample times.
    pub fn times(&self) -> Vec<f64> {
        (0..self.n_samples).map(|k| self.time_ms(k)).collect()
    }

    /// End of the epoch span (exclusive): one period past the last sample.
    pub fn end_ms(&self) -> f64 {
        self.time_ms(self.n_samples)
    }

    /// Sample indices `k` with `start <= t_k < end` (half-open, grid tolerance).
    pub fn sample_range(&self, w: &TimeWindow) -> Result<std::ops::Range<usize>> {
        if w.end_ms <= self.epoch_start_ms || w.start_ms >= self.end_ms() {
            return Err(Error::invalid(format!(
                "window [{}, {}) ms does not intersect epoch [{}, {}) ms",
                w.start_ms,
                w.end_ms,
                self.epoch_start_ms,
                self.end_ms()
            )));
        }
        let lo = (0..self.n_samples)
            .find(|&k| self.time_ms(k) >= w.start_ms - TIME_TOL_MS)
            .unwrap_or(self.n_samples);
        let hi = (lo..self.n_samples)
            .find(|&k| self.time_ms(k) >= w.end_ms - TIME_TOL_MS)
            .unwrap_or(self.n_samples);
        if hi <= lo {
            return Err(Error::EmptyWindow {
                start_ms: w.start_ms,
                end_ms: w.end_ms,
            });
        }
        Ok(lo..hi)
    }
}

/// Half-open time interval `[start_ms, end_ms)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start_ms: f64,
    pub end_ms: f64,
}

impl TimeWindow {
    pub fn new(start_ms: f64, end_ms: f64) -> Result<Self> {
        if !(start_ms < end_ms) || !start_ms.is_finite() || !end_ms.is_finite() {
            return Err(Error::invalid(format!(
                "time window needs start < end, got [{start_ms}, {end_ms})"
            )));
        }
        Ok(Self { start_ms, end_ms })
    }

    /// Named baseline windows: `pre100`, `pre200`, `pre500`, `post200` and
    /// `whole` (the full epoch).
    pub fn preset(name: &str, sampling: &SamplingInfo) -> Result<Self> {
        match name {
            "pre100" => Self::new(-100.0, 0.0),
            "pre200" => Self::new(-200.0, 0.0),
            "pre500" => Self::new(-500.0, 0.0),
            "post200" => Self::new(0.0, 200.0),
            "whole" => Self::new(sampling.epoch_start_ms, sampling.end_ms()),
            other => Err(Error::invalid(format!("unknown window preset '{other}'"))),
        }
    }

    pub fn whole(sampling: &SamplingInfo) -> Self {
        Self {
            start_ms: sampling.epoch_start_ms,
            end_ms: sampling.end_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrialMeta {
    pub subject: String,
    pub item: String,
    pub condition: String,
    /// Presentation order.
    pub trial_index: i64,
}

impl TrialMeta {
    pub fn key(&self) -> TrialKey {
        TrialKey {
            subject: self.subject.clone(),
            item: self.item.clone(),
            trial_index: self.trial_index,
        }
    }
}

/// Identity of a trial within an `EpochSet`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrialKey {
    pub subject: String,
    pub item: String,
    pub trial_index: i64,
}

/// Trials × channels × samples voltages (µV), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    data: Vec<f64>,
    trials: Vec<TrialMeta>,
    channels: Vec<String>,
    sampling: SamplingInfo,
}

impl EpochSet {
    pub fn new(
        data: Vec<f64>,
        trials: Vec<TrialMeta>,
        channels: Vec<String>,
        sampling: SamplingInfo,
    ) -> Result<Self> {
        let expected = trials.len() * channels.len() * sampling.n_samples;
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "data has {} values, expected {} trials x {} channels x {} samples = {expected}",
                data.len(),
                trials.len(),
                channels.len(),
                sampling.n_samples
            )));
        }
        if channels.is_empty() {
            return Err(Error::invalid("an epoch set needs at least one channel"));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("epoch data contains NaN"));
        }
        let mut seen = HashMap::with_capacity(trials.len());
        for t in &trials {
            if seen.insert(t.key(), ()).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate trial (subj={}, item={}, trial={})",
                    t.subject, t.item, t.trial_index
                )));
            }
        }
        let mut chan_seen = HashMap::new();
        for c in &channels {
            if chan_seen.insert(c.as_str(), ()).is_some() {
                return Err(Error::invalid(format!("duplicate channel '{c}'")));
            }
        }
        Ok(Self {
            data,
            trials,
            channels,
            sampling,
        })
    }

    pub fn n_trials(&self) -> usize {
        self.trials.len()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.sampling.n_samples
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.n_trials(), self.n_channels(), self.n_samples()]
    }

    pub fn trials(&self) -> &[TrialMeta] {
        &self.trials
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn sampling(&self) -> &SamplingInfo {
        &self.sampling
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    /// The waveform of one trial on one channel.
    pub fn trace(&self, trial: usize, channel: usize) -> &[f64] {
        let n = self.n_samples();
        let start = (trial * self.n_channels() + channel) * n;
        &self.data[start..start + n]
    }

    pub fn value(&self, trial: usize, channel: usize, sample: usize) -> f64 {
        self.trace(trial, channel)[sample]
    }

    /// Applies `f(trial, channel, trace)` to a copy of every trace.
    pub fn map_traces(&self, mut f: impl FnMut(usize, usize, &mut [f64])) -> EpochSet {
        let mut data = self.data.clone();
        let n = self.n_samples();
        let nc = self.n_channels();
        for (idx, chunk) in data.chunks_mut(n).enumerate() {
            f(idx / nc, idx % nc, chunk);
        }
        EpochSet {
            data,
            trials: self.trials.clone(),
            channels: self.channels.clone(),
            sampling: self.sampling,
        }
    }

    /// New epoch set holding only the trials at `keep` (in that order).
    pub fn select_trials(&self, keep: &[usize]) -> EpochSet {
        let per_trial = self.n_channels() * self.n_samples();
        let mut data = Vec::with_capacity(keep.len() * per_trial);
        for &t in keep {
            data.extend_from_slice(&self.data[t * per_trial..(t + 1) * per_trial]);
        }
        EpochSet {
            data,
            trials: keep.iter().map(|&t| self.trials[t].clone()).collect(),
            channels: self.channels.clone(),
            sampling: self.sampling,
        }
    }

    /// Distinct subjects in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        distinct(self.trials.iter().map(|t| t.subject.as_str()))
    }

    /// Distinct condition labels, sorted.
    pub fn conditions(&self) -> Vec<String> {
        let mut c = distinct(self.trials.iter().map(|t| t.condition.as_str()));
        c.sort();
        c
    }
}

pub(crate) fn distinct<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for s in items {
        if seen.insert(s) {
            out.push(s.to_string());
        }
    }
    out
}

/// Channel → ROI label.
pub type RoiMap = BTreeMap<String, String>;

/// Contents of the `.meta.json` sidecar.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct EpochMeta {
    pub rate_hz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi_map: Option<RoiMap>,
}

/// Result of [`load_epochs`].
#[derive(Debug, Clone)]
pub struct LoadedEpochs {
    pub epochs: EpochSet,
    pub roi_map: Option<RoiMap>,
    /// Trials dropped because they contained NaN samples.
    pub nan_dropped: Vec<TrialKey>,
}

/// `data/epochs.csv` → `data/epochs.meta.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.meta.json"))
}

#[derive(Debug, Deserialize)]
struct EpochRecord {
    subj: String,
    item: String,
    condition: String,
    trial: i64,
    channel: String,
    time_ms: f64,
    uv: f64,
}

/// Loads a long-format epochs CSV plus its JSON sidecar into a dense tensor.
pub fn load_epochs(path: &Path) -> Result<LoadedEpochs> {
    let meta_path = sidecar_path(path);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: EpochMeta = serde_json::from_str(&meta_text)?;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut loaded = read_epochs(file, meta.rate_hz, &path.display().to_string())?;
    loaded.roi_map = meta.roi_map;
    Ok(loaded)
}

/// Parses long-format epoch rows from any reader.
pub fn read_epochs<R: std::io::Read>(reader: R, rate_hz: f64, label: &str) -> Result<LoadedEpochs> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let missing: Vec<&str> = EPOCH_COLUMNS
        .iter()
        .copied()
        .filter(|c| !headers.iter().any(|h| h.trim() == *c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingColumns {
            file: label.to_string(),
            columns: missing.join(","),
        });
    }

    let mut trial_idx: HashMap<TrialKey, usize> = HashMap::new();
    let mut trials: Vec<TrialMeta> = Vec::new();
    let mut chan_idx: HashMap<String, usize> = HashMap::new();
    let mut channels: Vec<String> = Vec::new();
    let mut records: Vec<(usize, usize, f64, f64)> = Vec::new();
    for rec in rdr.deserialize() {
        let r: EpochRecord = rec?;
        let key = TrialKey {
            subject: r.subj.clone(),
            item: r.item.clone(),
            trial_index: r.trial,
        };
        let t = match trial_idx.get(&key) {
            Some(&t) => {
                if trials[t].condition != r.condition {
                    return Err(Error::invalid(format!(
                        "trial (subj={}, item={}, trial={}) has conflicting conditions '{}' and '{}'",
                        r.subj, r.item, r.trial, trials[t].condition, r.condition
                    )));
                }
                t
            }
            None => {
                trials.push(TrialMeta {
                    subject: r.subj,
                    item: r.item,
                    condition: r.condition,
                    trial_index: r.trial,
                });
                trial_idx.insert(key, trials.len() - 1);
                trials.len() - 1
            }
        };
        let c = *chan_idx.entry(r.channel.clone()).or_insert_with(|| {
            channels.push(r.channel);
            channels.len() - 1
        });
        records.push((t, c, r.time_ms, r.uv));
    }
    if records.is_empty() {
        return Err(Error::invalid(format!("{label} contains no data rows")));
    }

    let mut times: Vec<f64> = records.iter().map(|r| r.2).collect();
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() <= TIME_TOL_MS);
    let sampling = SamplingInfo::new(rate_hz, times[0], times.len())?;
    for (k, &t) in times.iter().enumerate() {
        let expected = sampling.time_ms(k);
        if (t - expected).abs() > TIME_TOL_MS {
            return Err(Error::TimeGrid {
                rate_hz,
                detail: format!("sample {k} at {t} ms, expected {expected} ms"),
            });
        }
    }

    let (nt, nc, ns) = (trials.len(), channels.len(), sampling.n_samples);
    let mut data = vec![f64::NAN; nt * nc * ns];
    let mut filled = vec![false; nt * nc * ns];
    for &(t, c, time, uv) in &records {
        let k = ((time - sampling.epoch_start_ms) / sampling.period_ms()).round() as usize;
        let idx = (t * nc + c) * ns + k;
        if filled[idx] {
            let m = &trials[t];
            return Err(Error::RaggedTrial {
                subject: m.subject.clone(),
                item: m.item.clone(),
                trial: m.trial_index,
                detail: format!("duplicate row for channel {} at {time} ms", channels[c]),
            });
        }
        filled[idx] = true;
        data[idx] = uv;
    }
    let per_trial = nc * ns;
    for (t, m) in trials.iter().enumerate() {
        if let Some(off) = filled[t * per_trial..(t + 1) * per_trial].iter().position(|f| !f) {
            return Err(Error::RaggedTrial {
                subject: m.subject.clone(),
                item: m.item.clone(),
                trial: m.trial_index,
                detail: format!(
                    "no value for channel {} at {} ms",
                    channels[off / ns],
                    sampling.time_ms(off % ns)
                ),
            });
        }
    }

    let mut keep = Vec::with_capacity(nt);
    let mut nan_dropped = Vec::new();
    for (t, m) in trials.iter().enumerate() {
        if data[t * per_trial..(t + 1) * per_trial].iter().any(|v| v.is_nan()) {
            nan_dropped.push(m.key());
        } else {
            keep.push(t);
        }
    }
    if !nan_dropped.is_empty() {
        log::warn!("dropped {} trial(s) containing NaN samples", nan_dropped.len());
    }
    let mut kept = Vec::with_capacity(keep.len() * per_trial);
    for &t in &keep {
        kept.extend_from_slice(&data[t * per_trial..(t + 1) * per_trial]);
    }
    let trials = keep.iter().map(|&t| trials[t].clone()).collect();
    Ok(LoadedEpochs {
        epochs: EpochSet::new(kept, trials, channels, sampling)?,
        roi_map: None,
        nan_dropped,
    })
}

/// Writes an epoch set as long CSV plus its `.meta.json` sidecar.
pub fn write_epochs(e: &EpochSet, path: &Path, roi_map: Option<&RoiMap>) -> Result<()> {
    let file = fs::File::create(path).map_err(|err| Error::io(path, err))?;
    write_epochs_csv(e, std::io::BufWriter::new(file))?;
    let meta = EpochMeta {
        rate_hz: e.sampling.rate_hz,
        roi_map: roi_map.cloned(),
    };
    let meta_path = sidecar_path(path);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
        .map_err(|err| Error::io(&meta_path, err))
}

pub fn write_epochs_csv<W: std::io::Write>(e: &EpochSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EPOCH_COLUMNS)?;
    let times = e.sampling.times();
    for (t, m) in e.trials.iter().enumerate() {
        let trial = m.trial_index.to_string();
        for (c, ch) in e.channels.iter().enumerate() {
            for (k, v) in e.trace(t, c).iter().enumerate() {
                w.write_record([
                    m.subject.as_str(),
                    m.item.as_str(),
                    m.condition.as_str(),
                    trial.as_str(),
                    ch.as_str(),
                    &times[k].to_string(),
                    &v.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|err| Error::io("<csv writer>", err))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedTrial {
    pub subj: String,
    pub item: String,
    pub trial: i64,
    pub max_abs_uv: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub threshold_uv: f64,
    pub rejected: Vec<RejectedTrial>,
    /// Dropped trials per condition.
    pub per_condition: BTreeMap<String, usize>,
    pub n_kept: usize,
}

impl RejectionReport {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rejected {
            w.serialize(r)?;
        }
        if self.rejected.is_empty() {
            w.write_record(["subj", "item", "trial", "max_abs_uv"])?;
        }
        w.flush().map_err(|err| Error::io("<csv writer>", err))?;
        Ok(())
    }
}

/// Drops every trial with any |sample| above `threshold_uv` on any channel.
pub fn reject_artifacts(e: &EpochSet, threshold_uv: f64) -> Result<(EpochSet, RejectionReport)> {
    if !(threshold_uv > 0.0) {
        return Err(Error::invalid(format!("rejection threshold must be positive, got {threshold_uv}")));
    }
    let per_trial = e.n_channels() * e.n_samples();
    let mut keep = Vec::new();
    let mut report = RejectionReport {
        threshold_uv,
        ..Default::default()
    };
    for (t, m) in e.trials.iter().enumerate() {
        let max_abs = e.data[t * per_trial..(t + 1) * per_trial]
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        if max_abs > threshold_uv {
            report.rejected.push(RejectedTrial {
                subj: m.subject.clone(),
                item: m.item.clone(),
                trial: m.trial_index,
                max_abs_uv: max_abs,
            });
            *report.per_condition.entry(m.condition.clone()).or_default() += 1;
        } else {
            keep.push(t);
        }
    }
    if keep.is_empty() {
        return Err(Error::AllRejected(e.n_trials()));
    }
    report.n_kept = keep.len();
    Ok((e.select_trials(&keep), report))
}

/// One observation of a [`TrialTable`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrialRow {
    pub subject: String,
    pub item: String,
    pub condition: String,
    pub trial_index: i64,
    /// Channel name or ROI label, depending on the table's location kind.
    pub location: String,
}

impl TrialRow {
    pub fn trial_key(&self) -> TrialKey {
        TrialKey {
            subject: self.subject.clone(),
            item: self.item.clone(),
            trial_index: self.trial_index,
        }
    }
}

/// Long-format, regression-ready observations: one row per (trial, location).
///
/// Factor columns are `subj`, `item`, `condition` and the location column
/// (`channel` or `roi`); numeric columns are the response `uv` plus any
/// attached covariates such as `baseline`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialTable {
    pub location_kind: String,
    pub rows: Vec<TrialRow>,
    pub values: Vec<f64>,
    pub covariates: BTreeMap<String, Vec<f64>>,
}

pub const RESPONSE_COLUMN: &str = "uv";

impl TrialTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Factor column by name.
    pub fn factor(&self, name: &str) -> Option<Vec<&str>> {
        let get: fn(&TrialRow) -> &str = match name {
            "subj" | "subject" => |r| r.subject.as_str(),
            "item" => |r| r.item.as_str(),
            "condition" => |r| r.condition.as_str(),
            _ if name == self.location_kind => |r| r.location.as_str(),
            _ => return None,
        };
        Some(self.rows.iter().map(get).collect())
    }

    /// Numeric column by name (`uv` or a covariate).
    pub fn numeric(&self, name: &str) -> Option<&[f64]> {
        if name == RESPONSE_COLUMN {
            Some(&self.values)
        } else {
            self.covariates.get(name).map(Vec::as_slice)
        }
    }

    pub fn with_covariate(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::invalid(format!(
                "covariate '{name}' has {} values for {} rows",
                values.len(),
                self.len()
            )));
        }
        self.covariates.insert(name.to_string(), values);
        Ok(self)
    }

    /// Attaches `other.values` as covariate `name`, joined on trial and location.
    pub fn join_covariate(self, name: &str, other: &TrialTable) -> Result<Self> {
        let index: HashMap<(TrialKey, &str), f64> = other
            .rows
            .iter()
            .zip(&other.values)
            .map(|(r, &v)| ((r.trial_key(), r.location.as_str()), v))
            .collect();
        let mut vals = Vec::with_capacity(self.len());
        for r in &self.rows {
            match index.get(&(r.trial_key(), r.location.as_str())) {
                Some(&v) => vals.push(v),
                None => {
                    return Err(Error::invalid(format!(
                        "no '{name}' value for subj={} item={} trial={} {}={}",
                        r.subject, r.item, r.trial_index, self.location_kind, r.location
                    )))
                }
            }
        }
        self.with_covariate(name, vals)
    }

    /// Same rows, response replaced.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::invalid("response length does not match table"));
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }

    /// Rows whose location is `loc`.
    pub fn filter_location(&self, loc: &str) -> TrialTable {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.rows[i].location == loc).collect();
        self.subset(&keep)
    }

    pub fn subset(&self, keep: &[usize]) -> TrialTable {
        TrialTable {
            location_kind: self.location_kind.clone(),
            rows: keep.iter().map(|&i| self.rows[i].clone()).collect(),
            values: keep.iter().map(|&i| self.values[i]).collect(),
            covariates: self
                .covariates
                .iter()
                .map(|(k, v)| (k.clone(), keep.iter().map(|&i| v[i]).collect()))
                .collect(),
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            "subj".to_string(),
            "item".into(),
            "condition".into(),
            "trial".into(),
            self.location_kind.clone(),
            RESPONSE_COLUMN.into(),
        ];
        header.extend(self.covariates.keys().cloned());
        w.write_record(&header)?;
        for (i, r) in self.rows.iter().enumerate() {
            let mut rec = vec![
                r.subject.clone(),
                r.item.clone(),
                r.condition.clone(),
                r.trial_index.to_string(),
                r.location.clone(),
                self.values[i].to_string(),
            ];
            rec.extend(self.covariates.values().map(|c| c[i].to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|err| Error::io("<csv writer>", err))?;
        Ok(())
    }
}

/// Mean over `start <= t < end` per (trial, channel).
pub fn window_average(e: &EpochSet, w: &TimeWindow) -> Result<TrialTable> {
    let range = e.sampling.sample_range(w)?;
    let len = range.len() as f64;
    let mut rows = Vec::with_capacity(e.n_trials() * e.n_channels());
    let mut values = Vec::with_capacity(rows.capacity());
    for (t, m) in e.trials.iter().enumerate() {
        for (c, ch) in e.channels.iter().enumerate() {
            let s: f64 = e.trace(t, c)[range.clone()].iter().sum();
            rows.push(TrialRow {
                subject: m.subject.clone(),
                item: m.item.clone(),
                condition: m.condition.clone(),
                trial_index: m.trial_index,
                location: ch.clone(),
            });
            values.push(s / len);
        }
    }
    Ok(TrialTable {
        location_kind: "channel".into(),
        rows,
        values,
        covariates: BTreeMap::new(),
    })
}

/// Averages channel rows into ROI rows; unmapped channels are dropped.
/// The response and every covariate are averaged alike.
pub fn roi_average(t: &TrialTable, m: &RoiMap) -> Result<TrialTable> {
    let present: std::collections::HashSet<&str> = t.rows.iter().map(|r| r.location.as_str()).collect();
    if !m.keys().any(|c| present.contains(c.as_str())) {
        return Err(Error::invalid("no channel of the table appears in the ROI map"));
    }
    let mut rois: Vec<&str> = m.values().map(String::as_str).collect();
    rois.sort();
    rois.dedup();
    for roi in &rois {
        if !m.iter().any(|(c, r)| r == roi && present.contains(c.as_str())) {
            return Err(Error::EmptyRoi(roi.to_string()));
        }
    }

    let mut index: HashMap<(TrialKey, &str), usize> = HashMap::new();
    let mut rows: Vec<TrialRow> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut cov_sums: Vec<Vec<f64>> = vec![Vec::new(); t.covariates.len()];
    let mut counts: Vec<usize> = Vec::new();
    for (i, r) in t.rows.iter().enumerate() {
        let Some(roi) = m.get(&r.location) else { continue };
        let g = *index.entry((r.trial_key(), roi.as_str())).or_insert_with(|| {
            rows.push(TrialRow {
                location: roi.clone(),
                ..r.clone()
            });
            sums.push(0.0);
            cov_sums.iter_mut().for_each(|c| c.push(0.0));
            counts.push(0);
            rows.len() - 1
        });
        sums[g] += t.values[i];
        for (cs, col) in cov_sums.iter_mut().zip(t.covariates.values()) {
            cs[g] += col[i];
        }
        counts[g] += 1;
    }
    let div = |v: Vec<f64>| -> Vec<f64> { v.into_iter().zip(&counts).map(|(s, &n)| s / n as f64).collect() };
    Ok(TrialTable {
        location_kind: "roi".into(),
        rows,
        values: div(sums),
        covariates: t.covariates.keys().cloned().zip(cov_sums.into_iter().map(div)).collect(),
    })
}

/// Per-subject waveforms over a flat cell grid (e.g. channels × samples).
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectWaveforms {
    pub subjects: Vec<String>,
    pub n_cells: usize,
    /// Row-major `subjects × cells`.
    pub data: Vec<f64>,
}

impl SubjectWaveforms {
    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.n_cells..(s + 1) * self.n_cells]
    }

    /// Unweighted mean over subjects per cell.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.subjects.len() as f64;
        (0..self.n_cells)
            .map(|c| (0..self.subjects.len()).map(|s| self.row(s)[c]).sum::<f64>() / n)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct GrandAverage {
    pub conditions: Vec<String>,
    /// Per condition: subject-level means over `channels × samples`.
    pub subject_level: BTreeMap<String, SubjectWaveforms>,
    /// Per condition: grand average over subjects, `channels × samples`.
    pub grand: BTreeMap<String, Vec<f64>>,
    /// (subject, condition) pairs left out because the subject had no trials.
    pub excluded: Vec<(String, String)>,
}

/// Per-subject trial means, keyed by condition.
pub fn subject_means(e: &EpochSet) -> (BTreeMap<String, SubjectWaveforms>, Vec<(String, String)>) {
    let cells = e.n_channels() * e.n_samples();
    let subjects = e.subjects();
    let mut out = BTreeMap::new();
    let mut excluded = Vec::new();
    for cond in e.conditions() {
        let mut subj_out = Vec::new();
        let mut data = Vec::new();
        for s in &subjects {
            let idx: Vec<usize> = (0..e.n_trials())
                .filter(|&t| &e.trials[t].subject == s && e.trials[t].condition == cond)
                .collect();
            if idx.is_empty() {
                log::warn!("subject {s} has no trials in condition {cond}; excluded from its average");
                excluded.push((s.clone(), cond.clone()));
                continue;
            }
            let mut acc = vec![0.0; cells];
            for &t in &idx {
                let block = &e.data[t * cells..(t + 1) * cells];
                acc.iter_mut().zip(block).for_each(|(a, v)| *a += v);
            }
            let n = idx.len() as f64;
            data.extend(acc.into_iter().map(|a| a / n));
            subj_out.push(s.clone());
        }
        out.insert(
            cond,
            SubjectWaveforms {
                subjects: subj_out,
                n_cells: cells,
                data,
            },
        );
    }
    (out, excluded)
}

/// Two-stage grand average: trials within subject, then subjects unweighted.
pub fn grand_average(e: &EpochSet) -> Result<GrandAverage> {
    let (subject_level, excluded) = subject_means(e);
    let mut grand = BTreeMap::new();
    for (cond, sw) in &subject_level {
        if sw.subjects.is_empty() {
            return Err(Error::invalid(format!("condition {cond} has no subjects")));
        }
        grand.insert(cond.clone(), sw.mean());
    }
    Ok(GrandAverage {
        conditions: subject_level.keys().cloned().collect(),
        subject_level,
        grand,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(s: &str, i: &str, c: &str, t: i64) -> TrialMeta {
        TrialMeta {
            subject: s.into(),
            item: i.into(),
            condition: c.into(),
            trial_index: t,
        }
    }

    fn small() -> EpochSet {
        // 2 trials x 1 channel x 3 samples at 500 Hz from 0 ms
        EpochSet::new(
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            vec![meta("s1", "i1", "a", 1), meta("s1", "i2", "b", 2)],
            vec!["Cz".into()],
            SamplingInfo::new(500.0, 0.0, 3).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn csv_shape() {
        let csv = "subj,item,condition,trial,channel,time_ms,uv\n\
                   s1,i1,a,1,Cz,0,1\ns1,i1,a,1,Cz,2,2\ns1,i1,a,1,Cz,4,3\n\
                   s1,i2,b,2,Cz,0,4\ns1,i2,b,2,Cz,2,5\ns1,i2,b,2,Cz,4,6\n";
        let l = read_epochs(csv.as_bytes(), 500.0, "t").unwrap();
        assert_eq!(l.epochs.shape(), [2, 1, 3]);
        assert_eq!(l.epochs, small());
    }

    #[test]
    fn ragged_trial_is_an_error() {
        let csv = "subj,item,condition,trial,channel,time_ms,uv\n\
                   s1,i1,a,1,Cz,0,1\ns1,i1,a,1,Cz,2,2\ns1,i1,a,1,Cz,4,3\n\
                   s1,i2,b,2,Cz,0,4\ns1,i2,b,2,Cz,4,6\n";
        let err = read_epochs(csv.as_bytes(), 500.0, "t").unwrap_err();
        assert!(err.to_string().contains("ragged trial"), "{err}");
    }

    #[test]
    fn missing_columns_reported() {
        let csv = "subj,item,trial,channel,time_ms,uv\ns1,i1,1,Cz,0,1\n";
        match read_epochs(csv.as_bytes(), 500.0, "t") {
            Err(Error::MissingColumns { columns, .. }) => assert_eq!(columns, "condition"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn grid_must_match_rate() {
        let csv = "subj,item,condition,trial,channel,time_ms,uv\n\
                   s1,i1,a,1,Cz,0,1\ns1,i1,a,1,Cz,3,2\n";
        assert!(matches!(
            read_epochs(csv.as_bytes(), 500.0, "t"),
            Err(Error::TimeGrid { .. })
        ));
    }

    #[test]
    fn nan_trials_dropped() {
        let csv = "subj,item,condition,trial,channel,time_ms,uv\n\
                   s1,i1,a,1,Cz,0,1\ns1,i1,a,1,Cz,2,NaN\n\
                   s1,i2,b,2,Cz,0,4\ns1,i2,b,2,Cz,2,5\n";
        let l = read_epochs(csv.as_bytes(), 500.0, "t").unwrap();
        assert_eq!(l.epochs.n_trials(), 1);
        assert_eq!(l.nan_dropped.len(), 1);
        assert_eq!(l.nan_dropped[0].item, "i1");
    }

    #[test]
    fn half_open_window_mean() {
        let e = small();
        let t = window_average(&e, &TimeWindow::new(0.0, 4.0).unwrap()).unwrap();
        assert_eq!(t.values, vec![1.5, 4.5]);
        let whole = window_average(&e, &TimeWindow::whole(e.sampling())).unwrap();
        assert_eq!(whole.values, vec![2.0, 5.0]);
    }

    #[test]
    fn empty_window_errors() {
        let e = small();
        let w = TimeWindow::new(0.5, 1.5).unwrap();
        assert!(matches!(window_average(&e, &w), Err(Error::EmptyWindow { .. })));
        let outside = TimeWindow::new(100.0, 200.0).unwrap();
        assert!(window_average(&e, &outside).is_err());
    }

    #[test]
    fn rejection_drops_whole_trial() {
        let mut e = small();
        e = e.map_traces(|t, _, tr| {
            if t == 1 {
                tr[2] = 80.0;
            }
        });
        let (kept, report) = reject_artifacts(&e, 75.0).unwrap();
        assert_eq!(kept.n_trials(), 1);
        assert_eq!(report.rejected[0].max_abs_uv, 80.0);
        assert_eq!(report.per_condition["b"], 1);

        let (same, rep) = reject_artifacts(&small(), 75.0).unwrap();
        assert_eq!(same, small());
        assert!(rep.rejected.is_empty());
        assert!(matches!(reject_artifacts(&small(), 0.5), Err(Error::AllRejected(2))));
        assert!(reject_artifacts(&small(), 0.0).is_err());
    }

    #[test]
    fn roi_mean_and_errors() {
        let t = TrialTable {
            location_kind: "channel".into(),
            rows: ["C3", "C4", "Pz"]
                .iter()
                .map(|c| TrialRow {
                    subject: "s".into(),
                    item: "i".into(),
                    condition: "a".into(),
                    trial_index: 1,
                    location: c.to_string(),
                })
                .collect(),
            values: vec![1.0, 3.0, 10.0],
            covariates: BTreeMap::new(),
        };
        let m: RoiMap = [("C3", "C"), ("C4", "C")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let r = roi_average(&t, &m).unwrap();
        assert_eq!(r.values, vec![2.0]);
        assert_eq!(r.factor("roi").unwrap(), vec!["C"]);

        let mut m2 = m.clone();
        m2.insert("O1".into(), "O".into());
        assert!(matches!(roi_average(&t, &m2), Err(Error::EmptyRoi(r)) if r == "O"));

        let ident: RoiMap = ["C3", "C4", "Pz"].iter().map(|c| (c.to_string(), c.to_string())).collect();
        let r = roi_average(&t, &ident).unwrap();
        assert_eq!(r.values, t.values);
    }

    #[test]
    fn grand_average_weights_subjects_equally() {
        let e = EpochSet::new(
            vec![0.0, 0.0, 0.0, 2.0],
            vec![
                meta("s1", "i1", "a", 1),
                meta("s1", "i2", "a", 2),
                meta("s1", "i3", "a", 3),
                meta("s2", "i1", "a", 1),
            ],
            vec!["Cz".into()],
            SamplingInfo::new(500.0, 0.0, 1).unwrap(),
        )
        .unwrap();
        let g = grand_average(&e).unwrap();
        assert_eq!(g.grand["a"], vec![1.0]);
    }

    #[test]
    fn presets() {
        let s = SamplingInfo::new(500.0, -200.0, 500).unwrap();
        assert_eq!(TimeWindow::preset("pre100", &s).unwrap(), TimeWindow::new(-100.0, 0.0).unwrap());
        assert_eq!(TimeWindow::preset("whole", &s).unwrap(), TimeWindow::new(-200.0, 800.0).unwrap());
        assert_eq!(s.sample_range(&TimeWindow::new(-100.0, 0.0).unwrap()).unwrap(), 50..100);
        assert!(TimeWindow::preset("pre42", &s).is_err());
    }
}
