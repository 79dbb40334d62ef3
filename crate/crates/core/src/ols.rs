//! Ordinary least squares, the per-timepoint regression engine and
//! information criteria.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baseline::baseline_feature;
use crate::design::{build_design, CellValue, DesignMatrix, ModelSpec};
use crate::epochs::{EpochSet, TimeWindow, TrialRow, TrialTable};
use crate::error::{Error, Result};
use crate::linalg::PivotedQr;
use crate::par;

/// Residual-variance floor used in the likelihood of a perfect fit.
pub const VARIANCE_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedGlm {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    /// Residual variance with denominator n - p (NaN when n == p).
    pub sigma2: f64,
    pub rss: f64,
    pub log_lik: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_obs: usize,
    pub residuals: Vec<f64>,
    pub fitted: Vec<f64>,
}

impl FittedGlm {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.coefficients[i])
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.std_errors[i])
    }

    pub fn n_coefficients(&self) -> usize {
        self.coefficients.len()
    }
}

/// Gaussian log-likelihood at the ML variance `rss / n`.
pub fn gaussian_log_lik(rss: f64, n: usize) -> f64 {
    let n = n as f64;
    let mut var = rss / n;
    if !(var >= VARIANCE_FLOOR) {
        log::warn!("residual variance {var:e} is at or below the floor; likelihood uses {VARIANCE_FLOOR:e}");
        var = VARIANCE_FLOOR;
    }
    -0.5 * n * ((2.0 * std::f64::consts::PI * var).ln() + 1.0)
}

/// A factored design ready to be solved against many responses.
#[derive(Debug, Clone)]
pub struct OlsSolver {
    design: DesignMatrix,
    qr: PivotedQr,
    cov_unscaled_diag: Vec<f64>,
}

impl OlsSolver {
    pub fn new(design: &DesignMatrix) -> Result<Self> {
        let (n, p) = design.x.shape();
        if n < p {
            return Err(Error::TooFewObservations { n, p });
        }
        let qr = PivotedQr::new(&design.x);
        if !qr.is_full_rank() {
            return Err(Error::RankDeficient {
                rank: qr.rank(),
                cols: p,
                context: String::new(),
            });
        }
        let cov = qr.unscaled_covariance();
        Ok(Self {
            design: design.clone(),
            qr,
            cov_unscaled_diag: (0..p).map(|j| cov[(j, j)]).collect(),
        })
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.design
    }

    pub fn fit(&self, y: &[f64]) -> Result<FittedGlm> {
        let x = &self.design.x;
        let (n, p) = x.shape();
        if y.len() != n {
            return Err(Error::invalid(format!("response has {} values, design has {n} rows", y.len())));
        }
        let beta = self.qr.solve(y);
        let mut fitted = vec![0.0; n];
        for (j, b) in beta.iter().enumerate() {
            for (f, xv) in fitted.iter_mut().zip(x.column(j).iter()) {
                *f += xv * b;
            }
        }
        let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        let rss: f64 = residuals.iter().map(|r| r * r).sum();
        // undefined for a saturated fit (n == p)
        let sigma2 = if n > p { rss / (n - p) as f64 } else { f64::NAN };
        let scale = &self.design.column_scale;
        let coefficients: Vec<f64> = beta.iter().zip(scale).map(|(b, s)| b / s).collect();
        let std_errors: Vec<f64> = self
            .cov_unscaled_diag
            .iter()
            .zip(scale)
            .map(|(c, s)| (sigma2 * c).sqrt() / s)
            .collect();
        let t_values = coefficients.iter().zip(&std_errors).map(|(b, se)| b / se).collect();
        let log_lik = gaussian_log_lik(rss, n);
        let k = (p + 1) as f64;
        Ok(FittedGlm {
            names: self.design.names.clone(),
            coefficients,
            std_errors,
            t_values,
            sigma2,
            rss,
            log_lik,
            aic: -2.0 * log_lik + 2.0 * k,
            bic: -2.0 * log_lik + (n as f64).ln() * k,
            n_obs: n,
            residuals,
            fitted,
        })
    }
}

/// Least-squares fit via column-pivoted QR.
pub fn fit_ols(x: &DesignMatrix, y: &[f64]) -> Result<FittedGlm> {
    OlsSolver::new(x)?.fit(y)
}

/// Builds the design for `spec` over `t` and fits it.
pub fn fit_table(t: &TrialTable, spec: &ModelSpec) -> Result<FittedGlm> {
    let design = build_design(t, spec)?;
    let y = crate::design::response(t, spec)?;
    fit_ols(&design, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InformationCriteria {
    pub log_lik: f64,
    pub deviance: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_params: usize,
    pub n_obs: usize,
}

/// Anything with a maximized likelihood.
pub trait LikelihoodModel {
    fn log_lik(&self) -> f64;
    /// Fixed effects + covariance parameters + residual variance.
    fn n_params(&self) -> usize;
    fn n_obs(&self) -> usize;
    /// Fixed-effect column names and random-effect terms, for nesting checks.
    fn term_set(&self) -> Vec<String>;
}

impl LikelihoodModel for FittedGlm {
    fn log_lik(&self) -> f64 {
        self.log_lik
    }
    fn n_params(&self) -> usize {
        self.coefficients.len() + 1
    }
    fn n_obs(&self) -> usize {
        self.n_obs
    }
    fn term_set(&self) -> Vec<String> {
        self.names.clone()
    }
}

pub fn information_criteria<M: LikelihoodModel + ?Sized>(m: &M) -> InformationCriteria {
    let ll = m.log_lik();
    let k = m.n_params() as f64;
    InformationCriteria {
        log_lik: ll,
        deviance: -2.0 * ll,
        aic: -2.0 * ll + 2.0 * k,
        bic: -2.0 * ll + (m.n_obs() as f64).ln() * k,
        n_params: m.n_params(),
        n_obs: m.n_obs(),
    }
}

/// How the baseline enters a pointwise model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BaselineWeight {
    /// The baseline slope is estimated (regression correction).
    Estimated,
    /// `weight * baseline` is subtracted from the response and all baseline
    /// terms are dropped; 1 is traditional correction, 0 none.
    Pinned(f64),
}

/// Coefficients of one model fitted at every (channel, sample).
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseResult {
    pub spec: ModelSpec,
    pub channels: Vec<String>,
    pub times_ms: Vec<f64>,
    pub terms: Vec<String>,
    /// `channels × samples × terms`.
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub conditions: Vec<String>,
    /// Model-predicted waveform per condition at centered baseline 0,
    /// `conditions × channels × samples`.
    pub corrected: Vec<f64>,
}

impl PointwiseResult {
    fn idx(&self, c: usize, s: usize, j: usize) -> usize {
        (c * self.times_ms.len() + s) * self.terms.len() + j
    }

    pub fn coefficient(&self, channel: usize, sample: usize, term: usize) -> f64 {
        self.coefficients[self.idx(channel, sample, term)]
    }

    pub fn std_error(&self, channel: usize, sample: usize, term: usize) -> f64 {
        self.std_errors[self.idx(channel, sample, term)]
    }

    pub fn term_index(&self, name: &str) -> Option<usize> {
        self.terms.iter().position(|t| t == name)
    }

    /// Corrected waveform of `condition` on `channel`.
    pub fn corrected_wave(&self, condition: usize, channel: usize) -> &[f64] {
        let ns = self.times_ms.len();
        let start = (condition * self.channels.len() + channel) * ns;
        &self.corrected[start..start + ns]
    }

    /// Long CSV `channel,time_ms,term,estimate,se`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["channel", "time_ms", "term", "estimate", "se"])?;
        for (c, ch) in self.channels.iter().enumerate() {
            for (s, t) in self.times_ms.iter().enumerate() {
                for (j, term) in self.terms.iter().enumerate() {
                    w.write_record([
                        ch.as_str(),
                        &t.to_string(),
                        term.as_str(),
                        &self.coefficient(c, s, j).to_string(),
                        &self.std_error(c, s, j).to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Trial rows of one channel with `baseline` attached (response left zero).
fn channel_table(e: &EpochSet, channel: usize, baseline: &[f64]) -> Result<TrialTable> {
    let nc = e.n_channels();
    let rows: Vec<TrialRow> = e
        .trials()
        .iter()
        .map(|m| TrialRow {
            subject: m.subject.clone(),
            item: m.item.clone(),
            condition: m.condition.clone(),
            trial_index: m.trial_index,
            location: e.channels()[channel].clone(),
        })
        .collect();
    let b: Vec<f64> = (0..e.n_trials()).map(|t| baseline[t * nc + channel]).collect();
    TrialTable {
        location_kind: "channel".into(),
        values: vec![0.0; rows.len()],
        rows,
        covariates: BTreeMap::new(),
    }
    .with_covariate("baseline", b)
}

/// Fits `spec` separately at every channel and sample, with the trial's
/// baseline mean over `baseline_window` as the `baseline` covariate.
pub fn pointwise_fit(
    e: &EpochSet,
    spec: &ModelSpec,
    baseline_window: &TimeWindow,
    weight: BaselineWeight,
) -> Result<PointwiseResult> {
    if let Some(bad) = spec.terms.iter().flatten().find(|n| *n != "baseline" && *n != "condition") {
        return Err(Error::invalid(format!(
            "pointwise models may only use 'baseline' and 'condition', found '{bad}'"
        )));
    }
    let spec = match weight {
        BaselineWeight::Estimated => spec.clone(),
        BaselineWeight::Pinned(_) => spec.without("baseline"),
    };
    let feat = baseline_feature(e, baseline_window)?;
    let (nc, ns, nt) = (e.n_channels(), e.n_samples(), e.n_trials());
    let conditions = e.conditions();

    let solvers: Vec<OlsSolver> = (0..nc)
        .map(|c| {
            let table = channel_table(e, c, feat.values())?;
            let wrap = |err: Error| {
                Error::invalid(format!(
                    "pointwise fit failed at channel {} sample 0 ({} ms): {err}",
                    e.channels()[c],
                    e.sampling().time_ms(0)
                ))
            };
            let design = build_design(&table, &spec).map_err(wrap)?;
            OlsSolver::new(&design).map_err(wrap)
        })
        .collect::<Result<_>>()?;

    let p = solvers[0].design().n_cols();
    let terms = solvers[0].design().names.clone();
    let pinned = match weight {
        BaselineWeight::Pinned(w) => w,
        BaselineWeight::Estimated => 0.0,
    };
    let cells = par::map_indexed(nc * ns, |cell| {
        let (c, s) = (cell / ns, cell % ns);
        let y: Vec<f64> = (0..nt)
            .map(|t| e.value(t, c, s) - pinned * feat.get(nc, t, c))
            .collect();
        solvers[c].fit(&y)
    });

    let mut coefficients = Vec::with_capacity(nc * ns * p);
    let mut std_errors = Vec::with_capacity(nc * ns * p);
    let mut betas = Vec::with_capacity(nc * ns);
    for fit in cells {
        let fit = fit?;
        coefficients.extend_from_slice(&fit.coefficients);
        std_errors.extend_from_slice(&fit.std_errors);
        betas.push(fit.coefficients);
    }

    let mut corrected = vec![0.0; conditions.len() * nc * ns];
    for (ci, cond) in conditions.iter().enumerate() {
        for c in 0..nc {
            let design = solvers[c].design();
            let center = match design.encodings.get("baseline") {
                Some(crate::design::Encoding::Numeric { center, .. }) => *center,
                _ => 0.0,
            };
            let row = design.encode_row(|name| match name {
                "condition" => Some(CellValue::Level(cond.as_str())),
                "baseline" => Some(CellValue::Number(center)),
                _ => None,
            })?;
            for s in 0..ns {
                // coefficients are on the original scale, so undo scaling on the row
                let beta = &betas[c * ns + s];
                corrected[(ci * nc + c) * ns + s] = row
                    .iter()
                    .zip(beta)
                    .zip(&design.column_scale)
                    .map(|((x, b), sc)| x * b * sc)
                    .sum();
            }
        }
    }

    Ok(PointwiseResult {
        spec,
        channels: e.channels().to_vec(),
        times_ms: e.sampling().times(),
        terms,
        coefficients,
        std_errors,
        conditions,
        corrected,
    })
}

/// Trials with the estimated baseline contribution removed: at every
/// (channel, sample) each trial is moved to its channel's mean baseline under
/// the fitted `spec`, keeping its own condition and residual.
pub fn regression_adjust(e: &EpochSet, spec: &ModelSpec, baseline_window: &TimeWindow) -> Result<EpochSet> {
    let pw = pointwise_fit(e, spec, baseline_window, BaselineWeight::Estimated)?;
    let feat = baseline_feature(e, baseline_window)?;
    let (nc, nt) = (e.n_channels(), e.n_trials());
    let p = pw.terms.len();
    // deltas[c][t * p + j]: scaled design change from moving trial t to the centre
    let mut deltas = Vec::with_capacity(nc);
    for c in 0..nc {
        let table = channel_table(e, c, feat.values())?;
        let design = build_design(&table, &pw.spec)?;
        let center = match design.encodings.get("baseline") {
            Some(crate::design::Encoding::Numeric { center, .. }) => *center,
            _ => 0.0,
        };
        let mut d = Vec::with_capacity(nt * p);
        for (t, m) in e.trials().iter().enumerate() {
            let b = feat.get(nc, t, c);
            let at = |v: f64| {
                design.encode_row(|name| match name {
                    "condition" => Some(CellValue::Level(m.condition.as_str())),
                    "baseline" => Some(CellValue::Number(v)),
                    _ => None,
                })
            };
            let own = at(b)?;
            let centred = at(center)?;
            d.extend(
                own.iter()
                    .zip(&centred)
                    .zip(&design.column_scale)
                    .map(|((x, x0), sc)| (x - x0) * sc),
            );
        }
        deltas.push(d);
    }
    Ok(e.map_traces(|t, c, tr| {
        let d = &deltas[c][t * p..(t + 1) * p];
        for (s, v) in tr.iter_mut().enumerate() {
            *v -= d.iter().enumerate().map(|(j, x)| x * pw.coefficient(c, s, j)).sum::<f64>();
        }
    }))
}
