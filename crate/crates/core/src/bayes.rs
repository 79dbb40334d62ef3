//! Posterior sampling for a Gaussian linear model with independent
//! coefficient priors, by component-wise adaptive random-walk Metropolis.
//!
//! The residual SD is sampled on the log scale. Diagnostics follow the
//! split-chain, rank-normalized R̂ and the multi-chain Geyer ESS.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, Normal, StudentsT};

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::par;
use crate::stats::{mean, normal_quantile, quantile_sorted};
use crate::synth::stream_rng;

/// R̂ above which a run is flagged as not converged.
pub const RHAT_LIMIT: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Prior {
    StudentT { df: f64, location: f64, scale: f64 },
    Normal { mean: f64, sd: f64 },
}

impl Prior {
    /// Student-t with the given variance: `scale = sqrt(var (df − 2) / df)`.
    pub fn student_t_with_variance(df: f64, location: f64, variance: f64) -> Result<Self> {
        if !(df > 2.0 && variance > 0.0) {
            return Err(Error::invalid(format!(
                "a Student-t variance needs df > 2 and variance > 0, got df={df}, variance={variance}"
            )));
        }
        Ok(Prior::StudentT {
            df,
            location,
            scale: (variance * (df - 2.0) / df).sqrt(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Prior::StudentT { df, scale, location } => df > 0.0 && scale > 0.0 && location.is_finite(),
            Prior::Normal { mean, sd } => sd > 0.0 && mean.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid prior {self:?}: scales and df must be > 0")))
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        match *self {
            Prior::StudentT { df, location, scale } => StudentsT::new(location, scale, df)
                .map(|d| d.ln_pdf(x))
                .unwrap_or(f64::NAN),
            Prior::Normal { mean, sd } => Normal::new(mean, sd).map(|d| d.ln_pdf(x)).unwrap_or(f64::NAN),
        }
    }

    pub fn location(&self) -> f64 {
        match *self {
            Prior::StudentT { location, .. } => location,
            Prior::Normal { mean, .. } => mean,
        }
    }

    pub fn scale(&self) -> f64 {
        match *self {
            Prior::StudentT { scale, .. } => scale,
            Prior::Normal { sd, .. } => sd,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Prior::StudentT { df, location, scale } => {
                let t: f64 = rand_distr::StudentT::new(df).map(|d| d.sample(rng)).unwrap_or(0.0);
                location + scale * t
            }
            Prior::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SigmaPrior {
    /// Student-t folded at zero.
    HalfStudentT { df: f64, scale: f64 },
    /// σ known; not sampled.
    Fixed { value: f64 },
}

impl SigmaPrior {
    fn ln_pdf(&self, sigma: f64) -> f64 {
        match *self {
            SigmaPrior::HalfStudentT { df, scale } => {
                if sigma <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                std::f64::consts::LN_2
                    + StudentsT::new(0.0, scale, df)
                        .map(|d| d.ln_pdf(sigma))
                        .unwrap_or(f64::NAN)
            }
            SigmaPrior::Fixed { .. } => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// One prior per design column, in column order.
    pub coefficients: Vec<Prior>,
    pub sigma: SigmaPrior,
}

impl PriorSpec {
    /// A t₃ prior centred on +1 with variance 0.001 on `baseline_column`,
    /// N(0, 2²) on the other slopes, t₃(0, 10) on the intercept and
    /// HalfStudentT(3, 10) on the residual SD.
    pub fn traditionalist(names: &[String], baseline_column: &str) -> Result<Self> {
        if !names.iter().any(|n| n == baseline_column) {
            return Err(Error::UnknownColumn(baseline_column.into()));
        }
        let strong = Prior::student_t_with_variance(3.0, 1.0, 0.001)?;
        Ok(Self {
            coefficients: names
                .iter()
                .map(|n| {
                    if n == baseline_column {
                        strong
                    } else if n == "(Intercept)" {
                        Prior::StudentT {
                            df: 3.0,
                            location: 0.0,
                            scale: 10.0,
                        }
                    } else {
                        Prior::Normal { mean: 0.0, sd: 2.0 }
                    }
                })
                .collect(),
            sigma: SigmaPrior::HalfStudentT { df: 3.0, scale: 10.0 },
        })
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.coefficients.len() != p {
            return Err(Error::invalid(format!(
                "{} coefficient priors for {p} design columns",
                self.coefficients.len()
            )));
        }
        self.coefficients.iter().try_for_each(Prior::validate)?;
        let ok = match self.sigma {
            SigmaPrior::HalfStudentT { df, scale } => df > 0.0 && scale > 0.0,
            SigmaPrior::Fixed { value } => value > 0.0,
        };
        if !ok {
            return Err(Error::invalid(format!("invalid residual-SD prior {:?}", self.sigma)));
        }
        Ok(())
    }

    fn sampled_sigma(&self) -> bool {
        !matches!(self.sigma, SigmaPrior::Fixed { .. })
    }
}

/// Sufficient statistics of `y = Xβ + ε` on the coefficients' reporting scale.
#[derive(Debug, Clone)]
pub struct LinearData {
    pub names: Vec<String>,
    pub n: usize,
    pub xtx: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub yty: f64,
}

impl LinearData {
    pub fn new(x: &DesignMatrix, y: &[f64]) -> Result<Self> {
        if x.n_obs() != y.len() {
            return Err(Error::invalid("design and response lengths differ"));
        }
        // undo covariate scaling so coefficients match the reported scale
        let mut xo = x.x.clone();
        for (j, s) in x.column_scale.iter().enumerate() {
            xo.column_mut(j).scale_mut(*s);
        }
        let yv = DVector::from_column_slice(y);
        Ok(Self {
            names: x.names.clone(),
            n: y.len(),
            xtx: xo.transpose() * &xo,
            xty: xo.transpose() * &yv,
            yty: yv.dot(&yv),
        })
    }

    /// No observations: the posterior is the prior.
    pub fn empty(names: Vec<String>) -> Self {
        let p = names.len();
        Self {
            names,
            n: 0,
            xtx: DMatrix::zeros(p, p),
            xty: DVector::zeros(p),
            yty: 0.0,
        }
    }

    pub fn p(&self) -> usize {
        self.names.len()
    }

    pub fn rss(&self, beta: &[f64]) -> f64 {
        let b = DVector::from_column_slice(beta);
        (self.yty - 2.0 * b.dot(&self.xty) + b.dot(&(&self.xtx * &b))).max(0.0)
    }

    /// Least-squares estimates and SEs, when `n > p` and `XᵀX` is invertible.
    fn least_squares(&self) -> Option<(Vec<f64>, Vec<f64>, f64)> {
        let p = self.p();
        if self.n <= p + 1 {
            return None;
        }
        let chol = self.xtx.clone().cholesky()?;
        let beta = chol.solve(&self.xty);
        let b: Vec<f64> = beta.iter().copied().collect();
        let s2 = self.rss(&b) / (self.n - p) as f64;
        let inv = chol.inverse();
        let se = (0..p).map(|j| (s2 * inv[(j, j)]).sqrt()).collect();
        Some((b, se, s2.sqrt()))
    }
}

fn sigma_of(params: &[f64], priors: &PriorSpec) -> f64 {
    match priors.sigma {
        SigmaPrior::Fixed { value } => value,
        _ => params[params.len() - 1].exp(),
    }
}

/// Log prior density of `params = [β…, log σ]` (`log σ` omitted when σ is
/// fixed), including the log-scale Jacobian.
pub fn log_prior(params: &[f64], priors: &PriorSpec) -> f64 {
    let p = priors.coefficients.len();
    let mut lp: f64 = priors.coefficients.iter().zip(params).map(|(pr, b)| pr.ln_pdf(*b)).sum();
    if priors.sampled_sigma() {
        let log_sigma = params[p];
        lp += priors.sigma.ln_pdf(log_sigma.exp()) + log_sigma;
    }
    lp
}

/// Gaussian log-likelihood plus [`log_prior`]. Non-finite values are
/// returned as −∞.
pub fn log_posterior(params: &[f64], data: &LinearData, priors: &PriorSpec) -> f64 {
    let p = data.p();
    let sigma = sigma_of(params, priors);
    let ll = if data.n == 0 {
        0.0
    } else {
        let n = data.n as f64;
        -0.5 * n * (2.0 * std::f64::consts::PI * sigma * sigma).ln() - data.rss(&params[..p]) / (2.0 * sigma * sigma)
    };
    let v = ll + log_prior(params, priors);
    if v.is_finite() {
        v
    } else {
        f64::NEG_INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_iter: usize,
    pub seed: u64,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_warmup: 2000,
            n_iter: 5000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q2_5: f64,
    pub median: f64,
    pub q97_5: f64,
    pub mode: f64,
    pub rhat: f64,
    pub ess: f64,
    pub mcse_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    /// Coefficient names followed by `sigma` when it is sampled.
    pub names: Vec<String>,
    pub n_chains: usize,
    pub n_iter: usize,
    /// `chains × iterations × params`, σ on its natural scale.
    pub draws: Vec<f64>,
    pub rhat: Vec<f64>,
    pub ess: Vec<f64>,
    /// Post-warm-up acceptance rate per chain and parameter.
    pub acceptance: Vec<Vec<f64>>,
    /// Proposal SDs after warm-up, per chain and parameter.
    pub proposal_sd: Vec<Vec<f64>>,
    /// False when any R̂ exceeds [`RHAT_LIMIT`].
    pub converged: bool,
    pub seed: u64,
}

impl PosteriorSamples {
    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Draws of parameter `j`, one vector per chain.
    pub fn chains(&self, j: usize) -> Vec<Vec<f64>> {
        let np = self.n_params();
        (0..self.n_chains)
            .map(|c| (0..self.n_iter).map(|i| self.draws[(c * self.n_iter + i) * np + j]).collect())
            .collect()
    }

    /// All chains of parameter `j` concatenated.
    pub fn pooled(&self, j: usize) -> Vec<f64> {
        self.chains(j).concat()
    }

    pub fn summary(&self) -> Vec<ParamSummary> {
        (0..self.n_params())
            .map(|j| {
                let mut v = self.pooled(j);
                let m = mean(&v);
                let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt();
                let mode = kde_mode(&v);
                v.sort_by(f64::total_cmp);
                ParamSummary {
                    name: self.names[j].clone(),
                    mean: m,
                    sd,
                    q2_5: quantile_sorted(&v, 0.025),
                    median: quantile_sorted(&v, 0.5),
                    q97_5: quantile_sorted(&v, 0.975),
                    mode,
                    rhat: self.rhat[j],
                    ess: self.ess[j],
                    mcse_mean: sd / self.ess[j].sqrt(),
                }
            })
            .collect()
    }

    /// Long CSV `chain,iter,param,value`.
    pub fn write_draws_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["chain", "iter", "param", "value"])?;
        let np = self.n_params();
        for c in 0..self.n_chains {
            for i in 0..self.n_iter {
                for (j, name) in self.names.iter().enumerate() {
                    w.write_record([
                        (c + 1).to_string(),
                        (i + 1).to_string(),
                        name.clone(),
                        self.draws[(c * self.n_iter + i) * np + j].to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Tracks one chain's state and the cached `XᵀX β`.
struct Chain<'a> {
    data: &'a LinearData,
    priors: &'a PriorSpec,
    beta: Vec<f64>,
    log_sigma: f64,
    xtx_beta: Vec<f64>,
    rss: f64,
}

impl<'a> Chain<'a> {
    fn new(data: &'a LinearData, priors: &'a PriorSpec, beta: Vec<f64>, log_sigma: f64) -> Self {
        let xtx_beta = (&data.xtx * DVector::from_column_slice(&beta)).iter().copied().collect();
        let rss = data.rss(&beta);
        Self {
            data,
            priors,
            beta,
            log_sigma,
            xtx_beta,
            rss,
        }
    }

    fn sigma(&self) -> f64 {
        match self.priors.sigma {
            SigmaPrior::Fixed { value } => value,
            _ => self.log_sigma.exp(),
        }
    }

    /// Metropolis update of coefficient `j`; returns whether it moved.
    fn step_beta(&mut self, j: usize, scale: f64, rng: &mut ChaCha8Rng) -> bool {
        let delta = scale * rng.sample::<f64, _>(StandardNormal);
        let old = self.beta[j];
        let new = old + delta;
        let d_rss = -2.0 * delta * (self.data.xty[j] - self.xtx_beta[j]) + delta * delta * self.data.xtx[(j, j)];
        let s2 = self.sigma().powi(2);
        let prior = &self.priors.coefficients[j];
        let log_ratio = -d_rss / (2.0 * s2) + prior.ln_pdf(new) - prior.ln_pdf(old);
        if accept(log_ratio, rng) {
            self.beta[j] = new;
            for (k, v) in self.xtx_beta.iter_mut().enumerate() {
                *v += self.data.xtx[(k, j)] * delta;
            }
            self.rss = (self.rss + d_rss).max(0.0);
            true
        } else {
            false
        }
    }

    fn log_sigma_density(&self, log_sigma: f64) -> f64 {
        let n = self.data.n as f64;
        let s2 = (2.0 * log_sigma).exp();
        let ll = if self.data.n == 0 {
            0.0
        } else {
            -n * log_sigma - self.rss / (2.0 * s2)
        };
        ll + self.priors.sigma.ln_pdf(log_sigma.exp()) + log_sigma
    }

    fn step_sigma(&mut self, scale: f64, rng: &mut ChaCha8Rng) -> bool {
        let new = self.log_sigma + scale * rng.sample::<f64, _>(StandardNormal);
        let log_ratio = self.log_sigma_density(new) - self.log_sigma_density(self.log_sigma);
        if accept(log_ratio, rng) {
            self.log_sigma = new;
            true
        } else {
            false
        }
    }

    fn state(&self) -> Vec<f64> {
        let mut v = self.beta.clone();
        if self.priors.sampled_sigma() {
            v.push(self.log_sigma);
        }
        v
    }
}

fn accept(log_ratio: f64, rng: &mut ChaCha8Rng) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

const ADAPT_BATCH: usize = 50;
const TARGET_ACCEPT: f64 = 0.35;

fn run_chain(data: &LinearData, priors: &PriorSpec, opts: &SamplerOptions, chain: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = stream_rng(opts.seed, chain as u64);
    let p = data.p();
    let sampled_sigma = priors.sampled_sigma();
    let np = p + usize::from(sampled_sigma);

    // overdispersed start: least-squares estimate with ±2 SE jitter, or a
    // prior draw when the data cannot identify β
    let (beta0, mut scales, log_sigma0) = match data.least_squares() {
        Some((b, se, s)) => {
            let beta = b
                .iter()
                .zip(&se)
                .map(|(b, s)| b + 2.0 * s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let se_log_sigma = (0.5 / data.n as f64).sqrt();
            let ls = s.ln() + 2.0 * se_log_sigma * rng.sample::<f64, _>(StandardNormal);
            let mut sc: Vec<f64> = se.iter().map(|s| 2.4 * s).collect();
            sc.push(2.4 * se_log_sigma);
            (beta, sc, ls)
        }
        None => {
            let beta = priors.coefficients.iter().map(|pr| pr.sample(&mut rng)).collect();
            let mut sc: Vec<f64> = priors.coefficients.iter().map(|pr| 2.4 * pr.scale()).collect();
            let ls = match priors.sigma {
                SigmaPrior::HalfStudentT { scale, .. } => (scale * rng.random::<f64>().max(1e-3)).ln(),
                SigmaPrior::Fixed { value } => value.ln(),
            };
            sc.push(1.0);
            (beta, sc, ls)
        }
    };
    scales.truncate(np);
    let mut ch = Chain::new(data, priors, beta0, log_sigma0);

    let mut batch_acc = vec![0usize; np];
    for it in 0..opts.n_warmup {
        for j in 0..np {
            let moved = if j < p { ch.step_beta(j, scales[j], &mut rng) } else { ch.step_sigma(scales[j], &mut rng) };
            batch_acc[j] += usize::from(moved);
        }
        if (it + 1) % ADAPT_BATCH == 0 {
            let k = ((it + 1) / ADAPT_BATCH) as f64;
            let step = (1.0 / k.sqrt()).clamp(0.05, 0.5);
            for j in 0..np {
                let rate = batch_acc[j] as f64 / ADAPT_BATCH as f64;
                scales[j] *= if rate > TARGET_ACCEPT { step.exp() } else { (-step).exp() };
                batch_acc[j] = 0;
            }
        }
    }

    let mut acc = vec![0usize; np];
    let mut draws = Vec::with_capacity(opts.n_iter * np);
    for _ in 0..opts.n_iter {
        for j in 0..np {
            let moved = if j < p { ch.step_beta(j, scales[j], &mut rng) } else { ch.step_sigma(scales[j], &mut rng) };
            acc[j] += usize::from(moved);
        }
        let mut s = ch.state();
        if sampled_sigma {
            let last = s.len() - 1;
            s[last] = s[last].exp();
        }
        draws.extend(s);
    }
    let rates = acc.iter().map(|a| *a as f64 / opts.n_iter.max(1) as f64).collect();
    (draws, rates, scales)
}

/// Runs `n_chains` independent chains; chain `c` is seeded from
/// `(seed, c)`.
pub fn sample_posterior(data: &LinearData, priors: &PriorSpec, opts: &SamplerOptions) -> Result<PosteriorSamples> {
    priors.validate(data.p())?;
    if opts.n_chains < 2 {
        return Err(Error::invalid("R-hat needs at least 2 chains"));
    }
    if opts.n_iter < 4 {
        return Err(Error::invalid("need at least 4 post-warm-up iterations"));
    }
    let runs = par::map_indexed(opts.n_chains, |c| run_chain(data, priors, opts, c));
    let mut names = data.names.clone();
    if priors.sampled_sigma() {
        names.push("sigma".into());
    }
    let np = names.len();
    let mut draws = Vec::with_capacity(opts.n_chains * opts.n_iter * np);
    let mut acceptance = Vec::new();
    let mut proposal_sd = Vec::new();
    for (d, a, s) in runs {
        draws.extend(d);
        acceptance.push(a);
        proposal_sd.push(s);
    }
    let mut out = PosteriorSamples {
        names,
        n_chains: opts.n_chains,
        n_iter: opts.n_iter,
        draws,
        rhat: Vec::new(),
        ess: Vec::new(),
        acceptance,
        proposal_sd,
        converged: true,
        seed: opts.seed,
    };
    for j in 0..np {
        let chains = out.chains(j);
        out.rhat.push(rank_normalized_rhat(&chains));
        out.ess.push(ess_bulk(&chains));
    }
    out.converged = out.rhat.iter().all(|r| *r <= RHAT_LIMIT);
    if !out.converged {
        log::warn!("posterior sampling did not converge: R-hat {:?}", out.rhat);
    }
    Ok(out)
}

fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    chains
        .iter()
        .flat_map(|c| {
            let h = c.len() / 2;
            // an odd middle draw is dropped
            [c[..h].to_vec(), c[c.len() - h..].to_vec()]
        })
        .collect()
}

/// Normal scores of the pooled ranks (average ranks for ties), in the
/// chains' layout.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let pooled: Vec<f64> = chains.concat();
    let s = pooled.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut k = i;
        while k + 1 < s && pooled[order[k + 1]] == pooled[order[i]] {
            k += 1;
        }
        let r = (i + k) as f64 / 2.0 + 1.0;
        for &o in &order[i..=k] {
            ranks[o] = r;
        }
        i = k + 1;
    }
    let z: Vec<f64> = ranks
        .iter()
        .map(|r| normal_quantile((r - 0.375) / (s as f64 + 0.25)))
        .collect();
    let mut out = Vec::with_capacity(chains.len());
    let mut pos = 0;
    for c in chains {
        out.push(z[pos..pos + c.len()].to_vec());
        pos += c.len();
    }
    out
}

/// Classic potential scale reduction over equal-length chains.
pub fn basic_rhat(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let grand = mean(&means);
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        return if b <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Split-chain rank-normalized R̂: the larger of the bulk and folded
/// (tail) versions.
pub fn rank_normalized_rhat(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    let bulk = basic_rhat(&rank_normalize(&split));
    let pooled: Vec<f64> = split.concat();
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let med = quantile_sorted(&sorted, 0.5);
    let folded: Vec<Vec<f64>> = split.iter().map(|c| c.iter().map(|x| (x - med).abs()).collect()).collect();
    let tail = basic_rhat(&rank_normalize(&folded));
    bulk.max(tail)
}

fn autocov(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    let m = mean(x);
    (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64
}

/// Multi-chain effective sample size with Geyer's initial monotone
/// sequence estimator.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    if n < 4 {
        return f64::NAN;
    }
    let mf = m as f64;
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let acov0: Vec<f64> = chains.iter().map(|c| autocov(c, 0)).collect();
    let mean_var = mean(&acov0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        let g = mean(&means);
        var_plus += means.iter().map(|x| (x - g).powi(2)).sum::<f64>() / (mf - 1.0);
    }
    if var_plus <= 0.0 {
        return f64::NAN;
    }
    let rho = |t: usize| -> f64 {
        let a = chains.iter().map(|c| autocov(c, t)).sum::<f64>() / mf;
        1.0 - (mean_var - a) / var_plus
    };
    // Σ of pairs P_k = ρ_2k + ρ_2k+1 while positive, forced non-increasing
    let mut sum_pairs = 0.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let even = if t == 0 { 1.0 } else { rho(t) };
        let pair = (even + rho(t + 1)).min(prev);
        if pair <= 0.0 {
            break;
        }
        sum_pairs += pair;
        prev = pair;
        t += 2;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / (mf * nf).log10());
    mf * nf / tau
}

/// Bulk ESS: [`ess`] of the rank-normalized split chains.
pub fn ess_bulk(chains: &[Vec<f64>]) -> f64 {
    ess(&rank_normalize(&split_chains(chains)))
}

/// Mode of a Gaussian kernel density estimate (Silverman bandwidth) on a
/// 512-point grid.
pub fn kde_mode(x: &[f64]) -> f64 {
    let grid = kde(x, 512);
    grid.iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|g| g.0)
        .unwrap_or(f64::NAN)
}

/// Gaussian KDE of `x` evaluated at `points` grid points spanning the data
/// range padded by three bandwidths.
pub fn kde(x: &[f64], points: usize) -> Vec<(f64, f64)> {
    let n = x.len();
    if n < 2 {
        return Vec::new();
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = mean(x);
    let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (n as f64).powf(-0.2);
    if !(h > 0.0) {
        return vec![(sorted[0], 1.0)];
    }
    let (lo, hi) = (sorted[0] - 3.0 * h, sorted[n - 1] + 3.0 * h);
    let norm = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    par::map_slice(&grid, |&g| {
        // only points within 8 bandwidths contribute measurably
        let a = sorted.partition_point(|v| *v < g - 8.0 * h);
        let b = sorted.partition_point(|v| *v <= g + 8.0 * h);
        let d: f64 = sorted[a..b].iter().map(|v| (-0.5 * ((g - v) / h).powi(2)).exp()).sum();
        (g, d * norm)
    })
}

/// Prior and posterior densities of each coefficient on a shared grid,
/// each scaled to a maximum of 1.
pub fn write_density_csv<W: std::io::Write>(s: &PosteriorSamples, priors: &PriorSpec, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["param", "distribution", "x", "density"])?;
    for (j, prior) in priors.coefficients.iter().enumerate() {
        let post = kde(&s.pooled(j), 256);
        let (plo, phi) = (post[0].0, post[post.len() - 1].0);
        let lo = plo.min(prior.location() - 4.0 * prior.scale());
        let hi = phi.max(prior.location() + 4.0 * prior.scale());
        let prior_curve: Vec<(f64, f64)> = (0..256)
            .map(|i| {
                let x = lo + (hi - lo) * i as f64 / 255.0;
                (x, prior.ln_pdf(x).exp())
            })
            .collect();
        for (label, curve) in [("prior", prior_curve), ("posterior", post)] {
            let max = curve.iter().map(|c| c.1).fold(0.0, f64::max);
            for (x, d) in curve {
                w.write_record([
                    s.names[j].clone(),
                    label.to_string(),
                    x.to_string(),
                    (if max > 0.0 { d / max } else { 0.0 }).to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_to_scale() {
        let p = Prior::student_t_with_variance(3.0, 1.0, 0.001).unwrap();
        match p {
            Prior::StudentT { scale, .. } => assert!((scale - (1.0f64 / 3000.0).sqrt()).abs() < 1e-15),
            _ => unreachable!(),
        }
        assert!((p.scale() - 0.018257).abs() < 1e-6);
        assert!(Prior::student_t_with_variance(2.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn no_data_posterior_is_prior() {
        let names = vec!["(Intercept)".to_string(), "baseline".to_string()];
        let priors = PriorSpec::traditionalist(&names, "baseline").unwrap();
        let data = LinearData::empty(names);
        for params in [[0.3, 0.9, 0.1], [-2.0, 1.05, 1.7]] {
            assert_eq!(log_posterior(&params, &data, &priors), log_prior(&params, &priors));
        }
    }

    #[test]
    fn conjugate_normal_is_quadratic() {
        // y_i = β + ε, σ = 1.5 known, β ~ N(0.4, 0.8²)
        let y = [1.2, 0.3, 2.2, 1.9, 0.7];
        let x = DesignMatrix::from_columns(vec!["(Intercept)".into()], DMatrix::from_element(5, 1, 1.0)).unwrap();
        let data = LinearData::new(&x, &y).unwrap();
        let priors = PriorSpec {
            coefficients: vec![Prior::Normal { mean: 0.4, sd: 0.8 }],
            sigma: SigmaPrior::Fixed { value: 1.5 },
        };
        let prec = 1.0 / 0.64 + 5.0 / 2.25;
        let post_mean = (0.4 / 0.64 + y.iter().sum::<f64>() / 2.25) / prec;
        let lp = |b: f64| log_posterior(&[b], &data, &priors);
        for b in [-1.0, 0.2, 1.1, 3.0] {
            let want = -0.5 * prec * ((b - post_mean).powi(2) - (0.0 - post_mean).powi(2));
            assert!((lp(b) - lp(0.0) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn rhat_and_ess_on_iid_chains() {
        let mut rng = stream_rng(3, 0);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..2000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let r = rank_normalized_rhat(&chains);
        assert!(r < 1.01, "{r}");
        let e = ess_bulk(&chains);
        assert!(e > 5000.0 && e < 11000.0, "{e}");
        // shifted chains are flagged
        let mut bad = chains.clone();
        bad[0].iter_mut().for_each(|v| *v += 3.0);
        assert!(rank_normalized_rhat(&bad) > 1.1);
    }

    #[test]
    fn ess_of_ar1() {
        // AR(1) with φ = 0.8 has τ = (1 + φ) / (1 − φ) = 9
        let mut rng = stream_rng(5, 0);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..20000)
                    .map(|_| {
                        x = 0.8 * x + 0.6 * rng.sample::<f64, _>(StandardNormal);
                        x
                    })
                    .collect()
            })
            .collect();
        let e = ess(&chains);
        let want = 80000.0 / 9.0;
        assert!((e / want - 1.0).abs() < 0.15, "{e} vs {want}");
    }

    #[test]
    fn kde_mode_of_normal_sample() {
        let mut rng = stream_rng(9, 0);
        let x: Vec<f64> = (0..5000).map(|_| 2.0 + rng.sample::<f64, _>(StandardNormal)).collect();
        assert!((kde_mode(&x) - 2.0).abs() < 0.15);
    }

    #[test]
    fn sampler_needs_two_chains() {
        let data = LinearData::empty(vec!["b".into()]);
        let priors = PriorSpec {
            coefficients: vec![Prior::Normal { mean: 0.0, sd: 1.0 }],
            sigma: SigmaPrior::Fixed { value: 1.0 },
        };
        let opts = SamplerOptions {
            n_chains: 1,
            ..Default::default()
        };
        assert!(sample_posterior(&data, &priors, &opts).is_err());
    }
}
