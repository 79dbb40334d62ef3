//! Linear mixed models with crossed random effects, fitted by maximum
//! likelihood on the profiled deviance.
//!
//! The random-effects covariance of each grouping factor is `σ² T Tᵀ`, where
//! `T` is a lower-triangular relative Cholesky factor whose entries form θ
//! (column-major, diagonal entries bounded below by zero). For a given θ the
//! fixed effects and the residual variance are profiled out by solving the
//! penalized least-squares system
//!
//! ```text
//! [ΛᵀZᵀZΛ + I   ΛᵀZᵀX] [u]   [ΛᵀZᵀy]
//! [XᵀZΛ         XᵀX  ] [β] = [Xᵀy  ]
//! ```
//!
//! with a dense block Cholesky factorization, giving
//! `d(θ) = log|L|² + n (1 + log(2π r²/n))` where `r²` is the penalized
//! residual sum of squares.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use crate::design::{RandomSpec, RandomTerm};
use crate::design::{build_design, response, DesignMatrix, Factor, ModelSpec};
use crate::epochs::TrialTable;
use crate::error::{Error, Result};
use crate::ols::{fit_ols, FittedGlm, LikelihoodModel};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::stats::{chi2_sf, normal_quantile, quantile};

/// Relative SD below which a component is flagged as a boundary fit.
pub const BOUNDARY_TOL: f64 = 1e-4;

/// Random-effect columns of one grouping factor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBlock {
    pub term: RandomTerm,
    pub levels: Vec<String>,
    /// Level index of every observation.
    pub obs_level: Vec<usize>,
    /// Sum-coded slope value of every observation (±1).
    pub slope_values: Option<Vec<f64>>,
    /// Contrast column name of the slope, e.g. `condition[S.match]`.
    pub slope_name: Option<String>,
}

impl GroupBlock {
    /// Random-effect terms per level (1 or 2).
    pub fn k(&self) -> usize {
        if self.slope_values.is_some() {
            2
        } else {
            1
        }
    }

    pub fn n_theta(&self) -> usize {
        let k = self.k();
        k * (k + 1) / 2
    }

    pub fn term_names(&self) -> Vec<String> {
        let mut v = vec!["(Intercept)".to_string()];
        if let Some(s) = &self.slope_name {
            v.push(s.clone());
        }
        v
    }

    /// Builds the block for `term` over the table.
    pub fn from_table(t: &TrialTable, term: &RandomTerm, fixed: &ModelSpec) -> Result<Self> {
        let groups = t
            .factor(&term.group)
            .ok_or_else(|| Error::UnknownColumn(term.group.clone()))?;
        let gf = Factor::from_values(term.group.clone(), &groups)
            .map_err(|_| Error::invalid(format!("grouping factor '{}' needs at least 2 levels", term.group)))?;
        let obs_level = groups
            .iter()
            .map(|g| gf.levels.binary_search_by(|l| l.as_str().cmp(g)).expect("observed level"))
            .collect();
        let (slope_values, slope_name) = match &term.slope {
            None => (None, None),
            Some(s) => {
                let vals = t.factor(s).ok_or_else(|| {
                    Error::invalid(format!("random slope '{s}' must be a 2-level factor column"))
                })?;
                let f = match fixed.levels.get(s) {
                    Some(order) => Factor::new(s.clone(), order.clone())?,
                    None => Factor::from_values(s.clone(), &vals)?,
                };
                if f.levels.len() != 2 {
                    return Err(Error::invalid(format!(
                        "random slope '{s}' must have exactly 2 levels, has {}",
                        f.levels.len()
                    )));
                }
                let coded = vals
                    .iter()
                    .map(|v| f.code(v).map(|c| c[0]))
                    .collect::<Result<Vec<f64>>>()?;
                (Some(coded), Some(f.contrast_names().remove(0)))
            }
        };
        Ok(Self {
            term: term.clone(),
            levels: gf.levels,
            obs_level,
            slope_values,
            slope_name,
        })
    }
}

/// Lower-triangular relative factor of one block from its θ slice.
fn relative_factor(theta: &[f64], k: usize) -> [[f64; 2]; 2] {
    if k == 1 {
        [[theta[0], 0.0], [0.0, 0.0]]
    } else {
        [[theta[0], 0.0], [theta[1], theta[2]]]
    }
}

/// A mixed-model problem: fixed design, response and grouping structure,
/// with the θ-independent cross products precomputed.
#[derive(Debug, Clone)]
pub struct LmmProblem {
    pub fixed: ModelSpec,
    pub random: RandomSpec,
    pub design: DesignMatrix,
    pub y: Vec<f64>,
    pub blocks: Vec<GroupBlock>,
    offsets: Vec<usize>,
    q: usize,
    /// Non-zero entries of each row of Z.
    z_rows: Vec<Vec<(usize, f64)>>,
    ztz: DMatrix<f64>,
    ztx: DMatrix<f64>,
    zty: DVector<f64>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
}

/// Penalized least-squares solution at one θ.
#[derive(Debug, Clone)]
pub struct PlsSolution {
    pub deviance: f64,
    pub beta: Vec<f64>,
    /// Spherical random effects.
    pub u: Vec<f64>,
    /// Random effects on the data scale, `Λ u`.
    pub b: Vec<f64>,
    pub pwrss: f64,
    pub log_det: f64,
    /// `(Xᵀ V⁻¹ X)⁻¹ / σ²` (relative covariance of β).
    pub beta_cov_unscaled: DMatrix<f64>,
    pub residuals: Vec<f64>,
}

impl LmmProblem {
    pub fn new(t: &TrialTable, fixed: &ModelSpec, random: &RandomSpec) -> Result<Self> {
        let design = build_design(t, fixed)?;
        let y = response(t, fixed)?.to_vec();
        let blocks = random
            .terms
            .iter()
            .map(|term| GroupBlock::from_table(t, term, fixed))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(fixed.clone(), random.clone(), design, y, blocks)
    }

    pub fn from_parts(
        fixed: ModelSpec,
        random: RandomSpec,
        design: DesignMatrix,
        y: Vec<f64>,
        blocks: Vec<GroupBlock>,
    ) -> Result<Self> {
        let n = y.len();
        if design.n_obs() != n {
            return Err(Error::invalid("design and response lengths differ"));
        }
        if design.rank < design.n_cols() {
            return Err(Error::RankDeficient {
                rank: design.rank,
                cols: design.n_cols(),
                context: " in mixed model".into(),
            });
        }
        let mut seen = BTreeSet::new();
        for b in &blocks {
            if b.obs_level.len() != n {
                return Err(Error::invalid(format!("grouping '{}' has wrong length", b.term.group)));
            }
            if b.levels.len() < 2 {
                return Err(Error::invalid(format!("grouping factor '{}' needs ≥2 levels", b.term.group)));
            }
            if !seen.insert(b.term.group.clone()) {
                return Err(Error::invalid(format!("grouping factor '{}' appears twice", b.term.group)));
            }
        }
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut q = 0;
        for b in &blocks {
            offsets.push(q);
            q += b.levels.len() * b.k();
        }
        let z_rows: Vec<Vec<(usize, f64)>> = (0..n)
            .map(|i| {
                let mut row = Vec::with_capacity(2 * blocks.len());
                for (b, off) in blocks.iter().zip(&offsets) {
                    let base = off + b.obs_level[i] * b.k();
                    row.push((base, 1.0));
                    if let Some(s) = &b.slope_values {
                        row.push((base + 1, s[i]));
                    }
                }
                row
            })
            .collect();

        let x = &design.x;
        let p = x.ncols();
        let mut ztz = DMatrix::zeros(q, q);
        let mut ztx = DMatrix::zeros(q, p);
        for (i, row) in z_rows.iter().enumerate() {
            for &(a, va) in row {
                for &(b, vb) in row {
                    ztz[(a, b)] += va * vb;
                }
                for j in 0..p {
                    ztx[(a, j)] += va * x[(i, j)];
                }
            }
        }
        let xtx = x.transpose() * x;
        let mut prob = Self {
            fixed,
            random,
            design,
            y: Vec::new(),
            blocks,
            offsets,
            q,
            z_rows,
            ztz,
            ztx,
            zty: DVector::zeros(q),
            xtx,
            xty: DVector::zeros(p),
        };
        prob.set_response(y);
        Ok(prob)
    }

    fn set_response(&mut self, y: Vec<f64>) {
        let mut zty = DVector::zeros(self.q);
        for (row, yi) in self.z_rows.iter().zip(&y) {
            for &(a, va) in row {
                zty[a] += va * yi;
            }
        }
        let yv = DVector::from_column_slice(&y);
        self.xty = self.design.x.transpose() * &yv;
        self.zty = zty;
        self.y = y;
    }

    /// Same design and grouping with a new response.
    pub fn with_response(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.y.len() {
            return Err(Error::invalid("response length differs from the problem"));
        }
        let mut p = self.clone();
        p.set_response(y);
        Ok(p)
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    /// Number of random-effect columns.
    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n_theta(&self) -> usize {
        self.blocks.iter().map(GroupBlock::n_theta).sum()
    }

    pub fn z_row(&self, i: usize) -> &[(usize, f64)] {
        &self.z_rows[i]
    }

    /// Lower bounds: 0 on diagonal entries, unbounded off-diagonal.
    pub fn theta_lower(&self) -> Vec<f64> {
        let mut lo = Vec::new();
        for b in &self.blocks {
            if b.k() == 1 {
                lo.push(0.0);
            } else {
                lo.extend([0.0, f64::NEG_INFINITY, 0.0]);
            }
        }
        lo
    }

    /// Deterministic start: diagonal 1, off-diagonal 0.
    pub fn theta_start(&self) -> Vec<f64> {
        let mut t = Vec::new();
        for b in &self.blocks {
            if b.k() == 1 {
                t.push(1.0);
            } else {
                t.extend([1.0, 0.0, 1.0]);
            }
        }
        t
    }

    /// Per-block relative factors `T_b` for `theta`.
    pub fn relative_factors(&self, theta: &[f64]) -> Vec<[[f64; 2]; 2]> {
        let mut pos = 0;
        self.blocks
            .iter()
            .map(|b| {
                let t = relative_factor(&theta[pos..pos + b.n_theta()], b.k());
                pos += b.n_theta();
                t
            })
            .collect()
    }

    /// Dense Z (for oracles and small problems).
    pub fn dense_z(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.n_obs(), self.q);
        for (i, row) in self.z_rows.iter().enumerate() {
            for &(a, v) in row {
                z[(i, a)] = v;
            }
        }
        z
    }

    /// Dense Λ (block diagonal).
    pub fn dense_lambda(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.q, self.q);
        for ((b, off), t) in self.blocks.iter().zip(&self.offsets).zip(self.relative_factors(theta)) {
            let k = b.k();
            for lvl in 0..b.levels.len() {
                let base = off + lvl * k;
                for i in 0..k {
                    for j in 0..=i {
                        l[(base + i, base + j)] = t[i][j];
                    }
                }
            }
        }
        l
    }

    /// `M ← M Λ` for a matrix with q columns.
    fn right_mul_lambda(&self, m: &mut DMatrix<f64>, factors: &[[[f64; 2]; 2]]) {
        for ((b, off), t) in self.blocks.iter().zip(&self.offsets).zip(factors) {
            for lvl in 0..b.levels.len() {
                let c0 = off + lvl * b.k();
                if b.k() == 1 {
                    m.column_mut(c0).scale_mut(t[0][0]);
                } else {
                    for r in 0..m.nrows() {
                        let (a0, a1) = (m[(r, c0)], m[(r, c0 + 1)]);
                        m[(r, c0)] = a0 * t[0][0] + a1 * t[1][0];
                        m[(r, c0 + 1)] = a1 * t[1][1];
                    }
                }
            }
        }
    }

    /// `M ← Λᵀ M` for a matrix with q rows.
    fn left_mul_lambda_t(&self, m: &mut DMatrix<f64>, factors: &[[[f64; 2]; 2]]) {
        for ((b, off), t) in self.blocks.iter().zip(&self.offsets).zip(factors) {
            for lvl in 0..b.levels.len() {
                let r0 = off + lvl * b.k();
                if b.k() == 1 {
                    m.row_mut(r0).scale_mut(t[0][0]);
                } else {
                    for c in 0..m.ncols() {
                        let (a0, a1) = (m[(r0, c)], m[(r0 + 1, c)]);
                        m[(r0, c)] = a0 * t[0][0] + a1 * t[1][0];
                        m[(r0 + 1, c)] = a1 * t[1][1];
                    }
                }
            }
        }
    }

    /// `Λ u`.
    fn lambda_mul(&self, u: &[f64], factors: &[[[f64; 2]; 2]]) -> Vec<f64> {
        let mut b_out = vec![0.0; self.q];
        for ((b, off), t) in self.blocks.iter().zip(&self.offsets).zip(factors) {
            for lvl in 0..b.levels.len() {
                let c0 = off + lvl * b.k();
                if b.k() == 1 {
                    b_out[c0] = t[0][0] * u[c0];
                } else {
                    b_out[c0] = t[0][0] * u[c0];
                    b_out[c0 + 1] = t[1][0] * u[c0] + t[1][1] * u[c0 + 1];
                }
            }
        }
        b_out
    }

    /// Solves the penalized least-squares problem at `theta`.
    pub fn solve(&self, theta: &[f64]) -> Result<PlsSolution> {
        if theta.len() != self.n_theta() {
            return Err(Error::invalid(format!(
                "theta has {} entries, model needs {}",
                theta.len(),
                self.n_theta()
            )));
        }
        let factors = self.relative_factors(theta);
        let n = self.n_obs();
        let p = self.design.n_cols();

        let mut m = self.ztz.clone();
        self.right_mul_lambda(&mut m, &factors);
        self.left_mul_lambda_t(&mut m, &factors);
        for i in 0..self.q {
            m[(i, i)] += 1.0;
        }
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::Numerical("penalized random-effects system is not positive definite".into()))?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();

        let mut lzty = DMatrix::from_column_slice(self.q, 1, self.zty.as_slice());
        self.left_mul_lambda_t(&mut lzty, &factors);
        let mut lztx = self.ztx.clone();
        self.left_mul_lambda_t(&mut lztx, &factors);
        let cu = l
            .solve_lower_triangular(&lzty)
            .ok_or_else(|| Error::Numerical("singular random-effects factor".into()))?;
        let rzx = l
            .solve_lower_triangular(&lztx)
            .ok_or_else(|| Error::Numerical("singular random-effects factor".into()))?;

        let xtx_adj = &self.xtx - rzx.transpose() * &rzx;
        let lx = xtx_adj
            .cholesky()
            .ok_or_else(|| Error::Numerical("fixed-effects system is not positive definite".into()))?;
        let rhs = DMatrix::from_column_slice(p, 1, self.xty.as_slice()) - rzx.transpose() * &cu;
        let beta = lx.solve(&rhs);
        let beta_cov_unscaled = lx.inverse();

        let u_rhs = &cu - &rzx * &beta;
        let u = l
            .transpose()
            .solve_upper_triangular(&u_rhs)
            .ok_or_else(|| Error::Numerical("singular random-effects factor".into()))?;
        let u: Vec<f64> = u.iter().copied().collect();
        let b = self.lambda_mul(&u, &factors);
        let beta: Vec<f64> = beta.iter().copied().collect();

        let x = &self.design.x;
        let mut residuals = Vec::with_capacity(n);
        for i in 0..n {
            let mut fit = 0.0;
            for (j, bj) in beta.iter().enumerate() {
                fit += x[(i, j)] * bj;
            }
            for &(a, v) in &self.z_rows[i] {
                fit += v * b[a];
            }
            residuals.push(self.y[i] - fit);
        }
        let pwrss = residuals.iter().map(|r| r * r).sum::<f64>() + u.iter().map(|v| v * v).sum::<f64>();
        let nf = n as f64;
        let deviance = log_det + nf * (1.0 + (2.0 * std::f64::consts::PI * pwrss / nf).ln());
        Ok(PlsSolution {
            deviance,
            beta,
            u,
            b,
            pwrss,
            log_det,
            beta_cov_unscaled,
            residuals,
        })
    }

    /// −2 × profiled log-likelihood at `theta`.
    pub fn profiled_deviance(&self, theta: &[f64]) -> Result<f64> {
        if let Some((i, v)) = theta
            .iter()
            .zip(self.theta_lower())
            .enumerate()
            .find(|(_, (t, lo))| **t < *lo)
            .map(|(i, (t, _))| (i, *t))
        {
            return Err(Error::invalid(format!("theta[{i}] = {v} is below its lower bound 0")));
        }
        Ok(self.solve(theta)?.deviance)
    }

    /// Deviance of the fixed-effects-only model (θ = 0).
    pub fn ols_deviance(&self) -> Result<f64> {
        let f = fit_ols(&self.design, &self.y)?;
        Ok(-2.0 * f.log_lik)
    }

    /// Maximum-likelihood fit.
    pub fn fit(&self) -> Result<FittedLmm> {
        self.fit_with(&NelderMeadOptions::default())
    }

    pub fn fit_with(&self, opts: &NelderMeadOptions) -> Result<FittedLmm> {
        let lower = self.theta_lower();
        let upper = vec![f64::INFINITY; lower.len()];
        let res = nelder_mead(
            |th| self.solve(th).map(|s| s.deviance).unwrap_or(f64::INFINITY),
            &self.theta_start(),
            &lower,
            &upper,
            opts,
        );
        let mut theta = res.x.clone();
        // never worse than the fixed-effects-only fit
        let zero = vec![0.0; theta.len()];
        if let Ok(d0) = self.solve(&zero).map(|s| s.deviance) {
            if d0 < res.f {
                theta = zero;
            }
        }
        let fit = self.summarize(&theta, &res)?;
        if !res.converged {
            return Err(Error::NotConverged {
                evaluations: res.evaluations,
                fit: Box::new(fit),
            });
        }
        Ok(fit)
    }

    fn summarize(&self, theta: &[f64], res: &crate::optim::NelderMeadResult) -> Result<FittedLmm> {
        let sol = self.solve(theta)?;
        let n = self.n_obs();
        let p = self.design.n_cols();
        let sigma2 = sol.pwrss / n as f64;
        let sigma = sigma2.sqrt();
        let scale = &self.design.column_scale;
        let coefficients: Vec<f64> = sol.beta.iter().zip(scale).map(|(b, s)| b / s).collect();
        let std_errors: Vec<f64> = (0..p)
            .map(|j| (sigma2 * sol.beta_cov_unscaled[(j, j)]).sqrt() / scale[j])
            .collect();
        let t_values = coefficients.iter().zip(&std_errors).map(|(b, s)| b / s).collect();

        let mut components = Vec::new();
        let mut boundary = Vec::new();
        for (b, t) in self.blocks.iter().zip(self.relative_factors(theta)) {
            let names = b.term_names();
            let (sds, corr) = if b.k() == 1 {
                (vec![sigma * t[0][0].abs()], None)
            } else {
                let v00 = t[0][0] * t[0][0];
                let v10 = t[1][0] * t[0][0];
                let v11 = t[1][0] * t[1][0] + t[1][1] * t[1][1];
                let sds = vec![sigma * v00.sqrt(), sigma * v11.sqrt()];
                let denom = (v00 * v11).sqrt();
                let corr = if denom > 0.0 { Some((v10 / denom).clamp(-1.0, 1.0)) } else { None };
                (sds, corr)
            };
            for (name, sd) in names.iter().zip(&sds) {
                if *sd < BOUNDARY_TOL * sigma {
                    boundary.push(format!("{}:{name}", b.term.group));
                }
            }
            components.push(VarianceComponent {
                group: b.term.group.clone(),
                terms: names,
                std_devs: sds,
                correlation: corr,
            });
        }

        let n_params = p + self.n_theta() + 1;
        let log_lik = -0.5 * sol.deviance;
        let scaled: Vec<f64> = sol.residuals.iter().map(|r| r / sigma).collect();
        let scaled_residuals = [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| quantile(&scaled, q));
        Ok(FittedLmm {
            formula: format!("{} + {}", self.fixed.formula(), self.random),
            names: self.design.names.clone(),
            coefficients,
            std_errors,
            t_values,
            random_terms: self.random.terms.clone(),
            components,
            sigma,
            theta: theta.to_vec(),
            log_lik,
            deviance: sol.deviance,
            aic: sol.deviance + 2.0 * n_params as f64,
            bic: sol.deviance + (n as f64).ln() * n_params as f64,
            n_obs: n,
            n_params,
            df_resid: n - n_params,
            groups: self.blocks.iter().map(|b| (b.term.group.clone(), b.levels.len())).collect(),
            scaled_residuals,
            convergence: ConvergenceReport {
                evaluations: res.evaluations,
                iterations: res.iterations,
                simplex_size: res.simplex_size,
                converged: res.converged,
                boundary,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponent {
    pub group: String,
    pub terms: Vec<String>,
    pub std_devs: Vec<f64>,
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub evaluations: usize,
    pub iterations: usize,
    pub simplex_size: f64,
    pub converged: bool,
    /// Components whose SD is effectively zero.
    pub boundary: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedLmm {
    pub formula: String,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    pub random_terms: Vec<RandomTerm>,
    pub components: Vec<VarianceComponent>,
    pub sigma: f64,
    pub theta: Vec<f64>,
    pub log_lik: f64,
    pub deviance: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_obs: usize,
    pub n_params: usize,
    pub df_resid: usize,
    pub groups: Vec<(String, usize)>,
    /// Min, 1Q, median, 3Q, max of residuals / σ.
    pub scaled_residuals: [f64; 5],
    pub convergence: ConvergenceReport,
}

impl FittedLmm {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.coefficients[i])
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.std_errors[i])
    }

    pub fn t_value(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.t_values[i])
    }

    /// Plain-text summary laid out like an lme4 model printout.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Linear mixed model fit by maximum likelihood");
        let _ = writeln!(s, "Formula: {}", self.formula);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>10} {:>10} {:>10} {:>10} {:>10}", "AIC", "BIC", "logLik", "deviance", "df.resid");
        let _ = writeln!(
            s,
            "{:>10.0} {:>10.0} {:>10.0} {:>10.0} {:>10}",
            self.aic, self.bic, self.log_lik, self.deviance, self.df_resid
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "Scaled residuals:");
        let _ = writeln!(s, "{:>8} {:>8} {:>8} {:>8} {:>8}", "Min", "1Q", "Median", "3Q", "Max");
        let r = self.scaled_residuals;
        let _ = writeln!(s, "{:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}", r[0], r[1], r[2], r[3], r[4]);
        let _ = writeln!(s);
        let _ = writeln!(s, "Random effects:");
        let _ = writeln!(s, " {:<10} {:<28} {:>10} {:>7}", "Groups", "Name", "Std.Dev.", "Corr");
        for c in &self.components {
            for (i, (name, sd)) in c.terms.iter().zip(&c.std_devs).enumerate() {
                let group = if i == 0 { c.group.as_str() } else { "" };
                let corr = match (i, c.correlation) {
                    (1, Some(r)) => format!("{r:>7.3}"),
                    _ => String::new(),
                };
                let _ = writeln!(s, " {group:<10} {name:<28} {sd:>10.5} {corr}");
            }
        }
        let _ = writeln!(s, " {:<10} {:<28} {:>10.5}", "Residual", "", self.sigma);
        let groups: Vec<String> = self.groups.iter().map(|(g, n)| format!("{g}, {n}")).collect();
        let _ = writeln!(s, "Number of obs: {}, groups: {}", self.n_obs, groups.join("; "));
        let _ = writeln!(s);
        let _ = writeln!(s, "Fixed effects:");
        let _ = writeln!(s, " {:<34} {:>10} {:>10} {:>8}", "", "Estimate", "Std. Error", "t value");
        for i in 0..self.names.len() {
            let _ = writeln!(
                s,
                " {:<34} {:>10.4} {:>10.4} {:>8.2}",
                self.names[i], self.coefficients[i], self.std_errors[i], self.t_values[i]
            );
        }
        if !self.convergence.boundary.is_empty() {
            let _ = writeln!(s, "\nboundary (singular) fit: {}", self.convergence.boundary.join(", "));
        }
        s
    }
}

fn random_term_set(terms: &[RandomTerm]) -> Vec<String> {
    let mut v = Vec::new();
    for t in terms {
        v.push(format!("re:{}", t.group));
        if let Some(s) = &t.slope {
            v.push(format!("re:{}:{s}", t.group));
        }
    }
    v
}

impl LikelihoodModel for FittedLmm {
    fn log_lik(&self) -> f64 {
        self.log_lik
    }
    fn n_params(&self) -> usize {
        self.n_params
    }
    fn n_obs(&self) -> usize {
        self.n_obs
    }
    fn term_set(&self) -> Vec<String> {
        let mut v = self.names.clone();
        v.extend(random_term_set(&self.random_terms));
        v
    }
}

/// Builds and fits a mixed model from a trial table.
pub fn fit_lmm(t: &TrialTable, fixed: &ModelSpec, random: &RandomSpec) -> Result<FittedLmm> {
    LmmProblem::new(t, fixed, random)?.fit()
}

/// Either kind of fitted model, as produced by [`fit_model`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedModel {
    Glm(FittedGlm),
    Lmm(FittedLmm),
}

impl FittedModel {
    pub fn names(&self) -> &[String] {
        match self {
            FittedModel::Glm(m) => &m.names,
            FittedModel::Lmm(m) => &m.names,
        }
    }

    pub fn coefficients(&self) -> &[f64] {
        match self {
            FittedModel::Glm(m) => &m.coefficients,
            FittedModel::Lmm(m) => &m.coefficients,
        }
    }

    pub fn std_errors(&self) -> &[f64] {
        match self {
            FittedModel::Glm(m) => &m.std_errors,
            FittedModel::Lmm(m) => &m.std_errors,
        }
    }

    pub fn t_values(&self) -> &[f64] {
        match self {
            FittedModel::Glm(m) => &m.t_values,
            FittedModel::Lmm(m) => &m.t_values,
        }
    }

    pub fn t_value(&self, name: &str) -> Option<f64> {
        self.names().iter().position(|n| n == name).map(|i| self.t_values()[i])
    }

    pub fn aic(&self) -> f64 {
        crate::ols::information_criteria(self).aic
    }
}

impl LikelihoodModel for FittedModel {
    fn log_lik(&self) -> f64 {
        match self {
            FittedModel::Glm(m) => m.log_lik(),
            FittedModel::Lmm(m) => m.log_lik(),
        }
    }
    fn n_params(&self) -> usize {
        match self {
            FittedModel::Glm(m) => m.n_params(),
            FittedModel::Lmm(m) => m.n_params(),
        }
    }
    fn n_obs(&self) -> usize {
        match self {
            FittedModel::Glm(m) => m.n_obs(),
            FittedModel::Lmm(m) => m.n_obs(),
        }
    }
    fn term_set(&self) -> Vec<String> {
        match self {
            FittedModel::Glm(m) => m.term_set(),
            FittedModel::Lmm(m) => m.term_set(),
        }
    }
}

/// OLS when `random` is empty, otherwise a mixed model.
pub fn fit_model(t: &TrialTable, fixed: &ModelSpec, random: &RandomSpec) -> Result<FittedModel> {
    if random.is_empty() {
        Ok(FittedModel::Glm(crate::ols::fit_table(t, fixed)?))
    } else {
        Ok(FittedModel::Lmm(fit_lmm(t, fixed, random)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrtResult {
    pub chi2: f64,
    pub df: usize,
    pub p_value: f64,
    pub delta_aic: f64,
}

/// Likelihood-ratio test of `nested` against `full` (both ML fits on the
/// same response).
pub fn lrt<A: LikelihoodModel + ?Sized, B: LikelihoodModel + ?Sized>(nested: &A, full: &B) -> Result<LrtResult> {
    if nested.n_obs() != full.n_obs() {
        return Err(Error::NotNested("models were fitted to different numbers of observations".into()));
    }
    let full_terms: BTreeSet<String> = full.term_set().into_iter().collect();
    let missing: Vec<String> = nested
        .term_set()
        .into_iter()
        .filter(|t| !full_terms.contains(t))
        .collect();
    if !missing.is_empty() {
        return Err(Error::NotNested(format!("terms absent from the larger model: {}", missing.join(", "))));
    }
    if nested.n_params() > full.n_params() {
        return Err(Error::NotNested("the nested model has more parameters".into()));
    }
    let df = full.n_params() - nested.n_params();
    let mut chi2 = -2.0 * nested.log_lik() + 2.0 * full.log_lik();
    if chi2 < 0.0 {
        if chi2 < -1e-6 {
            log::warn!("negative likelihood-ratio statistic {chi2}; the larger model did not reach its optimum");
        }
        chi2 = 0.0;
    }
    let ic_n = crate::ols::information_criteria(nested);
    let ic_f = crate::ols::information_criteria(full);
    Ok(LrtResult {
        chi2,
        df,
        p_value: chi2_sf(chi2, df as f64),
        delta_aic: ic_n.aic - ic_f.aic,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldInterval {
    pub name: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Symmetric normal intervals `β̂ ± z_{(1+level)/2} SE`.
pub fn wald_intervals(m: &FittedLmm, level: f64) -> Result<Vec<WaldInterval>> {
    wald_from(&m.names, &m.coefficients, &m.std_errors, level)
}

pub fn wald_from(names: &[String], est: &[f64], se: &[f64], level: f64) -> Result<Vec<WaldInterval>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("level must be in (0, 1), got {level}")));
    }
    let z = normal_quantile(0.5 + level / 2.0);
    Ok(names
        .iter()
        .zip(est.iter().zip(se))
        .map(|(n, (b, s))| WaldInterval {
            name: n.clone(),
            estimate: *b,
            lower: b - z * s,
            upper: b + z * s,
        })
        .collect())
}
