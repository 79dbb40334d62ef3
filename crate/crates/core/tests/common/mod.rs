//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use regbase::epochs::{TrialRow, TrialTable};
use regbase::lmm::LmmProblem;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

/// ML deviance from the marginal covariance `W = Z Λ Λᵀ Zᵀ + I` by dense
/// generalized least squares, without any penalized-least-squares algebra.
pub fn dense_gls_deviance(prob: &LmmProblem, theta: &[f64]) -> f64 {
    let z = prob.dense_z();
    let l = prob.dense_lambda(theta);
    let zl = &z * &l;
    let n = prob.n_obs();
    let w = &zl * zl.transpose() + DMatrix::identity(n, n);
    let chol = w.clone().cholesky().expect("W is positive definite");
    let x = &prob.design.x;
    let y = DVector::from_column_slice(&prob.y);
    let wi_x = chol.solve(x);
    let wi_y = chol.solve(&y);
    let beta = (x.transpose() * &wi_x).lu().solve(&(x.transpose() * &wi_y)).expect("full-rank X");
    let r = &y - x * &beta;
    let sigma2 = r.dot(&chol.solve(&r)) / n as f64;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let nf = n as f64;
    log_det + nf * (2.0 * std::f64::consts::PI * sigma2).ln() + nf
}

/// Balanced one-way layout: `groups[i][j]` is observation j of group i.
pub struct OneWay {
    pub a: usize,
    pub n: usize,
    pub ssw: f64,
    pub ssb: f64,
}

impl OneWay {
    pub fn new(groups: &[Vec<f64>]) -> Self {
        let a = groups.len();
        let n = groups[0].len();
        assert!(groups.iter().all(|g| g.len() == n), "unbalanced");
        let means: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / n as f64).collect();
        let grand = means.iter().sum::<f64>() / a as f64;
        let ssw = groups
            .iter()
            .zip(&means)
            .map(|(g, m)| g.iter().map(|v| (v - m).powi(2)).sum::<f64>())
            .sum();
        let ssb = n as f64 * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
        Self { a, n, ssw, ssb }
    }

    /// Closed-form ML estimates `(σ², σ_b²)` when the between-group
    /// component is interior.
    pub fn ml_components(&self) -> (f64, f64) {
        let (a, n) = (self.a as f64, self.n as f64);
        let sigma2 = self.ssw / (a * (n - 1.0));
        let lambda = self.ssb / a;
        (sigma2, (lambda - sigma2) / n)
    }

    /// Profiled ML deviance at relative SD `theta`.
    pub fn profiled_deviance(&self, theta: f64) -> f64 {
        let (a, n) = (self.a as f64, self.n as f64);
        let big_n = a * n;
        let k = 1.0 + n * theta * theta;
        a * k.ln() + big_n * (2.0 * std::f64::consts::PI * (self.ssw + self.ssb / k) / big_n).ln() + big_n
    }

    pub fn table(groups: &[Vec<f64>]) -> TrialTable {
        let mut rows = Vec::new();
        let mut values = Vec::new();
        for (i, g) in groups.iter().enumerate() {
            for (j, v) in g.iter().enumerate() {
                rows.push(TrialRow {
                    subject: format!("g{i:02}"),
                    item: format!("o{j:02}"),
                    condition: "c".into(),
                    trial_index: j as i64,
                    location: "Cz".into(),
                });
                values.push(*v);
            }
        }
        TrialTable {
            location_kind: "channel".into(),
            rows,
            values,
            covariates: BTreeMap::new(),
        }
    }
}

/// Crossed subject × item table with a two-level condition, a numeric
/// `baseline` covariate and Gaussian response; cells are dropped at random
/// so designs are unbalanced.
pub fn crossed_table(seed: u64, n_subj: usize, n_item: usize, keep: f64) -> TrialTable {
    let mut r = rng(seed);
    let subj_eff: Vec<f64> = (0..n_subj).map(|_| 0.8 * gauss(&mut r)).collect();
    let item_eff: Vec<f64> = (0..n_item).map(|_| 0.6 * gauss(&mut r)).collect();
    let slope_eff: Vec<f64> = (0..n_subj).map(|_| 0.4 * gauss(&mut r)).collect();
    let mut rows = Vec::new();
    let mut values = Vec::new();
    let mut base = Vec::new();
    for s in 0..n_subj {
        for i in 0..n_item {
            if r.random::<f64>() > keep {
                continue;
            }
            let cond = if (s + i) % 2 == 0 { "match" } else { "mismatch" };
            let code = if cond == "match" { 1.0 } else { -1.0 };
            let b = 2.0 * gauss(&mut r);
            let y = 0.3 + 0.5 * code - 0.2 * b + subj_eff[s] + item_eff[i] + slope_eff[s] * code + gauss(&mut r);
            rows.push(TrialRow {
                subject: format!("s{s:02}"),
                item: format!("i{i:02}"),
                condition: cond.into(),
                trial_index: i as i64,
                location: "Cz".into(),
            });
            values.push(y);
            base.push(b);
        }
    }
    TrialTable {
        location_kind: "channel".into(),
        rows,
        values,
        covariates: BTreeMap::from([("baseline".to_string(), base)]),
    }
}

/// One-sample Kolmogorov–Smirnov statistic of `x` against `cdf`.
pub fn ks_statistic(x: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &xi)| {
            let f = cdf(xi);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}
