//! Bound-constrained Nelder–Mead simplex minimization.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadOptions {
    /// Converged when the spread of function values over the simplex drops
    /// below this.
    pub f_tol: f64,
    pub max_evals: usize,
    /// Initial step along each coordinate.
    pub initial_step: f64,
    /// Restarts from the best point after convergence.
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            f_tol: 1e-8,
            max_evals: 10_000,
            initial_step: 0.5,
            restarts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evaluations: usize,
    pub iterations: usize,
    /// Largest distance from the best vertex at termination.
    pub simplex_size: f64,
    pub converged: bool,
}

fn clamp(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Minimizes `f` over the box `[lower, upper]`, projecting every trial point
/// onto the box.
pub fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &NelderMeadOptions,
) -> NelderMeadResult {
    let n = x0.len();
    let mut evals = 0usize;
    let mut iterations = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut start = x0.to_vec();
    clamp(&mut start, lower, upper);
    if n == 0 {
        let fx = eval(&start, &mut evals);
        return NelderMeadResult {
            x: start,
            f: fx,
            evaluations: evals,
            iterations: 0,
            simplex_size: 0.0,
            converged: true,
        };
    }

    let mut step = opts.initial_step;
    let mut converged = false;
    let mut best_x = start.clone();
    let mut best_f = f64::INFINITY;
    let mut simplex_size = 0.0;

    for _round in 0..=opts.restarts {
        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        simplex.push(start.clone());
        for i in 0..n {
            let mut v = start.clone();
            v[i] += step;
            if v[i] > upper[i] {
                v[i] = start[i] - step;
            }
            clamp(&mut v, lower, upper);
            simplex.push(v);
        }
        let mut fv: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();
        converged = false;

        while evals < opts.max_evals {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| fv[a].total_cmp(&fv[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            fv = order.iter().map(|&i| fv[i]).collect();

            if (fv[n] - fv[0]).abs() <= opts.f_tol {
                converged = true;
                break;
            }
            iterations += 1;

            let mut centroid = vec![0.0; n];
            for v in &simplex[..n] {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x / n as f64;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                let mut p: Vec<f64> = centroid
                    .iter()
                    .zip(&simplex[n])
                    .map(|(c, w)| c + t * (c - w))
                    .collect();
                clamp(&mut p, lower, upper);
                p
            };

            let xr = along(1.0);
            let fr = eval(&xr, &mut evals);
            if fr < fv[0] {
                let xe = along(2.0);
                let fe = eval(&xe, &mut evals);
                if fe < fr {
                    simplex[n] = xe;
                    fv[n] = fe;
                } else {
                    simplex[n] = xr;
                    fv[n] = fr;
                }
                continue;
            }
            if fr < fv[n - 1] {
                simplex[n] = xr;
                fv[n] = fr;
                continue;
            }
            let (xc, fc) = if fr < fv[n] {
                let xc = along(0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(-0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < fv[n].min(fr) {
                simplex[n] = xc;
                fv[n] = fc;
                continue;
            }
            // shrink toward the best vertex
            for i in 1..=n {
                let mut p: Vec<f64> = simplex[0]
                    .iter()
                    .zip(&simplex[i])
                    .map(|(b, v)| b + 0.5 * (v - b))
                    .collect();
                clamp(&mut p, lower, upper);
                fv[i] = eval(&p, &mut evals);
                simplex[i] = p;
            }
        }

        let bi = (0..=n).min_by(|&a, &b| fv[a].total_cmp(&fv[b])).unwrap_or(0);
        simplex_size = simplex
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&simplex[bi])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        let improved = best_f - fv[bi];
        if fv[bi] < best_f {
            best_f = fv[bi];
            best_x = simplex[bi].clone();
        }
        if !converged || improved.abs() <= opts.f_tol {
            break;
        }
        start = best_x.clone();
        step = (simplex_size * 2.0).max(1e-3).min(opts.initial_step);
    }

    NelderMeadResult {
        x: best_x,
        f: best_f,
        evaluations: evals,
        iterations,
        simplex_size,
        converged,
    }
}
