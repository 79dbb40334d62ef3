//! Householder QR with column pivoting.

use nalgebra::DMatrix;

/// Column-pivoted Householder factorization `X P = Q R`.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    n: usize,
    p: usize,
    /// Column-major; R in the upper triangle, reflectors below it.
    a: Vec<f64>,
    tau: Vec<f64>,
    /// `perm[j]` = original column sitting at pivoted position `j`.
    perm: Vec<usize>,
    rank: usize,
}

impl PivotedQr {
    pub fn new(x: &DMatrix<f64>) -> Self {
        let (n, p) = x.shape();
        let mut a: Vec<f64> = x.as_slice().to_vec();
        let mut perm: Vec<usize> = (0..p).collect();
        let mut tau = vec![0.0; p.min(n)];
        let steps = p.min(n);
        for k in 0..steps {
            // pivot on the largest remaining column norm
            let mut best = k;
            let mut best_norm = -1.0;
            for j in k..p {
                let col = &a[j * n + k..(j + 1) * n];
                let s: f64 = col.iter().map(|v| v * v).sum();
                if s > best_norm {
                    best_norm = s;
                    best = j;
                }
            }
            if best != k {
                for i in 0..n {
                    a.swap(k * n + i, best * n + i);
                }
                perm.swap(k, best);
            }
            let col = &mut a[k * n + k..(k + 1) * n];
            let alpha = col[0];
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                tau[k] = 0.0;
                continue;
            }
            let beta = if alpha >= 0.0 { -norm } else { norm };
            let v0 = alpha - beta;
            for v in col[1..].iter_mut() {
                *v /= v0;
            }
            tau[k] = (beta - alpha) / beta;
            col[0] = beta;
            for j in k + 1..p {
                let (left, right) = a.split_at_mut(j * n);
                let v = &left[k * n + k..(k + 1) * n];
                let cj = &mut right[k..n];
                let mut dot = cj[0];
                for i in 1..n - k {
                    dot += v[i] * cj[i];
                }
                let s = tau[k] * dot;
                cj[0] -= s;
                for i in 1..n - k {
                    cj[i] -= s * v[i];
                }
            }
        }
        let mut qr = Self {
            n,
            p,
            a,
            tau,
            perm,
            rank: 0,
        };
        qr.rank = qr.numerical_rank();
        qr
    }

    fn r(&self, i: usize, j: usize) -> f64 {
        self.a[j * self.n + i]
    }

    /// Number of |R_kk| above `eps * max(n, p) * |R_00|`.
    fn numerical_rank(&self) -> usize {
        let steps = self.p.min(self.n);
        if steps == 0 {
            return 0;
        }
        let r00 = self.r(0, 0).abs();
        if r00 == 0.0 {
            return 0;
        }
        let tol = f64::EPSILON * self.n.max(self.p) as f64 * r00;
        (0..steps).take_while(|&k| self.r(k, k).abs() > tol).count()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.p
    }

    /// Applies `Q^T` to `y` in place.
    fn apply_qt(&self, y: &mut [f64]) {
        let n = self.n;
        for k in 0..self.p.min(n) {
            if self.tau[k] == 0.0 {
                continue;
            }
            let v = &self.a[k * n + k..(k + 1) * n];
            let mut dot = y[k];
            for i in 1..n - k {
                dot += v[i] * y[k + i];
            }
            let s = self.tau[k] * dot;
            y[k] -= s;
            for i in 1..n - k {
                y[k + i] -= s * v[i];
            }
        }
    }

    /// Least-squares coefficients in original column order. Requires full rank.
    pub fn solve(&self, y: &[f64]) -> Vec<f64> {
        debug_assert!(self.is_full_rank());
        let mut qty = y.to_vec();
        self.apply_qt(&mut qty);
        let p = self.p;
        let mut z = vec![0.0; p];
        for i in (0..p).rev() {
            let mut s = qty[i];
            for j in i + 1..p {
                s -= self.r(i, j) * z[j];
            }
            z[i] = s / self.r(i, i);
        }
        let mut beta = vec![0.0; p];
        for (j, &orig) in self.perm.iter().enumerate() {
            beta[orig] = z[j];
        }
        beta
    }

    /// `(X^T X)^{-1}` in original column order. Requires full rank.
    pub fn unscaled_covariance(&self) -> DMatrix<f64> {
        let p = self.p;
        // R^{-1} by back substitution, column by column
        let mut rinv = DMatrix::<f64>::zeros(p, p);
        for c in 0..p {
            for i in (0..=c).rev() {
                let mut s = if i == c { 1.0 } else { 0.0 };
                for j in i + 1..=c {
                    s -= self.r(i, j) * rinv[(j, c)];
                }
                rinv[(i, c)] = s / self.r(i, i);
            }
        }
        let piv = &rinv * rinv.transpose();
        let mut out = DMatrix::<f64>::zeros(p, p);
        for i in 0..p {
            for j in 0..p {
                out[(self.perm[i], self.perm[j])] = piv[(i, j)];
            }
        }
        out
    }
}
