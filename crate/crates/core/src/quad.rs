//! Gauss quadrature rules on the reference interval [0, 1].
//!
//! Two families are provided: plain Gauss-Legendre, and rules for the
//! power-law weight t^b with b > -1, which integrate t^b * p(t) exactly for
//! polynomial p up to degree 2n-1. The weighted family absorbs the kernel
//! singularity |x - x'|^(-alpha), so panels that touch the singular point
//! never evaluate the weight itself.
//!
//! Nodes and weights come from the Golub-Welsch eigenvalue method: the
//! three-term recurrence of the orthogonal polynomials is packed into a
//! symmetric tridiagonal matrix whose eigenvalues are the nodes and whose
//! first eigenvector components give the weights.

use nalgebra::DMatrix;
use std::sync::OnceLock;

/// Quadrature rule on [0, 1]: sum(w_i * g(t_i)) approximates the integral of
/// weight(t) * g(t) over [0, 1].
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn golub_welsch(diag: &[f64], offdiag: &[f64], mu0: f64) -> (Vec<f64>, Vec<f64>) {
    let n = diag.len();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = diag[i];
        if i + 1 < n {
            m[(i, i + 1)] = offdiag[i];
            m[(i + 1, i)] = offdiag[i];
        }
    }
    let eig = m.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], mu0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

impl GaussRule {
    /// n-point Gauss-Legendre rule mapped to [0, 1] (weight 1).
    pub fn legendre(n: usize) -> Self {
        assert!(n >= 1);
        let diag = vec![0.0; n];
        let offdiag: Vec<f64> = (1..n)
            .map(|k| {
                let k = k as f64;
                k / (4.0 * k * k - 1.0).sqrt()
            })
            .collect();
        let (x, w) = golub_welsch(&diag, &offdiag, 2.0);
        GaussRule {
            nodes: x.iter().map(|&xi| 0.5 * (1.0 + xi)).collect(),
            weights: w.iter().map(|&wi| 0.5 * wi).collect(),
        }
    }

    /// n-point rule for the weight t^b on [0, 1], b > -1.
    ///
    /// This is the Jacobi rule with exponents (0, b) mapped from [-1, 1];
    /// its zeroth moment 2^(b+1)/(b+1) is available in closed form, so no
    /// gamma function is needed.
    pub fn power_weighted(n: usize, b: f64) -> Self {
        assert!(n >= 1);
        assert!(b > -1.0, "weight exponent must be integrable, got {b}");
        let mut diag = Vec::with_capacity(n);
        let mut offdiag = Vec::with_capacity(n.saturating_sub(1));
        diag.push(b / (b + 2.0));
        for k in 1..n {
            let kf = k as f64;
            let s = 2.0 * kf + b;
            diag.push(b * b / (s * (s + 2.0)));
            let beta = 2.0 * kf * (kf + b) / (s * (s * s - 1.0).sqrt());
            offdiag.push(beta);
        }
        let offdiag = &offdiag[..n - 1];
        let mu0 = 2f64.powf(b + 1.0) / (b + 1.0);
        let (x, w) = golub_welsch(&diag, offdiag, mu0);
        let scale = 2f64.powf(-(b + 1.0));
        GaussRule {
            nodes: x.iter().map(|&xi| 0.5 * (1.0 + xi)).collect(),
            weights: w.iter().map(|&wi| scale * wi).collect(),
        }
    }

    /// Integrates g over [a, b] (only meaningful for the weight-1 rule).
    pub fn integrate<F: Fn(f64) -> f64>(&self, a: f64, b: f64, g: F) -> f64 {
        let len = b - a;
        let mut acc = 0.0;
        for (&t, &w) in self.nodes.iter().zip(&self.weights) {
            acc += w * g(a + len * t);
        }
        acc * len
    }
}

/// Shared Gauss-Legendre rules for the panel integrators.
pub fn gl(n: usize) -> &'static GaussRule {
    static GL4: OnceLock<GaussRule> = OnceLock::new();
    static GL8: OnceLock<GaussRule> = OnceLock::new();
    static GL16: OnceLock<GaussRule> = OnceLock::new();
    static GL32: OnceLock<GaussRule> = OnceLock::new();
    match n {
        4 => GL4.get_or_init(|| GaussRule::legendre(4)),
        8 => GL8.get_or_init(|| GaussRule::legendre(8)),
        16 => GL16.get_or_init(|| GaussRule::legendre(16)),
        32 => GL32.get_or_init(|| GaussRule::legendre(32)),
        _ => panic!("no shared rule of order {n}"),
    }
}
