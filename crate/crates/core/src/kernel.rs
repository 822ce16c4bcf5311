//! Truncated singular diffusion kernel and the prior over its parameters.
//!
//! The kernel is
//!
//! ```text
//! B(x, x') = f((x + x')/2, theta) / (delta^2 |x - x'|^alpha)   for |x - x'| < delta
//! ```
//!
//! and zero otherwise. The diffusivity profile f is piecewise polynomial in
//! the pair midpoint z = (x + x')/2 with breakpoints at z = 0.625 and
//! z = 0.75; the first and last branches extend to z < 0 and z >= 1 so the
//! profile is defined wherever the constrained exterior strip can reach.
//!
//! The random input is lambda = (theta, alpha, delta) with independent priors
//! theta ~ Uniform, alpha ~ Beta(2,2), delta ~ Gamma(1, rate) truncated to an
//! interval. All three are sampled by inverse CDF, so a draw consumes exactly
//! three uniforms from its stream.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Breakpoints of the piecewise diffusivity profile.
pub const F_BREAKS: [f64; 2] = [0.625, 0.75];

/// Shape of the third branch of the diffusivity profile.
///
/// `Literal` keeps the affine form 14.4 + (z - 0.75) + 2; `Quadratic` uses
/// 14.4 (z - 0.75)^2 + 2 instead. `Constant` replaces the whole profile by a
/// constant and exists for diagnostics: several integrals have closed forms
/// under it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FVariant {
    #[default]
    Literal,
    Quadratic,
    Constant(f64),
}

/// Diffusivity profile f(z, theta).
pub fn eval_f(z: f64, theta: f64, variant: FVariant) -> f64 {
    match variant {
        FVariant::Constant(c) => c,
        _ if z < F_BREAKS[0] => 0.2 + (z - 0.625) * (z - 0.625),
        _ if z < F_BREAKS[1] => z + theta,
        FVariant::Literal => 14.4 + (z - 0.75) + 2.0,
        FVariant::Quadratic => 14.4 * (z - 0.75) * (z - 0.75) + 2.0,
    }
}

/// Largest value the profile attains for z in [-0.5, 1.5] and theta <= theta_max.
///
/// Used as the constant in the integrability bound of the collision integral.
pub fn f_sup(theta_max: f64, variant: FVariant) -> f64 {
    match variant {
        FVariant::Constant(c) => c,
        // branch 1 peaks at z = -0.5, branch 2 at z -> 0.75, branch 3 at z = 1.5
        FVariant::Literal => (0.2 + 1.265625f64)
            .max(0.75 + theta_max)
            .max(14.4 + 0.75 + 2.0),
        FVariant::Quadratic => (0.2 + 1.265625f64)
            .max(0.75 + theta_max)
            .max(14.4 * 0.5625 + 2.0),
    }
}

/// Kernel parameter triple lambda = (theta, alpha, delta).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Additive diffusivity shift on the middle branch.
    pub theta: f64,
    /// Singularity exponent of |x - x'|^(-alpha).
    pub kernel_alpha: f64,
    /// Interaction horizon.
    pub delta: f64,
}

impl KernelParams {
    pub fn new(theta: f64, kernel_alpha: f64, delta: f64) -> Self {
        KernelParams {
            theta,
            kernel_alpha,
            delta,
        }
    }
}

/// Pointwise kernel value B(x, x').
///
/// Exactly zero for |x - x'| >= delta; an error on the diagonal x = x',
/// where the kernel is singular.
pub fn eval_kernel(x: f64, xp: f64, p: &KernelParams, variant: FVariant) -> Result<f64> {
    let r = (x - xp).abs();
    if r == 0.0 {
        return Err(Error::SingularPoint(x));
    }
    if r >= p.delta {
        return Ok(0.0);
    }
    let f = eval_f(0.5 * (x + xp), p.theta, variant);
    Ok(f / (p.delta * p.delta * r.powf(p.kernel_alpha)))
}

/// Independent priors for (theta, alpha, delta).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    /// Uniform support for theta.
    pub theta_range: (f64, f64),
    /// Beta shape pair for alpha; only (2, 2) is supported.
    pub alpha_shape: (f64, f64),
    /// Gamma shape for delta; only 1 (exponential) is supported.
    pub delta_gamma_shape: f64,
    /// Gamma rate for delta.
    pub delta_gamma_rate: f64,
    /// Truncation interval for delta.
    pub delta_trunc: (f64, f64),
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            theta_range: (1.0, 2.0),
            alpha_shape: (2.0, 2.0),
            delta_gamma_shape: 1.0,
            delta_gamma_rate: 1.0,
            delta_trunc: (0.125, 1.0),
        }
    }
}

impl PriorSpec {
    /// Checks the hyperparameters are in the supported family.
    pub fn validate(&self) -> Result<()> {
        if self.theta_range.0 >= self.theta_range.1 {
            return Err(Error::BadPrior(format!(
                "empty theta range {:?}",
                self.theta_range
            )));
        }
        if self.alpha_shape != (2.0, 2.0) {
            return Err(Error::BadPrior(format!(
                "alpha shape {:?} not supported; inverse CDF sampling requires (2, 2)",
                self.alpha_shape
            )));
        }
        if self.delta_gamma_shape != 1.0 {
            return Err(Error::BadPrior(format!(
                "delta gamma shape {} not supported; truncation is closed-form only for shape 1",
                self.delta_gamma_shape
            )));
        }
        if self.delta_gamma_rate <= 0.0 {
            return Err(Error::BadPrior("gamma rate must be positive".into()));
        }
        let (lo, hi) = self.delta_trunc;
        if !(0.0 < lo && lo < hi) {
            return Err(Error::BadPrior(format!(
                "bad delta truncation {:?}",
                self.delta_trunc
            )));
        }
        Ok(())
    }

    /// True when lambda lies in the open support of the prior.
    pub fn in_support(&self, p: &KernelParams) -> bool {
        let (tl, th) = self.theta_range;
        let (dl, dh) = self.delta_trunc;
        tl < p.theta
            && p.theta < th
            && 0.0 < p.kernel_alpha
            && p.kernel_alpha < 1.0
            && dl < p.delta
            && p.delta < dh
    }

    /// Quantile of Beta(2, 2): the root of 3x^2 - 2x^3 = u in (0, 1),
    /// obtained from the trigonometric solution of the cubic.
    fn beta22_quantile(u: f64) -> f64 {
        let phi = ((1.0 - 2.0 * u).clamp(-1.0, 1.0)).acos() / 3.0;
        0.5 + (phi - 2.0 * std::f64::consts::PI / 3.0).cos()
    }

    /// CDF of the untruncated exponential part of the delta prior.
    fn exp_cdf(&self, x: f64) -> f64 {
        1.0 - (-self.delta_gamma_rate * x).exp()
    }

    /// Draws lambda by inverse CDF; consumes exactly three uniforms.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> KernelParams {
        let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let theta = self.theta_range.0 + u1 * (self.theta_range.1 - self.theta_range.0);
        let alpha = Self::beta22_quantile(u2);
        let (fl, fh) = (self.exp_cdf(self.delta_trunc.0), self.exp_cdf(self.delta_trunc.1));
        let p = fl + u3 * (fh - fl);
        let delta = -(1.0 - p).ln() / self.delta_gamma_rate;
        KernelParams::new(theta, alpha, delta.clamp(self.delta_trunc.0, self.delta_trunc.1))
    }

    /// Log density of the prior; -inf outside the open support.
    pub fn logpdf(&self, p: &KernelParams) -> f64 {
        if !self.in_support(p) {
            return f64::NEG_INFINITY;
        }
        let theta_term = -(self.theta_range.1 - self.theta_range.0).ln();
        let a = p.kernel_alpha;
        let alpha_term = (6.0 * a * (1.0 - a)).ln();
        let z = (self.exp_cdf(self.delta_trunc.1) - self.exp_cdf(self.delta_trunc.0))
            / self.delta_gamma_rate;
        let delta_term = -self.delta_gamma_rate * p.delta - z.ln();
        theta_term + alpha_term + delta_term
    }

    /// Per-coordinate supports, in parameter order.
    fn supports(&self) -> [(f64, f64); 3] {
        [self.theta_range, (0.0, 1.0), self.delta_trunc]
    }

    /// Maps lambda to unconstrained coordinates by a logit per coordinate.
    pub fn to_unbounded(&self, p: &KernelParams) -> Result<[f64; 3]> {
        if !self.in_support(p) {
            return Err(Error::OutsideSupport(format!("{p:?}")));
        }
        let s = self.supports();
        let vals = [p.theta, p.kernel_alpha, p.delta];
        let mut v = [0.0; 3];
        for i in 0..3 {
            let t = (vals[i] - s[i].0) / (s[i].1 - s[i].0);
            v[i] = (t / (1.0 - t)).ln();
        }
        Ok(v)
    }

    /// Inverse of [`to_unbounded`](Self::to_unbounded); total on R^3.
    pub fn from_unbounded(&self, v: &[f64; 3]) -> KernelParams {
        let s = self.supports();
        let mut vals = [0.0; 3];
        for i in 0..3 {
            let sig = 1.0 / (1.0 + (-v[i]).exp());
            vals[i] = s[i].0 + (s[i].1 - s[i].0) * sig;
        }
        KernelParams::new(vals[0], vals[1], vals[2])
    }

    /// log |d lambda / d v| of the logit map at unconstrained coordinates v.
    ///
    /// Random-walk proposals are symmetric in v, so the Metropolis ratio for
    /// a target density in lambda needs exactly this Jacobian correction.
    pub fn unbounded_log_jacobian(&self, v: &[f64; 3]) -> f64 {
        let s = self.supports();
        let mut acc = 0.0;
        for i in 0..3 {
            // log sigma(v) + log sigma(-v) = -softplus(-v) - softplus(v)
            let softplus = |x: f64| {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            };
            acc += (s[i].1 - s[i].0).ln() - softplus(v[i]) - softplus(-v[i]);
        }
        acc
    }
}
