//! Discontinuous Galerkin discretization of the volume-constrained nonlocal
//! operator on the unit interval.
//!
//! The mesh splits [0, 1] into 2^(k + level) equal elements and the trial
//! space is piecewise linear with no continuity across nodes. On element
//! [a, a + h] the local basis is the constant 1 and xi(x) = 2(x - m)/h with
//! m the midpoint, which is L2-orthogonal with moments h and h/3.
//!
//! Every stiffness entry reduces, after substituting r = |x' - x|, to an
//! integral of the form
//!
//! ```text
//!   int r^-alpha g(r) dr
//! ```
//!
//! where g collects the inner x-integral of basis products against the
//! constitutive profile. g is piecewise polynomial in r with breakpoints at
//! window kinks and profile-branch crossings, so the integral is computed
//! exactly (up to rounding) panel by panel: the panel touching r = 0 uses a
//! Gauss rule with weight r^(v - alpha), where v is the vanishing order of g
//! at zero, and the remaining panels are split geometrically and handled by
//! ordinary Gauss-Legendre.
//!
//! Diagonal blocks combine the jump form of the operator with the collision
//! field of each element's neighborhood, which keeps them finite for any
//! singularity exponent below 2 even though the raw product integral only
//! converges below 1.

mod band;

pub use band::{BandCholesky, BandMatrix};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::kernel::{eval_f, FVariant, KernelParams, F_BREAKS};
use crate::model::{Model, SolverKind};
use crate::quad::{gl, GaussRule};

/// Relative residual above which a solve is considered failed.
const RESIDUAL_TOL: f64 = 1e-10;

/// Point whose solution value is the quantity of interest.
pub const QOI_LOCATION: f64 = 0.5;

/// Uniform mesh of the unit interval at one hierarchy level.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub level: usize,
    pub k: u32,
    /// Element width 2^-(k + level).
    pub h: f64,
    pub n_elements: usize,
    /// Interaction horizon; the constrained zone extends this far past 0 and 1.
    pub horizon: f64,
}

impl Mesh {
    /// Builds the level mesh, rejecting resolutions the horizon cannot see
    /// across (h must be strictly below delta).
    pub fn build(level: usize, k: u32, delta: f64) -> Result<Mesh> {
        let depth = k as usize + level;
        assert!(depth <= 26, "mesh depth {depth} would overflow memory");
        let h = 0.5f64.powi(depth as i32);
        if h >= delta {
            return Err(Error::HorizonViolation { delta, h, level });
        }
        Ok(Mesh {
            level,
            k,
            h,
            n_elements: 1usize << depth,
            horizon: delta,
        })
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    #[inline]
    pub fn element(&self, e: usize) -> (f64, f64) {
        (self.node(e), self.node(e + 1))
    }

    pub fn n_dofs(&self) -> usize {
        2 * self.n_elements
    }
}

/// Kernel parameters bundled with the quadrature rules matched to the
/// singularity exponent. Built once per parameter draw and shared across
/// all element integrals of one assembly.
pub struct KernelEval {
    pub params: KernelParams,
    pub variant: FVariant,
    /// Weight r^(1 - alpha): touching pairs and collision integrals.
    rule_edge: GaussRule,
    /// Weight r^(2 - alpha): same-element jump integral.
    rule_jump: GaussRule,
    /// Weight r^-alpha: same-element product integral; diverges above 1.
    rule_same: Option<GaussRule>,
    outer: &'static GaussRule,
    inner: &'static GaussRule,
}

impl KernelEval {
    pub fn new(params: &KernelParams, variant: FVariant, quad_points: usize) -> Result<Self> {
        let alpha = params.kernel_alpha;
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(Error::OutsideSupport(format!(
                "singularity exponent {alpha} outside (0, 2)"
            )));
        }
        if !(params.delta > 0.0) || !params.theta.is_finite() {
            return Err(Error::OutsideSupport(format!(
                "invalid kernel parameters delta={} theta={}",
                params.delta, params.theta
            )));
        }
        let rule_same = if alpha < 1.0 {
            Some(GaussRule::power_weighted(quad_points, -alpha))
        } else {
            None
        };
        Ok(KernelEval {
            params: *params,
            variant,
            rule_edge: GaussRule::power_weighted(quad_points, 1.0 - alpha),
            rule_jump: GaussRule::power_weighted(quad_points, 2.0 - alpha),
            rule_same,
            outer: gl(8),
            inner: gl(4),
        })
    }

    /// Profile branch boundaries relevant to this variant.
    fn breaks(&self) -> &'static [f64] {
        match self.variant {
            FVariant::Constant(_) => &[],
            _ => &F_BREAKS,
        }
    }
}

/// Splits [xlo, xhi] at the points where the profile argument x + shift
/// crosses a branch boundary. Returns sorted cut points including the ends.
#[inline]
fn branch_cuts(xlo: f64, xhi: f64, shift: f64, breaks: &[f64]) -> ([f64; 4], usize) {
    let mut cuts = [xlo, xhi, 0.0, 0.0];
    let mut n = 2;
    let margin = 1e-12 * (xhi - xlo);
    for &zb in breaks {
        let c = zb - shift;
        if c > xlo + margin && c < xhi - margin {
            cuts[n] = c;
            n += 1;
        }
    }
    cuts[..n].sort_unstable_by(|a, b| a.total_cmp(b));
    (cuts, n)
}

/// Integrates r^-alpha g(r) over [lo, hi], where g is piecewise polynomial
/// with breakpoints among `candidates` and vanishes to order `vanish` at
/// r = 0. The panel touching zero uses `rule0`, whose weight must be
/// r^(vanish - alpha); panels away from zero are split geometrically so
/// plain Gauss-Legendre resolves the r^-alpha factor to rounding accuracy.
fn singular_panels<const N: usize>(
    lo: f64,
    hi: f64,
    candidates: &[f64],
    alpha: f64,
    vanish: i32,
    rule0: &GaussRule,
    outer: &GaussRule,
    mut g: impl FnMut(f64) -> [f64; N],
) -> [f64; N] {
    let mut out = [0.0f64; N];
    if !(hi > lo) {
        return out;
    }
    let tol = 1e-12 * hi;
    let mut pts = Vec::with_capacity(candidates.len() + 2);
    pts.push(lo);
    for &c in candidates {
        if c > lo + tol && c < hi - tol {
            pts.push(c);
        }
    }
    pts.push(hi);
    pts.sort_unstable_by(|a, b| a.total_cmp(b));
    pts.dedup_by(|a, b| (*a - *b).abs() <= tol);
    for w in pts.windows(2) {
        let (p, q) = (w[0], w[1]);
        if p == 0.0 {
            // weighted rule on [0, q]: int r^(v-a) (g/r^v) dr
            let scale = q.powf(1.0 + vanish as f64 - alpha);
            for (&t, &wt) in rule0.nodes.iter().zip(&rule0.weights) {
                let r = q * t;
                let vals = g(r);
                let c = wt * scale / r.powi(vanish);
                for n in 0..N {
                    out[n] += c * vals[n];
                }
            }
        } else {
            let mut a = p;
            while a < q {
                let b = if 2.0 * a < q { 2.0 * a } else { q };
                let len = b - a;
                for (&t, &wt) in outer.nodes.iter().zip(&outer.weights) {
                    let r = a + len * t;
                    let c = wt * len * r.powf(-alpha);
                    let vals = g(r);
                    for n in 0..N {
                        out[n] += c * vals[n];
                    }
                }
                a = b;
            }
        }
    }
    out
}

/// Product integrals of both local bases over an ordered disjoint element
/// pair (i left of j, touching allowed). Entry 2a + b holds the integral of
/// phi_a on i times phi_b on j against the kernel.
fn pair_block(ke: &KernelEval, i: (f64, f64), j: (f64, f64)) -> [f64; 4] {
    let (a1, b1) = i;
    let (a2, b2) = j;
    debug_assert!(a2 >= b1);
    let delta = ke.params.delta;
    let lo = a2 - b1;
    let hi = (b2 - a1).min(delta);
    if hi <= lo {
        return [0.0; 4];
    }
    let (h1, h2) = (b1 - a1, b2 - a2);
    let (m1, m2) = (0.5 * (a1 + b1), 0.5 * (a2 + b2));
    let breaks = ke.breaks();
    let mut cand = vec![a2 - a1, b2 - b1];
    for &zb in breaks {
        cand.push(2.0 * (zb - a1));
        cand.push(2.0 * (zb - b1));
        cand.push(2.0 * (a2 - zb));
        cand.push(2.0 * (b2 - zb));
    }
    let (theta, variant) = (ke.params.theta, ke.variant);
    let inner = ke.inner;
    let g = |r: f64| -> [f64; 4] {
        let xlo = a1.max(a2 - r);
        let xhi = b1.min(b2 - r);
        let mut acc = [0.0f64; 4];
        if xhi <= xlo {
            return acc;
        }
        let (cuts, nc) = branch_cuts(xlo, xhi, 0.5 * r, breaks);
        for s in 0..nc - 1 {
            let (u, v) = (cuts[s], cuts[s + 1]);
            let len = v - u;
            for (&t, &wt) in inner.nodes.iter().zip(&inner.weights) {
                let x = u + len * t;
                let fz = eval_f(x + 0.5 * r, theta, variant);
                let qa = 2.0 * (x - m1) / h1;
                let qb = 2.0 * (x + r - m2) / h2;
                let c = wt * len * fz;
                acc[0] += c;
                acc[1] += c * qb;
                acc[2] += c * qa;
                acc[3] += c * qa * qb;
            }
        }
        acc
    };
    let raw = singular_panels(
        lo,
        hi,
        &cand,
        ke.params.kernel_alpha,
        1,
        &ke.rule_edge,
        ke.outer,
        g,
    );
    raw.map(|v| v / (delta * delta))
}

/// Full product integral of both bases over an element with itself. Only
/// converges for exponents below 1; assembly never needs it because the
/// diagonal uses the jump form, but it is the honest definition of the
/// same-element pair integral.
fn same_block_full(ke: &KernelEval, elem: (f64, f64)) -> Result<[f64; 4]> {
    let rule0 = ke.rule_same.as_ref().ok_or_else(|| {
        Error::OutsideSupport(format!(
            "same-element product integral diverges for exponent {} >= 1",
            ke.params.kernel_alpha
        ))
    })?;
    let (a, b) = elem;
    let h = b - a;
    let m = 0.5 * (a + b);
    let breaks = ke.breaks();
    let mut cand = Vec::new();
    for &zb in breaks {
        cand.push(2.0 * (zb - a));
        cand.push(2.0 * (b - zb));
    }
    let (theta, variant) = (ke.params.theta, ke.variant);
    let inner = ke.inner;
    let g = |r: f64| -> [f64; 4] {
        let xhi = b - r;
        let mut acc = [0.0f64; 4];
        if xhi <= a {
            return acc;
        }
        let (cuts, nc) = branch_cuts(a, xhi, 0.5 * r, breaks);
        for s in 0..nc - 1 {
            let (u, v) = (cuts[s], cuts[s + 1]);
            let len = v - u;
            for (&t, &wt) in inner.nodes.iter().zip(&inner.weights) {
                let x = u + len * t;
                let fz = eval_f(x + 0.5 * r, theta, variant);
                let q1 = 2.0 * (x - m) / h;
                let q2 = 2.0 * (x + r - m) / h;
                let c = wt * len * fz;
                acc[0] += 2.0 * c;
                acc[1] += c * (q1 + q2);
                acc[3] += 2.0 * c * q1 * q2;
            }
        }
        acc[2] = acc[1];
        acc
    };
    let delta = ke.params.delta;
    let raw = singular_panels(
        0.0,
        h.min(delta),
        &cand,
        ke.params.kernel_alpha,
        0,
        rule0,
        ke.outer,
        g,
    );
    Ok(raw.map(|v| v / (delta * delta)))
}

/// Jump part of the same-element diagonal block. Pairing phi_a(x) with the
/// difference phi_b(x') - phi_b(x) kills every entry except (1, 1), which
/// symmetrizes to a weight r^(2 - alpha) integral; this stays finite for
/// every exponent below 2.
fn jump_11(ke: &KernelEval, elem: (f64, f64)) -> f64 {
    let (a, b) = elem;
    let h = b - a;
    let breaks = ke.breaks();
    let mut cand = Vec::new();
    for &zb in breaks {
        cand.push(2.0 * (zb - a));
        cand.push(2.0 * (b - zb));
    }
    let (theta, variant) = (ke.params.theta, ke.variant);
    let inner = ke.inner;
    let g = |r: f64| -> [f64; 1] {
        let xhi = b - r;
        if xhi <= a {
            return [0.0];
        }
        let (cuts, nc) = branch_cuts(a, xhi, 0.5 * r, breaks);
        let mut fbar = 0.0;
        for s in 0..nc - 1 {
            let (u, v) = (cuts[s], cuts[s + 1]);
            let len = v - u;
            for (&t, &wt) in inner.nodes.iter().zip(&inner.weights) {
                let x = u + len * t;
                fbar += wt * len * eval_f(x + 0.5 * r, theta, variant);
            }
        }
        [-4.0 / (h * h) * r * r * fbar]
    };
    let delta = ke.params.delta;
    let raw = singular_panels(
        0.0,
        h.min(delta),
        &cand,
        ke.params.kernel_alpha,
        2,
        &ke.rule_jump,
        ke.outer,
        g,
    );
    raw[0] / (delta * delta)
}

/// Collision field of one element: the integral of phi_a phi_b (x) times the
/// kernel mass over all x' outside the element but within the horizon, on
/// both sides. Entries are (0,0), (0,1) and (1,1); (1,0) equals (0,1).
fn collision_block(ke: &KernelEval, elem: (f64, f64)) -> [f64; 3] {
    let (a, b) = elem;
    let h = b - a;
    let m = 0.5 * (a + b);
    let breaks = ke.breaks();
    let mut cand = vec![h];
    for &zb in breaks {
        cand.push(2.0 * (zb - a));
        cand.push(2.0 * (a - zb));
        cand.push(2.0 * (zb - b));
        cand.push(2.0 * (b - zb));
    }
    let (theta, variant) = (ke.params.theta, ke.variant);
    let inner = ke.inner;
    let delta = ke.params.delta;
    let g = |r: f64| -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        // neighbors to the left: x' = x - r with x close enough to the start
        let xhi = b.min(a + r);
        if xhi > a {
            let (cuts, nc) = branch_cuts(a, xhi, -0.5 * r, breaks);
            for s in 0..nc - 1 {
                let (u, v) = (cuts[s], cuts[s + 1]);
                let len = v - u;
                for (&t, &wt) in inner.nodes.iter().zip(&inner.weights) {
                    let x = u + len * t;
                    let fz = eval_f(x - 0.5 * r, theta, variant);
                    let q = 2.0 * (x - m) / h;
                    let c = wt * len * fz;
                    acc[0] += c;
                    acc[1] += c * q;
                    acc[2] += c * q * q;
                }
            }
        }
        // neighbors to the right: x' = x + r with x close enough to the end
        let xlo = a.max(b - r);
        if b > xlo {
            let (cuts, nc) = branch_cuts(xlo, b, 0.5 * r, breaks);
            for s in 0..nc - 1 {
                let (u, v) = (cuts[s], cuts[s + 1]);
                let len = v - u;
                for (&t, &wt) in inner.nodes.iter().zip(&inner.weights) {
                    let x = u + len * t;
                    let fz = eval_f(x + 0.5 * r, theta, variant);
                    let q = 2.0 * (x - m) / h;
                    let c = wt * len * fz;
                    acc[0] += c;
                    acc[1] += c * q;
                    acc[2] += c * q * q;
                }
            }
        }
        acc
    };
    let raw = singular_panels(
        0.0,
        delta,
        &cand,
        ke.params.kernel_alpha,
        1,
        &ke.rule_edge,
        ke.outer,
        g,
    );
    raw.map(|v| v / (delta * delta))
}

/// Same-element 2x2 stiffness block: jump form minus the off-element
/// collision field, stored as [d00, d01, d10, d11].
fn diag_block(ke: &KernelEval, elem: (f64, f64)) -> [f64; 4] {
    let jump = jump_11(ke, elem);
    let coll = collision_block(ke, elem);
    [-coll[0], -coll[1], -coll[1], jump - coll[2]]
}

/// Stiffness entry for one basis pair. `a` and `b` pick the local basis
/// (0 constant, 1 linear) on elements `elem_i` and `elem_j`. The identical
/// element case is the raw product integral, which requires an exponent
/// below 1.
pub fn pair_integral(
    model: &Model,
    params: &KernelParams,
    level: usize,
    elem_i: usize,
    elem_j: usize,
    a: usize,
    b: usize,
) -> Result<f64> {
    assert!(a < 2 && b < 2, "local basis index out of range");
    let mesh = Mesh::build(level, model.k, params.delta)?;
    let n = mesh.n_elements;
    if elem_i >= n || elem_j >= n {
        return Err(Error::DimensionMismatch {
            got: elem_i.max(elem_j),
            expected: n,
        });
    }
    let ke = KernelEval::new(params, model.f_variant, model.quad_points)?;
    if elem_i == elem_j {
        Ok(same_block_full(&ke, mesh.element(elem_i))?[2 * a + b])
    } else if elem_i < elem_j {
        Ok(pair_block(&ke, mesh.element(elem_i), mesh.element(elem_j))[2 * a + b])
    } else {
        Ok(pair_block(&ke, mesh.element(elem_j), mesh.element(elem_i))[2 * b + a])
    }
}

/// Assembled discrete system A u = F. A applies the nonlocal operator, so
/// it is symmetric negative definite; solvers negate it.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    pub mesh: Mesh,
    pub matrix: BandMatrix,
    pub rhs: Vec<f64>,
    pub params: KernelParams,
}

/// Assembles the stiffness matrix and load vector at one level.
pub fn assemble(model: &Model, params: &KernelParams, level: usize) -> Result<AssembledSystem> {
    let mesh = Mesh::build(level, model.k, params.delta)?;
    let ke = KernelEval::new(params, model.f_variant, model.quad_points)?;
    let n = mesh.n_elements;
    let m = 2 * n;
    let h = mesh.h;
    let delta = params.delta;
    // elements with gap (dist - 1) h >= delta cannot interact
    let elem_band = ((delta / h).floor() as usize + 1).min(n - 1);
    let hbw = (2 * elem_band + 1).min(m - 1);
    let mut matrix = BandMatrix::zeros(m, hbw);
    for e1 in 0..n {
        let el1 = mesh.element(e1);
        let d = diag_block(&ke, el1);
        matrix.set(2 * e1, 2 * e1, d[0]);
        matrix.set(2 * e1 + 1, 2 * e1, d[2]);
        matrix.set(2 * e1 + 1, 2 * e1 + 1, d[3]);
        let e2_max = (e1 + elem_band).min(n - 1);
        for e2 in e1 + 1..=e2_max {
            if (e2 - e1 - 1) as f64 * h >= delta {
                break;
            }
            let blk = pair_block(&ke, el1, mesh.element(e2));
            for a in 0..2 {
                for b in 0..2 {
                    matrix.set(2 * e2 + b, 2 * e1 + a, blk[2 * a + b]);
                }
            }
        }
    }
    let mut rhs = vec![0.0; m];
    for e in 0..n {
        rhs[2 * e] = model.forcing * h;
    }
    Ok(AssembledSystem {
        mesh,
        matrix,
        rhs,
        params: *params,
    })
}

/// Discrete solution field with its modeled solve cost.
#[derive(Debug, Clone)]
pub struct SolutionField {
    pub level: usize,
    pub h: f64,
    pub n_elements: usize,
    /// Constant and slope coefficient per element, interleaved.
    pub coeffs: Vec<f64>,
    pub cost: f64,
}

impl SolutionField {
    /// Point value of the field. Inside an element this is the local linear
    /// function; at a mesh node it is the average of the two one-sided
    /// limits, with sides in the constrained zone contributing zero; outside
    /// the unit interval the constraint makes it zero.
    pub fn evaluate(&self, x: f64) -> f64 {
        if !(0.0..=1.0).contains(&x) {
            return 0.0;
        }
        let t = x / self.h;
        let nearest = t.round();
        if (t - nearest).abs() < 1e-9 {
            let i = nearest as usize;
            let left = if i >= 1 { self.side(i - 1, 1.0) } else { 0.0 };
            let right = if i < self.n_elements {
                self.side(i, -1.0)
            } else {
                0.0
            };
            return 0.5 * (left + right);
        }
        let e = (t.floor() as usize).min(self.n_elements - 1);
        let xi = 2.0 * (t - e as f64) - 1.0;
        self.side(e, xi)
    }

    #[inline]
    fn side(&self, e: usize, xi: f64) -> f64 {
        self.coeffs[2 * e] + self.coeffs[2 * e + 1] * xi
    }

    pub fn observe(&self, locations: &[f64]) -> Vec<f64> {
        locations.iter().map(|&x| self.evaluate(x)).collect()
    }

    /// L2 norm over the unit interval, exact for the piecewise-linear field.
    pub fn l2_norm(&self) -> f64 {
        let mut s = 0.0;
        for e in 0..self.n_elements {
            let c0 = self.coeffs[2 * e];
            let c1 = self.coeffs[2 * e + 1];
            s += self.h * (c0 * c0 + c1 * c1 / 3.0);
        }
        s.sqrt()
    }
}

/// Solves the assembled system and checks the residual against the
/// assembled operator. The banded path factorizes the negated matrix by
/// Cholesky; the dense path is an independent LU kept for cross-checks.
pub fn solve(model: &Model, sys: &AssembledSystem) -> Result<SolutionField> {
    let coeffs = match model.solver {
        SolverKind::Banded => {
            let neg_rhs: Vec<f64> = sys.rhs.iter().map(|v| -v).collect();
            sys.matrix.negated().cholesky()?.solve(&neg_rhs)
        }
        SolverKind::Dense => {
            let a = sys.matrix.to_dense();
            let f = DVector::from_column_slice(&sys.rhs);
            let x = a
                .lu()
                .solve(&f)
                .ok_or(Error::NotCoercive { row: 0, pivot: 0.0 })?;
            x.as_slice().to_vec()
        }
    };
    let ax = sys.matrix.sym_matvec(&coeffs);
    let mut r2 = 0.0;
    let mut f2 = 0.0;
    for i in 0..coeffs.len() {
        let d = ax[i] - sys.rhs[i];
        r2 += d * d;
        f2 += sys.rhs[i] * sys.rhs[i];
    }
    let rel = (r2 / f2).sqrt();
    if !rel.is_finite() || rel > RESIDUAL_TOL {
        return Err(Error::ResidualTooLarge {
            residual: rel,
            tol: RESIDUAL_TOL,
        });
    }
    Ok(SolutionField {
        level: sys.mesh.level,
        h: sys.mesh.h,
        n_elements: sys.mesh.n_elements,
        coeffs,
        cost: model.level_cost(sys.mesh.level),
    })
}

/// One forward map evaluation: assemble, solve, read off the quantity of
/// interest and the observation values.
pub fn forward(model: &Model, params: &KernelParams, level: usize) -> Result<crate::model::ForwardOutput> {
    let sys = assemble(model, params, level)?;
    let sol = solve(model, &sys)?;
    Ok(crate::model::ForwardOutput {
        qoi: sol.evaluate(QOI_LOCATION),
        obs: sol.observe(&model.obs_locations),
        cost: sol.cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn flat_model(c: f64) -> Model {
        Model {
            f_variant: FVariant::Constant(c),
            ..Model::default()
        }
    }

    fn params(theta: f64, alpha: f64, delta: f64) -> KernelParams {
        KernelParams::new(theta, alpha, delta)
    }

    #[test]
    fn mesh_geometry() {
        let mesh = Mesh::build(0, 3, 0.2).unwrap();
        assert_eq!(mesh.n_elements, 8);
        assert_eq!(mesh.h, 0.125);
        assert_eq!(mesh.node(4), 0.5);
        assert_eq!(mesh.element(7), (0.875, 1.0));
        assert_eq!(mesh.n_dofs(), 16);
        let fine = Mesh::build(3, 3, 0.2).unwrap();
        assert_eq!(fine.n_elements, 64);
    }

    #[test]
    fn mesh_rejects_wide_elements() {
        // h = 0.125 at level 0; the horizon must exceed it strictly
        assert!(matches!(
            Mesh::build(0, 3, 0.1),
            Err(Error::HorizonViolation { .. })
        ));
        assert!(matches!(
            Mesh::build(0, 3, 0.125),
            Err(Error::HorizonViolation { .. })
        ));
        assert!(Mesh::build(1, 3, 0.1).is_ok());
    }

    #[test]
    fn identical_element_constant_profile_closed_form() {
        // int int |x-x'|^-alpha c / d^2 over a square of side h equals
        // 2 c h^(2-alpha) / (d^2 (1-alpha)(2-alpha))
        let c = 1.3;
        let model = flat_model(c);
        for &alpha in &[0.1, 0.5, 0.9] {
            let p = params(1.5, alpha, 0.2);
            let got = pair_integral(&model, &p, 0, 2, 2, 0, 0).unwrap();
            let h: f64 = 0.125;
            let want = 2.0 * c * h.powf(2.0 - alpha)
                / (0.2f64.powi(2) * (1.0 - alpha) * (2.0 - alpha));
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn identical_element_diverging_exponent_rejected() {
        let model = flat_model(1.0);
        let p = params(1.5, 1.2, 0.3);
        assert!(matches!(
            pair_integral(&model, &p, 0, 2, 2, 0, 0),
            Err(Error::OutsideSupport(_))
        ));
        // off-diagonal pairs stay fine above 1
        assert!(pair_integral(&model, &p, 0, 2, 3, 0, 0).is_ok());
    }

    #[test]
    fn touching_elements_constant_profile_closed_form() {
        // overlap length is r below h and 2h - r above, up to min(2h, delta)
        let c = 1.0;
        let model = flat_model(c);
        for &(alpha, delta) in &[(0.7, 0.3), (0.7, 0.15), (1.5, 0.3)] {
            let p = params(1.5, alpha, delta);
            let got = pair_integral(&model, &p, 0, 2, 3, 0, 0).unwrap();
            let h: f64 = 0.125;
            let top = delta.min(2.0 * h);
            let i1 = h.powf(2.0 - alpha) / (2.0 - alpha);
            let i2 = 2.0 * h * (top.powf(1.0 - alpha) - h.powf(1.0 - alpha)) / (1.0 - alpha)
                - (top.powf(2.0 - alpha) - h.powf(2.0 - alpha)) / (2.0 - alpha);
            let want = c * (i1 + i2) / (delta * delta);
            assert_relative_eq!(got, want, max_relative = 1e-11);
        }
    }

    #[test]
    fn pair_integral_symmetric_in_arguments() {
        let model = Model::default();
        let p = params(1.3, 0.6, 0.4);
        for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let ij = pair_integral(&model, &p, 0, 1, 4, a, b).unwrap();
            let ji = pair_integral(&model, &p, 0, 4, 1, b, a).unwrap();
            assert_abs_diff_eq!(ij, ji, epsilon = 1e-15);
        }
    }

    #[test]
    fn separated_elements_beyond_horizon_vanish() {
        let model = Model::default();
        let p = params(1.5, 0.5, 0.2);
        // gap between elements 0 and 3 is 2 h = 0.25 >= delta
        let v = pair_integral(&model, &p, 0, 0, 3, 0, 0).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn jump_term_constant_profile_closed_form() {
        // -(4 c / h^2 d^2) int_0^h r^(2-a) (h - r) dr
        let c = 2.1;
        let h: f64 = 0.125;
        for &alpha in &[0.3, 0.9, 1.5] {
            let p = params(1.5, alpha, 0.4);
            let ke = KernelEval::new(&p, FVariant::Constant(c), 8).unwrap();
            let got = jump_11(&ke, (0.25, 0.375));
            let want = -4.0 * c * h.powf(2.0 - alpha)
                / (0.4f64.powi(2) * (3.0 - alpha) * (4.0 - alpha));
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn collision_constant_profile_closed_form() {
        // each side contributes (c/d^2) int_0^d r^-a min(r, h) dr
        let c = 1.7;
        let h: f64 = 0.125;
        let delta = 0.4;
        for &alpha in &[0.3, 0.9, 1.5] {
            let p = params(1.5, alpha, delta);
            let ke = KernelEval::new(&p, FVariant::Constant(c), 8).unwrap();
            let got = collision_block(&ke, (0.5, 0.625));
            let one_side = c / (delta * delta)
                * (h.powf(2.0 - alpha) / (2.0 - alpha)
                    + h * (delta.powf(1.0 - alpha) - h.powf(1.0 - alpha)) / (1.0 - alpha));
            assert_relative_eq!(got[0], 2.0 * one_side, max_relative = 1e-11);
            // odd basis against the symmetric window integrates to zero
            assert_abs_diff_eq!(got[1], 0.0, epsilon = 1e-13 * got[0].abs());
        }
    }

    #[test]
    fn kernel_eval_rejects_bad_exponents() {
        assert!(KernelEval::new(&params(1.5, 0.0, 0.2), FVariant::Literal, 8).is_err());
        assert!(KernelEval::new(&params(1.5, 2.0, 0.2), FVariant::Literal, 8).is_err());
        assert!(KernelEval::new(&params(1.5, 1.99, 0.2), FVariant::Literal, 8).is_ok());
    }

    #[test]
    fn assembled_matrix_is_symmetric_and_negative_definite() {
        let model = Model::default();
        let sys = assemble(&model, &params(1.5, 0.5, 0.3), 0).unwrap();
        let dense = sys.matrix.to_dense();
        let scale = dense.amax();
        for i in 0..dense.nrows() {
            for j in 0..dense.ncols() {
                assert_abs_diff_eq!(dense[(i, j)], dense[(j, i)], epsilon = 1e-13 * scale);
            }
        }
        let eig = dense.symmetric_eigen();
        for &ev in eig.eigenvalues.iter() {
            assert!(ev < 0.0, "stiffness eigenvalue {ev} not negative");
        }
    }

    #[test]
    fn stored_band_entries_vanish_past_horizon() {
        // delta / h integer: the outermost stored element block must be zero
        let model = Model::default();
        let sys = assemble(&model, &params(1.5, 0.5, 0.25), 0).unwrap();
        let dense = sys.matrix.to_dense();
        // elements 0 and 3: gap 2 h = delta, no interaction
        for a in 0..2 {
            for b in 0..2 {
                assert_eq!(dense[(a, 6 + b)], 0.0);
            }
        }
        // elements 0 and 2 interact
        assert!(dense[(0, 4)] > 0.0);
    }

    #[test]
    fn load_vector_hits_constant_modes_only() {
        let model = Model::default();
        let sys = assemble(&model, &params(1.5, 0.5, 0.2), 0).unwrap();
        for e in 0..sys.mesh.n_elements {
            assert_abs_diff_eq!(sys.rhs[2 * e], 5.0 * 0.125, epsilon = 1e-15);
            assert_eq!(sys.rhs[2 * e + 1], 0.0);
        }
    }

    #[test]
    fn solution_is_negative_with_plausible_magnitude() {
        let model = Model::default();
        let sys = assemble(&model, &params(1.5, 0.5, 0.2), 0).unwrap();
        let sol = solve(&model, &sys).unwrap();
        for e in 0..sol.n_elements {
            assert!(sol.coeffs[2 * e] < 0.0, "cell average not negative");
        }
        let q = sol.evaluate(QOI_LOCATION);
        assert!(q < -0.5 && q > -8.0, "midpoint value {q} out of range");
        assert!(sol.evaluate(0.5) < sol.evaluate(0.0625).min(sol.evaluate(0.9375)));
    }

    #[test]
    fn banded_and_dense_solvers_agree() {
        let banded = Model::default();
        let dense = Model {
            solver: SolverKind::Dense,
            ..Model::default()
        };
        let p = params(1.8, 0.7, 0.35);
        let sys = assemble(&banded, &p, 1).unwrap();
        let ub = solve(&banded, &sys).unwrap();
        let ud = solve(&dense, &sys).unwrap();
        for (x, y) in ub.coeffs.iter().zip(&ud.coeffs) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn consecutive_levels_converge_towards_each_other() {
        let model = Model::default();
        let p = params(2.0, 0.5, 0.2);
        let q: Vec<f64> = (0..3)
            .map(|l| forward(&model, &p, l).unwrap().qoi)
            .collect();
        let d0 = (q[1] - q[0]).abs();
        let d1 = (q[2] - q[1]).abs();
        assert!(d0 > 0.0 && d1 > 0.0);
        assert!(d1 < d0, "level differences not shrinking: {d0} vs {d1}");
        assert!(d0 < 0.2 * q[0].abs());
    }

    #[test]
    fn evaluate_reproduces_linear_field() {
        // coefficients representing u(x) = x exactly
        let h = 0.125;
        let n = 8;
        let coeffs: Vec<f64> = (0..n)
            .flat_map(|e| [h * (e as f64 + 0.5), 0.5 * h])
            .collect();
        let sol = SolutionField {
            level: 0,
            h,
            n_elements: n,
            coeffs,
            cost: 0.0,
        };
        assert_abs_diff_eq!(sol.evaluate(0.3), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.evaluate(0.25), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.evaluate(0.5), 0.5, epsilon = 1e-15);
        // constrained sides average against zero at the ends
        assert_abs_diff_eq!(sol.evaluate(0.0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.evaluate(1.0), 0.5, epsilon = 1e-15);
        assert_eq!(sol.evaluate(1.25), 0.0);
        assert_eq!(sol.evaluate(-0.1), 0.0);
        let obs = sol.observe(&[0.25, 0.75]);
        assert_abs_diff_eq!(obs[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(obs[1], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.l2_norm(), (1.0f64 / 3.0).sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn forward_reports_modeled_cost() {
        let model = Model::default();
        let p = params(1.5, 0.5, 0.2);
        let out = forward(&model, &p, 0).unwrap();
        assert_eq!(out.cost, 512.0);
        assert_eq!(out.obs.len(), 2);
        let out1 = forward(&model, &p, 1).unwrap();
        assert_eq!(out1.cost, 4096.0);
    }

    #[test]
    fn forward_respects_horizon_constraint() {
        let model = Model::default();
        let p = params(1.5, 0.5, 0.1);
        assert!(matches!(
            forward(&model, &p, 0),
            Err(Error::HorizonViolation { .. })
        ));
        assert!(forward(&model, &p, 1).is_ok());
    }
}
