//! Brute-force reference quadrature for stiffness entries.
//!
//! Deliberately independent of the production assembly: integrals stay in
//! (x, x') coordinates, accuracy comes from adaptive bisection with a plain
//! 8-point Gauss rule per panel, and the kernel singularity is removed by
//! the power substitution w = W t^(1/(1-alpha)) instead of matched
//! quadrature weights. Diagonal blocks are computed as raw product integral
//! minus the full collision field, not through the jump form the fast path
//! uses.

use nalgebra::DMatrix;
use nonlocal_uq::fem::Mesh;
use nonlocal_uq::kernel::{eval_f, F_BREAKS};
use nonlocal_uq::quad::gl;
use nonlocal_uq::{FVariant, KernelParams, Model};

const MAX_DEPTH: u32 = 32;

fn panel<const N: usize, F: Fn(f64) -> [f64; N]>(f: &F, a: f64, b: f64) -> [f64; N] {
    let rule = gl(8);
    let len = b - a;
    let mut out = [0.0; N];
    for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
        let vals = f(a + len * t);
        for n in 0..N {
            out[n] += w * len * vals[n];
        }
    }
    out
}

fn refine<const N: usize, F: Fn(f64) -> [f64; N]>(
    f: &F,
    a: f64,
    b: f64,
    whole: &[f64; N],
    tol: f64,
    depth: u32,
) -> [f64; N] {
    let m = 0.5 * (a + b);
    let left = panel(f, a, m);
    let right = panel(f, m, b);
    let mut fine = [0.0; N];
    let mut err = 0.0;
    for n in 0..N {
        fine[n] = left[n] + right[n];
        err += (fine[n] - whole[n]).abs();
    }
    if depth == 0 || err <= tol {
        return fine;
    }
    let l = refine(f, a, m, &left, 0.5 * tol, depth - 1);
    let r = refine(f, m, b, &right, 0.5 * tol, depth - 1);
    let mut out = [0.0; N];
    for n in 0..N {
        out[n] = l[n] + r[n];
    }
    out
}

pub fn adaptive<const N: usize, F: Fn(f64) -> [f64; N]>(f: &F, a: f64, b: f64, tol: f64) -> [f64; N] {
    if b <= a {
        return [0.0; N];
    }
    let whole = panel(f, a, b);
    refine(f, a, b, &whole, tol, MAX_DEPTH)
}

/// int_0^W w^-alpha g(w) dw via the substitution w = W t^p, p = 1/(1-alpha),
/// which maps the integral to p W^(1-alpha) int_0^1 g(W t^p) dt.
fn power_sub<const N: usize, G: Fn(f64) -> [f64; N]>(g: &G, w_top: f64, alpha: f64, tol: f64) -> [f64; N] {
    if w_top <= 0.0 {
        return [0.0; N];
    }
    let p = 1.0 / (1.0 - alpha);
    let scale = p * w_top.powf(1.0 - alpha);
    adaptive(
        &|t: f64| {
            let vals = g(w_top * t.powf(p));
            let mut out = [0.0; N];
            for n in 0..N {
                out[n] = scale * vals[n];
            }
            out
        },
        0.0,
        1.0,
        tol,
    )
}

/// int_{wlo}^{whi} w^-alpha g(w) dw, splitting at the listed interior
/// breakpoints; a piece touching zero goes through the power substitution.
fn singular_w<const N: usize, G: Fn(f64) -> [f64; N]>(
    wlo: f64,
    whi: f64,
    alpha: f64,
    breaks_w: &[f64],
    g: &G,
    tol: f64,
) -> [f64; N] {
    let mut out = [0.0; N];
    if whi <= wlo {
        return out;
    }
    let mut pts = vec![wlo, whi];
    for &c in breaks_w {
        if c > wlo + 1e-14 && c < whi - 1e-14 {
            pts.push(c);
        }
    }
    pts.sort_unstable_by(|a, b| a.total_cmp(b));
    let tol_piece = tol / (pts.len() - 1) as f64;
    for w in pts.windows(2) {
        let piece = if w[0] <= 0.0 {
            power_sub(g, w[1], alpha, tol_piece)
        } else {
            adaptive(
                &|r: f64| {
                    let vals = g(r);
                    let c = r.powf(-alpha);
                    let mut v = [0.0; N];
                    for n in 0..N {
                        v[n] = c * vals[n];
                    }
                    v
                },
                w[0],
                w[1],
                tol_piece,
            )
        };
        for n in 0..N {
            out[n] += piece[n];
        }
    }
    out
}

fn profile_breaks(variant: FVariant) -> &'static [f64] {
    match variant {
        FVariant::Constant(_) => &[],
        _ => &F_BREAKS,
    }
}

/// w values at which the profile argument x + sign w / 2 crosses a branch.
fn w_breaks(x: f64, sign: f64, variant: FVariant) -> Vec<f64> {
    profile_breaks(variant)
        .iter()
        .map(|&zb| 2.0 * sign * (zb - x))
        .collect()
}

#[inline]
fn xi(x: f64, e: (f64, f64)) -> f64 {
    (2.0 * x - e.0 - e.1) / (e.1 - e.0)
}

/// Product integrals of the local bases over an ordered disjoint pair,
/// entry 2a + b pairing phi_a on e1 with phi_b on e2.
pub fn pair_block(model: &Model, p: &KernelParams, e1: (f64, f64), e2: (f64, f64), tol: f64) -> [f64; 4] {
    assert!(e2.0 >= e1.1);
    let variant = model.f_variant;
    let (alpha, delta, theta) = (p.kernel_alpha, p.delta, p.theta);
    let outer = |x: f64| -> [f64; 4] {
        let lo = e2.0;
        let hi = e2.1.min(x + delta);
        if hi <= lo {
            return [0.0; 4];
        }
        let breaks = w_breaks(x, 1.0, variant);
        let inner = singular_w(
            lo - x,
            hi - x,
            alpha,
            &breaks,
            &|w: f64| {
                let xp = x + w;
                let f = eval_f(x + 0.5 * w, theta, variant);
                [f, f * xi(xp, e2)]
            },
            tol,
        );
        let pa = xi(x, e1);
        [inner[0], inner[1], pa * inner[0], pa * inner[1]]
    };
    let raw = adaptive(&outer, e1.0, e1.1, tol);
    raw.map(|v| v / (delta * delta))
}

/// Raw product integral of the local bases over an element against itself;
/// only converges for exponents below one.
pub fn same_block(model: &Model, p: &KernelParams, e: (f64, f64), tol: f64) -> [f64; 4] {
    assert!(p.kernel_alpha < 1.0);
    let variant = model.f_variant;
    let (alpha, delta, theta) = (p.kernel_alpha, p.delta, p.theta);
    let outer = |x: f64| -> [f64; 4] {
        // x' below x
        let top_l = (x - e.0).min(delta);
        let bl = w_breaks(x, -1.0, variant);
        let left = singular_w(
            0.0,
            top_l,
            alpha,
            &bl,
            &|w: f64| {
                let f = eval_f(x - 0.5 * w, theta, variant);
                [f, f * xi(x - w, e)]
            },
            tol,
        );
        // x' above x
        let top_r = (e.1 - x).min(delta);
        let br = w_breaks(x, 1.0, variant);
        let right = singular_w(
            0.0,
            top_r,
            alpha,
            &br,
            &|w: f64| {
                let f = eval_f(x + 0.5 * w, theta, variant);
                [f, f * xi(x + w, e)]
            },
            tol,
        );
        let i0 = left[0] + right[0];
        let i1 = left[1] + right[1];
        let pa = xi(x, e);
        [i0, i1, pa * i0, pa * i1]
    };
    let raw = adaptive(&outer, e.0, e.1, tol);
    raw.map(|v| v / (delta * delta))
}

/// Kernel mass around one point: the integral of the kernel over the whole
/// interaction ball, constrained zone included.
fn field(model: &Model, p: &KernelParams, x: f64, tol: f64) -> f64 {
    let variant = model.f_variant;
    let (alpha, delta, theta) = (p.kernel_alpha, p.delta, p.theta);
    let bl = w_breaks(x, -1.0, variant);
    let left = singular_w(
        0.0,
        delta,
        alpha,
        &bl,
        &|w: f64| [eval_f(x - 0.5 * w, theta, variant)],
        tol,
    );
    let br = w_breaks(x, 1.0, variant);
    let right = singular_w(
        0.0,
        delta,
        alpha,
        &br,
        &|w: f64| [eval_f(x + 0.5 * w, theta, variant)],
        tol,
    );
    (left[0] + right[0]) / (delta * delta)
}

/// Same-element stiffness block: raw product integral minus the collision
/// field weighted by the basis products.
pub fn diag_block(model: &Model, p: &KernelParams, e: (f64, f64), tol: f64) -> [f64; 4] {
    let product = same_block(model, p, e, tol);
    let mass = adaptive(
        &|x: f64| {
            let k = field(model, p, x, tol);
            let q = xi(x, e);
            [k, k * q, k * q, k * q * q]
        },
        e.0,
        e.1,
        tol,
    );
    let mut out = [0.0; 4];
    for n in 0..4 {
        out[n] = product[n] - mass[n];
    }
    out
}

/// Dense stiffness matrix assembled entirely through the reference path.
pub fn assemble(model: &Model, p: &KernelParams, level: usize, tol: f64) -> DMatrix<f64> {
    let mesh = Mesh::build(level, model.k, p.delta).unwrap();
    let n = mesh.n_elements;
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    for e1 in 0..n {
        let d = diag_block(model, p, mesh.element(e1), tol);
        for i in 0..2 {
            for j in 0..2 {
                a[(2 * e1 + i, 2 * e1 + j)] = d[2 * i + j];
            }
        }
        for e2 in e1 + 1..n {
            if (e2 - e1 - 1) as f64 * mesh.h >= p.delta {
                break;
            }
            let blk = pair_block(model, p, mesh.element(e1), mesh.element(e2), tol);
            for i in 0..2 {
                for j in 0..2 {
                    a[(2 * e1 + i, 2 * e2 + j)] = blk[2 * i + j];
                    a[(2 * e2 + j, 2 * e1 + i)] = blk[2 * i + j];
                }
            }
        }
    }
    a
}
