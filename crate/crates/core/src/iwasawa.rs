//! NAK factorisation `g = n a k` of frames in `SO(1,m)` (rank one) and
//! `SO(2,d)` (rank two), the coordinate processes read off it, and an
//! incremental walker that propagates the factors along a path without ever
//! forming the exponentially large `g`.
//!
//! All three factors are triangular in a light-cone basis `P`: ordering the
//! basis by decreasing weight of `A`, the product `n a` is lower triangular and
//! `k` is orthogonal, so `P^T g P = L Q` is an LQ factorisation.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::boundary_stats::{cauchy_tail, ols, TailMetric};
use crate::error::{Error, Result};
use crate::frame_flow::{
    generator_basis, step_generator, FrameElement, GeneratorBasis, GroupTag, Theta, EXP_LIMIT, REORTH_CADENCE,
};
use crate::linalg::{eij, expm, expm_checked, q_gram_schmidt, signature};
use crate::rng::{NoiseKey, StreamRole};

/// Recomposition tolerance, relative to `max(1, |g|)^2`.
pub const RECOMPOSE_TOL: f64 = 1e-9;
/// Newton iteration limits.
pub const NEWTON_MAX_ITER: usize = 50;
pub const NEWTON_TOL: f64 = 1e-12;

fn rank(group: GroupTag) -> Result<usize> {
    match group {
        GroupTag::So1dPlus1 | GroupTag::So1d => Ok(1),
        GroupTag::So2d => Ok(2),
        GroupTag::SoDPlus1 => Err(Error::UnsupportedGroup(format!("{group} has no NAK factorisation"))),
    }
}

/// Columns: light-cone basis ordered by decreasing `A`-weight.
///
/// Rank one: `(e0+e1)/√2, e2, .., (e0-e1)/√2`.
/// Rank two: `(e0+e2)/√2, (e1+e3)/√2, e4, .., (e1-e3)/√2, (e0-e2)/√2`.
pub fn light_cone_basis(group: GroupTag, d: usize) -> Result<DMatrix<f64>> {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let n = group.matrix_dim(d);
    let mut p = DMatrix::zeros(n, n);
    match rank(group)? {
        1 => {
            p[(0, 0)] = r;
            p[(1, 0)] = r;
            for i in 2..n {
                p[(i, i - 1)] = 1.0;
            }
            p[(0, n - 1)] = r;
            p[(1, n - 1)] = -r;
        }
        _ => {
            p[(0, 0)] = r;
            p[(2, 0)] = r;
            p[(1, 1)] = r;
            p[(3, 1)] = r;
            for i in 4..n {
                p[(i, i - 2)] = 1.0;
            }
            p[(1, n - 2)] = r;
            p[(3, n - 2)] = -r;
            p[(0, n - 1)] = r;
            p[(2, n - 1)] = -r;
        }
    }
    Ok(p)
}

/// Weights of `log a` on the light-cone basis.
pub fn weights(group: GroupTag, d: usize, a_params: &[f64]) -> Vec<f64> {
    let n = group.matrix_dim(d);
    let mut w = vec![0.0; n];
    w[0] = a_params[0];
    w[n - 1] = -a_params[0];
    if a_params.len() > 1 {
        w[1] = a_params[1];
        w[n - 2] = -a_params[1];
    }
    w
}

/// `log a`: `beta (e0 e1^T + e1 e0^T)` or
/// `lambda (e2 e0^T + e0 e2^T) + mu (e3 e1^T + e1 e3^T)`.
pub fn a_generator(group: GroupTag, d: usize, a_params: &[f64]) -> Result<DMatrix<f64>> {
    let n = group.matrix_dim(d);
    check_a_len(group, a_params)?;
    Ok(match rank(group)? {
        1 => (eij(n, 0, 1) + eij(n, 1, 0)) * a_params[0],
        _ => (eij(n, 2, 0) + eij(n, 0, 2)) * a_params[0] + (eij(n, 3, 1) + eij(n, 1, 3)) * a_params[1],
    })
}

/// The alternative rank-two pairing with `mu` on the `(0, 3)` boost. The two
/// boosts share the index 0 and do not commute, so this is not a torus; it is
/// kept for the cross-check only.
pub fn a_generator_inline(d: usize, lambda: f64, mu: f64) -> DMatrix<f64> {
    let n = d + 2;
    (eij(n, 2, 0) + eij(n, 0, 2)) * lambda + (eij(n, 3, 0) + eij(n, 0, 3)) * mu
}

fn check_a_len(group: GroupTag, a_params: &[f64]) -> Result<()> {
    let r = rank(group)?;
    if a_params.len() != r {
        return Err(Error::Dimension { expected: r, got: a_params.len() });
    }
    Ok(())
}

/// `a = exp(log a)` evaluated exactly through the light-cone weights.
pub fn a_matrix(group: GroupTag, d: usize, a_params: &[f64]) -> Result<DMatrix<f64>> {
    check_a_len(group, a_params)?;
    let p = light_cone_basis(group, d)?;
    let w = weights(group, d, a_params);
    let diag = DMatrix::from_diagonal(&DVector::from_iterator(w.len(), w.iter().map(|v| v.exp())));
    Ok(&p * diag * p.transpose())
}

/// Coordinates on the nilpotent algebra.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum NilParams {
    /// `h` in `R^{m-1}` for `SO(1,m)`.
    Rank1 { h: Vec<f64> },
    /// `(x, y, h, h~)` for `SO(2,d)`.
    Rank2 { x: f64, y: f64, h: Vec<f64>, ht: Vec<f64> },
}

impl NilParams {
    pub fn zero(group: GroupTag, d: usize) -> Result<Self> {
        let n = group.matrix_dim(d);
        Ok(match rank(group)? {
            1 => NilParams::Rank1 { h: vec![0.0; n - 2] },
            _ => NilParams::Rank2 { x: 0.0, y: 0.0, h: vec![0.0; n - 4], ht: vec![0.0; n - 4] },
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            NilParams::Rank1 { h } => h.clone(),
            NilParams::Rank2 { x, y, h, ht } => {
                let mut v = vec![*x, *y];
                v.extend_from_slice(h);
                v.extend_from_slice(ht);
                v
            }
        }
    }
}

/// Nilpotent generator with the given coordinates.
///
/// Rank one: first two rows `(0, 0, h^T)`, `(0, 0, -h^T)`, columns 0 and 1
/// both equal to `h` below.
/// Rank two: the matrix that sends `e0+e2` to `2(x+y) e1 + 2(x-y) e3 + 2h`,
/// `e1+e3` to `-2y (e0-e2) + 2h~`, and annihilates `e0-e2`.
pub fn n_generator(group: GroupTag, d: usize, p: &NilParams) -> Result<DMatrix<f64>> {
    let n = group.matrix_dim(d);
    let mut x = DMatrix::zeros(n, n);
    match (rank(group)?, p) {
        (1, NilParams::Rank1 { h }) => {
            if h.len() != n - 2 {
                return Err(Error::Dimension { expected: n - 2, got: h.len() });
            }
            for (j, &v) in h.iter().enumerate() {
                x[(0, 2 + j)] = v;
                x[(1, 2 + j)] = -v;
                x[(2 + j, 0)] = v;
                x[(2 + j, 1)] = v;
            }
        }
        (2, NilParams::Rank2 { x: px, y: py, h, ht }) => {
            if h.len() != n - 4 || ht.len() != n - 4 {
                return Err(Error::Dimension { expected: n - 4, got: h.len().max(ht.len()) });
            }
            let (s, t) = (px + py, px - py);
            x[(0, 1)] = -s;
            x[(0, 3)] = t;
            x[(1, 0)] = s;
            x[(1, 2)] = s;
            x[(2, 1)] = s;
            x[(2, 3)] = -t;
            x[(3, 0)] = t;
            x[(3, 2)] = t;
            for j in 0..n - 4 {
                let (a, b) = (h[j], ht[j]);
                x[(0, 4 + j)] = a;
                x[(1, 4 + j)] = b;
                x[(2, 4 + j)] = -a;
                x[(3, 4 + j)] = -b;
                x[(4 + j, 0)] = a;
                x[(4 + j, 1)] = b;
                x[(4 + j, 2)] = a;
                x[(4 + j, 3)] = b;
            }
        }
        _ => return Err(Error::InvalidConfig(format!("nilpotent coordinates do not fit {group}"))),
    }
    Ok(x)
}

/// Coordinates of a nilpotent generator (inverse of [`n_generator`]).
pub fn nil_params_of(group: GroupTag, d: usize, x: &DMatrix<f64>) -> Result<NilParams> {
    let n = group.matrix_dim(d);
    Ok(match rank(group)? {
        1 => NilParams::Rank1 { h: (2..n).map(|i| x[(i, 0)]).collect() },
        _ => NilParams::Rank2 {
            x: 0.5 * (x[(1, 0)] + x[(3, 0)]),
            y: 0.5 * (x[(1, 0)] - x[(3, 0)]),
            h: (4..n).map(|i| x[(i, 0)]).collect(),
            ht: (4..n).map(|i| x[(i, 1)]).collect(),
        },
    })
}

/// Exponential of a nilpotent matrix as a finite sum.
pub fn nilpotent_exp(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut out = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=n {
        term = &term * x / k as f64;
        if term.amax() == 0.0 {
            break;
        }
        out += &term;
    }
    out
}

/// Logarithm of a unipotent matrix as a finite sum.
pub fn nilpotent_log(u: &DMatrix<f64>) -> DMatrix<f64> {
    let n = u.nrows();
    let m = u - DMatrix::identity(n, n);
    let mut out = DMatrix::zeros(n, n);
    let mut pow = DMatrix::identity(n, n);
    for k in 1..=n {
        pow = &pow * &m;
        if pow.amax() == 0.0 {
            break;
        }
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        out += &pow * (sign / k as f64);
    }
    out
}

/// Smallest `k` with `X^k` negligible relative to `|X|^k`.
pub fn nilpotency_degree(x: &DMatrix<f64>, tol: f64) -> Option<usize> {
    let n = x.nrows();
    let scale = x.amax().max(1.0);
    let mut pow = x.clone();
    for k in 1..=n + 1 {
        if pow.amax() <= tol * scale.powi(k as i32) {
            return Some(k);
        }
        pow = &pow * x;
    }
    None
}

/// `m = L Q` with `L` lower triangular with positive diagonal and `Q`
/// orthogonal.
pub fn lq(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = m.transpose().qr();
    let q1 = qr.q();
    let r1 = qr.r();
    let n = m.nrows();
    let mut l = r1.transpose();
    let mut q = q1.transpose();
    for i in 0..n {
        if r1[(i, i)] < 0.0 {
            l.column_mut(i).neg_mut();
            q.row_mut(i).neg_mut();
        }
    }
    (l, q)
}

/// Splits an algebra element into its `N`, `A` and `K` parts.
pub fn split_algebra(
    group: GroupTag,
    d: usize,
    w: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let p = light_cone_basis(group, d)?;
    let y = p.transpose() * w * &p;
    let n = y.nrows();
    let mut yn = DMatrix::zeros(n, n);
    let mut ya = DMatrix::zeros(n, n);
    let mut yk = DMatrix::zeros(n, n);
    for i in 0..n {
        ya[(i, i)] = y[(i, i)];
        for j in 0..i {
            // upper root spaces pair with lower ones through the transpose
            yn[(i, j)] = y[(i, j)] + y[(j, i)];
            yk[(j, i)] = y[(j, i)];
            yk[(i, j)] = -y[(j, i)];
        }
    }
    let back = |m: DMatrix<f64>| &p * m * p.transpose();
    Ok((back(yn), back(ya), back(yk)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IwasawaCoords {
    pub group: GroupTag,
    pub d: usize,
    pub n: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// `[beta]` or `[lambda, mu]`.
    pub a_params: Vec<f64>,
    pub nil: NilParams,
}

impl IwasawaCoords {
    /// Builds the factors from coordinates and a compact part.
    pub fn from_parts(group: GroupTag, d: usize, nil: NilParams, a_params: Vec<f64>, k: DMatrix<f64>) -> Result<Self> {
        let n = nilpotent_exp(&n_generator(group, d, &nil)?);
        let a = a_matrix(group, d, &a_params)?;
        Ok(IwasawaCoords { group, d, n, a, k, a_params, nil })
    }

    pub fn recompose(&self) -> DMatrix<f64> {
        &self.n * &self.a * &self.k
    }

    /// `max |n a k - g|`.
    pub fn residual(&self, g: &DMatrix<f64>) -> f64 {
        (self.recompose() - g).amax()
    }
}

/// `A`-parameters from the light-cone vectors fixed by `N` and scaled by `A`.
///
/// Rank one: `e^beta` is the time component of `g^{-1}(e0 - e1)`, that is
/// `g00 + g10`. Rank two: with `p = g^{-1}(e0-e2)` and `q = g^{-1}(e1-e3)`,
/// `e^{2 lambda} = p0^2 + p1^2` and `e^{lambda + mu} = p0 q1 - p1 q0`.
pub fn a_params(g: &FrameElement) -> Result<Vec<f64>> {
    let m = &g.g;
    match rank(g.group)? {
        1 => {
            let e = m[(0, 0)] + m[(1, 0)];
            if !(e > 0.0) || !e.is_finite() {
                return Err(Error::DecompositionOutOfDomain(format!("g00 + g10 = {e}")));
            }
            Ok(vec![e.ln()])
        }
        _ => {
            let j = g.form();
            let ginv = &j * m.transpose() * &j;
            let p = ginv.column(0) - ginv.column(2);
            let q = ginv.column(1) - ginv.column(3);
            let r = p[0] * p[0] + p[1] * p[1];
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::DecompositionOutOfDomain(format!("light-cone pairing {r}")));
            }
            let lambda = 0.5 * r.ln();
            let det = p[0] * q[1] - p[1] * q[0];
            if !(det > 0.0) || !det.is_finite() {
                return Err(Error::DecompositionOutOfDomain(format!("light-cone pairing {det}")));
            }
            Ok(vec![lambda, det.ln() - lambda])
        }
    }
}

/// Direct NAK factorisation. `A` from the light-cone pairing; `N` in closed
/// form (rank one) or from the LQ factorisation in the light-cone basis (rank
/// two); then `k = a^{-1} n^{-1} g`.
pub fn decompose(g: &FrameElement) -> Result<IwasawaCoords> {
    let r = rank(g.group)?;
    let (group, d) = (g.group, g.d);
    let scale = g.g.amax().max(1.0);
    let qd = g.q_defect();
    if !(qd <= 1e-8 * scale * scale) {
        return Err(Error::StateInvalid(format!("G^T J G - J = {qd:.3e}")));
    }
    let ap = a_params(g)?;
    let nil = if r == 1 {
        let s = (-ap[0]).exp();
        NilParams::Rank1 { h: (2..g.g.nrows()).map(|i| s * g.g[(i, 0)]).collect() }
    } else {
        let p = light_cone_basis(group, d)?;
        let (_, q) = lq(&(p.transpose() * &g.g * &p));
        let k = &p * q * p.transpose();
        let ainv = a_matrix(group, d, &[-ap[0], -ap[1]])?;
        let n = &g.g * k.transpose() * ainv;
        nil_params_of(group, d, &nilpotent_log(&n))?
    };
    let xn = n_generator(group, d, &nil)?;
    let n = nilpotent_exp(&xn);
    let ninv = nilpotent_exp(&(-&xn));
    let neg: Vec<f64> = ap.iter().map(|v| -v).collect();
    let k = a_matrix(group, d, &neg)? * ninv * &g.g;
    let a = a_matrix(group, d, &ap)?;
    let out = IwasawaCoords { group, d, n, a, k, a_params: ap, nil };
    let ortho = (out.k.transpose() * &out.k - DMatrix::identity(out.k.nrows(), out.k.ncols())).amax();
    let res = out.residual(&g.g);
    if !(ortho <= RECOMPOSE_TOL * scale * scale) || !(res <= RECOMPOSE_TOL * scale * scale) {
        return Err(Error::DecompositionOutOfDomain(format!(
            "compact factor off by {ortho:.3e}, recomposition residual {res:.3e}"
        )));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct NewtonOutcome {
    pub coords: IwasawaCoords,
    pub iterations: usize,
    /// `max |(n a k)^{-1} g - I|` at exit.
    pub residual: f64,
    pub converged: bool,
}

/// Damped Newton iteration on the recomposition residual.
///
/// With `R = (n a k)^{-1} g` and `W = k Z k^{-1}`, `Z = (R - J R^T J)/2`, the
/// split `W = W_N + W_A + W_K` updates `n <- n exp(Ad_a W_N)`,
/// `a <- a exp(W_A)`, `k <- exp(W_K) k`.
pub fn newton_decompose(g: &FrameElement, init: Option<&IwasawaCoords>) -> Result<NewtonOutcome> {
    let (group, d) = (g.group, g.d);
    let r = rank(group)?;
    let j = g.form();
    let dim = g.g.nrows();
    let eye = DMatrix::<f64>::identity(dim, dim);
    let p = light_cone_basis(group, d)?;
    let tol = NEWTON_TOL * g.g.amax().max(1.0).powi(2);

    let (mut xn, mut ap, mut k) = match init {
        Some(c) => (n_generator(group, d, &c.nil)?, c.a_params.clone(), c.k.clone()),
        None => (DMatrix::zeros(dim, dim), vec![0.0; r], eye.clone()),
    };
    let resid = |xn: &DMatrix<f64>, ap: &[f64], k: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let neg: Vec<f64> = ap.iter().map(|v| -v).collect();
        Ok(k.transpose() * a_matrix(group, d, &neg)? * nilpotent_exp(&(-xn)) * &g.g)
    };
    let mut rm = resid(&xn, &ap, &k)?;
    let mut res = (&rm - &eye).amax();
    let mut it = 0;
    while it < NEWTON_MAX_ITER && res > tol {
        it += 1;
        let z = (&rm - &j * rm.transpose() * &j) * 0.5;
        let w = &k * z * k.transpose();
        let (wn, wa, wk) = split_algebra(group, d, &w)?;
        let a = a_matrix(group, d, &ap)?;
        let neg: Vec<f64> = ap.iter().map(|v| -v).collect();
        let adw = &a * wn * a_matrix(group, d, &neg)?;
        let ya = p.transpose() * wa * &p;
        let mut tau = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let n_new = nilpotent_exp(&xn) * nilpotent_exp(&(&adw * tau));
            let xn_new = n_generator(group, d, &nil_params_of(group, d, &nilpotent_log(&n_new))?)?;
            let mut ap_new = ap.clone();
            for (i, v) in ap_new.iter_mut().enumerate() {
                *v += tau * ya[(i, i)];
            }
            let mut k_new = expm(&(&wk * tau)) * &k;
            q_gram_schmidt(&mut k_new, &eye);
            let rm_new = resid(&xn_new, &ap_new, &k_new)?;
            let res_new = (&rm_new - &eye).amax();
            if res_new < res {
                xn = xn_new;
                ap = ap_new;
                k = k_new;
                rm = rm_new;
                res = res_new;
                accepted = true;
                break;
            }
            tau *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let nil = nil_params_of(group, d, &xn)?;
    let coords = IwasawaCoords::from_parts(group, d, nil, ap, k)?;
    Ok(NewtonOutcome { coords, iterations: it, residual: res, converged: res <= tol })
}

/// AdS: angle of `k(e0)` in the `(e0, e1)` plane. dS: `k(e1)` as an ambient
/// vector (its time component vanishes).
pub fn extract_theta(c: &IwasawaCoords) -> Result<Theta> {
    match c.group {
        GroupTag::So2d => {
            let (x, y) = (c.k[(0, 0)], c.k[(1, 0)]);
            if x.hypot(y) < 1e-12 {
                return Err(Error::ExtractionDegenerate);
            }
            Ok(Theta::Ads(y.atan2(x)))
        }
        GroupTag::So1dPlus1 | GroupTag::So1d => Ok(Theta::Ds(c.k.column(1).into_owned())),
        other => Err(Error::UnsupportedGroup(other.to_string())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeylChamberStats {
    /// `beta/s` or `(lambda/s, mu/s)`.
    pub slopes: Vec<f64>,
    /// 95% half-widths from the residual variance of the fit.
    pub half_widths: Vec<f64>,
    pub positive: Vec<bool>,
    /// Rank two: slope and half-width of `lambda - mu`.
    pub gap: Option<(f64, f64)>,
    pub in_chamber: bool,
}

/// Slopes of the `A`-parameters, fitted over the whole path: they are a
/// drifted Brownian motion from the start, so there is no transient to drop
/// and a shorter window only inflates the per-path spread.
pub fn weyl_stats(s: &[f64], params: &[Vec<f64>]) -> Result<WeylChamberStats> {
    let m = s.len();
    if m != params.len() {
        return Err(Error::Dimension { expected: m, got: params.len() });
    }
    if m < 10 || !(s[m - 1] >= 5.0) {
        return Err(Error::InsufficientData(format!("{m} samples up to s = {}", s.last().unwrap_or(&0.0))));
    }
    let r = params[0].len();
    let mut slopes = Vec::with_capacity(r);
    let mut half_widths = Vec::with_capacity(r);
    for i in 0..r {
        let y: Vec<f64> = params.iter().map(|p| p[i]).collect();
        let (b, se, _) = ols(s, &y)?;
        slopes.push(b);
        half_widths.push(1.96 * se);
    }
    let positive: Vec<bool> = slopes.iter().zip(&half_widths).map(|(b, h)| b - h > 0.0).collect();
    let gap = if r == 2 {
        let y: Vec<f64> = params.iter().map(|p| p[0] - p[1]).collect();
        let (b, se, _) = ols(s, &y)?;
        Some((b, 1.96 * se))
    } else {
        None
    };
    let in_chamber = positive.iter().all(|&p| p) && gap.is_none_or(|(b, h)| b - h > 0.0);
    Ok(WeylChamberStats { slopes, half_widths, positive, gap, in_chamber })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdsBoundary {
    /// `n(e0+e2)`, Euclidean-normalised with non-negative time component.
    pub p_inf: Vec<f64>,
    /// `n(e0+e2)` and `n(e1+e3)` at the final sample.
    pub frame: [Vec<f64>; 2],
    pub u_last: Vec<f64>,
    pub v_last: Vec<f64>,
    pub u_tail: f64,
    pub v_tail: f64,
    pub n_tail: f64,
    /// `|Q(u, u)| / |u|^2` at the final sample.
    pub isotropy: f64,
    /// `n_tail` below the threshold.
    pub converged: bool,
}

/// `u = e^{-lambda} n a e0` and `v = e^{-mu} n a e1`.
pub fn ads_uv(c: &IwasawaCoords) -> (DVector<f64>, DVector<f64>) {
    let dim = c.n.nrows();
    let (l, m) = (c.a_params[0], c.a_params[1]);
    let el = (-2.0 * l).exp();
    let em = (-2.0 * m).exp();
    let mut au = DVector::zeros(dim);
    au[0] = 0.5 * (1.0 + el);
    au[2] = 0.5 * (1.0 - el);
    let mut av = DVector::zeros(dim);
    av[1] = 0.5 * (1.0 + em);
    av[3] = 0.5 * (1.0 - em);
    (&c.n * au, &c.n * av)
}

/// Boundary datum of an AdS path from its decomposed samples.
pub fn ads_boundary(path: &[IwasawaCoords], split: f64, n_threshold: f64) -> Result<AdsBoundary> {
    let last = path.last().ok_or_else(|| Error::InsufficientData("empty path".into()))?;
    if last.group != GroupTag::So2d {
        return Err(Error::UnsupportedGroup(last.group.to_string()));
    }
    let uv: Vec<(DVector<f64>, DVector<f64>)> = path.iter().map(ads_uv).collect();
    let us: Vec<&[f64]> = uv.iter().map(|(u, _)| u.as_slice()).collect();
    let vs: Vec<&[f64]> = uv.iter().map(|(_, v)| v.as_slice()).collect();
    let ns: Vec<&[f64]> = path.iter().map(|c| c.n.as_slice()).collect();
    let u_tail = cauchy_tail(&us, split, TailMetric::Euclidean)?;
    let v_tail = cauchy_tail(&vs, split, TailMetric::Euclidean)?;
    let n_tail = cauchy_tail(&ns, split, TailMetric::MaxNorm)?;
    let dim = last.n.nrows();
    let mut e02 = DVector::zeros(dim);
    e02[0] = 1.0;
    e02[2] = 1.0;
    let mut e13 = DVector::zeros(dim);
    e13[1] = 1.0;
    e13[3] = 1.0;
    let f0 = &last.n * e02;
    let f1 = &last.n * e13;
    let mut p_inf = f0.normalize();
    if p_inf[0] < 0.0 {
        p_inf.neg_mut();
    }
    let (u, v) = uv.last().unwrap();
    let j = signature(2, dim - 2);
    let isotropy = (u.transpose() * &j * u)[(0, 0)].abs() / u.norm_squared();
    Ok(AdsBoundary {
        p_inf: p_inf.as_slice().to_vec(),
        frame: [f0.as_slice().to_vec(), f1.as_slice().to_vec()],
        u_last: u.as_slice().to_vec(),
        v_last: v.as_slice().to_vec(),
        u_tail,
        v_tail,
        n_tail,
        isotropy,
        converged: n_tail < n_threshold,
    })
}

/// Propagates `(n, a, k)` of the model-space frame diffusion step by step.
///
/// Each step `g <- g exp(X)` becomes `k exp(X) k^{-1} = n1 a1 k1` (a small
/// factorisation near the identity), then `n <- n (a n1 a^{-1})`,
/// `a <- a a1`, `k <- k1 k`. Conjugation by `a` contracts `n1`, so `n` stays
/// bounded while `a` grows exponentially.
#[derive(Clone, Debug)]
pub struct NakWalker {
    pub group: GroupTag,
    pub d: usize,
    pub sigma: f64,
    pub reorth_cadence: usize,
    basis: GeneratorBasis,
    p: DMatrix<f64>,
    /// `n` in the light-cone basis (unit lower triangular).
    n_p: DMatrix<f64>,
    ell: Vec<f64>,
    k: DMatrix<f64>,
    steps: usize,
}

impl NakWalker {
    pub fn new(group: GroupTag, d: usize, sigma: f64) -> Result<Self> {
        let r = rank(group)?;
        let dim = group.matrix_dim(d);
        Ok(NakWalker {
            group,
            d,
            sigma,
            reorth_cadence: REORTH_CADENCE,
            basis: generator_basis(group, d)?,
            p: light_cone_basis(group, d)?,
            n_p: DMatrix::identity(dim, dim),
            ell: vec![0.0; r],
            k: DMatrix::identity(dim, dim),
            steps: 0,
        })
    }

    pub fn from_coords(c: &IwasawaCoords, sigma: f64) -> Result<Self> {
        let mut w = NakWalker::new(c.group, c.d, sigma)?;
        w.n_p = w.p.transpose() * &c.n * &w.p;
        w.ell = c.a_params.clone();
        w.k = c.k.clone();
        Ok(w)
    }

    /// Number of gaussians consumed per step.
    pub fn noise_dim(&self) -> usize {
        self.basis.v.len()
    }

    pub fn step(&mut self, ds: f64, eta: &[f64]) -> Result<()> {
        let x = step_generator(&self.basis, 1.0, self.sigma, ds, eta)?;
        let e = expm_checked(&x, EXP_LIMIT)?;
        let ep = &self.k * e * self.k.transpose();
        let (l, q) = lq(&(self.p.transpose() * ep * &self.p));
        let dim = l.nrows();
        let mut n1 = l.clone();
        for c in 0..dim {
            let piv = l[(c, c)];
            if !(piv > 0.0) || !piv.is_finite() {
                return Err(Error::StepRejected(format!("NAK increment pivot {piv}")));
            }
            n1.column_mut(c).scale_mut(1.0 / piv);
        }
        let w = weights(self.group, self.d, &self.ell);
        for i in 0..dim {
            for jj in 0..i {
                n1[(i, jj)] *= (w[i] - w[jj]).exp();
            }
        }
        self.n_p = &self.n_p * n1;
        for (i, v) in self.ell.iter_mut().enumerate() {
            *v += l[(i, i)].ln();
        }
        self.k = &self.p * q * self.p.transpose() * &self.k;
        self.steps += 1;
        if self.reorth_cadence > 0 && self.steps.is_multiple_of(self.reorth_cadence) {
            self.repair()?;
        }
        Ok(())
    }

    /// Restores the exact block structure of `k` and the exact `N` structure
    /// of `n`.
    pub fn repair(&mut self) -> Result<()> {
        let split = match rank(self.group)? {
            1 => 1,
            _ => 2,
        };
        let dim = self.k.nrows();
        for i in 0..dim {
            for j in 0..dim {
                if (i < split) != (j < split) {
                    self.k[(i, j)] = 0.0;
                }
            }
        }
        for (lo, hi) in [(0, split), (split, dim)] {
            let mut b = self.k.view((lo, lo), (hi - lo, hi - lo)).into_owned();
            let eye = DMatrix::identity(hi - lo, hi - lo);
            q_gram_schmidt(&mut b, &eye);
            self.k.view_mut((lo, lo), (hi - lo, hi - lo)).copy_from(&b);
        }
        let nil = self.nil_params()?;
        let n = nilpotent_exp(&n_generator(self.group, self.d, &nil)?);
        self.n_p = self.p.transpose() * n * &self.p;
        Ok(())
    }

    pub fn n(&self) -> DMatrix<f64> {
        &self.p * &self.n_p * self.p.transpose()
    }

    pub fn a_params(&self) -> &[f64] {
        &self.ell
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn nil_params(&self) -> Result<NilParams> {
        let mut n = self.n_p.clone();
        let dim = n.nrows();
        for i in 0..dim {
            n[(i, i)] = 1.0;
            for j in i + 1..dim {
                n[(i, j)] = 0.0;
            }
        }
        nil_params_of(self.group, self.d, &nilpotent_log(&(&self.p * n * self.p.transpose())))
    }

    pub fn coords(&self) -> Result<IwasawaCoords> {
        let a = a_matrix(self.group, self.d, &self.ell)?;
        Ok(IwasawaCoords {
            group: self.group,
            d: self.d,
            n: self.n(),
            a,
            k: self.k.clone(),
            a_params: self.ell.clone(),
            nil: self.nil_params()?,
        })
    }

    pub fn theta(&self) -> Result<Theta> {
        extract_theta(&self.coords()?)
    }
}

/// One recorded sample of a lifted model-space path.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NakSample {
    pub s: f64,
    pub a_params: Vec<f64>,
    pub nil: Vec<f64>,
    /// dS: `k(e1)`; AdS: `[theta]`.
    pub theta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NakPathRecord {
    pub group: GroupTag,
    pub d: usize,
    pub samples: Vec<NakSample>,
    /// Full factors at each sample, for the boundary diagnostics.
    pub coords: Vec<IwasawaCoords>,
}

impl NakPathRecord {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|x| x.s).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NakAborted {
    pub error: Error,
    pub partial: NakPathRecord,
}

/// Compact factor whose `e1` column is `-e1`: a half turn in the `(e1, e2)`
/// plane of the rank-one compact block. Starts the antipodal walker.
pub fn antipodal_start(group: GroupTag, d: usize) -> Result<IwasawaCoords> {
    if rank(group)? != 1 {
        return Err(Error::UnsupportedGroup(group.to_string()));
    }
    let dim = group.matrix_dim(d);
    let mut k = DMatrix::identity(dim, dim);
    k[(1, 1)] = -1.0;
    k[(2, 2)] = -1.0;
    IwasawaCoords::from_parts(group, d, NilParams::zero(group, d)?, vec![0.0], k)
}

/// Runs a [`NakWalker`] for `round(s_max / ds)` steps with noise from the
/// `Frame` stream, recording every `record_every` steps and the last one.
#[allow(clippy::too_many_arguments)]
pub fn simulate_nak_path(
    group: GroupTag,
    d: usize,
    sigma: f64,
    ds: f64,
    s_max: f64,
    record_every: usize,
    reorth_cadence: usize,
    key: NoiseKey,
    start: Option<&IwasawaCoords>,
) -> std::result::Result<NakPathRecord, NakAborted> {
    let mut rec = NakPathRecord { group, d, samples: vec![], coords: vec![] };
    if !(ds > 0.0) || !(s_max > 0.0) || record_every == 0 {
        return Err(NakAborted {
            error: Error::InvalidConfig("s_max, ds > 0 and record_every >= 1".into()),
            partial: rec,
        });
    }
    let walker = match start {
        Some(c) => NakWalker::from_coords(c, sigma),
        None => NakWalker::new(group, d, sigma),
    };
    let mut w = match walker {
        Ok(w) => w,
        Err(error) => return Err(NakAborted { error, partial: rec }),
    };
    w.reorth_cadence = reorth_cadence;
    let push = |rec: &mut NakPathRecord, w: &NakWalker, s: f64| -> Result<()> {
        let c = w.coords()?;
        let theta = match extract_theta(&c)? {
            Theta::Ads(a) => vec![a],
            Theta::Ds(v) => v.as_slice().to_vec(),
        };
        rec.samples.push(NakSample { s, a_params: c.a_params.clone(), nil: c.nil.to_vec(), theta });
        rec.coords.push(c);
        Ok(())
    };
    let steps = (s_max / ds).round() as u64;
    let mut eta = vec![0.0; w.noise_dim()];
    let result = (|| -> Result<()> {
        push(&mut rec, &w, 0.0)?;
        for step in 0..steps {
            key.fill(StreamRole::Frame, 0, step, &mut eta);
            w.step(ds, &eta)?;
            let done = step + 1;
            if done % record_every as u64 == 0 || done == steps {
                push(&mut rec, &w, done as f64 * ds)?;
            }
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(rec),
        Err(error) => Err(NakAborted { error, partial: rec }),
    }
}
