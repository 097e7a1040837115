//! Reduced dynamics on Robertson-Walker space-times.
//!
//! The pair `(t, tdot)` is an autonomous diffusion. The spatial part only sees
//! it through two clocks: `C` drives the noise of the direction `Theta`, `D`
//! the displacement along the fiber. Curved fibers are integrated through a
//! frame lift whose drift is applied in closed form, so clock increments far
//! beyond one radian per step stay exact.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::base_sde::C_RATE_CAP;
use crate::boundary_stats::{cauchy_tail, TailMetric};
use crate::error::{Error, Result};
use crate::linalg::{
    complement_basis, householder_completion, plane_exp_right, plane_rotation_left, q_gram_schmidt, reorthonormalize,
    signature, unit,
};
use crate::rng::{NoiseKey, StreamRole};
use crate::spacetime::{classify_regime, Fiber, Growth, Regime, SpaceTimeKind, SpaceTimeSpec, WarpFunction};

/// Tolerance on `|Theta| = 1` and on the fiber constraint after a step.
pub const UNIT_TOL: f64 = 1e-8;

/// One explicit Euler step of the temporal pair:
/// `dtdot = (-H(t)(tdot^2 - 1) + d sigma^2/2 tdot) ds + sigma sqrt(tdot^2 - 1) dW`,
/// floored at 1, and `t' = t + tdot ds`.
pub fn temporal_step(
    warp: &WarpFunction,
    d: usize,
    sigma: f64,
    t: f64,
    tdot: f64,
    ds: f64,
    eta: f64,
) -> Result<(f64, f64)> {
    let e = ((tdot - 1.0) * (tdot + 1.0)).max(0.0);
    let drift = -warp.hubble(t) * e + d as f64 * sigma * sigma / 2.0 * tdot;
    let next = (tdot + drift * ds + sigma * e.sqrt() * ds.sqrt() * eta).max(1.0);
    let t1 = t + tdot * ds;
    if !(t1 > 0.0) || !t1.is_finite() || !next.is_finite() {
        return Err(Error::Internal(format!("temporal step produced t = {t1}, tdot = {next}")));
    }
    Ok((t1, next))
}

/// Step of the rapidity `rho = arccosh(tdot)`, which solves
/// `drho = sigma dW + (-H(t) sinh(rho) + (d-1) sigma^2/2 coth(rho)) ds`.
///
/// The singular part `(d-1) sigma^2 / (2 rho)` is taken implicitly, which
/// keeps `rho` positive without a floor: near `tdot = 1` the process behaves
/// like a Bessel process of dimension `d` and never reaches the boundary,
/// while a floored Euler step on `tdot` lands on it and trips the `C` cap.
/// `t' = t + cosh(rho) ds`.
pub fn rapidity_step(
    warp: &WarpFunction,
    d: usize,
    sigma: f64,
    t: f64,
    rho: f64,
    ds: f64,
    eta: f64,
) -> Result<(f64, f64)> {
    let k = (d as f64 - 1.0) * sigma * sigma / 2.0;
    // coth(rho) - 1/rho, series near 0
    let regular = if rho < 1e-3 { rho / 3.0 - rho.powi(3) / 45.0 } else { 1.0 / rho.tanh() - 1.0 / rho };
    let m = rho + (-warp.hubble(t) * rho.sinh() + k * regular) * ds + sigma * ds.sqrt() * eta;
    let q = (m * m + 4.0 * k * ds).sqrt();
    let next = if m >= 0.0 { 0.5 * (m + q) } else { 2.0 * k * ds / (q - m) };
    let t1 = t + rho.cosh() * ds;
    if !(t1 > 0.0) || !t1.is_finite() || !next.is_finite() || !(next >= 0.0) {
        return Err(Error::Internal(format!("temporal step produced t = {t1}, rho = {next}")));
    }
    Ok((t1, next))
}

/// Clock increments over one step from `t` to `t_next` at rapidity `rho`.
///
/// `A` is the trapezoid of `1/alpha` on the simulated time path. `D` uses the
/// same trapezoid weights, `dD = sinh(rho) ds <1/alpha>`, so that `D - A`
/// accumulates only `(sinh(rho) - cosh(rho)) ds <1/alpha>`, which is carried
/// separately in `gap`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClockIncrement {
    pub dc: f64,
    pub dd: f64,
    pub da: f64,
    /// `dd - da`, computed without cancellation
    pub gap: f64,
    /// capped `1/(tdot^2 - 1)`
    pub cdot: f64,
}

pub fn clocks_step(warp: &WarpFunction, t: f64, rho: f64, t_next: f64, ds: f64) -> ClockIncrement {
    let sh = rho.sinh();
    let e = sh * sh;
    let cdot = if e * C_RATE_CAP > 1.0 { 1.0 / e } else { C_RATE_CAP };
    let w = 0.5 * (1.0 / warp.alpha(t) + 1.0 / warp.alpha(t_next));
    ClockIncrement { dc: cdot * ds, dd: sh * ds * w, da: rho.cosh() * ds * w, gap: -(-rho).exp() * ds * w, cdot }
}

/// Euclidean or Lorentzian inner product on the ambient fiber space.
fn fiber_dot(fiber: Fiber, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let e = a.dot(b);
    if fiber == Fiber::Hyperbolic {
        e - 2.0 * a[0] * b[0]
    } else {
        e
    }
}

/// Orthonormal basis of the directions tangent to the fiber at `x` and
/// orthogonal to `theta`.
fn transverse_basis(fiber: Fiber, d: usize, x: &DVector<f64>, theta: &DVector<f64>) -> Vec<DVector<f64>> {
    match fiber {
        Fiber::Flat => {
            let h = householder_completion(theta);
            (1..d).map(|i| h.column(i).into_owned()).collect()
        }
        _ => complement_basis(d + 1, |a, b| fiber_dot(fiber, a, b), &[x.clone(), theta.clone()], d - 1),
    }
}

/// Direct step of `(x, Theta)` in ambient coordinates:
/// `dx = D' Theta ds`,
/// `dTheta = -kappa D' x ds - sigma^2 (d-1)/2 C' Theta ds + sigma sqrt(C') dM`,
/// followed by projection onto the fiber and renormalisation of `Theta`.
pub fn spatial_step(
    fiber: Fiber,
    d: usize,
    sigma: f64,
    x: &DVector<f64>,
    theta: &DVector<f64>,
    inc: &ClockIncrement,
    eta: &[f64],
) -> Result<(DVector<f64>, DVector<f64>)> {
    if eta.len() != d - 1 {
        return Err(Error::Dimension { expected: d - 1, got: eta.len() });
    }
    let kappa = fiber.kappa();
    let mut noise = DVector::zeros(x.len());
    for (f, e) in transverse_basis(fiber, d, x, theta).iter().zip(eta) {
        noise += f * *e;
    }
    let mut x1 = x + theta * inc.dd;
    let mut th1 = theta - x * (kappa * inc.dd) - theta * (sigma * sigma * (d as f64 - 1.0) / 2.0 * inc.dc)
        + noise * (sigma * inc.dc.sqrt());
    let reject = || Error::StepRejected("direction renormalisation failed".into());
    match fiber {
        Fiber::Flat => {}
        Fiber::Sphere => {
            x1 /= x1.norm();
            let p = th1.dot(&x1);
            th1 -= &x1 * p;
        }
        Fiber::Hyperbolic => {
            let q = -fiber_dot(fiber, &x1, &x1);
            if !(q > 0.0) || !(x1[0] > 0.0) {
                return Err(reject());
            }
            x1 /= q.sqrt();
            let p = fiber_dot(fiber, &th1, &x1);
            th1 += &x1 * p;
        }
    }
    let nn = fiber_dot(fiber, &th1, &th1);
    if !(nn > 0.0) || !nn.is_finite() || !x1.iter().all(|v| v.is_finite()) {
        return Err(reject());
    }
    th1 /= nn.sqrt();
    Ok((x1, th1))
}

/// Unit vector along the noise direction in `e_2..e_d` and the rotation angle.
fn noise_plane(n: usize, sigma: f64, dc: f64, eta: &[f64]) -> Option<(DVector<f64>, f64)> {
    let r = eta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if r == 0.0 || dc == 0.0 {
        return None;
    }
    let mut w = DVector::zeros(n);
    for (i, e) in eta.iter().enumerate() {
        w[i + 2] = e / r;
    }
    Some((w, sigma * dc.sqrt() * r))
}

/// Sign of the noise generators relative to `w e1^T - e1 w^T`, matching
/// the generator bases of the fiber groups.
fn noise_sign(fiber: Fiber) -> f64 {
    if fiber == Fiber::Sphere {
        -1.0
    } else {
        1.0
    }
}

/// Finite-horizon lift `g = u b`: `b` in `SO(d)` (fixing `e0`) carries the
/// direction noise, `u` in the fiber group follows the geodesic drift
/// conjugated by `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLift {
    pub b: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

impl FrameLift {
    pub fn identity(d: usize) -> Self {
        FrameLift { b: DMatrix::identity(d + 1, d + 1), u: DMatrix::identity(d + 1, d + 1) }
    }

    pub fn x(&self) -> DVector<f64> {
        self.u.column(0).into_owned()
    }

    pub fn theta(&self) -> DVector<f64> {
        &self.u * self.b.column(1)
    }
}

/// `b <- b exp(noise)`, then `u <- u exp(dD b H0 b^{-1})`.
pub fn lift_step(fiber: Fiber, lift: &mut FrameLift, sigma: f64, inc: &ClockIncrement, eta: &[f64]) -> Result<()> {
    if fiber == Fiber::Flat {
        return Err(Error::InvalidConfig("the frame lift needs a curved fiber".into()));
    }
    let n = lift.b.nrows();
    if eta.len() != n - 2 {
        return Err(Error::Dimension { expected: n - 2, got: eta.len() });
    }
    let e0 = unit(n, 0);
    let e1 = unit(n, 1);
    if let Some((w, ang)) = noise_plane(n, sigma, inc.dc, eta) {
        plane_exp_right(&mut lift.b, &e1, &w, noise_sign(fiber) * ang, false);
    }
    let be1 = lift.b.column(1).into_owned();
    plane_exp_right(&mut lift.u, &e0, &be1, inc.dd, fiber == Fiber::Hyperbolic);
    Ok(())
}

/// Reference route for the lift: `g <- g exp(noise) exp(dD H0)`.
pub fn frame_step(fiber: Fiber, g: &mut DMatrix<f64>, sigma: f64, inc: &ClockIncrement, eta: &[f64]) {
    let n = g.nrows();
    let e0 = unit(n, 0);
    let e1 = unit(n, 1);
    if let Some((w, ang)) = noise_plane(n, sigma, inc.dc, eta) {
        plane_exp_right(g, &e1, &w, noise_sign(fiber) * ang, false);
    }
    plane_exp_right(g, &e0, &e1, inc.dd, fiber == Fiber::Hyperbolic);
}

/// Infinite-horizon sphere lift: the frame `g` and `bhat = g exp(-A H0)`,
/// both advanced from the same noise. `bhat` only ever receives small
/// rotations, so its tail is free of the large angles carried by `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct SphereLift {
    pub g: DMatrix<f64>,
    pub bhat: DMatrix<f64>,
}

impl SphereLift {
    pub fn identity(d: usize) -> Self {
        SphereLift { g: DMatrix::identity(d + 1, d + 1), bhat: DMatrix::identity(d + 1, d + 1) }
    }

    /// `cos(A) bhat(e0) + sin(A) bhat(e1)`.
    pub fn reconstruct_x(&self, a: f64) -> DVector<f64> {
        self.bhat.column(0) * a.cos() + self.bhat.column(1) * a.sin()
    }

    /// `a_prev` is the value of `A` before the step.
    pub fn step(&mut self, sigma: f64, inc: &ClockIncrement, a_prev: f64, eta: &[f64]) {
        let n = self.g.nrows();
        let e0 = unit(n, 0);
        let e1 = unit(n, 1);
        if let Some((w, ang)) = noise_plane(n, sigma, inc.dc, eta) {
            let ang = noise_sign(Fiber::Sphere) * ang;
            plane_exp_right(&mut self.g, &e1, &w, ang, false);
            // exp(A H0) e1
            let mut ra1 = DVector::zeros(n);
            ra1[0] = -a_prev.sin();
            ra1[1] = a_prev.cos();
            plane_exp_right(&mut self.bhat, &ra1, &w, ang, false);
        }
        plane_exp_right(&mut self.g, &e0, &e1, inc.dd, false);
        plane_exp_right(&mut self.bhat, &e0, &e1, inc.gap, false);
    }

    pub fn reorthonormalize(&mut self) {
        reorthonormalize(&mut self.g);
        reorthonormalize(&mut self.bhat);
    }
}

/// `log cosh(x)` without overflow.
fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// `log sinh(x)` for `x > 0`.
fn log_sinh(x: f64) -> f64 {
    if x < 20.0 {
        x.sinh().ln()
    } else {
        x + (-(-2.0 * x).exp()).ln_1p() - std::f64::consts::LN_2
    }
}

/// Infinite-horizon hyperbolic lift in Iwasawa coordinates.
///
/// The frame is `g = h u` with `u` in `SO(d)` carrying the noise and
/// `h = n a k` following `dh = D' h (u H1 u^{-1}) ds`. With `w = k u e1` the
/// deterministic part moves `w` along the great circle towards `e1` with
/// `tan(phi/2)` decaying like `e^{-D}`; `beta`, `n` and `k` then integrate in
/// closed form over a step. Extrinsic coordinates are never formed, since
/// they grow like `e^D`.
#[derive(Clone, Debug, PartialEq)]
pub struct HypLift {
    pub u: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// `a = exp(beta (e0 e1^T + e1 e0^T))`
    pub beta: f64,
    /// nilpotent coordinates, `n = exp(sum_i h_i (H_i + V_i))`
    pub h: DVector<f64>,
    /// `beta - A`, accumulated from small increments
    pub delta_tilde: f64,
}

impl HypLift {
    pub fn identity(d: usize) -> Self {
        HypLift {
            u: DMatrix::identity(d + 1, d + 1),
            k: DMatrix::identity(d + 1, d + 1),
            beta: 0.0,
            h: DVector::zeros(d - 1),
            delta_tilde: 0.0,
        }
    }

    /// `w = k u e1`, a unit vector in `e1..e_d`.
    pub fn w(&self) -> DVector<f64> {
        &self.k * self.u.column(1)
    }

    pub fn v(&self) -> f64 {
        self.w()[1].clamp(-1.0, 1.0)
    }

    pub fn step(&mut self, sigma: f64, inc: &ClockIncrement, eta: &[f64]) {
        let n = self.u.nrows();
        if let Some((w, ang)) = noise_plane(n, sigma, inc.dc, eta) {
            plane_exp_right(&mut self.u, &unit(n, 1), &w, ang, false);
        }
        self.flow(inc.dd, inc.gap);
    }

    /// Exact deterministic flow over a clock increment `dd`.
    fn flow(&mut self, dd: f64, gap: f64) {
        let w = self.w();
        let w1 = w[1].clamp(-1.0, 1.0);
        let mut perp = w.clone();
        perp[0] = 0.0;
        perp[1] = 0.0;
        let r = perp.norm();
        if r < 1e-300 || dd == 0.0 {
            self.beta += dd * w1;
            self.delta_tilde += dd * (w1 - 1.0) + gap;
            return;
        }
        perp /= r;
        let phi0 = r.atan2(w1);
        let tau0 = -(0.5 * phi0).tan().ln();
        let tau1 = tau0 + dd;
        let phi1 = 2.0 * (-tau1).exp().atan();
        let f = |x: f64| log_cosh(x) - x.abs();
        // |tau1| - |tau0| - dd vanishes unless the flow crosses the equator
        let kink = if tau0 >= 0.0 { 0.0 } else { tau1.abs() - tau0.abs() - dd };
        let dbeta = log_cosh(tau1) - log_cosh(tau0);
        self.delta_tilde += kink + f(tau1) - f(tau0) + gap;
        let coef = (-self.beta + log_sinh(dd) - log_cosh(tau1)).exp();
        for i in 0..self.h.len() {
            self.h[i] += coef * perp[i + 2];
        }
        let n = self.k.nrows();
        plane_rotation_left(&mut self.k, &perp, &unit(n, 1), phi0 - phi1);
        self.beta += dbeta;
    }

    /// `n (e0 + e1) = (1 + |h|^2, 1 - |h|^2, 2h)`.
    pub fn null_vector(&self) -> DVector<f64> {
        let hh = self.h.norm_squared();
        let mut v = DVector::zeros(self.h.len() + 2);
        v[0] = 1.0 + hh;
        v[1] = 1.0 - hh;
        for i in 0..self.h.len() {
            v[i + 2] = 2.0 * self.h[i];
        }
        v
    }

    /// Boundary direction `n(e0+e1)` normalised by its time component,
    /// restricted to the spatial coordinates.
    pub fn theta_inf(&self) -> DVector<f64> {
        let v = self.null_vector();
        v.rows(1, v.len() - 1) / v[0]
    }

    /// Unit direction of the spatial part of `x = n a e0`, which is
    /// proportional to `n(e0+e1) - e^{-2 beta}(e0-e1)` in its spatial rows.
    pub fn direction(&self) -> DVector<f64> {
        let v = self.null_vector();
        let mut s = v.rows(1, v.len() - 1).into_owned();
        s[0] -= (-2.0 * self.beta).exp();
        let nrm = s.norm();
        if nrm > 0.0 {
            s / nrm
        } else {
            // at the base point: the direction of departure
            let w = self.w();
            w.rows(1, w.len() - 1).into_owned()
        }
    }

    /// `arccosh(x0) - A`, with `x0 = (e^beta w0 + e^{-beta})/2`.
    pub fn delta(&self) -> f64 {
        let w0 = self.null_vector()[0];
        let m = 0.5 * w0 + 0.5 * (-2.0 * self.beta).exp();
        let log_x0 = self.beta + m.ln();
        let inv2 = (-2.0 * log_x0).exp().min(1.0);
        self.delta_tilde + m.ln() + (1.0 - inv2).sqrt().ln_1p()
    }

    /// `n a k u`, the full frame; only meaningful while `beta` is moderate.
    pub fn frame(&self) -> DMatrix<f64> {
        let n = self.u.nrows();
        let mut nil = DMatrix::zeros(n, n);
        for (j, &v) in self.h.iter().enumerate() {
            nil[(0, 2 + j)] = v;
            nil[(1, 2 + j)] = -v;
            nil[(2 + j, 0)] = v;
            nil[(2 + j, 1)] = v;
        }
        let nn = DMatrix::identity(n, n) + &nil + &nil * &nil * 0.5;
        let mut a = DMatrix::identity(n, n);
        a[(0, 0)] = self.beta.cosh();
        a[(1, 1)] = self.beta.cosh();
        a[(0, 1)] = self.beta.sinh();
        a[(1, 0)] = self.beta.sinh();
        nn * a * &self.k * &self.u
    }

    pub fn reorthonormalize(&mut self) {
        reorthonormalize(&mut self.u);
        reorthonormalize(&mut self.k);
    }
}

/// Compensated running sum. The clocks reach `1e7` and more while each step
/// adds a small increment; plain summation would drift by many ulps.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Accum {
    sum: f64,
    comp: f64,
}

impl Accum {
    pub fn new(v: f64) -> Self {
        Accum { sum: v, comp: 0.0 }
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// How the direction process is integrated on curved fibers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialScheme {
    /// projected Euler step in ambient coordinates
    Direct,
    /// frame lift with closed-form drift
    Lifted,
}

/// Integrator of the temporal pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalScheme {
    /// drift-implicit step on the rapidity
    Rapidity,
    /// explicit Euler on `tdot` with the floor at 1
    Euler,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RwConfig {
    pub ds: f64,
    pub s_max: f64,
    pub record_every: usize,
    pub reorth_cadence: usize,
    /// `None` picks the lift on curved fibers and the direct step on flat ones
    pub scheme: Option<SpatialScheme>,
    pub temporal: TemporalScheme,
    /// simulate the spatial part at all
    pub spatial: bool,
    pub t0: f64,
    pub tdot0: f64,
}

impl Default for RwConfig {
    fn default() -> Self {
        RwConfig {
            ds: 1e-3,
            s_max: 10.0,
            record_every: 100,
            reorth_cadence: 100,
            scheme: None,
            temporal: TemporalScheme::Rapidity,
            spatial: true,
            t0: 1.0,
            tdot0: 2.0,
        }
    }
}

impl RwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ds > 0.0) || !self.ds.is_finite() {
            return Err(Error::InvalidConfig(format!("ds = {} must be positive", self.ds)));
        }
        if !(self.s_max >= 10.0 * self.ds) || !self.s_max.is_finite() {
            return Err(Error::InvalidConfig(format!("s_max = {} must be at least 10 ds", self.s_max)));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidConfig("record_every must be >= 1".into()));
        }
        if !(self.t0 > 0.0) || !(self.tdot0 >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need t0 > 0 and tdot0 >= 1, got {} and {}",
                self.t0, self.tdot0
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        (self.s_max / self.ds).round() as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Lift {
    None,
    Frame(FrameLift),
    Sphere(SphereLift),
    Hyperbolic(HypLift),
}

/// Full reduced state. `x` and `theta` are ambient coordinates of the fiber
/// point and unit direction; they are left empty for the hyperbolic
/// infinite-horizon lift, where they are not representable.
#[derive(Clone, Debug, PartialEq)]
pub struct RwPhase {
    pub s: f64,
    pub t: f64,
    pub tdot: f64,
    /// `arccosh(tdot)`, kept alongside to avoid cancellation near 1
    pub rho: f64,
    pub c: Accum,
    pub d: Accum,
    pub a: Accum,
    pub d_minus_a: Accum,
    pub x: DVector<f64>,
    pub theta: DVector<f64>,
    pub lift: Lift,
}

impl RwPhase {
    pub fn validate(&self, fiber: Fiber) -> Result<()> {
        if !(self.tdot >= 1.0) || !(self.t > 0.0) {
            return Err(Error::StateInvalid(format!("t = {}, tdot = {}", self.t, self.tdot)));
        }
        if !self.theta.is_empty() {
            let nn = fiber_dot(fiber, &self.theta, &self.theta).sqrt();
            if !((nn - 1.0).abs() <= UNIT_TOL) {
                return Err(Error::StateInvalid(format!("|Theta| = {nn}")));
            }
            let fd = fiber.constraint_defect(self.x.as_slice());
            if !(fd <= UNIT_TOL) {
                return Err(Error::StateInvalid(format!("fiber constraint off by {fd:.3e}")));
            }
        }
        Ok(())
    }
}

/// Regime-specific functionals of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum SampleFunctionals {
    FiniteHorizonPoint,
    FiniteHorizonTangent,
    InfFlatLine {
        /// `x - Theta A(t)`
        delta: Vec<f64>,
    },
    InfSphereCircle {
        /// row-major `bhat`; empty for the direct scheme
        bhat: Vec<f64>,
        bhat_e0: Vec<f64>,
        bhat_e1: Vec<f64>,
        /// `max |x - cos(A) bhat(e0) - sin(A) bhat(e1)|`
        recon_defect: f64,
        q_defect: f64,
    },
    InfHypCone {
        v: f64,
        delta_tilde: f64,
        /// `arcsinh |x| - A(t)`
        delta: f64,
        nil: Vec<f64>,
        /// spatial direction of `x`
        direction: Vec<f64>,
        /// boundary direction read off `n`
        theta_inf: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RwSample {
    pub s: f64,
    pub t: f64,
    pub tdot: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "A")]
    pub a: f64,
    pub d_minus_a: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub theta: Vec<f64>,
    /// row-major finite-horizon lift `u`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functionals: Option<SampleFunctionals>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RwPathRecord {
    pub regime: Regime,
    pub samples: Vec<RwSample>,
    /// largest `| |Theta| - 1 |`, i.e. the relative error of `|xdot|` against
    /// `sqrt(tdot^2 - 1)/alpha(t)`
    pub max_speed_defect: f64,
    pub max_fiber_defect: f64,
    pub max_recon_defect: f64,
    /// steps whose functional update produced non-finite values
    pub functional_gaps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RwAborted {
    pub error: Error,
    pub partial: RwPathRecord,
}

impl std::fmt::Display for RwAborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "path aborted after {} samples: {}", self.partial.samples.len(), self.error)
    }
}

impl std::error::Error for RwAborted {}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Simulator for one space-time and configuration; paths differ only by key.
#[derive(Clone, Debug)]
pub struct RwSimulator {
    pub spec: SpaceTimeSpec,
    pub cfg: RwConfig,
    pub regime: Regime,
    pub scheme: SpatialScheme,
}

impl RwSimulator {
    /// Classifies the warp and rejects infinite-horizon flat fibers whose
    /// warp is not of polynomial growth.
    pub fn new(spec: &SpaceTimeSpec, cfg: RwConfig) -> Result<Self> {
        let report = classify_regime(spec)?;
        if report.predicted_regime == Regime::InfFlatLine && !matches!(report.growth, Growth::Polynomial(_)) {
            return Err(Error::ClassificationAmbiguous(
                "the flat infinite-horizon functionals need a warp of polynomial growth".into(),
            ));
        }
        Self::with_regime(spec, cfg, report.predicted_regime)
    }

    pub fn with_regime(spec: &SpaceTimeSpec, cfg: RwConfig, regime: Regime) -> Result<Self> {
        spec.validate()?;
        cfg.validate()?;
        if spec.kind == SpaceTimeKind::AntiDeSitter {
            return Err(Error::Domain("anti de Sitter space is not a Robertson-Walker space-time".into()));
        }
        let expected = Regime::from_flags(
            spec.fiber,
            matches!(regime, Regime::FiniteHorizonPoint | Regime::FiniteHorizonTangent),
            regime == Regime::FiniteHorizonTangent,
        );
        if expected != regime {
            return Err(Error::InvalidConfig(format!(
                "regime {} does not fit the {:?} fiber",
                regime.name(),
                spec.fiber
            )));
        }
        let scheme = match (cfg.scheme, spec.fiber) {
            (_, Fiber::Flat) => SpatialScheme::Direct,
            (None, _) => SpatialScheme::Lifted,
            (Some(s), _) => s,
        };
        if scheme == SpatialScheme::Direct && regime == Regime::InfHypCone {
            return Err(Error::InvalidConfig(
                "the hyperbolic infinite-horizon functionals need the lifted scheme".into(),
            ));
        }
        Ok(RwSimulator { spec: spec.clone(), cfg, regime, scheme })
    }

    pub fn initial_phase(&self) -> RwPhase {
        let d = self.spec.d;
        let fiber = self.spec.fiber;
        let lift = if !self.cfg.spatial || self.scheme == SpatialScheme::Direct {
            Lift::None
        } else {
            match (self.regime, fiber) {
                (Regime::InfSphereCircle, _) => Lift::Sphere(SphereLift::identity(d)),
                (Regime::InfHypCone, _) => Lift::Hyperbolic(HypLift::identity(d)),
                _ => Lift::Frame(FrameLift::identity(d)),
            }
        };
        let (x, theta) = if !self.cfg.spatial || matches!(lift, Lift::Hyperbolic(_)) {
            (DVector::zeros(0), DVector::zeros(0))
        } else {
            (fiber.origin(d), fiber.default_direction(d))
        };
        RwPhase {
            s: 0.0,
            t: self.cfg.t0,
            tdot: self.cfg.tdot0,
            rho: self.cfg.tdot0.acosh(),
            c: Accum::default(),
            d: Accum::default(),
            a: Accum::default(),
            d_minus_a: Accum::default(),
            x,
            theta,
            lift,
        }
    }

    /// Advances by one step. The temporal gaussian comes from the temporal
    /// stream, the `d-1` spatial ones from the spatial stream, both addressed
    /// by the step index.
    pub fn step(&self, ph: &mut RwPhase, key: &NoiseKey, step: u64) -> Result<()> {
        let spec = &self.spec;
        let ds = self.cfg.ds;
        let eta_t: f64 = key.rng(StreamRole::Temporal, 0, step).sample(StandardNormal);
        let (t1, rho1) = match self.cfg.temporal {
            TemporalScheme::Rapidity => rapidity_step(&spec.warp, spec.d, spec.sigma, ph.t, ph.rho, ds, eta_t)?,
            TemporalScheme::Euler => {
                let (t1, tdot1) = temporal_step(&spec.warp, spec.d, spec.sigma, ph.t, ph.tdot, ds, eta_t)?;
                (t1, tdot1.acosh())
            }
        };
        let inc = clocks_step(&spec.warp, ph.t, ph.rho, t1, ds);
        if self.cfg.spatial {
            let mut eta = vec![0.0; spec.d - 1];
            key.fill(StreamRole::Spatial, 0, step, &mut eta);
            let a_prev = ph.a.value();
            match &mut ph.lift {
                Lift::None => {
                    let (x, th) = spatial_step(spec.fiber, spec.d, spec.sigma, &ph.x, &ph.theta, &inc, &eta)?;
                    ph.x = x;
                    ph.theta = th;
                }
                Lift::Frame(l) => {
                    lift_step(spec.fiber, l, spec.sigma, &inc, &eta)?;
                    ph.x = l.x();
                    ph.theta = l.theta();
                }
                Lift::Sphere(l) => {
                    l.step(spec.sigma, &inc, a_prev, &eta);
                    ph.x = l.g.column(0).into_owned();
                    ph.theta = l.g.column(1).into_owned();
                }
                Lift::Hyperbolic(l) => l.step(spec.sigma, &inc, &eta),
            }
        }
        ph.t = t1;
        ph.rho = rho1;
        ph.tdot = rho1.cosh();
        ph.c.add(inc.dc);
        ph.d.add(inc.dd);
        ph.a.add(inc.da);
        ph.d_minus_a.add(inc.gap);
        ph.s += ds;
        let cad = self.cfg.reorth_cadence as u64;
        if cad > 0 && (step + 1).is_multiple_of(cad) {
            self.repair(ph);
        }
        Ok(())
    }

    fn repair(&self, ph: &mut RwPhase) {
        match &mut ph.lift {
            Lift::None => {}
            Lift::Frame(l) => {
                reorthonormalize(&mut l.b);
                if self.spec.fiber == Fiber::Hyperbolic {
                    let j = signature(1, self.spec.d);
                    q_gram_schmidt(&mut l.u, &j);
                } else {
                    reorthonormalize(&mut l.u);
                }
            }
            Lift::Sphere(l) => l.reorthonormalize(),
            Lift::Hyperbolic(l) => l.reorthonormalize(),
        }
    }

    pub fn sample(&self, ph: &RwPhase) -> RwSample {
        let u = match &ph.lift {
            Lift::Frame(l) => Some(row_major(&l.u)),
            _ => None,
        };
        let functionals = if self.cfg.spatial { Some(self.functionals(ph)) } else { None };
        RwSample {
            s: ph.s,
            t: ph.t,
            tdot: ph.tdot,
            c: ph.c.value(),
            d: ph.d.value(),
            a: ph.a.value(),
            d_minus_a: ph.d_minus_a.value(),
            x: ph.x.as_slice().to_vec(),
            theta: ph.theta.as_slice().to_vec(),
            u,
            functionals,
        }
    }

    fn functionals(&self, ph: &RwPhase) -> SampleFunctionals {
        let a = ph.a.value();
        match self.regime {
            Regime::FiniteHorizonPoint => SampleFunctionals::FiniteHorizonPoint,
            Regime::FiniteHorizonTangent => SampleFunctionals::FiniteHorizonTangent,
            Regime::InfFlatLine => {
                SampleFunctionals::InfFlatLine { delta: (&ph.x - &ph.theta * a).as_slice().to_vec() }
            }
            Regime::InfSphereCircle => {
                let (ca, sa) = (a.cos(), a.sin());
                match &ph.lift {
                    Lift::Sphere(l) => {
                        let recon = (&ph.x - l.reconstruct_x(a)).amax();
                        let n = l.bhat.nrows();
                        let q = (l.bhat.transpose() * &l.bhat - DMatrix::identity(n, n)).amax();
                        SampleFunctionals::InfSphereCircle {
                            bhat: row_major(&l.bhat),
                            bhat_e0: l.bhat.column(0).as_slice().to_vec(),
                            bhat_e1: l.bhat.column(1).as_slice().to_vec(),
                            recon_defect: recon,
                            q_defect: q,
                        }
                    }
                    _ => {
                        // plane frame rotated back by A
                        let e0 = &ph.x * ca - &ph.theta * sa;
                        let e1 = &ph.x * sa + &ph.theta * ca;
                        SampleFunctionals::InfSphereCircle {
                            bhat: vec![],
                            bhat_e0: e0.as_slice().to_vec(),
                            bhat_e1: e1.as_slice().to_vec(),
                            recon_defect: 0.0,
                            q_defect: 0.0,
                        }
                    }
                }
            }
            Regime::InfHypCone => match &ph.lift {
                Lift::Hyperbolic(l) => SampleFunctionals::InfHypCone {
                    v: l.v(),
                    delta_tilde: l.delta_tilde,
                    delta: l.delta(),
                    nil: l.h.as_slice().to_vec(),
                    direction: l.direction().as_slice().to_vec(),
                    theta_inf: l.theta_inf().as_slice().to_vec(),
                },
                _ => unreachable!("checked in the constructor"),
            },
        }
    }

    fn speed_and_fiber_defects(&self, ph: &RwPhase) -> (f64, f64) {
        let fiber = self.spec.fiber;
        match &ph.lift {
            Lift::Hyperbolic(l) => ((l.w().norm() - 1.0).abs(), 0.0),
            _ if ph.theta.is_empty() => (0.0, 0.0),
            _ => {
                let speed = (fiber_dot(fiber, &ph.theta, &ph.theta).sqrt() - 1.0).abs();
                let tangent = if fiber == Fiber::Flat { 0.0 } else { fiber_dot(fiber, &ph.x, &ph.theta).abs() };
                (speed, fiber.constraint_defect(ph.x.as_slice()).max(tangent))
            }
        }
    }

    /// Simulates one path on `[0, s_max]`, recording every `record_every`
    /// steps and the final state.
    pub fn simulate(&self, key: NoiseKey) -> std::result::Result<RwPathRecord, RwAborted> {
        let mut rec = RwPathRecord {
            regime: self.regime,
            samples: vec![],
            max_speed_defect: 0.0,
            max_fiber_defect: 0.0,
            max_recon_defect: 0.0,
            functional_gaps: 0,
        };
        let mut ph = self.initial_phase();
        let n = self.cfg.steps();
        let every = self.cfg.record_every as u64;
        let mut last: Option<RwSample> = None;
        for k in 0..=n {
            if k % every == 0 || k == n {
                let mut smp = self.sample(&ph);
                if !sample_finite(&smp) {
                    rec.functional_gaps += 1;
                    if let Some(prev) = &last {
                        smp.functionals = prev.functionals.clone();
                    }
                }
                if let Some(SampleFunctionals::InfSphereCircle { recon_defect, .. }) = &smp.functionals {
                    rec.max_recon_defect = rec.max_recon_defect.max(*recon_defect);
                }
                let (sd, fd) = self.speed_and_fiber_defects(&ph);
                rec.max_speed_defect = rec.max_speed_defect.max(sd);
                rec.max_fiber_defect = rec.max_fiber_defect.max(fd);
                last = Some(smp.clone());
                rec.samples.push(smp);
            }
            if k == n {
                break;
            }
            if let Err(error) = self.step(&mut ph, &key, k) {
                return Err(RwAborted { error, partial: rec });
            }
        }
        Ok(rec)
    }
}

fn sample_finite(s: &RwSample) -> bool {
    let ok = |v: &[f64]| v.iter().all(|x| x.is_finite());
    match &s.functionals {
        None | Some(SampleFunctionals::FiniteHorizonPoint) | Some(SampleFunctionals::FiniteHorizonTangent) => true,
        Some(SampleFunctionals::InfFlatLine { delta }) => ok(delta),
        Some(SampleFunctionals::InfSphereCircle { bhat, bhat_e0, bhat_e1, .. }) => {
            ok(bhat) && ok(bhat_e0) && ok(bhat_e1)
        }
        Some(SampleFunctionals::InfHypCone { v, delta_tilde, delta, nil, direction, theta_inf }) => {
            v.is_finite() && delta_tilde.is_finite() && delta.is_finite() && ok(nil) && ok(direction) && ok(theta_inf)
        }
    }
}

/// Tail residuals and terminal values of one path.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundaryFunctionals {
    pub x_tail: Option<f64>,
    pub theta_tail: Option<f64>,
    pub u_tail: Option<f64>,
    pub delta_tail: Option<f64>,
    pub bhat_tail: Option<f64>,
    pub d_minus_a_tail: Option<f64>,
    pub v_last: Option<f64>,
    pub delta_tilde_tail: Option<f64>,
    pub n_tail: Option<f64>,
    /// angle between the boundary direction from `n` and the direction of `x`
    /// at the last sample
    pub theta_inf_angle: Option<f64>,
    pub recon_max: Option<f64>,
}

/// Angle between unit vectors, stable near zero.
pub fn unit_angle(a: &[f64], b: &[f64]) -> f64 {
    let c: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    2.0 * (0.5 * c).min(1.0).asin()
}

pub fn boundary_functionals(rec: &RwPathRecord, split: f64) -> Result<BoundaryFunctionals> {
    let ss = &rec.samples;
    if ss.is_empty() {
        return Err(Error::InsufficientData("empty path".into()));
    }
    let tail = |pts: Vec<Vec<f64>>, metric| -> Result<Option<f64>> { cauchy_tail(&pts, split, metric).map(Some) };
    let finite = matches!(rec.regime, Regime::FiniteHorizonPoint | Regime::FiniteHorizonTangent);
    let mut out = BoundaryFunctionals::default();
    let has_x = !ss[0].x.is_empty();
    if has_x && finite {
        out.x_tail = tail(ss.iter().map(|s| s.x.clone()).collect(), TailMetric::Euclidean)?;
    }
    if has_x && (finite || rec.regime == Regime::InfFlatLine) {
        out.theta_tail = tail(ss.iter().map(|s| s.theta.clone()).collect(), TailMetric::Euclidean)?;
    }
    if ss[0].u.is_some() {
        out.u_tail = tail(ss.iter().map(|s| s.u.clone().unwrap_or_default()).collect(), TailMetric::MaxNorm)?;
    }
    if !finite {
        out.d_minus_a_tail = tail(ss.iter().map(|s| vec![s.d_minus_a]).collect(), TailMetric::Euclidean)?;
    }
    match ss[0].functionals {
        Some(SampleFunctionals::InfFlatLine { .. }) => {
            let pts = ss
                .iter()
                .map(|s| match &s.functionals {
                    Some(SampleFunctionals::InfFlatLine { delta }) => delta.clone(),
                    _ => vec![],
                })
                .collect();
            out.delta_tail = tail(pts, TailMetric::Euclidean)?;
        }
        Some(SampleFunctionals::InfSphereCircle { .. }) => {
            let mut recon: f64 = 0.0;
            let pts = ss
                .iter()
                .map(|s| match &s.functionals {
                    Some(SampleFunctionals::InfSphereCircle { bhat, bhat_e0, bhat_e1, recon_defect, .. }) => {
                        recon = recon.max(*recon_defect);
                        if bhat.is_empty() {
                            let mut v = bhat_e0.clone();
                            v.extend_from_slice(bhat_e1);
                            v
                        } else {
                            bhat.clone()
                        }
                    }
                    _ => vec![],
                })
                .collect();
            out.bhat_tail = tail(pts, TailMetric::MaxNorm)?;
            out.recon_max = Some(recon);
        }
        Some(SampleFunctionals::InfHypCone { .. }) => {
            let mut dt = vec![];
            let mut dl = vec![];
            let mut nil = vec![];
            for s in ss {
                if let Some(SampleFunctionals::InfHypCone { delta_tilde, delta, nil: n, .. }) = &s.functionals {
                    dt.push(vec![*delta_tilde]);
                    dl.push(vec![*delta]);
                    nil.push(n.clone());
                }
            }
            out.delta_tilde_tail = tail(dt, TailMetric::Euclidean)?;
            out.delta_tail = tail(dl, TailMetric::Euclidean)?;
            out.n_tail = tail(nil, TailMetric::MaxNorm)?;
            if let Some(SampleFunctionals::InfHypCone { v, direction, theta_inf, .. }) = &ss[ss.len() - 1].functionals {
                out.v_last = Some(*v);
                out.theta_inf_angle = Some(unit_angle(direction, theta_inf));
            }
        }
        _ => {}
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary_stats::{ks_statistic, median};
    use crate::frame_flow::{FrameElement, GroupTag};
    use crate::iwasawa::{decompose, NilParams};
    use proptest::prelude::*;
    use rand::Rng;

    fn spec(fiber: Fiber, warp: WarpFunction) -> SpaceTimeSpec {
        SpaceTimeSpec::rw(fiber, warp, 3, 1.0)
    }

    fn sim(fiber: Fiber, warp: WarpFunction, s_max: f64, record_every: usize) -> RwSimulator {
        let cfg = RwConfig { s_max, record_every, ..Default::default() };
        RwSimulator::new(&spec(fiber, warp), cfg).unwrap()
    }

    fn inc(dc: f64, dd: f64) -> ClockIncrement {
        ClockIncrement { dc, dd, da: dd, gap: 0.0, cdot: 0.0 }
    }

    #[test]
    fn free_motion_without_noise_or_expansion() {
        let (mut t, mut tdot) = (1.0, 1.7);
        for _ in 0..100 {
            (t, tdot) = temporal_step(&WarpFunction::Const, 3, 0.0, t, tdot, 0.01, 0.8).unwrap();
        }
        assert_eq!(tdot, 1.7);
        assert!((t - 2.7).abs() < 1e-12);
        let (_, rho) = rapidity_step(&WarpFunction::Const, 3, 0.0, 1.0, 0.9, 0.01, 0.8).unwrap();
        assert_eq!(rho, 0.9);
    }

    #[test]
    fn tdot_leaves_one_upwards() {
        for eta in [-3.0, 0.0, 2.0] {
            let (_, next) = temporal_step(&WarpFunction::Power(0.5), 3, 1.0, 2.0, 1.0, 1e-3, eta).unwrap();
            assert!((next - (1.0 + 1.5e-3)).abs() < 1e-15);
        }
    }

    #[test]
    fn unit_clock_rates() {
        let rho = 2f64.sqrt().acosh();
        let c = clocks_step(&WarpFunction::Const, 1.0, rho, 1.0 + 2f64.sqrt() * 1e-3, 1e-3);
        assert!((c.cdot - 1.0).abs() < 1e-14);
        assert!((c.dc - 1e-3).abs() < 1e-17);
        assert!((c.dd - 1e-3).abs() < 1e-17);
        assert!((c.gap - (c.dd - c.da)).abs() < 1e-18);
        // at tdot = 1 the rate is capped
        assert_eq!(clocks_step(&WarpFunction::Const, 1.0, 0.0, 1.0, 1.0).cdot, C_RATE_CAP);
    }

    #[test]
    fn rapidity_and_floored_euler_agree_in_law() {
        let warp = WarpFunction::Power(0.5);
        let run = |euler: bool, seed: u64| -> Vec<f64> {
            (0..400)
                .map(|p| {
                    let key = NoiseKey::new(seed, p);
                    let (mut t, mut tdot, mut rho) = (1.0, 2.0, 2f64.acosh());
                    for k in 0..2000 {
                        let eta: f64 = key.rng(StreamRole::Temporal, 0, k).sample(StandardNormal);
                        if euler {
                            (t, tdot) = temporal_step(&warp, 3, 1.0, t, tdot, 1e-3, eta).unwrap();
                        } else {
                            (t, rho) = rapidity_step(&warp, 3, 1.0, t, rho, 1e-3, eta).unwrap();
                        }
                    }
                    t
                })
                .collect()
        };
        let ks = ks_statistic(&run(true, 1), &run(false, 2));
        assert!(ks <= 0.1, "ks = {ks}");
    }

    #[test]
    fn frozen_clock_flat_step_is_a_straight_line() {
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let th = DVector::from_vec(vec![0.0, 0.6, 0.8]);
        let (x1, th1) = spatial_step(Fiber::Flat, 3, 1.0, &x, &th, &inc(0.0, 0.25), &[1.3, -0.4]).unwrap();
        assert_eq!(th1, th);
        assert!((x1 - (x + th * 0.25)).amax() < 1e-15);
    }

    #[test]
    fn sphere_direct_step_stays_on_the_unit_tangent_bundle() {
        let key = NoiseKey::new(5, 0);
        let mut x = Fiber::Sphere.origin(3);
        let mut th = Fiber::Sphere.default_direction(3);
        for k in 0..2000 {
            let eta = key.gaussians(StreamRole::Spatial, 0, k, 2);
            (x, th) = spatial_step(Fiber::Sphere, 3, 1.0, &x, &th, &inc(2e-3, 5e-3), &eta).unwrap();
            assert!((x.norm() - 1.0).abs() <= 1e-8);
            assert!(x.dot(&th).abs() <= 1e-8);
            assert!((th.norm() - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn hyperbolic_direct_step_stays_on_the_unit_tangent_bundle() {
        let key = NoiseKey::new(6, 0);
        let mut x = Fiber::Hyperbolic.origin(3);
        let mut th = Fiber::Hyperbolic.default_direction(3);
        for k in 0..2000 {
            let eta = key.gaussians(StreamRole::Spatial, 0, k, 2);
            (x, th) = spatial_step(Fiber::Hyperbolic, 3, 1.0, &x, &th, &inc(2e-3, 1e-3), &eta).unwrap();
            let scale = x[0] * x[0];
            assert!(Fiber::Hyperbolic.constraint_defect(x.as_slice()) <= 1e-8 * scale);
            assert!(fiber_dot(Fiber::Hyperbolic, &x, &th).abs() <= 1e-8 * scale);
        }
    }

    /// Geodesic random walk on the unit sphere with generator `Delta/2`.
    fn sphere_bm(start: &DVector<f64>, time: f64, h: f64, key: &NoiseKey) -> DVector<f64> {
        let n = start.len();
        let steps = (time / h).ceil().max(1.0) as u64;
        let h = time / steps as f64;
        let mut th = start.clone();
        for k in 0..steps {
            let g = DVector::from_vec(key.gaussians(StreamRole::Sampling, 0, k, n));
            let xi = (&g - &th * th.dot(&g)) * h.sqrt();
            let r = xi.norm();
            if r > 0.0 {
                th = &th * r.cos() + xi * (r.sin() / r);
                th /= th.norm();
            }
        }
        th
    }

    #[test]
    fn flat_direction_is_a_time_changed_sphere_motion() {
        let s = sim(Fiber::Flat, WarpFunction::Power(0.5), 3.0, 3000);
        let mut a = vec![];
        let mut b = vec![];
        for p in 0..500 {
            let rec = s.simulate(NoiseKey::new(11, p)).unwrap();
            let last = rec.samples.last().unwrap();
            a.push(last.theta[1]);
            let start = DVector::from_vec(vec![1.0, 0.0, 0.0]);
            let th = sphere_bm(&start, last.c, 1e-3, &NoiseKey::new(12, p));
            b.push(th[1]);
        }
        let ks = ks_statistic(&a, &b);
        assert!(ks <= 0.08, "ks = {ks}");
    }

    #[test]
    fn lift_without_noise_is_the_geodesic_frame_flow() {
        let mut l = FrameLift::identity(3);
        for _ in 0..100 {
            lift_step(Fiber::Sphere, &mut l, 0.0, &inc(1e-3, 0.01), &[0.4, -1.0]).unwrap();
        }
        assert!((&l.b - DMatrix::identity(4, 4)).amax() < 1e-15);
        let x = l.x();
        assert!((x[0] - 1f64.cos()).abs() < 1e-13 && (x[1] - 1f64.sin()).abs() < 1e-13);
    }

    #[test]
    fn lift_matches_the_frame_route_pathwise() {
        for fiber in [Fiber::Sphere, Fiber::Hyperbolic] {
            let s = sim(fiber, WarpFunction::Power(2.0), 5.0, 100);
            let key = NoiseKey::new(3, 0);
            let mut ph = s.initial_phase();
            let mut g = DMatrix::identity(4, 4);
            for k in 0..5000 {
                // replay the clocks of the step before it is taken
                let eta_t: f64 = key.rng(StreamRole::Temporal, 0, k).sample(StandardNormal);
                let (t1, _) = rapidity_step(&s.spec.warp, 3, 1.0, ph.t, ph.rho, 1e-3, eta_t).unwrap();
                let c = clocks_step(&s.spec.warp, ph.t, ph.rho, t1, 1e-3);
                let eta = key.gaussians(StreamRole::Spatial, 0, k, 2);
                frame_step(fiber, &mut g, 1.0, &c, &eta);
                s.step(&mut ph, &key, k).unwrap();
                let Lift::Frame(l) = &ph.lift else { panic!() };
                assert_eq!(l.b[(0, 0)], 1.0);
                assert!(l.b.column(0).rows(1, 3).amax() == 0.0 && l.b.row(0).columns(1, 3).amax() == 0.0);
            }
            let scale = g.amax();
            assert!((&ph.x - g.column(0)).amax() <= 1e-6 * scale, "{fiber:?}");
            assert!((&ph.theta - g.column(1)).amax() <= 1e-6 * scale, "{fiber:?}");
        }
    }

    #[test]
    fn finite_horizon_sphere_u_converges() {
        let s = sim(Fiber::Sphere, WarpFunction::Power(2.0), 40.0, 500);
        assert_eq!(s.regime, Regime::FiniteHorizonTangent);
        let res: Vec<f64> = (0..30)
            .map(|p| boundary_functionals(&s.simulate(NoiseKey::new(4, p)).unwrap(), 0.5).unwrap().u_tail.unwrap())
            .collect();
        let good = res.iter().filter(|r| **r <= 1e-2).count();
        assert!(good as f64 >= 0.9 * res.len() as f64, "{res:?}");
    }

    #[test]
    fn delta_cancels_on_a_light_path() {
        let s = sim(Fiber::Flat, WarpFunction::Power(0.5), 1.0, 10);
        let mut ph = s.initial_phase();
        let x0 = DVector::from_vec(vec![0.5, -0.25, 2.0]);
        ph.theta = DVector::from_vec(vec![0.0, 0.6, 0.8]);
        for a in [0.0, 1.5, 37.0] {
            ph.a = Accum::new(a);
            ph.x = &x0 + &ph.theta * a;
            let Some(SampleFunctionals::InfFlatLine { delta }) = s.sample(&ph).functionals else { panic!() };
            assert!((DVector::from_vec(delta) - &x0).amax() < 1e-13);
        }
    }

    #[test]
    fn spherical_frame_and_reconstruction() {
        let s = sim(Fiber::Sphere, WarpFunction::Power(0.5), 40.0, 200);
        assert_eq!(s.regime, Regime::InfSphereCircle);
        for p in 0..3 {
            let rec = s.simulate(NoiseKey::new(8, p)).unwrap();
            assert!(rec.max_recon_defect <= 1e-6, "{}", rec.max_recon_defect);
            for smp in &rec.samples {
                let Some(SampleFunctionals::InfSphereCircle { q_defect, .. }) = smp.functionals else { panic!() };
                assert!(q_defect <= 1e-8);
            }
            let bf = boundary_functionals(&rec, 0.5).unwrap();
            assert!(bf.bhat_tail.unwrap() <= 1e-2);
            assert!(bf.d_minus_a_tail.unwrap() <= 1e-2);
        }
    }

    #[test]
    fn hyperbolic_v_tends_to_one() {
        let s = sim(Fiber::Hyperbolic, WarpFunction::Power(0.5), 40.0, 1000);
        assert_eq!(s.regime, Regime::InfHypCone);
        let mut v = vec![];
        let mut ang = vec![];
        for p in 0..40 {
            let bf = boundary_functionals(&s.simulate(NoiseKey::new(9, p)).unwrap(), 0.5).unwrap();
            v.push(bf.v_last.unwrap());
            ang.push(bf.theta_inf_angle.unwrap());
            assert!(bf.v_last.unwrap().abs() <= 1.0);
        }
        assert!(median(&v) >= 0.95);
        assert!(median(&ang) <= 0.05);
    }

    #[test]
    fn hyperbolic_coordinates_match_the_frame_and_its_decomposition() {
        // short horizon so that the frame stays representable
        let s = sim(Fiber::Hyperbolic, WarpFunction::Power(0.5), 2.0, 100);
        let key = NoiseKey::new(10, 0);
        let mut ph = s.initial_phase();
        let mut g = DMatrix::identity(4, 4);
        for k in 0..2000 {
            let eta_t: f64 = key.rng(StreamRole::Temporal, 0, k).sample(StandardNormal);
            let (t1, _) = rapidity_step(&s.spec.warp, 3, 1.0, ph.t, ph.rho, 1e-3, eta_t).unwrap();
            let c = clocks_step(&s.spec.warp, ph.t, ph.rho, t1, 1e-3);
            let eta = key.gaussians(StreamRole::Spatial, 0, k, 2);
            frame_step(Fiber::Hyperbolic, &mut g, 1.0, &c, &eta);
            s.step(&mut ph, &key, k).unwrap();
        }
        let Lift::Hyperbolic(l) = &ph.lift else { panic!() };
        let scale = g.amax();
        assert!(scale > 2.0);
        assert!((l.frame() - &g).amax() <= 1e-8 * scale);
        // NAK factorisation of g u^{-1}
        let h = FrameElement::new(GroupTag::So1d, 3, &g * l.u.transpose()).unwrap();
        let c = decompose(&h).unwrap();
        assert!((c.a_params[0] - l.beta).abs() <= 1e-8 * scale);
        let NilParams::Rank1 { h: nil } = &c.nil else { panic!() };
        assert!((DVector::from_vec(nil.clone()) - &l.h).amax() <= 1e-8 * scale);
        assert!((&c.k - &l.k).amax() <= 1e-8 * scale);
        // distance functional against the frame
        let x = g.column(0);
        let dist = x.rows(1, 3).norm().asinh();
        let Some(SampleFunctionals::InfHypCone { delta, v, .. }) = s.sample(&ph).functionals else { panic!() };
        assert!((delta - (dist - ph.a.value())).abs() <= 1e-8 * scale);
        assert!((v - (&l.k * l.u.column(1))[1]).abs() < 1e-15);
    }

    #[test]
    fn temporal_path_ignores_the_spatial_part() {
        let on = sim(Fiber::Sphere, WarpFunction::Power(0.5), 5.0, 50);
        let mut off = on.clone();
        off.cfg.spatial = false;
        let a = on.simulate(NoiseKey::new(2, 7)).unwrap();
        let b = off.simulate(NoiseKey::new(2, 7)).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(
                (x.t.to_bits(), x.tdot.to_bits(), x.c.to_bits()),
                (y.t.to_bits(), y.tdot.to_bits(), y.c.to_bits())
            );
        }
        assert!(b.samples[0].functionals.is_none());
    }

    #[test]
    fn clocks_increase_and_speed_is_consistent() {
        for fiber in [Fiber::Flat, Fiber::Sphere, Fiber::Hyperbolic] {
            let s = sim(fiber, WarpFunction::Power(0.5), 10.0, 10);
            let rec = s.simulate(NoiseKey::new(13, 0)).unwrap();
            for w in rec.samples.windows(2) {
                assert!(w[1].c > w[0].c && w[1].d > w[0].d && w[1].a > w[0].a);
            }
            assert!(rec.max_speed_defect <= 1e-6);
            assert!(rec.max_fiber_defect <= 1e-8);
        }
    }

    #[test]
    fn same_key_same_record() {
        let s = sim(Fiber::Hyperbolic, WarpFunction::Power(0.5), 2.0, 100);
        assert_eq!(s.simulate(NoiseKey::new(1, 2)).unwrap(), s.simulate(NoiseKey::new(1, 2)).unwrap());
    }

    #[test]
    fn configuration_errors() {
        let ads = SpaceTimeSpec::anti_de_sitter(3, 1.0);
        assert!(matches!(
            RwSimulator::with_regime(&ads, RwConfig::default(), Regime::InfFlatLine),
            Err(Error::Domain(_))
        ));
        let hyp = spec(Fiber::Hyperbolic, WarpFunction::Power(0.5));
        let cfg = RwConfig { scheme: Some(SpatialScheme::Direct), ..Default::default() };
        assert!(matches!(RwSimulator::new(&hyp, cfg), Err(Error::InvalidConfig(_))));
        let cfg = RwConfig { ds: 0.0, ..Default::default() };
        assert!(matches!(RwSimulator::new(&hyp, cfg), Err(Error::InvalidConfig(_))));
        let flat = spec(Fiber::Flat, WarpFunction::Power(0.5));
        assert!(RwSimulator::with_regime(&flat, RwConfig::default(), Regime::InfSphereCircle).is_err());
    }

    #[test]
    fn samples_serialize_with_a_regime_tag() {
        let s = sim(Fiber::Hyperbolic, WarpFunction::Power(0.5), 0.1, 50);
        let rec = s.simulate(NoiseKey::new(1, 0)).unwrap();
        let line = serde_json::to_string(&rec.samples[1]).unwrap();
        assert!(line.contains("\"regime\":\"inf_hyp_cone\""));
        let back: RwSample = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec.samples[1]);
    }

    proptest! {
        #[test]
        fn rapidity_stays_positive(rho in 0.0f64..3.0, eta in -8.0f64..8.0, t in 0.5f64..1e3) {
            let (t1, r1) = rapidity_step(&WarpFunction::Power(0.5), 3, 1.0, t, rho, 1e-3, eta).unwrap();
            prop_assert!(r1 > 0.0);
            prop_assert!(t1 > t);
        }

        #[test]
        fn flat_step_keeps_a_unit_direction(a in -3.0f64..3.0, b in -3.0f64..3.0, dc in 0.0f64..0.1, dd in 0.0f64..10.0) {
            let th = DVector::from_vec(vec![a.cos() * b.sin(), a.sin() * b.sin(), b.cos()]);
            let x = DVector::zeros(3);
            let (x1, th1) = spatial_step(Fiber::Flat, 3, 1.0, &x, &th, &inc(dc, dd), &[a, b]).unwrap();
            prop_assert!((th1.norm() - 1.0).abs() <= 1e-12);
            prop_assert!((x1.norm() - dd).abs() <= 1e-12 * dd.max(1.0));
        }
    }
}
