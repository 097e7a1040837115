//! Euler-Maruyama integration of the relativistic diffusion in chart
//! coordinates `(t, x)`, with mass-shell and fiber re-projection after every
//! step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot_compensated, householder_completion};
use crate::rng::{NoiseKey, StreamRole};
use crate::spacetime::{geodesic_accel, Fiber, SpaceTimeKind, SpaceTimeSpec, FIBER_TOL};

/// Relative tolerance for accepting a state as on-shell.
pub const SHELL_TOL: f64 = 1e-6;
/// Maximum number of step halvings before a path is abandoned.
pub const MAX_HALVINGS: u32 = 20;
/// Cap on the integrand of the clock `C` near `tdot = 1`.
pub const C_RATE_CAP: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseState {
    /// `(t, x)`, with `x` ambient for curved fibers
    pub xi: DVector<f64>,
    /// `(tdot, xdot)`
    pub xidot: DVector<f64>,
    /// proper time
    pub s: f64,
}

impl PhaseState {
    pub fn t(&self) -> f64 {
        self.xi[0]
    }

    pub fn tdot(&self) -> f64 {
        self.xidot[0]
    }

    /// On-shell state at fiber position `x` moving along the unit spatial
    /// direction `dir` (orthonormal for the fiber metric) with time speed `tdot`.
    pub fn on_shell(spec: &SpaceTimeSpec, t: f64, x: &[f64], tdot: f64, dir: &[f64]) -> Result<Self> {
        if tdot < 1.0 {
            return Err(Error::StateInvalid(format!("tdot = {tdot} < 1")));
        }
        let alpha = spec.warp.alpha(t);
        let rho = (tdot * tdot - 1.0).sqrt();
        let n = x.len();
        let mut xi = DVector::zeros(n + 1);
        xi[0] = t;
        xi.rows_mut(1, n).copy_from_slice(x);
        let mut xidot = DVector::zeros(n + 1);
        xidot[0] = tdot;
        for i in 0..n {
            xidot[i + 1] = rho * dir[i] / alpha;
        }
        let st = PhaseState { xi, xidot, s: 0.0 };
        validate_state(spec, &st)?;
        Ok(st)
    }

    /// Default start: `t0`, fiber origin, moving along the default direction.
    pub fn default_start(spec: &SpaceTimeSpec, t0: f64, tdot0: f64) -> Result<Self> {
        let x = spec.fiber.origin(spec.d);
        let dir = spec.fiber.default_direction(spec.d);
        Self::on_shell(spec, t0, x.as_slice(), tdot0, dir.as_slice())
    }
}

/// `g(v, v)` at `point`, evaluated with compensated summation.
pub fn pseudo_norm(spec: &SpaceTimeSpec, point: &[f64], v: &[f64]) -> f64 {
    let a = spec.warp.alpha(point[0]);
    let x = &point[1..];
    let w = spec.fiber.ambient_signs(spec.d);
    let mut terms: Vec<(f64, f64)> = Vec::with_capacity(v.len());
    terms.push((-v[0], v[0]));
    for i in 1..v.len() {
        let av = a * v[i];
        terms.push((w[i - 1] * av, av));
    }
    let mut q = dot_compensated(terms);
    if spec.fiber == Fiber::Hyperbolic {
        let qxv: f64 = (0..x.len()).map(|i| w[i] * x[i] * v[i + 1]).sum();
        q += 2.0 * a * a * qxv * qxv;
    }
    q
}

fn tangent_defect(fiber: Fiber, x: &[f64], v: &[f64]) -> f64 {
    match fiber {
        Fiber::Flat => 0.0,
        Fiber::Sphere => x.iter().zip(v).map(|(a, b)| a * b).sum::<f64>().abs(),
        Fiber::Hyperbolic => (-x[0] * v[0] + x[1..].iter().zip(&v[1..]).map(|(a, b)| a * b).sum::<f64>()).abs(),
    }
}

pub fn validate_state(spec: &SpaceTimeSpec, st: &PhaseState) -> Result<()> {
    let n = spec.chart_dim();
    if st.xi.len() != n || st.xidot.len() != n {
        return Err(Error::Dimension { expected: n, got: st.xi.len() });
    }
    if spec.kind == SpaceTimeKind::AntiDeSitter {
        return Err(Error::Domain("no chart integrator for anti de Sitter space".into()));
    }
    if spec.kind == SpaceTimeKind::Rw && !(st.t() > 0.0) {
        return Err(Error::Domain(format!("t = {} <= 0", st.t())));
    }
    let x = &st.xi.as_slice()[1..];
    let v = &st.xidot.as_slice()[1..];
    let fd = spec.fiber.constraint_defect(x);
    if fd > FIBER_TOL {
        return Err(Error::StateInvalid(format!("fiber defect {fd:.3e}")));
    }
    let td = tangent_defect(spec.fiber, x, v);
    let vn = v.iter().map(|a| a.abs()).fold(0.0, f64::max);
    if td > FIBER_TOL * (1.0 + vn) {
        return Err(Error::StateInvalid(format!("velocity not tangent to the fiber ({td:.3e})")));
    }
    let q = pseudo_norm(spec, st.xi.as_slice(), st.xidot.as_slice());
    let tdot = st.tdot();
    if !((q + 1.0).abs() <= SHELL_TOL * (1.0 + tdot * tdot)) || tdot <= 0.0 {
        return Err(Error::StateInvalid(format!("g(xidot, xidot) = {q}")));
    }
    Ok(())
}

/// `c^{mu nu} = xidot^mu xidot^nu + g^{mu nu}`.
pub fn noise_covariance(spec: &SpaceTimeSpec, st: &PhaseState) -> Result<DMatrix<f64>> {
    validate_state(spec, st)?;
    let (_, ginv) = crate::spacetime::metric_at(spec, st.xi.as_slice())?;
    Ok(&st.xidot * st.xidot.transpose() + ginv)
}

/// Orthonormal spatial frame for `alpha^2 h` at `x` and its inverse.
fn spatial_frame(spec: &SpaceTimeSpec, x: &[f64], alpha: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = x.len();
    match spec.fiber {
        Fiber::Flat | Fiber::Sphere => (DMatrix::identity(n, n) / alpha, DMatrix::identity(n, n) * alpha),
        Fiber::Hyperbolic => {
            // hyperbolic translation taking e0 to x; orthonormal for the
            // completed fiber metric, with the normal as first column
            let x0 = x[0];
            let xv = DVector::from_column_slice(&x[1..]);
            let mut b = DMatrix::zeros(n, n);
            b[(0, 0)] = x0;
            for i in 1..n {
                b[(0, i)] = x[i];
                b[(i, 0)] = x[i];
            }
            let inner = DMatrix::identity(n - 1, n - 1) + &xv * xv.transpose() / (1.0 + x0);
            b.view_mut((1, 1), (n - 1, n - 1)).copy_from(&inner);
            // inverse: B^{-1} = J B^T J for a Q-orthogonal B
            let mut binv = b.transpose();
            for i in 1..n {
                binv[(0, i)] = -binv[(0, i)];
                binv[(i, 0)] = -binv[(i, 0)];
            }
            (b / alpha, binv * alpha)
        }
    }
}

/// Square factor `L` with `L L^T = c^{mu nu}` built from a Lorentz boost
/// frame adapted to `xidot`. The last column is zero (the kernel direction).
pub fn noise_factor(spec: &SpaceTimeSpec, st: &PhaseState) -> DMatrix<f64> {
    let n = st.xi.len();
    let m = n - 1;
    let alpha = spec.warp.alpha(st.t());
    let (f, finv) = spatial_frame(spec, &st.xi.as_slice()[1..], alpha);
    let tdot = st.tdot();
    let w = &finv * st.xidot.rows(1, m);
    let rho = w.norm();
    let dir = if rho > 0.0 {
        w / rho
    } else {
        let mut e = DVector::zeros(m);
        e[if spec.fiber == Fiber::Hyperbolic && m > 1 { 1 } else { 0 }] = 1.0;
        e
    };
    let h = householder_completion(&dir);
    let mut l = DMatrix::zeros(n, n);
    l[(0, 0)] = rho;
    let par = &f * (&dir * tdot);
    l.view_mut((1, 0), (m, 1)).copy_from(&par);
    let perp = &f * h.columns(1, m - 1);
    l.view_mut((1, 1), (m, m - 1)).copy_from(&perp);
    l
}

fn project_fiber(fiber: Fiber, xi: &mut DVector<f64>, xidot: &mut DVector<f64>) {
    let n = xi.len();
    match fiber {
        Fiber::Flat => {}
        Fiber::Sphere => {
            let r = xi.rows(1, n - 1).norm();
            xi.rows_mut(1, n - 1).unscale_mut(r);
            let c: f64 = (1..n).map(|i| xi[i] * xidot[i]).sum();
            for i in 1..n {
                xidot[i] -= c * xi[i];
            }
        }
        Fiber::Hyperbolic => {
            let q: f64 = -xi[1] * xi[1] + (2..n).map(|i| xi[i] * xi[i]).sum::<f64>();
            let r = (-q).sqrt();
            xi.rows_mut(1, n - 1).unscale_mut(r);
            let c: f64 = -xi[1] * xidot[1] + (2..n).map(|i| xi[i] * xidot[i]).sum::<f64>();
            for i in 1..n {
                xidot[i] += c * xi[i];
            }
        }
    }
}

/// One Euler-Maruyama step with `eta` standard normals (one per chart
/// coordinate), followed by fiber projection and a return to the mass shell.
pub fn em_step(spec: &SpaceTimeSpec, st: &PhaseState, ds: f64, eta: &[f64]) -> Result<PhaseState> {
    let n = st.xi.len();
    if eta.len() != n {
        return Err(Error::Dimension { expected: n, got: eta.len() });
    }
    if !(ds > 0.0) {
        return Err(Error::InvalidConfig(format!("ds = {ds}")));
    }
    let sigma = spec.sigma;
    let acc = geodesic_accel(spec, st.xi.as_slice(), st.xidot.as_slice());
    let mut xi = &st.xi + &st.xidot * ds;
    let drift_scale = spec.d as f64 * sigma * sigma / 2.0;
    let mut xidot = &st.xidot + (&st.xidot * drift_scale - acc) * ds;
    if sigma > 0.0 {
        let l = noise_factor(spec, st);
        xidot += l * DVector::from_column_slice(eta) * (sigma * ds.sqrt());
    }
    if spec.kind == SpaceTimeKind::Rw && !(xi[0] > 0.0) {
        return Err(Error::StepRejected(format!("t = {} left the chart", xi[0])));
    }
    project_fiber(spec.fiber, &mut xi, &mut xidot);
    // Back onto the shell through the time component. Rescaling the whole
    // vector instead turns the O(tdot^2 (H tdot ds)^2) shell error of the
    // Euler step into a relative loss of tdot of the same size per step,
    // which caps the growth of tdot on expanding warps.
    if !(xidot[0] > 0.0) {
        return Err(Error::StepRejected(format!("velocity left the future cone (tdot = {})", xidot[0])));
    }
    let mut spatial = xidot.clone();
    spatial[0] = 0.0;
    let v2 = pseudo_norm(spec, xi.as_slice(), spatial.as_slice());
    if !(v2 >= 0.0) || !v2.is_finite() {
        return Err(Error::StepRejected(format!("spatial velocity is not spacelike (h = {v2})")));
    }
    xidot[0] = (1.0 + v2).sqrt();
    Ok(PhaseState { xi, xidot, s: st.s + ds })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub s: f64,
    pub t: f64,
    pub tdot: f64,
    pub x: Vec<f64>,
    pub xdot: Vec<f64>,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "D")]
    pub d: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub samples: Vec<PathSample>,
    /// largest `|g(xidot, xidot) + 1|` seen after any step
    pub max_pseudo_norm_defect: f64,
    /// largest fiber constraint residual seen after any step
    pub max_fiber_defect: f64,
    pub halvings: u64,
}

impl PathRecord {
    pub fn last(&self) -> Option<&PathSample> {
        self.samples.last()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathAborted {
    pub error: Error,
    pub partial: PathRecord,
}

impl std::fmt::Display for PathAborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "path aborted after {} samples: {}", self.partial.samples.len(), self.error)
    }
}

impl std::error::Error for PathAborted {}

fn sample(st: &PhaseState, c: f64, d: f64) -> PathSample {
    let n = st.xi.len();
    PathSample {
        s: st.s,
        t: st.t(),
        tdot: st.tdot(),
        x: st.xi.as_slice()[1..n].to_vec(),
        xdot: st.xidot.as_slice()[1..n].to_vec(),
        c,
        d,
    }
}

fn clock_rates(spec: &SpaceTimeSpec, st: &PhaseState) -> (f64, f64) {
    let e = st.tdot() * st.tdot() - 1.0;
    let c = if e > 1.0 / C_RATE_CAP { 1.0 / e } else { C_RATE_CAP };
    (c, e.max(0.0).sqrt() / spec.warp.alpha(st.t()))
}

/// One outer step of size `ds`; on rejection the step is redone as `2^k`
/// sub-steps with fresh noise, `k = 1..=MAX_HALVINGS`.
fn advance(
    spec: &SpaceTimeSpec,
    st: &PhaseState,
    ds: f64,
    key: &NoiseKey,
    step: u64,
) -> std::result::Result<(PhaseState, u32), Error> {
    let n = st.xi.len();
    let mut eta = vec![0.0; n];
    let mut last_err = None;
    for depth in 0..=MAX_HALVINGS {
        let pieces = 1u64 << depth;
        let h = ds / pieces as f64;
        let mut rng = key.rng(StreamRole::Base, depth as u64, step);
        let mut cur = st.clone();
        let mut ok = true;
        for _ in 0..pieces {
            for e in eta.iter_mut() {
                *e = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
            }
            match em_step(spec, &cur, h, &eta) {
                Ok(next) => cur = next,
                Err(e @ Error::StepRejected(_)) => {
                    last_err = Some(e);
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if ok {
            cur.s = st.s + ds;
            return Ok((cur, depth));
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Internal("halving loop".into())))
}

/// Simulates one path on `[0, s_max]`, recording every `record_every` steps.
/// Deterministic in `(spec, initial, ds, s_max, key)`.
pub fn simulate_path(
    spec: &SpaceTimeSpec,
    initial: &PhaseState,
    ds: f64,
    s_max: f64,
    key: NoiseKey,
    record_every: usize,
) -> std::result::Result<PathRecord, PathAborted> {
    let abort = |error: Error, partial: PathRecord| PathAborted { error, partial };
    if !(s_max > 0.0) || record_every == 0 || !(ds > 0.0) {
        return Err(abort(Error::InvalidConfig("s_max, ds > 0 and record_every >= 1".into()), PathRecord::default()));
    }
    if let Err(e) = validate_state(spec, initial) {
        return Err(abort(e, PathRecord::default()));
    }
    let steps = (s_max / ds).round() as u64;
    let mut rec = PathRecord::default();
    let mut st = initial.clone();
    let (mut c, mut d) = (0.0, 0.0);
    rec.samples.push(sample(&st, c, d));
    let (mut rc, mut rd) = clock_rates(spec, &st);
    for k in 0..steps {
        match advance(spec, &st, ds, &key, k) {
            Ok((next, depth)) => {
                st = next;
                rec.halvings += depth as u64;
            }
            Err(e) => return Err(abort(e, rec)),
        }
        let (nc, nd) = clock_rates(spec, &st);
        c += 0.5 * (rc + nc) * ds;
        d += 0.5 * (rd + nd) * ds;
        (rc, rd) = (nc, nd);
        let q = pseudo_norm(spec, st.xi.as_slice(), st.xidot.as_slice());
        rec.max_pseudo_norm_defect = rec.max_pseudo_norm_defect.max((q + 1.0).abs());
        rec.max_fiber_defect = rec.max_fiber_defect.max(spec.fiber.constraint_defect(&st.xi.as_slice()[1..]));
        if (k + 1) % record_every as u64 == 0 || k + 1 == steps {
            rec.samples.push(sample(&st, c, d));
        }
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spacetime::WarpFunction;
    use approx::assert_relative_eq;

    fn rw(fiber: Fiber, warp: WarpFunction) -> SpaceTimeSpec {
        SpaceTimeSpec::rw(fiber, warp, 3, 1.0)
    }

    /// Random on-shell state for a given spec.
    fn random_state(spec: &SpaceTimeSpec, seed: u64) -> PhaseState {
        let k = NoiseKey::new(seed, 7);
        let n = spec.fiber.ambient_dim(spec.d);
        let z = k.gaussians(StreamRole::Sampling, 0, 0, 2 * n + 2);
        let t = 0.5 + z[0].abs() * 2.0;
        let tdot = 1.0 + z[1].abs() * 3.0;
        let mut x: Vec<f64> = z[2..2 + n].to_vec();
        let mut v = DVector::from_column_slice(&z[2 + n..2 + 2 * n]);
        match spec.fiber {
            Fiber::Flat => {}
            Fiber::Sphere => {
                let r = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                x.iter_mut().for_each(|a| *a /= r);
                let xv = DVector::from_column_slice(&x);
                let c = xv.dot(&v);
                v -= xv * c;
            }
            Fiber::Hyperbolic => {
                x[0] = (1.0 + x[1..].iter().map(|a| a * a).sum::<f64>()).sqrt();
                let c = -x[0] * v[0] + (1..n).map(|i| x[i] * v[i]).sum::<f64>();
                for i in 0..n {
                    v[i] += c * x[i];
                }
            }
        }
        // normalise v in the fiber metric
        let w = spec.fiber.ambient_signs(spec.d);
        let vn = (0..n).map(|i| w[i] * v[i] * v[i]).sum::<f64>().sqrt();
        v /= vn;
        PhaseState::on_shell(spec, t, &x, tdot, v.as_slice()).unwrap()
    }

    #[test]
    fn covariance_at_rest_in_minkowski() {
        let spec = SpaceTimeSpec::minkowski(3, 1.0);
        let st = PhaseState::on_shell(&spec, 0.0, &[0.0; 3], 1.0, &[1.0, 0.0, 0.0]).unwrap();
        let c = noise_covariance(&spec, &st).unwrap();
        assert_eq!(c, DMatrix::from_diagonal(&DVector::from_vec(vec![0., 1., 1., 1.])));
    }

    #[test]
    fn covariance_kernel_is_lowered_velocity() {
        let spec = SpaceTimeSpec::minkowski(3, 1.0);
        let r: f64 = 1.3;
        let st = PhaseState::on_shell(&spec, 0.0, &[0.0; 3], r.cosh(), &[1.0, 0.0, 0.0]).unwrap();
        let c = noise_covariance(&spec, &st).unwrap();
        let gx = DVector::from_vec(vec![-r.cosh(), r.sinh(), 0.0, 0.0]);
        assert!((c * gx).amax() < 1e-12);
    }

    #[test]
    fn covariance_rank_and_factor_on_random_states() {
        for fiber in [Fiber::Flat, Fiber::Sphere, Fiber::Hyperbolic] {
            let spec = rw(fiber, WarpFunction::Power(0.5));
            for s in 0..50 {
                let st = random_state(&spec, s);
                let c = noise_covariance(&spec, &st).unwrap();
                let scale = c.amax();
                // SVD oracle for the rank
                let sv = c.clone().svd(false, false).singular_values;
                let small = sv.iter().filter(|v| **v < 1e-8 * scale).count();
                assert_eq!(small, 1, "{fiber:?}: {sv}");
                let ev = c.clone().symmetric_eigen().eigenvalues;
                assert!(ev.min() >= -1e-10 * scale);
                let l = noise_factor(&spec, &st);
                assert!((&l * l.transpose() - &c).amax() < 1e-10 * scale, "{fiber:?}");
                // the noise is g-orthogonal to the velocity
                let (g, _) = crate::spacetime::metric_at(&spec, st.xi.as_slice()).unwrap();
                let eta = DVector::from_vec(NoiseKey::new(s, 1).gaussians(StreamRole::Base, 0, 0, l.ncols()));
                let dm = &l * eta;
                assert!((dm.dot(&(&g * &st.xidot))).abs() < 1e-8 * (1.0 + scale));
            }
        }
    }

    #[test]
    fn off_shell_state_is_invalid() {
        let spec = SpaceTimeSpec::minkowski(3, 1.0);
        let mut st = PhaseState::on_shell(&spec, 0.0, &[0.0; 3], 2.0, &[1.0, 0.0, 0.0]).unwrap();
        st.xidot[0] = 3.0;
        assert!(matches!(noise_covariance(&spec, &st), Err(Error::StateInvalid(_))));
    }

    #[test]
    fn minkowski_geodesic_is_a_straight_line() {
        let spec = SpaceTimeSpec { sigma: 0.0, ..SpaceTimeSpec::minkowski(3, 1.0) };
        let st0 = PhaseState::on_shell(&spec, 0.0, &[1.0, 2.0, 3.0], 2.5, &[0.6, 0.0, 0.8]).unwrap();
        let mut st = st0.clone();
        let ds = 1e-3;
        let n = 5000;
        for _ in 0..n {
            st = em_step(&spec, &st, ds, &[0.0; 4]).unwrap();
        }
        let expect = &st0.xi + &st0.xidot * (n as f64 * ds);
        assert!((&st.xi - expect).amax() < 1e-12 * n as f64);
        assert!((&st.xidot - &st0.xidot).amax() < 1e-13);
    }

    /// Classical RK4 on the intrinsic geodesic equations
    /// `t'' = -alpha alpha' h(x', x')`, `x'' = -2 H t' x' - kappa h(x', x') x`.
    fn rk4_geodesic(spec: &SpaceTimeSpec, st: &PhaseState, ds: f64, steps: usize) -> PhaseState {
        let w = spec.fiber.ambient_signs(spec.d);
        let kappa = spec.kappa();
        let f = |y: &DVector<f64>| {
            let n = y.len() / 2;
            let t = y[0];
            let h: f64 = (1..n).map(|i| w[i - 1] * y[n + i] * y[n + i]).sum();
            let mut out = DVector::zeros(2 * n);
            out.rows_mut(0, n).copy_from(&y.rows(n, n));
            out[n] = -spec.warp.alpha(t) * spec.warp.dalpha(t) * h;
            for i in 1..n {
                out[n + i] = -2.0 * spec.warp.hubble(t) * y[n] * y[n + i] - kappa * h * y[i];
            }
            out
        };
        let n = st.xi.len();
        let mut y = DVector::zeros(2 * n);
        y.rows_mut(0, n).copy_from(&st.xi);
        y.rows_mut(n, n).copy_from(&st.xidot);
        for _ in 0..steps {
            let k1 = f(&y);
            let k2 = f(&(&y + &k1 * (ds / 2.0)));
            let k3 = f(&(&y + &k2 * (ds / 2.0)));
            let k4 = f(&(&y + &k3 * ds));
            y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (ds / 6.0);
        }
        PhaseState { xi: y.rows(0, n).into_owned(), xidot: y.rows(n, n).into_owned(), s: st.s + ds * steps as f64 }
    }

    fn first_integral_defect(spec: &SpaceTimeSpec, st: &PhaseState, k: f64) -> f64 {
        let a = spec.warp.alpha(st.t());
        (st.tdot() * st.tdot() - 1.0 - k / (a * a)).abs()
    }

    #[test]
    fn deterministic_rw_paths_keep_the_geodesic_integral() {
        let spec = SpaceTimeSpec { sigma: 0.0, ..rw(Fiber::Flat, WarpFunction::Power(0.5)) };
        let st0 = PhaseState::on_shell(&spec, 1.0, &[0.0; 3], 2.0, &[1.0, 0.0, 0.0]).unwrap();
        let a0 = spec.warp.alpha(1.0);
        let v0 = st0.xidot.rows(1, 3).norm();
        let k = a0.powi(4) * v0 * v0;

        // oracle: RK4 conserves the first integral to 1e-6 on [0, 10]
        let mut r = st0.clone();
        for _ in 0..100 {
            r = rk4_geodesic(&spec, &r, 1e-3, 100);
            assert!(first_integral_defect(&spec, &r, k) < 1e-6);
        }

        // Euler with projection converges to the oracle at first order
        let errs: Vec<f64> = [1e-3, 5e-4, 2.5e-4]
            .iter()
            .map(|&ds| {
                let mut st = st0.clone();
                let n = (10.0 / ds) as usize;
                for _ in 0..n {
                    st = em_step(&spec, &st, ds, &[0.0; 4]).unwrap();
                }
                (&st.xi - &r.xi).amax()
            })
            .collect();
        let r1 = errs[0] / errs[1];
        let r2 = errs[1] / errs[2];
        assert!((1.7..2.3).contains(&r1) && (1.7..2.3).contains(&r2), "{errs:?}");
    }

    #[test]
    fn euler_path_keeps_the_geodesic_integral_to_1e6() {
        let spec = SpaceTimeSpec { sigma: 0.0, ..rw(Fiber::Flat, WarpFunction::Power(0.5)) };
        let st0 = PhaseState::on_shell(&spec, 1.0, &[0.0; 3], 2.0, &[1.0, 0.0, 0.0]).unwrap();
        let k = 3.0; // alpha(1)^4 |xdot|^2 = tdot^2 - 1
        let mut st = st0.clone();
        let ds = 1e-7;
        let mut worst: f64 = 0.0;
        for i in 0..(10.0 / ds) as usize {
            st = em_step(&spec, &st, ds, &[0.0; 4]).unwrap();
            if i % 10_000 == 0 {
                worst = worst.max(first_integral_defect(&spec, &st, k));
            }
        }
        worst = worst.max(first_integral_defect(&spec, &st, k));
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn curved_fibers_follow_geodesics_without_noise() {
        // on the sphere the speed in the fiber metric obeys alpha^2 |xdot| = const
        for fiber in [Fiber::Sphere, Fiber::Hyperbolic] {
            let spec = SpaceTimeSpec { sigma: 0.0, ..rw(fiber, WarpFunction::Power(0.5)) };
            let st0 = PhaseState::default_start(&spec, 1.0, 2.0).unwrap();
            let r = rk4_geodesic(&spec, &st0, 1e-3, 2000);
            let mut st = st0.clone();
            for _ in 0..20000 {
                st = em_step(&spec, &st, 1e-4, &[0.0; 5]).unwrap();
            }
            assert!((&st.xi - &r.xi).amax() < 1e-2, "{fiber:?}");
            assert!(spec.fiber.constraint_defect(&st.xi.as_slice()[1..]) < 1e-12);
        }
    }

    #[test]
    fn pseudo_norm_after_every_step() {
        let cases = [
            (SpaceTimeSpec::minkowski(3, 1.0), 1e-5),
            (rw(Fiber::Flat, WarpFunction::Power(0.5)), 1e-4),
            (rw(Fiber::Sphere, WarpFunction::Power(0.5)), 1e-4),
            // extrinsic hyperboloid coordinates lose ~eps |x|^2 to cancellation
            (rw(Fiber::Hyperbolic, WarpFunction::Power(0.5)), 1e-5),
        ];
        for (spec, ds) in cases {
            let t0 = if spec.kind == SpaceTimeKind::Minkowski { 0.0 } else { 1.0 };
            let st = PhaseState::default_start(&spec, t0, 2.0).unwrap();
            let rec = simulate_path(&spec, &st, ds, ds * 1e5, NoiseKey::new(3, 0), 10_000).unwrap();
            assert!(rec.max_pseudo_norm_defect <= 1e-8, "{:?}: {}", spec.fiber, rec.max_pseudo_norm_defect);
            assert!(rec.max_fiber_defect <= 1e-8);
            assert!(rec.samples.iter().skip(1).all(|s| s.tdot > 1.0));
        }
    }

    #[test]
    fn projection_is_needed_for_the_shell() {
        // without rescaling the defect grows with the step size
        let spec = SpaceTimeSpec::minkowski(3, 1.0);
        let mut st = PhaseState::default_start(&spec, 0.0, 2.0).unwrap();
        let key = NoiseKey::new(11, 0);
        let ds = 1e-3;
        let mut worst: f64 = 0.0;
        for k in 0..1000 {
            let eta = key.gaussians(StreamRole::Base, 0, k, 4);
            let acc_free = &st.xidot * (1.5 * ds);
            let l = noise_factor(&spec, &st);
            let xidot = &st.xidot + acc_free + l * DVector::from_vec(eta) * ds.sqrt();
            let xi = &st.xi + &st.xidot * ds;
            let q = pseudo_norm(&spec, xi.as_slice(), xidot.as_slice());
            worst = worst.max((q + 1.0).abs());
            st = PhaseState { xi, xidot: &xidot / (-q).sqrt(), s: st.s + ds };
        }
        assert!(worst > 1e-4, "{worst}");
    }

    #[test]
    fn same_seed_same_record() {
        let spec = rw(Fiber::Hyperbolic, WarpFunction::Power(0.5));
        let st = PhaseState::default_start(&spec, 1.0, 2.0).unwrap();
        let a = simulate_path(&spec, &st, 1e-3, 2.0, NoiseKey::new(5, 9), 10).unwrap();
        let b = simulate_path(&spec, &st, 1e-3, 2.0, NoiseKey::new(5, 9), 10).unwrap();
        assert_eq!(a, b);
        let c = simulate_path(&spec, &st, 1e-3, 2.0, NoiseKey::new(5, 10), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn minkowski_tdot_grows_on_average() {
        let spec = SpaceTimeSpec::minkowski(3, 1.0);
        let st = PhaseState::default_start(&spec, 0.0, 2.0).unwrap();
        let n = 200;
        let mean: f64 = (0..n)
            .map(|p| simulate_path(&spec, &st, 1e-3, 5.0, NoiseKey::new(1, p), 5000).unwrap().last().unwrap().tdot.ln())
            .sum::<f64>()
            / n as f64;
        assert!(mean > 2.0f64.ln());
    }

    #[test]
    fn weak_order_one_on_terminal_time() {
        // coupled Brownian increments across resolutions; ensemble means of t at s = 0.5
        let spec = rw(Fiber::Flat, WarpFunction::Power(0.5));
        let st0 = PhaseState::default_start(&spec, 1.0, 2.0).unwrap();
        let s_end = 0.5;
        let base = 128usize; // finest number of steps is base * 8
        let paths = 4000u64;
        let levels = [1usize, 2, 4, 8];
        let mut means = vec![0.0; levels.len()];
        let mut used = 0usize;
        'paths: for p in 0..paths {
            let key = NoiseKey::new(77, p);
            let fine_n = base * 8;
            let fine: Vec<Vec<f64>> = (0..fine_n as u64).map(|k| key.gaussians(StreamRole::Base, 0, k, 4)).collect();
            let mut ends = [0.0; 4];
            for (li, &lev) in levels.iter().enumerate() {
                let n = base * lev;
                let ds = s_end / n as f64;
                let group = fine_n / n;
                let mut st = st0.clone();
                for k in 0..n {
                    let mut eta = [0.0; 4];
                    for j in 0..group {
                        for i in 0..4 {
                            eta[i] += fine[k * group + j][i];
                        }
                    }
                    let sc = (group as f64).sqrt();
                    eta.iter_mut().for_each(|e| *e /= sc);
                    match em_step(&spec, &st, ds, &eta) {
                        Ok(next) => st = next,
                        // a coarse step left the light cone; drop the path at every level
                        Err(Error::StepRejected(_)) => continue 'paths,
                        Err(e) => panic!("{e}"),
                    }
                }
                ends[li] = st.t();
            }
            used += 1;
            for li in 0..4 {
                means[li] += ends[li];
            }
        }
        assert!(used as f64 >= 0.99 * paths as f64, "{used}");
        means.iter_mut().for_each(|m| *m /= used as f64);
        // self-convergence: successive differences shrink with slope ~1 in ds
        let d1 = (means[0] - means[1]).abs();
        let d2 = (means[1] - means[2]).abs();
        let d3 = (means[2] - means[3]).abs();
        let slope = ((d1 / d3).ln() / 4.0f64.ln()).abs();
        assert!((0.5..=1.5).contains(&slope), "means {means:?} slope {slope} ({d1}, {d2}, {d3})");
    }

    #[test]
    fn halving_recovers_from_rejected_steps() {
        // huge ds on a slowly moving path in a fast warp forces rejections
        let spec = rw(Fiber::Flat, WarpFunction::Power(0.5));
        let st = PhaseState::default_start(&spec, 0.05, 1.0).unwrap();
        let rec = simulate_path(&spec, &st, 0.2, 2.0, NoiseKey::new(2, 0), 1).unwrap();
        assert!(rec.samples.iter().all(|s| s.t > 0.0));
        assert_relative_eq!(rec.last().unwrap().s, 2.0, epsilon = 1e-12);
    }
}
