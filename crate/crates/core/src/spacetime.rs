//! Quadratic forms, warped Lorentzian metrics and regime classification.
//!
//! Curved fibers are handled extrinsically: the unit sphere `|x| = 1` in
//! `R^{d+1}` and the upper sheet of `Q_{1,d}(x, x) = -1`. Chart points are
//! `(t, x)` with `x` ambient.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for "on the fiber" checks.
pub const FIBER_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadraticForm {
    pub p: usize,
    pub q: usize,
}

impl QuadraticForm {
    pub fn new(p: usize, q: usize) -> Self {
        QuadraticForm { p, q }
    }

    pub fn dim(&self) -> usize {
        self.p + self.q
    }

    pub fn sign(&self, k: usize) -> f64 {
        if k < self.p {
            -1.0
        } else {
            1.0
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        crate::linalg::signature(self.p, self.q)
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let n = self.dim();
        for v in [x, y] {
            if v.len() != n {
                return Err(Error::Dimension { expected: n, got: v.len() });
            }
        }
        let w: Vec<f64> = (0..n).map(|k| self.sign(k)).collect();
        Ok(crate::linalg::weighted_dot(&w, x, y))
    }
}

/// `Q_{p,q}(x, y)`.
pub fn eval_q(form: QuadraticForm, x: &[f64], y: &[f64]) -> Result<f64> {
    form.eval(x, y)
}

/// Asymptotic growth class of a warp function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Growth {
    /// `H(t) t -> c`.
    Polynomial(f64),
    /// `alpha = exp(t^beta)` with `0 < beta < 1`.
    SubExponential(f64),
    Exponential,
    Unknown,
}

/// Tabulated warp with monotone cubic (Fritsch-Carlson) interpolation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabulatedWarp {
    pub t: Vec<f64>,
    pub alpha: Vec<f64>,
    slopes: Vec<f64>,
    /// exponent of the power-law continuation past the last node
    tail_c: f64,
}

impl TabulatedWarp {
    pub fn new(t: Vec<f64>, alpha: Vec<f64>) -> Result<Self> {
        let n = t.len();
        if n < 3 || alpha.len() != n {
            return Err(Error::InvalidConfig("warp table needs at least 3 rows".into()));
        }
        if t.windows(2).any(|w| w[1] <= w[0]) || t[0] <= 0.0 {
            return Err(Error::InvalidConfig("warp table t must be positive and strictly increasing".into()));
        }
        if alpha.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidConfig("warp table alpha must be positive".into()));
        }
        let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (alpha[i + 1] - alpha[i]) / h[i]).collect();
        let mut m = vec![0.0; n];
        m[0] = delta[0];
        m[n - 1] = delta[n - 2];
        for i in 1..n - 1 {
            m[i] = if delta[i - 1] * delta[i] <= 0.0 {
                0.0
            } else {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i])
            };
        }
        let tail_c = m[n - 1] * t[n - 1] / alpha[n - 1];
        Ok(TabulatedWarp { t, alpha, slopes: m, tail_c })
    }

    /// Two-column CSV with header `t,alpha`.
    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let rdr = csv::Reader::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
        Self::from_csv_reader(rdr)
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        Self::from_csv_reader(csv::Reader::from_reader(text.as_bytes()))
    }

    fn from_csv_reader<R: std::io::Read>(mut rdr: csv::Reader<R>) -> Result<Self> {
        let headers = rdr.headers().map_err(|e| Error::InvalidConfig(e.to_string()))?.clone();
        if headers.len() != 2 || &headers[0] != "t" || &headers[1] != "alpha" {
            return Err(Error::InvalidConfig("warp table header must be `t,alpha`".into()));
        }
        let mut t = Vec::new();
        let mut a = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::InvalidConfig(e.to_string()));
            t.push(parse(&rec[0])?);
            a.push(parse(&rec[1])?);
        }
        Self::new(t, a)
    }

    fn locate(&self, t: f64) -> usize {
        match self.t.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(self.t.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.t.len() - 2),
        }
    }

    fn eval(&self, t: f64) -> (f64, f64) {
        let n = self.t.len();
        if t >= self.t[n - 1] {
            let a = self.alpha[n - 1] * (t / self.t[n - 1]).powf(self.tail_c);
            return (a, self.tail_c * a / t);
        }
        let i = self.locate(t);
        let h = self.t[i + 1] - self.t[i];
        let u = (t - self.t[i]) / h;
        let (y0, y1, m0, m1) = (self.alpha[i], self.alpha[i + 1], self.slopes[i], self.slopes[i + 1]);
        let h00 = (1.0 + 2.0 * u) * (1.0 - u) * (1.0 - u);
        let h10 = u * (1.0 - u) * (1.0 - u);
        let h01 = u * u * (3.0 - 2.0 * u);
        let h11 = u * u * (u - 1.0);
        let val = h00 * y0 + h10 * h * m0 + h01 * y1 + h11 * h * m1;
        let d00 = 6.0 * u * u - 6.0 * u;
        let d10 = 3.0 * u * u - 4.0 * u + 1.0;
        let d01 = -6.0 * u * u + 6.0 * u;
        let d11 = 3.0 * u * u - 2.0 * u;
        let der = (d00 * y0 + d01 * y1) / h + d10 * m0 + d11 * m1;
        (val, der)
    }

    /// Growth read off the last quarter of the table.
    fn growth(&self) -> Growth {
        let n = self.t.len();
        let start = (3 * n) / 4;
        let idx: Vec<usize> = (start.min(n - 2)..n).collect();
        let ht: Vec<f64> = idx.iter().map(|&i| self.slopes[i] / self.alpha[i] * self.t[i]).collect();
        let hh: Vec<f64> = idx.iter().map(|&i| self.slopes[i] / self.alpha[i]).collect();
        let spread = |v: &[f64]| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mid = 0.5 * (lo + hi);
            if mid.abs() < 1e-300 {
                (hi - lo).abs()
            } else {
                (hi - lo) / mid.abs()
            }
        };
        if spread(&ht) < 0.1 {
            Growth::Polynomial(*ht.last().unwrap())
        } else if spread(&hh) < 0.1 {
            Growth::Exponential
        } else {
            Growth::Unknown
        }
    }
}

/// Expansion function `alpha` of a Robertson-Walker metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WarpFunction {
    /// `t^a`
    Power(f64),
    /// `e^t`
    Exp,
    /// `exp(t^b)`
    ExpPower(f64),
    /// `cosh t`
    Cosh,
    /// `1`
    Const,
    Table(TabulatedWarp),
}

impl WarpFunction {
    pub fn alpha(&self, t: f64) -> f64 {
        match self {
            WarpFunction::Power(a) => t.powf(*a),
            WarpFunction::Exp => t.exp(),
            WarpFunction::ExpPower(b) => t.powf(*b).exp(),
            WarpFunction::Cosh => t.cosh(),
            WarpFunction::Const => 1.0,
            WarpFunction::Table(tab) => tab.eval(t).0,
        }
    }

    pub fn dalpha(&self, t: f64) -> f64 {
        match self {
            WarpFunction::Power(a) => a * t.powf(a - 1.0),
            WarpFunction::Exp => t.exp(),
            WarpFunction::ExpPower(b) => b * t.powf(b - 1.0) * t.powf(*b).exp(),
            WarpFunction::Cosh => t.sinh(),
            WarpFunction::Const => 0.0,
            WarpFunction::Table(tab) => tab.eval(t).1,
        }
    }

    /// `ln alpha`, finite where `alpha` itself overflows.
    pub fn ln_alpha(&self, t: f64) -> f64 {
        match self {
            WarpFunction::Power(a) => a * t.ln(),
            WarpFunction::Exp => t,
            WarpFunction::ExpPower(b) => t.powf(*b),
            WarpFunction::Cosh => t.abs() + (-2.0 * t.abs()).exp().ln_1p() - std::f64::consts::LN_2,
            WarpFunction::Const => 0.0,
            WarpFunction::Table(tab) => tab.eval(t).0.ln(),
        }
    }

    /// `H = alpha' / alpha`, without forming `alpha` where it could overflow.
    pub fn hubble(&self, t: f64) -> f64 {
        match self {
            WarpFunction::Power(a) => a / t,
            WarpFunction::Exp => 1.0,
            WarpFunction::ExpPower(b) => b * t.powf(b - 1.0),
            WarpFunction::Cosh => t.tanh(),
            WarpFunction::Const => 0.0,
            WarpFunction::Table(tab) => {
                let (a, da) = tab.eval(t);
                da / a
            }
        }
    }

    pub fn growth(&self) -> Growth {
        match self {
            WarpFunction::Power(a) => Growth::Polynomial(*a),
            WarpFunction::Exp | WarpFunction::Cosh => Growth::Exponential,
            WarpFunction::ExpPower(b) => {
                if *b >= 1.0 {
                    Growth::Exponential
                } else {
                    Growth::SubExponential(*b)
                }
            }
            WarpFunction::Const => Growth::Polynomial(0.0),
            WarpFunction::Table(tab) => tab.growth(),
        }
    }

    /// `alpha > 0` and `H` non-increasing on a log grid of `[t0, t1]`.
    pub fn check_log_concave(&self, t0: f64, t1: f64, n: usize) -> bool {
        let mut prev = f64::INFINITY;
        for i in 0..n {
            let t = t0 * (t1 / t0).powf(i as f64 / (n - 1) as f64);
            let a = self.alpha(t);
            let h = self.hubble(t);
            if !(a > 0.0) || !h.is_finite() {
                return false;
            }
            if h > prev + 1e-12 * prev.abs().max(1.0) {
                return false;
            }
            prev = h;
        }
        true
    }
}

impl fmt::Display for WarpFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WarpFunction::Power(a) => write!(f, "t^{a}"),
            WarpFunction::Exp => write!(f, "e^t"),
            WarpFunction::ExpPower(b) => write!(f, "e^t^{b}"),
            WarpFunction::Cosh => write!(f, "cosh"),
            WarpFunction::Const => write!(f, "1"),
            WarpFunction::Table(_) => write!(f, "table"),
        }
    }
}

impl FromStr for WarpFunction {
    type Err = Error;

    /// `t^A`, `e^t`, `e^t^B`, `cosh`, `1`, or `table:PATH`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let num = |v: &str| v.parse::<f64>().map_err(|_| Error::InvalidConfig(format!("bad warp exponent in `{s}`")));
        if let Some(p) = s.strip_prefix("table:") {
            return Ok(WarpFunction::Table(TabulatedWarp::from_csv_path(Path::new(p))?));
        }
        if let Some(b) = s.strip_prefix("e^t^") {
            return Ok(WarpFunction::ExpPower(num(b)?));
        }
        match s {
            "e^t" | "exp" => return Ok(WarpFunction::Exp),
            "cosh" => return Ok(WarpFunction::Cosh),
            "1" | "const" => return Ok(WarpFunction::Const),
            _ => {}
        }
        if let Some(a) = s.strip_prefix("t^") {
            return Ok(WarpFunction::Power(num(a)?));
        }
        Err(Error::InvalidConfig(format!("unknown warp `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fiber {
    Flat,
    Sphere,
    Hyperbolic,
}

impl Fiber {
    pub fn kappa(&self) -> f64 {
        match self {
            Fiber::Flat => 0.0,
            Fiber::Sphere => 1.0,
            Fiber::Hyperbolic => -1.0,
        }
    }

    /// Ambient dimension of a `d`-dimensional fiber.
    pub fn ambient_dim(&self, d: usize) -> usize {
        match self {
            Fiber::Flat => d,
            _ => d + 1,
        }
    }

    /// Diagonal of the ambient fiber form.
    pub fn ambient_signs(&self, d: usize) -> Vec<f64> {
        let mut w = vec![1.0; self.ambient_dim(d)];
        if *self == Fiber::Hyperbolic {
            w[0] = -1.0;
        }
        w
    }

    /// Base point: origin, north pole `e_0`, or hyperboloid vertex `e_0`.
    pub fn origin(&self, d: usize) -> DVector<f64> {
        let mut x = DVector::zeros(self.ambient_dim(d));
        if *self != Fiber::Flat {
            x[0] = 1.0;
        }
        x
    }

    /// Default unit direction at the base point.
    pub fn default_direction(&self, d: usize) -> DVector<f64> {
        let mut v = DVector::zeros(self.ambient_dim(d));
        match self {
            Fiber::Flat => v[0] = 1.0,
            _ => v[1] = 1.0,
        }
        v
    }

    /// Constraint residual of a fiber point.
    pub fn constraint_defect(&self, x: &[f64]) -> f64 {
        match self {
            Fiber::Flat => 0.0,
            Fiber::Sphere => (x.iter().map(|v| v * v).sum::<f64>() - 1.0).abs(),
            Fiber::Hyperbolic => {
                let q: f64 = -x[0] * x[0] + x[1..].iter().map(|v| v * v).sum::<f64>();
                let bad_sheet = if x[0] > 0.0 { 0.0 } else { f64::INFINITY };
                (q + 1.0).abs() + bad_sheet
            }
        }
    }
}

impl FromStr for Fiber {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Fiber::Flat),
            "sphere" => Ok(Fiber::Sphere),
            "hyperbolic" => Ok(Fiber::Hyperbolic),
            _ => Err(Error::InvalidConfig(format!("unknown fiber `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceTimeKind {
    Minkowski,
    DeSitter,
    AntiDeSitter,
    Rw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeSpec {
    pub kind: SpaceTimeKind,
    /// spatial dimension
    pub d: usize,
    pub fiber: Fiber,
    pub warp: WarpFunction,
    pub sigma: f64,
}

impl SpaceTimeSpec {
    pub fn minkowski(d: usize, sigma: f64) -> Self {
        SpaceTimeSpec { kind: SpaceTimeKind::Minkowski, d, fiber: Fiber::Flat, warp: WarpFunction::Const, sigma }
    }

    pub fn rw(fiber: Fiber, warp: WarpFunction, d: usize, sigma: f64) -> Self {
        SpaceTimeSpec { kind: SpaceTimeKind::Rw, d, fiber, warp, sigma }
    }

    /// De Sitter space is the RW space-time with sphere fiber and `cosh` warp.
    pub fn de_sitter(d: usize, sigma: f64) -> Self {
        SpaceTimeSpec { kind: SpaceTimeKind::DeSitter, d, fiber: Fiber::Sphere, warp: WarpFunction::Cosh, sigma }
    }

    pub fn anti_de_sitter(d: usize, sigma: f64) -> Self {
        SpaceTimeSpec { kind: SpaceTimeKind::AntiDeSitter, d, fiber: Fiber::Flat, warp: WarpFunction::Const, sigma }
    }

    pub fn kappa(&self) -> f64 {
        self.fiber.kappa()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::InvalidConfig(format!("spatial dimension d = {} < 2", self.d)));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidConfig(format!("sigma = {} must be positive", self.sigma)));
        }
        match self.kind {
            SpaceTimeKind::Minkowski => {
                if self.fiber != Fiber::Flat || self.warp != WarpFunction::Const {
                    return Err(Error::InvalidConfig("Minkowski is the flat fiber with alpha = 1".into()));
                }
            }
            SpaceTimeKind::DeSitter => {
                if self.fiber != Fiber::Sphere || self.warp != WarpFunction::Cosh {
                    return Err(Error::InvalidConfig("de Sitter is the sphere fiber with alpha = cosh".into()));
                }
            }
            SpaceTimeKind::AntiDeSitter => {}
            SpaceTimeKind::Rw => {
                if let WarpFunction::Power(a) = self.warp {
                    if a < 0.0 {
                        return Err(Error::InvalidConfig("warp exponent must be >= 0".into()));
                    }
                }
                if let WarpFunction::ExpPower(b) = self.warp {
                    if !(b > 0.0 && b <= 1.0) {
                        return Err(Error::InvalidConfig("exp(t^b) needs 0 < b <= 1 for log-concavity".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Whether the time coordinate ranges over all of R.
    fn global_time(&self) -> bool {
        matches!(self.kind, SpaceTimeKind::Minkowski | SpaceTimeKind::DeSitter)
    }

    /// Chart dimension `1 + ambient fiber dimension`.
    pub fn chart_dim(&self) -> usize {
        1 + self.fiber.ambient_dim(self.d)
    }

    fn require_chart(&self) -> Result<()> {
        if self.kind == SpaceTimeKind::AntiDeSitter {
            return Err(Error::Domain("anti de Sitter space has no warped chart here".into()));
        }
        Ok(())
    }

    fn check_point(&self, point: &[f64]) -> Result<()> {
        self.require_chart()?;
        let n = self.chart_dim();
        if point.len() != n {
            return Err(Error::Dimension { expected: n, got: point.len() });
        }
        if !self.global_time() && !(point[0] > 0.0) {
            return Err(Error::Domain(format!("t = {} <= 0", point[0])));
        }
        let defect = self.fiber.constraint_defect(&point[1..]);
        if defect > FIBER_TOL {
            return Err(Error::Domain(format!("fiber constraint violated by {defect:.3e}")));
        }
        Ok(())
    }

    /// Spatial metric of the fiber in ambient coordinates. For the hyperboloid
    /// the ambient form is completed along the normal `x` so the chart metric
    /// keeps a single negative direction; on tangent vectors it equals `Q_{1,d}`.
    fn fiber_metric(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let w = self.fiber.ambient_signs(self.d);
        let mut g = DMatrix::from_diagonal(&DVector::from_vec(w.clone()));
        if self.fiber == Fiber::Hyperbolic {
            let jx = DVector::from_iterator(n, (0..n).map(|i| w[i] * x[i]));
            g += &jx * jx.transpose() * 2.0;
        }
        g
    }
}

impl SpaceTimeSpec {
    /// Sherman-Morrison inverse of [`SpaceTimeSpec::fiber_metric`].
    fn fiber_metric_inverse(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let w = self.fiber.ambient_signs(self.d);
        let mut g = DMatrix::from_diagonal(&DVector::from_vec(w.clone()));
        if self.fiber == Fiber::Hyperbolic {
            let qxx: f64 = (0..n).map(|i| w[i] * x[i] * x[i]).sum();
            let xv = DVector::from_column_slice(x);
            g -= &xv * xv.transpose() * (2.0 / (1.0 + 2.0 * qxx));
        }
        g
    }
}

/// Chart metric without domain checks. Used by the finite-difference oracle,
/// which needs to step slightly off the fiber.
pub fn metric_unchecked(spec: &SpaceTimeSpec, point: &[f64]) -> DMatrix<f64> {
    let n = point.len();
    let a = spec.warp.alpha(point[0]);
    let mut g = DMatrix::zeros(n, n);
    g[(0, 0)] = -1.0;
    let h = spec.fiber_metric(&point[1..]);
    g.view_mut((1, 1), (n - 1, n - 1)).copy_from(&(h * (a * a)));
    g
}

/// Metric `g = -dt^2 + alpha(t)^2 h` and its inverse.
pub fn metric_at(spec: &SpaceTimeSpec, point: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    spec.check_point(point)?;
    let g = metric_unchecked(spec, point);
    let n = point.len();
    let a = spec.warp.alpha(point[0]);
    let mut ginv = DMatrix::zeros(n, n);
    ginv[(0, 0)] = -1.0;
    let hinv = spec.fiber_metric_inverse(&point[1..]);
    ginv.view_mut((1, 1), (n - 1, n - 1)).copy_from(&(hinv / (a * a)));
    Ok((g, ginv))
}

/// Christoffel symbols `Gamma^mu_{nu rho}` stored densely.
#[derive(Clone, Debug)]
pub struct Christoffel {
    pub dim: usize,
    data: Vec<f64>,
}

impl Christoffel {
    fn zeros(dim: usize) -> Self {
        Christoffel { dim, data: vec![0.0; dim * dim * dim] }
    }

    #[inline]
    pub fn get(&self, mu: usize, nu: usize, rho: usize) -> f64 {
        self.data[(mu * self.dim + nu) * self.dim + rho]
    }

    #[inline]
    fn set(&mut self, mu: usize, nu: usize, rho: usize, v: f64) {
        let n = self.dim;
        self.data[(mu * n + nu) * n + rho] = v;
    }

    /// `Gamma^mu_{nu rho} v^nu v^rho`.
    pub fn contract(&self, v: &[f64]) -> DVector<f64> {
        let n = self.dim;
        DVector::from_iterator(
            n,
            (0..n).map(|mu| {
                let mut s = 0.0;
                for nu in 0..n {
                    for rho in 0..n {
                        s += self.get(mu, nu, rho) * v[nu] * v[rho];
                    }
                }
                s
            }),
        )
    }
}

/// Analytic Christoffel symbols of the chart metric.
pub fn christoffel(spec: &SpaceTimeSpec, point: &[f64]) -> Result<Christoffel> {
    spec.check_point(point)?;
    let n = point.len();
    let t = point[0];
    let x = &point[1..];
    let (a, da) = (spec.warp.alpha(t), spec.warp.dalpha(t));
    let h = spec.warp.hubble(t);
    let gf = spec.fiber_metric(x);
    let mut c = Christoffel::zeros(n);
    for i in 1..n {
        for j in 1..n {
            c.set(0, i, j, a * da * gf[(i - 1, j - 1)]);
        }
        c.set(i, 0, i, h);
        c.set(i, i, 0, h);
    }
    if spec.fiber == Fiber::Hyperbolic {
        let w = spec.fiber.ambient_signs(spec.d);
        let jx = DVector::from_iterator(n - 1, (0..n - 1).map(|i| 2.0 * w[i] * x[i]));
        let z = gf.lu().solve(&jx).ok_or_else(|| Error::Domain("degenerate fiber metric".into()))?;
        for i in 1..n {
            for j in 1..n {
                c.set(i, j, j, c.get(i, j, j) + z[i - 1] * w[j - 1]);
            }
        }
    }
    Ok(c)
}

/// `Gamma(v, v)` evaluated directly, for the integrator's inner loop.
pub fn geodesic_accel(spec: &SpaceTimeSpec, point: &[f64], v: &[f64]) -> DVector<f64> {
    let n = point.len();
    let t = point[0];
    let x = &point[1..];
    let w = spec.fiber.ambient_signs(spec.d);
    let hyp = spec.fiber == Fiber::Hyperbolic;
    let q_vv: f64 = (1..n).map(|i| w[i - 1] * v[i] * v[i]).sum();
    let mut gvv = q_vv;
    if hyp {
        let qxv: f64 = (1..n).map(|i| w[i - 1] * x[i - 1] * v[i]).sum();
        gvv += 2.0 * qxv * qxv;
    }
    let a = spec.warp.alpha(t);
    let da = spec.warp.dalpha(t);
    let hub = spec.warp.hubble(t);
    let mut out = DVector::zeros(n);
    out[0] = a * da * gvv;
    for i in 1..n {
        out[i] = 2.0 * hub * v[0] * v[i];
    }
    if hyp {
        // (J + 2 Jx Jx^T)^{-1} 2 Jx = 2x / (1 + 2 Q(x,x)), which is -2x on the sheet
        let qxx: f64 = (0..n - 1).map(|i| w[i] * x[i] * x[i]).sum();
        let f = 2.0 / (1.0 + 2.0 * qxx);
        for i in 1..n {
            out[i] += f * x[i - 1] * q_vv;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    FiniteHorizonPoint,
    FiniteHorizonTangent,
    InfFlatLine,
    InfSphereCircle,
    InfHypCone,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::FiniteHorizonPoint => "finite_horizon_point",
            Regime::FiniteHorizonTangent => "finite_horizon_tangent",
            Regime::InfFlatLine => "inf_flat_line",
            Regime::InfSphereCircle => "inf_sphere_circle",
            Regime::InfHypCone => "inf_hyp_cone",
        }
    }

    pub fn from_flags(fiber: Fiber, horizon_finite: bool, h3_integrable: bool) -> Regime {
        match (horizon_finite, h3_integrable, fiber) {
            (true, true, _) => Regime::FiniteHorizonTangent,
            (true, false, _) => Regime::FiniteHorizonPoint,
            (false, _, Fiber::Flat) => Regime::InfFlatLine,
            (false, _, Fiber::Sphere) => Regime::InfSphereCircle,
            (false, _, Fiber::Hyperbolic) => Regime::InfHypCone,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub horizon_finite: bool,
    pub h3_integrable: bool,
    pub predicted_regime: Regime,
    pub growth: Growth,
    /// `lim H(t) t` when the growth is polynomial
    pub hubble_limit: Option<f64>,
    /// `c = 1`, the edge of the admissible range
    pub boundary_case: bool,
    pub log_concave: bool,
    /// partial integrals on `[1, 1e6]`
    pub horizon_integral: f64,
    pub h3_integral: f64,
}

impl RegimeReport {
    /// Asymptotic rates `(lim log(tdot)/s, lim log(alpha)/s)` for
    /// `H(t) t -> c` with `c` in `(0, 1]`.
    pub fn lyapunov_prediction(&self, d: usize, sigma: f64) -> Option<(f64, f64)> {
        let c = self.hubble_limit?;
        if !(c > 0.0 && c <= 1.0) {
            return None;
        }
        let base = (d as f64 - 1.0) / 2.0 * sigma * sigma / (1.0 + c);
        Some((base, base * c))
    }
}

pub const T_MAX: f64 = 1e6;
const T_LOWER: f64 = 1.0;

/// Adaptive Simpson on `[a, b]`.
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// `int_{t0}^{t1} f(t) dt` computed in the variable `u = log t`.
fn log_quad(f: &dyn Fn(f64) -> f64, t0: f64, t1: f64) -> f64 {
    let g = |u: f64| {
        let t = u.exp();
        let v = f(t) * t;
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    let (u0, u1) = (t0.ln(), t1.ln());
    let pieces = 64;
    (0..pieces)
        .map(|i| {
            let a = u0 + (u1 - u0) * i as f64 / pieces as f64;
            let b = u0 + (u1 - u0) * (i + 1) as f64 / pieces as f64;
            adaptive_simpson(&g, a, b, 1e-12)
        })
        .sum()
}

/// Horizon finiteness and `H^3` integrability by quadrature on `[1, T_MAX]`,
/// with the tail decided from the growth tag.
pub fn classify_regime(spec: &SpaceTimeSpec) -> Result<RegimeReport> {
    if spec.kind == SpaceTimeKind::AntiDeSitter {
        return Err(Error::Domain("regime classification applies to warped space-times".into()));
    }
    let warp = &spec.warp;
    let growth = warp.growth();
    let inv_alpha = |t: f64| 1.0 / warp.alpha(t);
    let h3 = |t: f64| warp.hubble(t).powi(3);
    let horizon_integral = log_quad(&inv_alpha, T_LOWER, T_MAX);
    let h3_integral = log_quad(&h3, T_LOWER, T_MAX);

    // tail decision when no growth tag is available: the last decade must be
    // negligible against the whole
    let converged = |f: &dyn Fn(f64) -> f64, total: f64| -> Option<bool> {
        let last = log_quad(f, T_MAX / 10.0, T_MAX);
        let prev = log_quad(f, T_MAX / 100.0, T_MAX / 10.0);
        if last.abs() <= 1e-6 * total.abs().max(1e-300) {
            Some(true)
        } else if prev > 0.0 && last >= 0.5 * prev {
            Some(false)
        } else {
            None
        }
    };

    let (horizon_finite, h3_integrable) = match growth {
        Growth::Polynomial(c) => (c > 1.0, true),
        Growth::SubExponential(b) => (true, b < 2.0 / 3.0),
        Growth::Exponential => (true, false),
        Growth::Unknown => {
            let hf = converged(&inv_alpha, horizon_integral)
                .ok_or_else(|| Error::ClassificationAmbiguous("horizon integral undecided".into()))?;
            let hi = converged(&h3, h3_integral)
                .ok_or_else(|| Error::ClassificationAmbiguous("H^3 integral undecided".into()))?;
            (hf, hi)
        }
    };
    let hubble_limit = match growth {
        Growth::Polynomial(c) => Some(c),
        _ => None,
    };
    Ok(RegimeReport {
        horizon_finite,
        h3_integrable,
        predicted_regime: Regime::from_flags(spec.fiber, horizon_finite, h3_integrable),
        growth,
        hubble_limit,
        boundary_case: hubble_limit == Some(1.0),
        log_concave: warp.check_log_concave(T_LOWER, T_MAX, 200),
        horizon_integral,
        h3_integral,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn flat_sqrt() -> SpaceTimeSpec {
        SpaceTimeSpec::rw(Fiber::Flat, WarpFunction::Power(0.5), 3, 1.0)
    }

    /// Central-difference Christoffel symbols from the chart metric.
    fn fd_christoffel(spec: &SpaceTimeSpec, p: &[f64]) -> Vec<f64> {
        let n = p.len();
        let step = 1e-5;
        let ginv = metric_unchecked(spec, p).try_inverse().unwrap();
        let dg: Vec<DMatrix<f64>> = (0..n)
            .map(|k| {
                let mut pp = p.to_vec();
                let mut pm = p.to_vec();
                pp[k] += step;
                pm[k] -= step;
                (metric_unchecked(spec, &pp) - metric_unchecked(spec, &pm)) / (2.0 * step)
            })
            .collect();
        let mut out = vec![0.0; n * n * n];
        for mu in 0..n {
            for nu in 0..n {
                for rho in 0..n {
                    let mut s = 0.0;
                    for l in 0..n {
                        s += 0.5 * ginv[(mu, l)] * (dg[nu][(l, rho)] + dg[rho][(l, nu)] - dg[l][(nu, rho)]);
                    }
                    out[(mu * n + nu) * n + rho] = s;
                }
            }
        }
        out
    }

    fn random_point(spec: &SpaceTimeSpec, seed: u64) -> Vec<f64> {
        let k = crate::rng::NoiseKey::new(seed, 0);
        let n = spec.chart_dim();
        let z = k.gaussians(crate::rng::StreamRole::Sampling, 0, 0, n);
        let t = 0.5 + 3.0 * (z[0].abs());
        let mut x: Vec<f64> = z[1..].to_vec();
        match spec.fiber {
            Fiber::Flat => {}
            Fiber::Sphere => {
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                x.iter_mut().for_each(|v| *v /= r);
            }
            Fiber::Hyperbolic => {
                let s: f64 = x[1..].iter().map(|v| v * v).sum();
                x[0] = (1.0 + s).sqrt();
            }
        }
        let mut p = vec![t];
        p.extend(x);
        p
    }

    #[test]
    fn log_warp_matches_direct_evaluation() {
        let warps = [
            WarpFunction::Power(0.5),
            WarpFunction::Exp,
            WarpFunction::ExpPower(0.5),
            WarpFunction::Cosh,
            WarpFunction::Const,
        ];
        for w in &warps {
            for t in [0.3, 1.0, 7.5, 40.0] {
                assert!((w.ln_alpha(t) - w.alpha(t).ln()).abs() < 1e-12 * (1.0 + t), "{w} at {t}");
            }
        }
        assert_eq!(WarpFunction::Exp.ln_alpha(1e4), 1e4);
        assert!((WarpFunction::Cosh.ln_alpha(1e4) - (1e4 - std::f64::consts::LN_2)).abs() < 1e-9);
    }

    #[test]
    fn q_of_e0_and_null_vector() {
        let f = QuadraticForm::new(1, 4);
        assert_eq!(eval_q(f, &[1., 0., 0., 0., 0.], &[1., 0., 0., 0., 0.]).unwrap(), -1.0);
        let g = QuadraticForm::new(1, 3);
        assert_eq!(eval_q(g, &[1., 1., 0., 0.], &[1., 1., 0., 0.]).unwrap(), 0.0);
        assert!(matches!(eval_q(g, &[1., 1.], &[1., 1., 0., 0.]), Err(Error::Dimension { .. })));
    }

    proptest! {
        #[test]
        fn q_symmetric_and_bilinear(x in prop::collection::vec(-10.0f64..10.0, 5),
                                    y in prop::collection::vec(-10.0f64..10.0, 5),
                                    z in prop::collection::vec(-10.0f64..10.0, 5),
                                    a in -3.0f64..3.0) {
            let f = QuadraticForm::new(2, 3);
            let xy = f.eval(&x, &y).unwrap();
            prop_assert!((xy - f.eval(&y, &x).unwrap()).abs() <= 1e-12 * (1.0 + xy.abs()));
            let xa: Vec<f64> = x.iter().zip(&z).map(|(x, z)| a * x + z).collect();
            let lhs = f.eval(&xa, &y).unwrap();
            let rhs = a * xy + f.eval(&z, &y).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn minkowski_metric_is_flat() {
        let spec = SpaceTimeSpec::minkowski(3, 1.0);
        let (g, _) = metric_at(&spec, &[0.3, 1.0, -2.0, 5.0]).unwrap();
        assert_eq!(g, DMatrix::from_diagonal(&DVector::from_vec(vec![-1., 1., 1., 1.])));
        let c = christoffel(&spec, &[0.3, 1.0, -2.0, 5.0]).unwrap();
        assert!(c.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_warp_metric_at_two() {
        let spec = SpaceTimeSpec::rw(Fiber::Flat, WarpFunction::Power(1.0), 3, 1.0);
        let (g, _) = metric_at(&spec, &[2.0, 0.1, 0.2, 0.3]).unwrap();
        assert_eq!(g, DMatrix::from_diagonal(&DVector::from_vec(vec![-1., 4., 4., 4.])));
        let c = christoffel(&spec, &[2.0, 0.1, 0.2, 0.3]).unwrap();
        let fd = fd_christoffel(&spec, &[2.0, 0.1, 0.2, 0.3]);
        // Gamma^0_{11} (flat index 5): analytic alpha alpha' = 2, oracle by central differences
        assert_relative_eq!(c.get(0, 1, 1), 2.0, epsilon = 1e-14);
        assert_relative_eq!(fd[5], 2.0, max_relative = 1e-8);
    }

    #[test]
    fn nonpositive_time_is_rejected() {
        let spec = flat_sqrt();
        assert!(matches!(metric_at(&spec, &[0.0, 0., 0., 0.]), Err(Error::Domain(_))));
        assert!(matches!(christoffel(&spec, &[-1.0, 0., 0., 0.]), Err(Error::Domain(_))));
    }

    #[test]
    fn inverse_and_signature_on_random_points() {
        for fiber in [Fiber::Flat, Fiber::Sphere, Fiber::Hyperbolic] {
            let spec = SpaceTimeSpec::rw(fiber, WarpFunction::Power(0.5), 3, 1.0);
            for s in 0..100 {
                let p = random_point(&spec, s);
                let (g, gi) = metric_at(&spec, &p).unwrap();
                let n = p.len();
                assert!((&g * &gi - DMatrix::identity(n, n)).amax() < 1e-12);
                let ev = g.clone().symmetric_eigen().eigenvalues;
                assert_eq!(ev.iter().filter(|v| **v < 0.0).count(), 1, "{fiber:?}");
            }
        }
    }

    #[test]
    fn christoffel_matches_finite_differences() {
        for fiber in [Fiber::Flat, Fiber::Sphere, Fiber::Hyperbolic] {
            for warp in [WarpFunction::Power(0.5), WarpFunction::Power(2.0), WarpFunction::Exp] {
                let spec = SpaceTimeSpec::rw(fiber, warp, 3, 1.0);
                for s in 0..100 {
                    let p = random_point(&spec, s);
                    let c = christoffel(&spec, &p).unwrap();
                    let fd = fd_christoffel(&spec, &p);
                    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
                    for (i, v) in fd.iter().enumerate() {
                        let a = c.data[i];
                        assert!((a - v).abs() <= 1e-5 * scale, "{fiber:?} idx {i}: {a} vs {v}");
                    }
                    let n = p.len();
                    for mu in 0..n {
                        for nu in 0..n {
                            for rho in 0..n {
                                assert_eq!(c.get(mu, nu, rho), c.get(mu, rho, nu));
                            }
                        }
                    }
                    let v: Vec<f64> = (0..n).map(|i| 0.3 * i as f64 - 0.4).collect();
                    let fast = geodesic_accel(&spec, &p, &v);
                    assert!((fast - c.contract(&v)).amax() < 1e-10 * (1.0 + scale));
                }
            }
        }
    }

    #[test]
    fn regime_examples() {
        let r = classify_regime(&SpaceTimeSpec::rw(Fiber::Flat, WarpFunction::Exp, 3, 1.0)).unwrap();
        assert!(r.horizon_finite && !r.h3_integrable);
        assert_eq!(r.predicted_regime, Regime::FiniteHorizonPoint);

        let r = classify_regime(&SpaceTimeSpec::rw(Fiber::Flat, WarpFunction::Power(2.0), 3, 1.0)).unwrap();
        assert!(r.horizon_finite && r.h3_integrable);
        assert_eq!(r.predicted_regime, Regime::FiniteHorizonTangent);

        let r = classify_regime(&flat_sqrt()).unwrap();
        assert!(!r.horizon_finite);
        assert_eq!(r.predicted_regime, Regime::InfFlatLine);
        assert_eq!(r.lyapunov_prediction(3, 1.0), Some((2.0 / 3.0, 1.0 / 3.0)));

        let r = classify_regime(&SpaceTimeSpec::rw(Fiber::Sphere, WarpFunction::Power(0.5), 3, 1.0)).unwrap();
        assert_eq!(r.predicted_regime, Regime::InfSphereCircle);
        let r = classify_regime(&SpaceTimeSpec::rw(Fiber::Hyperbolic, WarpFunction::Power(0.5), 3, 1.0)).unwrap();
        assert_eq!(r.predicted_regime, Regime::InfHypCone);

        let r = classify_regime(&SpaceTimeSpec::rw(Fiber::Flat, WarpFunction::Power(1.0), 3, 1.0)).unwrap();
        assert!(r.boundary_case && !r.horizon_finite);
    }

    #[test]
    fn quadrature_values() {
        let r = classify_regime(&flat_sqrt()).unwrap();
        // int_1^T t^{-1/2} dt = 2(sqrt(T) - 1)
        assert_relative_eq!(r.horizon_integral, 2.0 * (T_MAX.sqrt() - 1.0), max_relative = 1e-9);
        // int_1^T (1/(2t))^3 dt = (1 - T^-2) / 16
        assert_relative_eq!(r.h3_integral, (1.0 - T_MAX.powi(-2)) / 16.0, max_relative = 1e-9);
    }

    #[test]
    fn classification_is_pure() {
        let spec = flat_sqrt();
        assert_eq!(classify_regime(&spec).unwrap(), classify_regime(&spec).unwrap());
    }

    #[test]
    fn tabulated_power_law_matches_builtin() {
        let ts: Vec<f64> = (0..200).map(|i| 1.0 * 1.05f64.powi(i)).collect();
        let al: Vec<f64> = ts.iter().map(|t| t * t).collect();
        let tab = TabulatedWarp::new(ts, al).unwrap();
        let w = WarpFunction::Table(tab);
        for t in [1.3, 7.7, 100.0] {
            assert_relative_eq!(w.alpha(t), t * t, max_relative = 1e-4);
            assert_relative_eq!(w.hubble(t), 2.0 / t, max_relative = 1e-2);
        }
        match w.growth() {
            Growth::Polynomial(c) => assert!((c - 2.0).abs() < 0.05),
            g => panic!("{g:?}"),
        }
        let spec = SpaceTimeSpec::rw(Fiber::Flat, w, 3, 1.0);
        assert_eq!(classify_regime(&spec).unwrap().predicted_regime, Regime::FiniteHorizonTangent);
    }

    #[test]
    fn tabulated_csv_header_enforced() {
        assert!(TabulatedWarp::from_csv_str("t,alpha\n1,1\n2,2\n3,3\n").is_ok());
        assert!(TabulatedWarp::from_csv_str("time,a\n1,1\n2,2\n3,3\n").is_err());
        assert!(TabulatedWarp::from_csv_str("t,alpha\n1,1\n1,2\n3,3\n").is_err());
    }

    #[test]
    fn irregular_table_is_ambiguous() {
        // oscillating log-derivative: neither power-law nor exponential tail
        let ts: Vec<f64> = (0..60).map(|i| 1.0 + i as f64).collect();
        let al: Vec<f64> = ts.iter().map(|t: &f64| t.powf(1.0 + 0.9 * (t * 0.7).sin())).collect();
        let tab = TabulatedWarp::new(ts, al).unwrap();
        assert_eq!(tab.growth(), Growth::Unknown);
    }

    #[test]
    fn warp_strings_round_trip() {
        for s in ["t^0.5", "e^t", "e^t^0.5", "cosh", "1"] {
            let w: WarpFunction = s.parse().unwrap();
            assert_eq!(w.to_string(), s);
        }
        assert!("sin".parse::<WarpFunction>().is_err());
    }

    #[test]
    fn log_concavity() {
        assert!(WarpFunction::Power(0.5).check_log_concave(1.0, 1e6, 100));
        // cosh is log-convex
        assert!(!WarpFunction::Cosh.check_log_concave(0.1, 50.0, 100));
        assert!(!WarpFunction::ExpPower(1.5).check_log_concave(1.0, 10.0, 100));
    }
}
