//! Ensemble estimators: slope fits, Cauchy-tail convergence diagnostics,
//! two-sample Kolmogorov-Smirnov distances and the verdict registry.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::base_sde::PathRecord;
use crate::error::{Error, Result};
use crate::frame_flow::GroupTag;
use crate::iwasawa::{ads_boundary, weyl_stats, NakPathRecord};
use crate::rw_sim::{boundary_functionals, RwPathRecord};
use crate::spacetime::{classify_regime, Regime, SpaceTimeKind, SpaceTimeSpec};

/// Ordinary least squares `y = intercept + slope * s`. Returns
/// `(slope, standard error of the slope, intercept)`.
pub fn ols(s: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    let m = s.len();
    if m != y.len() {
        return Err(Error::Dimension { expected: m, got: y.len() });
    }
    if m < 3 {
        return Err(Error::InsufficientData(format!("{m} points for a line fit")));
    }
    let mf = m as f64;
    let sm = s.iter().sum::<f64>() / mf;
    let ym = y.iter().sum::<f64>() / mf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (a, b) in s.iter().zip(y) {
        sxx += (a - sm) * (a - sm);
        sxy += (a - sm) * (b - ym);
    }
    if !(sxx > 0.0) {
        return Err(Error::InsufficientData("abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * sm;
    let rss: f64 = s.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let se = (rss / (mf - 2.0) / sxx).sqrt();
    Ok((slope, se, intercept))
}

/// Slope of `y` against `s` over the trailing `window` fraction of the
/// samples, with a 95% normal half-width.
pub fn lyapunov(s: &[f64], y: &[f64], window: f64) -> Result<(f64, f64)> {
    if s.len() != y.len() {
        return Err(Error::Dimension { expected: s.len(), got: y.len() });
    }
    if !(window > 0.0 && window <= 1.0) {
        return Err(Error::InvalidConfig(format!("window fraction {window}")));
    }
    let start = tail_start(s.len(), 1.0 - window);
    let m = s.len() - start;
    if m < 10 {
        return Err(Error::InsufficientData(format!("{m} samples in the slope window")));
    }
    let (slope, se, _) = ols(&s[start..], &y[start..])?;
    Ok((slope, 1.96 * se))
}

fn tail_start(len: usize, split: f64) -> usize {
    ((len as f64) * split).floor().clamp(0.0, len as f64) as usize
}

/// Distance used by [`cauchy_tail`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TailMetric {
    /// Euclidean distance; on unit vectors this is the chordal distance.
    Euclidean,
    /// Largest absolute entry difference (matrices flattened).
    MaxNorm,
}

pub fn distance(a: &[f64], b: &[f64], metric: TailMetric) -> f64 {
    match metric {
        TailMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        TailMetric::MaxNorm => a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max),
    }
}

/// Largest distance from a sample after the split point to the final sample.
/// `split` is a fraction of the sample count.
pub fn cauchy_tail<P: AsRef<[f64]>>(points: &[P], split: f64, metric: TailMetric) -> Result<f64> {
    let start = tail_start(points.len(), split);
    if points.len() - start < 4 {
        return Err(Error::InsufficientData(format!("{} samples after the split", points.len() - start)));
    }
    let last = points[points.len() - 1].as_ref();
    Ok(points[start..].iter().map(|p| distance(p.as_ref(), last, metric)).fold(0.0, f64::max))
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn two_start_ks(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 50 || b.len() < 50 {
        return Err(Error::InsufficientData(format!("sample sizes {} and {}", a.len(), b.len())));
    }
    Ok(ks_statistic(a, b))
}

/// KS distance without the sample-size floor.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (na, nb) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut dmax = 0.0f64;
    while i < x.len() && j < y.len() {
        let v = if x[i] <= y[j] { x[i] } else { y[j] };
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        dmax = dmax.max((i as f64 / na - j as f64 / nb).abs());
    }
    dmax
}

/// Median of the finite entries; NaN for an empty input.
pub fn median(x: &[f64]) -> f64 {
    quantile(x, 0.5)
}

/// Linear-interpolated quantile of the finite entries.
pub fn quantile(x: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Distribution-free 95% interval for the median: order statistics at ranks
/// `n/2 -+ 0.98 sqrt(n)`.
pub fn median_ci(x: &[f64]) -> (f64, f64) {
    let mut v: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let half = 0.98 * n.sqrt();
    let lo = ((n / 2.0 - half).floor().max(1.0) as usize).min(v.len());
    let hi = ((n / 2.0 + half).ceil().max(1.0) as usize).min(v.len());
    (v[lo - 1], v[hi - 1])
}

/// Per-path metric names.
pub mod metric {
    pub const LOG_TDOT_SLOPE: &str = "log_tdot_slope";
    pub const LOG_ALPHA_SLOPE: &str = "log_alpha_slope";
    pub const CLOCK_GROWTH: &str = "clock_growth";
    pub const PSEUDO_NORM_DEFECT: &str = "pseudo_norm_defect";
    pub const FIBER_DEFECT: &str = "fiber_defect";
    pub const X_TAIL: &str = "x_tail";
    pub const THETA_TAIL: &str = "theta_tail";
    pub const U_TAIL: &str = "u_tail";
    pub const DELTA_TAIL: &str = "delta_tail";
    pub const BHAT_TAIL: &str = "bhat_tail";
    pub const D_MINUS_A_TAIL: &str = "d_minus_a_tail";
    pub const RECON_MAX: &str = "recon_max";
    pub const V_LAST: &str = "v_last";
    pub const DELTA_TILDE_TAIL: &str = "delta_tilde_tail";
    pub const THETA_INF_ANGLE: &str = "theta_inf_angle";
    pub const N_TAIL: &str = "n_tail";
    pub const BETA_SLOPE: &str = "beta_slope";
    pub const LAMBDA_SLOPE: &str = "lambda_slope";
    pub const MU_SLOPE: &str = "mu_slope";
    pub const ISOTROPY: &str = "isotropy";
    /// dS: first spatial component of `theta` at the last sample; AdS: the angle.
    pub const THETA1_LAST: &str = "theta1_last";
}

pub type PathMetrics = BTreeMap<String, f64>;

fn put(m: &mut PathMetrics, key: &str, v: Option<f64>) {
    if let Some(v) = v.filter(|v| v.is_finite()) {
        m.insert(key.to_string(), v);
    }
}

/// `(C_end - C_split) / C_split`: near 0 once `C` has saturated, about 1 for
/// linear growth with `split = 0.5`.
fn clock_growth(c: &[f64], split: f64) -> Option<f64> {
    let i = tail_start(c.len(), split).min(c.len().checked_sub(1)?);
    let (c0, c1) = (c[i], *c.last()?);
    (c0 > 0.0).then(|| (c1 - c0) / c0)
}

/// Terminal functionals and tail residuals of a reduced-dynamics path.
pub fn rw_path_metrics(spec: &SpaceTimeSpec, rec: &RwPathRecord, split: f64, window: f64) -> PathMetrics {
    let mut m = PathMetrics::new();
    let ss = &rec.samples;
    put(&mut m, metric::PSEUDO_NORM_DEFECT, Some(rec.max_speed_defect));
    put(&mut m, metric::FIBER_DEFECT, Some(rec.max_fiber_defect));
    let s: Vec<f64> = ss.iter().map(|x| x.s).collect();
    let ltd: Vec<f64> = ss.iter().map(|x| x.tdot.ln()).collect();
    let lal: Vec<f64> = ss.iter().map(|x| spec.warp.ln_alpha(x.t)).collect();
    put(&mut m, metric::LOG_TDOT_SLOPE, lyapunov(&s, &ltd, window).ok().map(|r| r.0));
    put(&mut m, metric::LOG_ALPHA_SLOPE, lyapunov(&s, &lal, window).ok().map(|r| r.0));
    let c: Vec<f64> = ss.iter().map(|x| x.c).collect();
    put(&mut m, metric::CLOCK_GROWTH, clock_growth(&c, split));
    if let Ok(b) = boundary_functionals(rec, split) {
        put(&mut m, metric::X_TAIL, b.x_tail);
        put(&mut m, metric::THETA_TAIL, b.theta_tail);
        put(&mut m, metric::U_TAIL, b.u_tail);
        put(&mut m, metric::DELTA_TAIL, b.delta_tail);
        put(&mut m, metric::BHAT_TAIL, b.bhat_tail);
        put(&mut m, metric::D_MINUS_A_TAIL, b.d_minus_a_tail);
        put(&mut m, metric::RECON_MAX, b.recon_max);
        put(&mut m, metric::V_LAST, b.v_last);
        put(&mut m, metric::DELTA_TILDE_TAIL, b.delta_tilde_tail);
        put(&mut m, metric::N_TAIL, b.n_tail);
        put(&mut m, metric::THETA_INF_ANGLE, b.theta_inf_angle);
    }
    m
}

/// Metrics of a chart-coordinate path.
pub fn base_path_metrics(rec: &PathRecord, split: f64, window: f64) -> PathMetrics {
    let mut m = PathMetrics::new();
    put(&mut m, metric::PSEUDO_NORM_DEFECT, Some(rec.max_pseudo_norm_defect));
    put(&mut m, metric::FIBER_DEFECT, Some(rec.max_fiber_defect));
    let s: Vec<f64> = rec.samples.iter().map(|x| x.s).collect();
    let ltd: Vec<f64> = rec.samples.iter().map(|x| x.tdot.ln()).collect();
    put(&mut m, metric::LOG_TDOT_SLOPE, lyapunov(&s, &ltd, window).ok().map(|r| r.0));
    let c: Vec<f64> = rec.samples.iter().map(|x| x.c).collect();
    put(&mut m, metric::CLOCK_GROWTH, clock_growth(&c, split));
    m
}

/// Samples per path pooled into the two-start comparison.
pub const THETA_POOL: usize = 16;

/// `THETA_POOL` evenly spaced samples of the first direction component (the
/// angle on AdS) from the tail window, ending at the last sample. Once both
/// starts have mixed these share one marginal, so pooling them sharpens the
/// two-start comparison without changing what it tests.
pub fn nak_theta1_tail(rec: &NakPathRecord, split: f64) -> Vec<f64> {
    let comp = if rec.group == GroupTag::So2d { 0 } else { 1 };
    let m = rec.samples.len();
    if m == 0 {
        return vec![];
    }
    let i0 = tail_start(m, split).min(m - 1);
    let k = THETA_POOL.min(m - i0);
    (1..=k)
        .map(|j| m - 1 - (k - j) * (m - 1 - i0) / k)
        .filter_map(|i| rec.samples[i].theta.get(comp).copied())
        .filter(|v| v.is_finite())
        .collect()
}

/// Chamber slopes, `n` tail and terminal angle of a lifted model-space path.
pub fn nak_path_metrics(rec: &NakPathRecord, split: f64) -> PathMetrics {
    let mut m = PathMetrics::new();
    let s = rec.times();
    let params: Vec<Vec<f64>> = rec.samples.iter().map(|x| x.a_params.clone()).collect();
    let slopes = weyl_stats(&s, &params).ok().map(|w| w.slopes);
    let last_theta = rec.samples.last().and_then(|x| match rec.group {
        GroupTag::So2d => x.theta.first().copied(),
        _ => x.theta.get(1).copied(),
    });
    put(&mut m, metric::THETA1_LAST, last_theta);
    match rec.group {
        GroupTag::So2d => {
            put(&mut m, metric::LAMBDA_SLOPE, slopes.as_ref().map(|v| v[0]));
            put(&mut m, metric::MU_SLOPE, slopes.as_ref().map(|v| v[1]));
            if let Ok(b) = ads_boundary(&rec.coords, split, f64::INFINITY) {
                put(&mut m, metric::N_TAIL, Some(b.n_tail));
                put(&mut m, metric::ISOTROPY, Some(b.isotropy));
            }
        }
        _ => {
            put(&mut m, metric::BETA_SLOPE, slopes.as_ref().map(|v| v[0]));
            let ns: Vec<&[f64]> = rec.coords.iter().map(|c| c.n.as_slice()).collect();
            put(&mut m, metric::N_TAIL, cauchy_tail(&ns, split, TailMetric::MaxNorm).ok());
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub path: u64,
    pub metrics: PathMetrics,
    /// Late-window samples of the first direction component, pooled by the
    /// two-start comparison. Empty when only the terminal value is kept.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub theta1_tail: Vec<f64>,
}

impl PathSummary {
    pub fn new(path: u64, metrics: PathMetrics) -> Self {
        PathSummary { path, metrics, theta1_tail: vec![] }
    }
}

/// Per-path results of a finished ensemble. `antipodal` holds the second
/// ensemble of a two-start comparison (empty otherwise).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub requested: usize,
    pub aborted: usize,
    pub paths: Vec<PathSummary>,
    pub antipodal: Vec<PathSummary>,
}

/// Pooled late-window samples, or the terminal value for paths without them.
fn theta1_pool(paths: &[PathSummary]) -> Vec<f64> {
    paths
        .iter()
        .flat_map(|p| {
            if p.theta1_tail.is_empty() {
                p.metrics.get(metric::THETA1_LAST).copied().filter(|v| v.is_finite()).into_iter().collect()
            } else {
                p.theta1_tail.clone()
            }
        })
        .collect()
}

impl Ensemble {
    /// Combines two partial ensembles; paths are kept in index order so the
    /// merge is associative and commutative.
    pub fn merge(mut self, other: Ensemble) -> Ensemble {
        self.requested += other.requested;
        self.aborted += other.aborted;
        self.paths.extend(other.paths);
        self.antipodal.extend(other.antipodal);
        self.paths.sort_by_key(|p| p.path);
        self.antipodal.sort_by_key(|p| p.path);
        self
    }

    pub fn values(&self, key: &str) -> Vec<f64> {
        values_of(&self.paths, key)
    }
}

fn values_of(paths: &[PathSummary], key: &str) -> Vec<f64> {
    paths.iter().filter_map(|p| p.metrics.get(key).copied()).collect()
}

/// Which registry applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleKind {
    Minkowski,
    DeSitter,
    AntiDeSitter,
    Rw(Regime),
}

impl EnsembleKind {
    pub fn of(spec: &SpaceTimeSpec) -> Result<Self> {
        Ok(match spec.kind {
            SpaceTimeKind::Minkowski => EnsembleKind::Minkowski,
            SpaceTimeKind::DeSitter => EnsembleKind::DeSitter,
            SpaceTimeKind::AntiDeSitter => EnsembleKind::AntiDeSitter,
            SpaceTimeKind::Rw => EnsembleKind::Rw(classify_regime(spec)?.predicted_regime),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnsembleKind::Minkowski => "minkowski",
            EnsembleKind::DeSitter => "de_sitter",
            EnsembleKind::AntiDeSitter => "anti_de_sitter",
            EnsembleKind::Rw(r) => r.name(),
        }
    }
}

/// Checks registered for each kind of ensemble.
pub fn registry(kind: EnsembleKind) -> &'static [&'static str] {
    match kind {
        EnsembleKind::Minkowski => &["pseudo-norm"],
        EnsembleKind::DeSitter => &["beta-slope", "n-converges", "two-start-ks"],
        EnsembleKind::AntiDeSitter => &["weyl-slopes", "weyl-ordering", "n-converges", "isotropy"],
        EnsembleKind::Rw(Regime::InfFlatLine) => {
            &["lyapunov-tdot", "lyapunov-alpha", "theta-converges", "delta-converges", "pseudo-norm"]
        }
        EnsembleKind::Rw(Regime::FiniteHorizonTangent) => {
            &["clock-saturates", "theta-converges", "x-converges", "pseudo-norm"]
        }
        EnsembleKind::Rw(Regime::FiniteHorizonPoint) => &["clock-grows", "x-converges", "theta-spreads", "pseudo-norm"],
        EnsembleKind::Rw(Regime::InfSphereCircle) => &["bhat-converges", "reconstruction", "pseudo-norm"],
        EnsembleKind::Rw(Regime::InfHypCone) => {
            &["v-to-one", "delta-tilde-converges", "theta-inf-matches", "pseudo-norm"]
        }
    }
}

/// How a check turns aggregates into a verdict.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Rule {
    /// median within `[lo, hi]` scaled by the predicted rate
    Lyapunov(&'static str, usize),
    MedianAtMost(&'static str),
    MedianAtLeast(&'static str),
    MaxAtMost(&'static str),
    /// at least `fraction` of the paths at or below `threshold`
    Fraction(&'static str),
    MedianCiAbove(&'static str),
    WeylSlopes,
    WeylOrdering,
    TwoStartKs,
}

fn rule(check: &str) -> Option<Rule> {
    use metric::*;
    Some(match check {
        "lyapunov-tdot" => Rule::Lyapunov(LOG_TDOT_SLOPE, 0),
        "lyapunov-alpha" => Rule::Lyapunov(LOG_ALPHA_SLOPE, 1),
        "theta-converges" => Rule::MedianAtMost(THETA_TAIL),
        "delta-converges" => Rule::MedianAtMost(DELTA_TAIL),
        "x-converges" => Rule::MedianAtMost(X_TAIL),
        "delta-tilde-converges" => Rule::MedianAtMost(DELTA_TILDE_TAIL),
        "clock-saturates" => Rule::MedianAtMost(CLOCK_GROWTH),
        "theta-inf-matches" => Rule::MedianAtMost(THETA_INF_ANGLE),
        "theta-spreads" => Rule::MedianAtLeast(THETA_TAIL),
        "clock-grows" => Rule::MedianAtLeast(CLOCK_GROWTH),
        "v-to-one" => Rule::MedianAtLeast(V_LAST),
        "pseudo-norm" => Rule::MaxAtMost(PSEUDO_NORM_DEFECT),
        "reconstruction" => Rule::MaxAtMost(RECON_MAX),
        "isotropy" => Rule::MaxAtMost(ISOTROPY),
        "bhat-converges" => Rule::Fraction(BHAT_TAIL),
        "n-converges" => Rule::Fraction(N_TAIL),
        "beta-slope" => Rule::MedianCiAbove(BETA_SLOPE),
        "weyl-slopes" => Rule::WeylSlopes,
        "weyl-ordering" => Rule::WeylOrdering,
        "two-start-ks" => Rule::TwoStartKs,
        _ => return None,
    })
}

/// Every check name known to the registry.
pub fn known_checks() -> Vec<&'static str> {
    let kinds = [
        EnsembleKind::Minkowski,
        EnsembleKind::DeSitter,
        EnsembleKind::AntiDeSitter,
        EnsembleKind::Rw(Regime::InfFlatLine),
        EnsembleKind::Rw(Regime::FiniteHorizonTangent),
        EnsembleKind::Rw(Regime::FiniteHorizonPoint),
        EnsembleKind::Rw(Regime::InfSphereCircle),
        EnsembleKind::Rw(Regime::InfHypCone),
    ];
    let mut v: Vec<&'static str> = kinds.iter().flat_map(|k| registry(*k).iter().copied()).collect();
    v.sort_unstable();
    v.dedup();
    v
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckThreshold {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub version: u32,
    pub split: f64,
    pub lyapunov_window: f64,
    pub min_paths: usize,
    pub checks: BTreeMap<String, CheckThreshold>,
}

const DEFAULT_THRESHOLDS: &str = include_str!("../thresholds.toml");

impl Thresholds {
    pub fn defaults() -> Self {
        Self::from_toml_str(DEFAULT_THRESHOLDS).expect("bundled thresholds parse")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let t: Thresholds = toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("thresholds: {e}")))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("thresholds: {m}")));
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad(format!("split {} outside (0, 1)", self.split));
        }
        if !(self.lyapunov_window > 0.0 && self.lyapunov_window <= 1.0) {
            return bad(format!("lyapunov_window {}", self.lyapunov_window));
        }
        for name in self.checks.keys() {
            if rule(name).is_none() {
                return bad(format!("unknown check `{name}`"));
            }
        }
        for name in known_checks() {
            let Some(c) = self.checks.get(name) else {
                return bad(format!("no entry for `{name}`"));
            };
            let ok = match rule(name) {
                Some(Rule::Lyapunov(..)) => c.lo.is_some() && c.hi.is_some() && c.target.is_some_and(|t| t > 0.0),
                Some(Rule::Fraction(_) | Rule::WeylOrdering) => c.threshold.is_some() && c.fraction.is_some(),
                _ => c.threshold.is_some(),
            };
            if !ok {
                return bad(format!("`{name}` is missing a required field"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub n: usize,
    pub median: f64,
    pub median_ci: (f64, f64),
    pub q05: f64,
    pub q25: f64,
    pub q75: f64,
    pub q95: f64,
    pub max: f64,
}

impl MetricAggregate {
    pub fn of(v: &[f64]) -> Self {
        MetricAggregate {
            n: v.iter().filter(|x| x.is_finite()).count(),
            median: median(v),
            median_ci: median_ci(v),
            q05: quantile(v, 0.05),
            q25: quantile(v, 0.25),
            q75: quantile(v, 0.75),
            q95: quantile(v, 0.95),
            max: quantile(v, 1.0),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub metrics: BTreeMap<String, MetricAggregate>,
    /// fraction-type checks: `(paths meeting the threshold) / (paths with a value)`
    pub fractions: BTreeMap<String, (f64, usize)>,
    /// KS distance of terminal `theta1_last` between the two starts
    pub two_start_ks: Option<f64>,
    pub two_start_sizes: (usize, usize),
    /// predicted `(log tdot, log alpha)` rates
    pub lyapunov_target: Option<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub verdict: Verdict,
    pub statistic: f64,
    pub threshold: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub kind: String,
    pub requested: usize,
    pub aborted: usize,
    #[serde(rename = "perPath")]
    pub per_path: Vec<PathSummary>,
    pub aggregates: Aggregates,
    pub verdicts: BTreeMap<String, CheckOutcome>,
}

impl EnsembleSummary {
    /// 0 when every check passes, 1 on any failure, otherwise 2 when some
    /// check is inconclusive.
    pub fn exit_code(&self) -> i32 {
        let v = || self.verdicts.values().map(|o| o.verdict);
        if v().any(|x| x == Verdict::Fail) {
            1
        } else if v().any(|x| x == Verdict::Inconclusive) {
            2
        } else {
            0
        }
    }

    /// One row per check: `check,statistic,threshold,verdict`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(vec![]);
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(["check", "statistic", "threshold", "verdict"]).map_err(io)?;
        for (name, o) in &self.verdicts {
            let verdict = match o.verdict {
                Verdict::Pass => "pass",
                Verdict::Fail => "fail",
                Verdict::Inconclusive => "inconclusive",
            };
            w.write_record([name.as_str(), &format!("{:e}", o.statistic), &o.threshold, verdict]).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
    }
}

/// Aggregates of every metric present in the ensemble, plus the fraction and
/// two-start statistics the registered checks need.
pub fn aggregate(ens: &Ensemble, th: &Thresholds, checks: &[&str], target: Option<(f64, f64)>) -> Aggregates {
    let mut keys: Vec<&String> = ens.paths.iter().flat_map(|p| p.metrics.keys()).collect();
    keys.sort();
    keys.dedup();
    let metrics = keys.into_iter().map(|k| (k.clone(), MetricAggregate::of(&ens.values(k)))).collect();
    let mut fractions = BTreeMap::new();
    for &name in checks {
        let Some(c) = th.checks.get(name) else { continue };
        let thr = c.threshold.unwrap_or(f64::NAN);
        let hits_of = |flags: Vec<bool>| {
            let n = flags.len();
            let hits = flags.iter().filter(|&&b| b).count();
            (if n == 0 { f64::NAN } else { hits as f64 / n as f64 }, n)
        };
        match rule(name) {
            Some(Rule::Fraction(key)) => {
                fractions.insert(name.to_string(), hits_of(ens.values(key).iter().map(|&v| v <= thr).collect()));
            }
            Some(Rule::WeylOrdering) => {
                let flags = ens
                    .paths
                    .iter()
                    .filter_map(|p| Some((*p.metrics.get(metric::LAMBDA_SLOPE)?, *p.metrics.get(metric::MU_SLOPE)?)))
                    .map(|(l, m)| l > m && m > thr)
                    .collect();
                fractions.insert(name.to_string(), hits_of(flags));
            }
            _ => {}
        }
    }
    let a = theta1_pool(&ens.paths);
    let b = theta1_pool(&ens.antipodal);
    let two_start_ks = (!b.is_empty()).then(|| ks_statistic(&a, &b));
    Aggregates { metrics, fractions, two_start_ks, two_start_sizes: (a.len(), b.len()), lyapunov_target: target }
}

/// Verdict of one check; a pure function of the aggregates and thresholds.
pub fn evaluate(name: &str, agg: &Aggregates, th: &Thresholds) -> CheckOutcome {
    let out = |verdict, statistic: f64, threshold: String, detail: String| CheckOutcome {
        verdict,
        statistic,
        threshold,
        detail,
    };
    let inconclusive = |why: String| out(Verdict::Inconclusive, f64::NAN, String::new(), why);
    let (Some(r), Some(c)) = (rule(name), th.checks.get(name)) else {
        return inconclusive(format!("no rule or threshold for `{name}`"));
    };
    let pass = |b: bool| if b { Verdict::Pass } else { Verdict::Fail };
    let enough = |key: &str| -> std::result::Result<&MetricAggregate, CheckOutcome> {
        match agg.metrics.get(key) {
            Some(m) if m.n >= th.min_paths.max(1) => Ok(m),
            Some(m) => Err(inconclusive(format!("{} paths with `{key}`, need {}", m.n, th.min_paths))),
            None => Err(inconclusive(format!("no path has `{key}`"))),
        }
    };
    let thr = c.threshold.unwrap_or(f64::NAN);
    match r {
        Rule::Lyapunov(key, idx) => {
            let m = match enough(key) {
                Ok(m) => m,
                Err(o) => return o,
            };
            let Some(pred) = agg.lyapunov_target.map(|p| if idx == 0 { p.0 } else { p.1 }) else {
                return inconclusive("no rate prediction for this warp".into());
            };
            let (lo, hi, target) = (c.lo.unwrap_or(f64::NAN), c.hi.unwrap_or(f64::NAN), c.target.unwrap_or(f64::NAN));
            let scale = pred / target;
            let (lo, hi) = (lo * scale, hi * scale);
            out(
                pass(m.median >= lo && m.median <= hi),
                m.median,
                format!("[{lo:.4}, {hi:.4}]"),
                format!("predicted {pred:.4}, median CI [{:.4}, {:.4}], n = {}", m.median_ci.0, m.median_ci.1, m.n),
            )
        }
        Rule::MedianAtMost(key) | Rule::MedianAtLeast(key) => {
            let m = match enough(key) {
                Ok(m) => m,
                Err(o) => return o,
            };
            let at_most = matches!(r, Rule::MedianAtMost(_));
            let ok = if at_most { m.median <= thr } else { m.median >= thr };
            out(
                pass(ok),
                m.median,
                format!("{}{thr}", if at_most { "<=" } else { ">=" }),
                format!("median of `{key}`, q25 {:.3e}, q75 {:.3e}, n = {}", m.q25, m.q75, m.n),
            )
        }
        Rule::MaxAtMost(key) => {
            let m = match enough(key) {
                Ok(m) => m,
                Err(o) => return o,
            };
            out(pass(m.max <= thr), m.max, format!("<={thr}"), format!("largest `{key}` over {} paths", m.n))
        }
        Rule::Fraction(_) | Rule::WeylOrdering => {
            let (f, n) = agg.fractions.get(name).copied().unwrap_or((f64::NAN, 0));
            let need = c.fraction.unwrap_or(f64::NAN);
            if n < th.min_paths.max(1) || !f.is_finite() {
                return inconclusive(format!("{n} paths with a value, need {}", th.min_paths));
            }
            out(pass(f >= need), f, format!(">={need}"), format!("fraction of {n} paths meeting {thr}"))
        }
        Rule::MedianCiAbove(key) => {
            let m = match enough(key) {
                Ok(m) => m,
                Err(o) => return o,
            };
            out(
                pass(m.median_ci.0 > thr),
                m.median_ci.0,
                format!(">{thr}"),
                format!("lower end of the median CI of `{key}`; median {:.4}, n = {}", m.median, m.n),
            )
        }
        Rule::WeylSlopes => {
            let (l, mu) = match (enough(metric::LAMBDA_SLOPE), enough(metric::MU_SLOPE)) {
                (Ok(l), Ok(m)) => (l, m),
                (Err(o), _) | (_, Err(o)) => return o,
            };
            let stat = (l.median - mu.median).min(l.median_ci.0).min(mu.median_ci.0);
            out(
                pass(stat > thr),
                stat,
                format!(">{thr}"),
                format!(
                    "lambda median {:.4} CI [{:.4}, {:.4}]; mu median {:.4} CI [{:.4}, {:.4}]",
                    l.median, l.median_ci.0, l.median_ci.1, mu.median, mu.median_ci.0, mu.median_ci.1
                ),
            )
        }
        Rule::TwoStartKs => {
            let (na, nb) = agg.two_start_sizes;
            match agg.two_start_ks {
                Some(ks) if na >= 50 && nb >= 50 => {
                    out(pass(ks <= thr), ks, format!("<={thr}"), format!("sample sizes {na} and {nb}"))
                }
                _ => inconclusive(format!("two-start sample sizes {na} and {nb}, need 50 each")),
            }
        }
    }
}

/// Runs the checks registered for the space-time's regime (or the override list)
/// and returns the summary with the numbers behind every verdict.
pub fn verdict_suite(
    spec: &SpaceTimeSpec,
    ens: &Ensemble,
    th: &Thresholds,
    checks: Option<&[String]>,
) -> EnsembleSummary {
    let kind = EnsembleKind::of(spec);
    let names: Vec<&str> = match (checks, &kind) {
        (Some(list), _) => list.iter().map(String::as_str).collect(),
        (None, Ok(k)) => registry(*k).to_vec(),
        (None, Err(_)) => vec![],
    };
    let target = match kind {
        Ok(EnsembleKind::Rw(_)) => classify_regime(spec).ok().and_then(|r| r.lyapunov_prediction(spec.d, spec.sigma)),
        _ => None,
    };
    let aggregates = aggregate(ens, th, &names, target);
    let mut verdicts: BTreeMap<String, CheckOutcome> =
        names.iter().map(|n| (n.to_string(), evaluate(n, &aggregates, th))).collect();
    if let Err(e) = &kind {
        verdicts.insert(
            "regime".into(),
            CheckOutcome {
                verdict: Verdict::Inconclusive,
                statistic: f64::NAN,
                threshold: String::new(),
                detail: e.to_string(),
            },
        );
    }
    EnsembleSummary {
        kind: kind.map(|k| k.name().to_string()).unwrap_or_else(|_| "unknown".into()),
        requested: ens.requested,
        aborted: ens.aborted,
        per_path: ens.paths.clone(),
        aggregates,
        verdicts,
    }
}
