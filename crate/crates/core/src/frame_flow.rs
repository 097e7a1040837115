//! Left-invariant diffusions on the isometry groups and their projections to
//! the unit tangent bundle.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{eij, expm_checked, q_defect, q_gram_schmidt, signature};

/// Largest admissible norm of a step exponent.
pub const EXP_LIMIT: f64 = 50.0;
/// Default re-orthonormalisation cadence in steps.
pub const REORTH_CADENCE: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupTag {
    /// `SO(1, d+1)`, de Sitter
    So1dPlus1,
    /// `SO(2, d)`, anti de Sitter
    So2d,
    /// `SO(1, d)`, hyperbolic fiber lift
    So1d,
    /// `SO(d+1)`, spherical fiber lift
    SoDPlus1,
}

impl GroupTag {
    pub fn matrix_dim(&self, d: usize) -> usize {
        match self {
            GroupTag::So1dPlus1 | GroupTag::So2d => d + 2,
            GroupTag::So1d | GroupTag::SoDPlus1 => d + 1,
        }
    }

    /// Number of negative directions of the preserved form.
    pub fn negatives(&self) -> usize {
        match self {
            GroupTag::So1dPlus1 | GroupTag::So1d => 1,
            GroupTag::So2d => 2,
            GroupTag::SoDPlus1 => 0,
        }
    }

    pub fn form(&self, d: usize) -> DMatrix<f64> {
        let n = self.matrix_dim(d);
        signature(self.negatives(), n - self.negatives())
    }
}

impl fmt::Display for GroupTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupTag::So1dPlus1 => "so1d+1",
            GroupTag::So2d => "so2d",
            GroupTag::So1d => "so1d",
            GroupTag::SoDPlus1 => "sod+1",
        })
    }
}

impl FromStr for GroupTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "so1d+1" | "SO(1,d+1)" => Ok(GroupTag::So1dPlus1),
            "so2d" | "SO(2,d)" => Ok(GroupTag::So2d),
            "so1d" | "SO(1,d)" => Ok(GroupTag::So1d),
            "sod+1" | "SO(d+1)" => Ok(GroupTag::SoDPlus1),
            _ => Err(Error::UnsupportedGroup(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameElement {
    pub group: GroupTag,
    pub d: usize,
    pub g: DMatrix<f64>,
}

impl FrameElement {
    pub fn identity(group: GroupTag, d: usize) -> Self {
        let n = group.matrix_dim(d);
        FrameElement { group, d, g: DMatrix::identity(n, n) }
    }

    pub fn new(group: GroupTag, d: usize, g: DMatrix<f64>) -> Result<Self> {
        let n = group.matrix_dim(d);
        if g.nrows() != n || g.ncols() != n {
            return Err(Error::Dimension { expected: n, got: g.nrows() });
        }
        Ok(FrameElement { group, d, g })
    }

    pub fn form(&self) -> DMatrix<f64> {
        self.group.form(self.d)
    }

    /// `max |G^T J G - J|`.
    pub fn q_defect(&self) -> f64 {
        q_defect(&self.g, &self.form())
    }

    /// Group membership: Q-orthogonal, unit determinant, and time orientation
    /// preserved for the Lorentz groups.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let scale = self.g.amax().max(1.0);
        let qd = self.q_defect();
        if qd > tol * scale * scale {
            return Err(Error::StateInvalid(format!("G^T J G - J = {qd:.3e}")));
        }
        let det = self.g.determinant();
        if (det - 1.0).abs() > tol * scale.powi(self.g.nrows() as i32) {
            return Err(Error::StateInvalid(format!("det = {det}")));
        }
        if self.group.negatives() == 1 && self.g[(0, 0)] <= 0.0 {
            return Err(Error::StateInvalid("time orientation reversed".into()));
        }
        Ok(())
    }

    pub fn reorthonormalize(&mut self) {
        let j = self.form();
        q_gram_schmidt(&mut self.g, &j);
    }

    pub fn row_major(&self) -> Vec<f64> {
        self.g.transpose().as_slice().to_vec()
    }
}

/// Horizontal field `H0` and vertical fields `V_i`. For the hyperbolic lift
/// also `H1` and the boosts `H_i` that pair with `V_i` in the nilpotent part.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorBasis {
    pub h0: DMatrix<f64>,
    pub v: Vec<DMatrix<f64>>,
    pub h1: Option<DMatrix<f64>>,
    pub h: Vec<DMatrix<f64>>,
}

fn sym(n: usize, i: usize, j: usize) -> DMatrix<f64> {
    eij(n, i, j) + eij(n, j, i)
}

fn anti(n: usize, i: usize, j: usize) -> DMatrix<f64> {
    eij(n, i, j) - eij(n, j, i)
}

pub fn generator_basis(group: GroupTag, d: usize) -> Result<GeneratorBasis> {
    if d < 2 {
        return Err(Error::InvalidConfig(format!("d = {d} < 2")));
    }
    let n = group.matrix_dim(d);
    Ok(match group {
        GroupTag::So1dPlus1 => {
            GeneratorBasis { h0: sym(n, 0, 1), v: (1..=d).map(|i| sym(n, i + 1, 0)).collect(), h1: None, h: vec![] }
        }
        GroupTag::So2d => GeneratorBasis {
            // rotation taking e0 to e1
            h0: anti(n, 1, 0),
            v: (1..=d).map(|i| sym(n, i + 1, 1)).collect(),
            h1: None,
            h: vec![],
        },
        GroupTag::SoDPlus1 => GeneratorBasis {
            // H0 e0 = e1, so x = g(e0) moves along g(e1)
            h0: anti(n, 1, 0),
            v: (2..=d).map(|i| anti(n, 1, i)).collect(),
            h1: None,
            h: vec![],
        },
        GroupTag::So1d => GeneratorBasis {
            h0: sym(n, 1, 0),
            v: (2..=d).map(|i| anti(n, i, 1)).collect(),
            h1: Some(sym(n, 0, 1)),
            h: (2..=d).map(|i| sym(n, 0, i)).collect(),
        },
    })
}

/// `X^T J + J X`.
pub fn algebra_defect(x: &DMatrix<f64>, j: &DMatrix<f64>) -> f64 {
    (x.transpose() * j + j * x).amax()
}

/// Step exponent `drift H0 ds + noise sum_i V_i eta_i sqrt(ds)`.
pub fn step_generator(
    basis: &GeneratorBasis,
    drift_rate: f64,
    noise_rate: f64,
    ds: f64,
    eta: &[f64],
) -> Result<DMatrix<f64>> {
    if eta.len() != basis.v.len() {
        return Err(Error::Dimension { expected: basis.v.len(), got: eta.len() });
    }
    let mut x = &basis.h0 * (drift_rate * ds);
    let sq = noise_rate * ds.sqrt();
    for (v, e) in basis.v.iter().zip(eta) {
        x += v * (sq * e);
    }
    Ok(x)
}

/// Right-multiplied exponential step `g <- g exp(X)`.
pub fn strat_step(
    g: &FrameElement,
    basis: &GeneratorBasis,
    drift_rate: f64,
    noise_rate: f64,
    ds: f64,
    eta: &[f64],
) -> Result<FrameElement> {
    if ds < 0.0 {
        return Err(Error::InvalidConfig(format!("ds = {ds}")));
    }
    let x = step_generator(basis, drift_rate, noise_rate, ds, eta)?;
    let e = expm_checked(&x, EXP_LIMIT)?;
    Ok(FrameElement { group: g.group, d: g.d, g: &g.g * e })
}

/// `(xi, xidot)` for the model spaces, `(x, Theta)` for the fiber lifts.
pub fn project_t1(g: &FrameElement) -> (DVector<f64>, DVector<f64>) {
    let c0 = g.g.column(0).into_owned();
    let c1 = g.g.column(1).into_owned();
    match g.group {
        GroupTag::So1dPlus1 => (c1, c0),
        _ => (c0, c1),
    }
}

/// Reference diffusion `g_s` of a model space with `drift = 1`, `noise = sigma`.
#[derive(Clone, Debug)]
pub struct FrameWalker {
    pub g: FrameElement,
    pub basis: GeneratorBasis,
    pub sigma: f64,
    pub reorth_cadence: usize,
    steps: usize,
}

impl FrameWalker {
    pub fn new(g: FrameElement, sigma: f64, reorth_cadence: usize) -> Result<Self> {
        let basis = generator_basis(g.group, g.d)?;
        Ok(FrameWalker { g, basis, sigma, reorth_cadence, steps: 0 })
    }

    pub fn step(&mut self, ds: f64, eta: &[f64]) -> Result<()> {
        self.g = strat_step(&self.g, &self.basis, 1.0, self.sigma, ds, eta)?;
        self.steps += 1;
        if self.reorth_cadence > 0 && self.steps.is_multiple_of(self.reorth_cadence) {
            self.g.reorthonormalize();
        }
        Ok(())
    }
}

/// Euler step of the circle diffusion
/// `d theta = sigma cos(theta) dW + (1 + sigma^2 (d-2)/4 sin(2 theta)) ds`.
pub fn theta_ads_step(theta: f64, d: usize, sigma: f64, ds: f64, eta: f64) -> f64 {
    let drift = 1.0 + sigma * sigma * (d as f64 - 2.0) / 4.0 * (2.0 * theta).sin();
    theta + drift * ds + sigma * theta.cos() * ds.sqrt() * eta
}

/// Euler step of the sphere diffusion of `theta = k(e1)` in `R^{d+1}` (index 0
/// is `e1`), renormalised onto the sphere.
pub fn theta_ds_step(theta: &DVector<f64>, d: usize, sigma: f64, ds: f64, eta: &[f64]) -> DVector<f64> {
    let m = theta.len();
    let th1 = theta[0];
    let eta = DVector::from_column_slice(eta);
    let proj = &eta - theta * theta.dot(&eta);
    let mut e1 = DVector::zeros(m);
    e1[0] = 1.0;
    let mut next = theta - proj * (sigma * th1 * ds.sqrt());
    next -= (&e1 * ((d as f64 - 2.0) * th1) + theta * (2.0 * th1 * th1)) * (sigma * sigma / 2.0 * ds);
    next += (&e1 - theta * th1) * ds;
    let r = next.norm();
    next / r
}

/// Either scalar or spherical angle, for the generic cross-validation path.
#[derive(Clone, Debug, PartialEq)]
pub enum Theta {
    Ads(f64),
    Ds(DVector<f64>),
}

pub fn theta_direct_step(theta: &Theta, d: usize, sigma: f64, ds: f64, eta: &[f64]) -> Theta {
    match theta {
        Theta::Ads(t) => Theta::Ads(theta_ads_step(*t, d, sigma, ds, eta[0])),
        Theta::Ds(v) => Theta::Ds(theta_ds_step(v, d, sigma, ds, eta)),
    }
}
