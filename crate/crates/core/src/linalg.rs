//! Small dense helpers shared by the group integrators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `diag(-1 x p, +1 x q)`.
pub fn signature(p: usize, q: usize) -> DMatrix<f64> {
    let mut j = DMatrix::identity(p + q, p + q);
    for k in 0..p {
        j[(k, k)] = -1.0;
    }
    j
}

/// Unit basis vector `e_i` of length `n`.
pub fn unit(n: usize, i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[i] = 1.0;
    v
}

/// `a b^T`.
pub fn outer(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    a * b.transpose()
}

/// Matrix unit `E_{ij}` (ones at row i, column j).
pub fn eij(n: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    m[(i, j)] = 1.0;
    m
}

/// Error-free `a*b = p + e`.
#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Compensated sum of products, accurate to a few ulps of the result
/// regardless of cancellation between terms.
pub fn dot_compensated(terms: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for (a, b) in terms {
        let (p, e) = two_prod(a, b);
        let t = s + p;
        let z = t - s;
        c += (s - (t - z)) + (p - z) + e;
        s = t;
    }
    s + c
}

/// `x^T diag(w) y` with compensated summation.
pub fn weighted_dot(w: &[f64], x: &[f64], y: &[f64]) -> f64 {
    dot_compensated(w.iter().zip(x).zip(y).map(|((w, x), y)| (w * x, *y)))
}

/// `max |G^T J G - J|`.
pub fn q_defect(g: &DMatrix<f64>, j: &DMatrix<f64>) -> f64 {
    (g.transpose() * j * g - j).amax()
}

/// Gram-Schmidt of the columns of `g` with respect to the diagonal form `j`,
/// processed in the order `e_0, e_1, ...`.
pub fn q_gram_schmidt(g: &mut DMatrix<f64>, j: &DMatrix<f64>) {
    let n = g.ncols();
    let w: Vec<f64> = (0..n).map(|k| j[(k, k)]).collect();
    for c in 0..n {
        for _ in 0..2 {
            for p in 0..c {
                let num = qdot(&w, g, c, p);
                let den = w[p];
                let f = num / den;
                for r in 0..g.nrows() {
                    let v = g[(r, p)];
                    g[(r, c)] -= f * v;
                }
            }
        }
        let nn = qdot(&w, g, c, c);
        if !(nn.abs() > 0.0) || !nn.is_finite() {
            continue;
        }
        let s = 1.0 / nn.abs().sqrt();
        for r in 0..g.nrows() {
            g[(r, c)] *= s;
        }
    }
}

fn qdot(w: &[f64], g: &DMatrix<f64>, a: usize, b: usize) -> f64 {
    dot_compensated((0..g.nrows()).map(|r| (w[r] * g[(r, a)], g[(r, b)])))
}

/// Nearest rotation by re-orthonormalising the columns (Euclidean).
pub fn reorthonormalize(k: &mut DMatrix<f64>) {
    let j = DMatrix::identity(k.nrows(), k.ncols());
    q_gram_schmidt(k, &j);
}

/// Matrix exponential. Generators with `X^3 = c X` (rank-2 boosts and
/// rotations, and square-zero-cubed nilpotents) use the closed form; anything
/// else goes through scaling-and-squaring Pade.
pub fn expm(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let xx = x * x;
    let xxx = &xx * x;
    let nx = x.norm_squared();
    if nx == 0.0 {
        return DMatrix::identity(n, n);
    }
    let c = xxx.dot(x) / nx;
    let scale = nx.sqrt().max(1.0);
    if (&xxx - x * c).amax() <= 1e-13 * scale * scale * scale {
        let (a, b) = if c < -1e-300 {
            let th = (-c).sqrt();
            (th.sin() / th, (1.0 - th.cos()) / (th * th))
        } else if c > 1e-300 {
            let th = c.sqrt();
            (th.sinh() / th, (th.cosh() - 1.0) / (th * th))
        } else {
            (1.0, 0.5)
        };
        let mut e = DMatrix::identity(n, n);
        e += x * a;
        e += xx * b;
        return e;
    }
    x.clone().exp()
}

/// Exponential with the overflow guard used by the step functions.
pub fn expm_checked(x: &DMatrix<f64>, limit: f64) -> Result<DMatrix<f64>> {
    let nrm = x.norm();
    if !nrm.is_finite() || nrm > limit {
        return Err(Error::StepRejected(format!("exponential argument norm {nrm:.3e} exceeds {limit}")));
    }
    Ok(expm(x))
}

/// Orthonormal completion of a unit vector: returns an orthogonal matrix whose
/// first column is `n` (Householder reflection, sign-corrected).
pub fn householder_completion(n: &DVector<f64>) -> DMatrix<f64> {
    let m = n.len();
    let mut w = n.clone();
    // reflect e0 onto n; pick the sign that avoids cancellation
    let s = if n[0] >= 0.0 { 1.0 } else { -1.0 };
    w[0] += s;
    let ww = w.norm_squared();
    let mut h = DMatrix::identity(m, m);
    if ww > 0.0 {
        h -= (&w * w.transpose()) * (2.0 / ww);
    }
    // H e0 = -s n
    h.column_mut(0).scale_mut(-s);
    h
}

/// Vectors built from the coordinate basis that are orthonormal for `inner`
/// and orthogonal to everything in `taken`.
pub fn complement_basis(
    dim: usize,
    inner: impl Fn(&DVector<f64>, &DVector<f64>) -> f64,
    taken: &[DVector<f64>],
    want: usize,
) -> Vec<DVector<f64>> {
    let mut basis: Vec<DVector<f64>> = taken.to_vec();
    let mut out = Vec::with_capacity(want);
    for i in 0..dim {
        if out.len() == want {
            break;
        }
        let mut v = unit(dim, i);
        for _ in 0..2 {
            for b in &basis {
                let c = inner(&v, b) / inner(b, b);
                v -= b * c;
            }
        }
        let nn = inner(&v, &v);
        if nn > 1e-6 {
            v /= nn.sqrt();
            basis.push(v.clone());
            out.push(v);
        }
    }
    out
}

/// `m <- m exp(angle Y)` for the plane generator `Y = b a^T - a b^T`
/// (rotation, `a -> cos a + sin b`) or `Y = b a^T + a b^T` (boost with `a`
/// timelike, `a -> cosh a + sinh b`). `a` and `b` are orthonormal coordinate
/// vectors of the plane; the update is rank two.
pub fn plane_exp_right(m: &mut DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>, angle: f64, boost: bool) {
    let (s, c1) = if boost { (angle.sinh(), angle.cosh() - 1.0) } else { (angle.sin(), angle.cos() - 1.0) };
    let ma = &*m * a;
    let mb = &*m * b;
    let sgn = if boost { 1.0 } else { -1.0 };
    // rows of the update: (m b) a^T (+/-) (m a) b^T and (m a) a^T + (m b) b^T
    let p = &mb * s + &ma * c1;
    let q = &ma * (sgn * s) + &mb * c1;
    m.ger(1.0, &p, a, 1.0);
    m.ger(1.0, &q, b, 1.0);
}

/// `m <- exp(angle (b a^T - a b^T)) m`, a rotation taking `a` towards `b`.
pub fn plane_rotation_left(m: &mut DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>, angle: f64) {
    let (s, c1) = (angle.sin(), angle.cos() - 1.0);
    let at = a.transpose() * &*m;
    let bt = b.transpose() * &*m;
    m.ger(s, b, &at.transpose(), 1.0);
    m.ger(-s, a, &bt.transpose(), 1.0);
    m.ger(c1, a, &at.transpose(), 1.0);
    m.ger(c1, b, &bt.transpose(), 1.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rot_gen(n: usize, i: usize, j: usize) -> DMatrix<f64> {
        eij(n, j, i) - eij(n, i, j)
    }

    fn boost_gen(n: usize, i: usize, j: usize) -> DMatrix<f64> {
        eij(n, j, i) + eij(n, i, j)
    }

    #[test]
    fn closed_form_matches_pade_for_boost_and_rotation() {
        for x in [boost_gen(5, 0, 2) * 0.7, rot_gen(5, 1, 3) * 1.3] {
            let a = expm(&x);
            let b = x.clone().exp();
            assert!((a - b).amax() < 1e-12);
        }
    }

    #[test]
    fn boost_entries() {
        let e = expm(&(boost_gen(4, 0, 1) * 0.5));
        assert_relative_eq!(e[(0, 0)], 0.5f64.cosh(), epsilon = 1e-15);
        assert_relative_eq!(e[(1, 0)], 0.5f64.sinh(), epsilon = 1e-15);
        assert_relative_eq!(e[(2, 2)], 1.0);
    }

    #[test]
    fn mixed_generator_falls_back() {
        let x = boost_gen(5, 0, 2) * 0.3 + rot_gen(5, 0, 1) * 0.2 + boost_gen(5, 1, 4) * 0.1;
        let j = signature(2, 3);
        let e = expm(&x);
        assert!((e.clone() - x.clone().exp()).amax() < 1e-13);
        // x lies in o(2,3) so exp(x) preserves J
        assert!(q_defect(&e, &j) < 1e-13);
    }

    #[test]
    fn q_gram_schmidt_repairs_drift() {
        let j = signature(1, 3);
        let mut g = expm(&(boost_gen(4, 0, 1) * 0.8 + boost_gen(4, 0, 2) * 0.1));
        g[(1, 2)] += 1e-5;
        assert!(q_defect(&g, &j) > 1e-6);
        q_gram_schmidt(&mut g, &j);
        assert!(q_defect(&g, &j) < 1e-13);
    }

    #[test]
    fn householder_first_column() {
        let n = DVector::from_vec(vec![-0.6, 0.0, 0.8]);
        let h = householder_completion(&n);
        assert!((h.column(0) - &n).amax() < 1e-15);
        assert!((h.transpose() * &h - DMatrix::identity(3, 3)).amax() < 1e-15);
    }

    #[test]
    fn plane_updates_match_expm() {
        let n = 5;
        let mut g = expm(&(rot_gen(n, 0, 3) * 0.4 + rot_gen(n, 2, 4) * 1.1));
        let a = DVector::from_vec(vec![0.0, 0.6, 0.0, 0.8, 0.0]);
        let b = DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let y = &b * a.transpose() - &a * b.transpose();
        let want = &g * expm(&(&y * 0.9));
        let mut got = g.clone();
        plane_exp_right(&mut got, &a, &b, 0.9, false);
        assert!((got - want).amax() < 1e-14);
        let want_left = expm(&(&y * 0.9)) * &g;
        plane_rotation_left(&mut g, &a, &b, 0.9);
        assert!((g - want_left).amax() < 1e-14);

        let e0 = unit(n, 0);
        let c = DVector::from_vec(vec![0.0, 0.0, 0.6, 0.8, 0.0]);
        let yb = &c * e0.transpose() + &e0 * c.transpose();
        let h = expm(&(boost_gen(n, 0, 1) * 0.3));
        let want = &h * expm(&(&yb * 1.7));
        let mut got = h.clone();
        plane_exp_right(&mut got, &e0, &c, 1.7, true);
        assert!((got - want).amax() < 1e-13);
    }

    #[test]
    fn compensated_dot_survives_cancellation() {
        let big = 1e8_f64 + 1.0;
        let v = dot_compensated([(big, big), (-1e8, 1e8), (-2e8, 1.0)]);
        assert_eq!(v, 1.0);
    }
}
