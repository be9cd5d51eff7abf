//! Correlation, partial correlation and Student-t significance.
//!
//! The partial-correlation test (ParCorr) regresses both series on the
//! conditioning set (plus intercept) by ordinary least squares and correlates
//! the residuals. Significance comes from the Student-t distribution, whose
//! tail is evaluated through the regularized incomplete beta function.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::{c, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need more than {needed} samples, got {n}")]
    InsufficientData { n: usize, needed: usize },
    #[error("conditioning set is rank deficient (column {column})")]
    SingularDesign { column: usize },
    #[error("series has zero variance{}", .0.map(|r| format!(" (row {r})")).unwrap_or_default())]
    DegenerateSeries(Option<usize>),
    #[error("argument outside domain: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// Outcome of one conditional-independence test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiTestResult<T> {
    /// Partial correlation of the residuals, in [-1, 1].
    pub statistic: T,
    /// Two-sided p-value.
    pub pvalue: T,
    /// `n - 2 - rank(Z)`.
    pub dof: usize,
}

/// Ridge added to the diagonal of the conditioning Gram matrix.
pub const GRAM_RIDGE: f64 = 1e-10;

/// Relative Cholesky pivot below which a conditioning column counts as
/// linearly dependent on the previous ones.
const PIVOT_TOL: f64 = 1e-9;

/// Relative residual norm below which a residual counts as identically zero.
const RESIDUAL_TOL: f64 = 1e-10;

fn centered<T: Scalar>(x: &[T]) -> (Vec<T>, T) {
    let n = T::from_usize_lossy(x.len());
    let mean = x.iter().copied().sum::<T>() / n;
    (x.iter().map(|&v| v - mean).collect(), mean)
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Pearson correlation coefficient.
pub fn pearson<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    partial_correlation(x, y, &[])
}

/// Least-squares projection onto the centered columns of a conditioning set.
struct Projector<T> {
    cols: Vec<Vec<T>>,
    /// Lower-triangular Cholesky factor over the kept columns, row-major.
    chol: Vec<T>,
    kept: Vec<usize>,
}

impl<T: Scalar> Projector<T> {
    /// Factors `Zᵀ Z + ridge·I`. With `strict`, a dependent column is an
    /// error; otherwise it is dropped.
    fn new(z: &[&[T]], n: usize, strict: bool) -> Result<Self> {
        let cols: Vec<Vec<T>> = z.iter().map(|col| centered(col).0).collect();
        let k = cols.len();
        let ridge = c::<T>(GRAM_RIDGE);
        let mut kept: Vec<usize> = Vec::with_capacity(k);
        let mut chol: Vec<T> = Vec::new();
        for j in 0..k {
            if cols[j].len() != n {
                return Err(StatsError::LengthMismatch(cols[j].len(), n));
            }
            let m = kept.len();
            // Row j of L against the kept columns.
            let mut row = vec![T::zero(); m + 1];
            for (p, &kp) in kept.iter().enumerate() {
                let mut s = dot(&cols[j], &cols[kp]);
                for q in 0..p {
                    s -= row[q] * chol[p * (p + 1) / 2 + q];
                }
                row[p] = s / chol[p * (p + 1) / 2 + p];
            }
            let gjj = dot(&cols[j], &cols[j]) + ridge;
            let pivot = gjj - row[..m].iter().map(|&v| v * v).sum::<T>();
            if pivot <= c::<T>(PIVOT_TOL) * gjj {
                if strict {
                    return Err(StatsError::SingularDesign { column: j });
                }
                continue;
            }
            row[m] = pivot.sqrt();
            chol.extend_from_slice(&row);
            kept.push(j);
        }
        Ok(Self { cols, chol, kept })
    }

    fn rank(&self) -> usize {
        self.kept.len()
    }

    fn l(&self, i: usize, j: usize) -> T {
        self.chol[i * (i + 1) / 2 + j]
    }

    /// Residual of a centered series after projecting out the kept columns.
    fn residual(&self, xc: &[T]) -> Vec<T> {
        let m = self.kept.len();
        if m == 0 {
            return xc.to_vec();
        }
        let rhs: Vec<T> = self.kept.iter().map(|&j| dot(&self.cols[j], xc)).collect();
        let mut w = vec![T::zero(); m];
        for i in 0..m {
            let mut s = rhs[i];
            for q in 0..i {
                s -= self.l(i, q) * w[q];
            }
            w[i] = s / self.l(i, i);
        }
        let mut beta = vec![T::zero(); m];
        for i in (0..m).rev() {
            let mut s = w[i];
            for q in i + 1..m {
                s -= self.l(q, i) * beta[q];
            }
            beta[i] = s / self.l(i, i);
        }
        let mut res = xc.to_vec();
        for (b, &j) in beta.iter().zip(&self.kept) {
            for (r, &z) in res.iter_mut().zip(&self.cols[j]) {
                *r -= *b * z;
            }
        }
        res
    }
}

fn residual_correlation<T: Scalar>(x: &[T], y: &[T], proj: &Projector<T>) -> Result<T> {
    let (xc, _) = centered(x);
    let (yc, _) = centered(y);
    let rx = proj.residual(&xc);
    let ry = proj.residual(&yc);
    let nx = dot(&rx, &rx).sqrt();
    let ny = dot(&ry, &ry).sqrt();
    let sx = dot(&xc, &xc).sqrt();
    let sy = dot(&yc, &yc).sqrt();
    let tol = c::<T>(RESIDUAL_TOL);
    if nx <= tol * sx || ny <= tol * sy || nx == T::zero() || ny == T::zero() {
        return Err(StatsError::DegenerateSeries(None));
    }
    let r = dot(&rx, &ry) / (nx * ny);
    Ok(r.max(-T::one()).min(T::one()))
}

fn check_lengths<T>(x: &[T], y: &[T], k: usize) -> Result<usize> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n <= k + 2 {
        return Err(StatsError::InsufficientData { n, needed: k + 2 });
    }
    Ok(n)
}

/// Partial correlation of `x` and `y` given the columns `z` (intercept implied).
///
/// With an empty `z` this is the Pearson correlation. Rank-deficient `z` is an
/// error.
pub fn partial_correlation<T: Scalar>(x: &[T], y: &[T], z: &[&[T]]) -> Result<T> {
    let n = check_lengths(x, y, z.len())?;
    let proj = Projector::new(z, n, true)?;
    residual_correlation(x, y, &proj)
}

/// Two-sided p-value of a partial correlation `r` from `n` samples with `k`
/// conditioning variables.
pub fn parcorr_pvalue<T: Scalar>(r: T, n: usize, k: usize) -> Result<T> {
    let dof = n
        .checked_sub(2 + k)
        .filter(|&d| d >= 1)
        .ok_or(StatsError::InsufficientData { n, needed: k + 3 })?;
    if !r.is_finite() || r.abs() > T::one() {
        return Err(StatsError::Domain(format!("correlation {r} outside [-1, 1]")));
    }
    if r.abs() == T::one() {
        return Ok(T::zero());
    }
    let lim = T::one() - c::<T>(1e-15);
    let r = r.max(-lim).min(lim);
    let d = T::from_usize_lossy(dof);
    let t = r * (d / (T::one() - r * r)).sqrt();
    Ok(student_t_two_sided(t, d))
}

/// Partial-correlation CI test used by causal discovery.
///
/// Dependent conditioning columns are dropped rather than rejected, and the
/// degrees of freedom use the effective rank.
pub fn parcorr_test<T: Scalar>(x: &[T], y: &[T], z: &[&[T]]) -> Result<CiTestResult<T>> {
    let n = check_lengths(x, y, z.len())?;
    let proj = Projector::new(z, n, false)?;
    let k = proj.rank();
    let r = residual_correlation(x, y, &proj)?;
    let pvalue = parcorr_pvalue(r, n, k)?;
    Ok(CiTestResult {
        statistic: r,
        pvalue,
        dof: n - 2 - k,
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `dof` degrees of freedom.
pub fn student_t_two_sided<T: Scalar>(t: T, dof: T) -> T {
    if t == T::zero() {
        return T::one();
    }
    let x = dof / (dof + t * t);
    reg_incomplete_beta(x, dof * c(0.5), c(0.5))
}

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for positive arguments (Lanczos, g = 7).
pub fn ln_gamma<T: Scalar>(x: T) -> T {
    if x < c(0.5) {
        // Reflection: Γ(x)Γ(1−x) = π / sin(πx)
        let pi = T::PI();
        return (pi / (pi * x).sin()).ln() - ln_gamma(T::one() - x);
    }
    let x = x - T::one();
    let mut a = c::<T>(LANCZOS[0]);
    let t = x + c(7.5);
    for (i, &coef) in LANCZOS.iter().enumerate().skip(1) {
        a += c::<T>(coef) / (x + T::from_usize_lossy(i));
    }
    c::<T>(0.5) * (c::<T>(2.0) * T::PI()).ln() + (x + c(0.5)) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn reg_incomplete_beta<T: Scalar>(x: T, a: T, b: T) -> T {
    if x <= T::zero() {
        return T::zero();
    }
    if x >= T::one() {
        return T::one();
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (T::one() - x).ln();
    let front = ln_front.exp();
    if x < (a + T::one()) / (a + b + c(2.0)) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        T::one() - front * beta_continued_fraction(T::one() - x, b, a) / b
    }
}

fn beta_continued_fraction<T: Scalar>(x: T, a: T, b: T) -> T {
    let tiny = c::<T>(1e-300).max(T::min_positive_value());
    let tol = c::<T>(1e-14).max(T::epsilon() * c(4.0));
    let one = T::one();
    let qab = a + b;
    let qap = a + one;
    let qam = a - one;
    let mut cc = one;
    let mut d = one - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = one / d;
    let mut h = d;
    for m in 1..=10_000usize {
        let mf = T::from_usize_lossy(m);
        let m2 = mf + mf;
        let aa = mf * (b - mf) * x / ((qam + m2) * (a + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        cc = one + aa / cc;
        if cc.abs() < tiny {
            cc = tiny;
        }
        d = one / d;
        h *= d * cc;
        let aa = -(a + mf) * (qab + mf) * x / ((a + m2) * (qap + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        cc = one + aa / cc;
        if cc.abs() < tiny {
            cc = tiny;
        }
        d = one / d;
        let delta = d * cc;
        h *= delta;
        if (delta - one).abs() < tol {
            break;
        }
    }
    h
}

/// Pearson correlation matrix between the rows of `features` (`C × d`).
pub fn corrcoef_matrix<T: Scalar>(features: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    let rows = features.len();
    let d = features.first().map_or(0, Vec::len);
    if d < 2 {
        return Err(StatsError::InsufficientData { n: d, needed: 1 });
    }
    let mut units = Vec::with_capacity(rows);
    for (i, f) in features.iter().enumerate() {
        if f.len() != d {
            return Err(StatsError::LengthMismatch(f.len(), d));
        }
        let (fc, _) = centered(f);
        let norm = dot(&fc, &fc).sqrt();
        let scale = f.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
        if norm <= T::epsilon() * c::<T>(16.0) * (T::one() + scale) * T::from_usize_lossy(d).sqrt() {
            return Err(StatsError::DegenerateSeries(Some(i)));
        }
        units.push(fc.into_iter().map(|v| v / norm).collect::<Vec<T>>());
    }
    let mut out = vec![vec![T::zero(); rows]; rows];
    for i in 0..rows {
        out[i][i] = T::one();
        for j in i + 1..rows {
            let r = dot(&units[i], &units[j]).max(-T::one()).min(T::one());
            out[i][j] = r;
            out[j][i] = r;
        }
    }
    Ok(out)
}
