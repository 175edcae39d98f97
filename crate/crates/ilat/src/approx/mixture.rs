//! Gaussian mixtures with L2-normalized basis functions.
//!
//! The basis function with precision `B` and center `C` is
//! `phi(x) = amp(B) * exp(-(x-C)' B (x-C) / 2)` where
//! `amp(B) = det(B)^{1/4} * pi^{-d/4}` makes `||phi||_2 = 1` under Lebesgue
//! measure. Inner products between two such functions have a closed form,
//! so mixture L2 norms and distances are exact.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApproxError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("precision matrix must be symmetric positive definite")]
    NotSpd,
    #[error("target values must be finite")]
    NonFiniteTarget,
    #[error("need at least d + 2 = {min} training points (got {got})")]
    TooFewTrainPoints { min: usize, got: usize },
    #[error("malformed mixture file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One weighted, L2-normalized Gaussian basis term.
#[derive(Debug, Clone)]
pub struct GaussianTerm {
    weight: f64,
    precision: DMatrix<f64>,
    center: DVector<f64>,
    amp: f64,
    diagonal: bool,
}

impl GaussianTerm {
    /// Validates that `precision` is symmetric positive definite (Cholesky
    /// must succeed) and precomputes the normalizing amplitude.
    pub fn new(
        weight: f64,
        precision: DMatrix<f64>,
        center: DVector<f64>,
    ) -> Result<Self, ApproxError> {
        let d = center.len();
        if precision.nrows() != d || precision.ncols() != d {
            return Err(ApproxError::DimensionMismatch {
                expected: d,
                got: precision.nrows(),
            });
        }
        let scale = precision.amax();
        for i in 0..d {
            for j in (i + 1)..d {
                if (precision[(i, j)] - precision[(j, i)]).abs() > 1e-12 * scale {
                    return Err(ApproxError::NotSpd);
                }
            }
        }
        let chol = precision.clone().cholesky().ok_or(ApproxError::NotSpd)?;
        // det(B)^{1/4} = prod(diag(L))^{1/2}
        let mut amp = 1.0;
        for i in 0..d {
            amp *= chol.l_dirty()[(i, i)];
        }
        amp = amp.sqrt() * std::f64::consts::PI.powf(-(d as f64) / 4.0);
        let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || precision[(i, j)] == 0.0));
        Ok(Self {
            weight,
            precision,
            center,
            amp,
            diagonal,
        })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    /// Normalizing amplitude `det(B)^{1/4} pi^{-d/4}`.
    pub fn amplitude(&self) -> f64 {
        self.amp
    }

    pub(crate) fn scale_weight(&mut self, factor: f64) {
        self.weight *= factor;
    }

    /// Unweighted, L2-normalized basis value at `x`.
    #[inline]
    pub fn basis(&self, x: &[f64]) -> f64 {
        let d = self.center.len();
        let mut q = 0.0;
        if self.diagonal {
            for i in 0..d {
                let di = x[i] - self.center[i];
                q += self.precision[(i, i)] * di * di;
            }
        } else {
            for i in 0..d {
                let di = x[i] - self.center[i];
                // symmetric: fold the off-diagonal contributions
                q += self.precision[(i, i)] * di * di;
                for j in (i + 1)..d {
                    q += 2.0 * self.precision[(i, j)] * di * (x[j] - self.center[j]);
                }
            }
        }
        self.amp * (-0.5 * q).exp()
    }

    /// Weighted value at `x`.
    #[inline]
    pub fn value(&self, x: &[f64]) -> f64 {
        self.weight * self.basis(x)
    }
}

/// Weighted sum of Gaussian terms sharing one dimension.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    terms: Vec<GaussianTerm>,
}

impl GaussianMixture {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            terms: Vec::new(),
        }
    }

    pub fn from_terms(dim: usize, terms: Vec<GaussianTerm>) -> Result<Self, ApproxError> {
        for t in &terms {
            if t.center.len() != dim {
                return Err(ApproxError::DimensionMismatch {
                    expected: dim,
                    got: t.center.len(),
                });
            }
        }
        Ok(Self { dim, terms })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> &[GaussianTerm] {
        &self.terms
    }

    pub(crate) fn push(&mut self, term: GaussianTerm) {
        debug_assert_eq!(term.center.len(), self.dim);
        self.terms.push(term);
    }

    pub(crate) fn scale_weights(&mut self, factor: f64) {
        for t in &mut self.terms {
            t.scale_weight(factor);
        }
    }

    /// Mixture value at `x`; empty mixtures evaluate to 0 everywhere.
    pub fn eval(&self, x: &[f64]) -> Result<f64, ApproxError> {
        if x.len() != self.dim {
            return Err(ApproxError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.eval_unchecked(x))
    }

    #[inline]
    pub fn eval_unchecked(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.value(x)).sum()
    }

    /// Total coefficient mass `sum_i |a_i|`.
    pub fn coef_mass(&self) -> f64 {
        self.terms.iter().map(|t| t.weight.abs()).sum()
    }

    /// Exact L2 norm over Lebesgue measure, via the closed-form Gram matrix.
    pub fn l2_norm(&self) -> f64 {
        l2_norm_of(self.dim, self.terms.iter())
    }

    /// Exact L2 distance `||self - other||_2`.
    pub fn l2_distance(&self, other: &GaussianMixture) -> Result<f64, ApproxError> {
        if other.dim != self.dim {
            return Err(ApproxError::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let negated: Vec<GaussianTerm> = other
            .terms
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.scale_weight(-1.0);
                t
            })
            .collect();
        Ok(l2_norm_of(self.dim, self.terms.iter().chain(negated.iter())))
    }

    /// Plain-text serialization: a header carrying the dimension and term
    /// count, then one term per line (weight, center, precision row-major).
    pub fn to_text<W: std::io::Write>(&self, mut w: W) -> Result<(), ApproxError> {
        writeln!(w, "d={} terms={}", self.dim, self.terms.len())?;
        for t in &self.terms {
            let mut fields = Vec::with_capacity(1 + self.dim + self.dim * self.dim);
            fields.push(format!("{:?}", t.weight));
            for c in t.center.iter() {
                fields.push(format!("{c:?}"));
            }
            for i in 0..self.dim {
                for j in 0..self.dim {
                    fields.push(format!("{:?}", t.precision[(i, j)]));
                }
            }
            writeln!(w, "{}", fields.join(" "))?;
        }
        Ok(())
    }

    pub fn from_text<R: std::io::BufRead>(r: R) -> Result<Self, ApproxError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| ApproxError::Parse("empty file".into()))??;
        let mut dim = None;
        let mut n_terms = None;
        for tok in header.split_whitespace() {
            if let Some(v) = tok.strip_prefix("d=") {
                dim = v.parse::<usize>().ok();
            } else if let Some(v) = tok.strip_prefix("terms=") {
                n_terms = v.parse::<usize>().ok();
            }
        }
        let (dim, n_terms) = match (dim, n_terms) {
            (Some(d), Some(k)) if d > 0 => (d, k),
            _ => return Err(ApproxError::Parse(format!("bad header: {header}"))),
        };
        let mut terms = Vec::with_capacity(n_terms);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| ApproxError::Parse(s.into())))
                .collect::<Result<_, _>>()?;
            if vals.len() != 1 + dim + dim * dim {
                return Err(ApproxError::Parse(format!(
                    "expected {} fields per term, got {}",
                    1 + dim + dim * dim,
                    vals.len()
                )));
            }
            let weight = vals[0];
            let center = DVector::from_column_slice(&vals[1..1 + dim]);
            let precision = DMatrix::from_row_slice(dim, dim, &vals[1 + dim..]);
            terms.push(GaussianTerm::new(weight, precision, center)?);
        }
        if terms.len() != n_terms {
            return Err(ApproxError::Parse(format!(
                "header says {n_terms} terms, file has {}",
                terms.len()
            )));
        }
        Ok(Self { dim, terms })
    }
}

/// `||sum_i a_i phi_i||_2` from pairwise closed-form inner products.
fn l2_norm_of<'a, I>(dim: usize, terms: I) -> f64
where
    I: Iterator<Item = &'a GaussianTerm> + Clone,
{
    let list: Vec<&GaussianTerm> = terms.collect();
    let mut total = 0.0;
    for (i, ti) in list.iter().enumerate() {
        total += ti.weight * ti.weight; // <phi_i, phi_i> = 1
        for tj in list.iter().skip(i + 1) {
            total += 2.0 * ti.weight * tj.weight * basis_inner_product(dim, ti, tj);
        }
    }
    total.max(0.0).sqrt()
}

/// Closed-form `<phi_i, phi_j>` for normalized Gaussian basis functions:
/// `amp_i amp_j (2 pi)^{d/2} det(B_i + B_j)^{-1/2}
///  exp(-(C_i-C_j)' B_i (B_i+B_j)^{-1} B_j (C_i-C_j) / 2)`.
pub(crate) fn basis_inner_product(dim: usize, a: &GaussianTerm, b: &GaussianTerm) -> f64 {
    let sum = &a.precision + &b.precision;
    let chol = sum
        .cholesky()
        .expect("sum of SPD matrices should be SPD");
    let mut sqrt_det = 1.0;
    for i in 0..dim {
        sqrt_det *= chol.l_dirty()[(i, i)];
    }
    let delta = &a.center - &b.center;
    let bj_delta = &b.precision * &delta;
    let solved = chol.solve(&bj_delta);
    let q = (&a.precision * delta).dot(&solved);
    a.amp * b.amp * (2.0 * std::f64::consts::PI).powf(dim as f64 / 2.0) / sqrt_det
        * (-0.5 * q).exp()
}
