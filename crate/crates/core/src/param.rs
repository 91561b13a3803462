//! Dense parameter vectors.
//!
//! A [`ParamVec`] carries either reward parameters or policy parameters. Its
//! dimension is fixed at construction and every arithmetic operation checks
//! that the result stays finite.

use std::fmt;

use crate::error::{Error, Result};

/// Dense, finite, fixed-dimension real vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVec(Vec<f64>);

impl ParamVec {
    /// Wraps `values`, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("parameter vector must have positive dimension"));
        }
        check_finite(&values, "ParamVec::new")?;
        Ok(ParamVec(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(values.to_vec())
    }

    /// All-zero vector of dimension `dim`.
    ///
    /// Panics if `dim == 0`.
    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "parameter vector must have positive dimension");
        ParamVec(vec![0.0; dim])
    }

    /// Constant vector of dimension `dim`.
    pub fn filled(dim: usize, value: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("parameter vector must have positive dimension"));
        }
        Self::new(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    /// Returns `a * x + y`.
    pub fn axpy(a: f64, x: &ParamVec, y: &ParamVec) -> Result<ParamVec> {
        same_dim(x, y)?;
        let out: Vec<f64> = x.0.iter().zip(&y.0).map(|(xi, yi)| a * xi + yi).collect();
        check_finite(&out, "axpy")?;
        Ok(ParamVec(out))
    }

    pub fn add(&self, other: &ParamVec) -> Result<ParamVec> {
        Self::axpy(1.0, other, self)
    }

    pub fn sub(&self, other: &ParamVec) -> Result<ParamVec> {
        Self::axpy(-1.0, other, self)
    }

    pub fn scaled(&self, a: f64) -> Result<ParamVec> {
        let out: Vec<f64> = self.0.iter().map(|v| a * v).collect();
        check_finite(&out, "scale")?;
        Ok(ParamVec(out))
    }

    pub fn dot(&self, other: &ParamVec) -> Result<f64> {
        same_dim(self, other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    /// Applies `f` coordinate-wise, checking the result stays finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<ParamVec> {
        let out: Vec<f64> = self.0.iter().map(|&v| f(v)).collect();
        check_finite(&out, "map")?;
        Ok(ParamVec(out))
    }

    /// Largest absolute coordinate.
    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl fmt::Display for ParamVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "]")
    }
}

impl AsRef<[f64]> for ParamVec {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// `a * x + y`, entrywise.
pub fn vec_axpy(a: f64, x: &ParamVec, y: &ParamVec) -> Result<ParamVec> {
    ParamVec::axpy(a, x, y)
}

/// Euclidean norm of `x`.
pub fn vec_norm(x: &ParamVec) -> f64 {
    x.norm()
}

fn same_dim(x: &ParamVec, y: &ParamVec) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch { expected: x.dim(), got: y.dim() });
    }
    Ok(())
}

pub(crate) fn check_finite(values: &[f64], context: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVec {
        ParamVec::from_slice(v).unwrap()
    }

    #[test]
    fn axpy_examples() {
        assert_eq!(vec_axpy(0.0, &pv(&[1.0, 2.0]), &pv(&[3.0, 4.0])).unwrap(), pv(&[3.0, 4.0]));
        assert_eq!(vec_axpy(1.0, &pv(&[1.0, 2.0]), &pv(&[0.0, 0.0])).unwrap(), pv(&[1.0, 2.0]));
        assert_eq!(vec_axpy(2.0, &pv(&[1.0, -1.0]), &pv(&[1.0, 1.0])).unwrap(), pv(&[3.0, -1.0]));
    }

    #[test]
    fn axpy_rejects_mismatched_dims() {
        let err = vec_axpy(1.0, &pv(&[1.0]), &pv(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 1, got: 2 }));
    }

    #[test]
    fn norm_examples() {
        assert_eq!(vec_norm(&pv(&[0.0, 0.0, 0.0])), 0.0);
        assert_eq!(vec_norm(&pv(&[3.0, 4.0])), 5.0);
        assert_eq!(vec_norm(&pv(&[1.0, 1.0, 1.0, 1.0])), 2.0);
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(ParamVec::new(vec![f64::NAN]).is_err());
        assert!(ParamVec::new(vec![]).is_err());
        let big = pv(&[f64::MAX]);
        assert!(matches!(vec_axpy(2.0, &big, &big), Err(Error::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn axpy_and_norm_commute_with_permutation(
            (xs, ys, perm) in (1usize..8).prop_flat_map(|d| (
                prop::collection::vec(-100.0f64..100.0, d),
                prop::collection::vec(-100.0f64..100.0, d),
                Just((0..d).collect::<Vec<_>>()).prop_shuffle(),
            )),
            a in -10.0f64..10.0,
        ) {
            let permute = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let out = vec_axpy(a, &pv(&xs), &pv(&ys)).unwrap();
            let out_p = vec_axpy(a, &pv(&permute(&xs)), &pv(&permute(&ys))).unwrap();
            prop_assert_eq!(permute(out.as_slice()), out_p.as_slice().to_vec());
            let n = vec_norm(&pv(&xs));
            let np = vec_norm(&pv(&permute(&xs)));
            prop_assert!((n - np).abs() <= 1e-12 * n.max(1.0));
        }
    }
}
