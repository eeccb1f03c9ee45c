use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A `(time_steps, hidden_dim)` matrix with at least one step, one feature,
/// and only finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<T>(Array2<T>);

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(data: Array2<T>) -> Result<Self> {
        let (t, d) = data.dim();
        if t == 0 {
            return Err(Error::TooShort { context: "feature sequence", min: 1, got: 0 });
        }
        if d == 0 {
            return Err(Error::Shape { context: "feature sequence", axis: "hidden_dim", expected: 1, got: 0 });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature sequence entry {bad}")));
        }
        Ok(FeatureSequence(data))
    }

    pub fn steps(&self) -> usize {
        self.0.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn data(&self) -> &Array2<T> {
        &self.0
    }

    /// Same sequence at another precision.
    pub fn cast<U: Scalar>(&self) -> FeatureSequence<U> {
        FeatureSequence(self.0.mapv(|v| U::lit(v.as_f64())))
    }

    pub fn into_inner(self) -> Array2<T> {
        self.0
    }
}

impl<T> AsRef<Array2<T>> for FeatureSequence<T> {
    fn as_ref(&self) -> &Array2<T> {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(FeatureSequence::<f64>::new(Array2::zeros((0, 4))).is_err());
        assert!(FeatureSequence::<f64>::new(Array2::zeros((3, 0))).is_err());
        let mut a = Array2::<f64>::zeros((2, 2));
        a[[1, 1]] = f64::NAN;
        assert!(matches!(FeatureSequence::new(a), Err(Error::NonFinite(_))));
        assert_eq!(FeatureSequence::<f32>::new(Array2::zeros((7, 3))).unwrap().steps(), 7);
    }
}
