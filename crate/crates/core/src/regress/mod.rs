//! Regression learners shared by the propensity and outcome models.

pub mod forest;
pub mod linear;
pub mod logistic;
pub mod mlp;
pub mod select;

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

pub use forest::{fit_forest, Forest, ForestParams};
pub use linear::{fit_ols, fit_wls, LinearModel};
pub use logistic::{fit_logistic, LogisticModel};
pub use mlp::{fit_mlp, Mlp, MlpConfig};
pub use select::{select_learner, select_learner_with, LearnerSet, SelectOptions, Selection};

/// A trained point predictor.
pub trait Regressor: Send + Sync {
    fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>>;

    /// Predictive mean and, when the model has one, predictive variance.
    fn predict_with_variance(
        &self,
        x: &DMatrix<f64>,
    ) -> Result<(DVector<f64>, Option<DVector<f64>>)> {
        Ok((self.predict(x)?, None))
    }
}

/// Something that turns a training set into a [`Regressor`].
pub trait Learner: Send + Sync {
    fn name(&self) -> String;
    fn fit(&self, x: &DMatrix<f64>, y: &[f64], seed: u64) -> Result<Box<dyn Regressor>>;

    /// Fit with per-row loss weights. Learners without weighted losses refuse.
    fn fit_weighted(&self, x: &DMatrix<f64>, y: &[f64], weights: &[f64], seed: u64) -> Result<Box<dyn Regressor>> {
        let _ = (x, y, weights, seed);
        Err(crate::error::Error::InvalidParameter(format!(
            "learner {} does not accept loss weights",
            self.name()
        )))
    }
}
