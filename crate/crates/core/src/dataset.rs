use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Observation model for the features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Gaussian,
    Multinomial,
}

impl std::str::FromStr for Likelihood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Likelihood::Gaussian),
            "multinomial" | "softmax" => Ok(Likelihood::Multinomial),
            other => Err(Error::Config(format!("unknown likelihood {other:?}"))),
        }
    }
}

/// `N x G` observations with feature names and a likelihood family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMatrix {
    #[serde(with = "crate::nd::serde_arrays::matrix")]
    pub values: Array2<f64>,
    pub feature_names: Vec<String>,
    pub likelihood: Likelihood,
}

impl DatasetMatrix {
    pub fn new(values: Array2<f64>, feature_names: Vec<String>, likelihood: Likelihood) -> Result<Self> {
        if feature_names.len() != values.ncols() {
            return shape_err(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                values.ncols()
            ));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite observation {v}")));
        }
        if likelihood == Likelihood::Multinomial && values.iter().any(|v| *v < 0.0) {
            return Err(Error::Domain("multinomial counts must be nonnegative".into()));
        }
        Ok(Self {
            values: values.as_standard_layout().into_owned(),
            feature_names,
            likelihood,
        })
    }

    /// Dataset with generated feature names `x1..xG`.
    pub fn unnamed(values: Array2<f64>, likelihood: Likelihood) -> Result<Self> {
        let names = (1..=values.ncols()).map(|j| format!("x{j}")).collect();
        Self::new(values, names, likelihood)
    }

    pub fn num_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            values: self.values.select(Axis(0), rows),
            feature_names: self.feature_names.clone(),
            likelihood: self.likelihood,
        }
    }

    /// Unbiased per-column sample variances.
    pub fn column_variances(&self) -> Result<Vec<f64>> {
        let n = self.num_rows();
        if n < 2 {
            return Err(Error::Degenerate(format!("need at least 2 rows, have {n}")));
        }
        Ok(self
            .values
            .axis_iter(Axis(1))
            .map(|c| c.var(1.0))
            .collect())
    }
}
