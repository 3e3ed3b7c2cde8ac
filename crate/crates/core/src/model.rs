//! Common interface over fitted quantile-grid models.

use serde::{Deserialize, Serialize};

use crate::datagen::{Covariate, FieldSchema, FmLocationScaleParams};
use crate::deepfm::DeepFmQuantileModel;
use crate::error::{Error, Result};
use crate::quantreg::{LinearQuantileModel, QuantileGrid};

/// A model producing one predicted quantile per grid level.
pub trait QuantileModel: Send + Sync {
    fn schema(&self) -> &FieldSchema;

    fn grid(&self) -> QuantileGrid;

    /// Per-level predictions in grid order, before rearrangement.
    fn predict_raw(&self, row: &[Covariate]) -> Result<Vec<f64>>;

    /// Rearranged (sorted) predictions, optionally restricted to `levels`,
    /// which must lie on the grid.
    fn predict_quantiles(&self, row: &[Covariate], levels: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut q = self.predict_raw(row)?;
        q.sort_by(f64::total_cmp);
        match levels {
            None => Ok(q),
            Some(levels) => {
                let grid = self.grid();
                levels
                    .iter()
                    .map(|&t| {
                        grid.index_of(t).map(|i| q[i]).ok_or_else(|| {
                            Error::Domain(format!(
                                "level {t} is not on the grid with m = {}",
                                grid.m()
                            ))
                        })
                    })
                    .collect()
            }
        }
    }
}

impl QuantileModel for LinearQuantileModel {
    fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    fn grid(&self) -> QuantileGrid {
        self.grid
    }

    fn predict_raw(&self, row: &[Covariate]) -> Result<Vec<f64>> {
        LinearQuantileModel::predict_raw(self, row)
    }
}

impl QuantileModel for DeepFmQuantileModel {
    fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    fn grid(&self) -> QuantileGrid {
        self.grid
    }

    fn predict_raw(&self, row: &[Covariate]) -> Result<Vec<f64>> {
        self.forward(row)
    }
}

impl<M: QuantileModel + ?Sized> QuantileModel for &M {
    fn schema(&self) -> &FieldSchema {
        (**self).schema()
    }

    fn grid(&self) -> QuantileGrid {
        (**self).grid()
    }

    fn predict_raw(&self, row: &[Covariate]) -> Result<Vec<f64>> {
        (**self).predict_raw(row)
    }
}

impl<M: QuantileModel + ?Sized> QuantileModel for std::sync::Arc<M> {
    fn schema(&self) -> &FieldSchema {
        (**self).schema()
    }

    fn grid(&self) -> QuantileGrid {
        (**self).grid()
    }

    fn predict_raw(&self, row: &[Covariate]) -> Result<Vec<f64>> {
        (**self).predict_raw(row)
    }
}

/// Exact conditional quantiles of a synthetic ground-truth model, used as
/// a reference "perfect" model in evaluation.
#[derive(Clone, Debug)]
pub struct OracleModel {
    pub params: FmLocationScaleParams,
    pub schema: FieldSchema,
    pub grid: QuantileGrid,
}

impl QuantileModel for OracleModel {
    fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    fn grid(&self) -> QuantileGrid {
        self.grid
    }

    fn predict_raw(&self, row: &[Covariate]) -> Result<Vec<f64>> {
        let truth = self.params.truth_at(&self.schema, row)?;
        Ok(self
            .grid
            .levels()
            .into_iter()
            .map(|t| truth.quantile(t))
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearQr,
    DeepFm,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::LinearQr => "linear_qr",
            ModelKind::DeepFm => "deep_fm",
        })
    }
}

/// Either fitted model type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum AnyModel {
    LinearQr(LinearQuantileModel),
    DeepFm(DeepFmQuantileModel),
}

impl AnyModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::LinearQr(_) => ModelKind::LinearQr,
            AnyModel::DeepFm(_) => ModelKind::DeepFm,
        }
    }

    fn inner(&self) -> &dyn QuantileModel {
        match self {
            AnyModel::LinearQr(m) => m,
            AnyModel::DeepFm(m) => m,
        }
    }
}

impl From<LinearQuantileModel> for AnyModel {
    fn from(m: LinearQuantileModel) -> Self {
        AnyModel::LinearQr(m)
    }
}

impl From<DeepFmQuantileModel> for AnyModel {
    fn from(m: DeepFmQuantileModel) -> Self {
        AnyModel::DeepFm(m)
    }
}

impl QuantileModel for AnyModel {
    fn schema(&self) -> &FieldSchema {
        self.inner().schema()
    }

    fn grid(&self) -> QuantileGrid {
        self.inner().grid()
    }

    fn predict_raw(&self, row: &[Covariate]) -> Result<Vec<f64>> {
        self.inner().predict_raw(row)
    }
}
