//! Operational shell around `qrgmm`: a model registry, an HTTP/JSON API
//! for fitting, sampling and risk-curve scoring, and shared helpers for
//! the `qrgmm` command-line tool.

pub mod api;
pub mod config;
pub mod error;
pub mod jobs;
pub mod metadata;
pub mod registry;

use qrgmm::datagen::Dataset;
use qrgmm::eval::ModelSpec;
use qrgmm::model::AnyModel;
use qrgmm::quantreg::{default_m, QuantileGrid};

pub use api::{router, AppState};
pub use config::ServeConfig;
pub use error::ApiError;
pub use registry::Registry;

/// Fits `spec` on the whole dataset with `m` levels (default `default_m(n)`).
pub fn fit_model(
    data: &Dataset,
    spec: &ModelSpec,
    m: Option<usize>,
    seed: u64,
) -> qrgmm::Result<AnyModel> {
    let grid = QuantileGrid::new(m.unwrap_or_else(|| default_m(data.n())))?;
    spec.fit(data, &grid, seed)
}

/// Kind-specific fit diagnostics as JSON.
pub fn fit_summary(model: &AnyModel) -> serde_json::Value {
    match model {
        AnyModel::LinearQr(m) => serde_json::json!({
            "failed_levels": m.fit_report.failed_levels(),
            "exact_levels": m.fit_report.levels.iter().filter(|l| l.exact).count(),
            "levels": m.fit_report.levels.len(),
            "warnings": m.fit_report.warnings,
        }),
        AnyModel::DeepFm(m) => serde_json::json!({
            "initial_loss": m.train_report.initial_loss,
            "epochs": m.train_report.epoch_losses.len(),
            "best_epoch": m.train_report.best_epoch,
            "final_loss": m.train_report.epoch_losses.last(),
            "best_validation_loss": m
                .train_report
                .validation_losses
                .iter()
                .copied()
                .reduce(f64::min),
        }),
    }
}
