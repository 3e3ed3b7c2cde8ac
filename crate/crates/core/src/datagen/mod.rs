//! Datasets: field schemas, synthetic FM location-scale data, CSV ingestion.

mod dataset;
mod ingest;
mod schema;
mod synth;

pub use dataset::Dataset;
pub use ingest::{
    csv_encode, csv_ingest, csv_ingest_reader, BadRowPolicy, FieldKindSpec, FieldSpec,
    IngestReport, Rejection, SchemaConfig,
};
pub use schema::{Covariate, Field, FieldKind, FieldSchema, RawValue};
pub use synth::{
    synth_generate, synth_generate_with, true_conditional_quantile, ConditionalTruth,
    ContinuousLaw, FmLocationScaleParams, FmParamConfig, Noise, SynthOptions,
};
