//! File formats, run configuration, ingestion and reporting.

pub mod config;
pub mod formats;
pub mod ingest;
pub mod report;

pub use config::{ConfigError, RunConfig, SplineSettings, SCHEMA_VERSION};
pub use formats::FormatError;
pub use ingest::{estimate_velocities, ingest, ingest_data, ingest_velocities, problem_excitation, IngestError, Ingested, VelocityBatch};
pub use report::{render_summary, CalibrationReport, ExtrinsicsRecord, GroundTruthRecord, InputSummary};
