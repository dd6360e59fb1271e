//! Panel causal-inference toolkit: difference-in-differences, synthetic
//! control and synthetic difference-in-differences as special cases of one
//! weighted average-treatment-effect contrast, with clustered bootstrap
//! inference, a synthetic-data harness, CSV ingestion and report rendering.

pub mod dgp;
pub mod digest;
pub mod estimator;
pub mod inference;
pub mod ingest;
pub mod panel;
pub mod pipeline;
pub mod report;
pub mod weights;

pub use estimator::{estimate, AteEstimate, TrendSeries};
pub use inference::{attach_inference, bootstrap_se, BootstrapOptions, BootstrapResult};
pub use panel::{BlockDesign, Panel};
pub use weights::{Method, SolverOptions, WeightSet};
