//! Elastic sub-network space over a weight-shared supernet, accuracy
//! predictor and evolutionary search.

mod evolve;
mod extract;
mod pipeline;
mod predictor;
mod space;

pub use evolve::{evolve, SearchConfig, SearchOutcome};
pub use extract::{materialize, subnet_extract, Supernet};
pub use pipeline::{
    adapt_pipeline, collect_pairs, upsampled, AccuracyOracle, AdaptConfig, AdaptReport, PairSet, PhaseCost,
    ValidationOracle,
};
pub use predictor::{kendall_tau, predictor_train, AccuracyPredictor, PredictorConfig, PREDICTOR_HIDDEN};
pub use space::{sample_subnet, BlockChoice, ElasticSpace, StageOptions, SubNetConfig, SPACE_VERSION};
