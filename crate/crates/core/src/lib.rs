pub mod corpus;
pub mod dataspec;
pub mod dense;
pub mod evaluate;
pub mod generate;
pub mod judge;
pub mod mock;
pub mod pipeline;
pub mod refine;
pub mod retrieval;
pub mod runner;
pub mod sparse;
pub mod transport;

pub use corpus::{Passage, PassageStore};
pub use dataspec::{Dataset, Item};
pub use evaluate::{Metric, MetricReport};
pub use generate::Generator;
pub use pipeline::{Pipeline, PipelineConfig, PipelineTrace, Step, Topology};
pub use retrieval::{RetrievedPassage, Retriever, ScoredPassage};
pub use runner::{ExperimentConfig, RunError};
