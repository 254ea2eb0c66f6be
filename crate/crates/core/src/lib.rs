pub mod error;
pub mod corpus;
pub mod ndgrad;
pub mod nn;
pub mod encoder;
pub mod allocation;
pub mod asc_head;
pub mod ad_head;
pub mod domain_align;
pub mod model;
pub mod analysis;
pub mod trainer;

pub use analysis::{FeatureKind, Inference, MetricReport, ProbeResult};
pub use corpus::{Domain, Instance, Polarity, Span, Vocabulary};
pub use error::{DifdError, ErrorCategory, Result};
pub use model::{Alignment, ModelConfig, Variant};
pub use ndgrad::{ParamStore, Partition};
pub use trainer::{FitData, FitOutcome, LoadedModel, RunConfig, Trainer};
