use serde::{Deserialize, Serialize};

use crate::params::ParamGroup;

/// One observable step of session training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TraceStep {
    ExpandPool { added: usize },
    ExpandClassifier { added: usize },
    Freeze { frozen: Vec<ParamGroup> },
    Query,
    Sort,
    Gather,
    Attach,
    Predict,
    CrossEntropyLoss,
    ClusteringLoss,
    Update,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub session: usize,
    /// Optimisation step within the session; `None` for session setup.
    pub step: Option<usize>,
    pub what: TraceStep,
}
