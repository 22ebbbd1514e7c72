//! Error classification and exit codes.
//!
//! Validation errors (bad inputs, incompatible artifacts) exit 2 with a
//! structured JSON object on stderr; everything else exits 1.

use aidetect_core::classifier::ClassifierError;
use aidetect_core::corpus::CorpusError;
use aidetect_core::encoding::EncodingError;
use aidetect_core::evaluation::EvalError;
use aidetect_core::reasoning::ReasoningError;
use aidetect_core::training::TrainError;

#[derive(Debug)]
pub enum CliError {
    Validation { kind: String, message: String, ids: Vec<String> },
    Runtime(String),
}

impl CliError {
    pub fn validation(kind: &str, message: impl Into<String>, ids: Vec<String>) -> CliError {
        CliError::Validation { kind: kind.to_string(), message: message.into(), ids }
    }

    pub fn runtime(message: impl Into<String>) -> CliError {
        CliError::Runtime(message.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation { .. } => 2,
            CliError::Runtime(_) => 1,
        }
    }

    /// Prints the error to stderr: JSON for validation, plain for the rest.
    pub fn report(&self) {
        match self {
            CliError::Validation { kind, message, ids } => {
                let body = serde_json::json!({
                    "error": { "kind": kind, "message": message, "ids": ids }
                });
                eprintln!("{body}");
            }
            CliError::Runtime(message) => eprintln!("error: {message}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Runtime(format!("i/o failure: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> CliError {
        CliError::Runtime(format!("serialization failure: {e}"))
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> CliError {
        let message = e.to_string();
        match e {
            CorpusError::Malformed { .. } => CliError::validation("malformed_record", message, vec![]),
            CorpusError::InvalidLabelA { .. } => CliError::validation("invalid_label_a", message, vec![]),
            CorpusError::LabelInconsistency { ids } => {
                CliError::validation("label_inconsistency", message, ids)
            }
            CorpusError::EmptyCorpus => CliError::validation("empty_corpus", message, vec![]),
            CorpusError::UnlabeledDocuments { ids } => {
                CliError::validation("unlabeled_documents", message, ids)
            }
            CorpusError::InvalidSplit(_) => CliError::validation("invalid_split", message, vec![]),
            CorpusError::InvalidDocument { id, .. } => {
                CliError::validation("invalid_document", message, vec![id])
            }
            CorpusError::Io(_) => CliError::Runtime(message),
        }
    }
}

impl From<ReasoningError> for CliError {
    fn from(e: ReasoningError) -> CliError {
        let message = e.to_string();
        match e {
            ReasoningError::CacheCorrupt { .. } => {
                CliError::validation("cache_corrupt", message, vec![])
            }
            ReasoningError::EmptyDocument { doc_id } => {
                CliError::validation("empty_document", message, vec![doc_id])
            }
            _ => CliError::Runtime(message),
        }
    }
}

impl From<EncodingError> for CliError {
    fn from(e: EncodingError) -> CliError {
        let message = e.to_string();
        match e {
            EncodingError::InvalidConfig(_) => {
                CliError::validation("invalid_encoder_config", message, vec![])
            }
            EncodingError::Checkpoint { .. } => {
                CliError::validation("encoder_checkpoint", message, vec![])
            }
            _ => CliError::Runtime(message),
        }
    }
}

impl From<ClassifierError> for CliError {
    fn from(e: ClassifierError) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> CliError {
        let message = e.to_string();
        match e {
            EvalError::UnmatchedPredictions { ids } => {
                CliError::validation("unmatched_predictions", message, ids)
            }
            EvalError::DuplicatePredictions { ids } => {
                CliError::validation("duplicate_predictions", message, ids)
            }
            EvalError::InconsistentPredictions { ids } => {
                CliError::validation("inconsistent_predictions", message, ids)
            }
            EvalError::EmptyReports => CliError::validation("empty_reports", message, vec![]),
            EvalError::MalformedRecord { .. } => {
                CliError::validation("malformed_prediction", message, vec![])
            }
            EvalError::Io(_) => CliError::Runtime(message),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        let message = e.to_string();
        match e {
            TrainError::InvalidConfig(_) => {
                CliError::validation("invalid_train_config", message, vec![])
            }
            TrainError::MissingReasonings { ids } => {
                CliError::validation("missing_reasonings", message, ids)
            }
            TrainError::UnlabeledTrainDocuments { ids } => {
                CliError::validation("unlabeled_documents", message, ids)
            }
            TrainError::IncompatibleCheckpoint { .. } => {
                CliError::validation("incompatible_checkpoint", message, vec![])
            }
            TrainError::Corpus(inner) => inner.into(),
            TrainError::Classifier(inner) => inner.into(),
            TrainError::Encoding(inner) => inner.into(),
            TrainError::Eval(inner) => inner.into(),
            TrainError::NonFiniteLoss { .. } | TrainError::Locked { .. } => {
                CliError::Runtime(message)
            }
            TrainError::Io { source, .. } => CliError::Runtime(format!("{message}: {source}")),
            TrainError::Json(source) => CliError::Runtime(format!("{message}: {source}")),
        }
    }
}
