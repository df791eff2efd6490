use std::fmt;

use serde::{Deserialize, Serialize};

/// A per-item problem that drops or degrades one item but does not abort the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub stage: String,
    pub subject: String,
    pub message: String,
}

impl Warning {
    pub fn new(stage: &str, subject: impl Into<String>, message: impl Into<String>) -> Self {
        let w = Self {
            stage: stage.to_string(),
            subject: subject.into(),
            message: message.into(),
        };
        tracing::warn!(stage = %w.stage, subject = %w.subject, "{}", w.message);
        w
    }
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.stage, self.subject, self.message)
    }
}
