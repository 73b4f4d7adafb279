use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] rtrl_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("report error: {0}")]
    Report(String),
}

impl HarnessError {
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Core(_) => "core",
            HarnessError::Io(_) => "io",
            HarnessError::Json(_) => "json",
            HarnessError::Report(_) => "report",
        }
    }

    /// One-line machine-readable form for stderr.
    pub fn to_json(&self) -> String {
        json!({"error": self.kind(), "message": self.to_string()}).to_string()
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
