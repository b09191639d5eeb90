use lrp_lab::dataio::DataError;
use thiserror::Error;

/// Raised for invalid configuration outside the library's own checks.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

/// Raised when input data cannot be found or indexed.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct DataMissing(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Other = 1,
    Config = 3,
    Data = 4,
    Model = 5,
    Numerical = 6,
}

impl Category {
    pub fn label(self) -> &'static str {
        match self {
            Category::Other => "error",
            Category::Config => "config error",
            Category::Data => "data error",
            Category::Model => "model error",
            Category::Numerical => "numerical error",
        }
    }
}

pub fn categorize(err: &anyhow::Error) -> Category {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<serde_json::Error>() {
            return Category::Config;
        }
        if cause.is::<DataMissing>() || cause.is::<DataError>() {
            return Category::Data;
        }
        if let Some(e) = cause.downcast_ref::<lrp_lab::Error>() {
            use lrp_lab::Error as E;
            return match e {
                E::RuleConfig(_) | E::Ablation(_) | E::Setting(_) | E::UnknownExplainer(_) | E::Json(_) => {
                    Category::Config
                }
                E::Data(_) => Category::Data,
                E::Diverged { .. } => Category::Numerical,
                E::Io { .. } => Category::Other,
                _ => Category::Model,
            };
        }
    }
    Category::Other
}
