use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("ill-posed smoothing for predictor `{predictor}`: {detail}")]
    IllPosedSmoothing { predictor: String, detail: String },

    #[error("structural error: {0}")]
    Structure(String),

    #[error("input error: {0}")]
    Input(String),

    #[error(
        "weighted design block for group {group} is rank deficient; \
         increase the smoothing ridge or use fewer basis functions"
    )]
    RankDeficient { group: usize },

    #[error("degenerate response: {0}")]
    Degenerate(String),

    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn at(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 for input problems, 3 for numerical failures,
    /// 4 for non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Domain(_)
            | Error::InvalidBasis(_)
            | Error::Structure(_)
            | Error::Input(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Config(_) => 2,
            Error::IllPosedSmoothing { .. } | Error::RankDeficient { .. } | Error::Degenerate(_) => 3,
            Error::NonConvergence(_) => 4,
        }
    }
}
