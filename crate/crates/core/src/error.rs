use std::path::PathBuf;

/// Errors produced anywhere in the analysis pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("missing column(s) in {file}: {columns}")]
    MissingColumns { file: String, columns: String },
    #[error("ragged trial (subj={subject}, item={item}, trial={trial}): {detail}")]
    RaggedTrial {
        subject: String,
        item: String,
        trial: i64,
        detail: String,
    },
    #[error("time grid inconsistent with rate_hz={rate_hz}: {detail}")]
    TimeGrid { rate_hz: f64, detail: String },
    #[error("time window [{start_ms}, {end_ms}) ms contains no samples")]
    EmptyWindow { start_ms: f64, end_ms: f64 },
    #[error("all {0} trials were rejected")]
    AllRejected(usize),
    #[error("ROI '{0}' has no channels present in the data")]
    EmptyRoi(String),
    #[error("unknown column '{0}'")]
    UnknownColumn(String),
    #[error("formula error: {0}")]
    Formula(String),
    #[error("design matrix is rank deficient (rank {rank} < {cols} columns){context}")]
    RankDeficient {
        rank: usize,
        cols: usize,
        context: String,
    },
    #[error("need more observations than parameters (n={n}, p={p})")]
    TooFewObservations { n: usize, p: usize },
    #[error("models are not nested: {0}")]
    NotNested(String),
    #[error("optimizer did not converge after {evaluations} evaluations (best deviance {})", fit.deviance)]
    NotConverged {
        evaluations: usize,
        fit: Box<crate::lmm::FittedLmm>,
    },
    #[error("internal numerical error: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
