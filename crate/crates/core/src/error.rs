use thiserror::Error;

#[derive(Debug, Error)]
pub enum AvError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error in {context}: {message}")]
    Numeric { context: String, message: String },

    #[error("internal consistency violated: {0}")]
    InternalConsistency(String),

    #[error("pipeline stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<AvError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("config error: {0}")]
    Config(String),
}

impl From<serde_json::Error> for AvError {
    fn from(e: serde_json::Error) -> Self {
        AvError::Config(e.to_string())
    }
}

impl AvError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        AvError::InvalidArgument(msg.into())
    }

    pub fn numeric(context: impl Into<String>, message: impl Into<String>) -> Self {
        AvError::Numeric {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        AvError::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, AvError>;
