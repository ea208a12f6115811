use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("load error for '{id}': {msg}")]
    Load { id: String, msg: String },

    #[error("parse error in {path}{}: {msg}", fmt_pos(*line, *col))]
    Parse {
        path: PathBuf,
        line: Option<u32>,
        col: Option<u32>,
        msg: String,
    },

    #[error("catalog error: unknown class '{name}'")]
    UnknownClass { name: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("corruption error in {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn fmt_pos(line: Option<u32>, col: Option<u32>) -> String {
    match (line, col) {
        (Some(l), Some(c)) => format!(":{l}:{c}"),
        (Some(l), None) => format!(":{l}"),
        _ => String::new(),
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
