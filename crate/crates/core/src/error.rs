use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed maze: {0}")]
    MalformedMaze(String),
    #[error("maze free space is disconnected ({components} components)")]
    DisconnectedMaze { components: usize },
    #[error("maze has no free cells")]
    NoFreeCells,
    #[error("unknown maze fixture `{0}`")]
    UnknownFixture(String),

    #[error("invalid distance spec `{spec}`: {reason}")]
    DistanceSpec { spec: String, reason: String },
    #[error("ensemble needs at least one member")]
    EmptyEnsemble,
    #[error("buffer index ({episode}, {time}) out of range")]
    IndexOutOfRange { episode: usize, time: usize },

    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("vertex {0} already exists")]
    DuplicateVertex(usize),
    #[error("unknown vertex {0}")]
    UnknownVertex(usize),
    #[error("no edge {src} -> {dst}")]
    MissingEdge { src: usize, dst: usize },
    #[error("graph file: {0}")]
    GraphSchema(String),

    #[error("empty graph")]
    EmptyGraph,
    #[error("empty replay buffer")]
    EmptyBuffer,
    #[error("requested {requested} states but the buffer holds {available}")]
    BufferTooSmall { requested: usize, available: usize },

    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedMaze(_) => "malformed_maze",
            Error::DisconnectedMaze { .. } => "disconnected_maze",
            Error::NoFreeCells => "no_free_cells",
            Error::UnknownFixture(_) => "unknown_fixture",
            Error::DistanceSpec { .. } => "distance_spec",
            Error::EmptyEnsemble => "empty_ensemble",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::InvalidParams(_) => "invalid_params",
            Error::DuplicateVertex(_) => "duplicate_vertex",
            Error::UnknownVertex(_) => "unknown_vertex",
            Error::MissingEdge { .. } => "missing_edge",
            Error::GraphSchema(_) => "graph_schema",
            Error::EmptyGraph => "empty_graph",
            Error::EmptyBuffer => "empty_buffer",
            Error::BufferTooSmall { .. } => "buffer_too_small",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
