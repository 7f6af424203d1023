use thiserror::Error;

/// Everything that can go wrong across the crate, from malformed input
/// files to constraint violations and diverged training runs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("column {column:?} not found in header")]
    MissingColumn { column: String },

    #[error("no data rows in input")]
    EmptyInput,

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("{0}")]
    InvalidInput(String),

    #[error("empty cell(s): {}", format_cells(cells))]
    EmptyCells { cells: Vec<(usize, usize)> },

    #[error("batch size {batch} is not divisible by the {cells} class-group cells")]
    BatchSize { batch: usize, cells: usize },

    #[error("cell ({class}, {group}) has {count} row(s); need at least 2 to split")]
    CellTooSmall {
        class: usize,
        group: usize,
        count: usize,
    },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("weights are off the constraint set: {0}")]
    Constraint(String),

    #[error("{0}")]
    InvalidParameter(String),

    #[error("grid oracle supports at most 4 groups, got {num_groups}")]
    OracleScope { num_groups: usize },

    #[error("batch has no rows for cell ({class}, {group})")]
    MissingCell { class: usize, group: usize },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("during {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    File {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_cells(cells: &[(usize, usize)]) -> String {
    cells
        .iter()
        .map(|(y, a)| format!("({y}, {a})"))
        .collect::<Vec<_>>()
        .join(", ")
}
