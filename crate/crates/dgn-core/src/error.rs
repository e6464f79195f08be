use thiserror::Error;

/// Errors produced by mesh I/O, geometry, and optimization routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("face {face} references vertex {index}, but mesh has {count} vertices")]
    FaceIndexOutOfRange {
        face: usize,
        index: usize,
        count: usize,
    },
    #[error("vertex {0} is not referenced by any face")]
    UnreferencedVertex(usize),
    #[error("skeleton not a tree (joint {0})")]
    SkeletonNotTree(usize),
    #[error("joint {joint}: bone frame rotation is not orthonormal with det +1")]
    BadBoneFrame { joint: usize },
    #[error("joint {joint}: bone frame z-axis is not aligned with the parent direction")]
    BoneFrameAxis { joint: usize },
    #[error("vertex {vertex}: skinning weights not normalizable (total {total:.3e})")]
    WeightsNotNormalizable { vertex: usize, total: f64 },
    #[error("vertex {vertex}: negative skin weight")]
    NegativeWeight { vertex: usize },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("skin weight for vertex {vertex} references part {part}, but rig has {count} parts")]
    PartIndexOutOfRange {
        vertex: usize,
        part: usize,
        count: usize,
    },
    #[error("skin weight table has {weights} entries for {vertices} vertices")]
    WeightCountMismatch { weights: usize, vertices: usize },
    #[error("surface graph is disconnected: vertex {0} unreachable")]
    Disconnected(usize),
    #[error("distance matrix not symmetric (max asymmetry {0:.3e})")]
    NonSymmetricDistance(f64),
    #[error("distance matrix invalid: {0}")]
    BadDistanceMatrix(String),
    #[error("embedding bounding box is degenerate (zero extent)")]
    DegenerateBbox,
    #[error("grid coordinate ({0:.3}, {1:.3}) outside [0, {2}]^2")]
    GridBounds(f64, f64, f64),
    #[error("kernel size {kernel} invalid for grid size {grid}")]
    BadKernel { kernel: usize, grid: usize },
    #[error("feature map dimensions inconsistent")]
    BadMapShape,
    #[error("similarity fit needs at least 3 point pairs, got {0}")]
    TooFewPairs(usize),
    #[error("degenerate point configuration{}", part.map(|p| format!(" (part {p})")).unwrap_or_default())]
    DegenerateFit { part: Option<usize> },
    #[error("singular value gap too small; similarity gradient undefined")]
    DegenerateGradient,
    #[error("expected {expected} transforms, got {got}")]
    TransformCount { expected: usize, got: usize },
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("no frontal vertices facing the camera")]
    NoFrontalVertices,
    #[error("camera intrinsics invalid")]
    DegenerateCamera,
    #[error("extrinsics are not a rigid transform")]
    NonRigidExtrinsics,
    #[error("hole fraction {0} outside [0, 1]")]
    BadHoleFraction(f64),
    #[error("scene needs {needed} views, got {got}")]
    TooFewViews { needed: usize, got: usize },
    #[error("bad magic in binary file (expected {expected})")]
    BadMagic { expected: &'static str },
    #[error("binary file truncated")]
    Truncated,
    #[error("energy non-finite at iteration {0}")]
    NonFiniteEnergy(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("frame id {0:?} missing from {1}")]
    FrameIdMismatch(String, &'static str),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
