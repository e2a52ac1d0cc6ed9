use crate::lattice::LatticePoint;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for key `{key}`")]
    InvalidValue { key: String, value: String },
    #[error("degenerate stencil: bond {index} has length {length:e}")]
    DegenerateStencil { index: usize, length: f64 },
    #[error("singular deformation gradient (det = {0:e})")]
    SingularDeformation(f64),
    #[error("zero bond vector")]
    ZeroBond,
    #[error("unknown site {0}")]
    UnknownSite(usize),
    #[error("stencil leaves the domain at lattice point {0:?}")]
    StencilEscape(LatticePoint),
    #[error("mesh error: {0}")]
    Mesh(String),
    #[error("element {0} lies in the atomistic region and cannot be refined")]
    AtomisticRefinement(usize),
    #[error("constraint system is infeasible (max row residual {0:e})")]
    Infeasible(f64),
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),
    #[error("solver did not converge in {iterations} iterations (gradient norm {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("line search failed at iteration {0}")]
    LineSearch(usize),
    #[error("adaptive step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag, used in error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::UnknownKey(_) => "unknown_key",
            Error::InvalidValue { .. } => "invalid_value",
            Error::DegenerateStencil { .. } => "degenerate_stencil",
            Error::SingularDeformation(_) => "singular_deformation",
            Error::ZeroBond => "zero_bond",
            Error::UnknownSite(_) => "unknown_site",
            Error::StencilEscape(_) => "stencil_escape",
            Error::Mesh(_) => "mesh",
            Error::AtomisticRefinement(_) => "atomistic_refinement",
            Error::Infeasible(_) => "infeasible",
            Error::Unbounded => "unbounded",
            Error::LinearAlgebra(_) => "linear_algebra",
            Error::NotConverged { .. } => "not_converged",
            Error::LineSearch(_) => "line_search",
            Error::Step { source, .. } => source.kind(),
            Error::Io(_) => "io",
        }
    }
}
