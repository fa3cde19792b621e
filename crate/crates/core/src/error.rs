use thiserror::Error;

/// Errors raised by the boundary-integral toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A shape or domain violates a geometric assumption.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// An argument lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Evaluation point on or at a lattice point of a singular kernel.
    #[error("singularity: {0}")]
    Singularity(String),

    /// Off-boundary evaluation closer to the boundary than the quadrature guard.
    #[error("evaluation point is {distance:.3e} from the boundary, below the accuracy guard {guard:.3e}")]
    NearBoundary { distance: f64, guard: f64 },

    /// A fit or sweep received too few points.
    #[error("fit error: {0}")]
    Fit(String),

    /// The Neumann series stopped contracting.
    #[error("eta above Neumann-series radius: {0}")]
    Divergence(String),

    /// A dense solve failed.
    #[error("solver failure: {message} (condition estimate {condition:.3e})")]
    Solver { message: String, condition: f64 },

    /// Unsupported configuration (anisotropic homogenized solve, 3D BEM, ...).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Invalid user input (malformed shape spec, config key, ...).
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence(_) | Error::Solver { .. } | Error::Singularity(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
