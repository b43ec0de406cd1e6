//! Continuous-variable quantum diffusion in a truncated Fock basis.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense complex kernels, matrix exponential, Hermitian square root.
//! - [`fock`]: density matrices and kets of one or two qumodes, fidelity, moments,
//!   Wigner function.
//! - [`gates`]: displacement, rotation, squeezing, beamsplitter and Kerr gates
//!   built from truncated generators.
//! - [`diffusion`]: noise schedules and the thermal loss channel, including the
//!   direct jump to any timestep through the cumulative transmissivity.
//! - [`denoiser`]: time embedding and the layered two-qumode circuit that
//!   undoes one diffusion step.
//! - [`trainer`]: losses, gradient estimators, Adam, and the generative and
//!   restoration training loops.
//!
//! Batch work goes through [`par`], which uses rayon when the `parallel`
//! feature is enabled and plain iteration otherwise.

pub mod denoiser;
pub mod diffusion;
pub mod fock;
pub mod gates;
pub mod linalg;
pub mod par;
pub mod trainer;

pub use denoiser::{ThetaVector, TimeEmbedConfig};
pub use diffusion::{Environment, NoiseSchedule};
pub use fock::{CutoffDim, DensityMatrix, Ket, Mode, PhasePoint, Quadrature};
pub use gates::GateMatrix;
pub use par::ExecMode;
pub use trainer::{GradMode, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cutoff dimension must be at least 2, got {0}")]
    InvalidCutoff(usize),
    #[error("cutoff mismatch: {0} vs {1}")]
    CutoffMismatch(usize, usize),
    #[error("Fock level {n} is outside cutoff {cutoff}")]
    OutOfCutoff { n: usize, cutoff: usize },
    #[error("degenerate state: {0}")]
    DegenerateState(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue:.3e})")]
    NotPsd { eigenvalue: f64 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("parameter out of range: {0}")]
    OutOfRange(String),
    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cutoff too small: {0}")]
    CutoffTooSmall(String),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
