//! Narrative–market alignment engine.
//!
//! Build a (time × asset × feature) market tensor from hourly bars, extract
//! latent asset factors with CP or Tucker decompositions, compute
//! cross-sectional market statistics, aggregate classifier scores into a
//! claims matrix, and measure how well these spaces align with Procrustes
//! rotation and Tucker's congruence coefficient, backed by permutation
//! inference and robustness checks.
//!
//! ```
//! use tensor_align::align::{align, DimMode};
//! use nalgebra::DMatrix;
//!
//! let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
//! let r = align(&a, &a, DimMode::Pad).unwrap();
//! assert!((r.mean_abs_phi - 1.0).abs() < 1e-12);
//! ```

pub mod align;
pub mod claims;
pub mod decompose;
pub mod describe;
pub mod error;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod rng;
pub mod stats;
pub mod study;
pub mod synthetic;
pub mod tensor;

pub use align::{AlignmentResult, DimMode, Metric};
pub use claims::{ChunkScores, ClaimsMatrix, Taxonomy};
pub use decompose::{CpModel, CpOptions, TuckerModel};
pub use error::{Error, Result};
pub use stats::{StatVector, StatsMatrix};
pub use tensor::{MarketTensor, Mode, Normalization, OhlcvRecord, Tensor3};

// The guide's code blocks run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensor.md")]
    mod tensor {}
    #[doc = include_str!("../../../book/src/decomposition.md")]
    mod decomposition {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
    #[doc = include_str!("../../../book/src/claims.md")]
    mod claims {}
    #[doc = include_str!("../../../book/src/alignment.md")]
    mod alignment {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/study.md")]
    mod study {}
}
