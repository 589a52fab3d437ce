//! Spectral statistics of Hermitian random matrices with dependent entries.
//!
//! The crate is organised around one question: when does the eigenvalue
//! distribution of a Hermitian random matrix still follow the Wigner
//! semicircle law once the entries are allowed to be correlated?  Joint
//! cumulants of the entries are encoded as oriented multigraphs
//! ([`graph`]), analytic cumulant specifications live in [`cumulant`]
//! together with a checker for the degree-balance scaling conditions,
//! ensembles are sampled in [`ensemble`], eigenvalue statistics and the
//! semicircle reference law live in [`spectral`], exact finite-size trace
//! moments in [`oracle`], and the replica flow of the effective potential
//! in [`flow`].  [`experiment`] ties everything into reproducible,
//! file-producing runs used by the CLI.

pub mod cumulant;
pub mod ensemble;
pub mod exact;
pub mod experiment;
pub mod flow;
pub mod graph;
pub mod matrix;
pub mod oracle;
pub mod partitions;
pub mod spectral;

pub use cumulant::{ConditionReport, CumulantSpec, PerturbationTerm};
pub use ensemble::{EnsembleSpec, MetropolisChain};
pub use exact::ComplexRational;
pub use flow::{FlowState, Truncation};
pub use graph::{CanonicalGraphKey, OrientedMultigraph};
pub use matrix::{HermitianEigenSolver, HermitianMatrix, NalgebraEigenSolver};
pub use spectral::{SemicircleLaw, SpectralSample};

#[cfg(test)]
pub(crate) mod testutil;
