//! Level lines of the Gaussian free field on the upper half plane with one
//! free (Neumann) boundary arc `(-inf, a)` and alternating Dirichlet data
//! `±λ` on `(a, b_1), (b_1, b_2), …, (b_n, inf)`.
//!
//! The crate bundles
//!
//! * [`formula`]: closed forms (termination probability on the free arc, its
//!   Dirichlet limit, the mixed Green function, the boundary harmonic function),
//! * [`sde`]: Euler–Maruyama integration of the driving diffusion together with
//!   every martingale observable attached to it,
//! * [`loewner`]: the forward Loewner flow and slit-map curve tracing,
//! * [`montecarlo`]: deterministic parallel ensembles and statistical checks,
//! * [`dgff`]: a discrete Gaussian free field used as an independent oracle.

pub mod dgff;
pub mod error;
pub mod formula;
pub mod loewner;
pub mod montecarlo;
pub mod rng;
pub mod sde;

pub use error::{Error, Result};
pub use formula::{BoundaryConfig, ParitySplit, Polarity};
pub use loewner::{CurveTrace, DrivingPath};
pub use montecarlo::{CheckReport, McSummary};
pub use num_complex::Complex64;
pub use sde::{DrivingState, Observables, Outcome, OutcomeRecord, StepControl};
