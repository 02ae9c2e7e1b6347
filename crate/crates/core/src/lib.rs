//! Position-forest supervision for handwritten math expression recognition.
//!
//! The crate covers the full loop of a small recognition experiment:
//!
//! * [`lexer`] — tokenizing LaTeX math over a closed vocabulary and
//!   normalizing script/fraction arguments into braced groups,
//! * [`forest`] — encoding every token's position in the expression tree as
//!   an `M`/`L`/`R` identifier string and deriving per-step supervision
//!   targets from those identifiers,
//! * [`corpus`] — a seeded grammar sampler, a glyph-plane renderer, and the
//!   TSV/binary interchange formats,
//! * [`model`] — a deterministic `f64` transformer decoder with an
//!   attention-refinement correction, trained by a tape-based autodiff
//!   kernel, plus finite-difference gradient checking,
//! * [`train`] — a minimal Adam loop for overfitting toy corpora,
//! * [`metrics`] — expression-level and token-level recognition metrics.
//!
//! Everything is deterministic: all randomness flows through the splitmix
//! generator in [`rng`], and all reductions run in a fixed order.

pub mod container;
pub mod corpus;
pub mod forest;
pub mod lexer;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod train;
