//! Ground answer set solving by decision–propagation, its differentiable
//! fuzzy relaxation with a learned decision policy, and the random program
//! experiment pipeline.

pub mod autodiff;
pub mod crisp;
pub mod dprop;
pub mod eval;
pub mod fuzzy;
pub mod generators;
pub mod interp;
pub mod policy;
pub mod program;
pub mod seeding;
pub mod tnorm;

pub use interp::Interpretation;
pub use program::{parse_program, serialize_program, GroundProgram, Rule};
pub use tnorm::TNormKind;
