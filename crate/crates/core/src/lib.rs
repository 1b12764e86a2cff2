//! First-order reward machines: formulae over observation histories, the
//! machine runtime, a minimal-machine learner, a grid-world simulator and a
//! multi-agent tabular learner that exploits the machine structure.
//!
//! With the default `parallel` feature, independent work (search branches,
//! seeds, held-out evaluation) is spread over a rayon pool; without it the
//! same code runs sequentially and produces identical results.

pub mod logic;
pub mod machine;
pub mod learner;
pub mod env;
pub mod rl;

pub mod par;

pub use par::PARALLEL;
