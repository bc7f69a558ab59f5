//! Lightweight anchor-based face detector built as an auditable artifact:
//! a declarative layer graph with parameter/FLOP accounting, a deterministic
//! reference executor, the anchor/matching/loss machinery, a multi-scale
//! inference pipeline, and detection-quality evaluation protocols.

pub mod anchor;
pub mod eval;
pub mod exec;
pub mod graph;
pub mod loss;
pub mod pipeline;
pub mod selftest;
