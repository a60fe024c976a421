//! Parallel grounded search agents at desk scale: turn grammar, a simulated
//! retrieval world, QA synthesis, rollouts with scripted policies,
//! rejection-sampling curation, efficiency-aware rewards and cost-aware
//! evaluation.

pub mod agent;
pub mod curate;
pub mod env;
pub mod eval;
pub mod reward;
pub mod schema;
pub mod seed;
pub mod synth;
pub mod text;
pub mod trajectory;
pub mod world;
