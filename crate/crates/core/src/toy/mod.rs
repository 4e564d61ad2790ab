//! Synthetic world, linear learner and the end-to-end ladder.

pub mod bench;
pub mod export;
pub mod learner;
pub mod rng;
pub mod world;

pub use bench::{run_benchmark, BenchReport};
pub use learner::{ToyDetector, ToyLearner};
pub use world::{generate_world, Scene, World};
