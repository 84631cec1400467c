//! Echo-state-network regeneration of chaotic attractors, and the numerics
//! around it: reference integration of the Lorenz and Rössler systems,
//! reservoir training, closed-loop generation, similarity metrics between
//! real and regenerated series, and seeded sampling-interval sweeps.

pub mod dynamics;
pub mod esn;
pub mod experiment;
pub mod metrics;
