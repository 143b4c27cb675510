//! Scientific kernels for multi-model particle simulations.
//!
//! Everything in this crate works in N-body natural units (G = 1). Callers
//! that hold physical quantities convert at their boundary.
//!
//! * [`gravity`] - direct-sum Plummer-softened gravity (the exact kernel)
//! * [`tree`] - Barnes-Hut octree gravity (the fast, approximate kernel)
//! * [`integrator`] - kick-drift-kick leapfrog under a model's self-gravity
//! * [`bridge`] - operator-split coupling of two particle systems
//! * [`stellar`] - table-driven stellar evolution with supernova events
//! * [`plummer`] - seeded Plummer-sphere initial conditions

pub mod bridge;
pub mod exec;
pub mod gravity;
pub mod integrator;
pub mod particles;
pub mod plummer;
pub mod stellar;
pub mod tree;

mod error;

pub use bridge::{bridge_kick, Bridge, BridgeConfig};
pub use error::KernelError;
pub use exec::Exec;
pub use gravity::{Field, Targets};
pub use integrator::{kdk_step, ForceKernel, SelfGravity};
pub use particles::{ParticleSet, Vec3};
pub use stellar::{EvolutionTable, StellarPopulation, SupernovaEvent};
pub use tree::{Octree, TreeConfig};

pub type Result<T> = std::result::Result<T, KernelError>;
