//! Quadrotor stabilization workbench: Crazyflie 2.x rigid-body simulator,
//! compounded shaping reward, staged initialization curriculum, PPO trainer,
//! evaluation protocol and checkpoint persistence.

pub mod checkpoint;
pub mod config;
pub mod curriculum;
pub mod dynamics;
pub mod env;
pub mod eval;
pub mod exec;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod reward;

pub use exec::Execution;
