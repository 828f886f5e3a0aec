//! Equilibrium sequence modeling for closed-loop household task planning.

pub mod numerics;
pub mod fixedpoint;
pub mod eqgrad;
pub mod homeworld;
pub mod refiner;
pub mod planner;
pub mod memory;
pub mod worldmodel;
pub mod trainer;
pub mod cli;
