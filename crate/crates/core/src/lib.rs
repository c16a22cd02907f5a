pub mod bridge;
pub mod controllers;
pub mod dynamics;
pub mod harness;
pub mod metrics;
pub mod perception;
pub mod reward;
pub mod trajectories;
