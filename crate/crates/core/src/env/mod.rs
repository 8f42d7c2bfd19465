//! Deterministic environments: a tabular gridworld with walls and a
//! continuous point mass.

mod grid;
mod pointmass;
mod tabular;

pub use grid::{build_gridworld, build_gridworld_with, Cell, GridMap, Gridworld, MOVES};
pub use pointmass::{
    build_pointmass, ContinuousEnv, PointMassConfig, RewardSpec, ScriptedPolicy, EXPERT_KD,
    EXPERT_KP, MEDIUM_GAIN, MEDIUM_NOISE, POINTMASS_ID,
};
pub use tabular::{random, TabularMdp, TabularStep};
