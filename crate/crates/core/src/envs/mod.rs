//! Deterministic simulators, rendering and dataset persistence.

pub mod balls;
pub mod dataset;
pub mod frame;
pub mod grid;

pub use balls::{balls_init, balls_render, balls_step, BallState, BALL_COLORS};
pub use dataset::{
    default_count, episode_seed, generate_dataset, generate_episode, load_dataset, Dataset, DatasetHeader,
    EnvConfig, EnvKind, Episode, Split, EPISODE_LEN,
};
pub use frame::{Frame, FRAME_BYTES, FRAME_SIDE};
pub use grid::{
    grid_init, grid_render, grid_step, Direction, GridAction, GridState, ObjectSpec, ShapeKind, COLORS, GRID_SIZE,
    PALETTE_SPECS,
};
