//! Fixture formats and synthetic generators.

pub mod format;
pub mod generate;

pub use format::{
    load_graph, load_script, load_truth, parse_graph, parse_script, parse_truth, save_graph,
    save_script, save_truth, write_graph, write_script, write_truth, DatasetError, GroundTruth,
    ParseError,
};
pub use generate::{
    generate_bent_hallway, generate_lost_poses, BentHallwayConfig, Generated, LostPosesConfig,
};
