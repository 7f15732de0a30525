//! Synthetic scenes and the sequential segmentation MDP built on them.

mod auxiliary;
mod io;
mod scene;
mod state;

pub use auxiliary::{angle_bin, angle_quantization, AuxChannels, ANGLE_BINS, AUX_CHANNELS};
pub use io::{decode_split, encode_split, export_scenes, load_split, save_split, write_pbm, write_pgm};
pub use scene::{
    generate_scene, generate_split, scene_seed, Scene, SceneConfig, ShapeKind, MAX_INSTANCES, MIN_VISIBLE_PIXELS,
};
pub use state::{
    build_state_pyramid, downsample_levels, initial_state, transition, EnvState, SceneContext, StatePyramid,
    STATE_CHANNELS, STATIC_CHANNELS,
};
