//! The 2-d tabletop simulator: a planar arm in a vertical workspace plane,
//! glyph objects, scripted experts, disturbances and a deterministic
//! rasterizer.

pub mod catalog;
pub mod disturb;
pub mod expert;
pub mod kinematics;
pub mod log;
pub mod render;
pub mod types;
pub mod world;

pub use disturb::{inject_physical_disturbance, inject_visual_distractor, PhysicalMode};
pub use expert::{run_expert, task_success, Rollout, ScriptedExpert};
pub use kinematics::forward_kinematics;
pub use log::{EpisodeLog, LogEvent, StepRecord};
pub use render::{load_png, render, save_png, RenderOut};
pub use types::{
    ArmState, DistractorSprite, Scene, SceneConfig, SceneObject, SimError, SimParams, SpriteKind,
    TaskSpec, Vec2, Verb, ZOrder,
};
pub use world::{make_scene, step};
