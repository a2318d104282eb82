//! Scene state, simulation parameters and error types.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dist(self, other: Vec2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape_id: usize,
    pub color_id: usize,
    /// Center of the glyph in workspace units; x is horizontal, y is height
    /// above the table surface.
    pub position: Vec2,
    /// Half-extent of the glyph in workspace units.
    pub size: f64,
    pub held: bool,
}

impl SceneObject {
    /// Height of the object's center when resting on the table.
    pub fn rest_height(&self) -> f64 {
        self.size
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ArmState {
    /// J values: revolute joint angles in radians followed by the gripper
    /// aperture in [0,1] as the final entry.
    pub joints: Vec<f64>,
    /// J-1 positive link lengths.
    pub link_lengths: Vec<f64>,
}

impl ArmState {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn aperture(&self) -> f64 {
        *self.joints.last().expect("arm has at least one joint")
    }

    pub fn revolute(&self) -> &[f64] {
        &self.joints[..self.joints.len() - 1]
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteKind {
    Hand,
    Gorilla,
    Blob,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZOrder {
    BehindArm,
    InFront,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct DistractorSprite {
    pub sprite_id: SpriteKind,
    pub position: Vec2,
    /// Per-step displacement in workspace units.
    pub velocity: Vec2,
    pub z_order: ZOrder,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub arm: ArmState,
    pub distractors: Vec<DistractorSprite>,
    pub rng_seed: u64,
}

impl Scene {
    pub fn held_index(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.held)
    }
}

/// Fixed physical and rendering parameters of the simulator.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    /// Workspace rectangle (width, height) in units; the table surface is
    /// y = 0 and the camera views the vertical plane straight on.
    pub workspace: (f64, f64),
    /// Arm base position on the table.
    pub base: Vec2,
    pub link_lengths: Vec<f64>,
    /// (lo, hi) per revolute joint.
    pub joint_limits: Vec<(f64, f64)>,
    /// Max revolute change per control step, radians.
    pub rate_limit: f64,
    /// Max gripper aperture change per control step.
    pub grip_rate: f64,
    /// Pick-up success height for the object center.
    pub h_lift: f64,
    /// Push success displacement (leftward).
    pub d_push: f64,
    /// Gripper closes on an object whose center is within this distance.
    pub grasp_radius: f64,
    /// Contact pushing reaches size + this padding.
    pub contact_pad: f64,
    /// Aperture at or below which the gripper counts as closed.
    pub close_thresh: f64,
    /// Aperture at or above which a held object is released.
    pub open_thresh: f64,
    /// Rendered image height and width in pixels.
    pub image_size: usize,
    /// Control rate in Hz (informational; one step = one control tick).
    pub control_hz: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            workspace: (10.0, 10.0),
            base: Vec2::new(5.0, 0.0),
            link_lengths: vec![2.8, 2.2, 1.6],
            joint_limits: vec![(0.0, std::f64::consts::PI), (-2.7, 2.7), (-2.7, 2.7)],
            rate_limit: 0.15,
            grip_rate: 0.25,
            h_lift: 2.0,
            d_push: 2.5,
            grasp_radius: 0.7,
            contact_pad: 0.2,
            close_thresh: 0.35,
            open_thresh: 0.5,
            image_size: 64,
            control_hz: 10.0,
        }
    }
}

impl SimParams {
    pub fn dof(&self) -> usize {
        self.link_lengths.len() + 1
    }

    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    /// Home pose: arm raised, gripper open.
    pub fn home_arm(&self) -> ArmState {
        let mut joints = vec![std::f64::consts::FRAC_PI_2, -0.5, -0.5];
        joints.push(1.0);
        ArmState {
            joints,
            link_lengths: self.link_lengths.clone(),
        }
    }
}

/// Requested scene content: which objects to place.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct SceneConfig {
    /// (shape_id, color_id) per object; the first entry is the conventional
    /// command target slot.
    pub objects: Vec<(usize, usize)>,
    /// Half-extent for every placed object.
    pub object_size: f64,
}

impl SceneConfig {
    pub fn new(objects: Vec<(usize, usize)>) -> Self {
        SceneConfig {
            objects,
            object_size: 0.8,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    PickUp,
    PushLeft,
}

impl Verb {
    pub fn name(self) -> &'static str {
        match self {
            Verb::PickUp => "pick_up",
            Verb::PushLeft => "push_left",
        }
    }

    pub fn parse(s: &str) -> Option<Verb> {
        match s {
            "pick_up" => Some(Verb::PickUp),
            "push_left" => Some(Verb::PushLeft),
            _ => None,
        }
    }
}

/// The semantic content of a command: what to do to which object.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub verb: Verb,
    pub shape_id: usize,
    pub color_id: usize,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scene too dense: failed to place object {object_index} after {attempts} attempts")]
    OverDense {
        object_index: usize,
        attempts: usize,
    },
    #[error("infeasible task: target at distance {distance:.3} outside arm reach {reach:.3}")]
    InfeasibleTask { distance: f64, reach: f64 },
    #[error("infeasible push: start x {start_x:.3} leaves less than {needed:.3} of travel")]
    NoPushRoom { start_x: f64, needed: f64 },
    #[error("disturbance not applicable: {reason}")]
    DisturbanceNotApplicable { reason: String },
    #[error("sprite trajectory occludes the target object's centroid at step {step}")]
    Occlusion { step: usize },
    #[error("catalog id out of range: shape {shape_id} or color {color_id}")]
    BadCatalogId { shape_id: usize, color_id: usize },
}
