//! Physical and visual disturbances injected into running episodes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::log::{EpisodeLog, LogEvent};
use super::render::sprite_extent;
use super::types::{DistractorSprite, Scene, SimError, SimParams, Vec2};
use super::world::placement_band;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PhysicalMode {
    /// Teleport the target sideways just before the grasp.
    PreGraspShove,
    /// Rip the held object out of the gripper and drop it elsewhere.
    PostGraspStrip,
}

impl PhysicalMode {
    pub fn name(self) -> &'static str {
        match self {
            PhysicalMode::PreGraspShove => "pre_grasp_shove",
            PhysicalMode::PostGraspStrip => "post_grasp_strip",
        }
    }
}

/// Gripper-to-target distance below which the shove precondition holds
/// ("just when the robot was about to pick up").
pub const APPROACH_RADIUS: f64 = 2.2;

fn valid_drop_x(
    scene: &Scene,
    target_idx: usize,
    params: &SimParams,
    candidate: f64,
) -> bool {
    let size = scene.objects[target_idx].size;
    let bands = placement_band(params, size);
    if !bands.iter().any(|&(a, b)| candidate >= a && candidate <= b) {
        return false;
    }
    scene
        .objects
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_idx)
        .all(|(_, o)| (o.position.x - candidate).abs() >= o.size + size + 0.3)
}

/// Apply a physical disturbance to the target object. `band` is the allowed
/// displacement magnitude in units of the object's size (its "radius").
#[allow(clippy::too_many_arguments)]
pub fn inject_physical_disturbance(
    scene: &mut Scene,
    params: &SimParams,
    target_idx: usize,
    mode: PhysicalMode,
    band: (f64, f64),
    gripper_tip: Vec2,
    rng: &mut ChaCha8Rng,
    log: &mut EpisodeLog,
    step_idx: usize,
) -> Result<(), SimError> {
    let obj = &scene.objects[target_idx];
    match mode {
        PhysicalMode::PreGraspShove => {
            if obj.held {
                return Err(SimError::DisturbanceNotApplicable {
                    reason: "target already held".into(),
                });
            }
            if gripper_tip.dist(obj.position) > APPROACH_RADIUS {
                return Err(SimError::DisturbanceNotApplicable {
                    reason: format!(
                        "gripper at distance {:.2} has not begun the approach",
                        gripper_tip.dist(obj.position)
                    ),
                });
            }
        }
        PhysicalMode::PostGraspStrip => {
            if !obj.held {
                return Err(SimError::DisturbanceNotApplicable {
                    reason: "target not held".into(),
                });
            }
        }
    }

    let size = scene.objects[target_idx].size;
    let old = scene.objects[target_idx].position;
    let reference_x = match mode {
        PhysicalMode::PreGraspShove => old.x,
        // A stripped object lands somewhere near the gripper, not near its
        // (held, airborne) position.
        PhysicalMode::PostGraspStrip => gripper_tip.x,
    };
    let mut placed = None;
    for _ in 0..64 {
        let mag = rng.gen_range(band.0..band.1) * size;
        let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let candidate = reference_x + dir * mag;
        if valid_drop_x(scene, target_idx, params, candidate) {
            placed = Some(candidate);
            break;
        }
    }
    let Some(new_x) = placed else {
        return Err(SimError::DisturbanceNotApplicable {
            reason: "no reachable drop position in band".into(),
        });
    };
    let rest = scene.objects[target_idx].rest_height();
    scene.objects[target_idx].held = false;
    scene.objects[target_idx].position = Vec2::new(new_x, rest);
    log.push_event(LogEvent::Disturbance {
        step: step_idx,
        mode: mode.name().to_string(),
        displacement: scene.objects[target_idx].position - old,
    });
    Ok(())
}

/// Append a visual distractor after checking that its whole trajectory stays
/// clear of the target object's centroid.
pub fn inject_visual_distractor(
    scene: &mut Scene,
    sprite: DistractorSprite,
    target_idx: usize,
    horizon: usize,
) -> Result<(), SimError> {
    let target = scene.objects[target_idx].position;
    let margin = 0.35;
    let (w, h) = sprite_extent(sprite.sprite_id);
    for t in 0..=horizon {
        let c = sprite.position + sprite.velocity * t as f64;
        if (c.x - target.x).abs() <= w / 2.0 + margin && (c.y - target.y).abs() <= h / 2.0 + margin
        {
            return Err(SimError::Occlusion { step: t });
        }
    }
    scene.distractors.push(sprite);
    Ok(())
}
