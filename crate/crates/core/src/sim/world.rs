//! Scene construction and the deterministic step function.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::catalog;
use super::kinematics::forward_kinematics;
use super::log::{EpisodeLog, LogEvent};
use super::types::{Scene, SceneConfig, SceneObject, SimError, SimParams, Vec2};

/// Horizontal band where objects may be placed: reachable by the arm, inside
/// the workspace, and clear of the arm base.
pub fn placement_band(params: &SimParams, size: f64) -> Vec<(f64, f64)> {
    let reach = params.reach() * 0.85;
    let lo = (params.base.x - reach).max(size + 0.3);
    let hi = (params.base.x + reach).min(params.workspace.0 - size - 0.3);
    let base_clear = 1.4;
    vec![
        (lo, params.base.x - base_clear),
        (params.base.x + base_clear, hi),
    ]
}

fn sample_x(rng: &mut ChaCha8Rng, bands: &[(f64, f64)]) -> f64 {
    let total: f64 = bands.iter().map(|(a, b)| (b - a).max(0.0)).sum();
    let mut t = rng.gen_range(0.0..total);
    for &(a, b) in bands {
        let w = (b - a).max(0.0);
        if t < w {
            return a + t;
        }
        t -= w;
    }
    bands.last().map(|&(_, b)| b).unwrap_or(0.0)
}

/// Place the configured objects at seeded random positions on the table.
/// Identical (config, params, seed) triples produce identical scenes.
pub fn make_scene(config: &SceneConfig, params: &SimParams, seed: u64) -> Result<Scene, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(config.objects.len());
    let bands = placement_band(params, config.object_size);
    let min_gap = 2.0 * config.object_size + 0.4;
    const ATTEMPTS: usize = 200;
    for (i, &(shape_id, color_id)) in config.objects.iter().enumerate() {
        if shape_id >= catalog::n_shapes() || color_id >= catalog::n_colors() {
            return Err(SimError::BadCatalogId { shape_id, color_id });
        }
        let mut placed = false;
        for _ in 0..ATTEMPTS {
            let x = sample_x(&mut rng, &bands);
            let candidate = Vec2::new(x, config.object_size);
            if objects.iter().all(|o| (o.position.x - candidate.x).abs() >= min_gap) {
                objects.push(SceneObject {
                    shape_id,
                    color_id,
                    position: candidate,
                    size: config.object_size,
                    held: false,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SimError::OverDense {
                object_index: i,
                attempts: ATTEMPTS,
            });
        }
    }
    Ok(Scene {
        objects,
        arm: params.home_arm(),
        distractors: Vec::new(),
        rng_seed: seed,
    })
}

/// Advance the scene by one control tick toward `command` (length J). The
/// caller-supplied log receives clamp/grasp/release events; pass `step_idx`
/// of the tick being taken (the resulting state belongs to `step_idx + 1`).
pub fn step(
    scene: &mut Scene,
    command: &[f64],
    params: &SimParams,
    log: &mut EpisodeLog,
    step_idx: usize,
) {
    let j = params.dof();
    assert_eq!(command.len(), j, "command has dimension J");
    let nrev = j - 1;
    let prev_aperture = scene.arm.aperture();

    // Clamp to joint limits, then rate-limit toward the clamped command.
    for (i, cmd) in command.iter().enumerate() {
        let (lo, hi) = if i < nrev {
            params.joint_limits[i]
        } else {
            (0.0, 1.0)
        };
        let clamped = cmd.clamp(lo, hi);
        if (clamped - cmd).abs() > 1e-9 {
            log.push_event(LogEvent::Clamp {
                step: step_idx,
                joint: i,
                commanded: *cmd,
                applied: clamped,
            });
        }
        let rate = if i < nrev { params.rate_limit } else { params.grip_rate };
        let delta = (clamped - scene.arm.joints[i]).clamp(-rate, rate);
        scene.arm.joints[i] += delta;
    }

    let tip = params.base + forward_kinematics(&scene.arm);
    let aperture = scene.arm.aperture();

    // Held object tracks the gripper; opening releases it onto the table.
    if let Some(hi) = scene.held_index() {
        if aperture >= params.open_thresh {
            let rest = scene.objects[hi].rest_height();
            scene.objects[hi].held = false;
            scene.objects[hi].position.y = rest;
            log.push_event(LogEvent::Release {
                step: step_idx,
                object: hi,
            });
        } else {
            scene.objects[hi].position = tip;
        }
    } else if aperture <= params.close_thresh && prev_aperture > params.close_thresh {
        // Grasp triggers on the closing edge only, so a gripper swept along
        // the table while closed pushes instead of grabbing.
        let mut best: Option<(usize, f64)> = None;
        for (i, o) in scene.objects.iter().enumerate() {
            let d = o.position.dist(tip);
            if d <= params.grasp_radius && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            scene.objects[i].held = true;
            scene.objects[i].position = tip;
            log.push_event(LogEvent::Grasp {
                step: step_idx,
                object: i,
            });
        }
    }

    // Contact pushing: a closed-enough gripper displaces unheld objects along
    // the contact normal, re-rested onto the table. Objects inside the grasp
    // radius are straddled by the fingers, not shoved.
    if scene.held_index().is_none() && aperture < params.open_thresh {
        for o in scene.objects.iter_mut() {
            let contact = o.size + params.contact_pad;
            let d = o.position.dist(tip);
            if d > params.grasp_radius && d < contact {
                let dir = o.position - tip;
                let n = dir.norm();
                let unit = if n < 1e-9 { Vec2::new(-1.0, 0.0) } else { dir * (1.0 / n) };
                let overlap = contact - d;
                o.position = o.position + unit * overlap;
                o.position.y = o.rest_height();
                o.position.x = o.position.x.clamp(o.size, params.workspace.0 - o.size);
            }
        }
    }

    for d in scene.distractors.iter_mut() {
        d.position = d.position + d.velocity;
    }

    log.record_state(step_idx + 1, scene);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_object_config() -> SceneConfig {
        SceneConfig::new(vec![(0, 0), (3, 2)])
    }

    #[test]
    fn make_scene_is_deterministic() {
        let params = SimParams::default();
        let cfg = two_object_config();
        let a = make_scene(&cfg, &params, 42).unwrap();
        let b = make_scene(&cfg, &params, 42).unwrap();
        assert_eq!(a, b);
        let c = make_scene(&cfg, &params, 43).unwrap();
        assert_ne!(a, c, "different seeds should move objects");
    }

    #[test]
    fn empty_config_gives_empty_table() {
        let params = SimParams::default();
        let cfg = SceneConfig::new(vec![]);
        let scene = make_scene(&cfg, &params, 0).unwrap();
        assert!(scene.objects.is_empty());
    }

    /// Oracle: exhaustive grid packing. Count how many objects fit in the
    /// placement bands at the minimum gap; any request beyond that must fail.
    #[test]
    fn over_dense_scene_is_rejected() {
        let params = SimParams::default();
        let size = 0.8;
        let bands = placement_band(&params, size);
        let min_gap = 2.0 * size + 0.4;
        let capacity: usize = bands
            .iter()
            .map(|&(a, b)| if b > a { ((b - a) / min_gap).floor() as usize + 1 } else { 0 })
            .sum();
        let too_many = capacity + 3;
        let cfg = SceneConfig {
            objects: vec![(0, 0); too_many],
            object_size: size,
        };
        match make_scene(&cfg, &params, 0) {
            Err(SimError::OverDense { .. }) => {}
            other => panic!("expected over-dense error, got {:?}", other.map(|s| s.objects.len())),
        }
    }

    #[test]
    fn holding_command_only_moves_distractors() {
        let params = SimParams::default();
        let cfg = two_object_config();
        let mut scene = make_scene(&cfg, &params, 7).unwrap();
        scene.distractors.push(crate::sim::types::DistractorSprite {
            sprite_id: crate::sim::types::SpriteKind::Blob,
            position: Vec2::new(1.0, 8.0),
            velocity: Vec2::new(0.25, 0.0),
            z_order: crate::sim::types::ZOrder::BehindArm,
        });
        let before = scene.clone();
        let mut log = EpisodeLog::for_scene(&scene);
        let cmd = scene.arm.joints.clone();
        step(&mut scene, &cmd, &params, &mut log, 0);
        assert_eq!(scene.arm, before.arm);
        assert_eq!(scene.objects, before.objects);
        assert!((scene.distractors[0].position.x - 1.25).abs() < 1e-12);
    }

    #[test]
    fn out_of_limit_commands_are_clamped_and_logged() {
        let params = SimParams::default();
        let cfg = two_object_config();
        let mut scene = make_scene(&cfg, &params, 3).unwrap();
        let mut log = EpisodeLog::for_scene(&scene);
        let mut cmd = scene.arm.joints.clone();
        cmd[1] = 9.0;
        step(&mut scene, &cmd, &params, &mut log, 0);
        assert!(
            log.events
                .iter()
                .any(|e| matches!(e, LogEvent::Clamp { joint: 1, .. })),
            "clamp event recorded"
        );
        assert!(scene.arm.joints[1] <= params.joint_limits[1].1 + 1e-12);
    }
}
