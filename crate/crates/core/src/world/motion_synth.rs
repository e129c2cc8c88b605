//! Procedural goal-directed motion synthesis.
//!
//! Motions are built from a standing gait plus action-specific end poses;
//! final (or first, for stand up) body placement is solved against the
//! capsule-union SDF so ground-truth motions actually touch their goals.

use super::scene::SceneSpec;
use crate::autodiff::Tensor;
use crate::body::{
    body_sdf_value, default_template, ActionId, MotionSeq, SkeletonTemplate, FRAME_PARAMS,
    SHAPE_DIM,
};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, SceneCloud};
use rand::Rng;

/// Contact target for placement searches, well under the 0.05 m oracle bound.
const CONTACT_TARGET: f64 = 0.02;

struct JointIds {
    l_hip: usize,
    r_hip: usize,
    l_knee: usize,
    r_knee: usize,
    l_shoulder: usize,
    r_shoulder: usize,
    spine1: usize,
}

impl JointIds {
    fn resolve(t: &SkeletonTemplate) -> JointIds {
        let f = |n: &str| t.joint_index(n).expect("default template joint");
        JointIds {
            l_hip: f("l_hip"),
            r_hip: f("r_hip"),
            l_knee: f("l_knee"),
            r_knee: f("r_knee"),
            l_shoulder: f("l_shoulder"),
            r_shoulder: f("r_shoulder"),
            spine1: f("spine1"),
        }
    }
}

fn set_joint(frame: &mut [f64], joint: usize, axis: usize, value: f64) {
    frame[9 + 3 * (joint - 1) + axis] = value;
}

/// 6-D encoding of yaw * pitch-about-x.
fn orient6(yaw: f64, pitch_x: f64) -> [f64; 6] {
    let (cy, sy) = (yaw.cos(), yaw.sin());
    let (cp, sp) = (pitch_x.cos(), pitch_x.sin());
    // R = Rz(yaw) . Rx(pitch): columns 1 and 2
    [cy, sy, 0.0, -sy * cp, cy * cp, sp]
}

/// Standing pelvis height: lowest capsule point grazes the floor.
pub fn standing_height(template: &SkeletonTemplate, beta: &[f64]) -> f64 {
    let mut frame = vec![0.0; FRAME_PARAMS];
    frame[3..9].copy_from_slice(&orient6(0.0, 0.0));
    let pose = crate::body::fk_values(template, &frame, beta).expect("neutral FK");
    let mut lowest = f64::INFINITY;
    for (j, joint) in template.joints.iter().enumerate().skip(1) {
        let a = pose.joints[joint.parent.unwrap()];
        let b = pose.joints[j];
        lowest = lowest.min(a[2].min(b[2]) - pose.radii[j - 1]);
    }
    -lowest
}

fn neutral_frame(pos: [f64; 3], yaw: f64) -> Vec<f64> {
    let mut f = vec![0.0; FRAME_PARAMS];
    f[..3].copy_from_slice(&pos);
    f[3..9].copy_from_slice(&orient6(yaw, 0.0));
    f
}

fn apply_gait(frame: &mut [f64], ids: &JointIds, phase: f64, amp: f64) {
    let swing = 0.5 * amp * phase.sin();
    set_joint(frame, ids.l_hip, 0, swing);
    set_joint(frame, ids.r_hip, 0, -swing);
    let bend = |p: f64| -0.7 * amp * (p.sin().max(0.0));
    set_joint(frame, ids.l_knee, 0, bend(phase - 0.6));
    set_joint(frame, ids.r_knee, 0, bend(phase + std::f64::consts::PI - 0.6));
    set_joint(frame, ids.l_shoulder, 0, -0.25 * amp * phase.sin());
    set_joint(frame, ids.r_shoulder, 0, 0.25 * amp * phase.sin());
    set_joint(frame, ids.spine1, 1, 0.04 * amp * (2.0 * phase).sin());
}

/// Blend toward the seated pose; ramp in [0, 1].
fn apply_seat(frame: &mut [f64], ids: &JointIds, ramp: f64) {
    let half_pi = std::f64::consts::FRAC_PI_2;
    set_joint(frame, ids.l_hip, 0, ramp * half_pi);
    set_joint(frame, ids.r_hip, 0, ramp * half_pi);
    set_joint(frame, ids.l_knee, 0, -ramp * half_pi);
    set_joint(frame, ids.r_knee, 0, -ramp * half_pi);
    set_joint(frame, ids.l_shoulder, 0, ramp * 0.25);
    set_joint(frame, ids.r_shoulder, 0, ramp * 0.25);
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

fn yaw_towards(from: [f64; 2], to: [f64; 2]) -> f64 {
    let dx = to[0] - from[0];
    let dy = to[1] - from[1];
    // body forward axis is +y: Rz(yaw).(0,1,0) = (-sin yaw, cos yaw)
    (-dx).atan2(dy)
}

fn lerp_angle(a: f64, b: f64, u: f64) -> f64 {
    let mut d = b - a;
    while d > std::f64::consts::PI {
        d -= 2.0 * std::f64::consts::PI;
    }
    while d < -std::f64::consts::PI {
        d += 2.0 * std::f64::consts::PI;
    }
    a + d * u
}

/// Seeded collision-free standing position, at least `min_goal_dist` from
/// the goal box and clear of every object footprint.
fn find_free_start(
    spec: &SceneSpec,
    goal: &Aabb,
    min_goal_dist: f64,
    seed: u64,
    rng_tag: &str,
) -> Result<[f64; 2]> {
    let mut rng = crate::rng::stream(seed, rng_tag, &[]);
    let margin = 0.35;
    for _ in 0..1000 {
        let x = rng.random_range(spec.room.min[0] + margin..spec.room.max[0] - margin);
        let y = rng.random_range(spec.room.min[1] + margin..spec.room.max[1] - margin);
        let p3 = [x, y, 1.0];
        let clear = spec
            .objects
            .iter()
            .all(|o| !o.aabb.inflate(0.25).contains(&[x, y, o.aabb.center()[2]]));
        if clear && goal.distance(&p3) >= min_goal_dist {
            return Ok([x, y]);
        }
    }
    Err(Error::MotionSynthesis {
        seed,
        reason: "no collision-free start position found".into(),
    })
}

/// Largest-clearance side face of a box: (outward normal, face center xy).
fn approach_face(spec: &SceneSpec, goal: &Aabb) -> ([f64; 2], [f64; 2]) {
    let c = goal.center();
    let candidates = [
        ([1.0, 0.0], [goal.max[0], c[1]]),
        ([-1.0, 0.0], [goal.min[0], c[1]]),
        ([0.0, 1.0], [c[0], goal.max[1]]),
        ([0.0, -1.0], [c[0], goal.min[1]]),
    ];
    let mut best = candidates[0];
    let mut best_clear = f64::NEG_INFINITY;
    for (n, fc) in candidates {
        let probe = [fc[0] + n[0] * 0.6, fc[1] + n[1] * 0.6, 0.9];
        let mut clear = [
            probe[0] - spec.room.min[0],
            spec.room.max[0] - probe[0],
            probe[1] - spec.room.min[1],
            spec.room.max[1] - probe[1],
        ]
        .into_iter()
        .fold(f64::INFINITY, f64::min);
        for o in &spec.objects {
            if (o.aabb.min[0] - goal.min[0]).abs() < 1e-9 && (o.aabb.min[1] - goal.min[1]).abs() < 1e-9 {
                continue; // the goal itself
            }
            clear = clear.min(o.aabb.distance(&probe));
        }
        if clear > best_clear {
            best_clear = clear;
            best = (n, fc);
        }
    }
    best
}

/// Bisect pelvis distance along `-dir` from `anchor` until the standing
/// body's SDF to the goal points hits the contact target.
fn solve_standing_contact(
    template: &SkeletonTemplate,
    beta: &[f64],
    goal_points: &[[f64; 3]],
    anchor: [f64; 2],
    dir: [f64; 2],
    height: f64,
    rho_hi: f64,
) -> [f64; 2] {
    let yaw = yaw_towards([anchor[0] - dir[0], anchor[1] - dir[1]], anchor);
    let sdf_at = |rho: f64| {
        let pos = [anchor[0] - dir[0] * rho, anchor[1] - dir[1] * rho, height];
        let frame = neutral_frame(pos, yaw);
        body_sdf_value(template, &frame, beta, goal_points).expect("sdf")
    };
    let (mut lo, mut hi) = (0.0, rho_hi);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if sdf_at(mid) < CONTACT_TARGET {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let rho = 0.5 * (lo + hi);
    [anchor[0] - dir[0] * rho, anchor[1] - dir[1] * rho]
}

/// Bisect pelvis z above the goal top until a posed frame touches the goal.
fn solve_vertical_contact(
    template: &SkeletonTemplate,
    beta: &[f64],
    goal_points: &[[f64; 3]],
    make_frame: &dyn Fn(f64) -> Vec<f64>,
    z_lo: f64,
    z_hi: f64,
) -> f64 {
    let sdf_at = |z: f64| body_sdf_value(template, &make_frame(z), beta, goal_points).expect("sdf");
    let (mut lo, mut hi) = (z_lo, z_hi);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if sdf_at(mid) < CONTACT_TARGET {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Procedurally synthesize a goal-directed motion, T frames padded.
pub fn synthesize_motion(
    spec: &SceneSpec,
    cloud: &SceneCloud,
    goal_instance: u32,
    action: ActionId,
    beta: &[f64],
    t_frames: usize,
    seed: u64,
) -> Result<MotionSeq> {
    if beta.len() != SHAPE_DIM {
        return Err(Error::InvalidArgument("beta must have 10 entries".into()));
    }
    let template = default_template();
    let ids = JointIds::resolve(template);
    let goal = spec
        .object(goal_instance)
        .ok_or_else(|| Error::InvalidArgument(format!("goal instance {goal_instance}")))?
        .aabb;
    let goal_points = cloud.goal_points();
    if goal_points.is_empty() {
        return Err(Error::MotionSynthesis {
            seed,
            reason: "goal instance has no points".into(),
        });
    }
    let mut rng = crate::rng::stream(seed, "motion_len", &[]);
    let t_min = ((t_frames as f64) * 0.7).ceil() as usize;
    let t_actual = rng.random_range(t_min.max(8)..=t_frames);
    let height = standing_height(template, beta);

    let frames = match action {
        ActionId::Walk => walk_frames(spec, template, &ids, beta, &goal, &goal_points, height, t_actual, seed)?,
        ActionId::Sit => sit_frames(spec, template, &ids, beta, &goal, &goal_points, height, t_actual, seed, false)?,
        ActionId::StandUp => sit_frames(spec, template, &ids, beta, &goal, &goal_points, height, t_actual, seed, true)?,
        ActionId::Lie => lie_frames(spec, template, &ids, beta, &goal, &goal_points, height, t_actual, seed)?,
    };

    let mut params = Vec::with_capacity(t_frames * FRAME_PARAMS);
    for f in &frames {
        params.extend_from_slice(f);
    }
    params.resize(t_frames * FRAME_PARAMS, 0.0);
    let mut valid = vec![true; t_actual];
    valid.resize(t_frames, false);
    MotionSeq::new(
        Tensor::from_raw(params, vec![t_frames, FRAME_PARAMS]),
        valid,
        action,
    )
}

#[allow(clippy::too_many_arguments)]
fn walk_frames(
    spec: &SceneSpec,
    template: &SkeletonTemplate,
    ids: &JointIds,
    beta: &[f64],
    goal: &Aabb,
    goal_points: &[[f64; 3]],
    height: f64,
    t: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let start = find_free_start(spec, goal, 1.2, seed, "walk_start")?;
    let center = goal.center();
    let dir = {
        let d = [center[0] - start[0], center[1] - start[1]];
        let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
        [d[0] / n, d[1] / n]
    };
    let rho_hi = ((center[0] - start[0]).powi(2) + (center[1] - start[1]).powi(2)).sqrt();
    let end = solve_standing_contact(template, beta, goal_points, [center[0], center[1]], dir, height, rho_hi);
    let yaw = yaw_towards(start, end);
    let dist = ((end[0] - start[0]).powi(2) + (end[1] - start[1]).powi(2)).sqrt();
    let cycles = (dist / 0.6).max(1.0);
    let mut frames = Vec::with_capacity(t);
    for i in 0..t {
        let u = i as f64 / (t - 1) as f64;
        let s = smoothstep(u);
        let pos = [
            start[0] + (end[0] - start[0]) * s,
            start[1] + (end[1] - start[1]) * s,
            height,
        ];
        let mut frame = neutral_frame(pos, yaw);
        // gait fades in quickly and out completely by the last frame
        let amp = (u / 0.1).min(1.0) * ((1.0 - u) / 0.15).min(1.0);
        if amp > 0.0 && i + 1 < t {
            apply_gait(&mut frame, ids, 2.0 * std::f64::consts::PI * cycles * s, amp.max(0.0));
        }
        frames.push(frame);
    }
    Ok(frames)
}

#[allow(clippy::too_many_arguments)]
fn sit_frames(
    spec: &SceneSpec,
    template: &SkeletonTemplate,
    ids: &JointIds,
    beta: &[f64],
    goal: &Aabb,
    goal_points: &[[f64; 3]],
    height: f64,
    t: usize,
    seed: u64,
    reversed: bool,
) -> Result<Vec<Vec<f64>>> {
    let (normal, face) = approach_face(spec, goal);
    let stand = [face[0] + normal[0] * 0.35, face[1] + normal[1] * 0.35];
    let start = find_free_start(spec, goal, 1.0, seed, "sit_start")?;
    // seated pelvis: slightly inside the face, z solved for contact
    let seat_xy = [face[0] - normal[0] * 0.12, face[1] - normal[1] * 0.12];
    let seat_yaw = yaw_towards([face[0], face[1]], [face[0] + normal[0], face[1] + normal[1]]);
    let make_seated = |z: f64| {
        let mut f = neutral_frame([seat_xy[0], seat_xy[1], z], seat_yaw);
        apply_seat(&mut f, ids, 1.0);
        f
    };
    let seat_z = solve_vertical_contact(
        template,
        beta,
        goal_points,
        &make_seated,
        goal.max[2] - 0.5,
        goal.max[2] + 0.8,
    );

    let approach_yaw = yaw_towards(start, stand);
    let t_walk = ((t as f64) * 0.55).round() as usize;
    let dist = ((stand[0] - start[0]).powi(2) + (stand[1] - start[1]).powi(2)).sqrt();
    let cycles = (dist / 0.6).max(1.0);
    let mut frames = Vec::with_capacity(t);
    for i in 0..t {
        let frame = if i < t_walk {
            let u = i as f64 / (t_walk.max(2) - 1) as f64;
            let s = smoothstep(u);
            let pos = [
                start[0] + (stand[0] - start[0]) * s,
                start[1] + (stand[1] - start[1]) * s,
                height,
            ];
            let mut f = neutral_frame(pos, approach_yaw);
            let amp = (u / 0.1).min(1.0) * ((1.0 - u) / 0.2).min(1.0);
            if amp > 0.0 {
                apply_gait(&mut f, ids, 2.0 * std::f64::consts::PI * cycles * s, amp);
            }
            f
        } else {
            let u = (i - t_walk) as f64 / ((t - t_walk).max(2) - 1) as f64;
            let s = smoothstep(u);
            let pos = [
                stand[0] + (seat_xy[0] - stand[0]) * s,
                stand[1] + (seat_xy[1] - stand[1]) * s,
                height + (seat_z - height) * s,
            ];
            let mut f = neutral_frame(pos, lerp_angle(approach_yaw, seat_yaw, s));
            apply_seat(&mut f, ids, s);
            f
        };
        frames.push(frame);
    }
    if reversed {
        frames.reverse();
    }
    Ok(frames)
}

#[allow(clippy::too_many_arguments)]
fn lie_frames(
    spec: &SceneSpec,
    template: &SkeletonTemplate,
    ids: &JointIds,
    beta: &[f64],
    goal: &Aabb,
    goal_points: &[[f64; 3]],
    height: f64,
    t: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let (normal, face) = approach_face(spec, goal);
    let stand = [face[0] + normal[0] * 0.35, face[1] + normal[1] * 0.35];
    let start = find_free_start(spec, goal, 1.0, seed, "lie_start")?;
    let center = goal.center();
    // lie along the box's longer horizontal axis
    let ext = goal.extents();
    let long_axis = if ext[0] >= ext[1] { [1.0, 0.0] } else { [0.0, 1.0] };
    let lie_yaw = yaw_towards([center[0], center[1]], [center[0] + long_axis[0], center[1] + long_axis[1]]);
    let half_pi = std::f64::consts::FRAC_PI_2;
    let make_lying = |z: f64| {
        let mut f = neutral_frame([center[0], center[1], z], 0.0);
        f[3..9].copy_from_slice(&orient6(lie_yaw, half_pi));
        f
    };
    let lie_z = solve_vertical_contact(
        template,
        beta,
        goal_points,
        &make_lying,
        goal.max[2] - 0.5,
        goal.max[2] + 0.8,
    );

    let approach_yaw = yaw_towards(start, stand);
    let t_walk = ((t as f64) * 0.5).round() as usize;
    let dist = ((stand[0] - start[0]).powi(2) + (stand[1] - start[1]).powi(2)).sqrt();
    let cycles = (dist / 0.6).max(1.0);
    let mut frames = Vec::with_capacity(t);
    for i in 0..t {
        let frame = if i < t_walk {
            let u = i as f64 / (t_walk.max(2) - 1) as f64;
            let s = smoothstep(u);
            let pos = [
                start[0] + (stand[0] - start[0]) * s,
                start[1] + (stand[1] - start[1]) * s,
                height,
            ];
            let mut f = neutral_frame(pos, approach_yaw);
            let amp = (u / 0.1).min(1.0) * ((1.0 - u) / 0.2).min(1.0);
            if amp > 0.0 {
                apply_gait(&mut f, ids, 2.0 * std::f64::consts::PI * cycles * s, amp);
            }
            f
        } else {
            let u = (i - t_walk) as f64 / ((t - t_walk).max(2) - 1) as f64;
            let s = smoothstep(u);
            let pos = [
                stand[0] + (center[0] - stand[0]) * s,
                stand[1] + (center[1] - stand[1]) * s,
                height + (lie_z - height) * s,
            ];
            let mut f = neutral_frame(pos, 0.0);
            f[3..9].copy_from_slice(&orient6(
                lerp_angle(approach_yaw, lie_yaw, s),
                s * half_pi,
            ));
            let _ = ids;
            f
        };
        frames.push(frame);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scene::{generate_scene, set_goal, SceneGenConfig};
    use rand::Rng;

    fn sample_beta(seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::stream(seed, "beta", &[]);
        (0..SHAPE_DIM).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    fn setup(seed: u64) -> (SceneSpec, SceneCloud, u32) {
        let cfg = SceneGenConfig { n_points: 512, ..Default::default() };
        let (spec, mut cloud) = generate_scene(seed, &cfg).unwrap();
        let goal = spec.objects[spec.objects.len() / 2].instance_id;
        set_goal(&mut cloud, goal).unwrap();
        (spec, cloud, goal)
    }

    #[test]
    fn walk_final_frame_touches_goal() {
        // Eq.-style inner-term oracle on the evaluated frame
        for seed in [0u64, 1, 2, 3, 4] {
            let (spec, cloud, goal) = setup(seed);
            let beta = sample_beta(seed);
            let m = synthesize_motion(&spec, &cloud, goal, ActionId::Walk, &beta, 30, seed).unwrap();
            let t_last = m.valid_len() - 1;
            let d = body_sdf_value(default_template(), m.frame(t_last), &beta, &cloud.goal_points()).unwrap();
            assert!(d < 0.05, "seed {seed}: final-frame sdf {d}");
            // start pose is collision-free: pelvis outside all object boxes
            let p0 = m.frame(0);
            let pelvis = [p0[0], p0[1], p0[2]];
            for o in &spec.objects {
                assert!(!o.aabb.contains(&pelvis), "seed {seed}: start inside object");
            }
        }
    }

    #[test]
    fn sit_and_lie_touch_goal_at_last_frame() {
        for (seed, action) in [(10u64, ActionId::Sit), (11, ActionId::Lie), (12, ActionId::Sit)] {
            let (spec, cloud, goal) = setup(seed);
            let beta = sample_beta(seed);
            let m = synthesize_motion(&spec, &cloud, goal, action, &beta, 30, seed).unwrap();
            let t_last = m.valid_len() - 1;
            let d = body_sdf_value(default_template(), m.frame(t_last), &beta, &cloud.goal_points()).unwrap();
            assert!(d < 0.05, "seed {seed} {action:?}: final-frame sdf {d}");
        }
    }

    #[test]
    fn stand_up_first_frame_touches_goal() {
        for seed in [20u64, 21] {
            let (spec, cloud, goal) = setup(seed);
            let beta = sample_beta(seed);
            let m = synthesize_motion(&spec, &cloud, goal, ActionId::StandUp, &beta, 30, seed).unwrap();
            let d = body_sdf_value(default_template(), m.frame(0), &beta, &cloud.goal_points()).unwrap();
            assert!(d < 0.05, "seed {seed}: first-frame sdf {d}");
            // and the last frame is away from the goal
            let t_last = m.valid_len() - 1;
            let d_last =
                body_sdf_value(default_template(), m.frame(t_last), &beta, &cloud.goal_points()).unwrap();
            assert!(d_last > 0.3, "seed {seed}: stand-up should walk away, sdf {d_last}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let (spec, cloud, goal) = setup(7);
        let beta = sample_beta(7);
        let a = synthesize_motion(&spec, &cloud, goal, ActionId::Walk, &beta, 30, 99).unwrap();
        let b = synthesize_motion(&spec, &cloud, goal, ActionId::Walk, &beta, 30, 99).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.valid, b.valid);
        let c = synthesize_motion(&spec, &cloud, goal, ActionId::Walk, &beta, 30, 100).unwrap();
        assert!(a.params != c.params);
    }

    #[test]
    fn padding_respects_mask_shape() {
        let (spec, cloud, goal) = setup(8);
        let beta = sample_beta(8);
        let m = synthesize_motion(&spec, &cloud, goal, ActionId::Sit, &beta, 30, 5).unwrap();
        assert_eq!(m.frames(), 30);
        let valid = m.valid_len();
        assert!((21..=30).contains(&valid));
        // leading frames valid, trailing padded
        assert!(m.valid[..valid].iter().all(|&v| v));
        assert!(m.valid[valid..].iter().all(|&v| !v));
    }
}
