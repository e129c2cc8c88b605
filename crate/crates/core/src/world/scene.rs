//! Procedural room generation and surface point sampling.

use crate::error::{Error, Result};
use crate::geometry::{aabb_of, Aabb, SceneCloud};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const NUM_CLASSES: usize = 9;

/// Fixed object palette: name, extent ranges (dx, dy, dz), base color.
pub struct ClassSpec {
    pub name: &'static str,
    pub extent_min: [f64; 3],
    pub extent_max: [f64; 3],
    pub color: [f64; 3],
}

/// class_id 1..=9 indexes this table at id-1; class 0 is background.
pub fn class_palette() -> &'static [ClassSpec; NUM_CLASSES] {
    const PALETTE: [ClassSpec; NUM_CLASSES] = [
        ClassSpec { name: "bed", extent_min: [1.4, 1.9, 0.50], extent_max: [1.8, 2.1, 0.65], color: [0.85, 0.25, 0.25] },
        ClassSpec { name: "chair", extent_min: [0.45, 0.45, 0.80], extent_max: [0.60, 0.60, 1.00], color: [0.25, 0.45, 0.85] },
        ClassSpec { name: "table", extent_min: [0.80, 0.80, 0.70], extent_max: [1.50, 1.00, 0.78], color: [0.55, 0.35, 0.15] },
        ClassSpec { name: "sofa", extent_min: [1.6, 0.80, 0.70], extent_max: [2.1, 1.00, 0.90], color: [0.35, 0.75, 0.35] },
        ClassSpec { name: "cabinet", extent_min: [0.5, 0.40, 1.20], extent_max: [1.1, 0.60, 1.90], color: [0.75, 0.65, 0.20] },
        ClassSpec { name: "desk", extent_min: [1.1, 0.60, 0.73], extent_max: [1.5, 0.80, 0.76], color: [0.50, 0.25, 0.60] },
        ClassSpec { name: "shelf", extent_min: [0.6, 0.25, 1.50], extent_max: [1.0, 0.40, 1.95], color: [0.90, 0.55, 0.15] },
        ClassSpec { name: "toilet", extent_min: [0.40, 0.60, 0.75], extent_max: [0.50, 0.70, 0.85], color: [0.90, 0.90, 0.92] },
        ClassSpec { name: "bathtub", extent_min: [1.5, 0.70, 0.55], extent_max: [1.8, 0.80, 0.60], color: [0.30, 0.80, 0.80] },
    ];
    &PALETTE
}

pub const FLOOR_COLOR: [f64; 3] = [0.42, 0.40, 0.38];
pub const WALL_COLOR: [f64; 3] = [0.75, 0.75, 0.72];
pub const WALL_THICKNESS: f64 = 0.05;

pub fn class_name(class_id: u8) -> &'static str {
    match class_id {
        0 => "floor",
        id => class_palette()[id as usize - 1].name,
    }
}

pub fn class_id_of(name: &str) -> Option<u8> {
    class_palette()
        .iter()
        .position(|c| c.name == name)
        .map(|i| i as u8 + 1)
}

#[derive(Clone, Debug)]
pub struct ObjectInstance {
    /// 1-based; 0 is the background.
    pub instance_id: u32,
    pub class_id: u8,
    pub aabb: Aabb,
    pub color: [f64; 3],
}

/// Background surface kind, used for teacher prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Floor,
    Wall,
}

#[derive(Clone, Debug)]
pub struct SceneSpec {
    /// Interior volume: z = 0 floor plane up to the wall height.
    pub room: Aabb,
    pub objects: Vec<ObjectInstance>,
}

impl SceneSpec {
    /// Thin background slabs: the floor and four walls.
    pub fn background_boxes(&self) -> Vec<(Aabb, Surface)> {
        let r = &self.room;
        let t = WALL_THICKNESS;
        vec![
            (
                Aabb { min: [r.min[0] - t, r.min[1] - t, -t], max: [r.max[0] + t, r.max[1] + t, 0.0] },
                Surface::Floor,
            ),
            (
                Aabb { min: [r.min[0] - t, r.min[1] - t, 0.0], max: [r.min[0], r.max[1] + t, r.max[2]] },
                Surface::Wall,
            ),
            (
                Aabb { min: [r.max[0], r.min[1] - t, 0.0], max: [r.max[0] + t, r.max[1] + t, r.max[2]] },
                Surface::Wall,
            ),
            (
                Aabb { min: [r.min[0], r.min[1] - t, 0.0], max: [r.max[0], r.min[1], r.max[2]] },
                Surface::Wall,
            ),
            (
                Aabb { min: [r.min[0], r.max[1], 0.0], max: [r.max[0], r.max[1] + t, r.max[2]] },
                Surface::Wall,
            ),
        ]
    }

    pub fn object(&self, instance_id: u32) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.instance_id == instance_id)
    }

    /// Instances of a class, in id order.
    pub fn instances_of(&self, class_id: u8) -> Vec<&ObjectInstance> {
        self.objects.iter().filter(|o| o.class_id == class_id).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SceneGenConfig {
    pub n_points: usize,
    pub room_extent_min: f64,
    pub room_extent_max: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Probability of forcing a duplicated class (relational scenes).
    pub relational_prob: f64,
    /// Fraction of points reserved for floor/walls.
    pub background_frac: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            n_points: 2048,
            room_extent_min: 4.5,
            room_extent_max: 7.0,
            objects_min: 4,
            objects_max: 10,
            relational_prob: 0.6,
            background_frac: 0.35,
        }
    }
}

fn validate_config(cfg: &SceneGenConfig) -> Result<()> {
    if cfg.n_points == 0
        || cfg.objects_min < 2
        || cfg.objects_min > cfg.objects_max
        || cfg.room_extent_min <= 1.0
        || cfg.room_extent_min > cfg.room_extent_max
        || !(0.0..=1.0).contains(&cfg.relational_prob)
        || !(0.05..=0.9).contains(&cfg.background_frac)
    {
        return Err(Error::InvalidArgument("invalid scene generation config".into()));
    }
    Ok(())
}

/// Deterministically generate a room layout and its sampled point cloud.
///
/// The cloud's goal mask defaults to the first object; rebind with
/// [`set_goal`] once the goal instance is chosen.
pub fn generate_scene(seed: u64, cfg: &SceneGenConfig) -> Result<(SceneSpec, SceneCloud)> {
    validate_config(cfg)?;
    let mut rng = crate::rng::stream(seed, "scene", &[]);
    let wx = rng.random_range(cfg.room_extent_min..cfg.room_extent_max);
    let wy = rng.random_range(cfg.room_extent_min..cfg.room_extent_max);
    let height = 2.7;
    let room = Aabb {
        min: [-wx / 2.0, -wy / 2.0, 0.0],
        max: [wx / 2.0, wy / 2.0, height],
    };
    let n_objects = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let palette = class_palette();

    // class choices; relational scenes duplicate one class
    let mut class_ids: Vec<u8> = (0..n_objects)
        .map(|_| rng.random_range(0..NUM_CLASSES) as u8 + 1)
        .collect();
    if rng.random_bool(cfg.relational_prob) && n_objects >= 2 {
        let dup = rng.random_range(0..NUM_CLASSES) as u8 + 1;
        class_ids[0] = dup;
        class_ids[1] = dup;
    }

    // sample extents up front, then grow the room when the furniture
    // footprint would make rejection sampling hopeless
    let mut pending: Vec<(u8, [f64; 3])> = class_ids
        .iter()
        .map(|&class_id| {
            let spec = &palette[class_id as usize - 1];
            let ext = [
                rng.random_range(spec.extent_min[0]..=spec.extent_max[0]),
                rng.random_range(spec.extent_min[1]..=spec.extent_max[1]),
                rng.random_range(spec.extent_min[2]..=spec.extent_max[2]),
            ];
            (class_id, ext)
        })
        .collect();
    pending.sort_by(|a, b| {
        let fa = a.1[0] * a.1[1];
        let fb = b.1[0] * b.1[1];
        fb.partial_cmp(&fa).unwrap()
    });
    let footprint: f64 = pending.iter().map(|(_, e)| (e[0] + 0.4) * (e[1] + 0.4)).sum();
    let needed = 3.0 * footprint;
    let room = if wx * wy < needed {
        let scale = (needed / (wx * wy)).sqrt();
        Aabb {
            min: [-wx * scale / 2.0, -wy * scale / 2.0, 0.0],
            max: [wx * scale / 2.0, wy * scale / 2.0, height],
        }
    } else {
        room
    };

    let mut objects: Vec<ObjectInstance> = Vec::with_capacity(n_objects);
    for (i, &(class_id, ext)) in pending.iter().enumerate() {
        let spec = &palette[class_id as usize - 1];
        let mut placed = false;
        for _attempt in 0..1000 {
            let margin = 0.15;
            let lo = [room.min[0] + margin, room.min[1] + margin];
            let hi = [room.max[0] - margin - ext[0], room.max[1] - margin - ext[1]];
            if hi[0] <= lo[0] || hi[1] <= lo[1] {
                break;
            }
            let x = rng.random_range(lo[0]..hi[0]);
            let y = rng.random_range(lo[1]..hi[1]);
            let aabb = Aabb {
                min: [x, y, 0.0],
                max: [x + ext[0], y + ext[1], ext[2]],
            };
            // a small gap keeps boxes strictly disjoint
            let inflated = aabb.inflate(0.05);
            if objects.iter().any(|o| o.aabb.overlaps(&inflated)) {
                continue;
            }
            let mut jitter = |c: f64| (c + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
            objects.push(ObjectInstance {
                instance_id: i as u32 + 1,
                class_id,
                aabb,
                color: [jitter(spec.color[0]), jitter(spec.color[1]), jitter(spec.color[2])],
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::SceneGeneration {
                seed,
                reason: format!("could not place object {i} after 1000 attempts"),
            });
        }
    }

    let spec = SceneSpec { room, objects };
    let cloud = sample_cloud(&spec, cfg, &mut rng)?;
    Ok((spec, cloud))
}

/// Faces sampled per object: sides and top (scan-like coverage).
fn object_faces(aabb: &Aabb) -> Vec<([f64; 3], [f64; 3], [f64; 3])> {
    // (origin, edge_u, edge_v) per face
    let e = aabb.extents();
    let m = aabb.min;
    vec![
        ([m[0], m[1], m[2] + e[2]], [e[0], 0.0, 0.0], [0.0, e[1], 0.0]), // top
        ([m[0], m[1], m[2]], [e[0], 0.0, 0.0], [0.0, 0.0, e[2]]),        // -y side
        ([m[0], m[1] + e[1], m[2]], [e[0], 0.0, 0.0], [0.0, 0.0, e[2]]), // +y side
        ([m[0], m[1], m[2]], [0.0, e[1], 0.0], [0.0, 0.0, e[2]]),        // -x side
        ([m[0] + e[0], m[1], m[2]], [0.0, e[1], 0.0], [0.0, 0.0, e[2]]), // +x side
    ]
}

fn face_area(f: &([f64; 3], [f64; 3], [f64; 3])) -> f64 {
    let nu = (f.1[0] * f.1[0] + f.1[1] * f.1[1] + f.1[2] * f.1[2]).sqrt();
    let nv = (f.2[0] * f.2[0] + f.2[1] * f.2[1] + f.2[2] * f.2[2]).sqrt();
    nu * nv
}

fn sample_cloud(spec: &SceneSpec, cfg: &SceneGenConfig, rng: &mut ChaCha8Rng) -> Result<SceneCloud> {
    let n = cfg.n_points;
    let n_bg = ((n as f64) * cfg.background_frac).round() as usize;
    let n_obj_total = n - n_bg;

    // area-proportional allocation with a per-object floor of 16 points
    let areas: Vec<f64> = spec
        .objects
        .iter()
        .map(|o| object_faces(&o.aabb).iter().map(face_area).sum())
        .collect();
    let total_area: f64 = areas.iter().sum();
    // guaranteed per-object floor, relaxed when the budget is tiny
    let min_pts = (n_obj_total / spec.objects.len().max(1)).clamp(1, 16);
    let mut alloc: Vec<usize> = areas
        .iter()
        .map(|a| ((a / total_area) * n_obj_total as f64).floor() as usize)
        .map(|c| c.max(min_pts))
        .collect();
    // trim or pad to hit the exact object budget, largest allocations first
    loop {
        let s: usize = alloc.iter().sum();
        if s == n_obj_total {
            break;
        }
        if s > n_obj_total {
            let i = alloc
                .iter()
                .enumerate()
                .max_by_key(|(_, &c)| c)
                .map(|(i, _)| i)
                .unwrap();
            if alloc[i] > min_pts {
                alloc[i] -= 1;
            } else {
                return Err(Error::SceneGeneration {
                    seed: 0,
                    reason: format!("point budget {n} too small for {} objects", spec.objects.len()),
                });
            }
        } else {
            let i = alloc
                .iter()
                .enumerate()
                .min_by_key(|(_, &c)| c)
                .map(|(i, _)| i)
                .unwrap();
            alloc[i] += 1;
        }
    }

    let mut coords = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut instance_id = Vec::with_capacity(n);
    let mut class_id = Vec::with_capacity(n);

    let sample_face = |faces: &[([f64; 3], [f64; 3], [f64; 3])], rng: &mut ChaCha8Rng| {
        let areas: Vec<f64> = faces.iter().map(face_area).collect();
        let total: f64 = areas.iter().sum();
        let mut pick = rng.random_range(0.0..total);
        let mut fi = 0;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                fi = i;
                break;
            }
            pick -= a;
        }
        let (o, u, v) = &faces[fi];
        let (a, b) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        [
            o[0] + a * u[0] + b * v[0],
            o[1] + a * u[1] + b * v[1],
            o[2] + a * u[2] + b * v[2],
        ]
    };

    for (o, &count) in spec.objects.iter().zip(&alloc) {
        let faces = object_faces(&o.aabb);
        for _ in 0..count {
            let p = sample_face(&faces, rng);
            coords.push(p);
            let mut noisy = |c: f64| (c + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
            colors.push([noisy(o.color[0]), noisy(o.color[1]), noisy(o.color[2])]);
            instance_id.push(o.instance_id);
            class_id.push(o.class_id);
        }
    }

    // background: floor top and inner wall faces
    let r = &spec.room;
    let e = [r.max[0] - r.min[0], r.max[1] - r.min[1], r.max[2] - r.min[2]];
    let bg_faces: Vec<(([f64; 3], [f64; 3], [f64; 3]), Surface)> = vec![
        (([r.min[0], r.min[1], 0.0], [e[0], 0.0, 0.0], [0.0, e[1], 0.0]), Surface::Floor),
        (([r.min[0], r.min[1], 0.0], [0.0, e[1], 0.0], [0.0, 0.0, e[2]]), Surface::Wall),
        (([r.max[0], r.min[1], 0.0], [0.0, e[1], 0.0], [0.0, 0.0, e[2]]), Surface::Wall),
        (([r.min[0], r.min[1], 0.0], [e[0], 0.0, 0.0], [0.0, 0.0, e[2]]), Surface::Wall),
        (([r.min[0], r.max[1], 0.0], [e[0], 0.0, 0.0], [0.0, 0.0, e[2]]), Surface::Wall),
    ];
    let bg_areas: Vec<f64> = bg_faces.iter().map(|(f, _)| face_area(f)).collect();
    let bg_total: f64 = bg_areas.iter().sum();
    for _ in 0..n_bg {
        let mut pick = rng.random_range(0.0..bg_total);
        let mut fi = 0;
        for (i, a) in bg_areas.iter().enumerate() {
            if pick < *a {
                fi = i;
                break;
            }
            pick -= a;
        }
        let ((o, u, v), surf) = &bg_faces[fi];
        let (a, b) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let p = [
            o[0] + a * u[0] + b * v[0],
            o[1] + a * u[1] + b * v[1],
            o[2] + a * u[2] + b * v[2],
        ];
        // skip floor points under objects (they belong to hidden geometry)
        if *surf == Surface::Floor
            && spec
                .objects
                .iter()
                .any(|ob| p[0] >= ob.aabb.min[0] && p[0] <= ob.aabb.max[0] && p[1] >= ob.aabb.min[1] && p[1] <= ob.aabb.max[1])
        {
            // resample as a wall point instead of biasing the distribution;
            // a fixed fallback keeps this deterministic and bounded
            let h = rng.random_range(0.0..e[2]);
            let w = rng.random_range(0.0..e[0]);
            coords.push([r.min[0] + w, r.min[1], h]);
            let base = WALL_COLOR;
            let noisy = |c: f64, rng: &mut ChaCha8Rng| (c + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
            colors.push([noisy(base[0], rng), noisy(base[1], rng), noisy(base[2], rng)]);
            instance_id.push(0);
            class_id.push(0);
            continue;
        }
        let base = match surf {
            Surface::Floor => FLOOR_COLOR,
            Surface::Wall => WALL_COLOR,
        };
        let noisy = |c: f64, rng: &mut ChaCha8Rng| (c + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
        colors.push([noisy(base[0], rng), noisy(base[1], rng), noisy(base[2], rng)]);
        coords.push(p);
        instance_id.push(0);
        class_id.push(0);
    }

    let goal_mask: Vec<bool> = instance_id.iter().map(|&i| i == 1).collect();
    let cloud = SceneCloud {
        coords,
        colors,
        instance_id,
        class_id,
        goal_mask,
    };
    cloud.validate()?;
    Ok(cloud)
}

/// Rebind the goal mask to a different instance.
pub fn set_goal(cloud: &mut SceneCloud, instance_id: u32) -> Result<()> {
    if !cloud.instance_id.contains(&instance_id) {
        return Err(Error::InvalidArgument(format!(
            "goal instance {instance_id} has no points"
        )));
    }
    for (m, &id) in cloud.goal_mask.iter_mut().zip(&cloud.instance_id) {
        *m = id == instance_id;
    }
    Ok(())
}

/// Goal AABB from the labelled points of an instance.
pub fn goal_aabb_from_points(cloud: &SceneCloud) -> Result<Aabb> {
    aabb_of(&cloud.goal_points())
}
