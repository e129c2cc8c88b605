//! Synthetic teacher views: orthographic projections, ray-cast instance
//! maps, and per-pixel features in the frozen text-embedding space.

use super::scene::{class_name, SceneSpec, Surface};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{Aabb, TeacherView, TeacherViewSet, ViewProjection};
use crate::text::TextEncoder;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct RenderConfig {
    pub n_views: usize,
    pub image_size: usize,
    /// Std-dev of the Gaussian perturbation on unit-norm teacher features.
    pub sigma_f: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_views: 4,
            image_size: 96,
            sigma_f: 0.01,
        }
    }
}

struct Hittable {
    aabb: Aabb,
    /// 0 for background surfaces.
    instance: i64,
    prompt: &'static str,
}

fn scene_hittables(spec: &SceneSpec) -> Vec<Hittable> {
    let mut out: Vec<Hittable> = spec
        .objects
        .iter()
        .map(|o| Hittable {
            aabb: o.aabb,
            instance: o.instance_id as i64,
            prompt: class_name(o.class_id),
        })
        .collect();
    for (aabb, surf) in spec.background_boxes() {
        out.push(Hittable {
            aabb,
            instance: 0,
            prompt: match surf {
                Surface::Floor => "floor",
                Surface::Wall => "wall",
            },
        });
    }
    out
}

/// Slab-method ray/AABB intersection; returns entry parameter if hit.
fn ray_aabb(origin: &[f64; 3], dir: &[f64; 3], aabb: &Aabb) -> Option<f64> {
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for d in 0..3 {
        if dir[d].abs() < 1e-12 {
            if origin[d] < aabb.min[d] || origin[d] > aabb.max[d] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[d];
        let (mut t0, mut t1) = ((aabb.min[d] - origin[d]) * inv, (aabb.max[d] - origin[d]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        tmin = tmin.max(t0);
        tmax = tmax.min(t1);
        if tmin > tmax {
            return None;
        }
    }
    if tmax < 0.0 {
        None
    } else {
        Some(tmin.max(0.0))
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// View directions: one top-down, then tilted side views at evenly spaced yaws.
fn view_basis(view_index: usize, n_views: usize) -> ([f64; 3], [f64; 3], [f64; 3]) {
    if view_index == 0 {
        // looking straight down; rows map +y, cols map +x
        return ([0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]);
    }
    let sides = (n_views - 1).max(1);
    let yaw = 2.0 * std::f64::consts::PI * (view_index - 1) as f64 / sides as f64;
    let elev = std::f64::consts::FRAC_PI_4;
    let dir = normalize([
        -yaw.cos() * elev.cos(),
        -yaw.sin() * elev.cos(),
        -elev.sin(),
    ]);
    let col = normalize([-yaw.sin(), yaw.cos(), 0.0]);
    let row = normalize(cross(dir, col));
    (dir, row, col)
}

/// Render seeded teacher views of a scene.
pub fn render_views(
    spec: &SceneSpec,
    encoder: &TextEncoder,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<TeacherViewSet> {
    if cfg.n_views == 0 {
        return Err(Error::InvalidArgument("render_views: need at least one view".into()));
    }
    let f = encoder.feature_dim();
    let hw = cfg.image_size;
    let hittables = scene_hittables(spec);
    // prompt embeddings used by every view
    let mut prompts: Vec<(&'static str, Tensor)> = Vec::new();
    for h in &hittables {
        if !prompts.iter().any(|(p, _)| *p == h.prompt) {
            prompts.push((h.prompt, encoder.class_embedding(h.prompt)?));
        }
    }
    let room = &spec.room;
    let corners: Vec<[f64; 3]> = (0..8)
        .map(|i| {
            [
                if i & 1 == 0 { room.min[0] } else { room.max[0] },
                if i & 2 == 0 { room.min[1] } else { room.max[1] },
                if i & 4 == 0 { 0.0 } else { room.max[2] },
            ]
        })
        .collect();

    let mut views = Vec::with_capacity(cfg.n_views);
    for vi in 0..cfg.n_views {
        let (dir, urow, ucol) = view_basis(vi, cfg.n_views);
        // fit the room into the image with a margin
        let project = |p: &[f64; 3], axis: &[f64; 3]| p[0] * axis[0] + p[1] * axis[1] + p[2] * axis[2];
        let (mut rmin, mut rmax, mut cmin, mut cmax) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for c in &corners {
            let r = project(c, &urow);
            let cc = project(c, &ucol);
            rmin = rmin.min(r);
            rmax = rmax.max(r);
            cmin = cmin.min(cc);
            cmax = cmax.max(cc);
        }
        let margin = 3.0;
        let s = ((hw as f64 - 2.0 * margin) / (rmax - rmin))
            .min((hw as f64 - 2.0 * margin) / (cmax - cmin));
        let offset = [margin - s * rmin, margin - s * cmin];
        let projection = ViewProjection {
            matrix: [
                [s * urow[0], s * ucol[0]],
                [s * urow[1], s * ucol[1]],
                [s * urow[2], s * ucol[2]],
            ],
            pixel_offset: offset,
            image_size: (hw, hw),
        };

        // ray-cast the instance map: one ray per pixel, from far outside
        let mut instance_map = vec![-1i64; hw * hw];
        let mut prompt_map: Vec<Option<&'static str>> = vec![None; hw * hw];
        let far = 50.0;
        for r in 0..hw {
            for c in 0..hw {
                // world point on the projection plane for this pixel
                let pr = (r as f64 - offset[0]) / s;
                let pc = (c as f64 - offset[1]) / s;
                let origin = [
                    pr * urow[0] + pc * ucol[0] - far * dir[0],
                    pr * urow[1] + pc * ucol[1] - far * dir[1],
                    pr * urow[2] + pc * ucol[2] - far * dir[2],
                ];
                let mut best_t = f64::INFINITY;
                let mut best: Option<&Hittable> = None;
                for h in &hittables {
                    if let Some(t) = ray_aabb(&origin, &dir, &h.aabb) {
                        if t < best_t {
                            best_t = t;
                            best = Some(h);
                        }
                    }
                }
                if let Some(h) = best {
                    instance_map[r * hw + c] = h.instance;
                    prompt_map[r * hw + c] = Some(h.prompt);
                }
            }
        }

        // per-pixel features: class embedding + Gaussian noise, renormalized
        let mut rng = crate::rng::stream(seed, "teacher_view", &[vi as u64]);
        let mut feats = vec![0.0; hw * hw * f];
        for pix in 0..hw * hw {
            if let Some(p) = prompt_map[pix] {
                let emb = &prompts.iter().find(|(name, _)| *name == p).unwrap().1;
                let dst = &mut feats[pix * f..(pix + 1) * f];
                let mut norm2 = 0.0;
                for (d, e) in dst.iter_mut().zip(emb.data()) {
                    *d = e + if cfg.sigma_f > 0.0 {
                        cfg.sigma_f * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    norm2 += *d * *d;
                }
                let inv = 1.0 / norm2.sqrt();
                for d in dst.iter_mut() {
                    *d *= inv;
                }
            }
        }
        views.push(TeacherView {
            projection,
            instance_map,
            features: Tensor::from_raw(feats, vec![hw, hw, f]),
        });
    }
    Ok(TeacherViewSet {
        views,
        feature_dim: f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{template_lexicon, Vocabulary};
    use crate::world::scene::{generate_scene, SceneGenConfig};

    fn encoder(f: usize) -> TextEncoder {
        TextEncoder::frozen(Vocabulary::from_lexicon(&template_lexicon()), f, 42)
    }

    #[test]
    fn clean_features_match_class_embedding() {
        let enc = encoder(32);
        let cfg = SceneGenConfig { n_points: 128, ..Default::default() };
        let (spec, _) = generate_scene(3, &cfg).unwrap();
        let views = render_views(&spec, &enc, &RenderConfig { sigma_f: 0.0, image_size: 48, n_views: 2 }, 7).unwrap();
        let v = &views.views[0]; // top-down
        let hw = 48;
        let mut checked_obj = 0;
        let mut checked_bg = 0;
        for pix in 0..hw * hw {
            let inst = v.instance_map[pix];
            if inst < 0 {
                continue;
            }
            let feat = &v.features.data()[pix * 32..(pix + 1) * 32];
            let names: Vec<&str> = if inst == 0 {
                checked_bg += 1;
                // top-down background: floor interior, wall tops at the rim
                vec!["floor", "wall"]
            } else {
                checked_obj += 1;
                vec![class_name(spec.object(inst as u32).unwrap().class_id)]
            };
            let cos = names
                .iter()
                .map(|n| {
                    let emb = enc.class_embedding(n).unwrap();
                    feat.iter().zip(emb.data()).map(|(a, b)| a * b).sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(cos > 1.0 - 1e-6, "pixel {pix} ({names:?}): cos {cos}");
        }
        assert!(checked_obj > 0 && checked_bg > 0);
    }

    #[test]
    fn noisy_features_stay_close() {
        // sigma_f = 0.01, F = 64: cosine to the true class embedding stays
        // >= 0.95 for at least 99% of pixels (Monte-Carlo over a full view set)
        let enc = encoder(64);
        let cfg = SceneGenConfig { n_points: 128, ..Default::default() };
        let mut total = 0usize;
        let mut good = 0usize;
        for seed in 11..19u64 {
            let (spec, _) = generate_scene(seed, &cfg).unwrap();
            let views = render_views(
                &spec,
                &enc,
                &RenderConfig { sigma_f: 0.01, image_size: 64, n_views: 4 },
                13 + seed,
            )
            .unwrap();
            for v in &views.views {
                for pix in 0..64 * 64 {
                    let inst = v.instance_map[pix];
                    if inst <= 0 {
                        continue; // object pixels only; background prompt varies
                    }
                    let feat = &v.features.data()[pix * 64..(pix + 1) * 64];
                    let name = class_name(spec.object(inst as u32).unwrap().class_id);
                    let emb = enc.class_embedding(name).unwrap();
                    let cos: f64 = feat.iter().zip(emb.data()).map(|(a, b)| a * b).sum();
                    total += 1;
                    if cos >= 0.95 {
                        good += 1;
                    }
                }
            }
        }
        assert!(total > 10_000, "not enough pixels: {total}");
        assert!(
            good as f64 >= 0.99 * total as f64,
            "only {good}/{total} pixels within cosine 0.95"
        );
    }

    #[test]
    fn features_unit_norm_and_side_views_see_walls() {
        let enc = encoder(32);
        let cfg = SceneGenConfig { n_points: 128, ..Default::default() };
        let (spec, _) = generate_scene(5, &cfg).unwrap();
        let views = render_views(&spec, &enc, &RenderConfig { sigma_f: 0.05, image_size: 48, n_views: 4 }, 19).unwrap();
        let wall_emb = enc.class_embedding("wall").unwrap();
        let mut wall_pixels = 0;
        for v in &views.views[1..] {
            for pix in 0..48 * 48 {
                if v.instance_map[pix] < 0 {
                    continue;
                }
                let feat = &v.features.data()[pix * 32..(pix + 1) * 32];
                let norm: f64 = feat.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-9);
                if v.instance_map[pix] == 0 {
                    let cos: f64 = feat.iter().zip(wall_emb.data()).map(|(a, b)| a * b).sum();
                    if cos > 0.8 {
                        wall_pixels += 1;
                    }
                }
            }
        }
        assert!(wall_pixels > 50, "side views should see walls: {wall_pixels}");
    }

    #[test]
    fn zero_views_rejected() {
        let enc = encoder(16);
        let cfg = SceneGenConfig { n_points: 64, ..Default::default() };
        let (spec, _) = generate_scene(1, &cfg).unwrap();
        assert!(render_views(&spec, &enc, &RenderConfig { n_views: 0, ..Default::default() }, 1).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let enc = encoder(16);
        let cfg = SceneGenConfig { n_points: 64, ..Default::default() };
        let (spec, _) = generate_scene(6, &cfg).unwrap();
        let rc = RenderConfig { image_size: 32, ..Default::default() };
        let a = render_views(&spec, &enc, &rc, 5).unwrap();
        let b = render_views(&spec, &enc, &rc, 5).unwrap();
        for (va, vb) in a.views.iter().zip(&b.views) {
            assert_eq!(va.instance_map, vb.instance_map);
            assert_eq!(va.features, vb.features);
        }
    }
}
