//! Dataset assembly: aligned scene-text-motion samples, rigid augmentation,
//! a self-describing binary record format, and a plain-text split manifest.

use super::annotate::{generate_text, Relation, TextAnnotation};
use super::motion_synth::synthesize_motion;
use super::render::RenderConfig;
use super::scene::{generate_scene, set_goal, ObjectInstance, SceneGenConfig, SceneSpec};
use crate::autodiff::Tensor;
use crate::body::{ActionId, MotionSeq, FRAME_PARAMS, SHAPE_DIM};
use crate::error::{Error, Result};
use crate::geometry::{aabb_of, Aabb, SceneCloud};
use crate::io::{read_file, write_file, BinReader, BinWriter};
use crate::text::{template_lexicon, Vocabulary};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

pub const RECORD_MAGIC: &[u8; 4] = b"SMDS";
pub const RECORD_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct DatasetSample {
    pub scene_index: u32,
    pub render_seed: u64,
    pub scene: SceneSpec,
    pub cloud: SceneCloud,
    pub annotation: TextAnnotation,
    pub motion: MotionSeq,
    pub beta: [f64; SHAPE_DIM],
    /// Centroid of the goal points (transforms exactly under augmentation).
    pub goal_center: [f64; 3],
    /// Recomputed from the goal points.
    pub goal_aabb: Aabb,
}

pub fn goal_centroid(cloud: &SceneCloud) -> Result<[f64; 3]> {
    let pts = cloud.goal_points();
    if pts.is_empty() {
        return Err(Error::InvalidArgument("goal has no points".into()));
    }
    let mut c = [0.0; 3];
    for p in &pts {
        for d in 0..3 {
            c[d] += p[d];
        }
    }
    for d in c.iter_mut() {
        *d /= pts.len() as f64;
    }
    Ok(c)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Apply one rigid transform (yaw + planar shift) jointly to the cloud,
/// the motion, and the goal targets. The stored scene spec stays in its
/// original frame; teacher rendering always happens pre-augmentation.
pub fn augment_with(sample: &DatasetSample, yaw: f64, shift: [f64; 2]) -> Result<DatasetSample> {
    let (c, s) = (yaw.cos(), yaw.sin());
    let rot = |p: &[f64; 3]| -> [f64; 3] {
        [
            c * p[0] - s * p[1] + shift[0],
            s * p[0] + c * p[1] + shift[1],
            p[2],
        ]
    };
    let mut cloud = sample.cloud.clone();
    for p in cloud.coords.iter_mut() {
        *p = rot(p);
    }
    let t_frames = sample.motion.frames();
    let mut params = sample.motion.params.data().to_vec();
    for (ti, row) in params.chunks_mut(FRAME_PARAMS).enumerate() {
        if !sample.motion.valid[ti] {
            continue;
        }
        let p = rot(&[row[0], row[1], row[2]]);
        row[..3].copy_from_slice(&p);
        // rotate the raw 6-D columns; Gram-Schmidt commutes with isometries
        for col in 0..2 {
            let (x, y) = (row[3 + 3 * col], row[4 + 3 * col]);
            row[3 + 3 * col] = c * x - s * y;
            row[4 + 3 * col] = s * x + c * y;
        }
    }
    let motion = MotionSeq::new(
        Tensor::from_raw(params, vec![t_frames, FRAME_PARAMS]),
        sample.motion.valid.clone(),
        sample.motion.action,
    )?;
    let goal_center = goal_centroid(&cloud)?;
    let goal_aabb = aabb_of(&cloud.goal_points())?;
    Ok(DatasetSample {
        scene_index: sample.scene_index,
        render_seed: sample.render_seed,
        scene: sample.scene.clone(),
        cloud,
        annotation: sample.annotation.clone(),
        motion,
        beta: sample.beta,
        goal_center,
        goal_aabb,
    })
}

/// Seeded random rigid augmentation.
pub fn augment(sample: &DatasetSample, seed: u64) -> Result<DatasetSample> {
    let mut rng = crate::rng::stream(seed, "augment", &[]);
    let yaw = rng.random_range(0.0..std::f64::consts::TAU);
    let shift = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    augment_with(sample, yaw, shift)
}

// ---------------------------------------------------------------------------
// Record serialization
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub n_points: usize,
    pub t_frames: usize,
    pub feature_dim: usize,
    pub text_len: usize,
    pub sigma_f: f64,
    pub n_views: usize,
    pub image_size: usize,
    /// Seed of the frozen text table defining the teacher feature space.
    pub table_seed: u64,
    pub palette: Vec<String>,
}

pub fn write_record(sample: &DatasetSample, header: &DatasetHeader) -> Vec<u8> {
    let mut w = BinWriter::new();
    w.magic(RECORD_MAGIC);
    w.u32(RECORD_VERSION);
    w.u32(header.n_points as u32);
    w.u32(header.t_frames as u32);
    w.u32(header.feature_dim as u32);
    w.u32(header.text_len as u32);
    w.f64(header.sigma_f);
    w.u32(header.n_views as u32);
    w.u32(header.image_size as u32);
    w.u64(header.table_seed);
    w.u32(header.palette.len() as u32);
    for name in &header.palette {
        w.str(name);
    }
    w.u32(sample.scene_index);
    w.u64(sample.render_seed);
    w.f64s(&sample.beta);
    // goal block
    w.u32(sample.annotation.goal_instance);
    w.u8(sample.annotation.goal_class);
    w.f64s(&sample.goal_center);
    w.f64s(&sample.goal_aabb.min);
    w.f64s(&sample.goal_aabb.max);
    // annotation
    w.u8(sample.annotation.action.index() as u8);
    match sample.annotation.relation {
        None => {
            w.u8(255);
            w.u8(0);
        }
        Some((rel, anchor)) => {
            w.u8(rel.code());
            w.u8(anchor);
        }
    }
    w.u8(sample.annotation.ambiguous as u8);
    w.str(&sample.annotation.text);
    w.u32(sample.annotation.tokens.len() as u32);
    w.u32s(&sample.annotation.tokens);
    // motion
    w.u32(sample.motion.frames() as u32);
    w.f64s(sample.motion.params.data());
    w.bools(&sample.motion.valid);
    // cloud
    let n = sample.cloud.len();
    w.u32(n as u32);
    for p in &sample.cloud.coords {
        w.f64s(p);
    }
    for p in &sample.cloud.colors {
        w.f64s(p);
    }
    w.u32s(&sample.cloud.instance_id);
    for &cid in &sample.cloud.class_id {
        w.u8(cid);
    }
    w.bools(&sample.cloud.goal_mask);
    // scene spec
    w.f64s(&sample.scene.room.min);
    w.f64s(&sample.scene.room.max);
    w.u32(sample.scene.objects.len() as u32);
    for o in &sample.scene.objects {
        w.u32(o.instance_id);
        w.u8(o.class_id);
        w.f64s(&o.color);
        w.f64s(&o.aabb.min);
        w.f64s(&o.aabb.max);
    }
    w.magic(b"DNE!");
    w.bytes()
}

pub fn read_record(bytes: &[u8], what: &str) -> Result<(DatasetSample, DatasetHeader)> {
    let mut r = BinReader::new(bytes, what);
    r.magic(RECORD_MAGIC)?;
    let version = r.u32()?;
    if version != RECORD_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: RECORD_VERSION,
        });
    }
    let n_points = r.u32()? as usize;
    let t_frames = r.u32()? as usize;
    let feature_dim = r.u32()? as usize;
    let text_len = r.u32()? as usize;
    let sigma_f = r.f64()?;
    let n_views = r.u32()? as usize;
    let image_size = r.u32()? as usize;
    let table_seed = r.u64()?;
    let n_palette = r.u32()? as usize;
    let mut palette = Vec::with_capacity(n_palette);
    for _ in 0..n_palette {
        palette.push(r.str()?);
    }
    let header = DatasetHeader {
        n_points,
        t_frames,
        feature_dim,
        text_len,
        sigma_f,
        n_views,
        image_size,
        table_seed,
        palette,
    };
    let scene_index = r.u32()?;
    let render_seed = r.u64()?;
    let beta_v = r.f64s(SHAPE_DIM)?;
    let goal_instance = r.u32()?;
    let goal_class = r.u8()?;
    let center = r.f64s(3)?;
    let amin = r.f64s(3)?;
    let amax = r.f64s(3)?;
    let action = ActionId::from_index(r.u8()? as usize)?;
    let rel_code = r.u8()?;
    let anchor = r.u8()?;
    let relation = if rel_code == 255 {
        None
    } else {
        Some((Relation::from_code(rel_code)?, anchor))
    };
    let ambiguous = r.u8()? != 0;
    let text = r.str()?;
    let n_tokens = r.u32()? as usize;
    let tokens = r.u32s(n_tokens)?;
    let t = r.u32()? as usize;
    let params = r.f64s(t * FRAME_PARAMS)?;
    let valid = r.bools(t)?;
    let n = r.u32()? as usize;
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        let v = r.f64s(3)?;
        coords.push([v[0], v[1], v[2]]);
    }
    let mut colors = Vec::with_capacity(n);
    for _ in 0..n {
        let v = r.f64s(3)?;
        colors.push([v[0], v[1], v[2]]);
    }
    let instance_id = r.u32s(n)?;
    let mut class_id = Vec::with_capacity(n);
    for _ in 0..n {
        class_id.push(r.u8()?);
    }
    let goal_mask = r.bools(n)?;
    let rmin = r.f64s(3)?;
    let rmax = r.f64s(3)?;
    let n_obj = r.u32()? as usize;
    let mut objects = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let instance_id = r.u32()?;
        let class_id = r.u8()?;
        let color_v = r.f64s(3)?;
        let omin = r.f64s(3)?;
        let omax = r.f64s(3)?;
        objects.push(ObjectInstance {
            instance_id,
            class_id,
            aabb: Aabb {
                min: [omin[0], omin[1], omin[2]],
                max: [omax[0], omax[1], omax[2]],
            },
            color: [color_v[0], color_v[1], color_v[2]],
        });
    }
    r.magic(b"DNE!")?;
    r.expect_end()?;

    let motion = MotionSeq::new(
        Tensor::new(params, &[t, FRAME_PARAMS])?,
        valid,
        action,
    )?;
    let cloud = SceneCloud {
        coords,
        colors,
        instance_id,
        class_id,
        goal_mask,
    };
    let mut beta = [0.0; SHAPE_DIM];
    beta.copy_from_slice(&beta_v);
    let sample = DatasetSample {
        scene_index,
        render_seed,
        scene: SceneSpec {
            room: Aabb {
                min: [rmin[0], rmin[1], rmin[2]],
                max: [rmax[0], rmax[1], rmax[2]],
            },
            objects,
        },
        cloud,
        annotation: TextAnnotation {
            action,
            goal_class,
            goal_instance,
            relation,
            ambiguous,
            text,
            tokens,
        },
        motion,
        beta,
        goal_center: [center[0], center[1], center[2]],
        goal_aabb: Aabb {
            min: [amin[0], amin[1], amin[2]],
            max: [amax[0], amax[1], amax[2]],
        },
    };
    Ok((sample, header))
}

// ---------------------------------------------------------------------------
// Dataset building and loading
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub actions: Vec<ActionId>,
    pub scene: SceneGenConfig,
    pub render: RenderConfig,
    pub t_frames: usize,
    pub text_len: usize,
    pub feature_dim: usize,
    pub table_seed: u64,
    pub train_frac: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            n_scenes: 100,
            actions: vec![ActionId::Walk, ActionId::Sit, ActionId::StandUp, ActionId::Lie],
            scene: SceneGenConfig::default(),
            render: RenderConfig::default(),
            t_frames: 30,
            text_len: 16,
            feature_dim: 64,
            table_seed: 42,
            train_frac: 0.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub path: String,
    pub split: Split,
    pub scene_index: u32,
    pub action: ActionId,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub header: DatasetHeader,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| (e.split == split).then_some(i))
            .collect()
    }

    pub fn load_sample(&self, index: usize) -> Result<DatasetSample> {
        let e = &self.entries[index];
        let path = self.root.join(&e.path);
        let bytes = read_file(&path)?;
        let (sample, header) = read_record(&bytes, &path.display().to_string())?;
        if header != self.header {
            return Err(Error::CorruptHeader(format!(
                "{}: record header disagrees with manifest",
                path.display()
            )));
        }
        Ok(sample)
    }

    /// Load every sample of a split, in manifest order (parallel read).
    pub fn load_split(&self, split: Split) -> Result<Vec<DatasetSample>> {
        let idx = self.indices(split);
        idx.par_iter().map(|&i| self.load_sample(i)).collect()
    }
}

/// Build one sample; the goal instance is drawn per (scene, action).
fn build_sample(
    cfg: &DatasetConfig,
    vocab: &Vocabulary,
    scene_index: u32,
    spec: &SceneSpec,
    cloud: &SceneCloud,
    action: ActionId,
) -> Result<DatasetSample> {
    let tag = scene_index as u64;
    let act = action.index() as u64;
    let mut rng = crate::rng::stream(cfg.seed, "goal_pick", &[tag, act]);
    let goal = spec.objects[rng.random_range(0..spec.objects.len())].instance_id;
    let mut cloud = cloud.clone();
    set_goal(&mut cloud, goal)?;
    let annotation = generate_text(
        spec,
        goal,
        action,
        vocab,
        cfg.text_len,
        crate::rng::child_seed(cfg.seed, "text", &[tag, act]),
    )?;
    let mut beta = [0.0; SHAPE_DIM];
    let mut brng = crate::rng::stream(cfg.seed, "beta", &[tag, act]);
    for b in beta.iter_mut() {
        *b = brng.random_range(-0.5..0.5);
    }
    let motion = synthesize_motion(
        spec,
        &cloud,
        goal,
        action,
        &beta,
        cfg.t_frames,
        crate::rng::child_seed(cfg.seed, "motion", &[tag, act]),
    )?;
    let goal_center = goal_centroid(&cloud)?;
    let goal_aabb = aabb_of(&cloud.goal_points())?;
    Ok(DatasetSample {
        scene_index,
        render_seed: crate::rng::child_seed(cfg.seed, "render", &[tag]),
        scene: spec.clone(),
        cloud,
        annotation,
        motion,
        beta,
        goal_center,
        goal_aabb,
    })
}

/// Generate all samples in memory (scene-parallel, deterministic order).
pub fn generate_samples(cfg: &DatasetConfig) -> Result<Vec<DatasetSample>> {
    let vocab = Vocabulary::from_lexicon(&template_lexicon());
    let per_scene: Vec<Result<Vec<DatasetSample>>> = (0..cfg.n_scenes as u32)
        .into_par_iter()
        .map(|scene_index| {
            let scene_seed = crate::rng::child_seed(cfg.seed, "scene", &[scene_index as u64]);
            let (spec, cloud) = generate_scene(scene_seed, &cfg.scene)?;
            cfg.actions
                .iter()
                .map(|&a| build_sample(cfg, &vocab, scene_index, &spec, &cloud, a))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(cfg.n_scenes * cfg.actions.len());
    for group in per_scene {
        out.extend(group?);
    }
    Ok(out)
}

pub fn dataset_header(cfg: &DatasetConfig) -> DatasetHeader {
    DatasetHeader {
        n_points: cfg.scene.n_points,
        t_frames: cfg.t_frames,
        feature_dim: cfg.feature_dim,
        text_len: cfg.text_len,
        sigma_f: cfg.render.sigma_f,
        n_views: cfg.render.n_views,
        image_size: cfg.render.image_size,
        table_seed: cfg.table_seed,
        palette: super::scene::class_palette().iter().map(|c| c.name.to_string()).collect(),
    }
}

/// Scene-level split: scenes never straddle train and test.
pub fn scene_split(cfg: &DatasetConfig) -> Vec<Split> {
    let mut order: Vec<usize> = (0..cfg.n_scenes).collect();
    let mut rng = crate::rng::stream(cfg.seed, "split", &[]);
    order.shuffle(&mut rng);
    let n_train = ((cfg.n_scenes as f64) * cfg.train_frac).round() as usize;
    let mut split = vec![Split::Test; cfg.n_scenes];
    for &s in order.iter().take(n_train) {
        split[s] = Split::Train;
    }
    split
}

/// Build the dataset on disk: records plus a split manifest.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Dataset> {
    let samples = generate_samples(cfg)?;
    let header = dataset_header(cfg);
    let split = scene_split(cfg);
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("records/sample_{i:05}.bin");
        write_file(&out_dir.join(&rel), &write_record(s, &header))?;
        entries.push(ManifestEntry {
            path: rel,
            split: split[s.scene_index as usize],
            scene_index: s.scene_index,
            action: s.annotation.action,
        });
    }
    let dataset = Dataset {
        root: out_dir.to_path_buf(),
        header,
        entries,
    };
    write_file(&out_dir.join("manifest.txt"), write_manifest(&dataset).as_bytes())?;
    Ok(dataset)
}

fn write_manifest(ds: &Dataset) -> String {
    let h = &ds.header;
    let mut out = String::new();
    out.push_str("# dataset manifest\n");
    out.push_str("version 1\n");
    out.push_str(&format!(
        "header {} {} {} {} {} {} {} {}\n",
        h.n_points, h.t_frames, h.feature_dim, h.text_len, h.sigma_f, h.n_views, h.image_size,
        h.table_seed
    ));
    out.push_str(&format!("palette {}\n", h.palette.join(" ")));
    for e in &ds.entries {
        out.push_str(&format!(
            "record {} {} {} {}\n",
            e.path,
            e.split.tag(),
            e.scene_index,
            e.action.index()
        ));
    }
    out
}

/// Load a dataset from its manifest.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let text = String::from_utf8(read_file(&root.join("manifest.txt"))?)
        .map_err(|_| Error::CorruptHeader("manifest is not utf-8".into()))?;
    let mut header: Option<DatasetHeader> = None;
    let mut palette: Vec<String> = Vec::new();
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let bad = |what: &str| Error::CorruptHeader(format!("manifest line {}: {what}", lineno + 1));
        match parts.next().unwrap() {
            "version" => {
                let v: u32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("version"))?;
                if v != 1 {
                    return Err(Error::VersionMismatch { found: v, expected: 1 });
                }
            }
            "header" => {
                let nums: Vec<f64> = parts.map(|s| s.parse().unwrap_or(f64::NAN)).collect();
                if nums.len() != 8 || nums.iter().any(|v| !v.is_finite()) {
                    return Err(bad("header fields"));
                }
                header = Some(DatasetHeader {
                    n_points: nums[0] as usize,
                    t_frames: nums[1] as usize,
                    feature_dim: nums[2] as usize,
                    text_len: nums[3] as usize,
                    sigma_f: nums[4],
                    n_views: nums[5] as usize,
                    image_size: nums[6] as usize,
                    table_seed: nums[7] as u64,
                    palette: Vec::new(),
                });
            }
            "palette" => {
                palette = parts.map(|s| s.to_string()).collect();
            }
            "record" => {
                let path = parts.next().ok_or_else(|| bad("path"))?.to_string();
                let split = match parts.next() {
                    Some("train") => Split::Train,
                    Some("test") => Split::Test,
                    _ => return Err(bad("split tag")),
                };
                let scene_index: u32 =
                    parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("scene index"))?;
                let action = ActionId::from_index(
                    parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("action"))?,
                )?;
                entries.push(ManifestEntry { path, split, scene_index, action });
            }
            other => return Err(bad(&format!("unknown tag {other}"))),
        }
    }
    let mut header = header.ok_or_else(|| Error::CorruptHeader("manifest missing header".into()))?;
    header.palette = palette;
    Ok(Dataset {
        root: root.to_path_buf(),
        header,
        entries,
    })
}
