//! Skeleton template: kinematic tree, capsule radii, vertex sampling
//! pattern, and the shape basis mapping beta to per-bone deltas.
//!
//! The default template ships as a plain-text asset (see
//! `assets/skeleton_default.txt`) so tests can pin exact values.

use crate::error::{Error, Result};
use std::sync::OnceLock;

pub const SHAPE_DIM: usize = 10;
/// Non-root joints (= bones); the pose block is JOINTS * 3 parameters.
pub const JOINTS: usize = 21;
/// Per-frame parameter count: translation 3 + orientation 6 + pose 63.
pub const FRAME_PARAMS: usize = 3 + 6 + JOINTS * 3;

#[derive(Clone, Debug)]
pub struct Joint {
    pub name: String,
    /// Index into the joint list; root has none.
    pub parent: Option<usize>,
    /// Rest offset from the parent joint, meters.
    pub offset: [f64; 3],
    /// Capsule radius of the bone ending at this joint (root: unused).
    pub radius: f64,
    /// Capsule surface samples on this bone.
    pub samples: usize,
}

#[derive(Clone, Debug)]
pub struct SkeletonTemplate {
    /// Root first, then children in topological order.
    pub joints: Vec<Joint>,
    /// (JOINTS, SHAPE_DIM) relative bone-length deltas per unit beta.
    pub shape_len: Vec<[f64; SHAPE_DIM]>,
    /// (JOINTS, SHAPE_DIM) relative radius deltas per unit beta.
    pub shape_rad: Vec<[f64; SHAPE_DIM]>,
}

impl SkeletonTemplate {
    /// Total skinned vertex count.
    pub fn vertex_count(&self) -> usize {
        self.joints.iter().map(|j| j.samples).sum()
    }

    /// Bone length scale factor for joint `j` (1-based bone index = j-1).
    pub fn length_scale(&self, joint: usize, beta: &[f64]) -> f64 {
        let row = &self.shape_len[joint - 1];
        1.0 + row.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn radius_scale(&self, joint: usize, beta: &[f64]) -> f64 {
        let row = &self.shape_rad[joint - 1];
        1.0 + row.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn parse(text: &str) -> Result<SkeletonTemplate> {
        let mut joints: Vec<Joint> = Vec::new();
        let mut shape_len: Vec<(String, [f64; SHAPE_DIM])> = Vec::new();
        let mut shape_rad: Vec<(String, [f64; SHAPE_DIM])> = Vec::new();
        let mut version = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let tag = parts.next().unwrap();
            let fields: Vec<&str> = parts.collect();
            let bad = |reason: &str| {
                Error::Config(format!("skeleton template line {}: {reason}", lineno + 1))
            };
            match tag {
                "version" => {
                    version = Some(
                        fields
                            .first()
                            .and_then(|v| v.parse::<u32>().ok())
                            .ok_or_else(|| bad("bad version"))?,
                    );
                }
                "joint" => {
                    if fields.len() != 7 {
                        return Err(bad("joint needs 7 fields"));
                    }
                    let name = fields[0].to_string();
                    let parent = if fields[1] == "-" {
                        None
                    } else {
                        Some(
                            joints
                                .iter()
                                .position(|j| j.name == fields[1])
                                .ok_or_else(|| bad("parent must precede child"))?,
                        )
                    };
                    let nums: Vec<f64> = fields[2..]
                        .iter()
                        .map(|s| s.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("bad number"))?;
                    joints.push(Joint {
                        name,
                        parent,
                        offset: [nums[0], nums[1], nums[2]],
                        radius: nums[3],
                        samples: nums[4] as usize,
                    });
                }
                "shape_len" | "shape_rad" => {
                    if fields.len() != 1 + SHAPE_DIM {
                        return Err(bad("shape row needs joint + 10 values"));
                    }
                    let mut row = [0.0; SHAPE_DIM];
                    for (i, s) in fields[1..].iter().enumerate() {
                        row[i] = s.parse().map_err(|_| bad("bad number"))?;
                    }
                    let entry = (fields[0].to_string(), row);
                    if tag == "shape_len" {
                        shape_len.push(entry);
                    } else {
                        shape_rad.push(entry);
                    }
                }
                other => return Err(bad(&format!("unknown tag '{other}'"))),
            }
        }
        if version != Some(1) {
            return Err(Error::Config("skeleton template: missing or bad version".into()));
        }
        if joints.len() != JOINTS + 1 {
            return Err(Error::Config(format!(
                "skeleton template: expected {} joints, found {}",
                JOINTS + 1,
                joints.len()
            )));
        }
        if joints[0].parent.is_some() || joints.iter().skip(1).any(|j| j.parent.is_none()) {
            return Err(Error::Config("skeleton template: exactly one root allowed".into()));
        }
        if joints.iter().skip(1).any(|j| j.radius <= 0.0) {
            return Err(Error::Config("skeleton template: radii must be positive".into()));
        }
        let by_name = |rows: Vec<(String, [f64; SHAPE_DIM])>,
                       tag: &str|
         -> Result<Vec<[f64; SHAPE_DIM]>> {
            let mut out = vec![None; JOINTS];
            for (name, row) in rows {
                let j = joints
                    .iter()
                    .position(|jj| jj.name == name)
                    .ok_or_else(|| Error::Config(format!("{tag} for unknown joint {name}")))?;
                if j == 0 {
                    return Err(Error::Config(format!("{tag} for root joint")));
                }
                out[j - 1] = Some(row);
            }
            out.into_iter()
                .enumerate()
                .map(|(i, r)| r.ok_or_else(|| Error::Config(format!("missing {tag} row {i}"))))
                .collect()
        };
        Ok(SkeletonTemplate {
            shape_len: by_name(shape_len, "shape_len")?,
            shape_rad: by_name(shape_rad, "shape_rad")?,
            joints,
        })
    }

    /// Serialize to the documented plain-text format.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str("# capsule-body skeleton template\n");
        out.push_str("version 1\n");
        for j in &self.joints {
            let parent = j.parent.map_or("-".to_string(), |p| self.joints[p].name.clone());
            out.push_str(&format!(
                "joint {} {} {:.4} {:.4} {:.4} {:.4} {}\n",
                j.name, parent, j.offset[0], j.offset[1], j.offset[2], j.radius, j.samples
            ));
        }
        for (tag, rows) in [("shape_len", &self.shape_len), ("shape_rad", &self.shape_rad)] {
            for (b, row) in rows.iter().enumerate() {
                out.push_str(&format!("{tag} {}", self.joints[b + 1].name));
                for v in row {
                    out.push_str(&format!(" {v:.4}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

static DEFAULT: OnceLock<SkeletonTemplate> = OnceLock::new();

/// The pinned default template shipped with the crate.
pub fn default_template() -> &'static SkeletonTemplate {
    DEFAULT.get_or_init(|| {
        SkeletonTemplate::parse(include_str!("../../assets/skeleton_default.txt"))
            .expect("default skeleton asset parses")
    })
}

/// Fixed capsule-surface sampling pattern for one bone with `n` samples:
/// (axial fraction t, cos phi, sin phi) per sample.
pub fn capsule_sample_pattern(n: usize) -> Vec<(f64, f64, f64)> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let t = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            let phi = i as f64 * golden;
            (t, phi.cos(), phi.sin())
        })
        .collect()
}

/// Two unit vectors orthogonal to `axis` (and each other).
pub fn orthonormal_frame(axis: &[f64; 3]) -> ([f64; 3], [f64; 3]) {
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let d = [axis[0] / norm, axis[1] / norm, axis[2] / norm];
    let refv = if d[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let mut n1 = [
        d[1] * refv[2] - d[2] * refv[1],
        d[2] * refv[0] - d[0] * refv[2],
        d[0] * refv[1] - d[1] * refv[0],
    ];
    let l1 = (n1[0] * n1[0] + n1[1] * n1[1] + n1[2] * n1[2]).sqrt();
    for v in n1.iter_mut() {
        *v /= l1;
    }
    let n2 = [
        d[1] * n1[2] - d[2] * n1[1],
        d[2] * n1[0] - d[0] * n1[2],
        d[0] * n1[1] - d[1] * n1[0],
    ];
    (n1, n2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_template_pins() {
        let t = default_template();
        assert_eq!(t.joints.len(), JOINTS + 1);
        assert_eq!(t.joints[0].name, "pelvis");
        assert!(t.joints[0].parent.is_none());
        assert_eq!(t.vertex_count(), 420);
        let lknee = t.joint_index("l_knee").unwrap();
        assert_eq!(t.joints[lknee].offset, [0.0, 0.0, -0.40]);
        assert_eq!(t.joints[lknee].radius, 0.06);
        // tree is connected and acyclic: parents precede children
        for (i, j) in t.joints.iter().enumerate().skip(1) {
            assert!(j.parent.unwrap() < i);
        }
        // first shape coefficient scales everything up
        let beta = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        for b in 1..=JOINTS {
            assert!((t.length_scale(b, &beta) - 1.10).abs() < 1e-12);
            assert!((t.radius_scale(b, &beta) - 1.06).abs() < 1e-12);
        }
    }

    #[test]
    fn serialize_parse_roundtrip() {
        let t = default_template();
        let text = t.serialize();
        let t2 = SkeletonTemplate::parse(&text).unwrap();
        assert_eq!(t2.joints.len(), t.joints.len());
        for (a, b) in t.joints.iter().zip(&t2.joints) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.offset, b.offset);
            assert_eq!(a.radius, b.radius);
        }
        assert_eq!(t.shape_len, t2.shape_len);
        assert_eq!(t.shape_rad, t2.shape_rad);
    }

    #[test]
    fn orthonormal_frames_are_orthonormal() {
        for axis in [[1.0, 0.0, 0.0], [0.0, 0.0, -0.4], [0.3, -0.2, 0.9]] {
            let (n1, n2) = orthonormal_frame(&axis);
            let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            assert!(dot(&n1, &n2).abs() < 1e-12);
            assert!(dot(&n1, &axis).abs() < 1e-12);
            assert!((dot(&n1, &n1) - 1.0).abs() < 1e-12);
            assert!((dot(&n2, &n2) - 1.0).abs() < 1e-12);
        }
    }
}
