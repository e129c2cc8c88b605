//! Forward kinematics, 6-D orientation decoding, and capsule skinning,
//! differentiable end to end through the tape.
//!
//! Rotations compose down the tree: a joint's axis-angle rotates its own
//! frame and therefore everything below it. Each bone's capsule vertices are
//! rigidly attached to the parent joint's frame (one-hot skinning weights).

use super::template::{capsule_sample_pattern, orthonormal_frame, SkeletonTemplate, FRAME_PARAMS, JOINTS, SHAPE_DIM};
use crate::autodiff::{aa_to_mat_forward, Tensor, Var};
use crate::error::{Error, Result};

const DEGENERATE_EPS: f64 = 1e-8;

/// World pose of every joint over T frames.
pub struct FkOut {
    /// Per joint (root first): world position (T, 3).
    pub pos: Vec<Var>,
    /// Per joint: world rotation (T, 3, 3).
    pub rot: Vec<Var>,
    /// Per bone (joints 1..): length and radius scale factors, each (1, 1).
    pub len_scale: Vec<Var>,
    pub rad_scale: Vec<Var>,
}

/// Gram-Schmidt decode of a 6-D orientation block: (T, 6) -> (T, 3, 3).
///
/// The two 3-vectors become the first two columns; the third column is
/// their cross product.
pub fn rot6d_to_matrix(r6: &Var) -> Result<Var> {
    if r6.shape().len() != 2 || r6.shape()[1] != 6 {
        return Err(Error::InvalidShape {
            op: "rot6d_to_matrix",
            shape: r6.shape().to_vec(),
            reason: "expected (T, 6)".into(),
        });
    }
    let t = r6.shape()[0];
    let a1 = r6.cols(0, 3)?;
    let a2 = r6.cols(3, 6)?;
    let n1 = row_norms(&a1)?;
    check_above(&n1, "rot6d first vector")?;
    let b1 = a1.div(&n1)?;
    let proj = b1.mul(&a2)?.sum_axis(1)?.reshape(&[t, 1])?;
    let u2 = a2.sub(&b1.mul(&proj)?)?;
    let n2 = row_norms(&u2)?;
    check_above(&n2, "rot6d second vector residual")?;
    let b2 = u2.div(&n2)?;
    let b3 = cross_rows(&b1, &b2)?;
    let c1 = b1.reshape(&[t, 3, 1])?;
    let c2 = b2.reshape(&[t, 3, 1])?;
    let c3 = b3.reshape(&[t, 3, 1])?;
    Var::concat(&[&c1, &c2, &c3], 2)
}

fn row_norms(v: &Var) -> Result<Var> {
    let t = v.shape()[0];
    v.mul(v)?.sum_axis(1)?.sqrt()?.reshape(&[t, 1])
}

fn check_above(norms: &Var, what: &str) -> Result<()> {
    if norms.value().data().iter().any(|&n| n < DEGENERATE_EPS) {
        return Err(Error::Degenerate(format!("{what} has near-zero norm")));
    }
    Ok(())
}

/// Row-wise cross product of two (T, 3) tensors.
fn cross_rows(a: &Var, b: &Var) -> Result<Var> {
    let (ax, ay, az) = (a.cols(0, 1)?, a.cols(1, 2)?, a.cols(2, 3)?);
    let (bx, by, bz) = (b.cols(0, 1)?, b.cols(1, 2)?, b.cols(2, 3)?);
    let cx = ay.mul(&bz)?.sub(&az.mul(&by)?)?;
    let cy = az.mul(&bx)?.sub(&ax.mul(&bz)?)?;
    let cz = ax.mul(&by)?.sub(&ay.mul(&bx)?)?;
    Var::concat(&[&cx, &cy, &cz], 1)
}

fn validate_params(params: &Var) -> Result<usize> {
    let s = params.shape();
    if s.len() != 2 || s[1] != FRAME_PARAMS {
        return Err(Error::InvalidShape {
            op: "forward_kinematics",
            shape: s.to_vec(),
            reason: format!("expected (T, {FRAME_PARAMS})"),
        });
    }
    if !params.value().is_finite() {
        return Err(Error::NonFinite("motion parameters".into()));
    }
    Ok(s[0])
}

/// FK with an explicit root transform (used by both posed and canonical paths).
fn fk_with_root(
    template: &SkeletonTemplate,
    root_pos: Var,
    root_rot: Var,
    pose: &Var,
    beta: &Var,
) -> Result<FkOut> {
    let t = root_pos.shape()[0];
    // shape deltas: (J, SHAPE_DIM) . (SHAPE_DIM, 1) -> (J, 1)
    let len_rows: Vec<f64> = template.shape_len.iter().flatten().copied().collect();
    let rad_rows: Vec<f64> = template.shape_rad.iter().flatten().copied().collect();
    let len_basis = Var::constant(Tensor::from_raw(len_rows, vec![JOINTS, SHAPE_DIM]));
    let rad_basis = Var::constant(Tensor::from_raw(rad_rows, vec![JOINTS, SHAPE_DIM]));
    let beta_col = beta.reshape(&[SHAPE_DIM, 1])?;
    let len_scales = len_basis.matmul(&beta_col)?.add_scalar(1.0)?;
    let rad_scales = rad_basis.matmul(&beta_col)?.add_scalar(1.0)?;

    let mut pos: Vec<Var> = Vec::with_capacity(template.joints.len());
    let mut rot: Vec<Var> = Vec::with_capacity(template.joints.len());
    let mut len_scale = Vec::with_capacity(JOINTS);
    let mut rad_scale = Vec::with_capacity(JOINTS);
    pos.push(root_pos);
    rot.push(root_rot);
    for (j, joint) in template.joints.iter().enumerate().skip(1) {
        let parent = joint.parent.unwrap();
        let lj = len_scales.rows(j - 1, j)?; // (1, 1)
        let sj = rad_scales.rows(j - 1, j)?;
        let off0 = Var::constant(Tensor::from_raw(joint.offset.to_vec(), vec![1, 3]));
        let off = off0.mul(&lj)?.reshape(&[3, 1])?;
        let p = pos[parent].clone();
        let r = rot[parent].clone();
        let pj = p.add(&r.bmm(&off)?.reshape(&[t, 3])?)?;
        let theta = pose.cols(3 * (j - 1), 3 * j)?;
        let rj = r.bmm(&theta.aa_to_mat()?)?;
        pos.push(pj);
        rot.push(rj);
        len_scale.push(lj);
        rad_scale.push(sj);
    }
    Ok(FkOut { pos, rot, len_scale, rad_scale })
}

/// World joint poses from (T, 72) parameters and shape beta (10,).
pub fn forward_kinematics(
    template: &SkeletonTemplate,
    params: &Var,
    beta: &Var,
) -> Result<FkOut> {
    validate_params(params)?;
    let root_pos = params.cols(0, 3)?;
    let root_rot = rot6d_to_matrix(&params.cols(3, 9)?)?;
    let pose = params.cols(9, FRAME_PARAMS)?;
    fk_with_root(template, root_pos, root_rot, &pose, beta)
}

/// Capsule-surface vertices rigidly attached to bones: (T, V, 3).
pub fn skin_mesh(template: &SkeletonTemplate, params: &Var, beta: &Var) -> Result<Var> {
    let fk = forward_kinematics(template, params, beta)?;
    skin_from_fk(template, &fk)
}

/// Skinned vertices with the global transform zeroed (t = 0, r = identity).
pub fn canonical_mesh(template: &SkeletonTemplate, params: &Var, beta: &Var) -> Result<Var> {
    let t = validate_params(params)?;
    let root_pos = Var::constant(Tensor::zeros(&[t, 3]));
    let mut eye = Vec::with_capacity(t * 9);
    for _ in 0..t {
        eye.extend_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }
    let root_rot = Var::constant(Tensor::from_raw(eye, vec![t, 3, 3]));
    let pose = params.cols(9, FRAME_PARAMS)?;
    let fk = fk_with_root(template, root_pos, root_rot, &pose, beta)?;
    skin_from_fk(template, &fk)
}

fn skin_from_fk(template: &SkeletonTemplate, fk: &FkOut) -> Result<Var> {
    let t = fk.pos[0].shape()[0];
    let mut bones: Vec<Var> = Vec::with_capacity(JOINTS);
    for (j, joint) in template.joints.iter().enumerate().skip(1) {
        if joint.samples == 0 {
            continue;
        }
        let parent = joint.parent.unwrap();
        let (axial, radial) = bone_sample_bases(joint);
        let axial = Var::constant(axial);
        let radial = Var::constant(radial);
        let locals = axial
            .mul(&fk.len_scale[j - 1])?
            .add(&radial.mul(&fk.rad_scale[j - 1])?)?; // (3, S)
        let world = fk.rot[parent]
            .bmm(&locals)?
            .add(&fk.pos[parent].reshape(&[t, 3, 1])?)?; // (T, 3, S)
        bones.push(world.permute(&[0, 2, 1])?); // (T, S, 3)
    }
    let refs: Vec<&Var> = bones.iter().collect();
    Var::concat(&refs, 1)
}

/// Constant (3, S) bases so that locals = axial * len_scale + radial * rad_scale.
fn bone_sample_bases(joint: &super::template::Joint) -> (Tensor, Tensor) {
    let s = joint.samples;
    let pattern = capsule_sample_pattern(s);
    let (n1, n2) = orthonormal_frame(&joint.offset);
    let mut axial = vec![0.0; 3 * s];
    let mut radial = vec![0.0; 3 * s];
    for (i, &(tfrac, cphi, sphi)) in pattern.iter().enumerate() {
        for d in 0..3 {
            axial[d * s + i] = tfrac * joint.offset[d];
            radial[d * s + i] = joint.radius * (cphi * n1[d] + sphi * n2[d]);
        }
    }
    (
        Tensor::from_raw(axial, vec![3, s]),
        Tensor::from_raw(radial, vec![3, s]),
    )
}

/// Marker set: the 21 non-root joint positions, (T, 21, 3).
pub fn marker_positions(template: &SkeletonTemplate, params: &Var, beta: &Var) -> Result<Var> {
    let fk = forward_kinematics(template, params, beta)?;
    let t = fk.pos[0].shape()[0];
    let parts: Vec<Var> = fk.pos[1..]
        .iter()
        .map(|p| p.reshape(&[t, 1, 3]))
        .collect::<Result<_>>()?;
    let refs: Vec<&Var> = parts.iter().collect();
    Var::concat(&refs, 1)
}

// ---------------------------------------------------------------------------
// Value-only fast paths (no tape), used by synthesis and metric evaluation.
// ---------------------------------------------------------------------------

/// Joint world positions and per-bone radii for one frame, plain values.
pub struct FramePose {
    /// Root first, length JOINTS + 1.
    pub joints: Vec<[f64; 3]>,
    /// Per bone (joint 1..): scaled capsule radius.
    pub radii: Vec<f64>,
}

/// Value-only single-frame FK; must agree with [`forward_kinematics`].
pub fn fk_values(template: &SkeletonTemplate, frame: &[f64], beta: &[f64]) -> Result<FramePose> {
    if frame.len() != FRAME_PARAMS {
        return Err(Error::InvalidArgument(format!(
            "frame length {} != {FRAME_PARAMS}",
            frame.len()
        )));
    }
    let root = [frame[0], frame[1], frame[2]];
    let rot = rot6d_values(&frame[3..9])?;
    let mut joints = vec![[0.0; 3]; template.joints.len()];
    let mut rots = vec![[[0.0; 3]; 3]; template.joints.len()];
    joints[0] = root;
    rots[0] = rot;
    let mut radii = Vec::with_capacity(JOINTS);
    for (j, joint) in template.joints.iter().enumerate().skip(1) {
        let parent = joint.parent.unwrap();
        let ls = template.length_scale(j, beta);
        let off = [joint.offset[0] * ls, joint.offset[1] * ls, joint.offset[2] * ls];
        let rp = &rots[parent];
        for d in 0..3 {
            joints[j][d] = joints[parent][d] + rp[d][0] * off[0] + rp[d][1] * off[1] + rp[d][2] * off[2];
        }
        let theta = &frame[9 + 3 * (j - 1)..9 + 3 * j];
        let local = aa_to_mat_forward(theta);
        let mut rj = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                rj[r][c] = rp[r][0] * local[c] + rp[r][1] * local[3 + c] + rp[r][2] * local[6 + c];
            }
        }
        rots[j] = rj;
        radii.push(joint.radius * template.radius_scale(j, beta));
    }
    Ok(FramePose { joints, radii })
}

/// Gram-Schmidt 6-D decode, plain values.
pub fn rot6d_values(r6: &[f64]) -> Result<[[f64; 3]; 3]> {
    let a1 = [r6[0], r6[1], r6[2]];
    let a2 = [r6[3], r6[4], r6[5]];
    let n1 = (a1[0] * a1[0] + a1[1] * a1[1] + a1[2] * a1[2]).sqrt();
    if n1 < DEGENERATE_EPS {
        return Err(Error::Degenerate("rot6d first vector has near-zero norm".into()));
    }
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let dot = b1[0] * a2[0] + b1[1] * a2[1] + b1[2] * a2[2];
    let u2 = [a2[0] - dot * b1[0], a2[1] - dot * b1[1], a2[2] - dot * b1[2]];
    let n2 = (u2[0] * u2[0] + u2[1] * u2[1] + u2[2] * u2[2]).sqrt();
    if n2 < DEGENERATE_EPS {
        return Err(Error::Degenerate("rot6d second vector residual is degenerate".into()));
    }
    let b2 = [u2[0] / n2, u2[1] / n2, u2[2] / n2];
    let b3 = [
        b1[1] * b2[2] - b1[2] * b2[1],
        b1[2] * b2[0] - b1[0] * b2[2],
        b1[0] * b2[1] - b1[1] * b2[0],
    ];
    Ok([
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ])
}

/// 6-D encoding of a rotation matrix: its first two columns.
pub fn matrix_to_rot6d(m: &[[f64; 3]; 3]) -> [f64; 6] {
    [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]
}

/// Marker values (non-root joint positions) for one frame.
pub fn marker_values(template: &SkeletonTemplate, frame: &[f64], beta: &[f64]) -> Result<Vec<[f64; 3]>> {
    Ok(fk_values(template, frame, beta)?.joints[1..].to_vec())
}
