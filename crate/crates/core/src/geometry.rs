//! Point-cloud primitives: farthest point sampling, k-NN pooling, view
//! projection, multi-view feature fusion, and axis-aligned bounding boxes.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Colored, instance-labelled scene point cloud.
///
/// `class_id` 0 is background (floor/walls); 1..=9 are object classes.
/// `goal_mask` selects the points of exactly one instance.
#[derive(Clone, Debug)]
pub struct SceneCloud {
    /// (N, 3) world coordinates in meters, row-major.
    pub coords: Vec<[f64; 3]>,
    /// (N, 3) RGB in [0, 1].
    pub colors: Vec<[f64; 3]>,
    pub instance_id: Vec<u32>,
    pub class_id: Vec<u8>,
    pub goal_mask: Vec<bool>,
}

impl SceneCloud {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// World coordinates of the goal-masked points, (G, 3).
    pub fn goal_points(&self) -> Vec<[f64; 3]> {
        self.coords
            .iter()
            .zip(&self.goal_mask)
            .filter_map(|(c, &m)| if m { Some(*c) } else { None })
            .collect()
    }

    /// Cloud as an (N, 6) tensor of coords and colors.
    pub fn as_input_tensor(&self) -> Tensor {
        let n = self.len();
        let mut data = Vec::with_capacity(n * 6);
        for i in 0..n {
            data.extend_from_slice(&self.coords[i]);
            data.extend_from_slice(&self.colors[i]);
        }
        Tensor::from_raw(data, vec![n, 6])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty scene cloud".into()));
        }
        if self.colors.len() != n
            || self.instance_id.len() != n
            || self.class_id.len() != n
            || self.goal_mask.len() != n
        {
            return Err(Error::InvalidArgument("inconsistent cloud field lengths".into()));
        }
        let goal_instances: std::collections::BTreeSet<u32> = self
            .instance_id
            .iter()
            .zip(&self.goal_mask)
            .filter_map(|(&id, &m)| if m { Some(id) } else { None })
            .collect();
        if goal_instances.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "goal mask must select exactly one instance, found {}",
                goal_instances.len()
            )));
        }
        Ok(())
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest point sampling.
///
/// Each subsequent index maximizes the minimum Euclidean distance to the
/// already-selected set; ties break toward the lowest index.
pub fn farthest_point_sample(coords: &[[f64; 3]], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!(
            "farthest_point_sample: m={m} out of range 1..={n}"
        )));
    }
    if start >= n {
        return Err(Error::InvalidArgument(format!(
            "farthest_point_sample: start={start} out of range 0..{n}"
        )));
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = start;
    selected.push(start);
    for _ in 1..m {
        let cur = coords[current];
        let mut best = 0usize;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in coords.iter().enumerate() {
            let d2 = dist2(p, &cur);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            // strict > keeps the lowest index on ties
            if min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        selected.push(best);
        current = best;
    }
    Ok(selected)
}

/// Indices of the k nearest points to each center; distance ties break
/// toward the lowest index. Returns a flat (centers.len() * k) index list.
pub fn knn_indices(coords: &[[f64; 3]], centers: &[[f64; 3]], k: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "knn: k={k} out of range 1..={n}"
        )));
    }
    let mut out = Vec::with_capacity(centers.len() * k);
    // (distance, index) selection per center; n is desk-scale so a partial
    // selection via sort of a reusable buffer is fine.
    let mut buf: Vec<(f64, usize)> = Vec::with_capacity(n);
    for c in centers {
        buf.clear();
        buf.extend(coords.iter().enumerate().map(|(i, p)| (dist2(p, c), i)));
        buf.select_nth_unstable_by(k - 1, |a, b| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        });
        let head = &mut buf[..k];
        head.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.extend(head.iter().map(|&(_, i)| i));
    }
    Ok(out)
}

/// Average-pool features of the k nearest points around each center.
pub fn knn_pool(
    coords: &[[f64; 3]],
    feats: &Tensor,
    centers: &[[f64; 3]],
    k: usize,
) -> Result<Tensor> {
    if feats.shape().first().copied() != Some(coords.len()) {
        return Err(Error::ShapeMismatch {
            op: "knn_pool",
            lhs: vec![coords.len()],
            rhs: feats.shape().to_vec(),
        });
    }
    let idx = knn_indices(coords, centers, k)?;
    let f: usize = feats.shape()[1..].iter().product();
    let mut out = vec![0.0; centers.len() * f];
    for (ci, chunk) in idx.chunks(k).enumerate() {
        for &i in chunk {
            let row = &feats.data()[i * f..(i + 1) * f];
            for (o, r) in out[ci * f..(ci + 1) * f].iter_mut().zip(row) {
                *o += *r;
            }
        }
        for o in out[ci * f..(ci + 1) * f].iter_mut() {
            *o /= k as f64;
        }
    }
    let mut shape = feats.shape().to_vec();
    shape[0] = centers.len();
    Ok(Tensor::from_raw(out, shape))
}

/// Linear world-to-pixel map: `pixel = round(coords . matrix + offset)`.
///
/// The matrix is 3x2 (orthographic-style); points projecting outside
/// `[0, h) x [0, w)` are invalid.
#[derive(Clone, Debug)]
pub struct ViewProjection {
    /// 3x2, row-major: pixel = coords(1x3) . matrix(3x2) + offset.
    pub matrix: [[f64; 2]; 3],
    pub pixel_offset: [f64; 2],
    /// (rows, cols) of the target image.
    pub image_size: (usize, usize),
}

impl ViewProjection {
    /// Project one point; returns integer pixel (row, col) and validity.
    pub fn project(&self, p: &[f64; 3]) -> ((i64, i64), bool) {
        let u = p[0] * self.matrix[0][0] + p[1] * self.matrix[1][0] + p[2] * self.matrix[2][0]
            + self.pixel_offset[0];
        let v = p[0] * self.matrix[0][1] + p[1] * self.matrix[1][1] + p[2] * self.matrix[2][1]
            + self.pixel_offset[1];
        let (r, c) = (u.round() as i64, v.round() as i64);
        let valid =
            r >= 0 && c >= 0 && (r as usize) < self.image_size.0 && (c as usize) < self.image_size.1;
        ((r, c), valid)
    }
}

/// Project every point; pixel coordinates plus validity mask.
pub fn project_points(coords: &[[f64; 3]], view: &ViewProjection) -> (Vec<(i64, i64)>, Vec<bool>) {
    let mut px = Vec::with_capacity(coords.len());
    let mut valid = Vec::with_capacity(coords.len());
    for p in coords {
        let (pix, ok) = view.project(p);
        px.push(pix);
        valid.push(ok);
    }
    (px, valid)
}

/// One rendered teacher view: projection, instance map, per-pixel features.
#[derive(Clone, Debug)]
pub struct TeacherView {
    pub projection: ViewProjection,
    /// (H, W) instance ids; -1 where no surface was hit.
    pub instance_map: Vec<i64>,
    /// (H, W, F) unit-norm features.
    pub features: Tensor,
}

/// A set of rendered views sharing an image size and feature width.
#[derive(Clone, Debug)]
pub struct TeacherViewSet {
    pub views: Vec<TeacherView>,
    pub feature_dim: usize,
}

/// Per-point fused target features plus a coverage mask.
pub struct FusedTargets {
    /// (N, F) mean of contributing pixel features; zero rows where uncovered.
    pub features: Tensor,
    /// true where at least one view contributed.
    pub coverage: Vec<bool>,
}

/// Fuse per-pixel teacher features onto points across views.
///
/// A view contributes to a point when the projection lands in-bounds and the
/// view's instance map at that pixel matches the point's instance (occlusion
/// check). Points with no contributing view are flagged uncovered.
pub fn fuse_multiview(cloud: &SceneCloud, views: &TeacherViewSet) -> Result<FusedTargets> {
    if views.views.is_empty() {
        return Err(Error::InvalidArgument("fuse_multiview: no views".into()));
    }
    let n = cloud.len();
    let f = views.feature_dim;
    let mut acc = vec![0.0; n * f];
    let mut counts = vec![0u32; n];
    for view in &views.views {
        let (_h, w) = view.projection.image_size;
        for (i, p) in cloud.coords.iter().enumerate() {
            let ((r, c), ok) = view.projection.project(p);
            if !ok {
                continue;
            }
            let pix = r as usize * w + c as usize;
            if view.instance_map[pix] != cloud.instance_id[i] as i64 {
                continue;
            }
            let feat = &view.features.data()[pix * f..(pix + 1) * f];
            for (a, x) in acc[i * f..(i + 1) * f].iter_mut().zip(feat) {
                *a += *x;
            }
            counts[i] += 1;
        }
    }
    let mut coverage = vec![false; n];
    for i in 0..n {
        if counts[i] > 0 {
            coverage[i] = true;
            let inv = 1.0 / counts[i] as f64;
            for a in acc[i * f..(i + 1) * f].iter_mut() {
                *a *= inv;
            }
        }
    }
    Ok(FusedTargets {
        features: Tensor::from_raw(acc, vec![n, f]),
        coverage,
    })
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn extents(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|d| p[d] >= self.min[d] && p[d] <= self.max[d])
    }

    pub fn overlaps(&self, other: &Aabb) -> bool {
        (0..3).all(|d| self.min[d] < other.max[d] && other.min[d] < self.max[d])
    }

    /// Distance from a point to the box surface (0 inside).
    pub fn distance(&self, p: &[f64; 3]) -> f64 {
        let mut d2 = 0.0;
        for d in 0..3 {
            let gap = (self.min[d] - p[d]).max(0.0).max(p[d] - self.max[d]);
            d2 += gap * gap;
        }
        d2.sqrt()
    }

    /// Grow to include a margin on every side.
    pub fn inflate(&self, margin: f64) -> Aabb {
        Aabb {
            min: [self.min[0] - margin, self.min[1] - margin, self.min[2] - margin],
            max: [self.max[0] + margin, self.max[1] + margin, self.max[2] + margin],
        }
    }
}

/// Componentwise min/max box of a nonempty point set.
pub fn aabb_of(points: &[[f64; 3]]) -> Result<Aabb> {
    let first = points
        .first()
        .ok_or_else(|| Error::InvalidArgument("aabb_of: empty point set".into()))?;
    let mut min = *first;
    let mut max = *first;
    for p in points.iter().skip(1) {
        for d in 0..3 {
            min[d] = min[d].min(p[d]);
            max[d] = max[d].max(p[d]);
        }
    }
    Ok(Aabb { min, max })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fps_line() {
        // points at 0, 1, 10 on a line; m=2 from index 0 selects {0, 10}
        let coords = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        let sel = farthest_point_sample(&coords, 2, 0).unwrap();
        assert_eq!(sel, vec![0, 2]);
    }

    #[test]
    fn fps_all_points() {
        let coords = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let sel = farthest_point_sample(&coords, 3, 1).unwrap();
        assert_eq!(sel.len(), 3);
        let mut sorted = sel.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
        // selection order: start 1, then farthest (index 2 at d=2 vs index 0 at d=1)
        assert_eq!(sel, vec![1, 2, 0]);
    }

    #[test]
    fn fps_square_corners_beat_center() {
        // unit-square corners + center, m=4 from corner (0,0): center never selected
        let coords = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.5, 0.5, 0.0],
        ];
        let sel = farthest_point_sample(&coords, 4, 0).unwrap();
        assert!(!sel.contains(&4), "center selected: {sel:?}");
        let mut sorted = sel.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_rejects_m_too_large() {
        let coords = vec![[0.0; 3]];
        assert!(farthest_point_sample(&coords, 2, 0).is_err());
    }

    /// Greedy property, re-checked point by point: after the first pick, no
    /// unselected point has a strictly larger min-distance to the prefix.
    #[test]
    fn fps_greedy_property_random() {
        use rand::Rng;
        for seed in 0..20u64 {
            let mut rng = crate::rng::stream(seed, "fps_prop", &[]);
            let n = rng.random_range(5..40);
            let coords: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect();
            let m = rng.random_range(1..=n);
            let sel = farthest_point_sample(&coords, m, 0).unwrap();
            for step in 1..m {
                let prefix = &sel[..step];
                let mind = |i: usize| -> f64 {
                    prefix
                        .iter()
                        .map(|&s| dist2(&coords[i], &coords[s]))
                        .fold(f64::INFINITY, f64::min)
                };
                let chosen = mind(sel[step]);
                for i in 0..n {
                    if !prefix.contains(&i) {
                        assert!(
                            mind(i) <= chosen + 1e-12,
                            "seed {seed} step {step}: point {i} farther than chosen"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn knn_pool_k1_and_equal_feats() {
        let coords = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let feats = Tensor::new(vec![1.0, 5.0, 9.0], &[3, 1]).unwrap();
        // k=1: feature of single nearest point
        let out = knn_pool(&coords, &feats, &[[0.9, 0.0, 0.0]], 1).unwrap();
        assert_eq!(out.data(), &[5.0]);
        // k=2 nearest features 1 and 5 -> 3
        let out = knn_pool(&coords, &feats, &[[0.4, 0.0, 0.0]], 2).unwrap();
        assert_eq!(out.data(), &[3.0]);
        // constant features pool to the constant
        let cfeat = Tensor::full(&[3, 2], 0.25);
        let out = knn_pool(&coords, &cfeat, &[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]], 3).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn knn_pool_rejects_k_too_large() {
        let coords = vec![[0.0; 3]];
        let feats = Tensor::zeros(&[1, 2]);
        assert!(knn_pool(&coords, &feats, &[[0.0; 3]], 2).is_err());
    }

    #[test]
    fn projection_examples() {
        // orthographic top-down: matrix [[s,0],[0,s],[0,0]], offset 0
        let s = 4.0;
        let view = ViewProjection {
            matrix: [[s, 0.0], [0.0, s], [0.0, 0.0]],
            pixel_offset: [0.0, 0.0],
            image_size: (32, 32),
        };
        let ((r, c), ok) = view.project(&[1.0, 2.0, 0.5]);
        assert!(ok);
        assert_eq!((r, c), (4, 8));
        // out-of-bounds pixel is invalid
        let ((r, _), ok) = view.project(&[-0.25, 0.0, 0.0]);
        assert_eq!(r, -1);
        assert!(!ok);
        // zero matrix with in-bounds offset: all points valid at the offset
        let zero = ViewProjection {
            matrix: [[0.0; 2]; 3],
            pixel_offset: [3.0, 7.0],
            image_size: (8, 8),
        };
        let (px, valid) = project_points(&[[1.0, 2.0, 3.0], [-5.0, 0.1, 9.0]], &zero);
        assert!(valid.iter().all(|&v| v));
        assert!(px.iter().all(|&p| p == (3, 7)));
    }

    fn tiny_cloud() -> SceneCloud {
        SceneCloud {
            coords: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            colors: vec![[0.5; 3]; 2],
            instance_id: vec![1, 2],
            class_id: vec![3, 4],
            goal_mask: vec![true, false],
        }
    }

    fn const_view(instance: i64, feat: &[f64]) -> TeacherView {
        let hw = 4usize;
        let f = feat.len();
        let mut features = Vec::with_capacity(hw * hw * f);
        for _ in 0..hw * hw {
            features.extend_from_slice(feat);
        }
        TeacherView {
            projection: ViewProjection {
                matrix: [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]],
                pixel_offset: [1.0, 1.0],
                image_size: (hw, hw),
            },
            instance_map: vec![instance; hw * hw],
            features: Tensor::from_raw(features, vec![hw, hw, f]),
        }
    }

    #[test]
    fn fuse_single_and_double_view() {
        let cloud = tiny_cloud();
        let f1 = [0.6, 0.8];
        let set = TeacherViewSet {
            views: vec![const_view(1, &f1)],
            feature_dim: 2,
        };
        let fused = fuse_multiview(&cloud, &set).unwrap();
        assert!(fused.coverage[0]);
        assert!(!fused.coverage[1]); // instance mismatch -> occluded
        assert_eq!(fused.features.row(0), &f1);
        // two views with the same feature still fuse to that feature
        let set2 = TeacherViewSet {
            views: vec![const_view(1, &f1), const_view(1, &f1)],
            feature_dim: 2,
        };
        let fused2 = fuse_multiview(&cloud, &set2).unwrap();
        assert_eq!(fused2.features.row(0), &f1);
    }

    #[test]
    fn fuse_convex_hull_containment() {
        let cloud = tiny_cloud();
        let a = [0.0, 1.0];
        let b = [1.0, 0.0];
        let set = TeacherViewSet {
            views: vec![const_view(1, &a), const_view(1, &b)],
            feature_dim: 2,
        };
        let fused = fuse_multiview(&cloud, &set).unwrap();
        for (c, (&lo, &hi)) in fused.features.row(0).iter().zip(a.iter().zip(b.iter())) {
            let (lo, hi) = (lo.min(hi), lo.max(hi));
            assert!(*c >= lo - 1e-15 && *c <= hi + 1e-15);
        }
    }

    #[test]
    fn fuse_rejects_zero_views() {
        let cloud = tiny_cloud();
        let set = TeacherViewSet {
            views: vec![],
            feature_dim: 2,
        };
        assert!(fuse_multiview(&cloud, &set).is_err());
    }

    #[test]
    fn aabb_examples() {
        let p = [0.3, -1.0, 2.0];
        let b = aabb_of(&[p]).unwrap();
        assert_eq!(b.min, p);
        assert_eq!(b.max, p);
        let b = aabb_of(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(b.min, [0.0, 0.0, 0.0]);
        assert_eq!(b.max, [1.0, 2.0, 3.0]);
        // permutation invariance
        let b2 = aabb_of(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(b, b2);
        assert!(aabb_of(&[]).is_err());
    }
}
