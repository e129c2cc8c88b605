//! Point-cloud U-Net: self-attention blocks over k-NN neighborhoods,
//! farthest-point transition-downs, and interpolating transition-ups with
//! residual skips.
//!
//! All sampling structure (FPS selections, neighbor lists, interpolation
//! weights) depends only on pairwise distances, so it is computed once per
//! scene in a canonical coordinate order and reused across epochs and
//! rigid augmentations.

use super::params::Forward;
use super::ModelConfig;
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn_indices};

/// Per-stage cached sampling structure.
pub struct StageGraph {
    /// Point count at this stage.
    pub n: usize,
    /// This stage's coordinates.
    pub coords: Vec<[f64; 3]>,
    /// Transition-down pooling neighbors: n * k indices into the parent stage.
    pub pool_knn: Vec<usize>,
    /// Self-attention neighborhoods: n * k indices within this stage.
    pub attn_knn: Vec<usize>,
    /// Upsampling back to the parent: parent_n * interp_k indices into this stage.
    pub up_idx: Vec<usize>,
    /// Matching inverse-distance weights, parent_n * interp_k.
    pub up_w: Vec<f64>,
}

/// Cached structure for one scene at a given architecture scale.
pub struct SceneGraph {
    /// Full-resolution attention neighborhoods (n0 * k).
    pub attn0: Vec<usize>,
    pub n0: usize,
    pub stages: Vec<StageGraph>,
    /// Condition-module downsample: m FPS indices into the full cloud.
    pub cond_idx: Vec<usize>,
    /// Condition pooling neighbors: m * cond_k indices into the full cloud.
    pub cond_knn: Vec<usize>,
    /// Coordinates of the m condition points.
    pub cond_coords: Vec<[f64; 3]>,
}

/// Canonical order: lexicographic by coordinates, index as tiebreak.
fn canonical_order(coords: &[[f64; 3]]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&coords[a], &coords[b]);
        pa.partial_cmp(pb).unwrap().then(a.cmp(&b))
    });
    order
}

impl SceneGraph {
    /// Build the sampling structure for a cloud under the given config.
    ///
    /// FPS and k-NN tie-breaking run in canonical coordinate order, so the
    /// graph (and therefore the encoder output) is covariant under input
    /// permutations and invariant under rigid transforms of the cloud.
    /// Full-resolution neighbor lists are re-keyed to original row order.
    pub fn build(coords: &[[f64; 3]], cfg: &ModelConfig) -> Result<SceneGraph> {
        let n0 = coords.len();
        let order = canonical_order(coords);
        let mut inv = vec![0usize; n0];
        for (s, &o) in order.iter().enumerate() {
            inv[o] = s;
        }
        let sorted: Vec<[f64; 3]> = order.iter().map(|&i| coords[i]).collect();

        // attention at full resolution: chunk for original row p comes from
        // sorted position inv[p]; neighbor values map back through `order`
        let k0 = cfg.unet_k.min(n0);
        let attn0_sorted = knn_indices(&sorted, &sorted, k0)?;
        let mut attn0 = Vec::with_capacity(n0 * k0);
        for p in 0..n0 {
            let s = inv[p];
            attn0.extend(attn0_sorted[s * k0..(s + 1) * k0].iter().map(|&i| order[i]));
        }

        let mut stages = Vec::with_capacity(cfg.unet_channels.len() - 1);
        let mut parent_coords: Vec<[f64; 3]> = sorted.clone();
        let mut first_stage = true;
        for _stage in 1..cfg.unet_channels.len() {
            let n = parent_coords.len() / cfg.unet_down_ratio;
            if n == 0 {
                return Err(Error::InvalidArgument(format!(
                    "cloud of {n0} points is below the coarsest stage size"
                )));
            }
            let sel = farthest_point_sample(&parent_coords, n, 0)?;
            let coords_here: Vec<[f64; 3]> = sel.iter().map(|&i| parent_coords[i]).collect();
            let k = cfg.unet_k.min(parent_coords.len());
            let mut pool_knn = knn_indices(&parent_coords, &coords_here, k)?;
            let attn_knn = knn_indices(&coords_here, &coords_here, cfg.unet_k.min(n))?;
            let ik = cfg.interp_k.min(n);
            let up_sorted = knn_indices(&coords_here, &parent_coords, ik)?;
            let mut up_w_sorted = Vec::with_capacity(parent_coords.len() * ik);
            for (pi, chunk) in up_sorted.chunks(ik).enumerate() {
                let p = parent_coords[pi];
                let mut ws: Vec<f64> = chunk
                    .iter()
                    .map(|&ci| {
                        let q = coords_here[ci];
                        let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                            .sqrt();
                        1.0 / (d + 1e-8)
                    })
                    .collect();
                let total: f64 = ws.iter().sum();
                for w in ws.iter_mut() {
                    *w /= total;
                }
                up_w_sorted.extend(ws);
            }
            // the first stage's parent rows are the original cloud rows:
            // re-key pooling values and up-chunk order accordingly
            let (up_idx, up_w) = if first_stage {
                for i in pool_knn.iter_mut() {
                    *i = order[*i];
                }
                let mut up_idx = Vec::with_capacity(n0 * ik);
                let mut up_w = Vec::with_capacity(n0 * ik);
                for p in 0..n0 {
                    let s = inv[p];
                    up_idx.extend_from_slice(&up_sorted[s * ik..(s + 1) * ik]);
                    up_w.extend_from_slice(&up_w_sorted[s * ik..(s + 1) * ik]);
                }
                (up_idx, up_w)
            } else {
                (up_sorted, up_w_sorted)
            };
            stages.push(StageGraph {
                n,
                coords: coords_here.clone(),
                pool_knn,
                attn_knn,
                up_idx,
                up_w,
            });
            parent_coords = coords_here;
            first_stage = false;
        }

        // condition downsample over the full cloud
        let m = cfg.cond_points.min(n0);
        let sel = farthest_point_sample(&sorted, m, 0)?;
        let cond_coords: Vec<[f64; 3]> = sel.iter().map(|&i| sorted[i]).collect();
        let ck = cfg.cond_k.min(n0);
        let cond_knn_sorted = knn_indices(&sorted, &cond_coords, ck)?;
        let cond_knn: Vec<usize> = cond_knn_sorted.iter().map(|&i| order[i]).collect();
        let cond_idx: Vec<usize> = sel.iter().map(|&i| order[i]).collect();
        Ok(SceneGraph {
            attn0,
            n0,
            stages,
            cond_idx,
            cond_knn,
            cond_coords,
        })
    }

    /// The up-path structure that maps stage `si` rows back to its parent
    /// resolution, where parent row order is original for si == 0.
    fn up_to_parent(&self, si: usize) -> (&[usize], &[f64]) {
        (&self.stages[si].up_idx, &self.stages[si].up_w)
    }
}

/// One self-attention block: x + Wo(SA(LN(x))) over fixed neighborhoods.
fn pt_block(fw: &Forward, x: &Var, knn: &[usize], k: usize, prefix: &str) -> Result<Var> {
    let h = fw.layer_norm(x, &format!("{prefix}.ln"))?;
    let q = fw.linear(&h, &format!("{prefix}.q"))?;
    let key = fw.linear(&h, &format!("{prefix}.k"))?;
    let v = fw.linear(&h, &format!("{prefix}.v"))?;
    let attn = q.knn_attention(&key, &v, knn, k)?;
    let out = fw.linear(&attn, &format!("{prefix}.o"))?;
    x.add(&out)
}

/// Mean-pool rows of `x` over fixed k-NN lists (graph edition of knn_pool).
pub fn pool_rows(x: &Var, knn: &[usize], k: usize) -> Result<Var> {
    let rows = x.gather_rows(knn)?;
    let m = knn.len() / k;
    let f = x.shape()[1];
    rows.reshape(&[m, k, f])?.mean_axis(1)
}

/// Per-point features for a scene: (N, F), differentiable into all
/// `scene.*` parameters.
pub fn scene_encode(
    fw: &Forward,
    cfg: &ModelConfig,
    graph: &SceneGraph,
    input: &Tensor,
) -> Result<Var> {
    if input.rank() != 2 || input.shape()[0] != graph.n0 || input.shape()[1] != 6 {
        return Err(Error::InvalidShape {
            op: "scene_encode",
            shape: input.shape().to_vec(),
            reason: format!("expected ({}, 6)", graph.n0),
        });
    }
    if !input.is_finite() {
        return Err(Error::NonFinite("scene_encode input".into()));
    }
    let x = Var::constant(input.clone());
    let mut feats = fw.linear(&x, "scene.embed")?;
    let k0 = cfg.unet_k.min(graph.n0);
    for b in 0..cfg.unet_blocks[0] {
        feats = pt_block(fw, &feats, &graph.attn0, k0, &format!("scene.enc0.blk{b}"))?;
    }
    // encoder path
    let mut skips: Vec<Var> = vec![feats.clone()];
    for (si, stage) in graph.stages.iter().enumerate() {
        let k = cfg.unet_k.min(if si == 0 { graph.n0 } else { graph.stages[si - 1].n });
        let pooled = pool_rows(&feats, &stage.pool_knn, k)?;
        feats = fw.linear(&pooled, &format!("scene.down{si}"))?.relu()?;
        let ka = cfg.unet_k.min(stage.n);
        for b in 0..cfg.unet_blocks[si + 1] {
            feats = pt_block(fw, &feats, &stage.attn_knn, ka, &format!("scene.enc{}.blk{b}", si + 1))?;
        }
        skips.push(feats.clone());
    }
    // decoder path with residual skip connections
    for si in (0..graph.stages.len()).rev() {
        let (up_idx, up_w) = graph.up_to_parent(si);
        let ik = cfg.interp_k.min(graph.stages[si].n);
        let gathered = feats.gather_rows(up_idx)?;
        let parent_n = up_idx.len() / ik;
        let c = feats.shape()[1];
        let w = Var::constant(Tensor::from_raw(up_w.to_vec(), vec![parent_n * ik, 1]));
        let interp = gathered
            .mul(&w)?
            .reshape(&[parent_n, ik, c])?
            .sum_axis(1)?;
        let lifted = fw.linear(&interp, &format!("scene.up{si}"))?;
        feats = lifted.add(&skips[si])?;
        let (knn, n_here) = if si == 0 {
            (&graph.attn0, graph.n0)
        } else {
            (&graph.stages[si - 1].attn_knn, graph.stages[si - 1].n)
        };
        let ka = cfg.unet_k.min(n_here);
        for b in 0..cfg.unet_decoder_blocks {
            feats = pt_block(fw, &feats, knn, ka, &format!("scene.dec{si}.blk{b}"))?;
        }
    }
    // output head: relu then linear to the teacher feature width
    fw.linear(&feats.relu()?, "scene.head")
}

/// Register every `scene.*` parameter for the configured architecture.
pub fn init_scene_params(ps: &mut super::params::ParamSet, cfg: &ModelConfig, seed: u64) {
    let ch = &cfg.unet_channels;
    ps.insert_linear("scene.embed", 6, ch[0], seed);
    let block = |ps: &mut super::params::ParamSet, prefix: &str, dim: usize| {
        ps.insert_layer_norm(&format!("{prefix}.ln"), dim);
        ps.insert_linear(&format!("{prefix}.q"), dim, dim, seed);
        ps.insert_linear(&format!("{prefix}.k"), dim, dim, seed);
        ps.insert_linear(&format!("{prefix}.v"), dim, dim, seed);
        ps.insert_linear(&format!("{prefix}.o"), dim, dim, seed);
    };
    for b in 0..cfg.unet_blocks[0] {
        block(ps, &format!("scene.enc0.blk{b}"), ch[0]);
    }
    for si in 1..ch.len() {
        ps.insert_linear(&format!("scene.down{}", si - 1), ch[si - 1], ch[si], seed);
        for b in 0..cfg.unet_blocks[si] {
            block(ps, &format!("scene.enc{si}.blk{b}"), ch[si]);
        }
    }
    for si in (0..ch.len() - 1).rev() {
        ps.insert_linear(&format!("scene.up{si}"), ch[si + 1], ch[si], seed);
        for b in 0..cfg.unet_decoder_blocks {
            block(ps, &format!("scene.dec{si}.blk{b}"), ch[si]);
        }
    }
    ps.insert_linear("scene.head", ch[0], cfg.feature_dim, seed);
}
