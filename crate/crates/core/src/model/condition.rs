//! Condition module: frozen text branch, scene branch with FPS/k-NN
//! downsampling, joint self-attention fusion, and auxiliary goal heads.

use super::params::Forward;
use super::unet::{pool_rows, scene_encode, SceneGraph};
use super::ModelConfig;
use crate::autodiff::{Tensor, Var};
use crate::error::Result;
use crate::text::TextEncoder;

pub struct ConditionOut {
    /// (1, C) conditional latent.
    pub z_c: Var,
    pub action_logits: Var,
    pub class_logits: Var,
    pub center: Var,
    pub bbox: Var,
    /// (m, F) downsampled scene features before fusion (metrics hook).
    pub point_feats: Var,
    /// (1, F) pooled text embedding.
    pub pooled_text: Var,
    /// (N, F) full-resolution encoder output.
    pub scene_feats: Var,
}

/// Full condition pass for one sample.
pub fn condition_forward(
    fw: &Forward,
    cfg: &ModelConfig,
    text: &TextEncoder,
    graph: &SceneGraph,
    cloud_input: &Tensor,
    tokens: &[u32],
    beta: &[f64],
) -> Result<ConditionOut> {
    let f = cfg.feature_dim;
    // scene branch: U-Net then FPS + k-NN average pooling to m points
    let scene_feats = scene_encode(fw, cfg, graph, cloud_input)?;
    let m = graph.cond_idx.len();
    let ck = graph.cond_knn.len() / m;
    let point_feats = pool_rows(&scene_feats, &graph.cond_knn, ck)?; // (m, F)

    // text branch: frozen constants, or a trainable table leaf
    let table = if text.frozen {
        Var::constant(text.table.clone())
    } else {
        fw.p("text.table")
    };
    let (pooled_text, token_rows) = text.encode_tokens_var(&table, tokens)?;
    let pooled_text = pooled_text.reshape(&[1, f])?;
    let n_tok = token_rows.shape()[0];

    // fusion: concatenate token and point features (with branch type
    // embeddings) and run one self-attention layer
    let type_text = fw.p("cond.type_text").reshape(&[1, f])?;
    let type_point = fw.p("cond.type_point").reshape(&[1, f])?;
    let seq = Var::concat(
        &[&token_rows.add(&type_text)?, &point_feats.add(&type_point)?],
        0,
    )?; // (L, F)
    let q = fw.linear(&seq, "cond.fuse.q")?;
    let k = fw.linear(&seq, "cond.fuse.k")?;
    let v = fw.linear(&seq, "cond.fuse.v")?;
    let scale = 1.0 / (f as f64).sqrt();
    let scores = q.matmul(&k.transpose()?)?.scale(scale)?;
    let attn = scores.softmax()?.matmul(&v)?;
    let fused_seq = seq.add(&fw.linear(&attn, "cond.fuse.o")?)?;

    // post-fusion: point rows joined with coordinates -> dense relu ->
    // linear -> pooled fused scene feature
    let fused_points = fused_seq.rows(n_tok, n_tok + m)?;
    let coord_data: Vec<f64> = graph.cond_coords.iter().flatten().copied().collect();
    let coords = Var::constant(Tensor::from_raw(coord_data, vec![m, 3]));
    let joined = Var::concat(&[&fused_points, &coords], 1)?;
    let hidden = fw.linear(&joined, "cond.post1")?.relu()?;
    let per_point = fw.linear(&hidden, "cond.post2")?;
    let fused_scene = per_point.mean_axis(0)?.reshape(&[1, cfg.fusion_dim])?;

    // final: concatenate fused scene, pooled text, and body shape
    let beta_row = Var::constant(Tensor::from_raw(beta.to_vec(), vec![1, beta.len()]));
    let joined = Var::concat(&[&fused_scene, &pooled_text, &beta_row], 1)?;
    let z_c = fw.linear(&joined, "cond.zc")?;

    // auxiliary linear heads on z_c
    let action_logits = fw.linear(&z_c, "cond.head_action")?;
    let class_logits = fw.linear(&z_c, "cond.head_class")?;
    let center = fw.linear(&z_c, "cond.head_center")?;
    let bbox = fw.linear(&z_c, "cond.head_bbox")?;
    Ok(ConditionOut {
        z_c,
        action_logits,
        class_logits,
        center,
        bbox,
        point_feats,
        pooled_text,
        scene_feats,
    })
}

pub fn init_condition_params(ps: &mut super::params::ParamSet, cfg: &ModelConfig, seed: u64) {
    let f = cfg.feature_dim;
    // branch type embeddings start at zero so fusion begins from the raw
    // aligned features
    ps.insert("cond.type_text", Tensor::zeros(&[f]));
    ps.insert("cond.type_point", Tensor::zeros(&[f]));
    ps.insert_linear("cond.fuse.q", f, f, seed);
    ps.insert_linear("cond.fuse.k", f, f, seed);
    ps.insert_linear("cond.fuse.v", f, f, seed);
    ps.insert_linear("cond.fuse.o", f, f, seed);
    ps.insert_linear("cond.post1", f + 3, cfg.fusion_dim, seed);
    ps.insert_linear("cond.post2", cfg.fusion_dim, cfg.fusion_dim, seed);
    ps.insert_linear("cond.zc", cfg.fusion_dim + f + 10, cfg.cond_dim, seed);
    ps.insert_linear("cond.head_action", cfg.cond_dim, 4, seed);
    ps.insert_linear("cond.head_class", cfg.cond_dim, 9, seed);
    ps.insert_linear("cond.head_center", cfg.cond_dim, 3, seed);
    ps.insert_linear("cond.head_bbox", cfg.cond_dim, 6, seed);
}
