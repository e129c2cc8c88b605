//! Neural components: scene U-Net, condition fusion, motion cVAE, and the
//! training objective.

mod condition;
mod losses;
mod motion_vae;
mod params;
mod unet;

pub use condition::{condition_forward, ConditionOut};
pub use losses::{cross_entropy, l1_masked, loss_distill, loss_kl, mse, LossBreakdown, LossWeights};
pub use motion_vae::{motion_decode, motion_encode, reparameterize, sinusoidal_queries};
pub use params::{Forward, ParamSet};
pub use unet::{init_scene_params, pool_rows, scene_encode, SceneGraph, StageGraph};

use crate::autodiff::{Tensor, Var};
use crate::body::{canonical_mesh, default_template, MotionSeq, FRAME_PARAMS};
use crate::error::{Error, Result};
use crate::text::{template_lexicon, TextEncoder, Vocabulary};
use crate::world::DatasetSample;
use rand_chacha::ChaCha8Rng;

/// Architecture scale. Defaults are the desk scale; the full-scale values
/// remain legal configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub table_seed: u64,
    pub unet_channels: Vec<usize>,
    pub unet_blocks: Vec<usize>,
    pub unet_decoder_blocks: usize,
    pub unet_down_ratio: usize,
    pub unet_k: usize,
    pub interp_k: usize,
    pub cond_points: usize,
    pub cond_k: usize,
    pub cond_dim: usize,
    pub fusion_dim: usize,
    pub gru_hidden: usize,
    pub latent_dim: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub dec_model_dim: usize,
    pub dec_ffn_dim: usize,
    pub t_frames: usize,
    pub text_len: usize,
    pub text_trainable: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 64,
            table_seed: 42,
            unet_channels: vec![32, 48, 64],
            unet_blocks: vec![1, 1, 1],
            unet_decoder_blocks: 1,
            unet_down_ratio: 4,
            unet_k: 8,
            interp_k: 3,
            cond_points: 256,
            cond_k: 8,
            cond_dim: 64,
            fusion_dim: 64,
            gru_hidden: 64,
            latent_dim: 32,
            dec_layers: 2,
            dec_heads: 4,
            dec_model_dim: 64,
            dec_ffn_dim: 128,
            t_frames: 30,
            text_len: 16,
            text_trainable: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unet_channels.is_empty()
            || self.unet_blocks.len() != self.unet_channels.len()
            || self.unet_down_ratio < 2
            || self.dec_model_dim % self.dec_heads != 0
            || self.feature_dim == 0
            || self.t_frames == 0
        {
            return Err(Error::Config("invalid model configuration".into()));
        }
        Ok(())
    }
}

/// Parameters, text space, and configuration of one model instance.
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ParamSet,
    /// The frozen teacher-aligned text encoder (always the target space of
    /// distillation, even when the model's text branch is trainable).
    pub text: TextEncoder,
}

impl ModelBundle {
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<ModelBundle> {
        config.validate()?;
        let vocab = Vocabulary::from_lexicon(&template_lexicon());
        let text = TextEncoder::frozen(vocab.clone(), config.feature_dim, config.table_seed);
        let mut params = ParamSet::new();
        unet::init_scene_params(&mut params, &config, init_seed);
        // closed-vocabulary pretraining head (ablation variant)
        params.insert_linear("scene.cvhead", config.feature_dim, 10, init_seed);
        condition::init_condition_params(&mut params, &config, init_seed);
        motion_vae::init_motion_params(&mut params, &config, init_seed);
        if config.text_trainable {
            let t = TextEncoder::trainable(vocab, config.feature_dim, config.table_seed);
            params.insert("text.table", t.table);
        }
        Ok(ModelBundle { config, params, text })
    }

    /// The text encoder view used by the condition module.
    fn branch_encoder(&self) -> TextEncoder {
        if self.config.text_trainable {
            TextEncoder {
                vocab: self.text.vocab.clone(),
                table: self.params.get("text.table").clone(),
                frozen: false,
            }
        } else {
            self.text.clone()
        }
    }

    pub fn build_graph(&self, coords: &[[f64; 3]]) -> Result<SceneGraph> {
        SceneGraph::build(coords, &self.config)
    }

    pub fn condition<'a>(
        &'a self,
        fw: &Forward<'a>,
        graph: &SceneGraph,
        cloud_input: &Tensor,
        tokens: &[u32],
        beta: &[f64],
    ) -> Result<ConditionOut> {
        condition_forward(fw, &self.config, &self.branch_encoder(), graph, cloud_input, tokens, beta)
    }

    /// The full per-sample objective with its term breakdown.
    ///
    /// `total = trans + l_rot*rot + l_pose*pose + l_mesh*mesh + l_kl*kl
    ///        + l_action*action + l_center*center + l_bbox*bbox + l_class*class`,
    /// accumulated left to right; terms with a zero weight are skipped
    /// entirely (their parameters receive no gradient).
    pub fn sample_loss(
        &self,
        fw: &Forward,
        graph: &SceneGraph,
        sample: &DatasetSample,
        weights: &LossWeights,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, LossBreakdown)> {
        weights.validate()?;
        let cond = self.condition(
            fw,
            graph,
            &sample.cloud.as_input_tensor(),
            &sample.annotation.tokens,
            &sample.beta,
        )?;
        let gt = Var::constant(sample.motion.params.clone());
        let valid = &sample.motion.valid;
        let (mu, logvar) = motion_encode(fw, &self.config, &gt, valid, &cond.z_c)?;
        let z = reparameterize(&mu, &logvar, rng)?;
        let pred = motion_decode(fw, &self.config, &z, &cond.z_c)?;

        let l_trans = l1_masked(&pred.cols(0, 3)?, &gt.cols(0, 3)?, valid)?;
        let l_rot = l1_masked(&pred.cols(3, 9)?, &gt.cols(3, 9)?, valid)?;
        let l_pose = l1_masked(&pred.cols(9, FRAME_PARAMS)?, &gt.cols(9, FRAME_PARAMS)?, valid)?;
        let tpl = default_template();
        let beta_var = Var::constant(Tensor::from_raw(sample.beta.to_vec(), vec![10]));
        let gt_masked = gt.masked_select_rows(valid)?;
        let pred_masked = pred.masked_select_rows(valid)?;
        let mesh_gt = canonical_mesh(tpl, &gt_masked, &beta_var)?;
        let mesh_pred = canonical_mesh(tpl, &pred_masked, &beta_var)?;
        let l_mesh = mesh_pred.sub(&mesh_gt)?.abs()?.mean_all()?;
        let l_kl = loss_kl(&mu, &logvar)?;
        let l_action = cross_entropy(&cond.action_logits, sample.annotation.action.index())?;
        let l_class = cross_entropy(&cond.class_logits, sample.annotation.goal_class as usize - 1)?;
        let center_gt = Var::constant(Tensor::from_raw(sample.goal_center.to_vec(), vec![1, 3]));
        let l_center = mse(&cond.center, &center_gt)?;
        let mut bbox_gt = sample.goal_aabb.min.to_vec();
        bbox_gt.extend_from_slice(&sample.goal_aabb.max);
        let bbox_gt = Var::constant(Tensor::from_raw(bbox_gt, vec![1, 6]));
        let l_bbox = mse(&cond.bbox, &bbox_gt)?;

        let mut total = l_trans.clone();
        for (term, weight) in [
            (&l_rot, weights.rot),
            (&l_pose, weights.pose),
            (&l_mesh, weights.mesh),
            (&l_kl, weights.kl),
            (&l_action, weights.action),
            (&l_center, weights.center),
            (&l_bbox, weights.bbox),
            (&l_class, weights.class),
        ] {
            if weight != 0.0 {
                total = total.add(&term.scale(weight)?)?;
            }
        }
        let breakdown = LossBreakdown {
            total: total.value().item(),
            trans: l_trans.value().item(),
            rot: l_rot.value().item(),
            pose: l_pose.value().item(),
            mesh: l_mesh.value().item(),
            kl: l_kl.value().item(),
            action: l_action.value().item(),
            center: l_center.value().item(),
            bbox: l_bbox.value().item(),
            class: l_class.value().item(),
        };
        Ok((total, breakdown))
    }

    /// K decoded motions from seeded standard-normal latents sharing one
    /// condition.
    pub fn sample_motions(
        &self,
        graph: &SceneGraph,
        cloud_input: &Tensor,
        tokens: &[u32],
        beta: &[f64],
        k: usize,
        seed: u64,
    ) -> Result<Vec<Tensor>> {
        let fw = Forward::eval(&self.params);
        let cond = self.condition(&fw, graph, cloud_input, tokens, beta)?;
        let mut out = Vec::with_capacity(k);
        for j in 0..k {
            let mut rng = crate::rng::stream(seed, "gen_z", &[j as u64]);
            let z = reparameterize(
                &Var::constant(Tensor::zeros(&[1, self.config.latent_dim])),
                &Var::constant(Tensor::zeros(&[1, self.config.latent_dim])),
                &mut rng,
            )?;
            let pred = motion_decode(&fw, &self.config, &z, &cond.z_c)?;
            out.push(pred.value().clone());
        }
        Ok(out)
    }

    /// Deterministic reconstruction: decode from the posterior mean.
    pub fn reconstruct(&self, graph: &SceneGraph, sample: &DatasetSample) -> Result<MotionSeq> {
        let fw = Forward::eval(&self.params);
        let cond = self.condition(
            &fw,
            graph,
            &sample.cloud.as_input_tensor(),
            &sample.annotation.tokens,
            &sample.beta,
        )?;
        let gt = Var::constant(sample.motion.params.clone());
        let (mu, _) = motion_encode(&fw, &self.config, &gt, &sample.motion.valid, &cond.z_c)?;
        let pred = motion_decode(&fw, &self.config, &mu, &cond.z_c)?;
        MotionSeq::new(pred.value().clone(), sample.motion.valid.clone(), sample.annotation.action)
    }

    /// Distillation objective for one scene (pretraining).
    pub fn distill_loss(
        &self,
        fw: &Forward,
        graph: &SceneGraph,
        cloud_input: &Tensor,
        targets: &Tensor,
        coverage: &[bool],
    ) -> Result<Var> {
        let student = scene_encode(fw, &self.config, graph, cloud_input)?;
        loss_distill(&student, &Var::constant(targets.clone()), coverage)
    }

    /// Closed-vocabulary pretraining objective: per-point cross-entropy of
    /// a linear head over the 10 class ids (background + 9 objects).
    pub fn closed_vocab_loss(
        &self,
        fw: &Forward,
        graph: &SceneGraph,
        cloud_input: &Tensor,
        class_ids: &[u8],
    ) -> Result<Var> {
        let feats = scene_encode(fw, &self.config, graph, cloud_input)?;
        let logits = fw.linear(&feats, "scene.cvhead")?; // (N, 10)
        let lsm = logits.log_softmax()?;
        let n = class_ids.len();
        // gather the target-class log-probabilities via a one-hot mask
        let mut mask = vec![0.0; n * 10];
        for (i, &c) in class_ids.iter().enumerate() {
            mask[i * 10 + c as usize] = 1.0;
        }
        let mask = Var::constant(Tensor::from_raw(mask, vec![n, 10]));
        lsm.mul(&mask)?.sum_axis(1)?.mean_all()?.neg()
    }
}
