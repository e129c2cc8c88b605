//! Run configuration: a strict plain-text `key = value` schema shared by
//! dataset generation, training, sampling, and evaluation. Unknown keys are
//! rejected so a typo cannot silently change an experiment.

use crate::body::ActionId;
use crate::error::{Error, Result};
use crate::model::{LossWeights, ModelConfig};
use crate::world::{DatasetConfig, RenderConfig, SceneGenConfig};

/// Model/pretraining variant selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Aligned frozen text space, distillation pretraining, all regularizers.
    Full,
    /// Full minus the bbox regularizer.
    BboxOff,
    /// Full minus the class regularizer.
    ClassOff,
    /// Trainable unaligned text table instead of the frozen aligned one.
    UnalignedText,
    /// Closed-vocabulary cross-entropy pretraining instead of distillation.
    ClosedVocab,
    /// The prior-generation reference: closed-vocabulary pretraining,
    /// trainable unaligned text, and no bbox/class regularizers.
    Baseline,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::BboxOff => "bbox_off",
            Variant::ClassOff => "class_off",
            Variant::UnalignedText => "unaligned_text",
            Variant::ClosedVocab => "closed_vocab",
            Variant::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Ok(match s {
            "full" => Variant::Full,
            "bbox_off" => Variant::BboxOff,
            "class_off" => Variant::ClassOff,
            "unaligned_text" => Variant::UnalignedText,
            "closed_vocab" => Variant::ClosedVocab,
            "baseline" => Variant::Baseline,
            other => return Err(Error::Config(format!("unknown variant '{other}'"))),
        })
    }

    pub fn all_ablation() -> [Variant; 5] {
        [
            Variant::Full,
            Variant::BboxOff,
            Variant::ClassOff,
            Variant::UnalignedText,
            Variant::ClosedVocab,
        ]
    }

    /// Whether pretraining distills teacher features (vs closed-vocab CE).
    pub fn distills(self) -> bool {
        !matches!(self, Variant::ClosedVocab | Variant::Baseline)
    }

    pub fn text_trainable(self) -> bool {
        matches!(self, Variant::UnalignedText | Variant::Baseline)
    }
}

macro_rules! config_schema {
    ($(($field:ident, $key:literal, $ty:ty, $default:expr, $doc:literal)),* $(,)?) => {
        /// Every run-affecting knob, flat-keyed.
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $(#[doc = $doc] pub $field: $ty,)*
        }

        impl Default for Config {
            fn default() -> Self {
                Config { $($field: $default,)* }
            }
        }

        impl Config {
            /// Canonical serialization (also the config echo in manifests
            /// and checkpoints).
            pub fn serialize(&self) -> String {
                let mut out = String::new();
                $(
                    out.push_str($key);
                    out.push_str(" = ");
                    out.push_str(&ConfigValue::encode(&self.$field));
                    out.push('\n');
                )*
                out
            }

            /// Parse `key = value` lines; `#` starts a comment; keys not in
            /// the schema are rejected.
            pub fn parse(text: &str) -> Result<Config> {
                let mut cfg = Config::default();
                for (lineno, raw) in text.lines().enumerate() {
                    let line = raw.split('#').next().unwrap().trim();
                    if line.is_empty() {
                        continue;
                    }
                    let (key, value) = line.split_once('=').ok_or_else(|| {
                        Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
                    })?;
                    let key = key.trim();
                    let value = value.trim();
                    match key {
                        $($key => {
                            cfg.$field = ConfigValue::decode(value).map_err(|e| {
                                Error::Config(format!("line {}: key '{}': {e}", lineno + 1, key))
                            })?;
                        })*
                        other => {
                            return Err(Error::Config(format!(
                                "line {}: unknown key '{other}'",
                                lineno + 1
                            )))
                        }
                    }
                }
                cfg.validate()?;
                Ok(cfg)
            }
        }
    };
}

config_schema! {
    (seed, "seed", u64, 0, "master seed for the whole run"),
    (variant, "variant", Variant, Variant::Full, "model/pretraining variant"),
    // world
    (n_scenes, "n_scenes", usize, 100, "number of generated scenes"),
    (n_points, "n_points", usize, 2048, "points sampled per scene cloud"),
    (actions, "actions", Vec<ActionId>, vec![ActionId::Walk, ActionId::Sit, ActionId::StandUp, ActionId::Lie], "actions synthesized per scene (comma list)"),
    (room_extent_min, "room_extent_min", f64, 4.5, "minimum room side length (m)"),
    (room_extent_max, "room_extent_max", f64, 7.0, "maximum room side length (m)"),
    (objects_min, "objects_min", usize, 4, "minimum objects per scene"),
    (objects_max, "objects_max", usize, 10, "maximum objects per scene"),
    (relational_prob, "relational_prob", f64, 0.6, "probability of a duplicated-class scene"),
    (background_frac, "background_frac", f64, 0.35, "fraction of points on floor/walls"),
    (n_views, "n_views", usize, 4, "teacher views per scene"),
    (image_size, "image_size", usize, 96, "teacher view resolution (square)"),
    (sigma_f, "sigma_f", f64, 0.01, "teacher feature noise std"),
    (t_frames, "t_frames", usize, 30, "padded motion length"),
    (text_len, "text_len", usize, 16, "max token sequence length"),
    (feature_dim, "feature_dim", usize, 64, "shared text/teacher feature width F"),
    (table_seed, "table_seed", u64, 42, "seed of the frozen text table"),
    (train_frac, "train_frac", f64, 0.8, "scene-level train split fraction"),
    // model
    (unet_channels, "unet_channels", Vec<usize>, vec![32, 48, 64], "U-Net stage widths"),
    (unet_blocks, "unet_blocks", Vec<usize>, vec![1, 1, 1], "encoder attention blocks per stage"),
    (unet_decoder_blocks, "unet_decoder_blocks", usize, 1, "decoder attention blocks per stage"),
    (unet_down_ratio, "unet_down_ratio", usize, 4, "FPS downsample ratio per stage"),
    (unet_k, "unet_k", usize, 8, "attention neighborhood size"),
    (interp_k, "interp_k", usize, 3, "upsampling interpolation neighbors"),
    (cond_points, "cond_points", usize, 256, "condition downsample point count m"),
    (cond_k, "cond_k", usize, 8, "condition pooling neighborhood"),
    (cond_dim, "cond_dim", usize, 64, "condition latent width C"),
    (fusion_dim, "fusion_dim", usize, 64, "post-fusion hidden width"),
    (gru_hidden, "gru_hidden", usize, 64, "motion encoder GRU width"),
    (latent_dim, "latent_dim", usize, 32, "cVAE latent width Z"),
    (dec_layers, "dec_layers", usize, 2, "motion decoder layers"),
    (dec_heads, "dec_heads", usize, 4, "motion decoder heads"),
    (dec_model_dim, "dec_model_dim", usize, 64, "motion decoder model width"),
    (dec_ffn_dim, "dec_ffn_dim", usize, 128, "motion decoder feed-forward width"),
    // training
    (epochs, "epochs", usize, 40, "cVAE training epochs"),
    (batch_size, "batch_size", usize, 8, "cVAE batch size"),
    (lr, "lr", f64, 1e-4, "base learning rate"),
    (scene_lr, "scene_lr", f64, 1e-5, "scene-encoder fine-tune learning rate"),
    (pretrain_epochs, "pretrain_epochs", usize, 40, "pretraining epochs"),
    (pretrain_batch, "pretrain_batch", usize, 4, "pretraining batch size (scenes)"),
    (pretrain_lr, "pretrain_lr", f64, 1e-3, "pretraining learning rate"),
    (pretrain_stop_loss, "pretrain_stop_loss", f64, 0.0, "early-stop threshold on the pretraining loss (0 disables)"),
    (augment, "augment", bool, true, "apply rigid augmentation during cVAE training"),
    (lambda_rot, "lambda_rot", f64, 1.0, "orientation reconstruction weight"),
    (lambda_pose, "lambda_pose", f64, 10.0, "pose reconstruction weight"),
    (lambda_mesh, "lambda_mesh", f64, 10.0, "canonical vertex reconstruction weight"),
    (lambda_kl, "lambda_kl", f64, 0.1, "KL weight"),
    (lambda_action, "lambda_action", f64, 0.5, "action classification weight"),
    (lambda_center, "lambda_center", f64, 0.1, "goal center regression weight"),
    (lambda_bbox, "lambda_bbox", f64, 0.1, "goal bbox regression weight"),
    (lambda_class, "lambda_class", f64, 0.5, "goal class classification weight"),
    // evaluation
    (eval_k, "eval_k", usize, 10, "samples per condition for the goal metric"),
    (eval_k_diversity, "eval_k_diversity", usize, 20, "samples per condition for APD"),
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.scene_lr <= 0.0 || self.pretrain_lr <= 0.0 {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.batch_size == 0 || self.pretrain_batch == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.train_frac) {
            return Err(Error::Config("train_frac must lie in [0, 1]".into()));
        }
        self.loss_weights().validate()?;
        self.model_config().validate()?;
        if self.actions.is_empty() {
            return Err(Error::Config("actions must be nonempty".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        let mut w = LossWeights {
            rot: self.lambda_rot,
            pose: self.lambda_pose,
            mesh: self.lambda_mesh,
            kl: self.lambda_kl,
            action: self.lambda_action,
            center: self.lambda_center,
            bbox: self.lambda_bbox,
            class: self.lambda_class,
        };
        match self.variant {
            Variant::BboxOff => w.bbox = 0.0,
            Variant::ClassOff => w.class = 0.0,
            Variant::Baseline => {
                w.bbox = 0.0;
                w.class = 0.0;
            }
            _ => {}
        }
        w
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.feature_dim,
            table_seed: self.table_seed,
            unet_channels: self.unet_channels.clone(),
            unet_blocks: self.unet_blocks.clone(),
            unet_decoder_blocks: self.unet_decoder_blocks,
            unet_down_ratio: self.unet_down_ratio,
            unet_k: self.unet_k,
            interp_k: self.interp_k,
            cond_points: self.cond_points,
            cond_k: self.cond_k,
            cond_dim: self.cond_dim,
            fusion_dim: self.fusion_dim,
            gru_hidden: self.gru_hidden,
            latent_dim: self.latent_dim,
            dec_layers: self.dec_layers,
            dec_heads: self.dec_heads,
            dec_model_dim: self.dec_model_dim,
            dec_ffn_dim: self.dec_ffn_dim,
            t_frames: self.t_frames,
            text_len: self.text_len,
            text_trainable: self.variant.text_trainable(),
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            n_scenes: self.n_scenes,
            actions: self.actions.clone(),
            scene: SceneGenConfig {
                n_points: self.n_points,
                room_extent_min: self.room_extent_min,
                room_extent_max: self.room_extent_max,
                objects_min: self.objects_min,
                objects_max: self.objects_max,
                relational_prob: self.relational_prob,
                background_frac: self.background_frac,
            },
            render: RenderConfig {
                n_views: self.n_views,
                image_size: self.image_size,
                sigma_f: self.sigma_f,
            },
            t_frames: self.t_frames,
            text_len: self.text_len,
            feature_dim: self.feature_dim,
            table_seed: self.table_seed,
            train_frac: self.train_frac,
        }
    }
}

/// Field-level encode/decode for the plain-text schema.
trait ConfigValue: Sized {
    fn encode(&self) -> String;
    fn decode(s: &str) -> std::result::Result<Self, String>;
}

impl ConfigValue for u64 {
    fn encode(&self) -> String {
        self.to_string()
    }
    fn decode(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("expected integer, got '{s}'"))
    }
}

impl ConfigValue for usize {
    fn encode(&self) -> String {
        self.to_string()
    }
    fn decode(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("expected integer, got '{s}'"))
    }
}

impl ConfigValue for f64 {
    fn encode(&self) -> String {
        // round-trippable float formatting
        format!("{self:?}")
    }
    fn decode(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("expected float, got '{s}'"))
    }
}

impl ConfigValue for bool {
    fn encode(&self) -> String {
        self.to_string()
    }
    fn decode(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(format!("expected true/false, got '{other}'")),
        }
    }
}

impl ConfigValue for Variant {
    fn encode(&self) -> String {
        self.tag().to_string()
    }
    fn decode(s: &str) -> std::result::Result<Self, String> {
        Variant::parse(s).map_err(|e| e.to_string())
    }
}

impl ConfigValue for Vec<usize> {
    fn encode(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
    fn decode(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| format!("bad list entry '{p}'")))
            .collect()
    }
}

impl ConfigValue for Vec<ActionId> {
    fn encode(&self) -> String {
        self.iter()
            .map(|a| a.label().replace(' ', "_"))
            .collect::<Vec<_>>()
            .join(",")
    }
    fn decode(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| match p.trim() {
                "walk" => Ok(ActionId::Walk),
                "sit" => Ok(ActionId::Sit),
                "stand_up" => Ok(ActionId::StandUp),
                "lie" => Ok(ActionId::Lie),
                other => Err(format!("unknown action '{other}'")),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_identity() {
        let cfg = Config::default();
        let text = cfg.serialize();
        let parsed = Config::parse(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.serialize(), text);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = Config::parse("learning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = Config::parse("# comment\nseed = 7\nvariant = closed_vocab # inline\nunet_channels = 8,12,16\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.variant, Variant::ClosedVocab);
        assert_eq!(cfg.unet_channels, vec![8, 12, 16]);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(Config::parse("seed = banana\n").is_err());
        assert!(Config::parse("lr = 0.0\n").is_err());
        assert!(Config::parse("variant = nonsense\n").is_err());
        assert!(Config::parse("seed 7\n").is_err());
    }

    #[test]
    fn variant_weight_overrides() {
        let mut cfg = Config::default();
        cfg.variant = Variant::BboxOff;
        assert_eq!(cfg.loss_weights().bbox, 0.0);
        assert!(cfg.loss_weights().class > 0.0);
        cfg.variant = Variant::Baseline;
        let w = cfg.loss_weights();
        assert_eq!(w.bbox, 0.0);
        assert_eq!(w.class, 0.0);
        assert!(cfg.model_config().text_trainable);
    }

    #[test]
    fn float_encoding_roundtrips() {
        let mut cfg = Config::default();
        cfg.sigma_f = 0.1 + 0.2; // not exactly representable sum
        let parsed = Config::parse(&cfg.serialize()).unwrap();
        assert_eq!(parsed.sigma_f.to_bits(), cfg.sigma_f.to_bits());
    }
}
