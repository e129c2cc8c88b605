//! The two-phase schedule: distillation (or closed-vocabulary) pretraining
//! of the scene encoder, then cVAE training with all parameters and a
//! reduced scene-encoder rate. Batches parallelize across samples with a
//! deterministic ordered gradient reduction.

use super::adam::{adam_step, AdamState};
use super::checkpoint::{Checkpoint, Phase};
use crate::autodiff::Tensor;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::fuse_multiview;
use crate::model::{Forward, LossBreakdown, ModelBundle, SceneGraph};
use crate::world::{augment, render_views, Dataset, DatasetSample, RenderConfig, Split};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub columns: Vec<f64>,
    pub wall_s: f64,
}

/// Render the epoch line: `epoch <i> <name>=<value>... wall_s=<t>`.
pub fn format_epoch_line(phase: &str, names: &[&str], log: &EpochLog) -> String {
    let mut line = format!("{phase} epoch {:>3}", log.epoch);
    for (n, v) in names.iter().zip(&log.columns) {
        line.push_str(&format!(" {n}={v:.6}"));
    }
    line.push_str(&format!(" wall_s={:.2}", log.wall_s));
    line
}

/// Cached per-scene training inputs.
pub struct SceneData {
    pub scene_index: u32,
    pub graph: Arc<SceneGraph>,
    pub input: Tensor,
    /// Distillation targets and coverage (distill mode).
    pub targets: Option<(Tensor, Vec<bool>)>,
    pub class_ids: Vec<u8>,
}

/// Build graphs for every distinct scene in a sample list (ordered, parallel).
pub fn build_graphs(
    bundle: &ModelBundle,
    samples: &[DatasetSample],
) -> Result<HashMap<u32, Arc<SceneGraph>>> {
    let mut uniq: Vec<(u32, &DatasetSample)> = Vec::new();
    for s in samples {
        if !uniq.iter().any(|(i, _)| *i == s.scene_index) {
            uniq.push((s.scene_index, s));
        }
    }
    let graphs: Vec<(u32, Arc<SceneGraph>)> = uniq
        .par_iter()
        .map(|(i, s)| Ok((*i, Arc::new(bundle.build_graph(&s.cloud.coords)?))))
        .collect::<Result<_>>()?;
    Ok(graphs.into_iter().collect())
}

/// Prepare per-scene pretraining data; teacher views are re-rendered
/// deterministically from the stored scene spec and render seed.
fn prepare_scene_data(
    cfg: &Config,
    bundle: &ModelBundle,
    samples: &[DatasetSample],
    distill: bool,
) -> Result<Vec<SceneData>> {
    let mut uniq: Vec<&DatasetSample> = Vec::new();
    for s in samples {
        if !uniq.iter().any(|u| u.scene_index == s.scene_index) {
            uniq.push(s);
        }
    }
    let render_cfg = RenderConfig {
        n_views: cfg.n_views,
        image_size: cfg.image_size,
        sigma_f: cfg.sigma_f,
    };
    uniq.par_iter()
        .map(|s| {
            let graph = Arc::new(bundle.build_graph(&s.cloud.coords)?);
            let targets = if distill {
                let views = render_views(&s.scene, &bundle.text, &render_cfg, s.render_seed)?;
                let fused = fuse_multiview(&s.cloud, &views)?;
                if !fused.coverage.iter().any(|&c| c) {
                    return Err(Error::InvalidArgument(format!(
                        "scene {} has no covered points",
                        s.scene_index
                    )));
                }
                Some((fused.features, fused.coverage))
            } else {
                None
            };
            Ok(SceneData {
                scene_index: s.scene_index,
                graph,
                input: s.cloud.as_input_tensor(),
                targets,
                class_ids: s.cloud.class_id.clone(),
            })
        })
        .collect()
}

fn merge_grads(
    per_sample: Vec<HashMap<String, Tensor>>,
) -> HashMap<String, Tensor> {
    let n = per_sample.len() as f64;
    let mut merged: HashMap<String, Tensor> = HashMap::new();
    for grads in per_sample {
        // deterministic: iterate in sorted key order
        let mut keys: Vec<String> = grads.keys().cloned().collect();
        keys.sort_unstable();
        for key in keys {
            let g = &grads[&key];
            match merged.get_mut(&key) {
                None => {
                    merged.insert(key, g.clone());
                }
                Some(acc) => {
                    let data: Vec<f64> = acc
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(a, b)| a + b)
                        .collect();
                    *acc = Tensor::from_raw(data, g.shape().to_vec());
                }
            }
        }
    }
    merged
        .into_iter()
        .map(|(k, t)| {
            let data: Vec<f64> = t.data().iter().map(|v| v / n).collect();
            let shape = t.shape().to_vec();
            (k, Tensor::from_raw(data, shape))
        })
        .collect()
}

fn checkpoint_of(
    cfg: &Config,
    bundle: &ModelBundle,
    adam: &AdamState,
    phase: Phase,
    next_epoch: usize,
) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        phase,
        next_epoch,
        vocab_words: bundle.text.vocab.words().to_vec(),
        frozen_table: bundle.text.table.clone(),
        params: bundle.params.clone(),
        adam: adam.clone(),
        master_seed: cfg.seed,
    }
}

/// Pretrain the scene encoder (distillation, or closed-vocabulary CE for
/// those variants). Only `scene.*` parameters receive updates.
///
/// `resume` continues an interrupted run bit-exactly; `until_epoch` stops
/// after that epoch (for resume tests and staged runs).
pub fn pretrain(
    cfg: &Config,
    dataset: &Dataset,
    resume: Option<Checkpoint>,
    until_epoch: Option<usize>,
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    cfg.validate()?;
    if dataset.header.table_seed != cfg.table_seed || dataset.header.feature_dim != cfg.feature_dim
    {
        return Err(Error::Config(
            "config text table does not match the dataset's teacher space".into(),
        ));
    }
    let distill = cfg.variant.distills();
    let (mut bundle, mut adam, start_epoch) = match resume {
        Some(ck) => {
            if ck.phase != Phase::Pretrain {
                return Err(Error::Config("resume checkpoint is not a pretraining checkpoint".into()));
            }
            let bundle = ck.bundle()?;
            (bundle, ck.adam, ck.next_epoch)
        }
        None => {
            let bundle = ModelBundle::new(cfg.model_config(), cfg.seed)?;
            let adam = AdamState::new(&bundle.params, |n| n.starts_with("scene."));
            (bundle, adam, 0)
        }
    };
    let samples = dataset.load_split(Split::Train)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("dataset has no training samples".into()));
    }
    let scenes = prepare_scene_data(cfg, &bundle, &samples, distill)?;
    let mut logs = Vec::new();
    let end = until_epoch.unwrap_or(cfg.pretrain_epochs).min(cfg.pretrain_epochs);
    let mut next_epoch = start_epoch;
    for epoch in start_epoch..end {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut rng = crate::rng::stream(cfg.seed, "pretrain_shuffle", &[epoch as u64]);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.pretrain_batch) {
            let results: Vec<Result<(f64, HashMap<String, Tensor>)>> = batch
                .par_iter()
                .map(|&si| {
                    let sd = &scenes[si];
                    let fw = Forward::train(&bundle.params);
                    let loss = if distill {
                        let (targets, coverage) = sd.targets.as_ref().unwrap();
                        bundle.distill_loss(&fw, &sd.graph, &sd.input, targets, coverage)?
                    } else {
                        bundle.closed_vocab_loss(&fw, &sd.graph, &sd.input, &sd.class_ids)?
                    };
                    let value = loss.value().item();
                    if !value.is_finite() {
                        return Err(Error::NonFinite("pretraining loss".into()));
                    }
                    Ok((value, fw.grads_of(&loss)?))
                })
                .collect();
            let mut grads_list = Vec::with_capacity(batch.len());
            for r in results {
                let (value, grads) = r?;
                epoch_loss += value;
                grads_list.push(grads);
            }
            let merged = merge_grads(grads_list);
            adam_step(&mut adam, &mut bundle.params, &merged, |_| cfg.pretrain_lr)?;
        }
        epoch_loss /= scenes.len() as f64;
        let log = EpochLog {
            epoch,
            columns: vec![epoch_loss],
            wall_s: t0.elapsed().as_secs_f64(),
        };
        println!("{}", format_epoch_line("pretrain", &["loss"], &log));
        logs.push(log);
        next_epoch = epoch + 1;
        if cfg.pretrain_stop_loss > 0.0 && epoch_loss < cfg.pretrain_stop_loss {
            next_epoch = cfg.pretrain_epochs; // finished early
            break;
        }
    }
    let ck = checkpoint_of(cfg, &bundle, &adam, Phase::Pretrain, next_epoch);
    Ok((ck, logs))
}

/// Train the full cVAE. `pretrained` supplies scene-encoder weights; all
/// parameters train, with `scene.*` at the reduced fine-tune rate.
pub fn train(
    cfg: &Config,
    dataset: &Dataset,
    pretrained: Option<&Checkpoint>,
    resume: Option<Checkpoint>,
    until_epoch: Option<usize>,
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    cfg.validate()?;
    let weights = cfg.loss_weights();
    let (mut bundle, mut adam, start_epoch) = match resume {
        Some(ck) => {
            if ck.phase != Phase::Train {
                return Err(Error::Config("resume checkpoint is not a training checkpoint".into()));
            }
            let bundle = ck.bundle()?;
            (bundle, ck.adam, ck.next_epoch)
        }
        None => {
            let mut bundle = ModelBundle::new(cfg.model_config(), cfg.seed)?;
            if let Some(pre) = pretrained {
                for (name, t) in pre.params.iter() {
                    if name.starts_with("scene.") {
                        bundle.params.set(name, t.clone())?;
                    }
                }
            }
            let adam = AdamState::new(&bundle.params, |_| true);
            (bundle, adam, 0)
        }
    };
    let samples = dataset.load_split(Split::Train)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("dataset has no training samples".into()));
    }
    let graphs = build_graphs(&bundle, &samples)?;
    let mut logs = Vec::new();
    let end = until_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);
    let mut next_epoch = start_epoch;
    for epoch in start_epoch..end {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = crate::rng::stream(cfg.seed, "train_shuffle", &[epoch as u64]);
        order.shuffle(&mut rng);
        let mut epoch_breakdown = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(LossBreakdown, HashMap<String, Tensor>)>> = batch
                .par_iter()
                .map(|&si| {
                    let base = &samples[si];
                    let sample = if cfg.augment {
                        augment(base, crate::rng::child_seed(cfg.seed, "augment", &[epoch as u64, si as u64]))?
                    } else {
                        base.clone()
                    };
                    let graph = &graphs[&base.scene_index];
                    let fw = Forward::train(&bundle.params);
                    let mut rng =
                        crate::rng::stream(cfg.seed, "reparam", &[epoch as u64, si as u64]);
                    let (loss, breakdown) =
                        bundle.sample_loss(&fw, graph, &sample, &weights, &mut rng)?;
                    if !loss.value().is_finite() {
                        return Err(Error::NonFinite("training loss".into()));
                    }
                    Ok((breakdown, fw.grads_of(&loss)?))
                })
                .collect();
            let mut grads_list = Vec::with_capacity(batch.len());
            for r in results {
                let (breakdown, grads) = r?;
                epoch_breakdown.add(&breakdown);
                grads_list.push(grads);
            }
            let merged = merge_grads(grads_list);
            adam_step(&mut adam, &mut bundle.params, &merged, |name| {
                if name.starts_with("scene.") {
                    cfg.scene_lr
                } else {
                    cfg.lr
                }
            })?;
        }
        epoch_breakdown.scale(1.0 / samples.len() as f64);
        let log = EpochLog {
            epoch,
            columns: epoch_breakdown.as_row().to_vec(),
            wall_s: t0.elapsed().as_secs_f64(),
        };
        println!("{}", format_epoch_line("train", &LossBreakdown::COLUMNS, &log));
        logs.push(log);
        next_epoch = epoch + 1;
    }
    let ck = checkpoint_of(cfg, &bundle, &adam, Phase::Train, next_epoch);
    Ok((ck, logs))
}

/// Write an epoch log as a TSV file; the wall-clock column is informational
/// and excluded from determinism comparisons and artifact hashing.
pub fn write_log_file(path: &std::path::Path, names: &[&str], logs: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch");
    for n in names {
        out.push('\t');
        out.push_str(n);
    }
    out.push_str("\twall_s\n");
    for log in logs {
        out.push_str(&log.epoch.to_string());
        for v in &log.columns {
            out.push_str(&format!("\t{v:?}"));
        }
        out.push_str(&format!("\t{:.3}\n", log.wall_s));
    }
    crate::io::write_file(path, out.as_bytes())
}
