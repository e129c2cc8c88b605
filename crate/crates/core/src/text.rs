//! Tokenizer and frozen text encoder.
//!
//! The frozen embedding table defines the shared open-vocabulary feature
//! space: the synthetic teacher renders per-pixel features in it and the
//! condition module consumes it, so a single `class_embedding` definition
//! ties the two sides together.

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

/// Token string <-> dense id map with fixed special ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    /// Build from a lexicon of lowercase words (specials prepended).
    pub fn from_lexicon(lexicon: &[&str]) -> Vocabulary {
        let mut words = vec![
            "<pad>".to_string(),
            "<unk>".to_string(),
            "<bos>".to_string(),
            "<eos>".to_string(),
        ];
        for w in lexicon {
            let w = w.to_lowercase();
            if !words.contains(&w) {
                words.push(w);
            }
        }
        Vocabulary { words }
    }

    pub fn from_words(words: Vec<String>) -> Result<Vocabulary> {
        if words.len() < 4 || words[PAD as usize] != "<pad>" {
            return Err(Error::Vocab("malformed vocabulary word list".into()));
        }
        Ok(Vocabulary { words })
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    /// Lowercase, whitespace-split, BOS/EOS-wrap, pad/truncate to `w` ids.
    ///
    /// Returns the id sequence (length exactly `w`) and the unpadded length.
    pub fn tokenize(&self, text: &str, w: usize) -> Result<(Vec<u32>, usize)> {
        if w < 2 {
            return Err(Error::Vocab(format!("max length {w} too small for BOS/EOS")));
        }
        let mut ids = vec![BOS];
        for word in text.to_lowercase().split_whitespace() {
            if ids.len() >= w - 1 {
                break; // truncate, leaving room for EOS
            }
            ids.push(self.id_of(word).unwrap_or(UNK));
        }
        ids.push(EOS);
        let len = ids.len();
        ids.resize(w, PAD);
        Ok((ids, len))
    }

    /// Words of the content tokens (specials skipped).
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id > EOS)
            .map(|&id| self.words[id as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Embedding table over a vocabulary, frozen or trainable.
///
/// The frozen table is a seeded isotropic Gaussian with unit-norm rows and
/// never receives gradients. The trainable flavor (ablation analogue of a
/// from-scratch text encoder) starts at sigma=0.02 and is unnormalized.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab: Vocabulary,
    pub table: Tensor,
    pub frozen: bool,
}

const POOL_EPS: f64 = 1e-9;

impl TextEncoder {
    /// The frozen, aligned text space shared with the synthetic teacher.
    pub fn frozen(vocab: Vocabulary, feature_dim: usize, seed: u64) -> TextEncoder {
        let v = vocab.size();
        let mut rng = crate::rng::stream(seed, "text_table", &[]);
        let mut data = vec![0.0f64; v * feature_dim];
        for row in data.chunks_mut(feature_dim) {
            let mut norm2 = 0.0;
            for x in row.iter_mut() {
                *x = rng.sample::<f64, _>(StandardNormal);
                norm2 += *x * *x;
            }
            let inv = 1.0 / norm2.sqrt();
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        TextEncoder {
            vocab,
            table: Tensor::from_raw(data, vec![v, feature_dim]),
            frozen: true,
        }
    }

    /// Unaligned trainable table (sigma=0.02 init).
    pub fn trainable(vocab: Vocabulary, feature_dim: usize, seed: u64) -> TextEncoder {
        let v = vocab.size();
        let mut rng = crate::rng::stream(seed, "text_table_trainable", &[]);
        let data: Vec<f64> = (0..v * feature_dim)
            .map(|_| 0.02 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        TextEncoder {
            vocab,
            table: Tensor::from_raw(data, vec![v, feature_dim]),
            frozen: false,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.table.shape()[1]
    }

    fn content_indices(tokens: &[u32]) -> Vec<usize> {
        tokens
            .iter()
            .filter(|&&t| t > EOS || t == UNK)
            .map(|&t| t as usize)
            .collect()
    }

    /// Pooled sentence embedding: mean of content-token rows, renormalized.
    ///
    /// PAD never contributes; BOS/EOS are positional bookends excluded so
    /// that single-word class prompts stay near-orthogonal across classes.
    pub fn encode_tokens(&self, tokens: &[u32]) -> Result<Tensor> {
        let idx = Self::content_indices(tokens);
        if idx.is_empty() {
            return Err(Error::Vocab("encode of contentless token sequence".into()));
        }
        let f = self.feature_dim();
        let mut acc = vec![0.0; f];
        for &i in &idx {
            for (a, x) in acc.iter_mut().zip(self.table.row(i)) {
                *a += *x;
            }
        }
        let inv_n = 1.0 / idx.len() as f64;
        let mut norm2 = 0.0;
        for a in acc.iter_mut() {
            *a *= inv_n;
            norm2 += *a * *a;
        }
        let inv = 1.0 / (norm2.sqrt() + POOL_EPS);
        for a in acc.iter_mut() {
            *a *= inv;
        }
        Ok(Tensor::from_raw(acc, vec![f]))
    }

    pub fn encode_text(&self, text: &str, w: usize) -> Result<Tensor> {
        let (tokens, _) = self.vocab.tokenize(text, w)?;
        self.encode_tokens(&tokens)
    }

    /// Embedding of a bare class name; the single definition that puts
    /// teacher pixels and text prompts in one space.
    pub fn class_embedding(&self, class_name: &str) -> Result<Tensor> {
        for word in class_name.to_lowercase().split_whitespace() {
            if self.vocab.id_of(word).is_none() {
                return Err(Error::Vocab(format!("unknown class name '{class_name}'")));
            }
        }
        self.encode_text(class_name, class_name.split_whitespace().count() + 2)
    }

    /// Tracked pooled embedding + per-content-token rows, for model fusion.
    ///
    /// When frozen the results are constants; when trainable the table is
    /// lifted onto the tape via `table_var` (a shared leaf) by the caller.
    pub fn encode_tokens_var(&self, table: &Var, tokens: &[u32]) -> Result<(Var, Var)> {
        let idx = Self::content_indices(tokens);
        if idx.is_empty() {
            return Err(Error::Vocab("encode of contentless token sequence".into()));
        }
        let rows = table.gather_rows(&idx)?; // (n_content, F)
        let mean = rows.mean_axis(0)?; // (F,)
        let norm = mean.l2_norm()?.add_scalar(POOL_EPS)?;
        let pooled = mean.div(&norm)?;
        Ok((pooled, rows))
    }
}

/// The fixed prompt palette used for nearest-class labeling: the 9 object
/// classes plus the two background surface names, mapping to class ids.
pub fn label_prompts() -> Vec<(&'static str, u8)> {
    vec![
        ("bed", 1),
        ("chair", 2),
        ("table", 3),
        ("sofa", 4),
        ("cabinet", 5),
        ("desk", 6),
        ("shelf", 7),
        ("toilet", 8),
        ("bathtub", 9),
        ("floor", 0),
        ("wall", 0),
    ]
}

/// Nearest-class-embedding labeling of feature rows (open-vocabulary query).
pub fn nearest_class_labels(encoder: &TextEncoder, feats: &Tensor) -> Result<Vec<u8>> {
    let prompts = label_prompts();
    let f = encoder.feature_dim();
    if feats.rank() != 2 || feats.shape()[1] != f {
        return Err(Error::ShapeMismatch {
            op: "nearest_class_labels",
            lhs: feats.shape().to_vec(),
            rhs: vec![0, f],
        });
    }
    let embs: Vec<Tensor> = prompts
        .iter()
        .map(|(name, _)| encoder.class_embedding(name))
        .collect::<Result<_>>()?;
    let n = feats.shape()[0];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = feats.row(i);
        let rn: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let mut best = 0usize;
        let mut best_cos = f64::NEG_INFINITY;
        for (j, e) in embs.iter().enumerate() {
            let dot: f64 = row.iter().zip(e.data()).map(|(a, b)| a * b).sum();
            let c = dot / rn;
            if c > best_cos {
                best_cos = c;
                best = j;
            }
        }
        out.push(prompts[best].1);
    }
    Ok(out)
}

/// Default lexicon covering the annotation templates and surface names.
pub fn template_lexicon() -> Vec<&'static str> {
    vec![
        "walk", "to", "the", "sit", "on", "stand", "up", "from", "lie", "that", "is", "closest",
        "farthest", "near", "far", "bed", "chair", "table", "sofa", "cabinet", "desk", "shelf",
        "toilet", "bathtub", "floor", "wall",
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc() -> TextEncoder {
        TextEncoder::frozen(Vocabulary::from_lexicon(&template_lexicon()), 64, 42)
    }

    #[test]
    fn tokenize_example() {
        let e = enc();
        let (ids, len) = e.vocab.tokenize("walk to the bed", 16).unwrap();
        assert_eq!(len, 6);
        assert_eq!(ids.len(), 16);
        assert_eq!(ids[0], BOS);
        assert_eq!(ids[5], EOS);
        assert!(ids[6..].iter().all(|&t| t == PAD));
        assert_eq!(e.vocab.detokenize(&ids), "walk to the bed");
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let e = enc();
        let (ids, _) = e.vocab.tokenize("walk to the spaceship", 16).unwrap();
        assert!(ids.contains(&UNK));
    }

    #[test]
    fn truncation_preserves_eos() {
        let e = enc();
        let (ids, len) = e.vocab.tokenize("walk to the bed near the chair and stuff", 6).unwrap();
        assert_eq!(len, 6);
        assert_eq!(ids[5], EOS);
    }

    #[test]
    fn encode_matches_class_embedding_and_ignores_pad() {
        let e = enc();
        let c = e.class_embedding("chair").unwrap();
        let t1 = e.encode_text("chair", 4).unwrap();
        let t2 = e.encode_text("chair", 16).unwrap();
        assert_eq!(c, t1);
        assert_eq!(t1, t2);
        let norm: f64 = c.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn all_pad_rejected() {
        let e = enc();
        assert!(e.encode_tokens(&[PAD, PAD, PAD]).is_err());
        assert!(e.encode_tokens(&[BOS, EOS, PAD]).is_err());
    }

    #[test]
    fn unknown_class_rejected() {
        let e = enc();
        assert!(e.class_embedding("spaceship").is_err());
    }

    #[test]
    fn class_pairs_near_orthogonal() {
        // 9 choose 2 = 36 pairs, |cos| < 0.4 at F=64 for the seeded table
        let e = enc();
        let names: Vec<&str> = label_prompts().iter().take(9).map(|(n, _)| *n).collect();
        let embs: Vec<Tensor> = names.iter().map(|n| e.class_embedding(n).unwrap()).collect();
        let mut pairs = 0;
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let dot: f64 = embs[i].data().iter().zip(embs[j].data()).map(|(a, b)| a * b).sum();
                assert!(dot.abs() < 0.4, "classes {} vs {}: cos {}", names[i], names[j], dot);
                pairs += 1;
            }
        }
        assert_eq!(pairs, 36);
    }

    #[test]
    fn table_stable_across_runs() {
        let a = enc();
        let b = enc();
        assert_eq!(a.table, b.table);
    }

    #[test]
    fn argmax_recovers_class_for_clean_teacher_features() {
        let e = enc();
        for (name, id) in label_prompts() {
            let emb = e.class_embedding(name).unwrap();
            let feats = emb.reshaped(&[1, 64]).unwrap();
            let labels = nearest_class_labels(&e, &feats).unwrap();
            assert_eq!(labels[0], id, "class {name}");
        }
    }

    #[test]
    fn tracked_encode_matches_frozen_pool() {
        let e = enc();
        let table = Var::constant(e.table.clone());
        let (tokens, _) = e.vocab.tokenize("walk to the bed", 16).unwrap();
        let (pooled, rows) = e.encode_tokens_var(&table, &tokens).unwrap();
        let direct = e.encode_tokens(&tokens).unwrap();
        assert!(pooled.value().allclose(&direct, 1e-12));
        assert_eq!(rows.shape(), &[4, 64]);
    }
}
