//! Temporal shuffling, learned defense patterns and residual ASR.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::net3d::{softmax_cross_entropy, Classifier, LabeledClip, Model3D, Volume};
use crate::vidcore::{clip_unit, decode_vten_raw, encode_vten, VideoShape, VideoTensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShuffleParams {
    /// Window length in frames.
    pub h1: usize,
    /// Number of windows whose frames get permuted.
    pub h2: usize,
    pub seed: u64,
}

impl Default for ShuffleParams {
    fn default() -> Self {
        Self { h1: 4, h2: 2, seed: 0 }
    }
}

impl ShuffleParams {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.h1 == 0 || self.h1 > frames {
            return Err(Error::InvalidArgument(format!(
                "h1 = {} must lie in [1, {frames}]",
                self.h1
            )));
        }
        let windows = frames.div_ceil(self.h1);
        if self.h2 > windows {
            return Err(Error::InvalidArgument(format!(
                "h2 = {} exceeds the {windows} windows of length {}",
                self.h2, self.h1
            )));
        }
        Ok(())
    }

    /// The frame order produced for a clip of `frames` frames.
    pub fn order(&self, frames: usize) -> Result<Vec<usize>> {
        self.validate(frames)?;
        let windows = frames.div_ceil(self.h1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut chosen = index::sample(&mut rng, windows, self.h2).into_vec();
        chosen.sort_unstable();
        let mut order: Vec<usize> = (0..frames).collect();
        for w in chosen {
            let end = ((w + 1) * self.h1).min(frames);
            order[w * self.h1..end].shuffle(&mut rng);
        }
        Ok(order)
    }
}

/// Permutes frames within `h2` randomly chosen windows of `h1` frames.
pub fn temporal_shuffle(x: &VideoTensor, p: &ShuffleParams) -> Result<VideoTensor> {
    x.reorder_frames(&p.order(x.frames())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternConfig {
    pub epochs: usize,
    pub lr: f64,
    /// ℓ∞ radius of the pattern.
    pub budget: f32,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.5,
            budget: 0.1,
            seed: 0,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternMeta {
    pub config: PatternConfig,
    pub shape: [usize; 4],
    /// Mean cross-entropy on the training set: index 0 before any step,
    /// index `e` after epoch `e`.
    pub loss: Vec<f64>,
}

/// An additive pattern `d` with `‖d‖∞ ≤ budget`, laid out like a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct DefensePattern {
    pub shape: VideoShape,
    pub d: Vec<f32>,
    pub meta: PatternMeta,
}

impl DefensePattern {
    pub fn zeros(shape: VideoShape, config: PatternConfig) -> Self {
        Self {
            shape,
            d: vec![0.0; shape.len()],
            meta: PatternMeta {
                config,
                shape: [shape.frames, shape.channels, shape.height, shape.width],
                loss: Vec::new(),
            },
        }
    }

    pub fn linf(&self) -> f32 {
        self.d.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `clip_unit(x + d)`.
    pub fn apply(&self, x: &VideoTensor) -> Result<VideoTensor> {
        if x.shape() != self.shape {
            return Err(Error::Shape(format!("pattern is {}, clip is {}", self.shape, x.shape())));
        }
        clip_unit(x.shape(), x.data().iter().zip(&self.d).map(|(a, b)| a + b).collect())
    }

    /// Writes the pattern to `<stem>.vten` and its metadata to `<stem>.json`.
    pub fn save(&self, vten_path: impl AsRef<Path>) -> Result<()> {
        let path = vten_path.as_ref();
        fs::write(path, encode_vten(self.shape, &self.d)).map_err(|e| Error::io(path, e))?;
        let meta_path = path.with_extension("json");
        let text = serde_json::to_string_pretty(&self.meta)?;
        fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(vten_path: impl AsRef<Path>) -> Result<Self> {
        let path = vten_path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (shape, d) = decode_vten_raw(&bytes).map_err(|r| Error::format(path, r))?;
        let meta_path = path.with_extension("json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: PatternMeta = serde_json::from_str(&text)?;
        let p = Self { shape, d, meta };
        if p.linf() > p.meta.config.budget {
            return Err(Error::format(path, "pattern exceeds its budget"));
        }
        Ok(p)
    }
}

fn pattern_loss_and_grad(victim: &Model3D, x: &VideoTensor, label: usize, d: &[f32]) -> Result<(f64, Vec<f64>)> {
    let raw: Vec<f32> = x.data().iter().zip(d).map(|(a, b)| a + b).collect();
    let inside: Vec<bool> = raw.iter().map(|v| (0.0..=1.0).contains(v)).collect();
    let xd = clip_unit(x.shape(), raw)?;
    let (logits, trace) = victim.forward(&xd)?;
    let (loss, g) = softmax_cross_entropy(&logits, label);
    let gin: Volume = victim.backward_input(&trace, &g)?;
    // back to T×C×H×W, zero where the clip saturated
    let s = x.shape();
    let plane = s.height * s.width;
    let mut grad = vec![0.0; s.len()];
    for t in 0..s.frames {
        for c in 0..s.channels {
            let src = &gin.data[(c * s.frames + t) * plane..][..plane];
            let off = (t * s.channels + c) * plane;
            for (i, &v) in src.iter().enumerate() {
                if inside[off + i] {
                    grad[off + i] = v;
                }
            }
        }
    }
    Ok((loss, grad))
}

fn mean_loss(victim: &Model3D, data: &[(VideoTensor, usize)], d: &[f32]) -> Result<f64> {
    let losses = data
        .par_iter()
        .map(|(x, y)| pattern_loss_and_grad(victim, x, *y, d).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / data.len() as f64)
}

/// Minibatch gradient descent on `d`, projected onto the ℓ∞ ball after every
/// step. `on_step` sees the pattern after each projection.
pub fn train_defense_pattern_with(
    victim: &Model3D,
    adv_train: &[(VideoTensor, usize)],
    cfg: &PatternConfig,
    mut on_step: impl FnMut(&[f32]),
) -> Result<DefensePattern> {
    let Some((first, _)) = adv_train.first() else {
        return Err(Error::InvalidArgument("empty defense training set".into()));
    };
    if !cfg.budget.is_finite() || cfg.budget < 0.0 || cfg.batch_size == 0 || !cfg.lr.is_finite() || cfg.lr <= 0.0 {
        return Err(Error::InvalidArgument("budget ≥ 0, lr > 0 and batch size ≥ 1 required".into()));
    }
    let shape = first.shape();
    for (x, y) in adv_train {
        if x.shape() != shape || x.shape() != victim.input_shape() {
            return Err(Error::Shape(format!("clip {} does not match model input {}", x.shape(), victim.input_shape())));
        }
        if *y >= victim.num_classes() {
            return Err(Error::InvalidArgument(format!("label {y} out of range")));
        }
    }
    let mut p = DefensePattern::zeros(shape, *cfg);
    p.meta.loss.push(mean_loss(victim, adv_train, &p.d)?);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..adv_train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| pattern_loss_and_grad(victim, &adv_train[i].0, adv_train[i].1, &p.d))
                .collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0f64; p.d.len()];
            for (loss, g) in &results {
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("defense loss diverged in epoch {epoch}")));
                }
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            let scale = cfg.lr / batch.len() as f64;
            for (d, g) in p.d.iter_mut().zip(&grad) {
                *d = ((*d as f64 - scale * g) as f32).clamp(-cfg.budget, cfg.budget);
            }
            on_step(&p.d);
        }
        let loss = mean_loss(victim, adv_train, &p.d)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("defense loss diverged in epoch {epoch}")));
        }
        p.meta.loss.push(loss);
    }
    Ok(p)
}

pub fn train_defense_pattern(victim: &Model3D, adv_train: &[(VideoTensor, usize)], cfg: &PatternConfig) -> Result<DefensePattern> {
    train_defense_pattern_with(victim, adv_train, cfg, |_| {})
}

#[derive(Debug, Clone, PartialEq)]
pub enum Defense {
    Pattern(DefensePattern),
    Shuffle(ShuffleParams),
}

impl Defense {
    pub fn name(&self) -> &'static str {
        match self {
            Defense::Pattern(_) => "defense-pattern",
            Defense::Shuffle(_) => "temporal-shuffle",
        }
    }
}

pub fn apply_defense(x: &VideoTensor, defense: &Defense) -> Result<VideoTensor> {
    match defense {
        Defense::Pattern(p) => p.apply(x),
        Defense::Shuffle(s) => temporal_shuffle(x, s),
    }
}

/// Fraction of pairs whose defended adversarial clip is still misclassified.
pub fn residual_asr<C: Classifier>(victim: &C, defense: &Defense, pairs: &[(LabeledClip, VideoTensor)]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let fooled = pairs
        .par_iter()
        .map(|(clean, adv)| Ok((victim.predict(&apply_defense(adv, defense)?)? != clean.label) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(fooled.iter().sum::<usize>() as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn clip(seed: u64, t: usize) -> VideoTensor {
        let s = VideoShape::new(t, 1, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoTensor::new(s, (0..s.len()).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn shuffle_identity_and_validation() {
        let x = clip(1, 8);
        assert_eq!(temporal_shuffle(&x, &ShuffleParams { h1: 4, h2: 0, seed: 3 }).unwrap(), x);
        assert!(ShuffleParams { h1: 0, h2: 0, seed: 0 }.validate(8).is_err());
        assert!(ShuffleParams { h1: 9, h2: 0, seed: 0 }.validate(8).is_err());
        assert!(ShuffleParams { h1: 3, h2: 4, seed: 0 }.validate(8).is_err());
        assert!(ShuffleParams { h1: 3, h2: 3, seed: 0 }.validate(8).is_ok());
    }

    #[test]
    fn shuffle_full_window_is_reproducible_permutation() {
        let p = ShuffleParams { h1: 8, h2: 1, seed: 11 };
        let a = p.order(8).unwrap();
        assert_eq!(a, p.order(8).unwrap());
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn shuffle_stays_within_windows() {
        for seed in 0..20 {
            let order = ShuffleParams { h1: 3, h2: 2, seed }.order(8).unwrap();
            for (pos, &src) in order.iter().enumerate() {
                assert_eq!(pos / 3, src / 3);
            }
        }
    }

    #[test]
    fn zero_pattern_is_identity_and_nonzero_is_not_idempotent() {
        let x = clip(2, 4);
        let mut p = DefensePattern::zeros(x.shape(), PatternConfig::default());
        assert_eq!(p.apply(&x).unwrap(), x);
        p.d.iter_mut().for_each(|v| *v = 0.05);
        let once = p.apply(&x).unwrap();
        assert_ne!(p.apply(&once).unwrap(), once);
    }

    #[test]
    fn pattern_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = DefensePattern::zeros(VideoShape::new(2, 1, 8, 8), PatternConfig::default());
        p.d[3] = -0.07;
        p.meta.loss = vec![1.0, 0.5];
        let path = dir.path().join("dp.vten");
        p.save(&path).unwrap();
        assert_eq!(DefensePattern::load(&path).unwrap(), p);
    }
}
