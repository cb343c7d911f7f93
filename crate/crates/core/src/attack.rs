//! Zero-query perturbation construction from a source model's feature map.
//!
//! Nothing here ever sees the victim model: an attack takes the clean clip,
//! an attack clip and a source model, and returns the adversarial clip.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::ssim;
use crate::net3d::{
    grad_cam, grad_cam_frames, guided_backprop, guided_gradient, last_conv_layer, rectify_normalize, GradientMap,
    Model3D,
};
use crate::optflow::max_flow_frame;
use crate::vidcore::{clip_unit, save_video, Frame, PerturbationBudget, VideoTensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    MaxFlow,
    RandomFrame,
    FullFrames,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MapKind {
    #[default]
    GuidedBackprop,
    GradCam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub budget: PerturbationBudget,
    pub variant: Variant,
    pub map_kind: MapKind,
    /// Extraction layer; `None` means the logits for guided backprop and the
    /// last conv layer for Grad-CAM.
    pub layer: Option<usize>,
    /// Class whose logit is backpropagated; `None` uses the source model's
    /// prediction on the attack clip.
    pub class: Option<usize>,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            budget: PerturbationBudget::default(),
            variant: Variant::MaxFlow,
            map_kind: MapKind::GuidedBackprop,
            layer: None,
            class: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FrameChoice {
    Single(usize),
    PerFrame(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialResult {
    pub adv: VideoTensor,
    pub delta_inf_norm: f32,
    pub t_star: FrameChoice,
    /// Filled in by evaluation, never by the attack.
    pub clean_pred: Option<usize>,
    pub adv_pred: Option<usize>,
    /// Victim inferences spent constructing `adv`.
    pub queries: usize,
    pub source_class: Option<usize>,
}

/// JSON view of an [`AdversarialResult`]; the clip itself goes to a sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialRecord {
    pub adv_path: String,
    pub delta_inf_norm: f32,
    pub t_star: FrameChoice,
    pub clean_pred: Option<usize>,
    pub adv_pred: Option<usize>,
    pub queries: usize,
    pub source_class: Option<usize>,
}

impl AdversarialResult {
    /// Writes `<path>` as JSON and the clip to `<path>` with a `.vten`
    /// extension.
    pub fn save(&self, json_path: impl AsRef<Path>) -> Result<PathBuf> {
        let json_path = json_path.as_ref();
        let sidecar = json_path.with_extension("vten");
        save_video(&self.adv, &sidecar)?;
        let record = AdversarialRecord {
            adv_path: sidecar.file_name().unwrap().to_string_lossy().into_owned(),
            delta_inf_norm: self.delta_inf_norm,
            t_star: self.t_star.clone(),
            clean_pred: self.clean_pred,
            adv_pred: self.adv_pred,
            queries: self.queries,
            source_class: self.source_class,
        };
        let text = serde_json::to_string_pretty(&record)?;
        fs::write(json_path, text + "\n").map_err(|e| Error::io(json_path, e))?;
        Ok(sidecar)
    }
}

/// `δ = clip_[−ε, ε](α · g)`.
pub fn perturbation_from_map(g: &GradientMap, budget: PerturbationBudget) -> Frame {
    let eps = budget.epsilon;
    Frame {
        channels: g.channels,
        height: g.height,
        width: g.width,
        data: g.data.iter().map(|&v| (budget.alpha * v).clamp(-eps, eps)).collect(),
    }
}

/// Matches `delta` to the clean clip's frame geometry: bilinear resize for a
/// spatial mismatch, replication for a one-channel map on a colour clip.
fn fit_delta(delta: Frame, clean: &VideoTensor) -> Result<Frame> {
    let mut d = if (delta.height, delta.width) != (clean.height(), clean.width()) {
        delta.resize_bilinear(clean.height(), clean.width())
    } else {
        delta
    };
    if d.channels != clean.channels() {
        if d.channels != 1 {
            return Err(Error::Shape(format!(
                "{}-channel perturbation cannot be applied to a {}-channel clip",
                d.channels,
                clean.channels()
            )));
        }
        let plane = d.data.clone();
        d.data = plane.iter().cycle().take(plane.len() * clean.channels()).cloned().collect();
        d.channels = clean.channels();
    }
    Ok(d)
}

fn linf(a: &VideoTensor, b: &VideoTensor) -> f32 {
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0f32, |m, (x, y)| m.max((x - y).abs()))
}

fn resolve_class(source: &Model3D, attack_vid: &VideoTensor, cfg: &AttackConfig) -> Result<usize> {
    match cfg.class {
        Some(c) => Ok(c),
        None => source.predict(attack_vid),
    }
}

fn default_layer(source: &Model3D, cfg: &AttackConfig) -> Result<usize> {
    match (cfg.layer, cfg.map_kind) {
        (Some(l), _) => Ok(l),
        (None, MapKind::GuidedBackprop) => Ok(source.layers().len() - 1),
        (None, MapKind::GradCam) => {
            last_conv_layer(source).ok_or_else(|| Error::InvalidArgument("source model has no conv layer".into()))
        }
    }
}

/// Gradient map of `attack_vid` at frame `t_star` per the configured kind.
pub fn feature_map(source: &Model3D, attack_vid: &VideoTensor, t_star: usize, cfg: &AttackConfig) -> Result<GradientMap> {
    let class = resolve_class(source, attack_vid, cfg)?;
    let layer = default_layer(source, cfg)?;
    match cfg.map_kind {
        MapKind::GuidedBackprop => guided_backprop(source, attack_vid, t_star, layer, class),
        MapKind::GradCam => {
            let mut g = grad_cam(source, attack_vid, layer, class)?;
            g.source_frame = t_star;
            Ok(g)
        }
    }
}

/// Broadcasts one frame perturbation over every frame of `clean`.
fn apply_broadcast(
    clean: &VideoTensor,
    g: &GradientMap,
    cfg: &AttackConfig,
    t_star: usize,
    class: usize,
) -> Result<AdversarialResult> {
    let delta = fit_delta(perturbation_from_map(g, cfg.budget), clean)?;
    let raw: Vec<f32> = clean
        .data()
        .iter()
        .zip(delta.data.iter().cycle())
        .map(|(c, d)| c + d)
        .collect();
    let adv = clip_unit(clean.shape(), raw)?;
    Ok(AdversarialResult {
        delta_inf_norm: linf(&adv, clean),
        adv,
        t_star: FrameChoice::Single(t_star),
        clean_pred: None,
        adv_pred: None,
        queries: 0,
        source_class: Some(class),
    })
}

fn check_source_input(source: &Model3D, attack_vid: &VideoTensor) -> Result<()> {
    if attack_vid.shape() != source.input_shape() {
        return Err(Error::Shape(format!(
            "attack clip is {}, source model expects {}",
            attack_vid.shape(),
            source.input_shape()
        )));
    }
    Ok(())
}

/// Maximum-flow frame of the attack clip; frame 0 for single-frame clips.
pub fn select_max_flow_frame(attack_vid: &VideoTensor) -> Result<usize> {
    if attack_vid.frames() < 2 {
        return Ok(0);
    }
    Ok(max_flow_frame(attack_vid)?.argmax_index)
}

/// Feature map at the attack clip's maximum-flow frame, broadcast over time.
pub fn featurefool(clean: &VideoTensor, attack_vid: &VideoTensor, source: &Model3D, cfg: &AttackConfig) -> Result<AdversarialResult> {
    check_source_input(source, attack_vid)?;
    let t_star = select_max_flow_frame(attack_vid)?;
    let class = resolve_class(source, attack_vid, cfg)?;
    let cfg = AttackConfig { class: Some(class), ..*cfg };
    let g = feature_map(source, attack_vid, t_star, &cfg)?;
    apply_broadcast(clean, &g, &cfg, t_star, class)
}

/// As [`featurefool`] but with a seeded uniformly random frame.
pub fn featurefool_random(clean: &VideoTensor, attack_vid: &VideoTensor, source: &Model3D, cfg: &AttackConfig) -> Result<AdversarialResult> {
    check_source_input(source, attack_vid)?;
    let t_star = ChaCha8Rng::seed_from_u64(cfg.seed).gen_range(0..attack_vid.frames());
    let class = resolve_class(source, attack_vid, cfg)?;
    let cfg = AttackConfig { class: Some(class), ..*cfg };
    let g = feature_map(source, attack_vid, t_star, &cfg)?;
    apply_broadcast(clean, &g, &cfg, t_star, class)
}

/// One map per frame, each applied to its own clean frame.
pub fn featurefool_full(clean: &VideoTensor, attack_vid: &VideoTensor, source: &Model3D, cfg: &AttackConfig) -> Result<AdversarialResult> {
    check_source_input(source, attack_vid)?;
    if clean.frames() != attack_vid.frames() {
        return Err(Error::Shape(format!(
            "per-frame attack needs equal frame counts: clean {} vs attack {}",
            clean.frames(),
            attack_vid.frames()
        )));
    }
    let class = resolve_class(source, attack_vid, cfg)?;
    let layer = default_layer(source, cfg)?;
    let maps: Vec<GradientMap> = match cfg.map_kind {
        MapKind::GuidedBackprop => {
            // one backward pass gives every frame's gradient
            let g = guided_gradient(source, attack_vid, layer, class)?;
            (0..attack_vid.frames())
                .map(|t| GradientMap {
                    channels: attack_vid.channels(),
                    height: attack_vid.height(),
                    width: attack_vid.width(),
                    data: rectify_normalize(&g.frame_slice(t)),
                    source_frame: t,
                    source_layer: layer,
                })
                .collect()
        }
        MapKind::GradCam => grad_cam_frames(source, attack_vid, layer, class)?,
    };
    let mut raw = Vec::with_capacity(clean.data().len());
    for (t, g) in maps.iter().enumerate() {
        let delta = fit_delta(perturbation_from_map(g, cfg.budget), clean)?;
        raw.extend(clean.frame_data(t).iter().zip(&delta.data).map(|(c, d)| c + d));
    }
    let adv = clip_unit(clean.shape(), raw)?;
    Ok(AdversarialResult {
        delta_inf_norm: linf(&adv, clean),
        adv,
        t_star: FrameChoice::PerFrame((0..clean.frames()).collect()),
        clean_pred: None,
        adv_pred: None,
        queries: 0,
        source_class: Some(class),
    })
}

/// Dispatches on `cfg.variant`.
pub fn run_attack(clean: &VideoTensor, attack_vid: &VideoTensor, source: &Model3D, cfg: &AttackConfig) -> Result<AdversarialResult> {
    match cfg.variant {
        Variant::MaxFlow => featurefool(clean, attack_vid, source, cfg),
        Variant::RandomFrame => featurefool_random(clean, attack_vid, source, cfg),
        Variant::FullFrames => featurefool_full(clean, attack_vid, source, cfg),
    }
}

/// I.i.d. uniform noise in `[−ε, ε]` per element.
pub fn random_noise_baseline(clean: &VideoTensor, budget: PerturbationBudget, seed: u64) -> Result<AdversarialResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = budget.epsilon;
    let raw = clean
        .data()
        .iter()
        .map(|&c| c + (2.0 * rng.gen::<f32>() - 1.0) * eps)
        .collect();
    let adv = clip_unit(clean.shape(), raw)?;
    Ok(AdversarialResult {
        delta_inf_norm: linf(&adv, clean),
        adv,
        t_star: FrameChoice::PerFrame(Vec::new()),
        clean_pred: None,
        adv_pred: None,
        queries: 0,
        source_class: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttackVideoSelector {
    #[default]
    Random,
    SsimSimilar,
    CosineSimilar,
}

fn middle_frame(v: &VideoTensor) -> VideoTensor {
    let f = v.frame(v.frames() / 2);
    VideoTensor::from_frames(&[f]).expect("frame of a valid clip")
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Picks the attack clip for `victim` from `candidates`, never choosing
/// index `exclude`. Similarity selectors compare middle frames.
pub fn select_attack_video(
    victim: &VideoTensor,
    candidates: &[VideoTensor],
    exclude: Option<usize>,
    selector: AttackVideoSelector,
    seed: u64,
) -> Result<usize> {
    let pool: Vec<usize> = (0..candidates.len()).filter(|&i| Some(i) != exclude).collect();
    if pool.is_empty() {
        return Err(Error::InvalidArgument("no attack-clip candidates".into()));
    }
    if selector == AttackVideoSelector::Random {
        return Ok(pool[ChaCha8Rng::seed_from_u64(seed).gen_range(0..pool.len())]);
    }
    let vm = middle_frame(victim);
    let mut best = (f64::NEG_INFINITY, pool[0]);
    for &i in &pool {
        let cm = middle_frame(&candidates[i]);
        let score = match selector {
            AttackVideoSelector::SsimSimilar => {
                if cm.shape() != vm.shape() {
                    let r = cm.resize(vm.height(), vm.width())?;
                    if r.channels() != vm.channels() {
                        continue;
                    }
                    ssim(&vm, &r)?
                } else {
                    ssim(&vm, &cm)?
                }
            }
            _ => {
                if cm.data().len() != vm.data().len() {
                    continue;
                }
                cosine(vm.data(), cm.data())
            }
        };
        if score > best.0 {
            best = (score, i);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vidcore::VideoShape;

    fn map(data: Vec<f32>) -> GradientMap {
        GradientMap {
            channels: 1,
            height: 2,
            width: 2,
            data,
            source_frame: 0,
            source_layer: 0,
        }
    }

    #[test]
    fn perturbation_clip_and_scale() {
        let ones = map(vec![1.0; 4]);
        let d = perturbation_from_map(&ones, PerturbationBudget::new(0.4, 0.3).unwrap());
        assert_eq!(d.data, vec![0.3; 4]);
        let d = perturbation_from_map(&ones, PerturbationBudget::new(0.4, 0.5).unwrap());
        assert_eq!(d.data, vec![0.4; 4]);
        let d = perturbation_from_map(&map(vec![0.0; 4]), PerturbationBudget::default());
        assert_eq!(d.data, vec![0.0; 4]);
    }

    #[test]
    fn fit_delta_replicates_and_resizes() {
        let clean = VideoTensor::zeros(VideoShape::new(2, 3, 8, 8)).unwrap();
        let d = Frame {
            channels: 1,
            height: 4,
            width: 4,
            data: vec![0.2; 16],
        };
        let f = fit_delta(d, &clean).unwrap();
        assert_eq!((f.channels, f.height, f.width), (3, 8, 8));
        assert!(f.data.iter().all(|&v| (v - 0.2).abs() < 1e-6));
        let bad = Frame {
            channels: 3,
            height: 8,
            width: 8,
            data: vec![0.0; 192],
        };
        let gray = VideoTensor::zeros(VideoShape::new(2, 1, 8, 8)).unwrap();
        assert!(fit_delta(bad, &gray).is_err());
    }

    #[test]
    fn noise_baseline_respects_budget_and_seed() {
        let clean = VideoTensor::filled(VideoShape::new(3, 1, 8, 8), 0.5).unwrap();
        let b = PerturbationBudget::new(0.4, 0.1).unwrap();
        let r1 = random_noise_baseline(&clean, b, 7).unwrap();
        let r2 = random_noise_baseline(&clean, b, 7).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.delta_inf_norm <= 0.1 + f32::EPSILON);
        let zero = random_noise_baseline(&clean, PerturbationBudget::new(0.4, 0.0).unwrap(), 1).unwrap();
        assert_eq!(zero.adv, clean);
    }

    #[test]
    fn selector_excludes_victim_and_prefers_similar() {
        let s = VideoShape::new(2, 1, 8, 8);
        let a = VideoTensor::filled(s, 0.2).unwrap();
        let mut ramp = vec![0.0f32; s.len()];
        for (i, v) in ramp.iter_mut().enumerate() {
            *v = (i % 8) as f32 / 8.0;
        }
        let b = VideoTensor::new(s, ramp).unwrap();
        let c = VideoTensor::filled(s, 0.21).unwrap();
        let cands = vec![a.clone(), b, c];
        for sel in [AttackVideoSelector::SsimSimilar, AttackVideoSelector::CosineSimilar] {
            assert_eq!(select_attack_video(&a, &cands, Some(0), sel, 0).unwrap(), 2);
        }
        for seed in 0..20 {
            assert_ne!(select_attack_video(&a, &cands, Some(1), AttackVideoSelector::Random, seed).unwrap(), 1);
        }
        assert!(select_attack_video(&a, &cands[..1], Some(0), AttackVideoSelector::Random, 0).is_err());
    }
}
