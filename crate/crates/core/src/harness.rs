//! Synthetic data, experiment orchestration and report writing.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{
    perturbation_from_map, random_noise_baseline, run_attack, select_attack_video, AdversarialResult, AttackConfig,
    AttackVideoSelector, MapKind, Variant,
};
use crate::defenses::{residual_asr, Defense, DefensePattern, ShuffleParams};
use crate::metrics::{mean, CampaignStats, QualityReport, VideoOutcome};
use crate::net3d::{
    grad_cam, guided_gradient, last_conv_layer, rectify_normalize, CountedModel, GradientMap, LabeledClip, Model3D,
};
use crate::optflow::max_flow_frame;
use crate::vidcore::{clip_unit, load_video, save_video, Frame, PerturbationBudget, VideoShape, VideoTensor};
use crate::{Error, Result};

/// How the shape in a clip moves over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionKind {
    Right,
    Left,
    Up,
    Down,
    Rotate,
    RotateCcw,
}

impl MotionKind {
    pub const DEFAULT_FOUR: [MotionKind; 4] = [MotionKind::Right, MotionKind::Left, MotionKind::Up, MotionKind::Rotate];

    /// Integer per-frame displacement for translations.
    fn step(self) -> (i64, i64) {
        match self {
            MotionKind::Right => (1, 0),
            MotionKind::Left => (-1, 0),
            MotionKind::Up => (0, -1),
            MotionKind::Down => (0, 1),
            MotionKind::Rotate | MotionKind::RotateCcw => (0, 0),
        }
    }

    fn spin(self) -> f64 {
        match self {
            MotionKind::Rotate => 1.0,
            MotionKind::RotateCcw => -1.0,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// One entry per class.
    pub motion_kinds: Vec<MotionKind>,
    pub noise_std: f64,
    pub seed: u64,
    /// Give each class its own sprite outline as well as its own motion.
    pub appearance_cue: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            clips_per_class: 80,
            frames: 8,
            height: 32,
            width: 32,
            motion_kinds: MotionKind::DEFAULT_FOUR.to_vec(),
            noise_std: 0.05,
            seed: 0,
            appearance_cue: false,
        }
    }
}

impl DatasetSpec {
    pub fn shape(&self) -> VideoShape {
        VideoShape::new(self.frames, 1, self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape().validate()?;
        if self.frames < 2 {
            return Err(Error::InvalidArgument("motion needs at least two frames".into()));
        }
        if self.num_classes == 0 || self.clips_per_class == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one class and one clip".into()));
        }
        if self.motion_kinds.len() != self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "{} motion kinds for {} classes",
                self.motion_kinds.len(),
                self.num_classes
            )));
        }
        for (i, a) in self.motion_kinds.iter().enumerate() {
            if self.motion_kinds[..i].contains(a) {
                return Err(Error::InvalidArgument(format!("motion kind {a:?} repeated")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument("noise_std must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

/// Per-clip random appearance.
#[derive(Debug, Clone, Copy)]
struct Sprite {
    cx: i64,
    cy: i64,
    sx: f64,
    sy: f64,
    angle: f64,
    brightness: f64,
    background: f64,
    speed: i64,
    spin_rate: f64,
    outline: Outline,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Outline {
    Ellipse,
    Ring,
    Cross,
    Bar,
}

impl Outline {
    fn for_class(label: usize) -> Self {
        [Outline::Ellipse, Outline::Ring, Outline::Cross, Outline::Bar][label % 4]
    }

    /// Intensity in [0, 1] at rotated, scale-normalised coordinates.
    fn profile(self, u: f64, v: f64) -> f64 {
        match self {
            Outline::Ellipse => (-0.5 * (u * u + v * v)).exp(),
            Outline::Ring => {
                let r = (u * u + v * v).sqrt();
                (-2.0 * (r - 1.6).powi(2)).exp()
            }
            Outline::Cross => {
                let a = (-0.5 * (u * u * 4.0 + v * v * 0.25)).exp();
                let b = (-0.5 * (u * u * 0.25 + v * v * 4.0)).exp();
                a.max(b)
            }
            Outline::Bar => (-0.5 * (u * u * 0.2 + v * v * 6.0)).exp(),
        }
    }
}

impl Sprite {
    fn draw(&self, rng: &mut ChaCha8Rng, spec: &DatasetSpec, kind: MotionKind) -> Vec<f32> {
        let (h, w) = (spec.height, spec.width);
        let (dx, dy) = kind.step();
        let mut data = Vec::with_capacity(spec.frames * h * w);
        for t in 0..spec.frames as i64 {
            let cx = (self.cx + dx * self.speed * t) as f64;
            let cy = (self.cy + dy * self.speed * t) as f64;
            let theta = self.angle + kind.spin() * self.spin_rate * t as f64;
            let (s, c) = theta.sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = (x as f64 - cx, y as f64 - cy);
                    let u = c * px + s * py;
                    let v = -s * px + c * py;
                    let mut val = self.background + self.brightness * self.outline.profile(u / self.sx, v / self.sy);
                    if spec.noise_std > 0.0 {
                        val += spec.noise_std * gaussian(rng);
                    }
                    data.push(val.clamp(0.0, 1.0) as f32);
                }
            }
        }
        data
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn random_sprite(rng: &mut ChaCha8Rng, spec: &DatasetSpec, kind: MotionKind, label: usize) -> Sprite {
    let speed = rng.gen_range(1..=2i64);
    let (dx, dy) = kind.step();
    let travel = speed * (spec.frames as i64 - 1);
    let margin = 5i64;
    let (w, h) = (spec.width as i64, spec.height as i64);
    // keep the centre inside the frame for the whole clip
    let range = |len: i64, d: i64| -> (i64, i64) {
        let lo = margin + if d < 0 { travel } else { 0 };
        let hi = len - 1 - margin - if d > 0 { travel } else { 0 };
        if lo <= hi {
            (lo, hi)
        } else {
            let mid = (len - 1) / 2;
            (mid, mid)
        }
    };
    let (xl, xh) = range(w, dx);
    let (yl, yh) = range(h, dy);
    let sx = rng.gen_range(1.5..2.5);
    Sprite {
        cx: rng.gen_range(xl..=xh),
        cy: rng.gen_range(yl..=yh),
        sx,
        sy: sx * rng.gen_range(1.8..2.6),
        angle: rng.gen_range(0.0..PI),
        brightness: rng.gen_range(0.45..0.65),
        background: rng.gen_range(0.15..0.3),
        speed,
        spin_rate: rng.gen_range(0.25..0.4),
        outline: if spec.appearance_cue {
            Outline::for_class(label)
        } else {
            Outline::Ellipse
        },
    }
}

/// A rendered clip with its id and split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetClip {
    pub id: String,
    pub clip: LabeledClip,
    pub train: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: usize,
    pub split: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub clips: Vec<ManifestEntry>,
    /// Hash over every entry, identifying the dataset as a whole.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub clips: Vec<DatasetClip>,
}

impl Dataset {
    pub fn train(&self) -> Vec<LabeledClip> {
        self.clips.iter().filter(|c| c.train).map(|c| c.clip.clone()).collect()
    }

    pub fn test(&self) -> Vec<&DatasetClip> {
        self.clips.iter().filter(|c| !c.train).collect()
    }

    pub fn manifest(&self) -> Manifest {
        let clips: Vec<ManifestEntry> = self
            .clips
            .iter()
            .map(|c| {
                let mut h = Sha256::new();
                for v in c.clip.video.data() {
                    h.update(v.to_le_bytes());
                }
                ManifestEntry {
                    id: c.id.clone(),
                    label: c.clip.label,
                    split: if c.train { "train" } else { "test" }.into(),
                    sha256: hex::encode(h.finalize()),
                }
            })
            .collect();
        let mut h = Sha256::new();
        for e in &clips {
            h.update(format!("{},{},{},{}\n", e.id, e.label, e.split, e.sha256));
        }
        Manifest {
            spec: self.spec.clone(),
            clips,
            sha256: hex::encode(h.finalize()),
        }
    }
}

impl Dataset {
    /// Writes `manifest.json` and one `clips/<id>.vten` per clip.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        let clip_dir = dir.join("clips");
        fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
        for c in &self.clips {
            save_video(&c.clip.video, clip_dir.join(format!("{}.vten", c.id)))?;
        }
        let manifest = self.manifest();
        write_text(&dir.join("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
        Ok(manifest)
    }

    /// Reads a directory written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let clips = manifest
            .clips
            .iter()
            .map(|e| {
                Ok(DatasetClip {
                    id: e.id.clone(),
                    clip: LabeledClip {
                        video: load_video(dir.join("clips").join(format!("{}.vten", e.id)))?,
                        label: e.label,
                    },
                    train: e.split == "train",
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset { spec: manifest.spec, clips };
        if ds.manifest().sha256 != manifest.sha256 {
            return Err(Error::format(&path, "clip contents do not match the manifest hash"));
        }
        Ok(ds)
    }
}

/// Renders `clips_per_class` clips per class, interleaved by class, with a
/// per-class 80/20 train/test split.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let shape = spec.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_train = (spec.clips_per_class * 4).div_ceil(5);
    let mut clips = Vec::with_capacity(spec.num_classes * spec.clips_per_class);
    for i in 0..spec.clips_per_class {
        for (label, &kind) in spec.motion_kinds.iter().enumerate() {
            let sprite = random_sprite(&mut rng, spec, kind, label);
            let data = sprite.draw(&mut rng, spec, kind);
            clips.push(DatasetClip {
                id: format!("clip_{:05}", clips.len()),
                clip: LabeledClip {
                    video: VideoTensor::new(shape, data)?,
                    label,
                },
                train: i < n_train,
            });
        }
    }
    Ok(Dataset { spec: spec.clone(), clips })
}

/// Labels from a `dir,label` list, one clip per frame directory under
/// `root`. Clips are converted to the target channel count, resized
/// bilinearly and trimmed to the target frame count.
pub fn load_external_dataset(root: &Path, list: &Path, target: VideoShape) -> Result<Vec<DatasetClip>> {
    let text = fs::read_to_string(list).map_err(|e| Error::io(list, e))?;
    let mut clips = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (dir, label) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::format(list, format!("line {}: expected `dir,label`", n + 1)))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| Error::format(list, format!("line {}: bad label {label:?}", n + 1)))?;
        let path = root.join(dir.trim());
        let mut v = load_video(&path)?;
        if v.frames() < target.frames {
            return Err(Error::format(
                &path,
                format!("{} frames, model needs {}", v.frames(), target.frames),
            ));
        }
        if v.channels() != target.channels {
            v = match target.channels {
                1 => v.to_gray_video()?,
                _ => {
                    let frames: Vec<Frame> = (0..v.frames())
                        .map(|t| {
                            let g = v.frame(t);
                            Frame {
                                channels: target.channels,
                                height: g.height,
                                width: g.width,
                                data: g.data.iter().cycle().take(g.data.len() * target.channels).cloned().collect(),
                            }
                        })
                        .collect();
                    VideoTensor::from_frames(&frames)?
                }
            };
        }
        if (v.height(), v.width()) != (target.height, target.width) {
            v = v.resize(target.height, target.width)?;
        }
        if v.frames() > target.frames {
            let frames: Vec<Frame> = (0..target.frames).map(|t| v.frame(t)).collect();
            v = VideoTensor::from_frames(&frames)?;
        }
        clips.push(DatasetClip {
            id: dir.trim().to_string(),
            clip: LabeledClip { video: v, label },
            train: false,
        });
    }
    Ok(clips)
}

/// Which perturbation a campaign applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Featurefool,
    RandomNoise,
}

/// Everything a campaign needs besides the models and clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignOptions {
    pub method: Method,
    pub attack: AttackConfig,
    pub selector: AttackVideoSelector,
    pub seed: u64,
    /// Cap on the number of correctly classified clips attacked.
    pub max_clips: Option<usize>,
}

impl Default for CampaignOptions {
    fn default() -> Self {
        Self {
            method: Method::Featurefool,
            attack: AttackConfig::default(),
            selector: AttackVideoSelector::Random,
            seed: 0,
            max_clips: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefenseSummary {
    pub name: String,
    pub residual_asr: f64,
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CampaignSummary {
    pub victim_model: String,
    pub source_model: String,
    pub method: Method,
    pub variant: Variant,
    pub map_kind: MapKind,
    pub alpha: f32,
    pub epsilon: f32,
    pub seed: u64,
    pub clips_test: usize,
    pub clips_filtered: usize,
    pub successes: usize,
    pub asr: f64,
    pub mean_ssim: f64,
    pub mean_psnr: f64,
    pub mean_ti: f64,
    /// Victim inferences spent constructing attacks.
    pub queries_total: usize,
    /// All victim inferences: filtering, adversarial and defense evaluation.
    pub victim_queries: usize,
    pub defenses: Vec<DefenseSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignReport {
    pub summary: CampaignSummary,
    pub stats: CampaignStats,
    /// `(clean, adv)` for every attacked clip, in report order.
    pub pairs: Vec<(LabeledClip, VideoTensor)>,
}

impl CampaignReport {
    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)? + "\n")
    }

    /// Writes `summary.json` and `per_video.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("summary.json"), &self.summary_json()?)?;
        write_text(&dir.join("per_video.csv"), &self.stats.csv())
    }

    pub fn successful_pairs(&self) -> Vec<(LabeledClip, VideoTensor)> {
        self.pairs
            .iter()
            .zip(&self.stats.per_video)
            .filter(|(_, o)| o.success)
            .map(|(p, _)| p.clone())
            .collect()
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Filters `clips` to those the victim gets right, attacks each with a clip
/// chosen from the same filtered pool, and evaluates quality, success and
/// the given defenses on the successful pairs.
pub fn run_campaign_with(
    victim: &Model3D,
    source: &Model3D,
    clips: &[DatasetClip],
    opts: &CampaignOptions,
    defenses: &[Defense],
    names: (&str, &str),
) -> Result<CampaignReport> {
    let counted = CountedModel::new(victim);
    let verdicts = clips
        .par_iter()
        .map(|c| {
            counted
                .predict(&c.clip.video)
                .map_err(|e| Error::Shape(format!("{}: {e}", c.id)))
                .map(|p| p == c.clip.label)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut kept: Vec<(usize, &DatasetClip)> = clips.iter().enumerate().zip(&verdicts).filter(|(_, &ok)| ok).map(|(c, _)| c).collect();
    if let Some(n) = opts.max_clips {
        kept.truncate(n);
    }
    let filter_queries = counted.calls();
    // Attack clips come from the whole split, never the victim clip itself.
    let pool: Vec<VideoTensor> = clips.iter().map(|c| c.clip.video.clone()).collect();

    let advs = kept
        .par_iter()
        .enumerate()
        .map(|(i, &(k, c))| -> Result<AdversarialResult> {
            let seed = opts.seed.wrapping_add(i as u64);
            let r = match opts.method {
                Method::RandomNoise => random_noise_baseline(&c.clip.video, opts.attack.budget, seed),
                Method::Featurefool => {
                    let j = select_attack_video(&c.clip.video, &pool, Some(k), opts.selector, seed)?;
                    let attack_vid = if pool[j].shape() == source.input_shape() {
                        pool[j].clone()
                    } else {
                        pool[j].resize(source.input_shape().height, source.input_shape().width)?
                    };
                    let cfg = AttackConfig { seed, ..opts.attack };
                    run_attack(&c.clip.video, &attack_vid, source, &cfg)
                }
            };
            r.map_err(|e| Error::InvalidArgument(format!("{}: {e}", c.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let construction_queries = counted.calls() - filter_queries;
    if construction_queries != 0 {
        return Err(Error::InvalidArgument(format!(
            "attack construction queried the victim {construction_queries} times"
        )));
    }

    let outcomes = kept
        .par_iter()
        .zip(&advs)
        .map(|(&(_, c), r)| -> Result<VideoOutcome> {
            let pred = counted.predict(&r.adv)?;
            Ok(VideoOutcome {
                video_id: c.id.clone(),
                quality: QualityReport::compute(&c.clip.video, &r.adv)?,
                success: pred != c.clip.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let queries_mean = mean(advs.iter().map(|r| r.queries as f64));
    let stats = CampaignStats::from_outcomes(outcomes, Vec::new(), queries_mean);
    let pairs: Vec<(LabeledClip, VideoTensor)> = kept
        .iter()
        .zip(advs)
        .map(|(&(_, c), r)| (c.clip.clone(), r.adv))
        .collect();
    let successful: Vec<(LabeledClip, VideoTensor)> = pairs
        .iter()
        .zip(&stats.per_video)
        .filter(|(_, o)| o.success)
        .map(|(p, _)| p.clone())
        .collect();
    let defense_rows = defenses
        .iter()
        .map(|d| {
            Ok(DefenseSummary {
                name: d.name().to_string(),
                residual_asr: residual_asr(&counted, d, &successful)?,
                evaluated: successful.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let summary = CampaignSummary {
        victim_model: names.0.to_string(),
        source_model: names.1.to_string(),
        method: opts.method,
        variant: opts.attack.variant,
        map_kind: opts.attack.map_kind,
        alpha: opts.attack.budget.alpha,
        epsilon: opts.attack.budget.epsilon,
        seed: opts.seed,
        clips_test: clips.len(),
        clips_filtered: pairs.len(),
        successes: stats.successes,
        asr: stats.asr,
        mean_ssim: stats.mean_ssim(),
        mean_psnr: stats.mean_psnr(),
        mean_ti: stats.mean_ti(),
        queries_total: advs_queries_total(queries_mean, pairs.len()),
        victim_queries: counted.calls(),
        defenses: defense_rows,
    };
    Ok(CampaignReport { summary, stats, pairs })
}

fn advs_queries_total(mean: f64, n: usize) -> usize {
    (mean * n as f64).round() as usize
}

/// Where campaign clips come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic(DatasetSpec),
    External { root: PathBuf, list: PathBuf },
}

/// File-backed campaign description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub dataset: DatasetSource,
    pub victim: PathBuf,
    /// Defaults to the victim checkpoint.
    pub source: Option<PathBuf>,
    pub options: CampaignOptions,
    pub shuffle: Option<ShuffleParams>,
    pub pattern: Option<PathBuf>,
    pub output_dir: PathBuf,
}

/// Test-split clips of the configured dataset, shaped for `model`.
pub fn campaign_clips(source: &DatasetSource, model: &Model3D) -> Result<Vec<DatasetClip>> {
    match source {
        DatasetSource::Synthetic(spec) => Ok(generate_dataset(spec)?.clips.into_iter().filter(|c| !c.train).collect()),
        DatasetSource::External { root, list } => load_external_dataset(root, list, model.input_shape()),
    }
}

pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignReport> {
    let victim = Model3D::load(&cfg.victim)?;
    let source_path = cfg.source.clone().unwrap_or_else(|| cfg.victim.clone());
    let source = Model3D::load(&source_path)?;
    let clips = campaign_clips(&cfg.dataset, &victim)?;
    let mut defenses = Vec::new();
    if let Some(s) = cfg.shuffle {
        defenses.push(Defense::Shuffle(s));
    }
    if let Some(p) = &cfg.pattern {
        defenses.push(Defense::Pattern(DefensePattern::load(p)?));
    }
    let names = (cfg.victim.display().to_string(), source_path.display().to_string());
    let report = run_campaign_with(&victim, &source, &clips, &cfg.options, &defenses, (&names.0, &names.1))?;
    report.write(&cfg.output_dir)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f32,
    pub asr: f64,
    pub mean_ssim: f64,
    pub mean_psnr: f64,
    pub mean_ti: f64,
}

/// One campaign per α with everything else fixed.
pub fn alpha_sweep(
    victim: &Model3D,
    source: &Model3D,
    clips: &[DatasetClip],
    opts: &CampaignOptions,
    alphas: &[f32],
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("empty alpha list".into()));
    }
    alphas
        .iter()
        .map(|&alpha| {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1]")));
            }
            let mut o = opts.clone();
            o.attack.budget = PerturbationBudget::new(alpha, opts.attack.budget.epsilon)?;
            let r = run_campaign_with(victim, source, clips, &o, &[], ("victim", "source"))?;
            Ok(SweepRow {
                alpha,
                asr: r.summary.asr,
                mean_ssim: r.summary.mean_ssim,
                mean_psnr: r.summary.mean_psnr,
                mean_ti: r.summary.mean_ti,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha,asr,mean_ssim,mean_psnr,mean_ti\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:.2},{:.6},{:.6},{:.4},{:.6}",
            r.alpha, r.asr, r.mean_ssim, r.mean_psnr, r.mean_ti
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowLevelVideo {
    pub magnitudes: Vec<f64>,
    pub bins: Vec<usize>,
    pub bin_counts: Vec<usize>,
    pub bin_successes: Vec<usize>,
    /// Share of this clip's successful frames per bin; all zero when no
    /// frame succeeded.
    pub proportions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowLevelReport {
    pub levels: usize,
    pub per_video: Vec<FlowLevelVideo>,
    /// Mean of `proportions` over clips with at least one success.
    pub mean_proportions: Vec<f64>,
    /// Pooled successes / frames per bin.
    pub success_rate: Vec<f64>,
}

impl FlowLevelReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("level,frames,successes,success_rate,mean_proportion\n");
        for b in 0..self.levels {
            let frames: usize = self.per_video.iter().map(|v| v.bin_counts[b]).sum();
            let succ: usize = self.per_video.iter().map(|v| v.bin_successes[b]).sum();
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6}",
                b + 1,
                frames,
                succ,
                self.success_rate[b],
                self.mean_proportions[b]
            );
        }
        out
    }
}

/// Uniform bins between the clip's smallest and largest frame magnitude.
pub fn flow_bins(magnitudes: &[f64], levels: usize) -> Vec<usize> {
    let lo = magnitudes.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = magnitudes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    magnitudes
        .iter()
        .map(|&m| {
            if hi <= lo {
                0
            } else {
                (((m - lo) / (hi - lo) * levels as f64) as usize).min(levels - 1)
            }
        })
        .collect()
}

/// Attacks each clip with the map of every one of its own frames in turn and
/// relates success to that frame's flow level. Success means the model's
/// prediction changes.
pub fn flow_level_analysis(
    model: &Model3D,
    videos: &[VideoTensor],
    levels: usize,
    budget: PerturbationBudget,
) -> Result<FlowLevelReport> {
    if videos.is_empty() || levels == 0 {
        return Err(Error::InvalidArgument("need at least one clip and one level".into()));
    }
    let per_video = videos
        .par_iter()
        .map(|v| -> Result<FlowLevelVideo> {
            let magnitudes = if v.frames() < 2 {
                vec![0.0; v.frames()]
            } else {
                max_flow_frame(v)?.magnitudes
            };
            let bins = flow_bins(&magnitudes, levels);
            let clean_pred = model.predict(v)?;
            let layer = model.layers().len() - 1;
            let grad = guided_gradient(model, v, layer, clean_pred)?;
            let mut bin_counts = vec![0; levels];
            let mut bin_successes = vec![0; levels];
            for t in 0..v.frames() {
                let g = GradientMap {
                    channels: v.channels(),
                    height: v.height(),
                    width: v.width(),
                    data: rectify_normalize(&grad.frame_slice(t)),
                    source_frame: t,
                    source_layer: layer,
                };
                let delta = perturbation_from_map(&g, budget);
                let raw = v.data().iter().zip(delta.data.iter().cycle()).map(|(a, d)| a + d).collect();
                let adv = clip_unit(v.shape(), raw)?;
                bin_counts[bins[t]] += 1;
                if model.predict(&adv)? != clean_pred {
                    bin_successes[bins[t]] += 1;
                }
            }
            let total: usize = bin_successes.iter().sum();
            let proportions = bin_successes
                .iter()
                .map(|&s| if total == 0 { 0.0 } else { s as f64 / total as f64 })
                .collect();
            Ok(FlowLevelVideo { magnitudes, bins, bin_counts, bin_successes, proportions })
        })
        .collect::<Result<Vec<_>>>()?;
    let hit: Vec<&FlowLevelVideo> = per_video.iter().filter(|v| v.bin_successes.iter().sum::<usize>() > 0).collect();
    let mean_proportions = (0..levels)
        .map(|b| mean(hit.iter().map(|v| v.proportions[b])))
        .collect();
    let success_rate = (0..levels)
        .map(|b| {
            let n: usize = per_video.iter().map(|v| v.bin_counts[b]).sum();
            let s: usize = per_video.iter().map(|v| v.bin_successes[b]).sum();
            if n == 0 {
                0.0
            } else {
                s as f64 / n as f64
            }
        })
        .collect();
    Ok(FlowLevelReport { levels, per_video, mean_proportions, success_rate })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormRow {
    pub max_flow_frame: usize,
    pub random_frame: usize,
    pub min_flow_frame: usize,
    /// Guided-gradient ℓ2 norms of the three frames, divided by their max.
    pub max_flow: f64,
    pub random: f64,
    pub min_flow: f64,
}

/// Per-clip guided-gradient norms at the max-flow, a random and the min-flow
/// frame. The class is the model's prediction on the clip.
pub fn gradient_norm_analysis(model: &Model3D, videos: &[VideoTensor], seed: u64) -> Result<Vec<NormRow>> {
    videos
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let profile = max_flow_frame(v)?;
            let t_max = profile.argmax_index;
            let t_min = profile.argmin_index();
            let t_rand = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64)).gen_range(0..v.frames());
            let class = model.predict(v)?;
            let g = guided_gradient(model, v, model.layers().len() - 1, class)?;
            let norm = |t: usize| g.frame_slice(t).iter().map(|x| x * x).sum::<f64>().sqrt();
            let (a, b, c) = (norm(t_max), norm(t_rand), norm(t_min));
            let m = a.max(b).max(c);
            let s = if m > 0.0 { 1.0 / m } else { 0.0 };
            Ok(NormRow {
                max_flow_frame: t_max,
                random_frame: t_rand,
                min_flow_frame: t_min,
                max_flow: a * s,
                random: b * s,
                min_flow: c * s,
            })
        })
        .collect()
}

pub fn norms_csv(rows: &[NormRow]) -> String {
    let mut out = String::from("video_index,max_flow,random,min_flow\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(out, "{i},{:.6},{:.6},{:.6}", r.max_flow, r.random, r.min_flow);
    }
    out
}

/// Grad-CAM of `v` as an 8-bit gray frame.
pub fn grad_cam_frame(model: &Model3D, v: &VideoTensor, layer: Option<usize>, class: Option<usize>) -> Result<Frame> {
    let layer = match layer {
        Some(l) => l,
        None => last_conv_layer(model).ok_or_else(|| Error::InvalidArgument("model has no conv layer".into()))?,
    };
    let class = match class {
        Some(c) => c,
        None => model.predict(v)?,
    };
    let g = grad_cam(model, v, layer, class)?;
    Frame::new(1, g.height, g.width, g.data)
}
