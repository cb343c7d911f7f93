mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use featurefool::attack::{run_attack, AttackVideoSelector, MapKind, Variant};
use featurefool::defenses::{residual_asr, train_defense_pattern, Defense, DefensePattern};
use featurefool::harness::{
    alpha_sweep, flow_level_analysis, generate_dataset, grad_cam_frame, gradient_norm_analysis, load_external_dataset,
    norms_csv, run_campaign_with, sweep_csv, write_text, Dataset, DatasetClip, Method,
};
use featurefool::metrics::QualityReport;
use featurefool::net3d::{accuracy, train, Model3D};
use featurefool::vidcore::{load_video, write_pnm, PerturbationBudget};
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{config_err, ConfigError, FileConfig};

#[derive(Parser)]
#[command(name = "featurefool", version)]
#[command(about = "Zero-query feature-map attacks on video classifiers")]
struct Cli {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output root; every command reads and writes beneath it
    #[arg(long, global = true, env = "FEATUREFOOL_OUT", default_value = "featurefool-out")]
    out: PathBuf,

    /// More logging (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic motion dataset into <out>/data
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        clips_per_class: Option<usize>,
        #[arg(long)]
        noise_std: Option<f64>,
    },
    /// Train the micro 3D-CNN on the train split
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path (default <out>/model.m3dc)
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Attack one clip with the feature map of another
    Attack {
        /// Clean clip (.vten)
        #[arg(long)]
        clean: PathBuf,
        /// Clip the feature map is extracted from (.vten)
        #[arg(long)]
        attack_clip: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        attack: AttackArgs,
        /// Classify the clean and adversarial clips with the victim afterwards
        #[arg(long)]
        evaluate: bool,
    },
    /// Attack every correctly classified test clip and report
    Campaign {
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        attack: AttackArgs,
        /// Also evaluate temporal shuffling on successful attacks
        #[arg(long)]
        shuffle: bool,
        /// Also evaluate a trained defense pattern (.vten)
        #[arg(long)]
        pattern: Option<PathBuf>,
    },
    /// One campaign per injection strength
    SweepAlpha {
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        attack: AttackArgs,
        /// Comma-separated list, e.g. 0.1,0.4,0.8,1.0
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f32>>,
    },
    /// Success against flow level and gradient norms per frame strategy
    FlowAnalysis {
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        attack: AttackArgs,
        #[arg(long)]
        levels: Option<usize>,
    },
    /// Train a defense pattern and report residual ASR of each defense
    Defend {
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        attack: AttackArgs,
        #[arg(long)]
        pattern_epochs: Option<usize>,
        #[arg(long)]
        pattern_budget: Option<f32>,
    },
    /// Compare two clips (SSIM, PSNR, TI) and print JSON
    Metrics {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        adv: PathBuf,
    },
    /// Dump a Grad-CAM heatmap as PGM
    Visualize {
        #[arg(long)]
        clip: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        class: Option<usize>,
        /// Output path (default <out>/gradcam.pgm)
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Victim checkpoint (default <out>/model.m3dc)
    #[arg(long)]
    victim: Option<PathBuf>,
    /// Feature-map checkpoint (default: the victim)
    #[arg(long)]
    source: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    /// featurefool or random-noise
    #[arg(long, value_parser = kebab::<Method>)]
    method: Option<Method>,
    /// max-flow, random-frame or full-frames
    #[arg(long, value_parser = kebab::<Variant>)]
    variant: Option<Variant>,
    /// guided-backprop or grad-cam
    #[arg(long, value_parser = kebab::<MapKind>)]
    map_kind: Option<MapKind>,
    /// random, ssim-similar or cosine-similar
    #[arg(long, value_parser = kebab::<AttackVideoSelector>)]
    selector: Option<AttackVideoSelector>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    epsilon: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_clips: Option<usize>,
}

fn kebab<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

impl AttackArgs {
    fn apply(&self, cfg: &mut FileConfig) {
        let a = &mut cfg.attack;
        if let Some(v) = self.method {
            a.method = v;
        }
        if let Some(v) = self.variant {
            a.variant = v;
        }
        if let Some(v) = self.map_kind {
            a.map_kind = v;
        }
        if let Some(v) = self.selector {
            a.selector = v;
        }
        if let Some(v) = self.alpha {
            a.alpha = v;
        }
        if let Some(v) = self.epsilon {
            a.epsilon = v;
        }
        if let Some(v) = self.seed {
            a.seed = v;
        }
        if self.max_clips.is_some() {
            a.max_clips = self.max_clips;
        }
    }
}

struct Ctx {
    cfg: FileConfig,
    out: PathBuf,
}

impl Ctx {
    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn default_model(&self) -> PathBuf {
        self.out.join("model.m3dc")
    }

    fn dataset(&self) -> Result<Dataset> {
        let dir = self.data_dir();
        if dir.join("manifest.json").exists() {
            info!("loading dataset from {}", dir.display());
            return Dataset::load(&dir).with_context(|| format!("loading {}", dir.display()));
        }
        info!("no dataset under {}, generating from config", dir.display());
        Ok(generate_dataset(&self.cfg.data)?)
    }

    /// Test-split clips, or the external frame-directory set when configured.
    fn test_clips(&self, victim: &Model3D) -> Result<Vec<DatasetClip>> {
        match &self.cfg.external {
            Some(ext) => Ok(load_external_dataset(&ext.root, &ext.list, victim.input_shape())?),
            None => Ok(self.dataset()?.clips.into_iter().filter(|c| !c.train).collect()),
        }
    }

    fn models(&self, args: &ModelArgs) -> Result<Models> {
        let victim_path = args
            .victim
            .clone()
            .or_else(|| self.cfg.models.victim.clone())
            .unwrap_or_else(|| self.default_model());
        let source_path = args
            .source
            .clone()
            .or_else(|| self.cfg.models.source.clone())
            .unwrap_or_else(|| victim_path.clone());
        let victim = Model3D::load(&victim_path).with_context(|| format!("loading victim {}", victim_path.display()))?;
        let source = Model3D::load(&source_path).with_context(|| format!("loading source {}", source_path.display()))?;
        Ok(Models {
            victim,
            source,
            victim_name: victim_path.display().to_string(),
            source_name: source_path.display().to_string(),
        })
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.out.join(name);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

struct Models {
    victim: Model3D,
    source: Model3D,
    victim_name: String,
    source_name: String,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))?;
    Ok(())
}

#[derive(Serialize)]
struct DefenseReport {
    adv_train_size: usize,
    pattern_loss: Vec<f64>,
    pattern_linf: f32,
    residual_asr_train: f64,
    evaluated: usize,
    residual_asr_identity: f64,
    residual_asr_pattern: f64,
    residual_asr_shuffle: f64,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = config::load(cli.config.as_deref())?;
    let ctx_out = cli.out.clone();
    std::fs::create_dir_all(&ctx_out).with_context(|| format!("creating {}", ctx_out.display()))?;

    match cli.command {
        Command::GenData { seed, clips_per_class, noise_std } => {
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            if let Some(n) = clips_per_class {
                cfg.data.clips_per_class = n;
            }
            if let Some(n) = noise_std {
                cfg.data.noise_std = n;
            }
            cfg.data.validate().map_err(|e| config_err(e.to_string()))?;
            let ctx = Ctx { cfg, out: ctx_out };
            let ds = generate_dataset(&ctx.cfg.data)?;
            let manifest = ds.save(&ctx.data_dir())?;
            println!("wrote {} clips to {} (sha256 {})", ds.clips.len(), ctx.data_dir().display(), manifest.sha256);
        }
        Command::Train { epochs, lr, seed, model_out } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(l) = lr {
                cfg.train.lr = l;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if !cfg.train.lr.is_finite() || cfg.train.lr <= 0.0 || cfg.train.batch_size == 0 {
                return Err(config_err("train.lr must be positive and train.batch_size at least 1"));
            }
            let ctx = Ctx { cfg, out: ctx_out };
            let ds = ctx.dataset()?;
            let data = ds.train();
            let mut model = Model3D::micro_c3d(ds.spec.shape(), ds.spec.num_classes, ctx.cfg.train.seed)?;
            info!("training on {} clips, {} parameters", data.len(), model.num_params());
            let log = train(&mut model, &data, &ctx.cfg.train)?;
            let path = model_out.unwrap_or_else(|| ctx.default_model());
            model.save(&path)?;
            write_json(&ctx.out.join("train_log.json"), &log)?;
            let test: Vec<_> = ds.test().into_iter().map(|c| c.clip.clone()).collect();
            println!(
                "train accuracy {:.4}, test accuracy {:.4}, checkpoint {}",
                accuracy(&model, &data)?,
                accuracy(&model, &test)?,
                path.display()
            );
        }
        Command::Attack { clean, attack_clip, models, attack, evaluate } => {
            attack.apply(&mut cfg);
            let attack_cfg = cfg.attack.attack_config()?;
            let ctx = Ctx { cfg, out: ctx_out };
            let m = ctx.models(&models)?;
            let clean_v = load_video(&clean)?;
            let attack_v = load_video(&attack_clip)?;
            let mut r = run_attack(&clean_v, &attack_v, &m.source, &attack_cfg)?;
            if evaluate {
                r.clean_pred = Some(m.victim.predict(&clean_v)?);
                r.adv_pred = Some(m.victim.predict(&r.adv)?);
            }
            let dir = ctx.subdir("attack")?;
            let sidecar = r.save(dir.join("adv.json"))?;
            write_json(&dir.join("quality.json"), &QualityReport::compute(&clean_v, &r.adv)?)?;
            println!("wrote {} (linf {:.4})", sidecar.display(), r.delta_inf_norm);
        }
        Command::Campaign { models, attack, shuffle, pattern } => {
            attack.apply(&mut cfg);
            let opts = cfg.attack.campaign_options()?;
            let shuffle_params = cfg.shuffle;
            let ctx = Ctx { cfg, out: ctx_out };
            let m = ctx.models(&models)?;
            let clips = ctx.test_clips(&m.victim)?;
            let mut defenses = Vec::new();
            if shuffle {
                shuffle_params
                    .validate(m.victim.input_shape().frames)
                    .map_err(|e| config_err(format!("[shuffle]: {e}")))?;
                defenses.push(Defense::Shuffle(shuffle_params));
            }
            if let Some(p) = pattern {
                defenses.push(Defense::Pattern(DefensePattern::load(&p)?));
            }
            let report = run_campaign_with(&m.victim, &m.source, &clips, &opts, &defenses, (&m.victim_name, &m.source_name))?;
            let dir = ctx.subdir("campaign")?;
            report.write(&dir)?;
            print!("{}", report.summary_json()?);
        }
        Command::SweepAlpha { models, attack, alphas } => {
            attack.apply(&mut cfg);
            if let Some(a) = alphas {
                cfg.attack.alphas = a;
            }
            if cfg.attack.alphas.is_empty() || cfg.attack.alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
                return Err(config_err("alphas must be non-empty and each in (0, 1]"));
            }
            let opts = cfg.attack.campaign_options()?;
            let ctx = Ctx { cfg, out: ctx_out };
            let m = ctx.models(&models)?;
            let clips = ctx.test_clips(&m.victim)?;
            let rows = alpha_sweep(&m.victim, &m.source, &clips, &opts, &ctx.cfg.attack.alphas)?;
            let csv = sweep_csv(&rows);
            write_text(&ctx.subdir("sweep")?.join("sweep.csv"), &csv)?;
            print!("{csv}");
        }
        Command::FlowAnalysis { models, attack, levels } => {
            attack.apply(&mut cfg);
            if let Some(l) = levels {
                cfg.analysis.levels = l;
            }
            if cfg.analysis.levels == 0 {
                return Err(config_err("analysis.levels must be at least 1"));
            }
            let budget = PerturbationBudget::new(cfg.attack.alpha, cfg.attack.epsilon).map_err(|e| config_err(e.to_string()))?;
            let ctx = Ctx { cfg, out: ctx_out };
            let m = ctx.models(&models)?;
            let mut clips = ctx.test_clips(&m.victim)?;
            if let Some(n) = ctx.cfg.analysis.max_clips.or(ctx.cfg.attack.max_clips) {
                clips.truncate(n);
            }
            let videos: Vec<_> = clips.into_iter().map(|c| c.clip.video).collect();
            let report = flow_level_analysis(&m.source, &videos, ctx.cfg.analysis.levels, budget)?;
            let norms = gradient_norm_analysis(&m.source, &videos, ctx.cfg.attack.seed)?;
            let dir = ctx.subdir("flow")?;
            write_text(&dir.join("flow_levels.csv"), &report.csv())?;
            write_text(&dir.join("gradient_norms.csv"), &norms_csv(&norms))?;
            write_json(&dir.join("flow_levels.json"), &report)?;
            print!("{}", report.csv());
        }
        Command::Defend { models, attack, pattern_epochs, pattern_budget } => {
            attack.apply(&mut cfg);
            if let Some(e) = pattern_epochs {
                cfg.pattern.epochs = e;
            }
            if let Some(b) = pattern_budget {
                cfg.pattern.budget = b;
            }
            let opts = cfg.attack.campaign_options()?;
            let ctx = Ctx { cfg, out: ctx_out };
            let m = ctx.models(&models)?;
            ctx.cfg
                .shuffle
                .validate(m.victim.input_shape().frames)
                .map_err(|e| config_err(format!("[shuffle]: {e}")))?;
            let ds = ctx.dataset()?;
            let (train_clips, test_clips): (Vec<_>, Vec<_>) = ds.clips.into_iter().partition(|c| c.train);

            let names = (m.victim_name.as_str(), m.source_name.as_str());
            let train_report = run_campaign_with(&m.victim, &m.source, &train_clips, &opts, &[], names)?;
            let adv_train: Vec<_> = train_report
                .successful_pairs()
                .into_iter()
                .map(|(clean, adv)| (adv, clean.label))
                .collect();
            if adv_train.is_empty() {
                anyhow::bail!("no successful attacks on the train split to learn a pattern from");
            }
            info!("training defense pattern on {} adversarial clips", adv_train.len());
            let pattern = train_defense_pattern(&m.victim, &adv_train, &ctx.cfg.pattern)?;
            let train_pairs = train_report.successful_pairs();
            let residual_train = residual_asr(&m.victim, &Defense::Pattern(pattern.clone()), &train_pairs)?;

            let test_report = run_campaign_with(&m.victim, &m.source, &test_clips, &opts, &[], names)?;
            let pairs = test_report.successful_pairs();
            let residual = |d: Defense| -> Result<f64> {
                if pairs.is_empty() {
                    Ok(0.0)
                } else {
                    Ok(residual_asr(&m.victim, &d, &pairs)?)
                }
            };
            let report = DefenseReport {
                adv_train_size: adv_train.len(),
                pattern_loss: pattern.meta.loss.clone(),
                pattern_linf: pattern.linf(),
                residual_asr_train: residual_train,
                evaluated: pairs.len(),
                residual_asr_identity: residual(Defense::Pattern(DefensePattern::zeros(m.victim.input_shape(), ctx.cfg.pattern)))?,
                residual_asr_pattern: residual(Defense::Pattern(pattern.clone()))?,
                residual_asr_shuffle: residual(Defense::Shuffle(ctx.cfg.shuffle))?,
            };
            let dir = ctx.subdir("defense")?;
            pattern.save(dir.join("pattern.vten"))?;
            write_json(&dir.join("defense.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Metrics { clean, adv } => {
            let a = load_video(&clean)?;
            let b = load_video(&adv)?;
            println!("{}", serde_json::to_string_pretty(&QualityReport::compute(&a, &b)?)?);
        }
        Command::Visualize { clip, models, layer, class, output } => {
            let ctx = Ctx { cfg, out: ctx_out };
            let m = ctx.models(&models)?;
            let v = load_video(&clip)?;
            let frame = grad_cam_frame(&m.source, &v, layer, class)?;
            let path = output.unwrap_or_else(|| ctx.out.join("gradcam.pgm"));
            write_pnm(&frame, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<ConfigError>() => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
