use std::sync::OnceLock;

use featurefool::attack::{AttackConfig, Variant};
use featurefool::defenses::{
    residual_asr, temporal_shuffle, train_defense_pattern_with, Defense, DefensePattern, PatternConfig, ShuffleParams,
};
use featurefool::harness::{
    alpha_sweep, flow_level_analysis, generate_dataset, gradient_norm_analysis, run_campaign_with, CampaignOptions,
    DatasetClip, DatasetSpec, Method,
};
use featurefool::net3d::{train, Model3D, TrainConfig};
use featurefool::vidcore::{GrayFrame, PerturbationBudget, VideoShape, VideoTensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Small {
    model: Model3D,
    other: Model3D,
    test: Vec<DatasetClip>,
    train: Vec<DatasetClip>,
}

fn small() -> &'static Small {
    static S: OnceLock<Small> = OnceLock::new();
    S.get_or_init(|| {
        let spec = DatasetSpec { clips_per_class: 25, seed: 3, ..Default::default() };
        let ds = generate_dataset(&spec).unwrap();
        let cfg = TrainConfig { epochs: 6, ..Default::default() };
        let mut model = Model3D::micro_c3d(spec.shape(), 4, 0).unwrap();
        train(&mut model, &ds.train(), &cfg).unwrap();
        let mut other = Model3D::micro_c3d(spec.shape(), 4, 1).unwrap();
        train(&mut other, &ds.train(), &TrainConfig { seed: 1, ..cfg }).unwrap();
        let (train, test) = ds.clips.into_iter().partition(|c| c.train);
        Small { model, other, test, train }
    })
}

fn opts(alpha: f32, eps: f32) -> CampaignOptions {
    CampaignOptions {
        attack: AttackConfig {
            budget: PerturbationBudget::new(alpha, eps).unwrap(),
            variant: Variant::FullFrames,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn null_attack_changes_nothing() {
    let s = small();
    let r = run_campaign_with(&s.model, &s.model, &s.test, &opts(0.4, 0.0), &[], ("v", "s")).unwrap();
    assert!(r.summary.clips_filtered > 0);
    assert_eq!(r.summary.asr, 0.0);
    assert_eq!(r.summary.mean_ssim, 1.0);
    assert!(r.stats.per_video.iter().all(|o| o.quality.psnr_db == f64::INFINITY));
    assert_eq!(r.summary.queries_total, 0);
}

#[test]
fn victim_queries_are_exactly_accounted() {
    let s = small();
    let defenses = [Defense::Shuffle(ShuffleParams::default()), Defense::Shuffle(ShuffleParams { h1: 8, h2: 1, seed: 4 })];
    let r = run_campaign_with(&s.model, &s.model, &s.test, &opts(1.0, 1.0), &defenses, ("v", "s")).unwrap();
    let expected = s.test.len() + r.summary.clips_filtered + defenses.len() * r.summary.successes;
    assert_eq!(r.summary.victim_queries, expected);
    assert_eq!(r.summary.queries_total, 0);
    assert!(r.summary.successes > 0, "expected some successes at full budget");
}

#[test]
fn cross_model_campaign_names_both_models() {
    let s = small();
    let r = run_campaign_with(&s.model, &s.other, &s.test, &opts(0.4, 0.5), &[], ("victim.m3dc", "source.m3dc")).unwrap();
    let json = r.summary_json().unwrap();
    assert!(json.contains("\"victim_model\": \"victim.m3dc\""));
    assert!(json.contains("\"source_model\": \"source.m3dc\""));
}

#[test]
fn single_alpha_sweep_matches_campaign() {
    let s = small();
    let o = opts(0.8, 0.5);
    let rows = alpha_sweep(&s.model, &s.model, &s.test, &o, &[0.8]).unwrap();
    let r = run_campaign_with(&s.model, &s.model, &s.test, &o, &[], ("v", "s")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].asr, r.summary.asr);
    assert_eq!(rows[0].mean_ssim, r.summary.mean_ssim);
    assert_eq!(rows[0].mean_psnr, r.summary.mean_psnr);
    assert!(alpha_sweep(&s.model, &s.model, &s.test, &o, &[]).is_err());
    assert!(alpha_sweep(&s.model, &s.model, &s.test, &o, &[0.0]).is_err());
}

#[test]
fn campaign_filters_to_correct_clips() {
    let s = small();
    let r = run_campaign_with(&s.model, &s.model, &s.test, &opts(0.4, 0.5), &[], ("v", "s")).unwrap();
    for (clean, _) in &r.pairs {
        assert_eq!(s.model.predict(&clean.video).unwrap(), clean.label);
    }
    let capped = run_campaign_with(&s.model, &s.model, &s.test, &CampaignOptions { max_clips: Some(3), ..opts(0.4, 0.5) }, &[], ("v", "s")).unwrap();
    assert_eq!(capped.summary.clips_filtered, 3.min(r.summary.clips_filtered));
}

#[test]
fn noise_campaign_reports_its_method() {
    let s = small();
    let r = run_campaign_with(&s.model, &s.model, &s.test, &CampaignOptions { method: Method::RandomNoise, ..opts(0.4, 0.3) }, &[], ("v", "s")).unwrap();
    assert!(r.summary_json().unwrap().contains("\"method\": \"random-noise\""));
}

#[test]
fn defense_identity_and_budget() {
    let s = small();
    let adv = run_campaign_with(&s.model, &s.model, &s.train, &opts(1.0, 1.0), &[], ("v", "s")).unwrap();
    let pairs = adv.successful_pairs();
    assert!(!pairs.is_empty());
    let zero = DefensePattern::zeros(s.model.input_shape(), PatternConfig::default());
    assert_eq!(residual_asr(&s.model, &Defense::Pattern(zero), &pairs).unwrap(), 1.0);
    assert_eq!(residual_asr(&s.model, &Defense::Shuffle(ShuffleParams { h1: 1, h2: 8, seed: 0 }), &pairs).unwrap(), 1.0);

    let cfg = PatternConfig { epochs: 3, budget: 0.05, ..Default::default() };
    let data: Vec<_> = pairs.iter().map(|(c, a)| (a.clone(), c.label)).collect();
    let mut steps = 0;
    let p = train_defense_pattern_with(&s.model, &data, &cfg, |d| {
        steps += 1;
        assert!(d.iter().all(|v| v.abs() <= cfg.budget));
    })
    .unwrap();
    assert_eq!(steps, cfg.epochs * data.len().div_ceil(cfg.batch_size));
    assert_eq!(p.meta.loss.len(), cfg.epochs + 1);
    // the pattern descends its own training loss
    assert!(p.meta.loss.last().unwrap() <= &p.meta.loss[0], "{:?}", p.meta.loss);
    assert!(residual_asr(&s.model, &Defense::Pattern(p), &pairs).unwrap() <= 1.0);
}

#[test]
fn flow_level_bins_partition_frames() {
    let s = small();
    let videos: Vec<_> = s.test.iter().take(6).map(|c| c.clip.video.clone()).collect();
    let budget = PerturbationBudget::new(1.0, 0.5).unwrap();
    let r = flow_level_analysis(&s.model, &videos, 5, budget).unwrap();
    for v in &r.per_video {
        assert_eq!(v.bin_counts.iter().sum::<usize>(), 8);
        if v.bin_successes.iter().sum::<usize>() > 0 {
            assert!((v.proportions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let still = VideoTensor::filled(VideoShape::new(8, 1, 32, 32), 0.3).unwrap();
    let r = flow_level_analysis(&s.model, &[still], 5, budget).unwrap();
    assert_eq!(r.per_video[0].bins, vec![0; 8]);
}

fn stripe(sx: f64) -> GrayFrame {
    GrayFrame::from_fn(32, 32, |x, y| 0.5 + 0.3 * ((x as f64 - sx) * 0.4).sin() * (y as f64 * 0.3).cos())
}

#[test]
fn max_flow_gradients_dominate_on_single_jump_clips() {
    // static clips whose only motion is one 3 px jump
    let s = small();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let videos: Vec<_> = (0..12)
        .map(|_| {
            let jump = rng.gen_range(2..=5);
            let data = (0..8).flat_map(|t| stripe(if t >= jump { 3.0 } else { 0.0 }).data).collect();
            VideoTensor::new(VideoShape::new(8, 1, 32, 32), data).unwrap()
        })
        .collect();
    let rows = gradient_norm_analysis(&s.model, &videos, 0).unwrap();
    let mut wins = 0;
    for r in &rows {
        for v in [r.max_flow, r.random, r.min_flow] {
            assert!((0.0..=1.0).contains(&v));
        }
        let top = r.max_flow.max(r.random).max(r.min_flow);
        assert!(top == 0.0 || (top - 1.0).abs() < 1e-12);
        wins += (r.max_flow >= r.min_flow) as usize;
    }
    assert!(wins * 2 > rows.len(), "max-flow won only {wins} of {}", rows.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shuffle_preserves_frame_multiset(t in 1usize..12, h1 in 1usize..12, h2 in 0usize..12, seed in any::<u64>()) {
        let p = ShuffleParams { h1, h2, seed };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = VideoShape::new(t, 1, 8, 8);
        let v = VideoTensor::new(shape, (0..shape.len()).map(|_| rng.gen::<f32>()).collect()).unwrap();
        match temporal_shuffle(&v, &p) {
            Err(_) => prop_assert!(h1 > t || h2 > t.div_ceil(h1)),
            Ok(out) => {
                let key = |x: &VideoTensor| {
                    let mut f: Vec<Vec<u32>> = (0..t).map(|i| x.frame_data(i).iter().map(|a| a.to_bits()).collect()).collect();
                    f.sort();
                    f
                };
                prop_assert_eq!(key(&out), key(&v));
            }
        }
    }
}
