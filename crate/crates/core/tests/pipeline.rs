use prtg_core::checkpoint::field_to_bytes;
use prtg_core::config::KeyValues;
use prtg_core::dataset::{OlatDataset, Region};
use prtg_core::eval::{evaluate, EvalConfig};
use prtg_core::oracle::{generate_dataset, OracleScene, RigSpec};
use prtg_core::render::RenderConfig;
use prtg_core::train::{step_rng, train, train_step, RaySampler, TrainConfig, TrainState};

const QUICK: &str = "
steps = 6
batch = 16
lr = 1e-3
lr_final = 5e-4
seed = 5
ckpt_every = 0
n_coarse = 8
n_fine = 8
chunk_rays = 8
l_pos = 2
l_dir = 1
depth = 2
width = 8
skip = none
head_width = 8
";

fn dataset() -> (tempfile::TempDir, OlatDataset) {
    let dir = tempfile::tempdir().unwrap();
    let rig = RigSpec {
        n_train_cameras: 4,
        n_test_cameras: 2,
        width: 16,
        height: 16,
        n_train_lights: 3,
        n_test_lights: 2,
        ..RigSpec::default()
    };
    generate_dataset(&OracleScene::translucent_sphere(), &rig, dir.path()).unwrap();
    let data = OlatDataset::load(dir.path()).unwrap();
    (dir, data)
}

fn quick() -> TrainConfig {
    TrainConfig::from_key_values(&KeyValues::parse(QUICK).unwrap()).unwrap()
}

#[test]
fn batches_have_exact_region_proportions() {
    let (_dir, data) = dataset();
    let sampler = RaySampler::new(&data, None, 0.25).unwrap();
    for (step, batch) in [(0, 8), (1, 64), (2, 256)] {
        let b = sampler.sample(batch, &mut step_rng(1, step)).unwrap();
        assert_eq!(b.len(), batch);
        assert_eq!(b.count(Region::Foreground), batch / 2);
        assert_eq!(b.count(Region::NearSilhouette), 3 * batch / 8);
        assert_eq!(b.count(Region::Background) + b.count(Region::Padded), batch / 8);
        for (i, r) in b.regions.iter().enumerate() {
            if *r == Region::Padded {
                assert_eq!(b.targets[i], [0.0; 3]);
                assert!(!b.in_mask[i]);
            }
            if *r == Region::Foreground {
                assert!(b.in_mask[i]);
            }
        }
    }
    assert!(sampler.sample(12, &mut step_rng(1, 0)).is_err());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (_dir, data) = dataset();
    let cfg = quick();
    let straight = train(&data, &cfg, None, None, |_| {}).unwrap();

    let ckpt = tempfile::tempdir().unwrap();
    let sampler = RaySampler::new(&data, cfg.band_radius, cfg.pad_fraction).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    for _ in 0..3 {
        train_step(&mut state, &sampler, &cfg).unwrap();
    }
    state.save(ckpt.path()).unwrap();
    let resumed = train(&data, &cfg, Some(TrainState::load(ckpt.path()).unwrap()), None, |_| {}).unwrap();

    assert_eq!(resumed.step(), 6);
    assert_eq!(resumed.history, straight.history);
    assert_eq!(
        field_to_bytes(&resumed.field).unwrap(),
        field_to_bytes(&straight.field).unwrap()
    );
    assert!(straight.history.iter().all(|r| r.total.is_finite() && r.total > 0.0));
}

#[test]
fn checkpoints_land_in_the_output_directory() {
    let (_dir, data) = dataset();
    let mut cfg = quick();
    cfg.ckpt_every = 2;
    let out = tempfile::tempdir().unwrap();
    let s = train(&data, &cfg, None, Some(out.path()), |_| {}).unwrap();
    let back = TrainState::load(out.path()).unwrap();
    assert_eq!(back.step(), 6);
    assert_eq!(back.history, s.history);
    assert_eq!(back.field, s.field);
}

#[test]
fn resuming_with_another_architecture_fails() {
    let (_dir, data) = dataset();
    let cfg = quick();
    let state = TrainState::new(&cfg).unwrap();
    let mut other = cfg.clone();
    other.arch.width = 12;
    assert!(train(&data, &other, Some(state), None, |_| {}).is_err());
}

#[test]
fn report_averages_and_determinism() {
    let (_dir, data) = dataset();
    let s = train(&data, &quick(), None, None, |_| {}).unwrap();
    let cfg = EvalConfig {
        render: RenderConfig {
            n_coarse: 8,
            n_fine: 8,
            ..RenderConfig::default()
        },
        max_views: None,
        max_lights: None,
    };
    let a = evaluate(&s.field, &data, &cfg).unwrap();
    let b = evaluate(&s.field, &data, &cfg).unwrap();
    assert_eq!(a.cases.len(), 4);
    assert_eq!(a.cases, b.cases);
    assert_eq!(a.config_fingerprint, b.config_fingerprint);
    let n = a.cases.len() as f64;
    let psnr: f64 = a.cases.iter().map(|c| c.psnr).sum::<f64>() / n;
    let ssim: f64 = a.cases.iter().map(|c| c.ssim).sum::<f64>() / n;
    assert!((a.mean_psnr - psnr).abs() < 1e-9);
    assert!((a.mean_ssim - ssim).abs() < 1e-9);
    assert!(a.includes_background);
    assert!(a.lpips.contains("unavailable"));
}
