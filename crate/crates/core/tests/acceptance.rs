//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. `PRTG_ACCEPTANCE_ONLY=2,5` runs a subset.

use std::time::{Duration, Instant};

use prtg_core::config::KeyValues;
use prtg_core::dataset::{OlatDataset, Region, Split};
use prtg_core::eval::{camera_rays, display, evaluate, evaluate_images, psnr, render_image, EvalConfig};
use prtg_core::image::HdrImage;
use prtg_core::lighting::{luminance, median_cut, olat_grid, per_pixel_lights, relight_rays, Envmap, OlatGridSpec};
use prtg_core::oracle::{generate_dataset, inside_any, OracleScene, RigSpec};
use prtg_core::render::{compute_weights, RenderConfig};
use prtg_core::train::{
    finite_difference_check, step_rng, train, FrozenBatch, LossSettings, RaySampler, TrainConfig, TrainState,
};
use prtg_core::{Architecture, FieldParams, Level, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BENCHMARK_CONFIG: &str = include_str!("data/overfit.cfg");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Fixture {
    _dir: tempfile::TempDir,
    scene: OracleScene,
    data: OlatDataset,
    cfg: TrainConfig,
    trained: Option<(TrainState, Duration)>,
}

impl Fixture {
    fn new() -> Fixture {
        let dir = tempfile::tempdir().expect("tempdir");
        let scene = OracleScene::translucent_sphere();
        generate_dataset(&scene, &RigSpec::default(), dir.path()).expect("oracle dataset");
        let data = OlatDataset::load(dir.path()).expect("dataset loads");
        Fixture {
            _dir: dir,
            scene,
            data,
            cfg: benchmark_config(),
            trained: None,
        }
    }

    /// Runs the overfit benchmark once; later calls are free.
    fn train(&mut self) {
        if self.trained.is_none() {
            let t0 = Instant::now();
            let state = train(&self.data, &self.cfg, None, None, |_| {}).expect("overfit training");
            self.trained = Some((state, t0.elapsed()));
        }
    }

    fn field(&self) -> &FieldParams<f32> {
        &self.trained.as_ref().expect("trained").0.field
    }

    fn render_config(&self) -> RenderConfig {
        RenderConfig {
            n_coarse: self.cfg.n_coarse,
            n_fine: self.cfg.n_fine,
            ..RenderConfig::default()
        }
    }
}

fn benchmark_config() -> TrainConfig {
    TrainConfig::from_key_values(&KeyValues::parse(BENCHMARK_CONFIG).unwrap()).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn gradient_fidelity(fx: &mut Fixture) -> Outcome {
    let t0 = Instant::now();
    let arch = Architecture {
        l_pos: 3,
        l_dir: 2,
        depth: 2,
        width: 16,
        skip: None,
        head_width: 16,
    };
    let field = FieldParams::<f32>::init(arch, 21).unwrap();
    let sampler = RaySampler::new(&fx.data, None, 0.25).unwrap();
    let batch = sampler.sample(16, &mut step_rng(3, 0)).unwrap();
    let background: Vec<bool> = batch.in_mask.iter().map(|m| !m).collect();
    let cfg = RenderConfig {
        n_coarse: 8,
        n_fine: 8,
        jitter: true,
        seed: 9,
        ..RenderConfig::default()
    };
    let fb = FrozenBatch::plan(&field, &batch.rays, &batch.lights, &batch.targets, &background, &cfg, 0, 4.4019)
        .unwrap();
    let settings = LossSettings {
        lambda_mask: 0.1,
        eps_tonemap: 1e-3,
        batch_rays: fb.rays,
        background_rays: fb.background_rays(),
    };
    let check = finite_difference_check(&field.cast::<f64>(), &fb, &settings, 500, 1e-4, 1e-4, 1e-9, 17).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        check.checked == 500 && check.pass_fraction() >= 0.99 && secs < 120.0,
        format!(
            "{}/{} parameters within 1e-4 relative ({:.2}% >= 99%), worst {:.2e}, {secs:.1}s < 120s",
            check.passed,
            check.checked,
            100.0 * check.pass_fraction(),
            check.worst_relative_error
        ),
    )
}

fn conservation(_: &mut Fixture) -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut monotone) = (0.0f64, true);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=128);
        let scale = [0.0, 1.0, 10.0, 1000.0][rng.gen_range(0..4)];
        let sigma: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.2) { 0.0 } else { scale * rng.gen::<f64>() })
            .collect();
        let delta: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-5..0.3)).collect();
        let w = compute_weights(&sigma, &delta).unwrap();
        worst = worst.max((w.total() + w.residual - 1.0).abs());
        monotone &= w.transmittance.windows(2).all(|p| p[1] <= p[0]) && w.residual <= w.transmittance[n - 1];
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-6 && monotone && secs < 5.0,
        format!("10000 profiles: max |sum w + T_res - 1| = {worst:.2e} <= 1e-6, transmittance monotone: {monotone}, {secs:.2}s < 5s"),
    )
}

fn random_envmap(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Envmap {
    let mut img = HdrImage::new(w, h);
    let hot: Vec<(usize, usize, f32)> = (0..3)
        .map(|_| (rng.gen_range(0..w), rng.gen_range(0..h), rng.gen_range(10.0..500.0)))
        .collect();
    for y in 0..h {
        for x in 0..w {
            let mut p = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
            for &(hx, hy, e) in &hot {
                if (hx, hy) == (x, y) {
                    p = p.map(|v| v + e);
                }
            }
            img.set(x, y, p);
        }
    }
    Envmap::new(img).unwrap()
}

fn median_cut_energy(_: &mut Fixture) -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (w, h) = (rng.gen_range(1..=64), rng.gen_range(1..=32));
        let env = random_envmap(&mut rng, w, h);
        let total = env.total_energy();
        for k in 0..=8 {
            let lights = median_cut(&env, 1 << k).unwrap();
            for c in 0..3 {
                let sum: f64 = lights.iter().map(|l| l.energy[c]).sum();
                worst = worst.max(rel(sum, total[c]));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-6 && secs < 10.0,
        format!("20 maps up to 64x32, n = 1..256: max relative energy error {worst:.2e} <= 1e-6, {secs:.2}s < 10s"),
    )
}

fn random_rays(fx: &Fixture, n: usize, seed: u64) -> Vec<prtg_core::render::Ray> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let imgs = fx.data.image_indices(Split::Test);
    (0..n)
        .map(|_| {
            let i = imgs[rng.gen_range(0..imgs.len())];
            let cam = fx.data.camera_of(i);
            let (x, y) = (rng.gen_range(0..cam.width), rng.gen_range(0..cam.height));
            fx.data.pixel_ray(i, x as i64, y as i64).unwrap()
        })
        .collect()
}

fn envmap_linearity(fx: &mut Fixture) -> Outcome {
    fx.train();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_envmap(&mut rng, 16, 8);
    let b = random_envmap(&mut rng, 16, 8);
    let ab = a.add(&b).unwrap();
    let rays = random_rays(fx, 100, 6);
    let field = fx.field();
    let cfg = fx.render_config();
    let ra = relight_rays(field, &rays, &per_pixel_lights(&a), &cfg).unwrap();
    let rb = relight_rays(field, &rays, &per_pixel_lights(&b), &cfg).unwrap();
    let rab = relight_rays(field, &rays, &per_pixel_lights(&ab), &cfg).unwrap();
    let mut worst = 0.0f64;
    for i in 0..rays.len() {
        for c in 0..3 {
            worst = worst.max(rel(rab[i][c], ra[i][c] + rb[i][c]));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-9 && secs < 60.0,
        format!("100 rays, trained checkpoint: max relative |R(A+B) - R(A) - R(B)| = {worst:.2e} <= 1e-9, {secs:.1}s < 60s"),
    )
}

/// Overcast sky with a broad warm glow; smooth enough that regions of a
/// 64-way cut are nearly uniform.
fn sky_envmap() -> Envmap {
    let (w, h) = (32, 16);
    let mut img = HdrImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let d = prtg_core::lighting::pixel_direction(x as f64, y as f64, w, h);
            let sky = 0.3 + 0.7 * d.z.max(0.0);
            let sun = Vec3::new(0.6, -0.3, 0.74).normalized();
            let glow = 4.0 * d.dot(sun).max(0.0).powi(8);
            img.set(
                x,
                y,
                [(0.8 * sky + glow) as f32, (0.9 * sky + 0.8 * glow) as f32, (sky + 0.5 * glow) as f32],
            );
        }
    }
    Envmap::new(img).unwrap()
}

fn median_cut_accuracy(fx: &mut Fixture) -> Outcome {
    fx.train();
    let t0 = Instant::now();
    let env = sky_envmap();
    let few = median_cut(&env, 64).unwrap();
    let all = per_pixel_lights(&env);
    let img = fx.data.image_indices(Split::Test)[0];
    let cam = *fx.data.camera_of(img);
    let mask = fx.data.mask_of(img).unwrap();
    let (near, far) = fx.data.manifest.ray_bounds(&cam);
    let rays: Vec<_> = camera_rays(&cam, near, far)
        .unwrap()
        .into_iter()
        .enumerate()
        .filter(|(i, _)| mask.data[*i])
        .map(|(_, r)| r)
        .collect();
    let field = fx.field();
    let cfg = fx.render_config();
    let approx = relight_rays(field, &rays, &few, &cfg).unwrap();
    let exact = relight_rays(field, &rays, &all, &cfg).unwrap();
    let err: f64 = approx
        .iter()
        .zip(&exact)
        .map(|(a, e)| rel(luminance(*a), luminance(*e)))
        .sum::<f64>()
        / rays.len() as f64;
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        err < 0.05 && secs < 600.0,
        format!(
            "{} foreground pixels, 64 median-cut vs {} per-pixel lights: mean relative error {:.2}% < 5%, {secs:.1}s < 600s",
            rays.len(),
            all.len(),
            100.0 * err
        ),
    )
}

fn overfit_benchmark(fx: &mut Fixture) -> Outcome {
    fx.train();
    let train_secs = fx.trained.as_ref().unwrap().1.as_secs_f64();
    let t0 = Instant::now();
    let cfg = EvalConfig {
        render: fx.render_config(),
        ..EvalConfig::default()
    };
    let field = fx.field();
    let train_imgs: Vec<usize> = fx.data.image_indices(Split::Train).into_iter().step_by(16).collect();
    let tr = evaluate_images(field, &fx.data, &train_imgs, &cfg).unwrap();
    let held = evaluate(field, &fx.data, &cfg).unwrap();

    let mut back = Vec::new();
    for i in fx.data.image_indices(Split::Test) {
        let cam = fx.data.camera_of(i);
        let to_cam = (cam.center() - fx.data.manifest.bounds.center).normalized();
        let light = fx.data.light_of(i).direction;
        if light.dot(to_cam) >= -0.5 {
            continue;
        }
        let bounds = fx.data.manifest.ray_bounds(cam);
        let pred = render_image(field, cam, bounds, light, &cfg.render).unwrap();
        let gt = &fx.data.images[i];
        let mask = fx.data.mask_of(i).unwrap();
        let mean = |im: &HdrImage| {
            let mut s = 0.0;
            for (k, &m) in mask.data.iter().enumerate() {
                if m {
                    let p = im.get(k % im.width, k / im.width);
                    s += luminance([p[0] as f64, p[1] as f64, p[2] as f64]);
                }
            }
            s / mask.count().max(1) as f64
        };
        back.push((psnr(&display(&pred), &display(gt)).unwrap(), mean(&pred), mean(gt)));
    }
    let back_ok = !back.is_empty() && back.iter().all(|&(p, m, g)| p >= 20.0 && m > 0.0 && g > 0.0);
    let back_psnrs: Vec<String> = back.iter().map(|b| format!("{:.1}", b.0)).collect();
    let min_radiance = back.iter().map(|b| b.1).fold(f64::INFINITY, f64::min);
    let secs = train_secs + t0.elapsed().as_secs_f64();
    outcome(
        tr.mean_psnr >= 28.0 && held.mean_psnr >= 24.0 && back_ok && secs < 3600.0 && fx.cfg.steps <= 20_000,
        format!(
            "{} steps: training views {:.2} dB >= 28 ({} images), held-out {:.2} dB >= 24 ({} cases), \
             back-lit [{}] dB each >= 20 with min mean radiance {:.3e} > 0, {secs:.0}s < 3600s",
            fx.cfg.steps,
            tr.mean_psnr,
            tr.cases.len(),
            held.mean_psnr,
            held.cases.len(),
            back_psnrs.join(", "),
            min_radiance
        ),
    )
}

fn mask_efficacy(fx: &mut Fixture) -> Outcome {
    fx.train();
    let field = fx.field();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut inside, mut empty) = (Vec::new(), Vec::new());
    while inside.len() < 4000 || empty.len() < 4000 {
        let p = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        if p.norm() > 2.0 {
            continue;
        }
        let s = field.eval_density(Level::Fine, p).unwrap();
        if inside_any(&fx.scene, p) {
            inside.push(s);
        } else if p.norm() - 1.0 > 0.1 {
            empty.push(s);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ratio = mean(&empty) / mean(&inside);
    outcome(
        ratio < 1e-3,
        format!(
            "mean sigma empty {:.3e} / inside {:.3e} = {ratio:.2e} < 1e-3",
            mean(&empty),
            mean(&inside)
        ),
    )
}

fn determinism(fx: &mut Fixture) -> Outcome {
    let mut cfg = fx.cfg.clone();
    cfg.steps = 1000;
    let a = train(&fx.data, &cfg, None, None, |_| {}).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
    let b = pool.install(|| train(&fx.data, &cfg, None, None, |_| {}).unwrap());
    let bits = |s: &TrainState| -> Vec<[u64; 4]> {
        s.history
            .iter()
            .map(|r| [r.total.to_bits(), r.color.to_bits(), r.mask.to_bits(), r.grad_norm_fine.to_bits()])
            .collect()
    };
    let same = a.history.len() == 1000 && bits(&a) == bits(&b) && a.field == b.field;
    outcome(
        same,
        format!(
            "two 1000-step runs (default pool vs 2 threads): loss histories bit-identical: {}, parameters identical: {}",
            bits(&a) == bits(&b),
            a.field == b.field
        ),
    )
}

fn protocol_counts(fx: &mut Fixture) -> Outcome {
    let grid = olat_grid(&OlatGridSpec::default()).unwrap();
    let train_dirs = grid.iter().filter(|g| g.split == Split::Train).count();
    let sampler = RaySampler::new(&fx.data, None, 0.25).unwrap();
    let mut exact = true;
    for step in 0..100 {
        let b = sampler.sample(256, &mut step_rng(11, step)).unwrap();
        exact &= b.count(Region::Foreground) == 128
            && b.count(Region::NearSilhouette) == 96
            && b.count(Region::Background) + b.count(Region::Padded) == 32;
    }
    outcome(
        grid.len() == 224 && train_dirs == 112 && exact,
        format!(
            "OLAT grid {} directions / {} train (224 / 112); 100 batches of 256 split 128/96/32: {exact}",
            grid.len(),
            train_dirs
        ),
    )
}

type Criterion = (u32, &'static str, fn(&mut Fixture) -> Outcome);

fn main() {
    // Cargo passes harness flags (e.g. `--nocapture`); none apply here.
    let only: Option<Vec<u32>> = std::env::var("PRTG_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [Criterion; 9] = [
        (2, "gradient fidelity", gradient_fidelity),
        (3, "volume-rendering conservation", conservation),
        (4, "median-cut energy conservation", median_cut_energy),
        (5, "envmap linearity", envmap_linearity),
        (6, "median-cut vs per-pixel lights", median_cut_accuracy),
        (7, "overfit benchmark", overfit_benchmark),
        (8, "mask-loss efficacy", mask_efficacy),
        (9, "determinism", determinism),
        (10, "protocol counts", protocol_counts),
    ];
    let t0 = Instant::now();
    let mut fx = Fixture::new();
    println!("acceptance: oracle dataset with {} images", fx.data.images.len());
    println!("[N/A ] 1 paper-scale results: need the original capture data and GPU-scale training");
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let o = run(&mut fx);
        if !o.pass {
            failed += 1;
        }
        println!("[{}] {id} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {failed} failed, {:.0}s", t0.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
