//! Calibrates the overfit benchmark: generates the oracle translucent-sphere
//! dataset, trains, and reports training-view, held-out and back-lit PSNR
//! plus the empty-space density ratio.
//!
//! ```text
//! cargo run --release -p prtg-core --example calibrate -- steps=3000 batch=128
//! ```
//!
//! Arguments are training-config `key=value` pairs overriding the benchmark
//! config used by the acceptance suite.

use std::time::Instant;

use prtg_core::config::KeyValues;
use prtg_core::dataset::{OlatDataset, Split};
use prtg_core::eval::{evaluate_images, EvalConfig};
use prtg_core::oracle::{generate_dataset, inside_any, OracleScene, RigSpec};
use prtg_core::render::RenderConfig;
use prtg_core::train::{train, TrainConfig};
use prtg_core::{Level, Vec3};
use rand::{Rng, SeedableRng};

const BENCHMARK_CONFIG: &str = include_str!("../tests/data/overfit.cfg");

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut text = BENCHMARK_CONFIG
        .lines()
        .filter(|l| {
            let key = l.split('=').next().unwrap_or("").trim();
            !std::env::args().skip(1).any(|a| a.split('=').next() == Some(key))
        })
        .collect::<Vec<_>>()
        .join("\n");
    for a in std::env::args().skip(1) {
        text.push('\n');
        text.push_str(&a);
    }
    let cfg = TrainConfig::from_key_values(&KeyValues::parse(&text)?)?;
    println!("{}", cfg.to_key_values());

    let dir = tempfile::tempdir()?;
    let scene = OracleScene::translucent_sphere();
    let t0 = Instant::now();
    generate_dataset(&scene, &RigSpec::default(), dir.path())?;
    let data = OlatDataset::load(dir.path())?;
    println!("dataset: {} images in {:.1}s", data.images.len(), t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let state = train(&data, &cfg, None, None, |r| {
        if (r.step + 1) % 500 == 0 {
            println!(
                "step {:>6} loss {:.5} color {:.5} mask {:.3e} {:.1}s",
                r.step + 1,
                r.total,
                r.color,
                r.mask,
                t0.elapsed().as_secs_f64()
            );
        }
    })?;
    let train_secs = t0.elapsed().as_secs_f64();

    let eval = EvalConfig {
        render: RenderConfig {
            n_coarse: cfg.n_coarse,
            n_fine: cfg.n_fine,
            ..RenderConfig::default()
        },
        max_views: None,
        max_lights: None,
    };
    let train_imgs: Vec<usize> = data.image_indices(Split::Train).into_iter().step_by(16).collect();
    let t0 = Instant::now();
    let tr = evaluate_images(&state.field, &data, &train_imgs, &eval)?;
    let test = evaluate_images(&state.field, &data, &data.image_indices(Split::Test), &eval)?;
    let back: Vec<_> = test.cases.iter().filter(|c| c.back_lit).collect();
    let back_psnr = back.iter().map(|c| c.psnr).sum::<f64>() / back.len().max(1) as f64;
    println!("train {:.1}s, eval {:.1}s", train_secs, t0.elapsed().as_secs_f64());
    println!("train-view PSNR {:.2} dB over {} images", tr.mean_psnr, tr.cases.len());
    println!("held-out PSNR {:.2} dB over {} images", test.mean_psnr, test.cases.len());
    for c in &test.cases {
        println!("  cam {} light {} cos {:+.2} psnr {:.2} ssim {:.3}", c.camera, c.light, c.light_view_cosine, c.psnr, c.ssim);
    }
    println!("back-lit PSNR {:.2} dB over {} images", back_psnr, back.len());

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    while inside.len() < 2000 || outside.len() < 2000 {
        let p = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        if p.norm() > 2.0 {
            continue;
        }
        let s = state.field.eval_density(Level::Fine, p)?;
        if inside_any(&scene, p) {
            inside.push(s);
        } else if (p.norm() - 1.0) > 0.1 {
            outside.push(s);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "density inside {:.3e}, empty {:.3e}, ratio {:.3e}",
        mean(&inside),
        mean(&outside),
        mean(&outside) / mean(&inside)
    );
    Ok(())
}
