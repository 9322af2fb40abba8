//! Image metrics and the held-out evaluation protocol.
//!
//! Metrics are computed on `y/(1+y)` tonemapped images clamped to `[0, 1]`,
//! over every pixel including the background.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::dataset::{OlatDataset, Split};
use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::image::HdrImage;
use crate::lighting::{relight_rays, DirectionalLight};
use crate::math::Vec3;
use crate::render::{render_rays, render_rays_all_lights, Ray, RenderConfig};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Light-view cosine below which a case counts as back-lit.
pub const BACK_LIT_COSINE: f64 = -0.5;

pub fn tonemap(y: f64) -> f64 {
    let y = y.max(0.0);
    (y / (1.0 + y)).clamp(0.0, 1.0)
}

/// Tonemapped, clamped copy for metric evaluation.
pub fn display(img: &HdrImage) -> HdrImage {
    img.map(|v| tonemap(v as f64) as f32)
}

/// Both images must match in size and already be in display range; HDR
/// input is a caller error (see [`display`]).
fn same_shape(a: &HdrImage, b: &HdrImage) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if [a, b].iter().any(|im| im.pixels.iter().flatten().any(|v| !(0.0..=1.0).contains(v))) {
        return Err(Error::invalid("metric inputs must be display images in [0, 1]"));
    }
    Ok(())
}

/// `10·log10(1/MSE)` over all pixels and channels of display-range images,
/// capped at [`PSNR_CAP`].
pub fn psnr(pred: &HdrImage, gt: &HdrImage) -> Result<f64> {
    same_shape(pred, gt)?;
    let n = (pred.pixels.len() * 3) as f64;
    let mse = pred
        .pixels
        .iter()
        .zip(&gt.pixels)
        .flat_map(|(p, g)| (0..3).map(move |c| (p[c] as f64 - g[c] as f64).powi(2)))
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian of [`SSIM_WINDOW`] taps.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter keeping only windows fully inside the image.
fn filter_valid(data: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5), per channel,
/// then averaged over channels. Inputs are expected in `[0, 1]`.
pub fn ssim(pred: &HdrImage, gt: &HdrImage) -> Result<f64> {
    same_shape(pred, gt)?;
    let (w, h) = (pred.width, pred.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let k = gaussian_taps();
    let mut total = 0.0;
    for c in 0..3 {
        let a: Vec<f64> = pred.pixels.iter().map(|p| p[c] as f64).collect();
        let b: Vec<f64> = gt.pixels.iter().map(|p| p[c] as f64).collect();
        let prod = |f: &dyn Fn(usize) -> f64| (0..a.len()).map(f).collect::<Vec<f64>>();
        let (mu_a, ow, oh) = filter_valid(&a, w, h, &k);
        let (mu_b, ..) = filter_valid(&b, w, h, &k);
        let (aa, ..) = filter_valid(&prod(&|i| a[i] * a[i]), w, h, &k);
        let (bb, ..) = filter_valid(&prod(&|i| b[i] * b[i]), w, h, &k);
        let (ab, ..) = filter_valid(&prod(&|i| a[i] * b[i]), w, h, &k);
        let mut acc = 0.0;
        for i in 0..ow * oh {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}

/// One ray per pixel, row-major.
pub fn camera_rays(camera: &Camera, near: f64, far: f64) -> Result<Vec<Ray>> {
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            rays.push(camera.pixel_ray(x as i64, y as i64, near, far)?);
        }
    }
    Ok(rays)
}

fn to_image(w: usize, h: usize, px: impl Iterator<Item = [f64; 3]>) -> Result<HdrImage> {
    HdrImage::from_pixels(w, h, px.map(|p| [p[0] as f32, p[1] as f32, p[2] as f32]).collect())
}

/// Fine-level HDR render of a full camera image under one light.
pub fn render_image(
    field: &FieldParams<f32>,
    camera: &Camera,
    bounds: (f64, f64),
    light: Vec3,
    cfg: &RenderConfig,
) -> Result<HdrImage> {
    let rays = camera_rays(camera, bounds.0, bounds.1)?;
    let lights = vec![light; rays.len()];
    let px = render_rays(field, &rays, &lights, cfg)?;
    to_image(camera.width, camera.height, px.into_iter().map(|p| p.fine))
}

/// Fine-level renders of one camera under several lights, sharing samples.
pub fn render_images(
    field: &FieldParams<f32>,
    camera: &Camera,
    bounds: (f64, f64),
    lights: &[Vec3],
    cfg: &RenderConfig,
) -> Result<Vec<HdrImage>> {
    let rays = camera_rays(camera, bounds.0, bounds.1)?;
    let px = render_rays_all_lights(field, &rays, lights, cfg)?;
    (0..lights.len())
        .map(|k| to_image(camera.width, camera.height, px.iter().map(|p| p[k])))
        .collect()
}

/// HDR render of a full camera image relit by a set of directional lights.
pub fn render_relit_image(
    field: &FieldParams<f32>,
    camera: &Camera,
    bounds: (f64, f64),
    lights: &[DirectionalLight],
    cfg: &RenderConfig,
) -> Result<HdrImage> {
    let rays = camera_rays(camera, bounds.0, bounds.1)?;
    let px = relight_rays(field, &rays, lights, cfg)?;
    to_image(camera.width, camera.height, px.into_iter())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub render: RenderConfig,
    /// Held-out views evaluated, evenly strided; all when absent.
    pub max_views: Option<usize>,
    /// Held-out lights evaluated, evenly strided; all when absent.
    pub max_lights: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            render: RenderConfig::default(),
            max_views: Some(4),
            max_lights: Some(4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub image: usize,
    pub camera: usize,
    pub light: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Cosine between the light direction and the direction to the camera.
    pub light_view_cosine: f64,
    pub back_lit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scene: String,
    pub cases: Vec<CaseReport>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub lpips: String,
    pub includes_background: bool,
    pub config_fingerprint: String,
    pub runtime_seconds: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: "<report>".into(),
            source: e,
        })
    }
}

fn strided(items: &[usize], n: Option<usize>) -> Vec<usize> {
    match n {
        Some(n) if n < items.len() => (0..n).map(|k| items[k * items.len() / n]).collect(),
        _ => items.to_vec(),
    }
}

/// FNV-1a over the JSON of the evaluation config.
fn fingerprint(cfg: &EvalConfig) -> String {
    let json = serde_json::to_string(cfg).unwrap_or_default();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Test-split images of the configured (view, light) subset, in manifest
/// order of cameras then lights.
pub fn default_cases(dataset: &OlatDataset, cfg: &EvalConfig) -> Result<Vec<usize>> {
    let test = dataset.image_indices(Split::Test);
    if test.is_empty() {
        return Err(Error::invalid("dataset has no test images"));
    }
    let key = |i: usize| {
        let r = &dataset.manifest.images[i];
        (r.group, r.camera, r.light)
    };
    let mut cams: Vec<usize> = test.iter().map(|&i| dataset.manifest.images[i].camera).collect();
    cams.sort_unstable();
    cams.dedup();
    let mut lights: Vec<usize> = test.iter().map(|&i| dataset.manifest.images[i].light).collect();
    lights.sort_unstable();
    lights.dedup();
    let (cams, lights) = (strided(&cams, cfg.max_views), strided(&lights, cfg.max_lights));
    let mut out = Vec::new();
    for &c in &cams {
        for &l in &lights {
            let i = test
                .iter()
                .copied()
                .find(|&i| key(i).1 == c && key(i).2 == l)
                .ok_or_else(|| Error::invalid(format!("no test image for camera {c}, light {l}")))?;
            out.push(i);
        }
    }
    Ok(out)
}

/// Renders and scores the given dataset images.
pub fn evaluate_images(
    field: &FieldParams<f32>,
    dataset: &OlatDataset,
    images: &[usize],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let started = Instant::now();
    // group by camera so samples are shared across that camera's lights
    let mut by_camera: Vec<(usize, Vec<usize>)> = Vec::new();
    for &i in images {
        let r = &dataset.manifest.images[i];
        let key = r.group * 1_000_000 + r.camera;
        match by_camera.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(i),
            None => by_camera.push((key, vec![i])),
        }
    }
    let per_camera: Vec<Result<Vec<CaseReport>>> = by_camera
        .par_iter()
        .map(|(_, imgs)| {
            let cam = dataset.camera_of(imgs[0]);
            let lights: Vec<Vec3> = imgs.iter().map(|&i| dataset.light_of(i).direction).collect();
            let renders = render_images(field, cam, dataset.manifest.ray_bounds(cam), &lights, &cfg.render)?;
            let to_cam = (cam.center() - dataset.manifest.bounds.center).normalized();
            imgs.iter()
                .zip(renders)
                .map(|(&i, pred)| {
                    let gt = display(&dataset.images[i]);
                    let pred = display(&pred);
                    let r = &dataset.manifest.images[i];
                    let cosine = dataset.light_of(i).direction.dot(to_cam);
                    Ok(CaseReport {
                        image: i,
                        camera: r.camera,
                        light: r.light,
                        psnr: psnr(&pred, &gt)?,
                        ssim: ssim(&pred, &gt)?,
                        light_view_cosine: cosine,
                        back_lit: cosine < BACK_LIT_COSINE,
                    })
                })
                .collect()
        })
        .collect();
    let mut cases = Vec::with_capacity(images.len());
    for c in per_camera {
        cases.extend(c?);
    }
    // report in the caller's order
    cases.sort_by_key(|c| images.iter().position(|&i| i == c.image));
    let n = cases.len().max(1) as f64;
    Ok(EvalReport {
        scene: dataset.manifest.scene.clone(),
        mean_psnr: cases.iter().map(|c| c.psnr).sum::<f64>() / n,
        mean_ssim: cases.iter().map(|c| c.ssim).sum::<f64>() / n,
        cases,
        lpips: "unavailable: needs a pretrained network".into(),
        includes_background: true,
        config_fingerprint: fingerprint(cfg),
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Every configured (held-out view, held-out light) pair.
pub fn evaluate(field: &FieldParams<f32>, dataset: &OlatDataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let cases = default_cases(dataset, cfg)?;
    evaluate_images(field, dataset, &cases, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(w: usize, h: usize, f: impl Fn(usize, usize) -> f32) -> HdrImage {
        let mut img = HdrImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, [f(x, y); 3]);
            }
        }
        img
    }

    #[test]
    fn psnr_examples() {
        let a = image(4, 4, |x, y| (x + y) as f32 / 8.0);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&b, &a).unwrap() - 20.0).abs() < 1e-5);
        let zero = image(4, 4, |_, _| 0.0);
        let one = image(4, 4, |_, _| 1.0);
        assert_eq!(psnr(&zero, &one).unwrap(), 0.0);
        assert!(psnr(&zero, &image(3, 4, |_, _| 0.0)).is_err());
    }

    #[test]
    fn metrics_reject_hdr_input() {
        let hdr = image(12, 12, |x, _| x as f32);
        assert!(psnr(&hdr, &hdr).is_err());
        assert!(ssim(&hdr, &hdr).is_err());
        let shown = display(&hdr);
        assert_eq!(psnr(&shown, &shown).unwrap(), 99.0);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let gt = image(16, 16, |x, y| 0.2 + 0.5 * ((x * 7 + y * 3) % 11) as f32 / 11.0);
        let noisy = |amp: f32| image(16, 16, |x, y| gt.get(x, y)[0] + amp * if (x ^ y) & 1 == 0 { 1.0 } else { -1.0 });
        let p: Vec<f64> = [0.01, 0.05, 0.2].iter().map(|&a| psnr(&noisy(a), &gt).unwrap()).collect();
        assert!(p[0] > p[1] && p[1] > p[2]);
    }

    #[test]
    fn ssim_examples() {
        let gt = image(32, 32, |x, y| if (x / 4 + y / 4) % 2 == 0 { 0.0 } else { 1.0 });
        assert!((ssim(&gt, &gt).unwrap() - 1.0).abs() < 1e-12);
        let inv = gt.map(|v| 1.0 - v);
        assert!(ssim(&inv, &gt).unwrap() < 0.5);
        assert!(ssim(&image(10, 32, |_, _| 0.0), &image(10, 32, |_, _| 0.0)).is_err());
    }

    #[test]
    fn ssim_matches_reference_on_offset_gradient() {
        // reference: skimage structural_similarity(gaussian_weights=True,
        // sigma=1.5, use_sample_covariance=False, data_range=1)
        let gt = image(32, 32, |x, y| 0.9 * (x + y) as f32 / 62.0);
        let pred = gt.map(|v| v + 0.05);
        let s = ssim(&pred, &gt).unwrap();
        assert!(s < 1.0 && s > 0.8, "{s}");
        assert!((s - SSIM_OFFSET_REFERENCE).abs() < 1e-6, "{s}");
    }

    const SSIM_OFFSET_REFERENCE: f64 = 0.992_681_002_160_488;

    #[test]
    fn tonemap_is_bounded() {
        assert_eq!(tonemap(0.0), 0.0);
        assert_eq!(tonemap(1.0), 0.5);
        assert!(tonemap(1e30) <= 1.0);
        assert_eq!(tonemap(-2.0), 0.0);
    }
}
