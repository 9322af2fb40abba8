//! Ray sampling and volume integration of the transfer gradient.
//!
//! For samples `t_1 < … < t_N` with segment lengths `δ_i = t_{i+1} - t_i`
//! (the last segment ends at the far bound), a pixel is
//! `I = Σ_i w_i h_i` with `w_i = T_i (1 - exp(-σ_i δ_i))` and
//! `T_i = exp(-Σ_{j<i} σ_j δ_j)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{encode_rows, FieldParams, Level};
use crate::math::Vec3;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
    /// Continuous image coordinates the ray was generated from.
    pub pixel: (f64, f64),
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, near: f64, far: f64, pixel: (f64, f64)) -> Result<Ray> {
        if !(near >= 0.0 && near < far) {
            return Err(Error::invalid(format!("ray bounds [{near}, {far}]")));
        }
        if !direction.is_unit(1e-6) {
            return Err(Error::invalid("ray direction must be unit length"));
        }
        Ok(Ray {
            origin,
            direction,
            near,
            far,
            pixel,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn with_bounds(&self, near: f64, far: f64) -> Result<Ray> {
        Ray::new(self.origin, self.direction, near, far, self.pixel)
    }
}

/// Sorted sample depths and their segment lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl SampleSet {
    /// Sorts, forces strict increase and derives segment lengths, capping
    /// the last one at `far`.
    pub fn from_depths(mut depths: Vec<f64>, far: f64) -> SampleSet {
        depths.sort_by(|a, b| a.total_cmp(b));
        for i in 1..depths.len() {
            if depths[i] <= depths[i - 1] {
                depths[i] = next_up(depths[i - 1]);
            }
        }
        let n = depths.len();
        let mut deltas = Vec::with_capacity(n);
        for i in 0..n {
            let end = if i + 1 < n { depths[i + 1] } else { far };
            let d = end - depths[i];
            deltas.push(if d > 0.0 { d } else { f64::EPSILON * end.abs().max(1.0) });
        }
        SampleSet { depths, deltas }
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn positions(&self, ray: &Ray) -> Vec<[f64; 3]> {
        self.depths.iter().map(|&t| ray.at(t).to_array()).collect()
    }
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    f64::from_bits(if x > 0.0 { bits + 1 } else { bits - 1 })
}

/// One jittered sample per equal-width bin of `[near, far]`. With `rng`
/// absent, samples sit at the bin centers.
pub fn sample_stratified<R: Rng>(ray: &Ray, n: usize, rng: Option<&mut R>) -> Result<SampleSet> {
    if n < 2 {
        return Err(Error::invalid("stratified sampling needs at least 2 samples"));
    }
    let width = (ray.far - ray.near) / n as f64;
    let depths: Vec<f64> = match rng {
        Some(rng) => (0..n)
            .map(|k| ray.near + (k as f64 + rng.gen::<f64>()) * width)
            .collect(),
        None => (0..n).map(|k| ray.near + (k as f64 + 0.5) * width).collect(),
    };
    Ok(SampleSet::from_depths(depths, ray.far))
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightProfile {
    pub weights: Vec<f64>,
    /// `T_i`, the transmittance reaching sample `i`.
    pub transmittance: Vec<f64>,
    /// Transmittance left after the last sample.
    pub residual: f64,
}

impl WeightProfile {
    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }
}

pub fn compute_weights(sigma: &[f64], delta: &[f64]) -> Result<WeightProfile> {
    if sigma.len() != delta.len() {
        return Err(Error::shape(format!(
            "compute_weights: {} densities vs {} segments",
            sigma.len(),
            delta.len()
        )));
    }
    if sigma.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::invalid("densities must be non-negative"));
    }
    if delta.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::invalid("segment lengths must be positive"));
    }
    let mut weights = Vec::with_capacity(sigma.len());
    let mut transmittance = Vec::with_capacity(sigma.len());
    let mut optical_depth = 0.0f64;
    for (s, d) in sigma.iter().zip(delta) {
        let trans = (-optical_depth).exp();
        let tau = s * d;
        transmittance.push(trans);
        // T_i - T_{i+1}; -expm1 keeps thin segments accurate.
        weights.push(trans * -(-tau).exp_m1());
        optical_depth += tau;
    }
    Ok(WeightProfile {
        weights,
        transmittance,
        residual: (-optical_depth).exp(),
    })
}

pub fn integrate_transfer(w: &WeightProfile, h: &[[f64; 3]]) -> Result<[f64; 3]> {
    if w.weights.len() != h.len() {
        return Err(Error::shape(format!(
            "integrate_transfer: {} weights vs {} samples",
            w.weights.len(),
            h.len()
        )));
    }
    let mut out = [0.0; 3];
    for (wi, hi) in w.weights.iter().zip(h) {
        for c in 0..3 {
            out[c] += wi * hi[c];
        }
    }
    Ok(out)
}

/// Fraction of the hierarchical PDF spread uniformly over the coarse bins.
pub const PDF_UNIFORM_FLOOR: f64 = 0.05;

/// Draws `n_fine` depths from the piecewise-constant PDF over the coarse
/// segments `[t_i, t_i + δ_i)` proportional to `0.95·ŵ/Σŵ + 0.05/N`, and
/// merges them with the coarse depths. Without `rng` the draws use evenly
/// spaced quantiles.
pub fn sample_hierarchical<R: Rng>(
    ray: &Ray,
    coarse: &SampleSet,
    weights: &WeightProfile,
    n_fine: usize,
    rng: Option<&mut R>,
) -> Result<SampleSet> {
    if n_fine == 0 {
        return Err(Error::invalid("hierarchical sampling needs n_fine >= 1"));
    }
    if coarse.len() != weights.weights.len() || coarse.is_empty() {
        return Err(Error::shape("coarse samples and weights differ in length"));
    }
    let quantiles: Vec<f64> = match rng {
        Some(rng) => (0..n_fine).map(|_| rng.gen::<f64>()).collect(),
        None => (0..n_fine)
            .map(|k| (k as f64 + 0.5) / n_fine as f64)
            .collect(),
    };
    let mut depths = coarse.depths.clone();
    depths.extend(inverse_cdf(coarse, &weights.weights, &quantiles));
    Ok(SampleSet::from_depths(depths, ray.far))
}

/// Bin probabilities used by [`sample_hierarchical`].
pub fn hierarchical_pdf(weights: &[f64]) -> Vec<f64> {
    let n = weights.len() as f64;
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return vec![1.0 / n; weights.len()];
    }
    weights
        .iter()
        .map(|w| (1.0 - PDF_UNIFORM_FLOOR) * w / total + PDF_UNIFORM_FLOOR / n)
        .collect()
}

fn inverse_cdf(coarse: &SampleSet, weights: &[f64], quantiles: &[f64]) -> Vec<f64> {
    let pdf = hierarchical_pdf(weights);
    let mut cdf = Vec::with_capacity(pdf.len() + 1);
    cdf.push(0.0);
    for p in &pdf {
        cdf.push(cdf.last().unwrap() + p);
    }
    let total = *cdf.last().unwrap();
    quantiles
        .iter()
        .map(|&q| {
            let u = q * total;
            // last bin whose lower cdf edge is <= u
            let j = cdf[1..].partition_point(|&c| c <= u).min(pdf.len() - 1);
            let frac = if pdf[j] > 0.0 {
                ((u - cdf[j]) / pdf[j]).clamp(0.0, 1.0)
            } else {
                0.5
            };
            coarse.depths[j] + frac * coarse.deltas[j]
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Overrides the per-ray near bound when set.
    pub near: Option<f64>,
    /// Overrides the per-ray far bound when set.
    pub far: Option<f64>,
    pub seed: u64,
    /// Rays evaluated per network batch.
    pub batch_rows: usize,
    /// Jittered stratified and random hierarchical samples; off gives bin
    /// centers and evenly spaced quantiles.
    pub jitter: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_coarse: 64,
            n_fine: 64,
            near: None,
            far: None,
            seed: 0,
            batch_rows: 256,
            jitter: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_coarse < 2 || self.n_fine == 0 || self.batch_rows == 0 {
            return Err(Error::invalid(format!("render config {self:?}")));
        }
        Ok(())
    }

    pub fn bounded(&self, ray: &Ray) -> Result<Ray> {
        ray.with_bounds(self.near.unwrap_or(ray.near), self.far.unwrap_or(ray.far))
    }
}

/// Per-ray generator: stream `ray_index` of the configured seed.
pub fn ray_rng(seed: u64, ray_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ray_index);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelRender {
    pub coarse: [f64; 3],
    pub fine: [f64; 3],
}

/// Coarse and fine sample sets for one ray, plus the fine weights.
#[derive(Clone, Debug)]
pub struct RayPlan {
    pub coarse: SampleSet,
    pub coarse_weights: WeightProfile,
    pub fine: SampleSet,
}

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data.iter().map(|&v| v as f64).collect()
}

fn densities(field: &FieldParams<f32>, level: Level, points: &[[f64; 3]]) -> Result<Vec<f64>> {
    let enc = encode_rows::<f32>(points, field.arch.l_pos);
    let sigma = field.density_batch(level, &enc);
    if !sigma.all_finite() {
        return Err(Error::non_finite(format!("{} density", level.name())));
    }
    Ok(to_f64(&sigma))
}

/// Plans coarse and fine samples for a batch of rays. Only densities are
/// evaluated, so the plan is shared by every light direction.
pub fn plan_rays<R: Rng>(
    field: &FieldParams<f32>,
    rays: &[Ray],
    cfg: &RenderConfig,
    rngs: &mut [Option<R>],
) -> Result<Vec<RayPlan>> {
    let mut coarse_sets = Vec::with_capacity(rays.len());
    let mut points = Vec::with_capacity(rays.len() * cfg.n_coarse);
    for (ray, rng) in rays.iter().zip(rngs.iter_mut()) {
        let set = sample_stratified(ray, cfg.n_coarse, rng.as_mut())?;
        points.extend(set.positions(ray));
        coarse_sets.push(set);
    }
    let sigma = densities(field, Level::Coarse, &points)?;
    let mut plans = Vec::with_capacity(rays.len());
    for (r, (ray, coarse)) in rays.iter().zip(coarse_sets).enumerate() {
        let s = &sigma[r * cfg.n_coarse..(r + 1) * cfg.n_coarse];
        let coarse_weights = compute_weights(s, &coarse.deltas)?;
        let fine = sample_hierarchical(ray, &coarse, &coarse_weights, cfg.n_fine, rngs[r].as_mut())?;
        plans.push(RayPlan {
            coarse,
            coarse_weights,
            fine,
        });
    }
    Ok(plans)
}

/// Transfer-gradient integration for many lights over fixed ray plans.
/// Returns `out[ray][light]`.
fn integrate_lights(
    field: &FieldParams<f32>,
    level: Level,
    rays: &[Ray],
    sets: &[&SampleSet],
    weights: &[WeightProfile],
    lights: &LightsPerRay,
) -> Result<Vec<Vec<[f64; 3]>>> {
    let samples = sets[0].len();
    let mut points = Vec::with_capacity(rays.len() * samples);
    for (ray, set) in rays.iter().zip(sets) {
        points.extend(set.positions(ray));
    }
    let views: Vec<[f64; 3]> = rays.iter().map(|r| r.direction.to_array()).collect();
    let enc_x = encode_rows::<f32>(&points, field.arch.l_pos);
    let enc_v = encode_rows::<f32>(&views, field.arch.l_dir);
    let base = field.transfer_head_base(level, &enc_x, &enc_v, samples);
    let mut out = vec![Vec::with_capacity(lights.count()); rays.len()];
    for k in 0..lights.count() {
        let dirs = lights.directions(k, rays.len());
        let enc_l = encode_rows::<f32>(&dirs, field.arch.l_dir);
        let light_term = field.transfer_light_term(level, &enc_l);
        let h = field.transfer_head_finish(level, &base, &light_term, samples);
        if !h.all_finite() {
            return Err(Error::non_finite(format!("{} transfer gradient", level.name())));
        }
        for (r, w) in weights.iter().enumerate() {
            let rows: Vec<[f64; 3]> = (r * samples..(r + 1) * samples)
                .map(|i| [h.at(i, 0) as f64, h.at(i, 1) as f64, h.at(i, 2) as f64])
                .collect();
            out[r].push(integrate_transfer(w, &rows)?);
        }
    }
    Ok(out)
}

enum LightsPerRay<'a> {
    /// One light per ray.
    PerRay(&'a [Vec3]),
    /// Every ray sees every light in the list.
    Shared(&'a [Vec3]),
}

impl LightsPerRay<'_> {
    fn count(&self) -> usize {
        match self {
            LightsPerRay::PerRay(_) => 1,
            LightsPerRay::Shared(l) => l.len(),
        }
    }

    fn directions(&self, k: usize, rays: usize) -> Vec<[f64; 3]> {
        match self {
            LightsPerRay::PerRay(l) => l.iter().map(|d| d.to_array()).collect(),
            LightsPerRay::Shared(l) => vec![l[k].to_array(); rays],
        }
    }
}

fn fine_weights(field: &FieldParams<f32>, rays: &[Ray], plans: &[RayPlan]) -> Result<Vec<WeightProfile>> {
    let samples = plans[0].fine.len();
    let mut points = Vec::with_capacity(rays.len() * samples);
    for (ray, p) in rays.iter().zip(plans) {
        points.extend(p.fine.positions(ray));
    }
    let sigma = densities(field, Level::Fine, &points)?;
    plans
        .iter()
        .enumerate()
        .map(|(r, p)| compute_weights(&sigma[r * samples..(r + 1) * samples], &p.fine.deltas))
        .collect()
}

fn render_chunk(
    field: &FieldParams<f32>,
    rays: &[Ray],
    first_index: u64,
    lights: LightsPerRay,
    cfg: &RenderConfig,
) -> Result<(Vec<Vec<[f64; 3]>>, Vec<Vec<[f64; 3]>>)> {
    let rays: Vec<Ray> = rays.iter().map(|r| cfg.bounded(r)).collect::<Result<_>>()?;
    let mut rngs: Vec<Option<ChaCha8Rng>> = (0..rays.len())
        .map(|i| cfg.jitter.then(|| ray_rng(cfg.seed, first_index + i as u64)))
        .collect();
    let plans = plan_rays(field, &rays, cfg, &mut rngs)?;
    let coarse_sets: Vec<&SampleSet> = plans.iter().map(|p| &p.coarse).collect();
    let coarse_w: Vec<WeightProfile> = plans.iter().map(|p| p.coarse_weights.clone()).collect();
    let coarse = integrate_lights(field, Level::Coarse, &rays, &coarse_sets, &coarse_w, &lights)?;
    let fine_sets: Vec<&SampleSet> = plans.iter().map(|p| &p.fine).collect();
    let fine_w = fine_weights(field, &rays, &plans)?;
    let fine = integrate_lights(field, Level::Fine, &rays, &fine_sets, &fine_w, &lights)?;
    Ok((coarse, fine))
}

/// Renders one pixel through the coarse and fine networks.
pub fn render_pixel(
    field: &FieldParams<f32>,
    ray: &Ray,
    light: Vec3,
    cfg: &RenderConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<PixelRender> {
    cfg.validate()?;
    let ray = cfg.bounded(ray)?;
    let mut rngs = [rng];
    let plans = plan_rays(field, std::slice::from_ref(&ray), cfg, &mut rngs)?;
    let lights = [light];
    let coarse = integrate_lights(
        field,
        Level::Coarse,
        std::slice::from_ref(&ray),
        &[&plans[0].coarse],
        std::slice::from_ref(&plans[0].coarse_weights),
        &LightsPerRay::PerRay(&lights),
    )?;
    let fw = fine_weights(field, std::slice::from_ref(&ray), &plans)?;
    let fine = integrate_lights(
        field,
        Level::Fine,
        std::slice::from_ref(&ray),
        &[&plans[0].fine],
        &fw,
        &LightsPerRay::PerRay(&lights),
    )?;
    Ok(PixelRender {
        coarse: coarse[0][0],
        fine: fine[0][0],
    })
}

/// Renders many rays, each under its own light, in `batch_rows` chunks.
/// Ray `i` uses generator stream `i`, so results do not depend on chunking
/// or thread count.
pub fn render_rays(
    field: &FieldParams<f32>,
    rays: &[Ray],
    lights: &[Vec3],
    cfg: &RenderConfig,
) -> Result<Vec<PixelRender>> {
    cfg.validate()?;
    if rays.len() != lights.len() {
        return Err(Error::shape("render_rays: one light per ray required"));
    }
    let chunks: Vec<Result<Vec<PixelRender>>> = rays
        .par_chunks(cfg.batch_rows)
        .zip(lights.par_chunks(cfg.batch_rows))
        .enumerate()
        .map(|(c, (rs, ls))| {
            let (coarse, fine) = render_chunk(
                field,
                rs,
                (c * cfg.batch_rows) as u64,
                LightsPerRay::PerRay(ls),
                cfg,
            )?;
            Ok(coarse
                .into_iter()
                .zip(fine)
                .map(|(c, f)| PixelRender {
                    coarse: c[0],
                    fine: f[0],
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(rays.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Fine renders of every ray under every light: `out[ray][light]`.
/// Samples are planned once per ray and shared across lights.
pub fn render_rays_all_lights(
    field: &FieldParams<f32>,
    rays: &[Ray],
    lights: &[Vec3],
    cfg: &RenderConfig,
) -> Result<Vec<Vec<[f64; 3]>>> {
    cfg.validate()?;
    if lights.is_empty() {
        return Ok(vec![Vec::new(); rays.len()]);
    }
    let chunks: Vec<Result<Vec<Vec<[f64; 3]>>>> = rays
        .par_chunks(cfg.batch_rows)
        .enumerate()
        .map(|(c, rs)| {
            let (_, fine) = render_chunk(
                field,
                rs,
                (c * cfg.batch_rows) as u64,
                LightsPerRay::Shared(lights),
                cfg,
            )?;
            Ok(fine)
        })
        .collect();
    let mut out = Vec::with_capacity(rays.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}
