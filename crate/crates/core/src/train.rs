//! Losses, importance-sampled ray batches and the optimization loop.
//!
//! Each step draws a batch (1/2 foreground, 3/8 near-silhouette, 1/8
//! background including padded off-image rays), plans coarse and fine
//! samples with the current densities, and differentiates
//!
//! ```text
//! total = Σ_levels tonemapped(I_level, target) + λ · Σ_levels mean σ²(background samples)
//! ```
//!
//! with respect to both parameter levels. Sample depths and tonemap weights
//! are constants of the graph.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::checkpoint::{load_adam, load_field, save_adam, save_field};
use crate::config::{set, KeyValues};
use crate::dataset::{
    band_radius_for_width, compute_mask_bands, MaskBands, OlatDataset, Region, Split, DEFAULT_PAD_FRACTION,
};
use crate::error::{Error, Result};
use crate::field::{encode_rows, Architecture, FieldParams, Level};
use crate::math::Vec3;
use crate::optim::{decayed_lr, AdamConfig, AdamState};
use crate::render::{plan_rays, ray_rng, Ray, RayPlan, RenderConfig};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_EPS_TONEMAP: f64 = 1e-3;
pub const DEFAULT_LAMBDA_MASK: f64 = 0.1;

/// `Σ_c (p_c − t_c)² / (p_c + ε)²`; the weight is a constant of the
/// prediction, so it only rescales the gradient.
pub fn tonemapped_loss(pred: [f64; 3], target: [f64; 3], eps: f64) -> Result<f64> {
    if pred.iter().chain(&target).any(|v| !(*v >= 0.0)) {
        return Err(Error::invalid(format!(
            "tonemapped loss needs non-negative inputs, got {pred:?} vs {target:?}"
        )));
    }
    Ok((0..3)
        .map(|c| {
            let d = pred[c] - target[c];
            d * d / ((pred[c] + eps) * (pred[c] + eps))
        })
        .sum())
}

/// Mean of `σ²` over the given samples; zero for none.
pub fn mask_loss(sigma: &[f64]) -> f64 {
    if sigma.is_empty() {
        return 0.0;
    }
    sigma.iter().map(|s| s * s).sum::<f64>() / sigma.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    /// Raw HDR targets; zero for padded rays.
    pub targets: Vec<[f64; 3]>,
    pub regions: Vec<Region>,
    /// Whether the pixel is inside the foreground mask.
    pub in_mask: Vec<bool>,
    pub lights: Vec<Vec3>,
    /// Index into the dataset's image list.
    pub images: Vec<usize>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn count(&self, region: Region) -> usize {
        self.regions.iter().filter(|&&r| r == region).count()
    }
}

/// The three sampling pools of one camera, as indices into its padded grid.
#[derive(Clone, Debug)]
struct Pools {
    bands: MaskBands,
    /// Foreground, near-silhouette, background plus padded.
    lists: [Vec<usize>; 3],
}

/// Draws training ray batches from the train split of a dataset.
#[derive(Clone, Debug)]
pub struct RaySampler<'a> {
    dataset: &'a OlatDataset,
    train: Vec<usize>,
    pools: HashMap<(usize, usize), Pools>,
    by_light: HashMap<(usize, usize), Vec<usize>>,
}

impl<'a> RaySampler<'a> {
    /// Precomputes silhouette bands for every camera of the train split.
    /// `band_radius` defaults to the width-scaled radius.
    pub fn new(dataset: &'a OlatDataset, band_radius: Option<usize>, pad_fraction: f64) -> Result<Self> {
        let train = dataset.image_indices(Split::Train);
        if train.is_empty() {
            return Err(Error::invalid("dataset has no training images"));
        }
        let mut pools = HashMap::new();
        let mut by_light: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for &i in &train {
            let rec = &dataset.manifest.images[i];
            by_light.entry((rec.group, rec.light)).or_default().push(i);
            let key = (rec.group, rec.camera);
            if pools.contains_key(&key) {
                continue;
            }
            let mask = dataset
                .mask_of(i)
                .ok_or_else(|| Error::invalid(format!("no mask for group {} camera {}", rec.group, rec.camera)))?;
            let radius = band_radius.unwrap_or_else(|| band_radius_for_width(mask.width));
            let bands = compute_mask_bands(mask, radius, pad_fraction)?;
            let mut bg = bands.indices_of(Region::Background);
            bg.extend(bands.indices_of(Region::Padded));
            bg.sort_unstable();
            let lists = [
                bands.indices_of(Region::Foreground),
                bands.indices_of(Region::NearSilhouette),
                bg,
            ];
            pools.insert(key, Pools { bands, lists });
        }
        Ok(RaySampler {
            dataset,
            train,
            pools,
            by_light,
        })
    }

    pub fn bands(&self, group: usize, camera: usize) -> Option<&MaskBands> {
        self.pools.get(&(group, camera)).map(|p| &p.bands)
    }

    fn pool(&self, image: usize, slot: usize) -> &[usize] {
        let rec = &self.dataset.manifest.images[image];
        &self.pools[&(rec.group, rec.camera)].lists[slot]
    }

    /// A random train image whose pool `slot` is non-empty, preferring the
    /// drawn image, then other images under the same light.
    fn pick_image<R: Rng>(&self, slot: usize, rng: &mut R) -> Result<usize> {
        let first = self.train[rng.gen_range(0..self.train.len())];
        if !self.pool(first, slot).is_empty() {
            return Ok(first);
        }
        let rec = &self.dataset.manifest.images[first];
        let same_light: Vec<usize> = self.by_light[&(rec.group, rec.light)]
            .iter()
            .copied()
            .filter(|&i| !self.pool(i, slot).is_empty())
            .collect();
        if !same_light.is_empty() {
            return Ok(same_light[rng.gen_range(0..same_light.len())]);
        }
        let any: Vec<usize> = self
            .train
            .iter()
            .copied()
            .filter(|&i| !self.pool(i, slot).is_empty())
            .collect();
        if any.is_empty() {
            return Err(Error::invalid(format!("no training image has pixels in sampling pool {slot}")));
        }
        Ok(any[rng.gen_range(0..any.len())])
    }

    /// Exactly `batch/2` foreground, `3·batch/8` near-silhouette and
    /// `batch/8` background rays, in that order.
    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<RayBatch> {
        if batch == 0 || batch % 8 != 0 {
            return Err(Error::invalid(format!("batch size {batch} must be a positive multiple of 8")));
        }
        let quotas = [batch / 2, 3 * batch / 8, batch / 8];
        let mut out = RayBatch {
            rays: Vec::with_capacity(batch),
            targets: Vec::with_capacity(batch),
            regions: Vec::with_capacity(batch),
            in_mask: Vec::with_capacity(batch),
            lights: Vec::with_capacity(batch),
            images: Vec::with_capacity(batch),
        };
        for (slot, &quota) in quotas.iter().enumerate() {
            for _ in 0..quota {
                let image = self.pick_image(slot, rng)?;
                let rec = &self.dataset.manifest.images[image];
                let pools = &self.pools[&(rec.group, rec.camera)];
                let list = &pools.lists[slot];
                let (x, y) = pools.bands.pixel_of(list[rng.gen_range(0..list.len())]);
                let region = pools.bands.label_at(x, y);
                let (target, in_mask) = if region == Region::Padded {
                    ([0.0; 3], false)
                } else {
                    let p = self.dataset.images[image].get(x as usize, y as usize);
                    let m = self.dataset.mask_of(image).expect("checked at construction");
                    ([p[0] as f64, p[1] as f64, p[2] as f64], m.get(x as usize, y as usize))
                };
                out.rays.push(self.dataset.pixel_ray(image, x, y)?);
                out.targets.push(target);
                out.regions.push(region);
                out.in_mask.push(in_mask);
                out.lights.push(self.dataset.light_of(image).direction);
                out.images.push(image);
            }
        }
        Ok(out)
    }
}

/// Samples and targets of a set of rays, fixed for one differentiation.
#[derive(Clone, Debug)]
pub struct FrozenBatch {
    pub rays: usize,
    pub n_coarse: usize,
    /// Fine-level samples per ray: the coarse depths merged with the
    /// importance-sampled ones.
    pub n_fine: usize,
    pub coarse_points: Vec<[f64; 3]>,
    pub coarse_deltas: Vec<f64>,
    pub fine_points: Vec<[f64; 3]>,
    pub fine_deltas: Vec<f64>,
    pub views: Vec<[f64; 3]>,
    pub lights: Vec<[f64; 3]>,
    /// Targets after clamping at the HDR cutoff.
    pub targets: Vec<[f64; 3]>,
    /// Rays whose densities the mask loss penalizes.
    pub background: Vec<bool>,
}

impl FrozenBatch {
    /// Plans coarse and fine samples with the current coarse densities.
    pub fn plan(
        field: &FieldParams<f32>,
        rays: &[Ray],
        lights: &[Vec3],
        targets: &[[f64; 3]],
        background: &[bool],
        cfg: &RenderConfig,
        first_index: u64,
        cutoff: f64,
    ) -> Result<FrozenBatch> {
        let n = rays.len();
        if lights.len() != n || targets.len() != n || background.len() != n || n == 0 {
            return Err(Error::shape("frozen batch: per-ray inputs differ in length"));
        }
        let mut rngs: Vec<Option<ChaCha8Rng>> = (0..n)
            .map(|i| cfg.jitter.then(|| ray_rng(cfg.seed, first_index + i as u64)))
            .collect();
        let rays: Vec<Ray> = rays.iter().map(|r| cfg.bounded(r)).collect::<Result<_>>()?;
        let plans: Vec<RayPlan> = plan_rays(field, &rays, cfg, &mut rngs)?;
        let mut fb = FrozenBatch {
            rays: n,
            n_coarse: cfg.n_coarse,
            n_fine: cfg.n_coarse + cfg.n_fine,
            coarse_points: Vec::with_capacity(n * cfg.n_coarse),
            coarse_deltas: Vec::with_capacity(n * cfg.n_coarse),
            fine_points: Vec::with_capacity(n * cfg.n_fine),
            fine_deltas: Vec::with_capacity(n * cfg.n_fine),
            views: rays.iter().map(|r| r.direction.to_array()).collect(),
            lights: lights.iter().map(|l| l.to_array()).collect(),
            targets: targets
                .iter()
                .map(|t| [t[0].min(cutoff), t[1].min(cutoff), t[2].min(cutoff)])
                .collect(),
            background: background.to_vec(),
        };
        for (ray, p) in rays.iter().zip(&plans) {
            fb.coarse_points.extend(p.coarse.positions(ray));
            fb.coarse_deltas.extend(&p.coarse.deltas);
            fb.fine_points.extend(p.fine.positions(ray));
            fb.fine_deltas.extend(&p.fine.deltas);
        }
        Ok(fb)
    }

    fn level(&self, level: Level) -> (&[[f64; 3]], &[f64], usize) {
        match level {
            Level::Coarse => (&self.coarse_points, &self.coarse_deltas, self.n_coarse),
            Level::Fine => (&self.fine_points, &self.fine_deltas, self.n_fine),
        }
    }

    pub fn background_rays(&self) -> usize {
        self.background.iter().filter(|&&b| b).count()
    }
}

/// Loss weights and the normalizers of the full batch, so that chunks of a
/// batch can be differentiated separately and summed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub lambda_mask: f64,
    pub eps_tonemap: f64,
    /// Rays in the full batch.
    pub batch_rays: usize,
    /// Background rays in the full batch.
    pub background_rays: usize,
}

/// Per-ray, per-channel tonemap weights `1/(sg(pred)+ε)²` for each level.
#[derive(Clone, Debug, PartialEq)]
pub struct TonemapWeights {
    pub coarse: Vec<[f64; 3]>,
    pub fine: Vec<[f64; 3]>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub color_coarse: f64,
    pub color_fine: f64,
    pub mask_coarse: f64,
    pub mask_fine: f64,
    pub total: f64,
}

impl LossParts {
    pub fn color(&self) -> f64 {
        self.color_coarse + self.color_fine
    }

    pub fn mask(&self) -> f64 {
        self.mask_coarse + self.mask_fine
    }

    fn add(&mut self, o: &LossParts) {
        self.color_coarse += o.color_coarse;
        self.color_fine += o.color_fine;
        self.mask_coarse += o.mask_coarse;
        self.mask_fine += o.mask_fine;
        self.total += o.total;
    }
}

pub struct LossEval<T> {
    pub parts: LossParts,
    pub grads: Gradients<T>,
    pub weights: TonemapWeights,
}

struct LevelVars {
    color: Var,
    mask: Var,
}

fn level_graph<T: Real>(
    tape: &mut Tape<T>,
    vars: &crate::field::ParamVars,
    arch: &Architecture,
    fb: &FrozenBatch,
    level: Level,
    s: &LossSettings,
    fixed: Option<&[[f64; 3]]>,
    weights_out: &mut Vec<[f64; 3]>,
) -> Result<LevelVars> {
    let (points, deltas, samples) = fb.level(level);
    let enc_x = tape.constant(encode_rows::<T>(points, arch.l_pos));
    let enc_v = encode_rows::<T>(&fb.views, arch.l_dir);
    let enc_l = encode_rows::<T>(&fb.lights, arch.l_dir);
    let mut dirs = Vec::with_capacity(fb.rays * 2 * arch.dir_dim());
    for r in 0..fb.rays {
        dirs.extend_from_slice(enc_v.row(r));
        dirs.extend_from_slice(enc_l.row(r));
    }
    let enc_dirs = tape.constant(Tensor::from_vec(fb.rays, 2 * arch.dir_dim(), dirs));
    let sigma = vars.density(tape, level, enc_x);
    let h = vars.transfer(tape, level, enc_x, enc_dirs, samples);
    let delta = Tensor::from_vec(fb.rays, samples, deltas.iter().map(|&d| T::of(d)).collect());
    let pixel = tape.volume_integrate(sigma, h, delta)?;

    let pred = tape.value(pixel).clone();
    let weights: Vec<[f64; 3]> = match fixed {
        Some(w) => w.to_vec(),
        None => (0..fb.rays)
            .map(|r| {
                let mut w = [0.0; 3];
                for (c, wc) in w.iter_mut().enumerate() {
                    let p = pred.at(r, c).f64();
                    *wc = 1.0 / ((p + s.eps_tonemap) * (p + s.eps_tonemap));
                }
                w
            })
            .collect(),
    };
    let target = Tensor::from_vec(
        fb.rays,
        3,
        fb.targets.iter().flat_map(|t| t.iter().map(|&v| T::of(v))).collect(),
    );
    let wt = Tensor::from_vec(
        fb.rays,
        3,
        weights.iter().flat_map(|w| w.iter().map(|&v| T::of(v))).collect(),
    );
    let color = tape.weighted_squared_error(pixel, target, wt, T::of(s.batch_rays as f64))?;
    *weights_out = weights;

    // mean σ² over every background sample of the full batch
    let sel: Vec<T> = (0..fb.rays * samples)
        .map(|i| if fb.background[i / samples] { T::one() } else { T::zero() })
        .collect();
    let denom = (s.background_rays * samples).max(1) as f64;
    let mask = tape.weighted_squared_error(
        sigma,
        Tensor::zeros(fb.rays * samples, 1),
        Tensor::from_vec(fb.rays * samples, 1, sel),
        T::of(denom),
    )?;
    Ok(LevelVars { color, mask })
}

/// Differentiates the coarse+fine loss of a frozen batch. With `fixed`
/// weights the tonemap weights are taken as given instead of from the
/// current predictions.
pub fn loss_and_gradients<T: Real>(
    field: &FieldParams<T>,
    fb: &FrozenBatch,
    s: &LossSettings,
    fixed: Option<&TonemapWeights>,
) -> Result<LossEval<T>> {
    let mut tape = Tape::new();
    let vars = field.register(&mut tape);
    let mut wc = Vec::new();
    let mut wf = Vec::new();
    let coarse = level_graph(
        &mut tape,
        &vars,
        &field.arch,
        fb,
        Level::Coarse,
        s,
        fixed.map(|w| w.coarse.as_slice()),
        &mut wc,
    )?;
    let fine = level_graph(
        &mut tape,
        &vars,
        &field.arch,
        fb,
        Level::Fine,
        s,
        fixed.map(|w| w.fine.as_slice()),
        &mut wf,
    )?;
    let color = tape.add(coarse.color, fine.color);
    let mask = tape.add(coarse.mask, fine.mask);
    let mask = tape.scale(mask, T::of(s.lambda_mask));
    let total = tape.add(color, mask);
    let value = |tape: &Tape<T>, v: Var| tape.value(v).data[0].f64();
    let parts = LossParts {
        color_coarse: value(&tape, coarse.color),
        color_fine: value(&tape, fine.color),
        mask_coarse: value(&tape, coarse.mask),
        mask_fine: value(&tape, fine.mask),
        total: value(&tape, total),
    };
    if !parts.total.is_finite() {
        return Err(Error::non_finite("training loss"));
    }
    let grads = tape.backward(total, &field.shapes())?;
    Ok(LossEval {
        parts,
        grads,
        weights: TonemapWeights { coarse: wc, fine: wf },
    })
}

pub const TRAIN_KEYS: &[&str] = &[
    "steps",
    "batch",
    "lr",
    "lr_final",
    "lambda_mask",
    "eps_tonemap",
    "seed",
    "ckpt_every",
    "n_coarse",
    "n_fine",
    "chunk_rays",
    "pad_fraction",
    "band_radius",
    "log_every",
    "l_pos",
    "l_dir",
    "depth",
    "width",
    "skip",
    "head_width",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    /// Rays per step; a multiple of 8.
    pub batch: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub lambda_mask: f64,
    pub eps_tonemap: f64,
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub ckpt_every: u64,
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Rays per differentiated chunk; chunks are reduced in order.
    pub chunk_rays: usize,
    pub pad_fraction: f64,
    /// Silhouette band radius in pixels; width-scaled when absent.
    pub band_radius: Option<usize>,
    pub log_every: u64,
    pub arch: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch: 256,
            lr: 5e-4,
            lr_final: 5e-5,
            lambda_mask: DEFAULT_LAMBDA_MASK,
            eps_tonemap: DEFAULT_EPS_TONEMAP,
            seed: 0,
            ckpt_every: 1000,
            n_coarse: 64,
            n_fine: 64,
            chunk_rays: 64,
            pad_fraction: DEFAULT_PAD_FRACTION,
            band_radius: None,
            log_every: 100,
            arch: Architecture::desk(),
        }
    }
}

impl TrainConfig {
    pub fn from_key_values(kv: &KeyValues) -> Result<TrainConfig> {
        kv.reject_unknown(TRAIN_KEYS)?;
        let mut c = TrainConfig::default();
        set(kv, "steps", &mut c.steps)?;
        set(kv, "batch", &mut c.batch)?;
        set(kv, "lr", &mut c.lr)?;
        set(kv, "lr_final", &mut c.lr_final)?;
        set(kv, "lambda_mask", &mut c.lambda_mask)?;
        set(kv, "eps_tonemap", &mut c.eps_tonemap)?;
        set(kv, "seed", &mut c.seed)?;
        set(kv, "ckpt_every", &mut c.ckpt_every)?;
        set(kv, "n_coarse", &mut c.n_coarse)?;
        set(kv, "n_fine", &mut c.n_fine)?;
        set(kv, "chunk_rays", &mut c.chunk_rays)?;
        set(kv, "pad_fraction", &mut c.pad_fraction)?;
        set(kv, "log_every", &mut c.log_every)?;
        if let Some(v) = kv.get_optional("band_radius")? {
            c.band_radius = v;
        }
        set(kv, "l_pos", &mut c.arch.l_pos)?;
        set(kv, "l_dir", &mut c.arch.l_dir)?;
        set(kv, "depth", &mut c.arch.depth)?;
        set(kv, "width", &mut c.arch.width)?;
        set(kv, "head_width", &mut c.arch.head_width)?;
        if let Some(v) = kv.get_optional("skip")? {
            c.arch.skip = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        TrainConfig::from_key_values(&KeyValues::load(path)?).map_err(|e| Error::format(path, e.to_string()))
    }

    /// The config in the key-value format [`from_key_values`](Self::from_key_values) reads.
    pub fn to_key_values(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |v| v.to_string());
        let a = &self.arch;
        format!(
            "steps = {}\nbatch = {}\nlr = {:e}\nlr_final = {:e}\nlambda_mask = {}\neps_tonemap = {:e}\nseed = {}\n\
             ckpt_every = {}\nn_coarse = {}\nn_fine = {}\nchunk_rays = {}\npad_fraction = {}\nband_radius = {}\n\
             log_every = {}\nl_pos = {}\nl_dir = {}\ndepth = {}\nwidth = {}\nskip = {}\nhead_width = {}\n",
            self.steps,
            self.batch,
            self.lr,
            self.lr_final,
            self.lambda_mask,
            self.eps_tonemap,
            self.seed,
            self.ckpt_every,
            self.n_coarse,
            self.n_fine,
            self.chunk_rays,
            self.pad_fraction,
            opt(self.band_radius),
            self.log_every,
            a.l_pos,
            a.l_dir,
            a.depth,
            a.width,
            opt(a.skip),
            a.head_width
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.batch % 8 != 0 {
            return Err(Error::invalid(format!("batch {} must be a positive multiple of 8", self.batch)));
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.lambda_mask >= 0.0 && self.eps_tonemap > 0.0) {
            return Err(Error::invalid("lambda_mask must be >= 0 and eps_tonemap > 0"));
        }
        if self.chunk_rays == 0 {
            return Err(Error::invalid("chunk_rays must be positive"));
        }
        self.render_config(0).validate()?;
        self.arch.validate()
    }

    /// Jittered sampling for training step `step`.
    pub fn render_config(&self, step: u64) -> RenderConfig {
        RenderConfig {
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
            near: None,
            far: None,
            seed: step_seed(self.seed, step),
            batch_rows: self.chunk_rays,
            jitter: true,
        }
    }
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Generator for batch composition at `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub total: f64,
    pub color: f64,
    pub mask: f64,
    pub color_coarse: f64,
    pub color_fine: f64,
    pub mask_coarse: f64,
    pub mask_fine: f64,
    pub grad_norm_coarse: f64,
    pub grad_norm_fine: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub field: FieldParams<f32>,
    pub adam: AdamState<f32>,
    pub history: Vec<LossReport>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<TrainState> {
        let field = FieldParams::init(cfg.arch, cfg.seed)?;
        let adam = AdamState::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            &field.shapes(),
        );
        Ok(TrainState {
            field,
            adam,
            history: Vec::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// `field.prtg` (+ sidecar), `adam.bin` and `history.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_field(&dir.join(FIELD_FILE), &self.field)?;
        save_adam(&dir.join(ADAM_FILE), &self.adam)?;
        let path = dir.join(HISTORY_FILE);
        let json = serde_json::to_string(&self.history).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<TrainState> {
        let field = load_field(&dir.join(FIELD_FILE))?;
        let adam = load_adam(&dir.join(ADAM_FILE), &field.shapes())?;
        let path = dir.join(HISTORY_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let history = serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })?;
        Ok(TrainState { field, adam, history })
    }
}

pub const FIELD_FILE: &str = "field.prtg";
pub const ADAM_FILE: &str = "adam.bin";
pub const HISTORY_FILE: &str = "history.json";

/// One optimization step on `state`. Returns the report; on a non-finite
/// loss or gradient the state is left untouched.
pub fn train_step(state: &mut TrainState, sampler: &RaySampler, cfg: &TrainConfig) -> Result<LossReport> {
    let step = state.step();
    let batch = sampler.sample(cfg.batch, &mut step_rng(cfg.seed, step))?;
    let rcfg = cfg.render_config(step);
    let cutoff = sampler.dataset.manifest.hdr_cutoff;
    let background: Vec<bool> = batch.in_mask.iter().map(|m| !m).collect();
    let settings = LossSettings {
        lambda_mask: cfg.lambda_mask,
        eps_tonemap: cfg.eps_tonemap,
        batch_rays: batch.len(),
        background_rays: background.iter().filter(|&&b| b).count(),
    };
    let field = &state.field;
    let chunks: Vec<Result<LossEval<f32>>> = (0..batch.len().div_ceil(cfg.chunk_rays))
        .into_par_iter()
        .map(|c| {
            let r = c * cfg.chunk_rays..((c + 1) * cfg.chunk_rays).min(batch.len());
            let fb = FrozenBatch::plan(
                field,
                &batch.rays[r.clone()],
                &batch.lights[r.clone()],
                &batch.targets[r.clone()],
                &background[r.clone()],
                &rcfg,
                r.start as u64,
                cutoff,
            )?;
            loss_and_gradients(field, &fb, &settings, None)
        })
        .collect();
    let shapes = field.shapes();
    let mut grads = Gradients::<f32>::zeros(&shapes);
    let mut parts = LossParts::default();
    for c in chunks {
        let c = c?;
        grads.accumulate(&c.grads, 1.0);
        parts.add(&c.parts);
    }
    let recomposed = parts.color() + cfg.lambda_mask * parts.mask();
    if !parts.total.is_finite() || !grads.all_finite() {
        return Err(Error::non_finite(format!("loss or gradient at step {step}")));
    }
    if (parts.total - recomposed).abs() > 1e-4 * parts.total.abs().max(1.0) {
        return Err(Error::invalid(format!(
            "loss decomposition broken at step {step}: {} vs {recomposed}",
            parts.total
        )));
    }
    let arch = state.field.arch;
    let lr = decayed_lr(cfg.lr, cfg.lr_final, step, cfg.steps);
    let report = LossReport {
        step,
        total: parts.total,
        color: parts.color(),
        mask: parts.mask(),
        color_coarse: parts.color_coarse,
        color_fine: parts.color_fine,
        mask_coarse: parts.mask_coarse,
        mask_fine: parts.mask_fine,
        grad_norm_coarse: grads.norm(arch.level_range(Level::Coarse)),
        grad_norm_fine: grads.norm(arch.level_range(Level::Fine)),
        lr,
    };
    state.adam.step(&mut state.field.tensors, &grads, lr)?;
    state.history.push(report);
    Ok(report)
}

/// Runs `cfg.steps` steps from `state` (or from a fresh initialization).
/// With `out`, checkpoints every `ckpt_every` steps and at the end; a
/// non-finite loss aborts without touching the last checkpoint.
pub fn train(
    dataset: &OlatDataset,
    cfg: &TrainConfig,
    state: Option<TrainState>,
    out: Option<&Path>,
    mut progress: impl FnMut(&LossReport),
) -> Result<TrainState> {
    cfg.validate()?;
    let mut state = match state {
        Some(s) => s,
        None => TrainState::new(cfg)?,
    };
    if state.field.arch != cfg.arch {
        return Err(Error::invalid("resumed state has a different architecture"));
    }
    let sampler = RaySampler::new(dataset, cfg.band_radius, cfg.pad_fraction)?;
    let started = Instant::now();
    while state.step() < cfg.steps {
        let report = train_step(&mut state, &sampler, cfg)?;
        let done = state.step();
        if cfg.log_every > 0 && done % cfg.log_every == 0 {
            log::info!(
                "step {done}/{} loss {:.5} (color {:.5}, mask {:.3e}) lr {:.2e} {:.1}s",
                cfg.steps,
                report.total,
                report.color,
                report.mask,
                report.lr,
                started.elapsed().as_secs_f64()
            );
        }
        progress(&report);
        if let Some(dir) = out {
            if cfg.ckpt_every > 0 && done % cfg.ckpt_every == 0 && done < cfg.steps {
                state.save(dir)?;
            }
        }
    }
    if let Some(dir) = out {
        state.save(dir)?;
    }
    Ok(state)
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientCheck {
    pub checked: usize,
    pub passed: usize,
    pub worst_relative_error: f64,
}

impl GradientCheck {
    pub fn pass_fraction(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `count` randomly chosen parameters of an f64 field against
/// central differences of the full loss with step `h`, holding samples and
/// tonemap weights at their base values.
pub fn finite_difference_check(
    field: &FieldParams<f64>,
    fb: &FrozenBatch,
    settings: &LossSettings,
    count: usize,
    h: f64,
    tolerance: f64,
    floor: f64,
    seed: u64,
) -> Result<GradientCheck> {
    let base = loss_and_gradients(field, fb, settings, None)?;
    let sizes: Vec<usize> = field.tensors.iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<(usize, usize)> = rand::seq::index::sample(&mut rng, total, count.min(total))
        .into_iter()
        .map(|mut flat| {
            let mut t = 0;
            while flat >= sizes[t] {
                flat -= sizes[t];
                t += 1;
            }
            (t, flat)
        })
        .collect();
    let results: Vec<Result<f64>> = picks
        .par_iter()
        .map(|&(t, k)| {
            let mut p = field.clone();
            let x = p.tensors[t].data[k];
            p.tensors[t].data[k] = x + h;
            let up = loss_and_gradients(&p, fb, settings, Some(&base.weights))?.parts.total;
            p.tensors[t].data[k] = x - h;
            let down = loss_and_gradients(&p, fb, settings, Some(&base.weights))?.parts.total;
            let numeric = (up - down) / (2.0 * h);
            Ok(relative_error(base.grads.tensors[t].data[k], numeric, floor))
        })
        .collect();
    let mut check = GradientCheck {
        checked: 0,
        passed: 0,
        worst_relative_error: 0.0,
    };
    for r in results {
        let e = r?;
        check.checked += 1;
        if e < tolerance {
            check.passed += 1;
        }
        check.worst_relative_error = check.worst_relative_error.max(e);
    }
    Ok(check)
}
