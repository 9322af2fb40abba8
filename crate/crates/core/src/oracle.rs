//! Analytic ground-truth renderer for synthetic OLAT datasets.
//!
//! Each camera ray is traced to the first primitive it enters. Radiance is
//! the primitive's albedo times
//!
//! * a Lambertian surface term `k_L · max(0, n·l) · V · E` at the entry point,
//! * a single-scattering term `α ∫ σ_t e^{-σ_t s_in} Tr(x) E(x) ds` along the
//!   straight path through the medium, where `s_in` is the distance travelled
//!   inside and `Tr(x)` the transmittance from `x` toward the light,
//! * for an embedded opaque sub-primitive, its attenuated Lambertian term.
//!
//! There is no refraction and no multiple scattering. Point lights sit at
//! `distance` along their direction with inverse-square falloff normalized to
//! `intensity` at the scene center, so images are exactly linear in intensity.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::dataset::{
    image_path, mask_path, Bounds, CameraRecord, Group, ImageRecord, LightRecord, Manifest, Mask, MaskRecord,
    Split, DEFAULT_HDR_CUTOFF, MANIFEST_VERSION,
};
use crate::error::{Error, Result};
use crate::image::{write_pfm, HdrImage};
use crate::lighting::{olat_grid, OlatGridSpec, OlatLight};
use crate::math::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    /// Axis-aligned box.
    Box { min: Vec3, max: Vec3 },
}

/// Entry/exit distances and the outward normal at entry.
#[derive(Clone, Copy, Debug)]
struct Hit {
    t0: f64,
    t1: f64,
    normal: Vec3,
}

impl Shape {
    fn intersect(&self, o: Vec3, d: Vec3) -> Option<Hit> {
        match *self {
            Shape::Sphere { center, radius } => {
                let oc = o - center;
                let b = oc.dot(d);
                let c = oc.dot(oc) - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let (t0, t1) = (-b - s, -b + s);
                if t1 <= 0.0 {
                    return None;
                }
                Some(Hit {
                    t0,
                    t1,
                    normal: (o + d * t0 - center) / radius,
                })
            }
            Shape::Box { min, max } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                let mut axis = 0;
                let mut sign = 1.0;
                for a in 0..3 {
                    let (oa, da) = (o[a], d[a]);
                    if da.abs() < 1e-15 {
                        if oa < min[a] || oa > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let mut ta = (min[a] - oa) / da;
                    let mut tb = (max[a] - oa) / da;
                    let mut s = -1.0;
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                        s = 1.0;
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis = a;
                        sign = s;
                    }
                    t1 = t1.min(tb);
                }
                if t0 >= t1 || t1 <= 0.0 {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis] = sign;
                Some(Hit {
                    t0,
                    t1,
                    normal: Vec3::from(n),
                })
            }
        }
    }

    fn bounding_radius(&self, center: Vec3) -> f64 {
        match *self {
            Shape::Sphere { center: c, radius } => (c - center).norm() + radius,
            Shape::Box { min, max } => {
                let mut r: f64 = 0.0;
                for &x in &[min.x, max.x] {
                    for &y in &[min.y, max.y] {
                        for &z in &[min.z, max.z] {
                            r = r.max((Vec3::new(x, y, z) - center).norm());
                        }
                    }
                }
                r
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub albedo: [f64; 3],
    /// Extinction coefficient, per scene unit.
    pub sigma_t: f64,
    /// Single-scattering albedo in `[0, 1]`.
    pub scatter_albedo: f64,
    /// Weight of the Lambertian surface term.
    pub lambert: f64,
}

/// Opaque body inside a translucent primitive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedded {
    pub shape: Shape,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub material: Material,
    #[serde(default)]
    pub embedded: Option<Embedded>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleScene {
    pub name: String,
    pub primitives: Vec<Primitive>,
    /// Gauss-Legendre panels for the scattering integral (4 nodes each).
    #[serde(default = "default_panels")]
    pub quadrature_panels: usize,
}

fn default_panels() -> usize {
    16
}

impl OracleScene {
    /// Translucent unit sphere at the origin.
    pub fn translucent_sphere() -> OracleScene {
        OracleScene {
            name: "translucent-sphere".into(),
            primitives: vec![Primitive {
                shape: Shape::Sphere {
                    center: Vec3::ZERO,
                    radius: 1.0,
                },
                material: Material {
                    albedo: [0.9, 0.65, 0.45],
                    sigma_t: 1.5,
                    scatter_albedo: 0.9,
                    lambert: 0.6,
                },
                embedded: None,
            }],
            quadrature_panels: default_panels(),
        }
    }

    pub fn validate(&self, bounds: &Bounds) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::invalid("scene has no primitives"));
        }
        if self.quadrature_panels == 0 {
            return Err(Error::invalid("quadrature_panels must be positive"));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let m = &p.material;
            if !(m.sigma_t >= 0.0) || !(0.0..=1.0).contains(&m.scatter_albedo) || !(m.lambert >= 0.0) {
                return Err(Error::invalid(format!("primitive {i}: bad material {m:?}")));
            }
            if p.shape.bounding_radius(bounds.center) > bounds.radius {
                return Err(Error::invalid(format!("primitive {i} leaves the bounding sphere")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<OracleScene> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    fn first_hit(&self, o: Vec3, d: Vec3) -> Option<(usize, Hit)> {
        self.primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.shape.intersect(o, d).map(|h| (i, h)))
            .filter(|(_, h)| h.t0 > 0.0)
            .min_by(|a, b| a.1.t0.total_cmp(&b.1.t0))
    }

    /// Transmittance from `x` (inside or on primitive `host`) toward the
    /// light at `light_pos`.
    fn light_transmittance(&self, x: Vec3, host: usize, light_pos: Vec3) -> f64 {
        let to_light = light_pos - x;
        let dist = to_light.norm();
        let l = to_light / dist;
        let mut optical = 0.0;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(h) = p.shape.intersect(x, l) {
                let start = if i == host { 0.0 } else { h.t0.max(0.0) };
                let end = h.t1.min(dist);
                if end > start {
                    optical += p.material.sigma_t * (end - start);
                }
            }
            if let Some(e) = &p.embedded {
                if let Some(h) = e.shape.intersect(x, l) {
                    if h.t1 > 1e-9 && h.t0 < dist {
                        return 0.0;
                    }
                }
            }
        }
        (-optical).exp()
    }
}

/// Irradiance scale at `x` for a point light placed at `light_pos`,
/// normalized to the light's intensity at the scene center.
fn falloff(light: &OlatLight, light_pos: Vec3, x: Vec3) -> f64 {
    let r2 = (light_pos - x).dot(light_pos - x);
    light.intensity * light.distance * light.distance / r2
}

const GAUSS4_NODES: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_3,
    0.339_981_043_584_856_3,
    0.861_136_311_594_052_6,
];
const GAUSS4_WEIGHTS: [f64; 4] = [
    0.347_854_845_137_453_9,
    0.652_145_154_862_546_1,
    0.652_145_154_862_546_1,
    0.347_854_845_137_453_9,
];

/// Scalar radiance factors of one camera ray, before albedo.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RayRadiance {
    pub hit: bool,
    pub surface: f64,
    pub scattering: f64,
    pub rgb: [f64; 3],
}

/// Composite Gauss-Legendre estimate of `∫_a^b f`.
pub fn gauss_legendre(a: f64, b: f64, panels: usize, f: impl Fn(f64) -> f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let h = (b - a) / panels as f64;
    let mut acc = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        for (x, w) in GAUSS4_NODES.iter().zip(GAUSS4_WEIGHTS) {
            acc += w * f(mid + 0.5 * h * x);
        }
    }
    0.5 * h * acc
}

/// The scattering integrand along a camera ray inside primitive `host`,
/// parameterized by distance `s` from the entry point.
pub fn scattering_integrand(
    scene: &OracleScene,
    host: usize,
    entry: Vec3,
    d: Vec3,
    light: &OlatLight,
    s: f64,
) -> f64 {
    let m = &scene.primitives[host].material;
    let light_pos = light.direction * light.distance;
    let x = entry + d * s;
    m.scatter_albedo
        * m.sigma_t
        * (-m.sigma_t * s).exp()
        * scene.light_transmittance(x, host, light_pos)
        * falloff(light, light_pos, x)
}

/// Length of the scattering path and the embedded-body hit, if any.
pub fn scattering_extent(scene: &OracleScene, host: usize, o: Vec3, d: Vec3) -> Option<(f64, f64, Option<(f64, Vec3)>)> {
    let p = &scene.primitives[host];
    let hit = p.shape.intersect(o, d)?;
    let mut end = hit.t1;
    let mut inner = None;
    if let Some(e) = &p.embedded {
        if let Some(eh) = e.shape.intersect(o, d) {
            if eh.t0 > hit.t0 && eh.t0 < end {
                end = eh.t0;
                inner = Some((eh.t0, eh.normal));
            }
        }
    }
    Some((hit.t0, end, inner))
}

pub fn trace(scene: &OracleScene, o: Vec3, d: Vec3, light: &OlatLight) -> RayRadiance {
    let Some((host, hit)) = scene.first_hit(o, d) else {
        return RayRadiance::default();
    };
    let prim = &scene.primitives[host];
    let m = &prim.material;
    let light_pos = light.direction * light.distance;
    let entry = o + d * hit.t0;

    let l_entry = (light_pos - entry).normalized();
    let cos = hit.normal.dot(l_entry).max(0.0);
    let surface = if cos > 0.0 {
        m.lambert * cos * scene.light_transmittance(entry, host, light_pos) * falloff(light, light_pos, entry)
    } else {
        0.0
    };

    let (t_in, t_end, inner) = scattering_extent(scene, host, o, d).expect("host was hit");
    let scattering = if m.sigma_t > 0.0 && m.scatter_albedo > 0.0 {
        gauss_legendre(0.0, t_end - t_in, scene.quadrature_panels, |s| {
            scattering_integrand(scene, host, entry, d, light, s)
        })
    } else {
        0.0
    };

    let mut rgb = [0.0; 3];
    for c in 0..3 {
        rgb[c] = m.albedo[c] * (surface + scattering);
    }
    if let (Some((te, n)), Some(e)) = (inner, &prim.embedded) {
        let x = o + d * te;
        let l = (light_pos - x).normalized();
        let c = n.dot(l).max(0.0);
        if c > 0.0 {
            let atten = (-m.sigma_t * (te - t_in)).exp();
            let lit = c * scene.light_transmittance(x, host, light_pos) * falloff(light, light_pos, x) * atten;
            for ch in 0..3 {
                rgb[ch] += e.albedo[ch] * lit;
            }
        }
    }
    RayRadiance {
        hit: true,
        surface,
        scattering,
        rgb,
    }
}

/// Renders one OLAT frame through pixel centers.
pub fn render_olat_gt(scene: &OracleScene, camera: &Camera, light: &OlatLight) -> (HdrImage, Mask) {
    let (w, h) = (camera.width, camera.height);
    let mut img = HdrImage::new(w, h);
    let mut mask = Mask::new(w, h);
    let o = camera.center();
    for y in 0..h {
        for x in 0..w {
            let d = camera.direction(x as f64 + 0.5, y as f64 + 0.5);
            let r = trace(scene, o, d, light);
            if r.hit {
                img.set(x, y, [r.rgb[0] as f32, r.rgb[1] as f32, r.rgb[2] as f32]);
                mask.data[y * w + x] = true;
            }
        }
    }
    (img, mask)
}

/// Capture setup for synthetic datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    pub n_train_cameras: usize,
    pub n_test_cameras: usize,
    pub width: usize,
    pub height: usize,
    pub fov_y_degrees: f64,
    pub camera_distance: f64,
    /// Elevation range of the camera spiral, degrees.
    pub min_elevation: f64,
    pub max_elevation: f64,
    pub grid: OlatGridSpec,
    pub n_train_lights: usize,
    pub n_test_lights: usize,
    pub light_distance: f64,
    pub light_intensity: f64,
    /// Bounding-sphere radius around the origin.
    pub scene_radius: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        RigSpec {
            n_train_cameras: 16,
            n_test_cameras: 4,
            width: 64,
            height: 64,
            fov_y_degrees: 32.0,
            camera_distance: 5.0,
            min_elevation: 5.0,
            max_elevation: 70.0,
            grid: OlatGridSpec::default(),
            n_train_lights: 16,
            n_test_lights: 8,
            light_distance: 100.0,
            light_intensity: 1.0,
            scene_radius: 2.0,
        }
    }
}

impl RigSpec {
    pub fn load(path: &Path) -> Result<RigSpec> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Cameras and lights with their split labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureRig {
    pub cameras: Vec<(Camera, Split)>,
    pub lights: Vec<(OlatLight, Split)>,
}

/// Evenly strided pick of `n` items.
fn strided<T: Clone>(items: &[T], n: usize) -> Vec<T> {
    if n == 0 || items.is_empty() {
        return Vec::new();
    }
    let n = n.min(items.len());
    (0..n).map(|k| items[k * items.len() / n].clone()).collect()
}

impl CaptureRig {
    /// Cameras on a golden-angle spiral over the upper hemisphere with evenly
    /// spaced ones held out; lights subsampled from the OLAT grid splits.
    pub fn build(spec: &RigSpec) -> Result<CaptureRig> {
        let total = spec.n_train_cameras + spec.n_test_cameras;
        if total == 0 {
            return Err(Error::invalid("rig has no cameras"));
        }
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        // held-out views spread evenly along the spiral
        let test_ids: Vec<usize> = (0..spec.n_test_cameras)
            .map(|j| ((j as f64 + 0.5) * total as f64 / spec.n_test_cameras as f64) as usize)
            .collect();
        let mut cameras = Vec::with_capacity(total);
            for k in 0..total {
            let frac = if total > 1 { k as f64 / (total - 1) as f64 } else { 0.5 };
            let elev = (spec.min_elevation + frac * (spec.max_elevation - spec.min_elevation)).to_radians();
            let az = k as f64 * golden;
            let eye = Vec3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()) * spec.camera_distance;
            let cam = Camera::look_at(
                eye,
                Vec3::ZERO,
                Vec3::new(0.0, 0.0, 1.0),
                spec.fov_y_degrees.to_radians(),
                spec.width,
                spec.height,
            )?;
            let split = if test_ids.contains(&k) { Split::Test } else { Split::Train };
            cameras.push((cam, split));
        }
        let grid = olat_grid(&spec.grid)?;
        let train: Vec<_> = grid.iter().filter(|g| g.split == Split::Train).cloned().collect();
        let test: Vec<_> = grid.iter().filter(|g| g.split == Split::Test).cloned().collect();
        let mut lights = Vec::new();
        for (set, n, split) in [(&train, spec.n_train_lights, Split::Train), (&test, spec.n_test_lights, Split::Test)] {
            for g in strided(set, n) {
                lights.push((
                    OlatLight::new(g.direction, spec.light_intensity, spec.light_distance)?,
                    split,
                ));
            }
        }
        Ok(CaptureRig { cameras, lights })
    }
}

/// Renders every (train camera, train light) and (test camera, test light)
/// frame plus one mask per camera into `out_dir`, and writes the manifest.
pub fn generate_dataset(scene: &OracleScene, spec: &RigSpec, out_dir: &Path) -> Result<Manifest> {
    let bounds = Bounds {
        center: Vec3::ZERO,
        radius: spec.scene_radius,
    };
    scene.validate(&bounds)?;
    let rig = CaptureRig::build(spec)?;
    let cameras: Vec<CameraRecord> = rig
        .cameras
        .iter()
        .enumerate()
        .map(|(id, (camera, split))| CameraRecord {
            id,
            camera: *camera,
            split: *split,
        })
        .collect();
    let lights: Vec<LightRecord> = rig
        .lights
        .iter()
        .enumerate()
        .map(|(id, (l, split))| LightRecord {
            id,
            direction: l.direction,
            distance: l.distance,
            intensity: l.intensity,
            split: *split,
        })
        .collect();
    let mut images = Vec::new();
    for c in &cameras {
        for l in &lights {
            if c.split == l.split {
                images.push(ImageRecord {
                    group: 0,
                    camera: c.id,
                    light: l.id,
                    path: image_path(0, c.id, l.id),
                    split: c.split,
                });
            }
        }
    }
    let masks: Vec<MaskRecord> = cameras
        .iter()
        .map(|c| MaskRecord {
            group: 0,
            camera: c.id,
            path: mask_path(0, c.id),
        })
        .collect();

    let results: Vec<Result<()>> = images
        .par_iter()
        .map(|rec| {
            let (cam, _) = &rig.cameras[rec.camera];
            let (light, _) = &rig.lights[rec.light];
            let (img, _) = render_olat_gt(scene, cam, light);
            write_pfm(&out_dir.join(&rec.path), &img)
        })
        .collect();
    results.into_iter().collect::<Result<()>>()?;
    for rec in &masks {
        let (cam, _) = &rig.cameras[rec.camera];
        let mask = scene_mask(scene, cam);
        write_pfm(&out_dir.join(&rec.path), &mask.to_image())?;
    }

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        scene: scene.name.clone(),
        hdr_cutoff: DEFAULT_HDR_CUTOFF,
        bounds,
        groups: vec![Group {
            name: "000".into(),
            cameras,
            lights,
        }],
        images,
        masks,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Any-hit mask of the scene seen from `camera`.
pub fn scene_mask(scene: &OracleScene, camera: &Camera) -> Mask {
    let (w, h) = (camera.width, camera.height);
    let mut mask = Mask::new(w, h);
    let o = camera.center();
    for y in 0..h {
        for x in 0..w {
            let d = camera.direction(x as f64 + 0.5, y as f64 + 0.5);
            mask.data[y * w + x] = scene.first_hit(o, d).is_some();
        }
    }
    mask
}

/// True if `p` lies inside any primitive.
pub fn inside_any(scene: &OracleScene, p: Vec3) -> bool {
    scene.primitives.iter().any(|prim| match prim.shape {
        Shape::Sphere { center, radius } => (p - center).norm() < radius,
        Shape::Box { min, max } => (0..3).all(|a| p[a] > min[a] && p[a] < max[a]),
    })
}
