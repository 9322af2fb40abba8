//! Light parameterization: the OLAT direction grid, equirectangular
//! environment maps, median-cut light extraction and relighting by
//! accumulating OLAT renders.
//!
//! Equirectangular convention: row 0 is at the zenith, the center of column
//! 0 points along +x, and azimuth grows from +x toward +y. World +z is up.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::image::HdrImage;
use crate::math::Vec3;
use crate::render::{render_rays_all_lights, Ray, RenderConfig};

/// Rec. 709 luminance weights.
pub const LUMINANCE: [f64; 3] = [0.2126, 0.7152, 0.0722];

pub fn luminance(rgb: [f64; 3]) -> f64 {
    LUMINANCE[0] * rgb[0] + LUMINANCE[1] * rgb[1] + LUMINANCE[2] * rgb[2]
}

/// One point light used for OLAT capture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlatLight {
    /// Unit vector from the scene center toward the light.
    pub direction: Vec3,
    pub intensity: f64,
    /// Scene units from the center; sets the inverse-square falloff.
    pub distance: f64,
}

impl OlatLight {
    pub fn new(direction: Vec3, intensity: f64, distance: f64) -> Result<Self> {
        if !direction.is_unit(1e-6) {
            return Err(Error::invalid("light direction must be unit length"));
        }
        if !(intensity > 0.0) {
            return Err(Error::invalid("light intensity must be positive"));
        }
        Ok(OlatLight {
            direction,
            intensity,
            distance,
        })
    }
}

/// Latitude (radians) at the center of `row` in an `height`-row map.
pub fn row_latitude(row: f64, height: usize) -> f64 {
    PI / 2.0 - PI * (row + 0.5) / height as f64
}

pub fn column_azimuth(col: f64, width: usize) -> f64 {
    TAU * col / width as f64
}

/// `cos(latitude)` at the center of `row`, the relative solid angle of a
/// pixel in that row.
pub fn latitude_weight(row: usize, height: usize) -> f64 {
    assert!(row < height, "row {row} outside a {height}-row map");
    row_latitude(row as f64, height).cos().max(0.0)
}

pub fn direction_from_angles(latitude: f64, azimuth: f64) -> Vec3 {
    let c = latitude.cos();
    Vec3::new(c * azimuth.cos(), c * azimuth.sin(), latitude.sin())
}

/// Direction through fractional pixel-center coordinates `(col, row)`.
pub fn pixel_direction(col: f64, row: f64, width: usize, height: usize) -> Vec3 {
    direction_from_angles(row_latitude(row, height), column_azimuth(col, width))
}

/// Pixel containing direction `d`.
pub fn direction_pixel(d: Vec3, width: usize, height: usize) -> (usize, usize) {
    let d = d.normalized();
    let lat = d.z.clamp(-1.0, 1.0).asin();
    let row = ((PI / 2.0 - lat) / PI * height as f64).floor();
    let row = (row.max(0.0) as usize).min(height - 1);
    let az = d.y.atan2(d.x).rem_euclid(TAU);
    let col = (az / TAU * width as f64).round() as usize % width;
    (col, row)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OlatGridSpec {
    /// Rows of the reference envmap.
    pub env_height: usize,
    /// First (0-based) envmap row used.
    pub first_row: usize,
    pub n_lat: usize,
    pub n_lon: usize,
}

impl Default for OlatGridSpec {
    /// 7 latitudes x 32 longitudes on rows 2 through 8 (1-based) of a
    /// 16-row map, all above the horizon.
    fn default() -> Self {
        OlatGridSpec {
            env_height: 16,
            first_row: 1,
            n_lat: 7,
            n_lon: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridLight {
    pub index: usize,
    pub row: usize,
    pub col: usize,
    pub direction: Vec3,
    pub split: Split,
}

/// Directions at envmap pixel centers, flattened row by row; every other
/// light (odd flat index) is held out.
pub fn olat_grid(spec: &OlatGridSpec) -> Result<Vec<GridLight>> {
    if spec.first_row + spec.n_lat > spec.env_height || spec.n_lon == 0 {
        return Err(Error::invalid(format!("olat grid {spec:?} exceeds the envmap")));
    }
    let mut out = Vec::with_capacity(spec.n_lat * spec.n_lon);
    for r in 0..spec.n_lat {
        let row = spec.first_row + r;
        for col in 0..spec.n_lon {
            let index = out.len();
            out.push(GridLight {
                index,
                row,
                col,
                direction: pixel_direction(col as f64, row as f64, spec.n_lon, spec.env_height),
                split: if index % 2 == 0 { Split::Train } else { Split::Test },
            });
        }
    }
    Ok(out)
}

/// Equirectangular HDR environment map. Pixels are held in f64 so that sums
/// of maps stay exact to working precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Envmap {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl Envmap {
    pub fn new(image: HdrImage) -> Result<Envmap> {
        let pixels = image
            .pixels
            .iter()
            .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect();
        Envmap::from_rgb(image.width, image.height, pixels)
    }

    /// Row-major RGB, top row first.
    pub fn from_rgb(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Envmap> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("envmap must be non-empty"));
        }
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "envmap has {} pixels, expected {width}x{height}",
                pixels.len()
            )));
        }
        if pixels.iter().flatten().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("envmap values must be finite and non-negative"));
        }
        Ok(Envmap { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgb(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    /// Latitude-weighted RGB of one pixel.
    pub fn weighted_rgb(&self, x: usize, y: usize) -> [f64; 3] {
        let w = latitude_weight(y, self.height());
        let p = self.rgb(x, y);
        [w * p[0], w * p[1], w * p[2]]
    }

    /// Sum of latitude-weighted RGB over the whole map.
    pub fn total_energy(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for y in 0..self.height() {
            for x in 0..self.width() {
                let e = self.weighted_rgb(x, y);
                for c in 0..3 {
                    acc[c] += e[c];
                }
            }
        }
        acc
    }

    /// Pixelwise sum of two maps of equal size.
    pub fn add(&self, other: &Envmap) -> Result<Envmap> {
        if (self.width(), self.height()) != (other.width(), other.height()) {
            return Err(Error::shape("envmaps differ in size"));
        }
        let pixels = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
            .collect();
        Envmap::from_rgb(self.width, self.height, pixels)
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    fn width(&self) -> usize {
        self.x1 - self.x0
    }

    fn height(&self) -> usize {
        self.y1 - self.y0
    }

    fn can_split(&self) -> bool {
        self.width() > 1 || self.height() > 1
    }
}

/// A light extracted from an envmap region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalLight {
    pub direction: Vec3,
    /// Latitude-weighted RGB summed over `region`.
    pub energy: [f64; 3],
    pub region: PixelRect,
}

/// Splits `rect` at the energy median along its longer axis (columns on
/// ties); the median tie-break goes to the lower index.
fn split_region(lum: &[f64], width: usize, rect: PixelRect) -> (PixelRect, PixelRect) {
    let along_x = rect.width() >= rect.height();
    let len = if along_x { rect.width() } else { rect.height() };
    let mut profile = vec![0.0; len];
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            let k = if along_x { x - rect.x0 } else { y - rect.y0 };
            profile[k] += lum[y * width + x];
        }
    }
    let total: f64 = profile.iter().sum();
    let cut = if total > 0.0 {
        let mut best = 1;
        let mut best_gap = f64::INFINITY;
        let mut left = 0.0;
        for k in 1..len {
            left += profile[k - 1];
            let gap = (2.0 * left - total).abs();
            if gap < best_gap {
                best_gap = gap;
                best = k;
            }
        }
        best
    } else {
        len / 2
    };
    if along_x {
        (
            PixelRect { x1: rect.x0 + cut, ..rect },
            PixelRect { x0: rect.x0 + cut, ..rect },
        )
    } else {
        (
            PixelRect { y1: rect.y0 + cut, ..rect },
            PixelRect { y0: rect.y0 + cut, ..rect },
        )
    }
}

fn region_light(env: &Envmap, lum: &[f64], rect: PixelRect) -> DirectionalLight {
    let (w, h) = (env.width(), env.height());
    let mut energy = [0.0; 3];
    let mut centroid = Vec3::ZERO;
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            let e = env.weighted_rgb(x, y);
            for c in 0..3 {
                energy[c] += e[c];
            }
            centroid += pixel_direction(x as f64, y as f64, w, h) * lum[y * w + x];
        }
    }
    let direction = if centroid.norm() > 1e-12 {
        centroid.normalized()
    } else {
        let cx = (rect.x0 + rect.x1) as f64 / 2.0 - 0.5;
        let cy = (rect.y0 + rect.y1) as f64 / 2.0 - 0.5;
        pixel_direction(cx, cy, w, h)
    };
    DirectionalLight {
        direction,
        energy,
        region: rect,
    }
}

/// Median-cut partition of the latitude-weighted luminance into `n_lights`
/// regions (fewer if the map has fewer pixels), one light per region at its
/// energy centroid.
pub fn median_cut(env: &Envmap, n_lights: usize) -> Result<Vec<DirectionalLight>> {
    if n_lights == 0 || !n_lights.is_power_of_two() {
        return Err(Error::invalid(format!("n_lights = {n_lights} is not a power of two")));
    }
    let (w, h) = (env.width(), env.height());
    let mut lum = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            lum.push(luminance(env.weighted_rgb(x, y)));
        }
    }
    let mut regions = vec![PixelRect {
        x0: 0,
        y0: 0,
        x1: w,
        y1: h,
    }];
    while regions.len() < n_lights {
        let mut next = Vec::with_capacity(regions.len() * 2);
        let mut count = regions.len();
        for r in &regions {
            if count < n_lights && r.can_split() {
                let (a, b) = split_region(&lum, w, *r);
                next.push(a);
                next.push(b);
                count += 1;
            } else {
                next.push(*r);
            }
        }
        if next.len() == regions.len() {
            break;
        }
        regions = next;
    }
    Ok(regions.into_iter().map(|r| region_light(env, &lum, r)).collect())
}

/// Every pixel as its own light.
pub fn per_pixel_lights(env: &Envmap) -> Vec<DirectionalLight> {
    let (w, h) = (env.width(), env.height());
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(DirectionalLight {
                direction: pixel_direction(x as f64, y as f64, w, h),
                energy: env.weighted_rgb(x, y),
                region: PixelRect {
                    x0: x,
                    y0: y,
                    x1: x + 1,
                    y1: y + 1,
                },
            });
        }
    }
    out
}

pub fn lights_to_json(lights: &[DirectionalLight]) -> Result<String> {
    serde_json::to_string_pretty(lights).map_err(|e| Error::Json {
        path: "<lights>".into(),
        source: e,
    })
}

/// Relit radiance of each ray: `Σ_k energy_k ⊙ I(ray, ω_k)` using the fine
/// prediction, channels treated independently.
pub fn relight_rays(
    field: &FieldParams<f32>,
    rays: &[Ray],
    lights: &[DirectionalLight],
    cfg: &RenderConfig,
) -> Result<Vec<[f64; 3]>> {
    if lights.is_empty() {
        return Ok(vec![[0.0; 3]; rays.len()]);
    }
    let dirs: Vec<Vec3> = lights.iter().map(|l| l.direction).collect();
    let per_light = render_rays_all_lights(field, rays, &dirs, cfg)?;
    Ok(per_light
        .into_iter()
        .map(|renders| {
            let mut acc = [0.0; 3];
            for (r, l) in renders.iter().zip(lights) {
                for c in 0..3 {
                    acc[c] += l.energy[c] * r[c];
                }
            }
            acc
        })
        .collect())
}

pub fn relight_envmap(
    field: &FieldParams<f32>,
    ray: &Ray,
    lights: &[DirectionalLight],
    cfg: &RenderConfig,
) -> Result<[f64; 3]> {
    Ok(relight_rays(field, std::slice::from_ref(ray), lights, cfg)?[0])
}
