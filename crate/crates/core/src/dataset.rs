//! OLAT dataset persistence: the manifest, masks and the labelled sampling
//! regions derived from them.
//!
//! On disk a dataset is
//!
//! ```text
//! scene/manifest.json
//! scene/images/g{G}_c{C}_l{L}.pfm
//! scene/masks/g{G}_c{C}.pfm
//! ```
//!
//! See `docs/manifest.md` for the manifest schema.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::{read_pfm, HdrImage};
use crate::math::Vec3;
use crate::render::Ray;

pub const MANIFEST_VERSION: u32 = 1;
/// Saturation level of the capture cameras.
pub const DEFAULT_HDR_CUTOFF: f64 = 4.4019;
/// Near-silhouette band radius in pixels at a 2048-pixel-wide image.
pub const BAND_RADIUS_AT_2048: f64 = 8.0;
/// Extra background margin around the image, as a fraction of each side.
pub const DEFAULT_PAD_FRACTION: f64 = 0.25;
/// Padding applied to the bounding sphere when deriving ray bounds.
pub const BOUNDS_PADDING: f64 = 1.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub center: Vec3,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: usize,
    #[serde(flatten)]
    pub camera: Camera,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightRecord {
    pub id: usize,
    /// Unit vector from the scene center toward the light.
    pub direction: Vec3,
    pub distance: f64,
    pub intensity: f64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    pub cameras: Vec<CameraRecord>,
    pub lights: Vec<LightRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub group: usize,
    pub camera: usize,
    pub light: usize,
    pub path: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub group: usize,
    pub camera: usize,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub scene: String,
    pub hdr_cutoff: f64,
    pub bounds: Bounds,
    pub groups: Vec<Group>,
    pub images: Vec<ImageRecord>,
    pub masks: Vec<MaskRecord>,
}

pub fn image_path(group: usize, camera: usize, light: usize) -> String {
    format!("images/g{group}_c{camera}_l{light}.pfm")
}

pub fn mask_path(group: usize, camera: usize) -> String {
    format!("masks/g{group}_c{camera}.pfm")
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: PathBuf::from("<manifest>"),
            source: e,
        })?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Manifest> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Json {
            path: origin.to_path_buf(),
            source: e,
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(
                origin,
                format!("manifest version {} (expected {MANIFEST_VERSION})", m.version),
            ));
        }
        m.validate()?;
        Ok(m)
    }

    /// Checks poses, light directions and references between records.
    pub fn validate(&self) -> Result<()> {
        if !(self.bounds.radius > 0.0) {
            return Err(Error::invalid("bounding radius must be positive"));
        }
        for (g, group) in self.groups.iter().enumerate() {
            for c in &group.cameras {
                c.camera
                    .validate()
                    .map_err(|e| Error::invalid(format!("group {g} camera {}: {e}", c.id)))?;
            }
            for l in &group.lights {
                if !l.direction.is_unit(1e-6) || !(l.intensity > 0.0) {
                    return Err(Error::invalid(format!(
                        "group {g} light {}: direction must be unit and intensity positive",
                        l.id
                    )));
                }
            }
        }
        for im in &self.images {
            self.camera(im.group, im.camera)?;
            self.light(im.group, im.light)?;
        }
        for m in &self.masks {
            self.camera(m.group, m.camera)?;
        }
        Ok(())
    }

    pub fn camera(&self, group: usize, id: usize) -> Result<&CameraRecord> {
        self.groups
            .get(group)
            .and_then(|g| g.cameras.iter().find(|c| c.id == id))
            .ok_or_else(|| Error::invalid(format!("no camera {id} in group {group}")))
    }

    pub fn light(&self, group: usize, id: usize) -> Result<&LightRecord> {
        self.groups
            .get(group)
            .and_then(|g| g.lights.iter().find(|l| l.id == id))
            .ok_or_else(|| Error::invalid(format!("no light {id} in group {group}")))
    }

    /// Loads `dir/manifest.json` and checks that every referenced file exists.
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m = Manifest::from_json(&text, &path)?;
        for p in m.images.iter().map(|i| &i.path).chain(m.masks.iter().map(|k| &k.path)) {
            if !dir.join(p).is_file() {
                return Err(Error::format(&path, format!("referenced file {p} is missing")));
            }
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("manifest.json");
        fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))
    }

    /// Near/far bounds for rays from `camera`, from the padded bounding sphere.
    pub fn ray_bounds(&self, camera: &Camera) -> (f64, f64) {
        let dist = (camera.center() - self.bounds.center).norm();
        let r = BOUNDS_PADDING * self.bounds.radius;
        ((dist - r).max(1e-3), dist + r)
    }
}

/// Binary foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Out-of-image coordinates read as background.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }

    pub fn to_image(&self) -> HdrImage {
        HdrImage {
            width: self.width,
            height: self.height,
            pixels: self
                .data
                .iter()
                .map(|&m| if m { [1.0; 3] } else { [0.0; 3] })
                .collect(),
        }
    }

    pub fn from_image(img: &HdrImage) -> Mask {
        Mask {
            width: img.width,
            height: img.height,
            data: img.pixels.iter().map(|p| p[0] > 0.5).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Foreground,
    NearSilhouette,
    Background,
    /// Outside the captured image; target radiance is zero.
    Padded,
}

/// Region labels over the image grid extended by `pad_x`/`pad_y` pixels on
/// every side.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBands {
    pub width: usize,
    pub height: usize,
    pub pad_x: usize,
    pub pad_y: usize,
    pub labels: Vec<Region>,
}

impl MaskBands {
    pub fn padded_width(&self) -> usize {
        self.width + 2 * self.pad_x
    }

    pub fn padded_height(&self) -> usize {
        self.height + 2 * self.pad_y
    }

    /// Image pixel of a flat index into the padded grid (may be negative).
    pub fn pixel_of(&self, index: usize) -> (i64, i64) {
        let pw = self.padded_width();
        (
            (index % pw) as i64 - self.pad_x as i64,
            (index / pw) as i64 - self.pad_y as i64,
        )
    }

    pub fn label_at(&self, x: i64, y: i64) -> Region {
        let px = (x + self.pad_x as i64) as usize;
        let py = (y + self.pad_y as i64) as usize;
        self.labels[py * self.padded_width() + px]
    }

    pub fn indices_of(&self, region: Region) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == region)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Band radius for an image `width` pixels wide, scaled from the 2048-pixel
/// reference and never below one pixel.
pub fn band_radius_for_width(width: usize) -> usize {
    ((BAND_RADIUS_AT_2048 * width as f64 / 2048.0).round() as usize).max(1)
}

fn disc_offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Labels the padded grid. The near-silhouette band is the disc dilation of
/// the mask minus its disc erosion (outside pixels count as background),
/// restricted to the image.
pub fn compute_mask_bands(mask: &Mask, radius: usize, pad: f64) -> Result<MaskBands> {
    if radius < 1 {
        return Err(Error::invalid("band radius must be at least 1"));
    }
    if !(0.0..=4.0).contains(&pad) {
        return Err(Error::invalid(format!("pad fraction {pad} out of range")));
    }
    let (w, h) = (mask.width, mask.height);
    let pad_x = (pad * w as f64).round() as usize;
    let pad_y = (pad * h as f64).round() as usize;
    let offsets = disc_offsets(radius);
    let pw = w + 2 * pad_x;
    let ph = h + 2 * pad_y;
    let mut labels = Vec::with_capacity(pw * ph);
    for py in 0..ph {
        for px in 0..pw {
            let x = px as i64 - pad_x as i64;
            let y = py as i64 - pad_y as i64;
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                labels.push(Region::Padded);
                continue;
            }
            let mut any = false;
            let mut all = true;
            for &(dx, dy) in &offsets {
                let m = mask.get_signed(x + dx, y + dy);
                any |= m;
                all &= m;
                if any && !all {
                    break;
                }
            }
            labels.push(if any && !all {
                Region::NearSilhouette
            } else if mask.get(x as usize, y as usize) {
                Region::Foreground
            } else {
                Region::Background
            });
        }
    }
    Ok(MaskBands {
        width: w,
        height: h,
        pad_x,
        pad_y,
        labels,
    })
}

/// A dataset loaded into memory.
#[derive(Clone, Debug)]
pub struct OlatDataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    /// Aligned with `manifest.images`.
    pub images: Vec<HdrImage>,
    /// Keyed by `(group, camera)`.
    pub masks: HashMap<(usize, usize), Mask>,
}

impl OlatDataset {
    pub fn load(root: &Path) -> Result<OlatDataset> {
        let manifest = Manifest::load(root)?;
        let mut images = Vec::with_capacity(manifest.images.len());
        for rec in &manifest.images {
            let img = read_pfm(&root.join(&rec.path))?;
            let cam = &manifest.camera(rec.group, rec.camera)?.camera;
            if (img.width, img.height) != (cam.width, cam.height) {
                return Err(Error::format(
                    root.join(&rec.path),
                    format!("image is {}x{}, camera says {}x{}", img.width, img.height, cam.width, cam.height),
                ));
            }
            images.push(img);
        }
        let mut masks = HashMap::new();
        for rec in &manifest.masks {
            let img = read_pfm(&root.join(&rec.path))?;
            masks.insert((rec.group, rec.camera), Mask::from_image(&img));
        }
        Ok(OlatDataset {
            root: root.to_path_buf(),
            manifest,
            images,
            masks,
        })
    }

    pub fn image_indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .images
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn camera_of(&self, image: usize) -> &Camera {
        let r = &self.manifest.images[image];
        &self.manifest.camera(r.group, r.camera).expect("validated").camera
    }

    pub fn light_of(&self, image: usize) -> &LightRecord {
        let r = &self.manifest.images[image];
        self.manifest.light(r.group, r.light).expect("validated")
    }

    pub fn mask_of(&self, image: usize) -> Option<&Mask> {
        let r = &self.manifest.images[image];
        self.masks.get(&(r.group, r.camera))
    }

    /// Ray through pixel `(x, y)` of the camera that took `image`.
    pub fn pixel_ray(&self, image: usize, x: i64, y: i64) -> Result<Ray> {
        let cam = self.camera_of(image);
        let (near, far) = self.manifest.ray_bounds(cam);
        cam.pixel_ray(x, y, near, far)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc_mask(size: usize, radius: f64) -> Mask {
        let c = size as f64 / 2.0;
        let mut m = Mask::new(size, size);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
                m.data[y * size + x] = dx * dx + dy * dy <= radius * radius;
            }
        }
        m
    }

    #[test]
    fn empty_mask_is_all_background() {
        let bands = compute_mask_bands(&Mask::new(10, 8), 2, 0.25).unwrap();
        assert!(bands
            .labels
            .iter()
            .all(|l| matches!(l, Region::Background | Region::Padded)));
        assert_eq!(bands.padded_width(), 10 + 2 * 3);
        assert_eq!(bands.padded_height(), 8 + 2 * 2);
    }

    #[test]
    fn full_mask_has_band_only_at_border() {
        let mut m = Mask::new(12, 12);
        m.data.iter_mut().for_each(|v| *v = true);
        let bands = compute_mask_bands(&m, 2, 0.0).unwrap();
        for y in 0..12i64 {
            for x in 0..12i64 {
                let border = x.min(y).min(11 - x).min(11 - y) < 2;
                let want = if border {
                    Region::NearSilhouette
                } else {
                    Region::Foreground
                };
                assert_eq!(bands.label_at(x, y), want, "({x},{y})");
            }
        }
    }

    #[test]
    fn disc_band_is_an_annulus() {
        let m = disc_mask(64, 20.0);
        let bands = compute_mask_bands(&m, 4, 0.25).unwrap();
        for y in 0..64i64 {
            for x in 0..64i64 {
                let r = ((x as f64 + 0.5 - 32.0).powi(2) + (y as f64 + 0.5 - 32.0).powi(2)).sqrt();
                let label = bands.label_at(x, y);
                if r < 15.0 || r > 25.0 {
                    assert_ne!(label, Region::NearSilhouette, "r = {r}");
                } else if r > 17.0 && r < 23.0 {
                    assert_eq!(label, Region::NearSilhouette, "r = {r}");
                }
            }
        }
    }

    #[test]
    fn band_radius_scales_with_width() {
        assert_eq!(band_radius_for_width(2048), 8);
        assert_eq!(band_radius_for_width(1024), 4);
        assert_eq!(band_radius_for_width(64), 1);
    }

    #[test]
    fn zero_radius_is_rejected() {
        assert!(compute_mask_bands(&Mask::new(4, 4), 0, 0.0).is_err());
    }
}
