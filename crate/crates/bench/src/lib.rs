//! Fixtures shared by the benchmarks.

use prtg_core::camera::Camera;
use prtg_core::image::HdrImage;
use prtg_core::lighting::Envmap;
use prtg_core::render::Ray;
use prtg_core::{Architecture, FieldParams, Vec3};

/// Desk-sized field with fixed initialization.
pub fn desk_field() -> FieldParams<f32> {
    FieldParams::init(Architecture::desk(), 11).expect("desk architecture is valid")
}

/// Rays of a `side`×`side` camera looking at the origin from distance 5.
pub fn camera_rays(side: usize) -> Vec<Ray> {
    let cam = Camera::look_at(
        Vec3::new(0.0, -5.0, 1.0),
        Vec3::ZERO,
        Vec3::new(0.0, 0.0, 1.0),
        32f64.to_radians(),
        side,
        side,
    )
    .expect("valid camera");
    prtg_core::eval::camera_rays(&cam, 3.0, 7.0).expect("valid bounds")
}

/// Equirectangular map with a bright sun over a smooth sky.
pub fn sky_envmap(width: usize, height: usize) -> Envmap {
    let mut img = HdrImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let sky = 0.2 + 0.8 * (1.0 - y as f32 / height as f32);
            let sun = if (x as i64 - width as i64 / 3).abs() < 2 && y < height / 4 && y > height / 8 {
                50.0
            } else {
                0.0
            };
            img.set(x, y, [sky * 0.6 + sun, sky * 0.8 + sun, sky + sun]);
        }
    }
    Envmap::new(img).expect("finite map")
}
