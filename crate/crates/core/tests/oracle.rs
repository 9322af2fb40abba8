use prtg_core::dataset::{Manifest, OlatDataset, Split};
use prtg_core::eval::{display, psnr, ssim};
use prtg_core::lighting::OlatLight;
use prtg_core::oracle::{generate_dataset, trace, OracleScene, RigSpec};
use prtg_core::Vec3;
use sha2::{Digest, Sha256};

fn tiny_rig() -> RigSpec {
    RigSpec {
        n_train_cameras: 3,
        n_test_cameras: 2,
        width: 14,
        height: 12,
        n_train_lights: 2,
        n_test_lights: 3,
        ..RigSpec::default()
    }
}

/// Back light straight behind a unit sphere seen along its axis: the chord
/// to the light is `2 - s`, so the attenuation is `e^{-2σ}` everywhere and
/// only the inverse-square falloff varies along the path.
#[test]
fn axial_back_light_matches_closed_form() {
    let scene = OracleScene::translucent_sphere();
    let m = scene.primitives[0].material;
    let light = OlatLight::new(Vec3::new(0.0, 1.0, 0.0), 1.0, 100.0).unwrap();
    let r = trace(&scene, Vec3::new(0.0, -5.0, 0.0), Vec3::new(0.0, 1.0, 0.0), &light);
    assert!(r.hit);
    assert_eq!(r.surface, 0.0);
    let falloff_integral = 1e4 * (1.0 / 99.0 - 1.0 / 101.0);
    let expected = m.scatter_albedo * m.sigma_t * (-2.0 * m.sigma_t).exp() * falloff_integral;
    assert!((r.scattering - expected).abs() < 1e-12 * expected, "{} vs {expected}", r.scattering);
    for c in 0..3 {
        assert!((r.rgb[c] - m.albedo[c] * expected).abs() < 1e-12);
    }
}

fn chord_through_unit_sphere(x: Vec3, l: Vec3) -> f64 {
    // |x + t l| = 1, t > 0
    let b = x.dot(l);
    let c = x.dot(x) - 1.0;
    -b + (b * b - c).max(0.0).sqrt()
}

/// Off-axis rays against a midpoint rule with 200k nodes and an
/// independently computed sphere chord.
#[test]
fn oblique_rays_match_fine_midpoint_quadrature() {
    let scene = OracleScene::translucent_sphere();
    let m = scene.primitives[0].material;
    let cases = [
        (Vec3::new(0.3, -5.0, 0.2), Vec3::new(0.2, 0.5, 0.84)),
        (Vec3::new(-0.5, -5.0, 0.6), Vec3::new(-0.1, 0.99, 0.1)),
        (Vec3::new(0.1, -5.0, -0.7), Vec3::new(0.7, -0.7, 0.14)),
    ];
    for (target, ldir) in cases {
        let o = Vec3::new(0.0, -5.0, 0.0);
        let d = (Vec3::new(target.x, 0.0, target.z) - o).normalized();
        let light = OlatLight::new(ldir.normalized(), 1.0, 100.0).unwrap();
        let lp = light.direction * light.distance;
        // entry and exit of the camera ray
        let b = o.dot(d);
        let disc = b * b - (o.dot(o) - 1.0);
        let (t0, t1) = (-b - disc.sqrt(), -b + disc.sqrt());
        let n = 200_000;
        let h = (t1 - t0) / n as f64;
        let mut acc = 0.0;
        for k in 0..n {
            let s = (k as f64 + 0.5) * h;
            let x = o + d * (t0 + s);
            let to_l = lp - x;
            let chord = chord_through_unit_sphere(x, to_l.normalized());
            acc += m.scatter_albedo * m.sigma_t * (-m.sigma_t * (s + chord)).exp() * 1e4 / to_l.dot(to_l);
        }
        let expected = acc * h;
        let r = trace(&scene, o, d, &light);
        let rel = (r.scattering - expected).abs() / expected;
        assert!(rel < 1e-6, "target {target:?}: {} vs {expected} ({rel:e})", r.scattering);
    }
}

#[test]
fn default_protocol_image_count() {
    let rig = RigSpec::default();
    // 16 train views x 16 train lights + 4 test views x 8 test lights
    assert_eq!(
        rig.n_train_cameras * rig.n_train_lights + rig.n_test_cameras * rig.n_test_lights,
        288
    );
}

fn tree_digest(dir: &std::path::Path) -> Vec<u8> {
    let mut files: Vec<_> = walk(dir);
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(&f).unwrap());
    }
    h.finalize().to_vec()
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn generation_is_byte_deterministic_and_loadable() {
    let scene = OracleScene::translucent_sphere();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = generate_dataset(&scene, &tiny_rig(), a.path()).unwrap();
    generate_dataset(&scene, &tiny_rig(), b.path()).unwrap();
    assert_eq!(tree_digest(a.path()), tree_digest(b.path()));

    assert_eq!(m.images.len(), 3 * 2 + 2 * 3);
    assert_eq!(m.masks.len(), 5);
    let data = OlatDataset::load(a.path()).unwrap();
    assert_eq!(data.image_indices(Split::Train).len(), 6);
    assert_eq!(data.image_indices(Split::Test).len(), 6);
    for i in data.image_indices(Split::Test) {
        let r = &data.manifest.images[i];
        assert_eq!(data.manifest.camera(r.group, r.camera).unwrap().split, Split::Test);
        assert_eq!(data.light_of(i).split, Split::Test);
    }
}

#[test]
fn manifest_save_is_a_fixpoint() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&OracleScene::translucent_sphere(), &tiny_rig(), dir.path()).unwrap();
    let first = std::fs::read(dir.path().join("manifest.json")).unwrap();
    let m = Manifest::load(dir.path()).unwrap();
    m.save(dir.path()).unwrap();
    let second = std::fs::read(dir.path().join("manifest.json")).unwrap();
    assert_eq!(first, second);
    let again = Manifest::load(dir.path()).unwrap();
    assert_eq!(again, m);
}

#[test]
fn ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&OracleScene::translucent_sphere(), &tiny_rig(), dir.path()).unwrap();
    let data = OlatDataset::load(dir.path()).unwrap();
    for i in data.image_indices(Split::Test) {
        let gt = &display(&data.images[i]);
        assert_eq!(psnr(gt, gt).unwrap(), 99.0);
        assert!((ssim(gt, gt).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn scenes_leaving_the_bounds_are_rejected() {
    let mut scene = OracleScene::translucent_sphere();
    if let prtg_core::oracle::Shape::Sphere { radius, .. } = &mut scene.primitives[0].shape {
        *radius = 3.0;
    }
    let dir = tempfile::tempdir().unwrap();
    assert!(generate_dataset(&scene, &tiny_rig(), dir.path()).is_err());
}
