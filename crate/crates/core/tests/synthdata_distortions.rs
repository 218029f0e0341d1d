//! Pose, stretch and clutter options of the shape generator, checked against
//! the undistorted shape drawn from the same seed.

use pointcon::synthdata::{generate_shape_with, DatasetConfig, ShapeClass, ShapeParams};
use proptest::prelude::*;

fn sorted_pair_distances(points: &[[f32; 3]]) -> Vec<f64> {
    let mut d = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push((0..3).map(|a| (points[i][a] as f64 - points[j][a] as f64).powi(2)).sum::<f64>().sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    d
}

fn extents(points: &[[f32; 3]]) -> [f64; 3] {
    [0, 1, 2].map(|a| {
        let (lo, hi) = points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[a] as f64), hi.max(p[a] as f64)));
        hi - lo
    })
}

fn class() -> impl Strategy<Value = ShapeClass> {
    (0usize..8).prop_map(|i| ShapeClass::ALL[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_pose_is_an_isometry(c in class(), seed in 0u64..1000) {
        let clean = generate_shape_with(c, &ShapeParams::default(), 64, seed).unwrap();
        let posed = ShapeParams { random_pose: true, ..ShapeParams::default() };
        let moved = generate_shape_with(c, &posed, 64, seed).unwrap();
        let (a, b) = (sorted_pair_distances(&clean.points), sorted_pair_distances(&moved.points));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-5, "{} vs {}", x, y);
        }
    }

    #[test]
    fn stretch_ratios_stay_within_the_anisotropy_band(c in class(), seed in 0u64..1000, a in 0.05f64..0.5) {
        let clean = extents(&generate_shape_with(c, &ShapeParams::default(), 256, seed).unwrap().points);
        let params = ShapeParams { anisotropy: a, ..ShapeParams::default() };
        let stretched = extents(&generate_shape_with(c, &params, 256, seed).unwrap().points);
        let bound = (1.0 + a) / (1.0 - a) + 1e-4;
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            if clean[i] > 1e-3 && clean[j] > 1e-3 {
                let r = (stretched[i] / stretched[j]) / (clean[i] / clean[j]);
                prop_assert!(r <= bound && r >= 1.0 / bound, "axes {}/{}: {}", i, j, r);
            }
        }
    }

    #[test]
    fn generated_clouds_fill_the_unit_ball(c in class(), seed in 0u64..1000) {
        let cloud = generate_shape_with(c, &ShapeParams::scan_like(), 128, seed).unwrap();
        let max = cloud.points.iter().map(|p| p.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()).fold(0.0, f64::max);
        prop_assert!((max - 1.0).abs() < 1e-5, "{}", max);
        prop_assert_eq!(cloud.label, Some(c.id()));
    }
}

#[test]
fn clutter_replaces_the_requested_fraction_of_surface_points() {
    // A noiseless box has every point on a face of its bounding box; clutter
    // is drawn inside that box and so almost surely lands off the faces.
    let params = ShapeParams {
        noise: 0.0,
        outliers: 0.2,
        ..ShapeParams::default()
    };
    for seed in 0..4 {
        let cloud = generate_shape_with(ShapeClass::Cube, &params, 500, seed).unwrap();
        let mut lo = [f32::INFINITY; 3];
        let mut hi = [f32::NEG_INFINITY; 3];
        for p in &cloud.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let off_face = cloud
            .points
            .iter()
            .filter(|p| (0..3).all(|a| (p[a] - lo[a]).abs() > 1e-5 && (p[a] - hi[a]).abs() > 1e-5))
            .count();
        assert_eq!(off_face, 100, "seed {seed}");
    }
}

#[test]
fn dataset_config_round_trips_through_key_values() {
    let c = DatasetConfig::default();
    assert_eq!(c.shape, ShapeParams::scan_like());
    assert_eq!((c.train_per_class, c.test_per_class, c.n_points), (250, 50, 1024));
    let mut d = DatasetConfig {
        shape: ShapeParams::default(),
        ..DatasetConfig::default()
    };
    for (k, v) in c.to_kv() {
        d.set(k, &v).unwrap();
    }
    assert_eq!(c, d);
    assert!(d.set("outliers", "1.5").is_ok() && d.validate().is_err());
    assert!(d.set("colour", "red").is_err());
}
