//! Brute-force references for FPS and KNN plus geometric invariants.

use pointcon::geometry::{fps, knn, knn_indices, normalize_patches, patchify, PointCloud};
use proptest::prelude::*;

fn d2(a: [f32; 3], b: [f32; 3]) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

/// O(p^2) per pick: recompute every candidate's distance to the chosen set.
pub fn fps_oracle(points: &[[f32; 3]], n: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < n {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            let m = chosen
                .iter()
                .map(|&c| d2(points[i], points[c]))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| m > bd) {
                best = Some((m, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

pub fn knn_oracle(points: &[[f32; 3]], center: [f32; 3], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, &p)| (d2(p, center), i)).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

fn coord() -> impl Strategy<Value = f32> {
    // a coarse grid makes exact ties common, which exercises tie-breaking
    prop_oneof![(-4i32..=4).prop_map(|v| v as f32 * 0.25), -1.0f32..1.0]
}

fn cloud_strategy(max: usize) -> impl Strategy<Value = Vec<[f32; 3]>> {
    prop::collection::vec([coord(), coord(), coord()], 1..=max)
}

fn min_cover(points: &[[f32; 3]], centers: &[usize]) -> f64 {
    points
        .iter()
        .map(|&p| centers.iter().map(|&c| d2(p, points[c])).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

fn rotation(angles: (f64, f64, f64)) -> [[f64; 3]; 3] {
    let (a, b, c) = angles;
    let rz = [[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rx = [[1.0, 0.0, 0.0], [0.0, c.cos(), -c.sin()], [0.0, c.sin(), c.cos()]];
    let mul = |p: [[f64; 3]; 3], q: [[f64; 3]; 3]| {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| p[i][k] * q[k][j]).sum();
            }
        }
        r
    };
    mul(rz, mul(ry, rx))
}

fn apply(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fps_and_knn_match_brute_force(points in cloud_strategy(64), start_frac in 0.0f64..1.0) {
        let p = points.len();
        let cloud = PointCloud::new(points.clone());
        let start = ((start_frac * p as f64) as usize).min(p - 1);
        let (_, full) = fps(&cloud, p, start).unwrap();
        for n in 1..=p {
            let (centers, idx) = fps(&cloud, n, start).unwrap();
            prop_assert_eq!(&idx, &fps_oracle(&points, n, start));
            // greedy prefix property
            prop_assert_eq!(&idx[..], &full[..n]);
            prop_assert_eq!(centers.len(), n);
        }
        let (centers, _) = fps(&cloud, p.min(8), start).unwrap();
        for k in 1..=p {
            let got = knn_indices(&cloud, &centers, k).unwrap();
            for (ci, c) in centers.iter().enumerate() {
                prop_assert_eq!(&got[ci * k..(ci + 1) * k], &knn_oracle(&points, *c, k)[..]);
            }
        }
    }

    #[test]
    fn fps_is_deterministic_and_distinct(points in cloud_strategy(64)) {
        let cloud = PointCloud::new(points.clone());
        let n = points.len().min(16);
        let a = fps(&cloud, n, 0).unwrap();
        let b = fps(&cloud, n, 0).unwrap();
        prop_assert_eq!(&a, &b);
        let mut sorted = a.1.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), n);
    }

    #[test]
    fn fps_coverage_is_non_increasing(points in cloud_strategy(48)) {
        let cloud = PointCloud::new(points.clone());
        let mut prev = f64::INFINITY;
        for n in 1..=points.len() {
            let (_, idx) = fps(&cloud, n, 0).unwrap();
            let cover = min_cover(&points, &idx);
            prop_assert!(cover <= prev);
            prev = cover;
        }
        prop_assert_eq!(prev, 0.0);
    }

    #[test]
    fn patches_roundtrip_and_contain_their_center(points in cloud_strategy(64), k_frac in 0.0f64..1.0) {
        let cloud = PointCloud::new(points.clone());
        let p = points.len();
        let n = p.min(8);
        let k = 1 + ((k_frac * p as f64) as usize).min(p - 1);
        let set = patchify(&cloud, n, k, 0).unwrap();
        let (centers, _) = fps(&cloud, n, 0).unwrap();
        let abs = knn(&cloud, &centers, k).unwrap();
        prop_assert_eq!(set.absolute(), abs.clone());
        let again = normalize_patches(&abs, &centers, k).unwrap();
        prop_assert_eq!(&again.patches, &set.patches);
        for i in 0..n {
            prop_assert!(set.patch(i).iter().any(|r| *r == [0.0, 0.0, 0.0]));
            // multiset equality with cloud points
            let mut got: Vec<[u32; 3]> = abs[i * k..(i + 1) * k]
                .iter()
                .map(|q| [q[0].to_bits(), q[1].to_bits(), q[2].to_bits()])
                .collect();
            let mut expect: Vec<[u32; 3]> = knn_oracle(&points, centers[i], k)
                .into_iter()
                .map(|j| { let q = points[j]; [q[0].to_bits(), q[1].to_bits(), q[2].to_bits()] })
                .collect();
            got.sort_unstable();
            expect.sort_unstable();
            prop_assert_eq!(got, expect);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rigid_motion_equivariance(
        points in prop::collection::vec([-1.0f32..1.0, -1.0f32..1.0, -1.0f32..1.0], 16..64),
        angles in (0.0f64..6.28, 0.0f64..6.28, 0.0f64..6.28),
    ) {
        let r = rotation(angles);
        let rotated: Vec<[f32; 3]> = points
            .iter()
            .map(|p| {
                let q = apply(&r, [p[0] as f64, p[1] as f64, p[2] as f64]);
                [q[0] as f32, q[1] as f32, q[2] as f32]
            })
            .collect();
        let (n, k) = (6, 5);
        let a = patchify(&PointCloud::new(points.clone()), n, k, 0).unwrap();
        let b = patchify(&PointCloud::new(rotated.clone()), n, k, 0).unwrap();
        // only meaningful when rounding did not reorder near-ties
        prop_assume!(a.center_indices == b.center_indices);
        let ka = knn_indices(&PointCloud::new(points.clone()), &a.centers, k).unwrap();
        let kb = knn_indices(&PointCloud::new(rotated), &b.centers, k).unwrap();
        prop_assume!(ka == kb);
        for (ca, cb) in a.centers.iter().zip(&b.centers) {
            let want = apply(&r, [ca[0] as f64, ca[1] as f64, ca[2] as f64]);
            for i in 0..3 {
                prop_assert!((want[i] - cb[i] as f64).abs() < 1e-5);
            }
        }
        for (pa, pb) in a.patches.iter().zip(&b.patches) {
            let want = apply(&r, *pa);
            for i in 0..3 {
                prop_assert!((want[i] - pb[i]).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn oracle_sanity() {
    let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0], [4.0, 0.0, 0.0]];
    assert_eq!(fps_oracle(&pts, 3, 0), vec![0, 4, 2]);
    assert_eq!(knn_oracle(&pts, [2.0, 0.0, 0.0], 3), vec![2, 1, 3]);
}
