//! Procedural surface samplers for the eight synthetic classes.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{normalize_cloud, PointCloud};
use crate::rng::rng_for;

pub const NUM_CLASSES: usize = 8;
pub const MIN_POINTS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeClass {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
    Plane,
    Helix,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; NUM_CLASSES] = [
        ShapeClass::Sphere,
        ShapeClass::Cube,
        ShapeClass::Cylinder,
        ShapeClass::Cone,
        ShapeClass::Torus,
        ShapeClass::Pyramid,
        ShapeClass::Plane,
        ShapeClass::Helix,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::invalid_arg(format!("unknown shape class id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cone => "cone",
            ShapeClass::Torus => "torus",
            ShapeClass::Pyramid => "pyramid",
            ShapeClass::Plane => "plane",
            ShapeClass::Helix => "helix",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid_arg(format!("unknown shape class `{s}`")))
    }
}

/// Geometric parameter ranges; each sample draws its own values.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeParams {
    /// Maximum displacement off the surface, before normalisation.
    pub noise: f64,
    pub box_aspect: (f64, f64),
    pub cylinder_radius: (f64, f64),
    pub cylinder_height: (f64, f64),
    pub cone_radius: (f64, f64),
    pub cone_height: (f64, f64),
    pub torus_major: (f64, f64),
    pub torus_minor: (f64, f64),
    pub pyramid_base: (f64, f64),
    pub pyramid_height: (f64, f64),
    pub plane_extent: (f64, f64),
    pub helix_radius: (f64, f64),
    pub helix_height: (f64, f64),
    pub helix_turns: (f64, f64),
    pub helix_tube: f64,
    /// Per-axis stretch drawn from `[1 − a, 1 + a]` in the canonical frame.
    pub anisotropy: f64,
    /// Uniformly random orientation per sample.
    pub random_pose: bool,
    /// Fraction of points replaced by uniform clutter in the bounding box.
    pub outliers: f64,
}

impl Default for ShapeParams {
    fn default() -> Self {
        Self {
            noise: 0.01,
            box_aspect: (0.7, 1.0),
            cylinder_radius: (0.3, 0.6),
            cylinder_height: (1.0, 2.0),
            cone_radius: (0.4, 0.8),
            cone_height: (0.8, 1.6),
            torus_major: (0.7, 1.0),
            torus_minor: (0.15, 0.35),
            pyramid_base: (0.8, 1.4),
            pyramid_height: (0.8, 1.5),
            plane_extent: (1.0, 1.4),
            helix_radius: (0.5, 0.8),
            helix_height: (1.0, 2.0),
            helix_turns: (2.0, 3.5),
            helix_tube: 0.05,
            anisotropy: 0.0,
            random_pose: false,
            outliers: 0.0,
        }
    }
}

impl ShapeParams {
    /// Dataset default: random pose, per-axis stretch, heavier surface noise
    /// and a few clutter points, so raw geometry alone does not separate the
    /// classes.
    pub fn scan_like() -> Self {
        Self {
            noise: 0.03,
            anisotropy: 0.3,
            random_pose: true,
            outliers: 0.05,
            ..Self::default()
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 >= range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

fn sym(rng: &mut ChaCha8Rng, amp: f64) -> f64 {
    if amp <= 0.0 {
        0.0
    } else {
        rng.random_range(-amp..amp)
    }
}

/// Picks one of several surface pieces with probability proportional to area.
fn pick(rng: &mut ChaCha8Rng, areas: &[f64]) -> usize {
    let total: f64 = areas.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, a) in areas.iter().enumerate() {
        if u < *a {
            return i;
        }
        u -= a;
    }
    areas.len() - 1
}

fn disk(rng: &mut ChaCha8Rng, r: f64) -> (f64, f64) {
    let rho = r * rng.random_range(0.0f64..1.0).sqrt();
    let t = rng.random_range(0.0..TAU);
    (rho * t.cos(), rho * t.sin())
}

fn triangle(rng: &mut ChaCha8Rng, a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let (mut u, mut v): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    if u + v > 1.0 {
        u = 1.0 - u;
        v = 1.0 - v;
    }
    [0, 1, 2].map(|i| a[i] + u * (b[i] - a[i]) + v * (c[i] - a[i]))
}

fn tri_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let x = u[1] * v[2] - u[2] * v[1];
    let y = u[2] * v[0] - u[0] * v[2];
    let z = u[0] * v[1] - u[1] * v[0];
    0.5 * (x * x + y * y + z * z).sqrt()
}

fn normalise(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn offset(p: [f64; 3], n: [f64; 3], d: f64) -> [f64; 3] {
    [p[0] + n[0] * d, p[1] + n[1] * d, p[2] + n[2] * d]
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    crate::synthdata::augment::uniform_rotation(rng)
}

fn sample_raw(class: ShapeClass, params: &ShapeParams, n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let nu = params.noise;
    let mut out = Vec::with_capacity(n);
    match class {
        ShapeClass::Sphere => {
            // randomly rotated Fibonacci lattice: near-uniform with a centroid at the origin
            let rot = random_rotation(rng);
            let golden = PI * (3.0 - 5.0f64.sqrt());
            for i in 0..n {
                let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let t = golden * i as f64;
                let p = [r * t.cos(), r * t.sin(), z];
                let q = [0, 1, 2].map(|a| rot[a][0] * p[0] + rot[a][1] * p[1] + rot[a][2] * p[2]);
                // inward-only radial noise keeps the outermost radius at 1
                let s = 1.0 - if nu > 0.0 { rng.random_range(0.0..nu) } else { 0.0 };
                out.push([q[0] * s, q[1] * s, q[2] * s]);
            }
        }
        ShapeClass::Cube => {
            let half = [0.5, 0.5 * draw(rng, params.box_aspect), 0.5 * draw(rng, params.box_aspect)];
            let areas = [
                half[1] * half[2],
                half[1] * half[2],
                half[0] * half[2],
                half[0] * half[2],
                half[0] * half[1],
                half[0] * half[1],
            ];
            for _ in 0..n {
                let face = pick(rng, &areas);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = if a == axis {
                        sign * half[a] + sym(rng, nu)
                    } else {
                        rng.random_range(-half[a]..half[a])
                    };
                }
                out.push(p);
            }
        }
        ShapeClass::Cylinder => {
            let r = draw(rng, params.cylinder_radius);
            let h = draw(rng, params.cylinder_height) / 2.0;
            let areas = [TAU * r * 2.0 * h, PI * r * r, PI * r * r];
            for _ in 0..n {
                let p = match pick(rng, &areas) {
                    0 => {
                        let t = rng.random_range(0.0..TAU);
                        let rr = r + sym(rng, nu);
                        [rr * t.cos(), rr * t.sin(), rng.random_range(-h..h)]
                    }
                    cap => {
                        let (x, y) = disk(rng, r);
                        let z = if cap == 1 { h } else { -h };
                        [x, y, z + sym(rng, nu)]
                    }
                };
                out.push(p);
            }
        }
        ShapeClass::Cone => {
            let r = draw(rng, params.cone_radius);
            let h = draw(rng, params.cone_height);
            let slant = (r * r + h * h).sqrt();
            let areas = [PI * r * slant, PI * r * r];
            for _ in 0..n {
                let p = if pick(rng, &areas) == 0 {
                    // area-uniform height: distance from apex ~ sqrt(u)
                    let s = rng.random_range(0.0f64..1.0).sqrt();
                    let t = rng.random_range(0.0..TAU);
                    let base = [s * r * t.cos(), s * r * t.sin(), h * (1.0 - s)];
                    let nrm = normalise([h * t.cos(), h * t.sin(), r]);
                    offset(base, nrm, sym(rng, nu))
                } else {
                    let (x, y) = disk(rng, r);
                    [x, y, sym(rng, nu)]
                };
                out.push(p);
            }
        }
        ShapeClass::Torus => {
            let big = draw(rng, params.torus_major);
            let small = draw(rng, params.torus_minor);
            while out.len() < n {
                let u = rng.random_range(0.0..TAU);
                let v = rng.random_range(0.0..TAU);
                // accept with probability proportional to the local area element
                let w = (big + small * v.cos()) / (big + small);
                if rng.random_range(0.0..1.0) > w {
                    continue;
                }
                let rr = small + sym(rng, nu);
                let ring = big + rr * v.cos();
                out.push([ring * u.cos(), ring * u.sin(), rr * v.sin()]);
            }
        }
        ShapeClass::Pyramid => {
            let b = draw(rng, params.pyramid_base) / 2.0;
            let h = draw(rng, params.pyramid_height);
            let apex = [0.0, 0.0, h];
            let corners = [[b, b, 0.0], [-b, b, 0.0], [-b, -b, 0.0], [b, -b, 0.0]];
            let mut faces: Vec<([f64; 3], [f64; 3], [f64; 3])> =
                (0..4).map(|i| (corners[i], corners[(i + 1) % 4], apex)).collect();
            faces.push((corners[0], corners[1], corners[2]));
            faces.push((corners[0], corners[2], corners[3]));
            let areas: Vec<f64> = faces.iter().map(|&(a, b, c)| tri_area(a, b, c)).collect();
            for _ in 0..n {
                let (a, b, c) = faces[pick(rng, &areas)];
                let p = triangle(rng, a, b, c);
                let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
                let nrm = normalise([
                    u[1] * v[2] - u[2] * v[1],
                    u[2] * v[0] - u[0] * v[2],
                    u[0] * v[1] - u[1] * v[0],
                ]);
                out.push(offset(p, nrm, sym(rng, nu)));
            }
        }
        ShapeClass::Plane => {
            let a = draw(rng, params.plane_extent);
            let b = draw(rng, params.plane_extent);
            for _ in 0..n {
                out.push([rng.random_range(-a..a), rng.random_range(-b..b), sym(rng, nu / 2.0)]);
            }
        }
        ShapeClass::Helix => {
            let r = draw(rng, params.helix_radius);
            let h = draw(rng, params.helix_height);
            let turns = draw(rng, params.helix_turns);
            let tube = params.helix_tube;
            for _ in 0..n {
                let s = rng.random_range(0.0..1.0);
                let t = TAU * turns * s;
                let c = [r * t.cos(), r * t.sin(), h * (s - 0.5)];
                let (dx, dy) = disk(rng, tube);
                // offset in the plane spanned by the radial direction and z
                out.push([c[0] + dx * t.cos(), c[1] + dx * t.sin(), c[2] + dy]);
            }
        }
    }
    out
}

fn distort(points: &mut [[f64; 3]], params: &ShapeParams, rng: &mut ChaCha8Rng) {
    if params.anisotropy > 0.0 {
        let a = params.anisotropy;
        let s = [0; 3].map(|_| rng.random_range(1.0 - a..1.0 + a));
        for p in points.iter_mut() {
            for (c, f) in p.iter_mut().zip(s) {
                *c *= f;
            }
        }
    }
    if params.random_pose {
        let r = random_rotation(rng);
        for p in points.iter_mut() {
            *p = [0, 1, 2].map(|a| r[a][0] * p[0] + r[a][1] * p[1] + r[a][2] * p[2]);
        }
    }
    if params.outliers > 0.0 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let count = (params.outliers * points.len() as f64).round() as usize;
        for i in 0..count.min(points.len()) {
            let j = rng.random_range(i..points.len());
            points.swap(i, j);
            points[i] = [0, 1, 2].map(|a| if hi[a] > lo[a] { rng.random_range(lo[a]..hi[a]) } else { lo[a] });
        }
    }
}

/// Samples `n_points` from a randomly parameterised instance of `class`,
/// normalised to the unit ball and labelled with the class id.
pub fn generate_shape_with(class: ShapeClass, params: &ShapeParams, n_points: usize, seed: u64) -> Result<PointCloud> {
    if n_points < MIN_POINTS {
        return Err(Error::invalid_arg(format!(
            "generate_shape: need at least {MIN_POINTS} points, got {n_points}"
        )));
    }
    let mut rng = rng_for(seed, &[class.id() as u64]);
    let mut raw = sample_raw(class, params, n_points, &mut rng);
    distort(&mut raw, params, &mut rng);
    let points = raw
        .into_iter()
        .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
        .collect();
    let normalized = normalize_cloud(&PointCloud::with_label(points, class.id()))?;
    Ok(normalized.cloud)
}

pub fn generate_shape(class: ShapeClass, n_points: usize, seed: u64) -> Result<PointCloud> {
    generate_shape_with(class, &ShapeParams::default(), n_points, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(p: &[f32; 3]) -> f64 {
        p.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn sphere_points_sit_on_the_unit_sphere() {
        let params = ShapeParams::default();
        for seed in 0..5 {
            let c = generate_shape(ShapeClass::Sphere, 1024, seed).unwrap();
            for p in &c.points {
                assert!((norm(p) - 1.0).abs() <= params.noise + 1e-3, "{}", norm(p));
            }
        }
    }

    #[test]
    fn plane_is_flat() {
        let params = ShapeParams::default();
        for seed in 0..5 {
            let c = generate_shape(ShapeClass::Plane, 1024, seed).unwrap();
            assert!(c.points.iter().all(|p| (p[2] as f64).abs() <= params.noise));
        }
    }

    #[test]
    fn deterministic_and_labelled() {
        for class in ShapeClass::ALL {
            let a = generate_shape(class, 64, 7).unwrap();
            let b = generate_shape(class, 64, 7).unwrap();
            let bits = |c: &PointCloud| -> Vec<u32> { c.points.iter().flatten().map(|v| v.to_bits()).collect() };
            assert_eq!(bits(&a), bits(&b));
            assert_eq!(a.label, Some(class.id()));
            assert_eq!(a.len(), 64);
            let max = a.points.iter().map(norm).fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn unknown_class_and_small_counts_are_rejected() {
        assert!(ShapeClass::from_id(8).is_err());
        assert!("blob".parse::<ShapeClass>().is_err());
        assert_eq!("torus".parse::<ShapeClass>().unwrap(), ShapeClass::Torus);
        assert!(generate_shape(ShapeClass::Cube, 15, 0).is_err());
    }
}
