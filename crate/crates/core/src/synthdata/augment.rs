//! The seven pretraining augmentation policies.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub type Rotation = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugmentPolicy {
    None,
    Jitter,
    Scale,
    Rotation,
    ScaleTranslate,
    ScaleTranslateRotation,
    RotationScaleTranslate,
}

impl AugmentPolicy {
    pub const ALL: [AugmentPolicy; 7] = [
        AugmentPolicy::None,
        AugmentPolicy::Jitter,
        AugmentPolicy::Scale,
        AugmentPolicy::Rotation,
        AugmentPolicy::ScaleTranslate,
        AugmentPolicy::ScaleTranslateRotation,
        AugmentPolicy::RotationScaleTranslate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentPolicy::None => "none",
            AugmentPolicy::Jitter => "jitter",
            AugmentPolicy::Scale => "scale",
            AugmentPolicy::Rotation => "rotation",
            AugmentPolicy::ScaleTranslate => "scale_translate",
            AugmentPolicy::ScaleTranslateRotation => "scale_translate_rotation",
            AugmentPolicy::RotationScaleTranslate => "rotation_scale_translate",
        }
    }

    /// Primitive steps in application order.
    fn steps(self) -> &'static [Step] {
        use Step::*;
        match self {
            AugmentPolicy::None => &[],
            AugmentPolicy::Jitter => &[Jit],
            AugmentPolicy::Scale => &[Sca],
            AugmentPolicy::Rotation => &[Rot],
            AugmentPolicy::ScaleTranslate => &[Sca, Tra],
            AugmentPolicy::ScaleTranslateRotation => &[Sca, Tra, Rot],
            AugmentPolicy::RotationScaleTranslate => &[Rot, Sca, Tra],
        }
    }
}

impl fmt::Display for AugmentPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.iter().copied().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|p| p.name()).collect();
            Error::invalid_arg(format!("unknown augment policy `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Step {
    Jit,
    Sca,
    Tra,
    Rot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Per-axis translation is uniform in `[-translate, translate]`.
    pub translate: f64,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            scale_min: 2.0 / 3.0,
            scale_max: 1.5,
            translate: 0.2,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::config("augment.scale", "need 0 < scale_min <= scale_max"));
        }
        if !(self.translate >= 0.0) {
            return Err(Error::config("augment.translate", "must be non-negative"));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_clip >= 0.0) {
            return Err(Error::config("augment.jitter", "sigma and clip must be non-negative"));
        }
        Ok(())
    }
}

/// Transforms drawn for one call, in application order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AppliedAugment {
    pub scale: Option<f64>,
    pub translation: Option<[f64; 3]>,
    pub rotation: Option<Rotation>,
    pub jittered: bool,
}

/// Uniform rotation from a normalised Gaussian quaternion.
pub fn uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let mut q = [0.0f64; 4];
    let mut n = 0.0;
    while n < 1e-12 {
        for c in q.iter_mut() {
            *c = StandardNormal.sample(rng);
        }
        n = q.iter().map(|c| c * c).sum::<f64>();
    }
    let n = n.sqrt();
    let [w, x, y, z] = q.map(|c| c / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn rotate(p: [f64; 3], r: &Rotation) -> [f64; 3] {
    [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2])
}

/// Applies `policy` and reports the transforms that were drawn.
pub fn augment_recorded<R: Rng + ?Sized>(
    cloud: &PointCloud,
    policy: AugmentPolicy,
    params: &AugmentParams,
    rng: &mut R,
) -> (PointCloud, AppliedAugment) {
    let mut applied = AppliedAugment::default();
    let steps = policy.steps();
    if steps.is_empty() {
        return (cloud.clone(), applied);
    }
    let mut pts: Vec<[f64; 3]> = cloud.points.iter().map(crate::geometry::to_f64).collect();
    for step in steps {
        match step {
            Step::Jit => {
                let normal = Normal::new(0.0, params.jitter_sigma).expect("validated sigma");
                let clip = params.jitter_clip;
                for p in pts.iter_mut() {
                    for c in p.iter_mut() {
                        *c += normal.sample(rng).clamp(-clip, clip);
                    }
                }
                applied.jittered = true;
            }
            Step::Sca => {
                let s = if params.scale_min < params.scale_max {
                    rng.random_range(params.scale_min..=params.scale_max)
                } else {
                    params.scale_min
                };
                for p in pts.iter_mut() {
                    for c in p.iter_mut() {
                        *c *= s;
                    }
                }
                applied.scale = Some(s);
            }
            Step::Tra => {
                let t = params.translate;
                let d: [f64; 3] = if t > 0.0 {
                    [0, 1, 2].map(|_| rng.random_range(-t..=t))
                } else {
                    [0.0; 3]
                };
                for p in pts.iter_mut() {
                    for (c, dc) in p.iter_mut().zip(d) {
                        *c += dc;
                    }
                }
                applied.translation = Some(d);
            }
            Step::Rot => {
                let r = uniform_rotation(rng);
                for p in pts.iter_mut() {
                    *p = rotate(*p, &r);
                }
                applied.rotation = Some(r);
            }
        }
    }
    let points = pts.into_iter().map(|p| p.map(|c| c as f32)).collect();
    (PointCloud { points, label: cloud.label }, applied)
}

pub fn augment<R: Rng + ?Sized>(cloud: &PointCloud, policy: AugmentPolicy, params: &AugmentParams, rng: &mut R) -> PointCloud {
    augment_recorded(cloud, policy, params, rng).0
}
