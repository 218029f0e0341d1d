//! Point-cloud preprocessing: normalisation, farthest point sampling,
//! k-nearest-neighbour grouping and center-relative patches.
//!
//! All distances are squared Euclidean evaluated in `f64`. Ties always go to
//! the lower point index.

use crate::error::{Error, Result};

pub type Point = [f32; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: Option<u32>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points, label: None }
    }

    pub fn with_label(points: Vec<Point>, label: u32) -> Self {
        Self {
            points,
            label: Some(label),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Non-empty with every coordinate finite.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidInput("point cloud is empty".into()));
        }
        if let Some(i) = self.points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} has a non-finite coordinate")));
        }
        Ok(())
    }
}

#[inline]
pub fn sq_dist(a: &Point, b: &[f64; 3]) -> f64 {
    let dx = a[0] as f64 - b[0];
    let dy = a[1] as f64 - b[1];
    let dz = a[2] as f64 - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn to_f64(p: &Point) -> [f64; 3] {
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

/// Result of [`normalize_cloud`].
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub cloud: PointCloud,
    /// All points coincided; the cloud was centred but not scaled.
    pub degenerate: bool,
}

/// Moves the centroid to the origin and scales the farthest point to unit norm.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<Normalized> {
    cloud.validate()?;
    let n = cloud.len() as f64;
    let mut c = [0.0f64; 3];
    for p in &cloud.points {
        for a in 0..3 {
            c[a] += p[a] as f64;
        }
    }
    c.iter_mut().for_each(|v| *v /= n);
    let centred: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .map(|p| [p[0] as f64 - c[0], p[1] as f64 - c[1], p[2] as f64 - c[2]])
        .collect();
    let max_norm = centred
        .iter()
        .map(|q| (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt())
        .fold(0.0f64, f64::max);
    let degenerate = max_norm == 0.0;
    let scale = if degenerate { 1.0 } else { 1.0 / max_norm };
    let points = centred
        .iter()
        .map(|q| [(q[0] * scale) as f32, (q[1] * scale) as f32, (q[2] * scale) as f32])
        .collect();
    Ok(Normalized {
        cloud: PointCloud {
            points,
            label: cloud.label,
        },
        degenerate,
    })
}

/// Farthest point sampling: `n` distinct indices, starting at `start`, each
/// maximising the distance to the already-chosen set.
pub fn fps(cloud: &PointCloud, n: usize, start: usize) -> Result<(Vec<Point>, Vec<usize>)> {
    let p = cloud.len();
    if n == 0 || n > p {
        return Err(Error::invalid_arg(format!(
            "fps: requested {n} centers from a cloud of {p} points"
        )));
    }
    if start >= p {
        return Err(Error::invalid_arg(format!("fps: start index {start} out of range for {p} points")));
    }
    let mut min_d = vec![f64::INFINITY; p];
    let mut chosen = vec![false; p];
    let mut idx = Vec::with_capacity(n);
    let mut cur = start;
    loop {
        idx.push(cur);
        chosen[cur] = true;
        if idx.len() == n {
            break;
        }
        let c = to_f64(&cloud.points[cur]);
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, pt) in cloud.points.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            let d = sq_dist(pt, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    let centers = idx.iter().map(|&i| cloud.points[i]).collect();
    Ok((centers, idx))
}

/// For each center, the `k` nearest cloud points ordered by (distance, index).
/// Returns indices into the cloud, `centers.len() * k` of them.
pub fn knn_indices(cloud: &PointCloud, centers: &[Point], k: usize) -> Result<Vec<usize>> {
    let p = cloud.len();
    if k == 0 || k > p {
        return Err(Error::invalid_arg(format!("knn: k = {k} with {p} points")));
    }
    let mut out = Vec::with_capacity(centers.len() * k);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(p);
    for c in centers {
        let c = to_f64(c);
        keyed.clear();
        keyed.extend(cloud.points.iter().enumerate().map(|(i, pt)| (sq_dist(pt, &c), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < p {
            keyed.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut keyed[..k];
        head.sort_unstable_by(cmp);
        out.extend(head.iter().map(|&(_, i)| i));
    }
    Ok(out)
}

/// Absolute neighbour coordinates, `centers.len() * k` points in center-major order.
pub fn knn(cloud: &PointCloud, centers: &[Point], k: usize) -> Result<Vec<Point>> {
    Ok(knn_indices(cloud, centers, k)?
        .into_iter()
        .map(|i| cloud.points[i])
        .collect())
}

/// `N` centers with their `k`-point neighbourhoods in center-relative
/// coordinates. Relative offsets are kept in `f64` so adding the center back
/// reproduces the source points exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point>,
    pub center_indices: Vec<usize>,
    /// `n * k` offsets, patch-major.
    pub patches: Vec<[f64; 3]>,
    pub n: usize,
    pub k: usize,
}

impl PatchSet {
    pub fn patch(&self, i: usize) -> &[[f64; 3]] {
        &self.patches[i * self.k..(i + 1) * self.k]
    }

    /// Re-adds the centers: the inverse of [`normalize_patches`].
    pub fn absolute(&self) -> Vec<Point> {
        self.patches
            .iter()
            .enumerate()
            .map(|(j, r)| {
                let c = self.centers[j / self.k];
                [
                    (r[0] + c[0] as f64) as f32,
                    (r[1] + c[1] as f64) as f32,
                    (r[2] + c[2] as f64) as f32,
                ]
            })
            .collect()
    }
}

/// Subtracts each patch's center from its points.
pub fn normalize_patches(patches_absolute: &[Point], centers: &[Point], k: usize) -> Result<PatchSet> {
    if k == 0 || patches_absolute.len() != centers.len() * k {
        return Err(Error::invalid_arg(format!(
            "normalize_patches: {} points do not form {} patches of {k}",
            patches_absolute.len(),
            centers.len()
        )));
    }
    let patches = patches_absolute
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let c = centers[j / k];
            [
                p[0] as f64 - c[0] as f64,
                p[1] as f64 - c[1] as f64,
                p[2] as f64 - c[2] as f64,
            ]
        })
        .collect();
    Ok(PatchSet {
        centers: centers.to_vec(),
        center_indices: Vec::new(),
        patches,
        n: centers.len(),
        k,
    })
}

/// FPS + KNN + center-relative normalisation in one call.
pub fn patchify(cloud: &PointCloud, n: usize, k: usize, start: usize) -> Result<PatchSet> {
    let (centers, center_indices) = fps(cloud, n, start)?;
    let abs = knn(cloud, &centers, k)?;
    let mut set = normalize_patches(&abs, &centers, k)?;
    set.center_indices = center_indices;
    Ok(set)
}
