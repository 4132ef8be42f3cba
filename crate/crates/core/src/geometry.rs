//! Sampling, neighborhoods, normalization and augmentation.
//!
//! Coordinates are `[f64; 3]` rows; feature tensors are channels-last
//! (`[points, channels]`).

use rand::Rng as _;

use crate::error::{config_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub type Point = [f64; 3];

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<Point>,
    /// Extra per-point channels, `[N, C]`. Absent for XYZ-only input.
    pub features: Option<Tensor>,
    pub normals: Option<Vec<Point>>,
    pub point_labels: Option<Vec<usize>>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point>) -> Result<Self> {
        if coords.is_empty() {
            return config_err("a point cloud needs at least one point");
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return config_err("point coordinates must be finite");
        }
        Ok(Self {
            coords,
            features: None,
            normals: None,
            point_labels: None,
            label: None,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Keeps the listed points (in order) with all per-point attributes.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            features: self.features.as_ref().map(|f| {
                let c = f.shape()[1];
                let data = idx
                    .iter()
                    .flat_map(|&i| f.data()[i * c..(i + 1) * c].iter().copied())
                    .collect();
                Tensor::new(vec![idx.len(), c], data).expect("selection keeps shape")
            }),
            normals: self.normals.as_ref().map(|n| idx.iter().map(|&i| n[i]).collect()),
            point_labels: self.point_labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            label: self.label,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeighborhoodMethod {
    /// Uniform sample of the points strictly inside the radius, padded
    /// with the centroid when short.
    RandomInSphere,
    Knn,
    /// Every in-radius point sorted by index, padded with the centroid to a
    /// width equal to the cloud size. Deterministic; used for exact tests.
    AllInRadius,
}

impl std::str::FromStr for NeighborhoodMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" | "random_in_sphere" => Ok(Self::RandomInSphere),
            "knn" => Ok(Self::Knn),
            "all" | "all_in_radius" => Ok(Self::AllInRadius),
            other => config_err(format!("unknown neighborhood method `{other}` (sphere|knn|all)")),
        }
    }
}

impl NeighborhoodMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::RandomInSphere => "sphere",
            Self::Knn => "knn",
            Self::AllInRadius => "all",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborhoodSpec {
    pub method: NeighborhoodMethod,
    pub radius: f64,
    pub neighbor_count: usize,
    pub normalize: bool,
}

impl NeighborhoodSpec {
    pub fn validate(&self) -> Result<()> {
        if self.neighbor_count == 0 {
            return config_err("neighbor count must be at least 1");
        }
        if self.method != NeighborhoodMethod::Knn && !(self.radius > 0.0) {
            return config_err(format!("sphere radius must be positive, got {}", self.radius));
        }
        Ok(())
    }
}

/// Fixed-width neighbor lists: row `o` is `neighbors[o*width .. (o+1)*width]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborhoodIndex {
    pub centroids: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub width: usize,
}

impl NeighborhoodIndex {
    pub fn row(&self, o: usize) -> &[usize] {
        &self.neighbors[o * self.width..(o + 1) * self.width]
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }
}

/// Greedy max-min subset. Ties go to the lowest index.
pub fn farthest_point_sample(coords: &[Point], count: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if count == 0 || count > n {
        return Err(Error::Index(format!("cannot sample {count} of {n} points")));
    }
    if seed_index >= n {
        return Err(Error::Index(format!("seed index {seed_index} of {n} points")));
    }
    let mut picked = Vec::with_capacity(count);
    let mut mind = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut cur = seed_index;
    for _ in 0..count {
        picked.push(cur);
        taken[cur] = true;
        let c = coords[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = dist2(&coords[i], &c);
            if d < mind[i] {
                mind[i] = d;
            }
            if mind[i] > best_d {
                best_d = mind[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(picked)
}

/// Index of the point farthest from the cloud's mean (lowest index on ties).
/// Depends only on the point set, not on its order.
pub fn canonical_seed(coords: &[Point]) -> usize {
    let n = coords.len() as f64;
    let mut mean = [0.0; 3];
    for p in coords {
        for k in 0..3 {
            mean[k] += p[k] / n;
        }
    }
    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for (i, p) in coords.iter().enumerate() {
        let d = dist2(p, &mean);
        if d > best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn check_centroids(coords: &[Point], centroids: &[usize]) -> Result<()> {
    match centroids.iter().find(|&&c| c >= coords.len()) {
        Some(c) => Err(Error::Index(format!("centroid {c} of {} points", coords.len()))),
        None => Ok(()),
    }
}

/// Random-in-sphere neighborhoods (`d < radius`, centroid reused as padding).
pub fn ball_query(
    coords: &[Point],
    centroids: &[usize],
    radius: f64,
    count: usize,
    rng: &mut Rng,
) -> Result<NeighborhoodIndex> {
    check_centroids(coords, centroids)?;
    if count == 0 {
        return config_err("neighbor count must be at least 1");
    }
    let r2 = radius * radius;
    let mut neighbors = Vec::with_capacity(centroids.len() * count);
    let mut inside = Vec::new();
    for &c in centroids {
        inside.clear();
        let p = coords[c];
        inside.extend((0..coords.len()).filter(|&j| j == c || dist2(&coords[j], &p) < r2));
        if inside.len() > count {
            for i in 0..count {
                let j = rng.random_range(i..inside.len());
                inside.swap(i, j);
            }
            neighbors.extend_from_slice(&inside[..count]);
        } else {
            neighbors.extend_from_slice(&inside);
            neighbors.extend(std::iter::repeat_n(c, count - inside.len()));
        }
    }
    Ok(NeighborhoodIndex {
        centroids: centroids.to_vec(),
        neighbors,
        width: count,
    })
}

/// Every point within the radius, sorted by index, centroid-padded to
/// `coords.len()` slots.
pub fn all_in_radius(coords: &[Point], centroids: &[usize], radius: f64) -> Result<NeighborhoodIndex> {
    check_centroids(coords, centroids)?;
    let n = coords.len();
    let r2 = radius * radius;
    let mut neighbors = Vec::with_capacity(centroids.len() * n);
    for &c in centroids {
        let p = coords[c];
        let start = neighbors.len();
        neighbors.extend((0..n).filter(|&j| j == c || dist2(&coords[j], &p) < r2));
        let got = neighbors.len() - start;
        neighbors.extend(std::iter::repeat_n(c, n - got));
    }
    Ok(NeighborhoodIndex {
        centroids: centroids.to_vec(),
        neighbors,
        width: n,
    })
}

/// `k` nearest points per centroid, nearest first; ties by lowest index.
pub fn knn_query(coords: &[Point], centroids: &[usize], k: usize) -> Result<NeighborhoodIndex> {
    check_centroids(coords, centroids)?;
    if k == 0 || k > coords.len() {
        return Err(Error::Index(format!("k={k} for {} points", coords.len())));
    }
    let mut neighbors = Vec::with_capacity(centroids.len() * k);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(coords.len());
    for &c in centroids {
        let p = coords[c];
        order.clear();
        order.extend(coords.iter().enumerate().map(|(j, q)| (dist2(q, &p), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut order[..k];
        head.sort_unstable_by(cmp);
        neighbors.extend(head.iter().map(|&(_, j)| j));
    }
    Ok(NeighborhoodIndex {
        centroids: centroids.to_vec(),
        neighbors,
        width: k,
    })
}

/// Builds neighborhoods with the method named by `spec`.
pub fn query(coords: &[Point], centroids: &[usize], spec: &NeighborhoodSpec, rng: &mut Rng) -> Result<NeighborhoodIndex> {
    spec.validate()?;
    match spec.method {
        NeighborhoodMethod::RandomInSphere => ball_query(coords, centroids, spec.radius, spec.neighbor_count, rng),
        NeighborhoodMethod::Knn => knn_query(coords, centroids, spec.neighbor_count.min(coords.len())),
        NeighborhoodMethod::AllInRadius => all_in_radius(coords, centroids, spec.radius),
    }
}

/// Dense `[N_o, M, 3 + C]` block of neighbor coordinates followed by
/// neighbor features. With `normalize`, the coordinate channels are
/// relative to the centroid.
pub fn gather_and_normalize(cloud: &PointCloud, index: &NeighborhoodIndex, normalize: bool) -> Result<Tensor> {
    let n = cloud.len();
    if let Some(&bad) = index.neighbors.iter().chain(&index.centroids).find(|&&j| j >= n) {
        return Err(Error::Index(format!("neighbor {bad} of {n} points")));
    }
    let c = cloud.features.as_ref().map_or(0, |f| f.shape()[1]);
    let width = 3 + c;
    let mut out = Vec::with_capacity(index.neighbors.len() * width);
    for (o, &ci) in index.centroids.iter().enumerate() {
        let origin = if normalize { cloud.coords[ci] } else { [0.0; 3] };
        for &j in index.row(o) {
            let p = cloud.coords[j];
            out.extend([p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]]);
            if let Some(f) = &cloud.features {
                out.extend_from_slice(&f.data()[j * c..(j + 1) * c]);
            }
        }
    }
    Tensor::new(vec![index.len(), index.width, width], out)
}

/// Shift to the center of mass and scale so the farthest point has norm 1.
/// Returns the applied `(center, scale)`.
pub fn normalize_unit_sphere(coords: &mut [Point]) -> (Point, f64) {
    let n = coords.len() as f64;
    let mut center = [0.0; 3];
    for p in coords.iter() {
        for k in 0..3 {
            center[k] += p[k];
        }
    }
    center.iter_mut().for_each(|c| *c /= n);
    let mut r2: f64 = 0.0;
    for p in coords.iter_mut() {
        for k in 0..3 {
            p[k] -= center[k];
        }
        r2 = r2.max(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    }
    let r = r2.sqrt();
    let scale = if r > 0.0 { 1.0 / r } else { 1.0 };
    for p in coords.iter_mut() {
        for v in p.iter_mut() {
            *v *= scale;
        }
    }
    (center, scale)
}

/// Whether the cloud is already centered with unit max radius within `tol`.
pub fn is_unit_normalized(coords: &[Point], tol: f64) -> bool {
    let n = coords.len() as f64;
    let mut center = [0.0; 3];
    for p in coords {
        for k in 0..3 {
            center[k] += p[k] / n;
        }
    }
    let rmax = coords
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    center.iter().all(|c| c.abs() <= tol) && (rmax - 1.0).abs() <= tol
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale_low: f64,
    pub scale_high: f64,
    pub translate: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            scale_low: 0.66,
            scale_high: 1.5,
            translate: 0.2,
        }
    }
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        scale_low: 1.0,
        scale_high: 1.0,
        translate: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_low > 0.0 && self.scale_low <= self.scale_high) {
            return config_err(format!(
                "augmentation needs 0 < scale_low <= scale_high, got [{}, {}]",
                self.scale_low, self.scale_high
            ));
        }
        if !(self.translate >= 0.0) {
            return config_err("augmentation translation must be non-negative");
        }
        Ok(())
    }
}

/// Draws per-axis factors `s ~ U[low, high]` and shifts `t ~ U[-t, t]`.
pub fn draw_augmentation(params: &AugmentParams, rng: &mut Rng) -> ([f64; 3], [f64; 3]) {
    let mut s = [1.0; 3];
    let mut t = [0.0; 3];
    for v in &mut s {
        *v = if params.scale_low < params.scale_high {
            rng.random_range(params.scale_low..=params.scale_high)
        } else {
            params.scale_low
        };
    }
    for v in &mut t {
        *v = if params.translate > 0.0 {
            rng.random_range(-params.translate..=params.translate)
        } else {
            0.0
        };
    }
    (s, t)
}

/// Applies `x' = s ⊙ x + t`. Normals follow the inverse-transpose of the
/// scaling and are renormalized.
pub fn apply_augmentation(cloud: &PointCloud, scale: [f64; 3], shift: [f64; 3]) -> PointCloud {
    let mut out = cloud.clone();
    for p in &mut out.coords {
        for k in 0..3 {
            p[k] = p[k] * scale[k] + shift[k];
        }
    }
    if let Some(normals) = &mut out.normals {
        for n in normals.iter_mut() {
            for k in 0..3 {
                n[k] /= scale[k];
            }
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if len > 0.0 {
                n.iter_mut().for_each(|v| *v /= len);
            }
        }
    }
    out
}

pub fn augment(cloud: &PointCloud, rng: &mut Rng, params: &AugmentParams) -> Result<PointCloud> {
    params.validate()?;
    let (s, t) = draw_augmentation(params, rng);
    Ok(apply_augmentation(cloud, s, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn random_cloud(n: usize, rng: &mut crate::rng::Rng) -> Vec<Point> {
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect()
    }

    // O(N²·count) recomputation of every min-distance at every step.
    fn fps_oracle(coords: &[Point], count: usize, seed: usize) -> Vec<usize> {
        let mut picked = vec![seed];
        while picked.len() < count {
            let mut best = None;
            let mut best_d = -1.0;
            for i in 0..coords.len() {
                if picked.contains(&i) {
                    continue;
                }
                let d = picked.iter().map(|&p| dist2(&coords[i], &coords[p])).fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best = Some(i);
                }
            }
            picked.push(best.unwrap());
        }
        picked
    }

    fn knn_oracle(coords: &[Point], c: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<usize> = (0..coords.len()).collect();
        all.sort_by(|&a, &b| {
            dist2(&coords[a], &coords[c])
                .partial_cmp(&dist2(&coords[b], &coords[c]))
                .unwrap()
                .then(a.cmp(&b))
        });
        all.truncate(k);
        all
    }

    #[test]
    fn fps_collinear_hand_case() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), vec![0, 3]);
        let mut all = farthest_point_sample(&pts, 4, 0).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(farthest_point_sample(&pts, 5, 0).is_err());
    }

    #[test]
    fn fps_handles_duplicates() {
        let pts = [[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 4, 0).unwrap(), vec![0, 2, 1, 3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fps_matches_bruteforce(n in 1usize..80, seed in 0u64..10_000) {
            let mut rng = seeded(seed);
            let pts = random_cloud(n, &mut rng);
            let count = rng.random_range(1..=n);
            let s = rng.random_range(0..n);
            prop_assert_eq!(farthest_point_sample(&pts, count, s).unwrap(), fps_oracle(&pts, count, s));
        }

        #[test]
        fn knn_matches_sort_oracle(n in 1usize..80, seed in 0u64..10_000) {
            let mut rng = seeded(seed);
            let pts = random_cloud(n, &mut rng);
            let k = rng.random_range(1..=n);
            let cents: Vec<usize> = (0..n).step_by(3).collect();
            let idx = knn_query(&pts, &cents, k).unwrap();
            for (o, &c) in cents.iter().enumerate() {
                prop_assert_eq!(idx.row(o), &knn_oracle(&pts, c, k)[..]);
            }
        }

        #[test]
        fn ball_query_respects_radius(n in 1usize..60, r in 0.05f64..1.5, m in 1usize..20, seed in 0u64..10_000) {
            let mut rng = seeded(seed);
            let pts = random_cloud(n, &mut rng);
            let cents: Vec<usize> = (0..n).collect();
            let idx = ball_query(&pts, &cents, r, m, &mut rng).unwrap();
            prop_assert_eq!(idx.width, m);
            for (o, &c) in cents.iter().enumerate() {
                let row = idx.row(o);
                for &j in row {
                    prop_assert!(j == c || dist2(&pts[j], &pts[c]) < r * r);
                }
                // Sampled without replacement: non-centroid entries are distinct.
                let mut others: Vec<usize> = row.iter().copied().filter(|&j| j != c).collect();
                let before = others.len();
                others.sort_unstable();
                others.dedup();
                prop_assert_eq!(others.len(), before);
            }
        }
    }

    #[test]
    fn ball_query_degenerate_and_padding() {
        let pts = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [5.0, 0.0, 0.0]];
        let mut rng = seeded(1);
        let idx = ball_query(&pts, &[0, 1, 2], 0.01, 3, &mut rng).unwrap();
        assert_eq!(idx.neighbors, vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);

        let idx = ball_query(&pts, &[0], 0.5, 4, &mut rng).unwrap();
        let row = idx.row(0);
        assert!(row.iter().all(|&j| j == 0 || j == 1));
        assert!(row.iter().filter(|&&j| j == 0).count() >= 2);
        assert_eq!(row.iter().filter(|&&j| j == 1).count(), 1);

        let mut row = ball_query(&pts, &[2], f64::INFINITY, 3, &mut rng).unwrap().neighbors;
        row.sort_unstable();
        assert_eq!(row, vec![0, 1, 2]);
    }

    #[test]
    fn ball_query_is_reproducible() {
        let mut rng = seeded(2);
        let pts = random_cloud(100, &mut rng);
        let a = ball_query(&pts, &[0, 5, 9], 0.8, 8, &mut seeded(3)).unwrap();
        let b = ball_query(&pts, &[0, 5, 9], 0.8, 8, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn knn_hand_cases() {
        let line: Vec<Point> = (0..6).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(knn_query(&line, &[0], 3).unwrap().neighbors, vec![0, 1, 2]);
        assert_eq!(knn_query(&line, &[4], 1).unwrap().neighbors, vec![4]);
        // Points 2 and 4 tie around centroid 3; lowest index first.
        assert_eq!(knn_query(&line, &[3], 3).unwrap().neighbors, vec![3, 2, 4]);
        let mut all = knn_query(&line, &[2], 6).unwrap().neighbors;
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        assert!(knn_query(&line, &[0], 7).is_err());
    }

    #[test]
    fn all_in_radius_is_sorted_and_padded() {
        let pts = [[0.0, 0.0, 0.0], [0.3, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.2, 0.0]];
        let idx = all_in_radius(&pts, &[3], 0.5).unwrap();
        assert_eq!(idx.neighbors, vec![0, 1, 3, 3]);
    }

    #[test]
    fn gather_matches_loop_oracle_and_normalizes() {
        let mut rng = seeded(4);
        let coords = random_cloud(20, &mut rng);
        let mut cloud = PointCloud::new(coords.clone()).unwrap();
        cloud.features = Some(Tensor::from_fn(&[20, 2], |i| i as f64));
        let idx = ball_query(&coords, &[0, 7, 13], 0.9, 5, &mut rng).unwrap();
        let g = gather_and_normalize(&cloud, &idx, true).unwrap();
        assert_eq!(g.shape(), &[3, 5, 5]);
        for o in 0..3 {
            let c = idx.centroids[o];
            for m in 0..5 {
                let j = idx.row(o)[m];
                let base = (o * 5 + m) * 5;
                for k in 0..3 {
                    assert_eq!(g.data()[base + k], coords[j][k] - coords[c][k]);
                }
                assert_eq!(g.data()[base + 3], (j * 2) as f64);
                assert_eq!(g.data()[base + 4], (j * 2 + 1) as f64);
                if j == c {
                    assert!(g.data()[base..base + 3].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn normalized_gather_is_translation_invariant() {
        let mut rng = seeded(5);
        // Dyadic coordinates and shift keep the arithmetic exact.
        let coords: Vec<Point> = (0..16)
            .map(|_| [0, 1, 2].map(|_| rng.random_range(-64i32..64) as f64 / 64.0))
            .collect();
        let shifted: Vec<Point> = coords.iter().map(|p| [p[0] + 3.0, p[1] - 0.5, p[2] + 0.25]).collect();
        let idx = knn_query(&coords, &[0, 3, 8], 4).unwrap();
        let a = gather_and_normalize(&PointCloud::new(coords).unwrap(), &idx, true).unwrap();
        let b = gather_and_normalize(&PointCloud::new(shifted).unwrap(), &idx, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn augmentation_identity_and_factors() {
        let mut rng = seeded(6);
        let cloud = PointCloud::new(random_cloud(50, &mut rng)).unwrap();
        let same = augment(&cloud, &mut rng, &AugmentParams::IDENTITY).unwrap();
        assert_eq!(same, cloud);

        let params = AugmentParams {
            translate: 0.0,
            ..Default::default()
        };
        let (s, t) = draw_augmentation(&params, &mut seeded(7));
        assert_eq!(t, [0.0; 3]);
        let out = apply_augmentation(&cloud, s, t);
        let extent = |pts: &[Point], k: usize| {
            let hi = pts.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
            let lo = pts.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
            hi - lo
        };
        for k in 0..3 {
            assert!((0.66..=1.5).contains(&s[k]));
            let ratio = extent(&out.coords, k) / extent(&cloud.coords, k);
            assert!((ratio - s[k]).abs() <= 1e-12);
        }
        assert!(augment(&cloud, &mut rng, &AugmentParams { scale_low: -0.66, ..Default::default() }).is_err());
    }

    #[test]
    fn unit_sphere_normalization() {
        let mut rng = seeded(8);
        let mut pts: Vec<Point> = random_cloud(40, &mut rng).iter().map(|p| [p[0] * 7.0 + 2.0, p[1] * 3.0, p[2] - 9.0]).collect();
        normalize_unit_sphere(&mut pts);
        let rmax = pts.iter().map(|p| dist2(p, &[0.0; 3]).sqrt()).fold(0.0, f64::max);
        assert!((rmax - 1.0).abs() <= 1e-12);
        assert!(is_unit_normalized(&pts, 1e-9));
    }

    #[test]
    fn canonical_seed_ignores_order() {
        let mut rng = seeded(9);
        let pts = random_cloud(30, &mut rng);
        let s = canonical_seed(&pts);
        let mut rev = pts.clone();
        rev.reverse();
        assert_eq!(rev[canonical_seed(&rev)], pts[s]);
    }
}
