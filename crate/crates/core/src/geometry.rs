//! Geometric kernels: point clouds, affine maps, farthest-point sampling,
//! nearest-neighbor queries and patch grouping.
//!
//! All distances are squared Euclidean. Ties are always broken toward the
//! lowest point index so that every routine is deterministic.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn sq_dist(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// An ordered, non-empty set of finite 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidCloud("zero points".into()));
        }
        if let Some(i) = points
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::InvalidCloud(format!(
                "non-finite coordinate at point {i}: {:?}",
                points[i]
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Subset of the cloud in the order of `indices`.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let pts = indices
            .iter()
            .map(|&i| {
                self.points.get(i).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("index {i} out of range for {} points", self.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        PointCloud::new(pts)
    }

    /// Row-major `w*3` coordinate buffer.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(data: &[f64]) -> Result<Self> {
        if data.len() % 3 != 0 {
            return Err(Error::InvalidArgument(format!(
                "flat buffer of length {} is not a multiple of 3",
                data.len()
            )));
        }
        PointCloud::new(data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

/// One of the five affine sub-families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AffineFamily {
    Scale,
    Shear,
    Reflect,
    Rotate,
    Translate,
}

impl AffineFamily {
    /// The fixed composition order (first applied first).
    pub const ORDER: [AffineFamily; 5] = [
        AffineFamily::Scale,
        AffineFamily::Shear,
        AffineFamily::Reflect,
        AffineFamily::Rotate,
        AffineFamily::Translate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AffineFamily::Scale => "scale",
            AffineFamily::Shear => "shear",
            AffineFamily::Reflect => "reflect",
            AffineFamily::Rotate => "rotate",
            AffineFamily::Translate => "translate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        AffineFamily::ORDER.into_iter().find(|f| f.name() == s)
    }
}

/// The upper 3x4 block of a homogeneous affine matrix. The bottom row is
/// implicitly `[0, 0, 0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    pub matrix: [[f64; 4]; 3],
    /// Sub-families that contributed, in application order.
    pub provenance: Vec<AffineFamily>,
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self::from_matrix([
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ])
    }

    pub fn from_matrix(matrix: [[f64; 4]; 3]) -> Self {
        Self {
            matrix,
            provenance: Vec::new(),
        }
    }

    pub fn from_linear(linear: [[f64; 3]; 3], translation: Point3) -> Self {
        let mut m = [[0.0; 4]; 3];
        for r in 0..3 {
            m[r][..3].copy_from_slice(&linear[r]);
            m[r][3] = translation[r];
        }
        Self::from_matrix(m)
    }

    pub fn is_finite(&self) -> bool {
        self.matrix.iter().flatten().all(|v| v.is_finite())
    }

    pub fn linear(&self) -> [[f64; 3]; 3] {
        let m = &self.matrix;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation(&self) -> Point3 {
        [self.matrix[0][3], self.matrix[1][3], self.matrix[2][3]]
    }

    pub fn determinant(&self) -> f64 {
        let a = self.linear();
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    }

    #[inline]
    pub fn apply_point(&self, p: &Point3) -> Point3 {
        let m = &self.matrix;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3];
        }
        out
    }

    /// Applies only the linear part (no translation).
    #[inline]
    pub fn apply_vector(&self, p: &Point3) -> Point3 {
        let m = &self.matrix;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2];
        }
        out
    }

    /// The transform equivalent to applying `self` first and `next` second,
    /// i.e. the 4x4 product `next * self`.
    pub fn then(&self, next: &AffineTransform) -> AffineTransform {
        let a = &next.matrix;
        let b = &self.matrix;
        let mut m = [[0.0; 4]; 3];
        for r in 0..3 {
            for c in 0..4 {
                let mut v = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
                if c == 3 {
                    v += a[r][3];
                }
                m[r][c] = v;
            }
        }
        let mut provenance = self.provenance.clone();
        provenance.extend(next.provenance.iter().copied());
        AffineTransform {
            matrix: m,
            provenance,
        }
    }
}

/// Applies `t` point-wise. Rejects transforms whose output overflows.
pub fn affine_apply(cloud: &PointCloud, t: &AffineTransform) -> Result<PointCloud> {
    if !t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "affine matrix has non-finite entries: {:?}",
            t.matrix
        )));
    }
    let mut out = Vec::with_capacity(cloud.len());
    for (index, p) in cloud.points().iter().enumerate() {
        let q = t.apply_point(p);
        if !q.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteTransform {
                index,
                x: q[0],
                y: q[1],
                z: q[2],
            });
        }
        out.push(q);
    }
    Ok(PointCloud { points: out })
}

/// Farthest-point sampling with a start index drawn uniformly from `rng`.
pub fn farthest_point_sample<R: Rng + ?Sized>(
    cloud: &PointCloud,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_count("farthest_point_sample", n, cloud.len())?;
    let start = rng.random_range(0..cloud.len());
    farthest_point_sample_from(cloud, n, start)
}

/// Farthest-point sampling from a fixed start index. Each step picks the
/// unselected point maximizing its minimum squared distance to the selected
/// set; ties go to the lowest index.
pub fn farthest_point_sample_from(cloud: &PointCloud, n: usize, start: usize) -> Result<Vec<usize>> {
    let w = cloud.len();
    check_count("farthest_point_sample", n, w)?;
    if start >= w {
        return Err(Error::InvalidArgument(format!("start index {start} >= {w}")));
    }
    let pts = cloud.points();
    let mut selected = vec![false; w];
    let mut min_d = vec![f64::INFINITY; w];
    let mut out = Vec::with_capacity(n);
    let mut current = start;
    loop {
        selected[current] = true;
        out.push(current);
        if out.len() == n {
            break;
        }
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..w {
            if selected[i] {
                continue;
            }
            let d = sq_dist(&pts[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(out)
}

fn check_count(op: &str, n: usize, w: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{op}: count must be positive")));
    }
    if n > w {
        return Err(Error::InvalidArgument(format!(
            "{op}: requested {n} of only {w} points"
        )));
    }
    Ok(())
}

/// The `k` nearest points to a query, closest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    /// Index of the query point in its cloud, when the query is a cloud point.
    pub query: Option<usize>,
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

#[inline]
fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Exact k-nearest-neighbor query by full scan.
pub fn knn(cloud: &PointCloud, query: &Point3, k: usize) -> Result<Neighborhood> {
    check_count("knn", k, cloud.len())?;
    let mut d: Vec<(f64, usize)> = cloud
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| (sq_dist(p, query), i))
        .collect();
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, by_dist_then_index);
        d.truncate(k);
    }
    d.sort_unstable_by(by_dist_then_index);
    Ok(Neighborhood {
        query: None,
        indices: d.iter().map(|x| x.1).collect(),
        distances: d.iter().map(|x| x.0).collect(),
    })
}

/// Patch centers and their k-nearest-neighbor patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point3>,
    /// Index of each center in the source cloud.
    pub center_indices: Vec<usize>,
    /// `n*k` points, patch-major.
    pub points: Vec<Point3>,
    /// Source index of each point in `points`.
    pub point_indices: Vec<usize>,
    pub n: usize,
    pub k: usize,
    pub normalized: bool,
}

impl PatchSet {
    pub fn patch(&self, i: usize) -> &[Point3] {
        &self.points[i * self.k..(i + 1) * self.k]
    }

    /// Applies one affine transform to every center and patch point.
    /// Only valid on absolute (unnormalized) coordinates.
    pub fn transformed(&self, t: &AffineTransform) -> Result<PatchSet> {
        if self.normalized {
            return Err(Error::PatchState(
                "affine transform must be applied before normalization".into(),
            ));
        }
        let mut out = self.clone();
        for c in out.centers.iter_mut() {
            *c = t.apply_point(c);
        }
        for p in out.points.iter_mut() {
            *p = t.apply_point(p);
        }
        if !out
            .centers
            .iter()
            .chain(out.points.iter())
            .flatten()
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidArgument(
                "affine transform produced non-finite patch coordinates".into(),
            ));
        }
        Ok(out)
    }

    /// Patch coordinates as a flat `n*k*3` buffer.
    pub fn flat_points(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn flat_centers(&self) -> Vec<f64> {
        self.centers.iter().flat_map(|p| p.iter().copied()).collect()
    }
}

/// FPS centers, then the k nearest points of each center (center included).
pub fn patchify<R: Rng + ?Sized>(
    cloud: &PointCloud,
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<PatchSet> {
    check_count("patchify", k, cloud.len())?;
    let centers = farthest_point_sample(cloud, n, rng)?;
    patchify_with_centers(cloud, &centers, k)
}

pub fn patchify_with_centers(cloud: &PointCloud, center_indices: &[usize], k: usize) -> Result<PatchSet> {
    check_count("patchify", k, cloud.len())?;
    let n = center_indices.len();
    let mut points = Vec::with_capacity(n * k);
    let mut point_indices = Vec::with_capacity(n * k);
    let mut centers = Vec::with_capacity(n);
    for &ci in center_indices {
        let c = *cloud
            .points()
            .get(ci)
            .ok_or_else(|| Error::InvalidArgument(format!("center index {ci} out of range")))?;
        let nb = knn(cloud, &c, k)?;
        for &j in &nb.indices {
            points.push(cloud.points()[j]);
            point_indices.push(j);
        }
        centers.push(c);
    }
    Ok(PatchSet {
        centers,
        center_indices: center_indices.to_vec(),
        points,
        point_indices,
        n,
        k,
        normalized: false,
    })
}

pub fn normalize_patches(ps: &PatchSet) -> Result<PatchSet> {
    if ps.normalized {
        return Err(Error::PatchState("patches are already normalized".into()));
    }
    let mut out = ps.clone();
    shift_patches(&mut out, -1.0);
    out.normalized = true;
    Ok(out)
}

pub fn denormalize_patches(ps: &PatchSet) -> Result<PatchSet> {
    if !ps.normalized {
        return Err(Error::PatchState("patches are not normalized".into()));
    }
    let mut out = ps.clone();
    shift_patches(&mut out, 1.0);
    out.normalized = false;
    Ok(out)
}

fn shift_patches(ps: &mut PatchSet, sign: f64) {
    let k = ps.k;
    for (i, c) in ps.centers.iter().enumerate() {
        for p in &mut ps.points[i * k..(i + 1) * k] {
            for a in 0..3 {
                p[a] += sign * c[a];
            }
        }
    }
}

/// A 3-d tree for exact nearest-neighbor queries. Results agree with a
/// linear scan, including lowest-index tie-breaking.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point3>,
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

#[derive(Debug, Clone)]
struct KdNode {
    index: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let mut tree = KdTree {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
            root: None,
        };
        tree.root = tree.build_rec(&mut idx, 0);
        tree
    }

    fn build_rec(&mut self, idx: &mut [usize], depth: usize) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        let pts = &self.points;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let index = idx[mid];
        let node = self.nodes.len();
        self.nodes.push(KdNode {
            index,
            axis,
            left: None,
            right: None,
        });
        let (lo, rest) = idx.split_at_mut(mid);
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(&mut rest[1..], depth + 1);
        self.nodes[node].left = left;
        self.nodes[node].right = right;
        Some(node)
    }

    /// Nearest point `(index, squared distance)`; `None` for an empty tree.
    pub fn nearest(&self, q: &Point3) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        if let Some(r) = self.root {
            self.nearest_rec(r, q, &mut best);
        }
        self.root.map(|_| best)
    }

    fn nearest_rec(&self, node: usize, q: &Point3, best: &mut (usize, f64)) {
        let n = &self.nodes[node];
        let p = &self.points[n.index];
        let d = sq_dist(p, q);
        if d < best.1 || (d == best.1 && n.index < best.0) {
            *best = (n.index, d);
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(c) = near {
            self.nearest_rec(c, q, best);
        }
        // `<=` keeps equal-distance candidates reachable for the index tie-break.
        if diff * diff <= best.1 {
            if let Some(c) = far {
                self.nearest_rec(c, q, best);
            }
        }
    }
}
