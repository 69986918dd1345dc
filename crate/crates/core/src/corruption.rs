//! Input corruptions: random affine transforms drawn from configurable
//! sub-families, and the masking strategies (random-sized KNN clusters,
//! fixed-sized KNN clusters, view occlusion, patch masking).

use std::f64::consts::PI;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{sq_dist, AffineFamily, AffineTransform, Point3, PointCloud};

pub const DEFAULT_MASK_RATIO: f64 = 0.6;
pub const DEFAULT_KAPPA_MAX: usize = 8;

/// Sampling ranges for each affine sub-family. Ranges are closed `(lo, hi)`
/// intervals sampled uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFamilySpec {
    /// Per-axis rotation angle in radians, applied about x, then y, then z.
    pub rotate: [(f64, f64); 3],
    pub translate: [(f64, f64); 3],
    /// Per-axis flip probability.
    pub reflect: [f64; 3],
    /// Range shared by the six off-diagonal shear coefficients.
    pub shear: (f64, f64),
    pub scale: [(f64, f64); 3],
    /// Enabled flags indexed like [`AffineFamily::ORDER`].
    pub enabled: [bool; 5],
}

impl Default for AffineFamilySpec {
    fn default() -> Self {
        Self {
            rotate: [(-PI, PI); 3],
            translate: [(-0.2, 0.2); 3],
            reflect: [0.5; 3],
            shear: (-0.25, 0.25),
            scale: [(2.0 / 3.0, 1.5); 3],
            enabled: [true; 5],
        }
    }
}

impl AffineFamilySpec {
    /// Default magnitudes restricted to the given sub-families.
    pub fn only(families: &[AffineFamily]) -> Self {
        let mut s = Self::default();
        for (i, f) in AffineFamily::ORDER.iter().enumerate() {
            s.enabled[i] = families.contains(f);
        }
        s
    }

    pub fn none() -> Self {
        Self::only(&[])
    }

    /// Every family enabled with zero magnitude: samples are always identity.
    pub fn degenerate_identity() -> Self {
        Self {
            rotate: [(0.0, 0.0); 3],
            translate: [(0.0, 0.0); 3],
            reflect: [0.0; 3],
            shear: (0.0, 0.0),
            scale: [(1.0, 1.0); 3],
            enabled: [true; 5],
        }
    }

    pub fn is_enabled(&self, f: AffineFamily) -> bool {
        self.enabled[f as usize]
    }

    pub fn set_enabled(&mut self, f: AffineFamily, on: bool) {
        self.enabled[f as usize] = on;
    }

    pub fn enabled_families(&self) -> Vec<AffineFamily> {
        AffineFamily::ORDER
            .into_iter()
            .filter(|f| self.is_enabled(*f))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, (lo, hi): (f64, f64)| {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                Err(Error::Config(format!("affine {name} range ({lo}, {hi}) is not ordered")))
            } else {
                Ok(())
            }
        };
        for r in self.rotate {
            ordered("rotate", r)?;
        }
        for r in self.translate {
            ordered("translate", r)?;
        }
        ordered("shear", self.shear)?;
        for r in self.scale {
            ordered("scale", r)?;
            if r.0 <= 0.0 {
                return Err(Error::Config(format!(
                    "affine scale range ({}, {}) must be strictly positive",
                    r.0, r.1
                )));
            }
        }
        for p in self.reflect {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("reflect probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        // still consume a draw so the stream layout does not depend on ranges
        let _: f64 = rng.random();
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

fn linear(m: [[f64; 3]; 3], family: AffineFamily) -> AffineTransform {
    let mut t = AffineTransform::from_linear(m, [0.0; 3]);
    t.provenance = vec![family];
    t
}

fn mat_mul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

/// Samples each enabled sub-family's matrix, in composition order.
pub fn sample_affine_components<R: Rng + ?Sized>(
    spec: &AffineFamilySpec,
    rng: &mut R,
) -> Result<Vec<AffineTransform>> {
    spec.validate()?;
    let mut out = Vec::new();
    for family in AffineFamily::ORDER {
        if !spec.is_enabled(family) {
            continue;
        }
        let t = match family {
            AffineFamily::Scale => {
                let s = spec.scale.map(|r| uniform(rng, r));
                linear([[s[0], 0.0, 0.0], [0.0, s[1], 0.0], [0.0, 0.0, s[2]]], family)
            }
            AffineFamily::Shear => {
                let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
                for r in 0..3 {
                    for c in 0..3 {
                        if r != c {
                            m[r][c] = uniform(rng, spec.shear);
                        }
                    }
                }
                linear(m, family)
            }
            AffineFamily::Reflect => {
                let f = spec
                    .reflect
                    .map(|p| if rng.random::<f64>() < p { -1.0 } else { 1.0 });
                linear([[f[0], 0.0, 0.0], [0.0, f[1], 0.0], [0.0, 0.0, f[2]]], family)
            }
            AffineFamily::Rotate => {
                let [ax, ay, az] = spec.rotate.map(|r| uniform(rng, r));
                let (sx, cx) = ax.sin_cos();
                let (sy, cy) = ay.sin_cos();
                let (sz, cz) = az.sin_cos();
                let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
                let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
                let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
                linear(mat_mul3(&rz, &mat_mul3(&ry, &rx)), family)
            }
            AffineFamily::Translate => {
                let t = spec.translate.map(|r| uniform(rng, r));
                let mut a = AffineTransform::from_linear(
                    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                    t,
                );
                a.provenance = vec![family];
                a
            }
        };
        out.push(t);
    }
    Ok(out)
}

/// One random affine matrix: the product of the enabled sub-family matrices
/// composed Scale, Shear, Reflect, Rotate, Translate. An empty family set
/// yields the identity.
pub fn sample_affine<R: Rng + ?Sized>(spec: &AffineFamilySpec, rng: &mut R) -> Result<AffineTransform> {
    let parts = sample_affine_components(spec, rng)?;
    Ok(parts
        .iter()
        .fold(AffineTransform::identity(), |acc, t| acc.then(t)))
}

/// Which points (or patches) were masked, with cluster bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    /// Sorted ascending.
    pub masked: Vec<usize>,
    /// Sorted ascending complement of `masked`.
    pub visible: Vec<usize>,
    pub ratio: f64,
    /// Per-cluster dropped sizes; empty for patch masking.
    pub cluster_sizes: Vec<usize>,
    /// Drawn center and dropped members (nearest first) for each cluster.
    pub clusters: Vec<MaskCluster>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskCluster {
    pub center: usize,
    pub members: Vec<usize>,
}

impl MaskPlan {
    pub fn total(&self) -> usize {
        self.masked.len()
    }

    pub fn kappa(&self) -> usize {
        self.cluster_sizes.len()
    }

    pub fn len(&self) -> usize {
        self.masked.len() + self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_masked(mut masked: Vec<usize>, total: usize, ratio: f64) -> Self {
        masked.sort_unstable();
        let mut is_masked = vec![false; total];
        for &i in &masked {
            is_masked[i] = true;
        }
        let visible = (0..total).filter(|&i| !is_masked[i]).collect();
        Self {
            masked,
            visible,
            ratio,
            cluster_sizes: Vec::new(),
            clusters: Vec::new(),
        }
    }

    /// Checks the partition and count invariants against `total` items.
    pub fn validate(&self, total: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::DegenerateMask(m.to_string()));
        if self.len() != total {
            return bad("masked and visible do not cover all indices");
        }
        let mut seen = vec![false; total];
        for &i in self.masked.iter().chain(&self.visible) {
            if i >= total || seen[i] {
                return bad("masked and visible are not a partition");
            }
            seen[i] = true;
        }
        if !self.cluster_sizes.is_empty() {
            if self.cluster_sizes.iter().any(|&s| s == 0) {
                return bad("empty cluster");
            }
            if self.cluster_sizes.iter().sum::<usize>() != self.masked.len() {
                return bad("cluster sizes do not sum to the masked count");
            }
        }
        Ok(())
    }
}

/// `⌊ratio · total⌋`, rejecting budgets that mask nothing or everything.
pub fn mask_budget(ratio: f64, total: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::DegenerateMask(format!("ratio {ratio} outside (0, 1)")));
    }
    let m = (ratio * total as f64).floor() as usize;
    if m == 0 {
        return Err(Error::DegenerateMask("mask would be empty".into()));
    }
    if m >= total {
        return Err(Error::DegenerateMask("mask would consume all points".into()));
    }
    Ok(m)
}

/// Drops successive KNN clusters of the given sizes. `pick_center` receives
/// the surviving indices (ascending) and returns the chosen center.
pub fn drop_knn_clusters<F>(
    cloud: &PointCloud,
    ratio: f64,
    sizes: &[usize],
    mut pick_center: F,
) -> Result<(MaskPlan, PointCloud)>
where
    F: FnMut(&[usize]) -> usize,
{
    let w = cloud.len();
    let eta: usize = sizes.iter().sum();
    if sizes.iter().any(|&s| s == 0) || eta == 0 || eta >= w {
        return Err(Error::DegenerateMask(format!(
            "cluster sizes {sizes:?} invalid for {w} points"
        )));
    }
    let pts = cloud.points();
    let mut dropped = vec![false; w];
    let mut clusters = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let surviving: Vec<usize> = (0..w).filter(|&i| !dropped[i]).collect();
        let center = pick_center(&surviving);
        if center >= w || dropped[center] {
            return Err(Error::InvalidArgument(format!(
                "cluster center {center} is not a surviving point"
            )));
        }
        let c = pts[center];
        let mut cand: Vec<(f64, usize)> = surviving.iter().map(|&i| (sq_dist(&pts[i], &c), i)).collect();
        cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let members: Vec<usize> = cand[..size].iter().map(|x| x.1).collect();
        for &i in &members {
            dropped[i] = true;
        }
        clusters.push(MaskCluster { center, members });
    }
    let masked: Vec<usize> = (0..w).filter(|&i| dropped[i]).collect();
    let mut plan = MaskPlan::from_masked(masked, w, ratio);
    plan.cluster_sizes = sizes.to_vec();
    plan.clusters = clusters;
    let visible = cloud.select(&plan.visible)?;
    Ok((plan, visible))
}

/// Uniform composition of `total` into `parts` positive integers
/// (stars and bars: `parts - 1` distinct cut points in `1..total`).
pub fn random_composition<R: Rng + ?Sized>(total: usize, parts: usize, rng: &mut R) -> Vec<usize> {
    assert!(parts >= 1 && parts <= total);
    let mut cuts: Vec<usize> = index::sample(rng, total - 1, parts - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut sizes = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(total)) {
        sizes.push(c - prev);
        prev = c;
    }
    sizes
}

/// Masks `⌊α·w⌋` points as κ random-sized KNN clusters, κ uniform in
/// `[1, min(kappa_max, η)]`.
pub fn mask_random_clusters<R: Rng + ?Sized>(
    cloud: &PointCloud,
    ratio: f64,
    kappa_max: usize,
    rng: &mut R,
) -> Result<(MaskPlan, PointCloud)> {
    let eta = mask_budget(ratio, cloud.len())?;
    if kappa_max == 0 {
        return Err(Error::InvalidArgument("kappa_max must be positive".into()));
    }
    let kappa = rng.random_range(1..=kappa_max.min(eta));
    let sizes = random_composition(eta, kappa, rng);
    drop_knn_clusters(cloud, ratio, &sizes, |surv| surv[rng.random_range(0..surv.len())])
}

/// Sizes for fixed-size clusters: all `cluster_size`, last one truncated.
pub fn fixed_cluster_sizes(eta: usize, cluster_size: usize) -> Vec<usize> {
    let mut sizes = vec![cluster_size; eta / cluster_size];
    if eta % cluster_size > 0 {
        sizes.push(eta % cluster_size);
    }
    sizes
}

pub fn mask_fixed_clusters<R: Rng + ?Sized>(
    cloud: &PointCloud,
    ratio: f64,
    cluster_size: usize,
    rng: &mut R,
) -> Result<(MaskPlan, PointCloud)> {
    let eta = mask_budget(ratio, cloud.len())?;
    if cluster_size == 0 {
        return Err(Error::InvalidArgument("cluster size must be positive".into()));
    }
    let sizes = fixed_cluster_sizes(eta, cluster_size);
    drop_knn_clusters(cloud, ratio, &sizes, |surv| surv[rng.random_range(0..surv.len())])
}

/// Masks the points hidden from a random viewing direction.
pub fn mask_view_occlusion<R: Rng + ?Sized>(
    cloud: &PointCloud,
    ratio: f64,
    rng: &mut R,
) -> Result<(MaskPlan, PointCloud)> {
    let dir = loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            break v.map(|c| c / n);
        }
    };
    mask_view_occlusion_from(cloud, ratio, dir)
}

/// View occlusion with the camera placed far away along `view_dir`.
///
/// Points are binned on the image plane; the nearest point per bin is
/// visible. The grid resolution is the coarsest one that yields at least
/// `w - η` visible points, and the visible set is then trimmed (farthest
/// first) or topped up (nearest hidden first) to exactly `w - η`.
pub fn mask_view_occlusion_from(
    cloud: &PointCloud,
    ratio: f64,
    view_dir: Point3,
) -> Result<(MaskPlan, PointCloud)> {
    let w = cloud.len();
    let eta = mask_budget(ratio, w)?;
    let keep = w - eta;
    let norm = (view_dir.iter().map(|c| c * c).sum::<f64>()).sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::InvalidArgument("view direction must be non-zero".into()));
    }
    let d = view_dir.map(|c| c / norm);
    let helper = if d[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = normalize(cross(&d, &helper));
    let v = cross(&d, &u);

    let pts = cloud.points();
    let dot = |a: &Point3, b: &Point3| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    // larger height along the view direction = closer to the camera
    let height: Vec<f64> = pts.iter().map(|p| dot(p, &d)).collect();
    let uv: Vec<(f64, f64)> = pts.iter().map(|p| (dot(p, &u), dot(p, &v))).collect();
    let (umin, umax) = min_max(uv.iter().map(|x| x.0));
    let (vmin, vmax) = min_max(uv.iter().map(|x| x.1));
    let extent = (umax - umin).max(vmax - vmin).max(1e-12);

    let closer = |a: usize, b: usize| height[a] > height[b] || (height[a] == height[b] && a < b);
    let winners = |res: usize| -> Vec<usize> {
        let mut best: std::collections::HashMap<(usize, usize), usize> = std::collections::HashMap::new();
        for (i, &(pu, pv)) in uv.iter().enumerate() {
            let bu = (((pu - umin) / extent) * res as f64).floor().min(res as f64 - 1.0) as usize;
            let bv = (((pv - vmin) / extent) * res as f64).floor().min(res as f64 - 1.0) as usize;
            best.entry((bu, bv))
                .and_modify(|cur| {
                    if closer(i, *cur) {
                        *cur = i;
                    }
                })
                .or_insert(i);
        }
        let mut v: Vec<usize> = best.into_values().collect();
        v.sort_unstable();
        v
    };

    // smallest resolution whose visible count reaches `keep`
    let (mut lo, mut hi) = (1usize, 1usize);
    while winners(hi).len() < keep && hi < 1 << 20 {
        lo = hi;
        hi *= 2;
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        if winners(mid).len() >= keep {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut visible = winners(hi);
    let by_depth = |a: &usize, b: &usize| {
        height[*b]
            .total_cmp(&height[*a])
            .then(a.cmp(b))
    };
    if visible.len() > keep {
        visible.sort_unstable_by(by_depth);
        visible.truncate(keep);
    } else if visible.len() < keep {
        let mut is_vis = vec![false; w];
        for &i in &visible {
            is_vis[i] = true;
        }
        let mut hidden: Vec<usize> = (0..w).filter(|&i| !is_vis[i]).collect();
        hidden.sort_unstable_by(by_depth);
        visible.extend(hidden.into_iter().take(keep - visible.len()));
    }
    let mut is_vis = vec![false; w];
    for &i in &visible {
        is_vis[i] = true;
    }
    let masked: Vec<usize> = (0..w).filter(|&i| !is_vis[i]).collect();
    let plan = MaskPlan::from_masked(masked, w, ratio);
    let out = cloud.select(&plan.visible)?;
    Ok((plan, out))
}

fn cross(a: &Point3, b: &Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: Point3) -> Point3 {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    a.map(|c| c / n)
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

/// Masks `⌊α·n⌋` of `n` patches uniformly without replacement.
pub fn mask_patches<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    let m = mask_budget(ratio, n)?;
    let masked = index::sample(rng, n, m).into_vec();
    Ok(MaskPlan::from_masked(masked, n, ratio))
}

/// A plan with nothing masked, for corruption runs without masking.
pub fn no_mask(n: usize) -> MaskPlan {
    MaskPlan::from_masked(Vec::new(), n, 0.0)
}
