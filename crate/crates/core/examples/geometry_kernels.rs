//! Farthest point sampling, k nearest neighbors, patchification and the
//! Chamfer distance on a small cloud.

use pcssl::geometry::{farthest_point_sample_from, knn, normalize_patches, patchify, PointCloud};
use pcssl::losses::chamfer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> pcssl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts = (0..200).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let cloud = PointCloud::new(pts)?;

    let centers = farthest_point_sample_from(&cloud, 8, 0)?;
    println!("fps centers: {centers:?}");
    let nb = knn(&cloud, &cloud.points()[centers[1]], 5)?;
    println!("5 nearest to center {}: {:?}", centers[1], nb.indices);

    let ps = patchify(&cloud, 8, 16, &mut rng)?;
    let normed = normalize_patches(&ps)?;
    let spread = normed.points.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
    println!("8 patches of 16 points, max radius after centering {spread:.3}");

    let shifted = PointCloud::new(cloud.points().iter().map(|p| [p[0] + 0.1, p[1], p[2]]).collect())?;
    println!("chamfer(cloud, cloud) = {}", chamfer(&cloud, &cloud));
    println!("chamfer(cloud, cloud + 0.1 x) = {:.5}", chamfer(&cloud, &shifted));
    Ok(())
}
