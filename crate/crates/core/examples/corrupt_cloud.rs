//! Affine corruption followed by each masking strategy on one synthetic shape.

use pcssl::corruption::{
    mask_fixed_clusters, mask_patches, mask_random_clusters, mask_view_occlusion, sample_affine, AffineFamilySpec,
};
use pcssl::data::{normalize_unit_sphere, sample_shape, ShapeFamily};
use pcssl::geometry::{affine_apply, patchify, PointCloud};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pcssl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cloud = normalize_unit_sphere(&PointCloud::new(sample_shape(ShapeFamily::Torus, 1024, 0.3, &mut rng))?)?;

    let t = sample_affine(&AffineFamilySpec::default(), &mut rng)?;
    println!("affine (det {:+.3}):", t.determinant());
    for row in t.matrix {
        println!("  {:+.3} {:+.3} {:+.3} | {:+.3}", row[0], row[1], row[2], row[3]);
    }
    let x = affine_apply(&cloud, &t)?;

    let alpha = 0.6;
    let (plan, kept) = mask_random_clusters(&x, alpha, 8, &mut rng)?;
    println!("random clusters: sizes {:?}, {} -> {} points", plan.cluster_sizes, x.len(), kept.len());
    let (plan, kept) = mask_fixed_clusters(&x, alpha, 64, &mut rng)?;
    println!("fixed clusters: {} clusters, {} -> {} points", plan.cluster_sizes.len(), x.len(), kept.len());
    let (_, kept) = mask_view_occlusion(&x, alpha, &mut rng)?;
    println!("view occlusion: {} -> {} points", x.len(), kept.len());

    let patches = patchify(&x, 32, 32, &mut rng)?;
    let plan = mask_patches(32, alpha, &mut rng)?;
    println!(
        "patches: {} of {} masked, {} visible points",
        plan.masked.len(),
        patches.n,
        plan.visible.len() * patches.k
    );
    Ok(())
}
