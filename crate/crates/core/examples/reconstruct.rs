//! Writes the clean, corrupted and reconstructed clouds of one shape after
//! a short pretraining run, as xyz files for a point-cloud viewer.
//!
//! cargo run --release --example reconstruct -- [out_dir]

use std::path::PathBuf;

use pcssl::config::TrainConfig;
use pcssl::data::{load_split, synth_generate, Split, SynthSpec};
use pcssl::eval::reconstruct_export;
use pcssl::losses::chamfer;
use pcssl::trainer::Trainer;

fn main() -> pcssl::Result<()> {
    let tmp = tempfile::tempdir().expect("temp dir");
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| tmp.path().join("rec"));
    let manifest = synth_generate(
        &SynthSpec {
            samples_per_family: 5,
            points: 256,
            ..SynthSpec::default()
        },
        &tmp.path().join("data"),
    )?;
    let mut cfg = TrainConfig::toy();
    cfg.apply_text("epochs = 20\nlr = 0.005\n")?;
    let samples = load_split(&manifest, Split::Train, cfg.points, cfg.seed)?;
    let probe = samples[0].cloud.clone();
    let mut t = Trainer::<f32>::new(&cfg, samples.into_iter().map(|s| s.cloud).collect())?;
    for _ in 0..cfg.epochs {
        t.train_epoch()?;
    }
    let r = reconstruct_export(&t.checkpoint(), &probe, 0, &out)?;
    println!(
        "clean {} points, corrupted {} points, reconstruction {} points",
        r.clean.len(),
        r.corrupted.len(),
        r.reconstruction.len()
    );
    println!("chamfer(clean, reconstruction) = {:.4}", chamfer(&r.clean, &r.reconstruction));
    println!("files in {}", out.display());
    Ok(())
}
