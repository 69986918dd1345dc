//! Pretrains the PointNet autoencoder with random cluster masking and a
//! folding decoder.

use pcssl::config::TrainConfig;
use pcssl::data::{load_split, synth_generate, Split, SynthSpec};
use pcssl::trainer::Trainer;

fn main() -> pcssl::Result<()> {
    let tmp = tempfile::tempdir().expect("temp dir");
    let spec = SynthSpec {
        samples_per_family: 8,
        points: 256,
        ..SynthSpec::default()
    };
    let manifest = synth_generate(&spec, tmp.path())?;
    let mut cfg = TrainConfig::toy();
    for (k, v) in [
        ("encoder", "pointnet"),
        ("mask", "random"),
        ("decoder", "fold"),
        ("pointnet_widths", "3,64,128"),
        ("epochs", "15"),
        ("lr", "0.002"),
    ] {
        cfg.set(k, v)?;
    }
    let samples = load_split(&manifest, Split::Train, cfg.points, cfg.seed)?;
    let mut t = Trainer::<f32>::new(&cfg, samples.into_iter().map(|s| s.cloud).collect())?;
    for _ in 0..cfg.epochs {
        let r = t.train_epoch()?;
        println!("epoch {:>2}  chamfer {:.5}  lr {:.5}", r.epoch, r.report.total, r.lr);
    }
    Ok(())
}
