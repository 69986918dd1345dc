//! Linear SVM probe of a random-init encoder and of the same encoder after
//! a short pretraining run.
//!
//! cargo run --release --example linear_probe

use pcssl::config::TrainConfig;
use pcssl::data::{load_split, synth_generate, Split, SynthSpec};
use pcssl::eval::{extract_features, probe_with_sweep, C_SWEEP};
use pcssl::trainer::Trainer;

fn main() -> pcssl::Result<()> {
    let tmp = tempfile::tempdir().expect("temp dir");
    let manifest = synth_generate(
        &SynthSpec {
            samples_per_family: 20,
            points: 256,
            ..SynthSpec::default()
        },
        tmp.path(),
    )?;
    let mut cfg = TrainConfig::toy();
    cfg.apply_text("epochs = 30\nlr = 0.005\n")?;
    let samples = load_split(&manifest, Split::Train, cfg.points, cfg.seed)?;
    let mut t = Trainer::<f32>::new(&cfg, samples.into_iter().map(|s| s.cloud).collect())?;

    let probe = |t: &Trainer<f32>| -> pcssl::Result<_> {
        let ckpt = t.checkpoint();
        let train = extract_features(&ckpt, &manifest, Split::Train)?;
        let test = extract_features(&ckpt, &manifest, Split::Test)?;
        probe_with_sweep(&train, None, &test, &C_SWEEP)
    };
    let before = probe(&t)?;
    for _ in 0..cfg.epochs {
        t.train_epoch()?;
    }
    let after = probe(&t)?;
    println!("random-init: accuracy {:.3} (C = {})", before.accuracy, before.c);
    println!("pretrained:  accuracy {:.3} (C = {})", after.accuracy, after.c);
    for (c, acc) in &after.sweep {
        println!("  held-out accuracy at C = {c}: {acc:.3}");
    }
    Ok(())
}
