//! Interrupts a run after two epochs, resumes it from the checkpoint and
//! compares against the uninterrupted run.

use pcssl::config::TrainConfig;
use pcssl::data::{load_split, synth_generate, Split, SynthSpec};
use pcssl::trainer::{pretrain, RunOptions};

fn main() -> pcssl::Result<()> {
    let tmp = tempfile::tempdir().expect("temp dir");
    let manifest = synth_generate(
        &SynthSpec {
            samples_per_family: 4,
            points: 128,
            ..SynthSpec::default()
        },
        &tmp.path().join("data"),
    )?;
    let mut cfg = TrainConfig::default();
    cfg.apply_text("points = 128\nepochs = 5\nd = 16\nheads = 2\npatches = 8\npatch_size = 16\nhead_hidden = 32\n")?;
    let clouds = || -> pcssl::Result<Vec<_>> {
        Ok(load_split(&manifest, Split::Train, cfg.points, cfg.seed)?.into_iter().map(|s| s.cloud).collect())
    };

    let full = pretrain(clouds()?, &cfg, &RunOptions::default())?;
    let part = pretrain(
        clouds()?,
        &cfg,
        &RunOptions {
            stop_after: Some(2),
            ..Default::default()
        },
    )?;
    let resumed = pretrain(
        clouds()?,
        &cfg,
        &RunOptions {
            resume: Some(part.checkpoint),
            ..Default::default()
        },
    )?;
    let same = full.checkpoint.to_bytes() == resumed.checkpoint.to_bytes();
    println!("uninterrupted final loss {:.6}", full.history.last().unwrap().report.total);
    println!("resumed final loss       {:.6}", resumed.history.last().unwrap().report.total);
    println!("checkpoints byte-identical: {same}");
    Ok(())
}
