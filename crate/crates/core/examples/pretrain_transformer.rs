//! Pretrains a small transformer on synthetic shapes with the decomposed
//! objective and writes metrics.csv and checkpoint.ckpt.
//!
//! cargo run --release --example pretrain_transformer -- [out_dir]

use std::path::PathBuf;

use pcssl::config::TrainConfig;
use pcssl::data::{synth_generate, SynthSpec};
use pcssl::trainer::{pretrain_manifest, RunOptions};

fn main() -> pcssl::Result<()> {
    let tmp = tempfile::tempdir().expect("temp dir");
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| tmp.path().join("run"));
    let manifest = synth_generate(
        &SynthSpec {
            samples_per_family: 10,
            points: 256,
            ..SynthSpec::default()
        },
        &tmp.path().join("data"),
    )?;

    let mut cfg = TrainConfig::toy();
    cfg.apply_text("epochs = 20\nlr = 0.005\nd = 32\nencoder_depth = 2\ndecoder_depth = 1\nhead_hidden = 64\nwarmup_epochs = 2\n")?;
    let summary = pretrain_manifest(
        &manifest,
        &cfg,
        &RunOptions {
            out_dir: Some(out.clone()),
            ..Default::default()
        },
    )?;
    println!("epoch,total,local,global,lr");
    for r in &summary.history {
        println!("{}", r.csv_row());
    }
    let first = summary.history[0].report.total;
    let last = summary.history.last().unwrap().report.total;
    println!("loss ratio {:.3}; outputs in {}", last / first, out.display());
    Ok(())
}
