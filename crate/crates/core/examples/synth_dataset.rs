//! Generates the four-family synthetic dataset and checks the analytic sphere.
//!
//! cargo run --example synth_dataset -- [out_dir]

use std::path::PathBuf;

use pcssl::data::{load_split, synth_generate, Split, SynthSpec};

fn main() -> pcssl::Result<()> {
    let tmp = tempfile::tempdir().expect("temp dir");
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| tmp.path().join("synth"));
    let spec = SynthSpec {
        samples_per_family: 10,
        variation: 0.0,
        ..SynthSpec::default()
    };
    let manifest = synth_generate(&spec, &out)?;
    for split in [Split::Train, Split::Test] {
        println!("{}: {} clouds", split.name(), manifest.split(split).count());
    }
    let train = load_split(&manifest, Split::Train, spec.points, 0)?;
    let sphere = train.iter().find(|s| manifest.labels[s.label] == "sphere").expect("a sphere");
    let worst = sphere
        .cloud
        .points()
        .iter()
        .map(|p| ((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 1.0).abs())
        .fold(0.0, f64::max);
    println!("{}: {} points, max |norm - 1| = {worst:.2e}", sphere.id, sphere.cloud.len());
    println!("manifest at {}", out.join("manifest.tsv").display());
    Ok(())
}
