//! Few-shot episodes (2-way, 5-shot) on features of a random-init encoder.

use pcssl::config::TrainConfig;
use pcssl::data::{load_split, synth_generate, Split, SynthSpec};
use pcssl::eval::{extract_features, fewshot_eval, EpisodeSpec};
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
    let cfg = TrainConfig::toy();
    let samples = load_split(&manifest, Split::Train, cfg.points, cfg.seed)?;
    let ckpt = Trainer::<f32>::new(&cfg, samples.into_iter().map(|s| s.cloud).collect())?.checkpoint();

    let mut features = extract_features(&ckpt, &manifest, Split::Train)?;
    features.rows.extend(extract_features(&ckpt, &manifest, Split::Test)?.rows);
    let spec = EpisodeSpec {
        ways: 2,
        shots: 5,
        queries: 10,
        repetitions: 10,
        seed: 3,
    };
    let report = fewshot_eval(&features, &spec)?;
    print!("{}", report.to_text());
    Ok(())
}
