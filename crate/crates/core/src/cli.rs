//! Command-line front end: `synth`, `corrupt`, `pretrain`, `probe`,
//! `fewshot` and `reconstruct`.
//!
//! Every subcommand first prints its resolved settings as `key = value`
//! lines; all other output lines start with `#`, so standard output of a
//! `pretrain` run is itself a config file that reproduces the run.
//! Failures print one line `error: kind=<kind> msg="<message>"` to stderr
//! and exit with the code of [`exit_code`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{load_affine_spec, MaskStrategy, TrainConfig};
use crate::corruption::{mask_fixed_clusters, mask_patches, mask_random_clusters, mask_view_occlusion, no_mask, sample_affine, MaskPlan};
use crate::data::{
    load_split, normalize_unit_sphere, read_cloud, resample, synth_generate, write_cloud, CloudFormat, DatasetManifest,
    Pose, ShapeFamily, Split, SynthSpec,
};
use crate::error::{Error, Result};
use crate::eval::{draw_episode, extract_features, fewshot_eval, linear_probe, probe_with_sweep, reconstruct_export, EpisodeSpec, FeatureTable, ProbeReport, C_SWEEP};
use crate::geometry::{affine_apply, patchify, AffineTransform, PointCloud};
use crate::trainer::{pretrain_manifest, RunOptions, Trainer, CHECKPOINT_FILE, CONFIG_FILE};

// Standard output may be a closed pipe (`pcssl ... | head`); such write
// errors are ignored rather than turned into a panic.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

fn say_text(text: &str) {
    use std::io::Write as _;
    let _ = std::io::stdout().write_all(text.as_bytes());
}

#[derive(Debug, Parser)]
#[command(name = "pcssl", version, about = "Affine + masking point-cloud pretraining toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shape dataset with a manifest.
    Synth(SynthArgs),
    /// Apply an affine transform and a mask to one cloud.
    Corrupt(CorruptArgs),
    /// Pretrain an encoder on the train split of a manifest.
    Pretrain(PretrainArgs),
    /// Linear-probe a frozen encoder.
    Probe(ProbeArgs),
    /// Few-shot episodes on frozen features.
    Fewshot(FewshotArgs),
    /// Export clean, corrupted and reconstructed clouds.
    Reconstruct(ReconstructArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of every random draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated subset of sphere,cube,cylinder,torus.
    #[arg(long, default_value = "sphere,cube,cylinder,torus")]
    pub families: String,
    /// Shapes per family; 80% go to the train split.
    #[arg(long, default_value_t = 20)]
    pub samples_per_family: usize,
    /// Points per shape.
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    /// Gaussian jitter standard deviation.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    /// Relative spread of per-sample proportions, in [0, 1).
    #[arg(long, default_value_t = 0.6)]
    pub variation: f64,
    /// canonical | upright | random.
    #[arg(long, default_value = "upright")]
    pub pose: String,
}

/// Config sources shared by `corrupt` and `pretrain`, applied in order:
/// defaults, `--config`, `--affine-spec`, `--set`, then the named flags.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// Key-value config file; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the desk-scale toy preset instead of the full defaults.
    #[arg(long)]
    pub toy: bool,
    /// Seed of every random draw [config default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// random | fixed | view | patch | none [config default: patch].
    #[arg(long)]
    pub mask: Option<String>,
    /// Masking ratio α [config default: 0.6].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// File with `affine.*` keys.
    #[arg(long)]
    pub affine_spec: Option<PathBuf>,
    /// full | none | comma list of rotate,translate,reflect,shear,scale
    /// [config default: full].
    #[arg(long)]
    pub affine: Option<String>,
    /// corruption | augmentation [config default: corruption].
    #[arg(long)]
    pub affine_role: Option<String>,
    /// decomposed | whole | local-only | global-only [config default:
    /// decomposed].
    #[arg(long)]
    pub objective: Option<String>,
    /// fc | fold for every head, or `local=fold,global=fc,pointnet=fc`
    /// [config default: fc everywhere].
    #[arg(long)]
    pub decoder: Option<String>,
    /// transformer | pointnet [config default: transformer].
    #[arg(long)]
    pub encoder: Option<String>,
    /// Training epochs [config default: 300, toy 200].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Any config key, repeatable: `--set lr=0.005`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn overrides_present(&self) -> bool {
        self.config.is_some()
            || self.toy
            || self.seed.is_some()
            || self.mask.is_some()
            || self.alpha.is_some()
            || self.affine_spec.is_some()
            || self.affine.is_some()
            || self.affine_role.is_some()
            || self.objective.is_some()
            || self.decoder.is_some()
            || self.encoder.is_some()
            || self.epochs.is_some()
            || !self.set.is_empty()
    }

    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = if self.toy { TrainConfig::toy() } else { TrainConfig::default() };
        if let Some(p) = &self.config {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_text(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        }
        if let Some(p) = &self.affine_spec {
            let enabled = cfg.affine.enabled;
            cfg.affine = load_affine_spec(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            if !text.contains("families") {
                cfg.affine.enabled = enabled;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let pairs = [
            ("mask", self.mask.clone()),
            ("mask_ratio", self.alpha.map(|a| a.to_string())),
            ("affine.families", self.affine.clone()),
            ("affine_role", self.affine_role.clone()),
            ("objective", self.objective.clone()),
            ("encoder", self.encoder.clone()),
            ("epochs", self.epochs.map(|e| e.to_string())),
            ("seed", self.seed.map(|s| s.to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        if let Some(d) = &self.decoder {
            apply_decoder(&mut cfg, d)?;
        }
        Ok(cfg)
    }
}

fn apply_decoder(cfg: &mut TrainConfig, spec: &str) -> Result<()> {
    if !spec.contains('=') {
        for k in ["local_decoder", "global_decoder", "decoder"] {
            cfg.set(k, spec.trim())?;
        }
        return Ok(());
    }
    for part in spec.split(',') {
        let (head, kind) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--decoder: expected head=kind, got {part:?}")))?;
        let key = match head.trim() {
            "local" => "local_decoder",
            "global" => "global_decoder",
            "pointnet" => "decoder",
            other => return Err(Error::Config(format!("--decoder: unknown head {other:?}"))),
        };
        cfg.set(key, kind.trim())?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    /// Input cloud (.xyz or .ply).
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for corrupted.xyz, affine.txt and mask.txt.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Dataset manifest; the train split is used.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for config.txt, metrics.csv and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Continue from a checkpoint; its embedded config is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Also write epoch_NNNN.ckpt every N epochs; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Write the randomly initialized model without training.
    #[arg(long)]
    pub init_only: bool,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Encoder checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest with train and test splits; a val split, if present, picks C.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the feature tables and probe.txt.
    #[arg(long)]
    pub out: PathBuf,
    /// Fixed SVM regularization; without it C is swept over 0.1, 1, 10.
    #[arg(long)]
    pub c: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FewshotArgs {
    /// Encoder checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest; samples of every split form the episode pool.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for features_all.csv and fewshot.txt.
    #[arg(long)]
    pub out: PathBuf,
    /// Classes per episode.
    #[arg(long, default_value_t = 5)]
    pub ways: usize,
    /// Training samples per class.
    #[arg(long, default_value_t = 10)]
    pub shots: usize,
    /// Query samples per class.
    #[arg(long, default_value_t = 15)]
    pub queries: usize,
    /// Number of episodes.
    #[arg(long, default_value_t = 10)]
    pub repetitions: usize,
    /// Seed of the episode draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cloud to reconstruct; resampled and normalized like training data.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for clean.xyz, corrupted.xyz and reconstruction.xyz.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the resampling and the corruption draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Process exit code of an error kind.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 3,
        Error::MissingFile(_) => 4,
        Error::DegenerateMask(_) => 5,
        Error::Parse { .. } | Error::Format { .. } => 6,
        Error::Checkpoint(_) => 7,
        Error::Io { .. } => 8,
        Error::Diverged { .. } => 9,
        _ => 10,
    }
}

pub const USAGE_EXIT: i32 = 2;

fn error_line(kind: &str, msg: &str) -> String {
    let msg = msg.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    format!("error: kind={kind} msg=\"{msg}\"")
}

/// Parses arguments, runs the subcommand and returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                say_text(&e.to_string());
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { USAGE_EXIT } else { 0 };
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return USAGE_EXIT;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            exit_code(&e)
        }
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Corrupt(a) => corrupt(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Probe(a) => probe(a),
        Command::Fewshot(a) => fewshot(a),
        Command::Reconstruct(a) => reconstruct(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let families = a
        .families
        .split(',')
        .map(|s| ShapeFamily::parse(s.trim()).ok_or_else(|| Error::Config(format!("unknown shape family {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let pose = Pose::parse(&a.pose).ok_or_else(|| Error::Config(format!("unknown pose {:?}", a.pose)))?;
    let spec = SynthSpec {
        families,
        samples_per_family: a.samples_per_family,
        points: a.points,
        jitter: a.jitter,
        variation: a.variation,
        pose,
        seed: a.seed,
    };
    let names: Vec<&str> = spec.families.iter().map(|f| f.name()).collect();
    say!(
        "families = {}\nsamples_per_family = {}\npoints = {}\njitter = {}\nvariation = {}\npose = {}\nseed = {}",
        names.join(","),
        spec.samples_per_family,
        spec.points,
        spec.jitter,
        spec.variation,
        pose.name(),
        spec.seed
    );
    let m = synth_generate(&spec, &a.out)?;
    say!("# wrote {} clouds and {}", m.entries.len(), a.out.join("manifest.tsv").display());
    Ok(())
}

/// Affine transform then mask, as during pretraining. Patch masking keeps
/// the points of the visible patches.
pub fn corrupt_cloud(cfg: &TrainConfig, cloud: &PointCloud, seed: u64) -> Result<(AffineTransform, MaskPlan, PointCloud)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let affine = sample_affine(&cfg.affine, &mut rng)?;
    let x = affine_apply(cloud, &affine)?;
    let (plan, out) = match cfg.mask {
        MaskStrategy::Random => mask_random_clusters(&x, cfg.mask_ratio, cfg.kappa_max, &mut rng)?,
        MaskStrategy::Fixed => mask_fixed_clusters(&x, cfg.mask_ratio, cfg.cluster_size, &mut rng)?,
        MaskStrategy::View => mask_view_occlusion(&x, cfg.mask_ratio, &mut rng)?,
        MaskStrategy::None => (no_mask(x.len()), x),
        MaskStrategy::Patch => {
            let ps = patchify(&x, cfg.patches, cfg.patch_size, &mut rng)?;
            let plan = mask_patches(cfg.patches, cfg.mask_ratio, &mut rng)?;
            let pts = plan.visible.iter().flat_map(|&i| ps.patch(i).to_vec()).collect();
            (plan, PointCloud::new(pts)?)
        }
    };
    Ok((affine, plan, out))
}

fn corrupt(a: CorruptArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    cfg.affine.validate()?;
    say_text(&cfg.to_text());
    let cloud = read_cloud(&a.input)?;
    let (affine, plan, out) = corrupt_cloud(&cfg, &cloud, cfg.seed)?;
    create_out(&a.out)?;
    write_cloud(&a.out.join("corrupted.xyz"), &out, CloudFormat::Xyz)?;
    let mut t = String::new();
    for row in affine.matrix {
        writeln!(t, "{} {} {} {}", row[0], row[1], row[2], row[3]).unwrap();
    }
    let fams: Vec<&str> = affine.provenance.iter().map(|f| f.name()).collect();
    writeln!(t, "# families: {}", fams.join(",")).unwrap();
    write_text(&a.out.join("affine.txt"), &t)?;
    let mut m = String::new();
    writeln!(m, "# masked indices ({})", if cfg.mask == MaskStrategy::Patch { "patches" } else { "points" }).unwrap();
    if !plan.cluster_sizes.is_empty() {
        let sizes: Vec<String> = plan.cluster_sizes.iter().map(|s| s.to_string()).collect();
        writeln!(m, "# cluster sizes: {}", sizes.join(",")).unwrap();
    }
    for i in &plan.masked {
        writeln!(m, "{i}").unwrap();
    }
    write_text(&a.out.join("mask.txt"), &m)?;
    say!(
        "# input {} points, masked {}, output {} points -> {}",
        cloud.len(),
        plan.masked.len(),
        out.len(),
        a.out.join("corrupted.xyz").display()
    );
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let resume = match &a.resume {
        Some(p) => {
            if a.cfg.overrides_present() {
                return Err(Error::Config("config flags cannot be combined with --resume".into()));
            }
            Some(load_checkpoint(p)?)
        }
        None => None,
    };
    let cfg = match &resume {
        Some(c) => TrainConfig::from_text(&c.config)?,
        None => a.cfg.resolve()?,
    };
    cfg.validate()?;
    say_text(&cfg.to_text());
    if a.init_only {
        let samples = load_split(&manifest, Split::Train, cfg.points, cfg.seed)?;
        let t = Trainer::<f32>::new(&cfg, samples.into_iter().map(|s| s.cloud).collect())?;
        create_out(&a.out)?;
        write_text(&a.out.join(CONFIG_FILE), &cfg.to_text())?;
        save_checkpoint(&a.out.join(CHECKPOINT_FILE), &t.checkpoint())?;
        say!("# wrote randomly initialized {}", a.out.join(CHECKPOINT_FILE).display());
        return Ok(());
    }
    let opts = RunOptions {
        out_dir: Some(a.out.clone()),
        resume,
        stop_after: a.stop_after,
        checkpoint_every: a.checkpoint_every,
    };
    let summary = pretrain_manifest(&manifest, &cfg, &opts)?;
    for r in &summary.history {
        say!("# {}", r.csv_row());
    }
    say!("# wrote {}", a.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn probe(a: ProbeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    say!(
        "checkpoint = {}\nmanifest = {}\nc = {}",
        a.checkpoint.display(),
        a.manifest.display(),
        a.c.map(|c| c.to_string()).unwrap_or_else(|| "sweep".into())
    );
    let train = extract_features(&ckpt, &manifest, Split::Train)?;
    let test = extract_features(&ckpt, &manifest, Split::Test)?;
    let val = extract_features(&ckpt, &manifest, Split::Val)?;
    create_out(&a.out)?;
    train.save(&a.out.join("features_train.csv"))?;
    test.save(&a.out.join("features_test.csv"))?;
    let report = match a.c {
        Some(c) => ProbeReport {
            c,
            accuracy: linear_probe(&train, &test, c)?,
            sweep: Vec::new(),
        },
        None => probe_with_sweep(&train, Some(&val), &test, &C_SWEEP)?,
    };
    let text = report.to_text(train.fingerprint);
    write_text(&a.out.join("probe.txt"), &text)?;
    for line in text.lines() {
        say!("# {line}");
    }
    Ok(())
}

fn all_features(ckpt: &crate::checkpoint::Checkpoint, manifest: &DatasetManifest) -> Result<FeatureTable> {
    let mut table = extract_features(ckpt, manifest, Split::Train)?;
    for split in [Split::Val, Split::Test] {
        table.rows.extend(extract_features(ckpt, manifest, split)?.rows);
    }
    FeatureTable::new(table.dim, table.fingerprint, table.rows)
}

fn fewshot(a: FewshotArgs) -> Result<()> {
    let spec = EpisodeSpec {
        ways: a.ways,
        shots: a.shots,
        queries: a.queries,
        repetitions: a.repetitions,
        seed: a.seed,
    };
    spec.validate()?;
    say!(
        "checkpoint = {}\nmanifest = {}\nways = {}\nshots = {}\nqueries = {}\nrepetitions = {}\nseed = {}",
        a.checkpoint.display(),
        a.manifest.display(),
        spec.ways,
        spec.shots,
        spec.queries,
        spec.repetitions,
        spec.seed
    );
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let features = all_features(&ckpt, &manifest)?;
    draw_episode(&features, &spec, 0)?;
    let report = fewshot_eval(&features, &spec)?;
    create_out(&a.out)?;
    features.save(&a.out.join("features_all.csv"))?;
    let text = report.to_text();
    write_text(&a.out.join("fewshot.txt"), &text)?;
    for line in text.lines() {
        say!("# {line}");
    }
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    say!(
        "checkpoint = {}\ninput = {}\nseed = {}",
        a.checkpoint.display(),
        a.input.display(),
        a.seed
    );
    let cfg = TrainConfig::from_text(&ckpt.config)?;
    let raw = read_cloud(&a.input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let cloud = normalize_unit_sphere(&resample(&raw, cfg.points, &mut rng)?)?;
    let r = reconstruct_export(&ckpt, &cloud, a.seed, &a.out)?;
    say!(
        "# clean {} points, corrupted {} points, reconstruction {} points -> {}",
        r.clean.len(),
        r.corrupted.len(),
        r.reconstruction.len(),
        a.out.display()
    );
    Ok(())
}
