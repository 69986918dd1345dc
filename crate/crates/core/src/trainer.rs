//! Pretraining loop: per-sample corruption, forward, loss, AdamW under a
//! cosine schedule, metrics logging and checkpointing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Scalar, Tensor, Var};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::{AffineRole, EncoderKind, MaskStrategy, Objective, Precision, TrainConfig};
use crate::corruption::{
    mask_fixed_clusters, mask_patches, mask_random_clusters, mask_view_occlusion, no_mask, sample_affine, MaskPlan,
};
use crate::data::{load_split, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::geometry::{affine_apply, normalize_patches, patchify, AffineTransform, PatchSet, PointCloud};
use crate::losses::{combine, loss_global, loss_local, loss_nontransformer, loss_whole, LossReport};
use crate::models::{Bound, ParamStore, PointNetModel, TransformerModel};

/// Learning rate at 0-based epoch `t` of `total`; `t > total` clamps.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 || t >= total {
        return lr_min;
    }
    let c = (std::f64::consts::PI * t as f64 / total as f64).cos();
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + c)
}

/// Cosine schedule with an optional linear warmup over the first epochs.
pub fn scheduled_lr(cfg: &TrainConfig, t: usize) -> f64 {
    let lr = cosine_lr(t, cfg.epochs, cfg.lr, cfg.lr_min);
    if t < cfg.warmup_epochs {
        lr * (t + 1) as f64 / cfg.warmup_epochs as f64
    } else {
        lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig, lr: f64) -> Self {
        Self {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// One AdamW update of every parameter. `step` is 1-based.
pub fn adamw_step<T: Scalar>(store: &mut ParamStore<T>, grads: &[Vec<T>], step: u64, opt: &AdamW) {
    let (b1, b2) = (T::lit(opt.beta1), T::lit(opt.beta2));
    let one = T::one();
    let c1 = one - T::lit(opt.beta1.powi(step as i32));
    let c2 = one - T::lit(opt.beta2.powi(step as i32));
    let lr = T::lit(opt.lr);
    let eps = T::lit(opt.eps);
    let decay = one - T::lit(opt.lr * opt.weight_decay);
    for (p, g) in store.params_mut().iter_mut().zip(grads) {
        for i in 0..g.len() {
            let m = b1 * p.m[i] + (one - b1) * g[i];
            let v = b2 * p.v[i] + (one - b2) * g[i] * g[i];
            p.m[i] = m;
            p.v[i] = v;
            let update = lr * (m / c1) / ((v / c2).sqrt() + eps);
            p.value.data[i] = p.value.data[i] * decay - update;
        }
    }
}

fn clip_grads<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.to_f64().unwrap().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g = *g * s);
    }
}

/// Seed of the random stream for (`epoch`, `index`), a splitmix-style mix.
pub fn derive_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ epoch) ^ index)
}

const SHUFFLE_STREAM: u64 = u64::MAX;
const INIT_EPOCH: u64 = u64::MAX;

/// Sample visiting order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64, SHUFFLE_STREAM)));
    order
}

/// Either encoder family together with its heads.
#[derive(Debug, Clone)]
pub enum Model {
    Transformer(TransformerModel),
    PointNet(PointNetModel),
}

impl Model {
    pub fn build<T: Scalar>(cfg: &TrainConfig, store: &mut ParamStore<T>) -> Result<Self> {
        let seed = derive_seed(cfg.seed, INIT_EPOCH, 0);
        Ok(match cfg.encoder {
            EncoderKind::Transformer => Model::Transformer(TransformerModel::new(store, &cfg.transformer(), seed)?),
            EncoderKind::PointNet => Model::PointNet(PointNetModel::new(store, &cfg.pointnet(), seed)?),
        })
    }

    /// Rebuilds config, model and parameters from a checkpoint.
    pub fn from_checkpoint<T: Scalar>(ckpt: &Checkpoint) -> Result<(TrainConfig, Model, ParamStore<T>)> {
        let cfg = TrainConfig::from_text(&ckpt.config)?;
        if cfg.fingerprint() != ckpt.fingerprint {
            return Err(Error::Checkpoint("config fingerprint does not match the embedded config".into()));
        }
        let mut store = ParamStore::new();
        let model = Model::build(&cfg, &mut store)?;
        ckpt.load_into(&mut store)?;
        Ok((cfg, model, store))
    }
}

/// Corrupted inputs and targets of one transformer sample.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub affine: AffineTransform,
    /// Patches of the clean cloud, absolute coordinates.
    pub clean: PatchSet,
    /// The same patches after the affine transform.
    pub corrupted: PatchSet,
    pub plan: MaskPlan,
    /// `[v, k, 3]` normalized corrupted visible patches.
    pub input_patches: Vec<f64>,
    /// `[v, 3]` corrupted visible centers.
    pub input_centers: Vec<f64>,
    /// `[n, 3]` corrupted centers driving the decoder PE.
    pub decoder_centers: Vec<f64>,
    /// `[r, k, 3]` normalized target patches at the reconstructed positions.
    pub target_patches: Vec<f64>,
    /// `[n, 3]` target centers.
    pub target_centers: Vec<f64>,
    /// `[w, 3]` target cloud.
    pub target_cloud: Vec<f64>,
}

/// Corrupted input and target of one PointNet sample.
#[derive(Debug, Clone)]
pub struct CloudSample {
    pub affine: AffineTransform,
    pub corrupted: PointCloud,
    pub plan: MaskPlan,
    pub input: PointCloud,
    pub target: PointCloud,
}

#[derive(Debug, Clone)]
pub enum Prepared {
    Patches(PatchSample),
    Cloud(CloudSample),
}

fn flat(points: &[[f64; 3]]) -> Vec<f64> {
    points.iter().flat_map(|p| p.iter().copied()).collect()
}

fn rows(ps: &PatchSet, which: &[usize]) -> Vec<f64> {
    which.iter().flat_map(|&i| flat(ps.patch(i))).collect()
}

/// Draws the corruption of one sample. The order of random draws is fixed:
/// patch centers (transformer only), affine transform, mask.
pub fn prepare_sample(cfg: &TrainConfig, cloud: &PointCloud, rng: &mut ChaCha8Rng) -> Result<Prepared> {
    let augment = cfg.affine_role == AffineRole::Augmentation;
    match cfg.encoder {
        EncoderKind::Transformer => {
            let clean = patchify(cloud, cfg.patches, cfg.patch_size, rng)?;
            let affine = sample_affine(&cfg.affine, rng)?;
            let corrupted = clean.transformed(&affine)?;
            let plan = match cfg.mask {
                MaskStrategy::Patch => mask_patches(cfg.patches, cfg.mask_ratio, rng)?,
                MaskStrategy::None => no_mask(cfg.patches),
                other => {
                    return Err(Error::Config(format!("transformer encoder cannot use mask = {other}")));
                }
            };
            let clean_n = normalize_patches(&clean)?;
            let corrupted_n = normalize_patches(&corrupted)?;
            let recon: Vec<usize> = if plan.masked.is_empty() {
                (0..cfg.patches).collect()
            } else {
                plan.masked.clone()
            };
            let (target, target_cloud) = if augment {
                (&corrupted_n, affine_apply(cloud, &affine)?)
            } else {
                (&clean_n, cloud.clone())
            };
            Ok(Prepared::Patches(PatchSample {
                input_patches: rows(&corrupted_n, &plan.visible),
                input_centers: plan.visible.iter().flat_map(|&i| corrupted.centers[i]).collect(),
                decoder_centers: corrupted.flat_centers(),
                target_patches: rows(target, &recon),
                target_centers: if augment { corrupted.flat_centers() } else { clean.flat_centers() },
                target_cloud: target_cloud.flat(),
                affine,
                clean,
                corrupted,
                plan,
            }))
        }
        EncoderKind::PointNet => {
            let affine = sample_affine(&cfg.affine, rng)?;
            let corrupted = affine_apply(cloud, &affine)?;
            let (plan, input) = match cfg.mask {
                MaskStrategy::Random => mask_random_clusters(&corrupted, cfg.mask_ratio, cfg.kappa_max, rng)?,
                MaskStrategy::Fixed => mask_fixed_clusters(&corrupted, cfg.mask_ratio, cfg.cluster_size, rng)?,
                MaskStrategy::View => mask_view_occlusion(&corrupted, cfg.mask_ratio, rng)?,
                MaskStrategy::None => (no_mask(corrupted.len()), corrupted.clone()),
                MaskStrategy::Patch => {
                    return Err(Error::Config("pointnet encoder cannot use mask = patch".into()));
                }
            };
            let target = if augment { corrupted.clone() } else { cloud.clone() };
            Ok(Prepared::Cloud(CloudSample {
                affine,
                corrupted,
                plan,
                input,
                target,
            }))
        }
    }
}

/// Loss nodes of one sample; unused terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct SampleLoss {
    pub total: Var,
    pub local: Option<Var>,
    pub global: Option<Var>,
}

fn constant<T: Scalar>(g: &mut Graph<T>, shape: &[usize], data: &[f64]) -> Result<Var> {
    Ok(g.constant(Tensor::from_f64(shape.to_vec(), data)?))
}

/// Forward pass and objective of one prepared sample.
pub fn sample_loss<T: Scalar>(
    cfg: &TrainConfig,
    model: &Model,
    g: &mut Graph<T>,
    p: &Bound,
    prep: &Prepared,
) -> Result<SampleLoss> {
    match (model, prep) {
        (Model::Transformer(m), Prepared::Patches(s)) => {
            let (n, k) = (cfg.patches, cfg.patch_size);
            let v = s.plan.visible.len();
            let r = s.target_patches.len() / (3 * k);
            let patches = constant(g, &[v, k, 3], &s.input_patches)?;
            let centers = constant(g, &[v, 3], &s.input_centers)?;
            let dec = constant(g, &[n, 3], &s.decoder_centers)?;
            let out = m.forward(g, p, patches, centers, dec, &s.plan)?;
            match cfg.objective {
                Objective::Whole => {
                    let w = s.target_cloud.len() / 3;
                    let target = constant(g, &[w, 3], &s.target_cloud)?;
                    let pred = out.whole.ok_or_else(|| Error::Config("model has no whole-cloud head".into()))?;
                    let l = loss_whole(g, pred, target)?;
                    Ok(SampleLoss {
                        total: l,
                        local: None,
                        global: Some(l),
                    })
                }
                obj => {
                    let tp = constant(g, &[r, k, 3], &s.target_patches)?;
                    let tc = constant(g, &[n, 3], &s.target_centers)?;
                    let local = loss_local(g, out.patches, tp)?;
                    let global = loss_global(g, out.centers, tc)?;
                    let total = match obj {
                        Objective::LocalOnly => local,
                        Objective::GlobalOnly => global,
                        _ => combine(g, local, global, cfg.lambda)?,
                    };
                    Ok(SampleLoss {
                        total,
                        local: (obj != Objective::GlobalOnly).then_some(local),
                        global: (obj != Objective::LocalOnly).then_some(global),
                    })
                }
            }
        }
        (Model::PointNet(m), Prepared::Cloud(s)) => {
            let input = constant(g, &[s.input.len(), 3], &s.input.flat())?;
            let target = constant(g, &[s.target.len(), 3], &s.target.flat())?;
            let (_, recon) = m.forward(g, p, input)?;
            let l = loss_nontransformer(g, recon, target)?;
            Ok(SampleLoss {
                total: l,
                local: Some(l),
                global: None,
            })
        }
        _ => Err(Error::Config("prepared sample does not match the encoder kind".into())),
    }
}

/// Mean losses and learning rate of one epoch; `epoch` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub report: LossReport,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,total,local,global,lr";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!("{},{},{},{},{}", self.epoch, r.total, r.local, r.global, self.lr)
    }
}

/// Effective λ reported for an objective; unused terms report 0.
fn report_lambda(cfg: &TrainConfig) -> f64 {
    match cfg.objective {
        Objective::Decomposed => cfg.lambda,
        Objective::LocalOnly => 0.0,
        Objective::GlobalOnly | Objective::Whole => 1.0,
    }
}

/// Training state for one precision.
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub model: Model,
    pub store: ParamStore<T>,
    samples: Vec<PointCloud>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &TrainConfig, samples: Vec<PointCloud>) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        if let Some(c) = samples.iter().find(|c| c.len() != cfg.points) {
            return Err(Error::InvalidArgument(format!(
                "cloud has {} points, config expects {}",
                c.len(),
                cfg.points
            )));
        }
        let mut store = ParamStore::new();
        let model = Model::build(cfg, &mut store)?;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            store,
            samples,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, samples: Vec<PointCloud>) -> Result<Self> {
        let cfg = TrainConfig::from_text(&ckpt.config)?;
        let mut t = Self::new(&cfg, samples)?;
        let (_, _, store) = Model::from_checkpoint::<T>(ckpt)?;
        t.store = store;
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            &self.store,
            self.cfg.to_text(),
            self.cfg.fingerprint(),
            self.cfg.seed,
            self.epoch,
            self.step,
        )
    }

    pub fn samples(&self) -> &[PointCloud] {
        &self.samples
    }

    /// Corruption drawn for sample `index` at 0-based `epoch`.
    pub fn prepare(&self, epoch: usize, index: usize) -> Result<Prepared> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, epoch as u64, index as u64));
        prepare_sample(&self.cfg, &self.samples[index], &mut rng)
    }

    /// Forward, backward and one AdamW step on a batch of prepared samples.
    /// Returns the summed per-sample `(total, local, global)`.
    pub fn step_batch(&mut self, batch: &[Prepared], lr: f64) -> Result<[f64; 3]> {
        let mut g = Graph::<T>::new();
        let bound = self.store.bind(&mut g);
        let mut sums = [0.0; 3];
        let mut acc: Option<Var> = None;
        for prep in batch {
            let l = sample_loss(&self.cfg, &self.model, &mut g, &bound, prep)?;
            let val = |v: Option<Var>| v.map(|v| g.value(v).item().to_f64().unwrap()).unwrap_or(0.0);
            sums[0] += val(Some(l.total));
            sums[1] += val(l.local);
            sums[2] += val(l.global);
            acc = Some(match acc {
                Some(a) => g.add(a, l.total)?,
                None => l.total,
            });
        }
        let sum = acc.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        if !sums.iter().all(|s| s.is_finite()) {
            return Err(Error::Diverged { epoch: self.epoch + 1 });
        }
        let mean = g.scale(sum, T::lit(1.0 / batch.len() as f64));
        g.backward(mean)?;
        let mut grads = self.store.grads(&g, &bound);
        if self.cfg.grad_clip > 0.0 {
            clip_grads(&mut grads, self.cfg.grad_clip);
        }
        self.step += 1;
        adamw_step(&mut self.store, &grads, self.step, &AdamW::from_config(&self.cfg, lr));
        Ok(sums)
    }

    /// Runs the next epoch. On a non-finite loss the parameters are rolled
    /// back to the start of the epoch and `Error::Diverged` is returned.
    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let t = self.epoch;
        let lr = scheduled_lr(&self.cfg, t);
        let snapshot = (self.store.clone(), self.step);
        let order = epoch_order(self.cfg.seed, t, self.samples.len());
        let mut sums = [0.0; 3];
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch = chunk.iter().map(|&i| self.prepare(t, i)).collect::<Result<Vec<_>>>()?;
            match self.step_batch(&batch, lr) {
                Ok(s) => sums.iter_mut().zip(s).for_each(|(a, b)| *a += b),
                Err(e) => {
                    (self.store, self.step) = snapshot;
                    return Err(e);
                }
            }
        }
        if !self.store.params().iter().all(|p| p.value.data.iter().all(|x| x.is_finite())) {
            (self.store, self.step) = snapshot;
            return Err(Error::Diverged { epoch: t + 1 });
        }
        let n = self.samples.len() as f64;
        let lambda = report_lambda(&self.cfg);
        let (local, global) = (sums[1] / n, sums[2] / n);
        let total = if self.cfg.objective == Objective::Decomposed {
            local + lambda * global
        } else {
            sums[0] / n
        };
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: t + 1,
            report: LossReport {
                total,
                local,
                global,
                lambda,
            },
            lr,
        })
    }
}

/// Where a run writes its artifacts and how it starts.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Output directory for `metrics.csv`, `config.txt` and checkpoints.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop once this many epochs are complete (the schedule still spans
    /// `cfg.epochs`).
    pub stop_after: Option<usize>,
    /// Also write `epoch_NNNN.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LAST_FINITE_FILE: &str = "last_finite.ckpt";
pub const CONFIG_FILE: &str = "config.txt";

/// Pretrains on in-memory clouds, dispatching on `cfg.precision`.
pub fn pretrain(samples: Vec<PointCloud>, cfg: &TrainConfig, opts: &RunOptions) -> Result<RunSummary> {
    let precision = match &opts.resume {
        Some(c) => TrainConfig::from_text(&c.config)?.precision,
        None => cfg.precision,
    };
    match precision {
        Precision::F32 => run::<f32>(samples, cfg, opts),
        Precision::F64 => run::<f64>(samples, cfg, opts),
    }
}

/// Loads the train split of a manifest and pretrains on it.
pub fn pretrain_manifest(manifest: &DatasetManifest, cfg: &TrainConfig, opts: &RunOptions) -> Result<RunSummary> {
    let cfg = match &opts.resume {
        Some(c) => TrainConfig::from_text(&c.config)?,
        None => cfg.clone(),
    };
    let samples = load_split(manifest, Split::Train, cfg.points, cfg.seed)?;
    pretrain(samples.into_iter().map(|s| s.cloud).collect(), &cfg, opts)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Keeps the header and the rows of the first `epochs` epochs.
fn truncate_metrics(path: &Path, epochs: usize) -> Result<String> {
    let mut out = format!("{METRICS_HEADER}\n");
    if let Ok(text) = std::fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let e: usize = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
            if e <= epochs {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

fn run<T: Scalar>(samples: Vec<PointCloud>, cfg: &TrainConfig, opts: &RunOptions) -> Result<RunSummary> {
    let mut trainer = match &opts.resume {
        Some(c) => Trainer::<T>::from_checkpoint(c, samples)?,
        None => Trainer::<T>::new(cfg, samples)?,
    };
    let cfg = trainer.cfg.clone();
    let metrics_path = opts.out_dir.as_ref().map(|d| d.join(METRICS_FILE));
    let mut metrics = String::new();
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join(CONFIG_FILE), &cfg.to_text())?;
        metrics = truncate_metrics(metrics_path.as_ref().unwrap(), trainer.epoch)?;
        write(metrics_path.as_ref().unwrap(), &metrics)?;
    }
    let last = opts.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    let mut history = Vec::new();
    while trainer.epoch < last {
        let rec = match trainer.train_epoch() {
            Ok(r) => r,
            Err(e @ Error::Diverged { .. }) => {
                if let Some(dir) = &opts.out_dir {
                    save_checkpoint(&dir.join(LAST_FINITE_FILE), &trainer.checkpoint())?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        history.push(rec);
        if let (Some(dir), Some(path)) = (&opts.out_dir, &metrics_path) {
            writeln!(metrics, "{}", rec.csv_row()).unwrap();
            write(path, &metrics)?;
            if opts.checkpoint_every > 0 && trainer.epoch % opts.checkpoint_every == 0 {
                save_checkpoint(&dir.join(format!("epoch_{:04}.ckpt", trainer.epoch)), &trainer.checkpoint())?;
            }
        }
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &checkpoint)?;
    }
    Ok(RunSummary { checkpoint, history })
}
