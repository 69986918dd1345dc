//! Frozen-encoder evaluation: feature extraction, linear SVM probing,
//! few-shot episodes and reconstruction export.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Tensor};
use crate::checkpoint::Checkpoint;
use crate::config::{fnv1a, TrainConfig};
use crate::data::{load_split, write_cloud, CloudFormat, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample_from, normalize_patches, patchify_with_centers, PointCloud};
use crate::models::{Bound, ParamStore};
use crate::trainer::{derive_seed, prepare_sample, Model, Prepared};

pub const DEFAULT_C: f64 = 1.0;
pub const C_SWEEP: [f64; 3] = [0.1, 1.0, 10.0];

/// A frozen encoder restored from a checkpoint.
pub struct Encoder {
    pub cfg: TrainConfig,
    pub model: Model,
    pub store: ParamStore<f64>,
    pub fingerprint: u64,
}

impl Encoder {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (cfg, model, store) = Model::from_checkpoint::<f64>(ckpt)?;
        let fingerprint = fnv1a(
            &ckpt
                .params
                .iter()
                .flat_map(|p| p.value.iter().flat_map(|x| x.to_le_bytes()))
                .collect::<Vec<u8>>(),
        );
        Ok(Self {
            cfg,
            model,
            store,
            fingerprint,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    /// Probe feature of a clean cloud: no masking, no affine transform,
    /// patch centers by FPS from point 0.
    pub fn feature(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        let mut g = Graph::<f64>::new();
        let p = self.store.bind_frozen(&mut g);
        let f = self.feature_var(&mut g, &p, cloud)?;
        Ok(g.value(f).data.clone())
    }

    fn feature_var(&self, g: &mut Graph<f64>, p: &Bound, cloud: &PointCloud) -> Result<crate::autograd::Var> {
        match &self.model {
            Model::Transformer(m) => {
                let (n, k) = (self.cfg.patches, self.cfg.patch_size);
                let centers = farthest_point_sample_from(cloud, n, 0)?;
                let ps = normalize_patches(&patchify_with_centers(cloud, &centers, k)?)?;
                let patches = g.constant(Tensor::new(vec![n, k, 3], ps.flat_points())?);
                let c = g.constant(Tensor::new(vec![n, 3], ps.flat_centers())?);
                m.probe_feature(g, p, patches, c)
            }
            Model::PointNet(m) => {
                let x = g.constant(Tensor::new(vec![cloud.len(), 3], cloud.flat())?);
                m.encoder.forward(g, p, x)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub id: String,
    pub label: String,
    pub feature: Vec<f64>,
}

/// Features of a set of samples under one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub dim: usize,
    pub fingerprint: u64,
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn new(dim: usize, fingerprint: u64, rows: Vec<FeatureRow>) -> Result<Self> {
        let mut ids = HashSet::new();
        for r in &rows {
            if r.feature.len() != dim {
                return Err(Error::ShapeMismatch {
                    op: "feature_table",
                    lhs: vec![dim],
                    rhs: vec![r.feature.len()],
                });
            }
            if !ids.insert(r.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate feature id {}", r.id)));
            }
        }
        Ok(Self { dim, fingerprint, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sorted distinct labels.
    pub fn labels(&self) -> Vec<String> {
        let mut l: Vec<String> = self.rows.iter().map(|r| r.label.clone()).collect();
        l.sort();
        l.dedup();
        l
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            dim: self.dim,
            fingerprint: self.fingerprint,
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// CSV with header `id,label,f_0,...` preceded by a fingerprint comment.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# encoder_fingerprint={:016x}\nid,label", self.fingerprint);
        for i in 0..self.dim {
            write!(s, ",f_{i}").unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            write!(s, "{},{}", r.id, r.label).unwrap();
            for v in &r.feature {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: PathBuf::from("<features>"),
            line,
            msg,
        };
        let mut fingerprint = 0;
        let mut dim = None;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if let Some(fp) = line.strip_prefix("# encoder_fingerprint=") {
                fingerprint = u64::from_str_radix(fp.trim(), 16).map_err(|e| err(i + 1, e.to_string()))?;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if dim.is_none() {
                if cols.len() < 2 || cols[0] != "id" || cols[1] != "label" {
                    return Err(err(i + 1, "expected header id,label,f_0,...".into()));
                }
                dim = Some(cols.len() - 2);
                continue;
            }
            if cols.len() != dim.unwrap() + 2 {
                return Err(err(i + 1, format!("expected {} columns, got {}", dim.unwrap() + 2, cols.len())));
            }
            let feature = cols[2..]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|e| err(i + 1, format!("{c:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(FeatureRow {
                id: cols[0].to_string(),
                label: cols[1].to_string(),
                feature,
            });
        }
        Self::new(dim.ok_or_else(|| err(1, "missing header".into()))?, fingerprint, rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            },
            other => other,
        })
    }
}

/// Features of every sample in `split` under the checkpoint's encoder.
pub fn extract_features(ckpt: &Checkpoint, manifest: &DatasetManifest, split: Split) -> Result<FeatureTable> {
    let enc = Encoder::from_checkpoint(ckpt)?;
    let samples = load_split(manifest, split, enc.cfg.points, enc.cfg.seed)?;
    let rows = samples
        .iter()
        .map(|s| {
            Ok(FeatureRow {
                id: s.id.clone(),
                label: manifest.labels[s.label].clone(),
                feature: enc.feature(&s.cloud)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureTable::new(enc.feature_dim(), enc.fingerprint, rows)
}

/// One-vs-rest linear SVM (hinge loss, L2 penalty `½‖w‖²`, weight `C` on
/// the hinge sum) fitted by dual coordinate descent in a fixed order.
/// Features are centered and divided by the RMS of all centered training
/// coordinates, so the average coordinate has unit variance. A constant
/// bias feature is appended.
#[derive(Debug, Clone)]
pub struct LinearSvm {
    pub classes: Vec<String>,
    pub mean: Vec<f64>,
    pub scale: f64,
    /// One weight vector per class, last entry is the bias.
    pub weights: Vec<Vec<f64>>,
}

const SVM_MAX_PASSES: usize = 2000;
const SVM_TOL: f64 = 1e-6;

impl LinearSvm {
    pub fn fit(train: &FeatureTable, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::InvalidArgument(format!("regularization must be positive, got {c}")));
        }
        let classes = train.labels();
        if classes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "linear probe needs at least two classes, training set has {}",
                classes.len()
            )));
        }
        let d = train.dim;
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &train.rows {
            mean.iter_mut().zip(&r.feature).for_each(|(m, v)| *m += v / n);
        }
        let ss: f64 = train
            .rows
            .iter()
            .map(|r| r.feature.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>())
            .sum();
        let rms = (ss / (n * d as f64)).sqrt();
        let scale = if rms > 0.0 { rms } else { 1.0 };
        let mut svm = Self {
            classes,
            mean,
            scale,
            weights: Vec::new(),
        };
        let xs: Vec<Vec<f64>> = train.rows.iter().map(|r| svm.transform(&r.feature)).collect();
        svm.weights = svm
            .classes
            .iter()
            .map(|cls| {
                let ys: Vec<f64> = train.rows.iter().map(|r| if &r.label == cls { 1.0 } else { -1.0 }).collect();
                binary_dual_cd(&xs, &ys, c)
            })
            .collect();
        Ok(svm)
    }

    fn transform(&self, f: &[f64]) -> Vec<f64> {
        let mut x: Vec<f64> = f.iter().zip(&self.mean).map(|(v, m)| (v - m) / self.scale).collect();
        x.push(1.0);
        x
    }

    /// Highest-scoring class; ties go to the first class in sorted order.
    pub fn predict(&self, f: &[f64]) -> &str {
        let x = self.transform(f);
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, w) in self.weights.iter().enumerate() {
            let s = dot(w, &x);
            if s > best.0 {
                best = (s, i);
            }
        }
        &self.classes[best.1]
    }

    pub fn accuracy(&self, test: &FeatureTable) -> Result<f64> {
        if test.dim != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "linear_probe",
                lhs: vec![self.mean.len()],
                rhs: vec![test.dim],
            });
        }
        if test.is_empty() {
            return Err(Error::InvalidArgument("empty test set".into()));
        }
        let hits = test.rows.iter().filter(|r| self.predict(&r.feature) == r.label).count();
        Ok(hits as f64 / test.len() as f64)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn binary_dual_cd(xs: &[Vec<f64>], ys: &[f64], c: f64) -> Vec<f64> {
    let mut w = vec![0.0; xs[0].len()];
    let mut alpha = vec![0.0; xs.len()];
    let q: Vec<f64> = xs.iter().map(|x| dot(x, x)).collect();
    for _ in 0..SVM_MAX_PASSES {
        let mut max_pg: f64 = 0.0;
        for i in 0..xs.len() {
            let grad = ys[i] * dot(&w, &xs[i]) - 1.0;
            let pg = if alpha[i] == 0.0 {
                grad.min(0.0)
            } else if alpha[i] == c {
                grad.max(0.0)
            } else {
                grad
            };
            max_pg = max_pg.max(pg.abs());
            if pg != 0.0 && q[i] > 0.0 {
                let old = alpha[i];
                alpha[i] = (old - grad / q[i]).clamp(0.0, c);
                let delta = (alpha[i] - old) * ys[i];
                w.iter_mut().zip(&xs[i]).for_each(|(wj, xj)| *wj += delta * xj);
            }
        }
        if max_pg < SVM_TOL {
            break;
        }
    }
    w
}

/// Test accuracy of an SVM trained on `train` with regularization `c`.
pub fn linear_probe(train: &FeatureTable, test: &FeatureTable, c: f64) -> Result<f64> {
    if train.dim != test.dim {
        return Err(Error::ShapeMismatch {
            op: "linear_probe",
            lhs: vec![train.dim],
            rhs: vec![test.dim],
        });
    }
    let svm = LinearSvm::fit(train, c)?;
    let known: HashSet<&String> = svm.classes.iter().collect();
    if let Some(r) = test.rows.iter().find(|r| !known.contains(&r.label)) {
        return Err(Error::InvalidArgument(format!("test label {} absent from training set", r.label)));
    }
    svm.accuracy(test)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub c: f64,
    pub accuracy: f64,
    /// Validation accuracy of every candidate `C`.
    pub sweep: Vec<(f64, f64)>,
}

/// Picks `C` from `candidates` by validation accuracy (ties to the first),
/// refits on the full training set and reports test accuracy. Without a
/// validation table, every fifth training row per class is held out.
pub fn probe_with_sweep(
    train: &FeatureTable,
    val: Option<&FeatureTable>,
    test: &FeatureTable,
    candidates: &[f64],
) -> Result<ProbeReport> {
    let (fit, held) = match val {
        Some(v) if !v.is_empty() => (train.clone(), v.clone()),
        _ => holdout(train),
    };
    let mut sweep = Vec::new();
    let mut best = (f64::NEG_INFINITY, DEFAULT_C);
    for &c in candidates {
        let acc = linear_probe(&fit, &held, c)?;
        sweep.push((c, acc));
        if acc > best.0 {
            best = (acc, c);
        }
    }
    Ok(ProbeReport {
        c: best.1,
        accuracy: linear_probe(train, test, best.1)?,
        sweep,
    })
}

fn holdout(train: &FeatureTable) -> (FeatureTable, FeatureTable) {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let (mut fit, mut held) = (Vec::new(), Vec::new());
    for (i, r) in train.rows.iter().enumerate() {
        let k = seen.entry(&r.label).or_insert(0);
        if *k % 5 == 4 {
            held.push(i);
        } else {
            fit.push(i);
        }
        *k += 1;
    }
    if held.is_empty() {
        // fewer than five per class: hold out the last sample of each class
        let mut last: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, r) in train.rows.iter().enumerate() {
            last.insert(&r.label, i);
        }
        held = last.into_iter().filter(|(l, _)| seen[l] > 1).map(|(_, i)| i).collect();
        held.sort_unstable();
        fit.retain(|i| !held.contains(i));
    }
    (train.subset(&fit), train.subset(&held))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 10,
            queries: 15,
            repetitions: 10,
            seed: 0,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 || self.shots < 1 || self.queries < 1 || self.repetitions < 1 {
            return Err(Error::InvalidArgument(format!(
                "episode needs ways >= 2, shots >= 1, queries >= 1, repetitions >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Row indices of one drawn episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub classes: Vec<String>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

pub fn draw_episode(features: &FeatureTable, spec: &EpisodeSpec, rep: usize) -> Result<Episode> {
    spec.validate()?;
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in features.rows.iter().enumerate() {
        by_class.entry(&r.label).or_default().push(i);
    }
    let need = spec.shots + spec.queries;
    if let Some((l, rows)) = by_class.iter().find(|(_, rows)| rows.len() < need) {
        return Err(Error::InvalidArgument(format!(
            "class {l} has {} samples, episodes need {need}",
            rows.len()
        )));
    }
    if by_class.len() < spec.ways {
        return Err(Error::InvalidArgument(format!(
            "{} classes available, episodes need {}",
            by_class.len(),
            spec.ways
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, rep as u64, 0));
    let names: Vec<&str> = by_class.keys().copied().collect();
    let mut picked: Vec<usize> = index::sample(&mut rng, names.len(), spec.ways).into_vec();
    picked.sort_unstable();
    let mut ep = Episode {
        classes: Vec::new(),
        support: Vec::new(),
        query: Vec::new(),
    };
    for ci in picked {
        let rows = &by_class[names[ci]];
        let draw = index::sample(&mut rng, rows.len(), need).into_vec();
        ep.classes.push(names[ci].to_string());
        ep.support.extend(draw[..spec.shots].iter().map(|&j| rows[j]));
        ep.query.extend(draw[spec.shots..].iter().map(|&j| rows[j]));
    }
    Ok(ep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotReport {
    pub spec: EpisodeSpec,
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

/// Mean and (population) standard deviation of episode accuracies.
pub fn fewshot_eval(features: &FeatureTable, spec: &EpisodeSpec) -> Result<FewShotReport> {
    spec.validate()?;
    let accuracies = (0..spec.repetitions)
        .map(|rep| {
            let ep = draw_episode(features, spec, rep)?;
            linear_probe(&features.subset(&ep.support), &features.subset(&ep.query), DEFAULT_C)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let std = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(FewShotReport {
        spec: *spec,
        mean,
        std,
        accuracies,
    })
}

/// Plain-text `key: value` report.
pub fn format_report(title: &str, fields: &[(&str, String)]) -> String {
    let mut s = format!("{title} {{\n");
    for (k, v) in fields {
        writeln!(s, "  {k}: {v}").unwrap();
    }
    s.push_str("}\n");
    s
}

impl FewShotReport {
    pub fn to_text(&self) -> String {
        let accs: Vec<String> = self.accuracies.iter().map(|a| format!("{a}")).collect();
        format_report(
            "fewshot",
            &[
                ("ways", self.spec.ways.to_string()),
                ("shots", self.spec.shots.to_string()),
                ("queries", self.spec.queries.to_string()),
                ("repetitions", self.spec.repetitions.to_string()),
                ("seed", self.spec.seed.to_string()),
                ("mean", format!("{}", self.mean)),
                ("std", format!("{}", self.std)),
                ("accuracies", format!("[{}]", accs.join(", "))),
            ],
        )
    }
}

impl ProbeReport {
    pub fn to_text(&self, fingerprint: u64) -> String {
        let sweep: Vec<String> = self.sweep.iter().map(|(c, a)| format!("{c}={a}")).collect();
        format_report(
            "probe",
            &[
                ("encoder_fingerprint", format!("{fingerprint:016x}")),
                ("c", format!("{}", self.c)),
                ("accuracy", format!("{}", self.accuracy)),
                ("validation", format!("[{}]", sweep.join(", "))),
            ],
        )
    }
}

/// Clouds written by [`reconstruct_export`].
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub clean: PointCloud,
    pub corrupted: PointCloud,
    pub reconstruction: PointCloud,
}

pub const CLEAN_FILE: &str = "clean.xyz";
pub const CORRUPTED_FILE: &str = "corrupted.xyz";
pub const RECONSTRUCTION_FILE: &str = "reconstruction.xyz";

/// Corrupts `cloud` with the checkpoint's training corruption (drawn from
/// `seed`) and reconstructs it.
///
/// PointNet: the corrupted cloud is the visible `w − η` points and the
/// reconstruction is the decoder's `w` points. Transformer: the corrupted
/// cloud is the `(n − m)·k` visible patch points; the reconstruction holds
/// the visible patches, the predicted masked patches placed at their input
/// centers, and the `n` predicted centers.
pub fn reconstruct(ckpt: &Checkpoint, cloud: &PointCloud, seed: u64) -> Result<Reconstruction> {
    let enc = Encoder::from_checkpoint(ckpt)?;
    let cfg = &enc.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prep = prepare_sample(cfg, cloud, &mut rng)?;
    let mut g = Graph::<f64>::new();
    let p = enc.store.bind_frozen(&mut g);
    let to_points = |data: &[f64]| data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
    match (&enc.model, &prep) {
        (Model::Transformer(m), Prepared::Patches(s)) => {
            let (n, k) = (cfg.patches, cfg.patch_size);
            let v = s.plan.visible.len();
            let patches = g.constant(Tensor::new(vec![v, k, 3], s.input_patches.clone())?);
            let centers = g.constant(Tensor::new(vec![v, 3], s.input_centers.clone())?);
            let dec = g.constant(Tensor::new(vec![n, 3], s.decoder_centers.clone())?);
            let out = m.forward(&mut g, &p, patches, centers, dec, &s.plan)?;
            let visible: Vec<[f64; 3]> = s
                .plan
                .visible
                .iter()
                .flat_map(|&i| s.corrupted.patch(i).to_vec())
                .collect();
            let recon_rows: Vec<usize> = if s.plan.masked.is_empty() {
                (0..n).collect()
            } else {
                s.plan.masked.clone()
            };
            let pred = to_points(&g.value(out.patches).data);
            let mut all = if s.plan.masked.is_empty() { Vec::new() } else { visible.clone() };
            for (j, &i) in recon_rows.iter().enumerate() {
                let c = s.corrupted.centers[i];
                all.extend(pred[j * k..(j + 1) * k].iter().map(|q| [q[0] + c[0], q[1] + c[1], q[2] + c[2]]));
            }
            all.extend(to_points(&g.value(out.centers).data));
            Ok(Reconstruction {
                clean: cloud.clone(),
                corrupted: PointCloud::new(visible)?,
                reconstruction: PointCloud::new(all)?,
            })
        }
        (Model::PointNet(m), Prepared::Cloud(s)) => {
            let x = g.constant(Tensor::new(vec![s.input.len(), 3], s.input.flat())?);
            let (_, out) = m.forward(&mut g, &p, x)?;
            Ok(Reconstruction {
                clean: cloud.clone(),
                corrupted: s.input.clone(),
                reconstruction: PointCloud::new(to_points(&g.value(out).data))?,
            })
        }
        _ => Err(Error::Config("prepared sample does not match the encoder kind".into())),
    }
}

/// Writes `clean.xyz`, `corrupted.xyz` and `reconstruction.xyz` into `out_dir`.
pub fn reconstruct_export(ckpt: &Checkpoint, cloud: &PointCloud, seed: u64, out_dir: &Path) -> Result<Reconstruction> {
    let r = reconstruct(ckpt, cloud, seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_cloud(&out_dir.join(CLEAN_FILE), &r.clean, CloudFormat::Xyz)?;
    write_cloud(&out_dir.join(CORRUPTED_FILE), &r.corrupted, CloudFormat::Xyz)?;
    write_cloud(&out_dir.join(RECONSTRUCTION_FILE), &r.reconstruction, CloudFormat::Xyz)?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&str, &[f64])]) -> FeatureTable {
        let rows = rows
            .iter()
            .enumerate()
            .map(|(i, (l, f))| FeatureRow {
                id: format!("s{i}"),
                label: l.to_string(),
                feature: f.to_vec(),
            })
            .collect();
        FeatureTable::new(2, 7, rows).unwrap()
    }

    #[test]
    fn separable_two_class() {
        let train = table(&[("a", &[0.0, 1.0]), ("a", &[0.2, 1.5]), ("b", &[3.0, -1.0]), ("b", &[2.5, -0.5])]);
        let test = table(&[("a", &[0.1, 2.0]), ("b", &[4.0, -2.0])]);
        assert_eq!(linear_probe(&train, &test, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let train = table(&[("a", &[0.0, 1.0]), ("a", &[1.0, 1.0])]);
        assert!(linear_probe(&train, &train, 1.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = table(&[("a", &[0.125, -1.0]), ("b", &[1e-9, 3.0])]);
        assert_eq!(FeatureTable::from_csv(&t.to_csv()).unwrap(), t);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let row = FeatureRow {
            id: "x".into(),
            label: "a".into(),
            feature: vec![0.0],
        };
        assert!(FeatureTable::new(1, 0, vec![row.clone(), row]).is_err());
    }

    #[test]
    fn episode_counts_and_single_rep_std() {
        let rows: Vec<FeatureRow> = (0..6 * 30)
            .map(|i| FeatureRow {
                id: format!("s{i}"),
                label: format!("c{}", i % 6),
                feature: vec![(i % 6) as f64, ((i * 7) % 13) as f64 * 0.01],
            })
            .collect();
        let t = FeatureTable::new(2, 0, rows).unwrap();
        let spec = EpisodeSpec {
            ways: 5,
            shots: 10,
            queries: 15,
            repetitions: 1,
            seed: 3,
        };
        let ep = draw_episode(&t, &spec, 0).unwrap();
        assert_eq!(ep.support.len(), 50);
        assert_eq!(ep.query.len(), 75);
        assert_eq!(ep, draw_episode(&t, &spec, 0).unwrap());
        let r = fewshot_eval(&t, &spec).unwrap();
        assert_eq!(r.std, 0.0);
        let too_many = EpisodeSpec { shots: 20, ..spec };
        assert!(fewshot_eval(&t, &too_many).is_err());
    }
}
