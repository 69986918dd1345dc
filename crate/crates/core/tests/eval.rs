//! Probe, few-shot and reconstruction contracts.

mod common;

use common::{rng, smooth_cloud};
use pcssl::config::TrainConfig;
use pcssl::eval::{
    draw_episode, fewshot_eval, linear_probe, reconstruct, reconstruct_export, Encoder, EpisodeSpec, FeatureRow,
    FeatureTable,
};
use pcssl::geometry::PointCloud;
use pcssl::trainer::Trainer;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Overlapping Gaussian classes, so accuracy sits well inside (0, 1).
fn blobs(seed: u64, per_class: usize, classes: usize, dim: usize) -> FeatureTable {
    let mut r = rng(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let mut m = rng(100 + c as u64);
            (0..dim).map(|_| m.random_range(-1.0..1.0)).collect()
        })
        .collect();
    let rows = (0..per_class * classes)
        .map(|i| {
            let c = i % classes;
            FeatureRow {
                id: format!("s{i}"),
                label: format!("c{c}"),
                feature: means[c]
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        m + 1.2 * z + 3.0
                    })
                    .collect(),
            }
        })
        .collect();
    FeatureTable::new(dim, 0, rows).unwrap()
}

/// A uniformly random orthogonal matrix by Gram-Schmidt on Gaussian rows.
fn orthogonal(seed: u64, d: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|a| a / n).collect());
    }
    q
}

fn rotate(t: &FeatureTable, q: &[Vec<f64>]) -> FeatureTable {
    let rows = t
        .rows
        .iter()
        .map(|r| FeatureRow {
            feature: q.iter().map(|row| row.iter().zip(&r.feature).map(|(a, b)| a * b).sum()).collect(),
            ..r.clone()
        })
        .collect();
    FeatureTable::new(t.dim, t.fingerprint, rows).unwrap()
}

#[test]
fn probe_is_invariant_to_global_rotation_and_row_order() {
    let (train, test) = (blobs(1, 40, 4, 12), blobs(2, 50, 4, 12));
    let base = linear_probe(&train, &test, 1.0).unwrap();
    assert!(base > 0.4 && base < 1.0, "{base}");
    for trial in 0..20 {
        let q = orthogonal(trial, 12);
        let acc = linear_probe(&rotate(&train, &q), &rotate(&test, &q), 1.0).unwrap();
        assert!((acc - base).abs() <= 0.005, "trial {trial}: {acc} vs {base}");
        let mut shuffled = train.clone();
        shuffled.rows.shuffle(&mut rng(trial));
        let acc = linear_probe(&shuffled, &test, 1.0).unwrap();
        assert!((acc - base).abs() <= 0.005, "trial {trial}: {acc} vs {base}");
    }
}

#[test]
fn uninformative_features_give_chance() {
    let (train, test) = (blobs(3, 50, 4, 8), blobs(4, 250, 4, 8));
    let mut flat = train.clone();
    for r in &mut flat.rows {
        r.feature = vec![0.5; 8];
    }
    let mut flat_test = test.clone();
    for r in &mut flat_test.rows {
        r.feature = vec![0.5; 8];
    }
    let acc = linear_probe(&flat, &flat_test, 1.0).unwrap();
    assert!((acc - 0.25).abs() <= 0.1, "{acc}");

    // permutation test: shuffled training labels carry no signal
    let mut accs = Vec::new();
    for s in 0..10 {
        let mut labels: Vec<String> = train.rows.iter().map(|r| r.label.clone()).collect();
        labels.shuffle(&mut rng(50 + s));
        let mut t = train.clone();
        for (r, l) in t.rows.iter_mut().zip(labels) {
            r.label = l;
        }
        accs.push(linear_probe(&t, &test, 1.0).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.25).abs() <= 0.08, "{mean} from {accs:?}");
    assert!(linear_probe(&train, &test, 1.0).unwrap() > mean + 0.2);
}

fn small(encoder: &str) -> TrainConfig {
    let mut cfg = common::grad_config();
    cfg.set("precision", "f32").unwrap();
    if encoder == "pointnet" {
        for (k, v) in [("encoder", "pointnet"), ("mask", "random"), ("pointnet_widths", "3,16,24")] {
            cfg.set(k, v).unwrap();
        }
    }
    cfg
}

fn encoder(cfg: &TrainConfig) -> (Trainer<f32>, Encoder) {
    let t = Trainer::<f32>::new(cfg, vec![smooth_cloud(1, cfg.points)]).unwrap();
    let e = Encoder::from_checkpoint(&t.checkpoint()).unwrap();
    (t, e)
}

#[test]
fn feature_contracts() {
    let cfg = small("transformer");
    let (_, enc) = encoder(&cfg);
    let c = smooth_cloud(5, cfg.points);
    let f = enc.feature(&c).unwrap();
    assert_eq!(f.len(), 2 * cfg.d);
    assert_eq!(enc.feature_dim(), 2 * cfg.d);
    assert_eq!(f, enc.feature(&c).unwrap());

    let cfg = small("pointnet");
    let (_, enc) = encoder(&cfg);
    let f = enc.feature(&c).unwrap();
    assert_eq!(f.len(), 24);
    let mut pts = c.points().to_vec();
    pts.reverse();
    pts.swap(3, 40);
    let g = enc.feature(&PointCloud::new(pts).unwrap()).unwrap();
    assert_eq!(f, g);
}

#[test]
fn fewshot_is_seeded() {
    let t = blobs(7, 30, 6, 8);
    let spec = EpisodeSpec {
        ways: 5,
        shots: 10,
        queries: 15,
        repetitions: 4,
        seed: 11,
    };
    assert_eq!(draw_episode(&t, &spec, 2).unwrap(), draw_episode(&t, &spec, 2).unwrap());
    assert_ne!(draw_episode(&t, &spec, 2).unwrap(), draw_episode(&t, &spec, 3).unwrap());
    let a = fewshot_eval(&t, &spec).unwrap();
    assert_eq!(a, fewshot_eval(&t, &spec).unwrap());
    assert_eq!(a.accuracies.len(), 4);
    assert!(fewshot_eval(&t, &EpisodeSpec { ways: 7, ..spec }).is_err());
    assert!(EpisodeSpec { ways: 1, ..spec }.validate().is_err());
    assert!(EpisodeSpec { shots: 0, ..spec }.validate().is_err());
}

#[test]
fn reconstruction_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small("transformer");
    let (t, _) = encoder(&cfg);
    let c = smooth_cloud(9, cfg.points);
    let r = reconstruct_export(&t.checkpoint(), &c, 3, dir.path()).unwrap();
    let (n, k) = (cfg.patches, cfg.patch_size);
    let m = (cfg.mask_ratio * n as f64) as usize;
    assert_eq!(r.clean.len(), cfg.points);
    assert_eq!(r.corrupted.len(), (n - m) * k);
    assert_eq!(r.reconstruction.len(), n * k + n);
    for (name, cloud) in [("clean.xyz", &r.clean), ("corrupted.xyz", &r.corrupted), ("reconstruction.xyz", &r.reconstruction)] {
        let back = pcssl::data::read_cloud(&dir.path().join(name)).unwrap();
        assert_eq!(back.len(), cloud.len());
        for (p, q) in back.points().iter().zip(cloud.points()) {
            for i in 0..3 {
                assert_eq!(p[i], q[i] as f32 as f64);
            }
        }
    }

    let mut cfg = small("pointnet");
    let (t, _) = encoder(&cfg);
    let r = reconstruct(&t.checkpoint(), &c, 3).unwrap();
    let eta = (cfg.mask_ratio * cfg.points as f64) as usize;
    assert_eq!(r.corrupted.len(), cfg.points - eta);
    assert_eq!(r.reconstruction.len(), cfg.points);

    cfg.set("mask", "none").unwrap();
    cfg.set("affine.families", "none").unwrap();
    let (t, _) = encoder(&cfg);
    let r = reconstruct(&t.checkpoint(), &c, 3).unwrap();
    assert_eq!(r.corrupted, r.clean);
}
