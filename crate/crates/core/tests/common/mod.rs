//! Brute-force oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod criteria;

use pcssl::autograd::{Graph, Tensor};
use pcssl::config::TrainConfig;
use pcssl::corruption::MaskPlan;
use pcssl::geometry::{Point3, PointCloud};
use pcssl::models::ParamStore;
use pcssl::trainer::{prepare_sample, sample_loss, Model, Prepared};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn d2(a: &Point3, b: &Point3) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Uniform points in `[-1, 1]^3`. With `lattice`, coordinates are snapped
/// to a coarse grid so that distance ties and duplicates are common.
pub fn random_cloud(rng: &mut impl Rng, w: usize, lattice: bool) -> PointCloud {
    let pts = (0..w)
        .map(|_| {
            let mut p: Point3 = [0.0; 3];
            for c in p.iter_mut() {
                *c = if lattice {
                    rng.random_range(-3i32..=3) as f64 / 3.0
                } else {
                    rng.random_range(-1.0..1.0)
                };
            }
            p
        })
        .collect();
    PointCloud::new(pts).unwrap()
}

pub fn brute_chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let side = |x: &PointCloud, y: &PointCloud| {
        x.points()
            .iter()
            .map(|p| y.points().iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    side(a, b) + side(b, a)
}

/// The k nearest indices of `q` among `candidates`, ties to the lower index.
pub fn brute_knn_among(pts: &[Point3], candidates: &[usize], q: &Point3, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = candidates.iter().map(|&i| (d2(&pts[i], q), i)).collect();
    d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|x| x.1).collect()
}

pub fn brute_knn(cloud: &PointCloud, q: &Point3, k: usize) -> Vec<usize> {
    let all: Vec<usize> = (0..cloud.len()).collect();
    brute_knn_among(cloud.points(), &all, q, k)
}

/// Textbook FPS: recompute every min-distance from scratch at each step.
pub fn brute_fps(cloud: &PointCloud, n: usize, start: usize) -> Vec<usize> {
    let pts = cloud.points();
    let mut sel = vec![start];
    while sel.len() < n {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..pts.len() {
            if sel.contains(&i) {
                continue;
            }
            let m = sel.iter().map(|&s| d2(&pts[i], &pts[s])).fold(f64::INFINITY, f64::min);
            if m > best.0 {
                best = (m, i);
            }
        }
        sel.push(best.1);
    }
    sel
}

/// Replays the cluster drops of a KNN-cluster mask against the oracle.
pub fn check_clusters(cloud: &PointCloud, plan: &MaskPlan) -> Result<(), String> {
    let w = cloud.len();
    let mut dropped = vec![false; w];
    for (ci, c) in plan.clusters.iter().enumerate() {
        if dropped[c.center] {
            return Err(format!("cluster {ci}: center {} already dropped", c.center));
        }
        let surviving: Vec<usize> = (0..w).filter(|&i| !dropped[i]).collect();
        let want = brute_knn_among(cloud.points(), &surviving, &cloud.points()[c.center], c.members.len());
        if want != c.members {
            return Err(format!("cluster {ci}: members {:?} != oracle {:?}", c.members, want));
        }
        for &i in &c.members {
            dropped[i] = true;
        }
    }
    let masked: Vec<usize> = (0..w).filter(|&i| dropped[i]).collect();
    if masked != plan.masked {
        return Err("union of clusters differs from the masked set".into());
    }
    Ok(())
}

/// Toy transformer config used by the gradient checks.
pub fn grad_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    for (k, v) in [
        ("points", "64"),
        ("d", "16"),
        ("heads", "2"),
        ("patches", "8"),
        ("patch_size", "8"),
        ("encoder_depth", "2"),
        ("decoder_depth", "1"),
        ("head_hidden", "16"),
        ("precision", "f64"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

pub fn smooth_cloud(seed: u64, w: usize) -> PointCloud {
    let mut r = rng(seed);
    let pts = (0..w)
        .map(|_| {
            let u: f64 = r.random_range(0.0..std::f64::consts::TAU);
            let v: f64 = r.random_range(-1.0..1.0);
            let s = (1.0 - v * v).sqrt();
            [0.8 * s * u.cos(), 0.6 * s * u.sin(), 0.7 * v]
        })
        .collect();
    PointCloud::new(pts).unwrap()
}

/// A model, its parameters and one prepared sample.
pub struct Fixture {
    pub cfg: TrainConfig,
    pub model: Model,
    pub store: ParamStore<f64>,
    pub prep: Prepared,
}

impl Fixture {
    pub fn new(cfg: TrainConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let model = Model::build(&cfg, &mut store).unwrap();
        // Move every parameter off its initializer so zero-initialized
        // layers get generic gradients too.
        let mut r = rng(seed ^ 0x5eed);
        for p in store.params_mut() {
            for x in p.value.data.iter_mut() {
                *x += r.random_range(-0.05..0.05);
            }
        }
        let cloud = smooth_cloud(seed, cfg.points);
        let prep = prepare_sample(&cfg, &cloud, &mut rng(seed)).unwrap();
        Self { cfg, model, store, prep }
    }

    pub fn loss(&self, store: &ParamStore<f64>) -> f64 {
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let l = sample_loss(&self.cfg, &self.model, &mut g, &b, &self.prep).unwrap();
        g.value(l.total).item()
    }

    pub fn analytic(&self) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let l = sample_loss(&self.cfg, &self.model, &mut g, &b, &self.prep).unwrap();
        g.backward(l.total).unwrap();
        self.store.grads(&g, &b)
    }

    /// Worst relative error over every parameter element, with its name.
    pub fn check(&self, eps: f64) -> (f64, String) {
        self.check_with(eps, None)
    }

    /// As [`Fixture::check`], but an element whose central difference at
    /// `eps` straddles a kink (a nearest-neighbor or max switch) is
    /// re-measured at `refine`.
    pub fn check_with(&self, eps: f64, refine: Option<(f64, f64)>) -> (f64, String) {
        let grads = self.analytic();
        let mut store = self.store.clone();
        let mut worst = (0.0, String::new());
        for pi in 0..store.len() {
            for e in 0..store.params()[pi].value.data.len() {
                let orig = store.params()[pi].value.data[e];
                store.params_mut()[pi].value.data[e] = orig + eps;
                let plus = self.loss(&store);
                store.params_mut()[pi].value.data[e] = orig - eps;
                let minus = self.loss(&store);
                store.params_mut()[pi].value.data[e] = orig;
                let mut numeric = (plus - minus) / (2.0 * eps);
                let mut err = pcssl::autograd::relative_error(grads[pi][e], numeric);
                if let Some((tol, small)) = refine {
                    if err >= tol {
                        store.params_mut()[pi].value.data[e] = orig + small;
                        let plus = self.loss(&store);
                        store.params_mut()[pi].value.data[e] = orig - small;
                        let minus = self.loss(&store);
                        store.params_mut()[pi].value.data[e] = orig;
                        numeric = (plus - minus) / (2.0 * small);
                        err = pcssl::autograd::relative_error(grads[pi][e], numeric);
                    }
                }
                if err > worst.0 {
                    worst = (err, format!("{}[{e}]: analytic {} numeric {numeric}", store.params()[pi].name, grads[pi][e]));
                }
            }
        }
        worst
    }
}

pub fn tensor(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}
