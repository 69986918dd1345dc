//! Property criteria shared by the acceptance target and the focused tests.
//! Each check returns a one-line summary on success and the first
//! counterexample on failure.

use std::path::Path;
use std::process::Command;

use pcssl::autograd::{finite_difference_check, Graph, Var};
use pcssl::config::TrainConfig;
use pcssl::corruption::{
    mask_fixed_clusters, mask_patches, mask_random_clusters, mask_view_occlusion, sample_affine,
    sample_affine_components, AffineFamilySpec,
};
use pcssl::data::{read_cloud, write_cloud, CloudFormat, DatasetManifest};
use pcssl::geometry::{farthest_point_sample_from, knn, patchify, AffineTransform, PointCloud};
use pcssl::losses::{chamfer, loss_all};
use pcssl::trainer::sample_loss;
use pcssl::Error;
use rand::Rng;

use super::{brute_chamfer, brute_fps, brute_knn, check_clusters, random_cloud, rng, tensor, Fixture};

pub type Outcome = Result<String, String>;

pub fn chamfer_oracle(pairs: usize) -> Outcome {
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for i in 0..pairs {
        let (w, wh) = (r.random_range(1..=256), r.random_range(1..=256));
        let a = random_cloud(&mut r, w, i % 4 == 0);
        let b = random_cloud(&mut r, wh, i % 4 == 0);
        let (fast, slow) = (chamfer(&a, &b), brute_chamfer(&a, &b));
        let rel = (fast - slow).abs() / slow.abs().max(1e-300);
        worst = worst.max(if slow == 0.0 { fast.abs() } else { rel });
        if worst > 1e-9 {
            return Err(format!("pair {i} ({w}x{wh}): {fast} vs oracle {slow}"));
        }
    }
    Ok(format!("{pairs} pairs, worst relative error {worst:.1e}"))
}

pub fn fps_knn_oracle(clouds: usize) -> Outcome {
    let mut r = rng(2);
    for i in 0..clouds {
        let w = r.random_range(1..=128);
        let cloud = random_cloud(&mut r, w, i % 2 == 0);
        let n = r.random_range(1..=w);
        let start = r.random_range(0..w);
        let got = farthest_point_sample_from(&cloud, n, start).map_err(|e| e.to_string())?;
        let want = brute_fps(&cloud, n, start);
        if got != want {
            return Err(format!("cloud {i}: fps {got:?} != oracle {want:?}"));
        }
        for _ in 0..4 {
            let k = r.random_range(1..=w);
            let q = if r.random_bool(0.5) {
                cloud.points()[r.random_range(0..w)]
            } else {
                [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]
            };
            let got = knn(&cloud, &q, k).map_err(|e| e.to_string())?.indices;
            let want = brute_knn(&cloud, &q, k);
            if got != want {
                return Err(format!("cloud {i}: knn(k={k}) {got:?} != oracle {want:?}"));
            }
        }
        let k = r.random_range(1..=w);
        let ps = patchify(&cloud, n, k, &mut rng(i as u64)).map_err(|e| e.to_string())?;
        for (p, &c) in ps.center_indices.iter().enumerate() {
            if ps.point_indices[p * k..(p + 1) * k] != brute_knn(&cloud, &cloud.points()[c], k)[..] {
                return Err(format!("cloud {i}: patch {p} is not the knn of its center"));
            }
        }
    }
    Ok(format!("{clouds} clouds agree on fps, knn and patch grouping"))
}

fn weighted(g: &mut Graph<f64>, out: Var) -> pcssl::Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(tensor(&mut rng(99), &shape));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Finite-difference check of every primitive (each argument) and of the
/// full decomposed objective at toy dimensions.
pub fn gradient_fidelity() -> Outcome {
    type Op = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> pcssl::Result<Var>>;
    let mut r = rng(3);
    let mut away = tensor(&mut r, &[4, 6]);
    away.data.iter_mut().for_each(|v| *v += 0.1 * v.signum());
    let cases: Vec<(&str, Vec<pcssl::autograd::Tensor<f64>>, Op)> = vec![
        ("matmul", vec![tensor(&mut r, &[4, 5]), tensor(&mut r, &[5, 3])], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("add", vec![tensor(&mut r, &[3, 4]), tensor(&mut r, &[3, 4])], Box::new(|g, v| g.add(v[0], v[1]))),
        ("add-broadcast", vec![tensor(&mut r, &[3, 4]), tensor(&mut r, &[4])], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![tensor(&mut r, &[2, 3]), tensor(&mut r, &[2, 3])], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![tensor(&mut r, &[2, 3]), tensor(&mut r, &[2, 3])], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", vec![tensor(&mut r, &[3, 3])], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        ("sum", vec![tensor(&mut r, &[2, 5])], Box::new(|g, v| Ok(g.sum(v[0])))),
        ("mean", vec![tensor(&mut r, &[2, 5])], Box::new(|g, v| Ok(g.mean(v[0])))),
        ("reshape", vec![tensor(&mut r, &[2, 6])], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        ("transpose", vec![tensor(&mut r, &[3, 5])], Box::new(|g, v| g.transpose(v[0]))),
        ("narrow", vec![tensor(&mut r, &[4, 3, 2])], Box::new(|g, v| g.narrow(v[0], 1, 1, 2))),
        ("concat", vec![tensor(&mut r, &[2, 3, 2]), tensor(&mut r, &[2, 1, 2])], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        ("gather_rows", vec![tensor(&mut r, &[5, 3])], Box::new(|g, v| g.gather_rows(v[0], &[4, 0, 4, 2]))),
        ("scatter_rows", vec![tensor(&mut r, &[3, 2])], Box::new(|g, v| g.scatter_rows(v[0], &[5, 1, 3], 6))),
        ("relu", vec![away], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("gelu", vec![tensor(&mut r, &[4, 6])], Box::new(|g, v| Ok(g.gelu(v[0])))),
        ("softmax", vec![tensor(&mut r, &[3, 7])], Box::new(|g, v| g.softmax(v[0]))),
        (
            "layer_norm",
            vec![tensor(&mut r, &[4, 6]), tensor(&mut r, &[6]), tensor(&mut r, &[6])],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
        ),
        ("max_pool", vec![tensor(&mut r, &[3, 4, 5])], Box::new(|g, v| g.max_pool(v[0], 1))),
        ("mean_pool", vec![tensor(&mut r, &[3, 4, 5])], Box::new(|g, v| g.mean_pool(v[0], 1))),
        ("chamfer", vec![tensor(&mut r, &[9, 3]), tensor(&mut r, &[6, 3])], Box::new(|g, v| g.chamfer(v[0], v[1]))),
    ];
    let mut worst: f64 = 0.0;
    for (name, inputs, op) in &cases {
        for arg in 0..inputs.len() {
            let err = finite_difference_check(
                |g, x| {
                    let vars: Vec<Var> = (0..inputs.len())
                        .map(|j| if j == arg { x } else { g.constant(inputs[j].clone()) })
                        .collect();
                    let o = op(g, &vars)?;
                    weighted(g, o)
                },
                &inputs[arg],
                1e-4,
            )
            .map_err(|e| format!("{name}: {e}"))?;
            if err >= 1e-3 {
                return Err(format!("{name} argument {arg}: relative error {err:.2e}"));
            }
            worst = worst.max(err);
        }
    }
    let fx = Fixture::new(super::grad_config(), 11);
    let (err, at) = fx.check(1e-4);
    if err >= 1e-3 {
        return Err(format!("full objective: relative error {err:.2e} at {at}"));
    }
    worst = worst.max(err);
    let params: usize = fx.store.params().iter().map(|p| p.value.data.len()).sum();
    Ok(format!("{} primitives and {params} objective parameters, worst {worst:.1e}", cases.len()))
}

/// Masked counts, cluster sizes, partitions and random-cluster membership.
pub fn masking_contracts(configs: usize) -> Outcome {
    let mut r = rng(4);
    let check_plan = |name: &str, i: usize, plan: &pcssl::corruption::MaskPlan, total: usize, want: usize| {
        plan.validate(total).map_err(|e| format!("{name} config {i}: {e}"))?;
        if plan.masked.len() != want {
            return Err(format!("{name} config {i}: masked {} != {want}", plan.masked.len()));
        }
        Ok(())
    };
    for i in 0..configs {
        let w = r.random_range(20..=256);
        let alpha = r.random_range(0.05..0.95);
        let eta = (alpha * w as f64).floor() as usize;
        let cloud = random_cloud(&mut r, w, i % 5 == 0);
        let mut mr = rng(1000 + i as u64);
        let kappa_max = r.random_range(1..=16);
        let (plan, vis) = mask_random_clusters(&cloud, alpha, kappa_max, &mut mr).map_err(|e| e.to_string())?;
        check_plan("random", i, &plan, w, eta)?;
        if plan.cluster_sizes.iter().sum::<usize>() != eta || plan.cluster_sizes.contains(&0) {
            return Err(format!("random config {i}: sizes {:?}", plan.cluster_sizes));
        }
        if plan.kappa() < 1 || plan.kappa() > kappa_max.min(eta) || vis.len() != w - eta {
            return Err(format!("random config {i}: kappa {} visible {}", plan.kappa(), vis.len()));
        }
        check_clusters(&cloud, &plan).map_err(|e| format!("random config {i}: {e}"))?;

        let size = r.random_range(1..=48);
        let (plan, _) = mask_fixed_clusters(&cloud, alpha, size, &mut mr).map_err(|e| e.to_string())?;
        check_plan("fixed", i, &plan, w, eta)?;
        if plan.cluster_sizes.iter().any(|&s| s == 0 || s > size) || plan.cluster_sizes.iter().sum::<usize>() != eta {
            return Err(format!("fixed config {i}: sizes {:?}", plan.cluster_sizes));
        }
        check_clusters(&cloud, &plan).map_err(|e| format!("fixed config {i}: {e}"))?;

        let (plan, vis) = mask_view_occlusion(&cloud, alpha, &mut mr).map_err(|e| e.to_string())?;
        check_plan("view", i, &plan, w, eta)?;
        if vis.len() != w - eta {
            return Err(format!("view config {i}: {} visible", vis.len()));
        }

        let n = r.random_range(2..=64);
        let m = (alpha * n as f64).floor() as usize;
        match mask_patches(n, alpha, &mut mr) {
            Ok(plan) => check_plan("patch", i, &plan, n, m)?,
            Err(Error::DegenerateMask(_)) if m == 0 || m == n => {}
            Err(e) => return Err(format!("patch config {i}: {e}")),
        }
    }
    Ok(format!("{configs} configs per strategy"))
}

fn mul4(a: &AffineTransform, b: &AffineTransform) -> [[f64; 4]; 3] {
    // `b` applied first, as homogeneous 4x4 products
    let h = |t: &AffineTransform| {
        let m = t.matrix;
        [m[0], m[1], m[2], [0.0, 0.0, 0.0, 1.0]]
    };
    let (x, y) = (h(a), h(b));
    let mut out = [[0.0; 4]; 3];
    for (rw, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..4).map(|k| x[rw][k] * y[k][c]).sum();
        }
    }
    out
}

fn det3(m: &[[f64; 4]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn affine_algebra(samples: usize) -> Outcome {
    let spec = AffineFamilySpec::default();
    let mut worst: f64 = 0.0;
    for i in 0..samples {
        let seed = 5000 + i as u64;
        let parts = sample_affine_components(&spec, &mut rng(seed)).map_err(|e| e.to_string())?;
        let full = sample_affine(&spec, &mut rng(seed)).map_err(|e| e.to_string())?;
        let mut acc = AffineTransform::identity();
        for p in &parts {
            acc = AffineTransform::from_matrix(mul4(p, &acc));
        }
        for rw in 0..3 {
            for c in 0..4 {
                worst = worst.max((acc.matrix[rw][c] - full.matrix[rw][c]).abs());
            }
        }
        if worst > 1e-12 {
            return Err(format!("sample {i}: composition differs by {worst:e}"));
        }
        let reflect = &parts[2];
        let flips = (0..3).filter(|&a| reflect.matrix[a][a] < 0.0).count();
        let want = if flips % 2 == 1 { -1.0 } else { 1.0 };
        if det3(&full.matrix).signum() != want {
            return Err(format!("sample {i}: det {} with {flips} reflected axes", det3(&full.matrix)));
        }
        let id = sample_affine(&AffineFamilySpec::degenerate_identity(), &mut rng(seed)).map_err(|e| e.to_string())?;
        if id.matrix != AffineTransform::identity().matrix {
            return Err(format!("sample {i}: zero magnitude gave {:?}", id.matrix));
        }
    }
    Ok(format!("{samples} transforms, worst composition error {worst:.1e}"))
}

pub fn loss_decomposition(trials: usize) -> Outcome {
    let mut r = rng(6);
    for i in 0..trials {
        let (local, global, lambda) = (r.random_range(0.0..5.0), r.random_range(0.0..5.0), r.random_range(0.0..3.0));
        let rep = loss_all(local, global, lambda).map_err(|e| e.to_string())?;
        if (rep.total - (local + lambda * global)).abs() > 1e-12 {
            return Err(format!("trial {i}: {} != {local} + {lambda}*{global}", rep.total));
        }
        if loss_all(local, global, 0.0).map_err(|e| e.to_string())?.total != local {
            return Err(format!("trial {i}: lambda 0 does not reduce to local"));
        }
    }
    for (i, lambda) in [0.0, 0.5, 1.0, 2.5].into_iter().enumerate() {
        let mut cfg = super::grad_config();
        cfg.lambda = lambda;
        let fx = Fixture::new(cfg, 20 + i as u64);
        let mut g = Graph::new();
        let b = fx.store.bind(&mut g);
        let l = sample_loss(&fx.cfg, &fx.model, &mut g, &b, &fx.prep).map_err(|e| e.to_string())?;
        let v = |x: Option<Var>| g.value(x.unwrap()).item();
        let (total, local, global) = (g.value(l.total).item(), v(l.local), v(l.global));
        if (total - (local + lambda * global)).abs() > 1e-12 || (lambda == 0.0 && total != local) {
            return Err(format!("model lambda {lambda}: {total} vs {local} + {lambda}*{global}"));
        }
    }
    Ok(format!("{trials} random reports and 4 model objectives"))
}

fn run_ok(bin: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

/// Two identical CLI pretrain runs, and an interrupted run resumed to the end.
pub fn determinism(bin: &Path, dir: &Path) -> Outcome {
    let d = |s: &str| dir.join(s).display().to_string();
    run_ok(bin, &["synth", "--out", &d("data"), "--samples-per-family", "5", "--points", "128", "--seed", "4"])?;
    let cfg = TrainConfig {
        epochs: 4,
        points: 128,
        d: 16,
        heads: 2,
        encoder_depth: 2,
        decoder_depth: 1,
        patches: 8,
        patch_size: 16,
        head_hidden: 32,
        batch_size: 4,
        ..TrainConfig::default()
    };
    std::fs::write(dir.join("cfg.txt"), cfg.to_text()).map_err(|e| e.to_string())?;
    let manifest = d("data/manifest.tsv");
    let base = ["pretrain", "--manifest", manifest.as_str(), "--config"];
    let cfgp = d("cfg.txt");
    for run in ["a", "b"] {
        let out = d(run);
        run_ok(bin, &[&base[..], &[cfgp.as_str(), "--seed", "1", "--out", out.as_str()]].concat())?;
    }
    let part = d("part");
    run_ok(bin, &[&base[..], &[cfgp.as_str(), "--seed", "1", "--out", part.as_str(), "--stop-after", "2"]].concat())?;
    let ck = d("part/checkpoint.ckpt");
    run_ok(bin, &["pretrain", "--manifest", &manifest, "--out", &part, "--resume", &ck])?;
    let read = |p: String| std::fs::read(p).map_err(|e| e.to_string());
    let (ma, mb, mp) = (read(d("a/metrics.csv"))?, read(d("b/metrics.csv"))?, read(d("part/metrics.csv"))?);
    if ma != mb {
        return Err("metrics of identical runs differ".into());
    }
    if ma != mp {
        return Err("resumed metrics differ from the uninterrupted run".into());
    }
    if read(d("a/checkpoint.ckpt"))? != read(d("part/checkpoint.ckpt"))? {
        return Err("resumed checkpoint differs from the uninterrupted run".into());
    }
    let rows = String::from_utf8_lossy(&ma).lines().count() - 1;
    Ok(format!("identical metrics over {rows} epochs; resume after 2 is byte-exact"))
}

pub fn io_round_trips(dir: &Path, clouds: usize) -> Outcome {
    let mut r = rng(10);
    for i in 0..clouds {
        let w = r.random_range(1..=300);
        let scale = 10f64.powi(r.random_range(-3..=3));
        let pts: Vec<[f64; 3]> = (0..w)
            .map(|_| [0; 3].map(|_| r.random_range(-1.0..1.0) * scale))
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let want: Vec<[f32; 3]> = cloud.points().iter().map(|p| p.map(|c| c as f32)).collect();
        for (fmt, ext) in [(CloudFormat::Xyz, "xyz"), (CloudFormat::PlyAscii, "ply"), (CloudFormat::PlyBinary, "ply")] {
            let path = dir.join(format!("c{i}.{ext}"));
            write_cloud(&path, &cloud, fmt).map_err(|e| e.to_string())?;
            let back = read_cloud(&path).map_err(|e| e.to_string())?;
            let got: Vec<[f32; 3]> = back.points().iter().map(|p| p.map(|c| c as f32)).collect();
            if got != want {
                return Err(format!("cloud {i} {fmt:?}: round trip changed coordinates"));
            }
        }
    }
    std::fs::create_dir_all(dir.join("m")).unwrap();
    write_cloud(&dir.join("m/a.xyz"), &PointCloud::new(vec![[0.0; 3]]).unwrap(), CloudFormat::Xyz).unwrap();
    std::fs::write(dir.join("m/manifest.tsv"), "a.xyz\tx\ttrain\nmissing.xyz\tx\ttest\n").unwrap();
    match DatasetManifest::load(&dir.join("m/manifest.tsv")) {
        Err(Error::MissingFile(p)) if p.ends_with("missing.xyz") => {}
        other => return Err(format!("manifest with a missing path: {other:?}")),
    }
    Ok(format!("{clouds} clouds in xyz, ascii ply and binary ply; missing manifest path rejected"))
}
