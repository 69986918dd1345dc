//! End-to-end runs of the `pcssl` binary.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pcssl::config::TrainConfig;

const BIN: &str = env!("CARGO_BIN_EXE_pcssl");

const SMALL: &str = "points = 64\nd = 16\nheads = 2\npatches = 8\npatch_size = 8\n\
encoder_depth = 2\ndecoder_depth = 1\nhead_hidden = 16\nbatch_size = 4\nepochs = 3\nlr = 0.003\n";

fn pcssl(cwd: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(cwd).args(args).output().unwrap()
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let o = pcssl(cwd, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// Exit code and the single stderr line of a failing run.
fn fails(cwd: &Path, args: &[&str]) -> (i32, String) {
    let o = pcssl(cwd, args);
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{args:?}: {err}");
    let line = err.trim_end().to_string();
    assert!(line.starts_with("error: kind="), "{line}");
    (o.status.code().unwrap(), line)
}

/// The resolved-settings part of stdout: every line not starting with `#`.
fn echo(stdout: &str) -> String {
    stdout.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect()
}

fn listing(root: &Path) -> BTreeSet<PathBuf> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeSet<PathBuf>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            out.insert(p.strip_prefix(root).unwrap().to_path_buf());
            if p.is_dir() {
                walk(&p, root, out);
            }
        }
    }
    let mut s = BTreeSet::new();
    walk(root, root, &mut s);
    s
}

fn synth(cwd: &Path, out: &str, per_family: &str, points: &str) {
    ok(cwd, &["synth", "--out", out, "--seed", "3", "--samples-per-family", per_family, "--points", points]);
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "a", "3", "64");
    synth(d, "b", "3", "64");
    let (a, b) = (listing(&d.join("a")), listing(&d.join("b")));
    assert_eq!(a, b);
    assert_eq!(a.iter().filter(|p| p.extension().is_some_and(|e| e == "xyz")).count(), 12);
    for p in &a {
        if d.join("a").join(p).is_file() {
            assert_eq!(std::fs::read(d.join("a").join(p)).unwrap(), std::fs::read(d.join("b").join(p)).unwrap());
        }
    }
}

#[test]
fn corrupt_keeps_the_floor_count_and_echoes_a_valid_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "data", "1", "1024");
    let input = "data/sphere/sphere_0000.xyz";
    assert!(d.join(input).is_file());
    let out = ok(d, &["corrupt", "--input", input, "--out", "c", "--mask", "random", "--alpha", "0.6", "--seed", "5"]);
    let cloud = pcssl::data::read_cloud(&d.join("c/corrupted.xyz")).unwrap();
    assert_eq!(cloud.len(), 410);
    let masked = std::fs::read_to_string(d.join("c/mask.txt")).unwrap();
    assert_eq!(masked.lines().filter(|l| !l.starts_with('#')).count(), 614);
    let affine = std::fs::read_to_string(d.join("c/affine.txt")).unwrap();
    assert_eq!(affine.lines().filter(|l| !l.starts_with('#')).count(), 3);

    // the echo is a config file that reproduces the run
    let cfg = TrainConfig::from_text(&echo(&out)).unwrap();
    assert_eq!(cfg.mask_ratio, 0.6);
    assert_eq!(cfg.seed, 5);
    std::fs::write(d.join("echo.txt"), echo(&out)).unwrap();
    let again = ok(d, &["corrupt", "--input", input, "--out", "c2", "--config", "echo.txt"]);
    assert_eq!(echo(&again), echo(&out));
    assert_eq!(std::fs::read(d.join("c/corrupted.xyz")).unwrap(), std::fs::read(d.join("c2/corrupted.xyz")).unwrap());

    ok(d, &["corrupt", "--input", input, "--out", "p", "--mask", "patch", "--alpha", "0.6", "--affine", "none"]);
    let patch = pcssl::data::read_cloud(&d.join("p/corrupted.xyz")).unwrap();
    let cfg = TrainConfig::default();
    assert_eq!(patch.len(), (cfg.patches - (0.6 * cfg.patches as f64) as usize) * cfg.patch_size);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "data", "1", "64");
    std::fs::write(d.join("c.txt"), "mask = fixed\nmask_ratio = 0.3\nseed = 4\n").unwrap();
    let out = ok(
        d,
        &["corrupt", "--input", "data/cube/cube_0000.xyz", "--out", "o", "--config", "c.txt", "--alpha", "0.5", "--set", "kappa_max=3"],
    );
    let cfg = TrainConfig::from_text(&echo(&out)).unwrap();
    assert_eq!((cfg.mask_ratio, cfg.seed, cfg.kappa_max), (0.5, 4, 3));
    assert_eq!(cfg.mask, pcssl::config::MaskStrategy::Fixed);
}

#[test]
fn full_pipeline_stays_inside_out() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "data", "5", "64");
    std::fs::write(d.join("small.txt"), SMALL).unwrap();
    let before = listing(d);

    let out = ok(d, &["pretrain", "--config", "small.txt", "--manifest", "data/manifest.tsv", "--seed", "1", "--out", "run"]);
    let cfg = TrainConfig::from_text(&echo(&out)).unwrap();
    assert_eq!((cfg.epochs, cfg.seed, cfg.points), (3, 1, 64));
    let metrics = std::fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert_eq!(
        TrainConfig::from_text(&std::fs::read_to_string(d.join("run/config.txt")).unwrap()).unwrap(),
        cfg
    );

    ok(d, &["pretrain", "--config", "small.txt", "--manifest", "data/manifest.tsv", "--seed", "1", "--out", "init", "--init-only"]);
    for ckpt in ["run", "init"] {
        let c = format!("{ckpt}/checkpoint.ckpt");
        let probe_out = format!("{ckpt}_probe");
        let p = ok(d, &["probe", "--checkpoint", &c, "--manifest", "data/manifest.tsv", "--out", &probe_out]);
        assert!(p.contains("accuracy"), "{p}");
        let report = std::fs::read_to_string(d.join(&probe_out).join("probe.txt")).unwrap();
        assert!(report.contains("accuracy"));
        ok(d, &["fewshot", "--checkpoint", &c, "--manifest", "data/manifest.tsv", "--out", &format!("{ckpt}_fs"), "--ways", "2", "--shots", "2", "--queries", "2", "--repetitions", "3"]);
        assert!(d.join(format!("{ckpt}_fs/fewshot.txt")).is_file());
    }
    ok(d, &["reconstruct", "--checkpoint", "run/checkpoint.ckpt", "--input", "data/torus/torus_0000.xyz", "--out", "rec"]);
    let rec = listing(&d.join("rec"));
    assert_eq!(rec.len(), 3, "{rec:?}");

    let after = listing(d);
    let outs = ["run", "init", "run_probe", "init_probe", "run_fs", "init_fs", "rec"];
    for p in after.difference(&before) {
        let top = p.components().next().unwrap().as_os_str().to_str().unwrap();
        assert!(outs.contains(&top), "unexpected write {}", p.display());
    }
}

#[test]
fn errors_have_distinct_codes_and_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "data", "1", "64");
    let input = "data/sphere/sphere_0000.xyz";

    let (code, line) = fails(d, &["corrupt", "--input", input, "--out", "o", "--bogus"]);
    assert_eq!(code, 2, "{line}");
    assert!(line.starts_with("error: kind=usage"));
    assert_eq!(fails(d, &["probe", "--manifest", "x"]).0, 2);

    let (code, line) = fails(d, &["corrupt", "--input", input, "--out", "o", "--set", "no_such_key=1"]);
    assert_eq!(code, 3, "{line}");
    assert!(line.starts_with("error: kind=config"));

    let (code, line) = fails(d, &["pretrain", "--manifest", "missing.tsv", "--out", "o"]);
    assert_eq!(code, 4, "{line}");

    let (code, line) = fails(d, &["corrupt", "--input", input, "--out", "o", "--mask", "patch", "--alpha", "0.05"]);
    assert_eq!(code, 5, "{line}");

    std::fs::write(d.join("bad.xyz"), "0 0 0\n1 2\n").unwrap();
    let (code, line) = fails(d, &["corrupt", "--input", "bad.xyz", "--out", "o"]);
    assert_eq!(code, 6, "{line}");
    assert!(line.contains("bad.xyz:2:"), "{line}");

    std::fs::write(d.join("bad.ckpt"), b"PCSSLCKP").unwrap();
    let (code, line) = fails(d, &["reconstruct", "--checkpoint", "bad.ckpt", "--input", input, "--out", "o"]);
    assert_eq!(code, 7, "{line}");

    assert!(!d.join("o").exists(), "a failed run left output behind");
    assert!(pcssl(d, &["--help"]).status.success());
    let help = String::from_utf8(pcssl(d, &["pretrain", "--help"]).stdout).unwrap();
    for flag in ["--affine-role", "--objective", "--mask", "--affine", "--decoder", "--seed", "--config"] {
        assert!(help.contains(flag), "pretrain --help lacks {flag}");
    }
}

#[test]
fn resume_rejects_config_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "data", "2", "64");
    std::fs::write(d.join("small.txt"), SMALL).unwrap();
    ok(d, &["pretrain", "--config", "small.txt", "--manifest", "data/manifest.tsv", "--out", "r", "--stop-after", "1"]);
    let (code, _) = fails(d, &["pretrain", "--manifest", "data/manifest.tsv", "--out", "r", "--resume", "r/checkpoint.ckpt", "--epochs", "9"]);
    assert_eq!(code, 3);
    ok(d, &["pretrain", "--manifest", "data/manifest.tsv", "--out", "r", "--resume", "r/checkpoint.ckpt"]);
    assert_eq!(std::fs::read_to_string(d.join("r/metrics.csv")).unwrap().lines().count(), 4);
}
