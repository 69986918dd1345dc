//! Training configuration and its flat `key = value` file format.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored;
//! unknown keys are rejected. [`TrainConfig::to_text`] writes every key, and
//! its output parses back to the same configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::corruption::{AffineFamilySpec, DEFAULT_KAPPA_MAX, DEFAULT_MASK_RATIO};
use crate::error::{Error, Result};
use crate::geometry::AffineFamily;
use crate::losses::DEFAULT_LAMBDA;
use crate::models::{DecoderKind, PointNetEncoderConfig, PointNetModelConfig, TransformerConfig};

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $s),+ }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s { $($s => Some($name::$variant),)+ _ => None }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(
    /// Encoder clan.
    EncoderKind { PointNet => "pointnet", Transformer => "transformer" }
);
named_enum!(
    /// Whether the reconstruction target stays clean (corruption) or is
    /// transformed too (augmentation).
    AffineRole { Corruption => "corruption", Augmentation => "augmentation" }
);
named_enum!(
    /// Transformer objective.
    Objective {
        Decomposed => "decomposed",
        Whole => "whole",
        LocalOnly => "local-only",
        GlobalOnly => "global-only",
    }
);
named_enum!(
    MaskStrategy {
        Random => "random",
        Fixed => "fixed",
        View => "view",
        Patch => "patch",
        None => "none",
    }
);
named_enum!(
    Precision { F32 => "f32", F64 => "f64" }
);

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    /// Points per cloud.
    pub points: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub mask_ratio: f64,
    pub mask: MaskStrategy,
    pub kappa_max: usize,
    pub cluster_size: usize,
    pub affine: AffineFamilySpec,
    pub affine_role: AffineRole,
    pub encoder: EncoderKind,
    pub objective: Objective,
    pub seed: u64,
    pub precision: Precision,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    // transformer
    pub d: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub patches: usize,
    pub patch_size: usize,
    pub head_hidden: usize,
    pub local_decoder: DecoderKind,
    pub global_decoder: DecoderKind,
    // pointnet
    pub pointnet_widths: Vec<usize>,
    pub decoder: DecoderKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let t = TransformerConfig::default();
        Self {
            epochs: 300,
            lr: 0.001,
            lr_min: 0.0,
            warmup_epochs: 0,
            points: 1024,
            batch_size: 8,
            lambda: DEFAULT_LAMBDA,
            mask_ratio: DEFAULT_MASK_RATIO,
            mask: MaskStrategy::Patch,
            kappa_max: DEFAULT_KAPPA_MAX,
            cluster_size: 32,
            affine: AffineFamilySpec::default(),
            affine_role: AffineRole::Corruption,
            encoder: EncoderKind::Transformer,
            objective: Objective::Decomposed,
            seed: 0,
            precision: Precision::F32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: 0.0,
            d: t.d,
            encoder_depth: t.encoder_depth,
            decoder_depth: t.decoder_depth,
            heads: t.heads,
            ffn_mult: t.ffn_mult,
            patches: t.n,
            patch_size: t.k,
            head_hidden: t.head_hidden,
            local_decoder: t.local_decoder,
            global_decoder: t.global_decoder,
            pointnet_widths: PointNetEncoderConfig::new(t.d).widths,
            decoder: DecoderKind::Fc,
        }
    }
}

fn fmt_range((lo, hi): (f64, f64)) -> String {
    format!("{lo}:{hi}")
}

fn parse_range(s: &str) -> Option<(f64, f64)> {
    let (a, b) = s.split_once(':')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

fn parse_axes<V: Copy>(s: &str, one: impl Fn(&str) -> Option<V>) -> Option<[V; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a] => one(a).map(|v| [v; 3]),
        [a, b, c] => Some([one(a)?, one(b)?, one(c)?]),
        _ => None,
    }
}

/// Writes the `affine.*` keys of a spec.
pub fn affine_to_text(spec: &AffineFamilySpec, out: &mut String) {
    let fams = spec.enabled_families();
    let fams = if fams.is_empty() {
        "none".to_string()
    } else {
        fams.iter().map(|f| f.name()).collect::<Vec<_>>().join(",")
    };
    let axes = |r: &[(f64, f64); 3]| r.iter().map(|&x| fmt_range(x)).collect::<Vec<_>>().join(",");
    let _ = writeln!(out, "affine.families = {fams}");
    let _ = writeln!(out, "affine.rotate = {}", axes(&spec.rotate));
    let _ = writeln!(out, "affine.translate = {}", axes(&spec.translate));
    let _ = writeln!(
        out,
        "affine.reflect = {}",
        spec.reflect.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",")
    );
    let _ = writeln!(out, "affine.shear = {}", fmt_range(spec.shear));
    let _ = writeln!(out, "affine.scale = {}", axes(&spec.scale));
}

/// Applies one `affine.*` key (the prefix is optional). Returns false for
/// keys that are not affine keys.
pub fn set_affine_key(spec: &mut AffineFamilySpec, key: &str, value: &str) -> Result<bool> {
    let key = key.strip_prefix("affine.").unwrap_or(key);
    let bad = || Error::Config(format!("invalid value {value:?} for affine.{key}"));
    match key {
        "families" => {
            let fams: Vec<AffineFamily> = if value.trim() == "none" {
                Vec::new()
            } else if value.trim() == "full" {
                AffineFamily::ORDER.to_vec()
            } else {
                value
                    .split(',')
                    .map(|s| AffineFamily::parse(s.trim()).ok_or_else(bad))
                    .collect::<Result<_>>()?
            };
            for f in AffineFamily::ORDER {
                spec.set_enabled(f, fams.contains(&f));
            }
        }
        "rotate" => spec.rotate = parse_axes(value, parse_range).ok_or_else(bad)?,
        "translate" => spec.translate = parse_axes(value, parse_range).ok_or_else(bad)?,
        "scale" => spec.scale = parse_axes(value, parse_range).ok_or_else(bad)?,
        "reflect" => spec.reflect = parse_axes(value, |s| s.parse().ok()).ok_or_else(bad)?,
        "shear" => spec.shear = parse_range(value).ok_or_else(bad)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Parses `key = value` lines into pairs, rejecting malformed lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Reads an affine spec file (`affine.*` keys, prefix optional).
pub fn load_affine_spec(path: &Path) -> Result<AffineFamilySpec> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut spec = AffineFamilySpec::default();
    for (line, k, v) in parse_pairs(&text)? {
        if !set_affine_key(&mut spec, &k, &v)? {
            return Err(Error::Config(format!("line {line}: unknown affine key {k:?}")));
        }
    }
    spec.validate()?;
    Ok(spec)
}

impl TrainConfig {
    /// Desk-scale transformer setup: 256 points, toy model, 200 epochs.
    pub fn toy() -> Self {
        Self {
            epochs: 200,
            points: 256,
            ..Self::default()
        }
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            d: self.d,
            encoder_depth: self.encoder_depth,
            decoder_depth: self.decoder_depth,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            n: self.patches,
            k: self.patch_size,
            head_hidden: self.head_hidden,
            local_decoder: self.local_decoder,
            global_decoder: self.global_decoder,
            whole_points: (self.objective == Objective::Whole).then_some(self.points),
        }
    }

    pub fn pointnet(&self) -> PointNetModelConfig {
        PointNetModelConfig {
            encoder: PointNetEncoderConfig {
                widths: self.pointnet_widths.clone(),
            },
            decoder: self.decoder,
            head_hidden: self.head_hidden,
            points: self.points,
        }
    }

    /// Probe feature width of the encoder.
    pub fn feature_dim(&self) -> usize {
        match self.encoder {
            EncoderKind::Transformer => 2 * self.d,
            EncoderKind::PointNet => *self.pointnet_widths.last().unwrap_or(&0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.points == 0 {
            return bad("epochs, batch_size and points must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return bad(format!("need 0 <= lr_min <= lr and lr > 0 (lr={}, lr_min={})", self.lr, self.lr_min));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("AdamW betas must be in [0, 1) and eps positive".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("weight_decay and grad_clip must be non-negative".into());
        }
        if self.mask != MaskStrategy::None && !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio {} outside (0, 1)", self.mask_ratio));
        }
        if self.kappa_max == 0 || self.cluster_size == 0 {
            return bad("kappa_max and cluster_size must be positive".into());
        }
        self.affine.validate()?;
        match self.encoder {
            EncoderKind::Transformer => {
                if !matches!(self.mask, MaskStrategy::Patch | MaskStrategy::None) {
                    return bad(format!("transformer encoder supports mask = patch | none, got {}", self.mask));
                }
                if self.patches > self.points || self.patch_size > self.points {
                    return bad("patches and patch_size cannot exceed points".into());
                }
                self.transformer().validate()?;
            }
            EncoderKind::PointNet => {
                if self.mask == MaskStrategy::Patch {
                    return bad("pointnet encoder does not use patch masking".into());
                }
                if self.objective != Objective::Decomposed {
                    return bad("objective applies to the transformer encoder only".into());
                }
                self.pointnet().encoder.validate()?;
            }
        }
        Ok(())
    }

    /// Fully resolved config as a config file.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let _ = write!(
            s,
            "epochs = {}\nlr = {}\nlr_min = {}\nwarmup_epochs = {}\npoints = {}\nbatch_size = {}\n\
             lambda = {}\nmask_ratio = {}\nmask = {}\nkappa_max = {}\ncluster_size = {}\n\
             affine_role = {}\nencoder = {}\nobjective = {}\nseed = {}\nprecision = {}\n\
             beta1 = {}\nbeta2 = {}\neps = {}\nweight_decay = {}\ngrad_clip = {}\n\
             d = {}\nencoder_depth = {}\ndecoder_depth = {}\nheads = {}\nffn_mult = {}\n\
             patches = {}\npatch_size = {}\nhead_hidden = {}\nlocal_decoder = {}\nglobal_decoder = {}\n\
             pointnet_widths = {}\ndecoder = {}\n",
            self.epochs,
            self.lr,
            self.lr_min,
            self.warmup_epochs,
            self.points,
            self.batch_size,
            self.lambda,
            self.mask_ratio,
            self.mask,
            self.kappa_max,
            self.cluster_size,
            self.affine_role,
            self.encoder,
            self.objective,
            self.seed,
            self.precision,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
            self.grad_clip,
            self.d,
            self.encoder_depth,
            self.decoder_depth,
            self.heads,
            self.ffn_mult,
            self.patches,
            self.patch_size,
            self.head_hidden,
            self.local_decoder.name(),
            self.global_decoder.name(),
            list(&self.pointnet_widths),
            self.decoder.name(),
        );
        affine_to_text(&self.affine, &mut s);
        s
    }

    /// Sets one key from its string form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        }
        fn named<T>(key: &str, v: &str, p: impl Fn(&str) -> Option<T>) -> Result<T> {
            p(v).ok_or_else(|| Error::Config(format!("invalid value {v:?} for {key}")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_min" => self.lr_min = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "points" => self.points = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "mask_ratio" => self.mask_ratio = num(key, value)?,
            "mask" => self.mask = named(key, value, MaskStrategy::parse)?,
            "kappa_max" => self.kappa_max = num(key, value)?,
            "cluster_size" => self.cluster_size = num(key, value)?,
            "affine_role" => self.affine_role = named(key, value, AffineRole::parse)?,
            "encoder" => self.encoder = named(key, value, EncoderKind::parse)?,
            "objective" => self.objective = named(key, value, Objective::parse)?,
            "seed" => self.seed = num(key, value)?,
            "precision" => self.precision = named(key, value, Precision::parse)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "encoder_depth" => self.encoder_depth = num(key, value)?,
            "decoder_depth" => self.decoder_depth = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "ffn_mult" => self.ffn_mult = num(key, value)?,
            "patches" => self.patches = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "head_hidden" => self.head_hidden = num(key, value)?,
            "local_decoder" => self.local_decoder = named(key, value, DecoderKind::parse)?,
            "global_decoder" => self.global_decoder = named(key, value, DecoderKind::parse)?,
            "decoder" => self.decoder = named(key, value, DecoderKind::parse)?,
            "pointnet_widths" => {
                self.pointnet_widths = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            k if k.starts_with("affine.") => {
                set_affine_key(&mut self.affine, k, value)?;
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (line, k, v) in parse_pairs(text)? {
            self.set(&k, &v)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// FNV-1a hash of the resolved text.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::toy();
        c.affine = AffineFamilySpec::only(&[AffineFamily::Rotate, AffineFamily::Shear]);
        c.affine.reflect = [0.1, 0.2, 0.3];
        c.objective = Objective::GlobalOnly;
        c.lr = 3.3e-4;
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
    }

    #[test]
    fn unknown_and_bad_keys() {
        assert!(TrainConfig::from_text("nope = 1").is_err());
        assert!(TrainConfig::from_text("epochs = many").is_err());
        assert!(TrainConfig::from_text("mask = sometimes").is_err());
        assert!(TrainConfig::from_text("just words").is_err());
        let c = TrainConfig::from_text("# comment\n\nepochs = 3 # trailing\naffine.families = none\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert!(c.affine.enabled_families().is_empty());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.mask = MaskStrategy::Random;
        assert!(c.validate().is_err());
        c.encoder = EncoderKind::PointNet;
        assert!(c.validate().is_ok());
        c.objective = Objective::Whole;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.lambda = -1.0;
        assert!(c.validate().is_err());
    }
}
