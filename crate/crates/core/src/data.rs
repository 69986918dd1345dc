//! Point-cloud files (xyz, ply), resampling and normalization, dataset
//! manifests, and a synthetic shape generator.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, Point3, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    PlyAscii,
    PlyBinary,
}

impl CloudFormat {
    /// Guess from the extension; `.ply` maps to binary little endian.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("xyz") | Some("txt") => Ok(CloudFormat::Xyz),
            Some("ply") => Ok(CloudFormat::PlyBinary),
            _ => Err(Error::Format {
                path: path.to_path_buf(),
                msg: "unknown point cloud extension (expected .xyz or .ply)".into(),
            }),
        }
    }
}

/// Reads xyz or ply (ASCII or binary little endian), by content for ply.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"ply") {
        read_ply(path, &bytes)
    } else {
        read_xyz(path, &bytes)
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud, format: CloudFormat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let res = match format {
        CloudFormat::Xyz => write_xyz(&mut out, cloud),
        CloudFormat::PlyAscii => write_ply(&mut out, cloud, false),
        CloudFormat::PlyBinary => write_ply(&mut out, cloud, true),
    };
    res.and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

fn write_xyz(out: &mut impl Write, cloud: &PointCloud) -> std::io::Result<()> {
    for p in cloud.points() {
        writeln!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32)?;
    }
    Ok(())
}

fn write_ply(out: &mut impl Write, cloud: &PointCloud, binary: bool) -> std::io::Result<()> {
    let format = if binary { "binary_little_endian" } else { "ascii" };
    write!(
        out,
        "ply\nformat {format} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    )?;
    for p in cloud.points() {
        if binary {
            for c in p {
                out.write_all(&(*c as f32).to_le_bytes())?;
            }
        } else {
            writeln!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32)?;
        }
    }
    Ok(())
}

fn read_xyz(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: "xyz file is not valid UTF-8".into(),
    })?;
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 coordinates, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (c, f) in p.iter_mut().zip(&fields) {
            let v: f32 = f.parse().map_err(|_| parse_err(format!("bad number {f:?}")))?;
            *c = v as f64;
        }
        pts.push(p);
    }
    if pts.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "zero points".into(),
        });
    }
    PointCloud::new(pts).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => PlyType::I8,
            "uchar" | "uint8" => PlyType::U8,
            "short" | "int16" => PlyType::I16,
            "ushort" | "uint16" => PlyType::U16,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::I8 | PlyType::U8 => 1,
            PlyType::I16 | PlyType::U16 => 2,
            PlyType::I32 | PlyType::U32 | PlyType::F32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            PlyType::I8 => b[0] as i8 as f64,
            PlyType::U8 => b[0] as f64,
            PlyType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<(String, PlyType)>,
    has_list: bool,
}

fn read_ply(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    let fmt_err = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let header_end = bytes
        .windows(b"end_header".len())
        .position(|w| w == b"end_header")
        .ok_or_else(|| fmt_err("missing end_header".into()))?;
    let body_start = bytes[header_end..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| header_end + p + 1)
        .ok_or_else(|| fmt_err("truncated header".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| fmt_err("header is not UTF-8".into()))?;

    let mut binary = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    for (i, line) in header.lines().enumerate() {
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["ply"] | [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, ..] => return Err(perr(format!("unsupported ply format {other}"))),
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count.parse().map_err(|_| perr(format!("bad element count {count:?}")))?,
                props: Vec::new(),
                has_list: false,
            }),
            ["property", "list", ..] => {
                let el = elements.last_mut().ok_or_else(|| perr("property before element".into()))?;
                if el.name == "vertex" {
                    return Err(perr("list properties on vertices are not supported".into()));
                }
                el.has_list = true;
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| perr("property before element".into()))?;
                let t = PlyType::parse(ty).ok_or_else(|| perr(format!("unsupported property type {ty:?}")))?;
                el.props.push((name.to_string(), t));
            }
            _ => return Err(perr(format!("unrecognized header line {line:?}"))),
        }
    }
    let binary = binary.ok_or_else(|| fmt_err("missing format line".into()))?;
    let vi = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| fmt_err("no vertex element".into()))?;
    let vertex = &elements[vi];
    let axis = |n: &str| {
        vertex
            .props
            .iter()
            .position(|p| p.0 == n)
            .ok_or_else(|| fmt_err(format!("vertex element lacks property {n}")))
    };
    let cols = [axis("x")?, axis("y")?, axis("z")?];
    if vertex.count == 0 {
        return Err(fmt_err("zero points".into()));
    }

    let body = &bytes[body_start..];
    let mut pts = Vec::with_capacity(vertex.count);
    if binary {
        let mut offset = 0;
        for e in &elements[..vi] {
            if e.has_list {
                return Err(fmt_err(format!("cannot skip list element {:?} before vertices", e.name)));
            }
            offset += e.count * e.props.iter().map(|p| p.1.size()).sum::<usize>();
        }
        let stride: usize = vertex.props.iter().map(|p| p.1.size()).sum();
        let offsets: Vec<usize> = vertex
            .props
            .iter()
            .scan(0, |acc, p| {
                let o = *acc;
                *acc += p.1.size();
                Some(o)
            })
            .collect();
        if body.len() < offset + stride * vertex.count {
            return Err(fmt_err("truncated binary vertex data".into()));
        }
        for v in 0..vertex.count {
            let rec = &body[offset + v * stride..offset + (v + 1) * stride];
            let mut p = [0.0; 3];
            for (a, &c) in cols.iter().enumerate() {
                p[a] = vertex.props[c].1.decode(&rec[offsets[c]..]);
            }
            pts.push(p);
        }
    } else {
        let text = std::str::from_utf8(body).map_err(|_| fmt_err("ascii body is not UTF-8".into()))?;
        let header_lines = header.lines().count() + 1;
        let skip: usize = elements[..vi].iter().map(|e| e.count).sum();
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).skip(skip);
        for _ in 0..vertex.count {
            let (i, line) = lines.next().ok_or_else(|| fmt_err("truncated ascii vertex data".into()))?;
            let perr = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: header_lines + i + 1,
                msg,
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != vertex.props.len() {
                return Err(perr(format!("expected {} values, found {}", vertex.props.len(), f.len())));
            }
            let mut p = [0.0; 3];
            for (a, &c) in cols.iter().enumerate() {
                p[a] = f[c].parse::<f64>().map_err(|_| perr(format!("bad number {:?}", f[c])))?;
                if vertex.props[c].1 == PlyType::F32 {
                    p[a] = p[a] as f32 as f64;
                }
            }
            pts.push(p);
        }
    }
    PointCloud::new(pts).map_err(|e| fmt_err(e.to_string()))
}

/// Brings a cloud to exactly `target` points: farthest-point sampling when
/// larger, duplicating uniformly drawn points with ≤1e-6 jitter when smaller.
pub fn resample<R: Rng + ?Sized>(cloud: &PointCloud, target: usize, rng: &mut R) -> Result<PointCloud> {
    if target == 0 {
        return Err(Error::InvalidArgument("resample target must be positive".into()));
    }
    let w = cloud.len();
    if w == target {
        return Ok(cloud.clone());
    }
    if w > target {
        let idx = farthest_point_sample(cloud, target, rng)?;
        return cloud.select(&idx);
    }
    let mut pts = cloud.points().to_vec();
    // per-axis bound so the Euclidean offset stays within 1e-6
    let j = 1e-6 / 3f64.sqrt();
    while pts.len() < target {
        let src = cloud.points()[rng.random_range(0..w)];
        pts.push(src.map(|c| c + j * (2.0 * rng.random::<f64>() - 1.0)));
    }
    PointCloud::new(pts)
}

/// Centers on the centroid and scales the farthest point to radius 1.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<PointCloud> {
    let n = cloud.len() as f64;
    let mut c = [0.0; 3];
    for p in cloud.points() {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    let c = c.map(|v| v / n);
    let r = cloud
        .points()
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    if !(r > 0.0) {
        return Err(Error::InvalidCloud("all points identical; cannot normalize".into()));
    }
    PointCloud::new(
        cloud
            .points()
            .iter()
            .map(|p| [(p[0] - c[0]) / r, (p[1] - c[1]) / r, (p[2] - c[2]) / r])
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub label: String,
    pub split: Split,
}

/// Dataset listing: `relative/path.xyz<TAB>label<TAB>split` lines, with an
/// optional `#labels<TAB>a,b,c` header declaring the label set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub labels: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parses and validates every path and label.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut declared: Option<Vec<String>> = None;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let perr = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            if let Some(rest) = line.strip_prefix("#labels\t") {
                declared = Some(rest.split(',').map(|s| s.trim().to_string()).collect());
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let [p, label, split] = f.as_slice() else {
                return Err(perr(format!("expected 3 tab-separated fields, found {}", f.len())));
            };
            let split = Split::parse(split).ok_or_else(|| perr(format!("unknown split {split:?}")))?;
            entries.push(ManifestEntry {
                path: PathBuf::from(p),
                label: label.to_string(),
                split,
            });
        }
        let labels = match declared {
            Some(l) => l,
            None => entries
                .iter()
                .map(|e| e.label.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
        };
        let m = Self { root, labels, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("manifest lists no samples".into()));
        }
        for e in &self.entries {
            if !self.labels.contains(&e.label) {
                return Err(Error::Config(format!(
                    "label {:?} of {} is not in the declared set {:?}",
                    e.label,
                    e.path.display(),
                    self.labels
                )));
            }
            let full = self.root.join(&e.path);
            if !full.is_file() {
                return Err(Error::MissingFile(full));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = format!("#labels\t{}\n", self.labels.join(","));
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.path.display(), e.label, e.split.name()));
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// A loaded, resampled and normalized sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub cloud: PointCloud,
}

/// Reads every entry of `split`, resamples to `points` and normalizes.
pub fn load_split(manifest: &DatasetManifest, split: Split, points: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    manifest
        .split(split)
        .map(|e| {
            let cloud = read_cloud(&manifest.root.join(&e.path))?;
            let cloud = normalize_unit_sphere(&resample(&cloud, points, &mut rng)?)?;
            Ok(Sample {
                id: e.path.display().to_string(),
                label: manifest.label_index(&e.label).unwrap(),
                cloud,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ShapeFamily {
    Sphere,
    Cube,
    Cylinder,
    Torus,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] = [ShapeFamily::Sphere, ShapeFamily::Cube, ShapeFamily::Cylinder, ShapeFamily::Torus];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Cube => "cube",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Torus => "torus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub families: Vec<ShapeFamily>,
    pub samples_per_family: usize,
    pub points: usize,
    /// Gaussian jitter standard deviation, applied before normalization.
    pub jitter: f64,
    /// Relative spread of per-sample proportions (box sides, cylinder
    /// aspect, torus tube radius); 0 gives canonical shapes.
    pub variation: f64,
    pub pose: Pose,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            families: ShapeFamily::ALL.to_vec(),
            samples_per_family: 20,
            points: 256,
            jitter: 0.0,
            variation: 0.6,
            pose: Pose::Upright,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() || self.samples_per_family == 0 || self.points == 0 {
            return Err(Error::Config("synth counts must be positive".into()));
        }
        if !(self.jitter >= 0.0) || !(0.0..1.0).contains(&self.variation) {
            return Err(Error::Config("jitter must be ≥ 0 and variation in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Samples a surface uniformly by area. Points come in antipodal pairs
/// (every family is centrally symmetric), so the centroid is the origin.
pub fn sample_shape<R: Rng + ?Sized>(family: ShapeFamily, points: usize, variation: f64, rng: &mut R) -> Vec<Point3> {
    let mut vary = |base: f64| base * (1.0 + variation * (2.0 * rng.random::<f64>() - 1.0));
    let params = match family {
        ShapeFamily::Sphere => [1.0, 0.0, 0.0],
        ShapeFamily::Cube => [vary(1.0), vary(1.0), vary(1.0)],
        // radius, half height
        ShapeFamily::Cylinder => [0.5, vary(0.8), 0.0],
        // major radius, tube radius
        ShapeFamily::Torus => [0.7, vary(0.25), 0.0],
    };
    let mut out = Vec::with_capacity(points);
    while out.len() < points {
        let p = surface_point(family, &params, rng);
        out.push(p);
        if out.len() < points {
            out.push(p.map(|c| -c));
        }
    }
    out
}

fn surface_point<R: Rng + ?Sized>(family: ShapeFamily, prm: &[f64; 3], rng: &mut R) -> Point3 {
    let mut u = || rng.random::<f64>();
    match family {
        ShapeFamily::Sphere => {
            let z = 2.0 * u() - 1.0;
            let phi = 2.0 * PI * u();
            let r = (1.0 - z * z).max(0.0).sqrt();
            [r * phi.cos(), r * phi.sin(), z]
        }
        ShapeFamily::Cube => {
            let [a, b, c] = *prm;
            // face areas of the box with half-sides a, b, c
            let areas = [b * c, a * c, a * b];
            let total: f64 = areas.iter().sum();
            let mut t = u() * total;
            let mut axis = 0;
            while axis < 2 && t >= areas[axis] {
                t -= areas[axis];
                axis += 1;
            }
            let half = [a, b, c];
            let sign = if u() < 0.5 { -1.0 } else { 1.0 };
            let mut p = [0.0; 3];
            for (k, v) in p.iter_mut().enumerate() {
                *v = if k == axis { sign * half[k] } else { half[k] * (2.0 * u() - 1.0) };
            }
            p
        }
        ShapeFamily::Cylinder => {
            let (r, h) = (prm[0], prm[1]);
            let side = 2.0 * PI * r * 2.0 * h;
            let caps = 2.0 * PI * r * r;
            let phi = 2.0 * PI * u();
            if u() * (side + caps) < side {
                [r * phi.cos(), r * phi.sin(), h * (2.0 * u() - 1.0)]
            } else {
                let rr = r * u().sqrt();
                let z = if u() < 0.5 { -h } else { h };
                [rr * phi.cos(), rr * phi.sin(), z]
            }
        }
        ShapeFamily::Torus => {
            let (big, small) = (prm[0], prm[1]);
            loop {
                let theta = 2.0 * PI * u();
                let phi = 2.0 * PI * u();
                // area element is proportional to (R + r cos(phi))
                if u() * (big + small) <= big + small * phi.cos() {
                    let ring = big + small * phi.cos();
                    return [ring * theta.cos(), ring * theta.sin(), small * phi.sin()];
                }
            }
        }
    }
}

/// Orientation of generated samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pose {
    /// Axis-aligned.
    Canonical,
    /// Uniform rotation about the z axis.
    Upright,
    /// Uniform rotation in SO(3).
    Random,
}

impl Pose {
    pub fn name(self) -> &'static str {
        match self {
            Pose::Canonical => "canonical",
            Pose::Upright => "upright",
            Pose::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Pose::Canonical, Pose::Upright, Pose::Random].into_iter().find(|p| p.name() == s)
    }

    fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> Option<[[f64; 3]; 3]> {
        match self {
            Pose::Canonical => None,
            Pose::Upright => {
                let (s, c) = (2.0 * PI * rng.random::<f64>()).sin_cos();
                Some([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            }
            Pose::Random => Some(random_rotation(rng)),
        }
    }
}

/// Uniform rotation from a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    let (w, x, y, z) = loop {
        let q: [f64; 4] = [0; 4].map(|_| rand_distr::StandardNormal.sample(rng));
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 1e-9 {
            break (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        }
    };
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Writes a synthetic dataset of xyz files plus `manifest.tsv` under
/// `out_dir`, with an 80/20 train/test split per family.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = Normal::new(0.0, spec.jitter.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let n_train = (spec.samples_per_family * 4).div_ceil(5);
    let mut entries = Vec::new();
    for &family in &spec.families {
        let dir = out_dir.join(family.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..spec.samples_per_family {
            let mut pts = sample_shape(family, spec.points, spec.variation, &mut rng);
            if let Some(r) = spec.pose.sample(&mut rng) {
                for p in pts.iter_mut() {
                    *p = [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]);
                }
            }
            if spec.jitter > 0.0 {
                for p in pts.iter_mut() {
                    for c in p.iter_mut() {
                        *c += jitter.sample(&mut rng);
                    }
                }
            }
            let cloud = normalize_unit_sphere(&PointCloud::new(pts)?)?;
            let rel = PathBuf::from(family.name()).join(format!("{}_{i:04}.xyz", family.name()));
            write_cloud(&out_dir.join(&rel), &cloud, CloudFormat::Xyz)?;
            entries.push(ManifestEntry {
                path: rel,
                label: family.name().to_string(),
                split: if i < n_train { Split::Train } else { Split::Test },
            });
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        labels: spec.families.iter().map(|f| f.name().to_string()).collect(),
        entries,
    };
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn empty_xyz_is_rejected() {
        let d = tmp();
        let p = d.path().join("e.xyz");
        fs::write(&p, "").unwrap();
        assert!(read_cloud(&p).unwrap_err().to_string().contains("zero points"));
    }

    #[test]
    fn malformed_xyz_reports_line() {
        let d = tmp();
        let p = d.path().join("m.xyz");
        fs::write(&p, "0 0 0\n1 2\n").unwrap();
        match read_cloud(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn ply_with_colors_reads_geometry() {
        let d = tmp();
        let p = d.path().join("c.ply");
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment made by hand\nelement vertex 2\nproperty float x\nproperty uchar red\nproperty float y\nproperty float z\nproperty uchar green\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n".to_vec();
        for (x, y, z) in [(1.0f32, 2.0f32, 3.0f32), (-1.5, 0.25, 8.0)] {
            bytes.extend(x.to_le_bytes());
            bytes.push(200);
            bytes.extend(y.to_le_bytes());
            bytes.extend(z.to_le_bytes());
            bytes.push(7);
        }
        fs::write(&p, bytes).unwrap();
        let c = read_cloud(&p).unwrap();
        assert_eq!(c.points(), &[[1.0, 2.0, 3.0], [-1.5, 0.25, 8.0]]);

        let a = d.path().join("a.ply");
        fs::write(&a, "ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nend_header\n0.5 1 2 255\n").unwrap();
        assert_eq!(read_cloud(&a).unwrap().points(), &[[0.5, 1.0, 2.0]]);

        let bad = d.path().join("b.ply");
        fs::write(&bad, "ply\nformat ascii 1.0\nelement vertex 1\nproperty half x\nend_header\n0\n").unwrap();
        assert!(read_cloud(&bad).is_err());
    }

    #[test]
    fn resample_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = PointCloud::new((0..8).map(|i| [i as f64, (i * i) as f64, 0.0]).collect()).unwrap();
        assert_eq!(resample(&c, 8, &mut rng).unwrap(), c);
        let down = resample(&c, 4, &mut rng).unwrap();
        assert_eq!(down.len(), 4);
        let up = resample(&c, 16, &mut rng).unwrap();
        assert_eq!(up.len(), 16);
        assert_eq!(&up.points()[..8], c.points());
        for p in &up.points()[8..] {
            let nearest = c
                .points()
                .iter()
                .map(|q| crate::geometry::sq_dist(p, q).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest <= 1e-6);
        }
    }

    #[test]
    fn normalization_properties() {
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0], [2.0, 2.0, 3.0], [1.0, 5.0, 3.0]]).unwrap();
        let n = normalize_unit_sphere(&c).unwrap();
        let r = n.points().iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
        assert!((r - 1.0).abs() < 1e-15);
        let again = normalize_unit_sphere(&n).unwrap();
        for (a, b) in again.points().iter().zip(n.points()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
        let scaled = PointCloud::new(c.points().iter().map(|p| p.map(|v| v * 5.0)).collect()).unwrap();
        let ns = normalize_unit_sphere(&scaled).unwrap();
        for (a, b) in ns.points().iter().zip(n.points()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
        assert!(normalize_unit_sphere(&PointCloud::new(vec![[1.0; 3]; 4]).unwrap()).is_err());
    }

    #[test]
    fn synth_sphere_and_determinism() {
        let d = tmp();
        let spec = SynthSpec {
            families: vec![ShapeFamily::Sphere, ShapeFamily::Torus],
            samples_per_family: 5,
            points: 64,
            ..SynthSpec::default()
        };
        let m = synth_generate(&spec, &d.path().join("a")).unwrap();
        assert_eq!(m.entries.len(), 10);
        assert_eq!(m.split(Split::Train).count(), 8);
        for e in m.entries.iter().filter(|e| e.label == "sphere") {
            let c = read_cloud(&m.root.join(&e.path)).unwrap();
            assert_eq!(c.len(), 64);
            for p in c.points() {
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                assert!((r - 1.0).abs() <= 1e-6, "{r}");
            }
        }
        synth_generate(&spec, &d.path().join("b")).unwrap();
        for e in &m.entries {
            let a = fs::read(d.path().join("a").join(&e.path)).unwrap();
            let b = fs::read(d.path().join("b").join(&e.path)).unwrap();
            assert_eq!(a, b);
        }
        let reloaded = DatasetManifest::load(&d.path().join("a/manifest.tsv")).unwrap();
        assert_eq!(reloaded.entries, m.entries);
        assert_eq!(reloaded.labels, vec!["sphere", "torus"]);
    }

    #[test]
    fn manifest_rejects_undeclared_label() {
        let d = tmp();
        fs::write(d.path().join("a.xyz"), "0 0 0\n").unwrap();
        fs::write(d.path().join("m.tsv"), "#labels\tcat\na.xyz\tdog\ttrain\n").unwrap();
        assert!(matches!(DatasetManifest::load(&d.path().join("m.tsv")), Err(Error::Config(_))));
    }
}
