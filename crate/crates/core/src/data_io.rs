//! Point-cloud files, normalization, resampling and synthetic shapes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::geometry::{fps, Point, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    AsciiPly,
    Xyz,
}

impl CloudFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("ply") => Ok(Self::AsciiPly),
            Some("xyz") | Some("txt") => Ok(Self::Xyz),
            _ => invalid(format!("cannot infer point cloud format of {}", path.display())),
        }
    }
}

fn parse_err<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        line,
        msg: msg.into(),
    })
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    match format {
        CloudFormat::AsciiPly => parse_ply(&text),
        CloudFormat::Xyz => parse_xyz(&text),
    }
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<String>,
}

pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return parse_err(1, "missing 'ply' magic"),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut header_done = false;
    let mut last_line = 1;
    for (no, line) in lines.by_ref() {
        last_line = no;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["format", "ascii", _] => {}
            ["format", other, ..] => return parse_err(no, format!("unsupported PLY format '{other}'")),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .or_else(|_| parse_err(no, format!("bad element count '{count}'")))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", _, _, name] | ["property", _, name] => match elements.last_mut() {
                Some(e) => e.props.push(name.to_string()),
                None => return parse_err(no, "property before any element"),
            },
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return parse_err(no, format!("unexpected header line '{line}'")),
        }
    }
    if !header_done {
        return parse_err(last_line + 1, "missing end_header");
    }
    let Some(vi) = elements.iter().position(|e| e.name == "vertex") else {
        return parse_err(last_line, "no vertex element");
    };
    let axis_pos: Vec<usize> = ["x", "y", "z"]
        .iter()
        .map(|a| {
            elements[vi]
                .props
                .iter()
                .position(|p| p == a)
                .ok_or_else(|| Error::Parse {
                    line: last_line,
                    msg: format!("vertex element lacks property '{a}'"),
                })
        })
        .collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(elements[vi].count);
    let mut cursor = last_line;
    for (ei, e) in elements.iter().enumerate() {
        for _ in 0..e.count {
            let Some((no, line)) = lines.next() else {
                return parse_err(cursor + 1, format!("expected {} '{}' rows, file ended", e.count, e.name));
            };
            cursor = no;
            if ei != vi {
                continue;
            }
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() < e.props.len() {
                return parse_err(no, format!("expected {} values, found {}", e.props.len(), vals.len()));
            }
            let mut p = [0.0; 3];
            for (k, &pos) in axis_pos.iter().enumerate() {
                p[k] = vals[pos]
                    .parse()
                    .or_else(|_| parse_err(no, format!("bad coordinate '{}'", vals[pos])))?;
            }
            points.push(p);
        }
        if ei == vi && elements.len() == vi + 1 {
            break;
        }
    }
    PointCloud::new(points).or_else(|e| parse_err(cursor, e.to_string()))
}

pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != 3 {
            return parse_err(i + 1, format!("expected 3 coordinates, found {}", vals.len()));
        }
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = vals[k]
                .parse()
                .or_else(|_| parse_err(i + 1, format!("bad coordinate '{}'", vals[k])))?;
        }
        points.push(p);
    }
    if points.is_empty() {
        return parse_err(text.lines().count().max(1), "no points");
    }
    PointCloud::new(points).or_else(|e| parse_err(0, e.to_string()))
}

pub fn format_ply(points: &[Point]) -> String {
    let mut s = String::with_capacity(64 + points.len() * 48);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in points {
        let _ = writeln!(s, "{:.8e} {:.8e} {:.8e}", p[0], p[1], p[2]);
    }
    s
}

pub fn format_xyz(points: &[Point]) -> String {
    let mut s = String::with_capacity(points.len() * 48);
    for p in points {
        let _ = writeln!(s, "{:.8e} {:.8e} {:.8e}", p[0], p[1], p[2]);
    }
    s
}

/// Writes `text` to `path` through a temporary sibling and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes a cloud with 9 significant digits per coordinate.
pub fn save_cloud(points: &[Point], path: &Path, format: CloudFormat) -> Result<()> {
    if points.is_empty() {
        return invalid("refusing to save an empty point cloud");
    }
    let text = match format {
        CloudFormat::AsciiPly => format_ply(points),
        CloudFormat::Xyz => format_xyz(points),
    };
    write_atomic(path, text.as_bytes())
}

/// Centroid and scale removed by [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRecord {
    pub centroid: Point,
    pub scale: f64,
}

impl NormRecord {
    pub fn invert(&self, cloud: &PointCloud) -> PointCloud {
        let pts = cloud
            .points()
            .iter()
            .map(|p| {
                [
                    p[0] * self.scale + self.centroid[0],
                    p[1] * self.scale + self.centroid[1],
                    p[2] * self.scale + self.centroid[2],
                ]
            })
            .collect();
        PointCloud::new(pts).expect("finite inputs stay finite")
    }
}

/// Centers the cloud on its centroid and scales it into `[-0.5, 0.5]³`.
pub fn normalize(cloud: &PointCloud) -> (PointCloud, NormRecord) {
    let n = cloud.len() as f64;
    let mut c = [0.0; 3];
    for p in cloud.points() {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    for v in &mut c {
        *v /= n;
    }
    let max_abs = cloud
        .points()
        .iter()
        .flat_map(|p| (0..3).map(move |k| (p[k] - c[k]).abs()))
        .fold(0.0, f64::max);
    let scale = if max_abs > 0.0 { 2.0 * max_abs } else { 1.0 };
    let pts = cloud
        .points()
        .iter()
        .map(|p| {
            [
                ((p[0] - c[0]) / scale).clamp(-0.5, 0.5),
                ((p[1] - c[1]) / scale).clamp(-0.5, 0.5),
                ((p[2] - c[2]) / scale).clamp(-0.5, 0.5),
            ]
        })
        .collect();
    (
        PointCloud::new(pts).expect("finite"),
        NormRecord { centroid: c, scale },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMethod {
    Fps,
    Random,
}

/// Resamples to exactly `target` points.
///
/// FPS starts from index `seed % N` and cannot exceed `N`; random sampling is
/// without replacement unless `target > N`.
pub fn resample(cloud: &PointCloud, target: usize, method: ResampleMethod, seed: u64) -> Result<PointCloud> {
    let n = cloud.len();
    if target == 0 {
        return invalid("resample target must be positive");
    }
    let pts = cloud.points();
    let idx: Vec<usize> = match method {
        ResampleMethod::Fps => fps(cloud, target, (seed % n as u64) as usize)?,
        ResampleMethod::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if target <= n {
                sample_indices(&mut rng, n, target).into_vec()
            } else {
                (0..target).map(|_| rng.random_range(0..n)).collect()
            }
        }
    };
    PointCloud::new(idx.into_iter().map(|i| pts[i]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Torus,
    Cylinder,
    TwoSpheres,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Torus,
        ShapeKind::Cylinder,
        ShapeKind::TwoSpheres,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Cube => "cube",
            Self::Torus => "torus",
            Self::Cylinder => "cylinder",
            Self::TwoSpheres => "two-spheres",
        }
    }
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape kind '{s}'")))
    }
}

pub const TORUS_MAJOR: f64 = 0.35;
pub const TORUS_MINOR: f64 = 0.15;

fn unit_vector(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v: Point = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn surface_point(kind: ShapeKind, rng: &mut ChaCha8Rng) -> Point {
    use std::f64::consts::PI;
    match kind {
        ShapeKind::Sphere => {
            let u = unit_vector(rng);
            [0.5 * u[0], 0.5 * u[1], 0.5 * u[2]]
        }
        ShapeKind::Cube => {
            let face = rng.random_range(0..6);
            let (a, b): (f64, f64) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let s = if face % 2 == 0 { 0.5 } else { -0.5 };
            match face / 2 {
                0 => [s, a, b],
                1 => [a, s, b],
                _ => [a, b, s],
            }
        }
        ShapeKind::Torus => {
            let (big, small) = (TORUS_MAJOR, TORUS_MINOR);
            let theta = loop {
                let t: f64 = rng.random_range(0.0..2.0 * PI);
                let accept: f64 = rng.random();
                if accept * (big + small) <= big + small * t.cos() {
                    break t;
                }
            };
            let phi: f64 = rng.random_range(0.0..2.0 * PI);
            let ring = big + small * theta.cos();
            [ring * phi.cos(), ring * phi.sin(), small * theta.sin()]
        }
        ShapeKind::Cylinder => {
            // Lateral area pi, the two caps pi/2 together.
            let r = 0.5;
            let pick: f64 = rng.random_range(0.0..1.5);
            let phi: f64 = rng.random_range(0.0..2.0 * PI);
            if pick < 1.0 {
                let z = rng.random_range(-0.5..0.5);
                [r * phi.cos(), r * phi.sin(), z]
            } else {
                let rad = r * rng.random::<f64>().sqrt();
                let z = if pick < 1.25 { 0.5 } else { -0.5 };
                [rad * phi.cos(), rad * phi.sin(), z]
            }
        }
        ShapeKind::TwoSpheres => {
            let u = unit_vector(rng);
            let cx = if rng.random::<bool>() { 0.25 } else { -0.25 };
            [cx + 0.25 * u[0], 0.25 * u[1], 0.25 * u[2]]
        }
    }
}

/// Area-weighted surface samples of an analytic shape that fits
/// `[-0.5, 0.5]³` and is centered on the origin. Jittered points are
/// clamped back into the cube.
pub fn synth_shape(kind: ShapeKind, n: usize, noise_sigma: f64, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return invalid("synthetic shape needs at least one point");
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return invalid(format!("noise sigma {noise_sigma} must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| {
            let mut p = surface_point(kind, &mut rng);
            if noise_sigma > 0.0 {
                for v in &mut p {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = (*v + noise_sigma * z).clamp(-0.5, 0.5);
                }
            }
            p
        })
        .collect();
    PointCloud::new(pts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EntrySource {
    File(PathBuf),
    Synth { kind: ShapeKind, seed: u64, noise: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub source: EntrySource,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub target_points: usize,
}

/// Parses `synth:<kind>[:seed=<n>][:noise=<sigma>]`.
fn parse_synth_spec(spec: &str, line: usize) -> Result<EntrySource> {
    let mut parts = spec.split(':').skip(1);
    let kind = parts
        .next()
        .ok_or_else(|| Error::Parse {
            line,
            msg: "synth spec without kind".into(),
        })?
        .parse()
        .or_else(|e: Error| parse_err(line, e.to_string()))?;
    let (mut seed, mut noise) = (0u64, 0.0);
    for p in parts {
        match p.split_once('=') {
            Some(("seed", v)) => seed = v.parse().or_else(|_| parse_err(line, format!("bad seed '{v}'")))?,
            Some(("noise", v)) => noise = v.parse().or_else(|_| parse_err(line, format!("bad noise '{v}'")))?,
            _ => return parse_err(line, format!("unknown synth option '{p}'")),
        }
    }
    Ok(EntrySource::Synth { kind, seed, noise })
}

impl DatasetManifest {
    /// Parses `id<TAB>spec<TAB>split` lines; relative file paths resolve
    /// against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path, target_points: usize) -> Result<Self> {
        let mut entries: Vec<ManifestEntry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let no = i + 1;
            let line = raw.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return parse_err(no, format!("expected 3 tab-separated columns, found {}", cols.len()));
            }
            let id = cols[0].to_string();
            if entries.iter().any(|e| e.id == id) {
                return parse_err(no, format!("duplicate id '{id}'"));
            }
            let source = if cols[1].starts_with("synth:") {
                parse_synth_spec(cols[1], no)?
            } else {
                EntrySource::File(base_dir.join(cols[1]))
            };
            let split = match cols[2] {
                "train" => Split::Train,
                "val" => Split::Val,
                other => return parse_err(no, format!("unknown split '{other}'")),
            };
            entries.push(ManifestEntry { id, source, split });
        }
        Ok(Self {
            entries,
            target_points,
        })
    }

    pub fn load(path: &Path, target_points: usize) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, target_points)
    }

    /// Loads, normalizes and resamples (FPS) every entry of `split`.
    pub fn materialize(&self, split: Split) -> Result<Vec<(String, PointCloud)>> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let raw = match &e.source {
                    EntrySource::File(p) => load_cloud(p, CloudFormat::from_path(p)?)?,
                    EntrySource::Synth { kind, seed, noise } => {
                        synth_shape(*kind, self.target_points, *noise, *seed)?
                    }
                };
                let (norm, _) = normalize(&raw);
                let cloud = if norm.len() == self.target_points {
                    norm
                } else {
                    resample(&norm, self.target_points, ResampleMethod::Fps, 0)?
                };
                Ok((e.id.clone(), cloud))
            })
            .collect()
    }
}
