//! Synthetic datasets: primitive surfaces with Patch-Gen test anomalies.
//!
//! Layout under the dataset root:
//! `train/train_NNN.xyzb`, `test/test_NNN.xyzb` with `test/test_NNN.mask`
//! for anomalous files, `reference/test_NNN.xyzb` holding the clean cloud
//! each test file was derived from, and `manifest.csv`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::patchgen::{self, PatchGenConfig};
use crate::pointcloud::{self, Format, Point3, PointCloud};

pub const MANIFEST: &str = "manifest.csv";

// Stream ids keep train shapes, test shapes and test defects independent.
const TRAIN_STREAM: u64 = 10;
const TEST_STREAM: u64 = 11;
const DEFECT_STREAM: u64 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
}

impl std::str::FromStr for Shape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Shape::Sphere),
            "cube" => Ok(Shape::Cube),
            "cylinder" => Ok(Shape::Cylinder),
            other => Err(Error::Config(format!("shape must be sphere, cube or cylinder, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub shape: Shape,
    pub n_train: usize,
    pub n_test_clean: usize,
    pub n_test_anomalous: usize,
    pub points: usize,
    /// Half-width of the uniform offset along the surface normal.
    pub jitter: f64,
    /// Defects injected into anomalous test clouds.
    pub anomaly: PatchGenConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            shape: Shape::Sphere,
            n_train: 20,
            n_test_clean: 20,
            n_test_anomalous: 20,
            points: 500,
            jitter: 0.01,
            anomaly: PatchGenConfig {
                scale: 0.3,
                ..PatchGenConfig::default()
            },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test_clean == 0 || self.n_test_anomalous == 0 {
            return Err(Error::Config("synthetic dataset counts must be positive".into()));
        }
        if self.points < pointcloud::MIN_POINTS {
            return Err(Error::Config(format!(
                "synthetic clouds need at least {} points",
                pointcloud::MIN_POINTS
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter < 0.5) {
            return Err(Error::Config(format!("jitter must be in [0, 0.5), got {}", self.jitter)));
        }
        self.anomaly.validate()
    }
}

fn unit_normal<R: Rng + ?Sized>(rng: &mut R) -> Point3 {
    loop {
        let v: Point3 = std::array::from_fn(|_| StandardNormal.sample(&mut *rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|c| c / n);
        }
    }
}

/// Points on the unit primitive, offset along the normal by up to `jitter`.
pub fn sample_shape<R: Rng + ?Sized>(shape: Shape, n: usize, jitter: f64, rng: &mut R) -> Vec<Point3> {
    let offset = |rng: &mut R| if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
    (0..n)
        .map(|_| match shape {
            Shape::Sphere => {
                let u = unit_normal(rng);
                let r = 1.0 + offset(rng);
                u.map(|c| c * r)
            }
            Shape::Cube => {
                let face = rng.random_range(0..6);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p: Point3 = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
                p[axis] = sign * (1.0 + offset(rng));
                p
            }
            Shape::Cylinder => {
                // Lateral area 4π, caps 2π in total.
                if rng.random_bool(2.0 / 3.0) {
                    let phi = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = 1.0 + offset(rng);
                    [r * phi.cos(), r * phi.sin(), rng.random_range(-1.0..=1.0)]
                } else {
                    let phi = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = rng.random::<f64>().sqrt();
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    [r * phi.cos(), r * phi.sin(), sign * (1.0 + offset(rng))]
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the dataset root.
    pub file: String,
    pub anomalous: bool,
}

/// Writes a dataset; returns its directory digest.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64, root: &Path) -> Result<String> {
    cfg.validate()?;
    for sub in ["train", "test", "reference"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let stream = |id: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id);
        rng
    };
    let draw = |rng: &mut ChaCha8Rng| pointcloud::normalize(&PointCloud::new(sample_shape(cfg.shape, cfg.points, cfg.jitter, rng))?);

    let mut rng = stream(TRAIN_STREAM);
    for i in 0..cfg.n_train {
        let pc = draw(&mut rng)?;
        pointcloud::save(&pc, &root.join(format!("train/train_{i:03}.xyzb")), Format::XyzBin)?;
    }

    let mut shapes = stream(TEST_STREAM);
    let mut defects = stream(DEFECT_STREAM);
    let mut manifest = format!("# seed={seed}\nfile,label\n");
    for i in 0..cfg.n_test_clean + cfg.n_test_anomalous {
        let clean = draw(&mut shapes)?;
        let name = format!("test_{i:03}.xyzb");
        pointcloud::save(&clean, &root.join("reference").join(&name), Format::XyzBin)?;
        let anomalous = i >= cfg.n_test_clean;
        let test = if anomalous {
            let p = patchgen::perturb(&clean, &cfg.anomaly, &mut defects)?;
            write_mask(&p.mask, &root.join(format!("test/test_{i:03}.mask")))?;
            pointcloud::normalize(&p.cloud)?
        } else {
            clean
        };
        pointcloud::save(&test, &root.join("test").join(&name), Format::XyzBin)?;
        let _ = writeln!(manifest, "test/{name},{}", u8::from(anomalous));
    }
    let path = root.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    dir_digest(root)
}

fn write_mask(mask: &[bool], path: &Path) -> Result<()> {
    let text: String = mask.iter().map(|&m| if m { "1\n" } else { "0\n" }).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a per-point mask written next to an anomalous test file.
pub fn read_mask(path: &Path) -> Result<Vec<bool>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| match l.trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::Parse {
                source_name: path.display().to_string(),
                location: format!("line {}", i + 1),
                message: format!("expected 0 or 1, got {other:?}"),
            }),
        })
        .collect()
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        source_name: path.display().to_string(),
        location: format!("line {line}"),
        message,
    };
    let mut out = Vec::new();
    let mut header = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header {
            if line != "file,label" {
                return Err(parse_err(i + 1, format!("expected header file,label, got {line:?}")));
            }
            header = true;
            continue;
        }
        let (file, label) = line
            .rsplit_once(',')
            .ok_or_else(|| parse_err(i + 1, "expected file,label".into()))?;
        let anomalous = match label.trim() {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(i + 1, format!("label must be 0 or 1, got {other:?}"))),
        };
        out.push(ManifestEntry {
            file: file.trim().to_string(),
            anomalous,
        });
    }
    Ok(out)
}

/// Reference (clean) counterpart of a test file, if the dataset has one.
pub fn reference_path(root: &Path, entry: &ManifestEntry) -> Option<PathBuf> {
    let name = Path::new(&entry.file).file_name()?;
    let p = root.join("reference").join(name);
    p.exists().then_some(p)
}

/// SHA-256 over every file's relative path and contents, in path order.
pub fn dir_digest(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let path = root.join(&rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_train: 3,
            n_test_clean: 2,
            n_test_anomalous: 3,
            points: 200,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn sphere_points_within_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in sample_shape(Shape::Sphere, 1000, 0.02, &mut rng) {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.0).abs() <= 0.02 + 1e-12, "{r}");
        }
    }

    #[test]
    fn cube_and_cylinder_lie_on_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in sample_shape(Shape::Cube, 500, 0.0, &mut rng) {
            let m = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((m - 1.0).abs() < 1e-12);
        }
        for p in sample_shape(Shape::Cylinder, 500, 0.0, &mut rng) {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((r - 1.0).abs() < 1e-12 || ((p[2].abs() - 1.0).abs() < 1e-12 && r <= 1.0));
        }
    }

    #[test]
    fn layout_masks_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        synth_dataset(&cfg, 5, dir.path()).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.len(), 5);
        assert_eq!(m.iter().filter(|e| e.anomalous).count(), 3);
        assert!(std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap().starts_with("# seed=5\n"));
        assert_eq!(pointcloud::load_dir(&dir.path().join("train")).unwrap().len(), 3);
        let patch = cfg.anomaly.patch_size.resolve(cfg.points);
        for e in &m {
            let mask_path = dir.path().join(e.file.replace(".xyzb", ".mask"));
            assert_eq!(mask_path.exists(), e.anomalous);
            if e.anomalous {
                let mask = read_mask(&mask_path).unwrap();
                assert_eq!(mask.len(), cfg.points);
                assert_eq!(mask.iter().filter(|&&b| b).count(), patch);
            } else {
                let test = std::fs::read(dir.path().join(&e.file)).unwrap();
                let reference = std::fs::read(reference_path(dir.path(), e).unwrap()).unwrap();
                assert_eq!(test, reference);
            }
        }
    }

    #[test]
    fn same_seed_same_digest() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let c = tempfile::tempdir().unwrap();
        let da = synth_dataset(&small(), 9, a.path()).unwrap();
        let db = synth_dataset(&small(), 9, b.path()).unwrap();
        let dc = synth_dataset(&small(), 10, c.path()).unwrap();
        assert_eq!(da, db);
        assert_ne!(da, dc);
    }

    #[test]
    fn bad_manifest_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(MANIFEST), "# seed=1\nfile,label\na.xyzb,2\n").unwrap();
        let err = read_manifest(dir.path()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
