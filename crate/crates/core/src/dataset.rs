//! On-disk source/target datasets.
//!
//! A dataset directory holds:
//!
//! * `dataset.json`: `{domain, height, width, channels, num_classes, count, seed}`
//! * `manifest.json`: array of `{id, file, severity, gt_boxes: [[x1, y1, x2, y2, class]]}`
//! * `images/<id>.bin`: `H * W * C` little-endian `f32` pixels, row-major `H x W x C`
//!
//! The manifest is the only place labels live.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numerics::rng_for;
use crate::scenes::{apply_fog, gen_scene, DomainParams, GtBox, ImageSample};

const SOURCE_STREAM: u64 = 0x5043;
const TARGET_STREAM: u64 = 0x7467;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeverityMode {
    /// Severity uniform on `[0, 1]`.
    #[default]
    Uniform,
    /// Half the images uniform on `[0, 0.2]`, half on `[0.7, 1]`.
    TwoCluster,
}

impl SeverityMode {
    pub fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            SeverityMode::Uniform => rng.gen::<f64>(),
            SeverityMode::TwoCluster => {
                let u = rng.gen::<f64>();
                if rng.gen::<bool>() {
                    0.2 * u
                } else {
                    0.7 + 0.3 * u
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub domain: Domain,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub file: String,
    pub severity: f64,
    pub gt_boxes: Vec<[f64; 5]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.samples
            .iter()
            .map(|s| ManifestEntry {
                id: s.id,
                file: image_file(s.id),
                severity: s.severity,
                gt_boxes: s
                    .boxes
                    .iter()
                    .map(|b| {
                        let [x1, y1, x2, y2] = b.bbox.as_array();
                        [x1, y1, x2, y2, b.class as f64]
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        write_json(&dir.join("dataset.json"), &self.info)?;
        write_json(&dir.join("manifest.json"), &self.manifest())?;
        for s in &self.samples {
            let path = dir.join(image_file(s.id));
            let bytes: Vec<u8> = s
                .pixels
                .iter()
                .flat_map(|&p| (p as f32).to_le_bytes())
                .collect();
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let info: DatasetInfo = read_json(&dir.join("dataset.json"))?;
        let manifest: Vec<ManifestEntry> = read_json(&dir.join("manifest.json"))?;
        let n_px = info.height * info.width * info.channels;
        let samples = manifest
            .into_iter()
            .map(|m| {
                let path = dir.join(&m.file);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                if bytes.len() != 4 * n_px {
                    return Err(Error::shape(
                        path.display().to_string(),
                        format!("{} bytes, expected {}", bytes.len(), 4 * n_px),
                    ));
                }
                let pixels = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect();
                let boxes = m
                    .gt_boxes
                    .iter()
                    .map(|b| GtBox {
                        bbox: BBox::new(b[0], b[1], b[2], b[3]),
                        class: b[4] as usize,
                    })
                    .collect();
                Ok(ImageSample {
                    id: m.id,
                    height: info.height,
                    width: info.width,
                    channels: info.channels,
                    pixels,
                    boxes,
                    severity: m.severity,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if samples.len() != info.count {
            return Err(Error::shape(
                dir.display().to_string(),
                format!(
                    "manifest lists {} images, header says {}",
                    samples.len(),
                    info.count
                ),
            ));
        }
        Ok(Dataset { info, samples })
    }
}

pub fn image_file(id: u64) -> String {
    format!("images/{id:06}.bin")
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Pixels are persisted as `f32`; in-memory samples are rounded the same way
/// so a freshly generated dataset equals its reloaded copy.
fn quantize(mut s: ImageSample) -> ImageSample {
    for p in s.pixels.iter_mut() {
        *p = *p as f32 as f64;
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_source: usize,
    pub n_target: usize,
    pub scene: DomainParams,
    pub severity: SeverityMode,
}

pub fn gen_source(spec: &DatasetSpec) -> Dataset {
    let samples = (0..spec.n_source as u64)
        .into_par_iter()
        .map(|id| {
            let mut rng = rng_for(spec.seed, &[SOURCE_STREAM, id]);
            quantize(gen_scene(id, &mut rng, &spec.scene))
        })
        .collect();
    Dataset {
        info: info_for(spec, Domain::Source, spec.n_source),
        samples,
    }
}

pub fn gen_target(spec: &DatasetSpec) -> Result<Dataset> {
    let samples = (0..spec.n_target as u64)
        .into_par_iter()
        .map(|id| {
            let mut rng = rng_for(spec.seed, &[TARGET_STREAM, id]);
            let clean = gen_scene(id, &mut rng, &spec.scene);
            let severity = spec.severity.draw(&mut rng);
            apply_fog(&clean, severity, &spec.scene.fog, &mut rng).map(quantize)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        info: info_for(spec, Domain::Target, spec.n_target),
        samples,
    })
}

fn info_for(spec: &DatasetSpec, domain: Domain, count: usize) -> DatasetInfo {
    DatasetInfo {
        domain,
        height: spec.scene.height,
        width: spec.scene.width,
        channels: 1,
        num_classes: spec.scene.num_classes,
        count,
        seed: spec.seed,
    }
}

/// Paths of the two dataset directories under a data root.
pub fn dataset_dirs(root: &Path) -> (PathBuf, PathBuf) {
    (root.join("source"), root.join("target"))
}

/// Generates and writes both domains under `root`.
pub fn gen_dataset(spec: &DatasetSpec, root: &Path) -> Result<(Dataset, Dataset)> {
    if spec.n_source == 0 || spec.n_target == 0 {
        return Err(Error::Config {
            key: "data.n_source/n_target".into(),
            msg: "dataset sizes must be positive".into(),
        });
    }
    spec.scene.validate()?;
    let source = gen_source(spec);
    let target = gen_target(spec)?;
    let (sdir, tdir) = dataset_dirs(root);
    source.write(&sdir)?;
    target.write(&tdir)?;
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_target: usize) -> DatasetSpec {
        DatasetSpec {
            seed: 9,
            n_source: 4,
            n_target,
            scene: DomainParams::default(),
            severity: SeverityMode::Uniform,
        }
    }

    #[test]
    fn writes_and_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let (src, tgt) = gen_dataset(&spec(6), dir.path()).unwrap();
        let (sdir, tdir) = dataset_dirs(dir.path());
        assert_eq!(Dataset::read(&sdir).unwrap(), src);
        assert_eq!(Dataset::read(&tdir).unwrap(), tgt);
        assert!(src.samples.iter().all(|s| s.severity == 0.0));
    }

    #[test]
    fn manifest_has_one_row_per_target_image() {
        let dir = tempfile::tempdir().unwrap();
        gen_dataset(&spec(500), dir.path()).unwrap();
        let rows: Vec<ManifestEntry> = read_json(&dir.path().join("target/manifest.json")).unwrap();
        assert_eq!(rows.len(), 500);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.severity)));
    }

    #[test]
    fn rerun_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_dataset(&spec(5), a.path()).unwrap();
        gen_dataset(&spec(5), b.path()).unwrap();
        for rel in [
            "source/manifest.json",
            "target/manifest.json",
            "target/images/000003.bin",
        ] {
            assert_eq!(
                fs::read(a.path().join(rel)).unwrap(),
                fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
    }

    #[test]
    fn mean_uniform_severity_is_one_half() {
        let mut rng = rng_for(77, &[]);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| SeverityMode::Uniform.draw(&mut rng))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() <= 0.01, "{mean}");
    }

    #[test]
    fn two_cluster_avoids_the_middle() {
        let mut rng = rng_for(1, &[]);
        for _ in 0..1000 {
            let s = SeverityMode::TwoCluster.draw(&mut rng);
            assert!(s <= 0.2 || s >= 0.7);
        }
    }

    #[test]
    fn zero_counts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(3);
        s.n_source = 0;
        assert!(gen_dataset(&s, dir.path()).is_err());
    }
}
