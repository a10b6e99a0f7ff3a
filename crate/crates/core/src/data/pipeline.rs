//! Manifest-level drivers that write derived images to disk.
//!
//! Records are processed in parallel; each record draws from its own random
//! stream keyed by its manifest index, and results are merged in manifest
//! order, so the output never depends on scheduling.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::{Layout, Manifest, SampleRecord};
use super::transform::{self, AugmentConfig};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::rng::{self, StreamRng};

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fsutil::create_dir_all(dir)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Directory name for images derived from `path`: the file stem plus a short
/// digest of the full path, so equal stems in different folders stay distinct.
pub fn parent_key(path: &Path) -> String {
    let digest = Sha256::digest(path.to_string_lossy().as_bytes());
    let hex: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    format!("{stem}-{hex}")
}

/// Applies `derive` to every record's image and writes the results under
/// `<out>/images/<parent_key>/<tag>.png`. Derived records inherit every label
/// of their parent.
fn derive_images<F>(manifest: &Manifest, out: &Path, stage: &str, seed: u64, derive: F) -> Result<Manifest>
where
    F: Fn(&RgbImage, &mut StreamRng) -> Result<Vec<(String, RgbImage)>> + Sync,
{
    let images_dir = out.join("images");
    let per_record: Vec<Vec<SampleRecord>> = manifest
        .records
        .par_iter()
        .enumerate()
        .map(|(i, record)| {
            let img = load_rgb(&record.path)?;
            let mut rng = rng::item_stream(seed, stage, i as u64);
            let outputs = derive(&img, &mut rng).map_err(|e| Error::Data(format!("{}: {e}", record.path.display())))?;
            let dir = images_dir.join(parent_key(&record.path));
            outputs
                .into_iter()
                .map(|(tag, img)| {
                    let path: PathBuf = dir.join(format!("{tag}.png"));
                    save_png(&img, &path)?;
                    Ok(SampleRecord {
                        path,
                        ..record.clone()
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(manifest.derive(per_record.into_iter().flatten().collect(), stage, Some(seed), Layout::Derived))
}

/// Writes the original plus `outputs_per_input - 1` augmented copies of every image.
pub fn augment_manifest(manifest: &Manifest, config: &AugmentConfig, seed: u64, out: &Path) -> Result<Manifest> {
    config.validate()?;
    let width = (config.outputs_per_input - 1).to_string().len().max(2);
    derive_images(manifest, out, "augment", seed, |img, rng| {
        Ok(transform::augment(img, config, rng)
            .into_iter()
            .enumerate()
            .map(|(k, im)| (format!("aug{k:0width$}"), im))
            .collect())
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// Bilinear resize of the whole image.
    #[default]
    Resize,
    /// One centred crop.
    CenterPatch,
    /// `count` crops at uniformly random positions.
    RandomPatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub mode: PatchMode,
    pub size: u32,
    pub count: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            mode: PatchMode::Resize,
            size: 128,
            count: 200,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if self.mode == PatchMode::RandomPatch && self.count == 0 {
            return Err(Error::Config("random patch count must be positive".into()));
        }
        Ok(())
    }
}

pub fn patch_manifest(manifest: &Manifest, config: &PatchConfig, seed: u64, out: &Path) -> Result<Manifest> {
    config.validate()?;
    let size = config.size;
    derive_images(manifest, out, "patch", seed, |img, rng| match config.mode {
        PatchMode::Resize => Ok(vec![("resize".into(), transform::resize(img, size, size))]),
        PatchMode::CenterPatch => Ok(vec![("center".into(), transform::center_patch(img, size)?)]),
        PatchMode::RandomPatch => {
            let width = (config.count - 1).to_string().len().max(3);
            Ok(transform::random_patches(img, config.count, size, rng)?
                .into_iter()
                .enumerate()
                .map(|(k, p)| (format!("p{k:0width$}"), p))
                .collect())
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{ClassLabel, DatasetId, Split};
    use image::Rgb;

    fn fixture(dir: &Path, n: usize, w: u32, h: u32) -> Manifest {
        let records = (0..n)
            .map(|i| {
                let path = dir.join(format!("src/Benign/img{i}.png"));
                let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 + i as u32) as u8, (y * 5) as u8, 3]));
                save_png(&img, &path).unwrap();
                SampleRecord {
                    path,
                    patient_id: String::new(),
                    magnification: None,
                    class: ClassLabel::Benign,
                    subclass: None,
                    split: if i % 2 == 0 { Split::Train } else { Split::Test },
                }
            })
            .collect();
        Manifest::new(DatasetId::Challenge2015, records)
    }

    #[test]
    fn augmentation_keeps_labels_and_parent() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 3, 9, 7);
        let out = augment_manifest(&m, &AugmentConfig::default(), 5, &dir.path().join("aug")).unwrap();
        assert_eq!(out.records.len(), 63);
        for (k, r) in out.records.iter().enumerate() {
            let src = &m.records[k / 21];
            assert_eq!(r.split, src.split);
            assert_eq!(out.parent_of(r), parent_key(&src.path));
        }
        let first = load_rgb(&out.records[0].path).unwrap();
        assert_eq!(first, load_rgb(&m.records[0].path).unwrap());
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 2, 10, 10);
        let cfg = AugmentConfig {
            outputs_per_input: 4,
            ..AugmentConfig::default()
        };
        let a = augment_manifest(&m, &cfg, 1, &dir.path().join("a")).unwrap();
        let b = augment_manifest(&m, &cfg, 1, &dir.path().join("b")).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(std::fs::read(&ra.path).unwrap(), std::fs::read(&rb.path).unwrap());
        }
    }

    #[test]
    fn random_patches_per_image() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 2, 20, 18);
        let cfg = PatchConfig {
            mode: PatchMode::RandomPatch,
            size: 16,
            count: 200,
        };
        let out = patch_manifest(&m, &cfg, 2, &dir.path().join("p")).unwrap();
        assert_eq!(out.records.len(), 400);
    }

    #[test]
    fn undersized_image_error_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 1, 10, 10);
        let cfg = PatchConfig {
            mode: PatchMode::CenterPatch,
            size: 128,
            count: 1,
        };
        let err = patch_manifest(&m, &cfg, 2, &dir.path().join("p")).unwrap_err();
        assert!(err.to_string().contains("img0.png"), "{err}");
    }
}
