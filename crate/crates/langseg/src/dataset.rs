//! On-disk dataset layout: `manifest.json`, `images/<id>.ppm`, `masks/<id>.pgm`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use langseg_core::synth::{self, Scenario, SegSample};

use crate::error::{self, AppError, Result};
use crate::netpbm;

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub classes: Vec<String>,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the dataset directory.
    pub image: String,
    pub mask: String,
    pub prompt: String,
    pub scenario: String,
    pub seed: u64,
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}

pub fn write_dataset(samples: &[SegSample], dir: &Path) -> Result<DatasetManifest> {
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = format!("images/{i:06}.ppm");
        let mask = format!("masks/{i:06}.pgm");
        netpbm::write_ppm(&dir.join(&image), &s.image)?;
        netpbm::write_pgm(&dir.join(&mask), &s.mask)?;
        entries.push(ManifestEntry {
            image,
            mask,
            prompt: s.prompt.clone(),
            scenario: s.scenario.as_str().to_string(),
            seed: s.seed,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        classes: synth::class_names(),
        samples: entries,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    error::write(&manifest_path(dir), &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(dir);
    let m: DatasetManifest =
        serde_json::from_slice(&error::read(&path)?).map_err(|e| AppError::format(&path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(AppError::format(&path, format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

/// Loads every sample, checking that the class table has `classes` entries and that each
/// mask only uses those ids.
pub fn load_dataset(dir: &Path, classes: usize) -> Result<Vec<SegSample>> {
    let m = read_manifest(dir)?;
    let mpath = manifest_path(dir);
    if m.classes.len() != classes {
        return Err(AppError::format(
            &mpath,
            format!("class table has {} entries, expected {classes}", m.classes.len()),
        ));
    }
    m.samples
        .iter()
        .map(|e| {
            let ipath = dir.join(&e.image);
            let kpath = dir.join(&e.mask);
            let image = netpbm::read_ppm(&ipath)?;
            let mask = netpbm::read_pgm(&kpath)?;
            mask.check_classes(classes)
                .map_err(|err| AppError::format(&kpath, err.to_string()))?;
            let (_, h, w) = image.chw()?;
            if (h, w) != (mask.height(), mask.width()) {
                return Err(AppError::format(
                    &kpath,
                    format!("mask is {}x{}, image is {h}x{w}", mask.height(), mask.width()),
                ));
            }
            let scenario: Scenario = e
                .scenario
                .parse()
                .map_err(|err: langseg_core::Error| AppError::format(&mpath, err.to_string()))?;
            Ok(SegSample {
                image,
                mask,
                prompt: e.prompt.clone(),
                scenario,
                seed: e.seed,
            })
        })
        .collect()
}
