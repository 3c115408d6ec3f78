//! Sample files on disk and dataset directories.
//!
//! A dataset directory holds `manifest.csv` and one sample file per slice
//! at `<domain>/<split>/scene-<id>.sifa`.

use std::fs;
use std::path::Path;

use sifa_core::codec::{decode_sample, encode_sample, format_manifest, parse_manifest, ManifestRecord, Split};
use sifa_core::data::Dataset;
use sifa_core::{DomainTag, Sample};

use crate::error::{Error, IoContext, Result};

pub const MANIFEST: &str = "manifest.csv";

pub fn save_sample(path: &Path, sample: &Sample) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(path, encode_sample(sample)).at(path)
}

pub fn load_sample(path: &Path, classes: usize) -> Result<Sample> {
    let bytes = fs::read(path).at(path)?;
    decode_sample(&bytes, classes).map_err(|e| Error::parse(path, e.to_string()))
}

/// Writes the given datasets under `dir` and a manifest listing them all.
pub fn write_datasets(dir: &Path, sets: &[&Dataset]) -> Result<Vec<ManifestRecord>> {
    let mut records = Vec::new();
    for ds in sets {
        for (sample, scene) in ds.samples.iter().zip(&ds.scenes) {
            let rel = format!("{}/{}/scene-{scene:05}.sifa", ds.domain, ds.split);
            save_sample(&dir.join(&rel), sample)?;
            records.push(ManifestRecord { path: rel, domain: ds.domain, split: ds.split });
        }
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, format_manifest(&records)).at(&path)?;
    Ok(records)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).at(&path)?;
    parse_manifest(&text).map_err(|e| Error::parse(&path, e.to_string()))
}

/// Loads every manifest entry of one domain and split, in manifest order.
pub fn load_dataset(dir: &Path, domain: DomainTag, split: Split, classes: usize) -> Result<Dataset> {
    let mut ds = Dataset { domain, split, samples: Vec::new(), scenes: Vec::new() };
    for rec in read_manifest(dir)?.into_iter().filter(|r| r.domain == domain && r.split == split) {
        let sample = load_sample(&dir.join(&rec.path), classes)?;
        if sample.image.domain() != domain {
            return Err(Error::parse(
                dir.join(&rec.path),
                format!("file is tagged {} but listed as {domain}", sample.image.domain()),
            ));
        }
        let scene = scene_id(&rec.path).unwrap_or(ds.samples.len());
        ds.samples.push(sample);
        ds.scenes.push(scene);
    }
    if ds.samples.is_empty() {
        return Err(Error::parse(dir.join(MANIFEST), format!("no {domain} {split} samples listed")));
    }
    Ok(ds)
}

fn scene_id(rel: &str) -> Option<usize> {
    Path::new(rel).file_stem()?.to_str()?.strip_prefix("scene-")?.parse().ok()
}
