//! On-disk datasets: one image and one mask FSV1 file per record, indexed by
//! a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsv::{read_volume, write_volume, VolumeFile};
use crate::phantom::PhantomSpec;
use crate::volume::AnnotatedVolume;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub class_id: u8,
    pub patient_id: u32,
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Generator settings, when the data is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomSpec>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn n_classes(&self) -> u8 {
        self.entries.iter().map(|e| e.class_id).max().unwrap_or(0)
    }

    pub fn n_patients(&self) -> u32 {
        self.entries.iter().map(|e| e.patient_id + 1).max().unwrap_or(0)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
    }
}

fn file_names(class_id: u8, patient_id: u32) -> (String, String) {
    let stem = format!("class{class_id}_patient{patient_id:03}");
    (format!("{stem}_image.fsv"), format!("{stem}_mask.fsv"))
}

/// Writes every record and the manifest into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, records: &[AnnotatedVolume], phantom: Option<&PhantomSpec>) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let (image, mask) = file_names(r.class_id, r.patient_id);
        write_volume(dir.join(&image), &VolumeFile::Image(r.volume.clone()))?;
        write_volume(dir.join(&mask), &VolumeFile::Mask(r.mask.clone()))?;
        entries.push(ManifestEntry {
            class_id: r.class_id,
            patient_id: r.patient_id,
            image,
            mask,
        });
    }
    let manifest = Manifest {
        phantom: phantom.cloned(),
        entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn resolve(dir: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

/// Reads the manifest in `dir` and every file it lists.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<AnnotatedVolume>)> {
    let manifest = Manifest::read(dir)?;
    let mut records = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let volume = read_volume(resolve(dir, &e.image))?.into_image()?;
        let mask = read_volume(resolve(dir, &e.mask))?.into_mask()?;
        records.push(AnnotatedVolume::new(e.patient_id, e.class_id, volume, mask)?);
    }
    Ok((manifest, records))
}
