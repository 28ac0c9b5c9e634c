//! Dataset directory layout:
//!
//! * `manifest.json`: class names, generator parameters, per-class counts
//!   and one record per item (label, portion, provenance, split, dims,
//!   SHA-256 over pixels and labels).
//! * `images.bin`: magic, format version, item count, then per image its
//!   `u32` height/width/channels followed by little-endian `f32` pixels.

use super::augment::AugmentOp;
use super::generate::GeneratorParams;
use super::image::{Dataset, LabeledImage, Provenance, Split, CHANNELS};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const IMAGE_MAGIC: &[u8; 8] = b"MTLIMGS\0";
pub const MANIFEST_VERSION: u32 = 1;
const BLOB_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const BLOB_FILE: &str = "images.bin";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    generator: Option<GeneratorParams>,
    class_names: Vec<String>,
    class_counts: Vec<usize>,
    blob_sha256: String,
    items: Vec<ItemRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ItemRecord {
    id: usize,
    y: usize,
    z: f64,
    provenance: Provenance,
    split: Split,
    height: usize,
    width: usize,
    sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn item_digest(pixels: &[f32], y: usize, z: f64, provenance: &Provenance, split: Split) -> String {
    let mut h = Sha256::new();
    for p in pixels {
        h.update(p.to_le_bytes());
    }
    h.update((y as u64).to_le_bytes());
    h.update(z.to_bits().to_le_bytes());
    match provenance {
        Provenance::Original => h.update([0u8]),
        Provenance::Augmented { source, op } => {
            h.update([1u8]);
            h.update((*source as u64).to_le_bytes());
            let tag = AugmentOp::ALL.iter().position(|o| o == op).unwrap_or(0) as u8;
            h.update([tag]);
        }
    }
    h.update(split.to_string().as_bytes());
    hex(&h.finalize())
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    blob.extend_from_slice(IMAGE_MAGIC);
    blob.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    blob.extend_from_slice(&(dataset.items.len() as u64).to_le_bytes());
    let mut records = Vec::with_capacity(dataset.items.len());
    for it in &dataset.items {
        for d in [it.height, it.width, CHANNELS] {
            blob.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for p in &it.pixels {
            blob.extend_from_slice(&p.to_le_bytes());
        }
        records.push(ItemRecord {
            id: it.id,
            y: it.y,
            z: it.z,
            provenance: it.provenance,
            split: it.split,
            height: it.height,
            width: it.width,
            sha256: item_digest(&it.pixels, it.y, it.z, &it.provenance, it.split),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        generator: dataset.generator.clone(),
        class_names: dataset.class_names.clone(),
        class_counts: dataset.class_counts(),
        blob_sha256: hex(&Sha256::digest(&blob)),
        items: records,
    };
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("{BLOB_FILE} is truncated")))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }
    let blob = fs::read(dir.join(BLOB_FILE))?;
    if hex(&Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(Error::Checksum(BLOB_FILE.into()));
    }
    let mut r = Reader { buf: &blob, pos: 0 };
    if r.take(8)? != IMAGE_MAGIC {
        return Err(Error::Format(format!("{BLOB_FILE} has a bad magic string")));
    }
    let version = r.u32()?;
    if version != BLOB_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: BLOB_VERSION,
        });
    }
    let count = r.u64()? as usize;
    if count != manifest.items.len() {
        return Err(Error::Format(format!(
            "manifest lists {} items but {BLOB_FILE} holds {count}",
            manifest.items.len()
        )));
    }
    let n_classes = manifest.class_names.len();
    let mut items = Vec::with_capacity(count);
    for rec in manifest.items {
        let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if (h, w, c) != (rec.height, rec.width, CHANNELS) {
            return Err(Error::Format(format!("item {} has inconsistent dimensions", rec.id)));
        }
        let raw = r.take(h * w * c * 4)?;
        let pixels: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if item_digest(&pixels, rec.y, rec.z, &rec.provenance, rec.split) != rec.sha256 {
            return Err(Error::Checksum(format!("item {}", rec.id)));
        }
        if rec.y >= n_classes {
            return Err(Error::LabelOutOfRange {
                label: rec.y,
                n_classes,
            });
        }
        items.push(LabeledImage {
            id: rec.id,
            height: h,
            width: w,
            pixels,
            y: rec.y,
            z: rec.z,
            provenance: rec.provenance,
            split: rec.split,
        });
    }
    if r.pos != blob.len() {
        return Err(Error::Format(format!("{BLOB_FILE} has trailing bytes")));
    }
    let dataset = Dataset {
        class_names: manifest.class_names,
        items,
        generator: manifest.generator,
    };
    if dataset.class_counts() != manifest.class_counts {
        return Err(Error::Format("manifest class counts disagree with items".into()));
    }
    Ok(dataset)
}
