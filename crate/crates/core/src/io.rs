//! On-disk formats.
//!
//! - images: 8-bit RGB PNG
//! - label maps: single-channel 8-bit PNG holding raw class ids, 255 = void
//! - float rasters: raw little-endian `f32`, row-major, with a `<file>.json`
//!   header `{shape, order, dtype}`
//! - records: pretty JSON with fixed key order, written atomically

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::PseudoLabelSet;
use crate::types::{BranchTag, DatasetSplit, LabelMap, LabelSpace, PseudoLabeledImage, ThresholdVector, VOID_ID};

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::data(path, e))?;
    Ok(img.into_rgb8())
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    img.save(path).map_err(|e| Error::data(path, e))
}

pub fn load_label_map(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| Error::data(path, e))?;
    let DynamicImage::ImageLuma8(gray) = img else {
        return Err(Error::data(path, "label map must be a single-channel 8-bit PNG"));
    };
    let (w, h) = gray.dimensions();
    LabelMap::new(w as usize, h as usize, gray.into_raw())
}

pub fn save_label_map(path: &Path, map: &LabelMap) -> Result<()> {
    ensure_parent(path)?;
    let img = GrayImage::from_raw(map.width() as u32, map.height() as u32, map.values().to_vec())
        .ok_or_else(|| Error::shape("label map buffer does not match its size"))?;
    img.save(path).map_err(|e| Error::data(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json(value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::data(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterHeader {
    pub shape: Vec<usize>,
    pub order: String,
    pub dtype: String,
}

impl RasterHeader {
    pub fn f32_row_major(shape: Vec<usize>) -> Self {
        RasterHeader {
            shape,
            order: "row-major".into(),
            dtype: "f32le".into(),
        }
    }
}

pub fn raster_header_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn write_f32_raster(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::shape(format!("shape {shape:?} for {} values", data.len())));
    }
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(path, &bytes)?;
    write_json(&raster_header_path(path), &RasterHeader::f32_row_major(shape.to_vec()))
}

pub fn read_f32_raster(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let header: RasterHeader = read_json(&raster_header_path(path))?;
    if header.dtype != "f32le" || header.order != "row-major" {
        return Err(Error::data(
            path,
            format!("unsupported raster {} / {}", header.dtype, header.order),
        ));
    }
    let bytes = fs::read(path).map_err(|e| Error::data(path, e))?;
    let expected = header.shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::data(
            path,
            format!("expected {expected} bytes for shape {:?}, found {}", header.shape, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header.shape, data))
}

/// On-disk form of a [`DatasetSplit`]; paths are relative to the manifest.
#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    #[serde(flatten)]
    split: DatasetSplit,
}

/// Loads a manifest, resolving relative paths against its directory and
/// checking that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<DatasetSplit> {
    let record: ManifestRecord = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut split = record.split;
    for e in &mut split.entries {
        e.image_path = resolve(base, &e.image_path);
        if let Some(l) = &e.label_path {
            e.label_path = Some(resolve(base, l));
        }
        if !e.image_path.exists() {
            return Err(Error::data(&e.image_path, "image file not found"));
        }
        if let Some(l) = &e.label_path {
            if !l.exists() {
                return Err(Error::data(l, "label file not found"));
            }
        }
    }
    split.validate()?;
    Ok(split)
}

pub fn save_manifest(path: &Path, split: &DatasetSplit) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut split = split.clone();
    for e in &mut split.entries {
        e.image_path = relativize(base, &e.image_path);
        e.label_path = e.label_path.as_ref().map(|l| relativize(base, l));
    }
    write_json(path, &ManifestRecord { split })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// `p` relative to `base` when it lies under it, otherwise absolute.
pub fn relativize(base: &Path, p: &Path) -> PathBuf {
    match p.strip_prefix(base) {
        Ok(rel) => rel.to_path_buf(),
        Err(_) => std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()),
    }
}

#[derive(Serialize, Deserialize)]
struct PseudoIndexEntry {
    image_id: String,
    image_confidence: f32,
    source_cycle: u32,
    source_model: BranchTag,
    labels: String,
    confidence: String,
}

#[derive(Serialize, Deserialize)]
struct PseudoIndex {
    thresholds: Option<ThresholdVector>,
    entries: Vec<PseudoIndexEntry>,
}

pub const PSEUDO_INDEX: &str = "index.json";

/// Writes a pseudo-label set: one label PNG and one confidence raster per
/// image plus `index.json`, which is written last.
pub fn save_pseudo_set(dir: &Path, set: &PseudoLabelSet, thresholds: Option<&ThresholdVector>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(set.len());
    for (i, img) in set.iter().enumerate() {
        let labels = format!("{i:05}.png");
        let confidence = format!("{i:05}.conf.f32");
        save_label_map(&dir.join(&labels), img.labels())?;
        let map = img.labels();
        write_f32_raster(
            &dir.join(&confidence),
            &[map.height(), map.width()],
            img.pixel_confidence(),
        )?;
        entries.push(PseudoIndexEntry {
            image_id: img.image_id().to_string(),
            image_confidence: img.image_confidence(),
            source_cycle: img.source_cycle(),
            source_model: img.source_model(),
            labels,
            confidence,
        });
    }
    write_json(
        &dir.join(PSEUDO_INDEX),
        &PseudoIndex {
            thresholds: thresholds.cloned(),
            entries,
        },
    )
}

pub fn load_pseudo_set(dir: &Path) -> Result<(PseudoLabelSet, Option<ThresholdVector>)> {
    let index: PseudoIndex = read_json(&dir.join(PSEUDO_INDEX))?;
    let mut set = PseudoLabelSet::new();
    for e in index.entries {
        let labels = load_label_map(&dir.join(&e.labels))?;
        let conf_path = dir.join(&e.confidence);
        let (shape, conf) = read_f32_raster(&conf_path)?;
        if shape != [labels.height(), labels.width()] {
            return Err(Error::data(&conf_path, "confidence raster does not match label map"));
        }
        let img = PseudoLabeledImage::new(e.image_id, labels, conf, e.source_cycle, e.source_model)?;
        if img.image_confidence().to_bits() != e.image_confidence.to_bits() {
            return Err(Error::data(
                &conf_path,
                format!(
                    "stored image confidence {} differs from recomputed {}",
                    e.image_confidence,
                    img.image_confidence()
                ),
            ));
        }
        set.offer(img);
    }
    Ok((set, index.thresholds))
}


pub const PALETTE: &str = "palette.json";

const COLORS: [[u8; 3]; 19] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [255, 0, 0],
    [0, 0, 142],
    [0, 0, 70],
    [0, 60, 100],
    [0, 80, 100],
    [0, 0, 230],
    [119, 11, 32],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
}

/// Display colors for a label space. Visualization only; label PNGs always
/// hold raw ids.
pub fn palette(space: &LabelSpace) -> Vec<PaletteEntry> {
    let mut out: Vec<PaletteEntry> = space
        .class_names
        .iter()
        .enumerate()
        .map(|(i, name)| PaletteEntry {
            id: i as u8,
            name: name.clone(),
            color: COLORS[i % COLORS.len()],
        })
        .collect();
    out.push(PaletteEntry {
        id: VOID_ID,
        name: "void".into(),
        color: [0, 0, 0],
    });
    out
}

pub fn write_palette(dir: &Path, space: &LabelSpace) -> Result<()> {
    write_json(&dir.join(PALETTE), &palette(space))
}
