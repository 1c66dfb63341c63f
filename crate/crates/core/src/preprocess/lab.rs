//! CIE L*a*b* conversion (sRGB, D65) and Reinhard-style statistics transfer.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::types::{DatasetEntry, DatasetSplit};

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

// D65 white taken as the image of sRGB white under the matrix, so that
// (255, 255, 255) lands exactly on a = b = 0.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > EPSILON {
        t
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

fn mul(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// sRGB in `[0, 255]` to `(L, a, b)`.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| srgb_to_linear(c / 255.0));
    let xyz = mul(&RGB_TO_XYZ, lin);
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse of [`rgb_to_lab`], clipped to `[0, 255]`.
pub fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        lab_f_inv(fx) * WHITE[0],
        lab_f_inv(fy) * WHITE[1],
        lab_f_inv(fz) * WHITE[2],
    ];
    mul(&XYZ_TO_RGB, xyz).map(|c| (linear_to_srgb(c.max(0.0)) * 255.0).clamp(0.0, 255.0))
}

/// Float LAB image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabRaster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl LabRaster {
    pub fn from_rgb(img: &RgbImage) -> Self {
        LabRaster {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img
                .pixels()
                .map(|p| rgb_to_lab([p[0] as f64, p[1] as f64, p[2] as f64]))
                .collect(),
        }
    }

    /// Back to 8-bit sRGB with clipping and rounding.
    pub fn to_rgb(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for (dst, lab) in out.pixels_mut().zip(&self.pixels) {
            let rgb = lab_to_rgb(*lab);
            dst.0 = rgb.map(|c| c.round() as u8);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Number of images the statistics were measured on.
    pub sample_size: usize,
}

/// Mergeable partial sums behind [`LabStats`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LabAccumulator {
    pixels: u64,
    images: usize,
    sum: [f64; 3],
    sum_sq: [f64; 3],
}

impl LabAccumulator {
    pub fn add(&mut self, raster: &LabRaster) {
        for p in &raster.pixels {
            for ch in 0..3 {
                self.sum[ch] += p[ch];
                self.sum_sq[ch] += p[ch] * p[ch];
            }
        }
        self.pixels += raster.pixels.len() as u64;
        self.images += 1;
    }

    pub fn merge(&mut self, other: &LabAccumulator) {
        self.pixels += other.pixels;
        self.images += other.images;
        for ch in 0..3 {
            self.sum[ch] += other.sum[ch];
            self.sum_sq[ch] += other.sum_sq[ch];
        }
    }

    pub fn finish(&self) -> Option<LabStats> {
        if self.pixels == 0 {
            return None;
        }
        let n = self.pixels as f64;
        let mean = self.sum.map(|s| s / n);
        let mut std = [0.0; 3];
        for ch in 0..3 {
            std[ch] = (self.sum_sq[ch] / n - mean[ch] * mean[ch]).max(0.0).sqrt();
        }
        Some(LabStats {
            mean,
            std,
            sample_size: self.images,
        })
    }
}

/// Seeded choice of at most `sample_size` entries, in split order.
pub fn sample_entries(split: &DatasetSplit, sample_size: usize, seed: u64) -> Vec<&DatasetEntry> {
    let n = split.entries.len();
    if sample_size >= n {
        return split.entries.iter().collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, sample_size).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| &split.entries[i]).collect()
}

/// Pooled per-pixel LAB statistics over a seeded image sample.
pub fn dataset_lab_stats(split: &DatasetSplit, sample_size: usize, seed: u64) -> Result<LabStats> {
    if split.is_empty() {
        return Err(Error::Invalid(format!("split `{}` is empty", split.name)));
    }
    let mut acc = LabAccumulator::default();
    for entry in sample_entries(split, sample_size, seed) {
        acc.add(&LabRaster::from_rgb(&io::load_rgb(&entry.image_path)?));
    }
    acc.finish()
        .ok_or_else(|| Error::Invalid(format!("split `{}` has no pixels", split.name)))
}

/// Maps each channel from `src` statistics onto `tgt` statistics. A channel
/// with zero source deviation is set to the target mean.
pub fn lab_align_raster(raster: &LabRaster, src: &LabStats, tgt: &LabStats) -> LabRaster {
    let map = |x: f64, ch: usize| {
        if src.std[ch] > 0.0 {
            (x - src.mean[ch]) / src.std[ch] * tgt.std[ch] + tgt.mean[ch]
        } else {
            tgt.mean[ch]
        }
    };
    LabRaster {
        width: raster.width,
        height: raster.height,
        pixels: raster
            .pixels
            .iter()
            .map(|p| [map(p[0], 0), map(p[1], 1), map(p[2], 2)])
            .collect(),
    }
}

pub fn lab_align_image(img: &RgbImage, src: &LabStats, tgt: &LabStats) -> RgbImage {
    lab_align_raster(&LabRaster::from_rgb(img), src, tgt).to_rgb()
}

/// Aligns every image of `split` and writes the results as PNGs under
/// `out_dir`. Returns the split pointing at the new images; labels are
/// referenced in place.
pub fn align_split(
    split: &DatasetSplit,
    src: &LabStats,
    tgt: &LabStats,
    out_dir: &Path,
) -> Result<DatasetSplit> {
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(split.len());
    for (i, entry) in split.entries.iter().enumerate() {
        let img = io::load_rgb(&entry.image_path)?;
        let aligned = lab_align_image(&img, src, tgt);
        let path: PathBuf = out_dir.join(format!("{i:05}.png"));
        io::save_rgb(&path, &aligned)?;
        entries.push(DatasetEntry {
            image_path: path,
            ..entry.clone()
        });
    }
    Ok(DatasetSplit {
        name: format!("{}-lab", split.name),
        kind: split.kind,
        label_space: split.label_space.clone(),
        entries,
    })
}

/// Stats sidecar written next to an aligned split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub source: LabStats,
    pub target: LabStats,
}

pub const ALIGNMENT_RECORD: &str = "lab_stats.json";

/// Measures both splits on a seeded sample, aligns `source` into
/// `out_dir/images` and writes `out_dir/manifest.json` plus the stats
/// sidecar. An existing manifest in `out_dir` is loaded instead.
pub fn align_to_target(
    source: &DatasetSplit,
    target: &DatasetSplit,
    sample_size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<(DatasetSplit, AlignmentRecord)> {
    let manifest = out_dir.join("manifest.json");
    let sidecar = out_dir.join(ALIGNMENT_RECORD);
    if manifest.exists() && sidecar.exists() {
        return Ok((io::load_manifest(&manifest)?, io::read_json(&sidecar)?));
    }
    let record = AlignmentRecord {
        source: dataset_lab_stats(source, sample_size, seed)?,
        target: dataset_lab_stats(target, sample_size, seed)?,
    };
    let aligned = align_split(source, &record.source, &record.target, &out_dir.join("images"))?;
    io::write_json(&sidecar, &record)?;
    io::save_manifest(&manifest, &aligned)?;
    Ok((io::load_manifest(&manifest)?, record))
}
