//! Synthetic street scenes with exact labels.
//!
//! Two [`DomainSpec`]s stand in for a synthetic source and a real target:
//! same layout grammar, different class colors, a global color affine and
//! heavier sensor noise on the target side.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::types::{ClassId, DatasetEntry, DatasetSplit, LabelMap, LabelSpace, SplitKind};

pub const ROAD: ClassId = 0;
pub const SIDEWALK: ClassId = 1;
pub const BUILDING: ClassId = 2;
pub const VEGETATION: ClassId = 3;
pub const SKY: ClassId = 4;
pub const PERSON: ClassId = 5;
pub const CAR: ClassId = 6;
pub const POLE: ClassId = 7;

pub fn toy_label_space() -> LabelSpace {
    LabelSpace::new(["road", "sidewalk", "building", "vegetation", "sky", "person", "car", "pole"])
        .expect("valid toy label space")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassColor {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ClassColor {
    const fn new(mean: [f64; 3], std: f64) -> Self {
        ClassColor {
            mean,
            std: [std; 3],
        }
    }
}

/// Inclusive count range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: u32,
    pub max: u32,
}

impl CountRange {
    const fn new(min: u32, max: u32) -> Self {
        CountRange { min, max }
    }

    fn draw(&self, rng: &mut impl Rng) -> u32 {
        rng.random_range(self.min..=self.max.max(self.min))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub width: u32,
    pub height: u32,
    /// One entry per class of [`toy_label_space`].
    pub class_colors: Vec<ClassColor>,
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub noise_sigma: f64,
    /// Horizon row as a fraction of the height, drawn uniformly in range.
    pub horizon: (f64, f64),
    pub buildings: CountRange,
    pub trees: CountRange,
    pub poles: CountRange,
    pub cars: CountRange,
    pub persons: CountRange,
}

impl DomainSpec {
    /// Clean, saturated "rendered" look.
    pub fn default_source() -> Self {
        DomainSpec {
            name: "source".into(),
            width: 64,
            height: 64,
            class_colors: vec![
                ClassColor::new([90.0, 90.0, 95.0], 8.0),
                ClassColor::new([160.0, 140.0, 120.0], 10.0),
                ClassColor::new([130.0, 80.0, 70.0], 14.0),
                ClassColor::new([50.0, 140.0, 45.0], 12.0),
                ClassColor::new([100.0, 170.0, 240.0], 8.0),
                ClassColor::new([210.0, 50.0, 60.0], 14.0),
                ClassColor::new([40.0, 60.0, 170.0], 14.0),
                ClassColor::new([180.0, 180.0, 50.0], 8.0),
            ],
            gain: [1.0; 3],
            bias: [0.0; 3],
            noise_sigma: 4.0,
            horizon: (0.35, 0.5),
            buildings: CountRange::new(2, 5),
            trees: CountRange::new(1, 3),
            poles: CountRange::new(1, 3),
            cars: CountRange::new(1, 3),
            persons: CountRange::new(0, 3),
        }
    }

    /// Washed-out "camera" look: shifted class colors, a global color
    /// affine and stronger noise.
    pub fn default_target() -> Self {
        DomainSpec {
            name: "target".into(),
            class_colors: vec![
                ClassColor::new([105.0, 100.0, 100.0], 10.0),
                ClassColor::new([150.0, 145.0, 135.0], 12.0),
                ClassColor::new([140.0, 105.0, 90.0], 16.0),
                ClassColor::new([75.0, 120.0, 60.0], 14.0),
                ClassColor::new([160.0, 185.0, 220.0], 10.0),
                ClassColor::new([175.0, 75.0, 95.0], 16.0),
                ClassColor::new([65.0, 70.0, 135.0], 16.0),
                ClassColor::new([160.0, 155.0, 85.0], 10.0),
            ],
            gain: [0.85, 0.9, 0.95],
            bias: [30.0, 20.0, 5.0],
            noise_sigma: 9.0,
            ..Self::default_source()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_colors.len() != toy_label_space().num_classes() {
            return Err(Error::config("class_colors", "need one color per toy class"));
        }
        if self
            .class_colors
            .iter()
            .any(|c| c.mean.iter().any(|m| !(0.0..=255.0).contains(m)) || c.std.iter().any(|s| *s < 0.0))
        {
            return Err(Error::config("class_colors", "means must lie in [0, 255], stds >= 0"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", "must be non-negative"));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::config("width", "scenes need at least 8x8 pixels"));
        }
        Ok(())
    }
}

struct Canvas {
    w: i64,
    h: i64,
    labels: Vec<ClassId>,
}

impl Canvas {
    fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, class: ClassId) {
        for y in y0.max(0)..y1.min(self.h) {
            for x in x0.max(0)..x1.min(self.w) {
                self.labels[(y * self.w + x) as usize] = class;
            }
        }
    }

    fn fill_disc(&mut self, cx: f64, cy: f64, r: f64, class: ClassId) {
        for y in 0..self.h {
            for x in 0..self.w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    self.labels[(y * self.w + x) as usize] = class;
                }
            }
        }
    }
}

fn layout(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Vec<ClassId> {
    let (w, h) = (spec.width as i64, spec.height as i64);
    let (wf, hf) = (w as f64, h as f64);
    let mut canvas = Canvas {
        w,
        h,
        labels: vec![SKY; (w * h) as usize],
    };
    let horizon = (rng.random_range(spec.horizon.0..=spec.horizon.1) * hf).round() as i64;

    // ground: vegetation verge, sidewalks either side of a road trapezoid
    let center = wf / 2.0 + rng.random_range(-0.1..0.1) * wf;
    let top_half = rng.random_range(0.03..0.08) * wf;
    let bottom_half = rng.random_range(0.3..0.42) * wf;
    let walk = rng.random_range(0.08..0.16);
    for y in horizon..h {
        let t = (y - horizon) as f64 / (hf - horizon as f64).max(1.0);
        let half = top_half + (bottom_half - top_half) * t;
        let walk_w = half * walk * 2.0 + 1.0;
        for x in 0..w {
            let dx = (x as f64 + 0.5 - center).abs();
            let class = if dx <= half {
                ROAD
            } else if dx <= half + walk_w {
                SIDEWALK
            } else {
                VEGETATION
            };
            canvas.labels[(y * w + x) as usize] = class;
        }
    }

    for _ in 0..spec.buildings.draw(rng) {
        let bw = rng.random_range(0.12..0.3) * wf;
        let x0 = rng.random_range(-0.1..0.95) * wf;
        let top = rng.random_range(0.05..0.8) * horizon as f64;
        canvas.fill_rect(x0 as i64, top as i64, (x0 + bw) as i64, horizon + 1, BUILDING);
    }
    for _ in 0..spec.trees.draw(rng) {
        let side = if rng.random_bool(0.5) { 0.12 } else { 0.88 };
        let cx = (side + rng.random_range(-0.1..0.1)) * wf;
        let r = rng.random_range(0.06..0.13) * wf;
        let cy = horizon as f64 - r * rng.random_range(0.3..1.0);
        canvas.fill_disc(cx, cy, r, VEGETATION);
    }
    for _ in 0..spec.poles.draw(rng) {
        let x = (if rng.random_bool(0.5) { rng.random_range(0.02..0.3) } else { rng.random_range(0.7..0.98) } * wf) as i64;
        let base = rng.random_range(horizon + 2..=(horizon + (h - horizon) / 2).max(horizon + 2));
        let top = (base as f64 - rng.random_range(0.3..0.55) * hf) as i64;
        canvas.fill_rect(x, top, x + 1 + (rng.random_bool(0.3) as i64), base, POLE);
    }
    for _ in 0..spec.cars.draw(rng) {
        let y1 = rng.random_range((horizon + 3)..h) as f64;
        let t = (y1 - horizon as f64) / (hf - horizon as f64);
        let size = 4.0 + 14.0 * t;
        let half = top_half + (bottom_half - top_half) * t;
        let cx = center + rng.random_range(-0.7..0.7) * half;
        canvas.fill_rect(
            (cx - size * 0.8) as i64,
            (y1 - size * 0.7) as i64,
            (cx + size * 0.8) as i64,
            y1 as i64,
            CAR,
        );
    }
    for _ in 0..spec.persons.draw(rng) {
        let y1 = rng.random_range((horizon + 2)..h) as f64;
        let t = (y1 - horizon as f64) / (hf - horizon as f64);
        let height = 4.0 + 12.0 * t;
        let half = top_half + (bottom_half - top_half) * t;
        let offset = half * (1.0 + walk) + 1.0;
        let cx = if rng.random_bool(0.5) { center - offset } else { center + offset };
        let pw = (height * 0.3).max(1.0);
        canvas.fill_rect(
            (cx - pw / 2.0) as i64,
            (y1 - height) as i64,
            (cx + pw / 2.0).ceil() as i64,
            y1 as i64,
            PERSON,
        );
    }
    canvas.labels
}

/// Renders one scene. Identical `(spec, seed)` give identical output.
pub fn generate_scene(spec: &DomainSpec, seed: u64) -> Result<(RgbImage, LabelMap)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = layout(spec, &mut rng);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut img = RgbImage::new(spec.width, spec.height);
    for (i, &class) in labels.iter().enumerate() {
        let color = &spec.class_colors[class as usize];
        let mut px = [0u8; 3];
        for ch in 0..3 {
            let base = color.mean[ch] + color.std[ch] * unit.sample(&mut rng);
            let v = spec.gain[ch] * base + spec.bias[ch] + spec.noise_sigma * unit.sample(&mut rng);
            px[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
        img.put_pixel(i as u32 % spec.width, i as u32 / spec.width, Rgb(px));
    }
    let map = LabelMap::new(spec.width as usize, spec.height as usize, labels)?;
    Ok((img, map))
}

/// Per-scene seed derived from a base seed and the scene index.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.random()
}

/// Writes `count` scenes plus `manifest.json` under `out_dir`. Label maps
/// are written only for labeled splits.
pub fn generate_split(spec: &DomainSpec, count: usize, seed: u64, labeled: bool, out_dir: &Path) -> Result<DatasetSplit> {
    if count == 0 {
        return Err(Error::Invalid("split needs at least one scene".into()));
    }
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let (img, labels) = generate_scene(spec, scene_seed(seed, i))?;
        let id = format!("{}_{i:04}", spec.name);
        let image_path = out_dir.join("images").join(format!("{id}.png"));
        io::save_rgb(&image_path, &img)?;
        let label_path = if labeled {
            let p = out_dir.join("labels").join(format!("{id}.png"));
            io::save_label_map(&p, &labels)?;
            Some(p)
        } else {
            None
        };
        entries.push(DatasetEntry {
            image_id: id,
            image_path,
            label_path,
            sampling_weight: None,
        });
    }
    let split = DatasetSplit {
        name: spec.name.clone(),
        kind: if labeled { SplitKind::Labeled } else { SplitKind::Unlabeled },
        label_space: toy_label_space(),
        entries,
    };
    if labeled {
        io::write_palette(&out_dir.join("labels"), &split.label_space)?;
    }
    io::save_manifest(&out_dir.join("manifest.json"), &split)?;
    Ok(split)
}

/// Pixel count per class over `count` scenes.
pub fn class_histogram(spec: &DomainSpec, count: usize, seed: u64) -> Result<Vec<u64>> {
    let mut hist = vec![0u64; toy_label_space().num_classes()];
    for i in 0..count {
        let (_, labels) = generate_scene(spec, scene_seed(seed, i))?;
        for &v in labels.values() {
            hist[v as usize] += 1;
        }
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_scenes() {
        let spec = DomainSpec::default_target();
        assert_eq!(generate_scene(&spec, 9).unwrap(), generate_scene(&spec, 9).unwrap());
        assert_ne!(generate_scene(&spec, 9).unwrap().0, generate_scene(&spec, 10).unwrap().0);
    }

    #[test]
    fn noiseless_pixels_equal_class_means() {
        let mut spec = DomainSpec::default_source();
        spec.noise_sigma = 0.0;
        for c in &mut spec.class_colors {
            c.std = [0.0; 3];
        }
        let (img, labels) = generate_scene(&spec, 3).unwrap();
        for (i, p) in img.pixels().enumerate() {
            let mean = spec.class_colors[labels.values()[i] as usize].mean;
            assert_eq!(p.0, mean.map(|m| m as u8));
        }
    }

    #[test]
    fn labels_cover_every_pixel() {
        let space = toy_label_space();
        for seed in 0..20 {
            let (_, labels) = generate_scene(&DomainSpec::default_source(), seed).unwrap();
            assert!(labels.values().iter().all(|&v| (v as usize) < space.num_classes()));
        }
    }

    #[test]
    fn all_classes_appear_over_a_split() {
        let hist = class_histogram(&DomainSpec::default_source(), 50, 0).unwrap();
        assert!(hist.iter().all(|&c| c > 0), "{hist:?}");
        assert_eq!(hist, class_histogram(&DomainSpec::default_source(), 50, 0).unwrap());
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut spec = DomainSpec::default_source();
        spec.noise_sigma = -1.0;
        assert!(generate_scene(&spec, 0).is_err());
        let mut spec = DomainSpec::default_source();
        spec.class_colors.pop();
        assert!(spec.validate().is_err());
    }
}
