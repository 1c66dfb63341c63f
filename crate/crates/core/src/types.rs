//! Domain types shared by every stage.
//!
//! Everything here is an immutable value object once constructed. Rasters are
//! row-major; confidence stacks are class-major (`C × H × W`).

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = u8;

/// Reserved "no label" id. Thresholded-out pixels and ignore regions carry it.
pub const VOID_ID: ClassId = 255;

/// Largest usable class count, so that every id stays below [`VOID_ID`].
pub const MAX_CLASSES: usize = 254;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub class_names: Vec<String>,
    /// Classes averaged by default when reporting mIoU (e.g. a 16-class
    /// setting over a 19-class space).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_subset: Option<Vec<ClassId>>,
}

impl LabelSpace {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let space = LabelSpace {
            class_names: names.into_iter().map(Into::into).collect(),
            eval_subset: None,
        };
        space.validate()?;
        Ok(space)
    }

    pub fn with_eval_subset(mut self, subset: Vec<ClassId>) -> Result<Self> {
        self.eval_subset = Some(subset);
        self.validate()?;
        Ok(self)
    }

    /// The 19 Cityscapes evaluation classes.
    pub fn cityscapes() -> Self {
        LabelSpace {
            class_names: CITYSCAPES_CLASSES.iter().map(|s| s.to_string()).collect(),
            eval_subset: None,
        }
    }

    /// Class ids of the 19/16/13-class Cityscapes evaluation settings. The
    /// 16-class setting drops terrain, truck and train; the 13-class one also
    /// drops wall, fence and pole.
    pub fn cityscapes_setting(classes: usize) -> Option<Vec<ClassId>> {
        let excluded: &[ClassId] = match classes {
            19 => &[],
            16 => &[9, 14, 16],
            13 => &[3, 4, 5, 9, 14, 16],
            _ => return None,
        };
        Some((0..19).filter(|c| !excluded.contains(c)).collect())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn void_id(&self) -> ClassId {
        VOID_ID
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_classes();
        if n == 0 || n > MAX_CLASSES {
            return Err(Error::config(
                "label_space.class_names",
                format!("class count {n} outside [1, {MAX_CLASSES}]"),
            ));
        }
        if let Some(subset) = &self.eval_subset {
            if let Some(bad) = subset.iter().find(|&&c| c as usize >= n) {
                return Err(Error::config(
                    "label_space.eval_subset",
                    format!("class id {bad} is not in [0, {n})"),
                ));
            }
        }
        Ok(())
    }

    pub fn is_valid_label(&self, value: ClassId) -> bool {
        value == VOID_ID || (value as usize) < self.num_classes()
    }
}

const CITYSCAPES_CLASSES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

/// Per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    values: Vec<ClassId>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, values: Vec<ClassId>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!(
                "label map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(LabelMap {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: ClassId) -> Self {
        LabelMap {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[ClassId] {
        &self.values
    }

    pub fn into_values(self) -> Vec<ClassId> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> ClassId {
        self.values[y * self.width + x]
    }

    /// Distinct non-void classes present, ascending.
    pub fn classes_present(&self) -> Vec<ClassId> {
        let mut seen = [false; 256];
        for &v in &self.values {
            seen[v as usize] = true;
        }
        (0..VOID_ID).filter(|&c| seen[c as usize]).collect()
    }

    pub fn count_non_void(&self) -> usize {
        self.values.iter().filter(|&&v| v != VOID_ID).count()
    }
}

/// Pixel position plus the offending value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct InvalidPixel {
    pub x: usize,
    pub y: usize,
    pub value: ClassId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub invalid_count: usize,
    /// First offending pixels in raster order.
    pub samples: Vec<InvalidPixel>,
}

impl ValidationReport {
    pub const MAX_SAMPLES: usize = 16;

    pub fn is_ok(&self) -> bool {
        self.invalid_count == 0
    }
}

pub fn validate_label_map(map: &LabelMap, space: &LabelSpace) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (i, &value) in map.values().iter().enumerate() {
        if !space.is_valid_label(value) {
            report.invalid_count += 1;
            if report.samples.len() < ValidationReport::MAX_SAMPLES {
                report.samples.push(InvalidPixel {
                    x: i % map.width(),
                    y: i / map.width(),
                    value,
                });
            }
        }
    }
    report
}

/// Per-pixel, per-class confidences laid out as `C × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceStack {
    width: usize,
    height: usize,
    num_classes: usize,
    values: Vec<f32>,
}

impl ConfidenceStack {
    pub fn new(width: usize, height: usize, num_classes: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height * num_classes {
            return Err(Error::shape(format!(
                "confidence stack {num_classes}x{height}x{width} needs {} values, got {}",
                width * height * num_classes,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("confidence {bad} outside [0, 1]")));
        }
        Ok(ConfidenceStack {
            width,
            height,
            num_classes,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn channel(&self, class: usize) -> &[f32] {
        let n = self.num_pixels();
        &self.values[class * n..(class + 1) * n]
    }

    pub fn at(&self, class: usize, pixel: usize) -> f32 {
        self.values[class * self.num_pixels() + pixel]
    }

    /// Winning class and its confidence at `pixel`; ties go to the lowest id.
    pub fn argmax(&self, pixel: usize) -> (ClassId, f32) {
        let n = self.num_pixels();
        let mut best = 0;
        let mut best_value = self.values[pixel];
        for c in 1..self.num_classes {
            let v = self.values[c * n + pixel];
            if v > best_value {
                best = c;
                best_value = v;
            }
        }
        (best as ClassId, best_value)
    }

    /// Hard prediction with no thresholding.
    pub fn argmax_map(&self) -> LabelMap {
        let values = (0..self.num_pixels()).map(|p| self.argmax(p).0).collect();
        LabelMap {
            width: self.width,
            height: self.height,
            values,
        }
    }

    /// Largest deviation of a per-pixel sum from 1.
    pub fn max_normalization_error(&self) -> f32 {
        (0..self.num_pixels())
            .map(|p| {
                let sum: f32 = (0..self.num_classes).map(|c| self.at(c, p)).sum();
                (sum - 1.0).abs()
            })
            .fold(0.0, f32::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchTag {
    Branch1,
    Branch2,
    Ensemble,
}

impl BranchTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            BranchTag::Branch1 => "branch1",
            BranchTag::Branch2 => "branch2",
            BranchTag::Ensemble => "ensemble",
        }
    }
}

impl fmt::Display for BranchTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One target image's pseudo-labels, the unit exchanged between models.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabeledImage {
    image_id: String,
    labels: LabelMap,
    pixel_confidence: Vec<f32>,
    image_confidence: f32,
    source_cycle: u32,
    source_model: BranchTag,
}

impl PseudoLabeledImage {
    /// Builds the record and derives the image-level confidence.
    ///
    /// Void pixels must carry confidence 0 and labeled pixels a confidence in
    /// `(0, 1]`.
    pub fn new(
        image_id: impl Into<String>,
        labels: LabelMap,
        pixel_confidence: Vec<f32>,
        source_cycle: u32,
        source_model: BranchTag,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if pixel_confidence.len() != labels.len() {
            return Err(Error::shape(format!(
                "{image_id}: {} confidences for {} labels",
                pixel_confidence.len(),
                labels.len()
            )));
        }
        for (i, (&l, &c)) in labels.values().iter().zip(&pixel_confidence).enumerate() {
            let ok = if l == VOID_ID {
                c == 0.0
            } else {
                c > 0.0 && c <= 1.0
            };
            if !ok {
                return Err(Error::Invalid(format!(
                    "{image_id}: pixel {i} has label {l} with confidence {c}"
                )));
            }
        }
        let image_confidence = mean_labeled_confidence(&labels, &pixel_confidence);
        Ok(PseudoLabeledImage {
            image_id,
            labels,
            pixel_confidence,
            image_confidence,
            source_cycle,
            source_model,
        })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn pixel_confidence(&self) -> &[f32] {
        &self.pixel_confidence
    }

    pub fn image_confidence(&self) -> f32 {
        self.image_confidence
    }

    pub fn source_cycle(&self) -> u32 {
        self.source_cycle
    }

    pub fn source_model(&self) -> BranchTag {
        self.source_model
    }

    pub fn labeled_pixels(&self) -> usize {
        self.labels.count_non_void()
    }

    pub fn into_parts(self) -> (String, LabelMap, Vec<f32>) {
        (self.image_id, self.labels, self.pixel_confidence)
    }
}

/// Mean confidence over non-void pixels; 0 when every pixel is void.
pub fn mean_labeled_confidence(labels: &LabelMap, confidence: &[f32]) -> f32 {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (&l, &c) in labels.values().iter().zip(confidence) {
        if l != VOID_ID {
            sum += c as f64;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64) as f32
    }
}

/// Per-class confidence thresholds of one pseudo-labeling round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector {
    pub per_class: Vec<f32>,
    /// Curriculum fraction the thresholds were computed at.
    pub fraction: f64,
    pub cycle: u32,
}

impl ThresholdVector {
    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn get(&self, class: ClassId) -> f32 {
        self.per_class[class as usize]
    }
}

/// Self-paced curriculum: `p_m`, `p_M`, `Δp`, `C_m`, `C_M`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumParams {
    pub p_min: f64,
    pub p_max: f64,
    pub p_step: f64,
    pub c_min: f32,
    pub c_max: f32,
}

impl CurriculumParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_min) || !(0.0..=1.0).contains(&self.p_max) {
            return Err(Error::config("p_m", "fractions must lie in [0, 1]"));
        }
        if self.p_min > self.p_max {
            return Err(Error::config("p_m", "p_m must not exceed p_M"));
        }
        if !(self.p_step >= 0.0) {
            return Err(Error::config("Δp", "step must be non-negative"));
        }
        if !(0.0 <= self.c_min && self.c_min <= self.c_max && self.c_max <= 1.0) {
            return Err(Error::config("C_m", "need 0 <= C_m <= C_M <= 1"));
        }
        Ok(())
    }
}

/// Source/target mixing: `p_MB` and `p_CM`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixParams {
    pub p_mb: f64,
    pub p_cm: f64,
}

impl MixParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_mb) {
            return Err(Error::config("p_MB", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.p_cm) {
            return Err(Error::config("p_CM", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainParams {
    pub curriculum: CurriculumParams,
    /// Candidate images drawn per cycle.
    pub candidates: usize,
    /// Images kept per cycle.
    pub keep: usize,
    pub k_min: u32,
    pub k_max: u32,
    pub mix: MixParams,
}

impl SelfTrainParams {
    pub fn validate(&self) -> Result<()> {
        self.curriculum.validate()?;
        self.mix.validate()?;
        if self.keep > self.candidates {
            return Err(Error::config("n", "n must not exceed N"));
        }
        if self.k_min >= self.k_max {
            return Err(Error::config("K_m", "need K_m < K_M"));
        }
        Ok(())
    }
}

/// Which predictor pseudo-labels the full target set before the last training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum FinalSelector {
    Ensemble,
    Branch1,
    Branch2,
}

impl TryFrom<u8> for FinalSelector {
    type Error = String;

    fn try_from(value: u8) -> std::result::Result<Self, String> {
        match value {
            0 => Ok(FinalSelector::Ensemble),
            1 => Ok(FinalSelector::Branch1),
            2 => Ok(FinalSelector::Branch2),
            other => Err(format!("w must be 0 (ensemble), 1 or 2, got {other}")),
        }
    }
}

impl From<FinalSelector> for u8 {
    fn from(value: FinalSelector) -> u8 {
        match value {
            FinalSelector::Ensemble => 0,
            FinalSelector::Branch1 => 1,
            FinalSelector::Branch2 => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoTrainParams {
    /// Curriculum of the co-training loop; `Δp`, `C_m` and `C_M` are
    /// normally shared with self-training.
    pub curriculum: CurriculumParams,
    pub cycles: u32,
    pub selector: FinalSelector,
    pub lambda: f64,
}

impl CoTrainParams {
    pub fn validate(&self) -> Result<()> {
        self.curriculum.validate()?;
        if self.cycles < 1 {
            return Err(Error::config("K", "need at least one co-training cycle"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("λ", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Labeled,
    Unlabeled,
    PseudoLabeled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub image_id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_weight: Option<f64>,
}

/// An ordered set of images, with labels for labeled splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: String,
    pub kind: SplitKind,
    pub label_space: LabelSpace,
    pub entries: Vec<DatasetEntry>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        self.label_space.validate()?;
        let mut ids = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(e.image_id.as_str()) {
                return Err(Error::data(
                    &e.image_path,
                    format!("duplicate image id `{}`", e.image_id),
                ));
            }
            match (self.kind, &e.label_path) {
                (SplitKind::Labeled, None) => {
                    return Err(Error::data(&e.image_path, "labeled entry without label"))
                }
                (SplitKind::Unlabeled, Some(_)) => {
                    return Err(Error::data(&e.image_path, "unlabeled entry carries a label"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Same images with labels dropped.
    pub fn as_unlabeled(&self) -> DatasetSplit {
        DatasetSplit {
            name: self.name.clone(),
            kind: SplitKind::Unlabeled,
            label_space: self.label_space.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| DatasetEntry {
                    label_path: None,
                    ..e.clone()
                })
                .collect(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> DatasetSplit {
        DatasetSplit {
            name: self.name.clone(),
            kind: self.kind,
            label_space: self.label_space.clone(),
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
        }
    }
}

/// Reference to a trained model. The weights reference is opaque and only
/// meaningful to the trainer that produced it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHandle {
    pub branch: BranchTag,
    pub session: String,
    pub weights: String,
}

impl ModelHandle {
    pub fn with_branch(&self, branch: BranchTag, session: &str) -> ModelHandle {
        ModelHandle {
            branch,
            session: session.to_string(),
            weights: self.weights.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space19() -> LabelSpace {
        LabelSpace::cityscapes()
    }

    #[test]
    fn validate_accepts_valid_and_void() {
        let map = LabelMap::new(2, 2, vec![0, 3, 18, 255]).unwrap();
        assert!(validate_label_map(&map, &space19()).is_ok());
        let map = LabelMap::new(1, 1, vec![255]).unwrap();
        assert!(validate_label_map(&map, &space19()).is_ok());
    }

    #[test]
    fn validate_reports_out_of_range() {
        let map = LabelMap::new(1, 1, vec![19]).unwrap();
        let report = validate_label_map(&map, &space19());
        assert!(!report.is_ok());
        assert_eq!(
            report.samples,
            vec![InvalidPixel {
                x: 0,
                y: 0,
                value: 19
            }]
        );
    }

    #[test]
    fn validate_caps_samples() {
        let map = LabelMap::new(10, 10, vec![200; 100]).unwrap();
        let report = validate_label_map(&map, &space19());
        assert_eq!(report.invalid_count, 100);
        assert_eq!(report.samples.len(), ValidationReport::MAX_SAMPLES);
        assert_eq!(report.samples[11], InvalidPixel { x: 1, y: 1, value: 200 });
    }

    #[test]
    fn label_space_bounds() {
        assert!(LabelSpace::new(Vec::<String>::new()).is_err());
        assert!(LabelSpace::new((0..255).map(|i| i.to_string())).is_err());
        assert!(LabelSpace::new((0..254).map(|i| i.to_string())).is_ok());
        assert!(LabelSpace::new(["a", "b"]).unwrap().with_eval_subset(vec![2]).is_err());
    }

    #[test]
    fn cityscapes_settings() {
        assert_eq!(LabelSpace::cityscapes_setting(19).unwrap().len(), 19);
        assert_eq!(LabelSpace::cityscapes_setting(16).unwrap().len(), 16);
        assert_eq!(LabelSpace::cityscapes_setting(13).unwrap().len(), 13);
        assert!(LabelSpace::cityscapes_setting(7).is_none());
    }

    #[test]
    fn pseudo_label_confidence_is_mean_of_labeled() {
        let labels = LabelMap::new(2, 2, vec![1, VOID_ID, 0, 1]).unwrap();
        let img =
            PseudoLabeledImage::new("a", labels, vec![0.5, 0.0, 0.75, 1.0], 0, BranchTag::Branch1)
                .unwrap();
        assert_eq!(img.image_confidence(), 0.75);
        assert_eq!(img.labeled_pixels(), 3);
    }

    #[test]
    fn all_void_confidence_is_zero() {
        let labels = LabelMap::filled(3, 1, VOID_ID);
        let img = PseudoLabeledImage::new("a", labels, vec![0.0; 3], 0, BranchTag::Branch1).unwrap();
        assert_eq!(img.image_confidence(), 0.0);
    }

    #[test]
    fn pseudo_label_rejects_confidence_at_void() {
        let labels = LabelMap::new(2, 1, vec![VOID_ID, 0]).unwrap();
        assert!(PseudoLabeledImage::new("a", labels.clone(), vec![0.3, 0.9], 0, BranchTag::Branch1)
            .is_err());
        assert!(PseudoLabeledImage::new("a", labels, vec![0.0, 0.0], 0, BranchTag::Branch1).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest_class() {
        let stack = ConfidenceStack::new(1, 1, 3, vec![0.4, 0.4, 0.2]).unwrap();
        assert_eq!(stack.argmax(0), (0, 0.4));
    }

    #[test]
    fn params_validation() {
        let t = CurriculumParams {
            p_min: 0.6,
            p_max: 0.5,
            p_step: 0.05,
            c_min: 0.5,
            c_max: 0.9,
        };
        assert!(t.validate().is_err());
        let co = CoTrainParams {
            curriculum: CurriculumParams { p_min: 0.5, p_max: 0.6, ..t },
            cycles: 0,
            selector: FinalSelector::Branch1,
            lambda: 0.8,
        };
        assert!(co.validate().is_err());
        assert_eq!(FinalSelector::try_from(1).unwrap(), FinalSelector::Branch1);
        assert!(FinalSelector::try_from(3).is_err());
    }
}
