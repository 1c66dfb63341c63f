//! From model confidences to a curated pseudo-label set.
//!
//! Thresholds are per class: the confidences of every pixel whose argmax is
//! class `c` form the vector `V_c`, and the class threshold is the value
//! that leaves a fraction `p` of `V_c` strictly above it. `p` grows with the
//! cycle index (self-paced curriculum) and the result is clamped into
//! `[C_m, C_M]`.

use std::collections::btree_map::{self, BTreeMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::trainer::TrainerSession;
use crate::types::{
    BranchTag, ConfidenceStack, CurriculumParams, DatasetSplit, LabelMap, ModelHandle,
    PseudoLabeledImage, ThresholdVector, VOID_ID,
};

/// `min(p_m + k·Δp, p_M)`.
pub fn curriculum_fraction(k: u32, t: &CurriculumParams) -> f64 {
    (t.p_min + k as f64 * t.p_step).min(t.p_max)
}

/// How [`ClassConfidenceSampler`] stores per-class confidences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Exact,
    /// Seeded reservoir of at most `capacity` values per class.
    Reservoir { capacity: usize, seed: u64 },
}

impl SampleMode {
    pub const DEFAULT_RESERVOIR: usize = 1 << 20;
}

/// The vectors `V_c`, each sorted descending.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassConfidenceSample {
    per_class: Vec<Vec<f32>>,
}

impl ClassConfidenceSample {
    /// Wraps raw per-class vectors, dropping non-positive values and sorting.
    pub fn from_vectors(mut per_class: Vec<Vec<f32>>) -> Self {
        for v in &mut per_class {
            v.retain(|&x| x > 0.0);
            v.sort_unstable_by(|a, b| b.total_cmp(a));
        }
        ClassConfidenceSample { per_class }
    }

    pub fn from_stacks<'a>(stacks: impl IntoIterator<Item = &'a ConfidenceStack>, num_classes: usize) -> Self {
        let mut sampler = ClassConfidenceSampler::new(num_classes, SampleMode::Exact);
        for s in stacks {
            sampler.add_stack(s);
        }
        sampler.finish()
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn class_values(&self, class: usize) -> &[f32] {
        &self.per_class[class]
    }
}

/// Builds a [`ClassConfidenceSample`] incrementally. Exact-mode partial
/// samplers merge by concatenation.
#[derive(Clone, Debug)]
pub struct ClassConfidenceSampler {
    mode: SampleMode,
    values: Vec<Vec<f32>>,
    seen: Vec<u64>,
    rngs: Vec<ChaCha8Rng>,
}

impl ClassConfidenceSampler {
    pub fn new(num_classes: usize, mode: SampleMode) -> Self {
        let rngs = match mode {
            SampleMode::Exact => Vec::new(),
            SampleMode::Reservoir { seed, .. } => (0..num_classes)
                .map(|c| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(c as u64);
                    rng
                })
                .collect(),
        };
        ClassConfidenceSampler {
            mode,
            values: vec![Vec::new(); num_classes],
            seen: vec![0; num_classes],
            rngs,
        }
    }

    fn push(&mut self, class: usize, value: f32) {
        match self.mode {
            SampleMode::Exact => self.values[class].push(value),
            SampleMode::Reservoir { capacity, .. } => {
                let seen = self.seen[class];
                if (seen as usize) < capacity {
                    self.values[class].push(value);
                } else {
                    let j = self.rngs[class].random_range(0..=seen);
                    if (j as usize) < capacity {
                        self.values[class][j as usize] = value;
                    }
                }
            }
        }
        self.seen[class] += 1;
    }

    /// Records the argmax confidence of every pixel under its argmax class.
    pub fn add_stack(&mut self, stack: &ConfidenceStack) {
        for p in 0..stack.num_pixels() {
            let (c, v) = stack.argmax(p);
            if v > 0.0 {
                self.push(c as usize, v);
            }
        }
    }

    pub fn merge(&mut self, other: ClassConfidenceSampler) -> Result<()> {
        if self.mode != SampleMode::Exact || other.mode != SampleMode::Exact {
            return Err(Error::Invalid("only exact samplers can be merged".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(other.values) {
            dst.extend(src);
        }
        for (dst, src) in self.seen.iter_mut().zip(other.seen) {
            *dst += src;
        }
        Ok(())
    }

    pub fn finish(self) -> ClassConfidenceSample {
        ClassConfidenceSample::from_vectors(self.values)
    }
}

/// Order-statistic threshold before clamping: `V_c[floor(p·|V_c|)]` on the
/// descending vector, index clamped to the last element. `None` for classes
/// with no values.
pub fn raw_class_thresholds(sample: &ClassConfidenceSample, p: f64) -> Vec<Option<f32>> {
    sample
        .per_class
        .iter()
        .map(|v| {
            if v.is_empty() {
                return None;
            }
            let idx = ((p * v.len() as f64).floor() as usize).min(v.len() - 1);
            Some(v[idx])
        })
        .collect()
}

pub fn clamp_threshold(raw: f32, t: &CurriculumParams) -> f32 {
    raw.min(t.c_max).max(t.c_min)
}

pub fn compute_class_thresholds(
    sample: &ClassConfidenceSample,
    p: f64,
    t: &CurriculumParams,
    cycle: u32,
) -> ThresholdVector {
    let per_class = raw_class_thresholds(sample, p)
        .into_iter()
        .map(|raw| raw.map_or(t.c_max, |r| clamp_threshold(r, t)))
        .collect();
    ThresholdVector {
        per_class,
        fraction: p,
        cycle,
    }
}

/// Keeps a pixel's argmax class when its confidence reaches that class's
/// threshold, otherwise marks it void.
pub fn apply_thresholds(
    image_id: &str,
    stack: &ConfidenceStack,
    vct: &ThresholdVector,
    source_cycle: u32,
    source_model: BranchTag,
) -> Result<PseudoLabeledImage> {
    if stack.num_classes() != vct.num_classes() {
        return Err(Error::shape(format!(
            "stack has {} classes, threshold vector {}",
            stack.num_classes(),
            vct.num_classes()
        )));
    }
    let n = stack.num_pixels();
    let mut labels = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    for p in 0..n {
        let (c, v) = stack.argmax(p);
        if v > 0.0 && v >= vct.get(c) {
            labels.push(c);
            confidence.push(v);
        } else {
            labels.push(VOID_ID);
            confidence.push(0.0);
        }
    }
    let labels = LabelMap::new(stack.width(), stack.height(), labels)?;
    PseudoLabeledImage::new(image_id, labels, confidence, source_cycle, source_model)
}

/// Thresholds a batch of predictions with class thresholds computed from
/// the batch itself.
pub fn pseudolabel_stacks(
    image_ids: &[String],
    stacks: &[ConfidenceStack],
    k: u32,
    t: &CurriculumParams,
    source_model: BranchTag,
) -> Result<(Vec<PseudoLabeledImage>, ThresholdVector)> {
    if image_ids.len() != stacks.len() {
        return Err(Error::shape(format!(
            "{} image ids for {} stacks",
            image_ids.len(),
            stacks.len()
        )));
    }
    let num_classes = stacks.first().map_or(0, ConfidenceStack::num_classes);
    let sample = ClassConfidenceSample::from_stacks(stacks, num_classes);
    let vct = compute_class_thresholds(&sample, curriculum_fraction(k, t), t, k);
    let images = image_ids
        .iter()
        .zip(stacks)
        .map(|(id, s)| apply_thresholds(id, s, &vct, k, source_model))
        .collect::<Result<Vec<_>>>()?;
    Ok((images, vct))
}

/// Predicts every image of `images` with `model` and pseudo-labels them at
/// curriculum cycle `k`.
pub fn run_pseudolabel(
    session: &TrainerSession,
    model: &ModelHandle,
    images: &DatasetSplit,
    k: u32,
    t: &CurriculumParams,
) -> Result<(Vec<PseudoLabeledImage>, ThresholdVector)> {
    let stacks = session.predict(model, &images.entries)?;
    let ids: Vec<String> = images.entries.iter().map(|e| e.image_id.clone()).collect();
    pseudolabel_stacks(&ids, &stacks, k, t, model.branch)
}

/// Descending image confidence, ties by ascending image id.
pub fn confidence_order(a: &PseudoLabeledImage, b: &PseudoLabeledImage) -> std::cmp::Ordering {
    b.image_confidence()
        .total_cmp(&a.image_confidence())
        .then_with(|| a.image_id().cmp(b.image_id()))
}

/// The `n` most confident images.
pub fn select_top_n(mut candidates: Vec<PseudoLabeledImage>, n: usize) -> Vec<PseudoLabeledImage> {
    candidates.sort_by(confidence_order);
    candidates.truncate(n);
    candidates
}

/// Pseudo-labeled images keyed by image id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelSet {
    items: BTreeMap<String, PseudoLabeledImage>,
}

impl PseudoLabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&PseudoLabeledImage> {
        self.items.get(image_id)
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.items.contains_key(image_id)
    }

    /// Images in ascending id order.
    pub fn iter(&self) -> btree_map::Values<'_, String, PseudoLabeledImage> {
        self.items.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.keys().map(String::as_str)
    }

    /// Adds `img` unless an entry with at least its confidence exists.
    pub fn offer(&mut self, img: PseudoLabeledImage) {
        match self.items.entry(img.image_id().to_string()) {
            btree_map::Entry::Vacant(slot) => {
                slot.insert(img);
            }
            btree_map::Entry::Occupied(mut slot) => {
                if img.image_confidence() > slot.get().image_confidence() {
                    slot.insert(img);
                }
            }
        }
    }
}

impl FromIterator<PseudoLabeledImage> for PseudoLabelSet {
    fn from_iter<I: IntoIterator<Item = PseudoLabeledImage>>(iter: I) -> Self {
        let mut set = PseudoLabelSet::new();
        for img in iter {
            set.offer(img);
        }
        set
    }
}

impl IntoIterator for PseudoLabelSet {
    type Item = PseudoLabeledImage;
    type IntoIter = btree_map::IntoValues<String, PseudoLabeledImage>;

    fn into_iter(self) -> Self::IntoIter {
        self.items.into_values()
    }
}

/// Union by image id; on collision the higher image confidence wins and an
/// exact tie keeps the previous entry.
pub fn fuse(
    previous: &PseudoLabelSet,
    incoming: impl IntoIterator<Item = PseudoLabeledImage>,
) -> PseudoLabelSet {
    let mut out = previous.clone();
    for img in incoming {
        out.offer(img);
    }
    out
}

/// Fills each image's void pixels from the other image's labeled pixels.
/// Labeled pixels never change, so disagreements survive.
pub fn combine_void(
    a: &PseudoLabeledImage,
    b: &PseudoLabeledImage,
) -> Result<(PseudoLabeledImage, PseudoLabeledImage)> {
    if a.image_id() != b.image_id() {
        return Err(Error::Invalid(format!(
            "cannot combine `{}` with `{}`",
            a.image_id(),
            b.image_id()
        )));
    }
    if a.labels().dims() != b.labels().dims() {
        return Err(Error::shape(format!(
            "{}: {}x{} vs {}x{}",
            a.image_id(),
            a.labels().width(),
            a.labels().height(),
            b.labels().width(),
            b.labels().height()
        )));
    }
    Ok((fill_void(a, b)?, fill_void(b, a)?))
}

fn fill_void(target: &PseudoLabeledImage, donor: &PseudoLabeledImage) -> Result<PseudoLabeledImage> {
    let mut labels = target.labels().values().to_vec();
    let mut conf = target.pixel_confidence().to_vec();
    for (i, (&dl, &dc)) in donor.labels().values().iter().zip(donor.pixel_confidence()).enumerate() {
        if labels[i] == VOID_ID && dl != VOID_ID {
            labels[i] = dl;
            conf[i] = dc;
        }
    }
    let map = LabelMap::new(target.labels().width(), target.labels().height(), labels)?;
    PseudoLabeledImage::new(
        target.image_id(),
        map,
        conf,
        target.source_cycle(),
        target.source_model(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table1() -> CurriculumParams {
        CurriculumParams {
            p_min: 0.5,
            p_max: 0.6,
            p_step: 0.05,
            c_min: 0.5,
            c_max: 0.9,
        }
    }

    fn pli(id: &str, labels: Vec<u8>, conf: Vec<f32>) -> PseudoLabeledImage {
        let map = LabelMap::new(labels.len(), 1, labels).unwrap();
        PseudoLabeledImage::new(id, map, conf, 0, BranchTag::Branch1).unwrap()
    }

    fn uniform(id: &str, c: f32) -> PseudoLabeledImage {
        pli(id, vec![0], vec![c])
    }

    #[test]
    fn curriculum_examples() {
        let t = table1();
        assert_eq!(curriculum_fraction(0, &t), 0.5);
        assert!((curriculum_fraction(1, &t) - 0.55).abs() < 1e-12);
        assert_eq!(curriculum_fraction(2, &t), 0.6);
        assert_eq!(curriculum_fraction(10, &t), 0.6);
    }

    #[test]
    fn threshold_example_and_clamps() {
        let sample = ClassConfidenceSample::from_vectors(vec![vec![0.6, 0.9, 0.7, 0.8], vec![], vec![0.95], vec![0.3]]);
        let raw = raw_class_thresholds(&sample, 0.5);
        assert_eq!(raw, vec![Some(0.7), None, Some(0.95), Some(0.3)]);
        let vct = compute_class_thresholds(&sample, 0.5, &table1(), 3);
        assert_eq!(vct.per_class, vec![0.7, 0.9, 0.9, 0.5]);
        assert_eq!(vct.cycle, 3);
    }

    #[test]
    fn threshold_index_clamped_at_p_one() {
        let sample = ClassConfidenceSample::from_vectors(vec![vec![0.9, 0.8]]);
        assert_eq!(raw_class_thresholds(&sample, 1.0), vec![Some(0.8)]);
    }

    #[test]
    fn apply_thresholds_examples() {
        let vct = ThresholdVector {
            per_class: vec![0.5, 0.5],
            fraction: 0.5,
            cycle: 0,
        };
        // two pixels: (0.2, 0.8) and (0.4, 0.45) as class-major values.
        let stack = ConfidenceStack::new(2, 1, 2, vec![0.2, 0.4, 0.8, 0.45]).unwrap();
        let out = apply_thresholds("x", &stack, &vct, 0, BranchTag::Branch1).unwrap();
        assert_eq!(out.labels().values(), &[1, VOID_ID]);
        assert_eq!(out.pixel_confidence(), &[0.8, 0.0]);
        assert_eq!(out.image_confidence(), 0.8);
    }

    #[test]
    fn acceptance_is_inclusive() {
        let vct = ThresholdVector {
            per_class: vec![0.9, 0.9],
            fraction: 0.5,
            cycle: 0,
        };
        let stack = ConfidenceStack::new(1, 1, 2, vec![0.9, 0.1]).unwrap();
        let out = apply_thresholds("x", &stack, &vct, 0, BranchTag::Branch1).unwrap();
        assert_eq!(out.labels().values(), &[0]);
    }

    #[test]
    fn sampler_uses_argmax_only() {
        let stack = ConfidenceStack::new(2, 1, 2, vec![0.7, 0.4, 0.3, 0.6]).unwrap();
        let sample = ClassConfidenceSample::from_stacks([&stack], 2);
        assert_eq!(sample.class_values(0), &[0.7]);
        assert_eq!(sample.class_values(1), &[0.6]);
    }

    #[test]
    fn reservoir_caps_and_is_seeded() {
        let values: Vec<f32> = (0..1000).map(|i| (i as f32 + 1.0) / 1000.0).collect();
        let mut data = values.clone();
        data.extend(values.iter().map(|v| 1.0 - v));
        let stack = ConfidenceStack::new(1000, 1, 2, data).unwrap();
        let run = |seed| {
            let mut s = ClassConfidenceSampler::new(2, SampleMode::Reservoir { capacity: 64, seed });
            s.add_stack(&stack);
            s.finish()
        };
        let a = run(7);
        assert_eq!(a.class_values(0).len() + a.class_values(1).len(), 128);
        assert_eq!(a, run(7));
        assert_ne!(a, run(8));
    }

    #[test]
    fn select_top_n_examples() {
        let c = vec![uniform("C", 0.5), uniform("A", 0.9), uniform("B", 0.7)];
        let top: Vec<_> = select_top_n(c.clone(), 2).iter().map(|i| i.image_id().to_string()).collect();
        assert_eq!(top, vec!["A", "B"]);
        assert!(select_top_n(c.clone(), 0).is_empty());
        assert_eq!(select_top_n(c, 10).len(), 3);
    }

    #[test]
    fn top_n_ties_by_id() {
        let c = vec![uniform("b", 0.5), uniform("a", 0.5), uniform("c", 0.5)];
        let top: Vec<_> = select_top_n(c, 2).iter().map(|i| i.image_id().to_string()).collect();
        assert_eq!(top, vec!["a", "b"]);
    }

    #[test]
    fn fuse_examples() {
        let s: PseudoLabelSet = [uniform("a", 0.6), uniform("b", 0.3)].into_iter().collect();
        assert_eq!(fuse(&s, s.clone()), s);
        let fused = fuse(&s, [uniform("a", 0.8), uniform("z", 0.1)]);
        assert_eq!(fused.len(), 3);
        assert_eq!(fused.get("a").unwrap().image_confidence(), 0.8);
        let kept = fuse(&fused, [uniform("a", 0.6)]);
        assert_eq!(kept.get("a").unwrap().image_confidence(), 0.8);
    }

    #[test]
    fn fuse_tie_keeps_previous() {
        let prev: PseudoLabelSet = [pli("a", vec![0, 1], vec![0.5, 0.7])].into_iter().collect();
        let incoming = pli("a", vec![1, 0], vec![0.7, 0.5]);
        let fused = fuse(&prev, [incoming]);
        assert_eq!(fused.get("a").unwrap().labels().values(), &[0, 1]);
    }

    #[test]
    fn combine_void_examples() {
        let a = pli("x", vec![VOID_ID, 3], vec![0.0, 0.9]);
        let b = pli("x", vec![2, VOID_ID], vec![0.8, 0.0]);
        let (a2, b2) = combine_void(&a, &b).unwrap();
        assert_eq!(a2.labels().values(), &[2, 3]);
        assert_eq!(b2.labels().values(), &[2, 3]);
        assert_eq!(a2.pixel_confidence(), &[0.8, 0.9]);
        assert!((a2.image_confidence() - 0.85).abs() < 1e-6);

        let a = pli("x", vec![1], vec![0.9]);
        let b = pli("x", vec![2], vec![0.6]);
        let (a2, b2) = combine_void(&a, &b).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn combine_void_rejects_mismatch() {
        assert!(combine_void(&uniform("x", 0.5), &uniform("y", 0.5)).is_err());
        let wide = pli("x", vec![0, 0], vec![0.5, 0.5]);
        assert!(combine_void(&uniform("x", 0.5), &wide).is_err());
    }
}
