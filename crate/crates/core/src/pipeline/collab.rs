//! Collaboration of two models at the pseudo-label level.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::confidence_order;
use crate::types::{ClassId, ConfidenceStack, PseudoLabeledImage, ThresholdVector};

/// Where each direction of the exchange takes its images from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollabSource {
    /// Branch `j` receives images pseudo-labeled by branch `i`, visiting the
    /// classes where `i` is more confident first.
    #[default]
    Cross,
    /// Literal reading of the listing: each branch re-selects from its own
    /// set, visiting classes ranked by `vct_own - vct_other`.
    Listing,
}

/// Class ids sorted by descending value, ties by ascending id.
pub fn sort_rank(v: &[f32]) -> Vec<ClassId> {
    let mut ids: Vec<ClassId> = (0..v.len()).map(|c| c as ClassId).collect();
    ids.sort_by(|&a, &b| v[b as usize].total_cmp(&v[a as usize]).then(a.cmp(&b)));
    ids
}

/// Per class, the images whose pseudo-labels contain that class, with their
/// image confidences. Lists run in descending confidence, ties by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassImageIndex {
    pub per_class: Vec<Vec<(String, f32)>>,
}

impl ClassImageIndex {
    pub fn images(&self, class: ClassId) -> &[(String, f32)] {
        self.per_class.get(class as usize).map_or(&[], Vec::as_slice)
    }
}

pub fn class_image_stats<'a>(
    set: impl IntoIterator<Item = &'a PseudoLabeledImage>,
    num_classes: usize,
) -> ClassImageIndex {
    let mut images: Vec<&PseudoLabeledImage> = set.into_iter().collect();
    images.sort_by(|a, b| confidence_order(a, b));
    let mut per_class = vec![Vec::new(); num_classes];
    for img in images {
        for c in img.labels().classes_present() {
            if let Some(list) = per_class.get_mut(c as usize) {
                list.push((img.image_id().to_string(), img.image_confidence()));
            }
        }
    }
    ClassImageIndex { per_class }
}

/// `λ·max + (1 − λ)·min` over `confidences`, kept inside `[min, max]`.
/// `None` for an empty list.
pub fn dynamic_threshold(confidences: impl IntoIterator<Item = f32>, lambda: f64) -> Option<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in confidences {
        lo = lo.min(c as f64);
        hi = hi.max(c as f64);
    }
    if lo > hi {
        return None;
    }
    Some((lambda * hi + (1.0 - lambda) * lo).clamp(lo, hi))
}

fn gather(
    index: &ClassImageIndex,
    order: &[ClassId],
    pool: &HashMap<&str, &PseudoLabeledImage>,
    n: usize,
    lambda: f64,
) -> Vec<PseudoLabeledImage> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for &c in order {
        if out.len() >= n {
            break;
        }
        let list = index.images(c);
        let Some(t) = dynamic_threshold(list.iter().map(|(_, v)| *v), lambda) else {
            continue;
        };
        for (id, conf) in list {
            if out.len() >= n {
                break;
            }
            if *conf as f64 > t && seen.insert(id.as_str()) {
                out.push((*pool[id.as_str()]).clone());
            }
        }
    }
    out
}

fn difference(a: &ThresholdVector, b: &ThresholdVector) -> Vec<f32> {
    a.per_class.iter().zip(&b.per_class).map(|(x, y)| x - y).collect()
}

/// Builds the new candidate sets of both branches. Each output holds at most
/// `n` distinct images.
pub fn collaboration_exchange(
    set1: &[PseudoLabeledImage],
    vct1: &ThresholdVector,
    set2: &[PseudoLabeledImage],
    vct2: &ThresholdVector,
    n: usize,
    lambda: f64,
    source: CollabSource,
) -> Result<(Vec<PseudoLabeledImage>, Vec<PseudoLabeledImage>)> {
    if vct1.num_classes() != vct2.num_classes() {
        return Err(Error::shape(format!(
            "threshold vectors have {} and {} classes",
            vct1.num_classes(),
            vct2.num_classes()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("λ", "must lie in [0, 1]"));
    }
    let nc = vct1.num_classes();
    let pool1: HashMap<&str, &PseudoLabeledImage> = set1.iter().map(|i| (i.image_id(), i)).collect();
    let pool2: HashMap<&str, &PseudoLabeledImage> = set2.iter().map(|i| (i.image_id(), i)).collect();
    let s1 = class_image_stats(set1, nc);
    let s2 = class_image_stats(set2, nc);
    let one_over_two = sort_rank(&difference(vct1, vct2));
    let two_over_one = sort_rank(&difference(vct2, vct1));
    let (new1, new2) = match source {
        CollabSource::Cross => (
            gather(&s2, &two_over_one, &pool2, n, lambda),
            gather(&s1, &one_over_two, &pool1, n, lambda),
        ),
        CollabSource::Listing => (
            gather(&s1, &one_over_two, &pool1, n, lambda),
            gather(&s2, &two_over_one, &pool2, n, lambda),
        ),
    };
    for (name, set) in [("branch1", &new1), ("branch2", &new2)] {
        if set.len() < n {
            log::warn!("collaboration produced {} of {n} images for {name}", set.len());
        }
    }
    Ok((new1, new2))
}

/// Elementwise mean of two stacks.
pub fn ensemble_confidence(a: &ConfidenceStack, b: &ConfidenceStack) -> Result<ConfidenceStack> {
    let shape = |s: &ConfidenceStack| (s.num_classes(), s.height(), s.width());
    if shape(a) != shape(b) {
        return Err(Error::shape(format!("ensemble of {:?} and {:?} stacks", shape(a), shape(b))));
    }
    let values = a.values().iter().zip(b.values()).map(|(x, y)| (x + y) * 0.5).collect();
    ConfidenceStack::new(a.width(), a.height(), a.num_classes(), values)
}
