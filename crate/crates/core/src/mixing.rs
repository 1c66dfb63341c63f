//! Training-batch composition.
//!
//! A minibatch of `N_MB` samples holds `round(p_MB · N_MB)` pseudo-labeled
//! target images and the rest source images. When collage is on, each target
//! image receives the pixels and labels of the least confident classes
//! (by threshold value) of a source donor.

use std::collections::HashMap;
use std::sync::Arc;

use image::RgbImage;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::preprocess::SamplingWeights;
use crate::types::{ClassId, DatasetSplit, LabelMap, MixParams, PseudoLabeledImage, ThresholdVector, VOID_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleOrigin {
    Source,
    Target,
    CollagedTarget,
}

/// One training image with per-pixel labels and loss weights. Void pixels
/// carry weight 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub image_id: String,
    pub image: Arc<RgbImage>,
    pub labels: LabelMap,
    pub weights: Vec<f32>,
    pub origin: SampleOrigin,
    /// Source image pasted onto a collaged target.
    pub donor_id: Option<String>,
}

/// A labeled source image held in memory.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image_id: String,
    pub image: Arc<RgbImage>,
    pub labels: Arc<LabelMap>,
}

impl LabeledImage {
    pub fn to_sample(&self) -> TrainingSample {
        let weights = self
            .labels
            .values()
            .iter()
            .map(|&l| if l == VOID_ID { 0.0 } else { 1.0 })
            .collect();
        TrainingSample {
            image_id: self.image_id.clone(),
            image: Arc::clone(&self.image),
            labels: (*self.labels).clone(),
            weights,
            origin: SampleOrigin::Source,
            donor_id: None,
        }
    }
}

/// The labeled source domain, optionally with class-balanced draw weights.
#[derive(Clone, Debug)]
pub struct SourcePool {
    images: Vec<LabeledImage>,
    sampler: Option<WeightedIndex<f64>>,
}

impl SourcePool {
    pub fn new(images: Vec<LabeledImage>) -> Self {
        SourcePool { images, sampler: None }
    }

    pub fn load(split: &DatasetSplit) -> Result<Self> {
        let mut images = Vec::with_capacity(split.len());
        for e in &split.entries {
            let label_path = e
                .label_path
                .as_ref()
                .ok_or_else(|| Error::data(&e.image_path, "source entry without label"))?;
            let image = io::load_rgb(&e.image_path)?;
            let labels = io::load_label_map(label_path)?;
            if (image.width() as usize, image.height() as usize) != labels.dims() {
                return Err(Error::data(label_path, "label map size differs from image"));
            }
            images.push(LabeledImage {
                image_id: e.image_id.clone(),
                image: Arc::new(image),
                labels: Arc::new(labels),
            });
        }
        Ok(SourcePool::new(images))
    }

    /// Draws source images proportionally to `weights` instead of uniformly.
    pub fn with_weights(mut self, weights: &SamplingWeights) -> Result<Self> {
        let w: Vec<f64> = self
            .images
            .iter()
            .map(|img| {
                weights
                    .get(&img.image_id)
                    .ok_or_else(|| Error::Invalid(format!("no sampling weight for `{}`", img.image_id)))
            })
            .collect::<Result<_>>()?;
        self.sampler = Some(WeightedIndex::new(w).map_err(|e| Error::Invalid(e.to_string()))?);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[LabeledImage] {
        &self.images
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> &LabeledImage {
        let i = match &self.sampler {
            Some(w) => w.sample(rng),
            None => rng.random_range(0..self.images.len()),
        };
        &self.images[i]
    }
}

/// Decoded target images by image id.
#[derive(Clone, Debug, Default)]
pub struct TargetImages {
    images: HashMap<String, Arc<RgbImage>>,
}

impl TargetImages {
    pub fn load(split: &DatasetSplit) -> Result<Self> {
        let mut images = HashMap::with_capacity(split.len());
        for e in &split.entries {
            images.insert(e.image_id.clone(), Arc::new(io::load_rgb(&e.image_path)?));
        }
        Ok(TargetImages { images })
    }

    pub fn insert(&mut self, image_id: impl Into<String>, image: RgbImage) {
        self.images.insert(image_id.into(), Arc::new(image));
    }

    pub fn get(&self, image_id: &str) -> Result<&Arc<RgbImage>> {
        self.images
            .get(image_id)
            .ok_or_else(|| Error::Invalid(format!("no target image `{image_id}`")))
    }
}

/// `round(p_MB · N_MB)` with halves rounded up.
pub fn target_count(n_mb: usize, p_mb: f64) -> usize {
    ((p_mb * n_mb as f64) + 0.5 + 1e-9).floor() as usize
}

/// Source classes selected for pasting: the present classes ordered by
/// ascending threshold (ties by class id), first `ceil(p_CM · m)` of them.
pub fn collage_classes(donor: &LabelMap, vct: &ThresholdVector, p_cm: f64) -> Vec<ClassId> {
    let mut present = donor.classes_present();
    present.sort_by(|&a, &b| vct.get(a).total_cmp(&vct.get(b)).then(a.cmp(&b)));
    let take = ((p_cm * present.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    present.truncate(take);
    present
}

/// Pastes the selected donor classes onto a pseudo-labeled target, at both
/// the image and the label level. Pasted pixels get weight 1.
pub fn classmix_collage(
    donor: &LabeledImage,
    target: &PseudoLabeledImage,
    target_image: &RgbImage,
    vct: &ThresholdVector,
    p_cm: f64,
) -> Result<TrainingSample> {
    let dims = target.labels().dims();
    let image_dims = (target_image.width() as usize, target_image.height() as usize);
    if donor.labels.dims() != dims || image_dims != dims || donor.image.dimensions() != target_image.dimensions() {
        return Err(Error::shape(format!(
            "collage of `{}` ({}x{}) onto `{}` ({}x{})",
            donor.image_id,
            donor.labels.width(),
            donor.labels.height(),
            target.image_id(),
            dims.0,
            dims.1
        )));
    }
    let mut selected = [false; 256];
    for c in collage_classes(&donor.labels, vct, p_cm) {
        selected[c as usize] = true;
    }
    let mut image = target_image.clone();
    let mut labels = target.labels().values().to_vec();
    let mut weights = target.pixel_confidence().to_vec();
    for (i, &l) in donor.labels.values().iter().enumerate() {
        if selected[l as usize] {
            let (x, y) = ((i % dims.0) as u32, (i / dims.0) as u32);
            image.put_pixel(x, y, *donor.image.get_pixel(x, y));
            labels[i] = l;
            weights[i] = 1.0;
        }
    }
    Ok(TrainingSample {
        image_id: target.image_id().to_string(),
        image: Arc::new(image),
        labels: LabelMap::new(dims.0, dims.1, labels)?,
        weights,
        origin: SampleOrigin::CollagedTarget,
        donor_id: Some(donor.image_id.clone()),
    })
}

fn target_sample(target: &PseudoLabeledImage, image: &Arc<RgbImage>) -> TrainingSample {
    TrainingSample {
        image_id: target.image_id().to_string(),
        image: Arc::clone(image),
        labels: target.labels().clone(),
        weights: target.pixel_confidence().to_vec(),
        origin: SampleOrigin::Target,
        donor_id: None,
    }
}

/// Everything [`compose_minibatch`] draws from.
#[derive(Clone, Copy)]
pub struct MixSources<'a> {
    pub source: &'a SourcePool,
    /// Pseudo-labeled candidates in a fixed order.
    pub pseudo: &'a [&'a PseudoLabeledImage],
    pub target_images: &'a TargetImages,
    pub vct: &'a ThresholdVector,
}

/// One minibatch: targets first, then source images. With no pseudo-labels
/// available the batch falls back to source only.
pub fn compose_minibatch<R: Rng>(
    sources: MixSources<'_>,
    n_mb: usize,
    mix: &MixParams,
    collage: bool,
    rng: &mut R,
) -> Result<Vec<TrainingSample>> {
    if n_mb == 0 {
        return Err(Error::config("N_MB", "minibatch size must be at least 1"));
    }
    if sources.source.is_empty() {
        return Err(Error::Invalid("source pool is empty".into()));
    }
    let mut n_target = target_count(n_mb, mix.p_mb);
    if n_target > 0 && sources.pseudo.is_empty() {
        log::warn!("no pseudo-labeled images yet; composing a source-only batch");
        n_target = 0;
    }
    let mut batch = Vec::with_capacity(n_mb);
    for _ in 0..n_target {
        let target = sources.pseudo[rng.random_range(0..sources.pseudo.len())];
        let image = sources.target_images.get(target.image_id())?;
        if collage {
            let donor = sources.source.draw(rng);
            batch.push(classmix_collage(donor, target, image, sources.vct, mix.p_cm)?);
        } else {
            batch.push(target_sample(target, image));
        }
    }
    for _ in n_target..n_mb {
        batch.push(sources.source.draw(rng).to_sample());
    }
    Ok(batch)
}

/// `count` minibatches, batch `i` drawn from its own stream of `seed`.
pub fn compose_batches(
    sources: MixSources<'_>,
    count: usize,
    n_mb: usize,
    mix: &MixParams,
    collage: bool,
    seed: u64,
) -> Result<Vec<Vec<TrainingSample>>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            compose_minibatch(sources, n_mb, mix, collage, &mut rng)
        })
        .collect()
}
