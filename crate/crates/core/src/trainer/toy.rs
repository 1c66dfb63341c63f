//! Reference trainer: a per-pixel Gaussian naive-Bayes classifier over
//! `(R, G, B, x, y)` with a softmax temperature. It is deterministic: the
//! model is a pure function of the ordered training pixels and weights.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{Trainer, TrainerConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::mixing::TrainingSample;
use crate::types::{ConfidenceStack, DatasetEntry, DatasetSplit, LabelMap, VOID_ID};

pub const FEATURES: usize = 5;

/// Lower bound on every per-feature variance.
pub const VARIANCE_FLOOR: f64 = 1e-4;

/// Weighted sufficient statistics of one class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub weight: f64,
    pub sum: [f64; FEATURES],
    pub sum_sq: [f64; FEATURES],
}

impl ClassStats {
    fn add(&mut self, f: &[f64; FEATURES], w: f64) {
        self.weight += w;
        for d in 0..FEATURES {
            self.sum[d] += w * f[d];
            self.sum_sq[d] += w * f[d] * f[d];
        }
    }

    fn merge(&mut self, other: &ClassStats) {
        self.weight += other.weight;
        for d in 0..FEATURES {
            self.sum[d] += other.sum[d];
            self.sum_sq[d] += other.sum_sq[d];
        }
    }

    pub fn mean(&self) -> [f64; FEATURES] {
        self.sum.map(|s| s / self.weight)
    }

    pub fn variance(&self) -> [f64; FEATURES] {
        let mean = self.mean();
        let mut var = [0.0; FEATURES];
        for d in 0..FEATURES {
            var[d] = (self.sum_sq[d] / self.weight - mean[d] * mean[d]).max(VARIANCE_FLOOR);
        }
        var
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModelState {
    pub classes: Vec<ClassStats>,
    /// Log-likelihoods are divided by this before the softmax.
    pub temperature: f64,
}

impl ToyModelState {
    pub const DEFAULT_TEMPERATURE: f64 = 1.0;

    pub fn new(num_classes: usize, temperature: f64) -> Self {
        ToyModelState {
            classes: vec![ClassStats::default(); num_classes],
            temperature,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn pooled(&self) -> ClassStats {
        let mut all = ClassStats::default();
        for c in &self.classes {
            all.merge(c);
        }
        all
    }
}

/// Pixel features: color scaled to `[0, 1]` and the pixel center in
/// normalized coordinates.
pub fn pixel_features(img: &RgbImage, x: u32, y: u32) -> [f64; FEATURES] {
    let p = img.get_pixel(x, y);
    [
        p[0] as f64 / 255.0,
        p[1] as f64 / 255.0,
        p[2] as f64 / 255.0,
        (x as f64 + 0.5) / img.width() as f64,
        (y as f64 + 0.5) / img.height() as f64,
    ]
}

/// Accumulates every labeled pixel of `samples`, weighted by its sample
/// weight. Zero-weight and void pixels contribute nothing.
pub fn toy_fit(mut state: ToyModelState, samples: &[TrainingSample]) -> Result<ToyModelState> {
    for s in samples {
        check_sample(s, state.num_classes())?;
        let w = s.labels.width();
        for (i, (&label, &weight)) in s.labels.values().iter().zip(&s.weights).enumerate() {
            if label == VOID_ID || weight <= 0.0 {
                continue;
            }
            let f = pixel_features(&s.image, (i % w) as u32, (i / w) as u32);
            state.classes[label as usize].add(&f, weight as f64);
        }
    }
    Ok(state)
}

fn check_sample(s: &TrainingSample, num_classes: usize) -> Result<()> {
    let dims = (s.image.width() as usize, s.image.height() as usize);
    if dims != s.labels.dims() || s.weights.len() != s.labels.len() {
        return Err(Error::shape(format!("sample `{}` has inconsistent rasters", s.image_id)));
    }
    if let Some(bad) = s.labels.values().iter().find(|&&l| l != VOID_ID && l as usize >= num_classes) {
        return Err(Error::Invalid(format!("sample `{}` has label {bad}", s.image_id)));
    }
    Ok(())
}

struct Scorer {
    log_prior: Vec<f64>,
    mean: Vec<[f64; FEATURES]>,
    var: Vec<[f64; FEATURES]>,
    log_norm: Vec<f64>,
}

impl Scorer {
    fn new(state: &ToyModelState) -> Option<Scorer> {
        let pooled = state.pooled();
        if pooled.weight <= 0.0 {
            return None;
        }
        let k = state.num_classes() as f64;
        let mut scorer = Scorer {
            log_prior: Vec::new(),
            mean: Vec::new(),
            var: Vec::new(),
            log_norm: Vec::new(),
        };
        for c in &state.classes {
            let source = if c.weight > 0.0 { c } else { &pooled };
            let var = source.variance();
            scorer.log_prior.push(((c.weight + 1.0) / (pooled.weight + k)).ln());
            scorer.mean.push(source.mean());
            scorer.log_norm.push(var.iter().map(|v| -0.5 * (2.0 * std::f64::consts::PI * v).ln()).sum());
            scorer.var.push(var);
        }
        Some(scorer)
    }

    fn log_likelihood(&self, c: usize, f: &[f64; FEATURES]) -> f64 {
        let mut ll = self.log_prior[c] + self.log_norm[c];
        for d in 0..FEATURES {
            let diff = f[d] - self.mean[c][d];
            ll -= diff * diff / (2.0 * self.var[c][d]);
        }
        ll
    }
}

/// Softmax of tempered class log-likelihoods at every pixel. An untrained
/// model predicts the uniform distribution.
pub fn toy_predict(state: &ToyModelState, img: &RgbImage) -> ConfidenceStack {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let k = state.num_classes();
    let n = w * h;
    let mut values = vec![0.0f32; k * n];
    let Some(scorer) = Scorer::new(state) else {
        values.fill(1.0 / k as f32);
        return ConfidenceStack::new(w, h, k, values).expect("uniform stack");
    };
    let mut scores = vec![0.0f64; k];
    for p in 0..n {
        let f = pixel_features(img, (p % w) as u32, (p / w) as u32);
        for (c, s) in scores.iter_mut().enumerate() {
            *s = scorer.log_likelihood(c, &f) / state.temperature;
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        for (c, s) in scores.iter().enumerate() {
            values[c * n + p] = ((s - max).exp() / total) as f32;
        }
    }
    ConfidenceStack::new(w, h, k, values).expect("softmax output lies in [0, 1]")
}

/// In-process trainer backed by [`ToyModelState`]. Models are stored as JSON
/// under `model_dir`; the weights reference is the file name.
pub struct ToyTrainer {
    model_dir: PathBuf,
    num_classes: usize,
    temperature: f64,
    models: HashMap<String, ToyModelState>,
    images: HashMap<PathBuf, Arc<RgbImage>>,
}

impl ToyTrainer {
    pub fn new(model_dir: impl Into<PathBuf>, num_classes: usize) -> Self {
        ToyTrainer {
            model_dir: model_dir.into(),
            num_classes,
            temperature: ToyModelState::DEFAULT_TEMPERATURE,
            models: HashMap::new(),
            images: HashMap::new(),
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn model_dir(&self) -> &Path {
        &self.model_dir
    }

    pub fn load_state(&mut self, weights: &str) -> Result<ToyModelState> {
        if let Some(state) = self.models.get(weights) {
            return Ok(state.clone());
        }
        let state: ToyModelState = io::read_json(&self.model_dir.join(weights))?;
        if state.num_classes() != self.num_classes {
            return Err(Error::trainer(
                "toy",
                format!("model `{weights}` has {} classes, expected {}", state.num_classes(), self.num_classes),
            ));
        }
        self.models.insert(weights.to_string(), state.clone());
        Ok(state)
    }

    fn store(&mut self, output: &str, state: ToyModelState) -> Result<String> {
        let weights = format!("{output}.json");
        io::write_json(&self.model_dir.join(&weights), &state)?;
        self.models.insert(weights.clone(), state);
        Ok(weights)
    }

    fn image(&mut self, path: &Path) -> Result<Arc<RgbImage>> {
        if let Some(img) = self.images.get(path) {
            return Ok(Arc::clone(img));
        }
        let img = Arc::new(io::load_rgb(path)?);
        self.images.insert(path.to_path_buf(), Arc::clone(&img));
        Ok(img)
    }
}

impl Trainer for ToyTrainer {
    fn baseline_train(&mut self, _config: &TrainerConfig, source: &DatasetSplit, output: &str) -> Result<String> {
        let mut samples = Vec::with_capacity(source.len());
        for e in &source.entries {
            let label_path = e
                .label_path
                .as_ref()
                .ok_or_else(|| Error::data(&e.image_path, "source entry without label"))?;
            let labels: LabelMap = io::load_label_map(label_path)?;
            let weights = labels.values().iter().map(|&l| if l == VOID_ID { 0.0 } else { 1.0 }).collect();
            samples.push(TrainingSample {
                image_id: e.image_id.clone(),
                image: self.image(&e.image_path)?,
                labels,
                weights,
                origin: crate::mixing::SampleOrigin::Source,
                donor_id: None,
            });
        }
        let state = toy_fit(ToyModelState::new(self.num_classes, self.temperature), &samples)?;
        self.store(output, state)
    }

    fn train(
        &mut self,
        base: Option<&str>,
        _config: &TrainerConfig,
        batches: &[Vec<TrainingSample>],
        output: &str,
    ) -> Result<String> {
        let mut state = match base {
            Some(w) => self.load_state(w)?,
            None => ToyModelState::new(self.num_classes, self.temperature),
        };
        for batch in batches {
            state = toy_fit(state, batch)?;
        }
        self.store(output, state)
    }

    fn predict(&mut self, weights: &str, images: &[DatasetEntry]) -> Result<Vec<ConfidenceStack>> {
        let state = self.load_state(weights)?;
        images
            .iter()
            .map(|e| Ok(toy_predict(&state, self.image(&e.image_path)?.as_ref())))
            .collect()
    }
}
