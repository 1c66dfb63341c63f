//! Class-balanced sampling weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::types::{DatasetSplit, LabelMap, SplitKind, VOID_ID};

/// Per-image selection probabilities, summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingWeights {
    pub weights: BTreeMap<String, f64>,
}

impl SamplingWeights {
    pub fn get(&self, image_id: &str) -> Option<f64> {
        self.weights.get(image_id).copied()
    }
}

/// Weights each image by the rarity of the rarest class it contains, where
/// rarity is `median(f) / f_c` over dataset-wide pixel frequencies `f`.
pub fn class_balance_weights(split: &DatasetSplit) -> Result<SamplingWeights> {
    if split.kind != SplitKind::Labeled {
        return Err(Error::Invalid(format!("split `{}` is not labeled", split.name)));
    }
    let mut maps = Vec::with_capacity(split.len());
    for entry in &split.entries {
        let path = entry
            .label_path
            .as_ref()
            .ok_or_else(|| Error::data(&entry.image_path, "labeled entry without label"))?;
        let map = io::load_label_map(path)?;
        if map.count_non_void() == 0 {
            return Err(Error::data(path, "label map has no labeled pixel"));
        }
        maps.push((entry.image_id.clone(), map));
    }
    weights_from_maps(&maps, split.label_space.num_classes())
}

pub fn weights_from_maps(maps: &[(String, LabelMap)], num_classes: usize) -> Result<SamplingWeights> {
    let mut counts = vec![0u64; num_classes];
    for (id, map) in maps {
        for &v in map.values() {
            if v == VOID_ID {
                continue;
            }
            let slot = counts
                .get_mut(v as usize)
                .ok_or_else(|| Error::Invalid(format!("{id}: class {v} outside label space")))?;
            *slot += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Invalid("no labeled pixels in split".into()));
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mut present: Vec<f64> = freq.iter().copied().filter(|&f| f > 0.0).collect();
    present.sort_by(f64::total_cmp);
    let mid = present.len() / 2;
    let median = if present.len() % 2 == 1 {
        present[mid]
    } else {
        (present[mid - 1] + present[mid]) / 2.0
    };

    let mut raw = BTreeMap::new();
    for (id, map) in maps {
        let weight = map
            .classes_present()
            .iter()
            .map(|&c| median / freq[c as usize])
            .fold(0.0, f64::max);
        if weight <= 0.0 {
            return Err(Error::Invalid(format!("{id}: label map has no labeled pixel")));
        }
        raw.insert(id.clone(), weight);
    }
    let sum: f64 = raw.values().sum();
    Ok(SamplingWeights {
        weights: raw.into_iter().map(|(k, v)| (k, v / sum)).collect(),
    })
}
