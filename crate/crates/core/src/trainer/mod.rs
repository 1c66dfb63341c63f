//! The model boundary.
//!
//! The orchestrator never looks inside a model: it asks a [`Trainer`] to
//! train, fine-tune and predict, and holds opaque [`ModelHandle`]s. Two
//! implementations ship here: an in-process Gaussian naive-Bayes
//! [`ToyTrainer`] and [`FileTrainer`], which speaks the file-based request /
//! response protocol to an external process.

pub mod protocol;
mod toy;

use std::collections::BTreeMap;
use std::sync::{Mutex, TryLockError};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::{compose_batches, MixSources, TrainingSample};
use crate::types::{BranchTag, ConfidenceStack, DatasetEntry, DatasetSplit, MixParams, ModelHandle};

pub use protocol::{serve, FileTrainer};
pub use toy::{toy_fit, toy_predict, ClassStats, ToyModelState, ToyTrainer, FEATURES, VARIANCE_FLOOR};

/// Training hyper-parameters. Only `batch_size`, `seed` and the batch counts
/// are read by the orchestrator; `passthrough` is forwarded untouched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    /// `N_MB`.
    pub batch_size: usize,
    pub seed: u64,
    /// Minibatches composed for each fine-tuning call.
    pub finetune_batches: usize,
    /// Minibatches composed for the training after the co-training loop.
    pub final_batches: usize,
    #[serde(default)]
    pub passthrough: BTreeMap<String, serde_json::Value>,
}

impl TrainerConfig {
    /// Schedule of a full-size external trainer, forwarded as-is.
    pub fn default_passthrough() -> BTreeMap<String, serde_json::Value> {
        use serde_json::json;
        [
            ("optimizer", json!("sgd")),
            ("learning_rate", json!(0.002)),
            ("momentum", json!(0.9)),
            ("baseline_iterations", json!(60000)),
            ("cycle_iterations", json!(8000)),
            ("lr_decay", json!({"factor": 0.1, "at": [0.3333333333333333, 0.6666666666666666]})),
            ("crop", json!([1024, 512])),
            ("augment", json!(["random_zoom", "horizontal_flip"])),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("N_MB", "minibatch size must be at least 1"));
        }
        Ok(())
    }
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            batch_size: 4,
            seed: 0,
            finetune_batches: 400,
            final_batches: 400,
            passthrough: Self::default_passthrough(),
        }
    }
}

/// What a model backend must provide. Weights references are opaque
/// strings owned by the implementation.
pub trait Trainer: Send {
    /// Trains from the initial weights on the full labeled split.
    fn baseline_train(&mut self, config: &TrainerConfig, source: &DatasetSplit, output: &str) -> Result<String>;

    /// Trains on `batches` in order, starting from `base` (or from the
    /// initial weights when `None`). `base` stays usable.
    fn train(
        &mut self,
        base: Option<&str>,
        config: &TrainerConfig,
        batches: &[Vec<TrainingSample>],
        output: &str,
    ) -> Result<String>;

    /// One normalized confidence stack per image.
    fn predict(&mut self, weights: &str, images: &[DatasetEntry]) -> Result<Vec<ConfidenceStack>>;

    fn shutdown(&mut self) -> Result<()> {
        Ok(())
    }
}

/// A trainer plus the branch it serves. Requests are strictly serial: a
/// request issued while another is in flight fails with
/// [`Error::SessionBusy`].
pub struct TrainerSession {
    id: String,
    branch: BranchTag,
    trainer: Mutex<Box<dyn Trainer>>,
}

impl TrainerSession {
    pub fn new(id: impl Into<String>, branch: BranchTag, trainer: Box<dyn Trainer>) -> Self {
        TrainerSession {
            id: id.into(),
            branch,
            trainer: Mutex::new(trainer),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn branch(&self) -> BranchTag {
        self.branch
    }

    fn with_trainer<T>(&self, f: impl FnOnce(&mut dyn Trainer) -> Result<T>) -> Result<T> {
        let mut guard = match self.trainer.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(Error::SessionBusy(self.id.clone())),
            Err(TryLockError::Poisoned(_)) => {
                return Err(Error::trainer(&self.id, "session poisoned by an earlier panic"))
            }
        };
        f(guard.as_mut())
    }

    fn handle(&self, weights: String) -> ModelHandle {
        ModelHandle {
            branch: self.branch,
            session: self.id.clone(),
            weights,
        }
    }

    /// Adopts a model produced elsewhere (e.g. by the self-training session).
    pub fn adopt(&self, model: &ModelHandle) -> ModelHandle {
        model.with_branch(self.branch, &self.id)
    }

    pub fn baseline_train(&self, config: &TrainerConfig, source: &DatasetSplit, output: &str) -> Result<ModelHandle> {
        if source.is_empty() {
            return Err(Error::Invalid("baseline training needs a non-empty source split".into()));
        }
        let weights = self.with_trainer(|t| t.baseline_train(config, source, output))?;
        Ok(self.handle(weights))
    }

    /// Continues training from `base` on pre-composed batches.
    pub fn finetune(
        &self,
        base: &ModelHandle,
        config: &TrainerConfig,
        batches: &[Vec<TrainingSample>],
        output: &str,
    ) -> Result<ModelHandle> {
        let weights = self.with_trainer(|t| t.train(Some(&base.weights), config, batches, output))?;
        Ok(self.handle(weights))
    }

    /// Trains a new model from the initial weights.
    pub fn train_from_init(
        &self,
        config: &TrainerConfig,
        batches: &[Vec<TrainingSample>],
        output: &str,
    ) -> Result<ModelHandle> {
        let weights = self.with_trainer(|t| t.train(None, config, batches, output))?;
        Ok(self.handle(weights))
    }

    pub fn predict(&self, model: &ModelHandle, images: &[DatasetEntry]) -> Result<Vec<ConfidenceStack>> {
        let stacks = self.with_trainer(|t| t.predict(&model.weights, images))?;
        if stacks.len() != images.len() {
            return Err(Error::trainer(
                &self.id,
                format!("{} stacks returned for {} images", stacks.len(), images.len()),
            ));
        }
        Ok(stacks)
    }

    pub fn shutdown(&self) -> Result<()> {
        self.with_trainer(|t| t.shutdown())
    }
}

/// Composes `config.finetune_batches` minibatches and fine-tunes `base` on
/// them.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    session: &TrainerSession,
    base: &ModelHandle,
    config: &TrainerConfig,
    sources: MixSources<'_>,
    mix: &MixParams,
    collage: bool,
    seed: u64,
    output: &str,
) -> Result<ModelHandle> {
    let batches = compose_batches(sources, config.finetune_batches, config.batch_size, mix, collage, seed)?;
    session.finetune(base, config, &batches, output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::mpsc;
    use std::sync::Arc;
    use std::time::Duration;

    /// Blocks inside `predict` until released.
    struct Gate {
        entered: mpsc::Sender<()>,
        release: mpsc::Receiver<()>,
    }

    impl Trainer for Gate {
        fn baseline_train(&mut self, _: &TrainerConfig, _: &DatasetSplit, output: &str) -> Result<String> {
            Ok(output.to_string())
        }

        fn train(&mut self, _: Option<&str>, _: &TrainerConfig, _: &[Vec<TrainingSample>], output: &str) -> Result<String> {
            Ok(output.to_string())
        }

        fn predict(&mut self, _: &str, _: &[DatasetEntry]) -> Result<Vec<ConfidenceStack>> {
            self.entered.send(()).unwrap();
            self.release.recv_timeout(Duration::from_secs(10)).unwrap();
            Ok(Vec::new())
        }
    }

    #[test]
    fn second_request_while_in_flight_is_rejected() {
        let (entered_tx, entered_rx) = mpsc::channel();
        let (release_tx, release_rx) = mpsc::channel();
        let session = Arc::new(TrainerSession::new(
            "s",
            BranchTag::Branch1,
            Box::new(Gate {
                entered: entered_tx,
                release: release_rx,
            }),
        ));
        let model = ModelHandle {
            branch: BranchTag::Branch1,
            session: "s".into(),
            weights: "w".into(),
        };
        let worker = {
            let session = Arc::clone(&session);
            let model = model.clone();
            std::thread::spawn(move || session.predict(&model, &[]))
        };
        entered_rx.recv_timeout(Duration::from_secs(10)).unwrap();
        let second = session.predict(&model, &[]);
        assert!(matches!(second, Err(Error::SessionBusy(_))));
        release_tx.send(()).unwrap();
        assert!(worker.join().unwrap().is_ok());
        // free again once the first request finished
        let cfg = TrainerConfig::default();
        assert!(session.train_from_init(&cfg, &[], "m").is_ok());
    }
}
