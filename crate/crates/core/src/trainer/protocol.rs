//! File-based trainer protocol.
//!
//! The orchestrator and the trainer share a session directory. Request `i`
//! is written atomically as `NNNN.request`; the trainer answers with
//! `NNNN.response`. Records are pretty JSON with a fixed key order. Training
//! samples travel as PNG image + label PNG + `f32` weight raster under
//! `NNNN.samples/`; predictions come back as `NNNN.stack.<i>.f32` rasters of
//! shape `[C, H, W]`.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Trainer, TrainerConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::mixing::{SampleOrigin, TrainingSample};
use crate::types::{ConfidenceStack, DatasetEntry, DatasetSplit, SplitKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRef {
    pub image_id: String,
    pub image: String,
    pub labels: String,
    pub weights: String,
    pub origin: SampleOrigin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Request {
    BaselineTrain {
        config: TrainerConfig,
        source_manifest: String,
        output: String,
    },
    /// `base = None` trains from the initial weights.
    Finetune {
        config: TrainerConfig,
        base: Option<String>,
        batches: Vec<Vec<SampleRef>>,
        output: String,
    },
    Predict {
        model: String,
        images: Vec<ImageRef>,
    },
    Shutdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Response {
    Trained { model: String },
    /// Raster file names, relative to the session directory.
    Predicted { stacks: Vec<String> },
    Stopped,
    Error { message: String },
}

pub fn encode<T: Serialize>(record: &T) -> Result<String> {
    io::to_json(record)
}

pub fn decode<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    Ok(serde_json::from_str(text)?)
}

pub fn request_path(dir: &Path, seq: u32) -> PathBuf {
    dir.join(format!("{seq:04}.request"))
}

pub fn response_path(dir: &Path, seq: u32) -> PathBuf {
    dir.join(format!("{seq:04}.response"))
}

/// Removes numbered request, response, sample and stack files left in `dir`
/// by an earlier session.
fn clear_exchanges(dir: &Path) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let numbered = name.len() > 5 && name[..4].bytes().all(|b| b.is_ascii_digit()) && name.as_bytes()[4] == b'.';
        if !numbered {
            continue;
        }
        if entry.file_type()?.is_dir() {
            fs::remove_dir_all(entry.path())?;
        } else {
            fs::remove_file(entry.path())?;
        }
    }
    Ok(())
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Client side of the protocol. When built with [`FileTrainer::spawn`] it
/// owns the trainer process and reports its exit and log on failure.
pub struct FileTrainer {
    id: String,
    dir: PathBuf,
    seq: u32,
    timeout: Duration,
    child: Option<Child>,
}

impl FileTrainer {
    pub const LOG_FILE: &'static str = "trainer.log";

    /// Talks to a trainer that is already serving `dir`.
    pub fn attach(id: impl Into<String>, dir: impl Into<PathBuf>, timeout: Duration) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(FileTrainer {
            id: id.into(),
            dir,
            seq: 0,
            timeout,
            child: None,
        })
    }

    /// Starts `program args.. <dir>` with output captured in `trainer.log`.
    pub fn spawn(
        id: impl Into<String>,
        program: &Path,
        args: &[String],
        dir: impl Into<PathBuf>,
        timeout: Duration,
    ) -> Result<Self> {
        let mut trainer = Self::attach(id, dir, timeout)?;
        clear_exchanges(&trainer.dir)?;
        let log = File::create(trainer.dir.join(Self::LOG_FILE))?;
        let child = Command::new(program)
            .args(args)
            .arg(&trainer.dir)
            .stdin(Stdio::null())
            .stdout(log.try_clone()?)
            .stderr(log)
            .spawn()
            .map_err(|e| Error::trainer(&trainer.id, format!("cannot start {}: {e}", program.display())))?;
        trainer.child = Some(child);
        Ok(trainer)
    }

    pub fn session_dir(&self) -> &Path {
        &self.dir
    }

    fn failure(&self, message: impl Into<String>) -> Error {
        let log = fs::read_to_string(self.dir.join(Self::LOG_FILE)).unwrap_or_default();
        Error::Trainer {
            session: self.id.clone(),
            message: message.into(),
            log,
        }
    }

    fn next_seq(&mut self) -> u32 {
        self.seq += 1;
        self.seq
    }

    fn exchange(&mut self, seq: u32, request: &Request) -> Result<Response> {
        io::write_atomic(&request_path(&self.dir, seq), encode(request)?.as_bytes())?;
        let response = response_path(&self.dir, seq);
        let started = Instant::now();
        loop {
            if response.exists() {
                let text = fs::read_to_string(&response)?;
                return match decode::<Response>(&text) {
                    Ok(Response::Error { message }) => Err(self.failure(message)),
                    Ok(r) => Ok(r),
                    Err(e) => Err(self.failure(format!("malformed response {seq:04}: {e}"))),
                };
            }
            if let Some(child) = &mut self.child {
                if let Some(status) = child.try_wait()? {
                    if !response.exists() {
                        return Err(self.failure(format!("trainer exited with {status}")));
                    }
                    continue;
                }
            }
            if started.elapsed() > self.timeout {
                return Err(self.failure(format!("no response to request {seq:04} within {:?}", self.timeout)));
            }
            thread::sleep(Duration::from_millis(2));
        }
    }

    fn expect_model(&self, response: Response) -> Result<String> {
        match response {
            Response::Trained { model } => Ok(model),
            other => Err(self.failure(format!("expected a trained model, got {other:?}"))),
        }
    }

    fn write_samples(&self, seq: u32, batches: &[Vec<TrainingSample>]) -> Result<Vec<Vec<SampleRef>>> {
        let dir = self.dir.join(format!("{seq:04}.samples"));
        let mut out = Vec::with_capacity(batches.len());
        for (b, batch) in batches.iter().enumerate() {
            let mut refs = Vec::with_capacity(batch.len());
            for (i, s) in batch.iter().enumerate() {
                let stem = format!("{b:04}_{i:02}");
                let image = dir.join(format!("{stem}.png"));
                let labels = dir.join(format!("{stem}.label.png"));
                let weights = dir.join(format!("{stem}.weights.f32"));
                io::save_rgb(&image, &s.image)?;
                io::save_label_map(&labels, &s.labels)?;
                io::write_f32_raster(&weights, &[s.labels.height(), s.labels.width()], &s.weights)?;
                refs.push(SampleRef {
                    image_id: s.image_id.clone(),
                    image: path_string(&image),
                    labels: path_string(&labels),
                    weights: path_string(&weights),
                    origin: s.origin,
                });
            }
            out.push(refs);
        }
        Ok(out)
    }
}

impl Trainer for FileTrainer {
    fn baseline_train(&mut self, config: &TrainerConfig, source: &DatasetSplit, output: &str) -> Result<String> {
        let seq = self.next_seq();
        let manifest = self.dir.join(format!("{seq:04}.manifest.json"));
        io::save_manifest(&manifest, source)?;
        let response = self.exchange(
            seq,
            &Request::BaselineTrain {
                config: config.clone(),
                source_manifest: path_string(&manifest),
                output: output.to_string(),
            },
        )?;
        self.expect_model(response)
    }

    fn train(
        &mut self,
        base: Option<&str>,
        config: &TrainerConfig,
        batches: &[Vec<TrainingSample>],
        output: &str,
    ) -> Result<String> {
        let seq = self.next_seq();
        let batches = self.write_samples(seq, batches)?;
        let response = self.exchange(
            seq,
            &Request::Finetune {
                config: config.clone(),
                base: base.map(str::to_string),
                batches,
                output: output.to_string(),
            },
        );
        let _ = fs::remove_dir_all(self.dir.join(format!("{seq:04}.samples")));
        self.expect_model(response?)
    }

    fn predict(&mut self, weights: &str, images: &[DatasetEntry]) -> Result<Vec<ConfidenceStack>> {
        let seq = self.next_seq();
        let request = Request::Predict {
            model: weights.to_string(),
            images: images
                .iter()
                .map(|e| ImageRef {
                    image_id: e.image_id.clone(),
                    path: path_string(&e.image_path),
                })
                .collect(),
        };
        let stacks = match self.exchange(seq, &request)? {
            Response::Predicted { stacks } => stacks,
            other => return Err(self.failure(format!("expected predictions, got {other:?}"))),
        };
        if stacks.len() != images.len() {
            return Err(self.failure(format!("{} stacks for {} images", stacks.len(), images.len())));
        }
        stacks
            .iter()
            .map(|name| {
                let path = self.dir.join(name);
                let (shape, data) = io::read_f32_raster(&path)?;
                let _ = fs::remove_file(io::raster_header_path(&path));
                let _ = fs::remove_file(&path);
                let [c, h, w] = shape[..] else {
                    return Err(self.failure(format!("stack {name} has shape {shape:?}")));
                };
                ConfidenceStack::new(w, h, c, data)
            })
            .collect()
    }

    fn shutdown(&mut self) -> Result<()> {
        let seq = self.next_seq();
        let response = self.exchange(seq, &Request::Shutdown)?;
        if let Some(mut child) = self.child.take() {
            let status = child.wait()?;
            if !status.success() {
                return Err(self.failure(format!("trainer exited with {status}")));
            }
        }
        match response {
            Response::Stopped => Ok(()),
            other => Err(self.failure(format!("unexpected shutdown response {other:?}"))),
        }
    }
}

impl Drop for FileTrainer {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            if matches!(child.try_wait(), Ok(None)) {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }
}

fn load_sample(r: &SampleRef) -> Result<TrainingSample> {
    let image = io::load_rgb(Path::new(&r.image))?;
    let labels = io::load_label_map(Path::new(&r.labels))?;
    let (shape, weights) = io::read_f32_raster(Path::new(&r.weights))?;
    if shape != [labels.height(), labels.width()] {
        return Err(Error::data(&r.weights, "weight raster does not match label map"));
    }
    Ok(TrainingSample {
        image_id: r.image_id.clone(),
        image: Arc::new(image),
        labels,
        weights,
        origin: r.origin,
        donor_id: None,
    })
}

fn handle(dir: &Path, seq: u32, request: Request, trainer: &mut dyn Trainer) -> Result<Response> {
    match request {
        Request::BaselineTrain {
            config,
            source_manifest,
            output,
        } => {
            let split = io::load_manifest(Path::new(&source_manifest))?;
            if split.kind != SplitKind::Labeled {
                return Err(Error::Invalid("baseline training needs a labeled split".into()));
            }
            Ok(Response::Trained {
                model: trainer.baseline_train(&config, &split, &output)?,
            })
        }
        Request::Finetune {
            config,
            base,
            batches,
            output,
        } => {
            let batches = batches
                .iter()
                .map(|b| b.iter().map(load_sample).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            Ok(Response::Trained {
                model: trainer.train(base.as_deref(), &config, &batches, &output)?,
            })
        }
        Request::Predict { model, images } => {
            let entries: Vec<DatasetEntry> = images
                .into_iter()
                .map(|i| DatasetEntry {
                    image_id: i.image_id,
                    image_path: PathBuf::from(i.path),
                    label_path: None,
                    sampling_weight: None,
                })
                .collect();
            let stacks = trainer.predict(&model, &entries)?;
            let mut names = Vec::with_capacity(stacks.len());
            for (i, s) in stacks.iter().enumerate() {
                let name = format!("{seq:04}.stack.{i}.f32");
                io::write_f32_raster(&dir.join(&name), &[s.num_classes(), s.height(), s.width()], s.values())?;
                names.push(name);
            }
            Ok(Response::Predicted { stacks: names })
        }
        Request::Shutdown => Ok(Response::Stopped),
    }
}

/// Answers requests in `dir` with `trainer` until a shutdown request.
/// Failures are reported as error responses and the loop keeps going.
pub fn serve(dir: &Path, trainer: &mut dyn Trainer, poll: Duration) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut seq = 1u32;
    loop {
        let path = request_path(dir, seq);
        if !path.exists() {
            thread::sleep(poll);
            continue;
        }
        let text = fs::read_to_string(&path)?;
        let (response, stop) = match decode::<Request>(&text) {
            Ok(request) => {
                let stop = matches!(request, Request::Shutdown);
                if stop {
                    let _ = trainer.shutdown();
                }
                let response = handle(dir, seq, request, trainer).unwrap_or_else(|e| Response::Error {
                    message: e.to_string(),
                });
                (response, stop)
            }
            Err(e) => (
                Response::Error {
                    message: format!("malformed request: {e}"),
                },
                false,
            ),
        };
        io::write_atomic(&response_path(dir, seq), encode(&response)?.as_bytes())?;
        if stop {
            return Ok(());
        }
        seq += 1;
    }
}
