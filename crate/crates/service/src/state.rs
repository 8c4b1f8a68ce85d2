use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use saliencytune::data::{
    split, ClassSet, FeedbackExample, FeedbackRecord, FeedbackSource, ImageSample, SplitFractions, SplitMode,
};
use saliencytune::explainer::{ExplanationMask, MaskOrigin};
use saliencytune::metrics::{evaluate, MetricsReport};
use saliencytune::model::{Checkpoint, Network};
use saliencytune::trainer::{finetune, TrainingConfig};
use tracing::{info, warn};

use crate::error::{Error, Result};
use crate::store::{JobStatus, Store};

/// Samples the service shows to users, plus the sets used for model
/// selection and for before/after reporting. Feedback can only target
/// catalog samples, so it never overlaps the other two.
pub struct Catalog {
    pub classes: ClassSet,
    pub samples: Vec<ImageSample>,
    index: HashMap<String, usize>,
    pub validation: Vec<ImageSample>,
    pub holdout: Vec<ImageSample>,
}

impl Catalog {
    pub fn new(
        classes: ClassSet,
        samples: Vec<ImageSample>,
        validation: Vec<ImageSample>,
        holdout: Vec<ImageSample>,
    ) -> Result<Self> {
        if validation.is_empty() || holdout.is_empty() {
            return Err(Error::State("validation and held-out sets must be non-empty".into()));
        }
        let index = samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        Ok(Self {
            classes,
            samples,
            index,
            validation,
            holdout,
        })
    }

    /// Leakage-safe 80/10/10 split of a labelled dataset.
    pub fn from_dataset(classes: ClassSet, samples: &[ImageSample], seed: u64) -> Result<Self> {
        let s = split(samples, SplitFractions::default(), seed, SplitMode::LeakageSafe)?;
        Self::new(classes, s.pool, s.validation, s.test)
    }

    pub fn get(&self, id: &str) -> Option<&ImageSample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }
}

/// The checkpoint reads are served from. Replaced, never mutated.
pub struct Published {
    pub id: String,
    pub network: Network,
}

pub(crate) struct Inner {
    pub data_dir: PathBuf,
    store: Mutex<Store>,
    pub catalog: Catalog,
    active: RwLock<Arc<Published>>,
    job_running: AtomicBool,
    pub training: TrainingConfig,
    counter: AtomicU64,
}

#[derive(Clone)]
pub struct AppState(pub(crate) Arc<Inner>);

/// Held while a job is queued or running; jobs are serialized per model.
pub struct JobSlot(AppState);

impl Drop for JobSlot {
    fn drop(&mut self) {
        self.0 .0.job_running.store(false, Ordering::SeqCst);
    }
}

impl AppState {
    /// Opens (or creates) the service state under `data_dir`. `initial` is
    /// only called when no checkpoint has been registered yet.
    pub fn open(
        data_dir: impl AsRef<Path>,
        catalog: Catalog,
        training: TrainingConfig,
        initial: impl FnOnce() -> Result<Network>,
    ) -> Result<Self> {
        training.validate()?;
        let data_dir = data_dir.as_ref().to_path_buf();
        for sub in ["checkpoints", "feedback", "artifacts"] {
            std::fs::create_dir_all(data_dir.join(sub))?;
        }
        let store = Store::open(&data_dir.join("saliencytune.db"))?;
        let interrupted = store.fail_interrupted()?;
        if interrupted > 0 {
            warn!(interrupted, "marked unfinished jobs as failed");
        }
        let published = match store.active_checkpoint()? {
            Some(id) => {
                let info = store
                    .checkpoints()?
                    .into_iter()
                    .find(|c| c.id == id)
                    .ok_or_else(|| Error::State(format!("active checkpoint {id} is not registered")))?;
                let network = Checkpoint::load(data_dir.join("checkpoints").join(&info.file))?.to_network()?;
                Published { id, network }
            }
            None => {
                let network = initial()?;
                let info = store.add_checkpoint(None, None)?;
                Checkpoint::from_network(&network, 0).save(data_dir.join("checkpoints").join(&info.file))?;
                store.set_active_checkpoint(&info.id)?;
                Published { id: info.id, network }
            }
        };
        if published.network.num_classes() != catalog.classes.len() {
            return Err(Error::State("model and catalog disagree on the number of classes".into()));
        }
        info!(checkpoint = %published.id, "serving");
        Ok(Self(Arc::new(Inner {
            data_dir,
            store: Mutex::new(store),
            catalog,
            active: RwLock::new(Arc::new(published)),
            job_running: AtomicBool::new(false),
            training,
            counter: AtomicU64::new(0),
        })))
    }

    pub fn store(&self) -> MutexGuard<'_, Store> {
        self.0.store.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn catalog(&self) -> &Catalog {
        &self.0.catalog
    }

    pub fn training(&self) -> &TrainingConfig {
        &self.0.training
    }

    pub fn active(&self) -> Arc<Published> {
        self.0.active.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn publish(&self, p: Published) {
        *self.0.active.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(p);
    }

    pub fn dir(&self, sub: &str) -> PathBuf {
        self.0.data_dir.join(sub)
    }

    pub fn next_token(&self) -> u64 {
        self.0.counter.fetch_add(1, Ordering::SeqCst)
    }

    pub fn job_running(&self) -> bool {
        self.0.job_running.load(Ordering::SeqCst)
    }

    pub fn try_claim_job_slot(&self) -> Option<JobSlot> {
        self.0
            .job_running
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .ok()
            .map(|_| JobSlot(self.clone()))
    }

    /// Points reads at a registered checkpoint.
    pub fn rollback(&self, id: &str) -> Result<Option<()>> {
        let store = self.store();
        let Some(info) = store.checkpoints()?.into_iter().find(|c| c.id == id) else {
            return Ok(None);
        };
        let network = Checkpoint::load(self.dir("checkpoints").join(&info.file))?.to_network()?;
        store.set_active_checkpoint(id)?;
        self.publish(Published { id: id.into(), network });
        Ok(Some(()))
    }

    fn load_checkpoint(&self, id: &str) -> Result<Network> {
        let info = self
            .store()
            .checkpoints()?
            .into_iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::State(format!("unknown checkpoint {id}")))?;
        Ok(Checkpoint::load(self.dir("checkpoints").join(&info.file))?.to_network()?)
    }

    fn examples(&self, ids: &[i64]) -> Result<Vec<FeedbackExample>> {
        let rows = self.store().feedback(ids)?;
        rows.into_iter()
            .zip(ids)
            .map(|(row, id)| {
                let row = row.ok_or_else(|| Error::State(format!("feedback {id} vanished")))?;
                let sample = self
                    .catalog()
                    .get(&row.sample_id)
                    .ok_or_else(|| Error::State(format!("feedback {id} names unknown sample {}", row.sample_id)))?
                    .clone();
                let mask = match &row.mask_file {
                    Some(f) => Some(ExplanationMask::from_png(
                        &std::fs::read(self.dir("feedback").join(f))?,
                        MaskOrigin::Feedback,
                    )?),
                    None => None,
                };
                let mut feedback =
                    FeedbackRecord::new(row.sample_id, row.corrected_label, mask, FeedbackSource::Human)?;
                feedback.created_at = row.created_at;
                Ok(FeedbackExample { sample, feedback })
            })
            .collect()
    }

    fn train(&self, job_id: &str) -> Result<(String, MetricsReport, MetricsReport)> {
        let job = self
            .store()
            .job(job_id)?
            .ok_or_else(|| Error::State(format!("unknown job {job_id}")))?;
        self.store().transition(job_id, JobStatus::Queued, JobStatus::Running)?;
        let input = self.load_checkpoint(&job.input_checkpoint)?;
        let examples = self.examples(&job.feedback_ids)?;
        let catalog = self.catalog();
        let threshold = job.config.threshold;
        let before = evaluate(&input, &catalog.holdout, threshold, &catalog.classes)?;
        let out = finetune(&input, &examples, &catalog.validation, &catalog.classes, &job.config)?;
        let after = evaluate(&out.best, &catalog.holdout, threshold, &catalog.classes)?;

        // the output file exists before the job is marked done
        let store = self.store();
        let info = store.add_checkpoint(Some(&job.input_checkpoint), Some(job_id))?;
        Checkpoint::from_network(&out.best, out.history.steps.len() as u64)
            .save(self.dir("checkpoints").join(&info.file))?;
        store.finish_job(job_id, &info.id, &before, &after)?;
        store.set_active_checkpoint(&info.id)?;
        self.publish(Published {
            id: info.id.clone(),
            network: out.best,
        });
        Ok((info.id, before, after))
    }

    /// Runs a queued job to completion. The slot is released afterwards.
    pub fn execute(&self, job_id: &str, slot: JobSlot) {
        match self.train(job_id) {
            Ok((ckpt, before, after)) => info!(
                job = job_id,
                checkpoint = %ckpt,
                before = ?before.avg_jaccard,
                after = ?after.avg_jaccard,
                "fine-tune job done"
            ),
            Err(e) => {
                warn!(job = job_id, error = %e, "fine-tune job failed");
                if let Err(e) = self.store().fail_job(job_id, &e.to_string()) {
                    warn!(job = job_id, error = %e, "could not record failure");
                }
            }
        }
        drop(slot);
    }
}
