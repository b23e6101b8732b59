use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{patch_loss_graph, LossWeighting, SigmaDistribution};
use crate::data_io::{save_checkpoint, Checkpoint, Dataset};
use crate::error::{Error, Result};
use crate::netgraph::{gradients, optimizer_step, AdamConfig, AdamState, DenoiserParams};
use crate::patching::{make_training_batch, PatchSchedule, ScheduleMode};
use crate::rng::{Purpose, RngKey};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Training hyperparameters. Durations are counted in images shown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Share of full-size batches.
    pub p: f64,
    pub schedule: ScheduleMode,
    pub batch_size: usize,
    pub duration_images: u64,
    pub lr: f64,
    /// Images shown before inverse-square-root learning-rate decay starts.
    pub lr_decay_images: u64,
    pub label_dropout: f64,
    pub seed: u64,
    pub metrics_every: u64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub weighting: LossWeighting,
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_data: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sigma = SigmaDistribution::default();
        TrainConfig {
            p: 0.5,
            schedule: ScheduleMode::Stochastic,
            batch_size: 64,
            duration_images: 200_000,
            lr: 1e-3,
            lr_decay_images: 50_000,
            label_dropout: 0.1,
            seed: 0,
            metrics_every: 50,
            checkpoint_every: 500,
            weighting: LossWeighting::Edm,
            p_mean: sigma.p_mean,
            p_std: sigma.p_std,
            sigma_data: sigma.sigma_data,
            sigma_min: sigma.sigma_min,
            sigma_max: sigma.sigma_max,
        }
    }
}

impl TrainConfig {
    pub fn sigma_distribution(&self) -> SigmaDistribution {
        SigmaDistribution {
            p_mean: self.p_mean,
            p_std: self.p_std,
            sigma_data: self.sigma_data,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config("p", format!("{} is outside [0, 1]", self.p)));
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(Error::config(
                "label_dropout",
                format!("{} is outside [0, 1]", self.label_dropout),
            ));
        }
        if self.duration_images == 0 {
            return Err(Error::config("duration_images", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.metrics_every == 0 {
            return Err(Error::config("metrics_every", "must be positive"));
        }
        self.sigma_distribution().validate()
    }

    pub fn total_steps(&self) -> u64 {
        self.duration_images.div_ceil(self.batch_size as u64)
    }

    pub fn patch_schedule(&self, resolution: usize) -> Result<PatchSchedule> {
        PatchSchedule::new(self.schedule, self.p, resolution, self.total_steps() as usize)
    }

    pub fn lr_at(&self, images_seen: u64) -> f64 {
        let ratio = images_seen as f64 / self.lr_decay_images.max(1) as f64;
        self.lr / ratio.max(1.0).sqrt()
    }

    /// Hex SHA-256 of the canonical serialized form.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let hash = Sha256::digest(text.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: DenoiserParams<T>,
    pub opt: AdamState<T>,
    pub step: u64,
    pub images_seen: u64,
    pub rng: RngKey,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: DenoiserParams<T>, seed: u64) -> Self {
        let opt = AdamState::new(&params, AdamConfig::default());
        TrainState {
            params,
            opt,
            step: 0,
            images_seen: 0,
            rng: RngKey::new(seed),
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub images_seen: u64,
    /// Mean loss over the steps since the previous record.
    pub loss: f64,
    pub patch_size: usize,
    pub sigma_mean: f64,
    pub wall_ms: f64,
}

impl MetricRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_run(&self, other: &Self) -> bool {
        self.step == other.step
            && self.images_seen == other.images_seen
            && self.loss.to_bits() == other.loss.to_bits()
            && self.patch_size == other.patch_size
            && self.sigma_mean.to_bits() == other.sigma_mean.to_bits()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport<T> {
    pub loss: T,
    pub patch_size: usize,
    pub sigma_mean: f64,
}

/// Step-by-step driver over an in-memory image set.
pub struct Trainer<'a, T> {
    pub config: TrainConfig,
    images: &'a Tensor<T>,
    labels: Option<&'a [usize]>,
    schedule: PatchSchedule,
    pub state: TrainState<T>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        config: TrainConfig,
        images: &'a Tensor<T>,
        labels: Option<&'a [usize]>,
        state: TrainState<T>,
    ) -> Result<Self> {
        config.validate()?;
        let (n, c, r, r2) = images.dims4()?;
        if n == 0 {
            return Err(Error::OutOfRange("training set is empty".into()));
        }
        if r != r2 {
            return Err(Error::shape(&[n, c, r, r], images.shape()));
        }
        let net = state.params.config();
        if net.image_channels() != c {
            return Err(Error::shape(&[n, net.image_channels(), r, r], images.shape()));
        }
        if let Some(l) = labels {
            if l.len() != n {
                return Err(Error::shape(&[n], &[l.len()]));
            }
            let k = net
                .num_classes
                .ok_or_else(|| Error::config("num_classes", "labels given to an unconditional network"))?;
            if let Some(&bad) = l.iter().find(|&&v| v >= k) {
                return Err(Error::Label {
                    label: bad,
                    num_classes: k,
                });
            }
        }
        let schedule = config.patch_schedule(r)?;
        if schedule.sizes()[2] % net.stride() != 0 {
            return Err(Error::config(
                "depth",
                format!(
                    "patch size {} is not divisible by {}",
                    schedule.sizes()[2],
                    net.stride()
                ),
            ));
        }
        Ok(Trainer {
            config,
            images,
            labels,
            schedule,
            state,
        })
    }

    pub fn schedule(&self) -> &PatchSchedule {
        &self.schedule
    }

    pub fn done(&self) -> bool {
        self.state.images_seen >= self.config.duration_images
    }

    /// Draws the data indices and (possibly dropped) labels for the current step.
    pub fn batch_selection(&self) -> (Vec<usize>, Option<Vec<usize>>) {
        let key = self.state.rng;
        let step = self.state.step;
        let n = self.images.shape()[0];
        let mut rng = key.stream(Purpose::BatchIndices, step, 0);
        let idx: Vec<usize> = (0..self.config.batch_size).map(|_| rng.random_range(0..n)).collect();
        let labels = self.labels.map(|all| {
            let null = self.state.params.config().null_class().expect("validated");
            idx.iter()
                .enumerate()
                .map(|(i, &j)| {
                    let u: f64 = key.stream(Purpose::LabelDrop, step, i as u64).random();
                    if u < self.config.label_dropout {
                        null
                    } else {
                        all[j]
                    }
                })
                .collect()
        });
        (idx, labels)
    }

    pub fn gather(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let items: Vec<Tensor<T>> = idx
            .iter()
            .map(|&i| self.images.slice_outer(i, i + 1))
            .collect::<Result<_>>()?;
        let (_, c, r, _) = self.images.dims4()?;
        Tensor::stack(&items)?.reshape(&[idx.len(), c, r, r])
    }

    pub fn step(&mut self) -> Result<StepReport<T>> {
        let (idx, labels) = self.batch_selection();
        let images = self.gather(&idx)?;
        let sigma_dist = self.config.sigma_distribution();
        let batch = make_training_batch(
            &images,
            &self.schedule,
            &sigma_dist,
            self.state.step as usize,
            self.state.rng,
        )?;
        let params = &self.state.params;
        let weighting = self.config.weighting;
        let (loss, grads) = gradients(params, |tape, pv| {
            patch_loss_graph(
                tape,
                pv,
                params,
                &batch.clean_patches,
                &batch.noisy_input,
                &batch.sigmas,
                sigma_dist.sigma_data,
                weighting,
                labels.as_deref(),
            )
        })?;
        let lr = self.config.lr_at(self.state.images_seen);
        optimizer_step(&mut self.state.params, &grads, &mut self.state.opt, lr)?;
        self.state.step += 1;
        self.state.images_seen += idx.len() as u64;
        let sigma_mean = batch.sigmas.iter().map(|s| s.as_f64()).sum::<f64>() / batch.sigmas.len() as f64;
        Ok(StepReport {
            loss,
            patch_size: batch.patch_size,
            sigma_mean,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState<f32>,
    pub metrics: Vec<MetricRecord>,
    /// Per-step training losses, in step order.
    pub losses: Vec<f32>,
}

fn append_record(file: &mut Option<File>, rec: &MetricRecord) -> Result<()> {
    if let Some(f) = file {
        let line = serde_json::to_string(rec).map_err(|e| Error::ConfigParse(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Runs training until `config.duration_images` images have been shown.
///
/// With a run directory, metrics are appended to `metrics.jsonl` and the state
/// is checkpointed to `checkpoint.bin` at the configured cadence and at the end.
/// A failing step leaves the last good checkpoint in place.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    state: TrainState<f32>,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), &dataset.images, dataset.labels.as_deref(), state)?;
    let mut log = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("metrics.jsonl"))?,
            )
        }
        None => None,
    };
    let checkpoint = |st: &TrainState<f32>| -> Result<()> {
        if let Some(dir) = run_dir {
            save_checkpoint(&Checkpoint::from_state(st, config), &dir.join("checkpoint.bin"))?;
        }
        Ok(())
    };
    let start = Instant::now();
    let mut metrics = Vec::new();
    let mut losses = Vec::new();
    let mut window = (0.0f64, 0usize, 0.0f64);
    while !trainer.done() {
        let report = trainer.step()?;
        losses.push(report.loss);
        window.0 += report.loss as f64;
        window.1 += 1;
        window.2 += report.sigma_mean;
        let st = &trainer.state;
        if st.step % config.metrics_every == 0 || trainer.done() {
            let rec = MetricRecord {
                step: st.step,
                images_seen: st.images_seen,
                loss: window.0 / window.1 as f64,
                patch_size: report.patch_size,
                sigma_mean: window.2 / window.1 as f64,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            log::info!(
                "step {} images {} loss {:.4} patch {}",
                rec.step,
                rec.images_seen,
                rec.loss,
                rec.patch_size
            );
            append_record(&mut log, &rec)?;
            metrics.push(rec);
            window = (0.0, 0, 0.0);
        }
        if config.checkpoint_every > 0 && trainer.state.step % config.checkpoint_every == 0 {
            checkpoint(&trainer.state)?;
        }
    }
    checkpoint(&trainer.state)?;
    Ok(TrainOutcome {
        state: trainer.state,
        metrics,
        losses,
    })
}
