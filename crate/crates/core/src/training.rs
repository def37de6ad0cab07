//! Two-phase optimisation (kernel estimator alone, then everything jointly),
//! the learning-rate schedule and checkpoint files.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::degradation::{sample_training_batch, BatchOptions, Clip, TrainingBatch};
use crate::error::{Error, Result};
use crate::flow::{FlowMethod, FlowProvider};
use crate::graph::Graph;
use crate::kernel_estimation::kernel_cycle_loss_graph;
use crate::model::{frame_slice, prepare_input, Bsvsr, ModelConfig};
use crate::nn::{ParamId, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr_patch: usize,
    pub base_lr: f64,
    pub phase1_lr: f64,
    pub halving_period_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    pub phase1_steps: usize,
    pub seed: u64,
    pub sigma_range: (f64, f64),
    pub kernel_weight: f64,
    pub sr_weight: f64,
    pub flow: FlowMethod,
    pub augment: bool,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            model: ModelConfig::full(),
            batch_size: 32,
            lr_patch: 64,
            base_lr: 1e-4,
            phase1_lr: 1e-4,
            halving_period_epochs: 25,
            total_epochs: 50,
            steps_per_epoch: 1000,
            phase1_steps: 20000,
            seed: 0,
            sigma_range: (0.4, 2.0),
            kernel_weight: 1.0,
            sr_weight: 1.0,
            flow: FlowMethod::BlockMatching,
            augment: true,
            adam: AdamConfig::default(),
        }
    }

    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            batch_size: 4,
            lr_patch: 16,
            base_lr: 2e-3,
            phase1_lr: 1e-3,
            halving_period_epochs: 20,
            total_epochs: 40,
            steps_per_epoch: 50,
            phase1_steps: 500,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [
            ("train.batch_size", self.batch_size),
            ("train.lr_patch", self.lr_patch),
            ("train.halving_period_epochs", self.halving_period_epochs),
            ("train.steps_per_epoch", self.steps_per_epoch),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.lr_patch % self.model.spatial_multiple() != 0 {
            return Err(Error::config(
                "train.lr_patch",
                format!("must be a multiple of {}", self.model.spatial_multiple()),
            ));
        }
        if !(self.base_lr > 0.0) || !(self.phase1_lr > 0.0) {
            return Err(Error::config("train.base_lr", "must be positive"));
        }
        let (lo, hi) = self.sigma_range;
        if !(lo > 0.0) || hi < lo || !hi.is_finite() {
            return Err(Error::config("train.sigma_range", "must satisfy 0 < lo <= hi"));
        }
        if self.kernel_weight < 0.0 || self.sr_weight < 0.0 {
            return Err(Error::config("train.kernel_weight", "weights must be non-negative"));
        }
        Ok(())
    }

    pub fn phase2_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn batch_options(&self) -> BatchOptions {
        BatchOptions {
            batch_size: self.batch_size,
            lr_patch: self.lr_patch,
            scale: self.model.scale,
            frames: self.model.frames,
            kernel_size: self.model.kernel_size,
            sigma_range: self.sigma_range,
            augment: self.augment,
        }
    }
}

/// `base_lr * 0.5^floor(epoch / halving_period)`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    let halvings = (epoch / config.halving_period_epochs.max(1)).min(1000) as i32;
    config.base_lr * 0.5f64.powi(halvings)
}

/// Mean absolute difference.
pub fn sr_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    pred.expect_same_shape(gt).map_err(|e| Error::invalid(e.to_string()))?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum();
    Ok(total / pred.numel() as f64)
}

pub fn total_loss(l_kernel: f64, l_sr: f64) -> f64 {
    l_kernel + l_sr
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Kernel,
    Joint,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub phase: Phase,
    pub step: u64,
    pub l_kernel: f64,
    pub l_sr: Option<f64>,
    pub lr: f64,
    pub wall_time: f64,
}

/// Everything needed to resume or deploy a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    /// Completed joint-phase epochs.
    pub epoch: usize,
    pub kernel_steps: u64,
    pub joint_steps: u64,
    /// Next batch index drawn from the data stream.
    pub data_index: u64,
    pub params: ParamStore<T>,
    pub adam: Adam<T>,
}

const MAGIC: &[u8; 8] = b"BSVSRCKP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    adam_steps: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    config: TrainConfig,
    epoch: usize,
    kernel_steps: u64,
    joint_steps: u64,
    data_index: u64,
    adam: AdamConfig,
    tensors: Vec<TensorEntry>,
}

impl<T: Real> Checkpoint<T> {
    /// Freshly initialised parameters for `config`.
    pub fn fresh(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (_, params) = Bsvsr::init::<T>(config.model.clone(), config.seed)?;
        let adam = Adam::new(&params, config.adam);
        Ok(Self {
            config,
            epoch: 0,
            kernel_steps: 0,
            joint_steps: 0,
            data_index: 0,
            params,
            adam,
        })
    }

    /// Fail unless the parameters match the layout `model` would build.
    pub fn ensure_compatible(&self, model: &ModelConfig) -> Result<()> {
        let (_, reference) = Bsvsr::init::<T>(model.clone(), 0)?;
        if reference.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                reference.len()
            )));
        }
        for ((_, rn, rt), (_, cn, ct)) in reference.iter().zip(self.params.iter()) {
            if rn != cn {
                return Err(Error::Incompatible(format!(
                    "parameter `{cn}` found where `{rn}` expected"
                )));
            }
            if rt.shape() != ct.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter `{rn}` has shape {:?}, model expects {:?}",
                    ct.shape(),
                    rt.shape()
                )));
            }
        }
        Ok(())
    }

    /// Architecture plus the stored parameters.
    pub fn model(&self) -> Result<Bsvsr> {
        self.ensure_compatible(&self.config.model)?;
        let mut scratch = ParamStore::<T>::new();
        Bsvsr::new(self.config.model.clone(), &mut scratch, 0)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            dtype: T::DTYPE.to_string(),
            config: self.config.clone(),
            epoch: self.epoch,
            kernel_steps: self.kernel_steps,
            joint_steps: self.joint_steps,
            data_index: self.data_index,
            adam: self.adam.config,
            tensors: self
                .params
                .iter()
                .map(|(id, name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    adam_steps: self.adam.steps[id.0],
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 3 * self.params.numel() * T::BYTES + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for group in [
            self.params.iter().map(|(_, _, t)| t).collect::<Vec<_>>(),
            self.adam.m.iter().collect(),
            self.adam.v.iter().collect(),
        ] {
            for t in group {
                for &v in t.data() {
                    v.write_le(&mut out);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Parse(format!("corrupt checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| corrupt("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| corrupt(&e.to_string()))?;
        if manifest.dtype != T::DTYPE {
            return Err(Error::Incompatible(format!(
                "checkpoint holds {} values, expected {}",
                manifest.dtype,
                T::DTYPE
            )));
        }
        let total: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let mut data = &bytes[20 + len..];
        if data.len() != 3 * total * T::BYTES {
            return Err(corrupt("payload size does not match manifest"));
        }
        let mut read = |shape: &[usize]| -> Result<Tensor<T>> {
            let n: usize = shape.iter().product();
            let vals = data[..n * T::BYTES].chunks(T::BYTES).map(T::read_le).collect();
            data = &data[n * T::BYTES..];
            Tensor::from_vec(shape, vals)
        };
        let mut params = ParamStore::new();
        for t in &manifest.tensors {
            params.register(t.name.clone(), read(&t.shape)?)?;
        }
        let m = manifest.tensors.iter().map(|t| read(&t.shape)).collect::<Result<Vec<_>>>()?;
        let v = manifest.tensors.iter().map(|t| read(&t.shape)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: manifest.config,
            epoch: manifest.epoch,
            kernel_steps: manifest.kernel_steps,
            joint_steps: manifest.joint_steps,
            data_index: manifest.data_index,
            params,
            adam: Adam {
                config: manifest.adam,
                steps: manifest.tensors.iter().map(|t| t.adam_steps).collect(),
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Load and check against the layout of `model`.
    pub fn load_for(path: &Path, model: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.ensure_compatible(model)?;
        Ok(ck)
    }
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_kernel: f64,
    pub l_sr: Option<f64>,
}

/// Drives both phases over an in-memory dataset.
pub struct Trainer<'d, T: Real> {
    pub state: Checkpoint<T>,
    pub model: Bsvsr,
    data: &'d [Clip],
    provider: Box<dyn FlowProvider>,
    started: Instant,
}

fn check_finite(phase: Phase, step: u64, losses: &StepLosses) -> Result<()> {
    let sr = losses.l_sr.unwrap_or(0.0);
    if !losses.l_kernel.is_finite() || !sr.is_finite() {
        return Err(Error::NonFinite(format!(
            "{phase:?} step {step}: l_kernel={} l_sr={sr}; lower the learning rate",
            losses.l_kernel
        )));
    }
    Ok(())
}

impl<'d, T: Real> Trainer<'d, T> {
    pub fn new(state: Checkpoint<T>, data: &'d [Clip]) -> Result<Self> {
        state.config.validate()?;
        let model = state.model()?;
        let provider = state.config.flow.provider();
        Ok(Self {
            state,
            model,
            data,
            provider,
            started: Instant::now(),
        })
    }

    fn next_batch(&mut self) -> Result<TrainingBatch> {
        let cfg = &self.state.config;
        let b = sample_training_batch(self.data, &cfg.batch_options(), cfg.seed, self.state.data_index)?;
        self.state.data_index += 1;
        Ok(b)
    }

    /// Cycle loss of the kernel estimator alone and its gradients.
    pub fn kernel_gradients(
        &self,
        batch: &TrainingBatch,
    ) -> Result<(StepLosses, BTreeMap<ParamId, Tensor<T>>)> {
        let s = self.model.config.scale;
        let mut g = Graph::new(&self.state.params);
        let lr = batch.lr.cast::<T>();
        let mid = g.constant(frame_slice(&lr, self.model.config.frames / 2)?);
        let gt = g.constant(batch.gt.cast::<T>());
        let k = self.model.estimate(&mut g, mid)?;
        let loss = kernel_cycle_loss_graph(&mut g, gt, mid, k, s)?;
        let lk = g.scalar(loss).as_f64();
        let grads = g.backward(loss)?;
        Ok((StepLosses { l_kernel: lk, l_sr: None }, grads.by_param))
    }

    /// Weighted `L_kernel + L_SR` over the whole network and its gradients.
    pub fn joint_gradients(
        &self,
        batch: &TrainingBatch,
    ) -> Result<(StepLosses, BTreeMap<ParamId, Tensor<T>>)> {
        let cfg = &self.state.config;
        let input = prepare_input::<T>(&batch.lr, self.provider.as_ref())?;
        let mut g = Graph::new(&self.state.params);
        let out = self.model.forward(&mut g, &input)?;
        let gt = g.constant(batch.gt.cast::<T>());
        let l_sr = g.l1(out.sr, gt)?;
        let l_k = kernel_cycle_loss_graph(&mut g, gt, out.lr_mid, out.kernel, self.model.config.scale)?;
        let a = g.scale(l_k, cfg.kernel_weight);
        let b = g.scale(l_sr, cfg.sr_weight);
        let total = g.add(a, b)?;
        let losses = StepLosses {
            l_kernel: g.scalar(l_k).as_f64(),
            l_sr: Some(g.scalar(l_sr).as_f64()),
        };
        let grads = g.backward(total)?;
        Ok((losses, grads.by_param))
    }

    pub fn kernel_step(&mut self) -> Result<LogRow> {
        let batch = self.next_batch()?;
        let (losses, grads) = self.kernel_gradients(&batch)?;
        let step = self.state.kernel_steps;
        check_finite(Phase::Kernel, step, &losses)?;
        let lr = self.state.config.phase1_lr;
        self.state.adam.update(&mut self.state.params, &grads, lr)?;
        self.state.kernel_steps += 1;
        Ok(self.row(Phase::Kernel, step, losses, lr))
    }

    pub fn joint_step(&mut self) -> Result<LogRow> {
        let batch = self.next_batch()?;
        let (losses, grads) = self.joint_gradients(&batch)?;
        let step = self.state.joint_steps;
        check_finite(Phase::Joint, step, &losses)?;
        let epoch = step as usize / self.state.config.steps_per_epoch;
        let lr = lr_at(&self.state.config, epoch);
        self.state.adam.update(&mut self.state.params, &grads, lr)?;
        self.state.joint_steps += 1;
        self.state.epoch = self.state.joint_steps as usize / self.state.config.steps_per_epoch;
        Ok(self.row(Phase::Joint, step, losses, lr))
    }

    fn row(&self, phase: Phase, step: u64, losses: StepLosses, lr: f64) -> LogRow {
        LogRow {
            phase,
            step,
            l_kernel: losses.l_kernel,
            l_sr: losses.l_sr,
            lr,
            wall_time: self.started.elapsed().as_secs_f64(),
        }
    }

    /// Run the remaining steps of the requested phases.
    pub fn run(&mut self, phases: &[Phase], observer: &mut dyn FnMut(&LogRow)) -> Result<()> {
        for phase in phases {
            match phase {
                Phase::Kernel => {
                    while (self.state.kernel_steps as usize) < self.state.config.phase1_steps {
                        let row = self.kernel_step()?;
                        observer(&row);
                    }
                }
                Phase::Joint => {
                    while (self.state.joint_steps as usize) < self.state.config.phase2_steps() {
                        let row = self.joint_step()?;
                        observer(&row);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn into_checkpoint(self) -> Checkpoint<T> {
        self.state
    }
}

/// Train from scratch through the given phases.
pub fn train(
    config: &TrainConfig,
    data: &[Clip],
    phases: &[Phase],
    observer: &mut dyn FnMut(&LogRow),
) -> Result<Checkpoint<f32>> {
    let mut trainer = Trainer::new(Checkpoint::<f32>::fresh(config.clone())?, data)?;
    trainer.run(phases, observer)?;
    Ok(trainer.into_checkpoint())
}

/// Append-only CSV training log.
pub struct CsvLog<W: std::io::Write> {
    writer: csv::Writer<W>,
}

impl<W: std::io::Write> CsvLog<W> {
    pub fn new(inner: W) -> Self {
        Self {
            writer: csv::Writer::from_writer(inner),
        }
    }

    pub fn write(&mut self, row: &LogRow) -> Result<()> {
        self.writer
            .serialize(row)
            .map_err(|e| Error::Parse(format!("training log: {e}")))?;
        self.writer
            .flush()
            .map_err(|e| Error::io("training log", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves() {
        let mut c = TrainConfig::full();
        c.base_lr = 1e-4;
        assert_eq!(lr_at(&c, 0), 1e-4);
        assert_eq!(lr_at(&c, 25), 5e-5);
        assert_eq!(lr_at(&c, 49), 5e-5);
        assert_eq!(lr_at(&c, 50), 2.5e-5);
    }

    #[test]
    fn sr_loss_constant_offset() {
        let a = Tensor::<f64>::full(&[3, 4, 4], 0.3);
        let b = Tensor::<f64>::full(&[3, 4, 4], 0.4);
        assert!((sr_loss(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(sr_loss(&a, &a).unwrap(), 0.0);
        assert!(sr_loss(&a, &Tensor::zeros(&[3, 4, 5])).is_err());
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let ck = Checkpoint::<f32>::fresh(TrainConfig::toy()).unwrap();
        assert_eq!(ck.epoch, 0);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn block_count_mismatch_is_incompatible() {
        let ck = Checkpoint::<f32>::fresh(TrainConfig::toy()).unwrap();
        let mut other = ck.config.model.clone();
        other.blocks = 1;
        assert!(matches!(ck.ensure_compatible(&other), Err(Error::Incompatible(_))));
    }
}
