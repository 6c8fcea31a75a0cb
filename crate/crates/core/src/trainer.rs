//! Joint optimization of the task loss and the filter-autoencoder losses.
//!
//! Each step records one tape for `L = L_task + λ_rec · Σ_layers L_rec`,
//! runs a single backward pass, applies SGD (optionally with momentum) to
//! every trainable array, then advances the mask schedule of each ALF layer.

use std::io::Write;
use std::path::Path;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cost::{code_max, gain_to_f64};
use crate::data::{argmax_rows, shuffled_indices, Dataset};
use crate::deploy::DeployedModel;
use crate::error::{AlfError, Result};
use crate::factorizer::{masked_count, FactorizerState, DEFAULT_PRUNING_RATE, DEFAULT_UPDATE_PERIOD};
use crate::model::{Architecture, Model, Recorded};
use crate::ops;
use crate::tensor::{Activation, Real, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Multiplies the learning rate every `lr_decay_every` epochs (0 disables).
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Weight of the summed reconstruction losses.
    pub lambda_rec: f64,
    /// Mask update period in steps.
    pub m: usize,
    /// Fraction of code channels masked off.
    pub pr: f64,
    pub seed: u64,
    /// Default intermediate activation of ALF layers.
    pub sigma_inter: Activation,
    /// Global gradient-norm clip; off unless set.
    pub grad_clip: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            lr_decay: 0.1,
            lr_decay_every: 30,
            lambda_rec: 1.0,
            m: DEFAULT_UPDATE_PERIOD,
            pr: DEFAULT_PRUNING_RATE,
            seed: 0,
            sigma_inter: Activation::Identity,
            grad_clip: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AlfError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and non-negative", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.lambda_rec >= 0.0 && self.lambda_rec.is_finite()) {
            return bad(format!("lambda_rec {} must be finite and non-negative", self.lambda_rec));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        FactorizerState::new(self.m, self.pr)?;
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.learning_rate;
        }
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub task: f64,
    /// Unweighted sum of the per-layer reconstruction losses.
    pub reconstruction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub rec_loss: f64,
    pub accuracy: f64,
    /// Masked code channels per ALF layer.
    pub masked_count: Vec<usize>,
    /// Parameter gain per ALF layer at its current effective width.
    pub gain: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub records: Vec<EpochRecord>,
}

pub const METRICS_COLUMNS: [&str; 6] = ["epoch", "task_loss", "rec_loss", "accuracy", "masked_count", "gain"];

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

impl Metrics {
    pub fn push(&mut self, r: EpochRecord) {
        self.records.push(r);
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// CSV in [`METRICS_COLUMNS`] order. Per-layer columns list one value per
    /// ALF layer separated by `;`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(METRICS_COLUMNS)?;
        for r in &self.records {
            let gains: Vec<String> = r.gain.iter().map(|g| format!("{g:.6}")).collect();
            w.write_record([
                r.epoch.to_string(),
                format!("{:.9}", r.task_loss),
                format!("{:.9}", r.rec_loss),
                format!("{:.6}", r.accuracy),
                join(&r.masked_count),
                gains.join(";"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Anything that maps a batch to `[N,1,1,classes]` logits.
pub trait Classifier {
    fn logits(&self, x: &Tensor4<f32>) -> Result<Tensor4<f32>>;
}

impl Classifier for Model<f32> {
    fn logits(&self, x: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        self.forward(x)
    }
}

impl Classifier for DeployedModel {
    fn logits(&self, x: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        self.forward(x)
    }
}

const EVAL_BATCH: usize = 256;

/// Top-1 accuracy in `[0, 1]`; 0 for an empty dataset.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_BATCH).min(data.len());
        let (x, y) = data.range(start, end);
        let pred = argmax_rows(&model.logits(&x)?);
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        start = end;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean softmax cross-entropy; the plain-function form of the tape op.
pub fn task_loss(logits: &Tensor4<f32>, labels: &[usize]) -> Result<f64> {
    Ok(ops::softmax_cross_entropy(logits, labels)?.0)
}

/// Records `L = L_task + λ_rec · Σ L_rec`; returns `(total, task)` nodes.
pub fn combined_loss<T: Real>(tape: &mut Tape<T>, rec: &Recorded, labels: &[usize], lambda_rec: f64) -> Result<(Var, Var)> {
    let task = tape.softmax_cross_entropy(rec.logits, labels)?;
    let Some((&first, rest)) = rec.reconstruction.split_first() else {
        return Ok((task, task));
    };
    let mut sum = first;
    for &r in rest {
        sum = tape.add(sum, r)?;
    }
    let weighted = tape.scale(sum, T::from_f64(lambda_rec));
    Ok((tape.add(task, weighted)?, task))
}

/// Owns a model together with its optimizer and mask-schedule state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model<f32>,
    pub factorizers: Vec<FactorizerState>,
    config: TrainingConfig,
    velocity: Vec<Tensor4<f32>>,
    rng: ChaCha8Rng,
    epoch: usize,
    global_step: usize,
    lr: f64,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        for (i, b) in model.alf_blocks().enumerate() {
            let kept = b.code_channels() - masked_count(config.pr, b.code_channels());
            let limit = code_max(b.in_channels() as u64, b.out_channels() as u64, b.kernel() as u64);
            if kept as u64 >= limit {
                warn!(
                    "ALF layer {i} keeps {kept} code channels at pr {}, not below the break-even width {limit}",
                    config.pr
                );
            }
        }
        let factorizers = model
            .alf_blocks()
            .map(|_| FactorizerState::new(config.m, config.pr))
            .collect::<Result<Vec<_>>>()?;
        let velocity = model
            .params()
            .iter()
            .map(|p| Tensor4::zeros(p.dims(), p.layout()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let lr = config.learning_rate;
        Ok(Self {
            model,
            factorizers,
            config,
            velocity,
            rng,
            epoch: 0,
            global_step: 0,
            lr,
        })
    }

    /// Fresh model from `arch`, initialized from `config.seed`.
    pub fn from_architecture(arch: &Architecture, config: TrainingConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::init(arch, config.sigma_inter, &mut rng)?;
        Self::new(model, config)
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    /// Overrides the current learning rate (the epoch schedule resets it at
    /// the start of every epoch of [`Trainer::train_loop`]).
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One forward/backward/update over a batch, followed by the mask
    /// schedule.
    pub fn train_step(&mut self, x: &Tensor4<f32>, labels: &[usize]) -> Result<StepLosses> {
        let mut tape = Tape::new();
        let rec = self.model.record(&mut tape, x)?;
        let (total, task) = combined_loss(&mut tape, &rec, labels, self.config.lambda_rec)?;
        let losses = StepLosses {
            total: tape.scalar(total) as f64,
            task: tape.scalar(task) as f64,
            reconstruction: rec.reconstruction.iter().map(|&r| tape.scalar(r) as f64).sum(),
        };
        if !losses.total.is_finite() {
            return Err(AlfError::Diverged {
                epoch: self.epoch,
                step: self.global_step,
                what: format!("loss is {} (task {}, reconstruction {})", losses.total, losses.task, losses.reconstruction),
            });
        }

        let mut grads = tape.backward(total)?;
        let mut grad_list: Vec<Tensor4<f32>> = rec.params.iter().map(|&p| grads.take(p)).collect();
        if let Some(clip) = self.config.grad_clip {
            let norm = grad_list
                .iter()
                .flat_map(|g| g.data().iter())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let k = (clip / norm) as f32;
                grad_list.iter_mut().for_each(|g| *g = g.scale(k));
            }
        }

        let lr = self.lr as f32;
        let mu = self.config.momentum as f32;
        let momentum = self.config.optimizer == OptimizerKind::SgdMomentum;
        for ((param, vel), grad) in self.model.params_mut().into_iter().zip(&mut self.velocity).zip(&grad_list) {
            if momentum {
                for (v, &g) in vel.data_mut().iter_mut().zip(grad.data()) {
                    *v = mu * *v + g;
                }
                for (p, &v) in param.data_mut().iter_mut().zip(vel.data()) {
                    *p -= lr * v;
                }
            } else {
                for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p -= lr * g;
                }
            }
            if !param.is_finite() {
                return Err(AlfError::Diverged {
                    epoch: self.epoch,
                    step: self.global_step,
                    what: "non-finite parameter after update".into(),
                });
            }
        }

        for (state, block) in self.factorizers.iter_mut().zip(self.model.alf_blocks_mut()) {
            if state.step_schedule(block)? {
                debug!("step {}: mask {:?}", self.global_step, block.mask());
            }
        }
        self.global_step += 1;
        Ok(losses)
    }

    /// Runs `config.epochs` epochs over shuffled mini-batches of `train`,
    /// evaluating on `test` after each.
    pub fn train_loop(&mut self, train: &Dataset, test: &Dataset) -> Result<Metrics> {
        let mut metrics = Metrics::default();
        if self.config.epochs == 0 {
            return Ok(metrics);
        }
        if train.is_empty() {
            return Err(AlfError::Empty("training set"));
        }
        for epoch in 0..self.config.epochs {
            self.epoch = epoch;
            self.lr = self.config.learning_rate_at(epoch);
            let order = shuffled_indices(train.len(), &mut self.rng);
            let (mut task_sum, mut rec_sum, mut batches) = (0.0, 0.0, 0usize);
            for chunk in order.chunks(self.config.batch_size) {
                let (x, y) = train.batch(chunk);
                let l = self.train_step(&x, &y)?;
                task_sum += l.task;
                rec_sum += l.reconstruction;
                batches += 1;
            }
            let accuracy = evaluate(&self.model, test)?;
            let report = self.model.cost_report()?;
            let alf_entries: Vec<_> = report
                .entries
                .iter()
                .filter(|e| e.kind == crate::cost::LayerKind::Alf)
                .collect();
            let record = EpochRecord {
                epoch: epoch + 1,
                task_loss: task_sum / batches as f64,
                rec_loss: rec_sum / batches as f64,
                accuracy,
                masked_count: self.model.alf_blocks().map(|b| b.code_channels() - b.active_channels()).collect(),
                gain: alf_entries.iter().map(|e| gain_to_f64(&e.gain_params)).collect(),
            };
            info!(
                "epoch {}: task {:.4} rec {:.5} acc {:.4} masked {:?}",
                record.epoch, record.task_loss, record.rec_loss, record.accuracy, record.masked_count
            );
            metrics.push(record);
        }
        Ok(metrics)
    }
}

/// Training-mode model plus the state needed to resume or deploy it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub training: TrainingConfig,
    pub model: Model<f32>,
    pub factorizers: Vec<FactorizerState>,
}

impl Checkpoint {
    pub fn from_trainer(architecture: Architecture, trainer: &Trainer) -> Self {
        Self {
            architecture,
            training: trainer.config.clone(),
            model: trainer.model.clone(),
            factorizers: trainer.factorizers.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
