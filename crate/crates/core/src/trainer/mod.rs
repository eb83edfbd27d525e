//! Training runs: builds a network from a [`RunConfig`], trains it in
//! floating point or fully quantized, evaluates after every epoch, writes a
//! metrics CSV and `LBT1` checkpoints, and resumes from them bit-exactly.

mod checkpoint;
mod config;

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{epoch_order, load_split, synth_blobs, Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{
    one_hot, softmax_xent_forward, softmax_xent_forward_q, softmax_xent_grad, zeroed_fraction, Architecture,
    FloatNetwork, LayerKind, LayerParams, Network,
};
use crate::optim::{AdamState, FloatOptimizer, FloatSlotState, KahanParam, OptimizerKind, QuantizedOptimizer, SlotState};
use crate::qtensor::QTensor;
use crate::scalar::Scalar;
use crate::tensor::RealTensor;

pub use checkpoint::{Checkpoint, Counters, Payload, Record, Role, MAGIC, VERSION};
pub use config::{DataSource, EvalSplit, Mode, RunConfig, REFERENCE_LAYERS};

pub const METRICS_HEADER: &str = "step,epoch,event,train_loss,eval_accuracy,acc_saturation_count,zeroed_gradient_fraction";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    /// Written every `metrics_interval` updates: values of that update.
    Step,
    /// Written after each epoch: epoch means plus the evaluation accuracy.
    Epoch,
}

/// One metrics row. `epoch` is 0-based; `acc_saturation_count` is cumulative.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u32,
    pub event: Event,
    pub train_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub acc_saturation_count: u64,
    pub zeroed_gradient_fraction: f64,
}

impl MetricsRecord {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            if self.event == Event::Step { "step" } else { "epoch" },
            self.train_loss,
            self.eval_accuracy.map_or(String::new(), |a| a.to_string()),
            self.acc_saturation_count,
            self.zeroed_gradient_fraction
        )
    }
}

/// A network together with its optimizer, in one of the two numeric modes.
#[derive(Debug, Clone, PartialEq)]
pub enum Model<T: Scalar> {
    Float { net: FloatNetwork<T>, opt: FloatOptimizer<T> },
    Quantized { net: Network, opt: QuantizedOptimizer },
}

struct StepOutcome {
    loss: f64,
    zeroed: f64,
    saturations: u64,
}

fn argmax_rows<V: PartialOrd + Copy>(values: &[V], classes: usize) -> impl Iterator<Item = usize> + '_ {
    values.chunks(classes).map(|row| {
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        best
    })
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &RunConfig, arch: Architecture) -> Result<Self> {
        Ok(match cfg.mode {
            Mode::FpReference => {
                let net = FloatNetwork::new(arch, cfg.seed)?;
                let opt = FloatOptimizer::new(cfg.optimizer.clone(), &net.slot_lens())?;
                Model::Float { net, opt }
            }
            Mode::Quantized => {
                let net = Network::new(arch, cfg.seed, acc_bits_for(cfg))?;
                let opt = QuantizedOptimizer::new(cfg.optimizer.clone(), &net.slot_shapes())?;
                Model::Quantized { net, opt }
            }
        })
    }

    pub fn arch(&self) -> &Architecture {
        match self {
            Model::Float { net, .. } => net.arch(),
            Model::Quantized { net, .. } => net.arch(),
        }
    }

    pub fn updates(&self) -> u64 {
        match self {
            Model::Float { opt, .. } => opt.updates(),
            Model::Quantized { opt, .. } => opt.updates(),
        }
    }

    /// Predicted class per sample (argmax of the logits, ties to the lowest
    /// index). Quantized models run the quantized forward path.
    pub fn predict(&self, images: &RealTensor<T>) -> Result<Vec<usize>> {
        let classes = self.arch().num_classes();
        Ok(match self {
            Model::Float { net, .. } => argmax_rows(net.forward(images)?.0.values(), classes).collect(),
            Model::Quantized { net, .. } => argmax_rows(net.predict(images)?.codes(), classes).collect(),
        })
    }

    /// Fraction of samples whose predicted class equals the label.
    pub fn evaluate(&self, data: &Dataset<T>) -> Result<f64> {
        if data.sample_shape() != self.arch().input_shape() {
            return Err(Error::Shape(format!(
                "samples {:?} do not match the network input {:?}",
                data.sample_shape(),
                self.arch().input_shape()
            )));
        }
        if data.is_empty() {
            return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
        }
        let mut correct = 0usize;
        for start in (0..data.len()).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
            let (x, labels) = data.batch(&idx);
            correct += self.predict(&x)?.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        Ok(correct as f64 / data.len() as f64)
    }

    fn train_step(&mut self, x: &RealTensor<T>, labels: &[usize]) -> Result<StepOutcome> {
        let classes = self.arch().num_classes();
        match self {
            Model::Float { net, opt } => {
                let (logits, cache) = net.forward(x)?;
                let t = one_hot::<T>(labels, classes)?;
                let (loss, y) = softmax_xent_forward(&logits, &t)?;
                let g = softmax_xent_grad(&y, &t)?;
                let zeros = g
                    .values()
                    .chunks(classes)
                    .zip(labels)
                    .map(|(row, &l)| row.iter().enumerate().filter(|&(i, v)| i != l && *v == T::zero()).count())
                    .sum::<usize>();
                let grads = net.backward(&cache, &g)?;
                let loss = loss.to_f64_exact();
                if loss.is_finite() {
                    net.apply_gradients(&grads, opt)?;
                }
                Ok(StepOutcome { loss, zeroed: zeros as f64 / (labels.len() * (classes - 1)) as f64, saturations: 0 })
            }
            Model::Quantized { net, opt } => {
                let (logits, cache) = net.forward(&net.quantize_input(x)?)?;
                let t = one_hot::<f64>(labels, classes)?;
                let (loss, y) = softmax_xent_forward_q(&logits, &t)?;
                let g = net.logit_gradient(&y, &t)?;
                let zeroed = zeroed_fraction(&g, labels)?;
                let grads = net.backward(&cache, &g)?;
                let stats = if loss.is_finite() { net.apply_gradients(&grads, opt)? } else { Default::default() };
                Ok(StepOutcome { loss, zeroed, saturations: stats.acc_saturations })
            }
        }
    }

    /// Parameter and optimizer-state records for a checkpoint.
    pub fn records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        let mut push = |role, slot: usize, payload| out.push(Record { role, slot: slot as u32, payload });
        match self {
            Model::Float { net, opt } => {
                for (k, p) in net.params().iter().enumerate() {
                    push(Role::Weight, k, float_payload(p.weight.shape(), p.weight.values()));
                    push(Role::Bias, k, float_payload(p.bias.shape(), p.bias.values()));
                }
                for (s, slot) in opt.slots().iter().enumerate() {
                    match slot {
                        FloatSlotState::Sgd => {}
                        FloatSlotState::Momentum { velocity } => push(Role::Velocity, s, float_payload(&[velocity.len()], velocity)),
                        FloatSlotState::Adam { m, v, step } => {
                            push(Role::FirstMoment, s, float_payload(&[m.len()], m));
                            push(Role::SecondMoment, s, float_payload(&[v.len()], v));
                            push(Role::AdamSteps, s, Payload::Count(*step));
                        }
                    }
                }
            }
            Model::Quantized { net, opt } => {
                for (k, p) in net.params().iter().enumerate() {
                    push(Role::Weight, k, Payload::Codes(p.weight.theta().clone()));
                    push(Role::WeightAcc, k, Payload::Codes(p.weight.acc().clone()));
                    push(Role::Bias, k, Payload::Codes(p.bias.theta().clone()));
                    push(Role::BiasAcc, k, Payload::Codes(p.bias.acc().clone()));
                }
                for (s, slot) in opt.slots().iter().enumerate() {
                    match slot {
                        SlotState::Sgd => {}
                        SlotState::Momentum { velocity } => push(Role::Velocity, s, Payload::Codes(velocity.clone())),
                        SlotState::Adam(a) => {
                            push(Role::FirstMoment, s, Payload::Codes(a.m.clone()));
                            push(Role::SecondMoment, s, Payload::Codes(a.v.clone()));
                            push(Role::AdamSteps, s, Payload::Count(a.step));
                        }
                    }
                }
            }
        }
        out
    }

    /// Rebuilds a model from checkpoint records.
    pub fn from_checkpoint(cfg: &RunConfig, arch: Architecture, ckpt: &Checkpoint) -> Result<Self> {
        let updates = ckpt.counters.updates;
        let layers = arch.param_layers();
        let shapes: Vec<(Vec<usize>, Vec<usize>)> = layers.iter().map(|&i| arch.param_shapes(i).unwrap()).collect();
        let slot_shapes: Vec<Vec<usize>> = shapes.iter().flat_map(|(w, b)| [w.clone(), b.clone()]).collect();
        let kind = cfg.optimizer.kind;
        Ok(match cfg.mode {
            Mode::FpReference => {
                let mut values = Vec::new();
                for (k, (ws, bs)) in shapes.iter().enumerate() {
                    let w: Vec<T> = float_values(ckpt.find(Role::Weight, k as u32)?, ws)?;
                    let b: Vec<T> = float_values(ckpt.find(Role::Bias, k as u32)?, bs)?;
                    values.push((w.iter().map(|v| v.to_f64_exact()).collect(), b.iter().map(|v| v.to_f64_exact()).collect()));
                }
                let net = FloatNetwork::from_values(arch, &values)?;
                let slots = slot_shapes
                    .iter()
                    .enumerate()
                    .map(|(s, shape)| {
                        let s = s as u32;
                        let flat = [shape.iter().product::<usize>()];
                        Ok(match kind {
                            OptimizerKind::Sgd => FloatSlotState::Sgd,
                            OptimizerKind::Momentum => {
                                FloatSlotState::Momentum { velocity: float_values(ckpt.find(Role::Velocity, s)?, &flat)? }
                            }
                            OptimizerKind::Adam => FloatSlotState::Adam {
                                m: float_values(ckpt.find(Role::FirstMoment, s)?, &flat)?,
                                v: float_values(ckpt.find(Role::SecondMoment, s)?, &flat)?,
                                step: count(ckpt.find(Role::AdamSteps, s)?)?,
                            },
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Model::Float { net, opt: FloatOptimizer::from_parts(cfg.optimizer.clone(), slots, updates)? }
            }
            Mode::Quantized => {
                let mut params = Vec::new();
                for k in 0..shapes.len() as u32 {
                    let weight = KahanParam::from_parts(codes(ckpt.find(Role::Weight, k)?)?, codes(ckpt.find(Role::WeightAcc, k)?)?)?;
                    let bias = KahanParam::from_parts(codes(ckpt.find(Role::Bias, k)?)?, codes(ckpt.find(Role::BiasAcc, k)?)?)?;
                    params.push(LayerParams { weight, bias });
                }
                let net = Network::from_params(arch, params)?;
                let slots = slot_shapes
                    .iter()
                    .enumerate()
                    .map(|(s, shape)| {
                        let s = s as u32;
                        let state = match kind {
                            OptimizerKind::Sgd => SlotState::Sgd,
                            OptimizerKind::Momentum => SlotState::Momentum { velocity: codes(ckpt.find(Role::Velocity, s)?)? },
                            OptimizerKind::Adam => SlotState::Adam(AdamState {
                                m: codes(ckpt.find(Role::FirstMoment, s)?)?,
                                v: codes(ckpt.find(Role::SecondMoment, s)?)?,
                                step: count(ckpt.find(Role::AdamSteps, s)?)?,
                            }),
                        };
                        match &state {
                            SlotState::Momentum { velocity } if velocity.shape() != shape.as_slice() => {
                                Err(Error::Checkpoint(format!("velocity {s} has shape {:?}", velocity.shape())))
                            }
                            SlotState::Adam(a) if a.m.shape() != shape.as_slice() || a.v.shape() != shape.as_slice() => {
                                Err(Error::Checkpoint(format!("moments {s} do not match {shape:?}")))
                            }
                            _ => Ok(state),
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Model::Quantized { net, opt: QuantizedOptimizer::from_parts(cfg.optimizer.clone(), slots, updates)? }
            }
        })
    }
}

/// The accumulator width handed to the quantized network; without lazy
/// updates the accumulator is unused and only has to be legal.
fn acc_bits_for(cfg: &RunConfig) -> u32 {
    if cfg.optimizer.lazy {
        cfg.optimizer.acc_bits
    } else {
        let widest = cfg.weight_bits.max(cfg.classifier_weight_bits.unwrap_or(0));
        cfg.optimizer.acc_bits.max(widest)
    }
}

fn float_payload<T: Scalar>(shape: &[usize], values: &[T]) -> Payload {
    if std::mem::size_of::<T>() == 4 {
        Payload::F32 { shape: shape.to_vec(), values: values.iter().map(|v| v.to_f64_exact() as f32).collect() }
    } else {
        Payload::F64 { shape: shape.to_vec(), values: values.iter().map(|v| v.to_f64_exact()).collect() }
    }
}

fn float_values<T: Scalar>(p: &Payload, shape: &[usize]) -> Result<Vec<T>> {
    let wide = std::mem::size_of::<T>() == 8;
    let (got, values): (&[usize], Vec<T>) = match p {
        Payload::F32 { shape, values } if !wide => (shape, values.iter().map(|&v| T::from_f64_lossy(v as f64)).collect()),
        Payload::F64 { shape, values } if wide => (shape, values.iter().map(|&v| T::from_f64_lossy(v)).collect()),
        _ => return Err(Error::Checkpoint("float record has the wrong element type".into())),
    };
    if got != shape {
        return Err(Error::Checkpoint(format!("record shape {got:?}, expected {shape:?}")));
    }
    Ok(values)
}

fn codes(p: &Payload) -> Result<QTensor> {
    match p {
        Payload::Codes(q) => Ok(q.clone()),
        _ => Err(Error::Checkpoint("expected a code record".into())),
    }
}

fn count(p: &Payload) -> Result<u64> {
    match p {
        Payload::Count(n) => Ok(*n),
        _ => Err(Error::Checkpoint("expected a count record".into())),
    }
}

fn num_classes(cfg: &RunConfig) -> Result<usize> {
    match cfg.layer_specs()?.last().map(|l| l.kind) {
        Some(LayerKind::FullyConnected { outputs }) => Ok(outputs),
        _ => Err(Error::Config("the last layer must be fc(classes)".into())),
    }
}

/// Training and evaluation sets for a config.
pub fn load_data<T: Scalar>(cfg: &RunConfig) -> Result<(Dataset<T>, Dataset<T>)> {
    let classes = num_classes(cfg)?;
    let (train, test) = match &cfg.data {
        DataSource::Idx(dir) => (load_split::<T>(dir, Split::Train, classes)?, load_split::<T>(dir, Split::Test, classes)?),
        &DataSource::Blobs { classes: c, per_class, test_per_class, dim, spread, seed } => {
            if c != classes {
                return Err(Error::Config(format!("blobs have {c} classes but the classifier has {classes} outputs")));
            }
            let all = synth_blobs::<T>(c, per_class + test_per_class, dim, spread, seed)?;
            let n = c * per_class;
            let test_idx: Vec<usize> = (n..all.len()).collect();
            let (x, y) = all.batch(&test_idx);
            (all.head(n), Dataset::new(x, y, c)?)
        }
    };
    let limit = |d: Dataset<T>, n: usize| if n == 0 { d } else { d.head(n) };
    let train = limit(train, cfg.train_limit);
    let eval = match cfg.eval_on {
        EvalSplit::Train => limit(train.clone(), cfg.eval_limit),
        EvalSplit::Test => limit(test, cfg.eval_limit),
    };
    Ok((train, eval))
}

/// Result of [`Trainer::run`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs_completed: u32,
    /// The last epoch row, if any epoch completed.
    pub last_epoch: Option<MetricsRecord>,
    pub best_accuracy: Option<f64>,
    /// True when `max_steps` ended the run before the last epoch.
    pub stopped_early: bool,
}

impl TrainSummary {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.last_epoch.as_ref().and_then(|r| r.eval_accuracy)
    }
}

/// A training run in progress.
pub struct Trainer<T: Scalar = f32> {
    cfg: RunConfig,
    train: Dataset<T>,
    eval: Dataset<T>,
    model: Model<T>,
    counters: Counters,
    records: Vec<MetricsRecord>,
}

impl<T: Scalar> Trainer<T> {
    /// A fresh run. Truncates the metrics file if `out_dir` is set.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, eval) = load_data::<T>(&cfg)?;
        let arch = Architecture::new(train.sample_shape().to_vec(), cfg.layer_specs()?)?;
        let model = Model::new(&cfg, arch)?;
        let trainer = Trainer { cfg, train, eval, model, counters: Counters::default(), records: Vec::new() };
        if let Some(path) = trainer.metrics_path() {
            let dir = path.parent().unwrap();
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            std::fs::write(&path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&path, e))?;
        }
        Ok(trainer)
    }

    /// Continues the run saved in `path`. Output goes to the checkpoint's
    /// directory unless overridden; the metrics file there is appended to.
    pub fn resume<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let mut cfg = RunConfig::parse(&ckpt.config_text)?;
        cfg.out_dir = path.parent().map(Path::to_path_buf);
        cfg.apply_overrides(overrides)?;
        let (train, eval) = load_data::<T>(&cfg)?;
        if train.sample_shape() != ckpt.input_shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "checkpoint input {:?} does not match the data {:?}",
                ckpt.input_shape,
                train.sample_shape()
            )));
        }
        let arch = Architecture::new(ckpt.input_shape.clone(), cfg.layer_specs()?)?;
        let model = Model::from_checkpoint(&cfg, arch, &ckpt)?;
        let trainer = Trainer { cfg, train, eval, model, counters: ckpt.counters, records: Vec::new() };
        if let Some(path) = trainer.metrics_path() {
            let dir = path.parent().unwrap();
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            if !path.exists() {
                std::fs::write(&path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(trainer)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn train_data(&self) -> &Dataset<T> {
        &self.train
    }

    pub fn eval_data(&self) -> &Dataset<T> {
        &self.eval
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    /// Metrics rows produced by this process (a resumed run starts empty).
    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    fn metrics_path(&self) -> Option<PathBuf> {
        self.cfg.out_dir.as_ref().map(|d| d.join(METRICS_FILE))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut counters = self.counters.clone();
        counters.updates = self.model.updates();
        Checkpoint {
            config_text: self.cfg.to_text(false),
            input_shape: self.model.arch().input_shape().to_vec(),
            counters,
            records: self.model.records(),
        }
    }

    fn save(&self, name: &str) -> Result<()> {
        if let Some(dir) = &self.cfg.out_dir {
            self.checkpoint().save(&dir.join(name))?;
        }
        Ok(())
    }

    fn emit(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(path) = self.metrics_path() {
            let mut f = OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", record.to_csv_line()).map_err(|e| Error::io(&path, e))?;
        }
        self.records.push(record);
        Ok(())
    }

    /// Runs until all epochs are done or `max_steps` updates have been made.
    /// Writes `best.ckpt` whenever the evaluation accuracy improves and
    /// `final.ckpt` when the run stops.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let n = self.train.len();
        let mut stopped_early = false;
        'epochs: while self.counters.epoch < self.cfg.epochs {
            let order = epoch_order(n, self.cfg.seed, self.counters.epoch);
            while (self.counters.epoch_pos as usize) < n {
                if self.cfg.max_steps > 0 && self.counters.step >= self.cfg.max_steps {
                    stopped_early = true;
                    break 'epochs;
                }
                let start = self.counters.epoch_pos as usize;
                let end = (start + self.cfg.batch_size).min(n);
                let (x, labels) = self.train.batch(&order[start..end]);
                let out = self.model.train_step(&x, &labels)?;
                if !out.loss.is_finite() {
                    return Err(Error::Diverged { step: self.counters.step, epoch: self.counters.epoch });
                }
                let c = &mut self.counters;
                c.step += 1;
                c.epoch_pos = end as u64;
                c.epoch_loss_sum += out.loss;
                c.epoch_zeroed_sum += out.zeroed;
                c.epoch_batches += 1;
                c.acc_saturations += out.saturations;
                if self.cfg.metrics_interval > 0 && c.step.is_multiple_of(self.cfg.metrics_interval) {
                    let record = MetricsRecord {
                        step: c.step,
                        epoch: c.epoch,
                        event: Event::Step,
                        train_loss: out.loss,
                        eval_accuracy: None,
                        acc_saturation_count: c.acc_saturations,
                        zeroed_gradient_fraction: out.zeroed,
                    };
                    self.emit(record)?;
                }
            }
            let accuracy = self.model.evaluate(&self.eval)?;
            let c = &self.counters;
            let batches = c.epoch_batches.max(1) as f64;
            let record = MetricsRecord {
                step: c.step,
                epoch: c.epoch,
                event: Event::Epoch,
                train_loss: c.epoch_loss_sum / batches,
                eval_accuracy: Some(accuracy),
                acc_saturation_count: c.acc_saturations,
                zeroed_gradient_fraction: c.epoch_zeroed_sum / batches,
            };
            self.emit(record)?;
            let c = &mut self.counters;
            c.epoch += 1;
            c.epoch_pos = 0;
            c.epoch_loss_sum = 0.0;
            c.epoch_zeroed_sum = 0.0;
            c.epoch_batches = 0;
            if c.best_accuracy.is_none_or(|b| accuracy > b) {
                c.best_accuracy = Some(accuracy);
                self.save(BEST_CHECKPOINT)?;
            }
        }
        self.save(FINAL_CHECKPOINT)?;
        Ok(TrainSummary {
            steps: self.counters.step,
            epochs_completed: self.counters.epoch,
            last_epoch: self.records.iter().rev().find(|r| r.event == Event::Epoch).cloned(),
            best_accuracy: self.counters.best_accuracy,
            stopped_early,
        })
    }
}

/// Runs a fresh training job to completion.
pub fn train<T: Scalar>(cfg: RunConfig) -> Result<TrainSummary> {
    Trainer::<T>::new(cfg)?.run()
}

/// Loads a checkpointed model and its config.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(RunConfig, Model<T>)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ckpt.config_text)?;
    let arch = Architecture::new(ckpt.input_shape.clone(), cfg.layer_specs()?)?;
    let model = Model::from_checkpoint(&cfg, arch, &ckpt)?;
    Ok((cfg, model))
}

/// Accuracy of a checkpointed model on the test split of an IDX directory.
pub fn evaluate_checkpoint<T: Scalar>(checkpoint: &Path, data_dir: &Path) -> Result<f64> {
    let (_, model) = load_model::<T>(checkpoint)?;
    let data = load_split::<T>(data_dir, Split::Test, model.arch().num_classes())?;
    model.evaluate(&data)
}
