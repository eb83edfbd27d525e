//! Plain and lazy-update (Kahan accumulator) SGD, momentum SGD and ADAM on
//! quantized state, plus their floating-point counterparts.
//!
//! Optimizer arithmetic runs on dequantized f64 values and every result is
//! requantized to the format of the tensor that owns it.

use crate::error::{Error, Result};
use crate::fixedpoint::{check_bits, exponent_for_max, FixedPointFormat, ZERO_TENSOR_EXPONENT};
use crate::qtensor::{quantize_slice, QTensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "momentum" => Ok(OptimizerKind::Momentum),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Invalid(format!("unknown optimizer {s:?} (expected sgd, momentum or adam)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lazy: bool,
    /// Bit width of momentum / ADAM moment tensors.
    pub state_bits: u32,
    /// Bit width of the lazy-update accumulator.
    pub acc_bits: u32,
    /// Step decay: the learning rate is multiplied by `lr_decay` every
    /// `lr_decay_interval` updates. An interval of 0 disables decay.
    pub lr_decay: f64,
    pub lr_decay_interval: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.01,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lazy: false,
            state_bits: 16,
            acc_bits: 16,
            lr_decay: 1.0,
            lr_decay_interval: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Invalid(format!("{name} must be in [0, 1), got {v}")))
            }
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        unit("momentum", self.momentum)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if !(self.epsilon > 0.0) {
            return Err(Error::Invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Invalid(format!("lr_decay must be positive, got {}", self.lr_decay)));
        }
        check_bits(self.state_bits)?;
        check_bits(self.acc_bits)
    }

    /// Learning rate in effect for update number `step` (0-based).
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        if self.lr_decay_interval == 0 {
            self.learning_rate
        } else {
            self.learning_rate * self.lr_decay.powi((step / self.lr_decay_interval) as i32)
        }
    }
}

/// A parameter tensor `theta` and its lazy-update accumulator `acc`.
///
/// The represented parameter is `theta`; `acc` holds the part of the applied
/// updates that `theta` could not yet absorb, with the opposite sign, so
/// `theta - acc` is the running full-precision parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KahanParam {
    theta: QTensor,
    acc: QTensor,
}

impl KahanParam {
    /// Pairs `theta` with an all-zero accumulator of `acc_bits`.
    pub fn new(theta: QTensor, acc_bits: u32) -> Result<Self> {
        if acc_bits < theta.format().bit_width() {
            return Err(Error::Invalid(format!(
                "accumulator bits {acc_bits} narrower than parameter bits {}",
                theta.format().bit_width()
            )));
        }
        let exponent = ZERO_TENSOR_EXPONENT.min(theta.format().exponent());
        let acc = QTensor::new(theta.shape().to_vec(), vec![0; theta.len()], FixedPointFormat::new(acc_bits, exponent)?)?;
        Ok(KahanParam { theta, acc })
    }

    pub fn from_parts(theta: QTensor, acc: QTensor) -> Result<Self> {
        if theta.shape() != acc.shape() {
            return Err(Error::Shape(format!("theta {:?} vs acc {:?}", theta.shape(), acc.shape())));
        }
        if acc.format().bit_width() < theta.format().bit_width() {
            return Err(Error::Invalid("accumulator narrower than parameter".into()));
        }
        Ok(KahanParam { theta, acc })
    }

    pub fn theta(&self) -> &QTensor {
        &self.theta
    }

    pub fn acc(&self) -> &QTensor {
        &self.acc
    }

    pub fn shape(&self) -> &[usize] {
        self.theta.shape()
    }

    /// `theta - acc`, the parameter including not-yet-applied updates.
    pub fn tracked_values(&self) -> Vec<f64> {
        self.theta.dequantize_f64().iter().zip(self.acc.dequantize_f64()).map(|(t, a)| t - a).collect()
    }
}

/// Counters produced by one optimizer call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    /// Accumulator elements clamped because they exceeded the accumulator range.
    pub acc_saturations: u64,
}

impl std::ops::AddAssign for StepStats {
    fn add_assign(&mut self, rhs: Self) {
        self.acc_saturations += rhs.acc_saturations;
    }
}

fn check_shape(p: &KahanParam, other: &QTensor, what: &str) -> Result<()> {
    if p.shape() != other.shape() {
        return Err(Error::Shape(format!("{what} {:?} for parameter {:?}", other.shape(), p.shape())));
    }
    Ok(())
}

fn requantize(shape: &[usize], values: &[f64], bits: u32) -> Result<QTensor> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    quantize_slice(shape.to_vec(), values, bits)
}

/// `theta <- Q(theta - update)` with a refreshed exponent.
pub fn apply_update_plain(p: &mut KahanParam, update: &[f64]) -> Result<StepStats> {
    if update.len() != p.theta.len() {
        return Err(Error::Shape(format!("update of {} for parameter {:?}", update.len(), p.shape())));
    }
    let next: Vec<f64> = p.theta.dequantize_f64().iter().zip(update).map(|(t, u)| t - u).collect();
    p.theta = requantize(p.theta.shape(), &next, p.theta.format().bit_width())?;
    Ok(StepStats::default())
}

/// The four lines of the lazy update, elementwise:
/// `acc += u; theta' = Q(theta - acc); acc += theta' - theta; theta = theta'`.
pub fn apply_update_lazy(p: &mut KahanParam, update: &[f64]) -> Result<StepStats> {
    if update.len() != p.theta.len() {
        return Err(Error::Shape(format!("update of {} for parameter {:?}", update.len(), p.shape())));
    }
    let (tf, af) = (p.theta.format(), p.acc.format());
    let (m, n) = (tf.bit_width(), af.bit_width());
    let theta = |i: usize, codes: &[i32]| tf.value_of(codes[i] as i64);

    let mut work = Vec::with_capacity(update.len());
    let (mut max_acc, mut reach) = (0.0f64, 0.0f64);
    for (i, (&c, &u)) in p.acc.codes().iter().zip(update).enumerate() {
        let a = af.value_of(c as i64) + u;
        if !a.is_finite() {
            return Err(Error::NonFinite);
        }
        max_acc = max_acc.max(a.abs());
        reach = reach.max((theta(i, p.theta.codes()) - a).abs());
        work.push(a);
    }
    // acc may be as coarse as theta is now or as the candidate theta will be.
    let cap = tf.exponent().max(exponent_for_max(reach, m, ZERO_TENSOR_EXPONENT));
    let acc1 = FixedPointFormat::new(n, exponent_for_max(max_acc, n, ZERO_TENSOR_EXPONENT).min(cap))?;
    let mut saturations = 0;
    let mut max_candidate = 0.0f64;
    for (i, a) in work.iter_mut().enumerate() {
        let (c, clamped) = capped_code(acc1, *a);
        saturations += clamped as u64;
        *a = acc1.value_of(c);
        let candidate = theta(i, p.theta.codes()) - *a;
        if !candidate.is_finite() {
            return Err(Error::NonFinite);
        }
        max_candidate = max_candidate.max(candidate.abs());
    }

    let next = FixedPointFormat::new(m, exponent_for_max(max_candidate, m, ZERO_TENSOR_EXPONENT))?;
    let mut max_residual = 0.0f64;
    p.theta.rewrite(next, |i, old| {
        let t = tf.value_of(old as i64);
        let c = next.code_of(t - work[i]);
        work[i] += next.value_of(c) - t;
        max_residual = max_residual.max(work[i].abs());
        c as i32
    });

    let acc2 = FixedPointFormat::new(n, exponent_for_max(max_residual, n, ZERO_TENSOR_EXPONENT).min(next.exponent()))?;
    p.acc.rewrite(acc2, |i, _| {
        let (c, clamped) = capped_code(acc2, work[i]);
        saturations += clamped as u64;
        c as i32
    });
    Ok(StepStats { acc_saturations: saturations })
}

/// Code of `v` under `format` and whether it had to be clamped.
fn capped_code(format: FixedPointFormat, v: f64) -> (i64, bool) {
    let c = format.code_of(v);
    let clamped = (c == format.max_code() || c == format.min_code()) && format.value_of(c) != v && {
        let unclamped = (v / format.step()).round_ties_even();
        unclamped > format.max_code() as f64 || unclamped < format.min_code() as f64
    };
    (c, clamped)
}

fn apply_update(p: &mut KahanParam, update: &[f64], lazy: bool) -> Result<StepStats> {
    if lazy {
        apply_update_lazy(p, update)
    } else {
        apply_update_plain(p, update)
    }
}

fn scaled(grad: &QTensor, lr: f64) -> Vec<f64> {
    let f = grad.format();
    grad.codes().iter().map(|&c| lr * f.value_of(c as i64)).collect()
}

pub fn sgd_step_plain(p: &mut KahanParam, grad: &QTensor, cfg: &OptimizerConfig) -> Result<StepStats> {
    check_shape(p, grad, "gradient")?;
    apply_update_plain(p, &scaled(grad, cfg.learning_rate))
}

pub fn sgd_step_lazy(p: &mut KahanParam, grad: &QTensor, cfg: &OptimizerConfig) -> Result<StepStats> {
    check_shape(p, grad, "gradient")?;
    apply_update_lazy(p, &scaled(grad, cfg.learning_rate))
}

/// `v <- Q(mu v + lr g)` at `state_bits`, then `theta -= v` (plain or lazy).
pub fn momentum_step(p: &mut KahanParam, grad: &QTensor, velocity: &mut QTensor, cfg: &OptimizerConfig) -> Result<StepStats> {
    check_shape(p, grad, "gradient")?;
    check_shape(p, velocity, "velocity")?;
    let v: Vec<f64> = velocity
        .dequantize_f64()
        .iter()
        .zip(grad.dequantize_f64())
        .map(|(v, g)| cfg.momentum * v + cfg.learning_rate * g)
        .collect();
    *velocity = requantize(p.shape(), &v, cfg.state_bits)?;
    apply_update(p, &velocity.dequantize_f64(), cfg.lazy)
}

/// Quantized ADAM moments. `step` counts completed updates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdamState {
    pub m: QTensor,
    pub v: QTensor,
    pub step: u64,
}

impl AdamState {
    pub fn zeros(shape: &[usize], state_bits: u32) -> Result<Self> {
        Ok(AdamState { m: QTensor::zeros(shape.to_vec(), state_bits)?, v: QTensor::zeros(shape.to_vec(), state_bits)?, step: 0 })
    }
}

/// Bias-corrected ADAM update with moments stored at `state_bits`.
pub fn adam_step(p: &mut KahanParam, grad: &QTensor, state: &mut AdamState, cfg: &OptimizerConfig) -> Result<StepStats> {
    check_shape(p, grad, "gradient")?;
    check_shape(p, &state.m, "first moment")?;
    check_shape(p, &state.v, "second moment")?;
    let g = grad.dequantize_f64();
    let m: Vec<f64> = state.m.dequantize_f64().iter().zip(&g).map(|(m, g)| cfg.beta1 * m + (1.0 - cfg.beta1) * g).collect();
    let v: Vec<f64> = state.v.dequantize_f64().iter().zip(&g).map(|(v, g)| cfg.beta2 * v + (1.0 - cfg.beta2) * g * g).collect();
    state.m = requantize(p.shape(), &m, cfg.state_bits)?;
    state.v = requantize(p.shape(), &v, cfg.state_bits)?;
    state.step += 1;
    let update = adam_update(&state.m.dequantize_f64(), &state.v.dequantize_f64(), state.step, cfg);
    apply_update(p, &update, cfg.lazy)
}

fn adam_update(m: &[f64], v: &[f64], step: u64, cfg: &OptimizerConfig) -> Vec<f64> {
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    m.iter()
        .zip(v)
        .map(|(m, v)| {
            let v_hat = (v / c2).max(0.0);
            cfg.learning_rate * (m / c1) / (v_hat.sqrt() + cfg.epsilon)
        })
        .collect()
}

/// Optimizer state owned by one quantized parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SlotState {
    Sgd,
    Momentum { velocity: QTensor },
    Adam(AdamState),
}

impl SlotState {
    pub fn new(shape: &[usize], cfg: &OptimizerConfig) -> Result<Self> {
        Ok(match cfg.kind {
            OptimizerKind::Sgd => SlotState::Sgd,
            OptimizerKind::Momentum => SlotState::Momentum { velocity: QTensor::zeros(shape.to_vec(), cfg.state_bits)? },
            OptimizerKind::Adam => SlotState::Adam(AdamState::zeros(shape, cfg.state_bits)?),
        })
    }

    /// One optimizer update of `p` with learning rate `lr` (overrides `cfg`).
    pub fn step(&mut self, p: &mut KahanParam, grad: &QTensor, cfg: &OptimizerConfig, lr: f64) -> Result<StepStats> {
        let cfg = OptimizerConfig { learning_rate: lr, ..cfg.clone() };
        match self {
            SlotState::Sgd if cfg.lazy => sgd_step_lazy(p, grad, &cfg),
            SlotState::Sgd => sgd_step_plain(p, grad, &cfg),
            SlotState::Momentum { velocity } => momentum_step(p, grad, velocity, &cfg),
            SlotState::Adam(state) => adam_step(p, grad, state, &cfg),
        }
    }
}

/// Floating-point optimizer state for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum FloatSlotState<T> {
    Sgd,
    Momentum { velocity: Vec<T> },
    Adam { m: Vec<T>, v: Vec<T>, step: u64 },
}

impl<T: Scalar> FloatSlotState<T> {
    pub fn new(len: usize, kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => FloatSlotState::Sgd,
            OptimizerKind::Momentum => FloatSlotState::Momentum { velocity: vec![T::zero(); len] },
            OptimizerKind::Adam => FloatSlotState::Adam { m: vec![T::zero(); len], v: vec![T::zero(); len], step: 0 },
        }
    }

    pub fn step(&mut self, param: &mut [T], grad: &[T], cfg: &OptimizerConfig, lr: f64) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::Shape(format!("gradient of {} for parameter of {}", grad.len(), param.len())));
        }
        let lr_t = T::from_f64_lossy(lr);
        match self {
            FloatSlotState::Sgd => {
                for (p, &g) in param.iter_mut().zip(grad) {
                    *p -= lr_t * g;
                }
            }
            FloatSlotState::Momentum { velocity } => {
                let mu = T::from_f64_lossy(cfg.momentum);
                for ((p, v), &g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
                    *v = mu * *v + lr_t * g;
                    *p -= *v;
                }
            }
            FloatSlotState::Adam { m, v, step } => {
                *step += 1;
                let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
                let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(*step as i32));
                let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(*step as i32));
                let eps = T::from_f64_lossy(cfg.epsilon);
                for (((p, m), v), &g) in param.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad) {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    *p -= lr_t * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Optimizer for a list of quantized parameter tensors (one slot each).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedOptimizer {
    cfg: OptimizerConfig,
    slots: Vec<SlotState>,
    updates: u64,
}

impl QuantizedOptimizer {
    pub fn new(cfg: OptimizerConfig, shapes: &[Vec<usize>]) -> Result<Self> {
        cfg.validate()?;
        let slots = shapes.iter().map(|s| SlotState::new(s, &cfg)).collect::<Result<_>>()?;
        Ok(QuantizedOptimizer { cfg, slots, updates: 0 })
    }

    pub fn from_parts(cfg: OptimizerConfig, slots: Vec<SlotState>, updates: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(QuantizedOptimizer { cfg, slots, updates })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn slots(&self) -> &[SlotState] {
        &self.slots
    }

    /// Number of completed updates.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// One update of every `(parameter, gradient)` pair, in slot order.
    pub fn step(&mut self, pairs: Vec<(&mut KahanParam, &QTensor)>) -> Result<StepStats> {
        if pairs.len() != self.slots.len() {
            return Err(Error::Shape(format!("{} parameters for {} optimizer slots", pairs.len(), self.slots.len())));
        }
        let lr = self.cfg.learning_rate_at(self.updates);
        let mut stats = StepStats::default();
        for (slot, (p, g)) in self.slots.iter_mut().zip(pairs) {
            stats += slot.step(p, g, &self.cfg, lr)?;
        }
        self.updates += 1;
        Ok(stats)
    }
}

/// Floating-point counterpart of [`QuantizedOptimizer`].
#[derive(Debug, Clone, PartialEq)]
pub struct FloatOptimizer<T> {
    cfg: OptimizerConfig,
    slots: Vec<FloatSlotState<T>>,
    updates: u64,
}

impl<T: Scalar> FloatOptimizer<T> {
    pub fn new(cfg: OptimizerConfig, lens: &[usize]) -> Result<Self> {
        cfg.validate()?;
        let slots = lens.iter().map(|&n| FloatSlotState::new(n, cfg.kind)).collect();
        Ok(FloatOptimizer { cfg, slots, updates: 0 })
    }

    pub fn from_parts(cfg: OptimizerConfig, slots: Vec<FloatSlotState<T>>, updates: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(FloatOptimizer { cfg, slots, updates })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn slots(&self) -> &[FloatSlotState<T>] {
        &self.slots
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn step(&mut self, pairs: Vec<(&mut [T], &[T])>) -> Result<()> {
        if pairs.len() != self.slots.len() {
            return Err(Error::Shape(format!("{} parameters for {} optimizer slots", pairs.len(), self.slots.len())));
        }
        let lr = self.cfg.learning_rate_at(self.updates);
        for (slot, (p, g)) in self.slots.iter_mut().zip(pairs) {
            slot.step(p, g, &self.cfg, lr)?;
        }
        self.updates += 1;
        Ok(())
    }
}
