//! Optimizer update rules (Adam, AdamW, SGD with momentum, RMSProp),
//! plateau learning-rate reduction, early stopping, and the epoch loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::mlp::{cce_loss, loss_and_gradients, one_hot, predict, MlpModel};
use crate::numeric::RandomStream;

/// Minimum absolute decrease that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    AdamW,
    SgdMomentum,
    RmsProp,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Adam,
        OptimizerKind::AdamW,
        OptimizerKind::RmsProp,
        OptimizerKind::SgdMomentum,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::SgdMomentum => "sgd",
            OptimizerKind::RmsProp => "rmsprop",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            "sgd" | "sgd_momentum" | "sgdm" => Ok(OptimizerKind::SgdMomentum),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            other => Err(Error::InvalidArgument(format!(
                "unknown optimizer {other:?} (expected adam, adamw, sgd or rmsprop)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// SGD momentum coefficient μ.
    pub momentum: f64,
    /// RMSProp decay β.
    pub rho: f64,
    /// AdamW decoupled weight decay λ.
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        OptimizerConfig {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            momentum: 0.9,
            rho: 0.9,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter accumulators. `first` holds Adam's m or the SGD velocity;
/// `second` holds Adam's v or RMSProp's square average.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub learning_rate: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            learning_rate: config.learning_rate,
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        match self.config.kind {
            OptimizerKind::Adam => self.adam_step(params, grads),
            OptimizerKind::AdamW => self.adamw_step(params, grads),
            OptimizerKind::SgdMomentum => self.sgd_momentum_step(params, grads),
            OptimizerKind::RmsProp => self.rmsprop_step(params, grads),
        }
    }

    fn prepare(&mut self, params: &[&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len()
            || params.iter().zip(grads).any(|(p, g)| p.len() != g.len())
        {
            return Err(Error::DimensionMismatch {
                op: "optimizer step",
                left: format!("{:?}", params.iter().map(|p| p.len()).collect::<Vec<_>>()),
                right: format!("{:?}", grads.iter().map(Vec::len).collect::<Vec<_>>()),
            });
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        } else if self.first.iter().zip(grads).any(|(a, g)| a.len() != g.len())
            || self.first.len() != grads.len()
        {
            return Err(Error::InvalidArgument(
                "parameter shapes changed between optimizer steps".into(),
            ));
        }
        Ok(())
    }

    pub fn adam_step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        self.adaptive_moment_step(params, grads, 0.0)
    }

    /// Adam plus decoupled decay: θ ← θ − η·(m̂/(√v̂ + ε) + λθ).
    pub fn adamw_step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        let decay = self.config.weight_decay;
        self.adaptive_moment_step(params, grads, decay)
    }

    fn adaptive_moment_step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[Vec<f64>],
        decay: f64,
    ) -> Result<()> {
        self.prepare(params, grads)?;
        self.step += 1;
        let OptimizerConfig {
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let lr = self.learning_rate;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                let update = m_hat / (v_hat.sqrt() + epsilon) + decay * p[i];
                p[i] -= lr * update;
            }
        }
        Ok(())
    }

    /// v ← μv + g; θ ← θ − ηv.
    pub fn sgd_momentum_step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[Vec<f64>],
    ) -> Result<()> {
        self.prepare(params, grads)?;
        self.step += 1;
        let mu = self.config.momentum;
        let lr = self.learning_rate;
        for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut self.first) {
            for i in 0..g.len() {
                vel[i] = mu * vel[i] + g[i];
                p[i] -= lr * vel[i];
            }
        }
        Ok(())
    }

    /// v ← βv + (1 − β)g²; θ ← θ − η·g/(√v + ε).
    pub fn rmsprop_step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        self.prepare(params, grads)?;
        self.step += 1;
        let rho = self.config.rho;
        let eps = self.config.epsilon;
        let lr = self.learning_rate;
        for ((p, g), sq) in params.iter_mut().zip(grads).zip(&mut self.second) {
            for i in 0..g.len() {
                sq[i] = rho * sq[i] + (1.0 - rho) * g[i] * g[i];
                p[i] -= lr * g[i] / (sq[i].sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after `patience` reports
/// without improvement, never going below `min_lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub best: f64,
    pub wait: usize,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, min_lr: f64) -> Self {
        PlateauScheduler {
            best: f64::INFINITY,
            wait: 0,
            factor,
            patience,
            min_lr,
        }
    }

    /// Returns true when the learning rate was reduced.
    pub fn update(&mut self, loss: f64, learning_rate: &mut f64) -> Result<bool> {
        if !loss.is_finite() {
            return Err(Error::NonFinite("monitored loss".into()));
        }
        if loss < self.best - MIN_IMPROVEMENT {
            self.best = loss;
            self.wait = 0;
            return Ok(false);
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            let reduced = (*learning_rate * self.factor).max(self.min_lr);
            let changed = reduced < *learning_rate;
            *learning_rate = reduced.min(*learning_rate);
            return Ok(changed);
        }
        Ok(false)
    }
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        PlateauScheduler::new(0.1, 5, 1e-7)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Tracks the best validation loss and a snapshot of the model that
/// achieved it.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub best: f64,
    pub wait: usize,
    pub patience: usize,
    pub best_epoch: Option<usize>,
    snapshot: Option<MlpModel>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            best: f64::INFINITY,
            wait: 0,
            patience,
            best_epoch: None,
            snapshot: None,
        }
    }

    pub fn update(&mut self, epoch: usize, loss: f64, model: &MlpModel) -> Result<StopDecision> {
        if !loss.is_finite() {
            return Err(Error::NonFinite("validation loss".into()));
        }
        if loss < self.best - MIN_IMPROVEMENT {
            self.best = loss;
            self.wait = 0;
            self.best_epoch = Some(epoch);
            self.snapshot = Some(model.clone());
            return Ok(StopDecision::Continue);
        }
        self.wait += 1;
        Ok(if self.wait >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        })
    }

    pub fn best_model(&self) -> Option<&MlpModel> {
        self.snapshot.as_ref()
    }

    pub fn into_best_model(self) -> Option<MlpModel> {
        self.snapshot
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 100,
            early_stop_patience: 10,
            plateau_patience: 5,
            plateau_factor: 0.1,
            min_learning_rate: 1e-7,
            optimizer: OptimizerConfig::new(OptimizerKind::Adam, 1e-4),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.early_stop_patience == 0 || self.plateau_patience == 0 {
            return Err(Error::InvalidArgument("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidArgument("max epochs must be at least 1".into()));
        }
        let lr = self.optimizer.learning_rate;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_accuracy: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainStatus {
    EarlyStopped,
    Completed,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub history: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were returned.
    pub best_epoch: usize,
    pub status: TrainStatus,
}

const SHUFFLE_TAG: u64 = 0x5348_5546;
const DROPOUT_TAG: u64 = 0x4452_4f50;

/// Mini-batch index groups for one epoch; a trailing batch of a single row
/// is merged into its predecessor so batch norm always has two rows.
pub fn epoch_batches(n: usize, batch_size: usize, epoch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RandomStream::derived(seed ^ SHUFFLE_TAG, epoch as u64));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// Mini-batch training with plateau scheduling and early stopping on the
/// validation loss. Without a validation set the scheduler watches the
/// training loss and every epoch runs. Returns the best-validation snapshot.
pub fn train(
    mut model: MlpModel,
    train_set: &FeatureTable,
    val_set: Option<&FeatureTable>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if train_set.len() < 2 {
        return Err(Error::Data("training needs at least 2 rows".into()));
    }
    if let Some(v) = val_set {
        if v.is_empty() {
            return Err(Error::Data("validation set is empty".into()));
        }
    }
    let classes = model.class_count();
    let mut present = vec![false; classes];
    for &l in &train_set.labels {
        if l >= classes {
            return Err(Error::Data(format!("label {l} outside {classes} model classes")));
        }
        present[l] = true;
    }
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(Error::Data(format!(
            "class {missing} has no training samples"
        )));
    }

    let targets = one_hot(&train_set.labels, classes)?;
    let val_targets = val_set.map(|v| one_hot(&v.labels, classes)).transpose()?;
    let mut optimizer = OptimizerState::new(config.optimizer);
    let mut scheduler = PlateauScheduler::new(
        config.plateau_factor,
        config.plateau_patience,
        config.min_learning_rate,
    );
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut history = Vec::new();
    let mut status = TrainStatus::Completed;

    for epoch in 1..=config.max_epochs {
        let lr_used = optimizer.learning_rate;
        let mut dropout_stream = RandomStream::derived(config.seed ^ DROPOUT_TAG, epoch as u64);
        let mut loss_sum = 0.0;
        for batch in epoch_batches(train_set.len(), config.batch_size, epoch, config.seed) {
            let x = train_set.features.select_rows(&batch);
            let y = targets.select_rows(&batch);
            let (loss, grads, pass) = loss_and_gradients(&model, &x, &y, &mut dropout_stream)?;
            model.update_running_stats(&pass);
            optimizer.step(&mut model.params_mut(), &grads.tensors)?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }

        let (val_loss, val_accuracy) = match (val_set, &val_targets) {
            (Some(v), Some(vt)) => {
                let (pred, probs) = predict(&model, &v.features)?;
                let loss = cce_loss(&probs, vt)?;
                let correct = pred.iter().zip(&v.labels).filter(|(p, t)| p == t).count();
                (Some(loss), Some(correct as f64 / v.len() as f64))
            }
            _ => (None, None),
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            learning_rate: lr_used,
        });

        let monitored = val_loss.unwrap_or(train_loss);
        scheduler.update(monitored, &mut optimizer.learning_rate)?;
        if val_loss.is_some() && stopper.update(epoch, monitored, &model)? == StopDecision::Stop {
            status = TrainStatus::EarlyStopped;
            break;
        }
    }

    let final_epoch = history.len();
    let (model, best_epoch) = match (stopper.best_epoch, val_set) {
        (Some(e), Some(_)) => (stopper.into_best_model().expect("snapshot with best epoch"), e),
        _ => (model, final_epoch),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(kind: OptimizerKind, lr: f64) -> OptimizerState {
        OptimizerState::new(OptimizerConfig::new(kind, lr))
    }

    fn run(state: &mut OptimizerState, theta: &mut f64, g: f64) {
        let mut p = [*theta];
        state.step(&mut [&mut p[..]], &[vec![g]]).unwrap();
        *theta = p[0];
    }

    #[test]
    fn adam_first_step() {
        let mut s = scalar(OptimizerKind::Adam, 0.001);
        let mut theta = 0.0;
        run(&mut s, &mut theta, 2.0);
        assert!((theta - (-0.001 * 2.0 / (2.0 + 1e-8))).abs() < 1e-12);
        assert!((theta + 0.0009999999).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in OptimizerKind::ALL {
            let mut s = OptimizerState::new(OptimizerConfig {
                weight_decay: 0.0,
                ..OptimizerConfig::new(kind, 0.1)
            });
            let mut theta = 0.7;
            for _ in 0..5 {
                run(&mut s, &mut theta, 0.0);
            }
            assert_eq!(theta, 0.7, "{kind}");
        }
    }

    #[test]
    fn adamw_pure_decay() {
        let mut s = scalar(OptimizerKind::AdamW, 0.001);
        let mut theta = 1.0;
        run(&mut s, &mut theta, 0.0);
        assert!((theta - 0.99999).abs() < 1e-12);
        let mut prev = theta;
        for _ in 0..50 {
            run(&mut s, &mut theta, 0.0);
            assert!((theta / prev - (1.0 - 1e-5)).abs() < 1e-12);
            prev = theta;
        }
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let mut s = scalar(OptimizerKind::SgdMomentum, 0.1);
        let mut theta = 1.0;
        run(&mut s, &mut theta, 0.5);
        assert!((theta - 0.95).abs() < 1e-12);
        assert!((s.first_moments()[0][0] - 0.5).abs() < 1e-15);
        run(&mut s, &mut theta, 0.5);
        assert!((theta - 0.855).abs() < 1e-12);
        assert!((s.first_moments()[0][0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_without_momentum_is_gradient_descent() {
        let mut s = OptimizerState::new(OptimizerConfig {
            momentum: 0.0,
            ..OptimizerConfig::new(OptimizerKind::SgdMomentum, 0.1)
        });
        let mut theta = 1.0;
        for _ in 0..3 {
            run(&mut s, &mut theta, 0.5);
        }
        assert!((theta - 0.85).abs() < 1e-12);
    }

    #[test]
    fn rmsprop_first_step_and_decay() {
        let mut s = scalar(OptimizerKind::RmsProp, 0.01);
        let mut theta = 0.0;
        run(&mut s, &mut theta, 1.0);
        assert!((s.second_moments()[0][0] - 0.1).abs() < 1e-15);
        assert!((theta + 0.0316228).abs() < 1e-7);
        run(&mut s, &mut theta, 0.0);
        assert!((s.second_moments()[0][0] - 0.09).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_constant_gradient_approaches_lr() {
        let mut s = scalar(OptimizerKind::RmsProp, 0.01);
        let mut theta = 0.0;
        let mut last = 0.0;
        for _ in 0..400 {
            let before = theta;
            run(&mut s, &mut theta, 0.3);
            last = before - theta;
        }
        assert!((last - 0.01).abs() < 1e-6, "{last}");
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut s = scalar(OptimizerKind::Adam, 0.1);
        let mut p = [0.0, 1.0];
        assert!(s.step(&mut [&mut p[..]], &[vec![1.0]]).is_err());
        assert!(s.step(&mut [&mut p[..]], &[vec![f64::NAN, 1.0]]).is_err());
    }

    #[test]
    fn scheduler_trace() {
        let mut s = PlateauScheduler::default();
        let mut lr = 1.0;
        let losses = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95];
        let reduced: Vec<bool> = losses.iter().map(|&l| s.update(l, &mut lr).unwrap()).collect();
        assert_eq!(reduced, vec![false, false, false, false, false, false, true]);
        assert!((lr - 0.1).abs() < 1e-15);
    }

    #[test]
    fn scheduler_respects_floor() {
        let mut s = PlateauScheduler::new(0.1, 1, 1e-3);
        let mut lr = 1e-3;
        for _ in 0..5 {
            s.update(1.0, &mut lr).unwrap();
        }
        assert_eq!(lr, 1e-3);
        assert!(s.update(f64::NAN, &mut lr).is_err());
    }

    #[test]
    fn early_stop_resets_on_improvement() {
        let model = crate::mlp::MlpModel::init(
            &crate::mlp::MlpSpec::with_hidden(2, &[], 2),
            &mut RandomStream::new(0),
        )
        .unwrap();
        let mut es = EarlyStopping::new(10);
        assert_eq!(es.update(1, 1.0, &model).unwrap(), StopDecision::Continue);
        for e in 2..=10 {
            assert_eq!(es.update(e, 1.5, &model).unwrap(), StopDecision::Continue);
        }
        assert_eq!(es.update(11, 0.5, &model).unwrap(), StopDecision::Continue);
        assert_eq!(es.wait, 0);
        for e in 12..=20 {
            assert_eq!(es.update(e, 0.6, &model).unwrap(), StopDecision::Continue);
        }
        assert_eq!(es.update(21, 0.6, &model).unwrap(), StopDecision::Stop);
        assert_eq!(es.best_epoch, Some(11));
    }

    #[test]
    fn batches_cover_every_row_once() {
        let batches = epoch_batches(65, 32, 3, 9);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[1].len(), 33);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..65).collect::<Vec<_>>());
        assert_eq!(epoch_batches(70, 32, 1, 9).len(), 3);
    }
}
